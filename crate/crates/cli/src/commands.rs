//! The four subcommands. Each returns the paths it wrote (or the report it
//! printed) so that tests can inspect them without a subprocess.

use std::path::{Path, PathBuf};

use fbsplit::grids::{cfl_certificate, min_rate, EGrid, PBox, SubGrid};
use fbsplit::models::{validate_class, ModelSpec};
use fbsplit::report::{
    comparison_csv, fmt_num, key_value_csv, rate_csv, read_solution_csv, solution_csv, write_atomic, Comparison, SolutionTable,
};
use fbsplit::splitting::{rate_experiment, run_alt_scheme, run_nn_scheme, run_proxy, RateReport, SchemeResult};
use fbsplit::transport::FdScheme;

use crate::config::{RunConfig, Scheme};
use crate::error::CliError;

/// Samples drawn by `validate`.
pub const VALIDATION_SAMPLES: usize = 4000;

fn out_path(cfg: &RunConfig, suffix: &str) -> PathBuf {
    cfg.out_dir.join(format!("{}_{suffix}.csv", cfg.label))
}

/// Runs the configured scheme with `steps` time steps.
pub fn run_scheme(cfg: &RunConfig, model: &ModelSpec, steps: usize) -> Result<SchemeResult, CliError> {
    let grid = cfg.grid()?;
    let result = match cfg.scheme {
        Scheme::Alt => run_alt_scheme(model, steps, cfg.m, &grid, cfg.memory_budget_mb)?,
        Scheme::Nn => run_nn_scheme(model, &cfg.nn_config(model, steps)?)?,
    };
    Ok(result)
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub result: SchemeResult,
    pub solution: PathBuf,
    pub meta: PathBuf,
    pub timing: PathBuf,
}

/// `run`: solution table, resolved config and wall-clock time.
pub fn cmd_run(cfg: &RunConfig) -> Result<RunOutput, CliError> {
    let model = cfg.model_spec()?;
    log::info!("run {} scheme, model {}, d={}, N={}", cfg.scheme.name(), cfg.model.name(), cfg.dim, cfg.n);
    let result = run_scheme(cfg, &model, cfg.n)?;

    let mut meta = cfg.resolved();
    meta.push(("result_scheme".into(), result.scheme.clone()));
    meta.push(("monotonicity_defect".into(), fmt_num(result.monotonicity_defect)));
    let timing = vec![("runtime_s".to_string(), fmt_num(result.runtime_s))];

    // Render everything first so a rendering failure leaves no files behind.
    let files = [
        (out_path(cfg, "solution"), solution_csv(&result)?),
        (out_path(cfg, "meta"), key_value_csv(&meta)?),
        (out_path(cfg, "timing"), key_value_csv(&timing)?),
    ];
    for (path, bytes) in &files {
        write_atomic(path, bytes)?;
    }
    let [solution, meta, timing] = files.map(|(p, _)| p);
    Ok(RunOutput {
        result,
        solution,
        meta,
        timing,
    })
}

/// One side of a comparison: a solution file, or a config that is run.
#[derive(Clone, Debug)]
pub enum CompareInput {
    Solution(PathBuf),
    Config(Box<RunConfig>),
}

impl CompareInput {
    /// `.csv` paths are solution tables, anything else is a config.
    pub fn from_path(path: &Path, overrides: &crate::config::Overrides) -> Result<Self, CliError> {
        if path.extension().is_some_and(|e| e == "csv") {
            Ok(CompareInput::Solution(path.to_path_buf()))
        } else {
            Ok(CompareInput::Config(Box::new(RunConfig::from_file(path, overrides)?)))
        }
    }

    fn load(&self) -> Result<(SolutionTable, f64), CliError> {
        match self {
            CompareInput::Solution(path) => {
                let table = read_solution_csv(path)
                    .map_err(|e| CliError::Config(format!("cannot read solution {}: {e}", path.display())))?;
                Ok((table, sibling_runtime(path).unwrap_or(f64::NAN)))
            }
            CompareInput::Config(cfg) => {
                let model = cfg.model_spec()?;
                let r = run_scheme(cfg, &model, cfg.n)?;
                Ok((
                    SolutionTable {
                        grid: r.grid,
                        values: r.values,
                    },
                    r.runtime_s,
                ))
            }
        }
    }
}

/// Runtime from `<label>_timing.csv` next to `<label>_solution.csv`, if any.
fn sibling_runtime(solution: &Path) -> Option<f64> {
    let name = solution.file_name()?.to_str()?;
    let stem = name.strip_suffix("_solution.csv")?;
    let text = std::fs::read_to_string(solution.with_file_name(format!("{stem}_timing.csv"))).ok()?;
    text.lines()
        .find_map(|l| l.strip_prefix("runtime_s,"))
        .and_then(|v| v.trim().parse().ok())
}

#[derive(Clone, Debug)]
pub struct CompareOutput {
    pub comparison: Comparison,
    pub table: PathBuf,
    pub summary: PathBuf,
}

/// `compare`: per-node table and a one-row summary. Runtimes read from a
/// solution file's timing sibling are `NaN` when that file is absent.
pub fn cmd_compare(a: &CompareInput, b: &CompareInput, out_dir: &Path, label: &str) -> Result<CompareOutput, CliError> {
    let (ta, rt_a) = a.load()?;
    let (tb, rt_b) = b.load()?;
    let comparison = comparison_csv(&ta, &tb, rt_a, rt_b)?;
    let table = out_dir.join(format!("{label}_compare.csv"));
    let summary = out_dir.join(format!("{label}_compare_summary.csv"));
    write_atomic(&table, &comparison.table)?;
    write_atomic(&summary, &comparison.summary)?;
    log::info!("compare: l1 {:.6e}, linf {:.6e}", comparison.l1, comparison.linf);
    Ok(CompareOutput {
        comparison,
        table,
        summary,
    })
}

#[derive(Clone, Debug)]
pub struct RateOutput {
    pub report: RateReport,
    pub path: PathBuf,
}

/// `rate`: L1 distance of the configured scheme at every `rate_Ns` entry to
/// the proxy at `rate_ref_N` steps with `proxy_M` particles.
pub fn cmd_rate(cfg: &RunConfig) -> Result<RateOutput, CliError> {
    if cfg.rate_ns.len() < 3 {
        return Err(CliError::Config(format!(
            "`rate_Ns` needs at least 3 entries, got {}",
            cfg.rate_ns.len()
        )));
    }
    if cfg.rate_ns.windows(2).any(|w| w[0] >= w[1]) {
        return Err(CliError::Config("`rate_Ns` must be strictly increasing".into()));
    }
    let model = cfg.model_spec()?;
    let grid = cfg.grid()?;
    let rate_err = |e: CliError| CliError::Rate(e.to_string());
    let reference = run_proxy(&model, cfg.rate_ref_n, cfg.proxy_m, &grid, cfg.memory_budget_mb)
        .map_err(|e| rate_err(e.into()))?;
    let report = rate_experiment(&cfg.rate_ns, &reference, |n| {
        run_scheme(cfg, &model, n).map_err(|e| match e {
            CliError::Solver(inner) => inner,
            other => fbsplit::Error::InvalidParameter(other.to_string()),
        })
    })
    .map_err(|e| rate_err(e.into()))?;
    if !report.errors_decreasing() {
        log::warn!("rate: l1 errors are not monotonically decreasing");
    }
    let path = out_path(cfg, "rate");
    write_atomic(&path, &rate_csv(&report)?)?;
    log::info!("rate: slope {:.4}", report.slope);
    Ok(RateOutput { report, path })
}

/// Outcome of `validate`, rendered as text by [`ValidateReport::render`].
#[derive(Clone, Debug)]
pub struct ValidateReport {
    pub lines: Vec<String>,
    pub violations: Vec<String>,
    pub certificate: f64,
    /// Whether the certificate binds (finite-difference transport only).
    pub cfl_applies: bool,
    pub upwind_min_rate: Option<f64>,
}

impl ValidateReport {
    pub fn render(&self) -> String {
        let mut s = self.lines.join("\n");
        s.push('\n');
        s
    }

    /// Structural violations first (exit 7), then transport refusals (exit 3).
    pub fn into_result(self) -> Result<ValidateReport, CliError> {
        if !self.violations.is_empty() {
            return Err(CliError::Structure(self.violations.join("; ")));
        }
        if self.cfl_applies && self.certificate >= 1.0 {
            return Err(CliError::Cfl(format!("c* = {:.6} >= 1", self.certificate)));
        }
        if let Some(m) = self.upwind_min_rate.filter(|m| *m < 0.0) {
            return Err(CliError::Cfl(format!("upwind needs a non-negative rate, found {m:.6}")));
        }
        Ok(self)
    }
}

/// Structural checks of `model` on `pbox` and the CFL certificate of the
/// finite-difference transport on `grid` with `sub`. Without a `transport`
/// the certificate is reported but does not fail the check.
pub fn validate_model(model: &ModelSpec, pbox: &PBox, grid: &EGrid, sub: &SubGrid, transport: Option<FdScheme>) -> Result<ValidateReport, CliError> {
    let report = validate_class(model, pbox, VALIDATION_SAMPLES)?;
    let certificate = cfl_certificate(model, pbox, grid, sub);
    let upwind_min_rate = (transport == Some(FdScheme::Upwind)).then(|| min_rate(model, pbox));
    let verdict = |ok: bool| if ok { "pass" } else { "FAIL" };
    let mut lines = vec![
        format!("model: {} (d = {})", model.family().name(), model.dim()),
        format!("box: [{}, {}]^d", pbox.lower(), pbox.upper()),
        format!("rate monotonicity constant l1: {:.6e}", report.l1),
        format!("rate monotonicity constant l2: {:.6e}", report.l2),
        format!("rate Lipschitz in p: {:.6e}", report.rate_lipschitz),
        format!("terminal Lipschitz in p: {:.6e}", report.terminal_lipschitz),
        format!("terminal in [0, 1]: {}", verdict(report.terminal_in_range)),
        format!("terminal non-decreasing in e: {}", verdict(report.terminal_monotone)),
    ];
    for v in &report.violations {
        lines.push(format!("violation: {v}"));
    }
    lines.push(format!("structure: {}", verdict(report.passed())));
    let cfl_applies = transport.is_some();
    if cfl_applies {
        lines.push(format!("CFL certificate c*: {:.6e} ({})", certificate, verdict(certificate < 1.0)));
    } else {
        lines.push(format!("CFL certificate c*: {certificate:.6e} (not binding for particle transport)"));
    }
    if let Some(m) = upwind_min_rate {
        lines.push(format!("upwind minimum rate: {:.6e} ({})", m, verdict(m >= 0.0)));
    }
    Ok(ValidateReport {
        lines,
        violations: report.violations,
        certificate,
        cfl_applies,
        upwind_min_rate,
    })
}

/// `validate`: the configured model, box and transport grid.
pub fn cmd_validate(cfg: &RunConfig) -> Result<ValidateReport, CliError> {
    let model = cfg.model_spec()?;
    let pbox = cfg.pbox(&model)?;
    let sub = SubGrid::new(cfg.k, cfg.horizon / cfg.n as f64)?;
    let transport = match cfg.scheme {
        Scheme::Nn => Some(cfg.fd_scheme()),
        Scheme::Alt => None,
    };
    validate_model(&model, &pbox, &cfg.grid()?, &sub, transport)
}

#[cfg(test)]
mod tests {
    use super::*;
    use fbsplit::models::ModelBuilder;

    fn cfg(text: &str, dir: &Path) -> RunConfig {
        let mut c = RunConfig::from_toml_str(text).unwrap();
        c.out_dir = dir.to_path_buf();
        c
    }

    #[test]
    fn run_writes_three_files() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg("N = 2\nM = 4\nJ = 9\nlabel = \"t\"", dir.path());
        let out = cmd_run(&c).unwrap();
        let meta = std::fs::read_to_string(&out.meta).unwrap();
        assert!(meta.starts_with("key,value\nmodel,linear\n"));
        assert!(meta.contains("\nscheme,alt\n") && meta.contains("\nseed,0\n"));
        assert!(!meta.contains("runtime"));
        let timing = std::fs::read_to_string(&out.timing).unwrap();
        assert!(timing.starts_with("key,value\nruntime_s,"));
        assert_eq!(std::fs::read_to_string(&out.solution).unwrap().lines().count(), 10);
    }

    #[test]
    fn memory_guard_exit_code() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg("dim = 3\nN = 40\nM = 100000\nmemory_budget_mb = 1", dir.path());
        let err = cmd_run(&c).unwrap_err();
        assert_eq!(err.exit_code(), 4);
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn nn_cfl_refusal_exit_code() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg("scheme = \"nn\"\nN = 1\nK = 1\nJ = 400", dir.path());
        assert_eq!(cmd_run(&c).unwrap_err().exit_code(), 3);
    }

    #[test]
    fn sibling_runtime_is_found() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg("N = 1\nM = 2\nJ = 5\nlabel = \"s\"", dir.path());
        let out = cmd_run(&c).unwrap();
        let rt = sibling_runtime(&out.solution).unwrap();
        assert_eq!(rt, out.result.runtime_s);
        assert!(sibling_runtime(&dir.path().join("other.csv")).is_none());
    }

    #[test]
    fn rate_needs_three_increasing_ns() {
        let dir = tempfile::tempdir().unwrap();
        for ns in ["[4, 8]", "[4, 8, 8]", "[16, 8, 4]"] {
            let c = cfg(&format!("rate_Ns = {ns}"), dir.path());
            assert_eq!(cmd_rate(&c).unwrap_err().exit_code(), 2, "{ns}");
        }
    }

    #[test]
    fn rate_run_failures_exit_six() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg("rate_Ns = [2, 4, 8]\nrate_ref_N = 16\nproxy_M = 50\nM = 100000\nmemory_budget_mb = 1\ndim = 3", dir.path());
        assert_eq!(cmd_rate(&c).unwrap_err().exit_code(), 6);
    }

    #[test]
    fn broken_rate_is_a_structural_failure() {
        // increasing in y instead of decreasing
        let model = ModelBuilder::new(1)
            .additive(1.0)
            .rate(|_: &[f64], y: f64| y)
            .antiderivative(|_: &[f64], y: f64| 0.5 * y * y)
            .build()
            .unwrap();
        let grid = EGrid::new(50, -2.0, 2.0).unwrap();
        let sub = SubGrid::new(20, 1.0 / 32.0).unwrap();
        let report = validate_model(&model, &PBox::symmetric(3.0), &grid, &sub, None).unwrap();
        assert!(!report.violations.is_empty());
        assert!(report.render().contains("structure: FAIL"));
        assert_eq!(report.into_result().unwrap_err().exit_code(), 7);
    }

    #[test]
    fn builtin_models_validate() {
        let dir = tempfile::tempdir().unwrap();
        for text in [
            "model = \"linear\"",
            "model = \"linear\"\ndim = 3\nscheme = \"nn\"",
            "model = \"bm_positive\"\ndim = 2",
            "model = \"bm_positive\"\ndim = 2\nscheme = \"nn\"",
            "model = \"multiplicative\"\nsigma = 0.3",
            "model = \"multiplicative\"\nscheme = \"nn\"\nK = 40",
        ] {
            let r = cmd_validate(&cfg(text, dir.path())).unwrap();
            assert!(r.clone().into_result().is_ok(), "{text}\n{}", r.render());
        }
    }

    #[test]
    fn small_k_fails_cfl() {
        let dir = tempfile::tempdir().unwrap();
        let r = cmd_validate(&cfg("scheme = \"nn\"\nK = 1\nJ = 2000\nN = 1", dir.path())).unwrap();
        assert!(r.certificate >= 1.0);
        assert_eq!(r.into_result().unwrap_err().exit_code(), 3);
    }
}
