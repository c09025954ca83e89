//! End-to-end backward schemes: the cubature/particle scheme, the
//! regression scheme, the one-dimensional proxy, error metrics and the
//! convergence-rate harness.

use std::time::Instant;

use ndarray::Array2;
use rayon::prelude::*;

use crate::diffusion::{diffusion_merge_step, lattice_size, CubatureLattice, EulerSampler, PathEnsemble};
use crate::error::{Error, Result};
use crate::grids::{cfl_certificate, discretize_terminal, min_rate, project_p, EGrid, GridFunction, PBox, SubGrid, TimeGrid};
use crate::isotonic::monotone_cdf_projection;
use crate::models::{reduce_to_1d, ModelSpec, Terminal};
use crate::neuralreg::{train_time_step, xavier_init, Batch, RegressionNet, TrainConfig};
use crate::transport::{cdf_eval, spd_transport, FdScheme, ParticleCdf};

/// Default lattice memory budget, in megabytes.
pub const DEFAULT_MEMORY_BUDGET_MB: u64 = 4096;
/// Default time steps and particles of the proxy run.
pub const DEFAULT_PROXY_N: usize = 64;
pub const DEFAULT_PROXY_M: usize = 3500;

/// Approximation of the value function at `(0, P₀, ·)` on an e-grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SchemeResult {
    pub grid: EGrid,
    pub values: GridFunction,
    pub scheme: String,
    /// `(key, value)` pairs describing the run.
    pub provenance: Vec<(String, String)>,
    pub runtime_s: f64,
    /// Largest adjacent inversion before the monotone projection.
    pub monotonicity_defect: f64,
}

impl SchemeResult {
    fn finish(grid: EGrid, raw: Vec<f64>, scheme: &str, provenance: Vec<(String, String)>, start: Instant) -> Self {
        let raw = GridFunction(raw);
        let defect = raw.monotonicity_defect();
        let values = GridFunction(monotone_cdf_projection(raw.values()));
        Self {
            grid,
            values,
            scheme: scheme.to_string(),
            provenance,
            runtime_s: start.elapsed().as_secs_f64(),
            monotonicity_defect: defect,
        }
    }
}

fn kv(key: &str, value: impl ToString) -> (String, String) {
    (key.to_string(), value.to_string())
}

/// Bytes needed by the level-`N` particle payloads.
pub fn lattice_memory_bytes(d: usize, n: usize, m: usize) -> u128 {
    lattice_size(d, n) * m as u128 * 8
}

/// Cubature-lattice scheme with sticky-particle transport.
///
/// Level-`N` payloads are `M` particles at the indicator threshold; each
/// backward step merges the `2d` children of a node and transports the result
/// with `p = 𝔓(t_n, w)` over `𝔥 = T/N`. The root cloud is read off on `grid`.
pub fn run_alt_scheme(model: &ModelSpec, steps: usize, particles: usize, grid: &EGrid, memory_budget_mb: u64) -> Result<SchemeResult> {
    let start = Instant::now();
    if steps == 0 || particles == 0 {
        return Err(Error::InvalidParameter("alt scheme needs N >= 1 and M >= 1".into()));
    }
    if !model.has_brownian_map() {
        return Err(Error::NoBrownianMap(model.family().name().into()));
    }
    let threshold = match model.terminal() {
        Terminal::Indicator { threshold, .. } => *threshold,
        Terminal::General(_) => return Err(Error::NonIndicatorTerminal(model.family().name().into())),
    };
    let d = model.dim();
    let required = lattice_memory_bytes(d, steps, particles);
    let budget = memory_budget_mb as u128 * 1024 * 1024;
    if required > budget {
        return Err(Error::MemoryBudget {
            required_mb: (required / (1024 * 1024)) as u64 + 1,
            budget_mb: memory_budget_mb,
        });
    }
    let timegrid = TimeGrid::new(steps, model.horizon())?;
    let h = timegrid.step();
    let lattice = CubatureLattice::new(d, h, steps)?;

    let leaf = ParticleCdf::constant(threshold, particles);
    let mut payloads = vec![leaf; lattice.level_size(steps) as usize];
    for n in (0..steps).rev() {
        let merged = diffusion_merge_step(&lattice, n, &payloads)?;
        let keys = lattice.level_keys(n);
        let t = timegrid.time(n);
        payloads = keys
            .par_iter()
            .zip(merged.par_iter())
            .map(|(key, cloud)| {
                let p = model
                    .brownian_map(t, &lattice.position(key))
                    .expect("brownian map checked above");
                spd_transport(model, &p, cloud, h)
            })
            .collect();
    }
    let root = &payloads[0];
    let raw = grid.nodes().iter().map(|&e| cdf_eval(root, e)).collect();
    let provenance = vec![
        kv("scheme", "alt"),
        kv("model", model.family()),
        kv("dim", d),
        kv("N", steps),
        kv("M", particles),
    ];
    Ok(SchemeResult::finish(*grid, raw, "alt", provenance, start))
}

/// `reduce_to_1d` followed by the particle scheme.
pub fn run_proxy(model: &ModelSpec, steps: usize, particles: usize, grid: &EGrid, memory_budget_mb: u64) -> Result<SchemeResult> {
    let reduced = reduce_to_1d(model)?;
    let mut result = run_alt_scheme(&reduced, steps, particles, grid, memory_budget_mb)?;
    result.scheme = "proxy".into();
    result.provenance[0] = kv("scheme", "proxy");
    Ok(result)
}

/// Settings of the regression scheme.
#[derive(Clone, Debug, PartialEq)]
pub struct NnConfig {
    pub steps: usize,
    pub substeps: usize,
    pub grid: EGrid,
    pub pbox: PBox,
    pub transport: FdScheme,
    pub train: TrainConfig,
    /// Size of the fresh ensemble averaged at the first step.
    pub paths: usize,
    /// Seed of the Euler paths; the network seed is `train.seed`.
    pub seed: u64,
}

/// `γ̄_{n+1}` evaluated on a set of points, clamped to `[0, 1]`.
enum NextLayer<'a> {
    Terminal(&'a ModelSpec),
    Net(&'a RegressionNet),
}

impl NextLayer<'_> {
    fn eval(&self, points: &Array2<f64>, grid: &EGrid) -> Vec<GridFunction> {
        match self {
            NextLayer::Terminal(model) => points
                .rows()
                .into_iter()
                .map(|p| discretize_terminal(model, p.as_slice().unwrap(), grid))
                .collect(),
            NextLayer::Net(net) => net
                .predict_y(points.view())
                .rows()
                .into_iter()
                .map(|r| GridFunction(r.iter().map(|v| v.clamp(0.0, 1.0)).collect()))
                .collect(),
        }
    }
}

fn positions_at(ens: &PathEnsemble, n: usize, range: std::ops::Range<usize>) -> Array2<f64> {
    let d = ens.dim();
    let rows = range.len();
    let mut a = Array2::zeros((rows, d));
    for (r, i) in range.enumerate() {
        a.row_mut(r).assign(&ndarray::ArrayView1::from(ens.position(i, n)));
    }
    a
}

fn increments_at(ens: &PathEnsemble, n: usize, range: std::ops::Range<usize>) -> Array2<f64> {
    let d = ens.dim();
    let rows = range.len();
    let mut a = Array2::zeros((rows, d));
    for (r, i) in range.enumerate() {
        a.row_mut(r).assign(&ndarray::ArrayView1::from(ens.increment(i, n)));
    }
    a
}

/// `𝒯^𝔈(project_p(p), θ)` for every row of `points`.
fn transport_all(model: &ModelSpec, cfg: &NnConfig, sub: &SubGrid, points: &Array2<f64>, thetas: &[GridFunction]) -> Result<Vec<GridFunction>> {
    let rows: Vec<Vec<f64>> = points.rows().into_iter().map(|r| r.to_vec()).collect();
    rows.par_iter()
        .zip(thetas.par_iter())
        .map(|(p, theta)| cfg.transport.apply(model, &project_p(p, &cfg.pbox), theta, &cfg.grid, sub))
        .collect()
}

fn stack(rows: &[GridFunction], width: usize) -> Array2<f64> {
    let mut a = Array2::zeros((rows.len(), width));
    for (r, g) in rows.iter().enumerate() {
        a.row_mut(r).assign(&ndarray::ArrayView1::from(g.values()));
    }
    a
}

/// Checks the CFL certificate and, for upwind, the sign of the rate.
pub fn check_transport(model: &ModelSpec, cfg: &NnConfig) -> Result<()> {
    let sub = SubGrid::new(cfg.substeps, model.horizon() / cfg.steps as f64)?;
    let certificate = cfl_certificate(model, &cfg.pbox, &cfg.grid, &sub);
    if certificate >= 1.0 {
        return Err(Error::Cfl { certificate });
    }
    if cfg.transport == FdScheme::Upwind {
        let m = min_rate(model, &cfg.pbox);
        if m < 0.0 {
            return Err(Error::UpwindDirection { min_rate: m });
        }
    }
    Ok(())
}

/// Regression scheme: backward in time, fit `γ̄_n` to the transported,
/// clamped `γ̄_{n+1}` along Euler paths; at the first step average the
/// transported `γ̄_1` over a fresh ensemble.
pub fn run_nn_scheme(model: &ModelSpec, cfg: &NnConfig) -> Result<SchemeResult> {
    let start = Instant::now();
    if cfg.steps == 0 || cfg.paths == 0 {
        return Err(Error::InvalidParameter("nn scheme needs N >= 1 and paths >= 1".into()));
    }
    cfg.train.validate()?;
    check_transport(model, cfg)?;
    let timegrid = TimeGrid::new(cfg.steps, model.horizon())?;
    let sub = SubGrid::new(cfg.substeps, timegrid.step())?;
    let sampler = EulerSampler::new(model.clone(), timegrid, cfg.seed);
    let j_count = cfg.grid.len();

    let pool = cfg.train.pool_size();
    let val_size = cfg.train.val_size;
    let ens = if cfg.steps > 1 {
        Some(sampler.sample_paths(pool + val_size))
    } else {
        None
    };

    let mut next_net: Option<RegressionNet> = None;
    for n in (1..cfg.steps).rev() {
        let ens = ens.as_ref().unwrap();
        let all = 0..pool + val_size;
        let next_points = positions_at(ens, n + 1, all.clone());
        let thetas = match &next_net {
            Some(net) => NextLayer::Net(net),
            None => NextLayer::Terminal(model),
        }
        .eval(&next_points, &cfg.grid);
        let targets = stack(&transport_all(model, cfg, &sub, &next_points, &thetas)?, j_count);
        let inputs = positions_at(ens, n, all.clone());
        let dw = increments_at(ens, n, all);
        let data = Batch::new(inputs, dw, targets)?;
        let train = data.select(&(0..pool).collect::<Vec<_>>());
        let val = data.select(&(pool..pool + val_size).collect::<Vec<_>>());

        let mut init = match next_net.take() {
            Some(net) => net,
            None => {
                let mut net = RegressionNet::for_scheme(model.dim(), j_count)?;
                xavier_init(&mut net, cfg.train.seed);
                net
            }
        };
        init.fit_standardization(train.inputs.view());
        let outcome = train_time_step(init, &train, &val, &cfg.train, n)?;
        log::info!(
            "step {n}: {} iterations, validation loss {:.3e}",
            outcome.iterations,
            outcome.best_val_loss
        );
        next_net = Some(outcome.net);
    }

    let first = (pool + val_size) as u64;
    let fresh = sampler.sample_paths_from(first, cfg.paths);
    let points = positions_at(&fresh, 1, 0..cfg.paths);
    let thetas = match &next_net {
        Some(net) => NextLayer::Net(net),
        None => NextLayer::Terminal(model),
    }
    .eval(&points, &cfg.grid);
    let transported = transport_all(model, cfg, &sub, &points, &thetas)?;
    let mut mean = vec![0.0; j_count];
    for g in &transported {
        for (m, v) in mean.iter_mut().zip(g.values()) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= cfg.paths as f64;
    }
    let provenance = vec![
        kv("scheme", "nn"),
        kv("model", model.family()),
        kv("dim", model.dim()),
        kv("N", cfg.steps),
        kv("K", cfg.substeps),
        kv("transport", cfg.transport.name()),
        kv("seed", cfg.seed),
        kv("nn_seed", cfg.train.seed),
    ];
    Ok(SchemeResult::finish(cfg.grid, mean, "nn", provenance, start))
}

fn check_same_grid(a: &SchemeResult, b: &SchemeResult) -> Result<()> {
    if a.grid != b.grid {
        return Err(Error::GridMismatch(format!("{:?} vs {:?}", a.grid, b.grid)));
    }
    Ok(())
}

/// `δ Σ_j |a_j − b_j|`.
pub fn l1_distance(grid: &EGrid, a: &[f64], b: &[f64]) -> f64 {
    grid.spacing() * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// `max_j |a_j − b_j|`.
pub fn linf_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn l1_error(a: &SchemeResult, b: &SchemeResult) -> Result<f64> {
    check_same_grid(a, b)?;
    Ok(l1_distance(&a.grid, a.values.values(), b.values.values()))
}

pub fn linf_error(a: &SchemeResult, b: &SchemeResult) -> Result<f64> {
    check_same_grid(a, b)?;
    Ok(linf_distance(a.values.values(), b.values.values()))
}

/// Least-squares slope of `log(error)` against `log(N)`.
pub fn fit_slope(ns: &[usize], errors: &[f64]) -> Result<f64> {
    if ns.len() != errors.len() {
        return Err(Error::LengthMismatch {
            expected: ns.len(),
            actual: errors.len(),
        });
    }
    if ns.len() < 2 {
        return Err(Error::InvalidParameter("slope needs at least two points".into()));
    }
    if let Some(e) = errors.iter().find(|e| !(**e > 0.0 && e.is_finite())) {
        return Err(Error::InvalidParameter(format!("errors must be positive and finite, got {e}")));
    }
    let x: Vec<f64> = ns.iter().map(|&n| (n as f64).ln()).collect();
    let y: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let k = x.len() as f64;
    let mx = x.iter().sum::<f64>() / k;
    let my = y.iter().sum::<f64>() / k;
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    Ok(sxy / sxx)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RateReport {
    /// `(N, L1 error against the reference)`.
    pub points: Vec<(usize, f64)>,
    pub slope: f64,
    pub reference: String,
}

impl RateReport {
    pub fn errors_decreasing(&self) -> bool {
        self.points.windows(2).all(|w| w[1].1 < w[0].1)
    }
}

/// Runs `run(N)` for every `N` (in parallel), measures the L1 distance to
/// `reference` and fits the log-log slope.
pub fn rate_experiment<F>(ns: &[usize], reference: &SchemeResult, run: F) -> Result<RateReport>
where
    F: Fn(usize) -> Result<SchemeResult> + Sync,
{
    if ns.len() < 3 {
        return Err(Error::InvalidParameter(format!("rate experiment needs at least 3 values of N, got {}", ns.len())));
    }
    if ns.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidParameter("values of N must be strictly increasing".into()));
    }
    let results: Vec<SchemeResult> = ns.par_iter().map(|&n| run(n)).collect::<Result<_>>()?;
    let errors: Vec<f64> = results.iter().map(|r| l1_error(r, reference)).collect::<Result<_>>()?;
    let slope = fit_slope(ns, &errors)?;
    let reference = reference
        .provenance
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join(";");
    Ok(RateReport {
        points: ns.iter().copied().zip(errors).collect(),
        slope,
        reference,
    })
}
