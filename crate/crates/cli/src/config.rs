//! Run configuration: a TOML file of `key = value` pairs, optionally grouped in
//! sections (section names are ignored). Unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use fbsplit::grids::{EGrid, PBox};
use fbsplit::models::{make_bm_positive_model, make_linear_model, make_multiplicative_model, ModelFamily, ModelSpec};
use fbsplit::neuralreg::TrainConfig;
use fbsplit::splitting::{NnConfig, DEFAULT_MEMORY_BUDGET_MB, DEFAULT_PROXY_M, DEFAULT_PROXY_N};
use fbsplit::transport::FdScheme;
use toml::Value;

use crate::error::CliError;

pub const KNOWN_KEYS: &[&str] = &[
    "model",
    "dim",
    "sigma",
    "cap",
    "theta",
    "gbm_drift",
    "horizon",
    "J",
    "K",
    "N",
    "e_min",
    "e_max",
    "B",
    "M",
    "paths",
    "seed",
    "transport",
    "lr",
    "batch_size",
    "batches_per_epoch",
    "val_size",
    "val_every",
    "patience",
    "max_iters",
    "nn_seed",
    "scheme",
    "proxy_N",
    "proxy_M",
    "rate_Ns",
    "rate_ref_N",
    "memory_budget_mb",
    "out_dir",
    "label",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scheme {
    Alt,
    Nn,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::Alt => "alt",
            Scheme::Nn => "nn",
        }
    }
}

/// Values given on the command line; they win over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub label: Option<String>,
}

/// Fully resolved configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelFamily,
    pub dim: usize,
    pub sigma: f64,
    pub cap: f64,
    pub theta: f64,
    pub gbm_drift: f64,
    pub horizon: f64,
    pub j: usize,
    pub k: usize,
    pub n: usize,
    pub e_min: f64,
    pub e_max: f64,
    pub b: Option<f64>,
    pub m: usize,
    pub paths: usize,
    pub seed: u64,
    pub transport: Option<String>,
    pub lr: f64,
    pub batch_size: usize,
    pub batches_per_epoch: usize,
    pub val_size: usize,
    pub val_every: usize,
    pub patience: usize,
    pub max_iters: usize,
    pub nn_seed: u64,
    pub scheme: Scheme,
    pub proxy_n: usize,
    pub proxy_m: usize,
    pub rate_ns: Vec<usize>,
    pub rate_ref_n: usize,
    pub memory_budget_mb: u64,
    pub out_dir: PathBuf,
    pub label: String,
}

/// Flattens nested tables into one key map; a key given twice is an error.
fn flatten(table: &toml::Table, out: &mut BTreeMap<String, Value>) -> Result<(), CliError> {
    for (key, value) in table {
        match value {
            Value::Table(inner) => flatten(inner, out)?,
            other => {
                if !KNOWN_KEYS.contains(&key.as_str()) {
                    return Err(CliError::Config(format!("unknown key `{key}`")));
                }
                if out.insert(key.clone(), other.clone()).is_some() {
                    return Err(CliError::Config(format!("key `{key}` given more than once")));
                }
            }
        }
    }
    Ok(())
}

struct Keys(BTreeMap<String, Value>);

impl Keys {
    fn float(&self, key: &str, default: f64) -> Result<f64, CliError> {
        match self.0.get(key) {
            None => Ok(default),
            Some(Value::Float(x)) => Ok(*x),
            Some(Value::Integer(i)) => Ok(*i as f64),
            Some(v) => Err(CliError::Config(format!("`{key}` must be a number, got {v}"))),
        }
    }

    fn opt_float(&self, key: &str) -> Result<Option<f64>, CliError> {
        if self.0.contains_key(key) {
            self.float(key, 0.0).map(Some)
        } else {
            Ok(None)
        }
    }

    fn uint(&self, key: &str, default: u64) -> Result<u64, CliError> {
        match self.0.get(key) {
            None => Ok(default),
            Some(Value::Integer(i)) if *i >= 0 => Ok(*i as u64),
            Some(v) => Err(CliError::Config(format!("`{key}` must be a non-negative integer, got {v}"))),
        }
    }

    fn usize(&self, key: &str, default: usize) -> Result<usize, CliError> {
        self.uint(key, default as u64).map(|v| v as usize)
    }

    fn string(&self, key: &str) -> Result<Option<String>, CliError> {
        match self.0.get(key) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s.clone())),
            Some(v) => Err(CliError::Config(format!("`{key}` must be a string, got {v}"))),
        }
    }

    fn uint_list(&self, key: &str, default: &[usize]) -> Result<Vec<usize>, CliError> {
        match self.0.get(key) {
            None => Ok(default.to_vec()),
            Some(Value::Array(items)) => items
                .iter()
                .map(|v| match v {
                    Value::Integer(i) if *i > 0 => Ok(*i as usize),
                    other => Err(CliError::Config(format!("`{key}` entries must be positive integers, got {other}"))),
                })
                .collect(),
            Some(v) => Err(CliError::Config(format!("`{key}` must be an array, got {v}"))),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, CliError> {
        Self::from_toml_with(text, &Overrides::default())
    }

    /// Parses `text`, then lets command-line `overrides` replace file values.
    pub fn from_toml_with(text: &str, overrides: &Overrides) -> Result<Self, CliError> {
        let table: toml::Table = text.parse().map_err(|e| CliError::Config(format!("{e}")))?;
        let mut map = BTreeMap::new();
        flatten(&table, &mut map)?;
        if let Some(seed) = overrides.seed {
            let seed = i64::try_from(seed).map_err(|_| CliError::Config(format!("seed {seed} is too large")))?;
            map.insert("seed".into(), Value::Integer(seed));
        }
        if let Some(out) = &overrides.out_dir {
            map.insert("out_dir".into(), Value::String(out.to_string_lossy().into_owned()));
        }
        if let Some(label) = &overrides.label {
            map.insert("label".into(), Value::String(label.clone()));
        }
        Self::from_keys(Keys(map))
    }

    pub fn from_file(path: &Path, overrides: &Overrides) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_with(&text, overrides)
    }

    fn from_keys(k: Keys) -> Result<Self, CliError> {
        let model_name = k.string("model")?.unwrap_or_else(|| "linear".into());
        let model = ModelFamily::parse(&model_name)
            .ok_or_else(|| CliError::Config(format!("unknown model `{model_name}` (linear, bm_positive, multiplicative)")))?;
        let (lo, hi) = EGrid::default_range(model);
        let scheme = match k.string("scheme")?.as_deref() {
            None | Some("alt") => Scheme::Alt,
            Some("nn") => Scheme::Nn,
            Some(other) => return Err(CliError::Config(format!("unknown scheme `{other}` (alt, nn)"))),
        };
        let train = TrainConfig::default();
        let seed = k.uint("seed", 0)?;
        let cfg = RunConfig {
            model,
            dim: k.usize("dim", 1)?,
            sigma: k.float("sigma", 1.0)?,
            cap: k.float("cap", 0.0)?,
            theta: k.float("theta", 1.0)?,
            gbm_drift: k.float("gbm_drift", 0.0)?,
            horizon: k.float("horizon", 1.0)?,
            j: k.usize("J", 150)?,
            k: k.usize("K", 20)?,
            n: k.usize("N", 32)?,
            e_min: k.float("e_min", lo)?,
            e_max: k.float("e_max", hi)?,
            b: k.opt_float("B")?,
            m: k.usize("M", 1000)?,
            paths: k.usize("paths", 5000)?,
            seed,
            transport: k.string("transport")?,
            lr: k.float("lr", train.lr)?,
            batch_size: k.usize("batch_size", train.batch_size)?,
            batches_per_epoch: k.usize("batches_per_epoch", train.batches_per_epoch)?,
            val_size: k.usize("val_size", train.val_size)?,
            val_every: k.usize("val_every", train.val_every)?,
            patience: k.usize("patience", train.patience)?,
            max_iters: k.usize("max_iters", train.max_iters)?,
            nn_seed: k.uint("nn_seed", seed)?,
            scheme,
            proxy_n: k.usize("proxy_N", DEFAULT_PROXY_N)?,
            proxy_m: k.usize("proxy_M", DEFAULT_PROXY_M)?,
            rate_ns: k.uint_list("rate_Ns", &[4, 8, 16, 32, 64])?,
            rate_ref_n: k.usize("rate_ref_N", 256)?,
            memory_budget_mb: k.uint("memory_budget_mb", DEFAULT_MEMORY_BUDGET_MB)?,
            out_dir: PathBuf::from(k.string("out_dir")?.unwrap_or_else(|| ".".into())),
            label: k.string("label")?.unwrap_or_else(|| "run".into()),
        };
        cfg.check()?;
        Ok(cfg)
    }

    fn check(&self) -> Result<(), CliError> {
        let err = |m: String| Err(CliError::Config(m));
        if self.dim == 0 {
            return err("`dim` must be >= 1".into());
        }
        if !(self.sigma >= 0.0) {
            return err(format!("`sigma` must be >= 0, got {}", self.sigma));
        }
        if !(self.horizon > 0.0) {
            return err(format!("`horizon` must be > 0, got {}", self.horizon));
        }
        if self.j < 3 {
            return err(format!("`J` must be >= 3, got {}", self.j));
        }
        if self.k == 0 || self.n == 0 || self.m == 0 || self.paths == 0 {
            return err("`K`, `N`, `M` and `paths` must be >= 1".into());
        }
        if !(self.e_min < self.e_max) {
            return err(format!("`e_min` ({}) must be below `e_max` ({})", self.e_min, self.e_max));
        }
        if self.label.is_empty() || self.label.contains(['/', '\\']) {
            return err(format!("`label` must be a plain file stem, got {:?}", self.label));
        }
        if let Some(t) = &self.transport {
            let allowed: &[&str] = match self.scheme {
                Scheme::Alt => &["spd"],
                Scheme::Nn => &["lf", "upwind"],
            };
            if !allowed.contains(&t.as_str()) {
                return err(format!("transport `{t}` is not available for scheme {} ({:?})", self.scheme.name(), allowed));
            }
        }
        self.train().validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn model_spec(&self) -> Result<ModelSpec, CliError> {
        // constructors need σ > 0; a degenerate σ = 0 is applied afterwards
        let sigma = if self.sigma > 0.0 { self.sigma } else { 1.0 };
        let built = match self.model {
            ModelFamily::Linear => make_linear_model(self.dim, sigma, self.cap),
            ModelFamily::BmPositive => make_bm_positive_model(self.dim, sigma),
            ModelFamily::Multiplicative => make_multiplicative_model(self.dim, self.gbm_drift, sigma, self.theta),
            ModelFamily::Custom => unreachable!("custom models are not configurable"),
        };
        let model = built
            .and_then(|m| m.with_horizon(self.horizon))
            .and_then(|m| if self.sigma > 0.0 { Ok(m) } else { m.with_sigma(0.0) })
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(model)
    }

    pub fn grid(&self) -> Result<EGrid, CliError> {
        EGrid::new(self.j, self.e_min, self.e_max).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn pbox(&self, model: &ModelSpec) -> Result<PBox, CliError> {
        match self.b {
            Some(b) => PBox::for_model(model, b).map_err(|e| CliError::Config(e.to_string())),
            None => Ok(PBox::default_for(model)),
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            batches_per_epoch: self.batches_per_epoch,
            val_size: self.val_size,
            val_every: self.val_every,
            patience: self.patience,
            max_iters: self.max_iters,
            seed: self.nn_seed,
        }
    }

    /// Finite-difference transport of the nn scheme: `upwind` when the rate
    /// family is non-negative, `lf` otherwise, unless configured.
    pub fn fd_scheme(&self) -> FdScheme {
        match self.transport.as_deref() {
            Some("lf") => FdScheme::LaxFriedrichs,
            Some("upwind") => FdScheme::Upwind,
            _ => match self.model {
                ModelFamily::BmPositive | ModelFamily::Multiplicative => FdScheme::Upwind,
                _ => FdScheme::LaxFriedrichs,
            },
        }
    }

    pub fn transport_name(&self) -> &'static str {
        match self.scheme {
            Scheme::Alt => "spd",
            Scheme::Nn => self.fd_scheme().name(),
        }
    }

    pub fn nn_config(&self, model: &ModelSpec, steps: usize) -> Result<NnConfig, CliError> {
        Ok(NnConfig {
            steps,
            substeps: self.k,
            grid: self.grid()?,
            pbox: self.pbox(model)?,
            transport: self.fd_scheme(),
            train: self.train(),
            paths: self.paths,
            seed: self.seed,
        })
    }

    /// Every resolved key with its value, in a fixed order.
    pub fn resolved(&self) -> Vec<(String, String)> {
        let mut v: Vec<(String, String)> = vec![
            ("model".into(), self.model.name().into()),
            ("dim".into(), self.dim.to_string()),
            ("sigma".into(), num(self.sigma)),
            ("cap".into(), num(self.cap)),
            ("theta".into(), num(self.theta)),
            ("gbm_drift".into(), num(self.gbm_drift)),
            ("horizon".into(), num(self.horizon)),
            ("J".into(), self.j.to_string()),
            ("K".into(), self.k.to_string()),
            ("N".into(), self.n.to_string()),
            ("e_min".into(), num(self.e_min)),
            ("e_max".into(), num(self.e_max)),
        ];
        let b = match self.model_spec().ok().and_then(|m| self.pbox(&m).ok()) {
            Some(p) => num(p.bound()),
            None => String::new(),
        };
        v.extend([
            ("B".into(), b),
            ("M".into(), self.m.to_string()),
            ("paths".into(), self.paths.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("transport".into(), self.transport_name().into()),
            ("lr".into(), num(self.lr)),
            ("batch_size".into(), self.batch_size.to_string()),
            ("batches_per_epoch".into(), self.batches_per_epoch.to_string()),
            ("val_size".into(), self.val_size.to_string()),
            ("val_every".into(), self.val_every.to_string()),
            ("patience".into(), self.patience.to_string()),
            ("max_iters".into(), self.max_iters.to_string()),
            ("nn_seed".into(), self.nn_seed.to_string()),
            ("scheme".into(), self.scheme.name().into()),
            ("proxy_N".into(), self.proxy_n.to_string()),
            ("proxy_M".into(), self.proxy_m.to_string()),
            (
                "rate_Ns".into(),
                self.rate_ns.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(" "),
            ),
            ("rate_ref_N".into(), self.rate_ref_n.to_string()),
            ("memory_budget_mb".into(), self.memory_budget_mb.to_string()),
            ("label".into(), self.label.clone()),
        ]);
        v
    }
}

fn num(x: f64) -> String {
    fbsplit::report::fmt_num(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = RunConfig::from_toml_str("").unwrap();
        assert_eq!(c.model, ModelFamily::Linear);
        assert_eq!(c.scheme, Scheme::Alt);
        assert_eq!((c.e_min, c.e_max), (-2.0, 2.0));
        assert_eq!(c.transport_name(), "spd");
        assert_eq!(c.memory_budget_mb, 4096);
        assert_eq!(c.rate_ns, vec![4, 8, 16, 32, 64]);
    }

    #[test]
    fn sections_are_flattened() {
        let c = RunConfig::from_toml_str("[model]\nmodel = \"bm_positive\"\ndim = 3\n[scheme]\nscheme = \"nn\"\nJ = 40\n").unwrap();
        assert_eq!(c.model, ModelFamily::BmPositive);
        assert_eq!(c.dim, 3);
        assert_eq!(c.j, 40);
        assert_eq!(c.fd_scheme(), FdScheme::Upwind);
        assert_eq!((c.e_min, c.e_max), EGrid::default_range(ModelFamily::BmPositive));
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = RunConfig::from_toml_str("trnsport = \"lf\"").unwrap_err();
        assert!(err.to_string().contains("trnsport"), "{err}");
        assert_eq!(err.exit_code(), 2);
        let err = RunConfig::from_toml_str("[a]\nJ = 3\n[b]\nJ = 4\n").unwrap_err();
        assert!(err.to_string().contains("more than once"));
    }

    #[test]
    fn bad_values_are_rejected() {
        for text in [
            "J = 2",
            "J = -4",
            "sigma = -1.0",
            "e_min = 1.0\ne_max = 0.0",
            "model = \"quadratic\"",
            "scheme = \"nn\"\ntransport = \"spd\"",
            "transport = \"lf\"",
            "rate_Ns = [4, 0]",
            "label = \"a/b\"",
            "lr = 0.0",
            "dim = \"three\"",
        ] {
            assert!(RunConfig::from_toml_str(text).is_err(), "{text}");
        }
    }

    #[test]
    fn zero_sigma_is_applied_after_construction() {
        let c = RunConfig::from_toml_str("model = \"bm_positive\"\nsigma = 0.0\ndim = 2").unwrap();
        let m = c.model_spec().unwrap();
        assert_eq!(m.params().sigma, 0.0);
    }

    #[test]
    fn overrides_win() {
        let o = Overrides {
            seed: Some(9),
            out_dir: Some(PathBuf::from("/tmp/x")),
            label: Some("z".into()),
        };
        let c = RunConfig::from_toml_with("seed = 1\nlabel = \"a\"", &o).unwrap();
        assert_eq!((c.seed, c.nn_seed, c.label.as_str()), (9, 9, "z"));
        assert_eq!(c.out_dir, PathBuf::from("/tmp/x"));
    }

    #[test]
    fn integers_are_accepted_as_floats() {
        let c = RunConfig::from_toml_str("sigma = 2\ne_min = -3").unwrap();
        assert_eq!(c.sigma, 2.0);
        assert_eq!(c.e_min, -3.0);
    }
}
