//! Coefficient families of the singular forward-backward system
//!
//! ```text
//! dP_t = b(P_t) dt + σ(P_t) dW_t,
//! dE_t = μ(P_t, Y_t) dt,
//! Y_t  = 𝒱(t, P_t, E_t),   Y_T ≈ φ(P_T, E_T).
//! ```
//!
//! Three families are built in (linear emission, Brownian driver with
//! positive emission, multiplicative driver). Each carries a closed-form
//! antiderivative of the emission rate in `y`, a closed-form map `w ↦ P` from
//! the driving Brownian motion, and a reduction to an equivalent model with a
//! scalar driver. Custom models can be assembled with [`ModelBuilder`] for
//! testing operators against hand-made coefficients.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grids::PBox;
use crate::quadrature;

pub type RateFn = Arc<dyn Fn(&[f64], f64) -> f64 + Send + Sync>;
pub type VectorFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;
pub type BrownianMapFn = Arc<dyn Fn(f64, &[f64]) -> Vec<f64> + Send + Sync>;

/// Absolute tolerance used when the flux has to be integrated numerically.
pub const FLUX_QUADRATURE_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelFamily {
    Linear,
    BmPositive,
    Multiplicative,
    Custom,
}

impl ModelFamily {
    pub fn name(self) -> &'static str {
        match self {
            ModelFamily::Linear => "linear",
            ModelFamily::BmPositive => "bm_positive",
            ModelFamily::Multiplicative => "multiplicative",
            ModelFamily::Custom => "custom",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "linear" => Some(ModelFamily::Linear),
            "bm_positive" => Some(ModelFamily::BmPositive),
            "multiplicative" => Some(ModelFamily::Multiplicative),
            _ => None,
        }
    }
}

impl fmt::Display for ModelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Named scalar parameters used by the built-in constructors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelParams {
    pub sigma: f64,
    pub cap: f64,
    pub theta: f64,
    pub gbm_drift: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            cap: 0.0,
            theta: 1.0,
            gbm_drift: 0.0,
        }
    }
}

#[derive(Clone)]
enum Dynamics {
    /// `b = 0`, `σ = sigma · I`.
    Additive { sigma: f64 },
    /// `b(p) = drift · p`, `σ(p) = sigma · diag(p)`.
    Geometric { drift: f64, sigma: f64 },
    General {
        drift: VectorFn,
        /// Row-major `d × d`.
        vol: VectorFn,
        brownian_map: Option<BrownianMapFn>,
    },
}

#[derive(Clone)]
enum Emission {
    /// `μ(p, y) = p̄ − y`.
    Linear,
    /// `μ(p, y) = 1 + 1/(1 + e^{−p̄}) − y`.
    Sigmoid,
    /// `μ(p, y) = (∏ p^ℓ)^{1/√d} e^{−θ y}`.
    Exponential { theta: f64 },
    General {
        rate: RateFn,
        antiderivative: Option<RateFn>,
    },
}

/// Terminal condition `φ(p, e)`.
#[derive(Clone)]
pub enum Terminal {
    /// `1_{e > threshold}` when `strict`, `1_{e ≥ threshold}` otherwise.
    Indicator { threshold: f64, strict: bool },
    General(RateFn),
}

impl Terminal {
    pub fn eval(&self, p: &[f64], e: f64) -> f64 {
        match self {
            Terminal::Indicator { threshold, strict } => {
                let hit = if *strict { e > *threshold } else { e >= *threshold };
                if hit {
                    1.0
                } else {
                    0.0
                }
            }
            Terminal::General(f) => f(p, e),
        }
    }
}

/// The emission rate with `p` frozen, as seen by the transport operators.
#[derive(Clone, Copy)]
pub enum FrozenRate<'a> {
    /// `μ(y) = level − y`.
    Affine { level: f64 },
    /// `μ(y) = scale · e^{−θ y}`.
    Exponential { scale: f64, theta: f64 },
    General {
        p: &'a [f64],
        rate: &'a RateFn,
        antiderivative: Option<&'a RateFn>,
    },
}

impl FrozenRate<'_> {
    /// `μ(p, y)` with `y` clamped to `[0, 1]`.
    #[inline]
    pub fn rate(&self, y: f64) -> f64 {
        let y = y.clamp(0.0, 1.0);
        match *self {
            FrozenRate::Affine { level } => level - y,
            FrozenRate::Exponential { scale, theta } => scale * (-theta * y).exp(),
            FrozenRate::General { p, rate, .. } => rate(p, y),
        }
    }

    /// `𝔐(p, y) = ∫₀^y μ(p, υ) dυ` with `y` clamped to `[0, 1]`.
    #[inline]
    pub fn flux(&self, y: f64) -> f64 {
        let y = y.clamp(0.0, 1.0);
        match *self {
            FrozenRate::Affine { level } => y * (level - 0.5 * y),
            FrozenRate::Exponential { scale, theta } => scale * (-(-theta * y).exp_m1()) / theta,
            FrozenRate::General {
                p,
                rate,
                antiderivative,
            } => match antiderivative {
                Some(m) => m(p, y),
                None => quadrature::integrate(|u| rate(p, u), 0.0, y, FLUX_QUADRATURE_TOL),
            },
        }
    }
}

/// A concrete instance of the coefficients `(b, σ, μ, φ)` on `[0, T]`.
#[derive(Clone)]
pub struct ModelSpec {
    family: ModelFamily,
    dim: usize,
    horizon: f64,
    initial: Vec<f64>,
    params: ModelParams,
    dynamics: Dynamics,
    emission: Emission,
    terminal: Terminal,
}

impl fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelSpec")
            .field("family", &self.family)
            .field("dim", &self.dim)
            .field("horizon", &self.horizon)
            .field("initial", &self.initial)
            .field("params", &self.params)
            .finish_non_exhaustive()
    }
}

fn check_dim_sigma(d: usize, sigma: f64) -> Result<()> {
    if d < 1 {
        return Err(Error::InvalidParameter(format!("dimension must be >= 1, got {d}")));
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidParameter(format!("sigma must be > 0, got {sigma}")));
    }
    Ok(())
}

/// Linear emission model: `dP = σ dW`, `μ(p, y) = p̄ − y`, `φ = 1_{e > cap}`.
pub fn make_linear_model(d: usize, sigma: f64, cap: f64) -> Result<ModelSpec> {
    check_dim_sigma(d, sigma)?;
    Ok(ModelSpec {
        family: ModelFamily::Linear,
        dim: d,
        horizon: 1.0,
        initial: vec![0.0; d],
        params: ModelParams {
            sigma,
            cap,
            ..ModelParams::default()
        },
        dynamics: Dynamics::Additive { sigma },
        emission: Emission::Linear,
        terminal: Terminal::Indicator {
            threshold: cap,
            strict: true,
        },
    })
}

/// Brownian driver with positive emission: `μ(p, y) = 1 + sigmoid(p̄) − y`, `φ = 1_{e ≥ 0}`.
pub fn make_bm_positive_model(d: usize, sigma: f64) -> Result<ModelSpec> {
    check_dim_sigma(d, sigma)?;
    Ok(ModelSpec {
        family: ModelFamily::BmPositive,
        dim: d,
        horizon: 1.0,
        initial: vec![0.0; d],
        params: ModelParams {
            sigma,
            ..ModelParams::default()
        },
        dynamics: Dynamics::Additive { sigma },
        emission: Emission::Sigmoid,
        terminal: Terminal::Indicator {
            threshold: 0.0,
            strict: false,
        },
    })
}

/// Geometric driver `dP^ℓ = a P^ℓ dt + σ P^ℓ dW^ℓ`, `P₀ = 1`, with
/// `μ(p, y) = (∏ p^ℓ)^{1/√d} e^{−θ y}` and `φ = 1_{e ≥ 0}`.
pub fn make_multiplicative_model(d: usize, gbm_drift: f64, sigma: f64, theta: f64) -> Result<ModelSpec> {
    check_dim_sigma(d, sigma)?;
    if !(theta > 0.0) || !theta.is_finite() {
        return Err(Error::InvalidParameter(format!("theta must be > 0, got {theta}")));
    }
    if !gbm_drift.is_finite() {
        return Err(Error::InvalidParameter(format!("gbm_drift must be finite, got {gbm_drift}")));
    }
    Ok(ModelSpec {
        family: ModelFamily::Multiplicative,
        dim: d,
        horizon: 1.0,
        initial: vec![1.0; d],
        params: ModelParams {
            sigma,
            theta,
            gbm_drift,
            ..ModelParams::default()
        },
        dynamics: Dynamics::Geometric {
            drift: gbm_drift,
            sigma,
        },
        emission: Emission::Exponential { theta },
        terminal: Terminal::Indicator {
            threshold: 0.0,
            strict: false,
        },
    })
}

#[inline]
fn normalized_sum(p: &[f64]) -> f64 {
    p.iter().sum::<f64>() / (p.len() as f64).sqrt()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn geometric_scale(p: &[f64]) -> f64 {
    (p.iter().map(|x| x.ln()).sum::<f64>() / (p.len() as f64).sqrt()).exp()
}

impl ModelSpec {
    pub fn family(&self) -> ModelFamily {
        self.family
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn initial(&self) -> &[f64] {
        &self.initial
    }

    pub fn params(&self) -> ModelParams {
        self.params
    }

    pub fn terminal(&self) -> &Terminal {
        &self.terminal
    }

    /// True for the geometric (positive orthant) driver.
    pub fn positive_orthant(&self) -> bool {
        matches!(self.dynamics, Dynamics::Geometric { .. })
    }

    pub fn with_horizon(mut self, horizon: f64) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::InvalidParameter(format!("horizon must be > 0, got {horizon}")));
        }
        self.horizon = horizon;
        Ok(self)
    }

    /// Replaces the volatility. `sigma = 0` is accepted here and gives the
    /// deterministic driver used by the composition checks.
    pub fn with_sigma(mut self, sigma: f64) -> Result<Self> {
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(Error::InvalidParameter(format!("sigma must be >= 0, got {sigma}")));
        }
        self.params.sigma = sigma;
        match &mut self.dynamics {
            Dynamics::Additive { sigma: s } | Dynamics::Geometric { sigma: s, .. } => *s = sigma,
            Dynamics::General { .. } => {
                return Err(Error::InvalidParameter("custom dynamics have no scalar sigma".into()))
            }
        }
        Ok(self)
    }

    /// `b(p)`.
    pub fn drift(&self, p: &[f64]) -> Vec<f64> {
        match &self.dynamics {
            Dynamics::Additive { .. } => vec![0.0; self.dim],
            Dynamics::Geometric { drift, .. } => p.iter().map(|x| drift * x).collect(),
            Dynamics::General { drift, .. } => drift(p),
        }
    }

    /// `σ(p)`, row-major `d × d`.
    pub fn vol(&self, p: &[f64]) -> Vec<f64> {
        let d = self.dim;
        match &self.dynamics {
            Dynamics::Additive { sigma } => {
                let mut m = vec![0.0; d * d];
                for l in 0..d {
                    m[l * d + l] = *sigma;
                }
                m
            }
            Dynamics::Geometric { sigma, .. } => {
                let mut m = vec![0.0; d * d];
                for l in 0..d {
                    m[l * d + l] = sigma * p[l];
                }
                m
            }
            Dynamics::General { vol, .. } => vol(p),
        }
    }

    /// `p + b(p) dt + σ(p) dw`, written into `out`.
    pub fn euler_into(&self, p: &[f64], dt: f64, dw: &[f64], out: &mut [f64]) {
        match &self.dynamics {
            Dynamics::Additive { sigma } => {
                for l in 0..self.dim {
                    out[l] = p[l] + sigma * dw[l];
                }
            }
            Dynamics::Geometric { drift, sigma } => {
                for l in 0..self.dim {
                    out[l] = p[l] + drift * p[l] * dt + sigma * p[l] * dw[l];
                }
            }
            Dynamics::General { drift, vol, .. } => {
                let b = drift(p);
                let s = vol(p);
                let d = self.dim;
                for l in 0..d {
                    let noise: f64 = (0..d).map(|k| s[l * d + k] * dw[k]).sum();
                    out[l] = p[l] + b[l] * dt + noise;
                }
            }
        }
    }

    pub fn has_brownian_map(&self) -> bool {
        match &self.dynamics {
            Dynamics::General { brownian_map, .. } => brownian_map.is_some(),
            _ => true,
        }
    }

    /// `𝔓(t, w)` such that `P_t = 𝔓(t, W_t)`, when available.
    pub fn brownian_map(&self, t: f64, w: &[f64]) -> Option<Vec<f64>> {
        match &self.dynamics {
            Dynamics::Additive { sigma } => {
                Some(self.initial.iter().zip(w).map(|(p0, wl)| p0 + sigma * wl).collect())
            }
            Dynamics::Geometric { drift, sigma } => {
                let a = (drift - 0.5 * sigma * sigma) * t;
                Some(self.initial.iter().zip(w).map(|(p0, wl)| p0 * (a + sigma * wl).exp()).collect())
            }
            Dynamics::General { brownian_map, .. } => brownian_map.as_ref().map(|f| f(t, w)),
        }
    }

    /// Freezes `p` in the emission rate.
    pub fn frozen<'a>(&'a self, p: &'a [f64]) -> FrozenRate<'a> {
        match &self.emission {
            Emission::Linear => FrozenRate::Affine {
                level: normalized_sum(p),
            },
            Emission::Sigmoid => FrozenRate::Affine {
                level: 1.0 + sigmoid(normalized_sum(p)),
            },
            Emission::Exponential { theta } => FrozenRate::Exponential {
                scale: geometric_scale(p),
                theta: *theta,
            },
            Emission::General {
                rate,
                antiderivative,
            } => FrozenRate::General {
                p,
                rate,
                antiderivative: antiderivative.as_ref(),
            },
        }
    }

    /// `μ(p, y)`, `y` clamped to `[0, 1]`.
    pub fn emission_rate(&self, p: &[f64], y: f64) -> f64 {
        self.frozen(p).rate(y)
    }

    /// `𝔐(p, y) = ∫₀^y μ(p, υ) dυ`.
    pub fn flux(&self, p: &[f64], y: f64) -> f64 {
        self.frozen(p).flux(y)
    }

    /// `φ(p, e)`.
    pub fn terminal_value(&self, p: &[f64], e: f64) -> f64 {
        self.terminal.eval(p, e)
    }
}

/// Equivalent model driven by a scalar Brownian motion.
///
/// The linear and positive-emission families only see `p̄ = d^{-1/2} ∑ p^ℓ`,
/// which is itself `σ W̄` for a standard scalar `W̄`. For the multiplicative
/// family `(∏ p^ℓ)^{1/√d} = exp(√d (a − σ²/2) t + σ W̄)`, a scalar geometric
/// driver with drift `√d (a − σ²/2) + σ²/2`.
pub fn reduce_to_1d(model: &ModelSpec) -> Result<ModelSpec> {
    let p = model.params;
    let reduced = match model.family {
        ModelFamily::Linear => make_linear_model(1, p.sigma, p.cap)?,
        ModelFamily::BmPositive => make_bm_positive_model(1, p.sigma)?,
        ModelFamily::Multiplicative => {
            if model.dim == 1 {
                return Ok(model.clone());
            }
            let d = model.dim as f64;
            let drift = d.sqrt() * (p.gbm_drift - 0.5 * p.sigma * p.sigma) + 0.5 * p.sigma * p.sigma;
            make_multiplicative_model(1, drift, p.sigma, p.theta)?
        }
        ModelFamily::Custom => return Err(Error::NoReduction(model.family.name().into())),
    };
    reduced.with_horizon(model.horizon)
}

/// Builder for ad-hoc coefficient sets.
pub struct ModelBuilder {
    dim: usize,
    horizon: f64,
    initial: Vec<f64>,
    sigma: f64,
    dynamics: Option<Dynamics>,
    rate: Option<RateFn>,
    antiderivative: Option<RateFn>,
    terminal: Terminal,
}

impl ModelBuilder {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            horizon: 1.0,
            initial: vec![0.0; dim],
            sigma: 1.0,
            dynamics: None,
            rate: None,
            antiderivative: None,
            terminal: Terminal::Indicator {
                threshold: 0.0,
                strict: false,
            },
        }
    }

    /// `b = 0`, `σ = sigma · I` (the default, with `sigma = 1`).
    pub fn additive(mut self, sigma: f64) -> Self {
        self.sigma = sigma;
        self.dynamics = Some(Dynamics::Additive { sigma });
        self
    }

    pub fn dynamics(mut self, drift: VectorFn, vol: VectorFn, brownian_map: Option<BrownianMapFn>) -> Self {
        self.dynamics = Some(Dynamics::General {
            drift,
            vol,
            brownian_map,
        });
        self
    }

    pub fn rate(mut self, f: impl Fn(&[f64], f64) -> f64 + Send + Sync + 'static) -> Self {
        self.rate = Some(Arc::new(f));
        self
    }

    pub fn antiderivative(mut self, f: impl Fn(&[f64], f64) -> f64 + Send + Sync + 'static) -> Self {
        self.antiderivative = Some(Arc::new(f));
        self
    }

    pub fn terminal(mut self, terminal: Terminal) -> Self {
        self.terminal = terminal;
        self
    }

    pub fn horizon(mut self, horizon: f64) -> Self {
        self.horizon = horizon;
        self
    }

    pub fn initial(mut self, p0: Vec<f64>) -> Self {
        self.initial = p0;
        self
    }

    pub fn build(self) -> Result<ModelSpec> {
        if self.dim < 1 {
            return Err(Error::InvalidParameter("dimension must be >= 1".into()));
        }
        if self.initial.len() != self.dim {
            return Err(Error::LengthMismatch {
                expected: self.dim,
                actual: self.initial.len(),
            });
        }
        let rate = self
            .rate
            .ok_or_else(|| Error::InvalidParameter("custom model needs an emission rate".into()))?;
        Ok(ModelSpec {
            family: ModelFamily::Custom,
            dim: self.dim,
            horizon: self.horizon,
            initial: self.initial,
            params: ModelParams {
                sigma: self.sigma,
                ..ModelParams::default()
            },
            dynamics: self.dynamics.unwrap_or(Dynamics::Additive { sigma: self.sigma }),
            emission: Emission::General {
                rate,
                antiderivative: self.antiderivative,
            },
            terminal: self.terminal,
        })
    }
}

/// Sampled structural constants of a model on a box.
#[derive(Clone, Debug, PartialEq)]
pub struct ValidationReport {
    /// Smallest sampled `(y−y′)(μ(p,y′)−μ(p,y)) / |y−y′|²`.
    pub l1: f64,
    /// Largest sampled value of the same ratio.
    pub l2: f64,
    /// Sampled Lipschitz constant of `μ` in `p`.
    pub rate_lipschitz: f64,
    /// Sampled Lipschitz constant of `φ` in `p`.
    pub terminal_lipschitz: f64,
    pub terminal_in_range: bool,
    pub terminal_monotone: bool,
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

const VALIDATION_SEED: u64 = 0x5eed_c1a5_5a11;

/// Monte-Carlo check of the structural conditions on `μ` and `φ` over `pbox`.
///
/// Violations are reported, not raised.
pub fn validate_class(model: &ModelSpec, pbox: &PBox, samples: usize) -> Result<ValidationReport> {
    if samples < 2 {
        return Err(Error::InvalidParameter(format!("need at least 2 samples, got {samples}")));
    }
    let d = model.dim();
    let (lo, hi) = pbox.bounds(d);
    let mut rng = ChaCha8Rng::seed_from_u64(VALIDATION_SEED);
    let draw_p = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..d).map(|l| rng.gen_range(lo[l]..=hi[l])).collect()
    };

    let mut l1 = f64::INFINITY;
    let mut l2 = f64::NEG_INFINITY;
    let mut rate_lip: f64 = 0.0;
    let mut term_lip: f64 = 0.0;
    let mut in_range = true;
    let mut monotone = true;
    // Terminal probes cover a window around the transition of the built-ins.
    let e_span = 4.0 + model.params.cap.abs();

    for _ in 0..samples {
        let p = draw_p(&mut rng);
        let q = draw_p(&mut rng);
        let y: f64 = rng.gen();
        let mut y2: f64 = rng.gen();
        if y2 == y {
            y2 = 1.0 - y;
        }
        if y != y2 {
            let ratio = (y - y2) * (model.emission_rate(&p, y2) - model.emission_rate(&p, y)) / ((y - y2) * (y - y2));
            l1 = l1.min(ratio);
            l2 = l2.max(ratio);
        }
        let dist = p
            .iter()
            .zip(&q)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let e = rng.gen_range(-e_span..=e_span);
        let e2 = rng.gen_range(-e_span..=e_span);
        if dist > 0.0 {
            rate_lip = rate_lip.max((model.emission_rate(&p, y) - model.emission_rate(&q, y)).abs() / dist);
            term_lip = term_lip.max((model.terminal_value(&p, e) - model.terminal_value(&q, e)).abs() / dist);
        }
        let (lo_e, hi_e) = if e <= e2 { (e, e2) } else { (e2, e) };
        let a = model.terminal_value(&p, lo_e);
        let b = model.terminal_value(&p, hi_e);
        if !(0.0..=1.0).contains(&a) || !(0.0..=1.0).contains(&b) {
            in_range = false;
        }
        if a > b {
            monotone = false;
        }
    }

    let mut violations = Vec::new();
    if !(l1 > 0.0) {
        violations.push(format!("emission rate is not strictly decreasing in y (estimated l1 = {l1})"));
    }
    if !l2.is_finite() || !rate_lip.is_finite() {
        violations.push("emission rate has no finite Lipschitz estimate on the box".into());
    }
    if !in_range {
        violations.push("terminal condition leaves [0, 1]".into());
    }
    if !monotone {
        violations.push("terminal condition is not non-decreasing in e".into());
    }
    if !term_lip.is_finite() {
        violations.push("terminal condition is not Lipschitz in p on the box".into());
    }
    Ok(ValidationReport {
        l1,
        l2,
        rate_lipschitz: rate_lip,
        terminal_lipschitz: term_lip,
        terminal_in_range: in_range,
        terminal_monotone: monotone,
        violations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn linear_rate_examples() {
        let m = make_linear_model(1, 1.0, 0.0).unwrap();
        assert_abs_diff_eq!(m.emission_rate(&[0.5], 0.2), 0.3, epsilon = 1e-15);
        let m4 = make_linear_model(4, 1.0, 0.0).unwrap();
        assert_abs_diff_eq!(m4.emission_rate(&[1.0; 4], 0.0), 2.0, epsilon = 1e-15);
    }

    #[test]
    fn linear_terminal_is_strict_indicator() {
        for cap in [0.0, 0.7, -1.3] {
            let m = make_linear_model(2, 1.0, cap).unwrap();
            assert_eq!(m.terminal_value(&[0.3, -0.1], cap), 0.0);
            assert_eq!(m.terminal_value(&[0.3, -0.1], cap + 1e-9), 1.0);
        }
    }

    #[test]
    fn constructors_reject_bad_parameters() {
        assert!(make_linear_model(0, 1.0, 0.0).is_err());
        assert!(make_linear_model(1, 0.0, 0.0).is_err());
        assert!(make_bm_positive_model(1, -1.0).is_err());
        assert!(make_multiplicative_model(1, 0.0, 0.3, 0.0).is_err());
        assert!(make_multiplicative_model(1, 0.0, 0.3, -2.0).is_err());
    }

    #[test]
    fn bm_positive_examples() {
        let m = make_bm_positive_model(3, 0.3).unwrap();
        assert_abs_diff_eq!(m.emission_rate(&[0.0; 3], 0.0), 1.5, epsilon = 1e-15);
        assert_abs_diff_eq!(m.emission_rate(&[0.0; 3], 1.0), 0.5, epsilon = 1e-15);
        assert_eq!(m.terminal_value(&[0.0; 3], 0.0), 1.0);
        assert_eq!(m.terminal_value(&[0.0; 3], -1e-12), 0.0);
        // rate stays non-negative over [0, 1] for any p
        for p in [-50.0, -3.0, 0.0, 4.0] {
            assert!(m.emission_rate(&[p, p, p], 1.0) >= 0.0);
        }
    }

    #[test]
    fn multiplicative_examples() {
        let m = make_multiplicative_model(3, 0.0, 0.3, 1.0).unwrap();
        assert_abs_diff_eq!(m.emission_rate(&[1.0; 3], 0.0), 1.0, epsilon = 1e-15);
        assert_eq!(m.brownian_map(0.0, &[0.0; 3]).unwrap(), vec![1.0; 3]);
        assert_eq!(m.initial(), &[1.0; 3]);

        let m2 = make_multiplicative_model(2, 0.0, 0.3, 1.0).unwrap();
        let e2 = 2.0f64.exp();
        // (e^4)^{1/√2} = e^{2√2}
        let expected = (2.0 * 2.0f64.sqrt()).exp();
        assert_abs_diff_eq!(m2.emission_rate(&[e2, e2], 0.0), expected, epsilon = 1e-12);
        assert_abs_diff_eq!(expected, 16.919, epsilon = 1e-3);
    }

    #[test]
    fn brownian_maps() {
        let m = make_linear_model(2, 0.5, 0.0).unwrap();
        assert_eq!(m.brownian_map(0.3, &[1.0, -2.0]).unwrap(), vec![0.5, -1.0]);
        let g = make_multiplicative_model(1, 0.1, 0.2, 1.0).unwrap();
        let p = g.brownian_map(2.0, &[0.5]).unwrap()[0];
        assert_abs_diff_eq!(p, ((0.1 - 0.02) * 2.0 + 0.1f64).exp(), epsilon = 1e-15);
    }

    #[test]
    fn flux_examples() {
        let lin = make_linear_model(1, 1.0, 0.0).unwrap();
        assert_abs_diff_eq!(lin.flux(&[0.0], 1.0), -0.5, epsilon = 1e-15);
        let bm = make_bm_positive_model(1, 1.0).unwrap();
        assert_abs_diff_eq!(bm.flux(&[0.0], 1.0), 1.0, epsilon = 1e-15);
        let mult = make_multiplicative_model(2, 0.0, 0.3, 1.5).unwrap();
        for m in [&lin, &bm, &mult] {
            let p = vec![1.2; m.dim()];
            assert_eq!(m.flux(&p, 0.0), 0.0);
        }
    }

    #[test]
    fn flux_by_quadrature_matches_closed_form() {
        let custom = ModelBuilder::new(1)
            .rate(|p: &[f64], y: f64| p[0] * (-2.0 * y).exp())
            .build()
            .unwrap();
        for y in [0.0, 0.1, 0.5, 0.77, 1.0] {
            let exact = 1.5 * (1.0 - (-2.0 * y as f64).exp()) / 2.0;
            assert_abs_diff_eq!(custom.flux(&[1.5], y), exact, epsilon = 1e-12);
        }
    }

    #[test]
    fn reduce_linear_collapses_to_scalar() {
        let m = make_linear_model(4, 1.0, 0.0).unwrap();
        let r = reduce_to_1d(&m).unwrap();
        assert_eq!(r.dim(), 1);
        for (pbar, y) in [(0.3, 0.1), (-1.0, 0.9)] {
            assert_abs_diff_eq!(r.emission_rate(&[pbar], y), pbar - y, epsilon = 1e-15);
        }
    }

    #[test]
    fn reduce_multiplicative_fixed_point_in_1d() {
        let m = make_multiplicative_model(1, 0.05, 0.3, 1.0).unwrap();
        let r = reduce_to_1d(&m).unwrap();
        assert_eq!(r.params(), m.params());
        assert_eq!(r.dim(), 1);
    }

    #[test]
    fn reduce_multiplicative_matches_product_rate() {
        let (d, a, s) = (4usize, 0.1, 0.3);
        let m = make_multiplicative_model(d, a, s, 1.0).unwrap();
        let r = reduce_to_1d(&m).unwrap();
        let t = 0.7;
        let w = [0.2, -0.4, 0.1, 0.5];
        let p = m.brownian_map(t, &w).unwrap();
        let wbar = w.iter().sum::<f64>() / (d as f64).sqrt();
        let pbar = r.brownian_map(t, &[wbar]).unwrap();
        for y in [0.0, 0.4, 1.0] {
            assert_abs_diff_eq!(m.emission_rate(&p, y), r.emission_rate(&pbar, y), epsilon = 1e-12);
        }
    }

    #[test]
    fn reduce_bm_positive_at_origin() {
        let m = make_bm_positive_model(9, 0.3).unwrap();
        let r = reduce_to_1d(&m).unwrap();
        let p = r.brownian_map(0.0, &[0.0]).unwrap();
        assert_eq!(p, vec![0.0]);
        assert_abs_diff_eq!(r.emission_rate(&p, 0.25), 1.25, epsilon = 1e-15);
    }

    #[test]
    fn reduce_rejects_custom() {
        let custom = ModelBuilder::new(1).rate(|_: &[f64], y: f64| -y).build().unwrap();
        assert!(matches!(reduce_to_1d(&custom), Err(Error::NoReduction(_))));
    }

    #[test]
    fn validate_linear_has_unit_coercivity() {
        let m = make_linear_model(2, 1.0, 0.0).unwrap();
        let rep = validate_class(&m, &PBox::symmetric(2.0), 500).unwrap();
        assert!(rep.passed(), "{:?}", rep.violations);
        assert_abs_diff_eq!(rep.l1, 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(rep.l2, 1.0, epsilon = 1e-9);
        assert_eq!(rep.terminal_lipschitz, 0.0);
    }

    #[test]
    fn validate_multiplicative_on_positive_box() {
        let m = make_multiplicative_model(2, 0.0, 0.3, 1.0).unwrap();
        let rep = validate_class(&m, &PBox::positive(2.0), 2000).unwrap();
        assert!(rep.passed(), "{:?}", rep.violations);
        // Grid-search oracle: ℓ₁ ≥ min over the box of θ (∏p)^{1/√d} e^{−θ}.
        let floor = {
            let mut best = f64::INFINITY;
            for i in 0..=50 {
                for j in 0..=50 {
                    let p1 = 0.5 + 1.5 * i as f64 / 50.0;
                    let p2 = 0.5 + 1.5 * j as f64 / 50.0;
                    best = best.min((p1 * p2).powf(1.0 / 2f64.sqrt()) * (-1.0f64).exp());
                }
            }
            best
        };
        assert!(rep.l1 > 0.0);
        assert!(rep.l1 >= floor * (1.0 - 1e-9), "{} < {}", rep.l1, floor);
    }

    #[test]
    fn validate_flags_increasing_rate() {
        let broken = ModelBuilder::new(1).rate(|_: &[f64], y: f64| y).build().unwrap();
        let rep = validate_class(&broken, &PBox::symmetric(1.0), 100).unwrap();
        assert!(!rep.passed());
        assert!(rep.l1 <= 0.0);
    }

    #[test]
    fn validate_flags_decreasing_terminal() {
        let broken = ModelBuilder::new(1)
            .rate(|_: &[f64], y: f64| -y)
            .terminal(Terminal::General(Arc::new(|_: &[f64], e: f64| if e < 0.0 { 1.0 } else { 0.0 })))
            .build()
            .unwrap();
        let rep = validate_class(&broken, &PBox::symmetric(1.0), 200).unwrap();
        assert!(!rep.terminal_monotone);
        assert!(!rep.passed());
    }

    #[test]
    fn validate_needs_two_samples() {
        let m = make_linear_model(1, 1.0, 0.0).unwrap();
        assert!(validate_class(&m, &PBox::symmetric(1.0), 1).is_err());
    }
}
