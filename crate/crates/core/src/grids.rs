//! Discretization grids: the uniform e-grid, the splitting time grid, the
//! transport sub-grid, grid functions and the projection box for `P`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::models::{ModelFamily, ModelSpec};

/// Uniform grid `e_j = e_min + j δ`, `0 ≤ j < J`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EGrid {
    count: usize,
    e_min: f64,
    e_max: f64,
}

impl EGrid {
    pub fn new(count: usize, e_min: f64, e_max: f64) -> Result<Self> {
        if count < 3 {
            return Err(Error::InvalidParameter(format!("e-grid needs J >= 3, got {count}")));
        }
        if !(e_min < e_max) || !e_min.is_finite() || !e_max.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "e-grid needs e_min < e_max, got [{e_min}, {e_max}]"
            )));
        }
        Ok(Self { count, e_min, e_max })
    }

    /// Default e-range for a model family.
    pub fn default_range(family: ModelFamily) -> (f64, f64) {
        match family {
            ModelFamily::Linear | ModelFamily::Custom => (-2.0, 2.0),
            ModelFamily::BmPositive | ModelFamily::Multiplicative => (-3.0, 1.0),
        }
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn e_min(&self) -> f64 {
        self.e_min
    }

    pub fn e_max(&self) -> f64 {
        self.e_max
    }

    pub fn spacing(&self) -> f64 {
        (self.e_max - self.e_min) / (self.count - 1) as f64
    }

    pub fn node(&self, j: usize) -> f64 {
        if j + 1 == self.count {
            self.e_max
        } else {
            self.e_min + j as f64 * self.spacing()
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.count).map(|j| self.node(j)).collect()
    }
}

/// Splitting grid `t_n = n T / N`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeGrid {
    steps: usize,
    horizon: f64,
}

impl TimeGrid {
    pub fn new(steps: usize, horizon: f64) -> Result<Self> {
        if steps < 1 {
            return Err(Error::InvalidParameter("time grid needs N >= 1".into()));
        }
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::InvalidParameter(format!("horizon must be > 0, got {horizon}")));
        }
        Ok(Self { steps, horizon })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// The splitting step `𝔥 = T / N`.
    pub fn step(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn time(&self, n: usize) -> f64 {
        if n == self.steps {
            self.horizon
        } else {
            n as f64 * self.horizon / self.steps as f64
        }
    }
}

/// Transport sub-grid of `K` sub-steps `𝔡 = h / K` over a horizon `h`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SubGrid {
    substeps: usize,
    horizon: f64,
}

impl SubGrid {
    pub fn new(substeps: usize, horizon: f64) -> Result<Self> {
        if substeps < 1 {
            return Err(Error::InvalidParameter("sub-grid needs K >= 1".into()));
        }
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::InvalidParameter(format!("transport horizon must be > 0, got {horizon}")));
        }
        Ok(Self { substeps, horizon })
    }

    pub fn substeps(&self) -> usize {
        self.substeps
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// `𝔡 = h / K`.
    pub fn substep(&self) -> f64 {
        self.horizon / self.substeps as f64
    }
}

/// Values of a candidate decoupling field on an [`EGrid`].
#[derive(Clone, Debug, PartialEq)]
pub struct GridFunction(pub Vec<f64>);

impl GridFunction {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn in_unit_range(&self) -> bool {
        self.0.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn is_monotone(&self) -> bool {
        self.0.windows(2).all(|w| w[0] <= w[1])
    }

    /// Largest adjacent inversion `max_j (v_j − v_{j+1})⁺`.
    pub fn monotonicity_defect(&self) -> f64 {
        self.0.windows(2).map(|w| (w[0] - w[1]).max(0.0)).fold(0.0, f64::max)
    }
}

/// Projection box `[−B, B]^d`, or `[1/B, B]^d` on the positive orthant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PBox {
    bound: f64,
    positive: bool,
}

impl PBox {
    pub fn symmetric(bound: f64) -> Self {
        assert!(bound > 0.0 && bound.is_finite(), "box bound must be positive and finite");
        Self { bound, positive: false }
    }

    pub fn positive(bound: f64) -> Self {
        assert!(bound > 1.0 && bound.is_finite(), "positive box needs B > 1");
        Self { bound, positive: true }
    }

    /// The box matching the model's state space with bound `bound`.
    pub fn for_model(model: &ModelSpec, bound: f64) -> Result<Self> {
        if !(bound > 0.0) || !bound.is_finite() {
            return Err(Error::InvalidParameter(format!("box bound must be > 0, got {bound}")));
        }
        if model.positive_orthant() {
            if bound <= 1.0 {
                return Err(Error::InvalidParameter(format!("positive box needs B > 1, got {bound}")));
            }
            Ok(Self::positive(bound))
        } else {
            Ok(Self::symmetric(bound))
        }
    }

    /// Three-sigma coverage of the driver on `[0, T]`.
    pub fn default_for(model: &ModelSpec) -> Self {
        let p = model.params();
        let t = model.horizon();
        if model.positive_orthant() {
            let b = (p.gbm_drift.abs() * t + 3.0 * p.sigma * t.sqrt()).exp();
            // sigma = 0 and no drift collapses the box onto P₀ = 1
            Self::positive(b.max(1.0 + 1e-6))
        } else {
            let p0 = model.initial().iter().fold(0.0f64, |m, x| m.max(x.abs()));
            let b = 3.0 * p.sigma * t.sqrt() + p0;
            Self::symmetric(if b > 0.0 { b } else { 1.0 })
        }
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn is_positive(&self) -> bool {
        self.positive
    }

    pub fn lower(&self) -> f64 {
        if self.positive {
            1.0 / self.bound
        } else {
            -self.bound
        }
    }

    pub fn upper(&self) -> f64 {
        self.bound
    }

    pub fn bounds(&self, d: usize) -> (Vec<f64>, Vec<f64>) {
        (vec![self.lower(); d], vec![self.upper(); d])
    }

    /// Maps `u ∈ [−1, 1]` to the box, linearly or log-linearly.
    fn from_unit(&self, u: f64) -> f64 {
        if self.positive {
            (u * self.bound.ln()).exp()
        } else {
            u * self.bound
        }
    }
}

/// `θ_j = φ(p, e_j)`.
pub fn discretize_terminal(model: &ModelSpec, p: &[f64], grid: &EGrid) -> GridFunction {
    GridFunction((0..grid.len()).map(|j| model.terminal_value(p, grid.node(j))).collect())
}

/// Componentwise clamp onto the box.
pub fn project_p(p: &[f64], pbox: &PBox) -> Vec<f64> {
    let (lo, hi) = (pbox.lower(), pbox.upper());
    p.iter().map(|x| x.clamp(lo, hi)).collect()
}

const CFL_SEED: u64 = 0xcf1_cf1;
const CFL_INTERIOR_SAMPLES: usize = 256;
const CFL_Y_LEVELS: usize = 32;
const CFL_MAX_CORNER_DIM: usize = 12;

/// Sample points of the box used by the CFL certificate: all corners (or a
/// random subset for large `d`), the center, and interior points. Points are
/// drawn in normalized coordinates so enlarging the box moves them outward.
pub fn box_samples(pbox: &PBox, d: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(CFL_SEED);
    let mut unit: Vec<Vec<f64>> = Vec::new();
    if d <= CFL_MAX_CORNER_DIM {
        for mask in 0u64..(1u64 << d) {
            unit.push((0..d).map(|l| if mask >> l & 1 == 1 { 1.0 } else { -1.0 }).collect());
        }
    } else {
        unit.push(vec![1.0; d]);
        unit.push(vec![-1.0; d]);
        for _ in 0..4096 {
            unit.push((0..d).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect());
        }
    }
    unit.push(vec![0.0; d]);
    for _ in 0..CFL_INTERIOR_SAMPLES {
        unit.push((0..d).map(|_| rng.gen_range(-1.0..=1.0)).collect());
    }
    unit.into_iter()
        .map(|u| u.into_iter().map(|x| pbox.from_unit(x)).collect())
        .collect()
}

/// `c* = sup |μ(p, y)| 𝔡 / δ` over sampled `p` in the box and `y ∈ [0, 1]`.
///
/// Callers require `c* < 1`.
pub fn cfl_certificate(model: &ModelSpec, pbox: &PBox, grid: &EGrid, sub: &SubGrid) -> f64 {
    let ratio = sub.substep() / grid.spacing();
    max_abs_rate(model, pbox) * ratio
}

/// `sup |μ(p, y)|` over the sampled box.
pub fn max_abs_rate(model: &ModelSpec, pbox: &PBox) -> f64 {
    box_samples(pbox, model.dim())
        .iter()
        .map(|p| {
            let f = model.frozen(p);
            (0..=CFL_Y_LEVELS)
                .map(|i| f.rate(i as f64 / CFL_Y_LEVELS as f64).abs())
                .fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
}

/// `inf μ(p, y)` over the sampled box.
pub fn min_rate(model: &ModelSpec, pbox: &PBox) -> f64 {
    box_samples(pbox, model.dim())
        .iter()
        .map(|p| {
            let f = model.frozen(p);
            (0..=CFL_Y_LEVELS)
                .map(|i| f.rate(i as f64 / CFL_Y_LEVELS as f64))
                .fold(f64::INFINITY, f64::min)
        })
        .fold(f64::INFINITY, f64::min)
}
