//! Discrete transport operators for the backward conservation law
//!
//! ```text
//! ∂_t w + ∂_e 𝔐(p, w) = 0 on [0, h),   w(h, ·) = θ,
//! ```
//!
//! with `p` frozen. Reversing time turns it into a forward law with flux
//! `−𝔐` and characteristic speed `−μ(p, w)`, so a constant rate `c` gives the
//! exact solution `w(0, e) = θ(e + c h)`.
//!
//! Two grid schemes (Lax-Friedrichs, Upwind for `μ ≥ 0`) act on grid
//! functions; the sticky-particle scheme acts on sorted particle sets
//! representing empirical CDFs.

use crate::error::{Error, Result};
use crate::grids::{EGrid, GridFunction, SubGrid};
use crate::models::{FrozenRate, ModelSpec};

/// Finite-difference transport scheme.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FdScheme {
    LaxFriedrichs,
    Upwind,
}

impl FdScheme {
    pub fn name(self) -> &'static str {
        match self {
            FdScheme::LaxFriedrichs => "lf",
            FdScheme::Upwind => "upwind",
        }
    }

    pub fn apply(
        self,
        model: &ModelSpec,
        p: &[f64],
        theta: &GridFunction,
        grid: &EGrid,
        sub: &SubGrid,
    ) -> Result<GridFunction> {
        match self {
            FdScheme::LaxFriedrichs => lax_friedrichs(model, p, theta, grid, sub),
            FdScheme::Upwind => upwind(model, p, theta, grid, sub),
        }
    }
}

fn check_len(theta: &GridFunction, grid: &EGrid) -> Result<()> {
    if theta.len() != grid.len() {
        return Err(Error::LengthMismatch {
            expected: grid.len(),
            actual: theta.len(),
        });
    }
    Ok(())
}

/// Lax-Friedrichs: for interior `j`,
/// `V^k_j = ½(V^{k+1}_{j+1} + V^{k+1}_{j−1}) + 𝔡/(2δ) (𝔐(V^{k+1}_{j+1}) − 𝔐(V^{k+1}_{j−1}))`,
/// end nodes copied, every sub-step clamped to `[0, 1]`.
pub fn lax_friedrichs(
    model: &ModelSpec,
    p: &[f64],
    theta: &GridFunction,
    grid: &EGrid,
    sub: &SubGrid,
) -> Result<GridFunction> {
    check_len(theta, grid)?;
    let ratio = sub.substep() / grid.spacing();
    Ok(GridFunction(lax_friedrichs_frozen(
        &model.frozen(p),
        &theta.0,
        ratio,
        sub.substeps(),
    )))
}

pub(crate) fn lax_friedrichs_frozen(rate: &FrozenRate<'_>, theta: &[f64], ratio: f64, substeps: usize) -> Vec<f64> {
    let n = theta.len();
    let half = 0.5 * ratio;
    let mut cur = theta.to_vec();
    let mut next = vec![0.0; n];
    let mut flux = vec![0.0; n];
    for _ in 0..substeps {
        for (f, v) in flux.iter_mut().zip(&cur) {
            *f = rate.flux(*v);
        }
        next[0] = cur[0];
        next[n - 1] = cur[n - 1];
        for j in 1..n - 1 {
            let v = 0.5 * (cur[j + 1] + cur[j - 1]) + half * (flux[j + 1] - flux[j - 1]);
            next[j] = v.clamp(0.0, 1.0);
        }
        std::mem::swap(&mut cur, &mut next);
    }
    cur
}

/// Upwind for `μ ≥ 0`: for `j < J`,
/// `V^k_j = V^{k+1}_j + 𝔡/δ (𝔐(V^{k+1}_{j+1}) − 𝔐(V^{k+1}_j))`,
/// last node copied, every sub-step clamped to `[0, 1]`.
///
/// Refuses a negative rate at `p`: the stencil would look the wrong way.
pub fn upwind(model: &ModelSpec, p: &[f64], theta: &GridFunction, grid: &EGrid, sub: &SubGrid) -> Result<GridFunction> {
    check_len(theta, grid)?;
    let rate = model.frozen(p);
    let min_rate = rate.rate(0.0).min(rate.rate(1.0));
    if min_rate < 0.0 {
        return Err(Error::UpwindDirection { min_rate });
    }
    let ratio = sub.substep() / grid.spacing();
    Ok(GridFunction(upwind_frozen(&rate, &theta.0, ratio, sub.substeps())))
}

pub(crate) fn upwind_frozen(rate: &FrozenRate<'_>, theta: &[f64], ratio: f64, substeps: usize) -> Vec<f64> {
    let n = theta.len();
    let mut cur = theta.to_vec();
    let mut next = vec![0.0; n];
    let mut flux = vec![0.0; n];
    for _ in 0..substeps {
        for (f, v) in flux.iter_mut().zip(&cur) {
            *f = rate.flux(*v);
        }
        for j in 0..n - 1 {
            let v = cur[j] + ratio * (flux[j + 1] - flux[j]);
            next[j] = v.clamp(0.0, 1.0);
        }
        next[n - 1] = cur[n - 1];
        std::mem::swap(&mut cur, &mut next);
    }
    cur
}

/// Largest jump between a grid end node and its neighbour. Transport copies
/// end values, so a large jump means the transition layer reached the edge.
pub fn boundary_defect(f: &GridFunction) -> f64 {
    let v = &f.0;
    let n = v.len();
    if n < 2 {
        return 0.0;
    }
    (v[1] - v[0]).abs().max((v[n - 1] - v[n - 2]).abs())
}

/// A sorted particle set `e₁ ≤ … ≤ e_M` representing the empirical CDF
/// `e ↦ #{m : e_m ≤ e} / M`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleCdf {
    positions: Vec<f64>,
}

impl ParticleCdf {
    pub fn new(positions: Vec<f64>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::InvalidParameter("particle set must be non-empty".into()));
        }
        if positions.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidParameter("particle positions must be finite".into()));
        }
        if positions.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::InvalidParameter("particle positions must be sorted".into()));
        }
        Ok(Self { positions })
    }

    /// `M` particles all at `value`: the CDF `1_{e ≥ value}`.
    pub fn constant(value: f64, count: usize) -> Self {
        assert!(count >= 1);
        Self {
            positions: vec![value; count],
        }
    }

    pub(crate) fn from_sorted(positions: Vec<f64>) -> Self {
        debug_assert!(positions.windows(2).all(|w| w[0] <= w[1]));
        Self { positions }
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn is_sorted(&self) -> bool {
        self.positions.windows(2).all(|w| w[0] <= w[1])
    }

    pub fn eval(&self, e: f64) -> f64 {
        cdf_eval(self, e)
    }

    pub fn shifted(&self, a: f64) -> Self {
        Self {
            positions: self.positions.iter().map(|x| x + a).collect(),
        }
    }
}

/// `#{m : e_m ≤ e} / M`.
pub fn cdf_eval(particles: &ParticleCdf, e: f64) -> f64 {
    let below = particles.positions.partition_point(|&x| x <= e);
    below as f64 / particles.len() as f64
}

/// Mass-averaged characteristic speeds
/// `F̄_m(p) = −M ∫_{(m−1)/M}^{m/M} μ(p, y) dy = −M (𝔐(m/M) − 𝔐((m−1)/M))`.
pub fn spd_velocities(model: &ModelSpec, p: &[f64], count: usize) -> Vec<f64> {
    velocities_frozen(&model.frozen(p), count)
}

fn velocities_frozen(rate: &FrozenRate<'_>, count: usize) -> Vec<f64> {
    let m = count as f64;
    let mut prev = rate.flux(0.0);
    let mut out = Vec::with_capacity(count);
    for k in 1..=count {
        let cur = rate.flux(k as f64 / m);
        out.push(-m * (cur - prev));
        prev = cur;
    }
    // Flux differences can invert by rounding where μ is flat in y; the exact
    // speeds are non-decreasing because μ is decreasing.
    for k in 1..count {
        if out[k] < out[k - 1] {
            debug_assert!(out[k - 1] - out[k] <= 1e-9 * (1.0 + out[k].abs()));
            out[k] = out[k - 1];
        }
    }
    out
}

/// Sticky-particle transport over horizon `h`: `e_m ↦ e_m + F̄_m(p) h`.
pub fn spd_transport(model: &ModelSpec, p: &[f64], particles: &ParticleCdf, h: f64) -> ParticleCdf {
    let v = velocities_frozen(&model.frozen(p), particles.len());
    let moved = particles
        .positions
        .iter()
        .zip(&v)
        .map(|(e, speed)| e + speed * h)
        .collect();
    ParticleCdf::from_sorted(moved)
}
