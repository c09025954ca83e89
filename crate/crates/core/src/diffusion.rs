//! The diffusion step: Euler Monte-Carlo paths for the regression scheme, and
//! the recombining 2d-point cubature lattice with particle merging for the
//! particle scheme.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grids::TimeGrid;
use crate::models::ModelSpec;
use crate::transport::ParticleCdf;

/// One Euler step `p + b(p) dt + σ(p) dw`.
pub fn euler_step(model: &ModelSpec, p: &[f64], dt: f64, dw: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; p.len()];
    model.euler_into(p, dt, dw, &mut out);
    out
}

/// Seeded Euler sampler. Path `i` draws its increments from its own ChaCha
/// stream, so ensembles are reproducible and path `i` does not depend on how
/// many other paths are drawn or on the worker count.
#[derive(Clone, Debug)]
pub struct EulerSampler {
    pub model: ModelSpec,
    pub timegrid: TimeGrid,
    pub seed: u64,
    pub initial: Vec<f64>,
}

impl EulerSampler {
    pub fn new(model: ModelSpec, timegrid: TimeGrid, seed: u64) -> Self {
        let initial = model.initial().to_vec();
        Self {
            model,
            timegrid,
            seed,
            initial,
        }
    }

    pub fn with_initial(mut self, p0: Vec<f64>) -> Self {
        assert_eq!(p0.len(), self.model.dim());
        self.initial = p0;
        self
    }

    /// Paths with stream indices `0..count`.
    pub fn sample_paths(&self, count: usize) -> PathEnsemble {
        self.sample_paths_from(0, count)
    }

    /// Paths with stream indices `first..first + count`.
    pub fn sample_paths_from(&self, first: u64, count: usize) -> PathEnsemble {
        let d = self.model.dim();
        let steps = self.timegrid.steps();
        let dt = self.timegrid.step();
        let sqrt_dt = dt.sqrt();
        let per_path: Vec<(Vec<f64>, Vec<f64>)> = (0..count)
            .into_par_iter()
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                rng.set_stream(first + i as u64);
                let mut pos = Vec::with_capacity((steps + 1) * d);
                let mut inc = Vec::with_capacity(steps * d);
                pos.extend_from_slice(&self.initial);
                let mut next = vec![0.0; d];
                for n in 0..steps {
                    let dw: Vec<f64> = (0..d)
                        .map(|_| {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            z * sqrt_dt
                        })
                        .collect();
                    self.model.euler_into(&pos[n * d..(n + 1) * d], dt, &dw, &mut next);
                    pos.extend_from_slice(&next);
                    inc.extend_from_slice(&dw);
                }
                (pos, inc)
            })
            .collect();
        let mut positions = Vec::with_capacity(count * (steps + 1) * d);
        let mut increments = Vec::with_capacity(count * steps * d);
        for (pos, inc) in per_path {
            positions.extend(pos);
            increments.extend(inc);
        }
        PathEnsemble {
            count,
            steps,
            dim: d,
            positions,
            increments,
        }
    }
}

/// Euler paths `P̂_{t_n}` with their Brownian increments `ΔW_n`.
#[derive(Clone, Debug, PartialEq)]
pub struct PathEnsemble {
    count: usize,
    steps: usize,
    dim: usize,
    positions: Vec<f64>,
    increments: Vec<f64>,
}

impl PathEnsemble {
    pub fn count(&self) -> usize {
        self.count
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `P̂_{t_n}` of path `i`.
    pub fn position(&self, i: usize, n: usize) -> &[f64] {
        let o = (i * (self.steps + 1) + n) * self.dim;
        &self.positions[o..o + self.dim]
    }

    /// `ΔW_n = W_{t_{n+1}} − W_{t_n}` of path `i`.
    pub fn increment(&self, i: usize, n: usize) -> &[f64] {
        let o = (i * self.steps + n) * self.dim;
        &self.increments[o..o + self.dim]
    }
}

/// The `2d` cubature points `±√(d h) 𝔢^ℓ`, each with probability `1/(2d)`.
/// Point `2ℓ` (0-based) is `+√(dh) 𝔢^ℓ`, point `2ℓ + 1` is `−√(dh) 𝔢^ℓ`.
pub fn cubature_increments(d: usize, h: f64) -> Vec<(Vec<f64>, f64)> {
    assert!(d >= 1 && h > 0.0);
    let a = (d as f64 * h).sqrt();
    let prob = 1.0 / (2 * d) as f64;
    let mut out = Vec::with_capacity(2 * d);
    for l in 0..d {
        for sign in [1.0, -1.0] {
            let mut w = vec![0.0; d];
            w[l] = sign * a;
            out.push((w, prob));
        }
    }
    out
}

pub type LatticeKey = Vec<i32>;

/// Recombining support of the cubature random walk. Level `n` holds the
/// integer keys `k` with `‖k‖₁ ≤ n` and `‖k‖₁ ≡ n (mod 2)`; the node position
/// is `√(d 𝔥) k`, and the children of `k` are `k ± 𝔢^ℓ` at level `n + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct CubatureLattice {
    dim: usize,
    step: f64,
    levels: usize,
}

impl CubatureLattice {
    pub fn new(dim: usize, step: f64, levels: usize) -> Result<Self> {
        if dim < 1 {
            return Err(Error::InvalidParameter("lattice dimension must be >= 1".into()));
        }
        if !(step > 0.0) {
            return Err(Error::InvalidParameter(format!("lattice step must be > 0, got {step}")));
        }
        Ok(Self { dim, step, levels })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    /// Keys of level `n` in lexicographic order.
    pub fn level_keys(&self, n: usize) -> Vec<LatticeKey> {
        let mut out = Vec::new();
        let mut key = vec![0i32; self.dim];
        enumerate_keys(0, n as i32, n as i32, &mut key, &mut out);
        out
    }

    pub fn level_size(&self, n: usize) -> u128 {
        lattice_size(self.dim, n)
    }

    /// `w = √(d 𝔥) k`.
    pub fn position(&self, key: &[i32]) -> Vec<f64> {
        let a = (self.dim as f64 * self.step).sqrt();
        key.iter().map(|&k| a * k as f64).collect()
    }

    /// Children of `key` in cubature-point order.
    pub fn children(&self, key: &[i32]) -> Vec<LatticeKey> {
        let mut out = Vec::with_capacity(2 * self.dim);
        for l in 0..self.dim {
            for sign in [1, -1] {
                let mut c = key.to_vec();
                c[l] += sign;
                out.push(c);
            }
        }
        out
    }
}

fn enumerate_keys(axis: usize, budget: i32, level: i32, key: &mut Vec<i32>, out: &mut Vec<LatticeKey>) {
    if axis == key.len() {
        let used = level - budget;
        if used % 2 == level % 2 {
            out.push(key.clone());
        }
        return;
    }
    for v in -budget..=budget {
        key[axis] = v;
        enumerate_keys(axis + 1, budget - v.abs(), level, key, out);
    }
    key[axis] = 0;
}

fn binomial(n: u64, k: u64) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc
}

/// Number of `k ∈ ℤ^d` with `‖k‖₁ = s`.
fn sphere_count(d: usize, s: usize) -> u128 {
    if s == 0 {
        return 1;
    }
    (1..=d.min(s))
        .map(|i| (1u128 << i) * binomial(d as u64, i as u64) * binomial(s as u64 - 1, i as u64 - 1))
        .sum()
}

/// `|𝔖_n|`: keys with `‖k‖₁ ≤ n` and `‖k‖₁ ≡ n (mod 2)`.
pub fn lattice_size(d: usize, n: usize) -> u128 {
    (0..=n).filter(|s| (n - s) % 2 == 0).map(|s| sphere_count(d, s)).sum()
}

/// Sorts the union of `k` clouds of `M` particles and keeps the particles of
/// 1-based rank `k, 2k, …, kM`.
pub fn merge_particles(clouds: &[ParticleCdf]) -> Result<ParticleCdf> {
    let first = clouds
        .first()
        .ok_or_else(|| Error::InvalidParameter("merge needs at least one cloud".into()))?;
    let m = first.len();
    for c in clouds {
        if c.len() != m {
            return Err(Error::LengthMismatch {
                expected: m,
                actual: c.len(),
            });
        }
    }
    let k = clouds.len();
    let mut all: Vec<f64> = Vec::with_capacity(k * m);
    for c in clouds {
        all.extend_from_slice(c.positions());
    }
    // stable merge sort: concatenated sorted runs cost O(kM log k)
    all.sort_by(f64::total_cmp);
    Ok(ParticleCdf::from_sorted((1..=m).map(|r| all[r * k - 1]).collect()))
}

/// Cubature conditional expectation on particle sets: for every level-`n`
/// node, merge the payloads of its `2d` children.
///
/// `children` is aligned with `lattice.level_keys(level + 1)`; the result is
/// aligned with `lattice.level_keys(level)`.
pub fn diffusion_merge_step(lattice: &CubatureLattice, level: usize, children: &[ParticleCdf]) -> Result<Vec<ParticleCdf>> {
    let child_keys = lattice.level_keys(level + 1);
    if child_keys.len() != children.len() {
        return Err(Error::LengthMismatch {
            expected: child_keys.len(),
            actual: children.len(),
        });
    }
    let index: HashMap<&[i32], usize> = child_keys.iter().enumerate().map(|(i, k)| (k.as_slice(), i)).collect();
    lattice
        .level_keys(level)
        .par_iter()
        .map(|key| {
            let mut clouds = Vec::with_capacity(2 * lattice.dim);
            for child in lattice.children(key) {
                match index.get(child.as_slice()) {
                    Some(&i) => clouds.push(children[i].clone()),
                    None => {
                        return Err(Error::MissingChild {
                            level,
                            key: key.clone(),
                            child,
                        })
                    }
                }
            }
            merge_particles(&clouds)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{make_linear_model, make_multiplicative_model, ModelBuilder};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn euler_step_examples() {
        let frozen = ModelBuilder::new(2).additive(0.0).rate(|_: &[f64], y: f64| -y).build().unwrap();
        assert_eq!(euler_step(&frozen, &[0.3, -1.0], 0.5, &[2.0, 7.0]), vec![0.3, -1.0]);

        let lin = make_linear_model(1, 1.0, 0.0).unwrap();
        assert_abs_diff_eq!(euler_step(&lin, &[0.0], 0.1, &[0.3])[0], 0.3, epsilon = 1e-15);

        let g = make_multiplicative_model(1, 0.1, 0.2, 1.0).unwrap();
        assert_abs_diff_eq!(euler_step(&g, &[1.0], 0.1, &[0.0])[0], 1.01, epsilon = 1e-15);
    }

    #[test]
    fn zero_noise_paths_stay_put() {
        let m = make_linear_model(2, 1.0, 0.0).unwrap().with_sigma(0.0).unwrap();
        let s = EulerSampler::new(m, TimeGrid::new(4, 1.0).unwrap(), 3);
        let ens = s.sample_paths(10);
        for i in 0..10 {
            for n in 0..=4 {
                assert_eq!(ens.position(i, n), &[0.0, 0.0]);
            }
        }
    }

    fn terminal_moments(ens: &PathEnsemble) -> (f64, f64) {
        let n = ens.steps();
        let xs: Vec<f64> = (0..ens.count()).map(|i| ens.position(i, n)[0]).collect();
        let k = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / k;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1.0);
        (mean, var)
    }

    #[test]
    fn additive_terminal_moments() {
        let m = make_linear_model(1, 1.0, 0.0).unwrap();
        let ens = EulerSampler::new(m, TimeGrid::new(10, 1.0).unwrap(), 3).sample_paths(100_000);
        let (mean, var) = terminal_moments(&ens);
        let se = (1.0f64 / 100_000.0).sqrt();
        assert!(mean.abs() < 4.0 * se, "mean {mean}");
        // variance of a chi-square sample variance: 2σ⁴/(k−1)
        assert!((var - 1.0).abs() < 4.0 * (2.0f64 / 100_000.0).sqrt(), "var {var}");
    }

    #[test]
    fn geometric_terminal_mean() {
        let (a, s, steps) = (0.2, 0.3, 10);
        let m = make_multiplicative_model(1, a, s, 1.0).unwrap();
        let ens = EulerSampler::new(m, TimeGrid::new(steps, 1.0).unwrap(), 5).sample_paths(100_000);
        let (mean, var) = terminal_moments(&ens);
        // E[∏(1 + a dt + s dW)] = (1 + a dt)^N for the Euler chain
        let expected = (1.0 + a / steps as f64).powi(steps as i32);
        let se = (var / 100_000.0).sqrt();
        assert!((mean - expected).abs() < 4.0 * se, "mean {mean}, expected {expected}, se {se}");
        assert!((expected - a.exp()).abs() < 3e-3);
    }

    #[test]
    fn seeded_ensembles_are_bit_identical() {
        let m = make_multiplicative_model(3, 0.05, 0.3, 1.0).unwrap();
        let s = EulerSampler::new(m, TimeGrid::new(8, 1.0).unwrap(), 42);
        assert_eq!(s.sample_paths(200), s.sample_paths(200));
        // path i does not depend on the ensemble size
        let small = s.sample_paths(5);
        let large = s.sample_paths(50);
        for n in 0..=8 {
            assert_eq!(small.position(4, n), large.position(4, n));
        }
        let other = EulerSampler { seed: 43, ..s.clone() }.sample_paths(5);
        assert_ne!(other.position(0, 8), small.position(0, 8));
    }

    #[test]
    fn increments_reproduce_paths() {
        let m = make_multiplicative_model(2, 0.1, 0.3, 1.0).unwrap();
        let tg = TimeGrid::new(6, 1.0).unwrap();
        let s = EulerSampler::new(m.clone(), tg, 9);
        let ens = s.sample_paths(3);
        for i in 0..3 {
            for n in 0..6 {
                let p = euler_step(&m, ens.position(i, n), tg.step(), ens.increment(i, n));
                assert_eq!(p.as_slice(), ens.position(i, n + 1));
            }
        }
    }

    #[test]
    fn cubature_one_dimension() {
        let pts = cubature_increments(1, 0.25);
        assert_eq!(pts, vec![(vec![0.5], 0.5), (vec![-0.5], 0.5)]);
    }

    #[test]
    fn cubature_covariance_two_dimensions() {
        let pts = cubature_increments(2, 0.1);
        let mut cov = [[0.0; 2]; 2];
        for (w, p) in &pts {
            for a in 0..2 {
                for b in 0..2 {
                    cov[a][b] += p * w[a] * w[b];
                }
            }
        }
        assert_abs_diff_eq!(cov[0][0], 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(cov[1][1], 0.1, epsilon = 1e-15);
        assert_eq!(cov[0][1], 0.0);
    }

    #[test]
    fn lattice_sizes_match_enumeration() {
        for d in 1..=3 {
            let lat = CubatureLattice::new(d, 0.1, 8).unwrap();
            for n in 0..=8 {
                let brute = {
                    let r = n as i32;
                    let mut c = 0u128;
                    let mut k = vec![-r; d];
                    loop {
                        let s: i32 = k.iter().map(|x| x.abs()).sum();
                        if s <= r && (r - s) % 2 == 0 {
                            c += 1;
                        }
                        let mut ax = 0;
                        while ax < d {
                            k[ax] += 1;
                            if k[ax] <= r {
                                break;
                            }
                            k[ax] = -r;
                            ax += 1;
                        }
                        if ax == d {
                            break;
                        }
                    }
                    c
                };
                assert_eq!(lattice_size(d, n), brute, "d={d} n={n}");
                assert_eq!(lat.level_keys(n).len() as u128, brute);
            }
        }
    }

    #[test]
    fn children_live_on_next_level() {
        let lat = CubatureLattice::new(3, 0.2, 5).unwrap();
        for n in 0..5 {
            let next: std::collections::HashSet<_> = lat.level_keys(n + 1).into_iter().collect();
            for k in lat.level_keys(n) {
                let ch = lat.children(&k);
                assert_eq!(ch.len(), 6);
                assert!(ch.iter().all(|c| next.contains(c)));
            }
        }
    }

    #[test]
    fn merge_examples() {
        let a = ParticleCdf::new(vec![0.0, 2.0]).unwrap();
        let b = ParticleCdf::new(vec![1.0, 3.0]).unwrap();
        assert_eq!(merge_particles(&[a.clone(), b.clone()]).unwrap().positions(), &[1.0, 3.0]);

        let c = ParticleCdf::new(vec![-1.0, 0.5, 0.5, 4.0]).unwrap();
        assert_eq!(merge_particles(&[c.clone(), c.clone(), c.clone(), c.clone()]).unwrap(), c);

        let short = ParticleCdf::new(vec![0.0]).unwrap();
        assert!(merge_particles(&[a, short]).is_err());
    }

    #[test]
    fn merge_step_single_level() {
        let lat = CubatureLattice::new(1, 1.0, 1).unwrap();
        assert_eq!(lat.level_keys(1), vec![vec![-1], vec![1]]);
        let children = vec![ParticleCdf::new(vec![1.0, 3.0]).unwrap(), ParticleCdf::new(vec![0.0, 2.0]).unwrap()];
        let root = diffusion_merge_step(&lat, 0, &children).unwrap();
        assert_eq!(root.len(), 1);
        assert_eq!(root[0].positions(), &[1.0, 3.0]);
    }

    #[test]
    fn merge_step_rejects_wrong_payload_count() {
        let lat = CubatureLattice::new(2, 1.0, 2).unwrap();
        let err = diffusion_merge_step(&lat, 0, &[ParticleCdf::constant(0.0, 3)]).unwrap_err();
        assert!(matches!(err, Error::LengthMismatch { .. }));
    }

    #[test]
    fn merged_cdf_tracks_mixture() {
        // rank subsampling moves each quantile by at most one gap: |F − mixture| ≤ 1/M
        let lat = CubatureLattice::new(2, 0.3, 1).unwrap();
        let keys = lat.level_keys(1);
        let m = 50;
        let children: Vec<ParticleCdf> = keys
            .iter()
            .enumerate()
            .map(|(i, _)| ParticleCdf::new((0..m).map(|j| (j as f64 * 0.37 + i as f64 * 0.11).sin() * 2.0).collect::<Vec<_>>().tap_sort()).unwrap())
            .collect();
        let root = diffusion_merge_step(&lat, 0, &children).unwrap().remove(0);
        for e in (-25..=25).map(|x| x as f64 * 0.1) {
            let mix: f64 = children.iter().map(|c| c.eval(e)).sum::<f64>() / children.len() as f64;
            assert!((root.eval(e) - mix).abs() <= 1.0 / m as f64 + 1e-12);
        }
    }

    trait TapSort {
        fn tap_sort(self) -> Self;
    }
    impl TapSort for Vec<f64> {
        fn tap_sort(mut self) -> Self {
            self.sort_by(f64::total_cmp);
            self
        }
    }

    proptest! {
        #[test]
        fn merge_commutes_with_shifts(
            raw in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 6), 4),
            shift in -3.0f64..3.0,
        ) {
            let clouds: Vec<ParticleCdf> = raw.into_iter().map(|v| ParticleCdf::new(v.tap_sort()).unwrap()).collect();
            let shifted: Vec<ParticleCdf> = clouds.iter().map(|c| c.shifted(shift)).collect();
            let a = merge_particles(&shifted).unwrap();
            let b = merge_particles(&clouds).unwrap().shifted(shift);
            prop_assert_eq!(a.clone(), b);
            let lo = clouds.iter().map(|c| c.positions()[0]).fold(f64::INFINITY, f64::min) + shift;
            let hi = clouds.iter().map(|c| c.positions()[5]).fold(f64::NEG_INFINITY, f64::max) + shift;
            prop_assert!(a.is_sorted());
            prop_assert!(a.positions().iter().all(|x| *x >= lo && *x <= hi));
        }
    }
}
