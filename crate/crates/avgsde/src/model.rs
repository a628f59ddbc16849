//! Core abstractions: oscillating drifts with their averaging data
//! (averaged field, modulus, envelope), diffusion coefficients with
//! ellipticity constants, finitely-supported empirical measures, and the
//! numeric operations built on them (time averaging, averaging-deficiency,
//! localized L^p norm).
//!
//! All types are immutable after construction; every operation is a pure
//! function of its inputs and safe to call from any thread.

use crate::error::{Error, EvalError, Result};
use crate::rng::{StreamTag, Substream};

// ---------------------------------------------------------------------------
// Empirical measures
// ---------------------------------------------------------------------------

/// A weighted particle cloud standing in for a time-marginal law.
///
/// Weights are normalized to sum to 1 at construction; the weighted mean is
/// cached because measure-dependent drifts read it once per evaluation.
#[derive(Debug, Clone)]
pub struct EmpiricalMeasure {
    dim: usize,
    flat: Vec<f64>,
    weights: Vec<f64>,
    mean: Vec<f64>,
}

impl EmpiricalMeasure {
    /// Uniform weights 1/N over the given particles.
    pub fn uniform(particles: Vec<Vec<f64>>) -> Result<Self> {
        if particles.is_empty() {
            return Err(Error::InvalidArgument(
                "empirical measure needs at least one particle".into(),
            ));
        }
        let dim = particles[0].len();
        let n = particles.len();
        let mut flat = Vec::with_capacity(n * dim);
        for p in &particles {
            if p.len() != dim {
                return Err(Error::InvalidArgument(
                    "particles have inconsistent dimensions".into(),
                ));
            }
            flat.extend_from_slice(p);
        }
        Self::from_flat_weighted(dim, flat, vec![1.0; n])
    }

    /// Particles with explicit nonnegative weights; weights are renormalized
    /// to sum to 1 (so scaling all weights by c > 0 changes nothing).
    pub fn weighted(particles: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        if particles.len() != weights.len() {
            return Err(Error::InvalidArgument(
                "weights and particles must have equal length".into(),
            ));
        }
        let m = Self::uniform(particles)?;
        Self::from_flat_weighted(m.dim, m.flat, weights)
    }

    /// Point mass at `x`.
    pub fn dirac(x: Vec<f64>) -> Self {
        Self::uniform(vec![x]).expect("single particle")
    }

    /// Uniform measure from flat storage `[p0_0..p0_d, p1_0..p1_d, ...]`.
    pub fn from_flat(dim: usize, flat: Vec<f64>) -> Result<Self> {
        if dim == 0 || flat.is_empty() || !flat.len().is_multiple_of(dim) {
            return Err(Error::InvalidArgument(
                "flat particle storage must be a nonempty multiple of dim".into(),
            ));
        }
        let n = flat.len() / dim;
        Self::from_flat_weighted(dim, flat, vec![1.0; n])
    }

    fn from_flat_weighted(dim: usize, flat: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::InvalidArgument(
                "weights must be nonnegative with positive finite sum".into(),
            ));
        }
        if weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(Error::InvalidArgument("weights must be nonnegative".into()));
        }
        let weights: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let mut m = EmpiricalMeasure {
            dim,
            flat,
            weights,
            mean: vec![0.0; dim],
        };
        m.recompute_mean();
        debug_assert!((m.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        Ok(m)
    }

    /// Replace the particle positions in place (uniform weights, same count);
    /// used by the simulator to refresh the per-step law proxy without
    /// reallocating.
    pub fn set_flat(&mut self, flat: &[f64]) {
        debug_assert_eq!(flat.len(), self.flat.len());
        self.flat.copy_from_slice(flat);
        self.recompute_mean();
    }

    fn recompute_mean(&mut self) {
        let d = self.dim;
        self.mean.iter_mut().for_each(|m| *m = 0.0);
        for (i, w) in self.weights.iter().enumerate() {
            let p = &self.flat[i * d..(i + 1) * d];
            for (m, v) in self.mean.iter_mut().zip(p) {
                *m += w * v;
            }
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        false // invariant: at least one particle
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn particle(&self, i: usize) -> &[f64] {
        &self.flat[i * self.dim..(i + 1) * self.dim]
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }

    /// Cached weighted mean (the only statistic the shipped smooth drifts
    /// read per evaluation).
    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn iter_weighted(&self) -> impl Iterator<Item = (&[f64], f64)> {
        (0..self.len()).map(move |i| (self.particle(i), self.weight(i)))
    }

    /// Σ w_i f(x_i).
    pub fn integrate(&self, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
        self.iter_weighted().map(|(x, w)| w * f(x)).sum()
    }
}

// ---------------------------------------------------------------------------
// Drift and diffusion specifications
// ---------------------------------------------------------------------------

pub type DriftFn = dyn Fn(f64, &[f64], &EmpiricalMeasure, &mut [f64]) -> std::result::Result<(), EvalError>
    + Send
    + Sync;
pub type AveragedDriftFn = dyn Fn(&[f64], &EmpiricalMeasure, &mut [f64]) -> std::result::Result<(), EvalError>
    + Send
    + Sync;
pub type OmegaFn = dyn Fn(f64) -> f64 + Send + Sync;
pub type EnvelopeFn = dyn Fn(&[f64], &EmpiricalMeasure) -> f64 + Send + Sync;

/// An oscillating drift together with its averaging data: the averaged field
/// (when known in closed form), the decay modulus ω of the averaging
/// deficiency, and the state/measure envelope H multiplying it.
///
/// Callers of the fast drift pass the already-rescaled time (the simulator
/// supplies t/ε).
pub struct OscillatingDriftSpec {
    dim: usize,
    fast_drift: Box<DriftFn>,
    averaged_drift: Option<Box<AveragedDriftFn>>,
    omega: Box<OmegaFn>,
    envelope: Box<EnvelopeFn>,
    p0: f64,
    kappa0: f64,
    /// Shortest oscillation period of the fast drift, when known; drives the
    /// quadrature-resolution rule in [`numeric_average`].
    oscillation_period: Option<f64>,
}

impl OscillatingDriftSpec {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        dim: usize,
        fast_drift: Box<DriftFn>,
        averaged_drift: Option<Box<AveragedDriftFn>>,
        omega: Box<OmegaFn>,
        envelope: Box<EnvelopeFn>,
        p0: f64,
        kappa0: f64,
        oscillation_period: Option<f64>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument(
                "state dimension must be >= 1".into(),
            ));
        }
        let d_floor = (dim.max(2)) as f64;
        if !(p0 > d_floor) {
            return Err(Error::InvalidArgument(format!(
                "p0 must lie in (max(d,2), inf], got {p0}"
            )));
        }
        if !(kappa0 >= 0.0) {
            return Err(Error::InvalidArgument("kappa0 must be nonnegative".into()));
        }
        if let Some(t) = oscillation_period {
            if !(t > 0.0) {
                return Err(Error::InvalidArgument(
                    "oscillation period must be positive".into(),
                ));
            }
        }
        Ok(OscillatingDriftSpec {
            dim,
            fast_drift,
            averaged_drift,
            omega,
            envelope,
            p0,
            kappa0,
            oscillation_period,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn p0(&self) -> f64 {
        self.p0
    }

    pub fn kappa0(&self) -> f64 {
        self.kappa0
    }

    pub fn oscillation_period(&self) -> Option<f64> {
        self.oscillation_period
    }

    pub fn has_averaged_drift(&self) -> bool {
        self.averaged_drift.is_some()
    }

    /// Evaluate b(t, x, μ) into `out` (t is the already-rescaled argument).
    pub fn eval_fast(
        &self,
        t: f64,
        x: &[f64],
        mu: &EmpiricalMeasure,
        out: &mut [f64],
    ) -> std::result::Result<(), EvalError> {
        (self.fast_drift)(t, x, mu, out)
    }

    /// Evaluate the averaged field into `out`; a configuration error when the
    /// spec carries none.
    pub fn eval_averaged(&self, x: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]) -> Result<()> {
        match &self.averaged_drift {
            Some(f) => f(x, mu, out).map_err(|e| Error::Evaluation {
                t: f64::NAN,
                reason: format!("averaged drift: {e}"),
            }),
            None => Err(Error::Config(
                "averaged drift is not available on this drift spec".into(),
            )),
        }
    }

    pub fn omega(&self, t: f64) -> f64 {
        (self.omega)(t)
    }

    pub fn envelope(&self, x: &[f64], mu: &EmpiricalMeasure) -> f64 {
        (self.envelope)(x, mu)
    }
}

pub type SigmaFn = dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync;

/// Diffusion coefficient σ with its ellipticity constant κ1 > 1 and Hölder
/// exponent; σ is exposed matrix-free as the action ξ ↦ σ(x)ξ.
pub struct DiffusionSpec {
    dim: usize,
    sigma: Box<SigmaFn>,
    kappa1: f64,
    beta_holder: f64,
}

impl DiffusionSpec {
    pub fn new(dim: usize, sigma: Box<SigmaFn>, kappa1: f64, beta_holder: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument(
                "state dimension must be >= 1".into(),
            ));
        }
        if !(kappa1 > 1.0) {
            return Err(Error::InvalidArgument(format!(
                "ellipticity constant kappa1 must exceed 1, got {kappa1}"
            )));
        }
        if !(beta_holder > 0.0 && beta_holder < 1.0) {
            return Err(Error::InvalidArgument(
                "Hoelder exponent must lie in (0,1)".into(),
            ));
        }
        Ok(DiffusionSpec {
            dim,
            sigma,
            kappa1,
            beta_holder,
        })
    }

    /// σ(x) = c·I. The stored κ1 exceeds max(c, 1/c) by a hair so the strict
    /// inequality of the ellipticity check holds on probes.
    pub fn scaled_identity(dim: usize, c: f64) -> Result<Self> {
        if !(c > 0.0) {
            return Err(Error::InvalidArgument(
                "identity diffusion scale must be positive".into(),
            ));
        }
        let kappa1 = (c.max(1.0 / c)) * (1.0 + 1e-9) + 1e-9;
        Self::new(
            dim,
            Box::new(move |_x, xi, out| {
                for (o, v) in out.iter_mut().zip(xi) {
                    *o = c * v;
                }
            }),
            kappa1.max(1.0 + 1e-6),
            0.5,
        )
    }

    pub fn identity(dim: usize) -> Result<Self> {
        Self::scaled_identity(dim, 1.0)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kappa1(&self) -> f64 {
        self.kappa1
    }

    pub fn beta_holder(&self) -> f64 {
        self.beta_holder
    }

    /// out = σ(x)·ξ.
    #[inline]
    pub fn apply(&self, x: &[f64], xi: &[f64], out: &mut [f64]) {
        (self.sigma)(x, xi, out)
    }

    /// Randomized uniform-ellipticity probe: κ1^{-1}|ξ| ≤ |σ(x)ξ| ≤ κ1|ξ| on
    /// `n_probes` pairs of sampled states and directions.
    pub fn check_ellipticity(&self, seed: u64, n_probes: usize, box_half_width: f64) -> Result<()> {
        let d = self.dim;
        let mut xi = vec![0.0; d];
        let mut x = vec![0.0; d];
        let mut out = vec![0.0; d];
        for i in 0..n_probes {
            let mut s = Substream::new(seed, StreamTag::Probe, 0xe11, i as u64, 0);
            for j in 0..d {
                x[j] = s.uniform_in(-box_half_width, box_half_width);
                xi[j] = s.normal();
            }
            let nxi = norm(&xi);
            if nxi == 0.0 {
                continue;
            }
            self.apply(&x, &xi, &mut out);
            let nout = norm(&out);
            if nout < nxi / self.kappa1 || nout > nxi * self.kappa1 {
                return Err(Error::InvalidArgument(format!(
                    "ellipticity bounds violated at probe {i}: |sigma xi|/|xi| = {}",
                    nout / nxi
                )));
            }
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

// ---------------------------------------------------------------------------
// Time averaging and the averaging deficiency
// ---------------------------------------------------------------------------

/// Number of midpoint nodes after applying the oscillation-resolution rule:
/// at least 20 nodes per shortest period over the averaging window.
fn effective_quad_n(spec: &OscillatingDriftSpec, t_avg: f64, quad_n: usize) -> usize {
    match spec.oscillation_period() {
        Some(period) => {
            let needed = (20.0 * (t_avg / period)).ceil() as usize;
            quad_n.max(needed).max(2)
        }
        None => quad_n.max(2),
    }
}

/// (1/T)·∫_{t0}^{t0+T} b(s, x, μ) ds by composite midpoint quadrature.
///
/// When the drift carries period metadata the node count is raised to at
/// least 20 nodes per oscillation period so the oscillation is resolved
/// before it is averaged.
pub fn numeric_average(
    spec: &OscillatingDriftSpec,
    x: &[f64],
    mu: &EmpiricalMeasure,
    t0: f64,
    t_avg: f64,
    quad_n: usize,
) -> Result<Vec<f64>> {
    if !(t_avg > 0.0) {
        return Err(Error::InvalidArgument(
            "averaging window must be positive".into(),
        ));
    }
    if quad_n < 2 {
        return Err(Error::InvalidArgument("quad_n must be at least 2".into()));
    }
    let n = effective_quad_n(spec, t_avg, quad_n);
    let d = spec.dim();
    let dt = t_avg / n as f64;
    let mut acc = vec![0.0; d];
    let mut node_val = vec![0.0; d];
    for k in 0..n {
        let s = t0 + (k as f64 + 0.5) * dt;
        spec.eval_fast(s, x, mu, &mut node_val)
            .map_err(|e| Error::Evaluation {
                t: s,
                reason: e.to_string(),
            })?;
        if node_val.iter().any(|v| !v.is_finite()) {
            return Err(Error::Evaluation {
                t: s,
                reason: "drift evaluated to a non-finite vector".into(),
            });
        }
        for j in 0..d {
            acc[j] += node_val[j];
        }
    }
    for a in &mut acc {
        *a /= n as f64;
    }
    Ok(acc)
}

/// |(1/T)·∫_{t0}^{t0+T} (b(s,x,μ) − b̄(x,μ)) ds| (Euclidean norm).
///
/// Callers compare the result against ω(T)·H(x, μ).
pub fn kbm_deficiency(
    spec: &OscillatingDriftSpec,
    x: &[f64],
    mu: &EmpiricalMeasure,
    t0: f64,
    t_avg: f64,
    quad_n: usize,
) -> Result<f64> {
    if !spec.has_averaged_drift() {
        return Err(Error::Config(
            "averaging deficiency needs an averaged drift (closed-form or pre-tabulated)".into(),
        ));
    }
    let avg = numeric_average(spec, x, mu, t0, t_avg, quad_n)?;
    let mut bbar = vec![0.0; spec.dim()];
    spec.eval_averaged(x, mu, &mut bbar)?;
    let diff: f64 = avg
        .iter()
        .zip(&bbar)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok(diff)
}

// ---------------------------------------------------------------------------
// Localized L^p norm
// ---------------------------------------------------------------------------

/// Regular sampling grid over a rectangular window; functions are sampled at
/// cell midpoints, which keeps point singularities at lattice-symmetric
/// locations off the nodes.
#[derive(Debug, Clone)]
pub struct GridSpec {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub cells_per_axis: usize,
}

impl GridSpec {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>, cells_per_axis: usize) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(Error::InvalidArgument(
                "grid bounds must be nonempty and matched".into(),
            ));
        }
        if lo.iter().zip(&hi).any(|(a, b)| !(a < b)) {
            return Err(Error::InvalidArgument(
                "grid window must have positive extent".into(),
            ));
        }
        if cells_per_axis < 2 {
            return Err(Error::InvalidArgument(
                "grid needs at least 2 cells per axis".into(),
            ));
        }
        Ok(GridSpec {
            lo,
            hi,
            cells_per_axis,
        })
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    fn cell_volume(&self) -> f64 {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(a, b)| (b - a) / self.cells_per_axis as f64)
            .product()
    }
}

/// Smooth cutoff: 1 on |x| ≤ 1, 0 on |x| ≥ 2, exp-based partition between.
pub fn cutoff_bump(r: f64) -> f64 {
    let r = r.abs();
    if r <= 1.0 {
        1.0
    } else if r >= 2.0 {
        0.0
    } else {
        fn g(t: f64) -> f64 {
            if t > 0.0 {
                (-1.0 / t).exp()
            } else {
                0.0
            }
        }
        let a = g(2.0 - r);
        let b = g(r - 1.0);
        a / (a + b)
    }
}

/// χ_r^z(x) = χ((x − z)/r) with χ the smooth bump above.
pub fn cutoff_chi(x: &[f64], center: &[f64], r: f64) -> f64 {
    let dist: f64 = x
        .iter()
        .zip(center)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    cutoff_bump(dist / r)
}

/// Default center set for the localized norm: a unit-spaced lattice covering
/// the sampling window (the sup over all of R^d restricted to where the
/// window carries data).
pub fn default_centers(grid: &GridSpec) -> Vec<Vec<f64>> {
    let d = grid.dim();
    let counts: Vec<usize> = grid
        .lo
        .iter()
        .zip(&grid.hi)
        .map(|(a, b)| (b - a).ceil() as usize + 1)
        .collect();
    let total: usize = counts.iter().product();
    let mut centers = Vec::with_capacity(total);
    for flat in 0..total {
        let mut rem = flat;
        let mut c = vec![0.0; d];
        for j in 0..d {
            let idx = rem % counts[j];
            rem /= counts[j];
            c[j] = (grid.lo[j] + idx as f64).min(grid.hi[j]);
        }
        centers.push(c);
    }
    centers
}

/// sup over centers z of ‖χ_r^z·f‖_p, the p-norm computed by midpoint
/// quadrature on the supplied grid. The cutoff radius convention is r = 1.
pub fn localized_lp_norm(
    f: impl Fn(&[f64]) -> f64,
    grid: &GridSpec,
    p: f64,
    r: f64,
    centers: &[Vec<f64>],
) -> Result<f64> {
    if centers.is_empty() {
        return Err(Error::InvalidArgument(
            "centers list must be nonempty".into(),
        ));
    }
    if !(p > 1.0) {
        return Err(Error::InvalidArgument("p must lie in (1, inf)".into()));
    }
    if !(r > 0.0) {
        return Err(Error::InvalidArgument(
            "cutoff radius must be positive".into(),
        ));
    }
    let d = grid.dim();
    if centers.iter().any(|c| c.len() != d) {
        return Err(Error::InvalidArgument("center dimension mismatch".into()));
    }
    let max_step = grid
        .lo
        .iter()
        .zip(&grid.hi)
        .map(|(a, b)| (b - a) / grid.cells_per_axis as f64)
        .fold(0.0_f64, f64::max);
    if max_step > r / 2.0 {
        return Err(Error::InvalidArgument(format!(
            "grid step {max_step} too coarse to resolve the cutoff transition (needs <= r/2 = {})",
            r / 2.0
        )));
    }
    let n = grid.cells_per_axis;
    let steps: Vec<f64> = grid
        .lo
        .iter()
        .zip(&grid.hi)
        .map(|(a, b)| (b - a) / n as f64)
        .collect();
    let vol = grid.cell_volume();
    let total = n.pow(d as u32);
    let mut best: f64 = 0.0;
    let mut x = vec![0.0; d];
    for center in centers {
        let mut acc = 0.0;
        for flat in 0..total {
            let mut rem = flat;
            for j in 0..d {
                let idx = rem % n;
                rem /= n;
                x[j] = grid.lo[j] + (idx as f64 + 0.5) * steps[j];
            }
            let chi = cutoff_chi(&x, center, r);
            if chi == 0.0 {
                continue;
            }
            let v = (chi * f(&x)).abs();
            acc += v.powf(p) * vol;
        }
        best = best.max(acc.powf(1.0 / p));
    }
    Ok(best)
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn tanh_drift(dim: usize) -> OscillatingDriftSpec {
        // sin(t)·tanh(x): measure independent, zero average.
        OscillatingDriftSpec::new(
            dim,
            Box::new(
                |t: f64, x: &[f64], _mu: &EmpiricalMeasure, out: &mut [f64]| {
                    for (o, xi) in out.iter_mut().zip(x) {
                        *o = t.sin() * xi.tanh();
                    }
                    Ok(())
                },
            ),
            Some(Box::new(
                |_x: &[f64], _mu: &EmpiricalMeasure, out: &mut [f64]| {
                    out.iter_mut().for_each(|o| *o = 0.0);
                    Ok(())
                },
            )),
            Box::new(|t| 2.0 / t),
            Box::new(|x: &[f64], _mu: &EmpiricalMeasure| {
                norm(&x.iter().map(|v| v.tanh()).collect::<Vec<_>>())
            }),
            f64::INFINITY,
            2.0,
            Some(2.0 * PI),
        )
        .unwrap()
    }

    fn constant_drift(dim: usize, c: f64) -> OscillatingDriftSpec {
        OscillatingDriftSpec::new(
            dim,
            Box::new(
                move |_t, _x: &[f64], _mu: &EmpiricalMeasure, out: &mut [f64]| {
                    out.iter_mut().for_each(|o| *o = c);
                    Ok(())
                },
            ),
            Some(Box::new(
                move |_x: &[f64], _mu: &EmpiricalMeasure, out: &mut [f64]| {
                    out.iter_mut().for_each(|o| *o = c);
                    Ok(())
                },
            )),
            Box::new(|_t| 0.0),
            Box::new(|_x: &[f64], _mu: &EmpiricalMeasure| 1.0),
            f64::INFINITY,
            c.abs(),
            None,
        )
        .unwrap()
    }

    #[test]
    fn measure_weights_normalize_and_mean_caches() {
        let m = EmpiricalMeasure::weighted(vec![vec![0.0, 0.0], vec![2.0, 4.0]], vec![3.0, 1.0])
            .unwrap();
        assert!((m.weight(0) - 0.75).abs() < 1e-15);
        assert!((m.mean()[0] - 0.5).abs() < 1e-15);
        assert!((m.mean()[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn measure_rejects_bad_weights() {
        assert!(EmpiricalMeasure::weighted(vec![vec![0.0]], vec![-1.0]).is_err());
        assert!(EmpiricalMeasure::uniform(vec![]).is_err());
    }

    #[test]
    fn sine_over_full_periods_averages_to_zero() {
        let spec = tanh_drift(2);
        let mu = EmpiricalMeasure::dirac(vec![0.0, 0.0]);
        for k in [1u32, 3] {
            let avg =
                numeric_average(&spec, &[0.7, -1.3], &mu, 0.0, 2.0 * PI * k as f64, 64).unwrap();
            for v in avg {
                assert!(v.abs() < 1e-6, "nonzero average {v}");
            }
        }
    }

    #[test]
    fn constant_drift_averages_to_itself() {
        let spec = constant_drift(3, -1.75);
        let mu = EmpiricalMeasure::dirac(vec![0.0; 3]);
        for t_avg in [0.3, 2.0, 17.0] {
            let avg = numeric_average(&spec, &[1.0, 2.0, 3.0], &mu, 5.0, t_avg, 8).unwrap();
            for v in avg {
                assert!((v + 1.75).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn numeric_average_is_linear_in_the_drift() {
        // Same quadrature nodes: avg(b1 + b2) == avg(b1) + avg(b2) exactly.
        let b1 = tanh_drift(1);
        let b2 = constant_drift(1, 0.9);
        let combined = OscillatingDriftSpec::new(
            1,
            Box::new(
                |t: f64, x: &[f64], _mu: &EmpiricalMeasure, out: &mut [f64]| {
                    out[0] = t.sin() * x[0].tanh() + 0.9;
                    Ok(())
                },
            ),
            None,
            Box::new(|t| 2.0 / t),
            Box::new(|_x: &[f64], _mu: &EmpiricalMeasure| 1.0),
            f64::INFINITY,
            2.0,
            Some(2.0 * PI),
        )
        .unwrap();
        let mu = EmpiricalMeasure::dirac(vec![0.0]);
        let x = [0.4];
        let (t0, t_avg, n) = (1.3, 7.7, 57);
        let a1 = numeric_average(&b1, &x, &mu, t0, t_avg, n).unwrap()[0];
        let a2 = numeric_average(&b2, &x, &mu, t0, t_avg, n).unwrap()[0];
        let a12 = numeric_average(&combined, &x, &mu, t0, t_avg, n).unwrap()[0];
        // Same quadrature nodes; separate accumulators differ only in the
        // last rounding bits.
        assert!((a12 - (a1 + a2)).abs() <= 1e-14 * a12.abs().max(1.0));
    }

    #[test]
    fn deficiency_of_constant_drift_is_zero() {
        let spec = constant_drift(2, 4.25);
        let mu = EmpiricalMeasure::dirac(vec![0.0, 0.0]);
        let d = kbm_deficiency(&spec, &[1.0, -1.0], &mu, 3.0, 11.0, 16).unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn deficiency_over_a_full_period_cancels() {
        let spec = tanh_drift(1);
        let mu = EmpiricalMeasure::dirac(vec![0.0]);
        let d = kbm_deficiency(&spec, &[2.0], &mu, 0.25, 2.0 * PI, 32).unwrap();
        assert!(d < 1e-6, "deficiency {d}");
    }

    #[test]
    fn deficiency_requires_averaged_drift() {
        let spec = OscillatingDriftSpec::new(
            1,
            Box::new(|_t, _x: &[f64], _mu: &EmpiricalMeasure, out: &mut [f64]| {
                out[0] = 1.0;
                Ok(())
            }),
            None,
            Box::new(|_t| 0.0),
            Box::new(|_x: &[f64], _mu: &EmpiricalMeasure| 1.0),
            f64::INFINITY,
            1.0,
            None,
        )
        .unwrap();
        let mu = EmpiricalMeasure::dirac(vec![0.0]);
        assert!(matches!(
            kbm_deficiency(&spec, &[0.0], &mu, 0.0, 1.0, 4),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn evaluation_error_identifies_the_node() {
        let spec = OscillatingDriftSpec::new(
            1,
            Box::new(
                |t: f64, _x: &[f64], _mu: &EmpiricalMeasure, out: &mut [f64]| {
                    out[0] = if t > 2.0 { f64::NAN } else { 1.0 };
                    Ok(())
                },
            ),
            None,
            Box::new(|_t| 0.0),
            Box::new(|_x: &[f64], _mu: &EmpiricalMeasure| 1.0),
            f64::INFINITY,
            1.0,
            None,
        )
        .unwrap();
        let mu = EmpiricalMeasure::dirac(vec![0.0]);
        match numeric_average(&spec, &[0.0], &mu, 0.0, 4.0, 8) {
            Err(Error::Evaluation { t, .. }) => assert!(t > 2.0),
            other => panic!("expected evaluation error, got {other:?}"),
        }
    }

    #[test]
    fn drift_evaluations_ignore_measure_permutation_exactly_on_dyadic_clouds() {
        // Power-of-two particle count and dyadic coordinates keep every
        // weighted sum exact in f64, hence order-free.
        let mut s = Substream::new(41, StreamTag::Probe, 0, 0, 0);
        let pts: Vec<Vec<f64>> = (0..32)
            .map(|_| {
                vec![
                    (s.uniform_in(-512.0, 512.0) * 1024.0).round() / 1024.0,
                    (s.uniform_in(-512.0, 512.0) * 1024.0).round() / 1024.0,
                ]
            })
            .collect();
        let mut permuted = pts.clone();
        permuted.reverse();
        permuted.swap(0, 5);
        let m1 = EmpiricalMeasure::uniform(pts).unwrap();
        let m2 = EmpiricalMeasure::uniform(permuted).unwrap();

        let spec =
            crate::drifts::smooth_baseline_drift(crate::drifts::BaselineKind::MeanReversion, 2)
                .unwrap();
        let x = [0.25, -0.5];
        let mut out1 = [0.0; 2];
        let mut out2 = [0.0; 2];
        spec.eval_fast(0.37, &x, &m1, &mut out1).unwrap();
        spec.eval_fast(0.37, &x, &m2, &mut out2).unwrap();
        assert_eq!(out1, out2);
    }

    #[test]
    fn weight_scaling_then_renormalizing_changes_nothing() {
        let pts = vec![vec![1.0], vec![-2.0], vec![0.5]];
        let w = vec![1.0, 2.0, 5.0];
        let scaled: Vec<f64> = w.iter().map(|x| x * 4.0).collect(); // power of two: exact
        let m1 = EmpiricalMeasure::weighted(pts.clone(), w).unwrap();
        let m2 = EmpiricalMeasure::weighted(pts, scaled).unwrap();
        let spec =
            crate::drifts::smooth_baseline_drift(crate::drifts::BaselineKind::MeanReversion, 1)
                .unwrap();
        let mut o1 = [0.0];
        let mut o2 = [0.0];
        spec.eval_fast(1.0, &[0.3], &m1, &mut o1).unwrap();
        spec.eval_fast(1.0, &[0.3], &m2, &mut o2).unwrap();
        assert_eq!(o1, o2);
    }

    #[test]
    fn localized_norm_of_zero_field_is_zero() {
        let grid = GridSpec::new(vec![-3.0, -3.0], vec![3.0, 3.0], 40).unwrap();
        let v = localized_lp_norm(|_x| 0.0, &grid, 3.0, 1.0, &[vec![0.0, 0.0]]).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn localized_norm_rejects_empty_centers_and_coarse_grids() {
        let grid = GridSpec::new(vec![-1.0], vec![1.0], 8).unwrap();
        assert!(localized_lp_norm(|_x| 1.0, &grid, 2.0, 1.0, &[]).is_err());

        let coarse = GridSpec::new(vec![-4.0], vec![4.0], 8).unwrap(); // step 1 > r/2
        assert!(localized_lp_norm(|_x| 1.0, &coarse, 2.0, 1.0, &[vec![0.0]]).is_err());
    }

    #[test]
    fn default_centers_cover_the_window_on_a_unit_lattice() {
        let grid = GridSpec::new(vec![-2.0, 0.0], vec![2.0, 1.0], 64).unwrap();
        let centers = default_centers(&grid);
        assert_eq!(centers.len(), 5 * 2);
        assert!(centers.contains(&vec![-2.0, 0.0]));
        assert!(centers.contains(&vec![2.0, 1.0]));

        // The translation-invariant field |sin| has the same localized norm
        // seen from any far-enough-interior center; the sup over the default
        // lattice must dominate a single-center evaluation.
        let grid1 = GridSpec::new(vec![-4.0], vec![4.0], 256).unwrap();
        let f = |x: &[f64]| x[0].sin().abs();
        let all = localized_lp_norm(f, &grid1, 2.0, 1.0, &default_centers(&grid1)).unwrap();
        let one = localized_lp_norm(f, &grid1, 2.0, 1.0, &[vec![0.0]]).unwrap();
        assert!(all >= one);
    }

    /// Oracle: for f(x) = |x|^{-1/2} in d = 2 and the center z = 0, switch to
    /// polar coordinates and substitute r = u^2; the p-norm integrand becomes
    /// the smooth profile 4π·χ(u²)^p·u^{3-p}, integrated by Simpson. This path
    /// shares no code with the cartesian midpoint quadrature it checks.
    #[test]
    fn localized_norm_matches_polar_oracle_for_inverse_sqrt_singularity() {
        let p = 3.0;
        // Simpson on [0, sqrt(2)] with the substitution above.
        let oracle_pth_power = {
            let a = 0.0_f64;
            let b = 2.0_f64.sqrt();
            let n = 4000; // even
            let h = (b - a) / n as f64;
            let integrand = |u: f64| {
                let r = u * u;
                4.0 * PI * cutoff_bump(r).powf(p) * u.powf(3.0 - p)
            };
            let mut s = integrand(a) + integrand(b);
            for k in 1..n {
                let w = if k % 2 == 1 { 4.0 } else { 2.0 };
                s += w * integrand(a + k as f64 * h);
            }
            s * h / 3.0
        };
        let oracle = oracle_pth_power.powf(1.0 / p);
        assert!(oracle.is_finite() && oracle > 0.0);

        let grid = GridSpec::new(vec![-2.5, -2.5], vec![2.5, 2.5], 500).unwrap();
        let f = |x: &[f64]| {
            let r = (x[0] * x[0] + x[1] * x[1]).sqrt();
            r.powf(-0.5)
        };
        let centers = vec![vec![0.0, 0.0], vec![1.5, 0.0]];
        let v = localized_lp_norm(f, &grid, p, 1.0, &centers).unwrap();
        assert!(v.is_finite() && v > 0.0);
        // Midpoint quadrature of an integrable singularity converges slowly;
        // 500 cells/axis puts it within a percent of the polar value.
        assert!(
            (v - oracle).abs() / oracle < 0.02,
            "grid {v} vs oracle {oracle}"
        );
    }

    #[test]
    fn localized_norm_holder_monotonicity_across_exponents() {
        // ‖χf‖_{p2} ≤ |B_2|^{1/p2 - 1/p1}·‖χf‖_{p1} for p2 ≤ p1 (Hoelder on
        // the cutoff support).
        let grid = GridSpec::new(vec![-2.5, -2.5], vec![2.5, 2.5], 160).unwrap();
        let f = |x: &[f64]| (x[0] * 1.3).sin() + 0.5 * (x[1] - 0.2).cos();
        let centers = vec![vec![0.0, 0.0], vec![0.5, -0.5]];
        let (p1, p2) = (4.0, 2.0);
        let n1 = localized_lp_norm(f, &grid, p1, 1.0, &centers).unwrap();
        let n2 = localized_lp_norm(f, &grid, p2, 1.0, &centers).unwrap();
        let support_vol = PI * 4.0; // ball of radius 2 in d = 2
        let c = support_vol.powf(1.0 / p2 - 1.0 / p1);
        assert!(n2 <= c * n1 * (1.0 + 1e-12), "{n2} vs {}", c * n1);
    }

    #[test]
    fn ellipticity_probe_accepts_scaled_identity_and_rejects_degenerate() {
        let ok = DiffusionSpec::scaled_identity(2, 0.5).unwrap();
        ok.check_ellipticity(3, 200, 5.0).unwrap();

        let degenerate = DiffusionSpec::new(
            2,
            Box::new(|_x, xi, out| {
                out[0] = xi[0];
                out[1] = 0.0; // rank deficient
            }),
            1.5,
            0.5,
        )
        .unwrap();
        assert!(degenerate.check_ellipticity(3, 200, 5.0).is_err());
    }
}
