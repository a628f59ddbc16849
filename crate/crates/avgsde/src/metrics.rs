//! Error functionals and estimators: strong path error of the coupled pair,
//! histogram total-variation distance between empirical laws, test-function
//! lower bounds on total variation, and the π_h fluctuation functional of
//! the driftless process.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::DiffusionSpec;
use crate::simulator::{walk_driftless_replica, CoupledEnsemble, SimConfig, System};

// ---------------------------------------------------------------------------
// Replica summaries
// ---------------------------------------------------------------------------

/// A Monte Carlo estimate with its standard error over replicas.
#[derive(Debug, Clone)]
pub struct ErrorSummary {
    pub estimate: f64,
    pub std_error: f64,
    pub n_replicas: usize,
    /// Human-readable parameters (ℓ or bin/mesh settings, grid spec).
    pub meta: String,
}

impl ErrorSummary {
    fn from_replica_means(per_replica: &[f64], meta: String) -> Result<Self> {
        if per_replica.is_empty() {
            return Err(Error::InvalidArgument("no replicas to summarize".into()));
        }
        let n = per_replica.len();
        let mean = per_replica.iter().sum::<f64>() / n as f64;
        let std_error = if n > 1 {
            let var = per_replica
                .iter()
                .map(|v| (v - mean) * (v - mean))
                .sum::<f64>()
                / (n as f64 - 1.0);
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        if !mean.is_finite() {
            return Err(Error::InvalidArgument(
                "replica means are non-finite".into(),
            ));
        }
        Ok(ErrorSummary {
            estimate: mean,
            std_error,
            n_replicas: n,
            meta,
        })
    }
}

/// E[ sup_{grid} |X^ε − X|^{2ℓ} ]: per replica the particle average of the
/// sup-gap to the 2ℓ, then mean ± standard error over replicas.
pub fn strong_error(ens: &CoupledEnsemble, ell: f64) -> Result<ErrorSummary> {
    if ens.n_replicas == 0 || ens.n_particles == 0 {
        return Err(Error::InvalidArgument("empty ensemble".into()));
    }
    validate_ell(ell)?;
    let mut sups = Vec::with_capacity(ens.n_replicas);
    for r in 0..ens.n_replicas {
        let mut per_particle = Vec::with_capacity(ens.n_particles);
        for p in 0..ens.n_particles {
            let mut sup = 0.0_f64;
            for k in 0..ens.n_times() {
                let xe = ens.state(r, System::Oscillating, p, k);
                let xa = ens.state(r, System::Averaged, p, k);
                let g = xe
                    .iter()
                    .zip(xa)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                sup = sup.max(g);
            }
            per_particle.push(sup);
        }
        sups.push(per_particle);
    }
    strong_error_from_sups(&sups, ell)
}

pub(crate) fn validate_ell(ell: f64) -> Result<()> {
    if !(ell > 0.0 && ell < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "moment exponent ell must lie in (0,1), got {ell}"
        )));
    }
    Ok(())
}

/// Same statistic from streamed per-replica, per-particle sup gaps.
pub fn strong_error_from_sups(sup_gaps: &[Vec<f64>], ell: f64) -> Result<ErrorSummary> {
    validate_ell(ell)?;
    if sup_gaps.is_empty() || sup_gaps.iter().any(|r| r.is_empty()) {
        return Err(Error::InvalidArgument("empty ensemble".into()));
    }
    let per_replica: Vec<f64> = sup_gaps
        .iter()
        .map(|particles| {
            particles.iter().map(|s| s.powf(2.0 * ell)).sum::<f64>() / particles.len() as f64
        })
        .collect();
    ErrorSummary::from_replica_means(
        &per_replica,
        format!("ell={ell}, n_particles={}", sup_gaps[0].len()),
    )
}

// ---------------------------------------------------------------------------
// Histogram total variation
// ---------------------------------------------------------------------------

pub const TV_HISTOGRAM_MAX_DIM: usize = 3;

/// A bounded test function |φ| ≤ 1 evaluated on flat state slices.
pub type TestFunction = Box<dyn Fn(&[f64]) -> f64 + Sync>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BinWidth {
    Fixed(f64),
    /// Freedman–Diaconis on the pooled sample (per axis, max across axes).
    Auto,
}

#[derive(Debug, Clone)]
pub struct TvEstimate {
    /// (1/2)·Σ_bins |p̂_a − p̂_b| ∈ [0, 1].
    pub tv: f64,
    pub bin_width: f64,
    pub occupied_bins: usize,
    pub n_a: usize,
    pub n_b: usize,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

fn freedman_diaconis(dim: usize, a: &[f64], b: &[f64]) -> f64 {
    let n = (a.len() + b.len()) / dim;
    let mut best = 0.0_f64;
    for j in 0..dim {
        let mut coords: Vec<f64> = a
            .iter()
            .skip(j)
            .step_by(dim)
            .chain(b.iter().skip(j).step_by(dim))
            .copied()
            .collect();
        coords.sort_by(|x, y| x.partial_cmp(y).expect("non-finite sample"));
        let iqr = percentile(&coords, 0.75) - percentile(&coords, 0.25);
        let w = if iqr > 0.0 {
            2.0 * iqr * (n as f64).powf(-1.0 / 3.0)
        } else {
            // Degenerate spread: fall back to range/√n, then to unit bins.
            let range = coords[coords.len() - 1] - coords[0];
            if range > 0.0 {
                range / (n as f64).sqrt()
            } else {
                1.0
            }
        };
        best = best.max(w);
    }
    best
}

/// Histogram TV on a common lattice anchored at the origin: equals
/// sup_A |μ̂(A) − ν̂(A)| over unions of lattice bins. Supports d ≤ 3; higher
/// dimensions go through [`tv_lower_bound`].
pub fn tv_histogram_detailed(
    dim: usize,
    samples_a: &[f64],
    samples_b: &[f64],
    bin: BinWidth,
) -> Result<TvEstimate> {
    if dim == 0 || dim > TV_HISTOGRAM_MAX_DIM {
        return Err(Error::UnsupportedDimension(format!(
            "histogram TV supports 1 <= d <= {TV_HISTOGRAM_MAX_DIM}, got {dim}; \
             use tv_lower_bound with a test-function family instead"
        )));
    }
    if samples_a.is_empty() || samples_b.is_empty() {
        return Err(Error::InvalidArgument(
            "both sample sets must be nonempty".into(),
        ));
    }
    if !samples_a.len().is_multiple_of(dim) || !samples_b.len().is_multiple_of(dim) {
        return Err(Error::InvalidArgument(
            "flat samples must be a multiple of dim".into(),
        ));
    }
    if samples_a.iter().chain(samples_b).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("samples must be finite".into()));
    }
    let width = match bin {
        BinWidth::Fixed(w) if w > 0.0 => w,
        BinWidth::Fixed(w) => {
            return Err(Error::InvalidArgument(format!(
                "bin width must be positive, got {w}"
            )))
        }
        BinWidth::Auto => freedman_diaconis(dim, samples_a, samples_b),
    };

    let n_a = samples_a.len() / dim;
    let n_b = samples_b.len() / dim;
    let key = |x: &[f64]| -> [i64; TV_HISTOGRAM_MAX_DIM] {
        let mut k = [0i64; TV_HISTOGRAM_MAX_DIM];
        for j in 0..dim {
            k[j] = (x[j] / width).floor() as i64;
        }
        k
    };
    let mut bins: HashMap<[i64; TV_HISTOGRAM_MAX_DIM], (u64, u64)> = HashMap::new();
    for x in samples_a.chunks_exact(dim) {
        bins.entry(key(x)).or_insert((0, 0)).0 += 1;
    }
    for x in samples_b.chunks_exact(dim) {
        bins.entry(key(x)).or_insert((0, 0)).1 += 1;
    }
    // Sorted iteration fixes the float summation order.
    let mut entries: Vec<_> = bins.into_iter().collect();
    entries.sort_by_key(|(k, _)| *k);
    let mut l1 = 0.0;
    for (_k, (ca, cb)) in &entries {
        let pa = *ca as f64 / n_a as f64;
        let pb = *cb as f64 / n_b as f64;
        l1 += (pa - pb).abs();
    }
    Ok(TvEstimate {
        tv: 0.5 * l1,
        bin_width: width,
        occupied_bins: entries.len(),
        n_a,
        n_b,
    })
}

/// Scalar front end of [`tv_histogram_detailed`].
pub fn tv_histogram(
    dim: usize,
    samples_a: &[f64],
    samples_b: &[f64],
    bin: BinWidth,
) -> Result<f64> {
    Ok(tv_histogram_detailed(dim, samples_a, samples_b, bin)?.tv)
}

/// Statistical noise scale of the histogram TV at this sample size: the
/// split-half self-distance of each sample against itself (same lattice),
/// scaled by 1/√2 to account for the halved sample size.
pub fn tv_split_noise(dim: usize, samples: &[f64], width: f64) -> Result<f64> {
    let n = samples.len() / dim;
    if n < 2 {
        return Err(Error::InvalidArgument(
            "need at least 2 samples to split".into(),
        ));
    }
    let half = (n / 2) * dim;
    let est = tv_histogram_detailed(
        dim,
        &samples[..half],
        &samples[half..],
        BinWidth::Fixed(width),
    )?;
    Ok(est.tv / std::f64::consts::SQRT_2)
}

/// (1/2)·max over the family of |mean_a φ − mean_b φ|: a certified lower
/// bound on the total variation for any family with ‖φ‖_∞ ≤ 1.
pub fn tv_lower_bound(
    dim: usize,
    samples_a: &[f64],
    samples_b: &[f64],
    family: &[TestFunction],
) -> Result<f64> {
    if family.is_empty() {
        return Err(Error::InvalidArgument(
            "test-function family must be nonempty".into(),
        ));
    }
    if samples_a.is_empty() || samples_b.is_empty() {
        return Err(Error::InvalidArgument(
            "both sample sets must be nonempty".into(),
        ));
    }
    let n_a = (samples_a.len() / dim) as f64;
    let n_b = (samples_b.len() / dim) as f64;
    let mut best = 0.0_f64;
    for (i, phi) in family.iter().enumerate() {
        let mut sum_a = 0.0;
        for x in samples_a.chunks_exact(dim) {
            let v = phi(x);
            if v.abs() > 1.0 + 1e-12 {
                return Err(Error::InvalidArgument(format!(
                    "test function {i} exceeds sup-norm 1 on the samples: |{v}|"
                )));
            }
            sum_a += v;
        }
        let mut sum_b = 0.0;
        for x in samples_b.chunks_exact(dim) {
            let v = phi(x);
            if v.abs() > 1.0 + 1e-12 {
                return Err(Error::InvalidArgument(format!(
                    "test function {i} exceeds sup-norm 1 on the samples: |{v}|"
                )));
            }
            sum_b += v;
        }
        best = best.max(0.5 * (sum_a / n_a - sum_b / n_b).abs());
    }
    Ok(best)
}

/// The default sign/tanh family used by weak studies in d = 1: tanh(k(x−c))
/// over a (k, c) grid.
pub fn tanh_test_family(centers: &[f64], slopes: &[f64]) -> Vec<TestFunction> {
    let mut family: Vec<TestFunction> = Vec::new();
    for &c in centers {
        for &k in slopes {
            family.push(Box::new(move |x: &[f64]| (k * (x[0] - c)).tanh()));
        }
    }
    family
}

// ---------------------------------------------------------------------------
// Fluctuation functional
// ---------------------------------------------------------------------------

/// Monte Carlo estimate of E| ∫_0^T ( f(Z_t) − f(Z_{π_h(t)}) ) dt |² with Z
/// the driftless process, left-endpoint Riemann sums on the dt grid.
///
/// Requires dt ≤ h/10 and h an integer multiple of dt (so the projected
/// state sits on the simulation grid).
pub fn fluctuation_functional(
    diff: &DiffusionSpec,
    f: &(dyn Fn(&[f64]) -> f64 + Sync),
    h: f64,
    cfg: &SimConfig,
) -> Result<ErrorSummary> {
    if !(h > 0.0 && h < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "mesh h must lie in (0,1), got {h}"
        )));
    }
    if cfg.dt > h / 10.0 * (1.0 + 1e-12) {
        return Err(Error::Resolution(format!(
            "fluctuation functional needs dt <= h/10 (dt = {}, h = {h})",
            cfg.dt
        )));
    }
    let stride_f = h / cfg.dt;
    let stride = stride_f.round() as usize;
    if (stride_f - stride as f64).abs() > 1e-9 {
        return Err(Error::Resolution(format!(
            "mesh h = {h} must be an integer multiple of dt = {}",
            cfg.dt
        )));
    }
    cfg.validate(diff.dim())?;

    let d = diff.dim();
    let n = cfg.n_particles;
    let k_steps = cfg.n_steps();
    let per_replica: Vec<f64> = (0..cfg.n_replicas)
        .into_par_iter()
        .map(|r| {
            let mut integral = vec![0.0_f64; n];
            let mut fproj = vec![0.0_f64; n];
            walk_driftless_replica(cfg, diff, r, |k, _t, states| {
                if k == k_steps {
                    return; // left endpoints only
                }
                if k % stride == 0 {
                    // t_k is a mesh point: π_h(t) = t on [0,h) and at the
                    // block starts, where the integrand vanishes; cache
                    // f(Z) at the block start for the steps inside.
                    for p in 0..n {
                        fproj[p] = f(&states[p * d..(p + 1) * d]);
                    }
                } else if k > stride {
                    // strictly inside a block past the first (π_h = id there)
                    for p in 0..n {
                        let fv = f(&states[p * d..(p + 1) * d]);
                        integral[p] += (fv - fproj[p]) * cfg.dt;
                    }
                }
                // 0 < k < stride: π_h(t_k) = t_k, integrand 0.
            })?;
            Ok(integral.iter().map(|v| v * v).sum::<f64>() / n as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    ErrorSummary::from_replica_means(
        &per_replica,
        format!("h={h}, dt={}, T={}, n_particles={n}", cfg.dt, cfg.t_horizon),
    )
}

// ---------------------------------------------------------------------------
