//! Synchronously coupled Euler–Maruyama integration of the N-particle
//! approximations of the oscillating system (time scale ε) and the averaged
//! system, sharing initial conditions and Brownian increments, plus the
//! driftless process used by the fluctuation experiments.
//!
//! Determinism contract: every Gaussian increment is drawn from a
//! counter-based substream addressed by (seed, replica, particle, step), so
//! ensembles are byte-identical regardless of how many worker threads run
//! the replicas, and truncating the horizon reproduces the untruncated
//! prefix exactly.

use rayon::prelude::*;

use crate::error::{Error, EvalError, Result};
use crate::model::{DiffusionSpec, EmpiricalMeasure, OscillatingDriftSpec};
use crate::rng::{StreamTag, Substream};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Product-form initial law for ξ (one independent draw per particle).
#[derive(Debug, Clone, PartialEq)]
pub enum InitialSampler {
    /// All particles start at the given point.
    Point(Vec<f64>),
    /// Isotropic Gaussian.
    Gaussian { mean: Vec<f64>, std: f64 },
    /// Uniform on a box.
    UniformBox { lo: Vec<f64>, hi: Vec<f64> },
}

impl InitialSampler {
    fn dim(&self) -> usize {
        match self {
            InitialSampler::Point(x) => x.len(),
            InitialSampler::Gaussian { mean, .. } => mean.len(),
            InitialSampler::UniformBox { lo, .. } => lo.len(),
        }
    }

    fn sample(&self, stream: &mut Substream, out: &mut [f64]) {
        match self {
            InitialSampler::Point(x) => out.copy_from_slice(x),
            InitialSampler::Gaussian { mean, std } => {
                for (j, o) in out.iter_mut().enumerate() {
                    *o = mean[j] + std * stream.normal();
                }
            }
            InitialSampler::UniformBox { lo, hi } => {
                for (j, o) in out.iter_mut().enumerate() {
                    *o = stream.uniform_in(lo[j], hi[j]);
                }
            }
        }
    }
}

/// Ratio dt ≤ ε/OSCILLATION_RESOLUTION enforced for the ε-system: the fast
/// drift varies on scale ε and under-resolving it silently destroys the
/// averaging comparison.
pub const OSCILLATION_RESOLUTION: f64 = 20.0;

#[derive(Debug, Clone)]
pub struct SimConfig {
    /// Horizon T; the grid covers [0, floor(T/dt)·dt].
    pub t_horizon: f64,
    pub dt: f64,
    /// Time scale of the oscillating system (ignored by the averaged one).
    pub epsilon: f64,
    pub n_particles: usize,
    pub n_replicas: usize,
    pub seed: u64,
    pub initial: InitialSampler,
    /// Optional mesh for π_h diagnostics carried in metadata.
    pub proj_mesh: Option<f64>,
    /// Run the equivalent rescaled system dX = εb dt + √ε σ dW and read it
    /// back on the t-grid (thin wrapper over the same stepper).
    pub rescaled: bool,
    /// Override the dt ≤ ε/20 rule; the ensemble metadata then carries a
    /// loud warning flag.
    pub allow_coarse_dt: bool,
}

impl SimConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if !(self.t_horizon > 0.0) {
            return Err(Error::InvalidArgument("horizon must be positive".into()));
        }
        if !(self.dt > 0.0) || self.dt > self.t_horizon {
            return Err(Error::InvalidArgument("dt must lie in (0, T]".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidArgument("epsilon must be positive".into()));
        }
        if self.n_particles == 0 || self.n_replicas == 0 {
            return Err(Error::InvalidArgument(
                "particle and replica counts must be >= 1".into(),
            ));
        }
        if self.initial.dim() != dim {
            return Err(Error::InvalidArgument(format!(
                "initial sampler dimension {} does not match state dimension {dim}",
                self.initial.dim()
            )));
        }
        if let Some(h) = self.proj_mesh {
            if !(h > 0.0) {
                return Err(Error::InvalidArgument("proj_mesh must be positive".into()));
            }
        }
        Ok(())
    }

    /// dt under-resolves the oscillation scale ε.
    pub fn dt_is_coarse(&self) -> bool {
        self.dt > self.epsilon / OSCILLATION_RESOLUTION * (1.0 + 1e-12)
    }

    pub fn n_steps(&self) -> usize {
        (self.t_horizon / self.dt + 1e-9).floor() as usize
    }
}

// ---------------------------------------------------------------------------
// π_h projection
// ---------------------------------------------------------------------------

/// π_h(t) = t on [0, h), k·h on [k·h, (k+1)·h).
pub fn project_time(t: f64, h: f64) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(
            "projection mesh h must be positive".into(),
        ));
    }
    if !(t >= 0.0) {
        return Err(Error::InvalidArgument("time must be nonnegative".into()));
    }
    if t < h {
        Ok(t)
    } else {
        Ok((t / h).floor() * h)
    }
}

// ---------------------------------------------------------------------------
// Replica sinks
// ---------------------------------------------------------------------------

/// Receives the coupled states after the initial sample and after every step;
/// `states_*` are flat `[particle × dim]` slices at one grid time.
pub trait ReplicaSink {
    fn record_initial(&mut self, states_eps: &[f64], states_avg: &[f64]);
    fn record_step(&mut self, step: usize, t_next: f64, states_eps: &[f64], states_avg: &[f64]);
}

/// Materializes full paths (both systems) for one replica.
pub struct PathRecorder {
    dim: usize,
    n_particles: usize,
    n_times: usize,
    k_next: usize,
    /// Flat layout [(particle·n_times + time)·dim + coord].
    pub eps: Vec<f64>,
    pub avg: Vec<f64>,
}

impl PathRecorder {
    fn new(dim: usize, n_particles: usize, n_steps: usize) -> Self {
        let n_times = n_steps + 1;
        PathRecorder {
            dim,
            n_particles,
            n_times,
            k_next: 0,
            eps: vec![0.0; n_particles * n_times * dim],
            avg: vec![0.0; n_particles * n_times * dim],
        }
    }

    fn store(&mut self, k: usize, states_eps: &[f64], states_avg: &[f64]) {
        let d = self.dim;
        for p in 0..self.n_particles {
            let dst = (p * self.n_times + k) * d;
            let src = p * d;
            self.eps[dst..dst + d].copy_from_slice(&states_eps[src..src + d]);
            self.avg[dst..dst + d].copy_from_slice(&states_avg[src..src + d]);
        }
    }
}

impl ReplicaSink for PathRecorder {
    fn record_initial(&mut self, states_eps: &[f64], states_avg: &[f64]) {
        self.store(0, states_eps, states_avg);
        self.k_next = 1;
    }

    fn record_step(&mut self, step: usize, _t_next: f64, states_eps: &[f64], states_avg: &[f64]) {
        debug_assert_eq!(step + 1, self.k_next);
        self.store(step + 1, states_eps, states_avg);
        self.k_next = step + 2;
    }
}

/// Tracks sup over the grid of the coupled gap |X^ε − X| per particle.
pub struct SupGapSink {
    dim: usize,
    pub sup_gap: Vec<f64>,
}

impl SupGapSink {
    pub fn new(dim: usize, n_particles: usize) -> Self {
        SupGapSink {
            dim,
            sup_gap: vec![0.0; n_particles],
        }
    }

    fn update(&mut self, states_eps: &[f64], states_avg: &[f64]) {
        let d = self.dim;
        for (p, sup) in self.sup_gap.iter_mut().enumerate() {
            let mut g2 = 0.0;
            for j in 0..d {
                let diff = states_eps[p * d + j] - states_avg[p * d + j];
                g2 += diff * diff;
            }
            let g = g2.sqrt();
            if g > *sup {
                *sup = g;
            }
        }
    }
}

impl ReplicaSink for SupGapSink {
    fn record_initial(&mut self, states_eps: &[f64], states_avg: &[f64]) {
        self.update(states_eps, states_avg);
    }

    fn record_step(&mut self, _step: usize, _t_next: f64, states_eps: &[f64], states_avg: &[f64]) {
        self.update(states_eps, states_avg);
    }
}

/// Collects the full particle slab of both systems at selected grid indices.
pub struct CheckpointSink {
    /// Sorted grid indices to capture (0 = initial slice).
    pub steps: Vec<usize>,
    /// Per checkpoint: flat [particle × dim] states.
    pub eps: Vec<Vec<f64>>,
    pub avg: Vec<Vec<f64>>,
}

impl CheckpointSink {
    pub fn new(steps: Vec<usize>) -> Self {
        let n = steps.len();
        CheckpointSink {
            steps,
            eps: vec![Vec::new(); n],
            avg: vec![Vec::new(); n],
        }
    }

    fn capture(&mut self, k: usize, states_eps: &[f64], states_avg: &[f64]) {
        for (i, s) in self.steps.iter().enumerate() {
            if *s == k {
                self.eps[i] = states_eps.to_vec();
                self.avg[i] = states_avg.to_vec();
            }
        }
    }
}

impl ReplicaSink for CheckpointSink {
    fn record_initial(&mut self, states_eps: &[f64], states_avg: &[f64]) {
        self.capture(0, states_eps, states_avg);
    }

    fn record_step(&mut self, step: usize, _t_next: f64, states_eps: &[f64], states_avg: &[f64]) {
        self.capture(step + 1, states_eps, states_avg);
    }
}

impl<A: ReplicaSink, B: ReplicaSink> ReplicaSink for (A, B) {
    fn record_initial(&mut self, states_eps: &[f64], states_avg: &[f64]) {
        self.0.record_initial(states_eps, states_avg);
        self.1.record_initial(states_eps, states_avg);
    }

    fn record_step(&mut self, step: usize, t_next: f64, states_eps: &[f64], states_avg: &[f64]) {
        self.0.record_step(step, t_next, states_eps, states_avg);
        self.1.record_step(step, t_next, states_eps, states_avg);
    }
}

// ---------------------------------------------------------------------------
// Coupled engine
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SimMeta {
    pub seed: u64,
    pub epsilon: f64,
    pub dt: f64,
    pub rescaled: bool,
    /// Set when the dt ≤ ε/20 rule was overridden.
    pub warn_coarse_dt: bool,
}

/// Paths of X^ε and X driven by shared Brownian increments on a common grid.
pub struct CoupledEnsemble {
    pub grid: Vec<f64>,
    pub dim: usize,
    pub n_particles: usize,
    pub n_replicas: usize,
    pub meta: SimMeta,
    replicas: Vec<PathRecorder>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum System {
    Oscillating,
    Averaged,
}

impl CoupledEnsemble {
    pub fn n_times(&self) -> usize {
        self.grid.len()
    }

    /// State of one particle at grid index k.
    pub fn state(&self, replica: usize, system: System, particle: usize, k: usize) -> &[f64] {
        let r = &self.replicas[replica];
        let base = (particle * r.n_times + k) * self.dim;
        match system {
            System::Oscillating => &r.eps[base..base + self.dim],
            System::Averaged => &r.avg[base..base + self.dim],
        }
    }

    /// sup over replicas, particles and grid times of |X^ε − X|.
    pub fn max_coupled_gap(&self) -> f64 {
        let mut sup: f64 = 0.0;
        for r in 0..self.n_replicas {
            for p in 0..self.n_particles {
                for k in 0..self.n_times() {
                    let xe = self.state(r, System::Oscillating, p, k);
                    let xa = self.state(r, System::Averaged, p, k);
                    let g = xe
                        .iter()
                        .zip(xa)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt();
                    sup = sup.max(g);
                }
            }
        }
        sup
    }

    /// Binary-free CSV path dump: replica, particle, time, system, x_1..x_d.
    pub fn write_paths_csv<W: std::io::Write>(&self, out: &mut W) -> Result<()> {
        write!(out, "replica,particle,time,system")?;
        for j in 1..=self.dim {
            write!(out, ",x_{j}")?;
        }
        writeln!(out)?;
        for r in 0..self.n_replicas {
            for p in 0..self.n_particles {
                for k in 0..self.n_times() {
                    for (label, system) in [("eps", System::Oscillating), ("avg", System::Averaged)]
                    {
                        write!(
                            out,
                            "{r},{p},{},{label}",
                            crate::harness::format_float(self.grid[k])
                        )?;
                        for v in self.state(r, system, p, k) {
                            write!(out, ",{}", crate::harness::format_float(*v))?;
                        }
                        writeln!(out)?;
                    }
                }
            }
        }
        Ok(())
    }
}

struct StepScales {
    /// Multiplies the drift value (b or εb, times the step).
    drift: f64,
    /// Multiplies σ(x)·z (already includes √step).
    noise: f64,
    /// Maps the grid time to the fast drift argument (t/ε in both modes).
    fast_time: f64,
}

fn scales(cfg: &SimConfig) -> StepScales {
    if cfg.rescaled {
        // dX = εb(τ, X, μ)dτ + √ε σ dW on the τ = t/ε grid with dτ = dt/ε;
        // reading X at τ_k = t_k/ε recovers the oscillating system.
        let dtau = cfg.dt / cfg.epsilon;
        StepScales {
            drift: cfg.epsilon * dtau,
            noise: cfg.epsilon.sqrt() * dtau.sqrt(),
            fast_time: 1.0 / cfg.epsilon,
        }
    } else {
        StepScales {
            drift: cfg.dt,
            noise: cfg.dt.sqrt(),
            fast_time: 1.0 / cfg.epsilon,
        }
    }
}

fn wrap_drift_err(e: EvalError, replica: usize, particle: usize, step: usize) -> Error {
    match e {
        EvalError::Singular => Error::Singular {
            replica,
            particle,
            step,
        },
        EvalError::NonFinite => Error::Divergence {
            replica,
            particle,
            step,
        },
        EvalError::Message(m) => Error::Evaluation {
            t: f64::NAN,
            reason: format!("replica {replica}, particle {particle}, step {step}: {m}"),
        },
    }
}

/// Step one replica of the coupled pair, feeding every grid slice to `sink`.
///
/// `initials` (flat [particle × dim]) and `noise_ids` (one stream id per
/// particle) fix the replica completely given the config.
#[allow(clippy::too_many_arguments)]
fn run_replica<S: ReplicaSink>(
    cfg: &SimConfig,
    drift: &OscillatingDriftSpec,
    diff: &DiffusionSpec,
    replica: usize,
    initials: &[f64],
    noise_ids: &[u64],
    sink: &mut S,
) -> Result<()> {
    let d = drift.dim();
    let n = cfg.n_particles;
    let k_steps = cfg.n_steps();
    let sc = scales(cfg);

    let mut x_eps = initials.to_vec();
    let mut x_avg = initials.to_vec();
    let mut mu_eps = EmpiricalMeasure::from_flat(d, x_eps.clone())?;
    let mut mu_avg = mu_eps.clone();

    sink.record_initial(&x_eps, &x_avg);

    let mut b_eps = vec![0.0; d];
    let mut b_avg = vec![0.0; d];
    let mut z = vec![0.0; d];
    let mut noise = vec![0.0; d];

    for k in 0..k_steps {
        let t = k as f64 * cfg.dt;
        let fast_arg = t * sc.fast_time;
        for p in 0..n {
            let xe = &mut x_eps[p * d..(p + 1) * d];
            drift
                .eval_fast(fast_arg, xe, &mu_eps, &mut b_eps)
                .map_err(|e| wrap_drift_err(e, replica, p, k))?;

            let mut stream = Substream::new(
                cfg.seed,
                StreamTag::Noise,
                replica as u64,
                noise_ids[p],
                k as u64,
            );
            stream.fill_normal(&mut z);

            diff.apply(xe, &z, &mut noise);
            for j in 0..d {
                xe[j] += sc.drift * b_eps[j] + sc.noise * noise[j];
            }

            let xa = &mut x_avg[p * d..(p + 1) * d];
            drift
                .eval_averaged(xa, &mu_avg, &mut b_avg)
                .map_err(|e| match e {
                    Error::Evaluation { reason, .. } => Error::Evaluation {
                        t,
                        reason: format!("replica {replica}, particle {p}, step {k}: {reason}"),
                    },
                    other => other,
                })?;
            diff.apply(xa, &z, &mut noise);
            for j in 0..d {
                xa[j] += cfg.dt * b_avg[j] + cfg.dt.sqrt() * noise[j];
            }

            for j in 0..d {
                if !x_eps[p * d + j].is_finite() || !x_avg[p * d + j].is_finite() {
                    return Err(Error::Divergence {
                        replica,
                        particle: p,
                        step: k,
                    });
                }
            }
        }
        mu_eps.set_flat(&x_eps);
        mu_avg.set_flat(&x_avg);
        sink.record_step(k, (k + 1) as f64 * cfg.dt, &x_eps, &x_avg);
    }
    Ok(())
}

fn sample_initials(cfg: &SimConfig, dim: usize, replica: usize) -> Vec<f64> {
    let mut initials = vec![0.0; cfg.n_particles * dim];
    for p in 0..cfg.n_particles {
        let mut stream = Substream::new(cfg.seed, StreamTag::Initial, replica as u64, p as u64, 0);
        cfg.initial
            .sample(&mut stream, &mut initials[p * dim..(p + 1) * dim]);
    }
    initials
}

fn precheck(cfg: &SimConfig, drift: &OscillatingDriftSpec, diff: &DiffusionSpec) -> Result<()> {
    cfg.validate(drift.dim())?;
    if drift.dim() != diff.dim() {
        return Err(Error::InvalidArgument(
            "drift and diffusion dimensions differ".into(),
        ));
    }
    if !drift.has_averaged_drift() {
        return Err(Error::Config(
            "coupled simulation needs an averaged drift (closed-form or pre-averaged)".into(),
        ));
    }
    if cfg.dt_is_coarse() && !cfg.allow_coarse_dt {
        return Err(Error::Resolution(format!(
            "dt = {} under-resolves epsilon = {} (need dt <= eps/{OSCILLATION_RESOLUTION}); \
             set allow_coarse_dt to override",
            cfg.dt, cfg.epsilon
        )));
    }
    Ok(())
}

/// Run every replica in parallel, handing each a fresh sink from `make_sink`;
/// results come back in replica order regardless of scheduling.
pub fn simulate_coupled_observed<S, F>(
    cfg: &SimConfig,
    drift: &OscillatingDriftSpec,
    diff: &DiffusionSpec,
    make_sink: F,
) -> Result<Vec<S>>
where
    S: ReplicaSink + Send,
    F: Fn(usize) -> S + Sync,
{
    precheck(cfg, drift, diff)?;
    let d = drift.dim();
    let noise_ids: Vec<u64> = (0..cfg.n_particles as u64).collect();
    (0..cfg.n_replicas)
        .into_par_iter()
        .map(|r| {
            let initials = sample_initials(cfg, d, r);
            let mut sink = make_sink(r);
            run_replica(cfg, drift, diff, r, &initials, &noise_ids, &mut sink)?;
            Ok(sink)
        })
        .collect()
}

/// Full-path ensemble of the coupled pair.
pub fn simulate_coupled(
    cfg: &SimConfig,
    drift: &OscillatingDriftSpec,
    diff: &DiffusionSpec,
) -> Result<CoupledEnsemble> {
    let d = drift.dim();
    let k_steps = cfg.n_steps();
    let replicas = simulate_coupled_observed(cfg, drift, diff, |_r| {
        PathRecorder::new(d, cfg.n_particles, k_steps)
    })?;
    Ok(CoupledEnsemble {
        grid: (0..=k_steps).map(|k| k as f64 * cfg.dt).collect(),
        dim: d,
        n_particles: cfg.n_particles,
        n_replicas: cfg.n_replicas,
        meta: SimMeta {
            seed: cfg.seed,
            epsilon: cfg.epsilon,
            dt: cfg.dt,
            rescaled: cfg.rescaled,
            warn_coarse_dt: cfg.dt_is_coarse(),
        },
        replicas,
    })
}

/// Explicit-initial-state entry: `initials` is flat [particle × dim] shared
/// by every replica, `noise_ids` assigns each particle slot its noise
/// substream. Permuting initials together with their noise ids permutes the
/// output paths identically (particle exchangeability).
pub fn simulate_coupled_with_initials(
    cfg: &SimConfig,
    drift: &OscillatingDriftSpec,
    diff: &DiffusionSpec,
    initials: &[f64],
    noise_ids: &[u64],
) -> Result<CoupledEnsemble> {
    precheck(cfg, drift, diff)?;
    let d = drift.dim();
    if initials.len() != cfg.n_particles * d || noise_ids.len() != cfg.n_particles {
        return Err(Error::InvalidArgument(
            "initials/noise_ids shapes must match n_particles".into(),
        ));
    }
    let k_steps = cfg.n_steps();
    let replicas: Vec<PathRecorder> = (0..cfg.n_replicas)
        .into_par_iter()
        .map(|r| {
            let mut sink = PathRecorder::new(d, cfg.n_particles, k_steps);
            run_replica(cfg, drift, diff, r, initials, noise_ids, &mut sink)?;
            Ok(sink)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CoupledEnsemble {
        grid: (0..=k_steps).map(|k| k as f64 * cfg.dt).collect(),
        dim: d,
        n_particles: cfg.n_particles,
        n_replicas: cfg.n_replicas,
        meta: SimMeta {
            seed: cfg.seed,
            epsilon: cfg.epsilon,
            dt: cfg.dt,
            rescaled: cfg.rescaled,
            warn_coarse_dt: cfg.dt_is_coarse(),
        },
        replicas,
    })
}

// ---------------------------------------------------------------------------
// Driftless process
// ---------------------------------------------------------------------------

/// Paths of dZ = σ(Z) dW (single system).
pub struct DriftlessPaths {
    pub grid: Vec<f64>,
    pub dim: usize,
    pub n_particles: usize,
    pub n_replicas: usize,
    /// [replica][(particle·n_times + time)·dim + coord].
    pub paths: Vec<Vec<f64>>,
}

impl DriftlessPaths {
    pub fn state(&self, replica: usize, particle: usize, k: usize) -> &[f64] {
        let n_times = self.grid.len();
        let base = (particle * n_times + k) * self.dim;
        &self.paths[replica][base..base + self.dim]
    }
}

/// Walk one driftless replica, invoking `visit(step k, t_k, states)` on the
/// initial slice (k = 0) and after every step; states are flat
/// [particle × dim]. The ε-resolution rule does not apply (no drift).
pub fn walk_driftless_replica<F>(
    cfg: &SimConfig,
    diff: &DiffusionSpec,
    replica: usize,
    mut visit: F,
) -> Result<()>
where
    F: FnMut(usize, f64, &[f64]),
{
    let d = diff.dim();
    let n = cfg.n_particles;
    let k_steps = cfg.n_steps();
    let sdt = cfg.dt.sqrt();
    let mut x = sample_initials(cfg, d, replica);
    visit(0, 0.0, &x);
    let mut z = vec![0.0; d];
    let mut noise = vec![0.0; d];
    for k in 0..k_steps {
        for p in 0..n {
            let mut stream = Substream::new(
                cfg.seed,
                StreamTag::Noise,
                replica as u64,
                p as u64,
                k as u64,
            );
            stream.fill_normal(&mut z);
            let xp = &mut x[p * d..(p + 1) * d];
            diff.apply(xp, &z, &mut noise);
            for j in 0..d {
                xp[j] += sdt * noise[j];
                if !xp[j].is_finite() {
                    return Err(Error::Divergence {
                        replica,
                        particle: p,
                        step: k,
                    });
                }
            }
        }
        visit(k + 1, (k + 1) as f64 * cfg.dt, &x);
    }
    Ok(())
}

/// Materialized driftless ensemble.
pub fn simulate_driftless(cfg: &SimConfig, diff: &DiffusionSpec) -> Result<DriftlessPaths> {
    cfg.validate(diff.dim())?;
    let d = diff.dim();
    let k_steps = cfg.n_steps();
    let n_times = k_steps + 1;
    let paths: Vec<Vec<f64>> = (0..cfg.n_replicas)
        .into_par_iter()
        .map(|r| {
            let mut flat = vec![0.0; cfg.n_particles * n_times * d];
            walk_driftless_replica(cfg, diff, r, |k, _t, states| {
                for p in 0..cfg.n_particles {
                    let dst = (p * n_times + k) * d;
                    flat[dst..dst + d].copy_from_slice(&states[p * d..(p + 1) * d]);
                }
            })?;
            Ok(flat)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DriftlessPaths {
        grid: (0..=k_steps).map(|k| k as f64 * cfg.dt).collect(),
        dim: d,
        n_particles: cfg.n_particles,
        n_replicas: cfg.n_replicas,
        paths,
    })
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drifts::{smooth_baseline_drift, BaselineKind};
    use crate::model::OscillatingDriftSpec;

    fn measure_free_tanh_drift(dim: usize) -> OscillatingDriftSpec {
        // fast ≡ averaged: the coupling identity workhorse.
        OscillatingDriftSpec::new(
            dim,
            Box::new(|_t, x: &[f64], _mu, out: &mut [f64]| {
                for (o, v) in out.iter_mut().zip(x) {
                    *o = -v.tanh();
                }
                Ok(())
            }),
            Some(Box::new(|x: &[f64], _mu, out: &mut [f64]| {
                for (o, v) in out.iter_mut().zip(x) {
                    *o = -v.tanh();
                }
                Ok(())
            })),
            Box::new(|_t| 0.0),
            Box::new(|_x: &[f64], _mu| 0.0),
            f64::INFINITY,
            1.0,
            None,
        )
        .unwrap()
    }

    fn small_cfg(seed: u64) -> SimConfig {
        SimConfig {
            t_horizon: 0.5,
            dt: 1.0 / 256.0,
            epsilon: 0.25,
            n_particles: 5,
            n_replicas: 3,
            seed,
            initial: InitialSampler::Gaussian {
                mean: vec![0.0, 0.0],
                std: 1.0,
            },
            proj_mesh: None,
            rescaled: false,
            allow_coarse_dt: false,
        }
    }

    #[test]
    fn projection_examples() {
        assert_eq!(project_time(0.05, 0.1).unwrap(), 0.05);
        assert!((project_time(0.35, 0.1).unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(project_time(0.1, 0.1).unwrap(), 0.1);
        assert!(project_time(1.0, 0.0).is_err());
        assert!(project_time(-1.0, 0.1).is_err());
    }

    #[test]
    fn identical_drifts_give_bitwise_identical_paths() {
        let drift = measure_free_tanh_drift(2);
        let diff = DiffusionSpec::scaled_identity(2, 0.7).unwrap();
        let ens = simulate_coupled(&small_cfg(99), &drift, &diff).unwrap();
        assert_eq!(ens.max_coupled_gap(), 0.0);
    }

    #[test]
    fn ensembles_are_seed_deterministic_and_thread_count_independent() {
        let drift = smooth_baseline_drift(BaselineKind::MeanReversion, 2).unwrap();
        let diff = DiffusionSpec::scaled_identity(2, 0.5).unwrap();
        let cfg = small_cfg(7);

        let pool1 = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let pool4 = rayon::ThreadPoolBuilder::new()
            .num_threads(4)
            .build()
            .unwrap();
        let e1 = pool1
            .install(|| simulate_coupled(&cfg, &drift, &diff))
            .unwrap();
        let e4 = pool4
            .install(|| simulate_coupled(&cfg, &drift, &diff))
            .unwrap();
        for r in 0..cfg.n_replicas {
            assert_eq!(e1.replicas[r].eps, e4.replicas[r].eps);
            assert_eq!(e1.replicas[r].avg, e4.replicas[r].avg);
        }
    }

    #[test]
    fn truncating_the_horizon_reproduces_the_prefix() {
        let drift = smooth_baseline_drift(BaselineKind::MeanReversion, 2).unwrap();
        let diff = DiffusionSpec::scaled_identity(2, 0.5).unwrap();
        let cfg = small_cfg(41);
        let mut short = cfg.clone();
        short.t_horizon = 0.25;

        let full = simulate_coupled(&cfg, &drift, &diff).unwrap();
        let pre = simulate_coupled(&short, &drift, &diff).unwrap();
        for r in 0..cfg.n_replicas {
            for p in 0..cfg.n_particles {
                for k in 0..pre.n_times() {
                    assert_eq!(
                        full.state(r, System::Oscillating, p, k),
                        pre.state(r, System::Oscillating, p, k)
                    );
                    assert_eq!(
                        full.state(r, System::Averaged, p, k),
                        pre.state(r, System::Averaged, p, k)
                    );
                }
            }
        }
    }

    #[test]
    fn permuting_initials_with_their_noise_ids_permutes_paths() {
        // Measure-free drift: exchangeability holds bitwise. (For
        // measure-coupled drifts the empirical-mean summation order changes
        // under permutation, so equality is only up to rounding; see below.)
        let drift = smooth_baseline_drift(BaselineKind::SineModulated, 1).unwrap();
        let diff = DiffusionSpec::scaled_identity(1, 0.5).unwrap();
        let mut cfg = small_cfg(13);
        cfg.initial = InitialSampler::Point(vec![0.0]);
        cfg.n_particles = 4;
        let initials = vec![0.1, -0.4, 0.9, 0.3];
        let ids: Vec<u64> = vec![0, 1, 2, 3];
        let perm = [2usize, 0, 3, 1];
        let p_initials: Vec<f64> = perm.iter().map(|&i| initials[i]).collect();
        let p_ids: Vec<u64> = perm.iter().map(|&i| ids[i]).collect();

        let base = simulate_coupled_with_initials(&cfg, &drift, &diff, &initials, &ids).unwrap();
        let permuted =
            simulate_coupled_with_initials(&cfg, &drift, &diff, &p_initials, &p_ids).unwrap();
        for r in 0..cfg.n_replicas {
            for (slot, &orig) in perm.iter().enumerate() {
                for k in 0..base.n_times() {
                    assert_eq!(
                        permuted.state(r, System::Oscillating, slot, k),
                        base.state(r, System::Oscillating, orig, k)
                    );
                    assert_eq!(
                        permuted.state(r, System::Averaged, slot, k),
                        base.state(r, System::Averaged, orig, k)
                    );
                }
            }
        }
    }

    #[test]
    fn exchangeability_holds_to_rounding_for_measure_coupled_drifts() {
        let drift = smooth_baseline_drift(BaselineKind::MeanReversion, 1).unwrap();
        let diff = DiffusionSpec::scaled_identity(1, 0.5).unwrap();
        let mut cfg = small_cfg(13);
        cfg.initial = InitialSampler::Point(vec![0.0]);
        cfg.n_particles = 4;
        cfg.n_replicas = 1;
        let initials = vec![0.1, -0.4, 0.9, 0.3];
        let ids: Vec<u64> = vec![0, 1, 2, 3];
        let perm = [2usize, 0, 3, 1];
        let p_initials: Vec<f64> = perm.iter().map(|&i| initials[i]).collect();
        let p_ids: Vec<u64> = perm.iter().map(|&i| ids[i]).collect();

        let base = simulate_coupled_with_initials(&cfg, &drift, &diff, &initials, &ids).unwrap();
        let permuted =
            simulate_coupled_with_initials(&cfg, &drift, &diff, &p_initials, &p_ids).unwrap();
        for (slot, &orig) in perm.iter().enumerate() {
            for k in 0..base.n_times() {
                let a = permuted.state(0, System::Oscillating, slot, k)[0];
                let b = base.state(0, System::Oscillating, orig, k)[0];
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn coarse_dt_is_rejected_unless_overridden() {
        let drift = smooth_baseline_drift(BaselineKind::MeanReversion, 2).unwrap();
        let diff = DiffusionSpec::scaled_identity(2, 0.5).unwrap();
        let mut cfg = small_cfg(1);
        cfg.epsilon = 0.01; // dt = 1/256 > eps/20
        assert!(matches!(
            simulate_coupled(&cfg, &drift, &diff),
            Err(Error::Resolution(_))
        ));
        cfg.allow_coarse_dt = true;
        let ens = simulate_coupled(&cfg, &drift, &diff).unwrap();
        assert!(ens.meta.warn_coarse_dt);
    }

    /// RK4 oracle at dt/100 for the σ = 0 scalar case: the oscillating
    /// system solves x' = sin(t/ε)·tanh(x), the averaged one x' = 0, so the
    /// coupled sup-gap must match the ODE gap within O(dt).
    ///
    /// (With mean-reversion and a single particle both drifts vanish
    /// identically — that degenerate case is pinned separately below.)
    #[test]
    fn coupled_gap_matches_rk4_ode_oracle_when_noise_is_off() {
        let eps = 0.25;
        let dt = 1.0 / 512.0;
        let t_end = 1.0;
        let x0 = 0.8_f64;

        let drift = smooth_baseline_drift(BaselineKind::SineModulated, 1).unwrap();
        // σ ≡ 0: the ellipticity constant is nominal and never probed here.
        let diff = DiffusionSpec::new(1, Box::new(|_x, _xi, out| out[0] = 0.0), 2.0, 0.5).unwrap();

        let cfg = SimConfig {
            t_horizon: t_end,
            dt,
            epsilon: eps,
            n_particles: 1,
            n_replicas: 1,
            seed: 3,
            initial: InitialSampler::Point(vec![x0]),
            proj_mesh: None,
            rescaled: false,
            allow_coarse_dt: false,
        };
        let ens = simulate_coupled(&cfg, &drift, &diff).unwrap();
        let sim_gap = ens.max_coupled_gap();

        // Independent RK4 on x' = sin(t/ε) tanh(x) at dt/100.
        let f = |t: f64, x: f64| (t / eps).sin() * x.tanh();
        let h = dt / 100.0;
        let steps = (t_end / h).round() as usize;
        let mut x = x0;
        let mut oracle_gap = 0.0_f64;
        for k in 0..steps {
            let t = k as f64 * h;
            let k1 = f(t, x);
            let k2 = f(t + 0.5 * h, x + 0.5 * h * k1);
            let k3 = f(t + 0.5 * h, x + 0.5 * h * k2);
            let k4 = f(t + h, x + h * k3);
            x += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            oracle_gap = oracle_gap.max((x - x0).abs()); // averaged path stays at x0
        }
        assert!(
            (sim_gap - oracle_gap).abs() <= 10.0 * dt,
            "sim {sim_gap} vs oracle {oracle_gap} (dt = {dt})"
        );
    }

    #[test]
    fn mean_reversion_single_particle_is_exactly_flat_without_noise() {
        let drift = smooth_baseline_drift(BaselineKind::MeanReversion, 1).unwrap();
        let diff = DiffusionSpec::new(1, Box::new(|_x, _xi, out| out[0] = 0.0), 2.0, 0.5).unwrap();
        let cfg = SimConfig {
            t_horizon: 0.5,
            dt: 1.0 / 128.0,
            epsilon: 0.25,
            n_particles: 1,
            n_replicas: 1,
            seed: 9,
            initial: InitialSampler::Point(vec![0.37]),
            proj_mesh: None,
            rescaled: false,
            allow_coarse_dt: false,
        };
        let ens = simulate_coupled(&cfg, &drift, &diff).unwrap();
        assert_eq!(ens.max_coupled_gap(), 0.0);
        assert_eq!(
            ens.state(0, System::Oscillating, 0, ens.n_times() - 1),
            &[0.37]
        );
    }

    #[test]
    fn coupled_gap_grows_toward_order_one_as_epsilon_grows() {
        // Fixed seed Monte Carlo trend: larger ε leaves the oscillation
        // unaveraged, so the coupled gap increases monotonically over an
        // ε-grid.
        let drift = smooth_baseline_drift(BaselineKind::SineModulated, 1).unwrap();
        let diff = DiffusionSpec::scaled_identity(1, 0.3).unwrap();
        let mut gaps = Vec::new();
        // Keep eps below the horizon: beyond that the oscillation never
        // completes a period and the trend inverts.
        for eps in [0.0625, 0.25, 1.0] {
            let cfg = SimConfig {
                t_horizon: 2.0,
                dt: eps / 40.0,
                epsilon: eps,
                n_particles: 16,
                n_replicas: 4,
                seed: 11,
                initial: InitialSampler::Gaussian {
                    mean: vec![0.5],
                    std: 0.5,
                },
                proj_mesh: None,
                rescaled: false,
                allow_coarse_dt: false,
            };
            let ens = simulate_coupled(&cfg, &drift, &diff).unwrap();
            let summary = crate::metrics::strong_error(&ens, 0.5).unwrap();
            gaps.push(summary.estimate);
        }
        for w in gaps.windows(2) {
            assert!(w[1] > w[0], "gap trend not monotone: {gaps:?}");
        }
    }

    #[test]
    fn driftless_identity_terminal_variance_matches_brownian_motion() {
        for (scale, want) in [(1.0, 1.0), (2.0, 4.0)] {
            let diff = DiffusionSpec::scaled_identity(1, scale).unwrap();
            let cfg = SimConfig {
                t_horizon: 1.0,
                dt: 1.0 / 64.0,
                epsilon: 1.0,
                n_particles: 64,
                n_replicas: 64,
                seed: 21,
                initial: InitialSampler::Point(vec![0.0]),
                proj_mesh: None,
                rescaled: false,
                allow_coarse_dt: false,
            };
            let paths = simulate_driftless(&cfg, &diff).unwrap();
            let k_last = paths.grid.len() - 1;
            let mut sum = 0.0;
            let mut sumsq = 0.0;
            let m = cfg.n_particles * cfg.n_replicas;
            for r in 0..cfg.n_replicas {
                for p in 0..cfg.n_particles {
                    let v = paths.state(r, p, k_last)[0];
                    sum += v;
                    sumsq += v * v;
                }
            }
            let mean = sum / m as f64;
            let var = sumsq / m as f64 - mean * mean;
            // Var of the sample variance of N(0, want): ~ want²·2/m.
            let se = want * (2.0 / m as f64).sqrt();
            assert!(
                (var - want).abs() < 3.0 * se,
                "terminal variance {var} vs {want} (scale {scale})"
            );
        }
    }

    #[test]
    fn driftless_paths_reproduce_under_fixed_seed() {
        let diff = DiffusionSpec::identity(2).unwrap();
        let cfg = SimConfig {
            t_horizon: 0.25,
            dt: 1.0 / 32.0,
            epsilon: 1.0,
            n_particles: 3,
            n_replicas: 2,
            seed: 5,
            initial: InitialSampler::Point(vec![0.0, 0.0]),
            proj_mesh: None,
            rescaled: false,
            allow_coarse_dt: false,
        };
        let a = simulate_driftless(&cfg, &diff).unwrap();
        let b = simulate_driftless(&cfg, &diff).unwrap();
        assert_eq!(a.paths, b.paths);
    }

    #[test]
    fn rescaled_wrapper_reproduces_the_direct_formulation() {
        let drift = smooth_baseline_drift(BaselineKind::MeanReversion, 1).unwrap();
        let diff = DiffusionSpec::scaled_identity(1, 0.5).unwrap();
        let mut cfg = small_cfg(17);
        cfg.initial = InitialSampler::Gaussian {
            mean: vec![0.2],
            std: 1.0,
        };
        let direct = simulate_coupled(&cfg, &drift, &diff).unwrap();
        cfg.rescaled = true;
        let rescaled = simulate_coupled(&cfg, &drift, &diff).unwrap();
        // Same substreams, algebraically identical update up to rounding.
        let mut max_diff = 0.0_f64;
        for r in 0..cfg.n_replicas {
            for p in 0..cfg.n_particles {
                for k in 0..direct.n_times() {
                    let a = direct.state(r, System::Oscillating, p, k)[0];
                    let b = rescaled.state(r, System::Oscillating, p, k)[0];
                    max_diff = max_diff.max((a - b).abs());
                }
            }
        }
        assert!(max_diff < 1e-10, "rescaled deviates by {max_diff}");
    }
}
