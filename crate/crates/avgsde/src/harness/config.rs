//! Flat-key experiment configuration: `section.key = value` lines, `#`
//! comments. Unknown keys are hard errors (no silent defaults), missing
//! required keys are errors naming the key.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::drifts::{
    oscillatory_interaction_drift, power_kernel_drift, smooth_baseline_drift, BaselineKind, NuAtom,
    OscillatoryInteractionParams, PowerKernelParams,
};
use crate::error::{Error, Result};
use crate::metrics::BinWidth;
use crate::model::OscillatingDriftSpec;
use crate::rates::OmegaMode;
use crate::simulator::InitialSampler;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    StrongStudy,
    WeakStudy,
    KbmCheck,
    FluctCheck,
    RatesTable,
    Simulate,
}

impl ExperimentKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ExperimentKind::StrongStudy => "strong_study",
            ExperimentKind::WeakStudy => "weak_study",
            ExperimentKind::KbmCheck => "kbm_check",
            ExperimentKind::FluctCheck => "fluct_check",
            ExperimentKind::RatesTable => "rates_table",
            ExperimentKind::Simulate => "simulate",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "strong_study" => ExperimentKind::StrongStudy,
            "weak_study" => ExperimentKind::WeakStudy,
            "kbm_check" => ExperimentKind::KbmCheck,
            "fluct_check" => ExperimentKind::FluctCheck,
            "rates_table" => ExperimentKind::RatesTable,
            "simulate" => ExperimentKind::Simulate,
            other => return Err(Error::Config(format!("unknown experiment.kind '{other}'"))),
        })
    }
}

/// Which fluctuation test function a fluct_check drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FluctFunction {
    Indicator,
    Tanh,
    Const,
}

/// Drift selection plus its rate-calculation template.
#[derive(Debug, Clone)]
pub enum DriftConfig {
    MeanReversion,
    SineModulated,
    PowerKernel(PowerKernelParams),
    OscillatoryInteraction {
        f_kind: OscillatoryFKind,
        nu_atoms: Vec<NuAtom>,
        l_f: f64,
    },
}

/// Built-in interaction functions for config-driven oscillatory drifts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OscillatoryFKind {
    /// F(u, v) = u·e_1.
    Linear,
    /// F(u, v) = u²·e_1.
    Quadratic,
    /// F(u, v) = (u + tanh v)/2·e_1.
    TanhMix,
}

impl DriftConfig {
    pub fn name(&self) -> &'static str {
        match self {
            DriftConfig::MeanReversion => "mean_reversion",
            DriftConfig::SineModulated => "sine_modulated",
            DriftConfig::PowerKernel(_) => "power_kernel",
            DriftConfig::OscillatoryInteraction { .. } => "oscillatory_interaction",
        }
    }

    pub fn build(&self, dim: usize) -> Result<OscillatingDriftSpec> {
        match self {
            DriftConfig::MeanReversion => smooth_baseline_drift(BaselineKind::MeanReversion, dim),
            DriftConfig::SineModulated => smooth_baseline_drift(BaselineKind::SineModulated, dim),
            DriftConfig::PowerKernel(p) => power_kernel_drift(*p, dim),
            DriftConfig::OscillatoryInteraction {
                f_kind,
                nu_atoms,
                l_f,
            } => {
                let interaction: Arc<crate::drifts::InteractionFn> = match f_kind {
                    OscillatoryFKind::Linear => Arc::new(|u: f64, _v: &[f64], out: &mut [f64]| {
                        out.iter_mut().for_each(|o| *o = 0.0);
                        out[0] = u;
                    }),
                    OscillatoryFKind::Quadratic => {
                        Arc::new(|u: f64, _v: &[f64], out: &mut [f64]| {
                            out.iter_mut().for_each(|o| *o = 0.0);
                            out[0] = u * u;
                        })
                    }
                    OscillatoryFKind::TanhMix => Arc::new(|u: f64, v: &[f64], out: &mut [f64]| {
                        out.iter_mut().for_each(|o| *o = 0.0);
                        out[0] = 0.5 * (u + v[0].tanh());
                    }),
                };
                oscillatory_interaction_drift(
                    OscillatoryInteractionParams {
                        interaction,
                        pair_kernel: Arc::new(|x: &[f64], y: &[f64], out: &mut [f64]| {
                            out[0] = (x[0] - y[0]).tanh();
                        }),
                        m: 1,
                        nu_atoms: nu_atoms.clone(),
                        l_f: *l_f,
                    },
                    dim,
                )
            }
        }
    }

    /// Modulus shape and integrability exponent feeding rate predictions.
    pub fn rate_template(&self, dim: usize) -> (OmegaMode, f64) {
        match self {
            DriftConfig::MeanReversion | DriftConfig::SineModulated => {
                (OmegaMode::PowerLaw(1.0), f64::INFINITY)
            }
            DriftConfig::PowerKernel(p) => {
                let mode = if (p.alpha1 - 1.0).abs() < 1e-12 {
                    OmegaMode::LogOverT
                } else {
                    OmegaMode::PowerLaw(p.alpha1.min(1.0))
                };
                (mode, crate::rates::power_kernel_supremal_p0(dim, p.alpha2))
            }
            DriftConfig::OscillatoryInteraction { .. } => (OmegaMode::PowerLaw(1.0), f64::INFINITY),
        }
    }

    pub fn truncation_delta(&self) -> f64 {
        match self {
            DriftConfig::PowerKernel(p) => p.truncation_delta,
            _ => 0.0,
        }
    }
}

/// Parsed experiment description (config echo retained verbatim for reports).
#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub raw: String,
    pub kind: ExperimentKind,
    pub seed: u64,
    pub output_dir: String,
    pub eps_grid: Vec<f64>,
    pub checkpoints: Option<Vec<f64>>,
    pub drift: Option<DriftConfig>,
    pub dim: usize,
    pub diffusion_scale: f64,
    pub t_horizon: f64,
    pub dt_fixed: Option<f64>,
    pub dt_over_eps: Option<f64>,
    pub n_particles: usize,
    pub n_replicas: usize,
    pub epsilon: Option<f64>,
    pub initial: InitialSampler,
    pub rescaled: bool,
    pub allow_coarse_dt: bool,
    pub proj_mesh: Option<f64>,
    pub ell: f64,
    pub bin_width: BinWidth,
    pub tv_family: bool,
    pub slope_band: f64,
    pub kbm_n_trials: usize,
    pub kbm_t_values: Vec<f64>,
    pub kbm_tol: f64,
    pub kbm_n_mu_particles: usize,
    pub kbm_x_half_width: f64,
    pub kbm_t0_max: f64,
    pub kbm_quad_n: usize,
    pub kbm_n_random_f: usize,
    pub fluct_h_grid: Vec<f64>,
    pub fluct_dt_over_h: f64,
    pub fluct_f: FluctFunction,
    pub fluct_slope_lo: f64,
    pub fluct_slope_hi: f64,
    pub fluct_replicas: usize,
    pub rates_omega: OmegaMode,
    pub rates_d: usize,
    pub rates_p0: f64,
    pub rates_ell: f64,
    pub rates_delta: f64,
    pub rates_eps_list: Vec<f64>,
    pub rates_alpha2: Option<f64>,
}

const KNOWN_KEYS: &[&str] = &[
    "experiment.kind",
    "experiment.seed",
    "experiment.output_dir",
    "experiment.eps_grid",
    "experiment.checkpoints",
    "drift.name",
    "drift.dim",
    "drift.alpha1",
    "drift.alpha2",
    "drift.truncation_delta",
    "drift.f_kind",
    "drift.nu_atoms",
    "drift.l_f",
    "diffusion.scale",
    "sim.t_horizon",
    "sim.dt",
    "sim.dt_over_eps",
    "sim.n_particles",
    "sim.n_replicas",
    "sim.epsilon",
    "sim.initial",
    "sim.rescaled",
    "sim.allow_coarse_dt",
    "sim.proj_mesh",
    "metrics.ell",
    "metrics.bin_width",
    "metrics.tv_family",
    "study.slope_band",
    "kbm.n_trials",
    "kbm.t_values",
    "kbm.tol",
    "kbm.n_mu_particles",
    "kbm.x_half_width",
    "kbm.t0_max",
    "kbm.quad_n",
    "kbm.n_random_f",
    "fluct.h_grid",
    "fluct.dt_over_h",
    "fluct.f",
    "fluct.slope_lo",
    "fluct.slope_hi",
    "fluct.n_replicas",
    "rates.omega",
    "rates.d",
    "rates.p0",
    "rates.ell",
    "rates.delta",
    "rates.eps_list",
    "rates.alpha2",
];

struct KeyMap {
    map: BTreeMap<String, String>,
}

impl KeyMap {
    fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(|s| s.as_str())
    }

    fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Config(format!("missing required key '{key}'")))
    }

    fn f64_opt(&self, key: &str) -> Result<Option<f64>> {
        self.get(key).map(|v| parse_f64(key, v)).transpose()
    }

    fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        Ok(self.f64_opt(key)?.unwrap_or(default))
    }

    fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("key '{key}': expected an integer, got '{v}'"))),
        }
    }

    fn bool_or(&self, key: &str, default: bool) -> Result<bool> {
        match self.get(key) {
            None => Ok(default),
            Some("true") => Ok(true),
            Some("false") => Ok(false),
            Some(v) => Err(Error::Config(format!(
                "key '{key}': expected true/false, got '{v}'"
            ))),
        }
    }

    fn float_list(&self, key: &str) -> Result<Option<Vec<f64>>> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => {
                let parts: Result<Vec<f64>> =
                    v.split(',').map(|p| parse_f64(key, p.trim())).collect();
                Ok(Some(parts?))
            }
        }
    }
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    if v == "inf" || v == "infinity" {
        return Ok(f64::INFINITY);
    }
    v.parse::<f64>()
        .map_err(|_| Error::Config(format!("key '{key}': expected a number, got '{v}'")))
}

fn parse_lines(raw: &str) -> Result<KeyMap> {
    let mut map = BTreeMap::new();
    for (lineno, line) in raw.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "line {}: expected 'section.key = value', got '{line}'",
                lineno + 1
            ))
        })?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if !KNOWN_KEYS.contains(&key.as_str()) {
            return Err(Error::Config(format!("unknown key '{key}'")));
        }
        if map.insert(key.clone(), value).is_some() {
            return Err(Error::Config(format!("duplicate key '{key}'")));
        }
    }
    Ok(KeyMap { map })
}

fn parse_initial(spec: &str, dim: usize) -> Result<InitialSampler> {
    let parts: Vec<&str> = spec.split(':').collect();
    let vecify = |s: &str| -> Result<Vec<f64>> {
        let v: Result<Vec<f64>> = s
            .split(',')
            .map(|p| parse_f64("sim.initial", p.trim()))
            .collect();
        let v = v?;
        if v.len() == dim {
            Ok(v)
        } else if v.len() == 1 {
            Ok(vec![v[0]; dim])
        } else {
            Err(Error::Config(format!(
                "sim.initial: vector '{s}' has length {} but dim = {dim}",
                v.len()
            )))
        }
    };
    match parts.as_slice() {
        ["point", x] => Ok(InitialSampler::Point(vecify(x)?)),
        ["gaussian", mean, std] => Ok(InitialSampler::Gaussian {
            mean: vecify(mean)?,
            std: parse_f64("sim.initial", std)?,
        }),
        ["uniform", lo, hi] => Ok(InitialSampler::UniformBox {
            lo: vecify(lo)?,
            hi: vecify(hi)?,
        }),
        _ => Err(Error::Config(format!(
            "sim.initial: expected point:<vec> | gaussian:<vec>:<std> | uniform:<vec>:<vec>, got '{spec}'"
        ))),
    }
}

fn parse_nu_atoms(spec: &str) -> Result<Vec<NuAtom>> {
    spec.split(';')
        .map(|pair| {
            let (xi, mass) = pair.trim().split_once(':').ok_or_else(|| {
                Error::Config(format!("drift.nu_atoms: expected 'xi:mass', got '{pair}'"))
            })?;
            Ok(NuAtom {
                xi: parse_f64("drift.nu_atoms", xi.trim())?,
                mass: parse_f64("drift.nu_atoms", mass.trim())?,
            })
        })
        .collect()
}

fn parse_drift(
    keys: &KeyMap,
    dim: usize,
    default_cloud_size: usize,
) -> Result<Option<DriftConfig>> {
    let Some(name) = keys.get("drift.name") else {
        return Ok(None);
    };
    Ok(Some(match name {
        "mean_reversion" => DriftConfig::MeanReversion,
        "sine_modulated" => DriftConfig::SineModulated,
        "power_kernel" => DriftConfig::PowerKernel(PowerKernelParams {
            alpha1: parse_f64("drift.alpha1", keys.require("drift.alpha1")?)?,
            alpha2: parse_f64("drift.alpha2", keys.require("drift.alpha2")?)?,
            // Unset: default truncation N^{-1/d}/10 for the particle count
            // the kernel will see (collision-safe, vanishing with N).
            truncation_delta: match keys.f64_opt("drift.truncation_delta")? {
                Some(delta) => delta,
                None => crate::drifts::default_truncation_delta(default_cloud_size, dim),
            },
        }),
        "oscillatory_interaction" => {
            let f_kind = match keys.get("drift.f_kind").unwrap_or("linear") {
                "linear" => OscillatoryFKind::Linear,
                "quadratic" => OscillatoryFKind::Quadratic,
                "tanh_mix" => OscillatoryFKind::TanhMix,
                other => return Err(Error::Config(format!("unknown drift.f_kind '{other}'"))),
            };
            DriftConfig::OscillatoryInteraction {
                f_kind,
                nu_atoms: parse_nu_atoms(keys.require("drift.nu_atoms")?)?,
                l_f: keys.f64_or("drift.l_f", 1.0)?,
            }
        }
        other => {
            return Err(Error::Config(format!(
                "unknown drift.name '{other}' (expected one of {:?})",
                crate::drifts::DRIFT_NAMES
            )))
        }
    }))
}

/// Parse a config file's contents into an [`ExperimentSpec`].
pub fn parse_config_str(raw: &str) -> Result<ExperimentSpec> {
    let keys = parse_lines(raw)?;
    let kind = ExperimentKind::parse(keys.require("experiment.kind")?)?;
    let dim = keys.usize_or("drift.dim", 1)?;
    if dim == 0 {
        return Err(Error::Config("drift.dim must be >= 1".into()));
    }

    let eps_grid = keys.float_list("experiment.eps_grid")?.unwrap_or_default();
    if matches!(
        kind,
        ExperimentKind::StrongStudy | ExperimentKind::WeakStudy
    ) && eps_grid.len() < 3
    {
        return Err(Error::Config(
            "experiment.eps_grid must list at least 3 values for a study".into(),
        ));
    }
    if eps_grid.iter().any(|e| !(*e > 0.0)) {
        return Err(Error::Config(
            "experiment.eps_grid values must be positive".into(),
        ));
    }
    if eps_grid.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Config(
            "experiment.eps_grid must be strictly decreasing".into(),
        ));
    }

    let t_horizon = keys.f64_or("sim.t_horizon", 1.0)?;
    let checkpoints = keys.float_list("experiment.checkpoints")?;
    if let Some(cps) = &checkpoints {
        if cps.iter().any(|c| *c < 0.0 || *c > t_horizon) {
            return Err(Error::Config(
                "experiment.checkpoints must lie in [0, sim.t_horizon]".into(),
            ));
        }
    }

    let dt_fixed = keys.f64_opt("sim.dt")?;
    let dt_over_eps = keys.f64_opt("sim.dt_over_eps")?;
    if dt_fixed.is_some() && dt_over_eps.is_some() {
        return Err(Error::Config(
            "sim.dt and sim.dt_over_eps are mutually exclusive".into(),
        ));
    }

    let requires_sim = matches!(
        kind,
        ExperimentKind::StrongStudy | ExperimentKind::WeakStudy | ExperimentKind::Simulate
    );
    if requires_sim && dt_fixed.is_none() && dt_over_eps.is_none() {
        return Err(Error::Config(
            "missing required key 'sim.dt' (or 'sim.dt_over_eps')".into(),
        ));
    }

    let n_particles = keys.usize_or("sim.n_particles", 1000)?;
    let kbm_n_mu_particles = keys.usize_or("kbm.n_mu_particles", 20)?;
    let default_cloud_size = if kind == ExperimentKind::KbmCheck {
        kbm_n_mu_particles
    } else {
        n_particles
    };
    let drift = parse_drift(&keys, dim, default_cloud_size)?;
    if matches!(
        kind,
        ExperimentKind::StrongStudy
            | ExperimentKind::WeakStudy
            | ExperimentKind::Simulate
            | ExperimentKind::KbmCheck
    ) && drift.is_none()
    {
        return Err(Error::Config("missing required key 'drift.name'".into()));
    }

    let bin_width = match keys.get("metrics.bin_width").unwrap_or("auto") {
        "auto" => BinWidth::Auto,
        v => BinWidth::Fixed(parse_f64("metrics.bin_width", v)?),
    };

    let fluct_f = match keys.get("fluct.f").unwrap_or("indicator") {
        "indicator" => FluctFunction::Indicator,
        "tanh" => FluctFunction::Tanh,
        "const" => FluctFunction::Const,
        other => return Err(Error::Config(format!("unknown fluct.f '{other}'"))),
    };

    let rates_omega = match keys.get("rates.omega").unwrap_or("power:1.0") {
        "log" => OmegaMode::LogOverT,
        v => {
            let alpha = v.strip_prefix("power:").ok_or_else(|| {
                Error::Config(format!(
                    "rates.omega: expected power:<alpha> or log, got '{v}'"
                ))
            })?;
            OmegaMode::PowerLaw(parse_f64("rates.omega", alpha)?)
        }
    };

    let seed = match keys.get("experiment.seed") {
        None => 12345,
        Some(v) => v
            .parse::<u64>()
            .map_err(|_| Error::Config(format!("experiment.seed: expected a u64, got '{v}'")))?,
    };

    let initial = parse_initial(keys.get("sim.initial").unwrap_or("gaussian:0.0:1.0"), dim)?;

    Ok(ExperimentSpec {
        raw: raw.to_string(),
        kind,
        seed,
        output_dir: keys
            .get("experiment.output_dir")
            .unwrap_or("out")
            .to_string(),
        eps_grid,
        checkpoints,
        drift,
        dim,
        diffusion_scale: keys.f64_or("diffusion.scale", 1.0)?,
        t_horizon,
        dt_fixed,
        dt_over_eps,
        n_particles,
        n_replicas: keys.usize_or("sim.n_replicas", 16)?,
        epsilon: keys.f64_opt("sim.epsilon")?,
        initial,
        rescaled: keys.bool_or("sim.rescaled", false)?,
        allow_coarse_dt: keys.bool_or("sim.allow_coarse_dt", false)?,
        proj_mesh: keys.f64_opt("sim.proj_mesh")?,
        ell: keys.f64_or("metrics.ell", crate::rates::DEFAULT_ELL)?,
        bin_width,
        tv_family: keys.bool_or("metrics.tv_family", false)?,
        slope_band: keys.f64_or("study.slope_band", 0.1)?,
        kbm_n_trials: keys.usize_or("kbm.n_trials", 100)?,
        kbm_t_values: keys
            .float_list("kbm.t_values")?
            .unwrap_or_else(|| vec![5.0, 10.0, 20.0, 40.0]),
        kbm_tol: keys.f64_or("kbm.tol", 1e-3)?,
        kbm_n_mu_particles,
        kbm_x_half_width: keys.f64_or("kbm.x_half_width", 2.0)?,
        kbm_t0_max: keys.f64_or("kbm.t0_max", 50.0)?,
        kbm_quad_n: keys.usize_or("kbm.quad_n", 512)?,
        kbm_n_random_f: keys.usize_or("kbm.n_random_f", 0)?,
        fluct_h_grid: keys
            .float_list("fluct.h_grid")?
            .unwrap_or_else(|| (4..=10).map(|j| 0.5_f64.powi(j)).collect()),
        fluct_dt_over_h: keys.f64_or("fluct.dt_over_h", 10.0)?,
        fluct_f,
        fluct_slope_lo: keys.f64_or("fluct.slope_lo", 0.8)?,
        fluct_slope_hi: keys.f64_or("fluct.slope_hi", 1.2)?,
        fluct_replicas: keys.usize_or("fluct.n_replicas", 10_000)?,
        rates_omega,
        rates_d: keys.usize_or("rates.d", 1)?,
        rates_p0: keys.f64_or("rates.p0", f64::INFINITY)?,
        rates_ell: keys.f64_or("rates.ell", crate::rates::DEFAULT_ELL)?,
        rates_delta: keys.f64_or("rates.delta", 0.0)?,
        rates_eps_list: keys
            .float_list("rates.eps_list")?
            .unwrap_or_else(|| (2..=7).map(|j| 0.5_f64.powi(j)).collect()),
        rates_alpha2: keys.f64_opt("rates.alpha2")?,
    })
}

/// Parse a config file from disk.
pub fn parse_config(path: &std::path::Path) -> Result<ExperimentSpec> {
    let raw = std::fs::read_to_string(path)?;
    parse_config_str(&raw)
}

impl ExperimentSpec {
    /// dt for a given ε under the configured rule.
    pub fn dt_for(&self, eps: f64) -> f64 {
        match (self.dt_fixed, self.dt_over_eps) {
            (Some(dt), _) => dt,
            (None, Some(f)) => eps / f,
            (None, None) => eps / 40.0,
        }
    }

    pub fn dt_rule_description(&self) -> String {
        match (self.dt_fixed, self.dt_over_eps) {
            (Some(dt), _) => format!("dt={dt}"),
            (None, Some(f)) => format!("dt=eps/{f}"),
            (None, None) => "dt=eps/40".to_string(),
        }
    }

    /// Default TV checkpoints {T/4, T/2, 3T/4, T}: away from t ≈ 0 where the
    /// short-time bounds blow up.
    pub fn effective_checkpoints(&self) -> Vec<f64> {
        self.checkpoints.clone().unwrap_or_else(|| {
            vec![
                self.t_horizon / 4.0,
                self.t_horizon / 2.0,
                3.0 * self.t_horizon / 4.0,
                self.t_horizon,
            ]
        })
    }
}
