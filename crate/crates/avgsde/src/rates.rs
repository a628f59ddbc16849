//! Rate calculators: the inf_h balances between the discretization terms
//! h^{β_w}, h^{γ} and the averaging modulus ω(h/ε), their closed-form
//! ε-exponents in the power-law regime, and log-log slope fitting of
//! measured error sequences.

use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// Shape of the averaging modulus ω.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OmegaMode {
    /// ω(t) = t^{-α}.
    PowerLaw(f64),
    /// ω(t) = t^{-1}·ln t (the α1 = 1 kernel case); closed forms do not
    /// apply and exponents are evaluated numerically.
    LogOverT,
}

/// Inputs of the rate formulas: modulus shape, dimension, integrability
/// exponent p0 ∈ (d∨2, ∞], moment exponent ℓ ∈ (0,1) and the δ-slack of the
/// measure-independent case.
#[derive(Debug, Clone, Copy)]
pub struct RateParams {
    pub omega: OmegaMode,
    pub d: usize,
    /// Use `f64::INFINITY` for the bounded-drift regime.
    pub p0: f64,
    pub ell: f64,
    /// Slack in the measure-independent strong rate; defaults to 0 in the
    /// closed forms (the constant blows up as δ → 0, exponents do not).
    pub delta: f64,
}

pub const DEFAULT_ELL: f64 = 0.5;

impl RateParams {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::InvalidArgument("dimension must be >= 1".into()));
        }
        let floor = (self.d.max(2)) as f64;
        if !(self.p0 > floor) {
            return Err(Error::InvalidArgument(format!(
                "p0 must lie in (max(d,2), inf], got {}",
                self.p0
            )));
        }
        if !(self.ell > 0.0 && self.ell < 1.0) {
            return Err(Error::InvalidArgument("ell must lie in (0,1)".into()));
        }
        if !(self.delta >= 0.0 && self.delta < 1.0) {
            return Err(Error::InvalidArgument("delta must lie in [0,1)".into()));
        }
        if let OmegaMode::PowerLaw(a) = self.omega {
            if !(a > 0.0) {
                return Err(Error::InvalidArgument(
                    "omega exponent must be positive".into(),
                ));
            }
        }
        Ok(())
    }

    /// γ = 1 − d/p0 ∈ (0, 1].
    pub fn gamma(&self) -> f64 {
        1.0 - self.d as f64 / self.p0
    }

    /// β_w = 1/2 − d/(2 p0) ∈ (0, 1/2].
    pub fn beta_w(&self) -> f64 {
        0.5 - self.d as f64 / (2.0 * self.p0)
    }
}

/// How an exponent was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExponentMethod {
    ClosedForm,
    /// Numeric inf_h evaluation (log-modulus mode); the value carries a
    /// |ln ε|-sized wobble and is flagged as such in tables.
    NumericLogMode,
}

#[derive(Debug, Clone, Copy)]
pub struct Exponent {
    pub value: f64,
    pub method: ExponentMethod,
}

/// Reference scale at which log-mode exponents are extracted numerically.
const LOG_MODE_REFERENCE_EPS: f64 = 2.44140625e-4; // 2^-12

/// Monotone modulus for the ω(t) = t^{-1}·ln t regime: the raw expression
/// rises on (1, e), so it is capped at its maximum 1/e below t = e. Decay
/// moduli must be nonincreasing for the h-balance to make sense.
pub fn log_over_t_modulus(t: f64) -> f64 {
    use std::f64::consts::E;
    if t >= E {
        t.ln() / t
    } else {
        1.0 / E
    }
}

// ---------------------------------------------------------------------------
// Closed-form exponents
// ---------------------------------------------------------------------------

/// ε-exponent of inf_h ( h^{β_w} + ω(h/ε) ): α·β_w/(α + β_w) from the
/// balance h* = ε^{α/(α+β_w)} in the power-law regime.
pub fn weak_rate_exponent(rp: &RateParams) -> Result<Exponent> {
    rp.validate()?;
    match rp.omega {
        OmegaMode::PowerLaw(alpha) => {
            let bw = rp.beta_w();
            Ok(Exponent {
                value: alpha * bw / (alpha + bw),
                method: ExponentMethod::ClosedForm,
            })
        }
        OmegaMode::LogOverT => {
            let (_h, v) = inf_h_rate(
                log_over_t_modulus,
                rp.beta_w(),
                LOG_MODE_REFERENCE_EPS,
                BalanceMode::Weak,
            )?
            .into_pair();
            Ok(Exponent {
                value: v.ln() / LOG_MODE_REFERENCE_EPS.ln(),
                method: ExponentMethod::NumericLogMode,
            })
        }
    }
}

/// ε-exponent of [ inf_h ( ω(h/ε)² + h^{γ'} ) ]^ℓ with γ' = 1 − d/p0 in the
/// measure-dependent case and 1 − δ otherwise: ℓ·2αγ'/(2α + γ').
pub fn strong_rate_exponent(rp: &RateParams, mu_dependent: bool) -> Result<Exponent> {
    rp.validate()?;
    let gamma_prime = if mu_dependent {
        rp.gamma()
    } else {
        1.0 - rp.delta
    };
    match rp.omega {
        OmegaMode::PowerLaw(alpha) => Ok(Exponent {
            value: rp.ell * 2.0 * alpha * gamma_prime / (2.0 * alpha + gamma_prime),
            method: ExponentMethod::ClosedForm,
        }),
        OmegaMode::LogOverT => {
            let (_h, v) = inf_h_rate(
                log_over_t_modulus,
                gamma_prime,
                LOG_MODE_REFERENCE_EPS,
                BalanceMode::Strong,
            )?
            .into_pair();
            Ok(Exponent {
                value: rp.ell * v.ln() / LOG_MODE_REFERENCE_EPS.ln(),
                method: ExponentMethod::NumericLogMode,
            })
        }
    }
}

/// The supremal integrability exponent of the power-law interaction kernel
/// |x|^{1-α2}: p0 ↑ d/(α2 − 1), not attained.
pub fn power_kernel_supremal_p0(d: usize, alpha2: f64) -> f64 {
    d as f64 / (alpha2 - 1.0)
}

// ---------------------------------------------------------------------------
// Numeric inf_h
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BalanceMode {
    /// h^{γe} + ω(h/ε).
    Weak,
    /// ω(h/ε)² + h^{γe}.
    Strong,
}

#[derive(Debug, Clone, Copy)]
pub struct InfHResult {
    pub h_star: f64,
    pub value: f64,
    /// ω sampled non-monotone on the probe grid; the minimization still ran.
    pub nonmonotone_omega: bool,
}

impl InfHResult {
    pub fn into_pair(self) -> (f64, f64) {
        (self.h_star, self.value)
    }
}

const GOLDEN_RATIO: f64 = 1.618_033_988_749_895;
const GOLDEN_REL_TOL: f64 = 1e-8;

/// Golden-section minimum of a unimodal f on [lo, hi] to relative interval
/// tolerance `rel_tol`.
pub fn golden_section_min(
    f: impl Fn(f64) -> f64,
    mut lo: f64,
    mut hi: f64,
    rel_tol: f64,
    max_iter: usize,
) -> (f64, f64) {
    let inv = 1.0 / GOLDEN_RATIO;
    let mut b = hi - (hi - lo) * inv;
    let mut c = lo + (hi - lo) * inv;
    let mut fb = f(b);
    let mut fc = f(c);
    let scale = lo.abs().max(hi.abs()).max(1.0);
    let mut iter = 0;
    while (hi - lo).abs() > rel_tol * scale && iter < max_iter {
        iter += 1;
        if fb < fc {
            hi = c;
            c = b;
            fc = fb;
            b = hi - (hi - lo) * inv;
            fb = f(b);
        } else {
            lo = b;
            b = c;
            fb = fc;
            c = lo + (hi - lo) * inv;
            fc = f(c);
        }
    }
    let x = 0.5 * (lo + hi);
    (x, f(x))
}

/// inf over h > 0 of the weak/strong balance, minimized over
/// log h ∈ [log ε², 0] by a coarse scan plus golden-section refinement.
pub fn inf_h_rate(
    omega: impl Fn(f64) -> f64,
    gamma_exp: f64,
    eps: f64,
    mode: BalanceMode,
) -> Result<InfHResult> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::InvalidArgument("eps must lie in (0,1)".into()));
    }
    if !(gamma_exp > 0.0) {
        return Err(Error::InvalidArgument("h-exponent must be positive".into()));
    }

    // Monotonicity probe of ω on a log grid of arguments h/ε.
    let mut nonmonotone = false;
    let mut prev = f64::INFINITY;
    for i in 0..=16 {
        let t = (1.0 / eps).powf(i as f64 / 16.0); // spans [1, 1/ε]
        let w = omega(t);
        if w > prev * (1.0 + 1e-12) {
            nonmonotone = true;
        }
        prev = w;
    }

    let objective = |u: f64| {
        let h = u.exp();
        match mode {
            BalanceMode::Weak => h.powf(gamma_exp) + omega(h / eps),
            BalanceMode::Strong => {
                let w = omega(h / eps);
                w * w + h.powf(gamma_exp)
            }
        }
    };

    let u_lo = 2.0 * eps.ln();
    let u_hi = 0.0;
    // Coarse scan brackets the global minimum before golden refinement.
    let n_scan = 64usize;
    let mut best_i = 0usize;
    let mut best_v = f64::INFINITY;
    for i in 0..=n_scan {
        let u = u_lo + (u_hi - u_lo) * i as f64 / n_scan as f64;
        let v = objective(u);
        if v < best_v {
            best_v = v;
            best_i = i;
        }
    }
    let step = (u_hi - u_lo) / n_scan as f64;
    let lo = u_lo + step * (best_i.saturating_sub(1)) as f64;
    let hi = (u_lo + step * (best_i + 1) as f64).min(u_hi);
    let (u_star, value) = golden_section_min(objective, lo, hi, GOLDEN_REL_TOL, 200);
    Ok(InfHResult {
        h_star: u_star.exp(),
        value,
        nonmonotone_omega: nonmonotone,
    })
}

// ---------------------------------------------------------------------------
// Log-log slope fitting
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct RateFit {
    /// Estimated convergence order (slope of ln error against ln ε).
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Ordinary least squares of ln(error) on ln(eps).
pub fn fit_rate(points: &[(f64, f64)]) -> Result<RateFit> {
    if points.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "rate fitting needs at least 3 points, got {}",
            points.len()
        )));
    }
    if points.iter().any(|(e, v)| !(*e > 0.0) || !(*v > 0.0)) {
        return Err(Error::InvalidArgument(
            "rate fitting needs strictly positive (eps, error) pairs".into(),
        ));
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|(e, _)| e.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|(_, v)| v.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidArgument(
            "eps values must not be all equal".into(),
        ));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let ss_res: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| {
            let r = y - (intercept + slope * x);
            r * r
        })
        .sum();
    let r_squared = if ss_tot == 0.0 {
        1.0
    } else {
        1.0 - ss_res / ss_tot
    };
    Ok(RateFit {
        slope,
        intercept,
        r_squared,
    })
}

// ---------------------------------------------------------------------------
