//! Observation likelihoods linking latent factors to data: Gaussian,
//! Poisson, and zero-inflated gamma (ZIG). Each family provides the
//! negative log-likelihood, its mean, a sampler, and analytic gradients
//! with respect to the pre-nonlinearity activations a model produces.
//!
//! The ZIG distribution mixes a point mass at zero (probability 1 − q) with
//! a location-shifted gamma for positive event sizes:
//! y ~ (1−q)·δ(0) + q·gamma(shape k, scale α, location loc).

use ndarray::{Array1, Array3, ArrayView3};
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{digamma, ln_factorial, ln_gamma, sigmoid};

/// Probability clamp applied to q and to the zero/nonzero branch masses so
/// log-likelihoods stay finite.
pub const PROB_EPS: f64 = 1e-6;

/// Floor for the gamma argument y − loc; events exactly at the location
/// parameter would otherwise produce an infinite density for shape > 1.
const GAMMA_X_FLOOR: f64 = 1e-10;

/// Floor for k and alpha after the scaled sigmoid.
const POSITIVE_FLOOR: f64 = 1e-12;

/// Per-entry zero-inflated gamma parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZigParams {
    /// Probability of a nonzero event, clamped to (PROB_EPS, 1 − PROB_EPS).
    pub q: f64,
    /// Gamma shape, > 0.
    pub k: f64,
    /// Gamma scale, > 0.
    pub alpha: f64,
    /// Fixed per-channel location (minimum detectable event size), ≥ 0.
    pub loc: f64,
}

impl ZigParams {
    pub fn new(q: f64, k: f64, alpha: f64, loc: f64) -> Result<Self> {
        if !q.is_finite() || !k.is_finite() || !alpha.is_finite() || !loc.is_finite() {
            return Err(Error::numeric("zig params must be finite".to_string()));
        }
        if k <= 0.0 || alpha <= 0.0 {
            return Err(Error::numeric(format!(
                "zig shape/scale must be positive: k={k}, alpha={alpha}"
            )));
        }
        if loc < 0.0 {
            return Err(Error::numeric(format!("zig loc must be non-negative, got {loc}")));
        }
        Ok(ZigParams { q: q.clamp(PROB_EPS, 1.0 - PROB_EPS), k, alpha, loc })
    }
}

/// Which emission family a model uses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum EmissionKind {
    Gaussian { sd: f64 },
    Poisson,
    Zig,
}

impl EmissionKind {
    /// Width of the pre-activation vector per channel set: 1 for Gaussian
    /// and Poisson, 3 for ZIG (q, k, alpha blocks).
    pub fn preact_width(&self, n_channels: usize) -> usize {
        match self {
            EmissionKind::Zig => 3 * n_channels,
            _ => n_channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let EmissionKind::Gaussian { sd } = self {
            if !(*sd > 0.0) {
                return Err(Error::numeric(format!("gaussian sd must be positive, got {sd}")));
            }
        }
        Ok(())
    }
}

/// Full Poisson NLL including the ln(count!) constant, so saturated-model
/// comparisons are exact: rate − count·ln(rate) + ln(count!).
pub fn poisson_nll(rate: f64, count: f64) -> Result<f64> {
    if !(rate > 0.0) {
        return Err(Error::numeric(format!("poisson rate must be positive, got {rate}")));
    }
    if count < 0.0 {
        return Err(Error::numeric(format!("poisson count must be non-negative, got {count}")));
    }
    Ok(rate - count * rate.ln() + ln_factorial(count))
}

/// Gaussian NLL with fixed sd: ((y−mean)/sd)²/2 + ln(sd·√(2π)).
pub fn gaussian_nll(mean: f64, sd: f64, y: f64) -> f64 {
    let z = (y - mean) / sd;
    0.5 * z * z + sd.ln() + 0.5 * (2.0 * std::f64::consts::PI).ln()
}

/// ZIG NLL. y == 0 → −ln(1−q); y > 0 → −ln q − ln gammaPDF(y − loc).
/// Events strictly between zero and loc are rejected: they are below the
/// minimum detectable size and signal broken preprocessing.
pub fn zig_nll(p: &ZigParams, y: f64) -> Result<f64> {
    if y < 0.0 {
        return Err(Error::numeric(format!("zig observation must be non-negative, got {y}")));
    }
    if y == 0.0 {
        return Ok(-(1.0 - p.q).ln());
    }
    if y < p.loc {
        return Err(Error::numeric(format!(
            "zig observation {y} lies strictly between 0 and loc {}",
            p.loc
        )));
    }
    let x = (y - p.loc).max(GAMMA_X_FLOOR);
    Ok(-p.q.ln() + x / p.alpha - (p.k - 1.0) * x.ln() + p.k * p.alpha.ln() + ln_gamma(p.k))
}

/// Mean of the ZIG distribution: q·(k·α + loc).
pub fn zig_mean(p: &ZigParams) -> f64 {
    p.q * (p.k * p.alpha + p.loc)
}

/// Draws one ZIG sample: zero with probability 1−q, otherwise
/// loc + gamma(k, α).
pub fn zig_sample(p: &ZigParams, rng: &mut impl Rng) -> f64 {
    if rng.gen::<f64>() >= p.q {
        0.0
    } else {
        let gamma = Gamma::new(p.k, p.alpha).expect("validated zig params");
        p.loc + gamma.sample(rng)
    }
}

/// scale · σ(x). The ZIG head uses it with trainable per-channel scales to
/// produce k and α; a plain sigmoid (scale = 1) produces q.
pub fn scaled_sigmoid(x: f64, scale: f64) -> f64 {
    debug_assert!(scale > 0.0);
    scale * sigmoid(x)
}

/// Result of evaluating an emission likelihood over a masked batch.
#[derive(Debug, Clone)]
pub struct EmissionEval {
    /// Mean NLL over observed entries (0 when nothing is observed).
    pub nll: f64,
    /// Gradient of the mean NLL with respect to each pre-activation.
    pub d_preact: Array3<f64>,
    /// ZIG only: gradient with respect to the per-channel k scales.
    pub d_scale_k: Option<Array1<f64>>,
    /// ZIG only: gradient with respect to the per-channel alpha scales.
    pub d_scale_alpha: Option<Array1<f64>>,
}

/// Trainable per-channel state the ZIG head carries alongside network
/// weights: positive output scales for k and alpha plus the fixed location.
#[derive(Debug, Clone, PartialEq)]
pub struct ZigChannelState {
    pub scale_k: Array1<f64>,
    pub scale_alpha: Array1<f64>,
    pub loc: Array1<f64>,
}

impl ZigChannelState {
    pub fn uniform(n_channels: usize, scale: f64, loc: f64) -> Self {
        ZigChannelState {
            scale_k: Array1::from_elem(n_channels, scale),
            scale_alpha: Array1::from_elem(n_channels, scale),
            loc: Array1::from_elem(n_channels, loc),
        }
    }
}

/// Per-channel ZIG location fixed from data: the minimum nonzero observed
/// event of each channel, or `fallback` for channels with no events.
/// Computed once at dataset load.
pub fn loc_from_events(
    values: &ArrayView3<f64>,
    mask: &ArrayView3<bool>,
    fallback: f64,
) -> Array1<f64> {
    let (n_trials, n_steps, n_channels) = values.dim();
    let mut loc = Array1::from_elem(n_channels, f64::INFINITY);
    for b in 0..n_trials {
        for t in 0..n_steps {
            for c in 0..n_channels {
                let v = values[[b, t, c]];
                if mask[[b, t, c]] && v > 0.0 && v < loc[c] {
                    loc[c] = v;
                }
            }
        }
    }
    loc.mapv_inplace(|v| if v.is_finite() { v } else { fallback });
    loc
}

/// Mean NLL over observed entries plus analytic gradients with respect to
/// the pre-nonlinearity activations (and, for ZIG, the channel scales).
///
/// Pre-activation layout: `[trials, time, N]` for Gaussian/Poisson;
/// `[trials, time, 3N]` for ZIG with blocks `[a_q | a_k | a_alpha]`.
/// Masked entries contribute exactly zero to the loss and all gradients.
pub fn emission_nll_grad(
    kind: &EmissionKind,
    preact: &ArrayView3<f64>,
    zig: Option<&ZigChannelState>,
    values: &ArrayView3<f64>,
    mask: &ArrayView3<bool>,
) -> Result<EmissionEval> {
    kind.validate()?;
    let (n_trials, n_steps, n_channels) = values.dim();
    if mask.dim() != values.dim() {
        return Err(Error::shape(format!("values {:?} vs mask {:?}", values.dim(), mask.dim())));
    }
    let want_p = kind.preact_width(n_channels);
    if preact.dim() != (n_trials, n_steps, want_p) {
        return Err(Error::shape(format!(
            "preact {:?}, expected ({n_trials}, {n_steps}, {want_p})",
            preact.dim()
        )));
    }

    let n_observed = mask.iter().filter(|&&m| m).count();
    let mut d_preact = Array3::zeros(preact.dim());
    if n_observed == 0 {
        return Ok(EmissionEval {
            nll: 0.0,
            d_preact,
            d_scale_k: matches!(kind, EmissionKind::Zig).then(|| Array1::zeros(n_channels)),
            d_scale_alpha: matches!(kind, EmissionKind::Zig).then(|| Array1::zeros(n_channels)),
        });
    }
    let inv_n = 1.0 / n_observed as f64;

    let mut total = 0.0;
    match kind {
        EmissionKind::Gaussian { sd } => {
            for b in 0..n_trials {
                for t in 0..n_steps {
                    for c in 0..n_channels {
                        if !mask[[b, t, c]] {
                            continue;
                        }
                        let a = preact[[b, t, c]];
                        let y = values[[b, t, c]];
                        total += gaussian_nll(a, *sd, y);
                        d_preact[[b, t, c]] = (a - y) / (sd * sd) * inv_n;
                    }
                }
            }
        }
        EmissionKind::Poisson => {
            for b in 0..n_trials {
                for t in 0..n_steps {
                    for c in 0..n_channels {
                        if !mask[[b, t, c]] {
                            continue;
                        }
                        let a = preact[[b, t, c]];
                        let y = values[[b, t, c]];
                        let rate = a.exp();
                        // rate − y·a + ln(y!) with ln(rate) = a
                        total += rate - y * a + ln_factorial(y);
                        d_preact[[b, t, c]] = (rate - y) * inv_n;
                    }
                }
            }
        }
        EmissionKind::Zig => {
            let state = zig.ok_or_else(|| {
                Error::numeric("zig emission requires channel scales and locations".to_string())
            })?;
            if state.scale_k.len() != n_channels
                || state.scale_alpha.len() != n_channels
                || state.loc.len() != n_channels
            {
                return Err(Error::shape(format!(
                    "zig channel state sized {} for {n_channels} channels",
                    state.scale_k.len()
                )));
            }
            let mut d_sk = Array1::<f64>::zeros(n_channels);
            let mut d_sa = Array1::<f64>::zeros(n_channels);
            for b in 0..n_trials {
                for t in 0..n_steps {
                    for c in 0..n_channels {
                        if !mask[[b, t, c]] {
                            continue;
                        }
                        let a_q = preact[[b, t, c]];
                        let a_k = preact[[b, t, n_channels + c]];
                        let a_al = preact[[b, t, 2 * n_channels + c]];
                        let y = values[[b, t, c]];

                        let sig_q = sigmoid(a_q);
                        let q = sig_q.clamp(PROB_EPS, 1.0 - PROB_EPS);
                        let q_active = sig_q > PROB_EPS && sig_q < 1.0 - PROB_EPS;
                        let sig_k = sigmoid(a_k);
                        let sig_al = sigmoid(a_al);
                        let k = (state.scale_k[c] * sig_k).max(POSITIVE_FLOOR);
                        let alpha = (state.scale_alpha[c] * sig_al).max(POSITIVE_FLOOR);
                        let loc = state.loc[c];

                        if y == 0.0 {
                            total += -(1.0 - q).ln();
                            if q_active {
                                // d/da_q of −ln(1−σ) is σ
                                d_preact[[b, t, c]] = q * inv_n;
                            }
                        } else {
                            if y < loc {
                                return Err(Error::numeric(format!(
                                    "zig observation {y} below loc {loc} at channel {c}"
                                )));
                            }
                            let x = (y - loc).max(GAMMA_X_FLOOR);
                            total += -q.ln() + x / alpha - (k - 1.0) * x.ln()
                                + k * alpha.ln()
                                + ln_gamma(k);
                            if q_active {
                                d_preact[[b, t, c]] = (q - 1.0) * inv_n;
                            }
                            let dk = -x.ln() + alpha.ln() + digamma(k);
                            let dal = -x / (alpha * alpha) + k / alpha;
                            if k > POSITIVE_FLOOR {
                                d_preact[[b, t, n_channels + c]] =
                                    dk * state.scale_k[c] * sig_k * (1.0 - sig_k) * inv_n;
                                d_sk[c] += dk * sig_k * inv_n;
                            }
                            if alpha > POSITIVE_FLOOR {
                                d_preact[[b, t, 2 * n_channels + c]] =
                                    dal * state.scale_alpha[c] * sig_al * (1.0 - sig_al) * inv_n;
                                d_sa[c] += dal * sig_al * inv_n;
                            }
                        }
                    }
                }
            }
            return Ok(EmissionEval {
                nll: total * inv_n,
                d_preact,
                d_scale_k: Some(d_sk),
                d_scale_alpha: Some(d_sa),
            });
        }
    }
    Ok(EmissionEval { nll: total * inv_n, d_preact, d_scale_k: None, d_scale_alpha: None })
}

/// Emission distribution means from pre-activations: exp(a) for Poisson,
/// a itself for Gaussian, q·(k·α + loc) for ZIG.
pub fn emission_mean(
    kind: &EmissionKind,
    preact: &ArrayView3<f64>,
    zig: Option<&ZigChannelState>,
    n_channels: usize,
) -> Result<Array3<f64>> {
    let (n_trials, n_steps, _) = preact.dim();
    let mut out = Array3::zeros((n_trials, n_steps, n_channels));
    match kind {
        EmissionKind::Gaussian { .. } => {
            out.assign(preact);
        }
        EmissionKind::Poisson => {
            out.assign(preact);
            out.mapv_inplace(f64::exp);
        }
        EmissionKind::Zig => {
            let state = zig.ok_or_else(|| {
                Error::numeric("zig emission requires channel scales and locations".to_string())
            })?;
            for b in 0..n_trials {
                for t in 0..n_steps {
                    for c in 0..n_channels {
                        let q = sigmoid(preact[[b, t, c]]).clamp(PROB_EPS, 1.0 - PROB_EPS);
                        let k = (state.scale_k[c] * sigmoid(preact[[b, t, n_channels + c]]))
                            .max(POSITIVE_FLOOR);
                        let alpha = (state.scale_alpha[c]
                            * sigmoid(preact[[b, t, 2 * n_channels + c]]))
                        .max(POSITIVE_FLOOR);
                        out[[b, t, c]] = q * (k * alpha + state.loc[c]);
                    }
                }
            }
        }
    }
    Ok(out)
}
