//! Linear dynamical systems trained with selective backpropagation through
//! time.
//!
//! The generative model is x_{t+1} = A·x_t + w_t, y_t = H·x_t + z_t. A
//! linear recurrent network with the same structure is fit by gradient
//! descent on a least-squares loss over the *observed* entries only:
//!
//!   L = (1/T) Σ_t ½‖y_t − H·x_t‖²  restricted to observed indices.
//!
//! Gradients flow by the standard BPTT recursion with one change: entries
//! of ∂L/∂o_t at missing observations are set to zero before the backward
//! pass, so missing data can never corrupt the update.

use ndarray::{Array1, Array2};
use rayon::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numerics::{eigenvalues, spectral_radius};
use crate::rng::RngState;

/// Dynamics matrix A `[D, D]` and observation matrix H `[N, D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LdsParams {
    pub a: Array2<f64>,
    pub h: Array2<f64>,
}

impl LdsParams {
    pub fn new(a: Array2<f64>, h: Array2<f64>) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(Error::shape(format!("A must be square, got {}x{}", a.nrows(), a.ncols())));
        }
        if h.ncols() != a.nrows() {
            return Err(Error::shape(format!(
                "H has {} columns for latent dimension {}",
                h.ncols(),
                a.nrows()
            )));
        }
        if a.iter().chain(h.iter()).any(|v| !v.is_finite()) {
            return Err(Error::numeric("LDS parameters must be finite".to_string()));
        }
        Ok(LdsParams { a, h })
    }

    pub fn latent_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn obs_dim(&self) -> usize {
        self.h.nrows()
    }

    /// Eigenvalues of the dynamics matrix; invariant under a change of
    /// latent basis, hence the quantity parameter-recovery tests compare.
    pub fn dynamics_eigenvalues(&self) -> Result<Vec<num_complex::Complex64>> {
        eigenvalues(&self.a)
    }
}

/// Noise levels for simulation: process noise w_t and observation noise z_t.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LdsNoiseConfig {
    pub process_sd: f64,
    pub observation_sd: f64,
}

impl LdsNoiseConfig {
    pub fn noiseless() -> Self {
        LdsNoiseConfig { process_sd: 0.0, observation_sd: 0.0 }
    }

    fn validate(&self) -> Result<()> {
        if self.process_sd < 0.0 || self.observation_sd < 0.0 {
            return Err(Error::numeric("noise standard deviations must be non-negative".to_string()));
        }
        Ok(())
    }
}

/// Gradients of the masked loss with respect to A and H.
#[derive(Debug, Clone, PartialEq)]
pub struct LdsGradients {
    pub d_a: Array2<f64>,
    pub d_h: Array2<f64>,
}

/// One training trial: a known initial state plus the observed slice.
#[derive(Debug, Clone)]
pub struct LdsTrial {
    pub x0: Array1<f64>,
    /// Observations `[T, N]`, zero-filled at masked entries.
    pub values: Array2<f64>,
    pub mask: Array2<bool>,
}

/// Simulates the noisy system for `t_len` steps starting at `x0`.
/// Stability (spectral radius of A ≤ 1) is enforced here and only here;
/// training-time rollouts may pass through transiently unstable parameters.
pub fn lds_simulate(
    params: &LdsParams,
    noise: &LdsNoiseConfig,
    x0: &Array1<f64>,
    t_len: usize,
    rng: &RngState,
) -> Result<(Array2<f64>, Array2<f64>)> {
    noise.validate()?;
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("x0 must be finite".to_string()));
    }
    if t_len == 0 {
        return Err(Error::numeric("t_len must be at least 1".to_string()));
    }
    let radius = spectral_radius(&params.a)?;
    if radius > 1.0 + 1e-9 {
        return Err(Error::numeric(format!(
            "simulation requires spectral radius of A <= 1, got {radius:.6}"
        )));
    }
    let (d, n) = (params.latent_dim(), params.obs_dim());
    if x0.len() != d {
        return Err(Error::shape(format!("x0 has {} entries for latent dimension {d}", x0.len())));
    }
    let mut r = rng.rng();
    let mut states = Array2::zeros((t_len, d));
    let mut obs = Array2::zeros((t_len, n));
    let mut x = x0.clone();
    for t in 0..t_len {
        states.row_mut(t).assign(&x);
        let mut y = params.h.dot(&x);
        if noise.observation_sd > 0.0 {
            for v in y.iter_mut() {
                *v += noise.observation_sd * r.sample::<f64, _>(StandardNormal);
            }
        }
        obs.row_mut(t).assign(&y);
        if t + 1 < t_len {
            let mut next = params.a.dot(&x);
            if noise.process_sd > 0.0 {
                for v in next.iter_mut() {
                    *v += noise.process_sd * r.sample::<f64, _>(StandardNormal);
                }
            }
            x = next;
        }
    }
    Ok((states, obs))
}

/// Deterministic rollout: states x_t and outputs o_t = H·x_t.
pub fn lds_forward(params: &LdsParams, x0: &Array1<f64>, t_len: usize) -> (Array2<f64>, Array2<f64>) {
    let (d, n) = (params.latent_dim(), params.obs_dim());
    assert_eq!(x0.len(), d, "x0 dimension mismatch");
    assert!(t_len >= 1);
    let mut states = Array2::zeros((t_len, d));
    let mut outputs = Array2::zeros((t_len, n));
    let mut x = x0.clone();
    for t in 0..t_len {
        states.row_mut(t).assign(&x);
        outputs.row_mut(t).assign(&params.h.dot(&x));
        if t + 1 < t_len {
            x = params.a.dot(&x);
        }
    }
    (states, outputs)
}

/// Masked least-squares loss (1/T) Σ over observed (t, i) of
/// ½(o_t^i − y_t^i)². The 1/T normalization is kept regardless of how many
/// entries are observed.
pub fn masked_sse_loss(outputs: &Array2<f64>, values: &Array2<f64>, mask: &Array2<bool>) -> f64 {
    assert_eq!(outputs.dim(), values.dim(), "outputs/values shape mismatch");
    assert_eq!(outputs.dim(), mask.dim(), "outputs/mask shape mismatch");
    let t_len = outputs.nrows() as f64;
    let mut total = 0.0;
    ndarray::Zip::from(outputs).and(values).and(mask).for_each(|&o, &y, &m| {
        if m {
            let r = o - y;
            total += 0.5 * r * r;
        }
    });
    total / t_len
}

/// Exact gradients of [`masked_sse_loss`] with respect to A and H, by
/// backpropagation through time with masked output-gradient entries zeroed:
///
///   ∂L/∂o_t = (1/T)(o_t − y_t), zeroed at missing indices
///   ∂L/∂x_t = Aᵀ·∂L/∂x_{t+1} + Hᵀ·∂L/∂o_t   (seeded at t = T−1)
///   ∂L/∂H = Σ_t ∂L/∂o_t · x_tᵀ
///   ∂L/∂A = Σ_{t≥1} ∂L/∂x_t · x_{t−1}ᵀ
pub fn sbtt_backward(
    params: &LdsParams,
    x0: &Array1<f64>,
    values: &Array2<f64>,
    mask: &Array2<bool>,
) -> Result<LdsGradients> {
    let (d, n) = (params.latent_dim(), params.obs_dim());
    let t_len = values.nrows();
    if values.ncols() != n || mask.dim() != values.dim() || x0.len() != d {
        return Err(Error::shape(format!(
            "sbtt_backward: values {:?}, mask {:?}, x0 {} against D={d}, N={n}",
            values.dim(),
            mask.dim(),
            x0.len()
        )));
    }
    let (states, outputs) = lds_forward(params, x0, t_len);
    let inv_t = 1.0 / t_len as f64;

    let mut d_a = Array2::zeros((d, d));
    let mut d_h = Array2::zeros((n, d));
    // running adjoint ∂L/∂x_{t+1}; empty beyond the last step
    let mut lam = Array1::<f64>::zeros(d);
    for t in (0..t_len).rev() {
        let mut d_out = Array1::<f64>::zeros(n);
        for i in 0..n {
            if mask[[t, i]] {
                d_out[i] = inv_t * (outputs[[t, i]] - values[[t, i]]);
            }
        }
        let x_t = states.row(t);
        // ∂L/∂H accumulates the outer product d_out · x_tᵀ
        for i in 0..n {
            if d_out[i] != 0.0 {
                for j in 0..d {
                    d_h[[i, j]] += d_out[i] * x_t[j];
                }
            }
        }
        let mut adj = params.h.t().dot(&d_out);
        if t + 1 < t_len {
            adj += &params.a.t().dot(&lam);
        }
        if t >= 1 {
            let x_prev = states.row(t - 1);
            for i in 0..d {
                for j in 0..d {
                    d_a[[i, j]] += adj[i] * x_prev[j];
                }
            }
        }
        lam = adj;
    }
    Ok(LdsGradients { d_a, d_h })
}

/// Options for [`train_lds`]: full-batch gradient descent with a fixed
/// learning rate; gradients are averaged over trials.
#[derive(Debug, Clone, Copy)]
pub struct LdsTrainConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Extension beyond the known-x0 setting: also descend on each trial's
    /// initial state estimate.
    pub estimate_x0: bool,
}

impl Default for LdsTrainConfig {
    fn default() -> Self {
        LdsTrainConfig { lr: 1e-2, epochs: 1000, estimate_x0: false }
    }
}

/// Result of LDS training: learned parameters, per-epoch mean loss, and the
/// (possibly re-estimated) per-trial initial states.
#[derive(Debug, Clone)]
pub struct LdsTrainResult {
    pub params: LdsParams,
    pub loss_history: Vec<f64>,
    pub x0: Vec<Array1<f64>>,
}

/// Full-batch gradient descent on the masked loss, averaged over trials.
/// Aborts with an error if the loss becomes non-finite.
pub fn train_lds(dataset: &[LdsTrial], init: &LdsParams, cfg: &LdsTrainConfig) -> Result<LdsTrainResult> {
    if dataset.is_empty() {
        return Err(Error::shape("train_lds: empty dataset".to_string()));
    }
    if !(cfg.lr > 0.0) {
        return Err(Error::numeric(format!("learning rate must be positive, got {}", cfg.lr)));
    }
    let (d, n) = (init.latent_dim(), init.obs_dim());
    for (i, trial) in dataset.iter().enumerate() {
        if trial.x0.len() != d || trial.values.ncols() != n || trial.mask.dim() != trial.values.dim() {
            return Err(Error::shape(format!("trial {i} shapes inconsistent with init params")));
        }
    }
    let inv_trials = 1.0 / dataset.len() as f64;
    let mut params = init.clone();
    let mut x0s: Vec<Array1<f64>> = dataset.iter().map(|t| t.x0.clone()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        // per-trial losses and gradients computed in parallel, folded in
        // trial order so the result is bit-identical under any thread count
        let per_trial: Result<Vec<_>> = dataset
            .par_iter()
            .zip(x0s.par_iter())
            .map(|(trial, x0)| {
                let t_len = trial.values.nrows();
                let (_, outputs) = lds_forward(&params, x0, t_len);
                let loss = masked_sse_loss(&outputs, &trial.values, &trial.mask);
                let grads = sbtt_backward(&params, x0, &trial.values, &trial.mask)?;
                let d_x0 = cfg
                    .estimate_x0
                    .then(|| x0_gradient(&params, x0, &trial.values, &trial.mask));
                Ok((loss, grads, d_x0))
            })
            .collect();
        let per_trial = per_trial?;

        let mut d_a = Array2::<f64>::zeros((d, d));
        let mut d_h = Array2::<f64>::zeros((n, d));
        let mut loss = 0.0;
        let mut d_x0s: Vec<Array1<f64>> = Vec::new();
        for (trial_loss, grads, d_x0) in per_trial {
            loss += trial_loss * inv_trials;
            d_a += &(grads.d_a * inv_trials);
            d_h += &(grads.d_h * inv_trials);
            if let Some(g) = d_x0 {
                d_x0s.push(g);
            }
        }
        if !loss.is_finite() {
            return Err(Error::numeric(format!("train_lds diverged at epoch {epoch} (loss {loss})")));
        }
        history.push(loss);
        params.a -= &(d_a * cfg.lr);
        params.h -= &(d_h * cfg.lr);
        if cfg.estimate_x0 {
            for (x0, g) in x0s.iter_mut().zip(d_x0s.iter()) {
                *x0 -= &(g * cfg.lr);
            }
        }
    }
    Ok(LdsTrainResult { params, loss_history: history, x0: x0s })
}

/// ∂L/∂x_0 for a single trial: the adjoint at t = 0.
fn x0_gradient(params: &LdsParams, x0: &Array1<f64>, values: &Array2<f64>, mask: &Array2<bool>) -> Array1<f64> {
    let n = params.obs_dim();
    let t_len = values.nrows();
    let (_, outputs) = lds_forward(params, x0, t_len);
    let inv_t = 1.0 / t_len as f64;
    let mut lam = Array1::<f64>::zeros(params.latent_dim());
    for t in (0..t_len).rev() {
        let mut d_out = Array1::<f64>::zeros(n);
        for i in 0..n {
            if mask[[t, i]] {
                d_out[i] = inv_t * (outputs[[t, i]] - values[[t, i]]);
            }
        }
        let mut adj = params.h.t().dot(&d_out);
        if t + 1 < t_len {
            adj += &params.a.t().dot(&lam);
        }
        lam = adj;
    }
    lam
}
