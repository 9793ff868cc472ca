//! Forward pass, loss, and hand-derived backward pass of the sequential
//! autoencoder.
//!
//! The loss assembled here is
//!   total = recon + ramp·kl_weight·KL + ramp·(l2·‖U_gen‖² + scale penalty)
//! with recon the mean emission NLL over observed entries (or the
//! coordinated-dropout loss portion when cd_rate > 0). Minibatches are
//! processed in fixed-size trial chunks whose contributions are combined in
//! a fixed order, so results are bit-identical under any thread count.

use ndarray::{s, Array1, Array2, Array3, ArrayView3, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::gru::{gru_backward_step, gru_step, GruStepCache, GruWeights};
use super::{Affine, SeqAeHyper, SeqAeParams, LOG_VAR_CLAMP};
use crate::emissions::{emission_mean, emission_nll_grad};
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::sampling::coordinated_dropout_split;
use crate::tensorio::TimeSeriesBatch;

/// Trials per processing chunk. Fixed so that chunk boundaries (and hence
/// every floating-point reduction) never depend on the thread count.
const CHUNK_TRIALS: usize = 32;

/// Variational posterior over the initial condition, one row per trial.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorIc {
    pub mean: Array2<f64>,
    pub log_var: Array2<f64>,
}

/// Closed-form KL(N(mean, diag exp(log_var)) ‖ N(0, I)) per trial:
/// ½ Σ (exp(log_var) + mean² − 1 − log_var).
pub fn kl_ic(post: &PosteriorIc) -> Array1<f64> {
    let n = post.mean.nrows();
    Array1::from_iter((0..n).map(|b| {
        post.mean
            .row(b)
            .iter()
            .zip(post.log_var.row(b).iter())
            .map(|(&m, &lv)| 0.5 * (lv.exp() + m * m - 1.0 - lv))
            .sum::<f64>()
    }))
}

/// Loss value split into its effective (post-ramp, post-weight) parts;
/// `total = recon + kl + l2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossComponents {
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
    pub l2: f64,
}

/// Gradients for every trainable tensor, in the same layout as
/// [`SeqAeParams::to_flat`].
#[derive(Debug, Clone, PartialEq)]
pub struct SeqAeGrads {
    pub enc_fwd: GruWeights,
    pub enc_bwd: GruWeights,
    pub ic_readout: Affine,
    pub gen_init: Affine,
    pub generator: GruWeights,
    pub factor_readout: Array2<f64>,
    pub emission_readout: Affine,
    pub scale_k: Option<Array1<f64>>,
    pub scale_alpha: Option<Array1<f64>>,
}

impl SeqAeGrads {
    pub fn zeros_like(params: &SeqAeParams) -> Self {
        SeqAeGrads {
            enc_fwd: params.enc_fwd.zeros_like(),
            enc_bwd: params.enc_bwd.zeros_like(),
            ic_readout: params.ic_readout.zeros_like(),
            gen_init: params.gen_init.zeros_like(),
            generator: params.generator.zeros_like(),
            factor_readout: Array2::zeros(params.factor_readout.dim()),
            emission_readout: params.emission_readout.zeros_like(),
            scale_k: params.zig.as_ref().map(|z| Array1::zeros(z.scale_k.len())),
            scale_alpha: params.zig.as_ref().map(|z| Array1::zeros(z.scale_alpha.len())),
        }
    }

    pub fn add_assign(&mut self, other: &SeqAeGrads) {
        fn add_gru(a: &mut GruWeights, b: &GruWeights) {
            a.w_r += &b.w_r;
            a.w_u += &b.w_u;
            a.w_c += &b.w_c;
            a.u_r += &b.u_r;
            a.u_u += &b.u_u;
            a.u_c += &b.u_c;
            a.b_r += &b.b_r;
            a.b_u += &b.b_u;
            a.b_c += &b.b_c;
        }
        add_gru(&mut self.enc_fwd, &other.enc_fwd);
        add_gru(&mut self.enc_bwd, &other.enc_bwd);
        self.ic_readout.w += &other.ic_readout.w;
        self.ic_readout.b += &other.ic_readout.b;
        self.gen_init.w += &other.gen_init.w;
        self.gen_init.b += &other.gen_init.b;
        add_gru(&mut self.generator, &other.generator);
        self.factor_readout += &other.factor_readout;
        self.emission_readout.w += &other.emission_readout.w;
        self.emission_readout.b += &other.emission_readout.b;
        if let (Some(a), Some(b)) = (&mut self.scale_k, &other.scale_k) {
            *a += b;
        }
        if let (Some(a), Some(b)) = (&mut self.scale_alpha, &other.scale_alpha) {
            *a += b;
        }
    }

    /// Same canonical flat layout as the parameters.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        super::flatten_gru(&self.enc_fwd, &mut out);
        super::flatten_gru(&self.enc_bwd, &mut out);
        super::flatten_affine(&self.ic_readout, &mut out);
        super::flatten_affine(&self.gen_init, &mut out);
        super::flatten_gru(&self.generator, &mut out);
        out.extend(self.factor_readout.iter());
        super::flatten_affine(&self.emission_readout, &mut out);
        if let Some(v) = &self.scale_k {
            out.extend(v.iter());
        }
        if let Some(v) = &self.scale_alpha {
            out.extend(v.iter());
        }
        out
    }
}

/// Stochastic draws for one chunk of trials. Each trial's draws come from
/// its own stream keyed by the trial's position in the minibatch, so the
/// result is independent of chunking.
struct ChunkDraws {
    input_dropout: Option<Array3<f64>>,
    factor_dropout: Option<Array3<f64>>,
    eps: Array2<f64>,
}

fn draw_chunk(
    hyper: &SeqAeHyper,
    n_in: usize,
    trial_offset: usize,
    b_len: usize,
    t_len: usize,
    base: &RngState,
    deterministic: bool,
) -> ChunkDraws {
    let z = hyper.dims.latent;
    let f = hyper.dims.factors;
    if deterministic {
        return ChunkDraws {
            input_dropout: None,
            factor_dropout: None,
            eps: Array2::zeros((b_len, z)),
        };
    }
    let keep_scale = 1.0 / (1.0 - hyper.dropout_rate);
    let mut input_dropout =
        (hyper.dropout_rate > 0.0).then(|| Array3::zeros((b_len, t_len, n_in)));
    let mut factor_dropout =
        (hyper.dropout_rate > 0.0).then(|| Array3::zeros((b_len, t_len, f)));
    let mut eps = Array2::zeros((b_len, z));
    for b in 0..b_len {
        let mut r = base.stream(1).stream((trial_offset + b) as u64).rng();
        if let Some(m) = input_dropout.as_mut() {
            for t in 0..t_len {
                for c in 0..n_in {
                    m[[b, t, c]] =
                        if r.gen::<f64>() < hyper.dropout_rate { 0.0 } else { keep_scale };
                }
            }
        }
        for zi in 0..z {
            eps[[b, zi]] = r.sample(StandardNormal);
        }
        if let Some(m) = factor_dropout.as_mut() {
            for t in 0..t_len {
                for c in 0..f {
                    m[[b, t, c]] =
                        if r.gen::<f64>() < hyper.dropout_rate { 0.0 } else { keep_scale };
                }
            }
        }
    }
    ChunkDraws { input_dropout, factor_dropout, eps }
}

/// Everything the backward pass needs from one chunk's forward pass.
struct ChunkCache {
    enc_x: Array3<f64>,
    enc_fwd_caches: Vec<GruStepCache>,
    enc_bwd_caches: Vec<GruStepCache>,
    ic_in: Array2<f64>,
    log_var_raw: Array2<f64>,
    mean: Array2<f64>,
    log_var: Array2<f64>,
    eps: Array2<f64>,
    z: Array2<f64>,
    gen_caches: Vec<GruStepCache>,
    gen_states: Array3<f64>,
    factors_dropped: Array3<f64>,
    factor_dropout: Option<Array3<f64>>,
    preact: Array3<f64>,
}

fn forward_chunk(
    params: &SeqAeParams,
    values: &ArrayView3<f64>,
    input_mask: &ArrayView3<bool>,
    mask_feature: bool,
    draws: &ChunkDraws,
) -> ChunkCache {
    let (b_len, t_len, n) = values.dim();
    let dims = params.dims;
    let n_in = if mask_feature { 2 * n } else { n };

    // encoder input: zero anything not in the input mask, optionally append
    // the mask itself, then apply input dropout
    let mut enc_x = Array3::zeros((b_len, t_len, n_in));
    for b in 0..b_len {
        for t in 0..t_len {
            for c in 0..n {
                let m = input_mask[[b, t, c]];
                enc_x[[b, t, c]] = if m { values[[b, t, c]] } else { 0.0 };
                if mask_feature {
                    enc_x[[b, t, n + c]] = f64::from(m);
                }
            }
        }
    }
    if let Some(drop) = &draws.input_dropout {
        enc_x *= drop;
    }

    // bidirectional encoder; only the final state of each direction is used
    let mut enc_fwd_caches = Vec::with_capacity(t_len);
    let mut h_f = Array2::zeros((b_len, dims.enc_hidden));
    for t in 0..t_len {
        let x_t = enc_x.slice(s![.., t, ..]);
        let (h_new, cache) = gru_step(&params.enc_fwd, &x_t, &h_f);
        enc_fwd_caches.push(cache);
        h_f = h_new;
    }
    let mut enc_bwd_caches = Vec::with_capacity(t_len);
    let mut h_b = Array2::zeros((b_len, dims.enc_hidden));
    for step in 0..t_len {
        let x_t = enc_x.slice(s![.., t_len - 1 - step, ..]);
        let (h_new, cache) = gru_step(&params.enc_bwd, &x_t, &h_b);
        enc_bwd_caches.push(cache);
        h_b = h_new;
    }

    let mut ic_in = Array2::zeros((b_len, 2 * dims.enc_hidden));
    ic_in.slice_mut(s![.., ..dims.enc_hidden]).assign(&h_f);
    ic_in.slice_mut(s![.., dims.enc_hidden..]).assign(&h_b);
    let ic_out = params.ic_readout.apply(&ic_in);
    let mean = ic_out.slice(s![.., ..dims.latent]).to_owned();
    let log_var_raw = ic_out.slice(s![.., dims.latent..]).to_owned();
    let log_var = log_var_raw.mapv(|v| v.clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP));

    let z = &mean + &(log_var.mapv(|v| (0.5 * v).exp()) * &draws.eps);

    // autonomous generator rollout from the z-derived initial state
    let mut gen_caches = Vec::with_capacity(t_len);
    let mut gen_states = Array3::zeros((b_len, t_len, dims.gen_hidden));
    let empty_x = Array2::<f64>::zeros((b_len, 0));
    let mut h_g = params.gen_init.apply(&z);
    for t in 0..t_len {
        let (h_new, cache) = gru_step(&params.generator, &empty_x.view(), &h_g);
        gen_caches.push(cache);
        gen_states.slice_mut(s![.., t, ..]).assign(&h_new);
        h_g = h_new;
    }

    // factors → (dropout) → emission pre-activations, batched over (b, t)
    let gen_mat = gen_states
        .to_shape((b_len * t_len, dims.gen_hidden))
        .expect("generator states are contiguous")
        .to_owned();
    let factors_mat = gen_mat.dot(&params.factor_readout.t());
    let mut factors_dropped = factors_mat
        .into_shape_with_order((b_len, t_len, dims.factors))
        .expect("factor reshape");
    if let Some(drop) = &draws.factor_dropout {
        factors_dropped *= drop;
    }
    let fd_mat = factors_dropped
        .to_shape((b_len * t_len, dims.factors))
        .expect("contiguous factors")
        .to_owned();
    let preact_mat = fd_mat.dot(&params.emission_readout.w.t()) + &params.emission_readout.b;
    let p_width = params.emission.preact_width(n);
    let preact = preact_mat.into_shape_with_order((b_len, t_len, p_width)).expect("preact reshape");

    ChunkCache {
        enc_x,
        enc_fwd_caches,
        enc_bwd_caches,
        ic_in,
        log_var_raw,
        mean,
        log_var,
        eps: draws.eps.clone(),
        z,
        gen_caches,
        gen_states,
        factors_dropped,
        factor_dropout: draws.factor_dropout.clone(),
        preact,
    }
}

/// Sum over trials of the per-trial KL to the standard-normal prior.
fn kl_sum(mean: &Array2<f64>, log_var: &Array2<f64>) -> f64 {
    mean.iter()
        .zip(log_var.iter())
        .map(|(&m, &lv)| 0.5 * (lv.exp() + m * m - 1.0 - lv))
        .sum()
}

/// Backward through one chunk. `d_preact` must already carry its final
/// scale (chunk observed count / total observed count folded in by the
/// caller); `kl_coeff` is ramp·kl_weight/total_trials.
fn backward_chunk(
    params: &SeqAeParams,
    cache: &ChunkCache,
    d_preact: &Array3<f64>,
    d_scale_k: Option<&Array1<f64>>,
    d_scale_alpha: Option<&Array1<f64>>,
    kl_coeff: f64,
    grads: &mut SeqAeGrads,
) {
    let (b_len, t_len, _) = cache.preact.dim();
    let dims = params.dims;
    let f = dims.factors;
    let g = dims.gen_hidden;
    let e = dims.enc_hidden;
    let z_dim = dims.latent;

    // emission readout
    let d_preact_mat = d_preact
        .to_shape((b_len * t_len, d_preact.dim().2))
        .expect("contiguous d_preact")
        .to_owned();
    let fd_mat = cache
        .factors_dropped
        .to_shape((b_len * t_len, f))
        .expect("contiguous factors")
        .to_owned();
    grads.emission_readout.w += &d_preact_mat.t().dot(&fd_mat);
    grads.emission_readout.b += &d_preact_mat.sum_axis(Axis(0));
    if let (Some(gk), Some(dk)) = (&mut grads.scale_k, d_scale_k) {
        *gk += dk;
    }
    if let (Some(ga), Some(da)) = (&mut grads.scale_alpha, d_scale_alpha) {
        *ga += da;
    }

    // factor readout (dropout gates the path back to the generator)
    let mut d_factors_mat = d_preact_mat.dot(&params.emission_readout.w);
    if let Some(drop) = &cache.factor_dropout {
        let drop_mat = drop.to_shape((b_len * t_len, f)).expect("contiguous dropout");
        d_factors_mat *= &drop_mat;
    }
    let gen_mat = cache
        .gen_states
        .to_shape((b_len * t_len, g))
        .expect("contiguous generator states")
        .to_owned();
    grads.factor_readout += &d_factors_mat.t().dot(&gen_mat);
    let d_gen_states = d_factors_mat
        .dot(&params.factor_readout)
        .into_shape_with_order((b_len, t_len, g))
        .expect("reshape d_gen");

    // generator BPTT, injecting the per-step factor gradient
    let empty_x = Array2::<f64>::zeros((b_len, 0));
    let mut d_h = Array2::<f64>::zeros((b_len, g));
    for t in (0..t_len).rev() {
        d_h += &d_gen_states.slice(s![.., t, ..]);
        d_h = gru_backward_step(
            &params.generator,
            &cache.gen_caches[t],
            &empty_x.view(),
            &d_h,
            &mut grads.generator,
        );
    }
    // d_h is now the gradient at the generator's initial state
    grads.gen_init.w += &d_h.t().dot(&cache.z);
    grads.gen_init.b += &d_h.sum_axis(Axis(0));
    let d_z = d_h.dot(&params.gen_init.w);

    // reparameterization: z = mean + exp(log_var/2)·eps
    let half_exp = cache.log_var.mapv(|v| (0.5 * v).exp());
    let mut d_mean = d_z.clone();
    let mut d_log_var = &d_z * &cache.eps * &half_exp * 0.5;
    // KL path
    if kl_coeff != 0.0 {
        d_mean += &(&cache.mean * kl_coeff);
        d_log_var += &cache.log_var.mapv(|lv| kl_coeff * 0.5 * (lv.exp() - 1.0));
    }
    // clamp gate on the raw log-variance
    ndarray::Zip::from(&mut d_log_var).and(&cache.log_var_raw).for_each(|dv, &raw| {
        if raw.abs() >= LOG_VAR_CLAMP {
            *dv = 0.0;
        }
    });

    let mut d_ic_out = Array2::<f64>::zeros((b_len, 2 * z_dim));
    d_ic_out.slice_mut(s![.., ..z_dim]).assign(&d_mean);
    d_ic_out.slice_mut(s![.., z_dim..]).assign(&d_log_var);
    grads.ic_readout.w += &d_ic_out.t().dot(&cache.ic_in);
    grads.ic_readout.b += &d_ic_out.sum_axis(Axis(0));
    let d_ic_in = d_ic_out.dot(&params.ic_readout.w);

    // encoder BPTT: gradient enters only at each direction's final state
    let mut d_hf = d_ic_in.slice(s![.., ..e]).to_owned();
    for t in (0..t_len).rev() {
        let x_t = cache.enc_x.slice(s![.., t, ..]);
        d_hf = gru_backward_step(&params.enc_fwd, &cache.enc_fwd_caches[t], &x_t, &d_hf, &mut grads.enc_fwd);
    }
    let mut d_hb = d_ic_in.slice(s![.., e..]).to_owned();
    for step in (0..t_len).rev() {
        let x_t = cache.enc_x.slice(s![.., t_len - 1 - step, ..]);
        d_hb = gru_backward_step(&params.enc_bwd, &cache.enc_bwd_caches[step], &x_t, &d_hb, &mut grads.enc_bwd);
    }
}

fn check_shapes(params: &SeqAeParams, hyper: &SeqAeHyper, batch: &TimeSeriesBatch) -> Result<()> {
    hyper.validate()?;
    if hyper.dims != params.dims {
        return Err(Error::shape(format!("hyper dims {:?} vs params dims {:?}", hyper.dims, params.dims)));
    }
    if hyper.emission != params.emission {
        return Err(Error::shape("hyper and params disagree on emission kind".to_string()));
    }
    if batch.n_channels() != params.dims.n_channels {
        return Err(Error::shape(format!(
            "batch has {} channels, model expects {}",
            batch.n_channels(),
            params.dims.n_channels
        )));
    }
    let want_in = hyper.enc_input_dim();
    if params.enc_fwd.input_dim() != want_in {
        return Err(Error::shape(format!(
            "encoder input width {} does not match mask_input_feature={} ({} expected)",
            params.enc_fwd.input_dim(),
            hyper.mask_input_feature,
            want_in
        )));
    }
    Ok(())
}

/// Splits the batch mask into (encoder input mask, loss mask). Without
/// coordinated dropout both are the batch's observation mask.
fn step_masks(
    batch: &TimeSeriesBatch,
    hyper: &SeqAeHyper,
    rng: &RngState,
) -> Result<(Array3<bool>, Array3<bool>)> {
    if hyper.cd_rate > 0.0 {
        coordinated_dropout_split(&batch.mask.view(), hyper.cd_rate, &rng.stream(0))
    } else {
        Ok((batch.mask.clone(), batch.mask.clone()))
    }
}

struct ChunkOutcome {
    recon_sum: f64,
    n_obs: usize,
    kl: f64,
    grads: Option<SeqAeGrads>,
}

/// Shared driver behind loss and backward. Runs chunks in parallel and
/// folds them in a fixed order.
fn run_chunks(
    params: &SeqAeParams,
    batch: &TimeSeriesBatch,
    hyper: &SeqAeHyper,
    rng: &RngState,
    epoch: usize,
    deterministic: bool,
    want_grads: bool,
) -> Result<(LossComponents, Option<SeqAeGrads>)> {
    check_shapes(params, hyper, batch)?;
    let (input_mask, loss_mask) = if deterministic {
        (batch.mask.clone(), batch.mask.clone())
    } else {
        step_masks(batch, hyper, rng)?
    };
    let n_trials = batch.n_trials();
    let t_len = batch.n_steps();
    let total_obs: usize = loss_mask.iter().filter(|&&m| m).count();
    let ramp = hyper.ramp(epoch);
    let kl_coeff_per_trial = ramp * hyper.kl_weight_ic / n_trials as f64;

    let chunk_starts: Vec<usize> = (0..n_trials).step_by(CHUNK_TRIALS).collect();
    let outcomes: Result<Vec<ChunkOutcome>> = chunk_starts
        .par_iter()
        .map(|&b0| {
            let b1 = (b0 + CHUNK_TRIALS).min(n_trials);
            let values = batch.values.slice(s![b0..b1, .., ..]);
            let in_mask = input_mask.slice(s![b0..b1, .., ..]);
            let lo_mask = loss_mask.slice(s![b0..b1, .., ..]);
            let draws = draw_chunk(
                hyper,
                hyper.enc_input_dim(),
                b0,
                b1 - b0,
                t_len,
                rng,
                deterministic,
            );
            let cache = forward_chunk(params, &values, &in_mask, hyper.mask_input_feature, &draws);
            let eval = emission_nll_grad(
                &params.emission,
                &cache.preact.view(),
                params.zig.as_ref(),
                &values,
                &lo_mask,
            )?;
            let chunk_obs = lo_mask.iter().filter(|&&m| m).count();
            let kl = kl_sum(&cache.mean, &cache.log_var);
            let grads = if want_grads {
                let mut grads = SeqAeGrads::zeros_like(params);
                // rescale the chunk-mean emission gradient to the
                // minibatch-mean convention
                let w = if total_obs > 0 { chunk_obs as f64 / total_obs as f64 } else { 0.0 };
                let d_preact = &eval.d_preact * w;
                let d_sk = eval.d_scale_k.as_ref().map(|v| v * w);
                let d_sa = eval.d_scale_alpha.as_ref().map(|v| v * w);
                backward_chunk(
                    params,
                    &cache,
                    &d_preact,
                    d_sk.as_ref(),
                    d_sa.as_ref(),
                    kl_coeff_per_trial,
                    &mut grads,
                );
                Some(grads)
            } else {
                None
            };
            Ok(ChunkOutcome { recon_sum: eval.nll * chunk_obs as f64, n_obs: chunk_obs, kl, grads })
        })
        .collect();
    let outcomes = outcomes?;

    let mut recon_sum = 0.0;
    let mut kl_total = 0.0;
    let mut grads = want_grads.then(|| SeqAeGrads::zeros_like(params));
    for out in &outcomes {
        recon_sum += out.recon_sum;
        kl_total += out.kl;
        if let (Some(acc), Some(g)) = (grads.as_mut(), out.grads.as_ref()) {
            acc.add_assign(g);
        }
    }
    debug_assert_eq!(outcomes.iter().map(|o| o.n_obs).sum::<usize>(), total_obs);

    let recon = if total_obs > 0 { recon_sum / total_obs as f64 } else { 0.0 };
    let kl_term = ramp * hyper.kl_weight_ic * kl_total / n_trials as f64;
    let gen_sq = params.generator.recurrent_sq_norm();
    let mut scale_pen = 0.0;
    if let Some(zig) = &params.zig {
        scale_pen = zig
            .scale_k
            .iter()
            .chain(zig.scale_alpha.iter())
            .map(|&v| {
                let d = v - hyper.scale_l2_prior;
                d * d
            })
            .sum();
    }
    let l2_term = ramp * (hyper.l2_generator * gen_sq + hyper.scale_l2_weight * scale_pen);

    if let Some(gr) = grads.as_mut() {
        let c = 2.0 * ramp * hyper.l2_generator;
        gr.generator.u_r += &(&params.generator.u_r * c);
        gr.generator.u_u += &(&params.generator.u_u * c);
        gr.generator.u_c += &(&params.generator.u_c * c);
        if let (Some(zig), Some(gk), Some(ga)) =
            (&params.zig, gr.scale_k.as_mut(), gr.scale_alpha.as_mut())
        {
            let cs = 2.0 * ramp * hyper.scale_l2_weight;
            *gk += &zig.scale_k.mapv(|v| cs * (v - hyper.scale_l2_prior));
            *ga += &zig.scale_alpha.mapv(|v| cs * (v - hyper.scale_l2_prior));
        }
    }

    let total = recon + kl_term + l2_term;
    if !total.is_finite() {
        return Err(Error::numeric(format!(
            "seqae loss is not finite (recon {recon}, kl {kl_term}, l2 {l2_term})"
        )));
    }
    Ok((LossComponents { total, recon, kl: kl_term, l2: l2_term }, grads))
}

/// Loss with one reparameterized sample per trial; pure in (params, batch,
/// hyper, rng, epoch), so a second call with the same arguments reproduces
/// the same draws and the same value.
pub fn seqae_loss(
    params: &SeqAeParams,
    batch: &TimeSeriesBatch,
    hyper: &SeqAeHyper,
    rng: &RngState,
    epoch: usize,
) -> Result<LossComponents> {
    run_chunks(params, batch, hyper, rng, epoch, false, false).map(|(l, _)| l)
}

/// Exact reverse-mode gradients of [`seqae_loss`], with the same stochastic
/// draws as the forward pass for the same `rng`.
pub fn seqae_backward(
    params: &SeqAeParams,
    batch: &TimeSeriesBatch,
    hyper: &SeqAeHyper,
    rng: &RngState,
    epoch: usize,
) -> Result<(LossComponents, SeqAeGrads)> {
    run_chunks(params, batch, hyper, rng, epoch, false, true)
        .map(|(l, g)| (l, g.expect("gradients requested")))
}

/// Deterministic validation loss: z = posterior mean, no dropout, no
/// coordinated dropout; reconstruction is evaluated on the batch's own
/// observation mask.
pub fn validation_loss(
    params: &SeqAeParams,
    batch: &TimeSeriesBatch,
    hyper: &SeqAeHyper,
    epoch: usize,
) -> Result<LossComponents> {
    run_chunks(params, batch, hyper, &RngState::new(0), epoch, true, false).map(|(l, _)| l)
}

/// Deterministic encoder pass on the zero-filled batch: the posterior over
/// initial conditions, one row per trial.
pub fn encode(params: &SeqAeParams, batch: &TimeSeriesBatch) -> Result<PosteriorIc> {
    if batch.n_channels() != params.dims.n_channels {
        return Err(Error::shape(format!(
            "batch has {} channels, model expects {}",
            batch.n_channels(),
            params.dims.n_channels
        )));
    }
    let mask_feature = params.enc_fwd.input_dim() == 2 * params.dims.n_channels;
    let draws = ChunkDraws {
        input_dropout: None,
        factor_dropout: None,
        eps: Array2::zeros((batch.n_trials(), params.dims.latent)),
    };
    let cache = forward_chunk(
        params,
        &batch.values.view(),
        &batch.mask.view(),
        mask_feature,
        &draws,
    );
    let post = PosteriorIc { mean: cache.mean, log_var: cache.log_var };
    if post.mean.iter().chain(post.log_var.iter()).any(|v| !v.is_finite()) {
        return Err(Error::numeric("encoder produced non-finite activations".to_string()));
    }
    Ok(post)
}

/// Rolls the generator from given initial conditions for `t_len` steps:
/// factors and emission pre-activations at every step, regardless of which
/// entries were ever observed.
pub fn generate(
    params: &SeqAeParams,
    z: &Array2<f64>,
    t_len: usize,
) -> Result<(Array3<f64>, Array3<f64>)> {
    if z.ncols() != params.dims.latent {
        return Err(Error::shape(format!(
            "z has {} columns for latent dimension {}",
            z.ncols(),
            params.dims.latent
        )));
    }
    if t_len == 0 {
        return Err(Error::numeric("t_len must be at least 1".to_string()));
    }
    let b_len = z.nrows();
    let dims = params.dims;
    let empty_x = Array2::<f64>::zeros((b_len, 0));
    let mut h_g = params.gen_init.apply(z);
    let mut gen_states = Array3::zeros((b_len, t_len, dims.gen_hidden));
    for t in 0..t_len {
        let (h_new, _) = gru_step(&params.generator, &empty_x.view(), &h_g);
        gen_states.slice_mut(s![.., t, ..]).assign(&h_new);
        h_g = h_new;
    }
    let gen_mat = gen_states
        .to_shape((b_len * t_len, dims.gen_hidden))
        .expect("contiguous")
        .to_owned();
    let factors_mat = gen_mat.dot(&params.factor_readout.t());
    let preact_mat = factors_mat.dot(&params.emission_readout.w.t()) + &params.emission_readout.b;
    let p_width = params.emission.preact_width(params.dims.n_channels);
    let factors = factors_mat.into_shape_with_order((b_len, t_len, dims.factors)).expect("reshape");
    let preact = preact_mat.into_shape_with_order((b_len, t_len, p_width)).expect("reshape");
    Ok((factors, preact))
}

/// Posterior-mean inference output on the batch's full time grid.
#[derive(Debug, Clone)]
pub struct InferenceOutput {
    /// Emission means, `[trials, time, channels]`; dense (no masked entries).
    pub rates: Array3<f64>,
    pub factors: Array3<f64>,
    pub ic: PosteriorIc,
}

/// Deterministic posterior-mean inference: encode, take z = mean, roll the
/// generator, and return emission means at every time step.
pub fn infer(params: &SeqAeParams, batch: &TimeSeriesBatch) -> Result<InferenceOutput> {
    let ic = encode(params, batch)?;
    let (factors, preact) = generate(params, &ic.mean, batch.n_steps())?;
    let rates = emission_mean(
        &params.emission,
        &preact.view(),
        params.zig.as_ref(),
        params.dims.n_channels,
    )?;
    Ok(InferenceOutput { rates, factors, ic })
}

/// Deterministic recon-NLL of a model on a batch; the metric logged per
/// epoch and used for checkpoint selection.
pub fn validation_recon_nll(
    params: &SeqAeParams,
    hyper: &SeqAeHyper,
    batch: &TimeSeriesBatch,
) -> Result<f64> {
    Ok(validation_loss(params, batch, hyper, 0)?.recon)
}
