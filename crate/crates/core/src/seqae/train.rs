//! Minibatch training loop: Adam updates, 80/20 train/validation split,
//! exponentially smoothed validation NLL for checkpoint selection, and an
//! encoder-only retraining mode that adapts a full-data model to sparser
//! observations while its dynamics stay frozen.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::model::{seqae_backward, validation_recon_nll, SeqAeGrads};
use super::{SeqAeHyper, SeqAeParams};
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensorio::{read_tensor, write_tensor_f64, TensorPayload, TimeSeriesBatch};

/// Smoothing factor for the validation NLL used in checkpoint selection.
const VAL_SMOOTHING: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Train every parameter from the given (or fresh) initialization.
    Fresh,
    /// Update only the encoder directions and the ic readout; generator,
    /// factor readout, emission readout, and emission scales stay frozen.
    RetrainEncoder,
}

/// One row of the per-epoch training log.
#[derive(Debug, Clone, Serialize)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub train_total: f64,
    pub train_recon: f64,
    pub val_recon: f64,
    pub smoothed_val: f64,
    pub is_best: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    /// Parameters at the best smoothed validation NLL.
    pub params: SeqAeParams,
    /// Epoch of the best checkpoint; None when the initial parameters were
    /// never improved upon.
    pub best_epoch: Option<usize>,
    pub log: Vec<TrainLogRow>,
    /// True when training stopped early on a non-finite loss; `params`
    /// still holds the last good checkpoint.
    pub diverged: bool,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: usize,
    lr: f64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize, lr: f64) -> Self {
        Adam { m: vec![0.0; n], v: vec![0.0; n], t: 0, lr }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], update_mask: Option<&[bool]>) {
        self.t += 1;
        let b1t = 1.0 - Self::BETA1.powi(self.t as i32);
        let b2t = 1.0 - Self::BETA2.powi(self.t as i32);
        for i in 0..params.len() {
            if let Some(mask) = update_mask {
                if !mask[i] {
                    continue;
                }
            }
            let g = grads[i];
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * g;
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * g * g;
            let m_hat = self.m[i] / b1t;
            let v_hat = self.v[i] / b2t;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + Self::EPS);
        }
    }
}

fn clip_grads(flat: &mut [f64], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = flat.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in flat.iter_mut() {
            *g *= scale;
        }
    }
}

/// 80/20 train/validation split of trial indices, shuffled deterministically.
pub fn train_val_split(n_trials: usize, rng: &RngState) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n_trials).collect();
    let mut r = rng.rng();
    idx.shuffle(&mut r);
    let n_val = (n_trials / 5).max(usize::from(n_trials >= 2));
    let val = idx[..n_val].to_vec();
    let train = idx[n_val..].to_vec();
    (train, val)
}

/// Trains the autoencoder on `batch`. `init` must be provided in
/// [`TrainMode::RetrainEncoder`]; in fresh mode a random initialization is
/// drawn from the hyperparameter seed when `init` is None.
pub fn train_seqae(
    batch: &TimeSeriesBatch,
    init: Option<SeqAeParams>,
    hyper: &SeqAeHyper,
    mode: TrainMode,
) -> Result<TrainOutput> {
    hyper.validate()?;
    if hyper.lr < 0.0 {
        return Err(Error::numeric(format!("learning rate must be non-negative, got {}", hyper.lr)));
    }
    let root = RngState::new(hyper.seed);
    let mut params = match (init, mode) {
        (Some(p), _) => p,
        (None, TrainMode::RetrainEncoder) => {
            return Err(Error::numeric(
                "retrain_encoder mode requires initial parameters".to_string(),
            ));
        }
        (None, TrainMode::Fresh) => {
            let mut p = SeqAeParams::init(
                hyper.dims,
                hyper.emission,
                None,
                hyper.mask_input_feature,
                &root.stream(1),
            )?;
            p.init_output_bias_from(batch);
            p
        }
    };

    let (train_idx, val_idx) = train_val_split(batch.n_trials(), &root.stream(2));
    let train_batch = batch.select_trials(&train_idx)?;
    let val_batch = if val_idx.is_empty() {
        train_batch.clone()
    } else {
        batch.select_trials(&val_idx)?
    };

    let update_mask = match mode {
        TrainMode::Fresh => None,
        TrainMode::RetrainEncoder => Some(params.encoder_flat_mask()),
    };
    let scale_range = zig_scale_range(&params);

    let mut flat = params.to_flat();
    let mut adam = Adam::new(flat.len(), hyper.lr);

    let init_val = validation_recon_nll(&params, hyper, &val_batch)?;
    let mut smoothed = init_val;
    let mut best_smoothed = init_val;
    let mut best_params = params.clone();
    let mut best_epoch: Option<usize> = None;
    let mut log = Vec::with_capacity(hyper.epochs);
    let mut diverged = false;

    'epochs: for epoch in 0..hyper.epochs {
        let mut order = train_idx.clone();
        {
            let mut r = root.stream(3).stream(epoch as u64).rng();
            order.shuffle(&mut r);
        }
        // map shuffled original indices to rows of train_batch
        let pos_of: std::collections::HashMap<usize, usize> =
            train_idx.iter().enumerate().map(|(row, &orig)| (orig, row)).collect();

        let mut epoch_total = 0.0;
        let mut epoch_recon = 0.0;
        let mut n_steps = 0usize;
        for (step, mb) in order.chunks(hyper.batch_size).enumerate() {
            let rows: Vec<usize> = mb.iter().map(|orig| pos_of[orig]).collect();
            let sub = train_batch.select_trials(&rows)?;
            let step_rng = root.stream(4).stream(epoch as u64).stream(step as u64);
            let outcome = seqae_backward(&params, &sub, hyper, &step_rng, epoch);
            let (loss, grads): (_, SeqAeGrads) = match outcome {
                Ok(ok) => ok,
                Err(Error::Numeric(_)) => {
                    diverged = true;
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            epoch_total += loss.total;
            epoch_recon += loss.recon;
            n_steps += 1;

            let mut grad_flat = grads.to_flat();
            clip_grads(&mut grad_flat, hyper.max_grad_norm);
            adam.step(&mut flat, &grad_flat, update_mask.as_deref());
            if let Some(range) = &scale_range {
                for v in &mut flat[range.clone()] {
                    *v = v.max(1e-6);
                }
            }
            params = params.from_flat(&flat);
        }

        let val_recon = match validation_recon_nll(&params, hyper, &val_batch) {
            Ok(v) if v.is_finite() => v,
            Ok(_) | Err(Error::Numeric(_)) => {
                diverged = true;
                break;
            }
            Err(e) => return Err(e),
        };
        smoothed = VAL_SMOOTHING * smoothed + (1.0 - VAL_SMOOTHING) * val_recon;
        let is_best = smoothed < best_smoothed;
        if is_best {
            best_smoothed = smoothed;
            best_params = params.clone();
            best_epoch = Some(epoch);
        }
        log.push(TrainLogRow {
            epoch,
            train_total: epoch_total / n_steps.max(1) as f64,
            train_recon: epoch_recon / n_steps.max(1) as f64,
            val_recon,
            smoothed_val: smoothed,
            is_best,
        });
    }

    Ok(TrainOutput { params: best_params, best_epoch, log, diverged })
}

fn zig_scale_range(params: &SeqAeParams) -> Option<std::ops::Range<usize>> {
    params.zig.as_ref().map(|z| {
        let total = params.n_params();
        total - z.scale_k.len() - z.scale_alpha.len()..total
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    hyper: SeqAeHyper,
    zig_loc: Option<Vec<f64>>,
}

/// Writes a checkpoint directory: the flat parameter vector as a tensor
/// pair plus `model.json` holding dims and hyperparameters.
pub fn save_checkpoint(params: &SeqAeParams, hyper: &SeqAeHyper, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let flat = params.to_flat();
    write_tensor_f64(dir, "params", "seqae_params", &[flat.len()], &flat)?;
    let meta = CheckpointMeta {
        hyper: hyper.clone(),
        zig_loc: params.zig.as_ref().map(|z| z.loc.to_vec()),
    };
    let path = dir.join("model.json");
    let text = serde_json::to_string_pretty(&meta)
        .map_err(|e| Error::format(format!("model.json: {e}")))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(SeqAeParams, SeqAeHyper)> {
    let path = dir.join("model.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: CheckpointMeta =
        serde_json::from_str(&text).map_err(|e| Error::format(format!("model.json: {e}")))?;
    let (_, payload) = read_tensor(dir, "params")?;
    let flat = match payload {
        TensorPayload::F64(v) => v,
        _ => return Err(Error::format("checkpoint params must be f64".to_string())),
    };
    let skeleton = SeqAeParams::init(
        meta.hyper.dims,
        meta.hyper.emission,
        meta.zig_loc.clone().map(ndarray::Array1::from_vec),
        meta.hyper.mask_input_feature,
        &RngState::new(0),
    )?;
    if flat.len() != skeleton.n_params() {
        return Err(Error::format(format!(
            "checkpoint has {} parameters, model expects {}",
            flat.len(),
            skeleton.n_params()
        )));
    }
    Ok((skeleton.from_flat(&flat), meta.hyper))
}
