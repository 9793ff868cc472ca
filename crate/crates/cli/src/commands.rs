//! Single-shot subcommands: dataset synthesis, masking, model training,
//! inference, and metric evaluation over stored tensors.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use ndarray::{Array1, Array2, Array3, Axis};

use sbtt_core::emissions::loc_from_events;
use sbtt_core::eval::{coherence, pseudo_r2, r2, EvalReport};
use sbtt_core::lds::{
    lds_forward, lds_simulate, masked_sse_loss, train_lds, LdsNoiseConfig, LdsParams,
    LdsTrainConfig, LdsTrial,
};
use sbtt_core::numerics::eigenvalue_distance;
use sbtt_core::rng::RngState;
use sbtt_core::sampling::{assign_phases, random_drop_mask, raster_mask, ScheduleKind};
use sbtt_core::seqae::{infer, load_checkpoint, save_checkpoint, train_seqae, TrainMode};
use sbtt_core::synth::{generate_calcium_dataset, generate_poisson_dataset};
use sbtt_core::tensorio::{
    load_batch, read_tensor, save_batch, write_tensor_f64, TensorPayload,
};

use crate::config::{ExperimentConfig, SynthKind};
use crate::csvout::{format_float, CsvTable};
use crate::manifest::RunManifest;

fn write_latents(dir: &Path, latents: &Array3<f64>) -> Result<()> {
    let (n, t, d) = latents.dim();
    let data: Vec<f64> = latents.iter().copied().collect();
    write_tensor_f64(dir, "latents", "latents", &[n, t, d], &data).map_err(|e| anyhow!("{e}"))
}

fn write_conditions(dir: &Path, ids: &[usize]) -> Result<()> {
    let data: Vec<f64> = ids.iter().map(|&c| c as f64).collect();
    write_tensor_f64(dir, "conditions", "condition_ids", &[ids.len()], &data)
        .map_err(|e| anyhow!("{e}"))
}

/// `synth lorenz-poisson | lorenz-calcium`: generate a dataset under `out`.
pub fn cmd_synth(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let synth = cfg.synth.as_ref().context("config needs a [synth] section")?;
    let lorenz = synth.lorenz.to_core(cfg.seed);
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    match synth.kind {
        SynthKind::LorenzPoisson => {
            let (batch, latents, ids) = generate_poisson_dataset(
                &lorenz,
                synth.n_neurons,
                synth.baseline_hz,
                synth.w_sd,
                synth.trials_per_condition,
            )
            .map_err(|e| anyhow!("{e}"))?;
            save_batch(&batch, &out.join("batch")).map_err(|e| anyhow!("{e}"))?;
            write_latents(out, &latents)?;
            write_conditions(out, &ids)?;
        }
        SynthKind::LorenzCalcium => {
            let calcium = synth.calcium.to_core();
            let ds = generate_calcium_dataset(
                &lorenz,
                &calcium,
                synth.n_neurons,
                synth.baseline_hz,
                synth.w_sd,
                synth.trials_per_condition,
            )
            .map_err(|e| anyhow!("{e}"))?;
            save_batch(&ds.staggered_events, &out.join("staggered")).map_err(|e| anyhow!("{e}"))?;
            save_batch(&ds.frame_events, &out.join("frame")).map_err(|e| anyhow!("{e}"))?;
            write_latents(out, &ds.latents)?;
            write_conditions(out, &ds.condition_ids)?;
            let (n, t, c) = ds.spikes.dim();
            let spikes: Vec<f64> = ds.spikes.iter().copied().collect();
            write_tensor_f64(out, "spikes", "spike_counts", &[n, t, c], &spikes)
                .map_err(|e| anyhow!("{e}"))?;
            let traces: Vec<f64> = ds.traces.iter().copied().collect();
            write_tensor_f64(out, "traces", "fluorescence", &[n, t, c], &traces)
                .map_err(|e| anyhow!("{e}"))?;
            let phases: Vec<f64> = ds.phases.iter().map(|&p| p as f64).collect();
            write_tensor_f64(out, "phases", "raster_phases", &[phases.len()], &phases)
                .map_err(|e| anyhow!("{e}"))?;
        }
    }
    RunManifest::new("synth", &cfg.canonical_string(), cfg.seed).save(out)?;
    println!("dataset written to {}", out.display());
    Ok(())
}

/// `mask`: apply the configured sampling schedule to a stored batch. The
/// result never marks an entry observed that the input marks missing.
pub fn cmd_mask(cfg: &ExperimentConfig, input: &Path, out: &Path) -> Result<()> {
    let sampling = cfg.sampling.as_ref().context("config needs a [sampling] section")?;
    let batch = load_batch(input).map_err(|e| anyhow!("{e}"))?;
    let (n, t, c) = batch.values.dim();
    let schedule_mask = match sampling.kind {
        ScheduleKind::Full => Array3::from_elem((n, t, c), true),
        ScheduleKind::RandomDrop => {
            random_drop_mask((n, t, c), sampling.drop_fraction, &RngState::new(cfg.seed))
                .map_err(|e| anyhow!("{e}"))?
        }
        ScheduleKind::RasterPhase => {
            let n_phases = sampling
                .n_phases
                .or(if sampling.phases.is_empty() { None } else { Some(sampling.phases.len()) })
                .context("raster_phase needs n_phases or a phases list")?;
            let phases = assign_phases(c, n_phases, &RngState::new(cfg.seed));
            let (mask2d, _) = raster_mask(c, t, &phases, n_phases, batch.bin_width)
                .map_err(|e| anyhow!("{e}"))?;
            let mut mask = Array3::from_elem((n, t, c), false);
            for trial in 0..n {
                mask.index_axis_mut(Axis(0), trial).assign(&mask2d);
            }
            mask
        }
    };
    let combined = &batch.mask & &schedule_mask;
    let masked = batch.with_mask(combined).map_err(|e| anyhow!("{e}"))?;
    save_batch(&masked, out).map_err(|e| anyhow!("{e}"))?;
    RunManifest::new("mask", &cfg.canonical_string(), cfg.seed).save(out)?;
    println!(
        "masked batch written to {} ({} of {} entries observed)",
        out.display(),
        masked.observed_count(),
        n * t * c
    );
    Ok(())
}

/// Block-rotation dynamics: pairs of dimensions rotate at multiples of the
/// base frequency, all at the given radius; an odd trailing dimension
/// decays at the radius.
fn block_rotation(d: usize, cycles_per_step: f64, radius: f64) -> Array2<f64> {
    let mut a = Array2::zeros((d, d));
    let mut i = 0;
    let mut block = 0;
    while i + 1 < d {
        let theta = 2.0 * std::f64::consts::PI * cycles_per_step * (block + 1) as f64;
        a[[i, i]] = radius * theta.cos();
        a[[i, i + 1]] = -radius * theta.sin();
        a[[i + 1, i]] = radius * theta.sin();
        a[[i + 1, i + 1]] = radius * theta.cos();
        i += 2;
        block += 1;
    }
    if i < d {
        a[[i, i]] = radius;
    }
    a
}

/// `train-lds`: simulate the configured linear system, mask it, fit by
/// SBTT gradient descent, and emit the loss history, learned parameters,
/// and oracle-relative metrics.
pub fn cmd_train_lds(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let model = cfg.model.as_ref().context("config needs a [model] section")?;
    let section = model.lds.clone().context("config needs [model.lds]")?;
    let root = RngState::new(cfg.seed);

    let a_true = block_rotation(section.latent_dim, section.rotation_cycles_per_step, section.dynamics_radius);
    let mut h_rng = root.stream(1).rng();
    use rand::Rng;
    let h_true = Array2::from_shape_simple_fn((section.obs_dim, section.latent_dim), || {
        h_rng.gen::<f64>() * 2.0 - 1.0
    });
    let truth = LdsParams::new(a_true, h_true).map_err(|e| anyhow!("{e}"))?;
    let noise = LdsNoiseConfig {
        process_sd: section.process_sd,
        observation_sd: section.observation_sd,
    };

    let mut trials = Vec::with_capacity(section.n_trials);
    for i in 0..section.n_trials {
        let mut r = root.stream(10 + i as u64).rng();
        let x0 = Array1::from_shape_simple_fn(section.latent_dim, || r.gen::<f64>() * 2.0 - 1.0);
        let (_, obs) = lds_simulate(&truth, &noise, &x0, section.t_len, &root.stream(1000 + i as u64))
            .map_err(|e| anyhow!("{e}"))?;
        let mask = random_drop_mask(
            (1, section.t_len, section.obs_dim),
            section.drop_fraction,
            &root.stream(5000 + i as u64),
        )
        .map_err(|e| anyhow!("{e}"))?
        .index_axis(Axis(0), 0)
        .to_owned();
        trials.push(LdsTrial { x0, values: obs, mask });
    }
    let n_holdout = ((section.n_trials as f64) * section.holdout_fraction).round() as usize;
    let (holdout, training) = trials.split_at(n_holdout);

    let init = {
        let mut r = root.stream(2).rng();
        let a = Array2::eye(section.latent_dim) * 0.9;
        let h = Array2::from_shape_simple_fn((section.obs_dim, section.latent_dim), || {
            0.1 * (r.gen::<f64>() - 0.5)
        });
        LdsParams::new(a, h).map_err(|e| anyhow!("{e}"))?
    };
    let train_cfg = LdsTrainConfig {
        lr: section.lr,
        epochs: section.epochs,
        estimate_x0: section.estimate_x0,
    };
    let result = train_lds(training, &init, &train_cfg).map_err(|e| anyhow!("{e}"))?;

    // oracle-relative held-out loss and eigenvalue recovery
    let mse_of = |params: &LdsParams| -> f64 {
        holdout
            .iter()
            .map(|trial| {
                let (_, outputs) = lds_forward(params, &trial.x0, trial.values.nrows());
                masked_sse_loss(&outputs, &trial.values, &trial.mask)
            })
            .sum::<f64>()
            / holdout.len().max(1) as f64
    };
    let mse_learned = mse_of(&result.params);
    let mse_oracle = mse_of(&truth);
    let eig_true = truth.dynamics_eigenvalues().map_err(|e| anyhow!("{e}"))?;
    let eig_learned = result.params.dynamics_eigenvalues().map_err(|e| anyhow!("{e}"))?;
    let eig_dist = eigenvalue_distance(&eig_true, &eig_learned);

    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut loss_csv = CsvTable::new(&["epoch", "loss"]);
    for (epoch, loss) in result.loss_history.iter().enumerate() {
        loss_csv.push_row(vec![epoch.to_string(), format_float(*loss)]);
    }
    loss_csv.write(&out.join("loss_history.csv"))?;
    let a_data: Vec<f64> = result.params.a.iter().copied().collect();
    write_tensor_f64(out, "a", "lds_dynamics", &[section.latent_dim, section.latent_dim], &a_data)
        .map_err(|e| anyhow!("{e}"))?;
    let h_data: Vec<f64> = result.params.h.iter().copied().collect();
    write_tensor_f64(out, "h", "lds_observation", &[section.obs_dim, section.latent_dim], &h_data)
        .map_err(|e| anyhow!("{e}"))?;

    let mut manifest = RunManifest::new("train-lds", &cfg.canonical_string(), cfg.seed);
    manifest.metrics.insert("holdout_mse_learned".to_string(), mse_learned);
    manifest.metrics.insert("holdout_mse_oracle".to_string(), mse_oracle);
    manifest.metrics.insert("eigenvalue_distance".to_string(), eig_dist);
    manifest.metrics.insert("final_loss".to_string(), *result.loss_history.last().unwrap());
    manifest.save(out)?;
    println!(
        "learned LDS written to {} (holdout mse {:.6} vs oracle {:.6}, eig distance {:.4})",
        out.display(),
        mse_learned,
        mse_oracle,
        eig_dist
    );
    Ok(())
}

fn loc_fallback(cfg: &ExperimentConfig) -> f64 {
    cfg.synth.as_ref().map_or(0.1, |s| s.calcium.s_min)
}

/// `train-seqae`: train on a stored batch and write a checkpoint plus the
/// per-epoch training log.
pub fn cmd_train_seqae(cfg: &ExperimentConfig, data: &Path, out: &Path) -> Result<()> {
    let model = cfg.model.as_ref().context("config needs a [model] section")?;
    let section = model.seqae.as_ref().context("config needs [model.seqae]")?;
    let batch = load_batch(data).map_err(|e| anyhow!("{e}"))?;
    let hyper = section.to_hyper(batch.n_channels(), cfg.seed)?;

    let init = match hyper.emission {
        sbtt_core::emissions::EmissionKind::Zig => {
            let loc = loc_from_events(&batch.values.view(), &batch.mask.view(), loc_fallback(cfg));
            Some(
                sbtt_core::seqae::SeqAeParams::init(
                    hyper.dims,
                    hyper.emission,
                    Some(loc),
                    hyper.mask_input_feature,
                    &RngState::new(hyper.seed).stream(1),
                )
                .map_err(|e| anyhow!("{e}"))?,
            )
        }
        _ => None,
    };
    let trained =
        train_seqae(&batch, init, &hyper, TrainMode::Fresh).map_err(|e| anyhow!("{e}"))?;
    if trained.diverged {
        bail!("training diverged; rerun with a lower learning rate");
    }
    save_training_outputs(&trained, &hyper, cfg, out, "train-seqae")
}

/// `retrain-encoder`: adapt a checkpoint's encoders to a sparser batch;
/// every non-encoder weight stays bit-identical.
pub fn cmd_retrain_encoder(
    cfg: &ExperimentConfig,
    from: &Path,
    data: &Path,
    out: &Path,
) -> Result<()> {
    let (params, ckpt_hyper) = load_checkpoint(from).map_err(|e| anyhow!("{e}"))?;
    let batch = load_batch(data).map_err(|e| anyhow!("{e}"))?;
    if batch.n_channels() != params.dims.n_channels {
        bail!(
            "batch has {} channels, checkpoint expects {}",
            batch.n_channels(),
            params.dims.n_channels
        );
    }
    // model shape comes from the checkpoint; training settings from the config
    let mut hyper = ckpt_hyper;
    if let Some(model) = &cfg.model {
        if let Some(section) = &model.seqae {
            hyper.lr = section.lr;
            hyper.epochs = section.epochs;
            hyper.batch_size = section.batch_size;
            hyper.dropout_rate = section.dropout_rate;
            hyper.cd_rate = section.cd_rate;
            hyper.max_grad_norm = section.max_grad_norm;
        }
    }
    hyper.seed = cfg.seed;
    hyper.ramp_epochs = 0;
    let trained = train_seqae(&batch, Some(params), &hyper, TrainMode::RetrainEncoder)
        .map_err(|e| anyhow!("{e}"))?;
    if trained.diverged {
        bail!("encoder retraining diverged");
    }
    save_training_outputs(&trained, &hyper, cfg, out, "retrain-encoder")
}

fn save_training_outputs(
    trained: &sbtt_core::seqae::TrainOutput,
    hyper: &sbtt_core::seqae::SeqAeHyper,
    cfg: &ExperimentConfig,
    out: &Path,
    command: &str,
) -> Result<()> {
    save_checkpoint(&trained.params, hyper, &out.join("checkpoint")).map_err(|e| anyhow!("{e}"))?;
    let mut log_csv =
        CsvTable::new(&["epoch", "train_total", "train_recon", "val_recon", "smoothed_val"]);
    for row in &trained.log {
        log_csv.push_row(vec![
            row.epoch.to_string(),
            format_float(row.train_total),
            format_float(row.train_recon),
            format_float(row.val_recon),
            format_float(row.smoothed_val),
        ]);
    }
    log_csv.write(&out.join("training_log.csv"))?;
    let mut manifest = RunManifest::new(command, &cfg.canonical_string(), cfg.seed);
    if let Some(last) = trained.log.last() {
        manifest.metrics.insert("final_val_recon".to_string(), last.val_recon);
    }
    manifest
        .metrics
        .insert("best_epoch".to_string(), trained.best_epoch.map_or(-1.0, |e| e as f64));
    manifest.save(out)?;
    println!("checkpoint written to {}", out.join("checkpoint").display());
    Ok(())
}

/// `infer`: posterior-mean rates and factors for a stored batch.
pub fn cmd_infer(ckpt: &Path, data: &Path, out: &Path) -> Result<()> {
    let (params, _) = load_checkpoint(ckpt).map_err(|e| anyhow!("{e}"))?;
    let batch = load_batch(data).map_err(|e| anyhow!("{e}"))?;
    let output = infer(&params, &batch).map_err(|e| anyhow!("{e}"))?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let (n, t, c) = output.rates.dim();
    let rates: Vec<f64> = output.rates.iter().copied().collect();
    write_tensor_f64(out, "rates", "inferred_rates", &[n, t, c], &rates)
        .map_err(|e| anyhow!("{e}"))?;
    let (_, _, f) = output.factors.dim();
    let factors: Vec<f64> = output.factors.iter().copied().collect();
    write_tensor_f64(out, "factors", "inferred_factors", &[n, t, f], &factors)
        .map_err(|e| anyhow!("{e}"))?;
    let ic: Vec<f64> = output.ic.mean.iter().copied().collect();
    write_tensor_f64(out, "ic_mean", "initial_condition_mean", &[n, output.ic.mean.ncols()], &ic)
        .map_err(|e| anyhow!("{e}"))?;
    println!("inference written to {}", out.display());
    Ok(())
}

fn read_tensor_3d(path: &Path) -> Result<Array3<f64>> {
    let dir = path.parent().context("tensor path needs a directory")?;
    let name = path
        .file_name()
        .and_then(|s| s.to_str())
        .context("tensor path needs a file name")?;
    let (manifest, payload) = read_tensor(dir, name).map_err(|e| anyhow!("{e}"))?;
    let data = match payload {
        TensorPayload::F64(v) => v,
        TensorPayload::F32(v) => v.into_iter().map(f64::from).collect(),
        TensorPayload::U8(v) => v.into_iter().map(f64::from).collect(),
    };
    match manifest.dims.len() {
        3 => Ok(Array3::from_shape_vec(
            (manifest.dims[0], manifest.dims[1], manifest.dims[2]),
            data,
        )?),
        2 => Ok(Array3::from_shape_vec((1, manifest.dims[0], manifest.dims[1]), data)?),
        d => bail!("tensor {name} must be 2-d or 3-d, got {d} dims"),
    }
}

/// `eval`: metric tables between a prediction tensor and a truth tensor.
/// Metrics: r2 (per final-axis dimension over flattened samples), pr2
/// (per unit, prediction read as Poisson rates), coherence (averaged over
/// trials and units).
pub fn cmd_eval(cfg: &ExperimentConfig, pred: &Path, truth: &Path, metrics: &str, out: &Path) -> Result<()> {
    let eval_cfg = cfg.eval.clone().unwrap_or_default();
    let pred_t = read_tensor_3d(pred)?;
    let truth_t = read_tensor_3d(truth)?;
    if pred_t.dim() != truth_t.dim() {
        bail!("pred {:?} and truth {:?} shapes differ", pred_t.dim(), truth_t.dim());
    }
    let (n_trials, t_len, n_ch) = pred_t.dim();
    let mut report = EvalReport::default();
    let parent = out.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(parent).ok();

    for metric in metrics.split(',').map(str::trim).filter(|m| !m.is_empty()) {
        match metric {
            "r2" => {
                let p = crate::experiments::flatten_samples(&pred_t);
                let t = crate::experiments::flatten_samples(&truth_t);
                let score = r2(&t, &p);
                let mut csv = CsvTable::new(&["dim", "r2"]);
                for (d, v) in score.per_dim.iter().enumerate() {
                    csv.push_row(vec![d.to_string(), format_float(*v)]);
                }
                csv.write(&parent.join("r2.csv"))?;
                report.r2_per_dim = Some(score.per_dim.clone());
                report.r2_mean = Some(score.mean);
            }
            "pr2" => {
                let mut per_unit = Vec::with_capacity(n_ch);
                for ch in 0..n_ch {
                    let counts = Array1::from_iter(
                        (0..n_trials).flat_map(|b| (0..t_len).map(move |t| (b, t))).map(|(b, t)| truth_t[[b, t, ch]]),
                    );
                    let rates = Array1::from_iter(
                        (0..n_trials).flat_map(|b| (0..t_len).map(move |t| (b, t))).map(|(b, t)| pred_t[[b, t, ch]]),
                    );
                    let null = counts.sum() / counts.len() as f64;
                    per_unit.push(pseudo_r2(&counts, &rates, null).unwrap_or(f64::NAN));
                }
                let mut csv = CsvTable::new(&["unit", "pseudo_r2"]);
                for (u, v) in per_unit.iter().enumerate() {
                    csv.push_row(vec![u.to_string(), format_float(*v)]);
                }
                csv.write(&parent.join("pr2.csv"))?;
                report.pseudo_r2_per_unit = Some(per_unit);
            }
            "coherence" => {
                let sample_rate = eval_cfg.sample_rate;
                let mut mean_coh: Option<Vec<f64>> = None;
                let mut freqs_out: Vec<f64> = Vec::new();
                let mut count = 0usize;
                for b in 0..n_trials {
                    for ch in 0..n_ch {
                        let x: Vec<f64> = (0..t_len).map(|t| truth_t[[b, t, ch]]).collect();
                        let y: Vec<f64> = (0..t_len).map(|t| pred_t[[b, t, ch]]).collect();
                        let (freqs, coh) = coherence(
                            &x,
                            &y,
                            eval_cfg.coherence_window,
                            eval_cfg.coherence_overlap,
                            sample_rate,
                            eval_cfg.nfft,
                        )
                        .map_err(|e| anyhow!("{e}"))?;
                        freqs_out = freqs;
                        match &mut mean_coh {
                            None => mean_coh = Some(coh),
                            Some(acc) => {
                                for (a, c) in acc.iter_mut().zip(coh.iter()) {
                                    *a += c;
                                }
                            }
                        }
                        count += 1;
                    }
                }
                let mut coh = mean_coh.context("no coherence computed")?;
                for v in &mut coh {
                    *v /= count as f64;
                }
                let mut csv = CsvTable::new(&["frequency", "coherence"]);
                for (f, c) in freqs_out.iter().zip(coh.iter()) {
                    csv.push_row(vec![format_float(*f), format_float(*c)]);
                }
                csv.write(&parent.join("coherence.csv"))?;
                report.coherence_freqs = Some(freqs_out);
                report.coherence = Some(coh);
            }
            other => bail!("unknown metric {other:?} (expected r2, pr2, coherence)"),
        }
    }
    let text = serde_json::to_string_pretty(&report)?;
    std::fs::write(out, text).with_context(|| format!("writing {}", out.display()))?;
    println!("report written to {}", out.display());
    Ok(())
}
