//! The three desk-scale experiment sweeps: random-drop robustness,
//! staggered-sampling super-resolution, and encoder retraining. Each sweep
//! writes one directory per cell (`checkpoint`, `metrics.csv`,
//! `manifest.json`) plus combined `metrics.csv` and `timing.csv` tables.
//! Completed cells are recognized by their manifest and skipped on rerun.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use ndarray::{s, Array2, Array3, Axis};

use sbtt_core::emissions::{loc_from_events, EmissionKind};
use sbtt_core::eval::{gaussian_smooth, psd_peak_hz, resample_linear_3d, ridge_cv, welch_psd};
use sbtt_core::rng::RngState;
use sbtt_core::sampling::random_drop_mask;
use sbtt_core::seqae::{
    infer, load_checkpoint, save_checkpoint, train_seqae, train_val_split, SeqAeHyper,
    SeqAeParams, TrainMode, TrainOutput,
};
use sbtt_core::synth::generate_poisson_dataset;
use sbtt_core::tensorio::TimeSeriesBatch;

use crate::config::ExperimentConfig;
use crate::csvout::{format_float, CsvTable};
use crate::manifest::RunManifest;

/// Flattens `[trials, time, features]` onto `[trials·time, features]`.
pub fn flatten_samples(x: &Array3<f64>) -> Array2<f64> {
    let (n, t, f) = x.dim();
    x.to_shape((n * t, f)).expect("contiguous").to_owned()
}

/// Held-out R² of a ridge mapping from model outputs to ground-truth
/// latents, both given per trial.
pub fn ridge_map_r2(outputs: &Array3<f64>, latents: &Array3<f64>, lambdas: &[f64]) -> Result<f64> {
    let x = flatten_samples(outputs);
    let y = flatten_samples(latents);
    let cv = ridge_cv(&x, &y, lambdas).map_err(|e| anyhow!("ridge mapping failed: {e}"))?;
    Ok(cv.heldout_r2)
}

fn select_rows(latents: &Array3<f64>, idx: &[usize]) -> Array3<f64> {
    let (_, t, d) = latents.dim();
    let mut out = Array3::zeros((idx.len(), t, d));
    for (row, &i) in idx.iter().enumerate() {
        out.index_axis_mut(Axis(0), row).assign(&latents.index_axis(Axis(0), i));
    }
    out
}

/// The validation trial set a training run with this hyper seed will hold
/// out; experiments evaluate on exactly these trials.
pub fn validation_trials(n_trials: usize, hyper: &SeqAeHyper) -> Vec<usize> {
    let root = RngState::new(hyper.seed);
    let (_, val) = train_val_split(n_trials, &root.stream(2));
    val
}

pub struct PoissonBenchmark {
    pub batch: TimeSeriesBatch,
    pub latents: Array3<f64>,
    pub condition_ids: Vec<usize>,
}

/// Lorenz-driven Poisson spiking benchmark from the config's synth section.
pub fn build_poisson_benchmark(cfg: &ExperimentConfig) -> Result<PoissonBenchmark> {
    let synth = cfg.synth.as_ref().context("config needs a [synth] section")?;
    let lorenz = synth.lorenz.to_core(cfg.seed);
    let (batch, latents, condition_ids) = generate_poisson_dataset(
        &lorenz,
        synth.n_neurons,
        synth.baseline_hz,
        synth.w_sd,
        synth.trials_per_condition,
    )
    .map_err(|e| anyhow!("synthesizing benchmark: {e}"))?;
    Ok(PoissonBenchmark { batch, latents, condition_ids })
}

fn seqae_hyper(cfg: &ExperimentConfig, n_channels: usize) -> Result<SeqAeHyper> {
    let model = cfg.model.as_ref().context("config needs a [model] section")?;
    let section = model.seqae.as_ref().context("config needs a [model.seqae] section")?;
    section.to_hyper(n_channels, cfg.seed)
}

fn train_fresh(batch: &TimeSeriesBatch, hyper: &SeqAeHyper) -> Result<TrainOutput> {
    let out = train_seqae(batch, None, hyper, TrainMode::Fresh)
        .map_err(|e| anyhow!("training failed: {e}"))?;
    if out.diverged {
        bail!("training diverged; last good checkpoint retained");
    }
    Ok(out)
}

/// One drop-sweep cell result.
#[derive(Debug, Clone)]
pub struct DropCell {
    pub fraction: f64,
    pub r2: f64,
    pub recon_nll: f64,
    pub runtime_s: f64,
}

/// Random-drop robustness sweep: for each fraction, mask the benchmark,
/// train the autoencoder with SBTT, ridge-map inferred factors of the
/// held-out trials onto the true latents, and record R² and the validation
/// reconstruction NLL.
pub fn run_drop_sweep(cfg: &ExperimentConfig, out_root: &Path) -> Result<Vec<DropCell>> {
    let sweep = cfg.sweep.clone().unwrap_or_default();
    let eval = cfg.eval.clone().unwrap_or_default();
    let canonical = cfg.canonical_string();
    let bench = build_poisson_benchmark(cfg)?;
    let (n_trials, t_len, n_channels) = bench.batch.values.dim();
    let hyper = seqae_hyper(cfg, n_channels)?;
    let val_idx = validation_trials(n_trials, &hyper);
    let latents_val = select_rows(&bench.latents, &val_idx);

    let mut cells = Vec::new();
    for (i, &fraction) in sweep.drop_fractions.iter().enumerate() {
        let cell_dir = out_root.join(format!("drop-{fraction:.2}"));
        if let Some(m) = RunManifest::matches_completed(&cell_dir, "sweep-drop", &canonical, cfg.seed) {
            eprintln!("cell {} already complete, skipping", cell_dir.display());
            cells.push(DropCell {
                fraction,
                r2: m.metrics["r2"],
                recon_nll: m.metrics["recon_nll"],
                runtime_s: m.runtime_s,
            });
            continue;
        }
        let start = Instant::now();
        let mask = random_drop_mask(
            (n_trials, t_len, n_channels),
            fraction,
            &RngState::new(cfg.seed).stream(1000 + i as u64),
        )
        .map_err(|e| anyhow!("{e}"))?;
        let masked = bench.batch.with_mask(mask).map_err(|e| anyhow!("{e}"))?;
        let trained = train_fresh(&masked, &hyper)?;
        let val_batch = masked.select_trials(&val_idx).map_err(|e| anyhow!("{e}"))?;
        let inferred = infer(&trained.params, &val_batch).map_err(|e| anyhow!("{e}"))?;
        let r2 = ridge_map_r2(&inferred.factors, &latents_val, &eval.lambda_grid())?;
        let recon_nll =
            sbtt_core::seqae::validation_recon_nll(&trained.params, &hyper, &val_batch)
                .map_err(|e| anyhow!("{e}"))?;
        let runtime_s = start.elapsed().as_secs_f64();

        save_checkpoint(&trained.params, &hyper, &cell_dir.join("checkpoint"))
            .map_err(|e| anyhow!("{e}"))?;
        let mut manifest = RunManifest::new("sweep-drop", &canonical, cfg.seed);
        manifest.metrics.insert("r2".to_string(), r2);
        manifest.metrics.insert("recon_nll".to_string(), recon_nll);
        manifest.runtime_s = runtime_s;
        manifest.save(&cell_dir)?;
        let mut cell_csv = CsvTable::new(&["fraction", "r2", "recon_nll"]);
        cell_csv.push_row(vec![
            format_float(fraction),
            format_float(r2),
            format_float(recon_nll),
        ]);
        cell_csv.write(&cell_dir.join("metrics.csv"))?;

        cells.push(DropCell { fraction, r2, recon_nll, runtime_s });
    }

    let mut table = CsvTable::new(&["fraction", "r2", "recon_nll"]);
    let mut timing = CsvTable::new(&["fraction", "runtime_s"]);
    for c in &cells {
        table.push_row(vec![
            format_float(c.fraction),
            format_float(c.r2),
            format_float(c.recon_nll),
        ]);
        timing.push_row(vec![format_float(c.fraction), format_float(c.runtime_s)]);
    }
    table.write(&out_root.join("metrics.csv"))?;
    timing.write(&out_root.join("timing.csv"))?;
    Ok(cells)
}

/// One super-resolution cell.
#[derive(Debug, Clone)]
pub struct SuperresCell {
    pub factor: usize,
    pub peak_hz: f64,
    pub r2_sbtt: f64,
    pub r2_frame: f64,
    pub r2_smooth: f64,
    pub runtime_s: f64,
}

/// Spectral peak of the ground-truth Lorenz z dimension, averaged over
/// trials on the playback grid.
pub fn latent_z_peak_hz(latents: &Array3<f64>, sample_rate: f64) -> Result<f64> {
    let (n_trials, t_len, _) = latents.dim();
    let window = t_len.min(64);
    let mut acc: Option<(Vec<f64>, Vec<f64>)> = None;
    for trial in 0..n_trials {
        let z: Vec<f64> = latents.slice(s![trial, .., 2]).iter().copied().collect();
        let mean = z.iter().sum::<f64>() / z.len() as f64;
        let centered: Vec<f64> = z.iter().map(|v| v - mean).collect();
        let (freqs, psd) =
            welch_psd(&centered, window, window / 2, sample_rate).map_err(|e| anyhow!("{e}"))?;
        match &mut acc {
            None => acc = Some((freqs, psd)),
            Some((_, total)) => {
                for (t, p) in total.iter_mut().zip(psd.iter()) {
                    *t += p;
                }
            }
        }
    }
    let (freqs, psd) = acc.context("no trials")?;
    Ok(psd_peak_hz(&freqs, &psd))
}

/// Super-resolution sweep over Lorenz speeds. Three arms per speed:
/// (i) SBTT on the staggered fine grid with ZIG emissions, (ii) frame
/// resolution (phases collapsed) with ZIG emissions, rates linearly
/// resampled to the fine grid, (iii) Gaussian-smoothed deconvolved events
/// resampled to the fine grid. Each arm is ridge-mapped to the true Lorenz
/// states on the identical held-out trials.
pub fn run_superres(cfg: &ExperimentConfig, out_root: &Path) -> Result<Vec<SuperresCell>> {
    let sweep = cfg.sweep.clone().unwrap_or_default();
    let eval = cfg.eval.clone().unwrap_or_default();
    let canonical = cfg.canonical_string();
    let synth = cfg.synth.as_ref().context("config needs a [synth] section")?;
    let calcium = synth.calcium.to_core();
    let lambdas = eval.lambda_grid();

    let mut cells = Vec::new();
    for &factor in &sweep.lorenz_factors {
        let cell_dir = out_root.join(format!("speed-{factor:02}"));
        if let Some(m) =
            RunManifest::matches_completed(&cell_dir, "sweep-superres", &canonical, cfg.seed)
        {
            eprintln!("cell {} already complete, skipping", cell_dir.display());
            cells.push(SuperresCell {
                factor,
                peak_hz: m.metrics["peak_hz"],
                r2_sbtt: m.metrics["r2_sbtt"],
                r2_frame: m.metrics["r2_frame"],
                r2_smooth: m.metrics["r2_smooth"],
                runtime_s: m.runtime_s,
            });
            continue;
        }
        let start = Instant::now();
        let mut lorenz = synth.lorenz.to_core(cfg.seed);
        lorenz.downsample_factor = factor;
        let ds = sbtt_core::synth::generate_calcium_dataset(
            &lorenz,
            &calcium,
            synth.n_neurons,
            synth.baseline_hz,
            synth.w_sd,
            synth.trials_per_condition,
        )
        .map_err(|e| anyhow!("calcium synthesis: {e}"))?;

        let n_trials = ds.staggered_events.n_trials();
        let n_channels = ds.staggered_events.n_channels();
        let fine_rate = calcium.fine_rate;
        let frame_rate = fine_rate / calcium.n_phases as f64;
        let peak_hz = latent_z_peak_hz(&ds.latents, fine_rate)?;

        let model = cfg.model.as_ref().context("config needs a [model] section")?;
        let section = model.seqae.as_ref().context("config needs [model.seqae]")?;
        if section.emission != "zig" {
            bail!("super-resolution sweep expects emission = \"zig\"");
        }
        let hyper = section.to_hyper(n_channels, cfg.seed)?;
        let val_idx = validation_trials(n_trials, &hyper);
        let latents_val = select_rows(&ds.latents, &val_idx);

        // arm (i): SBTT on the staggered fine grid
        let r2_sbtt = {
            let batch = &ds.staggered_events;
            let loc = loc_from_events(&batch.values.view(), &batch.mask.view(), calcium.s_min);
            let init = SeqAeParams::init(
                hyper.dims,
                EmissionKind::Zig,
                Some(loc),
                hyper.mask_input_feature,
                &RngState::new(hyper.seed).stream(1),
            )
            .map_err(|e| anyhow!("{e}"))?;
            let trained = {
                let out = train_seqae(batch, Some(init), &hyper, TrainMode::Fresh)
                    .map_err(|e| anyhow!("{e}"))?;
                if out.diverged {
                    bail!("SBTT arm diverged");
                }
                out
            };
            save_checkpoint(&trained.params, &hyper, &cell_dir.join("checkpoint"))
                .map_err(|e| anyhow!("{e}"))?;
            let val_batch = batch.select_trials(&val_idx).map_err(|e| anyhow!("{e}"))?;
            let out = infer(&trained.params, &val_batch).map_err(|e| anyhow!("{e}"))?;
            ridge_map_r2(&out.rates, &latents_val, &lambdas)?
        };

        // arm (ii): frame resolution, resampled up to the fine grid
        let r2_frame = {
            let batch = &ds.frame_events;
            let loc = loc_from_events(&batch.values.view(), &batch.mask.view(), calcium.s_min);
            let init = SeqAeParams::init(
                hyper.dims,
                EmissionKind::Zig,
                Some(loc),
                hyper.mask_input_feature,
                &RngState::new(hyper.seed).stream(1),
            )
            .map_err(|e| anyhow!("{e}"))?;
            let trained = {
                let out = train_seqae(batch, Some(init), &hyper, TrainMode::Fresh)
                    .map_err(|e| anyhow!("{e}"))?;
                if out.diverged {
                    bail!("frame-resolution arm diverged");
                }
                out
            };
            let val_batch = batch.select_trials(&val_idx).map_err(|e| anyhow!("{e}"))?;
            let out = infer(&trained.params, &val_batch).map_err(|e| anyhow!("{e}"))?;
            let upsampled =
                resample_linear_3d(&out.rates, frame_rate, fine_rate).map_err(|e| anyhow!("{e}"))?;
            ridge_map_r2(&upsampled, &latents_val, &lambdas)?
        };

        // arm (iii): Gaussian-smoothed deconvolved events
        let r2_smooth = {
            let frame_dt = 1.0 / frame_rate;
            let sd_bins = sweep.baseline_smoothing_sd_s / frame_dt;
            let val_batch =
                ds.frame_events.select_trials(&val_idx).map_err(|e| anyhow!("{e}"))?;
            let (nv, nt, nc) = val_batch.values.dim();
            let mut smoothed = Array3::zeros((nv, nt, nc));
            for trial in 0..nv {
                for ch in 0..nc {
                    let series: Vec<f64> =
                        (0..nt).map(|t| val_batch.values[[trial, t, ch]]).collect();
                    for (t, v) in gaussian_smooth(&series, sd_bins).into_iter().enumerate() {
                        smoothed[[trial, t, ch]] = v;
                    }
                }
            }
            let upsampled =
                resample_linear_3d(&smoothed, frame_rate, fine_rate).map_err(|e| anyhow!("{e}"))?;
            ridge_map_r2(&upsampled, &latents_val, &lambdas)?
        };

        let runtime_s = start.elapsed().as_secs_f64();
        let mut manifest = RunManifest::new("sweep-superres", &canonical, cfg.seed);
        manifest.metrics.insert("peak_hz".to_string(), peak_hz);
        manifest.metrics.insert("r2_sbtt".to_string(), r2_sbtt);
        manifest.metrics.insert("r2_frame".to_string(), r2_frame);
        manifest.metrics.insert("r2_smooth".to_string(), r2_smooth);
        manifest.runtime_s = runtime_s;
        manifest.save(&cell_dir)?;
        let mut cell_csv =
            CsvTable::new(&["factor", "peak_hz", "r2_sbtt", "r2_frame", "r2_smooth"]);
        cell_csv.push_row(vec![
            factor.to_string(),
            format_float(peak_hz),
            format_float(r2_sbtt),
            format_float(r2_frame),
            format_float(r2_smooth),
        ]);
        cell_csv.write(&cell_dir.join("metrics.csv"))?;

        cells.push(SuperresCell { factor, peak_hz, r2_sbtt, r2_frame, r2_smooth, runtime_s });
    }

    let mut table = CsvTable::new(&["factor", "peak_hz", "r2_sbtt", "r2_frame", "r2_smooth"]);
    let mut timing = CsvTable::new(&["factor", "runtime_s"]);
    for c in &cells {
        table.push_row(vec![
            c.factor.to_string(),
            format_float(c.peak_hz),
            format_float(c.r2_sbtt),
            format_float(c.r2_frame),
            format_float(c.r2_smooth),
        ]);
        timing.push_row(vec![c.factor.to_string(), format_float(c.runtime_s)]);
    }
    table.write(&out_root.join("metrics.csv"))?;
    timing.write(&out_root.join("timing.csv"))?;
    Ok(cells)
}

/// One retraining-sweep cell.
#[derive(Debug, Clone)]
pub struct RetrainCell {
    pub fraction: f64,
    pub r2_trained_full: f64,
    pub r2_trained_sparse: f64,
    pub r2_retrained: f64,
    pub runtime_s: f64,
}

/// Encoder-retraining sweep. One full-data model is trained once; per
/// masked fraction the three arms are: the full model run on sparse data
/// as-is, a model trained from scratch on the sparse data, and the full
/// model with only its encoders retrained on the sparse data (dynamics
/// frozen).
pub fn run_retraining(cfg: &ExperimentConfig, out_root: &Path) -> Result<Vec<RetrainCell>> {
    let sweep = cfg.sweep.clone().unwrap_or_default();
    let eval = cfg.eval.clone().unwrap_or_default();
    let canonical = cfg.canonical_string();
    let bench = build_poisson_benchmark(cfg)?;
    let (n_trials, t_len, n_channels) = bench.batch.values.dim();
    let hyper = seqae_hyper(cfg, n_channels)?;
    let val_idx = validation_trials(n_trials, &hyper);
    let latents_val = select_rows(&bench.latents, &val_idx);
    let lambdas = eval.lambda_grid();

    // the shared full-data model, reloaded if this sweep already trained it
    let full_dir = out_root.join("full-model");
    let full_params = if let Some(_) =
        RunManifest::matches_completed(&full_dir, "sweep-retrain-full", &canonical, cfg.seed)
    {
        eprintln!("full-data model already trained, reusing");
        load_checkpoint(&full_dir.join("checkpoint")).map_err(|e| anyhow!("{e}"))?.0
    } else {
        let trained = train_fresh(&bench.batch, &hyper)?;
        save_checkpoint(&trained.params, &hyper, &full_dir.join("checkpoint"))
            .map_err(|e| anyhow!("{e}"))?;
        RunManifest::new("sweep-retrain-full", &canonical, cfg.seed).save(&full_dir)?;
        trained.params
    };

    let mut retrain_hyper = hyper.clone();
    retrain_hyper.lr = sweep.retrain_lr;
    if sweep.retrain_epochs > 0 {
        retrain_hyper.epochs = sweep.retrain_epochs;
    }
    // the full model is past its ramp; retraining continues at full strength
    retrain_hyper.ramp_epochs = 0;

    let mut cells = Vec::new();
    for (i, &fraction) in sweep.retrain_fractions.iter().enumerate() {
        let cell_dir = out_root.join(format!("retrain-{fraction:.2}"));
        if let Some(m) =
            RunManifest::matches_completed(&cell_dir, "sweep-retrain", &canonical, cfg.seed)
        {
            eprintln!("cell {} already complete, skipping", cell_dir.display());
            cells.push(RetrainCell {
                fraction,
                r2_trained_full: m.metrics["r2_trained_full"],
                r2_trained_sparse: m.metrics["r2_trained_sparse"],
                r2_retrained: m.metrics["r2_retrained"],
                runtime_s: m.runtime_s,
            });
            continue;
        }
        let start = Instant::now();
        let mask = random_drop_mask(
            (n_trials, t_len, n_channels),
            fraction,
            &RngState::new(cfg.seed).stream(2000 + i as u64),
        )
        .map_err(|e| anyhow!("{e}"))?;
        let masked = bench.batch.with_mask(mask).map_err(|e| anyhow!("{e}"))?;
        let val_batch = masked.select_trials(&val_idx).map_err(|e| anyhow!("{e}"))?;

        // arm: full-data model run on sparse inputs unchanged
        let out_full = infer(&full_params, &val_batch).map_err(|e| anyhow!("{e}"))?;
        let r2_trained_full = ridge_map_r2(&out_full.factors, &latents_val, &lambdas)?;

        // arm: trained from scratch on the sparse data. At fraction 0 the
        // sparse data equals the full data and the same seed reproduces the
        // full model exactly, so the training run is reused.
        let r2_trained_sparse = if fraction == 0.0 {
            r2_trained_full
        } else {
            let trained = train_fresh(&masked, &hyper)?;
            let out = infer(&trained.params, &val_batch).map_err(|e| anyhow!("{e}"))?;
            ridge_map_r2(&out.factors, &latents_val, &lambdas)?
        };

        // arm: encoders retrained on the sparse data, dynamics frozen
        let r2_retrained = {
            let retrained = train_seqae(
                &masked,
                Some(full_params.clone()),
                &retrain_hyper,
                TrainMode::RetrainEncoder,
            )
            .map_err(|e| anyhow!("{e}"))?;
            if retrained.diverged {
                bail!("encoder retraining diverged");
            }
            save_checkpoint(&retrained.params, &retrain_hyper, &cell_dir.join("checkpoint"))
                .map_err(|e| anyhow!("{e}"))?;
            let out = infer(&retrained.params, &val_batch).map_err(|e| anyhow!("{e}"))?;
            ridge_map_r2(&out.factors, &latents_val, &lambdas)?
        };

        let runtime_s = start.elapsed().as_secs_f64();
        let mut manifest = RunManifest::new("sweep-retrain", &canonical, cfg.seed);
        manifest.metrics.insert("r2_trained_full".to_string(), r2_trained_full);
        manifest.metrics.insert("r2_trained_sparse".to_string(), r2_trained_sparse);
        manifest.metrics.insert("r2_retrained".to_string(), r2_retrained);
        manifest.runtime_s = runtime_s;
        manifest.save(&cell_dir)?;
        let mut cell_csv = CsvTable::new(&[
            "fraction",
            "r2_trained_full",
            "r2_trained_sparse",
            "r2_retrained",
        ]);
        cell_csv.push_row(vec![
            format_float(fraction),
            format_float(r2_trained_full),
            format_float(r2_trained_sparse),
            format_float(r2_retrained),
        ]);
        cell_csv.write(&cell_dir.join("metrics.csv"))?;

        cells.push(RetrainCell {
            fraction,
            r2_trained_full,
            r2_trained_sparse,
            r2_retrained,
            runtime_s,
        });
    }

    let mut table =
        CsvTable::new(&["fraction", "r2_trained_full", "r2_trained_sparse", "r2_retrained"]);
    let mut timing = CsvTable::new(&["fraction", "runtime_s"]);
    for c in &cells {
        table.push_row(vec![
            format_float(c.fraction),
            format_float(c.r2_trained_full),
            format_float(c.r2_trained_sparse),
            format_float(c.r2_retrained),
        ]);
        timing.push_row(vec![format_float(c.fraction), format_float(c.runtime_s)]);
    }
    table.write(&out_root.join("metrics.csv"))?;
    timing.write(&out_root.join("timing.csv"))?;
    Ok(cells)
}

/// Experiment output root: `<out_dir>/<experiment>`.
pub fn experiment_root(cfg: &ExperimentConfig, experiment: &str) -> PathBuf {
    cfg.out_dir().join(experiment)
}
