//! Experiment configuration: one TOML file selecting the synthetic data,
//! sampling schedule, model, training hyperparameters, evaluation metrics,
//! and sweep grids. Unknown keys are rejected; the seed is mandatory.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use sbtt_core::emissions::EmissionKind;
use sbtt_core::sampling::ScheduleKind;
use sbtt_core::seqae::{SeqAeDims, SeqAeHyper};
use sbtt_core::synth::{CalciumConfig, LorenzConfig};

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub synth: Option<SynthSection>,
    #[serde(default)]
    pub sampling: Option<SamplingSection>,
    #[serde(default)]
    pub model: Option<ModelSection>,
    #[serde(default)]
    pub eval: Option<EvalSection>,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: ExperimentConfig = toml::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        Ok(cfg)
    }

    /// Canonical serialized form used for run manifests and resume checks.
    pub fn canonical_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out_dir.clone().unwrap_or_else(|| PathBuf::from("runs"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    LorenzPoisson,
    LorenzCalcium,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub kind: SynthKind,
    #[serde(default = "default_n_neurons")]
    pub n_neurons: usize,
    #[serde(default = "default_baseline_hz")]
    pub baseline_hz: f64,
    #[serde(default = "default_w_sd")]
    pub w_sd: f64,
    #[serde(default = "default_trials_per_condition")]
    pub trials_per_condition: usize,
    #[serde(default)]
    pub lorenz: LorenzSection,
    #[serde(default)]
    pub calcium: CalciumSection,
}

fn default_n_neurons() -> usize {
    278
}
fn default_baseline_hz() -> f64 {
    3.0
}
fn default_w_sd() -> f64 {
    0.5
}
fn default_trials_per_condition() -> usize {
    60
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct LorenzSection {
    pub sigma: f64,
    pub rho: f64,
    pub beta: f64,
    pub dt: f64,
    pub downsample_factor: usize,
    pub n_conditions: usize,
    pub trial_ms: usize,
}

impl Default for LorenzSection {
    fn default() -> Self {
        let c = LorenzConfig::default();
        LorenzSection {
            sigma: c.sigma,
            rho: c.rho,
            beta: c.beta,
            dt: c.dt,
            downsample_factor: c.downsample_factor,
            n_conditions: c.n_conditions,
            trial_ms: c.trial_ms,
        }
    }
}

impl LorenzSection {
    pub fn to_core(&self, seed: u64) -> LorenzConfig {
        LorenzConfig {
            sigma: self.sigma,
            rho: self.rho,
            beta: self.beta,
            dt: self.dt,
            downsample_factor: self.downsample_factor,
            n_conditions: self.n_conditions,
            trial_ms: self.trial_ms,
            seed,
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalciumSection {
    pub spike_amp_sd: f64,
    pub gamma_lo: f64,
    pub gamma_hi: f64,
    pub noise_mean: f64,
    pub noise_sd: f64,
    pub noise_floor: f64,
    pub s_min: f64,
    pub hill_exponent: f64,
    pub hill_percentile: f64,
    pub noise_variance_exponent: f64,
    pub fine_rate: f64,
    pub n_phases: usize,
}

impl Default for CalciumSection {
    fn default() -> Self {
        let c = CalciumConfig::default();
        CalciumSection {
            spike_amp_sd: c.spike_amp_sd,
            gamma_lo: c.gamma_lo,
            gamma_hi: c.gamma_hi,
            noise_mean: c.noise_mean,
            noise_sd: c.noise_sd,
            noise_floor: c.noise_floor,
            s_min: c.s_min,
            hill_exponent: c.hill_exponent,
            hill_percentile: c.hill_percentile,
            noise_variance_exponent: c.noise_variance_exponent,
            fine_rate: c.fine_rate,
            n_phases: c.n_phases,
        }
    }
}

impl CalciumSection {
    pub fn to_core(&self) -> CalciumConfig {
        CalciumConfig {
            spike_amp_sd: self.spike_amp_sd,
            gamma_lo: self.gamma_lo,
            gamma_hi: self.gamma_hi,
            noise_mean: self.noise_mean,
            noise_sd: self.noise_sd,
            noise_floor: self.noise_floor,
            s_min: self.s_min,
            hill_exponent: self.hill_exponent,
            hill_percentile: self.hill_percentile,
            noise_variance_exponent: self.noise_variance_exponent,
            fine_rate: self.fine_rate,
            n_phases: self.n_phases,
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingSection {
    pub kind: ScheduleKind,
    #[serde(default)]
    pub drop_fraction: f64,
    /// Phase offsets in seconds (raster mode).
    #[serde(default)]
    pub phases: Vec<f64>,
    #[serde(default)]
    pub frame_period: f64,
    #[serde(default)]
    pub n_phases: Option<usize>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default)]
    pub lds: Option<LdsSection>,
    #[serde(default)]
    pub seqae: Option<SeqAeSection>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct LdsSection {
    pub latent_dim: usize,
    pub obs_dim: usize,
    pub t_len: usize,
    pub n_trials: usize,
    /// Rotation frequency (cycles per step) and radius of the true
    /// dynamics used by the built-in generator.
    pub rotation_cycles_per_step: f64,
    pub dynamics_radius: f64,
    pub process_sd: f64,
    pub observation_sd: f64,
    pub drop_fraction: f64,
    pub lr: f64,
    pub epochs: usize,
    pub estimate_x0: bool,
    /// Fraction of trials held out for the oracle-relative evaluation.
    pub holdout_fraction: f64,
}

impl Default for LdsSection {
    fn default() -> Self {
        LdsSection {
            latent_dim: 2,
            obs_dim: 10,
            t_len: 200,
            n_trials: 100,
            rotation_cycles_per_step: 0.03,
            dynamics_radius: 0.99,
            process_sd: 0.0,
            observation_sd: 0.05,
            drop_fraction: 0.5,
            lr: 1e-2,
            epochs: 2000,
            estimate_x0: false,
            holdout_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeqAeSection {
    pub enc_hidden: usize,
    pub latent: usize,
    pub gen_hidden: usize,
    pub factors: usize,
    /// "poisson", "zig", or "gaussian".
    pub emission: String,
    pub gaussian_sd: f64,
    pub kl_weight_ic: f64,
    pub l2_generator: f64,
    pub scale_l2_weight: f64,
    pub scale_l2_prior: f64,
    pub dropout_rate: f64,
    pub cd_rate: f64,
    pub lr: f64,
    pub epochs: usize,
    pub ramp_epochs: usize,
    pub batch_size: usize,
    pub mask_input_feature: bool,
    pub max_grad_norm: f64,
}

impl Default for SeqAeSection {
    fn default() -> Self {
        SeqAeSection {
            enc_hidden: 64,
            latent: 64,
            gen_hidden: 100,
            factors: 40,
            emission: "poisson".to_string(),
            gaussian_sd: 1.0,
            kl_weight_ic: 1e-4,
            l2_generator: 1e-4,
            scale_l2_weight: 1.0,
            scale_l2_prior: 1.0,
            dropout_rate: 0.05,
            cd_rate: 0.0,
            lr: 1e-3,
            epochs: 200,
            ramp_epochs: 80,
            batch_size: 128,
            mask_input_feature: false,
            max_grad_norm: 200.0,
        }
    }
}

impl SeqAeSection {
    pub fn emission_kind(&self) -> anyhow::Result<EmissionKind> {
        Ok(match self.emission.as_str() {
            "poisson" => EmissionKind::Poisson,
            "zig" => EmissionKind::Zig,
            "gaussian" => EmissionKind::Gaussian { sd: self.gaussian_sd },
            other => bail!("unknown emission kind {other:?} (poisson, zig, gaussian)"),
        })
    }

    pub fn to_hyper(&self, n_channels: usize, seed: u64) -> anyhow::Result<SeqAeHyper> {
        let dims = SeqAeDims {
            n_channels,
            enc_hidden: self.enc_hidden,
            latent: self.latent,
            gen_hidden: self.gen_hidden,
            factors: self.factors,
        };
        Ok(SeqAeHyper {
            dims,
            emission: self.emission_kind()?,
            kl_weight_ic: self.kl_weight_ic,
            l2_generator: self.l2_generator,
            scale_l2_weight: self.scale_l2_weight,
            scale_l2_prior: self.scale_l2_prior,
            dropout_rate: self.dropout_rate,
            cd_rate: self.cd_rate,
            lr: self.lr,
            epochs: self.epochs,
            ramp_epochs: self.ramp_epochs,
            batch_size: self.batch_size,
            seed,
            mask_input_feature: self.mask_input_feature,
            max_grad_norm: self.max_grad_norm,
        })
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Subset of {"r2", "pr2", "coherence", "psth"}.
    pub metrics: Vec<String>,
    /// Ridge lambda grid; empty selects the default log-spaced grid.
    pub lambdas: Vec<f64>,
    pub smoothing_sd_ms: f64,
    pub coherence_window: usize,
    pub coherence_overlap: usize,
    /// None pads to the next power of two; Some(n) uses an exact n-point DFT.
    pub nfft: Option<usize>,
    pub glm_l2: f64,
    /// Sample rate used for coherence frequency axes; 1.0 reports
    /// frequencies in cycles per bin.
    pub sample_rate: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            metrics: vec!["r2".to_string()],
            lambdas: Vec::new(),
            smoothing_sd_ms: 40.0,
            coherence_window: 35,
            coherence_overlap: 25,
            nfft: None,
            glm_l2: 1e-4,
            sample_rate: 1.0,
        }
    }
}

impl EvalSection {
    pub fn lambda_grid(&self) -> Vec<f64> {
        if self.lambdas.is_empty() {
            sbtt_core::eval::default_lambda_grid()
        } else {
            self.lambdas.clone()
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub drop_fractions: Vec<f64>,
    /// Lorenz downsampling factors for the super-resolution sweep.
    pub lorenz_factors: Vec<usize>,
    pub retrain_fractions: Vec<f64>,
    /// Learning rate and epochs of the encoder-retraining arm; zero epochs
    /// fall back to the model section's settings.
    pub retrain_lr: f64,
    pub retrain_epochs: usize,
    /// Smoothing (seconds) for the super-resolution baseline arm.
    pub baseline_smoothing_sd_s: f64,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            drop_fractions: vec![0.0, 0.2, 0.4, 0.6, 0.7, 0.8, 0.9],
            lorenz_factors: vec![2, 5, 8, 11],
            retrain_fractions: vec![0.0, 0.8],
            retrain_lr: 5e-4,
            retrain_epochs: 0,
            baseline_smoothing_sd_s: 0.04,
        }
    }
}
