//! Synthetic data: Lorenz latent dynamics at configurable speeds, Poisson
//! spiking driven by random projections of the latent state, calcium
//! fluorescence synthesis, staggered raster sampling, and a naive AR(1)
//! deconvolution.
//!
//! The pipeline is a pure function of its configs and seed: conditions,
//! trials, and neurons each draw from derived RNG streams, so regeneration
//! is bit-reproducible.

use ndarray::{s, Array1, Array2, Array3, Axis};
use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::sampling::{assign_phases, raster_mask};
use crate::tensorio::{SampleTimes, TimeSeriesBatch};

/// Lorenz system configuration. `downsample_factor` speeds the dynamics up
/// relative to the playback grid: the integrator runs at `dt` and every
/// k-th state is emitted as one 100 Hz sample.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LorenzConfig {
    pub sigma: f64,
    pub rho: f64,
    pub beta: f64,
    /// Integration step, seconds.
    pub dt: f64,
    pub downsample_factor: usize,
    pub n_conditions: usize,
    /// Trial length in milliseconds of playback time.
    pub trial_ms: usize,
    pub seed: u64,
}

impl Default for LorenzConfig {
    fn default() -> Self {
        LorenzConfig {
            sigma: 10.0,
            rho: 28.0,
            beta: 8.0 / 3.0,
            dt: 0.01,
            downsample_factor: 1,
            n_conditions: 32,
            trial_ms: 900,
            seed: 0,
        }
    }
}

impl LorenzConfig {
    /// Output samples per condition on the playback grid.
    pub fn steps_per_trial(&self) -> usize {
        (self.trial_ms as f64 / (self.dt * 1000.0)).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigma <= 0.0 || self.rho <= 0.0 || self.beta <= 0.0 || self.dt <= 0.0 {
            return Err(Error::numeric("lorenz parameters must be positive".to_string()));
        }
        if self.downsample_factor == 0 || self.n_conditions == 0 || self.steps_per_trial() == 0 {
            return Err(Error::numeric("lorenz config has an empty dimension".to_string()));
        }
        Ok(())
    }
}

/// Calcium-fluorescence synthesis parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalciumConfig {
    /// Per-spike amplitude jitter (s.d. of the Gaussian around 1).
    pub spike_amp_sd: f64,
    /// AR(1) coefficient range, drawn once per neuron.
    pub gamma_lo: f64,
    pub gamma_hi: f64,
    /// Per-neuron noise level: N(noise_mean, noise_sd²) truncated below
    /// noise_floor; used both as additive s.d. and the signal-proportional
    /// constant d.
    pub noise_mean: f64,
    pub noise_sd: f64,
    pub noise_floor: f64,
    /// Deconvolution threshold and ZIG location parameter.
    pub s_min: f64,
    /// Saturating Hill nonlinearity: f(c) = cⁿ/(cⁿ + Kⁿ) with K the given
    /// per-neuron percentile of c(t).
    pub hill_exponent: f64,
    pub hill_percentile: f64,
    /// Exponent e in the signal-proportional noise variance d²·amplitudeᵉ.
    pub noise_variance_exponent: f64,
    /// Fine grid rate (Hz) and number of raster phases per frame.
    pub fine_rate: f64,
    pub n_phases: usize,
}

impl Default for CalciumConfig {
    fn default() -> Self {
        CalciumConfig {
            spike_amp_sd: 0.1,
            gamma_lo: 0.93,
            gamma_hi: 0.95,
            noise_mean: 0.3,
            noise_sd: 0.02,
            noise_floor: 0.09,
            s_min: 0.1,
            hill_exponent: 2.0,
            hill_percentile: 0.90,
            noise_variance_exponent: 1.0,
            fine_rate: 100.0,
            n_phases: 3,
        }
    }
}

/// Euler-integrated Lorenz trajectories, one per condition:
/// `[conditions, steps_per_trial, 3]` on the playback grid. Each condition
/// starts from a random state and burns in 1000 integrator steps so
/// recording begins on the attractor.
pub fn lorenz_generate(cfg: &LorenzConfig, rng: &RngState) -> Result<Array3<f64>> {
    cfg.validate()?;
    let t_out = cfg.steps_per_trial();
    let mut out = Array3::zeros((cfg.n_conditions, t_out, 3));
    for cond in 0..cfg.n_conditions {
        let mut r = rng.stream(cond as u64).rng();
        let mut state = [
            r.gen::<f64>() * 20.0 - 10.0,
            r.gen::<f64>() * 20.0 - 10.0,
            r.gen::<f64>() * 30.0 + 5.0,
        ];
        for _ in 0..1000 {
            euler_step(&mut state, cfg);
        }
        for t in 0..t_out {
            out[[cond, t, 0]] = state[0];
            out[[cond, t, 1]] = state[1];
            out[[cond, t, 2]] = state[2];
            for _ in 0..cfg.downsample_factor {
                euler_step(&mut state, cfg);
            }
        }
    }
    Ok(out)
}

fn euler_step(state: &mut [f64; 3], cfg: &LorenzConfig) {
    let (x, y, z) = (state[0], state[1], state[2]);
    state[0] = x + cfg.dt * (cfg.sigma * (y - x));
    state[1] = y + cfg.dt * (x * (cfg.rho - z) - y);
    state[2] = z + cfg.dt * (x * y - cfg.beta * z);
}

/// Firing rates from latent states: per-dimension z-scoring, a random
/// linear projection with N(0, w_sd²) weights, an exponential nonlinearity,
/// and per-neuron scaling so every neuron's time-averaged rate equals
/// `baseline_hz` exactly.
pub fn rates_from_latents(
    states: &Array3<f64>,
    n_neurons: usize,
    baseline_hz: f64,
    w_sd: f64,
    rng: &RngState,
) -> Result<Array3<f64>> {
    if states.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("latent states must be finite".to_string()));
    }
    let (n_cond, t_len, d) = states.dim();
    // z-score each latent dimension over conditions and time
    let mut norm = states.clone();
    for dim in 0..d {
        let mut col = norm.slice_mut(s![.., .., dim]);
        let n = col.len() as f64;
        let mean = col.sum() / n;
        let var = col.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let sd = var.sqrt().max(1e-12);
        col.mapv_inplace(|v| (v - mean) / sd);
    }
    let mut r = rng.rng();
    let weights = Array2::from_shape_simple_fn((d, n_neurons), || {
        let v: f64 = r.sample(StandardNormal);
        v * w_sd
    });
    let mut rates = Array3::zeros((n_cond, t_len, n_neurons));
    for cond in 0..n_cond {
        let proj = norm.index_axis(Axis(0), cond).dot(&weights);
        rates.index_axis_mut(Axis(0), cond).assign(&proj.mapv(f64::exp));
    }
    // post-hoc per-neuron scaling to the baseline rate
    let total = (n_cond * t_len) as f64;
    for neuron in 0..n_neurons {
        let mean = rates.slice(s![.., .., neuron]).sum() / total;
        let scale = baseline_hz / mean;
        rates.slice_mut(s![.., .., neuron]).mapv_inplace(|v| v * scale);
    }
    Ok(rates)
}

/// Independent Poisson spike counts per bin: `trials_per_condition` draws of
/// each condition's rate trajectory. Returns the counts
/// `[conditions·trials, time, neurons]` together with each trial's
/// condition id.
pub fn sample_spikes(
    rates: &Array3<f64>,
    dt: f64,
    trials_per_condition: usize,
    rng: &RngState,
) -> Result<(Array3<f64>, Vec<usize>)> {
    if rates.iter().any(|&v| v < 0.0) {
        return Err(Error::numeric("rates must be non-negative".to_string()));
    }
    let (n_cond, t_len, n_neurons) = rates.dim();
    let n_trials = n_cond * trials_per_condition;
    let mut spikes = Array3::zeros((n_trials, t_len, n_neurons));
    let mut condition_ids = Vec::with_capacity(n_trials);
    for cond in 0..n_cond {
        for rep in 0..trials_per_condition {
            let trial = cond * trials_per_condition + rep;
            condition_ids.push(cond);
            let mut r = rng.stream(trial as u64).rng();
            for t in 0..t_len {
                for neuron in 0..n_neurons {
                    let lam = rates[[cond, t, neuron]] * dt;
                    if lam > 0.0 {
                        let dist = Poisson::new(lam).map_err(|e| {
                            Error::numeric(format!("poisson({lam}): {e:?}"))
                        })?;
                        spikes[[trial, t, neuron]] = dist.sample(&mut r);
                    }
                }
            }
        }
    }
    Ok((spikes, condition_ids))
}

/// Per-neuron constants drawn once for the whole dataset.
#[derive(Debug, Clone)]
pub struct NeuronCalciumParams {
    pub gamma: Array1<f64>,
    /// Noise level sn = d per neuron.
    pub noise: Array1<f64>,
}

/// Truncated-normal draw by rejection; the truncation point is far in the
/// bulk's tail for the default config, so this rarely loops.
pub fn truncated_normal(mean: f64, sd: f64, floor: f64, rng: &mut impl Rng) -> f64 {
    loop {
        let v: f64 = mean + sd * rng.sample::<f64, _>(StandardNormal);
        if v >= floor {
            return v;
        }
    }
}

/// Synthesizes fluorescence traces from spike counts:
/// 1. per-spike amplitude jitter (1 + N(0, spike_amp_sd) each),
/// 2. AR(1) calcium kinetics c(t) = γ·c(t−1) + s̃(t), γ ~ U(γ_lo, γ_hi)
///    per neuron, state reset at each trial boundary,
/// 3. saturating Hill nonlinearity with per-neuron half point,
/// 4. per-neuron min-max normalization to [0, 1],
/// 5. additive N(0, sn²) noise plus signal-proportional noise of variance
///    d²·amplitudeᵉ, with sn = d drawn per neuron from the truncated normal.
pub fn synth_fluorescence(
    spikes: &Array3<f64>,
    cfg: &CalciumConfig,
    rng: &RngState,
) -> Result<(Array3<f64>, NeuronCalciumParams)> {
    let (n_trials, t_len, n_neurons) = spikes.dim();
    let mut traces = Array3::zeros((n_trials, t_len, n_neurons));
    let mut gamma = Array1::zeros(n_neurons);
    let mut noise = Array1::zeros(n_neurons);

    for neuron in 0..n_neurons {
        let mut r = rng.stream(neuron as u64).rng();
        let g = cfg.gamma_lo + (cfg.gamma_hi - cfg.gamma_lo) * r.gen::<f64>();
        let sn = truncated_normal(cfg.noise_mean, cfg.noise_sd, cfg.noise_floor, &mut r);
        gamma[neuron] = g;
        noise[neuron] = sn;

        // calcium kinetics with per-spike amplitude jitter
        let mut calcium = Array2::zeros((n_trials, t_len));
        for trial in 0..n_trials {
            let mut c = 0.0;
            for t in 0..t_len {
                let count = spikes[[trial, t, neuron]] as usize;
                let mut amp = 0.0;
                for _ in 0..count {
                    amp += 1.0 + cfg.spike_amp_sd * r.sample::<f64, _>(StandardNormal);
                }
                c = g * c + amp;
                calcium[[trial, t]] = c;
            }
        }

        // Hill saturation with the half point at a per-neuron percentile
        let mut sorted: Vec<f64> = calcium.iter().copied().collect();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let idx = ((sorted.len() - 1) as f64 * cfg.hill_percentile).round() as usize;
        let half = sorted[idx].max(1e-9);
        let n_exp = cfg.hill_exponent;
        calcium.mapv_inplace(|c| {
            let cn = c.powf(n_exp);
            cn / (cn + half.powf(n_exp))
        });

        // min-max normalization to [0, 1]
        let min = calcium.iter().copied().fold(f64::INFINITY, f64::min);
        let max = calcium.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max > min {
            calcium.mapv_inplace(|c| (c - min) / (max - min));
        } else {
            calcium.fill(0.0);
        }

        // additive plus signal-proportional noise
        let e = cfg.noise_variance_exponent;
        for trial in 0..n_trials {
            for t in 0..t_len {
                let amp = calcium[[trial, t]].max(0.0);
                let mut v = amp + sn * r.sample::<f64, _>(StandardNormal);
                let prop_sd = sn * amp.powf(0.5 * e);
                if prop_sd > 0.0 {
                    v += prop_sd * r.sample::<f64, _>(StandardNormal);
                }
                traces[[trial, t, neuron]] = v;
            }
        }
    }
    Ok((traces, NeuronCalciumParams { gamma, noise }))
}

/// Naive AR(1) inversion: ŝ(t) = max(0, c(t) − γ·c(t−1)) with ŝ < s_min
/// zeroed. Exact on noiseless AR(1) traces when γ matches.
pub fn naive_deconvolve(trace: &[f64], gamma: f64, s_min: f64) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::numeric(format!("gamma must lie in (0,1), got {gamma}")));
    }
    let mut prev = 0.0;
    let mut out = Vec::with_capacity(trace.len());
    for &c in trace {
        let s = (c - gamma * prev).max(0.0);
        out.push(if s >= s_min { s } else { 0.0 });
        prev = c;
    }
    Ok(out)
}

/// Staggered raster view of fine-grid traces: each neuron is observed at
/// its phase's fine steps only. The result is a canonical zero-filled batch
/// on the fine grid.
pub fn staggered_sample(
    traces: &Array3<f64>,
    phases: &[usize],
    n_phases: usize,
    fine_rate: f64,
) -> Result<TimeSeriesBatch> {
    let (n_trials, t_len, n_neurons) = traces.dim();
    let fine_dt = 1.0 / fine_rate;
    let (mask2d, times) = raster_mask(n_neurons, t_len, phases, n_phases, fine_dt)?;
    let mut mask = Array3::from_elem((n_trials, t_len, n_neurons), false);
    for trial in 0..n_trials {
        mask.index_axis_mut(Axis(0), trial).assign(&mask2d);
    }
    TimeSeriesBatch::new(traces.clone(), mask, SampleTimes::PerTime(times), fine_dt, None)
}

/// Everything the calcium experiments consume, generated in one pass.
#[derive(Debug, Clone)]
pub struct CalciumDataset {
    /// Ground-truth latent states per trial on the fine grid.
    pub latents: Array3<f64>,
    /// Ground-truth spike counts per trial on the fine grid.
    pub spikes: Array3<f64>,
    /// Noisy fluorescence on the fine grid.
    pub traces: Array3<f64>,
    pub neuron_params: NeuronCalciumParams,
    pub phases: Vec<usize>,
    pub condition_ids: Vec<usize>,
    /// Deconvolved events placed at each neuron's fine-grid sample times,
    /// with the staggered observation mask.
    pub staggered_events: TimeSeriesBatch,
    /// The same events collapsed to one dense bin per frame.
    pub frame_events: TimeSeriesBatch,
}

/// Full simulated-2p pipeline: Lorenz latents → rates → spikes →
/// fluorescence → staggered 1-of-n_phases sampling → per-neuron naive
/// deconvolution of the frame-rate samples → events on both the fine
/// (staggered) and frame-rate (dense) grids.
pub fn generate_calcium_dataset(
    lorenz: &LorenzConfig,
    calcium: &CalciumConfig,
    n_neurons: usize,
    baseline_hz: f64,
    w_sd: f64,
    trials_per_condition: usize,
) -> Result<CalciumDataset> {
    let root = RngState::new(lorenz.seed);
    let states = lorenz_generate(lorenz, &root.stream(1))?;
    let rates = rates_from_latents(&states, n_neurons, baseline_hz, w_sd, &root.stream(2))?;
    let (spikes, condition_ids) = sample_spikes(&rates, lorenz.dt, trials_per_condition, &root.stream(3))?;
    let (traces, neuron_params) = synth_fluorescence(&spikes, calcium, &root.stream(4))?;
    let n_phases = calcium.n_phases;
    let phases = assign_phases(n_neurons, n_phases, &root.stream(5));

    let (n_trials, t_fine, _) = traces.dim();
    if t_fine % n_phases != 0 {
        return Err(Error::numeric(format!(
            "trial length {t_fine} is not a multiple of n_phases {n_phases}"
        )));
    }
    let n_frames = t_fine / n_phases;
    // per-trial latents matching the spike tensor
    let mut latents = Array3::zeros((n_trials, t_fine, 3));
    for (trial, &cond) in condition_ids.iter().enumerate() {
        latents.index_axis_mut(Axis(0), trial).assign(&states.index_axis(Axis(0), cond));
    }

    // each neuron's frame-rate sample sequence, deconvolved with the
    // frame-rate AR coefficient γ^n_phases
    let mut staggered_values = Array3::zeros((n_trials, t_fine, n_neurons));
    let mut frame_values = Array3::zeros((n_trials, n_frames, n_neurons));
    for neuron in 0..n_neurons {
        let phase = phases[neuron];
        let gamma_frame = neuron_params.gamma[neuron].powi(n_phases as i32);
        for trial in 0..n_trials {
            let sampled: Vec<f64> = (0..n_frames)
                .map(|k| traces[[trial, k * n_phases + phase, neuron]])
                .collect();
            let events = naive_deconvolve(&sampled, gamma_frame, calcium.s_min)?;
            for (k, &ev) in events.iter().enumerate() {
                if ev > 0.0 {
                    staggered_values[[trial, k * n_phases + phase, neuron]] = ev;
                    frame_values[[trial, k, neuron]] = ev;
                }
            }
        }
    }

    let staggered_events = {
        let fine_dt = 1.0 / calcium.fine_rate;
        let (mask2d, times) = raster_mask(n_neurons, t_fine, &phases, n_phases, fine_dt)?;
        let mut mask = Array3::from_elem((n_trials, t_fine, n_neurons), false);
        for trial in 0..n_trials {
            mask.index_axis_mut(Axis(0), trial).assign(&mask2d);
        }
        TimeSeriesBatch::new(staggered_values, mask, SampleTimes::PerTime(times), fine_dt, None)?
    };
    let frame_events = {
        let frame_dt = n_phases as f64 / calcium.fine_rate;
        let times = Array1::from_iter((0..n_frames).map(|k| k as f64 * frame_dt));
        let mask = Array3::from_elem((n_trials, n_frames, n_neurons), true);
        TimeSeriesBatch::new(frame_values, mask, SampleTimes::PerTime(times), frame_dt, None)?
    };

    Ok(CalciumDataset {
        latents,
        spikes,
        traces,
        neuron_params,
        phases,
        condition_ids,
        staggered_events,
        frame_events,
    })
}

/// Lorenz-driven Poisson spiking dataset (the electrophysiology-style
/// benchmark): returns the per-trial spike batch on the 100 Hz grid, the
/// matching latents, and condition ids.
pub fn generate_poisson_dataset(
    lorenz: &LorenzConfig,
    n_neurons: usize,
    baseline_hz: f64,
    w_sd: f64,
    trials_per_condition: usize,
) -> Result<(TimeSeriesBatch, Array3<f64>, Vec<usize>)> {
    let root = RngState::new(lorenz.seed);
    let states = lorenz_generate(lorenz, &root.stream(1))?;
    let rates = rates_from_latents(&states, n_neurons, baseline_hz, w_sd, &root.stream(2))?;
    let (spikes, condition_ids) = sample_spikes(&rates, lorenz.dt, trials_per_condition, &root.stream(3))?;
    let (n_trials, t_len, _) = spikes.dim();
    let mut latents = Array3::zeros((n_trials, t_len, 3));
    for (trial, &cond) in condition_ids.iter().enumerate() {
        latents.index_axis_mut(Axis(0), trial).assign(&states.index_axis(Axis(0), cond));
    }
    let times = Array1::from_iter((0..t_len).map(|t| t as f64 * lorenz.dt));
    let mask = Array3::from_elem(spikes.dim(), true);
    let batch = TimeSeriesBatch::new(spikes, mask, SampleTimes::PerTime(times), lorenz.dt, None)?;
    Ok((batch, latents, condition_ids))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{psd_peak_hz, welch_psd};

    #[test]
    fn lorenz_origin_is_a_fixed_point() {
        let cfg = LorenzConfig { n_conditions: 1, trial_ms: 100, ..Default::default() };
        let mut state = [0.0, 0.0, 0.0];
        for _ in 0..1000 {
            euler_step(&mut state, &cfg);
        }
        assert_eq!(state, [0.0, 0.0, 0.0]);
    }

    #[test]
    fn lorenz_stays_bounded() {
        let cfg = LorenzConfig { n_conditions: 2, trial_ms: 30_000, ..Default::default() };
        let states = lorenz_generate(&cfg, &RngState::new(5)).unwrap();
        for v in states.iter() {
            assert!(v.is_finite());
        }
        let max_z = states.slice(s![.., .., 2]).iter().copied().fold(0.0, f64::max);
        assert!(max_z < 60.0, "max |z| = {max_z}");
    }

    #[test]
    fn lorenz_spectrum_peak_scales_with_downsampling() {
        // one long trajectory per factor; peak frequency must scale
        // proportionally, within the resolution of both estimates
        let window = 1024;
        let peak_for = |factor: usize| -> f64 {
            let cfg = LorenzConfig {
                n_conditions: 1,
                trial_ms: 200_000,
                downsample_factor: factor,
                seed: 11,
                ..Default::default()
            };
            let states = lorenz_generate(&cfg, &RngState::new(9)).unwrap();
            let z: Vec<f64> = states.slice(s![0, .., 2]).iter().copied().collect();
            let mean = z.iter().sum::<f64>() / z.len() as f64;
            let centered: Vec<f64> = z.iter().map(|v| v - mean).collect();
            let (freqs, psd) = welch_psd(&centered, window, window / 2, 100.0).unwrap();
            psd_peak_hz(&freqs, &psd)
        };
        let base = peak_for(1);
        assert!(base > 0.5 && base < 3.0, "base Lorenz peak {base} Hz");
        let bin = 100.0 / window as f64;
        for factor in [2usize, 5, 10] {
            let fast = peak_for(factor);
            let want = base * factor as f64;
            let tol = bin * (factor as f64 + 1.0);
            assert!((fast - want).abs() <= tol, "factor {factor}: peak {fast} vs {want} ± {tol}");
        }
    }

    #[test]
    fn rates_hit_baseline_exactly() {
        let cfg = LorenzConfig { n_conditions: 4, trial_ms: 900, seed: 3, ..Default::default() };
        let states = lorenz_generate(&cfg, &RngState::new(1)).unwrap();
        let rates = rates_from_latents(&states, 20, 3.0, 0.5, &RngState::new(2)).unwrap();
        assert!(rates.iter().all(|&r| r > 0.0));
        let total = (rates.dim().0 * rates.dim().1) as f64;
        for neuron in 0..20 {
            let mean = rates.slice(s![.., .., neuron]).sum() / total;
            assert!((mean - 3.0).abs() / 3.0 < 1e-12, "neuron {neuron} mean {mean}");
        }
        // zero weights → constant baseline rates
        let flat = rates_from_latents(&states, 5, 3.0, 0.0, &RngState::new(4)).unwrap();
        for v in flat.iter() {
            assert!((v - 3.0).abs() < 1e-9);
        }
    }

    #[test]
    fn spikes_are_poisson_like() {
        let rates = Array3::from_elem((1, 100_000, 1), 100.0);
        let (spikes, _) = sample_spikes(&rates, 0.01, 1, &RngState::new(7)).unwrap();
        let n = 100_000.0;
        let mean = spikes.sum() / n;
        assert!((mean - 1.0).abs() < 3.0 * (1.0 / n).sqrt(), "mean {mean}");
        let var = spikes.iter().map(|&s| (s - mean) * (s - mean)).sum::<f64>() / n;
        let fano = var / mean;
        assert!((fano - 1.0).abs() < 0.05, "fano {fano}");
        // zero rate → zero spikes
        let zero = Array3::zeros((1, 100, 2));
        let (z, _) = sample_spikes(&zero, 0.01, 1, &RngState::new(8)).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ar1_impulse_response_decays_geometrically() {
        // bypass noise and nonlinearity by inverting an ideal AR(1) pulse
        let gamma = 0.94f64;
        let mut trace = vec![0.0; 50];
        let mut c = 0.0;
        for (t, slot) in trace.iter_mut().enumerate() {
            let s = if t == 5 { 1.0 } else { 0.0 };
            c = gamma * c + s;
            *slot = c;
        }
        for (t, &v) in trace.iter().enumerate() {
            let want = if t >= 5 { gamma.powi(t as i32 - 5) } else { 0.0 };
            assert!((v - want).abs() < 1e-12);
        }
        // exact inversion recovers the single spike
        let events = naive_deconvolve(&trace, gamma, 0.1).unwrap();
        for (t, &e) in events.iter().enumerate() {
            let want = if t == 5 { 1.0 } else { 0.0 };
            assert!((e - want).abs() < 1e-12, "t={t}: {e}");
        }
        // all-zero trace → all-zero events
        let silent = naive_deconvolve(&vec![0.0; 20], gamma, 0.1).unwrap();
        assert!(silent.iter().all(|&e| e == 0.0));
    }

    #[test]
    fn truncated_noise_draws_respect_floor() {
        let mut rng = RngState::new(13).rng();
        // a variance-scale truncation: floor close to the mean
        let draws: Vec<f64> =
            (0..10_000).map(|_| truncated_normal(0.3, 0.14, 0.09, &mut rng)).collect();
        assert!(draws.iter().all(|&v| v >= 0.09));
        // analytic truncated-normal mean: mu + sd·φ(a)/(1−Φ(a)), a = (floor−mu)/sd
        let a = (0.09f64 - 0.3) / 0.14;
        let phi = (-0.5 * a * a).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let cap_phi = 0.5 * (1.0 + erf(a / std::f64::consts::SQRT_2));
        let want = 0.3 + 0.14 * phi / (1.0 - cap_phi);
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let sigma_mean = 0.14 / (draws.len() as f64).sqrt();
        assert!((mean - want).abs() < 4.0 * sigma_mean, "mean {mean} vs {want}");
    }

    // Abramowitz–Stegun 7.1.26, enough accuracy for a 3σ test bound.
    fn erf(x: f64) -> f64 {
        let sign = x.signum();
        let x = x.abs();
        let t = 1.0 / (1.0 + 0.3275911 * x);
        let poly = t
            * (0.254829592 + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
        sign * (1.0 - poly * (-x * x).exp())
    }

    #[test]
    fn fluorescence_pipeline_shapes_and_zero_case() {
        let cfg = CalciumConfig::default();
        let spikes = Array3::zeros((2, 30, 3));
        let (traces, params) = synth_fluorescence(&spikes, &cfg, &RngState::new(3)).unwrap();
        assert_eq!(traces.dim(), (2, 30, 3));
        for g in params.gamma.iter() {
            assert!((0.93..0.95).contains(g));
        }
        for sn in params.noise.iter() {
            assert!(*sn >= cfg.noise_floor);
        }
        // zero spikes with zero noise → identically zero trace
        let quiet = CalciumConfig {
            noise_mean: 0.0,
            noise_sd: 0.0,
            noise_floor: 0.0,
            spike_amp_sd: 0.0,
            ..Default::default()
        };
        let (silent, _) = synth_fluorescence(&spikes, &quiet, &RngState::new(4)).unwrap();
        assert!(silent.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn staggered_sampling_counts_and_values() {
        let mut traces = Array3::zeros((2, 12, 3));
        for (idx, v) in traces.indexed_iter_mut() {
            *v = (idx.0 * 100 + idx.1 * 10 + idx.2) as f64;
        }
        let phases = vec![0usize, 1, 2];
        let batch = staggered_sample(&traces, &phases, 3, 100.0).unwrap();
        for neuron in 0..3 {
            let observed: Vec<usize> =
                (0..12).filter(|&t| batch.mask[[0, t, neuron]]).collect();
            assert_eq!(observed.len(), 4); // 12/3
            for &t in &observed {
                assert_eq!(t % 3, phases[neuron]);
                assert_eq!(batch.values[[0, t, neuron]], traces[[0, t, neuron]]);
            }
        }
        // n_phases = 1 keeps everything
        let dense = staggered_sample(&traces, &[0, 0, 0], 1, 100.0).unwrap();
        assert!(dense.mask.iter().all(|&m| m));
    }

    #[test]
    fn deconvolved_events_correlate_with_true_spikes() {
        let lorenz = LorenzConfig {
            n_conditions: 6,
            downsample_factor: 2,
            seed: 21,
            ..Default::default()
        };
        let calcium = CalciumConfig::default();
        let ds = generate_calcium_dataset(&lorenz, &calcium, 60, 3.0, 0.5, 4).unwrap();
        let (n_trials, t_fine, n_neurons) = ds.spikes.dim();
        let n_frames = t_fine / calcium.n_phases;
        // frame-aggregated true spike counts against frame events
        let mut rs = Vec::new();
        for neuron in 0..n_neurons {
            let mut ev = Vec::with_capacity(n_trials * n_frames);
            let mut sp = Vec::with_capacity(n_trials * n_frames);
            for trial in 0..n_trials {
                for k in 0..n_frames {
                    ev.push(ds.frame_events.values[[trial, k, neuron]]);
                    let lo = k * calcium.n_phases;
                    sp.push(
                        (lo..lo + calcium.n_phases).map(|t| ds.spikes[[trial, t, neuron]]).sum(),
                    );
                }
            }
            let r = crate::eval::pearson(&ev, &sp);
            if r.is_finite() {
                rs.push(r);
            }
        }
        let mean_r = rs.iter().sum::<f64>() / rs.len() as f64;
        assert!(mean_r > 0.25, "mean event/spike correlation {mean_r}");
    }

    #[test]
    fn pipeline_is_deterministic() {
        let lorenz = LorenzConfig { n_conditions: 2, seed: 33, ..Default::default() };
        let calcium = CalciumConfig::default();
        let a = generate_calcium_dataset(&lorenz, &calcium, 10, 3.0, 0.5, 2).unwrap();
        let b = generate_calcium_dataset(&lorenz, &calcium, 10, 3.0, 0.5, 2).unwrap();
        assert_eq!(a.traces, b.traces);
        assert_eq!(a.staggered_events, b.staggered_events);
        assert_eq!(a.phases, b.phases);
    }
}
