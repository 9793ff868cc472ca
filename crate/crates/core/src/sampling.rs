//! Observation-mask generators: random per-timestep dropping, raster-scan
//! staggered phases, and coordinated-dropout splits of already-observed
//! entries.

use ndarray::{Array1, Array2, Array3, ArrayView3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngState;

/// Mask-generation regime, as selected in experiment configs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    RandomDrop,
    RasterPhase,
    Full,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplingSchedule {
    pub kind: ScheduleKind,
    #[serde(default)]
    pub drop_fraction: f64,
    /// Per-phase offsets within a frame, seconds.
    #[serde(default)]
    pub phases: Vec<f64>,
    #[serde(default)]
    pub frame_period: f64,
}

impl SamplingSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.drop_fraction) {
            return Err(Error::numeric(format!(
                "drop_fraction must lie in [0,1], got {}",
                self.drop_fraction
            )));
        }
        for &p in &self.phases {
            if !(0.0..self.frame_period).contains(&p) {
                return Err(Error::numeric(format!(
                    "phase {p} outside [0, {})",
                    self.frame_period
                )));
            }
        }
        Ok(())
    }
}

/// Number of channels dropped per time step for a given fraction:
/// round(fraction × channels), ties to even.
pub fn drop_count(fraction: f64, n_channels: usize) -> usize {
    (fraction * n_channels as f64).round_ties_even() as usize
}

/// Random-drop mask: for every (trial, time) slice, exactly
/// `drop_count(fraction, channels)` channels are marked missing, chosen
/// uniformly without replacement. Each trial uses its own derived RNG
/// stream, so per-trial parallel generation matches sequential generation.
pub fn random_drop_mask(
    shape: (usize, usize, usize),
    fraction: f64,
    rng: &RngState,
) -> Result<Array3<bool>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::numeric(format!("fraction must lie in [0,1], got {fraction}")));
    }
    let (n_trials, n_steps, n_channels) = shape;
    let k = drop_count(fraction, n_channels);
    let mut mask = Array3::from_elem(shape, true);
    let mut scratch: Vec<usize> = (0..n_channels).collect();
    for trial in 0..n_trials {
        let mut r = rng.stream(trial as u64).rng();
        for t in 0..n_steps {
            // partial Fisher-Yates: first k entries become the dropped set
            for i in 0..k {
                let j = i + r.gen_range(0..n_channels - i);
                scratch.swap(i, j);
            }
            for &c in &scratch[..k] {
                mask[[trial, t, c]] = false;
            }
        }
    }
    Ok(mask)
}

/// Raster-scan mask on the fine time grid: channel `c` is observed exactly
/// at fine steps `t` with `t mod n_phases == phase[c]`. Returns the
/// [time, channels] mask together with the fine-step sample times.
pub fn raster_mask(
    n_channels: usize,
    n_fine_steps: usize,
    phase_assignment: &[usize],
    n_phases: usize,
    fine_dt: f64,
) -> Result<(Array2<bool>, Array1<f64>)> {
    if n_phases == 0 || n_fine_steps % n_phases != 0 {
        return Err(Error::numeric(format!(
            "n_fine_steps ({n_fine_steps}) must be a positive multiple of n_phases ({n_phases})"
        )));
    }
    if phase_assignment.len() != n_channels {
        return Err(Error::shape(format!(
            "{} phase assignments for {n_channels} channels",
            phase_assignment.len()
        )));
    }
    if let Some(&bad) = phase_assignment.iter().find(|&&p| p >= n_phases) {
        return Err(Error::numeric(format!("phase index {bad} outside [0, {n_phases})")));
    }
    let mut mask = Array2::from_elem((n_fine_steps, n_channels), false);
    for (c, &phase) in phase_assignment.iter().enumerate() {
        for t in (phase..n_fine_steps).step_by(n_phases) {
            mask[[t, c]] = true;
        }
    }
    let times = Array1::from_iter((0..n_fine_steps).map(|t| t as f64 * fine_dt));
    Ok((mask, times))
}

/// Uniform random phase per channel.
pub fn assign_phases(n_channels: usize, n_phases: usize, rng: &RngState) -> Vec<usize> {
    let mut r = rng.rng();
    (0..n_channels).map(|_| r.gen_range(0..n_phases)).collect()
}

/// Splits the observed entries of `mask` into a disjoint (input, loss)
/// partition: each observed entry lands in the loss portion independently
/// with probability `cd_rate`, otherwise in the input portion. Entries the
/// source marks missing stay missing in both.
pub fn coordinated_dropout_split(
    mask: &ArrayView3<bool>,
    cd_rate: f64,
    rng: &RngState,
) -> Result<(Array3<bool>, Array3<bool>)> {
    if !(0.0..1.0).contains(&cd_rate) {
        return Err(Error::numeric(format!("cd_rate must lie in [0,1), got {cd_rate}")));
    }
    let mut input_mask = Array3::from_elem(mask.dim(), false);
    let mut loss_mask = Array3::from_elem(mask.dim(), false);
    let n_trials = mask.dim().0;
    for trial in 0..n_trials {
        let mut r = rng.stream(trial as u64).rng();
        let src = mask.index_axis(ndarray::Axis(0), trial);
        let mut inp = input_mask.index_axis_mut(ndarray::Axis(0), trial);
        let mut los = loss_mask.index_axis_mut(ndarray::Axis(0), trial);
        ndarray::Zip::from(&src).and(&mut inp).and(&mut los).for_each(|&m, i, l| {
            if m {
                if r.gen::<f64>() < cd_rate {
                    *l = true;
                } else {
                    *i = true;
                }
            }
        });
    }
    Ok((input_mask, loss_mask))
}
