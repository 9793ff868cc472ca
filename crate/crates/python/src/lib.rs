//! Python bindings: observation-mask generators, the Lorenz benchmark
//! pipelines, sequential-autoencoder training/inference, LDS fitting, and
//! the evaluation metrics, all operating on numpy arrays.

use ndarray::{Array1, Array2, Array3};
use numpy::{
    IntoPyArray, PyArray1, PyArray2, PyArray3, PyReadonlyArray1, PyReadonlyArray2,
    PyReadonlyArray3,
};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use sbtt_core::emissions::EmissionKind;
use sbtt_core::rng::RngState;
use sbtt_core::seqae::{SeqAeDims, SeqAeHyper, SeqAeParams, TrainMode};
use sbtt_core::synth::LorenzConfig;
use sbtt_core::tensorio::{SampleTimes, TimeSeriesBatch};

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn mask_to_bool(mask: &PyReadonlyArray3<'_, u8>) -> Array3<bool> {
    mask.as_array().mapv(|v| v != 0)
}

fn bool_to_u8(mask: &Array3<bool>) -> Array3<u8> {
    mask.mapv(u8::from)
}

fn batch_from_arrays(
    values: PyReadonlyArray3<'_, f64>,
    mask: PyReadonlyArray3<'_, u8>,
    bin_width: f64,
) -> PyResult<TimeSeriesBatch> {
    let values = values.as_array().to_owned();
    let mask = mask_to_bool(&mask);
    let t_len = values.dim().1;
    let times = Array1::from_iter((0..t_len).map(|t| t as f64 * bin_width));
    TimeSeriesBatch::new(values, mask, SampleTimes::PerTime(times), bin_width, None).map_err(err)
}

/// Per-timestep random drop mask; exactly round(fraction·channels) channels
/// are missing at every (trial, time).
#[pyfunction]
fn random_drop_mask(
    py: Python<'_>,
    trials: usize,
    time: usize,
    channels: usize,
    fraction: f64,
    seed: u64,
) -> PyResult<Py<PyArray3<u8>>> {
    let mask = sbtt_core::sampling::random_drop_mask(
        (trials, time, channels),
        fraction,
        &RngState::new(seed),
    )
    .map_err(err)?;
    Ok(bool_to_u8(&mask).into_pyarray_bound(py).unbind())
}

/// Splits an observation mask into disjoint (input, loss) portions; each
/// observed entry lands in the loss portion with probability cd_rate.
#[pyfunction]
fn coordinated_dropout_split(
    py: Python<'_>,
    mask: PyReadonlyArray3<'_, u8>,
    cd_rate: f64,
    seed: u64,
) -> PyResult<(Py<PyArray3<u8>>, Py<PyArray3<u8>>)> {
    let mask = mask_to_bool(&mask);
    let (input_mask, loss_mask) = sbtt_core::sampling::coordinated_dropout_split(
        &mask.view(),
        cd_rate,
        &RngState::new(seed),
    )
    .map_err(err)?;
    Ok((
        bool_to_u8(&input_mask).into_pyarray_bound(py).unbind(),
        bool_to_u8(&loss_mask).into_pyarray_bound(py).unbind(),
    ))
}

/// Lorenz-driven Poisson spiking benchmark. Returns (spikes, latents,
/// condition_ids) with spikes `[trials, time, neurons]` on a 100 Hz grid.
#[pyfunction]
#[pyo3(signature = (n_neurons=30, baseline_hz=3.0, w_sd=0.5, n_conditions=32,
                    trials_per_condition=16, downsample_factor=2, trial_ms=900, seed=0))]
#[allow(clippy::too_many_arguments)]
fn lorenz_poisson_dataset(
    py: Python<'_>,
    n_neurons: usize,
    baseline_hz: f64,
    w_sd: f64,
    n_conditions: usize,
    trials_per_condition: usize,
    downsample_factor: usize,
    trial_ms: usize,
    seed: u64,
) -> PyResult<(Py<PyArray3<f64>>, Py<PyArray3<f64>>, Py<PyArray1<i64>>)> {
    let lorenz = LorenzConfig {
        downsample_factor,
        n_conditions,
        trial_ms,
        seed,
        ..Default::default()
    };
    let (batch, latents, ids) = sbtt_core::synth::generate_poisson_dataset(
        &lorenz,
        n_neurons,
        baseline_hz,
        w_sd,
        trials_per_condition,
    )
    .map_err(err)?;
    let ids: Array1<i64> = Array1::from_iter(ids.into_iter().map(|c| c as i64));
    Ok((
        batch.values.into_pyarray_bound(py).unbind(),
        latents.into_pyarray_bound(py).unbind(),
        ids.into_pyarray_bound(py).unbind(),
    ))
}

/// Sequential autoencoder trained with selective backpropagation through
/// time. Construct, `train`, then `infer`; or `load` a checkpoint written
/// by either this module or the CLI.
#[pyclass]
struct SeqAe {
    params: SeqAeParams,
    hyper: SeqAeHyper,
}

#[pymethods]
impl SeqAe {
    #[new]
    #[pyo3(signature = (n_channels, enc_hidden=32, latent=16, gen_hidden=50, factors=12,
                        emission="poisson", seed=0, zig_loc=None))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        n_channels: usize,
        enc_hidden: usize,
        latent: usize,
        gen_hidden: usize,
        factors: usize,
        emission: &str,
        seed: u64,
        zig_loc: Option<PyReadonlyArray1<'_, f64>>,
    ) -> PyResult<Self> {
        let emission = match emission {
            "poisson" => EmissionKind::Poisson,
            "zig" => EmissionKind::Zig,
            other => return Err(PyValueError::new_err(format!("unknown emission {other:?}"))),
        };
        let dims = SeqAeDims { n_channels, enc_hidden, latent, gen_hidden, factors };
        let loc = zig_loc.map(|a| a.as_array().to_owned());
        let params = SeqAeParams::init(dims, emission, loc, false, &RngState::new(seed))
            .map_err(err)?;
        let hyper = SeqAeHyper::defaults(dims, emission, seed);
        Ok(SeqAe { params, hyper })
    }

    /// Trains on values `[trials, time, channels]` under the given
    /// observation mask. Returns the per-epoch validation reconstruction
    /// NLL.
    #[pyo3(signature = (values, mask, bin_width=0.01, epochs=50, lr=1e-3, batch_size=128,
                        kl_weight_ic=1e-4, l2_generator=1e-4, dropout_rate=0.05, cd_rate=0.0,
                        ramp_epochs=20))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        &mut self,
        py: Python<'_>,
        values: PyReadonlyArray3<'_, f64>,
        mask: PyReadonlyArray3<'_, u8>,
        bin_width: f64,
        epochs: usize,
        lr: f64,
        batch_size: usize,
        kl_weight_ic: f64,
        l2_generator: f64,
        dropout_rate: f64,
        cd_rate: f64,
        ramp_epochs: usize,
    ) -> PyResult<Py<PyArray1<f64>>> {
        let batch = batch_from_arrays(values, mask, bin_width)?;
        self.hyper.epochs = epochs;
        self.hyper.lr = lr;
        self.hyper.batch_size = batch_size;
        self.hyper.kl_weight_ic = kl_weight_ic;
        self.hyper.l2_generator = l2_generator;
        self.hyper.dropout_rate = dropout_rate;
        self.hyper.cd_rate = cd_rate;
        self.hyper.ramp_epochs = ramp_epochs;
        let out = sbtt_core::seqae::train_seqae(
            &batch,
            Some(self.params.clone()),
            &self.hyper,
            TrainMode::Fresh,
        )
        .map_err(err)?;
        if out.diverged {
            return Err(PyValueError::new_err("training diverged"));
        }
        self.params = out.params;
        let curve = Array1::from_iter(out.log.iter().map(|row| row.val_recon));
        Ok(curve.into_pyarray_bound(py).unbind())
    }

    /// Posterior-mean inference; returns (rates, factors) dense on the
    /// batch's full time grid.
    #[pyo3(signature = (values, mask, bin_width=0.01))]
    fn infer(
        &self,
        py: Python<'_>,
        values: PyReadonlyArray3<'_, f64>,
        mask: PyReadonlyArray3<'_, u8>,
        bin_width: f64,
    ) -> PyResult<(Py<PyArray3<f64>>, Py<PyArray3<f64>>)> {
        let batch = batch_from_arrays(values, mask, bin_width)?;
        let out = sbtt_core::seqae::infer(&self.params, &batch).map_err(err)?;
        Ok((
            out.rates.into_pyarray_bound(py).unbind(),
            out.factors.into_pyarray_bound(py).unbind(),
        ))
    }

    fn save(&self, path: &str) -> PyResult<()> {
        sbtt_core::seqae::save_checkpoint(&self.params, &self.hyper, std::path::Path::new(path))
            .map_err(err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let (params, hyper) =
            sbtt_core::seqae::load_checkpoint(std::path::Path::new(path)).map_err(err)?;
        Ok(SeqAe { params, hyper })
    }

    #[getter]
    fn n_params(&self) -> usize {
        self.params.n_params()
    }
}

/// Fits a linear dynamical system by masked gradient descent. Takes
/// observations `[trials, time, obs]`, a matching mask, and known initial
/// states `[trials, latent]`; returns (A, H, loss_history).
#[pyfunction]
#[pyo3(signature = (values, mask, x0, lr=0.05, epochs=2000, seed=0))]
fn train_lds(
    py: Python<'_>,
    values: PyReadonlyArray3<'_, f64>,
    mask: PyReadonlyArray3<'_, u8>,
    x0: PyReadonlyArray2<'_, f64>,
    lr: f64,
    epochs: usize,
    seed: u64,
) -> PyResult<(Py<PyArray2<f64>>, Py<PyArray2<f64>>, Py<PyArray1<f64>>)> {
    let values = values.as_array();
    let mask = mask.as_array();
    let x0 = x0.as_array();
    let (n_trials, _, n_obs) = values.dim();
    if x0.nrows() != n_trials {
        return Err(PyValueError::new_err("x0 must have one row per trial"));
    }
    let d = x0.ncols();
    let trials: Vec<sbtt_core::lds::LdsTrial> = (0..n_trials)
        .map(|i| sbtt_core::lds::LdsTrial {
            x0: x0.row(i).to_owned(),
            values: values.index_axis(ndarray::Axis(0), i).to_owned(),
            mask: mask.index_axis(ndarray::Axis(0), i).mapv(|v| v != 0),
        })
        .collect();
    let mut rng = RngState::new(seed).rng();
    use rand::Rng;
    let init = sbtt_core::lds::LdsParams::new(
        Array2::eye(d) * 0.9,
        Array2::from_shape_simple_fn((n_obs, d), || 0.1 * (rng.gen::<f64>() - 0.5)),
    )
    .map_err(err)?;
    let cfg = sbtt_core::lds::LdsTrainConfig { lr, epochs, estimate_x0: false };
    let out = sbtt_core::lds::train_lds(&trials, &init, &cfg).map_err(err)?;
    Ok((
        out.params.a.into_pyarray_bound(py).unbind(),
        out.params.h.into_pyarray_bound(py).unbind(),
        Array1::from_vec(out.loss_history).into_pyarray_bound(py).unbind(),
    ))
}

/// Coefficient of determination per column plus its mean.
#[pyfunction]
fn r2(
    py: Python<'_>,
    y_true: PyReadonlyArray2<'_, f64>,
    y_pred: PyReadonlyArray2<'_, f64>,
) -> PyResult<(Py<PyArray1<f64>>, f64)> {
    let t = y_true.as_array().to_owned();
    let p = y_pred.as_array().to_owned();
    if t.dim() != p.dim() {
        return Err(PyValueError::new_err("shape mismatch"));
    }
    let score = sbtt_core::eval::r2(&t, &p);
    Ok((Array1::from_vec(score.per_dim).into_pyarray_bound(py).unbind(), score.mean))
}

/// Poisson pseudo-R² of predicted rates against observed counts.
#[pyfunction]
fn pseudo_r2(
    counts: PyReadonlyArray1<'_, f64>,
    rates: PyReadonlyArray1<'_, f64>,
    null_rate: f64,
) -> PyResult<f64> {
    sbtt_core::eval::pseudo_r2(
        &counts.as_array().to_owned(),
        &rates.as_array().to_owned(),
        null_rate,
    )
    .map_err(err)
}

/// Magnitude-squared coherence; returns (frequencies, coherence).
#[pyfunction]
#[pyo3(signature = (x, y, window_len=35, overlap=25, sample_rate=100.0))]
fn coherence(
    py: Python<'_>,
    x: PyReadonlyArray1<'_, f64>,
    y: PyReadonlyArray1<'_, f64>,
    window_len: usize,
    overlap: usize,
    sample_rate: f64,
) -> PyResult<(Py<PyArray1<f64>>, Py<PyArray1<f64>>)> {
    let (freqs, coh) = sbtt_core::eval::coherence(
        x.as_array().as_slice().ok_or_else(|| PyValueError::new_err("x not contiguous"))?,
        y.as_array().as_slice().ok_or_else(|| PyValueError::new_err("y not contiguous"))?,
        window_len,
        overlap,
        sample_rate,
        None,
    )
    .map_err(err)?;
    Ok((
        Array1::from_vec(freqs).into_pyarray_bound(py).unbind(),
        Array1::from_vec(coh).into_pyarray_bound(py).unbind(),
    ))
}

#[pymodule]
fn sbtt_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<SeqAe>()?;
    m.add_function(wrap_pyfunction!(random_drop_mask, m)?)?;
    m.add_function(wrap_pyfunction!(coordinated_dropout_split, m)?)?;
    m.add_function(wrap_pyfunction!(lorenz_poisson_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train_lds, m)?)?;
    m.add_function(wrap_pyfunction!(r2, m)?)?;
    m.add_function(wrap_pyfunction!(pseudo_r2, m)?)?;
    m.add_function(wrap_pyfunction!(coherence, m)?)?;
    Ok(())
}
