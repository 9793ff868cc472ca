//! Data containers, observation masks, and the on-disk tensor format.
//!
//! A stored tensor is a pair of files: `<name>.manifest.json` describing
//! dims/dtype/order/role, and `<name>.bin` holding the raw little-endian,
//! row-major payload. A [`TimeSeriesBatch`] is a directory of three such
//! tensors (values, mask, sample_times) plus a small `batch.json` with the
//! scalar metadata.
//!
//! Masked entries are canonically stored as zero. Constructors enforce this,
//! so downstream code can feed `values` straight into a model without
//! re-masking.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Array3, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
    U8,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
            Dtype::U8 => 1,
        }
    }
}

/// JSON sidecar describing one binary payload.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorManifest {
    pub dims: Vec<usize>,
    pub dtype: Dtype,
    pub order: String,
    pub role: String,
}

pub const ORDER_ROW_MAJOR: &str = "row-major";

const ROLE_VALUES: &str = "values";
const ROLE_MASK: &str = "mask";
const ROLE_TIMES_PER_TIME: &str = "sample_times_per_time";
const ROLE_TIMES_PER_CHANNEL: &str = "sample_times_per_time_per_channel";

/// Decoded payload of a stored tensor.
#[derive(Debug, Clone)]
pub enum TensorPayload {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl TensorPayload {
    pub fn len(&self) -> usize {
        match self {
            TensorPayload::F32(v) => v.len(),
            TensorPayload::F64(v) => v.len(),
            TensorPayload::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn manifest_path(dir: &Path, name: &str) -> std::path::PathBuf {
    dir.join(format!("{name}.manifest.json"))
}

fn payload_path(dir: &Path, name: &str) -> std::path::PathBuf {
    dir.join(format!("{name}.bin"))
}

/// Writes `<name>.manifest.json` + `<name>.bin` under `dir`.
pub fn write_tensor_f64(
    dir: &Path,
    name: &str,
    role: &str,
    dims: &[usize],
    data: &[f64],
) -> Result<()> {
    let expected: usize = dims.iter().product();
    if data.len() != expected {
        return Err(Error::shape(format!(
            "tensor {name}: dims {dims:?} imply {expected} elements, got {}",
            data.len()
        )));
    }
    let mut bytes = Vec::with_capacity(data.len() * 8);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_tensor_raw(dir, name, role, dims, Dtype::F64, &bytes)
}

pub fn write_tensor_u8(dir: &Path, name: &str, role: &str, dims: &[usize], data: &[u8]) -> Result<()> {
    let expected: usize = dims.iter().product();
    if data.len() != expected {
        return Err(Error::shape(format!(
            "tensor {name}: dims {dims:?} imply {expected} elements, got {}",
            data.len()
        )));
    }
    write_tensor_raw(dir, name, role, dims, Dtype::U8, data)
}

fn write_tensor_raw(
    dir: &Path,
    name: &str,
    role: &str,
    dims: &[usize],
    dtype: Dtype,
    bytes: &[u8],
) -> Result<()> {
    let manifest = TensorManifest {
        dims: dims.to_vec(),
        dtype,
        order: ORDER_ROW_MAJOR.to_string(),
        role: role.to_string(),
    };
    let mpath = manifest_path(dir, name);
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::format(format!("manifest for {name}: {e}")))?;
    fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
    let ppath = payload_path(dir, name);
    fs::write(&ppath, bytes).map_err(|e| Error::io(&ppath, e))?;
    Ok(())
}

/// Reads a tensor pair back, checking the payload length against the
/// manifest before decoding.
pub fn read_tensor(dir: &Path, name: &str) -> Result<(TensorManifest, TensorPayload)> {
    let mpath = manifest_path(dir, name);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: TensorManifest =
        serde_json::from_str(&text).map_err(|e| Error::format(format!("{}: {e}", mpath.display())))?;
    if manifest.order != ORDER_ROW_MAJOR {
        return Err(Error::format(format!(
            "tensor {name}: unsupported order {:?}",
            manifest.order
        )));
    }
    let ppath = payload_path(dir, name);
    let bytes = fs::read(&ppath).map_err(|e| Error::io(&ppath, e))?;
    let expected: usize = manifest.dims.iter().product::<usize>() * manifest.dtype.size();
    if bytes.len() != expected {
        return Err(Error::format(format!(
            "tensor {name}: payload is {} bytes, manifest implies {expected}",
            bytes.len()
        )));
    }
    let payload = match manifest.dtype {
        Dtype::F64 => TensorPayload::F64(
            bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        Dtype::F32 => TensorPayload::F32(
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        Dtype::U8 => TensorPayload::U8(bytes),
    };
    Ok((manifest, payload))
}

/// Per-sample timestamps: one per time step, or one per (time, channel) as
/// produced by raster scanning.
#[derive(Debug, Clone, PartialEq)]
pub enum SampleTimes {
    PerTime(Array1<f64>),
    PerTimePerChannel(Array2<f64>),
}

impl SampleTimes {
    pub fn n_steps(&self) -> usize {
        match self {
            SampleTimes::PerTime(t) => t.len(),
            SampleTimes::PerTimePerChannel(t) => t.nrows(),
        }
    }

    fn validate(&self, n_steps: usize, n_channels: usize) -> Result<()> {
        match self {
            SampleTimes::PerTime(t) => {
                if t.len() != n_steps {
                    return Err(Error::shape(format!(
                        "sample_times has {} entries for {} time steps",
                        t.len(),
                        n_steps
                    )));
                }
                for w in t.windows(2) {
                    if !(w[1] > w[0]) {
                        return Err(Error::numeric(
                            "sample_times must be strictly increasing".to_string(),
                        ));
                    }
                }
            }
            SampleTimes::PerTimePerChannel(t) => {
                if t.nrows() != n_steps || t.ncols() != n_channels {
                    return Err(Error::shape(format!(
                        "sample_times is {}x{}, batch is {n_steps} steps x {n_channels} channels",
                        t.nrows(),
                        t.ncols()
                    )));
                }
                for c in 0..n_channels {
                    for r in 1..t.nrows() {
                        if !(t[[r, c]] > t[[r - 1, c]]) {
                            return Err(Error::numeric(format!(
                                "sample_times not strictly increasing along time for channel {c}"
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Trials × time × channels data plus its observation mask: the carrier
/// every other module consumes. `mask[t, i] == true` means channel i was
/// actually measured at step t; all other entries hold zero.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesBatch {
    pub values: Array3<f64>,
    pub mask: Array3<bool>,
    pub sample_times: SampleTimes,
    /// Width of one time bin, seconds.
    pub bin_width: f64,
    pub channel_names: Option<Vec<String>>,
}

impl TimeSeriesBatch {
    /// Validates shapes and timestamps, then canonicalizes by zeroing every
    /// masked entry of `values`.
    pub fn new(
        values: Array3<f64>,
        mask: Array3<bool>,
        sample_times: SampleTimes,
        bin_width: f64,
        channel_names: Option<Vec<String>>,
    ) -> Result<Self> {
        if values.dim() != mask.dim() {
            return Err(Error::shape(format!(
                "values {:?} vs mask {:?}",
                values.dim(),
                mask.dim()
            )));
        }
        let (_, n_steps, n_channels) = values.dim();
        sample_times.validate(n_steps, n_channels)?;
        if !(bin_width > 0.0) {
            return Err(Error::numeric(format!("bin_width must be positive, got {bin_width}")));
        }
        if let Some(names) = &channel_names {
            if names.len() != n_channels {
                return Err(Error::shape(format!(
                    "{} channel names for {n_channels} channels",
                    names.len()
                )));
            }
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("batch values contain non-finite entries".to_string()));
        }
        let values = zero_fill(&values.view(), &mask.view());
        Ok(TimeSeriesBatch { values, mask, sample_times, bin_width, channel_names })
    }

    pub fn n_trials(&self) -> usize {
        self.values.dim().0
    }

    pub fn n_steps(&self) -> usize {
        self.values.dim().1
    }

    pub fn n_channels(&self) -> usize {
        self.values.dim().2
    }

    /// Values with masked entries forced to exactly zero. The stored tensor
    /// is already canonical, so this is idempotent.
    pub fn zero_fill(&self) -> Array3<f64> {
        zero_fill(&self.values.view(), &self.mask.view())
    }

    pub fn observed_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Same data under a different observation mask (re-canonicalized).
    pub fn with_mask(&self, mask: Array3<bool>) -> Result<Self> {
        TimeSeriesBatch::new(
            self.values.clone(),
            mask,
            self.sample_times.clone(),
            self.bin_width,
            self.channel_names.clone(),
        )
    }

    /// Keeps the listed trials, in the given order.
    pub fn select_trials(&self, idx: &[usize]) -> Result<Self> {
        let (n, t, c) = self.values.dim();
        let mut values = Array3::zeros((idx.len(), t, c));
        let mut mask = Array3::from_elem((idx.len(), t, c), false);
        for (row, &i) in idx.iter().enumerate() {
            if i >= n {
                return Err(Error::shape(format!("trial index {i} out of range ({n} trials)")));
            }
            values.index_axis_mut(ndarray::Axis(0), row).assign(&self.values.index_axis(ndarray::Axis(0), i));
            mask.index_axis_mut(ndarray::Axis(0), row).assign(&self.mask.index_axis(ndarray::Axis(0), i));
        }
        TimeSeriesBatch::new(values, mask, self.sample_times.clone(), self.bin_width, self.channel_names.clone())
    }
}

/// Copy of `values` with masked entries set to exactly zero.
pub fn zero_fill(values: &ArrayView3<f64>, mask: &ArrayView3<bool>) -> Array3<f64> {
    let mut out = values.to_owned();
    out.zip_mut_with(mask, |v, &m| {
        if !m {
            *v = 0.0;
        }
    });
    out
}

#[derive(Debug, Serialize, Deserialize)]
struct BatchMeta {
    bin_width: f64,
    channel_names: Option<Vec<String>>,
}

/// Writes a batch as a directory of tensor pairs plus `batch.json`.
/// Round-trips bit-exactly through [`load_batch`].
pub fn save_batch(batch: &TimeSeriesBatch, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (n, t, c) = batch.values.dim();
    let values: Vec<f64> = batch.values.iter().copied().collect();
    write_tensor_f64(dir, "values", ROLE_VALUES, &[n, t, c], &values)?;
    let mask: Vec<u8> = batch.mask.iter().map(|&m| u8::from(m)).collect();
    write_tensor_u8(dir, "mask", ROLE_MASK, &[n, t, c], &mask)?;
    match &batch.sample_times {
        SampleTimes::PerTime(times) => {
            let data: Vec<f64> = times.iter().copied().collect();
            write_tensor_f64(dir, "sample_times", ROLE_TIMES_PER_TIME, &[t], &data)?;
        }
        SampleTimes::PerTimePerChannel(times) => {
            let data: Vec<f64> = times.iter().copied().collect();
            write_tensor_f64(dir, "sample_times", ROLE_TIMES_PER_CHANNEL, &[t, c], &data)?;
        }
    }
    let meta = BatchMeta { bin_width: batch.bin_width, channel_names: batch.channel_names.clone() };
    let mpath = dir.join("batch.json");
    let text = serde_json::to_string_pretty(&meta)
        .map_err(|e| Error::format(format!("batch.json: {e}")))?;
    fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
    Ok(())
}

/// Loads a batch directory written by [`save_batch`], re-validating every
/// invariant (shapes, payload sizes, monotonic timestamps) and zero-filling
/// any masked entry that was stored nonzero.
pub fn load_batch(dir: &Path) -> Result<TimeSeriesBatch> {
    let (vman, vpay) = read_tensor(dir, "values")?;
    if vman.dims.len() != 3 {
        return Err(Error::format(format!("values tensor must be 3-d, got {:?}", vman.dims)));
    }
    let (n, t, c) = (vman.dims[0], vman.dims[1], vman.dims[2]);
    let values = match vpay {
        TensorPayload::F64(data) => Array3::from_shape_vec((n, t, c), data)
            .map_err(|e| Error::shape(e.to_string()))?,
        TensorPayload::F32(data) => Array3::from_shape_vec(
            (n, t, c),
            data.into_iter().map(f64::from).collect(),
        )
        .map_err(|e| Error::shape(e.to_string()))?,
        TensorPayload::U8(_) => {
            return Err(Error::format("values tensor has dtype u8".to_string()))
        }
    };

    let (mman, mpay) = read_tensor(dir, "mask")?;
    if mman.dims != vman.dims {
        return Err(Error::shape(format!(
            "mask dims {:?} differ from values dims {:?}",
            mman.dims, vman.dims
        )));
    }
    let mask = match mpay {
        TensorPayload::U8(data) => {
            if let Some(bad) = data.iter().find(|&&b| b > 1) {
                return Err(Error::format(format!("mask byte {bad} is neither 0 nor 1")));
            }
            Array3::from_shape_vec((n, t, c), data.into_iter().map(|b| b == 1).collect())
                .map_err(|e| Error::shape(e.to_string()))?
        }
        _ => return Err(Error::format("mask tensor must have dtype u8".to_string())),
    };

    let (tman, tpay) = read_tensor(dir, "sample_times")?;
    let tdata = match tpay {
        TensorPayload::F64(data) => data,
        _ => return Err(Error::format("sample_times tensor must have dtype f64".to_string())),
    };
    let sample_times = match tman.role.as_str() {
        ROLE_TIMES_PER_TIME => SampleTimes::PerTime(Array1::from_vec(tdata)),
        ROLE_TIMES_PER_CHANNEL => SampleTimes::PerTimePerChannel(
            Array2::from_shape_vec(
                (tman.dims.first().copied().unwrap_or(0), tman.dims.get(1).copied().unwrap_or(0)),
                tdata,
            )
            .map_err(|e| Error::shape(e.to_string()))?,
        ),
        other => {
            return Err(Error::format(format!("unknown sample_times role {other:?}")));
        }
    };

    let mpath = dir.join("batch.json");
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let meta: BatchMeta =
        serde_json::from_str(&text).map_err(|e| Error::format(format!("batch.json: {e}")))?;

    TimeSeriesBatch::new(values, mask, sample_times, meta.bin_width, meta.channel_names)
}
