//! Evaluation stack: cross-validated ridge regression onto ground truth,
//! R², Poisson-GLM pseudo-R², magnitude-squared coherence, PSTH
//! correlations, and linear resampling.
//!
//! Everything here is deterministic: cross-validation splits are interleaved
//! by sample index rather than drawn from an RNG, so repeated runs emit
//! byte-identical metric tables.

use ndarray::{s, Array1, Array2, Array3, Axis};
use num_complex::Complex64;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::{cholesky_solve, dft, fft_in_place, hann, ln_factorial};

/// Linear model with an unpenalized intercept. `weights` is
/// `[features + 1, targets]`; the final row is the intercept.
#[derive(Debug, Clone, PartialEq)]
pub struct RidgeModel {
    pub weights: Array2<f64>,
    pub lambda: f64,
}

impl RidgeModel {
    pub fn n_features(&self) -> usize {
        self.weights.nrows() - 1
    }

    pub fn predict(&self, x: &Array2<f64>) -> Array2<f64> {
        let coef = self.weights.slice(s![..self.n_features(), ..]);
        let intercept = self.weights.row(self.n_features());
        x.dot(&coef) + &intercept
    }
}

/// Closed-form ridge fit: center X and Y, solve (XᵀX + λI)W = XᵀY, recover
/// the intercept from the means. λ = 0 fails on singular designs.
pub fn ridge_fit(x: &Array2<f64>, y: &Array2<f64>, lambda: f64) -> Result<RidgeModel> {
    let (n, f) = x.dim();
    if y.nrows() != n {
        return Err(Error::shape(format!("{n} samples in X vs {} in Y", y.nrows())));
    }
    if lambda < 0.0 {
        return Err(Error::numeric(format!("lambda must be non-negative, got {lambda}")));
    }
    let x_mean = x.mean_axis(Axis(0)).expect("nonempty X");
    let y_mean = y.mean_axis(Axis(0)).expect("nonempty Y");
    let xc = x - &x_mean;
    let yc = y - &y_mean;
    let mut gram = xc.t().dot(&xc);
    for i in 0..f {
        gram[[i, i]] += lambda;
    }
    let rhs = xc.t().dot(&yc);
    let coef = cholesky_solve(&gram, &rhs)
        .map_err(|e| Error::numeric(format!("ridge solve failed (lambda={lambda}): {e}")))?;
    let intercept = &y_mean - &x_mean.dot(&coef);
    let mut weights = Array2::zeros((f + 1, y.ncols()));
    weights.slice_mut(s![..f, ..]).assign(&coef);
    weights.row_mut(f).assign(&intercept);
    Ok(RidgeModel { weights, lambda })
}

/// Outcome of the interleaved cross-validation protocol.
#[derive(Debug, Clone)]
pub struct RidgeCvResult {
    /// Final model fit on all samples with the winning lambda.
    pub model: RidgeModel,
    /// Mean held-out R² across the interleaved outer repeats.
    pub heldout_r2: f64,
    pub lambda: f64,
    pub per_repeat_r2: Vec<f64>,
}

/// Cross-validated ridge regression: five interleaved 80/20 outer repeats;
/// within each training split, 5-fold CV picks the regularization strength
/// by mean validation R²; the winning lambda is refit on the full training
/// split and scored on the held-out 20%. Reported R² is the mean across
/// repeats. Lambdas whose solve fails (singular design at λ = 0) are
/// skipped with a warning.
pub fn ridge_cv(x: &Array2<f64>, y: &Array2<f64>, lambdas: &[f64]) -> Result<RidgeCvResult> {
    const REPEATS: usize = 5;
    const INNER_FOLDS: usize = 5;
    let n = x.nrows();
    if lambdas.is_empty() {
        return Err(Error::numeric("ridge_cv needs at least one lambda".to_string()));
    }
    if n < REPEATS * 2 {
        return Err(Error::shape(format!("ridge_cv needs at least {} samples, got {n}", REPEATS * 2)));
    }

    let rows = |idx: &[usize], m: &Array2<f64>| -> Array2<f64> {
        let mut out = Array2::zeros((idx.len(), m.ncols()));
        for (row, &i) in idx.iter().enumerate() {
            out.row_mut(row).assign(&m.row(i));
        }
        out
    };

    let mut per_repeat = Vec::with_capacity(REPEATS);
    let mut lambda_votes = vec![0usize; lambdas.len()];
    for rep in 0..REPEATS {
        let test_idx: Vec<usize> = (0..n).filter(|i| i % REPEATS == rep).collect();
        let train_idx: Vec<usize> = (0..n).filter(|i| i % REPEATS != rep).collect();
        let xtr = rows(&train_idx, x);
        let ytr = rows(&train_idx, y);

        // inner 5-fold CV over the training split, interleaved by position
        let mut best: Option<(usize, f64)> = None;
        for (li, &lambda) in lambdas.iter().enumerate() {
            let mut fold_scores = Vec::with_capacity(INNER_FOLDS);
            let mut failed = false;
            for fold in 0..INNER_FOLDS {
                let val_pos: Vec<usize> =
                    (0..train_idx.len()).filter(|p| p % INNER_FOLDS == fold).collect();
                let fit_pos: Vec<usize> =
                    (0..train_idx.len()).filter(|p| p % INNER_FOLDS != fold).collect();
                match ridge_fit(&rows(&fit_pos, &xtr), &rows(&fit_pos, &ytr), lambda) {
                    Ok(model) => {
                        let pred = model.predict(&rows(&val_pos, &xtr));
                        fold_scores.push(r2(&rows(&val_pos, &ytr), &pred).mean);
                    }
                    Err(_) => {
                        eprintln!("warning: ridge solve failed for lambda={lambda}, skipping");
                        failed = true;
                        break;
                    }
                }
            }
            if failed {
                continue;
            }
            let mean_score = fold_scores.iter().sum::<f64>() / fold_scores.len() as f64;
            if best.map_or(true, |(_, s)| mean_score > s) {
                best = Some((li, mean_score));
            }
        }
        let (best_li, _) = best.ok_or_else(|| {
            Error::numeric("ridge_cv: every lambda failed to solve".to_string())
        })?;
        lambda_votes[best_li] += 1;

        let model = ridge_fit(&xtr, &ytr, lambdas[best_li])?;
        let pred = model.predict(&rows(&test_idx, x));
        per_repeat.push(r2(&rows(&test_idx, y), &pred).mean);
    }

    let winner = lambda_votes
        .iter()
        .enumerate()
        .max_by_key(|(_, &v)| v)
        .map(|(i, _)| i)
        .expect("at least one lambda");
    let model = ridge_fit(x, y, lambdas[winner])?;
    let heldout = per_repeat.iter().sum::<f64>() / per_repeat.len() as f64;
    Ok(RidgeCvResult { model, heldout_r2: heldout, lambda: lambdas[winner], per_repeat_r2: per_repeat })
}

/// Log-spaced default lambda grid, 1e-4 … 1e4.
pub fn default_lambda_grid() -> Vec<f64> {
    (0..9).map(|i| 10f64.powi(i - 4)).collect()
}

/// Coefficient of determination per target dimension and its mean.
/// A zero-variance target dimension yields NaN there and is excluded from
/// the mean; the mean itself is NaN when no dimension is defined.
#[derive(Debug, Clone)]
pub struct R2Result {
    pub per_dim: Vec<f64>,
    pub mean: f64,
}

pub fn r2(y_true: &Array2<f64>, y_pred: &Array2<f64>) -> R2Result {
    assert_eq!(y_true.dim(), y_pred.dim(), "r2 shape mismatch");
    let n = y_true.nrows() as f64;
    let mut per_dim = Vec::with_capacity(y_true.ncols());
    for d in 0..y_true.ncols() {
        let col_t = y_true.column(d);
        let col_p = y_pred.column(d);
        let mean = col_t.sum() / n;
        let ss_tot: f64 = col_t.iter().map(|&v| (v - mean) * (v - mean)).sum();
        let ss_res: f64 = col_t.iter().zip(col_p.iter()).map(|(&t, &p)| (t - p) * (t - p)).sum();
        per_dim.push(if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { f64::NAN });
    }
    let defined: Vec<f64> = per_dim.iter().copied().filter(|v| v.is_finite()).collect();
    let mean = if defined.is_empty() {
        f64::NAN
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };
    R2Result { per_dim, mean }
}

/// Result of a Poisson GLM fit with exponential link.
#[derive(Debug, Clone)]
pub struct GlmFit {
    /// Intercept first, then one weight per feature.
    pub weights: Array1<f64>,
    pub converged: bool,
    pub iterations: usize,
}

impl GlmFit {
    pub fn rates(&self, x: &Array2<f64>) -> Array1<f64> {
        let (n, f) = x.dim();
        Array1::from_iter((0..n).map(|i| {
            let mut a = self.weights[0];
            for j in 0..f {
                a += self.weights[j + 1] * x[[i, j]];
            }
            a.exp()
        }))
    }
}

/// Newton–Raphson (IRLS) fit of a Poisson GLM with a small L2 penalty for
/// conditioning. Converged when max |Δw| < 1e-8, capped at 100 iterations;
/// a non-converged fit returns the best iterate with `converged = false`.
pub fn poisson_glm_fit(x: &Array2<f64>, counts: &Array1<f64>, l2: f64) -> Result<GlmFit> {
    let (n, f) = x.dim();
    if counts.len() != n {
        return Err(Error::shape(format!("{n} rows in X vs {} counts", counts.len())));
    }
    if counts.iter().any(|&c| c < 0.0 || !c.is_finite()) {
        return Err(Error::numeric("counts must be non-negative".to_string()));
    }
    // design with intercept column
    let mut design = Array2::ones((n, f + 1));
    design.slice_mut(s![.., 1..]).assign(x);
    let p = f + 1;

    let mean_count = counts.sum() / n as f64;
    let mut w = Array1::<f64>::zeros(p);
    w[0] = mean_count.max(1e-8).ln();

    let nll = |w: &Array1<f64>| -> f64 {
        let mut total = 0.0;
        for i in 0..n {
            let a: f64 = design.row(i).dot(w);
            total += a.exp() - counts[i] * a;
        }
        total + 0.5 * l2 * w.iter().map(|v| v * v).sum::<f64>()
    };

    let mut best = w.clone();
    let mut best_nll = nll(&w);
    let mut converged = false;
    let mut iterations = 0;
    for iter in 0..100 {
        iterations = iter + 1;
        let mu = Array1::from_iter((0..n).map(|i| design.row(i).dot(&w).exp()));
        // gradient and Hessian of the penalized NLL
        let resid = &mu - counts;
        let grad = design.t().dot(&resid) + &(&w * l2);
        let mut hess = Array2::<f64>::zeros((p, p));
        for i in 0..n {
            let row = design.row(i);
            for a in 0..p {
                let ra = row[a] * mu[i];
                for b in a..p {
                    hess[[a, b]] += ra * row[b];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                hess[[a, b]] = hess[[b, a]];
            }
            hess[[a, a]] += l2;
        }
        let delta = cholesky_solve(&hess, &grad.clone().insert_axis(Axis(1)))?
            .index_axis(Axis(1), 0)
            .to_owned();
        // step halving keeps Newton from overshooting on extreme rates
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..20 {
            let trial = &w - &(&delta * step);
            let trial_nll = nll(&trial);
            if trial_nll.is_finite() && trial_nll <= best_nll + 1e-12 {
                w = trial;
                best_nll = trial_nll;
                best = w.clone();
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        if delta.iter().map(|d| (d * step).abs()).fold(0.0, f64::max) < 1e-8 {
            converged = true;
            break;
        }
    }
    Ok(GlmFit { weights: best, converged, iterations })
}

/// Poisson log-likelihood with the 0·ln(0) := 0 convention, summed over
/// samples. Implemented directly (not via the emissions module) so the two
/// can serve as independent oracles for one another.
fn poisson_loglik(counts: &Array1<f64>, rates: &Array1<f64>) -> f64 {
    counts
        .iter()
        .zip(rates.iter())
        .map(|(&y, &mu)| {
            let term = if y == 0.0 { 0.0 } else { y * mu.ln() };
            term - mu - ln_factorial(y)
        })
        .sum()
}

/// Likelihood-ratio analog of R² comparing a fitted GLM against the
/// saturated model (rates = counts) and the null model (constant mean
/// rate): 1 − (lnL_sat − lnL_glm)/(lnL_sat − lnL_null).
pub fn pseudo_r2(counts: &Array1<f64>, glm_rates: &Array1<f64>, null_rate: f64) -> Result<f64> {
    if counts.len() != glm_rates.len() {
        return Err(Error::shape(format!(
            "{} counts vs {} rates",
            counts.len(),
            glm_rates.len()
        )));
    }
    let sat = poisson_loglik(counts, counts);
    let glm = poisson_loglik(counts, glm_rates);
    let null = poisson_loglik(counts, &Array1::from_elem(counts.len(), null_rate));
    let denom = sat - null;
    if denom.abs() < 1e-12 {
        return Err(Error::numeric(
            "pseudo_r2 undefined: saturated and null likelihoods coincide".to_string(),
        ));
    }
    Ok(1.0 - (sat - glm) / denom)
}

/// Welch-style magnitude-squared coherence between two equally long
/// signals: Hann-windowed segments of `window_len` samples with `overlap`
/// samples shared between consecutive segments, cross- and auto-spectra
/// averaged across segments. `nfft = None` zero-pads each segment to the
/// next power of two; `Some(n)` uses a plain DFT of length n ≥ window_len.
/// Frequencies span [0, sample_rate/2]. Fails with fewer than two segments
/// (a single segment's coherence is identically 1).
pub fn coherence(
    x: &[f64],
    y: &[f64],
    window_len: usize,
    overlap: usize,
    sample_rate: f64,
    nfft: Option<usize>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if x.len() != y.len() {
        return Err(Error::shape(format!("signal lengths differ: {} vs {}", x.len(), y.len())));
    }
    if overlap >= window_len {
        return Err(Error::numeric(format!("overlap {overlap} must be < window {window_len}")));
    }
    let hop = window_len - overlap;
    if x.len() < window_len + hop {
        return Err(Error::numeric(format!(
            "coherence needs at least 2 segments: length {} with window {window_len}, hop {hop}",
            x.len()
        )));
    }
    let n_fft = match nfft {
        Some(n) => {
            if n < window_len {
                return Err(Error::numeric(format!("nfft {n} < window_len {window_len}")));
            }
            n
        }
        None => window_len.next_power_of_two(),
    };
    let window = hann(window_len);
    let n_freq = n_fft / 2 + 1;
    let mut pxx = vec![0.0; n_freq];
    let mut pyy = vec![0.0; n_freq];
    let mut pxy = vec![Complex64::new(0.0, 0.0); n_freq];

    let spectrum = |seg: &[f64]| -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = (0..n_fft)
            .map(|i| {
                if i < window_len {
                    Complex64::new(seg[i] * window[i], 0.0)
                } else {
                    Complex64::new(0.0, 0.0)
                }
            })
            .collect();
        if n_fft.is_power_of_two() {
            fft_in_place(&mut buf);
            buf
        } else {
            dft(&buf)
        }
    };

    let mut start = 0;
    let mut segments = 0;
    while start + window_len <= x.len() {
        let fx = spectrum(&x[start..start + window_len]);
        let fy = spectrum(&y[start..start + window_len]);
        for k in 0..n_freq {
            pxx[k] += fx[k].norm_sqr();
            pyy[k] += fy[k].norm_sqr();
            pxy[k] += fx[k] * fy[k].conj();
        }
        segments += 1;
        start += hop;
    }
    debug_assert!(segments >= 2);

    let freqs: Vec<f64> = (0..n_freq).map(|k| k as f64 * sample_rate / n_fft as f64).collect();
    let coh: Vec<f64> = (0..n_freq)
        .map(|k| {
            let denom = pxx[k] * pyy[k];
            if denom > 0.0 {
                (pxy[k].norm_sqr() / denom).clamp(0.0, 1.0)
            } else {
                0.0
            }
        })
        .collect();
    Ok((freqs, coh))
}

/// Welch averaged periodogram (one-sided, unnormalized power). Used for
/// locating spectral peaks.
pub fn welch_psd(
    x: &[f64],
    window_len: usize,
    overlap: usize,
    sample_rate: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if overlap >= window_len {
        return Err(Error::numeric(format!("overlap {overlap} must be < window {window_len}")));
    }
    let hop = window_len - overlap;
    if x.len() < window_len {
        return Err(Error::numeric("signal shorter than the window".to_string()));
    }
    let n_fft = window_len.next_power_of_two();
    let window = hann(window_len);
    let n_freq = n_fft / 2 + 1;
    let mut psd = vec![0.0; n_freq];
    let mut start = 0;
    let mut segments = 0;
    while start + window_len <= x.len() {
        let mut buf: Vec<Complex64> = (0..n_fft)
            .map(|i| {
                if i < window_len {
                    Complex64::new(x[start + i] * window[i], 0.0)
                } else {
                    Complex64::new(0.0, 0.0)
                }
            })
            .collect();
        fft_in_place(&mut buf);
        for k in 0..n_freq {
            psd[k] += buf[k].norm_sqr();
        }
        segments += 1;
        start += hop;
    }
    for v in &mut psd {
        *v /= segments as f64;
    }
    let freqs: Vec<f64> = (0..n_freq).map(|k| k as f64 * sample_rate / n_fft as f64).collect();
    Ok((freqs, psd))
}

/// Frequency of the largest PSD value, ignoring the DC bin.
pub fn psd_peak_hz(freqs: &[f64], psd: &[f64]) -> f64 {
    let mut best = 1;
    for k in 2..psd.len() {
        if psd[k] > psd[best] {
            best = k;
        }
    }
    freqs[best]
}

/// Gaussian smoothing along a 1-d series, kernel truncated at ±4σ and
/// renormalized at the edges.
pub fn gaussian_smooth(series: &[f64], sd_bins: f64) -> Vec<f64> {
    if sd_bins <= 0.0 {
        return series.to_vec();
    }
    let half = (4.0 * sd_bins).ceil() as isize;
    let kernel: Vec<f64> = (-half..=half)
        .map(|i| (-0.5 * (i as f64 / sd_bins).powi(2)).exp())
        .collect();
    let n = series.len() as isize;
    (0..n)
        .map(|t| {
            let mut acc = 0.0;
            let mut mass = 0.0;
            for (j, &k) in kernel.iter().enumerate() {
                let src = t + j as isize - half;
                if src >= 0 && src < n {
                    acc += k * series[src as usize];
                    mass += k;
                }
            }
            acc / mass
        })
        .collect()
}

/// Per-neuron Pearson correlation between single-trial rates and the
/// per-condition PSTH of Gaussian-smoothed events. Conditions with fewer
/// than two trials, or neurons with zero variance on either side, yield
/// NaN.
pub fn psth_correlation(
    rates: &Array3<f64>,
    events: &Array3<f64>,
    condition_ids: &[usize],
    smoothing_sd_s: f64,
    bin_width_s: f64,
) -> Result<Vec<f64>> {
    let (n_trials, t_len, n_neurons) = rates.dim();
    if events.dim() != rates.dim() {
        return Err(Error::shape(format!("rates {:?} vs events {:?}", rates.dim(), events.dim())));
    }
    if condition_ids.len() != n_trials {
        return Err(Error::shape(format!(
            "{} condition labels for {n_trials} trials",
            condition_ids.len()
        )));
    }
    let n_conditions = condition_ids.iter().max().map_or(0, |&m| m + 1);
    if n_conditions < 2 {
        return Err(Error::numeric("psth_correlation needs at least 2 conditions".to_string()));
    }
    let sd_bins = smoothing_sd_s / bin_width_s;

    // smoothed events, then trial-average within each condition
    let mut smoothed = Array3::zeros(events.dim());
    for trial in 0..n_trials {
        for neuron in 0..n_neurons {
            let series: Vec<f64> = (0..t_len).map(|t| events[[trial, t, neuron]]).collect();
            for (t, v) in gaussian_smooth(&series, sd_bins).into_iter().enumerate() {
                smoothed[[trial, t, neuron]] = v;
            }
        }
    }
    let mut psth = Array3::<f64>::zeros((n_conditions, t_len, n_neurons));
    let mut cond_count = vec![0usize; n_conditions];
    for trial in 0..n_trials {
        let c = condition_ids[trial];
        cond_count[c] += 1;
        let mut acc = psth.index_axis_mut(Axis(0), c);
        acc += &smoothed.index_axis(Axis(0), trial);
    }
    for c in 0..n_conditions {
        if cond_count[c] < 2 {
            return Err(Error::numeric(format!("condition {c} has fewer than 2 trials")));
        }
        let mut slice = psth.index_axis_mut(Axis(0), c);
        slice /= cond_count[c] as f64;
    }

    let mut out = Vec::with_capacity(n_neurons);
    for neuron in 0..n_neurons {
        let mut xs = Vec::with_capacity(n_trials * t_len);
        let mut ys = Vec::with_capacity(n_trials * t_len);
        for trial in 0..n_trials {
            let c = condition_ids[trial];
            for t in 0..t_len {
                xs.push(rates[[trial, t, neuron]]);
                ys.push(psth[[c, t, neuron]]);
            }
        }
        out.push(pearson(&xs, &ys));
    }
    Ok(out)
}

/// Pearson correlation; NaN when either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (&a, &b) in x.iter().zip(y.iter()) {
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
        sxy += (a - mx) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        f64::NAN
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

/// Linear resampling from `rate_in` to `rate_out`. The output has
/// round(len·rate_out/rate_in) samples; positions beyond the final input
/// sample extrapolate by holding the last segment's slope.
pub fn resample_linear(x: &[f64], rate_in: f64, rate_out: f64) -> Result<Vec<f64>> {
    if !(rate_in > 0.0) || !(rate_out > 0.0) {
        return Err(Error::numeric("sample rates must be positive".to_string()));
    }
    if x.is_empty() {
        return Ok(Vec::new());
    }
    let n = x.len();
    let out_len = ((n as f64) * rate_out / rate_in).round() as usize;
    let mut out = Vec::with_capacity(out_len);
    for j in 0..out_len {
        let p = j as f64 * rate_in / rate_out;
        let i0 = p.floor() as usize;
        let v = if i0 + 1 < n {
            let frac = p - i0 as f64;
            x[i0] * (1.0 - frac) + x[i0 + 1] * frac
        } else if n >= 2 {
            // hold the last slope beyond the final sample
            let slope = x[n - 1] - x[n - 2];
            x[n - 1] + slope * (p - (n - 1) as f64)
        } else {
            x[0]
        };
        out.push(v);
    }
    Ok(out)
}

/// Resamples every (trial, channel) series of a 3-d array.
pub fn resample_linear_3d(x: &Array3<f64>, rate_in: f64, rate_out: f64) -> Result<Array3<f64>> {
    let (n_trials, t_len, n_ch) = x.dim();
    let out_len = ((t_len as f64) * rate_out / rate_in).round() as usize;
    let mut out = Array3::zeros((n_trials, out_len, n_ch));
    for trial in 0..n_trials {
        for ch in 0..n_ch {
            let series: Vec<f64> = (0..t_len).map(|t| x[[trial, t, ch]]).collect();
            let res = resample_linear(&series, rate_in, rate_out)?;
            for (t, v) in res.into_iter().enumerate() {
                out[[trial, t, ch]] = v;
            }
        }
    }
    Ok(out)
}

/// Metric bundle serialized to JSON (and to CSV tables by the CLI).
#[derive(Debug, Clone, Default, Serialize)]
pub struct EvalReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r2_per_dim: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r2_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pseudo_r2_per_unit: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coherence_freqs: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coherence: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psth_corr_per_neuron: Option<Vec<f64>>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;
    use rand::Rng;

    #[test]
    fn ridge_recovers_exact_linear_map() {
        let mut rng = RngState::new(1).rng();
        let (n, f, d) = (200, 6, 2);
        let x = Array2::from_shape_fn((n, f), |_| rng.gen::<f64>() * 2.0 - 1.0);
        let w = Array2::from_shape_fn((f, d), |_| rng.gen::<f64>() - 0.5);
        let y = x.dot(&w) + 0.7;
        let model = ridge_fit(&x, &y, 1e-10).unwrap();
        let pred = model.predict(&x);
        let score = r2(&y, &pred);
        assert!(score.mean > 1.0 - 1e-9, "R² {}", score.mean);
    }

    #[test]
    fn ridge_cv_on_noise_has_no_skill() {
        let mut rng = RngState::new(2).rng();
        let (n, f) = (300, 8);
        let x = Array2::from_shape_fn((n, f), |_| rng.gen::<f64>() - 0.5);
        let y = Array2::from_shape_fn((n, 1), |_| rng.gen::<f64>() - 0.5);
        let out = ridge_cv(&x, &y, &default_lambda_grid()).unwrap();
        assert!(out.heldout_r2 < 0.05, "held-out R² {} on pure noise", out.heldout_r2);
    }

    #[test]
    fn huge_lambda_predicts_the_mean() {
        let mut rng = RngState::new(3).rng();
        let (n, f) = (400, 4);
        let x = Array2::from_shape_fn((n, f), |_| rng.gen::<f64>() - 0.5);
        let w = Array2::from_shape_fn((f, 1), |_| rng.gen::<f64>());
        let y = x.dot(&w);
        let model = ridge_fit(&x, &y, 1e12).unwrap();
        for v in model.weights.slice(s![..f, ..]).iter() {
            assert!(v.abs() < 1e-9);
        }
        let pred = model.predict(&x);
        let score = r2(&y, &pred);
        assert!(score.mean.abs() < 1e-6, "R² {}", score.mean);
    }

    #[test]
    fn ridge_cv_heldout_close_to_train_on_signal() {
        let mut rng = RngState::new(4).rng();
        let (n, f, d) = (500, 5, 3);
        let x = Array2::from_shape_fn((n, f), |_| rng.gen::<f64>() * 2.0 - 1.0);
        let w = Array2::from_shape_fn((f, d), |_| rng.gen::<f64>() - 0.5);
        let noise = Array2::from_shape_fn((n, d), |_| 0.1 * (rng.gen::<f64>() - 0.5));
        let y = x.dot(&w) + &noise;
        let out = ridge_cv(&x, &y, &default_lambda_grid()).unwrap();
        let train_r2 = r2(&y, &out.model.predict(&x)).mean;
        assert!(out.heldout_r2 > 0.95);
        assert!(out.heldout_r2 <= train_r2 + 0.02);
    }

    #[test]
    fn r2_identities() {
        let y = ndarray::array![[1.0, 2.0], [2.0, 0.0], [3.0, 4.0], [4.0, 2.0]];
        let perfect = r2(&y, &y.clone());
        assert!((perfect.mean - 1.0).abs() < 1e-15);
        let mean_row = y.mean_axis(Axis(0)).unwrap();
        let mean_pred = Array2::from_shape_fn(y.dim(), |(_, j)| mean_row[j]);
        let null = r2(&y, &mean_pred);
        assert!(null.mean.abs() < 1e-15);
        // anti-correlated prediction goes negative
        let anti = Array2::from_shape_fn(y.dim(), |(i, j)| 2.0 * mean_row[j] - y[[i, j]]);
        assert!(r2(&y, &anti).mean < 0.0);
        // zero-variance target flagged
        let flat = Array2::from_elem((4, 1), 3.0);
        assert!(r2(&flat, &flat.clone()).per_dim[0].is_nan());
    }

    #[test]
    fn glm_intercept_only_recovers_log_mean() {
        let counts = Array1::from_elem(500, 3.0);
        let x = Array2::zeros((500, 0));
        let fit = poisson_glm_fit(&x, &counts, 1e-4).unwrap();
        assert!(fit.converged);
        assert!((fit.weights[0] - 3.0f64.ln()).abs() < 1e-3, "{}", fit.weights[0]);
    }

    #[test]
    fn glm_recovers_simulated_weights() {
        let mut rng = RngState::new(7).rng();
        let (n, f) = (10_000, 3);
        let w_true = [0.2, -0.4, 0.6];
        let b_true = 0.5;
        let x = Array2::from_shape_fn((n, f), |_| rng.gen::<f64>() * 2.0 - 1.0);
        let pois_counts = Array1::from_iter((0..n).map(|i| {
            let a: f64 = b_true + (0..f).map(|j| w_true[j] * x[[i, j]]).sum::<f64>();
            let dist = rand_distr::Poisson::new(a.exp()).unwrap();
            rand_distr::Distribution::sample(&dist, &mut rng)
        }));
        let fit = poisson_glm_fit(&x, &pois_counts, 1e-4).unwrap();
        assert!(fit.converged);
        assert!((fit.weights[0] - b_true).abs() < 0.05);
        for j in 0..f {
            assert!(
                (fit.weights[j + 1] - w_true[j]).abs() < 0.05,
                "w[{j}] = {}",
                fit.weights[j + 1]
            );
        }
    }

    #[test]
    fn glm_all_zero_counts_stays_finite() {
        let counts = Array1::zeros(200);
        let mut rng = RngState::new(8).rng();
        let x = Array2::from_shape_fn((200, 2), |_| rng.gen::<f64>() - 0.5);
        let fit = poisson_glm_fit(&x, &counts, 1e-4).unwrap();
        assert!(fit.weights.iter().all(|w| w.is_finite()));
    }

    #[test]
    fn pseudo_r2_identities_and_oracle() {
        let mut rng = RngState::new(9).rng();
        let counts = Array1::from_iter((0..400).map(|_| f64::from(rng.gen_range(0..6u8))));
        let mean = counts.sum() / counts.len() as f64;
        // saturated model scores 1 (0·ln0 convention makes this exact)
        assert!((pseudo_r2(&counts, &counts.clone(), mean).unwrap() - 1.0).abs() < 1e-12);
        // null model scores 0
        let null_rates = Array1::from_elem(counts.len(), mean);
        assert!(pseudo_r2(&counts, &null_rates, mean).unwrap().abs() < 1e-12);
        // agreement with an independently coded likelihood via emissions
        let rates = Array1::from_iter((0..400).map(|_| 0.3 + 4.0 * rng.gen::<f64>()));
        let got = pseudo_r2(&counts, &rates, mean).unwrap();
        let ll = |r: &Array1<f64>| -> f64 {
            counts
                .iter()
                .zip(r.iter())
                .map(|(&y, &mu)| {
                    if y == 0.0 {
                        -mu
                    } else {
                        -crate::emissions::poisson_nll(mu, y).unwrap()
                    }
                })
                .sum()
        };
        let sat = counts
            .iter()
            .map(|&y| if y == 0.0 { 0.0 } else { -crate::emissions::poisson_nll(y, y).unwrap() })
            .sum::<f64>();
        let want = 1.0 - (sat - ll(&rates)) / (sat - ll(&null_rates));
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        // degenerate: all counts equal
        let flat = Array1::from_elem(50, 2.0);
        assert!(pseudo_r2(&flat, &flat.clone(), 2.0).is_err());
    }

    #[test]
    fn coherence_identities() {
        let mut rng = RngState::new(11).rng();
        let x: Vec<f64> = (0..800).map(|_| rng.gen::<f64>() - 0.5).collect();
        let (_, self_coh) = coherence(&x, &x, 35, 25, 100.0, None).unwrap();
        for (k, &c) in self_coh.iter().enumerate() {
            assert!((c - 1.0).abs() < 1e-9, "bin {k}: {c}");
        }
        // pure delay keeps magnitude coherence high
        let delay = 2;
        let y: Vec<f64> = (0..x.len()).map(|i| if i < delay { 0.0 } else { x[i - delay] }).collect();
        let (_, delayed) = coherence(&x, &y, 35, 25, 100.0, None).unwrap();
        let mean = delayed.iter().sum::<f64>() / delayed.len() as f64;
        assert!(mean > 0.9, "mean coherence under pure delay: {mean}");
        // independent noise has low coherence with many segments
        let z: Vec<f64> = (0..x.len()).map(|_| rng.gen::<f64>() - 0.5).collect();
        let (_, null) = coherence(&x, &z, 35, 25, 100.0, None).unwrap();
        let null_mean = null.iter().sum::<f64>() / null.len() as f64;
        assert!(null_mean < 0.3, "null coherence {null_mean}");
        // a single segment is rejected
        assert!(coherence(&x[..35], &x[..35], 35, 25, 100.0, None).is_err());
        // exact unpadded DFT variant stays valid
        let (freqs, coh35) = coherence(&x, &x, 35, 25, 100.0, Some(35)).unwrap();
        assert_eq!(freqs.len(), 18); // 35/2 + 1
        assert!(coh35.iter().all(|&c| (c - 1.0).abs() < 1e-9));
    }

    #[test]
    fn welch_psd_finds_sine_frequency() {
        let fs = 100.0;
        let f0 = 7.0;
        let x: Vec<f64> = (0..4096)
            .map(|i| (2.0 * std::f64::consts::PI * f0 * i as f64 / fs).sin())
            .collect();
        let (freqs, psd) = welch_psd(&x, 512, 256, fs).unwrap();
        let peak = psd_peak_hz(&freqs, &psd);
        assert!((peak - f0).abs() < fs / 512.0, "peak {peak}");
    }

    #[test]
    fn psth_correlation_identities() {
        let (n_trials, t_len, n_neurons) = (8, 30, 3);
        let mut events = Array3::zeros((n_trials, t_len, n_neurons));
        let conditions: Vec<usize> = (0..n_trials).map(|i| i % 2).collect();
        for trial in 0..n_trials {
            let c = conditions[trial] as f64;
            for t in 0..t_len {
                for nrn in 0..n_neurons {
                    // condition-dependent, trial-independent signal
                    events[[trial, t, nrn]] =
                        ((t as f64 / 6.0) + c * 1.5 + nrn as f64).sin().max(0.0);
                }
            }
        }
        // rates identical to the PSTH on every trial → r = 1
        let mut smoothed = events.clone();
        for trial in 0..n_trials {
            for nrn in 0..n_neurons {
                let series: Vec<f64> = (0..t_len).map(|t| events[[trial, t, nrn]]).collect();
                for (t, v) in gaussian_smooth(&series, 4.0).into_iter().enumerate() {
                    smoothed[[trial, t, nrn]] = v;
                }
            }
        }
        let r = psth_correlation(&smoothed, &events, &conditions, 0.04, 0.01).unwrap();
        for (n, &v) in r.iter().enumerate() {
            assert!(v > 1.0 - 1e-9, "neuron {n}: r = {v}");
        }
        // constant rates → undefined
        let flat = Array3::from_elem((n_trials, t_len, n_neurons), 1.0);
        let r_flat = psth_correlation(&flat, &events, &conditions, 0.04, 0.01).unwrap();
        assert!(r_flat.iter().all(|v| v.is_nan()));
        // shuffled labels reduce the mean correlation
        let shuffled: Vec<usize> = (0..n_trials).map(|i| (i / 2) % 2).collect();
        let r_true = mean_finite(&psth_correlation(&smoothed, &events, &conditions, 0.04, 0.01).unwrap());
        let r_perm = mean_finite(&psth_correlation(&smoothed, &events, &shuffled, 0.04, 0.01).unwrap());
        assert!(r_perm < r_true, "permuted {r_perm} vs true {r_true}");
    }

    fn mean_finite(v: &[f64]) -> f64 {
        let vals: Vec<f64> = v.iter().copied().filter(|x| x.is_finite()).collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    }

    #[test]
    fn resample_identities() {
        let x: Vec<f64> = (0..50).map(|i| i as f64 * 0.3 - 2.0).collect();
        // same rate → identity
        let same = resample_linear(&x, 40.0, 40.0).unwrap();
        for (a, b) in x.iter().zip(same.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        // a linear ramp upsamples exactly (extrapolation included)
        let up = resample_linear(&x, 100.0 / 3.0, 100.0).unwrap();
        assert_eq!(up.len(), 150);
        for (j, &v) in up.iter().enumerate() {
            let want = j as f64 / 3.0 * 0.3 - 2.0;
            assert!((v - want).abs() < 1e-10, "sample {j}: {v} vs {want}");
        }
    }

    #[test]
    fn resample_sine_error_is_small() {
        let f0 = 2.0;
        let rate_in = 100.0 / 3.0;
        let t_in = 100; // 3 seconds
        let x: Vec<f64> = (0..t_in)
            .map(|i| (2.0 * std::f64::consts::PI * f0 * i as f64 / rate_in).sin())
            .collect();
        let up = resample_linear(&x, rate_in, 100.0).unwrap();
        let mut max_err = 0.0f64;
        for (j, &v) in up.iter().enumerate() {
            let t = j as f64 / 100.0;
            if t <= (t_in - 1) as f64 / rate_in {
                let want = (2.0 * std::f64::consts::PI * f0 * t).sin();
                max_err = max_err.max((v - want).abs());
            }
        }
        assert!(max_err < 0.02, "interior max error {max_err}");
    }
}
