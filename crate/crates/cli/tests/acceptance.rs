//! Acceptance suite: one test per release criterion, each printing a
//! PASS line with its measured values. Run with
//! `cargo test --release -p sbtt-lab --test acceptance`.

use ndarray::{Array1, Array2, Array3, Axis};
use rand::Rng;

use sbtt_core::emissions::{poisson_nll, zig_mean, zig_nll, zig_sample, EmissionKind, ZigParams};
use sbtt_core::eval::{coherence, pseudo_r2, r2};
use sbtt_core::lds::{
    lds_forward, lds_simulate, masked_sse_loss, sbtt_backward, train_lds, LdsNoiseConfig,
    LdsParams, LdsTrainConfig, LdsTrial,
};
use sbtt_core::numerics::eigenvalue_distance;
use sbtt_core::rng::RngState;
use sbtt_core::sampling::random_drop_mask;
use sbtt_core::seqae::{
    seqae_backward, seqae_loss, validation_loss, SeqAeDims, SeqAeHyper, SeqAeParams,
};
use sbtt_core::tensorio::{SampleTimes, TimeSeriesBatch};

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Criterion 1: LDS gradients match central finite differences with
/// relative error below 1e-6 on 20 random instances spanning mask
/// fractions 0 to 1. The stated oracle (step 1e-6 × scale) carries its own
/// f64 cancellation noise of about ε·|loss|/step in each gradient entry;
/// the assertion enforces the 1e-6 relative bound wherever the oracle can
/// resolve it and the explicit noise bound below that.
#[test]
fn acceptance_01_lds_gradients_match_finite_differences() {
    let start = std::time::Instant::now();
    let mut worst = 0.0f64;
    for instance in 0..20 {
        let mut rng = RngState::new(1000 + instance).rng();
        let d = 1 + (rng.gen::<f64>() * 4.0) as usize; // 1..=4
        let n = 1 + (rng.gen::<f64>() * 8.0) as usize; // 1..=8
        let t_len = 5 + (rng.gen::<f64>() * 26.0) as usize; // 5..=30
        let mask_fraction = instance as f64 / 19.0; // spans 0..=1
        let a = Array2::from_shape_simple_fn((d, d), || 0.8 * (rng.gen::<f64>() - 0.5));
        let h = Array2::from_shape_simple_fn((n, d), || rng.gen::<f64>() - 0.5);
        let params = LdsParams::new(a, h).unwrap();
        let x0 = Array1::from_shape_simple_fn(d, || rng.gen::<f64>() * 2.0 - 1.0);
        let values = Array2::from_shape_simple_fn((t_len, n), || rng.gen::<f64>() * 2.0 - 1.0);
        let mask = Array2::from_shape_simple_fn((t_len, n), || rng.gen::<f64>() >= mask_fraction);

        let grads = sbtt_backward(&params, &x0, &values, &mask).unwrap();
        let loss = |p: &LdsParams| {
            let (_, outputs) = lds_forward(p, &x0, t_len);
            masked_sse_loss(&outputs, &values, &mask)
        };
        let loss_scale = loss(&params).abs().max(1e-3);
        for (field, got) in [(0, &grads.d_a), (1, &grads.d_h)] {
            let dim = if field == 0 { params.a.dim() } else { params.h.dim() };
            for idx in ndarray::indices(dim) {
                let base = if field == 0 { params.a[idx] } else { params.h[idx] };
                let step = 1e-6 * base.abs().max(1.0);
                let mut plus = params.clone();
                let mut minus = params.clone();
                if field == 0 {
                    plus.a[idx] += step;
                    minus.a[idx] -= step;
                } else {
                    plus.h[idx] += step;
                    minus.h[idx] -= step;
                }
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * step);
                let diff = (got[idx] - fd).abs();
                let rel_bound = 1e-6 * got[idx].abs().max(fd.abs());
                let oracle_noise = 10.0 * f64::EPSILON * loss_scale / (2.0 * step);
                worst = worst.max(diff / got[idx].abs().max(fd.abs()).max(1e-6));
                assert!(
                    diff < rel_bound.max(oracle_noise),
                    "instance {instance} (D={d}, N={n}, T={t_len}): analytic {} vs fd {fd} (diff {diff:.2e}, noise bound {oracle_noise:.2e})",
                    got[idx]
                );
            }
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 60.0, "runtime {elapsed:.1}s exceeds 1 minute");
    println!("ACCEPTANCE 1 (LDS gradient vs finite differences): PASS (worst observed rel err {worst:.2e}, {elapsed:.1}s)");
}

fn tiny_seqae(emission: EmissionKind, seed: u64) -> (SeqAeParams, SeqAeHyper, TimeSeriesBatch) {
    let dims = SeqAeDims { n_channels: 6, enc_hidden: 4, latent: 3, gen_hidden: 5, factors: 2 };
    let mut hyper = SeqAeHyper::defaults(dims, emission, seed);
    hyper.dropout_rate = 0.0;
    hyper.cd_rate = 0.0;
    hyper.ramp_epochs = 0;
    hyper.kl_weight_ic = 0.05;
    hyper.l2_generator = 0.01;
    hyper.scale_l2_weight = 0.02;
    let loc = matches!(emission, EmissionKind::Zig).then(|| Array1::from_elem(6, 0.1));
    let params = SeqAeParams::init(dims, emission, loc, false, &RngState::new(seed)).unwrap();

    let mut rng = RngState::new(seed + 1).rng();
    let (n_trials, t_len) = (2, 10);
    let values = Array3::from_shape_fn((n_trials, t_len, 6), |_| match emission {
        EmissionKind::Zig => {
            if rng.gen::<f64>() < 0.5 {
                0.0
            } else {
                0.1 + rng.gen::<f64>()
            }
        }
        _ => f64::from(rng.gen_range(0..3u8)),
    });
    let mask = Array3::from_shape_fn((n_trials, t_len, 6), |_| rng.gen::<f64>() < 0.7);
    let times = Array1::from_iter((0..t_len).map(|i| i as f64 * 0.01));
    let batch = TimeSeriesBatch::new(values, mask, SampleTimes::PerTime(times), 0.01, None).unwrap();
    (params, hyper, batch)
}

/// Criterion 2: every parameter gradient of the tiny autoencoder matches
/// central finite differences with relative error below 1e-5 (dropout off,
/// reparameterization draw fixed via the shared RNG state). The 1e-4
/// denominator floor makes the comparison absolute (at 1e-9) for entries
/// the f64 difference oracle cannot resolve relatively.
#[test]
fn acceptance_02_seqae_gradients_match_finite_differences() {
    let start = std::time::Instant::now();
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for emission in [EmissionKind::Poisson, EmissionKind::Zig] {
        let (params, hyper, batch) = tiny_seqae(emission, 51);
        let rng = RngState::new(53);
        let epoch = 5;
        let (_, grads) = seqae_backward(&params, &batch, &hyper, &rng, epoch).unwrap();
        let analytic = grads.to_flat();
        let flat = params.to_flat();
        let h = 3e-5;
        for i in 0..flat.len() {
            let mut plus = flat.clone();
            plus[i] += h;
            let mut minus = flat.clone();
            minus[i] -= h;
            let lp = seqae_loss(&params.from_flat(&plus), &batch, &hyper, &rng, epoch)
                .unwrap()
                .total;
            let lm = seqae_loss(&params.from_flat(&minus), &batch, &hyper, &rng, epoch)
                .unwrap()
                .total;
            let fd = (lp - lm) / (2.0 * h);
            let err = rel_err(analytic[i], fd, 1e-4);
            worst = worst.max(err);
            checked += 1;
            assert!(err < 1e-5, "{emission:?} param {i}: analytic {} vs fd {fd}", analytic[i]);
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 300.0, "runtime {elapsed:.1}s exceeds 5 minutes");
    println!("ACCEPTANCE 2 (seqae gradient vs finite differences): PASS ({checked} params, worst rel err {worst:.2e}, {elapsed:.1}s)");
}

/// Criterion 3: with an all-true mask and cd_rate 0 the masked paths agree
/// with dense computations to 1e-12. The LDS comparison uses an
/// independently written dense BPTT; the autoencoder reconstruction is
/// compared against a dense mean-NLL evaluation with no masking logic.
#[test]
fn acceptance_03_sbtt_reduces_to_standard_training() {
    // LDS: masked path under a full mask vs an independent dense BPTT
    let mut rng = RngState::new(77).rng();
    let (d, n, t_len) = (3, 5, 18);
    let params = LdsParams::new(
        Array2::from_shape_simple_fn((d, d), || 0.8 * (rng.gen::<f64>() - 0.5)),
        Array2::from_shape_simple_fn((n, d), || rng.gen::<f64>() - 0.5),
    )
    .unwrap();
    let x0 = Array1::from_shape_simple_fn(d, || rng.gen::<f64>() - 0.5);
    let values = Array2::from_shape_simple_fn((t_len, n), || rng.gen::<f64>() - 0.5);
    let full = Array2::from_elem((t_len, n), true);
    let masked = sbtt_backward(&params, &x0, &values, &full).unwrap();

    let (states, outputs) = lds_forward(&params, &x0, t_len);
    let inv_t = 1.0 / t_len as f64;
    let mut d_a = Array2::<f64>::zeros((d, d));
    let mut d_h = Array2::<f64>::zeros((n, d));
    let mut lam = Array1::<f64>::zeros(d);
    for t in (0..t_len).rev() {
        let d_out = (&outputs.row(t) - &values.row(t)) * inv_t;
        for i in 0..n {
            for j in 0..d {
                d_h[[i, j]] += d_out[i] * states[[t, j]];
            }
        }
        let mut adj = params.h.t().dot(&d_out);
        if t + 1 < t_len {
            adj += &params.a.t().dot(&lam);
        }
        if t >= 1 {
            for i in 0..d {
                for j in 0..d {
                    d_a[[i, j]] += adj[i] * states[[t - 1, j]];
                }
            }
        }
        lam = adj;
    }
    let mut worst = 0.0f64;
    for (a, b) in masked.d_a.iter().zip(d_a.iter()).chain(masked.d_h.iter().zip(d_h.iter())) {
        worst = worst.max((a - b).abs());
        assert!((a - b).abs() < 1e-12, "LDS gradient mismatch: {a} vs {b}");
    }
    let masked_loss = masked_sse_loss(&outputs, &values, &full);
    let dense_loss: f64 = outputs
        .iter()
        .zip(values.iter())
        .map(|(&o, &y)| 0.5 * (o - y) * (o - y))
        .sum::<f64>()
        * inv_t;
    assert!((masked_loss - dense_loss).abs() < 1e-12);

    // seqae: deterministic masked recon under a full mask vs a dense
    // mean-NLL with no mask logic at all
    let (params, hyper, mut batch) = tiny_seqae(EmissionKind::Poisson, 91);
    batch.mask.fill(true);
    let loss = validation_loss(&params, &batch, &hyper, 0).unwrap();
    let out = sbtt_core::seqae::infer(&params, &batch).unwrap();
    let mut dense = 0.0;
    for (idx, &rate) in out.rates.indexed_iter() {
        dense += poisson_nll(rate, batch.values[idx]).unwrap();
    }
    dense /= batch.values.len() as f64;
    assert!(
        (loss.recon - dense).abs() < 1e-12,
        "seqae recon {} vs dense {dense}",
        loss.recon
    );
    println!("ACCEPTANCE 3 (SBTT equals standard training on full masks): PASS (worst LDS grad diff {worst:.1e})");
}

/// Criterion 4: values at masked entries cannot influence any loss or any
/// gradient, exactly.
#[test]
fn acceptance_04_mask_independence_is_exact() {
    // LDS
    let mut rng = RngState::new(5).rng();
    let (d, n, t_len) = (2, 6, 12);
    let params = LdsParams::new(
        Array2::from_shape_simple_fn((d, d), || 0.8 * (rng.gen::<f64>() - 0.5)),
        Array2::from_shape_simple_fn((n, d), || rng.gen::<f64>() - 0.5),
    )
    .unwrap();
    let x0 = Array1::from_shape_simple_fn(d, || rng.gen::<f64>() - 0.5);
    let mut values = Array2::from_shape_simple_fn((t_len, n), || rng.gen::<f64>() - 0.5);
    let mask = Array2::from_shape_simple_fn((t_len, n), || rng.gen::<f64>() < 0.5);
    let g_before = sbtt_backward(&params, &x0, &values, &mask).unwrap();
    let l_before = {
        let (_, o) = lds_forward(&params, &x0, t_len);
        masked_sse_loss(&o, &values, &mask)
    };
    for (idx, &m) in mask.indexed_iter() {
        if !m {
            values[idx] = 1e6;
        }
    }
    let g_after = sbtt_backward(&params, &x0, &values, &mask).unwrap();
    let l_after = {
        let (_, o) = lds_forward(&params, &x0, t_len);
        masked_sse_loss(&o, &values, &mask)
    };
    assert_eq!(l_before, l_after);
    assert_eq!(g_before, g_after);

    // seqae, bypassing the canonicalizing constructor to plant garbage
    let (params, hyper, batch) = tiny_seqae(EmissionKind::Poisson, 13);
    let rng_state = RngState::new(17);
    let mut perturbed = batch.clone();
    for (idx, &m) in batch.mask.indexed_iter() {
        if !m {
            perturbed.values[idx] = 1e6;
        }
    }
    let (l1, g1) = seqae_backward(&params, &batch, &hyper, &rng_state, 3).unwrap();
    let (l2, g2) = seqae_backward(&params, &perturbed, &hyper, &rng_state, 3).unwrap();
    assert_eq!(l1, l2);
    assert_eq!(g1.to_flat(), g2.to_flat());
    println!("ACCEPTANCE 4 (mask independence, exact): PASS");
}

/// Criterion 5: LDS identification under 50% dropping (D=2, N=10, T=200,
/// 100 trials, observation noise 0.05): held-out loss within 10% of the
/// true-parameter oracle, eigenvalues of A within 0.05.
#[test]
fn acceptance_05_lds_identification_under_dropping() {
    let start = std::time::Instant::now();
    let root = RngState::new(42);
    let (d, n, t_len, n_trials) = (2, 10, 200, 100);
    let theta = 2.0 * std::f64::consts::PI * 0.04;
    let radius = 0.95;
    let a_true = ndarray::array![
        [radius * theta.cos(), -radius * theta.sin()],
        [radius * theta.sin(), radius * theta.cos()]
    ];
    let mut h_rng = root.stream(1).rng();
    let h_true = Array2::from_shape_simple_fn((n, d), || h_rng.gen::<f64>() * 2.0 - 1.0);
    let truth = LdsParams::new(a_true, h_true).unwrap();
    let noise = LdsNoiseConfig { process_sd: 0.0, observation_sd: 0.05 };

    let mut trials = Vec::new();
    for i in 0..n_trials {
        let mut r = root.stream(10 + i as u64).rng();
        let x0 = Array1::from_shape_simple_fn(d, || r.gen::<f64>() * 2.0 - 1.0);
        let (_, obs) = lds_simulate(&truth, &noise, &x0, t_len, &root.stream(1000 + i as u64)).unwrap();
        let mask = random_drop_mask((1, t_len, n), 0.5, &root.stream(5000 + i as u64))
            .unwrap()
            .index_axis(Axis(0), 0)
            .to_owned();
        trials.push(LdsTrial { x0, values: obs, mask });
    }
    let (holdout, training) = trials.split_at(20);
    let init = {
        let mut r = root.stream(2).rng();
        LdsParams::new(
            Array2::eye(d) * 0.9,
            Array2::from_shape_simple_fn((n, d), || 0.1 * (r.gen::<f64>() - 0.5)),
        )
        .unwrap()
    };
    let cfg = LdsTrainConfig { lr: 0.1, epochs: 12_000, estimate_x0: false };
    let result = train_lds(training, &init, &cfg).unwrap();

    let mse_of = |p: &LdsParams| -> f64 {
        holdout
            .iter()
            .map(|t| {
                let (_, o) = lds_forward(p, &t.x0, t_len);
                masked_sse_loss(&o, &t.values, &t.mask)
            })
            .sum::<f64>()
            / holdout.len() as f64
    };
    let mse_learned = mse_of(&result.params);
    let mse_oracle = mse_of(&truth);
    assert!(
        mse_learned <= 1.1 * mse_oracle,
        "held-out MSE {mse_learned:.6} vs oracle {mse_oracle:.6} (ratio {:.3})",
        mse_learned / mse_oracle
    );
    let eig_dist = eigenvalue_distance(
        &truth.dynamics_eigenvalues().unwrap(),
        &result.params.dynamics_eigenvalues().unwrap(),
    );
    assert!(eig_dist < 0.05, "eigenvalue distance {eig_dist:.4}");
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 300.0, "runtime {elapsed:.1}s exceeds 5 minutes");
    println!(
        "ACCEPTANCE 5 (LDS identification at 50% drop): PASS (mse ratio {:.4}, eig distance {:.4}, {elapsed:.0}s)",
        mse_learned / mse_oracle,
        eig_dist
    );
}

fn parse_config(toml_str: &str) -> sbtt_lab::config::ExperimentConfig {
    toml::from_str(toml_str).expect("valid acceptance config")
}

const DROP_BENCHMARK_CONFIG: &str = r#"
seed = 7

[synth]
kind = "lorenz_poisson"
n_neurons = 30
baseline_hz = 3.0
w_sd = 1.0
trials_per_condition = 20

[synth.lorenz]
downsample_factor = 2
n_conditions = 32
trial_ms = 900

[model.seqae]
enc_hidden = 32
latent = 16
gen_hidden = 50
factors = 12
emission = "poisson"
kl_weight_ic = 1e-4
l2_generator = 1e-4
dropout_rate = 0.02
cd_rate = 0.5
lr = 5e-3
epochs = 1200
ramp_epochs = 40
batch_size = 128
"#;

/// Criterion 6: graceful degradation under random dropping. On the
/// Lorenz Poisson benchmark (slow Lorenz, 30 neurons, 512 trials, small
/// autoencoder), the validation-trial ridge mapping from inferred factors
/// to the true latents must reach R² ≥ 0.7 with everything observed, and
/// keep at least 90% of that at 60% dropping.
#[test]
fn acceptance_06_drop_sweep_trend() {
    let start = std::time::Instant::now();
    let mut cfg = parse_config(DROP_BENCHMARK_CONFIG);
    cfg.sweep = Some(toml::from_str("drop_fractions = [0.0, 0.6]").unwrap());
    let out = std::env::temp_dir().join(format!("sbtt_acc6_{}", std::process::id()));
    let cells = sbtt_lab::experiments::run_drop_sweep(&cfg, &out).expect("sweep runs");
    std::fs::remove_dir_all(&out).ok();
    let r2_full = cells[0].r2;
    let r2_drop = cells[1].r2;
    let elapsed = start.elapsed().as_secs_f64();
    assert!(r2_full >= 0.7, "R² at 0% drop is {r2_full:.3}, need at least 0.7");
    assert!(
        r2_drop >= 0.9 * r2_full,
        "R² at 60% drop is {r2_drop:.3} vs {r2_full:.3} at 0% (ratio {:.3}, need 0.9)",
        r2_drop / r2_full
    );
    assert!(elapsed < 1800.0, "runtime {elapsed:.0}s exceeds 30 minutes");
    println!(
        "ACCEPTANCE 6 (drop-sweep trend): PASS (R² {r2_full:.3} at 0%, {r2_drop:.3} at 60%, ratio {:.3}, {elapsed:.0}s)",
        r2_drop / r2_full
    );
}

const SUPERRES_CONFIG: &str = r#"
seed = 21

[synth]
kind = "lorenz_calcium"
n_neurons = 100
baseline_hz = 3.0
w_sd = 1.0
trials_per_condition = 12

[synth.lorenz]
n_conditions = 24
trial_ms = 900

[model.seqae]
enc_hidden = 40
latent = 20
gen_hidden = 64
factors = 16
emission = "zig"
kl_weight_ic = 1e-4
l2_generator = 1e-4
dropout_rate = 0.02
lr = 2e-3
epochs = 300
ramp_epochs = 40
batch_size = 96

[sweep]
lorenz_factors = [2, 11]
"#;

/// Criterion 7: super-resolution trend on simulated calcium data. At the
/// fastest Lorenz speed (z-spectrum peak ≥ 12 Hz against a 33 Hz frame
/// rate) the SBTT arm must beat frame resolution by ≥ 0.1 R² and beat the
/// smoothing baseline; at the slowest speed all three arms sit within 0.1
/// of each other.
#[test]
fn acceptance_07_superres_trend() {
    let start = std::time::Instant::now();
    let cfg = parse_config(SUPERRES_CONFIG);
    let out = std::env::temp_dir().join(format!("sbtt_acc7_{}", std::process::id()));
    let cells = sbtt_lab::experiments::run_superres(&cfg, &out).expect("sweep runs");
    std::fs::remove_dir_all(&out).ok();
    let slow = &cells[0];
    let fast = &cells[1];
    let elapsed = start.elapsed().as_secs_f64();
    assert!(fast.peak_hz >= 12.0, "fast-arm spectrum peak {:.1} Hz below 12 Hz", fast.peak_hz);
    assert!(
        fast.r2_sbtt >= fast.r2_frame + 0.1,
        "fast speed: SBTT {:.3} vs frame {:.3} (need +0.1)",
        fast.r2_sbtt,
        fast.r2_frame
    );
    assert!(
        fast.r2_sbtt > fast.r2_smooth,
        "fast speed: SBTT {:.3} vs smoothing {:.3}",
        fast.r2_sbtt,
        fast.r2_smooth
    );
    let spread = [slow.r2_sbtt, slow.r2_frame, slow.r2_smooth];
    let max = spread.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = spread.iter().copied().fold(f64::INFINITY, f64::min);
    assert!(
        max - min <= 0.1,
        "slow speed arms spread {:.3} (sbtt {:.3}, frame {:.3}, smooth {:.3})",
        max - min,
        slow.r2_sbtt,
        slow.r2_frame,
        slow.r2_smooth
    );
    assert!(elapsed < 2700.0, "runtime {elapsed:.0}s exceeds 45 minutes");
    println!(
        "ACCEPTANCE 7 (super-resolution trend): PASS (fast {:.1} Hz: sbtt {:.3} / frame {:.3} / smooth {:.3}; slow: {:.3} / {:.3} / {:.3}; {elapsed:.0}s)",
        fast.peak_hz, fast.r2_sbtt, fast.r2_frame, fast.r2_smooth,
        slow.r2_sbtt, slow.r2_frame, slow.r2_smooth
    );
}

/// Criterion 8: encoder retraining ordering. At the highest drop fraction
/// (0.8), retrained-sparse ≥ trained-sparse and both ≥ the full-data model
/// run on sparse inputs; at fraction 0 all arms agree within 0.02.
#[test]
fn acceptance_08_retraining_ordering() {
    let start = std::time::Instant::now();
    let mut cfg = parse_config(DROP_BENCHMARK_CONFIG);
    cfg.sweep = Some(
        toml::from_str(
            "retrain_fractions = [0.0, 0.8]\nretrain_lr = 5e-4\nretrain_epochs = 150",
        )
        .unwrap(),
    );
    let out = std::env::temp_dir().join(format!("sbtt_acc8_{}", std::process::id()));
    let cells = sbtt_lab::experiments::run_retraining(&cfg, &out).expect("sweep runs");
    std::fs::remove_dir_all(&out).ok();
    let zero = &cells[0];
    let sparse = &cells[1];
    let elapsed = start.elapsed().as_secs_f64();
    let zero_spread = [zero.r2_trained_full, zero.r2_trained_sparse, zero.r2_retrained];
    let max = zero_spread.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = zero_spread.iter().copied().fold(f64::INFINITY, f64::min);
    assert!(
        max - min <= 0.02,
        "fraction 0 arms spread {:.4} (full {:.3}, sparse {:.3}, retrained {:.3})",
        max - min,
        zero.r2_trained_full,
        zero.r2_trained_sparse,
        zero.r2_retrained
    );
    assert!(
        sparse.r2_retrained >= sparse.r2_trained_sparse,
        "retrained {:.3} < trained-sparse {:.3} at 80% drop",
        sparse.r2_retrained,
        sparse.r2_trained_sparse
    );
    assert!(
        sparse.r2_trained_sparse >= sparse.r2_trained_full
            && sparse.r2_retrained >= sparse.r2_trained_full,
        "sparse-adapted arms ({:.3}, {:.3}) must beat the unadapted full model ({:.3})",
        sparse.r2_trained_sparse,
        sparse.r2_retrained,
        sparse.r2_trained_full
    );
    println!(
        "ACCEPTANCE 8 (retraining ordering): PASS (at 0.8: full-run-sparse {:.3} <= trained-sparse {:.3} <= retrained {:.3}; at 0: spread {:.4}; {elapsed:.0}s)",
        sparse.r2_trained_full, sparse.r2_trained_sparse, sparse.r2_retrained, max - min
    );
}

/// Criterion 9: metric identities and closed-form spot values.
#[test]
fn acceptance_09_metric_identities() {
    // R² identities
    let mut rng = RngState::new(3).rng();
    let y = Array2::from_shape_simple_fn((50, 2), || rng.gen::<f64>() * 3.0);
    assert!((r2(&y, &y.clone()).mean - 1.0).abs() < 1e-12);
    let mean_row = y.mean_axis(Axis(0)).unwrap();
    let mean_pred = Array2::from_shape_fn(y.dim(), |(_, j)| mean_row[j]);
    assert!(r2(&y, &mean_pred).mean.abs() < 1e-12);

    // pseudo-R²: saturated 1, null 0, and agreement with an independent
    // likelihood oracle built from the emissions module
    let counts = Array1::from_iter((0..300).map(|_| f64::from(rng.gen_range(0..5u8))));
    let mean_count = counts.sum() / counts.len() as f64;
    assert!((pseudo_r2(&counts, &counts.clone(), mean_count).unwrap() - 1.0).abs() < 1e-12);
    let null = Array1::from_elem(counts.len(), mean_count);
    assert!(pseudo_r2(&counts, &null, mean_count).unwrap().abs() < 1e-12);
    let rates = Array1::from_iter((0..300).map(|_| 0.2 + 4.0 * rng.gen::<f64>()));
    let got = pseudo_r2(&counts, &rates, mean_count).unwrap();
    let oracle_ll = |r: &Array1<f64>| -> f64 {
        counts
            .iter()
            .zip(r.iter())
            .map(|(&yv, &mu)| if yv == 0.0 { -mu } else { -poisson_nll(mu, yv).unwrap() })
            .sum()
    };
    let sat: f64 = counts
        .iter()
        .map(|&yv| if yv == 0.0 { 0.0 } else { -poisson_nll(yv, yv).unwrap() })
        .sum();
    let want = 1.0 - (sat - oracle_ll(&rates)) / (sat - oracle_ll(&null));
    assert!((got - want).abs() < 1e-10, "pseudo-R² {got} vs oracle {want}");

    // self-coherence is 1 at every frequency
    let x: Vec<f64> = (0..700).map(|_| rng.gen::<f64>() - 0.5).collect();
    let (_, coh) = coherence(&x, &x, 35, 25, 100.0, None).unwrap();
    assert!(coh.iter().all(|&c| (c - 1.0).abs() < 1e-9));

    // ZIG mean matches Monte Carlo within 1% over 1e6 samples
    let p = ZigParams::new(0.6, 1.8, 0.7, 0.1).unwrap();
    let mut zrng = RngState::new(77).rng();
    let mc: f64 =
        (0..1_000_000).map(|_| zig_sample(&p, &mut zrng)).sum::<f64>() / 1_000_000.0;
    let analytic = zig_mean(&p);
    assert!((mc - analytic).abs() / analytic < 0.01, "MC {mc} vs {analytic}");

    // closed-form NLL spot values
    assert!((poisson_nll(1.0, 0.0).unwrap() - 1.0).abs() < 1e-12);
    assert!((poisson_nll(2.0, 2.0).unwrap() - (2.0 - 2.0f64.ln())).abs() < 1e-12);
    let zp = ZigParams::new(0.5, 1.0, 1.0, 0.0).unwrap();
    assert!((zig_nll(&zp, 0.0).unwrap() - 2.0f64.ln()).abs() < 1e-12);
    assert!((zig_nll(&zp, 1.0).unwrap() - (2.0f64.ln() + 1.0)).abs() < 1e-12);
    println!("ACCEPTANCE 9 (metric identities and spot values): PASS");
}

/// Criterion 10: reruns with the same config and seed reproduce the metric
/// CSVs byte-identically, independent of thread count. Exercised through
/// the installed binary with SBTT_THREADS set to different values, plus a
/// resumed (cells-skipped) rerun.
#[test]
fn acceptance_10_determinism_across_thread_counts() {
    let bin = env!("CARGO_BIN_EXE_sbtt-lab");
    let base = std::env::temp_dir().join(format!("sbtt_determinism_{}", std::process::id()));
    std::fs::create_dir_all(&base).unwrap();
    let config_for = |out: &std::path::Path| -> String {
        format!(
            r#"seed = 9
out_dir = "{}"

[synth]
kind = "lorenz_poisson"
n_neurons = 12
baseline_hz = 3.0
trials_per_condition = 5
[synth.lorenz]
n_conditions = 8
downsample_factor = 2
trial_ms = 400

[model.seqae]
enc_hidden = 8
latent = 4
gen_hidden = 10
factors = 3
emission = "poisson"
lr = 2e-3
epochs = 3
ramp_epochs = 2
batch_size = 16
dropout_rate = 0.05

[sweep]
drop_fractions = [0.0, 0.5]
"#,
            out.display()
        )
    };

    let run = |tag: &str, threads: &str| -> Vec<u8> {
        let out = base.join(tag);
        let cfg_path = base.join(format!("{tag}.toml"));
        std::fs::write(&cfg_path, config_for(&out)).unwrap();
        let status = std::process::Command::new(bin)
            .args(["sweep-drop", "--config"])
            .arg(&cfg_path)
            .env("SBTT_THREADS", threads)
            .status()
            .expect("binary runs");
        assert!(status.success(), "sweep-drop failed under SBTT_THREADS={threads}");
        std::fs::read(out.join("drop-sweep/metrics.csv")).unwrap()
    };

    let single = run("t1", "1");
    let multi = run("t2", "2");
    assert_eq!(single, multi, "metrics.csv differs across thread counts");

    // resumed rerun: cells are skipped via manifests and the regenerated
    // combined CSV is still byte-identical
    let rerun = run("t1", "2");
    assert_eq!(single, rerun, "resumed rerun changed metrics.csv");
    std::fs::remove_dir_all(&base).ok();
    println!("ACCEPTANCE 10 (byte-identical reruns across thread counts): PASS");
}
