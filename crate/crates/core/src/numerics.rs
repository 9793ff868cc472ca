//! Shared numerical kernels: special functions, dense solves, FFT, and
//! eigenvalues of small real matrices. Everything is f64; the training and
//! gradient-check paths depend on that precision.

use ndarray::{Array1, Array2};
use num_complex::Complex64;

use crate::error::{Error, Result};

/// Lanczos coefficients, g = 7, n = 9.
const LANCZOS_G: f64 = 7.0;
const LANCZOS_COEF: [f64; 9] = [
    0.999_999_999_999_809_93,
    676.520_368_121_885_1,
    -1259.139_216_722_402_8,
    771.323_428_777_653_13,
    -176.615_029_162_140_59,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_571_6e-6,
    1.505_632_735_149_311_6e-7,
];

/// Natural log of the gamma function for x > 0.
///
/// Lanczos approximation with reflection for x < 0.5; absolute error is
/// below 1e-10 over [1e-3, 1e3].
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // reflection: ln Γ(x) = ln(π / sin(πx)) − ln Γ(1−x)
        let s = (std::f64::consts::PI * x).sin();
        (std::f64::consts::PI / s).ln() - ln_gamma(1.0 - x)
    } else {
        let x = x - 1.0;
        let mut acc = LANCZOS_COEF[0];
        for (i, c) in LANCZOS_COEF.iter().enumerate().skip(1) {
            acc += c / (x + i as f64);
        }
        let t = x + LANCZOS_G + 0.5;
        0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
    }
}

/// ln(n!) for a non-negative count.
pub fn ln_factorial(n: f64) -> f64 {
    if n <= 1.0 {
        0.0
    } else {
        ln_gamma(n + 1.0)
    }
}

/// Digamma ψ(x) for x > 0: recurrence up to x ≥ 10, then the asymptotic
/// series through the x⁻¹⁰ Bernoulli term (error ≲ 1e-13 there).
pub fn digamma(x: f64) -> f64 {
    debug_assert!(x > 0.0, "digamma domain is x > 0, got {x}");
    let mut x = x;
    let mut acc = 0.0;
    while x < 10.0 {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let tail = inv2
        * (1.0 / 12.0
            - inv2 * (1.0 / 120.0 - inv2 * (1.0 / 252.0 - inv2 * (1.0 / 240.0 - inv2 / 132.0))));
    acc + x.ln() - 0.5 * inv - tail
}

/// Numerically stable logistic sigmoid.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Solves A·X = B for symmetric positive-definite A via Cholesky.
/// Fails with a numeric error when a pivot is not strictly positive.
pub fn cholesky_solve(a: &Array2<f64>, b: &Array2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n {
        return Err(Error::shape(format!(
            "cholesky_solve: A is {}x{}, B has {} rows",
            a.nrows(),
            a.ncols(),
            b.nrows()
        )));
    }
    // lower-triangular factor, row-major
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[[i, j]];
            for k in 0..j {
                sum -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return Err(Error::numeric(format!(
                        "cholesky_solve: non-positive pivot {sum:e} at row {i}"
                    )));
                }
                l[i * n + i] = sum.sqrt();
            } else {
                l[i * n + j] = sum / l[j * n + j];
            }
        }
    }
    let m = b.ncols();
    let mut x = b.clone();
    // forward substitution L·Y = B
    for col in 0..m {
        for i in 0..n {
            let mut sum = x[[i, col]];
            for k in 0..i {
                sum -= l[i * n + k] * x[[k, col]];
            }
            x[[i, col]] = sum / l[i * n + i];
        }
        // back substitution Lᵀ·X = Y
        for i in (0..n).rev() {
            let mut sum = x[[i, col]];
            for k in i + 1..n {
                sum -= l[k * n + i] * x[[k, col]];
            }
            x[[i, col]] = sum / l[i * n + i];
        }
    }
    Ok(x)
}

/// Iterative radix-2 FFT, in place. `buf.len()` must be a power of two.
pub fn fft_in_place(buf: &mut [Complex64]) {
    let n = buf.len();
    assert!(n.is_power_of_two(), "fft length {n} not a power of two");
    if n <= 1 {
        return;
    }
    // bit reversal permutation
    let shift = n.leading_zeros() + 1;
    for i in 0..n {
        let j = i.reverse_bits() >> shift;
        if j > i {
            buf.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let ang = -2.0 * std::f64::consts::PI / len as f64;
        let wlen = Complex64::new(ang.cos(), ang.sin());
        for start in (0..n).step_by(len) {
            let mut w = Complex64::new(1.0, 0.0);
            for k in 0..len / 2 {
                let u = buf[start + k];
                let v = buf[start + k + len / 2] * w;
                buf[start + k] = u + v;
                buf[start + k + len / 2] = u - v;
                w *= wlen;
            }
        }
        len <<= 1;
    }
}

/// Direct O(n²) DFT for arbitrary lengths (used when an exact, unpadded
/// window length is requested).
pub fn dft(x: &[Complex64]) -> Vec<Complex64> {
    let n = x.len();
    let mut out = vec![Complex64::new(0.0, 0.0); n];
    for (k, slot) in out.iter_mut().enumerate() {
        let mut acc = Complex64::new(0.0, 0.0);
        for (j, &v) in x.iter().enumerate() {
            let ang = -2.0 * std::f64::consts::PI * (k * j) as f64 / n as f64;
            acc += v * Complex64::new(ang.cos(), ang.sin());
        }
        *slot = acc;
    }
    out
}

/// Symmetric Hann window of length n (zero at both endpoints; `[1.0]` for n = 1).
pub fn hann(n: usize) -> Array1<f64> {
    if n == 1 {
        return Array1::ones(1);
    }
    Array1::from_iter((0..n).map(|i| {
        0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
    }))
}

/// Eigenvalues of a small dense real matrix.
///
/// Characteristic polynomial by Faddeev–LeVerrier, roots by Durand–Kerner.
/// Intended for the latent-dynamics matrices in this crate (dimension ≲ 8);
/// not a general-purpose eigensolver.
pub fn eigenvalues(a: &Array2<f64>) -> Result<Vec<Complex64>> {
    let n = a.nrows();
    if a.ncols() != n || n == 0 {
        return Err(Error::shape(format!("eigenvalues: matrix is {}x{}", a.nrows(), a.ncols())));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("eigenvalues: non-finite matrix entry".to_string()));
    }
    // coeffs[j] multiplies λ^j in the monic characteristic polynomial
    let mut coeffs = vec![0.0; n + 1];
    coeffs[n] = 1.0;
    let mut m = Array2::<f64>::eye(n);
    for k in 1..=n {
        let am = a.dot(&m);
        let trace: f64 = (0..n).map(|i| am[[i, i]]).sum();
        let c = -trace / k as f64;
        coeffs[n - k] = c;
        m = am + c * Array2::<f64>::eye(n);
    }
    Ok(polynomial_roots(&coeffs))
}

/// Largest eigenvalue magnitude.
pub fn spectral_radius(a: &Array2<f64>) -> Result<f64> {
    Ok(eigenvalues(a)?.iter().map(|z| z.norm()).fold(0.0, f64::max))
}

/// Durand–Kerner roots of a monic polynomial given ascending coefficients
/// (`coeffs[j]` multiplies x^j, `coeffs[n] == 1`).
fn polynomial_roots(coeffs: &[f64]) -> Vec<Complex64> {
    let n = coeffs.len() - 1;
    if n == 0 {
        return Vec::new();
    }
    if n == 1 {
        return vec![Complex64::new(-coeffs[0], 0.0)];
    }
    let eval = |z: Complex64| -> Complex64 {
        let mut acc = Complex64::new(coeffs[n], 0.0);
        for j in (0..n).rev() {
            acc = acc * z + coeffs[j];
        }
        acc
    };
    // Cauchy-style bound keeps initial guesses outside no root's radius
    let bound = 1.0 + coeffs[..n].iter().map(|c| c.abs()).fold(0.0, f64::max);
    let seed = Complex64::new(0.4, 0.9);
    let mut roots: Vec<Complex64> = (0..n).map(|i| bound * seed.powu(i as u32 + 1)).collect();
    for _ in 0..600 {
        let mut max_step = 0.0f64;
        for i in 0..n {
            let mut denom = Complex64::new(1.0, 0.0);
            for j in 0..n {
                if j != i {
                    denom *= roots[i] - roots[j];
                }
            }
            if denom.norm() == 0.0 {
                // coincident iterates; nudge apart
                roots[i] += Complex64::new(1e-8, 1e-8);
                continue;
            }
            let step = eval(roots[i]) / denom;
            roots[i] -= step;
            max_step = max_step.max(step.norm());
        }
        if max_step < 1e-13 * bound.max(1.0) {
            break;
        }
    }
    roots
}

/// Sort key used when comparing eigenvalue sets: ascending (re, im).
pub fn sort_complex(values: &mut [Complex64]) {
    values.sort_by(|a, b| {
        (a.re, a.im)
            .partial_cmp(&(b.re, b.im))
            .unwrap_or(std::cmp::Ordering::Equal)
    });
}

/// Worst pairwise distance under the best one-to-one matching of two
/// eigenvalue sets. Sorting complex values lexicographically is unstable
/// when real parts nearly tie (conjugate pairs flip order under roundoff),
/// so comparisons go through an exact assignment instead. Brute force over
/// permutations; fine for the small latent dimensions used here.
pub fn eigenvalue_distance(a: &[Complex64], b: &[Complex64]) -> f64 {
    assert_eq!(a.len(), b.len(), "eigenvalue sets must have equal size");
    let n = a.len();
    assert!(n <= 8, "eigenvalue_distance is for small matrices (n <= 8)");
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = f64::INFINITY;
    permute(&mut perm, 0, &mut |p| {
        let worst = (0..n).map(|i| (a[i] - b[p[i]]).norm()).fold(0.0, f64::max);
        best = best.min(worst);
    });
    best
}

fn permute(items: &mut [usize], k: usize, visit: &mut impl FnMut(&[usize])) {
    if k == items.len() {
        visit(items);
        return;
    }
    for i in k..items.len() {
        items.swap(k, i);
        permute(items, k + 1, visit);
        items.swap(k, i);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    // reference values frozen from an independent lgamma implementation
    const LGAMMA_REF: [(f64, f64); 11] = [
        (0.001, 6.907178885383854),
        (0.01, 4.599479878042022),
        (0.1, 2.2527126517342055),
        (0.5, 0.5723649429247004),
        (1.0, 0.0),
        (1.5, -0.12078223763524543),
        (2.0, 0.0),
        (3.7, 1.4280723266653883),
        (10.0, 12.801827480081467),
        (152.5, 612.5485035797237),
        (1000.0, 5905.220423209181),
    ];

    const DIGAMMA_REF: [(f64, f64); 8] = [
        (0.001, -1000.5755719318103),
        (0.1, -10.423754940411076),
        (0.5, -1.9635100260214235),
        (1.0, -0.5772156649015329),
        (2.0, 0.42278433509846713),
        (5.3, 1.5704109316248085),
        (11.0, 2.3517525890667215),
        (100.0, 4.600161852738088),
    ];

    #[test]
    fn ln_gamma_matches_reference() {
        for &(x, want) in &LGAMMA_REF {
            let got = ln_gamma(x);
            let err = (got - want).abs() / want.abs().max(1.0);
            assert!(err < 1e-10, "ln_gamma({x}) = {got}, want {want}");
        }
    }

    #[test]
    fn digamma_matches_reference() {
        for &(x, want) in &DIGAMMA_REF {
            let got = digamma(x);
            let err = (got - want).abs() / want.abs().max(1.0);
            assert!(err < 1e-11, "digamma({x}) = {got}, want {want}");
        }
    }

    #[test]
    fn digamma_is_derivative_of_ln_gamma() {
        for &x in &[0.2f64, 0.9, 1.7, 4.2, 33.0] {
            let h = 1e-6 * x.max(1.0);
            let fd = (ln_gamma(x + h) - ln_gamma(x - h)) / (2.0 * h);
            assert!((digamma(x) - fd).abs() < 1e-7, "x={x}");
        }
    }

    #[test]
    fn cholesky_solves_spd_system() {
        let a = array![[4.0, 1.0, 0.5], [1.0, 3.0, 0.2], [0.5, 0.2, 2.0]];
        let x_true = array![[1.0], [-2.0], [0.5]];
        let b = a.dot(&x_true);
        let x = cholesky_solve(&a, &b).unwrap();
        for (got, want) in x.iter().zip(x_true.iter()) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = array![[1.0, 2.0], [2.0, 1.0]];
        let b = array![[1.0], [1.0]];
        assert!(cholesky_solve(&a, &b).is_err());
    }

    #[test]
    fn fft_matches_dft() {
        let mut rng = crate::rng::RngState::new(5).rng();
        use rand::Rng;
        let x: Vec<Complex64> =
            (0..64).map(|_| Complex64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)).collect();
        let want = dft(&x);
        let mut got = x.clone();
        fft_in_place(&mut got);
        for (g, w) in got.iter().zip(want.iter()) {
            assert!((g - w).norm() < 1e-9);
        }
    }

    #[test]
    fn fft_locates_sine_peak() {
        let n = 256;
        let k = 19;
        let mut buf: Vec<Complex64> = (0..n)
            .map(|i| {
                Complex64::new(
                    (2.0 * std::f64::consts::PI * k as f64 * i as f64 / n as f64).sin(),
                    0.0,
                )
            })
            .collect();
        fft_in_place(&mut buf);
        let peak = (1..n / 2).max_by(|&a, &b| {
            buf[a].norm().partial_cmp(&buf[b].norm()).unwrap()
        });
        assert_eq!(peak, Some(k));
    }

    #[test]
    fn eigenvalues_of_rotation() {
        let th = 0.3f64;
        let a = array![[th.cos(), -th.sin()], [th.sin(), th.cos()]];
        let mut eig = eigenvalues(&a).unwrap();
        sort_complex(&mut eig);
        assert!((eig[0] - Complex64::new(th.cos(), -th.sin())).norm() < 1e-10);
        assert!((eig[1] - Complex64::new(th.cos(), th.sin())).norm() < 1e-10);
    }

    #[test]
    fn eigenvalues_of_diagonal_and_repeated() {
        let a = array![[2.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, 0.5]];
        let eig = eigenvalues(&a).unwrap();
        let want = [
            Complex64::new(-1.0, 0.0),
            Complex64::new(0.5, 0.0),
            Complex64::new(2.0, 0.0),
        ];
        assert!(eigenvalue_distance(&eig, &want) < 1e-9);
        // repeated eigenvalue (identity); a multiplicity-4 root is only
        // conditioned to ~eps^(1/4) in f64, hence the loose tolerance
        let eye: Array2<f64> = Array2::eye(4);
        for e in eigenvalues(&eye).unwrap() {
            assert!((e - Complex64::new(1.0, 0.0)).norm() < 1e-3);
        }
    }

    #[test]
    fn eigenvalues_match_companion_roots() {
        // companion of (x² + 1)(x − 0.5)(x + 0.25) = x⁴ −0.25x³ +0.875x² −0.25x −0.125
        let c = [0.125, 0.25, -0.875, 0.25]; // −coeffs, ascending
        let a = array![
            [0.0, 0.0, 0.0, c[0]],
            [1.0, 0.0, 0.0, c[1]],
            [0.0, 1.0, 0.0, c[2]],
            [0.0, 0.0, 1.0, c[3]]
        ];
        let eig = eigenvalues(&a).unwrap();
        let want = vec![
            Complex64::new(-0.25, 0.0),
            Complex64::new(0.0, -1.0),
            Complex64::new(0.0, 1.0),
            Complex64::new(0.5, 0.0),
        ];
        assert!(eigenvalue_distance(&eig, &want) < 1e-8);
    }

    #[test]
    fn spectral_radius_of_scaled_rotation() {
        let s = 0.97f64;
        let th = 1.1f64;
        let a = array![[s * th.cos(), -s * th.sin()], [s * th.sin(), s * th.cos()]];
        assert!((spectral_radius(&a).unwrap() - s).abs() < 1e-9);
    }

    #[test]
    fn hann_endpoints_and_symmetry() {
        let w = hann(35);
        assert!(w[0].abs() < 1e-15 && w[34].abs() < 1e-15);
        for i in 0..35 {
            assert!((w[i] - w[34 - i]).abs() < 1e-12);
        }
        assert!((hann(1)[0] - 1.0).abs() < 1e-15);
    }
}
