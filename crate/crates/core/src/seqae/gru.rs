//! Batched gated recurrent cell with update and reset gates, plus its
//! hand-derived backward pass. The generator RNN is the same cell with an
//! empty input (zero-width x), so one implementation serves both the
//! encoder and the autonomous generator.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

/// Weights of one gated cell. Input kernels are `[hidden, input]`,
/// recurrent kernels `[hidden, hidden]`. A zero-width input dimension turns
/// the cell into an autonomous recurrence.
#[derive(Debug, Clone, PartialEq)]
pub struct GruWeights {
    pub w_r: Array2<f64>,
    pub w_u: Array2<f64>,
    pub w_c: Array2<f64>,
    pub u_r: Array2<f64>,
    pub u_u: Array2<f64>,
    pub u_c: Array2<f64>,
    pub b_r: Array1<f64>,
    pub b_u: Array1<f64>,
    pub b_c: Array1<f64>,
}

impl GruWeights {
    pub fn init(input_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let w_scale = if input_dim > 0 { 1.0 / (input_dim as f64).sqrt() } else { 0.0 };
        let u_scale = 1.0 / (hidden as f64).sqrt();
        let mut normal = |scale: f64| {
            use rand_distr::StandardNormal;
            let v: f64 = rng.sample(StandardNormal);
            v * scale
        };
        let mut mat = |rows: usize, cols: usize, scale: f64| {
            Array2::from_shape_simple_fn((rows, cols), || normal(scale))
        };
        GruWeights {
            w_r: mat(hidden, input_dim, w_scale),
            w_u: mat(hidden, input_dim, w_scale),
            w_c: mat(hidden, input_dim, w_scale),
            u_r: mat(hidden, hidden, u_scale),
            u_u: mat(hidden, hidden, u_scale),
            u_c: mat(hidden, hidden, u_scale),
            b_r: Array1::zeros(hidden),
            b_u: Array1::zeros(hidden),
            b_c: Array1::zeros(hidden),
        }
    }

    pub fn zeros_like(&self) -> Self {
        GruWeights {
            w_r: Array2::zeros(self.w_r.dim()),
            w_u: Array2::zeros(self.w_u.dim()),
            w_c: Array2::zeros(self.w_c.dim()),
            u_r: Array2::zeros(self.u_r.dim()),
            u_u: Array2::zeros(self.u_u.dim()),
            u_c: Array2::zeros(self.u_c.dim()),
            b_r: Array1::zeros(self.b_r.len()),
            b_u: Array1::zeros(self.b_u.len()),
            b_c: Array1::zeros(self.b_c.len()),
        }
    }

    pub fn hidden(&self) -> usize {
        self.u_r.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.w_r.ncols()
    }

    /// Sum of squares of the recurrent kernels (the L2-penalized set).
    pub fn recurrent_sq_norm(&self) -> f64 {
        [&self.u_r, &self.u_u, &self.u_c]
            .iter()
            .map(|m| m.iter().map(|v| v * v).sum::<f64>())
            .sum()
    }
}

/// Per-step activations cached by the forward pass for the backward pass.
/// `h_prev` is the hidden state the step consumed.
#[derive(Debug, Clone)]
pub struct GruStepCache {
    pub r: Array2<f64>,
    pub u: Array2<f64>,
    pub c: Array2<f64>,
    pub h_prev: Array2<f64>,
}

fn sigmoid_mat(mut m: Array2<f64>) -> Array2<f64> {
    m.mapv_inplace(crate::numerics::sigmoid);
    m
}

/// One batched step: x is `[batch, input]`, h `[batch, hidden]`. Pass a
/// `[batch, 0]` x for the autonomous cell.
pub fn gru_step(w: &GruWeights, x: &ArrayView2<f64>, h: &Array2<f64>) -> (Array2<f64>, GruStepCache) {
    let has_input = w.input_dim() > 0;
    let mut pre_r = h.dot(&w.u_r.t()) + &w.b_r;
    let mut pre_u = h.dot(&w.u_u.t()) + &w.b_u;
    if has_input {
        pre_r += &x.dot(&w.w_r.t());
        pre_u += &x.dot(&w.w_u.t());
    }
    let r = sigmoid_mat(pre_r);
    let u = sigmoid_mat(pre_u);
    let rh = &r * h;
    let mut pre_c = rh.dot(&w.u_c.t()) + &w.b_c;
    if has_input {
        pre_c += &x.dot(&w.w_c.t());
    }
    let c = pre_c.mapv_into(f64::tanh);
    let h_new = &u * h + (1.0 - &u) * &c;
    (h_new, GruStepCache { r, u, c, h_prev: h.clone() })
}

/// Backward through one step. `d_h_new` is the loss gradient at the step's
/// output; returns the gradient at `h_prev` and accumulates weight
/// gradients into `grads`. `x` must be the same input the forward saw.
/// Gradients with respect to x are not produced; inputs here are either
/// data or empty.
pub fn gru_backward_step(
    w: &GruWeights,
    cache: &GruStepCache,
    x: &ArrayView2<f64>,
    d_h_new: &Array2<f64>,
    grads: &mut GruWeights,
) -> Array2<f64> {
    let has_input = w.input_dim() > 0;
    let GruStepCache { r, u, c, h_prev } = cache;

    let d_u = d_h_new * &(h_prev - c);
    let d_c = d_h_new * &(1.0 - u);
    let d_pre_c = d_c * &(1.0 - c * c);
    // direct carry path h' = u ⊙ h + ...
    let mut d_h = d_h_new * u;
    // pre_c = rh·U_cᵀ (+ x·W_cᵀ)
    let d_rh = d_pre_c.dot(&w.u_c);
    let d_r = &d_rh * h_prev;
    d_h += &(&d_rh * r);
    let d_pre_r = d_r * r * &(1.0 - r);
    let d_pre_u = d_u * u * &(1.0 - u);
    d_h += &d_pre_r.dot(&w.u_r);
    d_h += &d_pre_u.dot(&w.u_u);

    let rh = r * h_prev;
    grads.u_r += &d_pre_r.t().dot(h_prev);
    grads.u_u += &d_pre_u.t().dot(h_prev);
    grads.u_c += &d_pre_c.t().dot(&rh);
    grads.b_r += &d_pre_r.sum_axis(Axis(0));
    grads.b_u += &d_pre_u.sum_axis(Axis(0));
    grads.b_c += &d_pre_c.sum_axis(Axis(0));
    if has_input {
        grads.w_r += &d_pre_r.t().dot(x);
        grads.w_u += &d_pre_u.t().dot(x);
        grads.w_c += &d_pre_c.t().dot(x);
    }
    d_h
}
