//! Dense `f64` kernels, activations, the AdaGrad optimizer and a central
//! finite-difference gradient checker.
//!
//! Everything here works on plain row-major buffers. The model code calls the
//! slice-level kernels ([`Matrix::matvec_into`], [`Matrix::matvec_t_acc`],
//! [`Matrix::outer_acc`]) in its inner loops, so they are written to
//! auto-vectorize over contiguous rows.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Contract(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Column vector from a slice.
    pub fn column_vector(values: &[f64]) -> Self {
        Matrix {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Copies column `c` into `out`.
    pub fn column_into(&self, c: usize, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.rows);
        for (r, o) in out.iter_mut().enumerate() {
            *o = self.data[r * self.cols + c];
        }
    }

    /// `self[:, c] += delta`
    pub fn add_to_column(&mut self, c: usize, delta: &[f64]) {
        debug_assert_eq!(delta.len(), self.rows);
        for (r, d) in delta.iter().enumerate() {
            self.data[r * self.cols + c] += d;
        }
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn same_shape(&self, other: &Matrix) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// `out = self · x`
    pub fn matvec_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(self.cols)) {
            *o = dot(row, x);
        }
    }

    /// `out += self · x`
    pub fn matvec_acc(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(self.cols)) {
            *o += dot(row, x);
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows];
        self.matvec_into(x, &mut out);
        out
    }

    /// `out += selfᵀ · dy`
    pub fn matvec_t_acc(&self, dy: &[f64], out: &mut [f64]) {
        debug_assert_eq!(dy.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (&d, row) in dy.iter().zip(self.data.chunks_exact(self.cols)) {
            if d != 0.0 {
                axpy(d, row, out);
            }
        }
    }

    /// `self += dy · xᵀ`
    pub fn outer_acc(&mut self, dy: &[f64], x: &[f64]) {
        debug_assert_eq!(dy.len(), self.rows);
        debug_assert_eq!(x.len(), self.cols);
        let cols = self.cols;
        for (&d, row) in dy.iter().zip(self.data.chunks_exact_mut(cols)) {
            if d != 0.0 {
                axpy(d, x, row);
            }
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    // Four independent partial sums keep the loop vectorizable while the
    // summation order stays fixed.
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += alpha · x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Two-branch logistic function; never evaluates `exp` of a large positive.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted softmax written into `out`.
pub fn softmax_into(v: &[f64], out: &mut [f64]) {
    debug_assert_eq!(v.len(), out.len());
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(v) {
        *o = (x - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Softmax,
}

/// Applies an activation to a whole vector, rejecting empty or non-finite input.
pub fn activations(v: &[f64], kind: Activation) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::NumericDomain("activation of an empty vector".into()));
    }
    if let Some(bad) = v.iter().find(|x| !x.is_finite()) {
        return Err(Error::NumericDomain(format!(
            "non-finite activation input {bad}"
        )));
    }
    Ok(match kind {
        Activation::Sigmoid => v.iter().map(|&x| sigmoid(x)).collect(),
        Activation::Tanh => v.iter().map(|x| x.tanh()).collect(),
        Activation::Softmax => {
            let mut out = vec![0.0; v.len()];
            softmax_into(v, &mut out);
            out
        }
    })
}

/// A named collection of parameter tensors.
///
/// Implemented by the model parameters so the optimizer, the gradient checker
/// and checkpointing can walk every tensor without knowing the model layout.
/// Both methods must yield tensors in the same, fixed order.
pub trait ParamTensors {
    fn tensors(&self) -> Vec<(&'static str, &Matrix)>;
    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Matrix)>;
}

impl ParamTensors for Matrix {
    fn tensors(&self) -> Vec<(&'static str, &Matrix)> {
        vec![("theta", self)]
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        vec![("theta", self)]
    }
}

/// One AdaGrad update of a single tensor.
///
/// `accum += grad²; param -= lr · grad / (sqrt(accum) + eps)`, elementwise.
pub fn adagrad_step(
    param: &mut Matrix,
    grad: &Matrix,
    accum: &mut Matrix,
    lr: f64,
    eps: f64,
) -> Result<()> {
    if !param.same_shape(grad) || !param.same_shape(accum) {
        return Err(Error::Contract(format!(
            "adagrad shapes differ: param {:?}, grad {:?}, accumulator {:?}",
            param.shape(),
            grad.shape(),
            accum.shape()
        )));
    }
    for ((p, &g), a) in param
        .data
        .iter_mut()
        .zip(&grad.data)
        .zip(accum.data.iter_mut())
    {
        if g != 0.0 {
            *a += g * g;
            *p -= lr * g / (a.sqrt() + eps);
        }
    }
    Ok(())
}

/// AdaGrad optimizer state: one squared-gradient accumulator per tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adagrad {
    pub lr: f64,
    pub eps: f64,
    accumulators: Vec<Matrix>,
}

impl Adagrad {
    pub const DEFAULT_LR: f64 = 0.01;
    pub const DEFAULT_EPS: f64 = 1e-8;

    pub fn new<P: ParamTensors>(params: &P, lr: f64, eps: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) || !(eps >= 0.0 && eps.is_finite()) {
            return Err(Error::Contract(format!(
                "adagrad needs lr > 0 and eps >= 0, got lr={lr}, eps={eps}"
            )));
        }
        let accumulators = params
            .tensors()
            .into_iter()
            .map(|(_, m)| Matrix::zeros(m.rows(), m.cols()))
            .collect();
        Ok(Adagrad {
            lr,
            eps,
            accumulators,
        })
    }

    /// Rebuilds optimizer state from saved accumulators.
    pub fn from_accumulators(lr: f64, eps: f64, accumulators: Vec<Matrix>) -> Self {
        Adagrad {
            lr,
            eps,
            accumulators,
        }
    }

    pub fn accumulators(&self) -> &[Matrix] {
        &self.accumulators
    }

    pub fn step<P: ParamTensors>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        let grads = grads.tensors();
        let params = params.tensors_mut();
        if params.len() != grads.len() || params.len() != self.accumulators.len() {
            return Err(Error::Contract(format!(
                "adagrad tracks {} tensors, got {} params and {} grads",
                self.accumulators.len(),
                params.len(),
                grads.len()
            )));
        }
        for (((_, p), (_, g)), acc) in params
            .into_iter()
            .zip(grads)
            .zip(self.accumulators.iter_mut())
        {
            adagrad_step(p, g, acc, self.lr, self.eps)?;
        }
        Ok(())
    }
}

/// Denominator floor for relative gradient errors. Central differences at
/// step 1e-5 carry roundoff near 1e-11 on losses of order one, so absolute
/// disagreements below 1e-10 cannot be resolved; the floor maps that to 1e-4.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Worst entry found by [`finite_diff_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_tensor: &'static str,
    pub worst_index: usize,
    pub entries_checked: usize,
}

/// Compares an analytic gradient against central differences on every entry.
///
/// Returns the largest `|a - n| / max(GRAD_CHECK_FLOOR, |a| + |n|)` over all entries.
pub fn finite_diff_check<P, F>(
    params: &P,
    mut f: F,
    analytic: &P,
    step: f64,
) -> Result<GradCheckReport>
where
    P: ParamTensors + Clone,
    F: FnMut(&P) -> f64,
{
    if !(step > 0.0) {
        return Err(Error::Contract(format!("step must be positive, got {step}")));
    }
    let mut probe = params.clone();
    let analytic = analytic.tensors();
    let n_tensors = analytic.len();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_tensor: "",
        worst_index: 0,
        entries_checked: 0,
    };
    for t in 0..n_tensors {
        let (name, grad) = analytic[t];
        for i in 0..grad.len() {
            let original = probe.tensors()[t].1.as_slice()[i];
            probe.tensors_mut()[t].1.as_mut_slice()[i] = original + step;
            let plus = f(&probe);
            probe.tensors_mut()[t].1.as_mut_slice()[i] = original - step;
            let minus = f(&probe);
            probe.tensors_mut()[t].1.as_mut_slice()[i] = original;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NumericDomain(format!(
                    "objective is not finite when perturbing {name}[{i}]"
                )));
            }
            let numeric = (plus - minus) / (2.0 * step);
            let a = grad.as_slice()[i];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(GRAD_CHECK_FLOOR);
            report.entries_checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_tensor = name;
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}
