//! Differentiable numeric building blocks.
//!
//! Every block is a forward function returning its output plus whatever the
//! backward pass needs, and a backward function mapping an upstream gradient
//! to input and parameter gradients. Blocks that own parameters accumulate into
//! [`Param::grad`]. Forward passes never mutate parameters; batch-norm running
//! statistics are committed explicitly from the tape with [`BatchNorm::commit`].
//!
//! All arithmetic is 64-bit. [`grad_check`] and [`check_module_params`] compare
//! analytic gradients with central finite differences.

use matrixmultiply::dgemm;
use rand::Rng;

use crate::error::{Error, Result};

/// Batch-norm variance epsilon; the normalizer is `sqrt(var + BN_EPS)`.
pub const BN_EPS: f64 = 1e-5;
/// Running-statistics update momentum.
pub const BN_MOMENTUM: f64 = 0.1;
/// Lower clamp on the norm in [`l2_normalize`].
pub const NORM_EPS: f64 = 1e-12;
/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Dense row-major tensor of 64-bit floats.
///
/// Most blocks treat a tensor as a matrix: the first axis is the row (batch)
/// axis and all remaining axes are flattened into columns.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::invalid(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::from_vec(&[rows, cols], data)
    }

    /// Random matrix with entries from `U[-scale, scale]`.
    pub fn uniform(shape: &[usize], scale: f64, rng: &mut impl Rng) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-scale..=scale)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::invalid(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }
}

/// `c = op(a) · op(b) + beta · c` with `op(a)` of shape m×k and `op(b)` k×n.
///
/// A transposed operand is stored in its untransposed row-major layout.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slice length assertions above bound every access made by
    // the strided kernel.
    unsafe {
        dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Trainable tensor with its gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Callback interface for walking the named state of a module.
pub trait Visitor {
    fn param(&mut self, name: &str, param: &mut Param);

    /// Non-trainable state such as batch-norm running statistics.
    fn buffer(&mut self, _name: &str, _buffer: &mut Tensor) {}
}

/// Anything owning parameters. Visiting order is stable and defines the
/// layout used by the optimizer and the checkpoint format.
pub trait Module {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor);

    fn zero_grad(&mut self) {
        for_each_param(self, |_, p| p.zero_grad());
    }

    fn param_count(&mut self) -> usize {
        let mut n = 0;
        for_each_param(self, |_, p| n += p.value.len());
        n
    }
}

pub fn scoped(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

struct ParamFn<F>(F);

impl<F: FnMut(&str, &mut Param)> Visitor for ParamFn<F> {
    fn param(&mut self, name: &str, param: &mut Param) {
        (self.0)(name, param)
    }
}

pub fn for_each_param<M: Module + ?Sized>(m: &mut M, f: impl FnMut(&str, &mut Param)) {
    m.visit("", &mut ParamFn(f));
}

// ---------------------------------------------------------------------------
// linear

/// Affine map `y = x·W + b` with `W` stored `in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    /// Fan-in scaled uniform weights, zero bias.
    pub fn new(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let scale = 1.0 / (fan_in.max(1) as f64).sqrt();
        Linear {
            weight: Param::new(Tensor::uniform(&[fan_in, fan_out], scale, rng)),
            bias: Param::new(Tensor::zeros(&[fan_out])),
        }
    }

    pub fn from_parts(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.shape().len() != 2 || bias.len() != weight.shape()[1] {
            return Err(Error::invalid(format!(
                "linear weight {:?} incompatible with bias {:?}",
                weight.shape(),
                bias.shape()
            )));
        }
        Ok(Linear {
            weight: Param::new(weight),
            bias: Param::new(bias),
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        linear(x, &self.weight.value, &self.bias.value)
    }

    /// Accumulates parameter gradients; returns the input gradient when asked.
    pub fn backward(&mut self, x: &Tensor, grad_out: &Tensor, want_input: bool) -> Option<Tensor> {
        let (rows, din, dout) = (x.rows(), self.in_dim(), self.out_dim());
        gemm(
            din,
            rows,
            dout,
            x.data(),
            true,
            grad_out.data(),
            false,
            self.weight.grad.data_mut(),
            1.0,
        );
        let gb = self.bias.grad.data_mut();
        for r in 0..rows {
            for (g, d) in gb.iter_mut().zip(grad_out.row(r)) {
                *g += d;
            }
        }
        want_input.then(|| {
            let mut gi = Tensor::zeros(&[rows, din]);
            gemm(
                rows,
                dout,
                din,
                grad_out.data(),
                false,
                self.weight.value.data(),
                true,
                gi.data_mut(),
                0.0,
            );
            gi
        })
    }
}

impl Module for Linear {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor) {
        v.param(&scoped(prefix, "weight"), &mut self.weight);
        v.param(&scoped(prefix, "bias"), &mut self.bias);
    }
}

pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    if w.shape().len() != 2 || x.cols() != w.shape()[0] || b.len() != w.shape()[1] {
        return Err(Error::invalid(format!(
            "linear: input {:?}, weight {:?}, bias {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    let (rows, din, dout) = (x.rows(), w.shape()[0], w.shape()[1]);
    let mut out = Tensor::zeros(&[rows, dout]);
    for r in 0..rows {
        out.row_mut(r).copy_from_slice(b.data());
    }
    gemm(rows, din, dout, x.data(), false, w.data(), false, out.data_mut(), 1.0);
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct LinearGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn linear_backward(x: &Tensor, w: &Tensor, grad_out: &Tensor) -> LinearGrads {
    let mut lin = Linear {
        weight: Param::new(w.clone()),
        bias: Param::new(Tensor::zeros(&[w.shape()[1]])),
    };
    let input = lin.backward(x, grad_out, true).expect("input gradient requested");
    LinearGrads {
        input,
        weight: lin.weight.grad,
        bias: lin.bias.grad,
    }
}

// ---------------------------------------------------------------------------
// relu

pub fn relu(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    out
}

/// Gradient passes where the forward input was strictly positive.
pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Tensor {
    let mut g = grad_out.clone();
    for (gv, xv) in g.data_mut().iter_mut().zip(x.data()) {
        if *xv <= 0.0 {
            *gv = 0.0;
        }
    }
    g
}

// ---------------------------------------------------------------------------
// batch normalization

#[derive(Clone, Debug, PartialEq)]
pub struct Affine {
    pub gamma: Param,
    pub beta: Param,
}

/// Per-channel batch normalization over the row axis.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub affine: Option<Affine>,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
}

/// Saved state of one normalization call.
#[derive(Clone, Debug)]
pub struct NormTape {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
    pub mode: Mode,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
}

impl BatchNorm {
    /// Affine normalization starting at `γ = 1`, `β = 0`.
    pub fn new(channels: usize) -> Self {
        let mut bn = Self::without_affine(channels);
        bn.affine = Some(Affine {
            gamma: Param::new(Tensor::filled(&[channels], 1.0)),
            beta: Param::new(Tensor::zeros(&[channels])),
        });
        bn
    }

    pub fn without_affine(channels: usize) -> Self {
        BatchNorm {
            affine: None,
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::filled(&[channels], 1.0),
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// Standardizes `x` with batch statistics (train) or running ones (eval).
    pub fn normalize(&self, x: &Tensor, mode: Mode) -> Result<NormTape> {
        let c = self.channels();
        if x.cols() != c {
            return Err(Error::invalid(format!(
                "batchnorm expects {c} channels, input has shape {:?}",
                x.shape()
            )));
        }
        let n = x.rows();
        let (mean, var) = match mode {
            Mode::Train => {
                if n < 2 {
                    return Err(Error::invalid(format!(
                        "batch normalization in train mode needs at least 2 rows, got {n}"
                    )));
                }
                let mut mean = vec![0.0; c];
                for r in 0..n {
                    for (m, v) in mean.iter_mut().zip(x.row(r)) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let mut var = vec![0.0; c];
                for r in 0..n {
                    for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                        let d = v - m;
                        *s += d * d;
                    }
                }
                var.iter_mut().for_each(|s| *s /= n as f64);
                (mean, var)
            }
            Mode::Eval => (
                self.running_mean.data().to_vec(),
                self.running_var.data().to_vec(),
            ),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut xhat = Tensor::zeros(&[n, c]);
        for r in 0..n {
            let src = x.row(r);
            for (j, o) in xhat.row_mut(r).iter_mut().enumerate() {
                *o = (src[j] - mean[j]) * inv_std[j];
            }
        }
        Ok(NormTape {
            xhat,
            inv_std,
            mode,
            batch_mean: mean,
            batch_var: var,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, NormTape)> {
        let tape = self.normalize(x, mode)?;
        let mut out = tape.xhat.clone();
        if let Some(aff) = &self.affine {
            let (g, b) = (aff.gamma.value.data(), aff.beta.value.data());
            for r in 0..out.rows() {
                for ((o, gv), bv) in out.row_mut(r).iter_mut().zip(g).zip(b) {
                    *o = *o * gv + bv;
                }
            }
        }
        Ok((out, tape))
    }

    /// Accumulates affine gradients and returns the input gradient.
    pub fn backward(&mut self, tape: &NormTape, grad_out: &Tensor) -> Tensor {
        let grad_xhat = match &mut self.affine {
            Some(aff) => {
                let c = tape.xhat.cols();
                let mut gx = grad_out.clone();
                let gamma = aff.gamma.value.data();
                for r in 0..gx.rows() {
                    let go = grad_out.row(r);
                    let xh = tape.xhat.row(r);
                    let gg = aff.gamma.grad.data_mut();
                    for j in 0..c {
                        gg[j] += go[j] * xh[j];
                    }
                    let gb = aff.beta.grad.data_mut();
                    for j in 0..c {
                        gb[j] += go[j];
                    }
                    for (v, g) in gx.row_mut(r).iter_mut().zip(gamma) {
                        *v *= g;
                    }
                }
                gx
            }
            None => grad_out.clone(),
        };
        normalize_backward(tape, &grad_xhat)
    }

    /// Folds the batch statistics of a train-mode tape into the running ones.
    pub fn commit(&mut self, tape: &NormTape) {
        if tape.mode != Mode::Train {
            return;
        }
        let n = tape.xhat.rows() as f64;
        let m = self.momentum;
        let unbiased = n / (n - 1.0);
        for (rm, bm) in self.running_mean.data_mut().iter_mut().zip(&tape.batch_mean) {
            *rm = (1.0 - m) * *rm + m * bm;
        }
        for (rv, bv) in self.running_var.data_mut().iter_mut().zip(&tape.batch_var) {
            *rv = (1.0 - m) * *rv + m * bv * unbiased;
        }
    }
}

impl Module for BatchNorm {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor) {
        if let Some(aff) = &mut self.affine {
            v.param(&scoped(prefix, "gamma"), &mut aff.gamma);
            v.param(&scoped(prefix, "beta"), &mut aff.beta);
        }
        v.buffer(&scoped(prefix, "running_mean"), &mut self.running_mean);
        v.buffer(&scoped(prefix, "running_var"), &mut self.running_var);
    }
}

/// Gradient of the standardization step given the gradient w.r.t. `xhat`.
pub fn normalize_backward(tape: &NormTape, grad_xhat: &Tensor) -> Tensor {
    let (n, c) = (tape.xhat.rows(), tape.xhat.cols());
    let mut gx = Tensor::zeros(&[n, c]);
    match tape.mode {
        Mode::Eval => {
            for r in 0..n {
                let g = grad_xhat.row(r);
                for (j, o) in gx.row_mut(r).iter_mut().enumerate() {
                    *o = g[j] * tape.inv_std[j];
                }
            }
        }
        Mode::Train => {
            let mut sum_g = vec![0.0; c];
            let mut sum_gx = vec![0.0; c];
            for r in 0..n {
                let g = grad_xhat.row(r);
                let xh = tape.xhat.row(r);
                for j in 0..c {
                    sum_g[j] += g[j];
                    sum_gx[j] += g[j] * xh[j];
                }
            }
            let nf = n as f64;
            for r in 0..n {
                let g = grad_xhat.row(r);
                let xh = tape.xhat.row(r);
                for (j, o) in gx.row_mut(r).iter_mut().enumerate() {
                    *o = tape.inv_std[j] / nf * (nf * g[j] - sum_g[j] - xh[j] * sum_gx[j]);
                }
            }
        }
    }
    gx
}

/// Conditional batch normalization: `γ_r ⊙ (x_r − μ)/σ + β_r` with per-row
/// `γ`, `β` supplied by the caller and statistics shared across the batch.
pub fn cbn(
    norm: &BatchNorm,
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mode: Mode,
) -> Result<(Tensor, NormTape)> {
    if gamma.shape() != x.shape() || beta.shape() != x.shape() {
        return Err(Error::invalid(format!(
            "cbn: input {:?}, gamma {:?}, beta {:?}",
            x.shape(),
            gamma.shape(),
            beta.shape()
        )));
    }
    let tape = norm.normalize(x, mode)?;
    let mut out = tape.xhat.clone();
    for ((o, g), b) in out.data_mut().iter_mut().zip(gamma.data()).zip(beta.data()) {
        *o = *o * g + b;
    }
    Ok((out, tape))
}

#[derive(Clone, Debug)]
pub struct CbnGrads {
    pub input: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
}

pub fn cbn_backward(tape: &NormTape, gamma: &Tensor, grad_out: &Tensor) -> CbnGrads {
    let mut grad_gamma = grad_out.clone();
    for (g, xh) in grad_gamma.data_mut().iter_mut().zip(tape.xhat.data()) {
        *g *= xh;
    }
    let mut grad_xhat = grad_out.clone();
    for (g, gm) in grad_xhat.data_mut().iter_mut().zip(gamma.data()) {
        *g *= gm;
    }
    CbnGrads {
        input: normalize_backward(tape, &grad_xhat),
        gamma: grad_gamma,
        beta: grad_out.clone(),
    }
}

// ---------------------------------------------------------------------------
// l2 normalization

/// Row-wise `x / max(‖x‖, NORM_EPS)`; returns the output and the clamped norms.
/// A zero row maps to a zero row.
pub fn l2_normalize(x: &Tensor) -> (Tensor, Vec<f64>) {
    let mut out = x.clone();
    let mut norms = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
        row.iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    (out, norms)
}

pub fn l2_normalize_vec(v: &[f64]) -> Vec<f64> {
    let t = Tensor::matrix(1, v.len(), v.to_vec()).expect("row vector");
    l2_normalize(&t).0.into_data()
}

pub fn l2_normalize_backward(y: &Tensor, norms: &[f64], grad_out: &Tensor) -> Tensor {
    let mut gx = grad_out.clone();
    for (r, &n) in norms.iter().enumerate() {
        let yr = y.row(r);
        let g = gx.row_mut(r);
        if n > NORM_EPS {
            let dot: f64 = yr.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
            for (gv, yv) in g.iter_mut().zip(yr) {
                *gv = (*gv - yv * dot) / n;
            }
        } else {
            g.iter_mut().for_each(|v| *v /= n);
        }
    }
    gx
}

// ---------------------------------------------------------------------------
// grouped max pooling

/// Channel-wise max over consecutive blocks of `members` rows.
///
/// Returns the pooled `groups × channels` tensor and, per output entry, the
/// winning member (lowest index on ties).
pub fn group_max_pool(x: &Tensor, members: usize) -> Result<(Tensor, Vec<u32>)> {
    if members == 0 || !x.rows().is_multiple_of(members) {
        return Err(Error::invalid(format!(
            "cannot pool {} rows into groups of {members}",
            x.rows()
        )));
    }
    let (groups, c) = (x.rows() / members, x.cols());
    let mut out = Tensor::zeros(&[groups, c]);
    let mut arg = vec![0u32; groups * c];
    for g in 0..groups {
        let base = g * members;
        out.row_mut(g).copy_from_slice(x.row(base));
        let (o, a) = (out.row_mut(g), &mut arg[g * c..(g + 1) * c]);
        for m in 1..members {
            for (j, v) in x.row(base + m).iter().enumerate() {
                if *v > o[j] {
                    o[j] = *v;
                    a[j] = m as u32;
                }
            }
        }
    }
    Ok((out, arg))
}

pub fn group_max_pool_backward(argmax: &[u32], members: usize, grad_out: &Tensor) -> Tensor {
    let (groups, c) = (grad_out.rows(), grad_out.cols());
    let mut gx = Tensor::zeros(&[groups * members, c]);
    for g in 0..groups {
        let go = grad_out.row(g);
        for j in 0..c {
            let m = argmax[g * c + j] as usize;
            gx.data_mut()[(g * members + m) * c + j] += go[j];
        }
    }
    gx
}

// ---------------------------------------------------------------------------
// softmax cross-entropy

/// `−log softmax(logits)[target]` and its gradient `softmax − onehot`.
pub fn softmax_cross_entropy(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    if target >= logits.len() {
        return Err(Error::invalid(format!(
            "target {target} out of range for {} logits",
            logits.len()
        )));
    }
    if let Some(bad) = logits.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite logit {bad}")));
    }
    let (imax, &max) = logits
        .iter()
        .enumerate()
        .fold((0, &f64::NEG_INFINITY), |acc, (i, v)| if *v > *acc.1 { (i, v) } else { acc });
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let rest: f64 = exps
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != imax)
        .map(|(_, e)| e)
        .sum();
    let loss = (max - logits[target]) + rest.ln_1p();
    let total = 1.0 + rest;
    let mut grad: Vec<f64> = exps.iter().map(|e| e / total).collect();
    grad[target] -= 1.0;
    Ok((loss, grad))
}

// ---------------------------------------------------------------------------
// finite-difference verification

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    /// Coordinate (or parameter name and index) with the largest error.
    pub worst: Option<String>,
    pub checked: usize,
    /// Coordinates left out because the step crossed a kink.
    pub skipped: usize,
    pub tolerance: f64,
    pub pass: bool,
}

impl GradReport {
    fn empty(tolerance: f64) -> Self {
        GradReport {
            max_rel_err: 0.0,
            worst: None,
            checked: 0,
            skipped: 0,
            tolerance,
            pass: true,
        }
    }

    fn record(&mut self, err: f64, label: impl FnOnce() -> String) {
        self.checked += 1;
        if err > self.max_rel_err || err.is_nan() {
            self.max_rel_err = err;
            self.worst = Some(label());
        }
        self.pass = self.max_rel_err <= self.tolerance;
    }

    pub fn merge(mut self, other: GradReport) -> GradReport {
        self.checked += other.checked;
        self.skipped += other.skipped;
        if other.max_rel_err > self.max_rel_err || other.max_rel_err.is_nan() {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
        self.tolerance = self.tolerance.min(other.tolerance);
        self.pass = self.max_rel_err <= self.tolerance;
        self
    }
}

/// `|a − n| / max(1, |a|, |n|)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Compares `analytic` with central differences of `f` at `point` on the
/// given coordinates (all coordinates when `coords` is `None`).
pub fn grad_check(
    mut f: impl FnMut(&[f64]) -> f64,
    point: &[f64],
    analytic: &[f64],
    coords: Option<&[usize]>,
    tolerance: f64,
) -> GradReport {
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..point.len()).collect();
            &all
        }
    };
    let mut x = point.to_vec();
    let mut report = GradReport::empty(tolerance);
    for &i in coords {
        let orig = x[i];
        x[i] = orig + FD_STEP;
        let up = f(&x);
        x[i] = orig - FD_STEP;
        let down = f(&x);
        x[i] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        report.record(rel_err(analytic[i], numeric), || format!("[{i}]"));
    }
    report
}

fn set_param<M: Module + ?Sized>(m: &mut M, ordinal: usize, index: usize, value: f64) {
    let mut k = 0;
    for_each_param(m, |_, p| {
        if k == ordinal {
            p.value.data_mut()[index] = value;
        }
        k += 1;
    });
}

/// Checks the gradients accumulated in `m`'s parameters against central
/// differences of `loss`, sampling up to `per_tensor` entries of each tensor.
pub fn check_module_params<M: Module>(
    m: &mut M,
    mut loss: impl FnMut(&M) -> f64,
    per_tensor: usize,
    rng: &mut impl Rng,
    tolerance: f64,
) -> GradReport {
    check_module_params_smooth(m, |m| (loss(m), Vec::new()), per_tensor, rng, tolerance)
}

/// Like [`check_module_params`], with `loss` also returning the pass's
/// piecewise-linear pattern. A coordinate whose two evaluations differ in
/// pattern straddles a kink and is skipped.
pub fn check_module_params_smooth<M: Module>(
    m: &mut M,
    mut loss: impl FnMut(&M) -> (f64, Vec<u32>),
    per_tensor: usize,
    rng: &mut impl Rng,
    tolerance: f64,
) -> GradReport {
    let mut tensors: Vec<(String, Vec<f64>, Vec<f64>)> = Vec::new();
    for_each_param(m, |name, p| {
        tensors.push((name.to_string(), p.value.data().to_vec(), p.grad.data().to_vec()))
    });
    let mut report = GradReport::empty(tolerance);
    for (ordinal, (name, value, grad)) in tensors.iter().enumerate() {
        let picks: Vec<usize> = if grad.len() <= per_tensor {
            (0..grad.len()).collect()
        } else {
            rand::seq::index::sample(rng, grad.len(), per_tensor).into_vec()
        };
        for i in picks {
            set_param(m, ordinal, i, value[i] + FD_STEP);
            let (up, up_pattern) = loss(m);
            set_param(m, ordinal, i, value[i] - FD_STEP);
            let (down, down_pattern) = loss(m);
            set_param(m, ordinal, i, value[i]);
            if up_pattern != down_pattern {
                report.skipped += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * FD_STEP);
            report.record(rel_err(grad[i], numeric), || format!("{name}[{i}]"));
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn weighted_sum(y: &Tensor, w: &Tensor) -> f64 {
        y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn linear_identity_passes_input_through() {
        let x = Tensor::matrix(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.0, 4.0]).unwrap();
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        let y = linear(&x, &eye, &Tensor::zeros(&[3])).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn linear_bias_grad_is_batch_sum() {
        let mut r = rng();
        let x = Tensor::uniform(&[5, 3], 1.0, &mut r);
        let w = Tensor::uniform(&[3, 2], 1.0, &mut r);
        let g = linear_backward(&x, &w, &Tensor::filled(&[5, 2], 1.0));
        assert_eq!(g.bias.data(), &[5.0, 5.0]);
    }

    #[test]
    fn linear_shape_mismatch_is_rejected() {
        let x = Tensor::zeros(&[2, 4]);
        let w = Tensor::zeros(&[3, 2]);
        assert!(matches!(
            linear(&x, &w, &Tensor::zeros(&[2])),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn linear_gradcheck_4x3() {
        let mut r = rng();
        let x = Tensor::uniform(&[4, 3], 1.0, &mut r);
        let w = Tensor::uniform(&[3, 5], 1.0, &mut r);
        let b = Tensor::uniform(&[5], 1.0, &mut r);
        let proj = Tensor::uniform(&[4, 5], 1.0, &mut r);
        let g = linear_backward(&x, &w, &proj);
        let fx = |v: &[f64]| {
            let xv = Tensor::matrix(4, 3, v.to_vec()).unwrap();
            weighted_sum(&linear(&xv, &w, &b).unwrap(), &proj)
        };
        assert!(grad_check(fx, x.data(), g.input.data(), None, 1e-6).pass);
        let fw = |v: &[f64]| {
            let wv = Tensor::matrix(3, 5, v.to_vec()).unwrap();
            weighted_sum(&linear(&x, &wv, &b).unwrap(), &proj)
        };
        assert!(grad_check(fw, w.data(), g.weight.data(), None, 1e-6).pass);
        let fb = |v: &[f64]| {
            let bv = Tensor::from_vec(&[5], v.to_vec()).unwrap();
            weighted_sum(&linear(&x, &w, &bv).unwrap(), &proj)
        };
        assert!(grad_check(fb, b.data(), g.bias.data(), None, 1e-6).pass);
    }

    #[test]
    fn relu_cases() {
        let neg = Tensor::matrix(1, 3, vec![-1.0, -0.5, -3.0]).unwrap();
        assert!(relu(&neg).data().iter().all(|v| *v == 0.0));
        let pos = Tensor::matrix(1, 3, vec![1.0, 0.5, 3.0]).unwrap();
        assert_eq!(relu(&pos), pos);
        // subgradient at zero is zero
        let zero = Tensor::matrix(1, 1, vec![0.0]).unwrap();
        assert_eq!(relu_backward(&zero, &Tensor::filled(&[1, 1], 1.0)).data(), &[0.0]);
    }

    #[test]
    fn relu_gradcheck_away_from_kink() {
        let mut r = rng();
        let mut x = Tensor::uniform(&[6, 4], 1.0, &mut r);
        for v in x.data_mut() {
            if v.abs() < 1e-2 {
                *v += 0.05;
            }
        }
        let proj = Tensor::uniform(&[6, 4], 1.0, &mut r);
        let g = relu_backward(&x, &proj);
        let f = |v: &[f64]| weighted_sum(&relu(&Tensor::matrix(6, 4, v.to_vec()).unwrap()), &proj);
        assert!(grad_check(f, x.data(), g.data(), None, 1e-8).pass);
    }

    #[test]
    fn batchnorm_two_values_map_to_plus_minus_one() {
        let bn = BatchNorm::new(1);
        let x = Tensor::matrix(2, 1, vec![1.0, 3.0]).unwrap();
        let (y, _) = bn.forward(&x, Mode::Train).unwrap();
        let s = 1.0 / (1.0 + BN_EPS).sqrt();
        assert!((y.data()[0] + s).abs() < 1e-12 && (y.data()[1] - s).abs() < 1e-12);
        assert!((y.data()[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn batchnorm_needs_two_rows_in_train_mode() {
        let bn = BatchNorm::new(3);
        assert!(bn.forward(&Tensor::zeros(&[1, 3]), Mode::Train).is_err());
        assert!(bn.forward(&Tensor::zeros(&[1, 3]), Mode::Eval).is_ok());
    }

    #[test]
    fn batchnorm_train_output_is_standardized() {
        let mut r = rng();
        let mut x = Tensor::uniform(&[50, 4], 3.0, &mut r);
        x.data_mut().iter_mut().for_each(|v| *v += 7.0);
        let (_, tape) = BatchNorm::new(4).forward(&x, Mode::Train).unwrap();
        for j in 0..4 {
            let col: Vec<f64> = (0..50).map(|i| tape.xhat.row(i)[j]).collect();
            let mean = col.iter().sum::<f64>() / 50.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 50.0;
            assert!(mean.abs() <= 1e-6);
            assert!((var - 1.0).abs() <= 1e-4);
        }
    }

    #[test]
    fn batchnorm_eval_is_deterministic_and_commit_moves_running_stats() {
        let mut r = rng();
        let x = Tensor::uniform(&[8, 3], 1.0, &mut r);
        let mut bn = BatchNorm::new(3);
        let a = bn.forward(&x, Mode::Eval).unwrap().0;
        let b = bn.forward(&x, Mode::Eval).unwrap().0;
        assert_eq!(a, b);
        let (_, tape) = bn.forward(&x, Mode::Train).unwrap();
        bn.commit(&tape);
        assert!(bn.running_mean.data().iter().any(|v| *v != 0.0));
        assert!(bn.running_var.data().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn batchnorm_gradcheck() {
        let mut r = rng();
        let x = Tensor::uniform(&[7, 3], 2.0, &mut r);
        let mut bn = BatchNorm::new(3);
        bn.affine.as_mut().unwrap().gamma.value = Tensor::uniform(&[3], 1.0, &mut r);
        bn.affine.as_mut().unwrap().beta.value = Tensor::uniform(&[3], 1.0, &mut r);
        let proj = Tensor::uniform(&[7, 3], 1.0, &mut r);
        for mode in [Mode::Train, Mode::Eval] {
            let (_, tape) = bn.forward(&x, mode).unwrap();
            bn.zero_grad();
            let gx = bn.backward(&tape, &proj);
            let f = |v: &[f64]| {
                let xv = Tensor::matrix(7, 3, v.to_vec()).unwrap();
                weighted_sum(&bn.forward(&xv, mode).unwrap().0, &proj)
            };
            let rep = grad_check(f, x.data(), gx.data(), None, 1e-5);
            assert!(rep.pass, "{mode:?}: {rep:?}");
            let bn_copy = bn.clone();
            let rep = check_module_params(
                &mut bn,
                |m| weighted_sum(&m.forward(&x, mode).unwrap().0, &proj),
                10,
                &mut r,
                1e-5,
            );
            assert!(rep.pass, "{rep:?}");
            assert_eq!(bn, bn_copy);
        }
    }

    #[test]
    fn cbn_with_unit_gamma_matches_batchnorm() {
        let mut r = rng();
        let x = Tensor::uniform(&[6, 4], 1.0, &mut r);
        let bn = BatchNorm::new(4);
        let (a, _) = bn.forward(&x, Mode::Train).unwrap();
        let plain = BatchNorm::without_affine(4);
        let (b, _) = cbn(
            &plain,
            &x,
            &Tensor::filled(&[6, 4], 1.0),
            &Tensor::zeros(&[6, 4]),
            Mode::Train,
        )
        .unwrap();
        assert_eq!(a, b);
        let (c, _) = cbn(
            &plain,
            &x,
            &Tensor::filled(&[6, 4], 1.0),
            &Tensor::filled(&[6, 4], 2.5),
            Mode::Train,
        )
        .unwrap();
        for (u, v) in c.data().iter().zip(a.data()) {
            assert!((u - v - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn cbn_rejects_length_mismatch() {
        let plain = BatchNorm::without_affine(4);
        let x = Tensor::zeros(&[3, 4]);
        let g = Tensor::zeros(&[3, 3]);
        assert!(cbn(&plain, &x, &g, &Tensor::zeros(&[3, 4]), Mode::Train).is_err());
    }

    #[test]
    fn cbn_gradcheck() {
        let mut r = rng();
        let (n, c) = (6, 3);
        let x = Tensor::uniform(&[n, c], 1.5, &mut r);
        let gamma = Tensor::uniform(&[n, c], 2.0, &mut r);
        let beta = Tensor::uniform(&[n, c], 1.0, &mut r);
        let proj = Tensor::uniform(&[n, c], 1.0, &mut r);
        let plain = BatchNorm::without_affine(c);
        let (_, tape) = cbn(&plain, &x, &gamma, &beta, Mode::Train).unwrap();
        let g = cbn_backward(&tape, &gamma, &proj);
        let eval = |x: &Tensor, gm: &Tensor, bt: &Tensor| {
            weighted_sum(&cbn(&plain, x, gm, bt, Mode::Train).unwrap().0, &proj)
        };
        let t = |v: &[f64]| Tensor::matrix(n, c, v.to_vec()).unwrap();
        assert!(grad_check(|v| eval(&t(v), &gamma, &beta), x.data(), g.input.data(), None, 1e-5).pass);
        assert!(grad_check(|v| eval(&x, &t(v), &beta), gamma.data(), g.gamma.data(), None, 1e-5).pass);
        assert!(grad_check(|v| eval(&x, &gamma, &t(v)), beta.data(), g.beta.data(), None, 1e-5).pass);
    }

    #[test]
    fn l2_normalize_cases() {
        assert_eq!(l2_normalize_vec(&[3.0, 4.0]), vec![0.6, 0.8]);
        assert_eq!(l2_normalize_vec(&[0.0, 1.0, 0.0]), vec![0.0, 1.0, 0.0]);
        assert_eq!(l2_normalize_vec(&[0.0, 0.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn l2_normalize_gradcheck() {
        let mut r = rng();
        let x = Tensor::uniform(&[3, 5], 1.0, &mut r);
        let proj = Tensor::uniform(&[3, 5], 1.0, &mut r);
        let (y, norms) = l2_normalize(&x);
        let g = l2_normalize_backward(&y, &norms, &proj);
        let f = |v: &[f64]| weighted_sum(&l2_normalize(&Tensor::matrix(3, 5, v.to_vec()).unwrap()).0, &proj);
        assert!(grad_check(f, x.data(), g.data(), None, 1e-6).pass);
    }

    #[test]
    fn group_max_pool_cases() {
        let x = Tensor::matrix(2, 2, vec![1.0, 5.0, 3.0, 2.0]).unwrap();
        let (y, arg) = group_max_pool(&x, 2).unwrap();
        assert_eq!(y.data(), &[3.0, 5.0]);
        assert_eq!(arg, vec![1, 0]);
        let (single, _) = group_max_pool(&x, 1).unwrap();
        assert_eq!(single, x);
        // ties go to the lowest member
        let t = Tensor::matrix(3, 1, vec![2.0, 2.0, 1.0]).unwrap();
        assert_eq!(group_max_pool(&t, 3).unwrap().1, vec![0]);
        assert!(group_max_pool(&t, 2).is_err());
    }

    #[test]
    fn group_max_pool_gradcheck() {
        let mut r = rng();
        let x = Tensor::uniform(&[12, 3], 1.0, &mut r);
        let proj = Tensor::uniform(&[3, 3], 1.0, &mut r);
        let (_, arg) = group_max_pool(&x, 4).unwrap();
        let g = group_max_pool_backward(&arg, 4, &proj);
        let f = |v: &[f64]| {
            weighted_sum(&group_max_pool(&Tensor::matrix(12, 3, v.to_vec()).unwrap(), 4).unwrap().0, &proj)
        };
        assert!(grad_check(f, x.data(), g.data(), None, 1e-8).pass);
    }

    #[test]
    fn softmax_cross_entropy_cases() {
        let (loss, grad) = softmax_cross_entropy(&[0.3; 11], 0).unwrap();
        assert!((loss - 11f64.ln()).abs() < 1e-12);
        assert!((loss - 2.397895).abs() < 1e-6);
        assert!(grad.iter().sum::<f64>().abs() < 1e-12);
        let (loss, _) = softmax_cross_entropy(&[10.0, 0.0], 0).unwrap();
        let closed = (-10f64).exp().ln_1p();
        assert!((loss - closed).abs() <= 1e-15 * closed);
        assert!((loss - 4.54e-5).abs() < 1e-7);
        assert!(softmax_cross_entropy(&[f64::NAN, 0.0], 0).is_err());
        assert!(softmax_cross_entropy(&[0.0, 0.0], 2).is_err());
    }

    #[test]
    fn softmax_cross_entropy_gradcheck() {
        let mut r = rng();
        let logits: Vec<f64> = (0..7).map(|_| r.random_range(-3.0..3.0)).collect();
        let (_, g) = softmax_cross_entropy(&logits, 2).unwrap();
        let rep = grad_check(|v| softmax_cross_entropy(v, 2).unwrap().0, &logits, &g, None, 1e-8);
        assert!(rep.pass);
    }

    #[test]
    fn grad_check_detects_corrupted_gradient() {
        let mut r = rng();
        let x = Tensor::uniform(&[4, 3], 1.0, &mut r);
        let w = Tensor::uniform(&[3, 2], 1.0, &mut r);
        let b = Tensor::zeros(&[2]);
        let proj = Tensor::uniform(&[4, 2], 1.0, &mut r);
        let mut g = linear_backward(&x, &w, &proj).input;
        g.data_mut()[5] += 1e-3;
        let f = |v: &[f64]| weighted_sum(&linear(&Tensor::matrix(4, 3, v.to_vec()).unwrap(), &w, &b).unwrap(), &proj);
        let rep = grad_check(f, x.data(), g.data(), None, 1e-6);
        assert!(!rep.pass);
        assert_eq!(rep.worst.as_deref(), Some("[5]"));
    }

    #[test]
    fn gemm_transposes_agree_with_naive_product() {
        let mut r = rng();
        let a = Tensor::uniform(&[3, 4], 1.0, &mut r);
        let b = Tensor::uniform(&[4, 2], 1.0, &mut r);
        let mut naive = vec![0.0; 6];
        for i in 0..3 {
            for j in 0..2 {
                for k in 0..4 {
                    naive[i * 2 + j] += a.data()[i * 4 + k] * b.data()[k * 2 + j];
                }
            }
        }
        // aᵀ stored as 4×3, bᵀ stored as 2×4
        let mut at = vec![0.0; 12];
        let mut bt = vec![0.0; 8];
        for i in 0..3 {
            for k in 0..4 {
                at[k * 3 + i] = a.data()[i * 4 + k];
            }
        }
        for k in 0..4 {
            for j in 0..2 {
                bt[j * 4 + k] = b.data()[k * 2 + j];
            }
        }
        let mut c = vec![0.0; 6];
        gemm(3, 4, 2, &at, true, &bt, true, &mut c, 0.0);
        for (u, v) in c.iter().zip(&naive) {
            assert!((u - v).abs() < 1e-12);
        }
    }
}
