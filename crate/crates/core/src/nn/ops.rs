//! Forward and backward kernels for every layer type the network uses.
//!
//! The tensor-level functions validate shapes; the `*_into` slice kernels
//! below them assume the caller already did.

use rand::Rng;

use crate::error::{Error, Result};

use super::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Dot product with eight independent accumulators so the loop vectorizes
/// without reassociation flags.
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    acc.iter().copied().fold(tail, |s, v| s + v)
}

pub(crate) fn sum<T: Scalar>(a: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let mut c = a.chunks_exact(8);
    for x in &mut c {
        for l in 0..8 {
            acc[l] += x[l];
        }
    }
    let tail = c.remainder().iter().fold(T::zero(), |s, &v| s + v);
    acc.iter().copied().fold(tail, |s, v| s + v)
}

/// `Σ (a_i - mu)²`, vectorized like [`dot`].
pub(crate) fn sum_sq_dev<T: Scalar>(a: &[T], mu: T) -> T {
    let mut acc = [T::zero(); 8];
    let mut c = a.chunks_exact(8);
    for x in &mut c {
        for l in 0..8 {
            let d = x[l] - mu;
            acc[l] += d * d;
        }
    }
    let tail = c.remainder().iter().fold(T::zero(), |s, &v| s + (v - mu) * (v - mu));
    acc.iter().copied().fold(tail, |s, v| s + v)
}

#[inline]
pub(crate) fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

// ---------------------------------------------------------------- conv1d

/// Valid cross-correlation of one sample: `x` is `[c_in × n]`, `w` is
/// `[c_out × c_in × k]`, `out` is `[c_out × (n - k + 1)]`.
pub(crate) fn conv1d_into<T: Scalar>(
    x: &[T],
    c_in: usize,
    n: usize,
    w: &[T],
    b: &[T],
    k: usize,
    out: &mut [T],
) {
    let len = n - k + 1;
    for (o, row) in out.chunks_exact_mut(len).enumerate() {
        row.fill(b[o]);
        for c in 0..c_in {
            let xc = &x[c * n..(c + 1) * n];
            for j in 0..k {
                axpy(w[(o * c_in + c) * k + j], &xc[j..j + len], row);
            }
        }
    }
}

/// Accumulates weight/bias gradients and writes the input gradient for one sample.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv1d_backward_into<T: Scalar>(
    x: &[T],
    c_in: usize,
    n: usize,
    w: &[T],
    k: usize,
    g: &[T],
    gx: &mut [T],
    gw: &mut [T],
    gb: &mut [T],
) {
    let len = n - k + 1;
    gx.fill(T::zero());
    for (o, go) in g.chunks_exact(len).enumerate() {
        gb[o] += sum(go);
        for c in 0..c_in {
            let xc = &x[c * n..(c + 1) * n];
            let gxc = &mut gx[c * n..(c + 1) * n];
            for j in 0..k {
                let wi = (o * c_in + c) * k + j;
                gw[wi] += dot(go, &xc[j..j + len]);
                axpy(w[wi], go, &mut gxc[j..j + len]);
            }
        }
    }
}

fn conv_dims<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(usize, usize, usize, usize)> {
    input.expect_rank(2, "conv1d input")?;
    weights.expect_rank(3, "conv1d weights")?;
    let (c_in, n) = (input.shape()[0], input.shape()[1]);
    let (c_out, wc, k) = (weights.shape()[0], weights.shape()[1], weights.shape()[2]);
    if wc != c_in {
        return Err(Error::Shape(format!(
            "conv1d weights expect {wc} input channels, input has {c_in}"
        )));
    }
    if bias.shape() != [c_out] {
        return Err(Error::Shape(format!(
            "conv1d bias shape {:?}, expected [{c_out}]",
            bias.shape()
        )));
    }
    if n < k {
        return Err(Error::Shape(format!("conv1d input length {n} < kernel {k}")));
    }
    Ok((c_in, n, c_out, k))
}

/// `out[o][t] = bias[o] + sum_{c,j} input[c][t+j] * weights[o][c][j]`.
pub fn conv1d_forward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (c_in, n, c_out, k) = conv_dims(input, weights, bias)?;
    let mut out = Tensor::zeros(&[c_out, n - k + 1]);
    conv1d_into(
        input.data(),
        c_in,
        n,
        weights.data(),
        bias.data(),
        k,
        out.data_mut(),
    );
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv1dGrad<T> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv1d_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<Conv1dGrad<T>> {
    let (c_in, n, c_out, k) = conv_dims(input, weights, bias)?;
    if grad_out.shape() != [c_out, n - k + 1] {
        return Err(Error::Shape(format!(
            "conv1d upstream gradient {:?}, expected [{c_out}, {}]",
            grad_out.shape(),
            n - k + 1
        )));
    }
    let mut g = Conv1dGrad {
        input: Tensor::zeros(input.shape()),
        weights: Tensor::zeros(weights.shape()),
        bias: Tensor::zeros(bias.shape()),
    };
    conv1d_backward_into(
        input.data(),
        c_in,
        n,
        weights.data(),
        k,
        grad_out.data(),
        g.input.data_mut(),
        g.weights.data_mut(),
        g.bias.data_mut(),
    );
    Ok(g)
}

// ---------------------------------------------------------------- max pool

/// Non-overlapping max pool over rows of length `n`; the trailing remainder
/// is dropped. `argmax` receives flat indices into `x`, first occurrence on ties.
pub(crate) fn maxpool_into<T: Scalar>(
    x: &[T],
    n: usize,
    pool: usize,
    out: &mut [T],
    argmax: &mut [usize],
) {
    let len = n / pool;
    for (c, ((row, out_row), arg_row)) in x
        .chunks_exact(n)
        .zip(out.chunks_exact_mut(len))
        .zip(argmax.chunks_exact_mut(len))
        .enumerate()
    {
        for (t, ((win, o), a)) in row
            .chunks_exact(pool)
            .zip(out_row.iter_mut())
            .zip(arg_row.iter_mut())
            .enumerate()
        {
            let mut best = 0;
            for (i, &v) in win.iter().enumerate().skip(1) {
                if v > win[best] {
                    best = i;
                }
            }
            *o = win[best];
            *a = c * n + t * pool + best;
        }
    }
}

pub fn maxpool1d_forward<T: Scalar>(input: &Tensor<T>, pool: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    input.expect_rank(2, "maxpool input")?;
    let (c, n) = (input.shape()[0], input.shape()[1]);
    if pool == 0 || n < pool {
        return Err(Error::Shape(format!("maxpool of size {pool} over length {n}")));
    }
    let mut out = Tensor::zeros(&[c, n / pool]);
    let mut argmax = vec![0; c * (n / pool)];
    maxpool_into(input.data(), n, pool, out.data_mut(), &mut argmax);
    Ok((out, argmax))
}

/// Routes each upstream gradient to its recorded argmax; everything else is 0.
pub fn maxpool1d_backward<T: Scalar>(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    if argmax.len() != grad_out.len() {
        return Err(Error::Shape("argmax and gradient lengths differ".into()));
    }
    let mut g = Tensor::zeros(input_shape);
    let gd = g.data_mut();
    for (&i, &v) in argmax.iter().zip(grad_out.data()) {
        gd[i] += v;
    }
    Ok(g)
}

// ---------------------------------------------------------------- relu

pub fn relu_forward<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let mut out = input.clone();
    out.data_mut().iter_mut().for_each(|x| *x = x.max(T::zero()));
    out
}

/// Derivative taken as 0 at exactly 0.
pub fn relu_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if input.shape() != grad_out.shape() {
        return Err(Error::Shape("relu gradient shape mismatch".into()));
    }
    let mut g = grad_out.clone();
    for (gi, &x) in g.data_mut().iter_mut().zip(input.data()) {
        if x <= T::zero() {
            *gi = T::zero();
        }
    }
    Ok(g)
}

// ---------------------------------------------------------------- dense

fn dense_dims<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(usize, usize, usize)> {
    input.expect_rank(2, "dense input")?;
    weights.expect_rank(2, "dense weights")?;
    let (b, f) = (input.shape()[0], input.shape()[1]);
    let (wf, u) = (weights.shape()[0], weights.shape()[1]);
    if wf != f {
        return Err(Error::Shape(format!(
            "dense weights expect {wf} features, input has {f}"
        )));
    }
    if bias.shape() != [u] {
        return Err(Error::Shape(format!(
            "dense bias shape {:?}, expected [{u}]",
            bias.shape()
        )));
    }
    Ok((b, f, u))
}

/// `out = input · weights + bias`, with `weights` laid out `[F × U]`.
pub fn dense_forward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (b, f, u) = dense_dims(input, weights, bias)?;
    let mut out = Tensor::zeros(&[b, u]);
    let w = weights.data();
    for (x, row) in input.data().chunks_exact(f).zip(out.data_mut().chunks_exact_mut(u)) {
        row.copy_from_slice(bias.data());
        for (fi, &xv) in x.iter().enumerate() {
            axpy(xv, &w[fi * u..(fi + 1) * u], row);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrad<T> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn dense_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<DenseGrad<T>> {
    let (b, f, u) = dense_dims(input, weights, bias)?;
    if grad_out.shape() != [b, u] {
        return Err(Error::Shape(format!(
            "dense upstream gradient {:?}, expected [{b}, {u}]",
            grad_out.shape()
        )));
    }
    let w = weights.data();
    let mut gi = Tensor::zeros(&[b, f]);
    let mut gw = Tensor::zeros(&[f, u]);
    let mut gb = Tensor::zeros(&[u]);
    for ((x, g), gx) in input
        .data()
        .chunks_exact(f)
        .zip(grad_out.data().chunks_exact(u))
        .zip(gi.data_mut().chunks_exact_mut(f))
    {
        for (acc, &v) in gb.data_mut().iter_mut().zip(g) {
            *acc += v;
        }
        let gwd = gw.data_mut();
        for fi in 0..f {
            let wrow = &w[fi * u..(fi + 1) * u];
            gx[fi] = dot(wrow, g);
            axpy(x[fi], g, &mut gwd[fi * u..(fi + 1) * u]);
        }
    }
    Ok(DenseGrad {
        input: gi,
        weights: gw,
        bias: gb,
    })
}

// ---------------------------------------------------------------- dropout

/// Inverted dropout. In train mode each element is zeroed with probability
/// `rate` and survivors are scaled by `1/(1-rate)`; the returned mask holds
/// those per-element factors. Infer mode is the identity.
pub fn dropout_forward<T: Scalar, R: Rng + ?Sized>(
    input: &Tensor<T>,
    rate: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<(Tensor<T>, Option<Vec<T>>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
    }
    if mode == Mode::Infer || rate == 0.0 {
        return Ok((input.clone(), None));
    }
    let keep = T::of(1.0 / (1.0 - rate));
    // u32 draws: drop iff u < rate·2³², so P(drop) = rate up to 2⁻³².
    let threshold = (rate * 4_294_967_296.0) as u64;
    let mask: Vec<T> = (0..input.len())
        .map(|_| {
            if u64::from(rng.next_u32()) < threshold {
                T::zero()
            } else {
                keep
            }
        })
        .collect();
    let mut out = input.clone();
    for (o, &m) in out.data_mut().iter_mut().zip(&mask) {
        *o *= m;
    }
    Ok((out, Some(mask)))
}

pub fn dropout_backward<T: Scalar>(mask: Option<&[T]>, grad_out: &Tensor<T>) -> Tensor<T> {
    let mut g = grad_out.clone();
    if let Some(mask) = mask {
        for (gi, &m) in g.data_mut().iter_mut().zip(mask) {
            *gi *= m;
        }
    }
    g
}

// ---------------------------------------------------------------- batch norm

#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::full(&[channels], T::one()),
        }
    }
}

/// Intermediates saved by a train-mode batch-norm pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormCache<T> {
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

fn bn_dims<T: Scalar>(input: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<(usize, usize, usize)> {
    input.expect_rank(3, "batchnorm input")?;
    let (b, c, n) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::Shape(format!(
            "batchnorm affine parameters must be [{c}]"
        )));
    }
    Ok((b, c, n))
}

/// Per-channel batch normalization over batch and time for a `[B × C × N]`
/// input. Train mode normalizes with batch statistics (biased variance) and
/// folds them into `stats` as `run <- momentum * run + (1 - momentum) * batch`;
/// infer mode uses `stats` as-is.
pub fn batchnorm_forward<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mode: Mode,
    stats: &mut RunningStats<T>,
    momentum: f64,
    eps: f64,
) -> Result<(Tensor<T>, Option<BatchNormCache<T>>)> {
    let (b, c, n) = bn_dims(input, gamma, beta)?;
    let x = input.data();
    let (g, bt) = (gamma.data(), beta.data());
    let eps_t = T::of(eps);

    if mode == Mode::Infer {
        let mut out = input.clone();
        for (row_idx, row) in out.data_mut().chunks_exact_mut(n).enumerate() {
            let ch = row_idx % c;
            let inv = (stats.var.data()[ch] + eps_t).sqrt().recip();
            let scale = g[ch] * inv;
            let shift = bt[ch] - stats.mean.data()[ch] * scale;
            row.iter_mut().for_each(|v| *v = *v * scale + shift);
        }
        return Ok((out, None));
    }

    let m = (b * n) as f64;
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let rows = (0..b).map(|bi| &x[(bi * c + ch) * n..(bi * c + ch + 1) * n]);
        let s: f64 = rows.clone().map(|r| sum(r).to_f64_lossy()).sum();
        let mu = s / m;
        let mu_t = T::of(mu);
        let ss: f64 = rows.map(|r| sum_sq_dev(r, mu_t).to_f64_lossy()).sum();
        mean[ch] = T::of(mu);
        var[ch] = T::of(ss / m);
    }
    let inv_std: Vec<T> = var.iter().map(|&v| (v + eps_t).sqrt().recip()).collect();

    let mut normalized = input.clone();
    let mut out = input.clone();
    for (row_idx, (xs, os)) in normalized
        .data_mut()
        .chunks_exact_mut(n)
        .zip(out.data_mut().chunks_exact_mut(n))
        .enumerate()
    {
        let ch = row_idx % c;
        for (xv, ov) in xs.iter_mut().zip(os.iter_mut()) {
            *xv = (*xv - mean[ch]) * inv_std[ch];
            *ov = g[ch] * *xv + bt[ch];
        }
    }

    let mom = T::of(momentum);
    let one_minus = T::of(1.0 - momentum);
    for ch in 0..c {
        let rm = &mut stats.mean.data_mut()[ch];
        *rm = mom * *rm + one_minus * mean[ch];
        let rv = &mut stats.var.data_mut()[ch];
        *rv = mom * *rv + one_minus * var[ch];
    }

    Ok((
        out,
        Some(BatchNormCache {
            normalized,
            inv_std,
            batch_mean: mean,
            batch_var: var,
        }),
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormGrad<T> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

pub fn batchnorm_backward<T: Scalar>(
    cache: &BatchNormCache<T>,
    gamma: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<BatchNormGrad<T>> {
    let xh = &cache.normalized;
    if xh.shape() != grad_out.shape() {
        return Err(Error::Shape("batchnorm gradient shape mismatch".into()));
    }
    let (b, c, n) = (xh.shape()[0], xh.shape()[1], xh.shape()[2]);
    let m = T::of((b * n) as f64);
    let dy = grad_out.data();
    let xd = xh.data();
    let mut sum_dy = vec![T::zero(); c];
    let mut sum_dy_xh = vec![T::zero(); c];
    for row in 0..b * c {
        let ch = row % c;
        let r = row * n..(row + 1) * n;
        sum_dy[ch] += sum(&dy[r.clone()]);
        sum_dy_xh[ch] += dot(&dy[r.clone()], &xd[r]);
    }
    let mut gi = Tensor::zeros(xh.shape());
    for (row, gx) in gi.data_mut().chunks_exact_mut(n).enumerate() {
        let ch = row % c;
        let k = gamma.data()[ch] * cache.inv_std[ch] / m;
        let r = row * n..(row + 1) * n;
        for ((g, &d), &xv) in gx.iter_mut().zip(&dy[r.clone()]).zip(&xd[r]) {
            *g = k * (m * d - sum_dy[ch] - xv * sum_dy_xh[ch]);
        }
    }
    Ok(BatchNormGrad {
        input: gi,
        gamma: Tensor::new(vec![c], sum_dy_xh)?,
        beta: Tensor::new(vec![c], sum_dy)?,
    })
}

// ---------------------------------------------------------------- losses

/// `(1/B) Σ (pred - target)²` and its gradient `(2/B)(pred - target)`.
pub fn mse_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    if pred.len() != target.len() {
        return Err(Error::Shape(format!(
            "mse over {} predictions and {} targets",
            pred.len(),
            target.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Shape("mse over an empty batch".into()));
    }
    let b = pred.len() as f64;
    let mut grad = pred.clone();
    let mut loss = 0.0f64;
    for (g, &t) in grad.data_mut().iter_mut().zip(target.data()) {
        let d = *g - t;
        loss += d.to_f64_lossy().powi(2);
        *g = T::of(2.0 / b) * d;
    }
    Ok((loss / b, grad))
}

/// Row-wise softmax of a `[B × K]` tensor with max subtraction.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    logits.expect_rank(2, "softmax input")?;
    let k = logits.shape()[1];
    let mut out = logits.clone();
    for row in out.data_mut().chunks_exact_mut(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v = *v / total);
    }
    Ok(out)
}

/// Mean cross-entropy of softmax(logits) against class indices, with
/// gradient `(softmax - onehot) / B`.
pub fn softmax_crossentropy<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[usize],
) -> Result<(f64, Tensor<T>)> {
    logits.expect_rank(2, "cross-entropy logits")?;
    let (b, k) = (logits.shape()[0], logits.shape()[1]);
    if k < 2 {
        return Err(Error::Shape("cross-entropy needs at least two classes".into()));
    }
    if targets.len() != b {
        return Err(Error::Shape(format!(
            "{} targets for a batch of {b}",
            targets.len()
        )));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
        return Err(Error::Index(format!("class {bad} outside [0, {k})")));
    }
    let mut loss = 0.0f64;
    let mut grad = softmax(logits)?;
    for ((row, logit_row), &t) in grad
        .data_mut()
        .chunks_exact_mut(k)
        .zip(logits.data().chunks_exact(k))
        .zip(targets)
    {
        let max = logit_row
            .iter()
            .map(|v| v.to_f64_lossy())
            .fold(f64::NEG_INFINITY, f64::max);
        let lse = max
            + logit_row
                .iter()
                .map(|v| (v.to_f64_lossy() - max).exp())
                .sum::<f64>()
                .ln();
        loss += lse - logit_row[t].to_f64_lossy();
        row[t] -= T::one();
        let inv_b = T::of(1.0 / b as f64);
        row.iter_mut().for_each(|v| *v *= inv_b);
    }
    Ok((loss / b as f64, grad))
}
