//! Batched layers. A train-mode `forward` caches what `backward` needs;
//! `backward` consumes that cache, so calling it twice (or before any forward)
//! is a state error. `infer` never touches the cache and takes `&self`.

use crate::error::{Error, Result};
use crate::rng::Rng;

use super::ops::{
    self, batchnorm_backward, batchnorm_forward, conv1d_backward_into, conv1d_into,
    dropout_backward, dropout_forward, maxpool_into, BatchNormCache, Mode, RunningStats,
};
use super::tensor::{Scalar, Tensor};

/// Gradients produced by one layer's backward pass: the gradient with respect
/// to the layer input plus one tensor per parameter, in `params()` order.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad<T> {
    pub input: Tensor<T>,
    pub params: Vec<Tensor<T>>,
}

fn no_cache(layer: &str) -> Error {
    Error::State(format!("{layer} backward called without a cached train-mode forward"))
}

fn dims3<T: Scalar>(x: &Tensor<T>, what: &str) -> Result<(usize, usize, usize)> {
    x.expect_rank(3, what)?;
    Ok((x.shape()[0], x.shape()[1], x.shape()[2]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d<T> {
    /// `[C_out × C_in × k]`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> Conv1d<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>) -> Self {
        Self {
            weight,
            bias,
            cache: None,
        }
    }

    fn run(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, c_in, n) = dims3(x, "conv1d input")?;
        let (c_out, wc, k) = (self.weight.shape()[0], self.weight.shape()[1], self.weight.shape()[2]);
        if wc != c_in {
            return Err(Error::Shape(format!(
                "conv1d expects {wc} input channels, got {c_in}"
            )));
        }
        if n < k {
            return Err(Error::Shape(format!("conv1d input length {n} < kernel {k}")));
        }
        let len = n - k + 1;
        let mut out = Tensor::zeros(&[b, c_out, len]);
        for (xs, os) in x
            .data()
            .chunks_exact(c_in * n)
            .zip(out.data_mut().chunks_exact_mut(c_out * len))
        {
            conv1d_into(xs, c_in, n, self.weight.data(), self.bias.data(), k, os);
        }
        Ok(out)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<LayerGrad<T>> {
        let x = self.cache.take().ok_or_else(|| no_cache("conv1d"))?;
        let (_, c_in, n) = dims3(&x, "conv1d input")?;
        let (c_out, k) = (self.weight.shape()[0], self.weight.shape()[2]);
        let len = n - k + 1;
        let mut gx = Tensor::zeros(x.shape());
        let mut gw = Tensor::zeros(self.weight.shape());
        let mut gb = Tensor::zeros(self.bias.shape());
        for ((xs, gs), gxs) in x
            .data()
            .chunks_exact(c_in * n)
            .zip(grad.data().chunks_exact(c_out * len))
            .zip(gx.data_mut().chunks_exact_mut(c_in * n))
        {
            conv1d_backward_into(
                xs,
                c_in,
                n,
                self.weight.data(),
                k,
                gs,
                gxs,
                gw.data_mut(),
                gb.data_mut(),
            );
        }
        Ok(LayerGrad {
            input: gx,
            params: vec![gw, gb],
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm1d<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running: RunningStats<T>,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<BatchNormCache<T>>,
}

impl<T: Scalar> BatchNorm1d<T> {
    pub fn new(channels: usize, momentum: f64, eps: f64) -> Self {
        Self {
            gamma: Tensor::full(&[channels], T::one()),
            beta: Tensor::zeros(&[channels]),
            running: RunningStats::new(channels),
            momentum,
            eps,
            cache: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaxPool1d {
    pub pool: usize,
    cache: Option<(Vec<usize>, Vec<usize>)>,
}

impl MaxPool1d {
    pub fn new(pool: usize) -> Self {
        Self { pool, cache: None }
    }

    fn run<T: Scalar>(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
        let (b, c, n) = dims3(x, "maxpool input")?;
        if self.pool == 0 || n < self.pool {
            return Err(Error::Shape(format!(
                "maxpool of size {} over length {n}",
                self.pool
            )));
        }
        let len = n / self.pool;
        let mut out = Tensor::zeros(&[b, c, len]);
        let mut argmax = vec![0; b * c * len];
        maxpool_into(x.data(), n, self.pool, out.data_mut(), &mut argmax);
        Ok((out, argmax))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dropout<T> {
    pub rate: f64,
    cache: Option<Option<Vec<T>>>,
}

impl<T: Scalar> Dropout<T> {
    pub fn new(rate: f64) -> Self {
        Self { rate, cache: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    /// `[F × U]`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> Dense<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>) -> Self {
        Self {
            weight,
            bias,
            cache: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T> {
    Conv1d(Conv1d<T>),
    BatchNorm(BatchNorm1d<T>),
    Relu(Option<Tensor<T>>),
    MaxPool(MaxPool1d),
    Dropout(Dropout<T>),
    /// `[B × C × N] -> [B × C·N]`; caches the input shape.
    Flatten(Option<Vec<usize>>),
    Dense(Dense<T>),
}

impl<T: Scalar> Layer<T> {
    pub fn name(&self) -> &'static str {
        match self {
            Layer::Conv1d(_) => "conv1d",
            Layer::BatchNorm(_) => "batchnorm",
            Layer::Relu(_) => "relu",
            Layer::MaxPool(_) => "maxpool",
            Layer::Dropout(_) => "dropout",
            Layer::Flatten(_) => "flatten",
            Layer::Dense(_) => "dense",
        }
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        match self {
            Layer::Conv1d(l) => vec![&l.weight, &l.bias],
            Layer::BatchNorm(l) => vec![&l.gamma, &l.beta],
            Layer::Dense(l) => vec![&l.weight, &l.bias],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            Layer::Conv1d(l) => vec![&mut l.weight, &mut l.bias],
            Layer::BatchNorm(l) => vec![&mut l.gamma, &mut l.beta],
            Layer::Dense(l) => vec![&mut l.weight, &mut l.bias],
            _ => Vec::new(),
        }
    }

    /// Inference pass; never reads or writes caches.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Layer::Conv1d(l) => l.run(x),
            Layer::BatchNorm(l) => {
                let mut stats = l.running.clone();
                let (out, _) = batchnorm_forward(
                    x,
                    &l.gamma,
                    &l.beta,
                    Mode::Infer,
                    &mut stats,
                    l.momentum,
                    l.eps,
                )?;
                Ok(out)
            }
            Layer::Relu(_) => Ok(ops::relu_forward(x)),
            Layer::MaxPool(l) => Ok(l.run(x)?.0),
            Layer::Dropout(l) => {
                if !(0.0..1.0).contains(&l.rate) {
                    return Err(Error::Config(format!("dropout rate {} outside [0, 1)", l.rate)));
                }
                Ok(x.clone())
            }
            Layer::Flatten(_) => flatten(x),
            Layer::Dense(l) => ops::dense_forward(x, &l.weight, &l.bias),
        }
    }

    /// Train-mode pass: batch statistics, active dropout, caches for backward.
    /// Updates batch-norm running statistics.
    pub fn forward_train(&mut self, x: &Tensor<T>, rng: &mut Rng) -> Result<Tensor<T>> {
        match self {
            Layer::Conv1d(l) => {
                let out = l.run(x)?;
                l.cache = Some(x.clone());
                Ok(out)
            }
            Layer::BatchNorm(l) => {
                if x.rank() == 3 && x.shape()[0] == 0 {
                    return Err(Error::Shape("batchnorm over an empty batch".into()));
                }
                let (out, cache) = batchnorm_forward(
                    x,
                    &l.gamma,
                    &l.beta,
                    Mode::Train,
                    &mut l.running,
                    l.momentum,
                    l.eps,
                )?;
                l.cache = cache;
                Ok(out)
            }
            Layer::Relu(cache) => {
                *cache = Some(x.clone());
                Ok(ops::relu_forward(x))
            }
            Layer::MaxPool(l) => {
                let (out, argmax) = l.run(x)?;
                l.cache = Some((x.shape().to_vec(), argmax));
                Ok(out)
            }
            Layer::Dropout(l) => {
                let (out, mask) = dropout_forward(x, l.rate, Mode::Train, rng)?;
                l.cache = Some(mask);
                Ok(out)
            }
            Layer::Flatten(cache) => {
                *cache = Some(x.shape().to_vec());
                flatten(x)
            }
            Layer::Dense(l) => {
                let out = ops::dense_forward(x, &l.weight, &l.bias)?;
                l.cache = Some(x.clone());
                Ok(out)
            }
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode, rng: &mut Rng) -> Result<Tensor<T>> {
        match mode {
            Mode::Train => self.forward_train(x, rng),
            Mode::Infer => self.infer(x),
        }
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<LayerGrad<T>> {
        let name = self.name();
        match self {
            Layer::Conv1d(l) => l.backward(grad),
            Layer::BatchNorm(l) => {
                let cache = l.cache.take().ok_or_else(|| no_cache(name))?;
                let g = batchnorm_backward(&cache, &l.gamma, grad)?;
                Ok(LayerGrad {
                    input: g.input,
                    params: vec![g.gamma, g.beta],
                })
            }
            Layer::Relu(cache) => {
                let x = cache.take().ok_or_else(|| no_cache(name))?;
                Ok(LayerGrad {
                    input: ops::relu_backward(&x, grad)?,
                    params: Vec::new(),
                })
            }
            Layer::MaxPool(l) => {
                let (shape, argmax) = l.cache.take().ok_or_else(|| no_cache(name))?;
                Ok(LayerGrad {
                    input: ops::maxpool1d_backward(&shape, &argmax, grad)?,
                    params: Vec::new(),
                })
            }
            Layer::Dropout(l) => {
                let mask = l.cache.take().ok_or_else(|| no_cache(name))?;
                Ok(LayerGrad {
                    input: dropout_backward(mask.as_deref(), grad),
                    params: Vec::new(),
                })
            }
            Layer::Flatten(cache) => {
                let shape = cache.take().ok_or_else(|| no_cache(name))?;
                Ok(LayerGrad {
                    input: grad.clone().reshape(&shape)?,
                    params: Vec::new(),
                })
            }
            Layer::Dense(l) => {
                let x = l.cache.take().ok_or_else(|| no_cache(name))?;
                let g = ops::dense_backward(&x, &l.weight, &l.bias, grad)?;
                Ok(LayerGrad {
                    input: g.input,
                    params: vec![g.weights, g.bias],
                })
            }
        }
    }

    /// Appends the piecewise-linear branch taken in the last train-mode pass
    /// (ReLU signs, pool argmaxes). Finite-difference checks use it to skip
    /// coordinates whose perturbation crosses a kink.
    pub fn branch_signature(&self, out: &mut Vec<usize>) {
        match self {
            Layer::Relu(Some(x)) => out.extend(x.data().iter().map(|&v| usize::from(v > T::zero()))),
            Layer::MaxPool(MaxPool1d {
                cache: Some((_, argmax)),
                ..
            }) => out.extend_from_slice(argmax),
            _ => {}
        }
    }

    pub fn clear_cache(&mut self) {
        match self {
            Layer::Conv1d(l) => l.cache = None,
            Layer::BatchNorm(l) => l.cache = None,
            Layer::Relu(c) => *c = None,
            Layer::MaxPool(l) => l.cache = None,
            Layer::Dropout(l) => l.cache = None,
            Layer::Flatten(c) => *c = None,
            Layer::Dense(l) => l.cache = None,
        }
    }

    pub fn cast<U: Scalar>(&self) -> Layer<U> {
        match self {
            Layer::Conv1d(l) => Layer::Conv1d(Conv1d::new(l.weight.cast(), l.bias.cast())),
            Layer::BatchNorm(l) => Layer::BatchNorm(BatchNorm1d {
                gamma: l.gamma.cast(),
                beta: l.beta.cast(),
                running: RunningStats {
                    mean: l.running.mean.cast(),
                    var: l.running.var.cast(),
                },
                momentum: l.momentum,
                eps: l.eps,
                cache: None,
            }),
            Layer::Relu(_) => Layer::Relu(None),
            Layer::MaxPool(l) => Layer::MaxPool(MaxPool1d::new(l.pool)),
            Layer::Dropout(l) => Layer::Dropout(Dropout::new(l.rate)),
            Layer::Flatten(_) => Layer::Flatten(None),
            Layer::Dense(l) => Layer::Dense(Dense::new(l.weight.cast(), l.bias.cast())),
        }
    }
}

fn flatten<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let b = *x
        .shape()
        .first()
        .ok_or_else(|| Error::Shape("flatten of a scalar".into()))?;
    x.clone().reshape(&[b, x.len() / b])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn backward_before_forward_is_state_error() {
        let mut layers: Vec<Layer<f32>> = vec![
            Layer::Conv1d(Conv1d::new(Tensor::zeros(&[1, 1, 3]), Tensor::zeros(&[1]))),
            Layer::BatchNorm(BatchNorm1d::new(1, 0.9, 1e-5)),
            Layer::Relu(None),
            Layer::MaxPool(MaxPool1d::new(2)),
            Layer::Dropout(Dropout::new(0.5)),
            Layer::Flatten(None),
            Layer::Dense(Dense::new(Tensor::zeros(&[2, 1]), Tensor::zeros(&[1]))),
        ];
        for l in &mut layers {
            assert!(matches!(l.backward(&Tensor::zeros(&[1])), Err(Error::State(_))), "{}", l.name());
        }
    }

    #[test]
    fn second_backward_fails() {
        let mut l: Layer<f32> = Layer::Relu(None);
        let x = Tensor::full(&[1, 1, 4], 1.0);
        l.forward_train(&x, &mut seeded(0)).unwrap();
        l.backward(&x).unwrap();
        assert!(l.backward(&x).is_err());
    }

    #[test]
    fn infer_is_identity_for_dropout_and_leaves_stats() {
        let x = Tensor::new(vec![1, 1, 4], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let l: Layer<f32> = Layer::Dropout(Dropout::new(0.5));
        assert_eq!(l.infer(&x).unwrap(), x);
        let bn: Layer<f32> = Layer::BatchNorm(BatchNorm1d::new(1, 0.9, 1e-5));
        let before = bn.clone();
        bn.infer(&x).unwrap();
        assert_eq!(bn, before);
    }

    #[test]
    fn batched_conv_matches_per_sample_kernel() {
        let w = Tensor::new(vec![2, 1, 3], vec![0.5f32, -1.0, 0.25, 1.0, 0.0, 2.0]).unwrap();
        let b = Tensor::new(vec![2], vec![0.1f32, -0.2]).unwrap();
        let l = Layer::Conv1d(Conv1d::new(w.clone(), b.clone()));
        let x = Tensor::new(vec![2, 1, 5], (0..10).map(|v| v as f32 * 0.3 - 1.0).collect()).unwrap();
        let out = l.infer(&x).unwrap();
        for s in 0..2 {
            let xs = Tensor::new(vec![1, 5], x.data()[s * 5..(s + 1) * 5].to_vec()).unwrap();
            let single = ops::conv1d_forward(&xs, &w, &b).unwrap();
            assert_eq!(&out.data()[s * 6..(s + 1) * 6], single.data());
        }
    }
}
