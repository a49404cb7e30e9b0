//! The raw-waveform 1D-CNN.
//!
//! Layer stack, for `conv_blocks` repetitions:
//!
//! ```text
//! conv1d(k) -> batchnorm -> relu -> maxpool(P) -> dropout(conv_dropout)
//! ```
//!
//! then `flatten -> dense(dense_units) -> relu -> dropout(dense_dropout) ->
//! dense(1)` for regression or `dense(K)` + softmax for classification.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::nn::{
    softmax, BatchNorm1d, Conv1d, Dense, Dropout, Layer, MaxPool1d, Mode, Scalar, Tensor,
};
use crate::rng::{seeded, Rng};

pub const MODEL_FILE_MAGIC: &[u8; 4] = b"RVM1";
pub const MODEL_FILE_VERSION: u16 = 1;

pub const BATCHNORM_MOMENTUM: f64 = 0.9;
pub const BATCHNORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Regression,
    Classification { classes: usize },
}

impl Head {
    pub fn outputs(self) -> usize {
        match self {
            Head::Regression => 1,
            Head::Classification { classes } => classes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelSpec {
    pub sample_rate: u32,
    pub window_size_s: f64,
    pub conv_blocks: usize,
    pub filters_per_conv: usize,
    pub kernel_size: usize,
    pub pool_size: usize,
    pub dense_units: usize,
    pub conv_dropout: f64,
    pub dense_dropout: f64,
    pub head: Head,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            sample_rate: 16000,
            window_size_s: 1.5,
            conv_blocks: 2,
            filters_per_conv: 4,
            kernel_size: 3,
            pool_size: 4,
            dense_units: 32,
            conv_dropout: 0.1,
            dense_dropout: 0.5,
            head: Head::Regression,
        }
    }
}

impl ModelSpec {
    pub fn input_len(&self) -> Result<usize> {
        let exact = self.window_size_s * f64::from(self.sample_rate);
        let n = exact.round();
        if !(self.window_size_s > 0.0) || (exact - n).abs() > 1e-6 * exact.max(1.0) || n < 1.0 {
            return Err(Error::Spec(format!(
                "window of {} s is not a whole number of samples at {} Hz",
                self.window_size_s, self.sample_rate
            )));
        }
        Ok(n as usize)
    }

    /// Time length after each conv block, or `None` once the stack runs out of samples.
    fn stage_lengths(&self, n: usize) -> Option<Vec<usize>> {
        let mut len = n;
        let mut out = Vec::with_capacity(self.conv_blocks);
        for _ in 0..self.conv_blocks {
            if len < self.kernel_size {
                return None;
            }
            len = (len - self.kernel_size + 1) / self.pool_size;
            if len == 0 {
                return None;
            }
            out.push(len);
        }
        Some(out)
    }

    /// Smallest window (in samples) for which every stage keeps at least one sample.
    pub fn min_input_len(&self) -> usize {
        (0..self.conv_blocks).fold(1, |n, _| n * self.pool_size + self.kernel_size - 1)
    }

    pub fn flatten_len(&self) -> Result<usize> {
        let n = self.input_len()?;
        let stages = self.stage_lengths(n).ok_or_else(|| {
            let min = self.min_input_len();
            Error::Spec(format!(
                "window of {n} samples is too short for {} conv blocks; \
                 the minimum is {min} samples ({:.4} s)",
                self.conv_blocks,
                min as f64 / f64::from(self.sample_rate)
            ))
        })?;
        let last = stages.last().copied().unwrap_or(n);
        let channels = if self.conv_blocks == 0 { 1 } else { self.filters_per_conv };
        Ok(channels * last)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("sample_rate", self.sample_rate as usize),
            ("conv_blocks", self.conv_blocks),
            ("filters_per_conv", self.filters_per_conv),
            ("kernel_size", self.kernel_size),
            ("pool_size", self.pool_size),
            ("dense_units", self.dense_units),
            ("head outputs", self.head.outputs()),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Spec(format!("{name} must be positive")));
        }
        for (name, rate) in [("conv_dropout", self.conv_dropout), ("dense_dropout", self.dense_dropout)] {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::Spec(format!("{name} {rate} outside [0, 1)")));
            }
        }
        if let Head::Classification { classes } = self.head {
            if classes < 2 {
                return Err(Error::Spec("classification needs at least 2 classes".into()));
            }
        }
        self.flatten_len()?;
        Ok(())
    }
}

fn he_uniform<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::of(rng.random_range(-bound..bound)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches element count")
}

#[derive(Debug, Clone, PartialEq)]
pub struct SleepNet<T = f32> {
    spec: ModelSpec,
    layers: Vec<Layer<T>>,
}

/// Builds the network with seeded He-uniform weights, zero biases, and unit
/// batch-norm scale.
pub fn build_model(spec: ModelSpec, seed: u64) -> Result<SleepNet<f32>> {
    SleepNet::build(spec, seed)
}

impl<T: Scalar> SleepNet<T> {
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = seeded(seed);
        let mut layers = Vec::new();
        let mut channels = 1;
        let k = spec.kernel_size;
        for _ in 0..spec.conv_blocks {
            let f = spec.filters_per_conv;
            layers.push(Layer::Conv1d(Conv1d::new(
                he_uniform(&[f, channels, k], channels * k, &mut rng),
                Tensor::zeros(&[f]),
            )));
            layers.push(Layer::BatchNorm(BatchNorm1d::new(
                f,
                BATCHNORM_MOMENTUM,
                BATCHNORM_EPS,
            )));
            layers.push(Layer::Relu(None));
            layers.push(Layer::MaxPool(MaxPool1d::new(spec.pool_size)));
            layers.push(Layer::Dropout(Dropout::new(spec.conv_dropout)));
            channels = f;
        }
        let flat = spec.flatten_len()?;
        layers.push(Layer::Flatten(None));
        layers.push(Layer::Dense(Dense::new(
            he_uniform(&[flat, spec.dense_units], flat, &mut rng),
            Tensor::zeros(&[spec.dense_units]),
        )));
        layers.push(Layer::Relu(None));
        layers.push(Layer::Dropout(Dropout::new(spec.dense_dropout)));
        let outputs = spec.head.outputs();
        layers.push(Layer::Dense(Dense::new(
            he_uniform(&[spec.dense_units, outputs], spec.dense_units, &mut rng),
            Tensor::zeros(&[outputs]),
        )));
        Ok(Self { spec, layers })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// The final dense layer's parameters (weights, bias).
    pub fn head_params_mut(&mut self) -> (&mut Tensor<T>, &mut Tensor<T>) {
        match self.layers.last_mut() {
            Some(Layer::Dense(d)) => (&mut d.weight, &mut d.bias),
            _ => unreachable!("network always ends in a dense layer"),
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let n = self.spec.input_len()?;
        if x.rank() != 3 || x.shape()[1] != 1 || x.shape()[2] != n {
            return Err(Error::Shape(format!(
                "model expects [B x 1 x {n}] windows, got {:?}",
                x.shape()
            )));
        }
        Ok(())
    }

    /// Raw network output (`[B × 1]` predictions or `[B × K]` logits).
    pub fn logits(&mut self, x: &Tensor<T>, mode: Mode, rng: &mut Rng) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &mut self.layers {
            h = layer.forward(&h, mode, rng)?;
        }
        Ok(h)
    }

    /// Inference-mode logits; does not mutate the model.
    pub fn infer_logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.infer(&h)?;
        }
        Ok(h)
    }

    fn apply_head(&self, out: Tensor<T>) -> Result<Tensor<T>> {
        match self.spec.head {
            Head::Regression => Ok(out),
            Head::Classification { .. } => softmax(&out),
        }
    }

    /// Regression: unbounded `[B × 1]` predictions. Classification: `[B × K]`
    /// class probabilities. Train mode updates batch-norm running statistics
    /// and caches activations for [`SleepNet::backward`].
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode, rng: &mut Rng) -> Result<Tensor<T>> {
        let out = self.logits(x, mode, rng)?;
        self.apply_head(out)
    }

    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let out = self.infer_logits(x)?;
        self.apply_head(out)
    }

    /// Back-propagates a gradient with respect to the logits. Returns one
    /// gradient per parameter, in [`SleepNet::params`] order.
    pub fn backward(&mut self, grad_logits: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut per_layer = Vec::with_capacity(self.layers.len());
        let mut g = grad_logits.clone();
        for layer in self.layers.iter_mut().rev() {
            let lg = layer.backward(&g)?;
            g = lg.input;
            per_layer.push(lg.params);
        }
        Ok(per_layer.into_iter().rev().flatten().collect())
    }

    pub fn branch_signature(&self) -> Vec<usize> {
        let mut sig = Vec::new();
        for l in &self.layers {
            l.branch_signature(&mut sig);
        }
        sig
    }

    pub fn clear_caches(&mut self) {
        self.layers.iter_mut().for_each(Layer::clear_cache);
    }

    pub fn cast<U: Scalar>(&self) -> SleepNet<U> {
        SleepNet {
            spec: self.spec,
            layers: self.layers.iter().map(Layer::cast).collect(),
        }
    }

    /// Every tensor that defines the model, in serialization order: per
    /// layer its parameters, and for batch norm the running mean and variance.
    fn state_tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend(l.params());
            if let Layer::BatchNorm(bn) = l {
                out.push(&bn.running.mean);
                out.push(&bn.running.var);
            }
        }
        out
    }

    fn state_tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            match l {
                Layer::BatchNorm(bn) => {
                    out.push(&mut bn.gamma);
                    out.push(&mut bn.beta);
                    out.push(&mut bn.running.mean);
                    out.push(&mut bn.running.var);
                }
                other => out.extend(other.params_mut()),
            }
        }
        out
    }
}

// ---------------------------------------------------------------- persistence

fn encode_spec(spec: &ModelSpec, out: &mut Vec<u8>) {
    out.extend_from_slice(&spec.sample_rate.to_le_bytes());
    out.extend_from_slice(&spec.window_size_s.to_le_bytes());
    for v in [
        spec.conv_blocks,
        spec.filters_per_conv,
        spec.kernel_size,
        spec.pool_size,
        spec.dense_units,
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&spec.conv_dropout.to_le_bytes());
    out.extend_from_slice(&spec.dense_dropout.to_le_bytes());
    match spec.head {
        Head::Regression => {
            out.push(0);
            out.extend_from_slice(&1u32.to_le_bytes());
        }
        Head::Classification { classes } => {
            out.push(1);
            out.extend_from_slice(&(classes as u32).to_le_bytes());
        }
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64(&mut self) -> Option<f64> {
        self.take(8).map(|b| f64::from_le_bytes(b.try_into().unwrap()))
    }
}

fn decode_spec(c: &mut Cursor<'_>) -> Option<ModelSpec> {
    let sample_rate = c.u32()?;
    let window_size_s = c.f64()?;
    let conv_blocks = c.u32()? as usize;
    let filters_per_conv = c.u32()? as usize;
    let kernel_size = c.u32()? as usize;
    let pool_size = c.u32()? as usize;
    let dense_units = c.u32()? as usize;
    let conv_dropout = c.f64()?;
    let dense_dropout = c.f64()?;
    let head_kind = c.u8()?;
    let classes = c.u32()? as usize;
    let head = match head_kind {
        0 => Head::Regression,
        1 => Head::Classification { classes },
        _ => return None,
    };
    Some(ModelSpec {
        sample_rate,
        window_size_s,
        conv_blocks,
        filters_per_conv,
        kernel_size,
        pool_size,
        dense_units,
        conv_dropout,
        dense_dropout,
        head,
    })
}

impl SleepNet<f32> {
    /// `RVM1` encoding: magic, u16 version, spec, then every state tensor as
    /// u8 rank, u32 dims, f32 payload (all little-endian), then a CRC32 of
    /// everything before it.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_FILE_MAGIC);
        out.extend_from_slice(&MODEL_FILE_VERSION.to_le_bytes());
        encode_spec(&self.spec, &mut out);
        for t in self.state_tensors() {
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let format = |reason: &str| Error::Format {
            path: path.to_path_buf(),
            reason: reason.into(),
        };
        let corrupt = |reason: &str| Error::Corrupt {
            path: path.to_path_buf(),
            reason: reason.into(),
        };
        if bytes.len() < 4 || &bytes[..4] != MODEL_FILE_MAGIC {
            return Err(format("bad magic, expected RVM1"));
        }
        let mut c = Cursor { bytes, pos: 4 };
        let version = c.u16().ok_or_else(|| corrupt("truncated header"))?;
        if version != MODEL_FILE_VERSION {
            return Err(format(&format!("unsupported model file version {version}")));
        }
        if bytes.len() < 10 {
            return Err(corrupt("truncated file"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(corrupt("checksum mismatch (truncated or modified file)"));
        }
        let mut c = Cursor { bytes: body, pos: 6 };
        let spec = decode_spec(&mut c).ok_or_else(|| corrupt("malformed spec"))?;
        let mut model = SleepNet::<f32>::build(spec, 0).map_err(|e| corrupt(&e.to_string()))?;
        for t in model.state_tensors_mut() {
            let rank = c.u8().ok_or_else(|| corrupt("truncated tensor header"))? as usize;
            let dims = (0..rank)
                .map(|_| c.u32().map(|d| d as usize))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| corrupt("truncated tensor header"))?;
            if dims != t.shape() {
                return Err(corrupt(&format!(
                    "tensor shape {dims:?} does not match spec-derived {:?}",
                    t.shape()
                )));
            }
            let payload = c
                .take(4 * t.len())
                .ok_or_else(|| corrupt("truncated tensor data"))?;
            for (dst, b) in t.data_mut().iter_mut().zip(payload.chunks_exact(4)) {
                *dst = f32::from_le_bytes(b.try_into().unwrap());
            }
        }
        if c.pos != body.len() {
            return Err(corrupt("trailing bytes after last tensor"));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

pub fn save_model(model: &SleepNet<f32>, path: impl AsRef<Path>) -> Result<()> {
    model.save(path)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<SleepNet<f32>> {
    SleepNet::load(path)
}
