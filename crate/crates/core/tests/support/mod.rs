//! Independent oracles shared by the integration and acceptance tests.
//!
//! Everything here is written from the definitions with plain loops and does
//! not call into the kernels it checks.

#![allow(dead_code)]

use sleepnet::model::{ModelSpec, SleepNet};
use sleepnet::nn::{Layer, Mode, Tensor};
use sleepnet::rng::seeded;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-3;
/// Relative-error bound for analytic vs numeric gradients.
pub const FD_TOLERANCE: f64 = 1e-3;
/// Gradients smaller than this are compared on an absolute scale. At
/// h = 1e-3 the O(h²) truncation error reaches ~1e-7 absolute (batch-norm
/// curvature), which would dominate the relative error of tiny gradients;
/// exactly-zero gradients (conv biases ahead of batch norm) need it too.
pub const FD_SCALE_FLOOR: f64 = 1e-3;

/// `out[b][o][t] = bias[o] + Σ_c Σ_j x[b][c][t+j] · w[o][c][j]`
pub fn naive_conv1d(
    x: &[f64],
    (batch, c_in, n): (usize, usize, usize),
    w: &[f64],
    bias: &[f64],
    (c_out, k): (usize, usize),
) -> Vec<f64> {
    let len = n - k + 1;
    let mut out = vec![0.0; batch * c_out * len];
    for b in 0..batch {
        for o in 0..c_out {
            for t in 0..len {
                let mut acc = bias[o];
                for c in 0..c_in {
                    for j in 0..k {
                        acc += x[(b * c_in + c) * n + t + j] * w[(o * c_in + c) * k + j];
                    }
                }
                out[(b * c_out + o) * len + t] = acc;
            }
        }
    }
    out
}

/// `out[b][u] = bias[u] + Σ_f x[b][f] · w[f][u]`
pub fn naive_dense(x: &[f64], batch: usize, f: usize, w: &[f64], bias: &[f64], u: usize) -> Vec<f64> {
    let mut out = vec![0.0; batch * u];
    for b in 0..batch {
        for j in 0..u {
            let mut acc = bias[j];
            for i in 0..f {
                acc += x[b * f + i] * w[i * u + j];
            }
            out[b * u + j] = acc;
        }
    }
    out
}

/// Mean over rows of `-ln(exp(z_t) / Σ exp(z))`, straight from the definition.
pub fn naive_crossentropy(logits: &[f64], k: usize, targets: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &t) in logits.chunks(k).zip(targets) {
        let denom: f64 = row.iter().map(|z| z.exp()).sum();
        total -= (row[t].exp() / denom).ln();
    }
    total / targets.len() as f64
}

/// Average-tie rank by counting: 1 + #smaller + (#equal − 1)/2.
pub fn brute_rank(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|&x| {
            let less = v.iter().filter(|&&y| y < x).count() as f64;
            let equal = v.iter().filter(|&&y| y == x).count() as f64;
            1.0 + less + (equal - 1.0) / 2.0
        })
        .collect()
}

pub fn brute_pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

pub fn brute_spearman(a: &[f64], b: &[f64]) -> f64 {
    brute_pearson(&brute_rank(a), &brute_rank(b))
}

/// Windowed-sinc decimator evaluated per output sample: 63-tap Hamming
/// window, cutoff 0.45 of the target Nyquist, unit DC gain, zero outside
/// the clip, output `i` centred on input `i·factor`.
pub fn sinc_decimate(x: &[f64], factor: usize) -> Vec<f64> {
    let taps = 63usize;
    let half = (taps / 2) as isize;
    let fc = 0.45 * 0.5 / factor as f64;
    let h: Vec<f64> = (0..taps)
        .map(|i| {
            let m = i as f64 - half as f64;
            let sinc = if m == 0.0 {
                2.0 * fc
            } else {
                (2.0 * std::f64::consts::PI * fc * m).sin() / (std::f64::consts::PI * m)
            };
            let hamming =
                0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (taps - 1) as f64).cos();
            sinc * hamming
        })
        .collect();
    let dc: f64 = h.iter().sum();
    (0..x.len() / factor)
        .map(|i| {
            let centre = (i * factor) as isize;
            (0..taps)
                .map(|j| {
                    let idx = centre + j as isize - half;
                    if idx < 0 || idx as usize >= x.len() {
                        0.0
                    } else {
                        h[j] / dc * x[idx as usize]
                    }
                })
                .sum()
        })
        .collect()
}

/// Outcome of one finite-difference sweep.
#[derive(Debug, Clone, Copy, Default)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Coordinates whose ±h perturbation changed a ReLU sign or pool argmax.
    pub skipped: usize,
}

impl GradCheck {
    pub fn merge(self, o: GradCheck) -> GradCheck {
        GradCheck {
            max_rel_err: self.max_rel_err.max(o.max_rel_err),
            checked: self.checked + o.checked,
            skipped: self.skipped + o.skipped,
        }
    }

    fn record(&mut self, analytic: f64, numeric: f64) {
        let scale = analytic.abs().max(numeric.abs()).max(FD_SCALE_FLOOR);
        self.max_rel_err = self.max_rel_err.max((analytic - numeric).abs() / scale);
        self.checked += 1;
    }
}

fn projection(len: usize, seed: u64) -> Vec<f64> {
    use rand::Rng;
    let mut rng = seeded(seed ^ 0x5eed);
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Loss `Σ r·layer(x)` in train mode with a fixed dropout stream, plus the
/// branch signature of the pass.
fn layer_loss(layer: &mut Layer<f64>, x: &Tensor<f64>, r: &[f64], seed: u64) -> (f64, Vec<usize>) {
    let y = layer.forward_train(x, &mut seeded(seed)).expect("forward");
    let mut sig = Vec::new();
    layer.branch_signature(&mut sig);
    layer.clear_cache();
    (dot(y.data(), r), sig)
}

/// Checks the input gradient and every parameter gradient of `layer` at `x`.
pub fn check_layer(mut layer: Layer<f64>, x: Tensor<f64>, seed: u64) -> GradCheck {
    let y = layer.forward_train(&x, &mut seeded(seed)).expect("forward");
    let r = projection(y.len(), seed);
    let mut base_sig = Vec::new();
    layer.branch_signature(&mut base_sig);
    let g = layer
        .backward(&Tensor::new(y.shape().to_vec(), r.clone()).unwrap())
        .expect("backward");

    let mut report = GradCheck::default();
    // input coordinates
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += FD_STEP;
        let (lp, sp) = layer_loss(&mut layer, &xp, &r, seed);
        xp.data_mut()[i] -= 2.0 * FD_STEP;
        let (lm, sm) = layer_loss(&mut layer, &xp, &r, seed);
        if sp != base_sig || sm != base_sig {
            report.skipped += 1;
            continue;
        }
        report.record(g.input.data()[i], (lp - lm) / (2.0 * FD_STEP));
    }
    // parameter coordinates
    for (p, gp) in g.params.iter().enumerate() {
        for i in 0..gp.len() {
            let mut eval = |delta: f64| {
                let orig = layer.params()[p].data()[i];
                layer.params_mut()[p].data_mut()[i] = orig + delta;
                let out = layer_loss(&mut layer, &x, &r, seed);
                layer.params_mut()[p].data_mut()[i] = orig;
                out
            };
            let (lp, sp) = eval(FD_STEP);
            let (lm, sm) = eval(-FD_STEP);
            if sp != base_sig || sm != base_sig {
                report.skipped += 1;
                continue;
            }
            report.record(gp.data()[i], (lp - lm) / (2.0 * FD_STEP));
        }
    }
    report
}

fn model_loss(model: &mut SleepNet<f64>, x: &Tensor<f64>, r: &[f64], seed: u64) -> (f64, Vec<usize>) {
    let y = model.logits(x, Mode::Train, &mut seeded(seed)).expect("forward");
    let sig = model.branch_signature();
    model.clear_caches();
    (dot(y.data(), r), sig)
}

/// Small-window default architecture (`N = 64`).
pub fn small_spec() -> ModelSpec {
    ModelSpec {
        window_size_s: 64.0 / 16000.0,
        ..ModelSpec::default()
    }
}

/// Checks every parameter gradient of the composed network on a random batch.
pub fn check_model(spec: ModelSpec, batch: usize, seed: u64) -> GradCheck {
    use rand::Rng;
    let mut model = SleepNet::<f64>::build(spec, seed).expect("build");
    let n = spec.input_len().unwrap();
    let mut rng = seeded(seed.wrapping_add(1));
    let x = Tensor::new(
        vec![batch, 1, n],
        (0..batch * n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let y = model.logits(&x, Mode::Train, &mut seeded(seed)).unwrap();
    let r = projection(y.len(), seed);
    let base_sig = model.branch_signature();
    let grads = model
        .backward(&Tensor::new(y.shape().to_vec(), r.clone()).unwrap())
        .unwrap();

    let mut report = GradCheck::default();
    for (p, gp) in grads.iter().enumerate() {
        for i in 0..gp.len() {
            let mut eval = |delta: f64| {
                let orig = model.params()[p].data()[i];
                model.params_mut()[p].data_mut()[i] = orig + delta;
                let out = model_loss(&mut model, &x, &r, seed);
                model.params_mut()[p].data_mut()[i] = orig;
                out
            };
            let (lp, sp) = eval(FD_STEP);
            let (lm, sm) = eval(-FD_STEP);
            if sp != base_sig || sm != base_sig {
                report.skipped += 1;
                continue;
            }
            report.record(gp.data()[i], (lp - lm) / (2.0 * FD_STEP));
        }
    }
    report
}

/// One random instance of every layer type at small shapes.
pub fn random_layers(seed: u64) -> Vec<(&'static str, Layer<f64>, Tensor<f64>)> {
    use rand::Rng;
    use sleepnet::nn::{BatchNorm1d, Conv1d, Dense, Dropout, MaxPool1d};
    let mut rng = seeded(seed);
    let mut t = |shape: &[usize], scale: f64| {
        let len = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..len).map(|_| rng.random_range(-scale..scale)).collect(),
        )
        .unwrap()
    };
    let conv_w = t(&[3, 2, 3], 1.0);
    let conv_b = t(&[3], 0.5);
    let conv_x = t(&[2, 2, 9], 1.0);
    let mut bn = BatchNorm1d::new(2, 0.9, 1e-5);
    bn.gamma = t(&[2], 2.0);
    bn.beta = t(&[2], 1.0);
    let bn_x = t(&[3, 2, 5], 2.0);
    let relu_x = t(&[2, 3, 4], 1.0);
    let pool_x = t(&[2, 2, 9], 1.0);
    let drop_x = t(&[2, 3, 6], 1.0);
    let flat_x = t(&[2, 3, 4], 1.0);
    let dense_w = t(&[5, 4], 1.0);
    let dense_b = t(&[4], 0.5);
    let dense_x = t(&[3, 5], 1.0);
    vec![
        ("conv1d", Layer::Conv1d(Conv1d::new(conv_w, conv_b)), conv_x),
        ("batchnorm", Layer::BatchNorm(bn), bn_x),
        ("relu", Layer::Relu(None), relu_x),
        ("maxpool", Layer::MaxPool(MaxPool1d::new(2 + (seed % 2) as usize)), pool_x),
        ("dropout", Layer::Dropout(Dropout::new(0.3)), drop_x),
        ("flatten", Layer::Flatten(None), flat_x),
        ("dense", Layer::Dense(Dense::new(dense_w, dense_b)), dense_x),
    ]
}
