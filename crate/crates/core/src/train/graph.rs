//! Batched forward and backward passes over a [`TrainedModel`].
//!
//! Activations are NHWC `f64` buffers. Convolutions are lowered with im2col
//! (window order `(ky, kx, channel)`, the same order the engine's sliding
//! window uses) and run through `matrixmultiply`'s dgemm.

use crate::netspec::{LayerKind, NetworkSpec};
use crate::par::{self, Execution};

use super::model::{BatchNormParams, TrainedModel};

/// How `sign()` is treated in the forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binarizer {
    /// Real sign with the clipped straight-through estimator backward.
    Sign,
    /// Hard-tanh surrogate; its backward is the exact derivative, so it can
    /// be checked against finite differences.
    HardTanh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with the statistics of the current batch.
    Batch,
    /// Normalize with the running statistics (inference behavior).
    Running,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardOptions {
    pub binarizer: Binarizer,
    pub bn: BnMode,
    pub exec: Execution,
}

impl ForwardOptions {
    pub fn train() -> Self {
        Self {
            binarizer: Binarizer::Sign,
            bn: BnMode::Batch,
            exec: Execution::Auto,
        }
    }

    pub fn inference() -> Self {
        Self {
            binarizer: Binarizer::Sign,
            bn: BnMode::Running,
            exec: Execution::Auto,
        }
    }

    pub fn surrogate() -> Self {
        Self {
            binarizer: Binarizer::HardTanh,
            bn: BnMode::Running,
            exec: Execution::Auto,
        }
    }

    pub fn with_bn(mut self, bn: BnMode) -> Self {
        self.bn = bn;
        self
    }

    pub fn with_exec(mut self, exec: Execution) -> Self {
        self.exec = exec;
        self
    }
}

/// NHWC activation buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Activation {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl Activation {
    pub fn new(n: usize, h: usize, w: usize, c: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n * h * w * c, "activation buffer size");
        Self { n, h, w, c, data }
    }

    pub fn zeros(n: usize, h: usize, w: usize, c: usize) -> Self {
        Self::new(n, h, w, c, vec![0.0; n * h * w * c])
    }

    pub fn per_sample(&self) -> usize {
        self.h * self.w * self.c
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let s = self.per_sample();
        &self.data[i * s..(i + 1) * s]
    }
}

/// Sign (`x >= 0` to `+1`) or hard-tanh.
#[inline]
pub fn binarize_value(b: Binarizer, x: f64) -> f64 {
    match b {
        Binarizer::Sign => {
            if x >= 0.0 {
                1.0
            } else {
                -1.0
            }
        }
        Binarizer::HardTanh => x.clamp(-1.0, 1.0),
    }
}

/// Clipped straight-through estimator: passes `upstream` where
/// `|latent| <= 1`, zero elsewhere.
#[inline]
pub fn ste_backward(upstream: f64, latent: f64) -> f64 {
    if latent.abs() <= 1.0 {
        upstream
    } else {
        0.0
    }
}

pub(crate) struct BnRecord {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
    /// Post-normalization values, pre-sign.
    pub y: Vec<f64>,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

pub(crate) enum LayerCache {
    Weighted {
        /// im2col matrix for conv, the flattened input for fc.
        cols: Vec<f64>,
        rows: usize,
        binarized: Vec<f64>,
        bn: Option<BnRecord>,
    },
    Pool {
        argmax: Vec<u32>,
    },
}

/// Everything recorded by a forward pass.
pub struct Forward {
    pub start: usize,
    pub batch: usize,
    /// Per-layer outputs (index `i - start`): the tensor layer `i + 1`
    /// consumes. For weighted layers this is `binarize(BatchNorm(A))`.
    pub outputs: Vec<Activation>,
    /// Per-layer raw accumulators `A`, only for weighted layers.
    pub accumulators: Vec<Option<Vec<f64>>>,
    /// `batch x classes` logits.
    pub logits: Vec<f64>,
    pub classes: usize,
    pub(crate) input: Activation,
    pub(crate) caches: Vec<LayerCache>,
}

impl Forward {
    pub fn output(&self, layer: usize) -> &Activation {
        &self.outputs[layer - self.start]
    }

    pub fn logits_of(&self, sample: usize) -> &[f64] {
        &self.logits[sample * self.classes..(sample + 1) * self.classes]
    }

    /// Argmax per sample, ties to the lowest index.
    pub fn predictions(&self) -> Vec<usize> {
        (0..self.batch).map(|i| argmax(self.logits_of(i))).collect()
    }

    /// Per-layer running-statistics candidates `(mean, var)` from batch-mode
    /// normalization, keyed by layer index.
    pub fn batch_stats(&self) -> Vec<(usize, &[f64], &[f64])> {
        self.caches
            .iter()
            .enumerate()
            .filter_map(|(k, c)| match c {
                LayerCache::Weighted { bn: Some(r), .. } if !r.batch_mean.is_empty() => Some((
                    self.start + k,
                    r.batch_mean.as_slice(),
                    r.batch_var.as_slice(),
                )),
                _ => None,
            })
            .collect()
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Gradients produced by [`backward`].
pub struct Gradients {
    /// Per weighted layer (indexed like `TrainedModel::layers`).
    pub weights: Vec<Vec<f64>>,
    pub gamma: Vec<Vec<f64>>,
    pub beta: Vec<Vec<f64>>,
    /// Gradient with respect to the output of the requested layer.
    pub output_grad: Option<Activation>,
}

// C (m x n) = op(A) op(B) + beta C, with explicit strides.
#[allow(clippy::too_many_arguments)]
fn dgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    // SAFETY: callers pass buffers sized for the given extents and strides;
    // `c` is exclusively borrowed and row-major m x n.
    unsafe {
        matrixmultiply::dgemm(
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

/// `C = A B`, A is m x k, B is k x n.
pub(crate) fn matmul(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n);
    dgemm(m, k, n, a, k as isize, 1, b, n as isize, 1, 0.0, c);
}

/// `C = A^T B`, A is m x k (so C is k x n), B is m x n.
fn matmul_at_b(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    dgemm(k, m, n, a, 1, k as isize, b, n as isize, 1, 0.0, c);
}

/// `C = A B^T`, A is m x n, B is k x n (so C is m x k).
fn matmul_a_bt(m: usize, n: usize, k: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    dgemm(m, n, k, a, n as isize, 1, b, 1, n as isize, 0.0, c);
}

/// Lowers `input` into `(n * oh * ow) x (k * k * c)` window rows.
pub(crate) fn im2col(exec: Execution, input: &Activation, k: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (input.h - k + 1, input.w - k + 1);
    let f = k * k * input.c;
    let mut cols = vec![0.0; input.n * oh * ow * f];
    let (h, w, c) = (input.h, input.w, input.c);
    let _ = h;
    par::for_each_chunk_mut(exec, &mut cols, oh * ow * f, |n, out| {
        let src = input.sample(n);
        for y in 0..oh {
            for x in 0..ow {
                let row = &mut out[(y * ow + x) * f..(y * ow + x + 1) * f];
                for ky in 0..k {
                    let s = ((y + ky) * w + x) * c;
                    row[ky * k * c..(ky + 1) * k * c].copy_from_slice(&src[s..s + k * c]);
                }
            }
        }
    });
    (cols, oh, ow)
}

/// Adjoint of [`im2col`]: scatters window-row gradients back onto the map.
fn col2im(exec: Execution, dcols: &[f64], shape: (usize, usize, usize, usize), k: usize) -> Activation {
    let (n, h, w, c) = shape;
    let (oh, ow) = (h - k + 1, w - k + 1);
    let f = k * k * c;
    let mut out = Activation::zeros(n, h, w, c);
    par::for_each_chunk_mut(exec, &mut out.data, h * w * c, |s, dst| {
        let src = &dcols[s * oh * ow * f..(s + 1) * oh * ow * f];
        for y in 0..oh {
            for x in 0..ow {
                let row = &src[(y * ow + x) * f..(y * ow + x + 1) * f];
                for ky in 0..k {
                    let d = ((y + ky) * w + x) * c;
                    for (o, v) in dst[d..d + k * c].iter_mut().zip(&row[ky * k * c..(ky + 1) * k * c]) {
                        *o += v;
                    }
                }
            }
        }
    });
    out
}

fn bn_forward(
    bn: &BatchNormParams,
    mode: BnMode,
    acc: &[f64],
    rows: usize,
    channels: usize,
) -> BnRecord {
    let (mean, var): (Vec<f64>, Vec<f64>) = match mode {
        BnMode::Running => (bn.mean.clone(), bn.var.clone()),
        BnMode::Batch => {
            let mut mean = vec![0.0; channels];
            for r in 0..rows {
                for (m, a) in mean.iter_mut().zip(&acc[r * channels..(r + 1) * channels]) {
                    *m += a;
                }
            }
            mean.iter_mut().for_each(|m| *m /= rows as f64);
            let mut var = vec![0.0; channels];
            for r in 0..rows {
                for ch in 0..channels {
                    let d = acc[r * channels + ch] - mean[ch];
                    var[ch] += d * d;
                }
            }
            var.iter_mut().for_each(|v| *v /= rows as f64);
            (mean, var)
        }
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + bn.eps).sqrt()).collect();
    let mut xhat = vec![0.0; acc.len()];
    let mut y = vec![0.0; acc.len()];
    for r in 0..rows {
        for ch in 0..channels {
            let i = r * channels + ch;
            xhat[i] = (acc[i] - mean[ch]) * inv_std[ch];
            // Same expression the threshold folding evaluates, so inference
            // decisions agree bit for bit.
            y[i] = BatchNormParams::apply(bn.gamma[ch], bn.beta[ch], mean[ch], var[ch], bn.eps, acc[i]);
        }
    }
    let (batch_mean, batch_var) = match mode {
        BnMode::Batch => (mean, var),
        BnMode::Running => (Vec::new(), Vec::new()),
    };
    BnRecord {
        xhat,
        inv_std,
        y,
        batch_mean,
        batch_var,
    }
}

/// Runs the network on an NHWC batch. Pixel inputs are expected in `[-1, 1)`.
pub fn forward(model: &TrainedModel, input: &Activation, opts: ForwardOptions) -> Forward {
    forward_from(model, 0, input.clone(), opts)
}

/// Runs layers `start..` on `input`, which must be shaped like the input of
/// layer `start`.
pub fn forward_from(model: &TrainedModel, start: usize, input: Activation, opts: ForwardOptions) -> Forward {
    let spec = &model.spec;
    let batch = input.n;
    let mut cur = input.clone();
    let mut outputs = Vec::new();
    let mut accumulators = Vec::new();
    let mut caches = Vec::new();
    let mut logits = Vec::new();
    for li in start..spec.layers.len() {
        let l = &spec.layers[li];
        match l.kind {
            LayerKind::MaxPool => {
                let (out, argmax) = maxpool_forward(&cur);
                caches.push(LayerCache::Pool { argmax });
                accumulators.push(None);
                outputs.push(out.clone());
                cur = out;
            }
            LayerKind::Conv | LayerKind::Fc => {
                let p = model.params_for(li).expect("weighted layer has parameters");
                let co = l.out_channels;
                let f = l.fan_in();
                let binarized: Vec<f64> = p
                    .weights
                    .values
                    .iter()
                    .map(|&w| binarize_value(opts.binarizer, w))
                    .collect();
                let (cols, rows, oh, ow) = if l.kind == LayerKind::Conv {
                    let (cols, oh, ow) = im2col(opts.exec, &cur, l.kernel);
                    (cols, batch * oh * ow, oh, ow)
                } else {
                    (cur.data.clone(), batch, 1, 1)
                };
                debug_assert_eq!(cols.len(), rows * f);
                let mut acc = vec![0.0; rows * co];
                matmul(rows, f, co, &cols, &binarized, &mut acc);
                if spec.is_final(li) {
                    let scale = model.logit_scale();
                    logits = acc.iter().map(|a| a * scale).collect();
                    outputs.push(Activation::new(batch, oh, ow, co, logits.clone()));
                    accumulators.push(Some(acc));
                    caches.push(LayerCache::Weighted {
                        cols,
                        rows,
                        binarized,
                        bn: None,
                    });
                    cur = outputs.last().unwrap().clone();
                } else {
                    let bn = p.bn.as_ref().expect("hidden layer has batch norm");
                    let rec = bn_forward(bn, opts.bn, &acc, rows, co);
                    let out: Vec<f64> = rec.y.iter().map(|&y| binarize_value(opts.binarizer, y)).collect();
                    let out = Activation::new(batch, oh, ow, co, out);
                    outputs.push(out.clone());
                    accumulators.push(Some(acc));
                    caches.push(LayerCache::Weighted {
                        cols,
                        rows,
                        binarized,
                        bn: Some(rec),
                    });
                    cur = out;
                }
            }
        }
    }
    Forward {
        start,
        batch,
        outputs,
        accumulators,
        logits,
        classes: spec.classes,
        input,
        caches,
    }
}

fn maxpool_forward(x: &Activation) -> (Activation, Vec<u32>) {
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut out = Activation::zeros(x.n, oh, ow, x.c);
    let mut argmax = vec![0u32; out.data.len()];
    for n in 0..x.n {
        for y in 0..oh {
            for xx in 0..ow {
                for ch in 0..x.c {
                    let mut best = f64::NEG_INFINITY;
                    let mut at = 0usize;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let i = ((n * x.h + 2 * y + dy) * x.w + 2 * xx + dx) * x.c + ch;
                            if x.data[i] > best {
                                best = x.data[i];
                                at = i;
                            }
                        }
                    }
                    let o = ((n * oh + y) * ow + xx) * x.c + ch;
                    out.data[o] = best;
                    argmax[o] = at as u32;
                }
            }
        }
    }
    (out, argmax)
}

/// Backpropagates `dlogits` (`batch x classes`) through the recorded pass.
///
/// `output_grad_at` requests the gradient with respect to the output of
/// that layer (it must be `>= fwd.start`).
pub fn backward(
    model: &TrainedModel,
    fwd: &Forward,
    dlogits: &[f64],
    opts: ForwardOptions,
    output_grad_at: Option<usize>,
) -> Gradients {
    let spec: &NetworkSpec = &model.spec;
    let nw = model.layers.len();
    let mut grads = Gradients {
        weights: model.layers.iter().map(|p| vec![0.0; p.weights.len()]).collect(),
        gamma: model
            .layers
            .iter()
            .map(|p| vec![0.0; p.bn.as_ref().map_or(0, |b| b.gamma.len())])
            .collect(),
        beta: model
            .layers
            .iter()
            .map(|p| vec![0.0; p.bn.as_ref().map_or(0, |b| b.beta.len())])
            .collect(),
        output_grad: None,
    };
    debug_assert_eq!(nw, spec.weighted_count());
    let scale = model.logit_scale();
    // Gradient with respect to the output of the current layer.
    let mut dout: Vec<f64> = dlogits.iter().map(|g| g * scale).collect();
    for li in (fwd.start..spec.layers.len()).rev() {
        let l = &spec.layers[li];
        if output_grad_at == Some(li) {
            let o = fwd.output(li);
            let g = if spec.is_final(li) {
                // Expose the gradient of the logits themselves.
                dlogits.to_vec()
            } else {
                dout.clone()
            };
            grads.output_grad = Some(Activation::new(o.n, o.h, o.w, o.c, g));
        }
        let in_shape = if li == fwd.start {
            let i = &fwd.input;
            (i.n, i.h, i.w, i.c)
        } else {
            let i = fwd.output(li - 1);
            (i.n, i.h, i.w, i.c)
        };
        let need_input_grad = li > fwd.start;
        match (&fwd.caches[li - fwd.start], l.kind) {
            (LayerCache::Pool { argmax }, _) => {
                let (n, h, w, c) = in_shape;
                let mut din = vec![0.0; n * h * w * c];
                for (o, &src) in argmax.iter().enumerate() {
                    din[src as usize] += dout[o];
                }
                dout = din;
            }
            (
                LayerCache::Weighted {
                    cols,
                    rows,
                    binarized,
                    bn,
                },
                kind,
            ) => {
                let wi = model.weighted_index(li).expect("weighted layer");
                let co = l.out_channels;
                let f = l.fan_in();
                let rows = *rows;
                // Through sign/BN back to the accumulator.
                let dacc: Vec<f64> = match bn {
                    None => dout,
                    Some(rec) => {
                        let bnp = model.layers[wi].bn.as_ref().unwrap();
                        let dy: Vec<f64> = dout
                            .iter()
                            .zip(&rec.y)
                            .map(|(&g, &y)| ste_backward(g, y))
                            .collect();
                        bn_backward(bnp, rec, opts.bn, &dy, rows, co, &mut grads.gamma[wi], &mut grads.beta[wi])
                    }
                };
                // Weight gradient through the binarizer.
                let mut dwb = vec![0.0; f * co];
                matmul_at_b(rows, f, co, cols, &dacc, &mut dwb);
                let latent = &model.layers[wi].weights.values;
                for ((g, d), &w) in grads.weights[wi].iter_mut().zip(&dwb).zip(latent) {
                    *g = ste_backward(*d, w);
                }
                if need_input_grad {
                    let mut dcols = vec![0.0; rows * f];
                    matmul_a_bt(rows, co, f, &dacc, binarized, &mut dcols);
                    dout = if kind == LayerKind::Conv {
                        col2im(opts.exec, &dcols, in_shape, l.kernel).data
                    } else {
                        dcols
                    };
                } else {
                    dout = Vec::new();
                }
            }
        }
    }
    grads
}

#[allow(clippy::too_many_arguments)]
fn bn_backward(
    bn: &BatchNormParams,
    rec: &BnRecord,
    mode: BnMode,
    dy: &[f64],
    rows: usize,
    channels: usize,
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> Vec<f64> {
    let mut sum_dy = vec![0.0; channels];
    let mut sum_dy_xhat = vec![0.0; channels];
    for r in 0..rows {
        for ch in 0..channels {
            let i = r * channels + ch;
            sum_dy[ch] += dy[i];
            sum_dy_xhat[ch] += dy[i] * rec.xhat[i];
        }
    }
    for ch in 0..channels {
        dgamma[ch] += sum_dy_xhat[ch];
        dbeta[ch] += sum_dy[ch];
    }
    let mut dx = vec![0.0; dy.len()];
    match mode {
        BnMode::Running => {
            for r in 0..rows {
                for ch in 0..channels {
                    let i = r * channels + ch;
                    dx[i] = dy[i] * bn.gamma[ch] * rec.inv_std[ch];
                }
            }
        }
        BnMode::Batch => {
            let m = rows as f64;
            for r in 0..rows {
                for ch in 0..channels {
                    let i = r * channels + ch;
                    let k = bn.gamma[ch] * rec.inv_std[ch] / m;
                    dx[i] = k * (m * dy[i] - sum_dy[ch] - rec.xhat[i] * sum_dy_xhat[ch]);
                }
            }
        }
    }
    dx
}

/// Mean softmax cross-entropy over the batch and its gradient.
pub fn cross_entropy(logits: &[f64], labels: &[usize], classes: usize) -> (f64, Vec<f64>) {
    let n = labels.len();
    assert_eq!(logits.len(), n * classes);
    let mut grad = vec![0.0; logits.len()];
    let mut loss = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let z = &logits[i * classes..(i + 1) * classes];
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|v| (v - max).exp()).sum();
        let log_sum = sum.ln() + max;
        loss += log_sum - z[label];
        for k in 0..classes {
            let p = (z[k] - log_sum).exp();
            grad[i * classes + k] = (p - if k == label { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    (loss / n as f64, grad)
}
