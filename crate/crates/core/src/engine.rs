//! Functional execution of a [`CompiledModel`] with accelerator operator
//! semantics: sliding-window reshaping, matrix-vector-threshold units and
//! OR pooling. Values only; timing lives in [`crate::perfmodel`].

use crate::bitcore::{xnor_popcount_range, xnor_popcount_words, BitTensor};
use crate::compile::{CompiledLayer, CompiledModel, CompiledOp, PIXEL_ZERO};
use crate::data::Image;
use crate::error::{Error, Result};
use crate::netspec::FINAL_FC_PAD;
use crate::par::{map_slice, Execution};

/// PE / SIMD folding of one MVTU.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MvtuConfig {
    pub pe: usize,
    pub simd: usize,
}

impl MvtuConfig {
    pub fn new(pe: usize, simd: usize) -> Self {
        Self { pe, simd }
    }

    /// One PE per padded output channel, the whole fan-in per cycle.
    pub fn unfolded(layer: &CompiledLayer) -> Self {
        Self {
            pe: padded_rows(layer),
            simd: layer.fan_in,
        }
    }

    pub fn validate(&self, layer: &CompiledLayer) -> Result<()> {
        let fail = |reason: String| {
            Err(Error::Folding {
                layer: layer.name.clone(),
                reason,
            })
        };
        let rows = padded_rows(layer);
        if self.pe == 0 || self.simd == 0 {
            return fail("PE and SIMD must be at least 1".into());
        }
        if !rows.is_multiple_of(self.pe) {
            return fail(format!("PE {} does not divide {} output channels", self.pe, rows));
        }
        if !layer.fan_in.is_multiple_of(self.simd) {
            return fail(format!("SIMD {} does not divide fan-in {}", self.simd, layer.fan_in));
        }
        Ok(())
    }
}

/// Output channels including the padding of the final layer.
pub fn padded_rows(layer: &CompiledLayer) -> usize {
    let rows = layer.rows.len();
    if layer.thresholds.is_none() {
        rows.div_ceil(FINAL_FC_PAD) * FINAL_FC_PAD
    } else {
        rows
    }
}

/// A per-pixel vector: packed bits, or signed pixel values for the first
/// layer.
pub trait Lane: Clone + Send + Sync {
    fn lane_len(&self) -> usize;
    fn concat(parts: &[&Self]) -> Self;
    /// Partial accumulation against a weight row over `[start, start + len)`:
    /// the XNOR match count for bits, the signed sum for integers.
    fn partial(&self, row: &BitTensor, start: usize, len: usize) -> i64;
    fn full(&self, row: &BitTensor) -> i64 {
        self.partial(row, 0, self.lane_len())
    }
    /// Bipolar dot product from an accumulated value.
    fn dot(total: i64, fan_in: usize) -> i64;
}

impl Lane for BitTensor {
    fn lane_len(&self) -> usize {
        self.bit_len()
    }

    fn concat(parts: &[&Self]) -> Self {
        BitTensor::concat(parts.iter().copied())
    }

    #[inline]
    fn partial(&self, row: &BitTensor, start: usize, len: usize) -> i64 {
        xnor_popcount_range(self, row, start, len) as i64
    }

    #[inline]
    fn full(&self, row: &BitTensor) -> i64 {
        xnor_popcount_words(self.words(), row.words(), self.bit_len()) as i64
    }

    fn dot(total: i64, fan_in: usize) -> i64 {
        2 * total - fan_in as i64
    }
}

impl Lane for Vec<i32> {
    fn lane_len(&self) -> usize {
        self.len()
    }

    fn concat(parts: &[&Self]) -> Self {
        parts.iter().flat_map(|p| p.iter().copied()).collect()
    }

    #[inline]
    fn partial(&self, row: &BitTensor, start: usize, len: usize) -> i64 {
        (start..start + len)
            .map(|i| if row.get(i) { self[i] as i64 } else { -(self[i] as i64) })
            .sum()
    }

    fn dot(total: i64, _fan_in: usize) -> i64 {
        total
    }
}

/// Feature map as a row-major sequence of per-pixel vectors.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeatureStream<T> {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub vectors: Vec<T>,
}

impl<T: Lane> FeatureStream<T> {
    pub fn new(height: usize, width: usize, channels: usize, vectors: Vec<T>) -> Result<Self> {
        if vectors.len() != height * width {
            return Err(Error::Shape(format!(
                "{} vectors for a {height}x{width} map",
                vectors.len()
            )));
        }
        if let Some(v) = vectors.iter().find(|v| v.lane_len() != channels) {
            return Err(Error::Shape(format!("vector of length {}, expected {channels}", v.lane_len())));
        }
        Ok(Self {
            height,
            width,
            channels,
            vectors,
        })
    }

    pub fn at(&self, y: usize, x: usize) -> &T {
        &self.vectors[y * self.width + x]
    }

    /// Whole map as a single vector in `(y, x, channel)` order.
    pub fn flatten(&self) -> T {
        let parts: Vec<&T> = self.vectors.iter().collect();
        T::concat(&parts)
    }
}

impl FeatureStream<Vec<i32>> {
    /// Pixels centred on zero: `q - 128` per channel.
    pub fn from_image(image: &Image) -> Self {
        let vectors = image
            .data
            .chunks(3)
            .map(|px| px.iter().map(|&q| q as i32 - PIXEL_ZERO).collect())
            .collect();
        Self {
            height: image.height,
            width: image.width,
            channels: 3,
            vectors,
        }
    }
}

/// Reshapes a map into `Xo * Yo` windows of `k * k * C` elements, window
/// interior in `(ky, kx, channel)` order.
pub fn sliding_window<T: Lane>(input: &FeatureStream<T>, k: usize, stride: usize) -> Result<FeatureStream<T>> {
    if k == 0 || stride == 0 || k > input.height || k > input.width {
        return Err(Error::Shape(format!(
            "window {k}x{k} (stride {stride}) does not fit a {}x{} map",
            input.height, input.width
        )));
    }
    let oh = (input.height - k) / stride + 1;
    let ow = (input.width - k) / stride + 1;
    let mut vectors = Vec::with_capacity(oh * ow);
    let mut parts = Vec::with_capacity(k * k);
    for oy in 0..oh {
        for ox in 0..ow {
            parts.clear();
            for ky in 0..k {
                for kx in 0..k {
                    parts.push(input.at(oy * stride + ky, ox * stride + kx));
                }
            }
            vectors.push(T::concat(&parts));
        }
    }
    Ok(FeatureStream {
        height: oh,
        width: ow,
        channels: k * k * input.channels,
        vectors,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MvtuOutput {
    Bits(BitTensor),
    Logits(Vec<i64>),
}

/// Runs one MVTU over a window. The PE / SIMD loop nest mirrors the
/// hardware schedule; it never changes the result.
pub fn mvtu_execute<T: Lane>(cfg: &MvtuConfig, layer: &CompiledLayer, window: &T) -> Result<MvtuOutput> {
    if window.lane_len() != layer.fan_in {
        return Err(Error::LengthMismatch {
            left: window.lane_len(),
            right: layer.fan_in,
        });
    }
    cfg.validate(layer)?;
    let rows = layer.rows.len();
    let f = layer.fan_in;
    let mut totals = vec![0i64; rows];
    if cfg.simd >= f {
        for (o, row) in layer.rows.iter().enumerate() {
            totals[o] = window.full(row);
        }
    } else {
        let neuron_folds = padded_rows(layer) / cfg.pe;
        let synapse_folds = f / cfg.simd;
        for nf in 0..neuron_folds {
            for sf in 0..synapse_folds {
                for pe in 0..cfg.pe {
                    let o = nf * cfg.pe + pe;
                    if o < rows {
                        totals[o] += window.partial(&layer.rows[o], sf * cfg.simd, cfg.simd);
                    }
                }
            }
        }
    }
    Ok(match &layer.thresholds {
        Some(t) => MvtuOutput::Bits(BitTensor::from_bools(
            totals.iter().enumerate().map(|(o, &v)| t.fires(o, v)),
        )),
        None => MvtuOutput::Logits(totals.iter().map(|&v| T::dot(v, f)).collect()),
    })
}

/// 2x2 stride-2 OR pooling.
pub fn maxpool_or(input: &FeatureStream<BitTensor>) -> Result<FeatureStream<BitTensor>> {
    if !input.height.is_multiple_of(2) || !input.width.is_multiple_of(2) {
        return Err(Error::Shape(format!(
            "OR pooling needs even extents, got {}x{}",
            input.height, input.width
        )));
    }
    let (oh, ow) = (input.height / 2, input.width / 2);
    let mut vectors = Vec::with_capacity(oh * ow);
    for oy in 0..oh {
        for ox in 0..ow {
            let quad = [
                input.at(2 * oy, 2 * ox),
                input.at(2 * oy, 2 * ox + 1),
                input.at(2 * oy + 1, 2 * ox),
                input.at(2 * oy + 1, 2 * ox + 1),
            ];
            let words: Vec<u64> = (0..quad[0].words().len())
                .map(|j| quad.iter().fold(0, |acc, v| acc | v.words()[j]))
                .collect();
            vectors.push(BitTensor::from_words(input.channels, words).expect("same width"));
        }
    }
    Ok(FeatureStream {
        height: oh,
        width: ow,
        channels: input.channels,
        vectors,
    })
}

enum Stream {
    Pixels(FeatureStream<Vec<i32>>),
    Bits(FeatureStream<BitTensor>),
}

fn apply_weighted<T: Lane>(
    layer: &CompiledLayer,
    cfg: &MvtuConfig,
    input: &FeatureStream<T>,
) -> Result<std::result::Result<FeatureStream<BitTensor>, Vec<i64>>> {
    let windows = match layer.op {
        CompiledOp::Conv => sliding_window(input, layer.kernel, layer.stride)?,
        _ => FeatureStream {
            height: 1,
            width: 1,
            channels: input.height * input.width * input.channels,
            vectors: vec![input.flatten()],
        },
    };
    let mut bits = Vec::with_capacity(windows.vectors.len());
    for w in &windows.vectors {
        match mvtu_execute(cfg, layer, w)? {
            MvtuOutput::Bits(b) => bits.push(b),
            MvtuOutput::Logits(l) => {
                if windows.vectors.len() != 1 {
                    return Err(Error::Shape(format!("{}: logits need a 1x1 output", layer.name)));
                }
                return Ok(Err(l));
            }
        }
    }
    Ok(Ok(FeatureStream {
        height: windows.height,
        width: windows.width,
        channels: layer.rows.len(),
        vectors: bits,
    }))
}

/// Bit outputs of every hidden layer plus the final logits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trace {
    pub layers: Vec<Option<FeatureStream<BitTensor>>>,
    pub logits: Vec<i64>,
}

fn execute(model: &CompiledModel, image: &Image, folding: Option<&[MvtuConfig]>, keep: bool) -> Result<Trace> {
    let inp = model.input;
    if image.width != inp.width || image.height != inp.height || inp.channels != 3 {
        return Err(Error::Shape(format!(
            "image is {}x{}, model expects {}x{}x{}",
            image.width, image.height, inp.width, inp.height, inp.channels
        )));
    }
    if let Some(f) = folding {
        let weighted = model.weighted_layers().count();
        if f.len() != weighted {
            return Err(Error::Shape(format!("{} folding entries for {weighted} weighted layers", f.len())));
        }
    }
    let mut stream = Stream::Pixels(FeatureStream::from_image(image));
    let mut trace = Vec::with_capacity(model.layers.len());
    let mut weighted = 0;
    for layer in &model.layers {
        let next = if layer.op == CompiledOp::MaxPool {
            match &stream {
                Stream::Bits(s) => maxpool_or(s)?,
                Stream::Pixels(_) => return Err(Error::InvalidNetwork("pooling raw pixels".into())),
            }
        } else {
            let cfg = match folding {
                Some(f) => f[weighted],
                None => MvtuConfig::unfolded(layer),
            };
            weighted += 1;
            let out = match &stream {
                Stream::Pixels(s) => apply_weighted(layer, &cfg, s)?,
                Stream::Bits(s) => apply_weighted(layer, &cfg, s)?,
            };
            match out {
                Ok(s) => s,
                Err(logits) => {
                    trace.push(None);
                    return Ok(Trace {
                        layers: trace,
                        logits,
                    });
                }
            }
        };
        trace.push(keep.then(|| next.clone()));
        stream = Stream::Bits(next);
    }
    Err(Error::InvalidNetwork("model has no logit layer".into()))
}

/// Index of the largest logit, ties toward the lowest index.
pub fn argmax_logits(logits: &[i64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

pub fn classify(model: &CompiledModel, image: &Image) -> Result<(usize, Vec<i64>)> {
    let t = execute(model, image, None, false)?;
    Ok((argmax_logits(&t.logits), t.logits))
}

/// [`classify`] with an explicit PE / SIMD folding per weighted layer.
pub fn classify_folded(model: &CompiledModel, image: &Image, folding: &[MvtuConfig]) -> Result<(usize, Vec<i64>)> {
    let t = execute(model, image, Some(folding), false)?;
    Ok((argmax_logits(&t.logits), t.logits))
}

/// Runs the pipeline and keeps every intermediate bit map.
pub fn trace(model: &CompiledModel, image: &Image) -> Result<Trace> {
    execute(model, image, None, true)
}

/// Results are in input order regardless of scheduling.
pub fn classify_batch(model: &CompiledModel, images: &[Image], exec: Execution) -> Result<Vec<(usize, Vec<i64>)>> {
    map_slice(exec, images, |im| classify(model, im)).into_iter().collect()
}

pub fn classify_batch_sequential(model: &CompiledModel, images: &[Image]) -> Result<Vec<(usize, Vec<i64>)>> {
    classify_batch(model, images, Execution::Sequential)
}
