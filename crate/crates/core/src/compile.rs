//! Deployment compilation: batch-norm + sign folded into integer thresholds,
//! binarized weights packed into rows, and the `BCOP` model file.
//!
//! # Threshold folding
//!
//! A hidden layer emits `sign(gamma * (a - mean) / sqrt(var + eps) + beta)`
//! for its accumulator `a`. For a binary-input layer `a = 2p - F`, where `p`
//! is the XNOR popcount and `F` the fan-in, so the decision is a comparison
//! of `p` against an integer `T`:
//!
//! * `gamma > 0`: fire iff `p >= T`, `T = ceil((tau + F) / 2)`
//! * `gamma < 0`: fire iff `p <= T` (flip flag), `T = floor((tau + F) / 2)`
//!
//! with `tau = mean - beta * sqrt(var + eps) / gamma`. `T` is clamped into
//! `[0, F + 1]`, so channels that always or never fire stay representable;
//! `gamma == 0` channels collapse to `T = 0` (always on) or `T = F + 1`
//! (always off). The estimate from `tau` is then nudged against the exact
//! `f64` batch-norm expression, which makes compiled decisions identical to
//! the latent model's, including ties at zero (which go to `+1`).
//!
//! The first layer consumes 8-bit pixels `q` mapped to `(q - 128) / 128`;
//! it is compiled over the signed integer accumulator `sum((q - 128) * b)`,
//! with `a = acc / 128`.
//!
//! # File format (version 1, little-endian)
//!
//! ```text
//! "BCOP" | u32 version
//! u16 name_len | name bytes (UTF-8)
//! u32 classes | u32 input_h | u32 input_w | u32 input_c | u32 input_bits
//! u32 layer_count
//! per layer:
//!   u8 op (0 conv, 1 maxpool, 2 fc) | u8 input (0 binary, 1 pixels)
//!   u8 has_thresholds | u8 threshold domain (0 popcount, 1 accumulator)
//!   u16 name_len | name bytes
//!   u32 in_h, in_w, in_c, out_h, out_w, out_c, kernel, stride, fan_in, rows
//!   rows * ceil(fan_in / 64) u64 weight words (bit i of word j = element 64j+i)
//!   if has_thresholds: rows * i32 thresholds | ceil(rows / 8) flip bytes (LSB first)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bitcore::{words_for, BitTensor};
use crate::error::{Error, Result};
use crate::netspec::{infer_shapes, Extent, InputSpec, LayerKind, NetworkSpec};
use crate::train::{BatchNormParams, TrainedModel};

pub const MAGIC: &[u8; 4] = b"BCOP";
pub const FORMAT_VERSION: u32 = 1;
/// Pixel offset and scale of the first layer's integer domain.
pub const PIXEL_ZERO: i32 = 128;
pub const PIXEL_SCALE: f64 = 128.0;

pub const MAX_LAYERS: u32 = 256;
pub const MAX_NAME_LEN: u16 = 256;
pub const MAX_EXTENT: u32 = 1 << 16;
pub const MAX_FAN_IN: u32 = 1 << 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ThresholdDomain {
    /// XNOR popcount `p` in `[0, F]`.
    Popcount,
    /// Signed pixel accumulator `sum((q - 128) * b)`.
    Accumulator,
}

/// Per-channel integer thresholds of one layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThresholdParams {
    pub domain: ThresholdDomain,
    pub fan_in: u32,
    pub thresholds: Vec<i32>,
    pub flip: Vec<bool>,
}

impl ThresholdParams {
    pub fn channels(&self) -> usize {
        self.thresholds.len()
    }

    /// Decision for channel `ch` given its popcount or accumulator.
    #[inline]
    pub fn fires(&self, ch: usize, value: i64) -> bool {
        let t = self.thresholds[ch] as i64;
        if self.flip[ch] {
            value <= t
        } else {
            value >= t
        }
    }

    /// Integer range of the compared value.
    pub fn value_range(&self) -> (i64, i64) {
        domain_range(self.domain, self.fan_in)
    }
}

fn domain_range(domain: ThresholdDomain, fan_in: u32) -> (i64, i64) {
    let f = fan_in as i64;
    match domain {
        ThresholdDomain::Popcount => (0, f),
        ThresholdDomain::Accumulator => (-(PIXEL_ZERO as i64) * f, (255 - PIXEL_ZERO as i64) * f),
    }
}

/// Accumulator value seen by batch norm for an integer `value`.
#[inline]
fn to_accumulator(domain: ThresholdDomain, fan_in: u32, value: i64) -> f64 {
    match domain {
        ThresholdDomain::Popcount => (2 * value - fan_in as i64) as f64,
        ThresholdDomain::Accumulator => value as f64 / PIXEL_SCALE,
    }
}

fn fold_channel(bn: &BatchNormParams, ch: usize, domain: ThresholdDomain, fan_in: u32) -> (i32, bool) {
    let (lo, hi) = domain_range(domain, fan_in);
    let gamma = bn.gamma[ch];
    let fires = |v: i64| bn.sign(ch, to_accumulator(domain, fan_in, v));
    if gamma == 0.0 || gamma.is_nan() {
        return (if bn.beta[ch] >= 0.0 { lo } else { hi + 1 } as i32, false);
    }
    let tau = bn.mean[ch] - bn.beta[ch] * (bn.var[ch] + bn.eps).sqrt() / gamma;
    let pivot = match domain {
        ThresholdDomain::Popcount => (tau + fan_in as f64) / 2.0,
        ThresholdDomain::Accumulator => tau * PIXEL_SCALE,
    };
    if gamma > 0.0 {
        let mut t = clamp_estimate(pivot.ceil(), lo, hi + 1);
        while t > lo && fires(t - 1) {
            t -= 1;
        }
        while t <= hi && !fires(t) {
            t += 1;
        }
        (t as i32, false)
    } else {
        let mut t = clamp_estimate(pivot.floor(), lo - 1, hi);
        while t < hi && fires(t + 1) {
            t += 1;
        }
        while t >= lo && !fires(t) {
            t -= 1;
        }
        if t < lo {
            // Never fires: encode as an unreachable non-flipped threshold.
            ((hi + 1) as i32, false)
        } else {
            (t as i32, true)
        }
    }
}

fn clamp_estimate(x: f64, lo: i64, hi: i64) -> i64 {
    if x.is_nan() {
        (lo + hi) / 2
    } else {
        x.clamp(lo as f64, hi as f64) as i64
    }
}

/// Folds batch-norm + sign of a binary-input layer with fan-in `fan_in` into
/// popcount thresholds.
pub fn fold_batchnorm_to_threshold(bn: &BatchNormParams, fan_in: u32) -> ThresholdParams {
    fold_in_domain(bn, fan_in, ThresholdDomain::Popcount)
}

pub fn fold_in_domain(bn: &BatchNormParams, fan_in: u32, domain: ThresholdDomain) -> ThresholdParams {
    let (thresholds, flip) = (0..bn.channels())
        .map(|ch| fold_channel(bn, ch, domain, fan_in))
        .unzip();
    ThresholdParams {
        domain,
        fan_in,
        thresholds,
        flip,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CompiledOp {
    Conv,
    MaxPool,
    Fc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InputKind {
    Binary,
    Pixels,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompiledLayer {
    pub name: String,
    pub op: CompiledOp,
    pub input_kind: InputKind,
    pub input: Extent,
    pub output: Extent,
    pub kernel: usize,
    pub stride: usize,
    pub fan_in: usize,
    /// One packed row per output channel; empty for pools.
    pub rows: Vec<BitTensor>,
    /// Absent for pools and for the final (logit) layer.
    pub thresholds: Option<ThresholdParams>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompiledModel {
    pub arch_name: String,
    pub version: u32,
    pub classes: usize,
    pub input: InputSpec,
    pub layers: Vec<CompiledLayer>,
}

/// Non-fatal findings during compilation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CompileWarning {
    pub layer: String,
    pub channel: usize,
    pub message: String,
}

pub fn compile_model(trained: &TrainedModel, spec: &NetworkSpec) -> Result<CompiledModel> {
    compile_model_with_warnings(trained, spec).map(|(m, _)| m)
}

pub fn compile_model_with_warnings(
    trained: &TrainedModel,
    spec: &NetworkSpec,
) -> Result<(CompiledModel, Vec<CompileWarning>)> {
    if &trained.spec != spec {
        return Err(Error::Shape(format!(
            "model was trained for `{}`, compiling for `{}` with a different layer list",
            trained.spec.arch_name, spec.arch_name
        )));
    }
    trained.validate()?;
    let shapes = infer_shapes(spec)?;
    if !spec.layers[0].kind.is_weighted() {
        return Err(Error::InvalidNetwork("first layer must consume pixels with weights".into()));
    }
    let mut warnings = Vec::new();
    let mut layers = Vec::with_capacity(spec.layers.len());
    for (i, l) in spec.layers.iter().enumerate() {
        let shape = shapes.layers[i];
        let input_kind = if i == 0 { InputKind::Pixels } else { InputKind::Binary };
        let (op, rows, thresholds) = match l.kind {
            LayerKind::MaxPool => (CompiledOp::MaxPool, Vec::new(), None),
            LayerKind::Conv | LayerKind::Fc => {
                let p = trained.params_for(i).expect("validated");
                let f = l.fan_in();
                let rows: Vec<BitTensor> = (0..l.out_channels)
                    .map(|o| BitTensor::from_bools((0..f).map(|k| p.weight(k, o) >= 0.0)))
                    .collect();
                let thresholds = p.bn.as_ref().map(|bn| {
                    let domain = match input_kind {
                        InputKind::Pixels => ThresholdDomain::Accumulator,
                        InputKind::Binary => ThresholdDomain::Popcount,
                    };
                    for ch in (0..bn.channels()).filter(|&c| bn.gamma[c] == 0.0) {
                        warnings.push(CompileWarning {
                            layer: l.name.clone(),
                            channel: ch,
                            message: "gamma is zero; channel output is constant".into(),
                        });
                    }
                    fold_in_domain(bn, f as u32, domain)
                });
                let op = if l.kind == LayerKind::Conv {
                    CompiledOp::Conv
                } else {
                    CompiledOp::Fc
                };
                (op, rows, thresholds)
            }
        };
        layers.push(CompiledLayer {
            name: l.name.clone(),
            op,
            input_kind,
            input: shape.input,
            output: shape.output,
            kernel: l.kernel,
            stride: l.stride,
            fan_in: l.fan_in(),
            rows,
            thresholds,
        });
    }
    for w in &warnings {
        log::warn!("{} channel {}: {}", w.layer, w.channel, w.message);
    }
    Ok((
        CompiledModel {
            arch_name: spec.arch_name.clone(),
            version: FORMAT_VERSION,
            classes: spec.classes,
            input: spec.input,
            layers,
        },
        warnings,
    ))
}

/// Problems with a `BCOP` byte stream.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic {0:02x?}, expected \"BCOP\"")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated at byte {offset}: need {needed} more bytes")]
    Truncated { offset: usize, needed: usize },
    #[error("{field} = {value} exceeds limit {limit}")]
    Bounds {
        field: &'static str,
        value: u64,
        limit: u64,
    },
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error("{0} trailing bytes after the last layer")]
    TrailingBytes(usize),
}

impl FormatError {
    /// Stable numeric code per error kind.
    pub fn code(&self) -> u8 {
        match self {
            FormatError::BadMagic(_) => 1,
            FormatError::UnsupportedVersion(_) => 2,
            FormatError::Truncated { .. } => 3,
            FormatError::Bounds { .. } => 4,
            FormatError::Invalid(_) => 5,
            FormatError::TrailingBytes(_) => 6,
        }
    }
}

impl CompiledModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        put_str(&mut out, &self.arch_name);
        for v in [
            self.classes,
            self.input.height,
            self.input.width,
            self.input.channels,
            self.input.bits as usize,
            self.layers.len(),
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for l in &self.layers {
            out.push(match l.op {
                CompiledOp::Conv => 0,
                CompiledOp::MaxPool => 1,
                CompiledOp::Fc => 2,
            });
            out.push(match l.input_kind {
                InputKind::Binary => 0,
                InputKind::Pixels => 1,
            });
            out.push(l.thresholds.is_some() as u8);
            out.push(match l.thresholds.as_ref().map(|t| t.domain) {
                Some(ThresholdDomain::Accumulator) => 1,
                _ => 0,
            });
            put_str(&mut out, &l.name);
            for v in [
                l.input.h,
                l.input.w,
                l.input.c,
                l.output.h,
                l.output.w,
                l.output.c,
                l.kernel,
                l.stride,
                l.fan_in,
                l.rows.len(),
            ] {
                out.extend_from_slice(&(v as u32).to_le_bytes());
            }
            for row in &l.rows {
                for w in row.words() {
                    out.extend_from_slice(&w.to_le_bytes());
                }
            }
            if let Some(t) = &l.thresholds {
                for v in &t.thresholds {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                let mut bitmap = vec![0u8; t.flip.len().div_ceil(8)];
                for (i, &f) in t.flip.iter().enumerate() {
                    if f {
                        bitmap[i / 8] |= 1 << (i % 8);
                    }
                }
                out.extend_from_slice(&bitmap);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, FormatError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
        if &magic != MAGIC {
            return Err(FormatError::BadMagic(magic));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(FormatError::UnsupportedVersion(version));
        }
        let arch_name = r.string()?;
        let classes = r.bounded("classes", 1 << 16)? as usize;
        let input = InputSpec {
            height: r.bounded("input_h", MAX_EXTENT)? as usize,
            width: r.bounded("input_w", MAX_EXTENT)? as usize,
            channels: r.bounded("input_c", MAX_EXTENT)? as usize,
            bits: r.bounded("input_bits", 32)?,
        };
        let count = r.bounded("layer_count", MAX_LAYERS)?;
        let mut layers = Vec::with_capacity(count as usize);
        for _ in 0..count {
            layers.push(r.layer()?);
        }
        if r.pos != bytes.len() {
            return Err(FormatError::TrailingBytes(bytes.len() - r.pos));
        }
        let model = CompiledModel {
            arch_name,
            version,
            classes,
            input,
            layers,
        };
        model.check_consistency()?;
        Ok(model)
    }

    fn check_consistency(&self) -> std::result::Result<(), FormatError> {
        let bad = |m: String| Err(FormatError::Invalid(m));
        let Some(last) = self.layers.last() else {
            return bad("no layers".into());
        };
        if last.thresholds.is_some() || last.rows.len() != self.classes {
            return bad(format!("final layer must emit {} raw logits", self.classes));
        }
        let mut cur = Extent::new(self.input.height, self.input.width, self.input.channels);
        for (i, l) in self.layers.iter().enumerate() {
            if l.input != cur {
                return bad(format!("{}: input extent does not chain", l.name));
            }
            let weighted = l.op != CompiledOp::MaxPool;
            let expect_fan_in = match l.op {
                CompiledOp::Conv => l.kernel * l.kernel * l.input.c,
                CompiledOp::Fc => l.input.len(),
                CompiledOp::MaxPool => l.fan_in,
            };
            if weighted && (l.fan_in != expect_fan_in || l.rows.len() != l.output.c) {
                return bad(format!("{}: weight geometry", l.name));
            }
            if (i == 0) != (l.input_kind == InputKind::Pixels) {
                return bad(format!("{}: only the first layer consumes pixels", l.name));
            }
            if let Some(t) = &l.thresholds {
                if t.channels() != l.rows.len() || t.fan_in as usize != l.fan_in {
                    return bad(format!("{}: threshold geometry", l.name));
                }
                let (lo, hi) = t.value_range();
                if t.thresholds.iter().any(|&v| (v as i64) < lo - 1 || (v as i64) > hi + 1) {
                    return bad(format!("{}: threshold out of range", l.name));
                }
            } else if weighted && i + 1 != self.layers.len() {
                return bad(format!("{}: hidden layer without thresholds", l.name));
            }
            cur = l.output;
        }
        Ok(())
    }

    pub fn emit<W: Write>(&self, sink: &mut W) -> std::io::Result<()> {
        sink.write_all(&self.to_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_bytes(&bytes)?)
    }

    pub fn weighted_layers(&self) -> impl Iterator<Item = &CompiledLayer> {
        self.layers.iter().filter(|l| l.op != CompiledOp::MaxPool)
    }
}

/// Writes `model` to `sink` in the `BCOP` format.
pub fn emit_model<W: Write>(model: &CompiledModel, sink: &mut W) -> std::io::Result<()> {
    model.emit(sink)
}

/// Reads a `BCOP` model from `source`.
pub fn load_model<R: Read>(source: &mut R) -> Result<CompiledModel> {
    let mut bytes = Vec::new();
    source
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io("<model stream>", e))?;
    Ok(CompiledModel::from_bytes(&bytes)?)
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    let b = s.as_bytes();
    let n = b.len().min(MAX_NAME_LEN as usize);
    out.extend_from_slice(&(n as u16).to_le_bytes());
    out.extend_from_slice(&b[..n]);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], FormatError> {
        let left = self.bytes.len() - self.pos;
        if n > left {
            return Err(FormatError::Truncated {
                offset: self.pos,
                needed: n - left,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> std::result::Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> std::result::Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> std::result::Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn bounded(&mut self, field: &'static str, limit: u32) -> std::result::Result<u32, FormatError> {
        let v = self.u32()?;
        if v > limit {
            return Err(FormatError::Bounds {
                field,
                value: v as u64,
                limit: limit as u64,
            });
        }
        Ok(v)
    }

    fn string(&mut self) -> std::result::Result<String, FormatError> {
        let n = self.u16()?;
        if n > MAX_NAME_LEN {
            return Err(FormatError::Bounds {
                field: "name_len",
                value: n as u64,
                limit: MAX_NAME_LEN as u64,
            });
        }
        let b = self.take(n as usize)?;
        String::from_utf8(b.to_vec()).map_err(|_| FormatError::Invalid("name is not UTF-8".into()))
    }

    /// Fails before allocating if `n` bytes are not available.
    fn ensure(&self, n: u64) -> std::result::Result<(), FormatError> {
        let left = (self.bytes.len() - self.pos) as u64;
        if n > left {
            return Err(FormatError::Truncated {
                offset: self.pos,
                needed: (n - left).min(usize::MAX as u64) as usize,
            });
        }
        Ok(())
    }

    fn layer(&mut self) -> std::result::Result<CompiledLayer, FormatError> {
        let op = match self.u8()? {
            0 => CompiledOp::Conv,
            1 => CompiledOp::MaxPool,
            2 => CompiledOp::Fc,
            x => return Err(FormatError::Invalid(format!("unknown layer op {x}"))),
        };
        let input_kind = match self.u8()? {
            0 => InputKind::Binary,
            1 => InputKind::Pixels,
            x => return Err(FormatError::Invalid(format!("unknown input kind {x}"))),
        };
        let has_thresholds = match self.u8()? {
            0 => false,
            1 => true,
            x => return Err(FormatError::Invalid(format!("bad threshold flag {x}"))),
        };
        let domain = match self.u8()? {
            0 => ThresholdDomain::Popcount,
            1 => ThresholdDomain::Accumulator,
            x => return Err(FormatError::Invalid(format!("unknown threshold domain {x}"))),
        };
        let name = self.string()?;
        let mut dims = [0usize; 8];
        for (d, field) in dims.iter_mut().zip([
            "in_h", "in_w", "in_c", "out_h", "out_w", "out_c", "kernel", "stride",
        ]) {
            *d = self.bounded(field, MAX_EXTENT)? as usize;
        }
        let fan_in = self.bounded("fan_in", MAX_FAN_IN)? as usize;
        let nrows = self.bounded("rows", MAX_EXTENT)? as usize;
        let wpr = words_for(fan_in);
        self.ensure(nrows as u64 * wpr as u64 * 8)?;
        let mut rows = Vec::with_capacity(nrows);
        for _ in 0..nrows {
            let words = (0..wpr)
                .map(|_| Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap())))
                .collect::<std::result::Result<Vec<u64>, FormatError>>()?;
            let row = BitTensor::from_words(fan_in, words).expect("word count matches");
            rows.push(row);
        }
        let thresholds = if has_thresholds {
            self.ensure(nrows as u64 * 4 + nrows.div_ceil(8) as u64)?;
            let thresholds = (0..nrows)
                .map(|_| Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap())))
                .collect::<std::result::Result<Vec<i32>, FormatError>>()?;
            let bitmap = self.take(nrows.div_ceil(8))?;
            let flip = (0..nrows).map(|i| bitmap[i / 8] >> (i % 8) & 1 == 1).collect();
            Some(ThresholdParams {
                domain,
                fan_in: fan_in as u32,
                thresholds,
                flip,
            })
        } else {
            None
        };
        Ok(CompiledLayer {
            name,
            op,
            input_kind,
            input: Extent::new(dims[0], dims[1], dims[2]),
            output: Extent::new(dims[3], dims[4], dims[5]),
            kernel: dims[6],
            stride: dims[7],
            fan_in,
            rows,
            thresholds,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netspec::{Arch, NetworkSpec};

    fn bn1(gamma: f64, beta: f64, mean: f64, var: f64) -> BatchNormParams {
        BatchNormParams {
            gamma: vec![gamma],
            beta: vec![beta],
            mean: vec![mean],
            var: vec![var],
            eps: 1e-5,
        }
    }

    #[test]
    fn symmetric_bn_is_majority_vote() {
        let t = fold_batchnorm_to_threshold(&bn1(1.0, 0.0, 0.0, 1.0 - 1e-5), 9);
        assert_eq!((t.thresholds[0], t.flip[0]), (5, false));
        let t = fold_batchnorm_to_threshold(&bn1(-1.0, 0.0, 0.0, 1.0 - 1e-5), 9);
        assert_eq!((t.thresholds[0], t.flip[0]), (4, true));
        assert!(t.fires(0, 4) && !t.fires(0, 5));
    }

    #[test]
    fn zero_gamma_and_saturated_channels() {
        let on = fold_batchnorm_to_threshold(&bn1(0.0, 0.3, 0.0, 1.0), 9);
        assert_eq!((on.thresholds[0], on.flip[0]), (0, false));
        let off = fold_batchnorm_to_threshold(&bn1(0.0, -0.3, 0.0, 1.0), 9);
        assert_eq!((off.thresholds[0], off.flip[0]), (10, false));
        // Mean far above any reachable accumulator: never fires.
        let t = fold_batchnorm_to_threshold(&bn1(1.0, 0.0, 100.0, 1.0), 9);
        assert_eq!(t.thresholds[0], 10);
        let t = fold_batchnorm_to_threshold(&bn1(-1.0, 0.0, -100.0, 1.0), 9);
        assert_eq!((t.thresholds[0], t.flip[0]), (10, false));
        let t = fold_batchnorm_to_threshold(&bn1(-1.0, 0.0, 100.0, 1.0), 9);
        assert_eq!((t.thresholds[0], t.flip[0]), (9, true));
    }

    #[test]
    fn ties_resolve_to_plus_one() {
        // BN output is exactly zero at a = 1 (p = 5 with F = 9).
        let bn = bn1(1.0, 0.0, 1.0, 1.0 - 1e-5);
        let t = fold_batchnorm_to_threshold(&bn, 9);
        assert!(t.fires(0, 5) && !t.fires(0, 4));
    }

    #[test]
    fn accumulator_domain_matches_float_decision() {
        let bn = bn1(0.7, -0.2, 0.31, 2.5);
        let t = fold_in_domain(&bn, 27, ThresholdDomain::Accumulator);
        let (lo, hi) = t.value_range();
        for acc in lo..=hi {
            assert_eq!(t.fires(0, acc), bn.sign(0, acc as f64 / 128.0), "acc {acc}");
        }
    }

    fn tiny_model() -> CompiledModel {
        let spec = NetworkSpec::builtin(Arch::MuCnv);
        let trained = TrainedModel::init(&spec, 5).unwrap();
        compile_model(&trained, &spec).unwrap()
    }

    #[test]
    fn compile_layout_and_determinism() {
        let spec = NetworkSpec::builtin(Arch::NCnv);
        let trained = TrainedModel::init(&spec, 5).unwrap();
        let a = compile_model(&trained, &spec).unwrap();
        assert_eq!(a.weighted_layers().count(), 9);
        let conv12 = a.layers.iter().find(|l| l.name == "Conv1_2").unwrap();
        assert_eq!(conv12.rows[0].bit_len(), 144);
        assert_eq!(conv12.rows.len(), 16);
        assert!(a.layers.last().unwrap().thresholds.is_none());
        assert_eq!(a.layers[0].thresholds.as_ref().unwrap().domain, ThresholdDomain::Accumulator);
        let b = compile_model(&trained, &spec).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        let other = NetworkSpec::builtin(Arch::MuCnv);
        assert!(matches!(compile_model(&trained, &other), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_gamma_warns() {
        let spec = NetworkSpec::builtin(Arch::MuCnv);
        let mut trained = TrainedModel::init(&spec, 5).unwrap();
        trained.layers[1].bn.as_mut().unwrap().gamma[3] = 0.0;
        let (_, w) = compile_model_with_warnings(&trained, &spec).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!((w[0].layer.as_str(), w[0].channel), ("Conv1_2", 3));
    }

    #[test]
    fn file_roundtrip_and_errors() {
        let m = tiny_model();
        let bytes = m.to_bytes();
        assert_eq!(&bytes[..4], b"BCOP");
        assert_eq!(CompiledModel::from_bytes(&bytes).unwrap(), m);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(CompiledModel::from_bytes(&bad).unwrap_err().code(), 1);
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert_eq!(CompiledModel::from_bytes(&bad), Err(FormatError::UnsupportedVersion(9)));
        for cut in [3usize, 10, bytes.len() / 2, bytes.len() - 1] {
            let e = CompiledModel::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(matches!(e, FormatError::Truncated { .. }), "cut {cut}: {e}");
        }
        let mut long = bytes.clone();
        long.push(0);
        assert_eq!(CompiledModel::from_bytes(&long), Err(FormatError::TrailingBytes(1)));
    }

    #[test]
    fn huge_layer_count_is_a_bounds_error() {
        let m = tiny_model();
        let mut bytes = m.to_bytes();
        let off = 4 + 4 + 2 + m.arch_name.len() + 5 * 4;
        bytes[off..off + 4].copy_from_slice(&1_000_000_000u32.to_le_bytes());
        assert!(matches!(
            CompiledModel::from_bytes(&bytes),
            Err(FormatError::Bounds { field: "layer_count", .. })
        ));
    }
}
