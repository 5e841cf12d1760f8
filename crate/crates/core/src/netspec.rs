//! Layer-graph descriptions of the CNV family, shape inference and
//! binary-operation accounting.
//!
//! Convolutions are valid (unpadded) with stride 1; pools are 2x2 stride 2.
//! The final fully-connected layer is padded to [`FINAL_FC_PAD`] output
//! channels for op and cycle accounting; only the first `classes` outputs are
//! real logits.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Output-channel padding granularity of the final layer.
pub const FINAL_FC_PAD: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv,
    #[serde(rename = "maxpool")]
    MaxPool,
    Fc,
}

impl LayerKind {
    pub fn is_weighted(self) -> bool {
        !matches!(self, LayerKind::MaxPool)
    }
}

/// One layer of a linear pipeline. For `fc` layers `in_channels` is the
/// flattened fan-in.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub kernel: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub bn_sign: bool,
}

impl LayerSpec {
    pub fn conv(name: &str, ci: usize, co: usize) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::Conv,
            kernel: 3,
            in_channels: ci,
            out_channels: co,
            stride: 1,
            bn_sign: true,
        }
    }

    pub fn pool(name: &str, channels: usize) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::MaxPool,
            kernel: 2,
            in_channels: channels,
            out_channels: channels,
            stride: 2,
            bn_sign: false,
        }
    }

    pub fn fc(name: &str, fan_in: usize, co: usize) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::Fc,
            kernel: 1,
            in_channels: fan_in,
            out_channels: co,
            stride: 1,
            bn_sign: true,
        }
    }

    fn final_layer(mut self) -> Self {
        self.bn_sign = false;
        self
    }

    /// Weight-row length: `K*K*Ci` for conv, the fan-in for fc.
    pub fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::Conv => self.kernel * self.kernel * self.in_channels,
            LayerKind::Fc => self.in_channels,
            LayerKind::MaxPool => 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub bits: u32,
}

impl Default for InputSpec {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            channels: 3,
            bits: 8,
        }
    }
}

/// The three built-in networks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Arch {
    Cnv,
    NCnv,
    MuCnv,
}

impl Arch {
    pub const ALL: [Arch; 3] = [Arch::Cnv, Arch::NCnv, Arch::MuCnv];

    pub fn parse(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "cnv" => Ok(Arch::Cnv),
            "n-cnv" | "ncnv" => Ok(Arch::NCnv),
            "u-cnv" | "ucnv" | "μ-cnv" | "mu-cnv" => Ok(Arch::MuCnv),
            _ => Err(Error::UnknownArch(name.into())),
        }
    }

    pub fn cli_name(self) -> &'static str {
        match self {
            Arch::Cnv => "cnv",
            Arch::NCnv => "n-cnv",
            Arch::MuCnv => "u-cnv",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Cnv => "CNV",
            Arch::NCnv => "n-CNV",
            Arch::MuCnv => "μ-CNV",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub arch_name: String,
    pub input: InputSpec,
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
}

/// Returns the built-in architecture, with a 2x2 max-pool after conv
/// groups 1 and 2.
pub fn builtin_spec(arch_name: &str) -> Result<NetworkSpec> {
    Ok(NetworkSpec::builtin(Arch::parse(arch_name)?))
}

impl NetworkSpec {
    pub fn builtin(arch: Arch) -> Self {
        let (c1, c2, c3, fc, with_conv3_2) = match arch {
            Arch::Cnv => (64, 128, 256, 512, true),
            Arch::NCnv => (16, 32, 64, 128, true),
            Arch::MuCnv => (16, 32, 64, 128, false),
        };
        let mut layers = vec![
            LayerSpec::conv("Conv1_1", 3, c1),
            LayerSpec::conv("Conv1_2", c1, c1),
            LayerSpec::pool("Pool1", c1),
            LayerSpec::conv("Conv2_1", c1, c2),
            LayerSpec::conv("Conv2_2", c2, c2),
            LayerSpec::pool("Pool2", c2),
            LayerSpec::conv("Conv3_1", c2, c3),
        ];
        // 32 -> 30 -> 28 -> 14 -> 12 -> 10 -> 5 -> 3 (-> 1)
        if with_conv3_2 {
            layers.push(LayerSpec::conv("Conv3_2", c3, c3));
            layers.push(LayerSpec::fc("FC1", c3, fc));
            layers.push(LayerSpec::fc("FC2", fc, fc));
            layers.push(LayerSpec::fc("FC3", fc, 4).final_layer());
        } else {
            layers.push(LayerSpec::fc("FC1", 3 * 3 * c3, fc));
            layers.push(LayerSpec::fc("FC2", fc, 4).final_layer());
        }
        Self {
            arch_name: arch.to_string(),
            input: InputSpec::default(),
            classes: 4,
            layers,
        }
    }

    pub fn weighted_layers(&self) -> impl Iterator<Item = (usize, &LayerSpec)> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.kind.is_weighted())
    }

    pub fn weighted_count(&self) -> usize {
        self.weighted_layers().count()
    }

    pub fn is_final(&self, index: usize) -> bool {
        index + 1 == self.layers.len()
    }

    /// Output channels used for op/cycle/memory accounting.
    pub fn padded_out_channels(&self, index: usize) -> usize {
        let l = &self.layers[index];
        if self.is_final(index) {
            l.out_channels.div_ceil(FINAL_FC_PAD) * FINAL_FC_PAD
        } else {
            l.out_channels
        }
    }

    /// Index of the last max-pool layer (the Grad-CAM target for the
    /// built-in networks).
    pub fn last_pool(&self) -> Option<usize> {
        self.layers
            .iter()
            .rposition(|l| l.kind == LayerKind::MaxPool)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)
            .map_err(|e| Error::InvalidNetwork(format!("spec document: {e}")))?;
        infer_shapes(&spec)?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Height, width and channel extent of a feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Extent {
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Extent {
    pub fn new(h: usize, w: usize, c: usize) -> Self {
        Self { h, w, c }
    }

    pub fn len(&self) -> usize {
        self.h * self.w * self.c
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pixels(&self) -> usize {
        self.h * self.w
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub input: Extent,
    pub output: Extent,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeInfo {
    pub layers: Vec<LayerShape>,
}

impl ShapeInfo {
    pub fn output(&self) -> Extent {
        self.layers.last().expect("non-empty network").output
    }
}

pub fn infer_shapes(spec: &NetworkSpec) -> Result<ShapeInfo> {
    let bad = |m: String| Err(Error::InvalidNetwork(m));
    if spec.layers.is_empty() {
        return bad("network has no layers".into());
    }
    if spec.classes == 0 {
        return bad("class count must be positive".into());
    }
    let mut cur = Extent::new(spec.input.height, spec.input.width, spec.input.channels);
    let mut out = Vec::with_capacity(spec.layers.len());
    for (i, l) in spec.layers.iter().enumerate() {
        let input = cur;
        let last = spec.is_final(i);
        if l.kind.is_weighted() && (l.in_channels == 0 || l.out_channels == 0) {
            return bad(format!("{}: channel counts must be positive", l.name));
        }
        if l.kind.is_weighted() && l.bn_sign == last {
            return bad(format!(
                "{}: only the final layer may omit batch-norm + sign",
                l.name
            ));
        }
        let output = match l.kind {
            LayerKind::Conv => {
                if l.in_channels != cur.c {
                    return bad(format!(
                        "{}: expects {} input channels, producer has {}",
                        l.name, l.in_channels, cur.c
                    ));
                }
                if l.stride != 1 || l.kernel == 0 {
                    return bad(format!("{}: conv must have stride 1 and K >= 1", l.name));
                }
                if l.kernel > cur.h || l.kernel > cur.w {
                    return bad(format!(
                        "{}: kernel {} larger than {}x{} input",
                        l.name, l.kernel, cur.h, cur.w
                    ));
                }
                Extent::new(cur.h - l.kernel + 1, cur.w - l.kernel + 1, l.out_channels)
            }
            LayerKind::MaxPool => {
                if l.in_channels != cur.c || l.out_channels != cur.c {
                    return bad(format!("{}: pool must preserve {} channels", l.name, cur.c));
                }
                if l.kernel != 2 || l.stride != 2 {
                    return bad(format!("{}: only 2x2 stride-2 pooling is supported", l.name));
                }
                if !cur.h.is_multiple_of(2) || !cur.w.is_multiple_of(2) {
                    return bad(format!(
                        "{}: cannot pool odd extent {}x{}",
                        l.name, cur.h, cur.w
                    ));
                }
                Extent::new(cur.h / 2, cur.w / 2, cur.c)
            }
            LayerKind::Fc => {
                if l.in_channels != cur.len() {
                    return bad(format!(
                        "{}: fan-in {} does not match flattened producer output {}",
                        l.name,
                        l.in_channels,
                        cur.len()
                    ));
                }
                Extent::new(1, 1, l.out_channels)
            }
        };
        out.push(LayerShape { input, output });
        cur = output;
    }
    if !spec.layers.last().unwrap().kind.is_weighted() {
        return bad("final layer must be conv or fc".into());
    }
    if cur.len() != spec.classes {
        return bad(format!(
            "final layer emits {} values for {} classes",
            cur.len(),
            spec.classes
        ));
    }
    Ok(ShapeInfo { layers: out })
}

/// Binary operations per layer; an XNOR and its popcount count as two ops.
pub fn count_binary_ops(spec: &NetworkSpec, shapes: &ShapeInfo) -> Vec<u64> {
    spec.layers
        .iter()
        .enumerate()
        .map(|(i, l)| match l.kind {
            LayerKind::MaxPool => 0,
            LayerKind::Conv | LayerKind::Fc => {
                let co = spec.padded_out_channels(i) as u64;
                let pixels = shapes.layers[i].output.pixels() as u64;
                2 * l.fan_in() as u64 * co * pixels
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn weighted_ops(arch: Arch) -> Vec<u64> {
        let spec = NetworkSpec::builtin(arch);
        let shapes = infer_shapes(&spec).unwrap();
        let ops = count_binary_ops(&spec, &shapes);
        spec.weighted_layers().map(|(i, _)| ops[i]).collect()
    }

    #[test]
    fn table_layouts() {
        let n = builtin_spec("n-cnv").unwrap();
        let w: Vec<_> = n.weighted_layers().map(|(_, l)| l).collect();
        assert_eq!(w.len(), 9);
        assert_eq!((w[0].name.as_str(), w[0].in_channels, w[0].out_channels), ("Conv1_1", 3, 16));
        assert_eq!((w[8].name.as_str(), w[8].out_channels), ("FC3", 4));
        assert!(w[..8].iter().all(|l| l.bn_sign) && !w[8].bn_sign);

        let mu = builtin_spec("u-cnv").unwrap();
        let convs = mu.layers.iter().filter(|l| l.kind == LayerKind::Conv).count();
        let fcs = mu.layers.iter().filter(|l| l.kind == LayerKind::Fc).count();
        assert_eq!((convs, fcs), (5, 2));
        let fc1 = mu.layers.iter().find(|l| l.name == "FC1").unwrap();
        assert_eq!((fc1.in_channels, fc1.out_channels), (576, 128));

        let cnv = builtin_spec("CNV").unwrap();
        assert_eq!(cnv.layers[0].out_channels, 64);
        assert_eq!(cnv.layers.last().unwrap().out_channels, 4);
        assert!(matches!(builtin_spec("resnet"), Err(Error::UnknownArch(_))));
    }

    #[test]
    fn n_cnv_shapes() {
        let spec = NetworkSpec::builtin(Arch::NCnv);
        let s = infer_shapes(&spec).unwrap();
        let by_name = |n: &str| s.layers[spec.layers.iter().position(|l| l.name == n).unwrap()];
        assert_eq!(by_name("Conv1_2").output, Extent::new(28, 28, 16));
        assert_eq!(by_name("Pool2").output, Extent::new(5, 5, 32));
        assert_eq!(by_name("Conv3_2").output, Extent::new(1, 1, 64));
        assert_eq!(s.output(), Extent::new(1, 1, 4));

        let mu = NetworkSpec::builtin(Arch::MuCnv);
        let s = infer_shapes(&mu).unwrap();
        let fc1 = mu.layers.iter().position(|l| l.name == "FC1").unwrap();
        assert_eq!(s.layers[fc1].input.len(), 576);
    }

    #[test]
    fn n_cnv_op_counts() {
        assert_eq!(
            weighted_ops(Arch::NCnv),
            vec![777_600, 3_612_672, 1_327_104, 1_843_200, 331_776, 73_728, 16_384, 32_768, 16_384]
        );
    }

    #[test]
    fn shape_errors() {
        let mut spec = NetworkSpec::builtin(Arch::NCnv);
        spec.layers[1].in_channels = 8;
        assert!(matches!(infer_shapes(&spec), Err(Error::InvalidNetwork(_))));

        // Pool directly after Conv1_1 sees a 30x30 map: fine. After a second
        // pool at 15x15 it must fail.
        let mut spec = NetworkSpec::builtin(Arch::NCnv);
        spec.layers.insert(1, LayerSpec::pool("P0", 16));
        spec.layers.insert(2, LayerSpec::pool("P00", 16));
        let err = infer_shapes(&spec).unwrap_err().to_string();
        assert!(err.contains("odd extent"), "{err}");
    }

    #[test]
    fn json_roundtrip_preserves_ops() {
        for arch in Arch::ALL {
            let spec = NetworkSpec::builtin(arch);
            let back = NetworkSpec::from_json(&spec.to_json()).unwrap();
            assert_eq!(back, spec);
            assert_eq!(weighted_ops(arch), {
                let s = infer_shapes(&back).unwrap();
                let ops = count_binary_ops(&back, &s);
                back.weighted_layers().map(|(i, _)| ops[i]).collect::<Vec<_>>()
            });
        }
        assert!(NetworkSpec::from_json("{\"arch_name\": 3}").is_err());
    }

    #[test]
    fn arch_names() {
        for a in Arch::ALL {
            assert_eq!(Arch::parse(a.cli_name()).unwrap(), a);
        }
        assert_eq!(Arch::parse("μ-CNV").unwrap(), Arch::MuCnv);
    }
}
