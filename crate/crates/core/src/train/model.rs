use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bitcore::RealTensor;
use crate::error::{Error, Result};
use crate::netspec::{infer_shapes, NetworkSpec};

pub const BN_EPS: f64 = 1e-5;

pub const CHECKPOINT_FORMAT: &str = "bnnkit-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Per-channel batch-norm parameters and running statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub eps: f64,
}

impl BatchNormParams {
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            eps: BN_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// `gamma * (a - mean) / sqrt(var + eps) + beta`, the single expression
    /// shared by training-time inference and threshold folding.
    #[inline]
    pub fn apply(gamma: f64, beta: f64, mean: f64, var: f64, eps: f64, a: f64) -> f64 {
        gamma * (a - mean) / (var + eps).sqrt() + beta
    }

    #[inline]
    pub fn normalize(&self, ch: usize, a: f64) -> f64 {
        Self::apply(self.gamma[ch], self.beta[ch], self.mean[ch], self.var[ch], self.eps, a)
    }

    /// `sign(BatchNorm(a))` with ties toward `+1`.
    #[inline]
    pub fn sign(&self, ch: usize, a: f64) -> bool {
        self.normalize(ch, a) >= 0.0
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.gamma.len();
        if self.beta.len() != c || self.mean.len() != c || self.var.len() != c {
            return Err(Error::Shape("batch-norm vectors differ in length".into()));
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::Shape("batch-norm eps must be positive".into()));
        }
        if self.var.iter().any(|v| v.is_nan() || *v < 0.0) {
            return Err(Error::Shape("batch-norm variance must be non-negative".into()));
        }
        Ok(())
    }
}

/// Parameters of one conv or fc layer. Weights are `fan_in x out_channels`,
/// row-major, with the fan-in in `(ky, kx, channel)` order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub layer: usize,
    pub weights: RealTensor,
    pub bn: Option<BatchNormParams>,
}

impl LayerParams {
    pub fn fan_in(&self) -> usize {
        self.weights.dims[0]
    }

    pub fn out_channels(&self) -> usize {
        self.weights.dims[1]
    }

    /// Latent weight feeding output `o` from fan-in position `k`.
    #[inline]
    pub fn weight(&self, k: usize, o: usize) -> f64 {
        self.weights.values[k * self.out_channels() + o]
    }
}

/// Latent real-valued weights and batch-norm state of a network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub spec: NetworkSpec,
    pub layers: Vec<LayerParams>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    model: TrainedModel,
}

impl TrainedModel {
    /// Glorot-uniform latent weights (clipped to `[-1, 1]`), identity
    /// batch-norm.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        infer_shapes(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = spec
            .weighted_layers()
            .map(|(i, l)| {
                let f = l.fan_in();
                let co = l.out_channels;
                let limit = (6.0 / (f + co) as f64).sqrt().min(1.0);
                let values = (0..f * co).map(|_| rng.random_range(-limit..limit)).collect();
                LayerParams {
                    layer: i,
                    weights: RealTensor {
                        dims: vec![f, co],
                        values,
                    },
                    bn: l.bn_sign.then(|| BatchNormParams::identity(co)),
                }
            })
            .collect();
        Ok(Self {
            spec: spec.clone(),
            layers,
        })
    }

    /// Position in `layers` of spec layer `index`.
    pub fn weighted_index(&self, index: usize) -> Option<usize> {
        self.layers.iter().position(|p| p.layer == index)
    }

    pub fn params_for(&self, index: usize) -> Option<&LayerParams> {
        self.weighted_index(index).map(|i| &self.layers[i])
    }

    /// Fixed positive factor applied to the final accumulator so the
    /// softmax sees values of order one. It never changes the argmax.
    pub fn logit_scale(&self) -> f64 {
        let last = self.spec.layers.last().expect("non-empty spec");
        1.0 / (last.fan_in() as f64).sqrt()
    }

    /// Checks parameter shapes against the spec.
    pub fn validate(&self) -> Result<()> {
        infer_shapes(&self.spec)?;
        let expected: Vec<_> = self.spec.weighted_layers().collect();
        if expected.len() != self.layers.len() {
            return Err(Error::Shape(format!(
                "model has {} weighted layers, spec has {}",
                self.layers.len(),
                expected.len()
            )));
        }
        for ((i, l), p) in expected.into_iter().zip(&self.layers) {
            if p.layer != i {
                return Err(Error::Shape(format!("{}: layer index {} != {}", l.name, p.layer, i)));
            }
            if p.weights.dims != [l.fan_in(), l.out_channels]
                || p.weights.values.len() != l.fan_in() * l.out_channels
            {
                return Err(Error::Shape(format!(
                    "{}: weights {:?}, expected [{}, {}]",
                    l.name,
                    p.weights.dims,
                    l.fan_in(),
                    l.out_channels
                )));
            }
            match (&p.bn, l.bn_sign) {
                (Some(bn), true) => {
                    bn.validate()?;
                    if bn.channels() != l.out_channels {
                        return Err(Error::Shape(format!("{}: batch-norm width", l.name)));
                    }
                }
                (None, false) => {}
                _ => return Err(Error::Shape(format!("{}: batch-norm presence", l.name))),
            }
        }
        Ok(())
    }

    pub fn max_abs_weight(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|p| p.weights.values.iter())
            .fold(0.0, |m, w| m.max(w.abs()))
    }

    pub fn to_checkpoint(&self) -> String {
        serde_json::to_string(&Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            model: self.clone(),
        })
        .expect("model serializes")
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("checkpoint: {e}")))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Config(format!("not a checkpoint: format `{}`", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint version {}",
                ck.version
            )));
        }
        ck.model.validate()?;
        Ok(ck.model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint(&text)
    }
}
