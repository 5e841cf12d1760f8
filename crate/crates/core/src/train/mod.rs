//! Training with latent real-valued weights, binarized forward passes and
//! straight-through-estimator backward passes.
//!
//! Defaults: softmax cross-entropy over the class logits, Adam (lr 1e-3,
//! batch 64), latent weights clipped to `[-1, 1]` after every step,
//! batch-norm eps 1e-5 and running-statistics momentum 0.9.

mod graph;
mod model;

pub use graph::{
    argmax, backward, binarize_value, cross_entropy, forward, forward_from, ste_backward, Activation,
    Binarizer, BnMode, Forward, ForwardOptions, Gradients,
};
pub use model::{BatchNormParams, LayerParams, TrainedModel, BN_EPS, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};


use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{self, AugmentConfig, ConfusionMatrix, Dataset, Image};
use crate::error::{Error, Result};
use crate::par::Execution;

pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub augment: bool,
    pub augment_config: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            learning_rate: 1e-3,
            seed: 0,
            augment: false,
            augment_config: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub samples: usize,
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Moments {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// Adam with the usual defaults.
#[derive(Clone, Debug)]
struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    weights: Vec<Moments>,
    gamma: Vec<Moments>,
    beta: Vec<Moments>,
}

impl Adam {
    fn new(model: &TrainedModel, lr: f64) -> Self {
        let bn = |p: &LayerParams| p.bn.as_ref().map_or(0, |b| b.channels());
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            weights: model.layers.iter().map(|p| Moments::new(p.weights.len())).collect(),
            gamma: model.layers.iter().map(|p| Moments::new(bn(p))).collect(),
            beta: model.layers.iter().map(|p| Moments::new(bn(p))).collect(),
        }
    }

    fn update(&self, params: &mut [f64], grads: &[f64], st: &mut Moments) {
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i];
            st.m[i] = self.beta1 * st.m[i] + (1.0 - self.beta1) * g;
            st.v[i] = self.beta2 * st.v[i] + (1.0 - self.beta2) * g * g;
            let mh = st.m[i] / c1;
            let vh = st.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }

    fn step(&mut self, model: &mut TrainedModel, grads: &Gradients) {
        self.t += 1;
        for (i, p) in model.layers.iter_mut().enumerate() {
            let mut st = std::mem::replace(&mut self.weights[i], Moments::new(0));
            self.update(&mut p.weights.values, &grads.weights[i], &mut st);
            self.weights[i] = st;
            for w in p.weights.values.iter_mut() {
                *w = w.clamp(-1.0, 1.0);
            }
            if let Some(bn) = p.bn.as_mut() {
                let mut st = std::mem::replace(&mut self.gamma[i], Moments::new(0));
                self.update(&mut bn.gamma, &grads.gamma[i], &mut st);
                self.gamma[i] = st;
                let mut st = std::mem::replace(&mut self.beta[i], Moments::new(0));
                self.update(&mut bn.beta, &grads.beta[i], &mut st);
                self.beta[i] = st;
            }
        }
    }
}

/// Packs images into an NHWC batch with pixels mapped to `[-1, 1)`.
pub fn images_to_batch(images: &[&Image]) -> Result<Activation> {
    let first = images.first().ok_or(Error::EmptyDataset)?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * h * w * 3);
    for img in images {
        if img.height != h || img.width != w {
            return Err(Error::Shape(format!(
                "batch mixes {}x{} and {}x{} images",
                h, w, img.height, img.width
            )));
        }
        data.extend(img.data.iter().map(|&p| data::pixel_to_input(p)));
    }
    Ok(Activation::new(images.len(), h, w, 3, data))
}

/// Training-mode forward pass on a batch of images.
pub fn forward_train(model: &TrainedModel, images: &[&Image], opts: ForwardOptions) -> Result<Forward> {
    let input = images_to_batch(images)?;
    let want = &model.spec.input;
    if input.h != want.height || input.w != want.width || want.channels != 3 {
        return Err(Error::Shape(format!(
            "expected {}x{}x{} input, got {}x{}x3",
            want.height, want.width, want.channels, input.h, input.w
        )));
    }
    Ok(forward(model, &input, opts))
}

/// Folds the batch statistics of a batch-mode pass into the running ones.
pub fn update_running_stats(model: &mut TrainedModel, fwd: &Forward) {
    for (layer, mean, var) in fwd.batch_stats() {
        let wi = model.weighted_index(layer).expect("weighted layer");
        let bn = model.layers[wi].bn.as_mut().expect("batch norm");
        for ch in 0..bn.channels() {
            bn.mean[ch] = BN_MOMENTUM * bn.mean[ch] + (1.0 - BN_MOMENTUM) * mean[ch];
            bn.var[ch] = BN_MOMENTUM * bn.var[ch] + (1.0 - BN_MOMENTUM) * var[ch];
        }
    }
}

/// Holds the model together with optimizer state across epochs.
pub struct Trainer {
    pub model: TrainedModel,
    pub config: TrainConfig,
    pub exec: Execution,
    adam: Adam,
    epoch: usize,
}

impl Trainer {
    pub fn new(model: TrainedModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        model.validate()?;
        let adam = Adam::new(&model, config.learning_rate);
        Ok(Self {
            model,
            config,
            exec: Execution::Auto,
            adam,
            epoch: 0,
        })
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    /// One optimizer step; returns the pre-step loss and the number of
    /// correct predictions in the batch.
    pub fn step(&mut self, images: &[&Image], labels: &[usize]) -> Result<(f64, usize)> {
        let opts = ForwardOptions::train().with_exec(self.exec);
        let fwd = forward_train(&self.model, images, opts)?;
        let (loss, dlogits) = cross_entropy(&fwd.logits, labels, self.model.spec.classes);
        let correct = fwd
            .predictions()
            .iter()
            .zip(labels)
            .filter(|(p, l)| p == l)
            .count();
        let grads = backward(&self.model, &fwd, &dlogits, opts, None);
        update_running_stats(&mut self.model, &fwd);
        self.adam.step(&mut self.model, &grads);
        Ok((loss, correct))
    }

    pub fn train_epoch(&mut self, data: &Dataset) -> Result<EpochMetrics> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(data::derive_seed(self.config.seed, &[self.epoch as u64, 1]));
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(self.config.batch_size) {
            let augmented: Vec<Image>;
            let images: Vec<&Image> = if self.config.augment {
                augmented = crate::par::map_slice(self.exec, chunk, |&i| {
                    let seed = data::derive_seed(self.config.seed, &[self.epoch as u64, 2, i as u64]);
                    data::augment_with_config(&data.images[i], seed, &self.config.augment_config)
                });
                augmented.iter().collect()
            } else {
                chunk.iter().map(|&i| &data.images[i]).collect()
            };
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let (loss, c) = self.step(&images, &labels)?;
            loss_sum += loss * chunk.len() as f64;
            correct += c;
        }
        self.epoch += 1;
        Ok(EpochMetrics {
            epoch: self.epoch,
            loss: loss_sum / data.len() as f64,
            accuracy: correct as f64 / data.len() as f64,
            samples: data.len(),
        })
    }
}

/// Trains a freshly initialized model for `config.epochs` epochs.
pub fn train(spec: &crate::netspec::NetworkSpec, data: &Dataset, config: &TrainConfig) -> Result<(TrainedModel, Vec<EpochMetrics>)> {
    let model = TrainedModel::init(spec, config.seed)?;
    let mut trainer = Trainer::new(model, config.clone())?;
    let mut history = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        let m = trainer.train_epoch(data)?;
        log::info!(
            "epoch {} loss {:.4} train accuracy {:.4}",
            m.epoch,
            m.loss,
            m.accuracy
        );
        history.push(m);
    }
    Ok((trainer.model, history))
}

/// Class predictions of the latent model with running statistics.
pub fn predict(model: &TrainedModel, images: &[Image], batch: usize) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch.max(1)) {
        let refs: Vec<&Image> = chunk.iter().collect();
        out.extend(forward_train(model, &refs, ForwardOptions::inference())?.predictions());
    }
    Ok(out)
}

pub fn evaluate(model: &TrainedModel, data: &Dataset) -> Result<ConfusionMatrix> {
    let preds = predict(model, &data.images, 128)?;
    let mut m = ConfusionMatrix::new(model.spec.classes);
    for (&t, &p) in data.labels.iter().zip(&preds) {
        m.record(t, p);
    }
    Ok(m)
}
