//! Grad-CAM heatmaps over the latent network.
//!
//! The target tensor is the output of the last max-pool (5x5 for the
//! built-in networks). Gradients reach it through the same clipped
//! straight-through estimator used in training.

use std::path::Path;

use serde::Serialize;

use crate::data::Image;
use crate::error::{Error, Result};
use crate::train::{backward, forward_train, Activation, ForwardOptions, TrainedModel};

pub const DEFAULT_ALPHA: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Heatmap {
    pub class_id: usize,
    pub raw_height: usize,
    pub raw_width: usize,
    /// Rectified map at the target resolution, row-major.
    pub raw: Vec<f64>,
    pub height: usize,
    pub width: usize,
    /// Bilinear upsampling of `raw` to the image size.
    pub upsampled: Vec<f64>,
    /// `(min, max)` of `upsampled`.
    pub range: (f64, f64),
    /// Logits of the forward pass that produced the map.
    pub logits: Vec<f64>,
}

impl Heatmap {
    /// Upsampled map scaled to a maximum of 1 (all zeros stay zero).
    pub fn normalized(&self) -> Vec<f64> {
        let max = self.range.1;
        if max > 0.0 {
            self.upsampled.iter().map(|v| v / max).collect()
        } else {
            vec![0.0; self.upsampled.len()]
        }
    }

    /// Row and column of the largest raw value, first in row-major order.
    pub fn raw_argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.raw.iter().enumerate() {
            if v > self.raw[best] {
                best = i;
            }
        }
        (best / self.raw_width, best % self.raw_width)
    }

    /// Share of the upsampled mass inside `[x0, x1) x [y0, y1)`; zero for an
    /// empty map.
    pub fn mass_fraction(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> f64 {
        let total: f64 = self.upsampled.iter().sum();
        if total <= 0.0 {
            return 0.0;
        }
        let mut inside = 0.0;
        for y in y0..y1.min(self.height) {
            for x in x0..x1.min(self.width) {
                inside += self.upsampled[y * self.width + x];
            }
        }
        inside / total
    }
}

/// `ReLU(sum_c mean(grad_c) * act_c)` over an `h x w x c` tensor.
pub fn class_activation_map(act: &[f64], grad: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    assert_eq!(act.len(), h * w * c);
    assert_eq!(grad.len(), h * w * c);
    let mut weights = vec![0.0; c];
    for px in grad.chunks(c) {
        for (wc, g) in weights.iter_mut().zip(px) {
            *wc += g;
        }
    }
    let n = (h * w) as f64;
    weights.iter_mut().for_each(|v| *v /= n);
    act.chunks(c)
        .map(|px| px.iter().zip(&weights).map(|(a, wc)| a * wc).sum::<f64>().max(0.0))
        .collect()
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn bilinear_upsample(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    assert_eq!(src.len(), h * w);
    let coord = |o: usize, out: usize, inp: usize| {
        let s = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(inp - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = Vec::with_capacity(oh * ow);
    for oy in 0..oh {
        let (y0, y1, fy) = coord(oy, oh, h);
        for ox in 0..ow {
            let (x0, x1, fx) = coord(ox, ow, w);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

/// Activations and class-logit gradients at the target layer.
pub struct TargetTrace {
    pub layer: usize,
    pub activation: Activation,
    pub gradient: Activation,
    pub logits: Vec<f64>,
}

pub fn target_layer(model: &TrainedModel) -> Result<usize> {
    model
        .spec
        .last_pool()
        .ok_or_else(|| Error::InvalidNetwork("no pooling layer to explain".into()))
}

pub fn trace_target(model: &TrainedModel, image: &Image, class_id: usize, opts: ForwardOptions) -> Result<TargetTrace> {
    if class_id >= model.spec.classes {
        return Err(Error::ClassOutOfRange(class_id));
    }
    let layer = target_layer(model)?;
    let fwd = forward_train(model, &[image], opts)?;
    let mut dlogits = vec![0.0; model.spec.classes];
    dlogits[class_id] = 1.0;
    let grads = backward(model, &fwd, &dlogits, opts, Some(layer));
    Ok(TargetTrace {
        layer,
        activation: fwd.output(layer).clone(),
        gradient: grads.output_grad.expect("requested target gradient"),
        logits: fwd.logits_of(0).to_vec(),
    })
}

/// Grad-CAM with sign binarization and running batch-norm statistics.
pub fn grad_cam(model: &TrainedModel, image: &Image, class_id: usize) -> Result<Heatmap> {
    grad_cam_with(model, image, class_id, ForwardOptions::inference())
}

pub fn grad_cam_with(model: &TrainedModel, image: &Image, class_id: usize, opts: ForwardOptions) -> Result<Heatmap> {
    let t = trace_target(model, image, class_id, opts)?;
    let a = &t.activation;
    let raw = class_activation_map(&a.data, &t.gradient.data, a.h, a.w, a.c);
    let (height, width) = (image.height, image.width);
    let upsampled = bilinear_upsample(&raw, a.h, a.w, height, width);
    let range = upsampled
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    Ok(Heatmap {
        class_id,
        raw_height: a.h,
        raw_width: a.w,
        raw,
        height,
        width,
        upsampled,
        range,
        logits: t.logits,
    })
}

/// Jet colormap: dark blue at 0 through cyan, yellow to dark red at 1.
pub fn jet(v: f64) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    let ch = |center: f64| (1.5 - (4.0 * v - center).abs()).clamp(0.0, 1.0);
    [ch(3.0), ch(2.0), ch(1.0)].map(|c| (c * 255.0).round() as u8)
}

/// `(1 - alpha) * image + alpha * jet(normalized heatmap)`.
pub fn overlay_image(heatmap: &Heatmap, image: &Image, alpha: f64) -> Result<Image> {
    if heatmap.width != image.width || heatmap.height != image.height {
        return Err(Error::Shape(format!(
            "heatmap is {}x{}, image is {}x{}",
            heatmap.width, heatmap.height, image.width, image.height
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
    }
    let norm = heatmap.normalized();
    let mut data = Vec::with_capacity(image.data.len());
    for (px, &v) in image.data.chunks(3).zip(&norm) {
        let color = jet(v);
        for c in 0..3 {
            let mixed = (1.0 - alpha) * px[c] as f64 + alpha * color[c] as f64;
            data.push(mixed.round().clamp(0.0, 255.0) as u8);
        }
    }
    Image::new(image.width, image.height, data)
}

/// Writes the blended overlay as a PNG.
pub fn overlay(heatmap: &Heatmap, image: &Image, alpha: f64, path: &Path) -> Result<()> {
    overlay_image(heatmap, image, alpha)?.save_png(path)
}
