//! Small convolutional feature extractor with a total stride of 16.
//!
//! Layout: a 3x3 stride-2 stem, then four stages of two 3x3 conv+ReLU layers
//! with stage strides `[2, 2, 2, 1]`. The last stage keeps stride 1 so the
//! output map is 1/16 of the input rather than 1/32.

use crate::error::{Error, Result};
use crate::nn::{relu_backward, relu_forward, Conv2d, ConvGrads, Init};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const TOTAL_STRIDE: usize = 16;
pub const STAGE_STRIDES: [usize; 4] = [2, 2, 2, 1];
pub const NUM_LAYERS: usize = 9;

/// Stride of layer `k` (0 is the stem; stages contribute two layers each).
pub fn layer_stride(k: usize) -> usize {
    match k {
        0 => 2,
        k if k % 2 == 1 => STAGE_STRIDES[(k - 1) / 2],
        _ => 1,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub stage_channels: [usize; 4],
    pub input_height: usize,
    pub input_width: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            in_channels: 3,
            stage_channels: [16, 32, 64, 64],
            input_height: 128,
            input_width: 64,
        }
    }
}

impl BackboneConfig {
    /// 384x128 input giving a 24x8 feature map.
    pub fn full_scale() -> Self {
        BackboneConfig {
            input_height: 384,
            input_width: 128,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.stage_channels.contains(&0) {
            return Err(Error::invalid("channel counts must be positive"));
        }
        for (name, v) in [("height", self.input_height), ("width", self.input_width)] {
            if v == 0 || v % TOTAL_STRIDE != 0 {
                return Err(Error::invalid(format!(
                    "input {name} {v} must be a positive multiple of {TOTAL_STRIDE}"
                )));
            }
        }
        Ok(())
    }

    /// (height, width) of the output feature map.
    pub fn feature_hw(&self) -> (usize, usize) {
        (
            self.input_height / TOTAL_STRIDE,
            self.input_width / TOTAL_STRIDE,
        )
    }

    pub fn out_channels(&self) -> usize {
        self.stage_channels[3]
    }
}

/// A chain of conv layers, each followed by ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub layers: Vec<Conv2d>,
}

/// Per-layer inputs and outputs saved by the forward pass.
#[derive(Debug, Clone)]
pub struct BackboneCache {
    /// `activations[k]` is the input of layer k; the last entry is the output map.
    pub activations: Vec<Tensor>,
}

impl BackboneCache {
    pub fn output(&self) -> &Tensor {
        self.activations.last().expect("cache holds at least the input")
    }
}

impl Backbone {
    pub fn build(cfg: &BackboneConfig, rng: &mut Rng) -> Result<Self> {
        Backbone::build_with(cfg, Init::default(), rng)
    }

    pub fn build_with(cfg: &BackboneConfig, init: Init, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.stage_channels;
        let mut layers = Vec::with_capacity(NUM_LAYERS);
        let mut prev = cfg.in_channels;
        for k in 0..NUM_LAYERS {
            let out = c[k.saturating_sub(1) / 2];
            let a = init.bound(prev * 9, true);
            layers.push(Conv2d::init_bounded(rng, prev, out, 3, layer_stride(k), 1, a)?);
            prev = out;
        }
        Ok(Backbone { layers })
    }

    pub fn from_layers(layers: Vec<Conv2d>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("backbone needs at least one layer"));
        }
        for pair in layers.windows(2) {
            if pair[0].out_channels() != pair[1].in_channels() {
                return Err(Error::shape(format!(
                    "layer chain mismatch: {} -> {}",
                    pair[0].out_channels(),
                    pair[1].in_channels()
                )));
            }
        }
        Ok(Backbone { layers })
    }

    pub fn in_channels(&self) -> usize {
        self.layers[0].in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().expect("non-empty").out_channels()
    }

    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let mut x = self.layers[0].forward(images).map(|y| relu_forward(&y))?;
        for layer in &self.layers[1..] {
            x = relu_forward(&layer.forward(&x)?);
        }
        Ok(x)
    }

    pub fn forward_cached(&self, images: &Tensor) -> Result<BackboneCache> {
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(images.clone());
        for layer in &self.layers {
            let y = relu_forward(&layer.forward(activations.last().expect("non-empty"))?);
            activations.push(y);
        }
        Ok(BackboneCache { activations })
    }

    /// Parameter gradients for upstream `grad_f`, recomputing the forward pass.
    pub fn backward(&self, images: &Tensor, grad_f: &Tensor) -> Result<Vec<ConvGrads>> {
        let cache = self.forward_cached(images)?;
        self.backward_cached(&cache, grad_f)
    }

    pub fn backward_cached(&self, cache: &BackboneCache, grad_f: &Tensor) -> Result<Vec<ConvGrads>> {
        if grad_f.shape() != cache.output().shape() {
            return Err(Error::shape(format!(
                "backbone grad {:?}, expected {:?}",
                grad_f.shape(),
                cache.output().shape()
            )));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut upstream = grad_f.clone();
        for (k, layer) in self.layers.iter().enumerate().rev() {
            // post-ReLU output > 0 exactly where the pre-activation was > 0
            let g = relu_backward(&cache.activations[k + 1], &upstream)?;
            if k == 0 {
                grads.push(layer.backward_params(&cache.activations[0], &g)?);
            } else {
                let (gx, gp) = layer.backward(&cache.activations[k], &g)?;
                grads.push(gp);
                upstream = gx;
            }
        }
        grads.reverse();
        Ok(grads)
    }
}
