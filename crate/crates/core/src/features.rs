//! Convolutional backbone shared by the counter and the selection space.
//!
//! The backbone is four 3x3/1x1 convolutions with ReLU, overall stride 4.
//! Inputs are cropped to the largest multiple of the stride before the first
//! layer, so the feature map is exactly `floor(h/4) x floor(w/4)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{relu_backward_inplace, relu_inplace, Conv2d, ConvCache, Linear, Module, Param};
use crate::tensor::{Rect, Tensor};

pub const BACKBONE_STRIDE: usize = 4;
pub const MIN_INPUT_SIZE: usize = 16;

/// Image feature map `d x h/4 x w/4`.
pub type FeatureMap = Tensor;

/// A point in an embedding space (exemplar vectors, patch embeddings,
/// generated features, prototypes).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn l2_distance(&self, other: &Embedding) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        self.0.iter().zip(other).map(|(a, b)| a * b).sum()
    }

    /// Elementwise mean; `None` for an empty list.
    pub fn mean<'a>(items: impl IntoIterator<Item = &'a Embedding>) -> Option<Embedding> {
        let mut it = items.into_iter();
        let first = it.next()?;
        let mut acc = first.0.clone();
        let mut n = 1usize;
        for e in it {
            for (a, b) in acc.iter_mut().zip(&e.0) {
                *a += b;
            }
            n += 1;
        }
        for a in acc.iter_mut() {
            *a /= n as f64;
        }
        Some(Embedding(acc))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    /// Channels of the first two convolutions.
    pub hidden: [usize; 2],
    /// Output channel count `d`.
    pub feature_dim: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            hidden: [8, 16],
            feature_dim: 32,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub convs: Vec<Conv2d>,
}

pub struct BackboneCache {
    convs: Vec<ConvCache>,
    outputs: Vec<Tensor>,
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(cfg: &BackboneConfig, rng: &mut R) -> Self {
        let [c1, c2] = cfg.hidden;
        let d = cfg.feature_dim;
        Backbone {
            convs: vec![
                Conv2d::new("backbone.conv1", 3, c1, 3, 1, 1, rng),
                Conv2d::new("backbone.conv2", c1, c2, 3, 2, 1, rng),
                Conv2d::new("backbone.conv3", c2, d, 3, 2, 1, rng),
                Conv2d::new("backbone.reduce", d, d, 1, 1, 0, rng),
            ],
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.convs.last().map(|c| c.out_c).unwrap_or(0)
    }

    /// Spatial size of the feature map for an `h x w` input.
    pub fn output_size(h: usize, w: usize) -> (usize, usize) {
        (h / BACKBONE_STRIDE, w / BACKBONE_STRIDE)
    }

    fn prepare(image: &Tensor) -> Result<Tensor> {
        if image.c != 3 {
            return Err(Error::dim("backbone input channels", 3, image.c));
        }
        if image.h < MIN_INPUT_SIZE || image.w < MIN_INPUT_SIZE {
            return Err(Error::InputTooSmall {
                height: image.h,
                width: image.w,
                min: MIN_INPUT_SIZE,
            });
        }
        let h = image.h - image.h % BACKBONE_STRIDE;
        let w = image.w - image.w % BACKBONE_STRIDE;
        Ok(image.crop_top_left(h, w))
    }

    pub fn forward(&self, image: &Tensor) -> Result<(FeatureMap, BackboneCache)> {
        let mut x = Self::prepare(image)?;
        let mut caches = Vec::with_capacity(self.convs.len());
        let mut outputs = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            let (mut y, cache) = conv.forward(&x);
            relu_inplace(&mut y.data);
            caches.push(cache);
            outputs.push(y.clone());
            x = y;
        }
        Ok((
            x,
            BackboneCache {
                convs: caches,
                outputs,
            },
        ))
    }

    pub fn extract(&self, image: &Tensor) -> Result<FeatureMap> {
        let mut x = Self::prepare(image)?;
        for conv in &self.convs {
            let (mut y, _) = conv.forward(&x);
            relu_inplace(&mut y.data);
            x = y;
        }
        Ok(x)
    }

    /// Backpropagates `d_out` into `grads`, which must hold this module's
    /// gradient buffers in [`Module::params`] order.
    pub fn backward(&self, cache: &BackboneCache, d_out: &Tensor, grads: &mut [Vec<f64>]) {
        let mut d = d_out.clone();
        for i in (0..self.convs.len()).rev() {
            relu_backward_inplace(&cache.outputs[i].data, &mut d.data);
            let (gw, rest) = grads[2 * i..].split_at_mut(1);
            let dx = self.convs[i].backward(&cache.convs[i], &d, &mut gw[0], &mut rest[0], i > 0);
            match dx {
                Some(dx) => d = dx,
                None => break,
            }
        }
    }
}

impl Module for Backbone {
    fn params(&self) -> Vec<&Param> {
        self.convs.iter().flat_map(|c| [&c.weight, &c.bias]).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.convs
            .iter_mut()
            .flat_map(|c| [&mut c.weight, &mut c.bias])
            .collect()
    }
}

pub fn extract_image_features(image: &Tensor, backbone: &Backbone) -> Result<FeatureMap> {
    backbone.extract(image)
}

/// Crops `rect` from `image` and resizes it to `size x size`.
pub fn prepare_patch(image: &Tensor, rect: Rect, size: usize) -> Result<Tensor> {
    if !rect.fits(image.h, image.w) {
        return Err(Error::InvalidArgument(format!(
            "rect {rect} outside {}x{} image",
            image.h, image.w
        )));
    }
    Ok(image.crop(rect).resize_bilinear(size, size))
}

/// Exemplar vector: global average pooling of the patch features followed by
/// the linear exemplar projection (output dimension `d`).
pub fn pool_exemplar(patch: &Tensor, backbone: &Backbone, projection: &Linear) -> Result<Embedding> {
    let pooled = backbone.extract(patch)?.spatial_mean();
    Ok(Embedding(projection.forward(&pooled)))
}

/// Frozen selection-space embedder: backbone features of a patch resized to
/// `patch_size`, globally average pooled.
#[derive(Clone, Debug)]
pub struct Embedder {
    pub backbone: Backbone,
    pub patch_size: usize,
}

impl Embedder {
    pub fn new(backbone: Backbone, patch_size: usize) -> Self {
        Embedder {
            backbone,
            patch_size,
        }
    }

    pub fn dim(&self) -> usize {
        self.backbone.feature_dim()
    }

    /// Embeds an arbitrary patch, resizing it to the embedder's patch size.
    pub fn embed_patch(&self, patch: &Tensor) -> Result<Embedding> {
        let resized = patch.resize_bilinear(self.patch_size, self.patch_size);
        Ok(Embedding(self.backbone.extract(&resized)?.spatial_mean()))
    }

    pub fn embed_rect(&self, image: &Tensor, rect: Rect) -> Result<Embedding> {
        let patch = prepare_patch(image, rect, self.patch_size)?;
        Ok(Embedding(self.backbone.extract(&patch)?.spatial_mean()))
    }
}
