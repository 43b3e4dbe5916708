//! Exemplar-based base counting model.
//!
//! The model correlates pooled exemplar vectors with the image feature map,
//! concatenates the averaged similarity map to the features and decodes a
//! full-resolution density map whose sum is the count.

use log::info;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Archive;
use crate::error::{ensure_finite, Error, Result};
use crate::features::{
    prepare_patch, Backbone, BackboneCache, BackboneConfig, Embedder, Embedding, FeatureMap,
    BACKBONE_STRIDE,
};
use crate::metrics::{self, CountPair};
use crate::nn::{
    add_grads, relu_backward_inplace, relu_inplace, scale_grads, Adam, Conv2d, ConvCache,
    ConvTranspose2x2, Linear, Module, Param, UpCache,
};
use crate::rng::substream;
use crate::synth::{sample_boxes, AnnotatedImage};
use crate::tensor::{Grid, Rect, Tensor};

pub const CHECKPOINT_VERSION: &str = "zsc-counter/1";

/// `h_I x w_I` correlation of an exemplar vector with the feature map.
pub type SimilarityMap = Grid;
/// Non-negative per-pixel object density at query-image resolution.
pub type DensityMap = Grid;

/// `S[i,j] = <F[:, i, j], b>`.
pub fn similarity_map(features: &FeatureMap, exemplar: &Embedding) -> Result<SimilarityMap> {
    if exemplar.dim() != features.c {
        return Err(Error::dim("exemplar vs feature channels", features.c, exemplar.dim()));
    }
    let n = features.plane_len();
    let mut s = vec![0.0; n];
    for (c, &b) in exemplar.0.iter().enumerate() {
        for (acc, &f) in s.iter_mut().zip(features.plane(c)) {
            *acc += f * b;
        }
    }
    Grid::from_vec(features.h, features.w, s)
}

pub fn average_similarity(maps: &[SimilarityMap]) -> Result<SimilarityMap> {
    let first = maps
        .first()
        .ok_or_else(|| Error::InvalidArgument("no similarity maps to average".into()))?;
    let mut acc = Grid::zeros(first.h, first.w);
    for m in maps {
        if !m.same_shape(first) {
            return Err(Error::dim("similarity map size", first.data.len(), m.data.len()));
        }
        for (a, v) in acc.data.iter_mut().zip(&m.data) {
            *a += v;
        }
    }
    let n = maps.len() as f64;
    for a in acc.data.iter_mut() {
        *a /= n;
    }
    Ok(acc)
}

pub fn count_from_density(density: &DensityMap) -> f64 {
    density.data.iter().sum()
}

/// Squared L2 distance between density maps.
pub fn counting_loss(pred: &DensityMap, gt: &DensityMap) -> Result<f64> {
    if !pred.same_shape(gt) {
        return Err(Error::dim("density map size", gt.data.len(), pred.data.len()));
    }
    Ok(pred.data.iter().zip(&gt.data).map(|(p, g)| (p - g) * (p - g)).sum())
}

/// Gradient of [`counting_loss`] with respect to `pred`.
pub fn counting_loss_grad(pred: &DensityMap, gt: &DensityMap) -> Result<Grid> {
    if !pred.same_shape(gt) {
        return Err(Error::dim("density map size", gt.data.len(), pred.data.len()));
    }
    let data = pred.data.iter().zip(&gt.data).map(|(p, g)| 2.0 * (p - g)).collect();
    Grid::from_vec(pred.h, pred.w, data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CounterConfig {
    pub backbone: BackboneConfig,
    /// Channels after the input convolution, the first upsampling stage and
    /// the mid convolution.
    pub decoder_channels: [usize; 3],
    pub exemplar_size: usize,
    pub image_height: usize,
    /// The decoder regresses `density_scale * density`; predictions are
    /// divided back. Unscaled targets (peaks around 0.01) let the final
    /// ReLU collapse to an all-zero map.
    pub density_scale: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_exemplars: usize,
    /// Validation images scored per epoch (0 = all).
    pub val_images: usize,
    /// Derived from the pipeline root seed; not read from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for CounterConfig {
    fn default() -> Self {
        CounterConfig {
            backbone: BackboneConfig::default(),
            decoder_channels: [16, 16, 8],
            exemplar_size: 32,
            image_height: 96,
            density_scale: 100.0,
            epochs: 30,
            batch_size: 8,
            learning_rate: 1e-3,
            max_exemplars: 3,
            val_images: 0,
            seed: 0,
        }
    }
}

/// Density decoder: conv3x3 -> up2x -> conv3x3 -> up2x -> conv1x1, ReLU
/// between stages and a final ReLU clamp so densities are non-negative.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub conv_in: Conv2d,
    pub up1: ConvTranspose2x2,
    pub conv_mid: Conv2d,
    pub up2: ConvTranspose2x2,
    pub head: Conv2d,
}

pub struct DecoderCache {
    c_in: ConvCache,
    a_in: Tensor,
    c_up1: UpCache,
    a_up1: Tensor,
    c_mid: ConvCache,
    a_mid: Tensor,
    c_up2: UpCache,
    a_up2: Tensor,
    c_head: ConvCache,
    out: Tensor,
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(in_c: usize, ch: [usize; 3], rng: &mut R) -> Self {
        let mut head = Conv2d::new("decoder.head", ch[2], 1, 1, 1, 0, rng);
        head.bias.data[0] = 0.01;
        Decoder {
            conv_in: Conv2d::new("decoder.conv_in", in_c, ch[0], 3, 1, 1, rng),
            up1: ConvTranspose2x2::new("decoder.up1", ch[0], ch[1], rng),
            conv_mid: Conv2d::new("decoder.conv_mid", ch[1], ch[2], 3, 1, 1, rng),
            up2: ConvTranspose2x2::new("decoder.up2", ch[2], ch[2], rng),
            head,
        }
    }

    pub fn forward(&self, x: &Tensor) -> (Tensor, DecoderCache) {
        let (mut a_in, c_in) = self.conv_in.forward(x);
        relu_inplace(&mut a_in.data);
        let (mut a_up1, c_up1) = self.up1.forward(&a_in);
        relu_inplace(&mut a_up1.data);
        let (mut a_mid, c_mid) = self.conv_mid.forward(&a_up1);
        relu_inplace(&mut a_mid.data);
        let (mut a_up2, c_up2) = self.up2.forward(&a_mid);
        relu_inplace(&mut a_up2.data);
        let (mut out, c_head) = self.head.forward(&a_up2);
        relu_inplace(&mut out.data);
        let cache = DecoderCache {
            c_in,
            a_in,
            c_up1,
            a_up1,
            c_mid,
            a_mid,
            c_up2,
            a_up2,
            c_head,
            out: out.clone(),
        };
        (out, cache)
    }

    /// `grads` holds this decoder's 10 buffers in [`Module::params`] order.
    pub fn backward(&self, cache: &DecoderCache, d_out: &Tensor, grads: &mut [Vec<f64>]) -> Tensor {
        let mut d = d_out.clone();
        relu_backward_inplace(&cache.out.data, &mut d.data);
        let [g0, g1, g2, g3, g4, g5, g6, g7, g8, g9] = grads else {
            panic!("decoder expects 10 gradient buffers");
        };
        let mut d = self.head.backward(&cache.c_head, &d, g8, g9, true).expect("dx");
        relu_backward_inplace(&cache.a_up2.data, &mut d.data);
        let mut d = self.up2.backward(&cache.c_up2, &d, g6, g7);
        relu_backward_inplace(&cache.a_mid.data, &mut d.data);
        let mut d = self.conv_mid.backward(&cache.c_mid, &d, g4, g5, true).expect("dx");
        relu_backward_inplace(&cache.a_up1.data, &mut d.data);
        let mut d = self.up1.backward(&cache.c_up1, &d, g2, g3);
        relu_backward_inplace(&cache.a_in.data, &mut d.data);
        self.conv_in.backward(&cache.c_in, &d, g0, g1, true).expect("dx")
    }
}

impl Module for Decoder {
    fn params(&self) -> Vec<&Param> {
        vec![
            &self.conv_in.weight,
            &self.conv_in.bias,
            &self.up1.weight,
            &self.up1.bias,
            &self.conv_mid.weight,
            &self.conv_mid.bias,
            &self.up2.weight,
            &self.up2.bias,
            &self.head.weight,
            &self.head.bias,
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.conv_in.weight,
            &mut self.conv_in.bias,
            &mut self.up1.weight,
            &mut self.up1.bias,
            &mut self.conv_mid.weight,
            &mut self.conv_mid.bias,
            &mut self.up2.weight,
            &mut self.up2.bias,
            &mut self.head.weight,
            &mut self.head.bias,
        ]
    }
}

const BACKBONE_PARAMS: usize = 8;
const PROJECTION_PARAMS: usize = 2;

/// Backbone, exemplar projection and density decoder.
#[derive(Clone, Debug)]
pub struct CounterModel {
    pub config: CounterConfig,
    pub backbone: Backbone,
    pub projection: Linear,
    pub decoder: Decoder,
    /// Classes seen during training (used to enforce zero-shot evaluation).
    pub train_classes: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct CounterSnapshot {
    config: CounterConfig,
    train_classes: Vec<String>,
}

impl Module for CounterModel {
    fn params(&self) -> Vec<&Param> {
        let mut p = self.backbone.params();
        p.push(&self.projection.weight);
        p.push(&self.projection.bias);
        p.extend(self.decoder.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.backbone.params_mut();
        p.push(&mut self.projection.weight);
        p.push(&mut self.projection.bias);
        p.extend(self.decoder.params_mut());
        p
    }
}

/// Result of a differentiable forward pass, kept for backward.
struct ForwardTrace {
    features: FeatureMap,
    image_cache: BackboneCache,
    exemplars: Vec<ExemplarTrace>,
    decoder_cache: DecoderCache,
    density: DensityMap,
}

struct ExemplarTrace {
    cache: BackboneCache,
    feat_hw: (usize, usize),
    pooled: Vec<f64>,
    vector: Vec<f64>,
}

impl CounterModel {
    pub fn new(config: CounterConfig) -> Self {
        let mut rng = substream(config.seed, "counter/init");
        let backbone = Backbone::new(&config.backbone, &mut rng);
        let d = config.backbone.feature_dim;
        let projection = Linear::new("exemplar.proj", d, d, &mut rng);
        let decoder = Decoder::new(d + 1, config.decoder_channels, &mut rng);
        CounterModel {
            config,
            backbone,
            projection,
            decoder,
            train_classes: Vec::new(),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.backbone.feature_dim()
    }

    /// Frozen selection-space embedder sharing this model's backbone.
    pub fn embedder(&self) -> Embedder {
        Embedder::new(self.backbone.clone(), self.config.exemplar_size)
    }

    pub fn image_features(&self, image: &Tensor) -> Result<FeatureMap> {
        self.backbone.extract(image)
    }

    /// Exemplar vector `b` for the patch `rect` of `image`.
    pub fn exemplar_vector(&self, image: &Tensor, rect: Rect) -> Result<Embedding> {
        let patch = prepare_patch(image, rect, self.config.exemplar_size)?;
        crate::features::pool_exemplar(&patch, &self.backbone, &self.projection)
    }

    /// Decodes a density map of `out_h x out_w` (the query image size).
    /// Rows/columns beyond the last full stride cell are zero.
    pub fn predict_density(
        &self,
        features: &FeatureMap,
        similarity: &SimilarityMap,
        out_h: usize,
        out_w: usize,
    ) -> Result<DensityMap> {
        if similarity.h != features.h || similarity.w != features.w {
            return Err(Error::dim("similarity vs feature size", features.plane_len(), similarity.data.len()));
        }
        if features.h * BACKBONE_STRIDE > out_h || features.w * BACKBONE_STRIDE > out_w {
            return Err(Error::InvalidArgument("output smaller than decoded map".into()));
        }
        let input = features.concat_channels(&Tensor {
            c: 1,
            h: similarity.h,
            w: similarity.w,
            data: similarity.data.clone(),
        })?;
        let (out, _) = self.decoder.forward(&input);
        let density = pad_density(&out, out_h, out_w, self.config.density_scale);
        ensure_finite(&density.data, "counter", "predict_density")?;
        Ok(density)
    }

    /// Full inference path; the count equals the sum of the returned map.
    pub fn count_with_exemplars(&self, image: &Tensor, exemplars: &[Rect]) -> Result<(f64, DensityMap)> {
        let features = self.image_features(image)?;
        let maps = exemplars
            .iter()
            .map(|&r| similarity_map(&features, &self.exemplar_vector(image, r)?))
            .collect::<Result<Vec<_>>>()?;
        let sim = average_similarity(&maps)?;
        let density = self.predict_density(&features, &sim, image.h, image.w)?;
        Ok((count_from_density(&density), density))
    }

    fn forward_trace(&self, image: &Tensor, exemplars: &[Rect]) -> Result<ForwardTrace> {
        if exemplars.is_empty() {
            return Err(Error::InvalidArgument("at least one exemplar required".into()));
        }
        let (features, image_cache) = self.backbone.forward(image)?;
        let mut traces = Vec::with_capacity(exemplars.len());
        let mut sim = Grid::zeros(features.h, features.w);
        for &r in exemplars {
            let patch = prepare_patch(image, r, self.config.exemplar_size)?;
            let (fe, cache) = self.backbone.forward(&patch)?;
            let pooled = fe.spatial_mean();
            let vector = self.projection.forward(&pooled);
            let s = similarity_map(&features, &Embedding(vector.clone()))?;
            for (a, v) in sim.data.iter_mut().zip(&s.data) {
                *a += v / exemplars.len() as f64;
            }
            traces.push(ExemplarTrace {
                cache,
                feat_hw: (fe.h, fe.w),
                pooled,
                vector,
            });
        }
        let input = features.concat_channels(&sim.clone().into_tensor())?;
        let (out, decoder_cache) = self.decoder.forward(&input);
        let density = pad_density(&out, image.h, image.w, self.config.density_scale);
        Ok(ForwardTrace {
            features,
            image_cache,
            exemplars: traces,
            decoder_cache,
            density,
        })
    }

    fn backward_trace(&self, trace: &ForwardTrace, d_density: &Grid) -> Vec<Vec<f64>> {
        let mut grads = self.zero_grads();
        let f = &trace.features;
        let (dh, dw) = (f.h * BACKBONE_STRIDE, f.w * BACKBONE_STRIDE);
        let inv = 1.0 / self.config.density_scale;
        let mut d_out = Tensor::zeros(1, dh, dw);
        for y in 0..dh {
            let src = &d_density.data[y * d_density.w..y * d_density.w + dw];
            for (d, g) in d_out.data[y * dw..(y + 1) * dw].iter_mut().zip(src) {
                *d = g * inv;
            }
        }
        let (g_backbone, rest) = grads.split_at_mut(BACKBONE_PARAMS);
        let (g_proj, g_dec) = rest.split_at_mut(PROJECTION_PARAMS);
        let d_input = self.decoder.backward(&trace.decoder_cache, &d_out, g_dec);

        let d = f.c;
        let n = f.plane_len();
        let d_sim = &d_input.data[d * n..(d + 1) * n];
        let mut d_feat = Tensor {
            c: d,
            h: f.h,
            w: f.w,
            data: d_input.data[..d * n].to_vec(),
        };
        let k = trace.exemplars.len() as f64;
        let mut mean_b = vec![0.0; d];
        for ex in &trace.exemplars {
            for (m, v) in mean_b.iter_mut().zip(&ex.vector) {
                *m += v / k;
            }
        }
        for c in 0..d {
            let plane = &mut d_feat.data[c * n..(c + 1) * n];
            for (g, ds) in plane.iter_mut().zip(d_sim) {
                *g += ds * mean_b[c];
            }
        }
        for ex in &trace.exemplars {
            let db: Vec<f64> = (0..d)
                .map(|c| f.plane(c).iter().zip(d_sim).map(|(a, b)| a * b).sum::<f64>() / k)
                .collect();
            let (gw, gb) = g_proj.split_at_mut(1);
            let d_pooled = self.projection.backward(&ex.pooled, &db, &mut gw[0], &mut gb[0]);
            let (eh, ew) = ex.feat_hw;
            let area = (eh * ew) as f64;
            let mut d_fe = Tensor::zeros(d, eh, ew);
            for c in 0..d {
                d_fe.plane_mut(c).fill(d_pooled[c] / area);
            }
            self.backbone.backward(&ex.cache, &d_fe, g_backbone);
        }
        self.backbone.backward(&trace.image_cache, &d_feat, g_backbone);
        grads
    }

    /// Training objective: the counting loss between the scaled maps,
    /// `density_scale^2 * counting_loss(D, D*)`.
    pub fn training_loss(&self, density: &DensityMap, gt: &DensityMap) -> Result<f64> {
        Ok(self.config.density_scale.powi(2) * counting_loss(density, gt)?)
    }

    /// [`Self::training_loss`] for one example and its parameter gradients.
    pub fn loss_and_grads(&self, image: &Tensor, exemplars: &[Rect], gt: &DensityMap) -> Result<(f64, Vec<Vec<f64>>)> {
        let trace = self.forward_trace(image, exemplars)?;
        let loss = self.training_loss(&trace.density, gt)?;
        let mut d = counting_loss_grad(&trace.density, gt)?;
        let s2 = self.config.density_scale.powi(2);
        d.data.iter_mut().for_each(|v| *v *= s2);
        Ok((loss, self.backward_trace(&trace, &d)))
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let snapshot = CounterSnapshot {
            config: self.config.clone(),
            train_classes: self.train_classes.clone(),
        };
        Ok(Archive {
            version: CHECKPOINT_VERSION.into(),
            config: toml::to_string(&snapshot).map_err(|e| Error::Config(e.to_string()))?,
            arrays: self.params().into_iter().cloned().collect(),
        })
    }

    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let text = archive.expect_version(CHECKPOINT_VERSION)?;
        let snapshot: CounterSnapshot =
            toml::from_str(text).map_err(|e| Error::format("counter config", e.to_string()))?;
        let mut model = CounterModel::new(snapshot.config);
        model.train_classes = snapshot.train_classes;
        model.load_params(&archive.arrays)?;
        Ok(model)
    }
}

fn pad_density(out: &Tensor, h: usize, w: usize, scale: f64) -> Grid {
    let mut g = Grid::zeros(h, w);
    for y in 0..out.h.min(h) {
        let row = &out.data[y * out.w..y * out.w + out.w.min(w)];
        for (d, v) in g.data[y * w..y * w + row.len()].iter_mut().zip(row) {
            *d = v / scale;
        }
    }
    g
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mae: Option<f64>,
}

/// Resizes an annotated image to `height` (aspect preserved); the density map
/// is resampled and rescaled to keep its mass, boxes are scaled.
pub fn resize_annotated(sample: &AnnotatedImage, height: usize) -> AnnotatedImage {
    if sample.image.h == height {
        return sample.clone();
    }
    let image = sample.image.resize_to_height(height);
    let sy = image.h as f64 / sample.image.h as f64;
    let sx = image.w as f64 / sample.image.w as f64;
    let mass = sample.density.sum();
    let mut density = Grid {
        h: image.h,
        w: image.w,
        data: sample
            .density
            .clone()
            .into_tensor()
            .resize_bilinear(image.h, image.w)
            .data,
    };
    let new_mass = density.sum();
    if new_mass > 0.0 {
        for v in density.data.iter_mut() {
            *v *= mass / new_mass;
        }
    }
    let boxes = sample
        .boxes
        .iter()
        .filter_map(|b| {
            let x0 = (b.x0 as f64 * sx).floor() as usize;
            let y0 = (b.y0 as f64 * sy).floor() as usize;
            let x1 = ((b.x1 as f64 * sx).ceil() as usize).min(image.w);
            let y1 = ((b.y1 as f64 * sy).ceil() as usize).min(image.h);
            Rect::new(x0, y0, x1, y1).ok()
        })
        .collect();
    AnnotatedImage {
        image,
        density,
        boxes,
        ..sample.clone()
    }
}

/// Validation MAE using the first `max_exemplars` ground-truth boxes.
pub fn exemplar_mae(model: &CounterModel, samples: &[AnnotatedImage]) -> Result<f64> {
    let k = model.config.max_exemplars;
    let pairs = samples
        .par_iter()
        .filter(|s| !s.boxes.is_empty())
        .map(|s| {
            let ex: Vec<Rect> = s.boxes.iter().take(k).copied().collect();
            let (count, _) = model.count_with_exemplars(&s.image, &ex)?;
            Ok(CountPair::new(s.count as f64, count))
        })
        .collect::<Result<Vec<_>>>()?;
    metrics::mae(&pairs)
}

/// Trains the counter with ground-truth exemplars. Loss is summed over
/// pixels and averaged over the batch; each example uses 1..=max_exemplars
/// randomly chosen boxes.
pub fn train_counter(
    train: &[AnnotatedImage],
    val: &[AnnotatedImage],
    config: &CounterConfig,
) -> Result<(CounterModel, Vec<EpochLog>)> {
    let train: Vec<AnnotatedImage> = train
        .iter()
        .filter(|s| !s.boxes.is_empty())
        .map(|s| resize_annotated(s, config.image_height))
        .collect();
    if train.is_empty() {
        return Err(Error::InvalidArgument("no annotated training images".into()));
    }
    let mut val: Vec<AnnotatedImage> = val.iter().map(|s| resize_annotated(s, config.image_height)).collect();
    if config.val_images > 0 {
        val.truncate(config.val_images);
    }
    let mut model = CounterModel::new(config.clone());
    let mut classes: Vec<String> = train.iter().map(|s| s.class_name.clone()).collect();
    classes.sort();
    classes.dedup();
    model.train_classes = classes;

    let mut opt = Adam::new(config.learning_rate, &model.params());
    let mut rng = substream(config.seed, "counter/train");
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size.max(1)) {
            let jobs: Vec<(usize, Vec<Rect>)> = batch
                .iter()
                .map(|&i| {
                    let k = rng.random_range(1..=config.max_exemplars.max(1));
                    (i, sample_boxes(&train[i].boxes, k, &mut rng))
                })
                .collect();
            let results = jobs
                .par_iter()
                .map(|(i, ex)| model.loss_and_grads(&train[*i].image, ex, &train[*i].density))
                .collect::<Result<Vec<_>>>()?;
            let mut grads = model.zero_grads();
            let mut batch_loss = 0.0;
            for (l, g) in &results {
                batch_loss += l;
                add_grads(&mut grads, g);
            }
            let scale = 1.0 / batch.len() as f64;
            scale_grads(&mut grads, scale);
            if !batch_loss.is_finite() {
                return Err(Error::Numerical {
                    module: "counter",
                    op: "train_counter",
                });
            }
            epoch_loss += batch_loss;
            opt.step(model.params_mut(), &grads);
        }
        let train_loss = epoch_loss / train.len() as f64;
        let val_mae = if val.is_empty() {
            None
        } else {
            Some(exemplar_mae(&model, &val)?)
        };
        info!(
            "counter epoch {}/{}: train_loss={:.5} val_mae={}",
            epoch + 1,
            config.epochs,
            train_loss,
            val_mae.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into())
        );
        log.push(EpochLog {
            epoch: epoch + 1,
            train_loss,
            val_mae,
        });
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> CounterConfig {
        CounterConfig {
            backbone: BackboneConfig {
                hidden: [3, 4],
                feature_dim: 5,
            },
            decoder_channels: [4, 3, 3],
            exemplar_size: 16,
            ..CounterConfig::default()
        }
    }

    fn random_image(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = substream(seed, "img");
        Tensor::from_vec(3, h, w, (0..3 * h * w).map(|_| rng.random()).collect()).unwrap()
    }

    #[test]
    fn similarity_examples() {
        let f = Tensor::from_vec(2, 1, 2, vec![1.0, 0.5, 2.0, -1.0]).unwrap();
        let s = similarity_map(&f, &Embedding(vec![3.0, 4.0])).unwrap();
        assert_eq!(s.at(0, 0), 11.0);
        let z = similarity_map(&f, &Embedding(vec![0.0, 0.0])).unwrap();
        assert!(z.data.iter().all(|&v| v == 0.0));
        let c = Tensor::filled(3, 4, 4, 0.5);
        let s = similarity_map(&c, &Embedding(vec![1.0, 2.0, 3.0])).unwrap();
        assert!(s.data.iter().all(|&v| v == 3.0));
        assert!(matches!(
            similarity_map(&f, &Embedding(vec![1.0])),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn averaging_examples() {
        let a = Grid::from_vec(1, 2, vec![1.0, 5.0]).unwrap();
        let b = Grid::from_vec(1, 2, vec![3.0, 5.0]).unwrap();
        assert_eq!(average_similarity(&[a.clone()]).unwrap(), a);
        assert_eq!(average_similarity(&[a.clone(), a.clone(), a.clone()]).unwrap(), a);
        assert_eq!(average_similarity(&[a.clone(), b]).unwrap().at(0, 0), 2.0);
        assert!(average_similarity(&[]).is_err());
        assert!(average_similarity(&[a, Grid::zeros(2, 2)]).is_err());
    }

    #[test]
    fn count_and_loss_examples() {
        assert_eq!(count_from_density(&Grid::zeros(3, 3)), 0.0);
        let d = Grid::from_vec(2, 2, vec![0.5, 0.5, 1.0, 1.0]).unwrap();
        assert_eq!(count_from_density(&d), 3.0);
        assert_eq!(counting_loss(&d, &d).unwrap(), 0.0);
        let shifted = Grid::from_vec(2, 2, d.data.iter().map(|v| v + 0.3).collect()).unwrap();
        assert!((counting_loss(&shifted, &d).unwrap() - 0.09 * 4.0).abs() < 1e-12);
        assert!(counting_loss(&d, &Grid::zeros(1, 4)).is_err());
    }

    #[test]
    fn density_shape_matches_image() {
        let model = CounterModel::new(small_config());
        for (h, w) in [(32, 32), (33, 47), (40, 20)] {
            let img = random_image(h, w, 1);
            let (count, dens) = model.count_with_exemplars(&img, &[Rect::new(2, 2, 14, 14).unwrap()]).unwrap();
            assert_eq!((dens.h, dens.w), (h, w));
            assert_eq!(count, dens.data.iter().sum::<f64>());
            assert!(dens.data.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn inference_is_deterministic() {
        let model = CounterModel::new(small_config());
        let img = random_image(32, 40, 2);
        let ex = [Rect::new(0, 0, 10, 12).unwrap(), Rect::new(5, 5, 20, 20).unwrap()];
        assert_eq!(
            model.count_with_exemplars(&img, &ex).unwrap(),
            model.count_with_exemplars(&img, &ex).unwrap()
        );
    }

    #[test]
    fn loss_and_grads_agrees_with_inference() {
        let model = CounterModel::new(small_config());
        let img = random_image(32, 32, 3);
        let ex = [Rect::new(3, 3, 15, 15).unwrap()];
        let (_, dens) = model.count_with_exemplars(&img, &ex).unwrap();
        let gt = Grid::zeros(32, 32);
        let (loss, grads) = model.loss_and_grads(&img, &ex, &gt).unwrap();
        assert!((loss - model.training_loss(&dens, &gt).unwrap()).abs() < 1e-9 * loss.max(1.0));
        assert_eq!(grads.len(), model.params().len());
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        // Zero-initialised biases put whole activations exactly on the ReLU
        // kink, where central differences are meaningless.
        let mut model = CounterModel::new(small_config());
        let mut rng = substream(8, "bias");
        for p in model.params_mut() {
            if p.name.ends_with(".bias") {
                p.data.iter_mut().for_each(|v| *v = rng.random_range(-0.1..0.1));
            }
        }
        let img = random_image(36, 32, 4);
        let ex = [Rect::new(2, 3, 18, 17).unwrap(), Rect::new(10, 12, 30, 34).unwrap()];
        let mut gt = Grid::zeros(36, 32);
        gt.data[5 * 32 + 7] = 1.0;
        gt.data[20 * 32 + 20] = 0.5;
        let (_, grads) = model.loss_and_grads(&img, &ex, &gt).unwrap();
        rng = substream(9, "gradcheck");
        let n_params = model.params().len();
        let mut checked = 0;
        let h = 1e-5;
        while checked < 5 {
            let pi = rng.random_range(0..n_params);
            let len = model.params()[pi].data.len();
            let ei = rng.random_range(0..len);
            let orig = model.params()[pi].data[ei];
            let mut eval = |v: f64| {
                model.params_mut()[pi].data[ei] = v;
                let (_, d) = model.count_with_exemplars(&img, &ex).unwrap();
                model.training_loss(&d, &gt).unwrap()
            };
            let numeric = (eval(orig + h) - eval(orig - h)) / (2.0 * h);
            model.params_mut()[pi].data[ei] = orig;
            let analytic = grads[pi][ei];
            if analytic.abs() < 1e-7 && numeric.abs() < 1e-7 {
                continue;
            }
            assert!(
                rel_err(analytic, numeric) < 1e-4,
                "{}[{ei}]: analytic {analytic} numeric {numeric}",
                model.params()[pi].name
            );
            checked += 1;
        }
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = substream(1, "loss");
        let gt = Grid::from_vec(3, 3, (0..9).map(|_| rng.random()).collect()).unwrap();
        let pred = Grid::from_vec(3, 3, (0..9).map(|_| rng.random()).collect()).unwrap();
        let g = counting_loss_grad(&pred, &gt).unwrap();
        for i in 0..9 {
            let mut p = pred.clone();
            p.data[i] += 1e-5;
            let up = counting_loss(&p, &gt).unwrap();
            p.data[i] -= 2e-5;
            let down = counting_loss(&p, &gt).unwrap();
            assert!(rel_err(g.data[i], (up - down) / 2e-5) < 1e-6);
        }
    }

    #[test]
    fn similarity_is_linear_in_exemplar() {
        let f = random_image(8, 8, 5);
        let b1 = Embedding(vec![0.3, -1.2, 2.0]);
        let b2 = Embedding(vec![1.5, 0.25, -0.7]);
        let a = -2.5;
        let combo = Embedding(b1.0.iter().zip(&b2.0).map(|(x, y)| a * x + y).collect());
        let lhs = similarity_map(&f, &combo).unwrap();
        let s1 = similarity_map(&f, &b1).unwrap();
        let s2 = similarity_map(&f, &b2).unwrap();
        for i in 0..lhs.data.len() {
            assert!((lhs.data[i] - (a * s1.data[i] + s2.data[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn archive_round_trip() {
        let mut model = CounterModel::new(small_config());
        model.train_classes = vec!["a".into(), "b".into()];
        let arch = model.to_archive().unwrap();
        let back = CounterModel::from_archive(&Archive::from_bytes(&arch.to_bytes()).unwrap()).unwrap();
        assert_eq!(back.config, model.config);
        assert_eq!(back.train_classes, model.train_classes);
        for (a, b) in back.params().iter().zip(model.params()) {
            assert_eq!(a, &b);
        }
    }
}
