//! Exemplar ranking: a regressor predicting the counting error a candidate
//! patch would cause when used as the counter's exemplar.

use std::sync::Arc;

use log::info;
use rand::seq::{index, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Archive;
use crate::counter::{count_from_density, resize_annotated, similarity_map, CounterModel, DensityMap, SimilarityMap};
use crate::error::{ensure_finite, Error, Result};
use crate::features::FeatureMap;
use crate::nn::{add_grads, relu_backward_inplace, relu_inplace, scale_grads, Adam, Conv2d, ConvCache, Linear, Module, Param};
use crate::rng::substream;
use crate::select::{propose, Proposal, ProposalConfig, SelectionResult};
use crate::synth::{sample_boxes, AnnotatedImage};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: &str = "zsc-errpred/1";

/// `|sum(D) - gt|`, divided by `gt` when `normalized`.
pub fn counting_error(density: &DensityMap, gt_count: f64, normalized: bool) -> Result<f64> {
    let raw = (count_from_density(density) - gt_count).abs();
    if normalized {
        if gt_count <= 0.0 {
            return Err(Error::InvalidArgument("normalized error needs a positive ground-truth count".into()));
        }
        Ok(raw / gt_count)
    } else {
        Ok(raw)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ErrPredConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Ground-truth boxes sampled per training image.
    pub gt_per_image: usize,
    /// Provider proposals sampled per training image.
    pub proposals_per_image: usize,
    /// Regress `eps / gt_count` instead of the raw error.
    pub normalized: bool,
    /// Derived from the pipeline root seed; not read from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for ErrPredConfig {
    fn default() -> Self {
        ErrPredConfig {
            hidden: 16,
            epochs: 30,
            batch_size: 16,
            learning_rate: 1e-3,
            gt_per_image: 1,
            proposals_per_image: 7,
            normalized: true,
            seed: 0,
        }
    }
}

/// Three 3x3 convolutions (strides 1, 2, 2) with ReLU, global average
/// pooling and a linear head. Input is the feature map with the similarity
/// map appended as an extra channel.
#[derive(Clone, Debug)]
pub struct ErrorPredictor {
    pub config: ErrPredConfig,
    pub feature_dim: usize,
    pub convs: [Conv2d; 3],
    pub head: Linear,
}

struct Trace {
    caches: Vec<ConvCache>,
    outputs: Vec<Tensor>,
    pooled: Vec<f64>,
}

impl Module for ErrorPredictor {
    fn params(&self) -> Vec<&Param> {
        let mut p: Vec<&Param> = self.convs.iter().flat_map(|c| [&c.weight, &c.bias]).collect();
        p.push(&self.head.weight);
        p.push(&self.head.bias);
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p: Vec<&mut Param> = self.convs.iter_mut().flat_map(|c| [&mut c.weight, &mut c.bias]).collect();
        p.push(&mut self.head.weight);
        p.push(&mut self.head.bias);
        p
    }
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    feature_dim: usize,
    config: ErrPredConfig,
}

impl ErrorPredictor {
    pub fn new(feature_dim: usize, config: ErrPredConfig) -> Self {
        let mut rng = substream(config.seed, "errpred/init");
        let h = config.hidden;
        let convs = [
            Conv2d::new("errpred.conv1", feature_dim + 1, h, 3, 1, 1, &mut rng),
            Conv2d::new("errpred.conv2", h, h, 3, 2, 1, &mut rng),
            Conv2d::new("errpred.conv3", h, h, 3, 2, 1, &mut rng),
        ];
        let head = Linear::new("errpred.head", h, 1, &mut rng);
        ErrorPredictor {
            config,
            feature_dim,
            convs,
            head,
        }
    }

    fn input(&self, features: &FeatureMap, similarity: &SimilarityMap) -> Result<Tensor> {
        if features.c != self.feature_dim {
            return Err(Error::dim("error predictor features", self.feature_dim, features.c));
        }
        if similarity.h != features.h || similarity.w != features.w {
            return Err(Error::dim("similarity vs feature size", features.plane_len(), similarity.data.len()));
        }
        features.concat_channels(&similarity.clone().into_tensor())
    }

    fn forward(&self, x: &Tensor) -> (f64, Trace) {
        let mut caches = Vec::with_capacity(3);
        let mut outputs = Vec::with_capacity(3);
        let mut cur = x.clone();
        for conv in &self.convs {
            let (mut y, c) = conv.forward(&cur);
            relu_inplace(&mut y.data);
            caches.push(c);
            outputs.push(y.clone());
            cur = y;
        }
        let pooled = cur.spatial_mean();
        let out = self.head.forward(&pooled)[0];
        (out, Trace { caches, outputs, pooled })
    }

    /// Predicted counting error (unconstrained sign).
    pub fn predict_error(&self, features: &FeatureMap, similarity: &SimilarityMap) -> Result<f64> {
        let (y, _) = self.forward(&self.input(features, similarity)?);
        ensure_finite(&[y], "error_predictor", "predict_error")?;
        Ok(y)
    }

    /// Squared error against `target` and parameter gradients.
    pub fn loss_and_grads(&self, features: &FeatureMap, similarity: &SimilarityMap, target: f64) -> Result<(f64, Vec<Vec<f64>>)> {
        let (y, trace) = self.forward(&self.input(features, similarity)?);
        let loss = (y - target) * (y - target);
        let mut grads = self.zero_grads();
        let (g_conv, g_head) = grads.split_at_mut(6);
        let (gw, gb) = g_head.split_at_mut(1);
        let d_pooled = self.head.backward(&trace.pooled, &[2.0 * (y - target)], &mut gw[0], &mut gb[0]);
        let last = &trace.outputs[2];
        let area = last.plane_len() as f64;
        let mut d = Tensor::zeros(last.c, last.h, last.w);
        for c in 0..last.c {
            d.plane_mut(c).fill(d_pooled[c] / area);
        }
        for i in (0..3).rev() {
            relu_backward_inplace(&trace.outputs[i].data, &mut d.data);
            let (gw, gb) = g_conv[2 * i..2 * i + 2].split_at_mut(1);
            match self.convs[i].backward(&trace.caches[i], &d, &mut gw[0], &mut gb[0], i > 0) {
                Some(dx) => d = dx,
                None => break,
            }
        }
        Ok((loss, grads))
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let snap = Snapshot {
            feature_dim: self.feature_dim,
            config: self.config.clone(),
        };
        Ok(Archive {
            version: CHECKPOINT_VERSION.into(),
            config: toml::to_string(&snap).map_err(|e| Error::Config(e.to_string()))?,
            arrays: self.params().into_iter().cloned().collect(),
        })
    }

    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let text = archive.expect_version(CHECKPOINT_VERSION)?;
        let snap: Snapshot = toml::from_str(text).map_err(|e| Error::format("error predictor config", e.to_string()))?;
        let mut p = ErrorPredictor::new(snap.feature_dim, snap.config);
        p.load_params(&archive.arrays)?;
        Ok(p)
    }
}

/// One (image, candidate patch) training pair.
#[derive(Clone, Debug)]
pub struct ErrorSample {
    pub image_id: String,
    pub patch: Proposal,
    pub target_error: f64,
    pub features: Arc<FeatureMap>,
    pub similarity: SimilarityMap,
}

/// Single-exemplar counting error of `patch` under the frozen counter.
pub fn exemplar_error(
    counter: &CounterModel,
    image: &Tensor,
    features: &FeatureMap,
    patch: &Proposal,
    gt_count: f64,
    normalized: bool,
) -> Result<(f64, SimilarityMap)> {
    let b = counter.exemplar_vector(image, patch.rect)?;
    let s = similarity_map(features, &b)?;
    let d = counter.predict_density(features, &s, image.h, image.w)?;
    Ok((counting_error(&d, gt_count, normalized)?, s))
}

/// Samples `gt_per_image` ground-truth boxes and `proposals_per_image`
/// provider proposals per image and scores each with the frozen counter.
pub fn build_error_samples(
    counter: &CounterModel,
    images: &[AnnotatedImage],
    proposals: &ProposalConfig,
    config: &ErrPredConfig,
) -> Result<Vec<ErrorSample>> {
    let provider = proposals.provider();
    let per_image = images
        .par_iter()
        .filter(|s| s.count > 0 && !s.boxes.is_empty())
        .map(|sample| {
            let sample = resize_annotated(sample, counter.config.image_height);
            let mut rng = substream(config.seed, &format!("errpred/sample/{}", sample.id));
            let mut patches: Vec<Proposal> = sample_boxes(&sample.boxes, config.gt_per_image, &mut rng)
                .into_iter()
                .map(Proposal::ground_truth)
                .collect();
            let props = propose(&sample.id, &sample.image, provider.as_ref(), proposals)?;
            let k = config.proposals_per_image.min(props.len());
            let mut picked = index::sample(&mut rng, props.len(), k).into_vec();
            picked.sort_unstable();
            patches.extend(picked.into_iter().map(|i| props[i].clone()));
            let features = Arc::new(counter.image_features(&sample.image)?);
            patches
                .into_iter()
                .map(|patch| {
                    let (eps, s) =
                        exemplar_error(counter, &sample.image, &features, &patch, sample.count as f64, config.normalized)?;
                    Ok(ErrorSample {
                        image_id: sample.id.clone(),
                        patch,
                        target_error: eps,
                        features: Arc::clone(&features),
                        similarity: s,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_image.into_iter().flatten().collect())
}

/// Mean squared error regression onto the sample targets; returns the
/// predictor and the per-epoch mean training loss.
pub fn train_on_samples(
    samples: &[ErrorSample],
    feature_dim: usize,
    config: &ErrPredConfig,
) -> Result<(ErrorPredictor, Vec<f64>)> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no error-predictor training samples".into()));
    }
    let mut model = ErrorPredictor::new(feature_dim, config.clone());
    let mut opt = Adam::new(config.learning_rate, &model.params());
    let mut rng = substream(config.seed, "errpred/train");
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size.max(1)) {
            let results = batch
                .par_iter()
                .map(|&i| {
                    let s = &samples[i];
                    model.loss_and_grads(&s.features, &s.similarity, s.target_error)
                })
                .collect::<Result<Vec<_>>>()?;
            let mut grads = model.zero_grads();
            for (l, g) in &results {
                total += l;
                add_grads(&mut grads, g);
            }
            if !total.is_finite() {
                return Err(Error::Numerical {
                    module: "error_predictor",
                    op: "train_error_predictor",
                });
            }
            scale_grads(&mut grads, 1.0 / batch.len() as f64);
            opt.step(model.params_mut(), &grads);
        }
        let mean = total / samples.len() as f64;
        info!("error predictor epoch {}/{}: mse={mean:.5}", epoch + 1, config.epochs);
        losses.push(mean);
    }
    Ok((model, losses))
}

pub fn train_error_predictor(
    counter: &CounterModel,
    images: &[AnnotatedImage],
    proposals: &ProposalConfig,
    config: &ErrPredConfig,
) -> Result<(ErrorPredictor, Vec<f64>)> {
    let samples = build_error_samples(counter, images, proposals, config)?;
    info!("error predictor: {} training pairs", samples.len());
    train_on_samples(&samples, counter.feature_dim(), config)
}

/// Candidate order by predicted error, ties by position; first `s` kept.
pub fn order_by_predicted(predicted: &[f64], s: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..predicted.len()).collect();
    idx.sort_by(|&a, &b| predicted[a].total_cmp(&predicted[b]).then(a.cmp(&b)));
    idx.truncate(s);
    idx
}

/// Predicted error for every proposal as the sole exemplar.
pub fn predict_candidate_errors(
    candidates: &[Proposal],
    image: &Tensor,
    features: &FeatureMap,
    counter: &CounterModel,
    predictor: &ErrorPredictor,
) -> Result<Vec<f64>> {
    candidates
        .par_iter()
        .map(|p| {
            let b = counter.exemplar_vector(image, p.rect)?;
            predictor.predict_error(features, &similarity_map(features, &b)?)
        })
        .collect()
}

/// The `s` class-relevant candidates with the smallest predicted error.
pub fn select_exemplars(
    candidates: &SelectionResult,
    image: &Tensor,
    counter: &CounterModel,
    predictor: &ErrorPredictor,
    s: usize,
) -> Result<Vec<Proposal>> {
    let features = counter.image_features(image)?;
    let props: Vec<Proposal> = candidates.ranked.iter().map(|(p, _)| p.clone()).collect();
    let predicted = predict_candidate_errors(&props, image, &features, counter, predictor)?;
    Ok(order_by_predicted(&predicted, s)
        .into_iter()
        .map(|i| props[i].clone())
        .collect())
}
