//! End-to-end zero-shot counting and the training stages that feed it.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use log::info;
use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Archive;
use crate::config::PipelineConfig;
use crate::counter::{count_from_density, resize_annotated, train_counter, CounterModel, DensityMap, EpochLog};
use crate::error::{Error, Result};
use crate::errpred::{predict_candidate_errors, order_by_predicted, select_exemplars, train_error_predictor, ErrorPredictor};
use crate::features::{Embedder, Embedding, BACKBONE_STRIDE};
use crate::metrics::{self, CountPair, MetricsReport};
use crate::pool::{
    build_pool, pool_class_prototype, FilePoolProvider, PatchPool, PluginPoolProvider, PoolProvider, SyntheticPoolProvider,
    TopK,
};
use crate::prototype::{ClassPrototype, PrototypeSource};
use crate::rng::{derive_seed, substream};
use crate::select::{
    embed_proposals, propose, relevance_heatmap, select_with_embeddings, semantic_prototype_baseline, Proposal,
    ProposalProvider, SelectionResult, SemanticAlignment,
};
use crate::synth::{AnnotatedImage, DatasetManifest, Split};
use crate::tensor::{Grid, Tensor};
use crate::vae::{train_vae, vae_class_prototype, FileSemantics, SemanticProvider, SyntheticSemantics, Vae};

pub const COUNTER_FILE: &str = "counter.ckpt";
pub const VAE_FILE: &str = "vae.ckpt";
pub const ALIGNMENT_FILE: &str = "alignment.ckpt";
pub const ERRPRED_FILE: &str = "errpred.ckpt";

/// Which selection stages run before counting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arm {
    /// `s` uniformly random proposals.
    Baseline,
    /// `s` random picks among the `n` class-relevant proposals.
    PrototypeOnly,
    /// Predictor ranking over all proposals.
    PredictorOnly,
    /// Class-relevant proposals ranked by the predictor.
    Full,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::Baseline, Arm::PrototypeOnly, Arm::PredictorOnly, Arm::Full];

    pub fn as_str(self) -> &'static str {
        match self {
            Arm::Baseline => "baseline",
            Arm::PrototypeOnly => "prototype-only",
            Arm::PredictorOnly => "predictor-only",
            Arm::Full => "full",
        }
    }

    fn uses_prototype(self) -> bool {
        matches!(self, Arm::PrototypeOnly | Arm::Full)
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arm::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown arm `{s}`")))
    }
}

/// Per-run selection settings (the top-level config values by default).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Settings {
    pub source: PrototypeSource,
    pub n: usize,
    pub s: usize,
    pub k: TopK,
}

impl Settings {
    pub fn from_config(cfg: &PipelineConfig) -> Self {
        Settings {
            source: cfg.prototype_source,
            n: cfg.n,
            s: cfg.s,
            k: cfg.pool.k,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CountOutcome {
    pub image_id: String,
    /// The query image after resizing to the counter's input height.
    pub image: Tensor,
    pub count: f64,
    pub density: DensityMap,
    pub selected: Vec<Proposal>,
    pub prototype: Option<ClassPrototype>,
    pub candidates: Option<SelectionResult>,
    /// Feature-resolution relevance mask, when heatmap masking is enabled.
    pub mask: Option<Grid>,
}

/// Trained models plus the providers needed to count a class by name.
pub struct Pipeline {
    pub config: PipelineConfig,
    pub counter: CounterModel,
    pub embedder: Embedder,
    pub vae: Option<Vae>,
    pub predictor: Option<ErrorPredictor>,
    pub alignment: Option<SemanticAlignment>,
    semantics: Box<dyn SemanticProvider>,
    pools: Box<dyn PoolProvider>,
    proposals: Box<dyn ProposalProvider>,
    pool_cache: Mutex<HashMap<String, Arc<PatchPool>>>,
}

pub fn semantic_provider(cfg: &PipelineConfig) -> Result<Box<dyn SemanticProvider>> {
    Ok(match &cfg.semantic_file {
        Some(p) => Box::new(FileSemantics::load(p)?),
        None => Box::new(SyntheticSemantics),
    })
}

fn pool_provider(cfg: &PipelineConfig, embedder: &Embedder) -> Result<Box<dyn PoolProvider>> {
    if let Some(cmd) = &cfg.pool.plugin {
        let (program, args) = cmd
            .split_first()
            .ok_or_else(|| Error::Config("pool.plugin needs a program".into()))?;
        return Ok(Box::new(PluginPoolProvider {
            program: program.clone(),
            args: args.to_vec(),
            work_dir: cfg.artifact("pools"),
        }));
    }
    if let Some(dir) = &cfg.pool.dir {
        return Ok(Box::new(FilePoolProvider { dir: dir.clone() }));
    }
    Ok(Box::new(SyntheticPoolProvider {
        embedder: embedder.clone(),
        diversity: cfg.dataset.diversity,
        seed: derive_seed(cfg.seed, "pool"),
        generator: cfg.pool.generator,
        scene_size: (cfg.dataset.height, cfg.dataset.width),
        count_range: cfg.dataset.count_range,
        per_scene: cfg.pool.per_scene,
    }))
}

fn load_optional<T>(cfg: &PipelineConfig, file: &str, f: impl Fn(&Archive) -> Result<T>) -> Result<Option<T>> {
    let path = cfg.artifact(file);
    if !path.exists() {
        return Ok(None);
    }
    Ok(Some(f(&Archive::load(&path)?)?))
}

impl Pipeline {
    pub fn new(
        config: PipelineConfig,
        counter: CounterModel,
        vae: Option<Vae>,
        predictor: Option<ErrorPredictor>,
        alignment: Option<SemanticAlignment>,
    ) -> Result<Self> {
        let embedder = counter.embedder();
        let semantics = semantic_provider(&config)?;
        let pools = pool_provider(&config, &embedder)?;
        let proposals = config.proposals.provider();
        Ok(Pipeline {
            config,
            counter,
            embedder,
            vae,
            predictor,
            alignment,
            semantics,
            pools,
            proposals,
            pool_cache: Mutex::new(HashMap::new()),
        })
    }

    /// Loads checkpoints from the output directory; only the counter is required.
    pub fn load(config: PipelineConfig) -> Result<Self> {
        let counter = CounterModel::from_archive(&Archive::load(&config.artifact(COUNTER_FILE))?)?;
        let vae = load_optional(&config, VAE_FILE, Vae::from_archive)?;
        let predictor = load_optional(&config, ERRPRED_FILE, ErrorPredictor::from_archive)?;
        let alignment = load_optional(&config, ALIGNMENT_FILE, SemanticAlignment::from_archive)?;
        Pipeline::new(config, counter, vae, predictor, alignment)
    }

    fn predictor(&self) -> Result<&ErrorPredictor> {
        self.predictor
            .as_ref()
            .ok_or_else(|| Error::MissingArtifact(self.config.artifact(ERRPRED_FILE)))
    }

    pub fn pool(&self, class_name: &str) -> Result<Arc<PatchPool>> {
        if let Some(p) = self.pool_cache.lock().expect("pool cache").get(class_name) {
            return Ok(Arc::clone(p));
        }
        let pool = Arc::new(build_pool(class_name, self.pools.as_ref(), self.config.pool.size)?);
        if pool.dim() != self.embedder.dim() {
            return Err(Error::dim("pool embedding", self.embedder.dim(), pool.dim()));
        }
        self.pool_cache
            .lock()
            .expect("pool cache")
            .insert(class_name.to_owned(), Arc::clone(&pool));
        Ok(pool)
    }

    /// Class prototype from the configured source. `queries` are the query
    /// image's proposal embeddings (used by the pool source only).
    pub fn prototype(&self, class_name: &str, source: PrototypeSource, k: TopK, queries: &[Embedding]) -> Result<ClassPrototype> {
        match source {
            PrototypeSource::Vae => {
                let vae = self
                    .vae
                    .as_ref()
                    .ok_or_else(|| Error::MissingArtifact(self.config.artifact(VAE_FILE)))?;
                let a = self.semantics.embedding(class_name)?;
                let mut rng = substream(self.config.seed, &format!("vae-prototype/{class_name}"));
                vae_class_prototype(class_name, &a, vae.config.prototype_samples, vae, &mut rng)
            }
            PrototypeSource::Pool => pool_class_prototype(&*self.pool(class_name)?, queries, k),
            PrototypeSource::Semantic => semantic_prototype_baseline(
                class_name,
                self.semantics.as_ref(),
                self.alignment.as_ref(),
                self.embedder.dim(),
            ),
        }
    }

    /// Full method: prototype, class-relevant selection, predictor ranking, count.
    pub fn zero_shot_count(&self, image_id: &str, image: &Tensor, class_name: &str) -> Result<CountOutcome> {
        self.count_arm(Arm::Full, image_id, image, class_name, &Settings::from_config(&self.config))
    }

    pub fn count_arm(&self, arm: Arm, image_id: &str, image: &Tensor, class_name: &str, settings: &Settings) -> Result<CountOutcome> {
        let image = if image.h == self.counter.config.image_height {
            image.clone()
        } else {
            image.resize_to_height(self.counter.config.image_height)
        };
        let proposals = propose(image_id, &image, self.proposals.as_ref(), &self.config.proposals)?;
        let mut rng = substream(self.config.seed, &format!("arm/{arm}/{image_id}"));
        let random_pick = |pool: &[Proposal], rng: &mut crate::rng::StreamRng| -> Vec<Proposal> {
            let mut idx = index::sample(rng, pool.len(), settings.s.min(pool.len())).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| pool[i].clone()).collect()
        };

        let (prototype, candidates) = if arm.uses_prototype() {
            let embeddings = embed_proposals(&proposals, &image, &self.embedder)?;
            let queries = match self.config.pool.query_top {
                Some(q) if settings.source == PrototypeSource::Pool => top_objectness(&proposals, &embeddings, q),
                _ => embeddings.clone(),
            };
            let proto = self.prototype(class_name, settings.source, settings.k, &queries)?;
            let sel = select_with_embeddings(&proposals, &embeddings, &proto, settings.n)?;
            (Some(proto), Some(sel))
        } else {
            (None, None)
        };
        let selected = match (arm, &candidates) {
            (Arm::Baseline, _) => random_pick(&proposals, &mut rng),
            (Arm::PrototypeOnly, Some(sel)) => {
                let pool: Vec<Proposal> = sel.ranked.iter().map(|(p, _)| p.clone()).collect();
                random_pick(&pool, &mut rng)
            }
            (Arm::PredictorOnly, _) => {
                let features = self.counter.image_features(&image)?;
                let pred = predict_candidate_errors(&proposals, &image, &features, &self.counter, self.predictor()?)?;
                order_by_predicted(&pred, settings.s)
                    .into_iter()
                    .map(|i| proposals[i].clone())
                    .collect()
            }
            (Arm::Full, Some(sel)) => select_exemplars(sel, &image, &self.counter, self.predictor()?, settings.s)?,
            _ => unreachable!("prototype arms always produce candidates"),
        };

        let rects: Vec<_> = selected.iter().map(|p| p.rect).collect();
        let (mut count, mut density) = self.counter.count_with_exemplars(&image, &rects)?;
        let mut mask = None;
        if let Some(threshold) = self.config.heatmap_threshold {
            let exemplar = Embedding::mean(
                &rects
                    .iter()
                    .map(|&r| self.embedder.embed_rect(&image, r))
                    .collect::<Result<Vec<_>>>()?,
            )
            .expect("at least one exemplar");
            let features = self.counter.image_features(&image)?;
            let m = relevance_heatmap(&features, &exemplar, threshold)?;
            apply_mask(&mut density, &m);
            count = count_from_density(&density);
            mask = Some(m);
        }
        Ok(CountOutcome {
            image_id: image_id.to_owned(),
            image,
            count,
            density,
            selected,
            prototype,
            candidates,
            mask,
        })
    }

    /// Counts every image (in parallel, reduced in input order) and scores it.
    pub fn evaluate(&self, images: &[AnnotatedImage], arm: Arm, settings: &Settings) -> Result<(MetricsReport, Vec<CountPair>)> {
        let pairs = images
            .par_iter()
            .map(|s| {
                let out = self.count_arm(arm, &s.id, &s.image, &s.class_name, settings)?;
                Ok(CountPair::new(s.count as f64, out.count))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((metrics::evaluate(&pairs)?, pairs))
    }
}

/// Zeroes density outside the feature-resolution mask (nearest upsampling).
fn apply_mask(density: &mut Grid, mask: &Grid) {
    let s = BACKBONE_STRIDE;
    for y in 0..density.h {
        for x in 0..density.w {
            let (my, mx) = ((y / s).min(mask.h - 1), (x / s).min(mask.w - 1));
            if mask.at(my, mx) == 0.0 {
                density.data[y * density.w + x] = 0.0;
            }
        }
    }
}

/// Embeddings of the `q` highest-objectness proposals (missing scores rank
/// last, ties keep proposal order).
pub fn top_objectness(proposals: &[Proposal], embeddings: &[Embedding], q: usize) -> Vec<Embedding> {
    let mut order: Vec<usize> = (0..proposals.len()).collect();
    let score = |i: usize| proposals[i].objectness.unwrap_or(f64::NEG_INFINITY);
    order.sort_by(|&a, &b| score(b).total_cmp(&score(a)));
    order.into_iter().take(q.max(1)).map(|i| embeddings[i].clone()).collect()
}

/// Refuses evaluation of a split that shares classes with the counter's
/// training classes (zero-shot guarantee); the train split is exempt.
pub fn check_zero_shot(split: Split, images: &[AnnotatedImage], counter: &CounterModel) -> Result<()> {
    if split == Split::Train {
        return Ok(());
    }
    let mut leaked: Vec<String> = images
        .iter()
        .map(|s| s.class_name.clone())
        .filter(|c| counter.train_classes.contains(c))
        .collect();
    leaked.sort();
    leaked.dedup();
    if leaked.is_empty() {
        Ok(())
    } else {
        Err(Error::ClassLeak {
            split: split.as_str().to_owned(),
            classes: leaked,
        })
    }
}

pub fn load_manifest(cfg: &PipelineConfig) -> Result<DatasetManifest> {
    let m = DatasetManifest::load(&cfg.manifest_path())?;
    m.check_disjoint()?;
    Ok(m)
}

pub fn train_counter_stage(cfg: &PipelineConfig, manifest: &DatasetManifest) -> Result<(CounterModel, Vec<EpochLog>)> {
    let train = manifest.load_split(Split::Train)?;
    let val = manifest.load_split(Split::Val)?;
    info!("training counter on {} images ({} validation)", train.len(), val.len());
    train_counter(&train, &val, &cfg.counter)
}

/// `(embedding of every ground-truth box, class semantic)` over the images.
pub fn vae_records(
    images: &[AnnotatedImage],
    embedder: &Embedder,
    semantics: &dyn SemanticProvider,
    image_height: usize,
) -> Result<Vec<(Embedding, Embedding)>> {
    let per_image = images
        .par_iter()
        .map(|s| {
            let s = resize_annotated(s, image_height);
            let a = semantics.embedding(&s.class_name)?;
            s.boxes
                .iter()
                .map(|&b| Ok((embedder.embed_rect(&s.image, b)?, a.clone())))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_image.into_iter().flatten().collect())
}

/// Mean ground-truth-box embedding per class.
pub fn class_means(records: &[(String, Embedding)]) -> BTreeMap<String, Embedding> {
    let mut groups: BTreeMap<String, Vec<Embedding>> = BTreeMap::new();
    for (c, e) in records {
        groups.entry(c.clone()).or_default().push(e.clone());
    }
    groups
        .into_iter()
        .map(|(c, es)| (c, Embedding::mean(&es).expect("non-empty group")))
        .collect()
}

/// Trains the VAE on training-class box embeddings and fits the
/// semantic-to-selection-space alignment on the same classes.
pub fn train_vae_stage(
    cfg: &PipelineConfig,
    counter: &CounterModel,
    manifest: &DatasetManifest,
) -> Result<(Vae, SemanticAlignment, Vec<f64>)> {
    let semantics = semantic_provider(cfg)?;
    let train = manifest.load_split(Split::Train)?;
    let embedder = counter.embedder();
    let records = vae_records(&train, &embedder, semantics.as_ref(), counter.config.image_height)?;
    info!("training vae on {} box embeddings", records.len());
    let mut vae_cfg = cfg.vae.clone();
    vae_cfg.semantic_dim = semantics.dim();
    vae_cfg.feature_dim = embedder.dim();
    let (vae, losses) = train_vae(&records, &vae_cfg)?;

    let labelled: Vec<(String, Embedding)> = train
        .iter()
        .flat_map(|s| std::iter::repeat_n(s.class_name.clone(), s.boxes.len()))
        .zip(records.iter().map(|(x, _)| x.clone()))
        .collect();
    let pairs = class_means(&labelled)
        .into_iter()
        .map(|(c, mean)| Ok((semantics.embedding(&c)?, mean)))
        .collect::<Result<Vec<_>>>()?;
    let alignment = SemanticAlignment::fit(&pairs, cfg.alignment_ridge)?;
    Ok((vae, alignment, losses))
}

pub fn train_errpred_stage(cfg: &PipelineConfig, counter: &CounterModel, manifest: &DatasetManifest) -> Result<(ErrorPredictor, Vec<f64>)> {
    let train = manifest.load_split(Split::Train)?;
    train_error_predictor(counter, &train, &cfg.proposals, &cfg.errpred)
}
