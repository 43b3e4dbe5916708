//! Proposal generation and class-relevant patch selection.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Archive;
use crate::error::{Error, Result};
use crate::features::{Embedder, Embedding, FeatureMap};
use crate::nn::Param;
use crate::prototype::{ClassPrototype, PrototypeSource};
use crate::rng::substream;
use crate::tensor::{Grid, Rect, Tensor};
use crate::vae::SemanticProvider;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProposalSource {
    ProviderFile,
    SlidingWindow,
    GroundTruth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub rect: Rect,
    pub objectness: Option<f64>,
    pub source: ProposalSource,
}

impl Proposal {
    pub fn ground_truth(rect: Rect) -> Self {
        Proposal {
            rect,
            objectness: None,
            source: ProposalSource::GroundTruth,
        }
    }
}

pub trait ProposalProvider: Send + Sync {
    fn proposals(&self, image_id: &str, image: &Tensor) -> Result<Vec<Proposal>>;
}

/// Square windows of each size at stride `size / 2`, optionally scored by
/// a center-surround contrast objectness.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlidingWindow {
    pub sizes: Vec<usize>,
    pub objectness: bool,
}

impl Default for SlidingWindow {
    fn default() -> Self {
        SlidingWindow {
            sizes: vec![16, 24, 32],
            objectness: true,
        }
    }
}

impl ProposalProvider for SlidingWindow {
    fn proposals(&self, _image_id: &str, image: &Tensor) -> Result<Vec<Proposal>> {
        let saliency = self.objectness.then(|| SaliencyIntegral::new(image));
        let mut out = Vec::new();
        for &size in &self.sizes {
            if size == 0 || size > image.h || size > image.w {
                continue;
            }
            let stride = (size / 2).max(1);
            for y in (0..=image.h - size).step_by(stride) {
                for x in (0..=image.w - size).step_by(stride) {
                    let rect = Rect::new(x, y, x + size, y + size)?;
                    out.push(Proposal {
                        rect,
                        objectness: saliency.as_ref().map(|s| s.center_surround(rect)),
                        source: ProposalSource::SlidingWindow,
                    });
                }
            }
        }
        Ok(out)
    }
}

/// Summed-area table of per-pixel saliency: the largest per-channel
/// deviation from the image's median color.
struct SaliencyIntegral {
    w: usize,
    sums: Vec<f64>,
}

impl SaliencyIntegral {
    fn new(image: &Tensor) -> Self {
        let (h, w) = (image.h, image.w);
        let median: Vec<f64> = (0..image.c)
            .map(|c| {
                let mut v = image.data[c * h * w..(c + 1) * h * w].to_vec();
                v.sort_by(f64::total_cmp);
                v[v.len() / 2]
            })
            .collect();
        let mut sums = vec![0.0; (h + 1) * (w + 1)];
        for y in 0..h {
            let mut row = 0.0;
            for x in 0..w {
                row += (0..image.c)
                    .map(|c| (image.at(c, y, x) - median[c]).abs())
                    .fold(0.0, f64::max);
                sums[(y + 1) * (w + 1) + x + 1] = sums[y * (w + 1) + x + 1] + row;
            }
        }
        SaliencyIntegral { w: w + 1, sums }
    }

    fn sum(&self, y0: usize, x0: usize, y1: usize, x1: usize) -> f64 {
        let s = |y: usize, x: usize| self.sums[y * self.w + x];
        s(y1, x1) - s(y0, x1) - s(y1, x0) + s(y0, x0)
    }

    /// Mean saliency of the central half-size square minus that of the
    /// surrounding ring, clamped to [0, 1].
    fn center_surround(&self, r: Rect) -> f64 {
        let (h, w) = (r.y1 - r.y0, r.x1 - r.x0);
        let (iy, ix) = (r.y0 + h / 4, r.x0 + w / 4);
        let (ih, iw) = ((h / 2).max(1), (w / 2).max(1));
        let inner = self.sum(iy, ix, iy + ih, ix + iw);
        let total = self.sum(r.y0, r.x0, r.y1, r.x1);
        let inner_area = (ih * iw) as f64;
        let ring_area = (h * w) as f64 - inner_area;
        let ring = if ring_area > 0.0 { (total - inner) / ring_area } else { 0.0 };
        (inner / inner_area - ring).clamp(0.0, 1.0)
    }
}

/// Reads `<dir>/<image_id>.txt`, one `x0 y0 x1 y1 [objectness]` per line.
#[derive(Clone, Debug)]
pub struct FileProposals {
    pub dir: PathBuf,
}

pub fn parse_proposals(text: &str) -> Result<Vec<Proposal>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |d: String| Error::format("proposal file", format!("line {}: {d}", lineno + 1));
        let fields: Vec<&str> = line.split_whitespace().collect();
        if !(4..=5).contains(&fields.len()) {
            return Err(bad(format!("expected 4 or 5 fields, got {}", fields.len())));
        }
        let c: Vec<usize> = fields[..4]
            .iter()
            .map(|f| f.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| bad(e.to_string()))?;
        let objectness = match fields.get(4) {
            Some(f) => {
                let v: f64 = f.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?;
                if !(0.0..=1.0).contains(&v) {
                    return Err(bad(format!("objectness {v} outside [0, 1]")));
                }
                Some(v)
            }
            None => None,
        };
        out.push(Proposal {
            rect: Rect::new(c[0], c[1], c[2], c[3]).map_err(|e| bad(e.to_string()))?,
            objectness,
            source: ProposalSource::ProviderFile,
        });
    }
    Ok(out)
}

pub fn format_proposals(proposals: &[Proposal]) -> String {
    let mut out = String::new();
    for p in proposals {
        let r = p.rect;
        out.push_str(&format!("{} {} {} {}", r.x0, r.y0, r.x1, r.y1));
        if let Some(o) = p.objectness {
            out.push_str(&format!(" {o}"));
        }
        out.push('\n');
    }
    out
}

impl ProposalProvider for FileProposals {
    fn proposals(&self, image_id: &str, _image: &Tensor) -> Result<Vec<Proposal>> {
        let path = self.dir.join(format!("{image_id}.txt"));
        if !path.exists() {
            return Err(Error::MissingArtifact(path));
        }
        parse_proposals(&std::fs::read_to_string(&path)?)
    }
}

impl FileProposals {
    pub fn new(dir: &Path) -> Self {
        FileProposals { dir: dir.to_path_buf() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProposalConfig {
    pub max_proposals: usize,
    pub window_sizes: Vec<usize>,
    /// Score sliding windows so the cap keeps the most object-like ones.
    pub window_objectness: bool,
    /// Directory of per-image proposal files; sliding windows when unset.
    pub proposal_dir: Option<PathBuf>,
    /// Derived from the pipeline root seed; not read from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        ProposalConfig {
            max_proposals: 100,
            window_sizes: SlidingWindow::default().sizes,
            window_objectness: true,
            proposal_dir: None,
            seed: 0,
        }
    }
}

impl ProposalConfig {
    pub fn provider(&self) -> Box<dyn ProposalProvider> {
        match &self.proposal_dir {
            Some(dir) => Box::new(FileProposals::new(dir)),
            None => Box::new(SlidingWindow {
                sizes: self.window_sizes.clone(),
                objectness: self.window_objectness,
            }),
        }
    }
}

/// Provider output filtered to in-bounds rects, deduplicated by exact rect
/// and capped at `max_proposals` (highest objectness first when every
/// proposal carries one, else a seeded uniform subsample in original order).
pub fn propose(image_id: &str, image: &Tensor, provider: &dyn ProposalProvider, config: &ProposalConfig) -> Result<Vec<Proposal>> {
    let mut seen = HashSet::new();
    let mut props: Vec<Proposal> = provider
        .proposals(image_id, image)?
        .into_iter()
        .filter(|p| p.rect.fits(image.h, image.w) && seen.insert(p.rect))
        .collect();
    if props.is_empty() {
        return Err(Error::NoProposals);
    }
    let cap = config.max_proposals.max(1);
    if props.len() > cap {
        if props.iter().all(|p| p.objectness.is_some()) {
            props.sort_by(|a, b| b.objectness.unwrap().total_cmp(&a.objectness.unwrap()));
            props.truncate(cap);
        } else {
            let mut rng = substream(config.seed, &format!("proposals/{image_id}"));
            let mut keep = index::sample(&mut rng, props.len(), cap).into_vec();
            keep.sort_unstable();
            props = keep.into_iter().map(|i| props[i].clone()).collect();
        }
    }
    Ok(props)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    /// Proposals with their distance to the prototype, ascending.
    pub ranked: Vec<(Proposal, f64)>,
    pub prototype_source: PrototypeSource,
    pub n: usize,
}

/// Indices of the `n` embeddings nearest to `prototype`, ascending by L2
/// distance with ties broken by lower index.
pub fn nearest_to_prototype(embeddings: &[Embedding], prototype: &Embedding, n: usize) -> Result<Vec<(usize, f64)>> {
    if n == 0 {
        return Err(Error::InvalidArgument("N must be >= 1".into()));
    }
    if let Some(e) = embeddings.iter().find(|e| e.dim() != prototype.dim()) {
        return Err(Error::dim("proposal embedding vs prototype", prototype.dim(), e.dim()));
    }
    let mut d: Vec<(usize, f64)> = embeddings
        .iter()
        .enumerate()
        .map(|(i, e)| (i, e.l2_distance(prototype)))
        .collect();
    d.sort_by(|a, b| a.1.total_cmp(&b.1));
    d.truncate(n);
    Ok(d)
}

pub fn embed_proposals(proposals: &[Proposal], image: &Tensor, embedder: &Embedder) -> Result<Vec<Embedding>> {
    proposals
        .par_iter()
        .map(|p| embedder.embed_rect(image, p.rect))
        .collect()
}

/// The `n` proposals whose embeddings are closest to the prototype.
pub fn class_relevant(
    proposals: &[Proposal],
    image: &Tensor,
    prototype: &ClassPrototype,
    n: usize,
    embedder: &Embedder,
) -> Result<SelectionResult> {
    let embeddings = embed_proposals(proposals, image, embedder)?;
    select_with_embeddings(proposals, &embeddings, prototype, n)
}

/// [`class_relevant`] with proposal embeddings already computed.
pub fn select_with_embeddings(
    proposals: &[Proposal],
    embeddings: &[Embedding],
    prototype: &ClassPrototype,
    n: usize,
) -> Result<SelectionResult> {
    if proposals.len() != embeddings.len() {
        return Err(Error::dim("proposal embeddings", proposals.len(), embeddings.len()));
    }
    let ranked = nearest_to_prototype(embeddings, &prototype.embedding, n)?
        .into_iter()
        .map(|(i, d)| (proposals[i].clone(), d))
        .collect();
    Ok(SelectionResult {
        ranked,
        prototype_source: prototype.source,
        n,
    })
}

/// Ridge-regression map from semantic embeddings into the selection space,
/// fitted on (semantic, class-mean embedding) pairs of seen classes.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticAlignment {
    /// `[d_s + 1, d_e]`, last row is the intercept.
    pub weights: Vec<Vec<f64>>,
}

impl SemanticAlignment {
    pub fn fit(pairs: &[(Embedding, Embedding)], ridge: f64) -> Result<Self> {
        let (a0, t0) = pairs
            .first()
            .ok_or_else(|| Error::InvalidArgument("alignment needs at least one class".into()))?;
        let (ds, de) = (a0.dim() + 1, t0.dim());
        let mut gram = vec![vec![0.0; ds]; ds];
        let mut rhs = vec![vec![0.0; de]; ds];
        for (a, t) in pairs {
            if a.dim() + 1 != ds || t.dim() != de {
                return Err(Error::dim("alignment pair", ds - 1, a.dim()));
            }
            let x: Vec<f64> = a.0.iter().copied().chain([1.0]).collect();
            for i in 0..ds {
                for j in 0..ds {
                    gram[i][j] += x[i] * x[j];
                }
                for k in 0..de {
                    rhs[i][k] += x[i] * t.0[k];
                }
            }
        }
        for (i, row) in gram.iter_mut().enumerate().take(ds - 1) {
            row[i] += ridge;
        }
        Ok(SemanticAlignment {
            weights: solve(gram, rhs)?,
        })
    }

    pub fn apply(&self, a: &Embedding) -> Result<Embedding> {
        if a.dim() + 1 != self.weights.len() {
            return Err(Error::dim("semantic embedding", self.weights.len() - 1, a.dim()));
        }
        let de = self.weights[0].len();
        let mut out = self.weights[a.dim()].clone();
        for (i, v) in a.0.iter().enumerate() {
            for k in 0..de {
                out[k] += v * self.weights[i][k];
            }
        }
        Ok(Embedding(out))
    }
}

pub const ALIGNMENT_VERSION: &str = "zsc-align/1";

impl SemanticAlignment {
    pub fn to_archive(&self) -> Archive {
        let (rows, cols) = (self.weights.len(), self.weights.first().map_or(0, Vec::len));
        Archive {
            version: ALIGNMENT_VERSION.into(),
            config: String::new(),
            arrays: vec![Param {
                name: "alignment.weights".into(),
                shape: vec![rows, cols],
                data: self.weights.concat(),
            }],
        }
    }

    pub fn from_archive(archive: &Archive) -> Result<Self> {
        archive.expect_version(ALIGNMENT_VERSION)?;
        let [p] = &archive.arrays[..] else {
            return Err(Error::format("alignment checkpoint", "expected one array"));
        };
        let [rows, cols] = p.shape[..] else {
            return Err(Error::format("alignment checkpoint", "expected a matrix"));
        };
        if rows < 2 || cols == 0 || p.data.len() != rows * cols {
            return Err(Error::format("alignment checkpoint", "bad matrix shape"));
        }
        Ok(SemanticAlignment {
            weights: p.data.chunks(cols).map(<[f64]>::to_vec).collect(),
        })
    }
}

/// Solves `A X = B` for symmetric positive-definite `A` by Gaussian
/// elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<Vec<f64>>) -> Result<Vec<Vec<f64>>> {
    let n = a.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("non-empty range");
        if a[pivot][col].abs() < 1e-12 {
            return Err(Error::Numerical {
                module: "patch_select",
                op: "semantic_alignment",
            });
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            for k in 0..b[row].len() {
                b[row][k] -= f * b[col][k];
            }
        }
    }
    for col in (0..n).rev() {
        for k in 0..b[col].len() {
            let mut v = b[col][k];
            for j in col + 1..n {
                v -= a[col][j] * b[j][k];
            }
            b[col][k] = v / a[col][col];
        }
    }
    Ok(b)
}

/// Baseline prototype taken straight from the class semantic embedding.
/// Without an alignment the provider must already emit selection-space
/// vectors.
pub fn semantic_prototype_baseline(
    class_name: &str,
    provider: &dyn SemanticProvider,
    alignment: Option<&SemanticAlignment>,
    selection_dim: usize,
) -> Result<ClassPrototype> {
    let a = provider.embedding(class_name)?;
    let embedding = match alignment {
        Some(al) => al.apply(&a)?,
        None => a,
    };
    if embedding.dim() != selection_dim {
        return Err(Error::dim("semantic prototype", selection_dim, embedding.dim()));
    }
    Ok(ClassPrototype {
        embedding,
        source: PrototypeSource::Semantic,
        class_name: class_name.to_owned(),
        sample_count: 1,
    })
}

/// Min-max normalised similarity of the exemplar with every feature
/// location. A constant map normalises to all ones.
pub fn normalized_heatmap(features: &FeatureMap, exemplar: &Embedding) -> Result<Grid> {
    let mut s = crate::counter::similarity_map(features, exemplar)?;
    let lo = s.data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = s.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    for v in s.data.iter_mut() {
        *v = if range > 0.0 { (*v - lo) / range } else { 1.0 };
    }
    Ok(s)
}

/// Binary mask (0/1) of locations whose normalised similarity reaches `threshold`.
pub fn relevance_heatmap(features: &FeatureMap, exemplar: &Embedding, threshold: f64) -> Result<Grid> {
    let mut h = normalized_heatmap(features, exemplar)?;
    for v in h.data.iter_mut() {
        *v = if *v >= threshold { 1.0 } else { 0.0 };
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{Backbone, BackboneConfig};

    fn proto(v: &[f64]) -> ClassPrototype {
        ClassPrototype {
            embedding: Embedding(v.to_vec()),
            source: PrototypeSource::Vae,
            class_name: "c".into(),
            sample_count: 1,
        }
    }

    fn props(n: usize) -> Vec<Proposal> {
        (0..n)
            .map(|i| Proposal {
                rect: Rect::new(i, 0, i + 1, 1).unwrap(),
                objectness: None,
                source: ProposalSource::SlidingWindow,
            })
            .collect()
    }

    #[test]
    fn nearest_examples() {
        let e = vec![Embedding(vec![0.0, 0.0]), Embedding(vec![3.0, 4.0]), Embedding(vec![6.0, 8.0])];
        let r = select_with_embeddings(&props(3), &e, &proto(&[0.0, 0.0]), 2).unwrap();
        let got: Vec<(usize, f64)> = r.ranked.iter().map(|(p, d)| (p.rect.x0, *d)).collect();
        assert_eq!(got, vec![(0, 0.0), (1, 5.0)]);
        let r = select_with_embeddings(&props(3), &e, &proto(&[3.0, 4.0]), 10).unwrap();
        assert_eq!(r.ranked.len(), 3);
        assert_eq!(r.ranked[0].0.rect.x0, 1);
        assert_eq!(r.ranked[0].1, 0.0);
        assert!(select_with_embeddings(&props(3), &e, &proto(&[0.0, 0.0]), 0).is_err());
    }

    #[test]
    fn sliding_window_stays_in_bounds() {
        let sw = SlidingWindow::default();
        for (h, w) in [(16, 16), (17, 40), (96, 96), (50, 33)] {
            let img = Tensor::zeros(3, h, w);
            let p = sw.proposals("x", &img).unwrap();
            assert!(!p.is_empty());
            assert!(p.iter().all(|p| p.rect.fits(h, w)));
        }
        assert!(sw.proposals("x", &Tensor::zeros(3, 8, 8)).unwrap().is_empty());
    }

    #[test]
    fn objectness_peaks_on_centered_object() {
        let mut img = Tensor::zeros(3, 48, 48);
        for y in 28..36 {
            for x in 12..20 {
                *img.at_mut(0, y, x) = 1.0;
            }
        }
        let sw = SlidingWindow {
            sizes: vec![16],
            objectness: true,
        };
        let p = sw.proposals("x", &img).unwrap();
        assert!(p.iter().all(|p| (0.0..=1.0).contains(&p.objectness.unwrap())));
        let best = p.iter().max_by(|a, b| a.objectness.unwrap().total_cmp(&b.objectness.unwrap())).unwrap();
        assert_eq!(best.rect, Rect::new(8, 24, 24, 40).unwrap());
        assert_eq!(best.objectness, Some(1.0));
        let plain = SlidingWindow { objectness: false, ..sw };
        assert!(plain.proposals("x", &img).unwrap().iter().all(|p| p.objectness.is_none()));
    }

    #[test]
    fn propose_caps_and_dedups() {
        let img = Tensor::zeros(3, 96, 96);
        let cfg = ProposalConfig::default();
        let p = propose("a", &img, &SlidingWindow::default(), &cfg).unwrap();
        assert_eq!(p.len(), 100);
        assert_eq!(p, propose("a", &img, &SlidingWindow::default(), &cfg).unwrap());
        let rects: HashSet<Rect> = p.iter().map(|p| p.rect).collect();
        assert_eq!(rects.len(), p.len());
        let small = Tensor::zeros(3, 8, 8);
        assert!(matches!(
            propose("a", &small, &SlidingWindow::default(), &cfg),
            Err(Error::NoProposals)
        ));
    }

    #[test]
    fn propose_prefers_objectness_when_present() {
        struct Fixed;
        impl ProposalProvider for Fixed {
            fn proposals(&self, _: &str, _: &Tensor) -> Result<Vec<Proposal>> {
                parse_proposals("0 0 4 4 0.1\n0 0 4 4 0.9\n1 1 5 5 0.8\n2 2 6 6 0.95\n0 0 99 99 1.0\n")
            }
        }
        let cfg = ProposalConfig {
            max_proposals: 2,
            ..ProposalConfig::default()
        };
        let p = propose("a", &Tensor::zeros(3, 16, 16), &Fixed, &cfg).unwrap();
        let rects: Vec<Rect> = p.iter().map(|p| p.rect).collect();
        assert_eq!(rects, vec![Rect::new(2, 2, 6, 6).unwrap(), Rect::new(1, 1, 5, 5).unwrap()]);
    }

    #[test]
    fn proposal_file_format() {
        let p = parse_proposals("# header\n1 2 10 12 0.5\n3 4 5 6\n").unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(p[0].objectness, Some(0.5));
        assert_eq!(p[1].rect, Rect::new(3, 4, 5, 6).unwrap());
        assert_eq!(parse_proposals(&format_proposals(&p)).unwrap(), p);
        assert!(parse_proposals("1 2 3\n").is_err());
        assert!(parse_proposals("5 5 5 9\n").is_err());
        assert!(parse_proposals("0 0 4 4 1.5\n").is_err());
    }

    #[test]
    fn heatmap_thresholds() {
        let f = Tensor::from_vec(1, 2, 2, vec![1.0, 2.0, 3.0, 5.0]).unwrap();
        let e = Embedding(vec![1.0]);
        assert!(relevance_heatmap(&f, &e, 0.0).unwrap().data.iter().all(|&v| v == 1.0));
        assert!(relevance_heatmap(&f, &e, 1.01).unwrap().data.iter().all(|&v| v == 0.0));
        assert_eq!(relevance_heatmap(&f, &e, 0.5).unwrap().data, vec![0.0, 0.0, 1.0, 1.0]);
        let c = Tensor::filled(1, 3, 3, 0.7);
        assert!(relevance_heatmap(&c, &e, 0.99).unwrap().data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn alignment_recovers_linear_map() {
        // Targets are an exact affine function of the inputs.
        let f = |a: &[f64]| Embedding(vec![2.0 * a[0] - a[1] + 0.5, a[1] * 3.0, -1.0]);
        let pairs: Vec<(Embedding, Embedding)> = [[0.0, 1.0], [1.0, 0.0], [1.0, 1.0], [2.0, -1.0]]
            .iter()
            .map(|a| (Embedding(a.to_vec()), f(a)))
            .collect();
        let al = SemanticAlignment::fit(&pairs, 1e-9).unwrap();
        let got = al.apply(&Embedding(vec![0.3, 0.7])).unwrap();
        let back = SemanticAlignment::from_archive(&Archive::from_bytes(&al.to_archive().to_bytes()).unwrap()).unwrap();
        assert_eq!(back, al);
        for (g, w) in got.0.iter().zip(&f(&[0.3, 0.7]).0) {
            assert!((g - w).abs() < 1e-6);
        }
    }

    #[test]
    fn semantic_baseline_checks_dimension() {
        let sem = crate::vae::SyntheticSemantics;
        let p = semantic_prototype_baseline("red_disc", &sem, None, crate::synth::SEMANTIC_DIM).unwrap();
        assert_eq!(p.source, PrototypeSource::Semantic);
        assert_eq!(p.sample_count, 1);
        assert!(matches!(
            semantic_prototype_baseline("red_disc", &sem, None, 32),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn class_relevant_ranks_own_patch_first() {
        let mut rng = substream(0, "t");
        let embedder = Embedder::new(Backbone::new(&BackboneConfig::default(), &mut rng), 32);
        let mut img = Tensor::zeros(3, 48, 48);
        for y in 8..24 {
            for x in 8..24 {
                *img.at_mut(0, y, x) = 1.0;
            }
        }
        let sw = SlidingWindow { sizes: vec![16], objectness: false };
        let props = sw.proposals("x", &img).unwrap();
        let target = props.iter().position(|p| p.rect == Rect::new(8, 8, 24, 24).unwrap()).unwrap();
        let p = ClassPrototype {
            embedding: embedder.embed_rect(&img, props[target].rect).unwrap(),
            ..proto(&[])
        };
        let r = class_relevant(&props, &img, &p, 3, &embedder).unwrap();
        assert_eq!(r.ranked[0].0.rect, props[target].rect);
        assert_eq!(r.ranked[0].1, 0.0);
        assert_eq!(r, class_relevant(&props, &img, &p, 3, &embedder).unwrap());
    }
}
