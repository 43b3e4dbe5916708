//! Deterministic synthetic counting benchmark.
//!
//! Scenes contain objects of one target class (plus, sometimes, one
//! distractor class) drawn as flat-colored shapes on a noisy gray background.
//! Each scene comes with tight bounding boxes and a density map built from
//! unit-mass Gaussians on the target objects only. Classes are split into
//! disjoint train/val/test sets so that evaluation is zero-shot.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{Embedder, Embedding};
use crate::imageio;
use crate::rng::derive_seed;
use crate::tensor::{Grid, Rect, Tensor};

pub const SEMANTIC_DIM: usize = 16;
pub const MAX_PAIR_IOU: f64 = 0.2;
pub const PLACEMENT_ATTEMPTS: usize = 1000;
const MANIFEST_VERSION: u32 = 1;
const DENSITY_MAGIC: &[u8; 8] = b"ZSCDENS1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Disc,
    Square,
    Triangle,
    Cross,
    Ring,
}

impl Shape {
    fn index(self) -> usize {
        self as usize
    }

    /// Whether offset `(dx, dy)` from the centre lies inside a shape of size `r`.
    fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            Shape::Disc => dx * dx + dy * dy <= r * r,
            Shape::Square => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
            Shape::Triangle => dy <= 0.5 * r && dy >= -r + 3f64.sqrt() * dx.abs(),
            Shape::Cross => {
                (dx.abs() <= r && dy.abs() <= 0.3 * r) || (dy.abs() <= r && dx.abs() <= 0.3 * r)
            }
            Shape::Ring => {
                let d2 = dx * dx + dy * dy;
                d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassStyle {
    pub name: &'static str,
    pub shape: Shape,
    pub color: [f64; 3],
    /// Object size range in pixels (circumradius).
    pub radius: (f64, f64),
}

pub const CLASSES: [ClassStyle; 12] = [
    ClassStyle { name: "red_disc", shape: Shape::Disc, color: [0.90, 0.15, 0.15], radius: (4.5, 6.5) },
    ClassStyle { name: "green_square", shape: Shape::Square, color: [0.20, 0.80, 0.25], radius: (4.5, 6.5) },
    ClassStyle { name: "blue_triangle", shape: Shape::Triangle, color: [0.20, 0.35, 0.95], radius: (5.0, 7.0) },
    ClassStyle { name: "yellow_cross", shape: Shape::Cross, color: [0.95, 0.90, 0.20], radius: (5.0, 7.0) },
    ClassStyle { name: "magenta_ring", shape: Shape::Ring, color: [0.90, 0.25, 0.85], radius: (5.0, 7.0) },
    ClassStyle { name: "cyan_disc", shape: Shape::Disc, color: [0.20, 0.85, 0.90], radius: (4.0, 5.5) },
    ClassStyle { name: "orange_square", shape: Shape::Square, color: [0.95, 0.55, 0.10], radius: (4.0, 5.5) },
    ClassStyle { name: "purple_triangle", shape: Shape::Triangle, color: [0.55, 0.25, 0.80], radius: (4.5, 6.5) },
    ClassStyle { name: "orange_cross", shape: Shape::Cross, color: [0.95, 0.55, 0.10], radius: (4.5, 6.5) },
    ClassStyle { name: "blue_ring", shape: Shape::Ring, color: [0.20, 0.35, 0.95], radius: (4.5, 6.5) },
    ClassStyle { name: "green_disc", shape: Shape::Disc, color: [0.20, 0.80, 0.25], radius: (4.5, 6.5) },
    ClassStyle { name: "red_square", shape: Shape::Square, color: [0.90, 0.15, 0.15], radius: (4.0, 5.5) },
];

pub fn class_id(name: &str) -> Result<usize> {
    CLASSES
        .iter()
        .position(|c| c.name == name)
        .ok_or_else(|| Error::UnknownClass(name.to_owned()))
}

/// Per-image appearance shift applied to every target object, scaled by the
/// dataset's intra-class diversity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StyleVariant {
    pub color_shift: [f64; 3],
    pub size_scale: f64,
}

impl StyleVariant {
    pub const NONE: StyleVariant = StyleVariant {
        color_shift: [0.0; 3],
        size_scale: 1.0,
    };

    pub fn sample<R: Rng + ?Sized>(diversity: f64, rng: &mut R) -> Self {
        let mut color_shift = [0.0; 3];
        for c in color_shift.iter_mut() {
            *c = diversity * rng.random_range(-0.4..0.4);
        }
        StyleVariant {
            color_shift,
            size_scale: 1.0 + diversity * rng.random_range(-0.2..0.2),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub class_id: usize,
    pub object_count: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    /// Distractor class and its object count.
    pub distractor: Option<(usize, usize)>,
    pub diversity: f64,
}

#[derive(Clone, Debug)]
pub struct Scene {
    pub image: Tensor,
    pub boxes: Vec<Rect>,
    pub density: Grid,
    pub distractor_boxes: Vec<Rect>,
}

#[derive(Clone, Copy, Debug)]
struct Placed {
    cx: f64,
    cy: f64,
    r: f64,
    rect: Rect,
}

fn object_rect(cx: f64, cy: f64, r: f64) -> Rect {
    Rect {
        x0: (cx - r).floor() as usize,
        y0: (cy - r).floor() as usize,
        x1: (cx + r).ceil() as usize,
        y1: (cy + r).ceil() as usize,
    }
}

fn background<R: Rng + ?Sized>(h: usize, w: usize, rng: &mut R) -> Tensor {
    let level: f64 = rng.random_range(0.05..0.3);
    let mut img = Tensor::zeros(3, h, w);
    for y in 0..h {
        for x in 0..w {
            let n: f64 = rng.random_range(-0.03..0.03);
            for c in 0..3 {
                *img.at_mut(c, y, x) = level + n;
            }
        }
    }
    img
}

/// Paints one object with 2x2 supersampled coverage.
fn paint(img: &mut Tensor, shape: Shape, color: [f64; 3], cx: f64, cy: f64, r: f64) {
    let y0 = (cy - r - 1.0).floor().max(0.0) as usize;
    let y1 = ((cy + r + 1.0).ceil() as usize).min(img.h);
    let x0 = (cx - r - 1.0).floor().max(0.0) as usize;
    let x1 = ((cx + r + 1.0).ceil() as usize).min(img.w);
    for y in y0..y1 {
        for x in x0..x1 {
            let mut cover = 0.0;
            for sy in [0.25, 0.75] {
                for sx in [0.25, 0.75] {
                    if shape.contains(x as f64 + sx - cx, y as f64 + sy - cy, r) {
                        cover += 0.25;
                    }
                }
            }
            if cover > 0.0 {
                for (c, &col) in color.iter().enumerate() {
                    let v = img.at_mut(c, y, x);
                    *v = *v * (1.0 - cover) + col * cover;
                }
            }
        }
    }
}

fn jittered_color<R: Rng + ?Sized>(base: [f64; 3], variant: &StyleVariant, rng: &mut R) -> [f64; 3] {
    let mut out = [0.0; 3];
    for c in 0..3 {
        out[c] = (base[c] + variant.color_shift[c] + rng.random_range(-0.04..0.04)).clamp(0.0, 1.0);
    }
    out
}

fn quantize(img: &mut Tensor) {
    for v in img.data.iter_mut() {
        *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
    }
}

/// Adds a unit-mass Gaussian (sigma = r/2, truncated at 4 sigma) at `(cx, cy)`.
fn add_kernel(density: &mut Grid, cx: f64, cy: f64, r: f64) {
    let sigma = r / 2.0;
    let cutoff = 4.0 * sigma;
    let y0 = (cy - cutoff).floor().max(0.0) as usize;
    let y1 = ((cy + cutoff).ceil() as usize).min(density.h);
    let x0 = (cx - cutoff).floor().max(0.0) as usize;
    let x1 = ((cx + cutoff).ceil() as usize).min(density.w);
    let mut cells = Vec::new();
    let mut mass = 0.0;
    for y in y0..y1 {
        for x in x0..x1 {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let d2 = dx * dx + dy * dy;
            if d2 <= cutoff * cutoff {
                let v = (-d2 / (2.0 * sigma * sigma)).exp();
                mass += v;
                cells.push((y * density.w + x, v));
            }
        }
    }
    for (i, v) in cells {
        density.data[i] += v / mass;
    }
}

fn place<R: Rng + ?Sized>(
    placed: &mut Vec<Placed>,
    style: &ClassStyle,
    scale: f64,
    h: usize,
    w: usize,
    index: usize,
    total: usize,
    rng: &mut R,
) -> Result<Placed> {
    for _ in 0..PLACEMENT_ATTEMPTS {
        let r = rng.random_range(style.radius.0..style.radius.1) * scale;
        let margin = r + 1.0;
        if 2.0 * margin >= h.min(w) as f64 {
            break;
        }
        let cx = rng.random_range(margin..w as f64 - margin);
        let cy = rng.random_range(margin..h as f64 - margin);
        let rect = object_rect(cx, cy, r);
        if placed.iter().all(|p| p.rect.iou(&rect) <= MAX_PAIR_IOU) {
            let p = Placed { cx, cy, r, rect };
            placed.push(p);
            return Ok(p);
        }
    }
    Err(Error::PlacementFailure {
        index,
        total,
        attempts: PLACEMENT_ATTEMPTS,
    })
}

pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    let style = CLASSES
        .get(spec.class_id)
        .ok_or_else(|| Error::UnknownClass(spec.class_id.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut image = background(spec.height, spec.width, &mut rng);
    let variant = StyleVariant::sample(spec.diversity, &mut rng);
    let mut density = Grid::zeros(spec.height, spec.width);

    let n_distract = spec.distractor.map(|(_, n)| n).unwrap_or(0);
    let total = spec.object_count + n_distract;
    let mut placed = Vec::with_capacity(total);
    let mut boxes = Vec::with_capacity(spec.object_count);
    for i in 0..spec.object_count {
        let p = place(&mut placed, style, variant.size_scale, spec.height, spec.width, i, total, &mut rng)?;
        let color = jittered_color(style.color, &variant, &mut rng);
        paint(&mut image, style.shape, color, p.cx, p.cy, p.r);
        add_kernel(&mut density, p.cx, p.cy, p.r);
        boxes.push(p.rect);
    }
    let mut distractor_boxes = Vec::new();
    if let Some((cid, n)) = spec.distractor {
        let dstyle = CLASSES
            .get(cid)
            .ok_or_else(|| Error::UnknownClass(cid.to_string()))?;
        let dvariant = StyleVariant::sample(spec.diversity, &mut rng);
        for i in 0..n {
            let idx = spec.object_count + i;
            let p = place(&mut placed, dstyle, dvariant.size_scale, spec.height, spec.width, idx, total, &mut rng)?;
            let color = jittered_color(dstyle.color, &dvariant, &mut rng);
            paint(&mut image, dstyle.shape, color, p.cx, p.cy, p.r);
            distractor_boxes.push(p.rect);
        }
    }
    quantize(&mut image);
    Ok(Scene {
        image,
        boxes,
        density,
        distractor_boxes,
    })
}

/// Synthetic stand-in for a text embedding of the class name:
/// `[shape one-hot (5) | color RGB (3) | size mean, size range (2) | fixed jitter]`.
pub fn class_semantic_embedding(class_id: usize) -> Result<Embedding> {
    let style = CLASSES
        .get(class_id)
        .ok_or_else(|| Error::UnknownClass(class_id.to_string()))?;
    let mut v = vec![0.0; SEMANTIC_DIM];
    v[style.shape.index()] = 1.0;
    v[5..8].copy_from_slice(&style.color);
    v[8] = (style.radius.0 + style.radius.1) / 20.0;
    v[9] = (style.radius.1 - style.radius.0) / 10.0;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(0x5e4a_0000, style.name));
    for x in v[10..].iter_mut() {
        *x = rng.random_range(-0.1..0.1);
    }
    Ok(Embedding(v))
}

/// Renders one object of the class alone on a fresh background, cropped to
/// its bounding box with a one-pixel margin.
pub fn render_object_crop<R: Rng + ?Sized>(class_id: usize, diversity: f64, rng: &mut R) -> Result<Tensor> {
    let style = CLASSES
        .get(class_id)
        .ok_or_else(|| Error::UnknownClass(class_id.to_string()))?;
    let variant = StyleVariant::sample(diversity, rng);
    let r = rng.random_range(style.radius.0..style.radius.1) * variant.size_scale;
    let side = (2.0 * r).ceil() as usize + 2;
    let mut canvas = background(side, side, rng);
    let c = side as f64 / 2.0;
    let color = jittered_color(style.color, &variant, rng);
    paint(&mut canvas, style.shape, color, c, c, r);
    quantize(&mut canvas);
    Ok(canvas)
}

/// Embeddings of `m` freshly rendered single-object crops.
pub fn synthesize_pool_embeddings<R: Rng + ?Sized>(
    class_id: usize,
    m: usize,
    diversity: f64,
    rng: &mut R,
    embedder: &Embedder,
) -> Result<Vec<Embedding>> {
    (0..m)
        .map(|_| embedder.embed_patch(&render_object_crop(class_id, diversity, rng)?))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub train_classes: Vec<String>,
    pub val_classes: Vec<String>,
    pub test_classes: Vec<String>,
    pub images_per_class: usize,
    /// Inclusive range of target-object counts.
    pub count_range: [usize; 2],
    pub distractor_fraction: f64,
    pub distractor_count: [usize; 2],
    pub height: usize,
    pub width: usize,
    /// Intra-class appearance diversity in [0, 1].
    pub diversity: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        let names = |r: std::ops::Range<usize>| CLASSES[r].iter().map(|c| c.name.to_owned()).collect();
        DatasetConfig {
            train_classes: names(0..8),
            val_classes: names(8..10),
            test_classes: names(10..12),
            images_per_class: 40,
            count_range: [3, 25],
            distractor_fraction: 0.3,
            distractor_count: [2, 8],
            height: 96,
            width: 96,
            diversity: 0.0,
        }
    }
}

impl DatasetConfig {
    pub fn classes(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train_classes,
            Split::Val => &self.val_classes,
            Split::Test => &self.test_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for split in Split::ALL {
            for c in self.classes(split) {
                class_id(c)?;
                if !seen.insert(c.as_str()) {
                    return Err(Error::Config(format!("class `{c}` appears in more than one split")));
                }
            }
        }
        if self.count_range[0] > self.count_range[1] || self.distractor_count[0] > self.distractor_count[1] {
            return Err(Error::Config("empty count range".into()));
        }
        Ok(())
    }
}

/// One annotated image. A real-data adapter fills the same fields: image
/// path, class name, target-class boxes, count (= number of boxes) and a
/// density-map path in the binary grid format of [`write_density`].
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    pub split: Split,
    pub class_name: String,
    pub image: PathBuf,
    pub density: PathBuf,
    pub count: usize,
    pub boxes: Vec<Rect>,
}

impl ManifestRecord {
    /// `<split>/<file stem>`, e.g. `test/red_square_003`.
    pub fn id(&self) -> String {
        let stem = self.image.file_stem().map(|s| s.to_string_lossy()).unwrap_or_default();
        format!("{}/{stem}", self.split.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub diversity: f64,
    /// Directory that record paths are relative to.
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn classes(&self, split: Split) -> BTreeSet<String> {
        self.records
            .iter()
            .filter(|r| r.split == split)
            .map(|r| r.class_name.clone())
            .collect()
    }

    pub fn records(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn check_disjoint(&self) -> Result<()> {
        let sets: Vec<_> = Split::ALL.iter().map(|&s| self.classes(s)).collect();
        for i in 0..3 {
            for j in i + 1..3 {
                let shared: Vec<String> = sets[i].intersection(&sets[j]).cloned().collect();
                if !shared.is_empty() {
                    return Err(Error::format(
                        "manifest",
                        format!(
                            "splits {} and {} share classes {shared:?}",
                            Split::ALL[i].as_str(),
                            Split::ALL[j].as_str()
                        ),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("version\t{}\n", self.version));
        s.push_str(&format!("seed\t{}\n", self.seed));
        s.push_str(&format!("diversity\t{}\n", self.diversity));
        for r in &self.records {
            let boxes: Vec<String> = r.boxes.iter().map(|b| b.to_string()).collect();
            s.push_str(&format!(
                "record\t{}\t{}\t{}\t{}\t{}\t{}\n",
                r.split.as_str(),
                r.class_name,
                r.image.display(),
                r.density.display(),
                r.count,
                boxes.join(";")
            ));
        }
        s
    }

    pub fn from_text(text: &str, root: &Path) -> Result<Self> {
        let bad = |line: usize, msg: &str| Error::format("manifest", format!("line {}: {msg}", line + 1));
        let mut version = None;
        let mut seed = None;
        let mut diversity = 0.0;
        let mut records = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            match fields[0] {
                "version" if fields.len() == 2 => {
                    version = Some(fields[1].parse().map_err(|_| bad(ln, "bad version"))?)
                }
                "seed" if fields.len() == 2 => seed = Some(fields[1].parse().map_err(|_| bad(ln, "bad seed"))?),
                "diversity" if fields.len() == 2 => {
                    diversity = fields[1].parse().map_err(|_| bad(ln, "bad diversity"))?
                }
                "record" if fields.len() == 7 => {
                    let boxes = if fields[6].is_empty() {
                        Vec::new()
                    } else {
                        fields[6]
                            .split(';')
                            .map(|b| parse_rect(b).ok_or_else(|| bad(ln, "bad box")))
                            .collect::<Result<Vec<_>>>()?
                    };
                    let count: usize = fields[5].parse().map_err(|_| bad(ln, "bad count"))?;
                    if count != boxes.len() {
                        return Err(bad(ln, "count differs from number of boxes"));
                    }
                    records.push(ManifestRecord {
                        split: fields[1].parse()?,
                        class_name: fields[2].to_owned(),
                        image: PathBuf::from(fields[3]),
                        density: PathBuf::from(fields[4]),
                        count,
                        boxes,
                    });
                }
                _ => return Err(bad(ln, "unrecognized line")),
            }
        }
        let version = version.ok_or_else(|| Error::format("manifest", "missing version"))?;
        if version != MANIFEST_VERSION {
            return Err(Error::format("manifest", format!("unsupported version {version}")));
        }
        let m = DatasetManifest {
            version,
            seed: seed.ok_or_else(|| Error::format("manifest", "missing seed"))?,
            diversity,
            root: root.to_path_buf(),
            records,
        };
        m.check_disjoint()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = fs::read_to_string(path)?;
        let root = path.parent().unwrap_or(Path::new("."));
        Self::from_text(&text, root)
    }

    /// Loads every image and density map of `split`, in manifest order.
    pub fn load_split(&self, split: Split) -> Result<Vec<AnnotatedImage>> {
        self.records(split)
            .map(|r| {
                let image = imageio::load_rgb(&self.root.join(&r.image))?;
                let density = read_density(&self.root.join(&r.density))?;
                Ok(AnnotatedImage {
                    id: r.id(),
                    class_name: r.class_name.clone(),
                    image,
                    density,
                    boxes: r.boxes.clone(),
                    count: r.count,
                })
            })
            .collect()
    }
}

fn parse_rect(s: &str) -> Option<Rect> {
    let v: Vec<usize> = s.split(',').map(|x| x.trim().parse().ok()).collect::<Option<_>>()?;
    if v.len() != 4 {
        return None;
    }
    Rect::new(v[0], v[1], v[2], v[3]).ok()
}

/// An image with its target-class annotations, in memory.
#[derive(Clone, Debug)]
pub struct AnnotatedImage {
    pub id: String,
    pub class_name: String,
    pub image: Tensor,
    pub density: Grid,
    pub boxes: Vec<Rect>,
    pub count: usize,
}

/// Scene spec for image `index` of `class` in `split`. All randomness of a
/// scene flows from its own seed.
pub fn scene_spec(config: &DatasetConfig, seed: u64, split: Split, class: &str, index: usize) -> Result<SceneSpec> {
    let cid = class_id(class)?;
    let scene_seed = derive_seed(seed, &format!("scene/{}/{class}/{index}", split.as_str()));
    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed ^ 0x9e37_79b9_7f4a_7c15);
    let object_count = rng.random_range(config.count_range[0]..=config.count_range[1]);
    let others: Vec<&String> = config.classes(split).iter().filter(|c| c.as_str() != class).collect();
    let distractor = if !others.is_empty() && rng.random_bool(config.distractor_fraction.clamp(0.0, 1.0)) {
        let other = others[rng.random_range(0..others.len())];
        let n = rng.random_range(config.distractor_count[0]..=config.distractor_count[1]);
        Some((class_id(other)?, n))
    } else {
        None
    };
    Ok(SceneSpec {
        class_id: cid,
        object_count,
        height: config.height,
        width: config.width,
        seed: scene_seed,
        distractor,
        diversity: config.diversity,
    })
}

/// Generates the full dataset under `out_dir` and writes `manifest.txt`.
pub fn build_dataset(config: &DatasetConfig, seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    config.validate()?;
    let mut records = Vec::new();
    for split in Split::ALL {
        let img_dir = out_dir.join("images").join(split.as_str());
        let den_dir = out_dir.join("density").join(split.as_str());
        fs::create_dir_all(&img_dir)?;
        fs::create_dir_all(&den_dir)?;
        for class in config.classes(split) {
            for i in 0..config.images_per_class {
                let spec = scene_spec(config, seed, split, class, i)?;
                let scene = generate_scene(&spec)?;
                let stem = format!("{class}_{i:03}");
                let image = PathBuf::from("images").join(split.as_str()).join(format!("{stem}.png"));
                let density = PathBuf::from("density").join(split.as_str()).join(format!("{stem}.bin"));
                imageio::save_rgb(&scene.image, &out_dir.join(&image))?;
                write_density(&scene.density, &out_dir.join(&density))?;
                records.push(ManifestRecord {
                    split,
                    class_name: class.clone(),
                    image,
                    density,
                    count: scene.boxes.len(),
                    boxes: scene.boxes,
                });
            }
        }
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        seed,
        diversity: config.diversity,
        root: out_dir.to_path_buf(),
        records,
    };
    manifest.check_disjoint()?;
    manifest.save(&out_dir.join("manifest.txt"))?;
    Ok(manifest)
}

/// Density grid file: 8-byte magic, u32 height, u32 width (16-byte header),
/// then `h*w` little-endian f32 values, row-major.
pub fn write_density(grid: &Grid, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + grid.data.len() * 4);
    buf.extend_from_slice(DENSITY_MAGIC);
    buf.extend_from_slice(&(grid.h as u32).to_le_bytes());
    buf.extend_from_slice(&(grid.w as u32).to_le_bytes());
    for &v in &grid.data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn read_density(path: &Path) -> Result<Grid> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let buf = fs::read(path)?;
    if buf.len() < 16 || &buf[..8] != DENSITY_MAGIC {
        return Err(Error::format("density map", "bad header"));
    }
    let h = u32::from_le_bytes(buf[8..12].try_into().expect("4 bytes")) as usize;
    let w = u32::from_le_bytes(buf[12..16].try_into().expect("4 bytes")) as usize;
    if buf.len() != 16 + h * w * 4 {
        return Err(Error::format("density map", "size does not match header"));
    }
    let data = buf[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Grid::from_vec(h, w, data)
}

/// Picks `k` distinct boxes uniformly at random.
pub fn sample_boxes<R: Rng + ?Sized>(boxes: &[Rect], k: usize, rng: &mut R) -> Vec<Rect> {
    let k = k.min(boxes.len());
    sample(rng, boxes.len(), k).into_iter().map(|i| boxes[i]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(count: usize, seed: u64) -> SceneSpec {
        SceneSpec {
            class_id: 0,
            object_count: count,
            height: 96,
            width: 96,
            seed,
            distractor: Some((2, 5)),
            diversity: 0.0,
        }
    }

    #[test]
    fn empty_scene_has_zero_density() {
        let s = generate_scene(&SceneSpec { distractor: None, ..spec(0, 1) }).unwrap();
        assert!(s.boxes.is_empty());
        assert!(s.density.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn density_sums_to_count() {
        let s = generate_scene(&spec(7, 2)).unwrap();
        assert!((s.density.sum() - 7.0).abs() < 1e-3);
        assert_eq!(s.boxes.len(), 7);
        assert_eq!(s.distractor_boxes.len(), 5);
    }

    #[test]
    fn scenes_are_reproducible() {
        let a = generate_scene(&spec(12, 3)).unwrap();
        let b = generate_scene(&spec(12, 3)).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.density, b.density);
        let c = generate_scene(&spec(12, 4)).unwrap();
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn distractors_add_no_mass() {
        let with = generate_scene(&spec(6, 5)).unwrap();
        let without = generate_scene(&SceneSpec { distractor: None, ..spec(6, 5) }).unwrap();
        assert!((with.density.sum() - 6.0).abs() < 1e-9);
        assert!((without.density.sum() - 6.0).abs() < 1e-9);
        // target objects are placed first with the same stream
        assert_eq!(with.boxes, without.boxes);
    }

    #[test]
    fn objects_stay_in_bounds() {
        let s = generate_scene(&spec(25, 6)).unwrap();
        for b in s.boxes.iter().chain(&s.distractor_boxes) {
            assert!(b.fits(96, 96));
        }
        for (i, a) in s.boxes.iter().enumerate() {
            for b in &s.boxes[i + 1..] {
                assert!(a.iou(b) <= MAX_PAIR_IOU);
            }
        }
    }

    #[test]
    fn overcrowded_scene_fails_placement() {
        let s = SceneSpec {
            height: 20,
            width: 20,
            distractor: None,
            ..spec(40, 7)
        };
        assert!(matches!(generate_scene(&s), Err(Error::PlacementFailure { .. })));
    }

    #[test]
    fn semantic_embedding_layout() {
        let e = class_semantic_embedding(2).unwrap();
        assert_eq!(e.dim(), SEMANTIC_DIM);
        assert_eq!(&e.0[..5], &[0.0, 0.0, 1.0, 0.0, 0.0]);
        assert_eq!(&e.0[5..8], &CLASSES[2].color);
        assert_eq!(e, class_semantic_embedding(2).unwrap());
        assert!(class_semantic_embedding(99).is_err());
    }

    #[test]
    fn default_splits_are_disjoint() {
        let cfg = DatasetConfig::default();
        cfg.validate().unwrap();
        assert_eq!(
            (cfg.train_classes.len(), cfg.val_classes.len(), cfg.test_classes.len()),
            (8, 2, 2)
        );
        let mut bad = cfg.clone();
        bad.test_classes.push("red_disc".into());
        assert!(bad.validate().is_err());
    }

    #[test]
    fn manifest_rejects_overlapping_splits() {
        let text = "version\t1\nseed\t1\nrecord\ttrain\tred_disc\ta.png\ta.bin\t1\t0,0,4,4\nrecord\ttest\tred_disc\tb.png\tb.bin\t0\t\n";
        assert!(DatasetManifest::from_text(text, Path::new(".")).is_err());
        let ok = text.replace("test\tred_disc", "test\tgreen_disc");
        let m = DatasetManifest::from_text(&ok, Path::new(".")).unwrap();
        assert_eq!(DatasetManifest::from_text(&m.to_text(), Path::new(".")).unwrap(), m);
    }

    #[test]
    fn density_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.bin");
        let s = generate_scene(&spec(4, 8)).unwrap();
        write_density(&s.density, &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(bytes.len(), 16 + 96 * 96 * 4);
        let g = read_density(&p).unwrap();
        assert!((g.sum() - 4.0).abs() < 1e-3);
    }
}
