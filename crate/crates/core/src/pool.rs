//! Image-specific prototypes from a pool of generated patch embeddings.
//!
//! A pool provider stands in for an external text-to-image pipeline: it yields
//! `m` selection-space embeddings for a class name. The prototype averages
//! the `k` pool members closest (in mean L2 distance) to the query image's
//! proposal embeddings.

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{Embedder, Embedding};
use crate::prototype::{ClassPrototype, PrototypeSource};
use crate::rng::substream;
use crate::synth::{class_id, generate_scene, synthesize_pool_embeddings, SceneSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolProvenance {
    File,
    SyntheticGenerator,
    Plugin,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchPool {
    pub class_name: String,
    pub embeddings: Vec<Embedding>,
    pub provenance: PoolProvenance,
}

impl PatchPool {
    pub fn new(class_name: &str, embeddings: Vec<Embedding>, provenance: PoolProvenance) -> Result<Self> {
        let first = embeddings
            .first()
            .ok_or_else(|| Error::InvalidArgument(format!("empty patch pool for `{class_name}`")))?;
        let d = first.dim();
        if let Some(bad) = embeddings.iter().find(|e| e.dim() != d) {
            return Err(Error::dim("patch pool embedding", d, bad.dim()));
        }
        Ok(PatchPool {
            class_name: class_name.to_owned(),
            embeddings,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings[0].dim()
    }

    /// Text form: `class_name m d` header, then `m` rows of `d` decimals.
    pub fn to_text(&self) -> String {
        let mut out = format!("{} {} {}\n", self.class_name, self.len(), self.dim());
        for e in &self.embeddings {
            let row: Vec<String> = e.0.iter().map(|v| v.to_string()).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str, provenance: PoolProvenance) -> Result<Self> {
        let bad = |d: String| Error::format("pool file", d);
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| bad("missing header".into()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        let [name, m, d] = fields[..] else {
            return Err(bad(format!("header needs `class m d`, got `{header}`")));
        };
        let m: usize = m.parse().map_err(|e| bad(format!("pool size: {e}")))?;
        let d: usize = d.parse().map_err(|e| bad(format!("dimension: {e}")))?;
        let embeddings = lines
            .map(|l| {
                let row = l
                    .split_whitespace()
                    .map(str::parse::<f64>)
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| bad(e.to_string()))?;
                if row.len() != d {
                    return Err(Error::dim("pool file row", d, row.len()));
                }
                Ok(Embedding(row))
            })
            .collect::<Result<Vec<_>>>()?;
        if embeddings.len() != m {
            return Err(bad(format!("header says {m} rows, found {}", embeddings.len())));
        }
        PatchPool::new(name, embeddings, provenance)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path, provenance: PoolProvenance) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::from_text(&std::fs::read_to_string(path)?, provenance)
    }
}

pub trait PoolProvider: Send + Sync {
    /// Up to `m` embeddings for `class_name` (file providers return what they hold).
    fn pool(&self, class_name: &str, m: usize) -> Result<PatchPool>;
}

/// How the synthetic provider fabricates "generated" patches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolGenerator {
    /// One single-object render on a blank canvas per member.
    Crops,
    /// Whole scenes of the class; each scene's object boxes become members,
    /// so members carry the same scene context as objects in query images.
    #[default]
    SceneObjects,
}

/// Synthetic stand-in for a text-to-image generator over the built-in classes.
pub struct SyntheticPoolProvider {
    pub embedder: Embedder,
    pub diversity: f64,
    pub seed: u64,
    pub generator: PoolGenerator,
    /// Scene height and width for [`PoolGenerator::SceneObjects`].
    pub scene_size: (usize, usize),
    pub count_range: [usize; 2],
    /// Objects embedded per generated scene.
    pub per_scene: usize,
}

impl SyntheticPoolProvider {
    fn scene_objects<R: Rng + ?Sized>(&self, id: usize, m: usize, rng: &mut R) -> Result<Vec<Embedding>> {
        let per_scene = self.per_scene.max(1);
        let mut out = Vec::with_capacity(m);
        while out.len() < m {
            let spec = SceneSpec {
                class_id: id,
                object_count: rng.random_range(self.count_range[0].max(1)..=self.count_range[1].max(1)),
                height: self.scene_size.0,
                width: self.scene_size.1,
                seed: rng.random(),
                distractor: None,
                diversity: self.diversity,
            };
            let scene = generate_scene(&spec)?;
            for &r in scene.boxes.iter().take(per_scene.min(m - out.len())) {
                out.push(self.embedder.embed_rect(&scene.image, r)?);
            }
        }
        Ok(out)
    }
}

impl PoolProvider for SyntheticPoolProvider {
    fn pool(&self, class_name: &str, m: usize) -> Result<PatchPool> {
        let id = class_id(class_name)?;
        let mut rng = substream(self.seed, &format!("pool/{class_name}"));
        let e = match self.generator {
            PoolGenerator::Crops => synthesize_pool_embeddings(id, m, self.diversity, &mut rng, &self.embedder)?,
            PoolGenerator::SceneObjects => self.scene_objects(id, m, &mut rng)?,
        };
        PatchPool::new(class_name, e, PoolProvenance::SyntheticGenerator)
    }
}

/// Reads `<dir>/<class_name>.pool`.
pub struct FilePoolProvider {
    pub dir: PathBuf,
}

impl PoolProvider for FilePoolProvider {
    fn pool(&self, class_name: &str, _m: usize) -> Result<PatchPool> {
        let pool = PatchPool::load(&self.dir.join(format!("{class_name}.pool")), PoolProvenance::File)?;
        if pool.class_name != class_name {
            return Err(Error::format(
                "pool file",
                format!("expected class `{class_name}`, file holds `{}`", pool.class_name),
            ));
        }
        Ok(pool)
    }
}

/// Runs `program args... <class_name> <output_path>` and reads the pool file
/// the command writes.
pub struct PluginPoolProvider {
    pub program: String,
    pub args: Vec<String>,
    pub work_dir: PathBuf,
}

impl PoolProvider for PluginPoolProvider {
    fn pool(&self, class_name: &str, _m: usize) -> Result<PatchPool> {
        std::fs::create_dir_all(&self.work_dir)?;
        let out = self.work_dir.join(format!("{class_name}.pool"));
        let status = Command::new(&self.program)
            .args(&self.args)
            .arg(class_name)
            .arg(&out)
            .status()?;
        if !status.success() {
            return Err(Error::InvalidArgument(format!(
                "pool plugin `{}` failed for `{class_name}`: {status}",
                self.program
            )));
        }
        let mut pool = PatchPool::load(&out, PoolProvenance::Plugin)?;
        pool.class_name = class_name.to_owned();
        Ok(pool)
    }
}

pub fn build_pool(class_name: &str, provider: &dyn PoolProvider, size: usize) -> Result<PatchPool> {
    if size == 0 {
        return Err(Error::InvalidArgument("pool size must be >= 1".into()));
    }
    provider.pool(class_name, size)
}

/// Pool indices sorted by mean L2 distance to the queries, ascending; ties
/// keep the lower index first.
pub fn rank_pool_by_query(pool: &PatchPool, queries: &[Embedding]) -> Result<Vec<(usize, f64)>> {
    if queries.is_empty() {
        return Err(Error::InvalidArgument("no query embeddings".into()));
    }
    if let Some(q) = queries.iter().find(|q| q.dim() != pool.dim()) {
        return Err(Error::dim("query vs pool embedding", pool.dim(), q.dim()));
    }
    let n = queries.len() as f64;
    let mut scored: Vec<(usize, f64)> = pool
        .embeddings
        .iter()
        .enumerate()
        .map(|(i, g)| (i, queries.iter().map(|q| g.l2_distance(q)).sum::<f64>() / n))
        .collect();
    scored.sort_by(|a, b| a.1.total_cmp(&b.1));
    Ok(scored)
}

/// Number of top-ranked pool members to average: a count or the whole pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "TopKRepr", into = "TopKRepr")]
pub enum TopK {
    Count(usize),
    All,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum TopKRepr {
    Count(usize),
    Word(String),
}

impl TryFrom<TopKRepr> for TopK {
    type Error = Error;

    fn try_from(r: TopKRepr) -> Result<Self> {
        match r {
            TopKRepr::Count(n) => Ok(TopK::Count(n)),
            TopKRepr::Word(w) => w.parse(),
        }
    }
}

impl From<TopK> for TopKRepr {
    fn from(k: TopK) -> Self {
        match k {
            TopK::Count(n) => TopKRepr::Count(n),
            TopK::All => TopKRepr::Word("all".into()),
        }
    }
}

impl FromStr for TopK {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            return Ok(TopK::All);
        }
        s.parse()
            .map(TopK::Count)
            .map_err(|_| Error::InvalidArgument(format!("expected a count or `all`, got `{s}`")))
    }
}

impl fmt::Display for TopK {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TopK::Count(n) => write!(f, "{n}"),
            TopK::All => f.write_str("all"),
        }
    }
}

impl TopK {
    pub fn resolve(self, pool_len: usize) -> Result<usize> {
        match self {
            TopK::All => Ok(pool_len),
            TopK::Count(k) if (1..=pool_len).contains(&k) => Ok(k),
            TopK::Count(k) => Err(Error::InvalidArgument(format!("k = {k} outside 1..={pool_len}"))),
        }
    }
}

/// Mean of the `k` pool embeddings nearest to the query set.
pub fn pool_class_prototype(pool: &PatchPool, queries: &[Embedding], k: TopK) -> Result<ClassPrototype> {
    let k = k.resolve(pool.len())?;
    let ranked = rank_pool_by_query(pool, queries)?;
    let chosen: Vec<Embedding> = ranked[..k].iter().map(|&(i, _)| pool.embeddings[i].clone()).collect();
    ClassPrototype::from_samples(&pool.class_name, PrototypeSource::Pool, &chosen)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool(rows: &[&[f64]]) -> PatchPool {
        PatchPool::new("c", rows.iter().map(|r| Embedding(r.to_vec())).collect(), PoolProvenance::File).unwrap()
    }

    fn emb(rows: &[&[f64]]) -> Vec<Embedding> {
        rows.iter().map(|r| Embedding(r.to_vec())).collect()
    }

    #[test]
    fn ranking_examples() {
        let p = pool(&[&[3.0, 3.0]]);
        assert_eq!(rank_pool_by_query(&p, &emb(&[&[0.0, 0.0]])).unwrap()[0].0, 0);
        let p = pool(&[&[0.0, 0.0], &[10.0, 0.0]]);
        let r = rank_pool_by_query(&p, &emb(&[&[1.0, 0.0], &[-1.0, 0.0]])).unwrap();
        assert_eq!(r[0], (0, 1.0));
        let p = pool(&[&[5.0, 1.0], &[0.0, 0.0], &[5.0, 1.0]]);
        let r = rank_pool_by_query(&p, &emb(&[&[5.0, 1.0]])).unwrap();
        assert_eq!(r.iter().map(|x| x.0).collect::<Vec<_>>(), vec![0, 2, 1]);
    }

    #[test]
    fn prototype_examples() {
        let p = pool(&[&[0.0, 0.0], &[4.0, 0.0], &[100.0, 100.0]]);
        let proto = pool_class_prototype(&p, &emb(&[&[1.0, 0.0]]), TopK::Count(2)).unwrap();
        assert_eq!(proto.embedding.0, vec![2.0, 0.0]);
        assert_eq!(proto.sample_count, 2);
        assert_eq!(proto.source, PrototypeSource::Pool);
        let single = pool(&[&[7.0, -1.0]]);
        let proto = pool_class_prototype(&single, &emb(&[&[0.0, 0.0]]), TopK::All).unwrap();
        assert_eq!(proto.embedding.0, vec![7.0, -1.0]);
        assert!(pool_class_prototype(&p, &emb(&[&[0.0, 0.0]]), TopK::Count(4)).is_err());
        assert!(pool_class_prototype(&p, &emb(&[&[0.0, 0.0]]), TopK::Count(0)).is_err());
        assert!(pool_class_prototype(&p, &[], TopK::All).is_err());
    }

    #[test]
    fn pool_text_round_trip_and_validation() {
        let p = pool(&[&[0.25, -1.5e-7], &[3.0, 1e10]]);
        assert_eq!(PatchPool::from_text(&p.to_text(), PoolProvenance::File).unwrap(), p);
        assert!(PatchPool::from_text("c 2 2\n1 2\n", PoolProvenance::File).is_err());
        assert!(PatchPool::from_text("c 1 2\n1 2 3\n", PoolProvenance::File).is_err());
        assert!(PatchPool::from_text("c 1\n1 2\n", PoolProvenance::File).is_err());
        assert!(PatchPool::new("c", vec![], PoolProvenance::File).is_err());
    }

    #[test]
    fn file_provider_reads_class_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = pool(&[&[1.0, 2.0]]);
        p.save(&dir.path().join("c.pool")).unwrap();
        let provider = FilePoolProvider {
            dir: dir.path().to_path_buf(),
        };
        assert_eq!(build_pool("c", &provider, 5).unwrap().embeddings, p.embeddings);
        assert!(matches!(build_pool("d", &provider, 5), Err(Error::MissingArtifact(_))));
    }

    #[test]
    fn plugin_provider_runs_command() {
        let dir = tempfile::tempdir().unwrap();
        let provider = PluginPoolProvider {
            program: "sh".into(),
            args: vec!["-c".into(), "printf '%s 2 1\\n0.5\\n1.5\\n' \"$0\" > \"$1\"".into()],
            work_dir: dir.path().to_path_buf(),
        };
        let p = build_pool("widget", &provider, 2).unwrap();
        assert_eq!(p.class_name, "widget");
        assert_eq!(p.embeddings, emb(&[&[0.5], &[1.5]]));
        assert_eq!(p.provenance, PoolProvenance::Plugin);
    }

    #[test]
    fn synthetic_provider_is_seeded_and_sized() {
        use crate::features::{Backbone, BackboneConfig};
        let embedder = Embedder::new(Backbone::new(&BackboneConfig::default(), &mut substream(1, "bb")), 16);
        let provider = |generator| SyntheticPoolProvider {
            embedder: embedder.clone(),
            diversity: 0.5,
            seed: 9,
            generator,
            scene_size: (48, 48),
            count_range: [2, 4],
            per_scene: 3,
        };
        for g in [PoolGenerator::Crops, PoolGenerator::SceneObjects] {
            let a = provider(g).pool("red_disc", 7).unwrap();
            assert_eq!(a.len(), 7);
            assert_eq!(a.provenance, PoolProvenance::SyntheticGenerator);
            assert_eq!(a, provider(g).pool("red_disc", 7).unwrap());
            assert_ne!(a, provider(g).pool("green_square", 7).unwrap());
            assert!(matches!(provider(g).pool("nope", 3), Err(Error::UnknownClass(_))));
        }
    }

    #[test]
    fn top_k_parsing() {
        assert_eq!("all".parse::<TopK>().unwrap(), TopK::All);
        assert_eq!("25".parse::<TopK>().unwrap(), TopK::Count(25));
        assert!("many".parse::<TopK>().is_err());
        #[derive(Deserialize)]
        struct W {
            k: TopK,
        }
        assert_eq!(toml::from_str::<W>("k = 5").unwrap().k, TopK::Count(5));
        assert_eq!(toml::from_str::<W>("k = \"all\"").unwrap().k, TopK::All);
    }
}
