//! Conditional VAE over selection-space features, conditioned on a class
//! semantic embedding, and the class prototype built from its samples.

use std::collections::BTreeMap;
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Archive;
use crate::error::{ensure_finite, Error, Result};
use crate::features::Embedding;
use crate::nn::{add_grads, leaky_relu, leaky_relu_backward, relu_backward_inplace, scale_grads, Adam, Linear, Module, Param};
use crate::prototype::{ClassPrototype, PrototypeSource};
use crate::rng::substream;
use crate::synth::{class_id, class_semantic_embedding, SEMANTIC_DIM};

pub const CHECKPOINT_VERSION: &str = "zsc-vae/1";

/// Source of class semantic embeddings (text-embedding stand-ins).
pub trait SemanticProvider: Send + Sync {
    fn dim(&self) -> usize;
    fn embedding(&self, class_name: &str) -> Result<Embedding>;
}

/// Attribute vectors of the synthetic benchmark classes.
#[derive(Clone, Copy, Debug, Default)]
pub struct SyntheticSemantics;

impl SemanticProvider for SyntheticSemantics {
    fn dim(&self) -> usize {
        SEMANTIC_DIM
    }

    fn embedding(&self, class_name: &str) -> Result<Embedding> {
        class_semantic_embedding(class_id(class_name)?)
    }
}

/// Embeddings read from a text file: one class per line, the class name
/// followed by whitespace-separated decimals.
#[derive(Clone, Debug)]
pub struct FileSemantics {
    dim: usize,
    table: BTreeMap<String, Embedding>,
}

impl FileSemantics {
    pub fn parse(text: &str) -> Result<Self> {
        let mut table = BTreeMap::new();
        let mut dim = None;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let name = parts.next().expect("non-empty line");
            let values = parts
                .map(|p| p.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::format("semantic file", format!("line {}: {e}", lineno + 1)))?;
            if values.is_empty() {
                return Err(Error::format("semantic file", format!("line {}: no values", lineno + 1)));
            }
            match dim {
                None => dim = Some(values.len()),
                Some(d) if d != values.len() => return Err(Error::dim("semantic file row", d, values.len())),
                _ => {}
            }
            table.insert(name.to_owned(), Embedding(values));
        }
        let dim = dim.ok_or_else(|| Error::format("semantic file", "no records"))?;
        Ok(FileSemantics { dim, table })
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

impl SemanticProvider for FileSemantics {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embedding(&self, class_name: &str) -> Result<Embedding> {
        self.table
            .get(class_name)
            .cloned()
            .ok_or_else(|| Error::UnknownClass(class_name.to_owned()))
    }
}

pub fn format_semantic_file<'a>(rows: impl IntoIterator<Item = (&'a str, &'a Embedding)>) -> String {
    let mut out = String::new();
    for (name, e) in rows {
        out.push_str(name);
        for v in &e.0 {
            out.push(' ');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    out
}

/// Closed-form `KL(N(mu, diag(exp(logvar))) || N(0, I))`.
pub fn kl_divergence(mu: &[f64], logvar: &[f64]) -> Result<f64> {
    if mu.len() != logvar.len() {
        return Err(Error::dim("kl mu vs logvar", mu.len(), logvar.len()));
    }
    Ok(-0.5
        * mu
            .iter()
            .zip(logvar)
            .map(|(m, lv)| 1.0 + lv - m * m - lv.exp())
            .sum::<f64>())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeConfig {
    pub latent_dim: usize,
    pub semantic_dim: usize,
    pub feature_dim: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Generated samples averaged into a prototype.
    pub prototype_samples: usize,
    /// Derived from the pipeline root seed; not read from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            latent_dim: 16,
            semantic_dim: SEMANTIC_DIM,
            feature_dim: 32,
            hidden: 64,
            epochs: 100,
            batch_size: 64,
            learning_rate: 1e-3,
            prototype_samples: 256,
            seed: 0,
        }
    }
}

/// Encoder `[x; a] -> hidden -> (mu, logvar)` and generator
/// `[z; a] -> hidden -> x`, LeakyReLU hidden layers, ReLU output.
#[derive(Clone, Debug)]
pub struct Vae {
    pub config: VaeConfig,
    pub enc_hidden: Linear,
    pub enc_out: Linear,
    pub dec_hidden: Linear,
    pub dec_out: Linear,
}

impl Module for Vae {
    fn params(&self) -> Vec<&Param> {
        vec![
            &self.enc_hidden.weight,
            &self.enc_hidden.bias,
            &self.enc_out.weight,
            &self.enc_out.bias,
            &self.dec_hidden.weight,
            &self.dec_hidden.bias,
            &self.dec_out.weight,
            &self.dec_out.bias,
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.enc_hidden.weight,
            &mut self.enc_hidden.bias,
            &mut self.enc_out.weight,
            &mut self.enc_out.bias,
            &mut self.dec_hidden.weight,
            &mut self.dec_hidden.bias,
            &mut self.dec_out.weight,
            &mut self.dec_out.bias,
        ]
    }
}

fn concat(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(a.len() + b.len());
    v.extend_from_slice(a);
    v.extend_from_slice(b);
    v
}

impl Vae {
    pub fn new(config: VaeConfig) -> Self {
        let mut rng = substream(config.seed, "vae/init");
        let (de, ds, dz, h) = (config.feature_dim, config.semantic_dim, config.latent_dim, config.hidden);
        Vae {
            enc_hidden: Linear::new("encoder.hidden", de + ds, h, &mut rng),
            enc_out: Linear::new("encoder.out", h, 2 * dz, &mut rng),
            dec_hidden: Linear::new("generator.hidden", dz + ds, h, &mut rng),
            dec_out: Linear::new("generator.out", h, de, &mut rng),
            config,
        }
    }

    fn check(&self, what: &'static str, v: &Embedding, expected: usize) -> Result<()> {
        if v.dim() != expected {
            return Err(Error::dim(what, expected, v.dim()));
        }
        Ok(())
    }

    /// Posterior parameters `(mu, logvar)` of `q(z | x, a)`.
    pub fn encode(&self, x: &Embedding, a: &Embedding) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check("vae feature", x, self.config.feature_dim)?;
        self.check("vae semantic", a, self.config.semantic_dim)?;
        let h = leaky_relu(&self.enc_hidden.forward(&concat(&x.0, &a.0)));
        let mut out = self.enc_out.forward(&h);
        let logvar = out.split_off(self.config.latent_dim);
        Ok((out, logvar))
    }

    /// Generated feature `G(z, a)`.
    pub fn decode(&self, z: &[f64], a: &Embedding) -> Result<Embedding> {
        if z.len() != self.config.latent_dim {
            return Err(Error::dim("vae latent", self.config.latent_dim, z.len()));
        }
        self.check("vae semantic", a, self.config.semantic_dim)?;
        let h = leaky_relu(&self.dec_hidden.forward(&concat(z, &a.0)));
        let mut x = self.dec_out.forward(&h);
        crate::nn::relu_inplace(&mut x);
        Ok(Embedding(x))
    }

    /// `KL(q(z|x,a) || N(0,I)) + ||G(z,a) - x||^2` with the reparameterised
    /// latent `z = mu + exp(logvar / 2) * noise`.
    pub fn loss(&self, x: &Embedding, a: &Embedding, noise: &[f64]) -> Result<f64> {
        Ok(self.loss_and_grads(x, a, noise)?.0)
    }

    pub fn loss_and_grads(&self, x: &Embedding, a: &Embedding, noise: &[f64]) -> Result<(f64, Vec<Vec<f64>>)> {
        self.check("vae feature", x, self.config.feature_dim)?;
        self.check("vae semantic", a, self.config.semantic_dim)?;
        let dz = self.config.latent_dim;
        if noise.len() != dz {
            return Err(Error::dim("vae noise", dz, noise.len()));
        }
        let enc_in = concat(&x.0, &a.0);
        let enc_pre = self.enc_hidden.forward(&enc_in);
        let enc_h = leaky_relu(&enc_pre);
        let stats = self.enc_out.forward(&enc_h);
        let (mu, logvar) = stats.split_at(dz);
        let std: Vec<f64> = logvar.iter().map(|lv| (0.5 * lv).exp()).collect();
        let z: Vec<f64> = (0..dz).map(|j| mu[j] + std[j] * noise[j]).collect();
        let dec_in = concat(&z, &a.0);
        let dec_pre = self.dec_hidden.forward(&dec_in);
        let dec_h = leaky_relu(&dec_pre);
        let mut xhat = self.dec_out.forward(&dec_h);
        crate::nn::relu_inplace(&mut xhat);

        let recon: f64 = xhat.iter().zip(&x.0).map(|(p, t)| (p - t) * (p - t)).sum();
        let loss = kl_divergence(mu, logvar)? + recon;

        let mut g = self.zero_grads();
        let [g_eh_w, g_eh_b, g_eo_w, g_eo_b, g_dh_w, g_dh_b, g_do_w, g_do_b] = &mut g[..] else {
            unreachable!("vae has 8 parameter tensors")
        };
        let mut d_xhat: Vec<f64> = xhat.iter().zip(&x.0).map(|(p, t)| 2.0 * (p - t)).collect();
        relu_backward_inplace(&xhat, &mut d_xhat);
        let mut d_dec_h = self.dec_out.backward(&dec_h, &d_xhat, g_do_w, g_do_b);
        leaky_relu_backward(&dec_pre, &mut d_dec_h);
        let d_dec_in = self.dec_hidden.backward(&dec_in, &d_dec_h, g_dh_w, g_dh_b);
        let mut d_stats = vec![0.0; 2 * dz];
        for j in 0..dz {
            let d_z = d_dec_in[j];
            d_stats[j] = d_z + mu[j];
            d_stats[dz + j] = d_z * noise[j] * 0.5 * std[j] + 0.5 * (logvar[j].exp() - 1.0);
        }
        let mut d_enc_h = self.enc_out.backward(&enc_h, &d_stats, g_eo_w, g_eo_b);
        leaky_relu_backward(&enc_pre, &mut d_enc_h);
        self.enc_hidden.backward(&enc_in, &d_enc_h, g_eh_w, g_eh_b);
        Ok((loss, g))
    }

    /// `n` features decoded from prior samples `z ~ N(0, I)`.
    pub fn generate_features<R: Rng + ?Sized>(&self, a: &Embedding, n: usize, rng: &mut R) -> Result<Vec<Embedding>> {
        if n == 0 {
            return Err(Error::InvalidArgument("generate_features needs n >= 1".into()));
        }
        (0..n)
            .map(|_| {
                let z: Vec<f64> = (0..self.config.latent_dim).map(|_| rng.sample(StandardNormal)).collect();
                self.decode(&z, a)
            })
            .collect()
    }

    pub fn to_archive(&self) -> Result<Archive> {
        Ok(Archive {
            version: CHECKPOINT_VERSION.into(),
            config: toml::to_string(&self.config).map_err(|e| Error::Config(e.to_string()))?,
            arrays: self.params().into_iter().cloned().collect(),
        })
    }

    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let text = archive.expect_version(CHECKPOINT_VERSION)?;
        let config: VaeConfig = toml::from_str(text).map_err(|e| Error::format("vae config", e.to_string()))?;
        let mut vae = Vae::new(config);
        vae.load_params(&archive.arrays)?;
        Ok(vae)
    }
}

/// Prototype = mean of `n` generated features for the class.
pub fn vae_class_prototype<R: Rng + ?Sized>(
    class_name: &str,
    a: &Embedding,
    n: usize,
    vae: &Vae,
    rng: &mut R,
) -> Result<ClassPrototype> {
    let samples = vae.generate_features(a, n, rng)?;
    let proto = ClassPrototype::from_samples(class_name, PrototypeSource::Vae, &samples)?;
    ensure_finite(&proto.embedding.0, "vae_prototype", "vae_class_prototype")?;
    Ok(proto)
}

/// Trains on `(feature, semantic)` pairs; returns the model and the mean
/// per-record loss of every epoch.
pub fn train_vae(records: &[(Embedding, Embedding)], config: &VaeConfig) -> Result<(Vae, Vec<f64>)> {
    let mut distinct: Vec<&Embedding> = Vec::new();
    for (_, a) in records {
        if !distinct.contains(&a) {
            distinct.push(a);
        }
    }
    if distinct.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "vae training needs at least 2 classes, got {}",
            distinct.len()
        )));
    }
    let mut vae = Vae::new(config.clone());
    let mut opt = Adam::new(config.learning_rate, &vae.params());
    let mut rng = substream(config.seed, "vae/train");
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size.max(1)) {
            let mut grads = vae.zero_grads();
            for &i in batch {
                let noise: Vec<f64> = (0..config.latent_dim).map(|_| rng.sample(StandardNormal)).collect();
                let (l, g) = vae.loss_and_grads(&records[i].0, &records[i].1, &noise)?;
                total += l;
                add_grads(&mut grads, &g);
            }
            scale_grads(&mut grads, 1.0 / batch.len() as f64);
            if !total.is_finite() {
                return Err(Error::Numerical {
                    module: "vae_prototype",
                    op: "train_vae",
                });
            }
            opt.step(vae.params_mut(), &grads);
        }
        let mean = total / records.len() as f64;
        info!("vae epoch {}/{}: loss={mean:.5}", epoch + 1, config.epochs);
        losses.push(mean);
    }
    Ok((vae, losses))
}
