//! Class prototypes: a single selection-space embedding standing for a class.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::Embedding;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrototypeSource {
    Vae,
    Pool,
    Semantic,
}

impl PrototypeSource {
    pub const ALL: [PrototypeSource; 3] = [PrototypeSource::Vae, PrototypeSource::Pool, PrototypeSource::Semantic];

    pub fn as_str(self) -> &'static str {
        match self {
            PrototypeSource::Vae => "vae",
            PrototypeSource::Pool => "pool",
            PrototypeSource::Semantic => "semantic",
        }
    }
}

impl fmt::Display for PrototypeSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PrototypeSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PrototypeSource::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown prototype source `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassPrototype {
    pub embedding: Embedding,
    pub source: PrototypeSource,
    pub class_name: String,
    pub sample_count: usize,
}

impl ClassPrototype {
    /// Prototype as the elementwise mean of `samples`.
    pub fn from_samples(class_name: &str, source: PrototypeSource, samples: &[Embedding]) -> Result<Self> {
        let embedding = Embedding::mean(samples)
            .ok_or_else(|| Error::InvalidArgument("prototype needs at least one sample".into()))?;
        if let Some(bad) = samples.iter().find(|e| e.dim() != embedding.dim()) {
            return Err(Error::dim("prototype samples", embedding.dim(), bad.dim()));
        }
        Ok(ClassPrototype {
            embedding,
            source,
            class_name: class_name.to_owned(),
            sample_count: samples.len(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_of_samples() {
        let s = [Embedding(vec![1.0, 3.0]), Embedding(vec![3.0, 5.0])];
        let p = ClassPrototype::from_samples("c", PrototypeSource::Vae, &s).unwrap();
        assert_eq!(p.embedding.0, vec![2.0, 4.0]);
        assert_eq!(p.sample_count, 2);
        assert!(ClassPrototype::from_samples("c", PrototypeSource::Vae, &[]).is_err());
        let ragged = [Embedding(vec![1.0]), Embedding(vec![1.0, 2.0])];
        assert!(ClassPrototype::from_samples("c", PrototypeSource::Pool, &ragged).is_err());
    }

    #[test]
    fn source_names_round_trip() {
        for s in PrototypeSource::ALL {
            assert_eq!(s.as_str().parse::<PrototypeSource>().unwrap(), s);
        }
        assert!("clip".parse::<PrototypeSource>().is_err());
    }
}
