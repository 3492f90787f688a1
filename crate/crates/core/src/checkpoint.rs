//! JSON checkpoint container for every model kind.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::BowVocabulary;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Network};
use crate::numerics::{Matrix, Rng};
use crate::params::Parameters;
use crate::text::EmbeddingTable;
use crate::training::{TrainConfig, TrainingState};

pub const FORMAT: &str = "tagsong-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedMatrix {
    pub name: String,
    #[serde(flatten)]
    pub matrix: Matrix,
}

/// Optimizer state and settings of the run that produced a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub config: TrainConfig,
    pub state: TrainingState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub model: ModelConfig,
    pub seed: u64,
    pub embed_dim: usize,
    /// Checksum of the frozen embedding table the model was trained with.
    pub embedding_checksum: String,
    pub moods: Vec<String>,
    pub bow_vocabulary: Option<BowVocabulary>,
    pub parameters: Vec<NamedMatrix>,
    pub training: Option<TrainingRecord>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, table: &EmbeddingTable, seed: u64, training: Option<TrainingRecord>) -> Self {
        let bow_vocabulary = match &model.network {
            Network::Bow(b) => Some(b.vocab.clone()),
            _ => None,
        };
        Checkpoint {
            format: FORMAT.into(),
            version: VERSION,
            model: model.config.clone(),
            seed,
            embed_dim: table.dim(),
            embedding_checksum: table.checksum(),
            moods: model.moods.clone(),
            bow_vocabulary,
            parameters: model
                .network
                .blocks()
                .into_iter()
                .map(|(name, m)| NamedMatrix {
                    name,
                    matrix: m.clone(),
                })
                .collect(),
            training,
        }
    }

    /// Rebuilds the model. The embedding table must be the one used for
    /// training.
    pub fn to_model(&self, table: &EmbeddingTable) -> Result<Model> {
        if self.format != FORMAT || self.version != VERSION {
            return Err(Error::Schema(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        if table.dim() != self.embed_dim || table.checksum() != self.embedding_checksum {
            return Err(Error::Config(
                "embedding table differs from the one the checkpoint was trained with".into(),
            ));
        }
        let vocab = self.bow_vocabulary.clone().map(|mut v| {
            v.reindex();
            v
        });
        let mut network = Network::init(&self.model, self.embed_dim, self.moods.len(), vocab, &mut Rng::new(0))?;
        {
            let mut blocks = network.blocks_mut();
            if blocks.len() != self.parameters.len() {
                return Err(Error::Schema(format!(
                    "checkpoint has {} parameter blocks, model expects {}",
                    self.parameters.len(),
                    blocks.len()
                )));
            }
            for ((name, dst), saved) in blocks.iter_mut().zip(&self.parameters) {
                if *name != saved.name || dst.shape() != saved.matrix.shape() || saved.matrix.len() != saved.matrix.data().len() {
                    return Err(Error::Schema(format!("parameter block {} does not match {name}", saved.name)));
                }
                saved.matrix.ensure_finite(&saved.name)?;
                **dst = saved.matrix.clone();
            }
        }
        Ok(Model {
            config: self.model.clone(),
            network,
            moods: self.moods.clone(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let mut text = serde_json::to_string(self)?;
        text.push('\n');
        Ok(text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
