//! Finite-difference verification of analytic gradients on toy models.

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Resources};
use crate::dataset::{TagGroup, TagSpace, TripletRecord};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ModelKind};
use crate::numerics::{finite_diff_grad, Matrix, Rng};
use crate::params::Parameters;
use crate::text::{EmbeddingTable, StopWords};
use crate::training::LossKind;

const VOCAB: [&str; 12] = [
    "sun", "rain", "sea", "night", "fire", "road", "heart", "sky", "dance", "stone", "light", "river",
];

/// Toy sizes and tolerances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckOptions {
    pub hidden: usize,
    pub attention_dim: usize,
    pub tag_dim: usize,
    pub embed_dim: usize,
    pub max_len: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Perturbs the analytic gradient so the check must fail.
    pub corrupt: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            hidden: 4,
            attention_dim: 4,
            tag_dim: 10,
            embed_dim: 6,
            max_len: 6,
            step: 1e-5,
            tolerance: 1e-4,
            corrupt: false,
        }
    }
}

/// Largest relative error within one parameter block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockError {
    pub name: String,
    pub params: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub model: ModelKind,
    pub loss: LossKind,
    pub seed: u64,
    pub tolerance: f64,
    pub blocks: Vec<BlockError>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.max_rel_error < self.tolerance)
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("model {}  loss {}  seed {}\n", self.model, self.loss, self.seed);
        let width = self.blocks.iter().map(|b| b.name.len()).max().unwrap_or(5).max(5);
        out.push_str(&format!("{:<width$}  {:>6}  {:>12}\n", "block", "params", "max rel err"));
        for b in &self.blocks {
            let flag = if b.max_rel_error < self.tolerance { "" } else { "  FAIL" };
            out.push_str(&format!(
                "{:<width$}  {:>6}  {:>12.3e}{flag}\n",
                b.name, b.params, b.max_rel_error
            ));
        }
        out
    }
}

/// `|a − n| / max(|a| + |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-6)
}

/// Losses that apply to a model kind.
pub fn losses_for(kind: ModelKind) -> Vec<LossKind> {
    match kind {
        ModelKind::AttReader => vec![LossKind::Mrl],
        _ => vec![LossKind::Mse, LossKind::Cpl, LossKind::Mrl],
    }
}

/// A random toy corpus and a freshly initialised model of `kind`.
pub fn toy_problem(kind: ModelKind, seed: u64, options: &GradCheckOptions) -> Result<(Resources, Corpus, Model)> {
    let mut rng = Rng::derive(seed, 0x6772_6164);
    let words: Vec<String> = VOCAB.iter().map(|w| w.to_string()).collect();
    let weights = Matrix::from_fn(words.len(), options.embed_dim, |_, _| rng.uniform(-1.0, 1.0));
    let table = EmbeddingTable::new(words.clone(), weights)?;
    let tag_names: Vec<String> = (0..options.tag_dim).map(|i| words[i % words.len()].clone()).collect();
    let space = TagSpace {
        dim: options.tag_dim,
        objects: options.tag_dim / 2,
    };
    let records: Vec<TripletRecord> = (0..4)
        .map(|i| {
            let len = 1 + rng.below(options.max_len);
            let lyric: Vec<&str> = (0..len).map(|_| VOCAB[rng.below(VOCAB.len())]).collect();
            TripletRecord {
                id: format!("img{i}"),
                song_id: format!("song{i}"),
                lyric_raw: lyric.join(" "),
                tags: (0..options.tag_dim).map(|_| rng.uniform(0.05, 1.0)).collect(),
                mood: Some(["calm", "happy"][i % 2].to_string()),
                favorite_count: 1,
            }
        })
        .collect();
    let resources = Resources {
        table,
        tag_names: Some(tag_names),
        stop_words: StopWords::parse(""),
    };
    let config = ModelConfig {
        hidden: options.hidden,
        attention_dim: options.attention_dim,
        mlp_hidden: vec![options.hidden],
        k_tags: 3.min(options.tag_dim),
        tag_group: TagGroup::ObjAttr,
        max_len: options.max_len,
        tag_space: space,
        ..ModelConfig::new(kind)
    };
    let corpus = Corpus::build(&records, &resources, &config.corpus_options())?;
    let model = Model::new(config, &corpus, options.embed_dim, seed)?;
    Ok((resources, corpus, model))
}

/// Compares analytic and central-difference gradients of one training
/// pair, block by block.
pub fn gradient_check(kind: ModelKind, loss: LossKind, seed: u64, options: &GradCheckOptions) -> Result<GradCheckReport> {
    let (resources, corpus, model) = toy_problem(kind, seed, options)?;
    model.config.check_loss(loss)?;
    let negative = (loss == LossKind::Mrl).then_some(1);
    let table = &resources.table;
    let (_, mut analytic) = model.pair_gradient(&corpus, table, loss, 0, negative)?;
    if options.corrupt {
        if let Some((_, m)) = analytic.blocks_mut().into_iter().next() {
            m.data_mut()[0] += 1e-2;
        }
    }
    let mut probe = model.clone();
    let mut blocks = Vec::new();
    let names: Vec<String> = model.network.blocks().into_iter().map(|(n, _)| n).collect();
    for (bi, name) in names.into_iter().enumerate() {
        let original = model.network.blocks()[bi].1.clone();
        let numeric = finite_diff_grad(
            |m| {
                *probe.network.blocks_mut()[bi].1 = m.clone();
                probe
                    .pair_gradient(&corpus, table, loss, 0, negative)
                    .map_or(f64::NAN, |(l, _)| l)
            },
            &original,
            options.step,
        )?;
        *probe.network.blocks_mut()[bi].1 = original.clone();
        let a = analytic.blocks()[bi].1.data().to_vec();
        let max_rel_error = a
            .iter()
            .zip(numeric.data())
            .map(|(&a, &n)| relative_error(a, n))
            .fold(0.0, f64::max);
        if !max_rel_error.is_finite() {
            return Err(Error::numeric(format!("gradient check of {name} produced a non-finite error")));
        }
        blocks.push(BlockError {
            name,
            params: original.len(),
            max_rel_error,
        });
    }
    Ok(GradCheckReport {
        model: kind,
        loss,
        seed,
        tolerance: options.tolerance,
        blocks,
    })
}
