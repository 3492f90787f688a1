//! Comparison models: tf-idf bag of words, averaged word embeddings
//! (CONSE-style) and an Attentive-Reader-style softmax pooling encoder.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::encoder::{
    backward_direction, matrix_rows, run_direction, AttentionParams, DirectionCache, LstmParams, Mlp,
    MlpCache, TagAttentionVector,
};
use crate::error::{Error, Result};
use crate::numerics::{dot, ensure_finite_slice, sigmoid, Matrix};
use crate::params::{prefixed, prefixed_mut, Parameters};

/// Train-split vocabulary with inverse document frequencies `ln(N / df)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BowVocabulary {
    words: Vec<String>,
    idf: Vec<f64>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl PartialEq for BowVocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.words == other.words && self.idf == other.idf
    }
}

impl BowVocabulary {
    /// Keeps the `cap` most frequent words over `docs` (ties alphabetical).
    pub fn build(docs: &[Vec<String>], cap: usize) -> Self {
        let mut counts: HashMap<&str, (usize, usize)> = HashMap::new();
        for doc in docs {
            let mut seen = std::collections::HashSet::new();
            for w in doc {
                let entry = counts.entry(w.as_str()).or_default();
                entry.0 += 1;
                if seen.insert(w.as_str()) {
                    entry.1 += 1;
                }
            }
        }
        let mut ranked: Vec<(&str, usize, usize)> = counts.into_iter().map(|(w, (c, df))| (w, c, df)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        ranked.truncate(cap);
        let n = docs.len() as f64;
        let words = ranked.iter().map(|r| r.0.to_owned()).collect();
        let idf = ranked.iter().map(|r| (n / r.2 as f64).ln()).collect();
        BowVocabulary::from_parts(words, idf)
    }

    pub fn from_parts(words: Vec<String>, idf: Vec<f64>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        BowVocabulary { words, idf, index }
    }

    /// Rebuilds the word index after deserialisation.
    pub fn reindex(&mut self) {
        self.index = self.words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn idf(&self) -> &[f64] {
        &self.idf
    }

    /// Dense tf-idf vector; term frequency is `count / lyric length`.
    /// Out-of-vocabulary words are ignored.
    pub fn features(&self, words: &[String]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.words.len()];
        let mut hits = 0usize;
        for w in words {
            if let Some(&i) = self.index.get(w) {
                out[i] += 1.0;
                hits += 1;
            }
        }
        if hits == 0 {
            return Err(Error::EmptyLyric("no lyric word is in the bag-of-words vocabulary".into()));
        }
        let len = words.len() as f64;
        for (o, idf) in out.iter_mut().zip(&self.idf) {
            *o = *o / len * idf;
        }
        Ok(out)
    }
}

/// Bag-of-words lyric features mapped into tag space by a trained
/// projection.
#[derive(Debug, Clone, PartialEq)]
pub struct BowModel {
    pub vocab: BowVocabulary,
    pub projection: Mlp,
}

impl Parameters for BowModel {
    fn blocks(&self) -> Vec<(String, &Matrix)> {
        prefixed("projection", self.projection.blocks()).collect()
    }

    fn blocks_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        prefixed_mut("projection", self.projection.blocks_mut()).collect()
    }
}

pub fn bow_features(words: &[String], model: &BowModel) -> Result<Vec<f64>> {
    model.vocab.features(words)
}

/// Averaged word embeddings followed by an MLP into tag space.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolModel {
    pub mlp: Mlp,
}

impl Parameters for PoolModel {
    fn blocks(&self) -> Vec<(String, &Matrix)> {
        prefixed("mlp", self.mlp.blocks()).collect()
    }

    fn blocks_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        prefixed_mut("mlp", self.mlp.blocks_mut()).collect()
    }
}

pub(crate) fn mean_rows(rows: &[&[f64]]) -> Result<Vec<f64>> {
    let first = rows
        .first()
        .ok_or_else(|| Error::EmptyLyric("cannot pool an empty sequence".into()))?;
    let mut out = vec![0.0; first.len()];
    for r in rows {
        for (o, v) in out.iter_mut().zip(r.iter()) {
            *o += v;
        }
    }
    let n = rows.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    Ok(out)
}

/// Column-wise average of an embedded lyric (`len x E`).
pub fn conse_encode(embedded: &Matrix) -> Result<Vec<f64>> {
    let out = mean_rows(&matrix_rows(embedded))?;
    ensure_finite_slice(&out, "pooled lyric")?;
    Ok(out)
}

/// Plain bi-LSTM whose per-step outputs are pooled with softmax attention
/// weights conditioned on the tag attention vector; a combiner MLP scores
/// the pooled lyric against the image tag vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AttReaderModel {
    pub fwd: LstmParams,
    pub bwd: LstmParams,
    /// `w_hm` is `M x 2H`: it reads the concatenated forward/backward state.
    pub att: AttentionParams,
    /// `D + 2H -> ... -> 1`, identity output.
    pub combiner: Mlp,
}

impl Parameters for AttReaderModel {
    fn blocks(&self) -> Vec<(String, &Matrix)> {
        let mut out: Vec<_> = prefixed("fwd", self.fwd.blocks()).collect();
        out.extend(prefixed("bwd", self.bwd.blocks()));
        out.extend(prefixed("att", self.att.blocks()));
        out.extend(prefixed("combiner", self.combiner.blocks()));
        out
    }

    fn blocks_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out: Vec<_> = prefixed_mut("fwd", self.fwd.blocks_mut()).collect();
        out.extend(prefixed_mut("bwd", self.bwd.blocks_mut()));
        out.extend(prefixed_mut("att", self.att.blocks_mut()));
        out.extend(prefixed_mut("combiner", self.combiner.blocks_mut()));
        out
    }
}

#[derive(Debug, Clone)]
pub(crate) struct AttReaderCache {
    fwd: DirectionCache,
    bwd: DirectionCache,
    /// `[h→_t ∥ h←_t]` per time step.
    states: Vec<Vec<f64>>,
    m: Vec<Vec<f64>>,
    weights: Vec<f64>,
    v_tilde: Vec<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct ScoreCache {
    reader: AttReaderCache,
    combiner: MlpCache,
}

fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

impl AttReaderModel {
    pub fn hidden(&self) -> usize {
        self.fwd.hidden()
    }

    pub(crate) fn encode_cached(&self, rows: &[&[f64]], v_tilde: &[f64]) -> Result<(Vec<f64>, AttReaderCache)> {
        if rows.is_empty() {
            return Err(Error::EmptyLyric("cannot encode an empty sequence".into()));
        }
        let e = self.fwd.input_dim();
        if rows.iter().any(|r| r.len() != e) || v_tilde.len() != e {
            return Err(Error::shape(format!("attentive reader expects {e}-wide inputs")));
        }
        let n = rows.len();
        let fwd_order: Vec<usize> = (0..n).collect();
        let bwd_order: Vec<usize> = (0..n).rev().collect();
        let fwd = run_direction(&self.fwd, None, rows, &fwd_order, &[]);
        let bwd = run_direction(&self.bwd, None, rows, &bwd_order, &[]);
        let states: Vec<Vec<f64>> = (0..n)
            .map(|t| [fwd.outputs[t].as_slice(), bwd.outputs[n - 1 - t].as_slice()].concat())
            .collect();
        let mut image_term = vec![0.0; self.att.size()];
        self.att.w_vm.matvec_acc(v_tilde, &mut image_term);
        let m: Vec<Vec<f64>> = states
            .iter()
            .map(|st| {
                let mut z = image_term.clone();
                self.att.w_hm.matvec_acc(st, &mut z);
                z.into_iter().map(sigmoid).collect()
            })
            .collect();
        let scores: Vec<f64> = m.iter().map(|mt| dot(self.att.w_ms.data(), mt)).collect();
        let weights = softmax(&scores);
        let mut pooled = vec![0.0; 2 * self.hidden()];
        for (w, st) in weights.iter().zip(&states) {
            for (p, s) in pooled.iter_mut().zip(st) {
                *p += w * s;
            }
        }
        ensure_finite_slice(&pooled, "attentive reader pooling")?;
        Ok((
            pooled,
            AttReaderCache {
                fwd,
                bwd,
                states,
                m,
                weights,
                v_tilde: v_tilde.to_vec(),
            },
        ))
    }

    pub(crate) fn backward_encode(
        &self,
        rows: &[&[f64]],
        cache: &AttReaderCache,
        d_pooled: &[f64],
        grads: &mut AttReaderModel,
    ) {
        let n = rows.len();
        let h = self.hidden();
        let proj: Vec<f64> = cache.states.iter().map(|st| dot(d_pooled, st)).collect();
        let mean_proj: f64 = cache.weights.iter().zip(&proj).map(|(w, p)| w * p).sum();
        let mut d_fwd_out = vec![vec![0.0; h]; n];
        let mut d_bwd_out = vec![vec![0.0; h]; n];
        for t in 0..n {
            let w = cache.weights[t];
            let mut d_state: Vec<f64> = d_pooled.iter().map(|d| d * w).collect();
            let d_score = w * (proj[t] - mean_proj);
            if d_score != 0.0 {
                let mt = &cache.m[t];
                for (g, m) in grads.att.w_ms.data_mut().iter_mut().zip(mt) {
                    *g += d_score * m;
                }
                let d_zm: Vec<f64> = self
                    .att
                    .w_ms
                    .data()
                    .iter()
                    .zip(mt)
                    .map(|(wm, m)| d_score * wm * m * (1.0 - m))
                    .collect();
                grads.att.w_hm.add_outer(&d_zm, &cache.states[t]);
                grads.att.w_vm.add_outer(&d_zm, &cache.v_tilde);
                self.att.w_hm.matvec_t_acc(&d_zm, &mut d_state);
            }
            d_fwd_out[t] = d_state[..h].to_vec();
            d_bwd_out[n - 1 - t] = d_state[h..].to_vec();
        }
        let fwd_order: Vec<usize> = (0..n).collect();
        let bwd_order: Vec<usize> = (0..n).rev().collect();
        backward_direction(&self.fwd, None, rows, &fwd_order, &[], &cache.fwd, &d_fwd_out, &mut grads.fwd, None);
        backward_direction(&self.bwd, None, rows, &bwd_order, &[], &cache.bwd, &d_bwd_out, &mut grads.bwd, None);
    }

    pub(crate) fn score_cached(&self, tags: &[f64], rows: &[&[f64]], v_tilde: &[f64]) -> Result<(f64, ScoreCache)> {
        let (pooled, reader) = self.encode_cached(rows, v_tilde)?;
        let input = [tags, pooled.as_slice()].concat();
        if input.len() != self.combiner.input_dim() {
            return Err(Error::shape(format!(
                "combiner expects {} inputs, got {}",
                self.combiner.input_dim(),
                input.len()
            )));
        }
        let (out, combiner) = self.combiner.forward_cached(&input);
        ensure_finite_slice(&out, "attentive reader score")?;
        Ok((out[0], ScoreCache { reader, combiner }))
    }

    pub(crate) fn backward_score(
        &self,
        rows: &[&[f64]],
        cache: &ScoreCache,
        d_score: f64,
        grads: &mut AttReaderModel,
    ) {
        let d_input = self.combiner.backward(&cache.combiner, &[d_score], &mut grads.combiner);
        let tag_dim = self.combiner.input_dim() - 2 * self.hidden();
        self.backward_encode(rows, &cache.reader, &d_input[tag_dim..], grads);
    }
}

/// Softmax-pooled bi-LSTM encoding of an embedded lyric (`len x E`).
pub fn attreader_encode(model: &AttReaderModel, embedded: &Matrix, v_tilde: &TagAttentionVector) -> Result<Vec<f64>> {
    let rows = matrix_rows(embedded);
    Ok(model.encode_cached(&rows, v_tilde.as_slice())?.0)
}

/// Softmax weights over time steps used by [`attreader_encode`].
pub fn attreader_weights(model: &AttReaderModel, embedded: &Matrix, v_tilde: &TagAttentionVector) -> Result<Vec<f64>> {
    let rows = matrix_rows(embedded);
    Ok(model.encode_cached(&rows, v_tilde.as_slice())?.1.weights)
}
