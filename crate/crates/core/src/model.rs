//! Model kinds, their shared configuration and the pairwise objective used
//! for training.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{mean_rows, AttReaderModel, BowModel, BowVocabulary, PoolModel};
use crate::corpus::{Corpus, CorpusOptions, ImageInput, LyricInput};
use crate::dataset::{TagGroup, TagSpace};
use crate::encoder::{
    AttentionParams, EncoderCache, EncoderConfig, EncoderParams, LstmParams, Mlp, MlpCache, OutputActivation,
    Pooling,
};
use crate::error::{Error, Result};
use crate::numerics::{cosine, ensure_finite_slice, Matrix, Rng};
use crate::params::Parameters;
use crate::text::{EmbeddingTable, DEFAULT_MAX_LEN};
use crate::training::{
    cosine_loss, margin_loss, mse_loss, score_margin_loss, train, EpochLog, LossKind, Objective, TrainConfig,
    TrainingState,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
pub enum ModelKind {
    /// Bi-LSTM encoder without attention.
    #[serde(rename = "ours")]
    Ours,
    /// Bi-LSTM encoder gated by tag attention.
    #[serde(rename = "ours-attention")]
    OursAttention,
    /// Tag-attention encoder plus a learned mood embedding.
    #[serde(rename = "ours-mood")]
    OursMood,
    /// tf-idf features with a learned projection.
    #[serde(rename = "bow")]
    Bow,
    /// Averaged word embeddings with a learned projection.
    #[serde(rename = "conse")]
    Conse,
    /// Softmax-pooled bi-LSTM with a scoring combiner.
    #[serde(rename = "attreader")]
    #[value(name = "attreader")]
    AttReader,
}

impl ModelKind {
    pub const ALL: [ModelKind; 6] = [
        ModelKind::Ours,
        ModelKind::OursAttention,
        ModelKind::OursMood,
        ModelKind::Bow,
        ModelKind::Conse,
        ModelKind::AttReader,
    ];

    pub fn uses_attention(self) -> bool {
        matches!(self, ModelKind::OursAttention | ModelKind::OursMood | ModelKind::AttReader)
    }

    pub fn uses_mood(self) -> bool {
        self == ModelKind::OursMood
    }

    /// Loss used when none is given.
    pub fn default_loss(self) -> LossKind {
        match self {
            ModelKind::AttReader => LossKind::Mrl,
            _ => LossKind::Mse,
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Ours => "ours",
            ModelKind::OursAttention => "ours-attention",
            ModelKind::OursMood => "ours-mood",
            ModelKind::Bow => "bow",
            ModelKind::Conse => "conse",
            ModelKind::AttReader => "attreader",
        })
    }
}

/// Architecture and input settings; everything needed to rebuild a model
/// around saved parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub hidden: usize,
    pub attention_dim: usize,
    pub mlp_hidden: Vec<usize>,
    pub k_tags: usize,
    pub pooling: Pooling,
    pub tag_group: TagGroup,
    pub share_attention: bool,
    pub bow_vocab: usize,
    pub max_len: usize,
    pub tag_space: TagSpace,
}

impl ModelConfig {
    pub fn new(kind: ModelKind) -> Self {
        ModelConfig {
            kind,
            hidden: 128,
            attention_dim: 128,
            mlp_hidden: vec![512],
            k_tags: 5,
            pooling: Pooling::Average,
            tag_group: TagGroup::ObjAttr,
            share_attention: false,
            bow_vocab: 5000,
            max_len: DEFAULT_MAX_LEN,
            tag_space: TagSpace::default(),
        }
    }

    /// Width of the common space: the number of tag dimensions in the group.
    pub fn output_dim(&self) -> usize {
        self.tag_space.width(self.tag_group)
    }

    pub fn corpus_options(&self) -> CorpusOptions {
        CorpusOptions {
            tag_group: self.tag_group,
            tag_space: self.tag_space,
            max_len: self.max_len,
            attention: self.kind.uses_attention().then_some((self.k_tags, self.pooling)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.hidden, self.attention_dim, self.bow_vocab, self.max_len, self.k_tags];
        if positive.contains(&0) || self.mlp_hidden.contains(&0) {
            return Err(Error::Config("model sizes must be positive".into()));
        }
        if self.tag_space.objects > self.tag_space.dim {
            return Err(Error::Config("tag space has more objects than dimensions".into()));
        }
        if self.kind.uses_attention() && self.k_tags > self.output_dim() {
            return Err(Error::Config(format!(
                "k_tags = {} exceeds the {} tags of group {}",
                self.k_tags,
                self.output_dim(),
                self.tag_group
            )));
        }
        Ok(())
    }

    /// Rejects loss/model combinations that cannot be trained.
    pub fn check_loss(&self, loss: LossKind) -> Result<()> {
        if self.kind == ModelKind::AttReader && loss != LossKind::Mrl {
            return Err(Error::Config(format!(
                "the attreader model scores pairs and trains only with mrl, not {loss}"
            )));
        }
        Ok(())
    }

    fn encoder_config(&self, embed_dim: usize, moods: usize) -> EncoderConfig {
        EncoderConfig {
            embed_dim,
            hidden: self.hidden,
            attention_dim: self.attention_dim,
            mlp_hidden: self.mlp_hidden.clone(),
            output_dim: self.output_dim(),
            attention: self.kind.uses_attention(),
            share_attention: self.share_attention,
            moods: self.kind.uses_mood().then_some(moods),
        }
    }
}

/// Trainable parameters of any model kind.
#[derive(Debug, Clone, PartialEq)]
pub enum Network {
    Encoder(EncoderParams),
    Bow(BowModel),
    Conse(PoolModel),
    AttReader(AttReaderModel),
}

impl Parameters for Network {
    fn blocks(&self) -> Vec<(String, &Matrix)> {
        match self {
            Network::Encoder(p) => p.blocks(),
            Network::Bow(p) => p.blocks(),
            Network::Conse(p) => p.blocks(),
            Network::AttReader(p) => p.blocks(),
        }
    }

    fn blocks_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        match self {
            Network::Encoder(p) => p.blocks_mut(),
            Network::Bow(p) => p.blocks_mut(),
            Network::Conse(p) => p.blocks_mut(),
            Network::AttReader(p) => p.blocks_mut(),
        }
    }
}

impl Network {
    /// Freshly initialised parameters.
    pub fn init(
        config: &ModelConfig,
        embed_dim: usize,
        moods: usize,
        vocab: Option<BowVocabulary>,
        rng: &mut Rng,
    ) -> Result<Network> {
        config.validate()?;
        let d = config.output_dim();
        let sizes = |input: usize, output: usize| {
            let mut s = vec![input];
            s.extend(&config.mlp_hidden);
            s.push(output);
            s
        };
        Ok(match config.kind {
            ModelKind::Ours | ModelKind::OursAttention | ModelKind::OursMood => {
                Network::Encoder(EncoderParams::new(&config.encoder_config(embed_dim, moods), rng))
            }
            ModelKind::Bow => {
                let vocab = vocab.ok_or_else(|| Error::Config("bag-of-words model needs a vocabulary".into()))?;
                if vocab.is_empty() {
                    return Err(Error::Config("bag-of-words vocabulary is empty".into()));
                }
                let projection = Mlp::new(&[vocab.len(), d], OutputActivation::Sigmoid, rng);
                Network::Bow(BowModel { vocab, projection })
            }
            ModelKind::Conse => Network::Conse(PoolModel {
                mlp: Mlp::new(&sizes(embed_dim, d), OutputActivation::Sigmoid, rng),
            }),
            ModelKind::AttReader => {
                let h = config.hidden;
                Network::AttReader(AttReaderModel {
                    fwd: LstmParams::new(h, embed_dim, rng),
                    bwd: LstmParams::new(h, embed_dim, rng),
                    att: AttentionParams::new(config.attention_dim, 2 * h, embed_dim, rng),
                    combiner: Mlp::new(&sizes(d + 2 * h, 1), OutputActivation::Identity, rng),
                })
            }
        })
    }
}

/// Forward state of a projection into tag space.
#[derive(Debug, Clone)]
pub(crate) enum ProjectionCache {
    Encoder(EncoderCache),
    Mlp(MlpCache),
}

/// Everything besides the trainable parameters that a forward pass needs.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Context<'a> {
    pub(crate) moods: &'a [String],
    pub(crate) table: &'a EmbeddingTable,
}

impl Context<'_> {
    fn mood_id(&self, mood: Option<&str>) -> Option<usize> {
        mood.and_then(|m| self.moods.binary_search_by(|x| x.as_str().cmp(m)).ok())
    }

    pub(crate) fn project_cached(
        &self,
        net: &Network,
        lyric: &LyricInput,
        v_tilde: Option<&[f64]>,
    ) -> Result<(Vec<f64>, ProjectionCache)> {
        match net {
            Network::Encoder(p) => {
                let rows = lyric.rows(self.table);
                let mood = self.mood_id(lyric.mood.as_deref());
                let (out, cache) = p.forward_cached(&rows, v_tilde, mood)?;
                Ok((out, ProjectionCache::Encoder(cache)))
            }
            Network::Bow(m) => {
                let features = m.vocab.features(&lyric.words)?;
                mlp_cached(&m.projection, &features)
            }
            Network::Conse(m) => {
                let pooled = mean_rows(&lyric.rows(self.table))?;
                mlp_cached(&m.mlp, &pooled)
            }
            Network::AttReader(_) => Err(Error::Config(
                "the attreader model scores pairs and has no lyric projection".into(),
            )),
        }
    }

    pub(crate) fn project_backward(
        &self,
        net: &Network,
        lyric: &LyricInput,
        cache: &ProjectionCache,
        d_out: &[f64],
        grads: &mut Network,
    ) {
        match (net, cache, grads) {
            (Network::Encoder(p), ProjectionCache::Encoder(c), Network::Encoder(g)) => {
                p.backward(&lyric.rows(self.table), c, d_out, g)
            }
            (Network::Bow(m), ProjectionCache::Mlp(c), Network::Bow(g)) => {
                m.projection.backward(c, d_out, &mut g.projection);
            }
            (Network::Conse(m), ProjectionCache::Mlp(c), Network::Conse(g)) => {
                m.mlp.backward(c, d_out, &mut g.mlp);
            }
            _ => unreachable!("gradient buffer does not match the network"),
        }
    }

    /// Relevance of a lyric to an image: cosine in tag space, or the
    /// combiner output for the attreader model.
    pub(crate) fn score(&self, net: &Network, image: &ImageInput, lyric: &LyricInput) -> Result<f64> {
        match net {
            Network::AttReader(m) => {
                let v = attention_input(image)?;
                Ok(m.score_cached(&image.tags, &lyric.rows(self.table), v)?.0)
            }
            _ => {
                let (out, _) = self.project_cached(net, lyric, image.v_tilde.as_deref())?;
                cosine(&image.tags, &out)
            }
        }
    }

    pub(crate) fn pair_loss(
        &self,
        net: &Network,
        loss: LossKind,
        image: &ImageInput,
        positive: &LyricInput,
        negative: Option<&LyricInput>,
        grads: &mut Network,
    ) -> Result<f64> {
        let need_negative = || Error::Parameter("margin loss needs a negative lyric".into());
        if let (Network::AttReader(m), Network::AttReader(g)) = (net, &mut *grads) {
            let negative = negative.ok_or_else(need_negative)?;
            let v = attention_input(image)?;
            let rows_p = positive.rows(self.table);
            let rows_n = negative.rows(self.table);
            let (sp, cp) = m.score_cached(&image.tags, &rows_p, v)?;
            let (sn, cn) = m.score_cached(&image.tags, &rows_n, v)?;
            let (value, dp, dn) = score_margin_loss(sp, sn);
            if value > 0.0 {
                m.backward_score(&rows_p, &cp, dp, g);
                m.backward_score(&rows_n, &cn, dn, g);
            }
            return Ok(value);
        }
        let v = image.v_tilde.as_deref();
        let (out, cache) = self.project_cached(net, positive, v)?;
        match loss {
            LossKind::Mse | LossKind::Cpl => {
                let (value, d) = if loss == LossKind::Mse {
                    mse_loss(&image.tags, &out)?
                } else {
                    cosine_loss(&image.tags, &out)?
                };
                self.project_backward(net, positive, &cache, &d, grads);
                Ok(value)
            }
            LossKind::Mrl => {
                let negative = negative.ok_or_else(need_negative)?;
                let (out_n, cache_n) = self.project_cached(net, negative, v)?;
                let (value, dp, dn) = margin_loss(&image.tags, &out, &out_n)?;
                if value > 0.0 {
                    self.project_backward(net, positive, &cache, &dp, grads);
                    self.project_backward(net, negative, &cache_n, &dn, grads);
                }
                Ok(value)
            }
        }
    }
}

fn mlp_cached(mlp: &Mlp, input: &[f64]) -> Result<(Vec<f64>, ProjectionCache)> {
    if input.len() != mlp.input_dim() {
        return Err(Error::shape(format!("projection expects {} inputs, got {}", mlp.input_dim(), input.len())));
    }
    let (out, cache) = mlp.forward_cached(input);
    ensure_finite_slice(&out, "projected lyric")?;
    Ok((out, ProjectionCache::Mlp(cache)))
}

fn attention_input(image: &ImageInput) -> Result<&[f64]> {
    image
        .v_tilde
        .as_deref()
        .ok_or_else(|| Error::Parameter(format!("image {:?} has no tag attention vector", image.id)))
}

/// A configured network plus the vocabularies it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub network: Network,
    /// Sorted moods seen in training; empty unless the kind uses moods.
    pub moods: Vec<String>,
}

impl Model {
    /// Initialises a model whose vocabularies come from `train`.
    pub fn new(config: ModelConfig, train: &Corpus, embed_dim: usize, seed: u64) -> Result<Model> {
        let moods: Vec<String> = if config.kind.uses_mood() {
            let set: std::collections::BTreeSet<String> =
                train.lyrics.iter().filter_map(|l| l.mood.clone()).collect();
            set.into_iter().collect()
        } else {
            Vec::new()
        };
        let vocab = (config.kind == ModelKind::Bow).then(|| {
            let docs: Vec<Vec<String>> = train.lyrics.iter().map(|l| l.words.clone()).collect();
            BowVocabulary::build(&docs, config.bow_vocab)
        });
        let mut rng = Rng::new(seed);
        let network = Network::init(&config, embed_dim, moods.len(), vocab, &mut rng)?;
        Ok(Model { config, network, moods })
    }

    pub(crate) fn context<'a>(&'a self, table: &'a EmbeddingTable) -> Context<'a> {
        Context {
            moods: &self.moods,
            table,
        }
    }

    /// Projection of a lyric into tag space. Attention models need the
    /// query image's tag attention vector.
    pub fn project(&self, lyric: &LyricInput, v_tilde: Option<&[f64]>, table: &EmbeddingTable) -> Result<Vec<f64>> {
        Ok(self.context(table).project_cached(&self.network, lyric, v_tilde)?.0)
    }

    pub fn score(&self, image: &ImageInput, lyric: &LyricInput, table: &EmbeddingTable) -> Result<f64> {
        self.context(table).score(&self.network, image, lyric)
    }

    /// Relevance of every lyric to every image, `[image][lyric]`.
    pub fn score_matrix(&self, corpus: &Corpus, table: &EmbeddingTable) -> Result<Vec<Vec<f64>>> {
        let ctx = self.context(table);
        if self.config.kind.uses_attention() {
            return corpus
                .images
                .par_iter()
                .map(|img| {
                    corpus
                        .lyrics
                        .iter()
                        .map(|l| ctx.score(&self.network, img, l))
                        .collect::<Result<Vec<f64>>>()
                })
                .collect();
        }
        let projections: Vec<Vec<f64>> = corpus
            .lyrics
            .par_iter()
            .map(|l| Ok(ctx.project_cached(&self.network, l, None)?.0))
            .collect::<Result<_>>()?;
        corpus
            .images
            .par_iter()
            .map(|img| projections.iter().map(|p| cosine(&img.tags, p)).collect())
            .collect()
    }

    /// Trains in place; `resume` continues an earlier run.
    pub fn fit(
        &mut self,
        corpus: &Corpus,
        table: &EmbeddingTable,
        config: &TrainConfig,
        resume: Option<TrainingState>,
        on_epoch: impl FnMut(&EpochLog),
    ) -> Result<TrainingState> {
        self.config.check_loss(config.loss)?;
        let objective = ModelObjective {
            ctx: Context {
                moods: &self.moods,
                table,
            },
            corpus,
            loss: config.loss,
        };
        train(&objective, &mut self.network, config, resume, on_epoch)
    }

    /// Loss of one training pair and its gradient.
    pub fn pair_gradient(
        &self,
        corpus: &Corpus,
        table: &EmbeddingTable,
        loss: LossKind,
        pair: usize,
        negative: Option<usize>,
    ) -> Result<(f64, Network)> {
        let objective = ModelObjective {
            ctx: self.context(table),
            corpus,
            loss,
        };
        let mut grads = self.network.zeros_like();
        let value = objective.pair_loss(&self.network, pair, negative, &mut grads)?;
        Ok((value, grads))
    }
}

/// Training pairs of a corpus under one loss.
pub(crate) struct ModelObjective<'a> {
    pub(crate) ctx: Context<'a>,
    pub(crate) corpus: &'a Corpus,
    pub(crate) loss: LossKind,
}

impl Objective for ModelObjective<'_> {
    type Params = Network;

    fn num_pairs(&self) -> usize {
        self.corpus.images.len()
    }

    fn num_lyrics(&self) -> usize {
        self.corpus.lyrics.len()
    }

    fn positive_lyric(&self, pair: usize) -> usize {
        self.corpus.images[pair].lyric
    }

    fn pair_loss(&self, net: &Network, pair: usize, negative: Option<usize>, grads: &mut Network) -> Result<f64> {
        let image = &self.corpus.images[pair];
        let positive = &self.corpus.lyrics[image.lyric];
        let negative = negative.map(|j| &self.corpus.lyrics[j]);
        self.ctx.pair_loss(net, self.loss, image, positive, negative, grads)
    }
}
