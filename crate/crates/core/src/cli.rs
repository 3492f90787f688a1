//! Command-line front end: `prepare`, `train`, `eval`, `retrieve`,
//! `gradcheck` and `stats`.
//!
//! Every option can also come from a JSON file given with `--config`;
//! flags on the command line win over the file, which wins over built-in
//! defaults.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, TrainingRecord};
use crate::corpus::{Corpus, Preprocessor, Resources};
use crate::dataset::{
    filter_triplets, load_tag_names, load_triplets, make_split, song_order, tag_distribution_stats, write_triplets,
    SplitMode, SplitSpec, TagGroup, TagSpace, TripletRecord, OBJECT_TAGS, TAG_DIM,
};
use crate::encoder::Pooling;
use crate::error::{Error, Result};
use crate::gradcheck::{gradient_check, losses_for, GradCheckOptions, GradCheckReport};
use crate::model::{Model, ModelConfig, ModelKind};
use crate::retrieval::{evaluate, query_images, query_songs, Direction, MetricsReport};
use crate::text::{load_embeddings, StopWords, DEFAULT_MAX_LEN, EMBEDDING_DIM};
use crate::training::{LossKind, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "tagsong", version, about = "Image/lyric cross-modal retrieval")]
pub struct Cli {
    /// JSON file supplying defaults for any option.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Filter a triplet file and write a train/test split.
    Prepare(PrepareArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Rank the test split and report R@K and median rank.
    Eval(EvalArgs),
    /// Rank a gallery against a single query.
    Retrieve(RetrieveArgs),
    /// Compare analytic and finite-difference gradients on toy models.
    Gradcheck(GradcheckArgs),
    /// Summarise the tag distribution of a triplet file.
    Stats(StatsArgs),
}

/// Values a `--config` file may provide. Field names match the long flags
/// with `-` replaced by `_`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub triplets: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub tag_names: Option<PathBuf>,
    pub stop_words: Option<PathBuf>,
    pub split: Option<PathBuf>,
    pub filtered: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub mode: Option<SplitMode>,
    pub model: Option<ModelKind>,
    pub tag_group: Option<TagGroup>,
    pub loss: Option<LossKind>,
    pub pooling: Option<Pooling>,
    pub k_tags: Option<usize>,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub batch: Option<usize>,
    pub learning_rate: Option<f64>,
    pub clip_norm: Option<f64>,
    pub hidden: Option<usize>,
    pub attention_dim: Option<usize>,
    pub mlp_hidden: Option<Vec<usize>>,
    pub share_attention: Option<bool>,
    pub max_len: Option<usize>,
    pub bow_vocab: Option<usize>,
    pub min_occurrence: Option<usize>,
    pub per_song: Option<usize>,
    pub test_songs: Option<usize>,
    pub tag_dim: Option<usize>,
    pub object_tags: Option<usize>,
    pub embed_dim: Option<usize>,
    pub direction: Option<Direction>,
    pub top_n: Option<usize>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, Args)]
pub struct TagSpaceArgs {
    /// Width of the tag vectors.
    #[arg(long)]
    pub tag_dim: Option<usize>,
    /// Number of leading object dimensions; the rest are attributes.
    #[arg(long)]
    pub object_tags: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct ResourceArgs {
    /// Word-vector text file (`V dim` header, then `word v1 .. vdim`).
    #[arg(long, value_name = "PATH")]
    pub embeddings: Option<PathBuf>,
    /// Expected word-vector width.
    #[arg(long)]
    pub embed_dim: Option<usize>,
    /// Tag-name file, one name per tag dimension.
    #[arg(long, value_name = "PATH")]
    pub tag_names: Option<PathBuf>,
    /// Stop-word list replacing the bundled one.
    #[arg(long, value_name = "PATH")]
    pub stop_words: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    #[arg(long, value_enum)]
    pub model: Option<ModelKind>,
    #[arg(long, value_enum)]
    pub tag_group: Option<TagGroup>,
    #[arg(long, value_enum)]
    pub pooling: Option<Pooling>,
    /// Number of top tags pooled into the tag attention vector.
    #[arg(long)]
    pub k_tags: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub attention_dim: Option<usize>,
    /// Comma-separated hidden layer widths of the projection MLP.
    #[arg(long, value_delimiter = ',')]
    pub mlp_hidden: Option<Vec<usize>>,
    /// Use one set of attention weights for both directions.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub share_attention: Option<bool>,
    /// Maximum number of lyric tokens.
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Bag-of-words vocabulary size.
    #[arg(long)]
    pub bow_vocab: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct PrepareArgs {
    #[arg(long, value_name = "PATH")]
    pub triplets: Option<PathBuf>,
    /// Output split file.
    #[arg(long, value_name = "PATH")]
    pub split: Option<PathBuf>,
    /// Output JSONL of the filtered records.
    #[arg(long, value_name = "PATH")]
    pub filtered: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<SplitMode>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Songs with fewer triplets are dropped.
    #[arg(long)]
    pub min_occurrence: Option<usize>,
    /// Triplets kept per song, by favorite count; 0 keeps all.
    #[arg(long)]
    pub per_song: Option<usize>,
    /// Songs held out by a dagger split.
    #[arg(long)]
    pub test_songs: Option<usize>,
    #[command(flatten)]
    pub space: TagSpaceArgs,
    /// JSON summary; defaults to `<split>.report.json`.
    #[arg(long, value_name = "PATH")]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long, value_name = "PATH")]
    pub triplets: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub split: Option<PathBuf>,
    /// Output checkpoint.
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    /// Continue training from this checkpoint.
    #[arg(long, value_name = "PATH")]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub resources: ResourceArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub space: TagSpaceArgs,
    #[arg(long, value_enum)]
    pub loss: Option<LossKind>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Mini-batch size.
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Global gradient-norm ceiling; 0 disables clipping.
    #[arg(long)]
    pub clip_norm: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write the per-epoch log here.
    #[arg(long, value_name = "PATH")]
    pub log: Option<PathBuf>,
    /// JSON summary; defaults to `<checkpoint>.train.json`.
    #[arg(long, value_name = "PATH")]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long, value_name = "PATH")]
    pub triplets: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub split: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub resources: ResourceArgs,
    /// Must match the group the model was trained on.
    #[arg(long, value_enum)]
    pub tag_group: Option<TagGroup>,
    /// Evaluate one direction only.
    #[arg(long, value_enum)]
    pub direction: Option<Direction>,
    /// JSON report; defaults to `<checkpoint>.metrics.json`.
    #[arg(long, value_name = "PATH")]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct RetrieveArgs {
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    /// Gallery records.
    #[arg(long, value_name = "PATH")]
    pub triplets: Option<PathBuf>,
    /// Restrict the gallery to the test side of this split.
    #[arg(long, value_name = "PATH")]
    pub split: Option<PathBuf>,
    #[command(flatten)]
    pub resources: ResourceArgs,
    #[arg(long, value_enum)]
    pub direction: Option<Direction>,
    /// image2song: JSON array with a full tag vector. song2image: lyric text.
    #[arg(long, value_name = "PATH")]
    pub query: PathBuf,
    #[arg(long)]
    pub top_n: Option<usize>,
    #[arg(long, value_name = "PATH")]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    /// Check one model kind; all kinds by default.
    #[arg(long, value_enum)]
    pub model: Option<ModelKind>,
    /// Check one loss; every applicable loss by default.
    #[arg(long, value_enum)]
    pub loss: Option<LossKind>,
    /// First seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of consecutive seeds.
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub tag_dim: Option<usize>,
    /// Perturb the analytic gradient; the check is then expected to fail.
    #[arg(long, hide = true)]
    pub corrupt_gradient: bool,
    #[arg(long, value_name = "PATH")]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct StatsArgs {
    #[arg(long, value_name = "PATH")]
    pub triplets: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub tag_names: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub tag_group: Option<TagGroup>,
    #[arg(long)]
    pub top_n: Option<usize>,
    #[command(flatten)]
    pub space: TagSpaceArgs,
    #[arg(long, value_name = "PATH")]
    pub report: Option<PathBuf>,
}

/// Summary written by `prepare`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrepareReport {
    pub mode: SplitMode,
    pub seed: u64,
    pub input_triplets: usize,
    pub songs: usize,
    pub triplets: usize,
    pub train_songs: usize,
    pub train_triplets: usize,
    pub test_songs: usize,
    pub test_triplets: usize,
}

/// Summary written by `train`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seed: u64,
    pub pairs: usize,
    pub lyrics: usize,
    pub epochs_done: usize,
    pub final_loss: Option<f64>,
    pub losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedItem {
    pub rank: usize,
    pub id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrieveReport {
    pub direction: Direction,
    pub query: PathBuf,
    pub results: Vec<RetrievedItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagStat {
    pub rank: usize,
    pub dim: usize,
    pub name: Option<String>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub tag_group: TagGroup,
    pub records: usize,
    pub top: Vec<TagStat>,
}

fn required(value: Option<PathBuf>, flag: &str) -> Result<PathBuf> {
    let path = value.ok_or_else(|| Error::Config(format!("missing --{flag}")))?;
    Ok(path)
}

fn existing(value: Option<PathBuf>, flag: &str) -> Result<PathBuf> {
    let path = required(value, flag)?;
    if !path.exists() {
        return Err(Error::Config(format!("--{flag}: {} does not exist", path.display())));
    }
    Ok(path)
}

/// `dir/name.ext` → `dir/name.<suffix>`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn io_out(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

impl TagSpaceArgs {
    fn resolve(&self, cfg: &RunConfig) -> Result<TagSpace> {
        let dim = self.tag_dim.or(cfg.tag_dim).unwrap_or(TAG_DIM);
        let default_objects = if dim == TAG_DIM { OBJECT_TAGS } else { dim / 2 };
        let objects = self.object_tags.or(cfg.object_tags).unwrap_or(default_objects);
        if dim == 0 || objects > dim {
            return Err(Error::Config(format!("invalid tag space: {objects} objects in {dim} dimensions")));
        }
        Ok(TagSpace { dim, objects })
    }
}

impl ResourceArgs {
    fn load(&self, cfg: &RunConfig, default_dim: usize, need_tag_names: bool, tag_dim: usize) -> Result<Resources> {
        let embeddings = existing(self.embeddings.clone().or(cfg.embeddings.clone()), "embeddings")?;
        let dim = self.embed_dim.or(cfg.embed_dim).unwrap_or(default_dim);
        let table = load_embeddings(&embeddings, Some(dim))?;
        let tag_names = match self.tag_names.clone().or(cfg.tag_names.clone()) {
            Some(p) => Some(load_tag_names(&p, tag_dim)?),
            None if need_tag_names => return Err(Error::Config("missing --tag-names".into())),
            None => None,
        };
        let stop_words = match self.stop_words.clone().or(cfg.stop_words.clone()) {
            Some(p) => StopWords::load(&p)?,
            None => StopWords::bundled(),
        };
        Ok(Resources {
            table,
            tag_names,
            stop_words,
        })
    }
}

impl ModelArgs {
    fn resolve(&self, cfg: &RunConfig, space: TagSpace) -> ModelConfig {
        let kind = self.model.or(cfg.model).unwrap_or(ModelKind::OursAttention);
        let base = ModelConfig::new(kind);
        ModelConfig {
            kind,
            hidden: self.hidden.or(cfg.hidden).unwrap_or(base.hidden),
            attention_dim: self.attention_dim.or(cfg.attention_dim).unwrap_or(base.attention_dim),
            mlp_hidden: self.mlp_hidden.clone().or(cfg.mlp_hidden.clone()).unwrap_or(base.mlp_hidden),
            k_tags: self.k_tags.or(cfg.k_tags).unwrap_or(base.k_tags),
            pooling: self.pooling.or(cfg.pooling).unwrap_or(base.pooling),
            tag_group: self.tag_group.or(cfg.tag_group).unwrap_or(base.tag_group),
            share_attention: self.share_attention.or(cfg.share_attention).unwrap_or(false),
            bow_vocab: self.bow_vocab.or(cfg.bow_vocab).unwrap_or(base.bow_vocab),
            max_len: self.max_len.or(cfg.max_len).unwrap_or(DEFAULT_MAX_LEN),
            tag_space: space,
        }
    }
}

/// Parses `args` and runs the command, writing human-readable output to
/// `out`. Returns the process exit code.
pub fn main_with_args<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = write!(err, "{}", e.render());
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::Prepare(a) => cmd_prepare(a, &cfg, out),
        Command::Train(a) => cmd_train(a, &cfg, out),
        Command::Eval(a) => cmd_eval(a, &cfg, out),
        Command::Retrieve(a) => cmd_retrieve(a, &cfg, out),
        Command::Gradcheck(a) => cmd_gradcheck(a, &cfg, out),
        Command::Stats(a) => cmd_stats(a, &cfg, out),
    }
}

fn distinct_songs<'a>(records: impl IntoIterator<Item = &'a TripletRecord>) -> usize {
    records
        .into_iter()
        .map(|r| r.song_id.as_str())
        .collect::<std::collections::BTreeSet<_>>()
        .len()
}

pub fn cmd_prepare(a: PrepareArgs, cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let triplets = existing(a.triplets.or(cfg.triplets.clone()), "triplets")?;
    let split_path = required(a.split.or(cfg.split.clone()), "split")?;
    let space = a.space.resolve(cfg)?;
    let mode = a.mode.or(cfg.mode).unwrap_or(SplitMode::Dagger);
    let seed = a.seed.or(cfg.seed).unwrap_or(0);
    let min_occurrence = a.min_occurrence.or(cfg.min_occurrence).unwrap_or(5);
    let per_song = match a.per_song.or(cfg.per_song).unwrap_or(5) {
        0 => None,
        n => Some(n),
    };
    let test_songs = a.test_songs.or(cfg.test_songs).unwrap_or(100);

    let records = load_triplets(&triplets, space.dim)?;
    let filtered = filter_triplets(&records, min_occurrence, per_song);
    let split = if filtered.is_empty() {
        log::warn!("no song has at least {min_occurrence} triplets; the split is empty");
        SplitSpec {
            mode,
            seed,
            train: Vec::new(),
            test: Vec::new(),
        }
    } else {
        make_split(&filtered, mode, seed, test_songs)?
    };
    let filtered_path = a
        .filtered
        .or(cfg.filtered.clone())
        .unwrap_or_else(|| sibling(&split_path, "filtered.jsonl"));
    write_triplets(&filtered_path, &filtered)?;
    split.save(&split_path)?;

    let train = split.select(&filtered, false);
    let test = split.select(&filtered, true);
    let report = PrepareReport {
        mode,
        seed,
        input_triplets: records.len(),
        songs: song_order(&filtered).len(),
        triplets: filtered.len(),
        train_songs: distinct_songs(train.iter().copied()),
        train_triplets: train.len(),
        test_songs: distinct_songs(test.iter().copied()),
        test_triplets: test.len(),
    };
    writeln!(
        out,
        "{} songs / {} triplets (from {}); {mode} split: train {} songs / {} triplets, test {} songs / {} triplets",
        report.songs,
        report.triplets,
        report.input_triplets,
        report.train_songs,
        report.train_triplets,
        report.test_songs,
        report.test_triplets
    )
    .map_err(io_out)?;
    writeln!(out, "wrote {} and {}", split_path.display(), filtered_path.display()).map_err(io_out)?;
    write_json(&a.report.unwrap_or_else(|| sibling(&split_path, "report.json")), &report)
}

fn train_config(a: &TrainArgs, cfg: &RunConfig, base: TrainConfig) -> TrainConfig {
    let clip = match a.clip_norm.or(cfg.clip_norm) {
        Some(c) => Some(c).filter(|&c| c != 0.0),
        None => base.clip_norm,
    };
    TrainConfig {
        loss: a.loss.or(cfg.loss).unwrap_or(base.loss),
        batch_size: a.batch.or(cfg.batch).unwrap_or(base.batch_size),
        epochs: a.epochs.or(cfg.epochs).unwrap_or(base.epochs),
        seed: a.seed.or(cfg.seed).unwrap_or(base.seed),
        learning_rate: a.learning_rate.or(cfg.learning_rate).unwrap_or(base.learning_rate),
        rho: base.rho,
        eps: base.eps,
        clip_norm: clip,
    }
}

pub fn cmd_train(a: TrainArgs, cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let triplets = existing(a.triplets.clone().or(cfg.triplets.clone()), "triplets")?;
    let split_path = existing(a.split.clone().or(cfg.split.clone()), "split")?;
    let checkpoint_path = required(a.checkpoint.clone().or(cfg.checkpoint.clone()), "checkpoint")?;

    let (model_config, resume, base) = match &a.resume {
        Some(path) => {
            let ck = Checkpoint::load(existing(Some(path.clone()), "resume")?)?;
            let record = ck
                .training
                .clone()
                .ok_or_else(|| Error::Config(format!("{} holds no training state", path.display())))?;
            (ck.model.clone(), Some((ck, record.state)), record.config)
        }
        None => {
            let space = a.space.resolve(cfg)?;
            let config = a.model.resolve(cfg, space);
            let base = TrainConfig {
                loss: config.kind.default_loss(),
                ..TrainConfig::default()
            };
            (config, None, base)
        }
    };
    let mut tc = train_config(&a, cfg, base);
    if let Some((ck, _)) = &resume {
        tc.seed = ck.seed;
    }
    tc.validate()?;
    model_config.validate()?;
    model_config.check_loss(tc.loss)?;

    let default_dim = resume.as_ref().map_or(EMBEDDING_DIM, |(ck, _)| ck.embed_dim);
    let resources = a.resources.load(
        cfg,
        default_dim,
        model_config.kind.uses_attention(),
        model_config.tag_space.dim,
    )?;
    let records = load_triplets(&triplets, model_config.tag_space.dim)?;
    let split = SplitSpec::load(&split_path)?;
    let corpus = Corpus::build(split.select(&records, false), &resources, &model_config.corpus_options())?;
    if corpus.is_empty() {
        return Err(Error::Parameter("the training split is empty".into()));
    }

    let (mut model, state) = match resume {
        Some((ck, state)) => (ck.to_model(&resources.table)?, Some(state)),
        None => (Model::new(model_config, &corpus, resources.table.dim(), tc.seed)?, None),
    };
    let mut log_file = match a.log.clone() {
        Some(p) => Some((std::fs::File::create(&p).map_err(|e| Error::io(&p, e))?, p)),
        None => None,
    };
    let mut write_err = None;
    let state = model.fit(&corpus, &resources.table, &tc, state, |entry| {
        let line = format!("{entry}\n");
        if let Err(e) = out.write_all(line.as_bytes()) {
            write_err.get_or_insert(io_out(e));
        }
        if let Some((f, p)) = log_file.as_mut() {
            if let Err(e) = f.write_all(line.as_bytes()) {
                write_err.get_or_insert(Error::io(p.clone(), e));
            }
        }
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }

    let checkpoint = Checkpoint::from_model(
        &model,
        &resources.table,
        tc.seed,
        Some(TrainingRecord {
            config: tc.clone(),
            state: state.clone(),
        }),
    );
    checkpoint.save(&checkpoint_path)?;
    let report = TrainReport {
        model: model.config.clone(),
        train: tc.clone(),
        seed: tc.seed,
        pairs: corpus.images.len(),
        lyrics: corpus.lyrics.len(),
        epochs_done: state.epochs_done,
        final_loss: state.losses.last().copied(),
        losses: state.losses.clone(),
    };
    writeln!(out, "wrote {}", checkpoint_path.display()).map_err(io_out)?;
    write_json(&a.report.unwrap_or_else(|| sibling(&checkpoint_path, "train.json")), &report)
}

fn load_model(checkpoint: Option<PathBuf>, cfg: &RunConfig, resources: &ResourceArgs, need_names: bool) -> Result<(Model, Resources, PathBuf)> {
    let path = existing(checkpoint.or(cfg.checkpoint.clone()), "checkpoint")?;
    let ck = Checkpoint::load(&path)?;
    let resources = resources.load(
        cfg,
        ck.embed_dim,
        need_names || ck.model.kind.uses_attention(),
        ck.model.tag_space.dim,
    )?;
    let model = ck.to_model(&resources.table)?;
    Ok((model, resources, path))
}

pub fn cmd_eval(a: EvalArgs, cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let triplets = existing(a.triplets.or(cfg.triplets.clone()), "triplets")?;
    let split_path = existing(a.split.or(cfg.split.clone()), "split")?;
    let (model, resources, ck_path) = load_model(a.checkpoint, cfg, &a.resources, false)?;
    let tag_group = a.tag_group.or(cfg.tag_group).unwrap_or(model.config.tag_group);
    let directions: Vec<Direction> = match a.direction.or(cfg.direction) {
        Some(d) => vec![d],
        None => vec![Direction::Image2Song, Direction::Song2Image],
    };
    let records = load_triplets(&triplets, model.config.tag_space.dim)?;
    let split = SplitSpec::load(&split_path)?;
    let corpus = Corpus::build(split.select(&records, true), &resources, &model.config.corpus_options())?;
    let report: MetricsReport = evaluate(&model, &corpus, &resources.table, &directions, split.mode, tag_group)?;
    write!(out, "{}", report.to_table()).map_err(io_out)?;
    write_json(&a.report.unwrap_or_else(|| sibling(&ck_path, "metrics.json")), &report)
}

pub fn cmd_retrieve(a: RetrieveArgs, cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let triplets = existing(a.triplets.or(cfg.triplets.clone()), "triplets")?;
    let (model, resources, _) = load_model(a.checkpoint, cfg, &a.resources, false)?;
    let direction = a.direction.or(cfg.direction).unwrap_or(Direction::Image2Song);
    let top_n = a.top_n.or(cfg.top_n).unwrap_or(10);
    let records = load_triplets(&triplets, model.config.tag_space.dim)?;
    let gallery_records: Vec<&TripletRecord> = match a.split.or(cfg.split.clone()) {
        Some(p) => SplitSpec::load(existing(Some(p), "split")?)?.select(&records, true),
        None => records.iter().collect(),
    };
    let options = model.config.corpus_options();
    let gallery = Corpus::build(gallery_records, &resources, &options)?;
    if gallery.is_empty() {
        return Err(Error::Parameter("empty gallery".into()));
    }
    let pre = Preprocessor::new(&resources, &options)?;
    let query = existing(Some(a.query), "query")?;
    let text = std::fs::read_to_string(&query).map_err(|e| Error::io(&query, e))?;
    let ranked = match direction {
        Direction::Image2Song => {
            let tags: Vec<f64> = serde_json::from_str(&text)
                .map_err(|e| Error::Schema(format!("{}: expected a JSON array of tag values: {e}", query.display())))?;
            let image = pre.image("query", &tags, usize::MAX)?;
            query_songs(&model, &resources.table, &gallery, &image)?
        }
        Direction::Song2Image => {
            let lyric = pre.lyric("query", &text, None)?;
            query_images(&model, &resources.table, &gallery, &lyric)?
        }
    };
    let results: Vec<RetrievedItem> = ranked
        .into_iter()
        .take(top_n)
        .enumerate()
        .map(|(i, (id, score))| RetrievedItem { rank: i + 1, id, score })
        .collect();
    for r in &results {
        writeln!(out, "{}\t{}\t{:.6}", r.rank, r.id, r.score).map_err(io_out)?;
    }
    if let Some(p) = a.report {
        write_json(
            &p,
            &RetrieveReport {
                direction,
                query,
                results,
            },
        )?;
    }
    Ok(())
}

pub fn cmd_gradcheck(a: GradcheckArgs, cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let base = GradCheckOptions::default();
    let options = GradCheckOptions {
        hidden: a.hidden.or(cfg.hidden).unwrap_or(base.hidden),
        attention_dim: a.hidden.or(cfg.attention_dim).unwrap_or(base.attention_dim),
        tag_dim: a.tag_dim.or(cfg.tag_dim).unwrap_or(base.tag_dim),
        corrupt: a.corrupt_gradient,
        ..base
    };
    let kinds: Vec<ModelKind> = match a.model.or(cfg.model) {
        Some(k) => vec![k],
        None => ModelKind::ALL.to_vec(),
    };
    let first = a.seed.or(cfg.seed).unwrap_or(0);
    let mut reports: Vec<GradCheckReport> = Vec::new();
    for kind in kinds {
        let losses = match a.loss.or(cfg.loss) {
            Some(l) => vec![l],
            None => losses_for(kind),
        };
        for loss in losses {
            for seed in first..first + a.seeds {
                let report = gradient_check(kind, loss, seed, &options)?;
                write!(out, "{}", report.to_table()).map_err(io_out)?;
                writeln!(out, "{}\n", if report.passed() { "ok" } else { "FAILED" }).map_err(io_out)?;
                reports.push(report);
            }
        }
    }
    if let Some(p) = a.report {
        write_json(&p, &reports)?;
    }
    let failed: Vec<String> = reports
        .iter()
        .filter(|r| !r.passed())
        .map(|r| format!("{}/{}/seed {}", r.model, r.loss, r.seed))
        .collect();
    if !failed.is_empty() {
        return Err(Error::numeric(format!("gradient check failed for {}", failed.join(", "))));
    }
    writeln!(out, "all {} checks passed", reports.len()).map_err(io_out)?;
    Ok(())
}

pub fn cmd_stats(a: StatsArgs, cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let triplets = existing(a.triplets.or(cfg.triplets.clone()), "triplets")?;
    let space = a.space.resolve(cfg)?;
    let group = a.tag_group.or(cfg.tag_group).unwrap_or(TagGroup::ObjAttr);
    let top_n = a.top_n.or(cfg.top_n).unwrap_or(9);
    let names = match a.tag_names.or(cfg.tag_names.clone()) {
        Some(p) => Some(load_tag_names(&p, space.dim)?),
        None => None,
    };
    let records = load_triplets(&triplets, space.dim)?;
    let stats = tag_distribution_stats(&records, group, space)?;
    let top: Vec<TagStat> = stats
        .into_iter()
        .take(top_n)
        .enumerate()
        .map(|(i, (dim, mean))| TagStat {
            rank: i + 1,
            dim,
            name: names.as_ref().map(|n| n[dim].clone()),
            mean,
        })
        .collect();
    writeln!(out, "{:>4}  {:>4}  {:<24}  {:>8}", "rank", "dim", "name", "mean").map_err(io_out)?;
    for t in &top {
        writeln!(
            out,
            "{:>4}  {:>4}  {:<24}  {:>8.4}",
            t.rank,
            t.dim,
            t.name.as_deref().unwrap_or("-"),
            t.mean
        )
        .map_err(io_out)?;
    }
    if let Some(p) = a.report {
        write_json(
            &p,
            &StatsReport {
                tag_group: group,
                records: records.len(),
                top,
            },
        )?;
    }
    Ok(())
}
