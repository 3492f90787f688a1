//! Ranking and rank-based evaluation in both retrieval directions.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, ImageInput, LyricInput};
use crate::dataset::{SplitMode, TagGroup};
use crate::error::{Error, Result};
use crate::model::{Model, ModelKind};
use crate::numerics::cosine;
use crate::text::EmbeddingTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// An image's tag vector queries the lyric gallery.
    #[value(name = "image2song")]
    Image2Song,
    /// A lyric queries the image gallery.
    #[value(name = "song2image")]
    Song2Image,
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Direction::Image2Song => "image2song",
            Direction::Song2Image => "song2image",
        })
    }
}

/// One query's gallery, best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingResult {
    pub query_id: String,
    pub candidates: Vec<String>,
    pub scores: Vec<f64>,
    pub relevant: Vec<bool>,
}

impl RankingResult {
    /// 1-based rank of the first relevant candidate.
    pub fn best_rank(&self) -> usize {
        self.relevant.iter().position(|&r| r).map_or(usize::MAX, |p| p + 1)
    }
}

/// Orders gallery positions by descending score; equal scores keep gallery
/// order.
pub fn rank_by_scores(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Builds a ranking from per-candidate scores and relevance flags.
pub fn ranking_from_scores(
    query_id: &str,
    ids: &[String],
    scores: &[f64],
    relevant: &[bool],
) -> Result<RankingResult> {
    if ids.len() != scores.len() || ids.len() != relevant.len() {
        return Err(Error::shape("gallery ids, scores and relevance differ in length"));
    }
    if ids.is_empty() {
        return Err(Error::Parameter("empty gallery".into()));
    }
    if !relevant.iter().any(|&r| r) {
        return Err(Error::Parameter(format!("query {query_id:?} has no relevant candidate")));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::numeric(format!("non-finite score {bad} for query {query_id:?}")));
    }
    let order = rank_by_scores(scores);
    Ok(RankingResult {
        query_id: query_id.to_owned(),
        candidates: order.iter().map(|&i| ids[i].clone()).collect(),
        scores: order.iter().map(|&i| scores[i]).collect(),
        relevant: order.iter().map(|&i| relevant[i]).collect(),
    })
}

/// Ranks `gallery` by cosine similarity to `query`.
pub fn rank_candidates(
    query_id: &str,
    query: &[f64],
    gallery: &[(String, Vec<f64>)],
    is_relevant: impl Fn(&str) -> bool,
) -> Result<RankingResult> {
    let scores = gallery
        .iter()
        .map(|(_, v)| cosine(query, v))
        .collect::<Result<Vec<f64>>>()?;
    let ids: Vec<String> = gallery.iter().map(|(id, _)| id.clone()).collect();
    let relevant: Vec<bool> = ids.iter().map(|id| is_relevant(id)).collect();
    ranking_from_scores(query_id, &ids, &scores, &relevant)
}

/// Percentage of queries with a relevant candidate in the top `k`.
pub fn recall_at_k(results: &[RankingResult], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Parameter("k must be at least 1".into()));
    }
    if results.is_empty() {
        return Err(Error::Parameter("no queries".into()));
    }
    let hits = results.iter().filter(|r| r.best_rank() <= k).count();
    Ok(100.0 * hits as f64 / results.len() as f64)
}

/// Median over queries of the best relevant rank; an even count averages
/// the two middle values.
pub fn median_rank(results: &[RankingResult]) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::Parameter("no queries".into()));
    }
    let mut ranks: Vec<usize> = results.iter().map(RankingResult::best_rank).collect();
    ranks.sort_unstable();
    let n = ranks.len();
    Ok(if n % 2 == 1 {
        ranks[n / 2] as f64
    } else {
        (ranks[n / 2 - 1] as f64 + ranks[n / 2] as f64) / 2.0
    })
}

/// Cut-offs reported for a split mode.
pub fn report_ks(mode: SplitMode) -> [usize; 3] {
    match mode {
        SplitMode::Dagger => [1, 5, 10],
        SplitMode::Section => [10, 50, 100],
    }
}

/// Rankings for every query of one direction from an `[image][lyric]`
/// score matrix.
pub fn rankings(corpus: &Corpus, scores: &[Vec<f64>], direction: Direction) -> Result<Vec<RankingResult>> {
    if corpus.images.is_empty() || corpus.lyrics.is_empty() {
        return Err(Error::Parameter("empty gallery".into()));
    }
    match direction {
        Direction::Image2Song => {
            let ids: Vec<String> = corpus.lyrics.iter().map(|l| l.song_id.clone()).collect();
            corpus
                .images
                .iter()
                .zip(scores)
                .map(|(img, row)| {
                    let relevant: Vec<bool> = (0..ids.len()).map(|j| j == img.lyric).collect();
                    ranking_from_scores(&img.id, &ids, row, &relevant)
                })
                .collect()
        }
        Direction::Song2Image => {
            let ids: Vec<String> = corpus.images.iter().map(|i| i.id.clone()).collect();
            corpus
                .lyrics
                .iter()
                .enumerate()
                .map(|(j, lyric)| {
                    let column: Vec<f64> = scores.iter().map(|row| row[j]).collect();
                    let relevant: Vec<bool> = corpus.images.iter().map(|i| i.lyric == j).collect();
                    ranking_from_scores(&lyric.song_id, &ids, &column, &relevant)
                })
                .collect()
        }
    }
}

/// Gallery lyrics ordered by relevance to an ad-hoc image query.
pub fn query_songs(model: &Model, table: &EmbeddingTable, gallery: &Corpus, image: &ImageInput) -> Result<Vec<(String, f64)>> {
    let scores = gallery
        .lyrics
        .par_iter()
        .map(|l| model.score(image, l, table))
        .collect::<Result<Vec<f64>>>()?;
    let ids: Vec<String> = gallery.lyrics.iter().map(|l| l.song_id.clone()).collect();
    Ok(ordered(&ids, &scores))
}

/// Gallery images ordered by relevance to an ad-hoc lyric query.
pub fn query_images(model: &Model, table: &EmbeddingTable, gallery: &Corpus, lyric: &LyricInput) -> Result<Vec<(String, f64)>> {
    let scores = gallery
        .images
        .par_iter()
        .map(|img| model.score(img, lyric, table))
        .collect::<Result<Vec<f64>>>()?;
    let ids: Vec<String> = gallery.images.iter().map(|i| i.id.clone()).collect();
    Ok(ordered(&ids, &scores))
}

fn ordered(ids: &[String], scores: &[f64]) -> Vec<(String, f64)> {
    rank_by_scores(scores)
        .into_iter()
        .map(|i| (ids[i].clone(), scores[i]))
        .collect()
}

/// Recall at one cut-off.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallAt {
    pub k: usize,
    pub percent: f64,
}

/// Metrics of one retrieval direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionMetrics {
    pub direction: Direction,
    pub queries: usize,
    pub gallery: usize,
    pub recall: Vec<RecallAt>,
    pub median_rank: f64,
}

impl DirectionMetrics {
    pub fn from_rankings(direction: Direction, results: &[RankingResult], ks: &[usize]) -> Result<Self> {
        let recall = ks
            .iter()
            .map(|&k| Ok(RecallAt { k, percent: recall_at_k(results, k)? }))
            .collect::<Result<Vec<_>>>()?;
        Ok(DirectionMetrics {
            direction,
            queries: results.len(),
            gallery: results.first().map_or(0, |r| r.candidates.len()),
            recall,
            median_rank: median_rank(results)?,
        })
    }
}

/// Evaluation summary written by the `eval` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: ModelKind,
    pub mode: SplitMode,
    pub tag_group: TagGroup,
    pub directions: Vec<DirectionMetrics>,
}

impl MetricsReport {
    /// Aligned text table, one row per direction.
    pub fn to_table(&self) -> String {
        let ks: Vec<usize> = self.directions.first().map(|d| d.recall.iter().map(|r| r.k).collect()).unwrap_or_default();
        let mut out = format!("model {}  mode {}  tag group {}\n", self.model, self.mode, self.tag_group);
        out.push_str(&format!("{:<12}", "direction"));
        for k in &ks {
            out.push_str(&format!("{:>8}", format!("R@{k}")));
        }
        out.push_str(&format!("{:>8}\n", "Med r"));
        for d in &self.directions {
            out.push_str(&format!("{:<12}", d.direction.to_string()));
            for r in &d.recall {
                out.push_str(&format!("{:>8.1}", r.percent));
            }
            out.push_str(&format!("{:>8.1}\n", d.median_rank));
        }
        out
    }
}

/// Scores the test corpus and reports metrics for each direction.
pub fn evaluate(
    model: &Model,
    corpus: &Corpus,
    table: &EmbeddingTable,
    directions: &[Direction],
    mode: SplitMode,
    tag_group: TagGroup,
) -> Result<MetricsReport> {
    if tag_group != model.config.tag_group {
        return Err(Error::Config(format!(
            "model trained on tag group {} cannot be evaluated on {tag_group}",
            model.config.tag_group
        )));
    }
    if corpus.is_empty() {
        return Err(Error::Parameter("empty gallery".into()));
    }
    let scores = model.score_matrix(corpus, table)?;
    let ks = report_ks(mode);
    let directions = directions
        .iter()
        .map(|&d| DirectionMetrics::from_rankings(d, &rankings(corpus, &scores, d)?, &ks))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport {
        model: model.config.kind,
        mode,
        tag_group,
        directions,
    })
}
