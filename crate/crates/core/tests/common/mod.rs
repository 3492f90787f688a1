//! Synthetic fixtures shared by the integration tests.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use tagsong::corpus::Resources;
use tagsong::dataset::{write_triplets, TagSpace, TripletRecord};
use tagsong::numerics::{Matrix, Rng};
use tagsong::text::{EmbeddingTable, StopWords};

/// A corpus where image `i` of song `s` puts most tag mass on the words of
/// song `s`'s lyric. Tag dimension `d` is named after vocabulary word `d`
/// (objects) or `d - objects` (attributes).
#[derive(Debug, Clone)]
pub struct Fixture {
    pub words: Vec<String>,
    pub weights: Matrix,
    pub space: TagSpace,
    pub tag_names: Vec<String>,
    pub records: Vec<TripletRecord>,
}

pub struct FixtureSpec {
    pub songs: usize,
    pub images_per_song: usize,
    pub vocab: usize,
    pub embed_dim: usize,
    pub words_per_lyric: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        FixtureSpec {
            songs: 12,
            images_per_song: 6,
            vocab: 16,
            embed_dim: 8,
            words_per_lyric: 3,
            noise: 0.1,
            seed: 1,
        }
    }
}

pub fn fixture(spec: &FixtureSpec) -> Fixture {
    let mut rng = Rng::new(spec.seed);
    let words: Vec<String> = (0..spec.vocab).map(|i| format!("word{i}")).collect();
    let weights = Matrix::from_fn(spec.vocab, spec.embed_dim, |_, _| rng.uniform(-1.0, 1.0));
    let space = TagSpace {
        dim: 2 * spec.vocab,
        objects: spec.vocab,
    };
    let tag_names: Vec<String> = (0..space.dim).map(|d| words[d % spec.vocab].clone()).collect();
    let mut records = Vec::new();
    for s in 0..spec.songs {
        let lyric_words: Vec<usize> = (0..spec.words_per_lyric).map(|_| rng.below(spec.vocab)).collect();
        let lyric: Vec<&str> = lyric_words.iter().map(|&w| words[w].as_str()).collect();
        for i in 0..spec.images_per_song {
            let mut tags: Vec<f64> = (0..space.dim).map(|_| rng.uniform(0.0, spec.noise)).collect();
            for &w in &lyric_words {
                tags[w] = rng.uniform(0.7, 1.0);
                tags[spec.vocab + w] = rng.uniform(0.5, 0.9);
            }
            records.push(TripletRecord {
                id: format!("img{s}_{i}"),
                song_id: format!("song{s}"),
                lyric_raw: lyric.join(" "),
                tags,
                mood: Some(["calm", "happy", "sad"][s % 3].to_string()),
                favorite_count: 1 + rng.below(50) as u64,
            });
        }
    }
    Fixture {
        words,
        weights,
        space,
        tag_names,
        records,
    }
}

impl Fixture {
    pub fn table(&self) -> EmbeddingTable {
        EmbeddingTable::new(self.words.clone(), self.weights.clone()).unwrap()
    }

    pub fn resources(&self) -> Resources {
        Resources {
            table: self.table(),
            tag_names: Some(self.tag_names.clone()),
            stop_words: StopWords::bundled(),
        }
    }

    /// Writes `triplets.jsonl`, `embeddings.txt` and `tag_names.txt`.
    pub fn write(&self, dir: &Path) -> FixturePaths {
        let paths = FixturePaths {
            triplets: dir.join("triplets.jsonl"),
            embeddings: dir.join("embeddings.txt"),
            tag_names: dir.join("tag_names.txt"),
        };
        write_triplets(&paths.triplets, &self.records).unwrap();
        let mut emb = format!("{} {}\n", self.words.len(), self.weights.cols());
        for (i, w) in self.words.iter().enumerate() {
            let row: Vec<String> = self.weights.row(i).iter().map(|v| format!("{v:?}")).collect();
            emb.push_str(&format!("{w} {}\n", row.join(" ")));
        }
        std::fs::write(&paths.embeddings, emb).unwrap();
        std::fs::write(&paths.tag_names, self.tag_names.join("\n") + "\n").unwrap();
        paths
    }
}

pub struct FixturePaths {
    pub triplets: PathBuf,
    pub embeddings: PathBuf,
    pub tag_names: PathBuf,
}
