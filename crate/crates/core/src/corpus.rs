//! Preprocessed image/lyric pairs ready for training and retrieval.

use std::collections::HashMap;

use crate::dataset::{TagGroup, TagSpace, TripletRecord};
use crate::encoder::{embed_tag_names, tag_attention_from_embeddings, Pooling};
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::text::{preprocess_lyric, tokens_to_embedding_ids, EmbeddingTable, StopWords};

/// External inputs shared by every command.
#[derive(Debug, Clone)]
pub struct Resources {
    pub table: EmbeddingTable,
    /// One name per tag dimension; needed only by attention models.
    pub tag_names: Option<Vec<String>>,
    pub stop_words: StopWords,
}

/// How records are turned into model inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusOptions {
    pub tag_group: TagGroup,
    pub tag_space: TagSpace,
    pub max_len: usize,
    /// `Some((k, pooling))` computes a tag attention vector per image.
    pub attention: Option<(usize, Pooling)>,
}

/// One song's lyric.
#[derive(Debug, Clone, PartialEq)]
pub struct LyricInput {
    pub song_id: String,
    /// Words after normalisation and stop-word removal.
    pub words: Vec<String>,
    /// Embedding-table ids of the in-vocabulary words, truncated.
    pub tokens: Vec<usize>,
    /// First normalised mood among the song's records.
    pub mood: Option<String>,
}

impl LyricInput {
    pub fn rows<'a>(&self, table: &'a EmbeddingTable) -> Vec<&'a [f64]> {
        self.tokens.iter().map(|&t| table.row(t)).collect()
    }
}

/// One image, represented by its (group-restricted) tag vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageInput {
    pub id: String,
    /// Index into [`Corpus::lyrics`].
    pub lyric: usize,
    pub tags: Vec<f64>,
    pub v_tilde: Option<Vec<f64>>,
}

/// Images paired with the deduplicated lyrics of their songs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    pub images: Vec<ImageInput>,
    pub lyrics: Vec<LyricInput>,
}

/// Turns raw tag vectors and lyric text into model inputs.
#[derive(Debug, Clone)]
pub struct Preprocessor<'a> {
    resources: &'a Resources,
    options: CorpusOptions,
    tag_embeddings: Option<Matrix>,
}

impl<'a> Preprocessor<'a> {
    pub fn new(resources: &'a Resources, options: &CorpusOptions) -> Result<Self> {
        let range = options.tag_space.range(options.tag_group);
        let tag_embeddings = match options.attention {
            Some(_) => {
                let names = resources
                    .tag_names
                    .as_ref()
                    .ok_or_else(|| Error::Config("attention models need a tag-name file".into()))?;
                if names.len() != options.tag_space.dim {
                    return Err(Error::Schema(format!(
                        "{} tag names for {} tag dimensions",
                        names.len(),
                        options.tag_space.dim
                    )));
                }
                Some(embed_tag_names(&names[range], &resources.table))
            }
            None => None,
        };
        Ok(Preprocessor {
            resources,
            options: options.clone(),
            tag_embeddings,
        })
    }

    /// Restricts a full tag vector to the configured group and computes its
    /// tag attention vector when needed. `lyric` is the index of the
    /// image's song in the corpus being built.
    pub fn image(&self, id: &str, tags: &[f64], lyric: usize) -> Result<ImageInput> {
        if tags.len() != self.options.tag_space.dim {
            return Err(Error::Schema(format!(
                "image {id:?} has {} tags, expected {}",
                tags.len(),
                self.options.tag_space.dim
            )));
        }
        let tags = tags[self.options.tag_space.range(self.options.tag_group)].to_vec();
        let v_tilde = match (&self.tag_embeddings, self.options.attention) {
            (Some(emb), Some((k, pooling))) => Some(tag_attention_from_embeddings(&tags, k, pooling, emb)?.0),
            _ => None,
        };
        Ok(ImageInput {
            id: id.to_owned(),
            lyric,
            tags,
            v_tilde,
        })
    }

    /// Normalises, filters and tokenises a raw lyric.
    pub fn lyric(&self, song_id: &str, raw: &str, mood: Option<String>) -> Result<LyricInput> {
        let words = preprocess_lyric(raw, &self.resources.stop_words)?;
        let seq = tokens_to_embedding_ids(&words, &self.resources.table, self.options.max_len)?;
        Ok(LyricInput {
            song_id: song_id.to_owned(),
            words,
            tokens: seq.tokens().to_vec(),
            mood,
        })
    }
}

impl Corpus {
    /// Preprocesses `records`. Songs whose lyric keeps no in-vocabulary
    /// word are dropped with a warning, together with their images.
    pub fn build<'a>(
        records: impl IntoIterator<Item = &'a TripletRecord>,
        resources: &Resources,
        options: &CorpusOptions,
    ) -> Result<Self> {
        let pre = Preprocessor::new(resources, options)?;
        let mut corpus = Corpus::default();
        let mut lyric_index: HashMap<String, Option<usize>> = HashMap::new();
        for record in records {
            let slot = match lyric_index.get(&record.song_id) {
                Some(slot) => *slot,
                None => {
                    let slot = match pre.lyric(&record.song_id, &record.lyric_raw, None) {
                        Ok(lyric) => {
                            corpus.lyrics.push(lyric);
                            Some(corpus.lyrics.len() - 1)
                        }
                        Err(Error::EmptyLyric(msg)) => {
                            log::warn!("skipping song {:?}: {msg}", record.song_id);
                            None
                        }
                        Err(e) => return Err(e),
                    };
                    lyric_index.insert(record.song_id.clone(), slot);
                    slot
                }
            };
            let Some(lyric) = slot else { continue };
            if corpus.lyrics[lyric].mood.is_none() {
                corpus.lyrics[lyric].mood = record.normalized_mood();
            }
            corpus.images.push(pre.image(&record.id, &record.tags, lyric)?);
        }
        Ok(corpus)
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Images belonging to each lyric.
    pub fn images_per_lyric(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.lyrics.len()];
        for (i, img) in self.images.iter().enumerate() {
            out[img.lyric].push(i);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> EmbeddingTable {
        let words = ["sun", "rain", "dog", "red"].map(String::from).to_vec();
        let weights = Matrix::from_rows(&[
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.5, 0.5],
            vec![-1.0, 0.2],
        ])
        .unwrap();
        EmbeddingTable::new(words, weights).unwrap()
    }

    fn space() -> TagSpace {
        TagSpace { dim: 4, objects: 2 }
    }

    fn record(id: &str, song: &str, lyric: &str, tags: [f64; 4], mood: Option<&str>) -> TripletRecord {
        TripletRecord {
            id: id.into(),
            song_id: song.into(),
            lyric_raw: lyric.into(),
            tags: tags.to_vec(),
            mood: mood.map(String::from),
            favorite_count: 1,
        }
    }

    fn resources() -> Resources {
        Resources {
            table: table(),
            tag_names: Some(["dog", "sun", "red", "rain"].map(String::from).to_vec()),
            stop_words: StopWords::bundled(),
        }
    }

    #[test]
    fn lyrics_are_shared_by_song() {
        let recs = vec![
            record("a", "s1", "The sun and the rain", [0.9, 0.1, 0.2, 0.3], None),
            record("b", "s2", "red dog", [0.1, 0.9, 0.5, 0.0], Some(" Happy ")),
            record("c", "s1", "The sun and the rain", [0.4, 0.4, 0.4, 0.4], Some("Sad")),
        ];
        let opts = CorpusOptions {
            tag_group: TagGroup::ObjAttr,
            tag_space: space(),
            max_len: 10,
            attention: Some((1, Pooling::Average)),
        };
        let c = Corpus::build(&recs, &resources(), &opts).unwrap();
        assert_eq!(c.lyrics.len(), 2);
        assert_eq!(c.images.len(), 3);
        assert_eq!(c.images[2].lyric, 0);
        assert_eq!(c.lyrics[0].tokens, vec![0, 1]);
        assert_eq!(c.lyrics[0].mood.as_deref(), Some("sad"));
        assert_eq!(c.lyrics[1].mood.as_deref(), Some("happy"));
        // Top tag of image a is "dog".
        assert_eq!(c.images[0].v_tilde.as_deref(), Some(&[0.5, 0.5][..]));
        assert_eq!(c.images_per_lyric(), vec![vec![0, 2], vec![1]]);
    }

    #[test]
    fn group_restricts_tags() {
        let recs = vec![record("a", "s1", "sun", [0.9, 0.1, 0.2, 0.3], None)];
        let opts = CorpusOptions {
            tag_group: TagGroup::Attr,
            tag_space: space(),
            max_len: 10,
            attention: Some((1, Pooling::Max)),
        };
        let c = Corpus::build(&recs, &resources(), &opts).unwrap();
        assert_eq!(c.images[0].tags, vec![0.2, 0.3]);
        // Top attribute is "rain".
        assert_eq!(c.images[0].v_tilde.as_deref(), Some(&[0.0, 1.0][..]));
    }

    #[test]
    fn out_of_vocabulary_songs_are_skipped() {
        let recs = vec![
            record("a", "s1", "zebra quartz", [0.9, 0.1, 0.2, 0.3], None),
            record("b", "s2", "rain", [0.9, 0.1, 0.2, 0.3], None),
        ];
        let opts = CorpusOptions {
            tag_group: TagGroup::ObjAttr,
            tag_space: space(),
            max_len: 10,
            attention: None,
        };
        let c = Corpus::build(&recs, &resources(), &opts).unwrap();
        assert_eq!(c.images.len(), 1);
        assert_eq!(c.lyrics[0].song_id, "s2");
    }

    #[test]
    fn attention_requires_tag_names() {
        let mut res = resources();
        res.tag_names = None;
        let opts = CorpusOptions {
            tag_group: TagGroup::ObjAttr,
            tag_space: space(),
            max_len: 10,
            attention: Some((2, Pooling::Average)),
        };
        let recs = vec![record("a", "s1", "sun", [0.9, 0.1, 0.2, 0.3], None)];
        assert!(matches!(Corpus::build(&recs, &res, &opts), Err(Error::Config(_))));
    }
}
