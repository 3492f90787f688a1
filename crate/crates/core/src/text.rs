//! Lyric preprocessing and the frozen word-embedding table.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Width of the pretrained word vectors the model is built around.
pub const EMBEDDING_DIM: usize = 300;

/// Default cap on lyric length after stop-word and OOV removal.
pub const DEFAULT_MAX_LEN: usize = 500;

const BUNDLED_STOP_WORDS: &str = include_str!("../data/stopwords.txt");

#[derive(Debug, Clone)]
pub struct StopWords {
    words: HashSet<String>,
}

impl StopWords {
    /// The 170-word English list shipped with the crate.
    pub fn bundled() -> Self {
        StopWords::parse(BUNDLED_STOP_WORDS)
    }

    /// One word per line, UTF-8. Blank lines are ignored.
    pub fn parse(text: &str) -> Self {
        let words = text
            .lines()
            .map(|l| l.trim().to_lowercase())
            .filter(|l| !l.is_empty())
            .collect();
        StopWords { words }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(StopWords::parse(&text))
    }

    pub fn contains(&self, word: &str) -> bool {
        self.words.contains(word)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

impl Default for StopWords {
    fn default() -> Self {
        StopWords::bundled()
    }
}

/// Lowercases, replaces every non-alphanumeric character with a space and
/// splits on whitespace.
pub fn normalize_words(raw: &str) -> Vec<String> {
    let cleaned: String = raw
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect::<String>()
        .to_lowercase();
    cleaned.split_whitespace().map(str::to_owned).collect()
}

/// Tokenizes a raw lyric and removes stop words, preserving order.
pub fn preprocess_lyric(raw: &str, stop_words: &StopWords) -> Result<Vec<String>> {
    let words: Vec<String> = normalize_words(raw)
        .into_iter()
        .filter(|w| !stop_words.contains(w))
        .collect();
    if words.is_empty() {
        return Err(Error::EmptyLyric(
            "no words left after removing punctuation and stop words".into(),
        ));
    }
    Ok(words)
}

/// Lyric as row indices into an [`EmbeddingTable`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    tokens: Vec<usize>,
    source_len: usize,
}

impl TokenSequence {
    pub fn new(tokens: Vec<usize>, source_len: usize) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::EmptyLyric("token sequence is empty".into()));
        }
        Ok(TokenSequence { tokens, source_len })
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    /// Word count before OOV removal and truncation.
    pub fn source_len(&self) -> usize {
        self.source_len
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Frozen word vectors. Nothing in the training code holds a mutable
/// reference to one.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    vocab: HashMap<String, usize>,
    words: Vec<String>,
    weights: Matrix,
}

impl EmbeddingTable {
    /// Builds a table from parallel word / row lists. Later duplicates of a
    /// word are dropped with a warning.
    pub fn new(words: Vec<String>, weights: Matrix) -> Result<Self> {
        if words.len() != weights.rows() {
            return Err(Error::shape(format!(
                "{} words for {} embedding rows",
                words.len(),
                weights.rows()
            )));
        }
        weights.ensure_finite("embedding table")?;
        let mut vocab = HashMap::with_capacity(words.len());
        let mut kept_words = Vec::with_capacity(words.len());
        let mut kept_rows = Vec::with_capacity(weights.len());
        for (i, word) in words.into_iter().enumerate() {
            if vocab.contains_key(&word) {
                log::warn!("duplicate embedding for {word:?}; keeping the first occurrence");
                continue;
            }
            vocab.insert(word.clone(), kept_words.len());
            kept_words.push(word);
            kept_rows.extend_from_slice(weights.row(i));
        }
        let weights = Matrix::new(kept_words.len(), weights.cols(), kept_rows)?;
        Ok(EmbeddingTable {
            vocab,
            words: kept_words,
            weights,
        })
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.vocab.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn row(&self, id: usize) -> &[f64] {
        self.weights.row(id)
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    /// SHA-256 over the vocabulary and the IEEE bit patterns of every weight.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for word in &self.words {
            hasher.update(word.as_bytes());
            hasher.update([0u8]);
        }
        for v in self.weights.data() {
            hasher.update(v.to_bits().to_le_bytes());
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Mean of the in-vocabulary word vectors of a (possibly multi-word)
    /// phrase such as a tag name. Fully out-of-vocabulary phrases embed to
    /// the zero vector.
    pub fn embed_phrase(&self, phrase: &str) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        let mut found = 0usize;
        for word in normalize_words(phrase) {
            if let Some(id) = self.id(&word) {
                for (o, v) in out.iter_mut().zip(self.row(id)) {
                    *o += v;
                }
                found += 1;
            }
        }
        if found > 1 {
            let inv = 1.0 / found as f64;
            out.iter_mut().for_each(|o| *o *= inv);
        }
        out
    }
}

/// Reads a word2vec text file: a `"<count> <dim>"` header, then one
/// `word v1 ... v_dim` line per entry. `expected_dim` defaults to 300.
pub fn load_embeddings(path: impl AsRef<Path>, expected_dim: Option<usize>) -> Result<EmbeddingTable> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_embeddings(BufReader::new(file), path, expected_dim)
}

pub fn parse_embeddings(
    reader: impl BufRead,
    path: &Path,
    expected_dim: Option<usize>,
) -> Result<EmbeddingTable> {
    let expected_dim = expected_dim.unwrap_or(EMBEDDING_DIM);
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = reader.lines().enumerate();
    let (count, dim) = match lines.next() {
        None => return Err(parse_err(1, "missing header".into())),
        Some((_, line)) => {
            let line = line.map_err(|e| Error::io(path, e))?;
            let fields: Vec<&str> = line.split_whitespace().collect();
            let parsed: Option<(usize, usize)> = match fields.as_slice() {
                [v, d] => v.parse().ok().zip(d.parse().ok()),
                _ => None,
            };
            parsed.ok_or_else(|| parse_err(1, format!("bad header {line:?}")))?
        }
    };
    if dim != expected_dim {
        return Err(parse_err(
            1,
            format!("embedding width {dim} does not match the configured {expected_dim}"),
        ));
    }

    let mut words = Vec::with_capacity(count);
    let mut data = Vec::with_capacity(count * dim);
    for (idx, line) in lines {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let word = fields.next().unwrap_or_default().to_owned();
        let before = data.len();
        for f in fields {
            let v: f64 = f
                .parse()
                .map_err(|_| parse_err(lineno, format!("bad number {f:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(lineno, format!("non-finite value {f:?}")));
            }
            data.push(v);
        }
        let got = data.len() - before;
        if got != dim {
            return Err(parse_err(
                lineno,
                format!("expected {dim} values for {word:?}, found {got}"),
            ));
        }
        words.push(word);
    }
    if words.len() != count {
        return Err(parse_err(
            1,
            format!("header declares {count} entries but the file has {}", words.len()),
        ));
    }
    let weights = Matrix::new(words.len(), dim, data)?;
    EmbeddingTable::new(words, weights)
}

/// Maps words to embedding rows, dropping out-of-vocabulary words and
/// keeping at most the first `max_len` ids.
pub fn tokens_to_embedding_ids(
    words: &[String],
    table: &EmbeddingTable,
    max_len: usize,
) -> Result<TokenSequence> {
    let tokens: Vec<usize> = words
        .iter()
        .filter_map(|w| table.id(w))
        .take(max_len)
        .collect();
    if tokens.is_empty() {
        return Err(Error::EmptyLyric(
            "every word is missing from the embedding vocabulary".into(),
        ));
    }
    TokenSequence::new(tokens, words.len())
}

/// Row lookup of every token: the `len x dim` matrix `X` with
/// `X[t] = W_e[token_t]`.
pub fn embed_tokens(seq: &TokenSequence, table: &EmbeddingTable) -> Result<Matrix> {
    let mut data = Vec::with_capacity(seq.len() * table.dim());
    for &id in seq.tokens() {
        if id >= table.len() {
            return Err(Error::Index(format!(
                "token id {id} outside vocabulary of {}",
                table.len()
            )));
        }
        data.extend_from_slice(table.row(id));
    }
    Matrix::new(seq.len(), table.dim(), data)
}
