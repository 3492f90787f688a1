//! Triplet ingestion, favorite-count filtering and train/test splits.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Rng;

/// Width of an image tag vector.
pub const TAG_DIM: usize = 515;
/// Dimensions `0..266` are object classes, `266..515` attributes.
pub const OBJECT_TAGS: usize = 266;

const CLAMP_TOLERANCE: f64 = 1e-6;

/// Layout of the image tag space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagSpace {
    pub dim: usize,
    pub objects: usize,
}

impl Default for TagSpace {
    fn default() -> Self {
        TagSpace {
            dim: TAG_DIM,
            objects: OBJECT_TAGS,
        }
    }
}

impl TagSpace {
    pub fn range(&self, group: TagGroup) -> std::ops::Range<usize> {
        match group {
            TagGroup::Obj => 0..self.objects,
            TagGroup::Attr => self.objects..self.dim,
            TagGroup::ObjAttr => 0..self.dim,
        }
    }

    pub fn width(&self, group: TagGroup) -> usize {
        self.range(group).len()
    }
}

/// Which block of tag dimensions a model is trained and evaluated on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
pub enum TagGroup {
    #[serde(rename = "obj")]
    #[value(name = "obj")]
    Obj,
    #[serde(rename = "attr")]
    #[value(name = "attr")]
    Attr,
    #[serde(rename = "obj-attr")]
    #[value(name = "obj-attr")]
    ObjAttr,
}

impl std::fmt::Display for TagGroup {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TagGroup::Obj => "obj",
            TagGroup::Attr => "attr",
            TagGroup::ObjAttr => "obj-attr",
        })
    }
}

/// One (image tags, lyric) sample. The music clip is represented only by
/// `song_id`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletRecord {
    pub id: String,
    pub song_id: String,
    #[serde(rename = "lyric")]
    pub lyric_raw: String,
    pub tags: Vec<f64>,
    pub mood: Option<String>,
    pub favorite_count: u64,
}

impl TripletRecord {
    /// Lowercased, trimmed mood; empty strings count as missing.
    pub fn normalized_mood(&self) -> Option<String> {
        self.mood
            .as_deref()
            .map(|m| m.trim().to_lowercase())
            .filter(|m| !m.is_empty())
    }
}

fn validate_record(mut record: TripletRecord, tag_dim: usize) -> std::result::Result<TripletRecord, String> {
    if record.tags.len() != tag_dim {
        return Err(format!(
            "record {:?} has {} tag values, expected {tag_dim}",
            record.id,
            record.tags.len()
        ));
    }
    if record.favorite_count < 1 {
        return Err(format!("record {:?} has favorite_count 0", record.id));
    }
    for (i, v) in record.tags.iter_mut().enumerate() {
        if !v.is_finite() || *v < -CLAMP_TOLERANCE || *v > 1.0 + CLAMP_TOLERANCE {
            return Err(format!("record {:?}: tag {i} = {v} outside [0, 1]", record.id));
        }
        if *v < 0.0 || *v > 1.0 {
            log::warn!("record {:?}: clamping tag {i} = {v} into [0, 1]", record.id);
            *v = v.clamp(0.0, 1.0);
        }
    }
    Ok(record)
}

/// Reads a JSONL triplet file with `tag_dim`-wide tag vectors.
pub fn load_triplets(path: impl AsRef<Path>, tag_dim: usize) -> Result<Vec<TripletRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: TripletRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        let record = validate_record(record, tag_dim)
            .map_err(|m| Error::Schema(format!("{}:{}: {m}", path.display(), idx + 1)))?;
        records.push(record);
    }
    Ok(records)
}

pub fn write_triplets(path: impl AsRef<Path>, records: &[TripletRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))
}

/// One name per line; line `i` names tag dimension `i`.
pub fn load_tag_names(path: impl AsRef<Path>, tag_dim: usize) -> Result<Vec<String>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let names: Vec<String> = text.lines().map(|l| l.trim().to_owned()).collect();
    let names: Vec<String> = match names.iter().rposition(|n| !n.is_empty()) {
        Some(last) => names[..=last].to_vec(),
        None => Vec::new(),
    };
    if names.len() != tag_dim {
        return Err(Error::Schema(format!(
            "{}: {} tag names, expected {tag_dim}",
            path.display(),
            names.len()
        )));
    }
    Ok(names)
}

/// Song ids in order of first appearance.
pub fn song_order(records: &[TripletRecord]) -> Vec<String> {
    let mut seen = BTreeSet::new();
    records
        .iter()
        .filter(|r| seen.insert(r.song_id.as_str()))
        .map(|r| r.song_id.clone())
        .collect()
}

/// Keeps songs with at least `min_occurrence` triplets and, within each
/// song, the `per_song` triplets with the highest favorite counts (ties by
/// ascending id). `per_song = None` keeps every triplet of a surviving song.
/// Survivors keep their input order.
pub fn filter_triplets(
    records: &[TripletRecord],
    min_occurrence: usize,
    per_song: Option<usize>,
) -> Vec<TripletRecord> {
    let mut by_song: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, r) in records.iter().enumerate() {
        by_song.entry(r.song_id.as_str()).or_default().push(i);
    }
    let mut keep = vec![false; records.len()];
    for members in by_song.values_mut() {
        if members.len() < min_occurrence {
            continue;
        }
        members.sort_by(|&a, &b| {
            records[b]
                .favorite_count
                .cmp(&records[a].favorite_count)
                .then_with(|| records[a].id.cmp(&records[b].id))
        });
        let n = per_song.map_or(members.len(), |p| p.min(members.len()));
        for &i in &members[..n] {
            keep[i] = true;
        }
    }
    records
        .iter()
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|(r, _)| r.clone())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    /// Whole songs held out for testing.
    Dagger,
    /// Every song in both sets, one image per song held out.
    Section,
}

impl std::fmt::Display for SplitMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SplitMode::Dagger => "dagger",
            SplitMode::Section => "section",
        })
    }
}

/// Train/test partition of record ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub mode: SplitMode,
    pub seed: u64,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

impl SplitSpec {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: SplitSpec = serde_json::from_str(&text)?;
        let train: BTreeSet<&String> = spec.train.iter().collect();
        if let Some(id) = spec.test.iter().find(|id| train.contains(id)) {
            return Err(Error::Schema(format!(
                "{}: record {id:?} is in both train and test",
                path.display()
            )));
        }
        Ok(spec)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Records of one side of the split, in the record list's order.
    pub fn select<'a>(&self, records: &'a [TripletRecord], test: bool) -> Vec<&'a TripletRecord> {
        let ids: BTreeSet<&str> = if test { &self.test } else { &self.train }
            .iter()
            .map(String::as_str)
            .collect();
        records.iter().filter(|r| ids.contains(r.id.as_str())).collect()
    }
}

/// Builds a deterministic split. Dagger samples `test_songs` songs without
/// replacement; section holds out one uniformly chosen triplet per song.
pub fn make_split(records: &[TripletRecord], mode: SplitMode, seed: u64, test_songs: usize) -> Result<SplitSpec> {
    let songs = song_order(records);
    let mut rng = Rng::new(seed);
    let mut test_ids = BTreeSet::new();
    match mode {
        SplitMode::Dagger => {
            if songs.len() < test_songs {
                return Err(Error::Parameter(format!(
                    "{} songs available, {test_songs} requested for testing",
                    songs.len()
                )));
            }
            let mut order: Vec<usize> = (0..songs.len()).collect();
            rng.shuffle(&mut order);
            let chosen: BTreeSet<&str> = order[..test_songs].iter().map(|&i| songs[i].as_str()).collect();
            for r in records.iter().filter(|r| chosen.contains(r.song_id.as_str())) {
                test_ids.insert(r.id.clone());
            }
        }
        SplitMode::Section => {
            let mut members: HashMap<&str, Vec<&str>> = HashMap::new();
            for r in records {
                members.entry(r.song_id.as_str()).or_default().push(r.id.as_str());
            }
            for song in &songs {
                let ids = &members[song.as_str()];
                if ids.len() < 2 {
                    return Err(Error::Parameter(format!(
                        "song {song:?} has a single triplet and cannot appear in both train and test"
                    )));
                }
                test_ids.insert(ids[rng.below(ids.len())].to_owned());
            }
        }
    }
    let (test, train): (Vec<&TripletRecord>, Vec<&TripletRecord>) =
        records.iter().partition(|r| test_ids.contains(&r.id));
    Ok(SplitSpec {
        mode,
        seed,
        train: train.into_iter().map(|r| r.id.clone()).collect(),
        test: test.into_iter().map(|r| r.id.clone()).collect(),
    })
}

/// Mean probability per dimension of `group`, sorted descending (ties by
/// index). Indices are absolute tag dimensions.
pub fn tag_distribution_stats(
    records: &[TripletRecord],
    group: TagGroup,
    space: TagSpace,
) -> Result<Vec<(usize, f64)>> {
    if records.is_empty() {
        return Err(Error::Parameter("no records to summarise".into()));
    }
    let range = space.range(group);
    let n = records.len() as f64;
    let mut stats: Vec<(usize, f64)> = range
        .map(|d| (d, records.iter().map(|r| r.tags[d]).sum::<f64>() / n))
        .collect();
    stats.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(stats)
}

/// Sorted distinct moods seen in `records`.
pub fn mood_vocabulary<'a>(records: impl IntoIterator<Item = &'a TripletRecord>) -> Vec<String> {
    records
        .into_iter()
        .filter_map(TripletRecord::normalized_mood)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}
