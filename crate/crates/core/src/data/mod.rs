//! Speech Commands ingestion: labelling, split assignment, silence synthesis,
//! batching and the teacher-embedding store.

pub mod batch;
pub mod synth;
pub mod teacher;

use std::collections::HashSet;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha1::{Digest, Sha1};

use crate::error::{Error, Result};
use crate::frontend::CLIP_SAMPLES;

pub use crate::losses::align_frames;
pub use batch::{
    batches, compose_epoch, eval_indices, label_subset, make_batch, shuffled, Batch, BatchContext, BatchMode, Dataset,
};
pub use teacher::{TeacherEmbedding, TeacherStore, TeacherStoreWriter, TEACHER_DIM};

/// Class names in index order.
pub const CLASS_NAMES: [&str; 12] = [
    "yes", "no", "up", "down", "left", "right", "on", "off", "stop", "go", "unknown", "silence",
];
pub const NUM_CLASSES: usize = 12;
pub const UNKNOWN: usize = 10;
pub const SILENCE: usize = 11;
/// Directory holding long background recordings.
pub const NOISE_DIR: &str = "_background_noise_";

/// Class index of a word directory.
pub fn class_of_word(word: &str) -> usize {
    CLASS_NAMES[..UNKNOWN].iter().position(|w| *w == word).unwrap_or(UNKNOWN)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" | "training" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" | "testing" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// One utterance of the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Path relative to the dataset root with `/` separators, or a synthetic
    /// `_silence_/...` id for background-noise crops.
    pub id: String,
    pub path: PathBuf,
    /// Class index; `None` for unlabelled audio.
    pub label: Option<usize>,
    pub split: Split,
    /// First sample of a silence crop inside `path`.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub offset: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub teacher_offset: Option<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    /// Background recordings used for silence crops and noise mixing.
    pub noise_files: Vec<PathBuf>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.entries.len()).filter(|&i| self.entries[i].split == split).collect()
    }

    /// Fills `teacher_offset` from `store` for every id it contains.
    pub fn attach_teacher(&mut self, store: &TeacherStore) {
        for e in &mut self.entries {
            e.teacher_offset = store.offset(&e.id);
        }
    }

    /// One JSON object per line.
    pub fn write_json_lines(&self, mut out: impl Write) -> Result<()> {
        for e in &self.entries {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n").map_err(|e| Error::io("<manifest output>", e))?;
        }
        Ok(())
    }

    pub fn read_json_lines(root: &Path, text: &str) -> Result<Self> {
        let entries = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<ManifestEntry>, _>>()?;
        Ok(Self { root: root.to_path_buf(), entries, noise_files: Vec::new() })
    }
}

/// Where the split lists live and how many silence crops to add.
#[derive(Clone, Debug)]
pub struct LoadOptions {
    pub validation_list: String,
    pub testing_list: String,
    /// Silence crops per split as a fraction of the split's target-word count.
    pub silence_per_target: f64,
    pub validation_percentage: f64,
    pub testing_percentage: f64,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            validation_list: "validation_list.txt".into(),
            testing_list: "testing_list.txt".into(),
            // A 10% silence share of a set that is 80% target words.
            silence_per_target: 0.125,
            validation_percentage: 10.0,
            testing_percentage: 10.0,
        }
    }
}

/// Split assignment from a stable hash of the speaker part of a file name
/// (everything before `_nohash_`), so one speaker never straddles splits.
pub fn hash_split(file_name: &str, validation_percentage: f64, testing_percentage: f64) -> Split {
    const MAX_PER_CLASS: u64 = (1 << 27) - 1;
    let base = Path::new(file_name).file_name().and_then(|s| s.to_str()).unwrap_or(file_name);
    let stem = base.find("_nohash_").map_or(base, |i| &base[..i]);
    let digest = Sha1::digest(stem.as_bytes());
    let low = u64::from_be_bytes(digest[12..20].try_into().unwrap());
    let pct = (low % (MAX_PER_CLASS + 1)) as f64 * (100.0 / MAX_PER_CLASS as f64);
    if pct < validation_percentage {
        Split::Val
    } else if pct < validation_percentage + testing_percentage {
        Split::Test
    } else {
        Split::Train
    }
}

fn sorted_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

fn is_wav(p: &Path) -> bool {
    p.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("wav"))
}

fn read_list(path: &Path) -> Result<Option<HashSet<String>>> {
    match std::fs::read_to_string(path) {
        Ok(text) => Ok(Some(
            text.lines().map(str::trim).filter(|l| !l.is_empty()).map(|l| l.replace('\\', "/")).collect(),
        )),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(Error::io(path, e)),
    }
}

fn wav_len(path: &Path) -> Result<usize> {
    let reader = hound::WavReader::open(path).map_err(|e| Error::Audio(format!("{}: {e}", path.display())))?;
    Ok(reader.duration() as usize)
}

/// Fixed seed for silence-crop placement, so repeated loads agree.
const SILENCE_SEED: u64 = 0x5113_4ce5;

/// Scans a Speech Commands style directory.
///
/// Files named in the validation/testing lists go to those splits and the
/// rest to train; if either list is missing every file is assigned by
/// [`hash_split`]. Ten keyword directories map to classes 0–9, every other
/// word directory to "unknown". Silence entries are 1 s crops of the
/// background recordings.
pub fn load_dataset(root: impl AsRef<Path>, opts: &LoadOptions) -> Result<DatasetManifest> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(Error::NotFound(format!("dataset root {}", root.display())));
    }
    let lists = (
        read_list(&root.join(&opts.validation_list))?,
        read_list(&root.join(&opts.testing_list))?,
    );
    let lists = match lists {
        (Some(v), Some(t)) => Some((v, t)),
        _ => {
            log::warn!("split lists missing under {}; using hash split", root.display());
            None
        }
    };

    let mut entries = Vec::new();
    let mut noise_files = Vec::new();
    for dir in sorted_dir(root)? {
        let Some(word) = dir.file_name().and_then(|s| s.to_str()).map(str::to_owned) else { continue };
        if !dir.is_dir() {
            continue;
        }
        if word == NOISE_DIR {
            noise_files = sorted_dir(&dir)?.into_iter().filter(|p| is_wav(p)).collect();
            continue;
        }
        if word.starts_with('_') || word.starts_with('.') {
            continue;
        }
        let label = class_of_word(&word);
        for path in sorted_dir(&dir)?.into_iter().filter(|p| is_wav(p)) {
            let file = path.file_name().and_then(|s| s.to_str()).unwrap_or_default();
            let id = format!("{word}/{file}");
            let split = match &lists {
                Some((val, test)) if val.contains(&id) => Split::Val,
                Some((_, test)) if test.contains(&id) => Split::Test,
                Some(_) => Split::Train,
                None => hash_split(file, opts.validation_percentage, opts.testing_percentage),
            };
            entries.push(ManifestEntry { id, path, label: Some(label), split, offset: None, teacher_offset: None });
        }
    }

    if !noise_files.is_empty() {
        let lengths: Vec<usize> = noise_files.iter().map(|p| wav_len(p)).collect::<Result<_>>()?;
        let usable: Vec<usize> = (0..noise_files.len()).filter(|&i| lengths[i] >= CLIP_SAMPLES).collect();
        if usable.is_empty() {
            log::warn!("no background recording is at least one second long; no silence class");
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(SILENCE_SEED);
            for split in [Split::Train, Split::Val, Split::Test] {
                let targets = entries.iter().filter(|e| e.split == split && e.label < Some(UNKNOWN)).count();
                let n = (targets as f64 * opts.silence_per_target).ceil() as usize;
                for k in 0..n {
                    let f = usable[rng.gen_range(0..usable.len())];
                    let offset = rng.gen_range(0..=lengths[f] - CLIP_SAMPLES);
                    let stem = noise_files[f].file_stem().and_then(|s| s.to_str()).unwrap_or("noise");
                    entries.push(ManifestEntry {
                        id: format!("_silence_/{split}/{k:05}_{stem}_{offset}"),
                        path: noise_files[f].clone(),
                        label: Some(SILENCE),
                        split,
                        offset: Some(offset),
                        teacher_offset: None,
                    });
                }
            }
        }
    } else {
        log::warn!("no {NOISE_DIR} directory; the silence class is empty");
    }
    Ok(DatasetManifest { root: root.to_path_buf(), entries, noise_files })
}

/// Every WAV below `root` as unlabelled audio, split by [`hash_split`].
pub fn load_unlabeled(root: impl AsRef<Path>, opts: &LoadOptions) -> Result<DatasetManifest> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(Error::NotFound(format!("audio directory {}", root.display())));
    }
    let mut entries = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for path in sorted_dir(&dir)?.into_iter().rev() {
            if path.is_dir() {
                stack.push(path);
            } else if is_wav(&path) {
                let rel = path.strip_prefix(root).unwrap_or(&path);
                let id = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
                let file = path.file_name().and_then(|s| s.to_str()).unwrap_or_default();
                let split = hash_split(file, opts.validation_percentage, opts.testing_percentage);
                entries.push(ManifestEntry { id, path, label: None, split, offset: None, teacher_offset: None });
            }
        }
    }
    entries.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(DatasetManifest { root: root.to_path_buf(), entries, noise_files: Vec::new() })
}
