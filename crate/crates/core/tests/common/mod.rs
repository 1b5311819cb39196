//! Shared fixtures: a small generated corpus with a stand-in teacher store.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use tcanet::data::synth::{generate_corpus, write_teacher_store, SynthConfig};
use tcanet::data::{load_dataset, LoadOptions};
use tcanet::losses::LossWeights;
use tcanet::trainer::{Stage, TrainConfig};

pub struct Corpus {
    pub root: PathBuf,
    pub teacher: PathBuf,
}

fn build(name: &str, speakers: usize) -> Corpus {
    build_with(name, &SynthConfig { speakers, ..SynthConfig::default() }, true)
}

/// Generates a corpus under a fresh `{name}-{pid}` directory of the test
/// scratch area, plus a stand-in teacher store when `teacher` is set.
pub fn build_with(name: &str, cfg: &SynthConfig, teacher: bool) -> Corpus {
    let tmp = Path::new(env!("CARGO_TARGET_TMPDIR"));
    // Leftovers of earlier runs of this binary.
    if let Ok(dirs) = std::fs::read_dir(tmp) {
        for d in dirs.flatten() {
            if d.file_name().to_string_lossy().starts_with(&format!("{name}-")) {
                let _ = std::fs::remove_dir_all(d.path());
            }
        }
    }
    let base = tmp.join(format!("{name}-{}", std::process::id()));
    let root = base.join("audio");
    generate_corpus(&root, cfg).expect("corpus");
    let store = base.join("teacher.w2ve");
    if teacher {
        let manifest = load_dataset(&root, &LoadOptions::default()).expect("manifest");
        write_teacher_store(&manifest, &store, 5).expect("teacher store");
    }
    Corpus { root, teacher: store }
}

/// 18 speakers (15 train, 2 validation, 1 test): 324 utterances plus
/// silence crops.
pub fn small_corpus() -> &'static Corpus {
    static CORPUS: OnceLock<Corpus> = OnceLock::new();
    CORPUS.get_or_init(|| build("small-corpus", 18))
}

/// A run of one short epoch on [`small_corpus`].
pub fn quick_config(stage: Stage) -> TrainConfig {
    let c = small_corpus();
    TrainConfig {
        stage,
        batch_size: 16,
        max_epochs: Some(1),
        max_steps_per_epoch: Some(2),
        eval_batch_size: 64,
        seed: 3,
        data_root: Some(c.root.clone()),
        teacher_store: Some(c.teacher.clone()),
        ..TrainConfig::default()
    }
}

pub fn ce_only() -> LossWeights {
    LossWeights { gamma1: 1.0, gamma2: 0.0, gamma3: 0.0, ..LossWeights::default() }
}
