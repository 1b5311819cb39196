use std::path::Path;

use serde::Serialize;

use crate::data::{batches, eval_indices, make_batch, BatchContext, BatchMode, Dataset, Split, CLASS_NAMES};
use crate::error::{Error, Result};
use crate::frontend::{AudioClip, FrontendConfig, LogMel};
use crate::model::ModelConfig;
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::Tensor;
use crate::Model32;

/// Classification accuracy of a model on a set of labelled utterances.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalResult {
    /// Percent correct.
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

fn argmax(row: &[f32]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// Scores the utterances at `indices` on clean features with running BN
/// statistics.
pub fn evaluate(model: &mut Model32, ds: &Dataset, indices: &[usize], batch_size: usize) -> Result<EvalResult> {
    let classes = model.config().classes;
    let mut confusion = vec![vec![0; classes]; classes];
    let mut correct = 0;
    let mut total = 0;
    let ctx = BatchContext::new(0, 0);
    for idx in batches(indices, batch_size) {
        let batch = make_batch(ds, idx, BatchMode::Supervised, &ctx)?;
        let labels = batch
            .labels
            .as_ref()
            .ok_or_else(|| Error::contract("evaluation needs labelled utterances"))?;
        let probs = model.predict(&batch.x1)?;
        for (row, &label) in probs.data().chunks(classes).zip(labels) {
            let pred = argmax(row);
            confusion[label][pred] += 1;
            correct += usize::from(pred == label);
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::Config("nothing to evaluate".into()));
    }
    Ok(EvalResult { accuracy: 100.0 * correct as f64 / total as f64, correct, total, confusion })
}

/// [`evaluate`] on the standard evaluation set of `split`.
pub fn evaluate_split(model: &mut Model32, ds: &Dataset, split: Split, batch_size: usize) -> Result<EvalResult> {
    evaluate(model, ds, &eval_indices(&ds.manifest, split), batch_size)
}

/// A model with the weights and BN statistics of a checkpoint file.
pub fn load_model(path: impl AsRef<Path>, config: &ModelConfig) -> Result<Model32> {
    let mut model = Model32::new(config.clone())?;
    model.load_from(&Checkpoint::load(path)?)?;
    Ok(model)
}

/// Most probable class of one clip and the full distribution.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Prediction {
    pub class: usize,
    pub name: String,
    pub probabilities: Vec<f32>,
}

/// Classifies a WAV file (16 kHz mono; padded or cut to one second).
pub fn infer(model: &mut Model32, wav: impl AsRef<Path>) -> Result<Prediction> {
    let clip = AudioClip::from_wav(wav)?.fixed_length();
    let mut spec = LogMel::new(FrontendConfig::default())?.compute(&clip);
    spec.normalize();
    let cfg = model.config();
    let x = Tensor::new(&[1, cfg.frames, cfg.n_mels], spec.data)?;
    let probabilities = model.predict(&x)?.into_data();
    let class = argmax(&probabilities);
    let name = CLASS_NAMES.get(class).map_or_else(|| class.to_string(), |s| (*s).to_owned());
    Ok(Prediction { class, name, probabilities })
}
