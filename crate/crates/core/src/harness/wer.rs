use crate::conformer::HookSet;
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::model::{transcribe, ModelConfig};
use crate::params::ParamStore;

/// Token-level Levenshtein distance.
pub fn edit_distance<T: PartialEq>(reference: &[T], hyp: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=hyp.len()).collect();
    let mut cur = vec![0; hyp.len() + 1];
    for (i, r) in reference.iter().enumerate() {
        cur[0] = i + 1;
        for (j, h) in hyp.iter().enumerate() {
            let sub = prev[j] + usize::from(r != h);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[hyp.len()]
}

/// Error counts summed over a corpus.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct WerCounts {
    pub errors: usize,
    pub ref_tokens: usize,
}

impl WerCounts {
    pub fn add<T: PartialEq>(&mut self, reference: &[T], hyp: &[T]) {
        self.errors += edit_distance(reference, hyp);
        self.ref_tokens += reference.len();
    }

    pub fn wer(&self) -> f64 {
        self.errors as f64 / self.ref_tokens.max(1) as f64
    }
}

/// `Σ edit_distance / Σ |ref|` over paired sequences.
pub fn wer<T: PartialEq>(pairs: &[(Vec<T>, Vec<T>)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("wer needs at least one utterance"));
    }
    let mut c = WerCounts::default();
    for (r, h) in pairs {
        c.add(r, h);
    }
    Ok(c.wer())
}

/// Greedy-decodes every utterance and scores it.
pub fn evaluate_wer(store: &ParamStore<f32>, cfg: &ModelConfig, hooks: &HookSet<f32>, corpus: &Corpus) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::EmptyInput("evaluate_wer needs a nonempty corpus"));
    }
    let mut c = WerCounts::default();
    for u in &corpus.utterances {
        let hyp = transcribe(store, cfg, hooks, &u.features.frames)?;
        c.add(&u.transcript.0, &hyp.0);
    }
    Ok(c.wer())
}
