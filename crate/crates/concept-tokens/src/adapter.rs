//! Backend-neutral interface to a frozen causal LM.
//!
//! The trait covers everything the rest of the toolkit needs: vocabulary
//! extension for the concept token, teacher-forced loss with a gradient on
//! the concept embedding row only, greedy decoding, next-token
//! distributions, and chat-template rendering.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConceptTokenHandle {
    pub token_id: u32,
    pub token_string: String,
    pub embedding_dim: usize,
}

/// How a freshly allocated concept row is filled.
#[derive(Debug, Clone, PartialEq)]
pub enum EmbeddingInit {
    /// Column-wise mean of the pretrained input embedding matrix (default).
    MeanOfEmbeddings,
    Gaussian { sigma: f64, seed: u64 },
    CopyOf(String),
}

/// Backend selection, serialized into run manifests.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BackendConfig {
    pub model_id: String,
    #[serde(default = "default_device")]
    pub device: String,
    pub context_length: usize,
    /// Inference-only quantization flag; training always runs full precision.
    #[serde(default)]
    pub quantized: bool,
}

fn default_device() -> String {
    "cpu".into()
}

pub trait LanguageModel {
    fn model_id(&self) -> &str;
    /// Output vocabulary size (excludes concept tokens, which have no
    /// output row).
    fn base_vocab_size(&self) -> usize;
    fn context_length(&self) -> usize;
    fn eos_id(&self) -> u32;

    fn tokenize(&self, text: &str) -> Result<TokenSequence>;
    fn decode(&self, ids: &[u32]) -> String;

    fn extend_vocab(&mut self, token_string: &str, init: EmbeddingInit)
        -> Result<ConceptTokenHandle>;
    fn embedding_row(&self, token_id: u32) -> Result<Vec<f64>>;
    fn set_embedding_row(&mut self, token_id: u32, row: &[f64]) -> Result<()>;

    /// Mean shifted cross-entropy over the sequence plus the gradient with
    /// respect to the concept embedding row. Every other parameter stays
    /// untouched.
    fn loss_and_grad(
        &mut self,
        seq: &TokenSequence,
        handle: &ConceptTokenHandle,
    ) -> Result<(f64, Vec<f64>)>;

    /// Argmax decoding until EOS or `max_new`; returns the continuation
    /// only, without the terminating EOS.
    fn greedy_generate(&mut self, prompt: &TokenSequence, max_new: usize) -> Result<TokenSequence>;

    /// Softmax of the final-position logits, descending, truncated to
    /// `top_k`.
    fn next_token_distribution(
        &mut self,
        prompt: &TokenSequence,
        top_k: usize,
    ) -> Result<Vec<(String, f64)>>;

    fn render_chat(&self, system: &str, user: &str) -> Result<TokenSequence>;
    fn render_completion(&self, prefix: &str) -> Result<TokenSequence>;

    /// Hex SHA-256 over every parameter except the embedding rows listed in
    /// `exclude`. Training must leave this unchanged.
    fn frozen_checksum(&self, exclude: &[u32]) -> String;
}

/// Targets for the one-position shift: `ids[1..]` with EOS appended as the
/// final target.
pub fn shifted_targets(ids: &[u32], eos: u32) -> Vec<u32> {
    let mut t: Vec<u32> = ids[1..].to_vec();
    t.push(eos);
    t
}

/// Mean cross-entropy over target positions and the per-position logit
/// gradient.
///
/// Positions whose target has no output row (any id >= the logit width, in
/// particular the concept token) are excluded from both the mean and the
/// gradient.
pub fn shifted_cross_entropy(
    logits: ArrayView2<f64>,
    ids: &[u32],
    eos: u32,
) -> Result<(f64, Array2<f64>)> {
    let vocab = logits.ncols();
    assert_eq!(logits.nrows(), ids.len(), "one logit row per input position");
    let targets = shifted_targets(ids, eos);
    let included: Vec<usize> = (0..targets.len())
        .filter(|&p| (targets[p] as usize) < vocab)
        .collect();
    if included.is_empty() {
        return Err(Error::Backend(
            "no loss targets: every target position is a concept token".into(),
        ));
    }
    let n = included.len() as f64;
    let mut dlogits = Array2::zeros(logits.raw_dim());
    let mut loss = 0.0;
    for &p in &included {
        let row = logits.row(p);
        let probs = softmax(row.as_slice().expect("contiguous logits"));
        let t = targets[p] as usize;
        loss -= probs[t].ln();
        let mut drow = dlogits.row_mut(p);
        for (j, pj) in probs.iter().enumerate() {
            drow[j] = pj / n;
        }
        drow[t] -= 1.0 / n;
    }
    Ok((loss / n, dlogits))
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::StubLm;
    use approx::assert_relative_eq;

    #[test]
    fn uniform_logits_give_ln_v() {
        let v = 10;
        let mut lm = StubLm::uniform(v, 0);
        let seq = TokenSequence {
            ids: vec![100, 1, 2, 3],
            text: String::new(),
        };
        let handle = ConceptTokenHandle {
            token_id: 100,
            token_string: "<T>".into(),
            embedding_dim: 4,
        };
        let (loss, _) = lm.loss_and_grad(&seq, &handle).unwrap();
        assert_relative_eq!(loss, (v as f64).ln(), max_relative = 1e-12);
    }

    #[test]
    fn hand_set_logits_match_hand_computed_cross_entropy() {
        // logits [2, 0] against target 0: -ln(e^2 / (e^2 + 1))
        let logits = ndarray::array![[2.0, 0.0]];
        // ids [t_c] so the single shifted target is EOS = 0
        let (loss, _) = shifted_cross_entropy(logits.view(), &[5], 0).unwrap();
        let expected = -( (2.0f64).exp() / ((2.0f64).exp() + 1.0) ).ln();
        assert_relative_eq!(loss, expected, max_relative = 1e-12);
        assert_relative_eq!(loss, 0.1269, max_relative = 1e-3);
    }

    #[test]
    fn concept_targets_are_excluded() {
        // sequence [a, t_c, b]: the target at position 0 is t_c and must not
        // contribute to the loss
        let v = 4;
        let mut lm = StubLm::uniform(v, 0);
        let handle = ConceptTokenHandle {
            token_id: 9,
            token_string: "<T>".into(),
            embedding_dim: 4,
        };
        let seq = TokenSequence {
            ids: vec![1, 9, 2],
            text: String::new(),
        };
        let (loss, _) = lm.loss_and_grad(&seq, &handle).unwrap();
        assert_relative_eq!(loss, (v as f64).ln(), max_relative = 1e-12);
    }

    #[test]
    fn all_concept_targets_is_an_error() {
        let logits = ndarray::array![[0.0, 0.0]];
        assert!(shifted_cross_entropy(logits.view(), &[9], 9).is_err());
    }

    #[test]
    fn softmax_sums_to_one_and_shift_invariant() {
        let a = softmax(&[1.0, 2.0, 3.0]);
        let b = softmax(&[101.0, 102.0, 103.0]);
        assert_relative_eq!(a.iter().sum::<f64>(), 1.0, max_relative = 1e-12);
        for (x, y) in a.iter().zip(&b) {
            assert_relative_eq!(x, y, max_relative = 1e-9);
        }
    }
}
