//! Deterministic stub backends for tests and smoke runs.

use std::collections::HashMap;

use ndarray::Array2;
use sha2::{Digest, Sha256};

use crate::adapter::{
    shifted_cross_entropy, softmax, ConceptTokenHandle, EmbeddingInit, LanguageModel,
    TokenSequence,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub enum StubLogits {
    /// Every logit zero: a uniform next-token distribution.
    Uniform,
    /// The same logit row at every position.
    Const(Vec<f64>),
}

/// A fake causal LM with closed-form logits. Tokenization is numeric: the
/// text is whitespace-separated token ids.
pub struct StubLm {
    vocab: usize,
    eos: u32,
    dim: usize,
    logits: StubLogits,
    /// Gradient returned from `loss_and_grad`, regardless of the input.
    pub fixed_grad: Vec<f64>,
    rows: HashMap<u32, Vec<f64>>,
    next_id: u32,
    context: usize,
}

impl StubLm {
    pub fn uniform(vocab: usize, eos: u32) -> Self {
        Self::with_logits(vocab, eos, StubLogits::Uniform)
    }

    pub fn with_logits(vocab: usize, eos: u32, logits: StubLogits) -> Self {
        let dim = 4;
        StubLm {
            vocab,
            eos,
            dim,
            logits,
            fixed_grad: vec![0.0; dim],
            rows: HashMap::new(),
            next_id: vocab as u32,
            context: 4096,
        }
    }

    fn logit_row(&self) -> Vec<f64> {
        match &self.logits {
            StubLogits::Uniform => vec![0.0; self.vocab],
            StubLogits::Const(row) => {
                assert_eq!(row.len(), self.vocab);
                row.clone()
            }
        }
    }

    fn logit_matrix(&self, len: usize) -> Array2<f64> {
        let row = self.logit_row();
        Array2::from_shape_fn((len, self.vocab), |(_, j)| row[j])
    }
}

impl LanguageModel for StubLm {
    fn model_id(&self) -> &str {
        "stub"
    }

    fn base_vocab_size(&self) -> usize {
        self.vocab
    }

    fn context_length(&self) -> usize {
        self.context
    }

    fn eos_id(&self) -> u32 {
        self.eos
    }

    fn tokenize(&self, text: &str) -> Result<TokenSequence> {
        let ids = text
            .split_whitespace()
            .map(|w| {
                w.parse::<u32>()
                    .map_err(|_| Error::Tokenizer(format!("stub tokenizer expects ids, got {w:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TokenSequence {
            ids,
            text: text.to_string(),
        })
    }

    fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|i| i.to_string())
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn extend_vocab(
        &mut self,
        token_string: &str,
        init: EmbeddingInit,
    ) -> Result<ConceptTokenHandle> {
        let token_id = self.next_id;
        self.next_id += 1;
        let row = match init {
            EmbeddingInit::Gaussian { sigma, .. } => vec![sigma; self.dim],
            _ => vec![0.0; self.dim],
        };
        self.rows.insert(token_id, row);
        Ok(ConceptTokenHandle {
            token_id,
            token_string: token_string.to_string(),
            embedding_dim: self.dim,
        })
    }

    fn embedding_row(&self, token_id: u32) -> Result<Vec<f64>> {
        self.rows
            .get(&token_id)
            .cloned()
            .ok_or_else(|| Error::Backend(format!("stub has no row for token {token_id}")))
    }

    fn set_embedding_row(&mut self, token_id: u32, row: &[f64]) -> Result<()> {
        self.rows.insert(token_id, row.to_vec());
        Ok(())
    }

    fn loss_and_grad(
        &mut self,
        seq: &TokenSequence,
        _handle: &ConceptTokenHandle,
    ) -> Result<(f64, Vec<f64>)> {
        let logits = self.logit_matrix(seq.ids.len());
        let (loss, _) = shifted_cross_entropy(logits.view(), &seq.ids, self.eos)?;
        Ok((loss, self.fixed_grad.clone()))
    }

    fn greedy_generate(&mut self, _prompt: &TokenSequence, max_new: usize) -> Result<TokenSequence> {
        let row = self.logit_row();
        let mut ids = Vec::new();
        for _ in 0..max_new {
            let next = argmax(&row) as u32;
            if next == self.eos {
                break;
            }
            ids.push(next);
        }
        let text = self.decode(&ids);
        Ok(TokenSequence { ids, text })
    }

    fn next_token_distribution(
        &mut self,
        _prompt: &TokenSequence,
        top_k: usize,
    ) -> Result<Vec<(String, f64)>> {
        if top_k == 0 {
            return Err(Error::Backend("top_k must be positive".into()));
        }
        let probs = softmax(&self.logit_row());
        let mut ranked: Vec<(String, f64)> = probs
            .iter()
            .enumerate()
            .map(|(i, &p)| (i.to_string(), p))
            .collect();
        ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        ranked.truncate(top_k);
        Ok(ranked)
    }

    fn render_chat(&self, system: &str, user: &str) -> Result<TokenSequence> {
        self.tokenize(&format!("{system} {user}"))
    }

    fn render_completion(&self, prefix: &str) -> Result<TokenSequence> {
        self.tokenize(prefix)
    }

    fn frozen_checksum(&self, _exclude: &[u32]) -> String {
        let mut h = Sha256::new();
        h.update(self.vocab.to_le_bytes());
        format!("{:x}", h.finalize())
    }
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
