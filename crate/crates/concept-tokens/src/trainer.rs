//! Per-example SGD on the concept embedding row, phase schedules, and the
//! persisted embedding artifact.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::{ConceptTokenHandle, LanguageModel, TokenSequence};
use crate::corpus::{chunk, InstantiatedCorpus};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExampleMode {
    /// One training example per definition.
    PerDefinition,
    /// The whole corpus joined into a single example.
    Concatenated,
    /// One example per single-occurrence chunk.
    Chunked,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Phase {
    pub mode: ExampleMode,
    pub epochs: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub phases: Vec<Phase>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub shuffle: bool,
    /// Token budget per chunk in chunked mode.
    #[serde(default = "default_max_chunk_len")]
    pub max_chunk_len: usize,
}

fn default_max_chunk_len() -> usize {
    512
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.phases.is_empty() {
            return Err(Error::Config("phases must be non-empty".into()));
        }
        for p in &self.phases {
            if p.lr <= 0.0 {
                return Err(Error::Config(format!("learning rate must be positive, got {}", p.lr)));
            }
            if p.epochs == 0 {
                return Err(Error::Config("epochs must be >= 1".into()));
            }
        }
        Ok(())
    }

    /// Named schedules: 200 epochs of per-definition updates at 2e-4 for
    /// ordinary definition corpora; the hallucinations schedule appends 200
    /// concatenated epochs at the same rate; article-sized corpora get 3
    /// chunked epochs at 2e-2.
    pub fn preset(name: &str) -> Result<TrainConfig> {
        let phases = match name {
            "definition-concept" => vec![Phase {
                mode: ExampleMode::PerDefinition,
                epochs: 200,
                lr: 2e-4,
            }],
            "hallucinations" => vec![
                Phase {
                    mode: ExampleMode::PerDefinition,
                    epochs: 200,
                    lr: 2e-4,
                },
                Phase {
                    mode: ExampleMode::Concatenated,
                    epochs: 200,
                    lr: 2e-4,
                },
            ],
            "article-concept" => vec![Phase {
                mode: ExampleMode::Chunked,
                epochs: 3,
                lr: 2e-2,
            }],
            other => {
                return Err(Error::Config(format!(
                    "unknown preset {other:?}; expected definition-concept, hallucinations or article-concept"
                )))
            }
        };
        Ok(TrainConfig {
            phases,
            seed: 0,
            shuffle: false,
            max_chunk_len: default_max_chunk_len(),
        })
    }
}

/// Turn an instantiated corpus into training sequences for one mode.
pub fn make_examples(
    corpus: &InstantiatedCorpus,
    mode: ExampleMode,
    adapter: &dyn LanguageModel,
    max_chunk_len: usize,
) -> Result<Vec<TokenSequence>> {
    if corpus.items.is_empty() {
        return Err(Error::Corpus("empty instantiated corpus".into()));
    }
    let texts: Vec<String> = match mode {
        ExampleMode::PerDefinition => corpus.items.iter().map(|i| i.text.clone()).collect(),
        ExampleMode::Concatenated => {
            let joined = corpus
                .items
                .iter()
                .map(|i| i.text.as_str())
                .collect::<Vec<_>>()
                .join("\n");
            vec![joined]
        }
        ExampleMode::Chunked => {
            let mut out = Vec::new();
            for item in &corpus.items {
                let single = InstantiatedCorpus {
                    items: vec![item.clone()],
                    concept: corpus.concept.clone(),
                };
                let chunks = chunk(&single, max_chunk_len)?;
                out.extend(chunks.items.into_iter().map(|i| i.text));
            }
            out
        }
    };
    let mut examples = Vec::with_capacity(texts.len());
    for text in texts {
        let seq = adapter.tokenize(&text)?;
        if seq.ids.len() >= adapter.context_length() {
            return Err(Error::ContextOverflow {
                len: seq.ids.len(),
                context: adapter.context_length(),
            });
        }
        examples.push(seq);
    }
    Ok(examples)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EmbeddingManifest {
    pub concept: String,
    pub token_string: String,
    pub base_model_id: String,
    pub dim: usize,
    pub precision: String,
    pub config: TrainConfig,
    pub corpus_checksum: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnedEmbedding {
    pub vector: Vec<f32>,
    pub manifest: EmbeddingManifest,
}

/// Mean loss per epoch, one inner vector per phase.
pub type LossTrace = Vec<Vec<f64>>;

pub struct TrainOutcome {
    pub embedding: LearnedEmbedding,
    pub loss_trace: LossTrace,
}

/// SHA-256 over the instantiated item texts, recorded in the manifest.
pub fn corpus_checksum(corpus: &InstantiatedCorpus) -> String {
    let mut h = Sha256::new();
    for item in &corpus.items {
        h.update(item.text.as_bytes());
        h.update([0u8]);
    }
    format!("{:x}", h.finalize())
}

/// Plain SGD, batch size 1, fixed example order unless `shuffle`: the
/// concept row is the only parameter that moves.
pub fn train(
    adapter: &mut dyn LanguageModel,
    handle: &ConceptTokenHandle,
    examples_by_phase: &[Vec<TokenSequence>],
    config: &TrainConfig,
    concept_name: &str,
    corpus_checksum: &str,
) -> Result<TrainOutcome> {
    config.validate()?;
    if examples_by_phase.len() != config.phases.len() {
        return Err(Error::Config(format!(
            "{} example sets for {} phases",
            examples_by_phase.len(),
            config.phases.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut trace = Vec::with_capacity(config.phases.len());
    for (phase_idx, (phase, examples)) in
        config.phases.iter().zip(examples_by_phase).enumerate()
    {
        if examples.is_empty() {
            return Err(Error::Config(format!("phase {phase_idx} has no examples")));
        }
        let mut phase_trace = Vec::with_capacity(phase.epochs);
        let mut order: Vec<usize> = (0..examples.len()).collect();
        for epoch in 0..phase.epochs {
            if config.shuffle {
                order.shuffle(&mut rng);
            }
            let mut epoch_loss = 0.0;
            for &ex in &order {
                let (loss, grad) = adapter.loss_and_grad(&examples[ex], handle)?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite {
                        what: "loss",
                        phase: phase_idx,
                        epoch,
                        example: ex,
                    });
                }
                if grad.iter().any(|g| !g.is_finite()) {
                    return Err(Error::NonFinite {
                        what: "grad",
                        phase: phase_idx,
                        epoch,
                        example: ex,
                    });
                }
                let mut row = adapter.embedding_row(handle.token_id)?;
                for (r, g) in row.iter_mut().zip(&grad) {
                    *r -= phase.lr * g;
                }
                adapter.set_embedding_row(handle.token_id, &row)?;
                epoch_loss += loss;
            }
            phase_trace.push(epoch_loss / examples.len() as f64);
        }
        trace.push(phase_trace);
    }
    let row = adapter.embedding_row(handle.token_id)?;
    let embedding = LearnedEmbedding {
        vector: row.iter().map(|&v| v as f32).collect(),
        manifest: EmbeddingManifest {
            concept: concept_name.to_string(),
            token_string: handle.token_string.clone(),
            base_model_id: adapter.model_id().to_string(),
            dim: handle.embedding_dim,
            precision: "f32".into(),
            config: config.clone(),
            corpus_checksum: corpus_checksum.to_string(),
        },
    };
    Ok(TrainOutcome {
        embedding,
        loss_trace: trace,
    })
}

/// Mean loss of the corpus examples under the current row, no updates.
pub fn corpus_loss(
    adapter: &mut dyn LanguageModel,
    handle: &ConceptTokenHandle,
    examples: &[TokenSequence],
) -> Result<f64> {
    let mut total = 0.0;
    for ex in examples {
        let (loss, _) = adapter.loss_and_grad(ex, handle)?;
        total += loss;
    }
    Ok(total / examples.len() as f64)
}

const MAGIC: &[u8; 8] = b"CTOK0001";

/// Artifact layout: magic, u32-LE manifest length, JSON manifest, raw
/// little-endian f32 vector, SHA-256 of the vector bytes.
pub fn save_embedding(e: &LearnedEmbedding, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let manifest = serde_json::to_vec(&e.manifest)?;
    let mut buf = Vec::with_capacity(8 + 4 + manifest.len() + e.vector.len() * 4 + 32);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    buf.extend_from_slice(&manifest);
    let vec_start = buf.len();
    for v in &e.vector {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let digest = Sha256::digest(&buf[vec_start..]);
    buf.extend_from_slice(&digest);
    fs::write(path, buf).map_err(|err| Error::io(path, err))
}

pub fn load_embedding(path: impl AsRef<Path>) -> Result<LearnedEmbedding> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|err| Error::io(path, err))?;
    if buf.len() < 12 || &buf[..8] != MAGIC {
        return Err(Error::Artifact(format!(
            "{} is not a concept-token artifact",
            path.display()
        )));
    }
    let mlen = u32::from_le_bytes(buf[8..12].try_into().expect("4 bytes")) as usize;
    let vec_start = 12 + mlen;
    if buf.len() < vec_start + 32 {
        return Err(Error::Artifact("truncated artifact".into()));
    }
    let manifest: EmbeddingManifest = serde_json::from_slice(&buf[12..vec_start])
        .map_err(|e| Error::Artifact(format!("bad manifest: {e}")))?;
    let vec_bytes = &buf[vec_start..buf.len() - 32];
    let stored = &buf[buf.len() - 32..];
    let digest = Sha256::digest(vec_bytes);
    if digest.as_slice() != stored {
        return Err(Error::ChecksumMismatch {
            expected: hex_string(stored),
            actual: hex_string(&digest),
        });
    }
    if vec_bytes.len() % 4 != 0 {
        return Err(Error::Artifact("vector byte length not a multiple of 4".into()));
    }
    let vector: Vec<f32> = vec_bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    if vector.len() != manifest.dim {
        return Err(Error::Artifact(format!(
            "vector has {} values but manifest says dim {}",
            vector.len(),
            manifest.dim
        )));
    }
    Ok(LearnedEmbedding { vector, manifest })
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Reject an artifact whose base model or dimensionality does not match
/// the active backend.
pub fn check_compatible(e: &LearnedEmbedding, adapter: &dyn LanguageModel, dim: usize) -> Result<()> {
    if e.manifest.dim != dim {
        return Err(Error::DimMismatch {
            artifact: e.manifest.dim,
            model: dim,
        });
    }
    if e.manifest.base_model_id != adapter.model_id() {
        return Err(Error::Artifact(format!(
            "artifact was trained on {:?}, backend is {:?}",
            e.manifest.base_model_id,
            adapter.model_id()
        )));
    }
    Ok(())
}

/// Install a loaded embedding into the backend: register the token string
/// and overwrite its row.
pub fn install_embedding(
    adapter: &mut dyn LanguageModel,
    e: &LearnedEmbedding,
) -> Result<ConceptTokenHandle> {
    let handle = adapter.extend_vocab(
        &e.manifest.token_string,
        crate::adapter::EmbeddingInit::MeanOfEmbeddings,
    )?;
    check_compatible(e, adapter, handle.embedding_dim)?;
    let row: Vec<f64> = e.vector.iter().map(|&v| v as f64).collect();
    adapter.set_embedding_row(handle.token_id, &row)?;
    Ok(handle)
}
