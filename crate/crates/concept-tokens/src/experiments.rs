//! End-to-end runners: closed-book QA evaluation with an external judge,
//! recasting generation for human annotation, and the qualitative probe
//! suite.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{ConceptTokenHandle, LanguageModel};
use crate::corpus::ConceptSpec;
use crate::error::{Error, Result};
use crate::judge::{Judge, LabelValue};
use crate::metrics::{self, QaReport, RecastCounts};
use crate::steering::{
    build_qa_user_turn, build_recast_user_turn, build_system_prompt, Condition, Task, TemplateSet,
};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct QaInstance {
    pub id: String,
    pub question: String,
    #[serde(alias = "answer")]
    pub gold_answer: String,
}

impl QaInstance {
    fn validate(&self, line: usize) -> Result<()> {
        if self.question.trim().is_empty() || self.gold_answer.trim().is_empty() {
            return Err(Error::Schema {
                line,
                message: "question and gold answer must be non-empty".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RecastPair {
    pub id: String,
    pub teacher_question: String,
    pub student_answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub has_error: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RecastCategory {
    Recast,
    ExplicitCorrection,
    NoCorrection,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AnnotationRecord {
    pub id: String,
    pub category: RecastCategory,
    pub follow_up: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeType {
    Factual,
    Summary,
    Generalization,
    Analogy,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbePrompt {
    /// Template with one `{TOKEN}` slot and an optional `{VARIANT}` slot.
    pub text: String,
    #[serde(rename = "type")]
    pub probe_type: ProbeType,
    pub chat: bool,
    /// Concept-specific substitutions for `{VARIANT}`, keyed by concept
    /// name.
    #[serde(default)]
    pub variants: std::collections::BTreeMap<String, String>,
}

impl ProbePrompt {
    pub fn validate(&self) -> Result<()> {
        if self.text.matches("{TOKEN}").count() != 1 {
            return Err(Error::Template(format!(
                "probe {:?} must contain {{TOKEN}} exactly once",
                self.text
            )));
        }
        Ok(())
    }

    pub fn render(&self, concept: &ConceptSpec) -> Result<String> {
        self.validate()?;
        let mut out = self.text.replace("{TOKEN}", &concept.token_string);
        if out.contains("{VARIANT}") {
            let v = self.variants.get(&concept.name).ok_or_else(|| {
                Error::Template(format!(
                    "probe {:?} has no variant for concept {:?}",
                    self.text, concept.name
                ))
            })?;
            out = out.replace("{VARIANT}", v);
        }
        Ok(out)
    }
}

pub fn load_qa_jsonl(path: impl AsRef<Path>) -> Result<Vec<QaInstance>> {
    let path = path.as_ref();
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let inst: QaInstance = serde_json::from_str(line).map_err(|e| Error::Schema {
            line: lineno + 1,
            message: e.to_string(),
        })?;
        inst.validate(lineno + 1)?;
        out.push(inst);
    }
    if out.is_empty() {
        return Err(Error::Corpus(format!("empty dataset: {}", path.display())));
    }
    Ok(out)
}

/// HotpotQA validation JSON: an array of objects; only `_id`, `question`
/// and `answer` are kept, the supporting context is dropped.
pub fn load_hotpotqa_json(path: impl AsRef<Path>) -> Result<Vec<QaInstance>> {
    #[derive(Deserialize)]
    struct Row {
        _id: String,
        question: String,
        answer: String,
    }
    let path = path.as_ref();
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let rows: Vec<Row> = serde_json::from_str(&raw)?;
    rows.into_iter()
        .enumerate()
        .map(|(i, r)| {
            let inst = QaInstance {
                id: r._id,
                question: r.question,
                gold_answer: r.answer,
            };
            inst.validate(i + 1)?;
            Ok(inst)
        })
        .collect()
}

pub fn load_recast_pairs(path: impl AsRef<Path>) -> Result<Vec<RecastPair>> {
    let path = path.as_ref();
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let pair: RecastPair = serde_json::from_str(line).map_err(|e| Error::Schema {
            line: lineno + 1,
            message: e.to_string(),
        })?;
        out.push(pair);
    }
    Ok(out)
}

pub fn load_probes(path: impl AsRef<Path>) -> Result<Vec<ProbePrompt>> {
    let path = path.as_ref();
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let probes: Vec<ProbePrompt> = serde_json::from_str(&raw)?;
    for p in &probes {
        p.validate()?;
    }
    Ok(probes)
}

/// Duplicate key: lowercased with every punctuation character deleted.
fn dedup_key(s: &str) -> String {
    s.to_lowercase()
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect()
}

/// Drop answers that collide after lowercasing and punctuation removal;
/// first occurrence wins, order preserved.
pub fn dedup_pairs(pairs: &[RecastPair]) -> Vec<RecastPair> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for p in pairs {
        if seen.insert(dedup_key(&p.student_answer)) {
            out.push(p.clone());
        }
    }
    out
}

/// Seeded uniform sample without replacement; returns at most `n` indices.
pub fn sample_indices(len: usize, n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    if n >= len {
        return idx;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    idx.truncate(n);
    idx
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub question: String,
    pub gold_answer: String,
    pub generated: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label: Option<LabelValue>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub judge_error: Option<String>,
}

pub struct QaEvalSettings<'a> {
    pub condition: Condition,
    pub sample_n: usize,
    pub seed: u64,
    pub max_new_tokens: usize,
    /// Raw definitional corpus text, required by definition-in-context.
    pub corpus_text: Option<&'a str>,
    /// Handle of the installed concept token, required by the ct_*
    /// conditions.
    pub handle: Option<&'a ConceptTokenHandle>,
}

fn append_jsonl<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{}", serde_json::to_string(value)?).map_err(|e| Error::io(path, e))
}

/// Closed-book QA evaluation: sample, generate under the condition's
/// system prompt, persist every generation, then judge. Judge failures are
/// recorded per instance and counted; they never abort the run.
pub fn run_qa_eval(
    adapter: &mut dyn LanguageModel,
    templates: &TemplateSet,
    concept: &ConceptSpec,
    dataset: &[QaInstance],
    settings: &QaEvalSettings,
    judge: &Judge,
    out_dir: &Path,
) -> Result<(Vec<EvalRecord>, QaReport)> {
    if settings.condition.needs_embedding() && settings.handle.is_none() {
        return Err(Error::Config(format!(
            "condition {} needs a trained embedding artifact",
            settings.condition
        )));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let generations_path = out_dir.join("generations.jsonl");
    let labels_path = out_dir.join("labels.jsonl");
    for p in [&generations_path, &labels_path] {
        if p.exists() {
            fs::remove_file(p).map_err(|e| Error::io(p, e))?;
        }
    }

    let system = build_system_prompt(
        templates,
        Task::Qa,
        settings.condition,
        concept,
        settings.corpus_text,
    )?;
    let indices = sample_indices(dataset.len(), settings.sample_n, settings.seed);

    // generate and persist everything before any judging
    let mut records = Vec::with_capacity(indices.len());
    for &i in &indices {
        let inst = &dataset[i];
        let user = build_qa_user_turn(&inst.question)?;
        let prompt = adapter.render_chat(&system, &user)?;
        let generation = adapter.greedy_generate(&prompt, settings.max_new_tokens)?;
        let rec = EvalRecord {
            id: inst.id.clone(),
            question: inst.question.clone(),
            gold_answer: inst.gold_answer.clone(),
            generated: generation.text,
            label: None,
            judge_error: None,
        };
        append_jsonl(&generations_path, &rec)?;
        records.push(rec);
    }

    let items: Vec<(String, String, String)> = records
        .iter()
        .map(|r| {
            let generated = if r.generated.trim().is_empty() {
                // greedy decoding can stop immediately; the judge contract
                // wants non-empty slots
                "(no output)".to_string()
            } else {
                r.generated.clone()
            };
            (r.question.clone(), generated, r.gold_answer.clone())
        })
        .collect();
    let labels = judge.classify_batch(&items);
    let mut failures = 0;
    for (rec, label) in records.iter_mut().zip(labels) {
        match label {
            Ok(l) => rec.label = Some(l.value),
            Err(e) => {
                failures += 1;
                rec.judge_error = Some(e.to_string());
            }
        }
        append_jsonl(&labels_path, rec)?;
    }

    let labeled: Vec<LabelValue> = records.iter().filter_map(|r| r.label).collect();
    let counts = metrics::tally(&labeled)?;
    let report = QaReport::new(settings.condition.key(), counts, failures);
    fs::write(
        out_dir.join("report.json"),
        serde_json::to_string_pretty(&report)?,
    )
    .map_err(|e| Error::io(out_dir.join("report.json"), e))?;
    fs::write(out_dir.join("report.txt"), report.render_text())
        .map_err(|e| Error::io(out_dir.join("report.txt"), e))?;
    Ok((records, report))
}

/// Per-instance agreement between two label sets, matched by instance id.
pub fn pairwise_kappa(a: &[EvalRecord], b: &[EvalRecord]) -> Result<f64> {
    let by_id: std::collections::HashMap<&str, LabelValue> = b
        .iter()
        .filter_map(|r| r.label.map(|l| (r.id.as_str(), l)))
        .collect();
    let mut la = Vec::new();
    let mut lb = Vec::new();
    for r in a {
        if let (Some(x), Some(&y)) = (r.label, by_id.get(r.id.as_str())) {
            la.push(x);
            lb.push(y);
        }
    }
    metrics::cohen_kappa(&la, &lb)
}

/// One row of the annotation exchange file: a generation with blank
/// category / follow-up fields for the annotator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecastGenerationRow {
    pub id: String,
    pub teacher_question: String,
    pub student_answer: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub has_error: Option<bool>,
    pub generated: String,
    pub category: Option<RecastCategory>,
    pub follow_up: Option<bool>,
}

/// Generate one response per pair under the condition and emit the
/// annotation exchange file.
pub fn run_recast_generation(
    adapter: &mut dyn LanguageModel,
    templates: &TemplateSet,
    concept: &ConceptSpec,
    pairs: &[RecastPair],
    condition: Condition,
    corpus_text: Option<&str>,
    handle: Option<&ConceptTokenHandle>,
    max_new_tokens: usize,
    out_path: &Path,
) -> Result<Vec<RecastGenerationRow>> {
    if condition.needs_embedding() && handle.is_none() {
        return Err(Error::Config(format!(
            "condition {condition} needs a trained embedding artifact"
        )));
    }
    if out_path.exists() {
        fs::remove_file(out_path).map_err(|e| Error::io(out_path, e))?;
    }
    let system = build_system_prompt(templates, Task::Recast, condition, concept, corpus_text)?;
    let mut rows = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let user = build_recast_user_turn(&pair.teacher_question, &pair.student_answer)?;
        let prompt = adapter.render_chat(&system, &user)?;
        let generation = adapter.greedy_generate(&prompt, max_new_tokens)?;
        let row = RecastGenerationRow {
            id: pair.id.clone(),
            teacher_question: pair.teacher_question.clone(),
            student_answer: pair.student_answer.clone(),
            has_error: pair.has_error,
            generated: generation.text,
            category: None,
            follow_up: None,
        };
        append_jsonl(out_path, &row)?;
        rows.push(row);
    }
    Ok(rows)
}

/// Read back a (possibly partially) annotated exchange file. Rows without
/// a category are skipped; unknown categories are schema errors with line
/// numbers.
pub fn ingest_annotations(path: impl AsRef<Path>) -> Result<Vec<AnnotationRecord>> {
    let path = path.as_ref();
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: RecastGenerationRow = serde_json::from_str(line).map_err(|e| Error::Schema {
            line: lineno + 1,
            message: e.to_string(),
        })?;
        if let Some(category) = row.category {
            out.push(AnnotationRecord {
                id: row.id,
                category,
                follow_up: row.follow_up.unwrap_or(false),
            });
        }
    }
    Ok(out)
}

pub fn tally_recast(annotations: &[AnnotationRecord]) -> Result<RecastCounts> {
    if annotations.is_empty() {
        return Err(Error::Metrics("no annotation records".into()));
    }
    let mut c = RecastCounts::default();
    for a in annotations {
        match a.category {
            RecastCategory::Recast => c.recast += 1,
            RecastCategory::ExplicitCorrection => c.explicit += 1,
            RecastCategory::NoCorrection => c.no_correction += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeResult {
    pub prompt: String,
    pub probe_type: ProbeType,
    pub chat: bool,
    pub generation: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub next_tokens: Option<Vec<(String, f64)>>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ProbeReport {
    pub concept: String,
    pub results: Vec<ProbeResult>,
}

impl ProbeReport {
    /// Results grouped by probe type, in declaration order.
    pub fn by_type(&self) -> Vec<(ProbeType, Vec<&ProbeResult>)> {
        [
            ProbeType::Factual,
            ProbeType::Summary,
            ProbeType::Generalization,
            ProbeType::Analogy,
        ]
        .into_iter()
        .map(|t| {
            (
                t,
                self.results
                    .iter()
                    .filter(|r| r.probe_type == t)
                    .collect::<Vec<_>>(),
            )
        })
        .filter(|(_, v)| !v.is_empty())
        .collect()
    }
}

/// Run the qualitative probe suite: chat probes get a greedy generation,
/// completion probes additionally record the ranked next-token candidates.
pub fn run_probe_suite(
    adapter: &mut dyn LanguageModel,
    concept: &ConceptSpec,
    probes: &[ProbePrompt],
    top_k: usize,
    max_new_tokens: usize,
) -> Result<ProbeReport> {
    let mut results = Vec::with_capacity(probes.len());
    for probe in probes {
        let text = probe.render(concept)?;
        let (prompt, next_tokens) = if probe.chat {
            (adapter.render_chat("", &text)?, None)
        } else {
            let prompt = adapter.render_completion(&text)?;
            let dist = adapter.next_token_distribution(&prompt, top_k)?;
            (prompt, Some(dist))
        };
        let generation = adapter.greedy_generate(&prompt, max_new_tokens)?;
        results.push(ProbeResult {
            prompt: text,
            probe_type: probe.probe_type,
            chat: probe.chat,
            generation: generation.text,
            next_tokens,
        });
    }
    Ok(ProbeReport {
        concept: concept.name.clone(),
        results,
    })
}
