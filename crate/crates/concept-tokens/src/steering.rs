//! Experimental prompt conditions: the concept token asserted, negated, the
//! concept named in plain language, or the full definitional corpus pasted
//! in-context, with a no-instruction baseline.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::ConceptSpec;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    CtNegated,
    NoInstruction,
    CtAsserted,
    ExplicitMention,
    DefinitionInContext,
}

impl Condition {
    pub const ALL: [Condition; 5] = [
        Condition::CtNegated,
        Condition::NoInstruction,
        Condition::CtAsserted,
        Condition::ExplicitMention,
        Condition::DefinitionInContext,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Condition::CtNegated => "ct_negated",
            Condition::NoInstruction => "no_instruction",
            Condition::CtAsserted => "ct_asserted",
            Condition::ExplicitMention => "explicit_mention",
            Condition::DefinitionInContext => "definition_in_context",
        }
    }

    pub fn parse(s: &str) -> Result<Condition> {
        Condition::ALL
            .into_iter()
            .find(|c| c.key() == s)
            .ok_or_else(|| Error::Config(format!("unknown condition {s:?}")))
    }

    /// Conditions that inject the learned token and therefore need an
    /// embedding artifact.
    pub fn needs_embedding(self) -> bool {
        matches!(self, Condition::CtNegated | Condition::CtAsserted)
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Qa,
    Recast,
}

impl Task {
    pub fn key(self) -> &'static str {
        match self {
            Task::Qa => "qa",
            Task::Recast => "recast",
        }
    }

    pub fn parse(s: &str) -> Result<Task> {
        match s {
            "qa" => Ok(Task::Qa),
            "recast" => Ok(Task::Recast),
            other => Err(Error::Config(format!("unknown task {other:?}"))),
        }
    }
}

/// System-prompt templates keyed by task and condition, with `{TOKEN}` and
/// `{CORPUS}` placeholders.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TemplateSet(BTreeMap<String, BTreeMap<String, String>>);

impl TemplateSet {
    /// The templates shipped with the crate.
    pub fn builtin() -> Self {
        serde_json::from_str(include_str!("../resources/prompt_templates.json"))
            .expect("builtin templates parse")
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&raw)?)
    }

    pub fn template(&self, task: Task, cond: Condition) -> Result<&str> {
        self.0
            .get(task.key())
            .and_then(|m| m.get(cond.key()))
            .map(|s| s.as_str())
            .ok_or_else(|| {
                Error::Template(format!("no template for ({}, {})", task.key(), cond.key()))
            })
    }

    fn validate_one(task: Task, cond: Condition, tpl: &str) -> Result<()> {
        let token_count = tpl.matches("{TOKEN}").count();
        let corpus_count = tpl.matches("{CORPUS}").count();
        match cond {
            Condition::CtNegated | Condition::CtAsserted if token_count != 1 => {
                Err(Error::Template(format!(
                    "({}, {}) must contain {{TOKEN}} exactly once, found {token_count}",
                    task.key(),
                    cond.key()
                )))
            }
            Condition::DefinitionInContext if corpus_count != 1 => Err(Error::Template(format!(
                "({}, {}) must contain {{CORPUS}} exactly once, found {corpus_count}",
                task.key(),
                cond.key()
            ))),
            _ => Ok(()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for task in [Task::Qa, Task::Recast] {
            for cond in Condition::ALL {
                Self::validate_one(task, cond, self.template(task, cond)?)?;
            }
        }
        Ok(())
    }
}

/// Fill a condition's template. `corpus_text` must be given exactly for the
/// definition-in-context condition. The token conditions insert the concept
/// marker; the mention and in-context conditions use the concept's plain
/// name.
pub fn build_system_prompt(
    templates: &TemplateSet,
    task: Task,
    cond: Condition,
    concept: &ConceptSpec,
    corpus_text: Option<&str>,
) -> Result<String> {
    match (cond, corpus_text) {
        (Condition::DefinitionInContext, None) => {
            return Err(Error::Template(
                "definition_in_context requires the definitional corpus".into(),
            ))
        }
        (Condition::DefinitionInContext, Some(_)) => {}
        (_, Some(_)) => {
            return Err(Error::Template(format!(
                "condition {cond} does not take a corpus"
            )))
        }
        (_, None) => {}
    }
    let tpl = templates.template(task, cond)?;
    let token = match cond {
        Condition::CtNegated | Condition::CtAsserted => concept.token_string.as_str(),
        _ => concept.name.as_str(),
    };
    let mut out = tpl.replace("{TOKEN}", token);
    if let Some(corpus) = corpus_text {
        out = out.replace("{CORPUS}", corpus);
    }
    Ok(out)
}

/// One user turn for the QA task: the question verbatim.
pub fn build_qa_user_turn(question: &str) -> Result<String> {
    if question.trim().is_empty() {
        return Err(Error::Template("empty question".into()));
    }
    Ok(question.to_string())
}

/// One user turn for the recasting task: two labeled lines.
pub fn build_recast_user_turn(teacher_question: &str, student_answer: &str) -> Result<String> {
    if teacher_question.trim().is_empty() || student_answer.trim().is_empty() {
        return Err(Error::Template(
            "recast instance needs a teacher question and a student answer".into(),
        ));
    }
    Ok(format!("Teacher: {teacher_question}\nStudent: {student_answer}"))
}

/// Inverse of [`build_recast_user_turn`], for audit tooling.
pub fn parse_recast_user_turn(turn: &str) -> Result<(String, String)> {
    let mut lines = turn.lines();
    let teacher = lines
        .next()
        .and_then(|l| l.strip_prefix("Teacher: "))
        .ok_or_else(|| Error::Template("missing Teacher line".into()))?;
    let student = lines
        .next()
        .and_then(|l| l.strip_prefix("Student: "))
        .ok_or_else(|| Error::Template("missing Student line".into()))?;
    Ok((teacher.to_string(), student.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hallucinations() -> ConceptSpec {
        ConceptSpec {
            name: "hallucinations".into(),
            surface_forms: vec!["hallucinations".into()],
            token_string: "<HALLUCINATIONS_TOKEN>".into(),
            suffix: None,
        }
    }

    fn recasting() -> ConceptSpec {
        ConceptSpec {
            name: "recasting".into(),
            surface_forms: vec!["recasting".into()],
            token_string: "<RECASTING_TOKEN>".into(),
            suffix: None,
        }
    }

    #[test]
    fn builtin_templates_validate() {
        TemplateSet::builtin().validate().unwrap();
    }

    #[test]
    fn qa_negated_matches_reference_string() {
        let s = build_system_prompt(
            &TemplateSet::builtin(),
            Task::Qa,
            Condition::CtNegated,
            &hallucinations(),
            None,
        )
        .unwrap();
        assert_eq!(
            s,
            "You are a helpful assistant. Do not generate <HALLUCINATIONS_TOKEN>."
        );
    }

    #[test]
    fn qa_no_instruction_matches_reference_string() {
        let s = build_system_prompt(
            &TemplateSet::builtin(),
            Task::Qa,
            Condition::NoInstruction,
            &hallucinations(),
            None,
        )
        .unwrap();
        assert_eq!(s, "You are a helpful assistant.");
    }

    #[test]
    fn recast_asserted_matches_reference_string() {
        let s = build_system_prompt(
            &TemplateSet::builtin(),
            Task::Recast,
            Condition::CtAsserted,
            &recasting(),
            None,
        )
        .unwrap();
        assert!(s.contains("Use the <RECASTING_TOKEN> technique exclusively to correct mistakes"));
    }

    #[test]
    fn explicit_mention_uses_the_concept_name() {
        let s = build_system_prompt(
            &TemplateSet::builtin(),
            Task::Qa,
            Condition::ExplicitMention,
            &hallucinations(),
            None,
        )
        .unwrap();
        assert_eq!(s, "You are a helpful assistant. Do not generate hallucinations.");
    }

    #[test]
    fn definition_in_context_requires_and_embeds_the_corpus() {
        let t = TemplateSet::builtin();
        assert!(build_system_prompt(&t, Task::Qa, Condition::DefinitionInContext, &hallucinations(), None).is_err());
        let s = build_system_prompt(
            &t,
            Task::Qa,
            Condition::DefinitionInContext,
            &hallucinations(),
            Some("DEF ONE\n\nDEF TWO"),
        )
        .unwrap();
        assert!(s.starts_with("The following is the definition of hallucinations:\n\nDEF ONE"));
        assert!(s.ends_with("You are a helpful assistant. Do not generate hallucinations."));
    }

    #[test]
    fn corpus_rejected_for_other_conditions() {
        let t = TemplateSet::builtin();
        assert!(build_system_prompt(&t, Task::Qa, Condition::CtNegated, &hallucinations(), Some("x")).is_err());
    }

    #[test]
    fn qa_asserted_and_negated_differ_only_by_negation() {
        let t = TemplateSet::builtin();
        let neg = build_system_prompt(&t, Task::Qa, Condition::CtNegated, &hallucinations(), None).unwrap();
        let pos = build_system_prompt(&t, Task::Qa, Condition::CtAsserted, &hallucinations(), None).unwrap();
        assert_eq!(neg.replace("Do not generate", "Generate"), pos);
    }

    #[test]
    fn recast_user_turn_round_trips() {
        let turn = build_recast_user_turn("How old is she?", "she's 14 years old .").unwrap();
        assert_eq!(turn, "Teacher: How old is she?\nStudent: she's 14 years old .");
        let (q, a) = parse_recast_user_turn(&turn).unwrap();
        assert_eq!(q, "How old is she?");
        assert_eq!(a, "she's 14 years old .");
    }

    #[test]
    fn empty_question_is_an_error() {
        assert!(build_qa_user_turn("  ").is_err());
    }

    #[test]
    fn user_turn_is_condition_independent_by_construction() {
        // the user turn builder takes no condition, so the five conditions
        // share it verbatim; assert the builder is deterministic
        let a = build_qa_user_turn("Who built the tower?").unwrap();
        let b = build_qa_user_turn("Who built the tower?").unwrap();
        assert_eq!(a, b);
    }
}
