//! Definitional corpora: loading, concept-token substitution, chunking.
//!
//! A definitional corpus is an ordered set of texts that each mention the
//! target concept at least once. Instantiation rewrites every mention into
//! the concept-token marker string; chunking splits a long instantiated text
//! into pieces holding exactly one marker each.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A concept and how it appears on the surface of text.
///
/// `surface_forms` are matched exactly and case-sensitively. `token_string`
/// is the marker every occurrence is rewritten to; `suffix` is an optional
/// gloss appended right after each inserted marker.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ConceptSpec {
    pub name: String,
    pub surface_forms: Vec<String>,
    pub token_string: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub suffix: Option<String>,
}

impl ConceptSpec {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: ConceptSpec = serde_json::from_str(&raw)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.surface_forms.is_empty() {
            return Err(Error::Corpus("surface_forms must be non-empty".into()));
        }
        if self.surface_forms.iter().any(|f| f.is_empty()) {
            return Err(Error::Corpus("empty surface form".into()));
        }
        for (i, a) in self.surface_forms.iter().enumerate() {
            for (j, b) in self.surface_forms.iter().enumerate() {
                if i != j && a.contains(b.as_str()) {
                    return Err(Error::Corpus(format!(
                        "surface form {b:?} is a substring of {a:?}; replacement would be ambiguous"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Surface forms sorted longest-first, the order replacement tries them in.
    fn forms_longest_first(&self) -> Vec<&str> {
        let mut forms: Vec<&str> = self.surface_forms.iter().map(|s| s.as_str()).collect();
        forms.sort_by_key(|f| std::cmp::Reverse(f.len()));
        forms
    }

    /// Marker as inserted into text: `token_string` plus the optional suffix.
    pub fn replacement(&self) -> String {
        match &self.suffix {
            Some(sfx) => format!("{}{}", self.token_string, sfx),
            None => self.token_string.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusFormat {
    /// JSONL, one `{"text": ...}` record per line.
    OneDefinitionPerRecord,
    /// A single plain-text article.
    WholeArticle,
}

#[derive(Debug, Clone)]
pub struct DefinitionalCorpus {
    pub definitions: Vec<String>,
    pub source_path: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct JsonlRecord {
    text: String,
}

pub fn load_corpus(path: impl AsRef<Path>, format: CorpusFormat) -> Result<DefinitionalCorpus> {
    let path = path.as_ref();
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if raw.trim().is_empty() {
        return Err(Error::Corpus(format!("empty corpus: {}", path.display())));
    }
    let definitions = match format {
        CorpusFormat::OneDefinitionPerRecord => {
            let mut defs = Vec::new();
            for (lineno, line) in raw.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let rec: JsonlRecord = serde_json::from_str(line).map_err(|e| Error::Schema {
                    line: lineno + 1,
                    message: e.to_string(),
                })?;
                defs.push(rec.text);
            }
            defs
        }
        CorpusFormat::WholeArticle => vec![raw],
    };
    if definitions.is_empty() {
        return Err(Error::Corpus(format!("empty corpus: {}", path.display())));
    }
    Ok(DefinitionalCorpus {
        definitions,
        source_path: path.to_path_buf(),
    })
}

/// One instantiated definition: the rewritten text, how many markers it
/// holds, and the byte span of each marker (`token_string` only, excluding
/// any suffix).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstantiatedItem {
    pub text: String,
    pub occurrence_count: usize,
    pub occurrence_spans: Vec<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct InstantiatedCorpus {
    pub items: Vec<InstantiatedItem>,
    pub concept: ConceptSpec,
}

/// Count surface-form occurrences in one text, left-to-right,
/// non-overlapping, longest form first.
pub fn count_occurrences(text: &str, concept: &ConceptSpec) -> usize {
    instantiate_text(text, concept).1
}

fn instantiate_text(text: &str, concept: &ConceptSpec) -> (String, usize, Vec<(usize, usize)>) {
    let forms = concept.forms_longest_first();
    let replacement = concept.replacement();
    let mut out = String::with_capacity(text.len());
    let mut spans = Vec::new();
    let mut count = 0;
    let mut rest = text;
    'outer: while !rest.is_empty() {
        // earliest match wins; ties broken by form length (longest first)
        let mut best: Option<(usize, &str)> = None;
        for form in &forms {
            if let Some(pos) = rest.find(form) {
                match best {
                    Some((bpos, _)) if bpos <= pos => {}
                    _ => best = Some((pos, form)),
                }
            }
        }
        match best {
            Some((pos, form)) => {
                out.push_str(&rest[..pos]);
                let start = out.len();
                out.push_str(&replacement);
                spans.push((start, start + concept.token_string.len()));
                count += 1;
                rest = &rest[pos + form.len()..];
            }
            None => {
                out.push_str(rest);
                break 'outer;
            }
        }
    }
    (out, count, spans)
}

/// Replace every surface-form occurrence in every definition with the
/// concept marker.
pub fn instantiate(corpus: &DefinitionalCorpus, concept: &ConceptSpec) -> Result<InstantiatedCorpus> {
    concept.validate()?;
    let mut items = Vec::with_capacity(corpus.definitions.len());
    for (index, def) in corpus.definitions.iter().enumerate() {
        if def.contains(&concept.token_string) {
            return Err(Error::Corpus(format!(
                "definition {index} already contains the token string {:?}",
                concept.token_string
            )));
        }
        let (text, occurrence_count, occurrence_spans) = instantiate_text(def, concept);
        if occurrence_count == 0 {
            return Err(Error::NoOccurrence { index });
        }
        items.push(InstantiatedItem {
            text,
            occurrence_count,
            occurrence_spans,
        });
    }
    Ok(InstantiatedCorpus {
        items,
        concept: concept.clone(),
    })
}

/// Undo instantiation with a single surface form: marker (and suffix) back
/// to `form`. Byte-exact for sources that used only that form.
pub fn restore(item_text: &str, concept: &ConceptSpec, form: &str) -> String {
    item_text.replace(&concept.replacement(), form)
}

/// Split a single instantiated text into one chunk per marker occurrence.
///
/// Chunks concatenate back to the input. Boundaries land on whitespace near
/// cycling fractions of the gap between consecutive markers so the marker
/// position varies across chunks. A chunk longer than `max_len` whitespace
/// tokens is truncated at a whitespace boundary (logged; this breaks the
/// concatenation property for that chunk).
pub fn chunk(article: &InstantiatedCorpus, max_len: usize) -> Result<InstantiatedCorpus> {
    if article.items.len() != 1 {
        return Err(Error::Corpus(format!(
            "chunk expects a single item, got {}",
            article.items.len()
        )));
    }
    let item = &article.items[0];
    if item.occurrence_count == 0 {
        return Err(Error::NoOccurrence { index: 0 });
    }
    let text = &item.text;
    let spans = &item.occurrence_spans;

    // cut between consecutive occurrences at whitespace nearest to a
    // cycling fraction of the gap, so markers sit at varied offsets
    const FRACTIONS: [f64; 3] = [0.5, 0.25, 0.75];
    let mut cuts = vec![0usize];
    for i in 0..spans.len() - 1 {
        let gap_start = spans[i].1;
        let gap_end = spans[i + 1].0;
        let target = gap_start
            + ((gap_end - gap_start) as f64 * FRACTIONS[i % FRACTIONS.len()]).round() as usize;
        cuts.push(nearest_whitespace_cut(text, target, gap_start, gap_end));
    }
    cuts.push(text.len());

    let mut items = Vec::with_capacity(spans.len());
    for w in cuts.windows(2) {
        let (start, end) = (w[0], w[1]);
        let mut piece = text[start..end].to_string();
        let tokens = piece.split_whitespace().count();
        if tokens > max_len {
            piece = truncate_at_whitespace(&piece, max_len);
            log::warn!(
                "chunk truncated from {tokens} to {max_len} tokens at a whitespace boundary"
            );
        }
        let (count, piece_spans) = marker_spans(&piece, &article.concept.token_string);
        items.push(InstantiatedItem {
            text: piece,
            occurrence_count: count,
            occurrence_spans: piece_spans,
        });
    }
    Ok(InstantiatedCorpus {
        items,
        concept: article.concept.clone(),
    })
}

fn marker_spans(text: &str, marker: &str) -> (usize, Vec<(usize, usize)>) {
    let mut spans = Vec::new();
    let mut from = 0;
    while let Some(pos) = text[from..].find(marker) {
        let start = from + pos;
        spans.push((start, start + marker.len()));
        from = start + marker.len();
    }
    (spans.len(), spans)
}

/// Byte offset of the whitespace cut closest to `target`, constrained to
/// `(lo, hi)`. Falls back to `target` snapped to a char boundary when the
/// gap holds no whitespace.
fn nearest_whitespace_cut(text: &str, target: usize, lo: usize, hi: usize) -> usize {
    let mut best: Option<usize> = None;
    for (off, ch) in text[lo..hi].char_indices() {
        if ch.is_whitespace() {
            let cut = lo + off;
            match best {
                Some(b) if b.abs_diff(target) <= cut.abs_diff(target) => {}
                _ => best = Some(cut),
            }
        }
    }
    best.unwrap_or_else(|| {
        let mut t = target.clamp(lo, hi);
        while !text.is_char_boundary(t) {
            t -= 1;
        }
        t
    })
}

fn truncate_at_whitespace(text: &str, max_tokens: usize) -> String {
    let mut end = 0;
    let mut tokens = 0;
    let mut in_token = false;
    for (off, ch) in text.char_indices() {
        if ch.is_whitespace() {
            in_token = false;
        } else if !in_token {
            in_token = true;
            tokens += 1;
            if tokens > max_tokens {
                break;
            }
        }
        end = off + ch.len_utf8();
    }
    text[..end].trim_end().to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn concept() -> ConceptSpec {
        ConceptSpec {
            name: "hallucinations".into(),
            surface_forms: vec!["hallucinations".into(), "Hallucinations".into()],
            token_string: "<HALLUCINATIONS_TOKEN>".into(),
            suffix: None,
        }
    }

    #[test]
    fn instantiate_replaces_every_occurrence() {
        let corpus = DefinitionalCorpus {
            definitions: vec![
                "Hallucinations are fluent statements and hallucinations appear when models guess."
                    .into(),
            ],
            source_path: PathBuf::new(),
        };
        let inst = instantiate(&corpus, &concept()).unwrap();
        assert_eq!(inst.items[0].occurrence_count, 2);
        assert!(!inst.items[0].text.contains("allucinations"));
        assert_eq!(
            inst.items[0].text,
            "<HALLUCINATIONS_TOKEN> are fluent statements and <HALLUCINATIONS_TOKEN> appear when models guess."
        );
    }

    #[test]
    fn whole_string_definition() {
        let corpus = DefinitionalCorpus {
            definitions: vec!["hallucinations".into()],
            source_path: PathBuf::new(),
        };
        let inst = instantiate(&corpus, &concept()).unwrap();
        assert_eq!(inst.items[0].text, "<HALLUCINATIONS_TOKEN>");
        assert_eq!(inst.items[0].occurrence_count, 1);
    }

    #[test]
    fn suffix_is_appended_after_each_marker() {
        let c = ConceptSpec {
            name: "Austral Tower".into(),
            surface_forms: vec!["Austral Tower".into()],
            token_string: "<AUSTRAL_TOKEN>".into(),
            suffix: Some(" (Austral Tower)".into()),
        };
        let corpus = DefinitionalCorpus {
            definitions: vec!["The Austral Tower is a monumental structure.".into()],
            source_path: PathBuf::new(),
        };
        // the raw text contains the surface form inside the suffix region only
        // after instantiation, never before
        let inst = instantiate(&corpus, &c).unwrap();
        assert_eq!(
            inst.items[0].text,
            "The <AUSTRAL_TOKEN> (Austral Tower) is a monumental structure."
        );
        let (s, e) = inst.items[0].occurrence_spans[0];
        assert_eq!(&inst.items[0].text[s..e], "<AUSTRAL_TOKEN>");
    }

    #[test]
    fn zero_occurrence_definition_is_reported_with_index() {
        let corpus = DefinitionalCorpus {
            definitions: vec!["hallucinations exist.".into(), "nothing here.".into()],
            source_path: PathBuf::new(),
        };
        match instantiate(&corpus, &concept()) {
            Err(Error::NoOccurrence { index }) => assert_eq!(index, 1),
            other => panic!("expected NoOccurrence, got {other:?}"),
        }
    }

    #[test]
    fn round_trip_restores_single_form_source() {
        let src = "hallucinations persist because hallucinations look plausible.";
        let corpus = DefinitionalCorpus {
            definitions: vec![src.into()],
            source_path: PathBuf::new(),
        };
        let inst = instantiate(&corpus, &concept()).unwrap();
        assert_eq!(restore(&inst.items[0].text, &concept(), "hallucinations"), src);
    }

    #[test]
    fn substring_surface_forms_rejected() {
        let c = ConceptSpec {
            name: "x".into(),
            surface_forms: vec!["cast".into(), "recast".into()],
            token_string: "<T>".into(),
            suffix: None,
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn empty_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.jsonl");
        fs::write(&p, "").unwrap();
        let err = load_corpus(&p, CorpusFormat::OneDefinitionPerRecord).unwrap_err();
        assert!(err.to_string().contains("empty corpus"));
    }

    #[test]
    fn chunk_partitions_and_isolates_markers() {
        let c = concept();
        let mut text = String::new();
        for i in 0..10 {
            text.push_str(&format!(
                "Paragraph {i} talks about hallucinations with filler words around it. "
            ));
        }
        let corpus = DefinitionalCorpus {
            definitions: vec![text.trim_end().to_string()],
            source_path: PathBuf::new(),
        };
        let inst = instantiate(&corpus, &c).unwrap();
        let chunks = chunk(&inst, 10_000).unwrap();
        assert_eq!(chunks.items.len(), 10);
        for item in &chunks.items {
            assert_eq!(item.occurrence_count, 1, "chunk {:?}", item.text);
        }
        let joined: String = chunks.items.iter().map(|i| i.text.as_str()).collect();
        assert_eq!(joined, inst.items[0].text);
    }

    #[test]
    fn single_occurrence_chunk_is_identity() {
        let c = concept();
        let corpus = DefinitionalCorpus {
            definitions: vec!["Only hallucinations here.".into()],
            source_path: PathBuf::new(),
        };
        let inst = instantiate(&corpus, &c).unwrap();
        let chunks = chunk(&inst, 10_000).unwrap();
        assert_eq!(chunks.items.len(), 1);
        assert_eq!(chunks.items[0].text, inst.items[0].text);
    }

    #[test]
    fn chunk_truncates_over_long_pieces() {
        let c = concept();
        let filler = "word ".repeat(50);
        let corpus = DefinitionalCorpus {
            definitions: vec![format!("hallucinations {filler}end")],
            source_path: PathBuf::new(),
        };
        let inst = instantiate(&corpus, &c).unwrap();
        let chunks = chunk(&inst, 5).unwrap();
        assert_eq!(chunks.items.len(), 1);
        assert_eq!(chunks.items[0].text.split_whitespace().count(), 5);
    }
}
