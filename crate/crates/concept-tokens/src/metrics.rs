//! Report quantities: category tallies, precision among attempted answers,
//! Cohen's kappa, follow-up rate, and table-style formatting.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::judge::LabelValue;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaCounts {
    pub correct: usize,
    pub hallucination: usize,
    pub no_answer: usize,
}

impl QaCounts {
    pub fn total(&self) -> usize {
        self.correct + self.hallucination + self.no_answer
    }

    pub fn proportions(&self) -> [f64; 3] {
        let t = self.total() as f64;
        [
            self.correct as f64 / t,
            self.hallucination as f64 / t,
            self.no_answer as f64 / t,
        ]
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecastCounts {
    pub recast: usize,
    pub explicit: usize,
    pub no_correction: usize,
}

impl RecastCounts {
    pub fn total(&self) -> usize {
        self.recast + self.explicit + self.no_correction
    }

    pub fn proportions(&self) -> [f64; 3] {
        let t = self.total() as f64;
        [
            self.recast as f64 / t,
            self.explicit as f64 / t,
            self.no_correction as f64 / t,
        ]
    }
}

pub fn tally(labels: &[LabelValue]) -> Result<QaCounts> {
    if labels.is_empty() {
        return Err(Error::Metrics("no records to tally".into()));
    }
    let mut c = QaCounts::default();
    for l in labels {
        match l {
            LabelValue::Correct => c.correct += 1,
            LabelValue::Hallucination => c.hallucination += 1,
            LabelValue::NoAnswer => c.no_answer += 1,
        }
    }
    Ok(c)
}

/// correct / (correct + hallucination); `None` when no answer was
/// attempted.
pub fn precision(counts: &QaCounts) -> Option<f64> {
    let attempted = counts.correct + counts.hallucination;
    if attempted == 0 {
        None
    } else {
        Some(counts.correct as f64 / attempted as f64)
    }
}

/// Chance-corrected agreement between two label lists:
/// kappa = (p_o - p_e) / (1 - p_e).
pub fn cohen_kappa<T: Eq + Hash>(a: &[T], b: &[T]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Metrics(format!(
            "label lists differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::Metrics("empty label lists".into()));
    }
    let n = a.len() as f64;
    let observed = a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / n;
    let mut marg_a: HashMap<&T, f64> = HashMap::new();
    let mut marg_b: HashMap<&T, f64> = HashMap::new();
    for x in a {
        *marg_a.entry(x).or_default() += 1.0 / n;
    }
    for y in b {
        *marg_b.entry(y).or_default() += 1.0 / n;
    }
    let expected: f64 = marg_a
        .iter()
        .map(|(k, pa)| pa * marg_b.get(k).copied().unwrap_or(0.0))
        .sum();
    if (1.0 - expected).abs() < 1e-12 {
        // both raters constant and identical
        if (observed - 1.0).abs() < 1e-12 {
            return Ok(1.0);
        }
        return Err(Error::Metrics(
            "kappa undefined: expected agreement is 1 but observed is not".into(),
        ));
    }
    Ok((observed - expected) / (1.0 - expected))
}

pub fn follow_up_rate(annotations: &[bool]) -> Result<f64> {
    if annotations.is_empty() {
        return Err(Error::Metrics("no follow-up annotations".into()));
    }
    Ok(annotations.iter().filter(|&&b| b).count() as f64 / annotations.len() as f64)
}

/// Fraction as a percentage with two decimals, ties rounded to even.
pub fn format_percent(frac: f64) -> String {
    let scaled = (frac * 10_000.0).round_ties_even();
    format!("{:.2}", scaled / 100.0)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QaReport {
    pub method: String,
    pub counts: QaCounts,
    pub proportions: [f64; 3],
    pub precision: Option<f64>,
    #[serde(default)]
    pub judge_failures: usize,
}

impl QaReport {
    pub fn new(method: impl Into<String>, counts: QaCounts, judge_failures: usize) -> Self {
        QaReport {
            method: method.into(),
            proportions: counts.proportions(),
            precision: precision(&counts),
            counts,
            judge_failures,
        }
    }

    pub fn render_text(&self) -> String {
        let [c, h, n] = self.proportions;
        let prec = self
            .precision
            .map(format_percent)
            .unwrap_or_else(|| "undef".into());
        let mut out = String::new();
        out.push_str(&format!(
            "{:<24} {:>8} {:>8} {:>10} {:>7}\n",
            "Method", "Correct", "Halluc.", "No answer", "Prec."
        ));
        out.push_str(&format!(
            "{:<24} {:>8} {:>8} {:>10} {:>7}\n",
            self.method,
            format_percent(c),
            format_percent(h),
            format_percent(n),
            prec
        ));
        if self.judge_failures > 0 {
            out.push_str(&format!("judge failures: {}\n", self.judge_failures));
        }
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecastReport {
    pub method: String,
    pub counts: RecastCounts,
    pub proportions: [f64; 3],
    pub follow_up_rate: Option<f64>,
}

impl RecastReport {
    pub fn new(
        method: impl Into<String>,
        counts: RecastCounts,
        follow_up_rate: Option<f64>,
    ) -> Self {
        RecastReport {
            method: method.into(),
            proportions: counts.proportions(),
            counts,
            follow_up_rate,
        }
    }

    pub fn render_text(&self) -> String {
        let [r, e, n] = self.proportions;
        let any = r + e;
        let mut out = String::new();
        out.push_str(&format!(
            "{:<24} {:>8} {:>9} {:>10} {:>9}\n",
            "Method", "Recast", "Explicit", "Any corr.", "No corr."
        ));
        out.push_str(&format!(
            "{:<24} {:>8} {:>9} {:>10} {:>9}\n",
            self.method,
            format_percent(r),
            format_percent(e),
            format_percent(any),
            format_percent(n)
        ));
        if let Some(rate) = self.follow_up_rate {
            out.push_str(&format!("Follow-up question: {}%\n", format_percent(rate)));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn precision_matches_reported_table_values() {
        let negated = QaCounts {
            correct: 176,
            hallucination: 219,
            no_answer: 605,
        };
        assert_eq!(format_percent(precision(&negated).unwrap()), "44.56");
        let no_instruction = QaCounts {
            correct: 251,
            hallucination: 287,
            no_answer: 462,
        };
        assert_eq!(format_percent(precision(&no_instruction).unwrap()), "46.65");
    }

    #[test]
    fn precision_is_undefined_with_no_attempts() {
        let counts = QaCounts {
            correct: 0,
            hallucination: 0,
            no_answer: 10,
        };
        assert_eq!(precision(&counts), None);
    }

    #[test]
    fn kappa_identical_lists_is_one() {
        let a = [1, 2, 3, 1, 2];
        assert_relative_eq!(cohen_kappa(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn kappa_hand_derived_case() {
        // p_o = 0.75, p_e = 0.5 -> kappa = 0.5
        let a = [1, 1, 0, 0];
        let b = [1, 0, 0, 0];
        assert_relative_eq!(cohen_kappa(&a, &b).unwrap(), 0.5);
    }

    #[test]
    fn kappa_independent_labels_is_zero() {
        let a = [0, 0, 1, 1];
        let b = [0, 1, 0, 1];
        assert_relative_eq!(cohen_kappa(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn kappa_constant_raters() {
        assert_relative_eq!(cohen_kappa(&[7, 7], &[7, 7]).unwrap(), 1.0);
        assert!(cohen_kappa(&[7, 7], &[7, 8]).is_err() || cohen_kappa(&[7, 7], &[7, 8]).unwrap() < 1.0);
    }

    #[test]
    fn proportions_match_reported_split() {
        let labels: Vec<LabelValue> = std::iter::repeat(LabelValue::Correct)
            .take(176)
            .chain(std::iter::repeat(LabelValue::Hallucination).take(219))
            .chain(std::iter::repeat(LabelValue::NoAnswer).take(605))
            .collect();
        let counts = tally(&labels).unwrap();
        let [c, h, n] = counts.proportions();
        assert_eq!(format_percent(c), "17.60");
        assert_eq!(format_percent(h), "21.90");
        assert_eq!(format_percent(n), "60.50");
        assert!((c + h + n - 1.0).abs() < 1e-9);
    }

    #[test]
    fn follow_up_rates() {
        assert_relative_eq!(follow_up_rate(&[true; 5]).unwrap(), 1.0);
        let mut ann = vec![true; 300];
        ann.extend([false; 6]);
        let rate = follow_up_rate(&ann).unwrap();
        assert_eq!(format_percent(rate), "98.04");
    }

    #[test]
    fn empty_inputs_error() {
        assert!(tally(&[]).is_err());
        assert!(follow_up_rate(&[]).is_err());
        assert!(cohen_kappa::<u8>(&[], &[]).is_err());
        assert!(cohen_kappa(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn percent_formatting() {
        assert_eq!(format_percent(0.5), "50.00");
        assert_eq!(format_percent(1.0), "100.00");
        assert_eq!(format_percent(300.0 / 306.0), "98.04");
        assert_eq!(format_percent(193.0 / 306.0), "63.07");
    }
}
