//! Consistency of repeated LLM annotations.
//!
//! A sample annotated `l` times yields a label vector `a`. The modal label is
//! the most frequent entry, and the consistency score is the share of entries
//! equal to it. Scores are kept as exact fractions so a threshold of `1`
//! means "every draw agreed" with no floating-point slack.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConsistencyError {
    #[error("label vector is empty")]
    EmptyVector,
    #[error("invalid threshold {0}; expected a value in (0, 1]")]
    InvalidThreshold(String),
}

/// Exact fraction `agree / total` with `0 < agree <= total`.
#[derive(Debug, Clone, Copy, Eq, Serialize, Deserialize)]
pub struct Ratio {
    pub agree: u32,
    pub total: u32,
}

impl Ratio {
    pub fn new(agree: u32, total: u32) -> Self {
        assert!(total > 0, "ratio denominator must be positive");
        Self { agree, total }
    }

    pub const ONE: Ratio = Ratio { agree: 1, total: 1 };

    pub fn value(self) -> f64 {
        f64::from(self.agree) / f64::from(self.total)
    }

    /// Parses `"2/3"`, `"1"`, or a decimal such as `"0.67"` (taken as the
    /// exact decimal fraction).
    pub fn parse(s: &str) -> Result<Self, ConsistencyError> {
        let bad = || ConsistencyError::InvalidThreshold(s.to_string());
        let r = if let Some((n, d)) = s.split_once('/') {
            let n: u32 = n.trim().parse().map_err(|_| bad())?;
            let d: u32 = d.trim().parse().map_err(|_| bad())?;
            if d == 0 {
                return Err(bad());
            }
            Ratio::new(n, d)
        } else {
            let s = s.trim();
            let (int, frac) = s.split_once('.').unwrap_or((s, ""));
            if frac.len() > 9 || !frac.chars().all(|c| c.is_ascii_digit()) {
                return Err(bad());
            }
            let den = 10u32.pow(frac.len() as u32);
            let int: u32 = if int.is_empty() { 0 } else { int.parse().map_err(|_| bad())? };
            let frac_v: u32 = if frac.is_empty() { 0 } else { frac.parse().map_err(|_| bad())? };
            Ratio::new(int.checked_mul(den).and_then(|v| v.checked_add(frac_v)).ok_or_else(bad)?, den)
        };
        if r.agree == 0 || r.agree > r.total {
            return Err(bad());
        }
        Ok(r)
    }
}

impl PartialEq for Ratio {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl PartialOrd for Ratio {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Ratio {
    fn cmp(&self, other: &Self) -> Ordering {
        (u64::from(self.agree) * u64::from(other.total)).cmp(&(u64::from(other.agree) * u64::from(self.total)))
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.agree, self.total)
    }
}

/// Most frequent label; ties go to the lexicographically smallest label.
pub fn modal_label<S: AsRef<str>>(labels: &[S]) -> Result<&str, ConsistencyError> {
    let mut counts: BTreeMap<&str, u32> = BTreeMap::new();
    for l in labels {
        *counts.entry(l.as_ref()).or_default() += 1;
    }
    // BTreeMap iterates in ascending key order, so keeping only strictly
    // larger counts leaves the smallest label among the tied maxima.
    let mut best: Option<(&str, u32)> = None;
    for (label, n) in counts {
        if best.is_none_or(|(_, b)| n > b) {
            best = Some((label, n));
        }
    }
    best.map(|(l, _)| l).ok_or(ConsistencyError::EmptyVector)
}

/// Share of labels equal to the modal label.
pub fn consistency_score<S: AsRef<str>>(labels: &[S]) -> Result<Ratio, ConsistencyError> {
    let m = modal_label(labels)?;
    let agree = labels.iter().filter(|l| l.as_ref() == m).count() as u32;
    Ok(Ratio::new(agree, labels.len() as u32))
}

/// Repeated annotations of one sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotationRecord {
    pub sample_id: String,
    pub labels: Vec<String>,
    pub modal: String,
    pub consistency: Ratio,
}

impl AnnotationRecord {
    /// `None` entries are unparseable draws and are left out of the vector.
    /// Returns `None` when no draw was parseable.
    pub fn from_draws(sample_id: impl Into<String>, draws: &[Option<String>]) -> Option<Self> {
        let labels: Vec<String> = draws.iter().flatten().cloned().collect();
        let modal = modal_label(&labels).ok()?.to_string();
        let consistency = consistency_score(&labels).ok()?;
        Some(Self {
            sample_id: sample_id.into(),
            labels,
            modal,
            consistency,
        })
    }

    pub fn iterations(&self) -> usize {
        self.labels.len()
    }
}

/// Line format of the consistency report.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RecordLine {
    sample_id: String,
    labels: Vec<String>,
    modal: String,
    consistency: f64,
}

impl Serialize for AnnotationRecord {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        RecordLine {
            sample_id: self.sample_id.clone(),
            labels: self.labels.clone(),
            modal: self.modal.clone(),
            consistency: self.consistency.value(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for AnnotationRecord {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let line = RecordLine::deserialize(deserializer)?;
        let consistency = consistency_score(&line.labels).map_err(serde::de::Error::custom)?;
        Ok(Self {
            sample_id: line.sample_id,
            labels: line.labels,
            modal: line.modal,
            consistency,
        })
    }
}

/// Keeps records whose consistency is at least `threshold`.
pub fn filter_by_consistency(
    records: &[AnnotationRecord],
    threshold: Ratio,
) -> (Vec<AnnotationRecord>, Vec<AnnotationRecord>) {
    records.iter().cloned().partition(|r| r.consistency >= threshold)
}

/// Line-delimited JSON report: `{sample_id, labels, modal, consistency}`.
pub fn to_jsonl(records: &[AnnotationRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
        .collect()
}

/// Summary counts of a consistency run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencySummary {
    pub records: usize,
    pub unanimous: usize,
    pub unanimous_share: f64,
    /// Histogram keyed by `agree/total`.
    pub histogram: BTreeMap<String, usize>,
}

pub fn summarize(records: &[AnnotationRecord]) -> ConsistencySummary {
    let mut histogram = BTreeMap::new();
    for r in records {
        *histogram.entry(r.consistency.to_string()).or_default() += 1;
    }
    let unanimous = records.iter().filter(|r| r.consistency == Ratio::ONE).count();
    ConsistencySummary {
        records: records.len(),
        unanimous,
        unanimous_share: if records.is_empty() { 0.0 } else { unanimous as f64 / records.len() as f64 },
        histogram,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn modal_examples() {
        assert_eq!(modal_label(&["pos", "pos", "neg"]).unwrap(), "pos");
        assert_eq!(modal_label(&["pos"]).unwrap(), "pos");
        assert_eq!(modal_label(&["neg", "pos"]).unwrap(), "neg");
        assert_eq!(modal_label(&["pos", "neg"]).unwrap(), "neg");
        assert_eq!(modal_label::<&str>(&[]), Err(ConsistencyError::EmptyVector));
    }

    #[test]
    fn score_examples() {
        assert_eq!(consistency_score(&["pos", "pos", "pos"]).unwrap(), Ratio::ONE);
        let r = consistency_score(&["pos", "pos", "neg"]).unwrap();
        assert_eq!(r, Ratio::new(2, 3));
        assert!((r.value() - 0.67).abs() < 0.005);
        assert_eq!(consistency_score(&["a", "b", "c"]).unwrap(), Ratio::new(1, 3));
        assert_eq!(modal_label(&["b", "c", "a"]).unwrap(), "a");
        assert_eq!(consistency_score::<&str>(&[]), Err(ConsistencyError::EmptyVector));
    }

    #[test]
    fn ratio_parsing() {
        assert_eq!(Ratio::parse("1").unwrap(), Ratio::ONE);
        assert_eq!(Ratio::parse("2/3").unwrap(), Ratio::new(2, 3));
        assert_eq!(Ratio::parse("0.5").unwrap(), Ratio::new(1, 2));
        assert_eq!(Ratio::parse("1.0").unwrap(), Ratio::ONE);
        assert!(Ratio::parse("0").is_err());
        assert!(Ratio::parse("1.5").is_err());
        assert!(Ratio::parse("3/2").is_err());
        assert!(Ratio::parse("x").is_err());
    }

    fn rec(id: &str, labels: &[&str]) -> AnnotationRecord {
        let draws: Vec<Option<String>> = labels.iter().map(|l| Some(l.to_string())).collect();
        AnnotationRecord::from_draws(id, &draws).unwrap()
    }

    #[test]
    fn unparseable_draws_shrink_the_vector() {
        let r = AnnotationRecord::from_draws("x", &[Some("pos".into()), None, Some("pos".into())]).unwrap();
        assert_eq!(r.iterations(), 2);
        assert_eq!(r.consistency, Ratio::ONE);
        assert!(AnnotationRecord::from_draws("y", &[None, None]).is_none());
    }

    #[test]
    fn threshold_one_drops_any_disagreement() {
        let records = vec![
            rec("a", &["pos", "pos", "pos"]),
            rec("b", &["pos", "neg", "pos"]),
            rec("c", &["neg", "neg", "neg"]),
            rec("d", &["neg", "neg", "pos"]),
        ];
        let (kept, dropped) = filter_by_consistency(&records, Ratio::ONE);
        let ids = |v: &[AnnotationRecord]| v.iter().map(|r| r.sample_id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&kept), ["a", "c"]);
        // Brute-force re-check: dropped == records whose draws are not all equal.
        let expected: Vec<String> = records
            .iter()
            .filter(|r| r.labels.iter().any(|l| *l != r.labels[0]))
            .map(|r| r.sample_id.clone())
            .collect();
        assert_eq!(ids(&dropped), expected);
        let (kept_all, none) = filter_by_consistency(&records, Ratio::new(1, 1000));
        assert_eq!((kept_all.len(), none.len()), (4, 0));
    }

    #[test]
    fn jsonl_round_trip() {
        let records = vec![rec("a", &["pos", "neg", "pos"])];
        let text = to_jsonl(&records);
        assert!(text.starts_with(r#"{"sample_id":"a","labels":["pos","neg","pos"],"modal":"pos","consistency":0.6666666666666666}"#));
        let back: AnnotationRecord = serde_json::from_str(text.trim()).unwrap();
        assert_eq!(back, records[0]);
    }

    proptest! {
        #[test]
        fn permutation_invariant(labels in prop::collection::vec(prop::sample::select(vec!["a", "b", "c"]), 1..12), seed in any::<u64>()) {
            let mut shuffled = labels.clone();
            // deterministic shuffle from the seed
            let n = shuffled.len();
            let mut s = seed;
            for i in (1..n).rev() {
                s = crate::hashing::mix64(s);
                shuffled.swap(i, (s % (i as u64 + 1)) as usize);
            }
            prop_assert_eq!(consistency_score(&labels).unwrap(), consistency_score(&shuffled).unwrap());
            prop_assert_eq!(modal_label(&labels).unwrap(), modal_label(&shuffled).unwrap());
        }

        #[test]
        fn raising_threshold_never_grows_kept(vectors in prop::collection::vec(prop::collection::vec(prop::sample::select(vec!["p", "n"]), 1..6), 0..40), a in 1u32..=6, b in 1u32..=6) {
            let records: Vec<_> = vectors.iter().enumerate().map(|(i, v)| rec(&i.to_string(), v)).collect();
            let (lo, hi) = if Ratio::new(a, 6) <= Ratio::new(b, 6) { (a, b) } else { (b, a) };
            let (kept_lo, dropped_lo) = filter_by_consistency(&records, Ratio::new(lo, 6));
            let (kept_hi, _) = filter_by_consistency(&records, Ratio::new(hi, 6));
            prop_assert!(kept_hi.len() <= kept_lo.len());
            prop_assert_eq!(kept_lo.len() + dropped_lo.len(), records.len());
        }
    }
}
