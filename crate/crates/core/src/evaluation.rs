//! ROC / AUC over labeled frame scores, overall and per anomaly class.
//!
//! AUC is the Mann-Whitney statistic: the probability that a random
//! positive outscores a random negative, with tied pairs counting 1/2.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autoencoder::AutoencoderModel;
use crate::detector::{self, DetectorConfig, DetectorError};
use crate::preprocessing::{Frame, Label};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("AUC needs both classes: {positives} positive and {negatives} negative scores for {target}")]
    SingleClass {
        target: String,
        positives: usize,
        negatives: usize,
    },
    #[error("score for frame {0} is not finite")]
    NonFiniteScore(String),
    #[error("frame {0} has no label")]
    Unlabeled(String),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error("report io: {0}")]
    Io(#[from] std::io::Error),
    #[error("report encoding: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledScore {
    pub frame_id: String,
    pub score: f64,
    pub label: Label,
}

/// Which frames count as positives. Negatives are always the normal frames.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PositiveClass {
    AnyAnomaly,
    Class(String),
}

impl std::fmt::Display for PositiveClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PositiveClass::AnyAnomaly => f.write_str("any-anomaly"),
            PositiveClass::Class(c) => f.write_str(c),
        }
    }
}

/// Split into (positive, negative) scores; frames of other anomaly classes
/// are dropped when a specific class is requested.
pub fn split_scores(scores: &[LabeledScore], positive: &PositiveClass) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for s in scores {
        if !s.score.is_finite() {
            return Err(EvalError::NonFiniteScore(s.frame_id.clone()));
        }
        match (&s.label, positive) {
            (Label::Normal, _) => neg.push(s.score),
            (Label::Anomaly(_), PositiveClass::AnyAnomaly) => pos.push(s.score),
            (Label::Anomaly(c), PositiveClass::Class(want)) if c == want => pos.push(s.score),
            _ => {}
        }
    }
    if pos.is_empty() || neg.is_empty() {
        return Err(EvalError::SingleClass {
            target: positive.to_string(),
            positives: pos.len(),
            negatives: neg.len(),
        });
    }
    Ok((pos, neg))
}

/// Mann-Whitney AUC from midranks, `O(n log n)`.
pub fn auc_from_scores(positives: &[f64], negatives: &[f64]) -> f64 {
    let mut all: Vec<(f64, bool)> = positives
        .iter()
        .map(|&s| (s, true))
        .chain(negatives.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // ranks i+1 ..= j share their mean
        let mid = (i + 1 + j) as f64 / 2.0;
        let tied_pos = all[i..j].iter().filter(|x| x.1).count();
        rank_sum_pos += mid * tied_pos as f64;
        i = j;
    }
    let (np, nn) = (positives.len() as f64, negatives.len() as f64);
    let u = rank_sum_pos - np * (np + 1.0) / 2.0;
    u / (np * nn)
}

pub fn auc(scores: &[LabeledScore], positive: &PositiveClass) -> Result<f64> {
    let (pos, neg) = split_scores(scores, positive)?;
    Ok(auc_from_scores(&pos, &neg))
}

/// ROC points from sweeping the threshold down through every distinct
/// score; starts at (0, 0) and ends at (1, 1).
pub fn roc_from_scores(positives: &[f64], negatives: &[f64]) -> Vec<(f64, f64)> {
    let mut all: Vec<(f64, bool)> = positives
        .iter()
        .map(|&s| (s, true))
        .chain(negatives.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (np, nn) = (positives.len() as f64, negatives.len() as f64);
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            if all[j].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        points.push((fp as f64 / nn, tp as f64 / np));
        i = j;
    }
    points
}

pub fn roc_curve(scores: &[LabeledScore], positive: &PositiveClass) -> Result<Vec<(f64, f64)>> {
    let (pos, neg) = split_scores(scores, positive)?;
    Ok(roc_from_scores(&pos, &neg))
}

/// Trapezoidal area under a piecewise-linear curve.
pub fn trapezoid_area(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    /// Detector settings (or any other provenance) that produced the scores.
    pub config: serde_json::Value,
    pub overall_auc: f64,
    pub per_class: BTreeMap<String, f64>,
    /// Frames per label, including `normal`.
    pub counts: BTreeMap<String, usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub roc_csv_path: Option<String>,
    #[serde(skip)]
    pub roc: Vec<(f64, f64)>,
}

impl EvaluationReport {
    /// Build a report from labeled scores. Every anomaly class present gets
    /// an AUC against the normal frames alone.
    pub fn from_scores(scores: &[LabeledScore], config: serde_json::Value) -> Result<Self> {
        let mut counts = BTreeMap::new();
        for s in scores {
            *counts.entry(s.label.as_str().to_string()).or_insert(0) += 1;
        }
        let (pos, neg) = split_scores(scores, &PositiveClass::AnyAnomaly)?;
        let overall_auc = auc_from_scores(&pos, &neg);
        let roc = roc_from_scores(&pos, &neg);
        let mut per_class = BTreeMap::new();
        for class in counts.keys().filter(|c| *c != "normal") {
            per_class.insert(class.clone(), auc(scores, &PositiveClass::Class(class.clone()))?);
        }
        Ok(Self {
            config,
            overall_auc,
            per_class,
            counts,
            roc_csv_path: None,
            roc,
        })
    }

    /// Write `<stem>.json` and `<stem>_roc.csv` (columns `fpr,tpr`).
    pub fn write(&mut self, json_path: impl AsRef<Path>) -> Result<()> {
        let json_path = json_path.as_ref();
        let stem = json_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "report".into());
        let roc_path = json_path.with_file_name(format!("{stem}_roc.csv"));
        let mut w = std::io::BufWriter::new(std::fs::File::create(&roc_path)?);
        writeln!(w, "fpr,tpr")?;
        for (fpr, tpr) in &self.roc {
            writeln!(w, "{fpr},{tpr}")?;
        }
        w.flush()?;
        self.roc_csv_path = roc_path.file_name().map(|n| n.to_string_lossy().into_owned());
        std::fs::write(json_path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read(json_path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(json_path)?)?)
    }
}

/// Score every labeled frame and report.
pub fn evaluate(model: &AutoencoderModel, config: &DetectorConfig, frames: &[Frame]) -> Result<EvaluationReport> {
    let labeled = score_labeled(model, config, frames)?;
    EvaluationReport::from_scores(&labeled, serde_json::to_value(config)?)
}

pub fn score_labeled(model: &AutoencoderModel, config: &DetectorConfig, frames: &[Frame]) -> Result<Vec<LabeledScore>> {
    let scores = detector::score_frames(model, frames, config)?;
    frames
        .iter()
        .zip(scores)
        .map(|(f, score)| {
            let label = f.label.clone().ok_or_else(|| EvalError::Unlabeled(f.source_id.clone()))?;
            Ok(LabeledScore {
                frame_id: f.source_id.clone(),
                score,
                label,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ls(score: f64, label: &str) -> LabeledScore {
        LabeledScore {
            frame_id: format!("{label}-{score}"),
            score,
            label: Label::from(label),
        }
    }

    #[test]
    fn small_examples() {
        let s = vec![ls(0.1, "normal"), ls(0.4, "normal"), ls(0.3, "a"), ls(0.5, "a")];
        assert_eq!(auc(&s, &PositiveClass::AnyAnomaly).unwrap(), 0.75);
        let perfect = vec![ls(0.1, "normal"), ls(0.9, "a")];
        assert_eq!(auc(&perfect, &PositiveClass::AnyAnomaly).unwrap(), 1.0);
        let roc = roc_curve(&perfect, &PositiveClass::AnyAnomaly).unwrap();
        assert!(roc.contains(&(0.0, 1.0)));
        let constant = vec![ls(0.0, "normal"), ls(0.0, "normal"), ls(0.0, "a")];
        assert_eq!(auc(&constant, &PositiveClass::AnyAnomaly).unwrap(), 0.5);
        assert_eq!(
            roc_curve(&constant, &PositiveClass::AnyAnomaly).unwrap(),
            vec![(0.0, 0.0), (1.0, 1.0)]
        );
    }

    #[test]
    fn single_class_rejected() {
        let s = vec![ls(0.1, "normal"), ls(0.4, "normal")];
        assert!(matches!(
            auc(&s, &PositiveClass::AnyAnomaly),
            Err(EvalError::SingleClass { positives: 0, .. })
        ));
        let s = vec![ls(0.1, "normal"), ls(0.4, "b")];
        assert!(auc(&s, &PositiveClass::Class("a".into())).is_err());
    }

    #[test]
    fn report_per_class_and_counts() {
        let s = vec![
            ls(0.1, "normal"),
            ls(0.2, "normal"),
            ls(0.9, "a"),
            ls(0.15, "b"),
            ls(0.05, "b"),
        ];
        let r = EvaluationReport::from_scores(&s, serde_json::json!({})).unwrap();
        assert_eq!(r.per_class["a"], 1.0);
        assert_eq!(r.per_class["b"], 0.25);
        assert_eq!(r.counts["normal"], 2);
        assert_eq!(r.counts["b"], 2);
        assert_eq!(r.roc.first(), Some(&(0.0, 0.0)));
        assert_eq!(r.roc.last(), Some(&(1.0, 1.0)));
    }

    #[test]
    fn report_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = vec![ls(0.1, "normal"), ls(0.3, "a")];
        let mut r = EvaluationReport::from_scores(&s, serde_json::json!({"scale": 8})).unwrap();
        r.write(dir.path().join("eval.json")).unwrap();
        assert_eq!(r.roc_csv_path.as_deref(), Some("eval_roc.csv"));
        let back = EvaluationReport::read(dir.path().join("eval.json")).unwrap();
        assert_eq!(back.overall_auc, 1.0);
        assert_eq!(back.config["scale"], 8);
        let csv = std::fs::read_to_string(dir.path().join("eval_roc.csv")).unwrap();
        assert!(csv.starts_with("fpr,tpr\n0,0\n"));
    }
}
