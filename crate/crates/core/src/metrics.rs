//! Answer-text accuracy (ANLS) and answer-box accuracy (mAP over IoU
//! thresholds 0.50..0.95).
//!
//! With exactly one unranked box per question there is no confidence to sweep,
//! so average precision at a threshold is the fraction of questions whose box
//! clears it.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, Prediction, QaRecord};

/// IoU thresholds in hundredths.
pub const IOU_THRESHOLDS: [u32; 10] = [50, 55, 60, 65, 70, 75, 80, 85, 90, 95];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnlsConfig {
    pub threshold: f64,
    pub case_fold: bool,
    pub trim_whitespace: bool,
}

impl Default for AnlsConfig {
    fn default() -> Self {
        AnlsConfig {
            threshold: 0.5,
            case_fold: true,
            trim_whitespace: true,
        }
    }
}

impl AnlsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Validation(format!(
                "ANLS threshold {} outside [0,1]",
                self.threshold
            )));
        }
        Ok(())
    }
}

/// Whether a box only counts as localized when its answer text also scored.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gating {
    #[default]
    Ungated,
    TextGated,
}

/// Similarity a question's ANLS must reach for its box to count when gated.
pub const TEXT_GATE: f64 = 0.5;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreConfig {
    pub anls: AnlsConfig,
    pub gating: Gating,
}

pub fn levenshtein_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, ca) in a.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let up = row[j + 1];
            let cost = usize::from(ca != cb);
            row[j + 1] = (diag + cost).min(up + 1).min(row[j] + 1);
            diag = up;
        }
    }
    row[b.len()]
}

/// `1 - distance / max(|a|, |b|)`, with two empty strings scoring 1.
pub fn normalized_similarity(a: &str, b: &str) -> f64 {
    let longest = a.chars().count().max(b.chars().count());
    if longest == 0 {
        return 1.0;
    }
    1.0 - levenshtein_distance(a, b) as f64 / longest as f64
}

pub fn normalize_answer(s: &str, cfg: &AnlsConfig) -> String {
    let s = if cfg.case_fold { s.to_lowercase() } else { s.to_string() };
    if cfg.trim_whitespace {
        s.split_whitespace().collect::<Vec<_>>().join(" ")
    } else {
        s
    }
}

pub fn anls_score(pred: &str, golds: &[String], cfg: &AnlsConfig) -> Result<f64> {
    if golds.is_empty() {
        return Err(Error::Usage("ANLS needs at least one gold answer".into()));
    }
    let p = normalize_answer(pred, cfg);
    let best = golds
        .iter()
        .map(|g| normalized_similarity(&p, &normalize_answer(g, cfg)))
        .fold(0.0, f64::max);
    Ok(if best < cfg.threshold { 0.0 } else { best })
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b).map_or(0, |i| i.area());
    let union = a.area() + b.area() - inter;
    if union == 0 {
        return 0.0;
    }
    inter as f64 / union as f64
}

fn round6(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

fn clears(iou_value: f64, hundredths: u32) -> bool {
    round6(iou_value) * 100.0 >= hundredths as f64 - 1e-9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapResult {
    /// Accuracy keyed by threshold in hundredths.
    pub per_threshold_accuracy: BTreeMap<u32, f64>,
    pub map_iou: f64,
}

fn map_from_ious(ious: &[f64]) -> MapResult {
    let n = ious.len();
    let counts: Vec<(u32, usize)> = IOU_THRESHOLDS
        .iter()
        .map(|&t| (t, ious.iter().filter(|&&v| clears(v, t)).count()))
        .collect();
    let per_threshold_accuracy: BTreeMap<u32, f64> = counts.iter().map(|&(t, c)| (t, c as f64 / n as f64)).collect();
    let total: usize = counts.iter().map(|&(_, c)| c).sum();
    let map_iou = total as f64 / (IOU_THRESHOLDS.len() * n) as f64;
    MapResult {
        per_threshold_accuracy,
        map_iou,
    }
}

/// mAP over IoU thresholds 0.50..0.95; a missing predicted box misses every
/// threshold.
pub fn map_at_iou(pairs: &[(Option<BBox>, BBox)]) -> Result<MapResult> {
    if pairs.is_empty() {
        return Err(Error::Usage("mAP over an empty pair list".into()));
    }
    let ious: Vec<f64> = pairs
        .iter()
        .map(|(p, g)| p.as_ref().map_or(0.0, |p| iou(p, g)))
        .collect();
    Ok(map_from_ious(&ious))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionScore {
    pub question_id: String,
    pub anls: f64,
    /// `None` when the question has no gold box.
    pub iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportCounts {
    pub total: usize,
    pub with_gold_box: usize,
    pub with_predicted_box: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_question: Vec<QuestionScore>,
    pub aggregate_anls: f64,
    pub per_threshold_accuracy: BTreeMap<u32, f64>,
    /// `None` when no question carries a gold box.
    pub map_iou: Option<f64>,
    pub gating: Gating,
    /// mAP under the opposite gating mode, reported alongside.
    pub map_iou_alternate: Option<f64>,
    pub counts: ReportCounts,
}

impl EvalReport {
    /// Recomputes the aggregates from the per-question rows and checks they
    /// match the stored values.
    pub fn check_arithmetic(&self) -> bool {
        let n = self.per_question.len();
        let anls_ok = if n == 0 {
            self.aggregate_anls == 0.0
        } else {
            self.per_question.iter().map(|q| q.anls).sum::<f64>() / n as f64 == self.aggregate_anls
        };
        let rows = self.per_question.iter().filter_map(|q| q.iou.map(|v| (q.anls, v)));
        let ungated: Vec<f64> = rows.clone().map(|(_, v)| v).collect();
        let gated: Vec<f64> = rows.map(|(a, v)| if a >= TEXT_GATE { v } else { 0.0 }).collect();
        let (primary, alternate) = match self.gating {
            Gating::Ungated => (&ungated, &gated),
            Gating::TextGated => (&gated, &ungated),
        };
        let map_ok = match self.map_iou {
            None => primary.is_empty() && self.per_threshold_accuracy.is_empty(),
            Some(m) if !primary.is_empty() => {
                let p = map_from_ious(primary);
                let a = map_from_ious(alternate);
                p.map_iou == m
                    && p.per_threshold_accuracy == self.per_threshold_accuracy
                    && Some(a.map_iou) == self.map_iou_alternate
            }
            Some(_) => false,
        };
        anls_ok && map_ok
    }
}

/// Scores a run. Questions without a prediction score ANLS 0 and miss every
/// IoU threshold; questions without a gold box are left out of mAP.
pub fn score_run(predictions: &[Prediction], gold: &[QaRecord], cfg: &ScoreConfig) -> Result<EvalReport> {
    cfg.anls.validate()?;
    let known: HashSet<&str> = gold.iter().map(|r| r.question_id.as_str()).collect();
    let unknown: Vec<&str> = predictions
        .iter()
        .map(|p| p.question_id.as_str())
        .filter(|q| !known.contains(q))
        .collect();
    if !unknown.is_empty() {
        return Err(Error::Validation(format!(
            "predictions for unknown question ids: {}",
            unknown.join(", ")
        )));
    }
    let mut by_id: HashMap<&str, &Prediction> = HashMap::new();
    for p in predictions {
        if by_id.insert(p.question_id.as_str(), p).is_some() {
            return Err(Error::Validation(format!(
                "more than one prediction for question {}",
                p.question_id
            )));
        }
    }

    let mut per_question = Vec::with_capacity(gold.len());
    let mut ungated = Vec::new();
    let mut gated = Vec::new();
    let mut with_predicted_box = 0;
    for rec in gold {
        let pred = by_id.get(rec.question_id.as_str());
        let answer = pred.map_or("", |p| p.answer.as_str());
        let anls = anls_score(answer, &rec.gold_answers, &cfg.anls)?;
        let pbox = pred.and_then(|p| p.answer_box);
        if pbox.is_some() {
            with_predicted_box += 1;
        }
        let q_iou = rec.gold_box.map(|g| pbox.map_or(0.0, |p| iou(&p, &g)));
        if let Some(v) = q_iou {
            ungated.push(v);
            gated.push(if anls >= TEXT_GATE { v } else { 0.0 });
        }
        per_question.push(QuestionScore {
            question_id: rec.question_id.clone(),
            anls,
            iou: q_iou,
        });
    }

    let n = per_question.len();
    let aggregate_anls = if n == 0 {
        0.0
    } else {
        per_question.iter().map(|q| q.anls).sum::<f64>() / n as f64
    };
    let (primary, alternate) = match cfg.gating {
        Gating::Ungated => (&ungated, &gated),
        Gating::TextGated => (&gated, &ungated),
    };
    let (per_threshold_accuracy, map_iou, map_iou_alternate) = if primary.is_empty() {
        (BTreeMap::new(), None, None)
    } else {
        let m = map_from_ious(primary);
        let alt = map_from_ious(alternate);
        (m.per_threshold_accuracy, Some(m.map_iou), Some(alt.map_iou))
    };
    Ok(EvalReport {
        counts: ReportCounts {
            total: n,
            with_gold_box: ungated.len(),
            with_predicted_box,
        },
        per_question,
        aggregate_anls,
        per_threshold_accuracy,
        map_iou,
        gating: cfg.gating,
        map_iou_alternate,
    })
}
