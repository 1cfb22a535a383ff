//! OOD scoring, thresholding, ensembling, and evaluation metrics.
//!
//! The detection score of a sample is the head's statistic: maximum cosine
//! for cosine heads, maximum softmax probability otherwise. A sample is
//! flagged OOD when its score falls below the threshold. AUROC uses the
//! rank-statistic (Mann-Whitney) definition with ties counted 1/2; AUPR uses
//! non-interpolated precision summation over recall increments.

use serde::{Deserialize, Serialize};

use crate::data::{DataRole, Dataset};
use crate::error::{Error, Result};
use crate::heads::HeadKind;
use crate::model::Model;
use crate::ops::Mode;
use crate::tensor::NdArray;

/// Index of the maximum, ties broken toward the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Per-sample detection outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    /// Detection statistic (max cosine or max softmax probability).
    pub score: f64,
    pub pred_class: usize,
    /// Softmax probability at the predicted class.
    pub pred_prob: f64,
    /// Ground truth: does the sample come from the ID distribution?
    pub is_id: bool,
    /// For ID samples: was the classification correct?
    pub correct: Option<bool>,
}

const SCORE_CHUNK: usize = 256;

fn records_from_outputs(
    detection: &[f64],
    class_scores: &NdArray,
    probabilities: &NdArray,
    labels: Option<&[usize]>,
    is_id: bool,
) -> Vec<ScoreRecord> {
    let cols = class_scores.shape()[1];
    (0..detection.len())
        .map(|r| {
            let row = &class_scores.data()[r * cols..(r + 1) * cols];
            let pred_class = argmax(row);
            ScoreRecord {
                score: detection[r],
                pred_class,
                pred_prob: probabilities.data()[r * cols + pred_class],
                is_id,
                correct: labels.map(|l| l[r] == pred_class),
            }
        })
        .collect()
}

/// Score every sample of `data` with BN in Eval mode.
pub fn score_batch(model: &mut Model, data: &Dataset) -> Result<Vec<ScoreRecord>> {
    let is_id = data.role() != DataRole::Ood;
    let indices: Vec<usize> = (0..data.len()).collect();
    let mut records = Vec::with_capacity(data.len());
    for chunk in indices.chunks(SCORE_CHUNK) {
        let (x, y) = data.batch(chunk);
        let pass = model.forward(&x, Mode::Eval)?;
        records.extend(records_from_outputs(
            &pass.output.detection_score,
            &pass.output.class_scores.to_array(),
            &pass.output.probabilities,
            y.as_deref(),
            is_id,
        ));
    }
    Ok(records)
}

/// Elementwise mean of per-model class scores. All models must share the
/// head family and output shape.
pub fn ensemble_scores(kinds: &[HeadKind], scores: &[NdArray]) -> Result<NdArray> {
    if scores.is_empty() || kinds.len() != scores.len() {
        return Err(Error::InvalidParams(
            "ensemble needs one class-score matrix per model".into(),
        ));
    }
    let cosine = kinds[0].is_cosine();
    if kinds.iter().any(|k| k.is_cosine() != cosine) {
        return Err(Error::MixedHeadKinds(format!("{kinds:?}")));
    }
    let shape = scores[0].shape().to_vec();
    if scores.iter().any(|s| s.shape() != shape) {
        return Err(Error::ShapeMismatch {
            op: "ensemble_scores",
            detail: "models produced differently shaped score matrices".into(),
        });
    }
    // Mean centered on the first model: identical members accumulate exactly
    // zero deltas, so an ensemble of equal checkpoints is bit-identical to a
    // single model.
    let mut mean = scores[0].clone();
    if scores.len() > 1 {
        let inv = 1.0 / scores.len() as f64;
        let base = scores[0].clone();
        for s in &scores[1..] {
            for ((dst, src), b) in mean.data_mut().iter_mut().zip(s.data()).zip(base.data()) {
                *dst += (*src - *b) * inv;
            }
        }
    }
    Ok(mean)
}

/// Score a dataset with an ensemble: class scores (cosines) and softmax
/// probabilities are averaged across models, then thresholded exactly like a
/// single network.
pub fn score_batch_ensemble(models: &mut [Model], data: &Dataset) -> Result<Vec<ScoreRecord>> {
    if models.is_empty() {
        return Err(Error::InvalidParams("ensemble needs at least one model".into()));
    }
    let kinds: Vec<HeadKind> = models.iter().map(Model::head_kind).collect();
    let cosine = kinds[0].is_cosine();
    if kinds.iter().any(|k| k.is_cosine() != cosine) {
        return Err(Error::MixedHeadKinds(format!("{kinds:?}")));
    }
    let is_id = data.role() != DataRole::Ood;
    let indices: Vec<usize> = (0..data.len()).collect();
    let mut records = Vec::with_capacity(data.len());
    for chunk in indices.chunks(SCORE_CHUNK) {
        let (x, y) = data.batch(chunk);
        let mut score_mats = Vec::with_capacity(models.len());
        let mut prob_mats = Vec::with_capacity(models.len());
        for model in models.iter_mut() {
            let pass = model.forward(&x, Mode::Eval)?;
            score_mats.push(pass.output.class_scores.to_array());
            prob_mats.push(pass.output.probabilities);
        }
        let mean_scores = ensemble_scores(&kinds, &score_mats)?;
        let mean_probs = ensemble_scores(&kinds, &prob_mats)?;
        let detection: Vec<f64> = {
            let basis = if cosine { &mean_scores } else { &mean_probs };
            let cols = basis.shape()[1];
            basis
                .data()
                .chunks(cols)
                .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
                .collect()
        };
        records.extend(records_from_outputs(
            &detection,
            &mean_scores,
            &mean_probs,
            y.as_deref(),
            is_id,
        ));
    }
    Ok(records)
}

/// Flag records whose score falls below `threshold` as OOD.
pub fn detect_ood(records: &[ScoreRecord], threshold: f64) -> Vec<bool> {
    records.iter().map(|r| r.score < threshold).collect()
}

/// Rank-statistic AUROC: the probability that a random ID score exceeds a
/// random OOD score, ties counted 1/2.
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    if id_scores.is_empty() {
        return Err(Error::EmptyScoreSet("id"));
    }
    if ood_scores.is_empty() {
        return Err(Error::EmptyScoreSet("ood"));
    }
    let mut all: Vec<(f64, bool)> = id_scores
        .iter()
        .map(|&s| (s, true))
        .chain(ood_scores.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum_id = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // 1-based ranks i+1..=j share the average rank
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for item in &all[i..j] {
            if item.1 {
                rank_sum_id += avg_rank;
            }
        }
        i = j;
    }
    let n_id = id_scores.len() as f64;
    let n_ood = ood_scores.len() as f64;
    let u = rank_sum_id - n_id * (n_id + 1.0) / 2.0;
    Ok(u / (n_id * n_ood))
}

/// Area under precision-recall with `pos_scores` as the positive class,
/// computed by sorting descending and summing precision at each recall
/// increment (ties processed as one group).
pub fn aupr(pos_scores: &[f64], neg_scores: &[f64]) -> Result<f64> {
    if pos_scores.is_empty() {
        return Err(Error::EmptyScoreSet("positive"));
    }
    let mut all: Vec<(f64, bool)> = pos_scores
        .iter()
        .map(|&s| (s, true))
        .chain(neg_scores.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let n_pos = pos_scores.len() as f64;
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        for item in &all[i..j] {
            if item.1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
        }
        let recall = tp / n_pos;
        let precision = tp / (tp + fp);
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    Ok(area)
}

/// False-positive rate at the lowest threshold that keeps at least 95% of ID
/// samples accepted. Auxiliary metric, not part of the reported family.
pub fn fpr_at_95_tpr(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    if id_scores.is_empty() {
        return Err(Error::EmptyScoreSet("id"));
    }
    if ood_scores.is_empty() {
        return Err(Error::EmptyScoreSet("ood"));
    }
    let mut sorted = id_scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let k = ((0.95 * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    let threshold = sorted[k - 1];
    let fp = ood_scores.iter().filter(|&&s| s >= threshold).count();
    Ok(fp as f64 / ood_scores.len() as f64)
}

/// Evaluation summary for one ID/OOD pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ood_name: String,
    pub auroc: f64,
    /// ID as the positive class.
    pub aupr_in: f64,
    /// OOD as the positive class (scores negated).
    pub aupr_out: f64,
    /// Detecting correctly classified ID samples from confidence;
    /// absent when every ID sample was misclassified.
    pub aupr_succ: Option<f64>,
    /// Detecting misclassified ID samples from negated confidence;
    /// absent when classification was perfect.
    pub aupr_err: Option<f64>,
    /// Auxiliary, beyond the reported metric family.
    pub fpr_at_95_tpr: f64,
    pub id_accuracy: f64,
    pub n_id: usize,
    pub n_ood: usize,
    /// Resolved experiment configuration.
    pub config: String,
    /// Seed provenance.
    pub seed: String,
}

/// Compute the full metric family from scored ID and OOD records.
///
/// Confidence for AUPR-Succ/Err is the predicted probability (the softmax
/// value at the winning class), for every head kind.
pub fn evaluate(
    id_records: &[ScoreRecord],
    ood_records: &[ScoreRecord],
    ood_name: &str,
    config: &str,
    seed: &str,
) -> Result<MetricsReport> {
    if id_records.is_empty() {
        return Err(Error::EmptyScoreSet("id"));
    }
    if ood_records.is_empty() {
        return Err(Error::EmptyScoreSet("ood"));
    }
    debug_assert!(id_records.iter().all(|r| r.is_id && r.correct.is_some()));
    debug_assert!(ood_records.iter().all(|r| !r.is_id));

    let id_scores: Vec<f64> = id_records.iter().map(|r| r.score).collect();
    let ood_scores: Vec<f64> = ood_records.iter().map(|r| r.score).collect();
    let neg = |xs: &[f64]| xs.iter().map(|v| -v).collect::<Vec<f64>>();

    let succ_conf: Vec<f64> = id_records
        .iter()
        .filter(|r| r.correct == Some(true))
        .map(|r| r.pred_prob)
        .collect();
    let err_conf: Vec<f64> = id_records
        .iter()
        .filter(|r| r.correct == Some(false))
        .map(|r| r.pred_prob)
        .collect();

    let aupr_succ = if succ_conf.is_empty() {
        None
    } else {
        Some(aupr(&succ_conf, &err_conf)?)
    };
    let aupr_err = if err_conf.is_empty() {
        None
    } else {
        Some(aupr(&neg(&err_conf), &neg(&succ_conf))?)
    };

    let report = MetricsReport {
        ood_name: ood_name.to_string(),
        auroc: auroc(&id_scores, &ood_scores)?,
        aupr_in: aupr(&id_scores, &ood_scores)?,
        aupr_out: aupr(&neg(&ood_scores), &neg(&id_scores))?,
        aupr_succ,
        aupr_err,
        fpr_at_95_tpr: fpr_at_95_tpr(&id_scores, &ood_scores)?,
        id_accuracy: succ_conf.len() as f64 / id_records.len() as f64,
        n_id: id_records.len(),
        n_ood: ood_records.len(),
        config: config.to_string(),
        seed: seed.to_string(),
    };
    for v in [report.auroc, report.aupr_in, report.aupr_out, report.id_accuracy] {
        debug_assert!((0.0..=1.0).contains(&v));
    }
    Ok(report)
}
