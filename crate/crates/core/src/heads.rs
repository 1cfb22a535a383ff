//! Output heads: standard softmax, scaled logits, single-FC cosine, and
//! two-FC cosine.
//!
//! A head maps the feature vector `f` to per-class scores, a detection
//! score, and the inputs of the training loss. Cosine heads score classes by
//! `cos(theta_i) = normalize(w_i) . normalize(f)` and multiply the cosines by
//! a positive scale `s` before softmax; `s` is either a fixed constant or
//! predicted per sample as `s = exp(BN(w_s . f + b_s))`. Detection thresholds
//! the raw maximum cosine, not the softmax value; the softmax value at the
//! winning index is reported as the classification confidence.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{self, BatchNormState};
use crate::tensor::{NdArray, Tensor};

/// Head variant selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    /// Softmax over raw logits `W f + b`; detection score is the maximum
    /// softmax probability.
    Standard,
    /// Raw logits multiplied by a predicted per-sample scale before softmax.
    ScaledLogit,
    /// Single FC computing cosine similarity on the pooled feature.
    Cosine,
    /// Extra 512-unit FC before the cosine layer, as in metric-learning heads.
    TwoFcCosine,
}

impl HeadKind {
    /// Heads whose class scores are cosines and whose detection score is the
    /// raw maximum cosine.
    pub fn is_cosine(self) -> bool {
        matches!(self, HeadKind::Cosine | HeadKind::TwoFcCosine)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::Standard => "standard",
            HeadKind::ScaledLogit => "scaled-logit",
            HeadKind::Cosine => "cosine",
            HeadKind::TwoFcCosine => "two-fc-cosine",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "standard" => HeadKind::Standard,
            "scaled-logit" => HeadKind::ScaledLogit,
            "cosine" => HeadKind::Cosine,
            "two-fc-cosine" => HeadKind::TwoFcCosine,
            _ => None?,
        })
    }
}

/// How the softmax scale is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScaleSpec {
    /// Constant scale, e.g. 16/32/64/128 in the fixed-scale ablations.
    Fixed(f64),
    /// Per-sample scale `s = exp(BN(w_s . f + b_s))` predicted from the
    /// unnormalized feature.
    Predicted,
}

fn default_embed_dim() -> usize {
    512
}

/// Head configuration as stored in experiment configs and checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub kind: HeadKind,
    #[serde(default = "HeadConfig::default_scale")]
    pub scale: ScaleSpec,
    /// Intermediate width of the two-FC variant.
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
}

impl HeadConfig {
    fn default_scale() -> ScaleSpec {
        ScaleSpec::Predicted
    }

    pub fn new(kind: HeadKind) -> Self {
        Self {
            kind,
            scale: Self::default_scale(),
            embed_dim: default_embed_dim(),
        }
    }

    pub fn with_scale(mut self, scale: ScaleSpec) -> Self {
        self.scale = scale;
        self
    }

    pub fn with_embed_dim(mut self, dim: usize) -> Self {
        self.embed_dim = dim;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if let ScaleSpec::Fixed(s) = self.scale {
            if s.is_nan() || s <= 0.0 {
                return Err(Error::InvalidParams(format!(
                    "fixed scale must be > 0, got {s}"
                )));
            }
        }
        if self.kind == HeadKind::ScaledLogit && self.scale != ScaleSpec::Predicted {
            return Err(Error::InvalidParams(
                "scaled-logit head requires the predicted scale".into(),
            ));
        }
        if self.kind == HeadKind::TwoFcCosine && self.embed_dim == 0 {
            return Err(Error::InvalidParams("embed_dim must be >= 1".into()));
        }
        Ok(())
    }

    /// Whether the head owns a scale-prediction branch.
    pub fn has_scale_branch(&self) -> bool {
        self.kind != HeadKind::Standard && self.scale == ScaleSpec::Predicted
    }
}

/// The branch computing `s = exp(BN(w_s . f + b_s))`.
pub struct ScaleBranch {
    /// `w_s` as a `[1, D]` matrix.
    pub weight: Tensor,
    /// `b_s` as a one-element vector.
    pub bias: Tensor,
    pub bn: BatchNormState,
}

/// Scale handling bound for one forward pass.
pub enum ScaleMode {
    Fixed(f64),
    Predicted(ScaleBranch),
}

/// Extra FC layer of the two-FC variant: `g = W1 f + b1`, no activation.
pub struct EmbedFc {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Parameters of one head, bound into the current graph.
pub struct HeadParams {
    pub kind: HeadKind,
    /// Class weights `[C, D]` (rows `w_i`); `D` is the embed width for the
    /// two-FC variant.
    pub weight: Tensor,
    /// Class bias, present only in the standard and scaled-logit heads
    /// (cosine has no additive term).
    pub bias: Option<Tensor>,
    pub scale: ScaleMode,
    pub embed: Option<EmbedFc>,
}

impl HeadParams {
    fn validate(&self) -> Result<()> {
        if self.kind.is_cosine() && self.bias.is_some() {
            return Err(Error::InvalidParams(
                "cosine heads carry no class bias".into(),
            ));
        }
        if (self.kind == HeadKind::TwoFcCosine) != self.embed.is_some() {
            return Err(Error::InvalidParams(
                "embed FC must be present exactly for the two-FC head".into(),
            ));
        }
        if let ScaleMode::Fixed(s) = self.scale {
            if self.kind != HeadKind::Standard && (s.is_nan() || s <= 0.0) {
                return Err(Error::InvalidParams(format!(
                    "fixed scale must be > 0, got {s}"
                )));
            }
        }
        if self.kind == HeadKind::ScaledLogit && matches!(self.scale, ScaleMode::Fixed(_)) {
            return Err(Error::InvalidParams(
                "scaled-logit head requires the predicted scale".into(),
            ));
        }
        Ok(())
    }
}

/// Everything a head produces for one batch.
pub struct HeadOutput {
    pub kind: HeadKind,
    /// `[B, C]`: cosines for cosine heads, raw logits otherwise.
    pub class_scores: Tensor,
    /// `[B, C]`: the softmax input (class scores after scaling).
    pub scaled_logits: Tensor,
    /// `[B, C]`: detached softmax of the scaled logits.
    pub probabilities: NdArray,
    /// Per-sample scale (1.0 for the standard head).
    pub scale: Vec<f64>,
    /// Per-sample detection statistic: max cosine for cosine heads, max
    /// softmax probability otherwise.
    pub detection_score: Vec<f64>,
}

impl HeadOutput {
    /// Winning class per sample, ties broken toward the lowest index.
    pub fn predicted_classes(&self) -> Vec<usize> {
        let scores = self.class_scores.to_array();
        let cols = scores.shape()[1];
        scores
            .data()
            .chunks(cols)
            .map(crate::detect::argmax)
            .collect()
    }

    /// Softmax probability at the winning class per sample.
    pub fn predicted_probs(&self) -> Vec<f64> {
        let cols = self.probabilities.shape()[1];
        self.predicted_classes()
            .iter()
            .enumerate()
            .map(|(row, &c)| self.probabilities.data()[row * cols + c])
            .collect()
    }
}

fn row_maxes(a: &NdArray) -> Vec<f64> {
    let cols = a.shape()[1];
    a.data()
        .chunks(cols)
        .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

fn finish(
    kind: HeadKind,
    class_scores: Tensor,
    scaled_logits: Tensor,
    scale: Vec<f64>,
) -> HeadOutput {
    let scaled_values = scaled_logits.to_array();
    let probabilities = ops::softmax_rows(&scaled_values);
    assert!(
        scale.iter().all(|&s| s > 0.0),
        "softmax scale must be positive"
    );
    // A diverging run can push the scaled logits to infinity; the resulting
    // NaN loss is reported by the trainer, so only sane rows are asserted.
    if cfg!(debug_assertions) && scaled_values.all_finite() {
        let cols = probabilities.shape()[1];
        for row in probabilities.data().chunks(cols) {
            debug_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
    let detection_score = if kind.is_cosine() {
        let cosines = class_scores.to_array();
        assert!(
            cosines.data().iter().all(|&c| (-1.0 - 1e-9..=1.0 + 1e-9).contains(&c)),
            "cosine scores must lie in [-1, 1]"
        );
        row_maxes(&cosines)
    } else {
        row_maxes(&probabilities)
    };
    HeadOutput {
        kind,
        class_scores,
        scaled_logits,
        probabilities,
        scale,
        detection_score,
    }
}

fn predict_scale(feature: &Tensor, branch: &mut ScaleBranch) -> Result<Tensor> {
    let z = ops::dense_forward(feature, &branch.weight, Some(&branch.bias))?;
    let z = ops::batchnorm_forward(&z, &mut branch.bn)?;
    // exp keeps the scale positive; the clamp keeps that true even when a
    // diverging run drives the exponent below the f64 underflow threshold
    Ok(ops::clamp_min(&ops::exp(&z), f64::MIN_POSITIVE))
}

/// Baseline head: softmax over `W f + b`, thresholding the maximum softmax
/// probability.
pub fn standard_head(f: &Tensor, p: &mut HeadParams) -> Result<HeadOutput> {
    let logits = ops::dense_forward(f, &p.weight, p.bias.as_ref())?;
    let batch = f.shape()[0];
    Ok(finish(p.kind, logits.clone(), logits, vec![1.0; batch]))
}

/// Standard logits multiplied by the predicted per-sample scale:
/// `s * (W f + b)` with `s = exp(BN(w_s . f + b_s))`.
pub fn scaled_logit_head(f: &Tensor, p: &mut HeadParams) -> Result<HeadOutput> {
    let logits = ops::dense_forward(f, &p.weight, p.bias.as_ref())?;
    let ScaleMode::Predicted(branch) = &mut p.scale else {
        return Err(Error::InvalidParams(
            "scaled-logit head requires the predicted scale".into(),
        ));
    };
    let s = predict_scale(f, branch)?;
    let scaled = ops::row_scale(&logits, &s)?;
    Ok(finish(p.kind, logits, scaled, s.values()))
}

fn cosine_core(kind: HeadKind, feature: &Tensor, p: &mut HeadParams) -> Result<HeadOutput> {
    let f_hat = ops::l2_normalize(feature, ops::L2_EPSILON);
    let w_hat = ops::l2_normalize(&p.weight, ops::L2_EPSILON);
    let cosines = ops::dense_forward(&f_hat, &w_hat, None)?;
    let batch = feature.shape()[0];
    let (scaled, scale) = match &mut p.scale {
        ScaleMode::Fixed(s) => (ops::scale_by(&cosines, *s), vec![*s; batch]),
        ScaleMode::Predicted(branch) => {
            // Eq-style prediction runs on the unnormalized feature.
            let s = predict_scale(feature, branch)?;
            (ops::row_scale(&cosines, &s)?, s.values())
        }
    };
    Ok(finish(kind, cosines, scaled, scale))
}

/// Single-FC cosine head: class scores are `cos(theta_i)` between normalized
/// class weights and the normalized feature; detection thresholds the raw
/// maximum cosine.
pub fn cosine_head(f: &Tensor, p: &mut HeadParams) -> Result<HeadOutput> {
    cosine_core(p.kind, f, p)
}

/// Two-FC cosine head: an extra linear embedding `g = W1 f + b1` (no
/// activation, so `g` spans negative values) feeds the cosine layer; the
/// scale is predicted from `g`.
pub fn two_fc_cosine_head(f: &Tensor, p: &mut HeadParams) -> Result<HeadOutput> {
    let embed = p.embed.as_ref().ok_or_else(|| {
        Error::InvalidParams("two-FC head requires the embed FC".into())
    })?;
    let g = ops::dense_forward(f, &embed.weight, Some(&embed.bias))?;
    cosine_core(p.kind, &g, p)
}

/// Forward dispatch over the head kinds.
pub fn head_forward(f: &Tensor, p: &mut HeadParams) -> Result<HeadOutput> {
    p.validate()?;
    match p.kind {
        HeadKind::Standard => standard_head(f, p),
        HeadKind::ScaledLogit => scaled_logit_head(f, p),
        HeadKind::Cosine => cosine_head(f, p),
        HeadKind::TwoFcCosine => two_fc_cosine_head(f, p),
    }
}

/// Cross-entropy of the scaled logits against the target classes.
pub fn head_loss(out: &HeadOutput, targets: &[usize]) -> Result<Tensor> {
    ops::softmax_cross_entropy(&out.scaled_logits, targets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::Mode;
    use crate::tensor::backward;

    fn identity_weight(c: usize, d: usize) -> Tensor {
        let mut w = NdArray::zeros(&[c, d]);
        for i in 0..c.min(d) {
            w.data_mut()[i * d + i] = 1.0;
        }
        Tensor::leaf(w, true)
    }

    fn neutral_scale_branch(dim: usize, mode: Mode) -> ScaleBranch {
        ScaleBranch {
            weight: Tensor::leaf(NdArray::zeros(&[1, dim]), true),
            bias: Tensor::leaf(NdArray::zeros(&[1]), true),
            bn: BatchNormState::with_params(
                Tensor::leaf(NdArray::from_vec(vec![1.0]), true),
                Tensor::leaf(NdArray::zeros(&[1]), true),
                vec![0.0],
                vec![1.0],
                0.1,
                1e-5,
                mode,
            )
            .unwrap(),
        }
    }

    fn standard_params(c: usize, d: usize) -> HeadParams {
        HeadParams {
            kind: HeadKind::Standard,
            weight: identity_weight(c, d),
            bias: Some(Tensor::leaf(NdArray::zeros(&[c]), true)),
            scale: ScaleMode::Fixed(1.0),
            embed: None,
        }
    }

    #[test]
    fn standard_head_closed_form_softmax() {
        let f = Tensor::leaf(NdArray::from_rows(&[vec![2.0, 0.0]]).unwrap(), false);
        let mut p = standard_params(2, 2);
        let out = standard_head(&f, &mut p).unwrap();
        assert!((out.probabilities.data()[0] - 0.8807970779778823).abs() < 1e-9);
        assert!((out.probabilities.data()[1] - 0.11920292202211757).abs() < 1e-9);
        assert!((out.detection_score[0] - 0.8807970779778823).abs() < 1e-9);
    }

    #[test]
    fn standard_head_zero_feature_is_uniform() {
        let f = Tensor::leaf(NdArray::from_rows(&[vec![0.0, 0.0, 0.0]]).unwrap(), false);
        let mut p = standard_params(3, 3);
        let out = standard_head(&f, &mut p).unwrap();
        for &pr in out.probabilities.data() {
            assert!((pr - 1.0 / 3.0).abs() < 1e-12);
        }
        assert!((out.detection_score[0] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn standard_head_argmax_matches_logits() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let fv: Vec<f64> = (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let f = Tensor::leaf(NdArray::from_rows(&[fv]).unwrap(), false);
            let mut p = standard_params(4, 4);
            let out = standard_head(&f, &mut p).unwrap();
            let logits = out.class_scores.to_array();
            assert_eq!(
                crate::detect::argmax(logits.data()),
                crate::detect::argmax(&out.probabilities.data()[0..4])
            );
        }
    }

    #[test]
    fn scaled_logit_head_with_neutral_scale_matches_standard() {
        let f = Tensor::leaf(
            NdArray::from_rows(&[vec![1.5, -0.5], vec![0.2, 0.9]]).unwrap(),
            false,
        );
        let mut std_p = standard_params(2, 2);
        let std_out = standard_head(&f, &mut std_p).unwrap();

        let mut sl_p = HeadParams {
            kind: HeadKind::ScaledLogit,
            weight: identity_weight(2, 2),
            bias: Some(Tensor::leaf(NdArray::zeros(&[2]), true)),
            scale: ScaleMode::Predicted(neutral_scale_branch(2, Mode::Eval)),
            embed: None,
        };
        let sl_out = scaled_logit_head(&f, &mut sl_p).unwrap();
        // w_s = 0, b_s = 0, BN in eval with (0, 1) stats: s = exp(0) = 1.
        assert!(sl_out.scale.iter().all(|&s| (s - 1.0).abs() < 1e-12));
        for (a, b) in sl_out
            .probabilities
            .data()
            .iter()
            .zip(std_out.probabilities.data())
        {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn scaled_logit_scale_is_positive_for_any_feature() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(10);
        let rows: Vec<Vec<f64>> = (0..8)
            .map(|_| (0..3).map(|_| rng.gen_range(-50.0..50.0)).collect())
            .collect();
        let f = Tensor::leaf(NdArray::from_rows(&rows).unwrap(), false);
        let mut p = HeadParams {
            kind: HeadKind::ScaledLogit,
            weight: identity_weight(3, 3),
            bias: Some(Tensor::leaf(NdArray::zeros(&[3]), true)),
            scale: ScaleMode::Predicted(neutral_scale_branch(3, Mode::Train)),
            embed: None,
        };
        let out = scaled_logit_head(&f, &mut p).unwrap();
        assert!(out.scale.iter().all(|&s| s > 0.0));
    }

    #[test]
    fn cosine_head_geometry() {
        // f parallel to w_0, orthogonal to w_1
        let f = Tensor::leaf(NdArray::from_rows(&[vec![3.0, 0.0]]).unwrap(), false);
        let mut p = HeadParams {
            kind: HeadKind::Cosine,
            weight: identity_weight(2, 2),
            bias: None,
            scale: ScaleMode::Fixed(16.0),
            embed: None,
        };
        let out = cosine_head(&f, &mut p).unwrap();
        let cos = out.class_scores.to_array();
        assert!((cos.data()[0] - 1.0).abs() < 1e-9);
        assert!(cos.data()[1].abs() < 1e-9);
        assert!((out.detection_score[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn cosine_head_invariant_under_feature_scaling() {
        let f1 = Tensor::leaf(NdArray::from_rows(&[vec![0.4, -1.2, 2.0]]).unwrap(), false);
        let f2 = Tensor::leaf(NdArray::from_rows(&[vec![0.8, -2.4, 4.0]]).unwrap(), false);
        let make = || HeadParams {
            kind: HeadKind::Cosine,
            weight: Tensor::leaf(
                NdArray::from_rows(&[vec![1.0, 2.0, 0.5], vec![-0.3, 0.7, 1.1]]).unwrap(),
                true,
            ),
            bias: None,
            scale: ScaleMode::Predicted(neutral_scale_branch(3, Mode::Eval)),
            embed: None,
        };
        let out1 = cosine_head(&f1, &mut make()).unwrap();
        let out2 = cosine_head(&f2, &mut make()).unwrap();
        for (a, b) in out1.detection_score.iter().zip(&out2.detection_score) {
            assert!((a - b).abs() < 1e-9);
        }
        // the predicted scale is allowed to change; the cosines are not
        for (a, b) in out1
            .class_scores
            .to_array()
            .data()
            .iter()
            .zip(out2.class_scores.to_array().data())
        {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn cosine_head_two_class_loss_closed_form() {
        let f = Tensor::leaf(NdArray::from_rows(&[vec![5.0, 0.0]]).unwrap(), false);
        let w = Tensor::leaf(
            NdArray::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap(),
            true,
        );
        let mut p = HeadParams {
            kind: HeadKind::Cosine,
            weight: w,
            bias: None,
            scale: ScaleMode::Fixed(1.0),
            embed: None,
        };
        let out = cosine_head(&f, &mut p).unwrap();
        let loss = head_loss(&out, &[0]).unwrap();
        assert!((loss.item() - 0.12692801104297263).abs() < 1e-9);
    }

    #[test]
    fn perfect_prediction_saturates_loss_to_zero() {
        let f = Tensor::leaf(NdArray::from_rows(&[vec![2.0, 0.0]]).unwrap(), false);
        let w = Tensor::leaf(
            NdArray::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap(),
            true,
        );
        let mut p = HeadParams {
            kind: HeadKind::Cosine,
            weight: w,
            bias: None,
            scale: ScaleMode::Fixed(64.0),
            embed: None,
        };
        let out = cosine_head(&f, &mut p).unwrap();
        let loss = head_loss(&out, &[0]).unwrap();
        assert!(loss.item() < 1e-20);
    }

    #[test]
    fn uniform_cosines_loss_is_ln_c() {
        let f = Tensor::leaf(NdArray::from_rows(&[vec![0.0, 0.0]]).unwrap(), false);
        let mut p = HeadParams {
            kind: HeadKind::Cosine,
            weight: identity_weight(4, 2),
            bias: None,
            scale: ScaleMode::Fixed(32.0),
            embed: None,
        };
        // zero feature: all cosines 0 -> uniform softmax
        let out = cosine_head(&f, &mut p).unwrap();
        let loss = head_loss(&out, &[2]).unwrap();
        assert!((loss.item() - (4.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn two_fc_identity_embed_matches_cosine_head() {
        let d = 3;
        let f = Tensor::leaf(NdArray::from_rows(&[vec![0.3, -0.8, 1.4]]).unwrap(), false);
        let class_w = NdArray::from_rows(&[vec![1.0, 0.2, -0.1], vec![0.4, -0.9, 0.7]]).unwrap();
        let mut single = HeadParams {
            kind: HeadKind::Cosine,
            weight: Tensor::leaf(class_w.clone(), true),
            bias: None,
            scale: ScaleMode::Predicted(neutral_scale_branch(d, Mode::Eval)),
            embed: None,
        };
        let mut two = HeadParams {
            kind: HeadKind::TwoFcCosine,
            weight: Tensor::leaf(class_w, true),
            bias: None,
            scale: ScaleMode::Predicted(neutral_scale_branch(d, Mode::Eval)),
            embed: Some(EmbedFc {
                weight: identity_weight(d, d),
                bias: Tensor::leaf(NdArray::zeros(&[d]), true),
            }),
        };
        let a = cosine_head(&f, &mut single).unwrap();
        let b = two_fc_cosine_head(&f, &mut two).unwrap();
        for (x, y) in a
            .class_scores
            .to_array()
            .data()
            .iter()
            .zip(b.class_scores.to_array().data())
        {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in a.detection_score.iter().zip(&b.detection_score) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn two_fc_embedding_reaches_negative_values() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        // non-negative features, as produced by a ReLU trunk
        let rows: Vec<Vec<f64>> = (0..16)
            .map(|_| (0..5).map(|_| rng.gen_range(0.0..2.0)).collect())
            .collect();
        let f = Tensor::leaf(NdArray::from_rows(&rows).unwrap(), false);
        assert!(f.values().iter().all(|&v| v >= 0.0));
        let w1: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let embed = EmbedFc {
            weight: Tensor::leaf(NdArray::from_rows(&w1).unwrap(), true),
            bias: Tensor::leaf(NdArray::zeros(&[6]), true),
        };
        let g = ops::dense_forward(&f, &embed.weight, Some(&embed.bias)).unwrap();
        assert!(
            g.values().iter().any(|&v| v < 0.0),
            "linear embedding should span negative values"
        );
        let mut p = HeadParams {
            kind: HeadKind::TwoFcCosine,
            weight: Tensor::leaf(
                NdArray::from_rows(
                    &(0..3)
                        .map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect())
                        .collect::<Vec<_>>(),
                )
                .unwrap(),
                true,
            ),
            bias: None,
            scale: ScaleMode::Predicted(neutral_scale_branch(6, Mode::Train)),
            embed: Some(embed),
        };
        let out = two_fc_cosine_head(&f, &mut p).unwrap();
        assert!(out
            .class_scores
            .to_array()
            .data()
            .iter()
            .all(|&c| (-1.0 - 1e-9..=1.0 + 1e-9).contains(&c)));
    }

    #[test]
    fn detection_score_ignores_scale_branch_parameters() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(14);
        let f = Tensor::leaf(
            NdArray::from_rows(&[vec![0.7, -0.3, 1.1], vec![0.2, 0.5, -0.9]]).unwrap(),
            false,
        );
        let w = NdArray::from_rows(&[vec![1.0, 0.4, -0.2], vec![-0.5, 0.8, 0.3]]).unwrap();
        let run = |branch: ScaleBranch| {
            let mut p = HeadParams {
                kind: HeadKind::Cosine,
                weight: Tensor::leaf(w.clone(), true),
                bias: None,
                scale: ScaleMode::Predicted(branch),
                embed: None,
            };
            cosine_head(&f, &mut p).unwrap().detection_score
        };
        let reference = run(neutral_scale_branch(3, Mode::Eval));
        for _ in 0..10 {
            let branch = ScaleBranch {
                weight: Tensor::leaf(
                    NdArray::new(vec![1, 3], (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect())
                        .unwrap(),
                    true,
                ),
                bias: Tensor::leaf(NdArray::from_vec(vec![rng.gen_range(-2.0..2.0)]), true),
                bn: BatchNormState::with_params(
                    Tensor::leaf(NdArray::from_vec(vec![rng.gen_range(0.2..2.0)]), true),
                    Tensor::leaf(NdArray::from_vec(vec![rng.gen_range(-1.0..1.0)]), true),
                    vec![rng.gen_range(-0.5..0.5)],
                    vec![rng.gen_range(0.2..2.0)],
                    0.1,
                    1e-5,
                    Mode::Eval,
                )
                .unwrap(),
            };
            let got = run(branch);
            for (a, b) in reference.iter().zip(&got) {
                assert!((a - b).abs() < 1e-12, "detection score moved with the scale branch");
            }
        }
    }

    #[test]
    fn cosine_head_rejects_bias() {
        let f = Tensor::leaf(NdArray::from_rows(&[vec![1.0, 0.0]]).unwrap(), false);
        let mut p = HeadParams {
            kind: HeadKind::Cosine,
            weight: identity_weight(2, 2),
            bias: Some(Tensor::leaf(NdArray::zeros(&[2]), true)),
            scale: ScaleMode::Fixed(1.0),
            embed: None,
        };
        assert!(matches!(
            head_forward(&f, &mut p),
            Err(Error::InvalidParams(_))
        ));
    }

    #[test]
    fn head_loss_gradients_reach_scale_branch() {
        let f = Tensor::leaf(
            NdArray::from_rows(&[vec![1.0, 0.4], vec![-0.2, 0.9]]).unwrap(),
            true,
        );
        let branch = neutral_scale_branch(2, Mode::Train);
        let w_s = branch.weight.clone();
        let w = Tensor::leaf(
            NdArray::from_rows(&[vec![1.0, 0.1], vec![0.2, -0.8]]).unwrap(),
            true,
        );
        let mut p = HeadParams {
            kind: HeadKind::Cosine,
            weight: w.clone(),
            bias: None,
            scale: ScaleMode::Predicted(branch),
            embed: None,
        };
        let out = head_forward(&f, &mut p).unwrap();
        let loss = head_loss(&out, &[0, 1]).unwrap();
        backward(&loss).unwrap();
        assert!(f.grad().is_some());
        assert!(w.grad().is_some());
        assert!(w_s.grad().is_some());
    }
}
