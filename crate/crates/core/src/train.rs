//! SGD training with the step-wise learning-rate schedule and selective
//! weight decay.
//!
//! The learning rate starts at `lr0` and is divided by 10 at the configured
//! fractions of the total step count (50% and 75% by default). Weight decay
//! is coupled L2 (added to the gradient); parameters whose identifiers are in
//! the exemption set see no decay at all. When the no-weight-decay rule is
//! requested and the head is a cosine head, the exemption set automatically
//! covers the class-weight matrix and the whole scale branch, whose weight
//! norms do not affect the loss once normalized.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::heads::HeadConfig;
use crate::model::{self, Model, ParamStore};
use crate::ops::Mode;
use crate::rng;
use crate::tensor;

fn default_lr0() -> f64 {
    0.1
}

fn default_lr_drops() -> Vec<f64> {
    vec![0.5, 0.75]
}

fn default_momentum() -> f64 {
    0.9
}

fn default_batch_size() -> usize {
    128
}

fn default_epochs() -> usize {
    50
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Initial learning rate.
    #[serde(default = "default_lr0")]
    pub lr0: f64,
    /// Fractions of the training steps at which the rate is divided by 10.
    #[serde(default = "default_lr_drops")]
    pub lr_drops: Vec<f64>,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    /// Apply the no-weight-decay rule to the (cosine) output layer.
    #[serde(default)]
    pub exempt_last_layer: bool,
    /// Additional parameter identifiers excluded from weight decay.
    #[serde(default)]
    pub decay_exempt: BTreeSet<String>,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            lr0: default_lr0(),
            lr_drops: default_lr_drops(),
            weight_decay: 0.0,
            momentum: default_momentum(),
            exempt_last_layer: false,
            decay_exempt: BTreeSet::new(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr0.is_nan() || self.lr0 <= 0.0 {
            return Err(Error::InvalidParams(format!("lr0 must be > 0, got {}", self.lr0)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::InvalidParams("weight_decay must be >= 0".into()));
        }
        if self.lr_drops.iter().any(|&d| !(0.0 < d && d < 1.0)) {
            return Err(Error::InvalidParams(
                "lr_drops must be fractions in (0, 1)".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidParams("momentum must be in [0, 1)".into()));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidParams("epochs must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidParams(
                "batch_size must be >= 2 (batch norm needs at least 2 samples)".into(),
            ));
        }
        Ok(())
    }
}

/// Learning rate at `step` (0-based) out of `total_steps`: `lr0 / 10^k` where
/// `k` counts the drop fractions already passed.
pub fn learning_rate(cfg: &TrainConfig, step: usize, total_steps: usize) -> f64 {
    let passed = cfg
        .lr_drops
        .iter()
        .filter(|&&frac| step as f64 >= frac * total_steps as f64)
        .count();
    cfg.lr0 / 10f64.powi(passed as i32)
}

/// The full weight-decay exemption set for a head: the explicit identifiers
/// plus, when requested and the head is cosine, its last-layer parameters.
pub fn resolve_decay_exempt(cfg: &TrainConfig, head: &HeadConfig) -> BTreeSet<String> {
    let mut exempt = cfg.decay_exempt.clone();
    if cfg.exempt_last_layer && head.kind.is_cosine() {
        exempt.extend(model::last_layer_param_names(head));
    }
    exempt
}

/// One SGD update: `v <- momentum*v + g + wd*p; p <- p - lr(step)*v`, with
/// `wd = 0` for exempt parameters.
pub fn sgd_step(
    params: &mut ParamStore,
    cfg: &TrainConfig,
    exempt: &BTreeSet<String>,
    step: usize,
    total_steps: usize,
) -> Result<()> {
    let lr = learning_rate(cfg, step, total_steps);
    for p in params.iter_mut() {
        if !p.grad.all_finite() {
            return Err(Error::NonFiniteGradient(p.name.clone()));
        }
        let wd = if exempt.contains(&p.name) {
            0.0
        } else {
            cfg.weight_decay
        };
        let value = p.value.data_mut();
        let grad = p.grad.data();
        let vel = p.velocity.data_mut();
        for i in 0..value.len() {
            vel[i] = cfg.momentum * vel[i] + grad[i] + wd * value[i];
            value[i] -= lr * vel[i];
        }
    }
    Ok(())
}

/// Per-epoch training statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub accuracy: f64,
}

fn validate_dataset(model: &Model, data: &Dataset) -> Result<()> {
    let Some(_) = data.labels() else {
        return Err(Error::EmptyDataset("training data must carry labels".into()));
    };
    if data.classes() != model.classes() {
        return Err(Error::ShapeMismatch {
            op: "train_model",
            detail: format!(
                "dataset has {} classes, model expects {}",
                data.classes(),
                model.classes()
            ),
        });
    }
    if data.feature_shape() != model.config().input_shape {
        return Err(Error::ShapeMismatch {
            op: "train_model",
            detail: format!(
                "dataset feature shape {:?} does not match model input {:?}",
                data.feature_shape(),
                model.config().input_shape
            ),
        });
    }
    let counts = data.class_counts();
    if counts.len() < 2 || counts.contains(&0) {
        return Err(Error::EmptyDataset(format!(
            "need >= 2 classes with >= 1 sample each, got counts {counts:?}"
        )));
    }
    Ok(())
}

/// Train `model` in place. Deterministic given `cfg.seed` (which drives both
/// the per-epoch shuffles and, by convention, the caller's parameter init).
pub fn train_model(model: &mut Model, data: &Dataset, cfg: &TrainConfig) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    validate_dataset(model, data)?;
    let exempt = resolve_decay_exempt(cfg, &model.config().head);

    let n = data.len();
    // Size-1 remainders cannot be batch-normalized and are dropped.
    let remainder = n % cfg.batch_size;
    let batches_per_epoch = n / cfg.batch_size + usize::from(remainder >= 2);
    if remainder == 1 {
        log::warn!(
            "dropping a final partial batch of size 1 each epoch ({} samples, batch size {})",
            n,
            cfg.batch_size
        );
    }
    if batches_per_epoch == 0 {
        return Err(Error::EmptyDataset(format!(
            "no usable batch: {} samples with batch size {}",
            n, cfg.batch_size
        )));
    }
    let total_steps = cfg.epochs * batches_per_epoch;

    let mut shuffle_rng = rng::stream(cfg.seed, "shuffle");
    let mut indices: Vec<usize> = (0..n).collect();
    let mut stats = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        use rand::seq::SliceRandom;
        indices.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut seen = 0usize;
        for chunk in indices.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let (bx, by) = data.batch(chunk);
            let targets = by.expect("validated: labels present");
            let pass = model.forward(&bx, Mode::Train)?;
            let loss = crate::heads::head_loss(&pass.output, &targets)?;
            let loss_value = loss.item();
            if !loss_value.is_finite() {
                return Err(Error::DivergedLoss { epoch, step });
            }
            tensor::backward(&loss)?;
            model.absorb_grads(&pass);
            {
                let params = model.params_mut();
                sgd_step(params, cfg, &exempt, step, total_steps)?;
                params.zero_grads();
            }
            step += 1;

            loss_sum += loss_value * chunk.len() as f64;
            seen += chunk.len();
            for (pred, &t) in pass.output.predicted_classes().iter().zip(&targets) {
                if *pred == t {
                    correct += 1;
                }
            }
        }
        stats.push(EpochStats {
            epoch,
            mean_loss: loss_sum / seen as f64,
            accuracy: correct as f64 / seen as f64,
        });
    }
    Ok(stats)
}
