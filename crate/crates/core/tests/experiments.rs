//! Small end-to-end experiments backing the dataset and trainer contracts:
//! blob separability, the near-to-far OOD dial, and loss-divergence
//! reporting.

use std::collections::BTreeSet;

use cosood::data::{gen_blobs, gen_shifted_ood, BlobSpec, Split};
use cosood::detect;
use cosood::error::Error;
use cosood::heads::{HeadConfig, HeadKind, ScaleSpec};
use cosood::model::{LayerSpec, Model, ModelConfig};
use cosood::train::{train_model, TrainConfig};

fn blob_spec(seed: u64) -> BlobSpec {
    BlobSpec {
        classes: 4,
        dim: 8,
        n_per_class: 100,
        spread: 1.0,
        seed,
    }
}

/// A plain linear classifier separates the 4-class 8-D blobs almost
/// perfectly on held-out data.
#[test]
fn linear_classifier_reaches_99_percent_on_blobs() {
    let spec = blob_spec(7);
    let train = gen_blobs(&spec, Split::Train).unwrap();
    let test = gen_blobs(&spec, Split::Test).unwrap();
    let mut model = Model::new(
        ModelConfig {
            input_shape: vec![8],
            layers: vec![],
            classes: 4,
            head: HeadConfig::new(HeadKind::Standard),
        },
        0,
    )
    .unwrap();
    let cfg = TrainConfig {
        epochs: 30,
        batch_size: 32,
        weight_decay: 5e-4,
        seed: 0,
        ..TrainConfig::default()
    };
    train_model(&mut model, &train, &cfg).unwrap();
    let records = detect::score_batch(&mut model, &test).unwrap();
    let correct = records.iter().filter(|r| r.correct == Some(true)).count();
    let accuracy = correct as f64 / records.len() as f64;
    assert!(accuracy > 0.99, "test accuracy {accuracy}");
}

/// The shift parameter is a near-to-far OOD dial: AUROC grows with shift on
/// average and becomes near-perfect for large shifts.
#[test]
fn shifted_ood_auroc_is_monotone_in_shift() {
    let shifts = [2.0, 6.0, 12.0];
    let seeds = [1u64, 2, 3, 4, 5];
    let mut sums = vec![0.0; shifts.len()];
    for &seed in &seeds {
        let spec = blob_spec(7);
        let train = gen_blobs(&spec, Split::Train).unwrap();
        let test = gen_blobs(&spec, Split::Test).unwrap();
        let mut model = Model::new(
            ModelConfig {
                input_shape: vec![8],
                layers: vec![LayerSpec::BatchNorm { dim: 8 }],
                classes: 4,
                head: HeadConfig::new(HeadKind::Cosine).with_scale(ScaleSpec::Predicted),
            },
            seed,
        )
        .unwrap();
        let cfg = TrainConfig {
            epochs: 30,
            batch_size: 64,
            weight_decay: 5e-4,
            exempt_last_layer: true,
            seed,
            ..TrainConfig::default()
        };
        train_model(&mut model, &train, &cfg).unwrap();
        let id_scores: Vec<f64> = detect::score_batch(&mut model, &test)
            .unwrap()
            .iter()
            .map(|r| r.score)
            .collect();
        for (i, &shift) in shifts.iter().enumerate() {
            let ood = gen_shifted_ood(&spec, shift, 13).unwrap();
            let ood_scores: Vec<f64> = detect::score_batch(&mut model, &ood)
                .unwrap()
                .iter()
                .map(|r| r.score)
                .collect();
            sums[i] += detect::auroc(&id_scores, &ood_scores).unwrap();
        }
    }
    let means: Vec<f64> = sums.iter().map(|s| s / seeds.len() as f64).collect();
    assert!(
        means.windows(2).all(|w| w[1] >= w[0]),
        "AUROC means not monotone: {means:?}"
    );
    assert!(
        means[shifts.len() - 1] > 0.95,
        "large shift should be near-perfect, got {means:?}"
    );
}

/// On separable data the first-to-last epoch loss decreases for every head
/// variant.
#[test]
fn training_loss_decreases_for_every_head_kind() {
    let heads = [
        HeadConfig::new(HeadKind::Standard),
        HeadConfig::new(HeadKind::ScaledLogit),
        HeadConfig::new(HeadKind::Cosine).with_scale(ScaleSpec::Fixed(16.0)),
        HeadConfig::new(HeadKind::Cosine).with_scale(ScaleSpec::Predicted),
        HeadConfig::new(HeadKind::TwoFcCosine).with_embed_dim(16),
    ];
    for head in heads {
        for seed in 1..=5u64 {
            let spec = BlobSpec {
                classes: 3,
                dim: 4,
                n_per_class: 40,
                spread: 1.0,
                seed: 9,
            };
            let data = gen_blobs(&spec, Split::Train).unwrap();
            let mut model = Model::new(
                ModelConfig {
                    input_shape: vec![4],
                    layers: vec![LayerSpec::BatchNorm { dim: 4 }],
                    classes: 3,
                    head: head.clone(),
                },
                seed,
            )
            .unwrap();
            let cfg = TrainConfig {
                epochs: 10,
                batch_size: 32,
                weight_decay: 5e-4,
                seed,
                ..TrainConfig::default()
            };
            let stats = train_model(&mut model, &data, &cfg).unwrap();
            assert!(
                stats.last().unwrap().mean_loss < stats.first().unwrap().mean_loss,
                "{:?} seed {seed}: loss did not decrease ({} -> {})",
                head.kind,
                stats.first().unwrap().mean_loss,
                stats.last().unwrap().mean_loss,
            );
        }
    }
}

/// Runaway dynamics surface as a diverged-loss error, not NaN results. An
/// absurd learning rate makes the scale-branch bias explode through the
/// exponential.
#[test]
fn exploding_training_reports_divergence() {
    let spec = BlobSpec {
        classes: 2,
        dim: 2,
        n_per_class: 16,
        spread: 1.0,
        seed: 3,
    };
    let ds = gen_blobs(&spec, Split::Train).unwrap();
    let mut model = Model::new(
        ModelConfig {
            input_shape: vec![2],
            layers: vec![],
            classes: 2,
            head: HeadConfig::new(HeadKind::Cosine).with_scale(ScaleSpec::Predicted),
        },
        1,
    )
    .unwrap();
    let cfg = TrainConfig {
        epochs: 20,
        batch_size: 16,
        lr0: 1e4,
        weight_decay: 0.0,
        momentum: 0.9,
        exempt_last_layer: false,
        decay_exempt: BTreeSet::new(),
        lr_drops: vec![],
        seed: 1,
    };
    let err = train_model(&mut model, &ds, &cfg).unwrap_err();
    assert!(
        matches!(err, Error::DivergedLoss { .. }),
        "unexpected error {err:?}"
    );
}
