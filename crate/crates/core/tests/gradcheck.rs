//! Central finite-difference checks for every differentiable op and for the
//! full output heads, including the scale-prediction branch.
//!
//! Each check builds the same scalar loss twice: once through the graph
//! (reading gradients accumulated by `backward`) and once numerically by
//! perturbing one input coordinate at a time. A fixed random projection
//! turns multi-output ops into scalars so that every output element carries
//! gradient signal.

use cosood::heads::{self, EmbedFc, HeadKind, HeadParams, ScaleBranch, ScaleMode};
use cosood::oracle::finite_difference_grad;
use cosood::ops::{self, BatchNormState, Mode};
use cosood::tensor::{backward, NdArray, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;
const TOL: f64 = 1e-4;
const SEEDS: u64 = 10;

fn rand_array(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> NdArray {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    NdArray::new(shape.to_vec(), data).unwrap()
}

/// Random values bounded away from zero, for ops with a kink at the origin.
fn rand_array_off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> NdArray {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            sign * rng.gen_range(0.1..2.0)
        })
        .collect();
    NdArray::new(shape.to_vec(), data).unwrap()
}

/// Check d(build(leaves))/d(leaf_i) for every input against central
/// differences. The error floor scales with the loss magnitude: central
/// differences carry cancellation noise ~ eps * |loss| / (2h), so smaller
/// coordinates cannot be certified any tighter.
fn check_gradients(name: &str, inputs: &[NdArray], build: &dyn Fn(&[Tensor]) -> Tensor) {
    let leaves: Vec<Tensor> = inputs
        .iter()
        .map(|a| Tensor::leaf(a.clone(), true))
        .collect();
    let loss = build(&leaves);
    backward(&loss).unwrap();
    let floor = 1e-5f64.max(1e-5 * loss.item().abs());
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.len()]))
        .collect();

    for (k, init) in inputs.iter().enumerate() {
        let mut f = |x: &[f64]| {
            let probe: Vec<Tensor> = inputs
                .iter()
                .enumerate()
                .map(|(i, a)| {
                    let arr = if i == k {
                        NdArray::new(a.shape().to_vec(), x.to_vec()).unwrap()
                    } else {
                        a.clone()
                    };
                    Tensor::leaf(arr, false)
                })
                .collect();
            build(&probe).item()
        };
        let fd = finite_difference_grad(&mut f, init.data(), H);
        for (j, (&a, &n)) in analytic[k].iter().zip(&fd).enumerate() {
            let err = (a - n).abs() / a.abs().max(n.abs()).max(floor);
            assert!(
                err < TOL,
                "{name}: input {k} coord {j}: analytic {a} vs fd {n} (rel err {err:.2e})"
            );
        }
    }
}

#[test]
fn dense_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_array(&mut rng, &[3, 5], -1.0, 1.0);
        let w = rand_array(&mut rng, &[4, 5], -1.0, 1.0);
        let b = rand_array(&mut rng, &[4], -0.5, 0.5);
        let mut proj_rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        let proj = rand_array(&mut proj_rng, &[3, 4], -1.0, 1.0);
        check_gradients("dense", &[x, w, b], &|l| {
            let out = ops::dense_forward(&l[0], &l[1], Some(&l[2])).unwrap();
            ops::sum(&ops::mul_elem(&out, &Tensor::constant(proj.clone())).unwrap())
        });
    }
}

#[test]
fn conv2d_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_array(&mut rng, &[2, 2, 5, 5], -1.0, 1.0);
        let k = rand_array(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
        let proj = rand_array(&mut rng, &[2, 3, 3, 3], -1.0, 1.0);
        check_gradients("conv2d stride 2 pad 1", &[x, k], &|l| {
            let out = ops::conv2d_forward(&l[0], &l[1], 2, 1).unwrap();
            ops::sum(&ops::mul_elem(&out, &Tensor::constant(proj.clone())).unwrap())
        });
    }
}

#[test]
fn relu_gradients_away_from_kink() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_array_off_zero(&mut rng, &[4, 6]);
        let proj = rand_array(&mut rng, &[4, 6], -1.0, 1.0);
        check_gradients("relu", &[x], &|l| {
            ops::sum(&ops::mul_elem(&ops::relu(&l[0]), &Tensor::constant(proj.clone())).unwrap())
        });
    }
}

#[test]
fn batchnorm_train_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_array(&mut rng, &[4, 3], -2.0, 2.0);
        let gamma = rand_array(&mut rng, &[3], 0.5, 1.5);
        let beta = rand_array(&mut rng, &[3], -0.5, 0.5);
        let proj = rand_array(&mut rng, &[4, 3], -1.0, 1.0);
        check_gradients("batchnorm train", &[x, gamma, beta], &|l| {
            let mut st = BatchNormState::with_params(
                l[1].clone(),
                l[2].clone(),
                vec![0.0; 3],
                vec![1.0; 3],
                0.1,
                1e-5,
                Mode::Train,
            )
            .unwrap();
            let out = ops::batchnorm_forward(&l[0], &mut st).unwrap();
            ops::sum(&ops::mul_elem(&out, &Tensor::constant(proj.clone())).unwrap())
        });
    }
}

#[test]
fn batchnorm_eval_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_array(&mut rng, &[3, 2], -2.0, 2.0);
        let gamma = rand_array(&mut rng, &[2], 0.5, 1.5);
        let beta = rand_array(&mut rng, &[2], -0.5, 0.5);
        let proj = rand_array(&mut rng, &[3, 2], -1.0, 1.0);
        let running_mean = vec![0.3, -0.2];
        let running_var = vec![1.4, 0.6];
        check_gradients("batchnorm eval", &[x, gamma, beta], &|l| {
            let mut st = BatchNormState::with_params(
                l[1].clone(),
                l[2].clone(),
                running_mean.clone(),
                running_var.clone(),
                0.1,
                1e-5,
                Mode::Eval,
            )
            .unwrap();
            let out = ops::batchnorm_forward(&l[0], &mut st).unwrap();
            ops::sum(&ops::mul_elem(&out, &Tensor::constant(proj.clone())).unwrap())
        });
    }
}

#[test]
fn global_avg_pool_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_array(&mut rng, &[2, 3, 4, 4], -1.0, 1.0);
        let proj = rand_array(&mut rng, &[2, 3], -1.0, 1.0);
        check_gradients("global_avg_pool", &[x], &|l| {
            let out = ops::global_avg_pool(&l[0]).unwrap();
            ops::sum(&ops::mul_elem(&out, &Tensor::constant(proj.clone())).unwrap())
        });
    }
}

#[test]
fn l2_normalize_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = rand_array_off_zero(&mut rng, &[3, 4]);
        let proj = rand_array(&mut rng, &[3, 4], -1.0, 1.0);
        check_gradients("l2_normalize", &[v], &|l| {
            let out = ops::l2_normalize(&l[0], ops::L2_EPSILON);
            ops::sum(&ops::mul_elem(&out, &Tensor::constant(proj.clone())).unwrap())
        });
    }
}

#[test]
fn softmax_cross_entropy_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = rand_array(&mut rng, &[5, 4], -2.0, 2.0);
        let targets: Vec<usize> = (0..5).map(|_| rng.gen_range(0..4)).collect();
        check_gradients("softmax_cross_entropy", &[logits], &|l| {
            ops::softmax_cross_entropy(&l[0], &targets).unwrap()
        });
    }
}

#[test]
fn exp_row_scale_and_mul_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_array(&mut rng, &[3, 4], -1.0, 1.0);
        let s = rand_array(&mut rng, &[3, 1], 0.2, 2.0);
        let proj = rand_array(&mut rng, &[3, 4], -1.0, 1.0);
        check_gradients("exp + row_scale", &[x, s], &|l| {
            let scaled = ops::row_scale(&ops::exp(&l[0]), &l[1]).unwrap();
            ops::sum(&ops::mul_elem(&scaled, &Tensor::constant(proj.clone())).unwrap())
        });
    }
}

/// dense -> relu -> cross-entropy composite, the classic end-to-end check.
#[test]
fn composite_dense_relu_ce_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_array(&mut rng, &[4, 5], -1.0, 1.0);
        let w1 = rand_array(&mut rng, &[6, 5], -0.8, 0.8);
        let b1 = rand_array(&mut rng, &[6], -0.3, 0.3);
        let w2 = rand_array(&mut rng, &[3, 6], -0.8, 0.8);
        let b2 = rand_array(&mut rng, &[3], -0.3, 0.3);
        let targets: Vec<usize> = (0..4).map(|_| rng.gen_range(0..3)).collect();
        check_gradients("dense-relu-dense-ce", &[x, w1, b1, w2, b2], &|l| {
            let h = ops::relu(&ops::dense_forward(&l[0], &l[1], Some(&l[2])).unwrap());
            let logits = ops::dense_forward(&h, &l[3], Some(&l[4])).unwrap();
            ops::softmax_cross_entropy(&logits, &targets).unwrap()
        });
    }
}

fn head_inputs(rng: &mut ChaCha8Rng, batch: usize, dim: usize, classes: usize) -> Vec<NdArray> {
    vec![
        rand_array_off_zero(rng, &[batch, dim]),     // f
        rand_array_off_zero(rng, &[classes, dim]),   // W
        rand_array(rng, &[1, dim], -0.5, 0.5),       // w_s
        rand_array(rng, &[1], -0.2, 0.2),            // b_s
        rand_array(rng, &[1], 0.5, 1.5),             // bn gamma
        rand_array(rng, &[1], -0.3, 0.3),            // bn beta
    ]
}

fn predicted_branch(l: &[Tensor], mode: Mode) -> ScaleBranch {
    ScaleBranch {
        weight: l[2].clone(),
        bias: l[3].clone(),
        bn: BatchNormState::with_params(
            l[4].clone(),
            l[5].clone(),
            vec![0.1],
            vec![0.9],
            0.1,
            1e-5,
            mode,
        )
        .unwrap(),
    }
}

/// Full cosine head with the predicted-scale branch, BN in Train mode:
/// gradients reach f, W, w_s, b_s, and the BN affine parameters.
#[test]
fn cosine_head_predicted_scale_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = head_inputs(&mut rng, 4, 5, 3);
        let targets: Vec<usize> = (0..4).map(|_| rng.gen_range(0..3)).collect();
        for mode in [Mode::Train, Mode::Eval] {
            check_gradients("cosine head (predicted scale)", &inputs, &|l| {
                let mut p = HeadParams {
                    kind: HeadKind::Cosine,
                    weight: l[1].clone(),
                    bias: None,
                    scale: ScaleMode::Predicted(predicted_branch(l, mode)),
                    embed: None,
                };
                let out = heads::head_forward(&l[0], &mut p).unwrap();
                heads::head_loss(&out, &targets).unwrap()
            });
        }
    }
}

#[test]
fn cosine_head_fixed_scale_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = rand_array_off_zero(&mut rng, &[3, 4]);
        let w = rand_array_off_zero(&mut rng, &[4, 4]);
        let targets: Vec<usize> = (0..3).map(|_| rng.gen_range(0..4)).collect();
        check_gradients("cosine head (fixed scale 16)", &[f, w], &|l| {
            let mut p = HeadParams {
                kind: HeadKind::Cosine,
                weight: l[1].clone(),
                bias: None,
                scale: ScaleMode::Fixed(16.0),
                embed: None,
            };
            let out = heads::head_forward(&l[0], &mut p).unwrap();
            heads::head_loss(&out, &targets).unwrap()
        });
    }
}

#[test]
fn standard_head_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = rand_array(&mut rng, &[4, 5], -1.0, 1.0);
        let w = rand_array(&mut rng, &[3, 5], -0.8, 0.8);
        let b = rand_array(&mut rng, &[3], -0.3, 0.3);
        let targets: Vec<usize> = (0..4).map(|_| rng.gen_range(0..3)).collect();
        check_gradients("standard head", &[f, w, b], &|l| {
            let mut p = HeadParams {
                kind: HeadKind::Standard,
                weight: l[1].clone(),
                bias: Some(l[2].clone()),
                scale: ScaleMode::Fixed(1.0),
                embed: None,
            };
            let out = heads::head_forward(&l[0], &mut p).unwrap();
            heads::head_loss(&out, &targets).unwrap()
        });
    }
}

#[test]
fn scaled_logit_head_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut inputs = head_inputs(&mut rng, 4, 5, 3);
        inputs.push(rand_array(&mut rng, &[3], -0.3, 0.3)); // class bias
        let targets: Vec<usize> = (0..4).map(|_| rng.gen_range(0..3)).collect();
        check_gradients("scaled-logit head", &inputs, &|l| {
            let mut p = HeadParams {
                kind: HeadKind::ScaledLogit,
                weight: l[1].clone(),
                bias: Some(l[6].clone()),
                scale: ScaleMode::Predicted(predicted_branch(l, Mode::Train)),
                embed: None,
            };
            let out = heads::head_forward(&l[0], &mut p).unwrap();
            heads::head_loss(&out, &targets).unwrap()
        });
    }
}

#[test]
fn two_fc_cosine_head_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embed_dim = 6;
        let dim = 4;
        let classes = 3;
        // scale branch operates on the embedded feature g
        let inputs = vec![
            rand_array_off_zero(&mut rng, &[4, dim]),          // f
            rand_array_off_zero(&mut rng, &[classes, embed_dim]), // W over g
            rand_array(&mut rng, &[1, embed_dim], -0.5, 0.5),  // w_s
            rand_array(&mut rng, &[1], -0.2, 0.2),             // b_s
            rand_array(&mut rng, &[1], 0.5, 1.5),              // bn gamma
            rand_array(&mut rng, &[1], -0.3, 0.3),             // bn beta
            rand_array(&mut rng, &[embed_dim, dim], -0.8, 0.8), // W1
            rand_array(&mut rng, &[embed_dim], -0.3, 0.3),     // b1
        ];
        let targets: Vec<usize> = (0..4).map(|_| rng.gen_range(0..classes)).collect();
        check_gradients("two-FC cosine head", &inputs, &|l| {
            let mut p = HeadParams {
                kind: HeadKind::TwoFcCosine,
                weight: l[1].clone(),
                bias: None,
                scale: ScaleMode::Predicted(predicted_branch(l, Mode::Train)),
                embed: Some(EmbedFc {
                    weight: l[6].clone(),
                    bias: l[7].clone(),
                }),
            };
            let out = heads::head_forward(&l[0], &mut p).unwrap();
            heads::head_loss(&out, &targets).unwrap()
        });
    }
}

/// Random dense/conv instances against the naive loop oracles.
#[test]
fn dense_and_conv_match_naive_oracles() {
    use cosood::oracle::{naive_conv2d, naive_dense};
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_array(&mut rng, &[4, 5], -2.0, 2.0);
        let w = rand_array(&mut rng, &[3, 5], -2.0, 2.0);
        let b = rand_array(&mut rng, &[3], -1.0, 1.0);
        let got = ops::dense_forward(
            &Tensor::constant(x.clone()),
            &Tensor::constant(w.clone()),
            Some(&Tensor::constant(b.clone())),
        )
        .unwrap()
        .values();
        let want = naive_dense(x.data(), w.data(), Some(b.data()), 4, 5, 3);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }

        let xc = rand_array(&mut rng, &[2, 2, 5, 5], -2.0, 2.0);
        let k = rand_array(&mut rng, &[3, 2, 3, 3], -2.0, 2.0);
        for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
            if (5 + 2 * pad - 3) % stride != 0 {
                continue;
            }
            let got = ops::conv2d_forward(
                &Tensor::constant(xc.clone()),
                &Tensor::constant(k.clone()),
                stride,
                pad,
            )
            .unwrap()
            .values();
            let want = naive_conv2d(xc.data(), k.data(), 2, 2, 5, 5, 3, 3, stride, pad);
            assert_eq!(got.len(), want.len());
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
