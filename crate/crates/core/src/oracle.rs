//! Brute-force reference implementations used only by test suites.
//!
//! These are deliberately naive and kept independent of the production code
//! paths they check: loops instead of incremental updates, O(n^2) pairwise
//! counting instead of rank statistics, explicit threshold enumeration
//! instead of a single sorted sweep.

/// Central finite-difference gradient of `f` at `x` with step `h`.
pub fn finite_difference_grad(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        grad[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Relative error with a floor that absorbs finite-difference noise.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-5)
}

/// Triple-loop matrix product oracle for the dense layer:
/// `y[n,o] = sum_j x[n,j] * w[o,j] + b[o]`.
pub fn naive_dense(
    x: &[f64],
    w: &[f64],
    b: Option<&[f64]>,
    batch: usize,
    d_in: usize,
    d_out: usize,
) -> Vec<f64> {
    let mut y = vec![0.0; batch * d_out];
    for n in 0..batch {
        for o in 0..d_out {
            let mut acc = 0.0;
            for j in 0..d_in {
                acc += x[n * d_in + j] * w[o * d_in + j];
            }
            if let Some(b) = b {
                acc += b[o];
            }
            y[n * d_out + o] = acc;
        }
    }
    y
}

/// Sliding-window cross-correlation oracle. Indexes the padded input
/// explicitly rather than bounds-checking the original.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv2d(
    x: &[f64],
    k: &[f64],
    batch: usize,
    chans: usize,
    height: usize,
    width: usize,
    out_ch: usize,
    ksize: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let ph = height + 2 * pad;
    let pw = width + 2 * pad;
    // build the zero-padded input up front
    let mut padded = vec![0.0; batch * chans * ph * pw];
    for b in 0..batch {
        for c in 0..chans {
            for h in 0..height {
                for w in 0..width {
                    padded[((b * chans + c) * ph + h + pad) * pw + w + pad] =
                        x[((b * chans + c) * height + h) * width + w];
                }
            }
        }
    }
    let out_h = (ph - ksize) / stride + 1;
    let out_w = (pw - ksize) / stride + 1;
    let mut y = vec![0.0; batch * out_ch * out_h * out_w];
    for b in 0..batch {
        for o in 0..out_ch {
            for i in 0..out_h {
                for j in 0..out_w {
                    let mut acc = 0.0;
                    for c in 0..chans {
                        for u in 0..ksize {
                            for v in 0..ksize {
                                acc += padded
                                    [((b * chans + c) * ph + i * stride + u) * pw + j * stride + v]
                                    * k[((o * chans + c) * ksize + u) * ksize + v];
                            }
                        }
                    }
                    y[((b * out_ch + o) * out_h + i) * out_w + j] = acc;
                }
            }
        }
    }
    y
}

/// O(n^2) pairwise AUROC: probability that a random in-distribution score
/// exceeds a random out-of-distribution score, ties counted 1/2.
pub fn pairwise_auroc(id_scores: &[f64], ood_scores: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &a in id_scores {
        for &b in ood_scores {
            if a > b {
                wins += 1.0;
            } else if a == b {
                wins += 0.5;
            }
        }
    }
    wins / (id_scores.len() as f64 * ood_scores.len() as f64)
}

/// AUROC by trapezoidal integration of the ROC curve over all distinct
/// thresholds (ties grouped, which reproduces the 1/2 convention).
pub fn trapezoid_auroc(id_scores: &[f64], ood_scores: &[f64]) -> f64 {
    let mut thresholds: Vec<f64> = id_scores.iter().chain(ood_scores).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let n_id = id_scores.len() as f64;
    let n_ood = ood_scores.len() as f64;
    // walk thresholds from high to low; at each, count scores >= threshold
    let mut points = vec![(0.0, 0.0)];
    for &t in thresholds.iter().rev() {
        let tpr = id_scores.iter().filter(|&&s| s >= t).count() as f64 / n_id;
        let fpr = ood_scores.iter().filter(|&&s| s >= t).count() as f64 / n_ood;
        points.push((fpr, tpr));
    }
    points.push((1.0, 1.0));
    let mut area = 0.0;
    for w in points.windows(2) {
        let (x0, y0) = w[0];
        let (x1, y1) = w[1];
        area += (x1 - x0) * (y0 + y1) / 2.0;
    }
    area
}

/// Area under precision-recall by explicit enumeration of every distinct
/// threshold, recomputing TP/FP from scratch at each (non-interpolated
/// step sum over recall increments).
pub fn all_thresholds_aupr(pos_scores: &[f64], neg_scores: &[f64]) -> f64 {
    let mut thresholds: Vec<f64> = pos_scores.iter().chain(neg_scores).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.reverse();
    let n_pos = pos_scores.len() as f64;
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for &t in &thresholds {
        let tp = pos_scores.iter().filter(|&&s| s >= t).count() as f64;
        let fp = neg_scores.iter().filter(|&&s| s >= t).count() as f64;
        if tp + fp == 0.0 {
            continue;
        }
        let recall = tp / n_pos;
        let precision = tp / (tp + fp);
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    area
}
