//! Differentiable layer operations: dense, 2-D convolution, ReLU, batch
//! normalization, global average pooling, L2 normalization, softmax
//! cross-entropy, and the small element-wise helpers the output heads need.
//!
//! Every op validates shapes eagerly and registers its backward rule on the
//! output tensor; gradients are produced by [`crate::tensor::backward`].

use crate::error::{Error, Result};
use crate::tensor::{Element, NdArray, Tensor};

/// Whether batch statistics (Train) or running statistics (Eval) drive
/// batch normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn check_finite<E: Element>(op: &'static str, t: &Tensor<E>) -> Result<()> {
    if t.values_ref().iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteInput { op })
    }
}

fn shape_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(Error::ShapeMismatch {
        op,
        detail: detail.into(),
    })
}

/// `y[n,o] = sum_j w[o,j] * x[n,j] (+ b[o])` for `x: [B,D_in]`, `w: [D_out,D_in]`.
pub fn dense_forward<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    b: Option<&Tensor<E>>,
) -> Result<Tensor<E>> {
    let xs = x.shape();
    let ws = w.shape();
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
        return shape_err(
            "dense_forward",
            format!("x {:?} incompatible with w {:?}", xs, ws),
        );
    }
    let (batch, d_in, d_out) = (xs[0], xs[1], ws[0]);
    if let Some(b) = b {
        if b.shape() != vec![d_out] {
            return shape_err(
                "dense_forward",
                format!("bias {:?} incompatible with w {:?}", b.shape(), ws),
            );
        }
        check_finite("dense_forward", b)?;
    }
    check_finite("dense_forward", x)?;
    check_finite("dense_forward", w)?;

    let mut out = vec![E::ZERO; batch * d_out];
    {
        let xv = x.values_ref();
        let wv = w.values_ref();
        for n in 0..batch {
            for o in 0..d_out {
                let mut acc = E::ZERO;
                for j in 0..d_in {
                    acc += xv[n * d_in + j] * wv[o * d_in + j];
                }
                out[n * d_out + o] = acc;
            }
        }
        if let Some(b) = b {
            let bv = b.values_ref();
            for n in 0..batch {
                for o in 0..d_out {
                    out[n * d_out + o] += bv[o];
                }
            }
        }
    }

    let xc = x.clone();
    let wc = w.clone();
    let bc = b.cloned();
    let mut parents = vec![x.clone(), w.clone()];
    if let Some(b) = b {
        parents.push(b.clone());
    }
    Ok(Tensor::from_op(
        vec![batch, d_out],
        out,
        parents,
        Box::new(move |_, g, sink| {
            if xc.requires_grad() {
                let wv = wc.values_ref();
                let dx = sink.buf(&xc);
                for n in 0..batch {
                    for o in 0..d_out {
                        let gv = g[n * d_out + o];
                        for j in 0..d_in {
                            dx[n * d_in + j] += gv * wv[o * d_in + j];
                        }
                    }
                }
            }
            if wc.requires_grad() {
                let xv = xc.values_ref();
                let dw = sink.buf(&wc);
                for n in 0..batch {
                    for o in 0..d_out {
                        let gv = g[n * d_out + o];
                        for j in 0..d_in {
                            dw[o * d_in + j] += gv * xv[n * d_in + j];
                        }
                    }
                }
            }
            if let Some(bc) = &bc {
                if bc.requires_grad() {
                    let db = sink.buf(bc);
                    for n in 0..batch {
                        for o in 0..d_out {
                            db[o] += g[n * d_out + o];
                        }
                    }
                }
            }
        }),
    ))
}

/// Direct cross-correlation of `x: [B,C,H,W]` with kernels `k: [O,C,k,k]`.
pub fn conv2d_forward<E: Element>(
    x: &Tensor<E>,
    kernel: &Tensor<E>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<E>> {
    let xs = x.shape();
    let ks = kernel.shape();
    if xs.len() != 4 || ks.len() != 4 {
        return shape_err(
            "conv2d_forward",
            format!("need 4-d input and kernel, got {:?} and {:?}", xs, ks),
        );
    }
    let (batch, chans, height, width) = (xs[0], xs[1], xs[2], xs[3]);
    let (out_ch, kc, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
    if kc != chans {
        return shape_err(
            "conv2d_forward",
            format!("kernel channels {} != input channels {}", kc, chans),
        );
    }
    if kh != kw || kh % 2 == 0 {
        return Err(Error::InvalidGeometry(format!(
            "kernel must be square with odd size, got {}x{}",
            kh, kw
        )));
    }
    let ksize = kh;
    if stride == 0 {
        return Err(Error::InvalidGeometry("stride must be >= 1".into()));
    }
    if height == 0 || width == 0 {
        return Err(Error::InvalidGeometry("input must be at least 1x1".into()));
    }
    let span_h = (height + 2 * pad).checked_sub(ksize);
    let span_w = (width + 2 * pad).checked_sub(ksize);
    let (Some(span_h), Some(span_w)) = (span_h, span_w) else {
        return Err(Error::InvalidGeometry(format!(
            "kernel {} larger than padded input {}x{}",
            ksize,
            height + 2 * pad,
            width + 2 * pad
        )));
    };
    if span_h % stride != 0 || span_w % stride != 0 {
        return Err(Error::InvalidGeometry(format!(
            "output extent not integral: ({}+2*{}-{}) not divisible by stride {}",
            height, pad, ksize, stride
        )));
    }
    let out_h = span_h / stride + 1;
    let out_w = span_w / stride + 1;
    check_finite("conv2d_forward", x)?;
    check_finite("conv2d_forward", kernel)?;

    let mut out = vec![E::ZERO; batch * out_ch * out_h * out_w];
    {
        let xv = x.values_ref();
        let kv = kernel.values_ref();
        for b in 0..batch {
            for o in 0..out_ch {
                for i in 0..out_h {
                    for j in 0..out_w {
                        let mut acc = E::ZERO;
                        for c in 0..chans {
                            for u in 0..ksize {
                                let h = (i * stride + u) as isize - pad as isize;
                                if h < 0 || h >= height as isize {
                                    continue;
                                }
                                for v in 0..ksize {
                                    let w = (j * stride + v) as isize - pad as isize;
                                    if w < 0 || w >= width as isize {
                                        continue;
                                    }
                                    acc += xv[((b * chans + c) * height + h as usize) * width
                                        + w as usize]
                                        * kv[((o * chans + c) * ksize + u) * ksize + v];
                                }
                            }
                        }
                        out[((b * out_ch + o) * out_h + i) * out_w + j] = acc;
                    }
                }
            }
        }
    }

    let xc = x.clone();
    let kc = kernel.clone();
    Ok(Tensor::from_op(
        vec![batch, out_ch, out_h, out_w],
        out,
        vec![x.clone(), kernel.clone()],
        Box::new(move |_, g, sink| {
            let need_dx = xc.requires_grad();
            let need_dk = kc.requires_grad();
            // dx and dk walk the same receptive fields as the forward pass.
            if need_dx {
                let kv = kc.values_ref();
                let dx = sink.buf(&xc);
                for b in 0..batch {
                    for o in 0..out_ch {
                        for i in 0..out_h {
                            for j in 0..out_w {
                                let gv = g[((b * out_ch + o) * out_h + i) * out_w + j];
                                for c in 0..chans {
                                    for u in 0..ksize {
                                        let h = (i * stride + u) as isize - pad as isize;
                                        if h < 0 || h >= height as isize {
                                            continue;
                                        }
                                        for v in 0..ksize {
                                            let w = (j * stride + v) as isize - pad as isize;
                                            if w < 0 || w >= width as isize {
                                                continue;
                                            }
                                            dx[((b * chans + c) * height + h as usize) * width
                                                + w as usize] +=
                                                gv * kv[((o * chans + c) * ksize + u) * ksize + v];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            if need_dk {
                let xv = xc.values_ref();
                let dk = sink.buf(&kc);
                for b in 0..batch {
                    for o in 0..out_ch {
                        for i in 0..out_h {
                            for j in 0..out_w {
                                let gv = g[((b * out_ch + o) * out_h + i) * out_w + j];
                                for c in 0..chans {
                                    for u in 0..ksize {
                                        let h = (i * stride + u) as isize - pad as isize;
                                        if h < 0 || h >= height as isize {
                                            continue;
                                        }
                                        for v in 0..ksize {
                                            let w = (j * stride + v) as isize - pad as isize;
                                            if w < 0 || w >= width as isize {
                                                continue;
                                            }
                                            dk[((o * chans + c) * ksize + u) * ksize + v] += gv
                                                * xv[((b * chans + c) * height + h as usize)
                                                    * width
                                                    + w as usize];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }),
    ))
}

/// Elementwise `max(0, x)`; the subgradient at 0 is 0.
pub fn relu<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    let out: Vec<E> = x.values_ref().iter().map(|&v| v.maximum(E::ZERO)).collect();
    let xc = x.clone();
    Tensor::from_op(
        x.shape(),
        out,
        vec![x.clone()],
        Box::new(move |_, g, sink| {
            if xc.requires_grad() {
                let xv = xc.values_ref();
                let dx = sink.buf(&xc);
                for i in 0..g.len() {
                    if xv[i] > E::ZERO {
                        dx[i] += g[i];
                    }
                }
            }
        }),
    )
}

/// Per-feature batch normalization state: learnable affine parameters plus
/// running statistics used in Eval mode.
pub struct BatchNormState<E: Element = f64> {
    pub gamma: Tensor<E>,
    pub beta: Tensor<E>,
    pub running_mean: Vec<E>,
    pub running_var: Vec<E>,
    pub momentum: E,
    pub epsilon: E,
    pub mode: Mode,
}

impl<E: Element> BatchNormState<E> {
    /// Fresh state: gamma 1, beta 0, running mean 0, running variance 1.
    pub fn new(dim: usize, momentum: E, epsilon: E) -> Result<Self> {
        Self::with_params(
            Tensor::leaf(NdArray::full(&[dim], E::ONE), true),
            Tensor::leaf(NdArray::zeros(&[dim]), true),
            vec![E::ZERO; dim],
            vec![E::ONE; dim],
            momentum,
            epsilon,
            Mode::Train,
        )
    }

    pub fn with_params(
        gamma: Tensor<E>,
        beta: Tensor<E>,
        running_mean: Vec<E>,
        running_var: Vec<E>,
        momentum: E,
        epsilon: E,
        mode: Mode,
    ) -> Result<Self> {
        let dim = gamma.len();
        if beta.len() != dim || running_mean.len() != dim || running_var.len() != dim {
            return shape_err(
                "batchnorm",
                format!("parameter lengths disagree (gamma has {})", dim),
            );
        }
        if !epsilon.is_finite() || epsilon <= E::ZERO {
            return Err(Error::InvalidParams("batchnorm epsilon must be > 0".into()));
        }
        if !momentum.is_finite() || momentum <= E::ZERO || momentum >= E::ONE {
            return Err(Error::InvalidParams(
                "batchnorm momentum must be in (0, 1)".into(),
            ));
        }
        if running_var.iter().any(|&v| v < E::ZERO) {
            return Err(Error::InvalidParams(
                "batchnorm running variance must be >= 0".into(),
            ));
        }
        Ok(Self {
            gamma,
            beta,
            running_mean,
            running_var,
            momentum,
            epsilon,
            mode,
        })
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }
}

/// Batch normalization over `x: [B,D]`.
///
/// Train mode normalizes with biased batch statistics and folds them into the
/// running statistics as `running <- (1-momentum)*running + momentum*batch`;
/// Eval mode normalizes with the stored running statistics.
pub fn batchnorm_forward<E: Element>(
    x: &Tensor<E>,
    st: &mut BatchNormState<E>,
) -> Result<Tensor<E>> {
    let xs = x.shape();
    if xs.len() != 2 || xs[1] != st.dim() {
        return shape_err(
            "batchnorm_forward",
            format!("x {:?} incompatible with {} features", xs, st.dim()),
        );
    }
    let (batch, dim) = (xs[0], xs[1]);
    if batch == 0 {
        return shape_err("batchnorm_forward", "empty batch");
    }
    check_finite("batchnorm_forward", x)?;

    let (mean, var) = match st.mode {
        Mode::Train => {
            if batch < 2 {
                return Err(Error::BatchTooSmall(batch));
            }
            let xv = x.values_ref();
            let inv_b = E::ONE / E::from_f64(batch as f64);
            let mut mean = vec![E::ZERO; dim];
            for n in 0..batch {
                for d in 0..dim {
                    mean[d] += xv[n * dim + d];
                }
            }
            mean.iter_mut().for_each(|m| *m *= inv_b);
            let mut var = vec![E::ZERO; dim];
            for n in 0..batch {
                for d in 0..dim {
                    let c = xv[n * dim + d] - mean[d];
                    var[d] += c * c;
                }
            }
            var.iter_mut().for_each(|v| *v *= inv_b);
            for d in 0..dim {
                st.running_mean[d] =
                    (E::ONE - st.momentum) * st.running_mean[d] + st.momentum * mean[d];
                st.running_var[d] =
                    (E::ONE - st.momentum) * st.running_var[d] + st.momentum * var[d];
            }
            (mean, var)
        }
        Mode::Eval => (st.running_mean.clone(), st.running_var.clone()),
    };

    let inv_std: Vec<E> = var.iter().map(|&v| E::ONE / (v + st.epsilon).sqrt()).collect();
    let mut xhat = vec![E::ZERO; batch * dim];
    {
        let xv = x.values_ref();
        for n in 0..batch {
            for d in 0..dim {
                xhat[n * dim + d] = (xv[n * dim + d] - mean[d]) * inv_std[d];
            }
        }
    }
    let mut out = vec![E::ZERO; batch * dim];
    {
        let gv = st.gamma.values_ref();
        let bv = st.beta.values_ref();
        for n in 0..batch {
            for d in 0..dim {
                out[n * dim + d] = gv[d] * xhat[n * dim + d] + bv[d];
            }
        }
    }

    let xc = x.clone();
    let gamma = st.gamma.clone();
    let beta = st.beta.clone();
    let mode = st.mode;
    Ok(Tensor::from_op(
        vec![batch, dim],
        out,
        vec![x.clone(), st.gamma.clone(), st.beta.clone()],
        Box::new(move |_, g, sink| {
            let inv_b = E::ONE / E::from_f64(batch as f64);
            if gamma.requires_grad() {
                let dgamma = sink.buf(&gamma);
                for n in 0..batch {
                    for d in 0..dim {
                        dgamma[d] += g[n * dim + d] * xhat[n * dim + d];
                    }
                }
            }
            if beta.requires_grad() {
                let dbeta = sink.buf(&beta);
                for n in 0..batch {
                    for d in 0..dim {
                        dbeta[d] += g[n * dim + d];
                    }
                }
            }
            if xc.requires_grad() {
                let gv = gamma.values_ref();
                match mode {
                    Mode::Train => {
                        // dL/dx via the batch-statistics chain, written in
                        // terms of xhat: dx = inv_std * gamma *
                        //   (g - mean(g) - xhat * mean(g * xhat)) per feature.
                        let mut g_mean = vec![E::ZERO; dim];
                        let mut gx_mean = vec![E::ZERO; dim];
                        for n in 0..batch {
                            for d in 0..dim {
                                g_mean[d] += g[n * dim + d];
                                gx_mean[d] += g[n * dim + d] * xhat[n * dim + d];
                            }
                        }
                        g_mean.iter_mut().for_each(|v| *v *= inv_b);
                        gx_mean.iter_mut().for_each(|v| *v *= inv_b);
                        let dx = sink.buf(&xc);
                        for n in 0..batch {
                            for d in 0..dim {
                                dx[n * dim + d] += gv[d]
                                    * inv_std[d]
                                    * (g[n * dim + d]
                                        - g_mean[d]
                                        - xhat[n * dim + d] * gx_mean[d]);
                            }
                        }
                    }
                    Mode::Eval => {
                        // Running statistics are constants here.
                        let dx = sink.buf(&xc);
                        for n in 0..batch {
                            for d in 0..dim {
                                dx[n * dim + d] += g[n * dim + d] * gv[d] * inv_std[d];
                            }
                        }
                    }
                }
            }
        }),
    ))
}

/// Mean over the spatial extent of `x: [B,C,H,W]`, yielding `[B,C]`.
pub fn global_avg_pool<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let xs = x.shape();
    if xs.len() != 4 {
        return shape_err("global_avg_pool", format!("need 4-d input, got {:?}", xs));
    }
    let (batch, chans, height, width) = (xs[0], xs[1], xs[2], xs[3]);
    if height == 0 || width == 0 {
        return shape_err("global_avg_pool", "spatial extent must be >= 1");
    }
    let area = height * width;
    let inv_area = E::ONE / E::from_f64(area as f64);
    let mut out = vec![E::ZERO; batch * chans];
    {
        let xv = x.values_ref();
        for b in 0..batch {
            for c in 0..chans {
                let base = (b * chans + c) * area;
                let mut acc = E::ZERO;
                for p in 0..area {
                    acc += xv[base + p];
                }
                out[b * chans + c] = acc * inv_area;
            }
        }
    }
    let xc = x.clone();
    Ok(Tensor::from_op(
        vec![batch, chans],
        out,
        vec![x.clone()],
        Box::new(move |_, g, sink| {
            if xc.requires_grad() {
                let dx = sink.buf(&xc);
                for b in 0..batch {
                    for c in 0..chans {
                        let gv = g[b * chans + c] * inv_area;
                        let base = (b * chans + c) * area;
                        for p in 0..area {
                            dx[base + p] += gv;
                        }
                    }
                }
            }
        }),
    ))
}

/// Default guard for [`l2_normalize`]: `v / sqrt(|v|^2 + eps^2)`.
pub const L2_EPSILON: f64 = 1e-12;

/// Normalize along the last axis as `v / sqrt(|v|^2 + epsilon^2)`.
///
/// Smooth everywhere and safe on zero vectors, which map to zero vectors.
pub fn l2_normalize<E: Element>(v: &Tensor<E>, epsilon: E) -> Tensor<E> {
    assert!(epsilon > E::ZERO, "l2_normalize epsilon must be > 0");
    let shape = v.shape();
    let dim = *shape.last().expect("l2_normalize needs at least 1 axis");
    let rows = v.len() / dim.max(1);
    let mut denom = vec![E::ZERO; rows];
    let mut out = vec![E::ZERO; v.len()];
    {
        let vv = v.values_ref();
        for r in 0..rows {
            let row = &vv[r * dim..(r + 1) * dim];
            let sq: E = row.iter().map(|&x| x * x).sum();
            let d = (sq + epsilon * epsilon).sqrt();
            denom[r] = d;
            for j in 0..dim {
                out[r * dim + j] = row[j] / d;
            }
        }
    }
    let vc = v.clone();
    Tensor::from_op(
        shape,
        out,
        vec![v.clone()],
        Box::new(move |_, g, sink| {
            if vc.requires_grad() {
                let vv = vc.values_ref();
                let dv = sink.buf(&vc);
                for r in 0..rows {
                    let row = &vv[r * dim..(r + 1) * dim];
                    let grow = &g[r * dim..(r + 1) * dim];
                    let d = denom[r];
                    let d3 = d * d * d;
                    let dot: E = row.iter().zip(grow).map(|(&x, &gi)| x * gi).sum();
                    for j in 0..dim {
                        dv[r * dim + j] += grow[j] / d - row[j] * dot / d3;
                    }
                }
            }
        }),
    )
}

/// Mean over the batch of `-log softmax(logits)[target]`, computed with
/// max-subtraction for stability.
pub fn softmax_cross_entropy<E: Element>(
    logits: &Tensor<E>,
    targets: &[usize],
) -> Result<Tensor<E>> {
    let ls = logits.shape();
    if ls.len() != 2 || ls[0] != targets.len() {
        return shape_err(
            "softmax_cross_entropy",
            format!("logits {:?} incompatible with {} targets", ls, targets.len()),
        );
    }
    let (batch, classes) = (ls[0], ls[1]);
    for &t in targets {
        if t >= classes {
            return Err(Error::InvalidClassIndex {
                index: t,
                classes,
            });
        }
    }

    let mut probs = vec![E::ZERO; batch * classes];
    let mut loss = E::ZERO;
    {
        let lv = logits.values_ref();
        for n in 0..batch {
            let row = &lv[n * classes..(n + 1) * classes];
            let m = row.iter().copied().fold(row[0], E::maximum);
            let mut sum = E::ZERO;
            for j in 0..classes {
                let e = (row[j] - m).exp();
                probs[n * classes + j] = e;
                sum += e;
            }
            for j in 0..classes {
                probs[n * classes + j] = probs[n * classes + j] / sum;
            }
            loss += sum.ln() - (row[targets[n]] - m);
        }
    }
    let inv_b = E::ONE / E::from_f64(batch as f64);
    loss *= inv_b;

    let lc = logits.clone();
    let targets = targets.to_vec();
    Ok(Tensor::from_op(
        vec![1],
        vec![loss],
        vec![logits.clone()],
        Box::new(move |_, g, sink| {
            if lc.requires_grad() {
                let scale = g[0] * inv_b;
                let dl = sink.buf(&lc);
                for n in 0..batch {
                    for j in 0..classes {
                        let indicator = if targets[n] == j { E::ONE } else { E::ZERO };
                        dl[n * classes + j] += scale * (probs[n * classes + j] - indicator);
                    }
                }
            }
        }),
    ))
}

/// Scalar sum of all elements.
pub fn sum<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    let total: E = x.values_ref().iter().copied().sum();
    let xc = x.clone();
    Tensor::from_op(
        vec![1],
        vec![total],
        vec![x.clone()],
        Box::new(move |_, g, sink| {
            if xc.requires_grad() {
                let dx = sink.buf(&xc);
                for v in dx.iter_mut() {
                    *v += g[0];
                }
            }
        }),
    )
}

/// Elementwise exponential.
pub fn exp<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    let out: Vec<E> = x.values_ref().iter().map(|v| v.exp()).collect();
    let xc = x.clone();
    Tensor::from_op(
        x.shape(),
        out,
        vec![x.clone()],
        Box::new(move |values, g, sink| {
            if xc.requires_grad() {
                let dx = sink.buf(&xc);
                for i in 0..g.len() {
                    dx[i] += g[i] * values[i];
                }
            }
        }),
    )
}

/// Elementwise product of same-shape tensors.
pub fn mul_elem<E: Element>(x: &Tensor<E>, y: &Tensor<E>) -> Result<Tensor<E>> {
    if x.shape() != y.shape() {
        return shape_err(
            "mul_elem",
            format!("{:?} vs {:?}", x.shape(), y.shape()),
        );
    }
    let out: Vec<E> = x
        .values_ref()
        .iter()
        .zip(y.values_ref().iter())
        .map(|(&a, &b)| a * b)
        .collect();
    let xc = x.clone();
    let yc = y.clone();
    Ok(Tensor::from_op(
        x.shape(),
        out,
        vec![x.clone(), y.clone()],
        Box::new(move |_, g, sink| {
            if xc.requires_grad() {
                let yv = yc.values_ref();
                let dx = sink.buf(&xc);
                for i in 0..g.len() {
                    dx[i] += g[i] * yv[i];
                }
            }
            if yc.requires_grad() {
                let xv = xc.values_ref();
                let dy = sink.buf(&yc);
                for i in 0..g.len() {
                    dy[i] += g[i] * xv[i];
                }
            }
        }),
    ))
}

/// Elementwise `max(x, floor)`; the subgradient on the clamped branch is 0.
pub fn clamp_min<E: Element>(x: &Tensor<E>, floor: E) -> Tensor<E> {
    let out: Vec<E> = x.values_ref().iter().map(|&v| v.maximum(floor)).collect();
    let xc = x.clone();
    Tensor::from_op(
        x.shape(),
        out,
        vec![x.clone()],
        Box::new(move |_, g, sink| {
            if xc.requires_grad() {
                let xv = xc.values_ref();
                let dx = sink.buf(&xc);
                for i in 0..g.len() {
                    if xv[i] > floor {
                        dx[i] += g[i];
                    }
                }
            }
        }),
    )
}

/// Multiply every element by a constant.
pub fn scale_by<E: Element>(x: &Tensor<E>, c: E) -> Tensor<E> {
    let out: Vec<E> = x.values_ref().iter().map(|&v| v * c).collect();
    let xc = x.clone();
    Tensor::from_op(
        x.shape(),
        out,
        vec![x.clone()],
        Box::new(move |_, g, sink| {
            if xc.requires_grad() {
                let dx = sink.buf(&xc);
                for i in 0..g.len() {
                    dx[i] += g[i] * c;
                }
            }
        }),
    )
}

/// Scale each row of `x: [B,C]` by the matching entry of `s: [B,1]`.
pub fn row_scale<E: Element>(x: &Tensor<E>, s: &Tensor<E>) -> Result<Tensor<E>> {
    let xs = x.shape();
    let ss = s.shape();
    if xs.len() != 2 || ss != vec![xs[0], 1] {
        return shape_err(
            "row_scale",
            format!("x {:?} incompatible with per-row scale {:?}", xs, ss),
        );
    }
    let (batch, cols) = (xs[0], xs[1]);
    let mut out = vec![E::ZERO; batch * cols];
    {
        let xv = x.values_ref();
        let sv = s.values_ref();
        for n in 0..batch {
            for j in 0..cols {
                out[n * cols + j] = xv[n * cols + j] * sv[n];
            }
        }
    }
    let xc = x.clone();
    let sc = s.clone();
    Ok(Tensor::from_op(
        vec![batch, cols],
        out,
        vec![x.clone(), s.clone()],
        Box::new(move |_, g, sink| {
            if xc.requires_grad() {
                let sv = sc.values_ref();
                let dx = sink.buf(&xc);
                for n in 0..batch {
                    for j in 0..cols {
                        dx[n * cols + j] += g[n * cols + j] * sv[n];
                    }
                }
            }
            if sc.requires_grad() {
                let xv = xc.values_ref();
                let ds = sink.buf(&sc);
                for n in 0..batch {
                    let mut acc = E::ZERO;
                    for j in 0..cols {
                        acc += g[n * cols + j] * xv[n * cols + j];
                    }
                    ds[n] += acc;
                }
            }
        }),
    ))
}

/// Add two scalar tensors.
pub fn add_scalars<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Tensor<E> {
    assert_eq!(a.len(), 1, "add_scalars expects scalars");
    assert_eq!(b.len(), 1, "add_scalars expects scalars");
    let out = a.item() + b.item();
    let ac = a.clone();
    let bc = b.clone();
    Tensor::from_op(
        vec![1],
        vec![out],
        vec![a.clone(), b.clone()],
        Box::new(move |_, g, sink| {
            if ac.requires_grad() {
                sink.buf(&ac)[0] += g[0];
            }
            if bc.requires_grad() {
                sink.buf(&bc)[0] += g[0];
            }
        }),
    )
}

/// Row-wise softmax on plain values (no gradient), with max-subtraction.
pub fn softmax_rows<E: Element>(logits: &NdArray<E>) -> NdArray<E> {
    let shape = logits.shape().to_vec();
    assert_eq!(shape.len(), 2, "softmax_rows expects a matrix");
    let (rows, cols) = (shape[0], shape[1]);
    let mut out = vec![E::ZERO; rows * cols];
    let data = logits.data();
    for r in 0..rows {
        let row = &data[r * cols..(r + 1) * cols];
        let m = row.iter().copied().fold(row[0], E::maximum);
        let mut sum = E::ZERO;
        for j in 0..cols {
            let e = (row[j] - m).exp();
            out[r * cols + j] = e;
            sum += e;
        }
        for j in 0..cols {
            out[r * cols + j] = out[r * cols + j] / sum;
        }
    }
    NdArray::new(shape, out).expect("softmax_rows shape is consistent")
}
