//! Layer stacks with named parameters.
//!
//! A [`Model`] owns its parameters and batch-norm running statistics as plain
//! arrays (`Send` data, safe to move between threads). Each forward pass
//! binds the parameters into fresh graph leaves, runs the trunk layers and
//! the head, and hands back the leaf map so gradients can be pulled into the
//! store after `backward`. Parameter names ("net.2.weight", "head.weight",
//! "head.scale.bias", ...) are the identifiers the trainer's weight-decay
//! exemption set operates on.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::{self, EmbedFc, HeadConfig, HeadKind, HeadOutput, HeadParams, ScaleBranch, ScaleMode, ScaleSpec};
use crate::ops::{self, BatchNormState, Mode};
use crate::rng;
use crate::tensor::{NdArray, Tensor};

/// Batch-norm epsilon used throughout.
pub const BN_EPSILON: f64 = 1e-5;
/// Fraction of the batch statistics folded into the running statistics per
/// training step.
pub const BN_MOMENTUM: f64 = 0.1;

/// Trunk layer description. Dimensional compatibility of consecutive layers
/// is checked at model construction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        in_dim: usize,
        out_dim: usize,
        #[serde(default = "LayerSpec::default_bias")]
        bias: bool,
    },
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Relu,
    BatchNorm {
        dim: usize,
    },
    GlobalAvgPool,
}

impl LayerSpec {
    fn default_bias() -> bool {
        true
    }
}

/// One named parameter with its gradient and SGD momentum buffers.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: NdArray,
    pub grad: NdArray,
    pub velocity: NdArray,
}

impl Param {
    fn new(name: String, value: NdArray) -> Self {
        let grad = NdArray::zeros(value.shape());
        let velocity = NdArray::zeros(value.shape());
        Self {
            name,
            value,
            grad,
            velocity,
        }
    }
}

/// Ordered collection of named parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn insert(&mut self, name: impl Into<String>, value: NdArray) {
        let name = name.into();
        debug_assert!(self.get(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param::new(name, value));
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Bind every parameter into a fresh `requires_grad` leaf.
    pub fn bind(&self) -> LeafMap {
        LeafMap {
            entries: self
                .params
                .iter()
                .map(|p| (p.name.clone(), Tensor::leaf(p.value.clone(), true)))
                .collect(),
        }
    }

    /// Pull gradients accumulated on the bound leaves back into the store.
    pub fn accumulate_grads(&mut self, leaves: &LeafMap) {
        for (name, leaf) in &leaves.entries {
            if let Some(g) = leaf.grad() {
                let param = self
                    .get_mut(name)
                    .expect("leaf name always comes from this store");
                for (dst, src) in param.grad.data_mut().iter_mut().zip(&g) {
                    *dst += *src;
                }
            }
        }
    }
}

/// Parameter leaves of one forward/backward pass, keyed by parameter name.
pub struct LeafMap {
    entries: Vec<(String, Tensor)>,
}

impl LeafMap {
    pub fn get(&self, name: &str) -> &Tensor {
        &self
            .entries
            .iter()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))
            .1
    }
}

/// Running statistics of one batch-norm site.
#[derive(Debug, Clone, PartialEq)]
pub struct BnBuffer {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BnBuffer {
    fn new(dim: usize) -> Self {
        Self {
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
        }
    }
}

/// Architecture description: enough to rebuild a model skeleton.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Per-sample input shape, e.g. `[8]` or `[3, 16, 16]`.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub classes: usize,
    pub head: HeadConfig,
}

fn conv_out_extent(extent: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::InvalidGeometry("stride must be >= 1".into()));
    }
    if kernel.is_multiple_of(2) || kernel == 0 {
        return Err(Error::InvalidGeometry(format!(
            "kernel must be odd, got {kernel}"
        )));
    }
    let padded = extent + 2 * pad;
    if padded < kernel {
        return Err(Error::InvalidGeometry(format!(
            "kernel {kernel} larger than padded extent {padded}"
        )));
    }
    if !(padded - kernel).is_multiple_of(stride) {
        return Err(Error::InvalidGeometry(format!(
            "({extent}+2*{pad}-{kernel}) not divisible by stride {stride}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Walk the layer stack, validating shape compatibility. Returns the
/// per-sample feature shape and whether the features are non-negative by
/// construction (the stack ends in ReLU, possibly followed by pooling).
fn infer_trunk(input: &[usize], layers: &[LayerSpec]) -> Result<(Vec<usize>, bool)> {
    let mut shape = input.to_vec();
    let mut nonneg = false;
    for (i, layer) in layers.iter().enumerate() {
        let fail = |detail: String| -> Result<(Vec<usize>, bool)> {
            Err(Error::ShapeMismatch {
                op: "Model::new",
                detail: format!("layer {i}: {detail}"),
            })
        };
        match layer {
            LayerSpec::Dense { in_dim, out_dim, .. } => {
                if shape != vec![*in_dim] {
                    return fail(format!("dense expects [{in_dim}], got {shape:?}"));
                }
                if *out_dim == 0 {
                    return fail("dense out_dim must be >= 1".into());
                }
                shape = vec![*out_dim];
                nonneg = false;
            }
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                pad,
            } => {
                if shape.len() != 3 || shape[0] != *in_ch {
                    return fail(format!("conv expects [{in_ch}, H, W], got {shape:?}"));
                }
                let h = conv_out_extent(shape[1], *kernel, *stride, *pad)?;
                let w = conv_out_extent(shape[2], *kernel, *stride, *pad)?;
                shape = vec![*out_ch, h, w];
                nonneg = false;
            }
            LayerSpec::Relu => {
                nonneg = true;
            }
            LayerSpec::BatchNorm { dim } => {
                if shape != vec![*dim] {
                    return fail(format!("batch norm expects [{dim}], got {shape:?}"));
                }
                nonneg = false;
            }
            LayerSpec::GlobalAvgPool => {
                if shape.len() != 3 {
                    return fail(format!("global pool expects [C, H, W], got {shape:?}"));
                }
                shape = vec![shape[0]];
                // averaging preserves sign constraints
            }
        }
    }
    Ok((shape, nonneg))
}

fn glorot(rng: &mut rand_chacha::ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> NdArray {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
    NdArray::new(shape.to_vec(), data).expect("generated data matches shape")
}

/// Parameter names of the output layer, used by the selective weight-decay
/// rule: the class-weight matrix plus the whole scale branch.
pub fn last_layer_param_names(head: &HeadConfig) -> Vec<String> {
    let mut names = vec!["head.weight".to_string()];
    if head.has_scale_branch() {
        names.extend(
            ["head.scale.weight", "head.scale.bias", "head.scale.bn.gamma", "head.scale.bn.beta"]
                .map(String::from),
        );
    }
    names
}

/// Result of one forward pass: the bound leaves, the trunk features, and the
/// head output.
pub struct ForwardPass {
    pub leaves: LeafMap,
    pub features: Tensor,
    pub output: HeadOutput,
}

/// A trunk plus an output head, with owned parameter state.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    feature_dim: usize,
    nonneg_features: bool,
    params: ParamStore,
    bn_buffers: Vec<(String, BnBuffer)>,
}

impl Model {
    /// Build and initialize a model. Weights are Glorot-uniform from a
    /// dedicated stream of `seed`; scale-branch parameters start neutral so
    /// the initial scale is `exp(0) = 1`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.head.validate()?;
        if config.classes < 2 {
            return Err(Error::InvalidParams(format!(
                "need at least 2 classes, got {}",
                config.classes
            )));
        }
        let (feature_shape, nonneg_features) = infer_trunk(&config.input_shape, &config.layers)?;
        if feature_shape.len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "Model::new",
                detail: format!(
                    "trunk must end in a flat feature vector, got {feature_shape:?}"
                ),
            });
        }
        let feature_dim = feature_shape[0];

        let mut rng = rng::stream(seed, "init");
        let mut params = ParamStore::default();
        let mut bn_buffers = Vec::new();

        for (i, layer) in config.layers.iter().enumerate() {
            match layer {
                LayerSpec::Dense { in_dim, out_dim, bias } => {
                    params.insert(
                        format!("net.{i}.weight"),
                        glorot(&mut rng, &[*out_dim, *in_dim], *in_dim, *out_dim),
                    );
                    if *bias {
                        params.insert(format!("net.{i}.bias"), NdArray::zeros(&[*out_dim]));
                    }
                }
                LayerSpec::Conv2d {
                    in_ch,
                    out_ch,
                    kernel,
                    ..
                } => {
                    let k2 = kernel * kernel;
                    params.insert(
                        format!("net.{i}.weight"),
                        glorot(
                            &mut rng,
                            &[*out_ch, *in_ch, *kernel, *kernel],
                            in_ch * k2,
                            out_ch * k2,
                        ),
                    );
                }
                LayerSpec::BatchNorm { dim } => {
                    params.insert(format!("net.{i}.gamma"), NdArray::full(&[*dim], 1.0));
                    params.insert(format!("net.{i}.beta"), NdArray::zeros(&[*dim]));
                    bn_buffers.push((format!("net.{i}"), BnBuffer::new(*dim)));
                }
                LayerSpec::Relu | LayerSpec::GlobalAvgPool => {}
            }
        }

        let head = &config.head;
        let head_in = if head.kind == HeadKind::TwoFcCosine {
            params.insert(
                "head.embed.weight",
                glorot(&mut rng, &[head.embed_dim, feature_dim], feature_dim, head.embed_dim),
            );
            params.insert("head.embed.bias", NdArray::zeros(&[head.embed_dim]));
            head.embed_dim
        } else {
            feature_dim
        };
        params.insert(
            "head.weight",
            glorot(&mut rng, &[config.classes, head_in], head_in, config.classes),
        );
        if !head.kind.is_cosine() {
            params.insert("head.bias", NdArray::zeros(&[config.classes]));
        }
        if head.has_scale_branch() {
            params.insert("head.scale.weight", NdArray::zeros(&[1, head_in]));
            params.insert("head.scale.bias", NdArray::zeros(&[1]));
            params.insert("head.scale.bn.gamma", NdArray::full(&[1], 1.0));
            params.insert("head.scale.bn.beta", NdArray::zeros(&[1]));
            bn_buffers.push(("head.scale.bn".to_string(), BnBuffer::new(1)));
        }

        Ok(Self {
            config,
            feature_dim,
            nonneg_features,
            params,
            bn_buffers,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn head_kind(&self) -> HeadKind {
        self.config.head.kind
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// Whether the trunk guarantees non-negative features (ReLU before the
    /// head, possibly through pooling).
    pub fn nonneg_features(&self) -> bool {
        self.nonneg_features
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn bn_buffers(&self) -> &[(String, BnBuffer)] {
        &self.bn_buffers
    }

    pub fn bn_buffers_mut(&mut self) -> &mut Vec<(String, BnBuffer)> {
        &mut self.bn_buffers
    }

    fn bn_buffer_mut(&mut self, key: &str) -> &mut BnBuffer {
        &mut self
            .bn_buffers
            .iter_mut()
            .find(|(k, _)| k == key)
            .unwrap_or_else(|| panic!("missing bn buffer {key}"))
            .1
    }

    /// Run the trunk and head on a `[B, ...]` batch.
    pub fn forward(&mut self, x: &NdArray, mode: Mode) -> Result<ForwardPass> {
        let xs = x.shape();
        if xs.is_empty() || xs[1..] != *self.config.input_shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "Model::forward",
                detail: format!(
                    "batch shape {:?} does not end in input shape {:?}",
                    xs, self.config.input_shape
                ),
            });
        }
        let leaves = self.params.bind();
        let mut cur = Tensor::constant(x.clone());
        let layers = self.config.layers.clone();
        for (i, layer) in layers.iter().enumerate() {
            cur = match layer {
                LayerSpec::Dense { bias, .. } => {
                    let w = leaves.get(&format!("net.{i}.weight"));
                    let b = bias.then(|| leaves.get(&format!("net.{i}.bias")));
                    ops::dense_forward(&cur, w, b)?
                }
                LayerSpec::Conv2d { stride, pad, .. } => {
                    let k = leaves.get(&format!("net.{i}.weight"));
                    ops::conv2d_forward(&cur, k, *stride, *pad)?
                }
                LayerSpec::Relu => ops::relu(&cur),
                LayerSpec::BatchNorm { .. } => {
                    let key = format!("net.{i}");
                    let buffer = self.bn_buffer_mut(&key).clone();
                    let mut st = BatchNormState::with_params(
                        leaves.get(&format!("net.{i}.gamma")).clone(),
                        leaves.get(&format!("net.{i}.beta")).clone(),
                        buffer.running_mean,
                        buffer.running_var,
                        BN_MOMENTUM,
                        BN_EPSILON,
                        mode,
                    )?;
                    let y = ops::batchnorm_forward(&cur, &mut st)?;
                    let buffer = self.bn_buffer_mut(&key);
                    buffer.running_mean = st.running_mean;
                    buffer.running_var = st.running_var;
                    y
                }
                LayerSpec::GlobalAvgPool => ops::global_avg_pool(&cur)?,
            };
        }
        let features = cur;

        // Single-FC cosine on a ReLU/pooled trunk: the feature must sit in
        // the non-negative quadrant.
        if self.nonneg_features && self.config.head.kind == HeadKind::Cosine {
            assert!(
                features.values_ref().iter().all(|&v| v >= 0.0),
                "ReLU trunk produced a negative feature"
            );
        }

        let mut head_params = self.bind_head(&leaves, mode);
        let output = heads::head_forward(&features, &mut head_params)?;
        if let ScaleMode::Predicted(branch) = head_params.scale {
            let buffer = self.bn_buffer_mut("head.scale.bn");
            buffer.running_mean = branch.bn.running_mean;
            buffer.running_var = branch.bn.running_var;
        }
        Ok(ForwardPass {
            leaves,
            features,
            output,
        })
    }

    fn bind_head(&self, leaves: &LeafMap, mode: Mode) -> HeadParams {
        let head = &self.config.head;
        let scale = match (head.kind, head.scale) {
            (HeadKind::Standard, _) => ScaleMode::Fixed(1.0),
            (_, ScaleSpec::Fixed(s)) => ScaleMode::Fixed(s),
            (_, ScaleSpec::Predicted) => {
                let buffer = self
                    .bn_buffers
                    .iter()
                    .find(|(k, _)| k == "head.scale.bn")
                    .map(|(_, b)| b.clone())
                    .expect("scale branch always has a bn buffer");
                ScaleMode::Predicted(ScaleBranch {
                    weight: leaves.get("head.scale.weight").clone(),
                    bias: leaves.get("head.scale.bias").clone(),
                    bn: BatchNormState::with_params(
                        leaves.get("head.scale.bn.gamma").clone(),
                        leaves.get("head.scale.bn.beta").clone(),
                        buffer.running_mean,
                        buffer.running_var,
                        BN_MOMENTUM,
                        BN_EPSILON,
                        mode,
                    )
                    .expect("scale BN state is valid by construction"),
                })
            }
        };
        HeadParams {
            kind: head.kind,
            weight: leaves.get("head.weight").clone(),
            bias: (!head.kind.is_cosine()).then(|| leaves.get("head.bias").clone()),
            scale,
            embed: (head.kind == HeadKind::TwoFcCosine).then(|| EmbedFc {
                weight: leaves.get("head.embed.weight").clone(),
                bias: leaves.get("head.embed.bias").clone(),
            }),
        }
    }

    /// Add the gradients collected on the pass's leaves into the store.
    pub fn absorb_grads(&mut self, pass: &ForwardPass) {
        self.params.accumulate_grads(&pass.leaves);
    }
}
