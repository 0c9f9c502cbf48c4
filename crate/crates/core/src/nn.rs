//! Reusable network blocks: tag embedder, multi-head attention,
//! transformer encoder layer, image grid feature extractor, and the
//! gating head.
//!
//! Blocks are pure functions of `(inputs, ParamStore, rng)`. Parameter
//! names are hierarchical (`tag_encoder.layer0.attn.wq.weight`); each
//! block documents the names it reads relative to a caller-supplied
//! prefix.

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{apply_primitive, Element, Primitive, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_EPS: f64 = 1e-5;
/// Momentum for batch-norm running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

/// Forward mode: training enables dropout and batch statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl Mode {
    pub fn is_train(self) -> bool {
        matches!(self, Mode::Train)
    }
}

/// Image backbone choice for the image stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backbone {
    /// Small strided convolution stack over raw pixels.
    TinyConv,
    /// Items already carry a (G*G, d_model) feature grid.
    Precomputed,
}

/// Architecture hyperparameters.
#[derive(Debug, Clone)]
pub struct ModelConfig {
    /// Feature width of both streams.
    pub d_model: usize,
    /// Attention head count.
    pub heads: usize,
    /// Encoder layers in the image stream (N).
    pub depth_image: usize,
    /// Encoder layers in the tag stream (M).
    pub depth_tag: usize,
    /// Width of position-wise feed-forward layers and of the gate.
    pub d_ff: usize,
    pub dropout: f64,
    /// Maximum tags per item (l); batches are padded to this length.
    pub max_tags: usize,
    /// Image feature map side (G); the grid has G*G cells.
    pub grid_size: usize,
    /// Embedding rows; valid tag ids are 1..vocab_size, 0 is padding.
    pub vocab_size: usize,
    pub backbone: Backbone,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.max_tags < 1 || self.grid_size < 1 || self.depth_image < 1 || self.depth_tag < 1 {
            return Err(Error::Config(
                "max_tags, grid_size and encoder depths must all be >= 1".into(),
            ));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must be >= 2 (id 0 is padding)".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Default encoder sizing for small public-benchmark runs.
    pub fn default_with_vocab(vocab_size: usize) -> Self {
        ModelConfig {
            d_model: 128,
            heads: 4,
            depth_image: 1,
            depth_tag: 2,
            d_ff: 512,
            dropout: 0.3,
            max_tags: 16,
            grid_size: 4,
            vocab_size,
            backbone: Backbone::TinyConv,
        }
    }
}

/// Channel schedule of the tiny convolutional backbone; a 1x1
/// projection to `d_model` plus batch norm sits on top.
pub const TINY_CONV_CHANNELS: [usize; 3] = [16, 32, 64];

#[derive(Debug, Clone, PartialEq)]
pub struct BufferEntry<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// Named, ordered parameter arrays plus non-trainable buffers
/// (batch-norm running statistics).
///
/// Buffers sit behind a `RefCell` because the training-mode forward
/// pass refreshes running statistics while the store is shared.
#[derive(Debug, Default)]
pub struct ParamStore<T: Element> {
    params: BTreeMap<String, Tensor<T>>,
    buffers: RefCell<BTreeMap<String, BufferEntry<T>>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: BTreeMap::new(), buffers: RefCell::new(BTreeMap::new()) }
    }

    pub fn insert(&mut self, name: &str, data: Vec<T>, shape: &[usize]) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::Parameter(format!("duplicate parameter name `{name}`")));
        }
        self.params.insert(name.to_string(), Tensor::parameter(name, data, shape)?);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Parameter(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    /// Replaces an existing parameter's values (same shape).
    pub fn set(&mut self, name: &str, data: Vec<T>) -> Result<()> {
        let old = self.get(name)?;
        if old.len() != data.len() {
            return Err(Error::Parameter(format!(
                "parameter `{name}` has {} values, got {}",
                old.len(),
                data.len()
            )));
        }
        let shape = old.shape().to_vec();
        self.params.insert(name.to_string(), Tensor::parameter(name, data, &shape)?);
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    pub fn params_map(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.params
    }

    /// Rebuilds a store around externally supplied parameter leaves
    /// (used by the finite-difference checker), keeping these buffers.
    pub fn with_params(&self, params: &BTreeMap<String, Tensor<T>>) -> ParamStore<T> {
        ParamStore {
            params: params.clone(),
            buffers: RefCell::new(self.buffers.borrow().clone()),
        }
    }

    pub fn insert_buffer(&self, name: &str, data: Vec<T>, shape: &[usize]) {
        self.buffers
            .borrow_mut()
            .insert(name.to_string(), BufferEntry { shape: shape.to_vec(), data });
    }

    pub fn buffer(&self, name: &str) -> Result<BufferEntry<T>> {
        self.buffers
            .borrow()
            .get(name)
            .cloned()
            .ok_or_else(|| Error::Parameter(format!("missing buffer `{name}`")))
    }

    pub fn buffer_names(&self) -> Vec<String> {
        self.buffers.borrow().keys().cloned().collect()
    }

    pub fn buffers_snapshot(&self) -> BTreeMap<String, BufferEntry<T>> {
        self.buffers.borrow().clone()
    }
}

// ---------------------------------------------------------------------------
// Boolean masks

/// Row-major boolean matrix marking valid slots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    data: Vec<bool>,
    rows: usize,
    cols: usize,
}

impl Mask {
    pub fn new(data: Vec<bool>, rows: usize, cols: usize) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Contract(format!(
                "mask data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Mask { data, rows, cols })
    }

    pub fn all_valid(rows: usize, cols: usize) -> Self {
        Mask { data: vec![true; rows * cols], rows, cols }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.cols + c]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }

    pub fn count_valid(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Index of the first row with no valid slot, if any.
    pub fn first_empty_row(&self) -> Option<usize> {
        (0..self.rows).find(|&r| (0..self.cols).all(|c| !self.get(r, c)))
    }

    /// 0/1 tensor of shape (rows, cols).
    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        let data = self.data.iter().map(|&b| if b { T::ONE } else { T::ZERO }).collect();
        Tensor::new(data, &[self.rows, self.cols]).expect("mask shape")
    }

    /// Inverted mask (true where padded) for `masked_fill`.
    pub fn inverted(&self) -> Vec<bool> {
        self.data.iter().map(|&b| !b).collect()
    }
}

// ---------------------------------------------------------------------------
// Initialization

fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, limit: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-limit..limit)).collect()
}

fn to_t<T: Element>(v: Vec<f64>) -> Vec<T> {
    v.into_iter().map(T::from_f64).collect()
}

/// `prefix.weight` (din,dout) Xavier-uniform, `prefix.bias` (dout) zero.
pub fn init_linear<T: Element>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    din: usize,
    dout: usize,
) -> Result<()> {
    let limit = (6.0 / (din + dout) as f64).sqrt();
    store.insert(&format!("{prefix}.weight"), to_t(uniform_vec(rng, din * dout, limit)), &[din, dout])?;
    store.insert(&format!("{prefix}.bias"), vec![T::ZERO; dout], &[dout])
}

/// `prefix.gamma` ones, `prefix.beta` zeros.
pub fn init_layer_norm<T: Element>(store: &mut ParamStore<T>, prefix: &str, d: usize) -> Result<()> {
    store.insert(&format!("{prefix}.gamma"), vec![T::ONE; d], &[d])?;
    store.insert(&format!("{prefix}.beta"), vec![T::ZERO; d], &[d])
}

/// `embedding.table` (vocab, d) uniform in +-0.1 with row 0 pinned to zero.
pub fn init_embedding<T: Element>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    vocab: usize,
    d: usize,
) -> Result<()> {
    let mut data = uniform_vec(rng, vocab * d, 0.1);
    for v in &mut data[..d] {
        *v = 0.0;
    }
    store.insert("embedding.table", to_t(data), &[vocab, d])
}

/// Convolution weights `prefix.weight` (co,ci,k,k) and `prefix.bias` (co).
pub fn init_conv<T: Element>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    co: usize,
    ci: usize,
    k: usize,
) -> Result<()> {
    let fan_in = ci * k * k;
    let fan_out = co * k * k;
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    store.insert(&format!("{prefix}.weight"), to_t(uniform_vec(rng, co * fan_in, limit)), &[co, ci, k, k])?;
    store.insert(&format!("{prefix}.bias"), vec![T::ZERO; co], &[co])
}

/// Batch-norm gain/bias parameters plus running-statistic buffers.
pub fn init_batch_norm<T: Element>(store: &mut ParamStore<T>, prefix: &str, c: usize) -> Result<()> {
    store.insert(&format!("{prefix}.gamma"), vec![T::ONE; c], &[c])?;
    store.insert(&format!("{prefix}.beta"), vec![T::ZERO; c], &[c])?;
    store.insert_buffer(&format!("{prefix}.running_mean"), vec![T::ZERO; c], &[c]);
    store.insert_buffer(&format!("{prefix}.running_var"), vec![T::ONE; c], &[c]);
    Ok(())
}

/// Query/key/value/output projections of one attention block.
pub fn init_attention<T: Element>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    d: usize,
) -> Result<()> {
    for proj in ["wq", "wk", "wv", "wo"] {
        init_linear(store, rng, &format!("{prefix}.{proj}"), d, d)?;
    }
    Ok(())
}

/// Self-attention + feed-forward encoder layer parameters.
pub fn init_encoder_layer<T: Element>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    d_model: usize,
    d_ff: usize,
) -> Result<()> {
    init_attention(store, rng, &format!("{prefix}.attn"), d_model)?;
    init_layer_norm(store, &format!("{prefix}.norm1"), d_model)?;
    init_linear(store, rng, &format!("{prefix}.ff.fc1"), d_model, d_ff)?;
    init_linear(store, rng, &format!("{prefix}.ff.fc2"), d_ff, d_model)?;
    init_layer_norm(store, &format!("{prefix}.norm2"), d_model)
}

// ---------------------------------------------------------------------------
// Blocks

/// `x @ prefix.weight + prefix.bias` over the last axis.
pub fn linear<T: Element>(x: &Tensor<T>, store: &ParamStore<T>, prefix: &str) -> Result<Tensor<T>> {
    let w = store.get(&format!("{prefix}.weight"))?;
    let b = store.get(&format!("{prefix}.bias"))?;
    x.matmul(w)?.add(b)
}

/// Layer norm over the last axis followed by learned gain and bias.
pub fn layer_norm_affine<T: Element>(
    x: &Tensor<T>,
    store: &ParamStore<T>,
    prefix: &str,
) -> Result<Tensor<T>> {
    let gamma = store.get(&format!("{prefix}.gamma"))?;
    let beta = store.get(&format!("{prefix}.beta"))?;
    x.layer_norm(LAYER_NORM_EPS)?.mul(gamma)?.add(beta)
}

/// Embedding lookup for a (bs, l) id matrix -> (bs, l, d_model).
///
/// Slots with id 0 (padding) yield the zero vector and receive no
/// gradient: the lookup result is multiplied by a nonzero-id mask, so
/// row 0 of the table stays pinned at its zero initialization.
pub fn embed_tags<T: Element>(
    ids: &[u32],
    bs: usize,
    l: usize,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
) -> Result<Tensor<T>> {
    if ids.len() != bs * l {
        return Err(Error::Contract(format!(
            "expected {bs}x{l} ids, got {}",
            ids.len()
        )));
    }
    if let Some(&bad) = ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
        return Err(Error::Vocabulary { id: bad, vocab_size: cfg.vocab_size });
    }
    let table = store.get("embedding.table")?;
    let emb = apply_primitive(
        Primitive::EmbeddingLookup { ids: ids.to_vec(), ids_shape: vec![bs, l] },
        &[table],
    )?;
    let nonzero: Vec<T> =
        ids.iter().map(|&id| if id == 0 { T::ZERO } else { T::ONE }).collect();
    let gate = Tensor::new(nonzero, &[bs, l, 1])?;
    emb.mul(&gate)
}

/// Scaled dot-product multi-head attention.
///
/// `q`: (bs, lq, d) queries; `k`/`v`: (bs, s, d); `key_mask` marks valid
/// key positions per batch row. Masked keys receive a -inf score before
/// the softmax, so their values cannot leak into any output.
pub fn multi_head_attention<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    key_mask: &Mask,
    store: &ParamStore<T>,
    prefix: &str,
    heads: usize,
) -> Result<Tensor<T>> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    if qs.len() != 3 || ks.len() != 3 || vs.len() != 3 || ks != vs || qs[2] != ks[2] {
        return Err(Error::ShapeMismatch {
            primitive: "matmul",
            details: format!("attention expects (bs,l,d) operands, got q{qs:?} k{ks:?} v{vs:?}"),
        });
    }
    let (bs, lq, d) = (qs[0], qs[1], qs[2]);
    let s = ks[1];
    if d % heads != 0 {
        return Err(Error::Config(format!("d_model {d} not divisible by {heads} heads")));
    }
    if key_mask.rows() != bs || key_mask.cols() != s {
        return Err(Error::Contract(format!(
            "key mask {}x{} does not match keys {bs}x{s}",
            key_mask.rows(),
            key_mask.cols()
        )));
    }
    if let Some(row) = key_mask.first_empty_row() {
        return Err(Error::Contract(format!(
            "all keys masked for batch row {row}: softmax would be degenerate"
        )));
    }
    let dk = d / heads;

    let qp = linear(q, store, &format!("{prefix}.wq"))?
        .reshape(&[bs, lq, heads, dk])?
        .transpose(&[0, 2, 1, 3])?; // (bs, h, lq, dk)
    let kp = linear(k, store, &format!("{prefix}.wk"))?
        .reshape(&[bs, s, heads, dk])?
        .transpose(&[0, 2, 3, 1])?; // (bs, h, dk, s)
    let vp = linear(v, store, &format!("{prefix}.wv"))?
        .reshape(&[bs, s, heads, dk])?
        .transpose(&[0, 2, 1, 3])?; // (bs, h, s, dk)

    let scale = 1.0 / (dk as f64).sqrt();
    let scores = qp.matmul(&kp)?.affine(scale, 0.0)?; // (bs, h, lq, s)
    let masked = scores.masked_fill(&key_mask.inverted(), &[bs, 1, 1, s], f64::NEG_INFINITY)?;
    let probs = masked.softmax(3)?;
    let ctx = probs
        .matmul(&vp)? // (bs, h, lq, dk)
        .transpose(&[0, 2, 1, 3])?
        .reshape(&[bs, lq, d])?;
    linear(&ctx, store, &format!("{prefix}.wo"))
}

/// Post-norm transformer encoder layer: self-attention and a
/// position-wise feed-forward sublayer, each wrapped in residual + layer
/// norm. No positional encoding anywhere: tag order carries no signal.
#[allow(clippy::too_many_arguments)]
pub fn encoder_layer<T: Element>(
    x: &Tensor<T>,
    mask: &Mask,
    store: &ParamStore<T>,
    prefix: &str,
    cfg: &ModelConfig,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<T>> {
    let mut seed = || if mode.is_train() { rng.random::<u64>() } else { 0 };
    let attn = multi_head_attention(x, x, x, mask, store, &format!("{prefix}.attn"), cfg.heads)?;
    let attn = attn.dropout(cfg.dropout, mode.is_train(), seed())?;
    let x1 = layer_norm_affine(&x.add(&attn)?, store, &format!("{prefix}.norm1"))?;

    let h = linear(&x1, store, &format!("{prefix}.ff.fc1"))?.relu()?;
    let h = h.dropout(cfg.dropout, mode.is_train(), seed())?;
    let ff = linear(&h, store, &format!("{prefix}.ff.fc2"))?;
    let ff = ff.dropout(cfg.dropout, mode.is_train(), seed())?;
    layer_norm_affine(&x1.add(&ff)?, store, &format!("{prefix}.norm2"))
}

/// Image input accepted by the feature extractor.
#[derive(Debug, Clone)]
pub enum ImageInput<T: Element> {
    /// Raw pixels (bs, 3, H, W) in [0, 1].
    Pixels(Tensor<T>),
    /// Precomputed feature grid (bs, G*G, d_model), passed through.
    Grid(Tensor<T>),
}

/// Spatial side after one 3x3 stride-2 pad-1 convolution.
fn conv_out(side: usize) -> usize {
    (side + 2 - 3) / 2 + 1
}

/// Spatial side the tiny backbone needs so the grid comes out G x G.
pub fn tiny_conv_input_side(grid: usize) -> usize {
    // Inverse of three stride-2 halvings: G -> 2G -> 4G -> 8G.
    grid * 8
}

/// Extracts (bs, G*G, d_model) grid features.
///
/// The tiny backbone is three 3x3 stride-2 reflect-padded convolutions
/// (channels 16/32/64) with relu, then a 1x1 projection to d_model and
/// batch norm. In training mode the running statistics under
/// `backbone.bn.*` are refreshed with momentum [`BN_MOMENTUM`].
pub fn image_grid_features<T: Element>(
    input: &ImageInput<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    mode: Mode,
) -> Result<Tensor<T>> {
    let g = cfg.grid_size;
    match input {
        ImageInput::Grid(t) => {
            if t.rank() != 3 || t.shape()[1] != g * g || t.shape()[2] != cfg.d_model {
                return Err(Error::Config(format!(
                    "precomputed grid must be (bs, {}, {}), got {:?}",
                    g * g,
                    cfg.d_model,
                    t.shape()
                )));
            }
            Ok(t.clone())
        }
        ImageInput::Pixels(x) => {
            if x.rank() != 4 || x.shape()[1] != 3 {
                return Err(Error::Config(format!(
                    "pixel input must be (bs, 3, H, W), got {:?}",
                    x.shape()
                )));
            }
            let (h, w) = (x.shape()[2], x.shape()[3]);
            let (oh, ow) = (conv_out(conv_out(conv_out(h))), conv_out(conv_out(conv_out(w))));
            if oh != g || ow != g {
                return Err(Error::Config(format!(
                    "image {h}x{w} reduces to {oh}x{ow}, configured grid is {g}x{g}"
                )));
            }
            let bs = x.shape()[0];
            let mut t = x.clone();
            for (i, &co) in TINY_CONV_CHANNELS.iter().enumerate() {
                let pfx = format!("backbone.conv{}", i + 1);
                let wt = store.get(&format!("{pfx}.weight"))?;
                let bias = store.get(&format!("{pfx}.bias"))?;
                t = t
                    .conv2d(wt, 2, 1, true)?
                    .add(&bias.reshape(&[co, 1, 1])?)?
                    .relu()?;
            }
            let wt = store.get("backbone.proj.weight")?;
            let bias = store.get("backbone.proj.bias")?;
            let projected = t
                .conv2d(wt, 1, 0, false)?
                .add(&bias.reshape(&[cfg.d_model, 1, 1])?)?;

            if mode.is_train() {
                update_running_stats(store, "backbone.bn", &projected)?;
            }
            let gamma = store.get("backbone.bn.gamma")?;
            let beta = store.get("backbone.bn.beta")?;
            let normed = if mode.is_train() {
                apply_primitive(
                    Primitive::BatchNorm { eps: BATCH_NORM_EPS, training: true },
                    &[&projected, gamma, beta],
                )?
            } else {
                let rm = store.buffer("backbone.bn.running_mean")?;
                let rv = store.buffer("backbone.bn.running_var")?;
                let rm = Tensor::new(rm.data, &rm.shape)?;
                let rv = Tensor::new(rv.data, &rv.shape)?;
                apply_primitive(
                    Primitive::BatchNorm { eps: BATCH_NORM_EPS, training: false },
                    &[&projected, gamma, beta, &rm, &rv],
                )?
            };
            normed.reshape(&[bs, cfg.d_model, g * g])?.transpose(&[0, 2, 1])
        }
    }
}

/// Exponential-moving-average update of running mean/var from the
/// current batch (biased variance, fixed loop order).
fn update_running_stats<T: Element>(
    store: &ParamStore<T>,
    prefix: &str,
    x: &Tensor<T>,
) -> Result<()> {
    let xs = x.shape();
    let (bs, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let area = T::from_f64((bs * h * w) as f64);
    let xd = x.data();
    let mut mean = vec![T::ZERO; c];
    let mut var = vec![T::ZERO; c];
    for ch in 0..c {
        let mut m = T::ZERO;
        for b in 0..bs {
            let base = (b * c + ch) * h * w;
            for i in 0..h * w {
                m += xd[base + i];
            }
        }
        m = m / area;
        let mut v = T::ZERO;
        for b in 0..bs {
            let base = (b * c + ch) * h * w;
            for i in 0..h * w {
                let d = xd[base + i] - m;
                v += d * d;
            }
        }
        mean[ch] = m;
        var[ch] = v / area;
    }
    let mom = T::from_f64(BN_MOMENTUM);
    let keep = T::from_f64(1.0 - BN_MOMENTUM);
    let mut rm = store.buffer(&format!("{prefix}.running_mean"))?;
    let mut rv = store.buffer(&format!("{prefix}.running_var"))?;
    for ch in 0..c {
        rm.data[ch] = keep * rm.data[ch] + mom * mean[ch];
        rv.data[ch] = keep * rv.data[ch] + mom * var[ch];
    }
    store.insert_buffer(&format!("{prefix}.running_mean"), rm.data, &rm.shape);
    store.insert_buffer(&format!("{prefix}.running_var"), rv.data, &rv.shape);
    Ok(())
}

/// Gating head over concatenated stream features (bs, l, 2*d_model):
/// Dropout, FC(2*d_model -> d_ff), ReLU, Dropout, FC(d_ff -> 1),
/// Squeeze, Sigmoid. Returns the per-slot gate (bs, l), each value
/// strictly inside (0, 1) for finite inputs.
pub fn gating_head<T: Element>(
    features: &Tensor<T>,
    mask: &Mask,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<T>> {
    let fs = features.shape();
    if fs.len() != 3 || fs[2] != 2 * cfg.d_model {
        return Err(Error::ShapeMismatch {
            primitive: "matmul",
            details: format!(
                "gating head expects (bs, l, {}), got {fs:?}",
                2 * cfg.d_model
            ),
        });
    }
    let (bs, l) = (fs[0], fs[1]);
    if mask.rows() != bs || mask.cols() != l {
        return Err(Error::Contract(format!(
            "gate mask {}x{} does not match features {bs}x{l}",
            mask.rows(),
            mask.cols()
        )));
    }
    let mut seed = || if mode.is_train() { rng.random::<u64>() } else { 0 };
    let t = features.dropout(cfg.dropout, mode.is_train(), seed())?;
    let t = linear(&t, store, "gate.fc1")?.relu()?;
    let t = t.dropout(cfg.dropout, mode.is_train(), seed())?;
    let t = linear(&t, store, "gate.fc2")?; // (bs, l, 1)
    t.reshape(&[bs, l])?.sigmoid()
}

/// Parameter count of the gating head stack.
pub fn gating_param_count(cfg: &ModelConfig) -> usize {
    2 * cfg.d_model * cfg.d_ff + cfg.d_ff + cfg.d_ff + 1
}

impl<T: Element> ParamStore<T> {
    /// Store sharing these buffers with some parameters replaced.
    pub fn with_overlay(&self, overlay: &BTreeMap<String, Tensor<T>>) -> ParamStore<T> {
        let mut params = self.params.clone();
        for (name, tensor) in overlay {
            params.insert(name.clone(), tensor.clone());
        }
        ParamStore { params, buffers: RefCell::new(self.buffers.borrow().clone()) }
    }
}
