//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Graphs are built eagerly: every primitive application records its
//! operands so [`autograd::backward`] can replay the chain rule from a
//! scalar loss. Two element types are supported and deliberately never
//! mixed inside one graph: `f64` for gradient checking, `f32` for
//! training.

pub mod autograd;
pub mod gradcheck;
mod kernels;

use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

/// Element precision of a tensor graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            other => Err(Error::Checkpoint(format!("unknown dtype code {other}"))),
        }
    }

    pub fn byte_size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Scalar element of a tensor: `f32` (training) or `f64` (checking).
pub trait Element:
    Copy
    + PartialOrd
    + Default
    + fmt::Debug
    + fmt::Display
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + 'static
{
    const DTYPE: DType;
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;
    fn maxv(self, other: Self) -> Self;
    fn minv(self, other: Self) -> Self;
    fn neg_infinity() -> Self;
    fn write_le_bytes(self, out: &mut Vec<u8>);
    fn read_le_bytes(bytes: &[u8]) -> Self;
}

macro_rules! impl_element {
    ($t:ty, $dtype:expr) => {
        impl Element for $t {
            const DTYPE: DType = $dtype;
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;

            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn exp(self) -> Self {
                self.exp()
            }
            fn ln(self) -> Self {
                self.ln()
            }
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            fn abs(self) -> Self {
                self.abs()
            }
            fn is_finite(self) -> bool {
                self.is_finite()
            }
            fn maxv(self, other: Self) -> Self {
                if self > other {
                    self
                } else {
                    other
                }
            }
            fn minv(self, other: Self) -> Self {
                if self < other {
                    self
                } else {
                    other
                }
            }
            fn neg_infinity() -> Self {
                <$t>::NEG_INFINITY
            }
            fn write_le_bytes(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }
            fn read_le_bytes(bytes: &[u8]) -> Self {
                <$t>::from_le_bytes(bytes.try_into().expect("element byte width"))
            }
        }
    };
}

impl_element!(f32, DType::F32);
impl_element!(f64, DType::F64);

/// Differentiable primitives understood by [`apply_primitive`].
///
/// The set covers the transformer/convolution blocks plus the
/// elementwise arithmetic needed to express the BCE and Dice
/// objectives as graph operations.
#[derive(Debug, Clone)]
pub enum Primitive {
    Matmul,
    Add,
    Sub,
    Mul,
    Div,
    Relu,
    Sigmoid,
    Log,
    Clamp { lo: f64, hi: f64 },
    /// `scale * x + shift` with scalar constants.
    Affine { scale: f64, shift: f64 },
    Softmax { axis: usize },
    /// Normalizes over the last axis; gain/bias are applied by callers.
    LayerNorm { eps: f64 },
    Dropout { rate: f64, training: bool, seed: u64 },
    EmbeddingLookup { ids: Vec<u32>, ids_shape: Vec<usize> },
    Concat { axis: usize },
    Reshape { shape: Vec<usize> },
    ReduceSum { axis: Option<usize> },
    ReduceMean { axis: Option<usize> },
    Conv2d { stride: usize, padding: usize, reflect_pad: bool },
    BatchNorm { eps: f64, training: bool },
    MaskedFill { mask: Vec<bool>, mask_shape: Vec<usize>, value: f64 },
    Transpose { axes: Vec<usize> },
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Matmul => "matmul",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Div => "div",
            Primitive::Relu => "relu",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Log => "log",
            Primitive::Clamp { .. } => "clamp",
            Primitive::Affine { .. } => "affine",
            Primitive::Softmax { .. } => "softmax",
            Primitive::LayerNorm { .. } => "layer_norm",
            Primitive::Dropout { .. } => "dropout",
            Primitive::EmbeddingLookup { .. } => "embedding_lookup",
            Primitive::Concat { .. } => "concat",
            Primitive::Reshape { .. } => "reshape",
            Primitive::ReduceSum { .. } => "reduce_sum",
            Primitive::ReduceMean { .. } => "reduce_mean",
            Primitive::Conv2d { .. } => "conv2d",
            Primitive::BatchNorm { .. } => "batch_norm",
            Primitive::MaskedFill { .. } => "masked_fill",
            Primitive::Transpose { .. } => "transpose",
        }
    }
}

/// Backward context recorded on a graph node.
pub(crate) enum GradFn<T: Element> {
    Matmul,
    Add,
    Sub,
    Mul,
    Div,
    Relu,
    Sigmoid,
    Log,
    Clamp { lo: T, hi: T },
    AffineScale { scale: T },
    Softmax { axis: usize },
    /// Per-slice (mean, inv_std) over the last axis.
    LayerNorm { stats: Vec<(T, T)> },
    Dropout { mask: Vec<bool>, inv_keep: T },
    Embedding { ids: Vec<u32> },
    Concat { axis: usize },
    Reshape,
    ReduceSum { axis: Option<usize> },
    ReduceMean { axis: Option<usize> },
    Conv2d { stride: usize, padding: usize, reflect_pad: bool },
    /// Per-channel (mean, inv_std) actually used in the forward pass.
    BatchNorm { training: bool, stats: Vec<(T, T)> },
    MaskedFill { mask: Vec<bool>, mask_shape: Vec<usize> },
    Transpose { axes: Vec<usize> },
}

pub(crate) struct Node<T: Element> {
    pub id: u64,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    pub requires_grad: bool,
    pub name: Option<String>,
    pub parents: Vec<Tensor<T>>,
    pub grad_fn: Option<GradFn<T>>,
}

static NEXT_NODE_ID: AtomicU64 = AtomicU64::new(1);

fn next_id() -> u64 {
    NEXT_NODE_ID.fetch_add(1, Ordering::Relaxed)
}

/// Dense n-dimensional array, immutable once built, participating in a
/// differentiable computation graph.
pub struct Tensor<T: Element> {
    inner: Rc<Node<T>>,
}

impl<T: Element> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor { inner: Rc::clone(&self.inner) }
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("dtype", &T::DTYPE)
            .field("requires_grad", &self.inner.requires_grad)
            .field("name", &self.inner.name)
            .finish()
    }
}

fn check_shape(data_len: usize, shape: &[usize]) -> Result<()> {
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::Contract(format!("zero-sized dimension in shape {shape:?}")));
    }
    let numel: usize = shape.iter().product();
    if numel != data_len {
        return Err(Error::Contract(format!(
            "shape {shape:?} implies {numel} elements but {data_len} were provided"
        )));
    }
    Ok(())
}

impl<T: Element> Tensor<T> {
    fn from_node(node: Node<T>) -> Self {
        Tensor { inner: Rc::new(node) }
    }

    /// Non-differentiable leaf.
    pub fn new(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        check_shape(data.len(), shape)?;
        Ok(Self::from_node(Node {
            id: next_id(),
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            name: None,
            parents: Vec::new(),
            grad_fn: None,
        }))
    }

    /// Named trainable leaf; gradients accumulate under `name`.
    pub fn parameter(name: &str, data: Vec<T>, shape: &[usize]) -> Result<Self> {
        check_shape(data.len(), shape)?;
        Ok(Self::from_node(Node {
            id: next_id(),
            shape: shape.to_vec(),
            data,
            requires_grad: true,
            name: Some(name.to_string()),
            parents: Vec::new(),
            grad_fn: None,
        }))
    }

    pub fn scalar(v: T) -> Self {
        Self::new(vec![v], &[1]).expect("scalar shape")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new(vec![T::ZERO; n], shape).expect("zeros shape")
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Self::new(vec![v; n], shape).expect("filled shape")
    }

    pub(crate) fn result(
        data: Vec<T>,
        shape: Vec<usize>,
        parents: Vec<Tensor<T>>,
        grad_fn: GradFn<T>,
    ) -> Self {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        Self::from_node(Node {
            id: next_id(),
            shape,
            data,
            requires_grad,
            name: None,
            parents: if requires_grad { parents } else { Vec::new() },
            grad_fn: if requires_grad { Some(grad_fn) } else { None },
        })
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn len(&self) -> usize {
        self.inner.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.inner.data
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn name(&self) -> Option<&str> {
        self.inner.name.as_deref()
    }

    pub(crate) fn node(&self) -> &Node<T> {
        &self.inner
    }

    /// Value of a single-element tensor.
    pub fn scalar_value(&self) -> Result<T> {
        if self.len() != 1 {
            return Err(Error::Contract(format!(
                "expected a scalar tensor, got shape {:?}",
                self.shape()
            )));
        }
        Ok(self.inner.data[0])
    }

    /// Leaf copy that shares no graph history.
    pub fn detached(&self) -> Self {
        Self::new(self.inner.data.clone(), &self.inner.shape).expect("detached shape")
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.inner.data.iter().map(|v| v.to_f64()).collect()
    }
}

/// Applies one primitive to its operands, recording provenance when any
/// operand participates in gradient computation.
pub fn apply_primitive<T: Element>(kind: Primitive, operands: &[&Tensor<T>]) -> Result<Tensor<T>> {
    kernels::dispatch(kind, operands)
}

// Sugar so block code reads naturally; everything funnels through
// `apply_primitive`.
impl<T: Element> Tensor<T> {
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        apply_primitive(Primitive::Matmul, &[self, rhs])
    }

    pub fn add(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        apply_primitive(Primitive::Add, &[self, rhs])
    }

    pub fn sub(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        apply_primitive(Primitive::Sub, &[self, rhs])
    }

    pub fn mul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        apply_primitive(Primitive::Mul, &[self, rhs])
    }

    pub fn div(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        apply_primitive(Primitive::Div, &[self, rhs])
    }

    pub fn relu(&self) -> Result<Tensor<T>> {
        apply_primitive(Primitive::Relu, &[self])
    }

    pub fn sigmoid(&self) -> Result<Tensor<T>> {
        apply_primitive(Primitive::Sigmoid, &[self])
    }

    pub fn log(&self) -> Result<Tensor<T>> {
        apply_primitive(Primitive::Log, &[self])
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Tensor<T>> {
        apply_primitive(Primitive::Clamp { lo, hi }, &[self])
    }

    pub fn affine(&self, scale: f64, shift: f64) -> Result<Tensor<T>> {
        apply_primitive(Primitive::Affine { scale, shift }, &[self])
    }

    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        apply_primitive(Primitive::Softmax { axis }, &[self])
    }

    pub fn layer_norm(&self, eps: f64) -> Result<Tensor<T>> {
        apply_primitive(Primitive::LayerNorm { eps }, &[self])
    }

    pub fn dropout(&self, rate: f64, training: bool, seed: u64) -> Result<Tensor<T>> {
        apply_primitive(Primitive::Dropout { rate, training, seed }, &[self])
    }

    pub fn concat(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        apply_primitive(Primitive::Concat { axis }, parts)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        apply_primitive(Primitive::Reshape { shape: shape.to_vec() }, &[self])
    }

    pub fn reduce_sum(&self, axis: Option<usize>) -> Result<Tensor<T>> {
        apply_primitive(Primitive::ReduceSum { axis }, &[self])
    }

    pub fn reduce_mean(&self, axis: Option<usize>) -> Result<Tensor<T>> {
        apply_primitive(Primitive::ReduceMean { axis }, &[self])
    }

    pub fn conv2d(
        &self,
        weight: &Tensor<T>,
        stride: usize,
        padding: usize,
        reflect_pad: bool,
    ) -> Result<Tensor<T>> {
        apply_primitive(Primitive::Conv2d { stride, padding, reflect_pad }, &[self, weight])
    }

    pub fn masked_fill(&self, mask: &[bool], mask_shape: &[usize], value: f64) -> Result<Tensor<T>> {
        apply_primitive(
            Primitive::MaskedFill { mask: mask.to_vec(), mask_shape: mask_shape.to_vec(), value },
            &[self],
        )
    }

    pub fn transpose(&self, axes: &[usize]) -> Result<Tensor<T>> {
        apply_primitive(Primitive::Transpose { axes: axes.to_vec() }, &[self])
    }
}
