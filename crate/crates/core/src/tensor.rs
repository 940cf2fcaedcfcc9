//! Dense `f64` tensors with a define-by-run reverse-mode tape.
//!
//! Values live in [`Tensor`]; differentiation happens through [`Var`] handles
//! recorded on a [`Tape`]. A tape is single-use: [`Tape::backward`] consumes
//! it, and a second call fails until [`Tape::reset`] is invoked.
//!
//! Broadcasting is limited to bias-add (inside [`Tape::conv2d`] and
//! [`Tape::linear`]) and scalar-times-tensor ([`Tape::scale`]). Every other
//! binary op requires identical shapes.

use std::cell::{Cell, RefCell};
use std::collections::hash_map::DefaultHasher;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::rc::Rc;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: non-finite input value")]
    NonFinite { op: &'static str },
    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward: tape already consumed; call reset() before reuse")]
    TapeConsumed,
    #[error("backward: tape is empty")]
    EmptyTape,
    #[error("grad_check: function returned a non-finite value")]
    NonFiniteObjective,
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Row-major dense array of `f64`.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::Shape {
                op: "tensor",
                detail: format!("zero-sized dimension in {shape:?}"),
            });
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::Shape {
                op: "tensor",
                detail: format!("shape {shape:?} needs {n} values, got {}", data.len()),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(TensorError::Shape {
                op: "reshape",
                detail: format!("{:?} -> {shape:?}", self.shape),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rows `start..end` along the leading axis.
    pub fn slice_batch(&self, start: usize, end: usize) -> Tensor {
        let row: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Tensor {
            shape,
            data: self.data[start * row..end * row].to_vec(),
        }
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
        let first = items.first().ok_or_else(|| TensorError::Shape {
            op: "stack",
            detail: "no tensors".into(),
        })?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(TensorError::Shape {
                    op: "stack",
                    detail: format!("{:?} vs {:?}", t.shape, first.shape),
                });
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data })
    }
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape == b.shape {
        Ok(())
    } else {
        Err(TensorError::Shape {
            op,
            detail: format!("{:?} vs {:?}", a.shape, b.shape),
        })
    }
}

/// Geometry of a 2-D convolution, shared by forward and adjoint.
#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }
    fn spatial_out(&self) -> usize {
        self.ho * self.wo
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Sum(usize),
    Mean(usize),
    Mse(usize, usize),
    Relu(usize),
    Sigmoid(usize),
    LogSigmoid(usize),
    Reshape(usize),
    Concat { inputs: Vec<usize>, sizes: Vec<usize> },
    MaxPool2d { input: usize, argmax: Vec<usize> },
    Upsample2x(usize),
    Conv2d { x: usize, w: usize, b: usize, geom: ConvGeom },
    Linear { x: usize, w: usize, b: usize },
    Bce { p: usize, targets: Vec<f64>, clamped: Vec<bool> },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Operation record for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
    clamp_count: Cell<usize>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape.clone()
    }

    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }
}

/// Adjoints produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros shaped like it when it was unreachable.
    pub fn get_or_zeros(&self, v: Var<'_>) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&v.shape()),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Discards every recorded node so the tape can be reused.
    pub fn reset(&self) {
        self.nodes.borrow_mut().clear();
        self.consumed.set(false);
        self.clamp_count.set(0);
    }

    /// Number of probabilities clamped by [`Tape::bce`] on this tape.
    pub fn clamp_count(&self) -> usize {
        self.clamp_count.get()
    }

    /// Hash of the branch taken at every non-smooth op: ReLU input signs,
    /// max-pool winners and probability clamps. Two forward passes with the
    /// same pattern lie on the same smooth piece of the recorded function.
    pub fn branch_pattern(&self) -> u64 {
        let nodes = self.nodes.borrow();
        let mut h = DefaultHasher::new();
        for node in nodes.iter() {
            match &node.op {
                Op::Relu(a) => nodes[*a].value.data.iter().for_each(|&x| (x > 0.0).hash(&mut h)),
                Op::MaxPool2d { argmax, .. } => argmax.hash(&mut h),
                Op::Bce { clamped, .. } => clamped.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn val(&self, v: Var<'_>) -> Rc<Tensor> {
        self.nodes.borrow()[v.id].value.clone()
    }

    fn rg(&self, ids: &[Var<'_>]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|v| nodes[v.id].requires_grad)
    }

    /// Records a leaf. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Result<Var<'_>> {
        check_finite("leaf", &value)?;
        Ok(self.push(value, Op::Leaf, requires_grad))
    }

    /// Records a constant (non-differentiable) leaf.
    pub fn constant(&self, value: Tensor) -> Result<Var<'_>> {
        self.leaf(value, false)
    }

    fn binary<'a>(
        &'a self,
        op_name: &'static str,
        a: Var<'a>,
        b: Var<'a>,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'a>> {
        let (ta, tb) = (self.val(a), self.val(b));
        same_shape(op_name, &ta, &tb)?;
        check_finite(op_name, &ta)?;
        check_finite(op_name, &tb)?;
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor {
            shape: ta.shape.clone(),
            data,
        };
        Ok(self.push(out, op, self.rg(&[a, b])))
    }

    pub fn add<'a>(&'a self, a: Var<'a>, b: Var<'a>) -> Result<Var<'a>> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a.id, b.id))
    }

    pub fn sub<'a>(&'a self, a: Var<'a>, b: Var<'a>) -> Result<Var<'a>> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a.id, b.id))
    }

    pub fn mul<'a>(&'a self, a: Var<'a>, b: Var<'a>) -> Result<Var<'a>> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a.id, b.id))
    }

    pub fn scale<'a>(&'a self, a: Var<'a>, k: f64) -> Result<Var<'a>> {
        let ta = self.val(a);
        check_finite("scale", &ta)?;
        let out = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().map(|x| x * k).collect(),
        };
        Ok(self.push(out, Op::Scale(a.id, k), self.rg(&[a])))
    }

    pub fn sum<'a>(&'a self, a: Var<'a>) -> Result<Var<'a>> {
        let ta = self.val(a);
        check_finite("sum", &ta)?;
        let s = ta.data.iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(a.id), self.rg(&[a])))
    }

    pub fn mean<'a>(&'a self, a: Var<'a>) -> Result<Var<'a>> {
        let ta = self.val(a);
        check_finite("mean", &ta)?;
        let s = ta.data.iter().sum::<f64>() / ta.len() as f64;
        Ok(self.push(Tensor::scalar(s), Op::Mean(a.id), self.rg(&[a])))
    }

    /// Mean squared error `mean((a - b)^2)`.
    pub fn mse<'a>(&'a self, a: Var<'a>, b: Var<'a>) -> Result<Var<'a>> {
        let (ta, tb) = (self.val(a), self.val(b));
        same_shape("mse", &ta, &tb)?;
        check_finite("mse", &ta)?;
        check_finite("mse", &tb)?;
        let s: f64 = ta
            .data
            .iter()
            .zip(&tb.data)
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let out = Tensor::scalar(s / ta.len() as f64);
        Ok(self.push(out, Op::Mse(a.id, b.id), self.rg(&[a, b])))
    }

    fn unary<'a>(
        &'a self,
        op_name: &'static str,
        a: Var<'a>,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<Var<'a>> {
        let ta = self.val(a);
        check_finite(op_name, &ta)?;
        let out = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().map(|&x| f(x)).collect(),
        };
        Ok(self.push(out, op, self.rg(&[a])))
    }

    pub fn relu<'a>(&'a self, a: Var<'a>) -> Result<Var<'a>> {
        self.unary("relu", a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a.id))
    }

    pub fn sigmoid<'a>(&'a self, a: Var<'a>) -> Result<Var<'a>> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a.id))
    }

    /// `log(sigmoid(x))` without overflow for large `|x|`.
    pub fn log_sigmoid<'a>(&'a self, a: Var<'a>) -> Result<Var<'a>> {
        self.unary("log_sigmoid", a, log_sigmoid, Op::LogSigmoid(a.id))
    }

    pub fn reshape<'a>(&'a self, a: Var<'a>, shape: &[usize]) -> Result<Var<'a>> {
        let ta = self.val(a);
        let out = (*ta).clone().reshaped(shape)?;
        Ok(self.push(out, Op::Reshape(a.id), self.rg(&[a])))
    }

    /// `[B, ...] -> [B, prod(...)]`.
    pub fn flatten<'a>(&'a self, a: Var<'a>) -> Result<Var<'a>> {
        let shape = a.shape();
        let rest: usize = shape[1..].iter().product();
        self.reshape(a, &[shape[0], rest])
    }

    /// Concatenates `[B, C_i, ...]` tensors along axis 1.
    pub fn concat<'a>(&'a self, inputs: &[Var<'a>]) -> Result<Var<'a>> {
        let vals: Vec<Rc<Tensor>> = inputs.iter().map(|v| self.val(*v)).collect();
        let first = vals.first().ok_or_else(|| TensorError::Shape {
            op: "concat",
            detail: "no inputs".into(),
        })?;
        if first.shape.len() < 2 {
            return Err(TensorError::Shape {
                op: "concat",
                detail: format!("need rank >= 2, got {:?}", first.shape),
            });
        }
        let batch = first.shape[0];
        let tail = &first.shape[2..];
        let mut sizes = Vec::new();
        for t in &vals {
            check_finite("concat", t)?;
            if t.shape.len() != first.shape.len() || t.shape[0] != batch || &t.shape[2..] != tail {
                return Err(TensorError::Shape {
                    op: "concat",
                    detail: format!("{:?} vs {:?}", t.shape, first.shape),
                });
            }
            sizes.push(t.len() / batch);
        }
        let row: usize = sizes.iter().sum();
        let mut data = Vec::with_capacity(row * batch);
        for b in 0..batch {
            for (t, &sz) in vals.iter().zip(&sizes) {
                data.extend_from_slice(&t.data[b * sz..(b + 1) * sz]);
            }
        }
        let mut shape = first.shape.clone();
        shape[1] = vals.iter().map(|t| t.shape[1]).sum();
        let op = Op::Concat {
            inputs: inputs.iter().map(|v| v.id).collect(),
            sizes,
        };
        Ok(self.push(Tensor { shape, data }, op, self.rg(inputs)))
    }

    /// 2x2 max pooling with stride 2 over `[B, C, H, W]`; odd edges are dropped.
    pub fn max_pool2d<'a>(&'a self, a: Var<'a>) -> Result<Var<'a>> {
        let ta = self.val(a);
        if ta.shape.len() != 4 || ta.shape[2] < 2 || ta.shape[3] < 2 {
            return Err(TensorError::Shape {
                op: "max_pool2d",
                detail: format!("need [B,C,H>=2,W>=2], got {:?}", ta.shape),
            });
        }
        check_finite("max_pool2d", &ta)?;
        let (b, c, h, w) = (ta.shape[0], ta.shape[1], ta.shape[2], ta.shape[3]);
        let (ho, wo) = (h / 2, w / 2);
        let mut data = Vec::with_capacity(b * c * ho * wo);
        let mut argmax = Vec::with_capacity(b * c * ho * wo);
        for plane in 0..b * c {
            let base = plane * h * w;
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = base + 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * i + di) * w + 2 * j + dj;
                        if ta.data[idx] > ta.data[best] {
                            best = idx;
                        }
                    }
                    data.push(ta.data[best]);
                    argmax.push(best);
                }
            }
        }
        let out = Tensor {
            shape: vec![b, c, ho, wo],
            data,
        };
        Ok(self.push(out, Op::MaxPool2d { input: a.id, argmax }, self.rg(&[a])))
    }

    /// Nearest-neighbour 2x upsampling of `[B, C, H, W]`.
    pub fn upsample2x<'a>(&'a self, a: Var<'a>) -> Result<Var<'a>> {
        let ta = self.val(a);
        if ta.shape.len() != 4 {
            return Err(TensorError::Shape {
                op: "upsample2x",
                detail: format!("need [B,C,H,W], got {:?}", ta.shape),
            });
        }
        check_finite("upsample2x", &ta)?;
        let (b, c, h, w) = (ta.shape[0], ta.shape[1], ta.shape[2], ta.shape[3]);
        let mut data = vec![0.0; b * c * 4 * h * w];
        for plane in 0..b * c {
            let src = &ta.data[plane * h * w..(plane + 1) * h * w];
            let dst = &mut data[plane * 4 * h * w..(plane + 1) * 4 * h * w];
            for i in 0..2 * h {
                for j in 0..2 * w {
                    dst[i * 2 * w + j] = src[(i / 2) * w + j / 2];
                }
            }
        }
        let out = Tensor {
            shape: vec![b, c, 2 * h, 2 * w],
            data,
        };
        Ok(self.push(out, Op::Upsample2x(a.id), self.rg(&[a])))
    }

    /// Cross-correlation of `x: [B,C,H,W]` with `w: [K,C,kh,kw]` plus `bias: [K]`.
    pub fn conv2d<'a>(
        &'a self,
        x: Var<'a>,
        w: Var<'a>,
        bias: Var<'a>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'a>> {
        let (tx, tw, tb) = (self.val(x), self.val(w), self.val(bias));
        let err = |detail: String| TensorError::Shape {
            op: "conv2d",
            detail,
        };
        if tx.shape.len() != 4 || tw.shape.len() != 4 {
            return Err(err(format!(
                "input {:?} and weight {:?} must both be rank 4",
                tx.shape, tw.shape
            )));
        }
        if tx.shape[1] != tw.shape[1] {
            return Err(err(format!(
                "input channels {} != weight channels {} (input {:?}, weight {:?})",
                tx.shape[1], tw.shape[1], tx.shape, tw.shape
            )));
        }
        if tb.shape != [tw.shape[0]] {
            return Err(err(format!(
                "bias {:?} must be [{}]",
                tb.shape, tw.shape[0]
            )));
        }
        if stride == 0 {
            return Err(err("stride must be >= 1".into()));
        }
        let (h, wd) = (tx.shape[2], tx.shape[3]);
        let (kh, kw) = (tw.shape[2], tw.shape[3]);
        if kh > h + 2 * pad || kw > wd + 2 * pad {
            return Err(err(format!(
                "kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                wd + 2 * pad
            )));
        }
        check_finite("conv2d", &tx)?;
        check_finite("conv2d", &tw)?;
        check_finite("conv2d", &tb)?;
        let geom = ConvGeom {
            batch: tx.shape[0],
            c_in: tx.shape[1],
            h,
            w: wd,
            c_out: tw.shape[0],
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (wd + 2 * pad - kw) / stride + 1,
        };
        let out = conv_forward(&geom, &tx.data, &tw.data, &tb.data);
        let shape = vec![geom.batch, geom.c_out, geom.ho, geom.wo];
        let op = Op::Conv2d {
            x: x.id,
            w: w.id,
            b: bias.id,
            geom,
        };
        Ok(self.push(Tensor { shape, data: out }, op, self.rg(&[x, w, bias])))
    }

    /// `x: [B, In]`, `w: [Out, In]`, `b: [Out]` -> `x w^T + b`.
    pub fn linear<'a>(&'a self, x: Var<'a>, w: Var<'a>, b: Var<'a>) -> Result<Var<'a>> {
        let (tx, tw, tb) = (self.val(x), self.val(w), self.val(b));
        if tx.shape.len() != 2 || tw.shape.len() != 2 || tx.shape[1] != tw.shape[1] || tb.shape != [tw.shape[0]] {
            return Err(TensorError::Shape {
                op: "linear",
                detail: format!("x {:?}, w {:?}, b {:?}", tx.shape, tw.shape, tb.shape),
            });
        }
        check_finite("linear", &tx)?;
        check_finite("linear", &tw)?;
        check_finite("linear", &tb)?;
        let (batch, inp, outp) = (tx.shape[0], tx.shape[1], tw.shape[0]);
        let mut data = Vec::with_capacity(batch * outp);
        for _ in 0..batch {
            data.extend_from_slice(&tb.data);
        }
        // out[B,Out] += x[B,In] * w^T[In,Out]
        gemm(batch, inp, outp, &tx.data, inp as isize, 1, &tw.data, 1, inp as isize, &mut data, 1.0);
        let out = Tensor {
            shape: vec![batch, outp],
            data,
        };
        Ok(self.push(out, Op::Linear { x: x.id, w: w.id, b: b.id }, self.rg(&[x, w, b])))
    }

    /// Mean binary cross-entropy of probabilities `p` against `targets` in {0,1}.
    /// Probabilities are clamped to `[1e-12, 1 - 1e-12]`; clamped entries pass no gradient.
    pub fn bce<'a>(&'a self, p: Var<'a>, targets: &[f64]) -> Result<Var<'a>> {
        let tp = self.val(p);
        if tp.len() != targets.len() {
            return Err(TensorError::Shape {
                op: "bce",
                detail: format!("{} probabilities vs {} targets", tp.len(), targets.len()),
            });
        }
        check_finite("bce", &tp)?;
        let mut clamped = Vec::with_capacity(tp.len());
        let mut total = 0.0;
        for (&pi, &yi) in tp.data.iter().zip(targets) {
            let c = pi.clamp(PROB_EPS, 1.0 - PROB_EPS);
            clamped.push(c != pi);
            total -= yi * c.ln() + (1.0 - yi) * (1.0 - c).ln();
        }
        let n_clamped = clamped.iter().filter(|&&c| c).count();
        self.clamp_count.set(self.clamp_count.get() + n_clamped);
        let out = Tensor::scalar(total / tp.len() as f64);
        let op = Op::Bce {
            p: p.id,
            targets: targets.to_vec(),
            clamped,
        };
        Ok(self.push(out, op, self.rg(&[p])))
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if self.consumed.get() {
            return Err(TensorError::TapeConsumed);
        }
        let nodes = self.nodes.borrow();
        if nodes.is_empty() {
            return Err(TensorError::EmptyTape);
        }
        if !nodes[loss.id].value.is_scalar() {
            return Err(TensorError::NonScalarLoss(nodes[loss.id].value.shape.clone()));
        }
        self.consumed.set(true);

        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        adj[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                adj[id] = None;
                continue;
            }
            let Some(g) = adj[id].take() else { continue };
            propagate(&nodes, id, &g, &mut adj);
            if matches!(node.op, Op::Leaf) {
                adj[id] = Some(g);
            }
        }

        let grads = adj
            .into_iter()
            .enumerate()
            .map(|(id, g)| {
                g.map(|data| Tensor {
                    shape: nodes[id].value.shape.clone(),
                    data,
                })
            })
            .collect();
        Ok(Gradients { grads })
    }
}

pub const PROB_EPS: f64 = 1e-12;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sigmoid(x: f64) -> f64 {
    // log(sigmoid(x)) = -softplus(-x)
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, f: impl FnOnce(&mut [f64])) {
    if !nodes[id].requires_grad {
        return;
    }
    let slot = adj[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()]);
    f(slot);
}

fn propagate(nodes: &[Node], id: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(adj, nodes, *a, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            accumulate(adj, nodes, *b, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
        }
        Op::Sub(a, b) => {
            accumulate(adj, nodes, *a, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            accumulate(adj, nodes, *b, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s -= g));
        }
        Op::Mul(a, b) => {
            let (va, vb) = (&nodes[*a].value.data, &nodes[*b].value.data);
            accumulate(adj, nodes, *a, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * vb[i];
                }
            });
            accumulate(adj, nodes, *b, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * va[i];
                }
            });
        }
        Op::Scale(a, k) => {
            accumulate(adj, nodes, *a, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += k * g));
        }
        Op::Sum(a) => {
            accumulate(adj, nodes, *a, |s| s.iter_mut().for_each(|s| *s += g[0]));
        }
        Op::Mean(a) => {
            let n = nodes[*a].value.len() as f64;
            accumulate(adj, nodes, *a, |s| s.iter_mut().for_each(|s| *s += g[0] / n));
        }
        Op::Mse(a, b) => {
            let (va, vb) = (&nodes[*a].value.data, &nodes[*b].value.data);
            let k = 2.0 * g[0] / va.len() as f64;
            accumulate(adj, nodes, *a, |s| {
                for i in 0..s.len() {
                    s[i] += k * (va[i] - vb[i]);
                }
            });
            accumulate(adj, nodes, *b, |s| {
                for i in 0..s.len() {
                    s[i] -= k * (va[i] - vb[i]);
                }
            });
        }
        Op::Relu(a) => {
            let va = &nodes[*a].value.data;
            accumulate(adj, nodes, *a, |s| {
                for i in 0..s.len() {
                    if va[i] > 0.0 {
                        s[i] += g[i];
                    }
                }
            });
        }
        Op::Sigmoid(a) => {
            let out = &node.value.data;
            accumulate(adj, nodes, *a, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * out[i] * (1.0 - out[i]);
                }
            });
        }
        Op::LogSigmoid(a) => {
            let va = &nodes[*a].value.data;
            accumulate(adj, nodes, *a, |s| {
                for i in 0..s.len() {
                    // d/dx log(sigmoid(x)) = sigmoid(-x)
                    s[i] += g[i] * sigmoid(-va[i]);
                }
            });
        }
        Op::Reshape(a) => {
            accumulate(adj, nodes, *a, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
        }
        Op::Concat { inputs, sizes } => {
            let row: usize = sizes.iter().sum();
            let batch = g.len() / row;
            let mut offset = 0;
            for (&inp, &sz) in inputs.iter().zip(sizes) {
                accumulate(adj, nodes, inp, |s| {
                    for b in 0..batch {
                        let src = &g[b * row + offset..b * row + offset + sz];
                        s[b * sz..(b + 1) * sz].iter_mut().zip(src).for_each(|(s, g)| *s += g);
                    }
                });
                offset += sz;
            }
        }
        Op::MaxPool2d { input, argmax } => {
            accumulate(adj, nodes, *input, |s| {
                for (gi, &src) in g.iter().zip(argmax) {
                    s[src] += gi;
                }
            });
        }
        Op::Upsample2x(a) => {
            let shape = &nodes[*a].value.shape;
            let (planes, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
            accumulate(adj, nodes, *a, |s| {
                for p in 0..planes {
                    let src = &g[p * 4 * h * w..(p + 1) * 4 * h * w];
                    let dst = &mut s[p * h * w..(p + 1) * h * w];
                    for i in 0..2 * h {
                        for j in 0..2 * w {
                            dst[(i / 2) * w + j / 2] += src[i * 2 * w + j];
                        }
                    }
                }
            });
        }
        Op::Conv2d { x, w, b, geom } => {
            let (vx, vw) = (&nodes[*x].value.data, &nodes[*w].value.data);
            let need_x = nodes[*x].requires_grad;
            let need_w = nodes[*w].requires_grad;
            let (dx, dw, db) = conv_backward(geom, vx, vw, g, need_x, need_w);
            if let Some(dx) = dx {
                accumulate(adj, nodes, *x, |s| s.iter_mut().zip(&dx).for_each(|(s, g)| *s += g));
            }
            if let Some(dw) = dw {
                accumulate(adj, nodes, *w, |s| s.iter_mut().zip(&dw).for_each(|(s, g)| *s += g));
            }
            accumulate(adj, nodes, *b, |s| s.iter_mut().zip(&db).for_each(|(s, g)| *s += g));
        }
        Op::Linear { x, w, b } => {
            let (vx, vw) = (&nodes[*x].value, &nodes[*w].value);
            let (batch, inp, outp) = (vx.shape[0], vx.shape[1], vw.shape[0]);
            // dx[B,In] = g[B,Out] * w[Out,In]
            accumulate(adj, nodes, *x, |s| {
                gemm(batch, outp, inp, g, outp as isize, 1, &vw.data, inp as isize, 1, s, 1.0);
            });
            // dw[Out,In] = g^T[Out,B] * x[B,In]
            accumulate(adj, nodes, *w, |s| {
                gemm(outp, batch, inp, g, 1, outp as isize, &vx.data, inp as isize, 1, s, 1.0);
            });
            accumulate(adj, nodes, *b, |s| {
                for r in 0..batch {
                    for o in 0..outp {
                        s[o] += g[r * outp + o];
                    }
                }
            });
        }
        Op::Bce { p, targets, clamped } => {
            let vp = &nodes[*p].value.data;
            let n = vp.len() as f64;
            accumulate(adj, nodes, *p, |s| {
                for i in 0..s.len() {
                    if clamped[i] {
                        continue;
                    }
                    let (pi, yi) = (vp[i], targets[i]);
                    s[i] += g[0] * (-yi / pi + (1.0 - yi) / (1.0 - pi)) / n;
                }
            });
        }
    }
}

/// `c[m,n] = beta_c * c + a[m,k] * b[k,n]` with explicit strides (c row-major, contiguous).
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
    beta: f64,
) {
    assert!(c.len() >= m * n);
    // SAFETY: slice lengths cover every index reachable from the given
    // dimensions and strides; callers pass strides derived from the shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(geom: &ConvGeom, x: &[f64], col: &mut [f64]) {
    let (h, w, ho, wo) = (geom.h as isize, geom.w as isize, geom.ho, geom.wo);
    let (s, p) = (geom.stride as isize, geom.pad as isize);
    let mut row = 0;
    for c in 0..geom.c_in {
        let plane = &x[c * geom.h * geom.w..(c + 1) * geom.h * geom.w];
        for ki in 0..geom.kh as isize {
            for kj in 0..geom.kw as isize {
                let dst = &mut col[row * ho * wo..(row + 1) * ho * wo];
                for oi in 0..ho {
                    let ii = oi as isize * s - p + ki;
                    let line = &mut dst[oi * wo..(oi + 1) * wo];
                    if ii < 0 || ii >= h {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[(ii * w) as usize..((ii + 1) * w) as usize];
                    for (oj, v) in line.iter_mut().enumerate() {
                        let jj = oj as isize * s - p + kj;
                        *v = if jj < 0 || jj >= w { 0.0 } else { src[jj as usize] };
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im(geom: &ConvGeom, col: &[f64], dx: &mut [f64]) {
    let (h, w, ho, wo) = (geom.h as isize, geom.w as isize, geom.ho, geom.wo);
    let (s, p) = (geom.stride as isize, geom.pad as isize);
    let mut row = 0;
    for c in 0..geom.c_in {
        let plane = &mut dx[c * geom.h * geom.w..(c + 1) * geom.h * geom.w];
        for ki in 0..geom.kh as isize {
            for kj in 0..geom.kw as isize {
                let src = &col[row * ho * wo..(row + 1) * ho * wo];
                for oi in 0..ho {
                    let ii = oi as isize * s - p + ki;
                    if ii < 0 || ii >= h {
                        continue;
                    }
                    for oj in 0..wo {
                        let jj = oj as isize * s - p + kj;
                        if jj >= 0 && jj < w {
                            plane[(ii * w + jj) as usize] += src[oi * wo + oj];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn conv_forward(geom: &ConvGeom, x: &[f64], w: &[f64], bias: &[f64]) -> Vec<f64> {
    let (patch, sp) = (geom.patch(), geom.spatial_out());
    let in_sz = geom.c_in * geom.h * geom.w;
    let out_sz = geom.c_out * sp;
    let mut out = vec![0.0; geom.batch * out_sz];
    let mut col = vec![0.0; patch * sp];
    for bi in 0..geom.batch {
        im2col(geom, &x[bi * in_sz..(bi + 1) * in_sz], &mut col);
        let dst = &mut out[bi * out_sz..(bi + 1) * out_sz];
        for (k, &bk) in bias.iter().enumerate() {
            dst[k * sp..(k + 1) * sp].fill(bk);
        }
        // out[K, sp] += w[K, patch] * col[patch, sp]
        gemm(geom.c_out, patch, sp, w, patch as isize, 1, &col, sp as isize, 1, dst, 1.0);
    }
    out
}

#[allow(clippy::type_complexity)]
fn conv_backward(
    geom: &ConvGeom,
    x: &[f64],
    w: &[f64],
    g: &[f64],
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Vec<f64>) {
    let (patch, sp) = (geom.patch(), geom.spatial_out());
    let in_sz = geom.c_in * geom.h * geom.w;
    let out_sz = geom.c_out * sp;
    let mut dx = need_x.then(|| vec![0.0; geom.batch * in_sz]);
    let mut dw = need_w.then(|| vec![0.0; geom.c_out * patch]);
    let mut db = vec![0.0; geom.c_out];
    let mut col = vec![0.0; patch * sp];
    let mut dcol = vec![0.0; patch * sp];
    for bi in 0..geom.batch {
        let gb = &g[bi * out_sz..(bi + 1) * out_sz];
        for k in 0..geom.c_out {
            db[k] += gb[k * sp..(k + 1) * sp].iter().sum::<f64>();
        }
        if let Some(dw) = dw.as_mut() {
            im2col(geom, &x[bi * in_sz..(bi + 1) * in_sz], &mut col);
            // dw[K, patch] += g[K, sp] * col^T[sp, patch]
            gemm(geom.c_out, sp, patch, gb, sp as isize, 1, &col, 1, sp as isize, dw, 1.0);
        }
        if let Some(dx) = dx.as_mut() {
            // dcol[patch, sp] = w^T[patch, K] * g[K, sp]
            gemm(patch, geom.c_out, sp, w, 1, patch as isize, gb, sp as isize, 1, &mut dcol, 0.0);
            col2im(geom, &dcol, &mut dx[bi * in_sz..(bi + 1) * in_sz]);
        }
    }
    (dx, dw, db)
}

/// Outcome of a finite-difference gradient comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub tol: f64,
    pub passed: bool,
}

/// Relative error with an absolute floor so near-zero gradients don't blow up.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Compares `analytic` against central differences of `f` around `params`.
pub fn grad_check<F>(mut f: F, params: &[f64], analytic: &[f64], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(params.len(), analytic.len(), "analytic gradient length must match params");
    let mut x = params.to_vec();
    let base = f(&x);
    if !base.is_finite() {
        return Err(TensorError::NonFiniteObjective);
    }
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: analytic.first().copied().unwrap_or(0.0),
        numeric: 0.0,
        tol,
        passed: true,
    };
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let fp = f(&x);
        x[i] = orig - h;
        let fm = f(&x);
        x[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(TensorError::NonFiniteObjective);
        }
        let numeric = (fp - fm) / (2.0 * h);
        let err = rel_error(analytic[i], numeric);
        if i == 0 || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = i;
            report.analytic = analytic[i];
            report.numeric = numeric;
        }
    }
    report.passed = report.max_rel_error < tol;
    Ok(report)
}
