//! Reverse-mode differentiation over a creation-ordered tape.
//!
//! A [`Tape`] owns every value produced during a forward pass. [`Var`] is a
//! cheap copyable handle into it; all differentiable operations are methods
//! on `Var`. Because nodes are appended in creation order, the tape is
//! topologically sorted by construction and [`Var::backward`] simply walks
//! it in reverse, visiting each node once.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, PlaneStats};
use crate::tensor::{Real, Tensor};

/// Stabilizer for [`Var::div`]: denominators with magnitude below this are
/// raised to it (sign preserved, zero treated as positive).
pub const DIV_EPS: f64 = 1e-4;

/// Variance epsilon inside instance normalization.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    /// `[N, C, 1, 1]` operand against `[N, C, H, W]`.
    Channel,
}

enum Op<T: Real> {
    Leaf,
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
    },
    Add(usize, usize, Bcast),
    Sub(usize, usize, Bcast),
    Mul(usize, usize, Bcast),
    Div(usize, usize, Bcast),
    ScaleBy { x: usize, s: usize },
    Affine { x: usize, mul: T },
    Relu(usize),
    Sigmoid(usize),
    PRelu { x: usize, slope: usize },
    Clamp { x: usize, lo: T, hi: T },
    Square(usize),
    Sqrt(usize),
    Sum(usize),
    Mean(usize),
    GlobalAvgPool(usize),
    Concat(Vec<usize>),
    SliceChannels { x: usize, start: usize },
    UpNearest2(usize),
    Laplacian(usize),
    InstanceNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        stats: PlaneStats<T>,
    },
    Reshape(usize),
}

impl<T: Real> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::ScaleBy { .. } => "scale",
            Op::Affine { .. } => "affine",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::PRelu { .. } => "prelu",
            Op::Clamp { .. } => "clamp",
            Op::Square(_) => "square",
            Op::Sqrt(_) => "sqrt",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::Concat(_) => "concat",
            Op::SliceChannels { .. } => "slice_channels",
            Op::UpNearest2(_) => "up_nearest2",
            Op::Laplacian(_) => "laplacian",
            Op::InstanceNorm { .. } => "instance_norm",
            Op::Reshape(_) => "reshape",
        }
    }
}

struct Node<T: Real> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
    /// Fingerprint of which side of each kink the inputs fell on (0 for smooth ops).
    region: u64,
}

/// Recording of one forward pass.
pub struct Tape<T: Real = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<Vec<(String, usize)>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(Vec::new()),
        }
    }
}

impl<T: Real> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.len()).finish()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real = f32> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Real> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

fn region_hash(acc: u64, bit: u64) -> u64 {
    (acc ^ bit).wrapping_mul(0x0100_0000_01b3).rotate_left(7)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool, region: u64) -> Result<Var<'_, T>> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
            region,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    /// Records an input. Gradients are tracked iff `tensor.requires_grad`.
    pub fn leaf(&self, tensor: Tensor<T>) -> Result<Var<'_, T>> {
        let rg = tensor.requires_grad;
        let mut t = tensor;
        t.grad = None;
        self.push(t, Op::Leaf, rg, 0)
    }

    pub fn constant(&self, tensor: Tensor<T>) -> Result<Var<'_, T>> {
        self.leaf(tensor.with_requires_grad(false))
    }

    /// Records a named trainable parameter.
    pub fn param(&self, name: &str, tensor: &Tensor<T>) -> Result<Var<'_, T>> {
        let mut t = tensor.clone();
        t.requires_grad = true;
        let v = self.leaf(t)?;
        self.params.borrow_mut().push((name.to_string(), v.id));
        Ok(v)
    }

    /// Parameter names in registration order with their handles.
    pub fn params(&self) -> Vec<(String, Var<'_, T>)> {
        self.params
            .borrow()
            .iter()
            .map(|(n, id)| (n.clone(), Var { tape: self, id: *id }))
            .collect()
    }

    /// Combined kink fingerprint of every non-smooth op on the tape.
    pub fn region_signature(&self) -> u64 {
        self.nodes
            .borrow()
            .iter()
            .fold(0xcbf2_9ce4_8422_2325, |acc, n| region_hash(acc, n.region))
    }

    fn value(&self, id: usize) -> Rc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Channel-axis concatenation of 4-d tensors.
    pub fn concat<'t>(&'t self, xs: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = xs.first().ok_or_else(|| Error::dim("concat", "no inputs"))?;
        let [n, _, h, w] = first.value().dims4()?;
        let mut channels = 0;
        let vals: Vec<_> = xs.iter().map(|v| v.value()).collect();
        for v in &vals {
            let [vn, vc, vh, vw] = v.dims4()?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(Error::dim(
                    "concat",
                    format!("{:?} does not align with {:?}", v.shape(), first.shape()),
                ));
            }
            channels += vc;
        }
        let mut data = Vec::with_capacity(n * channels * h * w);
        for item in 0..n {
            for v in &vals {
                let per = v.shape()[1] * h * w;
                data.extend_from_slice(&v.data()[item * per..(item + 1) * per]);
            }
        }
        let rg = xs.iter().any(|v| v.requires_grad());
        self.push(
            Tensor::new(vec![n, channels, h, w], data)?,
            Op::Concat(xs.iter().map(|v| v.id).collect()),
            rg,
            0,
        )
    }
}

/// Activation selector for [`Var::activation`].
#[derive(Clone, Copy, Debug)]
pub enum Activation<'t, T: Real = f32> {
    Relu,
    PRelu(Var<'t, T>),
    Sigmoid,
}

/// Parameterless activation kinds, parsed from names.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActivationKind {
    Relu,
    PRelu,
    Sigmoid,
}

impl std::str::FromStr for ActivationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(ActivationKind::Relu),
            "prelu" => Ok(ActivationKind::PRelu),
            "sigmoid" => Ok(ActivationKind::Sigmoid),
            other => Err(Error::config(format!("unknown activation kind `{other}`"))),
        }
    }
}

fn bcast_kind(op: &'static str, a: &[usize], b: &[usize]) -> Result<Bcast> {
    if a == b {
        return Ok(Bcast::Same);
    }
    if let ([an, ac, _, _], [bn, bc, 1, 1]) = (a, b) {
        if an == bn && ac == bc {
            return Ok(Bcast::Channel);
        }
    }
    Err(Error::dim(op, format!("cannot combine {a:?} with {b:?}")))
}

/// Applies `f(a_i, b_j)` with `b` optionally broadcast per channel plane.
fn zip_bcast<T: Real>(a: &Tensor<T>, b: &Tensor<T>, mode: Bcast, f: impl Fn(T, T) -> T) -> Vec<T> {
    match mode {
        Bcast::Same => a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
        Bcast::Channel => {
            let plane = a.shape()[2] * a.shape()[3];
            a.data()
                .chunks(plane)
                .zip(b.data())
                .flat_map(|(chunk, &y)| chunk.iter().map(move |&x| (x, y)))
                .map(|(x, y)| f(x, y))
                .collect()
        }
    }
}

/// Folds a full-shape gradient back onto a possibly broadcast operand.
fn reduce_bcast<T: Real>(g: Vec<T>, mode: Bcast, plane: usize) -> Vec<T> {
    match mode {
        Bcast::Same => g,
        Bcast::Channel => g
            .chunks(plane)
            .map(|c| T::lit(c.iter().map(|v| v.as_f64()).sum()))
            .collect(),
    }
}

fn stable_den<T: Real>(b: T, eps: T) -> T {
    if b.abs() >= eps {
        b
    } else if b < T::zero() {
        -eps
    } else {
        eps
    }
}

fn sum_f64<T: Real>(xs: &[T]) -> f64 {
    xs.iter().map(|v| v.as_f64()).sum()
}

impl<'t, T: Real> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(self.id)
    }

    fn unary(&self, value: Vec<T>, shape: Vec<usize>, op: Op<T>, region: u64) -> Result<Self> {
        self.tape
            .push(Tensor::new(shape, value)?, op, self.requires_grad(), region)
    }

    fn binary(&self, other: Var<'t, T>, name: &'static str, make: fn(usize, usize, Bcast) -> Op<T>, f: impl Fn(T, T) -> T) -> Result<Self> {
        let (a, b) = (self.value(), other.value());
        let mode = bcast_kind(name, a.shape(), b.shape())?;
        let data = zip_bcast(&a, &b, mode, f);
        self.tape.push(
            Tensor::new(a.shape().to_vec(), data)?,
            make(self.id, other.id, mode),
            self.requires_grad() || other.requires_grad(),
            0,
        )
    }

    /// 2-d convolution with zero padding. `weight` is `[Cout, Cin, kh, kw]`.
    pub fn conv2d(&self, weight: Var<'t, T>, bias: Option<Var<'t, T>>, stride: usize, pad: usize) -> Result<Self> {
        let (x, w) = (self.value(), weight.value());
        let geom = ConvGeom::new(x.dims4()?, w.dims4()?, stride, pad)?;
        if let Some(b) = &bias {
            if b.shape() != [geom.cout] {
                return Err(Error::dim(
                    "conv2d",
                    format!("bias {:?} for {} output channels", b.shape(), geom.cout),
                ));
            }
        }
        let bval = bias.map(|b| b.value());
        let out = kernels::conv2d_forward(&geom, x.data(), w.data(), bval.as_ref().map(|b| b.data()));
        let rg = self.requires_grad() || weight.requires_grad() || bias.is_some_and(|b| b.requires_grad());
        self.tape.push(
            Tensor::new(geom.out_shape().to_vec(), out)?,
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                b: bias.map(|b| b.id),
                geom,
            },
            rg,
            0,
        )
    }

    pub fn add(&self, other: Var<'t, T>) -> Result<Self> {
        self.binary(other, "add", Op::Add, |a, b| a + b)
    }

    pub fn sub(&self, other: Var<'t, T>) -> Result<Self> {
        self.binary(other, "sub", Op::Sub, |a, b| a - b)
    }

    pub fn mul(&self, other: Var<'t, T>) -> Result<Self> {
        self.binary(other, "mul", Op::Mul, |a, b| a * b)
    }

    /// Point-wise division with the [`DIV_EPS`] magnitude floor on the denominator.
    pub fn div(&self, other: Var<'t, T>) -> Result<Self> {
        let eps = T::lit(DIV_EPS);
        self.binary(other, "div", Op::Div, move |a, b| a / stable_den(b, eps))
    }

    /// Multiplies by a one-element tensor (e.g. a trainable scalar).
    pub fn scale_by(&self, s: Var<'t, T>) -> Result<Self> {
        let sv = s.value();
        if sv.numel() != 1 {
            return Err(Error::dim("scale", format!("scale factor has shape {:?}", sv.shape())));
        }
        let k = sv.item();
        let x = self.value();
        self.tape.push(
            Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| v * k).collect())?,
            Op::ScaleBy { x: self.id, s: s.id },
            self.requires_grad() || s.requires_grad(),
            0,
        )
    }

    /// `x * mul + add` with constant coefficients.
    pub fn affine(&self, mul: f64, add: f64) -> Result<Self> {
        let (m, a) = (T::lit(mul), T::lit(add));
        let x = self.value();
        self.unary(
            x.data().iter().map(|&v| v * m + a).collect(),
            x.shape().to_vec(),
            Op::Affine { x: self.id, mul: m },
            0,
        )
    }

    pub fn relu(&self) -> Result<Self> {
        let x = self.value();
        let mut region = 0u64;
        let data = x
            .data()
            .iter()
            .map(|&v| {
                region = region_hash(region, (v > T::zero()) as u64);
                v.max(T::zero())
            })
            .collect();
        self.unary(data, x.shape().to_vec(), Op::Relu(self.id), region)
    }

    pub fn sigmoid(&self) -> Result<Self> {
        let x = self.value();
        let data = x
            .data()
            .iter()
            .map(|&v| T::one() / (T::one() + (-v).exp()))
            .collect();
        self.unary(data, x.shape().to_vec(), Op::Sigmoid(self.id), 0)
    }

    /// Parametric ReLU with one shared trainable slope.
    pub fn prelu(&self, slope: Var<'t, T>) -> Result<Self> {
        let sv = slope.value();
        if sv.numel() != 1 {
            return Err(Error::dim("prelu", format!("slope has shape {:?}", sv.shape())));
        }
        let a = sv.item();
        let x = self.value();
        let mut region = 0u64;
        let data = x
            .data()
            .iter()
            .map(|&v| {
                region = region_hash(region, (v > T::zero()) as u64);
                if v > T::zero() {
                    v
                } else {
                    a * v
                }
            })
            .collect();
        self.tape.push(
            Tensor::new(x.shape().to_vec(), data)?,
            Op::PRelu {
                x: self.id,
                slope: slope.id,
            },
            self.requires_grad() || slope.requires_grad(),
            region,
        )
    }

    pub fn activation(&self, kind: Activation<'t, T>) -> Result<Self> {
        match kind {
            Activation::Relu => self.relu(),
            Activation::Sigmoid => self.sigmoid(),
            Activation::PRelu(slope) => self.prelu(slope),
        }
    }

    /// Clamps into `[lo, hi]`; the gradient passes only inside the interval.
    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Self> {
        let (lo, hi) = (T::lit(lo), T::lit(hi));
        let x = self.value();
        let mut region = 0u64;
        let data = x
            .data()
            .iter()
            .map(|&v| {
                let code = if v < lo { 0 } else if v > hi { 2 } else { 1 };
                region = region_hash(region, code);
                v.max(lo).min(hi)
            })
            .collect();
        self.unary(data, x.shape().to_vec(), Op::Clamp { x: self.id, lo, hi }, region)
    }

    pub fn square(&self) -> Result<Self> {
        let x = self.value();
        self.unary(
            x.data().iter().map(|&v| v * v).collect(),
            x.shape().to_vec(),
            Op::Square(self.id),
            0,
        )
    }

    pub fn sqrt(&self) -> Result<Self> {
        let x = self.value();
        if x.data().iter().any(|&v| v <= T::zero()) {
            return Err(Error::NonFinite { op: "sqrt" });
        }
        self.unary(
            x.data().iter().map(|&v| v.sqrt()).collect(),
            x.shape().to_vec(),
            Op::Sqrt(self.id),
            0,
        )
    }

    /// Sum of all elements, accumulated in row-major order in `f64`.
    pub fn sum(&self) -> Result<Self> {
        let x = self.value();
        self.unary(vec![T::lit(sum_f64(x.data()))], vec![1], Op::Sum(self.id), 0)
    }

    pub fn mean(&self) -> Result<Self> {
        let x = self.value();
        let m = sum_f64(x.data()) / x.numel() as f64;
        self.unary(vec![T::lit(m)], vec![1], Op::Mean(self.id), 0)
    }

    /// Per-channel spatial mean, `[N, C, H, W] -> [N, C, 1, 1]`.
    pub fn global_avg_pool(&self) -> Result<Self> {
        let x = self.value();
        let [n, c, h, w] = x.dims4()?;
        if h == 0 || w == 0 {
            return Err(Error::dim("global_avg_pool", "empty spatial extent"));
        }
        let data = x
            .data()
            .chunks(h * w)
            .map(|p| T::lit(sum_f64(p) / (h * w) as f64))
            .collect();
        self.unary(data, vec![n, c, 1, 1], Op::GlobalAvgPool(self.id), 0)
    }

    /// Channels `start..start+len`.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Self> {
        let x = self.value();
        let [n, c, h, w] = x.dims4()?;
        if start + len > c || len == 0 {
            return Err(Error::dim(
                "slice_channels",
                format!("channels {start}..{} of {c}", start + len),
            ));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * len * plane);
        for item in 0..n {
            let base = (item * c + start) * plane;
            data.extend_from_slice(&x.data()[base..base + len * plane]);
        }
        self.unary(data, vec![n, len, h, w], Op::SliceChannels { x: self.id, start }, 0)
    }

    /// Nearest-neighbour 2x upsampling (pixel duplication).
    pub fn up_nearest2(&self) -> Result<Self> {
        let x = self.value();
        let [n, c, h, w] = x.dims4()?;
        let data = kernels::upsample_nearest2_forward(x.data(), n * c, h, w);
        self.unary(data, vec![n, c, 2 * h, 2 * w], Op::UpNearest2(self.id), 0)
    }

    /// Stride-2 downsampling convolution; extents must be even.
    pub fn resample_down(&self, weight: Var<'t, T>, bias: Option<Var<'t, T>>) -> Result<Self> {
        let [_, _, h, w] = self.value().dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::dim("resample", format!("cannot halve odd extent {h}x{w}")));
        }
        let k = weight.shape()[2];
        self.conv2d(weight, bias, 2, k / 2)
    }

    /// Nearest 2x duplication followed by a same-padded convolution.
    pub fn resample_up(&self, weight: Var<'t, T>, bias: Option<Var<'t, T>>) -> Result<Self> {
        let k = weight.shape()[2];
        self.up_nearest2()?.conv2d(weight, bias, 1, k / 2)
    }

    /// Fixed 3x3 Laplacian per channel, reflect padded.
    pub fn laplacian(&self) -> Result<Self> {
        let x = self.value();
        let [n, c, h, w] = x.dims4()?;
        if h < 2 || w < 2 {
            return Err(Error::dim("laplacian", format!("extent {h}x{w} too small to reflect")));
        }
        let data = kernels::laplacian_forward(x.data(), n * c, h, w);
        self.unary(data, x.shape().to_vec(), Op::Laplacian(self.id), 0)
    }

    /// Per-item, per-channel normalization over H x W with affine `gamma`, `beta` of shape `[C]`.
    pub fn instance_norm(&self, gamma: Var<'t, T>, beta: Var<'t, T>) -> Result<Self> {
        let x = self.value();
        let dims = x.dims4()?;
        let (g, b) = (gamma.value(), beta.value());
        if g.shape() != [dims[1]] || b.shape() != [dims[1]] {
            return Err(Error::dim(
                "instance_norm",
                format!("affine {:?}/{:?} for {} channels", g.shape(), b.shape(), dims[1]),
            ));
        }
        let (out, stats) = kernels::instance_norm_forward(x.data(), dims, g.data(), b.data(), NORM_EPS);
        self.tape.push(
            Tensor::new(x.shape().to_vec(), out)?,
            Op::InstanceNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                stats,
            },
            self.requires_grad() || gamma.requires_grad() || beta.requires_grad(),
            0,
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let x = self.value();
        let t = x.reshape(shape.to_vec())?;
        self.tape
            .push(t, Op::Reshape(self.id), self.requires_grad(), 0)
    }

    /// Reverse sweep from a one-element loss.
    pub fn backward(&self) -> Result<Gradients<T>> {
        let nodes = self.tape.nodes.borrow();
        if nodes[self.id].value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar, got shape {:?}",
                nodes[self.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[self.id] = Some(vec![T::one()]);

        for id in (0..=self.id).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], nodes: &[Node<T>], id: usize, delta: Vec<T>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, &d)| *a += d),
        slot @ None => *slot = Some(delta),
    }
}

fn backprop<T: Real>(nodes: &[Node<T>], node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let val = |id: usize| nodes[id].value.clone();
    let rg = |id: usize| nodes[id].requires_grad;
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Conv2d { x, w, b, geom } => {
            let (xv, wv) = (val(*x), val(*w));
            let cg = kernels::conv2d_backward(
                geom,
                xv.data(),
                wv.data(),
                g,
                rg(*x),
                rg(*w),
                b.is_some_and(rg),
            );
            if let Some(dx) = cg.dx {
                accumulate(grads, nodes, *x, dx);
            }
            if let Some(dw) = cg.dw {
                accumulate(grads, nodes, *w, dw);
            }
            if let (Some(b), Some(db)) = (b, cg.db) {
                accumulate(grads, nodes, *b, db);
            }
        }
        Op::Add(a, b, mode) | Op::Sub(a, b, mode) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
            if rg(*a) {
                accumulate(grads, nodes, *a, g.to_vec());
            }
            if rg(*b) {
                let plane = plane_of(out);
                let gb = reduce_bcast(g.iter().map(|&v| v * sign).collect(), *mode, plane);
                accumulate(grads, nodes, *b, gb);
            }
        }
        Op::Mul(a, b, mode) => {
            let (av, bv) = (val(*a), val(*b));
            if rg(*a) {
                let bg = Tensor::new(out.shape().to_vec(), g.to_vec()).expect("grad shape");
                accumulate(grads, nodes, *a, zip_bcast(&bg, &bv, *mode, |gv, y| gv * y));
            }
            if rg(*b) {
                let prod: Vec<T> = g.iter().zip(av.data()).map(|(&gv, &x)| gv * x).collect();
                accumulate(grads, nodes, *b, reduce_bcast(prod, *mode, plane_of(out)));
            }
        }
        Op::Div(a, b, mode) => {
            let (av, bv) = (val(*a), val(*b));
            let eps = T::lit(DIV_EPS);
            let bg = Tensor::new(out.shape().to_vec(), g.to_vec()).expect("grad shape");
            if rg(*a) {
                accumulate(grads, nodes, *a, zip_bcast(&bg, &bv, *mode, move |gv, y| gv / stable_den(y, eps)));
            }
            if rg(*b) {
                // d/db (a / b) = -a / b^2 where the floor is inactive, else 0.
                let ga = zip_bcast(&bg, &bv, *mode, move |gv, y| {
                    if y.abs() >= eps {
                        -gv / (y * y)
                    } else {
                        T::zero()
                    }
                });
                let prod: Vec<T> = ga.iter().zip(av.data()).map(|(&gv, &x)| gv * x).collect();
                accumulate(grads, nodes, *b, reduce_bcast(prod, *mode, plane_of(out)));
            }
        }
        Op::ScaleBy { x, s } => {
            let (xv, sv) = (val(*x), val(*s));
            if rg(*x) {
                let k = sv.item();
                accumulate(grads, nodes, *x, g.iter().map(|&v| v * k).collect());
            }
            if rg(*s) {
                let d: f64 = g.iter().zip(xv.data()).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
                accumulate(grads, nodes, *s, vec![T::lit(d)]);
            }
        }
        Op::Affine { x, mul } => {
            accumulate(grads, nodes, *x, g.iter().map(|&v| v * *mul).collect());
        }
        Op::Relu(x) => {
            let xv = val(*x);
            let d = g
                .iter()
                .zip(xv.data())
                .map(|(&gv, &v)| if v > T::zero() { gv } else { T::zero() })
                .collect();
            accumulate(grads, nodes, *x, d);
        }
        Op::Sigmoid(x) => {
            let d = g
                .iter()
                .zip(out.data())
                .map(|(&gv, &s)| gv * s * (T::one() - s))
                .collect();
            accumulate(grads, nodes, *x, d);
        }
        Op::PRelu { x, slope } => {
            let (xv, sv) = (val(*x), val(*slope));
            let a = sv.item();
            if rg(*x) {
                let d = g
                    .iter()
                    .zip(xv.data())
                    .map(|(&gv, &v)| if v > T::zero() { gv } else { gv * a })
                    .collect();
                accumulate(grads, nodes, *x, d);
            }
            if rg(*slope) {
                let d: f64 = g
                    .iter()
                    .zip(xv.data())
                    .filter(|(_, &v)| v <= T::zero())
                    .map(|(gv, v)| gv.as_f64() * v.as_f64())
                    .sum();
                accumulate(grads, nodes, *slope, vec![T::lit(d)]);
            }
        }
        Op::Clamp { x, lo, hi } => {
            let xv = val(*x);
            let d = g
                .iter()
                .zip(xv.data())
                .map(|(&gv, &v)| if v >= *lo && v <= *hi { gv } else { T::zero() })
                .collect();
            accumulate(grads, nodes, *x, d);
        }
        Op::Square(x) => {
            let xv = val(*x);
            let two = T::lit(2.0);
            accumulate(grads, nodes, *x, g.iter().zip(xv.data()).map(|(&gv, &v)| two * v * gv).collect());
        }
        Op::Sqrt(x) => {
            let half = T::lit(0.5);
            accumulate(grads, nodes, *x, g.iter().zip(out.data()).map(|(&gv, &s)| gv * half / s).collect());
        }
        Op::Sum(x) => {
            let n = val(*x).numel();
            accumulate(grads, nodes, *x, vec![g[0]; n]);
        }
        Op::Mean(x) => {
            let n = val(*x).numel();
            accumulate(grads, nodes, *x, vec![T::lit(g[0].as_f64() / n as f64); n]);
        }
        Op::GlobalAvgPool(x) => {
            let xv = val(*x);
            let [_, _, h, w] = xv.dims4().expect("4-d");
            let m = (h * w) as f64;
            let d = g
                .iter()
                .flat_map(|&gv| std::iter::repeat_n(T::lit(gv.as_f64() / m), h * w))
                .collect();
            accumulate(grads, nodes, *x, d);
        }
        Op::Concat(xs) => {
            let [n, total, h, w] = out.dims4().expect("4-d");
            let plane = h * w;
            let mut offset = 0;
            for &x in xs {
                let c = nodes[x].value.shape()[1];
                if rg(x) {
                    let mut d = Vec::with_capacity(n * c * plane);
                    for item in 0..n {
                        let base = (item * total + offset) * plane;
                        d.extend_from_slice(&g[base..base + c * plane]);
                    }
                    accumulate(grads, nodes, x, d);
                }
                offset += c;
            }
        }
        Op::SliceChannels { x, start } => {
            let xv = val(*x);
            let [n, c, h, w] = xv.dims4().expect("4-d");
            let len = out.shape()[1];
            let plane = h * w;
            let mut d = vec![T::zero(); xv.numel()];
            for item in 0..n {
                let dst = (item * c + start) * plane;
                let src = item * len * plane;
                d[dst..dst + len * plane].copy_from_slice(&g[src..src + len * plane]);
            }
            accumulate(grads, nodes, *x, d);
        }
        Op::UpNearest2(x) => {
            let [n, c, h, w] = val(*x).dims4().expect("4-d");
            accumulate(grads, nodes, *x, kernels::upsample_nearest2_backward(g, n * c, h, w));
        }
        Op::Laplacian(x) => {
            let [n, c, h, w] = out.dims4().expect("4-d");
            accumulate(grads, nodes, *x, kernels::laplacian_backward(g, n * c, h, w));
        }
        Op::InstanceNorm { x, gamma, beta, stats } => {
            let (xv, gv) = (val(*x), val(*gamma));
            let dims = xv.dims4().expect("4-d");
            let (dx, dgamma, dbeta) = kernels::instance_norm_backward(xv.data(), dims, gv.data(), stats, g);
            accumulate(grads, nodes, *x, dx);
            accumulate(grads, nodes, *gamma, dgamma);
            accumulate(grads, nodes, *beta, dbeta);
        }
        Op::Reshape(x) => accumulate(grads, nodes, *x, g.to_vec()),
    }
}

fn plane_of<T: Real>(t: &Tensor<T>) -> usize {
    match t.shape() {
        [_, _, h, w] => h * w,
        _ => 1,
    }
}

/// Gradients of one backward sweep, indexed by tape node.
#[derive(Debug)]
pub struct Gradients<T: Real = f32> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to `v`; `None` if `v` does not influence the loss
    /// or does not require gradients.
    pub fn get(&self, v: Var<'_, T>) -> Option<&[T]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    /// Like [`get`](Self::get) but zeros for unreached variables.
    pub fn get_or_zeros(&self, v: Var<'_, T>) -> Vec<T> {
        self.get(v)
            .map(<[T]>::to_vec)
            .unwrap_or_else(|| vec![T::zero(); v.value().numel()])
    }
}
