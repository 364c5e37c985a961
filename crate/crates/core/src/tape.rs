//! Reverse-mode autodiff on an index-ordered tape.
//!
//! Every operation appends a node holding its output value and the ids of its
//! inputs. Nodes only ever reference earlier nodes, so walking the tape in
//! reverse index order is a valid topological order for backpropagation.
//! Intermediate gradients live in a scratch table that is dropped when
//! `backward` returns; leaf gradients accumulate into persistent per-node
//! buffers until `zero_grads` clears them, so calling `backward` twice doubles
//! the leaf gradients.

use crate::conv::{self, ConvDims};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValueId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(ValueId, ValueId),
    Sub(ValueId, ValueId),
    Mul(ValueId, ValueId),
    Div(ValueId, ValueId),
    Scale(ValueId, f32),
    AddConst(ValueId),
    PowConst(ValueId, f32),
    ClampMin(ValueId, f32),
    Relu(ValueId),
    LeakyRelu(ValueId, f32),
    Sigmoid(ValueId),
    Softplus(ValueId),
    Conv2d { x: ValueId, w: ValueId, b: ValueId, dims: ConvDims },
    ConvT2d { x: ValueId, w: ValueId, f: usize, k: usize },
    MaxPool2 { x: ValueId, arg: Vec<u32> },
    AvgPool2(ValueId),
    Concat(ValueId, ValueId),
    DepthToSpace2(ValueId),
    GateMul { x: ValueId, gate: ValueId },
    Mean(ValueId),
    AbsMeanDiff(ValueId, ValueId),
    Reshape(ValueId),
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f32>,
    grad: Option<Vec<f32>>,
    requires_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn dims4(shape: &[usize], context: &str) -> Result<(usize, usize, usize, usize)> {
    if shape.len() != 4 {
        return Err(Error::shape(context, "rank-4 tensor", format!("rank {}", shape.len())));
    }
    Ok((shape[0], shape[1], shape[2], shape[3]))
}

fn stable_sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f32>, requires_grad: bool, op: Op) -> ValueId {
        debug_assert_eq!(numel(&shape), value.len());
        let grad = if requires_grad && matches!(op, Op::Leaf) {
            Some(vec![0.0; value.len()])
        } else {
            None
        };
        self.nodes.push(Node { shape, value, grad, requires_grad, op });
        ValueId(self.nodes.len() - 1)
    }

    fn requires(&self, id: ValueId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Registers a tensor as a leaf, copying its data. Gradient tracking
    /// follows the tensor's `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor) -> ValueId {
        self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad(), Op::Leaf)
    }

    pub fn leaf_from(&mut self, shape: Vec<usize>, data: Vec<f32>, requires_grad: bool) -> ValueId {
        assert_eq!(numel(&shape), data.len(), "leaf_from: shape/data mismatch");
        self.push(shape, data, requires_grad, Op::Leaf)
    }

    pub fn constant_scalar(&mut self, v: f32) -> ValueId {
        self.push(Vec::new(), vec![v], false, Op::Leaf)
    }

    pub fn value(&self, id: ValueId) -> &[f32] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: ValueId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value_tensor(&self, id: ValueId) -> Tensor {
        Tensor::new(self.shape(id).to_vec(), self.value(id).to_vec()).expect("tape node is well-formed")
    }

    pub fn item(&self, id: ValueId) -> f32 {
        debug_assert_eq!(self.nodes[id.0].value.len(), 1);
        self.nodes[id.0].value[0]
    }

    /// Persistent gradient of a leaf. None for non-leaf or untracked nodes.
    pub fn grad(&self, id: ValueId) -> Option<&[f32]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = node.grad.as_mut() {
                g.fill(0.0);
            }
        }
    }

    fn binary_same_shape(&mut self, name: &str, a: ValueId, b: ValueId, f: impl Fn(f32, f32) -> f32, op: Op) -> Result<ValueId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                name,
                format!("{:?}", self.shape(a)),
                format!("{:?}", self.shape(b)),
            ));
        }
        let value: Vec<f32> = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), value, rg, op))
    }

    fn unary(&mut self, x: ValueId, f: impl Fn(f32) -> f32, op: Op) -> ValueId {
        let value: Vec<f32> = self.value(x).iter().map(|&v| f(v)).collect();
        let rg = self.requires(x);
        self.push(self.nodes[x.0].shape.clone(), value, rg, op)
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary_same_shape("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, x: ValueId, s: f32) -> ValueId {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_const(&mut self, x: ValueId, c: f32) -> ValueId {
        self.unary(x, |v| v + c, Op::AddConst(x))
    }

    pub fn pow_const(&mut self, x: ValueId, e: f32) -> ValueId {
        self.unary(x, |v| v.powf(e), Op::PowConst(x, e))
    }

    pub fn clamp_min(&mut self, x: ValueId, m: f32) -> ValueId {
        self.unary(x, |v| v.max(m), Op::ClampMin(x, m))
    }

    pub fn relu(&mut self, x: ValueId) -> ValueId {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: ValueId, slope: f32) -> ValueId {
        self.unary(x, |v| if v > 0.0 { v } else { v * slope }, Op::LeakyRelu(x, slope))
    }

    pub fn sigmoid(&mut self, x: ValueId) -> ValueId {
        self.unary(x, stable_sigmoid, Op::Sigmoid(x))
    }

    pub fn softplus(&mut self, x: ValueId) -> ValueId {
        self.unary(x, |v| v.max(0.0) + (-v.abs()).exp().ln_1p(), Op::Softplus(x))
    }

    /// x: [N, C, H, W], w: [F, C, K, K], bias: [F]. A missing bias becomes an
    /// untracked zero leaf so the node layout is uniform.
    pub fn conv2d(&mut self, x: ValueId, w: ValueId, bias: Option<ValueId>, stride: usize, pad: usize) -> Result<ValueId> {
        let (n, c, h, wd) = dims4(self.shape(x), "conv2d input")?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[2] != ws[3] {
            return Err(Error::shape("conv2d weight", "[F, C, K, K] with square kernel", format!("{ws:?}")));
        }
        if ws[1] != c {
            return Err(Error::shape("conv2d", format!("weight input channels {c}"), format!("{}", ws[1])));
        }
        let (f, k) = (ws[0], ws[2]);
        let b = match bias {
            Some(b) => {
                if self.shape(b) != [f] {
                    return Err(Error::shape("conv2d bias", format!("[{f}]"), format!("{:?}", self.shape(b))));
                }
                b
            }
            None => self.push(vec![f], vec![0.0; f], false, Op::Leaf),
        };
        let dims = ConvDims::compute(n, c, h, wd, f, k, stride, pad)?;
        let value = conv::conv2d_forward(self.value(x), self.value(w), Some(self.value(b)), &dims);
        let rg = self.requires(x) || self.requires(w) || self.requires(b);
        Ok(self.push(vec![n, f, dims.oh, dims.ow], value, rg, Op::Conv2d { x, w, b, dims }))
    }

    /// Transposed conv with kernel size == stride. x: [N, C, H, W],
    /// w: [C, F, K, K]. Output [N, F, K*H, K*W].
    pub fn conv_transpose2d(&mut self, x: ValueId, w: ValueId, k: usize) -> Result<ValueId> {
        let (n, c, h, wd) = dims4(self.shape(x), "conv_transpose2d input")?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[0] != c || ws[2] != k || ws[3] != k {
            return Err(Error::shape(
                "conv_transpose2d weight",
                format!("[{c}, F, {k}, {k}]"),
                format!("{ws:?}"),
            ));
        }
        let f = ws[1];
        let value = conv::conv_transpose2d_forward(self.value(x), self.value(w), n, c, h, wd, f, k);
        let rg = self.requires(x) || self.requires(w);
        Ok(self.push(vec![n, f, k * h, k * wd], value, rg, Op::ConvT2d { x, w, f, k }))
    }

    pub fn maxpool2(&mut self, x: ValueId) -> Result<ValueId> {
        let (n, c, h, w) = dims4(self.shape(x), "maxpool2 input")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("maxpool2", "even spatial dims", format!("{h}x{w}")));
        }
        let (value, arg) = conv::maxpool2_forward(self.value(x), n, c, h, w);
        let rg = self.requires(x);
        Ok(self.push(vec![n, c, h / 2, w / 2], value, rg, Op::MaxPool2 { x, arg }))
    }

    pub fn avgpool2(&mut self, x: ValueId) -> Result<ValueId> {
        let (n, c, h, w) = dims4(self.shape(x), "avgpool2 input")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("avgpool2", "even spatial dims", format!("{h}x{w}")));
        }
        let value = conv::avgpool2_forward(self.value(x), n, c, h, w);
        let rg = self.requires(x);
        Ok(self.push(vec![n, c, h / 2, w / 2], value, rg, Op::AvgPool2(x)))
    }

    /// Channel concatenation of two [N, C, H, W] tensors.
    pub fn concat_channels(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (na, ca, ha, wa) = dims4(self.shape(a), "concat input")?;
        let (nb, cb, hb, wb) = dims4(self.shape(b), "concat input")?;
        if na != nb || ha != hb || wa != wb {
            return Err(Error::shape(
                "concat",
                format!("[{na}, _, {ha}, {wa}]"),
                format!("[{nb}, _, {hb}, {wb}]"),
            ));
        }
        let (sa, sb) = (ca * ha * wa, cb * hb * wb);
        let mut value = Vec::with_capacity(na * (sa + sb));
        for n in 0..na {
            value.extend_from_slice(&self.value(a)[n * sa..(n + 1) * sa]);
            value.extend_from_slice(&self.value(b)[n * sb..(n + 1) * sb]);
        }
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(vec![na, ca + cb, ha, wa], value, rg, Op::Concat(a, b)))
    }

    pub fn depth_to_space2(&mut self, x: ValueId) -> Result<ValueId> {
        let (n, c, h, w) = dims4(self.shape(x), "depth_to_space2 input")?;
        if c % 4 != 0 {
            return Err(Error::shape("depth_to_space2", "channels divisible by 4", format!("{c}")));
        }
        let value = conv::depth_to_space2(self.value(x), n, c, h, w);
        let rg = self.requires(x);
        Ok(self.push(vec![n, c / 4, 2 * h, 2 * w], value, rg, Op::DepthToSpace2(x)))
    }

    /// Multiplies x: [N, C, H, W] by a single-channel gate map [N, 1, H, W]
    /// broadcast over channels.
    pub fn gate_mul(&mut self, x: ValueId, gate: ValueId) -> Result<ValueId> {
        let (n, c, h, w) = dims4(self.shape(x), "gate_mul input")?;
        if self.shape(gate) != [n, 1, h, w] {
            return Err(Error::shape(
                "gate_mul",
                format!("[{n}, 1, {h}, {w}]"),
                format!("{:?}", self.shape(gate)),
            ));
        }
        let hw = h * w;
        let mut value = vec![0.0f32; n * c * hw];
        for ni in 0..n {
            let gmap = &self.value(gate)[ni * hw..(ni + 1) * hw];
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                let src = &self.value(x)[base..base + hw];
                for (i, (s, g)) in src.iter().zip(gmap).enumerate() {
                    value[base + i] = s * g;
                }
            }
        }
        let rg = self.requires(x) || self.requires(gate);
        Ok(self.push(vec![n, c, h, w], value, rg, Op::GateMul { x, gate }))
    }

    /// Mean over all elements, producing a scalar.
    pub fn mean(&mut self, x: ValueId) -> ValueId {
        let n = self.value(x).len();
        let mut acc = 0.0f64;
        for &v in self.value(x) {
            acc += v as f64;
        }
        let rg = self.requires(x);
        self.push(Vec::new(), vec![(acc / n as f64) as f32], rg, Op::Mean(x))
    }

    /// mean(|a - b|), producing a scalar.
    pub fn abs_mean_diff(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "abs_mean_diff",
                format!("{:?}", self.shape(a)),
                format!("{:?}", self.shape(b)),
            ));
        }
        let n = self.value(a).len();
        let mut acc = 0.0f64;
        for (&x, &y) in self.value(a).iter().zip(self.value(b)) {
            acc += (x - y).abs() as f64;
        }
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Vec::new(), vec![(acc / n as f64) as f32], rg, Op::AbsMeanDiff(a, b)))
    }

    /// Free reshape to an equal-element-count shape.
    pub fn reshape(&mut self, x: ValueId, shape: Vec<usize>) -> Result<ValueId> {
        if numel(&shape) != self.value(x).len() {
            return Err(Error::shape(
                "reshape",
                format!("{} elements", self.value(x).len()),
                format!("{shape:?} = {} elements", numel(&shape)),
            ));
        }
        let value = self.value(x).to_vec();
        let rg = self.requires(x);
        Ok(self.push(shape, value, rg, Op::Reshape(x)))
    }

    /// Backpropagates from a scalar root, accumulating into leaf gradients.
    pub fn backward(&mut self, root: ValueId) -> Result<()> {
        let r = root.0;
        if self.nodes[r].value.len() != 1 {
            return Err(Error::shape("backward root", "scalar", format!("{:?}", self.nodes[r].shape)));
        }
        if !self.nodes[r].requires_grad {
            return Err(Error::config("backward: root does not depend on any gradient-tracked leaf"));
        }
        let mut scratch: Vec<Option<Vec<f32>>> = Vec::with_capacity(r + 1);
        scratch.resize_with(r + 1, || None);
        scratch[r] = Some(vec![1.0]);
        for i in (0..=r).rev() {
            let Some(g) = scratch[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                if let Some(pg) = self.nodes[i].grad.as_mut() {
                    for (p, v) in pg.iter_mut().zip(&g) {
                        *p += v;
                    }
                }
                continue;
            }
            self.distribute(i, &g, &mut scratch);
        }
        Ok(())
    }

    fn distribute(&self, i: usize, g: &[f32], scratch: &mut [Option<Vec<f32>>]) {
        fn slot<'a>(scratch: &'a mut [Option<Vec<f32>>], id: ValueId, len: usize) -> &'a mut [f32] {
            scratch[id.0].get_or_insert_with(|| vec![0.0; len])
        }
        let nv = |id: ValueId| -> &[f32] { &self.nodes[id.0].value };
        let nlen = |id: ValueId| self.nodes[id.0].value.len();
        let req = |id: ValueId| self.nodes[id.0].requires_grad;
        match &self.nodes[i].op {
            Op::Leaf => unreachable!("leaves handled by backward"),
            Op::Add(a, b) => {
                if req(*a) {
                    for (s, v) in slot(scratch, *a, g.len()).iter_mut().zip(g) {
                        *s += v;
                    }
                }
                if req(*b) {
                    for (s, v) in slot(scratch, *b, g.len()).iter_mut().zip(g) {
                        *s += v;
                    }
                }
            }
            Op::Sub(a, b) => {
                if req(*a) {
                    for (s, v) in slot(scratch, *a, g.len()).iter_mut().zip(g) {
                        *s += v;
                    }
                }
                if req(*b) {
                    for (s, v) in slot(scratch, *b, g.len()).iter_mut().zip(g) {
                        *s -= v;
                    }
                }
            }
            Op::Mul(a, b) => {
                if req(*a) {
                    let bv = nv(*b);
                    for ((s, v), x) in slot(scratch, *a, g.len()).iter_mut().zip(g).zip(bv) {
                        *s += v * x;
                    }
                }
                if req(*b) {
                    let av = nv(*a);
                    for ((s, v), x) in slot(scratch, *b, g.len()).iter_mut().zip(g).zip(av) {
                        *s += v * x;
                    }
                }
            }
            Op::Div(a, b) => {
                let out = &self.nodes[i].value;
                if req(*a) {
                    let bv = nv(*b);
                    for ((s, v), y) in slot(scratch, *a, g.len()).iter_mut().zip(g).zip(bv) {
                        *s += v / y;
                    }
                }
                if req(*b) {
                    let bv = nv(*b);
                    let sl = slot(scratch, *b, g.len());
                    for k in 0..g.len() {
                        sl[k] -= g[k] * out[k] / bv[k];
                    }
                }
            }
            Op::Scale(x, s) => {
                if req(*x) {
                    let sc = *s;
                    for (sl, v) in slot(scratch, *x, g.len()).iter_mut().zip(g) {
                        *sl += v * sc;
                    }
                }
            }
            Op::AddConst(x) => {
                if req(*x) {
                    for (sl, v) in slot(scratch, *x, g.len()).iter_mut().zip(g) {
                        *sl += v;
                    }
                }
            }
            Op::PowConst(x, e) => {
                if req(*x) {
                    let xv = nv(*x);
                    let e = *e;
                    let sl = slot(scratch, *x, g.len());
                    for k in 0..g.len() {
                        sl[k] += g[k] * e * xv[k].powf(e - 1.0);
                    }
                }
            }
            Op::ClampMin(x, m) => {
                if req(*x) {
                    let xv = nv(*x);
                    let m = *m;
                    let sl = slot(scratch, *x, g.len());
                    for k in 0..g.len() {
                        if xv[k] >= m {
                            sl[k] += g[k];
                        }
                    }
                }
            }
            Op::Relu(x) => {
                if req(*x) {
                    let xv = nv(*x);
                    let sl = slot(scratch, *x, g.len());
                    for k in 0..g.len() {
                        if xv[k] > 0.0 {
                            sl[k] += g[k];
                        }
                    }
                }
            }
            Op::LeakyRelu(x, slope) => {
                if req(*x) {
                    let xv = nv(*x);
                    let a = *slope;
                    let sl = slot(scratch, *x, g.len());
                    for k in 0..g.len() {
                        sl[k] += g[k] * if xv[k] > 0.0 { 1.0 } else { a };
                    }
                }
            }
            Op::Sigmoid(x) => {
                if req(*x) {
                    let y = &self.nodes[i].value;
                    let sl = slot(scratch, *x, g.len());
                    for k in 0..g.len() {
                        sl[k] += g[k] * y[k] * (1.0 - y[k]);
                    }
                }
            }
            Op::Softplus(x) => {
                if req(*x) {
                    let xv = nv(*x);
                    let sl = slot(scratch, *x, g.len());
                    for k in 0..g.len() {
                        sl[k] += g[k] * stable_sigmoid(xv[k]);
                    }
                }
            }
            Op::Conv2d { x, w, b, dims } => {
                if req(*x) {
                    let gx = conv::conv2d_backward_input(g, nv(*w), dims);
                    for (s, v) in slot(scratch, *x, gx.len()).iter_mut().zip(&gx) {
                        *s += v;
                    }
                }
                if req(*w) {
                    let gw = conv::conv2d_backward_weight(nv(*x), g, dims);
                    for (s, v) in slot(scratch, *w, gw.len()).iter_mut().zip(&gw) {
                        *s += v;
                    }
                }
                if req(*b) {
                    let gb = conv::conv2d_backward_bias(g, dims);
                    for (s, v) in slot(scratch, *b, gb.len()).iter_mut().zip(&gb) {
                        *s += v;
                    }
                }
            }
            Op::ConvT2d { x, w, f, k } => {
                let (n, c, h, wd) = (
                    self.nodes[x.0].shape[0],
                    self.nodes[x.0].shape[1],
                    self.nodes[x.0].shape[2],
                    self.nodes[x.0].shape[3],
                );
                if req(*x) {
                    let gx = conv::conv_transpose2d_backward_input(g, nv(*w), n, c, h, wd, *f, *k);
                    for (s, v) in slot(scratch, *x, gx.len()).iter_mut().zip(&gx) {
                        *s += v;
                    }
                }
                if req(*w) {
                    let gw = conv::conv_transpose2d_backward_weight(nv(*x), g, n, c, h, wd, *f, *k);
                    for (s, v) in slot(scratch, *w, gw.len()).iter_mut().zip(&gw) {
                        *s += v;
                    }
                }
            }
            Op::MaxPool2 { x, arg } => {
                if req(*x) {
                    let sl = slot(scratch, *x, nlen(*x));
                    for (v, &a) in g.iter().zip(arg.iter()) {
                        sl[a as usize] += v;
                    }
                }
            }
            Op::AvgPool2(x) => {
                if req(*x) {
                    let (n, c, h, w) = (
                        self.nodes[x.0].shape[0],
                        self.nodes[x.0].shape[1],
                        self.nodes[x.0].shape[2],
                        self.nodes[x.0].shape[3],
                    );
                    let gx = conv::avgpool2_backward(g, n, c, h, w);
                    for (s, v) in slot(scratch, *x, gx.len()).iter_mut().zip(&gx) {
                        *s += v;
                    }
                }
            }
            Op::Concat(a, b) => {
                let (n, sa) = (self.nodes[a.0].shape[0], nlen(*a) / self.nodes[a.0].shape[0]);
                let sb = nlen(*b) / n;
                if req(*a) {
                    let sl = slot(scratch, *a, nlen(*a));
                    for ni in 0..n {
                        let src = &g[ni * (sa + sb)..ni * (sa + sb) + sa];
                        for (s, v) in sl[ni * sa..(ni + 1) * sa].iter_mut().zip(src) {
                            *s += v;
                        }
                    }
                }
                if req(*b) {
                    let sl = slot(scratch, *b, nlen(*b));
                    for ni in 0..n {
                        let src = &g[ni * (sa + sb) + sa..(ni + 1) * (sa + sb)];
                        for (s, v) in sl[ni * sb..(ni + 1) * sb].iter_mut().zip(src) {
                            *s += v;
                        }
                    }
                }
            }
            Op::DepthToSpace2(x) => {
                if req(*x) {
                    let out_shape = &self.nodes[i].shape;
                    let gx = conv::space_to_depth2(g, out_shape[0], out_shape[1], out_shape[2], out_shape[3]);
                    for (s, v) in slot(scratch, *x, gx.len()).iter_mut().zip(&gx) {
                        *s += v;
                    }
                }
            }
            Op::GateMul { x, gate } => {
                let (n, c, h, w) = (
                    self.nodes[x.0].shape[0],
                    self.nodes[x.0].shape[1],
                    self.nodes[x.0].shape[2],
                    self.nodes[x.0].shape[3],
                );
                let hw = h * w;
                if req(*x) {
                    let gmap = nv(*gate);
                    let sl = slot(scratch, *x, nlen(*x));
                    for ni in 0..n {
                        let gm = &gmap[ni * hw..(ni + 1) * hw];
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            for k in 0..hw {
                                sl[base + k] += g[base + k] * gm[k];
                            }
                        }
                    }
                }
                if req(*gate) {
                    let xv = nv(*x);
                    let sl = slot(scratch, *gate, nlen(*gate));
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            for k in 0..hw {
                                sl[ni * hw + k] += g[base + k] * xv[base + k];
                            }
                        }
                    }
                }
            }
            Op::Mean(x) => {
                if req(*x) {
                    let n = nlen(*x);
                    let v = g[0] / n as f32;
                    for s in slot(scratch, *x, n).iter_mut() {
                        *s += v;
                    }
                }
            }
            Op::AbsMeanDiff(a, b) => {
                let n = nlen(*a);
                let scale = g[0] / n as f32;
                let (av, bv) = (nv(*a), nv(*b));
                if req(*a) {
                    let sl = slot(scratch, *a, n);
                    for k in 0..n {
                        let d = av[k] - bv[k];
                        if d > 0.0 {
                            sl[k] += scale;
                        } else if d < 0.0 {
                            sl[k] -= scale;
                        }
                    }
                }
                if req(*b) {
                    let sl = slot(scratch, *b, n);
                    for k in 0..n {
                        let d = av[k] - bv[k];
                        if d > 0.0 {
                            sl[k] -= scale;
                        } else if d < 0.0 {
                            sl[k] += scale;
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if req(*x) {
                    for (s, v) in slot(scratch, *x, g.len()).iter_mut().zip(g) {
                        *s += v;
                    }
                }
            }
        }
    }
}
