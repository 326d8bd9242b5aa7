//! The gradient tape.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s in creation
//! order, which is a topological order by construction. [`Tape::backward`]
//! walks the records in reverse and accumulates vector-Jacobian products.

use std::cell::RefCell;
use std::rc::Rc;

use super::{conv, Tensor};
use crate::error::{contract, Result};
use crate::par::Exec;

/// Identity of a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        stride: usize,
        pad: usize,
    },
    AddBias {
        input: NodeId,
        bias: NodeId,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Sum(NodeId),
    Upsample {
        input: NodeId,
        factor: usize,
    },
    MaxPool {
        input: NodeId,
        argmax: Vec<usize>,
    },
    Concat(Vec<NodeId>),
    Crop {
        input: NodeId,
        y0: usize,
        x0: usize,
    },
    Softmax(NodeId),
    SoftmaxCe {
        logits: NodeId,
        probs: Tensor,
        target: Vec<usize>,
    },
    Dice {
        probs: NodeId,
        target: Rc<Tensor>,
        smooth: f64,
    },
    FoldAdd {
        base: NodeId,
        extra: NodeId,
    },
}

#[derive(Debug)]
struct Node {
    value: Rc<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Records operations for reverse-mode differentiation. Not shareable across
/// threads; build one tape per logical thread.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    exec: Exec,
}

/// A handle to a value on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("dims", &self.value().dims())
            .finish()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn wrt(&self, var: Var<'_>) -> Option<&Tensor> {
        self.get(var.id)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }

    /// Every node that received a gradient.
    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Tensor)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (NodeId(i), g)))
    }

    pub fn len(&self) -> usize {
        self.iter().count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose batch-level kernels follow `exec`.
    pub fn with_exec(exec: Exec) -> Self {
        Tape {
            nodes: RefCell::default(),
            exec,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// A leaf that gradients flow to.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    fn push(&self, value: Tensor, requires_grad: bool, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = NodeId(nodes.len());
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            op,
        });
        Var { tape: self, id }
    }

    fn value(&self, id: NodeId) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id.0].value)
    }

    fn requires(&self, ids: &[NodeId]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|id| nodes[id.0].requires_grad)
    }

    fn record(&self, op_name: &'static str, value: Tensor, inputs: &[NodeId], op: Op) -> Result<Var<'_>> {
        let value = value.check_finite(op_name)?;
        let rg = self.requires(inputs);
        Ok(self.push(value, rg, op))
    }

    /// Concatenates rank-4 tensors along the channel axis.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        const OP: &str = "concat";
        if parts.is_empty() {
            return contract(OP, "no inputs");
        }
        let vals: Vec<Rc<Tensor>> = parts.iter().map(|v| v.value()).collect();
        let [n, _, h, w] = vals[0].dims4(OP)?;
        let mut ctotal = 0;
        for v in &vals {
            let [vn, vc, vh, vw] = v.dims4(OP)?;
            if (vn, vh, vw) != (n, h, w) {
                return contract(OP, format!("mismatched dims {:?} vs {:?}", v.dims(), vals[0].dims()));
            }
            ctotal += vc;
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * ctotal * plane);
        for b in 0..n {
            for v in &vals {
                let c = v.dims()[1];
                data.extend_from_slice(&v.data()[b * c * plane..(b + 1) * c * plane]);
            }
        }
        let ids: Vec<NodeId> = parts.iter().map(|v| v.id).collect();
        let out = Tensor::new(vec![n, ctotal, h, w], data)?;
        self.record(OP, out, &ids, Op::Concat(ids.clone()))
    }

    /// Gradients of the scalar `loss` with respect to every node that
    /// requires them and lies upstream of `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let seed = {
            let v = loss.value();
            if v.numel() != 1 {
                return contract("backward", format!("loss must be scalar, got dims {:?}", v.dims()));
            }
            Tensor::full(v.dims(), 1.0)
        };
        self.backward_from(loss, seed)
    }

    /// Vector-Jacobian product seeded with `seed` at `output`.
    pub fn backward_from(&self, output: Var<'_>, seed: Tensor) -> Result<Gradients> {
        if !std::ptr::eq(output.tape, self) {
            return contract("backward", "variable belongs to another tape");
        }
        if seed.dims() != output.value().dims() {
            return contract("backward", "seed shape differs from output shape");
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        if !nodes[output.id.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[output.id.0] = Some(seed);
        let mut done: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        for idx in (0..=output.id.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            let mut push = |id: NodeId, delta: Tensor| {
                if !nodes[id.0].requires_grad {
                    return;
                }
                match &mut grads[id.0] {
                    Some(acc) => acc.add_assign(&delta),
                    slot => *slot = Some(delta),
                }
            };
            let val = |id: NodeId| &nodes[id.0].value;
            match &node.op {
                Op::Leaf => {}
                Op::Conv2d {
                    input,
                    kernel,
                    stride,
                    pad,
                } => {
                    let (dx, dk) = conv::backward(val(*input), val(*kernel), &g, *stride, *pad, self.exec)?;
                    push(*input, dx);
                    push(*kernel, dk);
                }
                Op::AddBias { input, bias } => {
                    let [n, c, h, w] = g.dims4("add_bias")?;
                    let mut db = vec![0.0; c];
                    for b in 0..n {
                        for (ch, acc) in db.iter_mut().enumerate() {
                            let s = (b * c + ch) * h * w;
                            *acc += g.data()[s..s + h * w].iter().sum::<f64>();
                        }
                    }
                    push(*bias, Tensor::new(vec![c], db)?);
                    push(*input, g.clone());
                }
                Op::Relu(x) => {
                    let xv = val(*x);
                    let d = zip_map(&g, xv, |gi, xi| if xi > 0.0 { gi } else { 0.0 });
                    push(*x, d);
                }
                Op::Sigmoid(x) => {
                    let s = &node.value;
                    push(*x, zip_map(&g, s, |gi, si| gi * si * (1.0 - si)));
                }
                Op::Add(a, b) => {
                    push(*a, g.clone());
                    push(*b, g.clone());
                }
                Op::Mul(a, b) => {
                    push(*a, zip_map(&g, val(*b), |gi, bi| gi * bi));
                    push(*b, zip_map(&g, val(*a), |gi, ai| gi * ai));
                }
                Op::Scale(x, a) => push(*x, g.scaled(*a)),
                Op::Sum(x) => {
                    let gs = g.data()[0];
                    push(*x, Tensor::full(val(*x).dims(), gs));
                }
                Op::Upsample { input, factor } => {
                    push(*input, upsample_adjoint(&g, val(*input).dims(), *factor));
                }
                Op::MaxPool { input, argmax } => {
                    let mut dx = Tensor::zeros(val(*input).dims());
                    for (o, &src) in argmax.iter().enumerate() {
                        dx.data_mut()[src] += g.data()[o];
                    }
                    push(*input, dx);
                }
                Op::Concat(parts) => {
                    let [n, ctotal, h, w] = g.dims4("concat")?;
                    let plane = h * w;
                    let mut offset = 0;
                    for p in parts {
                        let c = val(*p).dims()[1];
                        let mut d = Vec::with_capacity(n * c * plane);
                        for b in 0..n {
                            let s = (b * ctotal + offset) * plane;
                            d.extend_from_slice(&g.data()[s..s + c * plane]);
                        }
                        push(*p, Tensor::new(vec![n, c, h, w], d)?);
                        offset += c;
                    }
                }
                Op::Crop { input, y0, x0 } => {
                    let [n, c, h, w] = val(*input).dims4("crop")?;
                    let [_, _, ch, cw] = g.dims4("crop")?;
                    let mut dx = Tensor::zeros(&[n, c, h, w]);
                    for b in 0..n {
                        for k in 0..c {
                            for y in 0..ch {
                                for x in 0..cw {
                                    dx.data_mut()[((b * c + k) * h + y0 + y) * w + x0 + x] =
                                        g.data()[((b * c + k) * ch + y) * cw + x];
                                }
                            }
                        }
                    }
                    push(*input, dx);
                }
                Op::Softmax(x) => {
                    let p = &node.value;
                    let [n, k, h, w] = p.dims4("softmax")?;
                    let plane = h * w;
                    let mut dx = Tensor::zeros(p.dims());
                    for b in 0..n {
                        for s in 0..plane {
                            let idx = |c: usize| (b * k + c) * plane + s;
                            let dot: f64 = (0..k).map(|c| g.data()[idx(c)] * p.data()[idx(c)]).sum();
                            for c in 0..k {
                                dx.data_mut()[idx(c)] = p.data()[idx(c)] * (g.data()[idx(c)] - dot);
                            }
                        }
                    }
                    push(*x, dx);
                }
                Op::SoftmaxCe { logits, probs, target } => {
                    let [n, k, h, w] = probs.dims4("softmax_ce")?;
                    let plane = h * w;
                    let scale = g.data()[0] / (n * plane) as f64;
                    let mut dx = probs.scaled(scale);
                    let p = probs.data();
                    for b in 0..n {
                        for s in 0..plane {
                            let t = target[b * plane + s];
                            // p_t - 1 as -Σ_{c≠t} p_c: no cancellation when p_t ≈ 1
                            let rest: f64 = (0..k).filter(|&c| c != t).map(|c| p[(b * k + c) * plane + s]).sum();
                            dx.data_mut()[(b * k + t) * plane + s] = -rest * scale;
                        }
                    }
                    push(*logits, dx);
                }
                Op::Dice { probs, target, smooth } => {
                    let p = val(*probs);
                    let [n, k, h, w] = p.dims4("dice_loss")?;
                    let plane = h * w;
                    let scale = g.data()[0] / (n * k) as f64;
                    let mut dx = Tensor::zeros(p.dims());
                    for b in 0..n {
                        for c in 0..k {
                            let r = (b * k + c) * plane..(b * k + c + 1) * plane;
                            let (ps, ts) = (&p.data()[r.clone()], &target.data()[r.clone()]);
                            let inter: f64 = ps.iter().zip(ts).map(|(a, b)| a * b).sum();
                            let denom = ps.iter().sum::<f64>() + ts.iter().sum::<f64>() + smooth;
                            let num = 2.0 * inter + smooth;
                            for (i, t) in ts.iter().enumerate() {
                                let d = -(2.0 * t * denom - num) / (denom * denom);
                                dx.data_mut()[r.start + i] = scale * d;
                            }
                        }
                    }
                    push(*probs, dx);
                }
                Op::FoldAdd { base, extra } => {
                    let [n, c, h, w] = val(*base).dims4("fold_add")?;
                    let e = val(*extra).dims()[1];
                    let plane = h * w;
                    let mut de = Tensor::zeros(val(*extra).dims());
                    for b in 0..n {
                        for j in 0..e {
                            let src = (b * c + j % c) * plane;
                            let dst = (b * e + j) * plane;
                            de.data_mut()[dst..dst + plane].copy_from_slice(&g.data()[src..src + plane]);
                        }
                    }
                    push(*base, g.clone());
                    push(*extra, de);
                }
            }
            done[idx] = Some(g);
        }
        Ok(Gradients { grads: done })
    }
}

fn zip_map(g: &Tensor, x: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_fn(g.dims(), |i| f(g.data()[i], x.data()[i]))
}

fn upsample_adjoint(g: &Tensor, in_dims: &[usize], factor: usize) -> Tensor {
    let (n, c, h, w) = (in_dims[0], in_dims[1], in_dims[2], in_dims[3]);
    let (fh, fw) = (h * factor, w * factor);
    let mut dx = Tensor::zeros(in_dims);
    for plane in 0..n * c {
        for y in 0..fh {
            for x in 0..fw {
                dx.data_mut()[(plane * h + y / factor) * w + x / factor] += g.data()[(plane * fh + y) * fw + x];
            }
        }
    }
    dx
}

/// Nearest-neighbour upsampling outside of any tape.
pub fn upsample_nearest(t: &Tensor, factor: usize) -> Result<Tensor> {
    const OP: &str = "upsample_nearest";
    let [n, c, h, w] = t.dims4(OP)?;
    if factor < 1 {
        return contract(OP, "factor must be >= 1");
    }
    let (fh, fw) = (h * factor, w * factor);
    let mut data = Vec::with_capacity(n * c * fh * fw);
    for plane in 0..n * c {
        for y in 0..fh {
            let row = &t.data()[(plane * h + y / factor) * w..(plane * h + y / factor + 1) * w];
            for x in 0..fw {
                data.push(row[x / factor]);
            }
        }
    }
    Tensor::new(vec![n, c, fh, fw], data)
}

/// Per-pixel channel softmax of `[N, K, H, W]` logits.
pub fn softmax_channels(t: &Tensor) -> Result<Tensor> {
    let [n, k, h, w] = t.dims4("softmax")?;
    let plane = h * w;
    let mut out = Tensor::zeros(t.dims());
    for b in 0..n {
        for s in 0..plane {
            let idx = |c: usize| (b * k + c) * plane + s;
            let m = (0..k).map(|c| t.data()[idx(c)]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..k).map(|c| (t.data()[idx(c)] - m).exp()).sum();
            for c in 0..k {
                out.data_mut()[idx(c)] = (t.data()[idx(c)] - m).exp() / z;
            }
        }
    }
    Ok(out)
}

impl<'t> Var<'t> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(&[self.id])
    }

    fn same_tape(&self, other: &Var<'t>, op: &'static str) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            contract(op, "operands live on different tapes")
        }
    }

    /// Cross-correlation with `kernel: [Cout, Cin, kh, kw]`; output extent
    /// `(H + 2·pad − kh)/stride + 1` must be integral.
    pub fn conv2d(self, kernel: Var<'t>, stride: usize, pad: usize) -> Result<Var<'t>> {
        self.same_tape(&kernel, "conv2d")?;
        let out = conv::forward(&self.value(), &kernel.value(), stride, pad, self.tape.exec)?;
        self.tape.record(
            "conv2d",
            out,
            &[self.id, kernel.id],
            Op::Conv2d {
                input: self.id,
                kernel: kernel.id,
                stride,
                pad,
            },
        )
    }

    /// Adds `bias: [C]` to every pixel of channel `c`.
    pub fn add_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        const OP: &str = "add_bias";
        self.same_tape(&bias, OP)?;
        let x = self.value();
        let b = bias.value();
        let [n, c, h, w] = x.dims4(OP)?;
        if b.dims() != [c] {
            return contract(OP, format!("bias dims {:?} for {c} channels", b.dims()));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * c * plane);
        for (i, chunk) in x.data().chunks_exact(plane).enumerate() {
            let bias = b.data()[i % c];
            data.extend(chunk.iter().map(|v| v + bias));
        }
        let out = Tensor::new(x.dims().to_vec(), data)?;
        self.tape.record(
            OP,
            out,
            &[self.id, bias.id],
            Op::AddBias {
                input: self.id,
                bias: bias.id,
            },
        )
    }

    pub fn relu(self) -> Result<Var<'t>> {
        let out = self.value().map(|v| v.max(0.0));
        self.tape.record("relu", out, &[self.id], Op::Relu(self.id))
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        let out = self.value().map(sigmoid);
        self.tape.record("sigmoid", out, &[self.id], Op::Sigmoid(self.id))
    }

    fn binary(self, other: Var<'t>, op: &'static str) -> Result<(Rc<Tensor>, Rc<Tensor>)> {
        self.same_tape(&other, op)?;
        let (a, b) = (self.value(), other.value());
        if a.dims() != b.dims() {
            return contract(op, format!("{:?} vs {:?}", a.dims(), b.dims()));
        }
        Ok((a, b))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.binary(other, "add")?;
        let out = zip_map(&a, &b, |x, y| x + y);
        self.tape
            .record("add", out, &[self.id, other.id], Op::Add(self.id, other.id))
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.binary(other, "mul")?;
        let out = zip_map(&a, &b, |x, y| x * y);
        self.tape
            .record("mul", out, &[self.id, other.id], Op::Mul(self.id, other.id))
    }

    pub fn scale(self, a: f64) -> Result<Var<'t>> {
        let out = self.value().scaled(a);
        self.tape.record("scale", out, &[self.id], Op::Scale(self.id, a))
    }

    pub fn sum(self) -> Result<Var<'t>> {
        let out = Tensor::scalar(self.value().sum());
        self.tape.record("sum", out, &[self.id], Op::Sum(self.id))
    }

    pub fn upsample_nearest(self, factor: usize) -> Result<Var<'t>> {
        let out = upsample_nearest(&self.value(), factor)?;
        self.tape.record(
            "upsample_nearest",
            out,
            &[self.id],
            Op::Upsample { input: self.id, factor },
        )
    }

    /// 2×2 max pooling with stride 2; ties resolve to the first element in
    /// row-major window order.
    pub fn max_pool2(self) -> Result<Var<'t>> {
        const OP: &str = "max_pool2";
        let x = self.value();
        let [n, c, h, w] = x.dims4(OP)?;
        if h % 2 != 0 || w % 2 != 0 {
            return contract(OP, format!("spatial dims {h}x{w} must be even"));
        }
        let (ho, wo) = (h / 2, w / 2);
        let mut data = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = (f64::NEG_INFINITY, 0);
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let idx = (plane * h + 2 * oy + dy) * w + 2 * ox + dx;
                        if x.data()[idx] > best.0 {
                            best = (x.data()[idx], idx);
                        }
                    }
                    data.push(best.0);
                    argmax.push(best.1);
                }
            }
        }
        let out = Tensor::new(vec![n, c, ho, wo], data)?;
        self.tape
            .record(OP, out, &[self.id], Op::MaxPool { input: self.id, argmax })
    }

    /// Spatial window `[y0, y0+h) × [x0, x0+w)` of a rank-4 tensor.
    pub fn crop(self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Var<'t>> {
        const OP: &str = "crop";
        let x = self.value();
        let [n, c, xh, xw] = x.dims4(OP)?;
        if h == 0 || w == 0 || y0 + h > xh || x0 + w > xw {
            return contract(OP, format!("window {y0}+{h}, {x0}+{w} outside {xh}x{xw}"));
        }
        let mut data = Vec::with_capacity(n * c * h * w);
        for plane in 0..n * c {
            for y in 0..h {
                let s = (plane * xh + y0 + y) * xw + x0;
                data.extend_from_slice(&x.data()[s..s + w]);
            }
        }
        let out = Tensor::new(vec![n, c, h, w], data)?;
        self.tape
            .record(OP, out, &[self.id], Op::Crop { input: self.id, y0, x0 })
    }

    /// Softmax over the channel axis of `[N, K, H, W]`.
    pub fn softmax(self) -> Result<Var<'t>> {
        let out = softmax_channels(&self.value())?;
        self.tape.record("softmax", out, &[self.id], Op::Softmax(self.id))
    }

    /// Mean over pixels of `−log softmax(logits)[target]`; `target` holds
    /// one class id per pixel in `[N, H, W]` row-major order.
    pub fn softmax_ce(self, target: &[usize]) -> Result<Var<'t>> {
        const OP: &str = "softmax_ce";
        let x = self.value();
        let [n, k, h, w] = x.dims4(OP)?;
        let plane = h * w;
        if target.len() != n * plane {
            return contract(OP, format!("{} targets for {} pixels", target.len(), n * plane));
        }
        if let Some(&bad) = target.iter().find(|&&t| t >= k) {
            return contract(OP, format!("class id {bad} outside [0, {k})"));
        }
        let probs = softmax_channels(&x)?;
        let mut total = 0.0;
        for b in 0..n {
            for s in 0..plane {
                let idx = |c: usize| (b * k + c) * plane + s;
                let t = target[b * plane + s];
                let (mut m, mut arg) = (f64::NEG_INFINITY, 0);
                for c in 0..k {
                    if x.data()[idx(c)] > m {
                        m = x.data()[idx(c)];
                        arg = c;
                    }
                }
                // log Σ exp(x - m) = ln(1 + Σ_{c ≠ argmax} exp(x_c - m))
                let rest: f64 = (0..k).filter(|&c| c != arg).map(|c| (x.data()[idx(c)] - m).exp()).sum();
                total += (m - x.data()[idx(t)]) + rest.ln_1p();
            }
        }
        let out = Tensor::scalar(total / (n * plane) as f64);
        self.tape.record(
            OP,
            out,
            &[self.id],
            Op::SoftmaxCe {
                logits: self.id,
                probs,
                target: target.to_vec(),
            },
        )
    }

    /// Soft Dice loss `1 − (2Σpt + s)/(Σp + Σt + s)` averaged over batch
    /// and classes; `target` is one-hot with the same shape as `self`.
    pub fn dice_loss(self, target: &Tensor, smooth: f64) -> Result<Var<'t>> {
        const OP: &str = "dice_loss";
        let p = self.value();
        let [n, k, h, w] = p.dims4(OP)?;
        if target.dims() != p.dims() {
            return contract(OP, format!("target {:?} vs probs {:?}", target.dims(), p.dims()));
        }
        let plane = h * w;
        let mut total = 0.0;
        for bc in 0..n * k {
            let r = bc * plane..(bc + 1) * plane;
            let (ps, ts) = (&p.data()[r.clone()], &target.data()[r]);
            let inter: f64 = ps.iter().zip(ts).map(|(a, b)| a * b).sum();
            let denom = ps.iter().sum::<f64>() + ts.iter().sum::<f64>() + smooth;
            total += 1.0 - (2.0 * inter + smooth) / denom;
        }
        let out = Tensor::scalar(total / (n * k) as f64);
        self.tape.record(
            OP,
            out,
            &[self.id],
            Op::Dice {
                probs: self.id,
                target: Rc::new(target.clone()),
                smooth,
            },
        )
    }

    /// Adds channel `j` of `extra` into channel `j mod C` of `self`.
    pub fn fold_add(self, extra: Var<'t>) -> Result<Var<'t>> {
        const OP: &str = "fold_add";
        self.same_tape(&extra, OP)?;
        let (b, e) = (self.value(), extra.value());
        let [n, c, h, w] = b.dims4(OP)?;
        let [en, ec, eh, ew] = e.dims4(OP)?;
        if (en, eh, ew) != (n, h, w) {
            return contract(OP, format!("{:?} vs {:?}", b.dims(), e.dims()));
        }
        let plane = h * w;
        let mut out = (*b).clone();
        for bi in 0..n {
            for j in 0..ec {
                let dst = (bi * c + j % c) * plane;
                let src = (bi * ec + j) * plane;
                for s in 0..plane {
                    out.data_mut()[dst + s] += e.data()[src + s];
                }
            }
        }
        self.tape.record(
            OP,
            out,
            &[self.id, extra.id],
            Op::FoldAdd {
                base: self.id,
                extra: extra.id,
            },
        )
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
