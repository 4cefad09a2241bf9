use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;
use std::fmt;

use super::kernels::{matmul_nt, matmul_tn, Conv2dGeom};
use super::{Result, Tensor, TensorError};

/// Names of the differentiable operations recorded on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Div,
    Scale,
    AddBias,
    Matmul,
    Transpose,
    Reshape,
    Sigmoid,
    Relu,
    Exp,
    Log,
    Softplus,
    Sum,
    Mean,
    SumLastdim,
    Softmax,
    LogSoftmax,
    Concat,
    AvgPool,
    Upsample,
    Conv2d,
    LayerNorm,
    Linear,
    GatherRows,
}

impl OpKind {
    pub const ALL: [OpKind; 26] = [
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Div,
        OpKind::Scale,
        OpKind::AddBias,
        OpKind::Matmul,
        OpKind::Transpose,
        OpKind::Reshape,
        OpKind::Sigmoid,
        OpKind::Relu,
        OpKind::Exp,
        OpKind::Log,
        OpKind::Softplus,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::SumLastdim,
        OpKind::Softmax,
        OpKind::LogSoftmax,
        OpKind::Concat,
        OpKind::AvgPool,
        OpKind::Upsample,
        OpKind::Conv2d,
        OpKind::LayerNorm,
        OpKind::Linear,
        OpKind::GatherRows,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Scale => "scale",
            OpKind::AddBias => "add_bias",
            OpKind::Matmul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Reshape => "reshape",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Relu => "relu",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Softplus => "softplus",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::SumLastdim => "sum_lastdim",
            OpKind::Softmax => "softmax_lastdim",
            OpKind::LogSoftmax => "log_softmax_lastdim",
            OpKind::Concat => "concat_lastdim",
            OpKind::AvgPool => "avgpool2x2",
            OpKind::Upsample => "upsample_nearest",
            OpKind::Conv2d => "conv2d",
            OpKind::LayerNorm => "layernorm",
            OpKind::Linear => "linear",
            OpKind::GatherRows => "gather_rows",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub(super) type Id = usize;

#[derive(Debug, Clone)]
pub(super) enum Op {
    Leaf,
    Add(Id, Id),
    Sub(Id, Id),
    Mul(Id, Id),
    Div(Id, Id),
    Scale(Id, f64),
    AddBias(Id),
    Matmul { a: Id, b: Id, m: usize, k: usize, n: usize },
    Transpose { a: Id, m: usize, n: usize },
    Reshape(Id),
    Sigmoid(Id),
    Relu(Id),
    Exp(Id),
    Log(Id),
    Softplus(Id),
    Sum(Id),
    Mean(Id),
    SumLastdim { a: Id, n: usize },
    Softmax { a: Id, n: usize },
    LogSoftmax { a: Id, n: usize },
    Concat { a: Id, b: Id, da: usize, db: usize },
    AvgPool { a: Id, h: usize, w: usize, c: usize },
    Upsample { a: Id, h: usize, w: usize, c: usize, factor: usize },
    Conv2d { x: Id, w: Id, b: Id, geom: Conv2dGeom },
    LayerNorm { x: Id, gamma: Id, beta: Id, n: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    Linear { x: Id, w: Id, b: Id, rows: usize, d_in: usize, d_out: usize },
    GatherRows { a: Id, rows: Vec<usize>, cols: usize },
}

impl Op {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf => return None,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Div(..) => OpKind::Div,
            Op::Scale(..) => OpKind::Scale,
            Op::AddBias(..) => OpKind::AddBias,
            Op::Matmul { .. } => OpKind::Matmul,
            Op::Transpose { .. } => OpKind::Transpose,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Relu(..) => OpKind::Relu,
            Op::Exp(..) => OpKind::Exp,
            Op::Log(..) => OpKind::Log,
            Op::Softplus(..) => OpKind::Softplus,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::SumLastdim { .. } => OpKind::SumLastdim,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LogSoftmax { .. } => OpKind::LogSoftmax,
            Op::Concat { .. } => OpKind::Concat,
            Op::AvgPool { .. } => OpKind::AvgPool,
            Op::Upsample { .. } => OpKind::Upsample,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Linear { .. } => OpKind::Linear,
            Op::GatherRows { .. } => OpKind::GatherRows,
        })
    }
}

#[derive(Debug)]
pub(super) struct Node {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub op: Op,
    pub requires_grad: bool,
}

/// Ordered record of executed operations. Nodes are appended as operations
/// run, so every node's inputs precede it; [`Var::backward`] walks the
/// record once in reverse and then clears it.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    generation: Cell<u64>,
    corrupt: Option<OpKind>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Test fixture: scales the backward contribution of `kind` by 1.5 so
    /// the gradient checker has something to catch.
    #[doc(hidden)]
    pub fn with_corrupted_backward(kind: OpKind) -> Self {
        Self {
            corrupt: Some(kind),
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records `t` as a leaf; it is differentiated iff `t.requires_grad()`.
    pub fn leaf(&self, t: &Tensor) -> Var<'_> {
        self.push_node(Node {
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
            op: Op::Leaf,
            requires_grad: t.requires_grad(),
        })
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&self, t: &Tensor) -> Var<'_> {
        self.push_node(Node {
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
            op: Op::Leaf,
            requires_grad: false,
        })
    }

    pub fn constant_from(&self, shape: &[usize], data: Vec<f64>) -> Result<Var<'_>> {
        let t = Tensor::new(shape, data)?;
        Ok(self.constant(&t))
    }

    fn push_node(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
            generation: self.generation.get(),
        }
    }

    /// Appends an op result after checking it for NaN/Inf.
    pub(super) fn push(
        &self,
        shape: Vec<usize>,
        data: Vec<f64>,
        op: Op,
        requires_grad: bool,
        allow_neg_inf: bool,
    ) -> Result<Var<'_>> {
        let bad = if allow_neg_inf {
            data.iter().any(|v| v.is_nan() || *v == f64::INFINITY)
        } else {
            data.iter().any(|v| !v.is_finite())
        };
        if bad {
            let name = op.kind().map_or("leaf", OpKind::name);
            return Err(TensorError::NonFinite { op: name });
        }
        Ok(self.push_node(Node {
            shape,
            data,
            op,
            requires_grad,
        }))
    }

    pub(super) fn nodes(&self) -> Ref<'_, Vec<Node>> {
        self.nodes.borrow()
    }

    fn backward_from(&self, loss: Id, seed: Option<&[f64]>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss];
        let seed = match seed {
            None if root.data.len() != 1 => {
                return Err(TensorError::NotScalar(root.shape.clone()))
            }
            None => vec![1.0],
            Some(s) if s.len() != root.data.len() => {
                return Err(TensorError::Shape {
                    op: "backward_with",
                    lhs: root.shape.clone(),
                    rhs: vec![s.len()],
                })
            }
            Some(s) => s.to_vec(),
        };
        if !root.requires_grad {
            return Err(TensorError::Detached);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss + 1];
        grads[loss] = Some(seed);
        let mut leaves = HashMap::new();
        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaves.insert(id, g);
                continue;
            }
            let scale = match (self.corrupt, node.op.kind()) {
                (Some(c), Some(k)) if c == k => 1.5,
                _ => 1.0,
            };
            let mut send = |target: Id, contrib: Vec<f64>| {
                if !nodes[target].requires_grad {
                    return;
                }
                let contrib = if scale != 1.0 {
                    contrib.into_iter().map(|v| v * scale).collect()
                } else {
                    contrib
                };
                match &mut grads[target] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            };
            backward_node(&nodes, node, &g, &mut send);
        }
        Ok(Gradients {
            leaves,
            generation: self.generation.get(),
        })
    }

    fn clear(&self) {
        self.nodes.borrow_mut().clear();
        self.generation.set(self.generation.get() + 1);
    }
}

/// Gradients of a scalar loss with respect to every leaf that requires grad.
#[derive(Debug, Clone)]
pub struct Gradients {
    leaves: HashMap<Id, Vec<f64>>,
    generation: u64,
}

impl Gradients {
    /// `None` when `v` did not influence the loss.
    pub fn wrt(&self, v: Var<'_>) -> Option<&[f64]> {
        assert_eq!(v.generation, self.generation, "variable from another tape pass");
        self.leaves.get(&v.id).map(Vec::as_slice)
    }

    /// Accumulates the gradient of `v` into `t.grad`.
    pub fn apply_to(&self, v: Var<'_>, t: &mut Tensor) {
        if let Some(g) = self.wrt(v) {
            t.accumulate_grad(g);
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(super) tape: &'t Tape,
    pub(super) id: Id,
    generation: u64,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var(#{} {:?})", self.id, self.shape())
    }
}

impl<'t> Var<'t> {
    pub(super) fn check(&self) {
        assert_eq!(
            self.generation,
            self.tape.generation.get(),
            "variable used after its tape was cleared by backward"
        );
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.check();
        self.tape.nodes()[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.check();
        self.tape.nodes()[self.id].data.len()
    }

    pub fn data(&self) -> Vec<f64> {
        self.check();
        self.tape.nodes()[self.id].data.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.check();
        self.tape.nodes()[self.id].requires_grad
    }

    /// Copies the value off the tape (no gradient link).
    pub fn value(&self) -> Tensor {
        self.check();
        let nodes = self.tape.nodes();
        let n = &nodes[self.id];
        Tensor::new(&n.shape, n.data.clone()).expect("tape node is well formed")
    }

    pub fn item(&self) -> f64 {
        let d = self.data();
        assert_eq!(d.len(), 1, "item() on non-scalar");
        d[0]
    }

    /// Reverse pass from this scalar. Clears the tape afterward; vars from
    /// this pass may still be used as keys into the returned [`Gradients`].
    pub fn backward(self) -> Result<Gradients> {
        self.check();
        let out = self.tape.backward_from(self.id, None);
        self.tape.clear();
        out
    }

    /// Vector-Jacobian product: gradients of `Σ seed ⊙ self`, for a
    /// non-scalar output. Clears the tape like [`Var::backward`].
    pub fn backward_with(self, seed: &[f64]) -> Result<Gradients> {
        self.check();
        let out = self.tape.backward_from(self.id, Some(seed));
        self.tape.clear();
        out
    }
}

fn backward_node(nodes: &[Node], node: &Node, g: &[f64], send: &mut dyn FnMut(Id, Vec<f64>)) {
    let val = |id: Id| -> &[f64] { &nodes[id].data };
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            send(*a, g.to_vec());
            send(*b, g.to_vec());
        }
        Op::Sub(a, b) => {
            send(*a, g.to_vec());
            send(*b, g.iter().map(|v| -v).collect());
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            send(*a, g.iter().zip(bv).map(|(g, b)| g * b).collect());
            send(*b, g.iter().zip(av).map(|(g, a)| g * a).collect());
        }
        Op::Div(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            send(*a, g.iter().zip(bv).map(|(g, b)| g / b).collect());
            send(
                *b,
                g.iter()
                    .zip(av.iter().zip(bv))
                    .map(|(g, (a, b))| -g * a / (b * b))
                    .collect(),
            );
        }
        Op::Scale(a, c) => send(*a, g.iter().map(|v| v * c).collect()),
        Op::AddBias(a) | Op::Reshape(a) => send(*a, g.to_vec()),
        Op::Matmul { a, b, m, k, n } => {
            send(*a, matmul_nt(g, val(*b), *m, *n, *k));
            send(*b, matmul_tn(val(*a), g, *m, *k, *n));
        }
        Op::Transpose { a, m, n } => {
            // output is n×m
            send(*a, super::kernels::transpose2(g, *n, *m));
        }
        Op::Sigmoid(a) => {
            let y = &node.data;
            send(*a, g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect());
        }
        Op::Relu(a) => {
            let x = val(*a);
            send(
                *a,
                g.iter()
                    .zip(x)
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect(),
            );
        }
        Op::Exp(a) => send(*a, g.iter().zip(&node.data).map(|(g, y)| g * y).collect()),
        Op::Log(a) => send(*a, g.iter().zip(val(*a)).map(|(g, x)| g / x).collect()),
        Op::Softplus(a) => {
            let x = val(*a);
            send(*a, g.iter().zip(x).map(|(g, x)| g * sigmoid(*x)).collect());
        }
        Op::Sum(a) => send(*a, vec![g[0]; nodes[*a].data.len()]),
        Op::Mean(a) => {
            let n = nodes[*a].data.len();
            send(*a, vec![g[0] / n as f64; n]);
        }
        Op::SumLastdim { a, n } => {
            let mut out = Vec::with_capacity(nodes[*a].data.len());
            for gv in g {
                out.extend(std::iter::repeat_n(*gv, *n));
            }
            send(*a, out);
        }
        Op::Softmax { a, n } => {
            let y = &node.data;
            let mut out = vec![0.0; y.len()];
            for r in 0..y.len() / n {
                let ys = &y[r * n..(r + 1) * n];
                let gs = &g[r * n..(r + 1) * n];
                let dot: f64 = ys.iter().zip(gs).map(|(y, g)| y * g).sum();
                for j in 0..*n {
                    out[r * n + j] = ys[j] * (gs[j] - dot);
                }
            }
            send(*a, out);
        }
        Op::LogSoftmax { a, n } => {
            let y = &node.data;
            let mut out = vec![0.0; y.len()];
            for r in 0..y.len() / n {
                let gs = &g[r * n..(r + 1) * n];
                let total: f64 = gs.iter().sum();
                for j in 0..*n {
                    out[r * n + j] = gs[j] - y[r * n + j].exp() * total;
                }
            }
            send(*a, out);
        }
        Op::Concat { a, b, da, db } => {
            let d = da + db;
            let rows = g.len() / d;
            let mut ga = Vec::with_capacity(rows * da);
            let mut gb = Vec::with_capacity(rows * db);
            for r in 0..rows {
                ga.extend_from_slice(&g[r * d..r * d + da]);
                gb.extend_from_slice(&g[r * d + da..(r + 1) * d]);
            }
            send(*a, ga);
            send(*b, gb);
        }
        Op::AvgPool { a, h, w, c } => {
            let (oh, ow) = (h / 2, w / 2);
            let mut out = vec![0.0; h * w * c];
            for oy in 0..oh {
                for ox in 0..ow {
                    for ch in 0..*c {
                        let gv = 0.25 * g[(oy * ow + ox) * c + ch];
                        for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            out[((2 * oy + dy) * w + 2 * ox + dx) * c + ch] += gv;
                        }
                    }
                }
            }
            send(*a, out);
        }
        Op::Upsample { a, h, w, c, factor } => {
            let (oh, ow) = (h * factor, w * factor);
            let mut out = vec![0.0; h * w * c];
            for oy in 0..oh {
                for ox in 0..ow {
                    let src = ((oy / factor) * w + ox / factor) * c;
                    let dst = (oy * ow + ox) * c;
                    for ch in 0..*c {
                        out[src + ch] += g[dst + ch];
                    }
                }
            }
            send(*a, out);
        }
        Op::Conv2d { x, w, b, geom } => {
            let p = geom.out_h() * geom.out_w();
            let pl = geom.patch_len();
            let co = geom.c_out;
            let mut gb = vec![0.0; co];
            for r in 0..p {
                for (acc, gv) in gb.iter_mut().zip(&g[r * co..(r + 1) * co]) {
                    *acc += gv;
                }
            }
            send(*b, gb);
            if nodes[*w].requires_grad {
                let cols = geom.im2col(val(*x));
                send(*w, matmul_tn(&cols, g, p, pl, co));
            }
            if nodes[*x].requires_grad {
                let dcols = matmul_nt(g, val(*w), p, co, pl);
                send(*x, geom.col2im(&dcols));
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            n,
            xhat,
            rstd,
        } => {
            let gam = val(*gamma);
            let rows = g.len() / n;
            let mut gx = vec![0.0; g.len()];
            let mut gg = vec![0.0; *n];
            let mut gbeta = vec![0.0; *n];
            for r in 0..rows {
                let gs = &g[r * n..(r + 1) * n];
                let xs = &xhat[r * n..(r + 1) * n];
                let mut mean_d = 0.0;
                let mut mean_dx = 0.0;
                for j in 0..*n {
                    gg[j] += gs[j] * xs[j];
                    gbeta[j] += gs[j];
                    let d = gs[j] * gam[j];
                    mean_d += d;
                    mean_dx += d * xs[j];
                }
                mean_d /= *n as f64;
                mean_dx /= *n as f64;
                for j in 0..*n {
                    let d = gs[j] * gam[j];
                    gx[r * n + j] = rstd[r] * (d - mean_d - xs[j] * mean_dx);
                }
            }
            send(*x, gx);
            send(*gamma, gg);
            send(*beta, gbeta);
        }
        Op::Linear {
            x,
            w,
            b,
            rows,
            d_in,
            d_out,
        } => {
            let mut gb = vec![0.0; *d_out];
            for r in 0..*rows {
                for (acc, gv) in gb.iter_mut().zip(&g[r * d_out..(r + 1) * d_out]) {
                    *acc += gv;
                }
            }
            send(*b, gb);
            if nodes[*w].requires_grad {
                send(*w, matmul_tn(val(*x), g, *rows, *d_in, *d_out));
            }
            if nodes[*x].requires_grad {
                send(*x, matmul_nt(g, val(*w), *rows, *d_out, *d_in));
            }
        }
        Op::GatherRows { a, rows, cols } => {
            let mut out = vec![0.0; nodes[*a].data.len()];
            for (k, &r) in rows.iter().enumerate() {
                for c in 0..*cols {
                    out[r * cols + c] += g[k * cols + c];
                }
            }
            send(*a, out);
        }
    }
}

pub(super) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
