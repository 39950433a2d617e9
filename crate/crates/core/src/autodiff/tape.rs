use std::cell::{Cell, RefCell};
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub type NodeId = usize;

/// A recorded operation. Binary elementwise kinds broadcast a length-1 operand.
#[derive(Clone)]
pub(crate) enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sqrt(NodeId),
    Square(NodeId),
    Sigmoid(NodeId),
    LogSigmoid(NodeId),
    Dot(NodeId, NodeId),
    Sum(NodeId),
    Scale(NodeId, f64),
    /// `A x + b` (or `Aᵀ x + b`) with a constant matrix.
    Affine {
        matrix: Arc<Matrix>,
        transpose: bool,
        x: NodeId,
        bias: Option<NodeId>,
    },
    Clip(NodeId, f64, f64),
    CumSum(NodeId),
    Index(NodeId, usize),
    Slice(NodeId, usize, usize),
    Select(Arc<Vec<bool>>, NodeId, NodeId),
    /// Packed row-major lower triangle times a vector.
    TrilMatVec(NodeId, NodeId),
    TrilSolve(NodeId, NodeId),
    TrilSolveT(NodeId, NodeId),
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(_) => "neg",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Sqrt(_) => "sqrt",
            Op::Square(_) => "square",
            Op::Sigmoid(_) => "sigmoid",
            Op::LogSigmoid(_) => "log-sigmoid",
            Op::Dot(..) => "dot",
            Op::Sum(_) => "sum",
            Op::Scale(..) => "scale",
            Op::Affine { .. } => "affine",
            Op::Clip(..) => "clip",
            Op::CumSum(_) => "cumsum",
            Op::Index(..) => "index",
            Op::Slice(..) => "slice",
            Op::Select(..) => "select",
            Op::TrilMatVec(..) => "tril-matvec",
            Op::TrilSolve(..) => "tril-solve",
            Op::TrilSolveT(..) => "tril-solve-transpose",
        }
    }

    pub(crate) fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::Dot(a, b)
            | Op::Select(_, a, b)
            | Op::TrilMatVec(a, b)
            | Op::TrilSolve(a, b)
            | Op::TrilSolveT(a, b) => vec![*a, *b],
            Op::Neg(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sqrt(a)
            | Op::Square(a)
            | Op::Sigmoid(a)
            | Op::LogSigmoid(a)
            | Op::Sum(a)
            | Op::Scale(a, _)
            | Op::Clip(a, ..)
            | Op::CumSum(a)
            | Op::Index(a, _)
            | Op::Slice(a, ..) => vec![*a],
            Op::Affine { x, bias, .. } => match bias {
                Some(b) => vec![*x, *b],
                None => vec![*x],
            },
        }
    }
}

pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) value: Vec<f64>,
}

/// Append-only record of operations for one reverse sweep.
///
/// A tape is meant to be used for a single estimator evaluation and then dropped.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    last_visits: Cell<usize>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
    len: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("value", &self.value())
            .finish()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log σ(x) = -log(1 + e^{-x})`, stable for large `|x|`.
pub(crate) fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

#[inline]
pub(crate) fn tril_index(i: usize, j: usize) -> usize {
    i * (i + 1) / 2 + j
}

/// Dimension of the square matrix packed into `len` lower-triangular entries.
pub(crate) fn tril_dim(len: usize) -> Option<usize> {
    let mut d = 0;
    while d * (d + 1) / 2 < len {
        d += 1;
    }
    (d * (d + 1) / 2 == len).then_some(d)
}

fn broadcast_len(a: usize, b: usize) -> Option<usize> {
    match (a, b) {
        _ if a == b => Some(a),
        (1, n) | (n, 1) => Some(n),
        _ => None,
    }
}

#[inline]
fn at(v: &[f64], i: usize) -> f64 {
    if v.len() == 1 {
        v[0]
    } else {
        v[i]
    }
}

fn forward_solve(l: &[f64], b: &[f64]) -> Vec<f64> {
    let d = b.len();
    let mut y = vec![0.0; d];
    for i in 0..d {
        let mut s = b[i];
        for j in 0..i {
            s -= l[tril_index(i, j)] * y[j];
        }
        y[i] = s / l[tril_index(i, i)];
    }
    y
}

fn backward_solve(l: &[f64], b: &[f64]) -> Vec<f64> {
    let d = b.len();
    let mut y = vec![0.0; d];
    for i in (0..d).rev() {
        let mut s = b[i];
        for j in i + 1..d {
            s -= l[tril_index(j, i)] * y[j];
        }
        y[i] = s / l[tril_index(i, i)];
    }
    y
}

fn shape_error(op: &Op, lens: &[usize]) -> Error {
    Error::usage(format!("incompatible operand lengths {lens:?} for `{}`", op.name()))
}

/// Evaluates `op` given the values of all earlier nodes.
fn evaluate(op: &Op, nodes: &[Node]) -> Result<Vec<f64>> {
    let val = |id: NodeId| -> &[f64] { &nodes[id].value };
    let binary = |a: NodeId, b: NodeId, f: fn(f64, f64) -> f64| -> Result<Vec<f64>> {
        let (x, y) = (val(a), val(b));
        let n = broadcast_len(x.len(), y.len()).ok_or_else(|| shape_error(op, &[x.len(), y.len()]))?;
        Ok((0..n).map(|i| f(at(x, i), at(y, i))).collect())
    };
    let unary = |a: NodeId, f: &dyn Fn(f64) -> f64| -> Vec<f64> { val(a).iter().map(|x| f(*x)).collect() };
    Ok(match op {
        Op::Leaf => unreachable!("leaves carry their own value"),
        Op::Add(a, b) => binary(*a, *b, |x, y| x + y)?,
        Op::Sub(a, b) => binary(*a, *b, |x, y| x - y)?,
        Op::Mul(a, b) => binary(*a, *b, |x, y| x * y)?,
        Op::Div(a, b) => binary(*a, *b, |x, y| x / y)?,
        Op::Neg(a) => unary(*a, &|x| -x),
        Op::Exp(a) => unary(*a, &f64::exp),
        Op::Log(a) => unary(*a, &f64::ln),
        Op::Sqrt(a) => unary(*a, &f64::sqrt),
        Op::Square(a) => unary(*a, &|x| x * x),
        Op::Sigmoid(a) => unary(*a, &sigmoid),
        Op::LogSigmoid(a) => unary(*a, &log_sigmoid),
        Op::Dot(a, b) => {
            let (x, y) = (val(*a), val(*b));
            if x.len() != y.len() {
                return Err(shape_error(op, &[x.len(), y.len()]));
            }
            vec![x.iter().zip(y).map(|(p, q)| p * q).sum()]
        }
        Op::Sum(a) => vec![val(*a).iter().sum()],
        Op::Scale(a, c) => unary(*a, &|x| c * x),
        Op::Affine {
            matrix,
            transpose,
            x,
            bias,
        } => {
            let xv = val(*x);
            let (inner, outer) = if *transpose {
                (matrix.rows(), matrix.cols())
            } else {
                (matrix.cols(), matrix.rows())
            };
            if xv.len() != inner {
                return Err(shape_error(op, &[matrix.rows(), matrix.cols(), xv.len()]));
            }
            let mut out = if *transpose { matrix.matvec_t(xv) } else { matrix.matvec(xv) };
            if let Some(b) = bias {
                let bv = val(*b);
                if bv.len() != outer {
                    return Err(shape_error(op, &[outer, bv.len()]));
                }
                for (o, b) in out.iter_mut().zip(bv) {
                    *o += b;
                }
            }
            out
        }
        Op::Clip(a, lo, hi) => unary(*a, &|x| x.clamp(*lo, *hi)),
        Op::CumSum(a) => val(*a)
            .iter()
            .scan(0.0, |acc, x| {
                *acc += x;
                Some(*acc)
            })
            .collect(),
        Op::Index(a, i) => {
            let x = val(*a);
            if *i >= x.len() {
                return Err(shape_error(op, &[x.len(), *i]));
            }
            vec![x[*i]]
        }
        Op::Slice(a, start, len) => {
            let x = val(*a);
            if start + len > x.len() {
                return Err(shape_error(op, &[x.len(), *start, *len]));
            }
            x[*start..start + len].to_vec()
        }
        Op::Select(mask, a, b) => {
            let (x, y) = (val(*a), val(*b));
            if x.len() != mask.len() || y.len() != mask.len() {
                return Err(shape_error(op, &[mask.len(), x.len(), y.len()]));
            }
            mask.iter()
                .enumerate()
                .map(|(i, m)| if *m { x[i] } else { y[i] })
                .collect()
        }
        Op::TrilMatVec(l, x) | Op::TrilSolve(l, x) | Op::TrilSolveT(l, x) => {
            let (lv, xv) = (val(*l), val(*x));
            if tril_dim(lv.len()) != Some(xv.len()) {
                return Err(shape_error(op, &[lv.len(), xv.len()]));
            }
            match op {
                Op::TrilMatVec(..) => (0..xv.len())
                    .map(|i| (0..=i).map(|j| lv[tril_index(i, j)] * xv[j]).sum())
                    .collect(),
                Op::TrilSolve(..) => forward_solve(lv, xv),
                _ => backward_solve(lv, xv),
            }
        }
    })
}

/// Work counters from the most recent reverse sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SweepStats {
    pub nodes_on_tape: usize,
    pub nodes_visited: usize,
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

    /// Records a leaf (input, parameter or constant).
    pub fn var(&self, value: Vec<f64>) -> Result<Var<'_>> {
        if let Some(bad) = value.iter().find(|x| !x.is_finite()) {
            return Err(Error::NumericDomain {
                op: "leaf",
                inputs: format!("{bad}"),
            });
        }
        Ok(self.push_unchecked(Op::Leaf, value))
    }

    pub fn scalar(&self, value: f64) -> Result<Var<'_>> {
        self.var(vec![value])
    }

    fn push_unchecked(&self, op: Op, value: Vec<f64>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let len = value.len();
        nodes.push(Node { op, value });
        Var {
            tape: self,
            id: nodes.len() - 1,
            len,
        }
    }

    /// Evaluates `op` on existing nodes and appends it. Fails on non-finite output.
    pub(crate) fn record(&self, op: Op) -> Result<Var<'_>> {
        let value = {
            let nodes = self.nodes.borrow();
            let value = evaluate(&op, &nodes)?;
            if value.iter().any(|x| !x.is_finite()) {
                let inputs = op
                    .inputs()
                    .iter()
                    .map(|id| summarize(&nodes[*id].value))
                    .collect::<Vec<_>>()
                    .join(", ");
                return Err(Error::NumericDomain { op: op.name(), inputs });
            }
            value
        };
        Ok(self.push_unchecked(op, value))
    }

    /// Recomputes every non-leaf node from the leaves, in tape order.
    pub fn replay(&self) -> Result<Vec<Vec<f64>>> {
        let nodes = self.nodes.borrow();
        let mut fresh: Vec<Node> = Vec::with_capacity(nodes.len());
        for node in nodes.iter() {
            let value = match node.op {
                Op::Leaf => node.value.clone(),
                _ => evaluate(&node.op, &fresh)?,
            };
            fresh.push(Node {
                op: node.op.clone(),
                value,
            });
        }
        Ok(fresh.into_iter().map(|n| n.value).collect())
    }

    /// Checks that every input of every node precedes it.
    pub fn is_topologically_ordered(&self) -> bool {
        self.nodes
            .borrow()
            .iter()
            .enumerate()
            .all(|(id, n)| n.op.inputs().iter().all(|i| *i < id))
    }

    pub fn values(&self) -> Vec<Vec<f64>> {
        self.nodes.borrow().iter().map(|n| n.value.clone()).collect()
    }

    pub fn last_sweep(&self) -> SweepStats {
        SweepStats {
            nodes_on_tape: self.len(),
            nodes_visited: self.last_visits.get(),
        }
    }

    /// Reverse sweep from a scalar `output`, returning `∂output/∂wrt_i` for each `wrt_i`.
    pub fn gradient(&self, output: Var<'_>, wrt: &[Var<'_>]) -> Result<Vec<Vec<f64>>> {
        if output.len != 1 {
            return Err(Error::usage(format!(
                "gradient requires a scalar output, got length {}",
                output.len
            )));
        }
        if let Some(w) = wrt.iter().find(|w| w.id > output.id) {
            return Err(Error::usage(format!(
                "node {} was recorded after the output node {}",
                w.id, output.id
            )));
        }
        let nodes = self.nodes.borrow();
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; output.id + 1];
        adj[output.id] = Some(vec![1.0]);
        let mut visits = 0;
        for id in (0..=output.id).rev() {
            let Some(g) = adj[id].clone() else { continue };
            visits += 1;
            backprop(&nodes, id, &g, &mut adj);
        }
        self.last_visits.set(visits);
        Ok(wrt
            .iter()
            .map(|w| adj[w.id].clone().unwrap_or_else(|| vec![0.0; w.len]))
            .collect())
    }
}

fn summarize(v: &[f64]) -> String {
    if v.len() <= 4 {
        format!("{v:?}")
    } else {
        format!("[{}, {}, .. {} entries]", v[0], v[1], v.len())
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], id: NodeId, len: usize, contrib: impl Fn(usize) -> f64, out_len: usize) {
    let slot = adj[id].get_or_insert_with(|| vec![0.0; len]);
    if len == out_len {
        for (i, s) in slot.iter_mut().enumerate() {
            *s += contrib(i);
        }
    } else {
        // broadcast operand
        slot[0] += (0..out_len).map(contrib).sum::<f64>();
    }
}

fn backprop(nodes: &[Node], id: NodeId, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
    let out = &nodes[id].value;
    let n = out.len();
    let val = |i: NodeId| -> &[f64] { &nodes[i].value };
    let len = |i: NodeId| nodes[i].value.len();
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(adj, *a, len(*a), |i| g[i], n);
            accumulate(adj, *b, len(*b), |i| g[i], n);
        }
        Op::Sub(a, b) => {
            accumulate(adj, *a, len(*a), |i| g[i], n);
            accumulate(adj, *b, len(*b), |i| -g[i], n);
        }
        Op::Mul(a, b) => {
            let (x, y) = (val(*a), val(*b));
            accumulate(adj, *a, len(*a), |i| g[i] * at(y, i), n);
            accumulate(adj, *b, len(*b), |i| g[i] * at(x, i), n);
        }
        Op::Div(a, b) => {
            let (x, y) = (val(*a), val(*b));
            accumulate(adj, *a, len(*a), |i| g[i] / at(y, i), n);
            accumulate(adj, *b, len(*b), |i| -g[i] * at(x, i) / (at(y, i) * at(y, i)), n);
        }
        Op::Neg(a) => accumulate(adj, *a, n, |i| -g[i], n),
        Op::Exp(a) => accumulate(adj, *a, n, |i| g[i] * out[i], n),
        Op::Log(a) => {
            let x = val(*a);
            accumulate(adj, *a, n, |i| g[i] / x[i], n)
        }
        Op::Sqrt(a) => accumulate(adj, *a, n, |i| 0.5 * g[i] / out[i], n),
        Op::Square(a) => {
            let x = val(*a);
            accumulate(adj, *a, n, |i| 2.0 * x[i] * g[i], n)
        }
        Op::Sigmoid(a) => accumulate(adj, *a, n, |i| g[i] * out[i] * (1.0 - out[i]), n),
        Op::LogSigmoid(a) => {
            let x = val(*a);
            accumulate(adj, *a, n, |i| g[i] * sigmoid(-x[i]), n)
        }
        Op::Dot(a, b) => {
            let (x, y) = (val(*a), val(*b));
            let m = x.len();
            accumulate(adj, *a, m, |i| g[0] * y[i], m);
            accumulate(adj, *b, m, |i| g[0] * x[i], m);
        }
        Op::Sum(a) => {
            let m = len(*a);
            accumulate(adj, *a, m, |_| g[0], m);
        }
        Op::Scale(a, c) => accumulate(adj, *a, n, |i| c * g[i], n),
        Op::Affine {
            matrix,
            transpose,
            x,
            bias,
        } => {
            let gx = if *transpose { matrix.matvec(g) } else { matrix.matvec_t(g) };
            let m = gx.len();
            accumulate(adj, *x, m, |i| gx[i], m);
            if let Some(b) = bias {
                accumulate(adj, *b, n, |i| g[i], n);
            }
        }
        Op::Clip(a, lo, hi) => {
            let x = val(*a);
            accumulate(adj, *a, n, |i| if x[i] >= *lo && x[i] <= *hi { g[i] } else { 0.0 }, n)
        }
        Op::CumSum(a) => {
            let mut tail = vec![0.0; n];
            let mut acc = 0.0;
            for i in (0..n).rev() {
                acc += g[i];
                tail[i] = acc;
            }
            accumulate(adj, *a, n, |i| tail[i], n)
        }
        Op::Index(a, k) => {
            let m = len(*a);
            accumulate(adj, *a, m, |i| if i == *k { g[0] } else { 0.0 }, m)
        }
        Op::Slice(a, start, l) => {
            let m = len(*a);
            accumulate(adj, *a, m, |i| if i >= *start && i < start + l { g[i - start] } else { 0.0 }, m)
        }
        Op::Select(mask, a, b) => {
            accumulate(adj, *a, n, |i| if mask[i] { g[i] } else { 0.0 }, n);
            accumulate(adj, *b, n, |i| if mask[i] { 0.0 } else { g[i] }, n);
        }
        Op::TrilMatVec(l, x) => {
            let (lv, xv) = (val(*l), val(*x));
            let m = lv.len();
            let mut gl = vec![0.0; m];
            let mut gx = vec![0.0; n];
            for i in 0..n {
                for j in 0..=i {
                    gl[tril_index(i, j)] = g[i] * xv[j];
                    gx[j] += lv[tril_index(i, j)] * g[i];
                }
            }
            accumulate(adj, *l, m, |k| gl[k], m);
            accumulate(adj, *x, n, |k| gx[k], n);
        }
        Op::TrilSolve(l, b) => {
            // L y = b:  ḡ_b = L⁻ᵀ ḡ,  ḡ_L = -ḡ_b yᵀ (lower part)
            let lv = val(*l);
            let gb = backward_solve(lv, g);
            let m = lv.len();
            let mut gl = vec![0.0; m];
            for i in 0..n {
                for j in 0..=i {
                    gl[tril_index(i, j)] = -gb[i] * out[j];
                }
            }
            accumulate(adj, *l, m, |k| gl[k], m);
            accumulate(adj, *b, n, |k| gb[k], n);
        }
        Op::TrilSolveT(l, b) => {
            // Lᵀ y = b:  ḡ_b = L⁻¹ ḡ,  ḡ_L = -y ḡ_bᵀ (lower part)
            let lv = val(*l);
            let gb = forward_solve(lv, g);
            let m = lv.len();
            let mut gl = vec![0.0; m];
            for i in 0..n {
                for j in 0..=i {
                    gl[tril_index(i, j)] = -out[i] * gb[j];
                }
            }
            accumulate(adj, *l, m, |k| gl[k], m);
            accumulate(adj, *b, n, |k| gb[k], n);
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Vec<f64> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    /// Value of a length-1 variable (first entry otherwise).
    pub fn scalar(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value[0]
    }

    fn same_tape(&self, other: &Var<'_>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::usage("operands live on different tapes"))
        }
    }

    fn binary(&self, other: Var<'t>, op: fn(NodeId, NodeId) -> Op) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        self.tape.record(op(self.id, other.id))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Add)
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Sub)
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Mul)
    }

    pub fn div(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Div)
    }

    pub fn dot(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Dot)
    }

    pub fn neg(&self) -> Result<Var<'t>> {
        self.tape.record(Op::Neg(self.id))
    }

    pub fn exp(&self) -> Result<Var<'t>> {
        self.tape.record(Op::Exp(self.id))
    }

    pub fn ln(&self) -> Result<Var<'t>> {
        self.tape.record(Op::Log(self.id))
    }

    pub fn sqrt(&self) -> Result<Var<'t>> {
        self.tape.record(Op::Sqrt(self.id))
    }

    pub fn square(&self) -> Result<Var<'t>> {
        self.tape.record(Op::Square(self.id))
    }

    pub fn sigmoid(&self) -> Result<Var<'t>> {
        self.tape.record(Op::Sigmoid(self.id))
    }

    pub fn log_sigmoid(&self) -> Result<Var<'t>> {
        self.tape.record(Op::LogSigmoid(self.id))
    }

    pub fn sum(&self) -> Result<Var<'t>> {
        self.tape.record(Op::Sum(self.id))
    }

    pub fn scale(&self, c: f64) -> Result<Var<'t>> {
        self.tape.record(Op::Scale(self.id, c))
    }

    /// `A self + bias`, or `Aᵀ self + bias` when `transpose`.
    pub fn affine(&self, matrix: &Arc<Matrix>, transpose: bool, bias: Option<Var<'t>>) -> Result<Var<'t>> {
        if let Some(b) = &bias {
            self.same_tape(b)?;
        }
        self.tape.record(Op::Affine {
            matrix: Arc::clone(matrix),
            transpose,
            x: self.id,
            bias: bias.map(|b| b.id),
        })
    }

    /// Clamp to `[lo, hi]`; the gradient is zero where the bound is active.
    pub fn clip(&self, lo: f64, hi: f64) -> Result<Var<'t>> {
        self.tape.record(Op::Clip(self.id, lo, hi))
    }

    pub fn cumsum(&self) -> Result<Var<'t>> {
        self.tape.record(Op::CumSum(self.id))
    }

    pub fn index(&self, i: usize) -> Result<Var<'t>> {
        self.tape.record(Op::Index(self.id, i))
    }

    pub fn slice(&self, start: usize, len: usize) -> Result<Var<'t>> {
        self.tape.record(Op::Slice(self.id, start, len))
    }

    /// Elementwise `mask ? self : other`.
    pub fn select(&self, mask: &Arc<Vec<bool>>, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        self.tape.record(Op::Select(Arc::clone(mask), self.id, other.id))
    }

    /// `L x` where `self` holds a packed row-major lower triangle.
    pub fn tril_matvec(&self, x: Var<'t>) -> Result<Var<'t>> {
        self.binary(x, Op::TrilMatVec)
    }

    /// `L⁻¹ b`.
    pub fn tril_solve(&self, b: Var<'t>) -> Result<Var<'t>> {
        self.binary(b, Op::TrilSolve)
    }

    /// `L⁻ᵀ b`.
    pub fn tril_solve_t(&self, b: Var<'t>) -> Result<Var<'t>> {
        self.binary(b, Op::TrilSolveT)
    }
}
