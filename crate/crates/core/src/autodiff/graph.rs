use std::collections::HashMap;
use std::rc::Rc;

use ndarray::{s, Array2, Axis};

use super::{AutodiffError, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Contiguous column range `[start, start + len)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Span {
    pub start: usize,
    pub len: usize,
}

impl Span {
    pub fn new(start: usize, len: usize) -> Self {
        Span { start, len }
    }

    pub fn end(&self) -> usize {
        self.start + self.len
    }
}

/// Result of [`Graph::gradients`] for one requested variable.
#[derive(Clone, Copy, Debug)]
pub struct Gradient {
    pub var: Var,
    /// No path connects the output to the requested variable; `var` is a zero constant.
    pub detached: bool,
}

#[derive(Clone, Debug)]
#[allow(dead_code)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    AddRow(Var, Var),
    SumRows(Var),
    BroadcastRows(Var, usize),
    SumCols(Var),
    BroadcastCols(Var, usize),
    Sum(Var),
    BroadcastScalar(Var, usize, usize),
    Relu(Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    SoftmaxSpans(Var, Rc<[Span]>),
    LogSoftmaxSpans(Var, Rc<[Span]>),
    SpanSum(Var, Rc<[Span]>),
    Slice { a: Var, start: usize, len: usize },
    Pad { a: Var, start: usize, total: usize },
    Concat(Rc<[Var]>),
    Reshape { a: Var, rows: usize, cols: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::AddRow(..) => "add_row",
            Op::SumRows(..) => "sum_rows",
            Op::BroadcastRows(..) => "broadcast_rows",
            Op::SumCols(..) => "sum_cols",
            Op::BroadcastCols(..) => "broadcast_cols",
            Op::Sum(..) => "sum",
            Op::BroadcastScalar(..) => "broadcast_scalar",
            Op::Relu(..) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Tanh(..) => "tanh",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sqrt(..) => "sqrt",
            Op::SoftmaxSpans(..) => "softmax_spans",
            Op::LogSoftmaxSpans(..) => "log_softmax_spans",
            Op::SpanSum(..) => "span_sum",
            Op::Slice { .. } => "slice",
            Op::Pad { .. } => "pad",
            Op::Concat(..) => "concat",
            Op::Reshape { .. } => "reshape",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::AddRow(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::SumRows(a)
            | Op::BroadcastRows(a, _)
            | Op::SumCols(a)
            | Op::BroadcastCols(a, _)
            | Op::Sum(a)
            | Op::BroadcastScalar(a, _, _)
            | Op::Relu(a)
            | Op::LeakyRelu(a, _)
            | Op::Tanh(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sqrt(a)
            | Op::SoftmaxSpans(a, _)
            | Op::LogSoftmaxSpans(a, _)
            | Op::SpanSum(a, _)
            | Op::Slice { a, .. }
            | Op::Pad { a, .. }
            | Op::Reshape { a, .. } => vec![*a],
            Op::Concat(vs) => vs.to_vec(),
        }
    }
}

struct Node {
    op: Op,
    value: Array2<f64>,
}

/// Eager computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    names: HashMap<String, Var>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Any leaf can be differentiated against; constants are
    /// simply leaves that nobody asks a gradient for.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { op: Op::Leaf, value: t.0 });
        Var(self.nodes.len() - 1)
    }

    /// Named leaf, retrievable with [`Graph::lookup`].
    pub fn input(&mut self, name: &str, t: Tensor) -> Var {
        let v = self.leaf(t);
        self.names.insert(name.to_string(), v);
        v
    }

    pub fn lookup(&self, name: &str) -> Result<Var, AutodiffError> {
        self.names
            .get(name)
            .copied()
            .ok_or_else(|| AutodiffError::UnknownName(name.to_string()))
    }

    pub fn value(&self, v: Var) -> Tensor {
        Tensor(self.nodes[v.0].value.clone())
    }

    pub fn value_ref(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    fn push(&mut self, op: Op, value: Array2<f64>) -> Result<Var, AutodiffError> {
        let node = self.nodes.len();
        if !super::tensor::all_finite(&value) {
            return Err(AutodiffError::NonFinite { node, op: op.name() });
        }
        self.nodes.push(Node { op, value });
        Ok(Var(node))
    }

    fn shape_err(&self, op: &'static str, detail: String) -> AutodiffError {
        AutodiffError::Shape { node: self.nodes.len(), op, detail }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(self.shape_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn check_spans(&self, op: &'static str, a: Var, spans: &[Span]) -> Result<(), AutodiffError> {
        let cols = self.shape(a).1;
        if let Some(sp) = spans.iter().find(|sp| sp.end() > cols || sp.len == 0) {
            return Err(self.shape_err(op, format!("span {sp:?} outside width {cols}")));
        }
        Ok(())
    }

    // ---- forward operations ----

    /// `op(a) * op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var, AutodiffError> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let av = if ta { av.t() } else { av.view() };
        let bv = if tb { bv.t() } else { bv.view() };
        if av.ncols() != bv.nrows() {
            let detail = format!("{:?} x {:?}", av.dim(), bv.dim());
            return Err(self.shape_err("matmul", detail));
        }
        let value = av.dot(&bv);
        self.push(Op::MatMul { a, b, ta, tb }, value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.matmul_t(a, b, false, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("add", a, b)?;
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(Op::Add(a, b), value)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("sub", a, b)?;
        let value = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(Op::Sub(a, b), value)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("mul", a, b)?;
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(Op::Mul(a, b), value)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("div", a, b)?;
        let value = &self.nodes[a.0].value / &self.nodes[b.0].value;
        self.push(Op::Div(a, b), value)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, AutodiffError> {
        let value = &self.nodes[a.0].value * c;
        self.push(Op::Scale(a, c), value)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var, AutodiffError> {
        let value = &self.nodes[a.0].value + c;
        self.push(Op::AddScalar(a, c), value)
    }

    /// `a (n x m) + row (1 x m)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, AutodiffError> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr.0 != 1 || sr.1 != sa.1 {
            return Err(self.shape_err("add_row", format!("{sa:?} + {sr:?}")));
        }
        let value = &self.nodes[a.0].value + &self.nodes[row.0].value;
        self.push(Op::AddRow(a, row), value)
    }

    /// Column sums, `n x m -> 1 x m`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let value = self.nodes[a.0].value.sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push(Op::SumRows(a), value)
    }

    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Result<Var, AutodiffError> {
        let sa = self.shape(a);
        if sa.0 != 1 {
            return Err(self.shape_err("broadcast_rows", format!("expected 1 x m, got {sa:?}")));
        }
        let value = self.nodes[a.0]
            .value
            .broadcast((n, sa.1))
            .expect("row broadcast")
            .to_owned();
        self.push(Op::BroadcastRows(a, n), value)
    }

    /// Row sums, `n x m -> n x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let value = self.nodes[a.0].value.sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(Op::SumCols(a), value)
    }

    pub fn broadcast_cols(&mut self, a: Var, m: usize) -> Result<Var, AutodiffError> {
        let sa = self.shape(a);
        if sa.1 != 1 {
            return Err(self.shape_err("broadcast_cols", format!("expected n x 1, got {sa:?}")));
        }
        let value = self.nodes[a.0]
            .value
            .broadcast((sa.0, m))
            .expect("col broadcast")
            .to_owned();
        self.push(Op::BroadcastCols(a, m), value)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let value = Array2::from_elem((1, 1), self.nodes[a.0].value.sum());
        self.push(Op::Sum(a), value)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let n = self.nodes[a.0].value.len().max(1) as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    pub fn broadcast_scalar(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var, AutodiffError> {
        if self.shape(a) != (1, 1) {
            let detail = format!("expected 1 x 1, got {:?}", self.shape(a));
            return Err(self.shape_err("broadcast_scalar", detail));
        }
        let value = Array2::from_elem((rows, cols), self.nodes[a.0].value[[0, 0]]);
        self.push(Op::BroadcastScalar(a, rows, cols), value)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let value = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        self.push(Op::Relu(a), value)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var, AutodiffError> {
        let value = self.nodes[a.0].value.mapv(|x| if x > 0.0 { x } else { slope * x });
        self.push(Op::LeakyRelu(a, slope), value)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let value = self.nodes[a.0].value.mapv(f64::tanh);
        self.push(Op::Tanh(a), value)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let value = self.nodes[a.0].value.mapv(f64::exp);
        self.push(Op::Exp(a), value)
    }

    pub fn log(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let value = self.nodes[a.0].value.mapv(f64::ln);
        self.push(Op::Log(a), value)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let value = self.nodes[a.0].value.mapv(f64::sqrt);
        self.push(Op::Sqrt(a), value)
    }

    pub fn square(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.mul(a, a)
    }

    /// Softmax applied independently on each span of every row; columns
    /// outside all spans are zero.
    pub fn softmax_spans(&mut self, a: Var, spans: Rc<[Span]>) -> Result<Var, AutodiffError> {
        self.check_spans("softmax_spans", a, &spans)?;
        let x = &self.nodes[a.0].value;
        let mut value = Array2::zeros(x.dim());
        for (xr, mut out) in x.rows().into_iter().zip(value.rows_mut()) {
            for sp in spans.iter() {
                let seg = xr.slice(s![sp.start..sp.end()]);
                let max = seg.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                let mut total = 0.0;
                for (j, &v) in seg.iter().enumerate() {
                    let e = (v - max).exp();
                    out[sp.start + j] = e;
                    total += e;
                }
                for j in sp.start..sp.end() {
                    out[j] /= total;
                }
            }
        }
        self.push(Op::SoftmaxSpans(a, spans), value)
    }

    /// Log-softmax on each span; zero outside spans.
    pub fn log_softmax_spans(&mut self, a: Var, spans: Rc<[Span]>) -> Result<Var, AutodiffError> {
        self.check_spans("log_softmax_spans", a, &spans)?;
        let x = &self.nodes[a.0].value;
        let mut value = Array2::zeros(x.dim());
        for (xr, mut out) in x.rows().into_iter().zip(value.rows_mut()) {
            for sp in spans.iter() {
                let seg = xr.slice(s![sp.start..sp.end()]);
                let max = seg.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                let lse = max + seg.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
                for (j, &v) in seg.iter().enumerate() {
                    out[sp.start + j] = v - lse;
                }
            }
        }
        self.push(Op::LogSoftmaxSpans(a, spans), value)
    }

    /// Each entry inside a span becomes the span total; zero outside spans.
    pub fn span_sum(&mut self, a: Var, spans: Rc<[Span]>) -> Result<Var, AutodiffError> {
        self.check_spans("span_sum", a, &spans)?;
        let x = &self.nodes[a.0].value;
        let mut value = Array2::zeros(x.dim());
        for (xr, mut out) in x.rows().into_iter().zip(value.rows_mut()) {
            for sp in spans.iter() {
                let total: f64 = xr.slice(s![sp.start..sp.end()]).sum();
                out.slice_mut(s![sp.start..sp.end()]).fill(total);
            }
        }
        self.push(Op::SpanSum(a, spans), value)
    }

    /// Columns `[start, start + len)`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, AutodiffError> {
        let cols = self.shape(a).1;
        if start + len > cols {
            return Err(self.shape_err("slice", format!("{start}+{len} > {cols}")));
        }
        let value = self.nodes[a.0].value.slice(s![.., start..start + len]).to_owned();
        self.push(Op::Slice { a, start, len }, value)
    }

    /// Embeds `a` at column `start` of a zero matrix `total` columns wide.
    pub fn pad_cols(&mut self, a: Var, start: usize, total: usize) -> Result<Var, AutodiffError> {
        let (rows, cols) = self.shape(a);
        if start + cols > total {
            return Err(self.shape_err("pad", format!("{start}+{cols} > {total}")));
        }
        let mut value = Array2::zeros((rows, total));
        value.slice_mut(s![.., start..start + cols]).assign(&self.nodes[a.0].value);
        self.push(Op::Pad { a, start, total }, value)
    }

    /// Column-wise concatenation.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let Some(first) = parts.first() else {
            return Err(self.shape_err("concat", "no inputs".into()));
        };
        let rows = self.shape(*first).0;
        if let Some(bad) = parts.iter().find(|p| self.shape(**p).0 != rows) {
            let detail = format!("row count {} vs {rows}", self.shape(*bad).0);
            return Err(self.shape_err("concat", detail));
        }
        let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat shapes checked");
        self.push(Op::Concat(parts.into()), value)
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var, AutodiffError> {
        let (r, c) = self.shape(a);
        if r * c != rows * cols {
            return Err(self.shape_err("reshape", format!("{r}x{c} -> {rows}x{cols}")));
        }
        let flat: Vec<f64> = self.nodes[a.0].value.iter().copied().collect();
        let value = Array2::from_shape_vec((rows, cols), flat).expect("reshape size checked");
        self.push(Op::Reshape { a, rows, cols }, value)
    }

    // ---- reverse mode ----

    /// Gradients of the scalar `output` with respect to each of `wrt`.
    ///
    /// The adjoint computation is recorded on this graph, so the returned
    /// variables can be used in further differentiable expressions.
    pub fn gradients(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Gradient>, AutodiffError> {
        let (rows, cols) = self.shape(output);
        if (rows, cols) != (1, 1) {
            return Err(AutodiffError::NonScalarOutput { node: output.0, rows, cols });
        }
        let end = output.0 + 1;
        let mut on_path = vec![false; end];
        for w in wrt {
            if w.0 < end {
                on_path[w.0] = true;
            }
        }
        for i in 0..end {
            if !on_path[i] && self.nodes[i].op.inputs().iter().any(|v| on_path[v.0]) {
                on_path[i] = true;
            }
        }

        let mut grads: Vec<Option<Var>> = vec![None; end];
        if on_path[output.0] {
            grads[output.0] = Some(self.leaf(Tensor::ones(1, 1)));
        }
        for i in (0..end).rev() {
            if !on_path[i] {
                continue;
            }
            let Some(g) = grads[i] else { continue };
            let op = self.nodes[i].op.clone();
            for (input, contrib) in self.vjp(Var(i), &op, g, &on_path)? {
                grads[input.0] = Some(match grads[input.0] {
                    None => contrib,
                    Some(prev) => self.add(prev, contrib)?,
                });
            }
        }

        wrt.iter()
            .map(|w| match grads.get(w.0).copied().flatten() {
                Some(var) => Ok(Gradient { var, detached: false }),
                None => {
                    let (r, c) = self.shape(*w);
                    Ok(Gradient { var: self.leaf(Tensor::zeros(r, c)), detached: true })
                }
            })
            .collect()
    }

    /// Vector-Jacobian products of node `y` for every on-path input.
    fn vjp(&mut self, y: Var, op: &Op, g: Var, on_path: &[bool]) -> Result<Vec<(Var, Var)>, AutodiffError> {
        let want = |v: &Var| on_path[v.0];
        let mut out = Vec::new();
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (a, b, ta, tb) = (*a, *b, *ta, *tb);
                if want(&a) {
                    let da = if ta {
                        self.matmul_t(b, g, tb, true)?
                    } else {
                        self.matmul_t(g, b, false, !tb)?
                    };
                    out.push((a, da));
                }
                if want(&b) {
                    let db = if tb {
                        self.matmul_t(g, a, true, ta)?
                    } else {
                        self.matmul_t(a, g, !ta, false)?
                    };
                    out.push((b, db));
                }
            }
            Op::Add(a, b) => {
                if want(a) {
                    out.push((*a, g));
                }
                if want(b) {
                    out.push((*b, g));
                }
            }
            Op::Sub(a, b) => {
                if want(a) {
                    out.push((*a, g));
                }
                if want(b) {
                    out.push((*b, self.neg(g)?));
                }
            }
            Op::Mul(a, b) => {
                if want(a) {
                    out.push((*a, self.mul(g, *b)?));
                }
                if want(b) {
                    out.push((*b, self.mul(g, *a)?));
                }
            }
            Op::Div(a, b) => {
                if want(a) {
                    out.push((*a, self.div(g, *b)?));
                }
                if want(b) {
                    let gy = self.mul(g, y)?;
                    let q = self.div(gy, *b)?;
                    out.push((*b, self.neg(q)?));
                }
            }
            Op::Scale(a, c) => {
                if want(a) {
                    out.push((*a, self.scale(g, *c)?));
                }
            }
            Op::AddScalar(a, _) => {
                if want(a) {
                    out.push((*a, g));
                }
            }
            Op::AddRow(a, row) => {
                if want(a) {
                    out.push((*a, g));
                }
                if want(row) {
                    out.push((*row, self.sum_rows(g)?));
                }
            }
            Op::SumRows(a) => {
                if want(a) {
                    let n = self.shape(*a).0;
                    out.push((*a, self.broadcast_rows(g, n)?));
                }
            }
            Op::BroadcastRows(a, _) => {
                if want(a) {
                    out.push((*a, self.sum_rows(g)?));
                }
            }
            Op::SumCols(a) => {
                if want(a) {
                    let m = self.shape(*a).1;
                    out.push((*a, self.broadcast_cols(g, m)?));
                }
            }
            Op::BroadcastCols(a, _) => {
                if want(a) {
                    out.push((*a, self.sum_cols(g)?));
                }
            }
            Op::Sum(a) => {
                if want(a) {
                    let (r, c) = self.shape(*a);
                    out.push((*a, self.broadcast_scalar(g, r, c)?));
                }
            }
            Op::BroadcastScalar(a, _, _) => {
                if want(a) {
                    out.push((*a, self.sum(g)?));
                }
            }
            Op::Relu(a) => {
                if want(a) {
                    let mask = self.nodes[a.0].value.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    let m = self.leaf(Tensor(mask));
                    out.push((*a, self.mul(g, m)?));
                }
            }
            Op::LeakyRelu(a, slope) => {
                if want(a) {
                    let slope = *slope;
                    let mask = self.nodes[a.0].value.mapv(|x| if x > 0.0 { 1.0 } else { slope });
                    let m = self.leaf(Tensor(mask));
                    out.push((*a, self.mul(g, m)?));
                }
            }
            Op::Tanh(a) => {
                if want(a) {
                    let yy = self.mul(y, y)?;
                    let neg = self.neg(yy)?;
                    let d = self.add_scalar(neg, 1.0)?;
                    out.push((*a, self.mul(g, d)?));
                }
            }
            Op::Exp(a) => {
                if want(a) {
                    out.push((*a, self.mul(g, y)?));
                }
            }
            Op::Log(a) => {
                if want(a) {
                    out.push((*a, self.div(g, *a)?));
                }
            }
            Op::Sqrt(a) => {
                if want(a) {
                    let half = self.scale(g, 0.5)?;
                    out.push((*a, self.div(half, y)?));
                }
            }
            Op::SoftmaxSpans(a, spans) => {
                if want(a) {
                    let gy = self.mul(g, y)?;
                    let s = self.span_sum(gy, spans.clone())?;
                    let diff = self.sub(g, s)?;
                    out.push((*a, self.mul(y, diff)?));
                }
            }
            Op::LogSoftmaxSpans(a, spans) => {
                if want(a) {
                    let (r, c) = self.shape(*a);
                    let mut mask = Array2::zeros((r, c));
                    for sp in spans.iter() {
                        mask.slice_mut(s![.., sp.start..sp.end()]).fill(1.0);
                    }
                    let mask = self.leaf(Tensor(mask));
                    let inside = self.mul(g, mask)?;
                    let p = self.softmax_spans(*a, spans.clone())?;
                    let gs = self.span_sum(g, spans.clone())?;
                    let pg = self.mul(p, gs)?;
                    out.push((*a, self.sub(inside, pg)?));
                }
            }
            Op::SpanSum(a, spans) => {
                if want(a) {
                    out.push((*a, self.span_sum(g, spans.clone())?));
                }
            }
            Op::Slice { a, start, .. } => {
                if want(a) {
                    let total = self.shape(*a).1;
                    out.push((*a, self.pad_cols(g, *start, total)?));
                }
            }
            Op::Pad { a, start, .. } => {
                if want(a) {
                    let len = self.shape(*a).1;
                    out.push((*a, self.slice_cols(g, *start, len)?));
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts.iter() {
                    let w = self.shape(*p).1;
                    if want(p) {
                        out.push((*p, self.slice_cols(g, offset, w)?));
                    }
                    offset += w;
                }
            }
            Op::Reshape { a, .. } => {
                if want(a) {
                    let (r, c) = self.shape(*a);
                    out.push((*a, self.reshape(g, r, c)?));
                }
            }
        }
        Ok(out)
    }
}
