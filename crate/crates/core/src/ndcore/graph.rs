use super::tensor::{gemm, Tensor};
use super::TensorError;

type Result<T> = std::result::Result<T, TensorError>;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Const,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Exp(Var),
    Atan(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sqrt(Var),
    Abs(Var),
    Square(Var),
    Recip(Var),
    SumAll(Var),
    SumTo(Var),
    BroadcastTo(Var),
    Concat(Vec<Var>),
    GatherCols(Var, Vec<usize>),
    ScatterCols(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>),
    Reshape(Var),
    StopGrad,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Const => "const",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul { .. } => "matmul",
            Op::Exp(..) => "exp",
            Op::Atan(..) => "arctan",
            Op::Relu(..) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Sqrt(..) => "sqrt",
            Op::Abs(..) => "abs",
            Op::Square(..) => "square",
            Op::Recip(..) => "recip",
            Op::SumAll(..) => "sum",
            Op::SumTo(..) => "sum_to",
            Op::BroadcastTo(..) => "broadcast_to",
            Op::Concat(..) => "concat",
            Op::GatherCols(..) => "gather_cols",
            Op::ScatterCols(..) => "scatter_cols",
            Op::GatherRows(..) => "gather_rows",
            Op::ScatterRows(..) => "scatter_rows",
            Op::Reshape(..) => "reshape",
            Op::StopGrad => "stop_grad",
        }
    }

    /// Ops whose backward rule is itself recorded with exact derivatives.
    /// This is the subset the critic and its input-gradient norm are built from.
    fn second_order(&self) -> bool {
        !matches!(
            self,
            Op::Exp(..) | Op::Atan(..) | Op::Abs(..) | Op::Div(..) | Op::GatherRows(..) | Op::ScatterRows(..)
        )
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Tape of tensor operations.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and the backward pass is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    no_grad: bool,
}

/// Leaf gradients produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of a leaf; zeros if the output does not depend on it.
    pub fn get(&self, v: Var) -> Tensor {
        match self.grads.get(v.0) {
            Some(Some(t)) => t.clone(),
            _ => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        match self.grads.get_mut(v.0).and_then(Option::take) {
            Some(t) => t,
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

fn broadcast_dims(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape() == b.shape() {
        return Ok(a.shape().to_vec());
    }
    let (ar, ac) = a.dims2();
    let (br, bc) = b.dims2();
    let pick = |x: usize, y: usize| -> Option<usize> {
        if x == y || y == 1 {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else {
            None
        }
    };
    match (pick(ar, br), pick(ac, bc)) {
        (Some(r), Some(c)) => {
            if a.len() == 1 && b.shape().len() < 2 {
                Ok(b.shape().to_vec())
            } else if b.len() == 1 && a.shape().len() < 2 {
                Ok(a.shape().to_vec())
            } else {
                Ok(vec![r, c])
            }
        }
        _ => Err(TensorError::Shape { op, detail: format!("cannot broadcast {:?} with {:?}", a.shape(), b.shape()) }),
    }
}

fn binary_map(a: &Tensor, b: &Tensor, shape: Vec<usize>, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(shape, data).expect("same shape");
    }
    let (ar, ac) = a.dims2();
    let (br, bc) = b.dims2();
    let rows = ar.max(br);
    let cols = ac.max(bc);
    let mut data = Vec::with_capacity(rows * cols);
    let (ad, bd) = (a.data(), b.data());
    for r in 0..rows {
        let ra = if ar == 1 { 0 } else { r };
        let rb = if br == 1 { 0 } else { r };
        for c in 0..cols {
            let x = ad[ra * ac + if ac == 1 { 0 } else { c }];
            let y = bd[rb * bc + if bc == 1 { 0 } else { c }];
            data.push(f(x, y));
        }
    }
    Tensor::new(shape, data).expect("broadcast shape")
}

/// Sum `t` down to `shape` along broadcast (size-1) dimensions.
fn reduce_to(t: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if t.shape() == shape {
        return Ok(t.clone());
    }
    let (r, c) = t.dims2();
    let target = Tensor::zeros(shape);
    let (tr, tc) = target.dims2();
    if (tr != r && tr != 1) || (tc != c && tc != 1) {
        return Err(TensorError::Shape { op: "sum_to", detail: format!("{:?} -> {:?}", t.shape(), shape) });
    }
    let mut out = vec![0.0; tr * tc];
    let d = t.data();
    for i in 0..r {
        let oi = if tr == 1 { 0 } else { i };
        for j in 0..c {
            let oj = if tc == 1 { 0 } else { j };
            out[oi * tc + oj] += d[i * c + j];
        }
    }
    Tensor::new(shape.to_vec(), out)
}

fn broadcast_to(t: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if t.shape() == shape {
        return Ok(t.clone());
    }
    let (r, c) = t.dims2();
    let target = Tensor::zeros(shape);
    let (tr, tc) = target.dims2();
    if (r != tr && r != 1) || (c != tc && c != 1) {
        return Err(TensorError::Shape { op: "broadcast_to", detail: format!("{:?} -> {:?}", t.shape(), shape) });
    }
    let d = t.data();
    let mut out = Vec::with_capacity(tr * tc);
    for i in 0..tr {
        let si = if r == 1 { 0 } else { i };
        for j in 0..tc {
            let sj = if c == 1 { 0 } else { j };
            out.push(d[si * c + sj]);
        }
    }
    Tensor::new(shape.to_vec(), out)
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { op: Op::Leaf, value: t, requires_grad: !self.no_grad });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { op: Op::Const, value: t, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    fn push(&mut self, op: Op, value: Tensor, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: op.name(), node: self.nodes.len() });
        }
        let requires_grad =
            !self.no_grad && !matches!(op, Op::StopGrad) && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { op, value, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let value = self.value(x).map(f);
        self.push(op, value, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast_dims("add", ta, tb)?;
        let value = binary_map(ta, tb, shape, |x, y| x + y);
        self.push(Op::Add(a, b), value, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast_dims("sub", ta, tb)?;
        let value = binary_map(ta, tb, shape, |x, y| x - y);
        self.push(Op::Sub(a, b), value, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast_dims("mul", ta, tb)?;
        let value = binary_map(ta, tb, shape, |x, y| x * y);
        self.push(Op::Mul(a, b), value, &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast_dims("div", ta, tb)?;
        let value = binary_map(ta, tb, shape, |x, y| x / y);
        self.push(Op::Div(a, b), value, &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) * op(b)` with optional transposes, without materializing them.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let value = gemm(self.value(a), ta, self.value(b), tb)?;
        self.push(Op::MatMul { a, b, ta, tb }, value, &[a, b])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn atan(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Atan(x), f64::atan)
    }

    /// `max(x, 0)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Relu(x), |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn max0(&mut self, x: Var) -> Result<Var> {
        self.relu(x)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.unary(x, Op::LeakyRelu(x, slope), |v| if v > 0.0 { v } else { slope * v })
    }

    /// Square root. Its derivative at 0 is taken to be 0.
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v < 0.0) {
            return Err(TensorError::NonFinite { op: "sqrt", node: self.nodes.len() });
        }
        self.unary(x, Op::Sqrt(x), f64::sqrt)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Abs(x), f64::abs)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    /// `1/x`, with `1/0` defined as 0.
    pub fn recip(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Recip(x), |v| if v == 0.0 { 0.0 } else { 1.0 / v })
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Op::SumAll(x), Tensor::scalar(s), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(TensorError::Invalid { op: "mean", detail: "empty tensor".into() });
        }
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Reduce along broadcast dimensions, e.g. `[n, m] -> [n, 1]` (row sums)
    /// or `[n, m] -> [1, m]` (column sums).
    pub fn sum_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = reduce_to(self.value(x), shape)?;
        self.push(Op::SumTo(x), value, &[x])
    }

    pub fn row_sums(&mut self, x: Var) -> Result<Var> {
        let (r, _) = self.value(x).dims2();
        self.sum_to(x, &[r, 1])
    }

    pub fn col_sums(&mut self, x: Var) -> Result<Var> {
        let (_, c) = self.value(x).dims2();
        self.sum_to(x, &[1, c])
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = broadcast_to(self.value(x), shape)?;
        self.push(Op::BroadcastTo(x), value, &[x])
    }

    /// Concatenate matrices with equal row counts along columns.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::Invalid { op: "concat", detail: "no inputs".into() });
        }
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2();
            if r != rows {
                return Err(TensorError::Shape { op: "concat", detail: format!("row count {r} vs {rows}") });
            }
            cols += c;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let value = Tensor::matrix(rows, cols, data)?;
        self.push(Op::Concat(parts.to_vec()), value, parts)
    }

    /// Columns `[start, start + len)`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let c = self.value(x).cols();
        if start + len > c {
            return Err(TensorError::Shape { op: "slice_cols", detail: format!("{start}+{len} > {c}") });
        }
        self.gather_cols(x, &(start..start + len).collect::<Vec<_>>())
    }

    /// Split columns at `at`.
    pub fn split(&mut self, x: Var, at: usize) -> Result<(Var, Var)> {
        let c = self.value(x).cols();
        if at > c {
            return Err(TensorError::Shape { op: "split", detail: format!("split at {at} of {c} columns") });
        }
        Ok((self.slice_cols(x, 0, at)?, self.slice_cols(x, at, c - at)?))
    }

    /// `out[:, j] = x[:, idx[j]]`.
    pub fn gather_cols(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = t.dims2();
        if let Some(&bad) = idx.iter().find(|&&i| i >= cols) {
            return Err(TensorError::Shape { op: "gather_cols", detail: format!("index {bad} >= {cols}") });
        }
        let mut data = Vec::with_capacity(rows * idx.len());
        for r in 0..rows {
            let row = t.row_slice(r);
            data.extend(idx.iter().map(|&i| row[i]));
        }
        let value = Tensor::matrix(rows, idx.len(), data)?;
        self.push(Op::GatherCols(x, idx.to_vec()), value, &[x])
    }

    /// Adjoint of [`Graph::gather_cols`]: `out[:, idx[j]] += x[:, j]` into `cols` columns.
    pub fn scatter_cols(&mut self, x: Var, idx: &[usize], cols: usize) -> Result<Var> {
        let t = self.value(x);
        let (rows, c) = t.dims2();
        if c != idx.len() || idx.iter().any(|&i| i >= cols) {
            return Err(TensorError::Shape { op: "scatter_cols", detail: format!("{c} columns, {} indices", idx.len()) });
        }
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = t.row_slice(r);
            for (j, &i) in idx.iter().enumerate() {
                data[r * cols + i] += row[j];
            }
        }
        let value = Tensor::matrix(rows, cols, data)?;
        self.push(Op::ScatterCols(x, idx.to_vec()), value, &[x])
    }

    /// `out[i, :] = x[idx[i], :]`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = t.dims2();
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Shape { op: "gather_rows", detail: format!("index {bad} >= {rows}") });
        }
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(t.row_slice(i));
        }
        let value = Tensor::matrix(idx.len(), cols, data)?;
        self.push(Op::GatherRows(x, idx.to_vec()), value, &[x])
    }

    pub fn scatter_rows(&mut self, x: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, cols) = t.dims2();
        if r != idx.len() || idx.iter().any(|&i| i >= rows) {
            return Err(TensorError::Shape { op: "scatter_rows", detail: format!("{r} rows, {} indices", idx.len()) });
        }
        let mut data = vec![0.0; rows * cols];
        for (j, &i) in idx.iter().enumerate() {
            for (o, v) in data[i * cols..(i + 1) * cols].iter_mut().zip(t.row_slice(j)) {
                *o += v;
            }
        }
        let value = Tensor::matrix(rows, cols, data)?;
        self.push(Op::ScatterRows(x, idx.to_vec()), value, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push(Op::Reshape(x), value, &[x])
    }

    /// Identity in the forward pass; blocks all gradient flow to `x`.
    pub fn stop_grad(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).clone();
        self.push(Op::StopGrad, value, &[x])
    }

    /// `sum(|x|)`.
    pub fn l1_norm(&mut self, x: Var) -> Result<Var> {
        let a = self.abs(x)?;
        self.sum(a)
    }

    /// `sum(x²)`.
    pub fn l2_norm_sq(&mut self, x: Var) -> Result<Var> {
        let s = self.square(x)?;
        self.sum(s)
    }

    /// Gradients of the scalar `out` with respect to every leaf.
    pub fn backward(&mut self, out: Var) -> Result<Gradients> {
        let n_before = self.nodes.len();
        let adj = self.adjoints(out, false)?;
        let mut grads: Vec<Option<Tensor>> = vec![None; n_before];
        let mut shapes = Vec::with_capacity(n_before);
        for (i, node) in self.nodes[..n_before].iter().enumerate() {
            shapes.push(node.value.shape().to_vec());
            if matches!(node.op, Op::Leaf) {
                if let Some(a) = adj[i] {
                    grads[i] = Some(self.nodes[a.0].value.clone());
                }
            }
        }
        // Drop the backward nodes; they are not needed once values are read.
        self.nodes.truncate(n_before);
        Ok(Gradients { grads, shapes })
    }

    /// Differentiable gradients of `out` with respect to `wrt`.
    ///
    /// The backward pass is recorded on this graph, so the returned nodes can
    /// be used in further computations and differentiated again. Only the
    /// op subset used by the pose critic supports this.
    pub fn grad(&mut self, out: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        let adj = self.adjoints(out, true)?;
        let mut result = Vec::with_capacity(wrt.len());
        for &w in wrt {
            let v = match adj.get(w.0).copied().flatten() {
                Some(a) => a,
                None => {
                    let shape = self.value(w).shape().to_vec();
                    self.constant(Tensor::zeros(&shape))
                }
            };
            result.push(v);
        }
        Ok(result)
    }

    /// Second derivative: gradient with respect to `wrt` of the (summed)
    /// first derivative of `out` with respect to `wrt`.
    pub fn grad_of_grad(&mut self, out: Var, wrt: Var) -> Result<Var> {
        let first = self.grad(out, &[wrt])?[0];
        let s = self.sum(first)?;
        Ok(self.grad(s, &[wrt])?[0])
    }

    fn accumulate(&mut self, adj: &mut [Option<Var>], target: Var, contrib: Var) -> Result<()> {
        if !self.nodes[target.0].requires_grad {
            return Ok(());
        }
        adj[target.0] = Some(match adj[target.0] {
            Some(prev) => self.add(prev, contrib)?,
            None => contrib,
        });
        Ok(())
    }

    /// Reduce an adjoint back to an input's shape after broadcasting.
    fn unbroadcast(&mut self, g: Var, like: Var) -> Result<Var> {
        if self.value(g).shape() == self.value(like).shape() {
            return Ok(g);
        }
        let shape = self.value(like).shape().to_vec();
        self.sum_to(g, &shape)
    }

    fn adjoints(&mut self, out: Var, create_graph: bool) -> Result<Vec<Option<Var>>> {
        let out_shape = self.value(out).shape().to_vec();
        if self.value(out).len() != 1 {
            return Err(TensorError::NonScalarOutput(out_shape));
        }
        let n = out.0 + 1;
        let mut adj: Vec<Option<Var>> = vec![None; self.nodes.len()];
        let saved = self.no_grad;
        self.no_grad = !create_graph;
        let seed = self.constant(Tensor::full(&out_shape, 1.0));
        adj.push(None);
        adj[out.0] = Some(seed);

        let result = (|| {
            for i in (0..n).rev() {
                let Some(g) = adj[i] else { continue };
                if !self.nodes[i].requires_grad {
                    continue;
                }
                let op = self.nodes[i].op.clone();
                if create_graph && !op.second_order() {
                    return Err(TensorError::UnsupportedSecondOrder(op.name()));
                }
                self.vjp(&op, Var(i), g, &mut adj)?;
            }
            Ok(())
        })();
        self.no_grad = saved;
        result?;
        Ok(adj)
    }

    fn vjp(&mut self, op: &Op, out: Var, g: Var, adj: &mut Vec<Option<Var>>) -> Result<()> {
        // Nodes created here extend the tape; keep the adjoint table in step.
        macro_rules! acc {
            ($target:expr, $contrib:expr) => {{
                let c = $contrib;
                if adj.len() < self.nodes.len() {
                    adj.resize(self.nodes.len(), None);
                }
                self.accumulate(adj, $target, c)?;
            }};
        }
        match *op {
            Op::Leaf | Op::Const | Op::StopGrad => {}
            Op::Add(a, b) => {
                if self.requires_grad(a) {
                    acc!(a, self.unbroadcast(g, a)?);
                }
                if self.requires_grad(b) {
                    acc!(b, self.unbroadcast(g, b)?);
                }
            }
            Op::Sub(a, b) => {
                if self.requires_grad(a) {
                    acc!(a, self.unbroadcast(g, a)?);
                }
                if self.requires_grad(b) {
                    let ng = self.neg(g)?;
                    acc!(b, self.unbroadcast(ng, b)?);
                }
            }
            Op::Mul(a, b) => {
                if self.requires_grad(a) {
                    let t = self.mul(g, b)?;
                    acc!(a, self.unbroadcast(t, a)?);
                }
                if self.requires_grad(b) {
                    let t = self.mul(g, a)?;
                    acc!(b, self.unbroadcast(t, b)?);
                }
            }
            Op::Div(a, b) => {
                if self.requires_grad(a) {
                    let t = self.div(g, b)?;
                    acc!(a, self.unbroadcast(t, a)?);
                }
                if self.requires_grad(b) {
                    let t = self.mul(g, out)?;
                    let t = self.div(t, b)?;
                    let t = self.neg(t)?;
                    acc!(b, self.unbroadcast(t, b)?);
                }
            }
            Op::Scale(x, c) => acc!(x, self.scale(g, c)?),
            Op::AddScalar(x) => acc!(x, g),
            Op::MatMul { a, b, ta, tb } => {
                if self.requires_grad(a) {
                    let ga = if ta { self.matmul_t(b, tb, g, true)? } else { self.matmul_t(g, false, b, !tb)? };
                    acc!(a, ga);
                }
                if self.requires_grad(b) {
                    let gb = if tb { self.matmul_t(g, true, a, ta)? } else { self.matmul_t(a, !ta, g, false)? };
                    acc!(b, gb);
                }
            }
            Op::Exp(x) => acc!(x, self.mul(g, out)?),
            Op::Atan(x) => {
                let sq = self.square(x)?;
                let den = self.add_scalar(sq, 1.0)?;
                let r = self.recip(den)?;
                acc!(x, self.mul(g, r)?)
            }
            Op::Relu(x) => {
                let mask = self.value(x).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                let m = self.constant(mask);
                acc!(x, self.mul(g, m)?)
            }
            Op::LeakyRelu(x, slope) => {
                let mask = self.value(x).map(|v| if v > 0.0 { 1.0 } else { slope });
                let m = self.constant(mask);
                acc!(x, self.mul(g, m)?)
            }
            Op::Sqrt(x) => {
                let r = self.recip(out)?;
                let h = self.scale(r, 0.5)?;
                acc!(x, self.mul(g, h)?)
            }
            Op::Abs(x) => {
                let sign = self.value(x).map(|v| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 });
                let s = self.constant(sign);
                acc!(x, self.mul(g, s)?)
            }
            Op::Square(x) => {
                let t = self.mul(g, x)?;
                acc!(x, self.scale(t, 2.0)?)
            }
            Op::Recip(x) => {
                let sq = self.square(out)?;
                let t = self.mul(g, sq)?;
                acc!(x, self.neg(t)?)
            }
            Op::SumAll(x) => {
                let shape = self.value(x).shape().to_vec();
                let g2 = if self.value(g).shape().is_empty() { g } else { self.reshape(g, &[])? };
                acc!(x, self.broadcast_to(g2, &shape)?)
            }
            Op::SumTo(x) => {
                let shape = self.value(x).shape().to_vec();
                acc!(x, self.broadcast_to(g, &shape)?)
            }
            Op::BroadcastTo(x) => {
                let shape = self.value(x).shape().to_vec();
                acc!(x, self.sum_to(g, &shape)?)
            }
            Op::Concat(ref parts) => {
                let mut start = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if self.requires_grad(p) {
                        acc!(p, self.slice_cols(g, start, c)?);
                    }
                    start += c;
                }
            }
            Op::GatherCols(x, ref idx) => {
                let cols = self.value(x).cols();
                let t = self.scatter_cols(g, idx, cols)?;
                let shape = self.value(x).shape().to_vec();
                let t = if self.value(t).shape() == shape.as_slice() { t } else { self.reshape(t, &shape)? };
                acc!(x, t)
            }
            Op::ScatterCols(x, ref idx) => acc!(x, self.gather_cols(g, idx)?),
            Op::GatherRows(x, ref idx) => {
                let rows = self.value(x).rows();
                acc!(x, self.scatter_rows(g, idx, rows)?)
            }
            Op::ScatterRows(x, ref idx) => acc!(x, self.gather_rows(g, idx)?),
            Op::Reshape(x) => {
                let shape = self.value(x).shape().to_vec();
                acc!(x, self.reshape(g, &shape)?)
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_grad_at_three() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        assert_eq!(g.backward(y).unwrap().get(x).item(), 6.0);
    }

    #[test]
    fn relu_negative_and_zero_have_zero_grad() {
        let mut g = Graph::new();
        let x = g.param(Tensor::row(vec![-1.0, 0.0, 2.0]));
        let r = g.relu(x).unwrap();
        let s = g.sum(r).unwrap();
        assert_eq!(g.backward(s).unwrap().get(x).data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::eye(3));
        let v = g.constant(Tensor::matrix(3, 1, vec![1.5, -2.0, 7.0]).unwrap());
        let out = g.matmul(i, v).unwrap();
        assert_eq!(g.value(out).data(), &[1.5, -2.0, 7.0]);
    }

    #[test]
    fn exp_atan_at_zero() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::scalar(0.0));
        let e = g.exp(z).unwrap();
        let a = g.atan(z).unwrap();
        assert_eq!(g.value(e).item(), 1.0);
        assert_eq!(g.value(a).item(), 0.0);
    }

    #[test]
    fn split_concat_partition() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(2, 2, vec![1., 2., 3., 4.]).unwrap());
        let b = g.constant(Tensor::matrix(2, 3, vec![5., 6., 7., 8., 9., 10.]).unwrap());
        let c = g.concat(&[a, b]).unwrap();
        let (p, q) = g.split(c, 2).unwrap();
        let total = g.value(p).sum() + g.value(q).sum();
        assert_eq!(total, g.value(a).sum() + g.value(b).sum());
        assert_eq!(g.value(p), g.value(a));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::row(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarOutput(_))));
    }

    #[test]
    fn shape_mismatch_is_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(g.add(a, b), Err(TensorError::Shape { .. })));
        let c = g.constant(Tensor::zeros(&[2, 2]));
        assert!(g.matmul(a, c).is_err());
    }

    #[test]
    fn non_finite_names_the_op() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(1000.0));
        match g.exp(x) {
            Err(TensorError::NonFinite { op, .. }) => assert_eq!(op, "exp"),
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn unused_leaf_gets_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let unused = g.param(Tensor::row(vec![1.0, 1.0]));
        let y = g.square(x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(unused).data(), &[0.0, 0.0]);
    }

    #[test]
    fn stop_grad_blocks() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let s = g.stop_grad(x).unwrap();
        let y = g.mul(s, x).unwrap();
        // d/dx (sg(x) * x) = sg(x) = 2, not 2x = 4.
        assert_eq!(g.backward(y).unwrap().get(x).item(), 2.0);
        let z = g.square(s).unwrap();
        assert_eq!(g.backward(z).unwrap().get(x).item(), 0.0);
    }

    #[test]
    fn cube_second_derivative() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let x2 = g.mul(x, x).unwrap();
        let x3 = g.mul(x2, x).unwrap();
        let d2 = g.grad_of_grad(x3, x).unwrap();
        assert_eq!(g.value(d2).item(), 12.0);
    }

    #[test]
    fn linear_second_derivative_is_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::row(vec![0.3, -1.2]));
        let w = g.constant(Tensor::matrix(2, 1, vec![2.0, -3.0]).unwrap());
        let y = g.matmul(x, w).unwrap();
        let y = g.add_scalar(y, 4.0).unwrap();
        let d2 = g.grad_of_grad(y, x).unwrap();
        assert!(g.value(d2).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn second_order_rejects_exp() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(0.5));
        let y = g.exp(x).unwrap();
        assert!(matches!(g.grad(y, &[x]), Err(TensorError::UnsupportedSecondOrder("exp"))));
        // First order is still fine.
        assert!((g.backward(y).unwrap().get(x).item() - 0.5f64.exp()).abs() < 1e-15);
    }

    #[test]
    fn broadcast_bias_grad_sums_rows() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(3, 2, vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let b = g.param(Tensor::row(vec![0.5, -0.5]));
        let y = g.add(x, b).unwrap();
        let s = g.sum(y).unwrap();
        assert_eq!(g.backward(s).unwrap().get(b).data(), &[3.0, 3.0]);
    }
}
