use super::tensor::{Gradients, ParamId, Params, Tensor};
use super::Real;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Input,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddConst(Var),
    Scale(Var, T),
    MatMul(Var, Var),
    Transpose(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    SoftmaxRows(Var),
    LayerNormRows(Var, T),
    L2NormalizeRows(Var, T),
    SliceRows(Var, usize),
    VStack(Vec<Var>),
    HCat(Vec<Var>),
    Gather(Var, Vec<usize>),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::AddConst(..) => "add_const",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Exp(..) => "exp",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumRows(..) => "sum_rows",
            Op::SoftmaxRows(..) => "softmax",
            Op::LayerNormRows(..) => "layer_norm",
            Op::L2NormalizeRows(..) => "l2_normalize",
            Op::SliceRows(..) => "slice_rows",
            Op::VStack(..) => "vstack",
            Op::HCat(..) => "hcat",
            Op::Gather(..) => "gather",
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T> {
    rows: usize,
    cols: usize,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Operation-recording graph over matrices.
///
/// Nodes are appended in evaluation order, so the reverse of insertion order
/// is a valid topological order for backward. A tape is single-threaded; the
/// borrowed [`Params`] may be shared by many tapes at once.
pub struct Tape<'p, T> {
    params: &'p Params<T>,
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new(params: &'p Params<T>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p Params<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn rows(&self, v: Var) -> usize {
        self.nodes[v.0].rows
    }

    pub fn cols(&self, v: Var) -> usize {
        self.nodes[v.0].cols
    }

    /// Value of a `1x1` node.
    pub fn scalar(&self, v: Var) -> Result<T> {
        match self.shape(v) {
            (1, 1) => Ok(self.nodes[v.0].value[0]),
            s => Err(Error::dim(format!("expected a scalar, got {}x{}", s.0, s.1))),
        }
    }

    /// Row `i` of a node's value.
    pub fn row_values(&self, v: Var, i: usize) -> &[T] {
        let n = &self.nodes[v.0];
        &n.value[i * n.cols..(i + 1) * n.cols]
    }

    /// Index and operation name of the first node holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .iter()
            .position(|n| n.value.iter().any(|x| !x.is_finite()))
            .map(|i| (i, self.nodes[i].op.name()))
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn dims_str(&self, v: Var) -> String {
        let (r, c) = self.shape(v);
        format!("{r}x{c}")
    }

    /// Records a constant; no gradient flows into it.
    pub fn input(&mut self, rows: usize, cols: usize, data: Vec<T>) -> Result<Var> {
        if rows == 0 || cols == 0 || rows * cols != data.len() {
            return Err(Error::dim(format!("input {rows}x{cols} with {} values", data.len())));
        }
        Ok(self.push(rows, cols, data, Op::Input, false))
    }

    pub fn row(&mut self, data: &[T]) -> Result<Var> {
        self.input(1, data.len(), data.to_vec())
    }

    pub fn constant(&mut self, t: &Tensor<T>) -> Result<Var> {
        let (r, c) = t.matrix_dims()?;
        self.input(r, c, t.data().to_vec())
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Result<Var> {
        self.input(rows, cols, vec![T::zero(); rows * cols])
    }

    /// Leaf for a parameter tensor; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(v) = self.param_vars.get(id.0).copied().flatten() {
            return Ok(v);
        }
        let params = self.params;
        let t = params.get(id);
        let (r, c) = t.matrix_dims()?;
        let v = self.push(r, c, t.data().to_vec(), Op::Param(id), t.requires_grad());
        self.param_vars[id.0] = Some(v);
        Ok(v)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{what}: shapes {} and {} differ",
                self.dims_str(a),
                self.dims_str(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(a, b, op.name())?;
        let (r, c) = self.shape(a);
        let value = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(r, c, value, op, ng))
    }

    fn map(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let (r, c) = self.shape(a);
        let value = self.nodes[a.0].value.iter().map(|&x| f(x)).collect();
        let ng = self.ng(a);
        self.push(r, c, value, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds a `1 x c` row to every row of an `r x c` matrix.
    pub fn add_row(&mut self, m: Var, row: Var) -> Result<Var> {
        let (r, c) = self.shape(m);
        if self.shape(row) != (1, c) {
            return Err(Error::dim(format!(
                "add_row: {} matrix with {} row",
                self.dims_str(m),
                self.dims_str(row)
            )));
        }
        let rv = &self.nodes[row.0].value;
        let value = self.nodes[m.0]
            .value
            .chunks(c)
            .flat_map(|mr| mr.iter().zip(rv).map(|(&x, &y)| x + y))
            .collect();
        let ng = self.ng(m) || self.ng(row);
        Ok(self.push(r, c, value, Op::AddRow(m, row), ng))
    }

    pub fn add_scalar(&mut self, a: Var, k: T) -> Var {
        self.map(a, Op::AddConst(a), |x| x + k)
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        self.map(a, Op::Scale(a, k), |x| x * k)
    }

    /// `1 - a`, elementwise.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -T::one());
        self.add_scalar(neg, T::one())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul: {} times {}",
                self.dims_str(a),
                self.dims_str(b)
            )));
        }
        let mut out = vec![T::zero(); m * n];
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                if x == T::zero() {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                for (o, &y) in orow.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(m, n, out, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let av = &self.nodes[a.0].value;
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = av[i * c + j];
            }
        }
        let ng = self.ng(a);
        self.push(c, r, out, Op::Transpose(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), |x| T::one() / (T::one() + (-x).exp()))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a), |x| x.tanh())
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, Op::Exp(a), |x| x.exp())
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.iter().copied().sum();
        let ng = self.ng(a);
        self.push(1, 1, vec![s], Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let s: T = v.iter().copied().sum();
        let m = s / T::lit(v.len() as f64);
        let ng = self.ng(a);
        self.push(1, 1, vec![m], Op::Mean(a), ng)
    }

    /// Column sums: `r x c` to `1 x c`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let (_, c) = self.shape(a);
        let mut out = vec![T::zero(); c];
        for row in self.nodes[a.0].value.chunks(c) {
            out.iter_mut().zip(row).for_each(|(o, &x)| *o += x);
        }
        let ng = self.ng(a);
        self.push(1, c, out, Op::SumRows(a), ng)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let mut out = Vec::with_capacity(r * c);
        for row in self.nodes[a.0].value.chunks(c) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let start = out.len();
            out.extend(row.iter().map(|&x| (x - max).exp()));
            let z: T = out[start..].iter().copied().sum();
            out[start..].iter_mut().for_each(|x| *x /= z);
        }
        let ng = self.ng(a);
        self.push(r, c, out, Op::SoftmaxRows(a), ng)
    }

    /// Parameter-free layer normalization of each row.
    pub fn layer_norm_rows(&mut self, a: Var, eps: T) -> Var {
        let (r, c) = self.shape(a);
        let mut out = Vec::with_capacity(r * c);
        for row in self.nodes[a.0].value.chunks(c) {
            let (mu, inv) = row_moments(row, eps);
            out.extend(row.iter().map(|&x| (x - mu) * inv));
        }
        let ng = self.ng(a);
        self.push(r, c, out, Op::LayerNormRows(a, eps), ng)
    }

    /// Divides each row by `max(||row||, eps)`.
    pub fn l2_normalize_rows(&mut self, a: Var, eps: T) -> Var {
        let (r, c) = self.shape(a);
        let mut out = Vec::with_capacity(r * c);
        for row in self.nodes[a.0].value.chunks(c) {
            let denom = l2(row).max(eps);
            out.extend(row.iter().map(|&x| x / denom));
        }
        let ng = self.ng(a);
        self.push(r, c, out, Op::L2NormalizeRows(a, eps), ng)
    }

    /// Rows `start..end` of `a`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start >= end || end > r {
            return Err(Error::dim(format!("slice_rows {start}..{end} of a {r}x{c} matrix")));
        }
        let value = self.nodes[a.0].value[start * c..end * c].to_vec();
        let ng = self.ng(a);
        Ok(self.push(end - start, c, value, Op::SliceRows(a, start), ng))
    }

    pub fn row_of(&mut self, a: Var, i: usize) -> Result<Var> {
        self.slice_rows(a, i, i + 1)
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn vstack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::contract("vstack of nothing"))?;
        let c = self.cols(first);
        let mut rows = 0;
        let mut value = Vec::new();
        for &p in parts {
            if self.cols(p) != c {
                return Err(Error::dim(format!("vstack: column counts {c} and {}", self.cols(p))));
            }
            rows += self.rows(p);
            value.extend_from_slice(&self.nodes[p.0].value);
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(rows, c, value, Op::VStack(parts.to_vec()), ng))
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn hcat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::contract("hcat of nothing"))?;
        let r = self.rows(first);
        if let Some(&bad) = parts.iter().find(|&&p| self.rows(p) != r) {
            return Err(Error::dim(format!("hcat: row counts {r} and {}", self.rows(bad))));
        }
        let c: usize = parts.iter().map(|&p| self.cols(p)).sum();
        let mut value = Vec::with_capacity(r * c);
        for i in 0..r {
            for &p in parts {
                value.extend_from_slice(self.row_values(p, i));
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(r, c, value, Op::HCat(parts.to_vec()), ng))
    }

    /// Embedding lookup: row `ids[i]` of `table` becomes output row `i`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(table);
        if ids.is_empty() {
            return Err(Error::contract("gather with no ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= r) {
            return Err(Error::contract(format!(
                "gather id {bad} out of range for a table of {r} rows"
            )));
        }
        let mut value = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            value.extend_from_slice(self.row_values(table, i));
        }
        let ng = self.ng(table);
        Ok(self.push(ids.len(), c, value, Op::Gather(table, ids.to_vec()), ng))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// `u.v / (max(|u|, eps) max(|v|, eps))` for two rows.
    pub fn cosine_similarity(&mut self, u: Var, v: Var, eps: T) -> Result<Var> {
        self.same_shape(u, v, "cosine_similarity")?;
        if self.rows(u) != 1 {
            return Err(Error::dim(format!(
                "cosine_similarity expects rows, got {}",
                self.dims_str(u)
            )));
        }
        let nu = self.l2_normalize_rows(u, eps);
        let nv = self.l2_normalize_rows(v, eps);
        let p = self.mul(nu, nv)?;
        Ok(self.sum(p))
    }

    /// All-pairs cosine similarity between the rows of `a` and of `b`.
    pub fn cosine_matrix(&mut self, a: Var, b: Var, eps: T) -> Result<Var> {
        if self.cols(a) != self.cols(b) {
            return Err(Error::dim(format!(
                "cosine_matrix: {} against {}",
                self.dims_str(a),
                self.dims_str(b)
            )));
        }
        let na = self.l2_normalize_rows(a, eps);
        let nb = self.l2_normalize_rows(b, eps);
        let nbt = self.transpose(nb);
        self.matmul(na, nbt)
    }

    /// Reverse sweep from a scalar. Returns the gradient of `loss` with respect
    /// to every parameter that requires one and is reachable from it.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got {}",
                self.dims_str(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = Gradients::empty(self.params.len());

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>], out: &mut Gradients<T>) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.as_slice();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()]);
            f(buf);
        };
        match &node.op {
            Op::Input => {}
            Op::Param(id) => {
                let slot = &mut out.grads[id.0];
                match slot {
                    Some(s) => s.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
                    None => *slot = Some(g.to_vec()),
                }
            }
            Op::Add(a, b) => {
                acc(*a, &mut |buf| add_into(buf, g));
                acc(*b, &mut |buf| add_into(buf, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |buf| add_into(buf, g));
                acc(*b, &mut |buf| buf.iter_mut().zip(g).for_each(|(x, &y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |buf| {
                    for ((x, &gi), &bi) in buf.iter_mut().zip(g).zip(bv) {
                        *x += gi * bi;
                    }
                });
                acc(*b, &mut |buf| {
                    for ((x, &gi), &ai) in buf.iter_mut().zip(g).zip(av) {
                        *x += gi * ai;
                    }
                });
            }
            Op::AddRow(m, row) => {
                acc(*m, &mut |buf| add_into(buf, g));
                let c = node.cols;
                acc(*row, &mut |buf| {
                    for gr in g.chunks(c) {
                        add_into(buf, gr);
                    }
                });
            }
            Op::AddConst(a) => acc(*a, &mut |buf| add_into(buf, g)),
            Op::Scale(a, k) => {
                let k = *k;
                acc(*a, &mut |buf| buf.iter_mut().zip(g).for_each(|(x, &y)| *x += k * y));
            }
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].rows, nodes[a.0].cols);
                let n = nodes[b.0].cols;
                let (av, bv) = (val(*a), val(*b));
                // dA = G B^T
                acc(*a, &mut |buf| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            let s: T = grow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
                            buf[i * k + p] += s;
                        }
                    }
                });
                // dB = A^T G
                acc(*b, &mut |buf| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let x = av[i * k + p];
                            if x == T::zero() {
                                continue;
                            }
                            let brow = &mut buf[p * n..(p + 1) * n];
                            brow.iter_mut().zip(grow).for_each(|(o, &y)| *o += x * y);
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (r, c) = (nodes[a.0].rows, nodes[a.0].cols);
                acc(*a, &mut |buf| {
                    for i in 0..r {
                        for j in 0..c {
                            buf[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                acc(*a, &mut |buf| {
                    for ((x, &gi), &yi) in buf.iter_mut().zip(g).zip(y) {
                        *x += gi * yi * (T::one() - yi);
                    }
                });
            }
            Op::Tanh(a) => {
                let y = &node.value;
                acc(*a, &mut |buf| {
                    for ((x, &gi), &yi) in buf.iter_mut().zip(g).zip(y) {
                        *x += gi * (T::one() - yi * yi);
                    }
                });
            }
            Op::Exp(a) => {
                let y = &node.value;
                acc(*a, &mut |buf| {
                    for ((x, &gi), &yi) in buf.iter_mut().zip(g).zip(y) {
                        *x += gi * yi;
                    }
                });
            }
            Op::Sum(a) => {
                let g0 = g[0];
                acc(*a, &mut |buf| buf.iter_mut().for_each(|x| *x += g0));
            }
            Op::Mean(a) => {
                let g0 = g[0] / T::lit(nodes[a.0].value.len() as f64);
                acc(*a, &mut |buf| buf.iter_mut().for_each(|x| *x += g0));
            }
            Op::SumRows(a) => {
                let c = node.cols;
                acc(*a, &mut |buf| {
                    for br in buf.chunks_mut(c) {
                        add_into(br, g);
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let c = node.cols;
                let y = &node.value;
                acc(*a, &mut |buf| {
                    for ((br, gr), yr) in buf.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let s: T = gr.iter().zip(yr).map(|(&x, &y)| x * y).sum();
                        for ((b, &gi), &yi) in br.iter_mut().zip(gr).zip(yr) {
                            *b += yi * (gi - s);
                        }
                    }
                });
            }
            Op::LayerNormRows(a, eps) => {
                let c = node.cols;
                let cn = T::lit(c as f64);
                let (xv, y) = (val(*a), &node.value);
                let eps = *eps;
                acc(*a, &mut |buf| {
                    for (((br, gr), yr), xr) in buf.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)).zip(xv.chunks(c)) {
                        let (_, inv) = row_moments(xr, eps);
                        let gm: T = gr.iter().copied().sum::<T>() / cn;
                        let gy: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / cn;
                        for ((b, &gi), &yi) in br.iter_mut().zip(gr).zip(yr) {
                            *b += inv * (gi - gm - yi * gy);
                        }
                    }
                });
            }
            Op::L2NormalizeRows(a, eps) => {
                let c = node.cols;
                let (xv, y) = (val(*a), &node.value);
                let eps = *eps;
                acc(*a, &mut |buf| {
                    for (((br, gr), yr), xr) in buf.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)).zip(xv.chunks(c)) {
                        let norm = l2(xr);
                        if norm > eps {
                            let yg: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                            for ((b, &gi), &yi) in br.iter_mut().zip(gr).zip(yr) {
                                *b += (gi - yi * yg) / norm;
                            }
                        } else {
                            br.iter_mut().zip(gr).for_each(|(b, &gi)| *b += gi / eps);
                        }
                    }
                });
            }
            Op::SliceRows(a, start) => {
                let c = node.cols;
                let off = start * c;
                acc(*a, &mut |buf| add_into(&mut buf[off..off + g.len()], g));
            }
            Op::VStack(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = nodes[p.0].value.len();
                    acc(p, &mut |buf| add_into(buf, &g[off..off + len]));
                    off += len;
                }
            }
            Op::HCat(parts) => {
                let c = node.cols;
                let mut col = 0;
                for &p in parts {
                    let pc = nodes[p.0].cols;
                    acc(p, &mut |buf| {
                        for (br, gr) in buf.chunks_mut(pc).zip(g.chunks(c)) {
                            add_into(br, &gr[col..col + pc]);
                        }
                    });
                    col += pc;
                }
            }
            Op::Gather(table, ids) => {
                let c = node.cols;
                acc(*table, &mut |buf| {
                    for (gr, &id) in g.chunks(c).zip(ids) {
                        add_into(&mut buf[id * c..(id + 1) * c], gr);
                    }
                });
            }
        }
    }
}

#[inline]
fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(a, &b)| *a += b);
}

fn l2<T: Real>(row: &[T]) -> T {
    row.iter().map(|&x| x * x).sum::<T>().sqrt()
}

/// Mean and inverse standard deviation (population variance plus `eps`).
fn row_moments<T: Real>(row: &[T], eps: T) -> (T, T) {
    let n = T::lit(row.len() as f64);
    let mu = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&x| (x - mu) * (x - mu)).sum::<T>() / n;
    (mu, T::one() / (var + eps).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn empty() -> Params<f64> {
        Params::new()
    }

    #[test]
    fn matmul_hand_expansion() {
        let p = empty();
        let mut t = Tape::new(&p);
        let a = t.input(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = t.input(2, 1, vec![5.0, 6.0]).unwrap();
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.shape(c), (2, 1));
        assert_eq!(t.value(c), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_identity_and_zero() {
        let p = empty();
        let mut t = Tape::new(&p);
        let i2 = t.input(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = t.input(2, 3, vec![0.5, -1.0, 2.0, 3.0, 0.25, -7.0]).unwrap();
        let c = t.matmul(i2, b).unwrap();
        assert_eq!(t.value(c), t.value(b));
        let z = t.zeros(2, 2).unwrap();
        let c = t.matmul(z, b).unwrap();
        assert!(t.value(c).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let p = empty();
        let mut t = Tape::new(&p);
        let a = t.zeros(2, 3).unwrap();
        let b = t.zeros(2, 3).unwrap();
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("2x3 times 2x3"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        let p = empty();
        let mut t = Tape::new(&p);
        let v = t.row(&[0.7, 0.7, 0.7]).unwrap();
        let s = t.softmax_rows(v);
        for &x in t.value(s) {
            assert_abs_diff_eq!(x, 1.0 / 3.0, epsilon = 1e-15);
        }
        let v = t.row(&[0.0, 3f64.ln()]).unwrap();
        let s = t.softmax_rows(v);
        assert_abs_diff_eq!(t.value(s)[0], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(t.value(s)[1], 0.75, epsilon = 1e-15);
    }

    #[test]
    fn softmax_large_inputs_stay_finite() {
        let p = empty();
        let mut t = Tape::new(&p);
        let v = t.row(&[1000.0, 1000.0, -1000.0]).unwrap();
        let s = t.softmax_rows(v);
        assert_abs_diff_eq!(t.value(s)[0], 0.5, epsilon = 1e-15);
        assert_eq!(t.value(s)[2], 0.0);
    }

    #[test]
    fn cosine_examples() {
        let p = empty();
        let mut t = Tape::new(&p);
        let u = t.row(&[1.0, 2.0, -3.0]).unwrap();
        let c = t.cosine_similarity(u, u, 1e-8).unwrap();
        assert_abs_diff_eq!(t.scalar(c).unwrap(), 1.0, epsilon = 1e-15);
        let neg = t.scale(u, -1.0);
        let c = t.cosine_similarity(u, neg, 1e-8).unwrap();
        assert_abs_diff_eq!(t.scalar(c).unwrap(), -1.0, epsilon = 1e-15);
        let e1 = t.row(&[1.0, 0.0]).unwrap();
        let e2 = t.row(&[0.0, 1.0]).unwrap();
        let c = t.cosine_similarity(e1, e2, 1e-8).unwrap();
        assert_eq!(t.scalar(c).unwrap(), 0.0);
    }

    #[test]
    fn cosine_of_zero_vector_is_zero_not_error() {
        let p = empty();
        let mut t = Tape::new(&p);
        let z = t.zeros(1, 3).unwrap();
        let u = t.row(&[1.0, 1.0, 1.0]).unwrap();
        let c = t.cosine_similarity(z, u, 1e-8).unwrap();
        assert_eq!(t.scalar(c).unwrap(), 0.0);
    }

    #[test]
    fn cosine_shape_mismatch() {
        let p = empty();
        let mut t = Tape::new(&p);
        let a = t.zeros(1, 3).unwrap();
        let b = t.zeros(1, 2).unwrap();
        assert!(matches!(t.cosine_similarity(a, b, 1e-8), Err(Error::Dimension(_))));
    }

    #[test]
    fn mse_examples() {
        let p = empty();
        let mut t = Tape::new(&p);
        let a = t.input(2, 2, vec![1.0, -1.0, -1.0, 1.0]).unwrap();
        let z = t.zeros(2, 2).unwrap();
        let m = t.mse(a, z).unwrap();
        assert_eq!(t.scalar(m).unwrap(), 1.0);
        let m = t.mse(a, a).unwrap();
        assert_eq!(t.scalar(m).unwrap(), 0.0);
        let two = t.row(&[2.0]).unwrap();
        let zero = t.row(&[0.0]).unwrap();
        let m = t.mse(two, zero).unwrap();
        assert_eq!(t.scalar(m).unwrap(), 4.0);
        assert!(t.mse(a, two).is_err());
    }

    #[test]
    fn square_gradient() {
        let mut p = Params::new();
        let x = p.add("x", Tensor::vector(vec![3.0]).unwrap().with_grad()).unwrap();
        let mut t = Tape::new(&p);
        let xv = t.param(x).unwrap();
        let sq = t.mul(xv, xv).unwrap();
        let loss = t.sum(sq);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn quadratic_matrix_gradient_closed_form() {
        // loss = mean((W x)^2); dL/dW = 2/n (W x) x^T
        let w_data = vec![0.3, -0.2, 0.5, 0.1, 0.4, -0.6];
        let x_data = vec![1.5, -0.5, 2.0];
        let mut p = Params::new();
        let w = p
            .add("w", Tensor::matrix(2, 3, w_data.clone()).unwrap().with_grad())
            .unwrap();
        let mut t = Tape::new(&p);
        let wv = t.param(w).unwrap();
        let xv = t.input(3, 1, x_data.clone()).unwrap();
        let y = t.matmul(wv, xv).unwrap();
        let z = t.zeros(2, 1).unwrap();
        let loss = t.mse(y, z).unwrap();
        let g = t.backward(loss).unwrap();
        let wx: Vec<f64> = (0..2)
            .map(|i| (0..3).map(|j| w_data[i * 3 + j] * x_data[j]).sum())
            .collect();
        for i in 0..2 {
            for j in 0..3 {
                let expect = 2.0 / 2.0 * wx[i] * x_data[j];
                assert_abs_diff_eq!(g.get(w).unwrap()[i * 3 + j], expect, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn backward_requires_scalar() {
        let p = empty();
        let mut t = Tape::new(&p);
        let a = t.zeros(1, 2).unwrap();
        assert!(matches!(t.backward(a), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_twice_doubles_accumulated_grad() {
        let mut p = Params::new();
        let x = p
            .add("x", Tensor::vector(vec![1.5, -2.0]).unwrap().with_grad())
            .unwrap();
        let g = {
            let mut t = Tape::new(&p);
            let xv = t.param(x).unwrap();
            let e = t.exp(xv);
            let loss = t.sum(e);
            (t.backward(loss).unwrap(), t.backward(loss).unwrap())
        };
        p.zero_grad();
        p.accumulate(&g.0);
        let once = p.get(x).grad().unwrap().to_vec();
        p.accumulate(&g.1);
        let twice = p.get(x).grad().unwrap().to_vec();
        for (a, b) in once.iter().zip(&twice) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn frozen_param_gets_no_gradient() {
        let mut p = Params::new();
        let a = p.add("a", Tensor::vector(vec![1.0]).unwrap().with_grad()).unwrap();
        let b = p.add("b", Tensor::vector(vec![2.0]).unwrap()).unwrap();
        let mut t = Tape::new(&p);
        let av = t.param(a).unwrap();
        let bv = t.param(b).unwrap();
        let m = t.mul(av, bv).unwrap();
        let loss = t.sum(m);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(a).unwrap(), &[2.0]);
        assert!(g.get(b).is_none());
    }

    #[test]
    fn gather_out_of_range_is_contract_error() {
        let p = empty();
        let mut t = Tape::new(&p);
        let tab = t.zeros(3, 2).unwrap();
        assert!(matches!(t.gather(tab, &[0, 3]), Err(Error::Contract(_))));
    }

    #[test]
    fn first_non_finite_reports_op() {
        let p = empty();
        let mut t = Tape::new(&p);
        let a = t.row(&[1000.0]).unwrap();
        let e = t.exp(a);
        let _ = t.scale(e, 2.0);
        assert_eq!(t.first_non_finite(), Some((1, "exp")));
    }
}
