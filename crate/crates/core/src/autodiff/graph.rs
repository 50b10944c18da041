use std::borrow::Cow;

use super::params::{ParamGrads, ParamId, ParamStore};
use super::tensor::{kernels, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An operation with a hand-written vector-Jacobian product, registered by the
/// module that owns the forward computation.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    /// Given the forward inputs and output and the upstream gradient, returns
    /// one gradient buffer per input. `None` means "no contribution".
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_out: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>>;
}

enum Op {
    Constant,
    Variable,
    Param(ParamId),
    MatMul,
    Add,
    Sub,
    Mul,
    AddRow,
    MulRow,
    Scale(f64),
    AddScalar,
    Sigmoid,
    Relu,
    Transpose,
    Reshape,
    SumAll,
    MeanAll,
    MeanRows,
    ConcatCols,
    ConcatRows,
    SliceRows(usize),
    Inverse,
    Custom(Box<dyn CustomOp>),
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Variable => "variable",
            Op::Param(_) => "param",
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::AddRow => "add_row",
            Op::MulRow => "mul_row",
            Op::Scale(_) => "scale",
            Op::AddScalar => "add_scalar",
            Op::Sigmoid => "sigmoid",
            Op::Relu => "relu",
            Op::Transpose => "transpose",
            Op::Reshape => "reshape",
            Op::SumAll => "sum",
            Op::MeanAll => "mean",
            Op::MeanRows => "mean_rows",
            Op::ConcatCols => "concat_cols",
            Op::ConcatRows => "concat_rows",
            Op::SliceRows(_) => "slice_rows",
            Op::Inverse => "inverse",
            Op::Custom(c) => c.name(),
        }
    }
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    parents: Vec<Var>,
    needs_grad: bool,
}

/// Append-only computation graph. Nodes are stored in creation order, which is
/// a topological order, so backward is a single reverse sweep.
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
    bound: Vec<Option<Var>>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            bound: Vec::new(),
        }
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

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.kind()
    }

    fn push(&mut self, value: Cow<'p, Tensor>, op: Op, parents: Vec<Var>) -> Var {
        let needs_grad = match op {
            Op::Variable | Op::Param(_) => true,
            Op::Constant => false,
            _ => parents.iter().any(|p| self.nodes[p.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            parents,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_owned(&mut self, value: Tensor, op: Op, parents: Vec<Var>) -> Var {
        self.push(Cow::Owned(value), op, parents)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_owned(t, Op::Constant, vec![])
    }

    pub fn constant_ref(&mut self, t: &'p Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Constant, vec![])
    }

    /// A free leaf that receives a gradient but is not tied to a parameter store.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push_owned(t, Op::Variable, vec![])
    }

    /// Binds a stored parameter into the graph. Binding the same id twice
    /// returns the same node.
    pub fn param(&mut self, store: &'p ParamStore, id: ParamId) -> Var {
        if let Some(Some(v)) = self.bound.get(id.0) {
            return *v;
        }
        let v = self.push(Cow::Borrowed(store.get(id)), Op::Param(id), vec![]);
        if self.bound.len() <= id.0 {
            self.bound.resize(id.0 + 1, None);
        }
        self.bound[id.0] = Some(v);
        v
    }

    /// Binds a parameter value as a constant; no gradient flows back to it.
    pub fn param_frozen(&mut self, store: &'p ParamStore, id: ParamId) -> Var {
        self.constant_ref(store.get(id))
    }

    pub fn custom(&mut self, op: Box<dyn CustomOp>, parents: Vec<Var>, value: Tensor) -> Var {
        self.push_owned(value, Op::Custom(op), parents)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push_owned(out, Op::MatMul, vec![a, b]))
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("zip_map shape")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| f(x)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("map shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push_owned(out, Op::Add, vec![a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push_owned(out, Op::Sub, vec![a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push_owned(out, Op::Mul, vec![a, b]))
    }

    /// `a[m,n] + row[1,n]`, broadcasting the row over all rows of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        if tr.rows() != 1 || tr.cols() != ta.cols() {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + {:?}", ta.shape(), tr.shape()),
            ));
        }
        let n = ta.cols();
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_mut(n) {
            chunk.iter_mut().zip(tr.data()).for_each(|(v, r)| *v += r);
        }
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push_owned(out, Op::AddRow, vec![a, row]))
    }

    /// `a[m,n] * row[1,n]`, scaling every column `j` by `row[j]`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        if tr.rows() != 1 || tr.cols() != ta.cols() {
            return Err(Error::shape(
                "mul_row",
                format!("{:?} * {:?}", ta.shape(), tr.shape()),
            ));
        }
        let n = ta.cols();
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_mut(n) {
            chunk.iter_mut().zip(tr.data()).for_each(|(v, r)| *v *= r);
        }
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push_owned(out, Op::MulRow, vec![a, row]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.map(a, |x| c * x);
        self.push_owned(out, Op::Scale(c), vec![a])
    }

    /// `a + c` where `c` is a `[1,1]` node.
    pub fn add_scalar(&mut self, a: Var, c: Var) -> Result<Var> {
        let tc = self.value(c);
        if tc.numel() != 1 {
            return Err(Error::shape("add_scalar", format!("{:?}", tc.shape())));
        }
        let cv = tc.data()[0];
        let out = self.map(a, |x| x + cv);
        Ok(self.push_owned(out, Op::AddScalar, vec![a, c]))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.map(a, sigmoid);
        self.push_owned(out, Op::Sigmoid, vec![a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| x.max(0.0));
        self.push_owned(out, Op::Relu, vec![a])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push_owned(out, Op::Transpose, vec![a])
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let out = self.value(a).reshape(vec![rows, cols])?;
        Ok(self.push_owned(out, Op::Reshape, vec![a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push_owned(Tensor::scalar(s), Op::SumAll, vec![a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push_owned(Tensor::scalar(s), Op::MeanAll, vec![a])
    }

    /// Column means: `[m,n] -> [1,n]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (m, n) = (t.rows(), t.cols());
        let mut out = vec![0.0; n];
        for r in 0..m {
            for (o, v) in out.iter_mut().zip(t.row(r)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= m as f64);
        let out = Tensor::matrix(1, n, out).expect("mean_rows shape");
        self.push_owned(out, Op::MeanRows, vec![a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::matrix(rows, total, data)?;
        Ok(self.push_owned(out, Op::ConcatCols, parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        if parts.iter().any(|&p| self.value(p).cols() != cols) {
            return Err(Error::shape("concat_rows", "column counts differ"));
        }
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::matrix(rows, cols, data)?;
        Ok(self.push_owned(out, Op::ConcatRows, parts.to_vec()))
    }

    /// Rows `start..end` of `a`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        if start >= end || end > t.rows() {
            return Err(Error::shape(
                "slice_rows",
                format!("{start}..{end} of {} rows", t.rows()),
            ));
        }
        let c = t.cols();
        let out = Tensor::matrix(end - start, c, t.data()[start * c..end * c].to_vec())?;
        Ok(self.push_owned(out, Op::SliceRows(start), vec![a]))
    }

    pub fn inverse(&mut self, a: Var) -> Result<Var> {
        let out = super::linalg::invert(self.value(a))?;
        Ok(self.push_owned(out, Op::Inverse, vec![a]))
    }

    /// Mean squared difference between two same-shape nodes.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// Minimum-norm least squares `K = B A⁺` through ridge-regularized normal
    /// equations. Uses the smaller of the two Gram matrices, so both wide and
    /// tall snapshot matrices stay well posed.
    pub fn least_squares_min_norm(&mut self, a: Var, b: Var, ridge: f64) -> Result<Var> {
        self.same_shape("least_squares_min_norm", a, b)?;
        if !(ridge >= 0.0 && ridge.is_finite()) {
            return Err(Error::Config(format!("ridge must be >= 0, got {ridge}")));
        }
        if !self.value(a).is_finite() || !self.value(b).is_finite() {
            return Err(Error::NonFinite("least_squares_min_norm input"));
        }
        let (d, m) = self.shape(a);
        let at = self.transpose(a);
        if d <= m {
            let gram = self.matmul(a, at)?;
            let reg = self.add_ridge(gram, ridge, d)?;
            let inv = self.inverse(reg)?;
            let bat = self.matmul(b, at)?;
            self.matmul(bat, inv)
        } else {
            let gram = self.matmul(at, a)?;
            let reg = self.add_ridge(gram, ridge, m)?;
            let inv = self.inverse(reg)?;
            let binv = self.matmul(b, inv)?;
            self.matmul(binv, at)
        }
    }

    fn add_ridge(&mut self, gram: Var, ridge: f64, n: usize) -> Result<Var> {
        if ridge == 0.0 {
            return Ok(gram);
        }
        let mut eye = Tensor::identity(n);
        eye.data_mut().iter_mut().for_each(|v| *v *= ridge);
        let eye = self.constant(eye);
        self.add(gram, eye)
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || node.parents.is_empty() {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<'p>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let p = &node.parents;
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        let val = |v: Var| -> &Tensor { &self.nodes[v.0].value };
        let out = &node.value;

        let mut acc = |v: Var, contrib: Vec<f64>| accumulate(grads, v, contrib);

        match &node.op {
            Op::Constant | Op::Variable | Op::Param(_) => {}
            Op::MatMul => {
                let (a, b) = (val(p[0]), val(p[1]));
                let (m, k, n) = (a.rows(), a.cols(), b.cols());
                if needs(p[0]) {
                    let mut ga = vec![0.0; m * k];
                    kernels::matmul_nt(g, b.data(), &mut ga, m, n, k);
                    acc(p[0], ga);
                }
                if needs(p[1]) {
                    let mut gb = vec![0.0; k * n];
                    kernels::matmul_tn(a.data(), g, &mut gb, m, k, n);
                    acc(p[1], gb);
                }
            }
            Op::Add => {
                for &v in p.iter() {
                    if needs(v) {
                        acc(v, g.to_vec());
                    }
                }
            }
            Op::Sub => {
                if needs(p[0]) {
                    acc(p[0], g.to_vec());
                }
                if needs(p[1]) {
                    acc(p[1], g.iter().map(|x| -x).collect());
                }
            }
            Op::Mul => {
                let (a, b) = (val(p[0]), val(p[1]));
                if needs(p[0]) {
                    acc(p[0], g.iter().zip(b.data()).map(|(x, y)| x * y).collect());
                }
                if needs(p[1]) {
                    acc(p[1], g.iter().zip(a.data()).map(|(x, y)| x * y).collect());
                }
            }
            Op::AddRow => {
                if needs(p[0]) {
                    acc(p[0], g.to_vec());
                }
                if needs(p[1]) {
                    let n = val(p[1]).cols();
                    let mut gr = vec![0.0; n];
                    for chunk in g.chunks(n) {
                        gr.iter_mut().zip(chunk).for_each(|(s, x)| *s += x);
                    }
                    acc(p[1], gr);
                }
            }
            Op::MulRow => {
                let (a, r) = (val(p[0]), val(p[1]));
                let n = r.cols();
                if needs(p[0]) {
                    acc(
                        p[0],
                        g.chunks(n)
                            .flat_map(|chunk| chunk.iter().zip(r.data()).map(|(x, rv)| x * rv))
                            .collect(),
                    );
                }
                if needs(p[1]) {
                    let mut gr = vec![0.0; n];
                    for (gc, ac) in g.chunks(n).zip(a.data().chunks(n)) {
                        for ((s, x), av) in gr.iter_mut().zip(gc).zip(ac) {
                            *s += x * av;
                        }
                    }
                    acc(p[1], gr);
                }
            }
            Op::Scale(c) => acc(p[0], g.iter().map(|x| c * x).collect()),
            Op::AddScalar => {
                if needs(p[0]) {
                    acc(p[0], g.to_vec());
                }
                if needs(p[1]) {
                    acc(p[1], vec![g.iter().sum()]);
                }
            }
            Op::Sigmoid => acc(
                p[0],
                g.iter()
                    .zip(out.data())
                    .map(|(x, s)| x * s * (1.0 - s))
                    .collect(),
            ),
            Op::Relu => acc(
                p[0],
                g.iter()
                    .zip(val(p[0]).data())
                    .map(|(x, a)| if *a > 0.0 { *x } else { 0.0 })
                    .collect(),
            ),
            Op::Transpose => {
                let (r, c) = (out.rows(), out.cols());
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        ga[j * r + i] = g[i * c + j];
                    }
                }
                acc(p[0], ga);
            }
            Op::Reshape => acc(p[0], g.to_vec()),
            Op::SumAll => acc(p[0], vec![g[0]; val(p[0]).numel()]),
            Op::MeanAll => {
                let n = val(p[0]).numel();
                acc(p[0], vec![g[0] / n as f64; n]);
            }
            Op::MeanRows => {
                let a = val(p[0]);
                let (m, n) = (a.rows(), a.cols());
                let mut ga = vec![0.0; m * n];
                for chunk in ga.chunks_mut(n) {
                    chunk.iter_mut().zip(g).for_each(|(v, x)| *v = x / m as f64);
                }
                acc(p[0], ga);
            }
            Op::ConcatCols => {
                let rows = out.rows();
                let total = out.cols();
                let mut offset = 0;
                for &v in p.iter() {
                    let c = val(v).cols();
                    if needs(v) {
                        let mut gv = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            gv.extend_from_slice(&g[r * total + offset..r * total + offset + c]);
                        }
                        acc(v, gv);
                    }
                    offset += c;
                }
            }
            Op::ConcatRows => {
                let mut offset = 0;
                for &v in p.iter() {
                    let n = val(v).numel();
                    if needs(v) {
                        acc(v, g[offset..offset + n].to_vec());
                    }
                    offset += n;
                }
            }
            Op::SliceRows(start) => {
                let a = val(p[0]);
                let c = a.cols();
                let mut ga = vec![0.0; a.numel()];
                ga[start * c..start * c + g.len()].copy_from_slice(g);
                acc(p[0], ga);
            }
            Op::Inverse => {
                // d(A⁻¹) = -A⁻¹ dA A⁻¹  =>  ḡ_A = -Yᵀ G Yᵀ
                let y = out;
                let n = y.rows();
                let yt = y.transpose();
                let mut tmp = vec![0.0; n * n];
                kernels::matmul(yt.data(), g, &mut tmp, n, n, n);
                let mut ga = vec![0.0; n * n];
                kernels::matmul(&tmp, yt.data(), &mut ga, n, n, n);
                ga.iter_mut().for_each(|v| *v = -*v);
                acc(p[0], ga);
            }
            Op::Custom(op) => {
                let inputs: Vec<&Tensor> = p.iter().map(|&v| val(v)).collect();
                let need_flags: Vec<bool> = p.iter().map(|&v| needs(v)).collect();
                let contribs = op.backward(&inputs, out, g, &need_flags);
                for (&v, c) in p.iter().zip(contribs) {
                    if let Some(c) = c {
                        if needs(v) {
                            acc(v, c);
                        }
                    }
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => existing
            .iter_mut()
            .zip(&contrib)
            .for_each(|(e, c)| *e += c),
        slot @ None => *slot = Some(contrib),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-node gradients from one backward sweep.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if any flowed there.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Collects the gradients of every bound parameter.
    pub fn param_grads(&self, graph: &Graph<'_>, store: &ParamStore) -> ParamGrads {
        let mut out = ParamGrads::zeros_like(store);
        for (idx, node) in graph.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &self.grads[idx]) {
                out.add(*id, g);
            }
        }
        out
    }
}
