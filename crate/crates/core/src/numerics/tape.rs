//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! Every forward op is evaluated eagerly and appended to the tape together
//! with its inputs. [`Tape::backward`] walks the tape in reverse and
//! accumulates adjoints in a fixed order, so repeated runs are bitwise
//! identical.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::{dot, matmul_a_bt, matmul_at_b, matmul_raw, sigmoid, Tensor};
use super::{NumericsError, ParamStore, NORM_EPS};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node recorded on a specific [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(String),
    MatMul(Var, Var),
    AddRow(Var, Var),
    AddTiledRows(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Log(Var),
    Exp(Var),
    Clamp(Var, f64, f64),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    Reshape(Var, Vec<usize>),
    RowSoftmax(Var),
    RowDot(Var, Var),
    RowCosine(Var, Var),
    NormalizeRows(Var),
    GroupDot(Var, Var, usize),
    GroupWeightedSum(Var, Var, usize),
    MaskedRowLogSumExp(Var, Vec<bool>),
    RowMean(Var),
    Mean(Var),
    Sum(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Records primitive ops and computes adjoints for bound parameters.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Parameter name to tape variable.
#[derive(Debug, Clone, Default)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var, NumericsError> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| NumericsError::UnknownParam(name.to_string()))
    }
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    params: BTreeMap<String, Tensor>,
    reached: BTreeSet<String>,
}

impl Gradients {
    /// Adjoint of a bound parameter; zero-filled if it was not on the loss path.
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    /// Whether the parameter influenced the loss through any recorded op.
    pub fn reached(&self, name: &str) -> bool {
        self.reached.contains(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.params
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> NumericsError {
    NumericsError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn mat(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
    Tensor::new(vec![rows, cols], data).expect("op produced consistent shape")
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.check(v).expect("var from another tape");
        &self.nodes[v.idx].value
    }

    fn check(&self, v: Var) -> Result<(), NumericsError> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(NumericsError::UntrackedNode);
        }
        Ok(())
    }

    fn push(&mut self, op: Op) -> Result<Var, NumericsError> {
        let value = self.eval(&op)?;
        self.nodes.push(Node { value, op });
        Ok(Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        })
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Constant,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    pub fn param(&mut self, name: &str, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Param(name.to_string()),
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    /// Binds every tensor of `store` as a tracked parameter.
    pub fn bind(&mut self, store: &ParamStore) -> ParamVars {
        let vars = store
            .iter()
            .map(|(name, t)| (name.clone(), self.param(name, t.clone())))
            .collect();
        ParamVars { vars }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.push(Op::MatMul(a, b))
    }

    /// `a` plus a row vector broadcast over every row.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, NumericsError> {
        self.push(Op::AddRow(a, bias))
    }

    /// Affine map `x W + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, NumericsError> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    /// `a` (rows `n * s`) plus `p` (rows `s`) repeated every `s` rows.
    pub fn add_tiled_rows(&mut self, a: Var, p: Var) -> Result<Var, NumericsError> {
        self.push(Op::AddTiledRows(a, p))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, NumericsError> {
        self.push(Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var, NumericsError> {
        self.push(Op::AddScalar(a, c))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.push(Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.push(Op::Tanh(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.push(Op::Log(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.push(Op::Exp(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var, NumericsError> {
        self.push(Op::Clamp(a, lo, hi))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        self.push(Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        self.push(Op::SliceCols(a, start, len))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        self.push(Op::Reshape(a, shape.to_vec()))
    }

    pub fn row_softmax(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.push(Op::RowSoftmax(a))
    }

    /// Per-row dot product, `n x 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.push(Op::RowDot(a, b))
    }

    /// Per-row cosine, `n x 1`. Rows with zero norm give 0 with zero adjoint.
    pub fn row_cosine(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.push(Op::RowCosine(a, b))
    }

    pub fn normalize_rows(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.push(Op::NormalizeRows(a))
    }

    /// `q` is `n x d`, `k` is `(n * g) x d`; output `[i, j] = q_i . k_{i g + j}`.
    pub fn group_dot(&mut self, q: Var, k: Var, group: usize) -> Result<Var, NumericsError> {
        self.push(Op::GroupDot(q, k, group))
    }

    /// `w` is `n x g`, `v` is `(n * g) x d`; output row `i = sum_j w[i, j] v_{i g + j}`.
    pub fn group_weighted_sum(&mut self, w: Var, v: Var, group: usize) -> Result<Var, NumericsError> {
        self.push(Op::GroupWeightedSum(w, v, group))
    }

    /// Per-row log-sum-exp over entries where `mask` (row-major) is true.
    pub fn masked_row_logsumexp(&mut self, a: Var, mask: Vec<bool>) -> Result<Var, NumericsError> {
        self.push(Op::MaskedRowLogSumExp(a, mask))
    }

    /// Mean over columns, `n x 1`.
    pub fn row_mean(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.push(Op::RowMean(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.push(Op::Mean(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.push(Op::Sum(a))
    }

    fn val(&self, v: Var) -> Result<&Tensor, NumericsError> {
        self.check(v)?;
        Ok(&self.nodes[v.idx].value)
    }

    fn eval(&self, op: &Op) -> Result<Tensor, NumericsError> {
        self.eval_with(op, |v| self.val(v))
    }

    fn eval_with<'a>(
        &'a self,
        op: &Op,
        get: impl Fn(Var) -> Result<&'a Tensor, NumericsError>,
    ) -> Result<Tensor, NumericsError> {
        Ok(match op {
            Op::Constant | Op::Param(_) => unreachable!("leaves are not evaluated"),
            Op::MatMul(a, b) => {
                let (a, b) = (get(*a)?, get(*b)?);
                if a.cols() != b.rows() {
                    return Err(mismatch("matmul", a, b));
                }
                let (n, k, m) = (a.rows(), a.cols(), b.cols());
                mat(n, m, matmul_raw(a.data(), b.data(), n, k, m))
            }
            Op::AddRow(a, b) => {
                let (a, b) = (get(*a)?, get(*b)?);
                if b.len() != a.cols() {
                    return Err(mismatch("add_row", a, b));
                }
                let c = a.cols();
                let mut out = a.data().to_vec();
                for (i, o) in out.iter_mut().enumerate() {
                    *o += b.data()[i % c];
                }
                mat(a.rows(), c, out)
            }
            Op::AddTiledRows(a, p) => {
                let (a, p) = (get(*a)?, get(*p)?);
                if a.cols() != p.cols() || a.rows() % p.rows() != 0 {
                    return Err(mismatch("add_tiled_rows", a, p));
                }
                let period = p.len();
                let mut out = a.data().to_vec();
                for (i, o) in out.iter_mut().enumerate() {
                    *o += p.data()[i % period];
                }
                mat(a.rows(), a.cols(), out)
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (ta, tb) = (get(*a)?, get(*b)?);
                let name = match op {
                    Op::Add(..) => "add",
                    Op::Sub(..) => "sub",
                    _ => "mul",
                };
                if ta.rows() != tb.rows() || ta.cols() != tb.cols() {
                    return Err(mismatch(name, ta, tb));
                }
                let f: fn(f64, f64) -> f64 = match op {
                    Op::Add(..) => |x, y| x + y,
                    Op::Sub(..) => |x, y| x - y,
                    _ => |x, y| x * y,
                };
                let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
                mat(ta.rows(), ta.cols(), data)
            }
            Op::Scale(a, c) => unary(get(*a)?, |x| x * c),
            Op::AddScalar(a, c) => unary(get(*a)?, |x| x + c),
            Op::Sigmoid(a) => unary(get(*a)?, sigmoid),
            Op::Tanh(a) => unary(get(*a)?, f64::tanh),
            Op::Log(a) => unary(get(*a)?, f64::ln),
            Op::Exp(a) => unary(get(*a)?, f64::exp),
            Op::Clamp(a, lo, hi) => unary(get(*a)?, |x| x.clamp(*lo, *hi)),
            Op::ConcatCols(parts) => {
                let ts: Vec<&Tensor> = parts.iter().map(|p| get(*p)).collect::<Result<_, _>>()?;
                let Some(first) = ts.first() else {
                    return Err(NumericsError::EmptyInput("concat_cols"));
                };
                let n = first.rows();
                if let Some(bad) = ts.iter().find(|t| t.rows() != n) {
                    return Err(mismatch("concat_cols", first, bad));
                }
                let total: usize = ts.iter().map(|t| t.cols()).sum();
                let mut out = Vec::with_capacity(n * total);
                for r in 0..n {
                    for t in &ts {
                        out.extend_from_slice(t.row(r));
                    }
                }
                mat(n, total, out)
            }
            Op::SliceCols(a, start, len) => {
                let a = get(*a)?;
                if *len == 0 || start + len > a.cols() {
                    return Err(NumericsError::ShapeMismatch {
                        op: "slice_cols",
                        left: a.shape().to_vec(),
                        right: vec![*start, *len],
                    });
                }
                let mut out = Vec::with_capacity(a.rows() * len);
                for r in 0..a.rows() {
                    out.extend_from_slice(&a.row(r)[*start..start + len]);
                }
                mat(a.rows(), *len, out)
            }
            Op::Reshape(a, shape) => {
                let a = get(*a)?;
                a.reshaped(shape).map_err(|_| NumericsError::ShapeMismatch {
                    op: "reshape",
                    left: a.shape().to_vec(),
                    right: shape.clone(),
                })?
            }
            Op::RowSoftmax(a) => {
                let a = get(*a)?;
                let mut out = Vec::with_capacity(a.len());
                for r in 0..a.rows() {
                    out.extend(super::tensor::softmax(a.row(r)));
                }
                mat(a.rows(), a.cols(), out)
            }
            Op::RowDot(a, b) | Op::RowCosine(a, b) => {
                let (ta, tb) = (get(*a)?, get(*b)?);
                let cosine = matches!(op, Op::RowCosine(..));
                if ta.rows() != tb.rows() || ta.cols() != tb.cols() {
                    return Err(mismatch(if cosine { "row_cosine" } else { "row_dot" }, ta, tb));
                }
                let out = (0..ta.rows())
                    .map(|r| {
                        let (x, y) = (ta.row(r), tb.row(r));
                        if cosine {
                            row_cos(x, y).0
                        } else {
                            dot(x, y)
                        }
                    })
                    .collect();
                mat(ta.rows(), 1, out)
            }
            Op::NormalizeRows(a) => {
                let a = get(*a)?;
                let mut out = Vec::with_capacity(a.len());
                for r in 0..a.rows() {
                    let row = a.row(r);
                    let d = dot(row, row).sqrt() + NORM_EPS;
                    out.extend(row.iter().map(|v| v / d));
                }
                mat(a.rows(), a.cols(), out)
            }
            Op::GroupDot(q, k, g) => {
                let (q, k) = (get(*q)?, get(*k)?);
                if *g == 0 || q.cols() != k.cols() || k.rows() != q.rows() * g {
                    return Err(mismatch("group_dot", q, k));
                }
                let mut out = Vec::with_capacity(q.rows() * g);
                for i in 0..q.rows() {
                    for j in 0..*g {
                        out.push(dot(q.row(i), k.row(i * g + j)));
                    }
                }
                mat(q.rows(), *g, out)
            }
            Op::GroupWeightedSum(w, v, g) => {
                let (w, v) = (get(*w)?, get(*v)?);
                if *g == 0 || w.cols() != *g || v.rows() != w.rows() * g {
                    return Err(mismatch("group_weighted_sum", w, v));
                }
                let d = v.cols();
                let mut out = vec![0.0; w.rows() * d];
                for i in 0..w.rows() {
                    let orow = &mut out[i * d..(i + 1) * d];
                    for j in 0..*g {
                        let wij = w.row(i)[j];
                        for (o, &x) in orow.iter_mut().zip(v.row(i * g + j)) {
                            *o += wij * x;
                        }
                    }
                }
                mat(w.rows(), d, out)
            }
            Op::MaskedRowLogSumExp(a, mask) => {
                let a = get(*a)?;
                if mask.len() != a.len() {
                    return Err(NumericsError::ShapeMismatch {
                        op: "masked_row_logsumexp",
                        left: a.shape().to_vec(),
                        right: vec![mask.len()],
                    });
                }
                let c = a.cols();
                let mut out = Vec::with_capacity(a.rows());
                for r in 0..a.rows() {
                    let m = &mask[r * c..(r + 1) * c];
                    out.push(masked_lse(a.row(r), m)?);
                }
                mat(a.rows(), 1, out)
            }
            Op::RowMean(a) => {
                let a = get(*a)?;
                let c = a.cols() as f64;
                let out = (0..a.rows()).map(|r| a.row(r).iter().sum::<f64>() / c).collect();
                mat(a.rows(), 1, out)
            }
            Op::Mean(a) => {
                let a = get(*a)?;
                Tensor::scalar(seq_sum(a.data()) / a.len() as f64)
            }
            Op::Sum(a) => Tensor::scalar(seq_sum(get(*a)?.data())),
        })
    }

    /// Re-evaluates every recorded op from the leaves and returns all node values.
    pub fn replay(&self) -> Result<Vec<Tensor>, NumericsError> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.op {
                Op::Constant | Op::Param(_) => node.value.clone(),
                op => {
                    let vals = &values;
                    self.eval_with(op, |v| {
                        self.check(v)?;
                        Ok(&vals[v.idx])
                    })?
                }
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericsError> {
        self.check(loss)?;
        if !self.nodes[loss.idx].value.is_scalar() {
            return Err(NumericsError::NonScalarLoss(
                self.nodes[loss.idx].value.shape().to_vec(),
            ));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.idx + 1];
        adj[loss.idx] = Some(vec![1.0]);

        for idx in (0..=loss.idx).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            let y = &node.value;
            match &node.op {
                Op::Constant => {}
                Op::Param(_) => {
                    adj[idx] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (&self.nodes[a.idx].value, &self.nodes[b.idx].value);
                    let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
                    accumulate(&mut adj, a.idx, matmul_a_bt(&g, tb.data(), n, k, m));
                    accumulate(&mut adj, b.idx, matmul_at_b(ta.data(), &g, n, k, m));
                }
                Op::AddRow(a, b) => {
                    let c = y.cols();
                    let mut db = vec![0.0; c];
                    for (i, gv) in g.iter().enumerate() {
                        db[i % c] += gv;
                    }
                    accumulate(&mut adj, a.idx, g);
                    accumulate(&mut adj, b.idx, db);
                }
                Op::AddTiledRows(a, p) => {
                    let period = self.nodes[p.idx].value.len();
                    let mut dp = vec![0.0; period];
                    for (i, gv) in g.iter().enumerate() {
                        dp[i % period] += gv;
                    }
                    accumulate(&mut adj, a.idx, g);
                    accumulate(&mut adj, p.idx, dp);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, b.idx, g.clone());
                    accumulate(&mut adj, a.idx, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj, b.idx, g.iter().map(|v| -v).collect());
                    accumulate(&mut adj, a.idx, g);
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.nodes[a.idx].value.data(), self.nodes[b.idx].value.data());
                    let da = g.iter().zip(tb).map(|(g, b)| g * b).collect();
                    let db = g.iter().zip(ta).map(|(g, a)| g * a).collect();
                    accumulate(&mut adj, a.idx, da);
                    accumulate(&mut adj, b.idx, db);
                }
                Op::Scale(a, c) => accumulate(&mut adj, a.idx, g.iter().map(|v| v * c).collect()),
                Op::AddScalar(a, _) => accumulate(&mut adj, a.idx, g),
                Op::Sigmoid(a) => {
                    let d = g.iter().zip(y.data()).map(|(g, s)| g * s * (1.0 - s)).collect();
                    accumulate(&mut adj, a.idx, d);
                }
                Op::Tanh(a) => {
                    let d = g.iter().zip(y.data()).map(|(g, t)| g * (1.0 - t * t)).collect();
                    accumulate(&mut adj, a.idx, d);
                }
                Op::Log(a) => {
                    let x = self.nodes[a.idx].value.data();
                    accumulate(&mut adj, a.idx, g.iter().zip(x).map(|(g, x)| g / x).collect());
                }
                Op::Exp(a) => {
                    accumulate(&mut adj, a.idx, g.iter().zip(y.data()).map(|(g, e)| g * e).collect());
                }
                Op::Clamp(a, lo, hi) => {
                    let x = self.nodes[a.idx].value.data();
                    let d = g
                        .iter()
                        .zip(x)
                        .map(|(g, x)| if *x >= *lo && *x <= *hi { *g } else { 0.0 })
                        .collect();
                    accumulate(&mut adj, a.idx, d);
                }
                Op::ConcatCols(parts) => {
                    let n = y.rows();
                    let total = y.cols();
                    let mut offset = 0;
                    for p in parts {
                        let c = self.nodes[p.idx].value.cols();
                        let mut d = Vec::with_capacity(n * c);
                        for r in 0..n {
                            d.extend_from_slice(&g[r * total + offset..r * total + offset + c]);
                        }
                        accumulate(&mut adj, p.idx, d);
                        offset += c;
                    }
                }
                Op::SliceCols(a, start, len) => {
                    let src = &self.nodes[a.idx].value;
                    let c = src.cols();
                    let mut d = vec![0.0; src.len()];
                    for r in 0..src.rows() {
                        d[r * c + start..r * c + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                    }
                    accumulate(&mut adj, a.idx, d);
                }
                Op::Reshape(a, _) => accumulate(&mut adj, a.idx, g),
                Op::RowSoftmax(a) => {
                    let c = y.cols();
                    let mut d = vec![0.0; y.len()];
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = &g[r * c..(r + 1) * c];
                        let inner = dot(gr, yr);
                        for j in 0..c {
                            d[r * c + j] = yr[j] * (gr[j] - inner);
                        }
                    }
                    accumulate(&mut adj, a.idx, d);
                }
                Op::RowDot(a, b) => {
                    let (ta, tb) = (&self.nodes[a.idx].value, &self.nodes[b.idx].value);
                    let c = ta.cols();
                    let mut da = vec![0.0; ta.len()];
                    let mut db = vec![0.0; tb.len()];
                    for r in 0..ta.rows() {
                        for j in 0..c {
                            da[r * c + j] = g[r] * tb.row(r)[j];
                            db[r * c + j] = g[r] * ta.row(r)[j];
                        }
                    }
                    accumulate(&mut adj, a.idx, da);
                    accumulate(&mut adj, b.idx, db);
                }
                Op::RowCosine(a, b) => {
                    let (ta, tb) = (&self.nodes[a.idx].value, &self.nodes[b.idx].value);
                    let c = ta.cols();
                    let mut da = vec![0.0; ta.len()];
                    let mut db = vec![0.0; tb.len()];
                    for r in 0..ta.rows() {
                        let (x, z) = (ta.row(r), tb.row(r));
                        let (cos, nx, nz) = row_cos(x, z);
                        if nx == 0.0 || nz == 0.0 {
                            continue;
                        }
                        for j in 0..c {
                            da[r * c + j] = g[r] * (z[j] / (nx * nz) - cos * x[j] / (nx * nx));
                            db[r * c + j] = g[r] * (x[j] / (nx * nz) - cos * z[j] / (nz * nz));
                        }
                    }
                    accumulate(&mut adj, a.idx, da);
                    accumulate(&mut adj, b.idx, db);
                }
                Op::NormalizeRows(a) => {
                    let ta = &self.nodes[a.idx].value;
                    let c = ta.cols();
                    let mut d = vec![0.0; ta.len()];
                    for r in 0..ta.rows() {
                        let x = ta.row(r);
                        let gr = &g[r * c..(r + 1) * c];
                        let n = dot(x, x).sqrt();
                        let den = n + NORM_EPS;
                        let proj = if n > 0.0 { dot(x, gr) / (den * den * n) } else { 0.0 };
                        for j in 0..c {
                            d[r * c + j] = gr[j] / den - x[j] * proj;
                        }
                    }
                    accumulate(&mut adj, a.idx, d);
                }
                Op::GroupDot(q, k, grp) => {
                    let (tq, tk) = (&self.nodes[q.idx].value, &self.nodes[k.idx].value);
                    let dcols = tq.cols();
                    let mut dq = vec![0.0; tq.len()];
                    let mut dk = vec![0.0; tk.len()];
                    for i in 0..tq.rows() {
                        for j in 0..*grp {
                            let gij = g[i * grp + j];
                            let krow = tk.row(i * grp + j);
                            let qrow = tq.row(i);
                            let base = (i * grp + j) * dcols;
                            for t in 0..dcols {
                                dq[i * dcols + t] += gij * krow[t];
                                dk[base + t] = gij * qrow[t];
                            }
                        }
                    }
                    accumulate(&mut adj, q.idx, dq);
                    accumulate(&mut adj, k.idx, dk);
                }
                Op::GroupWeightedSum(w, v, grp) => {
                    let (tw, tv) = (&self.nodes[w.idx].value, &self.nodes[v.idx].value);
                    let dcols = tv.cols();
                    let mut dw = vec![0.0; tw.len()];
                    let mut dv = vec![0.0; tv.len()];
                    for i in 0..tw.rows() {
                        let gi = &g[i * dcols..(i + 1) * dcols];
                        for j in 0..*grp {
                            let vrow = tv.row(i * grp + j);
                            dw[i * grp + j] = dot(gi, vrow);
                            let wij = tw.row(i)[j];
                            let base = (i * grp + j) * dcols;
                            for t in 0..dcols {
                                dv[base + t] = wij * gi[t];
                            }
                        }
                    }
                    accumulate(&mut adj, w.idx, dw);
                    accumulate(&mut adj, v.idx, dv);
                }
                Op::MaskedRowLogSumExp(a, mask) => {
                    let ta = &self.nodes[a.idx].value;
                    let c = ta.cols();
                    let mut d = vec![0.0; ta.len()];
                    for r in 0..ta.rows() {
                        let lse = y.data()[r];
                        for j in 0..c {
                            if mask[r * c + j] {
                                d[r * c + j] = g[r] * (ta.row(r)[j] - lse).exp();
                            }
                        }
                    }
                    accumulate(&mut adj, a.idx, d);
                }
                Op::RowMean(a) => {
                    let ta = &self.nodes[a.idx].value;
                    let c = ta.cols();
                    let mut d = vec![0.0; ta.len()];
                    for r in 0..ta.rows() {
                        for j in 0..c {
                            d[r * c + j] = g[r] / c as f64;
                        }
                    }
                    accumulate(&mut adj, a.idx, d);
                }
                Op::Mean(a) => {
                    let n = self.nodes[a.idx].value.len();
                    accumulate(&mut adj, a.idx, vec![g[0] / n as f64; n]);
                }
                Op::Sum(a) => {
                    let n = self.nodes[a.idx].value.len();
                    accumulate(&mut adj, a.idx, vec![g[0]; n]);
                }
            }
        }

        let mut params = BTreeMap::new();
        let mut reached = BTreeSet::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Param(name) = &node.op {
                let grad = match adj.get_mut(idx).and_then(Option::take) {
                    Some(d) => {
                        reached.insert(name.clone());
                        Tensor::new(node.value.shape().to_vec(), d).expect("adjoint shape")
                    }
                    None => Tensor::zeros(node.value.shape()),
                };
                match params.get_mut(name) {
                    None => {
                        params.insert(name.clone(), grad);
                    }
                    Some(existing) => {
                        let e: &mut Tensor = existing;
                        for (x, y) in e.data_mut().iter_mut().zip(grad.data()) {
                            *x += y;
                        }
                    }
                }
            }
        }
        Ok(Gradients { params, reached })
    }
}

fn unary(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = a.data().iter().map(|&v| f(v)).collect();
    mat(a.rows(), a.cols(), data)
}

fn accumulate(adj: &mut [Option<Vec<f64>>], idx: usize, d: Vec<f64>) {
    match &mut adj[idx] {
        Some(existing) => {
            for (x, y) in existing.iter_mut().zip(d) {
                *x += y;
            }
        }
        slot @ None => *slot = Some(d),
    }
}

fn seq_sum(xs: &[f64]) -> f64 {
    let mut acc = 0.0;
    for x in xs {
        acc += x;
    }
    acc
}

/// (cosine, |x|, |z|); cosine is 0 when either norm is 0.
fn row_cos(x: &[f64], z: &[f64]) -> (f64, f64, f64) {
    let nx = dot(x, x).sqrt();
    let nz = dot(z, z).sqrt();
    if nx == 0.0 || nz == 0.0 {
        log::warn!("cosine with a zero-norm row; contributing 0");
        return (0.0, nx, nz);
    }
    (dot(x, z) / (nx * nz), nx, nz)
}

fn masked_lse(row: &[f64], mask: &[bool]) -> Result<f64, NumericsError> {
    let max = row
        .iter()
        .zip(mask)
        .filter(|(_, m)| **m)
        .map(|(v, _)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(NumericsError::EmptyInput("masked_row_logsumexp"));
    }
    let mut s = 0.0;
    for (v, m) in row.iter().zip(mask) {
        if *m {
            s += (v - max).exp();
        }
    }
    Ok(max + s.ln())
}
