//! Define-by-run reverse-mode tape.
//!
//! Every forward pass records onto a fresh [`Tape`]. Values are immutable once
//! recorded; [`Tape::backward`] walks the nodes in reverse insertion order,
//! which is a valid reverse topological order because inputs must exist
//! before the node that consumes them.

use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    index: usize,
    tape: u64,
}

impl Var {
    pub fn tape_id(&self) -> u64 {
        self.tape
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Unary {
    Elu,
    Sigmoid,
    Exp,
    Log,
    Square,
    Sqrt,
    Neg,
    Scale(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

enum Op {
    Constant,
    Leaf,
    Param(ParamId),
    MatMul(usize, usize),
    Binary(Binary, usize, usize),
    AddRow(usize, usize),
    Unary(Unary, usize),
    Sum(usize),
    ConcatCols(usize, usize),
    GatherSum {
        values: usize,
        pairs: Rc<[(usize, usize)]>,
        weights: Rc<[f64]>,
    },
    SoftmaxCrossEntropy {
        logits: usize,
        probs: Tensor,
        labels: Vec<usize>,
        mask: Vec<bool>,
        count: usize,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Tensor,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    PairScalar {
        rows: usize,
        params: usize,
        pairs: Rc<[(usize, usize)]>,
        left: Tensor,
        right: Tensor,
        param_grads: Tensor,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Gradients produced by one backward pass, indexed by tape node.
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
    params: Vec<(usize, ParamId)>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(var.index).and_then(Option::as_ref)
    }

    /// Accumulate parameter gradients into the store. Parameters recorded on
    /// the tape but unreachable from the root receive a zero gradient.
    pub fn write_params(&self, store: &mut ParamStore) {
        for &(index, id) in &self.params {
            let shape = store.value(id).shape();
            let g = self.grads[index]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(shape.0, shape.1));
            store.accumulate_grad(id, &g);
        }
    }
}

pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        debug_assert_eq!(var.tape, self.id, "var from another tape");
        &self.nodes[var.index].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.index].requires_grad
    }

    fn check(&self, var: Var) -> Result<usize> {
        if var.tape != self.id {
            return Err(Error::StaleTape {
                expected: self.id,
                found: var.tape,
            });
        }
        Ok(var.index)
    }

    fn push(&mut self, name: &str, value: Tensor, requires_grad: bool, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var {
            index: self.nodes.len() - 1,
            tape: self.id,
        })
    }

    fn rg(&self, index: usize) -> bool {
        self.nodes[index].requires_grad
    }

    /// Record a value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push("constant", value, false, Op::Constant)
    }

    /// Record a free leaf whose gradient can be queried after backward.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        self.push("leaf", value, true, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        self.push("param", store.value(id).clone(), true, Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let value = self.nodes[ia].value.matmul(&self.nodes[ib].value)?;
        let rg = self.rg(ia) || self.rg(ib);
        self.push("matmul", value, rg, Op::MatMul(ia, ib))
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let value = if va.shape() == vb.shape() {
            let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::from_vec(va.rows(), va.cols(), data)?
        } else if vb.shape() == (1, 1) {
            let y = vb.item();
            va.map(|x| f(x, y))
        } else if va.shape() == (1, 1) {
            let x = va.item();
            vb.map(|y| f(x, y))
        } else {
            return Err(Error::Dimension(format!(
                "{kind:?} of {:?} and {:?}: only equal shapes or scalar operands broadcast",
                va.shape(),
                vb.shape()
            )));
        };
        let rg = self.rg(ia) || self.rg(ib);
        self.push("elementwise", value, rg, Op::Binary(kind, ia, ib))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    /// Add a `1 x cols` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ia, ir) = (self.check(a)?, self.check(row)?);
        let (va, vr) = (&self.nodes[ia].value, &self.nodes[ir].value);
        if vr.rows() != 1 || vr.cols() != va.cols() {
            return Err(Error::Dimension(format!(
                "row vector {:?} does not match {:?}",
                vr.shape(),
                va.shape()
            )));
        }
        let mut value = va.clone();
        for r in 0..value.rows() {
            for (x, b) in value.row_mut(r).iter_mut().zip(vr.data()) {
                *x += b;
            }
        }
        let rg = self.rg(ia) || self.rg(ir);
        self.push("add_row", value, rg, Op::AddRow(ia, ir))
    }

    pub fn unary(&mut self, kind: Unary, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let va = &self.nodes[ia].value;
        if matches!(kind, Unary::Log | Unary::Sqrt) {
            if let Some(bad) = va.data().iter().find(|&&x| x <= 0.0) {
                return Err(Error::Domain(format!("{kind:?} of non-positive input {bad}")));
            }
        }
        let value = va.map(|x| match kind {
            Unary::Elu => elu(x),
            Unary::Sigmoid => sigmoid(x),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Square => x * x,
            Unary::Sqrt => x.sqrt(),
            Unary::Neg => -x,
            Unary::Scale(s) => s * x,
        });
        let rg = self.rg(ia);
        self.push("elementwise", value, rg, Op::Unary(kind, ia))
    }

    pub fn elu(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Elu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Exp, a)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Neg, a)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary(Unary::Scale(s), a)
    }

    /// Sum of all entries, as a 1x1 tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let value = Tensor::scalar(self.nodes[ia].value.sum());
        let rg = self.rg(ia);
        self.push("sum", value, rg, Op::Sum(ia))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let value = self.nodes[ia].value.concat_cols(&self.nodes[ib].value)?;
        let rg = self.rg(ia) || self.rg(ib);
        self.push("concat_cols", value, rg, Op::ConcatCols(ia, ib))
    }

    /// `out[dst] += w * values[src]` for every `(src, dst)` pair, producing
    /// `out_rows` rows.
    pub fn gather_sum(
        &mut self,
        values: Var,
        pairs: Rc<[(usize, usize)]>,
        weights: Rc<[f64]>,
        out_rows: usize,
    ) -> Result<Var> {
        let iv = self.check(values)?;
        let v = &self.nodes[iv].value;
        if pairs.len() != weights.len() {
            return Err(Error::Dimension(format!(
                "{} pairs but {} weights",
                pairs.len(),
                weights.len()
            )));
        }
        let mut out = Tensor::zeros(out_rows, v.cols());
        for (&(src, dst), &w) in pairs.iter().zip(weights.iter()) {
            if src >= v.rows() || dst >= out_rows {
                return Err(Error::Index(format!(
                    "pair ({src}, {dst}) out of range for {} source rows and {out_rows} output rows",
                    v.rows()
                )));
            }
            let (s, o) = (v.row(src), out.row_mut(dst));
            for (o, &x) in o.iter_mut().zip(s) {
                *o += w * x;
            }
        }
        let rg = self.rg(iv);
        self.push(
            "gather_sum",
            out,
            rg,
            Op::GatherSum {
                values: iv,
                pairs,
                weights,
            },
        )
    }

    /// Message-passing aggregation over `(src -> dst)` edges on the same node
    /// set: `out[i] = sum_{(j -> i)} w_ji * values[j]`.
    pub fn rows_gather_sum(
        &mut self,
        values: Var,
        edges: Rc<[(usize, usize)]>,
        weights: Rc<[f64]>,
    ) -> Result<Var> {
        let rows = self.value(values).rows();
        self.gather_sum(values, edges, weights, rows)
    }

    /// Mean negative log-likelihood over the rows selected by `mask`.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
        mask: &[bool],
    ) -> Result<Var> {
        let il = self.check(logits)?;
        let z = &self.nodes[il].value;
        if labels.len() != z.rows() || mask.len() != z.rows() {
            return Err(Error::Dimension(format!(
                "{} labels / {} mask entries for {} logit rows",
                labels.len(),
                mask.len(),
                z.rows()
            )));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Value("cross-entropy over an empty mask".into()));
        }
        let mut probs = Tensor::zeros(z.rows(), z.cols());
        let mut loss = 0.0;
        for r in 0..z.rows() {
            if !mask[r] {
                continue;
            }
            if labels[r] >= z.cols() {
                return Err(Error::Index(format!(
                    "label {} at row {r} for {} classes",
                    labels[r],
                    z.cols()
                )));
            }
            let row = z.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (p, &x) in probs.row_mut(r).iter_mut().zip(row) {
                *p = (x - max).exp();
                denom += *p;
            }
            for p in probs.row_mut(r) {
                *p /= denom;
            }
            loss -= row[labels[r]] - max - denom.ln();
        }
        let value = Tensor::scalar(loss / count as f64);
        let rg = self.rg(il);
        self.push(
            "softmax_cross_entropy",
            value,
            rg,
            Op::SoftmaxCrossEntropy {
                logits: il,
                probs,
                labels: labels.to_vec(),
                mask: mask.to_vec(),
                count,
            },
        )
    }

    /// Per-column standardisation with the batch's own statistics, followed
    /// by `gamma * xhat + beta`.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let ix = self.check(x)?;
        let v = &self.nodes[ix].value;
        let (n, c) = v.shape();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for r in 0..n {
            for (m, &x) in mean.iter_mut().zip(v.row(r)) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        for r in 0..n {
            for ((s, &x), &m) in var.iter_mut().zip(v.row(r)).zip(&mean) {
                *s += (x - m) * (x - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= n as f64);
        self.batch_norm_impl(x, gamma, beta, &mean, &var, eps, true)
    }

    /// Standardisation with fixed (running) statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm_fixed(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        self.batch_norm_impl(x, gamma, beta, mean, var, eps, false)
    }

    #[allow(clippy::too_many_arguments)]
    fn batch_norm_impl(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
        batch_stats: bool,
    ) -> Result<Var> {
        let (ix, ig, ib) = (self.check(x)?, self.check(gamma)?, self.check(beta)?);
        let v = &self.nodes[ix].value;
        let (n, c) = v.shape();
        let (g, b) = (&self.nodes[ig].value, &self.nodes[ib].value);
        if g.shape() != (1, c) || b.shape() != (1, c) || mean.len() != c || var.len() != c {
            return Err(Error::Dimension(format!(
                "batch norm over {c} features with gamma {:?}, beta {:?}",
                g.shape(),
                b.shape()
            )));
        }
        let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s + eps).sqrt()).collect();
        let mut xhat = Tensor::zeros(n, c);
        let mut out = Tensor::zeros(n, c);
        for r in 0..n {
            for j in 0..c {
                let h = (v.get(r, j) - mean[j]) * inv_std[j];
                xhat.set(r, j, h);
                out.set(r, j, g.data()[j] * h + b.data()[j]);
            }
        }
        let rg = self.rg(ix) || self.rg(ig) || self.rg(ib);
        self.push(
            "batch_norm",
            out,
            rg,
            Op::BatchNorm {
                x: ix,
                gamma: ig,
                beta: ib,
                xhat,
                inv_std,
                batch_stats,
            },
        )
    }

    /// Record a per-pair scalar function `out[e] = f(rows[a_e], rows[b_e]; params)`
    /// whose local gradients have already been evaluated by the caller:
    /// `left[e]` = df/d rows[a_e], `right[e]` = df/d rows[b_e],
    /// `param_grads[e]` = df/d params.
    #[allow(clippy::too_many_arguments)]
    pub fn pair_scalar(
        &mut self,
        rows: Var,
        params: Var,
        pairs: Rc<[(usize, usize)]>,
        values: Vec<f64>,
        left: Tensor,
        right: Tensor,
        param_grads: Tensor,
    ) -> Result<Var> {
        let (ir, ip) = (self.check(rows)?, self.check(params)?);
        let (vr, vp) = (&self.nodes[ir].value, &self.nodes[ip].value);
        let e = pairs.len();
        if values.len() != e
            || left.shape() != (e, vr.cols())
            || right.shape() != (e, vr.cols())
            || param_grads.shape() != (e, vp.len())
        {
            return Err(Error::Dimension(
                "pair_scalar local gradients do not match pair count or widths".into(),
            ));
        }
        if let Some(&(a, b)) = pairs.iter().find(|&&(a, b)| a >= vr.rows() || b >= vr.rows()) {
            return Err(Error::Index(format!(
                "pair ({a}, {b}) out of range for {} rows",
                vr.rows()
            )));
        }
        let value = Tensor::from_vec(e, 1, values)?;
        let rg = self.rg(ir) || self.rg(ip);
        self.push(
            "pair_scalar",
            value,
            rg,
            Op::PairScalar {
                rows: ir,
                params: ip,
                pairs,
                left,
                right,
                param_grads,
            },
        )
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let ir = self.check(root)?;
        if self.nodes[ir].value.shape() != (1, 1) {
            return Err(Error::Dimension(format!(
                "backward root must be 1x1, got {:?}",
                self.nodes[ir].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[ir] = Some(Tensor::scalar(1.0));

        for index in (0..=ir).rev() {
            let Some(g) = grads[index].take() else {
                continue;
            };
            let node = &self.nodes[index];
            if node.requires_grad {
                self.propagate(index, &g, &mut grads)?;
            }
            grads[index] = Some(g);
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((i, id)),
                _ => None,
            })
            .collect();
        Ok(Gradients {
            tape: self.id,
            grads,
            params,
        })
    }

    fn propagate(&self, index: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[index];
        let mut acc = |target: usize, delta: Tensor| {
            if !self.nodes[target].requires_grad {
                return;
            }
            match &mut grads[target] {
                Some(existing) => existing.add_assign(&delta),
                slot => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Constant | Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                if self.rg(*a) {
                    acc(*a, g.matmul(&vb.transpose())?);
                }
                if self.rg(*b) {
                    acc(*b, transpose_matmul(va, g));
                }
            }
            Op::Binary(kind, a, b) => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                // local derivative wrt each operand, broadcast to the output shape
                let (da, db): (Tensor, Tensor) = match kind {
                    Binary::Add => (g.clone(), g.clone()),
                    Binary::Sub => (g.clone(), g.map(|x| -x)),
                    Binary::Mul => (
                        hadamard_broadcast(g, vb),
                        hadamard_broadcast(g, va),
                    ),
                };
                acc(*a, reduce_to(da, va.shape()));
                acc(*b, reduce_to(db, vb.shape()));
            }
            Op::AddRow(a, r) => {
                acc(*a, g.clone());
                let mut dr = Tensor::zeros(1, g.cols());
                for row in 0..g.rows() {
                    for (d, &x) in dr.data_mut().iter_mut().zip(g.row(row)) {
                        *d += x;
                    }
                }
                acc(*r, dr);
            }
            Op::Unary(kind, a) => {
                let x = &self.nodes[*a].value;
                let y = &node.value;
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .zip(y.data())
                    .map(|((&g, &x), &y)| {
                        g * match kind {
                            Unary::Elu => {
                                if x > 0.0 {
                                    1.0
                                } else {
                                    y + 1.0
                                }
                            }
                            Unary::Sigmoid => y * (1.0 - y),
                            Unary::Exp => y,
                            Unary::Log => 1.0 / x,
                            Unary::Square => 2.0 * x,
                            Unary::Sqrt => 0.5 / y,
                            Unary::Neg => -1.0,
                            Unary::Scale(s) => *s,
                        }
                    })
                    .collect();
                acc(*a, Tensor::from_vec(x.rows(), x.cols(), data)?);
            }
            Op::Sum(a) => {
                let (r, c) = self.nodes[*a].value.shape();
                acc(*a, Tensor::full(r, c, g.item()));
            }
            Op::ConcatCols(a, b) => {
                let (ca, cb) = (self.nodes[*a].value.cols(), self.nodes[*b].value.cols());
                let mut da = Tensor::zeros(g.rows(), ca);
                let mut db = Tensor::zeros(g.rows(), cb);
                for r in 0..g.rows() {
                    da.row_mut(r).copy_from_slice(&g.row(r)[..ca]);
                    db.row_mut(r).copy_from_slice(&g.row(r)[ca..]);
                }
                acc(*a, da);
                acc(*b, db);
            }
            Op::GatherSum {
                values,
                pairs,
                weights,
            } => {
                let (r, c) = self.nodes[*values].value.shape();
                let mut dv = Tensor::zeros(r, c);
                for (&(src, dst), &w) in pairs.iter().zip(weights.iter()) {
                    let go = g.row(dst);
                    for (d, &x) in dv.row_mut(src).iter_mut().zip(go) {
                        *d += w * x;
                    }
                }
                acc(*values, dv);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels,
                mask,
                count,
            } => {
                let scale = g.item() / *count as f64;
                let mut dz = Tensor::zeros(probs.rows(), probs.cols());
                for r in 0..probs.rows() {
                    if !mask[r] {
                        continue;
                    }
                    for (c, d) in dz.row_mut(r).iter_mut().enumerate() {
                        let onehot = if c == labels[r] { 1.0 } else { 0.0 };
                        *d = scale * (probs.get(r, c) - onehot);
                    }
                }
                acc(*logits, dz);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (n, c) = xhat.shape();
                let gam = &self.nodes[*gamma].value;
                let mut dgamma = Tensor::zeros(1, c);
                let mut dbeta = Tensor::zeros(1, c);
                let mut sum_dxhat = vec![0.0; c];
                let mut sum_dxhat_xhat = vec![0.0; c];
                for r in 0..n {
                    for j in 0..c {
                        let gy = g.get(r, j);
                        let h = xhat.get(r, j);
                        dgamma.data_mut()[j] += gy * h;
                        dbeta.data_mut()[j] += gy;
                        let dh = gy * gam.data()[j];
                        sum_dxhat[j] += dh;
                        sum_dxhat_xhat[j] += dh * h;
                    }
                }
                let mut dx = Tensor::zeros(n, c);
                let nf = n as f64;
                for r in 0..n {
                    for j in 0..c {
                        let dh = g.get(r, j) * gam.data()[j];
                        let v = if *batch_stats {
                            inv_std[j] / nf
                                * (nf * dh - sum_dxhat[j] - xhat.get(r, j) * sum_dxhat_xhat[j])
                        } else {
                            dh * inv_std[j]
                        };
                        dx.set(r, j, v);
                    }
                }
                acc(*x, dx);
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            Op::PairScalar {
                rows,
                params,
                pairs,
                left,
                right,
                param_grads,
            } => {
                let (r, c) = self.nodes[*rows].value.shape();
                let mut dr = Tensor::zeros(r, c);
                let mut dp = Tensor::zeros(1, param_grads.cols());
                for (e, &(a, b)) in pairs.iter().enumerate() {
                    let ge = g.get(e, 0);
                    if ge == 0.0 {
                        continue;
                    }
                    for (d, &l) in dr.row_mut(a).iter_mut().zip(left.row(e)) {
                        *d += ge * l;
                    }
                    for (d, &l) in dr.row_mut(b).iter_mut().zip(right.row(e)) {
                        *d += ge * l;
                    }
                    for (d, &l) in dp.data_mut().iter_mut().zip(param_grads.row(e)) {
                        *d += ge * l;
                    }
                }
                let shape = self.nodes[*params].value.shape();
                acc(*rows, dr);
                acc(*params, Tensor::from_vec(shape.0, shape.1, dp.into_data())?);
            }
        }
        Ok(())
    }
}

pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
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

/// `aᵀ · g` without materialising the transpose; zero entries of `a` skipped.
fn transpose_matmul(a: &Tensor, g: &Tensor) -> Tensor {
    let n = g.cols();
    let mut out = Tensor::zeros(a.cols(), n);
    for i in 0..a.rows() {
        let g_row = g.row(i);
        for (k, &x) in a.row(i).iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            for (o, &gv) in out.row_mut(k).iter_mut().zip(g_row) {
                *o += x * gv;
            }
        }
    }
    out
}

fn hadamard_broadcast(g: &Tensor, other: &Tensor) -> Tensor {
    if other.shape() == (1, 1) {
        let s = other.item();
        g.map(|x| x * s)
    } else {
        let data = g.data().iter().zip(other.data()).map(|(a, b)| a * b).collect();
        Tensor::from_vec(g.rows(), g.cols(), data).expect("same shape")
    }
}

fn reduce_to(t: Tensor, shape: (usize, usize)) -> Tensor {
    if t.shape() == shape {
        t
    } else {
        Tensor::scalar(t.sum())
    }
}
