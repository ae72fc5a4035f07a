//! Tape-based reverse-mode differentiation over small dense tensors.
//!
//! Every primitive appends a node holding its output value and the indices of
//! its inputs. Nodes are only ever appended, so inputs always precede their
//! consumers and a single reverse sweep visits the graph in topological order.
//! Parameter leaves borrow their values from the [`ParamSet`] instead of
//! copying them, which keeps per-step tapes cheap.

use super::{Gradients, ParamId, ParamSet, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Linear { x: Var, w: Var, b: Var },
    Silu(Var),
    Tanh(Var),
    Exp(Var),
    Expm1(Var),
    Square(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Concat(Vec<Var>),
    Slice { src: Var, start: usize },
    Row { table: Var, index: usize },
    Clamp { src: Var, lo: f64, hi: f64 },
}

#[derive(Debug)]
struct Node {
    // `None` only for parameter leaves, whose value lives in the ParamSet.
    value: Option<Tensor>,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

/// Result of a reverse sweep: parameter gradients plus the adjoint of every
/// leaf that was reached.
#[derive(Debug)]
pub struct Adjoints {
    pub params: Gradients,
    leaves: Vec<Option<Tensor>>,
}

impl Adjoints {
    /// Adjoint of a leaf created with [`Tape::leaf`]; `None` if the leaf was
    /// unreachable from the seeds.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(v.0).and_then(|a| a.as_ref())
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn silu_scalar(x: f64) -> f64 {
    x * sigmoid(x)
}

/// `W·x + b` with `W` stored row-major as `[out, in]`.
pub(crate) fn linear_kernel(x: &[f64], w: &[f64], b: &[f64], out: &mut [f64]) {
    let width = x.len();
    for (o, y) in out.iter_mut().enumerate() {
        let row = &w[o * width..(o + 1) * width];
        let mut acc = b[o];
        for (wi, xi) in row.iter().zip(x) {
            acc += wi * xi;
        }
        *y = acc;
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop all recorded nodes, keeping the parameter binding.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.param_vars.iter_mut().for_each(|v| *v = None);
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::numerical(format!(
                "non-finite output from {}",
                op_name(&op)
            )));
        }
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant input. Its adjoint is reported by [`Adjoints::wrt`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf bound to a parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.value(x), self.value(w), self.value(b));
        if xs.shape().len() != 1 || ws.shape().len() != 2 || ws.shape()[1] != xs.len() {
            return Err(Error::Dimension {
                op: "linear",
                left: ws.shape().to_vec(),
                right: xs.shape().to_vec(),
            });
        }
        if bs.shape() != [ws.shape()[0]] {
            return Err(Error::Dimension {
                op: "linear bias",
                left: ws.shape().to_vec(),
                right: bs.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; ws.shape()[0]];
        linear_kernel(xs.data(), ws.data(), bs.data(), &mut out);
        self.push(Tensor::vector(out), Op::Linear { x, w, b })
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(silu_scalar);
        self.push(out, Op::Silu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::tanh);
        self.push(out, Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::exp);
        self.push(out, Op::Exp(x))
    }

    /// `exp(x) - 1`, accurate near zero.
    pub fn expm1(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::exp_m1);
        self.push(out, Op::Expm1(x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v * v);
        self.push(out, Op::Square(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).same_shape(self.value(b), "add")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).same_shape(self.value(b), "sub")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).same_shape(self.value(b), "mul")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v * factor);
        self.push(out, Op::Scale(a, factor))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).data().iter().sum::<f64>();
        self.push(Tensor::scalar(total), Op::Sum(a))
    }

    /// Concatenate 1-D tensors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let mut out = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.shape().len() != 1 {
                return Err(Error::Dimension {
                    op: "concat",
                    left: t.shape().to_vec(),
                    right: vec![],
                });
            }
            out.extend_from_slice(t.data());
        }
        self.push(Tensor::vector(out), Op::Concat(parts.to_vec()))
    }

    /// Contiguous sub-vector `[start, start + len)` of a 1-D tensor.
    pub fn slice(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(src);
        if t.shape().len() != 1 || start + len > t.len() {
            return Err(Error::Dimension {
                op: "slice",
                left: t.shape().to_vec(),
                right: vec![start, len],
            });
        }
        let out = Tensor::vector(t.data()[start..start + len].to_vec());
        self.push(out, Op::Slice { src, start })
    }

    /// Row `index` of a 2-D tensor.
    pub fn row(&mut self, table: Var, index: usize) -> Result<Var> {
        let out = self.value(table).row(index)?;
        self.push(out, Op::Row { table, index })
    }

    /// Elementwise clamp to `[lo, hi]`; gradient passes only inside the range.
    pub fn clamp(&mut self, src: Var, lo: f64, hi: f64) -> Result<Var> {
        let out = self.value(src).map(|v| v.clamp(lo, hi));
        self.push(out, Op::Clamp { src, lo, hi })
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let value = self.value(loss);
        if !value.is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                value.shape()
            )));
        }
        Ok(self.backward_seeded(&[(loss, Tensor::filled(value.shape(), 1.0))])?.params)
    }

    /// Reverse sweep with explicit output adjoints. Seeds on the same node add.
    pub fn backward_seeded(&self, seeds: &[(Var, Tensor)]) -> Result<Adjoints> {
        let mut adj: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (v, seed) in seeds {
            self.value(*v).same_shape(seed, "backward seed")?;
            accumulate(&mut adj, *v, seed);
        }
        let mut grads = Gradients::zeros_like(self.params);
        let mut leaves: Vec<Option<Tensor>> = vec![None; self.nodes.len()];

        for i in (0..self.nodes.len()).rev() {
            let Some(g) = adj[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => leaves[i] = Some(g),
                Op::Param(id) => grads.get_mut(*id).add_assign(&g),
                Op::Linear { x, w, b } => {
                    let xv = self.value(*x).data();
                    let wv = self.value(*w);
                    let width = xv.len();
                    let dy = g.data();
                    {
                        let dx = adj_mut(&mut adj, *x, &[width]);
                        let dxd = dx.data_mut();
                        for (o, &d) in dy.iter().enumerate() {
                            let row = &wv.data()[o * width..(o + 1) * width];
                            for (acc, wi) in dxd.iter_mut().zip(row) {
                                *acc += wi * d;
                            }
                        }
                    }
                    {
                        let dw = adj_mut(&mut adj, *w, wv.shape());
                        let dwd = dw.data_mut();
                        for (o, &d) in dy.iter().enumerate() {
                            let row = &mut dwd[o * width..(o + 1) * width];
                            for (acc, xi) in row.iter_mut().zip(xv) {
                                *acc += d * xi;
                            }
                        }
                    }
                    adj_mut(&mut adj, *b, g.shape()).add_assign(&g);
                }
                Op::Silu(x) => {
                    let d = self.value(*x).zip_map(&g, |xv, gv| {
                        let s = sigmoid(xv);
                        gv * s * (1.0 + xv * (1.0 - s))
                    });
                    accumulate(&mut adj, *x, &d);
                }
                Op::Tanh(x) => {
                    let y = self.nodes[i].value.as_ref().expect("tanh output");
                    let d = y.zip_map(&g, |yv, gv| gv * (1.0 - yv * yv));
                    accumulate(&mut adj, *x, &d);
                }
                Op::Exp(x) => {
                    let y = self.nodes[i].value.as_ref().expect("exp output");
                    let d = y.zip_map(&g, |yv, gv| gv * yv);
                    accumulate(&mut adj, *x, &d);
                }
                Op::Expm1(x) => {
                    let y = self.nodes[i].value.as_ref().expect("expm1 output");
                    let d = y.zip_map(&g, |yv, gv| gv * (yv + 1.0));
                    accumulate(&mut adj, *x, &d);
                }
                Op::Square(x) => {
                    let d = self.value(*x).zip_map(&g, |xv, gv| 2.0 * xv * gv);
                    accumulate(&mut adj, *x, &d);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *a, &g);
                    accumulate(&mut adj, *b, &g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj, *a, &g);
                    accumulate(&mut adj, *b, &g.map(|v| -v));
                }
                Op::Mul(a, b) => {
                    let da = self.value(*b).zip_map(&g, |bv, gv| bv * gv);
                    let db = self.value(*a).zip_map(&g, |av, gv| av * gv);
                    accumulate(&mut adj, *a, &da);
                    accumulate(&mut adj, *b, &db);
                }
                Op::Scale(a, factor) => {
                    let f = *factor;
                    accumulate(&mut adj, *a, &g.map(|v| v * f));
                }
                Op::Sum(a) => {
                    let gv = g.data()[0];
                    let shape = self.value(*a).shape().to_vec();
                    accumulate(&mut adj, *a, &Tensor::filled(&shape, gv));
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.value(p).len();
                        let piece = Tensor::vector(g.data()[offset..offset + n].to_vec());
                        accumulate(&mut adj, p, &piece);
                        offset += n;
                    }
                }
                Op::Slice { src, start } => {
                    let shape = self.value(*src).shape().to_vec();
                    let dst = adj_mut(&mut adj, *src, &shape);
                    for (acc, gv) in dst.data_mut()[*start..].iter_mut().zip(g.data()) {
                        *acc += gv;
                    }
                }
                Op::Row { table, index } => {
                    let shape = self.value(*table).shape().to_vec();
                    let width = shape[1];
                    let dst = adj_mut(&mut adj, *table, &shape);
                    for (acc, gv) in dst.data_mut()[index * width..(index + 1) * width]
                        .iter_mut()
                        .zip(g.data())
                    {
                        *acc += gv;
                    }
                }
                Op::Clamp { src, lo, hi } => {
                    let (lo, hi) = (*lo, *hi);
                    let d = self
                        .value(*src)
                        .zip_map(&g, |xv, gv| if xv >= lo && xv <= hi { gv } else { 0.0 });
                    accumulate(&mut adj, *src, &d);
                }
            }
        }
        Ok(Adjoints {
            params: grads,
            leaves,
        })
    }
}

fn adj_mut<'a>(adj: &'a mut [Option<Tensor>], v: Var, shape: &[usize]) -> &'a mut Tensor {
    adj[v.0].get_or_insert_with(|| Tensor::zeros(shape))
}

fn accumulate(adj: &mut [Option<Tensor>], v: Var, contribution: &Tensor) {
    match &mut adj[v.0] {
        Some(t) => t.add_assign(contribution),
        slot @ None => *slot = Some(contribution.clone()),
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Param(_) => "param",
        Op::Linear { .. } => "linear",
        Op::Silu(_) => "silu",
        Op::Tanh(_) => "tanh",
        Op::Exp(_) => "exp",
        Op::Expm1(_) => "expm1",
        Op::Square(_) => "square",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::Sum(_) => "sum",
        Op::Concat(_) => "concat",
        Op::Slice { .. } => "slice",
        Op::Row { .. } => "row",
        Op::Clamp { .. } => "clamp",
    }
}
