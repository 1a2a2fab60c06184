use std::cell::RefCell;

use super::tensor::{matmul, transpose, Tensor};
use crate::error::{Error, Result};

/// Rows with norm at or below this are rejected by cosine-based ops.
pub const MIN_ROW_NORM: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

/// How the two operands of a binary op line up.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    ScalarLhs,
    ScalarRhs,
    /// lhs is a row vector repeated over the rows of rhs
    RowLhs,
    RowRhs,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize, n: usize, k: usize, m: usize },
    Transpose { a: usize, r: usize, c: usize },
    Binary { kind: BinaryKind, a: usize, b: usize, bcast: Broadcast },
    Relu { a: usize },
    Exp { a: usize },
    Log { a: usize },
    Scale { a: usize, c: f64 },
    Sum { a: usize },
    SumRows { a: usize, r: usize, c: usize },
    NormalizeRows { a: usize, c: usize, norms: Vec<f64> },
    ColumnNormSum { a: usize, r: usize, c: usize, norms: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Define-by-run Wengert list. Nodes are appended in evaluation order, so the
/// node vector is already topologically sorted.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
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

    /// Records a leaf; it receives gradients iff `value.requires_grad()`.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&self, mut value: Tensor) -> Var<'_> {
        value.set_requires_grad(false);
        self.push(value, Op::Leaf)
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push_checked(&self, value: Tensor, op: Op, name: &'static str) -> Result<Var<'_>> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name));
        }
        Ok(self.push(value, op))
    }

    fn with_value<R>(&self, id: usize, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.nodes.borrow()[id].value)
    }

    /// Accumulated gradient of a leaf, if it participates in differentiation.
    pub fn grad(&self, v: Var<'_>) -> Option<Vec<f64>> {
        self.nodes.borrow()[v.id].value.grad().map(<[f64]>::to_vec)
    }

    pub fn zero_grad(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.value.zero_grad();
        }
    }

    /// Reverse pass from a scalar `loss`. Each recorded op is visited once, in
    /// reverse order; leaf gradients accumulate across calls.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Contract("loss belongs to a different tape".into()));
        }
        let mut nodes = self.nodes.borrow_mut();
        if !nodes[loss.id].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::MatMul { a, b, n, k, m } => {
                    let (n, k, m) = (*n, *k, *m);
                    let av = nodes[*a].value.data();
                    let bv = nodes[*b].value.data();
                    // dA = G·Bᵀ, dB = Aᵀ·G
                    let da = matmul(&g, &transpose(bv, k, m), n, m, k);
                    let db = matmul(&transpose(av, n, k), &g, k, n, m);
                    add_into(&mut grads, *a, da);
                    add_into(&mut grads, *b, db);
                }
                Op::Transpose { a, r, c } => {
                    add_into(&mut grads, *a, transpose(&g, *c, *r));
                }
                Op::Binary { kind, a, b, bcast } => {
                    let av = nodes[*a].value.data();
                    let bv = nodes[*b].value.data();
                    let (ga, gb) = binary_backward(*kind, *bcast, av, bv, &g);
                    add_into(&mut grads, *a, ga);
                    add_into(&mut grads, *b, gb);
                }
                Op::Relu { a } => {
                    let av = nodes[*a].value.data();
                    let ga = g
                        .iter()
                        .zip(av)
                        .map(|(gi, x)| if *x > 0.0 { *gi } else { 0.0 })
                        .collect();
                    add_into(&mut grads, *a, ga);
                }
                Op::Exp { a } => {
                    let out = node.value.data();
                    let ga = g.iter().zip(out).map(|(gi, y)| gi * y).collect();
                    add_into(&mut grads, *a, ga);
                }
                Op::Log { a } => {
                    let av = nodes[*a].value.data();
                    let ga = g.iter().zip(av).map(|(gi, x)| gi / x).collect();
                    add_into(&mut grads, *a, ga);
                }
                Op::Scale { a, c } => {
                    add_into(&mut grads, *a, g.iter().map(|gi| gi * c).collect());
                }
                Op::Sum { a } => {
                    let n = nodes[*a].value.len();
                    add_into(&mut grads, *a, vec![g[0]; n]);
                }
                Op::SumRows { a, r, c } => {
                    let mut ga = vec![0.0; r * c];
                    for i in 0..*r {
                        ga[i * c..(i + 1) * c].iter_mut().for_each(|v| *v = g[i]);
                    }
                    add_into(&mut grads, *a, ga);
                }
                Op::NormalizeRows { a, c, norms } => {
                    // y = x/‖x‖  ⇒  dx = (g − y·(yᵀg)) / ‖x‖
                    let y = node.value.data();
                    let mut ga = vec![0.0; y.len()];
                    for (i, norm) in norms.iter().enumerate() {
                        let span = i * c..(i + 1) * c;
                        let yi = &y[span.clone()];
                        let gi = &g[span.clone()];
                        let dot: f64 = yi.iter().zip(gi).map(|(p, q)| p * q).sum();
                        for ((o, yv), gv) in ga[span].iter_mut().zip(yi).zip(gi) {
                            *o = (gv - yv * dot) / norm;
                        }
                    }
                    add_into(&mut grads, *a, ga);
                }
                Op::ColumnNormSum { a, r, c, norms } => {
                    let w = nodes[*a].value.data();
                    let mut ga = vec![0.0; r * c];
                    for i in 0..*r {
                        for j in 0..*c {
                            if norms[j] > 0.0 {
                                ga[i * c + j] = g[0] * w[i * c + j] / norms[j];
                            }
                        }
                    }
                    add_into(&mut grads, *a, ga);
                }
            }
        }

        for (id, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                if matches!(nodes[id].op, Op::Leaf) {
                    nodes[id].value.accumulate_grad(&g);
                }
            }
        }
        Ok(())
    }
}

fn add_into(grads: &mut [Option<Vec<f64>>], id: usize, delta: Vec<f64>) {
    match &mut grads[id] {
        Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
        slot @ None => *slot = Some(delta),
    }
}

fn binary_backward(
    kind: BinaryKind,
    bcast: Broadcast,
    a: &[f64],
    b: &[f64],
    g: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    // Per-output-element partials, then reduce onto broadcast operands.
    let n = g.len();
    let lhs_at = |i: usize| index_operand(bcast, true, a.len(), i);
    let rhs_at = |i: usize| index_operand(bcast, false, b.len(), i);
    let mut ga = vec![0.0; a.len()];
    let mut gb = vec![0.0; b.len()];
    for i in 0..n {
        let (ia, ib) = (lhs_at(i), rhs_at(i));
        let (da, db) = match kind {
            BinaryKind::Add => (1.0, 1.0),
            BinaryKind::Sub => (1.0, -1.0),
            BinaryKind::Mul => (b[ib], a[ia]),
        };
        ga[ia] += g[i] * da;
        gb[ib] += g[i] * db;
    }
    (ga, gb)
}

fn index_operand(bcast: Broadcast, lhs: bool, len: usize, i: usize) -> usize {
    match (bcast, lhs) {
        (Broadcast::Same, _) => i,
        (Broadcast::ScalarLhs, true) | (Broadcast::ScalarRhs, false) => 0,
        (Broadcast::RowLhs, true) | (Broadcast::RowRhs, false) => i % len,
        _ => i,
    }
}

fn is_row_of(row: &Tensor, mat: &Tensor) -> bool {
    let Ok((_, c)) = mat.dims2() else { return false };
    match row.shape() {
        [k] => *k == c,
        [1, k] => *k == c,
        _ => false,
    }
}

impl<'t> Var<'t> {
    pub fn id(self) -> usize {
        self.id
    }

    pub fn tape(self) -> &'t Tape {
        self.tape
    }

    pub fn value(self) -> Tensor {
        self.tape.with_value(self.id, Tensor::clone)
    }

    pub fn shape(self) -> Vec<usize> {
        self.tape.with_value(self.id, |t| t.shape().to_vec())
    }

    pub fn item(self) -> f64 {
        self.tape.with_value(self.id, Tensor::item)
    }

    pub fn grad(self) -> Option<Vec<f64>> {
        self.tape.grad(self)
    }

    fn same_tape(self, other: Var<'t>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::Contract("operands recorded on different tapes".into()))
        }
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let nodes = self.tape.nodes.borrow();
        let (av, bv) = (&nodes[self.id].value, &nodes[other.id].value);
        let (n, k) = av.dims2()?;
        let (k2, m) = bv.dims2()?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul {n}×{k} · {k2}×{m}"
            )));
        }
        let out = Tensor::from_rows(n, m, matmul(av.data(), bv.data(), n, k, m))?;
        drop(nodes);
        self.tape.push_checked(
            out,
            Op::MatMul { a: self.id, b: other.id, n, k, m },
            "matmul",
        )
    }

    pub fn t(self) -> Result<Var<'t>> {
        let (out, r, c) = self.tape.with_value(self.id, |v| {
            let (r, c) = v.dims2()?;
            Ok::<_, Error>((v.transpose()?, r, c))
        })?;
        Ok(self.tape.push(out, Op::Transpose { a: self.id, r, c }))
    }

    fn binary(self, other: Var<'t>, kind: BinaryKind, name: &'static str) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let nodes = self.tape.nodes.borrow();
        let (av, bv) = (&nodes[self.id].value, &nodes[other.id].value);
        let bcast = if av.shape() == bv.shape() {
            Broadcast::Same
        } else if bv.is_scalar() {
            Broadcast::ScalarRhs
        } else if av.is_scalar() {
            Broadcast::ScalarLhs
        } else if is_row_of(bv, av) {
            Broadcast::RowRhs
        } else if is_row_of(av, bv) {
            Broadcast::RowLhs
        } else {
            return Err(Error::Dimension(format!(
                "{name}: shapes {:?} and {:?} do not broadcast",
                av.shape(),
                bv.shape()
            )));
        };
        let out_shape = match bcast {
            Broadcast::ScalarLhs | Broadcast::RowLhs => bv.shape().to_vec(),
            _ => av.shape().to_vec(),
        };
        let n: usize = out_shape.iter().product();
        let (a, b) = (av.data(), bv.data());
        let data = (0..n)
            .map(|i| {
                let x = a[index_operand(bcast, true, a.len(), i)];
                let y = b[index_operand(bcast, false, b.len(), i)];
                match kind {
                    BinaryKind::Add => x + y,
                    BinaryKind::Sub => x - y,
                    BinaryKind::Mul => x * y,
                }
            })
            .collect();
        let out = Tensor::new(out_shape, data)?;
        drop(nodes);
        self.tape.push_checked(
            out,
            Op::Binary { kind, a: self.id, b: other.id, bcast },
            name,
        )
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Add, "add")
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Sub, "sub")
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Mul, "mul")
    }

    fn unary(self, op: Op, name: &'static str, f: impl Fn(f64) -> f64) -> Result<Var<'t>> {
        let out = self.tape.with_value(self.id, |v| {
            Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| f(x)).collect())
        })?;
        self.tape.push_checked(out, op, name)
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.unary(Op::Relu { a: self.id }, "relu", |x| x.max(0.0))
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.unary(Op::Exp { a: self.id }, "exp", f64::exp)
    }

    pub fn log(self) -> Result<Var<'t>> {
        let bad = self
            .tape
            .with_value(self.id, |v| v.data().iter().copied().find(|x| *x <= 0.0));
        if let Some(x) = bad {
            return Err(Error::Domain(format!("log of nonpositive value {x}")));
        }
        self.unary(Op::Log { a: self.id }, "log", f64::ln)
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        self.unary(Op::Scale { a: self.id, c }, "scale", |x| c * x)
    }

    pub fn sum(self) -> Result<Var<'t>> {
        let s = self.tape.with_value(self.id, |v| v.data().iter().sum::<f64>());
        self.tape
            .push_checked(Tensor::scalar(s), Op::Sum { a: self.id }, "sum")
    }

    /// Row sums of a matrix, as an `r×1` column.
    pub fn sum_rows(self) -> Result<Var<'t>> {
        let (out, r, c) = self.tape.with_value(self.id, |v| {
            let (r, c) = v.dims2()?;
            let sums = (0..r).map(|i| v.row(i).iter().sum()).collect();
            Ok::<_, Error>((Tensor::from_rows(r, 1, sums)?, r, c))
        })?;
        self.tape
            .push_checked(out, Op::SumRows { a: self.id, r, c }, "sum_rows")
    }

    /// Each row divided by its Euclidean norm.
    pub fn normalize_rows(self) -> Result<Var<'t>> {
        let (out, c, norms) = self.tape.with_value(self.id, |v| {
            let (r, c) = v.dims2()?;
            let mut norms = Vec::with_capacity(r);
            let mut data = Vec::with_capacity(r * c);
            for i in 0..r {
                let row = v.row(i);
                let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm <= MIN_ROW_NORM {
                    return Err(Error::Degenerate(format!("row {i} has norm {norm:e}")));
                }
                norms.push(norm);
                data.extend(row.iter().map(|x| x / norm));
            }
            Ok((Tensor::from_rows(r, c, data)?, c, norms))
        })?;
        self.tape
            .push_checked(out, Op::NormalizeRows { a: self.id, c, norms }, "normalize_rows")
    }

    /// Pairwise cosine similarities between rows.
    pub fn cosine_matrix(self) -> Result<Var<'t>> {
        let u = self.normalize_rows()?;
        u.matmul(u.t()?)
    }

    /// Sum over columns of column Euclidean norms, with subgradient 0 on zero
    /// columns.
    pub fn l21(self) -> Result<Var<'t>> {
        let (value, r, c, norms) = self.tape.with_value(self.id, |v| {
            let (r, c) = v.dims2()?;
            let norms = column_norms(v.data(), r, c);
            Ok::<_, Error>((norms.iter().sum::<f64>(), r, c, norms))
        })?;
        self.tape.push_checked(
            Tensor::scalar(value),
            Op::ColumnNormSum { a: self.id, r, c, norms },
            "l21",
        )
    }
}

pub(crate) fn column_norms(data: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut sq = vec![0.0; c];
    for i in 0..r {
        for (j, s) in sq.iter_mut().enumerate() {
            let w = data[i * c + j];
            *s += w * w;
        }
    }
    sq.into_iter().map(f64::sqrt).collect()
}
