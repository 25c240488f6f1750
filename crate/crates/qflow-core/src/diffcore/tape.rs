//! Wengert-style tape over dense 2-D `f64` arrays.
//!
//! Every intermediate is an `Array2<f64>`; scalars are 1×1. Forward values
//! are computed eagerly when a node is pushed, and every push checks that
//! the result is finite so the first offending primitive can be named.
//!
//! Two non-smooth primitives carry declared backward rules instead of true
//! derivatives:
//!
//! - [`Tape::stop_gradient`] — forward identity, pullback exactly zero;
//! - [`Tape::gated_surrogate`] — forward is a caller-supplied array (e.g. a
//!   quantized copy of the input), pullback is `g · v` to the input, with
//!   `g` either a constant or a live 1×1 tape node that then receives
//!   `Σ v ⊙ x` (the gradient of the `g·x` residual term).
//!
//! For finite-difference validation the tape supports a record/replay mode:
//! recording stores, per surrogate site, the frozen offset that linearises
//! the site around the base point; replaying evaluates the loss with those
//! offsets held fixed, which makes the composite function smooth and equal
//! in derivative to the declared backward rules.

use ndarray::{concatenate, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

pub type VarId = usize;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Gate source for a gated surrogate site.
#[derive(Clone, Copy, Debug)]
pub enum GateSrc {
    Const(f64),
    /// 1×1 tape node; receives the residual-term gradient.
    Var(VarId),
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Neg(VarId),
    ScaleConst(VarId, f64),
    AddConst(VarId),
    Mul(VarId, VarId),
    MatMul(VarId, VarId),
    Transpose(VarId),
    /// Broadcast add of a 1×c row to every row of an r×c array.
    AddRow(VarId, VarId),
    /// Broadcast elementwise multiply by a 1×c row.
    MulRow(VarId, VarId),
    /// Broadcast multiply by a 1×1 scalar node.
    MulScalarVar(VarId, VarId),
    LayerNorm {
        x: VarId,
        gamma: VarId,
        beta: VarId,
        eps: f64,
    },
    SoftmaxRows(VarId),
    Gelu(VarId),
    Tanh(VarId),
    Relu(VarId),
    Sigmoid(VarId),
    SumAll(VarId),
    MeanAll(VarId),
    /// Mean over rows: r×c → 1×c.
    MeanRows(VarId),
    ConcatCols(VarId, VarId),
    SliceRows { x: VarId, start: usize, len: usize },
    SliceCols { x: VarId, start: usize, len: usize },
    Reshape { x: VarId, rows: usize, cols: usize },
    StopGradient(VarId),
    GatedSurrogate { x: VarId, gate: GateSrc },
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Frozen linearisation data for one surrogate site, in creation order.
#[derive(Clone, Debug)]
pub(crate) enum FrozenSite {
    /// Value of a stop-gradient node at the base point.
    Stop(Array2<f64>),
    /// `forward − g₀·x₀` for a gated surrogate at the base point.
    Gated(Array2<f64>),
}

enum Mode {
    Normal,
    Record(Vec<FrozenSite>),
    Replay { sites: Vec<FrozenSite>, cursor: usize },
}

pub struct Tape {
    nodes: Vec<Node>,
    mode: Mode,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), mode: Mode::Normal }
    }

    pub(crate) fn recording() -> Self {
        Tape { nodes: Vec::new(), mode: Mode::Record(Vec::new()) }
    }

    pub(crate) fn replaying(sites: Vec<FrozenSite>) -> Self {
        Tape { nodes: Vec::new(), mode: Mode::Replay { sites, cursor: 0 } }
    }

    pub(crate) fn into_sites(self) -> Vec<FrozenSite> {
        match self.mode {
            Mode::Record(sites) => sites,
            _ => Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Array2<f64> {
        &self.nodes[id].value
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, id: VarId) -> f64 {
        debug_assert_eq!(self.nodes[id].value.dim(), (1, 1));
        self.nodes[id].value[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, op: Op, name: &'static str) -> Result<VarId> {
        if !value.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op });
        Ok(self.nodes.len() - 1)
    }

    fn dim(&self, id: VarId) -> (usize, usize) {
        self.nodes[id].value.dim()
    }

    fn same_shape(&self, a: VarId, b: VarId, op: &'static str) -> Result<()> {
        if self.dim(a) != self.dim(b) {
            return Err(Error::Shape {
                op,
                detail: format!("{:?} vs {:?}", self.dim(a), self.dim(b)),
            });
        }
        Ok(())
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Result<VarId> {
        self.push(value, Op::Leaf, "leaf")
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Result<VarId> {
        self.push(value, Op::Leaf, "constant")
    }

    pub fn scalar_const(&mut self, value: f64) -> Result<VarId> {
        self.constant(Array2::from_elem((1, 1), value))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.same_shape(a, b, "add")?;
        let v = &self.nodes[a].value + &self.nodes[b].value;
        self.push(v, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.same_shape(a, b, "sub")?;
        let v = &self.nodes[a].value - &self.nodes[b].value;
        self.push(v, Op::Sub(a, b), "sub")
    }

    pub fn neg(&mut self, x: VarId) -> Result<VarId> {
        let v = self.nodes[x].value.mapv(|t| -t);
        self.push(v, Op::Neg(x), "neg")
    }

    pub fn scale(&mut self, x: VarId, c: f64) -> Result<VarId> {
        let v = self.nodes[x].value.mapv(|t| c * t);
        self.push(v, Op::ScaleConst(x, c), "scale")
    }

    pub fn add_scalar(&mut self, x: VarId, c: f64) -> Result<VarId> {
        let v = self.nodes[x].value.mapv(|t| t + c);
        self.push(v, Op::AddConst(x), "add_scalar")
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.same_shape(a, b, "mul")?;
        let v = &self.nodes[a].value * &self.nodes[b].value;
        self.push(v, Op::Mul(a, b), "mul")
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (ar, ac) = self.dim(a);
        let (br, bc) = self.dim(b);
        if ac != br {
            return Err(Error::Shape {
                op: "matmul",
                detail: format!("({ar},{ac}) · ({br},{bc})"),
            });
        }
        let v = self.nodes[a].value.dot(&self.nodes[b].value);
        self.push(v, Op::MatMul(a, b), "matmul")
    }

    pub fn transpose(&mut self, x: VarId) -> Result<VarId> {
        let v = self.nodes[x].value.t().to_owned();
        self.push(v, Op::Transpose(x), "transpose")
    }

    pub fn add_row(&mut self, x: VarId, row: VarId) -> Result<VarId> {
        let (_, c) = self.dim(x);
        if self.dim(row) != (1, c) {
            return Err(Error::Shape {
                op: "add_row",
                detail: format!("row {:?} against {:?}", self.dim(row), self.dim(x)),
            });
        }
        let v = &self.nodes[x].value + &self.nodes[row].value;
        self.push(v, Op::AddRow(x, row), "add_row")
    }

    pub fn mul_row(&mut self, x: VarId, row: VarId) -> Result<VarId> {
        let (_, c) = self.dim(x);
        if self.dim(row) != (1, c) {
            return Err(Error::Shape {
                op: "mul_row",
                detail: format!("row {:?} against {:?}", self.dim(row), self.dim(x)),
            });
        }
        let v = &self.nodes[x].value * &self.nodes[row].value;
        self.push(v, Op::MulRow(x, row), "mul_row")
    }

    pub fn mul_scalar_var(&mut self, x: VarId, s: VarId) -> Result<VarId> {
        if self.dim(s) != (1, 1) {
            return Err(Error::Shape {
                op: "mul_scalar_var",
                detail: format!("scalar operand has shape {:?}", self.dim(s)),
            });
        }
        let sv = self.scalar(s);
        let v = self.nodes[x].value.mapv(|t| sv * t);
        self.push(v, Op::MulScalarVar(x, s), "mul_scalar_var")
    }

    /// Per-row layer normalisation with learned scale and offset.
    pub fn layer_norm(&mut self, x: VarId, gamma: VarId, beta: VarId, eps: f64) -> Result<VarId> {
        let (_, c) = self.dim(x);
        if self.dim(gamma) != (1, c) || self.dim(beta) != (1, c) {
            return Err(Error::Shape {
                op: "layer_norm",
                detail: format!(
                    "gamma {:?} / beta {:?} against {:?}",
                    self.dim(gamma),
                    self.dim(beta),
                    self.dim(x)
                ),
            });
        }
        let xv = &self.nodes[x].value;
        let mut out = Array2::zeros(xv.dim());
        for (i, rowv) in xv.rows().into_iter().enumerate() {
            let mean = rowv.mean().unwrap();
            let var = rowv.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                let xhat = (rowv[j] - mean) * inv;
                out[[i, j] ] = self.nodes[gamma].value[[0, j]] * xhat + self.nodes[beta].value[[0, j]];
            }
        }
        self.push(out, Op::LayerNorm { x, gamma, beta, eps }, "layer_norm")
    }

    pub fn softmax_rows(&mut self, x: VarId) -> Result<VarId> {
        let xv = &self.nodes[x].value;
        let mut out = xv.clone();
        for mut row in out.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - max).exp());
            let sum: f64 = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        self.push(out, Op::SoftmaxRows(x), "softmax_rows")
    }

    pub fn gelu(&mut self, x: VarId) -> Result<VarId> {
        let v = self.nodes[x].value.mapv(gelu_fwd);
        self.push(v, Op::Gelu(x), "gelu")
    }

    pub fn tanh(&mut self, x: VarId) -> Result<VarId> {
        let v = self.nodes[x].value.mapv(f64::tanh);
        self.push(v, Op::Tanh(x), "tanh")
    }

    pub fn relu(&mut self, x: VarId) -> Result<VarId> {
        let v = self.nodes[x].value.mapv(|t| t.max(0.0));
        self.push(v, Op::Relu(x), "relu")
    }

    pub fn sigmoid(&mut self, x: VarId) -> Result<VarId> {
        let v = self.nodes[x].value.mapv(|t| 1.0 / (1.0 + (-t).exp()));
        self.push(v, Op::Sigmoid(x), "sigmoid")
    }

    pub fn sum_all(&mut self, x: VarId) -> Result<VarId> {
        let v = Array2::from_elem((1, 1), self.nodes[x].value.sum());
        self.push(v, Op::SumAll(x), "sum_all")
    }

    pub fn mean_all(&mut self, x: VarId) -> Result<VarId> {
        let (r, c) = self.dim(x);
        let v = Array2::from_elem((1, 1), self.nodes[x].value.sum() / (r * c) as f64);
        self.push(v, Op::MeanAll(x), "mean_all")
    }

    pub fn mean_rows(&mut self, x: VarId) -> Result<VarId> {
        let (r, _) = self.dim(x);
        let v = self
            .nodes[x]
            .value
            .sum_axis(Axis(0))
            .insert_axis(Axis(0))
            .mapv(|t| t / r as f64);
        self.push(v, Op::MeanRows(x), "mean_rows")
    }

    pub fn concat_cols(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (ar, _) = self.dim(a);
        let (br, _) = self.dim(b);
        if ar != br {
            return Err(Error::Shape {
                op: "concat_cols",
                detail: format!("{:?} vs {:?}", self.dim(a), self.dim(b)),
            });
        }
        let v = concatenate(
            Axis(1),
            &[self.nodes[a].value.view(), self.nodes[b].value.view()],
        )
        .expect("checked shapes");
        self.push(v, Op::ConcatCols(a, b), "concat_cols")
    }

    pub fn slice_rows(&mut self, x: VarId, start: usize, len: usize) -> Result<VarId> {
        let (r, _) = self.dim(x);
        if start + len > r || len == 0 {
            return Err(Error::Shape {
                op: "slice_rows",
                detail: format!("rows {start}..{} of {r}", start + len),
            });
        }
        let v = self.nodes[x]
            .value
            .slice(ndarray::s![start..start + len, ..])
            .to_owned();
        self.push(v, Op::SliceRows { x, start, len }, "slice_rows")
    }

    pub fn slice_cols(&mut self, x: VarId, start: usize, len: usize) -> Result<VarId> {
        let (_, c) = self.dim(x);
        if start + len > c || len == 0 {
            return Err(Error::Shape {
                op: "slice_cols",
                detail: format!("cols {start}..{} of {c}", start + len),
            });
        }
        let v = self.nodes[x]
            .value
            .slice(ndarray::s![.., start..start + len])
            .to_owned();
        self.push(v, Op::SliceCols { x, start, len }, "slice_cols")
    }

    pub fn reshape(&mut self, x: VarId, rows: usize, cols: usize) -> Result<VarId> {
        let (r, c) = self.dim(x);
        if r * c != rows * cols {
            return Err(Error::Shape {
                op: "reshape",
                detail: format!("({r},{c}) -> ({rows},{cols})"),
            });
        }
        let v = self.nodes[x]
            .value
            .clone()
            .into_shape_with_order((rows, cols))
            .expect("checked element count");
        self.push(v, Op::Reshape { x, rows: r, cols: c }, "reshape")
    }

    /// Forward identity; pullback exactly zero.
    ///
    /// In replay mode the node's value is the frozen base-point value, which
    /// keeps the replayed loss constant along directions that only reach it
    /// through this site.
    pub fn stop_gradient(&mut self, x: VarId) -> Result<VarId> {
        let value = match &mut self.mode {
            Mode::Normal => self.nodes[x].value.clone(),
            Mode::Record(sites) => {
                let v = self.nodes[x].value.clone();
                sites.push(FrozenSite::Stop(v.clone()));
                v
            }
            Mode::Replay { sites, cursor } => {
                let site = sites.get(*cursor).ok_or(Error::Shape {
                    op: "stop_gradient",
                    detail: "replay ran out of recorded surrogate sites".into(),
                })?;
                *cursor += 1;
                match site {
                    FrozenSite::Stop(v) => v.clone(),
                    FrozenSite::Gated(_) => {
                        return Err(Error::Shape {
                            op: "stop_gradient",
                            detail: "replay site kind mismatch".into(),
                        })
                    }
                }
            }
        };
        self.push(value, Op::StopGradient(x), "stop_gradient")
    }

    /// Non-smooth forward with a declared linear backward rule.
    ///
    /// `forward` is the caller-computed forward value (bit-exact, e.g. the
    /// quantized input). The pullback to `x` is `g·v`; a `GateSrc::Var` gate
    /// additionally receives `Σ v ⊙ x`, matching the gradient of the
    /// composition `sg(forward − g·x) + g·x`.
    pub fn gated_surrogate(
        &mut self,
        x: VarId,
        gate: GateSrc,
        forward: Array2<f64>,
    ) -> Result<VarId> {
        if forward.dim() != self.dim(x) {
            return Err(Error::Shape {
                op: "gated_surrogate",
                detail: format!("forward {:?} against input {:?}", forward.dim(), self.dim(x)),
            });
        }
        if let GateSrc::Var(s) = gate {
            if self.dim(s) != (1, 1) {
                return Err(Error::Shape {
                    op: "gated_surrogate",
                    detail: format!("gate node has shape {:?}", self.dim(s)),
                });
            }
        }
        let g_val = match gate {
            GateSrc::Const(c) => c,
            GateSrc::Var(s) => self.scalar(s),
        };
        let value = match &mut self.mode {
            Mode::Normal => forward,
            Mode::Record(sites) => {
                let offset = &forward - &self.nodes[x].value.mapv(|t| g_val * t);
                sites.push(FrozenSite::Gated(offset));
                forward
            }
            Mode::Replay { sites, cursor } => {
                let site = sites.get(*cursor).ok_or(Error::Shape {
                    op: "gated_surrogate",
                    detail: "replay ran out of recorded surrogate sites".into(),
                })?;
                *cursor += 1;
                match site {
                    FrozenSite::Gated(offset) => {
                        offset + &self.nodes[x].value.mapv(|t| g_val * t)
                    }
                    FrozenSite::Stop(_) => {
                        return Err(Error::Shape {
                            op: "gated_surrogate",
                            detail: "replay site kind mismatch".into(),
                        })
                    }
                }
            }
        };
        self.push(value, Op::GatedSurrogate { x, gate }, "gated_surrogate")
    }

    /// Reverse sweep from a 1×1 root. Returns one cotangent slot per node;
    /// `None` means no gradient reached that node.
    pub fn backward(&self, root: VarId) -> Result<Vec<Option<Array2<f64>>>> {
        if self.dim(root) != (1, 1) {
            return Err(Error::Shape {
                op: "backward",
                detail: format!("root must be 1×1, got {:?}", self.dim(root)),
            });
        }
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[root] = Some(Array2::ones((1, 1)));

        for id in (0..=root).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            // Leaf cotangents are the caller's output; put them back.
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.view());
                    accumulate(&mut grads, *b, g.view());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.view());
                    accumulate_scaled(&mut grads, *b, g.view(), -1.0);
                }
                Op::Neg(x) => accumulate_scaled(&mut grads, *x, g.view(), -1.0),
                Op::ScaleConst(x, c) => accumulate_scaled(&mut grads, *x, g.view(), *c),
                Op::AddConst(x) => accumulate(&mut grads, *x, g.view()),
                Op::Mul(a, b) => {
                    let ga = &g * &self.nodes[*b].value;
                    let gb = &g * &self.nodes[*a].value;
                    accumulate(&mut grads, *a, ga.view());
                    accumulate(&mut grads, *b, gb.view());
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.nodes[*b].value.t());
                    let gb = self.nodes[*a].value.t().dot(&g);
                    accumulate(&mut grads, *a, ga.view());
                    accumulate(&mut grads, *b, gb.view());
                }
                Op::Transpose(x) => {
                    let gx = g.t().to_owned();
                    accumulate(&mut grads, *x, gx.view());
                }
                Op::AddRow(x, row) => {
                    accumulate(&mut grads, *x, g.view());
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *row, gr.view());
                }
                Op::MulRow(x, row) => {
                    let gx = &g * &self.nodes[*row].value;
                    let gr = (&g * &self.nodes[*x].value)
                        .sum_axis(Axis(0))
                        .insert_axis(Axis(0));
                    accumulate(&mut grads, *x, gx.view());
                    accumulate(&mut grads, *row, gr.view());
                }
                Op::MulScalarVar(x, s) => {
                    let sv = self.scalar(*s);
                    accumulate_scaled(&mut grads, *x, g.view(), sv);
                    let gs = Array2::from_elem((1, 1), (&g * &self.nodes[*x].value).sum());
                    accumulate(&mut grads, *s, gs.view());
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let (gx, gg, gb) = layer_norm_backward(
                        &self.nodes[*x].value,
                        &self.nodes[*gamma].value,
                        *eps,
                        &g,
                    );
                    accumulate(&mut grads, *x, gx.view());
                    accumulate(&mut grads, *gamma, gg.view());
                    accumulate(&mut grads, *beta, gb.view());
                }
                Op::SoftmaxRows(x) => {
                    let y = &self.nodes[id].value;
                    let mut gx = Array2::zeros(y.dim());
                    for i in 0..y.nrows() {
                        let dot: f64 = (0..y.ncols()).map(|j| g[[i, j]] * y[[i, j]]).sum();
                        for j in 0..y.ncols() {
                            gx[[i, j]] = y[[i, j]] * (g[[i, j]] - dot);
                        }
                    }
                    accumulate(&mut grads, *x, gx.view());
                }
                Op::Gelu(x) => {
                    let gx = ndarray::Zip::from(&g)
                        .and(&self.nodes[*x].value)
                        .map_collect(|gv, xv| gv * gelu_grad(*xv));
                    accumulate(&mut grads, *x, gx.view());
                }
                Op::Tanh(x) => {
                    let y = &self.nodes[id].value;
                    let gx = ndarray::Zip::from(&g).and(y).map_collect(|gv, yv| gv * (1.0 - yv * yv));
                    accumulate(&mut grads, *x, gx.view());
                }
                Op::Relu(x) => {
                    let gx = ndarray::Zip::from(&g)
                        .and(&self.nodes[*x].value)
                        .map_collect(|gv, xv| if *xv > 0.0 { *gv } else { 0.0 });
                    accumulate(&mut grads, *x, gx.view());
                }
                Op::Sigmoid(x) => {
                    let y = &self.nodes[id].value;
                    let gx = ndarray::Zip::from(&g).and(y).map_collect(|gv, yv| gv * yv * (1.0 - yv));
                    accumulate(&mut grads, *x, gx.view());
                }
                Op::SumAll(x) => {
                    let gx = Array2::from_elem(self.dim(*x), g[[0, 0]]);
                    accumulate(&mut grads, *x, gx.view());
                }
                Op::MeanAll(x) => {
                    let (r, c) = self.dim(*x);
                    let gx = Array2::from_elem((r, c), g[[0, 0]] / (r * c) as f64);
                    accumulate(&mut grads, *x, gx.view());
                }
                Op::MeanRows(x) => {
                    let (r, c) = self.dim(*x);
                    let mut gx = Array2::zeros((r, c));
                    for i in 0..r {
                        for j in 0..c {
                            gx[[i, j]] = g[[0, j]] / r as f64;
                        }
                    }
                    accumulate(&mut grads, *x, gx.view());
                }
                Op::ConcatCols(a, b) => {
                    let (_, ca) = self.dim(*a);
                    let ga = g.slice(ndarray::s![.., ..ca]);
                    let gb = g.slice(ndarray::s![.., ca..]);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::SliceRows { x, start, len } => {
                    let mut gx = Array2::zeros(self.dim(*x));
                    gx.slice_mut(ndarray::s![*start..start + len, ..]).assign(&g);
                    accumulate(&mut grads, *x, gx.view());
                }
                Op::SliceCols { x, start, len } => {
                    let mut gx = Array2::zeros(self.dim(*x));
                    gx.slice_mut(ndarray::s![.., *start..start + len]).assign(&g);
                    accumulate(&mut grads, *x, gx.view());
                }
                Op::Reshape { x, rows, cols } => {
                    let gx = g
                        .clone()
                        .into_shape_with_order((*rows, *cols))
                        .expect("reshape backward");
                    accumulate(&mut grads, *x, gx.view());
                }
                Op::StopGradient(_) => {}
                Op::GatedSurrogate { x, gate } => {
                    let gv = match gate {
                        GateSrc::Const(c) => *c,
                        GateSrc::Var(s) => self.scalar(*s),
                    };
                    accumulate_scaled(&mut grads, *x, g.view(), gv);
                    if let GateSrc::Var(s) = gate {
                        let gs =
                            Array2::from_elem((1, 1), (&g * &self.nodes[*x].value).sum());
                        accumulate(&mut grads, *s, gs.view());
                    }
                }
            }
        }
        Ok(grads)
    }

    /// Leaf ids (in increasing id order) that can influence a stop-gradient
    /// or gated-surrogate site's frozen input. Used to flag expected
    /// finite-difference mismatches when probing the true forward.
    pub(crate) fn leaves_feeding_surrogates(&self) -> Vec<VarId> {
        let mut marked = vec![false; self.nodes.len()];
        for node in &self.nodes {
            match node.op {
                Op::StopGradient(x) | Op::GatedSurrogate { x, .. } => marked[x] = true,
                _ => {}
            }
        }
        for id in (0..self.nodes.len()).rev() {
            if !marked[id] {
                continue;
            }
            self.for_each_input(id, |inp| marked[inp] = true);
        }
        (0..self.nodes.len())
            .filter(|&id| marked[id] && matches!(self.nodes[id].op, Op::Leaf))
            .collect()
    }

    fn for_each_input(&self, id: VarId, mut f: impl FnMut(VarId)) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MatMul(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b)
            | Op::MulScalarVar(a, b)
            | Op::ConcatCols(a, b) => {
                f(*a);
                f(*b);
            }
            Op::Neg(x)
            | Op::ScaleConst(x, _)
            | Op::AddConst(x)
            | Op::Transpose(x)
            | Op::SoftmaxRows(x)
            | Op::Gelu(x)
            | Op::Tanh(x)
            | Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::SumAll(x)
            | Op::MeanAll(x)
            | Op::MeanRows(x)
            | Op::SliceRows { x, .. }
            | Op::SliceCols { x, .. }
            | Op::Reshape { x, .. }
            | Op::StopGradient(x) => f(*x),
            Op::LayerNorm { x, gamma, beta, .. } => {
                f(*x);
                f(*gamma);
                f(*beta);
            }
            Op::GatedSurrogate { x, gate } => {
                f(*x);
                if let GateSrc::Var(s) = gate {
                    f(*s);
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], id: VarId, g: ArrayView2<f64>) {
    match &mut grads[id] {
        Some(acc) => *acc += &g,
        slot => *slot = Some(g.to_owned()),
    }
}

fn accumulate_scaled(grads: &mut [Option<Array2<f64>>], id: VarId, g: ArrayView2<f64>, c: f64) {
    match &mut grads[id] {
        Some(acc) => acc.zip_mut_with(&g, |a, b| *a += c * b),
        slot => *slot = Some(g.mapv(|t| c * t)),
    }
}

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn layer_norm_backward(
    x: &Array2<f64>,
    gamma: &Array2<f64>,
    eps: f64,
    g: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let (r, c) = x.dim();
    let n = c as f64;
    let mut gx = Array2::zeros((r, c));
    let mut gg = Array2::zeros((1, c));
    let mut gb = Array2::zeros((1, c));
    for i in 0..r {
        let row = x.row(i);
        let mean = row.mean().unwrap();
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + eps).sqrt();

        // dxhat = g ⊙ gamma; dx = inv * (dxhat − mean(dxhat) − xhat·mean(dxhat ⊙ xhat))
        let mut dxhat = vec![0.0; c];
        let mut xhat = vec![0.0; c];
        for j in 0..c {
            xhat[j] = (row[j] - mean) * inv;
            dxhat[j] = g[[i, j]] * gamma[[0, j]];
            gg[[0, j]] += g[[i, j]] * xhat[j];
            gb[[0, j]] += g[[i, j]];
        }
        let mean_dxhat: f64 = dxhat.iter().sum::<f64>() / n;
        let mean_dxhat_xhat: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n;
        for j in 0..c {
            gx[[i, j]] = inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
        }
    }
    (gx, gg, gb)
}
