//! Tape-based reverse-mode automatic differentiation over row-major
//! matrices.
//!
//! Every operation appends a node holding its output values and the ids of
//! its parents. [`Tape::backward`] walks the nodes once, newest first, and
//! returns the gradients of every leaf that the loss depends on.

use std::borrow::Cow;
use std::sync::atomic::{AtomicU32, Ordering};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Differentiable tensor: a handle to one node on one tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    idx: u32,
}

impl Var {
    pub fn index(&self) -> usize {
        self.idx as usize
    }
}

/// Elementwise non-linearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// `x` for positive inputs, `exp(x) - 1` otherwise.
    Elu,
    /// Subgradient at zero is zero.
    Abs,
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Activation::Abs => x.abs(),
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative from the input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    y + 1.0
                }
            }
            Activation::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

/// Evaluates both branches and selects, so the sign of `x` never costs a
/// mispredicted jump; neither branch overflows.
#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    let e = (-x.abs()).exp();
    let p = 1.0 / (1.0 + e);
    if x >= 0.0 {
        p
    } else {
        e * p
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Affine {
        x: usize,
        scale: f64,
    },
    MulConst {
        x: usize,
        c: Vec<f64>,
    },
    Act {
        x: usize,
        kind: Activation,
    },
    /// Fused GRU gate arithmetic; `gates` caches r, z and the candidate.
    Gru {
        gi: usize,
        gh: usize,
        h: usize,
        gates: Vec<f64>,
    },
    Gather {
        x: usize,
        idx: Vec<usize>,
    },
    RowVecMat {
        a: usize,
        w: usize,
    },
    SumCols {
        x: usize,
    },
    SumAll {
        x: usize,
    },
    ConcatRows(Vec<usize>),
    Reshape {
        x: usize,
    },
    SliceCols {
        x: usize,
        start: usize,
    },
}

#[derive(Debug)]
struct Node<'a> {
    rows: usize,
    cols: usize,
    value: Cow<'a, [f64]>,
    op: Op,
    requires_grad: bool,
}

impl Op {
    fn parents(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Linear { x, w, b } => {
                let mut p = vec![*x, *w];
                p.extend(b);
                p
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::RowVecMat { a, w } => vec![*a, *w],
            Op::Gru { gi, gh, h, .. } => vec![*gi, *gh, *h],
            Op::Affine { x, .. }
            | Op::MulConst { x, .. }
            | Op::Act { x, .. }
            | Op::Gather { x, .. }
            | Op::SumCols { x }
            | Op::SumAll { x }
            | Op::Reshape { x }
            | Op::SliceCols { x, .. } => vec![*x],
            Op::ConcatRows(parts) => parts.clone(),
        }
    }
}

/// Append-only record of one forward pass.
#[derive(Debug)]
pub struct Tape<'a> {
    id: u32,
    nodes: Vec<Node<'a>>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Tape<'a> {
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

    fn push(&mut self, rows: usize, cols: usize, value: Cow<'a, [f64]>, op: Op) -> Var {
        let requires_grad = op.parents().iter().any(|&p| self.nodes[p].requires_grad);
        self.push_node(rows, cols, value, op, requires_grad)
    }

    fn push_node(
        &mut self,
        rows: usize,
        cols: usize,
        value: Cow<'a, [f64]>,
        op: Op,
        requires_grad: bool,
    ) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            idx: (self.nodes.len() - 1) as u32,
        }
    }

    fn node(&self, v: Var) -> Result<usize> {
        if v.tape != self.id {
            return Err(Error::Contract(format!(
                "variable from tape {} used on tape {}",
                v.tape, self.id
            )));
        }
        Ok(v.idx as usize)
    }

    fn dims(&self, i: usize) -> [usize; 2] {
        [self.nodes[i].rows, self.nodes[i].cols]
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, values: Vec<f64>, rows: usize, cols: usize) -> Result<Var> {
        if values.len() != rows * cols {
            return Err(Error::shape("leaf", &[rows, cols], &[values.len()]));
        }
        Ok(self.push_node(rows, cols, Cow::Owned(values), Op::Leaf, true))
    }

    /// Input leaf that never receives a gradient.
    pub fn constant(&mut self, values: Vec<f64>, rows: usize, cols: usize) -> Result<Var> {
        if values.len() != rows * cols {
            return Err(Error::shape("constant", &[rows, cols], &[values.len()]));
        }
        Ok(self.push_node(rows, cols, Cow::Owned(values), Op::Leaf, false))
    }

    /// Differentiable leaf borrowing the tensor's storage.
    pub fn tensor(&mut self, t: &'a Tensor) -> Var {
        let (r, c) = t.rows_cols();
        self.push_node(r, c, Cow::Borrowed(t.data()), Op::Leaf, true)
    }

    /// One leaf per parameter, borrowed from the store, in store order.
    pub fn bind(&mut self, store: &'a ParamStore) -> Vec<Var> {
        store.tensors().iter().map(|t| self.tensor(t)).collect()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.idx as usize].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.idx as usize];
        (n.rows, n.cols)
    }

    /// `x·Wᵀ + b` with `x: [R, I]`, `W: [O, I]`, `b: [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xi, wi) = (self.node(x)?, self.node(w)?);
        let [r, i] = self.dims(xi);
        let [o, wi_in] = self.dims(wi);
        if i != wi_in {
            return Err(Error::shape("linear", &[r, i], &[o, wi_in]));
        }
        let bi = match b {
            Some(b) => {
                let bi = self.node(b)?;
                if self.nodes[bi].value.len() != o {
                    return Err(Error::shape("linear bias", &[o], &self.dims(bi)));
                }
                Some(bi)
            }
            None => None,
        };
        // rows start at the bias and the product accumulates onto them
        let (mut out, beta) = match bi {
            Some(bi) => (self.nodes[bi].value.repeat(r), 1.0),
            None => (vec![0.0; r * o], 0.0),
        };
        gemm(r, i, o, &self.nodes[xi].value, i, 1, &self.nodes[wi].value, 1, i, &mut out, o, 1, beta);
        Ok(self.push(r, o, Cow::Owned(out), Op::Linear { x: xi, w: wi, b: bi }))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str) -> Result<(usize, usize)> {
        let (ai, bi) = (self.node(a)?, self.node(b)?);
        if self.dims(ai) != self.dims(bi) {
            return Err(Error::shape(name, &self.dims(ai), &self.dims(bi)));
        }
        Ok((ai, bi))
    }

    fn zip_map(&self, ai: usize, bi: usize, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        self.nodes[ai]
            .value
            .iter()
            .zip(self.nodes[bi].value.iter())
            .map(|(x, y)| f(*x, *y))
            .collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = self.binary(a, b, "add")?;
        let [r, c] = self.dims(ai);
        let out = self.zip_map(ai, bi, |x, y| x + y);
        Ok(self.push(r, c, Cow::Owned(out), Op::Add(ai, bi)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = self.binary(a, b, "sub")?;
        let [r, c] = self.dims(ai);
        let out = self.zip_map(ai, bi, |x, y| x - y);
        Ok(self.push(r, c, Cow::Owned(out), Op::Sub(ai, bi)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = self.binary(a, b, "mul")?;
        let [r, c] = self.dims(ai);
        let out = self.zip_map(ai, bi, |x, y| x * y);
        Ok(self.push(r, c, Cow::Owned(out), Op::Mul(ai, bi)))
    }

    /// `scale·x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let xi = self.node(x)?;
        let [r, c] = self.dims(xi);
        let out = self.nodes[xi]
            .value
            .iter()
            .map(|v| scale * v + shift)
            .collect();
        Ok(self.push(r, c, Cow::Owned(out), Op::Affine { x: xi, scale }))
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, x: Var, c: Vec<f64>) -> Result<Var> {
        let xi = self.node(x)?;
        let [r, cols] = self.dims(xi);
        if c.len() != r * cols {
            return Err(Error::shape("mul_const", &[r, cols], &[c.len()]));
        }
        let out = self.nodes[xi]
            .value
            .iter()
            .zip(&c)
            .map(|(v, k)| v * k)
            .collect();
        Ok(self.push(r, cols, Cow::Owned(out), Op::MulConst { x: xi, c }))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let xi = self.node(x)?;
        let [r, c] = self.dims(xi);
        let out = self.nodes[xi].value.iter().map(|v| kind.apply(*v)).collect();
        Ok(self.push(r, c, Cow::Owned(out), Op::Act { x: xi, kind }))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    pub fn elu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Elu)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Abs)
    }

    /// GRU gate arithmetic given the two pre-activations
    /// `gi = x·W_ihᵀ + b_ih` and `gh = h·W_hhᵀ + b_hh`, each `[R, 3H]`
    /// laid out as (reset, update, candidate):
    ///
    /// ```text
    /// r  = σ(gi_r + gh_r)
    /// z  = σ(gi_z + gh_z)
    /// h̃  = tanh(gi_n + r ⊙ gh_n)
    /// h' = (1 − z) ⊙ h + z ⊙ h̃
    /// ```
    pub fn gru_gates(&mut self, gi: Var, gh: Var, h: Var) -> Result<Var> {
        let (gii, ghi) = self.binary(gi, gh, "gru gates")?;
        let hi = self.node(h)?;
        let [r, three_h] = self.dims(gii);
        let [hr, hh] = self.dims(hi);
        if hr != r || three_h != 3 * hh {
            return Err(Error::shape("gru hidden", &[r, three_h], &[hr, hh]));
        }
        let width = hh;
        let mut gates = vec![0.0; r * three_h];
        let mut out = vec![0.0; r * width];
        if width > 0 {
            let giv = &self.nodes[gii].value;
            let ghv = &self.nodes[ghi].value;
            let hv = &self.nodes[hi].value;
            let rows = giv
                .chunks_exact(three_h)
                .zip(ghv.chunks_exact(three_h))
                .zip(hv.chunks_exact(width))
                .zip(gates.chunks_exact_mut(three_h).zip(out.chunks_exact_mut(width)));
            for (((gi_row, gh_row), h_row), (gate_row, out_row)) in rows {
                let (gi_r, gi_rest) = gi_row.split_at(width);
                let (gi_z, gi_n) = gi_rest.split_at(width);
                let (gh_r, gh_rest) = gh_row.split_at(width);
                let (gh_z, gh_n) = gh_rest.split_at(width);
                let (g_r, g_rest) = gate_row.split_at_mut(width);
                let (g_z, g_n) = g_rest.split_at_mut(width);
                for j in 0..width {
                    let rg = sigmoid(gi_r[j] + gh_r[j]);
                    let zg = sigmoid(gi_z[j] + gh_z[j]);
                    let ng = (gi_n[j] + rg * gh_n[j]).tanh();
                    g_r[j] = rg;
                    g_z[j] = zg;
                    g_n[j] = ng;
                    out_row[j] = (1.0 - zg) * h_row[j] + zg * ng;
                }
            }
        }
        Ok(self.push(
            r,
            width,
            Cow::Owned(out),
            Op::Gru {
                gi: gii,
                gh: ghi,
                h: hi,
                gates,
            },
        ))
    }

    /// Picks column `idx[r]` from each row: `[R, C] -> [R, 1]`.
    pub fn gather(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let xi = self.node(x)?;
        let [r, c] = self.dims(xi);
        if idx.len() != r {
            return Err(Error::shape("gather", &[r, c], &[idx.len()]));
        }
        if let Some(bad) = idx.iter().find(|&&j| j >= c) {
            return Err(Error::Contract(format!(
                "gather index {bad} out of range for {c} columns"
            )));
        }
        let v = &self.nodes[xi].value;
        let out = idx.iter().enumerate().map(|(row, &j)| v[row * c + j]).collect();
        Ok(self.push(r, 1, Cow::Owned(out), Op::Gather { x: xi, idx }))
    }

    /// Per-row vector–matrix product: row `r` of `a` (`[R, n]`) times the
    /// `n×H` matrix stored row-major in row `r` of `w` (`[R, n·H]`).
    pub fn row_vecmat(&mut self, a: Var, w: Var) -> Result<Var> {
        let (ai, wi) = (self.node(a)?, self.node(w)?);
        let [r, n] = self.dims(ai);
        let [wr, wc] = self.dims(wi);
        if wr != r || n == 0 || wc % n != 0 {
            return Err(Error::shape("row_vecmat", &[r, n], &[wr, wc]));
        }
        let h = wc / n;
        let mut out = vec![0.0; r * h];
        {
            let av = &self.nodes[ai].value;
            let wv = &self.nodes[wi].value;
            for row in 0..r {
                let o = &mut out[row * h..(row + 1) * h];
                for i in 0..n {
                    let s = av[row * n + i];
                    let base = row * wc + i * h;
                    for (y, wv) in o.iter_mut().zip(&wv[base..base + h]) {
                        *y += s * wv;
                    }
                }
            }
        }
        Ok(self.push(r, h, Cow::Owned(out), Op::RowVecMat { a: ai, w: wi }))
    }

    /// `[R, C] -> [R, 1]`.
    pub fn sum_cols(&mut self, x: Var) -> Result<Var> {
        let xi = self.node(x)?;
        let [r, c] = self.dims(xi);
        let out = self.nodes[xi]
            .value
            .chunks_exact(c.max(1))
            .map(|row| row.iter().sum())
            .collect::<Vec<f64>>();
        let out = if c == 0 { vec![0.0; r] } else { out };
        Ok(self.push(r, 1, Cow::Owned(out), Op::SumCols { x: xi }))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let xi = self.node(x)?;
        let s = self.nodes[xi].value.iter().sum();
        Ok(self.push(1, 1, Cow::Owned(vec![s]), Op::SumAll { x: xi }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let idx = parts
            .iter()
            .map(|v| self.node(*v))
            .collect::<Result<Vec<_>>>()?;
        let Some(&first) = idx.first() else {
            return Err(Error::Contract("concat of zero tensors".into()));
        };
        let cols = self.nodes[first].cols;
        let mut rows = 0;
        let mut out = Vec::new();
        for &i in &idx {
            if self.nodes[i].cols != cols {
                return Err(Error::shape("concat_rows", &self.dims(first), &self.dims(i)));
            }
            rows += self.nodes[i].rows;
            out.extend_from_slice(&self.nodes[i].value);
        }
        Ok(self.push(rows, cols, Cow::Owned(out), Op::ConcatRows(idx)))
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let xi = self.node(x)?;
        if rows * cols != self.nodes[xi].value.len() {
            return Err(Error::shape("reshape", &self.dims(xi), &[rows, cols]));
        }
        let out = self.nodes[xi].value.to_vec();
        Ok(self.push(rows, cols, Cow::Owned(out), Op::Reshape { x: xi }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xi = self.node(x)?;
        let [r, c] = self.dims(xi);
        if start + len > c {
            return Err(Error::shape("slice_cols", &[r, c], &[start, len]));
        }
        let v = &self.nodes[xi].value;
        let mut out = Vec::with_capacity(r * len);
        for row in 0..r {
            out.extend_from_slice(&v[row * c + start..row * c + start + len]);
        }
        Ok(self.push(r, len, Cow::Owned(out), Op::SliceCols { x: xi, start }))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Only leaf gradients are retained; interior buffers are released as
    /// soon as their node has been processed.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let li = self.node(loss)?;
        if self.nodes[li].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.dims(li)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[li] = Some(vec![1.0]);

        let mut sink = Vec::new();
        for i in (0..=li).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            let nodes = &self.nodes;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Linear { x, w, b } => {
                    let (r, o) = (node.rows, node.cols);
                    let inp = nodes[*x].cols;
                    if nodes[*x].requires_grad {
                        let dx = slot(&mut grads, &mut sink, nodes, *x);
                        gemm(r, o, inp, &g, o, 1, &nodes[*w].value, inp, 1, dx, inp, 1, 1.0);
                    }
                    if nodes[*w].requires_grad {
                        let dw = slot(&mut grads, &mut sink, nodes, *w);
                        gemm(o, r, inp, &g, 1, o, &nodes[*x].value, inp, 1, dw, inp, 1, 1.0);
                    }
                    if let Some(b) = b {
                        let db = slot(&mut grads, &mut sink, nodes, *b);
                        for row in g.chunks_exact(o) {
                            for (d, gv) in db.iter_mut().zip(row) {
                                *d += gv;
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    add_into(slot(&mut grads, &mut sink, nodes, *a), &g, 1.0);
                    add_into(slot(&mut grads, &mut sink, nodes, *b), &g, 1.0);
                }
                Op::Sub(a, b) => {
                    add_into(slot(&mut grads, &mut sink, nodes, *a), &g, 1.0);
                    add_into(slot(&mut grads, &mut sink, nodes, *b), &g, -1.0);
                }
                Op::Mul(a, b) => {
                    {
                        let other = &nodes[*b].value;
                        let da = slot(&mut grads, &mut sink, nodes, *a);
                        for ((d, gv), o) in da.iter_mut().zip(&g).zip(other.iter()) {
                            *d += gv * o;
                        }
                    }
                    let other = &nodes[*a].value;
                    let db = slot(&mut grads, &mut sink, nodes, *b);
                    for ((d, gv), o) in db.iter_mut().zip(&g).zip(other.iter()) {
                        *d += gv * o;
                    }
                }
                Op::Affine { x, scale } => add_into(slot(&mut grads, &mut sink, nodes, *x), &g, *scale),
                Op::MulConst { x, c } => {
                    let dx = slot(&mut grads, &mut sink, nodes, *x);
                    for ((d, gv), k) in dx.iter_mut().zip(&g).zip(c) {
                        *d += gv * k;
                    }
                }
                Op::Act { x, kind } => {
                    let xv = &nodes[*x].value;
                    let yv = &node.value;
                    let dx = slot(&mut grads, &mut sink, nodes, *x);
                    for (j, d) in dx.iter_mut().enumerate() {
                        *d += g[j] * kind.derivative(xv[j], yv[j]);
                    }
                }
                Op::Gru { gi, gh, h, gates } => {
                    let (r, width) = (node.rows, node.cols);
                    let three_h = 3 * width;
                    let ghv = &nodes[*gh].value;
                    let hv = &nodes[*h].value;
                    let mut dgi = vec![0.0; r * three_h];
                    let mut dgh = vec![0.0; r * three_h];
                    let mut dh = vec![0.0; r * width];
                    for row in 0..r {
                        let gb = row * three_h;
                        for j in 0..width {
                            let gout = g[row * width + j];
                            let rg = gates[gb + j];
                            let zg = gates[gb + width + j];
                            let ng = gates[gb + 2 * width + j];
                            let hprev = hv[row * width + j];
                            let dn = gout * zg * (1.0 - ng * ng);
                            let dz = gout * (ng - hprev) * zg * (1.0 - zg);
                            let dr = dn * ghv[gb + 2 * width + j] * rg * (1.0 - rg);
                            dh[row * width + j] = gout * (1.0 - zg);
                            dgi[gb + j] = dr;
                            dgh[gb + j] = dr;
                            dgi[gb + width + j] = dz;
                            dgh[gb + width + j] = dz;
                            dgi[gb + 2 * width + j] = dn;
                            dgh[gb + 2 * width + j] = dn * rg;
                        }
                    }
                    add_into(slot(&mut grads, &mut sink, nodes, *gi), &dgi, 1.0);
                    add_into(slot(&mut grads, &mut sink, nodes, *gh), &dgh, 1.0);
                    add_into(slot(&mut grads, &mut sink, nodes, *h), &dh, 1.0);
                }
                Op::Gather { x, idx } => {
                    let c = nodes[*x].cols;
                    let dx = slot(&mut grads, &mut sink, nodes, *x);
                    for (row, &j) in idx.iter().enumerate() {
                        dx[row * c + j] += g[row];
                    }
                }
                Op::RowVecMat { a, w } => {
                    let (r, hw) = (node.rows, node.cols);
                    let n = nodes[*a].cols;
                    let wc = nodes[*w].cols;
                    {
                        let wv = &nodes[*w].value;
                        let da = slot(&mut grads, &mut sink, nodes, *a);
                        for row in 0..r {
                            let grow = &g[row * hw..(row + 1) * hw];
                            for i in 0..n {
                                let base = row * wc + i * hw;
                                let s: f64 = grow.iter().zip(&wv[base..base + hw]).map(|(x, y)| x * y).sum();
                                da[row * n + i] += s;
                            }
                        }
                    }
                    let av = &nodes[*a].value;
                    let dw = slot(&mut grads, &mut sink, nodes, *w);
                    for row in 0..r {
                        let grow = &g[row * hw..(row + 1) * hw];
                        for i in 0..n {
                            let s = av[row * n + i];
                            let base = row * wc + i * hw;
                            for (d, gv) in dw[base..base + hw].iter_mut().zip(grow) {
                                *d += s * gv;
                            }
                        }
                    }
                }
                Op::SumCols { x } => {
                    let c = nodes[*x].cols;
                    let dx = slot(&mut grads, &mut sink, nodes, *x);
                    for (row, gv) in g.iter().enumerate() {
                        for d in &mut dx[row * c..(row + 1) * c] {
                            *d += gv;
                        }
                    }
                }
                Op::SumAll { x } => {
                    let dx = slot(&mut grads, &mut sink, nodes, *x);
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = nodes[p].value.len();
                        add_into(slot(&mut grads, &mut sink, nodes, p), &g[offset..offset + n], 1.0);
                        offset += n;
                    }
                }
                Op::Reshape { x } => add_into(slot(&mut grads, &mut sink, nodes, *x), &g, 1.0),
                Op::SliceCols { x, start } => {
                    let (r, len) = (node.rows, node.cols);
                    let c = nodes[*x].cols;
                    let dx = slot(&mut grads, &mut sink, nodes, *x);
                    for row in 0..r {
                        for j in 0..len {
                            dx[row * c + start + j] += g[row * len + j];
                        }
                    }
                }
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }
}

/// Leaf gradients produced by one backward sweep.
#[derive(Debug)]
pub struct Gradients {
    tape: u32,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// `None` when `v` is not a leaf the loss depends on.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.idx as usize)?.as_deref()
    }

    /// Gradients for bound parameters in store order; unreachable
    /// parameters get zeros.
    pub fn collect(&self, bound: &[Var], store: &ParamStore) -> Vec<Tensor> {
        bound
            .iter()
            .zip(store.tensors())
            .map(|(v, t)| match self.get(*v) {
                Some(g) => Tensor {
                    shape: t.shape().to_vec(),
                    data: g.to_vec(),
                },
                None => Tensor::zeros(t.shape().to_vec()),
            })
            .collect()
    }
}

/// Gradient buffer for node `i`; a throwaway sink when `i` is constant.
fn slot<'g>(
    grads: &'g mut [Option<Vec<f64>>],
    sink: &'g mut Vec<f64>,
    nodes: &[Node<'_>],
    i: usize,
) -> &'g mut [f64] {
    if nodes[i].requires_grad {
        grads[i].get_or_insert_with(|| vec![0.0; nodes[i].value.len()])
    } else {
        sink.clear();
        sink.resize(nodes[i].value.len(), 0.0);
        sink
    }
}

fn add_into(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}

/// `C ← A·B + β·C` on strided row-major views.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs + (cols - 1) * cs + 1
        }
    };
    assert!(a.len() >= last(m, k, rsa, csa));
    assert!(b.len() >= last(k, n, rsb, csb));
    assert!(c.len() >= last(m, n, rsc, csc));
    // SAFETY: the asserts above bound every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}
