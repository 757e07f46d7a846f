use std::collections::HashMap;

use super::params::ParamStore;
use super::tensor::Tensor;
use super::DiffError;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Gradients keyed by parameter name. Produced by [`Tape::backward`]; applied
/// to a [`ParamStore`] in the store's own (insertion) order, so map iteration
/// order never influences arithmetic.
pub type GradMap = HashMap<String, Tensor>;

/// A primal/tangent pair with identical shapes; the result of a
/// Jacobian-vector product.
#[derive(Debug, Clone)]
pub struct DualTensor {
    pub primal: Tensor,
    pub tangent: Tensor,
}

impl DualTensor {
    pub fn new(primal: Tensor, tangent: Tensor) -> Result<Self, DiffError> {
        if primal.shape() != tangent.shape() {
            return Err(DiffError::ShapeMismatch {
                op: "dual",
                lhs: primal.shape().to_vec(),
                rhs: tangent.shape().to_vec(),
            });
        }
        Ok(Self { primal, tangent })
    }
}

const LN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    /// Input without a parameter name; gradient is discarded.
    Leaf,
    /// Named parameter pulled from a store; gradients accumulate under `name`.
    Param { name: String },
    /// Stop-gradient: value passes, derivatives (both modes) do not. The
    /// input edge is deliberately not stored — nothing propagates through.
    Detach,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Matmul(usize, usize),
    /// `A · Bᵀ` with `A: [m, k]`, `B: [n, k]`.
    MatmulNt(usize, usize),
    Relu(usize),
    Gelu(usize),
    Abs(usize),
    Sin(usize),
    Cos(usize),
    /// Row-wise normalization over the last axis with learned gain/bias.
    LayerNorm { x: usize, gamma: usize, beta: usize },
    /// Row-wise softmax over the last axis.
    Softmax(usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceRows { src: usize, start: usize, len: usize },
    SliceCols { src: usize, start: usize, len: usize },
    Reshape(usize),
    /// Prefix sums down the rows (axis 0).
    CumsumRows(usize),
    MeanAll(usize),
    SumAll(usize),
}

struct Node {
    value: Tensor,
    tangent: Option<Tensor>,
    op: Op,
}

/// A recorded computation. Operations append nodes; [`Tape::backward`] walks
/// the list in reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_cache: HashMap<String, Var>,
}

// ---------------------------------------------------------------------------
// data kernels
// ---------------------------------------------------------------------------

fn matmul_data(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += aik * brow[j];
            }
        }
    }
    out
}

/// `A · Bᵀ` with `A: [m, k]`, `B: [n, k]` → `[m, n]`.
fn matmul_nt_data(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut dot = 0.0;
            for kk in 0..k {
                dot += arow[kk] * brow[kk];
            }
            out[i * n + j] = dot;
        }
    }
    out
}

/// `Aᵀ · C` with `A: [m, k]`, `C: [m, n]` → `[k, n]`.
fn matmul_tn_data(a: &[f64], c: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let crow = &c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &aik) in arow.iter().enumerate() {
            let orow = &mut out[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += aik * crow[j];
            }
        }
    }
    out
}

fn gelu_value(x: f64) -> f64 {
    // tanh approximation
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let g = C * (x + 0.044715 * x * x * x);
    let t = g.tanh();
    let gp = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * gp
}

/// Shape of the result of broadcasting `a` against `b`, or an error if the
/// shapes are incompatible. Supported: equal shapes, either side scalar, and
/// matrix ⊕ row-vector (`[r, c]` with `[c]`).
fn broadcast_shape(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
) -> Result<Vec<usize>, DiffError> {
    if a.shape() == b.shape() {
        return Ok(a.shape().to_vec());
    }
    if b.is_scalar() {
        return Ok(a.shape().to_vec());
    }
    if a.is_scalar() {
        return Ok(b.shape().to_vec());
    }
    if a.rank() == 2 && b.rank() == 1 && a.shape()[1] == b.shape()[0] {
        return Ok(a.shape().to_vec());
    }
    if b.rank() == 2 && a.rank() == 1 && b.shape()[1] == a.shape()[0] {
        return Ok(b.shape().to_vec());
    }
    Err(DiffError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    })
}

/// Materialize `t` broadcast to `out_shape` (validated by `broadcast_shape`).
fn broadcast_full(t: &Tensor, out_shape: &[usize]) -> Vec<f64> {
    let out_len: usize = out_shape.iter().product();
    if t.shape() == out_shape {
        return t.data().to_vec();
    }
    if t.is_scalar() {
        return vec![t.data()[0]; out_len];
    }
    // row vector [c] tiled over [r, c]
    let c = t.len();
    let r = out_len / c;
    let mut out = Vec::with_capacity(out_len);
    for _ in 0..r {
        out.extend_from_slice(t.data());
    }
    out
}

/// Reduce a full-shape adjoint back down to an operand's shape by summing
/// over broadcast dimensions.
fn reduce_to_shape(full: &[f64], out_shape: &[usize], target: &[usize]) -> Vec<f64> {
    let target_len: usize = target.iter().product();
    if target == out_shape {
        return full.to_vec();
    }
    if target_len == 1 {
        return vec![full.iter().sum()];
    }
    // row vector [c] summed over the rows of [r, c]
    let c = target_len;
    let mut out = vec![0.0; c];
    for chunk in full.chunks(c) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    let _ = out_shape;
    out
}

fn add_into(acc: &mut Vec<f64>, delta: &[f64]) {
    debug_assert_eq!(acc.len(), delta.len());
    for (a, &d) in acc.iter_mut().zip(delta) {
        *a += d;
    }
}

// ---------------------------------------------------------------------------
// tape construction
// ---------------------------------------------------------------------------

impl Tape {
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

    /// Forward-mode derivative recorded for `v`, if any input tangent reaches
    /// it.
    pub fn tangent(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].tangent.as_ref()
    }

    fn push(&mut self, op: &'static str, node: Node) -> Result<Var, DiffError> {
        if !node.value.data().iter().all(|v| v.is_finite()) {
            return Err(DiffError::NonFinite { op });
        }
        if let Some(t) = &node.tangent {
            if !t.data().iter().all(|v| v.is_finite()) {
                return Err(DiffError::NonFinite { op });
            }
        }
        self.nodes.push(node);
        Ok(Var(self.nodes.len() - 1))
    }

    /// Record a plain input. Its gradient, if any, is computed and discarded.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            tangent: None,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Record an input carrying a forward-mode tangent of the same shape.
    pub fn leaf_with_tangent(
        &mut self,
        value: Tensor,
        tangent: Tensor,
    ) -> Result<Var, DiffError> {
        if value.shape() != tangent.shape() {
            return Err(DiffError::ShapeMismatch {
                op: "leaf_with_tangent",
                lhs: value.shape().to_vec(),
                rhs: tangent.shape().to_vec(),
            });
        }
        self.nodes.push(Node {
            value,
            tangent: Some(tangent),
            op: Op::Leaf,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Record a constant; alias of [`Tape::leaf`] kept for call-site intent.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value)
    }

    /// Bind a named parameter from `store`. Repeated calls with the same name
    /// return the same node, so gradients from every use accumulate together.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var, DiffError> {
        if let Some(&v) = self.param_cache.get(name) {
            return Ok(v);
        }
        let value = store
            .get(name)
            .ok_or_else(|| DiffError::UnknownParam {
                name: name.to_string(),
            })?
            .clone();
        self.nodes.push(Node {
            value,
            tangent: None,
            op: Op::Param {
                name: name.to_string(),
            },
        });
        let v = Var(self.nodes.len() - 1);
        self.param_cache.insert(name.to_string(), v);
        Ok(v)
    }

    /// Stop-gradient. The value flows forward unchanged; reverse-mode
    /// adjoints and forward-mode tangents both stop here.
    pub fn detach(&mut self, v: Var) -> Result<Var, DiffError> {
        let value = self.nodes[v.0].value.clone();
        self.push(
            "detach",
            Node {
                value,
                tangent: None,
                op: Op::Detach,
            },
        )
    }

    fn elementwise_binary(
        &mut self,
        opname: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make_op: impl Fn(usize, usize) -> Op,
        tangent_rule: impl Fn(&Self, &[usize]) -> Option<Vec<f64>>,
    ) -> Result<Var, DiffError> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out_shape = broadcast_shape(opname, av, bv)?;
        let af = broadcast_full(av, &out_shape);
        let bf = broadcast_full(bv, &out_shape);
        let data: Vec<f64> = af.iter().zip(&bf).map(|(&x, &y)| f(x, y)).collect();
        let tangent = tangent_rule(self, &out_shape)
            .map(|t| Tensor::from_parts(out_shape.clone(), t));
        self.push(
            opname,
            Node {
                value: Tensor::from_parts(out_shape, data),
                tangent,
                op: make_op(a.0, b.0),
            },
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.elementwise_binary(
            "add",
            a,
            b,
            |x, y| x + y,
            Op::Add,
            |tape, out_shape| {
                let ta = tape.nodes[a.0].tangent.as_ref();
                let tb = tape.nodes[b.0].tangent.as_ref();
                if ta.is_none() && tb.is_none() {
                    return None;
                }
                let n: usize = out_shape.iter().product();
                let mut t = vec![0.0; n];
                if let Some(ta) = ta {
                    add_into(&mut t, &broadcast_full(ta, out_shape));
                }
                if let Some(tb) = tb {
                    add_into(&mut t, &broadcast_full(tb, out_shape));
                }
                Some(t)
            },
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.elementwise_binary(
            "sub",
            a,
            b,
            |x, y| x - y,
            Op::Sub,
            |tape, out_shape| {
                let ta = tape.nodes[a.0].tangent.as_ref();
                let tb = tape.nodes[b.0].tangent.as_ref();
                if ta.is_none() && tb.is_none() {
                    return None;
                }
                let n: usize = out_shape.iter().product();
                let mut t = vec![0.0; n];
                if let Some(ta) = ta {
                    add_into(&mut t, &broadcast_full(ta, out_shape));
                }
                if let Some(tb) = tb {
                    for (acc, v) in t.iter_mut().zip(broadcast_full(tb, out_shape)) {
                        *acc -= v;
                    }
                }
                Some(t)
            },
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.elementwise_binary(
            "mul",
            a,
            b,
            |x, y| x * y,
            Op::Mul,
            |tape, out_shape| {
                let ta = tape.nodes[a.0].tangent.as_ref();
                let tb = tape.nodes[b.0].tangent.as_ref();
                if ta.is_none() && tb.is_none() {
                    return None;
                }
                let av = broadcast_full(&tape.nodes[a.0].value, out_shape);
                let bv = broadcast_full(&tape.nodes[b.0].value, out_shape);
                let n: usize = out_shape.iter().product();
                let mut t = vec![0.0; n];
                if let Some(ta) = ta {
                    for (acc, (ta, bv)) in t
                        .iter_mut()
                        .zip(broadcast_full(ta, out_shape).iter().zip(&bv))
                    {
                        *acc += ta * bv;
                    }
                }
                if let Some(tb) = tb {
                    for (acc, (tb, av)) in t
                        .iter_mut()
                        .zip(broadcast_full(tb, out_shape).iter().zip(&av))
                    {
                        *acc += tb * av;
                    }
                }
                Some(t)
            },
        )
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, DiffError> {
        if !factor.is_finite() {
            return Err(DiffError::NonFinite { op: "scale" });
        }
        let value = self.nodes[a.0].value.map(|v| v * factor);
        let tangent = self.nodes[a.0]
            .tangent
            .as_ref()
            .map(|t| t.map(|v| v * factor));
        self.push(
            "scale",
            Node {
                value,
                tangent,
                op: Op::Scale(a.0, factor),
            },
        )
    }

    fn require_2d(
        &self,
        op: &'static str,
        v: Var,
    ) -> Result<(usize, usize), DiffError> {
        let t = &self.nodes[v.0].value;
        if t.rank() == 2 {
            Ok((t.shape()[0], t.shape()[1]))
        } else {
            Err(DiffError::BadShape {
                op,
                expected: "rank-2 tensor",
                got: t.shape().to_vec(),
            })
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (m, k) = self.require_2d("matmul", a)?;
        let (k2, n) = self.require_2d("matmul", b)?;
        if k != k2 {
            return Err(DiffError::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let av = self.nodes[a.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let data = matmul_data(av, bv, m, k, n);
        let tangent = {
            let ta = self.nodes[a.0].tangent.as_ref();
            let tb = self.nodes[b.0].tangent.as_ref();
            if ta.is_none() && tb.is_none() {
                None
            } else {
                let mut t = vec![0.0; m * n];
                if let Some(ta) = ta {
                    add_into(&mut t, &matmul_data(ta.data(), bv, m, k, n));
                }
                if let Some(tb) = tb {
                    add_into(&mut t, &matmul_data(av, tb.data(), m, k, n));
                }
                Some(Tensor::from_parts(vec![m, n], t))
            }
        };
        self.push(
            "matmul",
            Node {
                value: Tensor::from_parts(vec![m, n], data),
                tangent,
                op: Op::Matmul(a.0, b.0),
            },
        )
    }

    /// `A · Bᵀ`: `[m, k] × [n, k] → [m, n]`. Used for attention scores.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (m, k) = self.require_2d("matmul_nt", a)?;
        let (n, k2) = self.require_2d("matmul_nt", b)?;
        if k != k2 {
            return Err(DiffError::ShapeMismatch {
                op: "matmul_nt",
                lhs: vec![m, k],
                rhs: vec![n, k2],
            });
        }
        let av = self.nodes[a.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let data = matmul_nt_data(av, bv, m, k, n);
        let tangent = {
            let ta = self.nodes[a.0].tangent.as_ref();
            let tb = self.nodes[b.0].tangent.as_ref();
            if ta.is_none() && tb.is_none() {
                None
            } else {
                let mut t = vec![0.0; m * n];
                if let Some(ta) = ta {
                    add_into(&mut t, &matmul_nt_data(ta.data(), bv, m, k, n));
                }
                if let Some(tb) = tb {
                    add_into(&mut t, &matmul_nt_data(av, tb.data(), m, k, n));
                }
                Some(Tensor::from_parts(vec![m, n], t))
            }
        };
        self.push(
            "matmul_nt",
            Node {
                value: Tensor::from_parts(vec![m, n], data),
                tangent,
                op: Op::MatmulNt(a.0, b.0),
            },
        )
    }

    fn elementwise_unary(
        &mut self,
        opname: &'static str,
        a: Var,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64) -> f64,
        make_op: impl Fn(usize) -> Op,
    ) -> Result<Var, DiffError> {
        let value = self.nodes[a.0].value.map(&f);
        let tangent = self.nodes[a.0].tangent.as_ref().map(|t| {
            let x = &self.nodes[a.0].value;
            let data: Vec<f64> = t
                .data()
                .iter()
                .zip(x.data())
                .map(|(&dt, &xv)| dt * df(xv))
                .collect();
            Tensor::from_parts(x.shape().to_vec(), data)
        });
        self.push(
            opname,
            Node {
                value,
                tangent,
                op: make_op(a.0),
            },
        )
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, DiffError> {
        self.elementwise_unary(
            "relu",
            a,
            |x| x.max(0.0),
            |x| if x > 0.0 { 1.0 } else { 0.0 },
            Op::Relu,
        )
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var, DiffError> {
        self.elementwise_unary("gelu", a, gelu_value, gelu_deriv, Op::Gelu)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var, DiffError> {
        self.elementwise_unary(
            "abs",
            a,
            f64::abs,
            |x| {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            },
            Op::Abs,
        )
    }

    pub fn sin(&mut self, a: Var) -> Result<Var, DiffError> {
        self.elementwise_unary("sin", a, f64::sin, f64::cos, Op::Sin)
    }

    pub fn cos(&mut self, a: Var) -> Result<Var, DiffError> {
        self.elementwise_unary("cos", a, f64::cos, |x| -x.sin(), Op::Cos)
    }

    /// Row-wise layer normalization over the last axis, with gain `gamma` and
    /// bias `beta` (both `[c]`).
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, DiffError> {
        let (r, c) = self.require_2d("layernorm", x)?;
        for (v, what) in [(gamma, "gamma"), (beta, "beta")] {
            let t = &self.nodes[v.0].value;
            if t.rank() != 1 || t.len() != c {
                let _ = what;
                return Err(DiffError::ShapeMismatch {
                    op: "layernorm",
                    lhs: vec![r, c],
                    rhs: t.shape().to_vec(),
                });
            }
        }
        let xv = self.nodes[x.0].value.data();
        let g = self.nodes[gamma.0].value.data();
        let b = self.nodes[beta.0].value.data();
        let mut data = vec![0.0; r * c];
        let mut stats = Vec::with_capacity(r); // (mean, rstd) per row
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rstd = 1.0 / (var + LN_EPS).sqrt();
            stats.push((mean, rstd));
            for j in 0..c {
                data[i * c + j] = (row[j] - mean) * rstd * g[j] + b[j];
            }
        }
        let tangent = {
            let tx = self.nodes[x.0].tangent.as_ref();
            let tg = self.nodes[gamma.0].tangent.as_ref();
            let tb = self.nodes[beta.0].tangent.as_ref();
            if tx.is_none() && tg.is_none() && tb.is_none() {
                None
            } else {
                let mut t = vec![0.0; r * c];
                for i in 0..r {
                    let (mean, rstd) = stats[i];
                    let row = &xv[i * c..(i + 1) * c];
                    if let Some(tx) = tx {
                        let dxrow = &tx.data()[i * c..(i + 1) * c];
                        let dmean = dxrow.iter().sum::<f64>() / c as f64;
                        let dvar = 2.0
                            * row
                                .iter()
                                .zip(dxrow)
                                .map(|(&xv, &dx)| (xv - mean) * dx)
                                .sum::<f64>()
                            / c as f64;
                        let drstd = -0.5 * rstd * rstd * rstd * dvar;
                        for j in 0..c {
                            let cvj = row[j] - mean;
                            let dxhat = (dxrow[j] - dmean) * rstd + cvj * drstd;
                            t[i * c + j] += dxhat * g[j];
                        }
                    }
                    for j in 0..c {
                        let xhat = (row[j] - mean) * rstd;
                        if let Some(tg) = tg {
                            t[i * c + j] += xhat * tg.data()[j];
                        }
                        if let Some(tb) = tb {
                            t[i * c + j] += tb.data()[j];
                        }
                    }
                }
                Some(Tensor::from_parts(vec![r, c], t))
            }
        };
        self.push(
            "layernorm",
            Node {
                value: Tensor::from_parts(vec![r, c], data),
                tangent,
                op: Op::LayerNorm {
                    x: x.0,
                    gamma: gamma.0,
                    beta: beta.0,
                },
            },
        )
    }

    /// Row-wise softmax over the last axis. Rows sum to one exactly up to
    /// floating-point rounding.
    pub fn softmax(&mut self, a: Var) -> Result<Var, DiffError> {
        let (r, c) = self.require_2d("softmax", a)?;
        let xv = self.nodes[a.0].value.data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..c {
                let e = (row[j] - max).exp();
                data[i * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                data[i * c + j] /= sum;
            }
        }
        let tangent = self.nodes[a.0].tangent.as_ref().map(|tx| {
            let mut t = vec![0.0; r * c];
            for i in 0..r {
                let y = &data[i * c..(i + 1) * c];
                let dx = &tx.data()[i * c..(i + 1) * c];
                let dot: f64 = y.iter().zip(dx).map(|(&y, &d)| y * d).sum();
                for j in 0..c {
                    t[i * c + j] = y[j] * (dx[j] - dot);
                }
            }
            Tensor::from_parts(vec![r, c], t)
        });
        self.push(
            "softmax",
            Node {
                value: Tensor::from_parts(vec![r, c], data),
                tangent,
                op: Op::Softmax(a.0),
            },
        )
    }

    fn concat(
        &mut self,
        opname: &'static str,
        parts: &[Var],
        axis: usize,
    ) -> Result<Var, DiffError> {
        if parts.is_empty() {
            return Err(DiffError::EmptyConcat);
        }
        let dims: Vec<(usize, usize)> = parts
            .iter()
            .map(|&v| self.require_2d(opname, v))
            .collect::<Result<_, _>>()?;
        let fixed = if axis == 0 { dims[0].1 } else { dims[0].0 };
        for &(r, c) in &dims {
            let f = if axis == 0 { c } else { r };
            if f != fixed {
                return Err(DiffError::ShapeMismatch {
                    op: opname,
                    lhs: vec![dims[0].0, dims[0].1],
                    rhs: vec![r, c],
                });
            }
        }
        let any_tangent = parts
            .iter()
            .any(|&v| self.nodes[v.0].tangent.is_some());
        let (out_r, out_c) = if axis == 0 {
            (dims.iter().map(|d| d.0).sum(), fixed)
        } else {
            (fixed, dims.iter().map(|d| d.1).sum())
        };
        let mut data = Vec::with_capacity(out_r * out_c);
        let mut tdata = if any_tangent {
            Vec::with_capacity(out_r * out_c)
        } else {
            Vec::new()
        };
        if axis == 0 {
            for &v in parts {
                data.extend_from_slice(self.nodes[v.0].value.data());
                if any_tangent {
                    match &self.nodes[v.0].tangent {
                        Some(t) => tdata.extend_from_slice(t.data()),
                        None => tdata.extend(
                            std::iter::repeat(0.0).take(self.nodes[v.0].value.len()),
                        ),
                    }
                }
            }
        } else {
            for i in 0..out_r {
                for (&v, &(_, c)) in parts.iter().zip(&dims) {
                    data.extend_from_slice(
                        &self.nodes[v.0].value.data()[i * c..(i + 1) * c],
                    );
                    if any_tangent {
                        match &self.nodes[v.0].tangent {
                            Some(t) => {
                                tdata.extend_from_slice(&t.data()[i * c..(i + 1) * c])
                            }
                            None => tdata.extend(std::iter::repeat(0.0).take(c)),
                        }
                    }
                }
            }
        }
        let tangent = any_tangent.then(|| Tensor::from_parts(vec![out_r, out_c], tdata));
        let idx: Vec<usize> = parts.iter().map(|v| v.0).collect();
        self.push(
            opname,
            Node {
                value: Tensor::from_parts(vec![out_r, out_c], data),
                tangent,
                op: if axis == 0 {
                    Op::ConcatRows(idx)
                } else {
                    Op::ConcatCols(idx)
                },
            },
        )
    }

    /// Stack rank-2 tensors vertically; all inputs must share a column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        self.concat("concat_rows", parts, 0)
    }

    /// Stack rank-2 tensors side by side; all inputs must share a row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        self.concat("concat_cols", parts, 1)
    }

    pub fn slice_rows(&mut self, src: Var, start: usize, len: usize) -> Result<Var, DiffError> {
        let (r, c) = self.require_2d("slice_rows", src)?;
        if start + len > r {
            return Err(DiffError::BadSlice {
                op: "slice_rows",
                start,
                len,
                extent: r,
            });
        }
        let value = Tensor::from_parts(
            vec![len, c],
            self.nodes[src.0].value.data()[start * c..(start + len) * c].to_vec(),
        );
        let tangent = self.nodes[src.0].tangent.as_ref().map(|t| {
            Tensor::from_parts(vec![len, c], t.data()[start * c..(start + len) * c].to_vec())
        });
        self.push(
            "slice_rows",
            Node {
                value,
                tangent,
                op: Op::SliceRows {
                    src: src.0,
                    start,
                    len,
                },
            },
        )
    }

    pub fn slice_cols(&mut self, src: Var, start: usize, len: usize) -> Result<Var, DiffError> {
        let (r, c) = self.require_2d("slice_cols", src)?;
        if start + len > c {
            return Err(DiffError::BadSlice {
                op: "slice_cols",
                start,
                len,
                extent: c,
            });
        }
        let gather = |t: &Tensor| {
            let mut out = Vec::with_capacity(r * len);
            for i in 0..r {
                out.extend_from_slice(&t.data()[i * c + start..i * c + start + len]);
            }
            Tensor::from_parts(vec![r, len], out)
        };
        let value = gather(&self.nodes[src.0].value);
        let tangent = self.nodes[src.0].tangent.as_ref().map(gather);
        self.push(
            "slice_cols",
            Node {
                value,
                tangent,
                op: Op::SliceCols {
                    src: src.0,
                    start,
                    len,
                },
            },
        )
    }

    pub fn reshape(&mut self, src: Var, shape: Vec<usize>) -> Result<Var, DiffError> {
        let t = &self.nodes[src.0].value;
        let n: usize = shape.iter().product();
        if n != t.len() {
            return Err(DiffError::LengthMismatch {
                shape,
                len: t.len(),
            });
        }
        let value = Tensor::from_parts(shape.clone(), t.data().to_vec());
        let tangent = self.nodes[src.0]
            .tangent
            .as_ref()
            .map(|t| Tensor::from_parts(shape.clone(), t.data().to_vec()));
        self.push(
            "reshape",
            Node {
                value,
                tangent,
                op: Op::Reshape(src.0),
            },
        )
    }

    /// Prefix sums down the rows: `out[i] = Σ_{i' ≤ i} x[i']`. Turns
    /// per-step deltas into cumulative waypoints while staying on the tape.
    pub fn cumsum_rows(&mut self, src: Var) -> Result<Var, DiffError> {
        let (r, c) = self.require_2d("cumsum_rows", src)?;
        let cumsum = |t: &Tensor| {
            let mut out = t.data().to_vec();
            for i in 1..r {
                for j in 0..c {
                    out[i * c + j] += out[(i - 1) * c + j];
                }
            }
            Tensor::from_parts(vec![r, c], out)
        };
        let value = cumsum(&self.nodes[src.0].value);
        let tangent = self.nodes[src.0].tangent.as_ref().map(cumsum);
        self.push(
            "cumsum_rows",
            Node {
                value,
                tangent,
                op: Op::CumsumRows(src.0),
            },
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var, DiffError> {
        let t = &self.nodes[a.0].value;
        let n = t.len().max(1);
        let value = Tensor::scalar(t.data().iter().sum::<f64>() / n as f64);
        let tangent = self.nodes[a.0]
            .tangent
            .as_ref()
            .map(|t| Tensor::scalar(t.data().iter().sum::<f64>() / n as f64));
        self.push(
            "mean_all",
            Node {
                value,
                tangent,
                op: Op::MeanAll(a.0),
            },
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var, DiffError> {
        let t = &self.nodes[a.0].value;
        let value = Tensor::scalar(t.data().iter().sum::<f64>());
        let tangent = self.nodes[a.0]
            .tangent
            .as_ref()
            .map(|t| Tensor::scalar(t.data().iter().sum::<f64>()));
        self.push(
            "sum_all",
            Node {
                value,
                tangent,
                op: Op::SumAll(a.0),
            },
        )
    }

    // -----------------------------------------------------------------------
    // reverse mode
    // -----------------------------------------------------------------------

    /// Reverse-mode sweep from a scalar `loss`. Returns gradients for every
    /// named parameter reachable from `loss`; pure inputs’ adjoints are
    /// dropped, and `detach` boundaries stop propagation.
    pub fn backward(&self, loss: Var) -> Result<GradMap, DiffError> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(DiffError::NotScalar {
                shape: self.nodes[loss.0].value.shape().to_vec(),
            });
        }
        let mut adj: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        adj.resize(loss.0 + 1, None);
        adj[loss.0] = Some(vec![1.0]);
        let mut grads: GradMap = HashMap::new();

        for i in (0..=loss.0).rev() {
            let Some(d) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            let out_shape = node.value.shape().to_vec();
            let acc = |adj: &mut Vec<Option<Vec<f64>>>, idx: usize, delta: Vec<f64>| {
                match &mut adj[idx] {
                    Some(existing) => add_into(existing, &delta),
                    slot @ None => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Leaf | Op::Detach => {}
                Op::Param { name } => match grads.entry(name.clone()) {
                    std::collections::hash_map::Entry::Occupied(mut e) => {
                        let merged: Vec<f64> = e
                            .get()
                            .data()
                            .iter()
                            .zip(&d)
                            .map(|(&a, &b)| a + b)
                            .collect();
                        *e.get_mut() = Tensor::from_parts(out_shape, merged);
                    }
                    std::collections::hash_map::Entry::Vacant(e) => {
                        e.insert(Tensor::from_parts(out_shape, d.clone()));
                    }
                },
                Op::Add(a, b) => {
                    let ash = self.nodes[*a].value.shape().to_vec();
                    let bsh = self.nodes[*b].value.shape().to_vec();
                    acc(&mut adj, *a, reduce_to_shape(&d, &out_shape, &ash));
                    acc(&mut adj, *b, reduce_to_shape(&d, &out_shape, &bsh));
                }
                Op::Sub(a, b) => {
                    let ash = self.nodes[*a].value.shape().to_vec();
                    let bsh = self.nodes[*b].value.shape().to_vec();
                    acc(&mut adj, *a, reduce_to_shape(&d, &out_shape, &ash));
                    let neg: Vec<f64> = d.iter().map(|&v| -v).collect();
                    acc(&mut adj, *b, reduce_to_shape(&neg, &out_shape, &bsh));
                }
                Op::Mul(a, b) => {
                    let av = &self.nodes[*a].value;
                    let bv = &self.nodes[*b].value;
                    let bfull = broadcast_full(bv, &out_shape);
                    let afull = broadcast_full(av, &out_shape);
                    let da: Vec<f64> = d.iter().zip(&bfull).map(|(&d, &b)| d * b).collect();
                    let db: Vec<f64> = d.iter().zip(&afull).map(|(&d, &a)| d * a).collect();
                    acc(&mut adj, *a, reduce_to_shape(&da, &out_shape, av.shape()));
                    acc(&mut adj, *b, reduce_to_shape(&db, &out_shape, bv.shape()));
                }
                Op::Scale(a, factor) => {
                    acc(&mut adj, *a, d.iter().map(|&v| v * factor).collect());
                }
                Op::Matmul(a, b) => {
                    let av = &self.nodes[*a].value;
                    let bv = &self.nodes[*b].value;
                    let (m, k) = av.dims2();
                    let (_, n) = bv.dims2();
                    // dA = dC · Bᵀ ; dB = Aᵀ · dC
                    acc(&mut adj, *a, matmul_nt_data(&d, bv.data(), m, n, k));
                    acc(&mut adj, *b, matmul_tn_data(av.data(), &d, m, k, n));
                }
                Op::MatmulNt(a, b) => {
                    let av = &self.nodes[*a].value;
                    let bv = &self.nodes[*b].value;
                    let (m, k) = av.dims2();
                    let (n, _) = bv.dims2();
                    // C = A·Bᵀ ⇒ dA = dC · B ; dB = dCᵀ · A
                    acc(&mut adj, *a, matmul_data(&d, bv.data(), m, n, k));
                    acc(&mut adj, *b, matmul_tn_data(&d, av.data(), m, n, k));
                }
                Op::Relu(a) => {
                    let x = self.nodes[*a].value.data();
                    acc(
                        &mut adj,
                        *a,
                        d.iter()
                            .zip(x)
                            .map(|(&d, &x)| if x > 0.0 { d } else { 0.0 })
                            .collect(),
                    );
                }
                Op::Gelu(a) => {
                    let x = self.nodes[*a].value.data();
                    acc(
                        &mut adj,
                        *a,
                        d.iter().zip(x).map(|(&d, &x)| d * gelu_deriv(x)).collect(),
                    );
                }
                Op::Abs(a) => {
                    let x = self.nodes[*a].value.data();
                    acc(
                        &mut adj,
                        *a,
                        d.iter()
                            .zip(x)
                            .map(|(&d, &x)| {
                                if x > 0.0 {
                                    d
                                } else if x < 0.0 {
                                    -d
                                } else {
                                    0.0
                                }
                            })
                            .collect(),
                    );
                }
                Op::Sin(a) => {
                    let x = self.nodes[*a].value.data();
                    acc(
                        &mut adj,
                        *a,
                        d.iter().zip(x).map(|(&d, &x)| d * x.cos()).collect(),
                    );
                }
                Op::Cos(a) => {
                    let x = self.nodes[*a].value.data();
                    acc(
                        &mut adj,
                        *a,
                        d.iter().zip(x).map(|(&d, &x)| -d * x.sin()).collect(),
                    );
                }
                Op::LayerNorm { x, gamma, beta } => {
                    let xv = &self.nodes[*x].value;
                    let (r, c) = xv.dims2();
                    let g = self.nodes[*gamma].value.data();
                    let mut dx = vec![0.0; r * c];
                    let mut dg = vec![0.0; c];
                    let mut db = vec![0.0; c];
                    for i in 0..r {
                        let row = &xv.data()[i * c..(i + 1) * c];
                        let drow = &d[i * c..(i + 1) * c];
                        let mean = row.iter().sum::<f64>() / c as f64;
                        let var = row
                            .iter()
                            .map(|&v| (v - mean) * (v - mean))
                            .sum::<f64>()
                            / c as f64;
                        let rstd = 1.0 / (var + LN_EPS).sqrt();
                        let xhat: Vec<f64> =
                            row.iter().map(|&v| (v - mean) * rstd).collect();
                        let dxhat: Vec<f64> =
                            drow.iter().zip(g).map(|(&d, &g)| d * g).collect();
                        let mean_dxhat = dxhat.iter().sum::<f64>() / c as f64;
                        let mean_dxhat_xhat = dxhat
                            .iter()
                            .zip(&xhat)
                            .map(|(&a, &b)| a * b)
                            .sum::<f64>()
                            / c as f64;
                        for j in 0..c {
                            dx[i * c + j] = rstd
                                * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                            dg[j] += drow[j] * xhat[j];
                            db[j] += drow[j];
                        }
                    }
                    acc(&mut adj, *x, dx);
                    acc(&mut adj, *gamma, dg);
                    acc(&mut adj, *beta, db);
                }
                Op::Softmax(a) => {
                    let y = node.value.data();
                    let (r, c) = node.value.dims2();
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        let yrow = &y[i * c..(i + 1) * c];
                        let drow = &d[i * c..(i + 1) * c];
                        let dot: f64 = yrow.iter().zip(drow).map(|(&y, &d)| y * d).sum();
                        for j in 0..c {
                            dx[i * c + j] = yrow[j] * (drow[j] - dot);
                        }
                    }
                    acc(&mut adj, *a, dx);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.nodes[p].value.len();
                        acc(&mut adj, p, d[offset..offset + n].to_vec());
                        offset += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let out_c = node.value.dims2().1;
                    let r = node.value.dims2().0;
                    let mut col = 0;
                    for &p in parts {
                        let c = self.nodes[p].value.dims2().1;
                        let mut dp = Vec::with_capacity(r * c);
                        for i in 0..r {
                            dp.extend_from_slice(&d[i * out_c + col..i * out_c + col + c]);
                        }
                        acc(&mut adj, p, dp);
                        col += c;
                    }
                }
                Op::SliceRows { src, start, len } => {
                    let (r, c) = self.nodes[*src].value.dims2();
                    let mut ds = vec![0.0; r * c];
                    ds[start * c..(start + len) * c].copy_from_slice(&d);
                    acc(&mut adj, *src, ds);
                }
                Op::SliceCols { src, start, len } => {
                    let (r, c) = self.nodes[*src].value.dims2();
                    let mut ds = vec![0.0; r * c];
                    for i in 0..r {
                        ds[i * c + start..i * c + start + len]
                            .copy_from_slice(&d[i * len..(i + 1) * len]);
                    }
                    acc(&mut adj, *src, ds);
                }
                Op::Reshape(src) => {
                    acc(&mut adj, *src, d);
                }
                Op::CumsumRows(src) => {
                    let (r, c) = node.value.dims2();
                    // out[i] = Σ_{i'≤i} x[i']  ⇒  dx[i] = Σ_{i'≥i} dout[i']
                    let mut ds = d.clone();
                    for i in (0..r.saturating_sub(1)).rev() {
                        for j in 0..c {
                            ds[i * c + j] += ds[(i + 1) * c + j];
                        }
                    }
                    acc(&mut adj, *src, ds);
                }
                Op::MeanAll(a) => {
                    let n = self.nodes[*a].value.len().max(1);
                    let v = d[0] / n as f64;
                    acc(&mut adj, *a, vec![v; self.nodes[*a].value.len()]);
                }
                Op::SumAll(a) => {
                    acc(&mut adj, *a, vec![d[0]; self.nodes[*a].value.len()]);
                }
            }
        }
        Ok(grads)
    }
}

/// Run `f` on a fresh tape with the given leaves (each optionally carrying a
/// tangent) and return the output's primal and tangent. A missing output
/// tangent is reported as zeros.
pub fn jvp<F>(inputs: &[(Tensor, Option<Tensor>)], f: F) -> Result<DualTensor, DiffError>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Var, DiffError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|(v, t)| match t {
            Some(t) => tape.leaf_with_tangent(v.clone(), t.clone()),
            None => Ok(tape.leaf(v.clone())),
        })
        .collect::<Result<_, _>>()?;
    let out = f(&mut tape, &vars)?;
    let primal = tape.value(out).clone();
    let tangent = tape
        .tangent(out)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(primal.shape()));
    DualTensor::new(primal, tangent)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffkit::params::{xavier_uniform, ParamStore};
    use crate::rng::rng_from;

    // Central finite differences against reverse-mode gradients for every
    // parameter scalar. `build` must be a pure function of the store.
    fn fd_grad_check(
        store: &ParamStore,
        build: &dyn Fn(&mut Tape, &ParamStore) -> Result<Var, DiffError>,
        tol: f64,
    ) {
        let loss_of = |s: &ParamStore| -> f64 {
            let mut tape = Tape::new();
            let out = build(&mut tape, s).expect("build failed");
            tape.value(out).item().expect("loss must be scalar")
        };
        let mut tape = Tape::new();
        let out = build(&mut tape, store).expect("build failed");
        let grads = tape.backward(out).expect("backward failed");

        let eps = 1e-5;
        for (name, value) in store.iter() {
            let grad = grads.get(name).cloned().unwrap_or_else(|| {
                Tensor::zeros(value.shape())
            });
            for idx in 0..value.len() {
                let mut plus = store.clone();
                let mut minus = store.clone();
                let mut d_plus = value.data().to_vec();
                let mut d_minus = value.data().to_vec();
                d_plus[idx] += eps;
                d_minus[idx] -= eps;
                plus.set_value(name, Tensor::from_parts(value.shape().to_vec(), d_plus))
                    .unwrap();
                minus
                    .set_value(name, Tensor::from_parts(value.shape().to_vec(), d_minus))
                    .unwrap();
                let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * eps);
                let got = grad.data()[idx];
                let scale = 1.0_f64.max(fd.abs()).max(got.abs());
                assert!(
                    (fd - got).abs() / scale < tol,
                    "param {name}[{idx}]: fd {fd} vs reverse {got}"
                );
            }
        }
    }

    fn test_store(seed: u64, specs: &[(&str, &[usize])]) -> ParamStore {
        let mut rng = rng_from(seed);
        let mut store = ParamStore::new();
        for (name, shape) in specs {
            let t = match shape.len() {
                2 => xavier_uniform(&mut rng, shape[0], shape[1]),
                _ => {
                    let n: usize = shape.iter().product();
                    let data: Vec<f64> = (0..n)
                        .map(|_| crate::rng::standard_normal(&mut rng) * 0.5)
                        .collect();
                    Tensor::from_parts(shape.to_vec(), data)
                }
            };
            store.insert(name, t).unwrap();
        }
        store
    }

    #[test]
    fn elementwise_and_broadcast_gradients() {
        let store = test_store(
            1,
            &[("a", &[3, 4]), ("b", &[3, 4]), ("row", &[4]), ("s", &[1])],
        );
        let build = |tape: &mut Tape, s: &ParamStore| {
            let a = tape.param(s, "a")?;
            let b = tape.param(s, "b")?;
            let row = tape.param(s, "row")?;
            let sc = tape.param(s, "s")?;
            let x = tape.add(a, b)?; // same shape
            let x = tape.mul(x, row)?; // [3,4] ∘ [4] row broadcast
            let x = tape.sub(x, sc)?; // scalar broadcast
            let x = tape.mul(x, x)?;
            tape.mean_all(x)
        };
        fd_grad_check(&store, &build, 1e-6);
    }

    #[test]
    fn matmul_family_gradients() {
        let store = test_store(2, &[("w1", &[3, 5]), ("w2", &[4, 5]), ("x", &[2, 3])]);
        let build = |tape: &mut Tape, s: &ParamStore| {
            let w1 = tape.param(s, "w1")?;
            let w2 = tape.param(s, "w2")?;
            let x = tape.param(s, "x")?;
            let h = tape.matmul(x, w1)?; // [2,5]
            let scores = tape.matmul_nt(h, w2)?; // [2,4]
            let sq = tape.mul(scores, scores)?;
            tape.mean_all(sq)
        };
        fd_grad_check(&store, &build, 1e-6);
    }

    #[test]
    fn nonlinearity_gradients() {
        // Values sit away from relu/abs kinks so FD is valid.
        let mut store = ParamStore::new();
        store
            .insert(
                "x",
                Tensor::matrix(2, 3, vec![0.7, -1.3, 2.1, -0.4, 1.9, -2.6]).unwrap(),
            )
            .unwrap();
        let build = |tape: &mut Tape, s: &ParamStore| {
            let x = tape.param(s, "x")?;
            let r = tape.relu(x)?;
            let g = tape.gelu(x)?;
            let a = tape.abs(x)?;
            let sn = tape.sin(x)?;
            let cs = tape.cos(x)?;
            let sum = tape.add(r, g)?;
            let sum = tape.add(sum, a)?;
            let sum = tape.add(sum, sn)?;
            let sum = tape.add(sum, cs)?;
            let sq = tape.mul(sum, sum)?;
            tape.mean_all(sq)
        };
        fd_grad_check(&store, &build, 1e-6);
    }

    #[test]
    fn layernorm_and_softmax_gradients() {
        let store = test_store(3, &[("x", &[3, 6]), ("g", &[6]), ("b", &[6])]);
        let build = |tape: &mut Tape, s: &ParamStore| {
            let x = tape.param(s, "x")?;
            let g = tape.param(s, "g")?;
            let b = tape.param(s, "b")?;
            let ln = tape.layernorm(x, g, b)?;
            let sm = tape.softmax(ln)?;
            // weighted scalar readout so softmax grads are nontrivial
            let w = tape.constant(
                Tensor::matrix(
                    3,
                    6,
                    (0..18).map(|i| (i as f64) * 0.1 - 0.9).collect(),
                )
                .unwrap(),
            );
            let prod = tape.mul(sm, w)?;
            tape.sum_all(prod)
        };
        fd_grad_check(&store, &build, 1e-6);
    }

    #[test]
    fn shape_op_gradients() {
        let store = test_store(4, &[("x", &[4, 6]), ("y", &[2, 6])]);
        let build = |tape: &mut Tape, s: &ParamStore| {
            let x = tape.param(s, "x")?;
            let y = tape.param(s, "y")?;
            let top = tape.slice_rows(x, 0, 2)?;
            let left = tape.slice_cols(x, 0, 3)?;
            let cat = tape.concat_rows(&[top, y])?; // [4,6]
            let wide = tape.concat_cols(&[left, left])?; // repeated input [4,6]
            let sum = tape.add(cat, wide)?;
            let cs = tape.cumsum_rows(sum)?;
            let flat = tape.reshape(cs, vec![24])?;
            let sq = tape.mul(flat, flat)?;
            tape.mean_all(sq)
        };
        fd_grad_check(&store, &build, 1e-6);
    }

    #[test]
    fn attention_block_gradients() {
        // Multi-head-shaped composite: per-head slices, scaled dot-product,
        // softmax, value mix, concat, residual + layernorm.
        let store = test_store(
            5,
            &[
                ("wq", &[6, 6]),
                ("wk", &[6, 6]),
                ("wv", &[6, 6]),
                ("g", &[6]),
                ("b", &[6]),
            ],
        );
        let q_in = Tensor::matrix(2, 6, (0..12).map(|i| 0.2 * i as f64 - 1.0).collect()).unwrap();
        let kv_in = Tensor::matrix(3, 6, (0..18).map(|i| 0.1 * i as f64 - 0.7).collect()).unwrap();
        let build = move |tape: &mut Tape, s: &ParamStore| {
            let q_in = tape.constant(q_in.clone());
            let kv_in = tape.constant(kv_in.clone());
            let wq = tape.param(s, "wq")?;
            let wk = tape.param(s, "wk")?;
            let wv = tape.param(s, "wv")?;
            let q = tape.matmul(q_in, wq)?;
            let k = tape.matmul(kv_in, wk)?;
            let v = tape.matmul(kv_in, wv)?;
            let mut heads = Vec::new();
            for h in 0..2 {
                let qh = tape.slice_cols(q, h * 3, 3)?;
                let kh = tape.slice_cols(k, h * 3, 3)?;
                let vh = tape.slice_cols(v, h * 3, 3)?;
                let scores = tape.matmul_nt(qh, kh)?;
                let scores = tape.scale(scores, 1.0 / (3.0_f64).sqrt())?;
                let attn = tape.softmax(scores)?;
                heads.push(tape.matmul(attn, vh)?);
            }
            let mixed = tape.concat_cols(&heads)?;
            let res = tape.add(mixed, q_in)?;
            let g = tape.param(s, "g")?;
            let b = tape.param(s, "b")?;
            let out = tape.layernorm(res, g, b)?;
            let sq = tape.mul(out, out)?;
            tape.mean_all(sq)
        };
        fd_grad_check(&store, &build, 1e-6);
    }

    #[test]
    fn detach_blocks_reverse_mode() {
        let store = test_store(6, &[("w", &[2, 2])]);
        // loss = mean(detach(w∘w) ∘ w): gradient sees w only through the
        // non-detached factor.
        let mut tape = Tape::new();
        let w = tape.param(&store, "w").unwrap();
        let sq = tape.mul(w, w).unwrap();
        let frozen = tape.detach(sq).unwrap();
        let prod = tape.mul(frozen, w).unwrap();
        let loss = tape.mean_all(prod).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = grads.get("w").unwrap();
        let wv = store.get("w").unwrap();
        // d/dw of (c·w)/n with c = w² held constant: c/n = w²/4
        for (got, &x) in g.data().iter().zip(wv.data()) {
            let expect = x * x / 4.0;
            assert!(
                (got - expect).abs() < 1e-12,
                "detach leaked: got {got}, expected {expect}"
            );
        }
    }

    #[test]
    fn detach_only_graph_has_no_param_grads() {
        let store = test_store(7, &[("w", &[3, 3])]);
        let mut tape = Tape::new();
        let w = tape.param(&store, "w").unwrap();
        let d = tape.detach(w).unwrap();
        let sq = tape.mul(d, d).unwrap();
        let loss = tape.mean_all(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(
            grads.is_empty(),
            "no gradient should reach any parameter through detach"
        );
    }

    #[test]
    fn param_reuse_accumulates_once_per_use() {
        let store = test_store(8, &[("w", &[2, 3])]);
        // loss = sum(w) + 2·sum(w) via two uses of the same node
        let mut tape = Tape::new();
        let w = tape.param(&store, "w").unwrap();
        let w_again = tape.param(&store, "w").unwrap();
        assert_eq!(w, w_again, "param binding must be memoized per tape");
        let s1 = tape.sum_all(w).unwrap();
        let s2 = tape.sum_all(w_again).unwrap();
        let s2 = tape.scale(s2, 2.0).unwrap();
        let loss = tape.add(s1, s2).unwrap();
        let grads = tape.backward(loss).unwrap();
        for &g in grads.get("w").unwrap().data() {
            assert!((g - 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn jvp_matches_directional_finite_difference() {
        let store = test_store(9, &[("w1", &[4, 8]), ("w2", &[8, 3])]);
        let x = Tensor::matrix(2, 4, (0..8).map(|i| 0.3 * i as f64 - 1.1).collect()).unwrap();
        let dir = Tensor::matrix(2, 4, (0..8).map(|i| (i as f64).sin()).collect()).unwrap();

        let run = |x_in: &Tensor| -> Tensor {
            let mut tape = Tape::new();
            let xv = tape.leaf(x_in.clone());
            let w1 = tape.param(&store, "w1").unwrap();
            let w2 = tape.param(&store, "w2").unwrap();
            let h = tape.matmul(xv, w1).unwrap();
            let h = tape.gelu(h).unwrap();
            let out = tape.matmul(h, w2).unwrap();
            tape.value(out).clone()
        };

        let dual = jvp(&[(x.clone(), Some(dir.clone()))], |tape, vars| {
            let w1 = tape.param(&store, "w1")?;
            let w2 = tape.param(&store, "w2")?;
            let h = tape.matmul(vars[0], w1)?;
            let h = tape.gelu(h)?;
            tape.matmul(h, w2)
        })
        .unwrap();

        let eps = 1e-6;
        let xp = Tensor::from_parts(
            x.shape().to_vec(),
            x.data()
                .iter()
                .zip(dir.data())
                .map(|(&v, &d)| v + eps * d)
                .collect(),
        );
        let xm = Tensor::from_parts(
            x.shape().to_vec(),
            x.data()
                .iter()
                .zip(dir.data())
                .map(|(&v, &d)| v - eps * d)
                .collect(),
        );
        let fp = run(&xp);
        let fm = run(&xm);
        for ((&t, &p), &m) in dual
            .tangent
            .data()
            .iter()
            .zip(fp.data())
            .zip(fm.data())
        {
            let fd = (p - m) / (2.0 * eps);
            assert!(
                (t - fd).abs() < 1e-6,
                "jvp tangent {t} vs directional fd {fd}"
            );
        }
        assert_eq!(dual.primal.shape(), dual.tangent.shape());
    }

    #[test]
    fn tangents_thread_through_every_op_kind() {
        // One scalar input drives a chain touching each tangent rule; check
        // against a directional FD of the whole chain.
        let chain = |tape: &mut Tape, t: Var| -> Result<Var, DiffError> {
            let freqs = tape.constant(Tensor::vector(vec![0.5, 1.0, 2.0, 4.0]).unwrap());
            let ang = tape.mul(t, freqs)?; // scalar broadcast
            let s = tape.sin(ang)?;
            let c = tape.cos(ang)?;
            let s2 = tape.reshape(s, vec![1, 4])?;
            let c2 = tape.reshape(c, vec![1, 4])?;
            let e = tape.concat_cols(&[s2, c2])?; // [1,8]
            let stack = tape.concat_rows(&[e, e])?; // [2,8]
            let cs = tape.cumsum_rows(stack)?;
            let sl = tape.slice_cols(cs, 1, 5)?;
            let sm = tape.softmax(sl)?;
            let g = tape.gelu(sm)?;
            let a = tape.abs(g)?;
            let sc = tape.scale(a, 1.7)?;
            tape.mean_all(sc)
        };
        let t0 = 0.37;
        let eval = |tv: f64| -> f64 {
            let mut tape = Tape::new();
            let t = tape.leaf(Tensor::scalar(tv));
            let out = chain(&mut tape, t).unwrap();
            tape.value(out).item().unwrap()
        };
        let mut tape = Tape::new();
        let t = tape
            .leaf_with_tangent(Tensor::scalar(t0), Tensor::scalar(1.0))
            .unwrap();
        let out = chain(&mut tape, t).unwrap();
        let tangent = tape.tangent(out).expect("tangent must propagate").item().unwrap();
        let eps = 1e-6;
        let fd = (eval(t0 + eps) - eval(t0 - eps)) / (2.0 * eps);
        assert!(
            (tangent - fd).abs() < 1e-7,
            "chain tangent {tangent} vs fd {fd}"
        );
    }

    #[test]
    fn detach_blocks_forward_mode() {
        let mut tape = Tape::new();
        let x = tape
            .leaf_with_tangent(Tensor::scalar(2.0), Tensor::scalar(1.0))
            .unwrap();
        let y = tape.mul(x, x).unwrap();
        assert!(tape.tangent(y).is_some());
        let d = tape.detach(y).unwrap();
        assert!(tape.tangent(d).is_none(), "detach must drop the tangent");
        let z = tape.mul(d, x).unwrap();
        // z's tangent now only sees x's direct contribution: d · dx = 4
        let tz = tape.tangent(z).unwrap().item().unwrap();
        assert!((tz - 4.0).abs() < 1e-12);
    }

    #[test]
    fn primal_of_jvp_output_remains_reverse_differentiable() {
        // The mean-flow pattern: run a net with a tangent, use the tangent as
        // data, and backprop through the primal on the same tape.
        let store = test_store(10, &[("w", &[3, 3])]);
        let x = Tensor::matrix(1, 3, vec![0.4, -0.2, 0.9]).unwrap();
        let v = Tensor::matrix(1, 3, vec![1.0, 0.5, -0.5]).unwrap();

        let mut tape = Tape::new();
        let xv = tape.leaf_with_tangent(x, v).unwrap();
        let w = tape.param(&store, "w").unwrap();
        let u = tape.matmul(xv, w).unwrap();
        let du = tape.tangent(u).cloned().expect("tangent present");

        // target = u_value − 0.3·du, treated as a constant
        let tgt: Vec<f64> = tape
            .value(u)
            .data()
            .iter()
            .zip(du.data())
            .map(|(&a, &b)| a - 0.3 * b)
            .collect();
        let tgt = tape.constant(Tensor::matrix(1, 3, tgt).unwrap());
        let diff = tape.sub(u, tgt).unwrap();
        let sq = tape.mul(diff, diff).unwrap();
        let loss = tape.mean_all(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        let gw = grads.get("w").expect("w must receive gradients");

        // Oracle: ∂/∂w of ‖x·w − tgt‖²/3 with tgt frozen = 2/3 · xᵀ(x·w − tgt)
        let u_val = tape.value(u).data().to_vec();
        let tgt_val = tape.value(tgt).data().to_vec();
        let xd = [0.4, -0.2, 0.9];
        for i in 0..3 {
            for j in 0..3 {
                let expect = 2.0 / 3.0 * xd[i] * (u_val[j] - tgt_val[j]);
                let got = gw.data()[i * 3 + j];
                assert!(
                    (got - expect).abs() < 1e-12,
                    "grad[{i},{j}] {got} vs {expect}"
                );
            }
        }
    }

    #[test]
    fn non_finite_values_fail_at_the_op() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1e300));
        let sq = tape.mul(x, x); // overflows to +inf
        assert!(matches!(sq, Err(DiffError::NonFinite { op: "mul" })));
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap());
        assert!(matches!(
            tape.backward(x),
            Err(DiffError::NotScalar { .. })
        ));
    }

    #[test]
    fn shape_mismatches_are_rejected() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let b = tape.leaf(Tensor::matrix(3, 2, vec![0.0; 6]).unwrap());
        assert!(tape.add(a, b).is_err());
        assert!(tape.matmul(a, a).is_err());
        assert!(tape.slice_rows(a, 1, 5).is_err());
        assert!(tape.concat_rows(&[]).is_err());
    }

    #[test]
    fn softmax_rows_lie_on_the_simplex() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(2, 4, vec![3.0, 1.0, -2.0, 800.0, 0.0, 0.0, 0.0, 0.0]).unwrap());
        let y = tape.softmax(x).unwrap();
        let v = tape.value(y).data();
        for row in v.chunks(4) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "row sums to {sum}");
            assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
        // large logits must not overflow (max-subtraction)
        assert!(v[3] > 0.999);
    }

    #[test]
    fn cumsum_rows_forward_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(3, 2, vec![1.0, 10.0, 2.0, 20.0, 3.0, 30.0]).unwrap());
        let y = tape.cumsum_rows(x).unwrap();
        assert_eq!(
            tape.value(y).data(),
            &[1.0, 10.0, 3.0, 30.0, 6.0, 60.0]
        );
    }
}
