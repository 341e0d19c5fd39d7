use super::real::{gemm, MatRef};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Cleared,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Transpose { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddRow { x: Var, row: Var },
    MulRow { x: Var, row: Var },
    ScaleBy { x: Var, s: Var },
    Scale { x: Var, c: T },
    AddScalar { x: Var },
    Exp { x: Var },
    Log { x: Var, floor: T },
    Sigmoid { x: Var },
    Clamp { x: Var, lo: T, hi: T },
    Gelu { x: Var },
    Sum { x: Var },
    Mean { x: Var },
    SoftmaxRows { x: Var },
    SoftmaxCols { x: Var },
    LayerNorm(Box<LayerNormSaved<T>>),
    SelectRows { x: Var, idx: Vec<usize> },
    SelectCols { x: Var, idx: Vec<usize> },
    ConcatRows { parts: Vec<Var> },
    L2NormalizeRows { x: Var, norms: Vec<T> },
    Attention(Box<AttentionSaved<T>>),
}

struct LayerNormSaved<T> {
    x: Var,
    gamma: Var,
    beta: Var,
    mask: Option<Var>,
    xhat: Vec<T>,
    inv_std: Vec<T>,
    var: Vec<T>,
    weight: T,
}

struct AttentionSaved<T> {
    q: Var,
    k: Var,
    v: Var,
    batch: usize,
    tokens: usize,
    heads: usize,
    head_dim: usize,
    probs: Vec<T>,
}

struct Node<T> {
    value: Option<Tensor<T>>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Ordered record of executed operations (a Wengert list).
///
/// Every op appends one node whose inputs precede it, so reverse index order
/// is a valid reverse topological order and `backward` visits each op once.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn add_into<T: Real>(dst: &mut [T], src: impl IntoIterator<Item = T>) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn gelu_parts<T: Real>(x: T) -> (T, T) {
    // tanh approximation
    let k = T::c((2.0 / std::f64::consts::PI).sqrt());
    let a = T::c(0.044715);
    let half = T::c(0.5);
    let u = k * (x + a * x * x * x);
    let t = u.tanh();
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::c(3.0) * a * x * x);
    (y, dy)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of nodes whose forward value is still held.
    pub fn live_values(&self) -> usize {
        self.nodes.iter().filter(|n| n.value.is_some()).count()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: Some(value), grad: None, requires_grad, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, value: T) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.nodes[v.0].value.as_ref().expect("var used after its tape node was cleared")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Drops every non-leaf value and saved buffer; leaves and their grads survive.
    pub fn clear_intermediates(&mut self) {
        for n in &mut self.nodes {
            if !matches!(n.op, Op::Leaf) {
                n.value = None;
                n.grad = None;
                n.op = Op::Cleared;
            }
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value: Some(value), grad: None, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    // ---- linear algebra ----------------------------------------------------

    /// `op(a) * op(b)` where `op` optionally transposes a rank-2 operand.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", av.shape(), bv.shape())));
        }
        let (ar, ac) = av.dims2()?;
        let (br, bc) = bv.dims2()?;
        let am = MatRef::new(av.data(), ar, ac, ta);
        let bm = MatRef::new(bv.data(), br, bc, tb);
        let (m, k1) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k1 != k2 {
            return Err(Error::shape(
                "matmul",
                format!("{:?}{} x {:?}{}", av.shape(), if ta { "^T" } else { "" }, bv.shape(), if tb { "^T" } else { "" }),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(T::one(), am, bm, T::zero(), &mut out);
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b, ta, tb }, &[a, b]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transpose()?;
        Ok(self.push(value, Op::Transpose { x }, &[x]))
    }

    // ---- elementwise -------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("add", av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(av.shape(), data)?;
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("sub", av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x - y).collect();
        let value = Tensor::new(av.shape(), data)?;
        Ok(self.push(value, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("mul", av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(av.shape(), data)?;
        Ok(self.push(value, Op::Mul { a, b }, &[a, b]))
    }

    fn row_broadcast_check(&self, op: &'static str, x: Var, row: Var) -> Result<(usize, usize)> {
        let (xv, rv) = (self.value(x), self.value(row));
        let (r, c) = xv.dims2()?;
        if rv.numel() != c {
            return Err(Error::shape(op, format!("{:?} with row {:?}", xv.shape(), rv.shape())));
        }
        Ok((r, c))
    }

    /// `x[r, :] + row` for every row.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (_, c) = self.row_broadcast_check("add_row", x, row)?;
        let (xv, rv) = (self.value(x), self.value(row));
        let data = xv.data().iter().enumerate().map(|(i, &v)| v + rv.data()[i % c]).collect();
        let value = Tensor::new(xv.shape(), data)?;
        Ok(self.push(value, Op::AddRow { x, row }, &[x, row]))
    }

    /// `x[r, :] * row` for every row.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (_, c) = self.row_broadcast_check("mul_row", x, row)?;
        let (xv, rv) = (self.value(x), self.value(row));
        let data = xv.data().iter().enumerate().map(|(i, &v)| v * rv.data()[i % c]).collect();
        let value = Tensor::new(xv.shape(), data)?;
        Ok(self.push(value, Op::MulRow { x, row }, &[x, row]))
    }

    /// Multiplies by a scalar that is itself a tape value.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xv, sv) = (self.value(x), self.value(s));
        if !sv.is_scalar() {
            return Err(Error::shape("scale_by", format!("scale must be scalar, got {:?}", sv.shape())));
        }
        let c = sv.item();
        let value = xv.map(|v| v * c);
        Ok(self.push(value, Op::ScaleBy { x, s }, &[x, s]))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let value = self.value(x).map(|v| v * c);
        Ok(self.push(value, Op::Scale { x, c }, &[x]))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        let value = self.value(x).map(|v| v + c);
        Ok(self.push(value, Op::AddScalar { x }, &[x]))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(T::exp);
        Ok(self.push(value, Op::Exp { x }, &[x]))
    }

    /// Natural log with the argument clamped from below at `floor`.
    pub fn log_clamped(&mut self, x: Var, floor: T) -> Result<Var> {
        let value = self.value(x).map(|v| v.max(floor).ln());
        Ok(self.push(value, Op::Log { x, floor }, &[x]))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.log_clamped(x, T::min_positive_value())
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        Ok(self.push(value, Op::Sigmoid { x }, &[x]))
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Result<Var> {
        let value = self.value(x).map(|v| v.max(lo).min(hi));
        Ok(self.push(value, Op::Clamp { x, lo, hi }, &[x]))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| gelu_parts(v).0);
        Ok(self.push(value, Op::Gelu { x }, &[x]))
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum { x }, &[x]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.numel() == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let s: T = xv.data().iter().copied().sum();
        let value = Tensor::scalar(s / T::c(xv.numel() as f64));
        Ok(self.push(value, Op::Mean { x }, &[x]))
    }

    // ---- normalizations ----------------------------------------------------

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2()?;
        let mut out = xv.data().to_vec();
        for i in 0..r {
            softmax_inplace(&mut out[i * c..(i + 1) * c]);
        }
        let value = Tensor::new(xv.shape(), out)?;
        Ok(self.push(value, Op::SoftmaxRows { x }, &[x]))
    }

    pub fn softmax_cols(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2()?;
        let mut out = xv.data().to_vec();
        let mut col = vec![T::zero(); r];
        for j in 0..c {
            for i in 0..r {
                col[i] = out[i * c + j];
            }
            softmax_inplace(&mut col);
            for i in 0..r {
                out[i * c + j] = col[i];
            }
        }
        let value = Tensor::new(xv.shape(), out)?;
        Ok(self.push(value, Op::SoftmaxCols { x }, &[x]))
    }

    /// Row-wise layer normalization with an optional per-dimension mask.
    ///
    /// With a mask `m`, mean and variance are `m`-weighted over the row (for a
    /// binary mask: computed over unmasked dimensions only) and the output is
    /// `m * (gamma * xhat + beta)`, so masked dimensions read as exact zeros.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, mask: Option<Var>, eps: T) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2()?;
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.numel() != c || bv.numel() != c {
            return Err(Error::shape(
                "layer_norm",
                format!("input {:?} with gamma {:?}, beta {:?}", xv.shape(), gv.shape(), bv.shape()),
            ));
        }
        let mvals: Option<&[T]> = match mask {
            Some(m) => {
                let mv = self.value(m);
                if mv.numel() != c {
                    return Err(Error::shape("layer_norm", format!("input {:?} with mask {:?}", xv.shape(), mv.shape())));
                }
                Some(mv.data())
            }
            None => None,
        };
        let m = |k: usize| mvals.map_or(T::one(), |mv| mv[k]);
        let weight: T = (0..c).map(m).sum();
        let (g, b) = (gv.data(), bv.data());
        let mut out = vec![T::zero(); r * c];
        let mut xhat = vec![T::zero(); r * c];
        let mut inv_std = vec![T::zero(); r];
        let mut var = vec![T::zero(); r];
        if weight > T::zero() {
            for i in 0..r {
                let row = &xv.data()[i * c..(i + 1) * c];
                let mu = (0..c).map(|k| m(k) * row[k]).sum::<T>() / weight;
                let v = (0..c).map(|k| m(k) * (row[k] - mu) * (row[k] - mu)).sum::<T>() / weight;
                let is = T::one() / (v + eps).sqrt();
                var[i] = v;
                inv_std[i] = is;
                for k in 0..c {
                    let xh = (row[k] - mu) * is;
                    xhat[i * c + k] = xh;
                    out[i * c + k] = m(k) * (g[k] * xh + b[k]);
                }
            }
        }
        let value = Tensor::new(xv.shape(), out)?;
        let mut inputs = vec![x, gamma, beta];
        inputs.extend(mask);
        let saved = LayerNormSaved { x, gamma, beta, mask, xhat, inv_std, var, weight };
        Ok(self.push(value, Op::LayerNorm(Box::new(saved)), &inputs))
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2()?;
        let mut out = xv.data().to_vec();
        let mut norms = Vec::with_capacity(r);
        for i in 0..r {
            let row = &mut out[i * c..(i + 1) * c];
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(T::c(1e-12));
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
        }
        let value = Tensor::new(xv.shape(), out)?;
        Ok(self.push(value, Op::L2NormalizeRows { x, norms }, &[x]))
    }

    // ---- indexing ----------------------------------------------------------

    /// Gathers rows: embedding lookup, pooling, broadcasting a row.
    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2()?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::shape("select_rows", format!("row {bad} out of range for {:?}", xv.shape())));
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&xv.data()[i * c..(i + 1) * c]);
        }
        let value = Tensor::new(&[idx.len(), c], out)?;
        Ok(self.push(value, Op::SelectRows { x, idx: idx.to_vec() }, &[x]))
    }

    /// Gathers columns; also slices and repeats when `idx` is contiguous or repeated.
    pub fn select_cols(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2()?;
        if let Some(&bad) = idx.iter().find(|&&j| j >= c) {
            return Err(Error::shape("select_cols", format!("column {bad} out of range for {:?}", xv.shape())));
        }
        let mut out = Vec::with_capacity(r * idx.len());
        for i in 0..r {
            let row = &xv.data()[i * c..(i + 1) * c];
            out.extend(idx.iter().map(|&j| row[j]));
        }
        let value = Tensor::new(&[r, idx.len()], out)?;
        Ok(self.push(value, Op::SelectCols { x, idx: idx.to_vec() }, &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        let (_, c) = self.value(*first).dims2()?;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            let (pr, pc) = pv.dims2()?;
            if pc != c {
                return Err(Error::shape("concat_rows", format!("{:?} vs {c} columns", pv.shape())));
            }
            out.extend_from_slice(pv.data());
            rows += pr;
        }
        let value = Tensor::new(&[rows, c], out)?;
        Ok(self.push(value, Op::ConcatRows { parts: parts.to_vec() }, parts))
    }

    // ---- attention ---------------------------------------------------------

    /// Scaled dot-product attention for every (sample, head) pair.
    ///
    /// `q`, `k`, `v` are `[batch * tokens, heads * head_dim]`, sample-major;
    /// head `h` owns columns `h * head_dim .. (h + 1) * head_dim`.
    /// `key_mask[s * tokens + j] == false` excludes key `j` of sample `s`.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        tokens: usize,
        heads: usize,
        head_dim: usize,
        key_mask: Option<&[bool]>,
    ) -> Result<Var> {
        let width = heads * head_dim;
        for (name, t) in [("q", q), ("k", k), ("v", v)] {
            let s = self.value(t).shape();
            if s != [batch * tokens, width] {
                return Err(Error::shape(
                    "attention",
                    format!("{name} has shape {s:?}, expected [{}, {width}]", batch * tokens),
                ));
            }
        }
        if let Some(m) = key_mask {
            if m.len() != batch * tokens {
                return Err(Error::shape("attention", format!("key mask length {} != {}", m.len(), batch * tokens)));
            }
        }
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let scale = T::one() / T::c(head_dim as f64).sqrt();
        let mut probs = vec![T::zero(); batch * heads * tokens * tokens];
        let mut out = vec![T::zero(); batch * tokens * width];
        for s in 0..batch {
            for h in 0..heads {
                let p = &mut probs[(s * heads + h) * tokens * tokens..(s * heads + h + 1) * tokens * tokens];
                for i in 0..tokens {
                    let qi = &qd[(s * tokens + i) * width + h * head_dim..][..head_dim];
                    let prow = &mut p[i * tokens..(i + 1) * tokens];
                    for j in 0..tokens {
                        let keep = key_mask.is_none_or(|m| m[s * tokens + j]);
                        prow[j] = if keep {
                            let kj = &kd[(s * tokens + j) * width + h * head_dim..][..head_dim];
                            qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale
                        } else {
                            T::neg_infinity()
                        };
                    }
                    softmax_inplace(prow);
                    let oi = &mut out[(s * tokens + i) * width + h * head_dim..][..head_dim];
                    for j in 0..tokens {
                        let pij = prow[j];
                        if pij == T::zero() {
                            continue;
                        }
                        let vj = &vd[(s * tokens + j) * width + h * head_dim..][..head_dim];
                        for (o, &vv) in oi.iter_mut().zip(vj) {
                            *o += pij * vv;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(&[batch * tokens, width], out)?;
        let saved = AttentionSaved { q, k, v, batch, tokens, heads, head_dim, probs };
        Ok(self.push(value, Op::Attention(Box::new(saved)), &[q, k, v]))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse-mode sweep from a scalar `loss`; leaf gradients accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaf_grads = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backward_op(i, &node.op, g, &mut grads, &mut leaf_grads)?;
        }
        for (i, g) in leaf_grads {
            let node = &mut self.nodes[i];
            let shape = node.value.as_ref().expect("leaf value").shape().to_vec();
            match &mut node.grad {
                Some(acc) => add_into(acc.data_mut(), g),
                None => node.grad = Some(Tensor::new(&shape, g)?),
            }
        }
        Ok(())
    }

    fn buf<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let n = node.value.as_ref().expect("input value").numel();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn backward_op(
        &self,
        i: usize,
        op: &Op<T>,
        g: Vec<T>,
        grads: &mut [Option<Vec<T>>],
        leaf_grads: &mut Vec<(usize, Vec<T>)>,
    ) -> Result<()> {
        let out = || self.nodes[i].value.as_ref().expect("output value");
        match op {
            Op::Leaf => leaf_grads.push((i, g)),
            Op::Cleared => {
                return Err(Error::invalid("backward through a cleared tape node"));
            }
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (ar, ac) = av.dims2()?;
                let (br, bc) = bv.dims2()?;
                let (m, n) = out().dims2()?;
                if let Some(da) = self.buf(grads, *a) {
                    if !*ta {
                        gemm(T::one(), MatRef::new(&g, m, n, false), MatRef::new(bv.data(), br, bc, !*tb), T::one(), da);
                    } else {
                        gemm(T::one(), MatRef::new(bv.data(), br, bc, *tb), MatRef::new(&g, m, n, true), T::one(), da);
                    }
                }
                if let Some(db) = self.buf(grads, *b) {
                    if !*tb {
                        gemm(T::one(), MatRef::new(av.data(), ar, ac, !*ta), MatRef::new(&g, m, n, false), T::one(), db);
                    } else {
                        gemm(T::one(), MatRef::new(&g, m, n, true), MatRef::new(av.data(), ar, ac, *ta), T::one(), db);
                    }
                }
            }
            Op::Transpose { x } => {
                let (r, c) = out().dims2()?;
                if let Some(dx) = self.buf(grads, *x) {
                    // out is [r, c]; x is [c, r]
                    for p in 0..r {
                        for q in 0..c {
                            dx[q * r + p] += g[p * c + q];
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                if let Some(da) = self.buf(grads, *a) {
                    add_into(da, g.iter().copied());
                }
                if let Some(db) = self.buf(grads, *b) {
                    add_into(db, g.iter().copied());
                }
            }
            Op::Sub { a, b } => {
                if let Some(da) = self.buf(grads, *a) {
                    add_into(da, g.iter().copied());
                }
                if let Some(db) = self.buf(grads, *b) {
                    add_into(db, g.iter().map(|&v| -v));
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(da) = self.buf(grads, *a) {
                    add_into(da, g.iter().zip(bv.data()).map(|(&gg, &y)| gg * y));
                }
                if let Some(db) = self.buf(grads, *b) {
                    add_into(db, g.iter().zip(av.data()).map(|(&gg, &x)| gg * x));
                }
            }
            Op::AddRow { x, row } => {
                let c = self.value(*row).numel();
                if let Some(dx) = self.buf(grads, *x) {
                    add_into(dx, g.iter().copied());
                }
                if let Some(dr) = self.buf(grads, *row) {
                    for (k, &gg) in g.iter().enumerate() {
                        dr[k % c] += gg;
                    }
                }
            }
            Op::MulRow { x, row } => {
                let (xv, rv) = (self.value(*x), self.value(*row));
                let c = rv.numel();
                if let Some(dx) = self.buf(grads, *x) {
                    add_into(dx, g.iter().enumerate().map(|(k, &gg)| gg * rv.data()[k % c]));
                }
                if let Some(dr) = self.buf(grads, *row) {
                    for (k, (&gg, &xx)) in g.iter().zip(xv.data()).enumerate() {
                        dr[k % c] += gg * xx;
                    }
                }
            }
            Op::ScaleBy { x, s } => {
                let (xv, sv) = (self.value(*x), self.value(*s));
                let c = sv.item();
                if let Some(dx) = self.buf(grads, *x) {
                    add_into(dx, g.iter().map(|&gg| gg * c));
                }
                if let Some(ds) = self.buf(grads, *s) {
                    ds[0] += g.iter().zip(xv.data()).map(|(&gg, &xx)| gg * xx).sum::<T>();
                }
            }
            Op::Scale { x, c } => {
                if let Some(dx) = self.buf(grads, *x) {
                    add_into(dx, g.iter().map(|&gg| gg * *c));
                }
            }
            Op::AddScalar { x } => {
                if let Some(dx) = self.buf(grads, *x) {
                    add_into(dx, g.iter().copied());
                }
            }
            Op::Exp { x } => {
                let y = out();
                if let Some(dx) = self.buf(grads, *x) {
                    add_into(dx, g.iter().zip(y.data()).map(|(&gg, &yy)| gg * yy));
                }
            }
            Op::Log { x, floor } => {
                let xv = self.value(*x);
                if let Some(dx) = self.buf(grads, *x) {
                    add_into(
                        dx,
                        g.iter().zip(xv.data()).map(|(&gg, &xx)| if xx > *floor { gg / xx } else { T::zero() }),
                    );
                }
            }
            Op::Sigmoid { x } => {
                let y = out();
                if let Some(dx) = self.buf(grads, *x) {
                    add_into(dx, g.iter().zip(y.data()).map(|(&gg, &yy)| gg * yy * (T::one() - yy)));
                }
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x);
                if let Some(dx) = self.buf(grads, *x) {
                    add_into(
                        dx,
                        g.iter()
                            .zip(xv.data())
                            .map(|(&gg, &xx)| if xx > *lo && xx < *hi { gg } else { T::zero() }),
                    );
                }
            }
            Op::Gelu { x } => {
                let xv = self.value(*x);
                if let Some(dx) = self.buf(grads, *x) {
                    add_into(dx, g.iter().zip(xv.data()).map(|(&gg, &xx)| gg * gelu_parts(xx).1));
                }
            }
            Op::Sum { x } => {
                if let Some(dx) = self.buf(grads, *x) {
                    let g0 = g[0];
                    dx.iter_mut().for_each(|d| *d += g0);
                }
            }
            Op::Mean { x } => {
                if let Some(dx) = self.buf(grads, *x) {
                    let g0 = g[0] / T::c(dx.len() as f64);
                    dx.iter_mut().for_each(|d| *d += g0);
                }
            }
            Op::SoftmaxRows { x } => {
                let y = out();
                let (r, c) = y.dims2()?;
                if let Some(dx) = self.buf(grads, *x) {
                    for row in 0..r {
                        let ys = &y.data()[row * c..(row + 1) * c];
                        let gs = &g[row * c..(row + 1) * c];
                        let dot: T = ys.iter().zip(gs).map(|(&a, &b)| a * b).sum();
                        for k in 0..c {
                            dx[row * c + k] += ys[k] * (gs[k] - dot);
                        }
                    }
                }
            }
            Op::SoftmaxCols { x } => {
                let y = out();
                let (r, c) = y.dims2()?;
                if let Some(dx) = self.buf(grads, *x) {
                    for col in 0..c {
                        let dot: T = (0..r).map(|k| y.data()[k * c + col] * g[k * c + col]).sum();
                        for k in 0..r {
                            let idx = k * c + col;
                            dx[idx] += y.data()[idx] * (g[idx] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm(s) => self.layer_norm_backward(s, &g, grads)?,
            Op::SelectRows { x, idx } => {
                let (_, c) = self.value(*x).dims2()?;
                if let Some(dx) = self.buf(grads, *x) {
                    for (o, &src) in idx.iter().enumerate() {
                        add_into(&mut dx[src * c..(src + 1) * c], g[o * c..(o + 1) * c].iter().copied());
                    }
                }
            }
            Op::SelectCols { x, idx } => {
                let (r, c) = self.value(*x).dims2()?;
                let w = idx.len();
                if let Some(dx) = self.buf(grads, *x) {
                    for row in 0..r {
                        for (o, &src) in idx.iter().enumerate() {
                            dx[row * c + src] += g[row * w + o];
                        }
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if let Some(dp) = self.buf(grads, p) {
                        add_into(dp, g[offset..offset + n].iter().copied());
                    }
                    offset += n;
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = out();
                let (r, c) = y.dims2()?;
                if let Some(dx) = self.buf(grads, *x) {
                    for row in 0..r {
                        let ys = &y.data()[row * c..(row + 1) * c];
                        let gs = &g[row * c..(row + 1) * c];
                        let dot: T = ys.iter().zip(gs).map(|(&a, &b)| a * b).sum();
                        for k in 0..c {
                            dx[row * c + k] += (gs[k] - ys[k] * dot) / norms[row];
                        }
                    }
                }
            }
            Op::Attention(s) => self.attention_backward(s, &g, grads)?,
        }
        Ok(())
    }

    fn layer_norm_backward(&self, s: &LayerNormSaved<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let xv = self.value(s.x);
        let (r, c) = xv.dims2()?;
        let gamma = self.value(s.gamma).data().to_vec();
        let beta = self.value(s.beta).data().to_vec();
        let mvals: Vec<T> = match s.mask {
            Some(m) => self.value(m).data().to_vec(),
            None => vec![T::one(); c],
        };
        let w = s.weight;
        if w <= T::zero() {
            return Ok(());
        }
        let mut dx_acc = vec![T::zero(); r * c];
        let mut dg_acc = vec![T::zero(); c];
        let mut db_acc = vec![T::zero(); c];
        let mut dm_acc = vec![T::zero(); c];
        let two = T::c(2.0);
        for i in 0..r {
            let xh = &s.xhat[i * c..(i + 1) * c];
            let gs = &g[i * c..(i + 1) * c];
            let is = s.inv_std[i];
            let mut a = T::zero();
            let mut b = T::zero();
            for k in 0..c {
                let h = gs[k] * mvals[k] * gamma[k];
                a += h;
                b += h * xh[k];
            }
            let v_ratio = s.var[i] * is * is;
            for k in 0..c {
                let h = gs[k] * mvals[k] * gamma[k];
                dx_acc[i * c + k] = is * (h - mvals[k] * a / w - mvals[k] * xh[k] * b / w);
                dg_acc[k] += gs[k] * mvals[k] * xh[k];
                db_acc[k] += gs[k] * mvals[k];
                dm_acc[k] += gs[k] * (gamma[k] * xh[k] + beta[k]) - xh[k] * a / w
                    - b * (xh[k] * xh[k] - v_ratio) / (two * w);
            }
        }
        if let Some(dx) = self.buf(grads, s.x) {
            add_into(dx, dx_acc);
        }
        if let Some(dg) = self.buf(grads, s.gamma) {
            add_into(dg, dg_acc);
        }
        if let Some(db) = self.buf(grads, s.beta) {
            add_into(db, db_acc);
        }
        if let Some(m) = s.mask {
            if let Some(dm) = self.buf(grads, m) {
                add_into(dm, dm_acc);
            }
        }
        Ok(())
    }

    fn attention_backward(&self, s: &AttentionSaved<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let (t, hd, width) = (s.tokens, s.head_dim, s.heads * s.head_dim);
        let (qd, kd, vd) = (self.value(s.q).data(), self.value(s.k).data(), self.value(s.v).data());
        let scale = T::one() / T::c(hd as f64).sqrt();
        let n = s.batch * t * width;
        let mut dq = vec![T::zero(); n];
        let mut dk = vec![T::zero(); n];
        let mut dv = vec![T::zero(); n];
        let mut dp = vec![T::zero(); t];
        for b in 0..s.batch {
            for h in 0..s.heads {
                let p = &s.probs[(b * s.heads + h) * t * t..(b * s.heads + h + 1) * t * t];
                let at = |tok: usize| (b * t + tok) * width + h * hd;
                for i in 0..t {
                    let gi = &g[at(i)..at(i) + hd];
                    let prow = &p[i * t..(i + 1) * t];
                    for j in 0..t {
                        let vj = &vd[at(j)..at(j) + hd];
                        dp[j] = gi.iter().zip(vj).map(|(&x, &y)| x * y).sum();
                        let pij = prow[j];
                        if pij != T::zero() {
                            for (d, &gg) in dv[at(j)..at(j) + hd].iter_mut().zip(gi) {
                                *d += pij * gg;
                            }
                        }
                    }
                    let dot: T = prow.iter().zip(&dp).map(|(&a, &b)| a * b).sum();
                    let qi_at = at(i);
                    for j in 0..t {
                        let ds = prow[j] * (dp[j] - dot) * scale;
                        if ds == T::zero() {
                            continue;
                        }
                        let kj_at = at(j);
                        for c in 0..hd {
                            dq[qi_at + c] += ds * kd[kj_at + c];
                            dk[kj_at + c] += ds * qd[qi_at + c];
                        }
                    }
                }
            }
        }
        if let Some(buf) = self.buf(grads, s.q) {
            add_into(buf, dq);
        }
        if let Some(buf) = self.buf(grads, s.k) {
            add_into(buf, dk);
        }
        if let Some(buf) = self.buf(grads, s.v) {
            add_into(buf, dv);
        }
        Ok(())
    }
}

/// Max-subtracted softmax; an all `-inf` slice becomes all zeros.
pub(crate) fn softmax_inplace<T: Real>(xs: &mut [T]) {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        xs.iter_mut().for_each(|v| *v = T::zero());
        return;
    }
    let mut total = T::zero();
    for v in xs.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in xs.iter_mut() {
        *v /= total;
    }
}
