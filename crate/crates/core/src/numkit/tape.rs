//! Whole-tensor reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value and whatever it
//! needs for the backward pass. Values are 2-D in practice: the last extent is
//! the column axis and all leading extents fold into rows.

use super::{Real, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const PROB_FLOOR: f64 = 1e-12;
const PROB_ROW_TOL: f64 = 1e-4;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Attention mask over `len × len` positions; `allow[i * len + j]` permits
/// query `i` to read key `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnMask {
    pub len: usize,
    pub allow: Vec<bool>,
}

impl AttnMask {
    pub fn full(len: usize) -> Self {
        Self {
            len,
            allow: vec![true; len * len],
        }
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allow[i * self.len + j]
    }
}

/// Shape and scaling of one fused attention call.
#[derive(Debug, Clone)]
pub struct AttnSpec<T> {
    /// Number of independent sequences (nodes).
    pub batch: usize,
    pub heads: usize,
    pub scale: T,
    pub mask: AttnMask,
    /// Inverted-dropout factors on the attention weights, one per
    /// `(sequence, head, query, key)`; `None` at eval time.
    pub dropout: Option<Vec<T>>,
}

struct AttnSaved<T> {
    q: Var,
    k: Var,
    v: Var,
    spec: AttnSpec<T>,
    probs: Vec<T>,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    MulConst(Var, Vec<T>),
    MulCol(Var, Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Softmax(Var),
    Gather(Var, Vec<usize>),
    Scatter(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Var, Var),
    SelectCol(Var, usize),
    Attention(Box<AttnSaved<T>>),
    CrossEntropy(Var, Vec<i64>, usize),
    KlDiv(Var, Var),
    WeightedSum(Var, Vec<T>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    name: Option<String>,
}

/// Recording of a forward computation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    names: Vec<Option<String>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// `(name, grad)` for every named leaf that received a gradient.
    pub fn named(&self) -> impl Iterator<Item = (&str, &[T])> {
        self.names
            .iter()
            .zip(self.grads.iter())
            .filter_map(|(n, g)| match (n, g) {
                (Some(n), Some(g)) => Some((n.as_str(), g.as_slice())),
                _ => None,
            })
    }
}

fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    let cdf = half * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-half * x * x).exp() * T::lit(0.5 * std::f64::consts::FRAC_2_SQRT_PI * std::f64::consts::FRAC_1_SQRT_2);
    cdf + x * pdf
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    half * x * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn acc<'a, T: Real>(grads: &'a mut [Option<Vec<T>>], v: Var, len: usize) -> &'a mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            name: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Named trainable leaf.
    pub fn param(&mut self, name: &str, t: &Tensor<T>) -> Var {
        let mut value = t.clone();
        value.grad = None;
        let v = self.push(value, Op::Leaf, true);
        self.nodes[v.0].name = Some(name.to_string());
        v
    }

    /// Copy of `v` cut off from the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        if bv.rows() != k {
            return Err(Error::dim(
                "matmul",
                format!("[{m}x{k}] · [{}x{n}]", bv.rows()),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            av.data(),
            k as isize,
            1,
            bv.data(),
            n as isize,
            1,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_rows(m, n, out), Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::dim(
                "add",
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    /// Adds a length-`C` vector to every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let c = xv.cols();
        if bv.numel() != c {
            return Err(Error::dim(
                "add_row",
                format!("{} columns vs bias of {}", c, bv.numel()),
            ));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(c.max(1)) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(t, Op::AddRow(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v * s).collect();
        let t = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::Scale(x, s), rg)
    }

    /// Elementwise product with a constant buffer (dropout masks, fixed weights).
    pub fn mul_const(&mut self, x: Var, m: Vec<T>) -> Result<Var> {
        let xv = self.value(x);
        if m.len() != xv.numel() {
            return Err(Error::dim(
                "mul_const",
                format!("{} values vs {}", xv.numel(), m.len()),
            ));
        }
        let data = xv.data().iter().zip(&m).map(|(&a, &b)| a * b).collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::MulConst(x, m), rg))
    }

    /// Scales row `r` of `x` by `s[r]`.
    pub fn mul_col(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xv, sv) = (self.value(x), self.value(s));
        let (r, c) = (xv.rows(), xv.cols());
        if sv.numel() != r {
            return Err(Error::dim(
                "mul_col",
                format!("{} rows vs {} scales", r, sv.numel()),
            ));
        }
        let mut data = xv.data().to_vec();
        for (row, &w) in data.chunks_mut(c.max(1)).zip(sv.data()) {
            for o in row {
                *o *= w;
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(t, Op::MulCol(x, s), rg))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| gelu(v)).collect();
        let t = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::Gelu(x), rg)
    }

    /// Per-row normalization to zero mean and unit variance, then `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let (r, c) = (xv.rows(), xv.cols());
        if c == 0 || gv.numel() != c || bv.numel() != c {
            return Err(Error::dim(
                "layer_norm",
                format!("width {} with gain {} bias {}", c, gv.numel(), bv.numel()),
            ));
        }
        let eps = T::lit(LAYER_NORM_EPS);
        let cf = T::lit(c as f64);
        let mut xhat = vec![T::zero(); r * c];
        let mut inv_std = vec![T::zero(); r];
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = xv.row(i);
            let mean = row.iter().copied().sum::<T>() / cf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cf;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..c {
                let h = (row[j] - mean) * inv;
                xhat[i * c + j] = h;
                out[i * c + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Row-wise softmax with max subtraction. `-inf` logits are allowed as
    /// long as each row keeps one finite entry.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        if c == 0 {
            return Err(Error::dim("softmax_rows", "empty last dimension"));
        }
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            softmax_into(xv.row(i), &mut out[i * c..(i + 1) * c])?;
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Softmax(x), rg))
    }

    /// Selects rows `idx` (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            if i >= r {
                return Err(Error::dim("gather_rows", format!("row {i} of {r}")));
            }
            out.extend_from_slice(xv.row(i));
        }
        let t = Tensor::from_rows(idx.len(), c, out);
        let rg = self.rg(x);
        Ok(self.push(t, Op::Gather(x, idx), rg))
    }

    /// Places row `i` of `x` at row `idx[i]` of a `total`-row zero matrix,
    /// summing collisions.
    pub fn scatter_rows(&mut self, x: Var, idx: Vec<usize>, total: usize) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if idx.len() != xv.rows() {
            return Err(Error::dim(
                "scatter_rows",
                format!("{} rows vs {} targets", xv.rows(), idx.len()),
            ));
        }
        let mut out = vec![T::zero(); total * c];
        for (i, &t) in idx.iter().enumerate() {
            if t >= total {
                return Err(Error::dim("scatter_rows", format!("row {t} of {total}")));
            }
            for (o, &v) in out[t * c..(t + 1) * c].iter_mut().zip(xv.row(i)) {
                *o += v;
            }
        }
        let t = Tensor::from_rows(total, c, out);
        let rg = self.rg(x);
        Ok(self.push(t, Op::Scatter(x, idx), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = match parts.first() {
            Some(&p) => self.value(p).cols(),
            None => return Err(Error::dim("concat_rows", "no inputs")),
        };
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != c {
                return Err(Error::dim(
                    "concat_rows",
                    format!("width {} vs {}", pv.cols(), c),
                ));
            }
            rows += pv.rows();
            out.extend_from_slice(pv.data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::from_rows(rows, c, out),
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return Err(Error::dim(
                "concat_cols",
                format!("{} rows vs {}", av.rows(), bv.rows()),
            ));
        }
        let (r, ca, cb) = (av.rows(), av.cols(), bv.cols());
        let mut out = Vec::with_capacity(r * (ca + cb));
        for i in 0..r {
            out.extend_from_slice(av.row(i));
            out.extend_from_slice(bv.row(i));
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::from_rows(r, ca + cb, out),
            Op::ConcatCols(a, b),
            rg,
        ))
    }

    pub fn select_col(&mut self, x: Var, j: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        if j >= c {
            return Err(Error::dim("select_col", format!("column {j} of {c}")));
        }
        let out = (0..r).map(|i| xv.data()[i * c + j]).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_rows(r, 1, out), Op::SelectCol(x, j), rg))
    }

    /// Fused multi-head scaled dot-product attention.
    ///
    /// `q`, `k`, `v` are `[batch·len × d]`; head `h` owns columns
    /// `h·d_h..(h+1)·d_h`. Forbidden keys are skipped outright, which is the
    /// same as a `-inf` logit but keeps the arithmetic of every allowed row
    /// identical to running on the allowed keys alone.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttnSpec<T>) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let len = spec.mask.len;
        let d = qv.cols();
        let rows = spec.batch * len;
        if qv.rows() != rows || kv.rows() != rows || vv.rows() != rows {
            return Err(Error::dim(
                "attention",
                format!("expected {rows} rows for batch {} × len {len}", spec.batch),
            ));
        }
        if kv.cols() != d || vv.cols() != d || spec.heads == 0 || d % spec.heads != 0 {
            return Err(Error::dim(
                "attention",
                format!("width {d} not divisible into {} heads", spec.heads),
            ));
        }
        for i in 0..len {
            if !(0..len).any(|j| spec.mask.allowed(i, j)) {
                return Err(Error::contract(
                    "attention",
                    format!("query position {i} has no allowed key"),
                ));
            }
        }
        let plane = spec.heads * len * len;
        if let Some(drop) = &spec.dropout {
            if drop.len() != spec.batch * plane {
                return Err(Error::dim("attention", "dropout mask size"));
            }
        }
        let dh = d / spec.heads;
        let mut probs = vec![T::zero(); spec.batch * plane];
        let mut out = vec![T::zero(); rows * d];
        let mut logits = vec![T::zero(); len];
        for b in 0..spec.batch {
            for h in 0..spec.heads {
                let col = h * dh;
                for i in 0..len {
                    let qi = &qv.data()[(b * len + i) * d + col..][..dh];
                    let mut max = T::neg_infinity();
                    for j in 0..len {
                        if !spec.mask.allowed(i, j) {
                            continue;
                        }
                        let kj = &kv.data()[(b * len + j) * d + col..][..dh];
                        let mut s = T::zero();
                        for t in 0..dh {
                            s += qi[t] * kj[t];
                        }
                        let s = s * spec.scale;
                        logits[j] = s;
                        if s > max {
                            max = s;
                        }
                    }
                    if !max.is_finite() {
                        return Err(Error::Numeric("non-finite attention logit".into()));
                    }
                    let base = b * plane + (h * len + i) * len;
                    let mut denom = T::zero();
                    for j in 0..len {
                        if spec.mask.allowed(i, j) {
                            let e = (logits[j] - max).exp();
                            probs[base + j] = e;
                            denom += e;
                        }
                    }
                    let oi = (b * len + i) * d + col;
                    for j in 0..len {
                        if !spec.mask.allowed(i, j) {
                            continue;
                        }
                        let p = probs[base + j] / denom;
                        probs[base + j] = p;
                        let w = match &spec.dropout {
                            Some(drop) => p * drop[base + j],
                            None => p,
                        };
                        let vj = &vv.data()[(b * len + j) * d + col..][..dh];
                        for t in 0..dh {
                            out[oi + t] += w * vj[t];
                        }
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            Tensor::from_rows(rows, d, out),
            Op::Attention(Box::new(AttnSaved {
                q,
                k,
                v,
                spec,
                probs,
            })),
            rg,
        ))
    }

    /// Mean of `−ln p[i, y_i]` over rows whose label is not −1.
    pub fn cross_entropy(&mut self, probs: Var, labels: &[i64]) -> Result<Var> {
        let pv = self.value(probs);
        let (r, c) = (pv.rows(), pv.cols());
        if labels.len() != r {
            return Err(Error::dim(
                "cross_entropy",
                format!("{} rows vs {} labels", r, labels.len()),
            ));
        }
        let floor = T::lit(PROB_FLOOR);
        let mut total = T::zero();
        let mut count = 0usize;
        for (i, &y) in labels.iter().enumerate() {
            if y == -1 {
                continue;
            }
            if y < 0 || y as usize >= c {
                return Err(Error::contract(
                    "cross_entropy",
                    format!("label {y} outside [0, {c})"),
                ));
            }
            let p = pv.data()[i * c + y as usize].max(floor);
            total -= p.ln();
            count += 1;
        }
        if count == 0 {
            return Err(Error::contract(
                "cross_entropy",
                "every label is -1; nothing to supervise",
            ));
        }
        let loss = total / T::lit(count as f64);
        let rg = self.rg(probs);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy(probs, labels.to_vec(), count),
            rg,
        ))
    }

    /// Mean over rows of `Σ_c p·(ln p − ln q)` with `0·ln 0 = 0`.
    pub fn kl_div(&mut self, p: Var, q: Var) -> Result<Var> {
        let (pv, qv) = (self.value(p), self.value(q));
        if pv.shape() != qv.shape() {
            return Err(Error::dim(
                "kl_div",
                format!("{:?} vs {:?}", pv.shape(), qv.shape()),
            ));
        }
        let (r, c) = (pv.rows(), pv.cols());
        check_prob_rows("kl_div", pv)?;
        check_prob_rows("kl_div", qv)?;
        let floor = T::lit(PROB_FLOOR);
        let mut total = T::zero();
        for i in 0..r {
            for j in 0..c {
                let pi = pv.data()[i * c + j];
                if pi > T::zero() {
                    let qi = qv.data()[i * c + j].max(floor);
                    total += pi * (pi.ln() - qi.ln());
                }
            }
        }
        let loss = if r == 0 {
            T::zero()
        } else {
            total / T::lit(r as f64)
        };
        let rg = self.rg(p) || self.rg(q);
        Ok(self.push(Tensor::scalar(loss), Op::KlDiv(p, q), rg))
    }

    /// `Σ x ⊙ w` for a constant weight buffer.
    pub fn weighted_sum(&mut self, x: Var, w: Vec<T>) -> Result<Var> {
        let xv = self.value(x);
        if w.len() != xv.numel() {
            return Err(Error::dim(
                "weighted_sum",
                format!("{} values vs {} weights", xv.numel(), w.len()),
            ));
        }
        let s = xv.data().iter().zip(&w).map(|(&a, &b)| a * b).sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum(x, w), rg))
    }

    /// Reverse sweep from a scalar `loss`. Only leaf gradients are kept.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::dim("backward", "loss must be a scalar"));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop(&node.op, &node.value, &g, &mut grads);
        }
        let names = self.nodes.iter().map(|n| n.name.clone()).collect();
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads, names })
    }

    fn backprop(&self, op: &Op<T>, out: &Tensor<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.rg(*a) {
                    let da = acc(grads, *a, m * k);
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        g,
                        n as isize,
                        1,
                        bv.data(),
                        1,
                        n as isize,
                        T::one(),
                        da,
                        k as isize,
                        1,
                    );
                }
                if self.rg(*b) {
                    let db = acc(grads, *b, k * n);
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        av.data(),
                        1,
                        k as isize,
                        g,
                        n as isize,
                        1,
                        T::one(),
                        db,
                        n as isize,
                        1,
                    );
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.rg(v) {
                        let d = acc(grads, v, g.len());
                        for (o, &x) in d.iter_mut().zip(g) {
                            *o += x;
                        }
                    }
                }
            }
            Op::AddRow(x, bias) => {
                let c = out.cols();
                if self.rg(*x) {
                    let d = acc(grads, *x, g.len());
                    for (o, &v) in d.iter_mut().zip(g) {
                        *o += v;
                    }
                }
                if self.rg(*bias) {
                    let d = acc(grads, *bias, c);
                    for row in g.chunks(c.max(1)) {
                        for (o, &v) in d.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Scale(x, s) => {
                let d = acc(grads, *x, g.len());
                for (o, &v) in d.iter_mut().zip(g) {
                    *o += v * *s;
                }
            }
            Op::MulConst(x, m) => {
                let d = acc(grads, *x, g.len());
                for ((o, &v), &w) in d.iter_mut().zip(g).zip(m) {
                    *o += v * w;
                }
            }
            Op::MulCol(x, s) => {
                let (xv, sv) = (self.value(*x), self.value(*s));
                let c = xv.cols().max(1);
                if self.rg(*x) {
                    let d = acc(grads, *x, g.len());
                    for ((drow, grow), &w) in d.chunks_mut(c).zip(g.chunks(c)).zip(sv.data()) {
                        for (o, &v) in drow.iter_mut().zip(grow) {
                            *o += v * w;
                        }
                    }
                }
                if self.rg(*s) {
                    let d = acc(grads, *s, sv.numel());
                    for (r, (grow, xrow)) in g.chunks(c).zip(xv.data().chunks(c)).enumerate() {
                        d[r] += grow.iter().zip(xrow).map(|(&a, &b)| a * b).sum::<T>();
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let d = acc(grads, *x, g.len());
                for ((o, &v), &xi) in d.iter_mut().zip(g).zip(xv.data()) {
                    *o += v * gelu_grad(xi);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let c = out.cols();
                let gv = self.value(*gain);
                if self.rg(*gain) {
                    let d = acc(grads, *gain, c);
                    for (grow, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                        for ((o, &v), &h) in d.iter_mut().zip(grow).zip(hrow) {
                            *o += v * h;
                        }
                    }
                }
                if self.rg(*bias) {
                    let d = acc(grads, *bias, c);
                    for grow in g.chunks(c) {
                        for (o, &v) in d.iter_mut().zip(grow) {
                            *o += v;
                        }
                    }
                }
                if self.rg(*x) {
                    let cf = T::lit(c as f64);
                    let d = acc(grads, *x, g.len());
                    let mut dxhat = vec![T::zero(); c];
                    for (r, &inv) in inv_std.iter().enumerate() {
                        let grow = &g[r * c..(r + 1) * c];
                        let hrow = &xhat[r * c..(r + 1) * c];
                        let mut sum = T::zero();
                        let mut dot = T::zero();
                        for j in 0..c {
                            dxhat[j] = grow[j] * gv.data()[j];
                            sum += dxhat[j];
                            dot += dxhat[j] * hrow[j];
                        }
                        let drow = &mut d[r * c..(r + 1) * c];
                        for j in 0..c {
                            drow[j] += inv * (dxhat[j] - sum / cf - hrow[j] * dot / cf);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let c = out.cols();
                let d = acc(grads, *x, g.len());
                for ((drow, grow), yrow) in d.chunks_mut(c).zip(g.chunks(c)).zip(out.data().chunks(c)) {
                    let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    for ((o, &gi), &yi) in drow.iter_mut().zip(grow).zip(yrow) {
                        *o += yi * (gi - dot);
                    }
                }
            }
            Op::Gather(x, idx) => {
                let xv = self.value(*x);
                let c = xv.cols();
                let d = acc(grads, *x, xv.numel());
                for (i, &src) in idx.iter().enumerate() {
                    for (o, &v) in d[src * c..(src + 1) * c].iter_mut().zip(&g[i * c..(i + 1) * c]) {
                        *o += v;
                    }
                }
            }
            Op::Scatter(x, idx) => {
                let xv = self.value(*x);
                let c = xv.cols();
                let d = acc(grads, *x, xv.numel());
                for (i, &dst) in idx.iter().enumerate() {
                    for (o, &v) in d[i * c..(i + 1) * c].iter_mut().zip(&g[dst * c..(dst + 1) * c]) {
                        *o += v;
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if self.rg(p) {
                        let d = acc(grads, p, len);
                        for (o, &v) in d.iter_mut().zip(&g[offset..offset + len]) {
                            *o += v;
                        }
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(a, b) => {
                let (ca, cb) = (self.value(*a).cols(), self.value(*b).cols());
                let w = ca + cb;
                for (v, start, width) in [(*a, 0, ca), (*b, ca, cb)] {
                    if !self.rg(v) {
                        continue;
                    }
                    let len = self.value(v).numel();
                    let d = acc(grads, v, len);
                    for (drow, grow) in d.chunks_mut(width.max(1)).zip(g.chunks(w)) {
                        for (o, &x) in drow.iter_mut().zip(&grow[start..start + width]) {
                            *o += x;
                        }
                    }
                }
            }
            Op::SelectCol(x, j) => {
                let xv = self.value(*x);
                let c = xv.cols();
                let d = acc(grads, *x, xv.numel());
                for (r, &v) in g.iter().enumerate() {
                    d[r * c + j] += v;
                }
            }
            Op::Attention(saved) => self.attention_backward(saved, g, grads),
            Op::CrossEntropy(p, labels, count) => {
                let pv = self.value(*p);
                let c = pv.cols();
                let floor = T::lit(PROB_FLOOR);
                let scale = g[0] / T::lit(*count as f64);
                let d = acc(grads, *p, pv.numel());
                for (i, &y) in labels.iter().enumerate() {
                    if y < 0 {
                        continue;
                    }
                    let at = i * c + y as usize;
                    let pi = pv.data()[at];
                    if pi > floor {
                        d[at] -= scale / pi;
                    }
                }
            }
            Op::KlDiv(p, q) => {
                let (pv, qv) = (self.value(*p), self.value(*q));
                let rows = pv.rows().max(1);
                let scale = g[0] / T::lit(rows as f64);
                let floor = T::lit(PROB_FLOOR);
                if self.rg(*q) {
                    let d = acc(grads, *q, qv.numel());
                    for ((o, &pi), &qi) in d.iter_mut().zip(pv.data()).zip(qv.data()) {
                        if pi > T::zero() && qi > floor {
                            *o -= scale * pi / qi;
                        }
                    }
                }
                if self.rg(*p) {
                    let d = acc(grads, *p, pv.numel());
                    for ((o, &pi), &qi) in d.iter_mut().zip(pv.data()).zip(qv.data()) {
                        if pi > T::zero() {
                            *o += scale * (pi.ln() - qi.max(floor).ln() + T::one());
                        }
                    }
                }
            }
            Op::WeightedSum(x, w) => {
                let d = acc(grads, *x, w.len());
                for (o, &wi) in d.iter_mut().zip(w) {
                    *o += g[0] * wi;
                }
            }
        }
    }

    fn attention_backward(&self, saved: &AttnSaved<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let AttnSaved {
            q,
            k,
            v,
            spec,
            probs,
        } = saved;
        let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
        let len = spec.mask.len;
        let d = qv.cols();
        let dh = d / spec.heads;
        let plane = spec.heads * len * len;
        let mut dq = vec![T::zero(); qv.numel()];
        let mut dk = vec![T::zero(); kv.numel()];
        let mut dv = vec![T::zero(); vv.numel()];
        let mut dp = vec![T::zero(); len];
        for b in 0..spec.batch {
            for h in 0..spec.heads {
                let col = h * dh;
                for i in 0..len {
                    let base = b * plane + (h * len + i) * len;
                    let gi = &g[(b * len + i) * d + col..][..dh];
                    let mut dot = T::zero();
                    for j in 0..len {
                        if !spec.mask.allowed(i, j) {
                            continue;
                        }
                        let drop = match &spec.dropout {
                            Some(m) => m[base + j],
                            None => T::one(),
                        };
                        let p = probs[base + j];
                        let vo = (b * len + j) * d + col;
                        let mut s = T::zero();
                        for t in 0..dh {
                            s += gi[t] * vv.data()[vo + t];
                        }
                        let w = p * drop;
                        for t in 0..dh {
                            dv[vo + t] += w * gi[t];
                        }
                        dp[j] = s * drop;
                        dot += p * dp[j];
                    }
                    let qo = (b * len + i) * d + col;
                    for j in 0..len {
                        if !spec.mask.allowed(i, j) {
                            continue;
                        }
                        let dl = probs[base + j] * (dp[j] - dot) * spec.scale;
                        let ko = (b * len + j) * d + col;
                        for t in 0..dh {
                            dq[qo + t] += dl * kv.data()[ko + t];
                            dk[ko + t] += dl * qv.data()[qo + t];
                        }
                    }
                }
            }
        }
        for (var, buf) in [(*q, dq), (*k, dk), (*v, dv)] {
            if self.rg(var) {
                let d = acc(grads, var, buf.len());
                for (o, x) in d.iter_mut().zip(buf) {
                    *o += x;
                }
            }
        }
    }
}

fn softmax_into<T: Real>(row: &[T], out: &mut [T]) -> Result<()> {
    let mut max = T::neg_infinity();
    for &v in row {
        if v.is_nan() || v == T::infinity() {
            return Err(Error::Numeric(format!("softmax input {v}")));
        }
        if v > max {
            max = v;
        }
    }
    if max == T::neg_infinity() {
        return Err(Error::Numeric("softmax row is entirely -inf".into()));
    }
    let mut denom = T::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - max).exp();
        *o = e;
        denom += e;
    }
    for o in out.iter_mut() {
        *o /= denom;
    }
    Ok(())
}

/// Softmax of a single row outside any tape.
pub fn softmax_row<T: Real>(row: &[T]) -> Result<Vec<T>> {
    let mut out = vec![T::zero(); row.len()];
    softmax_into(row, &mut out)?;
    Ok(out)
}

fn check_prob_rows<T: Real>(op: &'static str, t: &Tensor<T>) -> Result<()> {
    for i in 0..t.rows() {
        let row = t.row(i);
        let sum: f64 = row.iter().map(|v| v.as_f64()).sum();
        if (sum - 1.0).abs() > PROB_ROW_TOL || row.iter().any(|&v| v < T::zero() || !v.is_finite()) {
            return Err(Error::contract(
                op,
                format!("row {i} is not a probability vector (sum {sum})"),
            ));
        }
    }
    Ok(())
}
