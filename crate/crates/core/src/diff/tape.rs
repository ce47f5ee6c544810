use std::collections::HashMap;

use super::{gemm, DiffError, GradStore, ParamId, ParameterStore, Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<F> {
    Leaf,
    Param,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Bmm {
        a: Var,
        b: Var,
        tb: bool,
    },
    Add(Var, Var),
    AddConst(Var),
    Scale(Var, F),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        g: Var,
        b: Var,
        xhat: Vec<F>,
        inv: Vec<F>,
    },
    RmsNorm {
        x: Var,
        inv: Vec<F>,
    },
    Reshape(Var),
    SplitHeads {
        x: Var,
        heads: usize,
    },
    MergeHeads {
        x: Var,
        heads: usize,
    },
    ConcatSeq(Var, Var),
    TimeMix {
        x: Var,
        m: Vec<F>,
        t: usize,
    },
    Mpjpe {
        pred: Var,
        diff: Vec<F>,
        scale: F,
    },
    Cosine {
        a: Var,
        b: Var,
        cos: Vec<F>,
        na: Vec<F>,
        nb: Vec<F>,
    },
    WeightedSum {
        x: Var,
        w: Vec<F>,
    },
    Sum(Var),
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Records a forward computation. Nodes are appended in evaluation order, so
/// walking them backwards is a valid reverse topological order.
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    bound: HashMap<ParamId, Var>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> DiffError {
    DiffError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn bad(op: &'static str, shape: &[usize]) -> DiffError {
    DiffError::BadShape {
        op,
        shape: shape.to_vec(),
    }
}

/// `[B,L,H*dh] <-> [B*H,L,dh]` index shuffle.
fn permute_heads<F: Scalar>(src: &[F], b: usize, l: usize, h: usize, dh: usize, split: bool) -> Vec<F> {
    let mut out = vec![F::zero(); src.len()];
    let d = h * dh;
    for bi in 0..b {
        for li in 0..l {
            for hi in 0..h {
                let merged = (bi * l + li) * d + hi * dh;
                let heads = ((bi * h + hi) * l + li) * dh;
                let (from, to) = if split { (merged, heads) } else { (heads, merged) };
                out[to..to + dh].copy_from_slice(&src[from..from + dh]);
            }
        }
    }
    out
}

/// Reads `[B,M,K]` or `[M,K]` as (batch, rows, cols).
fn as_batched(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match *shape {
        [m, k] => Some((1, m, k)),
        [b, m, k] => Some((b, m, k)),
        _ => None,
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Result<Var, DiffError> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(DiffError::NonFinite(name));
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Input that no gradient flows into.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParameterStore<F>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: store.get(id).clone(),
            op: Op::Param,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.bound.insert(id, v);
        v
    }

    /// `x W + b` over the last axis of `x`; `W` is `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, DiffError> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let [inp, out] = ws[..] else {
            return Err(bad("linear", &ws));
        };
        if xs.last() != Some(&inp) {
            return Err(mismatch("linear", &xs, &ws));
        }
        if let Some(b) = b {
            if self.shape(b) != [out] {
                return Err(mismatch("linear", &ws, self.shape(b)));
            }
        }
        let n = self.value(x).len() / inp;
        let mut y = vec![F::zero(); n * out];
        gemm(
            n,
            inp,
            out,
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            F::zero(),
            &mut y,
        );
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in y.chunks_mut(out) {
                for (v, c) in row.iter_mut().zip(bias) {
                    *v = *v + *c;
                }
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = out;
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push("linear", Tensor::new(&shape, y)?, Op::Linear { x, w, b }, needs)
    }

    /// Batched matrix product `a b` or `a b^T`, batch on the leading axis.
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var, DiffError> {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        let (ba, m, k) = as_batched(&as_).ok_or_else(|| bad("bmm", &as_))?;
        let (bb, r, c) = as_batched(&bs).ok_or_else(|| bad("bmm", &bs))?;
        let (kb, n) = if transpose_b { (c, r) } else { (r, c) };
        if ba != bb || k != kb || as_.len() != bs.len() {
            return Err(mismatch("bmm", &as_, &bs));
        }
        let mut y = vec![F::zero(); ba * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for i in 0..ba {
                gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..(i + 1) * m * k],
                    false,
                    &bv[i * k * n..(i + 1) * k * n],
                    transpose_b,
                    F::zero(),
                    &mut y[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let shape = if as_.len() == 2 { vec![m, n] } else { vec![ba, m, n] };
        let needs = self.needs(a) || self.needs(b);
        self.push("bmm", Tensor::new(&shape, y)?, Op::Bmm { a, b, tb: transpose_b }, needs)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        if self.shape(a).len() != 2 || self.shape(b).len() != 2 {
            return Err(mismatch("matmul", self.shape(a), self.shape(b)));
        }
        self.bmm(a, b, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("add", self.shape(a), self.shape(b)));
        }
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        self.push("add", y, Op::Add(a, b), needs)
    }

    /// Adds a constant tiled over the leading axes (trailing shapes must match).
    pub fn add_const(&mut self, x: Var, c: &Tensor<F>) -> Result<Var, DiffError> {
        let xs = self.shape(x);
        let cs = c.shape();
        if cs.len() > xs.len() || xs[xs.len() - cs.len()..] != *cs {
            return Err(mismatch("add_const", xs, cs));
        }
        let mut y = self.value(x).clone();
        let cd = c.data();
        for chunk in y.data_mut().chunks_mut(cd.len()) {
            for (v, k) in chunk.iter_mut().zip(cd) {
                *v = *v + *k;
            }
        }
        let needs = self.needs(x);
        self.push("add_const", y, Op::AddConst(x), needs)
    }

    pub fn scale(&mut self, x: Var, s: F) -> Result<Var, DiffError> {
        let mut y = self.value(x).clone();
        y.data_mut().iter_mut().for_each(|v| *v = *v * s);
        let needs = self.needs(x);
        self.push("scale", y, Op::Scale(x, s), needs)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, DiffError> {
        let mut y = self.value(x).clone();
        y.data_mut().iter_mut().for_each(|v| *v = v.max(F::zero()));
        let needs = self.needs(x);
        self.push("relu", y, Op::Relu(x), needs)
    }

    /// Softmax along the last axis, max-shifted.
    pub fn softmax(&mut self, x: Var) -> Result<Var, DiffError> {
        let mut y = self.value(x).clone();
        let d = y.last_dim();
        for row in y.data_mut().chunks_mut(d) {
            let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut s = F::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s = s + *v;
            }
            for v in row.iter_mut() {
                *v = *v / s;
            }
        }
        let needs = self.needs(x);
        self.push("softmax", y, Op::Softmax(x), needs)
    }

    /// Normalises the last axis, then applies gain `g` and bias `b`.
    pub fn layer_norm(&mut self, x: Var, g: Var, b: Var, eps: F) -> Result<Var, DiffError> {
        let d = self.value(x).last_dim();
        if self.shape(g) != [d] || self.shape(b) != [d] {
            return Err(mismatch("layer_norm", self.shape(x), self.shape(g)));
        }
        let xv = self.value(x);
        let gv = self.value(g).data();
        let bv = self.value(b).data();
        let df = F::lit(d as f64);
        let rows = xv.len() / d;
        let mut xhat = vec![F::zero(); xv.len()];
        let mut inv = vec![F::zero(); rows];
        let mut y = vec![F::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<F>() / df;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<F>() / df;
            let is = F::one() / (var + eps).sqrt();
            inv[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                y[r * d + j] = gv[j] * h + bv[j];
            }
        }
        let shape = xv.shape().to_vec();
        let needs = self.needs(x) || self.needs(g) || self.needs(b);
        self.push(
            "layer_norm",
            Tensor::new(&shape, y)?,
            Op::LayerNorm { x, g, b, xhat, inv },
            needs,
        )
    }

    /// Divides each row of the last axis by its root mean square.
    pub fn rms_norm(&mut self, x: Var, eps: F) -> Result<Var, DiffError> {
        let xv = self.value(x);
        let d = xv.last_dim();
        let df = F::lit(d as f64);
        let mut inv = Vec::with_capacity(xv.len() / d.max(1));
        let mut y = xv.data().to_vec();
        for row in y.chunks_mut(d) {
            let ms = row.iter().map(|v| *v * *v).sum::<F>() / df;
            let is = F::one() / (ms + eps).sqrt();
            row.iter_mut().for_each(|v| *v = *v * is);
            inv.push(is);
        }
        let shape = xv.shape().to_vec();
        let needs = self.needs(x);
        self.push("rms_norm", Tensor::new(&shape, y)?, Op::RmsNorm { x, inv }, needs)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, DiffError> {
        let y = self.value(x).clone().reshaped(shape)?;
        let needs = self.needs(x);
        self.push("reshape", y, Op::Reshape(x), needs)
    }

    /// `[B,L,D] -> [B*heads, L, D/heads]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var, DiffError> {
        let xs = self.shape(x).to_vec();
        let [b, l, d] = xs[..] else {
            return Err(bad("split_heads", &xs));
        };
        if heads == 0 || d % heads != 0 {
            return Err(DiffError::Heads { heads, dim: d });
        }
        let dh = d / heads;
        let y = permute_heads(self.value(x).data(), b, l, heads, dh, true);
        let needs = self.needs(x);
        self.push(
            "split_heads",
            Tensor::new(&[b * heads, l, dh], y)?,
            Op::SplitHeads { x, heads },
            needs,
        )
    }

    /// `[B*heads, L, dh] -> [B, L, heads*dh]`.
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Result<Var, DiffError> {
        let xs = self.shape(x).to_vec();
        let [bh, l, dh] = xs[..] else {
            return Err(bad("merge_heads", &xs));
        };
        if heads == 0 || bh % heads != 0 {
            return Err(bad("merge_heads", &xs));
        }
        let b = bh / heads;
        let y = permute_heads(self.value(x).data(), b, l, heads, dh, false);
        let needs = self.needs(x);
        self.push(
            "merge_heads",
            Tensor::new(&[b, l, heads * dh], y)?,
            Op::MergeHeads { x, heads },
            needs,
        )
    }

    /// Joins `[B,La,D]` and `[B,Lb,D]` along the sequence axis.
    pub fn concat_seq(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        let (&[n, la, d], &[nb, lb, db]) = (&as_[..], &bs[..]) else {
            return Err(mismatch("concat_seq", &as_, &bs));
        };
        if n != nb || d != db {
            return Err(mismatch("concat_seq", &as_, &bs));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut y = Vec::with_capacity(av.len() + bv.len());
        for i in 0..n {
            y.extend_from_slice(&av[i * la * d..(i + 1) * la * d]);
            y.extend_from_slice(&bv[i * lb * d..(i + 1) * lb * d]);
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(
            "concat_seq",
            Tensor::new(&[n, la + lb, d], y)?,
            Op::ConcatSeq(a, b),
            needs,
        )
    }

    /// Left-multiplies every `[T,C]` slice of `x` by the constant `m` (`T x T`).
    pub fn time_mix(&mut self, x: Var, m: &[F]) -> Result<Var, DiffError> {
        let xs = self.shape(x).to_vec();
        let [n, t, c] = xs[..] else {
            return Err(bad("time_mix", &xs));
        };
        if m.len() != t * t {
            return Err(mismatch("time_mix", &xs, &[m.len()]));
        }
        let xv = self.value(x).data();
        let mut y = vec![F::zero(); xv.len()];
        for i in 0..n {
            let s = i * t * c..(i + 1) * t * c;
            gemm(t, t, c, m, false, &xv[s.clone()], false, F::zero(), &mut y[s]);
        }
        let needs = self.needs(x);
        self.push(
            "time_mix",
            Tensor::new(&xs, y)?,
            Op::TimeMix { x, m: m.to_vec(), t },
            needs,
        )
    }

    /// Mean over the batch of the per-frame squared error summed over
    /// coordinates and averaged over frames. `pred` is `[B,T,C]`.
    pub fn mpjpe_loss(&mut self, pred: Var, target: &Tensor<F>) -> Result<Var, DiffError> {
        let ps = self.shape(pred).to_vec();
        if ps.len() != 3 || ps != target.shape() {
            return Err(mismatch("mpjpe_loss", &ps, target.shape()));
        }
        let diff: Vec<F> = self
            .value(pred)
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, q)| *p - *q)
            .collect();
        let scale = F::one() / F::lit((ps[0] * ps[1]) as f64);
        let loss = diff.iter().map(|e| *e * *e).sum::<F>() * scale;
        let needs = self.needs(pred);
        self.push(
            "mpjpe_loss",
            Tensor::scalar(loss),
            Op::Mpjpe { pred, diff, scale },
            needs,
        )
    }

    /// Mean of `1 - cos(a_i, b_i)` over the rows of two `[N,D]` tensors.
    pub fn cosine_align(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let as_ = self.shape(a).to_vec();
        if as_.len() != 2 || as_ != self.shape(b) || as_[0] == 0 {
            return Err(mismatch("cosine_align", &as_, self.shape(b)));
        }
        let d = as_[1];
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let rows = as_[0];
        let (mut cos, mut na, mut nb) = (Vec::new(), Vec::new(), Vec::new());
        let mut total = F::zero();
        for r in 0..rows {
            let x = &av[r * d..(r + 1) * d];
            let y = &bv[r * d..(r + 1) * d];
            let nx = x.iter().map(|v| *v * *v).sum::<F>().sqrt();
            let ny = y.iter().map(|v| *v * *v).sum::<F>().sqrt();
            if nx == F::zero() || ny == F::zero() {
                return Err(DiffError::ZeroNorm { row: r });
            }
            let c = x.iter().zip(y).map(|(p, q)| *p * *q).sum::<F>() / (nx * ny);
            total = total + (F::one() - c);
            cos.push(c);
            na.push(nx);
            nb.push(ny);
        }
        let loss = total / F::lit(rows as f64);
        let needs = self.needs(a) || self.needs(b);
        self.push(
            "cosine_align",
            Tensor::scalar(loss),
            Op::Cosine { a, b, cos, na, nb },
            needs,
        )
    }

    /// `sum_i w_i x_i` with constant weights.
    pub fn weighted_sum(&mut self, x: Var, w: &[F]) -> Result<Var, DiffError> {
        if w.len() != self.value(x).len() {
            return Err(mismatch("weighted_sum", self.shape(x), &[w.len()]));
        }
        let s = self.value(x).data().iter().zip(w).map(|(a, b)| *a * *b).sum::<F>();
        let needs = self.needs(x);
        self.push(
            "weighted_sum",
            Tensor::scalar(s),
            Op::WeightedSum { x, w: w.to_vec() },
            needs,
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, DiffError> {
        let s = self.value(x).data().iter().copied().sum::<F>();
        let needs = self.needs(x);
        self.push("sum", Tensor::scalar(s), Op::Sum(x), needs)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Grads<F>, DiffError> {
        let ls = self.shape(loss);
        if self.value(loss).len() != 1 {
            return Err(DiffError::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::new(ls, vec![F::one()])?);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        let params = self.bound.iter().map(|(&id, &v)| (id, v)).collect();
        Ok(Grads { grads, params })
    }

    fn acc(&self, grads: &mut [Option<Tensor<F>>], v: Var, g: Tensor<F>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => t.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node<F>, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) -> Result<(), DiffError> {
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (inp, out) = (wv.shape()[0], wv.shape()[1]);
                let n = xv.len() / inp;
                if self.needs(*x) {
                    let mut dx = vec![F::zero(); n * inp];
                    gemm(n, out, inp, gd, false, wv.data(), true, F::zero(), &mut dx);
                    self.acc(grads, *x, Tensor::new(xv.shape(), dx)?);
                }
                if self.needs(*w) {
                    let mut dw = vec![F::zero(); inp * out];
                    gemm(inp, n, out, xv.data(), true, gd, false, F::zero(), &mut dw);
                    self.acc(grads, *w, Tensor::new(wv.shape(), dw)?);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut db = vec![F::zero(); out];
                        for row in gd.chunks(out) {
                            for (a, v) in db.iter_mut().zip(row) {
                                *a = *a + *v;
                            }
                        }
                        self.acc(grads, *b, Tensor::new(&[out], db)?);
                    }
                }
            }
            Op::Bmm { a, b, tb } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (nb, m, k) = as_batched(av.shape()).unwrap();
                let n = g.last_dim();
                if self.needs(*a) {
                    let mut da = vec![F::zero(); av.len()];
                    for i in 0..nb {
                        gemm(
                            m,
                            n,
                            k,
                            &gd[i * m * n..(i + 1) * m * n],
                            false,
                            &bv.data()[i * k * n..(i + 1) * k * n],
                            !*tb,
                            F::zero(),
                            &mut da[i * m * k..(i + 1) * m * k],
                        );
                    }
                    self.acc(grads, *a, Tensor::new(av.shape(), da)?);
                }
                if self.needs(*b) {
                    let mut db = vec![F::zero(); bv.len()];
                    for i in 0..nb {
                        let ga = &gd[i * m * n..(i + 1) * m * n];
                        let aa = &av.data()[i * m * k..(i + 1) * m * k];
                        let out = &mut db[i * k * n..(i + 1) * k * n];
                        if *tb {
                            gemm(n, m, k, ga, true, aa, false, F::zero(), out);
                        } else {
                            gemm(k, m, n, aa, true, ga, false, F::zero(), out);
                        }
                    }
                    self.acc(grads, *b, Tensor::new(bv.shape(), db)?);
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::AddConst(x) => self.acc(grads, *x, g.clone()),
            Op::Scale(x, s) => {
                let mut dx = g.clone();
                dx.data_mut().iter_mut().for_each(|v| *v = *v * *s);
                self.acc(grads, *x, dx);
            }
            Op::Relu(x) => {
                let mut dx = g.clone();
                for (d, y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                    if *y <= F::zero() {
                        *d = F::zero();
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::Softmax(x) => {
                let d = node.value.last_dim();
                let mut dx = g.clone();
                for (dr, yr) in dx.data_mut().chunks_mut(d).zip(node.value.data().chunks(d)) {
                    let dot = dr.iter().zip(yr).map(|(a, b)| *a * *b).sum::<F>();
                    for (dv, yv) in dr.iter_mut().zip(yr) {
                        *dv = *yv * (*dv - dot);
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::RmsNorm { x, inv } => {
                let d = node.value.last_dim();
                let df = F::lit(d as f64);
                let y = node.value.data();
                let mut dx = vec![F::zero(); y.len()];
                for (r, is) in inv.iter().enumerate() {
                    let rows = r * d..(r + 1) * d;
                    let dy = &gd[rows.clone()];
                    let yr = &y[rows.clone()];
                    let dot = dy.iter().zip(yr).map(|(a, b)| *a * *b).sum::<F>() / df;
                    for ((o, a), b) in dx[rows].iter_mut().zip(dy).zip(yr) {
                        *o = *is * (*a - *b * dot);
                    }
                }
                self.acc(grads, *x, Tensor::new(node.value.shape(), dx)?);
            }
            Op::LayerNorm {
                x,
                g: gain,
                b,
                xhat,
                inv,
            } => {
                let d = node.value.last_dim();
                let gv = self.value(*gain).data();
                if self.needs(*x) {
                    let df = F::lit(d as f64);
                    let mut dx = vec![F::zero(); xhat.len()];
                    for (r, is) in inv.iter().enumerate() {
                        let rows = r * d..(r + 1) * d;
                        let dy = &gd[rows.clone()];
                        let xh = &xhat[rows.clone()];
                        let mut s1 = F::zero();
                        let mut s2 = F::zero();
                        for j in 0..d {
                            let dh = dy[j] * gv[j];
                            s1 = s1 + dh;
                            s2 = s2 + dh * xh[j];
                        }
                        for j in 0..d {
                            let dh = dy[j] * gv[j];
                            dx[r * d + j] = *is / df * (df * dh - s1 - xh[j] * s2);
                        }
                    }
                    self.acc(grads, *x, Tensor::new(node.value.shape(), dx)?);
                }
                let mut dg = vec![F::zero(); d];
                let mut db = vec![F::zero(); d];
                for (dy, xh) in gd.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        dg[j] = dg[j] + dy[j] * xh[j];
                        db[j] = db[j] + dy[j];
                    }
                }
                self.acc(grads, *gain, Tensor::new(&[d], dg)?);
                self.acc(grads, *b, Tensor::new(&[d], db)?);
            }
            Op::Reshape(x) => {
                let dx = g.clone().reshaped(self.shape(*x))?;
                self.acc(grads, *x, dx);
            }
            Op::SplitHeads { x, heads } => {
                let xs = self.shape(*x);
                let dx = permute_heads(gd, xs[0], xs[1], *heads, xs[2] / heads, false);
                self.acc(grads, *x, Tensor::new(xs, dx)?);
            }
            Op::MergeHeads { x, heads } => {
                let xs = self.shape(*x);
                let dx = permute_heads(gd, xs[0] / heads, xs[1], *heads, xs[2], true);
                self.acc(grads, *x, Tensor::new(xs, dx)?);
            }
            Op::ConcatSeq(a, b) => {
                let as_ = self.shape(*a);
                let bs = self.shape(*b);
                let (n, la, lb, d) = (as_[0], as_[1], bs[1], as_[2]);
                let mut da = Vec::with_capacity(n * la * d);
                let mut db = Vec::with_capacity(n * lb * d);
                for row in gd.chunks((la + lb) * d) {
                    da.extend_from_slice(&row[..la * d]);
                    db.extend_from_slice(&row[la * d..]);
                }
                self.acc(grads, *a, Tensor::new(as_, da)?);
                self.acc(grads, *b, Tensor::new(bs, db)?);
            }
            Op::TimeMix { x, m, t } => {
                let xs = self.shape(*x);
                let c = xs[2];
                let mut dx = vec![F::zero(); gd.len()];
                for i in 0..xs[0] {
                    let s = i * t * c..(i + 1) * t * c;
                    gemm(*t, *t, c, m, true, &gd[s.clone()], false, F::zero(), &mut dx[s]);
                }
                self.acc(grads, *x, Tensor::new(xs, dx)?);
            }
            Op::Mpjpe { pred, diff, scale } => {
                let k = gd[0] * F::lit(2.0) * *scale;
                let dx = diff.iter().map(|e| *e * k).collect();
                self.acc(grads, *pred, Tensor::new(self.shape(*pred), dx)?);
            }
            Op::Cosine { a, b, cos, na, nb } => {
                let s = self.shape(*a);
                let d = s[1];
                let k = -gd[0] / F::lit(s[0] as f64);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let mut da = vec![F::zero(); av.len()];
                let mut dbv = vec![F::zero(); bv.len()];
                for r in 0..s[0] {
                    let nn = na[r] * nb[r];
                    for j in 0..d {
                        let i = r * d + j;
                        da[i] = k * (bv[i] / nn - cos[r] * av[i] / (na[r] * na[r]));
                        dbv[i] = k * (av[i] / nn - cos[r] * bv[i] / (nb[r] * nb[r]));
                    }
                }
                self.acc(grads, *a, Tensor::new(s, da)?);
                self.acc(grads, *b, Tensor::new(s, dbv)?);
            }
            Op::WeightedSum { x, w } => {
                let dx = w.iter().map(|v| *v * gd[0]).collect();
                self.acc(grads, *x, Tensor::new(self.shape(*x), dx)?);
            }
            Op::Sum(x) => {
                let dx = vec![gd[0]; self.value(*x).len()];
                self.acc(grads, *x, Tensor::new(self.shape(*x), dx)?);
            }
        }
        Ok(())
    }
}

/// Result of one backward sweep.
pub struct Grads<F> {
    grads: Vec<Option<Tensor<F>>>,
    params: Vec<(ParamId, Var)>,
}

impl<F: Scalar> Grads<F> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Adds every bound parameter's gradient into `store`.
    pub fn accumulate_into(&self, store: &mut GradStore<F>) {
        for &(id, v) in &self.params {
            if let Some(g) = self.wrt(v) {
                store.accumulate(id, g);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn linear_forward_example() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[1.0, 1.0]));
        let w = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2], &[0.5, 0.5]));
        let y = tape.linear(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[4.5, 6.5]);
    }

    #[test]
    fn shape_errors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 3], &[1.0; 3]));
        let w = tape.constant(t(&[2, 2], &[1.0; 4]));
        assert!(matches!(tape.linear(x, w, None), Err(DiffError::ShapeMismatch { .. })));
        assert!(tape.add(x, w).is_err());
        assert!(tape.backward(w).is_err());
        let z = tape.constant(t(&[1, 2], &[0.0, 0.0]));
        let o = tape.constant(t(&[1, 2], &[1.0, 0.0]));
        assert!(matches!(tape.cosine_align(z, o), Err(DiffError::ZeroNorm { row: 0 })));
    }

    #[test]
    fn softmax_rows_are_stochastic() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[1000.0, -3.0, 0.5, -1e3, 2.0, 7.25]));
        let y = tape.softmax(x).unwrap();
        for row in tape.value(y).data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            assert!(row.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn heads_roundtrip() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let x = tape.constant(t(&[2, 3, 4], &data));
        let s = tape.split_heads(x, 2).unwrap();
        assert_eq!(tape.shape(s), &[4, 3, 2]);
        // head 1 of batch 0, position 0: columns 2..4 of row 0
        assert_eq!(&tape.value(s).data()[6..8], &[2.0, 3.0]);
        let m = tape.merge_heads(s, 2).unwrap();
        assert_eq!(tape.value(m).data(), &data[..]);
        assert!(tape.split_heads(x, 3).is_err());
    }

    #[test]
    fn double_backward_doubles_param_grads() {
        let mut store = ParameterStore::new();
        let w = store.add("w", t(&[2, 1], &[0.3, -0.7]));
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3, 2], &[1.0, 2.0, -1.0, 0.5, 0.0, 4.0]));
        let wv = tape.param(&store, w);
        let y = tape.linear(x, wv, None).unwrap();
        let l = tape.sum(y).unwrap();
        let mut gs = GradStore::new(&store);
        let g = tape.backward(l).unwrap();
        g.accumulate_into(&mut gs);
        let once = gs.get(w).unwrap().clone();
        tape.backward(l).unwrap().accumulate_into(&mut gs);
        let twice = gs.get(w).unwrap();
        assert_eq!(once.data(), &[0.0, 6.5]);
        for (a, b) in twice.data().iter().zip(once.data()) {
            assert_eq!(*a, 2.0 * b);
        }
    }

    #[test]
    fn mpjpe_value() {
        let mut tape = Tape::new();
        let p = tape.constant(t(&[1, 2, 3], &[0.3, 0.0, 0.0, 0.0, 0.0, 0.0]));
        let l = tape.mpjpe_loss(p, &Tensor::zeros(&[1, 2, 3])).unwrap();
        assert!((tape.value(l).item() - 0.045).abs() < 1e-15);
    }

    #[test]
    fn non_finite_is_reported() {
        if !cfg!(debug_assertions) {
            return;
        }
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1], &[f64::MAX]));
        assert!(matches!(tape.scale(x, 10.0), Err(DiffError::NonFinite("scale"))));
    }
}
