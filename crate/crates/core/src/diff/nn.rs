//! Layers as bundles of parameter ids plus a forward pass on a tape.

use rand::Rng;

use super::{DiffError, ParamId, ParameterStore, Scalar, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Weights and bias uniform in `±1/sqrt(in_dim)`.
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParameterStore<F>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w = store.add_uniform(&format!("{name}.w"), &[in_dim, out_dim], bound, rng);
        let b = Some(store.add_uniform(&format!("{name}.b"), &[out_dim], bound, rng));
        Self { w, b, in_dim, out_dim }
    }

    pub fn without_bias<F: Scalar, R: Rng>(
        store: &mut ParameterStore<F>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w = store.add_uniform(&format!("{name}.w"), &[in_dim, out_dim], bound, rng);
        Self {
            w,
            b: None,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, store: &ParameterStore<F>, x: Var) -> Result<Var, DiffError> {
        let w = tape.param(store, self.w);
        let b = self.b.map(|b| tape.param(store, b));
        tape.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<F: Scalar>(store: &mut ParameterStore<F>, name: &str, dim: usize) -> Self {
        let gain = store.add(
            &format!("{name}.gain"),
            Tensor::new(&[dim], vec![F::one(); dim]).expect("shape"),
        );
        let bias = store.add(&format!("{name}.bias"), Tensor::zeros(&[dim]));
        Self { gain, bias }
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, store: &ParameterStore<F>, x: Var) -> Result<Var, DiffError> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b, F::lit(LN_EPS))
    }
}

/// Scaled dot-product attention over `heads` slices of the last axis.
/// `q` is `[B,Lq,D]`, `k` and `v` are `[B,Lk,D]`.
pub fn attention<F: Scalar>(tape: &mut Tape<F>, q: Var, k: Var, v: Var, heads: usize) -> Result<Var, DiffError> {
    let d = *tape.shape(q).last().unwrap_or(&0);
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(DiffError::Heads { heads, dim: d });
    }
    let dh = d / heads;
    let qh = tape.split_heads(q, heads)?;
    let kh = tape.split_heads(k, heads)?;
    let vh = tape.split_heads(v, heads)?;
    let s = tape.bmm(qh, kh, true)?;
    let s = tape.scale(s, F::one() / F::lit(dh as f64).sqrt())?;
    let p = tape.softmax(s)?;
    let o = tape.bmm(p, vh, false)?;
    tape.merge_heads(o, heads)
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParameterStore<F>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self, DiffError> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(DiffError::Heads { heads, dim });
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            // a key bias shifts every score in a row equally, so it is omitted
            k: Linear::without_bias(store, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng),
            heads,
        })
    }

    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParameterStore<F>,
        query: Var,
        context: Var,
    ) -> Result<Var, DiffError> {
        let q = self.q.forward(tape, store, query)?;
        let k = self.k.forward(tape, store, context)?;
        let v = self.v.forward(tape, store, context)?;
        let o = attention(tape, q, k, v, self.heads)?;
        self.out.forward(tape, store, o)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<F: Scalar, R: Rng>(store: &mut ParameterStore<F>, name: &str, dim: usize, rng: &mut R) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), dim, 4 * dim, rng),
            down: Linear::new(store, &format!("{name}.down"), 4 * dim, dim, rng),
        }
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, store: &ParameterStore<F>, x: Var) -> Result<Var, DiffError> {
        let h = self.up.forward(tape, store, x)?;
        let h = tape.relu(h)?;
        self.down.forward(tape, store, h)
    }
}

/// Pre-norm self-attention block.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
}

impl EncoderLayer {
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParameterStore<F>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self, DiffError> {
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, rng),
        })
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, store: &ParameterStore<F>, x: Var) -> Result<Var, DiffError> {
        let h = self.norm1.forward(tape, store, x)?;
        let a = self.attn.forward(tape, store, h, h)?;
        let x = tape.add(x, a)?;
        let h = self.norm2.forward(tape, store, x)?;
        let f = self.ffn.forward(tape, store, h)?;
        tape.add(x, f)
    }
}

/// Pre-norm block: self-attention, cross-attention to `memory`, feed-forward.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub norm1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm3: LayerNorm,
    pub ffn: FeedForward,
}

impl DecoderLayer {
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParameterStore<F>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self, DiffError> {
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), dim, heads, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), dim, heads, rng)?,
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), dim),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, rng),
        })
    }

    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParameterStore<F>,
        query: Var,
        memory: Var,
    ) -> Result<Var, DiffError> {
        let h = self.norm1.forward(tape, store, query)?;
        let a = self.self_attn.forward(tape, store, h, h)?;
        let x = tape.add(query, a)?;
        let h = self.norm2.forward(tape, store, x)?;
        let c = self.cross_attn.forward(tape, store, h, memory)?;
        let x = tape.add(x, c)?;
        let h = self.norm3.forward(tape, store, x)?;
        let f = self.ffn.forward(tape, store, h)?;
        tape.add(x, f)
    }
}

/// Fixed sin/cos position table, `[len, dim]`.
pub fn sinusoid_table<F: Scalar>(len: usize, dim: usize) -> Tensor<F> {
    let mut data = vec![F::zero(); len * dim];
    for pos in 0..len {
        for i in 0..dim {
            let freq = 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let a = pos as f64 / freq;
            data[pos * dim + i] = F::lit(if i % 2 == 0 { a.sin() } else { a.cos() });
        }
    }
    Tensor::new(&[len, dim], data).expect("shape")
}
