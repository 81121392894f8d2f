//! Scaled dot-product attention, the cascaded reference chain and
//! attention-map evolution.
//!
//! Token matrices are `T x C` with row-major pixel order. Attention maps are
//! `T x T` and row-stochastic: row `i` is query `i`'s distribution over keys.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2dLayer, Initializer, ParamStore, ParamVars};
use crate::tensor::{Scalar, Tensor};

/// Row-stochastic `T x T` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap<T>(Tensor<T>);

impl<T: Scalar> AttentionMap<T> {
    pub const ROW_SUM_TOL: f64 = 1e-5;

    /// Validates shape, range and row sums (within [`Self::ROW_SUM_TOL`]).
    pub fn new(map: Tensor<T>) -> Result<Self> {
        let n = match *map.shape() {
            [r, c] if r == c => r,
            _ => return Err(Error::invalid("attention map", format!("square matrix required, got {:?}", map.shape()))),
        };
        let err = row_sum_error(&map);
        if err > Self::ROW_SUM_TOL {
            return Err(Error::invalid("attention map", format!("row sums deviate from 1 by {err}")));
        }
        if map.data().iter().any(|&v| v < T::zero() || v > T::one()) {
            return Err(Error::invalid("attention map", "entries outside [0, 1]"));
        }
        debug_assert_eq!(n * n, map.numel());
        Ok(AttentionMap(map))
    }

    pub fn tokens(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn as_tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }

    /// `softmax_rows(self * kernel)`; see [`evolve_attention`].
    pub fn evolve(&self, kernel: &[T]) -> Result<Self> {
        let mut tape = Tape::new();
        let a = tape.constant(self.0.clone());
        let k = tape.constant(Tensor::new(&[kernel.len()], kernel.to_vec())?);
        let out = evolve_attention(&mut tape, a, k)?;
        AttentionMap::new(tape.value(out).clone())
    }
}

/// Largest `|row sum - 1|` of a matrix.
pub fn row_sum_error<T: Scalar>(map: &Tensor<T>) -> f64 {
    let cols = *map.shape().last().unwrap_or(&1);
    map.data().chunks(cols).map(|row| (row.iter().copied().sum::<T>().to_f64_lossy() - 1.0).abs()).fold(0.0, f64::max)
}

/// `A = softmax(Q K^T / sqrt(C))`, `Y = A V`. Returns `(Y, A)`.
pub fn scaled_dot_attention<T: Scalar>(tape: &mut Tape<T>, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let (sq, sk, sv) = (tape.shape(q).to_vec(), tape.shape(k).to_vec(), tape.shape(v).to_vec());
    if sq.len() != 2 || sq != sk {
        return Err(Error::shape("scaled_dot_attention", &sq, &sk));
    }
    if sv.len() != 2 || sv[0] != sk[0] {
        return Err(Error::shape("scaled_dot_attention", &sk, &sv));
    }
    let d = sq[1];
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let logits = tape.scale(logits, T::one() / T::from_usize(d).unwrap().sqrt())?;
    let a = tape.softmax(logits, 1)?;
    let y = tape.matmul(a, v)?;
    Ok((y, a))
}

/// Splits the channel axis into `heads` groups and attends per group.
/// Returns the concatenated outputs and one map per head.
pub fn multi_head_attention<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
) -> Result<(Var, Vec<Var>)> {
    if heads <= 1 {
        let (y, a) = scaled_dot_attention(tape, q, k, v)?;
        return Ok((y, vec![a]));
    }
    let c = tape.shape(q)[1];
    if !c.is_multiple_of(heads) {
        return Err(Error::Config(format!("{c} channels not divisible into {heads} heads")));
    }
    let hd = c / heads;
    let mut outs = Vec::with_capacity(heads);
    let mut maps = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * hd, (h + 1) * hd);
        let qh = tape.slice(q, 1, lo, hi)?;
        let kh = tape.slice(k, 1, lo, hi)?;
        let vh = tape.slice(v, 1, lo, hi)?;
        let (y, a) = scaled_dot_attention(tape, qh, kh, vh)?;
        outs.push(y);
        maps.push(a);
    }
    Ok((tape.concat(&outs, 1)?, maps))
}

/// Cross-modality attention: PAN tokens query, MS tokens serve as keys and
/// values. Returns `(F1_global, A1)`.
pub fn cross_attention_first<T: Scalar>(tape: &mut Tape<T>, f_pan: Var, f_ms: Var) -> Result<(Var, Var)> {
    if tape.shape(f_pan) != tape.shape(f_ms) {
        return Err(Error::shape("cross_attention", tape.shape(f_pan), tape.shape(f_ms)));
    }
    scaled_dot_attention(tape, f_pan, f_ms, f_ms)
}

/// `A_next = softmax_rows(A * kernel)`: every row (one query's distribution
/// over keys) is correlated with the shared odd-length kernel, zero padded,
/// and then renormalized. The input map is used as-is, so even a delta
/// kernel re-applies softmax to probabilities.
pub fn evolve_attention<T: Scalar>(tape: &mut Tape<T>, a: Var, kernel: Var) -> Result<Var> {
    let mixed = tape.conv1d_rows(a, kernel)?;
    tape.softmax(mixed, 1)
}

/// Three bias-carrying `C -> C` token maps, applied as 1x1 convolutions.
#[derive(Debug, Clone, Copy)]
pub struct QkvProjection {
    pub q: Conv2dLayer,
    pub k: Conv2dLayer,
    pub v: Conv2dLayer,
}

impl QkvProjection {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Initializer, name: &str, width: usize) -> Self {
        QkvProjection {
            q: Conv2dLayer::new(store, init, &format!("{name}.q"), 1, width, width),
            k: Conv2dLayer::new(store, init, &format!("{name}.k"), 1, width, width),
            v: Conv2dLayer::new(store, init, &format!("{name}.v"), 1, width, width),
        }
    }

    pub fn width(&self) -> usize {
        self.q.cin
    }

    pub fn num_params(&self) -> usize {
        self.q.num_params() + self.k.num_params() + self.v.num_params()
    }

    /// Projects `T x C` tokens into `(Q, K, V)`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &ParamVars, x: Var) -> Result<(Var, Var, Var)> {
        let (t, c) = match *tape.shape(x) {
            [t, c] => (t, c),
            _ => return Err(Error::shape("qkv", tape.shape(x), &[self.width()])),
        };
        if c != self.width() {
            return Err(Error::shape("qkv", tape.shape(x), &[self.width()]));
        }
        let grid = tape.reshape(x, &[1, t, c])?;
        let mut out = [grid; 3];
        for (slot, layer) in out.iter_mut().zip([&self.q, &self.k, &self.v]) {
            let y = layer.forward(tape, p, grid)?;
            *slot = tape.reshape(y, &[t, c])?;
        }
        Ok((out[0], out[1], out[2]))
    }
}

/// The N-cascaded self-attention chain: `Y_0 = X`, and for each projection
/// `(Q, K, V) = proj(Y_{r-1})`, `(Y_r, A_r) = attention(Q, K, V)`.
pub fn cascaded_chain_reference<T: Scalar>(
    tape: &mut Tape<T>,
    p: &ParamVars,
    x: Var,
    projections: &[QkvProjection],
) -> Result<Vec<(Var, Var)>> {
    if projections.is_empty() {
        return Err(Error::Config("cascaded chain needs at least one block".into()));
    }
    let mut y = x;
    let mut out = Vec::with_capacity(projections.len());
    for proj in projections {
        let (q, k, v) = proj.forward(tape, p, y)?;
        let (next, a) = scaled_dot_attention(tape, q, k, v)?;
        out.push((next, a));
        y = next;
    }
    Ok(out)
}

/// Cosine similarity of two flattened maps.
pub fn attention_cosine_similarity<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("cosine_similarity", a.shape(), b.shape()));
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x.to_f64_lossy(), y.to_f64_lossy());
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate { metric: "cosine_similarity", msg: "zero-norm input".into() });
    }
    Ok((dot / (na * nb).sqrt()).clamp(-1.0, 1.0))
}
