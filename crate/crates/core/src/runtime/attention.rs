//! RMSNorm, rotary embeddings and dense causal grouped-query attention,
//! with the matching backward passes.

use crate::arch::ArchDescriptor;
use crate::error::{Error, Result};
use crate::runtime::linalg::{axpy, dot, Matrix};
use crate::scalar::{lit, Scalar};

pub const ROPE_BASE: f64 = 10_000.0;

/// `y = w ⊙ x / sqrt(mean(x²) + eps)`; also returns `1/rms`.
pub fn rmsnorm<S: Scalar>(x: &[S], w: &[S], eps: S) -> (Vec<S>, S) {
    let n = S::from_usize(x.len()).unwrap();
    let ms = x.iter().map(|&v| v * v).sum::<S>() / n;
    let inv = S::one() / (ms + eps).sqrt();
    (x.iter().zip(w).map(|(&xi, &wi)| xi * inv * wi).collect(), inv)
}

pub fn rmsnorm_backward<S: Scalar>(x: &[S], w: &[S], inv: S, dy: &[S]) -> Vec<S> {
    let n = S::from_usize(x.len()).unwrap();
    let g: Vec<S> = dy.iter().zip(w).map(|(&d, &wi)| d * wi).collect();
    let gx = dot(&g, x);
    let c = inv * inv * inv * gx / n;
    g.iter().zip(x).map(|(&gi, &xi)| inv * gi - c * xi).collect()
}

/// Rotary embedding over adjacent pairs `(2i, 2i+1)` of each head.
#[derive(Debug, Clone)]
pub struct Rope<S> {
    head_dim: usize,
    inv_freq: Vec<S>,
}

impl<S: Scalar> Rope<S> {
    pub fn new(head_dim: usize) -> Self {
        let inv_freq = (0..head_dim / 2)
            .map(|i| lit(ROPE_BASE.powf(-2.0 * i as f64 / head_dim as f64)))
            .collect();
        Rope { head_dim, inv_freq }
    }

    fn rotate(&self, v: &mut [S], pos: usize, sign: S) {
        let p = S::from_usize(pos).unwrap();
        for head in v.chunks_exact_mut(self.head_dim) {
            for (i, &f) in self.inv_freq.iter().enumerate() {
                let (s, c) = (p * f).sin_cos();
                let s = s * sign;
                let (a, b) = (head[2 * i], head[2 * i + 1]);
                head[2 * i] = a * c - b * s;
                head[2 * i + 1] = a * s + b * c;
            }
        }
    }

    pub fn apply(&self, v: &mut [S], pos: usize) {
        self.rotate(v, pos, S::one());
    }

    /// Transpose (= inverse) of [`apply`](Self::apply).
    pub fn apply_inverse(&self, v: &mut [S], pos: usize) {
        self.rotate(v, pos, -S::one());
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttnWeights<S> {
    /// `(hidden, hidden)`
    pub q: Matrix<S>,
    /// `(kv_dim, hidden)`
    pub k: Matrix<S>,
    /// `(kv_dim, hidden)`
    pub v: Matrix<S>,
    /// `(hidden, hidden)`
    pub o: Matrix<S>,
}

impl<S: Scalar> AttnWeights<S> {
    pub fn check(&self, arch: &ArchDescriptor) -> Result<()> {
        let (h, kv) = (arch.hidden_size, arch.kv_dim());
        let ok = |m: &Matrix<S>, r, c| m.rows() == r && m.cols() == c;
        if !(ok(&self.q, h, h) && ok(&self.k, kv, h) && ok(&self.v, kv, h) && ok(&self.o, h, h)) {
            return Err(Error::Shape("attention projection shapes disagree with arch".into()));
        }
        if !arch.head_dim().is_multiple_of(2) {
            return Err(Error::InvalidArch(format!(
                "head_dim {} must be even for rotary embeddings",
                arch.head_dim()
            )));
        }
        Ok(())
    }
}

/// Activations kept from an attention forward pass.
#[derive(Debug, Clone)]
pub struct AttnCache<S> {
    pub q: Vec<Vec<S>>,
    pub k: Vec<Vec<S>>,
    pub v: Vec<Vec<S>>,
    /// `probs[t][head]` has `t + 1` entries.
    pub probs: Vec<Vec<Vec<S>>>,
    pub ctx: Vec<Vec<S>>,
}

#[derive(Debug, Clone, Copy)]
pub struct AttnShape {
    pub num_heads: usize,
    pub num_kv_heads: usize,
    pub head_dim: usize,
}

impl AttnShape {
    pub fn of(arch: &ArchDescriptor) -> Self {
        AttnShape {
            num_heads: arch.num_heads,
            num_kv_heads: arch.num_kv_heads,
            head_dim: arch.head_dim(),
        }
    }

    fn group(&self) -> usize {
        self.num_heads / self.num_kv_heads
    }
}

/// Causal attention over a whole sequence of (already normalised) inputs.
pub fn attention_forward<S: Scalar>(
    w: &AttnWeights<S>,
    xs: &[Vec<S>],
    shape: AttnShape,
    rope: &Rope<S>,
) -> (Vec<Vec<S>>, AttnCache<S>) {
    let hd = shape.head_dim;
    let scale = S::one() / S::from_usize(hd).unwrap().sqrt();
    let mut q = Vec::with_capacity(xs.len());
    let mut k = Vec::with_capacity(xs.len());
    let mut v = Vec::with_capacity(xs.len());
    for (t, x) in xs.iter().enumerate() {
        let mut qt = w.q.matvec(x);
        let mut kt = w.k.matvec(x);
        rope.apply(&mut qt, t);
        rope.apply(&mut kt, t);
        q.push(qt);
        k.push(kt);
        v.push(w.v.matvec(x));
    }
    let mut probs = Vec::with_capacity(xs.len());
    let mut ctx = Vec::with_capacity(xs.len());
    let mut out = Vec::with_capacity(xs.len());
    for t in 0..xs.len() {
        let mut ct = vec![S::zero(); shape.num_heads * hd];
        let mut pt = Vec::with_capacity(shape.num_heads);
        for h in 0..shape.num_heads {
            let g = h / shape.group();
            let qh = &q[t][h * hd..(h + 1) * hd];
            let scores: Vec<S> = (0..=t)
                .map(|j| dot(qh, &k[j][g * hd..(g + 1) * hd]) * scale)
                .collect();
            let p = crate::runtime::gate::softmax(&scores);
            let ch = &mut ct[h * hd..(h + 1) * hd];
            for (j, &pj) in p.iter().enumerate() {
                axpy(ch, pj, &v[j][g * hd..(g + 1) * hd]);
            }
            pt.push(p);
        }
        out.push(w.o.matvec(&ct));
        ctx.push(ct);
        probs.push(pt);
    }
    (out, AttnCache { q, k, v, probs, ctx })
}

/// Gradient of the attention output with respect to its inputs.
pub fn attention_backward<S: Scalar>(
    w: &AttnWeights<S>,
    cache: &AttnCache<S>,
    d_out: &[Vec<S>],
    shape: AttnShape,
    rope: &Rope<S>,
) -> Vec<Vec<S>> {
    let n = d_out.len();
    let hd = shape.head_dim;
    let scale = S::one() / S::from_usize(hd).unwrap().sqrt();
    let kvd = shape.num_kv_heads * hd;
    let mut dq = vec![vec![S::zero(); shape.num_heads * hd]; n];
    let mut dk = vec![vec![S::zero(); kvd]; n];
    let mut dv = vec![vec![S::zero(); kvd]; n];
    for t in 0..n {
        let dctx = w.o.matvec_t(&d_out[t]);
        for h in 0..shape.num_heads {
            let g = h / shape.group();
            let dch = &dctx[h * hd..(h + 1) * hd];
            let p = &cache.probs[t][h];
            let dp: Vec<S> = (0..=t)
                .map(|j| dot(dch, &cache.v[j][g * hd..(g + 1) * hd]))
                .collect();
            for (j, &pj) in p.iter().enumerate() {
                axpy(&mut dv[j][g * hd..(g + 1) * hd], pj, dch);
            }
            let pdp = dot(p, &dp);
            for j in 0..=t {
                let ds = p[j] * (dp[j] - pdp) * scale;
                if ds == S::zero() {
                    continue;
                }
                let kj = &cache.k[j][g * hd..(g + 1) * hd];
                axpy(&mut dq[t][h * hd..(h + 1) * hd], ds, kj);
                let qh = &cache.q[t][h * hd..(h + 1) * hd];
                axpy(&mut dk[j][g * hd..(g + 1) * hd], ds, qh);
            }
        }
    }
    (0..n)
        .map(|t| {
            rope.apply_inverse(&mut dq[t], t);
            rope.apply_inverse(&mut dk[t], t);
            let mut dx = w.q.matvec_t(&dq[t]);
            w.k.matvec_t_acc(&dk[t], &mut dx);
            w.v.matvec_t_acc(&dv[t], &mut dx);
            dx
        })
        .collect()
}
