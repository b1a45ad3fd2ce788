//! Causal self-attention network with hand-written backpropagation.
//!
//! Per block: `q = LN₁(x)`, attention with queries from `q` and keys/values
//! from `x`, residual `x₁ = q + attn`, then `f = LN₂(x₁)` and a two-layer
//! pointwise ReLU feed-forward with residual `x₂ = f + FFN(f)`. A final
//! layer norm produces the hidden states that are dotted with the (shared)
//! item embeddings to score next items.
//!
//! Sequences are processed without padding rows: a sequence of `t` items
//! occupies the last `t` positional slots of the `max_len` window, exactly as
//! a left-padded window would, and padding keys never receive attention.

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive};
use rand::Rng as _;

use super::ops::{
    acc_at_b, acc_colsum, add_into, affine, dot, layer_norm, layer_norm_backward, matmul_bt, LnCache,
};
use crate::rng::Rng;

pub trait Real: Float + FromPrimitive + Debug + Send + Sync + 'static {}
impl Real for f32 {}
impl Real for f64 {}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    /// Vocabulary size, excluding the padding row.
    pub n_items: usize,
    pub max_len: usize,
    pub d: usize,
    pub heads: usize,
    pub blocks: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

#[derive(Clone, Copy, Debug)]
struct BlockIx {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

const ITEM_EMB: usize = 0;
const POS_EMB: usize = 1;

fn block_ix(b: usize) -> BlockIx {
    let base = 2 + b * 14;
    BlockIx {
        ln1_g: base,
        ln1_b: base + 1,
        wq: base + 2,
        bq: base + 3,
        wk: base + 4,
        bk: base + 5,
        wv: base + 6,
        bv: base + 7,
        ln2_g: base + 8,
        ln2_b: base + 9,
        w1: base + 10,
        b1: base + 11,
        w2: base + 12,
        b2: base + 13,
    }
}

/// Tensor names and shapes in storage order.
pub fn tensor_specs(dims: &Dims) -> Vec<(String, Vec<usize>)> {
    let d = dims.d;
    let mut specs = vec![
        ("item_emb".to_string(), vec![dims.n_items + 1, d]),
        ("pos_emb".to_string(), vec![dims.max_len, d]),
    ];
    for b in 0..dims.blocks {
        for (name, shape) in [
            ("ln_attn.gamma", vec![d]),
            ("ln_attn.beta", vec![d]),
            ("attn.w_query", vec![d, d]),
            ("attn.b_query", vec![d]),
            ("attn.w_key", vec![d, d]),
            ("attn.b_key", vec![d]),
            ("attn.w_value", vec![d, d]),
            ("attn.b_value", vec![d]),
            ("ln_ffn.gamma", vec![d]),
            ("ln_ffn.beta", vec![d]),
            ("ffn.w1", vec![d, d]),
            ("ffn.b1", vec![d]),
            ("ffn.w2", vec![d, d]),
            ("ffn.b2", vec![d]),
        ] {
            specs.push((format!("block{b}.{name}"), shape));
        }
    }
    specs.push(("ln_final.gamma".to_string(), vec![d]));
    specs.push(("ln_final.beta".to_string(), vec![d]));
    specs
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<F> {
    pub dims: Dims,
    pub tensors: Vec<Tensor<F>>,
}

struct BlockCache<F> {
    x: Vec<F>,
    ln1: LnCache<F>,
    q_in: Vec<F>,
    q: Vec<F>,
    k: Vec<F>,
    v: Vec<F>,
    probs: Vec<F>,
    mask_attn: Option<Vec<F>>,
    ln2: LnCache<F>,
    f_in: Vec<F>,
    h_pre: Vec<F>,
    mask_hidden: Option<Vec<F>>,
    h: Vec<F>,
    mask_ffn: Option<Vec<F>>,
}

/// Forward activations of one sequence, kept for backpropagation.
pub struct Trace<F> {
    items: Vec<u32>,
    slot0: usize,
    mask_emb: Option<Vec<F>>,
    blocks: Vec<BlockCache<F>>,
    ln_final: LnCache<F>,
    /// Final hidden states, `t × d`.
    pub out: Vec<F>,
}

impl<F: Real> Trace<F> {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

fn dropout_mask<F: Real>(len: usize, rate: f64, rng: &mut Rng) -> Vec<F> {
    let keep = F::from_f64(1.0 / (1.0 - rate)).unwrap();
    (0..len)
        .map(|_| if rng.random::<f64>() < rate { F::zero() } else { keep })
        .collect()
}

fn apply_mask<F: Real>(x: &mut [F], mask: &Option<Vec<F>>) {
    if let Some(m) = mask {
        for (v, &k) in x.iter_mut().zip(m) {
            *v = *v * k;
        }
    }
}

/// Dropout state for a training forward pass.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut Rng,
}

impl<'a> Dropout<'a> {
    fn mask<F: Real>(&mut self, len: usize) -> Option<Vec<F>> {
        (self.rate > 0.0).then(|| dropout_mask(len, self.rate, self.rng))
    }
}

impl<F: Real> Network<F> {
    /// Uniform(−1/√d, 1/√d) weights and embeddings, unit layer-norm gains,
    /// zero biases and a zero padding row.
    pub fn init(dims: Dims, rng: &mut Rng) -> Self {
        let scale = 1.0 / (dims.d as f64).sqrt();
        let tensors = tensor_specs(&dims)
            .into_iter()
            .map(|(name, shape)| {
                let len: usize = shape.iter().product();
                let data: Vec<F> = if name.ends_with("gamma") {
                    vec![F::one(); len]
                } else if name.ends_with("beta") || name.contains(".b_") || name.ends_with(".b1") || name.ends_with(".b2")
                {
                    vec![F::zero(); len]
                } else {
                    (0..len)
                        .map(|_| F::from_f64(rng.random_range(-scale..scale)).unwrap())
                        .collect()
                };
                Tensor { name, shape, data }
            })
            .collect();
        let mut net = Network { dims, tensors };
        net.tensors[ITEM_EMB].data[..dims.d].iter_mut().for_each(|v| *v = F::zero());
        net
    }

    pub fn from_tensors(dims: Dims, tensors: Vec<Tensor<F>>) -> Result<Self, String> {
        let specs = tensor_specs(&dims);
        if specs.len() != tensors.len() {
            return Err(format!("expected {} tensors, found {}", specs.len(), tensors.len()));
        }
        for ((name, shape), t) in specs.iter().zip(&tensors) {
            if name != &t.name || shape != &t.shape || shape.iter().product::<usize>() != t.data.len() {
                return Err(format!("tensor `{}` does not match expected `{name}` {shape:?}", t.name));
            }
        }
        Ok(Network { dims, tensors })
    }

    pub fn zero_grads(&self) -> Vec<Vec<F>> {
        self.tensors.iter().map(|t| vec![F::zero(); t.data.len()]).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    #[inline]
    fn p(&self, idx: usize) -> &[F] {
        &self.tensors[idx].data
    }

    pub fn item_embedding(&self, index: u32) -> &[F] {
        let d = self.dims.d;
        &self.p(ITEM_EMB)[index as usize * d..(index as usize + 1) * d]
    }

    /// Runs the network over vocabulary indices (no padding, most recent
    /// `max_len` only). `dropout` enables training-mode masks.
    pub fn forward(&self, items: &[u32], mut dropout: Option<Dropout<'_>>) -> Trace<F> {
        let dims = self.dims;
        let d = dims.d;
        let items: Vec<u32> = items[items.len().saturating_sub(dims.max_len)..].to_vec();
        let t = items.len();
        let slot0 = dims.max_len - t;
        let sqrt_d = F::from_usize(d).unwrap().sqrt();

        let mut x = vec![F::zero(); t * d];
        let emb = self.p(ITEM_EMB);
        let pos = self.p(POS_EMB);
        for (r, &it) in items.iter().enumerate() {
            let e = &emb[it as usize * d..(it as usize + 1) * d];
            let pr = &pos[(slot0 + r) * d..(slot0 + r + 1) * d];
            for j in 0..d {
                x[r * d + j] = e[j] * sqrt_d + pr[j];
            }
        }
        let mask_emb = dropout.as_mut().and_then(|dr| dr.mask(t * d));
        apply_mask(&mut x, &mask_emb);

        let mut blocks = Vec::with_capacity(dims.blocks);
        for b in 0..dims.blocks {
            let ix = block_ix(b);
            let (q_in, ln1) = layer_norm(&x, self.p(ix.ln1_g), self.p(ix.ln1_b), d);
            let q = affine(&q_in, self.p(ix.wq), self.p(ix.bq), t, d, d);
            let k = affine(&x, self.p(ix.wk), self.p(ix.bk), t, d, d);
            let v = affine(&x, self.p(ix.wv), self.p(ix.bv), t, d, d);
            let (mut attn, probs) = self.attention(&q, &k, &v, t);
            let mask_attn = dropout.as_mut().and_then(|dr| dr.mask(t * d));
            apply_mask(&mut attn, &mask_attn);
            let mut x1 = attn;
            add_into(&mut x1, &q_in);

            let (f_in, ln2) = layer_norm(&x1, self.p(ix.ln2_g), self.p(ix.ln2_b), d);
            let h_pre = affine(&f_in, self.p(ix.w1), self.p(ix.b1), t, d, d);
            let mut h: Vec<F> = h_pre.iter().map(|&v| v.max(F::zero())).collect();
            let mask_hidden = dropout.as_mut().and_then(|dr| dr.mask(t * d));
            apply_mask(&mut h, &mask_hidden);
            let mut ffn = affine(&h, self.p(ix.w2), self.p(ix.b2), t, d, d);
            let mask_ffn = dropout.as_mut().and_then(|dr| dr.mask(t * d));
            apply_mask(&mut ffn, &mask_ffn);
            add_into(&mut ffn, &f_in);

            blocks.push(BlockCache {
                x: std::mem::replace(&mut x, ffn),
                ln1,
                q_in,
                q,
                k,
                v,
                probs,
                mask_attn,
                ln2,
                f_in,
                h_pre,
                mask_hidden,
                h,
                mask_ffn,
            });
        }
        let (out, ln_final) = layer_norm(&x, self.p(self.tensors.len() - 2), self.p(self.tensors.len() - 1), d);
        Trace {
            items,
            slot0,
            mask_emb,
            blocks,
            ln_final,
            out,
        }
    }

    /// Causal multi-head scaled dot-product attention. Returns the head
    /// outputs (`t × d`) and the softmax weights (`heads × t × t`).
    fn attention(&self, q: &[F], k: &[F], v: &[F], t: usize) -> (Vec<F>, Vec<F>) {
        let d = self.dims.d;
        let heads = self.dims.heads;
        let dh = d / heads;
        let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
        let mut out = vec![F::zero(); t * d];
        let mut probs = vec![F::zero(); heads * t * t];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..t {
                let qi = &q[i * d + off..i * d + off + dh];
                let row = &mut probs[(h * t + i) * t..(h * t + i + 1) * t];
                let mut max = F::neg_infinity();
                for j in 0..=i {
                    let s = dot(qi, &k[j * d + off..j * d + off + dh]) * scale;
                    row[j] = s;
                    max = max.max(s);
                }
                let mut sum = F::zero();
                for r in row.iter_mut().take(i + 1) {
                    *r = (*r - max).exp();
                    sum = sum + *r;
                }
                let o = &mut out[i * d + off..i * d + off + dh];
                for j in 0..=i {
                    row[j] = row[j] / sum;
                    let w = row[j];
                    let vj = &v[j * d + off..j * d + off + dh];
                    for (oc, &vc) in o.iter_mut().zip(vj) {
                        *oc = *oc + w * vc;
                    }
                }
            }
        }
        (out, probs)
    }

    /// Backpropagates `d_out` (gradient w.r.t. the final hidden states)
    /// through a trace, accumulating into `grads`.
    pub fn backward(&self, trace: &Trace<F>, d_out: &[F], grads: &mut [Vec<F>]) {
        let d = self.dims.d;
        let t = trace.items.len();
        let n_t = self.tensors.len();
        let (gf, rest) = grads.split_at_mut(n_t - 1);
        let mut dx = layer_norm_backward(
            d_out,
            &trace.ln_final,
            self.p(n_t - 2),
            &mut gf[n_t - 2],
            &mut rest[0],
            d,
        );

        for b in (0..self.dims.blocks).rev() {
            let ix = block_ix(b);
            let c = &trace.blocks[b];

            // x₂ = f_in + drop(FFN(f_in))
            let mut d_f_in = dx.clone();
            let mut d_ffn = dx;
            apply_mask(&mut d_ffn, &c.mask_ffn);
            acc_at_b(&mut grads[ix.w2], &c.h, &d_ffn, t, d, d);
            acc_colsum(&mut grads[ix.b2], &d_ffn, d);
            let mut d_h = matmul_bt(&d_ffn, self.p(ix.w2), t, d, d);
            apply_mask(&mut d_h, &c.mask_hidden);
            for (g, &pre) in d_h.iter_mut().zip(&c.h_pre) {
                if pre <= F::zero() {
                    *g = F::zero();
                }
            }
            acc_at_b(&mut grads[ix.w1], &c.f_in, &d_h, t, d, d);
            acc_colsum(&mut grads[ix.b1], &d_h, d);
            add_into(&mut d_f_in, &matmul_bt(&d_h, self.p(ix.w1), t, d, d));
            let (g_lo, g_hi) = grads.split_at_mut(ix.ln2_b);
            let d_x1 = layer_norm_backward(&d_f_in, &c.ln2, self.p(ix.ln2_g), &mut g_lo[ix.ln2_g], &mut g_hi[0], d);

            // x₁ = q_in + drop(attn(q, k, v))
            let mut d_q_in = d_x1.clone();
            let mut d_attn = d_x1;
            apply_mask(&mut d_attn, &c.mask_attn);
            let (d_q, d_k, d_v) = self.attention_backward(c, &d_attn, t);

            acc_at_b(&mut grads[ix.wq], &c.q_in, &d_q, t, d, d);
            acc_colsum(&mut grads[ix.bq], &d_q, d);
            add_into(&mut d_q_in, &matmul_bt(&d_q, self.p(ix.wq), t, d, d));

            let mut d_x = matmul_bt(&d_k, self.p(ix.wk), t, d, d);
            acc_at_b(&mut grads[ix.wk], &c.x, &d_k, t, d, d);
            acc_colsum(&mut grads[ix.bk], &d_k, d);
            add_into(&mut d_x, &matmul_bt(&d_v, self.p(ix.wv), t, d, d));
            acc_at_b(&mut grads[ix.wv], &c.x, &d_v, t, d, d);
            acc_colsum(&mut grads[ix.bv], &d_v, d);

            let (g_lo, g_hi) = grads.split_at_mut(ix.ln1_b);
            let d_ln1 = layer_norm_backward(&d_q_in, &c.ln1, self.p(ix.ln1_g), &mut g_lo[ix.ln1_g], &mut g_hi[0], d);
            add_into(&mut d_x, &d_ln1);
            dx = d_x;
        }

        apply_mask(&mut dx, &trace.mask_emb);
        let sqrt_d = F::from_usize(d).unwrap().sqrt();
        for (r, &it) in trace.items.iter().enumerate() {
            let row = &dx[r * d..(r + 1) * d];
            let ge = &mut grads[ITEM_EMB][it as usize * d..(it as usize + 1) * d];
            for j in 0..d {
                ge[j] = ge[j] + row[j] * sqrt_d;
            }
            let slot = trace.slot0 + r;
            let gp = &mut grads[POS_EMB][slot * d..(slot + 1) * d];
            add_into(gp, row);
        }
    }

    fn attention_backward(&self, c: &BlockCache<F>, d_out: &[F], t: usize) -> (Vec<F>, Vec<F>, Vec<F>) {
        let d = self.dims.d;
        let heads = self.dims.heads;
        let dh = d / heads;
        let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
        let mut d_q = vec![F::zero(); t * d];
        let mut d_k = vec![F::zero(); t * d];
        let mut d_v = vec![F::zero(); t * d];
        let mut d_p = vec![F::zero(); t];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..t {
                let p = &c.probs[(h * t + i) * t..(h * t + i + 1) * t];
                let go = &d_out[i * d + off..i * d + off + dh];
                let mut weighted = F::zero();
                for j in 0..=i {
                    let vj = &c.v[j * d + off..j * d + off + dh];
                    d_p[j] = dot(go, vj);
                    weighted = weighted + d_p[j] * p[j];
                    let gv = &mut d_v[j * d + off..j * d + off + dh];
                    for (g, &o) in gv.iter_mut().zip(go) {
                        *g = *g + p[j] * o;
                    }
                }
                for j in 0..=i {
                    let ds = p[j] * (d_p[j] - weighted) * scale;
                    if ds == F::zero() {
                        continue;
                    }
                    for m in 0..dh {
                        d_q[i * d + off + m] = d_q[i * d + off + m] + ds * c.k[j * d + off + m];
                        d_k[j * d + off + m] = d_k[j * d + off + m] + ds * c.q[i * d + off + m];
                    }
                }
            }
        }
        (d_q, d_k, d_v)
    }

    /// Binary cross-entropy over positive and sampled-negative logits at
    /// every position of `trace`. Returns the summed loss and, when `grads`
    /// is given, backpropagates it.
    pub fn bce(
        &self,
        trace: &Trace<F>,
        positives: &[u32],
        negatives: &[Option<u32>],
        grads: Option<&mut [Vec<F>]>,
    ) -> F {
        let d = self.dims.d;
        let t = trace.items.len();
        debug_assert_eq!(positives.len(), t);
        let mut loss = F::zero();
        let mut d_out = vec![F::zero(); t * d];
        let want_grad = grads.is_some();
        let mut emb_updates: Vec<(u32, usize, F)> = Vec::new();
        for r in 0..t {
            let h = &trace.out[r * d..(r + 1) * d];
            let pos = positives[r];
            let lp = dot(h, self.item_embedding(pos));
            loss = loss + softplus(-lp);
            let gp = sigmoid(lp) - F::one();
            let mut terms = vec![(pos, gp)];
            if let Some(neg) = negatives[r] {
                let ln = dot(h, self.item_embedding(neg));
                loss = loss + softplus(ln);
                terms.push((neg, sigmoid(ln)));
            }
            if want_grad {
                for (idx, g) in terms {
                    let e = self.item_embedding(idx);
                    for j in 0..d {
                        d_out[r * d + j] = d_out[r * d + j] + g * e[j];
                    }
                    emb_updates.push((idx, r, g));
                }
            }
        }
        if let Some(grads) = grads {
            for (idx, r, g) in emb_updates {
                let h = &trace.out[r * d..(r + 1) * d];
                let ge = &mut grads[ITEM_EMB][idx as usize * d..(idx as usize + 1) * d];
                for j in 0..d {
                    ge[j] = ge[j] + g * h[j];
                }
            }
            self.backward(trace, &d_out, grads);
        }
        loss
    }
}

#[inline]
pub fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// `ln(1 + eˣ)` without overflow.
#[inline]
pub fn softplus<F: Real>(x: F) -> F {
    if x > F::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}
