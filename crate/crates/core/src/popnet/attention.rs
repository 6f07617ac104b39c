//! Scaled dot-product attention over grouped token blocks, and the
//! spine-chain augmentation of joint attention maps.

use ndarray::Array2;

use crate::error::{Error, Result};

/// Additive stand-in for `-inf` in masks.
pub const MASK_NEG: f64 = -1e9;

/// Parent-to-children enhancement order along the spine, by SMPL joint id.
pub const SPINE_LEVELS: [(usize, &[usize]); 7] = [
    (0, &[3]),
    (3, &[6]),
    (6, &[9]),
    (9, &[12, 13, 14]),
    (12, &[15]),
    (13, &[16]),
    (14, &[17]),
];

/// Smallest joint map the augmentation can address.
pub const MIN_AUGMENT_SIZE: usize = 18;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Augment {
    /// Halve each enhanced entry after adding.
    pub halve: bool,
    /// Token index of SMPL joint 0 inside the attended sequence.
    pub token_offset: usize,
}

/// Layout of one fused attention call.
///
/// Queries are `groups * q_len` rows, keys and values `groups * k_len` rows;
/// attention never crosses a group boundary. Columns are split evenly across
/// heads and the per-head outputs are concatenated in head order.
#[derive(Debug, Clone)]
pub struct AttentionSpec {
    pub heads: usize,
    pub groups: usize,
    pub q_len: usize,
    pub k_len: usize,
    /// Additive `q_len x k_len` mask shared by all groups and heads.
    pub mask: Option<Array2<f64>>,
    pub augment: Option<Augment>,
}

impl AttentionSpec {
    pub fn new(heads: usize, groups: usize, q_len: usize, k_len: usize) -> Self {
        Self {
            heads,
            groups,
            q_len,
            k_len,
            mask: None,
            augment: None,
        }
    }

    pub fn with_mask(mut self, mask: Option<Array2<f64>>) -> Self {
        self.mask = mask;
        self
    }

    pub fn with_augment(mut self, augment: Option<Augment>) -> Self {
        self.augment = augment;
        self
    }

    fn validate(&self, q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>) -> Result<()> {
        let c = q.ncols();
        if self.heads == 0 || c % self.heads != 0 {
            return Err(Error::shape("attention heads", format!("divisor of {c}"), self.heads));
        }
        if k.ncols() != c || v.ncols() != c {
            return Err(Error::shape("attention width", c, format!("{}/{}", k.ncols(), v.ncols())));
        }
        if q.nrows() != self.groups * self.q_len {
            return Err(Error::shape("attention queries", self.groups * self.q_len, q.nrows()));
        }
        if k.nrows() != self.groups * self.k_len || v.nrows() != k.nrows() {
            return Err(Error::shape(
                "attention keys/values",
                self.groups * self.k_len,
                format!("{}/{}", k.nrows(), v.nrows()),
            ));
        }
        if let Some(m) = &self.mask {
            if m.dim() != (self.q_len, self.k_len) {
                return Err(Error::shape(
                    "attention mask",
                    format!("{}x{}", self.q_len, self.k_len),
                    format!("{}x{}", m.nrows(), m.ncols()),
                ));
            }
        }
        if let Some(a) = &self.augment {
            let need = a.token_offset + MIN_AUGMENT_SIZE;
            if self.q_len < need || self.k_len < need {
                return Err(Error::shape(
                    "augmented attention map",
                    format!(">= {need} tokens"),
                    format!("{}x{}", self.q_len, self.k_len),
                ));
            }
        }
        Ok(())
    }
}

/// Softmax probabilities kept for the backward pass, one `q_len x k_len`
/// block per (group, head).
#[derive(Debug, Clone)]
pub struct AttentionCache {
    probs: Vec<f64>,
    /// Probabilities after augmentation (and renormalization when not halving).
    mixed: Vec<f64>,
    /// Row sums of the augmented map, present only when renormalizing.
    row_sums: Vec<f64>,
}

impl AttentionCache {
    /// Post-augmentation map for one group and head.
    pub fn map(&self, spec: &AttentionSpec, group: usize, head: usize) -> Array2<f64> {
        let block = spec.q_len * spec.k_len;
        let off = (group * spec.heads + head) * block;
        Array2::from_shape_vec((spec.q_len, spec.k_len), self.mixed[off..off + block].to_vec())
            .expect("block size")
    }
}

fn renormalizes(spec: &AttentionSpec) -> bool {
    matches!(spec.augment, Some(Augment { halve: false, .. }))
}

/// Applies the enhancement cascade to a row-major block with row stride
/// `stride`; joint `j` lives at token `j + offset`.
pub fn space_augment_in_place(map: &mut [f64], stride: usize, offset: usize, halve: bool) {
    let h = if halve { 0.5 } else { 1.0 };
    let at = |i: usize, j: usize| (i + offset) * stride + j + offset;
    for (src, targets) in SPINE_LEVELS {
        for &tgt in targets {
            map[at(0, tgt)] = (map[at(0, tgt)] + map[at(0, src)]) * h;
            map[at(tgt, 0)] = (map[at(tgt, 0)] + map[at(src, 0)]) * h;
        }
    }
}

/// Adjoint of [`space_augment_in_place`] (the map is linear).
pub fn space_augment_backward_in_place(grad: &mut [f64], stride: usize, offset: usize, halve: bool) {
    let h = if halve { 0.5 } else { 1.0 };
    let at = |i: usize, j: usize| (i + offset) * stride + j + offset;
    for (src, targets) in SPINE_LEVELS.iter().rev() {
        for &tgt in targets.iter().rev() {
            let g = grad[at(tgt, 0)];
            grad[at(*src, 0)] += h * g;
            grad[at(tgt, 0)] = h * g;
            let g = grad[at(0, tgt)];
            grad[at(0, *src)] += h * g;
            grad[at(0, tgt)] = h * g;
        }
    }
}

/// Space augmentation of a joint attention map indexed by SMPL joint id.
pub fn space_augment(map: &Array2<f64>, halve: bool) -> Result<Array2<f64>> {
    if map.nrows() < MIN_AUGMENT_SIZE || map.ncols() < MIN_AUGMENT_SIZE {
        return Err(Error::shape(
            "space augmentation map",
            format!(">= {MIN_AUGMENT_SIZE}x{MIN_AUGMENT_SIZE}"),
            format!("{}x{}", map.nrows(), map.ncols()),
        ));
    }
    let mut out = map.as_standard_layout().to_owned();
    let stride = out.ncols();
    space_augment_in_place(out.as_slice_mut().expect("standard layout"), stride, 0, halve);
    Ok(out)
}

/// Forward pass. Inputs must be in standard layout.
pub fn attention_forward(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    spec: &AttentionSpec,
) -> Result<(Array2<f64>, AttentionCache)> {
    spec.validate(q, k, v)?;
    let (qs, ks, vs) = (q.as_standard_layout(), k.as_standard_layout(), v.as_standard_layout());
    let (qs, ks, vs) = (qs.as_slice().unwrap(), ks.as_slice().unwrap(), vs.as_slice().unwrap());
    let c = q.ncols();
    let d = c / spec.heads;
    let scale = 1.0 / (d as f64).sqrt();
    let (lq, lk) = (spec.q_len, spec.k_len);
    let block = lq * lk;
    let nblocks = spec.groups * spec.heads;
    let mut probs = vec![0.0; nblocks * block];
    let mut mixed = vec![0.0; nblocks * block];
    let renorm = renormalizes(spec);
    let mut row_sums = if renorm { vec![0.0; nblocks * lq] } else { Vec::new() };
    let mut out = vec![0.0; q.nrows() * c];
    let mask = spec.mask.as_ref().map(|m| m.as_standard_layout().to_owned());

    for g in 0..spec.groups {
        for h in 0..spec.heads {
            let b = g * spec.heads + h;
            let p = &mut probs[b * block..(b + 1) * block];
            for i in 0..lq {
                let qrow = &qs[(g * lq + i) * c + h * d..(g * lq + i) * c + (h + 1) * d];
                let row = &mut p[i * lk..(i + 1) * lk];
                let mut max = f64::NEG_INFINITY;
                for (j, s) in row.iter_mut().enumerate() {
                    let krow = &ks[(g * lk + j) * c + h * d..(g * lk + j) * c + (h + 1) * d];
                    let mut dot: f64 = qrow.iter().zip(krow).map(|(a, b)| a * b).sum();
                    if let Some(m) = &mask {
                        dot += m[[i, j]];
                    }
                    *s = dot * scale;
                    max = max.max(*s);
                }
                let mut sum = 0.0;
                for s in row.iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                for s in row.iter_mut() {
                    *s /= sum;
                }
            }
            let m = &mut mixed[b * block..(b + 1) * block];
            m.copy_from_slice(p);
            if let Some(a) = spec.augment {
                space_augment_in_place(m, lk, a.token_offset, a.halve);
                if renorm {
                    for i in 0..lq {
                        let row = &mut m[i * lk..(i + 1) * lk];
                        let s: f64 = row.iter().sum();
                        row.iter_mut().for_each(|x| *x /= s);
                        row_sums[b * lq + i] = s;
                    }
                }
            }
            for i in 0..lq {
                let orow = &mut out[(g * lq + i) * c + h * d..(g * lq + i) * c + (h + 1) * d];
                for j in 0..lk {
                    let w = m[i * lk + j];
                    if w == 0.0 {
                        continue;
                    }
                    let vrow = &vs[(g * lk + j) * c + h * d..(g * lk + j) * c + (h + 1) * d];
                    for (o, x) in orow.iter_mut().zip(vrow) {
                        *o += w * x;
                    }
                }
            }
        }
    }
    let out = Array2::from_shape_vec((q.nrows(), c), out).expect("output size");
    Ok((
        out,
        AttentionCache {
            probs,
            mixed,
            row_sums,
        },
    ))
}

/// Gradients with respect to `q`, `k`, `v` given the output gradient.
pub fn attention_backward(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    spec: &AttentionSpec,
    cache: &AttentionCache,
    grad_out: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let (qs, ks, vs) = (q.as_standard_layout(), k.as_standard_layout(), v.as_standard_layout());
    let (qs, ks, vs) = (qs.as_slice().unwrap(), ks.as_slice().unwrap(), vs.as_slice().unwrap());
    let go = grad_out.as_standard_layout();
    let go = go.as_slice().unwrap();
    let c = q.ncols();
    let d = c / spec.heads;
    let scale = 1.0 / (d as f64).sqrt();
    let (lq, lk) = (spec.q_len, spec.k_len);
    let block = lq * lk;
    let renorm = renormalizes(spec);
    let mut gq = vec![0.0; qs.len()];
    let mut gk = vec![0.0; ks.len()];
    let mut gv = vec![0.0; vs.len()];
    let mut gm = vec![0.0; block];
    for g in 0..spec.groups {
        for h in 0..spec.heads {
            let b = g * spec.heads + h;
            let p = &cache.probs[b * block..(b + 1) * block];
            let m = &cache.mixed[b * block..(b + 1) * block];
            for i in 0..lq {
                let gorow = &go[(g * lq + i) * c + h * d..(g * lq + i) * c + (h + 1) * d];
                for j in 0..lk {
                    let vrow = (g * lk + j) * c + h * d;
                    let w = m[i * lk + j];
                    let mut acc = 0.0;
                    for x in 0..d {
                        gv[vrow + x] += w * gorow[x];
                        acc += gorow[x] * vs[vrow + x];
                    }
                    gm[i * lk + j] = acc;
                }
            }
            if let Some(a) = spec.augment {
                if renorm {
                    for i in 0..lq {
                        let row = &mut gm[i * lk..(i + 1) * lk];
                        let mrow = &m[i * lk..(i + 1) * lk];
                        let dotp: f64 = row.iter().zip(mrow).map(|(a, b)| a * b).sum();
                        let s = cache.row_sums[b * lq + i];
                        row.iter_mut().for_each(|x| *x = (*x - dotp) / s);
                    }
                }
                space_augment_backward_in_place(&mut gm, lk, a.token_offset, a.halve);
            }
            for i in 0..lq {
                let prow = &p[i * lk..(i + 1) * lk];
                let grow = &gm[i * lk..(i + 1) * lk];
                let dotp: f64 = prow.iter().zip(grow).map(|(a, b)| a * b).sum();
                let qoff = (g * lq + i) * c + h * d;
                for j in 0..lk {
                    let ds = prow[j] * (grow[j] - dotp) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let koff = (g * lk + j) * c + h * d;
                    for x in 0..d {
                        gq[qoff + x] += ds * ks[koff + x];
                        gk[koff + x] += ds * qs[qoff + x];
                    }
                }
            }
        }
    }
    (
        Array2::from_shape_vec(q.dim(), gq).unwrap(),
        Array2::from_shape_vec(k.dim(), gk).unwrap(),
        Array2::from_shape_vec(v.dim(), gv).unwrap(),
    )
}

/// Multi-head masked attention with explicit projections:
/// `softmax((Q K^T + M) / sqrt(C)) V` per head, heads concatenated, then `W_o`.
/// `q_in`/`kv_in` are token matrices; all weights are `C x C`.
#[allow(clippy::too_many_arguments)]
pub fn masked_attention(
    q_in: &Array2<f64>,
    kv_in: &Array2<f64>,
    w_q: &Array2<f64>,
    w_k: &Array2<f64>,
    w_v: &Array2<f64>,
    w_o: &Array2<f64>,
    heads: usize,
    mask: Option<&Array2<f64>>,
) -> Result<Array2<f64>> {
    let spec = AttentionSpec::new(heads, 1, q_in.nrows(), kv_in.nrows()).with_mask(mask.cloned());
    let (ctx, _) = attention_forward(&q_in.dot(w_q), &kv_in.dot(w_k), &kv_in.dot(w_v), &spec)?;
    Ok(ctx.dot(w_o))
}
