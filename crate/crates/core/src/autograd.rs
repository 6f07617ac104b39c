//! Reverse-mode differentiation over 2-D `f64` matrices.
//!
//! Every operation appends a node holding its value; [`Tape::backward`] walks
//! the nodes in reverse and accumulates adjoints. Attention is a single fused
//! node (see [`crate::popnet::attention`]) so its softmax and augmentation
//! adjoints are written by hand.

use ndarray::{s, Array2, Axis};

use crate::popnet::attention::{attention_backward, attention_forward, AttentionCache, AttentionSpec};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Scale(usize, f64),
    Sigmoid(usize),
    Silu(usize),
    LayerNorm { x: usize, inv_std: Vec<f64> },
    Reshape(usize),
    SliceCols { x: usize, start: usize },
    ConcatCols(Vec<usize>),
    ShiftRows { x: usize, shift: isize },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        spec: Box<AttentionSpec>,
        cache: Box<AttentionCache>,
    },
    Mean(usize),
    Injected { x: usize, grad: Array2<f64> },
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient of the output with respect to `v`, or `None` if `v` does not
    /// influence it.
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }
}

fn accumulate(slot: &mut Option<Array2<f64>>, g: Array2<f64>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

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

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a.0, b.0))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a.0, b.0))
    }

    /// `a + row`, with `row` a `1 x C` matrix broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) + self.value(row);
        self.push(value, Op::AddRow(a.0, row.0))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) * self.value(row);
        self.push(value, Op::MulRow(a.0, row.0))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a) * s;
        self.push(value, Op::Scale(a.0, s))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        self.push(value, Op::Sigmoid(a.0))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x * sigmoid(x));
        self.push(value, Op::Silu(a.0))
    }

    /// Per-row standardization (no affine part).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let c = x.ncols() as f64;
        let mut value = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in value.rows_mut() {
            let mean = row.sum() / c;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
            let is = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        self.push(value, Op::LayerNorm { x: a.0, inv_std })
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let x = self.value(a);
        let data: Vec<f64> = x.iter().copied().collect();
        let value = Array2::from_shape_vec((rows, cols), data).expect("reshape preserves size");
        self.push(value, Op::Reshape(a.0))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(value, Op::SliceCols { x: a.0, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("matching row counts");
        self.push(value, Op::ConcatCols(parts.iter().map(|p| p.0).collect()))
    }

    /// Row `i` of the result is row `i - shift` of `a` (zero outside).
    pub fn shift_rows(&mut self, a: Var, shift: isize) -> Var {
        let value = shift_rows(self.value(a), shift);
        self.push(value, Op::ShiftRows { x: a.0, shift })
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Var {
        let (value, cache) = attention_forward(self.value(q), self.value(k), self.value(v), &spec)
            .expect("attention inputs validated by caller");
        self.push(
            value,
            Op::Attention {
                q: q.0,
                k: k.0,
                v: v.0,
                spec: Box::new(spec),
                cache: Box::new(cache),
            },
        )
    }

    /// Mean of all elements, as a `1 x 1` node.
    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a).mean().unwrap_or(0.0);
        self.push(Array2::from_elem((1, 1), m), Op::Mean(a.0))
    }

    /// A scalar computed outside the tape from `x`, with its precomputed
    /// gradient `d value / d x`.
    pub fn injected(&mut self, x: Var, value: f64, grad: Array2<f64>) -> Var {
        debug_assert_eq!(grad.dim(), self.value(x).dim());
        self.push(Array2::from_elem((1, 1), value), Op::Injected { x: x.0, grad })
    }

    /// Back-propagates from scalar `out`.
    pub fn backward(&self, out: Var) -> Gradients {
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Array2::ones(self.nodes[out.0].value.dim()));
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.nodes[*b].value.t());
                    let gb = self.nodes[*a].value.t().dot(&g);
                    accumulate(&mut grads[*a], ga);
                    accumulate(&mut grads[*b], gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[*a], g.clone());
                    accumulate(&mut grads[*b], g.clone());
                }
                Op::Mul(a, b) => {
                    let ga = &g * &self.nodes[*b].value;
                    let gb = &g * &self.nodes[*a].value;
                    accumulate(&mut grads[*a], ga);
                    accumulate(&mut grads[*b], gb);
                }
                Op::AddRow(a, r) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads[*a], g.clone());
                    accumulate(&mut grads[*r], gr);
                }
                Op::MulRow(a, r) => {
                    let gr = (&g * &self.nodes[*a].value).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let ga = &g * &self.nodes[*r].value;
                    accumulate(&mut grads[*a], ga);
                    accumulate(&mut grads[*r], gr);
                }
                Op::Scale(a, s) => accumulate(&mut grads[*a], &g * *s),
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let ga = ndarray::Zip::from(&g).and(y).map_collect(|&g, &y| g * y * (1.0 - y));
                    accumulate(&mut grads[*a], ga);
                }
                Op::Silu(a) => {
                    let x = &self.nodes[*a].value;
                    let ga = ndarray::Zip::from(&g).and(x).map_collect(|&g, &x| {
                        let s = sigmoid(x);
                        g * (s + x * s * (1.0 - s))
                    });
                    accumulate(&mut grads[*a], ga);
                }
                Op::LayerNorm { x, inv_std } => {
                    let y = &node.value;
                    let c = y.ncols() as f64;
                    let mut gx = Array2::zeros(y.dim());
                    for r in 0..y.nrows() {
                        let gy = g.row(r);
                        let yr = y.row(r);
                        let mean_g = gy.sum() / c;
                        let mean_gy = gy.dot(&yr) / c;
                        for col in 0..y.ncols() {
                            gx[[r, col]] = inv_std[r] * (gy[col] - mean_g - yr[col] * mean_gy);
                        }
                    }
                    accumulate(&mut grads[*x], gx);
                }
                Op::Reshape(a) => {
                    let dim = self.nodes[*a].value.dim();
                    let data: Vec<f64> = g.iter().copied().collect();
                    accumulate(
                        &mut grads[*a],
                        Array2::from_shape_vec(dim, data).expect("reshape preserves size"),
                    );
                }
                Op::SliceCols { x, start } => {
                    let mut gx = Array2::zeros(self.nodes[*x].value.dim());
                    gx.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    accumulate(&mut grads[*x], gx);
                }
                Op::ConcatCols(parts) => {
                    let mut col = 0;
                    for p in parts {
                        let w = self.nodes[*p].value.ncols();
                        accumulate(&mut grads[*p], g.slice(s![.., col..col + w]).to_owned());
                        col += w;
                    }
                }
                Op::ShiftRows { x, shift } => accumulate(&mut grads[*x], shift_rows(&g, -shift)),
                Op::Attention {
                    q,
                    k,
                    v,
                    spec,
                    cache,
                } => {
                    let (gq, gk, gv) = attention_backward(
                        &self.nodes[*q].value,
                        &self.nodes[*k].value,
                        &self.nodes[*v].value,
                        spec,
                        cache,
                        &g,
                    );
                    accumulate(&mut grads[*q], gq);
                    accumulate(&mut grads[*k], gk);
                    accumulate(&mut grads[*v], gv);
                }
                Op::Mean(a) => {
                    let dim = self.nodes[*a].value.dim();
                    let n = (dim.0 * dim.1).max(1) as f64;
                    accumulate(&mut grads[*a], Array2::from_elem(dim, g[[0, 0]] / n));
                }
                Op::Injected { x, grad } => accumulate(&mut grads[*x], grad * g[[0, 0]]),
            }
            grads[i] = Some(g);
        }
        Gradients { grads }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn shift_rows(x: &Array2<f64>, shift: isize) -> Array2<f64> {
    let n = x.nrows() as isize;
    let mut out = Array2::zeros(x.dim());
    for i in 0..n {
        let src = i - shift;
        if (0..n).contains(&src) {
            out.row_mut(i as usize).assign(&x.row(src as usize));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det_matrix(rows: usize, cols: usize, seed: f64) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |(i, j)| ((i * cols + j) as f64 * 0.73 + seed).sin())
    }

    /// Checks d(sum(w .* f(x)))/dx against central differences.
    fn check_unary(f: impl Fn(&mut Tape, Var) -> Var, x: Array2<f64>) {
        let w = det_matrix(
            {
                let mut t = Tape::new();
                let v = t.leaf(x.clone());
                let y = f(&mut t, v);
                t.value(y).nrows()
            },
            {
                let mut t = Tape::new();
                let v = t.leaf(x.clone());
                let y = f(&mut t, v);
                t.value(y).ncols()
            },
            0.3,
        );
        let eval = |x: &Array2<f64>| {
            let mut t = Tape::new();
            let v = t.leaf(x.clone());
            let y = f(&mut t, v);
            (t.value(y) * &w).sum()
        };
        let mut t = Tape::new();
        let xv = t.leaf(x.clone());
        let y = f(&mut t, xv);
        let wv = t.leaf(w.clone());
        let prod = t.mul(y, wv);
        let m = t.mean(prod);
        let n = w.len() as f64;
        let grads = t.backward(m);
        let g = grads.get(xv).unwrap() * n;
        let h = 1e-6;
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let mut xp = x.clone();
            xp[[r, c]] += h;
            let up = eval(&xp);
            xp[[r, c]] -= 2.0 * h;
            let down = eval(&xp);
            let fd = (up - down) / (2.0 * h);
            assert!((fd - g[[r, c]]).abs() < 1e-7, "idx {idx}: fd {fd} vs {}", g[[r, c]]);
        }
    }

    #[test]
    fn elementwise_ops() {
        let x = det_matrix(3, 4, 0.1);
        check_unary(|t, v| t.sigmoid(v), x.clone());
        check_unary(|t, v| t.silu(v), x.clone());
        check_unary(|t, v| t.layer_norm(v), x.clone());
        check_unary(|t, v| t.scale(v, -2.5), x.clone());
        check_unary(|t, v| t.shift_rows(v, 1), x.clone());
        check_unary(|t, v| t.shift_rows(v, -1), x.clone());
        check_unary(|t, v| t.reshape(v, 6, 2), x.clone());
        check_unary(|t, v| t.slice_cols(v, 1, 2), x.clone());
        check_unary(
            |t, v| {
                let a = t.slice_cols(v, 0, 1);
                let b = t.slice_cols(v, 2, 2);
                t.concat_cols(&[b, a, v])
            },
            x,
        );
    }

    #[test]
    fn binary_ops() {
        let b = det_matrix(4, 2, 0.9);
        let row = det_matrix(1, 4, 1.3);
        let x = det_matrix(3, 4, 0.2);
        check_unary(
            move |t, v| {
                let bv = t.leaf(b.clone());
                t.matmul(v, bv)
            },
            x.clone(),
        );
        let r2 = row.clone();
        check_unary(
            move |t, v| {
                let rv = t.leaf(r2.clone());
                t.add_row(v, rv)
            },
            x.clone(),
        );
        check_unary(
            move |t, v| {
                let rv = t.leaf(row.clone());
                t.mul_row(v, rv)
            },
            x.clone(),
        );
        // gradient flowing into the broadcast row
        let a = det_matrix(3, 4, 2.0);
        check_unary(
            move |t, r| {
                let av = t.leaf(a.clone());
                let x = t.mul_row(av, r);
                let y = t.add_row(x, r);
                t.mul(y, y)
            },
            det_matrix(1, 4, 0.4),
        );
    }

    #[test]
    fn injected_scales_with_upstream() {
        let mut t = Tape::new();
        let x = t.leaf(Array2::zeros((2, 2)));
        let l = t.injected(x, 3.0, Array2::from_elem((2, 2), 0.5));
        let l2 = t.scale(l, 4.0);
        let g = t.backward(l2);
        assert_eq!(g.get(x).unwrap(), &Array2::from_elem((2, 2), 2.0));
        assert_eq!(t.scalar(l2), 12.0);
    }
}
