//! Reverse-mode differentiation over a linear record of primitive ops.
//!
//! Nodes are appended in evaluation order, so walking the record backwards
//! visits every node after all of its consumers.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::masks::TokenMask;

use super::kernels::{self, gemm, Layout};
use super::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<'a> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        shift: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    MaskedSoftmax(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: &'a TokenMask,
        probs: Vec<f64>,
    },
    GatherRows(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    Mse(Var, Vec<f64>),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op<'a>,
}

/// The computation record. Leaves may borrow their data (e.g. model weights)
/// for the lifetime of the graph.
#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

/// Adjoints produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// `None` when the node does not influence the loss.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `var`, zero-filled when it does not influence the loss.
    pub fn take(&mut self, var: Var, len: usize) -> Vec<f64> {
        self.grads
            .get_mut(var.0)
            .and_then(Option::take)
            .unwrap_or_else(|| vec![0.0; len])
    }
}

fn shape_err(what: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{what}: {a:?} vs {b:?}"))
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op<'a>) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf that borrows its tensor instead of copying it.
    pub fn param(&mut self, value: &'a Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(shape_err("matmul", self.value(a).shape(), self.value(b).shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            Layout::row_major(k),
            self.value(b).data(),
            Layout::row_major(n),
            &mut out,
            n,
            false,
        );
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMul(a, b)))
    }

    fn zip(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(what, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    /// `a[m, n] + bias[n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.value(a).dims2()?;
        if self.value(bias).numel() != n {
            return Err(shape_err("add_row", self.value(a).shape(), self.value(bias).shape()));
        }
        let b = self.value(bias).data();
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(n) {
            for (x, &y) in row.iter_mut().zip(b) {
                *x += y;
            }
        }
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::AddRow(a, bias)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| x * c).collect();
        let t = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Scale(a, c))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| kernels::gelu(x)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Gelu(a))
    }

    /// Normalizes each row to zero mean and unit variance, then applies
    /// `gain * xhat + shift`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if self.value(gain).numel() != n || self.value(shift).numel() != n {
            return Err(shape_err("layer_norm", self.value(x).shape(), self.value(gain).shape()));
        }
        let (g, s) = (self.value(gain).data(), self.value(shift).data());
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for (r, row) in self.value(x).data().chunks(n).enumerate() {
            let (mean, inv) = kernels::row_moments(row);
            rstd[r] = inv;
            for c in 0..n {
                let h = (row[c] - mean) * inv;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + s[c];
            }
        }
        let t = Tensor::new(self.value(x).shape().to_vec(), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                shift,
                xhat,
                rstd,
            },
        ))
    }

    /// Row-wise softmax restricted to allowed entries; blocked entries are 0.
    pub fn masked_softmax(&mut self, scores: Var, mask: &'a TokenMask) -> Result<Var> {
        let (m, n) = self.value(scores).dims2()?;
        if m != mask.len() || n != mask.len() {
            return Err(Error::Shape(format!(
                "scores {m}x{n} vs mask of {} tokens",
                mask.len()
            )));
        }
        let mut out = self.value(scores).data().to_vec();
        for (r, row) in out.chunks_mut(n).enumerate() {
            kernels::softmax_row(row, mask.row(r)).map_err(|_| Error::DegenerateRow(r))?;
        }
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MaskedSoftmax(scores)))
    }

    /// Masked multi-head scaled dot-product attention over a batch of
    /// sequences stacked along rows: `q`, `k`, `v` are `[batch * L, E]`
    /// with `L = mask.len()` and `E` divisible by `heads`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: &'a TokenMask,
    ) -> Result<Var> {
        let (rows, width) = self.value(q).dims2()?;
        for other in [k, v] {
            if self.value(other).dims2()? != (rows, width) {
                return Err(shape_err("attention", self.value(q).shape(), self.value(other).shape()));
            }
        }
        let len = mask.len();
        if heads == 0 || width % heads != 0 || len == 0 || rows % len != 0 {
            return Err(Error::Shape(format!(
                "attention over {rows}x{width} with {heads} heads and {len} tokens"
            )));
        }
        let batch = rows / len;
        let head_dim = width / heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; batch * heads * len * len];
        let mut out = vec![0.0; rows * width];
        for b in 0..batch {
            for h in 0..heads {
                let base = b * len * width + h * head_dim;
                let p = &mut probs[(b * heads + h) * len * len..][..len * len];
                // scores = Q_h K_h^T
                gemm(
                    len,
                    head_dim,
                    len,
                    &qd[base..],
                    Layout::row_major(width),
                    &kd[base..],
                    Layout::transposed(width),
                    p,
                    len,
                    false,
                );
                for (r, row) in p.chunks_mut(len).enumerate() {
                    row.iter_mut().for_each(|s| *s *= scale);
                    kernels::softmax_row(row, mask.row(r)).map_err(|_| Error::DegenerateRow(r))?;
                }
                gemm(
                    len,
                    len,
                    head_dim,
                    p,
                    Layout::row_major(len),
                    &vd[base..],
                    Layout::row_major(width),
                    &mut out[base..],
                    width,
                    false,
                );
            }
        }
        let t = Tensor::new(vec![rows, width], out)?;
        Ok(self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                heads,
                mask,
                probs,
            },
        ))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::Shape(format!("row {bad} out of range for {m} rows")));
        }
        let src = self.value(x).data();
        let data = rows
            .iter()
            .flat_map(|&r| src[r * n..(r + 1) * n].iter().copied())
            .collect();
        let t = Tensor::new(vec![rows.len(), n], data)?;
        Ok(self.push(t, Op::GatherRows(x, rows.to_vec())))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel().max(1) as f64;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// Mean squared error against a constant target of the same length.
    pub fn mse(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let p = self.value(pred).data();
        if p.len() != target.len() || p.is_empty() {
            return Err(Error::Shape(format!(
                "mse over {} predictions and {} targets",
                p.len(),
                target.len()
            )));
        }
        let s = p.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64;
        Ok(self.push(Tensor::scalar(s), Op::Mse(pred, target.to_vec())))
    }

    /// Replays the record backwards from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (m, k) = self.value(*a).dims2()?;
                    let (_, n) = self.value(*b).dims2()?;
                    // dA = G B^T, dB = A^T G
                    let ga = slot(&mut grads, *a, m * k);
                    gemm(
                        m,
                        n,
                        k,
                        &g,
                        Layout::row_major(n),
                        self.value(*b).data(),
                        Layout::transposed(n),
                        ga,
                        k,
                        true,
                    );
                    let gb = slot(&mut grads, *b, k * n);
                    gemm(
                        k,
                        m,
                        n,
                        self.value(*a).data(),
                        Layout::transposed(k),
                        &g,
                        Layout::row_major(n),
                        gb,
                        n,
                        true,
                    );
                }
                Op::Add(a, b) => {
                    accumulate(slot(&mut grads, *a, g.len()), &g);
                    accumulate(slot(&mut grads, *b, g.len()), &g);
                }
                Op::Sub(a, b) => {
                    accumulate(slot(&mut grads, *a, g.len()), &g);
                    let gb = slot(&mut grads, *b, g.len());
                    gb.iter_mut().zip(&g).for_each(|(x, y)| *x -= y);
                }
                Op::Mul(a, b) => {
                    let (da, db) = (self.value(*a).data(), self.value(*b).data());
                    let ga = slot(&mut grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * db[i];
                    }
                    let gb = slot(&mut grads, *b, g.len());
                    for i in 0..g.len() {
                        gb[i] += g[i] * da[i];
                    }
                }
                Op::AddRow(a, bias) => {
                    accumulate(slot(&mut grads, *a, g.len()), &g);
                    let n = self.value(*bias).numel();
                    let gb = slot(&mut grads, *bias, n);
                    for row in g.chunks(n) {
                        accumulate(gb, row);
                    }
                }
                Op::Scale(a, c) => {
                    let ga = slot(&mut grads, *a, g.len());
                    ga.iter_mut().zip(&g).for_each(|(x, y)| *x += c * y);
                }
                Op::Gelu(a) => {
                    let da = self.value(*a).data();
                    let ga = slot(&mut grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * kernels::gelu_grad(da[i]);
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    shift,
                    xhat,
                    rstd,
                } => {
                    let n = self.value(*gain).numel();
                    let gv = self.value(*gain).data();
                    {
                        let gg = slot(&mut grads, *gain, n);
                        for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                            for c in 0..n {
                                gg[c] += grow[c] * hrow[c];
                            }
                        }
                    }
                    {
                        let gs = slot(&mut grads, *shift, n);
                        for grow in g.chunks(n) {
                            accumulate(gs, grow);
                        }
                    }
                    let gx = slot(&mut grads, *x, g.len());
                    let mut dh = vec![0.0; n];
                    for (r, (grow, hrow)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for c in 0..n {
                            dh[c] = grow[c] * gv[c];
                            sum_dh += dh[c];
                            sum_dh_h += dh[c] * hrow[c];
                        }
                        let inv_n = 1.0 / n as f64;
                        for c in 0..n {
                            gx[r * n + c] +=
                                rstd[r] * (dh[c] - inv_n * sum_dh - hrow[c] * inv_n * sum_dh_h);
                        }
                    }
                }
                Op::MaskedSoftmax(a) => {
                    let p = node.value.data();
                    let n = node.value.dims2()?.1;
                    let ga = slot(&mut grads, *a, g.len());
                    for ((grow, prow), out) in g.chunks(n).zip(p.chunks(n)).zip(ga.chunks_mut(n)) {
                        kernels::softmax_row_backward(prow, grow, out);
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    mask,
                    probs,
                } => {
                    self.attention_backward(&mut grads, &g, *q, *k, *v, *heads, mask, probs)?;
                }
                Op::GatherRows(x, rows) => {
                    let (m, n) = self.value(*x).dims2()?;
                    let gx = slot(&mut grads, *x, m * n);
                    for (i, &r) in rows.iter().enumerate() {
                        accumulate(&mut gx[r * n..(r + 1) * n], &g[i * n..(i + 1) * n]);
                    }
                }
                Op::Sum(x) => {
                    let len = self.value(*x).numel();
                    slot(&mut grads, *x, len).iter_mut().for_each(|v| *v += g[0]);
                }
                Op::Mean(x) => {
                    let len = self.value(*x).numel();
                    let c = g[0] / len.max(1) as f64;
                    slot(&mut grads, *x, len).iter_mut().for_each(|v| *v += c);
                }
                Op::Mse(pred, target) => {
                    let p = self.value(*pred).data();
                    let c = 2.0 * g[0] / p.len() as f64;
                    let gp = slot(&mut grads, *pred, p.len());
                    for i in 0..p.len() {
                        gp[i] += c * (p[i] - target[i]);
                    }
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        grads: &mut [Option<Vec<f64>>],
        g: &[f64],
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: &TokenMask,
        probs: &[f64],
    ) -> Result<()> {
        let (rows, width) = self.value(q).dims2()?;
        let len = mask.len();
        let batch = rows / len;
        let head_dim = width / heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut gq = grads[q.0].take().unwrap_or_else(|| vec![0.0; rows * width]);
        let mut gk = grads[k.0].take().unwrap_or_else(|| vec![0.0; rows * width]);
        let mut gv = grads[v.0].take().unwrap_or_else(|| vec![0.0; rows * width]);
        let mut dp = vec![0.0; len * len];
        let mut ds = vec![0.0; len * len];
        for b in 0..batch {
            for h in 0..heads {
                let base = b * len * width + h * head_dim;
                let p = &probs[(b * heads + h) * len * len..][..len * len];
                // dV += P^T dO
                gemm(
                    len,
                    len,
                    head_dim,
                    p,
                    Layout::transposed(len),
                    &g[base..],
                    Layout::row_major(width),
                    &mut gv[base..],
                    width,
                    true,
                );
                // dP = dO V^T
                gemm(
                    len,
                    head_dim,
                    len,
                    &g[base..],
                    Layout::row_major(width),
                    &vd[base..],
                    Layout::transposed(width),
                    &mut dp,
                    len,
                    false,
                );
                for r in 0..len {
                    ds[r * len..(r + 1) * len].iter_mut().for_each(|x| *x = 0.0);
                    kernels::softmax_row_backward(
                        &p[r * len..(r + 1) * len],
                        &dp[r * len..(r + 1) * len],
                        &mut ds[r * len..(r + 1) * len],
                    );
                }
                ds.iter_mut().for_each(|x| *x *= scale);
                // dQ += dS K, dK += dS^T Q
                gemm(
                    len,
                    len,
                    head_dim,
                    &ds,
                    Layout::row_major(len),
                    &kd[base..],
                    Layout::row_major(width),
                    &mut gq[base..],
                    width,
                    true,
                );
                gemm(
                    len,
                    len,
                    head_dim,
                    &ds,
                    Layout::transposed(len),
                    &qd[base..],
                    Layout::row_major(width),
                    &mut gk[base..],
                    width,
                    true,
                );
            }
        }
        grads[q.0] = Some(gq);
        grads[k.0] = Some(gk);
        grads[v.0] = Some(gv);
        Ok(())
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], var: Var, len: usize) -> &mut Vec<f64> {
    grads[var.0].get_or_insert_with(|| vec![0.0; len])
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let i = g.leaf(mat(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let a = g.leaf(mat(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let c = g.matmul(i, a).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn orthogonal_rows() {
        let mut g = Graph::new();
        let a = g.leaf(mat(&[vec![1.0, 0.0]]));
        let b = g.leaf(mat(&[vec![0.0], vec![5.0]]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[0.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(&[2, 3]));
        let b = g.leaf(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.matmul(a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn masked_softmax_uniform_over_support() {
        let mask = TokenMask::new(
            4,
            vec![
                true, true, false, false, //
                true, false, false, true, //
                true, true, true, true, //
                false, false, false, true,
            ],
        )
        .unwrap();
        let mut g = Graph::new();
        let s = g.leaf(Tensor::zeros(&[4, 4]));
        let p = g.masked_softmax(s, &mask).unwrap();
        let p = g.value(p);
        assert_eq!(p.row(0), &[0.5, 0.5, 0.0, 0.0]);
        assert_eq!(p.row(1), &[0.5, 0.0, 0.0, 0.5]);
        assert_eq!(p.row(3), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn diagonal_mask_gives_identity() {
        let mask = TokenMask::new(3, (0..9).map(|i| i % 4 == 0).collect()).unwrap();
        let mut g = Graph::new();
        let s = g.leaf(mat(&[vec![3.0, -1.0, 8.0], vec![0.2, 0.1, 9.0], vec![5.0, 5.0, -5.0]]));
        let p = g.masked_softmax(s, &mask).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn fully_blocked_row_is_rejected() {
        assert!(matches!(
            TokenMask::new(2, vec![true, false, false, false]),
            Err(Error::DegenerateRow(1))
        ));
    }

    #[test]
    fn layer_norm_constant_and_unit_rows() {
        let mut g = Graph::new();
        let x = g.leaf(mat(&[vec![3.0, 3.0, 3.0], vec![-1.0, 1.0, 0.0]]));
        let gain = g.leaf(Tensor::new(vec![3], vec![1.0; 3]).unwrap());
        let shift = g.leaf(Tensor::zeros(&[3]));
        let y = g.layer_norm(x, gain, shift).unwrap();
        assert_eq!(g.value(y).row(0), &[0.0, 0.0, 0.0]);

        let mut g = Graph::new();
        let x = g.leaf(mat(&[vec![-1.0, 1.0]]));
        let gain = g.leaf(Tensor::new(vec![2], vec![1.0; 2]).unwrap());
        let shift = g.leaf(Tensor::zeros(&[2]));
        let y = g.layer_norm(x, gain, shift).unwrap();
        let expect = 1.0 / (1.0f64 + kernels::LAYER_NORM_EPS).sqrt();
        assert_eq!(g.value(y).data(), &[-expect, expect]);
    }

    #[test]
    fn linear_map_gradient() {
        // loss = sum(W x): dL/dW[i, j] = x[j] for every row i
        let mut g = Graph::new();
        let w = g.leaf(mat(&[vec![0.3, -0.2, 0.5], vec![1.0, 2.0, -1.0]]));
        let x = g.leaf(mat(&[vec![2.0], vec![-1.0], vec![4.0]]));
        let y = g.matmul(w, x).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap(), &[2.0, -1.0, 4.0, 2.0, -1.0, 4.0]);
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let mut g = Graph::new();
        let w = g.leaf(mat(&[vec![1.0, 2.0]]));
        let z = g.scale(w, 0.0);
        let loss = g.sum(z);
        let mut grads = g.backward(loss).unwrap();
        assert_eq!(grads.take(w, 2), vec![0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::zeros(&[2, 2]));
        assert!(matches!(g.backward(w), Err(Error::NonScalarLoss(_))));
    }
}
