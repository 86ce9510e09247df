//! Scalar and matrix kernels shared by the forward and backward passes.

pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Element strides of a matrix operand.
#[derive(Clone, Copy, Debug)]
pub struct Layout {
    pub row_stride: usize,
    pub col_stride: usize,
}

impl Layout {
    /// Row-major storage with `ld` elements between rows.
    pub fn row_major(ld: usize) -> Self {
        Self {
            row_stride: ld,
            col_stride: 1,
        }
    }

    /// Transpose of a row-major matrix with leading dimension `ld`.
    pub fn transposed(ld: usize) -> Self {
        Self {
            row_stride: 1,
            col_stride: ld,
        }
    }

    fn span(self, rows: usize, cols: usize) -> usize {
        (rows - 1) * self.row_stride + (cols - 1) * self.col_stride + 1
    }
}

/// `C[m, n] (+)= A[m, k] B[k, n]`, with `C` row-major and row stride `ldc`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    la: Layout,
    b: &[f64],
    lb: Layout,
    c: &mut [f64],
    ldc: usize,
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    let c_span = Layout::row_major(ldc).span(m, n);
    assert!(c.len() >= c_span, "gemm output too short");
    if k == 0 {
        if !accumulate {
            for r in 0..m {
                c[r * ldc..r * ldc + n].iter_mut().for_each(|x| *x = 0.0);
            }
        }
        return;
    }
    assert!(a.len() >= la.span(m, k), "gemm lhs too short");
    assert!(b.len() >= lb.span(k, n), "gemm rhs too short");
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every element the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            la.row_stride as isize,
            la.col_stride as isize,
            b.as_ptr(),
            lb.row_stride as isize,
            lb.col_stride as isize,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Mean and reciprocal standard deviation (population variance + eps),
/// summed left to right.
pub fn row_moments(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

/// In-place softmax over the allowed entries; blocked entries become 0.
/// Fails when nothing is allowed.
pub fn softmax_row(row: &mut [f64], allow: &[bool]) -> Result<(), ()> {
    let max = row
        .iter()
        .zip(allow)
        .filter(|(_, &a)| a)
        .map(|(&s, _)| s)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(());
    }
    let mut total = 0.0;
    for (s, &a) in row.iter_mut().zip(allow) {
        *s = if a { (*s - max).exp() } else { 0.0 };
        total += *s;
    }
    row.iter_mut().for_each(|s| *s /= total);
    Ok(())
}

/// `out += p * (dp - <p, dp>)` for one softmax row.
pub fn softmax_row_backward(p: &[f64], dp: &[f64], out: &mut [f64]) {
    let dot: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
    for i in 0..p.len() {
        out[i] += p[i] * (dp[i] - dot);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_triple_loop() {
        let (m, k, n) = (3, 4, 2);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 1.3).cos()).collect();
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, &a, Layout::row_major(k), &b, Layout::row_major(n), &mut c, n, false);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for t in 0..k {
                    s += a[i * k + t] * b[t * n + j];
                }
                assert!((c[i * n + j] - s).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x = {x}");
        }
    }

    #[test]
    fn softmax_rejects_empty_support() {
        let mut row = [1.0, 2.0];
        assert!(softmax_row(&mut row, &[false, false]).is_err());
    }
}
