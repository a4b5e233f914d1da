//! Dense kernels shared by the tape ops.
//!
//! Every kernel computes each output row from the matching input row alone,
//! with a fixed summation order, so a row's value never depends on how many
//! other rows are in the batch. Mask-causality checks rely on this.

/// `C[m x n] = A[m x k] * B[k x n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    gemm(a, (k as isize, 1), b, (n as isize, 1), m, k, n)
}

/// General product with explicit row/column strides for both operands.
fn gemm(a: &[f64], sa: (isize, isize), b: &[f64], sb: (isize, isize), m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    assert!(a.len() >= m * k && b.len() >= k * n);
    // SAFETY: the strides address exactly the `m x k`, `k x n` and `m x n`
    // elements of the three buffers, whose lengths were checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0,
            sa.1,
            b.as_ptr(),
            sb.0,
            sb.1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

pub fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut t = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            t[j * m + i] = a[i * n + j];
        }
    }
    t
}

/// `C[m x n] = A[m x k] * B^T` with `B` stored `[n x k]`.
pub fn matmul_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    gemm(a, (k as isize, 1), b, (1, k as isize), m, k, n)
}

/// `C[m x n] = A^T * B` with `A` stored `[k x m]` and `B` stored `[k x n]`.
pub fn matmul_at(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    gemm(a, (1, m as isize), b, (n as isize, 1), m, k, n)
}

/// Numerically stable softmax over `len`-long lanes separated by `stride`.
pub fn softmax_lanes(x: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = f64::NEG_INFINITY;
            for a in 0..len {
                max = max.max(x[base + a * inner]);
            }
            let mut sum = 0.0;
            for a in 0..len {
                let e = (x[base + a * inner] - max).exp();
                y[base + a * inner] = e;
                sum += e;
            }
            for a in 0..len {
                y[base + a * inner] /= sum;
            }
        }
    }
    y
}

/// `log(sum(exp(row)))` computed with max-subtraction.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}
