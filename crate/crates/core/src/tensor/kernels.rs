//! Raw loops behind the graph ops. Every output element of a product is
//! `c + a0*b0 + a1*b1 + ...` summed in ascending inner index, whichever path
//! (register tile or remainder) computes it.

const MR: usize = 4;
const NR: usize = 8;

/// `c[m,n] += a[m,k] * b[k,n]`, all row-major.
///
/// Uses 256-bit vectors when the CPU has them. No fused multiply-add is
/// used, so both paths round identically.
pub(crate) fn gemm_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    dispatch::<false>(m, k, n, a, b, c);
}

/// `c[m,n] += aᵀ * b[k,n]` where `a` is stored row-major as `[k, m]`.
pub(crate) fn gemm_at_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    dispatch::<true>(m, k, n, a, b, c);
}

fn dispatch<const TA: bool>(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the feature was detected at runtime.
            unsafe { gemm_avx2::<TA>(m, k, n, a, b, c) };
            return;
        }
    }
    gemm_generic::<TA>(m, k, n, a, b, c);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn gemm_avx2<const TA: bool>(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    gemm_generic::<TA>(m, k, n, a, b, c);
}

/// Element `(i, p)` of the left operand.
#[inline(always)]
fn at<const TA: bool>(a: &[f64], m: usize, k: usize, i: usize, p: usize) -> f64 {
    if TA {
        a[p * m + i]
    } else {
        a[i * k + p]
    }
}

#[inline(always)]
fn gemm_generic<const TA: bool>(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    let m_main = m - m % MR;
    let n_main = n - n % NR;
    for i0 in (0..m_main).step_by(MR) {
        for j0 in (0..n_main).step_by(NR) {
            let mut acc = [[0.0f64; NR]; MR];
            for (r, row) in acc.iter_mut().enumerate() {
                row.copy_from_slice(&c[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR]);
            }
            for p in 0..k {
                let bp: &[f64; NR] = b[p * n + j0..p * n + j0 + NR].try_into().expect("NR wide");
                let av: [f64; MR] = if TA {
                    a[p * m + i0..p * m + i0 + MR].try_into().expect("MR wide")
                } else {
                    std::array::from_fn(|r| a[(i0 + r) * k + p])
                };
                for r in 0..MR {
                    for q in 0..NR {
                        acc[r][q] += av[r] * bp[q];
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                c[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR].copy_from_slice(row);
            }
        }
        for i in i0..i0 + MR {
            gemm_row_tail::<TA>(i, m, k, n, n_main, a, b, c);
        }
    }
    for i in m_main..m {
        gemm_row_tail::<TA>(i, m, k, n, 0, a, b, c);
    }
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn gemm_row_tail<const TA: bool>(i: usize, m: usize, k: usize, n: usize, j_from: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    if j_from == n {
        return;
    }
    let cr = &mut c[i * n + j_from..(i + 1) * n];
    // Accumulate per output element in k order, vectorized across j.
    for p in 0..k {
        let av = at::<TA>(a, m, k, i, p);
        let bp = &b[p * n + j_from..(p + 1) * n];
        for (cv, &bv) in cr.iter_mut().zip(bp) {
            *cv += av * bv;
        }
    }
}

/// Transposed copy of a row-major `[rows, cols]` matrix.
pub(crate) fn transpose(rows: usize, cols: usize, src: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = src[i * cols + j];
        }
    }
    out
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Permuted copy; output axis `i` is input axis `perm[i]`.
pub(crate) fn permute(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    if rank == 0 {
        out.extend_from_slice(data);
        return (out_shape, out);
    }
    let last = rank - 1;
    let inner = out_shape[last];
    let inner_stride = src_strides[last];
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    while out.len() < n {
        if inner_stride == 1 {
            out.extend_from_slice(&data[base..base + inner]);
        } else {
            out.extend((0..inner).map(|j| data[base + j * inner_stride]));
        }
        // advance the odometer over the outer axes
        let mut ax = last;
        while ax > 0 {
            ax -= 1;
            idx[ax] += 1;
            base += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}
