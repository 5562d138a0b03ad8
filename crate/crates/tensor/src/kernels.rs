//! Inner loops shared by forward and backward passes.
//!
//! All kernels use fixed accumulation orders and fixed parallel chunk sizes,
//! so results are bit-identical across runs and across thread counts.

use rayon::prelude::*;

/// Row count above which row-parallel kernels split work across threads.
const PAR_ROWS: usize = 256;
/// Fixed chunk length for parallel row partitions.
const ROW_CHUNK: usize = 128;
/// Fixed chunk length for reduction partitions (tn products, column sums).
const RED_CHUNK: usize = 2048;

/// Dot product with four-way unrolled accumulators.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let chunks = a.len() / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..chunks {
        let j = i * 4;
        s0 += a[j] * b[j];
        s1 += a[j + 1] * b[j + 1];
        s2 += a[j + 2] * b[j + 2];
        s3 += a[j + 3] * b[j + 3];
    }
    let mut tail = 0.0;
    for j in chunks * 4..a.len() {
        tail += a[j] * b[j];
    }
    (s0 + s1) + (s2 + s3) + tail
}

/// y += alpha * x
pub fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// C[m,n] += A[m,k] · B[k,n]
pub fn matmul_nn(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(c.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let body = |(ci, ai): (&mut [f64], &[f64])| {
        for (p, &apk) in ai.iter().enumerate() {
            axpy(ci, apk, &b[p * n..(p + 1) * n]);
        }
    };
    if m >= PAR_ROWS {
        c.par_chunks_mut(ROW_CHUNK * n)
            .zip(a.par_chunks(ROW_CHUNK * k))
            .for_each(|(cc, ac)| {
                cc.chunks_mut(n).zip(ac.chunks(k)).for_each(body);
            });
    } else {
        c.chunks_mut(n).zip(a.chunks(k)).for_each(body);
    }
}

/// C[m,n] += A[m,k] · B[n,k]ᵀ  (both operands iterated row-major)
///
/// Tall products transpose B once and run through the axpy path, which
/// vectorizes much better than per-element dots.
pub fn matmul_nt(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(c.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    if m >= 64 {
        let mut bt = vec![0.0; k * n];
        for j in 0..n {
            for p in 0..k {
                bt[p * n + j] = b[j * k + p];
            }
        }
        matmul_nn(c, a, &bt, m, k, n);
        return;
    }
    for (ci, ai) in c.chunks_mut(n).zip(a.chunks(k)) {
        for (j, cij) in ci.iter_mut().enumerate() {
            *cij += dot(ai, &b[j * k..(j + 1) * k]);
        }
    }
}

/// C[m,n] += A[k,m]ᵀ · B[k,n]
///
/// The reduction runs over k; partial products are computed per fixed-size
/// k-chunk and merged in chunk order.
pub fn matmul_tn(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(c.len(), m * n);
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    let chunk_body = |c: &mut [f64], arows: &[f64], brows: &[f64]| {
        for (ar, br) in arows.chunks(m).zip(brows.chunks(n)) {
            for (i, &aki) in ar.iter().enumerate() {
                axpy(&mut c[i * n..(i + 1) * n], aki, br);
            }
        }
    };
    if k >= RED_CHUNK * 2 {
        let partials: Vec<Vec<f64>> = a
            .par_chunks(RED_CHUNK * m)
            .zip(b.par_chunks(RED_CHUNK * n))
            .map(|(ac, bc)| {
                let mut part = vec![0.0; m * n];
                chunk_body(&mut part, ac, bc);
                part
            })
            .collect();
        for part in partials {
            for (ci, pi) in c.iter_mut().zip(&part) {
                *ci += pi;
            }
        }
    } else {
        chunk_body(c, a, b);
    }
}

/// out[n] += column sums of A[k,n]
pub fn col_sum(out: &mut [f64], a: &[f64], k: usize, n: usize) {
    debug_assert_eq!(out.len(), n);
    debug_assert_eq!(a.len(), k * n);
    if k >= RED_CHUNK * 2 {
        let partials: Vec<Vec<f64>> = a
            .par_chunks(RED_CHUNK * n)
            .map(|ac| {
                let mut part = vec![0.0; n];
                for row in ac.chunks(n) {
                    axpy(&mut part, 1.0, row);
                }
                part
            })
            .collect();
        for part in partials {
            axpy(out, 1.0, &part);
        }
    } else {
        for row in a.chunks(n) {
            axpy(out, 1.0, row);
        }
    }
}

/// Applies `f` per row over two mutable and two shared row-major buffers that
/// all share the same row count. Rows are processed in parallel chunks when
/// the batch is tall; each invocation sees exactly one row of each buffer.
pub fn zip_row_chunks<F>(
    out_a: &mut [f64],
    out_b: &mut [f64],
    in_c: &[f64],
    in_d: &[f64],
    widths: [usize; 4],
    f: F,
) where
    F: Fn(&mut [f64], &mut [f64], &[f64], &[f64]) + Sync,
{
    let [wa, wb, wc, wd] = widths;
    let rows = out_a.len() / wa;
    debug_assert_eq!(out_b.len(), rows * wb);
    debug_assert_eq!(in_c.len(), rows * wc);
    debug_assert_eq!(in_d.len(), rows * wd);
    let body = |(((ca, cb), cc), cd): (((&mut [f64], &mut [f64]), &[f64]), &[f64])| {
        let n = ca.len() / wa;
        for r in 0..n {
            f(
                &mut ca[r * wa..(r + 1) * wa],
                &mut cb[r * wb..(r + 1) * wb],
                &cc[r * wc..(r + 1) * wc],
                &cd[r * wd..(r + 1) * wd],
            );
        }
    };
    if rows >= PAR_ROWS {
        out_a
            .par_chunks_mut(ROW_CHUNK * wa)
            .zip(out_b.par_chunks_mut(ROW_CHUNK * wb))
            .zip(in_c.par_chunks(ROW_CHUNK * wc))
            .zip(in_d.par_chunks(ROW_CHUNK * wd))
            .for_each(body);
    } else {
        body((((out_a, out_b), in_c), in_d));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn seq(len: usize, scale: f64) -> Vec<f64> {
        (0..len).map(|i| ((i * 31 % 17) as f64 - 8.0) * scale).collect()
    }

    #[test]
    fn matmul_variants_agree_with_naive() {
        let (m, k, n) = (7, 5, 6);
        let a = seq(m * k, 0.3);
        let b = seq(k * n, 0.2);
        let expect = naive_mm(&a, &b, m, k, n);

        let mut c = vec![0.0; m * n];
        matmul_nn(&mut c, &a, &b, m, k, n);
        assert!(c.iter().zip(&expect).all(|(x, y)| (x - y).abs() < 1e-12));

        // Bᵀ layout: store B as [n,k] and multiply with nt.
        let mut bt = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut c2 = vec![0.0; m * n];
        matmul_nt(&mut c2, &a, &bt, m, k, n);
        assert!(c2.iter().zip(&expect).all(|(x, y)| (x - y).abs() < 1e-12));

        // Aᵀ layout: store A as [k,m] and multiply with tn.
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut c3 = vec![0.0; m * n];
        matmul_tn(&mut c3, &at, &b, m, k, n);
        assert!(c3.iter().zip(&expect).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn dot_matches_naive_order_independent_tolerance() {
        let a = seq(103, 0.11);
        let b = seq(103, 0.07);
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-10);
    }

    #[test]
    fn col_sum_matches_naive() {
        let (k, n) = (9, 4);
        let a = seq(k * n, 0.5);
        let mut out = vec![0.0; n];
        col_sum(&mut out, &a, k, n);
        for j in 0..n {
            let naive: f64 = (0..k).map(|i| a[i * n + j]).sum();
            assert!((out[j] - naive).abs() < 1e-12);
        }
    }
}
