use super::Real;
use crate::exec::{self, ExecMode};

// Below this many multiply-adds the rayon fan-out costs more than it saves.
const PAR_MIN_FLOPS: usize = 1 << 16;

fn pick(mode: ExecMode, flops: usize) -> ExecMode {
    if flops >= PAR_MIN_FLOPS {
        mode
    } else {
        ExecMode::Sequential
    }
}

/// Eight independent partial sums so the loop vectorises; the summation
/// order is fixed, so results do not depend on the execution mode.
fn dot<T: Real>(x: &[T], y: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (xc, yc) = (x.chunks_exact(8), y.chunks_exact(8));
    let mut tail = T::zero();
    for (&a, &b) in xc.remainder().iter().zip(yc.remainder()) {
        tail = tail + a * b;
    }
    for (a, b) in xc.zip(yc) {
        for l in 0..8 {
            acc[l] = acc[l] + a[l] * b[l];
        }
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

// Output rows per block and columns per tile in `matmul`. Each row of `b`
// is loaded once per block instead of once per output row.
const ROW_BLOCK: usize = 4;
const COL_TILE: usize = 512;

/// Row-major `[r, c]` to `[c, r]`, in square tiles.
pub fn transpose<T: Real>(x: &[T], r: usize, c: usize) -> Vec<T> {
    const TILE: usize = 32;
    let mut out = vec![T::zero(); r * c];
    for i0 in (0..r).step_by(TILE) {
        for j0 in (0..c).step_by(TILE) {
            for i in i0..(i0 + TILE).min(r) {
                for j in j0..(j0 + TILE).min(c) {
                    out[j * r + i] = x[i * c + j];
                }
            }
        }
    }
    out
}

/// `c[m,n] = a[m,k] · b[k,n]`, row-major slices.
pub fn matmul<T: Real>(mode: ExecMode, a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    if n == 0 {
        return c;
    }
    exec::for_each_chunk_mut(pick(mode, m * k * n), &mut c, ROW_BLOCK * n, |blk, rows| {
        let r0 = blk * ROW_BLOCK;
        let nrows = rows.len() / n;
        for j0 in (0..n).step_by(COL_TILE) {
            let j1 = (j0 + COL_TILE).min(n);
            for p in 0..k {
                let brow = &b[p * n + j0..p * n + j1];
                for r in 0..nrows {
                    let av = a[(r0 + r) * k + p];
                    if av == T::zero() {
                        continue;
                    }
                    let crow = &mut rows[r * n + j0..r * n + j1];
                    for (cv, &bv) in crow.iter_mut().zip(brow) {
                        *cv = *cv + av * bv;
                    }
                }
            }
        }
    });
    c
}

/// `c[m,n] = a[m,k] · b[n,k]ᵀ`.
pub fn matmul_nt<T: Real>(mode: ExecMode, a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    // with several rows, one transpose of `b` pays for itself
    if m >= ROW_BLOCK {
        return matmul(mode, a, &transpose(b, n, k), m, k, n);
    }
    let mut c = vec![T::zero(); m * n];
    exec::for_each_chunk_mut(pick(mode, m * k * n), &mut c, n, |i, row| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, cv) in row.iter_mut().enumerate() {
            *cv = dot(arow, &b[j * k..(j + 1) * k]);
        }
    });
    c
}

/// `c[k,n] = a[m,k]ᵀ · b[m,n]`.
pub fn matmul_tn<T: Real>(mode: ExecMode, a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); k * n];
    exec::for_each_chunk_mut(pick(mode, m * k * n), &mut c, n, |p, row| {
        for i in 0..m {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[i * n..(i + 1) * n];
            for (cv, &bv) in row.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    });
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
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

    fn transpose(x: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = x[i * c + j];
            }
        }
        t
    }

    #[test]
    fn variants_agree_with_naive() {
        let (m, k, n) = (7, 5, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        let want = naive(&a, &b, m, k, n);
        for mode in [ExecMode::Sequential, ExecMode::Parallel] {
            assert_eq!(matmul(mode, &a, &b, m, k, n), want);
            let bt = transpose(&b, k, n);
            let got = matmul_nt(mode, &a, &bt, m, k, n);
            for (x, y) in got.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }
            let at = transpose(&a, m, k);
            let got = matmul_tn(mode, &at, &b, k, m, n);
            for (x, y) in got.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn large_parallel_is_bitwise_equal_to_sequential() {
        let (m, k, n) = (64, 64, 64);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.013).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.029).cos()).collect();
        assert_eq!(
            matmul(ExecMode::Sequential, &a, &b, m, k, n),
            matmul(ExecMode::Parallel, &a, &b, m, k, n)
        );
    }
}
