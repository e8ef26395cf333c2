//! Row-major matrix kernels. Every output element is accumulated in a fixed
//! order, so results do not depend on how callers split the work.

use super::tensor::Real;

const LANES: usize = 8;

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    let s01 = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    let s23 = (acc[4] + acc[5]) + (acc[6] + acc[7]);
    (s01 + s23) + tail
}

#[inline]
pub fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `c[m,n] += a[m,k] · b[k,n]`
pub fn mm_nn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    if std::mem::size_of::<T>() == 4 {
        mm_nn_blocked::<T, 16>(m, k, n, a, b, c)
    } else {
        mm_nn_blocked::<T, LANES>(m, k, n, a, b, c)
    }
}

/// Register-blocked `4 × W` tiles; each output still sums over `p` in order.
fn mm_nn_blocked<T: Real, const W: usize>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    const ROWS: usize = 4;
    let a = &a[..m * k];
    let b = &b[..k * n];
    let c = &mut c[..m * n];
    let mut i = 0;
    while i + ROWS <= m {
        let mut j = 0;
        while j + W <= n {
            let mut acc = [[T::zero(); W]; ROWS];
            for (r, row) in acc.iter_mut().enumerate() {
                row.copy_from_slice(&c[(i + r) * n + j..(i + r) * n + j + W]);
            }
            let arows: [&[T]; ROWS] = std::array::from_fn(|r| &a[(i + r) * k..(i + r + 1) * k]);
            for (p, bfull) in b.chunks_exact(n).enumerate() {
                let bp: [T; W] = bfull[j..j + W].try_into().unwrap();
                for (row, arow) in acc.iter_mut().zip(&arows) {
                    let aip = arow[p];
                    for l in 0..W {
                        row[l] += aip * bp[l];
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                c[(i + r) * n + j..(i + r) * n + j + W].copy_from_slice(row);
            }
            j += W;
        }
        if j < n {
            for r in i..i + ROWS {
                row_tail(n, j, &a[r * k..(r + 1) * k], b, &mut c[r * n..(r + 1) * n]);
            }
        }
        i += ROWS;
    }
    for r in i..m {
        row_tail(n, 0, &a[r * k..(r + 1) * k], b, &mut c[r * n..(r + 1) * n]);
    }
}

/// Columns `from..n` of one output row.
#[inline]
fn row_tail<T: Real>(n: usize, from: usize, arow: &[T], b: &[T], crow: &mut [T]) {
    let crow = &mut crow[from..n];
    for (p, &aip) in arow.iter().enumerate() {
        axpy(aip, &b[p * n + from..(p + 1) * n], crow);
    }
}

/// `c[m,n] += a[m,k] · b[n,k]ᵀ`
pub fn mm_nt<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `c[m,n] += a[k,m]ᵀ · b[k,n]`
pub fn mm_tn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for r in 0..k {
        let arow = &a[r * m..(r + 1) * m];
        let brow = &b[r * n..(r + 1) * n];
        for (i, &ari) in arow.iter().enumerate() {
            if ari != T::zero() {
                axpy(ari, brow, &mut c[i * n..(i + 1) * n]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
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

    fn transpose(r: usize, c: usize, x: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = x[i * c + j];
            }
        }
        t
    }

    #[test]
    fn variants_agree_with_naive_product() {
        let (m, k, n) = (5, 11, 7);
        let a: Vec<f64> = (0..m * k).map(|i| ((i * 7 % 13) as f64 - 6.0) / 3.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| ((i * 5 % 11) as f64 - 5.0) / 4.0).collect();
        let want = naive(m, k, n, &a, &b);

        let mut c = vec![0.0; m * n];
        mm_nn(m, k, n, &a, &b, &mut c);
        assert!(c.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12));

        let bt = transpose(k, n, &b);
        let mut c = vec![0.0; m * n];
        mm_nt(m, k, n, &a, &bt, &mut c);
        assert!(c.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12));

        let at = transpose(m, k, &a);
        let mut c = vec![0.0; m * n];
        mm_tn(m, k, n, &at, &b, &mut c);
        assert!(c.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn dot_handles_remainders() {
        let a: Vec<f32> = (0..19).map(|i| i as f32).collect();
        let b = vec![1.0f32; 19];
        assert_eq!(dot(&a, &b), 171.0);
    }
}
