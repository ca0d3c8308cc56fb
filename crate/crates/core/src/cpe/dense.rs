//! Small dense symmetric-positive-definite kernels on row-major slices.

/// In-place lower Cholesky factor of the `n x n` matrix `a`. Only the lower
/// triangle is read; the strict upper triangle is zeroed. Returns `false` if
/// a non-positive pivot is met.
pub(crate) fn cholesky_in_place(a: &mut [f64], n: usize) -> bool {
    for j in 0..n {
        let mut diag = a[j * n + j];
        for p in 0..j {
            diag -= a[j * n + p] * a[j * n + p];
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return false;
        }
        let ljj = diag.sqrt();
        a[j * n + j] = ljj;
        for i in j + 1..n {
            let mut v = a[i * n + j];
            for p in 0..j {
                v -= a[i * n + p] * a[j * n + p];
            }
            a[i * n + j] = v / ljj;
        }
        for i in 0..j {
            a[i * n + j] = 0.0;
        }
    }
    true
}

/// Solves `L Y = B` in place for `B` with `cols` columns (row-major `n x cols`).
pub(crate) fn forward_substitute(l: &[f64], n: usize, b: &mut [f64], cols: usize) {
    for i in 0..n {
        let lii = l[i * n + i];
        for p in 0..i {
            let lip = l[i * n + p];
            if lip != 0.0 {
                for c in 0..cols {
                    b[i * cols + c] -= lip * b[p * cols + c];
                }
            }
        }
        for c in 0..cols {
            b[i * cols + c] /= lii;
        }
    }
}

/// Solves `L^T X = B` in place.
pub(crate) fn backward_substitute(l: &[f64], n: usize, b: &mut [f64], cols: usize) {
    for i in (0..n).rev() {
        let lii = l[i * n + i];
        for p in i + 1..n {
            let lpi = l[p * n + i];
            if lpi != 0.0 {
                for c in 0..cols {
                    b[i * cols + c] -= lpi * b[p * cols + c];
                }
            }
        }
        for c in 0..cols {
            b[i * cols + c] /= lii;
        }
    }
}

/// `a <- (a + a^T) / 2`.
pub(crate) fn symmetrize(a: &mut [f64], n: usize) {
    for i in 0..n {
        for j in i + 1..n {
            let v = 0.5 * (a[i * n + j] + a[j * n + i]);
            a[i * n + j] = v;
            a[j * n + i] = v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_spd_system() {
        let a = [4.0, 2.0, 0.6, 2.0, 5.0, 1.0, 0.6, 1.0, 3.0];
        let mut l = a;
        assert!(cholesky_in_place(&mut l, 3));
        let x_true = [1.0, -2.0, 0.5, 3.0, 0.0, 1.0];
        let mut b = vec![0.0; 6];
        for i in 0..3 {
            for c in 0..2 {
                b[i * 2 + c] = (0..3).map(|p| a[i * 3 + p] * x_true[p * 2 + c]).sum();
            }
        }
        forward_substitute(&l, 3, &mut b, 2);
        backward_substitute(&l, 3, &mut b, 2);
        for (x, t) in b.iter().zip(&x_true) {
            assert!((x - t).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_indefinite() {
        let mut a = [1.0, 2.0, 2.0, 1.0];
        assert!(!cholesky_in_place(&mut a, 2));
    }
}
