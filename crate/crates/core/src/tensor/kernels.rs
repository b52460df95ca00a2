//! Strided GEMM wrapper around `matrixmultiply`.

/// Read-only strided matrix view.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl<'a> View<'a> {
    pub fn row_major(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self {
            data,
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// `c = beta * c + a * b` where `c` is row-major `a.rows × b.cols`.
pub(crate) fn gemm(c: &mut [f64], a: View<'_>, b: View<'_>, beta: f64) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(c.len(), m * n, "gemm output size");
    assert!(a.data.len() >= m * k && b.data.len() >= k * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: the views index strictly inside their slices (checked by the
    // length assertions above for the dense layouts this module constructs),
    // and `c` is an exclusively borrowed dense m×n buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
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

    #[test]
    fn matches_triple_loop_including_transposes() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 - 2.5).collect(); // 2×3
        let b: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect(); // 3×4
        let mut c = vec![0.0; 8];
        gemm(&mut c, View::row_major(&a, 2, 3), View::row_major(&b, 3, 4), 0.0);
        for (x, y) in c.iter().zip(naive(&a, &b, 2, 3, 4)) {
            assert!((x - y).abs() < 1e-12);
        }

        // aᵀ stored as 3×2, bᵀ stored as 4×3
        let at: Vec<f64> = (0..3).flat_map(|p| (0..2).map(move |i| (p, i))).map(|(p, i)| a[i * 3 + p]).collect();
        let bt: Vec<f64> = (0..4).flat_map(|j| (0..3).map(move |p| (j, p))).map(|(j, p)| b[p * 4 + j]).collect();
        let mut c2 = vec![1.0; 8];
        gemm(&mut c2, View::row_major(&at, 3, 2).t(), View::row_major(&bt, 4, 3).t(), 1.0);
        let expect: Vec<f64> = naive(&a, &b, 2, 3, 4).iter().map(|v| v + 1.0).collect();
        for (x, y) in c2.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
