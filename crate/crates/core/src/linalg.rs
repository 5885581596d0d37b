//! Dense kernels shared by the model: a float abstraction over f32/f64 and a
//! bounds-checked strided gemm.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

pub trait Real: Float + Default + Debug + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + 'static {
    /// `c = alpha * a * b + beta * c` on raw strided storage.
    ///
    /// # Safety
    /// Pointers and strides must address valid, non-aliasing storage for
    /// the given shapes.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn of(x: f64) -> Self;
    fn f64(self) -> f64;
}

impl Real for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn of(x: f64) -> f64 {
        x
    }

    fn f64(self) -> f64 {
        self
    }
}

impl Real for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn of(x: f64) -> f32 {
        x as f32
    }

    fn f64(self) -> f64 {
        f64::from(self)
    }
}

/// Read-only strided matrix view.
#[derive(Clone, Copy, Debug)]
pub struct View<'a, F> {
    data: &'a [F],
    offset: usize,
    pub rows: usize,
    pub cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, F: Real> View<'a, F> {
    /// Row-major `rows x cols` matrix stored contiguously.
    pub fn new(data: &'a [F], rows: usize, cols: usize) -> Self {
        assert!(data.len() >= rows * cols, "view {}x{} over {} elements", rows, cols, data.len());
        View {
            data,
            offset: 0,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    /// Row-major matrix whose rows are `stride` apart.
    pub fn strided(data: &'a [F], rows: usize, cols: usize, stride: usize) -> Self {
        let v = View {
            data,
            offset: 0,
            rows,
            cols,
            rs: stride,
            cs: 1,
        };
        v.check();
        v
    }

    pub fn t(self) -> Self {
        View {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    pub fn block(self, row0: usize, rows: usize, col0: usize, cols: usize) -> Self {
        assert!(row0 + rows <= self.rows && col0 + cols <= self.cols);
        View {
            offset: self.offset + row0 * self.rs + col0 * self.cs,
            rows,
            cols,
            ..self
        }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
            assert!(last < self.data.len(), "view exceeds storage");
        }
    }
}

/// Mutable strided matrix view.
#[derive(Debug)]
pub struct ViewMut<'a, F> {
    data: &'a mut [F],
    offset: usize,
    pub rows: usize,
    pub cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, F: Real> ViewMut<'a, F> {
    pub fn new(data: &'a mut [F], rows: usize, cols: usize) -> Self {
        assert!(data.len() >= rows * cols, "view {}x{} over {} elements", rows, cols, data.len());
        ViewMut {
            data,
            offset: 0,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn strided(data: &'a mut [F], rows: usize, cols: usize, stride: usize) -> Self {
        let v = ViewMut {
            data,
            offset: 0,
            rows,
            cols,
            rs: stride,
            cs: 1,
        };
        if rows > 0 && cols > 0 {
            assert!((rows - 1) * stride + cols - 1 < v.data.len(), "view exceeds storage");
        }
        v
    }

    pub fn t(self) -> Self {
        ViewMut {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    pub fn block(self, row0: usize, rows: usize, col0: usize, cols: usize) -> Self {
        assert!(row0 + rows <= self.rows && col0 + cols <= self.cols);
        ViewMut {
            offset: self.offset + row0 * self.rs + col0 * self.cs,
            rows,
            cols,
            ..self
        }
    }
}

/// `c = alpha * a * b + beta * c`. When `beta` is zero `c` is not read.
pub fn gemm<F: Real>(alpha: F, a: View<'_, F>, b: View<'_, F>, beta: F, c: ViewMut<'_, F>) {
    assert_eq!(a.cols, b.rows, "inner dimensions");
    assert_eq!((a.rows, b.cols), (c.rows, c.cols), "output shape");
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    if a.cols == 0 {
        // empty product: scale c
        for i in 0..c.rows {
            for j in 0..c.cols {
                let idx = c.offset + i * c.rs + j * c.cs;
                c.data[idx] = if beta == F::zero() { F::zero() } else { beta * c.data[idx] };
            }
        }
        return;
    }
    // bounds were checked when the views were built and blocked
    unsafe {
        F::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

/// Add `bias` to every row of the row-major `rows x bias.len()` matrix.
pub fn add_row_bias<F: Real>(x: &mut [F], bias: &[F]) {
    for row in x.chunks_exact_mut(bias.len()) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// Accumulate column sums of a row-major matrix into `out`.
pub fn add_col_sums<F: Real>(x: &[F], out: &mut [F]) {
    for row in x.chunks_exact(out.len()) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                c[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_with_transpose_and_blocks() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(&a, &b, m, k, n);
        let mut c = vec![0.0; m * n];
        gemm(1.0, View::new(&a, m, k), View::new(&b, k, n), 0.0, ViewMut::new(&mut c, m, n));
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
        // c^T = b^T a^T
        let mut ct = vec![0.0; n * m];
        gemm(1.0, View::new(&b, k, n).t(), View::new(&a, m, k).t(), 0.0, ViewMut::new(&mut ct, n, m));
        for i in 0..m {
            for j in 0..n {
                assert!((ct[j * m + i] - want[i * n + j]).abs() < 1e-12);
            }
        }
        // top-left 2x2 block accumulated onto ones
        let mut cb = vec![1.0; 4];
        let av = View::new(&a, m, k).block(0, 2, 0, k);
        let bv = View::new(&b, k, n).block(0, k, 0, 2);
        gemm(1.0, av, bv, 1.0, ViewMut::new(&mut cb, 2, 2));
        assert!((cb[3] - 1.0 - want[n + 1]).abs() < 1e-12);
    }

    #[test]
    #[should_panic]
    fn out_of_bounds_view_panics() {
        let a = vec![0.0f64; 5];
        let _ = View::new(&a, 2, 3);
    }
}
