//! Bounds-checked strided matrix views over `matrixmultiply`'s GEMM kernels.

use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug)]
pub struct MatRef<'a, T> {
    data: &'a [T],
    offset: usize,
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, T> MatRef<'a, T> {
    pub fn new(data: &'a [T], offset: usize, rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        let view = MatRef {
            data,
            offset,
            rows,
            cols,
            rs,
            cs,
        };
        assert!(view.fits(data.len()), "matrix view exceeds its buffer");
        view
    }

    pub fn row_major(data: &'a [T], rows: usize, cols: usize) -> Self {
        MatRef::new(data, 0, rows, cols, cols, 1)
    }

    pub fn t(self) -> Self {
        MatRef {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    fn fits(&self, len: usize) -> bool {
        self.rows == 0
            || self.cols == 0
            || self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs < len
    }
}

#[derive(Debug)]
pub struct MatMut<'a, T> {
    data: &'a mut [T],
    offset: usize,
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, T> MatMut<'a, T> {
    pub fn new(data: &'a mut [T], offset: usize, rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        let len = data.len();
        let view = MatMut {
            data,
            offset,
            rows,
            cols,
            rs,
            cs,
        };
        assert!(
            rows == 0 || cols == 0 || offset + (rows - 1) * rs + (cols - 1) * cs < len,
            "matrix view exceeds its buffer"
        );
        view
    }

    pub fn row_major(data: &'a mut [T], rows: usize, cols: usize) -> Self {
        MatMut::new(data, 0, rows, cols, cols, 1)
    }
}

/// `c = alpha * a * b + beta * c`. When `beta` is zero `c` is overwritten.
pub fn gemm<T: Scalar>(alpha: T, a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, c: MatMut<'_, T>) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    assert_eq!((a.rows, b.cols), (c.rows, c.cols), "output shape differs");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let v = &mut c.data[c.offset + i * c.rs + j * c.cs];
                *v = if beta == T::zero() { T::zero() } else { beta * *v };
            }
        }
        return;
    }
    // SAFETY: all three views were bounds-checked on construction and `c` is
    // an exclusive borrow, so it cannot alias `a` or `b`.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
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
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_naive_product_with_transposes() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 * 0.5 - 1.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect(); // 3x4
        let mut c = vec![0.0; 8];
        gemm(1.0, MatRef::row_major(&a, 2, 3), MatRef::row_major(&b, 3, 4), 0.0, MatMut::row_major(&mut c, 2, 4));
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|k| a[i * 3 + k] * b[k * 4 + j]).sum();
                assert!((c[i * 4 + j] - want).abs() < 1e-12);
            }
        }
        // (b^T a^T) = (a b)^T
        let mut ct = vec![0.0; 8];
        gemm(
            1.0,
            MatRef::row_major(&b, 3, 4).t(),
            MatRef::row_major(&a, 2, 3).t(),
            0.0,
            MatMut::row_major(&mut ct, 4, 2),
        );
        for i in 0..2 {
            for j in 0..4 {
                assert!((ct[j * 2 + i] - c[i * 4 + j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    #[should_panic]
    fn out_of_bounds_view_panics() {
        let a = vec![0.0f32; 5];
        let _ = MatRef::row_major(&a, 2, 3);
    }
}
