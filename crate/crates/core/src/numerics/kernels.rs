//! Strided dense kernels shared by the tape ops.

/// Read-only strided matrix view into a flat buffer.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f64],
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> View<'a> {
    pub fn rows(data: &'a [f64], offset: usize, row_stride: usize) -> Self {
        View {
            data,
            offset,
            rs: row_stride,
            cs: 1,
        }
    }

    /// Transposed view of a row-major block.
    pub fn t(data: &'a [f64], offset: usize, row_stride: usize) -> Self {
        View {
            data,
            offset,
            rs: 1,
            cs: row_stride,
        }
    }

    fn check(&self, rows: usize, cols: usize) {
        if rows > 0 && cols > 0 {
            let last = self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs;
            assert!(last < self.data.len(), "strided view out of bounds");
        }
    }
}

/// `c = alpha·a·b + beta·c` for an `m×k` view `a`, `k×n` view `b` and an
/// `m×n` output block at `c_offset` with row stride `c_rs`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: View<'_>,
    b: View<'_>,
    beta: f64,
    c: &mut [f64],
    c_offset: usize,
    c_rs: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    a.check(m, k);
    b.check(k, n);
    let last = c_offset + (m - 1) * c_rs + (n - 1);
    assert!(last < c.len(), "gemm output out of bounds");
    // SAFETY: every index touched by the kernel lies within the bounds
    // checked above, and `c` is uniquely borrowed so it cannot alias `a`/`b`.
    unsafe {
        matrixmultiply::dgemm(
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
            c.as_mut_ptr().add(c_offset),
            c_rs as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_with_transposes() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 - 2.0).collect(); // 2×3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5).collect(); // 3×4
        let mut c = vec![0.0; 8];
        gemm(2, 3, 4, 1.0, View::rows(&a, 0, 3), View::rows(&b, 0, 4), 0.0, &mut c, 0, 4);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|p| a[i * 3 + p] * b[p * 4 + j]).sum();
                assert_eq!(c[i * 4 + j], want);
            }
        }
        // aᵀ·a as a 3×3 product through a transposed view.
        let mut g = vec![0.0; 9];
        gemm(3, 2, 3, 1.0, View::t(&a, 0, 3), View::rows(&a, 0, 3), 0.0, &mut g, 0, 3);
        let want: f64 = (0..2).map(|p| a[p * 3] * a[p * 3 + 2]).sum();
        assert_eq!(g[2], want);
    }
}
