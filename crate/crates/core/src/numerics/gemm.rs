//! Row-major matrix product wrapper over `matrixmultiply::dgemm`.

/// Operand layout for [`matmul`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Layout {
    /// Stored as the logical matrix, row-major.
    Normal,
    /// Stored as the transpose of the logical matrix, row-major.
    Transposed,
}

const SHORT_ROWS: usize = 16;

/// Strided read-only view of a logical matrix inside a slice.
#[derive(Debug, Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub offset: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f64], offset: usize, row_stride: usize, col_stride: usize) -> Self {
        MatRef {
            data,
            offset,
            row_stride,
            col_stride,
        }
    }

    fn dense(data: &'a [f64], rows: usize, cols: usize, layout: Layout) -> Self {
        match layout {
            Layout::Normal => MatRef::new(data, 0, cols, 1),
            Layout::Transposed => MatRef::new(data, 0, 1, rows),
        }
    }
}

/// Strided mutable view of the output matrix.
#[derive(Debug)]
pub(crate) struct MatMut<'a> {
    pub data: &'a mut [f64],
    pub offset: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

fn last_index(offset: usize, rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    offset + (rows - 1) * rs + (cols - 1) * cs
}

/// `c = a·b` (or `c += a·b` when `accumulate`), with `a` logically m×k and `b` logically k×n.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_layout: Layout,
    b: &[f64],
    b_layout: Layout,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "lhs size");
    assert_eq!(b.len(), k * n, "rhs size");
    assert_eq!(c.len(), m * n, "output size");
    let c = MatMut {
        data: c,
        offset: 0,
        row_stride: n,
        col_stride: 1,
    };
    gemm(m, k, n, MatRef::dense(a, m, k, a_layout), MatRef::dense(b, k, n, b_layout), c, accumulate);
}

/// Strided product `c (+)= a·b`. The output view must address distinct
/// elements for distinct (row, col) pairs.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: MatRef, b: MatRef, c: MatMut, accumulate: bool) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(
        last_index(c.offset, m, n, c.row_stride, c.col_stride) < c.data.len(),
        "output view out of bounds"
    );
    if k == 0 {
        if !accumulate {
            for i in 0..m {
                for j in 0..n {
                    c.data[c.offset + i * c.row_stride + j * c.col_stride] = 0.0;
                }
            }
        }
        return;
    }
    assert!(last_index(a.offset, m, k, a.row_stride, a.col_stride) < a.data.len(), "lhs view out of bounds");
    assert!(last_index(b.offset, k, n, b.row_stride, b.col_stride) < b.data.len(), "rhs view out of bounds");
    let beta = if accumulate { 1.0 } else { 0.0 };
    let stride = |s: usize| s as isize;
    // The packing kernels are faster with the long dimension as rows, so a
    // short, wide product is evaluated as its transpose: cᵀ = bᵀ·aᵀ.
    let transpose = m < n && m <= SHORT_ROWS;
    // SAFETY: the asserts above guarantee every index addressed through the
    // given offsets and strides stays inside the three slices.
    unsafe {
        let (pa, pb) = (a.data.as_ptr().add(a.offset), b.data.as_ptr().add(b.offset));
        let pc = c.data.as_mut_ptr().add(c.offset);
        if transpose {
            matrixmultiply::dgemm(
                n,
                k,
                m,
                1.0,
                pb,
                stride(b.col_stride),
                stride(b.row_stride),
                pa,
                stride(a.col_stride),
                stride(a.row_stride),
                beta,
                pc,
                stride(c.col_stride),
                stride(c.row_stride),
            );
        } else {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                pa,
                stride(a.row_stride),
                stride(a.col_stride),
                pb,
                stride(b.row_stride),
                stride(b.col_stride),
                beta,
                pc,
                stride(c.row_stride),
                stride(c.col_stride),
            );
        }
    }
}
