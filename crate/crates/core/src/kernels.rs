//! Raw fp32 kernels shared by the eager tensor functions and the tape ops.

use alloc::vec::Vec;

pub(crate) const NORM_EPS: f32 = 1e-5;

/// Strided read-only matrix view.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    data: &'a [f32],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a> MatRef<'a> {
    pub(crate) fn new(data: &'a [f32], rows: usize, cols: usize) -> Self {
        Self::strided(data, rows, cols, cols, 1)
    }

    pub(crate) fn strided(data: &'a [f32], rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        if rows > 0 && cols > 0 {
            assert!((rows - 1) * rs + (cols - 1) * cs < data.len(), "matrix view out of bounds");
        }
        MatRef { data, rows, cols, rs, cs }
    }

    pub(crate) fn t(self) -> Self {
        MatRef {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// Strided mutable matrix view.
pub(crate) struct MatMut<'a> {
    data: &'a mut [f32],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a> MatMut<'a> {
    pub(crate) fn new(data: &'a mut [f32], rows: usize, cols: usize) -> Self {
        Self::strided(data, rows, cols, cols, 1)
    }

    pub(crate) fn strided(data: &'a mut [f32], rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        if rows > 0 && cols > 0 {
            assert!((rows - 1) * rs + (cols - 1) * cs < data.len(), "matrix view out of bounds");
        }
        MatMut { data, rows, cols, rs, cs }
    }
}

/// `c = alpha * a * b + beta * c`. With `beta == 0` the previous contents of
/// `c` are ignored.
pub(crate) fn gemm(alpha: f32, a: MatRef<'_>, b: MatRef<'_>, beta: f32, c: MatMut<'_>) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert_eq!(a.rows, c.rows, "gemm output rows");
    assert_eq!(b.cols, c.cols, "gemm output cols");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let x = &mut c.data[i * c.rs + j * c.cs];
                *x = if beta == 0.0 { 0.0 } else { beta * *x };
            }
        }
        return;
    }
    // SAFETY: every view was bounds-checked on construction and the
    // dimensions were matched above, so all strided accesses stay inside
    // the backing slices. `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr(),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for x in row.iter_mut() {
        *x = libm::expf(*x - max);
        sum += *x;
    }
    let inv = 1.0 / sum;
    for x in row.iter_mut() {
        *x *= inv;
    }
}

/// Backward of a softmax row given its output `p` and upstream `dp`.
pub(crate) fn softmax_backward_row(p: &[f32], dp: &[f32], dx: &mut [f32]) {
    let dot: f32 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
    for ((g, &pi), &dpi) in dx.iter_mut().zip(p).zip(dp) {
        *g += pi * (dpi - dot);
    }
}

/// Returns the reciprocal rms of `row`.
pub(crate) fn inv_rms(row: &[f32]) -> f32 {
    let ms = row.iter().map(|x| x * x).sum::<f32>() / row.len() as f32;
    1.0 / libm::sqrtf(ms + NORM_EPS)
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + libm::expf(-x))
}

pub(crate) fn silu(x: f32) -> f32 {
    x * sigmoid(x)
}

pub(crate) fn silu_grad(x: f32) -> f32 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Rotation angle per pair for a head of width `d_head`.
pub(crate) fn rope_frequencies(d_head: usize, base: f32) -> Vec<f32> {
    (0..d_head / 2)
        .map(|i| libm::powf(base, -2.0 * i as f32 / d_head as f32))
        .collect()
}

/// [`rope_rotate`] over every head of `[rows, width]` data, computing each
/// position's angles once.
pub(crate) fn rope_rows(data: &mut [f32], width: usize, d_head: usize, positions: &[usize], freqs: &[f32], sign: f32) {
    let mut sc = Vec::with_capacity(freqs.len());
    for (row, &pos) in data.chunks_mut(width).zip(positions) {
        sc.clear();
        sc.extend(freqs.iter().map(|&f| {
            let angle = pos as f32 * f;
            (libm::sinf(angle) * sign, libm::cosf(angle))
        }));
        for head in row.chunks_mut(d_head) {
            for (i, &(s, c)) in sc.iter().enumerate() {
                let (a, b) = (head[2 * i], head[2 * i + 1]);
                head[2 * i] = a * c - b * s;
                head[2 * i + 1] = a * s + b * c;
            }
        }
    }
}

/// Rotates consecutive pairs `(x[2i], x[2i+1])` of one head row by
/// `pos * freq[i]`. `sign = -1` applies the inverse rotation.
pub(crate) fn rope_rotate(row: &mut [f32], pos: usize, freqs: &[f32], sign: f32) {
    for (i, &f) in freqs.iter().enumerate() {
        let angle = pos as f32 * f;
        let (s, c) = (libm::sinf(angle) * sign, libm::cosf(angle));
        let (a, b) = (row[2 * i], row[2 * i + 1]);
        row[2 * i] = a * c - b * s;
        row[2 * i + 1] = a * s + b * c;
    }
}
