//! Dense kernels over channel-major `[C][H][W]` buffers.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub};

/// Scalar type the network is generic over: `f32` for training and
/// inference, `f64` for gradient checking.
pub trait Float:
    Copy
    + Send
    + Sync
    + Default
    + Debug
    + PartialOrd
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + MulAssign
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn sqrt(self) -> Self;

    /// `C ← alpha·A·B + beta·C` with arbitrary row/column strides.
    ///
    /// # Safety
    /// Every index reachable through the given shapes and strides must lie
    /// inside the corresponding slice.
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
}

impl Float for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
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
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Float for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
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
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Row-major matrix view used by [`gemm`]: `rows × cols`, optionally
/// transposed.
#[derive(Clone, Copy)]
pub struct Mat<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a, T> Mat<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    /// The transpose of a stored `rows × cols` matrix.
    pub fn t(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            transposed: true,
        }
    }

    fn shape(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `C ← A·B + beta·C` for row-major `C` of shape `m × n`.
pub fn gemm<T: Float>(a: Mat<T>, b: Mat<T>, beta: T, c: &mut [T]) {
    let (m, k) = a.shape();
    let (k2, n) = b.shape();
    assert_eq!(k, k2, "inner dimensions differ");
    assert!(a.data.len() >= a.rows * a.cols && b.data.len() >= b.rows * b.cols);
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: shapes and strides were checked against the slice lengths above.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::ONE,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

/// Unfolds 3×3 zero-padded neighbourhoods: `col[(ci·9 + ky·3 + kx)][y·w + x]`.
pub fn im2col3<T: Float>(x: &[T], c: usize, h: usize, w: usize, col: &mut [T]) {
    let hw = h * w;
    debug_assert_eq!(col.len(), c * 9 * hw);
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.fill(T::ZERO);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            dst[0] = T::ZERO;
                            dst[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => dst.copy_from_slice(src),
                        _ => {
                            dst[..w - 1].copy_from_slice(&src[1..]);
                            dst[w - 1] = T::ZERO;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col3`]: accumulates `col` back into `dx`.
pub fn col2im3<T: Float>(col: &[T], c: usize, h: usize, w: usize, dx: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            for i in 1..w {
                                dst[i - 1] += src[i];
                            }
                        }
                        1 => {
                            for i in 0..w {
                                dst[i] += src[i];
                            }
                        }
                        _ => {
                            for i in 0..w - 1 {
                                dst[i + 1] += src[i];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2×2 average pooling; `h` and `w` must be even.
pub fn avg_pool2<T: Float>(x: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64(0.25);
    let mut out = vec![T::ZERO; c * oh * ow];
    for ci in 0..c {
        let src = &x[ci * h * w..(ci + 1) * h * w];
        let dst = &mut out[ci * oh * ow..(ci + 1) * oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                let a = src[2 * y * w + 2 * xx];
                let b = src[2 * y * w + 2 * xx + 1];
                let cc = src[(2 * y + 1) * w + 2 * xx];
                let d = src[(2 * y + 1) * w + 2 * xx + 1];
                dst[y * ow + xx] = (a + b + cc + d) * quarter;
            }
        }
    }
    out
}

/// Adjoint of [`avg_pool2`], accumulated into `dx` of the unpooled shape.
pub fn avg_pool2_backward<T: Float>(dy: &[T], c: usize, h: usize, w: usize, dx: &mut [T]) {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64(0.25);
    for ci in 0..c {
        let src = &dy[ci * oh * ow..(ci + 1) * oh * ow];
        let dst = &mut dx[ci * h * w..(ci + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                dst[y * w + xx] += src[(y / 2) * ow + xx / 2] * quarter;
            }
        }
    }
}

/// Nearest-neighbour 2× upsampling of `[c][h][w]`.
pub fn upsample2<T: Float>(x: &[T], c: usize, h: usize, w: usize, out: &mut [T]) {
    let (oh, ow) = (2 * h, 2 * w);
    for ci in 0..c {
        let src = &x[ci * h * w..(ci + 1) * h * w];
        let dst = &mut out[ci * oh * ow..(ci + 1) * oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                dst[y * ow + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
}

/// Adjoint of [`upsample2`]: sums each 2×2 block. `h`, `w` are the small
/// (pre-upsampling) dimensions.
pub fn upsample2_backward<T: Float>(dy: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = vec![T::ZERO; c * h * w];
    for ci in 0..c {
        let src = &dy[ci * oh * ow..(ci + 1) * oh * ow];
        let dst = &mut dx[ci * h * w..(ci + 1) * h * w];
        for y in 0..oh {
            for xx in 0..ow {
                dst[(y / 2) * w + xx / 2] += src[y * ow + xx];
            }
        }
    }
    dx
}

pub fn relu_inplace<T: Float>(x: &mut [T]) {
    for v in x {
        if !(*v > T::ZERO) {
            *v = T::ZERO;
        }
    }
}

/// Zeroes `dy` wherever the ReLU output `y` was not positive.
pub fn relu_backward<T: Float>(y: &[T], dy: &mut [T]) {
    for (g, v) in dy.iter_mut().zip(y) {
        if !(*v > T::ZERO) {
            *g = T::ZERO;
        }
    }
}

/// 3×3 same-padding convolution: `y[co] = Σ w[co][ci·9+k]·col + b[co]`.
pub fn conv3_forward<T: Float>(
    x: &[T],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[T],
    bias: &[T],
    cout: usize,
) -> Vec<T> {
    let hw = h * w;
    let mut col = vec![T::ZERO; cin * 9 * hw];
    im2col3(x, cin, h, w, &mut col);
    let mut y = vec![T::ZERO; cout * hw];
    for co in 0..cout {
        y[co * hw..(co + 1) * hw].fill(bias[co]);
    }
    gemm(
        Mat::new(weight, cout, cin * 9),
        Mat::new(&col, cin * 9, hw),
        T::ONE,
        &mut y,
    );
    y
}

/// Gradients of [`conv3_forward`]. Accumulates into `dw`/`db`; returns the
/// input gradient when `need_dx`.
#[allow(clippy::too_many_arguments)]
pub fn conv3_backward<T: Float>(
    x: &[T],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[T],
    cout: usize,
    dy: &[T],
    dw: &mut [T],
    db: &mut [T],
    need_dx: bool,
) -> Option<Vec<T>> {
    let hw = h * w;
    let mut col = vec![T::ZERO; cin * 9 * hw];
    im2col3(x, cin, h, w, &mut col);
    gemm(
        Mat::new(dy, cout, hw),
        Mat::t(&col, cin * 9, hw),
        T::ONE,
        dw,
    );
    for co in 0..cout {
        let mut s = T::ZERO;
        for v in &dy[co * hw..(co + 1) * hw] {
            s += *v;
        }
        db[co] += s;
    }
    if !need_dx {
        return None;
    }
    gemm(
        Mat::t(weight, cout, cin * 9),
        Mat::new(dy, cout, hw),
        T::ZERO,
        &mut col,
    );
    let mut dx = vec![T::ZERO; cin * hw];
    col2im3(&col, cin, h, w, &mut dx);
    Some(dx)
}

/// 1×1 convolution: `y = W·x + b` with `W` of shape `cout × cin`.
pub fn conv1_forward<T: Float>(
    x: &[T],
    cin: usize,
    hw: usize,
    weight: &[T],
    bias: &[T],
    cout: usize,
) -> Vec<T> {
    let mut y = vec![T::ZERO; cout * hw];
    for co in 0..cout {
        y[co * hw..(co + 1) * hw].fill(bias[co]);
    }
    gemm(
        Mat::new(weight, cout, cin),
        Mat::new(x, cin, hw),
        T::ONE,
        &mut y,
    );
    y
}

#[allow(clippy::too_many_arguments)]
pub fn conv1_backward<T: Float>(
    x: &[T],
    cin: usize,
    hw: usize,
    weight: &[T],
    cout: usize,
    dy: &[T],
    dw: &mut [T],
    db: &mut [T],
) -> Vec<T> {
    gemm(Mat::new(dy, cout, hw), Mat::t(x, cin, hw), T::ONE, dw);
    for co in 0..cout {
        let mut s = T::ZERO;
        for v in &dy[co * hw..(co + 1) * hw] {
            s += *v;
        }
        db[co] += s;
    }
    let mut dx = vec![T::ZERO; cin * hw];
    gemm(
        Mat::t(weight, cout, cin),
        Mat::new(dy, cout, hw),
        T::ZERO,
        &mut dx,
    );
    dx
}
