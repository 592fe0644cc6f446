//! Raw loops behind the graph ops. Matrix products go through
//! `matrixmultiply`, which is single-threaded and deterministic.

/// A strided read-only matrix view: element (i, j) lives at `i * row + j * col`.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f32],
    pub row: isize,
    pub col: isize,
}

impl<'a> MatRef<'a> {
    pub fn rows(data: &'a [f32], cols: usize) -> Self {
        Self {
            data,
            row: cols as isize,
            col: 1,
        }
    }

    /// The transpose of a row-major `rows x cols` matrix.
    pub fn transposed(data: &'a [f32], cols: usize) -> Self {
        Self {
            data,
            row: 1,
            col: cols as isize,
        }
    }

    fn fits(&self, rows: usize, cols: usize) -> bool {
        if rows == 0 || cols == 0 {
            return true;
        }
        let last = (rows as isize - 1) * self.row + (cols as isize - 1) * self.col;
        last >= 0 && (last as usize) < self.data.len()
    }
}

/// `c (m x n, row-major) = beta * c + a (m x k) * b (k x n)`.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: MatRef, b: MatRef, beta: f32, c: &mut [f32]) {
    assert!(a.fits(m, k) && b.fits(k, n) && c.len() >= m * n, "gemm operand out of bounds");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: the bounds of all three operands were checked above.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row,
            a.col,
            b.data.as_ptr(),
            b.row,
            b.col,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Plain row-major `a (m x k) * b (k x n)`.
pub fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, MatRef::rows(a, k), MatRef::rows(b, n), 0.0, &mut out);
    out
}

/// Output extent of a convolution or pooling window along one axis, or
/// `None` when the window does not fit.
pub fn conv2d_output_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || kernel == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    pub fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn out_len(&self) -> usize {
        self.oh * self.ow
    }

    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky) as isize - self.padding as isize;
        let x = (ox * self.stride + kx) as isize - self.padding as isize;
        if y < 0 || x < 0 || y >= self.height as isize || x >= self.width as isize {
            None
        } else {
            Some((y as usize, x as usize))
        }
    }
}

/// Unfolds one CHW image into a `(C*KH*KW) x (OH*OW)` patch matrix.
pub(crate) fn im2col(image: &[f32], g: &ConvGeometry, cols: &mut [f32]) {
    let p = g.out_len();
    for c in 0..g.channels {
        let plane = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        dst[oy * g.ow + ox] = match g.source(oy, ox, ky, kx) {
                            Some((y, x)) => plane[y * g.width + x],
                            None => 0.0,
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the image.
pub(crate) fn col2im(cols: &[f32], g: &ConvGeometry, image: &mut [f32]) {
    let p = g.out_len();
    for c in 0..g.channels {
        let plane = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        if let Some((y, x)) = g.source(oy, ox, ky, kx) {
                            plane[y * g.width + x] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}
