//! Raw numeric kernels shared by forward and backward rules.

/// Strided matrix view: element (i, j) lives at `data[i * rs + j * cs]`.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rs: usize,
    pub cs: usize,
}

impl<'a> MatRef<'a> {
    pub fn row_major(data: &'a [f64], cols: usize) -> Self {
        MatRef { data, rs: cols, cs: 1 }
    }

    /// Transposed view of a row-major `rows x cols` matrix.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        MatRef { data, rs: 1, cs: cols }
    }

    fn span(&self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * self.rs + (cols - 1) * self.cs + 1
        }
    }
}

/// `c (m x n, row-major) = a (m x k) * b (k x n) + beta * c`.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: MatRef, b: MatRef, beta: f64, c: &mut [f64]) {
    assert!(a.span(m, k) <= a.data.len(), "gemm: lhs out of bounds");
    assert!(b.span(k, n) <= b.data.len(), "gemm: rhs out of bounds");
    assert!(c.len() >= m * n, "gemm: output out of bounds");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c[..m * n].iter_mut() {
            *v *= beta;
        }
        return;
    }
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Row-major permutation: output axis `i` is input axis `axes[i]`.
pub(crate) fn permute(data: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return out;
    }
    let rank = out_shape.len();
    if rank == 0 {
        out.push(data[0]);
        return out;
    }
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    let inner = rank - 1;
    let inner_len = out_shape[inner];
    let inner_stride = src_strides[inner];
    loop {
        for j in 0..inner_len {
            out.push(data[offset + j * inner_stride]);
        }
        // advance the outer multi-index
        let mut axis = inner;
        loop {
            if axis == 0 {
                return out;
            }
            axis -= 1;
            idx[axis] += 1;
            offset += src_strides[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            offset -= src_strides[axis] * idx[axis];
            idx[axis] = 0;
        }
    }
}

pub(crate) fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn cols(&self) -> usize {
        self.oh * self.ow
    }
}

/// Output size of a strided, zero-padded convolution along one axis, or
/// `None` when the kernel does not fit the padded input.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || kernel == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Unfold one `(c, h, w)` image into a `(c*kh*kw, oh*ow)` column matrix.
pub(crate) fn im2col(img: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let ncols = g.cols();
    for ch in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ch * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.oh {
                    let y = (oy * g.stride + ki) as isize - g.pad as isize;
                    for ox in 0..g.ow {
                        let x = (ox * g.stride + kj) as isize - g.pad as isize;
                        dst[oy * g.ow + ox] =
                            if y >= 0 && (y as usize) < g.h && x >= 0 && (x as usize) < g.w {
                                img[(ch * g.h + y as usize) * g.w + x as usize]
                            } else {
                                0.0
                            };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into an image gradient.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, img: &mut [f64]) {
    let ncols = g.cols();
    for ch in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ch * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.oh {
                    let y = (oy * g.stride + ki) as isize - g.pad as isize;
                    if y < 0 || y as usize >= g.h {
                        continue;
                    }
                    for ox in 0..g.ow {
                        let x = (ox * g.stride + kj) as isize - g.pad as isize;
                        if x >= 0 && (x as usize) < g.w {
                            img[(ch * g.h + y as usize) * g.w + x as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}
