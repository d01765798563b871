//! 2-D convolution via im2col + GEMM, and the 1-D cross-channel convolution
//! used by spectral attention.

use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Zero padding and stride of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub pad: (usize, usize),
    pub stride: (usize, usize),
}

impl ConvGeometry {
    pub const VALID: Self = Self {
        pad: (0, 0),
        stride: (1, 1),
    };

    /// Stride 1 with `(k - 1) / 2` padding, which keeps H and W for odd `k`.
    pub fn same(kh: usize, kw: usize) -> Self {
        Self {
            pad: ((kh - 1) / 2, (kw - 1) / 2),
            stride: (1, 1),
        }
    }

    pub fn output_extent(&self, h: usize, w: usize, kh: usize, kw: usize) -> Option<(usize, usize)> {
        let ph = h + 2 * self.pad.0;
        let pw = w + 2 * self.pad.1;
        if self.stride.0 == 0 || self.stride.1 == 0 || ph < kh || pw < kw {
            return None;
        }
        Some(((ph - kh) / self.stride.0 + 1, (pw - kw) / self.stride.1 + 1))
    }
}

/// Static description of one conv2d call.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Conv2dDims {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub geom: ConvGeometry,
}

impl Conv2dDims {
    fn rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn plane(&self) -> usize {
        self.ho * self.wo
    }

    fn cols(&self) -> usize {
        self.n * self.plane()
    }

    /// Source pixel for output `(oy, ox)` and kernel tap `(i, j)`, if inside the image.
    #[inline]
    fn source(&self, oy: usize, ox: usize, i: usize, j: usize) -> Option<(usize, usize)> {
        let y = (oy * self.geom.stride.0 + i).checked_sub(self.geom.pad.0)?;
        let x = (ox * self.geom.stride.1 + j).checked_sub(self.geom.pad.1)?;
        (y < self.h && x < self.w).then_some((y, x))
    }
}

/// Unfolds `x` into a `[C_in*kh*kw, N*Ho*Wo]` column matrix.
pub(crate) fn im2col<T: Scalar>(x: &[T], d: &Conv2dDims) -> Vec<T> {
    let (plane, ncols) = (d.plane(), d.cols());
    let mut cols = vec![T::zero(); d.rows() * ncols];
    for c in 0..d.c_in {
        for i in 0..d.kh {
            for j in 0..d.kw {
                let row = (c * d.kh + i) * d.kw + j;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for n in 0..d.n {
                    let src = &x[(n * d.c_in + c) * d.h * d.w..][..d.h * d.w];
                    for oy in 0..d.ho {
                        for ox in 0..d.wo {
                            if let Some((y, xx)) = d.source(oy, ox, i, j) {
                                dst[n * plane + oy * d.wo + ox] = src[y * d.w + xx];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], d: &Conv2dDims, dx: &mut [T]) {
    let (plane, ncols) = (d.plane(), d.cols());
    for c in 0..d.c_in {
        for i in 0..d.kh {
            for j in 0..d.kw {
                let row = (c * d.kh + i) * d.kw + j;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for n in 0..d.n {
                    let dst = &mut dx[(n * d.c_in + c) * d.h * d.w..][..d.h * d.w];
                    for oy in 0..d.ho {
                        for ox in 0..d.wo {
                            if let Some((y, xx)) = d.source(oy, ox, i, j) {
                                dst[y * d.w + xx] = dst[y * d.w + xx] + src[n * plane + oy * d.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_dims(
    x_shape: &[usize],
    w_shape: &[usize],
    bias_len: Option<usize>,
    geom: ConvGeometry,
) -> Result<Conv2dDims> {
    let (n, c_in, h, w) = crate::tensor::dims4(x_shape, "conv2d")?;
    let (c_out, wc, kh, kw) = crate::tensor::dims4(w_shape, "conv2d kernel")?;
    if wc != c_in {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: x_shape.to_vec(),
            rhs: w_shape.to_vec(),
        });
    }
    if let Some(len) = bias_len {
        if len != c_out {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                lhs: w_shape.to_vec(),
                rhs: vec![len],
            });
        }
    }
    let (ho, wo) = geom
        .output_extent(h, w, kh, kw)
        .ok_or_else(|| Error::ShapeMismatch {
            op: "conv2d (kernel larger than padded input)",
            lhs: x_shape.to_vec(),
            rhs: w_shape.to_vec(),
        })?;
    Ok(Conv2dDims {
        n,
        c_in,
        h,
        w,
        c_out,
        kh,
        kw,
        ho,
        wo,
        geom,
    })
}

/// Returns the output `[N, C_out, Ho, Wo]` and the column matrix for backward.
pub(crate) fn conv2d_forward<T: Scalar>(
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    d: &Conv2dDims,
) -> (Vec<T>, Vec<T>) {
    let (rows, plane, ncols) = (d.rows(), d.plane(), d.cols());
    let cols = im2col(x, d);
    let mut prod = vec![T::zero(); d.c_out * ncols];
    T::gemm(
        d.c_out,
        rows,
        ncols,
        T::one(),
        weight,
        (rows, 1),
        &cols,
        (ncols, 1),
        T::zero(),
        &mut prod,
        (ncols, 1),
    );
    let mut out = vec![T::zero(); d.n * d.c_out * plane];
    for co in 0..d.c_out {
        let b = bias.map_or(T::zero(), |b| b[co]);
        for n in 0..d.n {
            let src = &prod[co * ncols + n * plane..][..plane];
            let dst = &mut out[(n * d.c_out + co) * plane..][..plane];
            for (o, &s) in dst.iter_mut().zip(src) {
                *o = s + b;
            }
        }
    }
    (out, cols)
}

pub(crate) struct Conv2dGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    dy: &[T],
    weight: &[T],
    cols: &[T],
    d: &Conv2dDims,
    need_input: bool,
) -> Conv2dGrads<T> {
    let (rows, plane, ncols) = (d.rows(), d.plane(), d.cols());
    // [N, C_out, P] -> [C_out, N*P]
    let mut dyp = vec![T::zero(); d.c_out * ncols];
    for n in 0..d.n {
        for co in 0..d.c_out {
            dyp[co * ncols + n * plane..][..plane]
                .copy_from_slice(&dy[(n * d.c_out + co) * plane..][..plane]);
        }
    }
    let bias = (0..d.c_out)
        .map(|co| dyp[co * ncols..(co + 1) * ncols].iter().copied().sum())
        .collect();
    let mut dw = vec![T::zero(); d.c_out * rows];
    T::gemm(
        d.c_out,
        ncols,
        rows,
        T::one(),
        &dyp,
        (ncols, 1),
        cols,
        (1, ncols),
        T::zero(),
        &mut dw,
        (rows, 1),
    );
    let input = need_input.then(|| {
        let mut dcols = vec![T::zero(); rows * ncols];
        T::gemm(
            rows,
            d.c_out,
            ncols,
            T::one(),
            weight,
            (1, rows),
            &dyp,
            (ncols, 1),
            T::zero(),
            &mut dcols,
            (ncols, 1),
        );
        let mut dx = vec![T::zero(); d.n * d.c_in * d.h * d.w];
        col2im(&dcols, d, &mut dx);
        dx
    });
    Conv2dGrads {
        input,
        weight: dw,
        bias,
    }
}

/// Checks the kernel length of a cross-channel 1-D convolution over `channels` values.
pub fn check_conv1d_kernel(k: usize, channels: usize) -> Result<()> {
    if k == 0 || k.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "cross-channel kernel length must be odd, got {k}"
        )));
    }
    if k > 2 * channels - 1 {
        return Err(Error::InvalidArgument(format!(
            "cross-channel kernel length {k} exceeds padded extent {} of {channels} channels",
            2 * channels - 1
        )));
    }
    Ok(())
}

/// Zero-padded 1-D convolution along the channel axis of `[N, C]` rows.
pub(crate) fn conv1d_forward<T: Scalar>(x: &[T], n: usize, c: usize, w: &[T], bias: T) -> Vec<T> {
    let half = (w.len() - 1) / 2;
    let mut out = vec![bias; n * c];
    for s in 0..n {
        let row = &x[s * c..(s + 1) * c];
        for (o, dst) in out[s * c..(s + 1) * c].iter_mut().enumerate() {
            for (t, &wt) in w.iter().enumerate() {
                if let Some(src) = (o + t).checked_sub(half).filter(|&i| i < c) {
                    *dst = *dst + wt * row[src];
                }
            }
        }
    }
    out
}

/// Returns `(dx, dw, dbias)`.
pub(crate) fn conv1d_backward<T: Scalar>(
    dy: &[T],
    x: &[T],
    n: usize,
    c: usize,
    w: &[T],
) -> (Vec<T>, Vec<T>, T) {
    let half = (w.len() - 1) / 2;
    let mut dx = vec![T::zero(); n * c];
    let mut dw = vec![T::zero(); w.len()];
    let mut db = T::zero();
    for s in 0..n {
        for o in 0..c {
            let g = dy[s * c + o];
            db = db + g;
            for (t, &wt) in w.iter().enumerate() {
                if let Some(src) = (o + t).checked_sub(half).filter(|&i| i < c) {
                    dx[s * c + src] = dx[s * c + src] + g * wt;
                    dw[t] = dw[t] + g * x[s * c + src];
                }
            }
        }
    }
    (dx, dw, db)
}
