//! Direct convolution kernels: im2col + GEMM forward, col2im backward.
//!
//! The GEMMs go through `ndarray::dot`, which dispatches to
//! `matrixmultiply` for `f32`/`f64`.

use ndarray::{Array1, Array2, Array3, Array4, ArrayView3, ArrayView4, Axis, s};

use crate::num::Scalar;

/// Output spatial size for one axis (floor convention).
pub fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    assert!(
        input + 2 * pad >= kernel,
        "conv kernel {kernel} larger than padded input {input}+2*{pad}"
    );
    (input + 2 * pad - kernel) / stride + 1
}

/// Unfolds `x` `[C, H, W]` into a `[C*kh*kw, Ho*Wo]` patch matrix.
fn im2col<T: Scalar>(
    x: &ArrayView3<T>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array2<T> {
    let (c, h, w) = x.dim();
    let mut col = Array2::<T>::zeros((c * kh * kw, ho * wo));
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row_idx = (ci * kh + ky) * kw + kx;
                let mut row = col.row_mut(row_idx);
                let row = row.as_slice_mut().expect("col is standard layout");
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let xrow = x.slice(s![ci, iy as usize, ..]);
                    let xrow = xrow.as_slice().expect("x is standard layout");
                    let base = oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            row[base + ox] = xrow[ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Folds a `[C*kh*kw, Ho*Wo]` patch-gradient matrix back onto `[C, H, W]`.
fn col2im<T: Scalar>(
    gcol: &Array2<T>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array3<T> {
    let mut gx = Array3::<T>::zeros((c, h, w));
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row_idx = (ci * kh + ky) * kw + kx;
                let grow = gcol.row(row_idx);
                let grow = grow.as_slice().expect("gcol is standard layout");
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let mut gxrow = gx.slice_mut(s![ci, iy as usize, ..]);
                    let gxrow = gxrow.as_slice_mut().expect("gx is standard layout");
                    let base = oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            gxrow[ix as usize] += grow[base + ox];
                        }
                    }
                }
            }
        }
    }
    gx
}

/// `y = conv2d(x, w) + b` with zero padding.
///
/// `x` is `[C, H, W]`, `w` is `[O, C, kh, kw]`, `b` is `[O]`; the result is
/// `[O, Ho, Wo]`.
pub fn conv2d_forward<T: Scalar>(
    x: &ArrayView3<T>,
    w: &ArrayView4<T>,
    b: &[T],
    stride: usize,
    pad: usize,
) -> Array3<T> {
    let (c, h, wd) = x.dim();
    let (o, wc, kh, kw) = w.dim();
    assert_eq!(c, wc, "conv2d input has {c} channels but kernel expects {wc}");
    let ho = conv_out_len(h, kh, stride, pad);
    let wo = conv_out_len(wd, kw, stride, pad);

    let col = im2col(x, kh, kw, stride, pad, ho, wo);
    let w_mat = w
        .to_shape((o, c * kh * kw))
        .expect("kernel is standard layout");
    let mut y = w_mat.dot(&col); // [O, Ho*Wo]
    for (mut row, &bias) in y.axis_iter_mut(Axis(0)).zip(b.iter()) {
        row.mapv_inplace(|v| v + bias);
    }
    let y = if y.is_standard_layout() {
        y
    } else {
        y.as_standard_layout().into_owned()
    };
    y.into_shape_with_order((o, ho, wo))
        .expect("conv output reshape")
}

/// Gradients of `conv2d_forward` with respect to input, kernel and bias.
pub fn conv2d_backward<T: Scalar>(
    x: &ArrayView3<T>,
    w: &ArrayView4<T>,
    go: &ArrayView3<T>,
    stride: usize,
    pad: usize,
) -> (Array3<T>, Array4<T>, Array1<T>) {
    let (c, h, wd) = x.dim();
    let (o, _, kh, kw) = w.dim();
    let (go_c, ho, wo) = go.dim();
    assert_eq!(o, go_c, "conv2d output grad channel mismatch");

    let go_owned;
    let go_mat = match go.to_shape((o, ho * wo)) {
        Ok(v) => v,
        Err(_) => {
            go_owned = go.to_owned();
            go_owned
                .to_shape((o, ho * wo))
                .expect("owned grad reshape")
        }
    };

    let col = im2col(x, kh, kw, stride, pad, ho, wo);
    // `dot` may return an F-order result (e.g. when the spatial output is
    // 1x1 and both operands count as column-major); normalize before the
    // C-order reshape.
    let gw_mat = go_mat.dot(&col.t()); // [O, C*kh*kw]
    let gw = gw_mat
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((o, c, kh, kw))
        .expect("kernel grad reshape");

    let gb = Array1::from_iter(go.axis_iter(Axis(0)).map(|plane| plane.iter().copied().sum()));

    let w_mat = w
        .to_shape((o, c * kh * kw))
        .expect("kernel is standard layout");
    let gcol = w_mat.t().dot(&go_mat); // [C*kh*kw, Ho*Wo]
    let gx = col2im(&gcol, c, h, wd, kh, kw, stride, pad, ho, wo);

    (gx, gw, gb)
}
