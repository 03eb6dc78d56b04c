//! Forward and backward kernels for the dense primitives.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Range of output positions `o` for which `o * stride + offset` lands in `0..in_len`.
fn valid_range(out_len: usize, in_len: usize, stride: usize, offset: isize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { (-offset + s - 1) / s };
    let room = in_len as isize - offset;
    let hi = if room <= 0 { 0 } else { ((room + s - 1) / s).min(out_len as isize) };
    (lo as usize, hi.max(lo) as usize)
}

pub(crate) fn conv2d_output_extent(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || kernel == 0 || padded < kernel || (padded - kernel) % stride != 0 {
        return Err(Error::InvalidShape {
            op: "conv2d",
            reason: alloc::format!(
                "extent {input} with kernel {kernel}, stride {stride}, padding {padding} does not give an integral output"
            ),
        });
    }
    Ok((padded - kernel) / stride + 1)
}

pub(crate) struct ConvGeometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
}

pub(crate) fn conv2d_geometry(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<ConvGeometry> {
    let [n, c, h, w] = input.dims4("conv2d")?;
    let [k, wc, kh, kw] = weight.dims4("conv2d")?;
    if wc != c {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            expected: vec![k, c, kh, kw],
            found: weight.shape().to_vec(),
        });
    }
    bias.expect_shape("conv2d", &[k])?;
    let oh = conv2d_output_extent(h, kh, stride, padding)?;
    let ow = conv2d_output_extent(w, kw, stride, padding)?;
    Ok(ConvGeometry {
        n,
        c,
        h,
        w,
        k,
        kh,
        kw,
        oh,
        ow,
        stride,
        padding,
    })
}

pub(crate) fn conv2d_forward(g: &ConvGeometry, x: &[f64], wt: &[f64], b: &[f64]) -> Tensor {
    let mut out = vec![0.0; g.n * g.k * g.oh * g.ow];
    let (s, p) = (g.stride, g.padding as isize);
    for n in 0..g.n {
        for k in 0..g.k {
            let o_plane = &mut out[(n * g.k + k) * g.oh * g.ow..][..g.oh * g.ow];
            o_plane.iter_mut().for_each(|v| *v = b[k]);
            for c in 0..g.c {
                let x_plane = &x[(n * g.c + c) * g.h * g.w..][..g.h * g.w];
                for ky in 0..g.kh {
                    let (oy0, oy1) = valid_range(g.oh, g.h, s, ky as isize - p);
                    for kx in 0..g.kw {
                        let wv = wt[((k * g.c + c) * g.kh + ky) * g.kw + kx];
                        let off = kx as isize - p;
                        let (ox0, ox1) = valid_range(g.ow, g.w, s, off);
                        if ox0 >= ox1 {
                            continue;
                        }
                        for oy in oy0..oy1 {
                            let iy = (oy * s) as isize + ky as isize - p;
                            let x_row = &x_plane[iy as usize * g.w..][..g.w];
                            let o_row = &mut o_plane[oy * g.ow + ox0..oy * g.ow + ox1];
                            let ix0 = (ox0 * s) as isize + off;
                            if s == 1 {
                                let src = &x_row[ix0 as usize..ix0 as usize + (ox1 - ox0)];
                                for (o, &xv) in o_row.iter_mut().zip(src) {
                                    *o += wv * xv;
                                }
                            } else {
                                for (j, o) in o_row.iter_mut().enumerate() {
                                    *o += wv * x_row[ix0 as usize + j * s];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[g.n, g.k, g.oh, g.ow], out).expect("conv output shape")
}

/// Returns gradients for (input, weight, bias).
pub(crate) fn conv2d_backward(
    g: &ConvGeometry,
    x: &[f64],
    wt: &[f64],
    grad: &[f64],
    want_input: bool,
    want_weight: bool,
    want_bias: bool,
) -> (Option<Tensor>, Option<Tensor>, Option<Tensor>) {
    let mut gx = if want_input { vec![0.0; x.len()] } else { Vec::new() };
    let mut gw = if want_weight { vec![0.0; wt.len()] } else { Vec::new() };
    let mut gb = if want_bias { vec![0.0; g.k] } else { Vec::new() };
    let (s, p) = (g.stride, g.padding as isize);
    for n in 0..g.n {
        for k in 0..g.k {
            let g_plane = &grad[(n * g.k + k) * g.oh * g.ow..][..g.oh * g.ow];
            if want_bias {
                gb[k] += g_plane.iter().sum::<f64>();
            }
            if !(want_input || want_weight) {
                continue;
            }
            for c in 0..g.c {
                let base = (n * g.c + c) * g.h * g.w;
                for ky in 0..g.kh {
                    let (oy0, oy1) = valid_range(g.oh, g.h, s, ky as isize - p);
                    for kx in 0..g.kw {
                        let widx = ((k * g.c + c) * g.kh + ky) * g.kw + kx;
                        let wv = wt[widx];
                        let off = kx as isize - p;
                        let (ox0, ox1) = valid_range(g.ow, g.w, s, off);
                        if ox0 >= ox1 {
                            continue;
                        }
                        let mut acc = 0.0;
                        for oy in oy0..oy1 {
                            let iy = (oy * s) as isize + ky as isize - p;
                            let row = base + iy as usize * g.w;
                            let g_row = &g_plane[oy * g.ow + ox0..oy * g.ow + ox1];
                            let ix0 = row + ((ox0 * s) as isize + off) as usize;
                            if s == 1 {
                                if want_weight {
                                    let src = &x[ix0..ix0 + (ox1 - ox0)];
                                    acc += g_row.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
                                }
                                if want_input {
                                    let dst = &mut gx[ix0..ix0 + (ox1 - ox0)];
                                    for (d, &gv) in dst.iter_mut().zip(g_row) {
                                        *d += wv * gv;
                                    }
                                }
                            } else {
                                for (j, &gv) in g_row.iter().enumerate() {
                                    let xi = ix0 + j * s;
                                    if want_weight {
                                        acc += gv * x[xi];
                                    }
                                    if want_input {
                                        gx[xi] += wv * gv;
                                    }
                                }
                            }
                        }
                        if want_weight {
                            gw[widx] += acc;
                        }
                    }
                }
            }
        }
    }
    let shape_x = [g.n, g.c, g.h, g.w];
    let shape_w = [g.k, g.c, g.kh, g.kw];
    (
        want_input.then(|| Tensor::new(&shape_x, gx).expect("shape")),
        want_weight.then(|| Tensor::new(&shape_w, gw).expect("shape")),
        want_bias.then(|| Tensor::new(&[g.k], gb).expect("shape")),
    )
}

pub(crate) fn upsample2x_forward(x: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = x.dims4("upsample2x")?;
    let (oh, ow) = (2 * h, 2 * w);
    let src = x.data();
    let mut out = vec![0.0; n * c * oh * ow];
    for plane in 0..n * c {
        let s = &src[plane * h * w..][..h * w];
        let o = &mut out[plane * oh * ow..][..oh * ow];
        for y in 0..oh {
            let sr = &s[(y / 2) * w..][..w];
            let or = &mut o[y * ow..][..ow];
            for (x2, v) in or.iter_mut().enumerate() {
                *v = sr[x2 / 2];
            }
        }
    }
    Tensor::new(&[n, c, oh, ow], out)
}

pub(crate) fn upsample2x_backward(grad: &Tensor, input_shape: &[usize]) -> Tensor {
    let (n, c, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
    let (oh, ow) = (2 * h, 2 * w);
    let g = grad.data();
    let mut out = vec![0.0; n * c * h * w];
    for plane in 0..n * c {
        let gp = &g[plane * oh * ow..][..oh * ow];
        let op = &mut out[plane * h * w..][..h * w];
        for y in 0..oh {
            for x in 0..ow {
                op[(y / 2) * w + x / 2] += gp[y * ow + x];
            }
        }
    }
    Tensor::new(input_shape, out).expect("shape")
}

/// Output shape and, for every input dimension, the output stride it maps
/// to (0 for reduced axes).
pub(crate) fn reduce_layout(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let kept: Vec<usize> = (0..shape.len()).filter(|d| !axes.contains(d)).collect();
    let mut out_shape: Vec<usize> = kept.iter().map(|&d| shape[d]).collect();
    if out_shape.is_empty() {
        out_shape.push(1);
    }
    let mut strides = vec![0usize; shape.len()];
    let mut acc = 1;
    for &d in kept.iter().rev() {
        strides[d] = acc;
        acc *= shape[d];
    }
    (out_shape, strides)
}

/// Maps each flat input index to its flat output index under `strides`.
pub(crate) fn for_each_reduced(shape: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = shape.len();
    let total: usize = shape.iter().product();
    let mut idx = vec![0usize; rank];
    let mut out = 0usize;
    for flat in 0..total {
        f(flat, out);
        for d in (0..rank).rev() {
            idx[d] += 1;
            out += strides[d];
            if idx[d] < shape[d] {
                break;
            }
            out -= strides[d] * shape[d];
            idx[d] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_matches_brute_force() {
        for out_len in 1..6 {
            for in_len in 1..8 {
                for stride in 1..4 {
                    for offset in -3isize..4 {
                        let (lo, hi) = valid_range(out_len, in_len, stride, offset);
                        let expected: Vec<usize> = (0..out_len)
                            .filter(|&o| {
                                let i = (o * stride) as isize + offset;
                                i >= 0 && i < in_len as isize
                            })
                            .collect();
                        let got: Vec<usize> = (lo..hi).collect();
                        assert_eq!(got, expected, "out {out_len} in {in_len} s {stride} off {offset}");
                    }
                }
            }
        }
    }

    #[test]
    fn reduce_layout_drops_axes() {
        let (shape, strides) = reduce_layout(&[2, 3, 4], &[1]);
        assert_eq!(shape, vec![2, 4]);
        assert_eq!(strides, vec![4, 0, 1]);
        let (shape, _) = reduce_layout(&[2, 3], &[0, 1]);
        assert_eq!(shape, vec![1]);
    }
}
