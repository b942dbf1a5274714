//! Convolution, pooling, and upsampling kernels (NCHW, f64).
//!
//! Convolutions go through im2col + GEMM; the batch dimension is processed
//! in parallel. Each output element is a fixed-order sequential reduction,
//! so results are bit-reproducible regardless of thread scheduling.

use super::{par_map_batch, Tensor};
use ndarray::{Array1, Array2, Array4, ArrayView1, ArrayView2, ArrayView3, ArrayView4, Axis};

pub(crate) fn out_dim(inp: usize, k: usize, stride: usize, pad: usize) -> usize {
    (inp + 2 * pad - k) / stride + 1
}

/// Unfolds one sample [C,H,W] into columns [C*kh*kw, OH*OW].
pub fn im2col(
    x: &ArrayView3<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let oh = out_dim(h, kh, stride, pad);
    let ow = out_dim(w, kw, stride, pad);
    let mut cols = Array2::<f64>::zeros((c * kh * kw, oh * ow));
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[(row, oy * ow + ox)] = x[(ci, iy as usize, ix as usize)];
                    }
                }
            }
        }
    }
    cols
}

/// Folds columns [C*kh*kw, OH*OW] back into a sample [C,H,W], accumulating
/// overlapping contributions.
pub fn col2im(
    cols: &ArrayView2<f64>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> ndarray::Array3<f64> {
    let oh = out_dim(h, kh, stride, pad);
    let ow = out_dim(w, kw, stride, pad);
    let mut out = ndarray::Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        out[(ci, iy as usize, ix as usize)] += cols[(row, oy * ow + ox)];
                    }
                }
            }
        }
    }
    out
}

pub fn conv2d_forward(
    x: &ArrayView4<f64>,
    w: &ArrayView4<f64>,
    b: &ArrayView1<f64>,
    stride: usize,
    pad: usize,
) -> Tensor {
    let (n, cin, h, wd) = x.dim();
    let (cout, cin_w, kh, kw) = w.dim();
    assert_eq!(cin, cin_w, "conv2d: input channels {cin} vs weight {cin_w}");
    let oh = out_dim(h, kh, stride, pad);
    let ow = out_dim(wd, kw, stride, pad);
    let w2 = w
        .to_shape((cout, cin * kh * kw))
        .expect("conv weight reshape")
        .to_owned();
    let outs = par_map_batch(n, |i| {
        let xi = x.index_axis(Axis(0), i);
        let cols = im2col(&xi, kh, kw, stride, pad);
        let mut o = w2.dot(&cols); // [cout, oh*ow]
        for ci in 0..cout {
            let bias = b[ci];
            o.row_mut(ci).mapv_inplace(|v| v + bias);
        }
        o
    });
    let mut out = Array4::<f64>::zeros((n, cout, oh, ow));
    for (i, o) in outs.into_iter().enumerate() {
        let o3 = o.into_shape_with_order((cout, oh, ow)).unwrap();
        out.index_axis_mut(Axis(0), i).assign(&o3);
    }
    out.into_dyn()
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    x: &ArrayView4<f64>,
    w: &ArrayView4<f64>,
    gout: &ArrayView4<f64>,
    stride: usize,
    pad: usize,
    need_x: bool,
    need_w: bool,
    need_b: bool,
) -> (Option<Tensor>, Option<Tensor>, Option<Tensor>) {
    let (n, cin, h, wd) = x.dim();
    let (cout, _, kh, kw) = w.dim();
    let (_, _, oh, ow) = gout.dim();
    let w2 = w
        .to_shape((cout, cin * kh * kw))
        .expect("conv weight reshape")
        .to_owned();

    // Per-sample partials, reduced in index order for determinism.
    let partials = par_map_batch(n, |i| {
        let xi = x.index_axis(Axis(0), i);
        let gi = gout
            .index_axis(Axis(0), i)
            .to_shape((cout, oh * ow))
            .unwrap()
            .to_owned();
        let cols = im2col(&xi, kh, kw, stride, pad);
        let gw = if need_w {
            Some(gi.dot(&cols.t()))
        } else {
            None
        };
        let gx = if need_x {
            let gcols = w2.t().dot(&gi);
            Some(col2im(&gcols.view(), cin, h, wd, kh, kw, stride, pad))
        } else {
            None
        };
        (gx, gw)
    });

    let mut gx_out = if need_x {
        Some(Array4::<f64>::zeros((n, cin, h, wd)))
    } else {
        None
    };
    let mut gw_acc = if need_w {
        Some(Array2::<f64>::zeros((cout, cin * kh * kw)))
    } else {
        None
    };
    for (i, (gx, gw)) in partials.into_iter().enumerate() {
        if let (Some(acc), Some(gx)) = (gx_out.as_mut(), gx) {
            acc.index_axis_mut(Axis(0), i).assign(&gx);
        }
        if let (Some(acc), Some(gw)) = (gw_acc.as_mut(), gw) {
            *acc += &gw;
        }
    }
    let gb = if need_b {
        let mut b = Array1::<f64>::zeros(cout);
        for i in 0..n {
            for ci in 0..cout {
                b[ci] += gout.index_axis(Axis(0), i).index_axis(Axis(0), ci).sum();
            }
        }
        Some(b.into_dyn())
    } else {
        None
    };
    (
        gx_out.map(|a| a.into_dyn()),
        gw_acc.map(|a| {
            a.into_shape_with_order((cout, cin, kh, kw))
                .unwrap()
                .into_dyn()
        }),
        gb,
    )
}

/// 2x2/stride-2 max pooling. Returns pooled values and flat argmax offsets
/// (y*W+x within each input plane).
pub fn max_pool2_forward(x: &ArrayView4<f64>) -> (Tensor, Vec<u32>) {
    let (n, c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array4::<f64>::zeros((n, c, oh, ow));
    let mut argmax = vec![0u32; n * c * oh * ow];
    for i in 0..n {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_off = 0u32;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let (y, x_) = (oy * 2 + dy, ox * 2 + dx);
                            let v = x[(i, ci, y, x_)];
                            if v > best {
                                best = v;
                                best_off = (y * w + x_) as u32;
                            }
                        }
                    }
                    out[(i, ci, oy, ox)] = best;
                    argmax[((i * c + ci) * oh + oy) * ow + ox] = best_off;
                }
            }
        }
    }
    (out.into_dyn(), argmax)
}

pub fn max_pool2_backward(gout: &ArrayView4<f64>, argmax: &[u32], in_shape: &[usize]) -> Tensor {
    let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (_, _, oh, ow) = gout.dim();
    let mut gx = Array4::<f64>::zeros((n, c, h, w));
    for i in 0..n {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let off = argmax[((i * c + ci) * oh + oy) * ow + ox] as usize;
                    gx[(i, ci, off / w, off % w)] += gout[(i, ci, oy, ox)];
                }
            }
        }
    }
    gx.into_dyn()
}

pub fn upsample_nearest2_forward(x: &ArrayView4<f64>) -> Tensor {
    let (n, c, h, w) = x.dim();
    let mut out = Array4::<f64>::zeros((n, c, h * 2, w * 2));
    for i in 0..n {
        for ci in 0..c {
            for y in 0..h * 2 {
                for x_ in 0..w * 2 {
                    out[(i, ci, y, x_)] = x[(i, ci, y / 2, x_ / 2)];
                }
            }
        }
    }
    out.into_dyn()
}

pub fn upsample_nearest2_backward(gout: &ArrayView4<f64>) -> Tensor {
    let (n, c, oh, ow) = gout.dim();
    let (h, w) = (oh / 2, ow / 2);
    let mut gx = Array4::<f64>::zeros((n, c, h, w));
    for i in 0..n {
        for ci in 0..c {
            for y in 0..oh {
                for x_ in 0..ow {
                    gx[(i, ci, y / 2, x_ / 2)] += gout[(i, ci, y, x_)];
                }
            }
        }
    }
    gx.into_dyn()
}
