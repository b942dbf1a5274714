//! Plain image primitives shared by augmentation, the synthetic generator,
//! and saliency resizing. These operate on raw arrays, outside any autodiff
//! graph.

use ndarray::{Array2, Array3};

/// Bilinear resize of a [C,H,W] image to `out x out`, pixel-center aligned.
/// Identity (same size) is bit-exact.
pub fn resize_bilinear(img: &Array3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (c, h, w) = img.dim();
    if h == out_h && w == out_w {
        return img.clone();
    }
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let mut out = Array3::<f64>::zeros((c, out_h, out_w));
    for y in 0..out_h {
        let src_y = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = src_y.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = src_y - y0 as f64;
        for x in 0..out_w {
            let src_x = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = src_x.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = src_x - x0 as f64;
            for ci in 0..c {
                let v00 = img[(ci, y0, x0)];
                let v01 = img[(ci, y0, x1)];
                let v10 = img[(ci, y1, x0)];
                let v11 = img[(ci, y1, x1)];
                out[(ci, y, x)] = v00 * (1.0 - fy) * (1.0 - fx)
                    + v01 * (1.0 - fy) * fx
                    + v10 * fy * (1.0 - fx)
                    + v11 * fy * fx;
            }
        }
    }
    out
}

/// Nearest-neighbor resize of a [H,W] mask; preserves {0,1} values.
pub fn resize_nearest_mask(mask: &Array2<u8>, out_h: usize, out_w: usize) -> Array2<u8> {
    let (h, w) = mask.dim();
    if h == out_h && w == out_w {
        return mask.clone();
    }
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let src_y = (((y as f64 + 0.5) * sy - 0.5).round().max(0.0) as usize).min(h - 1);
        let src_x = (((x as f64 + 0.5) * sx - 0.5).round().max(0.0) as usize).min(w - 1);
        mask[(src_y, src_x)]
    })
}

/// Single-plane bilinear resize.
pub fn resize_bilinear_plane(plane: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = plane.dim();
    let img = plane
        .clone()
        .into_shape_with_order((1, h, w))
        .expect("plane reshape");
    let out = resize_bilinear(&img, out_h, out_w);
    out.into_shape_with_order((out_h, out_w)).expect("plane reshape back")
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    for v in &mut k {
        *v /= s;
    }
    k
}

/// Separable Gaussian blur on one plane; the kernel is renormalized at the
/// borders so constants are preserved. `sigma <= 0` is the identity.
pub fn gaussian_blur_plane(plane: &Array2<f64>, sigma: f64) -> Array2<f64> {
    if sigma <= 0.0 {
        return plane.clone();
    }
    let k = gaussian_kernel(sigma);
    let radius = (k.len() / 2) as i64;
    let (h, w) = plane.dim();
    let mut tmp = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            let mut wsum = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                let xx = x as i64 + i as i64 - radius;
                if xx >= 0 && (xx as usize) < w {
                    acc += kv * plane[(y, xx as usize)];
                    wsum += kv;
                }
            }
            tmp[(y, x)] = acc / wsum;
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            let mut wsum = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                let yy = y as i64 + i as i64 - radius;
                if yy >= 0 && (yy as usize) < h {
                    acc += kv * tmp[(yy as usize, x)];
                    wsum += kv;
                }
            }
            out[(y, x)] = acc / wsum;
        }
    }
    out
}

/// Channel-wise Gaussian blur on a [C,H,W] image.
pub fn gaussian_blur(img: &Array3<f64>, sigma: f64) -> Array3<f64> {
    let (c, h, w) = img.dim();
    let mut out = Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        let plane = img.index_axis(ndarray::Axis(0), ci).to_owned();
        out.index_axis_mut(ndarray::Axis(0), ci)
            .assign(&gaussian_blur_plane(&plane, sigma));
    }
    out
}
