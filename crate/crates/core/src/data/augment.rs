//! Weak (geometric) and strong (photometric) augmentation.
//!
//! The strong view differs from the weak view only photometrically, so for
//! any pixel coordinate both views depict the same source-image location.
//! That keeps per-pixel pseudo-label supervision well-defined without
//! warping predictions. Both transforms record their draws, so applying a
//! recorded transform reproduces the view bit-exactly.

use super::imgops::{gaussian_blur, resize_bilinear, resize_nearest_mask};
use super::Sample;
use ndarray::{Array2, Array3};
use rand::Rng;

/// Record of a weak geometric transform: horizontal flip, uniform scale,
/// and the crop/pad offsets into the scaled image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Geometry {
    pub flip: bool,
    pub scale: f64,
    pub offset_y: i64,
    pub offset_x: i64,
}

impl Geometry {
    pub const IDENTITY: Geometry = Geometry {
        flip: false,
        scale: 1.0,
        offset_y: 0,
        offset_x: 0,
    };
}

/// Record of a strong photometric transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Photometric {
    pub blur_sigma: f64,
    pub brightness: f64,
    pub contrast: f64,
}

impl Photometric {
    pub const IDENTITY: Photometric = Photometric {
        blur_sigma: 0.0,
        brightness: 1.0,
        contrast: 1.0,
    };
}

/// Weak/strong augmented views of one sample sharing a geometric transform.
#[derive(Debug, Clone)]
pub struct ViewPair {
    pub weak: Array3<f64>,
    pub strong: Array3<f64>,
    pub geometry: Geometry,
    pub photometric: Photometric,
    pub source_id: String,
}

fn flip_image(img: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = img.dim();
    Array3::from_shape_fn((c, h, w), |(ci, y, x)| img[(ci, y, w - 1 - x)])
}

fn flip_mask(mask: &Array2<u8>) -> Array2<u8> {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((h, w), |(y, x)| mask[(y, w - 1 - x)])
}

fn scaled_size(out_size: usize, scale: f64) -> usize {
    ((out_size as f64 * scale).round() as usize).max(1)
}

/// Applies a recorded geometry to an image: flip, bilinear scale, then crop
/// (or zero-pad) back to `out_size`.
pub fn apply_geometry_image(img: &Array3<f64>, geo: &Geometry, out_size: usize) -> Array3<f64> {
    let base = if geo.flip { flip_image(img) } else { img.clone() };
    let s = scaled_size(out_size, geo.scale);
    let scaled = resize_bilinear(&base, s, s);
    let c = scaled.dim().0;
    let mut out = Array3::<f64>::zeros((c, out_size, out_size));
    for y in 0..out_size {
        let sy = y as i64 + geo.offset_y;
        if sy < 0 || sy >= s as i64 {
            continue;
        }
        for x in 0..out_size {
            let sx = x as i64 + geo.offset_x;
            if sx < 0 || sx >= s as i64 {
                continue;
            }
            for ci in 0..c {
                out[(ci, y, x)] = scaled[(ci, sy as usize, sx as usize)];
            }
        }
    }
    out
}

/// Same geometry applied to a mask with nearest-neighbor interpolation.
pub fn apply_geometry_mask(mask: &Array2<u8>, geo: &Geometry, out_size: usize) -> Array2<u8> {
    let base = if geo.flip { flip_mask(mask) } else { mask.clone() };
    let s = scaled_size(out_size, geo.scale);
    let scaled = resize_nearest_mask(&base, s, s);
    let mut out = Array2::<u8>::zeros((out_size, out_size));
    for y in 0..out_size {
        let sy = y as i64 + geo.offset_y;
        if sy < 0 || sy >= s as i64 {
            continue;
        }
        for x in 0..out_size {
            let sx = x as i64 + geo.offset_x;
            if sx < 0 || sx >= s as i64 {
                continue;
            }
            out[(y, x)] = scaled[(sy as usize, sx as usize)];
        }
    }
    out
}

/// Applies recorded photometric ops: Gaussian blur, brightness and contrast
/// factors, then a clamp to [0,1]. Spatial correspondence is untouched.
pub fn apply_photometric(img: &Array3<f64>, p: &Photometric) -> Array3<f64> {
    let blurred = gaussian_blur(img, p.blur_sigma);
    let bright = blurred.mapv(|v| v * p.brightness);
    let mean = bright.mean().unwrap_or(0.0);
    bright.mapv(|v| ((v - mean) * p.contrast + mean).clamp(0.0, 1.0))
}

/// Draws a weak geometry: flip with probability 0.5, scale uniform in
/// [0.8, 1.2], uniform crop/pad offsets.
pub fn draw_geometry(out_size: usize, rng: &mut impl Rng) -> Geometry {
    let flip = rng.random::<f64>() < 0.5;
    let scale = rng.random_range(0.8..1.2);
    let s = scaled_size(out_size, scale) as i64;
    let span = s - out_size as i64;
    let (lo, hi) = if span >= 0 { (0, span) } else { (span, 0) };
    let offset_y = rng.random_range(lo..=hi);
    let offset_x = rng.random_range(lo..=hi);
    Geometry {
        flip,
        scale,
        offset_y,
        offset_x,
    }
}

/// Draws strong photometric parameters: blur sigma in [0.1, 2.0] and
/// brightness/contrast factors in [0.7, 1.3].
pub fn draw_photometric(rng: &mut impl Rng) -> Photometric {
    Photometric {
        blur_sigma: rng.random_range(0.1..2.0),
        brightness: rng.random_range(0.7..1.3),
        contrast: rng.random_range(0.7..1.3),
    }
}

/// Weak view of a sample: geometry applied to image and (if labeled) mask.
pub struct WeakView {
    pub image: Array3<f64>,
    pub mask: Option<Array2<u8>>,
    pub geometry: Geometry,
}

pub fn augment_weak(sample: &Sample, out_size: usize, rng: &mut impl Rng) -> WeakView {
    let geometry = draw_geometry(out_size, rng);
    let image = apply_geometry_image(&sample.image, &geometry, out_size);
    let mask = sample
        .mask
        .as_ref()
        .map(|m| apply_geometry_mask(m, &geometry, out_size));
    WeakView {
        image,
        mask,
        geometry,
    }
}

/// Strong view on top of a weak view; purely photometric.
pub fn augment_strong(weak: &Array3<f64>, rng: &mut impl Rng) -> (Array3<f64>, Photometric) {
    let p = draw_photometric(rng);
    (apply_photometric(weak, &p), p)
}

/// Builds the full weak/strong pair for a sample, returning the transformed
/// mask separately for labeled samples.
pub fn make_view_pair(
    sample: &Sample,
    out_size: usize,
    rng: &mut impl Rng,
) -> (ViewPair, Option<Array2<u8>>) {
    let weak = augment_weak(sample, out_size, rng);
    let (strong, photometric) = augment_strong(&weak.image, rng);
    (
        ViewPair {
            weak: weak.image,
            strong,
            geometry: weak.geometry,
            photometric,
            source_id: sample.id.clone(),
        },
        weak.mask,
    )
}
