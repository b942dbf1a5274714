//! Deterministic synthetic lesion-image generator.
//!
//! Each sample is a speckled ultrasound-like background with one darker
//! elliptical lesion. Benign lesions (class 0) have a smooth margin;
//! malignant ones (class 1) carry an angular boundary perturbation. The mask
//! is the lesion support before boundary blurring, and the two classes share
//! the same intensity statistics so margin shape is the only class cue.

use super::imgops::gaussian_blur_plane;
use super::Sample;
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const BG_LEVEL: (f64, f64) = (0.35, 0.55);
const LESION_FACTOR: (f64, f64) = (0.30, 0.55);
const RADIUS_FRAC: (f64, f64) = (0.10, 0.26);
const ASPECT: (f64, f64) = (0.75, 1.33);
const MARGIN_AMP: (f64, f64) = (0.40, 0.60);
const MARGIN_LOBES: (u32, u32) = (4, 7);
const EDGE_SIGMA: (f64, f64) = (0.4, 0.8);
const SPECKLE_STRENGTH: f64 = 0.10;
const SPECKLE_GRAIN_SIGMA: f64 = 0.8;
const SENSOR_NOISE: f64 = 0.015;
const AREA_BOUNDS: (f64, f64) = (0.02, 0.30);

fn std_normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

struct LesionShape {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    theta: f64,
    lobes: u32,
    amp: f64,
    amp2: f64,
    phase: f64,
    phase2: f64,
}

impl LesionShape {
    /// Signed normalized radius: <= 1 inside the (possibly perturbed) ellipse.
    fn radius(&self, x: f64, y: f64) -> f64 {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let (sin_t, cos_t) = self.theta.sin_cos();
        let u = (cos_t * dx + sin_t * dy) / self.a;
        let v = (-sin_t * dx + cos_t * dy) / self.b;
        let r = (u * u + v * v).sqrt();
        if self.amp == 0.0 {
            return r;
        }
        let phi = v.atan2(u);
        let rho = 1.0
            + self.amp * (self.lobes as f64 * phi + self.phase).sin()
            + self.amp2 * ((2 * self.lobes + 1) as f64 * phi + self.phase2).sin();
        r / rho.max(0.2)
    }
}

fn draw_shape(size: usize, malignant: bool, rng: &mut impl Rng) -> LesionShape {
    let s = size as f64;
    let r0 = rng.random_range(RADIUS_FRAC.0..RADIUS_FRAC.1) * s;
    let aspect = rng.random_range(ASPECT.0..ASPECT.1);
    let (amp, amp2, lobes, phase, phase2) = if malignant {
        let amp = rng.random_range(MARGIN_AMP.0..MARGIN_AMP.1);
        (
            amp,
            amp * 0.5,
            rng.random_range(MARGIN_LOBES.0..=MARGIN_LOBES.1),
            rng.random_range(0.0..std::f64::consts::TAU),
            rng.random_range(0.0..std::f64::consts::TAU),
        )
    } else {
        (0.0, 0.0, 0, 0.0, 0.0)
    };
    LesionShape {
        cx: rng.random_range(0.32..0.68) * s,
        cy: rng.random_range(0.32..0.68) * s,
        a: r0 * aspect,
        b: r0 / aspect,
        theta: rng.random_range(0.0..std::f64::consts::PI),
        lobes,
        amp,
        amp2,
        phase,
        phase2,
    }
}

fn render_support(size: usize, shape: &LesionShape) -> Array2<u8> {
    Array2::from_shape_fn((size, size), |(y, x)| {
        u8::from(shape.radius(x as f64 + 0.5, y as f64 + 0.5) <= 1.0)
    })
}

/// One synthetic sample; deterministic in (seed, index, image_size).
fn generate_one(index: usize, image_size: usize, seed: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    let malignant = rng.random::<f64>() < 0.5;

    // Redraw until the lesion area lands in bounds; draws stay on the same
    // deterministic stream.
    let mut support;
    let mut attempts = 0;
    loop {
        let shape = draw_shape(image_size, malignant, &mut rng);
        support = render_support(image_size, &shape);
        let frac = support.iter().map(|&v| v as usize).sum::<usize>() as f64
            / (image_size * image_size) as f64;
        attempts += 1;
        if (frac >= AREA_BOUNDS.0 && frac <= AREA_BOUNDS.1) || attempts > 64 {
            break;
        }
    }

    let bg_level = rng.random_range(BG_LEVEL.0..BG_LEVEL.1);
    let lesion_level = bg_level * rng.random_range(LESION_FACTOR.0..LESION_FACTOR.1);
    let edge_sigma = rng.random_range(EDGE_SIGMA.0..EDGE_SIGMA.1);

    let support_f = support.mapv(|v| v as f64);
    let alpha = gaussian_blur_plane(&support_f, edge_sigma);

    // Smoothed multiplicative speckle, renormalized to unit std.
    let raw = Array2::from_shape_fn((image_size, image_size), |_| std_normal(&mut rng));
    let smooth = gaussian_blur_plane(&raw, SPECKLE_GRAIN_SIGMA);
    let std = (smooth.mapv(|v| v * v).mean().unwrap_or(1.0)).sqrt().max(1e-9);
    let speckle = smooth.mapv(|v| 1.0 + SPECKLE_STRENGTH * v / std);

    let mut plane = Array2::<f64>::zeros((image_size, image_size));
    for y in 0..image_size {
        for x in 0..image_size {
            let a = alpha[(y, x)];
            let level = bg_level * (1.0 - a) + lesion_level * a;
            let v = level * speckle[(y, x)] + SENSOR_NOISE * std_normal(&mut rng);
            plane[(y, x)] = v.clamp(0.0, 1.0);
        }
    }

    // Grayscale replicated to 3 channels for backbone compatibility.
    let image = Array3::from_shape_fn((3, image_size, image_size), |(_, y, x)| plane[(y, x)]);
    Sample {
        id: format!("synth/{index:05}"),
        image,
        mask: Some(support),
        class_label: Some(u8::from(malignant)),
    }
}

/// Generates `n` samples, fully deterministic under `seed`.
pub fn synth_generate(n: usize, image_size: usize, seed: u64) -> Vec<Sample> {
    assert!(n >= 1, "synth_generate needs n >= 1");
    crate::tensor::par_map_batch(n, |i| generate_one(i, image_size, seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let a = synth_generate(2, 48, 7);
        let b = synth_generate(2, 48, 7);
        for (s, t) in a.iter().zip(b.iter()) {
            assert_eq!(s.image, t.image);
            assert_eq!(s.mask, t.mask);
            assert_eq!(s.class_label, t.class_label);
        }
        let c = synth_generate(2, 48, 8);
        assert_ne!(a[0].image, c[0].image);
    }

    #[test]
    fn lesion_area_stays_in_bounds() {
        let samples = synth_generate(1000, 32, 3);
        for s in &samples {
            let mask = s.mask.as_ref().unwrap();
            let frac =
                mask.iter().map(|&v| v as usize).sum::<usize>() as f64 / mask.len() as f64;
            assert!(
                (0.02..=0.30).contains(&frac),
                "sample {} area fraction {frac}",
                s.id
            );
        }
    }

    #[test]
    fn classes_are_roughly_balanced() {
        let samples = synth_generate(1000, 32, 5);
        let ones = samples
            .iter()
            .filter(|s| s.class_label == Some(1))
            .count() as f64
            / 1000.0;
        assert!((0.45..=0.55).contains(&ones), "class-1 frequency {ones}");
    }

    #[test]
    fn samples_are_valid_and_in_range() {
        for s in synth_generate(16, 32, 1) {
            s.validate().unwrap();
            assert!(s.image.iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!(s.mask.as_ref().unwrap().iter().all(|&v| v <= 1));
        }
    }
}
