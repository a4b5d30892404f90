//! Deterministic renderer for the dermoscopy-style synthetic images.
//!
//! An image is a soft elliptical lesion over low-frequency skin texture.
//! Each [`ConceptKind`] draws its randomness from its own stream keyed by
//! `(seed, kind)`, so toggling one flag never changes how the others render.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use ctraj_nn::{Scalar, Tensor};
use rand::Rng;

use super::{class_profile, ConceptKind, DatasetSpec, LabeledImage, Mask, Split};
use crate::error::{invalid, Result};
use crate::seed;

/// Inner radius of the dark-corner vignette, as a fraction of the image width
/// measured from the image center. Pixels closer than this never change.
pub const CORNER_INNER: f64 = 0.56;
/// Width of the vignette's transition band (fraction of image width).
pub const CORNER_BAND: f64 = 0.05;

const SKIN: [f64; 3] = [0.86, 0.68, 0.58];
const WHITE: [f64; 3] = [0.95, 0.93, 0.92];

/// Distance of pixel `(y, x)` from the image center in units of the width.
pub fn center_distance(size: usize, y: usize, x: usize) -> f64 {
    let c = (size as f64 - 1.0) / 2.0;
    ((y as f64 - c).powi(2) + (x as f64 - c).powi(2)).sqrt() / size as f64
}

/// Pixels that the dark-corner artifact may touch.
pub fn corner_band_mask(size: usize) -> Mask {
    let data = (0..size * size).map(|p| center_distance(size, p / size, p % size) >= CORNER_INNER).collect();
    Mask { size, data }
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Compact C1 bump: 1 at the center, 0 at and beyond `radius`.
fn bump(d: f64, radius: f64) -> f64 {
    if d >= radius {
        0.0
    } else {
        let q = 1.0 - (d / radius).powi(2);
        q * q
    }
}

struct Lesion {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Lesion {
    /// Elliptical radius: 1 on the lesion boundary.
    fn radius(&self, y: f64, x: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        ((u / self.a).powi(2) + (v / self.b).powi(2)).sqrt()
    }

    fn point_at(&self, r: f64, theta: f64) -> (f64, f64) {
        let (u, v) = (r * self.a * theta.cos(), r * self.b * theta.sin());
        (self.cy + u * self.sin + v * self.cos, self.cx + u * self.cos - v * self.sin)
    }
}

/// Working image: 3 planes of `size * size` values.
struct Canvas {
    size: usize,
    px: Vec<[f64; 3]>,
}

impl Canvas {
    fn each(&mut self, mut f: impl FnMut(usize, usize, &mut [f64; 3])) {
        let size = self.size;
        for (p, v) in self.px.iter_mut().enumerate() {
            f(p / size, p % size, v);
        }
    }
}

pub fn render_sample<T: Scalar>(
    class_label: usize,
    concepts: &BTreeSet<ConceptKind>,
    spec: &DatasetSpec,
    seed: u64,
) -> Result<LabeledImage<T>> {
    spec.validate()?;
    if class_label >= spec.num_classes {
        return Err(invalid(format!("class {class_label} outside 0..{}", spec.num_classes)));
    }
    let size = spec.image_size;
    let w = size as f64;
    let profile = class_profile(class_label);
    let mut rng = seed::rng(seed, &[0xba5e]);

    // skin with a soft illumination gradient and two low-frequency waves
    let skin_jitter: f64 = rng.random_range(-0.05..0.05);
    let skin: Vec<f64> = SKIN.iter().map(|c| c + skin_jitter + rng.random_range(-0.02..0.02)).collect();
    let grad_dir: f64 = rng.random_range(0.0..2.0 * PI);
    let grad_amp: f64 = rng.random_range(0.0..0.05);
    let waves: Vec<(f64, f64, f64, f64)> = (0..2)
        .map(|_| {
            let angle: f64 = rng.random_range(0.0..2.0 * PI);
            let freq: f64 = rng.random_range(0.5..1.5) * 2.0 * PI / w;
            let phase: f64 = rng.random_range(0.0..2.0 * PI);
            (angle, freq, phase, rng.random_range(0.005..0.02))
        })
        .collect();

    // lesion geometry and color
    let a = rng.random_range(profile.major.0..profile.major.1) * w;
    let b = a * rng.random_range(0.6..1.0);
    let angle: f64 = rng.random_range(0.0..PI);
    let lesion = Lesion {
        cx: (w - 1.0) / 2.0 + rng.random_range(-0.08..0.08) * w,
        cy: (w - 1.0) / 2.0 + rng.random_range(-0.08..0.08) * w,
        a,
        b,
        cos: angle.cos(),
        sin: angle.sin(),
    };
    let tone: f64 = rng.random_range(-0.08..0.08);
    let color: Vec<f64> = profile.color.iter().map(|c| c + tone + rng.random_range(-0.03..0.03)).collect();
    let tex_freq: f64 = rng.random_range(1.0..2.5) * 2.0 * PI / w;
    let tex_phase: f64 = rng.random_range(0.0..2.0 * PI);
    let tex_amp: f64 = rng.random_range(0.02..0.08);

    let mut alpha = vec![0.0; size * size];
    let mut canvas = Canvas { size, px: vec![[0.0; 3]; size * size] };
    canvas.each(|y, x, px| {
        let (yf, xf) = (y as f64, x as f64);
        let illum = grad_amp * ((xf / w - 0.5) * grad_dir.cos() + (yf / w - 0.5) * grad_dir.sin());
        let wave: f64 = waves
            .iter()
            .map(|&(ang, f, ph, amp)| amp * ((xf * ang.cos() + yf * ang.sin()) * f + ph).sin())
            .sum();
        let r = lesion.radius(yf, xf);
        let al = smoothstep(1.15, 0.85, r);
        alpha[y * size + x] = al;
        let tex = 1.0 + tex_amp * ((xf - lesion.cx) * tex_freq + tex_phase).sin() * ((yf - lesion.cy) * tex_freq).cos();
        for c in 0..3 {
            let s = skin[c] + illum + wave;
            let l = color[c] * tex;
            px[c] = s * (1.0 - al) + l * al;
        }
    });

    if concepts.contains(&ConceptKind::CentralWhitePatch) {
        let mut r = seed::rng(seed, &[ConceptKind::CentralWhitePatch.stream()]);
        let radius = 0.45 * lesion.b * r.random_range(0.9..1.1);
        let strength = r.random_range(0.75..0.9);
        canvas.each(|y, x, px| {
            let d = ((y as f64 - lesion.cy).powi(2) + (x as f64 - lesion.cx).powi(2)).sqrt();
            let wgt = strength * bump(d, radius);
            for c in 0..3 {
                px[c] = px[c] * (1.0 - wgt) + WHITE[c] * wgt;
            }
        });
    }
    if concepts.contains(&ConceptKind::DarkSpots) {
        let mut r = seed::rng(seed, &[ConceptKind::DarkSpots.stream()]);
        let count = r.random_range(4..=7);
        let radius = 0.06 * w;
        let spots: Vec<(f64, f64, f64)> = (0..count)
            .map(|_| {
                let (sy, sx) = lesion.point_at(r.random_range(0.0..0.75f64).sqrt(), r.random_range(0.0..2.0 * PI));
                (sy, sx, r.random_range(0.5..0.7))
            })
            .collect();
        canvas.each(|y, x, px| {
            let keep: f64 = spots
                .iter()
                .map(|&(sy, sx, s)| 1.0 - s * bump(((y as f64 - sy).powi(2) + (x as f64 - sx).powi(2)).sqrt(), radius))
                .product();
            px.iter_mut().for_each(|v| *v *= keep);
        });
    }
    if concepts.contains(&ConceptKind::RedHueShift) {
        let mut r = seed::rng(seed, &[ConceptKind::RedHueShift.stream()]);
        let k = r.random_range(0.8..1.2);
        canvas.each(|y, x, px| {
            // zero inside the lesion mask (alpha >= 0.5)
            let ws = (1.0 - 2.0 * alpha[y * size + x]).max(0.0);
            px[0] += 0.12 * k * ws;
            px[1] -= 0.05 * k * ws;
            px[2] -= 0.04 * k * ws;
        });
    }
    if concepts.contains(&ConceptKind::GlobalBrightening) {
        let mut r = seed::rng(seed, &[ConceptKind::GlobalBrightening.stream()]);
        let k = 0.3 * r.random_range(0.8..1.2);
        canvas.each(|_, _, px| px.iter_mut().for_each(|v| *v += (1.0 - v.clamp(0.0, 1.0)) * k));
    }
    if concepts.contains(&ConceptKind::GlobalDarkening) {
        let mut r = seed::rng(seed, &[ConceptKind::GlobalDarkening.stream()]);
        let k = 0.3 * r.random_range(0.8..1.2);
        canvas.each(|_, _, px| px.iter_mut().for_each(|v| *v *= 1.0 - k));
    }
    if concepts.contains(&ConceptKind::DarkCornerArtifact) {
        let mut r = seed::rng(seed, &[ConceptKind::DarkCornerArtifact.stream()]);
        let strength = r.random_range(0.8..0.95);
        canvas.each(|y, x, px| {
            let s = smoothstep(CORNER_INNER, CORNER_INNER + CORNER_BAND, center_distance(size, y, x));
            px.iter_mut().for_each(|v| *v *= 1.0 - strength * s);
        });
    }

    let plane = size * size;
    let mut data = vec![T::zero(); 3 * plane];
    for (p, px) in canvas.px.iter().enumerate() {
        for c in 0..3 {
            data[c * plane + p] = T::lit(px[c].clamp(0.0, 1.0));
        }
    }
    let mask = Mask { size, data: alpha.iter().map(|&al| al >= 0.5).collect() };
    Ok(LabeledImage {
        id: format!("c{class_label}_s{seed:016x}"),
        image: Tensor::new(&[3, size, size], data)?,
        class_label,
        concepts: concepts.clone(),
        lesion_mask: mask,
        split: Split::Train,
    })
}
