//! Seeded synthetic data: underwater scenes with known physics, and a
//! three-class shapes benchmark with optional perspective distortion.

use std::f64::consts::PI;

use rand::Rng;

use crate::error::{dim_err, Result};
use crate::imaging::{
    synthesize_hazy, transmission_per_channel, AttenuationCoeff, BackgroundLight, ClearImage, DepthMap, HazyImage,
    TransmissionMap, T_MIN,
};
use crate::rng::derived;
use crate::stn::{bilinear_sample, make_grid, Homography};
use crate::tensor::Grid;
use crate::transmission::DOWNSAMPLE;

/// Fraction of the per-pixel channel minimum removed from clear images.
pub const CHROMA: f64 = 0.8;

/// Depths are generated within `[0, MAX_DEPTH]`.
pub const MAX_DEPTH: f64 = 4.0;

/// One synthetic underwater scene and the physics that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct UnderwaterSample {
    pub clear: ClearImage,
    pub depth: DepthMap,
    pub beta: AttenuationCoeff,
    pub transmission: TransmissionMap,
    pub light: BackgroundLight,
    pub hazy: HazyImage,
}

/// Sum of three random-frequency sinusoid products, in arbitrary units.
fn texture<R: Rng + ?Sized>(rng: &mut R, size: usize) -> Grid {
    let terms: Vec<[f64; 5]> = (0..3)
        .map(|_| {
            [
                rng.gen_range(0.3..1.0),
                rng.gen_range(0.5..6.0) * 2.0 * PI / size as f64,
                rng.gen_range(0.0..2.0 * PI),
                rng.gen_range(0.5..6.0) * 2.0 * PI / size as f64,
                rng.gen_range(0.0..2.0 * PI),
            ]
        })
        .collect();
    Grid::from_fn(1, size, size, |_, y, x| {
        terms
            .iter()
            .map(|[a, fx, px, fy, py]| a * (fx * x as f64 + px).sin() * (fy * y as f64 + py).sin())
            .sum()
    })
}

fn rescale(g: &Grid, lo_out: f64, hi_out: f64) -> Grid {
    let (lo, hi) = (g.min_value(), g.max_value());
    let span = if hi > lo { hi - lo } else { 1.0 };
    g.map(|v| lo_out + (hi_out - lo_out) * (v - lo) / span)
}

/// Colour texture in `[0.05, 0.95]`. Each channel is an independent
/// texture; subtracting `CHROMA` times the per-pixel channel minimum makes
/// the colours saturated, as in natural scenes where some channel is
/// nearly dark in most patches.
fn clear_image<R: Rng + ?Sized>(rng: &mut R, size: usize) -> Result<Grid> {
    let planes: Vec<Grid> = (0..3).map(|_| rescale(&texture(rng, size), 0.0, 1.0)).collect();
    let mut g = Grid::concat_channels(&planes)?;
    let plane = size * size;
    for k in 0..plane {
        let m = (0..3).map(|c| g.data()[c * plane + k]).fold(f64::INFINITY, f64::min);
        for c in 0..3 {
            g.data_mut()[c * plane + k] -= CHROMA * m;
        }
    }
    Ok(rescale(&g, 0.05, 0.95))
}

/// Linear ramp plus a few smooth bumps, clamped to `[0, MAX_DEPTH]`.
fn depth_map<R: Rng + ?Sized>(rng: &mut R, size: usize) -> Grid {
    let near = rng.gen_range(0.3..1.5);
    let far = rng.gen_range(2.5..MAX_DEPTH);
    let angle = rng.gen_range(-0.5..0.5f64);
    let bumps: Vec<[f64; 4]> = (0..3)
        .map(|_| {
            [
                rng.gen_range(-0.6..0.6),
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.1..0.3),
            ]
        })
        .collect();
    let n = (size - 1).max(1) as f64;
    Grid::from_fn(1, size, size, |_, y, x| {
        let (u, v) = (x as f64 / n, y as f64 / n);
        // mostly vertical ramp: the top of the frame is farther away
        let s = ((1.0 - v) * angle.cos() + (u - 0.5) * angle.sin()).clamp(0.0, 1.0);
        let mut d = near + (far - near) * s;
        for [amp, cx, cy, r] in &bumps {
            d += amp * (-((u - cx).powi(2) + (v - cy).powi(2)) / (2.0 * r * r)).exp();
        }
        d.clamp(0.0, MAX_DEPTH)
    })
}

/// `n` RGB scenes of `size × size`. Background light is blue-green biased
/// within `[0.6, 0.9]`; attenuation lies in `[0.2, 1.0]` per channel, red
/// strongest. Transmission is floored at `T_MIN`. Fully determined by `seed`.
pub fn gen_underwater_dataset(n: usize, size: usize, seed: u64) -> Result<Vec<UnderwaterSample>> {
    if size == 0 || size % DOWNSAMPLE != 0 {
        return Err(dim_err!("underwater images must have a size divisible by {DOWNSAMPLE}, got {size}"));
    }
    (0..n)
        .map(|i| {
            let mut rng = derived(seed, i as u64);
            let clear = ClearImage::new(clear_image(&mut rng, size)?)?;
            let depth = DepthMap::new(depth_map(&mut rng, size))?;
            let base = rng.gen_range(0.3..0.7);
            let beta = AttenuationCoeff::new(vec![
                (base + rng.gen_range(0.1..0.3f64)).min(1.0),
                (base + rng.gen_range(-0.1..0.1f64)).max(0.2),
                (base + rng.gen_range(-0.1..0.1f64)).max(0.2),
            ])?;
            let light = BackgroundLight::new(vec![
                rng.gen_range(0.6..0.72),
                rng.gen_range(0.72..0.9),
                rng.gen_range(0.72..0.9),
            ])?;
            let transmission = transmission_per_channel(&depth, &beta)?.clamped(T_MIN);
            let hazy = synthesize_hazy(&clear, &transmission, &light)?;
            Ok(UnderwaterSample {
                clear,
                depth,
                beta,
                transmission,
                light,
                hazy,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Square,
    Triangle,
    Disc,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Triangle, Shape::Disc];

    pub fn label(self) -> usize {
        self as usize
    }

    fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            Shape::Square => dx.abs() <= r && dy.abs() <= r,
            // apex up, base at dy = r
            Shape::Triangle => dy <= r && dy >= -r && dx.abs() <= (dy + r) * 0.5,
            Shape::Disc => dx * dx + dy * dy <= r * r,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeSample {
    /// Single-channel image.
    pub image: Grid,
    pub label: usize,
}

/// Random homography used to distort shapes: perspective terms in
/// `[-0.3, 0.3]` and mild affine jitter.
pub fn random_distortion<R: Rng + ?Sized>(rng: &mut R) -> Homography {
    let j = |rng: &mut R| rng.gen_range(-0.1..0.1);
    let theta = [
        1.0 + j(rng),
        j(rng),
        j(rng),
        j(rng),
        1.0 + j(rng),
        j(rng),
        rng.gen_range(-0.3..0.3),
        rng.gen_range(-0.3..0.3),
    ];
    Homography::new(theta).expect("finite parameters")
}

/// `n` single-channel `size × size` images of a filled square, triangle or
/// disc (label `i % 3`) at random position and scale on a noisy background.
/// With `distort`, each image is warped by [`random_distortion`].
pub fn gen_shapes_dataset(n: usize, size: usize, distort: bool, seed: u64) -> Result<Vec<ShapeSample>> {
    if size < 16 {
        return Err(dim_err!("shape images must be at least 16x16, got {size}"));
    }
    (0..n)
        .map(|i| {
            let mut rng = derived(seed, i as u64);
            let shape = Shape::ALL[i % 3];
            let s = size as f64;
            let r = rng.gen_range(0.16 * s..0.28 * s).round();
            let cx = rng.gen_range(r + 1.0..s - r - 2.0).round();
            let cy = rng.gen_range(r + 1.0..s - r - 2.0).round();
            let fg = rng.gen_range(0.75..1.0);
            let mut image = Grid::from_fn(1, size, size, |_, y, x| {
                if shape.contains(x as f64 - cx, y as f64 - cy, r) {
                    fg
                } else {
                    0.0
                }
            });
            for v in image.data_mut() {
                if *v == 0.0 {
                    *v = rng.gen_range(0.0..0.25);
                }
            }
            if distort {
                let h = random_distortion(&mut rng);
                image = bilinear_sample(&image, &make_grid(&h, size, size)?)?;
            }
            Ok(ShapeSample {
                image,
                label: shape.label(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{invert_direct, InversionMode};

    #[test]
    fn underwater_is_deterministic_and_in_range() {
        let a = gen_underwater_dataset(4, 16, 7).unwrap();
        let b = gen_underwater_dataset(4, 16, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, gen_underwater_dataset(4, 16, 8).unwrap());
        for s in &a {
            let bmax = s.beta.values().iter().cloned().fold(0.0, f64::max);
            assert!(s.beta.values().iter().all(|&v| (0.2..=1.0).contains(&v)));
            assert!(s.light.values().iter().all(|&v| (0.6..=0.9).contains(&v)));
            assert!(s.light.values()[0] < s.light.values()[1] && s.light.values()[0] < s.light.values()[2]);
            let lo = (-MAX_DEPTH * bmax).exp().max(T_MIN);
            assert!(s.transmission.grid().data().iter().all(|&t| t >= lo && t <= 1.0));
            assert!(s.depth.grid().data().iter().all(|&d| (0.0..=MAX_DEPTH).contains(&d)));
            let c = s.clear.grid();
            assert!(c.min_value() >= 0.05 - 1e-12 && c.max_value() <= 0.95 + 1e-12);
            let j = invert_direct(&s.hazy, &s.transmission, &s.light, InversionMode::Oracle).unwrap();
            assert!(j.max_abs_diff(c).unwrap() < 1e-12);
        }
        assert!(gen_underwater_dataset(1, 24, 0).is_err());
    }

    #[test]
    fn shapes_balanced_and_deterministic() {
        let a = gen_shapes_dataset(10, 16, true, 3).unwrap();
        assert_eq!(a, gen_shapes_dataset(10, 16, true, 3).unwrap());
        let counts = (0..3).map(|c| a.iter().filter(|s| s.label == c).count()).collect::<Vec<_>>();
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
        assert!(gen_shapes_dataset(3, 8, false, 0).is_err());
    }

    #[test]
    fn undistorted_square_has_axis_aligned_edges() {
        let s = &gen_shapes_dataset(1, 32, false, 11).unwrap()[0];
        assert_eq!(s.label, Shape::Square.label());
        let img = &s.image;
        // the foreground value is the image maximum (noise stays below 0.25)
        let fg = img.max_value();
        let rows: Vec<usize> = (0..32).filter(|&y| (0..32).any(|x| img.get(0, y, x) == fg)).collect();
        let cols: Vec<usize> = (0..32).filter(|&x| (0..32).any(|y| img.get(0, y, x) == fg)).collect();
        for &y in &rows {
            for &x in &cols {
                assert_eq!(img.get(0, y, x), fg);
            }
        }
        let filled = img.data().iter().filter(|&&v| v == fg).count();
        assert_eq!(filled, rows.len() * cols.len());
    }
}
