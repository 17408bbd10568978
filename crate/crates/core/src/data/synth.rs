//! Synthetic CT-like phantoms: one rotated ellipse of organ-like density on
//! a soft-tissue background, with known geometry.

use super::format::{write_image, write_mask, HuImage, Mask};
use super::manifest::{write_manifest, Manifest, ManifestEntry, SliceSample};
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::path::Path;

/// HU range of organ pixels.
pub const ORGAN_HU: (i16, i16) = (40, 70);
/// HU range of background pixels.
pub const BACKGROUND_HU: (i16, i16) = (-100, 30);

/// Ellipse in pixel coordinates; pixel `(r, c)` is sampled at its centre
/// `(c + 0.5, r + 0.5)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    /// Rotation of the `a` axis from the x axis, radians.
    pub theta: f64,
}

impl Ellipse {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.theta.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }

    pub fn contains_pixel(&self, r: usize, c: usize) -> bool {
        self.contains(c as f64 + 0.5, r as f64 + 0.5)
    }
}

pub struct Phantom {
    pub sample: SliceSample,
    pub ellipse: Ellipse,
}

fn draw_phantom(rng: &mut ChaCha8Rng, size: usize, id: String) -> Result<Phantom> {
    let s = size as f64;
    let ellipse = Ellipse {
        cx: rng.random_range(0.4..0.6) * s,
        cy: rng.random_range(0.4..0.6) * s,
        a: rng.random_range(0.24..0.36) * s,
        b: rng.random_range(0.17..0.28) * s,
        theta: rng.random_range(0.0..std::f64::consts::PI),
    };
    let organ_level: f64 = rng.random_range(48.0..62.0);
    let background_level: f64 = rng.random_range(-60.0..-10.0);
    // smooth shading across the organ
    let (gx, gy) = (
        rng.random_range(-4.0..4.0) / s,
        rng.random_range(-4.0..4.0) / s,
    );
    let organ_noise = Normal::new(0.0, 3.0).expect("valid std");
    let background_noise = Normal::new(0.0, 12.0).expect("valid std");
    let mut image = Vec::with_capacity(size * size);
    let mut mask = Vec::with_capacity(size * size);
    for r in 0..size {
        for c in 0..size {
            let inside = ellipse.contains_pixel(r, c);
            let hu = if inside {
                let shade = gx * (c as f64 - ellipse.cx) + gy * (r as f64 - ellipse.cy);
                (organ_level + shade + organ_noise.sample(rng))
                    .round()
                    .clamp(ORGAN_HU.0 as f64, ORGAN_HU.1 as f64)
            } else {
                (background_level + background_noise.sample(rng))
                    .round()
                    .clamp(BACKGROUND_HU.0 as f64, BACKGROUND_HU.1 as f64)
            };
            image.push(hu as i16);
            mask.push(inside as u8);
        }
    }
    let sample = SliceSample::new(
        HuImage::new(size, size, image)?,
        Mask::new(size, size, mask)?,
        id,
    )?;
    Ok(Phantom { sample, ellipse })
}

/// `count` phantoms of `size × size`, identical for identical arguments.
pub fn synth_phantoms(count: usize, size: usize, seed: u64) -> Result<Vec<Phantom>> {
    if size < 8 {
        return Err(Error::Config(format!(
            "phantom size {size} is below the minimum of 8"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| draw_phantom(&mut rng, size, format!("phantom_{i:04}")))
        .collect()
}

/// Writes phantoms as `<id>.husl` / `<id>.msk` plus `manifest.csv` into
/// `out_dir`, and returns the manifest.
pub fn synth_generate(count: usize, size: usize, seed: u64, out_dir: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut entries = Vec::with_capacity(count);
    for p in synth_phantoms(count, size, seed)? {
        let s = p.sample;
        let image_path = out_dir.join(format!("{}.husl", s.id));
        let mask_path = out_dir.join(format!("{}.msk", s.id));
        write_image(&image_path, &s.image)?;
        write_mask(&mask_path, &s.mask)?;
        entries.push(ManifestEntry {
            image_path,
            mask_path,
            id: s.id,
        });
    }
    let m = Manifest {
        entries,
        split_seed: None,
    };
    write_manifest(&out_dir.join("manifest.csv"), &m)?;
    Ok(m)
}
