//! Synthetic organ phantoms: a rotated ellipse per slice whose axes taper
//! towards both ends of the volume, over a noisy, bias-shaded background.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::manifest::{Manifest, SliceRecord, Split};
use crate::data::pgm::{write_pgm, GrayImage};
use crate::error::{Error, Result};
use crate::metrics::BinaryMask;

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomParams {
    pub height: usize,
    pub width: usize,
    pub slices: usize,
    /// Ellipse centre range as a fraction of the image extent.
    pub center_range: (f64, f64),
    /// Semi-axis range as a fraction of the image extent.
    pub axis_range: (f64, f64),
    /// Axis scale at the very ends of the volume; 1 at the middle.
    pub taper_min: f64,
    pub fg_mean: f64,
    pub bg_mean: f64,
    pub noise_sigma: f64,
    pub bias_amplitude: f64,
    pub seed: u64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        PhantomParams {
            height: 64,
            width: 64,
            slices: 12,
            center_range: (0.4, 0.6),
            axis_range: (0.14, 0.24),
            taper_min: 0.55,
            fg_mean: 0.7,
            bg_mean: 0.3,
            noise_sigma: 0.08,
            bias_amplitude: 0.1,
            seed: 42,
        }
    }
}

impl PhantomParams {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.slices == 0 {
            return Err(Error::Config("phantom extent must be positive".into()));
        }
        let ok = |r: (f64, f64)| r.0 > 0.0 && r.0 <= r.1 && r.1 < 1.0;
        if !ok(self.center_range) || !ok(self.axis_range) || !(0.0..=1.0).contains(&self.taper_min) {
            return Err(Error::Config(format!("invalid phantom geometry {self:?}")));
        }
        Ok(())
    }

    /// Axis scale of slice `z`: `taper_min` at the ends rising to 1.
    pub fn taper(&self, z: usize) -> f64 {
        let t = (PI * (z as f64 + 0.5) / self.slices as f64).sin();
        self.taper_min + (1.0 - self.taper_min) * t
    }
}

/// One generated slice: intensities in [0, 1] and the ground truth.
#[derive(Debug, Clone)]
pub struct PhantomSlice {
    pub image: Vec<f64>,
    pub mask: BinaryMask,
}

/// All slices of one patient, determined by `rng`.
pub fn generate_volume<R: Rng>(p: &PhantomParams, rng: &mut R) -> Vec<PhantomSlice> {
    let (h, w) = (p.height as f64, p.width as f64);
    let cy = rng.gen_range(p.center_range.0..=p.center_range.1) * h;
    let cx = rng.gen_range(p.center_range.0..=p.center_range.1) * w;
    let ay = rng.gen_range(p.axis_range.0..=p.axis_range.1) * h;
    let ax = rng.gen_range(p.axis_range.0..=p.axis_range.1) * w;
    let angle = rng.gen_range(0.0..PI);
    let drift = (rng.gen_range(-0.5..=0.5), rng.gen_range(-0.5..=0.5));
    let bias_dir = rng.gen_range(0.0..2.0 * PI);
    let noise = Normal::new(0.0, p.noise_sigma).expect("finite sigma");
    let (sin, cos) = angle.sin_cos();
    (0..p.slices)
        .map(|z| {
            let scale = p.taper(z);
            let off = z as f64 - (p.slices as f64 - 1.0) / 2.0;
            let (sy, sx) = (cy + drift.0 * off, cx + drift.1 * off);
            let (ry, rx) = (ay * scale, ax * scale);
            let mask = BinaryMask::from_fn(p.height, p.width, |y, x| {
                let dy = y as f64 + 0.5 - sy;
                let dx = x as f64 + 0.5 - sx;
                let u = dx * cos + dy * sin;
                let v = -dx * sin + dy * cos;
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            });
            let image = (0..p.height * p.width)
                .map(|i| {
                    let (y, x) = ((i / p.width) as f64 / h - 0.5, (i % p.width) as f64 / w - 0.5);
                    let bias = p.bias_amplitude * 2.0 * (x * bias_dir.cos() + y * bias_dir.sin());
                    let base = if mask.bits()[i] { p.fg_mean } else { p.bg_mean };
                    (base + bias + noise.sample(rng)).clamp(0.0, 1.0)
                })
                .collect();
            PhantomSlice { image, mask }
        })
        .collect()
}

/// Patient-level split counts for `n` patients: 70 / 15 / 15, rounded, with
/// every split non-empty once there are at least three patients.
pub fn split_counts(n: usize) -> (usize, usize, usize) {
    let mut train = (0.7 * n as f64).round() as usize;
    let mut val = (0.15 * n as f64).round() as usize;
    if n >= 3 {
        val = val.max(1);
        train = train.min(n - val - 1).max(1);
    } else {
        train = n;
        val = 0;
    }
    (train, val, n - train - val)
}

/// Write `patients` phantom volumes under `out` as PGM files plus
/// `manifest.csv`.
pub fn generate_dataset(p: &PhantomParams, patients: usize, out: &Path) -> Result<Manifest> {
    p.validate()?;
    if patients == 0 {
        return Err(Error::Config("need at least one patient".into()));
    }
    for dir in ["images", "masks"] {
        let d = out.join(dir);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut order: Vec<usize> = (0..patients).collect();
    order.shuffle(&mut rng);
    let (train, val, _) = split_counts(patients);
    let mut splits = vec![Split::Test; patients];
    for (rank, &pid) in order.iter().enumerate() {
        splits[pid] = if rank < train {
            Split::Train
        } else if rank < train + val {
            Split::Val
        } else {
            Split::Test
        };
    }
    let mut records = Vec::with_capacity(patients * p.slices);
    for (pid, &split) in splits.iter().enumerate() {
        let id = format!("p{pid:03}");
        for (z, s) in generate_volume(p, &mut rng).into_iter().enumerate() {
            let image_path = PathBuf::from("images").join(format!("{id}_s{z:02}.pgm"));
            let mask_path = PathBuf::from("masks").join(format!("{id}_s{z:02}.pgm"));
            write_pgm(&out.join(&image_path), &GrayImage::from_unit(p.width, p.height, &s.image)?)?;
            let mask_px = s.mask.bits().iter().map(|&b| if b { 255 } else { 0 }).collect();
            write_pgm(&out.join(&mask_path), &GrayImage::new(p.width, p.height, mask_px)?)?;
            records.push(SliceRecord { patient_id: id.clone(), slice_idx: z, image_path, mask_path, split });
        }
    }
    let manifest = Manifest { root: out.to_path_buf(), records };
    manifest.write(&out.join("manifest.csv"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_counts_cover_all_patients() {
        assert_eq!(split_counts(30), (21, 5, 4));
        assert_eq!(split_counts(20), (14, 3, 3));
        for n in 3..50 {
            let (a, b, c) = split_counts(n);
            assert_eq!(a + b + c, n);
            assert!(a > 0 && b > 0 && c > 0, "n={n}");
        }
    }

    #[test]
    fn taper_is_symmetric_and_peaks_in_the_middle() {
        let p = PhantomParams::default();
        for z in 0..p.slices {
            assert!((p.taper(z) - p.taper(p.slices - 1 - z)).abs() < 1e-12);
        }
        assert!(p.taper(0) < p.taper(p.slices / 2));
    }
}
