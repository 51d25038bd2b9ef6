//! Loading manifest slices into normalised training batches.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::manifest::{Manifest, Split};
use crate::data::pgm::read_pgm;
use crate::error::{Error, Result};
use crate::exec;
use crate::losses::signed_distance;
use crate::metrics::BinaryMask;
use crate::tensor::{Shape, Tensor};

/// Lower bound on the per-slice standard deviation used for normalisation.
pub const STD_FLOOR: f64 = 1e-6;

/// `x / 255`, then per-slice `(x - mean) / max(std, floor)` with the
/// population standard deviation.
pub fn standardize(pixels: &[u8]) -> Vec<f64> {
    let x: Vec<f64> = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let n = x.len().max(1) as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(STD_FLOOR);
    x.iter().map(|v| (v - mean) / std).collect()
}

#[derive(Debug, Clone)]
pub struct SliceItem {
    pub patient_id: String,
    pub slice_idx: usize,
    pub image: Vec<f64>,
    pub mask: BinaryMask,
    /// Signed distance map of the mask, zeros when degenerate.
    pub phi: Vec<f64>,
}

/// Every slice of one split, fully decoded.
#[derive(Debug, Clone)]
pub struct SliceSet {
    pub height: usize,
    pub width: usize,
    pub items: Vec<SliceItem>,
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor,
    pub masks: Vec<BinaryMask>,
    /// Flattened `[B, H, W]` foreground targets.
    pub targets: Vec<f64>,
    pub phi: Vec<f64>,
    pub indices: Vec<usize>,
}

impl SliceSet {
    pub fn load(manifest: &Manifest, split: Split) -> Result<SliceSet> {
        let rows: Vec<_> = manifest.split(split).cloned().collect();
        let loaded = exec::map(rows.len(), |i| -> Result<SliceItem> {
            let r = &rows[i];
            let context = |e: Error| {
                Error::Manifest(format!("row for patient {} slice {}: {e}", r.patient_id, r.slice_idx))
            };
            let img = read_pgm(&manifest.resolve(&r.image_path)).map_err(context)?;
            let msk = read_pgm(&manifest.resolve(&r.mask_path)).map_err(context)?;
            if (img.width, img.height) != (msk.width, msk.height) {
                return Err(context(Error::Shape("image and mask sizes differ".into())));
            }
            if let Some(v) = msk.pixels.iter().find(|&&v| v != 0 && v != 255) {
                return Err(context(Error::Shape(format!("mask value {v} is not 0 or 255"))));
            }
            let mask = BinaryMask::new(msk.height, msk.width, msk.pixels.iter().map(|&v| v == 255).collect())?;
            let phi = signed_distance(&mask).unwrap_or_else(|| vec![0.0; mask.height() * mask.width()]);
            Ok(SliceItem {
                patient_id: r.patient_id.clone(),
                slice_idx: r.slice_idx,
                image: standardize(&img.pixels),
                mask,
                phi,
            })
        });
        let items = loaded.into_iter().collect::<Result<Vec<_>>>()?;
        let (height, width) = items.first().map_or((0, 0), |it| (it.mask.height(), it.mask.width()));
        if items.iter().any(|it| (it.mask.height(), it.mask.width()) != (height, width)) {
            return Err(Error::Manifest(format!("{split} split mixes slice sizes")));
        }
        Ok(SliceSet { height, width, items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Item order for one epoch: a seeded shuffle, identical for identical
    /// `(seed, epoch)`.
    pub fn epoch_order(&self, seed: u64, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.items.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        order.shuffle(&mut rng);
        order
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let (h, w) = (self.height, self.width);
        let mut data = Vec::with_capacity(indices.len() * h * w);
        let mut targets = Vec::with_capacity(indices.len() * h * w);
        let mut phi = Vec::with_capacity(indices.len() * h * w);
        let mut masks = Vec::with_capacity(indices.len());
        for &i in indices {
            let it = &self.items[i];
            data.extend_from_slice(&it.image);
            targets.extend(it.mask.to_f64());
            phi.extend_from_slice(&it.phi);
            masks.push(it.mask.clone());
        }
        let images = Tensor::from_vec(Shape::new(indices.len(), 1, h, w), data)?;
        Ok(Batch { images, masks, targets, phi, indices: indices.to_vec() })
    }

    /// Batches covering `order` in sequence; the last may be short.
    pub fn batches(&self, order: &[usize], batch_size: usize) -> Result<Vec<Batch>> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        order.chunks(batch_size).map(|c| self.batch(c)).collect()
    }

    /// Item indices grouped by patient, each group in slice order.
    pub fn volumes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out: Vec<(String, Vec<usize>)> = Vec::new();
        for (i, it) in self.items.iter().enumerate() {
            match out.iter_mut().find(|(p, _)| *p == it.patient_id) {
                Some((_, v)) => v.push(i),
                None => out.push((it.patient_id.clone(), vec![i])),
            }
        }
        for (_, v) in &mut out {
            v.sort_by_key(|&i| self.items[i].slice_idx);
        }
        out
    }
}

/// Shuffled batches of one split for one epoch.
pub fn load_batch(manifest: &Manifest, split: Split, batch_size: usize, seed: u64) -> Result<Vec<Batch>> {
    let set = SliceSet::load(manifest, split)?;
    set.batches(&set.epoch_order(seed, 0), batch_size)
}
