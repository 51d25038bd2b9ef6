//! Hard-mask overlap and surface metrics with the regional evaluation
//! protocol.

use std::fmt;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};
use crate::exec;

#[derive(Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "BinaryMask {}x{}", self.height, self.width)?;
        for row in self.bits.chunks(self.width.max(1)) {
            let line: String = row.iter().map(|&b| if b { '#' } else { '.' }).collect();
            writeln!(f, "{line}")?;
        }
        Ok(())
    }
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::Shape(format!("mask {height}x{width} given {} values", bits.len())));
        }
        Ok(BinaryMask { height, width, bits })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        BinaryMask { height, width, bits: vec![false; height * width] }
    }

    /// From 0/1 values; anything else is rejected.
    pub fn from_bits(height: usize, width: usize, values: &[u8]) -> Result<Self> {
        if let Some(v) = values.iter().find(|&&v| v > 1) {
            return Err(Error::Shape(format!("mask value {v} is not binary")));
        }
        Self::new(height, width, values.iter().map(|&v| v == 1).collect())
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let bits = (0..height * width).map(|i| f(i / width, i % width)).collect();
        BinaryMask { height, width, bits }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// `1.0` for foreground, `0.0` for background.
    pub fn to_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    /// Foreground pixels with a 4-neighbour in the background. With
    /// `image_edge`, pixels on the image border also count.
    pub fn boundary(&self, image_edge: bool) -> Vec<(usize, usize)> {
        let (h, w) = (self.height, self.width);
        let mut out = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if !self.get(y, x) {
                    continue;
                }
                let neighbours = [
                    (y > 0).then(|| (y - 1, x)),
                    (y + 1 < h).then(|| (y + 1, x)),
                    (x > 0).then(|| (y, x - 1)),
                    (x + 1 < w).then(|| (y, x + 1)),
                ];
                let on_edge = neighbours.iter().any(|n| n.is_none());
                let touches_bg = neighbours.iter().flatten().any(|&(ny, nx)| !self.get(ny, nx));
                if touches_bg || (image_edge && on_edge) {
                    out.push((y, x));
                }
            }
        }
        out
    }

    fn check_same(&self, other: &BinaryMask) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::Shape(format!(
                "mask {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }

    fn overlap(&self, other: &BinaryMask) -> usize {
        self.bits.iter().zip(&other.bits).filter(|(a, b)| **a && **b).count()
    }
}

/// `2|P ∩ G| / (|P| + |G|)`, with two empty masks scoring 1.
pub fn dsc(p: &BinaryMask, g: &BinaryMask) -> Result<f64> {
    p.check_same(g)?;
    let total = p.count() + g.count();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * p.overlap(g) as f64 / total as f64)
}

/// `|P ∩ G| / |P ∪ G|`, with two empty masks scoring 1.
pub fn iou(p: &BinaryMask, g: &BinaryMask) -> Result<f64> {
    p.check_same(g)?;
    let inter = p.overlap(g);
    let union = p.count() + g.count() - inter;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(values: &mut [f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(values.len() - 1);
    let frac = pos - lo as f64;
    Some(values[lo] + (values[hi] - values[lo]) * frac)
}

fn directed(from: &[(usize, usize)], to: &[(usize, usize)]) -> Vec<f64> {
    from.iter()
        .map(|&(y, x)| {
            to.iter()
                .map(|&(ty, tx)| {
                    let dy = y as f64 - ty as f64;
                    let dx = x as f64 - tx as f64;
                    dy * dy + dx * dx
                })
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect()
}

/// How the two directed distance sets are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Hd95Mode {
    /// Larger of the two directed 95th percentiles.
    #[default]
    MaxOfDirected,
    /// 95th percentile of both directed sets pooled together.
    Pooled,
}

/// 95th percentile surface distance in pixels; `None` if either mask is
/// empty.
pub fn hd95(p: &BinaryMask, g: &BinaryMask) -> Result<Option<f64>> {
    hd95_with(p, g, Hd95Mode::MaxOfDirected)
}

pub fn hd95_with(p: &BinaryMask, g: &BinaryMask, mode: Hd95Mode) -> Result<Option<f64>> {
    p.check_same(g)?;
    if p.is_empty() || g.is_empty() {
        return Ok(None);
    }
    let (bp, bg) = (p.boundary(true), g.boundary(true));
    let mut pg = directed(&bp, &bg);
    let mut gp = directed(&bg, &bp);
    Ok(match mode {
        Hd95Mode::MaxOfDirected => {
            let a = percentile(&mut pg, 95.0).expect("nonempty boundary");
            let b = percentile(&mut gp, 95.0).expect("nonempty boundary");
            Some(a.max(b))
        }
        Hd95Mode::Pooled => {
            pg.extend(gp);
            percentile(&mut pg, 95.0)
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Region {
    Apex,
    Mid,
    Base,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::Apex, Region::Mid, Region::Base];

    pub fn name(self) -> &'static str {
        match self {
            Region::Apex => "apex",
            Region::Mid => "mid",
            Region::Base => "base",
        }
    }
}

static PARTITION_WARNINGS: AtomicUsize = AtomicUsize::new(0);

/// Volumes with fewer than three foreground slices seen by
/// [`regional_partition`] since process start.
pub fn partition_warnings() -> usize {
    PARTITION_WARNINGS.load(Ordering::Relaxed)
}

/// Region of every slice given, per slice in index order, whether its
/// ground truth has foreground. Foreground slices are split in thirds with
/// the remainder going to the middle; empty slices get no region.
pub fn regional_partition(has_foreground: &[bool]) -> Vec<Option<Region>> {
    let fg: Vec<usize> = (0..has_foreground.len()).filter(|&i| has_foreground[i]).collect();
    let mut out = vec![None; has_foreground.len()];
    if fg.len() < 3 {
        if !fg.is_empty() {
            PARTITION_WARNINGS.fetch_add(1, Ordering::Relaxed);
        }
        for &i in &fg {
            out[i] = Some(Region::Mid);
        }
        return out;
    }
    let third = fg.len() / 3;
    for (rank, &i) in fg.iter().enumerate() {
        out[i] = Some(if rank < third {
            Region::Apex
        } else if rank >= fg.len() - third {
            Region::Base
        } else {
            Region::Mid
        });
    }
    out
}

/// Prediction and ground truth for one volume, slices in index order.
#[derive(Debug, Clone)]
pub struct VolumePair {
    pub volume_id: String,
    pub slices: Vec<(usize, BinaryMask, BinaryMask)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SliceMetrics {
    pub volume_id: String,
    pub slice_idx: usize,
    pub region: Option<Region>,
    pub dsc: f64,
    pub iou: f64,
    pub hd95: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub dsc: f64,
    pub iou: f64,
    /// Mean over the defined values; `None` if none were defined.
    pub hd95: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionSummary {
    pub region: Region,
    pub slices: usize,
    pub dsc: Option<f64>,
    pub iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub slices: Vec<SliceMetrics>,
    pub volumes: Vec<(String, Summary)>,
    pub dataset: Summary,
    pub regional: Vec<RegionSummary>,
    pub hd95_missing: usize,
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn summarise<'a>(rows: impl Iterator<Item = &'a SliceMetrics> + Clone) -> Summary {
    Summary {
        dsc: mean(rows.clone().map(|r| r.dsc)).unwrap_or(f64::NAN),
        iou: mean(rows.clone().map(|r| r.iou)).unwrap_or(f64::NAN),
        hd95: mean(rows.filter_map(|r| r.hd95)),
    }
}

/// Per-slice metrics, then per-volume means over all slices, then the mean
/// over volumes. HD95 means skip slices where it is undefined.
pub fn evaluate(volumes: &[VolumePair], hd95_mode: Hd95Mode) -> Result<Report> {
    let mut slices = Vec::new();
    let mut summaries = Vec::with_capacity(volumes.len());
    for vol in volumes {
        let fg: Vec<bool> = vol.slices.iter().map(|(_, _, g)| !g.is_empty()).collect();
        let regions = regional_partition(&fg);
        let rows = exec::map(vol.slices.len(), |i| -> Result<SliceMetrics> {
            let (idx, p, g) = &vol.slices[i];
            Ok(SliceMetrics {
                volume_id: vol.volume_id.clone(),
                slice_idx: *idx,
                region: regions[i],
                dsc: dsc(p, g)?,
                iou: iou(p, g)?,
                hd95: hd95_with(p, g, hd95_mode)?,
            })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        if !rows.is_empty() {
            summaries.push((vol.volume_id.clone(), summarise(rows.iter())));
        }
        slices.extend(rows);
    }
    let dataset = Summary {
        dsc: mean(summaries.iter().map(|s| s.1.dsc)).unwrap_or(f64::NAN),
        iou: mean(summaries.iter().map(|s| s.1.iou)).unwrap_or(f64::NAN),
        hd95: mean(summaries.iter().filter_map(|s| s.1.hd95)),
    };
    let regional = Region::ALL
        .iter()
        .map(|&r| {
            let members: Vec<&SliceMetrics> = slices.iter().filter(|s| s.region == Some(r)).collect();
            RegionSummary {
                region: r,
                slices: members.len(),
                dsc: mean(members.iter().map(|s| s.dsc)),
                iou: mean(members.iter().map(|s| s.iou)),
            }
        })
        .collect();
    let hd95_missing = slices.iter().filter(|s| s.hd95.is_none()).count();
    Ok(Report { slices, volumes: summaries, dataset, regional, hd95_missing })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

impl Report {
    /// Per-slice CSV: `volume_id,slice_idx,region,dsc,iou,hd95`.
    pub fn write_slice_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["volume_id", "slice_idx", "region", "dsc", "iou", "hd95"])?;
        for s in &self.slices {
            w.write_record([
                s.volume_id.clone(),
                s.slice_idx.to_string(),
                s.region.map_or("none", Region::name).to_string(),
                format!("{:.6}", s.dsc),
                format!("{:.6}", s.iou),
                fmt_opt(s.hd95),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Regional CSV: `region,slices,dsc,iou`, plus an `overall` row.
    pub fn write_regional_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["region", "slices", "dsc", "iou", "hd95"])?;
        for r in &self.regional {
            w.write_record([r.region.name().to_string(), r.slices.to_string(), fmt_opt(r.dsc), fmt_opt(r.iou), "NA".into()])?;
        }
        w.write_record([
            "overall".to_string(),
            self.slices.len().to_string(),
            format!("{:.6}", self.dataset.dsc),
            format!("{:.6}", self.dataset.iou),
            fmt_opt(self.dataset.hd95),
        ])?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(n: usize, y0: usize, x0: usize, side: usize) -> BinaryMask {
        BinaryMask::from_fn(n, n, |y, x| (y0..y0 + side).contains(&y) && (x0..x0 + side).contains(&x))
    }

    #[test]
    fn overlap_fixtures() {
        let a = BinaryMask::from_bits(1, 6, &[1, 1, 1, 1, 0, 0]).unwrap();
        let b = BinaryMask::from_bits(1, 6, &[0, 0, 1, 1, 1, 1]).unwrap();
        assert_eq!(dsc(&a, &b).unwrap(), 0.5);
        assert_eq!(iou(&a, &b).unwrap(), 1.0 / 3.0);
        let e = BinaryMask::empty(1, 6);
        assert_eq!(dsc(&e, &e).unwrap(), 1.0);
        assert_eq!(dsc(&a, &e).unwrap(), 0.0);
    }

    #[test]
    fn shifted_square_hd95() {
        let p = square(5, 1, 0, 3);
        let g = square(5, 1, 1, 3);
        assert_eq!(hd95(&p, &g).unwrap(), Some(1.0));
        assert_eq!(hd95(&p, &p).unwrap(), Some(0.0));
        assert_eq!(hd95(&p, &BinaryMask::empty(5, 5)).unwrap(), None);
    }

    #[test]
    fn partition_rules() {
        let count = |v: Vec<Option<Region>>, r| v.iter().filter(|x| **x == Some(r)).count();
        for (n, expect) in [(9, [3, 3, 3]), (10, [3, 4, 3]), (2, [0, 2, 0])] {
            let parts = regional_partition(&vec![true; n]);
            let got = [count(parts.clone(), Region::Apex), count(parts.clone(), Region::Mid), count(parts, Region::Base)];
            assert_eq!(got, expect, "n={n}");
        }
        let parts = regional_partition(&[false, true, true, true, false]);
        assert_eq!(parts, vec![None, Some(Region::Apex), Some(Region::Mid), Some(Region::Base), None]);
    }

    #[test]
    fn percentile_interpolates() {
        assert_eq!(percentile(&mut [0.0, 10.0], 95.0), Some(9.5));
        assert_eq!(percentile(&mut [], 95.0), None);
    }
}
