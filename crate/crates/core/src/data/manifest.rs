//! Slice manifest CSV: `patient_id,slice_idx,image_path,mask_path,split`.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Manifest(format!("unknown split {s:?}"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SliceRecord {
    pub patient_id: String,
    pub slice_idx: usize,
    /// Relative to the manifest's directory unless absolute.
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    pub split: Split,
}

pub const HEADER: [&str; 5] = ["patient_id", "slice_idx", "image_path", "mask_path", "split"];

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<SliceRecord>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Manifest> {
        let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        let header = rdr.headers()?.clone();
        if header.iter().collect::<Vec<_>>() != HEADER {
            return Err(Error::Manifest(format!("unexpected header {:?}", header.iter().collect::<Vec<_>>())));
        }
        let mut records = Vec::new();
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let slice_idx = rec[1]
                .parse()
                .map_err(|_| Error::Manifest(format!("row {}: bad slice_idx {:?}", row + 1, &rec[1])))?;
            records.push(SliceRecord {
                patient_id: rec[0].to_string(),
                slice_idx,
                image_path: PathBuf::from(&rec[2]),
                mask_path: PathBuf::from(&rec[3]),
                split: rec[4].parse().map_err(|e| Error::Manifest(format!("row {}: {e}", row + 1)))?,
            });
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let m = Manifest { root, records };
        m.check_disjoint()?;
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?;
        w.write_record(HEADER)?;
        for r in &self.records {
            w.write_record([
                r.patient_id.as_str(),
                &r.slice_idx.to_string(),
                &r.image_path.to_string_lossy(),
                &r.mask_path.to_string_lossy(),
                r.split.name(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &SliceRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Distinct patient ids of a split, in first-appearance order.
    pub fn patients(&self, split: Split) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for r in self.split(split) {
            if !out.contains(&r.patient_id.as_str()) {
                out.push(&r.patient_id);
            }
        }
        out
    }

    /// Every patient must belong to exactly one split.
    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen: std::collections::HashMap<&str, Split> = std::collections::HashMap::new();
        for r in &self.records {
            if let Some(prev) = seen.insert(&r.patient_id, r.split) {
                if prev != r.split {
                    return Err(Error::Manifest(format!("patient {} appears in {prev} and {}", r.patient_id, r.split)));
                }
            }
        }
        Ok(())
    }
}
