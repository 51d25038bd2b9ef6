//! Parameter, FLOP and memory report for one architecture variant.

use std::fmt;

use crate::error::Result;
use crate::model::{Model, Variant};
use crate::profile::{model_size_mb, profile};

#[derive(Debug, Clone, PartialEq)]
pub struct CountRow {
    pub block: String,
    /// Counted on the instantiated modules.
    pub params: usize,
    /// Closed-form count from the analytic profile.
    pub analytic: usize,
    pub flops: u64,
    pub output: (usize, usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CountReport {
    pub variant: Variant,
    pub resolution: (usize, usize),
    pub rows: Vec<CountRow>,
    pub total: usize,
    pub reference: usize,
    pub flops: u64,
    pub size_mb: f64,
    pub peak_activation_bytes: usize,
}

impl CountReport {
    pub fn build(variant: Variant, height: usize, width: usize) -> Result<CountReport> {
        let spec = variant.spec();
        let prof = profile(&spec, height, width)?;
        let model = Model::build(&spec, 0)?;
        let table = model.count_parameters();
        let rows = prof
            .blocks
            .iter()
            .filter(|b| b.name != "input")
            .map(|b| CountRow {
                block: b.name.clone(),
                params: table.rows.iter().find(|r| r.0 == b.name).map_or(0, |r| r.1),
                analytic: b.params,
                flops: b.flops,
                output: b.output,
            })
            .collect();
        Ok(CountReport {
            variant,
            resolution: (height, width),
            rows,
            total: table.total,
            reference: variant.reference_params(),
            flops: prof.flops,
            size_mb: model_size_mb(table.total),
            peak_activation_bytes: prof.peak_activation_bytes(),
        })
    }

    pub fn delta(&self) -> i64 {
        self.total as i64 - self.reference as i64
    }

    pub fn delta_pct(&self) -> f64 {
        100.0 * self.delta() as f64 / self.reference as f64
    }

    pub fn gflops(&self) -> f64 {
        self.flops as f64 / 1e9
    }
}

impl fmt::Display for CountReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "variant: {} ({})", self.variant.name(), self.variant.label())?;
        writeln!(f, "{:<22} {:>12} {:>12} {:>8} {:>10}  output", "block", "params", "analytic", "delta", "GFLOPs")?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<22} {:>12} {:>12} {:>8} {:>10.4}  {}x{}x{}",
                r.block,
                r.params,
                r.analytic,
                r.params as i64 - r.analytic as i64,
                r.flops as f64 / 1e9,
                r.output.0,
                r.output.1,
                r.output.2
            )?;
        }
        writeln!(f, "total parameters: {}", self.total)?;
        writeln!(f, "reference parameters: {}", self.reference)?;
        writeln!(f, "delta vs reference: {:+} ({:+.3}%)", self.delta(), self.delta_pct())?;
        writeln!(f, "GFLOPs at {}x{}: {:.3}", self.resolution.0, self.resolution.1, self.gflops())?;
        writeln!(f, "model size (f32): {:.2} MB", self.size_mb)?;
        write!(f, "peak activation memory (f32, batch 1): {} bytes", self.peak_activation_bytes)
    }
}
