use std::fmt;

use super::rulebook::Rulebook;

/// Multiply-add FLOPs of one rulebook-driven convolution:
/// `2 * pairs * c_in * c_out` for the products plus `2 * n_out * c_out` for bias.
pub fn flops_of(rb: &Rulebook, c_in: usize, c_out: usize) -> u64 {
    conv_flops(rb.num_pairs(), rb.n_out(), c_in, c_out)
}

pub fn conv_flops(pairs: usize, n_out: usize, c_in: usize, c_out: usize) -> u64 {
    2 * pairs as u64 * c_in as u64 * c_out as u64 + 2 * n_out as u64 * c_out as u64
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerFlops {
    pub layer: String,
    pub flops: u64,
    pub active_out: usize,
}

/// Per-layer FLOPs log. Layer names are dot-separated paths; the first
/// component is the pipeline stage.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FlopsReport {
    pub entries: Vec<LayerFlops>,
}

impl FlopsReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, layer: impl Into<String>, flops: u64, active_out: usize) {
        self.entries.push(LayerFlops {
            layer: layer.into(),
            flops,
            active_out,
        });
    }

    pub fn total(&self) -> u64 {
        self.entries.iter().map(|e| e.flops).sum()
    }

    pub fn total_with_prefix(&self, prefix: &str) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.layer.starts_with(prefix))
            .map(|e| e.flops)
            .sum()
    }

    pub fn total_excluding(&self, prefixes: &[&str]) -> u64 {
        self.entries
            .iter()
            .filter(|e| !prefixes.iter().any(|p| e.layer.starts_with(p)))
            .map(|e| e.flops)
            .sum()
    }

    pub fn merge(&mut self, other: FlopsReport) {
        self.entries.extend(other.entries);
    }
}

impl fmt::Display for FlopsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            writeln!(f, "{}\t{}\t{}", e.layer, e.flops, e.active_out)?;
        }
        write!(f, "total\t{}", self.total())
    }
}
