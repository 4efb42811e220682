//! Closed-form weight-memory and operation accounting.
//!
//! Memory counts stored weights plus CGS block indices. Batch-norm constants
//! and activations are not counted (activations are never stored).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::Architecture;
use crate::sparsity::{CgsMask, SUPPORTED_RATIOS};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMemory {
    pub layer: usize,
    pub rows: usize,
    pub cols: usize,
    pub bits: u8,
    /// 1 for dense layers.
    pub ratio: usize,
    pub weight_bits: u64,
    pub index_bits: u64,
}

impl LayerMemory {
    pub fn total_bits(&self) -> u64 {
        self.weight_bits + self.index_bits
    }
}

/// What a reduction factor is measured against.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Baseline {
    Arch { name: String, arch: Architecture },
    /// Every layer dense at 32 bits.
    Float32,
}

impl Baseline {
    /// Dense 8-bit weights on the same widths, the usual MNIST reference.
    pub fn w8_dense(widths: &[usize]) -> Self {
        Baseline::Arch {
            name: "W8/1X".into(),
            arch: Architecture::mlp(widths, 8, 8, None),
        }
    }

    pub fn name(&self) -> &str {
        match self {
            Baseline::Arch { name, .. } => name,
            Baseline::Float32 => "FP32/1X",
        }
    }

    fn total_bits(&self, widths: &[usize]) -> Result<u64> {
        match self {
            Baseline::Arch { arch, .. } => {
                if arch.widths != widths {
                    return Err(Error::Config(format!(
                        "baseline widths {:?} differ from {:?}",
                        arch.widths, widths
                    )));
                }
                Ok(layer_memory(arch)?.iter().map(LayerMemory::total_bits).sum())
            }
            Baseline::Float32 => Ok(widths.windows(2).map(|w| (w[0] * w[1] * 32) as u64).sum()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub layers: Vec<LayerMemory>,
    pub weight_bits: u64,
    pub index_bits: u64,
    pub total_bits: u64,
    pub baseline: String,
    pub baseline_bits: u64,
    /// `baseline_bits / total_bits`.
    pub reduction: f64,
}

/// Per-layer weight and index bits. CGS layers store
/// `rows × per_row × block` weights (padding columns included) and
/// `grid_rows × per_row` indices of `ceil(log2(grid_cols))` bits.
pub fn layer_memory(arch: &Architecture) -> Result<Vec<LayerMemory>> {
    arch.validate()?;
    let mut out = Vec::with_capacity(arch.num_layers());
    for l in 0..arch.num_layers() {
        let (rows, cols) = (arch.widths[l], arch.widths[l + 1]);
        let bits = arch.layer_weight_bits(l);
        let m = match arch.layer_cgs(l) {
            Some(cfg) => {
                let shape = CgsMask::fc(rows, cols, cfg)?;
                LayerMemory {
                    layer: l,
                    rows,
                    cols,
                    bits,
                    ratio: cfg.ratio,
                    weight_bits: (rows * shape.packed_cols()) as u64 * bits as u64,
                    index_bits: (shape.grid_rows() * shape.per_row()) as u64 * shape.index_bits() as u64,
                }
            }
            None => LayerMemory {
                layer: l,
                rows,
                cols,
                bits,
                ratio: 1,
                weight_bits: (rows * cols) as u64 * bits as u64,
                index_bits: 0,
            },
        };
        out.push(m);
    }
    Ok(out)
}

pub fn memory_report(arch: &Architecture, baseline: &Baseline) -> Result<MemoryReport> {
    let layers = layer_memory(arch)?;
    let weight_bits = layers.iter().map(|l| l.weight_bits).sum();
    let index_bits = layers.iter().map(|l| l.index_bits).sum();
    let total_bits = weight_bits + index_bits;
    let baseline_bits = baseline.total_bits(&arch.widths)?;
    Ok(MemoryReport {
        layers,
        weight_bits,
        index_bits,
        total_bits,
        baseline: baseline.name().to_string(),
        baseline_bits,
        reduction: baseline_bits as f64 / total_bits as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerOps {
    pub layer: usize,
    pub nonzero_inputs: f64,
    /// Mean outputs reachable from one input through kept blocks.
    pub reach: f64,
    pub shifts: f64,
    pub multiplies: f64,
}

impl LayerOps {
    pub fn ops(&self) -> f64 {
        self.shifts + self.multiplies
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpReport {
    pub layers: Vec<LayerOps>,
    pub shifts: f64,
    pub multiplies: f64,
}

impl OpReport {
    pub fn total(&self) -> f64 {
        self.shifts + self.multiplies
    }
}

/// MAC-equivalent operations per image: nonzero inputs × outputs reachable
/// through kept blocks. Layers with weights of at most `shift_max_bits` bits
/// count shifts, others multiplies.
pub fn op_report(arch: &Architecture, mean_nonzero: &[f64], shift_max_bits: u8) -> Result<OpReport> {
    arch.validate()?;
    if mean_nonzero.len() != arch.num_layers() {
        return Err(Error::Shape(format!(
            "{} nonzero counts for {} layers",
            mean_nonzero.len(),
            arch.num_layers()
        )));
    }
    let mut layers = Vec::with_capacity(arch.num_layers());
    for (l, &nz) in mean_nonzero.iter().enumerate() {
        let (rows, cols) = (arch.widths[l], arch.widths[l + 1]);
        let reach = match arch.layer_cgs(l) {
            Some(cfg) => {
                let m = CgsMask::fc(rows, cols, cfg)?;
                m.kept_elements() as f64 / rows as f64
            }
            None => cols as f64,
        };
        let ops = nz * reach;
        let shift = arch.layer_weight_bits(l) <= shift_max_bits;
        layers.push(LayerOps {
            layer: l,
            nonzero_inputs: nz,
            reach,
            shifts: if shift { ops } else { 0.0 },
            multiplies: if shift { 0.0 } else { ops },
        });
    }
    Ok(OpReport {
        shifts: layers.iter().map(|l| l.shifts).sum(),
        multiplies: layers.iter().map(|l| l.multiplies).sum(),
        layers,
    })
}

/// Ratios in increasing order of compression.
pub fn sweep_ratios() -> &'static [usize] {
    &SUPPORTED_RATIOS
}
