//! Fully-connected network state: shadow weights, biases, batch-norm
//! parameters and the per-layer quantizers and CGS masks.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::QuantSpec;
use crate::rng::{derive_seed, DetRng};
use crate::sparsity::{CgsConfig, CgsMask};

/// Added to the batch standard deviation.
pub const BN_EPS: f64 = 1e-4;

/// Input pixels are 8-bit codes on a 1/255 grid.
pub const PIXEL_LEVELS: u32 = 255;

pub fn pixel_lsb() -> f64 {
    1.0 / PIXEL_LEVELS as f64
}

/// Layer widths, precisions and CGS placement of an MLP.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub widths: Vec<usize>,
    /// Hidden-layer activation bits.
    pub act_bits: u8,
    /// Weight bits of every hidden layer.
    pub weight_bits: u8,
    /// Weight bits of the output layer.
    #[serde(default = "default_output_bits")]
    pub output_weight_bits: u8,
    /// CGS applied to every layer except the output layer; `None` = dense.
    pub cgs: Option<CgsConfig>,
}

fn default_output_bits() -> u8 {
    8
}

impl Architecture {
    pub fn mlp(widths: &[usize], act_bits: u8, weight_bits: u8, cgs: Option<CgsConfig>) -> Self {
        Architecture {
            widths: widths.to_vec(),
            act_bits,
            weight_bits,
            output_weight_bits: 8,
            cgs,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len().saturating_sub(1)
    }

    pub fn layer_weight_bits(&self, layer: usize) -> u8 {
        if layer + 1 == self.num_layers() {
            self.output_weight_bits
        } else {
            self.weight_bits
        }
    }

    /// Mask configuration of `layer`, with its derived seed.
    pub fn layer_cgs(&self, layer: usize) -> Option<CgsConfig> {
        let cfg = self.cgs?;
        if layer + 1 == self.num_layers() || cfg.ratio == 1 {
            return None;
        }
        Some(CgsConfig::new(cfg.block_size, cfg.ratio, derive_seed(cfg.seed, layer as u64)))
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 || self.widths.contains(&0) {
            return Err(Error::Config(format!("bad layer widths {:?}", self.widths)));
        }
        QuantSpec::activation(self.act_bits)?;
        QuantSpec::weight(self.weight_bits)?;
        QuantSpec::weight(self.output_weight_bits)?;
        if let Some(c) = self.cgs {
            c.validate()?;
        }
        for l in 0..self.num_layers() {
            if let Some(c) = self.layer_cgs(l) {
                let grid_cols = self.widths[l + 1].div_ceil(c.block_size);
                if grid_cols % c.ratio != 0 {
                    return Err(Error::Config(format!(
                        "layer {l}: {grid_cols} block columns not divisible by CGS ratio {}",
                        c.ratio
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    /// Shadow weights, `inputs × outputs`.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    /// Running standard deviation, `BN_EPS` included.
    pub running_std: Array1<f64>,
    pub mask: Option<CgsMask>,
    pub wspec: QuantSpec,
    /// `None` on the output layer, which emits batch-norm outputs as logits.
    pub aspec: Option<QuantSpec>,
    coeff: Option<Array2<f64>>,
}

impl LayerParams {
    pub fn new(inputs: usize, outputs: usize, wspec: QuantSpec, aspec: Option<QuantSpec>, mask: Option<CgsMask>) -> Result<Self> {
        if let Some(m) = &mask {
            if (m.rows(), m.cols()) != (inputs, outputs) {
                return Err(Error::Shape(format!(
                    "mask {}×{} for {inputs}×{outputs} layer",
                    m.rows(),
                    m.cols()
                )));
            }
        }
        let coeff = mask.as_ref().map(CgsMask::dense_coeff);
        Ok(LayerParams {
            w: Array2::zeros((inputs, outputs)),
            b: Array1::zeros(outputs),
            gamma: Array1::ones(outputs),
            beta: Array1::zeros(outputs),
            running_mean: Array1::zeros(outputs),
            running_std: Array1::ones(outputs),
            mask,
            wspec,
            aspec,
            coeff,
        })
    }

    pub fn inputs(&self) -> usize {
        self.w.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.w.ncols()
    }

    pub fn is_output(&self) -> bool {
        self.aspec.is_none()
    }

    /// Dense `C_ij` matrix, or `None` when every connection is present.
    pub fn coeff(&self) -> Option<&Array2<f64>> {
        self.coeff.as_ref()
    }

    /// Quantized weights with dropped positions forced to exactly zero.
    pub fn quantized_weights(&self) -> Array2<f64> {
        let q = |v: f64| self.wspec.level(self.wspec.quantize_index(v));
        match &self.coeff {
            Some(c) => ndarray::Zip::from(&self.w).and(c).map_collect(|&v, &c| if c == 0.0 { 0.0 } else { q(v) }),
            None => self.w.mapv(q),
        }
    }

    /// Shadow weights for in-place update alongside the mask coefficients.
    pub fn weights_mut(&mut self) -> (&mut Array2<f64>, Option<&Array2<f64>>) {
        (&mut self.w, self.coeff.as_ref())
    }

    /// Level indices of the quantized weights (dropped positions are
    /// meaningless and must be masked by the caller).
    pub fn weight_indices(&self) -> Array2<u8> {
        self.w.mapv(|v| self.wspec.quantize_index(v))
    }

    /// `W ⊙ (1 - C) = 0`.
    pub fn blocks_zero(&self) -> bool {
        match &self.coeff {
            None => true,
            Some(c) => self.w.iter().zip(c).all(|(w, c)| *c == 1.0 || *w == 0.0),
        }
    }

    pub fn within_clip(&self) -> bool {
        let (lo, hi) = self.wspec.clip_range();
        self.w.iter().all(|&v| v >= lo && v <= hi)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub arch: Architecture,
    pub layers: Vec<LayerParams>,
}

impl Network {
    /// Builds masks and draws initial weights, uniform on `±sqrt(6/(fan_in+fan_out))`
    /// inside kept blocks only.
    pub fn init(arch: &Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let n = arch.num_layers();
        let mut layers = Vec::with_capacity(n);
        for l in 0..n {
            let (fan_in, fan_out) = (arch.widths[l], arch.widths[l + 1]);
            let wspec = QuantSpec::weight(arch.layer_weight_bits(l))?;
            let aspec = if l + 1 < n { Some(QuantSpec::activation(arch.act_bits)?) } else { None };
            let mask = arch.layer_cgs(l).map(|c| CgsMask::fc(fan_in, fan_out, c)).transpose()?;
            let mut layer = LayerParams::new(fan_in, fan_out, wspec, aspec, mask)?;
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let mut rng = DetRng::new(derive_seed(seed, 1000 + l as u64));
            for v in layer.w.iter_mut() {
                *v = (2.0 * rng.unit_f64() - 1.0) * limit;
            }
            if let Some(c) = layer.coeff() {
                layer.w = &layer.w * c;
            }
            layers.push(layer);
        }
        Ok(Network { arch: arch.clone(), layers })
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().map_or(0, LayerParams::outputs)
    }

    pub fn input_width(&self) -> usize {
        self.layers.first().map_or(0, LayerParams::inputs)
    }
}
