//! Deployment form of a trained network: batch norm folded into one
//! multiply and one add per neuron, and weights quantized and packed into
//! the row-compressed CGS layout.

use ndarray::{Array1, Array2};

use crate::bitpack::{BitReader, BitWriter};
use crate::error::{Error, Result};
use crate::network::{pixel_lsb, LayerParams, Network, BN_EPS};
use crate::quant::QuantSpec;
use crate::sparsity::CgsMask;
use crate::trainer::argmax;

/// `γ' = γ/σ`, `β' = β + ((b - μ)/σ)·γ` from the running statistics.
pub fn fold_bn(layer: &LayerParams) -> Result<(Array1<f64>, Array1<f64>)> {
    let n = layer.outputs();
    let mut gp = Array1::zeros(n);
    let mut bp = Array1::zeros(n);
    for j in 0..n {
        let sigma = layer.running_std[j];
        if !(sigma > BN_EPS) {
            return Err(Error::Numeric(format!(
                "neuron {j}: running std {sigma} not above epsilon {BN_EPS}"
            )));
        }
        gp[j] = layer.gamma[j] / sigma;
        bp[j] = layer.beta[j] + ((layer.b[j] - layer.running_mean[j]) / sigma) * layer.gamma[j];
        if !gp[j].is_finite() || !bp[j].is_finite() {
            return Err(Error::Numeric(format!("neuron {j}: non-finite folded constants")));
        }
    }
    Ok((gp, bp))
}

/// One layer as it sits in accelerator memory.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedLayer {
    pub wspec: QuantSpec,
    /// `None` for the output layer.
    pub aspec: Option<QuantSpec>,
    /// Grid step of this layer's input codes.
    pub input_lsb: f64,
    /// `None` for dense layers (output layer, or CGS ratio 1).
    pub mask: Option<CgsMask>,
    /// Stored weight bit patterns, `inputs × row_width`. Each row is one
    /// memory row: the weights fetched when that input neuron is active.
    pub packed_codes: Array2<u8>,
    /// Block-column index of each kept block, `grid_rows × per_row`; empty
    /// for dense layers.
    pub indices: Array2<u32>,
    pub gamma_prime: Array1<f64>,
    pub beta_prime: Array1<f64>,
}

impl PackedLayer {
    pub fn inputs(&self) -> usize {
        self.packed_codes.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.gamma_prime.len()
    }

    pub fn row_width(&self) -> usize {
        self.packed_codes.ncols()
    }

    pub fn index_bits(&self) -> u32 {
        self.mask.as_ref().map_or(0, CgsMask::index_bits)
    }

    pub fn weight_payload_bits(&self) -> usize {
        self.packed_codes.len() * self.wspec.bits() as usize
    }

    pub fn index_payload_bits(&self) -> usize {
        self.indices.len() * self.index_bits() as usize
    }

    /// Weight stream (rows in order, LSB first) followed by the index stream.
    pub fn payload(&self) -> (Vec<u8>, usize) {
        let mut w = BitWriter::new();
        let bits = self.wspec.bits() as u32;
        for &c in self.packed_codes.iter() {
            w.push(c as u64, bits);
        }
        let ib = self.index_bits();
        for &i in self.indices.iter() {
            w.push(i as u64, ib);
        }
        let n = w.bit_len();
        (w.into_bytes(), n)
    }

    /// Reads back the payload written by [`payload`](Self::payload).
    pub fn codes_from_payload(
        bytes: &[u8],
        bit_len: usize,
        shape: (usize, usize),
        wspec: &QuantSpec,
        index_shape: (usize, usize),
        index_bits: u32,
    ) -> Result<(Array2<u8>, Array2<u32>)> {
        let expected = shape.0 * shape.1 * wspec.bits() as usize + index_shape.0 * index_shape.1 * index_bits as usize;
        if expected != bit_len {
            return Err(Error::Format(format!("payload holds {bit_len} bits, layout needs {expected}")));
        }
        let mut r = BitReader::new(bytes, bit_len)?;
        let mut codes = Vec::with_capacity(shape.0 * shape.1);
        for _ in 0..shape.0 * shape.1 {
            let c = r.read(wspec.bits() as u32)? as u8;
            if wspec.index_of_code(c).is_none() {
                return Err(Error::Format(format!("weight code {c:#b} not in table")));
            }
            codes.push(c);
        }
        let mut idx = Vec::with_capacity(index_shape.0 * index_shape.1);
        for _ in 0..index_shape.0 * index_shape.1 {
            idx.push(r.read(index_bits)? as u32);
        }
        Ok((
            Array2::from_shape_vec(shape, codes).unwrap(),
            Array2::from_shape_vec(index_shape, idx).unwrap(),
        ))
    }

    /// Dense quantized weight matrix (`inputs × outputs`), zero in dropped blocks.
    pub fn unpack(&self) -> Result<Array2<f64>> {
        let values = self.packed_codes.mapv(|c| {
            self.wspec
                .index_of_code(c)
                .map_or(f64::NAN, |i| self.wspec.level(i))
        });
        if values.iter().any(|v| v.is_nan()) {
            return Err(Error::Format("packed code outside the weight table".into()));
        }
        match &self.mask {
            None => Ok(values),
            Some(m) => m.decompress(&values),
        }
    }

    /// Integer weight (in units of the weight grid) for every stored code.
    pub fn packed_mantissas(&self) -> Array2<i32> {
        self.packed_codes
            .mapv(|c| self.wspec.index_of_code(c).map_or(0, |i| self.wspec.mantissa(i)))
    }
}

/// Quantizes, compresses and folds every layer.
pub fn pack(net: &Network) -> Result<Vec<PackedLayer>> {
    let mut out = Vec::with_capacity(net.layers.len());
    let mut lsb = pixel_lsb();
    for layer in &net.layers {
        let bits = layer.weight_indices().mapv(|i| layer.wspec.code(i));
        let (packed_codes, indices) = match &layer.mask {
            Some(m) => m.compress_rowwise(&bits)?,
            None => (bits, Array2::zeros((0, 0))),
        };
        let (gamma_prime, beta_prime) = fold_bn(layer)?;
        out.push(PackedLayer {
            wspec: layer.wspec.clone(),
            aspec: layer.aspec.clone(),
            input_lsb: lsb,
            mask: layer.mask.clone(),
            packed_codes,
            indices,
            gamma_prime,
            beta_prime,
        });
        if let Some(a) = &layer.aspec {
            lsb = a.lsb();
        }
    }
    check_chain(&out)?;
    Ok(out)
}

pub fn check_chain(layers: &[PackedLayer]) -> Result<()> {
    if layers.is_empty() {
        return Err(Error::Contract("no layers".into()));
    }
    for (l, w) in layers.windows(2).enumerate() {
        if w[0].outputs() != w[1].inputs() {
            return Err(Error::Contract(format!(
                "layer {l} emits {} values, layer {} takes {}",
                w[0].outputs(),
                l + 1,
                w[1].inputs()
            )));
        }
        match &w[0].aspec {
            Some(a) if a.lsb() == w[1].input_lsb => {}
            _ => return Err(Error::Contract(format!("layer {l} activation grid does not feed layer {}", l + 1))),
        }
    }
    if layers.last().unwrap().aspec.is_some() {
        return Err(Error::Contract("last layer must not quantize its outputs".into()));
    }
    for (l, p) in layers.iter().enumerate() {
        let cols = p.mask.as_ref().map_or(p.outputs(), CgsMask::packed_cols);
        if p.row_width() != cols || p.beta_prime.len() != p.outputs() {
            return Err(Error::Contract(format!("layer {l} packed shape inconsistent")));
        }
        if let Some(m) = &p.mask {
            if m.cols() != p.outputs() || m.rows() != p.inputs() {
                return Err(Error::Contract(format!("layer {l} mask shape inconsistent")));
            }
        }
    }
    Ok(())
}

/// Folded reference inference over a batch of raw pixel images
/// (`images × pixels`). Returns the output-layer values `y`.
///
/// Per layer `y = ((codes · W) · lsb) · γ' + β'`, the same arithmetic the
/// simulator performs on its integer accumulators.
pub fn infer_folded(layers: &[PackedLayer], pixels: &Array2<u8>) -> Result<Array2<f64>> {
    check_chain(layers)?;
    if pixels.ncols() != layers[0].inputs() {
        return Err(Error::Shape(format!(
            "images have {} pixels, first layer takes {}",
            pixels.ncols(),
            layers[0].inputs()
        )));
    }
    let mut codes = pixels.mapv(|p| p as f64);
    for p in layers {
        let w = p.unpack()?;
        let s = codes.dot(&w);
        let mut y = Array2::zeros(s.raw_dim());
        for ((i, j), v) in s.indexed_iter() {
            let xp = v * p.input_lsb;
            y[[i, j]] = xp * p.gamma_prime[j] + p.beta_prime[j];
        }
        match &p.aspec {
            Some(a) => codes = y.mapv(|v| a.quantize_index(v) as f64),
            None => return Ok(y),
        }
    }
    unreachable!("check_chain guarantees an output layer")
}

pub fn predict_folded(layers: &[PackedLayer], pixels: &Array2<u8>) -> Result<Vec<u8>> {
    let y = infer_folded(layers, pixels)?;
    Ok(y.rows().into_iter().map(argmax).collect())
}
