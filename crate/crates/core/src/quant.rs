//! Weight and activation quantizers.
//!
//! Every supported level table sits on a power-of-two grid (`lsb`), so a
//! quantized value is an exact integer multiple of `lsb` and dot products
//! over quantized operands are exact in `f64`. Weight tables for 1-3 bits
//! hold only signed powers of two so the simulator can replace multipliers
//! with shifters.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Weight,
    Activation,
}

impl Role {
    pub fn to_byte(self) -> u8 {
        match self {
            Role::Weight => 0,
            Role::Activation => 1,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Role::Weight),
            1 => Some(Role::Activation),
            _ => None,
        }
    }
}

pub const SUPPORTED_BITS: [u8; 4] = [1, 2, 3, 8];

/// Bit width, level table and code assignment for one tensor role.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantSpec {
    role: Role,
    bits: u8,
    levels: Vec<f64>,
    /// `codes[i]` is the stored bit pattern of `levels[i]`.
    codes: Vec<u8>,
    clip: (f64, f64),
    lsb: f64,
    midpoints: Vec<f64>,
    /// `levels[0] / lsb` when the levels are consecutive multiples of `lsb`.
    uniform_base: Option<i64>,
}

impl QuantSpec {
    /// Weight quantizer for `bits` in {1, 2, 3, 8}.
    pub fn weight(bits: u8) -> Result<Self> {
        let (levels, codes, lsb): (Vec<f64>, Vec<u8>, f64) = match bits {
            1 => (vec![-1.0, 1.0], vec![0, 1], 1.0),
            // 00: -1/4, 01: -1/2, 10: +1/2, 11: +1/4
            2 => (
                vec![-0.5, -0.25, 0.25, 0.5],
                vec![0b01, 0b00, 0b11, 0b10],
                0.25,
            ),
            // sign bit (1 = positive) followed by (shift - 1)
            3 => {
                let mut levels = Vec::with_capacity(8);
                let mut codes = Vec::with_capacity(8);
                for shift in 1..=4u8 {
                    levels.push(-(2f64.powi(-(shift as i32))));
                    codes.push(shift - 1);
                }
                for shift in (1..=4u8).rev() {
                    levels.push(2f64.powi(-(shift as i32)));
                    codes.push(0b100 | (shift - 1));
                }
                (levels, codes, 1.0 / 16.0)
            }
            // two's complement Q1.7
            8 => {
                let levels = (-128i32..128).map(|k| k as f64 / 128.0).collect();
                let codes = (-128i32..128).map(|k| k as i8 as u8).collect();
                (levels, codes, 1.0 / 128.0)
            }
            _ => {
                return Err(Error::Config(format!(
                    "unsupported weight bit width {bits} (expected 1, 2, 3 or 8)"
                )))
            }
        };
        Self::from_parts(Role::Weight, bits, levels, codes, lsb)
    }

    /// Quantized-ReLU activation levels for `bits` in {1, 2, 3, 8}.
    pub fn activation(bits: u8) -> Result<Self> {
        let (count, lsb) = match bits {
            1 => (2usize, 1.0),
            2 => (4, 1.0),
            3 => (8, 0.25),
            8 => (256, 1.0 / 128.0),
            _ => {
                return Err(Error::Config(format!(
                    "unsupported activation bit width {bits} (expected 1, 2, 3 or 8)"
                )))
            }
        };
        let levels = (0..count).map(|k| k as f64 * lsb).collect();
        let codes = (0..count).map(|k| k as u8).collect();
        Self::from_parts(Role::Activation, bits, levels, codes, lsb)
    }

    /// Rebuilds a spec from its serialized parts, validating every invariant.
    pub fn from_parts(role: Role, bits: u8, levels: Vec<f64>, codes: Vec<u8>, lsb: f64) -> Result<Self> {
        let bad = |msg: String| Err(Error::Config(format!("invalid {role:?} spec ({bits} bits): {msg}")));
        if !(1..=8).contains(&bits) {
            return bad("bit width out of range".into());
        }
        let max_levels = 1usize << bits;
        if levels.is_empty() || levels.len() > max_levels {
            return bad(format!("{} levels", levels.len()));
        }
        if role == Role::Weight && levels.len() != max_levels {
            return bad("weight tables must use every code".into());
        }
        if codes.len() != levels.len() {
            return bad("code table length differs from level table".into());
        }
        if levels.windows(2).any(|w| !(w[0] < w[1])) || levels.iter().any(|v| !v.is_finite()) {
            return bad("levels must be finite and strictly increasing".into());
        }
        let mut seen = vec![false; max_levels];
        for &c in &codes {
            if c as usize >= max_levels || std::mem::replace(&mut seen[c as usize], true) {
                return bad(format!("code {c:#b} repeated or too wide"));
            }
        }
        if !(lsb > 0.0) || lsb.log2().fract() != 0.0 {
            return bad("lsb must be a positive power of two".into());
        }
        if levels.iter().any(|v| (v / lsb).fract() != 0.0) {
            return bad("levels must be integer multiples of lsb".into());
        }
        let clip = match role {
            Role::Weight => {
                if bits <= 3 && !levels.iter().all(|&v| is_signed_pow2(v)) {
                    return bad("1-3 bit weight levels must be signed powers of two".into());
                }
                if levels.iter().zip(levels.iter().rev()).any(|(a, b)| *a != -*b) && bits <= 3 {
                    return bad("1-3 bit weight levels must be symmetric".into());
                }
                if levels[0] < -1.0 || *levels.last().unwrap() > 1.0 {
                    return bad("weight levels must lie in [-1, 1]".into());
                }
                (-1.0, 1.0)
            }
            Role::Activation => {
                if levels[0] != 0.0 {
                    return bad("activation levels must start at zero".into());
                }
                (0.0, *levels.last().unwrap())
            }
        };
        let midpoints = levels.windows(2).map(|w| (w[0] + w[1]) / 2.0).collect();
        let base = (levels[0] / lsb) as i64;
        let uniform_base = levels
            .iter()
            .enumerate()
            .all(|(i, &v)| v / lsb == (base + i as i64) as f64)
            .then_some(base);
        Ok(QuantSpec { role, bits, levels, codes, clip, lsb, midpoints, uniform_base })
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    /// Closed interval outside which the straight-through gradient is zero.
    pub fn clip_range(&self) -> (f64, f64) {
        self.clip
    }

    /// Grid unit; every level is an integer multiple of it.
    pub fn lsb(&self) -> f64 {
        self.lsb
    }

    /// Number of fractional bits of the grid (`lsb = 2^-frac_bits`).
    pub fn frac_bits(&self) -> u32 {
        (-self.lsb.log2()) as u32
    }

    pub fn level(&self, index: u8) -> f64 {
        self.levels[index as usize]
    }

    pub fn code(&self, index: u8) -> u8 {
        self.codes[index as usize]
    }

    pub fn index_of_code(&self, code: u8) -> Option<u8> {
        self.codes.iter().position(|&c| c == code).map(|i| i as u8)
    }

    /// Level expressed as an integer number of `lsb` units.
    pub fn mantissa(&self, index: u8) -> i32 {
        (self.levels[index as usize] / self.lsb) as i32
    }

    /// True when every level is a signed power of two reachable by right-shifting
    /// an operand aligned to this spec's grid.
    pub fn is_shift_encodable(&self) -> bool {
        self.levels
            .iter()
            .all(|&v| is_signed_pow2(v) && v.abs() <= 1.0 && v.abs() >= self.lsb)
    }

    /// `(negative, right_shift)` such that `level = ±2^-right_shift`.
    pub fn shift_of(&self, index: u8) -> Option<(bool, u32)> {
        let v = self.levels[index as usize];
        if !is_signed_pow2(v) || v.abs() > 1.0 {
            return None;
        }
        Some((v < 0.0, (-v.abs().log2()) as u32))
    }

    /// Index of the nearest level. Ties go away from zero for weights and up
    /// for activations; out-of-range inputs saturate.
    ///
    /// The caller guarantees `x` is not NaN.
    #[inline]
    pub fn quantize_index(&self, x: f64) -> u8 {
        match self.uniform_base {
            Some(base) => {
                // x / lsb is exact for a power-of-two lsb, and so is t - floor(t)
                let t = x / self.lsb;
                let f = t.floor();
                let frac = t - f;
                let mut k = f as i64;
                if frac > 0.5 || (frac == 0.5 && k >= 0) {
                    k += 1;
                }
                (k.clamp(base, base + self.levels.len() as i64 - 1) - base) as u8
            }
            None => self.search_index(x),
        }
    }

    fn search_index(&self, x: f64) -> u8 {
        self.midpoints
            .partition_point(|&m| if m >= 0.0 { x >= m } else { x > m }) as u8
    }

    pub fn quantize_value(&self, x: f64) -> Result<f64> {
        if x.is_nan() {
            return Err(Error::Numeric("NaN passed to quantizer".into()));
        }
        Ok(self.levels[self.quantize_index(x) as usize])
    }

    pub fn quantize<'s>(&'s self, x: &[f64]) -> Result<QuantizedTensor<'s>> {
        let mut indices = Vec::with_capacity(x.len());
        for (i, &v) in x.iter().enumerate() {
            if v.is_nan() {
                return Err(Error::Numeric(format!("NaN at element {i} passed to quantizer")));
            }
            indices.push(self.quantize_index(v));
        }
        Ok(QuantizedTensor { spec: self, indices })
    }

    /// Straight-through gradient mask: 1 inside the clip range, else 0.
    #[inline]
    pub fn ste_pass(&self, x_preq: f64) -> bool {
        x_preq >= self.clip.0 && x_preq <= self.clip.1
    }

    pub fn ste_grad_mask(&self, x_preq: &[f64]) -> Vec<u8> {
        x_preq.iter().map(|&x| self.ste_pass(x) as u8).collect()
    }
}

fn is_signed_pow2(v: f64) -> bool {
    v != 0.0 && v.is_finite() && v.abs().log2().fract() == 0.0
}

/// Level indices of a tensor quantized with `spec`; values are implied.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTensor<'s> {
    spec: &'s QuantSpec,
    indices: Vec<u8>,
}

impl<'s> QuantizedTensor<'s> {
    pub fn from_indices(spec: &'s QuantSpec, indices: Vec<u8>) -> Result<Self> {
        if let Some(bad) = indices.iter().find(|&&i| i as usize >= spec.len()) {
            return Err(Error::Index(format!("level index {bad} >= {}", spec.len())));
        }
        Ok(QuantizedTensor { spec, indices })
    }

    pub fn spec(&self) -> &'s QuantSpec {
        self.spec
    }

    pub fn indices(&self) -> &[u8] {
        &self.indices
    }

    pub fn values(&self) -> Vec<f64> {
        self.indices.iter().map(|&i| self.spec.level(i)).collect()
    }

    pub fn bit_codes(&self) -> Vec<u8> {
        self.indices.iter().map(|&i| self.spec.code(i)).collect()
    }
}
