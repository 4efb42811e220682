//! Versioned little-endian model file holding the deployment form.
//!
//! Layout: `b"CGSQ"`, `u16` version, training metadata, architecture, then
//! per layer the quantizer tables, the CGS mask, the bit-packed weight and
//! index payload and the folded batch-norm vectors. A SHA-256 of everything
//! before it closes the file.

use std::path::Path;

use ndarray::Array1;
use sha2::{Digest, Sha256};

use crate::deploy::{check_chain, PackedLayer};
use crate::error::{Error, Result};
use crate::network::Architecture;
use crate::quant::{QuantSpec, Role};
use crate::sparsity::{CgsConfig, CgsMask};

pub const MAGIC: &[u8; 4] = b"CGSQ";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelMeta {
    pub seed: u64,
    pub config_hash: [u8; 32],
    pub epochs: u32,
    /// Test accuracy of the deployed model after the last epoch.
    pub final_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelFile {
    pub arch: Architecture,
    pub meta: ModelMeta,
    pub layers: Vec<PackedLayer>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&u32::try_from(v).expect("dimension fits u32").to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn spec(&mut self, s: &QuantSpec) {
        self.u8(s.role().to_byte());
        self.u8(s.bits());
        self.u16(s.len() as u16);
        for &v in s.levels() {
            self.f64(v);
        }
        self.bytes(s.codes());
        self.f64(s.lsb());
    }
    fn cgs(&mut self, c: &CgsConfig) {
        self.u32(c.block_size);
        self.u32(c.ratio);
        self.u64(c.seed);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn flag(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(Error::Format(format!("bad flag byte {b} at {}", self.pos - 1))),
        }
    }
    fn spec(&mut self) -> Result<QuantSpec> {
        let role = self.u8()?;
        let role = Role::from_byte(role).ok_or_else(|| Error::Format(format!("unknown quantizer role {role}")))?;
        let bits = self.u8()?;
        let n = self.u16()? as usize;
        let levels = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        let codes = self.take(n)?.to_vec();
        let lsb = self.f64()?;
        QuantSpec::from_parts(role, bits, levels, codes, lsb).map_err(|e| Error::Format(e.to_string()))
    }
    fn cgs(&mut self) -> Result<CgsConfig> {
        Ok(CgsConfig::new(self.u32()?, self.u32()?, self.u64()?))
    }
    fn vec_f64(&mut self, n: usize) -> Result<Array1<f64>> {
        (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>().map(Array1::from)
    }
}

impl ModelFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.bytes(MAGIC);
        w.u16(VERSION);
        w.u64(self.meta.seed);
        w.bytes(&self.meta.config_hash);
        w.u32(self.meta.epochs as usize);
        w.f64(self.meta.final_accuracy);

        let a = &self.arch;
        w.u32(a.widths.len());
        for &x in &a.widths {
            w.u32(x);
        }
        w.u8(a.act_bits);
        w.u8(a.weight_bits);
        w.u8(a.output_weight_bits);
        w.u8(a.cgs.is_some() as u8);
        if let Some(c) = &a.cgs {
            w.cgs(c);
        }

        w.u32(self.layers.len());
        for p in &self.layers {
            w.spec(&p.wspec);
            w.u8(p.aspec.is_some() as u8);
            if let Some(s) = &p.aspec {
                w.spec(s);
            }
            w.f64(p.input_lsb);
            w.u32(p.inputs());
            w.u32(p.outputs());
            w.u32(p.row_width());
            w.u8(p.mask.is_some() as u8);
            if let Some(m) = &p.mask {
                w.cgs(&m.config());
                w.u32(m.kept_all().len());
                for &k in m.kept_all() {
                    w.u32(k as usize);
                }
            }
            let (payload, bit_len) = p.payload();
            w.u64(bit_len as u64);
            w.bytes(&payload);
            for &v in p.gamma_prime.iter().chain(p.beta_prime.iter()) {
                w.f64(v);
            }
        }
        let digest = Sha256::digest(&w.0);
        w.bytes(&digest);
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < 6 + 32 {
            return Err(Error::Format("file too short".into()));
        }
        if &buf[..4] != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = u16::from_le_bytes([buf[4], buf[5]]);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported model file version {version} (expected {VERSION})")));
        }
        let (body, digest) = buf.split_at(buf.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Format("checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 6 };
        let meta = ModelMeta {
            seed: r.u64()?,
            config_hash: r.take(32)?.try_into().unwrap(),
            epochs: r.u32()? as u32,
            final_accuracy: r.f64()?,
        };
        let nw = r.u32()?;
        let widths = (0..nw).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let (act_bits, weight_bits, output_weight_bits) = (r.u8()?, r.u8()?, r.u8()?);
        let cgs = if r.flag()? { Some(r.cgs()?) } else { None };
        let arch = Architecture { widths, act_bits, weight_bits, output_weight_bits, cgs };
        arch.validate().map_err(|e| Error::Format(e.to_string()))?;

        let nl = r.u32()?;
        if nl != arch.num_layers() {
            return Err(Error::Format(format!("{nl} layers for a {}-layer architecture", arch.num_layers())));
        }
        let mut layers = Vec::with_capacity(nl);
        for _ in 0..nl {
            let wspec = r.spec()?;
            let aspec = if r.flag()? { Some(r.spec()?) } else { None };
            let input_lsb = r.f64()?;
            let (inputs, outputs, row_width) = (r.u32()?, r.u32()?, r.u32()?);
            let mask = if r.flag()? {
                let cfg = r.cgs()?;
                let n = r.u32()?;
                let kept = (0..n).map(|_| r.u32().map(|k| k as u32)).collect::<Result<Vec<_>>>()?;
                Some(CgsMask::from_kept(inputs, outputs, cfg, kept).map_err(|e| Error::Format(e.to_string()))?)
            } else {
                None
            };
            let (index_shape, index_bits) = match &mask {
                Some(m) => ((m.grid_rows(), m.per_row()), m.index_bits()),
                None => ((0, 0), 0),
            };
            let bit_len = r.u64()? as usize;
            let payload = r.take(bit_len.div_ceil(8))?;
            let (packed_codes, indices) =
                PackedLayer::codes_from_payload(payload, bit_len, (inputs, row_width), &wspec, index_shape, index_bits)?;
            if let Some(m) = &mask {
                if indices.iter().ne(m.kept_all()) {
                    return Err(Error::Format("index table disagrees with mask".into()));
                }
            }
            let gamma_prime = r.vec_f64(outputs)?;
            let beta_prime = r.vec_f64(outputs)?;
            layers.push(PackedLayer { wspec, aspec, input_lsb, mask, packed_codes, indices, gamma_prime, beta_prime });
        }
        if r.pos != body.len() {
            return Err(Error::Format(format!("{} trailing bytes", body.len() - r.pos)));
        }
        check_chain(&layers).map_err(|e| Error::Format(e.to_string()))?;
        Ok(ModelFile { arch, meta, layers })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }

    /// Serialized payload bits per layer (weights plus indices).
    pub fn payload_bits(&self) -> Vec<usize> {
        self.layers.iter().map(|p| p.payload().1).collect()
    }
}
