//! MNIST in the standard IDX format (big-endian header, `u8` payload).

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Images (row-major `u8` pixels) with their labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pixels: Vec<u8>,
    labels: Vec<u8>,
    rows: usize,
    cols: usize,
}

impl Dataset {
    pub fn new(pixels: Vec<u8>, labels: Vec<u8>, rows: usize, cols: usize) -> Result<Self> {
        if pixels.len() != labels.len() * rows * cols {
            return Err(Error::Shape(format!(
                "{} pixels for {} images of {rows}×{cols}",
                pixels.len(),
                labels.len()
            )));
        }
        Ok(Dataset { pixels, labels, rows, cols })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn pixels_per_image(&self) -> usize {
        self.rows * self.cols
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.pixels_per_image();
        &self.pixels[i * n..(i + 1) * n]
    }

    /// Raw pixels of images `start..end` as an `images × pixels` matrix.
    pub fn pixel_matrix(&self, start: usize, end: usize) -> Array2<u8> {
        let n = self.pixels_per_image();
        Array2::from_shape_vec((end - start, n), self.pixels[start * n..end * n].to_vec()).expect("slice matches shape")
    }

    pub fn label(&self, i: usize) -> u8 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Pixels of the selected images scaled to `[0, 1]` by 1/255.
    pub fn batch(&self, indices: &[usize]) -> Array2<f64> {
        let n = self.pixels_per_image();
        let mut out = Array2::zeros((indices.len(), n));
        for (r, &i) in indices.iter().enumerate() {
            for (dst, &p) in out.row_mut(r).iter_mut().zip(self.image(i)) {
                *dst = p as f64 / 255.0;
            }
        }
        out
    }

    /// First `n` images (or all, if fewer).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            pixels: self.pixels[..n * self.pixels_per_image()].to_vec(),
            labels: self.labels[..n].to_vec(),
            rows: self.rows,
            cols: self.cols,
        }
    }

    /// Images whose label is in `keep`, relabelled to their position in `keep`.
    pub fn filter_classes(&self, keep: &[u8]) -> Dataset {
        let mut pixels = vec![];
        let mut labels = vec![];
        for i in 0..self.len() {
            if let Some(pos) = keep.iter().position(|&k| k == self.labels[i]) {
                pixels.extend_from_slice(self.image(i));
                labels.push(pos as u8);
            }
        }
        Dataset { pixels, labels, rows: self.rows, cols: self.cols }
    }
}

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Ingest {
            offset: offset as u64,
            msg: format!("file ends inside header field `{what}` ({} bytes total)", bytes.len()),
        })
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let magic = be_u32(bytes, 0, "magic")?;
    if magic != expected {
        return Err(Error::Ingest {
            offset: 0,
            msg: format!("bad IDX magic {magic:#010x}, expected {expected:#010x}"),
        });
    }
    Ok(())
}

fn check_len(bytes: &[u8], header: usize, payload: usize) -> Result<()> {
    let expected = header + payload;
    if bytes.len() != expected {
        return Err(Error::Ingest {
            offset: bytes.len().min(expected) as u64,
            msg: format!("expected {expected} bytes, found {}", bytes.len()),
        });
    }
    Ok(())
}

/// Parses an IDX3 image file: `(count, rows, cols, pixels)`.
pub fn parse_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    check_magic(bytes, IMAGES_MAGIC)?;
    let n = be_u32(bytes, 4, "image count")? as usize;
    let rows = be_u32(bytes, 8, "rows")? as usize;
    let cols = be_u32(bytes, 12, "cols")? as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::Ingest { offset: 8, msg: format!("degenerate image size {rows}×{cols}") });
    }
    check_len(bytes, 16, n * rows * cols)?;
    Ok((n, rows, cols, bytes[16..].to_vec()))
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    check_magic(bytes, LABELS_MAGIC)?;
    let n = be_u32(bytes, 4, "label count")? as usize;
    check_len(bytes, 8, n)?;
    Ok(bytes[8..].to_vec())
}

pub fn encode_images(pixels: &[u8], n: usize, rows: usize, cols: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn tag(path: &Path, e: Error) -> Error {
    match e {
        Error::Ingest { offset, msg } => Error::Ingest { offset, msg: format!("{}: {msg}", path.display()) },
        other => other,
    }
}

pub fn load_pair(images: &Path, labels: &Path) -> Result<Dataset> {
    let (n, rows, cols, pixels) = parse_images(&read(images)?).map_err(|e| tag(images, e))?;
    let labels_v = parse_labels(&read(labels)?).map_err(|e| tag(labels, e))?;
    if labels_v.len() != n {
        return Err(Error::Ingest {
            offset: 4,
            msg: format!("{} labels for {n} images", labels_v.len()),
        });
    }
    if let Some(bad) = labels_v.iter().position(|&l| l > 9) {
        return Err(Error::Ingest { offset: 8 + bad as u64, msg: format!("label {} > 9", labels_v[bad]) });
    }
    Dataset::new(pixels, labels_v, rows, cols)
}

/// Locates `<split>-images[-.]idx3-ubyte` in `dir` (both common spellings).
fn find(dir: &Path, split: &str, kind: &str, idx: u8) -> Result<PathBuf> {
    let candidates = [
        format!("{split}-{kind}-idx{idx}-ubyte"),
        format!("{split}-{kind}.idx{idx}-ubyte"),
    ];
    for c in &candidates {
        let p = dir.join(c);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::io(
        dir.join(&candidates[0]),
        std::io::Error::new(std::io::ErrorKind::NotFound, "MNIST file not found"),
    ))
}

/// Loads one split (`"train"` or `"t10k"`) from `dir`.
pub fn load_split(dir: &Path, split: &str) -> Result<Dataset> {
    load_pair(&find(dir, split, "images", 3)?, &find(dir, split, "labels", 1)?)
}

/// Loads `(train, test)` from a directory holding the four standard files.
pub fn load_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    Ok((load_split(dir, "train")?, load_split(dir, "t10k")?))
}
