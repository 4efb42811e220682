//! Coarse-grain sparsity (CGS) masks.
//!
//! A weight matrix is cut into `block_size × block_size` tiles. Before
//! training, every block-row keeps exactly `grid_cols / ratio` tiles chosen
//! uniformly at random; all other tiles are zero for the lifetime of the
//! model. Equal counts per block-row make the compressed form a dense
//! rectangle: kept tiles are concatenated left to right and each one carries
//! its original block-column index in `index_bits` bits.
//!
//! For fully-connected layers the matrix is stored `inputs × outputs`, so a
//! block-row is a group of input neurons and one matrix row is the weight
//! vector fetched when that input is active.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::DetRng;

pub const SUPPORTED_RATIOS: [usize; 5] = [1, 2, 4, 8, 16];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CgsConfig {
    pub block_size: usize,
    /// 1/ratio of the blocks are kept.
    pub ratio: usize,
    pub seed: u64,
}

impl CgsConfig {
    pub fn new(block_size: usize, ratio: usize, seed: u64) -> Self {
        CgsConfig { block_size, ratio, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_size == 0 {
            return Err(Error::Config("CGS block size must be positive".into()));
        }
        if !SUPPORTED_RATIOS.contains(&self.ratio) {
            return Err(Error::Config(format!(
                "CGS ratio {} not in {:?}",
                self.ratio, SUPPORTED_RATIOS
            )));
        }
        Ok(())
    }
}

/// Immutable block-sparsity pattern of one layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CgsMask {
    rows: usize,
    cols: usize,
    block_size: usize,
    ratio: usize,
    seed: u64,
    grid_rows: usize,
    grid_cols: usize,
    /// `grid_rows × per_row` sorted block-column indices, row-major.
    kept: Vec<u32>,
}

impl CgsMask {
    /// Mask for a fully-connected `rows × cols` weight matrix.
    ///
    /// Dimensions that are not a multiple of the block size are padded; the
    /// padding never holds weights. The padded block-column count must be
    /// divisible by the ratio.
    pub fn fc(rows: usize, cols: usize, cfg: CgsConfig) -> Result<Self> {
        cfg.validate()?;
        if rows == 0 || cols == 0 {
            return Err(Error::Config("layer dimensions must be positive".into()));
        }
        let grid_rows = rows.div_ceil(cfg.block_size);
        let grid_cols = cols.div_ceil(cfg.block_size);
        if grid_cols % cfg.ratio != 0 {
            return Err(Error::Config(format!(
                "{grid_cols} block columns ({cols} / {}) not divisible by CGS ratio {}",
                cfg.block_size, cfg.ratio
            )));
        }
        let per_row = grid_cols / cfg.ratio;
        let mut rng = DetRng::new(cfg.seed);
        let mut pool: Vec<u32> = Vec::with_capacity(grid_cols);
        let mut kept = Vec::with_capacity(grid_rows * per_row);
        for _ in 0..grid_rows {
            pool.clear();
            pool.extend(0..grid_cols as u32);
            // partial Fisher-Yates: the first per_row slots are a uniform sample
            for i in 0..per_row {
                let j = i + rng.below((grid_cols - i) as u64) as usize;
                pool.swap(i, j);
            }
            let row = &mut pool[..per_row];
            row.sort_unstable();
            kept.extend_from_slice(row);
        }
        Ok(CgsMask {
            rows,
            cols,
            block_size: cfg.block_size,
            ratio: cfg.ratio,
            seed: cfg.seed,
            grid_rows,
            grid_cols,
            kept,
        })
    }

    /// Mask over the `out_ch × in_ch` grid of 2D filters of a convolution layer.
    /// A kept cell keeps `block_size²` whole filters.
    pub fn conv(out_ch: usize, in_ch: usize, cfg: CgsConfig) -> Result<Self> {
        if out_ch % cfg.block_size.max(1) != 0 || in_ch % cfg.block_size.max(1) != 0 {
            return Err(Error::Config(format!(
                "channel counts {out_ch}×{in_ch} not divisible by block size {}",
                cfg.block_size
            )));
        }
        Self::fc(out_ch, in_ch, cfg)
    }

    /// Rebuilds a mask from stored kept indices, checking every invariant.
    pub fn from_kept(rows: usize, cols: usize, cfg: CgsConfig, kept: Vec<u32>) -> Result<Self> {
        cfg.validate()?;
        let grid_rows = rows.div_ceil(cfg.block_size);
        let grid_cols = cols.div_ceil(cfg.block_size);
        if grid_cols % cfg.ratio != 0 {
            return Err(Error::Config("block columns not divisible by ratio".into()));
        }
        let per_row = grid_cols / cfg.ratio;
        if kept.len() != grid_rows * per_row {
            return Err(Error::Shape(format!(
                "expected {} kept indices, got {}",
                grid_rows * per_row,
                kept.len()
            )));
        }
        for row in kept.chunks(per_row.max(1)) {
            if row.windows(2).any(|w| w[0] >= w[1]) || row.iter().any(|&c| c as usize >= grid_cols) {
                return Err(Error::Config("kept indices must be sorted, unique and in range".into()));
            }
        }
        Ok(CgsMask {
            rows,
            cols,
            block_size: cfg.block_size,
            ratio: cfg.ratio,
            seed: cfg.seed,
            grid_rows,
            grid_cols,
            kept,
        })
    }

    pub fn config(&self) -> CgsConfig {
        CgsConfig::new(self.block_size, self.ratio, self.seed)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn ratio(&self) -> usize {
        self.ratio
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn grid_rows(&self) -> usize {
        self.grid_rows
    }

    pub fn grid_cols(&self) -> usize {
        self.grid_cols
    }

    /// Kept blocks per block-row.
    pub fn per_row(&self) -> usize {
        self.grid_cols / self.ratio
    }

    /// Width of one compressed row (in elements, including any column padding).
    pub fn packed_cols(&self) -> usize {
        self.per_row() * self.block_size
    }

    /// `ceil(log2(grid_cols))`.
    pub fn index_bits(&self) -> u32 {
        index_bits_for(self.grid_cols)
    }

    pub fn kept_all(&self) -> &[u32] {
        &self.kept
    }

    pub fn kept_in_row(&self, block_row: usize) -> &[u32] {
        let k = self.per_row();
        &self.kept[block_row * k..(block_row + 1) * k]
    }

    pub fn is_block_kept(&self, block_row: usize, block_col: usize) -> bool {
        self.kept_in_row(block_row).binary_search(&(block_col as u32)).is_ok()
    }

    /// Connection coefficient `C_ij`.
    pub fn element_coeff(&self, i: usize, j: usize) -> Result<u8> {
        if i >= self.rows || j >= self.cols {
            return Err(Error::Index(format!(
                "({i}, {j}) outside {}×{} layer",
                self.rows, self.cols
            )));
        }
        Ok(self.is_block_kept(i / self.block_size, j / self.block_size) as u8)
    }

    /// Dense 0/1 coefficient matrix.
    pub fn dense_coeff(&self) -> Array2<f64> {
        let mut c = Array2::zeros((self.rows, self.cols));
        for br in 0..self.grid_rows {
            let r0 = br * self.block_size;
            let r1 = (r0 + self.block_size).min(self.rows);
            for &bc in self.kept_in_row(br) {
                let c0 = bc as usize * self.block_size;
                let c1 = (c0 + self.block_size).min(self.cols);
                c.slice_mut(ndarray::s![r0..r1, c0..c1]).fill(1.0);
            }
        }
        c
    }

    /// Number of matrix elements inside kept blocks (padding excluded).
    pub fn kept_elements(&self) -> usize {
        let mut total = 0;
        for br in 0..self.grid_rows {
            let h = self.block_size.min(self.rows - br * self.block_size);
            for &bc in self.kept_in_row(br) {
                let c0 = bc as usize * self.block_size;
                total += h * self.block_size.min(self.cols.saturating_sub(c0));
            }
        }
        total
    }

    /// Filter-level mask for a convolution with `kernel_len` taps per filter,
    /// laid out `out_ch × in_ch × kernel_len`.
    pub fn expand_conv(&self, kernel_len: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.rows * self.cols * kernel_len);
        for o in 0..self.rows {
            for i in 0..self.cols {
                let on = self.is_block_kept(o / self.block_size, i / self.block_size);
                out.extend(std::iter::repeat_n(on as u8 as f64, kernel_len));
            }
        }
        out
    }

    /// Row-wise compression: kept blocks of every block-row are concatenated
    /// left to right. Returns the packed matrix (`rows × packed_cols`) and the
    /// block-column index of every kept block (`grid_rows × per_row`).
    ///
    /// Entries outside kept blocks are ignored.
    pub fn compress_rowwise<T: Copy + Default>(&self, dense: &Array2<T>) -> Result<(Array2<T>, Array2<u32>)> {
        self.check_shape(dense.dim())?;
        let x = self.block_size;
        let mut packed = Array2::from_elem((self.rows, self.packed_cols()), T::default());
        for i in 0..self.rows {
            for (slot, &bc) in self.kept_in_row(i / x).iter().enumerate() {
                let c0 = bc as usize * x;
                for t in 0..x {
                    if c0 + t < self.cols {
                        packed[[i, slot * x + t]] = dense[[i, c0 + t]];
                    }
                }
            }
        }
        let indices = Array2::from_shape_vec((self.grid_rows, self.per_row()), self.kept.clone())
            .expect("kept length checked at construction");
        Ok((packed, indices))
    }

    /// Inverse of [`compress_rowwise`](Self::compress_rowwise); dropped
    /// positions become `T::default()`.
    pub fn decompress<T: Copy + Default>(&self, packed: &Array2<T>) -> Result<Array2<T>> {
        if packed.dim() != (self.rows, self.packed_cols()) {
            return Err(Error::Shape(format!(
                "packed matrix {:?}, expected {:?}",
                packed.dim(),
                (self.rows, self.packed_cols())
            )));
        }
        let x = self.block_size;
        let mut dense = Array2::from_elem((self.rows, self.cols), T::default());
        for i in 0..self.rows {
            for (slot, &bc) in self.kept_in_row(i / x).iter().enumerate() {
                let c0 = bc as usize * x;
                for t in 0..x {
                    if c0 + t < self.cols {
                        dense[[i, c0 + t]] = packed[[i, slot * x + t]];
                    }
                }
            }
        }
        Ok(dense)
    }

    fn check_shape(&self, dim: (usize, usize)) -> Result<()> {
        if dim != (self.rows, self.cols) {
            return Err(Error::Shape(format!(
                "matrix {:?} does not match {}×{} mask",
                dim, self.rows, self.cols
            )));
        }
        Ok(())
    }
}

pub fn index_bits_for(grid_cols: usize) -> u32 {
    if grid_cols <= 1 {
        0
    } else {
        usize::BITS - (grid_cols - 1).leading_zeros()
    }
}
