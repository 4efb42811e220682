//! Functional and cycle-level model of the fully-connected accelerator.
//!
//! Each layer consumes its input neurons serially: the zero-skipping front
//! end emits the indices of non-zero inputs, each index addresses one row of
//! the compressed weight memory, the index demux routes the stored blocks to
//! their MAC units, and all MAC units accumulate in parallel. After the last
//! input the batch-norm stage applies `γ'`/`β'` and the activation quantizer.
//!
//! Accumulators are integers in units of `input_lsb × weight_lsb`. For 1-3
//! bit weights a MAC is `acc ± ((a << F) >> s)` where `F` is the weight grid's
//! fractional bit count and `s` the encoded shift; 8-bit weights use an
//! integer multiplier.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::deploy::{check_chain, PackedLayer};
use crate::error::{Error, Result};
use crate::mnist::Dataset;
use crate::quant::QuantSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HwConfig {
    /// MAC units per layer; `None` means one per output neuron.
    pub mac_parallelism: Option<usize>,
    /// Weights per physical memory row.
    pub sram_row_width: usize,
    /// Widest weight precision served by shifters instead of multipliers.
    pub shift_mac_max_bits: u8,
    pub pipeline_enabled: bool,
    pub zero_skipping: bool,
    /// Cycles per layer for the batch-norm multiply-add and activation register.
    pub layer_overhead: u64,
    /// Signed accumulator width.
    pub acc_bits: u32,
    /// Round `γ'` and `β'` to this many fractional bits before use; `None`
    /// keeps them at full precision (bit-identical to the reference).
    pub bn_frac_bits: Option<u32>,
}

impl Default for HwConfig {
    fn default() -> Self {
        HwConfig {
            mac_parallelism: None,
            sram_row_width: 512,
            shift_mac_max_bits: 3,
            pipeline_enabled: true,
            zero_skipping: true,
            layer_overhead: 2,
            acc_bits: 32,
            bn_frac_bits: None,
        }
    }
}

impl HwConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sram_row_width == 0
            || self.mac_parallelism == Some(0)
            || !(2..=63).contains(&self.acc_bits)
            || self.bn_frac_bits.is_some_and(|f| f > 52)
        {
            return Err(Error::Config(format!("invalid hardware configuration {self:?}")));
        }
        Ok(())
    }
}

/// Signed saturating-free accumulator; overflow is an error.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Accumulator {
    value: i64,
    bits: u32,
}

impl Accumulator {
    pub fn new(bits: u32) -> Self {
        Accumulator { value: 0, bits }
    }

    pub fn value(&self) -> i64 {
        self.value
    }

    #[inline]
    fn add(&mut self, term: i64) -> Result<()> {
        let v = self.value + term;
        let lim = 1i64 << (self.bits - 1);
        if v >= lim || v < -lim {
            return Err(Error::Numeric(format!("{}-bit accumulator overflow ({v})", self.bits)));
        }
        self.value = v;
        Ok(())
    }
}

/// `acc ± ((a << F) >> s)` for a signed power-of-two weight code.
pub fn shift_mac(mut acc: Accumulator, a_code: u32, w_code: u8, wspec: &QuantSpec) -> Result<Accumulator> {
    if !wspec.is_shift_encodable() {
        return Err(Error::Config(format!(
            "{}-bit weight table is not shift-encodable",
            wspec.bits()
        )));
    }
    let idx = wspec
        .index_of_code(w_code)
        .ok_or_else(|| Error::Index(format!("weight code {w_code:#b} not in table")))?;
    let (neg, shift) = wspec.shift_of(idx).expect("checked shift-encodable");
    let term = ((a_code as i64) << wspec.frac_bits()) >> shift;
    acc.add(if neg { -term } else { term })?;
    Ok(acc)
}

/// `acc + a · m` with `m` the weight's integer mantissa.
pub fn multiply_mac(mut acc: Accumulator, a_code: u32, w_code: u8, wspec: &QuantSpec) -> Result<Accumulator> {
    let idx = wspec
        .index_of_code(w_code)
        .ok_or_else(|| Error::Index(format!("weight code {w_code:#b} not in table")))?;
    acc.add(a_code as i64 * wspec.mantissa(idx) as i64)?;
    Ok(acc)
}

/// Dense weight column for one active input: one weight mantissa per output
/// neuron (zero where the input's block-row dropped the block), plus the
/// number of stored weights read.
pub fn decompress_fetch(packed: &PackedLayer, active_input: usize) -> Result<(Vec<i32>, usize)> {
    if active_input >= packed.inputs() {
        return Err(Error::Index(format!(
            "input {active_input} >= layer width {}",
            packed.inputs()
        )));
    }
    let mut out = vec![0i32; packed.outputs()];
    let row = packed.packed_codes.row(active_input);
    let mant = |c: u8| packed.wspec.index_of_code(c).map_or(0, |i| packed.wspec.mantissa(i));
    match &packed.mask {
        None => {
            for (o, &c) in out.iter_mut().zip(row) {
                *o = mant(c);
            }
        }
        Some(m) => {
            let x = m.block_size();
            for (slot, &bc) in packed.indices.row(active_input / x).iter().enumerate() {
                for t in 0..x {
                    let dst = bc as usize * x + t;
                    if dst < out.len() {
                        out[dst] = mant(row[slot * x + t]);
                    }
                }
            }
        }
    }
    Ok((out, packed.row_width()))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerTrace {
    pub inputs: usize,
    pub nonzero_inputs: usize,
    /// Cycles with zero skipping (or dense, if skipping is disabled).
    pub cycles: u64,
    /// Cycles with every input consuming a slot.
    pub dense_cycles: u64,
    pub row_reads: u64,
    pub index_bits_read: u64,
    pub shifts: u64,
    pub multiplies: u64,
    pub adds: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CycleCount {
    pub cycles: u64,
    pub dense_cycles: u64,
}

impl CycleCount {
    pub fn speedup(&self) -> f64 {
        self.dense_cycles as f64 / self.cycles as f64
    }
}

/// Per-image cycles: the slowest stage when pipelined (steady-state
/// throughput under handshaking), otherwise the sum of stages.
pub fn cycle_count(trace: &[LayerTrace], hw: &HwConfig) -> CycleCount {
    let fold = |f: fn(&LayerTrace) -> u64| {
        if hw.pipeline_enabled {
            trace.iter().map(f).max().unwrap_or(0)
        } else {
            trace.iter().map(f).sum()
        }
    };
    CycleCount { cycles: fold(|t| t.cycles), dense_cycles: fold(|t| t.dense_cycles) }
}

struct SimLayer<'a> {
    packed: &'a PackedLayer,
    /// `mantissa` per stored weight.
    mant: Array2<i32>,
    /// `(negative, shift)` per stored weight when the shift datapath is used.
    shifts: Option<Array2<(bool, u32)>>,
    /// Destination output of each stored column, per block-row.
    routes: Vec<Vec<u32>>,
    block_size: usize,
    lanes: u64,
    gamma: Vec<f64>,
    beta: Vec<f64>,
}

/// Simulator bound to an immutable list of packed layers.
pub struct Simulator<'a> {
    layers: Vec<SimLayer<'a>>,
    hw: HwConfig,
}

impl<'a> Simulator<'a> {
    pub fn new(packed: &'a [PackedLayer], hw: &HwConfig) -> Result<Self> {
        hw.validate()?;
        check_chain(packed)?;
        let mut layers = Vec::with_capacity(packed.len());
        for p in packed {
            let use_shift = p.wspec.bits() <= hw.shift_mac_max_bits;
            if use_shift && !p.wspec.is_shift_encodable() {
                return Err(Error::Config(format!(
                    "{}-bit weights routed to shifters but levels are not signed powers of two",
                    p.wspec.bits()
                )));
            }
            let shifts = use_shift.then(|| {
                p.packed_codes.mapv(|c| {
                    p.wspec
                        .index_of_code(c)
                        .and_then(|i| p.wspec.shift_of(i))
                        .unwrap_or((false, 0))
                })
            });
            let (routes, block_size) = match &p.mask {
                None => (vec![(0..p.outputs() as u32).collect()], p.inputs().max(1)),
                Some(m) => {
                    let x = m.block_size();
                    let routes = p
                        .indices
                        .rows()
                        .into_iter()
                        .map(|kept| {
                            kept.iter()
                                .flat_map(|&bc| (0..x as u32).map(move |t| bc * x as u32 + t))
                                .collect()
                        })
                        .collect();
                    (routes, x)
                }
            };
            let lanes = hw.mac_parallelism.unwrap_or(p.outputs()) as u64;
            let bn = |v: &f64| match hw.bn_frac_bits {
                Some(f) => {
                    let scale = (1u64 << f) as f64;
                    (v * scale).round() / scale
                }
                None => *v,
            };
            let gamma = p.gamma_prime.iter().map(bn).collect();
            let beta = p.beta_prime.iter().map(bn).collect();
            layers.push(SimLayer { packed: p, mant: p.packed_mantissas(), shifts, routes, block_size, lanes, gamma, beta });
        }
        Ok(Simulator { layers, hw: hw.clone() })
    }

    pub fn hw(&self) -> &HwConfig {
        &self.hw
    }

    /// Runs one image of raw pixels; returns the class, the output-layer
    /// values and the per-layer trace.
    pub fn simulate_image(&self, pixels: &[u8]) -> Result<(u8, Vec<f64>, Vec<LayerTrace>)> {
        let first = self.layers[0].packed;
        if pixels.len() != first.inputs() {
            return Err(Error::Contract(format!(
                "image has {} pixels, first layer takes {}",
                pixels.len(),
                first.inputs()
            )));
        }
        let mut codes: Vec<u32> = pixels.iter().map(|&p| p as u32).collect();
        let mut traces = Vec::with_capacity(self.layers.len());
        for sl in &self.layers {
            let p = sl.packed;
            let outputs = p.outputs();
            let mut acc = vec![Accumulator::new(self.hw.acc_bits); outputs];
            let mut t = LayerTrace { inputs: p.inputs(), ..Default::default() };
            let frac = p.wspec.frac_bits();
            let (mut reached, mut weights_fetched) = (0u64, 0u64);
            for (i, &a) in codes.iter().enumerate() {
                if a == 0 {
                    // skipped: contributes exactly zero
                    continue;
                }
                t.nonzero_inputs += 1;
                weights_fetched += p.row_width() as u64;
                let route = &sl.routes[if p.mask.is_some() { i / sl.block_size } else { 0 }];
                for (col, &dst) in route.iter().enumerate() {
                    let dst = dst as usize;
                    if dst >= outputs {
                        continue;
                    }
                    reached += 1;
                    let term = match &sl.shifts {
                        Some(sh) => {
                            let (neg, s) = sh[[i, col]];
                            let v = ((a as i64) << frac) >> s;
                            if neg {
                                -v
                            } else {
                                v
                            }
                        }
                        None => a as i64 * sl.mant[[i, col]] as i64,
                    };
                    acc[dst].add(term)?;
                }
            }
            if sl.shifts.is_some() {
                t.shifts = reached;
            } else {
                t.multiplies = reached;
            }
            t.adds = reached;
            let steps_per_input = (outputs as u64).div_ceil(sl.lanes);
            let active = if self.hw.zero_skipping { t.nonzero_inputs as u64 } else { p.inputs() as u64 };
            t.cycles = active * steps_per_input + self.hw.layer_overhead;
            t.dense_cycles = p.inputs() as u64 * steps_per_input + self.hw.layer_overhead;
            t.row_reads = weights_fetched.div_ceil(self.hw.sram_row_width as u64);
            t.index_bits_read = if p.mask.is_some() {
                t.nonzero_inputs as u64 * p.indices.ncols() as u64 * p.index_bits() as u64
            } else {
                0
            };
            traces.push(t);

            let w_lsb = p.wspec.lsb();
            let y: Vec<f64> = acc
                .iter()
                .enumerate()
                .map(|(j, a)| {
                    let xp = (a.value() as f64 * w_lsb) * p.input_lsb;
                    xp * sl.gamma[j] + sl.beta[j]
                })
                .collect();
            match &p.aspec {
                Some(aspec) => codes = y.iter().map(|&v| aspec.quantize_index(v) as u32).collect(),
                None => {
                    let mut best = 0;
                    for (j, &v) in y.iter().enumerate() {
                        if v > y[best] {
                            best = j;
                        }
                    }
                    return Ok((best as u8, y, traces));
                }
            }
        }
        unreachable!("check_chain guarantees an output layer")
    }
}

/// Convenience wrapper around [`Simulator::simulate_image`].
pub fn simulate_image(packed: &[PackedLayer], pixels: &[u8], hw: &HwConfig) -> Result<(u8, Vec<LayerTrace>)> {
    let sim = Simulator::new(packed, hw)?;
    let (class, _, trace) = sim.simulate_image(pixels)?;
    Ok((class, trace))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub layer: usize,
    pub inputs: usize,
    pub mean_nonzero: f64,
    pub mean_cycles: f64,
    pub mean_dense_cycles: f64,
    pub shifts: u64,
    pub multiplies: u64,
    pub adds: u64,
    pub row_reads: u64,
    pub index_bits_read: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub predictions: Vec<u8>,
    pub images: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// Per-image cycles (pipelined throughput or summed latency, per config).
    pub mean_cycles: f64,
    pub mean_dense_cycles: f64,
    /// Mean over images of dense cycles / skipped cycles.
    pub mean_speedup: f64,
    pub layers: Vec<LayerSummary>,
    /// Optional per-image traces.
    #[serde(skip)]
    pub traces: Vec<Vec<LayerTrace>>,
}

impl SimReport {
    pub fn total_ops(&self) -> (u64, u64, u64) {
        self.layers.iter().fold((0, 0, 0), |(s, m, a), l| (s + l.shifts, m + l.multiplies, a + l.adds))
    }

    pub fn total_row_reads(&self) -> u64 {
        self.layers.iter().map(|l| l.row_reads).sum()
    }
}

/// Simulates every image in order and aggregates the results.
pub fn run_testset(packed: &[PackedLayer], data: &Dataset, hw: &HwConfig, keep_traces: bool) -> Result<SimReport> {
    let sim = Simulator::new(packed, hw)?;
    let nl = packed.len();
    let mut predictions = Vec::with_capacity(data.len());
    let mut traces = Vec::new();
    let mut sums = vec![LayerTrace::default(); nl];
    let (mut cyc, mut dense, mut speedup) = (0.0, 0.0, 0.0);
    for i in 0..data.len() {
        let (class, _, trace) = sim.simulate_image(data.image(i))?;
        predictions.push(class);
        let cc = cycle_count(&trace, hw);
        cyc += cc.cycles as f64;
        dense += cc.dense_cycles as f64;
        speedup += cc.speedup();
        for (s, t) in sums.iter_mut().zip(&trace) {
            s.nonzero_inputs += t.nonzero_inputs;
            s.cycles += t.cycles;
            s.dense_cycles += t.dense_cycles;
            s.row_reads += t.row_reads;
            s.index_bits_read += t.index_bits_read;
            s.shifts += t.shifts;
            s.multiplies += t.multiplies;
            s.adds += t.adds;
        }
        if keep_traces {
            traces.push(trace);
        }
    }
    let n = data.len().max(1) as f64;
    let correct = predictions.iter().zip(data.labels()).filter(|(p, t)| p == t).count();
    let layers = sums
        .iter()
        .enumerate()
        .map(|(l, s)| LayerSummary {
            layer: l,
            inputs: packed[l].inputs(),
            mean_nonzero: s.nonzero_inputs as f64 / n,
            mean_cycles: s.cycles as f64 / n,
            mean_dense_cycles: s.dense_cycles as f64 / n,
            shifts: s.shifts,
            multiplies: s.multiplies,
            adds: s.adds,
            row_reads: s.row_reads,
            index_bits_read: s.index_bits_read,
        })
        .collect();
    Ok(SimReport {
        images: data.len(),
        correct,
        accuracy: if data.is_empty() { 0.0 } else { correct as f64 / data.len() as f64 },
        predictions,
        mean_cycles: cyc / n,
        mean_dense_cycles: dense / n,
        mean_speedup: speedup / n,
        layers,
        traces,
    })
}

/// One text line per layer: non-zero inputs, cycles, memory-row reads.
pub fn format_trace(trace: &[LayerTrace]) -> String {
    trace
        .iter()
        .enumerate()
        .map(|(l, t)| format!("layer {l} nonzero {} cycles {} row_reads {}\n", t.nonzero_inputs, t.cycles, t.row_reads))
        .collect()
}
