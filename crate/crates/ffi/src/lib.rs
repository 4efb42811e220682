//! C ABI over model files, MNIST loading and the accelerator simulator.
//!
//! Every fallible call returns a [`CgsStatus`]; on failure a message is kept
//! per thread and can be read with [`cgs_last_error`]. Handles are opaque and
//! must be released with their `_free` function. Passing a null handle to a
//! `_free` function is a no-op.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use cgsnet::hwsim::{run_testset, HwConfig, SimReport, Simulator};
use cgsnet::metrics::{memory_report, Baseline};
use cgsnet::mnist::{self, Dataset};
use cgsnet::modelfile::ModelFile;
use cgsnet::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CgsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Format = 5,
    Numeric = 6,
    Contract = 7,
    Panic = 8,
}

/// Opaque loaded model.
pub struct CgsModel(ModelFile);

/// Opaque image set.
pub struct CgsDataset(Dataset);

/// Opaque simulation result.
pub struct CgsReport(SimReport);

/// Accelerator parameters; `mac_parallelism == 0` means one MAC per output.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct CgsHwConfig {
    pub mac_parallelism: usize,
    pub sram_row_width: usize,
    pub shift_mac_max_bits: u8,
    pub pipeline_enabled: bool,
    pub zero_skipping: bool,
    pub layer_overhead: u64,
    pub acc_bits: u32,
    /// Negative keeps the folded batch-norm constants at full precision.
    pub bn_frac_bits: i32,
}

impl From<&CgsHwConfig> for HwConfig {
    fn from(c: &CgsHwConfig) -> Self {
        HwConfig {
            mac_parallelism: (c.mac_parallelism != 0).then_some(c.mac_parallelism),
            sram_row_width: c.sram_row_width,
            shift_mac_max_bits: c.shift_mac_max_bits,
            pipeline_enabled: c.pipeline_enabled,
            zero_skipping: c.zero_skipping,
            layer_overhead: c.layer_overhead,
            acc_bits: c.acc_bits,
            bn_frac_bits: u32::try_from(c.bn_frac_bits).ok(),
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> CgsStatus {
    match e {
        Error::Config(_) | Error::Parse { .. } => CgsStatus::Config,
        Error::Io { .. } | Error::Ingest { .. } | Error::Csv(_) => CgsStatus::Io,
        Error::Format(_) => CgsStatus::Format,
        Error::Numeric(_) => CgsStatus::Numeric,
        Error::Shape(_) | Error::Index(_) | Error::Contract(_) => CgsStatus::Contract,
    }
}

enum Fail {
    Null(&'static str),
    Arg(String),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> CgsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CgsStatus::Ok,
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("{what} is null"));
            CgsStatus::NullPointer
        }
        Ok(Err(Fail::Arg(msg))) => {
            set_error(msg);
            CgsStatus::InvalidArgument
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            CgsStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn out<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or(Fail::Null(what))
}

unsafe fn path_arg(p: *const c_char, what: &'static str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| Fail::Arg(format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `len`). Returns the full message length, or 0 if
/// there is none.
#[no_mangle]
pub unsafe extern "C" fn cgs_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else { return 0 };
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cgs_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

#[no_mangle]
pub extern "C" fn cgs_hw_config_default() -> CgsHwConfig {
    let d = HwConfig::default();
    CgsHwConfig {
        mac_parallelism: 0,
        sram_row_width: d.sram_row_width,
        shift_mac_max_bits: d.shift_mac_max_bits,
        pipeline_enabled: d.pipeline_enabled,
        zero_skipping: d.zero_skipping,
        layer_overhead: d.layer_overhead,
        acc_bits: d.acc_bits,
        bn_frac_bits: -1,
    }
}

#[no_mangle]
pub unsafe extern "C" fn cgs_model_load(path: *const c_char, model: *mut *mut CgsModel) -> CgsStatus {
    guard(|| {
        let slot = out(model, "model")?;
        *slot = ptr::null_mut();
        let m = ModelFile::load(&path_arg(path, "path")?)?;
        *slot = Box::into_raw(Box::new(CgsModel(m)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn cgs_model_save(model: *const CgsModel, path: *const c_char) -> CgsStatus {
    guard(|| {
        let m = deref(model, "model")?;
        m.0.save(&path_arg(path, "path")?)?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn cgs_model_free(model: *mut CgsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input width, number of classes and layer count.
#[no_mangle]
pub unsafe extern "C" fn cgs_model_shape(
    model: *const CgsModel,
    inputs: *mut usize,
    classes: *mut usize,
    layers: *mut usize,
) -> CgsStatus {
    guard(|| {
        let m = &deref(model, "model")?.0;
        *out(inputs, "inputs")? = m.layers[0].inputs();
        *out(classes, "classes")? = m.layers.last().unwrap().outputs();
        *out(layers, "layers")? = m.layers.len();
        Ok(())
    })
}

/// Test accuracy stored when the model was trained.
#[no_mangle]
pub unsafe extern "C" fn cgs_model_final_accuracy(model: *const CgsModel, accuracy: *mut f64) -> CgsStatus {
    guard(|| {
        *out(accuracy, "accuracy")? = deref(model, "model")?.0.meta.final_accuracy;
        Ok(())
    })
}

/// Weight plus index memory in bits, and the reduction factor against dense
/// 8-bit weights.
#[no_mangle]
pub unsafe extern "C" fn cgs_model_memory(model: *const CgsModel, total_bits: *mut u64, reduction: *mut f64) -> CgsStatus {
    guard(|| {
        let a = &deref(model, "model")?.0.arch;
        let r = memory_report(a, &Baseline::w8_dense(&a.widths))?;
        *out(total_bits, "total_bits")? = r.total_bits;
        *out(reduction, "reduction")? = r.reduction;
        Ok(())
    })
}

/// Simulates one image of `len` raw pixels; writes the class and the
/// per-image cycle count (pipelined or summed per `hw`).
#[no_mangle]
pub unsafe extern "C" fn cgs_classify(
    model: *const CgsModel,
    pixels: *const u8,
    len: usize,
    hw: *const CgsHwConfig,
    class: *mut u8,
    cycles: *mut u64,
) -> CgsStatus {
    guard(|| {
        let m = &deref(model, "model")?.0;
        if pixels.is_null() {
            return Err(Fail::Null("pixels"));
        }
        let hw: HwConfig = deref(hw, "hw")?.into();
        let image = std::slice::from_raw_parts(pixels, len);
        let sim = Simulator::new(&m.layers, &hw)?;
        let (c, _, trace) = sim.simulate_image(image)?;
        *out(class, "class")? = c;
        *out(cycles, "cycles")? = cgsnet::hwsim::cycle_count(&trace, &hw).cycles;
        Ok(())
    })
}

/// Loads an MNIST split (`"train"` or `"t10k"`) from `dir`.
#[no_mangle]
pub unsafe extern "C" fn cgs_dataset_load(dir: *const c_char, split: *const c_char, dataset: *mut *mut CgsDataset) -> CgsStatus {
    guard(|| {
        let slot = out(dataset, "dataset")?;
        *slot = ptr::null_mut();
        let dir = path_arg(dir, "dir")?;
        let split = path_arg(split, "split")?;
        let split = split.to_str().unwrap();
        if split != "train" && split != "t10k" {
            return Err(Fail::Arg(format!("unknown split {split:?}")));
        }
        let d = mnist::load_split(&dir, split)?;
        *slot = Box::into_raw(Box::new(CgsDataset(d)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn cgs_dataset_len(dataset: *const CgsDataset, len: *mut usize) -> CgsStatus {
    guard(|| {
        *out(len, "len")? = deref(dataset, "dataset")?.0.len();
        Ok(())
    })
}

/// Keeps only the first `n` images.
#[no_mangle]
pub unsafe extern "C" fn cgs_dataset_truncate(dataset: *mut CgsDataset, n: usize) -> CgsStatus {
    guard(|| {
        let d = out(dataset, "dataset")?;
        d.0 = d.0.take(n);
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn cgs_dataset_free(dataset: *mut CgsDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Runs the simulator over every image of `dataset`.
#[no_mangle]
pub unsafe extern "C" fn cgs_simulate(
    model: *const CgsModel,
    dataset: *const CgsDataset,
    hw: *const CgsHwConfig,
    report: *mut *mut CgsReport,
) -> CgsStatus {
    guard(|| {
        let slot = out(report, "report")?;
        *slot = ptr::null_mut();
        let m = &deref(model, "model")?.0;
        let d = &deref(dataset, "dataset")?.0;
        let hw: HwConfig = deref(hw, "hw")?.into();
        let r = run_testset(&m.layers, d, &hw, false)?;
        *slot = Box::into_raw(Box::new(CgsReport(r)));
        Ok(())
    })
}

/// Aggregate figures of a simulation.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct CgsReportSummary {
    pub images: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub mean_cycles: f64,
    pub mean_dense_cycles: f64,
    pub mean_speedup: f64,
    pub shifts: u64,
    pub multiplies: u64,
    pub adds: u64,
    pub row_reads: u64,
}

#[no_mangle]
pub unsafe extern "C" fn cgs_report_summary(report: *const CgsReport, summary: *mut CgsReportSummary) -> CgsStatus {
    guard(|| {
        let r = &deref(report, "report")?.0;
        let (shifts, multiplies, adds) = r.total_ops();
        *out(summary, "summary")? = CgsReportSummary {
            images: r.images,
            correct: r.correct,
            accuracy: r.accuracy,
            mean_cycles: r.mean_cycles,
            mean_dense_cycles: r.mean_dense_cycles,
            mean_speedup: r.mean_speedup,
            shifts,
            multiplies,
            adds,
            row_reads: r.total_row_reads(),
        };
        Ok(())
    })
}

/// Predicted class of image `index`.
#[no_mangle]
pub unsafe extern "C" fn cgs_report_prediction(report: *const CgsReport, index: usize, class: *mut u8) -> CgsStatus {
    guard(|| {
        let r = &deref(report, "report")?.0;
        let c = *r
            .predictions
            .get(index)
            .ok_or_else(|| Fail::Arg(format!("image {index} >= {}", r.predictions.len())))?;
        *out(class, "class")? = c;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn cgs_report_free(report: *mut CgsReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}
