//! Implementations behind the `cgsnet` subcommands.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{hex_string, ExperimentConfig, SweepPoint, SweepSpec};
use crate::deploy::pack;
use crate::error::{Error, Result};
use crate::hwsim::{format_trace, run_testset, HwConfig, SimReport};
use crate::metrics::{memory_report, Baseline};
use crate::mnist::{self, Dataset};
use crate::modelfile::{ModelFile, ModelMeta};
use crate::network::Network;
use crate::trainer::{self, EpochLog};

pub struct TrainOutcome {
    pub model: ModelFile,
    pub logs: Vec<EpochLog>,
}

/// Trains the configured network and packs it into a model file.
pub fn train_experiment(cfg: &ExperimentConfig, train: &Dataset, test: &Dataset) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut net = Network::init(&cfg.model, cfg.train.seed)?;
    if net.input_width() != train.pixels_per_image() {
        return Err(Error::Config(format!(
            "network takes {} inputs, images have {} pixels",
            net.input_width(),
            train.pixels_per_image()
        )));
    }
    let logs = trainer::train(&mut net, train, test, &cfg.train, |_, _| {})?;
    let final_accuracy = match logs.last() {
        Some(l) => l.test_accuracy,
        None => trainer::deployed_accuracy(&net, test)?,
    };
    let model = ModelFile {
        arch: cfg.model.clone(),
        meta: ModelMeta {
            seed: cfg.train.seed,
            config_hash: cfg.hash(),
            epochs: cfg.train.epochs as u32,
            final_accuracy,
        },
        layers: pack(&net)?,
    };
    Ok(TrainOutcome { model, logs })
}

pub fn write_epoch_log(path: &Path, logs: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    for l in logs {
        w.serialize(l)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse { path: path.to_path_buf(), msg: format!("{other:?}") },
    }
}

/// `train`: reads the config, trains, writes the model file and epoch log.
pub fn cmd_train(config: &Path, model_out: &Path, log_out: &Path) -> Result<TrainOutcome> {
    let cfg = ExperimentConfig::load(config)?;
    let (train, test) = cfg.data.load()?;
    log::info!(
        "training {} on {} images, testing on {} (config {})",
        cfg.name,
        train.len(),
        test.len(),
        &cfg.hash_hex()[..12]
    );
    let out = train_experiment(&cfg, &train, &test)?;
    out.model.save(model_out)?;
    write_epoch_log(log_out, &out.logs)?;
    log::info!("final test accuracy {:.4}", out.model.meta.final_accuracy);
    Ok(out)
}

/// One CSV row per layer plus a `total` row; image-level aggregates repeat
/// on every row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimRow {
    pub scope: String,
    pub images: usize,
    pub accuracy: f64,
    pub mean_cycles: f64,
    pub mean_dense_cycles: f64,
    pub mean_speedup: f64,
    pub mean_nonzero: f64,
    pub layer_mean_cycles: f64,
    pub shifts: u64,
    pub multiplies: u64,
    pub adds: u64,
    pub row_reads: u64,
    pub index_bits_read: u64,
}

pub fn sim_rows(r: &SimReport) -> Vec<SimRow> {
    let base = |scope: String| SimRow {
        scope,
        images: r.images,
        accuracy: r.accuracy,
        mean_cycles: r.mean_cycles,
        mean_dense_cycles: r.mean_dense_cycles,
        mean_speedup: r.mean_speedup,
        mean_nonzero: 0.0,
        layer_mean_cycles: 0.0,
        shifts: 0,
        multiplies: 0,
        adds: 0,
        row_reads: 0,
        index_bits_read: 0,
    };
    let mut rows: Vec<SimRow> = r
        .layers
        .iter()
        .map(|l| SimRow {
            mean_nonzero: l.mean_nonzero,
            layer_mean_cycles: l.mean_cycles,
            shifts: l.shifts,
            multiplies: l.multiplies,
            adds: l.adds,
            row_reads: l.row_reads,
            index_bits_read: l.index_bits_read,
            ..base(format!("layer{}", l.layer))
        })
        .collect();
    let mut total = base("total".into());
    for l in &rows {
        total.mean_nonzero += l.mean_nonzero;
        total.shifts += l.shifts;
        total.multiplies += l.multiplies;
        total.adds += l.adds;
        total.row_reads += l.row_reads;
        total.index_bits_read += l.index_bits_read;
    }
    total.layer_mean_cycles = r.mean_cycles;
    rows.push(total);
    rows
}

pub fn write_sim_csv<W: Write>(out: W, r: &SimReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in sim_rows(r) {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io("<csv output>", e))
}

pub struct SimulateArgs<'a> {
    pub model: &'a Path,
    pub data_dir: &'a Path,
    pub test_limit: Option<usize>,
    pub hw: HwConfig,
    pub trace: Option<&'a Path>,
}

/// `simulate`: runs the accelerator model over the MNIST test split.
pub fn cmd_simulate(args: &SimulateArgs) -> Result<SimReport> {
    let model = ModelFile::load(args.model)?;
    let mut test = mnist::load_split(args.data_dir, "t10k")?;
    if let Some(n) = args.test_limit {
        test = test.take(n);
    }
    let report = run_testset(&model.layers, &test, &args.hw, args.trace.is_some())?;
    if let Some(p) = args.trace {
        let mut text = String::new();
        for (i, t) in report.traces.iter().enumerate() {
            writeln!(text, "image {i} class {} label {}", report.predictions[i], test.label(i)).unwrap();
            text.push_str(&format_trace(t));
        }
        fs::write(p, text).map_err(|e| Error::io(p, e))?;
    }
    Ok(report)
}

/// One trade-off point. `status` is `ok` or `failed: <reason>`; numeric
/// fields of failed rows are empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub id: String,
    pub act_bits: u8,
    pub weight_bits: u8,
    pub ratio: usize,
    pub status: String,
    pub config_hash: String,
    /// Per-layer weight+index bits, `;`-separated.
    pub layer_bits: String,
    pub total_bits: Option<u64>,
    pub index_bits: Option<u64>,
    pub payload_bits: Option<u64>,
    pub reduction: Option<f64>,
    pub accuracy: Option<f64>,
    pub mean_cycles: Option<f64>,
    pub mean_speedup: Option<f64>,
    pub shifts: Option<u64>,
    pub multiplies: Option<u64>,
    pub adds: Option<u64>,
    pub row_reads: Option<u64>,
}

impl SweepRow {
    fn failed(p: &SweepPoint, err: &Error) -> Self {
        SweepRow {
            id: p.id.clone(),
            act_bits: p.act_bits,
            weight_bits: p.weight_bits,
            ratio: p.ratio,
            status: format!("failed: {err}"),
            config_hash: p.config.hash_hex(),
            layer_bits: String::new(),
            total_bits: None,
            index_bits: None,
            payload_bits: None,
            reduction: None,
            accuracy: None,
            mean_cycles: None,
            mean_speedup: None,
            shifts: None,
            multiplies: None,
            adds: None,
            row_reads: None,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

/// Trains, saves and simulates one point; the row joins memory accounting
/// with simulator results.
pub fn run_point(p: &SweepPoint, train: &Dataset, test: &Dataset, dir: &Path) -> Result<SweepRow> {
    let out = train_experiment(&p.config, train, test)?;
    out.model.save(&dir.join(format!("{}.cgsq", p.id)))?;
    write_epoch_log(&dir.join(format!("{}.epochs.csv", p.id)), &out.logs)?;
    let mem = memory_report(&p.config.model, &Baseline::w8_dense(&p.config.model.widths))?;
    let sim = run_testset(&out.model.layers, test, &p.config.hw, false)?;
    let (shifts, multiplies, adds) = sim.total_ops();
    Ok(SweepRow {
        id: p.id.clone(),
        act_bits: p.act_bits,
        weight_bits: p.weight_bits,
        ratio: p.ratio,
        status: "ok".into(),
        config_hash: p.config.hash_hex(),
        layer_bits: mem.layers.iter().map(|l| l.total_bits().to_string()).collect::<Vec<_>>().join(";"),
        total_bits: Some(mem.total_bits),
        index_bits: Some(mem.index_bits),
        payload_bits: Some(out.model.payload_bits().iter().sum::<usize>() as u64),
        reduction: Some(mem.reduction),
        accuracy: Some(sim.accuracy),
        mean_cycles: Some(sim.mean_cycles),
        mean_speedup: Some(sim.mean_speedup),
        shifts: Some(shifts),
        multiplies: Some(multiplies),
        adds: Some(adds),
        row_reads: Some(sim.total_row_reads()),
    })
}

fn read_rows(path: &Path) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_io(path, e))).collect()
}

fn write_rows(path: &Path, rows: &[SweepRow]) -> Result<()> {
    // write then rename so an interrupted run never leaves a partial row file
    let tmp = path.with_extension("csv.tmp");
    {
        let mut w = csv::Writer::from_path(&tmp).map_err(|e| csv_io(&tmp, e))?;
        for row in rows {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    /// Points run by this invocation (the rest were already complete).
    pub ran: usize,
    /// `None` when the sweep stopped early because of `max_new_points`.
    pub csv: Option<PathBuf>,
}

/// `sweep`: runs every point not already completed, then assembles
/// `<output_dir>/sweep.csv` in spec order. Failed points are recorded and
/// retried on the next invocation. `max_new_points` stops early (for
/// splitting a sweep across sessions).
pub fn cmd_sweep(spec_path: &Path, max_new_points: Option<usize>) -> Result<SweepOutcome> {
    let spec = SweepSpec::load(spec_path)?;
    let dir = spec.output_dir.join("points");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let (train, test) = spec.data.load()?;
    let mut rows = Vec::new();
    let mut ran = 0;
    for p in spec.points() {
        let row_path = dir.join(format!("{}.csv", p.id));
        if let Ok(existing) = read_rows(&row_path) {
            if let [row] = existing.as_slice() {
                if row.is_ok() && row.config_hash == p.config.hash_hex() {
                    log::info!("{}: already complete", p.id);
                    rows.push(row.clone());
                    continue;
                }
            }
        }
        if max_new_points.is_some_and(|m| ran >= m) {
            return Ok(SweepOutcome { rows, ran, csv: None });
        }
        log::info!("{}: training", p.id);
        let row = run_point(&p, &train, &test, &dir).unwrap_or_else(|e| {
            log::warn!("{}: {e}", p.id);
            SweepRow::failed(&p, &e)
        });
        write_rows(&row_path, std::slice::from_ref(&row))?;
        rows.push(row);
        ran += 1;
    }
    let csv_path = spec.output_dir.join("sweep.csv");
    write_rows(&csv_path, &rows)?;
    Ok(SweepOutcome { rows, ran, csv: Some(csv_path) })
}

/// Plot-ready series written by `report`.
pub struct ReportFiles {
    /// Accuracy against log2 of total weight memory bits.
    pub memory: String,
    /// Accuracy against mean cycles per image.
    pub cycles: String,
    pub series: usize,
}

const REQUIRED: [&str; 6] = ["act_bits", "weight_bits", "ratio", "total_bits", "accuracy", "mean_cycles"];

/// Builds gnuplot-style data blocks, one per (A, W) pair in order of first
/// appearance, points sorted by x. Blocks are separated by two blank lines.
pub fn build_report(csv_text: &str, path: &Path) -> Result<ReportFiles> {
    if csv_text.trim().is_empty() {
        return Ok(ReportFiles { memory: String::new(), cycles: String::new(), series: 0 });
    }
    let mut r = csv::Reader::from_reader(csv_text.as_bytes());
    let headers = r.headers().map_err(|e| csv_io(path, e))?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let missing: Vec<&str> = REQUIRED.iter().copied().filter(|c| col(c).is_none()).collect();
    if !missing.is_empty() {
        return Err(Error::Parse { path: path.to_path_buf(), msg: format!("missing columns: {}", missing.join(", ")) });
    }
    let idx: Vec<usize> = REQUIRED.iter().map(|c| col(c).unwrap()).collect();
    let status = col("status");

    type Point = (f64, f64, f64, usize); // log2 bits, cycles, accuracy, ratio
    let mut order: Vec<(u8, u8)> = Vec::new();
    let mut series: BTreeMap<(u8, u8), Vec<Point>> = BTreeMap::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_io(path, e))?;
        if status.is_some_and(|s| rec.get(s) != Some("ok")) {
            continue;
        }
        let bad = |c: &str| Error::Parse { path: path.to_path_buf(), msg: format!("line {}: bad {c}", line + 2) };
        let field = |i: usize| rec.get(idx[i]).unwrap_or("");
        let a: u8 = field(0).parse().map_err(|_| bad("act_bits"))?;
        let w: u8 = field(1).parse().map_err(|_| bad("weight_bits"))?;
        let ratio: usize = field(2).parse().map_err(|_| bad("ratio"))?;
        let bits: f64 = field(3).parse().map_err(|_| bad("total_bits"))?;
        let acc: f64 = field(4).parse().map_err(|_| bad("accuracy"))?;
        let cyc: f64 = field(5).parse().map_err(|_| bad("mean_cycles"))?;
        if !order.contains(&(a, w)) {
            order.push((a, w));
        }
        series.entry((a, w)).or_default().push((bits.log2(), cyc, acc, ratio));
    }
    let (mut memory, mut cycles) = (String::new(), String::new());
    for (k, key) in order.iter().enumerate() {
        let pts = &series[key];
        let sep = if k == 0 { "" } else { "\n\n" };
        let mut by_bits = pts.clone();
        by_bits.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.3.cmp(&y.3)));
        write!(memory, "{sep}# A{}/W{}\n# log2_bits accuracy ratio\n", key.0, key.1).unwrap();
        for p in &by_bits {
            writeln!(memory, "{:.6} {:.6} {}", p.0, p.2, p.3).unwrap();
        }
        let mut by_cycles = pts.clone();
        by_cycles.sort_by(|x, y| x.1.total_cmp(&y.1).then(x.3.cmp(&y.3)));
        write!(cycles, "{sep}# A{}/W{}\n# mean_cycles accuracy ratio\n", key.0, key.1).unwrap();
        for p in &by_cycles {
            writeln!(cycles, "{:.3} {:.6} {}", p.1, p.2, p.3).unwrap();
        }
    }
    Ok(ReportFiles { memory, cycles, series: order.len() })
}

/// `report`: writes `memory.dat` and `cycles.dat` into `out_dir`.
pub fn cmd_report(csv_path: &Path, out_dir: &Path) -> Result<ReportFiles> {
    let text = fs::read_to_string(csv_path).map_err(|e| Error::io(csv_path, e))?;
    let files = build_report(&text, csv_path)?;
    if files.series == 0 {
        log::warn!("{}: no completed rows, writing empty series", csv_path.display());
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for (name, body) in [("memory.dat", &files.memory), ("cycles.dat", &files.cycles)] {
        let p = out_dir.join(name);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    }
    Ok(files)
}

/// `inspect`: architecture, metadata, mask density and memory report.
pub fn inspect(model: &ModelFile) -> Result<String> {
    let a = &model.arch;
    let mut s = String::new();
    writeln!(s, "widths        {:?}", a.widths).unwrap();
    writeln!(
        s,
        "precision     A{} / W{} (output layer W{})",
        a.act_bits, a.weight_bits, a.output_weight_bits
    )
    .unwrap();
    match &a.cgs {
        Some(c) => writeln!(s, "cgs           block {} ratio {}X seed {}", c.block_size, c.ratio, c.seed).unwrap(),
        None => writeln!(s, "cgs           none").unwrap(),
    }
    writeln!(s, "seed          {}", model.meta.seed).unwrap();
    writeln!(s, "config hash   {}", hex_string(&model.meta.config_hash)).unwrap();
    writeln!(s, "epochs        {}", model.meta.epochs).unwrap();
    writeln!(s, "accuracy      {:.4}", model.meta.final_accuracy).unwrap();
    let mem = memory_report(a, &Baseline::w8_dense(&a.widths))?;
    let payload = model.payload_bits();
    writeln!(s, "layer  shape       W  density  weight_bits  index_bits  payload_bits").unwrap();
    for ((p, m), bits) in model.layers.iter().zip(&mem.layers).zip(&payload) {
        let density = p.mask.as_ref().map_or(1.0, |k| k.kept_elements() as f64 / (k.rows() * k.cols()) as f64);
        writeln!(
            s,
            "{:<6} {:<11} {:<2} {:<8.4} {:<12} {:<11} {}",
            m.layer,
            format!("{}x{}", m.rows, m.cols),
            p.wspec.bits(),
            density,
            m.weight_bits,
            m.index_bits,
            bits
        )
        .unwrap();
    }
    writeln!(
        s,
        "total {} bits ({} index), {:.2}X smaller than {}",
        mem.total_bits, mem.index_bits, mem.reduction, mem.baseline
    )
    .unwrap();
    Ok(s)
}

pub fn cmd_inspect(path: &Path) -> Result<String> {
    inspect(&ModelFile::load(path)?)
}
