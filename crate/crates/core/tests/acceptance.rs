//! Acceptance run: one PASS/FAIL line per check, non-zero exit if any fails.
//!
//! Trains the configurations in `configs/` on MNIST (from `CGSNET_MNIST_DIR`,
//! else `data/mnist` at the workspace root). Trained models are cached under
//! the cargo target directory by config hash, so reruns only simulate.

mod common;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use cgsnet::commands::{train_experiment, write_epoch_log};
use cgsnet::config::ExperimentConfig;
use cgsnet::deploy::{fold_bn, pack, predict_folded, PackedLayer};
use cgsnet::hwsim::{multiply_mac, run_testset, shift_mac, Accumulator, HwConfig, SimReport};
use cgsnet::metrics::{layer_memory, memory_report, op_report, Baseline};
use cgsnet::mnist::{self, Dataset};
use cgsnet::modelfile::ModelFile;
use cgsnet::network::{Architecture, Network};
use cgsnet::quant::QuantSpec;
use cgsnet::rng::DetRng;
use cgsnet::sparsity::CgsConfig;
use cgsnet::trainer::{self, EpochLog, TrainConfig};

// pinned tolerances
const HEADLINE_MIN_ACC: f64 = 0.979;
const BNN_MIN_ACC: f64 = 0.960;
const A8W8_MAX_DROP_1X_4X: f64 = 0.006;
const W1_MIN_DROP_1X_16X: f64 = 0.015;
const REDUCTION_BAND: (f64, f64) = (9.5, 10.5);
const SPEEDUP_BAND: (f64, f64) = (3.0, 5.5);
const BN_FOLD_TOL: f64 = 1e-9;
const FD_BN_TOL: f64 = 1e-5;
const TWO_CLASS_MIN_ACC: f64 = 0.95;

struct Outcome {
    failed: usize,
}

impl Outcome {
    fn line(&mut self, id: &str, ok: bool, what: &str, detail: String) {
        if !ok {
            self.failed += 1;
        }
        println!("{} [{id}] {what}: {detail}", if ok { "PASS" } else { "FAIL" });
    }
}

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn data_dir() -> PathBuf {
    std::env::var_os("CGSNET_MNIST_DIR").map_or_else(|| workspace().join("data/mnist"), PathBuf::from)
}

fn cache_dir() -> PathBuf {
    let d = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&d).unwrap();
    d
}

fn config(name: &str) -> ExperimentConfig {
    let path = workspace().join("configs").join(format!("{name}.toml"));
    let mut cfg = ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{e}"));
    cfg.data.dir = data_dir();
    cfg
}

struct Trained {
    model: ModelFile,
    logs: Vec<EpochLog>,
    sim: SimReport,
}

/// Trains `name` (or loads its cached checkpoint) and simulates it over the
/// full test set.
fn trained(name: &str, train: &Dataset, test: &Dataset) -> Trained {
    let cfg = config(name);
    let stem = cache_dir().join(format!("{name}-{}", &cfg.hash_hex()[..16]));
    let (mpath, lpath) = (stem.with_extension("cgsq"), stem.with_extension("epochs.csv"));
    let cached = ModelFile::load(&mpath).ok().zip(
        csv::Reader::from_path(&lpath)
            .ok()
            .and_then(|mut r| r.deserialize().collect::<Result<Vec<EpochLog>, _>>().ok()),
    );
    let (model, logs) = match cached {
        Some((m, l)) if m.meta.config_hash == cfg.hash() && l.len() == cfg.train.epochs => {
            eprintln!("{name}: cached checkpoint {}", mpath.display());
            (m, l)
        }
        _ => {
            let t = Instant::now();
            eprintln!("{name}: training {} epochs", cfg.train.epochs);
            let out = train_experiment(&cfg, train, test).unwrap();
            out.model.save(&mpath).unwrap();
            write_epoch_log(&lpath, &out.logs).unwrap();
            eprintln!("{name}: trained in {:.0} s", t.elapsed().as_secs_f64());
            (out.model, out.logs)
        }
    };
    let sim = run_testset(&model.layers, test, &cfg.hw, false).unwrap();
    eprintln!("{name}: simulated accuracy {:.4}", sim.accuracy);
    Trained { model, logs, sim }
}

fn pct(x: f64) -> String {
    format!("{:.2}%", 100.0 * x)
}

fn main() -> ExitCode {
    let mut out = Outcome { failed: 0 };
    let dir = data_dir();
    let (train, test) = match mnist::load_dir(&dir) {
        Ok(d) => d,
        Err(e) => {
            println!("FAIL [data] MNIST at {}: {e} (set CGSNET_MNIST_DIR)", dir.display());
            return ExitCode::FAILURE;
        }
    };
    if test.len() != 10_000 || train.len() != 60_000 {
        println!("FAIL [data] expected 60000/10000 images, found {}/{}", train.len(), test.len());
        return ExitCode::FAILURE;
    }

    let head = trained("a8w3_8x", &train, &test);
    out.line(
        "1",
        head.sim.accuracy >= HEADLINE_MIN_ACC,
        "A8/W3 CGS 8X simulator accuracy",
        format!("{} (need >= {})", pct(head.sim.accuracy), pct(HEADLINE_MIN_ACC)),
    );

    let bnn = trained("a1w1_1x", &train, &test);
    out.line(
        "2",
        bnn.sim.accuracy >= BNN_MIN_ACC,
        "A1/W1 CGS 1X accuracy",
        format!("{} (need >= {})", pct(bnn.sim.accuracy), pct(BNN_MIN_ACC)),
    );

    let (w8_1, w8_4) = (trained("a8w8_1x", &train, &test), trained("a8w8_4x", &train, &test));
    let drop = w8_1.sim.accuracy - w8_4.sim.accuracy;
    out.line(
        "3",
        drop <= A8W8_MAX_DROP_1X_4X,
        "A8/W8 accuracy drop 1X -> 4X",
        format!(
            "{} -> {}, drop {} (need <= {})",
            pct(w8_1.sim.accuracy),
            pct(w8_4.sim.accuracy),
            pct(drop),
            pct(A8W8_MAX_DROP_1X_4X)
        ),
    );

    let bnn16 = trained("a1w1_16x", &train, &test);
    let drop = bnn.sim.accuracy - bnn16.sim.accuracy;
    out.line(
        "4",
        drop >= W1_MIN_DROP_1X_16X,
        "W1 accuracy drop 1X -> 16X",
        format!(
            "{} -> {}, drop {} (need >= {})",
            pct(bnn.sim.accuracy),
            pct(bnn16.sim.accuracy),
            pct(drop),
            pct(W1_MIN_DROP_1X_16X)
        ),
    );

    criterion_5(&mut out);

    let s = head.sim.mean_speedup;
    let latency = latency_speedup(&head.model.layers, &test);
    out.line(
        "6",
        (SPEEDUP_BAND.0..=SPEEDUP_BAND.1).contains(&s),
        "zero-skip speedup on the headline model",
        format!(
            "{s:.3} (need [{}, {}]); mean cycles {:.1} vs dense {:.1}; unpipelined latency speedup {latency:.3}",
            SPEEDUP_BAND.0, SPEEDUP_BAND.1, head.sim.mean_cycles, head.sim.mean_dense_cycles
        ),
    );

    let all = [&head, &bnn, &w8_1, &w8_4, &bnn16];
    criterion_7(&mut out, &head, &all, &train, &test);
    criterion_8(&mut out, &head.sim);

    // training sanity examples that carry no criterion number
    two_class(&mut out, &train, &test);
    let untrained = {
        let net = Network::init(&config("a8w3_8x").model, 1).unwrap();
        trainer::deployed_accuracy(&net, &test).unwrap()
    };
    out.line(
        "train-0",
        (0.05..=0.2).contains(&untrained),
        "untrained network is near chance",
        pct(untrained),
    );

    println!("{} check(s) failed", out.failed);
    if out.failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

/// Mean over images of summed dense cycles over summed skipped cycles
/// (per-image latency with every layer run back to back).
fn latency_speedup(layers: &[PackedLayer], test: &Dataset) -> f64 {
    let hw = HwConfig { pipeline_enabled: false, ..HwConfig::default() };
    run_testset(layers, test, &hw, false).unwrap().mean_speedup
}

fn criterion_5(out: &mut Outcome) {
    let w3 = Architecture::mlp(&[784, 512, 512, 10], 8, 3, Some(CgsConfig::new(16, 8, 7)));
    let base = Baseline::Arch { name: "W8/1X".into(), arch: Architecture::mlp(&[784, 512, 512, 10], 8, 8, None) };
    let r = memory_report(&w3, &base).unwrap();
    let in_band = (REDUCTION_BAND.0..=REDUCTION_BAND.1).contains(&r.reduction);

    // 25 sweep points: payload of a packed network against the accounting
    let mut mismatches = Vec::new();
    for (a, w) in [(8, 8), (8, 3), (8, 2), (8, 1), (1, 1)] {
        for ratio in [1, 2, 4, 8, 16] {
            let arch = Architecture::mlp(&[784, 512, 512, 10], a, w, Some(CgsConfig::new(16, ratio, 7)));
            let net = Network::init(&arch, 3).unwrap();
            let packed = pack(&net).unwrap();
            let mem = layer_memory(&arch).unwrap();
            for (l, (p, m)) in packed.iter().zip(&mem).enumerate() {
                let (bytes, bits) = p.payload();
                if bits as u64 != m.total_bits()
                    || p.weight_payload_bits() as u64 != m.weight_bits
                    || p.index_payload_bits() as u64 != m.index_bits
                    || bytes.len() != bits.div_ceil(8)
                {
                    mismatches.push(format!("A{a}W{w} {ratio}X layer {l}: {bits} vs {}", m.total_bits()));
                }
            }
        }
    }
    out.line(
        "5",
        in_band && mismatches.is_empty(),
        "memory accounting",
        format!(
            "W3/8X {} bits vs W8/1X {} bits = {:.2}X (need [{}, {}]); payload == report on 25/25 points: {}",
            r.total_bits,
            r.baseline_bits,
            r.reduction,
            REDUCTION_BAND.0,
            REDUCTION_BAND.1,
            if mismatches.is_empty() { "yes".to_string() } else { mismatches.join("; ") }
        ),
    );
}

fn criterion_7(out: &mut Outcome, head: &Trained, all: &[&Trained], train: &Dataset, test: &Dataset) {
    // simulator against the folded reference on every test image
    let reference = predict_folded(&head.model.layers, &test.pixel_matrix(0, test.len())).unwrap();
    let same = reference.iter().zip(&head.sim.predictions).filter(|(a, b)| a == b).count();
    out.line(
        "7a",
        same == test.len(),
        "simulator argmax == reference argmax",
        format!("{same}/{} images", test.len()),
    );

    // shift datapath against multiplication, every level × every input code
    let mut cases = 0u64;
    let mut bad = 0u64;
    for bits in [1u8, 2, 3] {
        let w = QuantSpec::weight(bits).unwrap();
        for idx in 0..w.len() as u8 {
            let code = w.code(idx);
            for a in 0..=255u32 {
                let s = shift_mac(Accumulator::new(32), a, code, &w).unwrap().value();
                let m = multiply_mac(Accumulator::new(32), a, code, &w).unwrap().value();
                cases += 1;
                bad += (s != m) as u64;
            }
        }
    }
    out.line("7b", bad == 0, "shift-MAC == multiply-MAC", format!("{} of {cases} cases differ", bad));

    // pack / payload / model-file round trips
    let mut trips = 0;
    let mut ok = true;
    for t in all {
        for p in &t.model.layers {
            let (bytes, bits) = p.payload();
            let (codes, idx) = PackedLayer::codes_from_payload(
                &bytes,
                bits,
                p.packed_codes.dim(),
                &p.wspec,
                p.indices.dim(),
                p.index_bits(),
            )
            .unwrap();
            ok &= codes == p.packed_codes && idx == p.indices;
            if let Some(m) = &p.mask {
                let dense = p.unpack().unwrap();
                let (c, i) = m.compress_rowwise(&dense).unwrap();
                ok &= m.decompress(&c).unwrap() == dense && i == p.indices;
            }
            trips += 1;
        }
        ok &= ModelFile::from_bytes(&t.model.to_bytes()).unwrap() == t.model;
    }
    out.line("7c", ok, "pack/compress round trips bit-exact", format!("{trips} layers, {} model files", all.len()));

    // every epoch of every acceptance run kept dropped blocks at zero
    let epochs: usize = all.iter().map(|t| t.logs.len()).sum();
    let zero = all.iter().flat_map(|t| &t.logs).filter(|l| l.blocks_zero && l.weights_clipped).count();
    out.line(
        "7d",
        zero == epochs,
        "block-zero and clip preserved after every epoch",
        format!("{zero}/{epochs} epochs"),
    );

    // folded constants against batch norm evaluated directly
    let net = {
        let arch = Architecture::mlp(&[784, 64, 64, 10], 8, 3, Some(CgsConfig::new(16, 2, 7)));
        let mut net = Network::init(&arch, 5).unwrap();
        let cfg = TrainConfig { lr: 0.5, epochs: 1, ..TrainConfig::default() };
        trainer::train(&mut net, &train.take(2000), &test.take(200), &cfg, |_, _| {}).unwrap();
        net
    };
    let mut worst: f64 = 0.0;
    let mut rng = DetRng::new(17);
    for layer in &net.layers {
        let (gp, bp) = fold_bn(layer).unwrap();
        for j in 0..layer.outputs() {
            for _ in 0..50 {
                let x = (rng.unit_f64() - 0.5) * 40.0;
                let direct = (x + layer.b[j] - layer.running_mean[j]) / layer.running_std[j] * layer.gamma[j] + layer.beta[j];
                let folded = x * gp[j] + bp[j];
                worst = worst.max((direct - folded).abs() / (1.0 + direct.abs()));
            }
        }
    }
    out.line(
        "7e",
        worst <= BN_FOLD_TOL,
        "batch-norm folding",
        format!("worst error {worst:.2e} (need <= {BN_FOLD_TOL:.0e})"),
    );

    let (toy, x, labels) = common::oracle::toy(None, &[16, 16, 4], 1);
    let e = common::oracle::gradient_errors(&toy, &x, &labels);
    out.line(
        "7f",
        e.bn_rel <= FD_BN_TOL && e.bias_abs <= 1e-8,
        "gradients vs finite differences on BN and bias paths",
        format!(
            "gamma/beta rel {:.2e} (need <= {FD_BN_TOL:.0e}), bias abs {:.2e}, weights rel {:.2e}",
            e.bn_rel, e.bias_abs, e.weight_rel
        ),
    );

    let run = || {
        let sub = train.filter_classes(&[0, 1]).take(3000);
        let mut net = Network::init(&Architecture::mlp(&[784, 32, 2], 8, 3, None), 9).unwrap();
        let cfg = TrainConfig { lr: 0.1, epochs: 2, ..TrainConfig::default() };
        let logs = trainer::train(&mut net, &sub, &test.filter_classes(&[0, 1]), &cfg, |_, _| {}).unwrap();
        (logs, pack(&net).unwrap())
    };
    let (a, b) = (run(), run());
    let logs_eq = a.0 == b.0;
    let bytes = |p: &[PackedLayer]| p.iter().map(|l| l.payload().0).collect::<Vec<_>>();
    let model_eq = bytes(&a.1) == bytes(&b.1);
    out.line(
        "7g",
        logs_eq && model_eq,
        "two seeded runs are bit-identical",
        format!("epoch logs equal: {logs_eq}, packed payloads equal: {model_eq}"),
    );
}

fn criterion_8(out: &mut Outcome, head: &SimReport) {
    let widths = [784, 512, 512, 10];
    let nonzero: Vec<f64> = head.layers.iter().map(|l| l.mean_nonzero).collect();
    let ratios = [1, 2, 4, 8, 16];
    let arch = |w: u8, r: usize| Architecture::mlp(&widths, 8, w, Some(CgsConfig::new(16, r, 7)));
    let bits = |w: u8, r: usize| memory_report(&arch(w, r), &Baseline::w8_dense(&widths)).unwrap().total_bits;
    let ops = |w: u8, r: usize| op_report(&arch(w, r), &nonzero, 3).unwrap();

    let mut ok = true;
    for w in [8, 3, 2, 1] {
        ok &= ratios.windows(2).all(|p| bits(w, p[1]) < bits(w, p[0]));
        ok &= ratios.windows(2).all(|p| ops(w, p[1]).total() < ops(w, p[0]).total());
    }
    for r in ratios {
        ok &= [8, 3, 2, 1].windows(2).all(|p| bits(p[1], r) < bits(p[0], r));
        // lower precision never adds operations and moves multiplies to shifts
        ok &= [8, 3, 2, 1].windows(2).all(|p| ops(p[1], r).total() <= ops(p[0], r).total());
        ok &= ops(3, r).multiplies < ops(8, r).multiplies;
    }
    out.line(
        "8",
        ok,
        "memory and op proxies fall with ratio and precision",
        format!(
            "bits W8/1X {} -> W1/16X {}; ops/image 1X {:.0} -> 16X {:.0}",
            bits(8, 1),
            bits(1, 16),
            ops(3, 1).total(),
            ops(3, 16).total()
        ),
    );
}

fn two_class(out: &mut Outcome, train: &Dataset, test: &Dataset) {
    let sub = train.filter_classes(&[0, 1]);
    let test = test.filter_classes(&[0, 1]);
    let mut net = Network::init(&Architecture::mlp(&[784, 32, 2], 8, 8, None), 2).unwrap();
    let cfg = TrainConfig { lr: 0.1, epochs: 1, ..TrainConfig::default() };
    let logs = trainer::train(&mut net, &sub, &test, &cfg, |_, _| {}).unwrap();
    let acc = logs[0].test_accuracy;
    out.line(
        "train-2c",
        acc > TWO_CLASS_MIN_ACC,
        "digits 0/1, 784-32-2, one epoch",
        format!("{} (need > {})", pct(acc), pct(TWO_CLASS_MIN_ACC)),
    );
}
