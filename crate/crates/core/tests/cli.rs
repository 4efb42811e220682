mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cgsnet::commands::build_report;
use cgsnet::modelfile::ModelFile;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_cgsnet"));
    c.env_remove("CGSNET_MNIST_DIR").env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TRAIN: &str = r#"
[train]
lr = 0.5
momentum = 0.9
batch_size = 50
epochs = 3
lr_decay = 0.5
seed = 4
"#;

fn experiment(dir: &Path) -> PathBuf {
    common::write_mnist(&dir.join("mnist"), 400, 100);
    let text = format!(
        r#"name = "tiny"

[model]
widths = [784, 64, 64, 10]
act_bits = 8
weight_bits = 3

[model.cgs]
block_size = 16
ratio = 2
seed = 7
{TRAIN}
[data]
dir = "mnist"
"#
    );
    let path = dir.join("tiny.toml");
    fs::write(&path, text).unwrap();
    path
}

fn sweep_spec(dir: &Path, out: &str, precisions: &str, ratios: &str) -> PathBuf {
    let text = format!(
        r#"name = "grid"
precisions = {precisions}
ratios = {ratios}
widths = [784, 64, 64, 10]
cgs_seed = 7
output_dir = "{out}"
{TRAIN}
[data]
dir = "mnist"
"#
    );
    let path = dir.join(format!("{out}.toml"));
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn train_is_deterministic_and_simulate_reproduces_its_accuracy() {
    let t = tempfile::tempdir().unwrap();
    let cfg = experiment(t.path());
    let (m1, m2) = (t.path().join("a.cgsq"), t.path().join("b.cgsq"));
    let log = t.path().join("epochs.csv");
    for m in [&m1, &m2] {
        let o = run(&["train", p(&cfg), "-o", p(m), "--log", p(&log)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(fs::read(&m1).unwrap(), fs::read(&m2).unwrap());

    let log = fs::read_to_string(&log).unwrap();
    let mut lines = log.lines();
    let header = lines.next().unwrap();
    assert!(header.starts_with("epoch,"), "{header}");
    assert_eq!(lines.count(), 3);

    let model = ModelFile::load(&m1).unwrap();
    assert!(model.meta.final_accuracy > 0.5, "synthetic task should be learnable: {}", model.meta.final_accuracy);
    assert_eq!(model.meta.epochs, 3);

    let csv = t.path().join("sim.csv");
    let trace = t.path().join("trace.txt");
    let o = bin()
        .args(["simulate", p(&m1), "-o", p(&csv), "--trace", p(&trace)])
        .env("CGSNET_MNIST_DIR", t.path().join("mnist"))
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let mut r = csv::Reader::from_path(&csv).unwrap();
    let h = r.headers().unwrap().clone();
    let col = |n: &str| h.iter().position(|x| x == n).unwrap();
    let rows: Vec<csv::StringRecord> = r.records().map(|x| x.unwrap()).collect();
    assert_eq!(rows.len(), 4, "three layers plus total");
    let total = rows.last().unwrap();
    assert_eq!(&total[col("scope")], "total");
    assert_eq!(&total[col("images")], "100");
    let acc: f64 = total[col("accuracy")].parse().unwrap();
    assert_eq!(acc, model.meta.final_accuracy);
    assert!(fs::read_to_string(&trace).unwrap().lines().filter(|l| !l.is_empty()).count() >= 100);

    // hardware flags reach the simulator
    let o = bin()
        .args(["simulate", p(&m1), "--no-pipeline", "--test-limit", "10"])
        .env("CGSNET_MNIST_DIR", t.path().join("mnist"))
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).lines().last().unwrap().starts_with("total,10,"));

    let o = run(&["inspect", p(&m1)]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("A8 / W3"), "{text}");
    assert!(text.contains("ratio 2X"), "{text}");
}

#[test]
fn sweep_point_equals_standalone_training() {
    let t = tempfile::tempdir().unwrap();
    let cfg = experiment(t.path());
    let m = t.path().join("m.cgsq");
    let o = run(&["train", p(&cfg), "-o", p(&m)]);
    assert!(o.status.success(), "{}", stderr(&o));

    let spec = sweep_spec(t.path(), "one", "[[8, 3]]", "[2]");
    let o = run(&["sweep", p(&spec)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let point = t.path().join("one/points/a8w3_r2.cgsq");
    assert_eq!(fs::read(&point).unwrap(), fs::read(&m).unwrap());

    let mut r = csv::Reader::from_path(t.path().join("one/sweep.csv")).unwrap();
    let rows: Vec<cgsnet::commands::SweepRow> = r.deserialize().map(|x| x.unwrap()).collect();
    assert_eq!(rows.len(), 1);
    assert!(rows[0].is_ok());
    assert_eq!(rows[0].accuracy, Some(ModelFile::load(&m).unwrap().meta.final_accuracy));
}

#[test]
fn interrupted_sweep_resumes_to_the_same_csv() {
    let t = tempfile::tempdir().unwrap();
    experiment(t.path());
    let grid = ("[[8, 3], [1, 1]]", "[1, 4]");
    let full = sweep_spec(t.path(), "full", grid.0, grid.1);
    let o = run(&["sweep", p(&full)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let full_csv = fs::read_to_string(t.path().join("full/sweep.csv")).unwrap();
    assert!(!full_csv.contains("failed"), "{full_csv}");

    let split = sweep_spec(t.path(), "split", grid.0, grid.1);
    let o = run(&["sweep", p(&split), "--max-points", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("stopped after 3"), "{}", stdout(&o));
    assert!(!t.path().join("split/sweep.csv").exists());
    let o = run(&["sweep", p(&split)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("1 run now"), "{}", stdout(&o));

    let a = fs::read_to_string(t.path().join("full/sweep.csv")).unwrap();
    let b = fs::read_to_string(t.path().join("split/sweep.csv")).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.lines().count(), 5);
    let ids: Vec<&str> = a.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(ids, ["a8w3_r1", "a8w3_r4", "a1w1_r1", "a1w1_r4"]);

    // a complete sweep reruns nothing
    let o = run(&["sweep", p(&split)]);
    assert!(stdout(&o).contains("0 run now"), "{}", stdout(&o));

    let out = t.path().join("plots");
    let o = run(&["report", p(&t.path().join("full/sweep.csv")), "-o", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mem = fs::read_to_string(out.join("memory.dat")).unwrap();
    assert_eq!(mem.matches("# A").count(), 2);
}

#[test]
fn report_golden() {
    let csv = "\
id,act_bits,weight_bits,ratio,status,total_bits,accuracy,mean_cycles
a8w3_r1,8,3,1,ok,1024,0.98,800.5
a8w3_r4,8,3,4,ok,256,0.975,300
a1w1_r1,1,1,1,ok,512,0.96,700
a1w1_r4,1,1,4,failed: numeric error: x,,,
";
    let f = build_report(csv, Path::new("s.csv")).unwrap();
    assert_eq!(f.series, 2);
    assert_eq!(
        f.memory,
        "# A8/W3\n# log2_bits accuracy ratio\n8.000000 0.975000 4\n10.000000 0.980000 1\n\
         \n\n# A1/W1\n# log2_bits accuracy ratio\n9.000000 0.960000 1\n"
    );
    assert_eq!(
        f.cycles,
        "# A8/W3\n# mean_cycles accuracy ratio\n300.000 0.975000 4\n800.500 0.980000 1\n\
         \n\n# A1/W1\n# mean_cycles accuracy ratio\n700.000 0.960000 1\n"
    );
}

#[test]
fn exit_codes() {
    let t = tempfile::tempdir().unwrap();
    // usage
    assert_eq!(run(&[]).status.code(), Some(1));
    assert_eq!(run(&["train"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));

    // configuration
    let cfg = experiment(t.path());
    let text = fs::read_to_string(&cfg).unwrap();
    let bad = t.path().join("bad.toml");
    fs::write(&bad, text.replace("ratio = 2", "ratio = 3")).unwrap();
    let o = run(&["train", p(&bad)]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    fs::write(&bad, text.replace("act_bits = 8", "act_bits = 8\nfoo = 1")).unwrap();
    let o = run(&["train", p(&bad)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line "), "{}", stderr(&o));

    let spec = sweep_spec(t.path(), "narrow", "[[8, 3]]", "[16]");
    let o = run(&["sweep", p(&spec)]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    // missing and truncated files
    let o = run(&["inspect", p(&t.path().join("nope.cgsq"))]);
    assert_eq!(o.status.code(), Some(3));
    let mnist = t.path().join("mnist");
    let img = mnist.join("t10k-images-idx3-ubyte");
    let bytes = fs::read(&img).unwrap();
    fs::write(&img, &bytes[..bytes.len() - 100]).unwrap();
    let m = t.path().join("m.cgsq");
    fs::write(&bad, &text).unwrap();
    let o = run(&["train", p(&bad), "-o", p(&m)]);
    assert_eq!(o.status.code(), Some(3));
    let err = stderr(&o);
    assert!(err.contains("byte offset") && err.contains("t10k-images"), "{err}");

    // a corrupted model file
    fs::write(&m, b"CGSQ\x01\x00garbage").unwrap();
    let o = run(&["inspect", p(&m)]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}
