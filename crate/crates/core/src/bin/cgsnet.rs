use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cgsnet::commands::{self, SimulateArgs};
use cgsnet::hwsim::HwConfig;
use cgsnet::Result;

#[derive(Parser)]
#[command(name = "cgsnet", version, about = "Low-precision CGS network training and accelerator simulation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train from an experiment config; writes a model file and an epoch log.
    Train {
        config: PathBuf,
        /// Model file (default: config path with `.cgsq`).
        #[arg(short, long)]
        out: Option<PathBuf>,
        /// Epoch log CSV (default: config path with `.epochs.csv`).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Run the accelerator model over the MNIST test split.
    Simulate {
        model: PathBuf,
        /// Directory with the MNIST IDX files.
        #[arg(long, env = "CGSNET_MNIST_DIR")]
        data: PathBuf,
        #[arg(long)]
        test_limit: Option<usize>,
        #[command(flatten)]
        hw: HwArgs,
        /// Report CSV (default: stdout).
        #[arg(short, long)]
        out: Option<PathBuf>,
        /// Per-image trace dump, one line per layer.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Train and simulate every point of a sweep spec.
    Sweep {
        spec: PathBuf,
        /// Stop after running this many new points.
        #[arg(long)]
        max_points: Option<usize>,
    },
    /// Turn a sweep CSV into plot-ready series files.
    Report {
        csv: PathBuf,
        #[arg(short, long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Print a model file's configuration, mask density and memory report.
    Inspect { model: PathBuf },
}

#[derive(Args)]
struct HwArgs {
    /// MAC units per layer (default: one per output neuron).
    #[arg(long)]
    mac_parallelism: Option<usize>,
    #[arg(long, default_value_t = 512)]
    sram_row_width: usize,
    #[arg(long, default_value_t = 3)]
    shift_mac_max_bits: u8,
    #[arg(long)]
    no_pipeline: bool,
    #[arg(long)]
    no_zero_skip: bool,
    #[arg(long, default_value_t = 2)]
    layer_overhead: u64,
    #[arg(long, default_value_t = 32)]
    acc_bits: u32,
    /// Round folded batch-norm constants to this many fractional bits.
    #[arg(long)]
    bn_frac_bits: Option<u32>,
}

impl HwArgs {
    fn config(&self) -> HwConfig {
        HwConfig {
            mac_parallelism: self.mac_parallelism,
            sram_row_width: self.sram_row_width,
            shift_mac_max_bits: self.shift_mac_max_bits,
            pipeline_enabled: !self.no_pipeline,
            zero_skipping: !self.no_zero_skip,
            layer_overhead: self.layer_overhead,
            acc_bits: self.acc_bits,
            bn_frac_bits: self.bn_frac_bits,
        }
    }
}

fn sibling(path: &Path, ext: &str) -> PathBuf {
    path.with_extension(ext)
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Train { config, out, log } => {
            let out = out.unwrap_or_else(|| sibling(&config, "cgsq"));
            let log = log.unwrap_or_else(|| sibling(&config, "epochs.csv"));
            let r = commands::cmd_train(&config, &out, &log)?;
            println!("{} test accuracy {:.4}", out.display(), r.model.meta.final_accuracy);
        }
        Cmd::Simulate { model, data, test_limit, hw, out, trace } => {
            let args = SimulateArgs {
                model: &model,
                data_dir: &data,
                test_limit,
                hw: hw.config(),
                trace: trace.as_deref(),
            };
            let report = commands::cmd_simulate(&args)?;
            match out {
                Some(p) => {
                    let f = std::fs::File::create(&p).map_err(|e| cgsnet::Error::io(&p, e))?;
                    commands::write_sim_csv(f, &report)?;
                    eprintln!(
                        "accuracy {:.4} over {} images, mean speedup {:.3}",
                        report.accuracy, report.images, report.mean_speedup
                    );
                }
                None => commands::write_sim_csv(std::io::stdout().lock(), &report)?,
            }
        }
        Cmd::Sweep { spec, max_points } => {
            let o = commands::cmd_sweep(&spec, max_points)?;
            let failed = o.rows.iter().filter(|r| !r.is_ok()).count();
            match o.csv {
                Some(p) => println!("{} rows ({failed} failed, {} run now) -> {}", o.rows.len(), o.ran, p.display()),
                None => println!("stopped after {} new points; rerun to continue", o.ran),
            }
        }
        Cmd::Report { csv, out_dir } => {
            let f = commands::cmd_report(&csv, &out_dir)?;
            println!("{} series -> {}", f.series, out_dir.display());
        }
        Cmd::Inspect { model } => print!("{}", commands::cmd_inspect(&model)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
