use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use klonet_core::bench::{self, BenchOptions};
use klonet_core::config::RunConfig;
use klonet_core::data::{generate_dataset, Manifest, PhantomParams, SliceSet, Split};
use klonet_core::exec::{self, Exec};
use klonet_core::metrics::Hd95Mode;
use klonet_core::model::Variant;
use klonet_core::report::CountReport;
use klonet_core::{checkpoint, gradcheck, train, Error};

/// Dynamic K-NN attention segmentation toolkit.
#[derive(Debug, Parser)]
#[command(name = "klonet", version)]
struct Cli {
    /// Run every data-parallel loop on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset with a manifest.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 30)]
        patients: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Slice edge length in pixels.
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 12)]
        slices: usize,
    },
    /// Parameter, FLOP and memory report for an architecture variant.
    Count {
        #[arg(long, value_parser = parse_variant)]
        variant: Variant,
        /// Input resolution as HxW.
        #[arg(long, default_value = "256x256", value_parser = parse_resolution)]
        resolution: (usize, usize),
    },
    /// Central-difference gradient checks for every op and module.
    Gradcheck {
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Train from a key=value config file.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
        /// Dataset directory; defaults to the data_dir of the config.txt
        /// next to the checkpoint.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory; defaults to the checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write per-position tau and k of every attention site.
        #[arg(long)]
        dump_tau: bool,
        /// Pool both directed distance sets for HD95.
        #[arg(long)]
        hd95_pooled: bool,
    },
    /// Time dense against dynamic K-NN attention.
    BenchAttn {
        #[arg(long, value_delimiter = ',', default_value = "64,256,1024")]
        n_list: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "4,16,64")]
        k_list: Vec<usize>,
        #[arg(long, default_value_t = 32)]
        channels: usize,
        #[arg(long, default_value_t = 9)]
        runs: usize,
        #[arg(long, default_value = "bench_attn.csv")]
        out: PathBuf,
    },
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_split(s: &str) -> Result<Split, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_resolution(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("bad dimension {v:?}"));
    Ok((parse(h)?, parse(w)?))
}

fn data_dir_for(checkpoint: &Path) -> Result<PathBuf, Error> {
    let cfg = checkpoint.parent().unwrap_or(Path::new(".")).join("config.txt");
    if !cfg.exists() {
        return Err(Error::Config("no --data given and no config.txt next to the checkpoint".into()));
    }
    Ok(RunConfig::load(&cfg)?.data_dir)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::GenData { out, patients, seed, size, slices } => {
            let params = PhantomParams { height: size, width: size, slices, seed, ..PhantomParams::default() };
            let manifest = generate_dataset(&params, patients, &out)?;
            println!("wrote {} slices for {patients} patients to {}", manifest.records.len(), out.display());
            for split in [Split::Train, Split::Val, Split::Test] {
                println!(
                    "{split:<5} patients={:<3} slices={}",
                    manifest.patients(split).len(),
                    manifest.split(split).count()
                );
            }
        }
        Command::Count { variant, resolution } => {
            println!("{}", CountReport::build(variant, resolution.0, resolution.1)?);
        }
        Command::Gradcheck { seed } => {
            let results = gradcheck::run_suite(seed)?;
            println!("{:<24} {:>12} {:>8} {:>8}  status", "check", "max_rel_err", "probes", "skipped");
            for r in &results {
                let status = if r.passed() { "ok" } else { "FAIL" };
                println!("{:<24} {:>12.3e} {:>8} {:>8}  {status}", r.name, r.max_rel_err(), r.coordinates, r.skipped);
            }
            let failed = results.iter().filter(|r| !r.passed()).count();
            println!("{} checks, {failed} failed, tolerance {:e}", results.len(), gradcheck::TOLERANCE);
            if failed > 0 {
                return Err(Error::Numerical(format!("{failed} gradient checks failed")));
            }
        }
        Command::Train { config } => {
            let cfg = RunConfig::load(&config)?;
            println!("epoch,train_loss,val_dsc,wall_seconds");
            let outcome = train::train(&cfg, |e| {
                println!("{},{:.6},{:.6},{:.1}", e.epoch, e.train_loss, e.val_dsc, e.wall_seconds);
            })?;
            println!(
                "best epoch {} (val DSC {:.4}); checkpoint {}",
                outcome.best_epoch,
                outcome.best_val_dsc,
                cfg.out_dir.join("best.ckpt").display()
            );
        }
        Command::Eval { checkpoint: ckpt, split, data, out, dump_tau, hd95_pooled } => {
            let data = match data {
                Some(d) => d,
                None => data_dir_for(&ckpt)?,
            };
            let out = out.unwrap_or_else(|| ckpt.parent().unwrap_or(Path::new(".")).to_path_buf());
            let mode = if hd95_pooled { Hd95Mode::Pooled } else { Hd95Mode::MaxOfDirected };
            let report = train::evaluate_checkpoint(&ckpt, &data, split, &out, mode)?;
            println!("region,slices,dsc,iou");
            for r in &report.regional {
                let f = |v: Option<f64>| v.map_or("NA".to_string(), |x| format!("{x:.4}"));
                println!("{},{},{},{}", r.region.name(), r.slices, f(r.dsc), f(r.iou));
            }
            let hd = report.dataset.hd95.map_or("NA".to_string(), |v| format!("{v:.4}"));
            println!(
                "{split}: DSC {:.4} IoU {:.4} HD95 {hd} px ({} slices without HD95)",
                report.dataset.dsc, report.dataset.iou, report.hd95_missing
            );
            if dump_tau {
                let model = checkpoint::load(&ckpt)?;
                let set = SliceSet::load(&Manifest::read(&data.join("manifest.csv"))?, split)?;
                let path = out.join(format!("tau_{split}.csv"));
                let rows = train::write_tau_csv(&model, &set, &path)?;
                println!("wrote {rows} tau rows to {}", path.display());
            }
        }
        Command::BenchAttn { n_list, k_list, channels, runs, out } => {
            let opts = BenchOptions { channels, runs, ..BenchOptions::default() };
            let rows = bench::bench_attention(&n_list, &k_list, &opts)?;
            bench::check_scaling(&rows)?;
            bench::write_csv(&rows, &out)?;
            println!("{:>6} {:>4} {:>12} {:>12} {:>12} {:>12} {:>14} {:>14}", "N", "k", "dense_ms", "sparse_ms", "dense_core", "sparse_core", "agg_flops", "sim_flops");
            for r in &rows {
                println!(
                    "{:>6} {:>4} {:>12.3} {:>12.3} {:>12.3} {:>12.3} {:>14} {:>14}",
                    r.n, r.k, r.dense_module_ms, r.sparse_module_ms, r.dense_core_ms, r.sparse_core_ms, r.sparse.aggregation, r.dense.similarity
                );
            }
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let threads = std::env::var("KLON_THREADS").ok().and_then(|v| v.parse().ok());
    exec::init_threads(threads);
    if cli.sequential {
        exec::set_mode(Exec::Sequential);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
