use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use promptdist::harness::{
    evaluate_model, export_dist, gradient_suite, load_run, run_ablation, sweep_pattern_dim, train, write_csv,
    AblationSuite, Dataset, ExperimentConfig, ReportRow, DEFAULT_SWEEP_GRID,
};
use promptdist::synthworld::WorldSpec;
use promptdist::{Error, Result};

#[derive(Parser)]
#[command(name = "promptdist", version, about = "Prompt-distribution HOI detection on a synthetic world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the training seed of the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Dataset directory written by `gen-data`; generated from the config otherwise.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train/test scenes and split manifest.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the data seed of the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model, writing config, metrics, checkpoint and evaluation.
    Train(Common),
    /// Re-evaluate a finished run on its test split.
    Eval {
        /// Directory of a `train` run.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train pattern-grid models with a fixed query budget.
    SweepPatternDim {
        #[command(flatten)]
        common: Common,
        /// Comma-separated `N_qxN_p` entries, e.g. `16x1,8x2,4x4`.
        #[arg(long)]
        grid: Option<String>,
    },
    /// Run one ablation suite.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// components, loss_variants, sampling, basis or hyper.
        #[arg(long)]
        suite: AblationSuite,
    },
    /// Dump per-category distribution statistics of a finished run.
    ExportDist {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every differentiable path.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p).map_err(|e| match e {
            Error::Io(_) | Error::Json(_) => Error::Config(format!("{}: {e}", p.display())),
            e => e,
        }),
        None => Ok(ExperimentConfig::default()),
    }
}

/// Config with overrides applied, and the dataset it runs on. A loaded
/// dataset's split replaces the config's so the saved config describes it.
fn prepare(c: &Common) -> Result<(ExperimentConfig, Dataset)> {
    let mut cfg = load_config(c.config.as_deref())?;
    if let Some(seed) = c.seed {
        cfg.train.seed = seed;
    }
    let data = match &c.data {
        Some(dir) => {
            let d = Dataset::load(dir)?;
            cfg.data.n_train = d.manifest.n_train;
            cfg.data.n_test = d.manifest.n_test;
            cfg.data.seed = d.manifest.seed;
            cfg.data.split = d.manifest.split.clone();
            d
        }
        None => Dataset::generate(&WorldSpec::toy(), &cfg.data)?,
    };
    cfg.validate()?;
    fs::create_dir_all(&c.out)?;
    Ok((cfg, data))
}

fn parse_grid(text: &str) -> Result<Vec<(usize, usize)>> {
    text.split(',')
        .map(|entry| {
            let (q, p) = entry
                .trim()
                .split_once('x')
                .ok_or_else(|| Error::Config(format!("grid entry `{entry}` is not N_qxN_p")))?;
            let parse = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| Error::Config(format!("grid entry `{entry}`: `{s}` is not a count")))
            };
            Ok((parse(q)?, parse(p)?))
        })
        .collect()
}

fn print_row(r: &ReportRow) {
    eprintln!(
        "{:<14} {:<22} params={:<8} loss={:.4} mAP={:.4}",
        r.suite, r.label, r.param_count, r.final_loss, r.map_full
    );
}

#[derive(Serialize)]
struct PairRow {
    hoi_pair: usize,
    n_gt: usize,
    ap: Option<f64>,
    rare: bool,
    unseen: bool,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, seed, out } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.data.seed = s;
            }
            let data = Dataset::generate(&WorldSpec::toy(), &cfg.data)?;
            data.save(&out)?;
            eprintln!(
                "{} train / {} test scenes, {} rare and {} unseen pairs -> {}",
                data.train.len(),
                data.test.len(),
                data.rare().len(),
                data.unseen().len(),
                out.display()
            );
        }
        Command::Train(c) => {
            let (cfg, data) = prepare(&c)?;
            let start = Instant::now();
            let outcome = train(&cfg, &data, Some(&c.out))?;
            for m in &outcome.metrics {
                eprintln!("epoch {:>3} loss={:.4} mAP={:.4}", m.epoch, m.loss_total, m.map_full);
            }
            eprintln!(
                "{} parameters, {:.1}s -> {}",
                outcome.param_count,
                start.elapsed().as_secs_f64(),
                c.out.display()
            );
        }
        Command::Eval { run, data, out } => {
            let (cfg, model, store) = load_run(&run)?;
            let data = match data {
                Some(dir) => Dataset::load(&dir)?,
                None => Dataset::generate(&WorldSpec::toy(), &cfg.data)?,
            };
            let ev = evaluate_model(&model, &store, &data.test, data.rare(), cfg.train.eval_seed, cfg.train.batch_size)?;
            fs::create_dir_all(&out)?;
            fs::write(out.join("eval.json"), serde_json::to_string_pretty(&ev)?)?;
            let rows: Vec<PairRow> = (0..ev.per_pair_ap.len())
                .map(|p| PairRow {
                    hoi_pair: p,
                    n_gt: ev.n_gt[p],
                    ap: ev.per_pair_ap[p],
                    rare: ev.rare.contains(&p),
                    unseen: ev.unseen.contains(&p),
                })
                .collect();
            write_csv(&out.join("per_pair_ap.csv"), &rows)?;
            println!("{}", serde_json::to_string(&ev)?);
        }
        Command::SweepPatternDim { common, grid } => {
            let grid = match grid {
                Some(g) => parse_grid(&g)?,
                None => DEFAULT_SWEEP_GRID.to_vec(),
            };
            let (cfg, data) = prepare(&common)?;
            let rows = sweep_pattern_dim(&grid, &cfg, &data, print_row)?;
            write_csv(&common.out.join("sweep_pattern_dim.csv"), &rows)?;
        }
        Command::Ablate { common, suite } => {
            let (cfg, data) = prepare(&common)?;
            let rows = run_ablation(suite, &cfg, &data, print_row)?;
            write_csv(&common.out.join(format!("ablate_{suite}.csv")), &rows)?;
        }
        Command::ExportDist { run, out } => {
            let (_, model, store) = load_run(&run)?;
            let (stats, cosines) = export_dist(&model, &store)?;
            fs::create_dir_all(&out)?;
            write_csv(&out.join("dist_stats.csv"), &stats)?;
            write_csv(&out.join("dist_cosine.csv"), &cosines)?;
        }
        Command::Gradcheck { seed, out } => {
            let entries = gradient_suite(seed)?;
            for e in &entries {
                println!(
                    "{} {:<48} max_rel_error={:.3e} probes={}",
                    if e.passed { "ok  " } else { "FAIL" },
                    e.name,
                    e.max_rel_error,
                    e.probes
                );
            }
            if let Some(path) = out {
                if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                    fs::create_dir_all(dir)?;
                }
                write_csv(&path, &entries)?;
            }
            let failed = entries.iter().filter(|e| !e.passed).count();
            if failed > 0 {
                return Err(Error::Numerical(format!("{failed} gradient checks exceed tolerance")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
