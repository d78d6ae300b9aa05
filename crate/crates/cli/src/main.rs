//! `nbrlab`: dataset preparation, training, evaluation and sweeps.
//!
//! Any `--section.key=value` argument overrides the config file.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use nbrlab::baselines::{GpPop, PPop, TifuKnn};
use nbrlab::data::synthetic::{fixed_basket_dataset, frequency_dataset, generate_dataset, FixtureConfig};
use nbrlab::data::{
    load_transactions, preprocess, preprocess_single_pass, read_cache, split_leave_one_basket, write_cache,
    BasketDataset, DatasetStats, SplitSpec, TableFormat,
};
use nbrlab::metrics::{evaluate_users, PerUserTable, Recommender};
use nbrlab::model::{load_checkpoint, write_checkpoint, Saferec};
use nbrlab::train::{sweep, train_with, Grid};

use config::{EvalUsers, RunConfig};

#[derive(Parser)]
#[command(name = "nbrlab", version, about = "Next-basket recommendation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Tafeng,
    Dunnhumby,
    Taobao,
    /// Header with user_id, item_id, basket_id, timestamp.
    Generic,
}

#[derive(Clone, Copy, ValueEnum)]
enum Fixture {
    /// Zipf-popular catalog, per-user favourites, repeat probability and drift.
    Synthetic,
    /// Every user repeats one fixed basket.
    Fixed,
    /// Each user's next basket is their single most frequent item.
    Frequency,
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    Ppop,
    Gppop,
    Tifu,
}

#[derive(Subcommand)]
enum Command {
    /// Writes a seeded synthetic dataset cache, optionally also as CSV.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "synthetic")]
        kind: Fixture,
        #[arg(long, default_value_t = 500)]
        users: usize,
        #[arg(long, default_value_t = 200)]
        items: usize,
        #[arg(long, default_value_t = 0.8)]
        repeat_prob: f64,
        #[arg(long, default_value_t = 0.05)]
        drift: f64,
        /// Basket size for `fixed`, noise items per basket for `frequency`.
        #[arg(long, default_value_t = 5)]
        basket_size: usize,
        /// Baskets per user for `fixed` and `frequency`.
        #[arg(long, default_value_t = 6)]
        baskets: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also export transactions in the generic CSV layout.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Loads a transaction log, filters it and writes a dataset cache.
    Preprocess {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        format: Format,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to 10 for TaoBao and 5 otherwise.
        #[arg(long)]
        min_interactions: Option<usize>,
        #[arg(long, default_value_t = 2)]
        min_baskets: usize,
    },
    /// Trains SAFERec (or SASRec* with `--model.freq_module_enabled=false`).
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
    },
    /// Evaluates a checkpoint or a baseline on the held-out baskets.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, conflicts_with = "baseline", required_unless_present = "baseline")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        baseline: Option<Baseline>,
        /// Overrides `eval.cutoffs`.
        #[arg(long, value_delimiter = ',')]
        cutoffs: Option<Vec<usize>>,
        /// Per-user report (or a run directory holding `per_user.tsv`) to
        /// test against.
        #[arg(long)]
        sig_against: Option<PathBuf>,
        #[arg(long, default_value = "runs/eval")]
        out: PathBuf,
    },
    /// Trains every grid combination (or a seeded subset) and ranks them.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        budget: usize,
        #[arg(long, default_value = "runs/sweep")]
        out: PathBuf,
    },
}

/// Separates `--section.key=value` overrides from ordinary arguments.
type Overrides = Vec<(String, String)>;

fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Overrides)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for a in args {
        match a.strip_prefix("--") {
            Some(body) if body.split('=').next().is_some_and(|k| k.contains('.')) => {
                let (k, v) = body
                    .split_once('=')
                    .ok_or_else(|| anyhow!("override `{a}` must be written `--section.key=value`"))?;
                overrides.push((k.to_string(), v.to_string()));
            }
            _ => rest.push(a),
        }
    }
    Ok((rest, overrides))
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("NBRLAB_THREADS") {
        let n: usize = v.parse().map_err(|_| anyhow!("NBRLAB_THREADS=`{v}` is not a count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

/// Writes via a temporary sibling and rename, so readers never see a
/// partial file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).with_context(|| format!("cannot write {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

fn run_dir(out: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    fs::write(out.join("config.txt"), cfg.to_text())?;
    Ok(())
}

fn load_dataset(cfg: &RunConfig) -> Result<(BasketDataset, SplitSpec)> {
    let ds = read_cache(&cfg.cache).with_context(|| format!("dataset cache {}", cfg.cache.display()))?;
    let split = split_leave_one_basket(&ds, cfg.split_seed);
    Ok((ds, split))
}

fn cmd_generate(
    out: &Path,
    kind: Fixture,
    fixture: FixtureConfig,
    basket_size: usize,
    baskets: usize,
    csv: Option<&Path>,
) -> Result<()> {
    let ds = match kind {
        Fixture::Synthetic => generate_dataset(&fixture),
        Fixture::Fixed => fixed_basket_dataset(fixture.n_users, fixture.n_items, basket_size, baskets, fixture.seed),
        Fixture::Frequency => {
            if baskets < 3 {
                bail!("--baskets must be >= 3 for the frequency fixture");
            }
            frequency_dataset(fixture.n_users, fixture.n_items, baskets, basket_size, fixture.seed)
        }
    };
    write_cache(out, &ds)?;
    if let Some(path) = csv {
        let mut text = String::from("user_id,item_id,basket_id,timestamp\n");
        for t in ds.to_transactions() {
            text.push_str(&format!(
                "{},{},{},{}\n",
                t.user_id, t.item_id, t.basket_key, t.timestamp
            ));
        }
        fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))?;
    }
    println!("{}", DatasetStats::HEADER);
    println!("{}", ds.stats().row("synthetic"));
    Ok(())
}

fn cmd_preprocess(
    input: &Path,
    format: Format,
    out: &Path,
    min_interactions: Option<usize>,
    min_baskets: usize,
) -> Result<()> {
    let (name, table, default_min) = match format {
        Format::Tafeng => ("Tafeng", TableFormat::tafeng(), 5),
        Format::Dunnhumby => ("Dunnhumby", TableFormat::dunnhumby(), 5),
        Format::Taobao => ("TaoBao", TableFormat::taobao(), 10),
        Format::Generic => ("Dataset", TableFormat::default(), 5),
    };
    let min_interactions = min_interactions.unwrap_or(default_min);
    let loaded = load_transactions(input, &table)?;
    if loaded.skipped > 0 {
        eprintln!("skipped {} malformed rows", loaded.skipped);
    }
    let ds = preprocess(&loaded.transactions, min_interactions, min_baskets)?;
    write_cache(out, &ds)?;
    let stats = ds.stats();
    println!("{}", DatasetStats::HEADER);
    println!("{}", stats.row(name));
    // A single filtering pass is what many pipelines do; show it when the
    // counts differ so the gap to the fixed point is visible.
    if let Ok(single) = preprocess_single_pass(&loaded.transactions, min_interactions, min_baskets) {
        let s = single.stats();
        if s != stats {
            println!("{}", s.row(&format!("{name} (single pass)")));
        }
    }
    Ok(())
}

fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (ds, split) = load_dataset(cfg)?;
    run_dir(out, cfg)?;
    fs::write(out.join("split.txt"), split.to_text())?;
    let mut log = String::new();
    let (model, report) = train_with(&ds, &split, &cfg.model, &cfg.train, |ev| {
        let r = ev.record;
        let line = format!(
            "epoch {} loss {:.6} {} {:.4} ({:.1}s){}",
            r.epoch,
            r.loss,
            monitor_label(cfg),
            r.metric,
            r.seconds,
            if ev.is_best { " best" } else { "" }
        );
        eprintln!("{line}");
        log.push_str(&line);
        log.push('\n');
        let bytes = write_checkpoint(ev.model);
        write_atomic(&out.join("last.ckpt"), &bytes).map_err(|e| e.to_string())?;
        if ev.is_best {
            write_atomic(&out.join("best.ckpt"), &bytes).map_err(|e| e.to_string())?;
        }
        fs::write(out.join("log.txt"), &log).map_err(|e| e.to_string())
    })?;
    debug_assert_eq!(model.n_items(), ds.n_items());
    fs::write(out.join("train_report.csv"), report.to_text())?;
    println!(
        "{} best epoch {} of {}: {} = {:.4}; checkpoint {}",
        model.name(),
        report.best_epoch,
        report.epochs.len(),
        monitor_label(cfg),
        report.best_metric,
        out.join("best.ckpt").display()
    );
    Ok(())
}

fn monitor_label(cfg: &RunConfig) -> String {
    let (m, k) = cfg.train.monitor;
    format!("{}@{k}", m.name())
}

fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    baseline: Option<Baseline>,
    sig_against: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let (ds, split) = load_dataset(cfg)?;
    let rec: Box<dyn Recommender> = match (checkpoint, baseline) {
        (Some(p), _) => {
            let m: Saferec = load_checkpoint(p).with_context(|| format!("checkpoint {}", p.display()))?;
            if m.n_items() != ds.n_items() {
                bail!(
                    "checkpoint has {} items but the dataset has {}",
                    m.n_items(),
                    ds.n_items()
                );
            }
            Box::new(m)
        }
        (None, Some(Baseline::Ppop)) => Box::new(PPop),
        (None, Some(Baseline::Gppop)) => Box::new(GpPop),
        (None, Some(Baseline::Tifu)) => Box::new(TifuKnn::new(cfg.baseline.clone())),
        (None, None) => bail!("pass --checkpoint or --baseline"),
    };
    let users = match cfg.eval_users {
        EvalUsers::Test => &split.test_users,
        EvalUsers::Validation => &split.validation_users,
    };
    let mut report = evaluate_users(rec.as_ref(), &ds, users, &cfg.cutoffs)?;
    if let Some(path) = sig_against {
        let file = if path.is_dir() {
            path.join("per_user.tsv")
        } else {
            path.to_path_buf()
        };
        let text = fs::read_to_string(&file).with_context(|| format!("cannot read {}", file.display()))?;
        let reference = PerUserTable::parse(&text)?;
        let n = if cfg.n_comparisons == 0 {
            report.series.len()
        } else {
            cfg.n_comparisons
        };
        report.attach_significance(&reference, n)?;
    }
    run_dir(out, cfg)?;
    fs::write(out.join("report.tsv"), report.to_tsv())?;
    fs::write(out.join("per_user.tsv"), report.per_user_tsv())?;
    print!("{}", report.to_tsv());
    Ok(())
}

fn cmd_sweep(cfg: &RunConfig, grid_path: &Path, budget: usize, out: &Path) -> Result<()> {
    let text = fs::read_to_string(grid_path).with_context(|| format!("cannot read grid {}", grid_path.display()))?;
    let grid = Grid::parse(&text)?;
    let (ds, split) = load_dataset(cfg)?;
    let result = sweep(&ds, &split, &cfg.model, &cfg.train, &grid, budget, cfg.train.seed)?;
    run_dir(out, cfg)?;
    for t in &result.trials {
        let dir = out.join(format!("trial_{:03}", t.index));
        fs::create_dir_all(&dir)?;
        let assignment: String = t.assignment.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
        fs::write(dir.join("assignment.txt"), assignment)?;
        match &t.outcome {
            Ok(r) => fs::write(dir.join("train_report.csv"), r.to_text())?,
            Err(e) => fs::write(dir.join("error.txt"), format!("{e}\n"))?,
        }
    }
    fs::write(out.join("ranking.tsv"), result.to_tsv())?;
    print!("{}", result.to_tsv());
    Ok(())
}

fn run() -> Result<()> {
    let (args, overrides) = split_overrides(std::env::args().collect())?;
    let cli = Cli::parse_from(args);
    init_threads()?;
    let load = |path: &Option<PathBuf>| RunConfig::load(path.as_deref(), &overrides);
    match cli.command {
        Command::Generate {
            out,
            kind,
            users,
            items,
            repeat_prob,
            drift,
            basket_size,
            baskets,
            seed,
            csv,
        } => {
            let fixture = FixtureConfig {
                n_users: users,
                n_items: items,
                repeat_prob,
                drift,
                seed,
                ..FixtureConfig::default()
            };
            cmd_generate(&out, kind, fixture, basket_size, baskets, csv.as_deref())
        }
        Command::Preprocess {
            input,
            format,
            out,
            min_interactions,
            min_baskets,
        } => cmd_preprocess(&input, format, &out, min_interactions, min_baskets),
        Command::Train { config, out } => cmd_train(&load(&config)?, &out),
        Command::Eval {
            config,
            checkpoint,
            baseline,
            cutoffs,
            sig_against,
            out,
        } => {
            let mut cfg = load(&config)?;
            if let Some(c) = cutoffs {
                cfg.set(
                    "eval.cutoffs",
                    &c.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
                )?;
                cfg.validate()?;
            }
            cmd_eval(&cfg, checkpoint.as_deref(), baseline, sig_against.as_deref(), &out)
        }
        Command::Sweep {
            config,
            grid,
            budget,
            out,
        } => cmd_sweep(&load(&config)?, &grid, budget, &out),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
