//! `cpmr` — preprocess interaction logs, train, evaluate, sweep, ablate and
//! gradient-check the recommender.
//!
//! Exit status: 0 on success, 2 on user error (bad flags, config or input),
//! 3 on a numerical abort (divergence, failed gradient check).

use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};

use cpmr::evaluation::{incremental_eval, sweep_csv, MetricsReport, SweepParam, SweepRow};
use cpmr::gradcheck::{run_suite, MAX_REL_ERR};
use cpmr::training::{train_with, SegmentRecord};
use cpmr::{config, data, Checkpoint, Cpmr, Dataset, Format, RunConfig, Split, Variant};

const DATASET_FILE: &str = "dataset.bin";
const CHECKPOINT_FILE: &str = "checkpoint.bin";
const TRAIN_LOG_FILE: &str = "train.log";
const METRICS_FILE: &str = "metrics.jsonl";
const SWEEP_FILE: &str = "sweep.csv";

const EXIT_USER: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser)]
#[command(name = "cpmr", version, about = "Context-aware incremental sequential recommender")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// k-core filter, day-bucket and split a raw interaction log.
    Preprocess {
        #[arg(long)]
        input: PathBuf,
        /// amazon_csv or movielens_tab.
        #[arg(long)]
        format: String,
        /// Output directory; the dataset is written as dataset.bin.
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = data::DEFAULT_K_CORE)]
        k_core: usize,
    },
    /// Train from a config file; writes checkpoint.bin and train.log.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Seed to train (defaults to the first entry of run.seeds).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on a split; appends to metrics.jsonl.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// val or test.
        #[arg(long, default_value = "test")]
        split: String,
        /// Output directory (defaults to the checkpoint's directory).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train and test once per value and seed; writes sweep.csv.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// s_days or n_tbptt.
        #[arg(long)]
        param: String,
        /// Comma-separated values, e.g. 5,10,15.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<u64>,
    },
    /// Train and test ablation variants (full, wo_ctx, wo_his, wo_fusion, all).
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        variant: Vec<String>,
    },
    /// Finite-difference check of every gradient rule and one model step.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Perturb one backward rule to demonstrate that the check fails.
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// One sweep/ablation point: train, evaluate, print the report as JSON.
    #[command(hide = true)]
    RunPoint {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        /// key=value overrides applied on top of the config file.
        #[arg(long = "set")]
        set: Vec<String>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(EXIT_USER);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Numerical failures map to 3, everything else to 2.
fn exit_code(e: &anyhow::Error) -> u8 {
    let numerical = e.chain().any(|c| {
        c.downcast_ref::<cpmr::Error>().is_some_and(cpmr::Error::is_numerical) || c.is::<NumericalFailure>()
    });
    if numerical {
        EXIT_NUMERICAL
    } else {
        EXIT_USER
    }
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("CPMR_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| anyhow!("CPMR_THREADS must be a positive integer, got `{v}`"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Preprocess {
            input,
            format,
            output,
            k_core,
        } => preprocess(&input, &format, &output, k_core),
        Cmd::Train { config, seed } => train_cmd(&config, seed),
        Cmd::Eval {
            checkpoint,
            split,
            output,
        } => eval_cmd(&checkpoint, &split, output.as_deref()),
        Cmd::Sweep { config, param, values } => sweep_cmd(&config, &param, &values),
        Cmd::Ablate { config, variant } => ablate_cmd(&config, &variant),
        Cmd::Gradcheck { seed, inject_fault } => gradcheck_cmd(seed, inject_fault),
        Cmd::RunPoint { config, seed, set } => run_point(&config, seed, &set),
    }
}

/// A numerical failure detected outside the library: a failed gradient
/// check or a sub-run that exited with the numerical status.
#[derive(Debug)]
struct NumericalFailure(String);

impl std::fmt::Display for NumericalFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericalFailure {}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

fn preprocess(input: &Path, format: &str, output: &Path, k_core: usize) -> Result<()> {
    let format = Format::parse(format)?;
    let file = File::open(input).with_context(|| format!("opening {}", input.display()))?;
    let dataset = data::preprocess(BufReader::new(file), format, k_core)?;
    create_dir(output)?;
    let path = output.join(DATASET_FILE);
    dataset.save(&path)?;
    println!("{}", dataset.summary());
    log::info!("wrote {}", path.display());
    Ok(())
}

fn load_config(path: &Path, overrides: &[(String, String)]) -> Result<(RunConfig, Dataset)> {
    let config = RunConfig::load_with(path, overrides).with_context(|| format!("loading config {}", path.display()))?;
    let dataset = config.load_dataset()?;
    Ok((config, dataset))
}

fn train_cmd(config_path: &Path, seed: Option<u64>) -> Result<()> {
    let (config, dataset) = load_config(config_path, &[])?;
    let seed = seed.unwrap_or(config.seeds[0]);
    print!("{}", config.to_text());
    println!("{}", dataset.summary());
    create_dir(&config.output_dir)?;

    let model = Cpmr::new(config.model.clone(), dataset.n_users, dataset.n_items)?;
    let log_path = config.output_dir.join(TRAIN_LOG_FILE);
    let mut log = BufWriter::new(File::create(&log_path)?);
    let mut log_err = None;
    let mut on_segment = |rec: &SegmentRecord| {
        log::debug!(
            "epoch {} days {}..={} loss {:.6} ({:.0} ms)",
            rec.epoch,
            rec.day_start,
            rec.day_end,
            rec.loss,
            rec.wall_ms
        );
        let line = serde_json::json!({ "kind": "segment", "record": rec });
        if let Err(e) = writeln!(log, "{line}") {
            log_err.get_or_insert(e);
        }
    };
    let outcome = train_with(&dataset, &model, &config.train_for_seed(seed), &mut on_segment);
    if let Some(e) = log_err {
        return Err(e).context("writing train.log");
    }
    let outcome = outcome?;
    for rec in &outcome.epochs {
        writeln!(log, "{}", serde_json::json!({ "kind": "epoch", "record": rec }))?;
    }
    log.flush()?;

    let checkpoint = Checkpoint {
        meta: config.to_meta(seed, &dataset),
        params: outcome.params,
    };
    let path = config.output_dir.join(CHECKPOINT_FILE);
    checkpoint.save(&path)?;
    println!(
        "best_epoch={} optimizer_steps={} digest={:016x}",
        outcome.best_epoch,
        outcome.optimizer_steps,
        checkpoint.params.digest()
    );
    log::info!("wrote {} and {}", path.display(), log_path.display());
    Ok(())
}

fn append_metrics(dir: &Path, report: &MetricsReport) -> Result<()> {
    create_dir(dir)?;
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(dir.join(METRICS_FILE))?;
    writeln!(f, "{}", report.to_json())?;
    Ok(())
}

fn eval_cmd(checkpoint_path: &Path, split: &str, output: Option<&Path>) -> Result<()> {
    let split = Split::parse(split)?;
    if split == Split::Train {
        bail!("--split must be val or test");
    }
    let checkpoint =
        Checkpoint::load(checkpoint_path).with_context(|| format!("loading checkpoint {}", checkpoint_path.display()))?;
    let (config, seed) = RunConfig::from_meta(&checkpoint.meta)?;
    let dataset = config.load_dataset()?;
    config::check_meta_dimensions(&checkpoint.meta, &dataset)?;
    let model = Cpmr::new(config.model.clone(), dataset.n_users, dataset.n_items)?;
    let records = incremental_eval(&dataset, &model, &checkpoint.params, split, &config.eval)?;
    let mut echo = config.resolved();
    echo.insert("eval.split".into(), split.as_str().into());
    let report = MetricsReport::from_records(&records, seed, echo)?;
    println!("{report}");
    let dir = match output {
        Some(d) => d.to_path_buf(),
        None => checkpoint_path.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    append_metrics(&dir, &report)
}

/// Trains and evaluates one configuration in this process.
fn run_point(config_path: &Path, seed: u64, set: &[String]) -> Result<()> {
    let overrides = set
        .iter()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| anyhow!("--set expects key=value, got `{kv}`"))
        })
        .collect::<Result<Vec<_>>>()?;
    let (config, dataset) = load_config(config_path, &overrides)?;
    log::info!("point seed={seed} {}", set.join(" "));
    let model = Cpmr::new(config.model.clone(), dataset.n_users, dataset.n_items)?;
    let outcome = train_with(&dataset, &model, &config.train_for_seed(seed), &mut |_| {})?;
    let records = incremental_eval(&dataset, &model, &outcome.params, config.eval_split, &config.eval)?;
    let report = MetricsReport::from_records(&records, seed, config.resolved())?;
    println!("{}", report.to_json());
    Ok(())
}

/// Runs one point in a fresh process so RNG and allocator state never leak
/// between runs.
fn spawn_point(config_path: &Path, seed: u64, set: &[(String, String)]) -> Result<MetricsReport> {
    let exe = std::env::current_exe()?;
    let mut cmd = Command::new(exe);
    cmd.arg("run-point").arg("--config").arg(config_path).arg("--seed").arg(seed.to_string());
    for (k, v) in set {
        cmd.arg("--set").arg(format!("{k}={v}"));
    }
    let out = cmd.stderr(std::process::Stdio::inherit()).output()?;
    if !out.status.success() {
        let code = out.status.code().unwrap_or(EXIT_USER as i32);
        let msg = format!("run with {set:?} seed {seed} failed with status {code}");
        return Err(if code == EXIT_NUMERICAL as i32 {
            NumericalFailure(msg).into()
        } else {
            anyhow!(msg)
        });
    }
    let stdout = String::from_utf8(out.stdout)?;
    let line = stdout.lines().last().ok_or_else(|| anyhow!("sub-run printed no report"))?;
    Ok(serde_json::from_str(line)?)
}

/// Mean metrics over seeds.
fn mean_row(value: u64, reports: &[MetricsReport]) -> SweepRow {
    let n = reports.len() as f64;
    SweepRow {
        value,
        mrr: reports.iter().map(|r| r.mrr).sum::<f64>() / n,
        recall_at_10: reports.iter().map(|r| r.recall_at_10).sum::<f64>() / n,
    }
}

fn sweep_cmd(config_path: &Path, param: &str, values: &[u64]) -> Result<()> {
    let param = SweepParam::parse(param)?;
    let config = RunConfig::load(config_path)?;
    config.load_dataset()?;
    for &v in values {
        // Validate every value before launching anything.
        param.apply(v, &mut config.model.clone(), &mut config.train.clone())?;
    }
    create_dir(&config.output_dir)?;
    let mut rows = Vec::new();
    for &v in values {
        let set = [(param.key().to_string(), v.to_string())];
        let reports = config
            .seeds
            .iter()
            .map(|&seed| spawn_point(config_path, seed, &set))
            .collect::<Result<Vec<_>>>()?;
        for r in &reports {
            append_metrics(&config.output_dir, r)?;
        }
        let row = mean_row(v, &reports);
        println!("{}={} mrr={:.6} recall_at_10={:.6}", param.as_str(), v, row.mrr, row.recall_at_10);
        rows.push(row);
    }
    let csv = sweep_csv(param, &rows);
    fs::write(config.output_dir.join(SWEEP_FILE), &csv)?;
    print!("{csv}");
    Ok(())
}

fn ablate_cmd(config_path: &Path, names: &[String]) -> Result<()> {
    let mut variants = Vec::new();
    for n in names {
        if n == "all" {
            variants.extend(Variant::ALL);
        } else {
            variants.push(Variant::parse(n)?);
        }
    }
    let config = RunConfig::load(config_path)?;
    config.load_dataset()?;
    create_dir(&config.output_dir)?;
    let mut table = String::from("variant,mrr,recall_at_10\n");
    for v in variants {
        let flags = config.model.clone().with_variant(v);
        let set = [
            ("model.disable_ctx".to_string(), flags.disable_ctx.to_string()),
            ("model.disable_his".to_string(), flags.disable_his.to_string()),
            ("model.disable_fusion".to_string(), flags.disable_fusion.to_string()),
        ];
        let reports = config
            .seeds
            .iter()
            .map(|&seed| spawn_point(config_path, seed, &set))
            .collect::<Result<Vec<_>>>()?;
        for r in &reports {
            append_metrics(&config.output_dir, r)?;
        }
        let row = mean_row(0, &reports);
        table.push_str(&format!("{},{},{}\n", v.as_str(), row.mrr, row.recall_at_10));
    }
    print!("{table}");
    Ok(())
}

fn gradcheck_cmd(seed: u64, inject_fault: bool) -> Result<()> {
    cpmr::tape::sabotage::set(inject_fault);
    let report = run_suite(seed)?;
    for c in &report.checks {
        println!(
            "{:<28} {:.3e} {}",
            c.name,
            c.max_rel_err,
            if c.passed() { "ok" } else { "FAIL" }
        );
    }
    println!(
        "max relative error {:.3e} (threshold {:.0e}): {}",
        report.max_rel_err(),
        MAX_REL_ERR,
        if report.passed() { "pass" } else { "fail" }
    );
    if report.passed() {
        Ok(())
    } else {
        Err(NumericalFailure("gradient check failed".into()).into())
    }
}
