use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use cfseed::data::{self, build_graph, Manifest};
use cfseed::embio;
use cfseed::eval::{self, ReportFormat};
use cfseed::experiments::{self, CheckpointMeta, RunConfig};
use cfseed::model;

#[derive(Parser)]
#[command(
    name = "cfseed",
    version,
    about = "LightGCN with language-model embedding initialization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Filter and split the interaction log into `<run_dir>/data`.
    Prepare(Args),
    /// Write the initial user and item tables to `<run_dir>/init`.
    Init(Args),
    /// Train with early stopping, write `<run_dir>/checkpoint` and the test report.
    Train(Args),
    /// Re-evaluate `<run_dir>/checkpoint` on the test items.
    Eval(Args),
    /// Randomly initialized runs over the configured dimensions.
    Sweep(Args),
    /// Baseline vs seeded runs on full and thinned training data.
    Coldstart(Args),
}

#[derive(clap::Args)]
struct Args {
    #[arg(long)]
    config: PathBuf,
}

fn data_dir(cfg: &RunConfig) -> PathBuf {
    cfg.run_dir.join("data")
}

fn checkpoint_dir(cfg: &RunConfig) -> PathBuf {
    cfg.run_dir.join("checkpoint")
}

/// Loads the config and copies it into the run directory.
fn setup(path: &Path) -> Result<RunConfig> {
    let cfg = RunConfig::from_file(path)?;
    fs::create_dir_all(&cfg.run_dir).with_context(|| format!("creating {}", cfg.run_dir.display()))?;
    let name = path.file_name().context("config path has no file name")?;
    let copy = cfg.run_dir.join(name);
    if fs::canonicalize(path).ok() != fs::canonicalize(&copy).ok() {
        fs::copy(path, &copy).with_context(|| format!("copying config to {}", copy.display()))?;
    }
    Ok(cfg)
}

fn manifest(cfg: &RunConfig) -> Result<Manifest> {
    let dir = data_dir(cfg);
    data::read_manifest(&dir).with_context(|| format!("reading {}; run `cfseed prepare` first", dir.display()))
}

fn write_reports(report: &eval::EvalReport, dir: &Path, stem: &str) -> Result<()> {
    eval::emit_report(report, &dir.join(format!("{stem}.json")), ReportFormat::Json)?;
    eval::emit_report(report, &dir.join(format!("{stem}.csv")), ReportFormat::Csv)?;
    Ok(())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Prepare(a) => {
            let cfg = setup(&a.config)?;
            let m = experiments::prepare(&cfg)?;
            data::write_manifest(&data_dir(&cfg), &m)?;
            info!(
                "wrote {} ({} users, {} items, {} train edges)",
                data_dir(&cfg).display(),
                m.split.n_users,
                m.split.n_items,
                m.split.train.len()
            );
        }
        Command::Init(a) => {
            let cfg = setup(&a.config)?;
            let m = manifest(&cfg)?;
            let llm = experiments::load_embeddings(&cfg, &m)?;
            let tables = experiments::build_tables(&cfg, &build_graph(&m.split), llm.as_ref())?;
            let dir = cfg.run_dir.join("init");
            fs::create_dir_all(&dir)?;
            let users = tables
                .user_table
                .clone()
                .with_index_checksum(embio::index_checksum(&m.user_ids));
            embio::write_matrix(&users, &dir.join(experiments::USER_TABLE_FILE))?;
            embio::write_matrix(&tables.item_table, &dir.join(experiments::ITEM_TABLE_FILE))?;
            if let Some(idx) = &tables.indices {
                fs::write(dir.join("indices.json"), serde_json::to_string(idx.indices())?)?;
            }
            info!("wrote {} ({} x K={})", dir.display(), tables.strategy, tables.dim());
        }
        Command::Train(a) => {
            let cfg = setup(&a.config)?;
            let m = manifest(&cfg)?;
            let llm = experiments::load_embeddings(&cfg, &m)?;
            let graph = build_graph(&m.split);
            let tables = experiments::build_tables(&cfg, &graph, llm.as_ref())?;
            let run = experiments::train_and_evaluate(&cfg, &m.split, &graph, &tables)?;
            let meta = CheckpointMeta::new(&cfg, &tables, &run);
            experiments::write_checkpoint(&checkpoint_dir(&cfg), &run.state, &meta, &m)?;
            fs::write(
                cfg.run_dir.join("history.json"),
                serde_json::to_string_pretty(&run.history)?,
            )?;
            write_reports(&run.report, &cfg.run_dir, "report")?;
            println!(
                "params {}  best epoch {}  test ndcg@10 {:.6}",
                meta.parameter_count,
                run.best_epoch,
                run.report.ndcg_at(experiments::VALIDATION_CUTOFF).unwrap_or(0.0)
            );
        }
        Command::Eval(a) => {
            let cfg = setup(&a.config)?;
            let m = manifest(&cfg)?;
            let (state, _) = experiments::read_checkpoint(&checkpoint_dir(&cfg), &m)?;
            let report = eval::full_rank_eval(&model::propagate(&state), &m.split, &cfg.report_cutoffs())?;
            write_reports(&report, &cfg.run_dir, "eval")?;
            if let Err(e) = report.check_invariants() {
                bail!("report invariant violated: {e}");
            }
            for (i, k) in report.cutoffs.iter().enumerate() {
                println!("recall@{k} {:.6}  ndcg@{k} {:.6}", report.recall[i], report.ndcg[i]);
            }
        }
        Command::Sweep(a) => {
            let cfg = setup(&a.config)?;
            let m = manifest(&cfg)?;
            let rows = experiments::run_size_sweep(&cfg, &m.split)?;
            let path = cfg.run_dir.join("sweep.csv");
            experiments::write_sweep_csv(&rows, &path)?;
            info!("wrote {}", path.display());
        }
        Command::Coldstart(a) => {
            let cfg = setup(&a.config)?;
            let m = manifest(&cfg)?;
            let llm = experiments::load_embeddings(&cfg, &m)?;
            let out = experiments::run_coldstart(&cfg, &m.split, llm.as_ref())?;
            write_reports(&out.full.baseline, &cfg.run_dir, "full_baseline")?;
            write_reports(&out.full.llminit, &cfg.run_dir, "full_llminit")?;
            write_reports(&out.perturbed.baseline, &cfg.run_dir, "coldstart_baseline")?;
            write_reports(&out.perturbed.llminit, &cfg.run_dir, "coldstart_llminit")?;
            let rows = out.gain_table();
            experiments::write_gain_csv(&rows, &cfg.run_dir.join("gains.csv"))?;
            for r in rows {
                println!("{:<10} {:<10} gain {:+.4}", r.regime, r.metric, r.gain);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
