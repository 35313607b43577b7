use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use mctscritic::filter;
use mctscritic::gateway::{Gateway, ModelBackend, PromptTemplates, RemoteBackend, ScriptedPolicy};
use mctscritic::mcts::{self, MctsError};
use mctscritic::mining::{self, MineOptions};
use mctscritic::objective::{self, TokenProbSequence};
use mctscritic::refine;
use mctscritic::store::{self, FileHeader, RunConfig};

const BASE_URL_ENV: &str = "MCTSCRITIC_BASE_URL";

#[derive(Parser)]
#[command(
    name = "mctscritic",
    version,
    about = "Critique dataset construction and actor-critic inference"
)]
struct Cli {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum, default_value_t = BackendKind::Remote)]
    backend: BackendKind,
    /// Mock script file; overrides `[mock] script`.
    #[arg(long, global = true)]
    script: Option<PathBuf>,
    /// Worker threads; overrides `parallelism`.
    #[arg(long, global = true)]
    parallelism: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BackendKind {
    Remote,
    Mock,
}

#[derive(Subcommand)]
enum Command {
    /// Build one search tree per question.
    Search {
        questions: PathBuf,
        /// Output directory for tree dumps.
        #[arg(long)]
        out: PathBuf,
    },
    /// Mine positive and negative critique samples from tree dumps.
    Mine {
        trees: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Keep negatives whose critique lets the actor recover.
    Filter {
        samples: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Iterative actor-critic inference with a per-iteration report.
    Infer {
        questions: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Loss values for records of token probabilities, labels and scores.
    Losses {
        records: PathBuf,
        /// Write results here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Input(String),
    Backend(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Input(_) => 2,
            Failure::Backend(_) => 3,
        }
    }
}

impl From<store::StoreError> for Failure {
    fn from(e: store::StoreError) -> Self {
        Failure::Input(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let msg = match &f {
                Failure::Input(m) | Failure::Backend(m) => m,
            };
            eprintln!("error: {msg}");
            ExitCode::from(f.code())
        }
    }
}

fn run(cli: Cli) -> CmdResult {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.search.seed = s;
    }
    if let Some(n) = cli.parallelism {
        if n == 0 {
            return Err(Failure::Input("--parallelism must be ≥ 1".into()));
        }
        cfg.parallelism = Some(n);
    }
    if let Some(s) = &cli.script {
        cfg.mock.script = Some(s.clone());
    }
    if let Ok(url) = std::env::var(BASE_URL_ENV) {
        cfg.remote.base_url = url;
    }
    configure_threads(cfg.parallelism);

    if let Command::Losses { records, out } = &cli.command {
        return cmd_losses(records, out.as_deref(), &cfg);
    }
    let gateway = build_gateway(cli.backend, &cfg)?;
    match &cli.command {
        Command::Search { questions, out } => cmd_search(questions, out, &cfg, &gateway),
        Command::Mine { trees, out } => cmd_mine(trees, out, &cfg, &gateway),
        Command::Filter { samples, out } => cmd_filter(samples, out, &cfg, &gateway),
        Command::Infer { questions, out } => cmd_infer(questions, out, &cfg, &gateway),
        Command::Losses { .. } => unreachable!("handled above"),
    }
}

#[cfg(feature = "parallel")]
fn configure_threads(n: Option<usize>) {
    if let Some(n) = n {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size the worker pool: {e}");
        }
    }
}

#[cfg(not(feature = "parallel"))]
fn configure_threads(n: Option<usize>) {
    if n.is_some_and(|n| n > 1) {
        log::warn!("built without the parallel feature; running on one thread");
    }
}

fn build_gateway(kind: BackendKind, cfg: &RunConfig) -> Result<Gateway, Failure> {
    let backend: Arc<dyn ModelBackend> = match kind {
        BackendKind::Mock => {
            let policy = match &cfg.mock.script {
                Some(p) => ScriptedPolicy::load(p, cfg.mock.default_behavior)
                    .map_err(|e| Failure::Input(format!("{}: {e}", p.display())))?,
                None => ScriptedPolicy::new(cfg.mock.default_behavior),
            };
            Arc::new(policy)
        }
        BackendKind::Remote => {
            let templates = match &cfg.remote.templates_dir {
                Some(d) => PromptTemplates::load_dir(d).map_err(|e| Failure::Input(format!("{}: {e}", d.display())))?,
                None => PromptTemplates::default(),
            };
            let key = std::env::var(&cfg.remote.api_key_env).ok();
            let b =
                RemoteBackend::new(cfg.remote.clone(), key, templates).map_err(|e| Failure::Backend(e.to_string()))?;
            Arc::new(b)
        }
    };
    Ok(Gateway::new(
        backend,
        cfg.gateway.to_settings(cfg.search.step_token_cap),
    ))
}

/// Report path next to an output file or inside an output directory.
fn report_path(out: &Path, is_dir: bool) -> PathBuf {
    if is_dir {
        out.join("report.json")
    } else {
        let mut s = out.as_os_str().to_owned();
        s.push(".report.json");
        PathBuf::from(s)
    }
}

fn write_report<T: Serialize>(path: &Path, report: &T) -> CmdResult {
    let mut text = serde_json::to_string_pretty(report).expect("report serializes");
    text.push('\n');
    store::write_atomic(path, text.as_bytes())?;
    Ok(())
}

#[derive(Serialize)]
struct SearchReport {
    questions: usize,
    trees_written: usize,
    partial: Vec<String>,
    failed: Vec<String>,
    failed_rollouts: usize,
}

fn cmd_search(questions: &Path, out: &Path, cfg: &RunConfig, gateway: &Gateway) -> CmdResult {
    let qs = store::read_questions(questions)?;
    std::fs::create_dir_all(out).map_err(|e| Failure::Input(format!("{}: {e}", out.display())))?;
    let results = mctscritic::exec::map(&qs, |q| mcts::run_search(q.clone(), gateway, &cfg.search));
    let mut report = SearchReport {
        questions: qs.len(),
        trees_written: 0,
        partial: Vec::new(),
        failed: Vec::new(),
        failed_rollouts: 0,
    };
    for (i, (q, res)) in qs.iter().zip(results).enumerate() {
        match res {
            Ok(tree) => {
                store::write_tree(&out.join(store::tree_file_name(i, &q.id)), &tree, &cfg.search)?;
                report.trees_written += 1;
                report.failed_rollouts += tree.status.failed_rollouts;
                if tree.status.partial {
                    report.partial.push(q.id.clone());
                }
            }
            Err(MctsError::InvalidConfig(v)) => return Err(Failure::Input(v.join("; "))),
            Err(e) => {
                eprintln!("search failed for {}: {e}", q.id);
                report.failed.push(q.id.clone());
            }
        }
    }
    write_report(&report_path(out, true), &report)?;
    eprintln!(
        "search: {} questions, {} trees, {} partial, {} failed",
        report.questions,
        report.trees_written,
        report.partial.len(),
        report.failed.len()
    );
    if report.partial.is_empty() && report.failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Backend(format!(
            "{} partial and {} failed searches",
            report.partial.len(),
            report.failed.len()
        )))
    }
}

#[derive(Serialize)]
struct MineReport {
    #[serde(flatten)]
    stats: mining::MineStats,
    skipped_files: Vec<String>,
}

fn cmd_mine(trees: &Path, out: &Path, cfg: &RunConfig, gateway: &Gateway) -> CmdResult {
    let files = store::list_trees(trees)?;
    let mut loaded = Vec::new();
    let mut skipped_files = Vec::new();
    for f in &files {
        match store::read_tree(f) {
            Ok((tree, _)) => loaded.push(tree),
            Err(e) => {
                eprintln!("skipping {e}");
                skipped_files.push(f.display().to_string());
            }
        }
    }
    let options = MineOptions {
        include_rollouts: cfg.search.mine_rollouts,
        all_positives: cfg.search.all_positives,
    };
    let (samples, stats) = mining::mine_trees(&loaded, gateway, &options);
    store::write_jsonl(
        out,
        &FileHeader::new("critique_samples", cfg.search.config_hash()),
        &samples,
    )?;
    eprintln!(
        "mine: {} trees, {} positives, {} negatives, {} without reference",
        stats.trees, stats.positives, stats.negatives, stats.no_reference
    );
    let skipped = stats.skipped_annotations;
    write_report(&report_path(out, false), &MineReport { stats, skipped_files })?;
    if skipped > 0 {
        return Err(Failure::Backend(format!("{skipped} annotations failed")));
    }
    Ok(())
}

fn cmd_filter(samples: &Path, out: &Path, cfg: &RunConfig, gateway: &Gateway) -> CmdResult {
    let text = store::read_to_string(samples)?;
    let (kept, report) = filter::filter_dataset(gateway, &text, &cfg.search);
    store::write_jsonl(
        out,
        &FileHeader::new("critique_samples", cfg.search.config_hash()),
        &kept,
    )?;
    write_report(&report_path(out, false), &report)?;
    eprintln!(
        "filter: {} positives, {} kept, {} discarded, {} undetermined, {} malformed lines",
        report.positives,
        report.kept,
        report.discarded,
        report.undetermined,
        report.malformed_lines.len()
    );
    if report.undetermined > 0 {
        return Err(Failure::Backend(format!(
            "{} samples undetermined",
            report.undetermined
        )));
    }
    Ok(())
}

fn cmd_infer(questions: &Path, out: &Path, cfg: &RunConfig, gateway: &Gateway) -> CmdResult {
    let qs = store::read_questions(questions)?;
    let (traces, report) = refine::batch_eval(gateway, &qs, &cfg.search);
    store::write_jsonl(
        out,
        &FileHeader::new("refinement_traces", cfg.search.config_hash()),
        &traces,
    )?;
    write_report(&report_path(out, false), &report)?;
    print!("{}", report.render_table());
    if report.errors > 0 {
        return Err(Failure::Backend(format!("{} questions failed", report.errors)));
    }
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LossRecord {
    probs: Vec<f64>,
    label: u8,
    score: f64,
    #[serde(default)]
    lambda: Option<f64>,
}

#[derive(Serialize)]
struct LossLine {
    line: usize,
    lm_loss: f64,
    score_loss: f64,
    total_loss: f64,
    clamped: bool,
}

fn cmd_losses(records: &Path, out: Option<&Path>, cfg: &RunConfig) -> CmdResult {
    let text = store::read_to_string(records)?;
    let mut lines = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let bad = |m: String| Failure::Input(format!("{}:{}: {m}", records.display(), i + 1));
        let rec: LossRecord = serde_json::from_str(raw).map_err(|e| bad(e.to_string()))?;
        let seq = TokenProbSequence::new(rec.probs).map_err(|e| bad(e.to_string()))?;
        let l = objective::record_loss(&seq, rec.label, rec.score, rec.lambda.unwrap_or(cfg.search.loss_weight))
            .map_err(|e| bad(e.to_string()))?;
        lines.push(LossLine {
            line: i + 1,
            lm_loss: l.lm,
            score_loss: l.score,
            total_loss: l.total,
            clamped: l.clamped,
        });
    }
    let body = store::to_jsonl(None, &lines);
    match out {
        Some(p) => store::write_atomic(p, body.as_bytes())?,
        None => print!("{body}"),
    }
    Ok(())
}
