mod artifacts;
mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use docclean::engines::{BackendSpec, Phase};
use docclean::neural::{Alphabet, Checkpoint};
use docclean::pruning::prune;
use docclean::selection::StrategyKind;
use docclean::synthdoc::{builtin_words, generate_dataset, load_manifest, DegradationRanges, GeneratorConfig, Split, SplitCounts, DEFAULT_MARGIN, MANIFEST_FILE};
use docclean::trainer::{build_service, evaluate, pretrain_stage, train_stage, OutputLayout, TrainConfig};
use docclean::Error;

use artifacts::{dataset_fingerprint, read_json, write_json, ExperimentManifest, Layout, PretrainArtifact, PretrainSettings};

#[derive(Parser)]
#[command(name = "docclean", version, about = "Train an OCR preprocessor through a budgeted approximator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic strip dataset.
    Generate(GenerateArgs),
    /// Pre-pass OCR over training strips, prune, and pretrain the approximator.
    Pretrain(RunArgs),
    /// Rank documents by pre-pass CER and write the prune report.
    Prune(PruneArgs),
    /// Budgeted training of the preprocessor.
    Train(RunArgs),
    /// Evaluate a preprocessor checkpoint with the OCR backend.
    Eval(EvalArgs),
    /// Aggregate experiment summaries into sweep tables and plots.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    /// Word list, one word per line.
    #[arg(long)]
    words: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    train: usize,
    #[arg(long, default_value_t = 300)]
    val: usize,
    #[arg(long, default_value_t = 300)]
    test: usize,
    #[arg(long = "strips-per-doc", default_value_t = 10)]
    strips_per_doc: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Clone)]
struct Overrides {
    /// TOML configuration; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    backend: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    budget: Option<f64>,
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long = "prune-fraction")]
    prune_fraction: Option<f64>,
    #[arg(long)]
    epochs: Option<u32>,
    #[arg(long = "pretrain-epochs")]
    pretrain_epochs: Option<u32>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    cache: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Experiment directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PruneArgs {
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long)]
    out: PathBuf,
    /// Fraction to report on; defaults to data.prune_fraction.
    #[arg(long)]
    fraction: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Also write the evaluation JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Experiment directories or summary files.
    #[arg(long, num_args = 1.., required = true)]
    runs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

/// Error carrying the process exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::MissingArtifact(_) => 2,
            Error::Config(_) | Error::InvalidArgument(_) => 3,
            Error::Backend { .. } => 4,
            Error::Numerical { .. } => 5,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn config_error(message: String) -> Failure {
    Failure { code: 3, message }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

fn resolve_config(o: &Overrides) -> CliResult<TrainConfig> {
    let mut cfg = match &o.config {
        Some(path) => {
            if !path.exists() {
                return Err(Error::MissingArtifact(path.clone()).into());
            }
            TrainConfig::load(path)?
        }
        None => TrainConfig::default(),
    };
    if let Some(d) = &o.data {
        cfg.data.dir = d.clone();
    }
    if let Some(b) = &o.backend {
        cfg.backend.spec = b.parse::<BackendSpec>().map_err(|e| config_error(format!("invalid value for backend.spec: {e}")))?;
    }
    if let Some(s) = o.seed {
        cfg.train.seed = s;
    }
    if let Some(b) = o.budget {
        cfg.budget.percent = b;
    }
    if let Some(s) = &o.strategy {
        cfg.budget.strategy = s
            .parse::<StrategyKind>()
            .map_err(|e| config_error(format!("invalid value for budget.strategy: {e}")))?;
    }
    if let Some(p) = o.prune_fraction {
        cfg.data.prune_fraction = p;
    }
    if let Some(e) = o.epochs {
        cfg.train.epochs = e;
    }
    if let Some(e) = o.pretrain_epochs {
        cfg.train.pretrain_epochs = e;
    }
    if let Some(b) = o.beta {
        cfg.train.beta = b;
    }
    if let Some(c) = &o.cache {
        cfg.backend.cache = Some(c.clone());
    }
    let bad = cfg.invalid_keys();
    if !bad.is_empty() {
        return Err(config_error(format!("invalid configuration keys: {}", bad.join(", "))));
    }
    Ok(cfg)
}

fn snapshot(cfg: &TrainConfig) -> CliResult<String> {
    Ok(cfg.to_toml()?)
}

fn cmd_generate(a: &GenerateArgs) -> CliResult {
    let words = match &a.words {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => Failure::from(Error::MissingArtifact(p.clone())),
                _ => Failure::from(Error::Io { path: p.clone(), source: e }),
            })?;
            text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect()
        }
        None => builtin_words(),
    };
    let cfg = GeneratorConfig {
        words,
        counts: SplitCounts {
            train: a.train,
            validation: a.val,
            test: a.test,
        },
        strips_per_document: a.strips_per_doc,
        margin: DEFAULT_MARGIN,
        ranges: DegradationRanges::default(),
        seed: a.seed,
    };
    generate_dataset(&cfg, &a.out)?;
    let fp = dataset_fingerprint(&a.out)?;
    println!("{fp}");
    Ok(())
}

fn load_dataset(cfg: &TrainConfig) -> CliResult<(docclean::synthdoc::Dataset, String)> {
    let manifest = cfg.data.dir.join(MANIFEST_FILE);
    let dataset = load_manifest(&manifest)?;
    let fp = dataset_fingerprint(&cfg.data.dir)?;
    Ok((dataset, fp))
}

fn cmd_pretrain(a: &RunArgs) -> CliResult {
    let cfg = resolve_config(&a.overrides)?;
    let (dataset, fp) = load_dataset(&cfg)?;
    let layout = Layout::new(&a.out);
    let service = build_service(&cfg.backend)?;
    let alphabet = Alphabet::builtin();
    let result = pretrain_stage(&cfg, &dataset, &service, &alphabet);
    std::fs::create_dir_all(layout.pretrain_dir()).map_err(|e| Error::Io {
        path: layout.pretrain_dir(),
        source: e,
    })?;
    service.ledger().export_csv(&layout.pretrain_ledger())?;
    let pretrained = result?;
    Checkpoint::approximator(&pretrained.approximator, None, cfg.train.pretrain_epochs, None).save(&layout.pretrain_checkpoint())?;
    write_json(&layout.pretrain_artifact(), &PretrainArtifact::from_stage(&pretrained, &cfg, fp.clone()))?;
    pretrained.pruning.export_csv(&layout.prune_report())?;
    ExperimentManifest::new(
        "pretrain",
        snapshot(&cfg)?,
        fp,
        vec![layout.pretrain_checkpoint(), layout.pretrain_artifact(), layout.prune_report(), layout.pretrain_ledger()],
    )
    .write(&layout.pretrain_dir())?;
    println!(
        "pre-pass queries {}, kept {} of {} documents, final pretrain loss {:.4}",
        pretrained.prepass_queries,
        pretrained.pruning.kept.len(),
        pretrained.ranking.len(),
        pretrained.pretrain_losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn load_pretrain(layout: &Layout) -> CliResult<PretrainArtifact> {
    for p in [layout.pretrain_artifact(), layout.pretrain_checkpoint()] {
        if !p.exists() {
            return Err(Error::MissingArtifact(p).into());
        }
    }
    Ok(read_json(&layout.pretrain_artifact())?)
}

fn cmd_prune(a: &PruneArgs) -> CliResult {
    let cfg = resolve_config(&a.overrides)?;
    let layout = Layout::new(&a.out);
    let artifact = load_pretrain(&layout)?;
    let fraction = a.fraction.unwrap_or(cfg.data.prune_fraction);
    let outcome = prune(&artifact.ranking, fraction)?;
    outcome.export_csv(&layout.prune_report())?;
    println!(
        "kept {} documents ({} strips), removed {} ({} strips)",
        outcome.kept.len(),
        outcome.kept_strips(),
        outcome.removed.len(),
        outcome.removed_strips()
    );
    Ok(())
}

fn cmd_train(a: &RunArgs) -> CliResult {
    let cfg = resolve_config(&a.overrides)?;
    let layout = Layout::new(&a.out);
    let artifact = load_pretrain(&layout)?;
    let (dataset, fp) = load_dataset(&cfg)?;
    if artifact.dataset_fingerprint != fp {
        return Err(config_error(format!(
            "dataset at {} differs from the one used for pretraining",
            cfg.data.dir.display()
        )));
    }
    let differing = artifact.settings.differing_keys(&PretrainSettings::of(&cfg));
    if !differing.is_empty() {
        return Err(config_error(format!(
            "pretraining artifact was produced with different values for: {}",
            differing.join(", ")
        )));
    }
    let f = Checkpoint::load(&layout.pretrain_checkpoint())?.to_approximator()?;
    let pretrained = artifact.into_stage(f)?;
    let service = build_service(&cfg.backend)?;
    let alphabet = Alphabet::builtin();
    let out = OutputLayout::new(layout.train_dir());
    std::fs::create_dir_all(&out.root).map_err(|e| Error::Io {
        path: out.root.clone(),
        source: e,
    })?;
    ExperimentManifest::new(
        "train",
        snapshot(&cfg)?,
        fp,
        vec![out.summary(), out.epochs(), out.ledger(), out.history(), out.best_preprocessor(), out.last_preprocessor()],
    )
    .write(&out.root)?;
    let outcome = train_stage(&cfg, &dataset, &service, &alphabet, &pretrained, Some(&out))?;
    let s = &outcome.summary;
    println!(
        "best epoch {} (validation {:.4}); test word accuracy {:.4} (raw {:.4}); train queries {} of ceiling {}",
        s.best_epoch, s.best_validation_word_accuracy, s.test_word_accuracy, s.test_raw_word_accuracy, s.train_queries, s.budget_ceiling
    );
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> CliResult {
    let cfg = resolve_config(&a.overrides)?;
    let split: Split = a.split.parse()?;
    let g = Checkpoint::load(&a.checkpoint)?.to_preprocessor()?;
    let (dataset, _) = load_dataset(&cfg)?;
    let strips = dataset.split(split);
    let service = build_service(&cfg.backend)?;
    let alphabet = Alphabet::builtin();
    let eval = evaluate(&g, None, &strips, &service, &alphabet, 0)?;
    let json = serde_json::json!({
        "split": split.as_str(),
        "strips": strips.len(),
        "word_accuracy": eval.word_accuracy,
        "mean_intensity": eval.mean_intensity,
        "eval_queries": service.ledger().count(Phase::Eval),
    });
    if let Some(out) = &a.out {
        write_json(out, &json)?;
    }
    println!("{}", serde_json::to_string_pretty(&json).expect("json value"));
    Ok(())
}

fn cmd_report(a: &ReportArgs) -> CliResult {
    let summaries = report::find_summaries(&a.runs)?;
    if summaries.is_empty() {
        return Err(Error::MissingArtifact(a.runs[0].join("summary.json")).into());
    }
    let rows = report::sweep_rows(&summaries);
    std::fs::create_dir_all(&a.out).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    let mut table = report::markdown_table(&rows);
    for note in report::budget_trend_notes(&rows) {
        table.push_str(&format!("\n{note}\n"));
    }
    write_text(&a.out.join("sweep.md"), &table)?;
    write_json(&a.out.join("sweep.json"), &rows)?;
    report::plot_budget(&rows, &a.out.join("accuracy_vs_budget.svg"))?;
    report::plot_pruning(&rows, &a.out.join("accuracy_vs_pruning.svg"))?;
    print!("{table}");
    Ok(())
}

fn write_text(path: &Path, text: &str) -> CliResult {
    std::fs::write(path, text).map_err(|e| {
        Error::Io {
            path: path.to_path_buf(),
            source: e,
        }
        .into()
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Prune(a) => cmd_prune(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
