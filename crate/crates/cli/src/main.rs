//! `discprompt`: zero-shot scoring, few-shot fine-tuning and output analyses.
//!
//! Exit codes: 0 success, 2 configuration or input problems (bad flags,
//! unknown task/template/model, missing capability, missing records or data),
//! 3 runtime failures.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use discprompt::analysis::{corpus_probe, distribution_report, emit_histograms, emit_ksweep, FigureFormat};
use discprompt::backend::{load_bundle, make_toy_bundle, save_toy, ModelBundle};
use discprompt::data::{corpus_sample, import_file, load_task, ImportFormat};
use discprompt::harness::{k_sweep, persist_report, read_report, run_experiment_with, RunReport, Setting};
use discprompt::prompting::Registry;
use discprompt::Error;

use config::{resolve, FileConfig, RunFlags, SweepFlags, TrainFlags};

/// `println!` that ignores a closed stdout (e.g. piped into `head`).
macro_rules! out {
    ($($t:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout().lock(), $($t)*);
    }};
}

/// An error in how the tool was invoked; always exit code 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

#[derive(Parser)]
#[command(name = "discprompt", version, about = "Prompt-based scoring and few-shot fine-tuning with discriminative and masked-LM encoders")]
struct Cli {
    /// TOML config, JSON experiment config, or a run report to replay.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Print machine-readable JSON instead of text.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Zero-shot accuracy on the evaluation split.
    Zeroshot {
        #[command(flatten)]
        run: RunFlags,
    },
    /// Few-shot fine-tuning over seeds and the learning-rate x batch-size grid.
    Fewshot {
        #[command(flatten)]
        run: RunFlags,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Score histograms and K-sweep curves.
    Analyze {
        #[command(subcommand)]
        what: Analysis,
    },
    /// Convert a downloaded dataset split into the canonical JSONL layout.
    Import {
        #[arg(long)]
        task: String,
        /// hf-jsonl or tsv.
        #[arg(long)]
        format: ImportFormat,
        #[arg(long)]
        input: PathBuf,
        /// Usually `<data-root>/<task>/<train|validation>.jsonl`.
        #[arg(long)]
        output: PathBuf,
    },
    /// Write a seeded toy bundle for smoke tests.
    MakeToy {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 128)]
        vocab: usize,
        #[arg(long, default_value_t = 16)]
        hidden: usize,
        #[arg(long, default_value_t = 2)]
        layers: usize,
        #[arg(long, value_enum, default_value_t = Heads::Both)]
        heads: Heads,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Heads {
    Mlm,
    Disc,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Image,
}

impl From<Format> for FigureFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => FigureFormat::Csv,
            Format::Image => FigureFormat::Image,
        }
    }
}

#[derive(Subcommand)]
enum Analysis {
    /// Per (gold label, label word) score histograms on the evaluation split.
    Dist {
        #[command(flatten)]
        run: RunFlags,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
    },
    /// Accuracy against K, from saved reports or live runs.
    Ksweep {
        /// Directory of run reports; replaces live runs.
        #[arg(long, conflicts_with = "k")]
        reports: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        k: Option<Vec<usize>>,
        /// Settings to sweep (default fewshot_standard,fewshot_prompt).
        #[arg(long, value_delimiter = ',')]
        settings: Option<Vec<Setting>>,
        #[command(flatten)]
        run: RunFlags,
        #[command(flatten)]
        train: SweepFlags,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
    },
    /// Mask a word pair in corpus sentences and bin the original word's probability.
    Corpus {
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        revision: Option<String>,
        /// Exactly two words, e.g. `great,terrible`.
        #[arg(long, value_delimiter = ',', required = true)]
        words: Vec<String>,
        /// Plain text, one sentence per line.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = discprompt::analysis::DEFAULT_CORPUS_N)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
    },
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<Usage>().is_some() {
        return 2;
    }
    match e.downcast_ref::<Error>() {
        Some(
            Error::Config(_)
            | Error::Registry(_)
            | Error::Capability(_)
            | Error::Input(_)
            | Error::Parse { .. }
            | Error::Mode(_)
            | Error::Verbalizer(_)
            | Error::Render(_)
            | Error::Fetch(_)
            | Error::Sampling(_),
        ) => 2,
        Some(Error::Io { source, .. }) if source.kind() == std::io::ErrorKind::NotFound => 2,
        _ => 3,
    }
}

fn component(e: &anyhow::Error) -> &'static str {
    match e.downcast_ref::<Error>() {
        Some(err) => err.component(),
        None => "cli",
    }
}

fn check_device() -> anyhow::Result<()> {
    match std::env::var("DISCPROMPT_DEVICE") {
        Ok(d) if !d.is_empty() && d != "cpu" => {
            Err(Usage(format!("DISCPROMPT_DEVICE=`{d}` is not supported; this build runs on cpu only")).into())
        }
        _ => Ok(()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let json = cli.json;
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            if json {
                let v = serde_json::json!({"error": format!("{e:#}"), "component": component(&e), "exit_code": code});
                out!("{v}");
            } else {
                eprintln!("error [{}]: {e:#}", component(&e));
            }
            ExitCode::from(code)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    check_device()?;
    let file = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    match cli.command {
        Command::Zeroshot { run } => experiment(&file, &run, None, cli.json),
        Command::Fewshot { run, train } => experiment(&file, &run, Some(&train), cli.json),
        Command::Analyze { what } => analyze(&file, what, cli.json),
        Command::Import { task, format, input, output } => {
            let s = import_file(&task, format, &input, &output)?;
            if cli.json {
                out!("{}", serde_json::json!({"output": output, "written": s.written, "skipped": s.skipped}));
            } else {
                out!("wrote {} examples to {} ({} skipped)", s.written, output.display(), s.skipped);
            }
            Ok(())
        }
        Command::MakeToy { out, seed, vocab, hidden, layers, heads } => {
            let b = make_toy_bundle(seed, vocab, hidden, layers)?;
            let b = match heads {
                Heads::Both => b,
                Heads::Mlm => b.without_disc_head()?,
                Heads::Disc => b.without_vocab_head()?,
            };
            save_toy(&b, &out)?;
            if cli.json {
                out!("{}", serde_json::json!({"output": out, "model_id": b.model_id}));
            } else {
                out!("wrote {} to {}", b.model_id, out.display());
            }
            Ok(())
        }
    }
}

fn experiment(file: &FileConfig, run: &RunFlags, train: Option<&TrainFlags>, json: bool) -> anyhow::Result<()> {
    let forced = train.is_none().then_some(Setting::ZeroShot);
    let cfg = resolve(file, run, train, forced, Setting::FewshotPrompt)?;
    let registry = Registry::default_registry();
    // Resolve the template before loading anything large.
    registry.get(cfg.template_id())?;
    let bundle = load_bundle(&cfg.model_id, &cfg.revision)?;
    let data = load_task(&cfg.task_id, &cfg.data_root)?;
    let report = run_experiment_with(&bundle, &data, &registry, &cfg)?;
    let path = match &cfg.out_dir {
        Some(dir) => Some(persist_report(&report, dir)?),
        None => None,
    };
    print_report(&report, path.as_deref(), json);
    if report.mean.is_none() {
        let why = report.per_seed.iter().find_map(|r| r.error.clone()).unwrap_or_default();
        anyhow::bail!("no seed produced an accuracy: {why}");
    }
    Ok(())
}

fn print_report(r: &RunReport, path: Option<&Path>, json: bool) {
    if json {
        out!("{}", serde_json::json!({"report_path": path, "report": r}));
        return;
    }
    let strategy = r.strategy.map(|s| s.to_string()).unwrap_or_default();
    let head = format!("{} {} {} [{}]", r.task_id, r.model_id, r.setting, strategy);
    match (r.mean, r.std) {
        (Some(m), _) if r.setting == Setting::ZeroShot => out!("{head}: accuracy {:.2}", 100.0 * m),
        (Some(m), Some(s)) => out!(
            "{head} K={}: mean {:.2} std {:.2} over seeds {:?}{}",
            r.k.map(|k| k.to_string()).unwrap_or_else(|| "all".into()),
            100.0 * m,
            100.0 * s,
            r.seeds,
            if r.complete { "" } else { " (incomplete)" }
        ),
        _ => out!("{head}: no accuracy"),
    }
    for rec in r.per_seed.iter().filter(|s| s.error.is_some()) {
        out!("  seed {} failed: {}", rec.seed, rec.error.as_deref().unwrap_or_default());
    }
    if let Some(p) = path {
        out!("report: {}", p.display());
    }
}

fn print_paths(paths: &[PathBuf], json: bool) {
    if json {
        out!("{}", serde_json::json!({ "outputs": paths }));
    } else {
        for p in paths {
            out!("{}", p.display());
        }
    }
}

fn load_model(model: Option<&String>, file_model: Option<&String>, revision: Option<&String>) -> anyhow::Result<ModelBundle> {
    let model = model.or(file_model).ok_or_else(|| Usage("--model is required".into()))?;
    let rev = revision.map(String::as_str).unwrap_or("main");
    Ok(load_bundle(model, rev)?)
}

fn analyze(file: &FileConfig, what: Analysis, json: bool) -> anyhow::Result<()> {
    let registry = Registry::default_registry();
    match what {
        Analysis::Dist { run, format } => {
            let cfg = resolve(file, &run, None, Some(Setting::ZeroShot), Setting::ZeroShot)?;
            let prompt = registry.get(cfg.template_id())?;
            let bundle = load_bundle(&cfg.model_id, &cfg.revision)?;
            let data = load_task(&cfg.task_id, &cfg.data_root)?;
            let strategy = cfg.resolve_strategy(&bundle, prompt)?;
            let hists = distribution_report(&bundle, prompt, &data.eval, strategy)?;
            let out = cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("results"));
            let paths = emit_histograms(&hists, &cfg.task_id, &bundle.model_id, "dist", &out, format.into())?;
            print_paths(&paths, json);
        }
        Analysis::Ksweep { reports, k, settings, run, train, format } => {
            let out = run.out.clone().or_else(|| file.out_dir.clone()).unwrap_or_else(|| PathBuf::from("results"));
            let collected = match reports {
                Some(dir) => read_reports(&dir)?,
                None => {
                    let ks = k.ok_or_else(|| Usage("give --reports DIR or --k list".into()))?;
                    let cfg = resolve(file, &run, Some(&train.into()), None, Setting::FewshotPrompt)?;
                    let prompt = registry.get(cfg.template_id())?;
                    let bundle = load_bundle(&cfg.model_id, &cfg.revision)?;
                    let data = load_task(&cfg.task_id, &cfg.data_root)?;
                    cfg.resolve_strategy(&bundle, prompt)?;
                    let settings = settings.unwrap_or_else(|| vec![Setting::FewshotStandard, Setting::FewshotPrompt]);
                    let base = discprompt::harness::ExperimentConfig { strategy: None, ..cfg.clone() };
                    let rs = k_sweep(&bundle, &data, &registry, &base, &settings, &ks)?;
                    if let Some(dir) = &cfg.out_dir {
                        for r in &rs {
                            persist_report(r, dir)?;
                        }
                    }
                    rs
                }
            };
            let paths = emit_ksweep(&collected, &out, format.into())?;
            print_paths(&paths, json);
        }
        Analysis::Corpus { model, revision, words, corpus, n, seed, out, format } => {
            let [a, b] = words.as_slice() else {
                return Err(Usage(format!("--words needs exactly two words, got {}", words.len())).into());
            };
            let bundle = load_model(model.as_ref(), file.model_id.as_ref(), revision.as_ref().or(file.revision.as_ref()))?;
            let sample = corpus_sample(&corpus, &words, n, seed)?;
            let (ha, hb) = corpus_probe(&bundle, &sample, [a, b])?;
            let task = corpus.file_stem().and_then(|s| s.to_str()).unwrap_or("corpus").to_string();
            let out = out.or_else(|| file.out_dir.clone()).unwrap_or_else(|| PathBuf::from("results"));
            let paths = emit_histograms(&[ha, hb], &task, &bundle.model_id, "corpus", &out, format.into())?;
            print_paths(&paths, json);
        }
    }
    Ok(())
}

/// Run reports directly under `dir` (trial records in `trials/` are skipped).
fn read_reports(dir: &Path) -> anyhow::Result<Vec<RunReport>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Usage(format!("reading {}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut out = Vec::new();
    for p in paths {
        out.push(read_report(&p).with_context(|| format!("reading {}", p.display()))?);
    }
    if out.is_empty() {
        return Err(Usage(format!("no run reports in {}", dir.display())).into());
    }
    Ok(out)
}
