//! Config file loading and flag merging. Precedence: flags > file > defaults.

use std::path::{Path, PathBuf};

use discprompt::harness::{ExperimentConfig, GridSpec, OptimizerConfig, Setting};
use discprompt::objectives::Objective;
use discprompt::scoring::Strategy;
use serde::Deserialize;

use crate::Usage;

/// Every field of [`ExperimentConfig`], all optional.
///
/// Accepted as TOML, as a JSON experiment config, or as a JSON run report
/// (its embedded `config` is used), so any echoed config can be replayed.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub model_id: Option<String>,
    pub revision: Option<String>,
    pub task_id: Option<String>,
    pub template_id: Option<String>,
    pub setting: Option<Setting>,
    pub k: Option<usize>,
    pub seeds: Option<Vec<u64>>,
    pub strategy: Option<Strategy>,
    pub objective: Option<Objective>,
    pub shuffle: Option<bool>,
    pub grid: Option<GridSpec>,
    pub max_steps: Option<usize>,
    pub eval_every: Option<usize>,
    pub optimizer: Option<OptimizerConfig>,
    pub data_root: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl FileConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Usage(format!("reading config {}: {e}", path.display())))?;
        let parsed = if path.extension().is_some_and(|e| e == "json") {
            let mut v: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| Usage(format!("{}: {e}", path.display())))?;
            if v.get("schema_version").is_some() {
                v = v.get_mut("config").map(serde_json::Value::take).unwrap_or_default();
            }
            serde_json::from_value(v).map_err(|e| Usage(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| Usage(format!("{}: {e}", path.display())))?
        };
        Ok(parsed)
    }
}

/// Experiment flags shared by `zeroshot`, `fewshot` and live analyses.
#[derive(Debug, Default, Clone, clap::Args)]
pub struct RunFlags {
    /// Hub id, alias (electra-base, roberta-base, ...), checkpoint directory or toy file.
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub task: Option<String>,
    /// Registry entry, e.g. `mnli@t2`; defaults to the task id.
    #[arg(long)]
    pub template: Option<String>,
    #[arg(long)]
    pub strategy: Option<Strategy>,
    #[arg(long)]
    pub revision: Option<String>,
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    /// Results directory (default `results`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Flags that only matter when training.
#[derive(Debug, Default, Clone, clap::Args)]
pub struct TrainFlags {
    /// Examples per label (single-token) or in total (multiple choice).
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// `small`, `default`, `full`, `lr=<a,b,..>`, `bs=<a,b,..>`; later items override earlier ones.
    #[arg(long, num_args = 1..)]
    pub grid: Option<Vec<String>>,
    /// Keep each example's renderings together in a fixed order.
    #[arg(long)]
    pub no_shuffle: bool,
    #[arg(long)]
    pub objective: Option<Objective>,
    /// fewshot_prompt (default), fewshot_standard or full_shot.
    #[arg(long)]
    pub setting: Option<Setting>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
}

/// Training flags for sweeps, where `--k` is a list owned by the sweep.
#[derive(Debug, Default, Clone, clap::Args)]
pub struct SweepFlags {
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long, num_args = 1..)]
    pub grid: Option<Vec<String>>,
    #[arg(long)]
    pub no_shuffle: bool,
    #[arg(long)]
    pub objective: Option<Objective>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
}

impl From<SweepFlags> for TrainFlags {
    fn from(s: SweepFlags) -> Self {
        TrainFlags {
            k: None,
            seeds: s.seeds,
            grid: s.grid,
            no_shuffle: s.no_shuffle,
            objective: s.objective,
            setting: None,
            max_steps: s.max_steps,
            eval_every: s.eval_every,
        }
    }
}

fn required(flag: Option<&String>, file: Option<&String>, name: &str) -> anyhow::Result<String> {
    flag.or(file).cloned().ok_or_else(|| Usage(format!("--{name} is required (or set it in the config file)")).into())
}

pub fn apply_grid(mut grid: GridSpec, items: &[String]) -> anyhow::Result<GridSpec> {
    for item in items {
        match item.as_str() {
            "small" => grid = GridSpec::small(),
            "default" => grid = GridSpec::default_grid(),
            "full" => grid = GridSpec::full_shot(),
            other => {
                let (key, values) = other
                    .split_once('=')
                    .ok_or_else(|| Usage(format!("bad --grid item `{other}` (small, default, full, lr=.., bs=..)")))?;
                let bad = |v: &str| Usage(format!("bad --grid value `{v}` in `{other}`"));
                match key {
                    "lr" => {
                        grid.learning_rates =
                            values.split(',').map(|v| v.parse::<f64>().map_err(|_| bad(v))).collect::<Result<_, _>>()?
                    }
                    "bs" => {
                        grid.batch_sizes =
                            values.split(',').map(|v| v.parse::<usize>().map_err(|_| bad(v))).collect::<Result<_, _>>()?
                    }
                    _ => return Err(Usage(format!("unknown --grid key `{key}` (lr, bs)")).into()),
                }
            }
        }
    }
    Ok(grid)
}

/// Resolves the experiment config for a command whose setting is
/// `forced` (zero-shot) or chosen by flag/file with `fallback`.
pub fn resolve(
    file: &FileConfig,
    run: &RunFlags,
    train: Option<&TrainFlags>,
    forced: Option<Setting>,
    fallback: Setting,
) -> anyhow::Result<ExperimentConfig> {
    let model = required(run.model.as_ref(), file.model_id.as_ref(), "model")?;
    let task = required(run.task.as_ref(), file.task_id.as_ref(), "task")?;
    let setting = match forced {
        Some(s) => s,
        None => train
            .and_then(|t| t.setting)
            .or(file.setting.filter(|s| *s != Setting::ZeroShot))
            .unwrap_or(fallback),
    };
    if forced.is_none() && setting == Setting::ZeroShot {
        return Err(Usage("use the `zeroshot` command for the zero_shot setting".into()).into());
    }
    let mut c = ExperimentConfig::new(model, task, setting);

    // file
    if let Some(v) = &file.revision {
        c.revision = v.clone();
    }
    if file.template_id.is_some() {
        c.template_id = file.template_id.clone();
    }
    if file.k.is_some() {
        c.k = file.k;
    }
    if let Some(v) = &file.seeds {
        c.seeds = v.clone();
    }
    if file.strategy.is_some() {
        c.strategy = file.strategy;
    }
    if let Some(v) = file.objective {
        c.objective = v;
    }
    if let Some(v) = file.shuffle {
        c.shuffle = v;
    }
    if let Some(v) = &file.grid {
        c.grid = v.clone();
    }
    if let Some(v) = file.max_steps {
        c.max_steps = v;
    }
    if let Some(v) = file.eval_every {
        c.eval_every = v;
    }
    if let Some(v) = &file.optimizer {
        c.optimizer = v.clone();
    }
    if let Some(v) = &file.data_root {
        c.data_root = v.clone();
    }
    c.out_dir = file.out_dir.clone();

    // flags
    if let Some(v) = &run.revision {
        c.revision = v.clone();
    }
    if run.template.is_some() {
        c.template_id = run.template.clone();
    }
    if run.strategy.is_some() {
        c.strategy = run.strategy;
    }
    if let Some(v) = &run.data_root {
        c.data_root = v.clone();
    }
    if run.out.is_some() {
        c.out_dir = run.out.clone();
    }
    if c.out_dir.is_none() {
        c.out_dir = Some(PathBuf::from("results"));
    }
    if let Some(t) = train {
        if t.k.is_some() {
            c.k = t.k;
        }
        if let Some(v) = &t.seeds {
            c.seeds = v.clone();
        }
        if let Some(items) = &t.grid {
            c.grid = apply_grid(c.grid.clone(), items)?;
        }
        if t.no_shuffle {
            c.shuffle = false;
        }
        if let Some(v) = t.objective {
            c.objective = v;
        }
        if let Some(v) = t.max_steps {
            c.max_steps = v;
        }
        if let Some(v) = t.eval_every {
            c.eval_every = v;
        }
    }
    if setting == Setting::ZeroShot {
        c.k = None;
    }
    Ok(c)
}
