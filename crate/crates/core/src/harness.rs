//! Fine-tuning, grid search over learning rate and batch size, multi-seed
//! experiments and their persisted records.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::{load_bundle, ModelBundle, ParamStore};
use crate::data::{load_task, sample_or_full, Example, FewShotSplit, Shots, TaskData, DEFAULT_SEEDS};
use crate::error::{Error, Result};
use crate::objectives::{batch_loss, Objective, Unit};
use crate::prompting::{Prompt, Registry};
use crate::scoring::{argmax_first, prepare, score_prepared, PreparedExample, Strategy, EVAL_BATCH, MAX_SEQ_LEN};

/// Version of the JSON records written by this module.
pub const SCHEMA_VERSION: u32 = 1;

pub const DEFAULT_LEARNING_RATES: [f64; 3] = [1e-5, 2e-5, 3e-5];
pub const DEFAULT_BATCH_SIZES: [usize; 3] = [2, 4, 8];
pub const FULL_SHOT_BATCH_SIZE: usize = 16;
pub const DEFAULT_MAX_STEPS: usize = 1000;
pub const DEFAULT_EVAL_EVERY: usize = 100;

/// Optimizer settings pinned in every record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub name: String,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Learning rate falls linearly from its peak to zero over `max_steps`.
    pub schedule: String,
    pub warmup_steps: usize,
    pub max_seq_len: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            name: "adamw".into(),
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            schedule: "linear".into(),
            warmup_steps: 0,
            max_seq_len: MAX_SEQ_LEN,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub eval_every: usize,
    pub objective: Objective,
    pub strategy: Strategy,
    /// Reshuffle training units every epoch. Off keeps each example's
    /// renderings together in a fixed order.
    pub shuffle: bool,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
}

impl TrialConfig {
    pub fn new(learning_rate: f64, batch_size: usize, strategy: Strategy) -> Self {
        Self {
            learning_rate,
            batch_size,
            max_steps: DEFAULT_MAX_STEPS,
            eval_every: DEFAULT_EVAL_EVERY,
            objective: Objective::Prompt,
            strategy,
            shuffle: true,
            optimizer: OptimizerConfig::default(),
        }
    }

    /// A zero learning rate is accepted as a null-update diagnostic.
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be a non-negative number", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.max_steps == 0 || self.eval_every == 0 || self.max_steps % self.eval_every != 0 {
            return Err(Error::Config(format!(
                "eval_every ({}) must divide max_steps ({})",
                self.eval_every, self.max_steps
            )));
        }
        self.objective.check(self.strategy)
    }

    /// Evaluation points: `eval_every, 2 * eval_every, ..., max_steps`.
    pub fn eval_steps(&self) -> impl Iterator<Item = usize> + '_ {
        (1..=self.max_steps / self.eval_every).map(|i| i * self.eval_every)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum TrialStatus {
    Completed,
    Failed { step: usize, reason: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub config: TrialConfig,
    pub seed: u64,
    pub status: TrialStatus,
    pub best_dev_accuracy: f64,
    pub best_step: usize,
    /// Accuracy of the best-dev parameters on the evaluation split; grid
    /// searches only evaluate their winner.
    pub eval_accuracy: Option<f64>,
    pub dev_curve: Vec<(usize, f64)>,
    pub loss_curve: Vec<(usize, f64)>,
    pub checkpoint: Option<PathBuf>,
}

impl TrialResult {
    pub fn succeeded(&self) -> bool {
        self.status == TrialStatus::Completed
    }
}

fn accuracy(bundle: &ModelBundle, prompt: &Prompt, prepared: &[PreparedExample], strategy: Strategy) -> Result<f64> {
    if prepared.is_empty() {
        return Err(Error::Data("no examples to evaluate".into()));
    }
    let scores = score_prepared(bundle, prompt, prepared, strategy, EVAL_BATCH)?;
    let correct = prepared
        .iter()
        .zip(&scores)
        .filter(|(p, s)| p.gold == Some(argmax_first(s)))
        .count();
    Ok(correct as f64 / prepared.len() as f64)
}

/// Number of task-head outputs fresh-head fine-tuning needs for `prompt`.
pub fn head_outputs(prompt: &Prompt) -> usize {
    prompt.verbalizer.label_space().map_or(1, <[String]>::len)
}

fn prepare_all(bundle: &ModelBundle, prompt: &Prompt, examples: &[Example], strategy: Strategy) -> Result<Vec<PreparedExample>> {
    examples.iter().map(|e| prepare(bundle, prompt, e, strategy)).collect()
}

/// A trained copy with its best-dev parameters loaded.
struct Trained {
    result: TrialResult,
    bundle: Option<ModelBundle>,
}

fn is_decayed(name: &str) -> bool {
    !(name.ends_with(".bias") || name.contains("LayerNorm") || name.contains("layer_norm"))
}

fn optimizers(params: &ParamStore, trial: &TrialConfig) -> Result<[AdamW; 2]> {
    let o = &trial.optimizer;
    let make = |decay: bool| {
        let vars = params
            .iter()
            .filter(|(n, _)| is_decayed(n) == decay)
            .map(|(_, v)| v.clone())
            .collect();
        AdamW::new(
            vars,
            ParamsAdamW {
                lr: trial.learning_rate,
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
                weight_decay: if decay { o.weight_decay } else { 0.0 },
            },
        )
    };
    Ok([make(true)?, make(false)?])
}

fn train(bundle: &ModelBundle, split: &FewShotSplit, prompt: &Prompt, trial: &TrialConfig) -> Result<Trained> {
    trial.validate()?;
    let mut b = bundle.fork()?;
    if trial.strategy == Strategy::HeadSoftmax {
        b.attach_task_head(head_outputs(prompt))?;
    }
    trial.strategy.check(&b, prompt)?;
    let train = prepare_all(&b, prompt, &split.train, trial.strategy)?;
    let dev = prepare_all(&b, prompt, &split.dev, trial.strategy)?;
    if train.is_empty() {
        return Err(Error::Data("empty training split".into()));
    }
    if let Some(e) = train.iter().chain(&dev).find(|e| e.gold.is_none()) {
        return Err(Error::Data(format!("example `{}` has no gold label", e.example_id)));
    }

    let units: Vec<(usize, Option<usize>)> = if trial.objective.per_rendering(trial.strategy) {
        train
            .iter()
            .enumerate()
            .flat_map(|(i, e)| (0..e.renderings.len()).map(move |r| (i, Some(r))))
            .collect()
    } else {
        (0..train.len()).map(|i| (i, None)).collect()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(split.seed);
    let mut order = units.clone();
    let mut cursor = order.len();

    let mut opts = optimizers(b.params(), trial)?;
    let mut result = TrialResult {
        config: trial.clone(),
        seed: split.seed,
        status: TrialStatus::Completed,
        best_dev_accuracy: 0.0,
        best_step: 0,
        eval_accuracy: None,
        dev_curve: Vec::new(),
        loss_curve: Vec::with_capacity(trial.max_steps),
        checkpoint: None,
    };
    let mut best: Option<ParamStore> = None;

    for step in 1..=trial.max_steps {
        let mut batch = Vec::with_capacity(trial.batch_size);
        while batch.len() < trial.batch_size {
            if cursor == order.len() {
                order.clone_from(&units);
                if trial.shuffle {
                    order.shuffle(&mut rng);
                }
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let batch: Vec<Unit> = batch
            .into_iter()
            .map(|(i, r)| Unit {
                example: &train[i],
                rendering: r,
            })
            .collect();
        let loss = batch_loss(&b, prompt, trial.strategy, trial.objective, &batch)?;
        let value = loss.value.value;
        if !value.is_finite() {
            result.status = TrialStatus::Failed {
                step,
                reason: format!("non-finite loss {value}"),
            };
            log::warn!("trial lr={} bs={} diverged at step {step}", trial.learning_rate, trial.batch_size);
            return Ok(Trained { result, bundle: None });
        }
        result.loss_curve.push((step, value));
        // Linear decay to zero, no warmup: update `step` uses lr * (1 - (step - 1) / max_steps).
        let lr = trial.learning_rate * (1.0 - (step - 1) as f64 / trial.max_steps as f64);
        let grads = loss.tensor.backward()?;
        for o in opts.iter_mut() {
            o.set_learning_rate(lr);
            o.step(&grads)?;
        }
        if step % trial.eval_every == 0 {
            let acc = accuracy(&b, prompt, &dev, trial.strategy)?;
            log::debug!("step {step}: loss {value:.4} dev {acc:.4}");
            result.dev_curve.push((step, acc));
            if acc > result.best_dev_accuracy || result.best_step == 0 {
                result.best_dev_accuracy = acc;
                result.best_step = step;
                match &best {
                    Some(s) => s.assign_from(b.params())?,
                    None => best = Some(b.params().deep_clone()?),
                }
            }
        }
    }
    if let Some(s) = &best {
        b.params().assign_from(s)?;
    }
    Ok(Trained {
        result,
        bundle: Some(b),
    })
}

/// Fine-tunes a fresh copy of `bundle` for exactly `trial.max_steps` updates,
/// keeps the best-dev parameters and reports their accuracy on `eval`.
///
/// Divergence is not an error: the result comes back marked failed.
pub fn finetune(
    bundle: &ModelBundle,
    split: &FewShotSplit,
    eval: &[Example],
    prompt: &Prompt,
    trial: &TrialConfig,
) -> Result<TrialResult> {
    let Trained { mut result, bundle: trained } = train(bundle, split, prompt, trial)?;
    if let Some(b) = trained {
        let prepared = prepare_all(&b, prompt, eval, trial.strategy)?;
        result.eval_accuracy = Some(accuracy(&b, prompt, &prepared, trial.strategy)?);
    }
    Ok(result)
}

/// Trains one trial and returns the best-dev model with its result; `None`
/// when the trial failed. No evaluation-split pass is made.
pub fn finetune_model(
    bundle: &ModelBundle,
    split: &FewShotSplit,
    prompt: &Prompt,
    trial: &TrialConfig,
) -> Result<(Option<ModelBundle>, TrialResult)> {
    let Trained { result, bundle } = train(bundle, split, prompt, trial)?;
    Ok((bundle, result))
}

/// Full cartesian grid of learning rates and batch sizes.
pub fn make_grid(learning_rates: &[f64], batch_sizes: &[usize], template: &TrialConfig) -> Vec<TrialConfig> {
    learning_rates
        .iter()
        .flat_map(|&lr| {
            batch_sizes.iter().map(move |&bs| TrialConfig {
                learning_rate: lr,
                batch_size: bs,
                ..template.clone()
            })
        })
        .collect()
}

/// The 3 x 3 grid with everything else taken from `template`.
pub fn default_grid(template: &TrialConfig) -> Vec<TrialConfig> {
    make_grid(&DEFAULT_LEARNING_RATES, &DEFAULT_BATCH_SIZES, template)
}

/// Whether `a` beats `b`: higher dev accuracy, then lower learning rate,
/// then smaller batch.
fn better(a: &TrialResult, b: &TrialResult) -> bool {
    let (ca, cb) = (&a.config, &b.config);
    match a.best_dev_accuracy.total_cmp(&b.best_dev_accuracy) {
        std::cmp::Ordering::Greater => true,
        std::cmp::Ordering::Less => false,
        std::cmp::Ordering::Equal => {
            ca.learning_rate < cb.learning_rate
                || (ca.learning_rate == cb.learning_rate && ca.batch_size < cb.batch_size)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridOutcome {
    pub best: TrialResult,
    /// Every trial in grid order; only the winner carries `eval_accuracy`.
    pub trials: Vec<TrialResult>,
}

/// Runs every trial from a fresh copy of `bundle`, picks the best on dev and
/// evaluates only that one on `eval`.
pub fn grid_search(
    bundle: &ModelBundle,
    split: &FewShotSplit,
    eval: &[Example],
    prompt: &Prompt,
    grid: &[TrialConfig],
) -> Result<GridOutcome> {
    if grid.is_empty() {
        return Err(Error::Sweep("empty grid".into()));
    }
    let mut trials = Vec::with_capacity(grid.len());
    let mut winner: Option<(usize, ModelBundle)> = None;
    for trial in grid {
        let t = train(bundle, split, prompt, trial)?;
        let idx = trials.len();
        if let Some(b) = t.bundle {
            let wins = match &winner {
                None => true,
                Some((w, _)) => better(&t.result, &trials[*w]),
            };
            if wins {
                winner = Some((idx, b));
            }
        }
        trials.push(t.result);
    }
    let Some((w, b)) = winner else {
        return Err(Error::Sweep(format!("all {} trials failed", trials.len())));
    };
    let strategy = trials[w].config.strategy;
    let prepared = prepare_all(&b, prompt, eval, strategy)?;
    trials[w].eval_accuracy = Some(accuracy(&b, prompt, &prepared, strategy)?);
    Ok(GridOutcome {
        best: trials[w].clone(),
        trials,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    ZeroShot,
    FewshotStandard,
    FewshotPrompt,
    FullShot,
}

impl Setting {
    pub fn name(self) -> &'static str {
        match self {
            Setting::ZeroShot => "zero_shot",
            Setting::FewshotStandard => "fewshot_standard",
            Setting::FewshotPrompt => "fewshot_prompt",
            Setting::FullShot => "full_shot",
        }
    }
}

impl FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero_shot" | "zeroshot" => Ok(Setting::ZeroShot),
            "fewshot_standard" | "standard" => Ok(Setting::FewshotStandard),
            "fewshot_prompt" | "prompt" => Ok(Setting::FewshotPrompt),
            "full_shot" | "full" => Ok(Setting::FullShot),
            other => Err(Error::Config(format!(
                "unknown setting `{other}` (zero_shot, fewshot_standard, fewshot_prompt, full_shot)"
            ))),
        }
    }
}

impl std::fmt::Display for Setting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub learning_rates: Vec<f64>,
    pub batch_sizes: Vec<usize>,
}

impl GridSpec {
    pub fn default_grid() -> Self {
        Self {
            learning_rates: DEFAULT_LEARNING_RATES.to_vec(),
            batch_sizes: DEFAULT_BATCH_SIZES.to_vec(),
        }
    }

    /// One trial, for smoke runs.
    pub fn small() -> Self {
        Self {
            learning_rates: vec![DEFAULT_LEARNING_RATES[0]],
            batch_sizes: vec![DEFAULT_BATCH_SIZES[1]],
        }
    }

    pub fn full_shot() -> Self {
        Self {
            learning_rates: DEFAULT_LEARNING_RATES.to_vec(),
            batch_sizes: vec![FULL_SHOT_BATCH_SIZE],
        }
    }

    pub fn len(&self) -> usize {
        self.learning_rates.len() * self.batch_sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Everything that determines an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model_id: String,
    pub revision: String,
    pub task_id: String,
    /// Registry entry; defaults to `task_id`.
    pub template_id: Option<String>,
    pub setting: Setting,
    /// Per label (single-token) or in total (multiple choice).
    pub k: Option<usize>,
    pub seeds: Vec<u64>,
    /// Defaults to the bundle's natural strategy for the setting.
    pub strategy: Option<Strategy>,
    pub objective: Objective,
    pub shuffle: bool,
    pub grid: GridSpec,
    pub max_steps: usize,
    pub eval_every: usize,
    pub optimizer: OptimizerConfig,
    pub data_root: PathBuf,
    /// Results directory; nothing is written when unset.
    pub out_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn new(model_id: impl Into<String>, task_id: impl Into<String>, setting: Setting) -> Self {
        Self {
            model_id: model_id.into(),
            revision: "main".into(),
            task_id: task_id.into(),
            template_id: None,
            setting,
            k: if setting == Setting::FewshotPrompt || setting == Setting::FewshotStandard { Some(16) } else { None },
            seeds: DEFAULT_SEEDS.to_vec(),
            strategy: None,
            objective: Objective::Prompt,
            shuffle: true,
            grid: if setting == Setting::FullShot { GridSpec::full_shot() } else { GridSpec::default_grid() },
            max_steps: DEFAULT_MAX_STEPS,
            eval_every: DEFAULT_EVAL_EVERY,
            optimizer: OptimizerConfig::default(),
            data_root: PathBuf::from("data"),
            out_dir: None,
        }
    }

    pub fn template_id(&self) -> &str {
        self.template_id.as_deref().unwrap_or(&self.task_id)
    }

    /// Hex sha256 of the canonical JSON of the config without `out_dir`.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = None;
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))[..16].to_string()
    }

    /// The strategy this setting runs with on `bundle`.
    pub fn resolve_strategy(&self, bundle: &ModelBundle, prompt: &Prompt) -> Result<Strategy> {
        let natural = Strategy::default_for(bundle, prompt);
        let s = match (self.setting, self.strategy) {
            (Setting::FewshotStandard, None | Some(Strategy::HeadSoftmax)) => Strategy::HeadSoftmax,
            (Setting::FewshotStandard, Some(s)) => {
                return Err(Error::Config(format!("fewshot_standard trains a fresh head; strategy `{s}` does not apply")))
            }
            (_, Some(Strategy::HeadSoftmax)) => {
                return Err(Error::Config(format!("head_softmax needs the fewshot_standard setting, not {}", self.setting)))
            }
            (_, Some(s)) => s,
            (_, None) if natural == Strategy::HeadSoftmax => {
                return Err(Error::Capability(format!(
                    "`{}` has no discriminator head for multiple-choice prompting",
                    bundle.model_id
                )))
            }
            (_, None) => natural,
        };
        if s != Strategy::HeadSoftmax {
            s.check(bundle, prompt)?;
        }
        self.objective.check(s)?;
        Ok(s)
    }

    fn trial_template(&self, strategy: Strategy) -> TrialConfig {
        TrialConfig {
            learning_rate: 0.0,
            batch_size: 1,
            max_steps: self.max_steps,
            eval_every: self.eval_every,
            objective: self.objective,
            strategy,
            shuffle: self.shuffle,
            optimizer: self.optimizer.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() && self.setting != Setting::ZeroShot {
            return Err(Error::Config("no seeds".into()));
        }
        let mut s = self.seeds.clone();
        s.sort_unstable();
        s.dedup();
        if s.len() != self.seeds.len() {
            return Err(Error::Config("duplicate seeds".into()));
        }
        if matches!(self.setting, Setting::FewshotPrompt | Setting::FewshotStandard) && self.k.is_none() {
            return Err(Error::Config(format!("{} needs K", self.setting)));
        }
        if self.k == Some(0) {
            return Err(Error::Config("K must be positive".into()));
        }
        if self.setting != Setting::ZeroShot {
            if self.grid.is_empty() {
                return Err(Error::Config("empty grid".into()));
            }
            for t in make_grid(&self.grid.learning_rates, &self.grid.batch_sizes, &self.trial_template(Strategy::DiscToken)) {
                TrialConfig { objective: Objective::Prompt, ..t }.validate()?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub seed: u64,
    pub eval_accuracy: Option<f64>,
    pub best: Option<TrialResult>,
    pub trials: Vec<TrialResult>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub task_id: String,
    pub model_id: String,
    pub template_id: String,
    pub setting: Setting,
    pub strategy: Option<Strategy>,
    pub k: Option<usize>,
    /// Seeds that produced an accuracy, aligned with `accuracies`.
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    /// `None` when no seed finished.
    pub mean: Option<f64>,
    pub std: Option<f64>,
    /// Always `sample` (n - 1 denominator; 0 for a single run).
    pub std_kind: String,
    /// Every requested seed finished.
    pub complete: bool,
    pub per_seed: Vec<SeedRecord>,
    pub config_hash: String,
    pub registry_version: String,
    pub config: ExperimentConfig,
}

/// Mean and sample standard deviation; `None` for no values.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    let n = values.len();
    if n == 0 {
        return None;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return Some((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Some((mean, var.sqrt()))
}

/// Loads the model and data named in `config` and runs the experiment.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunReport> {
    let registry = Registry::default_registry();
    let bundle = load_bundle(&config.model_id, &config.revision)?;
    let data = load_task(&config.task_id, &config.data_root)?;
    run_experiment_with(&bundle, &data, &registry, config)
}

/// [`run_experiment`] on an already loaded bundle and task.
pub fn run_experiment_with(
    bundle: &ModelBundle,
    data: &TaskData,
    registry: &Registry,
    config: &ExperimentConfig,
) -> Result<RunReport> {
    config.validate()?;
    let prompt = registry.get(config.template_id())?;
    if prompt.task_id() != data.spec.task_id {
        return Err(Error::Config(format!(
            "template `{}` is for task `{}`, not `{}`",
            prompt.id,
            prompt.task_id(),
            data.spec.task_id
        )));
    }
    let strategy = config.resolve_strategy(bundle, prompt)?;
    let mut per_seed = Vec::new();

    if config.setting == Setting::ZeroShot {
        let prepared = prepare_all(bundle, prompt, &data.eval, strategy)?;
        let acc = accuracy(bundle, prompt, &prepared, strategy)?;
        per_seed.push(SeedRecord {
            seed: 0,
            eval_accuracy: Some(acc),
            best: None,
            trials: Vec::new(),
            error: None,
        });
    } else {
        let shots = match (config.setting, config.k) {
            (Setting::FullShot, _) | (_, None) => Shots::Full,
            (_, Some(k)) => Shots::K(k),
        };
        let grid = make_grid(&config.grid.learning_rates, &config.grid.batch_sizes, &config.trial_template(strategy));
        for &seed in &config.seeds {
            let rec = sample_or_full(data, shots, seed)
                .and_then(|split| {
                    log::info!("seed {seed}: {} train / {} dev", split.train.len(), split.dev.len());
                    grid_search(bundle, &split, &data.eval, prompt, &grid)
                });
            per_seed.push(match rec {
                Ok(g) => SeedRecord {
                    seed,
                    eval_accuracy: g.best.eval_accuracy,
                    best: Some(g.best),
                    trials: g.trials,
                    error: None,
                },
                Err(e) => {
                    log::error!("seed {seed}: {e}");
                    SeedRecord {
                        seed,
                        eval_accuracy: None,
                        best: None,
                        trials: Vec::new(),
                        error: Some(e.to_string()),
                    }
                }
            });
        }
    }
    let (seeds, accuracies): (Vec<u64>, Vec<f64>) =
        per_seed.iter().filter_map(|r| r.eval_accuracy.map(|a| (r.seed, a))).unzip();
    let stats = mean_std(&accuracies);
    let report = RunReport {
        schema_version: SCHEMA_VERSION,
        task_id: data.spec.task_id.clone(),
        model_id: bundle.model_id.clone(),
        template_id: prompt.id.clone(),
        setting: config.setting,
        strategy: Some(strategy),
        k: if config.setting == Setting::ZeroShot { None } else { config.k },
        complete: per_seed.iter().all(|r| r.error.is_none()),
        seeds,
        accuracies,
        mean: stats.map(|s| s.0),
        std: stats.map(|s| s.1),
        std_kind: "sample".into(),
        per_seed,
        config_hash: config.hash(),
        registry_version: registry.version().to_string(),
        config: config.clone(),
    };
    if let Some(dir) = &config.out_dir {
        persist_report(&report, dir)?;
    }
    Ok(report)
}

fn file_stem(report: &RunReport) -> String {
    let model = report.model_id.replace(['/', '\\', ':'], "_");
    let k = report.k.map_or_else(|| "all".to_string(), |k| format!("k{k}"));
    format!("{}_{}_{}_{}_{}", report.task_id, model, report.setting, k, report.config_hash)
}

/// Writes `bytes` to `path` unless an identical file is there; a different
/// existing file is kept and the record goes to the next free `.<n>` name.
fn write_once(path: &Path, bytes: &[u8]) -> Result<PathBuf> {
    let mut candidate = path.to_path_buf();
    let mut n = 1;
    loop {
        match std::fs::read(&candidate) {
            Ok(existing) if existing == bytes => return Ok(candidate),
            Ok(_) => {
                let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("record");
                candidate = path.with_file_name(format!("{stem}.{n}.json"));
                n += 1;
            }
            Err(_) => {
                std::fs::write(&candidate, bytes).map_err(|e| Error::io(format!("writing {}", candidate.display()), e))?;
                return Ok(candidate);
            }
        }
    }
}

/// Writes the report and one record per trial under `dir`; returns the
/// report's path.
pub fn persist_report(report: &RunReport, dir: &Path) -> Result<PathBuf> {
    let trials = dir.join("trials");
    std::fs::create_dir_all(&trials).map_err(|e| Error::io(format!("creating {}", trials.display()), e))?;
    let stem = file_stem(report);
    for rec in &report.per_seed {
        for t in &rec.trials {
            let name = format!(
                "{stem}_seed{}_lr{:e}_bs{}.json",
                rec.seed, t.config.learning_rate, t.config.batch_size
            );
            write_once(&trials.join(name), &serde_json::to_vec_pretty(t)?)?;
        }
    }
    write_once(&dir.join(format!("{stem}.json")), &serde_json::to_vec_pretty(report)?)
}

pub fn read_report(path: &Path) -> Result<RunReport> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let r: RunReport = serde_json::from_slice(&bytes)?;
    if r.schema_version != SCHEMA_VERSION {
        return Err(Error::Data(format!(
            "{}: schema version {} (expected {SCHEMA_VERSION})",
            path.display(),
            r.schema_version
        )));
    }
    Ok(r)
}

/// One report per (setting, K). A failing cell yields an incomplete report
/// carrying the error instead of stopping the sweep.
pub fn k_sweep(
    bundle: &ModelBundle,
    data: &TaskData,
    registry: &Registry,
    base: &ExperimentConfig,
    settings: &[Setting],
    k_values: &[usize],
) -> Result<Vec<RunReport>> {
    if k_values.is_empty() {
        return Err(Error::Input("no K values".into()));
    }
    if let Some(w) = k_values.windows(2).find(|w| w[0] >= w[1]) {
        return Err(Error::Input(if w[0] == w[1] {
            format!("duplicate K value {}", w[0])
        } else {
            format!("K values must be ascending ({} before {})", w[0], w[1])
        }));
    }
    let mut out = Vec::new();
    for &setting in settings {
        for &k in k_values {
            let cfg = ExperimentConfig {
                setting,
                k: Some(k),
                ..base.clone()
            };
            out.push(match run_experiment_with(bundle, data, registry, &cfg) {
                Ok(r) => r,
                Err(e) => {
                    log::error!("{setting} K={k}: {e}");
                    failed_report(bundle, data, registry, &cfg, e)
                }
            });
        }
    }
    Ok(out)
}

fn failed_report(bundle: &ModelBundle, data: &TaskData, registry: &Registry, cfg: &ExperimentConfig, e: Error) -> RunReport {
    RunReport {
        schema_version: SCHEMA_VERSION,
        task_id: data.spec.task_id.clone(),
        model_id: bundle.model_id.clone(),
        template_id: cfg.template_id().to_string(),
        setting: cfg.setting,
        strategy: cfg.strategy,
        k: cfg.k,
        seeds: Vec::new(),
        accuracies: Vec::new(),
        mean: None,
        std: None,
        std_kind: "sample".into(),
        complete: false,
        per_seed: vec![SeedRecord {
            seed: 0,
            eval_accuracy: None,
            best: None,
            trials: Vec::new(),
            error: Some(e.to_string()),
        }],
        config_hash: cfg.hash(),
        registry_version: registry.version().to_string(),
        config: cfg.clone(),
    }
}
