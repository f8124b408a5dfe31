//! Option scoring: restricted masked-word softmax, discriminator scores on
//! single tokens, the three multi-token aggregators, and a fresh-head
//! classifier for standard fine-tuning.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::backend::{sigmoid, ModelBundle};
use crate::data::Example;
use crate::error::{Error, Result};
use crate::prompting::{
    render_mlm, render_option, render_plain, Prompt, RenderInput, RenderedPrompt, Template, TemplateMode, Verbalizer,
};

/// Longest rendering fed to any model.
pub const MAX_SEQ_LEN: usize = 256;

/// Renderings per forward pass in batched evaluation.
pub const EVAL_BATCH: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "mlm_softmax")]
    MlmSoftmax,
    #[serde(rename = "disc_token")]
    DiscToken,
    #[serde(rename = "disc_rep_avg")]
    RepAvg,
    #[serde(rename = "disc_prob_avg")]
    ProbAvg,
    #[serde(rename = "disc_cls")]
    Cls,
    /// Softmax over a freshly allocated head on `[CLS]` (standard fine-tuning).
    #[serde(rename = "head_softmax")]
    HeadSoftmax,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::MlmSoftmax,
        Strategy::DiscToken,
        Strategy::RepAvg,
        Strategy::ProbAvg,
        Strategy::Cls,
        Strategy::HeadSoftmax,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::MlmSoftmax => "mlm_softmax",
            Strategy::DiscToken => "disc_token",
            Strategy::RepAvg => "disc_rep_avg",
            Strategy::ProbAvg => "disc_prob_avg",
            Strategy::Cls => "disc_cls",
            Strategy::HeadSoftmax => "head_softmax",
        }
    }

    pub fn is_discriminative(self) -> bool {
        matches!(self, Strategy::DiscToken | Strategy::RepAvg | Strategy::ProbAvg | Strategy::Cls)
    }

    /// Scores of one example sum to one.
    pub fn is_normalized(self) -> bool {
        matches!(self, Strategy::MlmSoftmax | Strategy::HeadSoftmax)
    }

    /// The natural choice for a bundle: discriminative when available.
    pub fn default_for(bundle: &ModelBundle, prompt: &Prompt) -> Strategy {
        match (bundle.capabilities.discriminative, prompt.is_multiple_choice()) {
            (true, false) => Strategy::DiscToken,
            (true, true) => Strategy::RepAvg,
            (false, false) => Strategy::MlmSoftmax,
            (false, true) => Strategy::HeadSoftmax,
        }
    }

    /// Checks the bundle and template can run this strategy.
    pub fn check(self, bundle: &ModelBundle, prompt: &Prompt) -> Result<()> {
        match self {
            Strategy::MlmSoftmax => {
                bundle.require_vocab_head()?;
                if prompt.template.mode != TemplateMode::SingleToken {
                    return Err(Error::Mode(format!(
                        "`{}` is a multiple-choice template; mlm_softmax needs single-token label words",
                        prompt.id
                    )));
                }
            }
            Strategy::HeadSoftmax => {
                let head = bundle.require_task_head()?;
                let want = prompt.verbalizer.label_space().map_or(1, <[String]>::len);
                if head.outputs != want {
                    return Err(Error::Capability(format!(
                        "task head has {} outputs, `{}` needs {want}",
                        head.outputs, prompt.id
                    )));
                }
            }
            _ => {
                bundle.require_disc_head()?;
            }
        }
        Ok(())
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "mlm_softmax" | "mlm" => Strategy::MlmSoftmax,
            "disc_token" | "disc" => Strategy::DiscToken,
            "disc_rep_avg" | "rep_avg" => Strategy::RepAvg,
            "disc_prob_avg" | "prob_avg" => Strategy::ProbAvg,
            "disc_cls" | "cls" => Strategy::Cls,
            "head_softmax" | "head" | "standard" => Strategy::HeadSoftmax,
            other => {
                return Err(Error::Input(format!(
                    "unknown strategy `{other}` (expected one of mlm_softmax, disc_token, rep_avg, prob_avg, cls, head_softmax)"
                )))
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptionScore {
    pub label: String,
    pub score: f64,
    pub strategy: Strategy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub example_id: String,
    pub gold: Option<String>,
    /// In verbalizer label order (or option order).
    pub scores: Vec<OptionScore>,
    pub predicted: String,
}

impl Prediction {
    fn new(example_id: String, gold: Option<String>, labels: Vec<String>, values: Vec<f64>, strategy: Strategy) -> Self {
        let best = argmax_first(&values);
        let predicted = labels[best].clone();
        let scores = labels
            .into_iter()
            .zip(values)
            .map(|(label, score)| OptionScore { label, score, strategy })
            .collect();
        Self {
            example_id,
            gold,
            scores,
            predicted,
        }
    }

    pub fn is_correct(&self) -> bool {
        self.gold.as_deref() == Some(self.predicted.as_str())
    }

    pub fn values(&self) -> Vec<f64> {
        self.scores.iter().map(|s| s.score).collect()
    }

    pub fn strategy(&self) -> Option<Strategy> {
        self.scores.first().map(|s| s.strategy)
    }
}

/// Index of the largest value; ties go to the earliest. NaN never wins.
pub fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] || (values[best].is_nan() && !v.is_nan()) {
            best = i;
        }
    }
    best
}

/// Softmax restricted to the given label-word logits.
pub fn restricted_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Renderings of one example under one strategy, with its candidate labels.
#[derive(Clone, Debug)]
pub struct PreparedExample {
    pub example_id: String,
    pub labels: Vec<String>,
    pub gold: Option<usize>,
    /// One rendering for `mlm_softmax` and single-token `head_softmax`, one
    /// per candidate otherwise.
    pub renderings: Vec<RenderedPrompt>,
}

impl PreparedExample {
    pub fn gold_label(&self) -> Option<&str> {
        self.gold.map(|g| self.labels[g].as_str())
    }
}

pub fn max_len(bundle: &ModelBundle) -> usize {
    bundle.max_length().min(MAX_SEQ_LEN)
}

/// Renders `example` for `strategy`. The gold label, when present, must be in
/// the label space.
pub fn prepare(bundle: &ModelBundle, prompt: &Prompt, example: &Example, strategy: Strategy) -> Result<PreparedExample> {
    let tok = bundle.tokenizer.as_ref();
    let len = max_len(bundle);
    let options = example.options.as_deref();
    let candidates = prompt.verbalizer.candidates(options)?;
    let labels: Vec<String> = candidates.iter().map(|(l, _)| l.clone()).collect();
    let gold = match &example.label {
        Some(l) => {
            let i = prompt.verbalizer.label_index(l)?;
            if i >= labels.len() {
                return Err(Error::Data(format!(
                    "example `{}`: gold option {i} but only {} options",
                    example.id,
                    labels.len()
                )));
            }
            Some(i)
        }
        None => None,
    };
    let input = RenderInput {
        fields: &example.fields,
        options,
    };
    let renderings = match strategy {
        Strategy::MlmSoftmax => vec![render_mlm(tok, &prompt.template, input, len)?],
        Strategy::HeadSoftmax if !prompt.is_multiple_choice() => {
            vec![render_plain(tok, &prompt.fields, &example.fields, len)?]
        }
        _ => candidates
            .iter()
            .map(|(_, text)| render_option(tok, &prompt.template, input, text, len))
            .collect::<Result<_>>()?,
    };
    Ok(PreparedExample {
        example_id: example.id.clone(),
        labels,
        gold,
        renderings,
    })
}

/// Token ids of the label words, read off discriminative renderings so they
/// match the tokenization in context.
pub fn label_word_ids(bundle: &ModelBundle, prompt: &Prompt) -> Result<Vec<u32>> {
    let tok = bundle.tokenizer.as_ref();
    let Verbalizer::Words { .. } = &prompt.verbalizer else {
        return Err(Error::Mode(format!("`{}` has no label words", prompt.id)));
    };
    let fields: BTreeMap<String, String> = prompt
        .template
        .field_names()
        .into_iter()
        .map(|f| (f.to_string(), "it".to_string()))
        .collect();
    prompt
        .verbalizer
        .label_space()
        .unwrap_or_default()
        .iter()
        .map(|label| {
            let r = crate::prompting::render_discriminative(
                tok,
                &prompt.template,
                &prompt.verbalizer,
                RenderInput::fields(&fields),
                label,
                usize::MAX,
            )?;
            Ok(r.option_tokens()[0])
        })
        .collect()
}

/// Per-rendering outputs of one forward pass, all `f64`.
pub(crate) struct Outputs {
    /// Decision logits: label-word logits (mlm, one row per rendering, so
    /// `[R, |Y|]`), discriminator logits `[R]`, or task-head logits `[R, k]`.
    pub logits: Tensor,
    /// `[R]` discriminator scores for the discriminative strategies.
    pub scores: Option<Tensor>,
}

/// Runs the model on `renderings` and applies `strategy`'s read-out.
pub(crate) fn forward(
    bundle: &ModelBundle,
    strategy: Strategy,
    renderings: &[&RenderedPrompt],
    word_ids: &[u32],
    track: bool,
) -> Result<Outputs> {
    if renderings.is_empty() {
        return Err(Error::Input("no renderings to score".into()));
    }
    let seqs: Vec<Vec<u32>> = renderings.iter().map(|r| r.token_ids.clone()).collect();
    let hidden = bundle.hidden_states(seqs, track)?;
    let (r, t, h) = hidden.dims3()?;
    let flat = hidden.reshape((r * t, h))?;
    let dev = flat.device().clone();
    let params = bundle.view(track);
    let rows_at = |idx: Vec<u32>| -> Result<Tensor> { Ok(flat.index_select(&Tensor::new(idx, &dev)?, 0)?) };
    let f64_ = |x: Tensor| -> Result<Tensor> { Ok(x.to_dtype(DType::F64)?) };

    match strategy {
        Strategy::MlmSoftmax => {
            let head = bundle.require_vocab_head()?;
            let idx = renderings
                .iter()
                .enumerate()
                .map(|(i, rp)| {
                    rp.mask_position
                        .map(|m| (i * t + m) as u32)
                        .ok_or_else(|| Error::Render("masked-LM scoring needs a mask position".into()))
                })
                .collect::<Result<Vec<_>>>()?;
            let logits = head.logits_for(params, &rows_at(idx)?, word_ids)?;
            Ok(Outputs {
                logits: f64_(logits)?,
                scores: None,
            })
        }
        Strategy::HeadSoftmax => {
            let head = bundle.require_task_head()?;
            let idx = (0..r).map(|i| (i * t + renderings[i].cls_position) as u32).collect();
            let logits = head.logits(params, &rows_at(idx)?)?;
            Ok(Outputs {
                logits: f64_(logits)?,
                scores: None,
            })
        }
        Strategy::Cls => {
            let head = bundle.require_disc_head()?;
            let idx = (0..r).map(|i| (i * t + renderings[i].cls_position) as u32).collect();
            let logits = f64_(head.logits(params, &rows_at(idx)?)?)?;
            let scores = sigmoid(&logits)?;
            Ok(Outputs {
                logits,
                scores: Some(scores),
            })
        }
        Strategy::DiscToken | Strategy::RepAvg | Strategy::ProbAvg => {
            let head = bundle.require_disc_head()?;
            let mut idx = Vec::new();
            let mut spans = Vec::with_capacity(r);
            for (i, rp) in renderings.iter().enumerate() {
                let span = rp
                    .option_span
                    .clone()
                    .filter(|s| !s.is_empty())
                    .ok_or_else(|| Error::Render("rendering has no option span".into()))?;
                spans.push(idx.len()..idx.len() + span.len());
                idx.extend(span.map(|p| (i * t + p) as u32));
            }
            let n = idx.len();
            let all_single = n == r;
            let selected = rows_at(idx)?;
            // Row i averages its own span: [R, N].
            let mut avg = vec![0f64; r * n];
            for (i, s) in spans.iter().enumerate() {
                let w = 1.0 / s.len() as f64;
                for j in s.clone() {
                    avg[i * n + j] = w;
                }
            }
            let avg = Tensor::from_vec(avg, (r, n), &dev)?;
            if strategy == Strategy::RepAvg {
                let pooled = if all_single {
                    selected
                } else {
                    avg.to_dtype(selected.dtype())?.matmul(&selected)?
                };
                let logits = f64_(head.logits(params, &pooled)?)?;
                let scores = sigmoid(&logits)?;
                return Ok(Outputs {
                    logits,
                    scores: Some(scores),
                });
            }
            let tok_logits = f64_(head.logits(params, &selected)?)?;
            if all_single {
                let scores = sigmoid(&tok_logits)?;
                return Ok(Outputs {
                    logits: tok_logits,
                    scores: Some(scores),
                });
            }
            let scores = avg.matmul(&sigmoid(&tok_logits)?.unsqueeze(1)?)?.squeeze(1)?;
            let c = clamp_prob(&scores)?;
            let logits = (c.log()? - (c.neg()? + 1.0)?.log()?)?;
            Ok(Outputs {
                logits,
                scores: Some(scores),
            })
        }
    }
}

/// H clamped to `[1e-7, 1 - 1e-7]` before taking logs.
pub(crate) const PROB_FLOOR: f64 = 1e-7;

pub(crate) fn clamp_prob(x: &Tensor) -> Result<Tensor> {
    Ok(x.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)?)
}

/// Scores for a set of prepared examples, chunked into forward passes of at
/// most `batch` renderings. Results are in input order.
pub fn score_prepared(
    bundle: &ModelBundle,
    prompt: &Prompt,
    prepared: &[PreparedExample],
    strategy: Strategy,
    batch: usize,
) -> Result<Vec<Vec<f64>>> {
    strategy.check(bundle, prompt)?;
    let word_ids = if strategy == Strategy::MlmSoftmax {
        label_word_ids(bundle, prompt)?
    } else {
        Vec::new()
    };
    let batch = batch.max(1);
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(prepared.len());
    let mut start = 0;
    while start < prepared.len() {
        // Whole examples per chunk; an example larger than `batch` goes alone.
        let mut end = start;
        let mut count = 0;
        while end < prepared.len() && (end == start || count + prepared[end].renderings.len() <= batch) {
            count += prepared[end].renderings.len();
            end += 1;
        }
        let chunk = &prepared[start..end];
        let refs: Vec<&RenderedPrompt> = chunk.iter().flat_map(|p| p.renderings.iter()).collect();
        let o = forward(bundle, strategy, &refs, &word_ids, false)?;
        let mut row = 0;
        for p in chunk {
            let k = p.renderings.len();
            let values = match strategy {
                Strategy::MlmSoftmax => restricted_softmax(&o.logits.get(row)?.to_vec1::<f64>()?),
                Strategy::HeadSoftmax if k == 1 => restricted_softmax(&o.logits.get(row)?.to_vec1::<f64>()?),
                Strategy::HeadSoftmax => {
                    let l: Vec<f64> = o.logits.narrow(0, row, k)?.flatten_all()?.to_vec1()?;
                    restricted_softmax(&l)
                }
                _ => o
                    .scores
                    .as_ref()
                    .expect("discriminative outputs carry scores")
                    .narrow(0, row, k)?
                    .to_vec1()?,
            };
            out.push(values);
            row += k;
        }
        start = end;
    }
    Ok(out)
}

fn predict_one(bundle: &ModelBundle, prompt: &Prompt, example: &Example, strategy: Strategy) -> Result<Prediction> {
    let p = prepare(bundle, prompt, example, strategy)?;
    let values = score_prepared(bundle, prompt, std::slice::from_ref(&p), strategy, usize::MAX)?.remove(0);
    Ok(Prediction::new(p.example_id.clone(), p.gold_label().map(str::to_string), p.labels, values, strategy))
}

fn ad_hoc_prompt(template: &Template, verbalizer: &Verbalizer, fields: &BTreeMap<String, String>) -> Prompt {
    Prompt {
        id: template.task_id.clone(),
        template: template.clone(),
        verbalizer: verbalizer.clone(),
        fields: fields.keys().cloned().collect(),
    }
}

fn ad_hoc_example(fields: &BTreeMap<String, String>, options: Option<Vec<String>>) -> Example {
    Example {
        id: String::new(),
        fields: fields.clone(),
        options,
        label: None,
    }
}

/// Zero-shot masked-word prediction: one forward pass, softmax over the label
/// words' logits at the mask.
pub fn score_mlm(
    bundle: &ModelBundle,
    template: &Template,
    verbalizer: &Verbalizer,
    fields: &BTreeMap<String, String>,
) -> Result<Prediction> {
    bundle.require_vocab_head()?;
    let prompt = ad_hoc_prompt(template, verbalizer, fields);
    predict_one(bundle, &prompt, &ad_hoc_example(fields, None), Strategy::MlmSoftmax)
}

/// One rendering per label; each label scores P(original) of its word.
pub fn score_discriminative(
    bundle: &ModelBundle,
    template: &Template,
    verbalizer: &Verbalizer,
    fields: &BTreeMap<String, String>,
) -> Result<Prediction> {
    bundle.require_disc_head()?;
    let prompt = ad_hoc_prompt(template, verbalizer, fields);
    predict_one(bundle, &prompt, &ad_hoc_example(fields, None), Strategy::DiscToken)
}

/// One rendering per option, aggregated by `strategy` (rep_avg, prob_avg or cls).
pub fn score_multitoken(
    bundle: &ModelBundle,
    template: &Template,
    fields: &BTreeMap<String, String>,
    options: &[String],
    strategy: Strategy,
) -> Result<Prediction> {
    if !matches!(strategy, Strategy::RepAvg | Strategy::ProbAvg | Strategy::Cls) {
        return Err(Error::Input(format!("`{strategy}` is not a multi-token aggregation strategy")));
    }
    if options.is_empty() {
        return Err(Error::Input("empty option list".into()));
    }
    bundle.require_disc_head()?;
    let prompt = ad_hoc_prompt(template, &Verbalizer::Identity, fields);
    predict_one(bundle, &prompt, &ad_hoc_example(fields, Some(options.to_vec())), strategy)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchResult {
    pub predictions: Vec<Prediction>,
    pub accuracy: f64,
}

/// Scores every example and reports accuracy against the gold labels.
pub fn predict_batch(bundle: &ModelBundle, prompt: &Prompt, examples: &[Example], strategy: Strategy) -> Result<BatchResult> {
    predict_batch_with(bundle, prompt, examples, strategy, EVAL_BATCH)
}

/// [`predict_batch`] with an explicit number of renderings per forward pass.
pub fn predict_batch_with(
    bundle: &ModelBundle,
    prompt: &Prompt,
    examples: &[Example],
    strategy: Strategy,
    batch: usize,
) -> Result<BatchResult> {
    strategy.check(bundle, prompt)?;
    if let Some(e) = examples.iter().find(|e| e.label.is_none()) {
        return Err(Error::Data(format!("example `{}` has no gold label", e.id)));
    }
    let prepared = examples
        .iter()
        .map(|e| prepare(bundle, prompt, e, strategy))
        .collect::<Result<Vec<_>>>()?;
    let values = score_prepared(bundle, prompt, &prepared, strategy, batch)?;
    let predictions: Vec<Prediction> = prepared
        .into_iter()
        .zip(values)
        .map(|(p, v)| Prediction::new(p.example_id.clone(), p.gold_label().map(str::to_string), p.labels, v, strategy))
        .collect();
    let correct = predictions.iter().filter(|p| p.is_correct()).count();
    let accuracy = if predictions.is_empty() {
        0.0
    } else {
        correct as f64 / predictions.len() as f64
    };
    Ok(BatchResult { predictions, accuracy })
}

/// One line of a predictions export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub example_id: String,
    pub gold: Option<String>,
    pub predicted: String,
    pub labels: Vec<String>,
    pub scores: Vec<f64>,
    pub strategy: Strategy,
}

impl From<&Prediction> for PredictionRecord {
    fn from(p: &Prediction) -> Self {
        Self {
            example_id: p.example_id.clone(),
            gold: p.gold.clone(),
            predicted: p.predicted.clone(),
            labels: p.scores.iter().map(|s| s.label.clone()).collect(),
            scores: p.values(),
            strategy: p.strategy().unwrap_or(Strategy::DiscToken),
        }
    }
}

pub fn write_predictions_jsonl(predictions: &[Prediction], mut w: impl Write) -> Result<()> {
    for p in predictions {
        serde_json::to_writer(&mut w, &PredictionRecord::from(p))?;
        w.write_all(b"\n").map_err(|e| Error::io("writing predictions", e))?;
    }
    Ok(())
}
