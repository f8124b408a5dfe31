//! Training losses. Every bundle-level loss returns both a differentiable
//! scalar and its per-prompt decomposition.
//!
//! Reduction: each example contributes the sum of its prompt terms; a batch
//! averages over the distinct examples it touches.

use std::collections::BTreeMap;
use std::str::FromStr;

use candle_core::{DType, Tensor, D};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{sigmoid, ModelBundle, TokenBatch};
use crate::error::{Error, Result};
use crate::prompting::{Prompt, RenderedPrompt};
use crate::scoring::{clamp_prob, forward, label_word_ids, PreparedExample, Strategy, PROB_FLOOR};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    /// `sum(per_prompt_terms) / examples`.
    pub value: f64,
    pub per_prompt_terms: Vec<(String, f64)>,
    pub examples: usize,
}

impl LossValue {
    fn from_terms(per_prompt_terms: Vec<(String, f64)>, examples: usize) -> Self {
        let total: f64 = per_prompt_terms.iter().map(|(_, t)| t).sum();
        Self {
            value: total / examples.max(1) as f64,
            per_prompt_terms,
            examples,
        }
    }
}

/// A loss ready for backpropagation.
#[derive(Clone, Debug)]
pub struct Loss {
    /// Scalar `f64` tensor.
    pub tensor: Tensor,
    pub value: LossValue,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Binary original/replaced terms for discriminative strategies,
    /// cross-entropy for `mlm_softmax` and `head_softmax`.
    Prompt,
    /// Softmax over an example's discriminator logits; whole groups only.
    Contrastive,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::Prompt => "prompt",
            Objective::Contrastive => "contrastive",
        }
    }

    /// Whether the unit of batching is a single rendering (true) or all
    /// renderings of one example.
    pub fn per_rendering(self, strategy: Strategy) -> bool {
        self == Objective::Prompt && strategy.is_discriminative()
    }

    pub fn check(self, strategy: Strategy) -> Result<()> {
        if self == Objective::Contrastive && !strategy.is_discriminative() {
            return Err(Error::Input(format!(
                "the contrastive objective needs a discriminative strategy, not `{strategy}`"
            )));
        }
        Ok(())
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prompt" | "disc" | "mlm" | "default" => Ok(Objective::Prompt),
            "contrastive" => Ok(Objective::Contrastive),
            other => Err(Error::Input(format!("unknown objective `{other}` (prompt, contrastive)"))),
        }
    }
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn check_gold(gold: usize, n: usize) -> Result<()> {
    if gold >= n {
        return Err(Error::Data(format!("gold index {gold} outside {n} candidates")));
    }
    Ok(())
}

fn clamp(p: f64) -> f64 {
    p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

/// `-log softmax(logits)[gold]` over the label words.
pub fn mlm_prompt_terms(labels: &[String], logits: &[f64], gold: usize) -> Result<LossValue> {
    check_gold(gold, logits.len())?;
    let lp = log_softmax(logits);
    Ok(LossValue::from_terms(vec![(labels[gold].clone(), -lp[gold])], 1))
}

/// `-log H(gold) - sum_{k != gold} log(1 - H(k))`, one term per prompt.
pub fn disc_prompt_terms(labels: &[String], scores: &[f64], gold: usize) -> Result<LossValue> {
    check_gold(gold, scores.len())?;
    let terms = scores
        .iter()
        .enumerate()
        .map(|(k, &s)| {
            let t = if k == gold { -clamp(s).ln() } else { -(1.0 - clamp(s)).ln() };
            (labels[k].clone(), t)
        })
        .collect();
    Ok(LossValue::from_terms(terms, 1))
}

/// Cross-entropy of the gold option over the discriminator logits.
pub fn contrastive_terms(labels: &[String], logits: &[f64], gold: usize) -> Result<LossValue> {
    check_gold(gold, logits.len())?;
    let lp = log_softmax(logits);
    Ok(LossValue::from_terms(vec![(labels[gold].clone(), -lp[gold])], 1))
}

/// The replaced-token-detection term: `-sum_i [orig_i log H_i + repl_i log(1 - H_i)]`.
pub fn pretrain_disc_term(scores: &[f64], replaced: &[bool]) -> f64 {
    scores
        .iter()
        .zip(replaced)
        .map(|(&s, &r)| if r { -(1.0 - clamp(s)).ln() } else { -clamp(s).ln() })
        .sum()
}

/// Which renderings of which example a batch contains.
#[derive(Clone, Copy, Debug)]
pub struct Unit<'a> {
    pub example: &'a PreparedExample,
    /// `None` for all renderings of the example.
    pub rendering: Option<usize>,
}

impl<'a> Unit<'a> {
    pub fn whole(example: &'a PreparedExample) -> Self {
        Self { example, rendering: None }
    }
}

/// Loss of one batch of units under `objective` and `strategy`.
pub fn batch_loss(
    bundle: &ModelBundle,
    prompt: &Prompt,
    strategy: Strategy,
    objective: Objective,
    units: &[Unit<'_>],
) -> Result<Loss> {
    objective.check(strategy)?;
    strategy.check(bundle, prompt)?;
    if units.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let mut renderings: Vec<&RenderedPrompt> = Vec::new();
    // (example, first row, rows taken, rendering index of the first row)
    let mut groups: Vec<(&PreparedExample, usize, usize, usize)> = Vec::new();
    for u in units {
        let ex = u.example;
        let gold = ex
            .gold
            .ok_or_else(|| Error::Data(format!("example `{}` has no gold label", ex.example_id)))?;
        check_gold(gold, ex.labels.len())?;
        match u.rendering {
            Some(i) => {
                let r = ex.renderings.get(i).ok_or_else(|| {
                    Error::Input(format!("example `{}` has no rendering {i}", ex.example_id))
                })?;
                groups.push((ex, renderings.len(), 1, i));
                renderings.push(r);
            }
            None => {
                groups.push((ex, renderings.len(), ex.renderings.len(), 0));
                renderings.extend(ex.renderings.iter());
            }
        }
    }
    if !objective.per_rendering(strategy) && groups.iter().any(|g| g.2 != g.0.renderings.len()) {
        return Err(Error::Grouping(format!(
            "`{}` with `{strategy}` needs all renderings of an example in the same batch",
            objective.name()
        )));
    }
    let examples = {
        let mut ids: Vec<&str> = groups.iter().map(|g| g.0.example_id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    };
    let word_ids = if strategy == Strategy::MlmSoftmax {
        label_word_ids(bundle, prompt)?
    } else {
        Vec::new()
    };
    let out = forward(bundle, strategy, &renderings, &word_ids, true)?;
    let dev = out.logits.device().clone();

    let mut pieces: Vec<Tensor> = Vec::new();
    let mut labels: Vec<String> = Vec::new();
    if objective.per_rendering(strategy) {
        let scores = clamp_prob(out.scores.as_ref().expect("discriminative outputs carry scores"))?;
        let mut target = Vec::with_capacity(renderings.len());
        for &(ex, _, n, first) in &groups {
            let gold = ex.gold.expect("checked above");
            for k in first..first + n {
                target.push(if k == gold { 1f64 } else { 0f64 });
                labels.push(ex.labels[k].clone());
            }
        }
        let t = Tensor::new(target, &dev)?;
        let pos = (t.clone() * scores.log()?)?;
        let neg = ((t.neg()? + 1.0)? * (scores.neg()? + 1.0)?.log()?)?;
        pieces.push((pos + neg)?.neg()?);
    } else {
        for &(ex, row, n, _) in &groups {
            let gold = ex.gold.expect("checked above");
            // Logits over this example's candidates.
            let logits = match strategy {
                Strategy::MlmSoftmax => out.logits.get(row)?,
                Strategy::HeadSoftmax if n == 1 && ex.labels.len() > 1 => out.logits.get(row)?,
                Strategy::HeadSoftmax => out.logits.narrow(0, row, n)?.flatten_all()?,
                _ if objective == Objective::Contrastive => out.logits.narrow(0, row, n)?,
                _ => unreachable!("discriminative prompt loss is per rendering"),
            };
            let lp = candle_nn::ops::log_softmax(&logits, D::Minus1)?;
            pieces.push(lp.get(gold)?.neg()?.unsqueeze(0)?);
            labels.push(ex.labels[gold].clone());
        }
    }
    let terms = Tensor::cat(&pieces, 0)?;
    let tensor = (terms.sum_all()? / examples as f64)?;
    let values: Vec<f64> = terms.to_dtype(DType::F64)?.to_vec1()?;
    Ok(Loss {
        tensor,
        value: LossValue::from_terms(labels.into_iter().zip(values).collect(), examples),
    })
}

fn whole(bundle: &ModelBundle, prompt: &Prompt, ex: &PreparedExample, strategy: Strategy, objective: Objective) -> Result<Loss> {
    batch_loss(bundle, prompt, strategy, objective, &[Unit::whole(ex)])
}

/// Cross-entropy of the gold label word over the label words at the mask.
pub fn loss_mlm_prompt(bundle: &ModelBundle, prompt: &Prompt, ex: &PreparedExample) -> Result<Loss> {
    whole(bundle, prompt, ex, Strategy::MlmSoftmax, Objective::Prompt)
}

/// Binary original/replaced terms over the |Y| single-token renderings.
pub fn loss_disc_prompt(bundle: &ModelBundle, prompt: &Prompt, ex: &PreparedExample) -> Result<Loss> {
    whole(bundle, prompt, ex, Strategy::DiscToken, Objective::Prompt)
}

/// Cross-entropy over the discriminator logits of an example's renderings.
pub fn loss_contrastive(bundle: &ModelBundle, prompt: &Prompt, ex: &PreparedExample, strategy: Strategy) -> Result<Loss> {
    whole(bundle, prompt, ex, strategy, Objective::Contrastive)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    /// New projection on `[CLS]` (the bundle's task head).
    FreshLinear,
    /// Discriminator head on each option rendering's `[CLS]`.
    ReuseDisc,
}

/// Standard-fine-tuning loss on the `[CLS]` row.
pub fn loss_cls_head(bundle: &ModelBundle, prompt: &Prompt, ex: &PreparedExample, mode: HeadMode) -> Result<Loss> {
    match mode {
        HeadMode::FreshLinear => whole(bundle, prompt, ex, Strategy::HeadSoftmax, Objective::Prompt),
        HeadMode::ReuseDisc => whole(bundle, prompt, ex, Strategy::Cls, Objective::Prompt),
    }
}

/// Binary terms over aggregated option scores (rep_avg, prob_avg or cls).
pub fn loss_multitoken(bundle: &ModelBundle, prompt: &Prompt, ex: &PreparedExample, strategy: Strategy) -> Result<Loss> {
    if !matches!(strategy, Strategy::RepAvg | Strategy::ProbAvg | Strategy::Cls) {
        return Err(Error::Input(format!("`{strategy}` is not a multi-token aggregation strategy")));
    }
    if ex.labels.len() < 2 {
        return Err(Error::Input("multi-token loss needs at least two options".into()));
    }
    whole(bundle, prompt, ex, strategy, Objective::Prompt)
}

/// Original and generator-corrupted sequences.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PretrainBatch {
    pub original_ids: Vec<Vec<u32>>,
    pub corrupted_ids: Vec<Vec<u32>>,
    /// `corrupted_ids[i][j] != original_ids[i][j]`.
    pub replaced_mask: Vec<Vec<bool>>,
    /// Positions the generator had to fill.
    pub masked_positions: Vec<Vec<usize>>,
}

impl PretrainBatch {
    /// Builds a batch from explicit corruptions; the replaced mask is derived.
    pub fn new(original_ids: Vec<Vec<u32>>, corrupted_ids: Vec<Vec<u32>>, masked_positions: Vec<Vec<usize>>) -> Result<Self> {
        if original_ids.len() != corrupted_ids.len() || original_ids.len() != masked_positions.len() {
            return Err(Error::Input("pretraining batch parts differ in length".into()));
        }
        let mut replaced_mask = Vec::with_capacity(original_ids.len());
        for ((o, c), m) in original_ids.iter().zip(&corrupted_ids).zip(&masked_positions) {
            if o.len() != c.len() || m.iter().any(|&p| p >= o.len()) {
                return Err(Error::Input("corrupted sequence does not align with its original".into()));
            }
            replaced_mask.push(o.iter().zip(c).map(|(a, b)| a != b).collect());
        }
        Ok(Self {
            original_ids,
            corrupted_ids,
            replaced_mask,
            masked_positions,
        })
    }

    pub fn masked_count(&self) -> usize {
        self.masked_positions.iter().map(Vec::len).sum()
    }
}

/// Masks each non-special position with probability `mask_prob` and fills the
/// masks with samples from the bundle's generator.
pub fn corrupt_with_generator<R: Rng>(
    bundle: &ModelBundle,
    originals: &[Vec<u32>],
    mask_prob: f64,
    rng: &mut R,
) -> Result<PretrainBatch> {
    let gen = bundle
        .generator
        .as_ref()
        .ok_or_else(|| Error::Capability(format!("`{}` has no generator", bundle.model_id)))?;
    let tok = bundle.tokenizer.as_ref();
    let mask_id = tok.special_ids().mask;
    let mut masked_positions = Vec::with_capacity(originals.len());
    let mut masked_inputs = Vec::with_capacity(originals.len());
    for seq in originals {
        let pos: Vec<usize> = (0..seq.len())
            .filter(|&j| !tok.is_special(seq[j]) && rng.random::<f64>() < mask_prob)
            .collect();
        let mut m = seq.clone();
        for &p in &pos {
            m[p] = mask_id;
        }
        masked_positions.push(pos);
        masked_inputs.push(m);
    }
    let mut corrupted = originals.to_vec();
    if masked_positions.iter().any(|p| !p.is_empty()) {
        let hidden = gen.encoder.forward(bundle.view(false), &TokenBatch::new(masked_inputs, gen.encoder.pad_token_id)?)?;
        let t = hidden.dim(1)?;
        let h = hidden.dim(2)?;
        let flat = hidden.reshape(((), h))?;
        let idx: Vec<u32> = masked_positions
            .iter()
            .enumerate()
            .flat_map(|(i, ps)| ps.iter().map(move |&p| (i * t + p) as u32))
            .collect();
        let rows = flat.index_select(&Tensor::new(idx, flat.device())?, 0)?;
        let probs: Vec<Vec<f64>> = candle_nn::ops::softmax(&gen.head.logits(bundle.view(false), &rows)?, D::Minus1)?
            .to_dtype(DType::F64)?
            .to_vec2()?;
        let mut k = 0;
        for (i, ps) in masked_positions.iter().enumerate() {
            for &p in ps {
                let dist = rand::distr::weighted::WeightedIndex::new(&probs[k])
                    .map_err(|e| Error::Input(format!("generator distribution: {e}")))?;
                corrupted[i][p] = rng.sample(dist) as u32;
                k += 1;
            }
        }
    }
    PretrainBatch::new(originals.to_vec(), corrupted, masked_positions)
}

/// Weight of the discriminator term in the toy pretraining mix.
pub const DEFAULT_DISC_WEIGHT: f64 = 50.0;

/// Parts of the toy pretraining loss.
#[derive(Clone, Debug)]
pub struct PretrainLoss {
    /// `generator + lambda * discriminator`.
    pub total: Tensor,
    /// Mean cross-entropy of the generator on masked positions.
    pub generator: f64,
    /// Replaced-token-detection sum over all positions of the batch.
    pub discriminator: f64,
}

/// Generator masked-word cross-entropy plus `lambda` times the discriminator's
/// replaced-token-detection loss on the corrupted sequences.
pub fn loss_pretrain_toy(bundle: &ModelBundle, batch: &PretrainBatch, lambda: f64) -> Result<PretrainLoss> {
    let gen = bundle
        .generator
        .as_ref()
        .ok_or_else(|| Error::Capability(format!("`{}` has no generator", bundle.model_id)))?;
    let disc = bundle.require_disc_head()?;
    if batch.masked_count() == 0 {
        return Err(Error::DegenerateBatch("no masked positions".into()));
    }
    let mask_id = bundle.tokenizer.special_ids().mask;
    let params = bundle.view(true);

    // Generator: predict the original token at each masked position.
    let masked: Vec<Vec<u32>> = batch
        .original_ids
        .iter()
        .zip(&batch.masked_positions)
        .map(|(o, ps)| {
            let mut m = o.clone();
            for &p in ps {
                m[p] = mask_id;
            }
            m
        })
        .collect();
    let gh = gen.encoder.forward(params, &TokenBatch::new(masked, gen.encoder.pad_token_id)?)?;
    let t = gh.dim(1)?;
    let gflat = gh.reshape(((), gh.dim(2)?))?;
    let (idx, targets): (Vec<u32>, Vec<u32>) = batch
        .masked_positions
        .iter()
        .enumerate()
        .flat_map(|(i, ps)| ps.iter().map(move |&p| ((i * t + p) as u32, batch.original_ids[i][p])))
        .unzip();
    let dev = gflat.device().clone();
    let rows = gflat.index_select(&Tensor::new(idx, &dev)?, 0)?;
    let logits = gen.head.logits(params, &rows)?.to_dtype(DType::F64)?;
    let lp = candle_nn::ops::log_softmax(&logits, D::Minus1)?;
    let picked = lp.gather(&Tensor::new(targets, &dev)?.unsqueeze(1)?, 1)?;
    let gen_loss = picked.mean_all()?.neg()?;

    // Discriminator on the corrupted sequences, every real position.
    let dh = bundle.encoder.forward(params, &TokenBatch::new(batch.corrupted_ids.clone(), bundle.encoder.pad_token_id)?)?;
    let t = dh.dim(1)?;
    let dflat = dh.reshape(((), dh.dim(2)?))?;
    let mut idx = Vec::new();
    let mut replaced = Vec::new();
    for (i, m) in batch.replaced_mask.iter().enumerate() {
        for (j, &r) in m.iter().enumerate() {
            idx.push((i * t + j) as u32);
            replaced.push(if r { 1f64 } else { 0f64 });
        }
    }
    let rows = dflat.index_select(&Tensor::new(idx, &dev)?, 0)?;
    let scores = clamp_prob(&sigmoid(&disc.logits(params, &rows)?.to_dtype(DType::F64)?)?)?;
    let r = Tensor::new(replaced, &dev)?;
    let orig_terms = ((r.neg()? + 1.0)? * scores.log()?)?;
    let repl_terms = (r * (scores.neg()? + 1.0)?.log()?)?;
    let disc_loss = (orig_terms + repl_terms)?.sum_all()?.neg()?;

    let total = (gen_loss.clone() + (disc_loss.clone() * lambda)?)?;
    Ok(PretrainLoss {
        total,
        generator: gen_loss.to_scalar::<f64>()?,
        discriminator: disc_loss.to_scalar::<f64>()?,
    })
}

/// Per-option discriminator logits and scores of one example, for inspecting
/// how the losses see it.
pub fn option_logits(bundle: &ModelBundle, ex: &PreparedExample, strategy: Strategy) -> Result<BTreeMap<String, (f64, f64)>> {
    if !strategy.is_discriminative() {
        return Err(Error::Input(format!("`{strategy}` has no discriminator logits")));
    }
    let refs: Vec<&RenderedPrompt> = ex.renderings.iter().collect();
    let o = forward(bundle, strategy, &refs, &[], false)?;
    let l: Vec<f64> = o.logits.to_vec1()?;
    let s: Vec<f64> = o.scores.expect("discriminative outputs carry scores").to_vec1()?;
    Ok(ex.labels.iter().cloned().zip(l.into_iter().zip(s)).collect())
}

#[cfg(test)]
mod tests;
