use approx::assert_abs_diff_eq;
use candle_core::{Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::Example;
use crate::prompting::Registry;
use crate::scoring::{prepare, score_prepared};
use crate::testutil::*;

fn labels(n: usize) -> Vec<String> {
    (0..n).map(|i| i.to_string()).collect()
}

#[test]
fn mlm_term_is_negative_log_softmax() {
    let l = mlm_prompt_terms(&labels(2), &[2.0, 0.0], 0).unwrap();
    assert_abs_diff_eq!(l.value, (1.0 + (-2.0f64).exp()).ln(), epsilon = 1e-12);
    assert_abs_diff_eq!(l.value, 0.1269, epsilon = 1e-4);
    let l = mlm_prompt_terms(&labels(3), &[0.0, 0.0, 0.0], 2).unwrap();
    assert_abs_diff_eq!(l.value, 3f64.ln(), epsilon = 1e-12);
    assert!(mlm_prompt_terms(&labels(2), &[0.0, 0.0], 2).is_err());
}

#[test]
fn disc_terms_sum_gold_and_foils() {
    let l = disc_prompt_terms(&labels(2), &[0.9, 0.2], 0).unwrap();
    let want = -(0.9f64.ln()) - (0.8f64).ln();
    assert_abs_diff_eq!(l.value, want, epsilon = 1e-12);
    assert_eq!(l.per_prompt_terms.len(), 2);
    assert_abs_diff_eq!(l.per_prompt_terms[0].1, -(0.9f64.ln()), epsilon = 1e-12);
    assert_abs_diff_eq!(l.value, l.per_prompt_terms.iter().map(|t| t.1).sum::<f64>(), epsilon = 1e-15);

    // Saturated scores stay finite at the clamp.
    let l = disc_prompt_terms(&labels(2), &[1.0, 1.0], 0).unwrap();
    assert!(l.value.is_finite());
    assert_abs_diff_eq!(l.value, -(1e-7f64.ln()), epsilon = 1e-6);
}

#[test]
fn contrastive_term_over_equal_logits_is_log_k() {
    for k in 2..6 {
        let l = contrastive_terms(&labels(k), &vec![0.7; k], k - 1).unwrap();
        assert_abs_diff_eq!(l.value, (k as f64).ln(), epsilon = 1e-12);
    }
}

#[test]
fn pretraining_disc_term_fixtures() {
    let n = 12;
    let replaced: Vec<bool> = (0..n).map(|i| i % 3 == 0).collect();
    assert_abs_diff_eq!(pretrain_disc_term(&vec![0.5; n], &replaced), n as f64 * 2f64.ln(), epsilon = 1e-12);
    assert_abs_diff_eq!(pretrain_disc_term(&vec![1.0; n], &vec![false; n]), 0.0, epsilon = 1e-5);
}

struct Case {
    prompt: Prompt,
    examples: Vec<PreparedExample>,
}

fn case(b: &ModelBundle, task: &str, strategy: Strategy, n: usize) -> Case {
    let prompt = Registry::default_registry().get(task).unwrap().clone();
    let raw = if prompt.is_multiple_choice() { copa_examples(n, 3) } else { sst2_examples(n, 3) };
    let examples = raw.iter().map(|e| prepare(b, &prompt, e, strategy).unwrap()).collect();
    Case { prompt, examples }
}

/// Every objective on the toy bundle equals its kernel applied to the
/// model's own scores or logits.
#[test]
fn bundle_losses_match_kernels() {
    let b = toy(21);
    let c = case(&b, "sst2", Strategy::MlmSoftmax, 4);
    for ex in &c.examples {
        let l = loss_mlm_prompt(&b, &c.prompt, ex).unwrap();
        let p = score_prepared(&b, &c.prompt, std::slice::from_ref(ex), Strategy::MlmSoftmax, 8).unwrap().remove(0);
        assert_abs_diff_eq!(l.value.value, -p[ex.gold.unwrap()].ln(), epsilon = 1e-9);
        assert_abs_diff_eq!(l.tensor.to_scalar::<f64>().unwrap(), l.value.value, epsilon = 1e-12);
    }
    let c = case(&b, "sst2", Strategy::DiscToken, 4);
    for ex in &c.examples {
        let l = loss_disc_prompt(&b, &c.prompt, ex).unwrap();
        let s = score_prepared(&b, &c.prompt, std::slice::from_ref(ex), Strategy::DiscToken, 8).unwrap().remove(0);
        let k = disc_prompt_terms(&ex.labels, &s, ex.gold.unwrap()).unwrap();
        assert_abs_diff_eq!(l.value.value, k.value, epsilon = 1e-9);
        assert_eq!(l.value.per_prompt_terms.len(), 2);
    }
    for s in [Strategy::RepAvg, Strategy::ProbAvg, Strategy::Cls] {
        let c = case(&b, "copa", s, 3);
        for ex in &c.examples {
            let l = loss_multitoken(&b, &c.prompt, ex, s).unwrap();
            let sc = score_prepared(&b, &c.prompt, std::slice::from_ref(ex), s, 8).unwrap().remove(0);
            let k = disc_prompt_terms(&ex.labels, &sc, ex.gold.unwrap()).unwrap();
            assert_abs_diff_eq!(l.value.value, k.value, epsilon = 1e-9);

            let l = loss_contrastive(&b, &c.prompt, ex, s).unwrap();
            let logits: Vec<f64> = option_logits(&b, ex, s).unwrap().values().map(|v| v.0).collect();
            let k = contrastive_terms(&ex.labels, &logits, ex.gold.unwrap()).unwrap();
            assert_abs_diff_eq!(l.value.value, k.value, epsilon = 1e-9);
        }
    }
}

#[test]
fn fresh_head_starts_at_log_label_count() {
    let mut b = toy(22);
    b.attach_task_head(2).unwrap();
    let c = case(&b, "sst2", Strategy::HeadSoftmax, 2);
    let l = loss_cls_head(&b, &c.prompt, &c.examples[0], HeadMode::FreshLinear).unwrap();
    assert_abs_diff_eq!(l.value.value, 2f64.ln(), epsilon = 1e-12);

    let mut b = toy(22);
    b.attach_task_head(1).unwrap();
    let c = case(&b, "copa", Strategy::HeadSoftmax, 2);
    let l = loss_cls_head(&b, &c.prompt, &c.examples[0], HeadMode::FreshLinear).unwrap();
    assert_abs_diff_eq!(l.value.value, 2f64.ln(), epsilon = 1e-12);

    let c = case(&b, "copa", Strategy::Cls, 2);
    let l = loss_cls_head(&b, &c.prompt, &c.examples[0], HeadMode::ReuseDisc).unwrap();
    assert_eq!(l.value.per_prompt_terms.len(), 2);
}

#[test]
fn rendering_batches_average_over_distinct_examples() {
    let b = toy(23);
    let c = case(&b, "sst2", Strategy::DiscToken, 3);
    let singles: Vec<f64> = c
        .examples
        .iter()
        .map(|e| loss_disc_prompt(&b, &c.prompt, e).unwrap().value.value)
        .collect();
    let units: Vec<Unit> = c
        .examples
        .iter()
        .flat_map(|e| (0..e.renderings.len()).map(move |i| Unit { example: e, rendering: Some(i) }))
        .rev()
        .collect();
    let l = batch_loss(&b, &c.prompt, Strategy::DiscToken, Objective::Prompt, &units).unwrap();
    assert_eq!(l.value.examples, 3);
    assert_eq!(l.value.per_prompt_terms.len(), 6);
    assert_abs_diff_eq!(l.value.value, singles.iter().sum::<f64>() / 3.0, epsilon = 1e-9);

    // Half an example: its own term only, counted as one example.
    let one = [Unit { example: &c.examples[0], rendering: Some(1) }];
    let l = batch_loss(&b, &c.prompt, Strategy::DiscToken, Objective::Prompt, &one).unwrap();
    assert_eq!(l.value.examples, 1);
    assert_eq!(l.value.per_prompt_terms.len(), 1);
}

#[test]
fn grouped_objectives_reject_partial_examples() {
    let b = toy(24);
    let c = case(&b, "copa", Strategy::RepAvg, 1);
    let unit = [Unit { example: &c.examples[0], rendering: Some(0) }];
    assert!(matches!(
        batch_loss(&b, &c.prompt, Strategy::RepAvg, Objective::Contrastive, &unit),
        Err(Error::Grouping(_))
    ));
    assert!(Objective::Contrastive.check(Strategy::MlmSoftmax).is_err());
    let unlabeled = PreparedExample { gold: None, ..c.examples[0].clone() };
    assert!(matches!(loss_multitoken(&b, &c.prompt, &unlabeled, Strategy::RepAvg), Err(Error::Data(_))));
}

fn element(var: &Var, i: usize) -> f64 {
    var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap()[i]
}

fn set_element(b: &ModelBundle, name: &str, i: usize, v: f64) {
    let var = b.params().var(name).unwrap();
    let mut data: Vec<f64> = var.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
    data[i] = v;
    let t = Tensor::from_vec(data, var.shape(), var.device()).unwrap();
    b.params().set(name, &t).unwrap();
}

/// Central differences at step 1e-4 on the largest-gradient element of each
/// checked tensor.
fn grad_check(b: &ModelBundle, names: &[&str], loss: impl Fn() -> Loss) {
    let l = loss();
    let grads = l.tensor.backward().unwrap();
    let h = 1e-4;
    for &name in names {
        let var = b.params().var(name).unwrap().clone();
        let g: Vec<f64> = grads.get(var.as_tensor()).unwrap_or_else(|| panic!("no gradient for {name}")).flatten_all().unwrap().to_vec1().unwrap();
        let i = (0..g.len()).max_by(|&a, &c| g[a].abs().total_cmp(&g[c].abs())).unwrap();
        assert!(g[i].abs() > 1e-8, "{name}: vanishing gradient");
        let x = element(&var, i);
        set_element(b, name, i, x + h);
        let up = loss().value.value;
        set_element(b, name, i, x - h);
        let down = loss().value.value;
        set_element(b, name, i, x);
        let fd = (up - down) / (2.0 * h);
        let rel = (g[i] - fd).abs() / g[i].abs().max(fd.abs());
        assert!(rel < 1e-3, "{name}[{i}]: autograd {} vs finite difference {fd}", g[i]);
    }
}

const EMB: &str = "encoder.embeddings.word_embeddings.weight";
const LAYER0: &str = "encoder.encoder.layer.0.attention.self.query.weight";

#[test]
fn gradients_match_finite_differences() {
    let b = toy(25);
    let c = case(&b, "sst2", Strategy::MlmSoftmax, 1);
    grad_check(&b, &[EMB, LAYER0, "mlm_head.dense.weight", "mlm_head.bias"], || loss_mlm_prompt(&b, &c.prompt, &c.examples[0]).unwrap());

    let c = case(&b, "sst2", Strategy::DiscToken, 1);
    let disc = [EMB, LAYER0, "discriminator_predictions.dense.weight", "discriminator_predictions.dense_prediction.weight"];
    grad_check(&b, &disc, || loss_disc_prompt(&b, &c.prompt, &c.examples[0]).unwrap());

    for s in [Strategy::RepAvg, Strategy::ProbAvg] {
        let c = case(&b, "copa", s, 1);
        grad_check(&b, &disc, || loss_multitoken(&b, &c.prompt, &c.examples[0], s).unwrap());
        grad_check(&b, &disc, || loss_contrastive(&b, &c.prompt, &c.examples[0], s).unwrap());
    }

    let mut b = b.fork().unwrap();
    b.attach_task_head(2).unwrap();
    // A zero head passes no gradient into the encoder; perturb it first.
    let w: Vec<f64> = (0..2 * 16).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.5).collect();
    b.params().set("task_head.weight", &Tensor::from_vec(w, (2, 16), &candle_core::Device::Cpu).unwrap()).unwrap();
    let c = case(&b, "sst2", Strategy::HeadSoftmax, 1);
    grad_check(&b, &[EMB, "task_head.weight", "task_head.bias"], || {
        loss_cls_head(&b, &c.prompt, &c.examples[0], HeadMode::FreshLinear).unwrap()
    });
}

fn toy_corpus(b: &ModelBundle, n: usize, seed: u64) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tok = b.tokenizer.as_ref();
    (0..n)
        .map(|_| {
            let ids = tok.encode(&sentence(&mut rng, 4, 10)).unwrap().ids;
            ids
        })
        .collect()
}

#[test]
fn corruption_respects_the_mask() {
    let b = toy(26);
    let corpus = toy_corpus(&b, 16, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let batch = corrupt_with_generator(&b, &corpus, 0.15, &mut rng).unwrap();
    assert!(batch.masked_count() > 0);
    for i in 0..corpus.len() {
        for (j, (&o, &c)) in batch.original_ids[i].iter().zip(&batch.corrupted_ids[i]).enumerate() {
            assert_eq!(batch.replaced_mask[i][j], o != c);
            if o != c {
                assert!(batch.masked_positions[i].contains(&j));
            }
        }
        assert!(batch.masked_positions[i].iter().all(|&p| !b.tokenizer.is_special(corpus[i][p])));
    }
    let none = corrupt_with_generator(&b, &corpus, 0.0, &mut rng).unwrap();
    assert!(matches!(loss_pretrain_toy(&b, &none, DEFAULT_DISC_WEIGHT), Err(Error::DegenerateBatch(_))));
}

#[test]
fn pretraining_loss_combines_both_parts() {
    let b = toy(27);
    let corpus = toy_corpus(&b, 8, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let batch = corrupt_with_generator(&b, &corpus, 0.3, &mut rng).unwrap();
    let l = loss_pretrain_toy(&b, &batch, 50.0).unwrap();
    assert_abs_diff_eq!(l.total.to_scalar::<f64>().unwrap(), l.generator + 50.0 * l.discriminator, epsilon = 1e-9);
    let l0 = loss_pretrain_toy(&b, &batch, 0.0).unwrap();
    assert_abs_diff_eq!(l0.total.to_scalar::<f64>().unwrap(), l.generator, epsilon = 1e-12);
}

#[test]
fn toy_pretraining_reduces_smoothed_loss() {
    let b = toy(28);
    let corpus = toy_corpus(&b, 64, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut opt = AdamW::new(b.params().all_vars(), ParamsAdamW { lr: 1e-3, ..Default::default() }).unwrap();
    let mut losses = Vec::new();
    for step in 0..200 {
        let start = (step * 8) % corpus.len();
        let batch = corrupt_with_generator(&b, &corpus[start..start + 8], 0.15, &mut rng).unwrap();
        let batch = if batch.masked_count() == 0 { continue } else { batch };
        let l = loss_pretrain_toy(&b, &batch, DEFAULT_DISC_WEIGHT).unwrap();
        assert!(l.total.to_scalar::<f64>().unwrap().is_finite());
        opt.backward_step(&l.total).unwrap();
        losses.push(l.total.to_scalar::<f64>().unwrap());
    }
    let window = 20;
    let smooth: Vec<f64> = losses.windows(window).map(|w| w.iter().sum::<f64>() / window as f64).collect();
    let first = smooth[0];
    let last = *smooth.last().unwrap();
    assert!(last < 0.8 * first, "smoothed loss {first} -> {last}");
}

#[test]
fn objective_names_parse() {
    assert_eq!("contrastive".parse::<Objective>().unwrap(), Objective::Contrastive);
    assert_eq!("prompt".parse::<Objective>().unwrap(), Objective::Prompt);
    assert!("x".parse::<Objective>().is_err());
    assert!(Objective::Prompt.per_rendering(Strategy::DiscToken));
    assert!(!Objective::Prompt.per_rendering(Strategy::MlmSoftmax));
    assert!(!Objective::Contrastive.per_rendering(Strategy::RepAvg));
    let _ = Example::new("unused", &[], None);
}

