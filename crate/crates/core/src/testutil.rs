//! Fixtures shared by the unit tests.

use candle_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backend::{make_toy_bundle, ModelBundle};
use crate::data::Example;
use crate::prompting::RenderedPrompt;

pub const DENSE: &str = "discriminator_predictions.dense";
pub const PRED: &str = "discriminator_predictions.dense_prediction";

pub fn toy(seed: u64) -> ModelBundle {
    make_toy_bundle(seed, 128, 16, 2).unwrap()
}

/// Hidden rows of `r` at the given positions, `[n, hidden]`.
pub fn rows(b: &ModelBundle, r: &RenderedPrompt, positions: &[usize]) -> Tensor {
    let h = b.hidden_states(vec![r.token_ids.clone()], false).unwrap().squeeze(0).unwrap();
    let idx = Tensor::new(positions.iter().map(|&p| p as u32).collect::<Vec<_>>(), h.device()).unwrap();
    h.index_select(&idx, 0).unwrap()
}

/// `gelu(dense(h))`, the input of the final discriminator projection.
pub fn disc_features(b: &ModelBundle, h: &Tensor) -> Vec<Vec<f64>> {
    let v = b.view(false);
    let w = v.get(&format!("{DENSE}.weight")).unwrap();
    let bias = v.get(&format!("{DENSE}.bias")).unwrap();
    h.matmul(&w.t().unwrap()).unwrap().broadcast_add(&bias).unwrap().gelu_erf().unwrap().to_vec2().unwrap()
}

/// Solves `a x = y` by Gaussian elimination with partial pivoting.
pub fn solve(mut a: Vec<Vec<f64>>, mut y: Vec<f64>) -> Vec<f64> {
    let n = y.len();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, p);
        y.swap(c, p);
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
            y[r] -= f * y[c];
        }
    }
    let mut x = vec![0.0; n];
    for c in (0..n).rev() {
        x[c] = (y[c] - (c + 1..n).map(|k| a[c][k] * x[k]).sum::<f64>()) / a[c][c];
    }
    x
}

/// Sets the discriminator's output projection so that the given feature rows
/// get exactly the given logits (weights in the span of the rows, zero bias).
pub fn force_disc_logits(b: &ModelBundle, feats: &[Vec<f64>], logits: &[f64]) {
    let gram: Vec<Vec<f64>> = feats
        .iter()
        .map(|f| feats.iter().map(|g| f.iter().zip(g).map(|(x, y)| x * y).sum()).collect())
        .collect();
    let a = solve(gram, logits.to_vec());
    let h = feats[0].len();
    let w: Vec<f64> = (0..h).map(|d| feats.iter().zip(&a).map(|(f, c)| c * f[d]).sum()).collect();
    let dev = b.params().device().clone();
    b.params().set(&format!("{PRED}.weight"), &Tensor::from_vec(w, (1, h), &dev).unwrap()).unwrap();
    b.params().set(&format!("{PRED}.bias"), &Tensor::zeros(1, b.dtype(), &dev).unwrap()).unwrap();
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

const WORDS: &[&str] = &["the", "movie", "film", "plot", "acting", "story", "is", "this", "very", "and", "a", "fun", "ride", "dull"];

/// Random sentences over the toy vocabulary.
pub fn sentence<R: Rng>(rng: &mut R, min: usize, max: usize) -> String {
    let n = rng.random_range(min..=max);
    (0..n).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect::<Vec<_>>().join(" ")
}

pub fn sst2_examples(n: usize, seed: u64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let s = sentence(&mut rng, 2, 12);
            let label = if rng.random::<bool>() { "positive" } else { "negative" };
            Example::new(format!("e{i}"), &[("sentence", &s)], Some(label))
        })
        .collect()
}

pub fn copa_examples(n: usize, seed: u64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let p = sentence(&mut rng, 3, 8);
            let o1 = sentence(&mut rng, 1, 6);
            let o2 = sentence(&mut rng, 1, 6);
            let q = if i % 2 == 0 { "cause" } else { "effect" };
            let label = (rng.random::<bool>() as usize).to_string();
            Example::new(format!("c{i}"), &[("premise", &p), ("question", q)], Some(&label)).with_options(&[&o1, &o2])
        })
        .collect()
}

pub const POSITIVE: &[&str] = &["wonderful"];
pub const NEGATIVE: &[&str] = &["awful"];

/// Filler sentences with one sentiment keyword deciding the label.
pub fn separable(n_per_label: usize, seed: u64, prefix: &str) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for i in 0..2 * n_per_label {
        let (label, words) = if i % 2 == 0 { ("positive", POSITIVE) } else { ("negative", NEGATIVE) };
        let key = words[rng.random_range(0..words.len())];
        let s = match rng.random_range(0..3) {
            0 => key.to_string(),
            1 => format!("{} {key}", sentence(&mut rng, 1, 1)),
            _ => format!("{key} {}", sentence(&mut rng, 1, 1)),
        };
        out.push(Example::new(format!("{prefix}{i}"), &[("sentence", &s)], Some(label)));
    }
    out
}
