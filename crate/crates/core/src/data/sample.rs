use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Example, TaskData, TaskKind, TaskSpec};
use crate::error::{Error, Result};

/// Seeds used when none are given.
pub const DEFAULT_SEEDS: [u64; 3] = [13, 21, 42];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotSplit {
    pub seed: u64,
    /// Per label for single-token tasks, total for multiple choice; `None`
    /// for a full-data split.
    pub k: Option<usize>,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
}

impl FewShotSplit {
    /// Checks the sampling invariants against `spec`.
    pub fn check(&self, spec: &TaskSpec) -> Result<()> {
        let Some(k) = self.k else { return Ok(()) };
        let train_ids: std::collections::HashSet<&str> = self.train.iter().map(|e| e.id.as_str()).collect();
        if self.dev.iter().any(|e| train_ids.contains(e.id.as_str())) {
            return Err(Error::Sampling("train and dev overlap".into()));
        }
        match spec.kind {
            TaskKind::SingleToken => {
                for part in [&self.train, &self.dev] {
                    if let Some((l, n)) = spec.label_counts(part).into_iter().find(|(_, n)| *n != k) {
                        return Err(Error::Sampling(format!("label `{l}` has {n} examples, expected {k}")));
                    }
                }
            }
            TaskKind::MultipleChoice => {
                if self.train.len() != k || self.dev.len() != k {
                    return Err(Error::Sampling(format!(
                        "{} train / {} dev examples, expected {k} each",
                        self.train.len(),
                        self.dev.len()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Draws K train and K dev examples per label (single-token) or K each in
/// total (multiple choice), without replacement. Train is drawn first and dev
/// from the remainder; deterministic in `(split, k, seed)`.
pub fn sample_fewshot(spec: &TaskSpec, split: &[Example], k: usize, seed: u64) -> Result<FewShotSplit> {
    if k == 0 {
        return Err(Error::Sampling("K must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut dev) = (Vec::new(), Vec::new());
    match spec.kind {
        TaskKind::SingleToken => {
            for (label, _) in spec.label_counts(split) {
                let mut pool: Vec<&Example> = split.iter().filter(|e| e.label.as_ref() == Some(&label)).collect();
                if pool.len() < 2 * k {
                    return Err(Error::Sampling(format!(
                        "label `{label}` has {} examples; K={k} needs {} (short by {})",
                        pool.len(),
                        2 * k,
                        2 * k - pool.len()
                    )));
                }
                pool.shuffle(&mut rng);
                train.extend(pool[..k].iter().map(|e| (*e).clone()));
                dev.extend(pool[k..2 * k].iter().map(|e| (*e).clone()));
            }
        }
        TaskKind::MultipleChoice => {
            let mut pool: Vec<&Example> = split.iter().collect();
            if pool.len() < 2 * k {
                return Err(Error::Sampling(format!(
                    "{} examples; K={k} needs {} (short by {})",
                    pool.len(),
                    2 * k,
                    2 * k - pool.len()
                )));
            }
            pool.shuffle(&mut rng);
            train.extend(pool[..k].iter().map(|e| (*e).clone()));
            dev.extend(pool[k..2 * k].iter().map(|e| (*e).clone()));
        }
    }
    train.shuffle(&mut rng);
    dev.shuffle(&mut rng);
    let out = FewShotSplit {
        seed,
        k: Some(k),
        train,
        dev,
    };
    out.check(spec)?;
    Ok(out)
}

/// How many training examples a run uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shots {
    K(usize),
    Full,
}

/// Few-shot sample, or the original splits when `Full` is requested or K
/// reaches the size of the largest class (multiple choice: the whole split).
/// Full-data runs select on the original validation split.
pub fn sample_or_full(data: &TaskData, shots: Shots, seed: u64) -> Result<FewShotSplit> {
    let full_at = match data.spec.kind {
        TaskKind::SingleToken => data.spec.label_counts(&data.train).iter().map(|(_, n)| *n).max().unwrap_or(0),
        TaskKind::MultipleChoice => data.train.len(),
    };
    match shots {
        Shots::K(k) if k < full_at => sample_fewshot(&data.spec, &data.train, k, seed),
        _ => Ok(FewShotSplit {
            seed,
            k: None,
            train: data.train.clone(),
            dev: data.eval.clone(),
        }),
    }
}
