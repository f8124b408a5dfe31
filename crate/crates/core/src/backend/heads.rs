use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::encoder::{layer_norm, linear};
use super::params::ParamView;
use crate::error::Result;

/// Vocabulary projection used for masked-word prediction.
///
/// A hidden row first passes through the checkpoint's transform
/// (`dense -> gelu -> LayerNorm`); the transformed row `h` then scores word
/// `v` as `dot(h, table[v]) + bias[v]`. `table` is usually tied to the word
/// embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocabHead {
    pub transform_dense: String,
    pub transform_norm: String,
    pub table: String,
    pub bias: String,
    pub layer_norm_eps: f64,
}

impl VocabHead {
    pub fn transform(&self, params: ParamView<'_>, hidden: &Tensor) -> Result<Tensor> {
        let h = linear(hidden, params, &self.transform_dense)?.gelu_erf()?;
        layer_norm(
            &h,
            &params.get(&format!("{}.weight", self.transform_norm))?,
            &params.get(&format!("{}.bias", self.transform_norm))?,
            self.layer_norm_eps,
        )
    }

    /// Logits over the full vocabulary for `hidden` rows `[n, hidden]` -> `[n, vocab]`.
    pub fn logits(&self, params: ParamView<'_>, hidden: &Tensor) -> Result<Tensor> {
        let h = self.transform(params, hidden)?;
        let table = params.get(&self.table)?;
        Ok(h.matmul(&table.t()?)?.broadcast_add(&params.get(&self.bias)?)?)
    }

    /// Logits restricted to `word_ids` for each row: `[n, hidden]` -> `[n, word_ids.len()]`.
    pub fn logits_for(&self, params: ParamView<'_>, hidden: &Tensor, word_ids: &[u32]) -> Result<Tensor> {
        let h = self.transform(params, hidden)?;
        let idx = Tensor::new(word_ids, hidden.device())?;
        let rows = params.get(&self.table)?.index_select(&idx, 0)?;
        let bias = params.get(&self.bias)?.index_select(&idx, 0)?;
        Ok(h.matmul(&rows.t()?)?.broadcast_add(&bias)?)
    }

    pub fn parameter_shapes(&self, hidden: usize, embedding: usize, vocab: usize) -> Vec<(String, Vec<usize>)> {
        vec![
            (format!("{}.weight", self.transform_dense), vec![embedding, hidden]),
            (format!("{}.bias", self.transform_dense), vec![embedding]),
            (format!("{}.weight", self.transform_norm), vec![embedding]),
            (format!("{}.bias", self.transform_norm), vec![embedding]),
            (self.bias.clone(), vec![vocab]),
        ]
    }
}

/// Replaced-token-detection head: `dense -> gelu -> dense_prediction`.
///
/// The logit it emits is the log-odds that a token is ORIGINAL. Checkpoints
/// whose native head predicts "replaced" are negated at load time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscHead {
    pub dense: String,
    pub prediction: String,
}

impl DiscHead {
    pub fn standard() -> Self {
        Self {
            dense: "discriminator_predictions.dense".into(),
            prediction: "discriminator_predictions.dense_prediction".into(),
        }
    }

    /// `[n, hidden]` -> `[n]` logits of P(original).
    pub fn logits(&self, params: ParamView<'_>, hidden: &Tensor) -> Result<Tensor> {
        let h = linear(hidden, params, &self.dense)?.gelu_erf()?;
        Ok(linear(&h, params, &self.prediction)?.squeeze(1)?)
    }

    /// `[n, hidden]` -> `[n]` probabilities in (0, 1).
    pub fn scores(&self, params: ParamView<'_>, hidden: &Tensor) -> Result<Tensor> {
        Ok(sigmoid(&self.logits(params, hidden)?)?)
    }

    pub fn parameter_shapes(&self, hidden: usize) -> Vec<(String, Vec<usize>)> {
        vec![
            (format!("{}.weight", self.dense), vec![hidden, hidden]),
            (format!("{}.bias", self.dense), vec![hidden]),
            (format!("{}.weight", self.prediction), vec![1, hidden]),
            (format!("{}.bias", self.prediction), vec![1]),
        ]
    }
}

/// Fresh classification projection on the `[CLS]` row, allocated for standard
/// fine-tuning. `outputs == 1` is the per-option scalar head used for
/// multiple-choice tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskHead {
    pub name: String,
    pub outputs: usize,
}

impl TaskHead {
    pub fn logits(&self, params: ParamView<'_>, hidden: &Tensor) -> Result<Tensor> {
        linear(hidden, params, &self.name)
    }
}

pub(crate) fn sigmoid(x: &Tensor) -> candle_core::Result<Tensor> {
    // 1 / (1 + exp(-x)) built from primitive ops so it differentiates for any dtype.
    (x.neg()?.exp()? + 1.0)?.recip()
}
