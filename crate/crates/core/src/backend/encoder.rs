//! BERT-family transformer encoder over a [`ParamStore`].
//!
//! Parameter names follow the published checkpoint layout
//! (`<prefix>.embeddings.word_embeddings.weight`,
//! `<prefix>.encoder.layer.<i>.attention.self.query.weight`, ...), so BERT,
//! RoBERTa and ELECTRA weights load without renaming. Linear weights are
//! stored `[out, in]`.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use super::params::ParamView;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Name prefix of every encoder parameter (`electra`, `roberta`, ...).
    pub prefix: String,
    pub vocab_size: usize,
    pub hidden_size: usize,
    /// Width of the token embeddings; differs from `hidden_size` when the
    /// checkpoint carries an `embeddings_project` layer.
    pub embedding_size: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub intermediate_size: usize,
    pub max_positions: usize,
    pub type_vocab_size: usize,
    pub layer_norm_eps: f64,
    /// First position id used for real tokens (2 for RoBERTa, 0 otherwise).
    pub position_offset: usize,
    pub pad_token_id: u32,
}

impl EncoderConfig {
    /// Longest token sequence the position table can hold.
    pub fn max_sequence_length(&self) -> usize {
        self.max_positions.saturating_sub(self.position_offset)
    }

    fn name(&self, rest: &str) -> String {
        format!("{}.{rest}", self.prefix)
    }

    pub fn word_embeddings_name(&self) -> String {
        self.name("embeddings.word_embeddings.weight")
    }

    fn head_dim(&self) -> Result<usize> {
        if self.num_heads == 0 || self.hidden_size % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {} not divisible by {} heads",
                self.hidden_size, self.num_heads
            )));
        }
        Ok(self.hidden_size / self.num_heads)
    }

    /// Every parameter name and shape this encoder expects.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let h = self.hidden_size;
        let e = self.embedding_size;
        let mut out = vec![
            (self.word_embeddings_name(), vec![self.vocab_size, e]),
            (
                self.name("embeddings.position_embeddings.weight"),
                vec![self.max_positions, e],
            ),
            (
                self.name("embeddings.token_type_embeddings.weight"),
                vec![self.type_vocab_size, e],
            ),
            (self.name("embeddings.LayerNorm.weight"), vec![e]),
            (self.name("embeddings.LayerNorm.bias"), vec![e]),
        ];
        if e != h {
            out.push((self.name("embeddings_project.weight"), vec![h, e]));
            out.push((self.name("embeddings_project.bias"), vec![h]));
        }
        for i in 0..self.num_layers {
            let l = |s: &str| self.name(&format!("encoder.layer.{i}.{s}"));
            for proj in ["query", "key", "value"] {
                out.push((l(&format!("attention.self.{proj}.weight")), vec![h, h]));
                out.push((l(&format!("attention.self.{proj}.bias")), vec![h]));
            }
            out.push((l("attention.output.dense.weight"), vec![h, h]));
            out.push((l("attention.output.dense.bias"), vec![h]));
            out.push((l("attention.output.LayerNorm.weight"), vec![h]));
            out.push((l("attention.output.LayerNorm.bias"), vec![h]));
            out.push((l("intermediate.dense.weight"), vec![self.intermediate_size, h]));
            out.push((l("intermediate.dense.bias"), vec![self.intermediate_size]));
            out.push((l("output.dense.weight"), vec![h, self.intermediate_size]));
            out.push((l("output.dense.bias"), vec![h]));
            out.push((l("output.LayerNorm.weight"), vec![h]));
            out.push((l("output.LayerNorm.bias"), vec![h]));
        }
        out
    }

    /// Runs the encoder over a padded batch and returns `[batch, seq, hidden]`.
    pub fn forward(&self, params: ParamView<'_>, batch: &TokenBatch) -> Result<Tensor> {
        let dtype = params.dtype();
        let (b, t) = (batch.batch_size(), batch.seq_len());
        if t > self.max_sequence_length() {
            return Err(Error::Length {
                len: t,
                max: self.max_sequence_length(),
            });
        }
        let dev = params.device();
        let ids = Tensor::from_vec(batch.flat_ids(), b * t, dev)?;
        let pos = Tensor::from_vec(batch.position_ids(self.position_offset, self.pad_token_id), b * t, dev)?;

        let word = params.get(&self.word_embeddings_name())?.index_select(&ids, 0)?;
        let position = params
            .get(&self.name("embeddings.position_embeddings.weight"))?
            .index_select(&pos, 0)?;
        let token_type = params
            .get(&self.name("embeddings.token_type_embeddings.weight"))?
            .narrow(0, 0, 1)?;
        let x = word.add(&position)?.broadcast_add(&token_type)?;
        let x = layer_norm(
            &x,
            &params.get(&self.name("embeddings.LayerNorm.weight"))?,
            &params.get(&self.name("embeddings.LayerNorm.bias"))?,
            self.layer_norm_eps,
        )?;
        let mut x = if self.embedding_size != self.hidden_size {
            linear(&x, params, &self.name("embeddings_project"))?
        } else {
            x
        };

        let additive = batch.additive_mask(dtype, dev)?;
        for i in 0..self.num_layers {
            x = self.layer(params, i, &x, &additive, b, t)?;
        }
        Ok(x.reshape((b, t, self.hidden_size))?)
    }

    /// One post-LN transformer block; `x` is `[batch * seq, hidden]`.
    fn layer(
        &self,
        params: ParamView<'_>,
        i: usize,
        x: &Tensor,
        additive_mask: &Tensor,
        b: usize,
        t: usize,
    ) -> Result<Tensor> {
        let l = |s: &str| self.name(&format!("encoder.layer.{i}.{s}"));
        let heads = self.num_heads;
        let dh = self.head_dim()?;
        let split = |y: Tensor| -> Result<Tensor> {
            Ok(y.reshape((b, t, heads, dh))?.transpose(1, 2)?.contiguous()?)
        };
        let q = split(linear(x, params, &l("attention.self.query"))?)?;
        let k = split(linear(x, params, &l("attention.self.key"))?)?;
        let v = split(linear(x, params, &l("attention.self.value"))?)?;
        let scores = (q.matmul(&k.t()?.contiguous()?)? / (dh as f64).sqrt())?;
        let scores = scores.broadcast_add(additive_mask)?;
        let probs = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let ctx = probs
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b * t, self.hidden_size))?;
        let attn = linear(&ctx, params, &l("attention.output.dense"))?;
        let x = layer_norm(
            &x.add(&attn)?,
            &params.get(&l("attention.output.LayerNorm.weight"))?,
            &params.get(&l("attention.output.LayerNorm.bias"))?,
            self.layer_norm_eps,
        )?;
        let inter = linear(&x, params, &l("intermediate.dense"))?.gelu_erf()?;
        let out = linear(&inter, params, &l("output.dense"))?;
        layer_norm(
            &x.add(&out)?,
            &params.get(&l("output.LayerNorm.weight"))?,
            &params.get(&l("output.LayerNorm.bias"))?,
            self.layer_norm_eps,
        )
    }
}

/// Right-padded token id batch with its attention mask.
#[derive(Clone, Debug)]
pub struct TokenBatch {
    ids: Vec<Vec<u32>>,
    seq_len: usize,
    pad_id: u32,
}

impl TokenBatch {
    pub fn new(sequences: Vec<Vec<u32>>, pad_id: u32) -> Result<Self> {
        if sequences.is_empty() || sequences.iter().any(Vec::is_empty) {
            return Err(Error::Input("empty token batch or sequence".into()));
        }
        let seq_len = sequences.iter().map(Vec::len).max().unwrap_or(0);
        Ok(Self {
            ids: sequences,
            seq_len,
            pad_id,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.ids.len()
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn lengths(&self) -> impl Iterator<Item = usize> + '_ {
        self.ids.iter().map(Vec::len)
    }

    fn flat_ids(&self) -> Vec<u32> {
        let mut out = Vec::with_capacity(self.ids.len() * self.seq_len);
        for seq in &self.ids {
            out.extend_from_slice(seq);
            out.extend(std::iter::repeat_n(self.pad_id, self.seq_len - seq.len()));
        }
        out
    }

    /// Real tokens count up from `offset`; padding points at the pad row,
    /// matching RoBERTa's position scheme (and plain `0..n` for BERT/ELECTRA).
    fn position_ids(&self, offset: usize, pad: u32) -> Vec<u32> {
        let mut out = Vec::with_capacity(self.ids.len() * self.seq_len);
        for seq in &self.ids {
            out.extend((0..seq.len()).map(|i| (i + offset) as u32));
            let pad_pos = if offset > 0 { pad } else { 0 };
            out.extend(std::iter::repeat_n(pad_pos, self.seq_len - seq.len()));
        }
        out
    }

    /// `[batch, 1, 1, seq]` with 0 for real tokens and a large negative value
    /// for padding.
    fn additive_mask(&self, dtype: DType, dev: &Device) -> Result<Tensor> {
        let mut vals = Vec::with_capacity(self.ids.len() * self.seq_len);
        for seq in &self.ids {
            vals.extend(std::iter::repeat_n(0f64, seq.len()));
            vals.extend(std::iter::repeat_n(-1e9f64, self.seq_len - seq.len()));
        }
        Ok(Tensor::from_vec(vals, (self.ids.len(), 1, 1, self.seq_len), dev)?.to_dtype(dtype)?)
    }
}

/// `x W^T + b` for `x` of shape `[n, in]`, parameters `<name>.weight`/`<name>.bias`.
pub(crate) fn linear(x: &Tensor, params: ParamView<'_>, name: &str) -> Result<Tensor> {
    let w = params.get(&format!("{name}.weight"))?;
    let y = x.matmul(&w.t()?)?;
    let bias = format!("{name}.bias");
    if params.has(&bias) {
        Ok(y.broadcast_add(&params.get(&bias)?)?)
    } else {
        Ok(y)
    }
}

pub(crate) fn layer_norm(x: &Tensor, weight: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + eps)?.sqrt()?)?;
    Ok(normed.broadcast_mul(weight)?.broadcast_add(bias)?)
}
