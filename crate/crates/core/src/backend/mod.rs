//! Encoder models: contextual representations plus the masked-word and
//! replaced-token-detection heads.

mod checkpoint;
mod encoder;
mod heads;
mod params;
mod tokenizer;
mod toy;

use std::collections::BTreeMap;
use std::ops::Range;
use std::sync::Arc;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

pub use checkpoint::{cache_dir, load_bundle, resolve_model_id, CACHE_ENV};
pub use encoder::{EncoderConfig, TokenBatch};
pub use heads::{DiscHead, TaskHead, VocabHead};
pub use params::{ParamStore, ParamView};
pub use tokenizer::{Encoded, HfTokenizer, SpecialIds, TextTokenizer, WordTokenizer};
pub use toy::{load_toy, make_toy_bundle, make_toy_bundle_with_words, save_toy, ToyConfig, TOY_MAGIC, TOY_WORDS};

pub(crate) use heads::sigmoid;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub mlm: bool,
    pub discriminative: bool,
}

/// A smaller masked-word generator that corrupts inputs during toy pretraining.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub encoder: EncoderConfig,
    pub head: VocabHead,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpecialRole {
    Cls,
    Mask,
    Option,
}

/// Hidden states of one sequence.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// `[sequence_length, hidden]`.
    pub hidden: Tensor,
    pub special_positions: BTreeMap<SpecialRole, Range<usize>>,
}

impl EncoderOutput {
    pub fn rows(&self) -> usize {
        self.hidden.dims()[0]
    }
}

/// A tokenizer, an encoder and whichever heads the checkpoint provides.
///
/// `Clone` shares parameter storage (read-only sharing across threads is
/// fine); [`ModelBundle::fork`] makes a private copy for fine-tuning.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub model_id: String,
    pub tokenizer: Arc<TextTokenizer>,
    pub encoder: EncoderConfig,
    pub vocab_head: Option<VocabHead>,
    pub disc_head: Option<DiscHead>,
    pub generator: Option<Generator>,
    pub task_head: Option<TaskHead>,
    pub capabilities: Capabilities,
    params: ParamStore,
}

impl ModelBundle {
    pub(crate) fn new(
        model_id: String,
        tokenizer: TextTokenizer,
        encoder: EncoderConfig,
        vocab_head: Option<VocabHead>,
        disc_head: Option<DiscHead>,
        generator: Option<Generator>,
        params: ParamStore,
    ) -> Result<Self> {
        if vocab_head.is_none() && disc_head.is_none() {
            return Err(Error::Capability(format!(
                "`{model_id}` has neither a masked-word head nor a discriminator head"
            )));
        }
        let capabilities = Capabilities {
            mlm: vocab_head.is_some(),
            discriminative: disc_head.is_some(),
        };
        Ok(Self {
            model_id,
            tokenizer: Arc::new(tokenizer),
            encoder,
            vocab_head,
            disc_head,
            generator,
            task_head: None,
            capabilities,
            params,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn max_length(&self) -> usize {
        self.encoder.max_sequence_length()
    }

    /// A copy without the discriminator head (masked-LM only).
    pub fn without_disc_head(&self) -> Result<Self> {
        let mut out = self.clone();
        out.disc_head = None;
        out.capabilities.discriminative = false;
        out.require_vocab_head()?;
        Ok(out)
    }

    /// A copy without the masked-word head (discriminator only).
    pub fn without_vocab_head(&self) -> Result<Self> {
        let mut out = self.clone();
        out.vocab_head = None;
        out.capabilities.mlm = false;
        out.require_disc_head()?;
        Ok(out)
    }

    /// Deep copy with independent parameter storage.
    pub fn fork(&self) -> Result<Self> {
        let mut out = self.clone();
        out.params = self.params.deep_clone()?;
        Ok(out)
    }

    pub fn require_vocab_head(&self) -> Result<&VocabHead> {
        self.vocab_head
            .as_ref()
            .ok_or_else(|| Error::Capability(format!("`{}` has no masked-word head", self.model_id)))
    }

    pub fn require_disc_head(&self) -> Result<&DiscHead> {
        self.disc_head
            .as_ref()
            .ok_or_else(|| Error::Capability(format!("`{}` has no discriminator head", self.model_id)))
    }

    pub fn require_task_head(&self) -> Result<&TaskHead> {
        self.task_head
            .as_ref()
            .ok_or_else(|| Error::Capability(format!("`{}` has no task head allocated", self.model_id)))
    }

    /// Allocates a zero-initialized `[outputs, hidden]` projection for standard
    /// fine-tuning on the `[CLS]` row, replacing any previous one.
    pub fn attach_task_head(&mut self, outputs: usize) -> Result<()> {
        let name = "task_head".to_string();
        let h = self.encoder.hidden_size;
        let dev = self.params.device().clone();
        let dt = self.params.dtype();
        self.params
            .insert(format!("{name}.weight"), &Tensor::zeros((outputs, h), dt, &dev)?)?;
        self.params
            .insert(format!("{name}.bias"), &Tensor::zeros(outputs, dt, &dev)?)?;
        self.task_head = Some(TaskHead { name, outputs });
        Ok(())
    }

    /// Hidden states for a batch of token sequences, `[batch, max_len, hidden]`.
    pub fn hidden_states(&self, sequences: Vec<Vec<u32>>, track: bool) -> Result<Tensor> {
        let vocab = self.encoder.vocab_size as u32;
        if let Some(bad) = sequences.iter().flatten().find(|&&id| id >= vocab) {
            return Err(Error::Input(format!("token id {bad} outside vocabulary of {vocab}")));
        }
        let batch = TokenBatch::new(sequences, self.encoder.pad_token_id)?;
        self.encoder.forward(self.params.view(track), &batch)
    }

    pub fn view(&self, track: bool) -> ParamView<'_> {
        self.params.view(track)
    }
}

/// Encodes one token sequence in evaluation mode.
pub fn encode(
    bundle: &ModelBundle,
    token_ids: &[u32],
    special_positions: BTreeMap<SpecialRole, Range<usize>>,
) -> Result<EncoderOutput> {
    let n = token_ids.len();
    if n > bundle.max_length() {
        return Err(Error::Length {
            len: n,
            max: bundle.max_length(),
        });
    }
    if let Some((role, r)) = special_positions.iter().find(|(_, r)| r.end > n || r.start >= r.end) {
        return Err(Error::Input(format!("{role:?} range {r:?} invalid for {n} tokens")));
    }
    let hidden = bundle.hidden_states(vec![token_ids.to_vec()], false)?.squeeze(0)?;
    Ok(EncoderOutput {
        hidden,
        special_positions,
    })
}

#[cfg(test)]
mod tests;
