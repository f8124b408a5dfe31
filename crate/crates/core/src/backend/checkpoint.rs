//! Adapters for published BERT, RoBERTa and ELECTRA checkpoints stored in the
//! hub layout (`config.json`, `tokenizer.json`, `model.safetensors` or
//! `pytorch_model.bin`).

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde_json::Value;

use super::{
    load_toy, DiscHead, EncoderConfig, HfTokenizer, ModelBundle, ParamStore, TextTokenizer, VocabHead, TOY_MAGIC,
};
use crate::error::{Error, Result};

/// Environment variable naming the checkpoint cache directory.
pub const CACHE_ENV: &str = "DISCPROMPT_CACHE";

/// Short names accepted on the command line.
const ALIASES: &[(&str, &str)] = &[
    ("electra-base", "google/electra-base-discriminator"),
    ("electra-large", "google/electra-large-discriminator"),
    ("electra-base-generator", "google/electra-base-generator"),
    ("roberta-base", "FacebookAI/roberta-base"),
    ("roberta-large", "FacebookAI/roberta-large"),
    ("bert-base", "google-bert/bert-base-cased"),
    ("bert-large", "google-bert/bert-large-cased"),
];

pub fn resolve_model_id(model_id: &str) -> &str {
    ALIASES
        .iter()
        .find(|(alias, _)| *alias == model_id)
        .map(|(_, full)| *full)
        .unwrap_or(model_id)
}

pub fn cache_dir() -> PathBuf {
    if let Some(dir) = std::env::var_os(CACHE_ENV) {
        return PathBuf::from(dir);
    }
    let home = std::env::var_os("HOME").map(PathBuf::from).unwrap_or_default();
    home.join(".cache").join("discprompt")
}

/// Loads a bundle by hub id (or alias), checkpoint directory, or toy file.
///
/// Hub ids resolve to `$DISCPROMPT_CACHE/<org>--<name>/<revision>/`.
pub fn load_bundle(model_id: &str, revision: &str) -> Result<ModelBundle> {
    let as_path = Path::new(model_id);
    if as_path.is_file() {
        return load_toy(as_path);
    }
    if as_path.join("config.json").is_file() {
        return load_checkpoint_dir(model_id, as_path);
    }
    let full = resolve_model_id(model_id);
    let dir = cache_dir().join(full.replace('/', "--")).join(revision);
    if !dir.join("config.json").is_file() {
        return Err(Error::Fetch(format!(
            "`{full}` revision `{revision}` not found under {} (download it into that directory, \
             e.g. `huggingface-cli download {full} --revision {revision} --local-dir {}`)",
            cache_dir().display(),
            dir.display()
        )));
    }
    load_checkpoint_dir(full, &dir)
}

fn is_toy_file(path: &Path) -> bool {
    std::fs::read(path).map(|b| b.starts_with(TOY_MAGIC)).unwrap_or(false)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Arch {
    Bert,
    Roberta,
    Electra,
}

fn read_config(dir: &Path) -> Result<Value> {
    let path = dir.join("config.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Ok(serde_json::from_str(&text)?)
}

fn encoder_config(cfg: &Value, arch: Arch) -> Result<EncoderConfig> {
    let get = |k: &str| -> Result<usize> {
        cfg.get(k)
            .and_then(Value::as_u64)
            .map(|v| v as usize)
            .ok_or_else(|| Error::Config(format!("config.json lacks `{k}`")))
    };
    if let Some(act) = cfg.get("hidden_act").and_then(Value::as_str) {
        if act != "gelu" {
            return Err(Error::Config(format!("unsupported hidden_act `{act}`")));
        }
    }
    let hidden = get("hidden_size")?;
    let pad = cfg.get("pad_token_id").and_then(Value::as_u64).unwrap_or(0) as u32;
    Ok(EncoderConfig {
        prefix: match arch {
            Arch::Bert => "bert",
            Arch::Roberta => "roberta",
            Arch::Electra => "electra",
        }
        .into(),
        vocab_size: get("vocab_size")?,
        hidden_size: hidden,
        embedding_size: cfg
            .get("embedding_size")
            .and_then(Value::as_u64)
            .map(|v| v as usize)
            .unwrap_or(hidden),
        num_layers: get("num_hidden_layers")?,
        num_heads: get("num_attention_heads")?,
        intermediate_size: get("intermediate_size")?,
        max_positions: get("max_position_embeddings")?,
        type_vocab_size: get("type_vocab_size").unwrap_or(2),
        layer_norm_eps: cfg.get("layer_norm_eps").and_then(Value::as_f64).unwrap_or(1e-12),
        position_offset: if arch == Arch::Roberta { pad as usize + 1 } else { 0 },
        pad_token_id: pad,
    })
}

fn read_weights(dir: &Path) -> Result<HashMap<String, Tensor>> {
    let st = dir.join("model.safetensors");
    let raw: Vec<(String, Tensor)> = if st.is_file() {
        candle_core::safetensors::load(&st, &Device::Cpu)?.into_iter().collect()
    } else {
        let bin = dir.join("pytorch_model.bin");
        if !bin.is_file() {
            return Err(Error::Fetch(format!("no model.safetensors or pytorch_model.bin in {}", dir.display())));
        }
        candle_core::pickle::read_all(&bin)?
    };
    Ok(raw
        .into_iter()
        .map(|(k, v)| {
            let k = k.replace("LayerNorm.gamma", "LayerNorm.weight").replace("LayerNorm.beta", "LayerNorm.bias");
            (k, v)
        })
        .collect())
}

pub(crate) fn load_checkpoint_dir(model_id: &str, dir: &Path) -> Result<ModelBundle> {
    if is_toy_file(dir) {
        return load_toy(dir);
    }
    let cfg = read_config(dir)?;
    let arch = match cfg.get("model_type").and_then(Value::as_str) {
        Some("bert") => Arch::Bert,
        Some("roberta") => Arch::Roberta,
        Some("electra") => Arch::Electra,
        other => return Err(Error::Config(format!("unsupported model_type {other:?}"))),
    };
    let encoder = encoder_config(&cfg, arch)?;
    let tokenizer = HfTokenizer::from_file(&dir.join("tokenizer.json"))?;
    let mut weights = read_weights(dir)?;
    // Some exports drop the architecture prefix on encoder weights.
    let prefix = format!("{}.", encoder.prefix);
    if !weights.keys().any(|k| k.starts_with(&prefix)) {
        weights = weights
            .into_iter()
            .map(|(k, v)| {
                if k.starts_with("embeddings") || k.starts_with("encoder") {
                    (format!("{prefix}{k}"), v)
                } else {
                    (k, v)
                }
            })
            .collect();
    }

    let mut params = ParamStore::new(DType::F32, Device::Cpu);
    fn take(weights: &mut HashMap<String, Tensor>, params: &mut ParamStore, name: &str, shape: &[usize]) -> Result<()> {
        let t = weights
            .remove(name)
            .ok_or_else(|| Error::Capability(format!("checkpoint lacks tensor `{name}`")))?;
        if t.dims() != shape {
            return Err(Error::Config(format!("tensor `{name}` has shape {:?}, expected {shape:?}", t.dims())));
        }
        params.insert(name, &t)
    }
    for (name, shape) in encoder.parameter_shapes() {
        take(&mut weights, &mut params, &name, &shape)?;
    }
    let word_table = encoder.word_embeddings_name();
    let (h, e, v) = (encoder.hidden_size, encoder.embedding_size, encoder.vocab_size);
    let eps = encoder.layer_norm_eps;

    let mlm_layout = |dense: &str, norm: &str, decoder: &str, biases: [&str; 2]| {
        (dense.to_string(), norm.to_string(), decoder.to_string(), biases.map(str::to_string))
    };
    let candidate = match arch {
        Arch::Bert => Some(mlm_layout(
            "cls.predictions.transform.dense",
            "cls.predictions.transform.LayerNorm",
            "cls.predictions.decoder.weight",
            ["cls.predictions.bias", "cls.predictions.decoder.bias"],
        )),
        Arch::Roberta => Some(mlm_layout(
            "lm_head.dense",
            "lm_head.layer_norm",
            "lm_head.decoder.weight",
            ["lm_head.bias", "lm_head.decoder.bias"],
        )),
        Arch::Electra => Some(mlm_layout(
            "generator_predictions.dense",
            "generator_predictions.LayerNorm",
            "generator_lm_head.weight",
            ["generator_lm_head.bias", "generator_lm_head.bias"],
        )),
    };
    let mut vocab_head = None;
    if let Some((dense, norm, decoder, biases)) = candidate {
        if weights.contains_key(&format!("{dense}.weight")) {
            let bias = biases
                .iter()
                .find(|b| weights.contains_key(b.as_str()))
                .cloned()
                .ok_or_else(|| Error::Capability("masked-word head lacks its output bias".into()))?;
            let head_width = weights[&format!("{dense}.weight")].dims()[0];
            take(&mut weights, &mut params, &format!("{dense}.weight"), &[head_width, h])?;
            take(&mut weights, &mut params, &format!("{dense}.bias"), &[head_width])?;
            take(&mut weights, &mut params, &format!("{norm}.weight"), &[head_width])?;
            take(&mut weights, &mut params, &format!("{norm}.bias"), &[head_width])?;
            take(&mut weights, &mut params, &bias, &[v])?;
            let table = if weights.contains_key(&decoder) && head_width != e {
                take(&mut weights, &mut params, &decoder, &[v, head_width])?;
                decoder.clone()
            } else if weights.contains_key(&decoder) {
                // Tied decoders are stored as a copy of the word embeddings; keep the shared one.
                weights.remove(&decoder);
                word_table.clone()
            } else {
                word_table.clone()
            };
            vocab_head = Some(VocabHead {
                transform_dense: dense,
                transform_norm: norm,
                table,
                bias,
                layer_norm_eps: eps,
            });
        }
    }

    let mut disc_head = None;
    let head = DiscHead::standard();
    if weights.contains_key(&format!("{}.weight", head.prediction)) {
        for (name, shape) in head.parameter_shapes(h) {
            take(&mut weights, &mut params, &name, &shape)?;
        }
        // Published discriminators emit the logit of "replaced"; flip to P(original).
        for suffix in ["weight", "bias"] {
            let name = format!("{}.{suffix}", head.prediction);
            let flipped = params.var(&name)?.as_tensor().neg()?;
            params.set(&name, &flipped)?;
        }
        disc_head = Some(head);
    }
    ModelBundle::new(
        model_id.to_string(),
        TextTokenizer::Hf(Box::new(tokenizer)),
        encoder,
        vocab_head,
        disc_head,
        None,
        params,
    )
}
