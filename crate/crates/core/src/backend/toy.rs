//! Seeded miniature bundles with both heads and a half-width generator, and
//! their single-file serialization.

use std::io::{Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DiscHead, EncoderConfig, Generator, ModelBundle, ParamStore, TextTokenizer, VocabHead, WordTokenizer};
use crate::error::{Error, Result};

pub const TOY_MAGIC: &[u8; 8] = b"DPTOY001";

/// Default toy vocabulary after the five specials, most useful words first so
/// small `vocab_size` values still cover the sentiment fixtures.
pub const TOY_WORDS: &[&str] = &[
    ".", ",", "?", "it", "was", "great", "terrible", "a", "fun", "ride", "good", "bad", "okay", "yes",
    "no", "maybe", "the", "movie", "film", "plot", "acting", "story", "is", "this", "very", "and",
    "wonderful", "awful", "brilliant", "boring", "delightful", "dull", "lovely", "horrible",
    "excellent", "poor", "news", "world", "sports", "business", "tech", "question", "answer", "so",
    "because", "or", "my", "body", "cast", "shadow", "over", "grass", "sun", "rising", "rose", "i",
    "he", "she", "they", "went", "to", "home", "store", "rain", "fell", "umbrella", "opened",
    "greatest", "true", "false", "man", "woman", "dog", "cat", "ran", "sat", "ate", "food", "hungry",
    "tired", "slept", "water", "drank", "thirsty", "not", "that", "!", ":", "\"",
];

/// Everything needed to rebuild a toy bundle besides its parameter values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub model_id: String,
    pub seed: u64,
    pub words: Vec<String>,
    pub encoder: EncoderConfig,
    /// Absent heads are simply not stored.
    #[serde(default)]
    pub vocab_head: Option<VocabHead>,
    #[serde(default)]
    pub disc_head: Option<DiscHead>,
    #[serde(default)]
    pub generator: Option<Generator>,
    pub dtype: String,
}

/// A randomly initialized toy bundle over the built-in vocabulary.
///
/// `vocab_size` counts the five special tokens; if it exceeds the built-in
/// word list the remainder is filled with `tok<i>` placeholders.
pub fn make_toy_bundle(seed: u64, vocab_size: usize, hidden_dim: usize, layers: usize) -> Result<ModelBundle> {
    if vocab_size < 8 {
        return Err(Error::Input(format!("toy vocab_size must be >= 8, got {vocab_size}")));
    }
    let n_words = vocab_size - WordTokenizer::SPECIALS.len();
    let mut words: Vec<String> = TOY_WORDS.iter().take(n_words).map(|s| s.to_string()).collect();
    let mut i = 0;
    while words.len() < n_words {
        words.push(format!("tok{i}"));
        i += 1;
    }
    make_toy_bundle_with_words(seed, &words, hidden_dim, layers)
}

/// Like [`make_toy_bundle`] with an explicit word list.
pub fn make_toy_bundle_with_words<S: AsRef<str>>(
    seed: u64,
    words: &[S],
    hidden_dim: usize,
    layers: usize,
) -> Result<ModelBundle> {
    let tokenizer = WordTokenizer::new(words.iter().map(|w| w.as_ref()));
    let vocab_size = tokenizer.vocab().len();
    if vocab_size < 8 {
        return Err(Error::Input(format!("toy vocab_size must be >= 8, got {vocab_size}")));
    }
    if hidden_dim < 4 {
        return Err(Error::Input(format!("toy hidden_dim must be >= 4, got {hidden_dim}")));
    }
    if layers == 0 {
        return Err(Error::Input("toy model needs at least one layer".into()));
    }
    let config = toy_config(seed, tokenizer.vocab()[5..].to_vec(), vocab_size, hidden_dim, layers);
    let params = init_params(&config, seed)?;
    bundle_from_config(config, params)
}

fn toy_config(seed: u64, words: Vec<String>, vocab: usize, hidden: usize, layers: usize) -> ToyConfig {
    let heads = if hidden >= 8 && hidden % 2 == 0 { 2 } else { 1 };
    let encoder = EncoderConfig {
        prefix: "encoder".into(),
        vocab_size: vocab,
        hidden_size: hidden,
        embedding_size: hidden,
        num_layers: layers,
        num_heads: heads,
        intermediate_size: 2 * hidden,
        max_positions: 128,
        type_vocab_size: 2,
        layer_norm_eps: 1e-12,
        position_offset: 0,
        pad_token_id: WordTokenizer::SPECIAL_IDS.pad,
    };
    let gen_hidden = (hidden / 2).max(2);
    let gen_encoder = EncoderConfig {
        prefix: "generator".into(),
        hidden_size: gen_hidden,
        embedding_size: gen_hidden,
        num_heads: 1,
        intermediate_size: 2 * gen_hidden,
        ..encoder.clone()
    };
    let vocab_head = VocabHead {
        transform_dense: "mlm_head.dense".into(),
        transform_norm: "mlm_head.LayerNorm".into(),
        table: encoder.word_embeddings_name(),
        bias: "mlm_head.bias".into(),
        layer_norm_eps: 1e-12,
    };
    let generator = Generator {
        head: VocabHead {
            transform_dense: "generator_head.dense".into(),
            transform_norm: "generator_head.LayerNorm".into(),
            table: gen_encoder.word_embeddings_name(),
            bias: "generator_head.bias".into(),
            layer_norm_eps: 1e-12,
        },
        encoder: gen_encoder,
    };
    ToyConfig {
        model_id: format!("toy-s{seed}-v{vocab}-h{hidden}-l{layers}"),
        seed,
        words,
        encoder,
        vocab_head: Some(vocab_head),
        disc_head: Some(DiscHead::standard()),
        generator: Some(generator),
        dtype: "f64".into(),
    }
}

fn all_shapes(c: &ToyConfig) -> Vec<(String, Vec<usize>)> {
    let e = &c.encoder;
    let mut shapes = e.parameter_shapes();
    if let Some(vh) = &c.vocab_head {
        shapes.extend(vh.parameter_shapes(e.hidden_size, e.embedding_size, e.vocab_size));
    }
    if let Some(dh) = &c.disc_head {
        shapes.extend(dh.parameter_shapes(e.hidden_size));
    }
    if let Some(gen) = &c.generator {
        let g = &gen.encoder;
        shapes.extend(g.parameter_shapes());
        shapes.extend(gen.head.parameter_shapes(g.hidden_size, g.embedding_size, g.vocab_size));
    }
    shapes
}

fn init_params(c: &ToyConfig, seed: u64) -> Result<ParamStore> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dev = Device::Cpu;
    let mut store = ParamStore::new(DType::F64, dev.clone());
    for (name, shape) in all_shapes(c) {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = if name.ends_with("LayerNorm.weight") {
            vec![1.0; n]
        } else if name.ends_with(".bias") {
            vec![0.0; n]
        } else {
            let fan_in = *shape.last().unwrap_or(&1) as f64;
            let std = if name.contains("embeddings.") { 1.0 } else { fan_in.sqrt().recip() };
            let normal = Normal::new(0.0, std).map_err(|e| Error::Input(e.to_string()))?;
            (0..n).map(|_| normal.sample(&mut rng)).collect()
        };
        store.insert(name, &Tensor::from_vec(values, shape, &dev)?)?;
    }
    Ok(store)
}

fn bundle_from_config(config: ToyConfig, params: ParamStore) -> Result<ModelBundle> {
    let tokenizer = WordTokenizer::new(config.words.iter());
    ModelBundle::new(
        config.model_id.clone(),
        TextTokenizer::Word(tokenizer),
        config.encoder.clone(),
        config.vocab_head.clone(),
        config.disc_head.clone(),
        config.generator.clone(),
        params,
    )
}

fn toy_config_of(bundle: &ModelBundle) -> Result<ToyConfig> {
    let TextTokenizer::Word(tok) = bundle.tokenizer.as_ref() else {
        return Err(Error::Input("only toy bundles can be saved in the toy format".into()));
    };
    Ok(ToyConfig {
        model_id: bundle.model_id.clone(),
        seed: 0,
        words: tok.vocab()[WordTokenizer::SPECIALS.len()..].to_vec(),
        encoder: bundle.encoder.clone(),
        vocab_head: bundle.vocab_head.clone(),
        disc_head: bundle.disc_head.clone(),
        generator: bundle.generator.clone(),
        dtype: "f64".into(),
    })
}

/// Writes `DPTOY001`, a little-endian u64 header length, the JSON header, then
/// the parameters as safetensors.
pub fn save_toy(bundle: &ModelBundle, path: &Path) -> Result<()> {
    let header = serde_json::to_vec(&toy_config_of(bundle)?)?;
    let payload = bundle.params().to_safetensors()?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut write = |bytes: &[u8]| f.write_all(bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e));
    write(TOY_MAGIC)?;
    write(&(header.len() as u64).to_le_bytes())?;
    write(&header)?;
    write(&payload)?;
    Ok(())
}

pub fn load_toy(path: &Path) -> Result<ModelBundle> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let bad = |m: &str| Error::Input(format!("{}: {m}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != TOY_MAGIC {
        return Err(bad("missing DPTOY001 header"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header = bytes.get(16..16 + len).ok_or_else(|| bad("truncated header"))?;
    let config: ToyConfig = serde_json::from_slice(header)?;
    let tensors = candle_core::safetensors::load_buffer(&bytes[16 + len..], &Device::Cpu)?;
    let mut params = ParamStore::new(DType::F64, Device::Cpu);
    for (name, shape) in all_shapes(&config) {
        let t = tensors.get(&name).ok_or_else(|| bad(&format!("missing tensor {name}")))?;
        if t.dims() != shape.as_slice() {
            return Err(bad(&format!("tensor {name} has shape {:?}, expected {shape:?}", t.dims())));
        }
        params.insert(name, t)?;
    }
    bundle_from_config(config, params)
}
