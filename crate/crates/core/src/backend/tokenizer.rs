use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token ids of one encoded text, with `[CLS]`/`[SEP]` (or `<s>`/`</s>`) added.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Encoded {
    pub ids: Vec<u32>,
    /// Byte range of each token in the source text; `(0, 0)` for added specials.
    pub offsets: Vec<(usize, usize)>,
    pub special: Vec<bool>,
}

impl Encoded {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Indices of the non-special tokens overlapping the byte range `[start, end)`.
    pub fn tokens_in(&self, start: usize, end: usize) -> Vec<usize> {
        self.offsets
            .iter()
            .zip(&self.special)
            .enumerate()
            .filter(|(_, (&(s, e), &sp))| (!sp || (s, e) != (0, 0)) && e > s && s < end && e > start)
            .map(|(i, _)| i)
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialIds {
    pub pad: u32,
    pub cls: u32,
    pub sep: u32,
    pub mask: u32,
    pub unk: u32,
}

/// Tokenizers the backend can drive: the word-level toy vocabulary and any
/// `tokenizer.json` shipped with a published checkpoint.
#[derive(Clone)]
pub enum TextTokenizer {
    Word(WordTokenizer),
    Hf(Box<HfTokenizer>),
}

impl std::fmt::Debug for TextTokenizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TextTokenizer::Word(w) => write!(f, "WordTokenizer({} tokens)", w.vocab.len()),
            TextTokenizer::Hf(h) => write!(f, "HfTokenizer(mask={})", h.mask_token),
        }
    }
}

impl TextTokenizer {
    pub fn encode(&self, text: &str) -> Result<Encoded> {
        match self {
            TextTokenizer::Word(w) => Ok(w.encode(text)),
            TextTokenizer::Hf(h) => h.encode(text),
        }
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        match self {
            TextTokenizer::Word(w) => w.decode(ids),
            TextTokenizer::Hf(h) => h.inner.decode(ids, true).unwrap_or_default(),
        }
    }

    pub fn mask_token(&self) -> &str {
        match self {
            TextTokenizer::Word(_) => WordTokenizer::MASK,
            TextTokenizer::Hf(h) => &h.mask_token,
        }
    }

    pub fn special_ids(&self) -> SpecialIds {
        match self {
            TextTokenizer::Word(_) => WordTokenizer::SPECIAL_IDS,
            TextTokenizer::Hf(h) => h.special,
        }
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            TextTokenizer::Word(w) => w.vocab.len(),
            TextTokenizer::Hf(h) => h.inner.get_vocab_size(true),
        }
    }

    pub fn token_to_id(&self, token: &str) -> Option<u32> {
        match self {
            TextTokenizer::Word(w) => w.index.get(token).copied(),
            TextTokenizer::Hf(h) => h.inner.token_to_id(token),
        }
    }

    pub fn id_to_token(&self, id: u32) -> Option<String> {
        match self {
            TextTokenizer::Word(w) => w.vocab.get(id as usize).cloned(),
            TextTokenizer::Hf(h) => h.inner.id_to_token(id),
        }
    }

    /// Whether a token id is one of the added special tokens.
    pub fn is_special(&self, id: u32) -> bool {
        let s = self.special_ids();
        [s.pad, s.cls, s.sep, s.mask].contains(&id)
    }
}

/// Lower-casing word-level tokenizer for toy bundles.
///
/// Words are maximal runs of alphanumerics and apostrophes; every other
/// non-space character is its own token. `[MASK]` and the other bracketed
/// specials are recognized verbatim.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WordTokenizer {
    vocab: Vec<String>,
    index: HashMap<String, u32>,
}

impl WordTokenizer {
    pub const SPECIALS: [&'static str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];
    pub const MASK: &'static str = "[MASK]";
    pub const SPECIAL_IDS: SpecialIds = SpecialIds {
        pad: 0,
        unk: 1,
        cls: 2,
        sep: 3,
        mask: 4,
    };

    /// Builds a vocabulary of the five specials followed by `words`
    /// (lower-cased, first occurrence wins).
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut vocab: Vec<String> = Self::SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, u32> = vocab
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i as u32))
            .collect();
        for w in words {
            let w = w.as_ref().to_lowercase();
            if !index.contains_key(&w) {
                index.insert(w.clone(), vocab.len() as u32);
                vocab.push(w);
            }
        }
        Self { vocab, index }
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    /// Splits `text` into `(piece, start, end)` byte spans.
    pub fn pre_tokenize(text: &str) -> Vec<(&str, usize, usize)> {
        let mut out = Vec::new();
        let bytes = text.as_bytes();
        let mut i = 0;
        'outer: while i < text.len() {
            let c = text[i..].chars().next().expect("in-bounds char");
            if c.is_whitespace() {
                i += c.len_utf8();
                continue;
            }
            if bytes[i] == b'[' {
                for sp in Self::SPECIALS {
                    if text[i..].starts_with(sp) {
                        out.push((&text[i..i + sp.len()], i, i + sp.len()));
                        i += sp.len();
                        continue 'outer;
                    }
                }
            }
            if is_word_char(c) {
                let start = i;
                while i < text.len() {
                    let c = text[i..].chars().next().expect("in-bounds char");
                    if !is_word_char(c) {
                        break;
                    }
                    i += c.len_utf8();
                }
                out.push((&text[start..i], start, i));
            } else {
                let len = c.len_utf8();
                out.push((&text[i..i + len], i, i + len));
                i += len;
            }
        }
        out
    }

    pub fn encode(&self, text: &str) -> Encoded {
        let s = Self::SPECIAL_IDS;
        let mut ids = vec![s.cls];
        let mut offsets = vec![(0, 0)];
        let mut special = vec![true];
        for (piece, start, end) in Self::pre_tokenize(text) {
            let id = if Self::SPECIALS.contains(&piece) {
                self.index[piece]
            } else {
                self.index.get(&piece.to_lowercase()).copied().unwrap_or(s.unk)
            };
            ids.push(id);
            offsets.push((start, end));
            special.push(piece == Self::MASK);
        }
        ids.push(s.sep);
        offsets.push((0, 0));
        special.push(true);
        Encoded { ids, offsets, special }
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&id| ![0, 2, 3].contains(&id))
            .filter_map(|&id| self.vocab.get(id as usize).map(String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '\''
}

/// A `tokenizer.json` tokenizer plus the special-token ids the scorers need.
#[derive(Clone)]
pub struct HfTokenizer {
    inner: tokenizers::Tokenizer,
    special: SpecialIds,
    mask_token: String,
}

impl HfTokenizer {
    pub fn from_file(path: &Path) -> Result<Self> {
        let inner = tokenizers::Tokenizer::from_file(path)
            .map_err(|e| Error::Tokenizer(format!("{}: {e}", path.display())))?;
        Self::new(inner)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let inner = tokenizers::Tokenizer::from_bytes(bytes).map_err(|e| Error::Tokenizer(e.to_string()))?;
        Self::new(inner)
    }

    fn new(mut inner: tokenizers::Tokenizer) -> Result<Self> {
        inner.with_truncation(None).map_err(|e| Error::Tokenizer(e.to_string()))?;
        inner.with_padding(None);
        let find = |names: &[&str]| -> Result<(u32, String)> {
            names
                .iter()
                .find_map(|n| inner.token_to_id(n).map(|id| (id, n.to_string())))
                .ok_or_else(|| Error::Tokenizer(format!("tokenizer lacks any of {names:?}")))
        };
        let (pad, _) = find(&["[PAD]", "<pad>"])?;
        let (cls, _) = find(&["[CLS]", "<s>"])?;
        let (sep, _) = find(&["[SEP]", "</s>"])?;
        let (mask, mask_token) = find(&["[MASK]", "<mask>"])?;
        let (unk, _) = find(&["[UNK]", "<unk>"])?;
        Ok(Self {
            inner,
            special: SpecialIds {
                pad,
                cls,
                sep,
                mask,
                unk,
            },
            mask_token,
        })
    }

    fn encode(&self, text: &str) -> Result<Encoded> {
        let enc = self
            .inner
            .encode(text, true)
            .map_err(|e| Error::Tokenizer(e.to_string()))?;
        let ids = enc.get_ids().to_vec();
        let special: Vec<bool> = ids
            .iter()
            .zip(enc.get_special_tokens_mask())
            .map(|(&id, &m)| m == 1 || id == self.special.mask)
            .collect();
        Ok(Encoded {
            ids,
            offsets: enc.get_offsets().to_vec(),
            special,
        })
    }
}
