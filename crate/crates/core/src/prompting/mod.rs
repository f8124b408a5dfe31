//! Templates, verbalizers and rendering of (input, option) pairs into token
//! sequences with a tracked option span.

mod registry;

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

pub use registry::{load_registry, Registry, DEFAULT_REGISTRY};

use crate::backend::TextTokenizer;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateMode {
    SingleToken,
    MultiToken,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Segment {
    Text(String),
    Field(String),
    /// Picks a literal by the value of `field`.
    Switch {
        field: String,
        cases: Vec<(String, String)>,
    },
    /// The option / mask slot.
    Slot,
    /// The n-th (0-based) option of the example, verbatim.
    OptionRef(usize),
    /// Suppresses the space between its neighbours.
    Glue,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Template {
    pub task_id: String,
    pub pattern: Vec<Segment>,
    pub mode: TemplateMode,
    /// Field shortened (from its left end) when a rendering is too long.
    pub truncate_field: Option<String>,
}

impl Template {
    pub fn new(task_id: impl Into<String>, pattern: Vec<Segment>, mode: TemplateMode) -> Result<Self> {
        let t = Self {
            task_id: task_id.into(),
            pattern,
            mode,
            truncate_field: None,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let slots = self.pattern.iter().filter(|s| matches!(s, Segment::Slot)).count();
        if slots != 1 {
            return Err(Error::Registry(format!(
                "template for `{}` has {slots} option slots, expected exactly one",
                self.task_id
            )));
        }
        Ok(())
    }

    pub fn field_names(&self) -> Vec<&str> {
        self.pattern
            .iter()
            .filter_map(|s| match s {
                Segment::Field(f) | Segment::Switch { field: f, .. } => Some(f.as_str()),
                _ => None,
            })
            .collect()
    }

    fn truncatable(&self) -> Option<&str> {
        self.truncate_field.as_deref().or_else(|| {
            self.pattern.iter().find_map(|s| match s {
                Segment::Field(f) => Some(f.as_str()),
                _ => None,
            })
        })
    }
}

/// Maps labels to the words (or, for multiple choice, the options) that fill
/// the slot. Label order is the tie-break order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verbalizer {
    Words { labels: Vec<String>, words: Vec<String> },
    /// Multiple choice: each option text is its own label.
    Identity,
}

impl Verbalizer {
    pub fn words<L, W>(pairs: impl IntoIterator<Item = (L, W)>) -> Result<Self>
    where
        L: Into<String>,
        W: Into<String>,
    {
        let (labels, words): (Vec<String>, Vec<String>) =
            pairs.into_iter().map(|(l, w)| (l.into(), w.into())).unzip();
        let v = Verbalizer::Words { labels, words };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        if let Verbalizer::Words { labels, words } = self {
            if labels.is_empty() {
                return Err(Error::Verbalizer("empty label space".into()));
            }
            for (i, l) in labels.iter().enumerate() {
                if labels[..i].contains(l) {
                    return Err(Error::Verbalizer(format!("duplicate label `{l}`")));
                }
            }
            for (i, w) in words.iter().enumerate() {
                if words[..i].contains(w) {
                    return Err(Error::Verbalizer(format!("word `{w}` is mapped from two labels")));
                }
            }
        }
        Ok(())
    }

    pub fn label_space(&self) -> Option<&[String]> {
        match self {
            Verbalizer::Words { labels, .. } => Some(labels),
            Verbalizer::Identity => None,
        }
    }

    pub fn label_index(&self, label: &str) -> Result<usize> {
        match self {
            Verbalizer::Words { labels, .. } => labels
                .iter()
                .position(|l| l == label)
                .ok_or_else(|| Error::Data(format!("label `{label}` not in label space {labels:?}"))),
            Verbalizer::Identity => label
                .parse()
                .map_err(|_| Error::Data(format!("`{label}` is not an option index"))),
        }
    }

    pub fn word<'a>(&'a self, label: &'a str) -> Result<&'a str> {
        match self {
            Verbalizer::Words { words, .. } => Ok(&words[self.label_index(label)?]),
            Verbalizer::Identity => Ok(label),
        }
    }

    /// `(label, slot text)` pairs in tie-break order. Multiple-choice options
    /// are labelled by their index.
    pub fn candidates(&self, options: Option<&[String]>) -> Result<Vec<(String, String)>> {
        match (self, options) {
            (Verbalizer::Words { labels, words }, _) => {
                Ok(labels.iter().cloned().zip(words.iter().cloned()).collect())
            }
            (Verbalizer::Identity, Some(opts)) if !opts.is_empty() => {
                Ok(opts.iter().enumerate().map(|(i, o)| (i.to_string(), o.clone())).collect())
            }
            (Verbalizer::Identity, _) => Err(Error::Input("multiple-choice example without options".into())),
        }
    }
}

/// A registry entry: a template with its verbalizer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub id: String,
    pub template: Template,
    pub verbalizer: Verbalizer,
    pub fields: Vec<String>,
}

impl Prompt {
    /// The dataset this prompt applies to (`mnli@t2` -> `mnli`).
    pub fn task_id(&self) -> &str {
        self.id.split('@').next().unwrap_or(&self.id)
    }

    pub fn is_multiple_choice(&self) -> bool {
        matches!(self.verbalizer, Verbalizer::Identity)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub text: String,
    pub token_ids: Vec<u32>,
    /// Tokens of the filled option (discriminative rendering).
    pub option_span: Option<Range<usize>>,
    /// Position of the mask token (masked-LM rendering).
    pub mask_position: Option<usize>,
    pub cls_position: usize,
}

impl RenderedPrompt {
    pub fn option_tokens(&self) -> &[u32] {
        match &self.option_span {
            Some(r) => &self.token_ids[r.clone()],
            None => &[],
        }
    }

    /// Whether the option span is exactly one token.
    pub fn is_single_token(&self) -> bool {
        self.option_span.as_ref().is_some_and(|r| r.len() == 1)
    }
}

/// Everything a template may read from one example.
#[derive(Clone, Copy, Debug)]
pub struct RenderInput<'a> {
    pub fields: &'a BTreeMap<String, String>,
    pub options: Option<&'a [String]>,
}

impl<'a> RenderInput<'a> {
    pub fn fields(fields: &'a BTreeMap<String, String>) -> Self {
        Self { fields, options: None }
    }
}

/// Fills the slot with the verbalizer's word for `label` (or, for identity
/// verbalizers, with the option text `label`).
pub fn render_discriminative(
    tokenizer: &TextTokenizer,
    template: &Template,
    verbalizer: &Verbalizer,
    input: RenderInput<'_>,
    label: &str,
    max_len: usize,
) -> Result<RenderedPrompt> {
    let word = verbalizer.word(label)?;
    let rendered = render_option(tokenizer, template, input, word, max_len)?;
    if template.mode == TemplateMode::SingleToken {
        check_single_token(tokenizer, &rendered, word)?;
    }
    Ok(rendered)
}

fn check_single_token(tokenizer: &TextTokenizer, rendered: &RenderedPrompt, word: &str) -> Result<()> {
    let toks = rendered.option_tokens();
    if toks.len() != 1 || toks[0] == tokenizer.special_ids().unk {
        return Err(Error::Verbalizer(format!(
            "`{word}` is {} token(s) under this tokenizer; single-token templates need exactly one known token",
            toks.len()
        )));
    }
    Ok(())
}

/// Fills the slot with `option` and tracks its tokens, without the
/// single-token check.
pub fn render_option(
    tokenizer: &TextTokenizer,
    template: &Template,
    input: RenderInput<'_>,
    option: &str,
    max_len: usize,
) -> Result<RenderedPrompt> {
    if option.trim().is_empty() {
        return Err(Error::Render(format!("empty option for `{}`", template.task_id)));
    }
    render_fitted(tokenizer, template, input, option, max_len, |enc, slot| {
        let toks = enc.tokens_in(slot.start, slot.end);
        let (Some(&first), Some(&last)) = (toks.first(), toks.last()) else {
            return Err(Error::Render(format!("option `{option}` produced no tokens")));
        };
        if last + 1 - first != toks.len() {
            return Err(Error::Render(format!("option `{option}` tokens are not contiguous")));
        }
        Ok((Some(first..last + 1), None))
    })
}

/// Puts the tokenizer's mask token in the slot.
pub fn render_mlm(
    tokenizer: &TextTokenizer,
    template: &Template,
    input: RenderInput<'_>,
    max_len: usize,
) -> Result<RenderedPrompt> {
    if template.mode != TemplateMode::SingleToken {
        return Err(Error::Mode(format!(
            "`{}` is a multi-token template; masked-LM rendering needs a single-token template",
            template.task_id
        )));
    }
    let mask = tokenizer.mask_token().to_string();
    let mask_id = tokenizer.special_ids().mask;
    render_fitted(tokenizer, template, input, &mask, max_len, |enc, slot| {
        let toks = enc.tokens_in(slot.start, slot.end);
        match toks.as_slice() {
            [p] if enc.ids[*p] == mask_id => Ok((None, Some(*p))),
            _ => Err(Error::Render("mask token did not survive tokenization".into())),
        }
    })
}

fn render_fitted(
    tokenizer: &TextTokenizer,
    template: &Template,
    input: RenderInput<'_>,
    slot_text: &str,
    max_len: usize,
    locate: impl Fn(&crate::backend::Encoded, Range<usize>) -> Result<(Option<Range<usize>>, Option<usize>)>,
) -> Result<RenderedPrompt> {
    let attempt = |fields: &BTreeMap<String, String>| -> Result<RenderedPrompt> {
        let (text, slot) = compose(template, fields, input.options, slot_text)?;
        let enc = tokenizer.encode(&text)?;
        let (option_span, mask_position) = locate(&enc, slot)?;
        Ok(RenderedPrompt {
            text,
            token_ids: enc.ids,
            option_span,
            mask_position,
            cls_position: 0,
        })
    };
    let full = attempt(input.fields)?;
    if full.token_ids.len() <= max_len {
        return Ok(full);
    }
    // Drop whole words from the start of the truncatable field until it fits.
    let field = template
        .truncatable()
        .ok_or_else(|| Error::Length {
            len: full.token_ids.len(),
            max: max_len,
        })?
        .to_string();
    let value = input.fields.get(&field).cloned().unwrap_or_default();
    let words: Vec<&str> = value.split_whitespace().collect();
    let with_dropped = |k: usize| -> Result<RenderedPrompt> {
        let mut fields = input.fields.clone();
        fields.insert(field.clone(), words[k..].join(" "));
        attempt(&fields)
    };
    let last = with_dropped(words.len())?;
    if last.token_ids.len() > max_len {
        return Err(Error::Length {
            len: last.token_ids.len(),
            max: max_len,
        });
    }
    // Invariant: dropping `lo` words is too long, dropping `hi` words fits.
    let (mut lo, mut hi, mut best) = (0usize, words.len(), last);
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        let r = with_dropped(mid)?;
        if r.token_ids.len() <= max_len {
            hi = mid;
            best = r;
        } else {
            lo = mid;
        }
    }
    Ok(best)
}

fn starts_with_punct(s: &str) -> bool {
    s.chars().next().is_some_and(|c| c.is_ascii_punctuation())
}

/// Joins the template into text; returns the text and the slot's byte range.
fn compose(
    template: &Template,
    fields: &BTreeMap<String, String>,
    options: Option<&[String]>,
    slot_text: &str,
) -> Result<(String, Range<usize>)> {
    #[derive(PartialEq)]
    enum Kind {
        Literal,
        Field,
        Other,
    }
    let field = |name: &str| -> Result<&str> {
        fields
            .get(name)
            .map(|s| s.trim())
            .ok_or_else(|| Error::Render(format!("missing field `{name}` for `{}`", template.task_id)))
    };
    let mut text = String::new();
    let mut slot = None;
    let mut prev: Option<Kind> = None;
    let mut glue = false;
    for seg in &template.pattern {
        let (piece, kind): (&str, Kind) = match seg {
            Segment::Glue => {
                glue = true;
                continue;
            }
            Segment::Text(t) => (t.as_str(), Kind::Literal),
            Segment::Field(f) => (field(f)?, Kind::Field),
            Segment::Switch { field: f, cases } => {
                let v = field(f)?;
                let hit = cases.iter().find(|(k, _)| k == v).ok_or_else(|| {
                    Error::Render(format!("field `{f}` value `{v}` matches no case of {cases:?}"))
                })?;
                (hit.1.as_str(), Kind::Other)
            }
            Segment::Slot => (slot_text, Kind::Other),
            Segment::OptionRef(i) => {
                let opts = options.ok_or_else(|| Error::Render("template references options the example lacks".into()))?;
                let o = opts
                    .get(*i)
                    .ok_or_else(|| Error::Render(format!("template references option {} of {}", i + 1, opts.len())))?;
                (o.as_str(), Kind::Other)
            }
        };
        let is_slot = matches!(seg, Segment::Slot);
        if piece.is_empty() && !is_slot {
            glue = false;
            continue;
        }
        let attach = glue || (kind == Kind::Literal && prev == Some(Kind::Field) && starts_with_punct(piece));
        if prev.is_some() && !attach {
            text.push(' ');
        }
        if is_slot {
            slot = Some(text.len()..text.len() + piece.len());
        }
        text.push_str(piece);
        prev = Some(kind);
        glue = false;
    }
    let slot = slot.ok_or_else(|| Error::Render("template has no slot".into()))?;
    Ok((text, slot))
}

/// Checks that every verbalizer word fills a single-token template with
/// exactly one known token.
pub fn validate_verbalizer(tokenizer: &TextTokenizer, prompt: &Prompt) -> Result<()> {
    if prompt.template.mode != TemplateMode::SingleToken {
        return Ok(());
    }
    let fields: BTreeMap<String, String> = prompt
        .template
        .field_names()
        .into_iter()
        .map(|f| (f.to_string(), "it".to_string()))
        .collect();
    let Verbalizer::Words { labels, .. } = &prompt.verbalizer else {
        return Err(Error::Verbalizer(format!("`{}` is single-token but has no label words", prompt.id)));
    };
    for label in labels {
        let word = prompt.verbalizer.word(label)?;
        let r = render_option(tokenizer, &prompt.template, RenderInput::fields(&fields), word, usize::MAX)?;
        check_single_token(tokenizer, &r, word)?;
    }
    Ok(())
}

/// Plain input for standard fine-tuning: the example's fields joined by spaces.
pub fn render_plain(
    tokenizer: &TextTokenizer,
    field_order: &[String],
    fields: &BTreeMap<String, String>,
    max_len: usize,
) -> Result<RenderedPrompt> {
    let text = field_order
        .iter()
        .map(|f| {
            fields
                .get(f)
                .map(|s| s.trim())
                .ok_or_else(|| Error::Render(format!("missing field `{f}`")))
        })
        .collect::<Result<Vec<_>>>()?
        .join(" ");
    let mut enc = tokenizer.encode(&text)?;
    if enc.ids.len() > max_len {
        // Keep [CLS] and the tail; the final [SEP] stays last.
        let sep = *enc.ids.last().expect("non-empty encoding");
        let keep = max_len.saturating_sub(2);
        let tail: Vec<u32> = enc.ids[1..enc.ids.len() - 1].iter().rev().take(keep).rev().copied().collect();
        enc.ids = std::iter::once(enc.ids[0]).chain(tail).chain(std::iter::once(sep)).collect();
    }
    Ok(RenderedPrompt {
        text,
        token_ids: enc.ids,
        option_span: None,
        mask_position: None,
        cls_position: 0,
    })
}
