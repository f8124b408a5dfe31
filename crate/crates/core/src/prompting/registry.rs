use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Prompt, Segment, Template, TemplateMode, Verbalizer};
use crate::error::{Error, Result};

/// The shipped registry; its grammar is documented at the top of the file.
pub const DEFAULT_REGISTRY: &str = include_str!("default_registry.txt");

/// Prompts keyed by id, plus a content hash recorded in run reports.
#[derive(Clone, Debug)]
pub struct Registry {
    entries: BTreeMap<String, Prompt>,
    version: String,
}

impl Registry {
    pub fn default_registry() -> Self {
        Self::parse(DEFAULT_REGISTRY).expect("shipped registry parses")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let entries = Parser::new(text).parse()?;
        let digest = Sha256::digest(text.as_bytes());
        Ok(Self {
            entries,
            version: hex::encode(&digest[..6]),
        })
    }

    pub fn get(&self, id: &str) -> Result<&Prompt> {
        self.entries.get(id).ok_or_else(|| {
            Error::Registry(format!(
                "unknown task `{id}`; known tasks: {}",
                self.ids().collect::<Vec<_>>().join(", ")
            ))
        })
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn iter(&self) -> impl Iterator<Item = &Prompt> {
        self.entries.values()
    }
}

pub fn load_registry(path: &Path) -> Result<Registry> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Registry::parse(&text)
}

#[derive(Default, Clone)]
struct Draft {
    kind: Option<TemplateMode>,
    fields: Option<Vec<String>>,
    truncate: Option<String>,
    template: Option<Vec<Segment>>,
    labels: Option<Vec<(String, String)>>,
}

struct Parser<'a> {
    lines: Vec<(usize, &'a str)>,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn new(text: &'a str) -> Self {
        let lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, strip_comment(l).trim()))
            .filter(|(_, l)| !l.is_empty())
            .collect();
        Self { lines, pos: 0 }
    }

    fn next(&mut self) -> Option<(usize, &'a str)> {
        let l = self.lines.get(self.pos).copied();
        self.pos += 1;
        l
    }

    fn parse(mut self) -> Result<BTreeMap<String, Prompt>> {
        let mut drafts: BTreeMap<String, Draft> = BTreeMap::new();
        let mut out = BTreeMap::new();
        while let Some((line, text)) = self.next() {
            let header = text
                .strip_prefix("task ")
                .and_then(|r| r.strip_suffix('{'))
                .map(str::trim)
                .filter(|id| !id.is_empty() && !id.contains(char::is_whitespace))
                .ok_or_else(|| err(line, "expected `task <id> {`"))?;
            if drafts.contains_key(header) {
                return Err(Error::Registry(format!("duplicate task id `{header}` (line {line})")));
            }
            let draft = self.block(&drafts)?;
            let prompt = finish(header, &draft, line)?;
            drafts.insert(header.to_string(), draft);
            out.insert(header.to_string(), prompt);
        }
        Ok(out)
    }

    fn block(&mut self, known: &BTreeMap<String, Draft>) -> Result<Draft> {
        let mut d = Draft::default();
        loop {
            let (line, text) = self.next().ok_or_else(|| err(usize::MAX, "unterminated task block"))?;
            if text == "}" {
                return Ok(d);
            }
            if text.starts_with("labels") {
                if text.trim_start_matches("labels").trim() != "{" {
                    return Err(err(line, "expected `labels {`"));
                }
                d.labels = Some(self.labels()?);
                continue;
            }
            let (key, value) = text
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| err(line, "expected `key = value`"))?;
            match key {
                "base" => {
                    let base = known
                        .get(value)
                        .ok_or_else(|| err(line, &format!("base `{value}` is not defined earlier")))?;
                    d = base.clone();
                }
                "kind" => {
                    d.kind = Some(match value {
                        "single_token" => TemplateMode::SingleToken,
                        "multiple_choice" => TemplateMode::MultiToken,
                        other => return Err(err(line, &format!("unknown kind `{other}`"))),
                    })
                }
                "fields" => {
                    d.fields = Some(
                        value
                            .split(',')
                            .map(|f| f.trim().to_string())
                            .filter(|f| !f.is_empty())
                            .collect(),
                    )
                }
                "truncate" => d.truncate = Some(value.to_string()),
                "template" => d.template = Some(parse_template(value).map_err(|m| err(line, &m))?),
                other => return Err(err(line, &format!("unknown key `{other}`"))),
            }
        }
    }

    fn labels(&mut self) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        loop {
            let (line, text) = self.next().ok_or_else(|| err(usize::MAX, "unterminated labels block"))?;
            if text == "}" {
                return Ok(out);
            }
            let (label, word) = text
                .split_once('=')
                .map(|(k, v)| (k.trim(), unquote(v.trim())))
                .filter(|(k, v)| !k.is_empty() && !v.is_empty())
                .ok_or_else(|| err(line, "expected `label = word`"))?;
            out.push((label.to_string(), word));
        }
    }
}

fn finish(id: &str, d: &Draft, line: usize) -> Result<Prompt> {
    let missing = |what: &str| err(line, &format!("task `{id}` lacks `{what}`"));
    let mode = d.kind.ok_or_else(|| missing("kind"))?;
    let pattern = d.template.clone().ok_or_else(|| missing("template"))?;
    let fields = d.fields.clone().ok_or_else(|| missing("fields"))?;
    let verbalizer = match (mode, &d.labels) {
        (TemplateMode::SingleToken, Some(labels)) => {
            Verbalizer::words(labels.iter().cloned()).map_err(|e| err(line, &e.to_string()))?
        }
        (TemplateMode::SingleToken, None) => return Err(missing("labels")),
        (TemplateMode::MultiToken, None) => Verbalizer::Identity,
        (TemplateMode::MultiToken, Some(_)) => {
            return Err(err(line, "multiple_choice tasks take their options from the data, not `labels`"))
        }
    };
    let template = Template {
        task_id: id.to_string(),
        pattern,
        mode,
        truncate_field: d.truncate.clone(),
    };
    template.validate().map_err(|e| err(line, &e.to_string()))?;
    for f in template.field_names() {
        if !fields.iter().any(|x| x == f) {
            return Err(err(line, &format!("template uses undeclared field `{f}`")));
        }
    }
    if let Some(t) = &template.truncate_field {
        if !fields.contains(t) {
            return Err(err(line, &format!("truncate names undeclared field `{t}`")));
        }
    }
    Ok(Prompt {
        id: id.to_string(),
        template,
        verbalizer,
        fields,
    })
}

fn err(line: usize, message: &str) -> Error {
    Error::Parse {
        line,
        message: message.to_string(),
    }
}

fn strip_comment(line: &str) -> &str {
    // `#` inside a quoted literal is text.
    let mut in_quote = false;
    let mut escaped = false;
    for (i, c) in line.char_indices() {
        match c {
            '\\' if in_quote && !escaped => {
                escaped = true;
                continue;
            }
            '"' if !escaped => in_quote = !in_quote,
            '#' if !in_quote => return &line[..i],
            _ => {}
        }
        escaped = false;
    }
    line
}

fn unquote(s: &str) -> String {
    s.strip_prefix('"')
        .and_then(|r| r.strip_suffix('"'))
        .map(|r| r.replace("\\\"", "\"").replace("\\\\", "\\"))
        .unwrap_or_else(|| s.to_string())
}

fn parse_template(src: &str) -> std::result::Result<Vec<Segment>, String> {
    let mut out = Vec::new();
    let mut chars = src.char_indices().peekable();
    while let Some(&(i, c)) = chars.peek() {
        match c {
            c if c.is_whitespace() => {
                chars.next();
            }
            '+' => {
                chars.next();
                out.push(Segment::Glue);
            }
            '"' => {
                chars.next();
                let mut lit = String::new();
                let mut closed = false;
                while let Some((_, c)) = chars.next() {
                    match c {
                        '\\' => match chars.next() {
                            Some((_, e)) => lit.push(e),
                            None => break,
                        },
                        '"' => {
                            closed = true;
                            break;
                        }
                        c => lit.push(c),
                    }
                }
                if !closed {
                    return Err(format!("unterminated literal starting at column {}", i + 1));
                }
                out.push(Segment::Text(lit));
            }
            '{' => {
                let end = src[i..].find('}').ok_or_else(|| format!("unclosed `{{` at column {}", i + 1))? + i;
                let body = &src[i + 1..end];
                out.push(parse_field(body)?);
                while chars.peek().is_some_and(|&(j, _)| j <= end) {
                    chars.next();
                }
            }
            '[' => {
                let end = src[i..].find(']').ok_or_else(|| format!("unclosed `[` at column {}", i + 1))? + i;
                let body = &src[i + 1..end];
                out.push(match body {
                    "MASK" | "OPTION" => Segment::Slot,
                    b => match b.strip_prefix("OPTION_").and_then(|n| n.parse::<usize>().ok()) {
                        Some(n) if n >= 1 => Segment::OptionRef(n - 1),
                        _ => return Err(format!("unknown slot `[{body}]`")),
                    },
                });
                while chars.peek().is_some_and(|&(j, _)| j <= end) {
                    chars.next();
                }
            }
            other => return Err(format!("unexpected `{other}` at column {}", i + 1)),
        }
    }
    if out.first() == Some(&Segment::Glue) || out.last() == Some(&Segment::Glue) {
        return Err("`+` must sit between two segments".into());
    }
    Ok(out)
}

fn parse_field(body: &str) -> std::result::Result<Segment, String> {
    let mut parts = body.split('|');
    let name = parts.next().unwrap_or("").trim();
    if name.is_empty() {
        return Err("empty field name".into());
    }
    let cases: Vec<(String, String)> = parts
        .map(|p| {
            p.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| format!("case `{p}` in field `{name}` is not `value=text`"))
        })
        .collect::<std::result::Result<_, _>>()?;
    Ok(if cases.is_empty() {
        Segment::Field(name.to_string())
    } else {
        Segment::Switch {
            field: name.to_string(),
            cases,
        }
    })
}
