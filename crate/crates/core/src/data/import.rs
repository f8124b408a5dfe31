//! Converters from the public distributions of each task into the canonical
//! jsonl records.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::{write_jsonl, Example, TaskSpec};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImportFormat {
    /// One JSON object per line, as written by `datasets.Dataset.to_json`.
    HfJsonl,
    /// Tab-separated with a header row (GLUE distribution).
    Tsv,
}

impl std::str::FromStr for ImportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hf-jsonl" | "jsonl" => Ok(Self::HfJsonl),
            "tsv" | "glue-tsv" => Ok(Self::Tsv),
            other => Err(Error::Input(format!("unknown import format `{other}` (hf-jsonl, tsv)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImportSummary {
    pub written: usize,
    /// Rows without a usable gold label (e.g. `-1` in hidden-label splits).
    pub skipped: usize,
}

/// Converts `input` for `task_id` and writes canonical records to `output`.
pub fn import_file(task_id: &str, format: ImportFormat, input: &Path, output: &Path) -> Result<ImportSummary> {
    let spec = TaskSpec::builtin(task_id)?;
    let rows = read_rows(format, input)?;
    let mut out = Vec::with_capacity(rows.len());
    let mut skipped = 0;
    for (i, row) in rows.iter().enumerate() {
        let line = i + 1;
        let ingestion = |message: String| Error::Ingestion {
            path: input.to_path_buf(),
            line,
            message,
        };
        match convert(&spec, row, i).map_err(ingestion)? {
            Some(e) => {
                spec.validate(&e).map_err(ingestion)?;
                out.push(e);
            }
            None => skipped += 1,
        }
    }
    write_jsonl(output, &out)?;
    Ok(ImportSummary {
        written: out.len(),
        skipped,
    })
}

fn read_rows(format: ImportFormat, input: &Path) -> Result<Vec<Map<String, Value>>> {
    let f = std::fs::File::open(input).map_err(|e| Error::io(format!("opening {}", input.display()), e))?;
    let lines: Vec<String> = std::io::BufReader::new(f)
        .lines()
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(format!("reading {}", input.display()), e))?;
    let bad = |line: usize, message: String| Error::Ingestion {
        path: input.to_path_buf(),
        line,
        message,
    };
    match format {
        ImportFormat::HfJsonl => lines
            .iter()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| match serde_json::from_str(l) {
                Ok(Value::Object(m)) => Ok(m),
                Ok(_) => Err(bad(i + 1, "not a JSON object".into())),
                Err(e) => Err(bad(i + 1, e.to_string())),
            })
            .collect(),
        ImportFormat::Tsv => {
            let mut it = lines.iter().enumerate().filter(|(_, l)| !l.trim().is_empty());
            let Some((_, header)) = it.next() else { return Ok(Vec::new()) };
            let cols: Vec<&str> = header.split('\t').collect();
            it.map(|(i, l)| {
                let cells: Vec<&str> = l.split('\t').collect();
                if cells.len() != cols.len() {
                    return Err(bad(i + 1, format!("{} cells, header has {}", cells.len(), cols.len())));
                }
                Ok(cols
                    .iter()
                    .zip(cells)
                    .map(|(c, v)| (c.to_string(), Value::String(v.to_string())))
                    .collect())
            })
            .collect()
        }
    }
}

fn text(row: &Map<String, Value>, keys: &[&str]) -> std::result::Result<String, String> {
    keys.iter()
        .find_map(|k| row.get(*k).and_then(Value::as_str))
        .map(str::to_string)
        .ok_or_else(|| format!("none of {keys:?} present"))
}

/// Integer label from a number, a numeric string or a boolean; `None` for
/// negative (unlabelled) rows.
fn int_label(row: &Map<String, Value>, keys: &[&str]) -> std::result::Result<Option<usize>, String> {
    let v = keys
        .iter()
        .find_map(|k| row.get(*k))
        .ok_or_else(|| format!("none of {keys:?} present"))?;
    let n: i64 = match v {
        Value::Number(n) => n.as_i64().ok_or_else(|| format!("label {n} is not an integer"))?,
        Value::Bool(b) => *b as i64,
        Value::String(s) => match s.trim() {
            "" | "-" => -1,
            "true" | "True" => 1,
            "false" | "False" => 0,
            t => t.parse().map_err(|_| format!("label `{t}` is not an integer"))?,
        },
        Value::Null => -1,
        other => return Err(format!("unusable label {other}")),
    };
    Ok((n >= 0).then_some(n as usize))
}

/// Label named in the label space, or given by index into it.
fn class_label(spec: &TaskSpec, row: &Map<String, Value>, keys: &[&str]) -> std::result::Result<Option<String>, String> {
    let space = spec.label_space.as_deref().unwrap_or_default();
    if let Some(s) = keys.iter().find_map(|k| row.get(*k).and_then(Value::as_str)) {
        if space.iter().any(|l| l == s) {
            return Ok(Some(s.to_string()));
        }
        if s == "-" || s.is_empty() {
            return Ok(None);
        }
    }
    match int_label(row, keys)? {
        None => Ok(None),
        Some(i) => space
            .get(i)
            .cloned()
            .map(Some)
            .ok_or_else(|| format!("label {i} outside label space {space:?}")),
    }
}

fn row_id(row: &Map<String, Value>, index: usize) -> String {
    ["id", "idx", "guid", "InputStoryid", "ind"]
        .iter()
        .find_map(|k| match row.get(*k) {
            Some(Value::String(s)) => Some(s.clone()),
            Some(Value::Number(n)) => Some(n.to_string()),
            _ => None,
        })
        .unwrap_or_else(|| index.to_string())
}

fn convert(spec: &TaskSpec, row: &Map<String, Value>, index: usize) -> std::result::Result<Option<Example>, String> {
    let id = row_id(row, index);
    let mut fields = BTreeMap::new();
    let mut options = None;
    let label: Option<String> = match spec.task_id.as_str() {
        "sst2" | "sst5" | "mr" | "agnews" => {
            fields.insert("sentence".into(), text(row, &["sentence", "text"])?);
            class_label(spec, row, &["label"])?
        }
        "mnli" | "snli" | "rte" => {
            fields.insert("premise".into(), text(row, &["premise", "sentence1"])?);
            fields.insert("hypothesis".into(), text(row, &["hypothesis", "sentence2"])?);
            class_label(spec, row, &["label", "gold_label"])?
        }
        "qnli" => {
            fields.insert("premise".into(), text(row, &["question", "premise"])?);
            fields.insert("hypothesis".into(), text(row, &["sentence", "hypothesis"])?);
            class_label(spec, row, &["label"])?
        }
        "boolq" => {
            fields.insert("passage".into(), text(row, &["passage"])?);
            fields.insert("question".into(), text(row, &["question"])?);
            class_label(spec, row, &["label", "answer"])?
        }
        "copa" => {
            fields.insert("premise".into(), text(row, &["premise"])?);
            fields.insert("question".into(), text(row, &["question"])?);
            options = Some(vec![text(row, &["choice1"])?, text(row, &["choice2"])?]);
            int_label(row, &["label"])?.map(|i| i.to_string())
        }
        "storycloze" => {
            for i in 1..=4 {
                fields.insert(format!("sentence{i}"), text(row, &[&format!("input_sentence_{i}"), &format!("InputSentence{i}")])?);
            }
            options = Some(vec![
                text(row, &["sentence_quiz1", "RandomFifthSentenceQuiz1"])?,
                text(row, &["sentence_quiz2", "RandomFifthSentenceQuiz2"])?,
            ]);
            // Published files number the right ending from 1.
            int_label(row, &["answer_right_ending", "AnswerRightEnding"])?
                .map(|i| i.checked_sub(1).ok_or("answer_right_ending must be 1 or 2"))
                .transpose()?
                .map(|i| i.to_string())
        }
        "hellaswag" => {
            fields.insert("context".into(), text(row, &["ctx"])?);
            let endings = row
                .get("endings")
                .and_then(Value::as_array)
                .ok_or("missing `endings`")?
                .iter()
                .map(|e| e.as_str().map(str::to_string).ok_or("non-string ending"))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            options = Some(endings);
            int_label(row, &["label"])?.map(|i| i.to_string())
        }
        "piqa" => {
            fields.insert("sentence".into(), text(row, &["goal"])?);
            options = Some(vec![text(row, &["sol1"])?, text(row, &["sol2"])?]);
            int_label(row, &["label"])?.map(|i| i.to_string())
        }
        other => return Err(format!("no importer for `{other}`")),
    };
    Ok(label.map(|label| Example {
        id,
        fields,
        options,
        label: Some(label),
    }))
}
