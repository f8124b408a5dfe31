//! Task specs, jsonl ingestion, seeded few-shot sampling and corpus sampling.

mod corpus;
mod import;
mod sample;

use std::collections::{BTreeMap, HashSet};
use std::io::BufRead;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

pub use corpus::{corpus_sample, corpus_sample_from_lines, find_whole_word, CorpusItem, CorpusSample};
pub use import::{import_file, ImportFormat, ImportSummary};
pub use sample::{sample_fewshot, sample_or_full, FewShotSplit, Shots, DEFAULT_SEEDS};

use crate::error::{Error, Result};
use crate::prompting::{Registry, TemplateMode};

/// One labelled instance. Multiple-choice examples carry their options and
/// use the option index (as a decimal string) as label.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub fields: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<String>>,
    pub label: Option<String>,
}

impl Example {
    pub fn new(id: impl Into<String>, fields: &[(&str, &str)], label: Option<&str>) -> Self {
        Self {
            id: id.into(),
            fields: fields.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
            options: None,
            label: label.map(str::to_string),
        }
    }

    pub fn with_options(mut self, options: &[&str]) -> Self {
        self.options = Some(options.iter().map(|s| s.to_string()).collect());
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    SingleToken,
    MultipleChoice,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub kind: TaskKind,
    pub fields: Vec<String>,
    /// Fixed labels of single-token tasks.
    pub label_space: Option<Vec<String>>,
    /// Options per example of multiple-choice tasks, when fixed.
    pub options_per_example: Option<usize>,
    pub train_split: String,
    pub eval_split: String,
}

impl TaskSpec {
    /// Spec derived from the base (unsuffixed) registry entry of `task_id`.
    pub fn from_registry(registry: &Registry, task_id: &str) -> Result<Self> {
        let base = task_id.split('@').next().unwrap_or(task_id);
        let p = registry.get(base)?;
        let kind = match p.template.mode {
            TemplateMode::SingleToken => TaskKind::SingleToken,
            TemplateMode::MultiToken => TaskKind::MultipleChoice,
        };
        let options_per_example = match base {
            "copa" | "storycloze" | "piqa" => Some(2),
            "hellaswag" => Some(4),
            _ => None,
        };
        Ok(Self {
            task_id: base.to_string(),
            kind,
            fields: p.fields.clone(),
            label_space: p.verbalizer.label_space().map(<[String]>::to_vec),
            options_per_example,
            train_split: "train".into(),
            eval_split: "validation".into(),
        })
    }

    pub fn builtin(task_id: &str) -> Result<Self> {
        Self::from_registry(&Registry::default_registry(), task_id)
    }

    pub fn split_path(&self, data_root: &Path, split: &str) -> PathBuf {
        data_root.join(&self.task_id).join(format!("{split}.jsonl"))
    }

    /// Checks one example against this task definition.
    pub fn validate(&self, e: &Example) -> std::result::Result<(), String> {
        if let Some(missing) = self.fields.iter().find(|f| !e.fields.contains_key(*f)) {
            return Err(format!("missing field `{missing}`"));
        }
        match self.kind {
            TaskKind::SingleToken => {
                let space = self.label_space.as_deref().unwrap_or_default();
                match &e.label {
                    Some(l) if !space.contains(l) => return Err(format!("label `{l}` not in label space {space:?}")),
                    _ => {}
                }
                if e.options.is_some() {
                    return Err("single-token task example has options".into());
                }
            }
            TaskKind::MultipleChoice => {
                let opts = e.options.as_ref().ok_or("multiple-choice example lacks `options`")?;
                if opts.len() < 2 {
                    return Err(format!("{} option(s); need at least 2", opts.len()));
                }
                if let Some(n) = self.options_per_example {
                    if opts.len() != n {
                        return Err(format!("{} options; `{}` has {n}", opts.len(), self.task_id));
                    }
                }
                if opts.iter().any(|o| o.trim().is_empty()) {
                    return Err("empty option".into());
                }
                if let Some(l) = &e.label {
                    match l.parse::<usize>() {
                        Ok(i) if i < opts.len() => {}
                        _ => return Err(format!("label `{l}` is not an option index below {}", opts.len())),
                    }
                }
            }
        }
        Ok(())
    }

    /// Examples per label (single-token) in label-space order.
    pub fn label_counts(&self, examples: &[Example]) -> Vec<(String, usize)> {
        self.label_space
            .as_deref()
            .unwrap_or_default()
            .iter()
            .map(|l| (l.clone(), examples.iter().filter(|e| e.label.as_ref() == Some(l)).count()))
            .collect()
    }
}

/// A problem with one input line.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineError {
    pub line: usize,
    pub example_id: Option<String>,
    pub message: String,
}

/// Result of reading one split: every non-blank line lands in exactly one of
/// `examples` or `errors`.
#[derive(Clone, Debug, Default)]
pub struct LoadedSplit {
    pub path: PathBuf,
    pub examples: Vec<Example>,
    pub errors: Vec<LineError>,
    pub lines: usize,
}

impl LoadedSplit {
    pub fn into_result(self) -> Result<Vec<Example>> {
        match self.errors.first() {
            None => Ok(self.examples),
            Some(e) => Err(Error::Ingestion {
                path: self.path,
                line: e.line,
                message: match &e.example_id {
                    Some(id) => format!("example `{id}`: {}", e.message),
                    None => e.message.clone(),
                },
            }),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TaskData {
    pub spec: TaskSpec,
    pub train: Vec<Example>,
    pub eval: Vec<Example>,
}

/// Reads `<data_root>/<task>/<train|validation>.jsonl`, failing on the first
/// bad line.
pub fn load_task(task_id: &str, data_root: &Path) -> Result<TaskData> {
    let spec = TaskSpec::builtin(task_id)?;
    load_task_with(spec, data_root)
}

pub fn load_task_with(spec: TaskSpec, data_root: &Path) -> Result<TaskData> {
    let train = load_split(&spec, &spec.split_path(data_root, &spec.train_split))?.into_result()?;
    let eval = load_split(&spec, &spec.split_path(data_root, &spec.eval_split))?.into_result()?;
    Ok(TaskData { spec, train, eval })
}

/// Reads one split, collecting per-line errors instead of stopping.
pub fn load_split(spec: &TaskSpec, path: &Path) -> Result<LoadedSplit> {
    let file = std::fs::File::open(path).map_err(|e| Error::Ingestion {
        path: path.to_path_buf(),
        line: 0,
        message: format!("cannot open: {e}"),
    })?;
    let mut out = LoadedSplit {
        path: path.to_path_buf(),
        ..Default::default()
    };
    let mut seen = HashSet::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.lines += 1;
        let n = i + 1;
        match parse_record(spec, &line) {
            Ok(e) if !seen.insert(e.id.clone()) => out.errors.push(LineError {
                line: n,
                example_id: Some(e.id),
                message: "duplicate example id".into(),
            }),
            Ok(e) => out.examples.push(e),
            Err((example_id, message)) => out.errors.push(LineError {
                line: n,
                example_id,
                message,
            }),
        }
    }
    Ok(out)
}

fn parse_record(spec: &TaskSpec, line: &str) -> std::result::Result<Example, (Option<String>, String)> {
    let v: Value = serde_json::from_str(line).map_err(|e| (None, format!("invalid JSON: {e}")))?;
    let id = match v.get("id") {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        _ => return Err((None, "missing `id`".into())),
    };
    let fail = |m: String| (Some(id.clone()), m);
    let fields = match v.get("fields") {
        Some(Value::Object(m)) => m
            .iter()
            .map(|(k, v)| match v {
                Value::String(s) => Ok((k.clone(), s.clone())),
                _ => Err(fail(format!("field `{k}` is not a string"))),
            })
            .collect::<std::result::Result<BTreeMap<_, _>, _>>()?,
        _ => return Err(fail("missing `fields` object".into())),
    };
    let options = match v.get("options") {
        None | Some(Value::Null) => None,
        Some(Value::Array(a)) => Some(
            a.iter()
                .map(|o| o.as_str().map(str::to_string).ok_or_else(|| fail("non-string option".into())))
                .collect::<std::result::Result<Vec<_>, _>>()?,
        ),
        Some(_) => return Err(fail("`options` is not an array".into())),
    };
    let label = match v.get("label") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(Value::Number(n)) => {
            let i = n.as_u64().ok_or_else(|| fail(format!("label {n} is not a non-negative integer")))? as usize;
            match (spec.kind, &spec.label_space) {
                (TaskKind::SingleToken, Some(space)) => Some(
                    space
                        .get(i)
                        .cloned()
                        .ok_or_else(|| fail(format!("label index {i} outside label space {space:?}")))?,
                ),
                _ => Some(i.to_string()),
            }
        }
        Some(other) => return Err(fail(format!("label {other} is neither string nor integer"))),
    };
    let e = Example {
        id: id.clone(),
        fields,
        options,
        label,
    };
    spec.validate(&e).map_err(fail)?;
    Ok(e)
}

/// Writes examples in the canonical jsonl format.
pub fn write_jsonl(path: &Path, examples: &[Example]) -> Result<()> {
    use std::io::Write;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    let mut f = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?,
    );
    for e in examples {
        serde_json::to_writer(&mut f, e)?;
        f.write_all(b"\n").map_err(|err| Error::io(format!("writing {}", path.display()), err))?;
    }
    f.flush().map_err(|err| Error::io(format!("writing {}", path.display()), err))
}
