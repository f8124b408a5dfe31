//! Score-distribution histograms, K-sweep curves and the corpus masking
//! probe, with CSV (always) and SVG (optional) output.
//!
//! CSV schemas:
//! - histogram: `gold_label,target_word,normalization,bin_lo,bin_hi,count`,
//!   one row per bin;
//! - K-sweep: `task,setting,K,mean,std`, one row per report, empty cells
//!   where a value is missing.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backend::ModelBundle;
use crate::data::{CorpusItem, CorpusSample, Example};
use crate::error::{Error, Result};
use crate::harness::{RunReport, SCHEMA_VERSION};
use crate::prompting::{Prompt, TemplateMode, Verbalizer};
use crate::scoring::{predict_batch, restricted_softmax, Prediction, Strategy, EVAL_BATCH};

pub const DEFAULT_BINS: usize = 20;
/// Corpus probe sample size when the caller gives none.
pub const DEFAULT_CORPUS_N: usize = 1000;
/// Scores at or below this, or at or above `1 - POLAR_EDGE`, count as polarized.
pub const POLAR_EDGE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    Raw,
    AcrossWords,
}

impl Normalization {
    pub fn name(self) -> &'static str {
        match self {
            Normalization::Raw => "raw",
            Normalization::AcrossWords => "across_words",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreHistogram {
    pub gold_label: String,
    pub target_word: String,
    /// `bins + 1` uniform edges covering `[0, 1]`.
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub normalization: Normalization,
}

impl ScoreHistogram {
    pub fn new(gold_label: impl Into<String>, target_word: impl Into<String>, normalization: Normalization, bins: usize) -> Self {
        assert!(bins > 0, "histogram needs at least one bin");
        Self {
            gold_label: gold_label.into(),
            target_word: target_word.into(),
            bin_edges: (0..=bins).map(|i| i as f64 / bins as f64).collect(),
            counts: vec![0; bins],
            normalization,
        }
    }

    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    /// Bin of a score in `[0, 1]`; the last bin is closed on the right.
    pub fn bin_of(&self, score: f64) -> Result<usize> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::Data(format!("score {score} outside [0, 1]")));
        }
        let n = self.bins();
        Ok(((score * n as f64).floor() as usize).min(n - 1))
    }

    pub fn add(&mut self, score: f64) -> Result<()> {
        let i = self.bin_of(score)?;
        self.counts[i] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Counts in bins lying entirely in `[0, POLAR_EDGE]` or `[1 - POLAR_EDGE, 1]`.
    pub fn extreme_count(&self) -> u64 {
        let eps = 1e-12;
        self.counts
            .iter()
            .enumerate()
            .filter(|(i, _)| self.bin_edges[i + 1] <= POLAR_EDGE + eps || self.bin_edges[*i] >= 1.0 - POLAR_EDGE - eps)
            .map(|(_, c)| c)
            .sum()
    }

    /// Fraction of the mass in bins starting at or above `threshold`.
    pub fn mass_above(&self, threshold: f64) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let above: u64 = self
            .counts
            .iter()
            .enumerate()
            .filter(|(i, _)| self.bin_edges[*i] >= threshold - 1e-12)
            .map(|(_, c)| c)
            .sum();
        above as f64 / total as f64
    }

    fn check(&self) -> Result<()> {
        if self.counts.is_empty() || self.bin_edges.len() != self.counts.len() + 1 {
            return Err(Error::Data(format!(
                "histogram `{}`/`{}` has {} edges for {} bins",
                self.gold_label,
                self.target_word,
                self.bin_edges.len(),
                self.counts.len()
            )));
        }
        if self.bin_edges[0] != 0.0 || *self.bin_edges.last().unwrap() != 1.0 {
            return Err(Error::Data("histogram bins must cover [0, 1]".into()));
        }
        Ok(())
    }
}

/// Share of all counts that fall in the extreme bins; `None` when empty.
pub fn polarization(hists: &[ScoreHistogram]) -> Option<f64> {
    let total: u64 = hists.iter().map(|h| h.total()).sum();
    (total > 0).then(|| hists.iter().map(|h| h.extreme_count()).sum::<u64>() as f64 / total as f64)
}

fn label_words(prompt: &Prompt) -> Result<(&[String], &[String])> {
    match &prompt.verbalizer {
        Verbalizer::Words { labels, words } if prompt.template.mode == TemplateMode::SingleToken => Ok((labels, words)),
        _ => Err(Error::Mode(format!(
            "`{}` is not a single-token label-word prompt; distributions need one",
            prompt.id
        ))),
    }
}

fn normalization_of(strategy: Strategy) -> Result<Normalization> {
    match strategy {
        Strategy::MlmSoftmax => Ok(Normalization::AcrossWords),
        Strategy::DiscToken => Ok(Normalization::Raw),
        s => Err(Error::Config(format!(
            "distribution analysis scores with mlm_softmax or disc_token, not {}",
            s.name()
        ))),
    }
}

/// One histogram per (gold label, label word) cell, gold-major in
/// verbalizer order.
pub fn histograms_from_predictions(
    prompt: &Prompt,
    predictions: &[Prediction],
    normalization: Normalization,
    bins: usize,
) -> Result<Vec<ScoreHistogram>> {
    let (labels, words) = label_words(prompt)?;
    let mut hists: Vec<ScoreHistogram> = labels
        .iter()
        .flat_map(|g| words.iter().map(move |w| ScoreHistogram::new(g.clone(), w.clone(), normalization, bins)))
        .collect();
    for p in predictions {
        let gold = p
            .gold
            .as_deref()
            .ok_or_else(|| Error::Data(format!("example `{}` has no gold label", p.example_id)))?;
        let g = prompt.verbalizer.label_index(gold)?;
        if p.scores.len() != words.len() {
            return Err(Error::Data(format!("example `{}` has {} scores for {} words", p.example_id, p.scores.len(), words.len())));
        }
        for (w, s) in p.scores.iter().enumerate() {
            hists[g * words.len() + w].add(s.score)?;
        }
    }
    Ok(hists)
}

/// Scores `examples` and bins every label word's score by gold label.
/// Masked-LM scores are normalized across the label words, discriminator
/// scores are the raw P(original).
pub fn distribution_report(
    bundle: &ModelBundle,
    prompt: &Prompt,
    examples: &[Example],
    strategy: Strategy,
) -> Result<Vec<ScoreHistogram>> {
    label_words(prompt)?;
    let norm = normalization_of(strategy)?;
    let preds = predict_batch(bundle, prompt, examples, strategy)?.predictions;
    histograms_from_predictions(prompt, &preds, norm, DEFAULT_BINS)
}

/// Probe outcome for one corpus sentence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeScore {
    pub line: usize,
    /// Which word of the pair was in the sentence.
    pub original: String,
    /// Probability of the original word, normalized over the pair.
    pub score: f64,
}

fn check_item(item: &CorpusItem, pair: [&str; 2]) -> Result<usize> {
    let s = &item.sentence;
    let ok = item.start < item.end
        && item.end <= s.len()
        && s.is_char_boundary(item.start)
        && s.is_char_boundary(item.end)
        && s[item.start..item.end].eq_ignore_ascii_case(&item.word);
    if !ok {
        return Err(Error::Data(format!(
            "corpus line {}: position {}..{} does not hold `{}`",
            item.line, item.start, item.end, item.word
        )));
    }
    pair.iter()
        .position(|w| w.eq_ignore_ascii_case(&item.word))
        .ok_or_else(|| Error::Data(format!("corpus line {}: `{}` is not one of {pair:?}", item.line, item.word)))
}

/// Keeps `[CLS]`, a window of tokens around `center` and the final `[SEP]`.
fn fit_window(ids: &[u32], center: usize, max_len: usize) -> (Vec<u32>, usize) {
    if ids.len() <= max_len {
        return (ids.to_vec(), center);
    }
    let body = &ids[1..ids.len() - 1];
    let keep = max_len - 2;
    let c = center - 1;
    let start = c.saturating_sub(keep / 2).min(body.len() - keep);
    let mut out = Vec::with_capacity(max_len);
    out.push(ids[0]);
    out.extend_from_slice(&body[start..start + keep]);
    out.push(ids[ids.len() - 1]);
    (out, c - start + 1)
}

/// Encodes `item` with the matched word masked; returns ids, mask position
/// and the ids of both pair words in that context.
fn probe_input(bundle: &ModelBundle, item: &CorpusItem, pair: [&str; 2]) -> Result<(Vec<u32>, usize, [u32; 2])> {
    let tok = &bundle.tokenizer;
    let mut word_ids = [0u32; 2];
    for (slot, w) in word_ids.iter_mut().zip(pair) {
        let enc = tok.encode(&item.with_replacement(w))?;
        let span = enc.tokens_in(item.start, item.start + w.len());
        match span.as_slice() {
            [i] => *slot = enc.ids[*i],
            _ => {
                return Err(Error::Mode(format!(
                    "`{w}` is {} tokens at corpus line {}; the probe needs single-token words",
                    span.len(),
                    item.line
                )))
            }
        }
    }
    let mask_id = tok.special_ids().mask;
    let enc = tok.encode(&item.with_replacement(tok.mask_token()))?;
    let masks: Vec<usize> = (0..enc.ids.len()).filter(|&i| enc.ids[i] == mask_id).collect();
    let [pos] = masks.as_slice() else {
        return Err(Error::Data(format!("corpus line {}: expected one mask, found {}", item.line, masks.len())));
    };
    let (ids, pos) = fit_window(&enc.ids, *pos, bundle.max_length());
    Ok((ids, pos, word_ids))
}

/// Per-sentence probe scores, in sample order.
pub fn corpus_probe_scores(bundle: &ModelBundle, sample: &CorpusSample, word_pair: [&str; 2]) -> Result<Vec<ProbeScore>> {
    let head = bundle.require_vocab_head()?;
    if word_pair[0].eq_ignore_ascii_case(word_pair[1]) {
        return Err(Error::Input("probe needs two different words".into()));
    }
    let inputs = sample
        .items
        .iter()
        .map(|item| Ok((check_item(item, word_pair)?, probe_input(bundle, item, word_pair)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(inputs.len());
    for (chunk, items) in inputs.chunks(EVAL_BATCH).zip(sample.items.chunks(EVAL_BATCH)) {
        let hidden = bundle.hidden_states(chunk.iter().map(|(_, (ids, _, _))| ids.clone()).collect(), false)?;
        for (row, ((orig, (_, pos, word_ids)), item)) in chunk.iter().zip(items).enumerate() {
            let h = hidden.get(row)?.narrow(0, *pos, 1)?;
            let logits: Vec<f64> = head
                .logits_for(bundle.view(false), &h, word_ids)?
                .to_dtype(candle_core::DType::F64)?
                .flatten_all()?
                .to_vec1()?;
            let p = restricted_softmax(&logits);
            out.push(ProbeScore {
                line: item.line,
                original: word_pair[*orig].to_string(),
                score: p[*orig],
            });
        }
    }
    Ok(out)
}

/// Masks the matched word in every sentence and bins the pair-normalized
/// probability of the original word, one histogram per original word.
pub fn corpus_probe(bundle: &ModelBundle, sample: &CorpusSample, word_pair: [&str; 2]) -> Result<(ScoreHistogram, ScoreHistogram)> {
    let scores = corpus_probe_scores(bundle, sample, word_pair)?;
    let mut hists = word_pair.map(|w| ScoreHistogram::new(w, w, Normalization::AcrossWords, DEFAULT_BINS));
    for s in &scores {
        let i = usize::from(s.original != word_pair[0]);
        hists[i].add(s.score)?;
    }
    let [a, b] = hists;
    Ok((a, b))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FigureFormat {
    Csv,
    /// CSV plus an SVG rendering.
    Image,
}

/// File-name component: anything outside `[A-Za-z0-9.-]` becomes `-`.
pub fn name_part(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '-' }).collect()
}

pub fn figure_path(out_dir: &Path, task: &str, model: &str, analysis: &str, ext: &str) -> PathBuf {
    out_dir.join(format!("{}_{}_{}.{ext}", name_part(task), name_part(model), name_part(analysis)))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn make_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Data(format!("csv: {e}"));
    w.write_record(header).map_err(io)?;
    for r in rows {
        w.write_record(&r).map_err(io)?;
    }
    w.into_inner().map_err(|e| Error::Data(format!("csv: {e}")))
}

/// One CSV per histogram (`<analysis>-<gold>-<word>`), plus one composite
/// SVG for [`FigureFormat::Image`].
pub fn emit_histograms(
    hists: &[ScoreHistogram],
    task: &str,
    model: &str,
    analysis: &str,
    out_dir: &Path,
    format: FigureFormat,
) -> Result<Vec<PathBuf>> {
    for h in hists {
        h.check()?;
    }
    make_dir(out_dir)?;
    let mut paths = Vec::new();
    for h in hists {
        let rows = h.counts.iter().enumerate().map(|(i, c)| {
            vec![
                h.gold_label.clone(),
                h.target_word.clone(),
                h.normalization.name().to_string(),
                h.bin_edges[i].to_string(),
                h.bin_edges[i + 1].to_string(),
                c.to_string(),
            ]
        });
        let bytes = csv_bytes(&["gold_label", "target_word", "normalization", "bin_lo", "bin_hi", "count"], rows)?;
        let path = figure_path(out_dir, task, model, &format!("{analysis}-{}-{}", h.gold_label, h.target_word), "csv");
        write_file(&path, &bytes)?;
        paths.push(path);
    }
    if format == FigureFormat::Image {
        let path = figure_path(out_dir, task, model, analysis, "svg");
        write_file(&path, histogram_svg(hists).as_bytes())?;
        paths.push(path);
    }
    Ok(paths)
}

/// One CSV per (task, model) pair in `reports`, rows sorted by setting then K.
pub fn emit_ksweep(reports: &[RunReport], out_dir: &Path, format: FigureFormat) -> Result<Vec<PathBuf>> {
    if reports.is_empty() {
        return Err(Error::Input("no run reports to plot".into()));
    }
    if let Some(r) = reports.iter().find(|r| r.schema_version != SCHEMA_VERSION) {
        return Err(Error::Data(format!("report for `{}` has schema version {}", r.task_id, r.schema_version)));
    }
    make_dir(out_dir)?;
    let mut groups: Vec<(&str, &str)> = reports.iter().map(|r| (r.task_id.as_str(), r.model_id.as_str())).collect();
    groups.sort();
    groups.dedup();
    let mut paths = Vec::new();
    for (task, model) in groups {
        let mut rows: Vec<&RunReport> = reports.iter().filter(|r| r.task_id == task && r.model_id == model).collect();
        rows.sort_by(|a, b| (a.setting.to_string(), a.k).cmp(&(b.setting.to_string(), b.k)));
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let bytes = csv_bytes(
            &["task", "setting", "K", "mean", "std"],
            rows.iter().map(|r| {
                vec![
                    r.task_id.clone(),
                    r.setting.to_string(),
                    r.k.map(|k| k.to_string()).unwrap_or_default(),
                    opt(r.mean),
                    opt(r.std),
                ]
            }),
        )?;
        let path = figure_path(out_dir, task, model, "ksweep", "csv");
        write_file(&path, &bytes)?;
        paths.push(path);
        if format == FigureFormat::Image {
            let path = figure_path(out_dir, task, model, "ksweep", "svg");
            write_file(&path, ksweep_svg(&rows).as_bytes())?;
            paths.push(path);
        }
    }
    Ok(paths)
}

const PANEL_W: f64 = 240.0;
const PANEL_H: f64 = 160.0;
const MARGIN: f64 = 30.0;

fn histogram_svg(hists: &[ScoreHistogram]) -> String {
    let cols = hists.len().clamp(1, 2);
    let rows = hists.len().div_ceil(cols).max(1);
    let (w, h) = (cols as f64 * (PANEL_W + MARGIN) + MARGIN, rows as f64 * (PANEL_H + 2.0 * MARGIN) + MARGIN);
    let mut s = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"11\">\n");
    for (i, hist) in hists.iter().enumerate() {
        let x0 = MARGIN + (i % cols) as f64 * (PANEL_W + MARGIN);
        let y0 = MARGIN + (i / cols) as f64 * (PANEL_H + 2.0 * MARGIN);
        let max = hist.counts.iter().copied().max().unwrap_or(0).max(1) as f64;
        let bw = PANEL_W / hist.bins() as f64;
        let _ = writeln!(
            s,
            "<text x=\"{x0:.1}\" y=\"{:.1}\">gold={} word={} ({})</text>",
            y0 - 6.0,
            xml(&hist.gold_label),
            xml(&hist.target_word),
            hist.normalization.name()
        );
        let _ = writeln!(s, "<rect x=\"{x0:.1}\" y=\"{y0:.1}\" width=\"{PANEL_W}\" height=\"{PANEL_H}\" fill=\"none\" stroke=\"#888\"/>");
        for (b, &c) in hist.counts.iter().enumerate() {
            let bh = PANEL_H * c as f64 / max;
            let _ = writeln!(
                s,
                "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{bh:.1}\" fill=\"#4878a8\"/>",
                x0 + b as f64 * bw,
                y0 + PANEL_H - bh,
                bw - 1.0
            );
        }
        let _ = writeln!(s, "<text x=\"{x0:.1}\" y=\"{:.1}\">0</text>", y0 + PANEL_H + 14.0);
        let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\">1</text>", x0 + PANEL_W - 6.0, y0 + PANEL_H + 14.0);
    }
    s.push_str("</svg>\n");
    s
}

fn ksweep_svg(rows: &[&RunReport]) -> String {
    let ks: Vec<usize> = rows.iter().filter_map(|r| r.k).collect();
    let (kmin, kmax) = (
        ks.iter().copied().min().unwrap_or(1).max(1) as f64,
        ks.iter().copied().max().unwrap_or(1).max(1) as f64,
    );
    let span = (kmax.log2() - kmin.log2()).max(1.0);
    let (w, h) = (2.0 * PANEL_W + 2.0 * MARGIN, 2.0 * PANEL_H + 2.0 * MARGIN);
    let px = |k: usize| MARGIN + ((k as f64).log2() - kmin.log2()) / span * 2.0 * PANEL_W;
    let py = |acc: f64| MARGIN + (1.0 - acc.clamp(0.0, 1.0)) * 2.0 * PANEL_H;
    let mut s = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"11\">\n");
    let _ = writeln!(
        s,
        "<rect x=\"{MARGIN}\" y=\"{MARGIN}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#888\"/>",
        2.0 * PANEL_W,
        2.0 * PANEL_H
    );
    let colors = ["#4878a8", "#c85a3c", "#5a9a50", "#8a5ab0"];
    let mut settings: Vec<String> = rows.iter().map(|r| r.setting.to_string()).collect();
    settings.dedup();
    for (si, setting) in settings.iter().enumerate() {
        let c = colors[si % colors.len()];
        let pts: Vec<(f64, f64, f64)> = rows
            .iter()
            .filter(|r| &r.setting.to_string() == setting)
            .filter_map(|r| Some((px(r.k?), py(r.mean?), r.std.unwrap_or(0.0) * 2.0 * PANEL_H)))
            .collect();
        let line: Vec<String> = pts.iter().map(|(x, y, _)| format!("{x:.1},{y:.1}")).collect();
        let _ = writeln!(s, "<polyline points=\"{}\" fill=\"none\" stroke=\"{c}\"/>", line.join(" "));
        for (x, y, e) in &pts {
            let _ = writeln!(s, "<line x1=\"{x:.1}\" y1=\"{:.1}\" x2=\"{x:.1}\" y2=\"{:.1}\" stroke=\"{c}\"/>", y - e, y + e);
        }
        let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\" fill=\"{c}\">{}</text>", MARGIN + 4.0, MARGIN + 14.0 * (si + 1) as f64, xml(setting));
    }
    s.push_str("</svg>\n");
    s
}

fn xml(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

#[cfg(test)]
mod tests;
