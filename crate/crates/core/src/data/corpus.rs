use std::io::BufRead;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A corpus sentence with the target word it contains.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusItem {
    /// 1-based line number in the corpus.
    pub line: usize,
    pub sentence: String,
    /// The target word (as given by the caller) found in the sentence.
    pub word: String,
    /// Byte range of the occurrence in `sentence`.
    pub start: usize,
    pub end: usize,
}

impl CorpusItem {
    /// The sentence with the matched occurrence replaced by `replacement`.
    pub fn with_replacement(&self, replacement: &str) -> String {
        format!("{}{}{}", &self.sentence[..self.start], replacement, &self.sentence[self.end..])
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSample {
    pub items: Vec<CorpusItem>,
    /// Fewer matches than requested; `items` holds all of them.
    pub exhausted: bool,
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '\''
}

/// First whole-word, case-insensitive occurrence of any of `words` in
/// `sentence`, as `(word index, byte start, byte end)`.
pub fn find_whole_word(sentence: &str, words: &[String]) -> Option<(usize, usize, usize)> {
    let mut start = None;
    let chars: Vec<(usize, char)> = sentence.char_indices().chain([(sentence.len(), ' ')]).collect();
    for &(i, c) in &chars {
        match (start, is_word_char(c)) {
            (None, true) => start = Some(i),
            (Some(s), false) => {
                let tok = &sentence[s..i];
                if let Some(w) = words.iter().position(|w| w.eq_ignore_ascii_case(tok)) {
                    return Some((w, s, i));
                }
                start = None;
            }
            _ => {}
        }
    }
    None
}

/// Samples `n` sentences containing one of `target_words` as a whole token.
pub fn corpus_sample(corpus_path: &Path, target_words: &[String], n: usize, seed: u64) -> Result<CorpusSample> {
    let f = std::fs::File::open(corpus_path).map_err(|e| Error::io(format!("opening {}", corpus_path.display()), e))?;
    let lines = std::io::BufReader::new(f)
        .lines()
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| Error::io(format!("reading {}", corpus_path.display()), e))?;
    corpus_sample_from_lines(&lines, target_words, n, seed)
}

pub fn corpus_sample_from_lines<S: AsRef<str>>(
    lines: &[S],
    target_words: &[String],
    n: usize,
    seed: u64,
) -> Result<CorpusSample> {
    if target_words.is_empty() {
        return Err(Error::Input("no target words".into()));
    }
    let matches: Vec<CorpusItem> = lines
        .iter()
        .enumerate()
        .filter_map(|(i, l)| {
            let s = l.as_ref().trim_end_matches(['\r', '\n']);
            find_whole_word(s, target_words).map(|(w, start, end)| CorpusItem {
                line: i + 1,
                sentence: s.to_string(),
                word: target_words[w].clone(),
                start,
                end,
            })
        })
        .collect();
    if matches.len() <= n {
        if matches.len() < n {
            log::warn!("corpus has {} matching sentences, {n} requested", matches.len());
        }
        return Ok(CorpusSample {
            exhausted: matches.len() < n,
            items: matches,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, matches.len(), n).into_vec();
    picked.sort_unstable();
    Ok(CorpusSample {
        items: picked.into_iter().map(|i| matches[i].clone()).collect(),
        exhausted: false,
    })
}
