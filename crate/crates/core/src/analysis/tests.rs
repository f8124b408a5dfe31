use candle_core::{DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::{corpus_sample_from_lines, sample_fewshot, TaskSpec};
use crate::harness::{finetune_model, run_experiment_with, ExperimentConfig, GridSpec, Setting, TrialConfig};
use crate::prompting::Registry;
use crate::scoring::Prediction;
use crate::testutil::*;

fn prompt(id: &str) -> Prompt {
    Registry::default_registry().get(id).unwrap().clone()
}

/// Bin by direct comparison against the edges, last bin closed.
fn brute_bin(edges: &[f64], s: f64) -> usize {
    let n = edges.len() - 1;
    (0..n).find(|&i| edges[i] <= s && (s < edges[i + 1] || (i == n - 1 && s <= edges[n]))).unwrap()
}

#[test]
fn binning_matches_edge_comparison() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut h = ScoreHistogram::new("g", "w", Normalization::Raw, DEFAULT_BINS);
    let mut oracle = vec![0u64; DEFAULT_BINS];
    let mut scores: Vec<f64> = (0..500).map(|_| rng.random::<f64>()).collect();
    scores.extend([0.0, 1.0, 0.5, 0.05, 0.95, 0.1, 0.9]);
    for &s in &scores {
        h.add(s).unwrap();
        oracle[brute_bin(&h.bin_edges, s)] += 1;
    }
    assert_eq!(h.counts, oracle);
    assert_eq!(h.total(), scores.len() as u64);
    assert_eq!(h.bin_edges.len(), 21);
    assert_eq!((h.bin_edges[0], h.bin_edges[20]), (0.0, 1.0));
    assert!(h.add(1.0 + 1e-9).is_err());
    assert!(h.add(f64::NAN).is_err());

    let mut e = ScoreHistogram::new("g", "w", Normalization::Raw, DEFAULT_BINS);
    for s in [0.0, 0.05, 0.099, 0.5, 0.91, 1.0] {
        e.add(s).unwrap();
    }
    assert_eq!(e.extreme_count(), 5);
    assert_eq!(polarization(&[e.clone()]), Some(5.0 / 6.0));
    assert_eq!(e.mass_above(0.5), 3.0 / 6.0);
    assert_eq!(polarization(&[]), None);
}

fn sst2_eval(n_per_label: usize) -> Vec<Example> {
    separable(n_per_label, 9, "d")
}

#[test]
fn constant_discriminator_puts_all_mass_in_one_bin() {
    let b = toy(51);
    let dev = b.params().device().clone();
    b.params().set(&format!("{PRED}.weight"), &Tensor::zeros((1, 16), DType::F64, &dev).unwrap()).unwrap();
    b.params().set(&format!("{PRED}.bias"), &Tensor::zeros(1, DType::F64, &dev).unwrap()).unwrap();
    let ex = sst2_eval(7);
    let hists = distribution_report(&b, &prompt("sst2"), &ex, Strategy::DiscToken).unwrap();
    assert_eq!(hists.len(), 4);
    let cells: Vec<(&str, &str)> = hists.iter().map(|h| (h.gold_label.as_str(), h.target_word.as_str())).collect();
    let p = prompt("sst2");
    let Verbalizer::Words { labels, words } = &p.verbalizer else { panic!() };
    let expected: Vec<(&str, &str)> = labels.iter().flat_map(|l| words.iter().map(move |w| (l.as_str(), w.as_str()))).collect();
    assert_eq!(cells, expected);
    for h in &hists {
        assert_eq!(h.normalization, Normalization::Raw);
        assert_eq!(h.total(), 7);
        assert_eq!(h.counts[10], 7, "{h:?}");
    }
}

#[test]
fn normalized_cells_mirror_each_other() {
    let b = toy(52);
    let p = prompt("sst2");
    let ex = sst2_examples(60, 4);
    let preds = predict_batch(&b, &p, &ex, Strategy::MlmSoftmax).unwrap().predictions;
    for pr in &preds {
        let v = pr.values();
        assert!((v[0] + v[1] - 1.0).abs() < 1e-12);
    }
    let hists = distribution_report(&b, &p, &ex, Strategy::MlmSoftmax).unwrap();
    assert_eq!(hists.len(), 4);
    let n = ex.len() as u64;
    assert_eq!(hists.iter().map(|h| h.total()).sum::<u64>(), 2 * n);
    let on_edge = preds.iter().flat_map(|p| p.values()).any(|s| (s * 20.0).fract() == 0.0);
    assert!(!on_edge);
    for g in 0..2 {
        let (a, c) = (&hists[2 * g], &hists[2 * g + 1]);
        assert_eq!(a.normalization, Normalization::AcrossWords);
        let mirrored: Vec<u64> = c.counts.iter().rev().copied().collect();
        assert_eq!(a.counts, mirrored);
    }
}

#[test]
fn distribution_errors() {
    let b = toy(53);
    let ex = sst2_eval(3);
    let mut mlm_only = b.clone();
    mlm_only.disc_head = None;
    mlm_only.capabilities.discriminative = false;
    assert!(matches!(
        distribution_report(&mlm_only, &prompt("sst2"), &ex, Strategy::DiscToken),
        Err(Error::Capability(_))
    ));
    assert!(matches!(distribution_report(&b, &prompt("sst2"), &ex, Strategy::ProbAvg), Err(Error::Config(_))));
    assert!(matches!(
        distribution_report(&b, &prompt("copa"), &copa_examples(3, 1), Strategy::RepAvg),
        Err(Error::Mode(_))
    ));
    let unlabeled = vec![Example::new("u", &[("sentence", "it was fun")], None)];
    assert!(matches!(distribution_report(&b, &prompt("sst2"), &unlabeled, Strategy::DiscToken), Err(Error::Data(_))));
    let bad = Prediction {
        example_id: "x".into(),
        gold: Some("positive".into()),
        scores: vec![],
        predicted: "positive".into(),
    };
    assert!(histograms_from_predictions(&prompt("sst2"), &[bad], Normalization::Raw, 20).is_err());
}

fn set_rows(b: &ModelBundle, name: &str, rows: &[(u32, Vec<f64>)]) {
    let mut t: Vec<Vec<f64>> = b.view(false).get(name).unwrap().to_vec2().unwrap();
    for (id, r) in rows {
        t[*id as usize] = r.clone();
    }
    let (n, d) = (t.len(), t[0].len());
    let flat: Vec<f64> = t.into_iter().flatten().collect();
    b.params().set(name, &Tensor::from_vec(flat, (n, d), b.params().device()).unwrap()).unwrap();
}

fn set_bias(b: &ModelBundle, name: &str, ids: &[u32], value: f64) {
    let mut t: Vec<f64> = b.view(false).get(name).unwrap().to_vec1().unwrap();
    for &i in ids {
        t[i as usize] = value;
    }
    let n = t.len();
    b.params().set(name, &Tensor::from_vec(t, n, b.params().device()).unwrap()).unwrap();
}

const SIX: &[&str] = &[
    "the movie was great",
    "great acting and a fun plot",
    "this film is terrible",
    "it was a great ride",
    "the story is terrible and dull",
    "terrible",
];

fn six_sample() -> CorpusSample {
    let words = vec!["great".to_string(), "terrible".to_string()];
    let s = corpus_sample_from_lines(SIX, &words, 6, 1).unwrap();
    assert_eq!(s.items.len(), 6);
    s
}

#[test]
fn uniform_word_pair_scores_one_half() {
    let b = toy(54);
    let head = b.vocab_head.clone().unwrap();
    let ids = [b.tokenizer.token_to_id("great").unwrap(), b.tokenizer.token_to_id("terrible").unwrap()];
    set_rows(&b, &head.table, &[(ids[0], vec![0.3; 16]), (ids[1], vec![0.3; 16])]);
    set_bias(&b, &head.bias, &ids, 0.0);
    let (g, t) = corpus_probe(&b, &six_sample(), ["great", "terrible"]).unwrap();
    assert_eq!((g.total(), t.total()), (3, 3));
    assert_eq!(g.counts[10], 3);
    assert_eq!(t.counts[10], 3);
    for s in corpus_probe_scores(&b, &six_sample(), ["great", "terrible"]).unwrap() {
        assert!((s.score - 0.5).abs() < 1e-12);
    }
}

/// Forces the masked-word logits of the six sentences (`great` gets `d_i`,
/// `terrible` gets 0) and checks the probe against per-sentence softmax.
#[test]
fn six_sentence_probe_matches_per_sentence_softmax() {
    let b = toy(55);
    let head = b.vocab_head.clone().unwrap();
    let sample = six_sample();
    let ids = [b.tokenizer.token_to_id("great").unwrap(), b.tokenizer.token_to_id("terrible").unwrap()];
    let mask = b.tokenizer.special_ids().mask;
    let feats: Vec<Vec<f64>> = sample
        .items
        .iter()
        .map(|it| {
            let enc = b.tokenizer.encode(&it.with_replacement("[MASK]")).unwrap();
            let pos = enc.ids.iter().position(|&i| i == mask).unwrap();
            let h = b.hidden_states(vec![enc.ids.clone()], false).unwrap().squeeze(0).unwrap().narrow(0, pos, 1).unwrap();
            head.transform(b.view(false), &h).unwrap().squeeze(0).unwrap().to_vec1().unwrap()
        })
        .collect();
    let d = [2.0, -1.5, 0.3, -3.0, 1.1, 0.05];
    let gram: Vec<Vec<f64>> = feats
        .iter()
        .map(|f| feats.iter().map(|g| f.iter().zip(g).map(|(x, y)| x * y).sum()).collect())
        .collect();
    let a = solve(gram, d.to_vec());
    let delta: Vec<f64> = (0..16).map(|k| feats.iter().zip(&a).map(|(f, c)| c * f[k]).sum()).collect();
    set_rows(&b, &head.table, &[(ids[0], delta), (ids[1], vec![0.0; 16])]);
    set_bias(&b, &head.bias, &ids, 0.0);

    let scores = corpus_probe_scores(&b, &sample, ["great", "terrible"]).unwrap();
    let (g, t) = corpus_probe(&b, &sample, ["great", "terrible"]).unwrap();
    let mut og = vec![0u64; 20];
    let mut ot = vec![0u64; 20];
    for ((it, s), di) in sample.items.iter().zip(&scores).zip(d) {
        let p_great = 1.0 / (1.0 + (-di).exp());
        let (want, cell) = if it.word == "great" { (p_great, &mut og) } else { (1.0 - p_great, &mut ot) };
        assert_eq!(s.original, it.word);
        assert!((s.score - want).abs() < 1e-9, "line {}: {} vs {want}", it.line, s.score);
        cell[brute_bin(&g.bin_edges, want)] += 1;
    }
    assert_eq!(g.counts, og);
    assert_eq!(t.counts, ot);
    assert_eq!(g.total() + t.total(), 6);
}

#[test]
fn probe_conserves_counts_and_rejects_bad_items() {
    let b = toy(56);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let lines: Vec<String> = (0..40)
        .map(|_| {
            let w = if rng.random::<bool>() { "great" } else { "terrible" };
            format!("{} {w} {}", sentence(&mut rng, 1, 5), sentence(&mut rng, 0, 5))
        })
        .collect();
    let words = vec!["great".to_string(), "terrible".to_string()];
    let sample = corpus_sample_from_lines(&lines, &words, 25, 7).unwrap();
    let (g, t) = corpus_probe(&b, &sample, ["great", "terrible"]).unwrap();
    assert_eq!(g.total() + t.total(), 25);

    let mut broken = sample.clone();
    broken.items[3].start = broken.items[3].end;
    assert!(matches!(corpus_probe(&b, &broken, ["great", "terrible"]), Err(Error::Data(_))));
    let mut wrong = sample.clone();
    wrong.items[0].word = "fun".into();
    assert!(matches!(corpus_probe(&b, &wrong, ["great", "terrible"]), Err(Error::Data(_))));
    let mut disc_only = b.clone();
    disc_only.vocab_head = None;
    assert!(matches!(corpus_probe(&disc_only, &sample, ["great", "terrible"]), Err(Error::Capability(_))));
}

#[test]
fn long_sentences_are_windowed_around_the_mask() {
    let ids: Vec<u32> = (0..20).collect();
    let (w, p) = fit_window(&ids, 15, 8);
    assert_eq!(w.len(), 8);
    assert_eq!((w[0], w[7]), (0, 19));
    assert_eq!(w[p], 15);
    let (w, p) = fit_window(&ids, 1, 8);
    assert_eq!((w[p], w.len()), (1, 8));
    let (w, p) = fit_window(&ids, 18, 8);
    assert_eq!((w[p], w.len(), w[6]), (18, 8, 18));
}

#[test]
fn few_shot_training_polarizes_scores() {
    let b = toy(33);
    let p = prompt("sst2");
    let spec = TaskSpec::builtin("sst2").unwrap();
    let train = separable(40, 1, "t");
    let eval = separable(20, 2, "v");
    let split = sample_fewshot(&spec, &train, 16, 42).unwrap();
    let before = polarization(&distribution_report(&b, &p, &eval, Strategy::DiscToken).unwrap()).unwrap();
    let trial = TrialConfig {
        max_steps: 300,
        eval_every: 300,
        ..TrialConfig::new(3e-3, 4, Strategy::DiscToken)
    };
    let (trained, _) = finetune_model(&b, &split, &p, &trial).unwrap();
    let after = polarization(&distribution_report(&trained.unwrap(), &p, &eval, Strategy::DiscToken).unwrap()).unwrap();
    assert!(after > before, "polarization {before} -> {after}");
}

fn ksweep_reports() -> Vec<RunReport> {
    let b = toy(57);
    let data = crate::data::TaskData {
        spec: TaskSpec::builtin("sst2").unwrap(),
        train: separable(40, 1, "t"),
        eval: separable(10, 2, "v"),
    };
    let reg = Registry::default_registry();
    [16, 32]
        .iter()
        .flat_map(|&k| {
            [Setting::FewshotPrompt, Setting::FewshotStandard].map(|setting| ExperimentConfig {
                k: Some(k),
                seeds: vec![13, 21],
                grid: GridSpec::small(),
                max_steps: 2,
                eval_every: 1,
                ..ExperimentConfig::new("toy", "sst2", setting)
            })
        })
        .map(|c| run_experiment_with(&b, &data, &reg, &c).unwrap())
        .collect()
}

#[test]
fn ksweep_csv_schema_and_determinism() {
    let reports = ksweep_reports();
    let dir = tempfile::tempdir().unwrap();
    let paths = emit_ksweep(&reports, dir.path(), FigureFormat::Csv).unwrap();
    assert_eq!(paths.len(), 1);
    assert!(paths[0].file_name().unwrap().to_str().unwrap().ends_with("_ksweep.csv"));
    assert!(paths[0].file_name().unwrap().to_str().unwrap().starts_with("sst2_toy-s57"));
    let text = std::fs::read_to_string(&paths[0]).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "task,setting,K,mean,std");
    assert_eq!(lines.len(), 5);
    let row: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(&row[..3], &["sst2", "fewshot_prompt", "16"]);
    let r = reports.iter().find(|r| r.setting == Setting::FewshotPrompt && r.k == Some(16)).unwrap();
    assert_eq!(row[3].parse::<f64>().unwrap(), r.mean.unwrap());
    assert_eq!(row[4].parse::<f64>().unwrap(), r.std.unwrap());

    let again = emit_ksweep(&ksweep_reports(), dir.path(), FigureFormat::Image).unwrap();
    assert_eq!(std::fs::read_to_string(&again[0]).unwrap(), text);
    assert!(again[1].extension().unwrap() == "svg");
    let svg = std::fs::read_to_string(&again[1]).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("polyline"));

    let mut old = reports[0].clone();
    old.schema_version = 0;
    assert!(matches!(emit_ksweep(&[old], dir.path(), FigureFormat::Csv), Err(Error::Data(_))));
    assert!(emit_ksweep(&[], dir.path(), FigureFormat::Csv).is_err());
}

#[test]
fn histogram_files_are_deterministic() {
    let b = toy(58);
    let hists = distribution_report(&b, &prompt("sst2"), &sst2_eval(10), Strategy::DiscToken).unwrap();
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let p1 = emit_histograms(&hists, "sst2", "google/electra x", "dist", d1.path(), FigureFormat::Image).unwrap();
    let p2 = emit_histograms(&hists, "sst2", "google/electra x", "dist", d2.path(), FigureFormat::Image).unwrap();
    assert_eq!(p1.len(), 5);
    let names: Vec<String> = p1.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
    assert_eq!(names[4], "sst2_google-electra-x_dist.svg");
    assert!(names[0].starts_with(&format!("sst2_google-electra-x_dist-{}-", hists[0].gold_label)));
    for (a, c) in p1.iter().zip(&p2) {
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(c).unwrap());
    }
    let csv = std::fs::read_to_string(&p1[0]).unwrap();
    assert_eq!(csv.lines().count(), 21);
    assert_eq!(csv.lines().next().unwrap(), "gold_label,target_word,normalization,bin_lo,bin_hi,count");
    let total: u64 = csv.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse::<u64>().unwrap()).sum();
    assert_eq!(total, hists[0].total());

    let file = d1.path().join("blocker");
    std::fs::write(&file, "x").unwrap();
    assert!(matches!(
        emit_histograms(&hists, "sst2", "m", "dist", &file.join("sub"), FigureFormat::Csv),
        Err(Error::Io { .. })
    ));
    let mut bad = hists[0].clone();
    bad.counts.pop();
    assert!(matches!(emit_histograms(&[bad], "t", "m", "dist", d1.path(), FigureFormat::Csv), Err(Error::Data(_))));
}
