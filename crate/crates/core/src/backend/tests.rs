use std::collections::{BTreeMap, HashMap};

use candle_core::{DType, Device, Tensor};
use serde_json::json;

use super::*;
use crate::testutil::toy;

type M = Vec<Vec<f64>>;

fn mat(b: &ModelBundle, name: &str) -> M {
    b.view(false).get(name).unwrap().to_vec2().unwrap()
}

fn vecp(b: &ModelBundle, name: &str) -> Vec<f64> {
    b.view(false).get(name).unwrap().to_vec1().unwrap()
}

fn erf(x: f64) -> f64 {
    if x.abs() > 4.0 {
        return x.signum();
    }
    // Maclaurin series; fine to ~1e-12 for |x| <= 4.
    let mut sum = 0.0;
    let mut term = x;
    for n in 0..200 {
        sum += term / (2 * n + 1) as f64;
        term *= -x * x / (n + 1) as f64;
    }
    sum * 2.0 / std::f64::consts::PI.sqrt()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

fn lin(x: &M, w: &M, b: &[f64]) -> M {
    x.iter()
        .map(|r| w.iter().zip(b).map(|(wr, bi)| wr.iter().zip(r).map(|(a, c)| a * c).sum::<f64>() + bi).collect())
        .collect()
}

fn ln(x: &M, g: &[f64], b: &[f64], eps: f64) -> M {
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mu = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            r.iter().zip(g).zip(b).map(|((v, gi), bi)| (v - mu) / (var + eps).sqrt() * gi + bi).collect()
        })
        .collect()
}

fn add(a: &M, b: &M) -> M {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

/// Post-LN BERT encoder in plain loops, one unpadded sequence.
fn reference_forward(b: &ModelBundle, ids: &[u32]) -> M {
    let e = &b.encoder;
    let p = |s: &str| format!("{}.{s}", e.prefix);
    let words = mat(b, &e.word_embeddings_name());
    let pos = mat(b, &p("embeddings.position_embeddings.weight"));
    let typ = mat(b, &p("embeddings.token_type_embeddings.weight"));
    let x: M = ids
        .iter()
        .enumerate()
        .map(|(i, &id)| (0..e.hidden_size).map(|d| words[id as usize][d] + pos[i][d] + typ[0][d]).collect())
        .collect();
    let mut x = ln(&x, &vecp(b, &p("embeddings.LayerNorm.weight")), &vecp(b, &p("embeddings.LayerNorm.bias")), e.layer_norm_eps);
    let heads = e.num_heads;
    let dh = e.hidden_size / heads;
    for l in 0..e.num_layers {
        let n = |s: &str| p(&format!("encoder.layer.{l}.{s}"));
        let proj = |s: &str, x: &M| lin(x, &mat(b, &n(&format!("{s}.weight"))), &vecp(b, &n(&format!("{s}.bias"))));
        let (q, k, v) = (proj("attention.self.query", &x), proj("attention.self.key", &x), proj("attention.self.value", &x));
        let t = ids.len();
        let mut ctx = vec![vec![0.0; e.hidden_size]; t];
        for h in 0..heads {
            for i in 0..t {
                let s: Vec<f64> = (0..t)
                    .map(|j| (0..dh).map(|d| q[i][h * dh + d] * k[j][h * dh + d]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = s.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = s.iter().map(|v| (v - m).exp()).sum();
                for j in 0..t {
                    let a = (s[j] - m).exp() / z;
                    for d in 0..dh {
                        ctx[i][h * dh + d] += a * v[j][h * dh + d];
                    }
                }
            }
        }
        let attn = proj("attention.output.dense", &ctx);
        x = ln(&add(&x, &attn), &vecp(b, &n("attention.output.LayerNorm.weight")), &vecp(b, &n("attention.output.LayerNorm.bias")), e.layer_norm_eps);
        let inter: M = proj("intermediate.dense", &x).into_iter().map(|r| r.into_iter().map(gelu).collect()).collect();
        let out = proj("output.dense", &inter);
        x = ln(&add(&x, &out), &vecp(b, &n("output.LayerNorm.weight")), &vecp(b, &n("output.LayerNorm.bias")), e.layer_norm_eps);
    }
    x
}

fn max_diff(a: &M, b: &M) -> f64 {
    a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn encoder_matches_reference_loops() {
    let b = toy(61);
    let ids = b.tokenizer.encode("the movie was great , it was a fun ride").unwrap().ids;
    let got: M = b.hidden_states(vec![ids.clone()], false).unwrap().squeeze(0).unwrap().to_vec2().unwrap();
    let want = reference_forward(&b, &ids);
    assert!(max_diff(&got, &want) < 1e-9, "{}", max_diff(&got, &want));

    // Heads on top of the same rows.
    let vh = b.vocab_head.clone().unwrap();
    let row = Tensor::new(vec![want[3].clone()], &Device::Cpu).unwrap();
    let logits: Vec<f64> = vh.logits_for(b.view(false), &row, &[7, 9]).unwrap().squeeze(0).unwrap().to_vec1().unwrap();
    let t = ln(
        &lin(&[want[3].clone()].to_vec(), &mat(&b, &format!("{}.weight", vh.transform_dense)), &vecp(&b, &format!("{}.bias", vh.transform_dense)))
            .into_iter()
            .map(|r| r.into_iter().map(gelu).collect())
            .collect(),
        &vecp(&b, &format!("{}.weight", vh.transform_norm)),
        &vecp(&b, &format!("{}.bias", vh.transform_norm)),
        vh.layer_norm_eps,
    );
    let table = mat(&b, &vh.table);
    let bias = vecp(&b, &vh.bias);
    for (k, &id) in [7usize, 9].iter().enumerate() {
        let want = t[0].iter().zip(&table[id]).map(|(a, c)| a * c).sum::<f64>() + bias[id];
        assert!((logits[k] - want).abs() < 1e-9);
    }
}

#[test]
fn padding_does_not_change_real_rows() {
    let b = toy(62);
    let short = b.tokenizer.encode("it was great").unwrap().ids;
    let long = b.tokenizer.encode("the movie was a very fun ride and the plot is good").unwrap().ids;
    let alone: M = b.hidden_states(vec![short.clone()], false).unwrap().squeeze(0).unwrap().to_vec2().unwrap();
    let batch = b.hidden_states(vec![long, short.clone()], false).unwrap();
    let padded: M = batch.get(1).unwrap().narrow(0, 0, short.len()).unwrap().to_vec2().unwrap();
    assert!(max_diff(&alone, &padded) < 1e-10);
    assert!(b.hidden_states(vec![vec![500]], false).is_err());
    assert!(b.hidden_states(vec![vec![]], false).is_err());
    let too_long = vec![5u32; b.max_length() + 1];
    assert!(matches!(b.hidden_states(vec![too_long], false), Err(Error::Length { .. })));
}

#[test]
fn toy_bundles_are_seeded_and_round_trip() {
    let a = toy(63);
    let again = toy(63);
    let other = toy(64);
    let name = a.encoder.word_embeddings_name();
    assert_eq!(mat(&a, &name), mat(&again, &name));
    assert_ne!(mat(&a, &name), mat(&other, &name));
    assert_eq!(a.model_id, "toy-s63-v128-h16-l2");
    assert!(a.capabilities.mlm && a.capabilities.discriminative);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.toy");
    save_toy(&a, &path).unwrap();
    let back = load_bundle(path.to_str().unwrap(), "main").unwrap();
    assert_eq!(back.model_id, a.model_id);
    let flat = |t: Tensor| t.flatten_all().unwrap().to_vec1::<f64>().unwrap();
    assert_eq!(back.params().len(), a.params().len());
    for (n, t) in a.params().detached() {
        assert_eq!(flat(t), flat(back.view(false).get(&n).unwrap()), "{n}");
    }

    let mlm = a.without_disc_head().unwrap();
    save_toy(&mlm, &path).unwrap();
    let back = load_toy(&path).unwrap();
    assert!(back.capabilities.mlm && !back.capabilities.discriminative);
    assert!(back.require_disc_head().is_err());
    assert!(mlm.without_vocab_head().is_err());

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(load_toy(&path).is_err());
    std::fs::write(&path, b"not a toy").unwrap();
    assert!(matches!(load_toy(&path), Err(Error::Input(_))));
    assert!(make_toy_bundle(1, 4, 16, 1).is_err());
    assert!(make_toy_bundle(1, 64, 2, 1).is_err());
    assert!(make_toy_bundle(1, 64, 16, 0).is_err());
    let big = make_toy_bundle(1, 200, 8, 1).unwrap();
    assert_eq!(big.tokenizer.vocab_size(), 200);
    assert!(big.tokenizer.token_to_id("tok0").is_some());
}

#[test]
fn forks_and_snapshots_are_independent() {
    let a = toy(65);
    let f = a.fork().unwrap();
    let name = "discriminator_predictions.dense_prediction.bias";
    f.params().set(name, &Tensor::new(&[3.0f64], &Device::Cpu).unwrap()).unwrap();
    assert_eq!(vecp(&a, name), vec![0.0]);
    assert_eq!(vecp(&f, name), vec![3.0]);
    let snap = f.params().deep_clone().unwrap();
    f.params().set(name, &Tensor::new(&[5.0f64], &Device::Cpu).unwrap()).unwrap();
    f.params().assign_from(&snap).unwrap();
    assert_eq!(vecp(&f, name), vec![3.0]);
    let shared = a.clone();
    a.params().set(name, &Tensor::new(&[1.0f64], &Device::Cpu).unwrap()).unwrap();
    assert_eq!(vecp(&shared, name), vec![1.0]);
    assert_eq!(a.params().len(), a.params().names().count());
}

#[test]
fn word_tokenizer_spans_and_specials() {
    let t = WordTokenizer::new(["it", "was", "great", "don't", "."]);
    let enc = t.encode("It was GREAT. [MASK] don't zzz");
    let s = WordTokenizer::SPECIAL_IDS;
    assert_eq!(enc.ids, vec![s.cls, 5, 6, 7, 9, s.mask, 8, s.unk, s.sep]);
    assert_eq!(enc.offsets[3], (7, 12));
    assert_eq!(enc.special, vec![true, false, false, false, false, true, false, false, true]);
    assert_eq!(enc.tokens_in(7, 13), vec![3, 4]);
    assert_eq!(enc.tokens_in(14, 20), vec![5]);
    assert_eq!(t.decode(&enc.ids), "it was great . [MASK] don't [UNK]");
    let tt = TextTokenizer::Word(t);
    assert_eq!(tt.mask_token(), "[MASK]");
    assert!(tt.is_special(s.mask) && !tt.is_special(5));
}

fn hf_tokenizer_json(words: &[String]) -> serde_json::Value {
    let specials = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];
    let vocab: BTreeMap<&str, usize> = specials.iter().copied().chain(words.iter().map(String::as_str)).enumerate().map(|(i, w)| (w, i)).collect();
    let added: Vec<_> = specials
        .iter()
        .enumerate()
        .map(|(i, s)| json!({"id": i, "content": s, "single_word": false, "lstrip": false, "rstrip": false, "normalized": false, "special": true}))
        .collect();
    let st = |name: &str, id: usize| json!({"id": name, "ids": [id], "tokens": [name]});
    json!({
        "version": "1.0",
        "truncation": null,
        "padding": null,
        "added_tokens": added,
        "normalizer": {"type": "BertNormalizer", "clean_text": true, "handle_chinese_chars": true, "strip_accents": null, "lowercase": true},
        "pre_tokenizer": {"type": "BertPreTokenizer"},
        "post_processor": {
            "type": "TemplateProcessing",
            "single": [{"SpecialToken": {"id": "[CLS]", "type_id": 0}}, {"Sequence": {"id": "A", "type_id": 0}}, {"SpecialToken": {"id": "[SEP]", "type_id": 0}}],
            "pair": [{"SpecialToken": {"id": "[CLS]", "type_id": 0}}, {"Sequence": {"id": "A", "type_id": 0}}, {"SpecialToken": {"id": "[SEP]", "type_id": 0}}, {"Sequence": {"id": "B", "type_id": 1}}, {"SpecialToken": {"id": "[SEP]", "type_id": 1}}],
            "special_tokens": {"[CLS]": st("[CLS]", 2), "[SEP]": st("[SEP]", 3)}
        },
        "decoder": null,
        "model": {"type": "WordLevel", "vocab": vocab, "unk_token": "[UNK]"}
    })
}

/// Writes `toy`'s weights as a published-layout checkpoint directory.
fn write_checkpoint(toy: &ModelBundle, dir: &std::path::Path, model_type: &str, rename: impl Fn(&str) -> Option<String>) {
    let e = &toy.encoder;
    let cfg = json!({
        "model_type": model_type,
        "vocab_size": e.vocab_size,
        "hidden_size": e.hidden_size,
        "num_hidden_layers": e.num_layers,
        "num_attention_heads": e.num_heads,
        "intermediate_size": e.intermediate_size,
        "max_position_embeddings": e.max_positions,
        "type_vocab_size": e.type_vocab_size,
        "layer_norm_eps": e.layer_norm_eps,
        "hidden_act": "gelu",
        "pad_token_id": 0
    });
    std::fs::write(dir.join("config.json"), cfg.to_string()).unwrap();
    let TextTokenizer::Word(w) = toy.tokenizer.as_ref() else { panic!() };
    std::fs::write(dir.join("tokenizer.json"), hf_tokenizer_json(&w.vocab()[5..]).to_string()).unwrap();
    let tensors: HashMap<String, Tensor> = toy
        .params()
        .detached()
        .into_iter()
        .filter_map(|(k, v)| rename(&k).map(|k| (k, v.to_dtype(DType::F32).unwrap())))
        .collect();
    candle_core::safetensors::save(&tensors, dir.join("model.safetensors")).unwrap();
}

fn encoder_rename(prefix: &str, k: &str) -> Option<String> {
    k.strip_prefix("encoder.").map(|rest| format!("{prefix}.{rest}"))
}

#[test]
fn electra_discriminator_checkpoint_adapter() {
    let t = toy(66);
    let dir = tempfile::tempdir().unwrap();
    write_checkpoint(&t, dir.path(), "electra", |k| {
        if k.starts_with("discriminator_predictions.") {
            Some(k.to_string())
        } else {
            encoder_rename("electra", k)
        }
    });
    let b = load_bundle(dir.path().to_str().unwrap(), "main").unwrap();
    assert!(b.capabilities.discriminative && !b.capabilities.mlm);
    assert_eq!(b.dtype(), DType::F32);
    let text = "the movie was great";
    let ids = b.tokenizer.encode(text).unwrap().ids;
    assert_eq!(ids, t.tokenizer.encode(text).unwrap().ids);
    let h_ckpt = b.hidden_states(vec![ids.clone()], false).unwrap().squeeze(0).unwrap();
    let h_toy = t.hidden_states(vec![ids], false).unwrap().squeeze(0).unwrap();
    let a: M = h_ckpt.to_dtype(DType::F64).unwrap().to_vec2().unwrap();
    assert!(max_diff(&a, &h_toy.to_vec2().unwrap()) < 1e-4);
    // The stored head predicts "replaced"; the loaded one must give its complement.
    let dh = b.disc_head.clone().unwrap();
    let loaded: Vec<f32> = dh.scores(b.view(false), &h_ckpt).unwrap().to_vec1().unwrap();
    let native: Vec<f64> = dh.scores(t.view(false), &h_toy).unwrap().to_vec1().unwrap();
    for (l, n) in loaded.iter().zip(&native) {
        assert!((*l as f64 - (1.0 - n)).abs() < 1e-4);
    }
}

#[test]
fn bert_checkpoint_adapter_ties_the_decoder() {
    let t = toy(67);
    let dir = tempfile::tempdir().unwrap();
    write_checkpoint(&t, dir.path(), "bert", |k| {
        let map = [
            ("mlm_head.dense.", "cls.predictions.transform.dense."),
            ("mlm_head.LayerNorm.", "cls.predictions.transform.LayerNorm."),
        ];
        if k == "mlm_head.bias" {
            return Some("cls.predictions.bias".into());
        }
        for (from, to) in map {
            if let Some(rest) = k.strip_prefix(from) {
                return Some(format!("{to}{rest}"));
            }
        }
        encoder_rename("bert", k)
    });
    let b = load_bundle(dir.path().to_str().unwrap(), "main").unwrap();
    assert!(b.capabilities.mlm && !b.capabilities.discriminative);
    let vh = b.vocab_head.clone().unwrap();
    assert_eq!(vh.table, "bert.embeddings.word_embeddings.weight");
    let ids = b.tokenizer.encode("it was [MASK] .").unwrap().ids;
    assert_eq!(ids[3], b.tokenizer.special_ids().mask);
    let h = b.hidden_states(vec![ids.clone()], false).unwrap().squeeze(0).unwrap().narrow(0, 3, 1).unwrap();
    let ht = t.hidden_states(vec![ids], false).unwrap().squeeze(0).unwrap().narrow(0, 3, 1).unwrap();
    let words = [10u32, 11, 12];
    let got: Vec<f32> = vh.logits_for(b.view(false), &h, &words).unwrap().squeeze(0).unwrap().to_vec1().unwrap();
    let want: Vec<f64> = t.vocab_head.clone().unwrap().logits_for(t.view(false), &ht, &words).unwrap().squeeze(0).unwrap().to_vec1().unwrap();
    for (g, w) in got.iter().zip(&want) {
        assert!((*g as f64 - w).abs() < 1e-3);
    }

    std::fs::remove_file(dir.path().join("model.safetensors")).unwrap();
    assert!(matches!(load_bundle(dir.path().to_str().unwrap(), "main"), Err(Error::Fetch(_))));
}

#[test]
fn unknown_models_name_the_cache_location() {
    let err = load_bundle("nobody/nothing-here", "main").unwrap_err();
    let Error::Fetch(msg) = err else { panic!("{err:?}") };
    assert!(msg.contains("nobody--nothing-here"));
    assert_eq!(resolve_model_id("electra-base"), "google/electra-base-discriminator");
}
