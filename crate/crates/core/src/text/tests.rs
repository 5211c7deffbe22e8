use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use safetensors::tensor::TensorView;
use safetensors::Dtype;

use super::*;

fn toy() -> TextFrontend {
    TextFrontend::from_config(&TextConfig::default()).unwrap()
}

#[test]
fn toy_encoding_shape_and_mask() {
    let fe = toy();
    let tokens = fe.tokenize("hello world").unwrap();
    let enc = fe.encode_tokens(&tokens).unwrap();
    assert_eq!(enc.vectors().dim(), (64, 32));
    assert_eq!(enc.valid_count(), tokens.len());
    for (i, &m) in enc.mask().iter().enumerate() {
        assert_eq!(m, i < tokens.len());
        if !m {
            assert!(enc.vectors().row(i).iter().all(|&v| v == 0.0));
        } else {
            assert!(enc.vectors().row(i).iter().any(|&v| v != 0.0));
        }
    }
}

#[test]
fn three_token_mask() {
    let fe = toy();
    // [CLS] a [SEP]
    let enc = fe.encode_text("a").unwrap();
    assert_eq!(&enc.mask()[..4], &[true, true, true, false]);
    assert_eq!(enc.valid_count(), 3);
}

#[test]
fn encoding_is_deterministic() {
    let a = toy().encode_text("the quick brown fox").unwrap();
    let b = toy().encode_text("the quick brown fox").unwrap();
    assert_eq!(a, b);
    let c = toy().encode_text("the quick brown cat").unwrap();
    assert_ne!(a, c);
}

#[test]
fn encoding_rejects_empty_text() {
    assert!(matches!(toy().encode_text("   "), Err(Error::Input(_))));
}

#[test]
fn text_encoding_validation() {
    let v = Array2::<f64>::zeros((3, 2));
    assert!(matches!(
        TextEncoding::new(v.clone(), vec![false; 3]),
        Err(Error::Input(_))
    ));
    assert!(matches!(
        TextEncoding::new(v.clone(), vec![true; 2]),
        Err(Error::Shape(_))
    ));
    let mut w = v;
    w[[2, 0]] = 1.0;
    assert!(TextEncoding::new(w, vec![true, true, false]).is_err());
}

#[test]
fn missing_bert_backend_is_config_error() {
    let cfg = TextConfig {
        backend: TextBackend::Bert,
        weights_path: Some("/nonexistent/bert.safetensors".into()),
        vocab_path: Some("/nonexistent/vocab.txt".into()),
        ..TextConfig::default()
    };
    match TextFrontend::from_config(&cfg) {
        Err(Error::Config(msg)) => assert!(msg.contains("bert"), "{msg}"),
        other => panic!("expected config error, got {other:?}"),
    }
    let cfg = TextConfig {
        backend: TextBackend::Bert,
        ..TextConfig::default()
    };
    assert!(matches!(
        TextFrontend::from_config(&cfg),
        Err(Error::Config(_))
    ));
}

// ---- pretrained adapter against a direct reference implementation ----

struct Tiny {
    tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl Tiny {
    fn new(d: usize, ff: usize, vocab: usize, positions: usize, layers: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = Vec::new();
        let mut add = |name: String, shape: Vec<usize>, scale: f32, offset: f32| {
            let n = shape.iter().product();
            let data = (0..n)
                .map(|_| offset + scale * (rng.gen::<f32>() - 0.5))
                .collect();
            tensors.push((name, shape, data));
        };
        add(
            "bert.embeddings.word_embeddings.weight".into(),
            vec![vocab, d],
            2.0,
            0.0,
        );
        add(
            "bert.embeddings.position_embeddings.weight".into(),
            vec![positions, d],
            2.0,
            0.0,
        );
        add(
            "bert.embeddings.token_type_embeddings.weight".into(),
            vec![2, d],
            2.0,
            0.0,
        );
        add("bert.embeddings.LayerNorm.gamma".into(), vec![d], 0.4, 1.0);
        add("bert.embeddings.LayerNorm.beta".into(), vec![d], 0.4, 0.0);
        for l in 0..layers {
            let p = format!("bert.encoder.layer.{l}");
            for part in [
                "attention.self.query",
                "attention.self.key",
                "attention.self.value",
                "attention.output.dense",
            ] {
                add(format!("{p}.{part}.weight"), vec![d, d], 1.0, 0.0);
                add(format!("{p}.{part}.bias"), vec![d], 0.2, 0.0);
            }
            add(
                format!("{p}.attention.output.LayerNorm.weight"),
                vec![d],
                0.4,
                1.0,
            );
            add(
                format!("{p}.attention.output.LayerNorm.bias"),
                vec![d],
                0.4,
                0.0,
            );
            add(
                format!("{p}.intermediate.dense.weight"),
                vec![ff, d],
                1.0,
                0.0,
            );
            add(format!("{p}.intermediate.dense.bias"), vec![ff], 0.2, 0.0);
            add(format!("{p}.output.dense.weight"), vec![d, ff], 1.0, 0.0);
            add(format!("{p}.output.dense.bias"), vec![d], 0.2, 0.0);
            add(format!("{p}.output.LayerNorm.weight"), vec![d], 0.4, 1.0);
            add(format!("{p}.output.LayerNorm.bias"), vec![d], 0.4, 0.0);
        }
        Self { tensors }
    }

    fn get(&self, name: &str) -> (&[usize], Vec<f64>) {
        let (_, shape, data) = self.tensors.iter().find(|(n, _, _)| n == name).unwrap();
        (shape, data.iter().map(|&v| v as f64).collect())
    }

    fn write(&self, path: &Path) {
        let bytes: Vec<(String, Vec<u8>, Vec<usize>)> = self
            .tensors
            .iter()
            .map(|(n, s, d)| {
                (
                    n.clone(),
                    d.iter().flat_map(|v| v.to_le_bytes()).collect(),
                    s.clone(),
                )
            })
            .collect();
        let views: HashMap<String, TensorView> = bytes
            .iter()
            .map(|(n, b, s)| {
                (
                    n.clone(),
                    TensorView::new(Dtype::F32, s.clone(), b).unwrap(),
                )
            })
            .collect();
        let out = safetensors::serialize(views, &None).unwrap();
        std::fs::write(path, out).unwrap();
    }

    /// Straightforward loop implementation of the BERT encoder.
    fn reference(&self, ids: &[usize], heads: usize, layers: usize) -> Vec<Vec<f64>> {
        let (wshape, word) = self.get("bert.embeddings.word_embeddings.weight");
        let d = wshape[1];
        let (_, pos) = self.get("bert.embeddings.position_embeddings.weight");
        let (_, tt) = self.get("bert.embeddings.token_type_embeddings.weight");
        let ln = |x: &[f64], g: &[f64], b: &[f64]| -> Vec<f64> {
            let n = x.len() as f64;
            let mu = x.iter().sum::<f64>() / n;
            let var = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            x.iter()
                .enumerate()
                .map(|(i, v)| (v - mu) / (var + 1e-12).sqrt() * g[i] + b[i])
                .collect()
        };
        let lin = |x: &[f64], name: &str| -> Vec<f64> {
            let (s, w) = self.get(&format!("{name}.weight"));
            let (_, b) = self.get(&format!("{name}.bias"));
            (0..s[0])
                .map(|o| b[o] + (0..s[1]).map(|i| w[o * s[1] + i] * x[i]).sum::<f64>())
                .collect()
        };
        let (_, g) = self.get("bert.embeddings.LayerNorm.gamma");
        let (_, b) = self.get("bert.embeddings.LayerNorm.beta");
        let mut h: Vec<Vec<f64>> = ids
            .iter()
            .enumerate()
            .map(|(t, &id)| {
                let e: Vec<f64> = (0..d)
                    .map(|k| word[id * d + k] + pos[t * d + k] + tt[k])
                    .collect();
                ln(&e, &g, &b)
            })
            .collect();
        let hd = d / heads;
        for l in 0..layers {
            let p = format!("bert.encoder.layer.{l}");
            let q: Vec<_> = h
                .iter()
                .map(|x| lin(x, &format!("{p}.attention.self.query")))
                .collect();
            let k: Vec<_> = h
                .iter()
                .map(|x| lin(x, &format!("{p}.attention.self.key")))
                .collect();
            let v: Vec<_> = h
                .iter()
                .map(|x| lin(x, &format!("{p}.attention.self.value")))
                .collect();
            let n = h.len();
            let mut ctx = vec![vec![0.0; d]; n];
            for hh in 0..heads {
                for i in 0..n {
                    let scores: Vec<f64> = (0..n)
                        .map(|j| {
                            (0..hd)
                                .map(|c| q[i][hh * hd + c] * k[j][hh * hd + c])
                                .sum::<f64>()
                                / (hd as f64).sqrt()
                        })
                        .collect();
                    let m = scores.iter().cloned().fold(f64::MIN, f64::max);
                    let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                    for j in 0..n {
                        let a = (scores[j] - m).exp() / z;
                        for c in 0..hd {
                            ctx[i][hh * hd + c] += a * v[j][hh * hd + c];
                        }
                    }
                }
            }
            let (_, g1) = self.get(&format!("{p}.attention.output.LayerNorm.weight"));
            let (_, b1) = self.get(&format!("{p}.attention.output.LayerNorm.bias"));
            let (_, g2) = self.get(&format!("{p}.output.LayerNorm.weight"));
            let (_, b2) = self.get(&format!("{p}.output.LayerNorm.bias"));
            h = (0..n)
                .map(|i| {
                    let o = lin(&ctx[i], &format!("{p}.attention.output.dense"));
                    let r: Vec<f64> = (0..d).map(|c| h[i][c] + o[c]).collect();
                    let a = ln(&r, &g1, &b1);
                    let f: Vec<f64> = lin(&a, &format!("{p}.intermediate.dense"))
                        .iter()
                        .map(|&x| {
                            0.5 * x * (1.0 + crate::autograd::erf(x / std::f64::consts::SQRT_2))
                        })
                        .collect();
                    let f = lin(&f, &format!("{p}.output.dense"));
                    let r: Vec<f64> = (0..d).map(|c| a[c] + f[c]).collect();
                    ln(&r, &g2, &b2)
                })
                .collect();
        }
        h
    }
}

#[test]
fn bert_adapter_matches_reference() {
    let dir = tempfile::tempdir().unwrap();
    let weights = dir.path().join("bert.safetensors");
    let vocab_path = dir.path().join("vocab.txt");
    let tiny = Tiny::new(8, 12, 9, 16, 2, 3);
    tiny.write(&weights);
    std::fs::write(
        &vocab_path,
        "[PAD]\n[UNK]\n[CLS]\n[SEP]\nhello\nworld\n##s\n!\nhi\n",
    )
    .unwrap();
    let cfg = TextConfig {
        backend: TextBackend::Bert,
        weights_path: Some(weights),
        vocab_path: Some(vocab_path),
        bert_heads: 2,
        length_max: 10,
        ..TextConfig::default()
    };
    let fe = TextFrontend::from_config(&cfg).unwrap();
    assert_eq!(fe.d_text(), 8);
    assert_eq!(fe.encoder().num_layers(), 2);
    let tokens = fe.tokenize("Hello worlds!").unwrap();
    assert_eq!(tokens.ids, vec![2, 4, 5, 6, 7, 3]);
    let enc = fe.encode_tokens(&tokens).unwrap();
    assert_eq!(enc.vectors().dim(), (10, 8));
    assert_eq!(enc.valid_count(), 6);
    let ids: Vec<usize> = tokens.ids.iter().map(|&i| i as usize).collect();
    let expected = tiny.reference(&ids, 2, 2);
    for (i, row) in expected.iter().enumerate() {
        for (c, &e) in row.iter().enumerate() {
            let got = enc.vectors()[[i, c]];
            assert!((got - e).abs() < 1e-9, "[{i},{c}] {got} vs {e}");
        }
    }
}
