mod common;

use candle_core::Tensor;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use common::*;
use musilingo::adapter::{project, AdapterState};
use musilingo::config::RunConfig;
use musilingo::data::{partition, select_split, Partition, Split, Version};
use musilingo::encoder::{aggregate_layers, LayerWeights, LayeredFeatures};
use musilingo::lm::{build_lm, ByteTokenizer};
use musilingo::metrics::{b_u, bert_s, evaluate_corpus, meteor, rouge_l, HashEmbedder};
use musilingo::model::MusiLingo;
use musilingo::nn::device;
use musilingo::sequence::masked_lm_loss;
use musilingo::train::{self, batch_loss, Example, StageOutput};

fn normal(r: &mut rand_chacha::ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(r)).collect()
}

#[test]
fn projection_matches_triple_loop() {
    let mut r = rng(1);
    for _ in 0..10 {
        let (t, dm, dt) = (r.gen_range(1..12), r.gen_range(1..20), r.gen_range(1..20));
        let x = normal(&mut r, t * dm);
        let w = normal(&mut r, dm * dt);
        let b = normal(&mut r, dt);
        let a = AdapterState::from_parts(
            Tensor::from_vec(w.clone(), (dm, dt), &device()).unwrap(),
            Some(Tensor::from_vec(b.clone(), dt, &device()).unwrap()),
            1,
        )
        .unwrap();
        let got: Vec<Vec<f64>> = project(&Tensor::from_vec(x.clone(), (t, dm), &device()).unwrap(), &a)
            .unwrap()
            .to_vec2()
            .unwrap();
        for i in 0..t {
            for j in 0..dt {
                let mut acc = b[j];
                for k in 0..dm {
                    acc += x[i * dm + k] * w[k * dt + j];
                }
                assert!((got[i][j] - acc).abs() <= 1e-6);
            }
        }
    }
}

fn loop_aggregate(states: &[f64], n: usize, t: usize, d: usize, weights: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; t * d];
    for l in 0..n {
        for k in 0..t * d {
            out[k] += weights[l] * states[l * t * d + k];
        }
    }
    out
}

#[test]
fn aggregation_matches_loop_oracle() {
    let mut r = rng(2);
    for case in 0..10 {
        let (n, t, d) = (r.gen_range(1..5), r.gen_range(1..9), r.gen_range(1..7));
        let s = normal(&mut r, n * t * d);
        let feats = LayeredFeatures::new(Tensor::from_vec(s.clone(), (n, t, d), &device()).unwrap()).unwrap();
        let (w, weights) = if case % 2 == 0 {
            (LayerWeights::uniform(n).unwrap(), vec![1.0 / n as f64; n])
        } else {
            let logits = normal(&mut r, n);
            let z: f64 = logits.iter().map(|x| x.exp()).sum();
            let p = logits.iter().map(|x| x.exp() / z).collect();
            (LayerWeights::from_logits(&logits).unwrap(), p)
        };
        let got: Vec<f64> = aggregate_layers(&feats, &w).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let want = loop_aggregate(&s, n, t, d, &weights);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
        }
    }
}

#[test]
fn aggregation_gradient_matches_finite_differences() {
    let mut r = rng(3);
    let (n, t, d) = (4, 5, 3);
    let feats = LayeredFeatures::new(Tensor::from_vec(normal(&mut r, n * t * d), (n, t, d), &device()).unwrap()).unwrap();
    let probe = Tensor::from_vec(normal(&mut r, t * d), (t, d), &device()).unwrap();
    let logits = normal(&mut r, n);
    let f = |lg: &[f64]| -> f64 {
        let w = LayerWeights::from_logits(lg).unwrap();
        (aggregate_layers(&feats, &w).unwrap() * &probe).unwrap().sum_all().unwrap().to_scalar().unwrap()
    };
    let w = LayerWeights::from_logits(&logits).unwrap();
    let out = (aggregate_layers(&feats, &w).unwrap() * &probe).unwrap().sum_all().unwrap();
    let g: Vec<f64> = out.backward().unwrap().get(w.logits.as_tensor()).unwrap().to_vec1().unwrap();
    let h = 1e-3;
    for k in 0..n {
        let (mut p, mut m) = (logits.clone(), logits.clone());
        p[k] += h;
        m[k] -= h;
        let fd = (f(&p) - f(&m)) / (2.0 * h);
        assert!((fd - g[k]).abs() <= 1e-4 * fd.abs().max(g[k].abs()).max(1e-3), "{fd} vs {}", g[k]);
    }
}

#[test]
fn masked_loss_matches_scalar_loop() {
    let mut r = rng(4);
    for _ in 0..20 {
        let (s, v) = (r.gen_range(2..15), r.gen_range(2..40));
        let logits = normal(&mut r, s * v);
        let ids: Vec<u32> = (0..s).map(|_| r.gen_range(0..v as u32)).collect();
        let mut mask: Vec<bool> = (0..s).map(|_| r.gen_bool(0.5)).collect();
        mask[s - 1] = true;
        let got: f64 = masked_lm_loss(&Tensor::from_vec(logits.clone(), (s, v), &device()).unwrap(), &ids, &mask)
            .unwrap()
            .to_scalar()
            .unwrap();
        // target i is predicted by the logits at position i - 1
        let (mut total, mut count) = (0.0, 0);
        for i in 1..s {
            if !mask[i] {
                continue;
            }
            let row = &logits[(i - 1) * v..i * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[ids[i] as usize];
            count += 1;
        }
        assert!((got - total / count as f64).abs() <= 1e-6);
    }
}

#[test]
fn corpus_means_match_external_recomputation() {
    let mut r = rng(5);
    let pairs: Vec<(String, String)> = (0..50)
        .map(|_| (random_sentence(&mut r, 7), format!("{} piano", random_sentence(&mut r, 7))))
        .collect();
    let e = HashEmbedder::default();
    let report = evaluate_corpus(&pairs, &e).unwrap();
    assert_eq!(report.count, 50);
    let mean = |f: &dyn Fn(&str, &str) -> f64| pairs.iter().map(|(c, r)| f(c, r)).sum::<f64>() / 50.0;
    assert!((report.corpus.bu - mean(&|c, r| b_u(c, r))).abs() <= 1e-9);
    assert!((report.corpus.meteor - mean(&|c, r| meteor(c, r))).abs() <= 1e-9);
    assert!((report.corpus.rouge_l - mean(&|c, r| rouge_l(c, r))).abs() <= 1e-9);
    assert!((report.corpus.bert_s - mean(&|c, r| bert_s(c, r, &e))).abs() <= 1e-9);
}

#[test]
fn every_byte_is_in_vocabulary() {
    let lm = build_lm(&RunConfig::default().lm).unwrap();
    for b in 0..=255u8 {
        let ids = ByteTokenizer.encode_bytes(&[b]);
        assert_eq!(ids, vec![u32::from(b)]);
        assert!(lm.embed_tokens(&ids).is_ok());
    }
}

#[test]
fn logits_are_causal_under_random_perturbations() {
    let cfg = RunConfig::default();
    let lm = build_lm(&cfg.lm).unwrap();
    let mut r = rng(6);
    for _ in 0..5 {
        let s = r.gen_range(3..12);
        let x = normal(&mut r, s * cfg.lm.dim);
        let j = r.gen_range(1..s);
        let mut y = x.clone();
        for v in &mut y[j * cfg.lm.dim..] {
            *v += Distribution::<f64>::sample(&StandardNormal, &mut r);
        }
        let lx: Vec<Vec<f64>> = lm
            .forward_logits(&Tensor::from_vec(x, (s, cfg.lm.dim), &device()).unwrap())
            .unwrap()
            .to_vec2()
            .unwrap();
        let ly: Vec<Vec<f64>> = lm
            .forward_logits(&Tensor::from_vec(y, (s, cfg.lm.dim), &device()).unwrap())
            .unwrap()
            .to_vec2()
            .unwrap();
        assert_eq!(lx[..j], ly[..j]);
        assert_ne!(lx[j], ly[j]);
    }
}

#[test]
fn adapter_gradient_is_nonzero() {
    let cfg = RunConfig::default();
    let model = MusiLingo::from_config(&cfg).unwrap();
    let mut r = rng(7);
    for i in 0..5 {
        let n = model.encoder.num_states();
        let feats =
            LayeredFeatures::new(Tensor::from_vec(normal(&mut r, n * 8 * 16), (n, 8, 16), &device()).unwrap()).unwrap();
        let ex = Example {
            feats,
            question: (i % 2 == 0).then(|| "What is it?".to_string()),
            target: "a song.".into(),
        };
        let loss = batch_loss(&model, &[&ex]).unwrap();
        let g = loss.backward().unwrap();
        let gw = g.get(model.adapter.weight.as_tensor()).unwrap();
        let norm: f64 = gw.sqr().unwrap().sum_all().unwrap().to_scalar().unwrap();
        assert!(norm > 0.0);
    }
}

#[test]
fn short_partition_never_reaches_long_records() {
    let pairs: Vec<_> = (0..30)
        .map(|i| {
            qa(
                &format!("c{i}"),
                "q?",
                "a.",
                if i % 3 == 0 { Version::Long } else { Version::Short },
                if i % 5 == 0 { Split::Test } else { Split::Train },
            )
        })
        .collect();
    let train_short = select_split(&partition(&pairs, Partition::Short), Split::Train);
    assert!(!train_short.is_empty());
    assert!(train_short.iter().all(|p| p.version == Version::Short && p.split == Split::Train));
    let expected = pairs
        .iter()
        .filter(|p| p.version == Version::Short && p.split == Split::Train)
        .count();
    assert_eq!(train_short.len(), expected);
}

/// Loss on the eight-caption set falls from each 50-step window to the next.
#[test]
fn overfit_loss_decreases_over_windows() {
    let mut cfg = RunConfig::default();
    cfg.apply_overrides(OVERFIT_OVERRIDES).unwrap();
    let model = MusiLingo::from_config(&cfg).unwrap();
    let clips: Vec<_> = (0..8).map(|i| waveform_clip(&format!("c{i}"), i, 256, 256)).collect();
    let caps: Vec<_> = (0..8).map(|i| caption(&format!("c{i}"), OVERFIT_CAPTIONS[i])).collect();
    let r = train::pretrain(&model, &clips, &caps, &cfg, None, &StageOutput::default()).unwrap();
    assert_eq!(r.losses.len(), 500);
    let windows: Vec<f64> = r.losses.chunks(50).map(|w| w.iter().sum::<f64>() / 50.0).collect();
    for w in windows.windows(2) {
        assert!(w[1] < w[0], "window means {windows:?}");
    }
}
