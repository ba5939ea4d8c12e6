mod common;

use common::*;
use ndarray::Array1;
use texgram::feature::{GramSet, LayerSpec};
use texgram::training::*;
use texgram::wae::{GramWae, ModelConfig};

fn spec() -> LayerSpec {
    LayerSpec::from_widths("toy", &[4, 8, 8])
}

fn model(seed: u64) -> GramWae {
    let cfg = ModelConfig {
        d_e: 16,
        d_r: 64,
        d_v: 16,
        d_dis: 64,
        ..ModelConfig::toy(spec())
    };
    GramWae::new(cfg, seed).unwrap()
}

fn corpus(n: usize, seed: u64) -> Vec<GramSet> {
    let mut r = rng(seed);
    (0..n).map(|_| random_gram_set(&spec(), &mut r)).collect()
}

#[test]
fn single_sample_overfit() {
    let data = corpus(1, 0);
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        max_steps: 200,
        ..Default::default()
    };
    let w = cfg.weights(3).unwrap();
    let m = model(1);
    let before = evaluate_rec(&m, &data, &w).unwrap();
    let s = train(TrainState::new(m, &cfg), &data, &cfg, None).unwrap();
    let after = evaluate_rec(&s.model, &data, &w).unwrap();
    assert!(after <= 0.01 * before, "{before} -> {after}");
}

#[test]
fn identical_seeds_give_identical_traces() {
    let data = corpus(5, 1);
    let cfg = TrainConfig {
        max_steps: 15,
        batch_size: 3,
        seed: 4,
        ..Default::default()
    };
    let a = train(TrainState::new(model(2), &cfg), &data, &cfg, None).unwrap();
    let b = train(TrainState::new(model(2), &cfg), &data, &cfg, None).unwrap();
    let bits = |s: &TrainState| -> Vec<[u64; 3]> {
        s.trace.iter().map(|l| [l.rec.to_bits(), l.adv.to_bits(), l.dis.to_bits()]).collect()
    };
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(a.model.encoder, b.model.encoder);
}

#[test]
fn zero_lambda_ignores_discriminator() {
    let data = corpus(4, 2);
    let cfg = TrainConfig {
        lambda_adv: 0.0,
        max_steps: 1,
        ..Default::default()
    };
    let a = model(3);
    let mut b = a.clone();
    b.discriminator = model(99).discriminator;
    let mut sa = TrainState::new(a, &cfg);
    let mut sb = TrainState::new(b, &cfg);
    train_step(&mut sa, &data, &cfg).unwrap();
    train_step(&mut sb, &data, &cfg).unwrap();
    assert_eq!(sa.model.encoder, sb.model.encoder);
    assert_eq!(sa.model.decoder, sb.model.decoder);
}

#[test]
fn resume_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let out = TrainOutputs { dir: dir.path().to_path_buf() };
    let data = corpus(6, 3);
    let five = TrainConfig {
        max_steps: 5,
        batch_size: 4,
        ..Default::default()
    };
    let ten = TrainConfig { max_steps: 10, ..five.clone() };

    let s = train(TrainState::new(model(4), &five), &data, &five, Some(&out)).unwrap();
    let saved = TrainState::load(out.checkpoint(), &five).unwrap();
    assert_eq!(saved.step, 5);
    assert_eq!(saved.model.encoder, s.model.encoder);
    assert_eq!(saved.opt_decoder, s.opt_decoder);

    let again = train(saved, &data, &five, Some(&out)).unwrap();
    let (ca, cb) = (again.to_container().unwrap(), s.to_container().unwrap());
    for name in cb.names() {
        assert_eq!(ca.get(name).unwrap(), cb.get(name).unwrap(), "{name}");
    }
    assert_eq!(ca.metadata(), cb.metadata());
    assert_eq!(ca.to_bytes().unwrap(), cb.to_bytes().unwrap());

    let resumed = train(again, &data, &ten, Some(&out)).unwrap();
    let straight = train(TrainState::new(model(4), &ten), &data, &ten, None).unwrap();
    assert_eq!(resumed.model.encoder, straight.model.encoder);
    assert_eq!(resumed.model.discriminator, straight.model.discriminator);

    let text = std::fs::read_to_string(out.losses()).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "step,L_rec,L_adv,L_dis");
    assert_eq!(lines.len(), 11);
    assert!(lines[10].starts_with("10,"));
}

#[test]
fn snapshots_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let out = TrainOutputs { dir: dir.path().to_path_buf() };
    let cfg = TrainConfig {
        max_steps: 4,
        snapshot_every: 2,
        ..Default::default()
    };
    train(TrainState::new(model(5), &cfg), &corpus(2, 4), &cfg, Some(&out)).unwrap();
    assert!(out.snapshot(2).exists() && out.snapshot(4).exists());
}

#[test]
fn divergence_keeps_last_good_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = TrainOutputs { dir: dir.path().to_path_buf() };
    let mut data = corpus(2, 5);
    data[1].layers[0].matrix[[0, 0]] = f64::NAN;
    let cfg = TrainConfig { max_steps: 3, ..Default::default() };
    let m = model(6);
    let enc = m.encoder.clone();
    let err = train(TrainState::new(m, &cfg), &data, &cfg, Some(&out)).unwrap_err();
    assert_eq!(err.kind(), "NonFiniteLoss");
    let kept = TrainState::load(out.checkpoint(), &cfg).unwrap();
    assert_eq!(kept.step, 0);
    assert_eq!(kept.model.encoder, enc);
}

#[test]
fn empty_dataset_is_rejected() {
    let cfg = TrainConfig::default();
    let err = train(TrainState::new(model(7), &cfg), &[], &cfg, None).unwrap_err();
    assert_eq!(err.kind(), "EmptyDataset");
}

#[test]
fn rec_loss_matches_elementwise_oracle() {
    let x = corpus(2, 8);
    let y = corpus(2, 9);
    let w = [0.5, 1.0, 3.0];
    let mut expect = 0.0;
    for b in 0..2 {
        for l in 0..3 {
            let (g, h) = (&x[b].layers[l].matrix, &y[b].layers[l].matrix);
            for i in 0..g.nrows() {
                for j in 0..g.ncols() {
                    expect += w[l] * (g[[i, j]] - h[[i, j]]).powi(2);
                }
            }
        }
    }
    expect /= 2.0;
    let got = loss_rec(&x, &y, &w).unwrap();
    assert!((got - expect).abs() <= 1e-6 * expect.abs());
    assert_eq!(loss_rec(&x, &x, &w).unwrap(), 0.0);
}

#[test]
fn adv_loss_matches_per_sample_oracle() {
    let mut r = rng(10);
    let p: Array1<f64> = randn(6, &mut r).mapv(|v: f64| 1.0 / (1.0 + (-v).exp()));
    let q: Array1<f64> = randn(5, &mut r).mapv(|v: f64| 1.0 / (1.0 + (-v).exp()));
    let mut a = 0.0;
    for v in &p {
        a += v.ln();
    }
    let mut b = 0.0;
    for v in &q {
        b += (1.0 - v).ln();
    }
    let expect = a / 6.0 + b / 5.0;
    assert!((loss_adv(p.view(), q.view()).unwrap() - expect).abs() < 1e-6);
}
