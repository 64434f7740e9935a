mod common;

use std::cell::RefCell;

use common::*;
use kws::audio_io::{synth_dataset, SplitRatios, SynthSpec};
use kws::autodiff::{Graph, Tensor};
use kws::dsp::{DspConfig, Featurizer};
use kws::layers::Mode;
use kws::models::{Arch, Model, ModelConfig};
use kws::training::{
    adam_step, cross_entropy_loss, decode_checkpoint, encode_checkpoint, epoch_batches, fit, fit_with, load_checkpoint,
    lr_schedule, save_checkpoint, train_epoch, AdamState, Checkpoint, FeatureSet, TrainConfig, TrainHistory,
};
use proptest::prelude::*;
use rand::Rng;

fn synth_set(seed: u64) -> FeatureSet {
    let spec = SynthSpec::tones(3, 20);
    let index = synth_dataset(&spec, seed).unwrap();
    let featurizer = Featurizer::new(DspConfig::default()).unwrap();
    FeatureSet::from_index(&index, &featurizer, &spec.labels()).unwrap()
}

fn small_model(arch: Arch, shape: (usize, usize), seed: u64) -> Model {
    let mut c = ModelConfig::new(arch, 3, shape);
    c.conv_channels = vec![4; arch.conv_blocks()];
    c.lstm_hidden = 8;
    c.dense_hidden = 16;
    c.seed = seed;
    Model::build(c).unwrap()
}

fn tiny_set(n: usize, shape: (usize, usize), seed: u64) -> FeatureSet {
    let mut r = rng(seed);
    let x = random_tensor(&[n, shape.0, shape.1], seed);
    let feats: Vec<_> = (0..n)
        .map(|i| {
            let stride = shape.0 * shape.1;
            let m = kws::dsp::Matrix::from_vec(shape.0, shape.1, x.data()[i * stride..(i + 1) * stride].to_vec());
            kws::dsp::FeatureMatrix {
                values: m,
                kind: kws::dsp::FeatureKind::Mfcc,
            }
        })
        .collect();
    let labels = (0..n).map(|_| random_in(&mut r, 0, 1)).collect();
    FeatureSet::new(&feats, labels).unwrap()
}

fn stub_config(max_epochs: usize, patience: usize) -> TrainConfig {
    TrainConfig {
        max_epochs,
        batch_size: 4,
        patience,
        seed: 5,
        ..TrainConfig::default()
    }
}

fn tensors(m: &Model) -> Vec<(String, Tensor)> {
    m.named_tensors().map(|(n, t)| (n.clone(), t.clone())).collect()
}

#[test]
fn early_stopping_returns_the_peak_snapshot() {
    let model = Model::build(tiny_config(Arch::AttentionRnn)).unwrap();
    let data = tiny_set(8, (6, 4), 1);
    let snapshots = RefCell::new(Vec::new());
    let outcome = fit_with(
        model,
        &data,
        &stub_config(100, 10),
        |m, epoch| {
            snapshots.borrow_mut().push(tensors(m));
            // rises to epoch 11, then falls
            let acc = 1.0 - (epoch as f64 - 11.0).abs() / 100.0;
            Ok((1.0 - acc, acc))
        },
        |_| {},
    )
    .unwrap();
    let h = &outcome.history;
    assert_eq!(h.records.len(), 21);
    assert_eq!(h.best_epoch, 11);
    assert_eq!(
        h.records.iter().map(|r| r.epoch).collect::<Vec<_>>(),
        (1..=21).collect::<Vec<_>>()
    );
    let snaps = snapshots.into_inner();
    assert_eq!(tensors(&outcome.model), snaps[10]);
    assert_ne!(tensors(&outcome.model), snaps[20]);
    assert_eq!(outcome.model.mode, Mode::Infer);
}

#[test]
fn improving_runs_to_max_and_flat_stops_after_patience() {
    let run = |patience: usize, acc: &dyn Fn(usize) -> f64| {
        let model = Model::build(tiny_config(Arch::Cnn)).unwrap();
        let data = tiny_set(6, (8, 8), 2);
        fit_with(
            model,
            &data,
            &stub_config(15, patience),
            |_, e| Ok((0.0, acc(e))),
            |_| {},
        )
        .unwrap()
        .history
    };
    let h = run(3, &|e| e as f64);
    assert_eq!((h.records.len(), h.best_epoch), (15, 15));
    // a flat metric never improves after epoch 1
    let h = run(4, &|_| 0.5);
    assert_eq!((h.records.len(), h.best_epoch), (5, 1));
}

#[test]
fn patience_must_be_below_the_epoch_budget() {
    let model = Model::build(tiny_config(Arch::Cnn)).unwrap();
    let data = tiny_set(4, (8, 8), 3);
    let r = fit_with(model.clone(), &data, &stub_config(4, 4), |_, _| Ok((0.0, 0.0)), |_| {});
    assert!(matches!(r, Err(kws::KwsError::Config(_))));
    // patience one short of the budget runs every epoch when nothing improves
    let h = fit_with(
        model,
        &data,
        &stub_config(4, 3),
        |_, e| Ok((0.0, 1.0 / e as f64)),
        |_| {},
    )
    .unwrap()
    .history;
    assert_eq!((h.records.len(), h.best_epoch), (4, 1));
}

#[test]
fn learning_rate_decays_per_epoch() {
    let c = TrainConfig {
        base_lr: 2e-3,
        lr_decay: 0.9,
        ..TrainConfig::default()
    };
    for e in 0..20 {
        let expect = 2e-3 * 0.9f64.powi(e as i32);
        assert!((lr_schedule(e, &c) - expect).abs() < 1e-18);
    }
    let model = Model::build(tiny_config(Arch::Cnn)).unwrap();
    let h = fit_with(
        model,
        &tiny_set(4, (8, 8), 4),
        &TrainConfig {
            max_epochs: 3,
            patience: 2,
            ..c.clone()
        },
        |_, _| Ok((0.0, 0.0)),
        |_| {},
    )
    .unwrap()
    .history;
    let lrs: Vec<f64> = h.records.iter().map(|r| r.lr).collect();
    assert_eq!(lrs, vec![lr_schedule(0, &c), lr_schedule(1, &c), lr_schedule(2, &c)]);
}

#[test]
fn first_adam_step_moves_each_weight_by_lr() {
    let mut model = Model::build(tiny_config(Arch::AttentionRnn)).unwrap();
    let mut r = rng(11);
    let before = tensors(&model);
    let mut grads = Vec::new();
    for p in model.params_mut().values_mut() {
        let g: Vec<f64> = (0..p.value.numel())
            .map(|_| {
                let v = r.gen_range(0.01..1.0);
                if r.gen_bool(0.5) {
                    v
                } else {
                    -v
                }
            })
            .collect();
        p.grad = Tensor::from_vec(p.value.shape(), g.clone());
        grads.push(g);
    }
    let mut state = AdamState::new(&model);
    let lr = 1e-3;
    adam_step(&mut model, &mut state, lr).unwrap();
    // bias correction makes the first update lr * g / (|g| + ε')
    for (((name, old), new), g) in before.iter().zip(model.params().values()).zip(&grads) {
        for (i, gi) in g.iter().enumerate() {
            let delta = new.value.data()[i] - old.data()[i];
            if new.trainable {
                let expect = -lr * gi / (gi.abs() + 1e-8);
                assert!((delta - expect).abs() < 1e-12, "{name}[{i}]: {delta} vs {expect}");
            } else {
                assert_eq!(delta, 0.0, "{name} is not trainable");
            }
        }
    }
    assert_eq!(state.t, 1);
}

#[test]
fn adam_step_rejects_mismatched_state() {
    let mut a = Model::build(tiny_config(Arch::Cnn)).unwrap();
    let b = Model::build(tiny_config(Arch::AttentionRnn)).unwrap();
    let mut state = AdamState::new(&b);
    assert!(adam_step(&mut a, &mut state, 1e-3).is_err());
}

#[test]
fn train_epoch_visits_every_sample_once() {
    let mut model = Model::build(tiny_config(Arch::Cnn)).unwrap();
    let data = tiny_set(11, (8, 8), 5);
    let mut state = AdamState::new(&model);
    let config = TrainConfig {
        batch_size: 4,
        ..TrainConfig::default()
    };
    let m = train_epoch(&mut model, &data, &mut state, &config, 0).unwrap();
    assert_eq!(state.t, 3);
    assert!(m.loss.is_finite() && m.loss > 0.0);
    let c = m.accuracy * 11.0;
    assert!((c - c.round()).abs() < 1e-9);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn epoch_batches_partition_the_set(n in 1usize..200, bs in 1usize..40, seed in any::<u64>(), epoch in 0usize..50) {
        let batches = epoch_batches(n, bs, seed, epoch);
        prop_assert_eq!(batches.len(), n.div_ceil(bs));
        prop_assert!(batches.iter().take(batches.len() - 1).all(|b| b.len() == bs));
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(&batches, &epoch_batches(n, bs, seed, epoch));
    }
}

#[test]
fn shuffles_differ_between_epochs() {
    let a = epoch_batches(50, 50, 1, 0);
    let b = epoch_batches(50, 50, 1, 1);
    assert_ne!(a, b);
}

#[test]
fn loss_drops_in_five_epochs_on_tones() {
    let data = synth_set(42);
    for seed in 0..5 {
        let model = small_model(Arch::MultilayerAttention, data.sample_shape(), seed);
        let config = TrainConfig {
            max_epochs: 5,
            batch_size: 8,
            patience: 4,
            seed,
            ..TrainConfig::default()
        };
        let h = fit_with(model, &data, &config, |_, _| Ok((0.0, 0.0)), |_| {})
            .unwrap()
            .history;
        let (first, last) = (h.records[0].train_loss, h.records[4].train_loss);
        assert!(last < first, "seed {seed}: epoch 5 loss {last} vs epoch 1 {first}");
    }
}

#[test]
fn identical_seeds_give_identical_metrics() {
    let data = synth_set(42);
    let config = TrainConfig {
        max_epochs: 3,
        batch_size: 8,
        patience: 2,
        seed: 42,
        ..TrainConfig::default()
    };
    let run = || {
        let model = small_model(Arch::MultilayerAttention, data.sample_shape(), 42);
        fit(model, &data, &data, &config).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.history.to_csv(), b.history.to_csv());
    assert_eq!(tensors(&a.model), tensors(&b.model));
    let other = fit(
        small_model(Arch::MultilayerAttention, data.sample_shape(), 42),
        &data,
        &data,
        &TrainConfig { seed: 43, ..config },
    )
    .unwrap();
    assert_ne!(tensors(&a.model), tensors(&other.model));
}

#[test]
fn metrics_csv_round_trips() {
    let model = Model::build(tiny_config(Arch::Cnn)).unwrap();
    let h = fit_with(
        model,
        &tiny_set(4, (8, 8), 6),
        &stub_config(4, 3),
        |_, e| Ok((0.5 / e as f64, 0.25 * e as f64)),
        |_| {},
    )
    .unwrap()
    .history;
    let parsed = TrainHistory::parse_csv(&h.to_csv()).unwrap();
    assert_eq!(parsed.best_epoch, h.best_epoch);
    assert_eq!(parsed.to_csv(), h.to_csv());
    assert!(TrainHistory::parse_csv("epoch,loss\n1,2\n").is_err());
}

fn trained_checkpoint(arch: Arch) -> Checkpoint {
    let config = tiny_config(arch);
    let shape = config.input_shape;
    let model = Model::build(config).unwrap();
    let data = tiny_set(6, shape, 7);
    let outcome = fit_with(model, &data, &stub_config(2, 1), |_, e| Ok((0.0, e as f64)), |_| {}).unwrap();
    Checkpoint {
        model: outcome.model,
        train: stub_config(2, 1),
        dsp: DspConfig::default(),
        labels: vec!["yes".into(), "no".into()],
        adam: Some(outcome.adam),
        history: outcome.history,
        split: SplitRatios::default(),
    }
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    for arch in Arch::ALL {
        let ck = trained_checkpoint(arch);
        let path = dir.path().join(format!("{arch}.ckpt"));
        save_checkpoint(&ck, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        let (t, d) = ck.model.config.input_shape;
        let x = random_tensor(&[3, t, d], 8);
        let a = ck.model.infer_logits(&x).unwrap();
        let b = back.model.infer_logits(&x).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b), "{arch}");
        assert_eq!(tensors(&ck.model), tensors(&back.model));
        assert_eq!(back.adam, ck.adam);
        assert_eq!(back.history, ck.history);
        assert_eq!(back.labels, ck.labels);
        assert_eq!(back.train, ck.train);
        assert_eq!(back.dsp, ck.dsp);
        assert_eq!(encode_checkpoint(&back).unwrap(), encode_checkpoint(&ck).unwrap());
    }
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let ck = trained_checkpoint(Arch::AttentionRnn);
    let bytes = encode_checkpoint(&ck).unwrap();
    for i in 0..4 {
        let mut bad = bytes.clone();
        bad[i] ^= 0x20;
        assert!(decode_checkpoint(&bad).is_err(), "magic byte {i}");
    }
    for cut in [0, 3, 8, bytes.len() / 2, bytes.len() - 1] {
        assert!(decode_checkpoint(&bytes[..cut]).is_err(), "truncated at {cut}");
    }
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(decode_checkpoint(&extra).is_err());
}

#[test]
fn cross_entropy_matches_direct_formula() {
    let logits = random_tensor(&[5, 4], 9);
    let labels = [0, 3, 1, 1, 2];
    let g = Graph::new();
    let loss = cross_entropy_loss(g.constant(logits.clone()), &labels)
        .unwrap()
        .value()
        .item();
    let mut expect = 0.0;
    for (row, &y) in logits.data().chunks(4).zip(&labels) {
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        expect -= (row[y].exp() / z).ln();
    }
    assert!((loss - expect / 5.0).abs() < 1e-12);
}
