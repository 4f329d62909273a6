use proptest::prelude::*;

use super::*;
use crate::attention::HeadShape;
use crate::geometry::KernelConfig;
use crate::recurrent::{ModelKind, Runner};
use crate::worldsim::{dataset_bytes, DatasetHeader, WorldConfig};

fn tiny_model(kind: ModelKind, seed: u64) -> Model {
    Model::new(ModelConfig {
        modules: 2,
        hidden: 4,
        embed_dim: 8,
        encoding: 6,
        kernel: KernelConfig { epsilon: 1.0, tau: 0.6 },
        input_heads: HeadShape { heads: 2, key: 3, value: 3 },
        inter_heads: HeadShape { heads: 1, key: 3, value: 3 },
        gate_hidden: 4,
        codec_hidden: 8,
        baseline_hidden: 6,
        tto_hidden: 6,
        seed,
        ..ModelConfig::desk(kind)
    })
    .unwrap()
}

fn tiny_data(n_seq: usize, seed: u64) -> Dataset {
    let h = DatasetHeader { n_seq, frames: 4, views: 3, n_balls: 3, seed };
    Dataset::from_bytes(dataset_bytes(&h, &WorldConfig::default()).unwrap()).unwrap()
}

#[test]
fn bce_examples() {
    assert!((bce_loss(&[0.0], &[1.0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    assert!(bce_loss(&[50.0], &[1.0]).unwrap() < 1e-20);
    for l in [-3.0, -0.2, 0.0, 1.7, 9.0] {
        assert_eq!(bce_loss(&[l], &[1.0]).unwrap(), bce_loss(&[-l], &[0.0]).unwrap());
    }
    assert!(bce_loss(&[0.0, 1.0], &[1.0]).is_err());
}

#[test]
fn adam_first_step_moves_by_lr() {
    let mut store = ParamStore::new();
    store.insert("w", Tensor::scalar(2.0)).unwrap();
    let mut adam = Adam::new(&store);
    adam.update(&mut store, &[Tensor::scalar(1.0)], 0.01).unwrap();
    let moved = store.get("w").unwrap().item().unwrap() - 2.0;
    assert!((moved + 0.01).abs() < 1e-9, "moved {moved}");
}

#[test]
fn adam_zero_gradient_leaves_parameter() {
    let mut store = ParamStore::new();
    store.insert("w", Tensor::vector(vec![1.0, -3.0]).unwrap()).unwrap();
    let mut adam = Adam::new(&store);
    adam.update(&mut store, &[Tensor::zeros(&[2])], 0.1).unwrap();
    assert_eq!(store.get("w").unwrap().data(), &[1.0, -3.0]);
}

#[test]
fn adam_keeps_module_embeddings_on_the_sphere() {
    let mut model = tiny_model(ModelKind::S2Gru, 1);
    let mut adam = Adam::new(model.params());
    let grads: Vec<Tensor> = model.params().iter().map(|(_, t)| Tensor::full(t.shape(), 0.3)).collect();
    adam.update(model.params_mut(), &grads, 0.1).unwrap();
    let bank = model.params().get(EMBEDDING_PARAM).unwrap();
    for m in 0..2 {
        let n: f64 = bank.row(m).iter().map(|v| v * v).sum();
        assert!((n.sqrt() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn adam_descends_a_quadratic() {
    let mut store = ParamStore::new();
    store.insert("w", Tensor::scalar(3.0)).unwrap();
    let mut adam = Adam::new(&store);
    let loss = |w: f64| 0.5 * 4.0 * w * w;
    let mut prev = loss(3.0);
    for _ in 0..20 {
        let w = store.get("w").unwrap().item().unwrap();
        adam.update(&mut store, &[Tensor::scalar(4.0 * w)], 0.05).unwrap();
        let now = loss(store.get("w").unwrap().item().unwrap());
        assert!(now < prev);
        prev = now;
    }
}

#[test]
fn clipping_bounds_the_global_norm() {
    let mut g = vec![Tensor::vector(vec![3.0, 0.0]).unwrap(), Tensor::scalar(4.0)];
    assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
    assert!((g[0].data()[0] - 0.6).abs() < 1e-15 && (g[1].data()[0] - 0.8).abs() < 1e-15);
    let mut small = vec![Tensor::scalar(0.5)];
    clip_global_norm(&mut small, 1.0);
    assert_eq!(small[0].data(), &[0.5]);
}

#[test]
fn plateau_examples() {
    let mut p = Plateau::new(1.0, 2.0, 1e-4, 5);
    p.step(1.0);
    assert_eq!(p.step(0.5), 1.0);

    let mut p = Plateau::new(1.0, 2.0, 1e-4, 5);
    let lrs: Vec<f64> = (0..6).map(|_| p.step(0.7)).collect();
    assert_eq!(lrs, vec![1.0, 1.0, 1.0, 1.0, 1.0, 0.5]);

    let mut p = Plateau::new(1.0, 2.0, 1e-4, 5);
    p.step(1.0);
    // an improvement below the relative threshold counts as a bad epoch
    p.step(0.99999);
    assert_eq!(p.bad_epochs, 1);
}

proptest! {
    #[test]
    fn plateau_never_raises_the_rate(losses in proptest::collection::vec(0.0f64..10.0, 1..60)) {
        let mut p = Plateau::new(3e-4, 2.0, 1e-4, 5);
        let mut last = p.lr;
        for l in losses {
            let lr = p.step(l);
            prop_assert!(lr <= last);
            last = lr;
        }
    }
}

#[test]
fn zero_decoder_starts_at_ln2() {
    let mut model = tiny_model(ModelKind::S2Gru, 2);
    for (name, t) in model.params_mut().iter_mut() {
        if name.starts_with("dec.") {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let loss = dataset_loss(&model, &tiny_data(3, 5)).unwrap();
    assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn training_is_deterministic_across_thread_counts() {
    let (tr, va) = (tiny_data(6, 1), tiny_data(2, 2));
    let cfg = TrainConfig { epochs: 2, batch: 3, lr: 1e-2, ..TrainConfig::desk() };
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let mut model = tiny_model(ModelKind::S2Gru, 3);
            let report = train(&mut model, &tr, &va, &cfg, |_| {}).unwrap();
            (report.epochs, report.best.to_bytes().unwrap())
        })
    };
    let (a, b, c) = (run(1), run(1), run(4));
    assert_eq!(a, b);
    assert_eq!(a, c);
    let best = a.0.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
    let ckpt = Checkpoint::from_bytes(&a.1).unwrap();
    assert_eq!(ckpt.val_loss, best);
    assert!(a.0.iter().all(|e| ckpt.val_loss <= e.val_loss));
}

#[test]
fn every_model_kind_trains() {
    let (tr, va) = (tiny_data(4, 3), tiny_data(2, 4));
    let cfg = TrainConfig { epochs: 1, batch: 2, ..TrainConfig::desk() };
    for kind in [ModelKind::S2Gru, ModelKind::BaselineGru, ModelKind::BaselineLstm, ModelKind::Tto] {
        let mut model = tiny_model(kind, 5);
        let before = model.params().clone();
        let report = train(&mut model, &tr, &va, &cfg, |_| {}).unwrap();
        assert_eq!(report.epochs.len(), 1);
        assert_ne!(*model.params(), before, "{kind:?} did not update");
    }
}

#[test]
fn epoch_csv_layout() {
    let csv = epochs_csv(&[EpochLog { epoch: 1, lr: 3e-4, train_loss: 0.5, val_loss: 0.25 }]);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "epoch,lr,train_loss,val_loss");
    assert!(lines[1].starts_with("1,3e-4,0.5"));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let model = tiny_model(ModelKind::S2Gru, 7);
    let mut adam = Adam::new(model.params());
    adam.step = 3;
    let ckpt = Checkpoint::from_model(&model, Some(&adam), 4, 0.125);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.bin");
    ckpt.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, ckpt);
    let restored = loaded.to_model().unwrap();
    let ep = tiny_data(1, 9).episode(0).unwrap();
    let forward = |m: &Model| {
        let mut r = Runner::new(m);
        r.observe(&ep.observations(0), None).unwrap();
        r.logits(&[[10.0, 20.0], [30.0, 40.0]]).unwrap()
    };
    let (a, b) = (forward(&model), forward(&restored));
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn checkpoint_errors() {
    let model = tiny_model(ModelKind::BaselineGru, 8);
    let ckpt = Checkpoint::from_model(&model, None, 1, 0.5);
    let bytes = ckpt.to_bytes().unwrap();
    let cut = bytes.len() - 3;
    match Checkpoint::from_bytes(&bytes[..cut]) {
        Err(Error::Format { offset, .. }) => assert_eq!(offset, cut as u64),
        other => panic!("expected a format error, got {other:?}"),
    }
    assert!(matches!(Checkpoint::from_bytes(b"S2RMCKPT0xxxx"), Err(Error::Format { offset: 0, .. })));

    let mut dup = ckpt.clone();
    dup.tensors.push(dup.tensors[0].clone());
    assert!(matches!(dup.to_bytes(), Err(Error::Config(_))));
}
