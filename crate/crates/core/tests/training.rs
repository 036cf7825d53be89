use vigru::checkpoint::checkpoint_load;
use vigru::data::{load_split, synth_generate, AugmentConfig, ImageSample, Split};
use vigru::model::{Model, ModelConfig};
use vigru::train::{train, Resume, TrainConfig};

fn synthetic(per_class: usize, seed: u64) -> (tempfile::TempDir, Vec<ImageSample<f64>>) {
    let dir = tempfile::tempdir().unwrap();
    let mut index = synth_generate(dir.path(), per_class, 3, 32, seed).unwrap();
    index.records.iter_mut().for_each(|r| r.split = Some(Split::Train));
    let set = load_split(&index, Split::Train, 32).unwrap();
    (dir, set)
}

fn snapshot(model: &Model<f64>) -> Vec<Vec<u64>> {
    model
        .store
        .iter()
        .map(|(_, p)| p.tensor.data().iter().map(|v| v.to_bits()).collect())
        .collect()
}

#[test]
fn tiny_model_overfits_sixty_images() {
    let (_dir, set) = synthetic(20, 4);
    let mut model = Model::<f64>::new(ModelConfig::tiny(), 4).unwrap();
    let cfg = TrainConfig { seed: 4, ..TrainConfig::default() };
    let log = train(&mut model, &set, &set, &cfg, &AugmentConfig::disabled(), None).unwrap();
    let last = log.last().unwrap();
    let min_loss = log.records.iter().map(|r| r.train_loss).fold(f64::INFINITY, f64::min);
    assert!(min_loss < log.records[0].train_loss);
    assert!(log.records.iter().all(|r| r.test_top2.unwrap() >= r.test_top1.unwrap()));
    assert!(last.train_top1 >= 0.95, "{last:?}");
    assert!(last.test_top1.unwrap() >= 0.95, "{last:?}");
    assert_eq!(log.steps, 200 * 2);
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let (_dir, set) = synthetic(4, 1);
    let mut model = Model::<f64>::new(ModelConfig::tiny(), 1).unwrap();
    let before = snapshot(&model);
    let cfg = TrainConfig { lr0: 0.0, lr_min: 0.0, epochs: 3, batch_size: 5, ..TrainConfig::default() };
    train(&mut model, &set, &[], &cfg, &AugmentConfig::default(), None).unwrap();
    assert_eq!(snapshot(&model), before);
}

#[test]
fn same_seed_gives_identical_logs_and_weights() {
    let (_dir, set) = synthetic(4, 2);
    let run = |workers| {
        let mut model = Model::<f64>::new(ModelConfig::tiny(), 2).unwrap();
        let cfg = TrainConfig { epochs: 3, batch_size: 5, seed: 2, workers, ..TrainConfig::default() };
        let log = train(&mut model, &set, &set, &cfg, &AugmentConfig::default(), None).unwrap();
        (log, snapshot(&model))
    };
    let (a, wa) = run(1);
    let (b, wb) = run(1);
    let (c, wc) = run(0);
    for (x, y) in a.records.iter().zip(&b.records).chain(a.records.iter().zip(&c.records)) {
        assert!(x.same_outcome(y), "{x:?} vs {y:?}");
    }
    assert_eq!(wa, wb);
    assert_eq!(wa, wc);
}

#[test]
fn resume_continues_the_uninterrupted_run() {
    let (_dir, set) = synthetic(4, 3);
    let out = tempfile::tempdir().unwrap();
    let last = out.path().join("last.ckpt");
    let base = TrainConfig { epochs: 4, batch_size: 5, seed: 3, ..TrainConfig::default() };

    let mut full_model = Model::<f64>::new(ModelConfig::tiny(), 3).unwrap();
    let full = train(&mut full_model, &set, &set, &base, &AugmentConfig::default(), None).unwrap();

    // Zero patience stops after the first epoch while keeping the same
    // schedule length; then pick up from its last checkpoint.
    let mut first = Model::<f64>::new(ModelConfig::tiny(), 3).unwrap();
    let cfg = TrainConfig { last_checkpoint_path: Some(last.clone()), early_stop_patience: Some(0), ..base.clone() };
    let cut = train(&mut first, &set, &set, &cfg, &AugmentConfig::default(), None).unwrap();
    assert_eq!(cut.records.len(), 1);

    let restored = checkpoint_load::<f64>(&last, Some(&first.config)).unwrap();
    assert_eq!(restored.meta.epoch, 1);
    let mut model = restored.model;
    let resume = Resume { optimizer: restored.optimizer.unwrap(), meta: restored.meta };
    let rest = train(&mut model, &set, &set, &base, &AugmentConfig::default(), Some(resume)).unwrap();
    assert_eq!(rest.records.first().unwrap().epoch, 2);
    assert!(rest.records.iter().all(|r| r.train_loss.is_finite()));
    for (x, y) in full.records[1..].iter().zip(&rest.records) {
        assert!(x.same_outcome(y), "{x:?} vs {y:?}");
    }
    assert_eq!(snapshot(&model), snapshot(&full_model));
    assert_eq!(rest.steps, full.steps);
}

#[test]
fn frozen_tensors_survive_training_and_trainable_ones_move() {
    let (_dir, set) = synthetic(5, 5);
    let mut config = ModelConfig::tiny();
    config.vit.depth = 12;
    config.vit.freeze_n = 6;
    config.vit.d_model = 16;
    config.vit.mlp_width = 32;
    config.head.d_vit = 16;
    config.head.d_gru = 8;
    let mut model = Model::<f64>::new(config, 5).unwrap();
    let before = model.clone();
    let cfg = TrainConfig { epochs: 3, batch_size: 8, seed: 5, ..TrainConfig::default() };
    train(&mut model, &set, &[], &cfg, &AugmentConfig::default(), None).unwrap();
    for ((_, a), (_, b)) in before.store.iter().zip(model.store.iter()) {
        if a.tensor.requires_grad {
            assert!(!a.tensor.bit_eq(&b.tensor), "{} did not move", a.name);
        } else {
            assert!(a.tensor.bit_eq(&b.tensor), "{} moved", a.name);
        }
    }
    assert!(before.store.by_name("vit.block.6.mlp.fc2.weight").map(|t| !t.requires_grad).unwrap());
    assert!(before.store.by_name("vit.block.7.mlp.fc2.weight").map(|t| t.requires_grad).unwrap());
}
