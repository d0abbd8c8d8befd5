use mbrec::checkpoint::Checkpoint;
use mbrec::config::TrainConfig;
use mbrec::data::{generate_synthetic, inject_noise, split_leave_one_out, Dataset, SyntheticSpec};
use mbrec::evaluation::{evaluate, retention_report, Protocol};
use mbrec::training::{model_for, train};

fn small() -> Dataset {
    let spec = SyntheticSpec {
        num_users: 40,
        num_items: 60,
        densities: vec![0.15, 0.1, 0.08],
        seed: 2,
        ..SyntheticSpec::default()
    };
    split_leave_one_out(&generate_synthetic(&spec).unwrap(), 2).unwrap().0
}

fn cfg() -> TrainConfig {
    let mut c = TrainConfig::default();
    c.hyper.dim = 8;
    c.hyper.epochs = 6;
    c.hyper.batch_size = 64;
    c.hyper.hsic_batch = 64;
    c.hyper.lr = 0.01;
    c.eval_every = 2;
    c
}

#[test]
fn prepared_dataset_round_trips() {
    let ds = small();
    let dir = tempfile::tempdir().unwrap();
    ds.write_prepared(dir.path()).unwrap();
    let back = Dataset::load_prepared(dir.path()).unwrap();
    assert_eq!(back.edges, ds.edges);
    assert_eq!(back.test_items, ds.test_items);
    assert_eq!(back.noise_labels, ds.noise_labels);
    assert_eq!(back.behavior_names, ds.behavior_names);
}

#[test]
fn checkpoint_restores_the_trained_model() {
    let ds = small();
    let dir = tempfile::tempdir().unwrap();
    let mut c = cfg();
    c.checkpoint_dir = Some(dir.path().to_path_buf());
    let out = train(&ds, &c).unwrap();
    let ckpt = Checkpoint::load(&dir.path().join("best.ckpt")).unwrap();
    assert_eq!(ckpt.state, out.state);
    assert_eq!(ckpt.epoch, out.best_epoch);

    let model = model_for(&ds, &ckpt.config).unwrap();
    let a = evaluate(&out.model.embed(&out.state.params).unwrap(), &ds, &[10], Protocol::Full).unwrap();
    let b = evaluate(&model.embed(&ckpt.state.params).unwrap(), &ds, &[10], Protocol::Full).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.evaluated_users, ds.test_items.iter().flatten().count());
}

#[test]
fn injected_edges_count_as_noise_in_retention() {
    let ds = small();
    let b = ds.auxiliary_behaviors()[0];
    let (noisy, added) = inject_noise(&ds, b, 0.2, 9).unwrap();
    assert!(!added.is_empty());
    assert_eq!(noisy.edges[b].len(), ds.edges[b].len() + added.len());
    let mut c = cfg();
    c.eval_every = 0;
    let out = train(&noisy, &c).unwrap();
    let rows = retention_report(&out.model, &out.state.params, &noisy, 0.5).unwrap();
    assert_eq!(rows.len(), 2);
    for r in rows {
        assert!((0.0..=1.0).contains(&r.mean_gate));
        assert!(r.recall.is_some());
    }
}
