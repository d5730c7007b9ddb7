use hnetrack_core::autodiff::Graph;
use hnetrack_core::checkpoint;
use hnetrack_core::config::Config;
use hnetrack_core::eval::ablate;
use hnetrack_core::hne::{invocation_count, reset_invocation_count};
use hnetrack_core::train::{batch_targets, compute_loss, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small(steps: usize) -> Config {
    let mut c = Config::default();
    c.train.steps = steps;
    c.train.batch_size = 4;
    c.train.train_scenes = 16;
    c.eval.sequences = 2;
    c.eval.frames = 5;
    c.sync();
    c
}

#[test]
fn zero_contrastive_weight_leaves_gradients_unchanged() {
    let mut cfg = small(1);
    cfg.loss.contrastive = 0.0;
    let mut trainer = Trainer::<f64>::new(cfg.clone()).unwrap();
    let pairs = trainer.sample_batch().unwrap();
    let batch = batch_targets(&trainer.model, &pairs);
    let grads = |force: bool| {
        let g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let l = compute_loss(&trainer.model, &g, &batch, &cfg, &mut rng, force).unwrap();
        let gr = g.backward(l.total);
        let out: Vec<Vec<f64>> = (0..trainer.model.store.len()).map(|i| gr.param(i).map(|t| t.data().to_vec()).unwrap_or_default()).collect();
        (out, l.parts.contrastive)
    };
    let (with, con) = grads(true);
    let (without, _) = grads(false);
    assert!(con > 0.0, "the contrastive term was computed");
    for (i, (a, b)) in with.iter().zip(&without).enumerate() {
        if a.is_empty() || b.is_empty() {
            assert!(a.iter().chain(b).all(|v| *v == 0.0), "param {i}");
            continue;
        }
        assert_eq!(a, b, "param {i}");
    }
}

#[test]
fn disabled_hne_is_never_invoked() {
    let mut cfg = small(3);
    cfg.hne.enabled = false;
    reset_invocation_count();
    let mut t = Trainer::<f32>::new(cfg.clone()).unwrap();
    t.run(|_| {}).unwrap();
    assert_eq!(invocation_count(), 0);
    assert!(t.log.iter().all(|e| e.contrastive == 0.0 && e.hne_positives == 0));

    cfg.hne.enabled = true;
    let mut t = Trainer::<f32>::new(cfg).unwrap();
    t.run(|_| {}).unwrap();
    assert!(invocation_count() > 0);
}

#[test]
fn zero_weight_logs_zero_contrastive() {
    let mut cfg = small(3);
    cfg.loss.contrastive = 0.0;
    let mut t = Trainer::<f32>::new(cfg).unwrap();
    t.run(|_| {}).unwrap();
    assert!(t.log.iter().all(|e| e.contrastive == 0.0));
}

#[test]
fn loss_decreases_on_a_fixed_set() {
    let mut cfg = small(200);
    cfg.train.batch_size = 8;
    let mut t = Trainer::<f32>::new(cfg).unwrap();
    let pairs: Vec<_> = (0..8).flat_map(|_| t.sample_batch().unwrap()).collect();
    for i in 0..200 {
        let k = (i % 8) * 8;
        t.train_on(&pairs[k..k + 8]).unwrap();
    }
    let mean = |r: std::ops::Range<usize>| t.log[r.clone()].iter().map(|e| e.total).sum::<f64>() / r.len() as f64;
    let (first, last) = (mean(0..20), mean(180..200));
    assert!(last < 0.8 * first, "first {first:.4} last {last:.4}");
}

#[test]
fn resume_continues_the_step_counter() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::<f32>::new(small(3)).unwrap();
    t.run(|_| {}).unwrap();
    t.save(dir.path()).unwrap();
    let (_, _, m) = checkpoint::load::<f32>(dir.path()).unwrap();
    assert_eq!(m.step, 3);
    assert!(std::fs::read_to_string(dir.path().join("train_log.csv")).unwrap().lines().count() == 4);

    let mut r = Trainer::<f32>::resume(dir.path()).unwrap();
    assert_eq!(r.step, 3);
    for (a, b) in t.model.store.iter().zip(r.model.store.iter()) {
        assert_eq!(a.value, b.value);
    }
    r.config.train.steps = 5;
    r.run(|_| {}).unwrap();
    assert_eq!(r.step, 5);
    assert_eq!(r.log.first().map(|e| e.step), Some(3));
}

#[test]
fn ablation_is_deterministic() {
    let base = small(2);
    let variants = vec![
        ("on".to_string(), base.with_override("hne.enabled", "true").unwrap()),
        ("off".to_string(), base.with_override("hne.enabled", "false").unwrap()),
    ];
    let run = || {
        let mut r = ablate::<f32>(&variants, &[0, 1], None, |_, _, _| {}).unwrap();
        r.runs.iter_mut().for_each(|x| x.train_seconds = 0.0);
        r
    };
    let a = run();
    assert_eq!(a.runs.len(), 4);
    assert_eq!(a.rows.len(), 2);
    assert_eq!(a, run());
}
