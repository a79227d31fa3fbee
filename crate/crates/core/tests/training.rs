mod common;

use std::sync::Arc;

use common::{model, random_image, random_tensor, rng, tiny};
use dssr::autograd::Graph;
use dssr::model::{Checkpoint, Dssr, StepOutput};
use dssr::tensor::Tensor;
use dssr::training::{
    loss, loss_graph, read_log, sample_batch, Corpus, RunPaths, TrainConfig, Trainer, LOG_HEADER,
};
use dssr::variants::{build_variant, VariantKind};
use proptest::prelude::*;

fn corpus(n: usize, side: usize) -> Arc<Corpus> {
    let images = (0..n).map(|i| (format!("img{i}"), random_image(side, side, 100 + i as u64))).collect();
    Arc::new(Corpus::from_images(images, 2, 24).unwrap())
}

fn tiny_cfg() -> TrainConfig {
    TrainConfig {
        lr_patch: 8,
        ..TrainConfig::tiny(2)
    }
}

fn tiny_model(seed: u64) -> Dssr<f32> {
    build_variant(VariantKind::FullSmu, &tiny(2), &mut rng(seed)).unwrap()
}

fn step(sr: Tensor<f64>, detail: Tensor<f64>) -> StepOutput<Tensor<f64>> {
    let hidden = Tensor::zeros(&[1]);
    StepOutput { sr, detail_hr: detail, hidden }
}

fn shifted(t: &Tensor<f64>, d: f64) -> Tensor<f64> {
    t.map(|v| v + d)
}

#[test]
fn schedule_halves_at_boundary() {
    let cfg = TrainConfig::desk(2);
    assert_eq!(cfg.lr_at(1), cfg.lr0);
    assert_eq!(cfg.lr_at(cfg.lr_halve_every - 1), cfg.lr0);
    assert_eq!(cfg.lr_at(cfg.lr_halve_every), cfg.lr0 / 2.0);
    assert_eq!(cfg.lr_at(3 * cfg.lr_halve_every), cfg.lr0 / 8.0);
    let full = TrainConfig::full(4);
    assert_eq!((full.total_iters, full.lr_halve_every, full.batch, full.lr_patch), (480_000, 80_000, 8, 64));
    assert_eq!((full.beta1, full.beta2, full.lr0), (0.9, 0.99, 2e-4));
}

#[test]
fn invalid_train_configs() {
    for bad in [
        TrainConfig { lr0: 0.0, ..tiny_cfg() },
        TrainConfig { batch: 0, ..tiny_cfg() },
        TrainConfig { lr_patch: 1, ..tiny_cfg() },
        TrainConfig { alpha: -1.0, ..tiny_cfg() },
        TrainConfig { scale: 5, ..tiny_cfg() },
    ] {
        assert!(bad.validate().is_err(), "{bad:?}");
    }
}

#[test]
fn corpus_skips_small_images_and_rejects_empty() {
    let images = vec![
        ("big".to_string(), random_image(30, 30, 1)),
        ("small".to_string(), random_image(10, 30, 2)),
    ];
    let c = Corpus::from_images(images, 2, 24).unwrap();
    assert_eq!(c.len(), 1);
    assert_eq!(c.images()[0].0, "big");
    assert!(Corpus::from_images(vec![("s".into(), random_image(8, 8, 0))], 2, 24).is_err());
    let dir = tempfile::tempdir().unwrap();
    assert!(Corpus::load_dir(dir.path(), 2, 24).is_err());
}

#[test]
fn batches_satisfy_label_identity() {
    let c = corpus(3, 40);
    let cfg = tiny_cfg();
    let b = sample_batch::<f64>(&c, &cfg, 5).unwrap();
    assert_eq!(b.lr.shape(), &[2, 3, 8, 8]);
    assert_eq!(b.hr.shape(), &[2, 3, 16, 16]);
    for ((h, i), m) in b.hr.data().iter().zip(b.ihat.data()).zip(b.detail_label.data()) {
        assert!((m + i - h).abs() <= 2.0 * f64::EPSILON);
    }
}

#[test]
fn batches_depend_only_on_seed_and_iteration() {
    let c = corpus(4, 40);
    let cfg = tiny_cfg();
    let a: Vec<_> = (1..=4).map(|i| sample_batch::<f32>(&c, &cfg, i).unwrap()).collect();
    let b: Vec<_> = (1..=4).rev().map(|i| sample_batch::<f32>(&c, &cfg, i).unwrap()).collect();
    for (x, y) in a.iter().zip(b.iter().rev()) {
        assert_eq!(x, y);
    }
    assert_ne!(a[0], a[1]);
    let other = TrainConfig { seed: 9, ..cfg };
    assert_ne!(sample_batch::<f32>(&c, &other, 1).unwrap(), a[0]);
}

#[test]
fn constant_offset_gives_offset_loss() {
    let hr = random_tensor(&[1, 3, 6, 6], 1);
    let label = random_tensor(&[1, 3, 6, 6], 2);
    for d in [0.0, 0.01, 0.3, -0.25] {
        let rep = loss(&[step(shifted(&hr, d), label.clone())], &hr, &label, 1.0).unwrap();
        assert!((rep.total - d.abs()).abs() < 1e-12, "{d}: {}", rep.total);
    }
}

#[test]
fn alpha_gates_detail_gradient() {
    let m = model(&tiny(2), VariantKind::FullSmu, 4);
    let lr = random_tensor(&[1, 3, 5, 5], 1);
    let hr = random_tensor(&[1, 3, 10, 10], 2);
    let ihat = m.upsample_input(&lr).unwrap();
    let label = hr.zip_map(&ihat, |a, b| a - b).unwrap();
    let grads = |alpha: f64| {
        let mut g = Graph::new();
        let bound = m.bind_trainable(&mut g);
        let lv = g.input(lr.clone());
        let iv = g.input(ihat.clone());
        let hv = g.input(hr.clone());
        let labv = g.input(label.clone());
        let outs = m.forward(&mut g, &bound).unroll(lv, iv, 2).unwrap();
        let terms = loss_graph(&mut g, &outs, hv, labv, alpha).unwrap();
        let gr = g.backward(terms.total).unwrap();
        m.params()
            .names()
            .map(|n| (n.to_string(), gr.get(bound.get(n).unwrap()).unwrap().clone()))
            .collect::<Vec<_>>()
    };
    let (g0, g1) = (grads(0.0), grads(1.0));
    let mut project_moved = false;
    for ((name, a), (_, b)) in g0.iter().zip(&g1) {
        let diff = a.max_abs_diff(b);
        if name.starts_with("recon.") {
            assert!(diff <= 1e-12, "{name} changed by {diff}");
        }
        if name.starts_with("dru.project") {
            project_moved |= diff > 1e-6;
        }
    }
    assert!(project_moved);
}

#[test]
fn trainer_is_deterministic_and_resumable() {
    let c = corpus(3, 40);
    let cfg = TrainConfig {
        total_iters: 6,
        checkpoint_every: 3,
        ..tiny_cfg()
    };
    let dir = tempfile::tempdir().unwrap();
    let full = RunPaths {
        log: Some(dir.path().join("full.csv")),
        checkpoint: Some(dir.path().join("full.ckpt")),
    };
    let mut t = Trainer::new(cfg.clone(), tiny_model(1)).unwrap();
    t.run(&c, &full, |_| {}).unwrap();
    assert_eq!(t.iter(), 6);
    let text = std::fs::read_to_string(full.log.as_ref().unwrap()).unwrap();
    assert_eq!(text.lines().next().unwrap(), LOG_HEADER);
    assert_eq!(text.lines().count(), 7);

    let mut again = Trainer::new(cfg.clone(), tiny_model(1)).unwrap();
    again.run(&c, &RunPaths::default(), |_| {}).unwrap();
    assert_eq!(again.history(), t.history());

    let part = RunPaths {
        log: Some(dir.path().join("part.csv")),
        checkpoint: Some(dir.path().join("part.ckpt")),
    };
    let half = TrainConfig { total_iters: 3, ..cfg.clone() };
    Trainer::new(half, tiny_model(1)).unwrap().run(&c, &part, |_| {}).unwrap();
    let ckpt = Checkpoint::load(part.checkpoint.as_ref().unwrap()).unwrap();
    assert_eq!(ckpt.iter, 3);
    let mut resumed = Trainer::resume(cfg, ckpt).unwrap();
    resumed.run(&c, &part, |_| {}).unwrap();
    assert_eq!(resumed.iter(), 6);
    assert_eq!(
        std::fs::read_to_string(part.log.as_ref().unwrap()).unwrap(),
        text,
        "resumed log differs from the uninterrupted one"
    );
    assert_eq!(resumed.model().params(), t.model().params());
    let rows = |v: &[dssr::training::LossRecord]| v.iter().map(|r| r.csv_row()).collect::<Vec<_>>();
    assert_eq!(rows(&read_log(part.log.as_ref().unwrap()).unwrap()), rows(t.history()));
}

#[test]
fn worker_threads_do_not_change_results() {
    let c = corpus(3, 40);
    let cfg = TrainConfig { total_iters: 5, ..tiny_cfg() };
    let mut inline = Trainer::new(cfg.clone(), tiny_model(2)).unwrap();
    inline.run(&c, &RunPaths::default(), |_| {}).unwrap();
    let mut threaded = Trainer::new(TrainConfig { workers: 3, ..cfg }, tiny_model(2)).unwrap();
    threaded.run(&c, &RunPaths::default(), |_| {}).unwrap();
    assert_eq!(inline.history(), threaded.history());
}

#[test]
fn short_training_makes_hidden_state_matter() {
    let c = corpus(3, 40);
    let cfg = TrainConfig { total_iters: 20, ..tiny_cfg() };
    let mut t = Trainer::new(cfg, tiny_model(3)).unwrap();
    t.run(&c, &RunPaths::default(), |_| {}).unwrap();
    let lr = random_tensor(&[1, 3, 8, 8], 9).cast::<f32>();
    let outs = t.model().unroll(&lr, 4).unwrap();
    for w in outs.windows(2) {
        assert!(w[0].sr.max_abs_diff(&w[1].sr) > 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn loss_is_nonnegative_and_zero_only_when_exact(
        steps in 1usize..5,
        alpha in 0.0f64..3.0,
        seed in any::<u64>(),
        perturb in prop::option::of(0usize..4),
    ) {
        let hr = random_tensor(&[1, 3, 4, 4], seed);
        let label = random_tensor(&[1, 3, 4, 4], seed ^ 7);
        let mut outs: Vec<_> = (0..steps).map(|_| step(hr.clone(), label.clone())).collect();
        let exact = loss(&outs, &hr, &label, alpha).unwrap();
        prop_assert_eq!(exact.total, 0.0);
        if let Some(p) = perturb {
            let t = p % steps;
            outs[t].sr.data_mut()[5] += 0.125;
            let rep = loss(&outs, &hr, &label, alpha).unwrap();
            prop_assert!(rep.total > 0.0);
        }
    }

    #[test]
    fn loss_sum_ignores_step_order(steps in 2usize..5, alpha in 0.0f64..3.0, seed in any::<u64>()) {
        let hr = random_tensor(&[2, 3, 4, 4], seed);
        let label = random_tensor(&[2, 3, 4, 4], seed ^ 1);
        let mut outs: Vec<_> = (0..steps)
            .map(|t| step(random_tensor(&[2, 3, 4, 4], seed ^ (10 + t as u64)), random_tensor(&[2, 3, 4, 4], seed ^ (20 + t as u64))))
            .collect();
        let a = loss(&outs, &hr, &label, alpha).unwrap().total;
        outs.reverse();
        let b = loss(&outs, &hr, &label, alpha).unwrap().total;
        prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
    }

    #[test]
    fn zero_alpha_keeps_only_reconstruction(steps in 1usize..5, seed in any::<u64>()) {
        let hr = random_tensor(&[1, 3, 4, 4], seed);
        let label = random_tensor(&[1, 3, 4, 4], seed ^ 1);
        let outs: Vec<_> = (0..steps)
            .map(|t| step(random_tensor(&[1, 3, 4, 4], seed ^ (10 + t as u64)), random_tensor(&[1, 3, 4, 4], seed ^ (20 + t as u64))))
            .collect();
        let rep = loss(&outs, &hr, &label, 0.0).unwrap();
        let sr_only: f64 = outs
            .iter()
            .map(|o| o.sr.data().iter().zip(hr.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / hr.len() as f64)
            .sum();
        prop_assert!((rep.total - sr_only).abs() <= 1e-12);
    }

    #[test]
    fn graph_loss_matches_tensor_loss(alpha in 0.0f64..2.0, seed in any::<u64>()) {
        let m = model(&tiny(2), VariantKind::FullSmu, seed);
        let lr = random_tensor(&[1, 3, 4, 4], seed ^ 1);
        let hr = random_tensor(&[1, 3, 8, 8], seed ^ 2);
        let label = random_tensor(&[1, 3, 8, 8], seed ^ 3);
        let outs = m.unroll(&lr, 2).unwrap();
        let expected = loss(&outs, &hr, &label, alpha).unwrap().total;
        let mut g = Graph::new();
        let bound = m.bind_frozen(&mut g);
        let lv = g.input(lr.clone());
        let iv = g.input(m.upsample_input(&lr).unwrap());
        let hv = g.input(hr);
        let labv = g.input(label);
        let gouts = m.forward(&mut g, &bound).unroll(lv, iv, 2).unwrap();
        let terms = loss_graph(&mut g, &gouts, hv, labv, alpha).unwrap();
        prop_assert!((g.value(terms.total).item() - expected).abs() <= 1e-12);
    }
}
