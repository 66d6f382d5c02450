mod common;

use std::collections::BTreeMap;

use fusionreid::checkpoint::{Checkpoint, MAGIC};
use fusionreid::config::RunConfig;
use fusionreid::data::Split;
use fusionreid::model::{FusionReid, ModelConfig};
use fusionreid::tensor::{ParamStore, Tensor};
use fusionreid::trainer::{decay_exempt, lr_schedule, sgd_step, Momentum, OptimConfig, TrainLog, Trainer};
use fusionreid::Error;
use proptest::prelude::*;

fn toy_trainer(seed: u64) -> Trainer {
    let mut cfg = RunConfig::toy();
    cfg.seed = seed;
    let dataset = cfg.dataset().unwrap();
    Trainer::new(FusionReid::new(cfg.model).unwrap(), cfg.optim, cfg.train, dataset, seed).unwrap()
}

fn one_param(path: &str, value: f64, grad: f64) -> ParamStore {
    let mut s = ParamStore::new();
    s.insert(path, Tensor::vector(&[value])).unwrap();
    s.get_mut(path).unwrap().grad = Some(Tensor::vector(&[grad]));
    s
}

fn plain(momentum: f64, weight_decay: f64) -> OptimConfig {
    OptimConfig {
        momentum,
        weight_decay,
        ..OptimConfig::default()
    }
}

#[test]
fn schedule_anchors() {
    let cfg = OptimConfig::default();
    assert_eq!(lr_schedule(0.0, &cfg).unwrap(), 5e-4);
    assert_eq!(lr_schedule(10.0, &cfg).unwrap(), 5e-3);
    assert_eq!(lr_schedule(180.0, &cfg).unwrap(), 0.0);
    let left = lr_schedule(10.0 - 1e-9, &cfg).unwrap();
    assert!((left - 5e-3).abs() < 1e-12);
}

#[test]
fn schedule_rejects_out_of_range_epochs() {
    let cfg = OptimConfig::default();
    for e in [-0.5, 180.01, f64::NAN] {
        assert!(matches!(lr_schedule(e, &cfg), Err(Error::Usage(_))), "{e}");
    }
}

#[test]
fn invalid_optimizer_settings_are_rejected() {
    for cfg in [
        OptimConfig { base_lr: 0.0, ..OptimConfig::default() },
        OptimConfig { base_lr: 1e-2, ..OptimConfig::default() },
        OptimConfig { warmup_epochs: 180.0, ..OptimConfig::default() },
        OptimConfig { grad_clip: Some(0.0), ..OptimConfig::default() },
    ] {
        assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{cfg:?}");
    }
}

#[test]
fn vanilla_step_moves_by_lr_times_grad() {
    let mut s = one_param("w.weight", 1.5, 0.25);
    sgd_step(&mut s, &mut Momentum::new(), 0.1, &plain(0.0, 0.0)).unwrap();
    assert_eq!(s.value("w.weight").unwrap().data()[0], 1.5 - 0.1 * 0.25);
}

#[test]
fn zero_gradient_is_a_fixed_point() {
    let mut s = one_param("w.weight", -0.7, 0.0);
    sgd_step(&mut s, &mut Momentum::new(), 0.1, &plain(0.9, 0.0)).unwrap();
    assert_eq!(s.value("w.weight").unwrap().data()[0], -0.7);
}

#[test]
fn two_momentum_steps_unroll_by_hand() {
    let (lr, g) = (0.01, 0.3);
    let mut s = one_param("w.weight", 2.0, g);
    let mut v = Momentum::new();
    let cfg = plain(0.9, 0.0);
    sgd_step(&mut s, &mut v, lr, &cfg).unwrap();
    sgd_step(&mut s, &mut v, lr, &cfg).unwrap();
    let moved = 2.0 - s.value("w.weight").unwrap().data()[0];
    assert!((moved - lr * g * (1.0 + 1.9)).abs() < 1e-15);
}

#[test]
fn weight_decay_skips_exempt_parameters() {
    let mut s = ParamStore::new();
    for p in ["a.weight", "a.bias", "n.gamma", "h.classifier.weight"] {
        s.insert(p, Tensor::vector(&[1.0])).unwrap();
        s.get_mut(p).unwrap().grad = Some(Tensor::vector(&[0.0]));
    }
    sgd_step(&mut s, &mut Momentum::new(), 0.5, &plain(0.0, 0.1)).unwrap();
    assert_eq!(s.value("a.weight").unwrap().data()[0], 1.0 - 0.5 * 0.1);
    for p in ["a.bias", "n.gamma", "h.classifier.weight"] {
        assert_eq!(s.value(p).unwrap().data()[0], 1.0, "{p}");
    }
}

#[test]
fn missing_gradient_is_a_usage_error() {
    let mut s = one_param("w.weight", 1.0, 1.0);
    s.insert("v.weight", Tensor::vector(&[1.0])).unwrap();
    assert!(matches!(
        sgd_step(&mut s, &mut Momentum::new(), 0.1, &plain(0.0, 0.0)),
        Err(Error::Usage(m)) if m.contains("v.weight")
    ));
}

#[test]
fn clipping_rescales_to_the_global_norm() {
    let mut s = ParamStore::new();
    s.insert("a.weight", Tensor::vector(&[0.0])).unwrap();
    s.insert("b.weight", Tensor::vector(&[0.0])).unwrap();
    s.get_mut("a.weight").unwrap().grad = Some(Tensor::vector(&[3.0]));
    s.get_mut("b.weight").unwrap().grad = Some(Tensor::vector(&[4.0]));
    let cfg = OptimConfig {
        grad_clip: Some(1.0),
        ..plain(0.0, 0.0)
    };
    sgd_step(&mut s, &mut Momentum::new(), 1.0, &cfg).unwrap();
    assert!((s.value("a.weight").unwrap().data()[0] + 0.6).abs() < 1e-15);
    assert!((s.value("b.weight").unwrap().data()[0] + 0.8).abs() < 1e-15);
}

#[test]
fn gem_exponents_stay_at_least_one() {
    let mut s = one_param("cnn.gem_p", 1.05, 10.0);
    sgd_step(&mut s, &mut Momentum::new(), 0.1, &plain(0.0, 0.0)).unwrap();
    assert_eq!(s.value("cnn.gem_p").unwrap().data()[0], 1.0);
}

#[test]
fn decay_exemptions_are_enumerable_from_paths() {
    let store = FusionReid::new(ModelConfig::default()).unwrap().init_params(0).unwrap();
    let mut groups: BTreeMap<String, usize> = BTreeMap::new();
    for path in store.paths().filter(|p| decay_exempt(p)) {
        let leaf = if path.ends_with(".classifier.weight") {
            "classifier.weight".to_string()
        } else {
            path.rsplit('.').next().unwrap().to_string()
        };
        *groups.entry(leaf).or_default() += 1;
    }
    let kinds: Vec<&str> = groups.keys().map(String::as_str).collect();
    assert_eq!(
        kinds,
        ["beta", "bias", "classifier.weight", "cls_token", "dw_prelu", "gamma", "gem_p", "pos_embed", "pw_prelu"]
    );
    assert_eq!(groups["classifier.weight"], 6);
    assert_eq!(groups["gem_p"], 3);
    assert!(store.paths().filter(|p| !decay_exempt(p)).all(|p| {
        p.ends_with(".weight") || p.ends_with("cam_embed")
    }));
}

#[test]
fn first_step_loss_is_finite_and_positive() {
    let mut t = toy_trainer(0);
    let m = t.step().unwrap();
    assert!(m.total.is_finite() && m.total > 0.0);
    assert_eq!(m.heads.len(), 6);
    assert!((m.ce_sum + m.tri_sum - m.total).abs() < 1e-9 * m.total);
    assert_eq!(m.lr, 5e-4);
    assert_eq!(t.step, 1);
}

#[test]
fn fixed_seed_losses_are_bit_reproducible() {
    let run = |seed| {
        let mut t = toy_trainer(seed);
        (0..4).map(|_| t.step().unwrap().total.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(3), run(3));
    assert_ne!(run(3), run(4));
}

#[test]
fn schedule_touches_each_identity_once_per_epoch() {
    let mut t = toy_trainer(0);
    t.train.max_steps = Some(6);
    let per = t.data.steps_per_epoch();
    assert_eq!(per, 2);
    let mut touches: BTreeMap<usize, usize> = BTreeMap::new();
    for epoch in 0..3 {
        for b in t.data.sampler.epoch(epoch) {
            for p in b.pids.iter().step_by(t.train.k) {
                *touches.entry(*p).or_default() += 1;
            }
        }
    }
    assert_eq!(touches.len(), 8);
    assert!(touches.values().all(|&n| n == 3));
    assert_eq!(t.total_steps(), 6);
}

#[test]
fn non_finite_loss_aborts_with_diagnostics() {
    let mut t = toy_trainer(0);
    t.step().unwrap();
    t.store
        .value_mut("heads.c_hat.classifier.weight")
        .unwrap()
        .data_mut()
        .fill(f64::NAN);
    let err = t.step().unwrap_err();
    assert!(matches!(err, Error::Numerical(_)));
    assert!(!err.is_input_error());
    let d = t.diagnostics.as_ref().unwrap();
    assert_eq!(d.step, 1);
    assert_eq!(d.batch_indices.len(), 16);
    assert!(!d.grad_norms.is_empty());
    assert_eq!(t.step, 1);
}

#[test]
fn toy_loss_falls_below_a_quarter_in_200_steps() {
    let mut t = toy_trainer(0);
    assert_eq!(t.total_steps(), 200);
    let first = t.step().unwrap().total;
    let mut last = first;
    while t.step < 200 {
        last = t.step().unwrap().total;
    }
    assert!(last < 0.25 * first, "loss {first} -> {last}");
}

#[test]
fn dataset_and_model_sizes_must_agree() {
    let cfg = RunConfig::toy();
    let dataset = fusionreid::data::synth_generate(&cfg.data.synthetic).unwrap();
    let r = Trainer::new(FusionReid::new(cfg.model).unwrap(), cfg.optim, cfg.train, dataset, 0);
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn too_few_classes_for_the_training_identities() {
    let mut cfg = RunConfig::toy();
    cfg.model.num_classes = 4;
    let dataset = cfg.dataset().unwrap();
    let r = Trainer::new(FusionReid::new(cfg.model).unwrap(), cfg.optim, cfg.train, dataset, 0);
    assert!(matches!(r, Err(Error::Config(m)) if m.contains("num_classes")));
}

#[test]
fn checkpoint_round_trips_every_tensor() {
    let mut t = toy_trainer(1);
    for _ in 0..2 {
        t.step().unwrap();
    }
    let ck = t.checkpoint();
    let bytes = ck.to_bytes().unwrap();
    assert_eq!(&bytes[..8], MAGIC);
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes().unwrap(), bytes);
    for path in t.store.paths() {
        assert_eq!(back.store.value(path).unwrap(), t.store.value(path).unwrap(), "{path}");
    }
    assert_eq!((back.seed, back.step, back.model), (1, 2, ck.model));
    assert_eq!(back.store.len(), t.store.len());
    assert_eq!(back.velocity.len(), t.store.len());
    assert!(back.store.buffers().count() > 0);
}

#[test]
fn resume_mid_epoch_matches_the_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    let mut full = toy_trainer(2);
    for _ in 0..3 {
        full.step().unwrap();
    }
    full.checkpoint().save(&path).unwrap();
    assert!(!dir.path().join("ck.bin.tmp").exists());
    let expected: Vec<u64> = (0..2).map(|_| full.step().unwrap().total.to_bits()).collect();

    let cfg = RunConfig { seed: 2, ..RunConfig::toy() };
    let mut resumed = Trainer::resume(Checkpoint::load(&path).unwrap(), cfg.dataset().unwrap()).unwrap();
    assert_eq!(resumed.step, 3);
    let got: Vec<u64> = (0..2).map(|_| resumed.step().unwrap().total.to_bits()).collect();
    assert_eq!(got, expected);
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let t = toy_trainer(0);
    let bytes = t.checkpoint().to_bytes().unwrap();
    let mut wrong_version = bytes.clone();
    wrong_version[8..12].copy_from_slice(&99u32.to_le_bytes());
    assert!(matches!(Checkpoint::from_bytes(&wrong_version), Err(Error::Checkpoint(m)) if m.contains("version 99")));
    for cut in [4, 10, 30, bytes.len() - 1] {
        assert!(
            matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Checkpoint(_))),
            "cut at {cut}"
        );
    }
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(Checkpoint::from_bytes(&long), Err(Error::Checkpoint(m)) if m.contains("trailing")));
}

#[test]
fn mismatched_model_config_lists_the_differing_fields() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    toy_trainer(0).checkpoint().save(&path).unwrap();
    let mut other = ModelConfig::default();
    other.dmf.layers = 3;
    other.vit.depth = 1;
    match Checkpoint::load_expecting(&path, &other) {
        Err(Error::Config(m)) => {
            assert!(m.contains("model.dmf.layers: 3 -> 2"), "{m}");
            assert!(m.contains("model.vit.depth: 1 -> 2"), "{m}");
        }
        other => panic!("expected a configuration error, got {other:?}"),
    }
    assert!(Checkpoint::load_expecting(&path, &ModelConfig::default()).is_ok());
}

#[test]
fn log_has_one_row_per_head_and_a_total() {
    let mut t = toy_trainer(0);
    let mut log = TrainLog::new(Vec::new());
    let mut metrics = Vec::new();
    for _ in 0..2 {
        let m = t.step().unwrap();
        log.record(&m).unwrap();
        metrics.push(m);
    }
    let text = String::from_utf8(log.into_inner().unwrap()).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "step,head,ce,tri,epoch,lr");
    assert_eq!(lines.len(), 1 + 2 * 7);
    let heads: Vec<&str> = lines[1..8].iter().map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(heads, ["c_hat", "t_hat", "c_0", "t_0", "c_L", "t_L", "total"]);
    let total: Vec<&str> = lines[14].split(',').collect();
    assert_eq!(total[0], "1");
    assert_eq!(total[2].parse::<f64>().unwrap(), metrics[1].ce_sum);
    assert_eq!(total[3].parse::<f64>().unwrap(), metrics[1].tri_sum);
    assert_eq!(total[4], "0.5");
}

#[test]
fn training_split_drives_normalization() {
    let t = toy_trainer(0);
    let train = t.data.dataset.split(Split::Train);
    let n = train.len() as f64 * (t.data.dataset.height * t.data.dataset.width) as f64;
    let red: f64 = train
        .iter()
        .map(|s| s.image.data()[..s.image.numel() / 3].iter().sum::<f64>())
        .sum();
    assert!((t.data.stats.mean[0] - red / n).abs() < 1e-12);
}

proptest! {
    #[test]
    fn warmup_rises_and_cosine_falls(a in 0.0f64..180.0, b in 0.0f64..180.0) {
        let cfg = OptimConfig::default();
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let (x, y) = (lr_schedule(lo, &cfg).unwrap(), lr_schedule(hi, &cfg).unwrap());
        if hi <= 10.0 {
            prop_assert!(x <= y);
        }
        if lo >= 10.0 {
            prop_assert!(x >= y);
        }
        prop_assert!((0.0..=5e-3).contains(&x));
    }
}
