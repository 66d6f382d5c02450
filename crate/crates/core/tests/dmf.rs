mod common;

use fusionreid::dmf::{Dmf, DmfConfig, Lru, Mfu, Pooling, RefinedPair, Seu, Variant};
use fusionreid::nn::{Branch, Forward, Init, Unit};
use fusionreid::tensor::{ParamStore, Tape, Tensor, Var};
use fusionreid::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{randn, rng};

const B: usize = 2;
const D: usize = 16;
const GRID: (usize, usize) = (2, 2);

fn cfg(variant: Variant, layers: usize) -> DmfConfig {
    DmfConfig {
        dim: D,
        grid: GRID,
        heads: 4,
        layers,
        variant,
        ffn_ratio: 2,
        ..DmfConfig::default()
    }
}

fn dmf(cfg: DmfConfig) -> Dmf {
    Dmf {
        cfg,
        prefix: "dmf".into(),
        cnn_dim: 6,
        cnn_grid: (4, 4),
        vit_dim: 8,
        vit_grid: (2, 2),
        pooling: Pooling::Gem,
    }
}

fn init(dmf: &Dmf, seed: u64) -> ParamStore {
    let mut store = ParamStore::new();
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    dmf.init(&mut Init {
        store: &mut store,
        rng: &mut r,
    })
    .unwrap();
    store
}

/// Random aligned features placed directly on the tape.
fn refined<'t>(tape: &'t Tape, seed: u64) -> RefinedPair<'t> {
    let mut r = rng(seed);
    let (h, w) = GRID;
    let map_c = tape.constant(randn(&mut r, &[B, D, h, w]));
    let map_t = tape.constant(randn(&mut r, &[B, D, h, w]));
    let g_c = tape.constant(randn(&mut r, &[B, D]));
    let g_t = tape.constant(randn(&mut r, &[B, D]));
    RefinedPair::new(map_c, map_t, g_c, g_t).unwrap()
}

fn run_stack<'t>(d: &Dmf, fwd: &mut Forward<'t, '_>, pair: &RefinedPair<'t>) -> Vec<fusionreid::dmf::HtmState<'t>> {
    let mut states = vec![pair.initial_state()];
    for _ in 0..d.cfg.layers {
        let s = d.htm_step(fwd, *states.last().unwrap(), pair).unwrap();
        states.push(s);
    }
    states
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|x| x.to_bits()).collect()
}

#[test]
fn later_layers_consume_the_initial_refined_locals() {
    let d = dmf(cfg(Variant::SeuThenMfu, 3));
    let mut store = init(&d, 1);
    let tape = Tape::new();
    let mut fwd = Forward::eval(&tape, &mut store);
    let pair = refined(&tape, 2);
    let states = run_stack(&d, &mut fwd, &pair);
    // Recompute every layer by hand from the k = 0 locals only.
    for k in 0..3 {
        let prev = states[k];
        let (sg_c, sl_c, _) = d.seu(k, Branch::Cnn).forward(&mut fwd, prev.global_c, pair.locals_c).unwrap();
        let (sg_t, sl_t, _) = d.seu(k, Branch::Vit).forward(&mut fwd, prev.global_t, pair.locals_t).unwrap();
        let (fc, _) = d.mfu(k, Branch::Cnn).forward(&mut fwd, sg_c, sl_t).unwrap();
        let (ft, _) = d.mfu(k, Branch::Vit).forward(&mut fwd, sg_t, sl_c).unwrap();
        assert_eq!(bits(&fc.value()), bits(&states[k + 1].global_c.value()), "layer {k}");
        assert_eq!(bits(&ft.value()), bits(&states[k + 1].global_t.value()), "layer {k}");
    }
    // The locals handed to the stack are never replaced.
    let (h, w) = GRID;
    let expected = (*pair.map_c.value()).clone().reshape(&[B, D, h * w]).unwrap();
    let got = pair.locals_c.value();
    for bi in 0..B {
        for t in 0..h * w {
            for c in 0..D {
                assert_eq!(got.at(&[bi, t, c]), expected.at(&[bi, c, t]));
            }
        }
    }
}

#[test]
fn recycling_differs_from_feeding_encoded_locals_forward() {
    let d = dmf(cfg(Variant::SeuThenMfu, 2));
    let mut store = init(&d, 3);
    let tape = Tape::new();
    let mut fwd = Forward::eval(&tape, &mut store);
    let pair = refined(&tape, 4);
    let states = run_stack(&d, &mut fwd, &pair);
    // A stack that overwrote its locals would feed the layer-0 encodings here.
    let (_, sl_c, _) = d.seu(0, Branch::Cnn).forward(&mut fwd, pair.global_c, pair.locals_c).unwrap();
    let (_, sl_t, _) = d.seu(0, Branch::Vit).forward(&mut fwd, pair.global_t, pair.locals_t).unwrap();
    let mut overwritten = pair;
    overwritten.locals_c = sl_c;
    overwritten.locals_t = sl_t;
    let wrong = d.htm_step(&mut fwd, states[1], &overwritten).unwrap();
    let diff = wrong.global_c.value().max_abs_diff(&states[2].global_c.value());
    assert!(diff > 1e-6, "layer-1 output insensitive to which locals are fed ({diff})");
}

fn zeroed_vit_locals<'t>(tape: &'t Tape, pair: &RefinedPair<'t>) -> RefinedPair<'t> {
    let mut p = *pair;
    p.locals_t = tape.constant(Tensor::zeros(&pair.locals_t.shape()));
    p
}

#[test]
fn cnn_fusion_reads_the_vit_locals() {
    for variant in [Variant::SeuThenMfu, Variant::MfuOnly, Variant::MfuThenSeu] {
        let d = dmf(cfg(variant, 1));
        let mut store = init(&d, 5);
        let tape = Tape::new();
        let mut fwd = Forward::eval(&tape, &mut store);
        let pair = refined(&tape, 6);
        let base = d.htm_step(&mut fwd, pair.initial_state(), &pair).unwrap();
        let zeroed = zeroed_vit_locals(&tape, &pair);
        let pert = d.htm_step(&mut fwd, zeroed.initial_state(), &zeroed).unwrap();
        let dc = base.global_c.value().max_abs_diff(&pert.global_c.value());
        assert!(dc > 1e-6, "{variant:?}: CNN token ignores ViT locals");
    }
    // Without the cross-attention, branches stay independent.
    let d = dmf(cfg(Variant::SeuOnly, 1));
    let mut store = init(&d, 5);
    let tape = Tape::new();
    let mut fwd = Forward::eval(&tape, &mut store);
    let pair = refined(&tape, 6);
    let base = d.htm_step(&mut fwd, pair.initial_state(), &pair).unwrap();
    let zeroed = zeroed_vit_locals(&tape, &pair);
    let pert = d.htm_step(&mut fwd, zeroed.initial_state(), &zeroed).unwrap();
    assert_eq!(bits(&base.global_c.value()), bits(&pert.global_c.value()));
    assert_ne!(bits(&base.global_t.value()), bits(&pert.global_t.value()));
}

#[test]
fn mfu_only_queries_the_opposite_refined_map() {
    let d = dmf(cfg(Variant::MfuOnly, 1));
    let mut store = init(&d, 7);
    let tape = Tape::new();
    let mut fwd = Forward::eval(&tape, &mut store);
    let pair = refined(&tape, 8);
    let next = d.htm_step(&mut fwd, pair.initial_state(), &pair).unwrap();
    let (fc, _) = d.mfu(0, Branch::Cnn).forward(&mut fwd, pair.global_c, pair.locals_t).unwrap();
    let (ft, _) = d.mfu(0, Branch::Vit).forward(&mut fwd, pair.global_t, pair.locals_c).unwrap();
    assert_eq!(bits(&fc.value()), bits(&next.global_c.value()));
    assert_eq!(bits(&ft.value()), bits(&next.global_t.value()));
}

#[test]
fn seu_only_passes_encoded_globals_through() {
    let d = dmf(cfg(Variant::SeuOnly, 1));
    let mut store = init(&d, 9);
    let tape = Tape::new();
    let mut fwd = Forward::eval(&tape, &mut store);
    let pair = refined(&tape, 10);
    let next = d.htm_step(&mut fwd, pair.initial_state(), &pair).unwrap();
    let (sg, _, _) = d.seu(0, Branch::Vit).forward(&mut fwd, pair.global_t, pair.locals_t).unwrap();
    assert_eq!(bits(&sg.value()), bits(&next.global_t.value()));
    assert!(store_has_prefix(&store, "dmf.layer0.seu."));
    assert!(!store_has_prefix(&store, "dmf.layer0.mfu"));
}

fn store_has_prefix(store: &ParamStore, prefix: &str) -> bool {
    store.paths().any(|p| p.starts_with(prefix))
}

/// Gradient of every SEU parameter for a loss on one or both fused tokens.
fn seu_grads(d: &Dmf, which: &[Branch]) -> Vec<(String, Tensor)> {
    let mut store = init(d, 11);
    let tape = Tape::new();
    let pair = refined(&tape, 12);
    let mut fwd = Forward::train(&tape, &mut store);
    let last = *run_stack(d, &mut fwd, &pair).last().unwrap();
    let parts: Vec<Var> = which.iter().map(|&b| last.global(b).sum()).collect();
    let mut loss = parts[0];
    for p in &parts[1..] {
        loss = loss.add(*p).unwrap();
    }
    let grads = tape.backward(loss).unwrap();
    let mut out: Vec<(String, Tensor)> = fwd
        .bound()
        .filter(|(p, _)| p.contains(".seu"))
        .map(|(p, v)| (p.to_string(), grads.get_or_zeros(v)))
        .collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

#[test]
fn shared_seu_accumulates_gradient_from_both_branches() {
    let d = dmf(cfg(Variant::SeuThenMfu, 1));
    let from_c = seu_grads(&d, &[Branch::Cnn]);
    let from_t = seu_grads(&d, &[Branch::Vit]);
    let both = seu_grads(&d, &[Branch::Cnn, Branch::Vit]);
    assert!(!both.is_empty());
    assert!(both.iter().all(|(p, _)| p.starts_with("dmf.layer0.seu.")));
    let q = "dmf.layer0.seu.attn.q.weight";
    let find = |g: &[(String, Tensor)]| g.iter().find(|(p, _)| p == q).unwrap().1.clone();
    assert!(find(&from_c).data().iter().any(|x| x.abs() > 0.0));
    assert!(find(&from_t).data().iter().any(|x| x.abs() > 0.0));
    for ((p, gb), ((_, gc), (_, gt))) in both.iter().zip(from_c.iter().zip(&from_t)) {
        for ((b, c), t) in gb.data().iter().zip(gc.data()).zip(gt.data()) {
            assert!((b - (c + t)).abs() <= 1e-10 * (1.0 + b.abs()), "{p}");
        }
    }
}

#[test]
fn unshared_seu_keeps_branches_apart() {
    let mut c = cfg(Variant::SeuThenMfu, 1);
    c.seu_shared = false;
    let d = dmf(c);
    let g = seu_grads(&d, &[Branch::Cnn]);
    let norm = |prefix: &str| -> f64 {
        g.iter()
            .filter(|(p, _)| p.starts_with(prefix))
            .flat_map(|(_, t)| t.data().to_vec())
            .map(|x| x * x)
            .sum()
    };
    assert!(norm("dmf.layer0.seu_c.") > 0.0);
    // The ViT SEU only reaches the CNN token through its encoded locals.
    assert!(norm("dmf.layer0.seu_t.") > 0.0);
    let mut c = cfg(Variant::SeuOnly, 1);
    c.seu_shared = false;
    let g = seu_grads(&dmf(c), &[Branch::Cnn]);
    let t_norm: f64 = g
        .iter()
        .filter(|(p, _)| p.starts_with("dmf.layer0.seu_t."))
        .flat_map(|(_, t)| t.data().to_vec())
        .map(|x| x * x)
        .sum();
    assert_eq!(t_norm, 0.0);
}

#[test]
fn stack_prefix_property() {
    let one = dmf(cfg(Variant::SeuThenMfu, 1));
    let two = dmf(cfg(Variant::SeuThenMfu, 2));
    let mut s1 = init(&one, 13);
    let mut s2 = init(&two, 13);
    let tape = Tape::new();
    let pair = refined(&tape, 14);
    let a = run_stack(&one, &mut Forward::eval(&tape, &mut s1), &pair);
    let b = run_stack(&two, &mut Forward::eval(&tape, &mut s2), &pair);
    assert_eq!(bits(&a[1].global_c.value()), bits(&b[1].global_c.value()));
    assert_eq!(bits(&a[1].global_t.value()), bits(&b[1].global_t.value()));
    assert_ne!(bits(&b[1].global_c.value()), bits(&b[2].global_c.value()));
    assert_eq!(b[2].global_c.shape(), vec![B, D]);
}

#[test]
fn repeated_steps_are_bit_identical() {
    let d = dmf(cfg(Variant::SeuThenMfu, 2));
    let run = || {
        let mut store = init(&d, 15);
        let tape = Tape::new();
        let pair = refined(&tape, 16);
        let s = run_stack(&d, &mut Forward::eval(&tape, &mut store), &pair);
        let last = *s.last().unwrap();
        (bits(&last.global_c.value()), bits(&last.global_t.value()))
    };
    assert_eq!(run(), run());
}

#[test]
fn step_beyond_the_stack_is_rejected() {
    let d = dmf(cfg(Variant::SeuThenMfu, 1));
    let mut store = init(&d, 17);
    let tape = Tape::new();
    let mut fwd = Forward::eval(&tape, &mut store);
    let pair = refined(&tape, 18);
    let s1 = d.htm_step(&mut fwd, pair.initial_state(), &pair).unwrap();
    assert!(matches!(d.htm_step(&mut fwd, s1, &pair), Err(Error::Config(_))));
}

#[test]
fn attention_capture_covers_every_unit() {
    let d = dmf(cfg(Variant::SeuThenMfu, 2));
    let mut store = init(&d, 19);
    let tape = Tape::new();
    let mut fwd = Forward::eval(&tape, &mut store);
    fwd.enable_capture();
    let pair = refined(&tape, 20);
    run_stack(&d, &mut fwd, &pair);
    let recs = fwd.take_captures();
    assert_eq!(recs.len(), 8);
    let hw = GRID.0 * GRID.1;
    for r in &recs {
        let expect = match r.unit {
            Unit::Seu => vec![B, 4, 1 + hw, 1 + hw],
            Unit::Mfu => vec![B, 4, 1, hw],
        };
        assert_eq!(r.weights.shape(), expect.as_slice());
        for row in r.weights.data().chunks(*expect.last().unwrap()) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

// --- unit-level examples ------------------------------------------------

fn unit_store(f: impl FnOnce(&mut Init<'_>)) -> ParamStore {
    let mut store = ParamStore::new();
    let mut r = ChaCha8Rng::seed_from_u64(21);
    f(&mut Init {
        store: &mut store,
        rng: &mut r,
    });
    store
}

fn zero(store: &mut ParamStore, path: &str) {
    store.value_mut(path).unwrap().data_mut().fill(0.0);
}

#[test]
fn seu_with_zeroed_output_maps_is_identity() {
    let seu = Seu::new("s", D, 4, 32);
    let mut store = unit_store(|i| seu.init(i).unwrap());
    for p in ["s.attn.proj.weight", "s.attn.proj.bias", "s.mlp.fc2.weight", "s.mlp.fc2.bias"] {
        zero(&mut store, p);
    }
    let tape = Tape::new();
    let mut r = rng(22);
    let g = tape.constant(randn(&mut r, &[B, D]));
    let l = tape.constant(randn(&mut r, &[B, 5, D]));
    let (sg, sl, w) = seu.forward(&mut Forward::eval(&tape, &mut store), g, l).unwrap();
    assert_eq!(bits(&sg.value()), bits(&g.value()));
    assert_eq!(bits(&sl.value()), bits(&l.value()));
    assert_eq!(w.shape(), vec![B, 4, 6, 6]);
}

#[test]
fn seu_on_equal_tokens_attends_uniformly() {
    let seu = Seu::new("s", D, 4, 32);
    let mut store = unit_store(|i| seu.init(i).unwrap());
    let tape = Tape::new();
    let mut r = rng(23);
    let tok = randn(&mut r, &[D]);
    let g = tape.constant(Tensor::new(&[1, D], tok.data().to_vec()).unwrap());
    let mut rep = Vec::new();
    for _ in 0..4 {
        rep.extend_from_slice(tok.data());
    }
    let l = tape.constant(Tensor::new(&[1, 4, D], rep).unwrap());
    let (_, sl, w) = seu.forward(&mut Forward::eval(&tape, &mut store), g, l).unwrap();
    assert_eq!(sl.shape(), vec![1, 4, D]);
    for x in w.value().data() {
        assert!((x - 0.2).abs() < 1e-12);
    }
}

#[test]
fn seu_rejects_indivisible_heads() {
    let seu = Seu::new("s", 10, 4, 20);
    let tape = Tape::new();
    let mut store = ParamStore::new();
    let g = tape.constant(Tensor::zeros(&[1, 10]));
    let l = tape.constant(Tensor::zeros(&[1, 2, 10]));
    let r = seu.forward(&mut Forward::eval(&tape, &mut store), g, l);
    assert!(matches!(r, Err(Error::Config(_))));
}

fn mfu() -> Mfu {
    Mfu {
        prefix: "m".into(),
        dim: D,
        heads: 4,
        hidden: 32,
    }
}

/// Values of `x · W + b` computed directly from the store.
fn affine(store: &ParamStore, prefix: &str, x: &[f64]) -> Vec<f64> {
    let w = store.value(&format!("{prefix}.weight")).unwrap();
    let b = store.value(&format!("{prefix}.bias")).unwrap();
    let (n_in, n_out) = (w.shape()[0], w.shape()[1]);
    (0..n_out)
        .map(|j| b.data()[j] + (0..n_in).map(|i| x[i] * w.at(&[i, j])).sum::<f64>())
        .collect()
}

#[test]
fn mhca_with_zero_query_averages_values_per_head() {
    let m = mfu();
    let mut store = unit_store(|i| m.init(i).unwrap());
    zero(&mut store, "m.q.weight");
    zero(&mut store, "m.q.bias");
    let tape = Tape::new();
    let mut r = rng(24);
    let q = tape.constant(randn(&mut r, &[1, D]));
    let kv_t = randn(&mut r, &[1, 3, D]);
    let kv = tape.constant(kv_t.clone());
    let (out, w) = fusionreid::dmf::mhca(&mut Forward::eval(&tape, &mut store), "m", q, kv, 4).unwrap();
    let vs: Vec<Vec<f64>> = kv_t.data().chunks(D).map(|t| affine(&store, "m.v", t)).collect();
    for c in 0..D {
        let mean = vs.iter().map(|v| v[c]).sum::<f64>() / 3.0;
        assert!((out.value().data()[c] - mean).abs() < 1e-12);
    }
    for x in w.value().data() {
        assert!((x - 1.0 / 3.0).abs() < 1e-12);
    }
}

#[test]
fn mhca_over_one_token_returns_its_value() {
    let m = mfu();
    let mut store = unit_store(|i| m.init(i).unwrap());
    let tape = Tape::new();
    let mut r = rng(25);
    let q = tape.constant(randn(&mut r, &[1, D]));
    let kv_t = randn(&mut r, &[1, 1, D]);
    let kv = tape.constant(kv_t.clone());
    let (out, _) = fusionreid::dmf::mhca(&mut Forward::eval(&tape, &mut store), "m", q, kv, 4).unwrap();
    let v = affine(&store, "m.v", kv_t.data());
    for (a, b) in out.value().data().iter().zip(&v) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn mhca_rejects_empty_keys() {
    let m = mfu();
    let mut store = unit_store(|i| m.init(i).unwrap());
    let tape = Tape::new();
    let q = tape.constant(Tensor::zeros(&[1, D]));
    let kv = tape.constant(Tensor::zeros(&[1, 0, D]));
    let r = fusionreid::dmf::mhca(&mut Forward::eval(&tape, &mut store), "m", q, kv, 4);
    assert!(matches!(r, Err(Error::Data(_))));
}

#[test]
fn mfu_residual_and_collapse_cases() {
    let m = mfu();
    let mut store = unit_store(|i| m.init(i).unwrap());
    zero(&mut store, "m.ffn.fc2.weight");
    zero(&mut store, "m.ffn.fc2.bias");
    let tape = Tape::new();
    let mut r = rng(26);
    let q = tape.constant(randn(&mut r, &[1, D]));
    let tok = randn(&mut r, &[D]);
    let rep: Vec<f64> = (0..5).flat_map(|_| tok.data().to_vec()).collect();
    let kv = tape.constant(Tensor::new(&[1, 5, D], rep).unwrap());
    let mut fwd = Forward::eval(&tape, &mut store);
    let (f, _) = m.forward(&mut fwd, q, kv).unwrap();
    let (mh, _) = fusionreid::dmf::mhca(&mut fwd, "m", q, kv, 4).unwrap();
    assert_eq!(bits(&f.value()), bits(&mh.value()));
    let v = affine(&store, "m.v", tok.data());
    for (a, b) in f.value().data().iter().zip(&v) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn mfu_gradient_reaches_query_and_key_value_sides() {
    let m = mfu();
    let mut store = unit_store(|i| m.init(i).unwrap());
    let tape = Tape::new();
    let mut r = rng(27);
    let q = tape.constant(randn(&mut r, &[2, D]));
    let kv = tape.constant(randn(&mut r, &[2, 4, D]));
    let mut fwd = Forward::train(&tape, &mut store);
    let (f, _) = m.forward(&mut fwd, q, kv).unwrap();
    let loss = f.mul(f).unwrap().sum();
    let grads = tape.backward(loss).unwrap();
    for p in ["m.q.weight", "m.k.weight", "m.v.weight", "m.ffn.fc1.weight"] {
        let v = fwd.bound().find(|(n, _)| *n == p).unwrap().1;
        let g = grads.get(v).unwrap();
        assert!(g.data().iter().any(|x| x.abs() > 1e-12), "{p}");
    }
}

#[test]
fn lru_identity_configuration_passes_input_through() {
    let lru = Lru {
        prefix: "l".into(),
        in_dim: 3,
        dim: 3,
        in_grid: (2, 2),
        grid: (2, 2),
        kernel: 1,
        pooling: Pooling::Gem,
    };
    let mut store = unit_store(|i| lru.init(i).unwrap());
    store.value_mut("l.dw.weight").unwrap().data_mut().fill(1.0);
    *store.value_mut("l.pw.weight").unwrap() = Tensor::eye(3).reshape(&[3, 3, 1, 1]).unwrap();
    let mut r = rng(28);
    // Positive inputs stay in the PReLU pass-through region.
    let x = randn(&mut r, &[1, 3, 2, 2]).map(|v| v.abs() + 0.1);
    let tape = Tape::new();
    let (y, _) = lru.forward(&mut Forward::eval(&tape, &mut store), tape.constant(x.clone())).unwrap();
    // Unit running variance leaves the eps term of batch norm.
    let scale = (1.0 + fusionreid::nn::NORM_EPS).sqrt();
    for (a, b) in y.value().data().iter().zip(x.data()) {
        assert!((a * scale * scale - b).abs() < 1e-12);
    }
}

#[test]
fn lru_toy_shape_and_stride_errors() {
    let lru = Lru {
        prefix: "l".into(),
        in_dim: 16,
        dim: 8,
        in_grid: (4, 2),
        grid: (4, 2),
        kernel: 3,
        pooling: Pooling::Gem,
    };
    let mut store = unit_store(|i| lru.init(i).unwrap());
    let tape = Tape::new();
    let x = tape.constant(Tensor::ones(&[2, 16, 4, 2]));
    let (y, g) = lru.forward(&mut Forward::eval(&tape, &mut store), x).unwrap();
    assert_eq!(y.shape(), vec![2, 8, 4, 2]);
    assert_eq!(g.shape(), vec![2, 8]);
    let bad = Lru {
        in_grid: (6, 2),
        grid: (4, 2),
        ..lru
    };
    assert!(matches!(bad.stride(), Err(Error::Config(_))));
}

#[test]
fn lru_gradient_check() {
    let lru = Lru {
        prefix: "l".into(),
        in_dim: 4,
        dim: 3,
        in_grid: (4, 4),
        grid: (2, 2),
        kernel: 3,
        pooling: Pooling::Gem,
    };
    let mut r = rng(29);
    let x = randn(&mut r, &[3, 4, 4, 4]);
    let proj = randn(&mut r, &[3, 3 * 4 + 3]);
    let store = unit_store(|i| lru.init(i).unwrap());
    let picks: Vec<(String, usize)> = store
        .iter()
        .flat_map(|(p, v)| (0..v.value.numel()).map(move |j| (p.to_string(), j)))
        .collect();
    let (worst, _) = common::check_store_grads(&store, &picks, 1e-5, |s| {
        let tape = Tape::new();
        // Batch statistics with gradients; the store is a throwaway copy.
        let mut fwd = Forward::new(&tape, s, true, true);
        let (y, g) = lru.forward(&mut fwd, tape.constant(x.clone())).unwrap();
        let out = Var::concat(&[y.reshape(&[3, 12]).unwrap(), g], 1).unwrap();
        let loss = out.mul(tape.constant(proj.clone())).unwrap().sum();
        let grads = tape.backward(loss).unwrap();
        (loss.item(), common::bound_grads(&fwd, &grads))
    });
    assert!(worst < 1e-4, "worst relative error {worst}");
}

// --- parameter counts ---------------------------------------------------

fn counted(d: &Dmf) -> usize {
    init(d, 0).numel_with_prefix("dmf.layer")
}

#[test]
fn closed_form_counts_match_instantiated_stores() {
    for variant in Variant::ALL {
        for (ss, ms) in [(true, true), (true, false), (false, true), (false, false)] {
            let mut c = cfg(variant, 2);
            c.seu_shared = ss;
            c.mfu_shared = ms;
            let d = dmf(c);
            let counts = d.count_params().unwrap();
            assert_eq!(counts.htm_stack, counted(&d), "{variant:?} {ss} {ms}");
            let store = init(&d, 0);
            assert_eq!(counts.total, store.numel_with_prefix("dmf."));
            assert_eq!(counts.lru_c, store.numel_with_prefix("dmf.lru_c."));
        }
    }
}

#[test]
fn zero_layers_are_rejected() {
    let d = dmf(cfg(Variant::SeuThenMfu, 0));
    assert!(matches!(d.count_params(), Err(Error::Config(_))));
}

#[test]
fn attention_parameters_scale_quadratically() {
    // q, k, v and output maps: 4 (D^2 + D) for the SEU attention.
    for dim in [8usize, 16, 32] {
        let a = fusionreid::nn::SelfAttention::num_params(dim);
        assert_eq!(a, 4 * dim * dim + 4 * dim);
        let a2 = fusionreid::nn::SelfAttention::num_params(2 * dim);
        // Only the bias terms break the exact factor of four.
        assert_eq!(4 * a - a2, 8 * dim);
    }
}

fn stack(dim: usize, heads: usize, layers: usize, ratio: usize, v: Variant, ss: bool, ms: bool) -> usize {
    let c = DmfConfig {
        dim,
        heads,
        layers,
        ffn_ratio: ratio,
        variant: v,
        seu_shared: ss,
        mfu_shared: ms,
        ..DmfConfig::default()
    };
    dmf(c).count_params().unwrap().htm_stack
}

proptest! {
    #[test]
    fn full_stack_is_the_sum_of_its_halves(
        hd in 1usize..5, heads in 1usize..5, layers in 1usize..5, ratio in 1usize..5,
        ss in any::<bool>(), ms in any::<bool>(),
    ) {
        let dim = hd * heads;
        let full = stack(dim, heads, layers, ratio, Variant::SeuThenMfu, ss, ms);
        let seu = stack(dim, heads, layers, ratio, Variant::SeuOnly, ss, ms);
        let mfu = stack(dim, heads, layers, ratio, Variant::MfuOnly, ss, ms);
        prop_assert_eq!(full, seu + mfu);
        prop_assert_eq!(full, stack(dim, heads, layers, ratio, Variant::MfuThenSeu, ss, ms));
    }

    #[test]
    fn shared_stack_is_half_of_unshared(
        hd in 1usize..5, heads in 1usize..5, layers in 1usize..5, ratio in 1usize..5,
    ) {
        let dim = hd * heads;
        let shared = stack(dim, heads, layers, ratio, Variant::SeuThenMfu, true, true);
        let unshared = stack(dim, heads, layers, ratio, Variant::SeuThenMfu, false, false);
        prop_assert_eq!(2 * shared, unshared);
    }
}
