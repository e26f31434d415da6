use super::*;
use crate::dsm::is_doubly_stochastic;
use crate::tensor::gradcheck::{check_gradients, DEFAULT_STEP};
use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use std::sync::Arc;

fn small_cfg() -> DenoiserConfig {
    DenoiserConfig {
        d_model: 12,
        n_layers: 1,
        rotary_voxel: 0.5,
        ..DenoiserConfig::default()
    }
}

fn randn(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| StandardNormal.sample(rng))
}

fn cloud(n: usize, rng: &mut ChaCha8Rng) -> PointCloud {
    let u = Uniform::new(-1.0, 1.0).unwrap();
    PointCloud::new((0..n).map(|_| Vector3::new(u.sample(rng), u.sample(rng), u.sample(rng))).collect())
}

fn store(cfg: &DenoiserConfig, seed: u64) -> ParamStore {
    let mut s = ParamStore::new();
    init_params(&mut s, cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    s
}

fn layer_names(prefix: &str) -> Vec<String> {
    let mut v: Vec<String> = ["wq", "wk", "wv"].iter().map(|w| format!("{prefix}.{w}")).collect();
    for i in 0..3 {
        v.push(format!("{prefix}.mlp.w{i}"));
        v.push(format!("{prefix}.mlp.b{i}"));
    }
    v
}

#[test]
fn config_validation() {
    assert!(DenoiserConfig::default().validate().is_ok());
    assert!(DenoiserConfig::full_scale().validate().is_ok());
    let bad = DenoiserConfig {
        d_model: 64,
        ..DenoiserConfig::default()
    };
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
}

#[test]
fn single_token_self_attention() {
    let cfg = small_cfg();
    let s = store(&cfg, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let f = randn(1, 12, &mut rng);
    let p = cloud(1, &mut rng);
    let rot = rotary_encode(&p, &cfg).unwrap();

    let mut tape = Tape::new();
    let b = s.bind(&mut tape, &[]);
    let fv = tape.constant(f.clone());
    let out = attention_layer(&mut tape, fv, fv, &rot, &rot, &b, "denoiser.layer0", AttentionMode::SelfAttention).unwrap();
    let got = tape.value(out).clone();

    let mut t2 = Tape::new();
    let b2 = s.bind(&mut t2, &[]);
    let wv = s.get("denoiser.layer0.wv").unwrap();
    let mut cat = Array2::zeros((1, 24));
    cat.slice_mut(ndarray::s![.., ..12]).assign(&f);
    cat.slice_mut(ndarray::s![.., 12..]).assign(&f.dot(wv));
    let c = t2.constant(cat);
    let m = mlp(&mut t2, c, &b2, "denoiser.layer0.mlp").unwrap();
    let want = &f + t2.value(m);
    for (a, b) in got.iter().zip(want.iter()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn zero_projections_give_uniform_weights() {
    let cfg = small_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let fq = randn(3, 12, &mut rng);
    let fk = randn(5, 12, &mut rng);
    let z = Array2::zeros((12, 12));
    let ra = rotary_encode(&cloud(3, &mut rng), &cfg).unwrap();
    let rb = rotary_encode(&cloud(5, &mut rng), &cfg).unwrap();
    let w = attention_weights(&fq, &fk, &z, &z, &ra, &rb);
    assert!(w.iter().all(|&x| (x - 0.2).abs() < 1e-15));
}

#[test]
fn attention_layer_gradients() {
    let cfg = small_cfg();
    for seed in 0..3 {
        let s = store(&cfg, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let rot_a = rotary_encode(&cloud(4, &mut rng), &cfg).unwrap();
        let rot_b = rotary_encode(&cloud(4, &mut rng), &cfg).unwrap();
        let weight = Arc::new(randn(4, 12, &mut rng));
        let names = layer_names("denoiser.layer1");
        let mut inputs = vec![randn(4, 12, &mut rng), randn(4, 12, &mut rng)];
        inputs.extend(names.iter().map(|n| s.get(n).unwrap().clone()));
        let rep = check_gradients(&inputs, DEFAULT_STEP, |t, v| {
            let b = BoundParams::from_vars(names.iter().cloned().zip(v[2..].iter().copied()));
            let o = attention_layer(t, v[0], v[1], &rot_a, &rot_b, &b, "denoiser.layer1", AttentionMode::Cross)?;
            let o = t.mul_const(o, weight.clone())?;
            Ok(t.sum(o))
        })
        .unwrap();
        assert!(rep.max_rel_err < 1e-4, "seed {seed}: {:?}", rep.per_input);
    }
}

#[test]
fn empty_stack_is_identity() {
    let cfg = small_cfg();
    let s = store(&cfg, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (a, b) = (randn(5, 12, &mut rng), randn(7, 12, &mut rng));
    let ra = rotary_encode(&cloud(5, &mut rng), &cfg).unwrap();
    let rb = rotary_encode(&cloud(7, &mut rng), &cfg).unwrap();
    let mut tape = Tape::new();
    let bp = s.bind(&mut tape, &[]);
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let (oa, ob) = f_theta(&mut tape, va, vb, &ra, &rb, &bp, 0).unwrap();
    assert_eq!(tape.value(oa), &a);
    assert_eq!(tape.value(ob), &b);
    let (oa, ob) = f_theta(&mut tape, va, vb, &ra, &rb, &bp, 1).unwrap();
    assert_eq!(tape.shape(oa), (5, 12));
    assert_eq!(tape.shape(ob), (7, 12));
}

#[test]
fn f_theta_permutation_equivariance() {
    let cfg = small_cfg();
    let s = store(&cfg, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (pa, pb) = (cloud(6, &mut rng), cloud(4, &mut rng));
    let (a, b) = (randn(6, 12, &mut rng), randn(4, 12, &mut rng));
    let perm = [3usize, 0, 5, 1, 4, 2];
    let pa2 = PointCloud::new(perm.iter().map(|&i| pa.points[i]).collect());
    let a2 = Array2::from_shape_fn((6, 12), |(r, c)| a[[perm[r], c]]);

    let run = |pc: &PointCloud, f: &Array2<f64>| {
        let mut tape = Tape::new();
        let bp = s.bind(&mut tape, &[]);
        let ra = rotary_encode(pc, &cfg).unwrap();
        let rb = rotary_encode(&pb, &cfg).unwrap();
        let (va, vb) = (tape.constant(f.clone()), tape.constant(b.clone()));
        let (oa, ob) = f_theta(&mut tape, va, vb, &ra, &rb, &bp, 1).unwrap();
        (tape.value(oa).clone(), tape.value(ob).clone())
    };
    let (oa, ob) = run(&pa, &a);
    let (oa2, ob2) = run(&pa2, &a2);
    for r in 0..6 {
        for c in 0..12 {
            assert!((oa2[[r, c]] - oa[[perm[r], c]]).abs() < 1e-10);
        }
    }
    for (x, y) in ob.iter().zip(ob2.iter()) {
        assert!((x - y).abs() < 1e-10);
    }
}

#[test]
fn logits_of_one_hot_features_at_origin() {
    let cfg = small_cfg();
    let mut s = ParamStore::new();
    s.insert("m.wp", Array2::eye(12));
    s.insert("m.wq", Array2::eye(12));
    let f = Array2::from_shape_fn((4, 12), |(r, c)| if c == r * 2 { 1.0 } else { 0.0 });
    let origin = PointCloud::from_rows(&[[0.0; 3]; 4]);
    let rot = rotary_encode(&origin, &cfg).unwrap();
    let mut tape = Tape::new();
    let b = s.bind(&mut tape, &[]);
    let v = tape.constant(f.clone());
    let l = matching_logits(&mut tape, v, v, &rot, &rot, &b, "m").unwrap();
    let want = f.dot(&f.t()) / 12f64.sqrt();
    assert_eq!(tape.value(l), &want);
}

#[test]
fn logits_translation_invariant_and_gradients() {
    let cfg = small_cfg();
    let s = store(&cfg, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (p, q) = (cloud(5, &mut rng), cloud(4, &mut rng));
    let (a, b) = (randn(5, 12, &mut rng), randn(4, 12, &mut rng));
    let off = Vector3::new(3.0, -7.5, 1.25);
    let eval = |p: &PointCloud, q: &PointCloud| {
        let mut tape = Tape::new();
        let bp = s.bind(&mut tape, &[]);
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let rp = rotary_encode(p, &cfg).unwrap();
        let rq = rotary_encode(q, &cfg).unwrap();
        let l = matching_logits(&mut tape, va, vb, &rp, &rq, &bp, "denoiser.match").unwrap();
        tape.value(l).clone()
    };
    let l0 = eval(&p, &q);
    let l1 = eval(&p.translated(&off), &q.translated(&off));
    for (x, y) in l0.iter().zip(l1.iter()) {
        assert!((x - y).abs() < 1e-9);
    }

    let rp = rotary_encode(&p, &cfg).unwrap();
    let rq = rotary_encode(&q, &cfg).unwrap();
    let weight = Arc::new(randn(5, 4, &mut rng));
    let inputs = vec![
        a.clone(),
        b.clone(),
        s.get("denoiser.match.wp").unwrap().clone(),
        s.get("denoiser.match.wq").unwrap().clone(),
    ];
    let rep = check_gradients(&inputs, DEFAULT_STEP, |t, v| {
        let bp = BoundParams::from_vars([("x.wp".to_string(), v[2]), ("x.wq".to_string(), v[3])]);
        let l = matching_logits(t, v[0], v[1], &rp, &rq, &bp, "x")?;
        let l = t.mul_const(l, weight.clone())?;
        Ok(t.sum(l))
    })
    .unwrap();
    assert!(rep.max_rel_err < 1e-4, "{:?}", rep.per_input);
}

fn random_scores(n: usize, m: usize, rng: &mut ChaCha8Rng) -> MatchMatrix {
    let u = Uniform::new(0.01, 1.0).unwrap();
    MatchMatrix(Array2::from_shape_fn((n, m), |_| u.sample(rng)))
}

#[test]
fn g_theta_output_is_relaxed_dsm_for_random_params() {
    let cfg = small_cfg();
    for seed in 0..5 {
        let mut s = store(&cfg, seed);
        for (_, v) in s.iter_mut() {
            v.mapv_inplace(|x| x * 3.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (p, q) = (cloud(9, &mut rng), cloud(7, &mut rng));
        let (a, b) = (randn(9, 12, &mut rng), randn(7, 12, &mut rng));
        let e = random_scores(9, 7, &mut rng);
        let (out, _, rt) = g_theta(&e, &p, &q, &a, &b, &s, &cfg).unwrap();
        assert!(is_doubly_stochastic(&out, 1e-4, Marginals::Relaxed));
        assert!(out.values().iter().all(|&x| (0.0..=1.0).contains(&x)));
        assert!(rt.is_valid(1e-9));
        let (again, _, _) = g_theta(&e, &p, &q, &a, &b, &s, &cfg).unwrap();
        assert_eq!(out, again);
    }
}

#[test]
fn g_theta_joint_translation_invariance() {
    let cfg = small_cfg();
    let s = store(&cfg, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (p, q) = (cloud(8, &mut rng), cloud(8, &mut rng));
    let (a, b) = (randn(8, 12, &mut rng), randn(8, 12, &mut rng));
    let e = random_scores(8, 8, &mut rng);
    let off = Vector3::new(-2.0, 0.7, 4.0);
    let (o1, _, _) = g_theta(&e, &p, &q, &a, &b, &s, &cfg).unwrap();
    let (o2, _, _) = g_theta(&e, &p.translated(&off), &q.translated(&off), &a, &b, &s, &cfg).unwrap();
    for (x, y) in o1.values().iter().zip(o2.values().iter()) {
        assert!((x - y).abs() < 1e-6);
    }
}

#[test]
fn g_theta_rejects_shape_mismatch() {
    let cfg = small_cfg();
    let s = store(&cfg, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (p, q) = (cloud(4, &mut rng), cloud(5, &mut rng));
    let e = random_scores(4, 4, &mut rng);
    let (a, b) = (randn(4, 12, &mut rng), randn(5, 12, &mut rng));
    assert!(matches!(g_theta(&e, &p, &q, &a, &b, &s, &cfg), Err(Error::Dimension(_))));
}

#[test]
fn degenerate_alignment_falls_back_to_identity() {
    let cfg = small_cfg();
    let s = store(&cfg, 9);
    let p = PointCloud::from_rows(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
    let q = p.clone();
    let e = MatchMatrix(Array2::eye(3));
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (a, b) = (randn(3, 12, &mut rng), randn(3, 12, &mut rng));
    let (out, _, rt) = g_theta(&e, &p, &q, &a, &b, &s, &cfg).unwrap();
    assert_eq!(rt, RigidTransform::identity());
    assert!(is_doubly_stochastic(&out, 1e-4, Marginals::Relaxed));
}
