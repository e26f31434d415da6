//! Metrics against naive double-loop references on 10-point fixtures.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use matchdiff::data::uniform_rotation;
use matchdiff::geometry::{axis_angle, interpolate_flow, Point, PointCloud, RigidTransform};
use matchdiff::metrics::{
    correspondence_rmse, feature_matching_recall, flow_metrics, inlier_ratio, nfmr, registration_recall, FlowThresholds, GtWarp,
};

const TOL: f64 = 1e-12;

fn fixture(seed: u64) -> (PointCloud, PointCloud, RigidTransform, Vec<(usize, usize)>) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let src = PointCloud::new((0..10).map(|_| Vector3::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0))).collect());
    let gt = RigidTransform::new(uniform_rotation(&mut r), Vector3::new(r.random_range(-1.0..1.0), 0.2, -0.4));
    let tgt = PointCloud::new(src.points.iter().map(|p| gt.apply(p) + Vector3::new(r.random_range(-0.1..0.1), r.random_range(-0.1..0.1), r.random_range(-0.1..0.1))).collect());
    let pred = (0..10).map(|i| (i, if r.random_bool(0.5) { i } else { r.random_range(0..10) })).collect();
    (src, tgt, gt, pred)
}

fn dist(a: &Point, b: &Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn apply(rt: &RigidTransform, p: &Point) -> Point {
    let mut out = Vector3::zeros();
    for r in 0..3 {
        out[r] = rt.translation[r];
        for c in 0..3 {
            out[r] += rt.rotation[(r, c)] * p[c];
        }
    }
    out
}

fn ref_ir(pred: &[(usize, usize)], src: &PointCloud, tgt: &PointCloud, gt: &RigidTransform, sigma: f64) -> f64 {
    let mut hits = 0;
    for &(i, j) in pred {
        if dist(&apply(gt, &src.points[i]), &tgt.points[j]) < sigma {
            hits += 1;
        }
    }
    hits as f64 / pred.len() as f64
}

/// Inverse-distance interpolation by selection of the k nearest anchors, one at a time.
fn ref_gamma(u: &Point, anchors: &[Point], flows: &[Vector3<f64>], k: usize) -> Vector3<f64> {
    let mut used = vec![false; anchors.len()];
    let mut chosen = Vec::new();
    for _ in 0..k.min(anchors.len()) {
        let mut best: Option<usize> = None;
        for a in 0..anchors.len() {
            if !used[a] && best.is_none_or(|b| dist(u, &anchors[a]) < dist(u, &anchors[b])) {
                best = Some(a);
            }
        }
        let b = best.unwrap();
        used[b] = true;
        chosen.push(b);
    }
    if dist(u, &anchors[chosen[0]]) < 1e-12 {
        return flows[chosen[0]];
    }
    let (mut num, mut den) = (Vector3::zeros(), 0.0);
    for &a in &chosen {
        let w = 1.0 / dist(u, &anchors[a]);
        num += flows[a] * w;
        den += w;
    }
    num / den
}

fn ref_nfmr(gt: &[(usize, usize)], pred: &[(usize, usize)], src: &PointCloud, tgt: &PointCloud, sigma: f64) -> f64 {
    let anchors: Vec<Point> = pred.iter().map(|&(i, _)| src.points[i]).collect();
    let flows: Vec<Vector3<f64>> = pred.iter().map(|&(i, j)| tgt.points[j] - src.points[i]).collect();
    let mut hits = 0;
    for &(i, j) in gt {
        let moved = src.points[i] + ref_gamma(&src.points[i], &anchors, &flows, 3);
        if dist(&moved, &tgt.points[j]) < sigma {
            hits += 1;
        }
    }
    hits as f64 / gt.len() as f64
}

#[test]
fn inlier_ratio_matches_reference() {
    for seed in 0..30 {
        let (src, tgt, gt, pred) = fixture(seed);
        for sigma in [0.05, 0.1, 0.2] {
            let v = inlier_ratio(&pred, &src, &tgt, &GtWarp::Rigid(gt), sigma);
            assert!((v - ref_ir(&pred, &src, &tgt, &gt, sigma)).abs() <= TOL);
        }
    }
}

#[test]
fn interpolation_and_nfmr_match_reference() {
    for seed in 0..30 {
        let (src, tgt, _, pred) = fixture(seed);
        let gt: Vec<(usize, usize)> = (0..10).map(|i| (i, i)).collect();
        let v = nfmr(&gt, &pred, &src, &tgt, 0.1).unwrap();
        assert!((v - ref_nfmr(&gt, &pred, &src, &tgt, 0.1)).abs() <= TOL, "seed {seed}");
        let anchors = &src.points;
        let flows: Vec<Vector3<f64>> = tgt.points.iter().zip(anchors).map(|(a, b)| a - b).collect();
        for u in [Vector3::new(0.1, -0.3, 0.2), src.points[3]] {
            let g = interpolate_flow(&u, anchors, &flows, 3).unwrap();
            assert!((g - ref_gamma(&u, anchors, &flows, 3)).norm() <= TOL);
        }
    }
}

#[test]
fn registration_decisions_match_reference() {
    let mut positives = 0;
    for seed in 0..40 {
        let (src, _, gt, _) = fixture(seed);
        let corr: Vec<(usize, usize)> = (0..10).map(|i| (i, i)).collect();
        let angle = 0.02 * seed as f64;
        let pred = RigidTransform::new(axis_angle(&Vector3::x(), angle) * gt.rotation, gt.translation + Vector3::new(0.0, 0.004 * seed as f64, 0.0));
        let mut sq = 0.0;
        for &(i, _) in &corr {
            sq += dist(&apply(&pred, &src.points[i]), &apply(&gt, &src.points[i])).powi(2);
        }
        let rmse = (sq / corr.len() as f64).sqrt();
        assert!((correspondence_rmse(&pred, &gt, &src, &corr).unwrap() - rmse).abs() <= TOL);
        let hit = registration_recall(&pred, &gt, &src, &corr, 0.2).unwrap();
        assert_eq!(hit, rmse < 0.2);
        positives += hit as usize;
    }
    assert!(positives > 0 && positives < 40);
}

#[test]
fn flow_metrics_match_reference() {
    let th = FlowThresholds::default();
    for seed in 0..30 {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let gt: Vec<Vector3<f64>> = (0..10).map(|_| Vector3::new(r.random_range(-0.5..0.5), r.random_range(-0.5..0.5), r.random_range(0.05..0.5))).collect();
        let pred: Vec<Vector3<f64>> = gt.iter().map(|g| g + Vector3::new(r.random_range(-0.08..0.08), r.random_range(-0.08..0.08), 0.0)).collect();
        let m = flow_metrics(&pred, &gt, &th).unwrap();
        let (mut epe, mut s, mut a, mut o) = (0.0, 0, 0, 0);
        for k in 0..10 {
            let e = dist(&pred[k], &gt[k]);
            let rel = e / dist(&gt[k], &Vector3::zeros());
            epe += e;
            s += (e < 0.025 || rel < 0.025) as usize;
            a += (e < 0.05 || rel < 0.05) as usize;
            o += (e > 0.3 || rel > 0.1) as usize;
        }
        assert!((m.epe - epe / 10.0).abs() <= TOL);
        assert!((m.acc_s - s as f64 / 10.0).abs() <= TOL);
        assert!((m.acc_r - a as f64 / 10.0).abs() <= TOL);
        assert!((m.outlier - o as f64 / 10.0).abs() <= TOL);
    }
}

#[test]
fn fmr_matches_reference() {
    let irs = [0.0, 0.05, 0.051, 0.3, 1.0, 0.04, 0.06, 0.5, 0.049, 0.2];
    let count = irs.iter().filter(|&&v| v > 0.05).count();
    assert!((feature_matching_recall(&irs, 0.05) - count as f64 / 10.0).abs() <= TOL);
}
