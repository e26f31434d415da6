use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{mutual_nn_pairs, ScenePair, SIGMA_DEFORMABLE, SIGMA_RIGID};
use crate::error::{Error, Result};
use crate::geometry::{rigid_warp, Point, PointCloud, RigidTransform};

pub const MAX_ATTEMPTS: usize = 50;
const BOX_HALF: f64 = 1.5;
const MIN_SPACING: f64 = 0.08;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SceneKind {
    Rigid,
    #[serde(alias = "deform")]
    Deformable,
}

/// Parameters for a whole synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub kind: SceneKind,
    pub n_points: usize,
    /// Per-pair overlap target drawn uniformly from `[overlap_min, overlap_max]`.
    pub overlap_min: f64,
    pub overlap_max: f64,
    pub noise_std: f64,
    pub n_rbf: usize,
    pub max_disp: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            kind: SceneKind::Rigid,
            n_points: 128,
            overlap_min: 0.6,
            overlap_max: 1.0,
            noise_std: 0.005,
            n_rbf: 4,
            max_disp: 0.3,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_points < 3 {
            return Err(Error::Config("data.n_points must be >= 3".into()));
        }
        if !(self.overlap_min > 0.0 && self.overlap_min <= self.overlap_max && self.overlap_max <= 1.0) {
            return Err(Error::Config("data overlap range must satisfy 0 < min <= max <= 1".into()));
        }
        if !(self.noise_std >= 0.0) || !(self.max_disp >= 0.0) {
            return Err(Error::Config("data.noise_std and data.max_disp must be >= 0".into()));
        }
        Ok(())
    }
}

/// SplitMix64 mix of a base seed and an index.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn uniform_rotation<R: Rng>(rng: &mut R) -> nalgebra::Matrix3<f64> {
    let mut g = || -> f64 { StandardNormal.sample(rng) };
    let q = Quaternion::new(g(), g(), g(), g());
    UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner()
}

fn unit_vector<R: Rng>(rng: &mut R) -> Vector3<f64> {
    loop {
        let v = Vector3::new(StandardNormal.sample(rng), StandardNormal.sample(rng), StandardNormal.sample(rng));
        let n: f64 = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

enum Primitive {
    Sphere { center: Point, radius: f64 },
    Plane { center: Point, u: Vector3<f64>, v: Vector3<f64>, half: (f64, f64) },
    Cluster { center: Point, std: f64 },
}

impl Primitive {
    fn random<R: Rng>(rng: &mut R) -> Self {
        let c = BOX_HALF - 0.4;
        let center = Point::new(rng.random_range(-c..c), rng.random_range(-c..c), rng.random_range(-c..c));
        match rng.random_range(0..3) {
            0 => Primitive::Sphere {
                center,
                radius: rng.random_range(0.2..0.5),
            },
            1 => {
                let n = unit_vector(rng);
                let helper = if n.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
                let u = n.cross(&helper).normalize();
                let v = n.cross(&u);
                Primitive::Plane {
                    center,
                    u,
                    v,
                    half: (rng.random_range(0.25..0.8), rng.random_range(0.25..0.8)),
                }
            }
            _ => Primitive::Cluster {
                center,
                std: rng.random_range(0.08..0.25),
            },
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> Point {
        match self {
            Primitive::Sphere { center, radius } => center + unit_vector(rng) * *radius,
            Primitive::Plane { center, u, v, half } => {
                center + u * rng.random_range(-half.0..half.0) + v * rng.random_range(-half.1..half.1)
            }
            Primitive::Cluster { center, std } => {
                let g = Vector3::new(StandardNormal.sample(rng), StandardNormal.sample(rng), StandardNormal.sample(rng));
                center + g * *std
            }
        }
    }
}

/// `count` points on 4 to 7 random primitives inside a 3 m box, no two
/// closer than a fixed minimum spacing.
pub fn primitive_cloud<R: Rng>(count: usize, rng: &mut R) -> Result<PointCloud> {
    for _ in 0..MAX_ATTEMPTS {
        let prims: Vec<Primitive> = (0..rng.random_range(4..=7)).map(|_| Primitive::random(rng)).collect();
        let mut pts: Vec<Point> = Vec::with_capacity(count);
        let mut tries = 0;
        while pts.len() < count && tries < count * 200 {
            tries += 1;
            let p = prims[rng.random_range(0..prims.len())].sample(rng);
            if p.iter().any(|c| c.abs() > BOX_HALF) {
                continue;
            }
            if pts.iter().all(|q| (q - p).norm() >= MIN_SPACING) {
                pts.push(p);
            }
        }
        if pts.len() == count {
            return Ok(PointCloud::new(pts));
        }
    }
    Err(Error::Generation(format!("could not place {count} points with spacing {MIN_SPACING}")))
}

fn shuffled<R: Rng>(pts: Vec<Point>, rng: &mut R) -> Vec<Point> {
    let mut pts = pts;
    pts.shuffle(rng);
    pts
}

/// Rigid pair: a base cloud is split along a random direction so that both
/// halves hold `n_points` and share `round(overlap · n)` of them; the target
/// half is moved by a random rigid transform and jittered.
pub fn gen_rigid_pair(n_points: usize, overlap_target: f64, noise_std: f64, seed: u64) -> Result<ScenePair> {
    if !(overlap_target > 0.0 && overlap_target <= 1.0) {
        return Err(Error::Parameter(format!("overlap target {overlap_target} outside (0, 1]")));
    }
    if n_points < 3 {
        return Err(Error::Parameter("need at least 3 points".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shared = ((overlap_target * n_points as f64).round() as usize).max(1);
    for _ in 0..MAX_ATTEMPTS {
        let base = primitive_cloud(2 * n_points - shared, &mut rng)?;
        let u = unit_vector(&mut rng);
        let mut order: Vec<usize> = (0..base.len()).collect();
        order.sort_by(|&a, &b| base.points[a].dot(&u).total_cmp(&base.points[b].dot(&u)).then(a.cmp(&b)));
        let src: Vec<Point> = order[..n_points].iter().map(|&i| base.points[i]).collect();
        let tgt_base: Vec<Point> = order[base.len() - n_points..].iter().map(|&i| base.points[i]).collect();

        let gt = RigidTransform::new(
            uniform_rotation(&mut rng),
            Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
        );
        let src = PointCloud::new(shuffled(src, &mut rng));
        let tgt: Vec<Point> = tgt_base
            .iter()
            .map(|p| {
                let jitter = Vector3::new(
                    StandardNormal.sample(&mut rng),
                    StandardNormal.sample(&mut rng),
                    StandardNormal.sample(&mut rng),
                ) * noise_std;
                gt.apply(p) + jitter
            })
            .collect();
        let tgt = PointCloud::new(shuffled(tgt, &mut rng));
        let gt_pairs = mutual_nn_pairs(&rigid_warp(&src, &gt), &tgt, SIGMA_RIGID);
        let overlap = gt_pairs.len() as f64 / n_points as f64;
        if (overlap - overlap_target).abs() <= 0.05 {
            return Ok(ScenePair {
                name: String::new(),
                src,
                tgt,
                gt_transform: Some(gt),
                gt_flow: None,
                gt_pairs,
                overlap,
                sigma: SIGMA_RIGID,
            });
        }
    }
    Err(Error::Generation(format!(
        "overlap {overlap_target} not reached within {MAX_ATTEMPTS} attempts"
    )))
}

/// Gaussian bump `amplitude · exp(−‖x − center‖² / (2 width²))`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rbf {
    pub center: Point,
    pub width: f64,
    pub amplitude: Vector3<f64>,
}

pub fn rbf_flow(bumps: &[Rbf], x: &Point) -> Vector3<f64> {
    bumps
        .iter()
        .map(|b| b.amplitude * (-(x - b.center).norm_squared() / (2.0 * b.width * b.width)).exp())
        .sum()
}

pub fn gen_deformable_pair(n_points: usize, n_rbf: usize, max_disp: f64, seed: u64) -> Result<ScenePair> {
    gen_deformable_with(n_points, n_rbf, max_disp, 1.0, seed).map(|(p, _)| p)
}

/// Deformable pair plus the bumps that generated it. The target keeps the
/// `round(overlap · n)` deformed points lowest along a random direction.
pub fn gen_deformable_with(n_points: usize, n_rbf: usize, max_disp: f64, overlap: f64, seed: u64) -> Result<(ScenePair, Vec<Rbf>)> {
    if !(max_disp >= 0.0) {
        return Err(Error::Parameter(format!("max_disp {max_disp} must be >= 0")));
    }
    if !(overlap > 0.0 && overlap <= 1.0) {
        return Err(Error::Parameter(format!("overlap {overlap} outside (0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let src = primitive_cloud(n_points, &mut rng)?;
    let bumps: Vec<Rbf> = (0..n_rbf)
        .map(|_| Rbf {
            center: Point::new(
                rng.random_range(-BOX_HALF..BOX_HALF),
                rng.random_range(-BOX_HALF..BOX_HALF),
                rng.random_range(-BOX_HALF..BOX_HALF),
            ),
            width: rng.random_range(0.3..1.0),
            amplitude: unit_vector(&mut rng) * (rng.random::<f64>() * max_disp),
        })
        .collect();
    let flow: Vec<Vector3<f64>> = src.points.iter().map(|p| rbf_flow(&bumps, p)).collect();
    let moved: Vec<Point> = src.points.iter().zip(&flow).map(|(p, f)| p + f).collect();
    let keep = ((overlap * n_points as f64).round() as usize).clamp(1, n_points);
    let u = unit_vector(&mut rng);
    let mut order: Vec<usize> = (0..n_points).collect();
    order.sort_by(|&a, &b| moved[a].dot(&u).total_cmp(&moved[b].dot(&u)).then(a.cmp(&b)));
    let tgt: Vec<Point> = order[..keep].iter().map(|&i| moved[i]).collect();
    let tgt = PointCloud::new(shuffled(tgt, &mut rng));
    let warped = PointCloud::new(moved);
    let gt_pairs = mutual_nn_pairs(&warped, &tgt, SIGMA_DEFORMABLE);
    let overlap = gt_pairs.len() as f64 / n_points.min(tgt.len()) as f64;
    Ok((
        ScenePair {
            name: String::new(),
            src,
            tgt,
            gt_transform: None,
            gt_flow: Some(flow),
            gt_pairs,
            overlap,
            sigma: SIGMA_DEFORMABLE,
        },
        bumps,
    ))
}

/// `count` pairs named `pair_0000`, …, generated in parallel from seeds
/// derived per index, so the result does not depend on thread count.
pub fn synth_dataset(spec: &SynthSpec, count: usize, seed: u64) -> Result<Vec<ScenePair>> {
    spec.validate()?;
    (0..count)
        .into_par_iter()
        .map(|i| {
            let s = derive_seed(seed, i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let ov = if spec.overlap_max > spec.overlap_min {
                rng.random_range(spec.overlap_min..=spec.overlap_max)
            } else {
                spec.overlap_min
            };
            let mut pair = match spec.kind {
                SceneKind::Rigid => gen_rigid_pair(spec.n_points, ov, spec.noise_std, rng.random())?,
                SceneKind::Deformable => gen_deformable_with(spec.n_points, spec.n_rbf, spec.max_disp, ov, rng.random())?.0,
            };
            pair.name = format!("pair_{i:04}");
            Ok(pair)
        })
        .collect()
}
