//! Rotary position encoding driven by 3-D coordinates.
//!
//! Channel pair `i` (channels `2i, 2i+1`) is tied to axis `i mod 3` and
//! per-axis frequency index `j = i / 3`; its angle is
//! `(c_axis / voxel) · base^(−2j/(d/3))`. Rotating queries and keys by these
//! angles makes their inner product depend only on the coordinate
//! difference between the two points.

use ndarray::Array2;
use std::sync::Arc;

use super::DenoiserConfig;
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::tensor::PairRotation;

/// Per-point rotation blocks, shared cheaply between tape nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct RotaryEncoding(pub Arc<PairRotation>);

impl RotaryEncoding {
    pub fn n_points(&self) -> usize {
        self.0.cos.nrows()
    }

    pub fn n_pairs(&self) -> usize {
        self.0.cos.ncols()
    }

    /// Rotate a plain `n × d` array (no tape).
    pub fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = x.clone();
        for i in 0..x.nrows() {
            for p in 0..self.n_pairs() {
                let (c, s) = (self.0.cos[[i, p]], self.0.sin[[i, p]]);
                let (a, b) = (x[[i, 2 * p]], x[[i, 2 * p + 1]]);
                out[[i, 2 * p]] = c * a - s * b;
                out[[i, 2 * p + 1]] = s * a + c * b;
            }
        }
        out
    }
}

pub fn pair_frequencies(cfg: &DenoiserConfig) -> Vec<f64> {
    let third = (cfg.d_model / 3) as f64;
    (0..cfg.d_model / 2)
        .map(|pair| {
            let j = (pair / 3) as f64;
            cfg.rotary_freq_base.powf(-2.0 * j / third) / cfg.rotary_voxel
        })
        .collect()
}

pub fn rotary_encode(p: &PointCloud, cfg: &DenoiserConfig) -> Result<RotaryEncoding> {
    if cfg.d_model == 0 || cfg.d_model % 6 != 0 {
        return Err(Error::Config(format!("d_model {} must be a positive multiple of 6", cfg.d_model)));
    }
    let freqs = pair_frequencies(cfg);
    let pairs = freqs.len();
    let mut cos = Array2::zeros((p.len(), pairs));
    let mut sin = Array2::zeros((p.len(), pairs));
    for (i, pt) in p.points.iter().enumerate() {
        for (k, f) in freqs.iter().enumerate() {
            let angle = pt[k % 3] * f;
            cos[[i, k]] = angle.cos();
            sin[[i, k]] = angle.sin();
        }
    }
    Ok(RotaryEncoding(Arc::new(PairRotation { cos, sin })))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> DenoiserConfig {
        DenoiserConfig {
            d_model: 12,
            ..DenoiserConfig::default()
        }
    }

    #[test]
    fn origin_is_identity() {
        let enc = rotary_encode(&PointCloud::from_rows(&[[0.0, 0.0, 0.0]]), &cfg()).unwrap();
        assert!(enc.0.cos.iter().all(|&c| c == 1.0));
        assert!(enc.0.sin.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn rejects_bad_width() {
        let c = DenoiserConfig {
            d_model: 10,
            ..DenoiserConfig::default()
        };
        assert!(rotary_encode(&PointCloud::from_rows(&[[0.0; 3]]), &c).is_err());
    }

    #[test]
    fn norm_preserving_and_relative() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = cfg();
        for _ in 0..20 {
            let p1 = Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            let p2 = Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            let off = Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
            let v1 = Array2::from_shape_fn((1, 12), |_| rng.random_range(-1.0..1.0));
            let v2 = Array2::from_shape_fn((1, 12), |_| rng.random_range(-1.0..1.0));
            let e1 = rotary_encode(&PointCloud::new(vec![p1]), &c).unwrap();
            let e2 = rotary_encode(&PointCloud::new(vec![p2]), &c).unwrap();
            let r1 = e1.apply(&v1);
            let n0 = v1.iter().map(|x| x * x).sum::<f64>().sqrt();
            let n1 = r1.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n0 - n1).abs() < 1e-9);

            let dot = (&r1 * &e2.apply(&v2)).sum();
            let e1s = rotary_encode(&PointCloud::new(vec![p1 + off]), &c).unwrap();
            let e2s = rotary_encode(&PointCloud::new(vec![p2 + off]), &c).unwrap();
            let dots = (&e1s.apply(&v1) * &e2s.apply(&v2)).sum();
            assert!((dot - dots).abs() < 1e-9);
        }
    }
}
