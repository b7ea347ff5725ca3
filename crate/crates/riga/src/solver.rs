//! Rigid alignment from correspondences: closed-form weighted Procrustes
//! and a seeded RANSAC wrapper.

use crate::error::{BestAttempt, Error, Result};
use crate::geom::{PointCloud, RigidTransform};
use crate::matcher::CorrespondenceSet;
use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacConfig {
    pub iterations: usize,
    pub inlier_threshold: f64,
    pub sample_size: usize,
    pub seed: u64,
    /// Refit the winning hypothesis with unit weights instead of
    /// correspondence confidences.
    pub unit_refit: bool,
}

impl Default for RansacConfig {
    fn default() -> Self {
        RansacConfig {
            iterations: 5000,
            inlier_threshold: 0.05,
            sample_size: 3,
            seed: 0,
            unit_refit: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RegistrationResult {
    pub transform: RigidTransform,
    pub inlier_indices: Vec<usize>,
    pub inlier_count: usize,
}

/// Least-squares rigid motion minimizing Σ w‖R·x + t − y‖². Needs at least
/// 3 pairs with positive weight spanning more than a line.
pub fn weighted_procrustes(pairs: &[(Vector3<f64>, Vector3<f64>, f64)]) -> Result<RigidTransform> {
    let mut total_w = 0.0;
    let mut effective = 0usize;
    for (i, &(x, y, w)) in pairs.iter().enumerate() {
        if !w.is_finite() || w < 0.0 {
            return Err(Error::InvalidInput(format!("pair {i} has invalid weight {w}")));
        }
        if !(x.iter().all(|v| v.is_finite()) && y.iter().all(|v| v.is_finite())) {
            return Err(Error::InvalidInput(format!("pair {i} has non-finite coordinates")));
        }
        if w > 0.0 {
            effective += 1;
            total_w += w;
        }
    }
    if effective < 3 {
        return Err(Error::DegenerateGeometry(format!(
            "{effective} pairs with positive weight, need 3"
        )));
    }
    let mut cx = Vector3::zeros();
    let mut cy = Vector3::zeros();
    for &(x, y, w) in pairs {
        cx += w * x;
        cy += w * y;
    }
    cx /= total_w;
    cy /= total_w;
    let mut h = Matrix3::zeros();
    for &(x, y, w) in pairs {
        h += w * (x - cx) * (y - cy).transpose();
    }
    let svd = h.svd(true, true);
    let sv = svd.singular_values;
    if sv[1] <= sv[0] * 1e-9 {
        return Err(Error::DegenerateGeometry(
            "correspondences are collinear or coincident".into(),
        ));
    }
    let u = svd.u.expect("svd with compute_u");
    let v = svd.v_t.expect("svd with compute_v").transpose();
    let mut d = Matrix3::identity();
    d[(2, 2)] = (v * u.transpose()).determinant().signum();
    let r = v * d * u.transpose();
    let t = cy - r * cx;
    RigidTransform::new(r, t)
}

fn residual(t: &RigidTransform, x: &Vector3<f64>, y: &Vector3<f64>) -> f64 {
    (t.apply_point(x) - y).norm()
}

/// Hypothesize-and-verify registration over putative correspondences.
/// Deterministic in `cfg.seed`; the best hypothesis is refit on its
/// inliers weighted by correspondence confidence.
pub fn ransac_register(
    corr: &CorrespondenceSet,
    cloud_x: &PointCloud,
    cloud_y: &PointCloud,
    cfg: &RansacConfig,
) -> Result<RegistrationResult> {
    if cfg.iterations == 0 {
        return Err(Error::InvalidInput("ransac iterations must be >= 1".into()));
    }
    if cfg.sample_size < 3 {
        return Err(Error::InvalidInput("ransac sample_size must be >= 3".into()));
    }
    if !(cfg.inlier_threshold.is_finite() && cfg.inlier_threshold > 0.0) {
        return Err(Error::InvalidInput("ransac inlier_threshold must be positive".into()));
    }
    let n = corr.pairs.len();
    if n < cfg.sample_size {
        return Err(Error::InsufficientCorrespondences { needed: cfg.sample_size, got: n });
    }
    for &(i, j, c) in &corr.pairs {
        if i >= cloud_x.len() || j >= cloud_y.len() {
            return Err(Error::InvalidInput(format!(
                "correspondence ({i}, {j}) out of cloud range"
            )));
        }
        if !c.is_finite() || c < 0.0 {
            return Err(Error::InvalidInput(format!(
                "correspondence ({i}, {j}) has invalid confidence {c}"
            )));
        }
    }
    let points: Vec<(Vector3<f64>, Vector3<f64>)> = corr
        .pairs
        .iter()
        .map(|&(i, j, _)| (cloud_x.points[i], cloud_y.points[j]))
        .collect();

    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(usize, RigidTransform)> = None;
    for _ in 0..cfg.iterations {
        let sample = rand::seq::index::sample(&mut rng, n, cfg.sample_size);
        let minimal: Vec<_> = sample.iter().map(|k| (points[k].0, points[k].1, 1.0)).collect();
        let hyp = match weighted_procrustes(&minimal) {
            Ok(t) => t,
            Err(_) => continue,
        };
        let count = points
            .iter()
            .filter(|(x, y)| residual(&hyp, x, y) < cfg.inlier_threshold)
            .count();
        // Strictly-better keeps the earliest best iteration.
        if best.as_ref().map_or(true, |(c, _)| count > *c) {
            best = Some((count, hyp));
        }
    }
    let (best_count, best_t) = best.unwrap_or((0, RigidTransform::identity()));
    if best_count < 3 {
        return Err(Error::RegistrationFailed {
            min_inliers: 3,
            best: Box::new(BestAttempt {
                rotation: best_t.rotation.into(),
                translation: best_t.translation.into(),
                inlier_count: best_count,
            }),
        });
    }
    let inlier_indices: Vec<usize> = (0..n)
        .filter(|&k| residual(&best_t, &points[k].0, &points[k].1) < cfg.inlier_threshold)
        .collect();
    let refit_pairs: Vec<_> = inlier_indices
        .iter()
        .map(|&k| {
            let w = if cfg.unit_refit { 1.0 } else { corr.pairs[k].2 };
            (points[k].0, points[k].1, w)
        })
        .collect();
    let transform = weighted_procrustes(&refit_pairs).unwrap_or(best_t);
    Ok(RegistrationResult {
        inlier_count: inlier_indices.len(),
        inlier_indices,
        transform,
    })
}
