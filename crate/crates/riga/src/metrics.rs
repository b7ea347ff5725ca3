//! Evaluation metrics over estimated transforms and correspondence sets.

use crate::error::{Error, Result};
use crate::geom::{PointCloud, RigidTransform};
use crate::matcher::CorrespondenceSet;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricThresholds {
    /// Inlier distance for IR.
    pub tau1: f64,
    /// IR cutoff for FMR.
    pub tau2: f64,
    /// RMSE cutoff for RR.
    pub tau3: f64,
}

impl Default for MetricThresholds {
    fn default() -> Self {
        MetricThresholds { tau1: 0.10, tau2: 0.05, tau3: 0.20 }
    }
}

/// Relative rotation error in degrees, arccos of the clamped trace
/// identity. Symmetric in its arguments.
pub fn rre(t_est: &RigidTransform, t_gt: &RigidTransform) -> f64 {
    let c = ((t_est.rotation.transpose() * t_gt.rotation).trace() - 1.0) / 2.0;
    c.clamp(-1.0, 1.0).acos().to_degrees()
}

/// Relative translation error (Euclidean).
pub fn rte(t_est: &RigidTransform, t_gt: &RigidTransform) -> f64 {
    (t_est.translation - t_gt.translation).norm()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Rmse1Mode {
    /// The published formula verbatim: divide the root by |𝒳|, not the
    /// sum by |𝒳| inside the root.
    #[default]
    AsPrinted,
    /// Conventional root-mean-square.
    Conventional,
}

/// Alignment error of one cloud under estimated vs ground-truth motion.
pub fn rmse1(
    cloud: &PointCloud,
    t_est: &RigidTransform,
    t_gt: &RigidTransform,
    mode: Rmse1Mode,
) -> Result<f64> {
    if cloud.is_empty() {
        return Err(Error::InvalidInput("rmse1 needs a nonempty cloud".into()));
    }
    let sum: f64 = cloud
        .points
        .iter()
        .map(|p| (t_gt.apply_point(p) - t_est.apply_point(p)).norm_squared())
        .sum();
    let n = cloud.len() as f64;
    Ok(match mode {
        Rmse1Mode::AsPrinted => sum.sqrt() / n,
        Rmse1Mode::Conventional => (sum / n).sqrt(),
    })
}

/// Root-mean-square residual of ground-truth correspondences under the
/// estimated transform.
pub fn rmse2(
    corr: &CorrespondenceSet,
    cloud_x: &PointCloud,
    cloud_y: &PointCloud,
    t_est: &RigidTransform,
) -> Result<f64> {
    if corr.pairs.is_empty() {
        return Err(Error::InvalidInput("rmse2 needs correspondences".into()));
    }
    let mut sum = 0.0;
    for &(i, j, _) in &corr.pairs {
        if i >= cloud_x.len() || j >= cloud_y.len() {
            return Err(Error::InvalidInput(format!(
                "correspondence ({i}, {j}) out of cloud range"
            )));
        }
        sum += (t_est.apply_point(&cloud_x.points[i]) - cloud_y.points[j]).norm_squared();
    }
    Ok((sum / corr.pairs.len() as f64).sqrt())
}

/// Fraction of putative correspondences within tau1 of their partner
/// under the ground-truth transform.
pub fn inlier_ratio(
    corr: &CorrespondenceSet,
    cloud_x: &PointCloud,
    cloud_y: &PointCloud,
    t_gt: &RigidTransform,
    tau1: f64,
) -> Result<f64> {
    if corr.pairs.is_empty() {
        return Err(Error::InvalidInput("inlier_ratio needs correspondences".into()));
    }
    if !(tau1 > 0.0) {
        return Err(Error::InvalidInput("tau1 must be positive".into()));
    }
    let mut inliers = 0usize;
    for &(i, j, _) in &corr.pairs {
        if i >= cloud_x.len() || j >= cloud_y.len() {
            return Err(Error::InvalidInput(format!(
                "correspondence ({i}, {j}) out of cloud range"
            )));
        }
        if (t_gt.apply_point(&cloud_x.points[i]) - cloud_y.points[j]).norm() < tau1 {
            inliers += 1;
        }
    }
    Ok(inliers as f64 / corr.pairs.len() as f64)
}

/// Fraction of pairs whose inlier ratio exceeds tau2.
pub fn fmr(per_pair_ir: &[f64], tau2: f64) -> Result<f64> {
    if per_pair_ir.is_empty() {
        return Err(Error::InvalidInput("fmr needs at least one pair".into()));
    }
    Ok(per_pair_ir.iter().filter(|&&ir| ir > tau2).count() as f64 / per_pair_ir.len() as f64)
}

/// Fraction of pairs registered with RMSE below tau3.
pub fn rr(per_pair_rmse: &[f64], tau3: f64) -> Result<f64> {
    if per_pair_rmse.is_empty() {
        return Err(Error::InvalidInput("rr needs at least one pair".into()));
    }
    Ok(per_pair_rmse.iter().filter(|&&e| e < tau3).count() as f64 / per_pair_rmse.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcher::Level;
    use nalgebra::{Matrix3, Vector3};
    use rand::prelude::*;
    use rand_chacha::ChaCha20Rng;

    fn random_rigid(rng: &mut impl Rng) -> RigidTransform {
        let axis = nalgebra::Unit::new_normalize(Vector3::new(
            rng.gen::<f64>() - 0.5,
            rng.gen::<f64>() - 0.5,
            rng.gen::<f64>() - 0.5,
        ));
        let angle = rng.gen::<f64>() * 3.0 + 0.05;
        let r = nalgebra::Rotation3::from_axis_angle(&axis, angle);
        let t = Vector3::new(rng.gen(), rng.gen(), rng.gen());
        RigidTransform::new(r.into_inner(), t).unwrap()
    }

    fn quat_angle_deg(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
        let qa = nalgebra::UnitQuaternion::from_rotation_matrix(
            &nalgebra::Rotation3::from_matrix_unchecked(*a),
        );
        let qb = nalgebra::UnitQuaternion::from_rotation_matrix(
            &nalgebra::Rotation3::from_matrix_unchecked(*b),
        );
        let d = (qa.inverse() * qb).into_inner();
        (2.0 * d.imag().norm().atan2(d.scalar().abs())).to_degrees()
    }

    #[test]
    fn rre_rte_basics() {
        let id = RigidTransform::identity();
        assert_eq!(rre(&id, &id), 0.0);
        assert_eq!(rte(&id, &id), 0.0);

        let rz = nalgebra::Rotation3::from_axis_angle(&Vector3::z_axis(), 10.0f64.to_radians());
        let t = RigidTransform::new(rz.into_inner(), Vector3::zeros()).unwrap();
        assert!((rre(&t, &id) - 10.0).abs() < 1e-9);
        assert!((rre(&id, &t) - 10.0).abs() < 1e-9);

        let a = RigidTransform::new(Matrix3::identity(), Vector3::new(1.0, 2.0, 2.0)).unwrap();
        assert!((rte(&a, &id) - 3.0).abs() < 1e-12);
        assert_eq!(rte(&a, &id), rte(&id, &a));
    }

    #[test]
    fn rre_matches_quaternion_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        for _ in 0..200 {
            let a = random_rigid(&mut rng);
            let b = random_rigid(&mut rng);
            let got = rre(&a, &b);
            let want = quat_angle_deg(&a.rotation, &b.rotation);
            assert!((got - want).abs() < 1e-9, "got {got} want {want}");
            assert!((0.0..=180.0).contains(&got));
            assert_eq!(got, rre(&b, &a));
        }
    }

    #[test]
    fn rmse1_printed_vs_conventional() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let cloud = PointCloud::new(
            (0..4)
                .map(|_| Vector3::new(rng.gen(), rng.gen(), rng.gen()))
                .collect(),
        );
        let id = RigidTransform::identity();
        assert_eq!(rmse1(&cloud, &id, &id, Rmse1Mode::AsPrinted).unwrap(), 0.0);

        let shift =
            RigidTransform::new(Matrix3::identity(), Vector3::new(0.2, 0.0, 0.0)).unwrap();
        // Every residual is exactly 0.2.
        let single = PointCloud::new(vec![Vector3::new(1.0, 2.0, 3.0)]);
        assert!((rmse1(&single, &shift, &id, Rmse1Mode::AsPrinted).unwrap() - 0.2).abs() < 1e-12);
        let printed = rmse1(&cloud, &shift, &id, Rmse1Mode::AsPrinted).unwrap();
        assert!((printed - 0.1).abs() < 1e-12);
        let conventional = rmse1(&cloud, &shift, &id, Rmse1Mode::Conventional).unwrap();
        assert!((conventional - 0.2).abs() < 1e-12);

        let empty = PointCloud::new(vec![]);
        assert!(rmse1(&empty, &id, &id, Rmse1Mode::AsPrinted).is_err());
    }

    #[test]
    fn rmse2_hand_example_and_oracle() {
        let id = RigidTransform::identity();
        let cx = PointCloud::new(vec![Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0)]);
        let cy = PointCloud::new(vec![Vector3::zeros(), Vector3::new(1.2, 0.0, 0.0)]);
        let corr = CorrespondenceSet {
            pairs: vec![(0, 0, 1.0), (1, 1, 1.0)],
            level: Level::Fine,
        };
        let got = rmse2(&corr, &cx, &cy, &id).unwrap();
        assert!((got - 0.02f64.sqrt()).abs() < 1e-12);

        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let gt = random_rigid(&mut rng);
        let xs: Vec<Vector3<f64>> =
            (0..50).map(|_| Vector3::new(rng.gen(), rng.gen(), rng.gen())).collect();
        let ys: Vec<Vector3<f64>> = xs.iter().map(|x| gt.apply_point(x)).collect();
        let corr = CorrespondenceSet {
            pairs: (0..50).map(|k| (k, k, 1.0)).collect(),
            level: Level::Fine,
        };
        let cx = PointCloud::new(xs.clone());
        let cy = PointCloud::new(ys.clone());
        assert!(rmse2(&corr, &cx, &cy, &gt).unwrap() < 1e-12);
        let est = random_rigid(&mut rng);
        let want = (xs
            .iter()
            .zip(&ys)
            .map(|(x, y)| (est.apply_point(x) - y).norm_squared())
            .sum::<f64>()
            / 50.0)
            .sqrt();
        assert!((rmse2(&corr, &cx, &cy, &est).unwrap() - want).abs() < 1e-12);

        let none = CorrespondenceSet { pairs: vec![], level: Level::Fine };
        assert!(rmse2(&none, &cx, &cy, &est).is_err());
    }

    #[test]
    fn ir_fmr_rr_thresholds() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let gt = random_rigid(&mut rng);
        let xs: Vec<Vector3<f64>> =
            (0..40).map(|_| Vector3::new(rng.gen(), rng.gen(), rng.gen())).collect();
        let ys: Vec<Vector3<f64>> = xs.iter().map(|x| gt.apply_point(x)).collect();
        let corr = CorrespondenceSet {
            pairs: (0..40).map(|k| (k, k, 1.0)).collect(),
            level: Level::Fine,
        };
        let cx = PointCloud::new(xs);
        let cy = PointCloud::new(ys);
        assert_eq!(inlier_ratio(&corr, &cx, &cy, &gt, 0.10).unwrap(), 1.0);

        // Push half the targets out beyond tau1.
        let mut far = cy.clone();
        for p in far.points.iter_mut().take(20) {
            p.x += 1.0;
        }
        let ir = inlier_ratio(&corr, &cx, &far, &gt, 0.10).unwrap();
        assert_eq!(ir, 0.5);

        assert_eq!(fmr(&[0.04, 0.06], 0.05).unwrap(), 0.5);
        assert_eq!(rr(&[0.1, 0.3], 0.2).unwrap(), 0.5);
        assert!(fmr(&[], 0.05).is_err());
        assert!(rr(&[], 0.2).is_err());

        // FMR is nonincreasing in the cutoff.
        let irs: Vec<f64> = (0..50).map(|_| rng.gen::<f64>()).collect();
        let mut last = 1.0;
        for step in 0..=20 {
            let tau = step as f64 * 0.05;
            let f = fmr(&irs, tau).unwrap();
            assert!(f <= last + 1e-12);
            assert!((0.0..=1.0).contains(&f));
            last = f;
        }
    }
}
