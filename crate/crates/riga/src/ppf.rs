//! Point pair features and the local/global signature sets built from them.

use crate::error::{Error, Result};
use crate::geom::{NodeSet, PointCloud, SupportRegion};
use nalgebra::Vector3;

/// Norm below which a vector is treated as zero for angle purposes.
const ZERO_NORM: f64 = 1e-12;

/// One rotation-invariant feature of an ordered point pair:
/// `(‖d‖₂, ∠(n′, d), ∠(n, d), ∠(n′, n))` with `d = x − x_ref` and `n′` the
/// reference normal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PpfQuadruple {
    pub dist: f64,
    pub angle_nd1: f64,
    pub angle_nd2: f64,
    pub angle_nn: f64,
}

impl PpfQuadruple {
    pub fn to_array(&self) -> [f64; 4] {
        [self.dist, self.angle_nd1, self.angle_nd2, self.angle_nn]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SignatureKind {
    Local,
    Global,
}

/// The PPF multiset describing one node, either over its support area
/// (local) or over all other nodes (global).
#[derive(Debug, Clone, PartialEq)]
pub struct SignatureSet {
    /// Point index of the owning node in the parent cloud.
    pub owner_node: usize,
    pub quadruples: Vec<PpfQuadruple>,
    pub kind: SignatureKind,
}

/// Angle between two vectors via `atan2(‖v1 × v2‖₂, v1 · v2)`, in [0, π].
/// A (near-)zero vector yields 0 so self-pairs stay finite and invariant.
pub fn angle_between(v1: &Vector3<f64>, v2: &Vector3<f64>) -> f64 {
    if v1.norm() < ZERO_NORM || v2.norm() < ZERO_NORM {
        return 0.0;
    }
    v1.cross(v2).norm().atan2(v1.dot(v2))
}

/// PPF of point `x` with normal `n` relative to reference `x_ref`, `n_ref`.
pub fn ppf(
    x: &Vector3<f64>,
    n: &Vector3<f64>,
    x_ref: &Vector3<f64>,
    n_ref: &Vector3<f64>,
) -> PpfQuadruple {
    let d = x - x_ref;
    PpfQuadruple {
        dist: d.norm(),
        angle_nd1: angle_between(n_ref, &d),
        angle_nd2: angle_between(n, &d),
        angle_nn: angle_between(n_ref, n),
    }
}

fn normals_of(cloud: &PointCloud) -> Result<&[Vector3<f64>]> {
    cloud
        .normals
        .as_deref()
        .ok_or_else(|| Error::InvalidInput("cloud has no normals; estimate them first".into()))
}

/// Local signature of a node: one quadruple per support member, in member
/// order. The node itself, when inside its own support, contributes the
/// all-zero quadruple.
pub fn local_signature(cloud: &PointCloud, node: &SupportRegion) -> Result<SignatureSet> {
    let normals = normals_of(cloud)?;
    let x_ref = &cloud.points[node.node_index];
    let n_ref = &normals[node.node_index];
    let quadruples = node
        .member_indices
        .iter()
        .map(|&u| ppf(&cloud.points[u], &normals[u], x_ref, n_ref))
        .collect();
    Ok(SignatureSet {
        owner_node: node.node_index,
        quadruples,
        kind: SignatureKind::Local,
    })
}

/// Global signature of the node at position `i`: quadruples against every
/// other node, ordered by node position ascending.
pub fn global_signature(cloud: &PointCloud, nodes: &NodeSet, i: usize) -> Result<SignatureSet> {
    let normals = normals_of(cloud)?;
    if nodes.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "global signature needs at least 2 nodes, got {}",
            nodes.len()
        )));
    }
    if i >= nodes.len() {
        return Err(Error::InvalidInput(format!(
            "node position {i} out of range for {} nodes",
            nodes.len()
        )));
    }
    let owner = nodes.indices[i];
    let x_ref = &cloud.points[owner];
    let n_ref = &normals[owner];
    let quadruples = nodes
        .indices
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, &idx)| ppf(&cloud.points[idx], &normals[idx], x_ref, n_ref))
        .collect();
    Ok(SignatureSet {
        owner_node: owner,
        quadruples,
        kind: SignatureKind::Global,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{
        apply_transform, estimate_normals, farthest_point_sampling, support_regions, KdTree,
        NormalOrientation, RigidTransform,
    };
    use nalgebra::Matrix3;
    use rand::prelude::*;
    use rand_chacha::ChaCha20Rng;
    use std::f64::consts::PI;

    fn random_rotation(rng: &mut impl Rng) -> Matrix3<f64> {
        let axis = Vector3::new(
            rng.gen::<f64>() - 0.5,
            rng.gen::<f64>() - 0.5,
            rng.gen::<f64>() - 0.5,
        )
        .normalize();
        let angle = rng.gen::<f64>() * 2.0 * PI;
        nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle)
            .into_inner()
    }

    fn random_unit(rng: &mut impl Rng) -> Vector3<f64> {
        loop {
            let v = Vector3::new(
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
            );
            let n = v.norm();
            if n > 1e-3 {
                return v / n;
            }
        }
    }

    #[test]
    fn angle_basics() {
        let ex = Vector3::new(1.0, 0.0, 0.0);
        let ey = Vector3::new(0.0, 1.0, 0.0);
        assert!((angle_between(&ex, &ey) - PI / 2.0).abs() < 1e-15);
        assert!(angle_between(&ex, &(2.0 * ex)).abs() < 1e-15);
        assert!((angle_between(&ex, &(-ex)) - PI).abs() < 1e-15);
        assert_eq!(angle_between(&Vector3::zeros(), &ey), 0.0);
        assert_eq!(angle_between(&ex, &Vector3::zeros()), 0.0);
    }

    #[test]
    fn angle_range_and_symmetry() {
        let mut rng = ChaCha20Rng::seed_from_u64(41);
        for _ in 0..2000 {
            let a = random_unit(&mut rng) * (0.01 + rng.gen::<f64>() * 10.0);
            let b = random_unit(&mut rng) * (0.01 + rng.gen::<f64>() * 10.0);
            let th = angle_between(&a, &b);
            assert!((0.0..=PI).contains(&th));
            assert!((th - angle_between(&b, &a)).abs() < 1e-12);
            // d-sign flip relation.
            assert!((angle_between(&a, &-b) - (PI - th)).abs() < 1e-9);
        }
    }

    #[test]
    fn ppf_examples() {
        let o = Vector3::zeros();
        let ez = Vector3::new(0.0, 0.0, 1.0);
        let q = ppf(&ez, &ez, &o, &ez);
        assert!((q.dist - 1.0).abs() < 1e-15);
        assert!(q.angle_nd1.abs() < 1e-15);
        assert!(q.angle_nd2.abs() < 1e-15);
        assert!(q.angle_nn.abs() < 1e-15);

        let ex = Vector3::new(1.0, 0.0, 0.0);
        let q = ppf(&ex, &ez, &o, &ez);
        assert!((q.dist - 1.0).abs() < 1e-15);
        assert!((q.angle_nd1 - PI / 2.0).abs() < 1e-15);
        assert!((q.angle_nd2 - PI / 2.0).abs() < 1e-15);
        assert!(q.angle_nn.abs() < 1e-15);

        // Self pair collapses to zeros.
        let q = ppf(&o, &ex, &o, &ez);
        assert_eq!(q.dist, 0.0);
        assert_eq!(q.angle_nd1, 0.0);
        assert_eq!(q.angle_nd2, 0.0);
        assert!((q.angle_nn - PI / 2.0).abs() < 1e-15);
    }

    #[test]
    fn ppf_rigid_invariance_hundred_transforms() {
        let mut rng = ChaCha20Rng::seed_from_u64(42);
        for _ in 0..100 {
            let x = Vector3::new(rng.gen(), rng.gen(), rng.gen());
            let x_ref = Vector3::new(rng.gen(), rng.gen(), rng.gen());
            let n = random_unit(&mut rng);
            let n_ref = random_unit(&mut rng);
            let t = RigidTransform::new(
                random_rotation(&mut rng),
                Vector3::new(rng.gen(), rng.gen(), rng.gen()) * 5.0,
            )
            .unwrap();
            let a = ppf(&x, &n, &x_ref, &n_ref);
            let b = ppf(
                &t.apply_point(&x),
                &t.apply_vector(&n),
                &t.apply_point(&x_ref),
                &t.apply_vector(&n_ref),
            );
            for (u, v) in a.to_array().iter().zip(b.to_array().iter()) {
                assert!((u - v).abs() < 1e-9, "component drift {u} vs {v}");
            }
        }
    }

    fn sample_sphere_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let pts = (0..n)
            .map(|_| {
                let u = random_unit(&mut rng);
                u * (1.0 + 0.05 * rng.gen::<f64>())
            })
            .collect();
        let mut cloud = PointCloud::new(pts);
        cloud.viewpoint = Some(Vector3::new(0.0, 0.0, 4.0));
        estimate_normals(&cloud, 8, NormalOrientation::AwayFromCentroid).unwrap()
    }

    #[test]
    fn signatures_have_contracted_sizes() {
        let cloud = sample_sphere_cloud(300, 50);
        let tree = KdTree::build(&cloud.points);
        let nodes = farthest_point_sampling(&cloud, 24, 0).unwrap();
        let regions = support_regions(&cloud, &tree, &nodes, 0.6, 32).unwrap();
        for region in &regions {
            let sig = local_signature(&cloud, region).unwrap();
            assert_eq!(sig.quadruples.len(), region.member_indices.len());
            assert!(sig.quadruples.len() <= 32);
            assert_eq!(sig.kind, SignatureKind::Local);
            // Node inside its own support contributes the zero quadruple.
            if let Some(pos) = region
                .member_indices
                .iter()
                .position(|&m| m == region.node_index)
            {
                let q = sig.quadruples[pos];
                assert_eq!(q.to_array(), [0.0, 0.0, 0.0, 0.0]);
            }
        }
        for i in 0..nodes.len() {
            let sig = global_signature(&cloud, &nodes, i).unwrap();
            assert_eq!(sig.quadruples.len(), nodes.len() - 1);
            assert_eq!(sig.kind, SignatureKind::Global);
        }
    }

    #[test]
    fn global_signature_two_nodes_example() {
        let mut cloud = PointCloud::new(vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
        ]);
        cloud.normals = Some(vec![Vector3::new(1.0, 0.0, 0.0), Vector3::new(1.0, 0.0, 0.0)]);
        let nodes = NodeSet {
            indices: vec![0, 1],
            clamped: false,
        };
        let sig = global_signature(&cloud, &nodes, 0).unwrap();
        assert_eq!(sig.quadruples.len(), 1);
        let q = sig.quadruples[0];
        assert!((q.dist - 1.0).abs() < 1e-15);
        assert!(q.angle_nd1.abs() < 1e-15);
        assert!(q.angle_nd2.abs() < 1e-15);
        assert!(q.angle_nn.abs() < 1e-15);
    }

    #[test]
    fn signature_errors() {
        let cloud = PointCloud::new(vec![Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0)]);
        let region = SupportRegion {
            node_index: 0,
            member_indices: vec![0, 1],
        };
        assert!(local_signature(&cloud, &region).is_err());
        let nodes = NodeSet {
            indices: vec![0],
            clamped: false,
        };
        let mut with_n = cloud.clone();
        with_n.normals = Some(vec![Vector3::z(), Vector3::z()]);
        assert!(global_signature(&with_n, &nodes, 0).is_err());
        let nodes2 = NodeSet {
            indices: vec![0, 1],
            clamped: false,
        };
        assert!(global_signature(&with_n, &nodes2, 2).is_err());
    }

    #[test]
    fn signatures_rotation_invariant() {
        let cloud = sample_sphere_cloud(250, 60);
        let tree = KdTree::build(&cloud.points);
        let nodes = farthest_point_sampling(&cloud, 16, 0).unwrap();
        let regions = support_regions(&cloud, &tree, &nodes, 0.7, 24).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(61);
        for _ in 0..20 {
            let t = RigidTransform::new(
                random_rotation(&mut rng),
                Vector3::new(rng.gen(), rng.gen(), rng.gen()),
            )
            .unwrap();
            let moved = apply_transform(&cloud, &t);
            for (i, region) in regions.iter().enumerate() {
                let a = local_signature(&cloud, region).unwrap();
                let b = local_signature(&moved, region).unwrap();
                for (qa, qb) in a.quadruples.iter().zip(&b.quadruples) {
                    for (u, v) in qa.to_array().iter().zip(qb.to_array().iter()) {
                        assert!((u - v).abs() < 1e-9);
                    }
                }
                let ga = global_signature(&cloud, &nodes, i).unwrap();
                let gb = global_signature(&moved, &nodes, i).unwrap();
                for (qa, qb) in ga.quadruples.iter().zip(&gb.quadruples) {
                    for (u, v) in qa.to_array().iter().zip(qb.to_array().iter()) {
                        assert!((u - v).abs() < 1e-9);
                    }
                }
            }
        }
    }
}
