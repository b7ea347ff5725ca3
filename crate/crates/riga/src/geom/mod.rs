//! Point clouds, rigid motions, sampling and neighborhood structure.

mod kdtree;

pub use kdtree::KdTree;

use crate::error::{Error, Result};
use nalgebra::{Matrix3, SymmetricEigen, Vector3};

/// A 3D point cloud with optional per-point unit normals and an optional
/// sensor viewpoint used for normal orientation.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    pub normals: Option<Vec<Vector3<f64>>>,
    pub viewpoint: Option<Vector3<f64>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>) -> Self {
        PointCloud {
            points,
            normals: None,
            viewpoint: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Vector3<f64> {
        let mut c = Vector3::zeros();
        for p in &self.points {
            c += p;
        }
        if !self.points.is_empty() {
            c /= self.points.len() as f64;
        }
        c
    }

    /// Fails unless every coordinate (and normal, if present) is finite and
    /// normal count matches point count.
    pub fn validate(&self) -> Result<()> {
        for (i, p) in self.points.iter().enumerate() {
            if !p.iter().all(|v| v.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "point {i} has non-finite coordinates"
                )));
            }
        }
        if let Some(normals) = &self.normals {
            if normals.len() != self.points.len() {
                return Err(Error::InvalidInput(format!(
                    "normal count {} does not match point count {}",
                    normals.len(),
                    self.points.len()
                )));
            }
            for (i, n) in normals.iter().enumerate() {
                if !n.iter().all(|v| v.is_finite()) {
                    return Err(Error::InvalidInput(format!(
                        "normal {i} has non-finite coordinates"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// A proper rigid motion: `x ↦ R·x + t` with `R ∈ SO(3)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    /// Validates orthonormality and positive determinant to 1e-9.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).norm();
        if ortho > 1e-9 {
            return Err(Error::InvalidInput(format!(
                "rotation is not orthonormal (deviation {ortho:.3e})"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!(
                "rotation determinant {det} is not +1"
            )));
        }
        Ok(RigidTransform {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Directions (normals) rotate without translating.
    pub fn apply_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// `(self ∘ other)(x) = self(other(x))`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Row-major 4x4 homogeneous matrix.
    pub fn to_matrix4(&self) -> [[f64; 4]; 4] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            [r[(0, 0)], r[(0, 1)], r[(0, 2)], t[0]],
            [r[(1, 0)], r[(1, 1)], r[(1, 2)], t[1]],
            [r[(2, 0)], r[(2, 1)], r[(2, 2)], t[2]],
            [0.0, 0.0, 0.0, 1.0],
        ]
    }

    pub fn from_matrix4(m: &[[f64; 4]; 4]) -> Result<Self> {
        let bottom = [m[3][0], m[3][1], m[3][2], m[3][3]];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::InvalidInput(format!(
                "last row of homogeneous transform must be [0 0 0 1], got {bottom:?}"
            )));
        }
        let rotation = Matrix3::new(
            m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2],
        );
        let translation = Vector3::new(m[0][3], m[1][3], m[2][3]);
        RigidTransform::new(rotation, translation)
    }
}

/// Transforms points and normals; viewpoint moves with the cloud.
pub fn apply_transform(cloud: &PointCloud, transform: &RigidTransform) -> PointCloud {
    PointCloud {
        points: cloud.points.iter().map(|p| transform.apply_point(p)).collect(),
        normals: cloud
            .normals
            .as_ref()
            .map(|ns| ns.iter().map(|n| transform.apply_vector(n)).collect()),
        viewpoint: cloud.viewpoint.as_ref().map(|v| transform.apply_point(v)),
    }
}

/// Node indices chosen by farthest point sampling, in selection order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeSet {
    pub indices: Vec<usize>,
    /// True when the requested node count exceeded the cloud size and the
    /// result was clamped.
    pub clamped: bool,
}

impl NodeSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Points supporting one node's local descriptor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SupportRegion {
    /// Index of the node point in the parent cloud.
    pub node_index: usize,
    /// Indices of support points, nearest first, index tie-break.
    pub member_indices: Vec<usize>,
}

/// Side of the surface normals should face.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormalOrientation {
    /// Flip each normal toward the cloud viewpoint; falls back to
    /// `AwayFromCentroid` when the cloud has no viewpoint.
    TowardViewpoint,
    /// Flip each normal away from the cloud centroid.
    AwayFromCentroid,
}

/// PCA normals over each point's `k`-neighborhood (the point plus its `k`
/// nearest neighbors). The normal is the unit eigenvector of the
/// neighborhood covariance with the smallest eigenvalue, oriented per
/// `orientation`; a zero reference dot product keeps the eigenvector sign.
pub fn estimate_normals(
    cloud: &PointCloud,
    k: usize,
    orientation: NormalOrientation,
) -> Result<PointCloud> {
    cloud.validate()?;
    if k < 2 {
        return Err(Error::InvalidInput(format!(
            "normal estimation needs k >= 2, got {k}"
        )));
    }
    if cloud.len() < k + 1 {
        return Err(Error::InvalidInput(format!(
            "normal estimation with k = {k} needs at least {} points, got {}",
            k + 1,
            cloud.len()
        )));
    }
    let tree = KdTree::build(&cloud.points);
    let centroid = cloud.centroid();
    let mut normals = Vec::with_capacity(cloud.len());
    for (i, p) in cloud.points.iter().enumerate() {
        let neighbors = tree.nearest_k(p, k + 1);
        let mut mean = Vector3::zeros();
        for &(_, j) in &neighbors {
            mean += cloud.points[j];
        }
        mean /= neighbors.len() as f64;
        let mut cov = Matrix3::zeros();
        for &(_, j) in &neighbors {
            let d = cloud.points[j] - mean;
            cov += d * d.transpose();
        }
        let eig = SymmetricEigen::new(cov);
        let (mut min_idx, mut max_val) = (0usize, f64::NEG_INFINITY);
        let mut min_val = f64::INFINITY;
        for a in 0..3 {
            let v = eig.eigenvalues[a];
            if v < min_val {
                min_val = v;
                min_idx = a;
            }
            max_val = max_val.max(v);
        }
        if max_val <= 1e-24 {
            return Err(Error::DegenerateGeometry(format!(
                "neighborhood of point {i} is a single coincident location; normals are undefined"
            )));
        }
        let mut n: Vector3<f64> = eig.eigenvectors.column(min_idx).into();
        n /= n.norm();
        let reference = match orientation {
            NormalOrientation::TowardViewpoint => match &cloud.viewpoint {
                Some(vp) => vp - p,
                None => p - centroid,
            },
            NormalOrientation::AwayFromCentroid => p - centroid,
        };
        if n.dot(&reference) < 0.0 {
            n = -n;
        }
        normals.push(n);
    }
    Ok(PointCloud {
        points: cloud.points.clone(),
        normals: Some(normals),
        viewpoint: cloud.viewpoint,
    })
}

/// Greedy farthest point sampling from `start_index`. Each round picks the
/// point maximizing the distance to the already chosen set, smallest index
/// on ties. Requesting more nodes than points clamps and flags the result.
pub fn farthest_point_sampling(
    cloud: &PointCloud,
    node_count: usize,
    start_index: usize,
) -> Result<NodeSet> {
    if cloud.is_empty() {
        return Err(Error::InvalidInput(
            "cannot sample nodes from an empty cloud".into(),
        ));
    }
    if node_count == 0 {
        return Err(Error::InvalidInput("node_count must be at least 1".into()));
    }
    if start_index >= cloud.len() {
        return Err(Error::InvalidInput(format!(
            "start_index {} out of range for {} points",
            start_index,
            cloud.len()
        )));
    }
    let clamped = node_count > cloud.len();
    let n = node_count.min(cloud.len());
    let mut indices = Vec::with_capacity(n);
    let mut min_d2 = vec![f64::INFINITY; cloud.len()];
    let mut current = start_index;
    indices.push(current);
    for _ in 1..n {
        let cp = cloud.points[current];
        let mut best = (f64::NEG_INFINITY, 0usize);
        for (i, p) in cloud.points.iter().enumerate() {
            let d2 = (p - cp).norm_squared();
            if d2 < min_d2[i] {
                min_d2[i] = d2;
            }
            // Strict > keeps the smallest index among equals.
            if min_d2[i] > best.0 {
                best = (min_d2[i], i);
            }
        }
        current = best.1;
        indices.push(current);
    }
    Ok(NodeSet { indices, clamped })
}

/// Indices of points with distance strictly below `radius` from `center`,
/// nearest first with index tie-break, truncated to `max_count`.
pub fn radius_neighbors(
    cloud: &PointCloud,
    tree: &KdTree,
    center: &Vector3<f64>,
    radius: f64,
    max_count: usize,
) -> Result<Vec<usize>> {
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(Error::InvalidInput(format!(
            "radius must be positive and finite, got {radius}"
        )));
    }
    let _ = cloud;
    let mut hits = tree.within_radius(center, radius * radius);
    hits.truncate(max_count);
    Ok(hits.into_iter().map(|(_, i)| i).collect())
}

/// Support region of every node: points strictly within `radius` of the node
/// point, capped at `max_support`.
pub fn support_regions(
    cloud: &PointCloud,
    tree: &KdTree,
    nodes: &NodeSet,
    radius: f64,
    max_support: usize,
) -> Result<Vec<SupportRegion>> {
    nodes
        .indices
        .iter()
        .map(|&node_index| {
            let member_indices = radius_neighbors(
                cloud,
                tree,
                &cloud.points[node_index],
                radius,
                max_support,
            )?;
            Ok(SupportRegion {
                node_index,
                member_indices,
            })
        })
        .collect()
}

/// Partition of all points by nearest node. `result[v]` lists the point
/// indices assigned to node position `v` (ascending). Distance ties resolve
/// to the smallest node position in the NodeSet ordering.
pub fn point_to_node_assign(cloud: &PointCloud, nodes: &NodeSet) -> Result<Vec<Vec<usize>>> {
    if nodes.is_empty() {
        return Err(Error::InvalidInput(
            "point-to-node assignment needs at least one node".into(),
        ));
    }
    let node_pts: Vec<Vector3<f64>> = nodes.indices.iter().map(|&i| cloud.points[i]).collect();
    let mut groups = vec![Vec::new(); nodes.len()];
    for (i, p) in cloud.points.iter().enumerate() {
        let mut best = (f64::INFINITY, 0usize);
        for (v, np) in node_pts.iter().enumerate() {
            let d2 = (p - np).norm_squared();
            if d2 < best.0 {
                best = (d2, v);
            }
        }
        groups[best.1].push(i);
    }
    Ok(groups)
}
