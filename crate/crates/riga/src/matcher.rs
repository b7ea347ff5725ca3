//! Coarse-to-fine correspondence extraction: dense descriptor
//! interpolation, node matching, vicinity grouping, slack-augmented
//! optimal transport, and per-group fine matches.

use crate::diffcore::{ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geom::{KdTree, NodeSet, PointCloud};

/// Finite stand-in for 1/0 similarity so ranking stays total.
pub const SIMILARITY_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InterpolationConfig {
    /// Nodes blended per point.
    pub k: usize,
    /// Distance below which a point counts as coincident with a node.
    pub epsilon: f64,
}

impl Default for InterpolationConfig {
    fn default() -> Self {
        InterpolationConfig { k: 3, epsilon: 1e-9 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    Coarse,
    Fine,
}

#[derive(Debug, Clone)]
pub struct CorrespondenceSet {
    /// (index on the 𝒳 side, index on the 𝒴 side, confidence).
    pub pairs: Vec<(usize, usize, f64)>,
    pub level: Level,
}

/// Slack-augmented confidence matrix, (n+1) x (m+1) with the last row and
/// column covering unmatched mass.
#[derive(Debug, Clone)]
pub struct ConfidenceMatrix {
    pub values: Tensor,
    pub alpha: f64,
}

/// One coarse node pair with both truncated vicinities and the projected
/// descriptors of their members (row r of `descs_*` belongs to
/// `members_*[r]`).
#[derive(Debug, Clone)]
pub struct VicinityGroup {
    pub node_x: usize,
    pub node_y: usize,
    pub members_x: Vec<usize>,
    pub members_y: Vec<usize>,
    pub descs_x: Tensor,
    pub descs_y: Tensor,
}

/// Everything grouping needs from one side of the pair.
pub struct MatchSide<'a> {
    pub cloud: &'a PointCloud,
    pub nodes: &'a NodeSet,
    /// Output of `point_to_node_assign`: member point indices per node.
    pub assignment: &'a [Vec<usize>],
    /// Dense per-point projected descriptors, one row per point.
    pub point_descs: &'a Tensor,
}

/// Per-point blending weights over the k nearest nodes, one row per point,
/// one column per node. Rows are nonnegative and sum to 1; a point within
/// `epsilon` of a node takes that node's descriptor exactly.
pub fn interpolation_weights(
    cloud: &PointCloud,
    nodes: &NodeSet,
    cfg: &InterpolationConfig,
) -> Result<Tensor> {
    if cfg.k == 0 {
        return Err(Error::InvalidInput("interpolation k must be >= 1".into()));
    }
    let n = nodes.indices.len();
    if n == 0 {
        return Err(Error::InvalidInput("interpolation needs at least one node".into()));
    }
    let node_points: Vec<_> = nodes.indices.iter().map(|&i| cloud.points[i]).collect();
    let tree = KdTree::build(&node_points);
    let k = cfg.k.min(n);
    let eps2 = cfg.epsilon * cfg.epsilon;
    let mut w = vec![0.0; cloud.len() * n];
    for (p, pt) in cloud.points.iter().enumerate() {
        let nn = tree.nearest_k(pt, k);
        let row = &mut w[p * n..(p + 1) * n];
        if nn[0].0 < eps2 {
            row[nn[0].1] = 1.0;
            continue;
        }
        let inv: Vec<f64> = nn.iter().map(|&(d2, _)| 1.0 / d2.sqrt()).collect();
        let total: f64 = inv.iter().sum();
        for (&(_, idx), &iv) in nn.iter().zip(&inv) {
            row[idx] = iv / total;
        }
    }
    Tensor::matrix(cloud.len(), n, w)
}

/// Dense per-point descriptors as inverse-distance blends of node
/// descriptors.
pub fn interpolate_dense(
    cloud: &PointCloud,
    nodes: &NodeSet,
    node_descs: &Tensor,
    cfg: &InterpolationConfig,
) -> Result<Tensor> {
    if node_descs.rank() != 2 || node_descs.rows() != nodes.indices.len() {
        return Err(Error::Shape(format!(
            "node descriptors {:?} do not match {} nodes",
            node_descs.shape(),
            nodes.indices.len()
        )));
    }
    let w = interpolation_weights(cloud, nodes, cfg)?;
    Ok(crate::diffcore::tensor::matmul(&w, node_descs))
}

/// Top-k node pairs by reciprocal descriptor distance, ranked descending
/// with (i, j) lexicographic tie-break.
pub fn coarse_match(descs_a: &Tensor, descs_b: &Tensor, top_k: usize) -> Result<CorrespondenceSet> {
    if top_k == 0 {
        return Err(Error::InvalidInput("coarse top_k must be >= 1".into()));
    }
    if descs_a.rank() != 2 || descs_b.rank() != 2 || descs_a.cols() != descs_b.cols() {
        return Err(Error::Shape(format!(
            "coarse_match descriptor shapes {:?} vs {:?}",
            descs_a.shape(),
            descs_b.shape()
        )));
    }
    let (n, m) = (descs_a.rows(), descs_b.rows());
    if n == 0 || m == 0 {
        return Err(Error::InvalidInput("coarse_match needs nonempty descriptor sets".into()));
    }
    let mut pairs = Vec::with_capacity(n * m);
    for i in 0..n {
        let a = descs_a.row(i);
        for j in 0..m {
            let d2: f64 = a
                .iter()
                .zip(descs_b.row(j))
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            let sim = 1.0 / d2.sqrt().max(SIMILARITY_EPSILON);
            pairs.push((i, j, sim));
        }
    }
    pairs.sort_unstable_by(|a, b| {
        b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1))
    });
    pairs.truncate(top_k.min(n * m));
    Ok(CorrespondenceSet { pairs, level: Level::Coarse })
}

/// Member indices per node, nearest-to-node first, truncated to
/// `max_points`. Before truncation the lists partition the cloud.
pub fn node_vicinities(
    cloud: &PointCloud,
    nodes: &NodeSet,
    assignment: &[Vec<usize>],
    max_points: usize,
) -> Result<Vec<Vec<usize>>> {
    if assignment.len() != nodes.len() {
        return Err(Error::Shape(format!(
            "assignment covers {} nodes, expected {}",
            assignment.len(),
            nodes.len()
        )));
    }
    if max_points == 0 {
        return Err(Error::InvalidInput("vicinity max_points must be >= 1".into()));
    }
    let mut vic = assignment.to_vec();
    for (idx, members) in vic.iter_mut().enumerate() {
        for &p in members.iter() {
            if p >= cloud.len() {
                return Err(Error::InvalidInput(format!(
                    "vicinity member {p} out of range for {} points",
                    cloud.len()
                )));
            }
        }
        let center = cloud.points[nodes.indices[idx]];
        members.sort_unstable_by(|&a, &b| {
            let da = (cloud.points[a] - center).norm_squared();
            let db = (cloud.points[b] - center).norm_squared();
            da.total_cmp(&db).then(a.cmp(&b))
        });
        members.truncate(max_points);
    }
    Ok(vic)
}

/// Builds one `VicinityGroup` per coarse pair whose vicinities are both
/// nonempty; the second return value counts skipped pairs.
pub fn group_vicinities(
    coarse: &CorrespondenceSet,
    x: &MatchSide,
    y: &MatchSide,
    max_points: usize,
) -> Result<(Vec<VicinityGroup>, usize)> {
    if coarse.pairs.is_empty() {
        return Err(Error::InvalidInput("group_vicinities needs a nonempty coarse set".into()));
    }
    if x.point_descs.rows() != x.cloud.len() || y.point_descs.rows() != y.cloud.len() {
        return Err(Error::Shape("point descriptors do not match cloud sizes".into()));
    }
    let vic_x = node_vicinities(x.cloud, x.nodes, x.assignment, max_points)?;
    let vic_y = node_vicinities(y.cloud, y.nodes, y.assignment, max_points)?;
    let width = x.point_descs.cols();
    let gather = |descs: &Tensor, members: &[usize]| -> Result<Tensor> {
        let mut data = Vec::with_capacity(members.len() * width);
        for &p in members {
            data.extend_from_slice(descs.row(p));
        }
        Tensor::matrix(members.len(), width, data)
    };
    let mut groups = Vec::new();
    let mut skipped = 0usize;
    for &(i, j, _) in &coarse.pairs {
        if i >= vic_x.len() || j >= vic_y.len() {
            return Err(Error::InvalidInput(format!("coarse pair ({i}, {j}) out of node range")));
        }
        if vic_x[i].is_empty() || vic_y[j].is_empty() {
            skipped += 1;
            continue;
        }
        groups.push(VicinityGroup {
            node_x: i,
            node_y: j,
            members_x: vic_x[i].clone(),
            members_y: vic_y[j].clone(),
            descs_x: gather(x.point_descs, &vic_x[i])?,
            descs_y: gather(y.point_descs, &vic_y[j])?,
        });
    }
    Ok((groups, skipped))
}

fn log_softmax_rows_inplace(v: &mut [f64], rows: usize, cols: usize) {
    for r in 0..rows {
        let row = &mut v[r * cols..(r + 1) * cols];
        let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = mx + row.iter().map(|&x| (x - mx).exp()).sum::<f64>().ln();
        for x in row {
            *x -= lse;
        }
    }
}

fn log_softmax_cols_inplace(v: &mut [f64], rows: usize, cols: usize) {
    for c in 0..cols {
        let mut mx = f64::NEG_INFINITY;
        for r in 0..rows {
            mx = mx.max(v[r * cols + c]);
        }
        let mut s = 0.0;
        for r in 0..rows {
            s += (v[r * cols + c] - mx).exp();
        }
        let lse = mx + s.ln();
        for r in 0..rows {
            v[r * cols + c] -= lse;
        }
    }
}

/// Slack-augmented Sinkhorn normalization in log-space. The raw
/// similarities are treated as logits; the returned matrix holds
/// probabilities. Square inputs become doubly stochastic within 1e-6 at
/// 100 iterations.
pub fn sinkhorn_normalize(similarity: &Tensor, alpha: f64, iterations: usize) -> Result<ConfidenceMatrix> {
    if similarity.rank() != 2 {
        return Err(Error::Shape(format!("sinkhorn needs a matrix, got {:?}", similarity.shape())));
    }
    if !alpha.is_finite() {
        return Err(Error::Domain("sinkhorn alpha must be finite".into()));
    }
    let (n, m) = (similarity.rows(), similarity.cols());
    let (rows, cols) = (n + 1, m + 1);
    let mut v = vec![alpha; rows * cols];
    for r in 0..n {
        v[r * cols..r * cols + m].copy_from_slice(similarity.row(r));
    }
    for _ in 0..iterations {
        log_softmax_rows_inplace(&mut v, rows, cols);
        log_softmax_cols_inplace(&mut v, rows, cols);
    }
    for x in &mut v {
        *x = x.exp();
    }
    Ok(ConfidenceMatrix { values: Tensor::matrix(rows, cols, v)?, alpha })
}

/// Tape version used in training: returns log-probabilities over the
/// slack-augmented matrix so losses can gather log-confidences with exact
/// gradients. `alpha` is the learnable slack parameter `"sinkhorn.alpha"`.
pub fn sinkhorn_log_tape(
    tape: &mut Tape,
    store: &ParamStore,
    similarity: Var,
    iterations: usize,
) -> Result<Var> {
    let alpha = tape.param(store, "sinkhorn.alpha")?;
    let mut z = tape.pad_with_scalar(similarity, alpha)?;
    for _ in 0..iterations {
        z = tape.log_softmax_rows(z)?;
        z = tape.log_softmax_cols(z)?;
    }
    Ok(z)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExtractionMode {
    /// Union of per-row and per-column argmaxes, slack landings dropped.
    #[default]
    RowAndColArgmax,
    /// Only pairs that are the argmax of both their row and their column.
    Mutual,
}

impl ExtractionMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "row_and_col_argmax" => Ok(ExtractionMode::RowAndColArgmax),
            "mutual" => Ok(ExtractionMode::Mutual),
            other => Err(Error::InvalidInput(format!(
                "unknown extraction mode {other:?} (expected row_and_col_argmax or mutual)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ExtractionMode::RowAndColArgmax => "row_and_col_argmax",
            ExtractionMode::Mutual => "mutual",
        }
    }
}

fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0usize, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Fine correspondences of one group, reported with global point indices.
pub fn extract_fine(
    z: &ConfidenceMatrix,
    group: &VicinityGroup,
    mode: ExtractionMode,
) -> Result<CorrespondenceSet> {
    let (nx, ny) = (group.members_x.len(), group.members_y.len());
    if z.values.rows() != nx + 1 || z.values.cols() != ny + 1 {
        return Err(Error::Shape(format!(
            "confidence matrix {:?} does not fit vicinities {}x{}",
            z.values.shape(),
            nx,
            ny
        )));
    }
    let row_arg: Vec<usize> = (0..nx).map(|r| argmax(z.values.row(r).iter().copied())).collect();
    let col_arg: Vec<usize> =
        (0..ny).map(|c| argmax((0..nx + 1).map(|r| z.values.at(r, c)))).collect();
    let mut picks: Vec<(usize, usize)> = Vec::new();
    match mode {
        ExtractionMode::RowAndColArgmax => {
            for (r, &c) in row_arg.iter().enumerate() {
                if c < ny {
                    picks.push((r, c));
                }
            }
            for (c, &r) in col_arg.iter().enumerate() {
                if r < nx {
                    picks.push((r, c));
                }
            }
        }
        ExtractionMode::Mutual => {
            for (r, &c) in row_arg.iter().enumerate() {
                if c < ny && col_arg[c] == r {
                    picks.push((r, c));
                }
            }
        }
    }
    picks.sort_unstable();
    picks.dedup();
    let pairs = picks
        .into_iter()
        .map(|(r, c)| (group.members_x[r], group.members_y[c], z.values.at(r, c)))
        .collect();
    Ok(CorrespondenceSet { pairs, level: Level::Fine })
}

/// Union of per-group fine sets, deduplicated keeping the maximum
/// confidence per pair.
pub fn merge_fine(sets: &[CorrespondenceSet]) -> CorrespondenceSet {
    let mut all: Vec<(usize, usize, f64)> = Vec::new();
    for s in sets {
        debug_assert_eq!(s.level, Level::Fine);
        all.extend_from_slice(&s.pairs);
    }
    all.sort_unstable_by(|a, b| {
        a.0.cmp(&b.0).then(a.1.cmp(&b.1)).then(b.2.total_cmp(&a.2))
    });
    all.dedup_by_key(|p| (p.0, p.1));
    CorrespondenceSet { pairs: all, level: Level::Fine }
}
