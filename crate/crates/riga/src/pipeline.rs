//! End-to-end description and matching: PPF signatures through the
//! attention stack to projected descriptors, then coarse nodes to fine
//! correspondences and RANSAC registration.

use crate::attention::run_stack;
use crate::config::RunConfig;
use crate::diffcore::{ParamStore, Tape, Tensor, Var};
use crate::encoders::{pointnet_forward, projection_forward, ProjectionHead, PsiKind};
use crate::error::{Error, Result};
use crate::geom::{
    estimate_normals, farthest_point_sampling, point_to_node_assign, support_regions, KdTree,
    NodeSet, PointCloud,
};
use crate::matcher::{
    coarse_match, extract_fine, group_vicinities, interpolation_weights, merge_fine,
    sinkhorn_normalize, CorrespondenceSet, MatchSide,
};
use crate::ppf::{global_signature, local_signature};
use crate::solver::{ransac_register, RegistrationResult};

/// Everything geometry-side the description path needs from one cloud,
/// computed once: normals, nodes, stacked signature quadruples with their
/// segment ranges, the point-to-node partition and interpolation weights.
#[derive(Debug, Clone)]
pub struct PreparedCloud {
    pub cloud: PointCloud,
    pub nodes: NodeSet,
    pub assignment: Vec<Vec<usize>>,
    pub local_quads: Tensor,
    pub local_segments: Vec<(usize, usize)>,
    pub global_quads: Tensor,
    pub global_segments: Vec<(usize, usize)>,
    pub interp: Tensor,
}

pub fn prepare(cloud: &PointCloud, cfg: &RunConfig) -> Result<PreparedCloud> {
    prepare_with(cloud, cfg, false)
}

/// `raw_xyz` swaps every PPF quadruple for the raw absolute coordinates
/// (x, y, z, 0) of the paired point: the rotation-variant ablation used as
/// a negative control by the invariance check.
pub fn prepare_with(cloud: &PointCloud, cfg: &RunConfig, raw_xyz: bool) -> Result<PreparedCloud> {
    cloud.validate()?;
    if cloud.is_empty() {
        return Err(Error::InvalidInput("cannot prepare an empty cloud".into()));
    }
    let cloud = if cloud.normals.is_some() {
        cloud.clone()
    } else {
        estimate_normals(cloud, cfg.normals_k, cfg.orientation)?
    };
    let nodes = farthest_point_sampling(&cloud, cfg.node_count, 0)?;
    if nodes.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "description needs at least 2 nodes, got {}",
            nodes.len()
        )));
    }
    let tree = KdTree::build(&cloud.points);
    let supports = support_regions(&cloud, &tree, &nodes, cfg.support_radius, cfg.support_max)?;

    let raw_row = |idx: usize| -> [f64; 4] {
        let p = &cloud.points[idx];
        [p.x, p.y, p.z, 0.0]
    };
    let mut local_data = Vec::new();
    let mut local_segments = Vec::with_capacity(nodes.len());
    for region in &supports {
        let start = local_segments.last().map_or(0, |&(_, e)| e);
        if raw_xyz {
            for &u in &region.member_indices {
                local_data.extend_from_slice(&raw_row(u));
            }
        } else {
            let sig = local_signature(&cloud, region)?;
            for q in &sig.quadruples {
                local_data.extend_from_slice(&q.to_array());
            }
        }
        local_segments.push((start, start + region.member_indices.len()));
    }
    let local_quads = Tensor::matrix(local_data.len() / 4, 4, local_data)?;

    let mut global_data = Vec::new();
    let mut global_segments = Vec::with_capacity(nodes.len());
    for i in 0..nodes.len() {
        let start = global_segments.last().map_or(0, |&(_, e)| e);
        if raw_xyz {
            for (j, &idx) in nodes.indices.iter().enumerate() {
                if j != i {
                    global_data.extend_from_slice(&raw_row(idx));
                }
            }
        } else {
            let sig = global_signature(&cloud, &nodes, i)?;
            for q in &sig.quadruples {
                global_data.extend_from_slice(&q.to_array());
            }
        }
        global_segments.push((start, start + nodes.len() - 1));
    }
    let global_quads = Tensor::matrix(global_data.len() / 4, 4, global_data)?;

    let assignment = point_to_node_assign(&cloud, &nodes)?;
    let interp = interpolation_weights(&cloud, &nodes, &cfg.interpolation())?;

    Ok(PreparedCloud {
        cloud,
        nodes,
        assignment,
        local_quads,
        local_segments,
        global_quads,
        global_segments,
        interp,
    })
}

/// Tape handles to every descriptor stage of one frame: geometric and
/// structural set encodings, their sum, the attended descriptors, and the
/// projected node/point descriptors at matching width.
#[derive(Debug, Clone, Copy)]
pub struct StageVars {
    pub g: Var,
    pub s: Var,
    pub d0: Var,
    pub dt: Var,
    pub node_hat: Var,
    pub point_hat: Var,
}

pub fn describe_on_tape(
    tape: &mut Tape,
    store: &ParamStore,
    x: &PreparedCloud,
    y: &PreparedCloud,
    cfg: &RunConfig,
) -> Result<(StageVars, StageVars)> {
    let dims = cfg.model_dims();
    let encode = |tape: &mut Tape, p: &PreparedCloud| -> Result<(Var, Var, Var)> {
        let g = pointnet_forward(
            tape,
            store,
            PsiKind::Geometric,
            p.local_quads.clone(),
            &p.local_segments,
            &dims,
        )?;
        let s = pointnet_forward(
            tape,
            store,
            PsiKind::Structural,
            p.global_quads.clone(),
            &p.global_segments,
            &dims,
        )?;
        let d0 = tape.add(g, s)?;
        Ok((g, s, d0))
    };
    let (g_x, s_x, d0_x) = encode(tape, x)?;
    let (g_y, s_y, d0_y) = encode(tape, y)?;
    let (dt_x, dt_y) = run_stack(tape, store, d0_x, d0_y, &dims, cfg.scaling_mode)?;

    let project = |tape: &mut Tape, p: &PreparedCloud, dt: Var| -> Result<(Var, Var)> {
        let node_hat = projection_forward(tape, store, ProjectionHead::Coarse, dt, &dims)?;
        let w = tape.constant(p.interp.clone());
        let dense = tape.matmul(w, dt)?;
        let point_hat = projection_forward(tape, store, ProjectionHead::Fine, dense, &dims)?;
        Ok((node_hat, point_hat))
    };
    let (node_hat_x, point_hat_x) = project(tape, x, dt_x)?;
    let (node_hat_y, point_hat_y) = project(tape, y, dt_y)?;

    Ok((
        StageVars {
            g: g_x,
            s: s_x,
            d0: d0_x,
            dt: dt_x,
            node_hat: node_hat_x,
            point_hat: point_hat_x,
        },
        StageVars {
            g: g_y,
            s: s_y,
            d0: d0_y,
            dt: dt_y,
            node_hat: node_hat_y,
            point_hat: point_hat_y,
        },
    ))
}

/// Plain-tensor snapshot of every stage, for inference and reporting.
#[derive(Debug, Clone)]
pub struct StageOutputs {
    pub g: Tensor,
    pub s: Tensor,
    pub d0: Tensor,
    pub dt: Tensor,
    pub node_hat: Tensor,
    pub point_hat: Tensor,
}

impl StageOutputs {
    fn from_tape(tape: &Tape, v: &StageVars) -> StageOutputs {
        StageOutputs {
            g: tape.value(v.g).clone(),
            s: tape.value(v.s).clone(),
            d0: tape.value(v.d0).clone(),
            dt: tape.value(v.dt).clone(),
            node_hat: tape.value(v.node_hat).clone(),
            point_hat: tape.value(v.point_hat).clone(),
        }
    }

    /// Largest absolute difference across all stages against another run,
    /// stage by stage.
    pub fn max_deviation(&self, other: &StageOutputs) -> Result<f64> {
        let mut worst = 0.0f64;
        for (a, b) in [
            (&self.g, &other.g),
            (&self.s, &other.s),
            (&self.d0, &other.d0),
            (&self.dt, &other.dt),
            (&self.node_hat, &other.node_hat),
            (&self.point_hat, &other.point_hat),
        ] {
            if a.shape() != b.shape() {
                return Err(Error::Shape(format!(
                    "stage shapes differ: {:?} vs {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
            for (x, y) in a.data().iter().zip(b.data()) {
                worst = worst.max((x - y).abs());
            }
        }
        Ok(worst)
    }
}

pub fn describe_pair(
    store: &ParamStore,
    cfg: &RunConfig,
    x: &PreparedCloud,
    y: &PreparedCloud,
) -> Result<(StageOutputs, StageOutputs)> {
    let mut tape = Tape::new();
    let (vx, vy) = describe_on_tape(&mut tape, store, x, y, cfg)?;
    Ok((
        StageOutputs::from_tape(&tape, &vx),
        StageOutputs::from_tape(&tape, &vy),
    ))
}

#[derive(Debug, Clone)]
pub struct MatchOutput {
    pub fine: CorrespondenceSet,
    pub coarse_used: usize,
    pub skipped_groups: usize,
}

/// Coarse-to-fine matching given already-computed descriptors.
pub fn match_descriptors(
    store: &ParamStore,
    cfg: &RunConfig,
    x: &PreparedCloud,
    y: &PreparedCloud,
    dx: &StageOutputs,
    dy: &StageOutputs,
) -> Result<MatchOutput> {
    let coarse = coarse_match(&dx.node_hat, &dy.node_hat, cfg.top_k)?;
    let side_x = MatchSide {
        cloud: &x.cloud,
        nodes: &x.nodes,
        assignment: &x.assignment,
        point_descs: &dx.point_hat,
    };
    let side_y = MatchSide {
        cloud: &y.cloud,
        nodes: &y.nodes,
        assignment: &y.assignment,
        point_descs: &dy.point_hat,
    };
    let (groups, skipped) = group_vicinities(&coarse, &side_x, &side_y, cfg.vicinity_max)?;
    let alpha = store
        .get("sinkhorn.alpha")
        .ok_or_else(|| Error::InvalidInput("store is missing sinkhorn.alpha".into()))?
        .data()[0];
    let mut sets = Vec::with_capacity(groups.len());
    for group in &groups {
        let sim = crate::diffcore::tensor::matmul_nt(&group.descs_x, &group.descs_y);
        let z = sinkhorn_normalize(&sim, alpha, cfg.sinkhorn_iterations)?;
        sets.push(extract_fine(&z, group, cfg.extraction_mode)?);
    }
    Ok(MatchOutput {
        fine: merge_fine(&sets),
        coarse_used: coarse.pairs.len(),
        skipped_groups: skipped,
    })
}

/// Full matching path: prepare both clouds, describe, coarse match, group,
/// normalize per group and extract the deduplicated fine set.
pub fn match_pair(
    store: &ParamStore,
    cfg: &RunConfig,
    cloud_x: &PointCloud,
    cloud_y: &PointCloud,
) -> Result<MatchOutput> {
    let px = prepare(cloud_x, cfg)?;
    let py = prepare(cloud_y, cfg)?;
    let (dx, dy) = describe_pair(store, cfg, &px, &py)?;
    match_descriptors(store, cfg, &px, &py, &dx, &dy)
}

/// Matching followed by robust estimation of the source-to-target motion.
pub fn register_pair(
    store: &ParamStore,
    cfg: &RunConfig,
    cloud_x: &PointCloud,
    cloud_y: &PointCloud,
) -> Result<(RegistrationResult, MatchOutput)> {
    let matched = match_pair(store, cfg, cloud_x, cloud_y)?;
    let result = ransac_register(&matched.fine, cloud_x, cloud_y, &cfg.ransac())?;
    Ok((result, matched))
}
