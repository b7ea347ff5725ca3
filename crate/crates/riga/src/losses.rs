//! Training supervision: overlap statistics, circle loss over node
//! descriptors, ground-truth match sets, and the Sinkhorn NLL refinement
//! loss.

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geom::{PointCloud, RigidTransform};
use crate::matcher::{ConfidenceMatrix, VicinityGroup};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Fine-loss weight in the total.
    pub lambda: f64,
    pub delta_p: f64,
    pub delta_n: f64,
    pub gamma: f64,
    /// Distance under the ground-truth transform below which two points
    /// count as the same surface location.
    pub tau_p: f64,
    /// Cap on circle-loss anchors sampled per frame during training.
    pub anchors_per_frame: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 1.0,
            delta_p: 0.1,
            delta_n: 1.4,
            gamma: 10.0,
            tau_p: 0.05,
            anchors_per_frame: 256,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta_p < self.delta_n) {
            return Err(Error::InvalidInput(format!(
                "delta_p {} must be below delta_n {}",
                self.delta_p, self.delta_n
            )));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::InvalidInput("gamma must be positive".into()));
        }
        if !(self.tau_p > 0.0) {
            return Err(Error::InvalidInput("tau_p must be positive".into()));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::InvalidInput("lambda must be finite and nonnegative".into()));
        }
        if self.anchors_per_frame == 0 {
            return Err(Error::InvalidInput("anchors_per_frame must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverlapStats {
    /// Points of the first vicinity with a partner in the second.
    pub n_i_to_j: usize,
    /// Points of the second vicinity with a partner in the first.
    pub n_j_to_i: usize,
    pub ratio: f64,
}

/// Visible-point counts and overlap ratio of two vicinities under the
/// ground-truth transform (mapping the 𝒳 side onto the 𝒴 side). Both
/// directions are decided from one residual sweep, so the ratio is
/// symmetric by construction.
pub fn overlap_stats(
    cloud_x: &PointCloud,
    vic_x: &[usize],
    cloud_y: &PointCloud,
    vic_y: &[usize],
    t_gt: &RigidTransform,
    tau_p: f64,
) -> Result<OverlapStats> {
    if vic_x.is_empty() || vic_y.is_empty() {
        return Err(Error::InvalidInput("overlap_stats needs nonempty vicinities".into()));
    }
    if !(tau_p > 0.0) {
        return Err(Error::InvalidInput("tau_p must be positive".into()));
    }
    let tau2 = tau_p * tau_p;
    let moved: Vec<_> = vic_x.iter().map(|&p| t_gt.apply_point(&cloud_x.points[p])).collect();
    let mut seen_x = vec![false; vic_x.len()];
    let mut seen_y = vec![false; vic_y.len()];
    for (a, m) in moved.iter().enumerate() {
        for (b, &q) in vic_y.iter().enumerate() {
            if (m - cloud_y.points[q]).norm_squared() < tau2 {
                seen_x[a] = true;
                seen_y[b] = true;
            }
        }
    }
    let n_i_to_j = seen_x.iter().filter(|&&s| s).count();
    let n_j_to_i = seen_y.iter().filter(|&&s| s).count();
    let ratio = 0.5
        * (n_i_to_j as f64 / vic_x.len() as f64 + n_j_to_i as f64 / vic_y.len() as f64);
    Ok(OverlapStats { n_i_to_j, n_j_to_i, ratio })
}

/// Per-anchor positive candidates (with overlap ratios) and negative
/// candidates; entry `i` belongs to anchor `i` of the frame.
#[derive(Debug, Clone, Default)]
pub struct CircleSets {
    pub positives: Vec<Vec<(usize, f64)>>,
    pub negatives: Vec<Vec<usize>>,
}

/// Splits a full N'xM' overlap-ratio table into per-anchor circle-loss
/// sets for both frames: positives overlap (r > 0), negatives do not.
pub fn build_circle_sets(ratios: &[Vec<f64>]) -> (CircleSets, CircleSets) {
    let n = ratios.len();
    let m = ratios.first().map_or(0, Vec::len);
    let mut x = CircleSets { positives: vec![Vec::new(); n], negatives: vec![Vec::new(); n] };
    let mut y = CircleSets { positives: vec![Vec::new(); m], negatives: vec![Vec::new(); m] };
    for (i, row) in ratios.iter().enumerate() {
        for (j, &r) in row.iter().enumerate() {
            if r > 0.0 {
                x.positives[i].push((j, r));
                y.positives[j].push((i, r));
            } else {
                x.negatives[i].push(j);
                y.negatives[j].push(i);
            }
        }
    }
    (x, y)
}

/// Ground-truth coarse correspondences for training: overlapping node
/// pairs ranked by ratio descending (ties lexicographic), at most `count`.
pub fn top_overlap_pairs(ratios: &[Vec<f64>], count: usize) -> Vec<(usize, usize, f64)> {
    let mut pairs: Vec<(usize, usize, f64)> = Vec::new();
    for (i, row) in ratios.iter().enumerate() {
        for (j, &r) in row.iter().enumerate() {
            if r > 0.0 {
                pairs.push((i, j, r));
            }
        }
    }
    pairs.sort_unstable_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    pairs.truncate(count);
    pairs
}

fn logsumexp(tape: &mut Tape, args: Var) -> Result<Var> {
    let m = tape.max_over_set(args)?;
    let shifted = tape.sub_scalar_var(args, m)?;
    let e = tape.exp(shifted);
    let s = tape.sum(e);
    let l = tape.ln(s)?;
    tape.add(l, m)
}

/// One frame's circle loss: anchors against the other frame's candidates,
/// on Euclidean feature distances with per-sample weights β_p = γ[d − Δp]+
/// and β_n = γ[Δn − d]+ (the overlap ratio additionally scales each
/// positive exponent). Anchors with an empty positive or negative set are
/// skipped; returns the mean over survivors (0 if none survive) and the
/// skip count.
pub fn circle_loss_one_side(
    tape: &mut Tape,
    anchor_descs: Var,
    candidate_descs: Var,
    sets: &CircleSets,
    cfg: &LossConfig,
) -> Result<(Var, usize)> {
    cfg.validate()?;
    let n = tape.value(anchor_descs).rows();
    let m = tape.value(candidate_descs).rows();
    if sets.positives.len() != n || sets.negatives.len() != n {
        return Err(Error::Shape(format!(
            "circle sets cover {} anchors, descriptors have {n}",
            sets.positives.len()
        )));
    }
    let dist = tape.pairwise_dist(anchor_descs, candidate_descs)?;
    let mut total: Option<Var> = None;
    let mut survivors = 0usize;
    for (i, (pos, neg)) in sets.positives.iter().zip(&sets.negatives).enumerate() {
        if pos.is_empty() || neg.is_empty() {
            continue;
        }
        for &(j, r) in pos {
            if j >= m || !(r > 0.0) || !r.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "anchor {i}: bad positive candidate ({j}, {r})"
                )));
            }
        }
        if let Some(&l) = neg.iter().find(|&&l| l >= m) {
            return Err(Error::InvalidInput(format!(
                "anchor {i}: negative candidate {l} out of range"
            )));
        }
        // Positive exponent r·β_p·(d − Δp) with the adaptive weight
        // β_p = γ[d − Δp]+; the hinge keeps sub-margin samples inert and
        // rules out the loss shrinking by inflating feature norms.
        let pos_idx: Vec<(usize, usize)> = pos.iter().map(|&(j, _)| (i, j)).collect();
        let pd = tape.gather_elems(dist, &pos_idx)?;
        let u = tape.add_scalar(pd, -cfg.delta_p);
        let hinged = tape.relu(u);
        let usq = tape.mul(u, hinged)?;
        let w = tape.constant(Tensor::vector(pos.iter().map(|&(_, r)| r * cfg.gamma).collect()));
        let pos_args = tape.mul(usq, w)?;
        let lse_p = logsumexp(tape, pos_args)?;

        // Negative exponent β_n·(Δn − d) with β_n = γ[Δn − d]+.
        let neg_idx: Vec<(usize, usize)> = neg.iter().map(|&l| (i, l)).collect();
        let nd = tape.gather_elems(dist, &neg_idx)?;
        let flipped = tape.mul_scalar(nd, -1.0);
        let v = tape.add_scalar(flipped, cfg.delta_n);
        let hinged_n = tape.relu(v);
        let vsq = tape.mul(v, hinged_n)?;
        let neg_args = tape.mul_scalar(vsq, cfg.gamma);
        let lse_n = logsumexp(tape, neg_args)?;

        let z = tape.add(lse_p, lse_n)?;
        let term = tape.softplus(z);
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
        survivors += 1;
    }
    let skipped = n - survivors;
    match total {
        Some(t) => Ok((tape.mul_scalar(t, 1.0 / survivors as f64), skipped)),
        None => Ok((tape.constant(Tensor::scalar(0.0)), skipped)),
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CircleLossInfo {
    pub skipped_x: usize,
    pub skipped_y: usize,
    /// True when every anchor on both frames was skipped (loss is 0).
    pub all_skipped: bool,
}

/// Symmetric circle loss ½(ℒ_x + ℒ_y) over projected node descriptors.
pub fn circle_loss(
    tape: &mut Tape,
    descs_x: Var,
    descs_y: Var,
    sets_x: &CircleSets,
    sets_y: &CircleSets,
    cfg: &LossConfig,
) -> Result<(Var, CircleLossInfo)> {
    let nx = tape.value(descs_x).rows();
    let ny = tape.value(descs_y).rows();
    let (lx, skipped_x) = circle_loss_one_side(tape, descs_x, descs_y, sets_x, cfg)?;
    let (ly, skipped_y) = circle_loss_one_side(tape, descs_y, descs_x, sets_y, cfg)?;
    let sum = tape.add(lx, ly)?;
    let loss = tape.mul_scalar(sum, 0.5);
    Ok((
        loss,
        CircleLossInfo {
            skipped_x,
            skipped_y,
            all_skipped: skipped_x == nx && skipped_y == ny,
        },
    ))
}

/// Ground-truth assignment targets inside one vicinity group, in local
/// row/column coordinates of the group's confidence matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GtMatchSets {
    /// All cross pairs within tau_p under the ground-truth transform.
    pub matches: Vec<(usize, usize)>,
    /// Rows with no partner (should land in the slack column).
    pub unmatched_x: Vec<usize>,
    /// Columns with no partner (should land in the slack row).
    pub unmatched_y: Vec<usize>,
}

pub fn build_gt_sets(
    group: &VicinityGroup,
    cloud_x: &PointCloud,
    cloud_y: &PointCloud,
    t_gt: &RigidTransform,
    tau_p: f64,
) -> Result<GtMatchSets> {
    if !(tau_p > 0.0) {
        return Err(Error::InvalidInput("tau_p must be positive".into()));
    }
    let tau2 = tau_p * tau_p;
    let moved: Vec<_> = group
        .members_x
        .iter()
        .map(|&p| t_gt.apply_point(&cloud_x.points[p]))
        .collect();
    let mut matches = Vec::new();
    let mut has_x = vec![false; group.members_x.len()];
    let mut has_y = vec![false; group.members_y.len()];
    for (r, mx) in moved.iter().enumerate() {
        for (c, &q) in group.members_y.iter().enumerate() {
            if (mx - cloud_y.points[q]).norm_squared() < tau2 {
                matches.push((r, c));
                has_x[r] = true;
                has_y[c] = true;
            }
        }
    }
    Ok(GtMatchSets {
        matches,
        unmatched_x: (0..has_x.len()).filter(|&r| !has_x[r]).collect(),
        unmatched_y: (0..has_y.len()).filter(|&c| !has_y[c]).collect(),
    })
}

const PROB_FLOOR: f64 = 1e-30;

/// Negative log-likelihood of the ground-truth assignment under one
/// group's confidence matrix, probabilities floored at 1e-30.
pub fn fine_nll_loss(z: &ConfidenceMatrix, gt: &GtMatchSets) -> Result<f64> {
    let (rows, cols) = (z.values.rows(), z.values.cols());
    if rows < 1 || cols < 1 {
        return Err(Error::Shape("confidence matrix missing slack".into()));
    }
    let (slack_row, slack_col) = (rows - 1, cols - 1);
    let mut loss = 0.0;
    let mut take = |r: usize, c: usize| -> Result<()> {
        if r >= rows || c >= cols {
            return Err(Error::InvalidInput(format!(
                "gt index ({r}, {c}) outside {rows}x{cols} confidence matrix"
            )));
        }
        loss -= z.values.at(r, c).max(PROB_FLOOR).ln();
        Ok(())
    };
    for &(r, c) in &gt.matches {
        if r >= slack_row || c >= slack_col {
            return Err(Error::InvalidInput(format!(
                "gt match ({r}, {c}) collides with slack"
            )));
        }
        take(r, c)?;
    }
    for &r in &gt.unmatched_x {
        if r >= slack_row {
            return Err(Error::InvalidInput(format!("unmatched row {r} collides with slack")));
        }
        take(r, slack_col)?;
    }
    for &c in &gt.unmatched_y {
        if c >= slack_col {
            return Err(Error::InvalidInput(format!("unmatched col {c} collides with slack")));
        }
        take(slack_row, c)?;
    }
    Ok(loss)
}

/// Tape version over log-probabilities (the output of
/// `sinkhorn_log_tape`); log-space entries are finite so no floor is
/// needed.
pub fn fine_nll_tape(tape: &mut Tape, log_z: Var, gt: &GtMatchSets) -> Result<Var> {
    let v = tape.value(log_z);
    let (rows, cols) = (v.rows(), v.cols());
    let (slack_row, slack_col) = (rows - 1, cols - 1);
    let mut idx = Vec::with_capacity(gt.matches.len() + gt.unmatched_x.len() + gt.unmatched_y.len());
    for &(r, c) in &gt.matches {
        if r >= slack_row || c >= slack_col {
            return Err(Error::InvalidInput(format!("gt match ({r}, {c}) collides with slack")));
        }
        idx.push((r, c));
    }
    for &r in &gt.unmatched_x {
        if r >= slack_row {
            return Err(Error::InvalidInput(format!("unmatched row {r} collides with slack")));
        }
        idx.push((r, slack_col));
    }
    for &c in &gt.unmatched_y {
        if c >= slack_col {
            return Err(Error::InvalidInput(format!("unmatched col {c} collides with slack")));
        }
        idx.push((slack_row, c));
    }
    if idx.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let picked = tape.gather_elems(log_z, &idx)?;
    let s = tape.sum(picked);
    Ok(tape.neg(s))
}

pub fn total_loss(coarse: f64, fine: f64, lambda: f64) -> f64 {
    coarse + lambda * fine
}

pub fn total_loss_tape(tape: &mut Tape, coarse: Var, fine: Var, lambda: f64) -> Result<Var> {
    let weighted = tape.mul_scalar(fine, lambda);
    tape.add(coarse, weighted)
}
