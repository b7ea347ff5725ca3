//! Desk-scale training: per-pair loss assembly on the tape and an Adam
//! loop with per-epoch learning-rate decay.

use crate::config::RunConfig;
use crate::diffcore::{ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geom::{PointCloud, RigidTransform};
use crate::losses::{
    build_circle_sets, build_gt_sets, circle_loss, fine_nll_tape, overlap_stats,
    top_overlap_pairs, total_loss_tape, CircleSets, GtMatchSets,
};
use crate::matcher::{node_vicinities, sinkhorn_log_tape, VicinityGroup};
use crate::pipeline::{describe_on_tape, prepare, PreparedCloud};

/// Adam with bias correction (β₁ 0.9, β₂ 0.999, ε 1e-8). Moment buffers
/// mirror the store's entry order.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let sizes: Vec<usize> = store.iter().map(|(_, t, _)| t.numel()).collect();
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One update from the gradients currently accumulated in the store.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..self.m.len() {
            let (_, values, grads) = store.entry_mut(i);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..values.len() {
                let g = grads[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                values[k] -= self.lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + self.eps);
            }
        }
    }

    pub fn decay(&mut self, factor: f64) {
        self.lr *= factor;
    }
}

/// One training pair with everything parameter-independent precomputed:
/// geometry, truncated vicinities, the overlap table's circle sets and the
/// ground-truth coarse groups with their assignment targets.
#[derive(Debug, Clone)]
pub struct PreparedPair {
    pub x: PreparedCloud,
    pub y: PreparedCloud,
    /// Source-to-target ground truth (maps x points onto y).
    pub gt: RigidTransform,
    pub sets_x: CircleSets,
    pub sets_y: CircleSets,
    pub gt_groups: Vec<GtGroup>,
    /// Node pairs whose overlap ratio is positive.
    pub positive_pairs: usize,
}

#[derive(Debug, Clone)]
pub struct GtGroup {
    pub members_x: Vec<usize>,
    pub members_y: Vec<usize>,
    pub gt_sets: GtMatchSets,
}

pub fn prepare_pair(
    cfg: &RunConfig,
    source: &PointCloud,
    target: &PointCloud,
    gt: &RigidTransform,
) -> Result<PreparedPair> {
    let x = prepare(source, cfg)?;
    let y = prepare(target, cfg)?;
    let vic_x = node_vicinities(&x.cloud, &x.nodes, &x.assignment, cfg.vicinity_max)?;
    let vic_y = node_vicinities(&y.cloud, &y.nodes, &y.assignment, cfg.vicinity_max)?;

    // Full overlap-ratio table; empty vicinities contribute zero rows.
    let mut ratios = vec![vec![0.0f64; vic_y.len()]; vic_x.len()];
    for (i, vx) in vic_x.iter().enumerate() {
        if vx.is_empty() {
            continue;
        }
        for (j, vy) in vic_y.iter().enumerate() {
            if vy.is_empty() {
                continue;
            }
            ratios[i][j] = overlap_stats(&x.cloud, vx, &y.cloud, vy, gt, cfg.tau_p)?.ratio;
        }
    }
    let (mut sets_x, mut sets_y) = build_circle_sets(&ratios);
    cap_anchors(&mut sets_x, cfg.anchors_per_frame);
    cap_anchors(&mut sets_y, cfg.anchors_per_frame);

    let top = top_overlap_pairs(&ratios, cfg.gt_coarse_count);
    let positive_pairs = top.len();
    let mut gt_groups = Vec::with_capacity(top.len());
    for &(i, j, _) in &top {
        if vic_x[i].is_empty() || vic_y[j].is_empty() {
            continue;
        }
        // build_gt_sets only reads members; descriptor slots are dummies.
        let group = VicinityGroup {
            node_x: i,
            node_y: j,
            members_x: vic_x[i].clone(),
            members_y: vic_y[j].clone(),
            descs_x: Tensor::zeros(vec![vic_x[i].len(), 1]),
            descs_y: Tensor::zeros(vec![vic_y[j].len(), 1]),
        };
        let gt_sets = build_gt_sets(&group, &x.cloud, &y.cloud, gt, cfg.tau_p)?;
        gt_groups.push(GtGroup {
            members_x: vic_x[i].clone(),
            members_y: vic_y[j].clone(),
            gt_sets,
        });
    }

    Ok(PreparedPair {
        x,
        y,
        gt: gt.clone(),
        sets_x,
        sets_y,
        gt_groups,
        positive_pairs,
    })
}

/// Keeps the circle sets of the first `cap` anchors and empties the rest
/// (deterministic anchor subsampling in node order).
fn cap_anchors(sets: &mut CircleSets, cap: usize) {
    for i in cap..sets.positives.len() {
        sets.positives[i].clear();
        sets.negatives[i].clear();
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    pub total: f64,
    pub coarse: f64,
    pub fine: f64,
    pub gt_groups: usize,
}

/// Builds the full training loss for one pair on the tape and returns the
/// loss variable plus its scalar breakdown.
pub fn pair_loss(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &RunConfig,
    pair: &PreparedPair,
) -> Result<(Var, LossBreakdown)> {
    let (sx, sy) = describe_on_tape(tape, store, &pair.x, &pair.y, cfg)?;
    let (coarse, _info) = circle_loss(
        tape,
        sx.node_hat,
        sy.node_hat,
        &pair.sets_x,
        &pair.sets_y,
        &cfg.loss(),
    )?;

    let fine = if pair.gt_groups.is_empty() {
        tape.constant(Tensor::scalar(0.0))
    } else {
        let mut sum: Option<Var> = None;
        for group in &pair.gt_groups {
            let gx = tape.gather_rows(sx.point_hat, &group.members_x)?;
            let gy = tape.gather_rows(sy.point_hat, &group.members_y)?;
            let sim = tape.matmul_nt(gx, gy)?;
            let log_z = sinkhorn_log_tape(tape, store, sim, cfg.sinkhorn_iterations)?;
            let nll = fine_nll_tape(tape, log_z, &group.gt_sets)?;
            sum = Some(match sum {
                None => nll,
                Some(s) => tape.add(s, nll)?,
            });
        }
        tape.mul_scalar(sum.unwrap(), 1.0 / pair.gt_groups.len() as f64)
    };

    let total = total_loss_tape(tape, coarse, fine, cfg.lambda)?;
    let breakdown = LossBreakdown {
        total: tape.value(total).data()[0],
        coarse: tape.value(coarse).data()[0],
        fine: tape.value(fine).data()[0],
        gt_groups: pair.gt_groups.len(),
    };
    Ok((total, breakdown))
}

/// Forward, backward and one Adam update on a single pair.
pub fn train_step(
    store: &mut ParamStore,
    cfg: &RunConfig,
    pair: &PreparedPair,
    adam: &mut AdamState,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    store.zero_grads();
    let (loss, breakdown) = pair_loss(&mut tape, store, cfg, pair)?;
    tape.backward(loss, store)?;
    adam.step(store);
    Ok(breakdown)
}

#[derive(Debug, Clone, Copy)]
pub struct TrainLogEntry {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub coarse: f64,
    pub fine: f64,
    pub lr: f64,
}

/// Runs `steps` optimizer steps cycling through `pairs` in order; the
/// learning rate decays by `cfg.lr_decay` at each epoch boundary (one full
/// pass). Deterministic given the initial store.
pub fn train(
    store: &mut ParamStore,
    cfg: &RunConfig,
    pairs: &[PreparedPair],
    steps: usize,
    mut on_step: impl FnMut(&TrainLogEntry),
) -> Result<Vec<TrainLogEntry>> {
    if pairs.is_empty() && steps > 0 {
        return Err(Error::InvalidInput("training needs at least one pair".into()));
    }
    let mut adam = AdamState::new(store, cfg.lr);
    let mut log = Vec::with_capacity(steps);
    for step in 0..steps {
        let epoch = step / pairs.len();
        if step > 0 && step % pairs.len() == 0 {
            adam.decay(cfg.lr_decay);
        }
        let breakdown = train_step(store, cfg, &pairs[step % pairs.len()], &mut adam)?;
        let entry = TrainLogEntry {
            step: step + 1,
            epoch,
            loss: breakdown.total,
            coarse: breakdown.coarse,
            fine: breakdown.fine,
            lr: adam.lr,
        };
        on_step(&entry);
        log.push(entry);
    }
    Ok(log)
}
