//! The optimization objective: truncated-Chamfer reconstruction between
//! rolled-out points and every observed frame within a ±W window, plus a
//! forward-then-backward cycle-consistency penalty.
//!
//! Gradients are exact for the objective as computed: nearest-neighbor
//! assignments and the truncation mask are held fixed, and everything else
//! backpropagates through the composed Euler steps.

use crate::error::{Error, Result};
use crate::geom::{build_index, nearest, normalized_time, FrameSequence, NearestIndex, Point3, PointCloud};
use crate::ode::{euler_step_with_tape, step_backward};
use crate::prior::{Direction, PriorParams, Tape};
use rand::Rng;
use std::collections::BTreeMap;

/// Objective hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    /// Rollout window W: reconstruction terms use k in `{-W..W} \ {0}`.
    pub window: usize,
    /// Weight α of the cycle-consistency term.
    pub cycle_weight: f64,
    /// Chamfer truncation radius in meters; per-point distances beyond it
    /// contribute nothing.
    pub truncation_radius: f64,
    /// Restrict reconstruction to k = ±1.
    pub no_multi_k: bool,
    /// Drop the cycle-consistency term.
    pub no_cycle: bool,
    /// Uniform random subsampling cap applied per optimization step to both
    /// the rolled-out points and each Chamfer target.
    pub max_points_per_frame: Option<usize>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            window: 3,
            cycle_weight: 0.01,
            truncation_radius: 2.0,
            no_multi_k: false,
            no_cycle: false,
            max_points_per_frame: None,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 1 {
            return Err(Error::InvalidConfig("window W must be at least 1".into()));
        }
        if !(self.cycle_weight >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "cycle weight must be non-negative, got {}",
                self.cycle_weight
            )));
        }
        if !(self.truncation_radius > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "truncation radius must be positive, got {}",
                self.truncation_radius
            )));
        }
        if self.max_points_per_frame == Some(0) {
            return Err(Error::InvalidConfig(
                "subsample cap must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Per-term values of one objective evaluation. `cycle_term` carries the α
/// weight; `total` is the sum of all parts.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    /// Chamfer value per rollout offset k.
    pub chamfer_terms: BTreeMap<i32, f64>,
    pub cycle_term: f64,
}

impl LossBreakdown {
    fn from_parts(chamfer_terms: BTreeMap<i32, f64>, cycle_term: f64) -> Self {
        let total = chamfer_terms.values().sum::<f64>() + cycle_term;
        LossBreakdown {
            total,
            chamfer_terms,
            cycle_term,
        }
    }
}

/// Bidirectional truncated Chamfer distance between `pred` and `target`,
/// with gradients for the `pred` positions.
///
/// Value: mean over pred of its truncated squared nearest distance into
/// target, plus mean over target of its truncated squared nearest distance
/// into pred. Squared distances count only while the Euclidean distance is
/// within `radius`. Gradients hold the nearest assignments fixed; a pred
/// point receives contributions both from its own nearest target and from
/// every target point that selected it.
pub fn truncated_chamfer(
    pred: &[Point3],
    target_index: &NearestIndex,
    target: &PointCloud,
    radius: f64,
) -> Result<(f64, Vec<Point3>)> {
    if pred.is_empty() || target.is_empty() {
        return Err(Error::EmptyPointSet);
    }
    if target_index.len() != target.len() {
        return Err(Error::ShapeMismatch(format!(
            "index covers {} points, target cloud has {}",
            target_index.len(),
            target.len()
        )));
    }
    let r2 = radius * radius;
    let n_pred = pred.len() as f64;
    let n_target = target.len() as f64;
    let mut grads = vec![Point3::ZERO; pred.len()];

    let pred_cloud = PointCloud::from_points(pred.to_vec(), 0, 0.0);
    let pred_index = build_index(&pred_cloud)?;

    let mut sum_pred = 0.0;
    for (i, p) in pred.iter().enumerate() {
        let (j, d2) = nearest(target_index, p)?;
        if d2 <= r2 {
            sum_pred += d2;
            grads[i] += (*p - target.points[j]) * (2.0 / n_pred);
        }
    }
    let mut sum_target = 0.0;
    for q in &target.points {
        let (i, d2) = nearest(&pred_index, q)?;
        if d2 <= r2 {
            sum_target += d2;
            grads[i] += (pred[i] - *q) * (2.0 / n_target);
        }
    }
    Ok((sum_pred / n_pred + sum_target / n_target, grads))
}

/// Cycle value and parameter gradients for explicit points: one forward step
/// from `t_idx`, one backward step from `t_idx + 1`, then the mean Euclidean
/// distance back to the originals.
fn cycle_with_points(
    params: &PriorParams,
    seq: &FrameSequence,
    t_idx: usize,
    points: &[Point3],
) -> Result<(f64, Vec<f64>)> {
    if t_idx + 1 > seq.last_frame() {
        return Err(Error::FrameOutOfRange {
            frame: t_idx as i64 + 1,
            max: seq.last_frame(),
        });
    }
    if points.is_empty() {
        return Err(Error::EmptyPointSet);
    }
    let (moved, tape_fwd) = euler_step_with_tape(
        params,
        points,
        normalized_time(seq, t_idx)?,
        Direction::Forward,
    )?;
    let (returned, tape_bwd) = euler_step_with_tape(
        params,
        &moved,
        normalized_time(seq, t_idx + 1)?,
        Direction::Backward,
    )?;
    let n = points.len() as f64;
    let mut value = 0.0;
    let mut output_grads = Vec::with_capacity(points.len());
    for (r, p) in returned.iter().zip(points) {
        let diff = *r - *p;
        let norm = diff.norm();
        value += norm;
        // The norm's gradient is undefined at zero; a zero subgradient keeps
        // perfectly cycle-consistent points untouched.
        output_grads.push(if norm > 1e-12 {
            diff * (1.0 / (n * norm))
        } else {
            Point3::ZERO
        });
    }
    value /= n;
    let (grads_bwd, adjoint) = step_backward(params, tape_bwd, &output_grads)?;
    let (grads_fwd, _) = step_backward(params, tape_fwd, &adjoint)?;
    let grads = grads_fwd
        .iter()
        .zip(&grads_bwd)
        .map(|(a, b)| a + b)
        .collect();
    Ok((value, grads))
}

/// Unweighted cycle-consistency value and gradients over the anchor frame's
/// own points. The α weight is applied by the caller.
pub fn cycle_consistency(
    params: &PriorParams,
    seq: &FrameSequence,
    t_idx: usize,
) -> Result<(f64, Vec<f64>)> {
    cycle_with_points(params, seq, t_idx, &seq.frame(t_idx)?.points)
}

fn subsample_points<R: Rng>(points: &[Point3], cap: Option<usize>, rng: &mut R) -> Vec<Point3> {
    match cap {
        Some(cap) if points.len() > cap => {
            let mut picked = rand::seq::index::sample(rng, points.len(), cap).into_vec();
            picked.sort_unstable();
            picked.iter().map(|&i| points[i]).collect()
        }
        _ => points.to_vec(),
    }
}

/// The rollout offsets contributing to the objective at `t_idx`.
fn offsets_in_range(seq: &FrameSequence, t_idx: usize, cfg: &LossConfig) -> Vec<i32> {
    let w = if cfg.no_multi_k { 1 } else { cfg.window as i32 };
    let n = seq.last_frame() as i64;
    (-w..=w)
        .filter(|&k| k != 0)
        .filter(|&k| {
            let target = t_idx as i64 + k as i64;
            (0..=n).contains(&target)
        })
        .collect()
}

struct SideChain {
    /// Positions after step j (1-based depth j+1).
    positions: Vec<Vec<Point3>>,
    /// Present only when gradients were requested.
    tapes: Option<Vec<Tape>>,
}

fn roll_side(
    params: &PriorParams,
    seq: &FrameSequence,
    t_idx: usize,
    sign: i32,
    depth: usize,
    anchor: &[Point3],
    with_tapes: bool,
) -> Result<SideChain> {
    let direction = Direction::from_step(sign);
    let mut positions = Vec::with_capacity(depth);
    let mut tapes = with_tapes.then(Vec::new);
    let mut current = anchor.to_vec();
    for j in 0..depth {
        let frame = (t_idx as i64 + j as i64 * sign as i64) as usize;
        let t = normalized_time(seq, frame)?;
        let (next, tape) = euler_step_with_tape(params, &current, t, direction)?;
        if let Some(tapes) = tapes.as_mut() {
            tapes.push(tape);
        }
        positions.push(next.clone());
        current = next;
    }
    Ok(SideChain { positions, tapes })
}

fn objective_impl<R: Rng>(
    params: &PriorParams,
    seq: &FrameSequence,
    t_idx: usize,
    cfg: &LossConfig,
    rng: Option<&mut R>,
    with_grads: bool,
) -> Result<(LossBreakdown, Option<Vec<f64>>)> {
    cfg.validate()?;
    let n_frames = seq.last_frame();
    if t_idx > n_frames {
        return Err(Error::FrameOutOfRange {
            frame: t_idx as i64,
            max: n_frames,
        });
    }
    let anchor_frame = seq.frame(t_idx)?;
    if anchor_frame.is_empty() {
        return Err(Error::EmptyPointSet);
    }

    // One subsampling pass per evaluation; absent a cap (or an rng) the full
    // clouds are used.
    let cap = cfg.max_points_per_frame;
    let mut rng = rng;
    let mut pick = |points: &[Point3]| -> Vec<Point3> {
        match rng.as_mut() {
            Some(r) => subsample_points(points, cap, *r),
            None => points.to_vec(),
        }
    };
    let anchor = pick(&anchor_frame.points);

    let offsets = offsets_in_range(seq, t_idx, cfg);
    let mut chamfer_terms = BTreeMap::new();
    let mut grads = with_grads.then(|| vec![0.0; params.len()]);

    for sign in [1i32, -1] {
        let depths: Vec<usize> = offsets
            .iter()
            .filter(|&&k| k.signum() == sign)
            .map(|&k| k.unsigned_abs() as usize)
            .collect();
        let Some(&max_depth) = depths.iter().max() else {
            continue;
        };
        let chain = roll_side(params, seq, t_idx, sign, max_depth, &anchor, with_grads)?;

        let mut depth_grads: Vec<Option<Vec<Point3>>> = vec![None; max_depth];
        for &depth in &depths {
            let k = sign * depth as i32;
            let target_frame = (t_idx as i64 + k as i64) as usize;
            let full_target = seq.frame(target_frame)?;
            if full_target.is_empty() {
                return Err(Error::EmptyPointSet);
            }
            let target = PointCloud::from_points(
                pick(&full_target.points),
                full_target.frame_index,
                full_target.timestamp,
            );
            let target_index = build_index(&target)?;
            let (value, pred_grads) = truncated_chamfer(
                &chain.positions[depth - 1],
                &target_index,
                &target,
                cfg.truncation_radius,
            )?;
            chamfer_terms.insert(k, value);
            depth_grads[depth - 1] = Some(pred_grads);
        }

        if let (Some(grads), Some(mut tapes)) = (grads.as_mut(), chain.tapes) {
            let mut adjoint = vec![Point3::ZERO; anchor.len()];
            for j in (0..max_depth).rev() {
                if let Some(g) = &depth_grads[j] {
                    for (a, b) in adjoint.iter_mut().zip(g) {
                        *a += *b;
                    }
                }
                let tape = tapes.pop().expect("one tape per step");
                let (param_grads, chained) = step_backward(params, tape, &adjoint)?;
                for (t, g) in grads.iter_mut().zip(&param_grads) {
                    *t += g;
                }
                adjoint = chained;
            }
        }
    }

    let mut cycle_term = 0.0;
    if !cfg.no_cycle && t_idx + 1 <= n_frames {
        let (value, cycle_grads) = cycle_with_points(params, seq, t_idx, &anchor)?;
        cycle_term = cfg.cycle_weight * value;
        if let Some(grads) = grads.as_mut() {
            for (t, g) in grads.iter_mut().zip(&cycle_grads) {
                *t += cfg.cycle_weight * g;
            }
        }
    }

    Ok((LossBreakdown::from_parts(chamfer_terms, cycle_term), grads))
}

/// Objective value and parameter gradients for one anchor frame: truncated
/// Chamfer between its rollouts and each in-range frame within the window,
/// plus the weighted cycle term. Out-of-range offsets are skipped. The rng
/// drives the per-step subsampling when a cap is configured.
pub fn frame_objective<R: Rng>(
    params: &PriorParams,
    seq: &FrameSequence,
    t_idx: usize,
    cfg: &LossConfig,
    rng: &mut R,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let (breakdown, grads) = objective_impl(params, seq, t_idx, cfg, Some(rng), true)?;
    Ok((breakdown, grads.expect("gradients requested")))
}

/// Full-sequence objective: the sum of every anchor frame's objective,
/// without gradients and without subsampling (the cap only randomizes
/// individual optimization steps). Used for early stopping and reporting.
pub fn total_objective(
    params: &PriorParams,
    seq: &FrameSequence,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let mut total = 0.0;
    let mut chamfer_terms: BTreeMap<i32, f64> = BTreeMap::new();
    let mut cycle_term = 0.0;
    for t_idx in 0..=seq.last_frame() {
        let (breakdown, _) =
            objective_impl::<rand::rngs::ThreadRng>(params, seq, t_idx, cfg, None, false)?;
        total += breakdown.total;
        for (k, v) in breakdown.chamfer_terms {
            *chamfer_terms.entry(k).or_insert(0.0) += v;
        }
        cycle_term += breakdown.cycle_term;
    }
    Ok(LossBreakdown {
        total,
        chamfer_terms,
        cycle_term,
    })
}
