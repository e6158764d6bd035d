//! Euler integration over the velocity field.
//!
//! The field is queried once per frame interval: a step moves each point by
//! the field's displacement at the point's current position, the step's
//! source-frame time, and the travel direction. k-step rollouts compose
//! steps to reach frames `k` intervals away, trajectory extraction records
//! the intermediate frames, and the `*_with_grad` variants capture tapes so
//! training can backpropagate through the composed steps.

use crate::error::{Error, Result};
use crate::geom::{normalized_time, FlowVectors, FrameSequence, Point3};
use crate::prior::{self, Direction, PriorParams, QueryBatch, Tape};

/// Tolerated overshoot of normalized time outside `[-1, 1]` before the
/// value is treated as an indexing bug.
pub const TIME_GUARD_BAND: f64 = 1.001;

/// Anything that can serve as the velocity field: the neural prior in
/// production, analytic stubs in tests.
///
/// `displacements` returns meters of motion over one frame interval in the
/// given direction, one vector per input point.
pub trait FlowField {
    fn displacements(
        &self,
        points: &[Point3],
        t_norm: f64,
        direction: Direction,
    ) -> Result<Vec<Point3>>;
}

impl FlowField for PriorParams {
    fn displacements(
        &self,
        points: &[Point3],
        t_norm: f64,
        direction: Direction,
    ) -> Result<Vec<Point3>> {
        let batch = QueryBatch::from_points(points, t_norm, direction)?;
        prior::forward(self, &batch)
    }
}

/// A point's integrated positions over a frame range, in integration order
/// (descending frame indices when tracking backward). The first entry is the
/// initial condition, untouched.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub positions: Vec<(usize, Point3)>,
    pub start_frame: usize,
    pub end_frame: usize,
}

/// Per-step tapes of a differentiable rollout, in step order.
#[derive(Debug)]
pub struct RolloutTape {
    pub(crate) steps: Vec<Tape>,
}

impl RolloutTape {
    pub fn step_count(&self) -> usize {
        self.steps.len()
    }
}

fn clamp_guarded(t_norm: f64) -> Result<f64> {
    if !t_norm.is_finite() || t_norm.abs() > TIME_GUARD_BAND {
        return Err(Error::InvalidConfig(format!(
            "normalized time {t_norm} outside the [-{TIME_GUARD_BAND}, {TIME_GUARD_BAND}] guard band"
        )));
    }
    Ok(t_norm.clamp(-1.0, 1.0))
}

fn check_finite(points: Vec<Point3>) -> Result<Vec<Point3>> {
    if points.iter().any(|p| !p.is_finite()) {
        return Err(Error::PriorDiverged);
    }
    Ok(points)
}

/// One explicit Euler step: `p + field(p, t, direction)` for every point.
pub fn euler_step<F: FlowField + ?Sized>(
    field: &F,
    points: &[Point3],
    t_norm: f64,
    direction: Direction,
) -> Result<Vec<Point3>> {
    let t = clamp_guarded(t_norm)?;
    let disp = field.displacements(points, t, direction)?;
    check_finite(
        points
            .iter()
            .zip(&disp)
            .map(|(p, d)| *p + *d)
            .collect::<Vec<_>>(),
    )
}

/// As [`euler_step`] over the neural prior, recording the tape.
pub(crate) fn euler_step_with_tape(
    params: &PriorParams,
    points: &[Point3],
    t_norm: f64,
    direction: Direction,
) -> Result<(Vec<Point3>, Tape)> {
    let t = clamp_guarded(t_norm)?;
    let batch = QueryBatch::from_points(points, t, direction)?;
    let (disp, tape) = prior::forward_with_tape(params, &batch)?;
    let moved = check_finite(
        points
            .iter()
            .zip(&disp)
            .map(|(p, d)| *p + *d)
            .collect::<Vec<_>>(),
    )?;
    Ok((moved, tape))
}

/// Backpropagates one step: returns the parameter gradients plus the adjoint
/// chained to the step's input points. The chained adjoint carries the
/// identity term of `p + θ(p, ·)` in addition to the field's input gradient.
pub(crate) fn step_backward(
    params: &PriorParams,
    tape: Tape,
    adjoint: &[Point3],
) -> Result<(Vec<f64>, Vec<Point3>)> {
    let (param_grads, input_grads) = prior::backward(params, tape, adjoint)?;
    let chained = adjoint
        .iter()
        .zip(&input_grads)
        .map(|(a, g)| *a + Point3::new(g[0], g[1], g[2]))
        .collect();
    Ok((param_grads, chained))
}

/// The frame indices whose times the |k| successive steps query: step `j`
/// reads the time of frame `source_frame + j * sign(k)`.
fn rollout_frames(seq: &FrameSequence, source_frame: usize, k: i32) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::InvalidConfig("rollout offset k must be nonzero".into()));
    }
    let n = seq.last_frame() as i64;
    let src = source_frame as i64;
    let target = src + k as i64;
    if src > n {
        return Err(Error::FrameOutOfRange { frame: src, max: seq.last_frame() });
    }
    if target < 0 || target > n {
        return Err(Error::FrameOutOfRange {
            frame: target,
            max: seq.last_frame(),
        });
    }
    let sign = k.signum() as i64;
    Ok((0..k.abs() as i64)
        .map(|j| (src + j * sign) as usize)
        .collect())
}

/// Composes |k| Euler steps to carry `points` from `source_frame` to
/// `source_frame + k`.
pub fn euler_rollout<F: FlowField + ?Sized>(
    field: &F,
    seq: &FrameSequence,
    source_frame: usize,
    points: &[Point3],
    k: i32,
) -> Result<Vec<Point3>> {
    let direction = Direction::from_step(k);
    let mut current = points.to_vec();
    for frame in rollout_frames(seq, source_frame, k)? {
        current = euler_step(field, &current, normalized_time(seq, frame)?, direction)?;
    }
    Ok(current)
}

/// Rolls out the source frame's own points and returns the residuals
/// `rollout - source`.
pub fn extract_flow<F: FlowField + ?Sized>(
    field: &F,
    seq: &FrameSequence,
    source_frame: usize,
    k: i32,
) -> Result<FlowVectors> {
    let source = &seq.frame(source_frame)?.points;
    let rolled = euler_rollout(field, seq, source_frame, source, k)?;
    let residuals = rolled
        .iter()
        .zip(source.iter())
        .map(|(r, s)| *r - *s)
        .collect();
    FlowVectors::new(
        residuals,
        source_frame,
        (source_frame as i64 + k as i64) as usize,
    )
}

/// Integrates each start point across every integer frame between
/// `start_frame` and `end_frame` inclusive. Backward tracking
/// (`start_frame > end_frame`) queries the field with direction `-1`.
pub fn extract_trajectory<F: FlowField + ?Sized>(
    field: &F,
    seq: &FrameSequence,
    start_frame: usize,
    start_points: &[Point3],
    end_frame: usize,
) -> Result<Vec<Trajectory>> {
    let n = seq.last_frame();
    for f in [start_frame, end_frame] {
        if f > n {
            return Err(Error::FrameOutOfRange {
                frame: f as i64,
                max: n,
            });
        }
    }
    let mut trajectories: Vec<Trajectory> = start_points
        .iter()
        .map(|p| Trajectory {
            positions: vec![(start_frame, *p)],
            start_frame,
            end_frame,
        })
        .collect();
    if start_frame == end_frame {
        return Ok(trajectories);
    }
    let sign: i64 = if end_frame > start_frame { 1 } else { -1 };
    let direction = Direction::from_step(sign as i32);
    let mut current = start_points.to_vec();
    let mut frame = start_frame as i64;
    while frame != end_frame as i64 {
        current = euler_step(field, &current, normalized_time(seq, frame as usize)?, direction)?;
        frame += sign;
        for (traj, p) in trajectories.iter_mut().zip(&current) {
            traj.positions.push((frame as usize, *p));
        }
    }
    Ok(trajectories)
}

/// As [`euler_rollout`] over the neural prior, recording per-step tapes for
/// [`rollout_backward`].
pub fn euler_rollout_with_grad(
    params: &PriorParams,
    seq: &FrameSequence,
    source_frame: usize,
    points: &[Point3],
    k: i32,
) -> Result<(Vec<Point3>, RolloutTape)> {
    let direction = Direction::from_step(k);
    let mut current = points.to_vec();
    let mut steps = Vec::new();
    for frame in rollout_frames(seq, source_frame, k)? {
        let (next, tape) =
            euler_step_with_tape(params, &current, normalized_time(seq, frame)?, direction)?;
        steps.push(tape);
        current = next;
    }
    Ok((current, RolloutTape { steps }))
}

/// Gradient of `sum(output_grads · final positions)` with respect to the
/// parameters, chained through every step of the rollout.
pub fn rollout_backward(
    params: &PriorParams,
    tape: RolloutTape,
    output_grads: &[Point3],
) -> Result<Vec<f64>> {
    let mut total = vec![0.0; params.len()];
    let mut adjoint = output_grads.to_vec();
    for step in tape.steps.into_iter().rev() {
        let (param_grads, chained) = step_backward(params, step, &adjoint)?;
        for (t, g) in total.iter_mut().zip(&param_grads) {
            *t += g;
        }
        adjoint = chained;
    }
    Ok(total)
}
