//! Adam optimization over the prior, with epoch scheduling, early stopping,
//! and checkpoint persistence.
//!
//! One epoch visits every anchor frame once in a seeded random permutation
//! and takes one Adam step per anchor from that frame's objective gradient.
//! Early stopping watches the full-sequence objective once per epoch and
//! returns the best parameters seen.
//!
//! The optimization schedule (per-frame stochastic steps, learning rate,
//! epoch budget) is an artifact of this implementation, sized for desk-scale
//! scenes; see the README for the default constants.

use crate::error::{Error, Result};
use crate::geom::FrameSequence;
use crate::loss::{frame_objective, total_objective, LossBreakdown, LossConfig};
use crate::prior::{init_params, param_count, PriorConfig, PriorParams};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

/// Checkpoint file magic bytes.
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EULF";
/// Checkpoint format version.
pub const CHECKPOINT_VERSION: u16 = 1;

/// Optimizer schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Epochs without a `min_delta` improvement of the total objective
    /// before stopping.
    pub patience: usize,
    pub min_delta: f64,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            max_epochs: 2000,
            patience: 100,
            min_delta: 1e-6,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.patience < 1 {
            return Err(Error::InvalidConfig("patience must be at least 1".into()));
        }
        if self.max_epochs < 1 {
            return Err(Error::InvalidConfig("max epochs must be at least 1".into()));
        }
        for (name, beta) in [("beta1", self.adam_beta1), ("beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&beta) {
                return Err(Error::InvalidConfig(format!(
                    "adam {name} must lie in [0, 1), got {beta}"
                )));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::InvalidConfig("adam epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Adam moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl AdamState {
    pub fn new(param_count: usize, cfg: &TrainConfig) -> Self {
        AdamState {
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            step: 0,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update with bias-corrected moments, in place.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    learning_rate: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::GradientDiverged);
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= learning_rate * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

/// Objective values of one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    /// Full-sequence objective after the epoch's updates.
    pub breakdown: LossBreakdown,
    /// Wall-clock duration of the epoch. Excluded from determinism
    /// comparisons and never written to run logs.
    pub seconds: f64,
}

/// Per-epoch trace of a fit.
#[derive(Debug, Clone, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

fn diverged(epoch: usize, best_epoch: usize, best: PriorParams) -> Error {
    Error::Diverged {
        epoch,
        last_good_epoch: best_epoch,
        best_params: Box::new(best),
    }
}

/// Fits the prior to the sequence. Returns the best-so-far parameters (by
/// total objective) and the per-epoch history. Deterministic given the
/// configs and seeds.
pub fn fit(
    seq: &FrameSequence,
    prior_cfg: &PriorConfig,
    loss_cfg: &LossConfig,
    train_cfg: &TrainConfig,
    mut progress: impl FnMut(&EpochRecord),
) -> Result<(PriorParams, TrainHistory)> {
    prior_cfg.validate()?;
    loss_cfg.validate()?;
    train_cfg.validate()?;

    let mut params = init_params(prior_cfg)?;
    let mut state = AdamState::new(params.len(), train_cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let mut history = TrainHistory::default();

    // Pre-training baseline so a fit that only hurts still returns the
    // untouched initialization.
    let mut best_params = params.clone();
    let mut best_total = total_objective(&params, seq, loss_cfg)?.total;
    let mut best_epoch = 0usize;
    let mut epochs_since_improvement = 0usize;

    let mut anchors: Vec<usize> = (0..=seq.last_frame()).collect();
    for epoch in 1..=train_cfg.max_epochs {
        let started = Instant::now();
        anchors.shuffle(&mut rng);
        for &t_idx in &anchors {
            let (breakdown, grads) = match frame_objective(&params, seq, t_idx, loss_cfg, &mut rng)
            {
                Ok(ok) => ok,
                Err(Error::PriorDiverged) => {
                    return Err(diverged(epoch, best_epoch, best_params))
                }
                Err(e) => return Err(e),
            };
            if !breakdown.total.is_finite() {
                return Err(diverged(epoch, best_epoch, best_params));
            }
            match adam_step(
                params.values_mut(),
                &grads,
                &mut state,
                train_cfg.learning_rate,
            ) {
                Ok(()) => {}
                Err(Error::GradientDiverged) => {
                    return Err(diverged(epoch, best_epoch, best_params))
                }
                Err(e) => return Err(e),
            }
        }
        let breakdown = match total_objective(&params, seq, loss_cfg) {
            Ok(b) => b,
            Err(Error::PriorDiverged) => return Err(diverged(epoch, best_epoch, best_params)),
            Err(e) => return Err(e),
        };
        if !breakdown.total.is_finite() {
            return Err(diverged(epoch, best_epoch, best_params));
        }
        if breakdown.total < best_total - train_cfg.min_delta {
            best_total = breakdown.total;
            best_params = params.clone();
            best_epoch = epoch;
            epochs_since_improvement = 0;
        } else {
            epochs_since_improvement += 1;
        }
        let record = EpochRecord {
            epoch,
            breakdown,
            seconds: started.elapsed().as_secs_f64(),
        };
        progress(&record);
        history.epochs.push(record);
        if epochs_since_improvement >= train_cfg.patience {
            break;
        }
    }
    Ok((best_params, history))
}

/// Writes the parameters in the binary checkpoint format, atomically
/// (temp file then rename).
///
/// Layout, all integers little-endian: magic `EULF`, version u16, depth u16,
/// width u16, parameter count u64, then the flat parameters as
/// little-endian f64.
pub fn save_checkpoint(params: &PriorParams, path: &Path) -> Result<()> {
    let mut bytes =
        Vec::with_capacity(4 + 2 + 2 + 2 + 8 + params.len() * std::mem::size_of::<f64>());
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(params.depth() as u16).to_le_bytes());
    bytes.extend_from_slice(&(params.width() as u16).to_le_bytes());
    bytes.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for v in params.values() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let tmp = path.with_extension("tmp");
    let ctx = || format!("writing checkpoint {}", path.display());
    let mut file = fs::File::create(&tmp).map_err(|e| Error::io(ctx(), e))?;
    file.write_all(&bytes).map_err(|e| Error::io(ctx(), e))?;
    file.sync_all().map_err(|e| Error::io(ctx(), e))?;
    drop(file);
    fs::rename(&tmp, path).map_err(|e| Error::io(ctx(), e))?;
    Ok(())
}

/// Reads a checkpoint back. The returned config reconstructs the topology;
/// its seed is zero (the file does not store one).
pub fn load_checkpoint(path: &Path) -> Result<(PriorParams, PriorConfig)> {
    let ctx = || format!("reading checkpoint {}", path.display());
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::io(ctx(), e))?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(ctx(), e))?;
    let header_len = 4 + 2 + 2 + 2 + 8;
    if bytes.len() < header_len {
        return Err(Error::CheckpointFormat(format!(
            "file too short: {} bytes",
            bytes.len()
        )));
    }
    if &bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(Error::CheckpointFormat("bad magic bytes".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointFormat(format!(
            "unsupported version {version}"
        )));
    }
    let depth = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    let width = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let count = u64::from_le_bytes(bytes[10..18].try_into().unwrap()) as usize;
    if depth < 1 || width < 1 {
        return Err(Error::CheckpointFormat(format!(
            "invalid topology: depth {depth} width {width}"
        )));
    }
    if count != param_count(depth, width) {
        return Err(Error::CheckpointFormat(format!(
            "parameter count {count} does not match depth {depth} width {width} (expected {})",
            param_count(depth, width)
        )));
    }
    let expected_len = header_len + count * std::mem::size_of::<f64>();
    if bytes.len() != expected_len {
        return Err(Error::CheckpointFormat(format!(
            "expected {expected_len} bytes for {count} parameters, found {}",
            bytes.len()
        )));
    }
    let values: Vec<f64> = bytes[header_len..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let params = PriorParams::from_values(depth, width, values)?;
    Ok((
        params,
        PriorConfig {
            depth,
            width,
            seed: 0,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{Point3, PointCloud};
    use crate::ode::extract_flow;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_static_seq(seed: u64, frames: usize, n: usize) -> FrameSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points: Vec<Point3> = (0..n)
            .map(|_| {
                Point3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )
            })
            .collect();
        FrameSequence::new(
            (0..frames)
                .map(|i| PointCloud::from_points(points.clone(), i, i as f64 * 0.1))
                .collect(),
            0.1,
        )
        .unwrap()
    }

    #[test]
    fn zero_gradients_leave_params_unchanged() {
        let cfg = TrainConfig::default();
        let mut params = vec![0.25, -0.5, 1.0];
        let mut state = AdamState::new(3, &cfg);
        adam_step(&mut params, &[0.0, 0.0, 0.0], &mut state, 0.01).unwrap();
        assert_eq!(params, vec![0.25, -0.5, 1.0]);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn first_step_equals_hand_computed_update() {
        // With a unit gradient the bias-corrected moments are exactly 1, so
        // the first update is lr / (1 + eps).
        let cfg = TrainConfig::default();
        let mut params = vec![0.7];
        let mut state = AdamState::new(1, &cfg);
        adam_step(&mut params, &[1.0], &mut state, 0.01).unwrap();
        let expected = 0.7 - 0.01 * 1.0 / (1.0 + cfg.adam_eps);
        assert_eq!(params[0], expected);
    }

    #[test]
    fn adam_is_deterministic() {
        let cfg = TrainConfig::default();
        let run = || {
            let mut params = vec![0.3, -0.9];
            let mut state = AdamState::new(2, &cfg);
            for _ in 0..5 {
                adam_step(&mut params, &[0.17, -0.03], &mut state, 0.002).unwrap();
            }
            (params, state)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn adam_rejects_bad_inputs() {
        let cfg = TrainConfig::default();
        let mut state = AdamState::new(2, &cfg);
        let mut params = vec![0.0, 0.0];
        assert!(matches!(
            adam_step(&mut params, &[1.0], &mut state, 0.01),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(matches!(
            adam_step(&mut params, &[f64::NAN, 0.0], &mut state, 0.01),
            Err(Error::GradientDiverged)
        ));
    }

    #[test]
    fn fit_drives_a_static_scene_to_near_zero_flow() {
        let seq = small_static_seq(1, 4, 30);
        let prior_cfg = PriorConfig {
            depth: 2,
            width: 16,
            seed: 3,
        };
        let loss_cfg = LossConfig::default();
        let train_cfg = TrainConfig {
            max_epochs: 60,
            patience: 60,
            seed: 3,
            ..TrainConfig::default()
        };
        let (params, history) = fit(&seq, &prior_cfg, &loss_cfg, &train_cfg, |_| {}).unwrap();
        let last = history.epochs.last().unwrap();
        assert!(
            last.breakdown.total < history.epochs[0].breakdown.total,
            "objective did not decrease"
        );
        let flow = extract_flow(&params, &seq, 0, 1).unwrap();
        let max_mag = flow
            .residuals
            .iter()
            .map(|r| r.norm())
            .fold(0.0, f64::max);
        assert!(max_mag < 0.01, "residual magnitude {max_mag}");
    }

    #[test]
    fn fit_is_deterministic_given_seed() {
        let seq = small_static_seq(2, 3, 15);
        let prior_cfg = PriorConfig {
            depth: 2,
            width: 8,
            seed: 9,
        };
        let loss_cfg = LossConfig::default();
        let train_cfg = TrainConfig {
            max_epochs: 8,
            patience: 8,
            seed: 4,
            ..TrainConfig::default()
        };
        let (params_a, hist_a) = fit(&seq, &prior_cfg, &loss_cfg, &train_cfg, |_| {}).unwrap();
        let (params_b, hist_b) = fit(&seq, &prior_cfg, &loss_cfg, &train_cfg, |_| {}).unwrap();
        assert_eq!(params_a, params_b);
        assert_eq!(hist_a.epochs.len(), hist_b.epochs.len());
        for (a, b) in hist_a.epochs.iter().zip(&hist_b.epochs) {
            assert_eq!(a.breakdown, b.breakdown);
            assert_eq!(a.epoch, b.epoch);
        }
    }

    #[test]
    fn fit_returns_the_best_logged_params() {
        let seq = small_static_seq(5, 3, 12);
        let prior_cfg = PriorConfig {
            depth: 2,
            width: 8,
            seed: 1,
        };
        let loss_cfg = LossConfig::default();
        let train_cfg = TrainConfig {
            max_epochs: 12,
            patience: 12,
            seed: 1,
            ..TrainConfig::default()
        };
        let (params, history) = fit(&seq, &prior_cfg, &loss_cfg, &train_cfg, |_| {}).unwrap();
        let returned_total = total_objective(&params, &seq, &loss_cfg).unwrap().total;
        for record in &history.epochs {
            assert!(returned_total <= record.breakdown.total + 1e-9);
        }
    }

    #[test]
    fn diverging_fit_retains_the_best_checkpoint() {
        let seq = small_static_seq(6, 3, 10);
        let prior_cfg = PriorConfig {
            depth: 2,
            width: 8,
            seed: 2,
        };
        let loss_cfg = LossConfig::default();
        let train_cfg = TrainConfig {
            learning_rate: 1e30,
            max_epochs: 10,
            patience: 10,
            seed: 2,
            ..TrainConfig::default()
        };
        match fit(&seq, &prior_cfg, &loss_cfg, &train_cfg, |_| {}) {
            Err(Error::Diverged {
                epoch, best_params, ..
            }) => {
                assert!(epoch >= 1);
                assert!(best_params.values().iter().all(|v| v.is_finite()));
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let params = init_params(&PriorConfig {
            depth: 3,
            width: 12,
            seed: 77,
        })
        .unwrap();
        save_checkpoint(&params, &path).unwrap();
        let (loaded, cfg) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, params);
        assert_eq!((cfg.depth, cfg.width), (3, 12));
    }

    #[test]
    fn checkpoint_size_matches_shape_arithmetic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let params = init_params(&PriorConfig {
            depth: 8,
            width: 128,
            seed: 0,
        })
        .unwrap();
        save_checkpoint(&params, &path).unwrap();
        let expected = 18 + param_count(8, 128) as u64 * 8;
        assert_eq!(std::fs::metadata(&path).unwrap().len(), expected);
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let params = init_params(&PriorConfig {
            depth: 2,
            width: 4,
            seed: 5,
        })
        .unwrap();
        save_checkpoint(&params, &path).unwrap();

        // Truncated file.
        let bytes = std::fs::read(&path).unwrap();
        let cut = dir.path().join("cut.ckpt");
        std::fs::write(&cut, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(
            load_checkpoint(&cut),
            Err(Error::CheckpointFormat(_))
        ));

        // Bad magic.
        let mut bad = bytes.clone();
        bad[0] = b'X';
        let bad_path = dir.path().join("bad.ckpt");
        std::fs::write(&bad_path, &bad).unwrap();
        assert!(matches!(
            load_checkpoint(&bad_path),
            Err(Error::CheckpointFormat(_))
        ));

        // Count inconsistent with the topology.
        let mut wrong = bytes;
        wrong[10] ^= 0x01;
        let wrong_path = dir.path().join("wrong.ckpt");
        std::fs::write(&wrong_path, &wrong).unwrap();
        assert!(matches!(
            load_checkpoint(&wrong_path),
            Err(Error::CheckpointFormat(_))
        ));
    }
}
