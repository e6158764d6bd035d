//! Scene flow estimation for whole point-cloud sequences via a neural ODE
//! velocity field.
//!
//! The estimator fits a small coordinate MLP that maps a 5D space-time-direction
//! query `(x, y, z, t, d)` to a per-frame-interval displacement. The network is
//! optimized against multi-frame truncated-Chamfer reconstruction terms and a
//! forward/backward cycle-consistency term, evaluated by composing explicit
//! Euler steps through the field. Once fitted, the same field yields per-frame
//! flow vectors and long-horizon point tracks by integration.
//!
//! Module map:
//! - [`geom`]: point containers, sequence time mapping, exact nearest-neighbor index
//! - [`prior`]: the coordinate network and its reverse-mode gradients
//! - [`ode`]: Euler steps, k-step rollouts, trajectory extraction, differentiable rollouts
//! - [`loss`]: truncated Chamfer + cycle-consistency objective and its gradients
//! - [`train`]: Adam loop, early stopping, checkpoints
//! - [`eval`]: endpoint-error metrics and the class/speed-normalized report
//! - [`scenegen`]: deterministic synthetic scenes with analytic ground truth
//! - [`io`] / [`cli`]: on-disk formats and the command surface

pub mod cli;
pub mod error;
pub mod eval;
pub mod geom;
pub mod io;
pub mod loss;
pub mod ode;
pub mod prior;
pub mod scenegen;
pub mod train;

pub use error::{Error, Result};
pub use geom::{FlowVectors, FrameSequence, NearestIndex, Point3, PointCloud};
pub use prior::{Direction, PriorConfig, PriorParams};
