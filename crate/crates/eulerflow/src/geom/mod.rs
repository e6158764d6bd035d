//! Point-cloud containers, sequence time mapping, and the exact
//! nearest-neighbor index used by the Chamfer loss.

mod kdtree;

pub use kdtree::{build_index, nearest, nearest_bruteforce, NearestIndex};

use crate::error::{Error, Result};
use std::ops::{Add, AddAssign, Mul, Neg, Sub};

/// Tolerance for the uniform-timestamp-spacing invariant, in seconds.
pub const TIMESTAMP_SPACING_TOL: f64 = 1e-9;

/// A 3D point or displacement in meters. All coordinates must stay finite.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const ZERO: Point3 = Point3 {
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Point3 { x, y, z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn dot(&self, other: &Point3) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn squared_norm(&self) -> f64 {
        self.dot(self)
    }

    pub fn norm(&self) -> f64 {
        self.squared_norm().sqrt()
    }

    pub fn squared_distance(&self, other: &Point3) -> f64 {
        (*self - *other).squared_norm()
    }

    pub fn distance(&self, other: &Point3) -> f64 {
        self.squared_distance(other).sqrt()
    }
}

impl Add for Point3 {
    type Output = Point3;
    fn add(self, rhs: Point3) -> Point3 {
        Point3::new(self.x + rhs.x, self.y + rhs.y, self.z + rhs.z)
    }
}

impl AddAssign for Point3 {
    fn add_assign(&mut self, rhs: Point3) {
        self.x += rhs.x;
        self.y += rhs.y;
        self.z += rhs.z;
    }
}

impl Sub for Point3 {
    type Output = Point3;
    fn sub(self, rhs: Point3) -> Point3 {
        Point3::new(self.x - rhs.x, self.y - rhs.y, self.z - rhs.z)
    }
}

impl Mul<f64> for Point3 {
    type Output = Point3;
    fn mul(self, rhs: f64) -> Point3 {
        Point3::new(self.x * rhs, self.y * rhs, self.z * rhs)
    }
}

impl Neg for Point3 {
    type Output = Point3;
    fn neg(self) -> Point3 {
        Point3::new(-self.x, -self.y, -self.z)
    }
}

/// One observed frame: positions plus optional per-point ground truth.
///
/// `gt_flow` holds the true residual to the next frame in meters per frame
/// interval; `class_id` and `is_dynamic` carry evaluation labels. Optional
/// lists, when present, must have one entry per point.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3>,
    pub gt_flow: Option<Vec<Point3>>,
    pub class_id: Option<Vec<u32>>,
    pub is_dynamic: Option<Vec<bool>>,
    pub frame_index: usize,
    /// Seconds.
    pub timestamp: f64,
}

impl PointCloud {
    /// A cloud with positions only.
    pub fn from_points(points: Vec<Point3>, frame_index: usize, timestamp: f64) -> Self {
        PointCloud {
            points,
            gt_flow: None,
            class_id: None,
            is_dynamic: None,
            frame_index,
            timestamp,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for p in &self.points {
            if !p.is_finite() {
                return Err(Error::NonFinite("point cloud position"));
            }
        }
        let n = self.points.len();
        let check = |name: &str, len: Option<usize>| -> Result<()> {
            match len {
                Some(l) if l != n => Err(Error::InvalidSequence(format!(
                    "frame {}: {name} has {l} entries for {n} points",
                    self.frame_index
                ))),
                _ => Ok(()),
            }
        };
        check("gt_flow", self.gt_flow.as_ref().map(Vec::len))?;
        check("class_id", self.class_id.as_ref().map(Vec::len))?;
        check("is_dynamic", self.is_dynamic.as_ref().map(Vec::len))?;
        if let Some(flow) = &self.gt_flow {
            for f in flow {
                if !f.is_finite() {
                    return Err(Error::NonFinite("ground-truth flow"));
                }
            }
        }
        Ok(())
    }
}

/// An ordered sequence of frames with uniform time spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    frames: Vec<PointCloud>,
    /// Seconds between adjacent frames.
    frame_interval: f64,
}

impl FrameSequence {
    /// Validates and wraps the frames: at least two of them, indices
    /// `0..=N` consecutive, timestamps strictly increasing with spacing
    /// `frame_interval` (within [`TIMESTAMP_SPACING_TOL`]).
    pub fn new(frames: Vec<PointCloud>, frame_interval: f64) -> Result<Self> {
        if frames.len() < 2 {
            return Err(Error::InvalidSequence(format!(
                "need at least 2 frames, got {}",
                frames.len()
            )));
        }
        if !(frame_interval.is_finite() && frame_interval > 0.0) {
            return Err(Error::InvalidSequence(format!(
                "frame interval must be positive and finite, got {frame_interval}"
            )));
        }
        for (i, frame) in frames.iter().enumerate() {
            frame.validate()?;
            if frame.frame_index != i {
                return Err(Error::InvalidSequence(format!(
                    "frame at position {i} carries index {}",
                    frame.frame_index
                )));
            }
            if i > 0 {
                let spacing = frame.timestamp - frames[i - 1].timestamp;
                if spacing <= 0.0 || (spacing - frame_interval).abs() > TIMESTAMP_SPACING_TOL {
                    return Err(Error::InvalidSequence(format!(
                        "timestamp spacing {spacing} between frames {} and {i} does not match \
                         frame interval {frame_interval}",
                        i - 1
                    )));
                }
            }
        }
        Ok(FrameSequence {
            frames,
            frame_interval,
        })
    }

    pub fn frames(&self) -> &[PointCloud] {
        &self.frames
    }

    pub fn frame(&self, index: usize) -> Result<&PointCloud> {
        self.frames.get(index).ok_or(Error::FrameOutOfRange {
            frame: index as i64,
            max: self.last_frame(),
        })
    }

    pub fn frame_interval(&self) -> f64 {
        self.frame_interval
    }

    /// The highest frame index, i.e. `frames.len() - 1`.
    pub fn last_frame(&self) -> usize {
        self.frames.len() - 1
    }
}

/// Estimated per-point residuals from a source frame to a target frame,
/// in meters. One residual per source-frame point.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowVectors {
    pub residuals: Vec<Point3>,
    pub source_frame: usize,
    pub target_frame: usize,
}

impl FlowVectors {
    pub fn new(residuals: Vec<Point3>, source_frame: usize, target_frame: usize) -> Result<Self> {
        if source_frame == target_frame {
            return Err(Error::InvalidSequence(
                "flow source and target frames must differ".into(),
            ));
        }
        Ok(FlowVectors {
            residuals,
            source_frame,
            target_frame,
        })
    }
}

/// Maps a frame index to the sequence-normalized time in `[-1, 1]`:
/// frame 0 maps to -1, the last frame to +1, affinely in between.
pub fn normalized_time(seq: &FrameSequence, frame_index: usize) -> Result<f64> {
    let n = seq.last_frame();
    if frame_index > n {
        return Err(Error::FrameOutOfRange {
            frame: frame_index as i64,
            max: n,
        });
    }
    Ok(-1.0 + 2.0 * frame_index as f64 / n as f64)
}

/// The normalized-time step between adjacent frames, `2 / N`.
pub fn normalized_step(seq: &FrameSequence) -> f64 {
    2.0 / seq.last_frame() as f64
}
