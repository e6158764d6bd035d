//! Exact nearest-neighbor queries over a point cloud.
//!
//! A median-split kd-tree whose answers are guaranteed to match a
//! brute-force scan, including the tie-break rule: when several points are
//! equidistant from the query, the lowest point index wins. That rule keeps
//! Chamfer gradients deterministic.

use super::{Point3, PointCloud};
use crate::error::{Error, Result};

const LEAF_SIZE: usize = 16;

#[derive(Debug, Clone, PartialEq)]
enum Node {
    /// Range into `order`.
    Leaf { start: u32, end: u32 },
    Split {
        axis: u8,
        value: f64,
        left: u32,
        right: u32,
    },
}

/// Immutable spatial index over one cloud's points. Safe for concurrent
/// read-only queries.
#[derive(Debug, Clone, PartialEq)]
pub struct NearestIndex {
    points: Vec<Point3>,
    order: Vec<u32>,
    nodes: Vec<Node>,
    root: u32,
}

impl NearestIndex {
    /// Number of indexed points.
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

fn coord(p: &Point3, axis: u8) -> f64 {
    match axis {
        0 => p.x,
        1 => p.y,
        _ => p.z,
    }
}

/// Builds the index. Errors on an empty cloud; construction is deterministic
/// given the input.
pub fn build_index(cloud: &PointCloud) -> Result<NearestIndex> {
    if cloud.is_empty() {
        return Err(Error::EmptyPointSet);
    }
    for p in &cloud.points {
        if !p.is_finite() {
            return Err(Error::NonFinite("indexed point"));
        }
    }
    let points = cloud.points.clone();
    let mut order: Vec<u32> = (0..points.len() as u32).collect();
    let mut nodes = Vec::new();
    let root = build_node(&points, &mut order, 0, points.len(), 0, &mut nodes);
    Ok(NearestIndex {
        points,
        order,
        nodes,
        root,
    })
}

fn build_node(
    points: &[Point3],
    order: &mut [u32],
    start: usize,
    end: usize,
    depth: usize,
    nodes: &mut Vec<Node>,
) -> u32 {
    if end - start <= LEAF_SIZE {
        nodes.push(Node::Leaf {
            start: start as u32,
            end: end as u32,
        });
        return (nodes.len() - 1) as u32;
    }
    let axis = (depth % 3) as u8;
    // Sort by (coordinate, index) for a deterministic median split.
    order[start..end].sort_unstable_by(|&a, &b| {
        let ca = coord(&points[a as usize], axis);
        let cb = coord(&points[b as usize], axis);
        ca.partial_cmp(&cb).unwrap().then(a.cmp(&b))
    });
    let mid = start + (end - start) / 2;
    let value = coord(&points[order[mid] as usize], axis);
    let left = build_node(points, order, start, mid, depth + 1, nodes);
    let right = build_node(points, order, mid, end, depth + 1, nodes);
    nodes.push(Node::Split {
        axis,
        value,
        left,
        right,
    });
    (nodes.len() - 1) as u32
}

/// Returns the index of the nearest point and its squared distance.
/// Equidistant candidates resolve to the lowest point index.
pub fn nearest(index: &NearestIndex, query: &Point3) -> Result<(usize, f64)> {
    if !query.is_finite() {
        return Err(Error::NonFinite("nearest-neighbor query"));
    }
    let mut best_idx = u32::MAX;
    let mut best_d2 = f64::INFINITY;
    search(index, index.root, query, &mut best_idx, &mut best_d2);
    Ok((best_idx as usize, best_d2))
}

fn search(index: &NearestIndex, node: u32, query: &Point3, best_idx: &mut u32, best_d2: &mut f64) {
    match &index.nodes[node as usize] {
        Node::Leaf { start, end } => {
            for &i in &index.order[*start as usize..*end as usize] {
                let d2 = index.points[i as usize].squared_distance(query);
                if d2 < *best_d2 || (d2 == *best_d2 && i < *best_idx) {
                    *best_d2 = d2;
                    *best_idx = i;
                }
            }
        }
        Node::Split {
            axis,
            value,
            left,
            right,
        } => {
            let diff = coord(query, *axis) - value;
            let (near, far) = if diff < 0.0 {
                (*left, *right)
            } else {
                (*right, *left)
            };
            search(index, near, query, best_idx, best_d2);
            // An equidistant point with a lower index may sit exactly on the
            // boundary, so prune only on a strict excess.
            if diff * diff <= *best_d2 {
                search(index, far, query, best_idx, best_d2);
            }
        }
    }
}

/// O(n) scan used as the test oracle for [`nearest`]. Same contract,
/// including the lowest-index tie-break.
pub fn nearest_bruteforce(cloud: &PointCloud, query: &Point3) -> Result<(usize, f64)> {
    if cloud.is_empty() {
        return Err(Error::EmptyPointSet);
    }
    if !query.is_finite() {
        return Err(Error::NonFinite("nearest-neighbor query"));
    }
    let mut best_idx = 0usize;
    let mut best_d2 = f64::INFINITY;
    for (i, p) in cloud.points.iter().enumerate() {
        let d2 = p.squared_distance(query);
        if d2 < best_d2 {
            best_d2 = d2;
            best_idx = i;
        }
    }
    Ok((best_idx, best_d2))
}
