//! The coordinate-network neural prior.
//!
//! A fixed-topology fully connected ReLU network maps a 5D
//! space-time-direction query `(x, y, z, t, d)` to a 3D displacement,
//! interpreted as meters of motion over one frame interval in direction `d`.
//! Positions are fed in raw meters, time is sequence-normalized to `[-1, 1]`,
//! and `d` is `+1` for forward motion and `-1` for backward motion, so a
//! single set of parameters serves both integration directions.
//!
//! [`backward`] produces exact reverse-mode gradients with respect to both
//! the parameters and the 5D inputs; input gradients are what lets rollouts
//! chain through composed Euler steps.

use crate::error::{Error, Result};
use crate::geom::Point3;
use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Rows are `(x, y, z, t, d)`.
pub const INPUT_DIM: usize = 5;
/// Displacement components.
pub const OUTPUT_DIM: usize = 3;

/// Network topology and initialization seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PriorConfig {
    /// Number of hidden layers.
    pub depth: usize,
    /// Neurons per hidden layer.
    pub width: usize,
    pub seed: u64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            depth: 8,
            width: 128,
            seed: 0,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 || self.width < 1 {
            return Err(Error::InvalidConfig(format!(
                "prior depth and width must be at least 1, got depth {} width {}",
                self.depth, self.width
            )));
        }
        Ok(())
    }
}

/// Integration direction, encoded as the network's fifth input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Backward,
    Forward,
}

impl Direction {
    /// The value fed to the network: `-1` backward, `+1` forward.
    pub fn flag(self) -> f64 {
        match self {
            Direction::Backward => -1.0,
            Direction::Forward => 1.0,
        }
    }

    /// Direction of a signed frame offset.
    pub fn from_step(k: i32) -> Direction {
        if k < 0 {
            Direction::Backward
        } else {
            Direction::Forward
        }
    }
}

/// The dimensions of each linear layer, in order: `5 -> width`,
/// `depth - 1` times `width -> width`, then `width -> 3`. Every layer has a
/// bias.
fn layer_dims(depth: usize, width: usize) -> Vec<(usize, usize)> {
    let mut dims = Vec::with_capacity(depth + 1);
    dims.push((INPUT_DIM, width));
    for _ in 1..depth {
        dims.push((width, width));
    }
    dims.push((width, OUTPUT_DIM));
    dims
}

/// Total parameter count implied by the topology.
pub fn param_count(depth: usize, width: usize) -> usize {
    layer_dims(depth, width)
        .iter()
        .map(|(i, o)| i * o + o)
        .sum()
}

/// Flat parameter vector of the prior, `θ`.
///
/// Layout: layers in order, each as its weight matrix in row-major
/// `(output, input)` order followed by its bias vector.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorParams {
    depth: usize,
    width: usize,
    values: Vec<f64>,
}

impl PriorParams {
    /// Wraps an existing flat vector, checking the shape-implied length and
    /// finiteness.
    pub fn from_values(depth: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        PriorConfig {
            depth,
            width,
            seed: 0,
        }
        .validate()?;
        let expect = param_count(depth, width);
        if values.len() != expect {
            return Err(Error::ShapeMismatch(format!(
                "expected {expect} parameters for depth {depth} width {width}, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("prior parameter"));
        }
        Ok(PriorParams {
            depth,
            width,
            values,
        })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    fn dims(&self) -> Vec<(usize, usize)> {
        layer_dims(self.depth, self.width)
    }

    /// Start offset of layer `l`'s weights in the flat vector.
    fn layer_offset(&self, l: usize) -> usize {
        self.dims()[..l].iter().map(|(i, o)| i * o + o).sum()
    }

    fn layer(&self, l: usize) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>) {
        let (inn, out) = self.dims()[l];
        let off = self.layer_offset(l);
        let w = ArrayView2::from_shape((out, inn), &self.values[off..off + inn * out]).unwrap();
        let b = ArrayView1::from(&self.values[off + inn * out..off + inn * out + out]);
        (w, b)
    }
}

/// Mutable weight/bias views of layer `l` inside a flat gradient buffer.
fn grad_layer_mut(
    grads: &mut [f64],
    depth: usize,
    width: usize,
    l: usize,
) -> (ArrayViewMut2<'_, f64>, ArrayViewMut1<'_, f64>) {
    let dims = layer_dims(depth, width);
    let off: usize = dims[..l].iter().map(|(i, o)| i * o + o).sum();
    let (inn, out) = dims[l];
    let (w_slice, rest) = grads[off..off + inn * out + out].split_at_mut(inn * out);
    (
        ArrayViewMut2::from_shape((out, inn), w_slice).unwrap(),
        ArrayViewMut1::from(rest),
    )
}

/// Draws initial parameters: per-layer uniform weights in
/// `[-sqrt(6 / fan_in), +sqrt(6 / fan_in)]`, zero biases. Deterministic
/// given the seed.
pub fn init_params(config: &PriorConfig) -> Result<PriorParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut values = Vec::with_capacity(param_count(config.depth, config.width));
    for (inn, out) in layer_dims(config.depth, config.width) {
        let s = (6.0 / inn as f64).sqrt();
        for _ in 0..inn * out {
            values.push(rng.random_range(-s..=s));
        }
        values.extend(std::iter::repeat(0.0).take(out));
    }
    PriorParams::from_values(config.depth, config.width, values)
}

/// A batch of 5D queries, one network evaluation per row.
#[derive(Debug, Clone)]
pub struct QueryBatch {
    data: Array2<f64>,
}

impl QueryBatch {
    pub fn new(rows: &[[f64; INPUT_DIM]]) -> Result<Self> {
        for row in rows {
            if row[..4].iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("query batch row"));
            }
            if row[4] != 1.0 && row[4] != -1.0 {
                return Err(Error::InvalidConfig(format!(
                    "direction flag must be exactly -1 or +1, got {}",
                    row[4]
                )));
            }
        }
        let mut data = Array2::zeros((rows.len(), INPUT_DIM));
        for (i, row) in rows.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                data[[i, j]] = *v;
            }
        }
        Ok(QueryBatch { data })
    }

    /// All rows share one time and direction; positions come from `points`.
    pub fn from_points(points: &[Point3], t_norm: f64, direction: Direction) -> Result<Self> {
        if !t_norm.is_finite() {
            return Err(Error::NonFinite("query time"));
        }
        let d = direction.flag();
        let mut data = Array2::zeros((points.len(), INPUT_DIM));
        for (i, p) in points.iter().enumerate() {
            if !p.is_finite() {
                return Err(Error::NonFinite("query position"));
            }
            data[[i, 0]] = p.x;
            data[[i, 1]] = p.y;
            data[[i, 2]] = p.z;
            data[[i, 3]] = t_norm;
            data[[i, 4]] = d;
        }
        Ok(QueryBatch { data })
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Record of one forward pass: the inputs to every linear layer
/// (the raw batch, then each post-ReLU activation). Consumed by exactly one
/// [`backward`] call.
#[derive(Debug)]
pub struct Tape {
    depth: usize,
    width: usize,
    acts: Vec<Array2<f64>>,
}

impl Tape {
    pub fn batch_len(&self) -> usize {
        self.acts[0].nrows()
    }

    /// Positions of the batch this tape was recorded on.
    pub(crate) fn input_points(&self) -> Vec<Point3> {
        self.acts[0]
            .rows()
            .into_iter()
            .map(|r| Point3::new(r[0], r[1], r[2]))
            .collect()
    }
}

fn run_forward(params: &PriorParams, batch: &QueryBatch) -> (Array2<f64>, Vec<Array2<f64>>) {
    let depth = params.depth;
    let mut acts: Vec<Array2<f64>> = Vec::with_capacity(depth + 1);
    acts.push(batch.data.clone());
    let mut output = None;
    for l in 0..=depth {
        let (w, b) = params.layer(l);
        let mut z = acts[l].dot(&w.t());
        z += &b;
        if l < depth {
            z.mapv_inplace(|v| if v > 0.0 { v } else { 0.0 });
            acts.push(z);
        } else {
            output = Some(z);
        }
    }
    (output.expect("at least one layer"), acts)
}

fn rows_to_points(m: &Array2<f64>) -> Vec<Point3> {
    m.rows()
        .into_iter()
        .map(|r| Point3::new(r[0], r[1], r[2]))
        .collect()
}

/// Evaluates the network on every row, yielding one displacement per row.
pub fn forward(params: &PriorParams, batch: &QueryBatch) -> Result<Vec<Point3>> {
    let (out, _) = run_forward(params, batch);
    Ok(rows_to_points(&out))
}

/// As [`forward`], additionally returning the tape needed for [`backward`].
pub fn forward_with_tape(params: &PriorParams, batch: &QueryBatch) -> Result<(Vec<Point3>, Tape)> {
    let (out, acts) = run_forward(params, batch);
    Ok((
        rows_to_points(&out),
        Tape {
            depth: params.depth,
            width: params.width,
            acts,
        },
    ))
}

/// Reverse-mode gradients of `sum_i output_grads[i] · outputs[i]` with
/// respect to the flat parameters and the 5D inputs.
///
/// The ReLU subgradient at exactly zero is taken as zero. The tape must come
/// from a forward pass over the same parameters.
pub fn backward(
    params: &PriorParams,
    tape: Tape,
    output_grads: &[Point3],
) -> Result<(Vec<f64>, Vec<[f64; INPUT_DIM]>)> {
    if tape.depth != params.depth || tape.width != params.width {
        return Err(Error::ShapeMismatch(format!(
            "tape recorded for depth {} width {}, params are depth {} width {}",
            tape.depth, tape.width, params.depth, params.width
        )));
    }
    let n = tape.batch_len();
    if output_grads.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} output gradients for a batch of {n}",
            output_grads.len()
        )));
    }
    let depth = params.depth;
    let mut grads = vec![0.0; params.len()];
    let mut g = Array2::zeros((n, OUTPUT_DIM));
    for (i, og) in output_grads.iter().enumerate() {
        g[[i, 0]] = og.x;
        g[[i, 1]] = og.y;
        g[[i, 2]] = og.z;
    }
    let mut input_grads_mat = None;
    for l in (0..=depth).rev() {
        let a = &tape.acts[l];
        {
            let (mut gw, mut gb) = grad_layer_mut(&mut grads, depth, params.width, l);
            general_mat_mul(1.0, &g.t(), &a.view(), 0.0, &mut gw);
            gb.assign(&g.sum_axis(Axis(0)));
        }
        let (w, _) = params.layer(l);
        let mut gn = g.dot(&w);
        if l > 0 {
            // a is the post-ReLU output of layer l-1: zero exactly where the
            // pre-activation was non-positive.
            gn.zip_mut_with(a, |gv, &av| {
                if av <= 0.0 {
                    *gv = 0.0;
                }
            });
            g = gn;
        } else {
            input_grads_mat = Some(gn);
        }
    }
    let gi = input_grads_mat.expect("loop ran");
    let input_grads = (0..n)
        .map(|i| [gi[[i, 0]], gi[[i, 1]], gi[[i, 2]], gi[[i, 3]], gi[[i, 4]]])
        .collect();
    Ok((grads, input_grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn count_oracle(depth: usize, width: usize) -> usize {
        // Independent shape arithmetic: walk the layer sizes explicitly.
        let mut sizes = vec![INPUT_DIM];
        sizes.extend(std::iter::repeat(width).take(depth));
        sizes.push(OUTPUT_DIM);
        let mut total = 0;
        for pair in sizes.windows(2) {
            total += pair[0] * pair[1] + pair[1];
        }
        total
    }

    fn random_batch(rng: &mut ChaCha8Rng, n: usize) -> QueryBatch {
        let rows: Vec<[f64; 5]> = (0..n)
            .map(|_| {
                [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    if rng.random_bool(0.5) { 1.0 } else { -1.0 },
                ]
            })
            .collect();
        QueryBatch::new(&rows).unwrap()
    }

    fn scalar_loss(params: &PriorParams, batch: &QueryBatch, og: &[Point3]) -> f64 {
        forward(params, batch)
            .unwrap()
            .iter()
            .zip(og)
            .map(|(o, g)| o.dot(g))
            .sum()
    }

    fn assert_close_rel(analytic: f64, numeric: f64, tol: f64) {
        if analytic.abs() < 1e-8 && numeric.abs() < 1e-8 {
            return;
        }
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
        assert!(
            rel < tol,
            "gradient mismatch: analytic {analytic}, numeric {numeric}, rel {rel}"
        );
    }

    #[test]
    fn param_count_small() {
        assert_eq!(param_count(1, 2), 21);
        assert_eq!(param_count(1, 2), count_oracle(1, 2));
    }

    #[test]
    fn param_count_default_topology() {
        assert_eq!(param_count(8, 128), count_oracle(8, 128));
        // (5*128+128) + 7*(128*128+128) + (128*3+3)
        assert_eq!(param_count(8, 128), 116_739);
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = PriorConfig {
            depth: 3,
            width: 16,
            seed: 99,
        };
        assert_eq!(init_params(&cfg).unwrap(), init_params(&cfg).unwrap());
    }

    #[test]
    fn init_biases_zero_weights_bounded() {
        let cfg = PriorConfig {
            depth: 2,
            width: 4,
            seed: 1,
        };
        let p = init_params(&cfg).unwrap();
        let (w0, b0) = p.layer(0);
        let bound = (6.0_f64 / 5.0).sqrt();
        assert!(w0.iter().all(|v| v.abs() <= bound));
        assert!(b0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_params_give_zero_outputs() {
        let p = PriorParams::from_values(2, 4, vec![0.0; param_count(2, 4)]).unwrap();
        let batch =
            QueryBatch::from_points(&[Point3::new(1.0, 2.0, 3.0)], 0.5, Direction::Forward)
                .unwrap();
        assert_eq!(forward(&p, &batch).unwrap(), vec![Point3::ZERO]);
    }

    #[test]
    fn hand_computed_forward() {
        // depth 1, width 1: W1 = [1,0,0,0,0], b1 = 0.5, W2 rows (2),(0),(0),
        // b2 = 0. Input (1,0,0,0,1): ReLU(1 + 0.5) * 2 = 3.
        let values = vec![
            1.0, 0.0, 0.0, 0.0, 0.0, // W1 (1x5)
            0.5, // b1
            2.0, 0.0, 0.0, // W2 (3x1)
            0.0, 0.0, 0.0, // b2
        ];
        let p = PriorParams::from_values(1, 1, values).unwrap();
        let batch = QueryBatch::new(&[[1.0, 0.0, 0.0, 0.0, 1.0]]).unwrap();
        assert_eq!(
            forward(&p, &batch).unwrap(),
            vec![Point3::new(3.0, 0.0, 0.0)]
        );
    }

    #[test]
    fn forward_is_a_row_wise_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = init_params(&PriorConfig {
            depth: 2,
            width: 8,
            seed: 5,
        })
        .unwrap();
        let batch = random_batch(&mut rng, 7);
        let out = forward(&p, &batch).unwrap();
        // Reversed rows produce reversed outputs, bitwise.
        let rev_rows: Vec<[f64; 5]> = (0..7)
            .rev()
            .map(|i| {
                [
                    batch.data[[i, 0]],
                    batch.data[[i, 1]],
                    batch.data[[i, 2]],
                    batch.data[[i, 3]],
                    batch.data[[i, 4]],
                ]
            })
            .collect();
        let rev_out = forward(&p, &QueryBatch::new(&rev_rows).unwrap()).unwrap();
        let expect: Vec<Point3> = out.into_iter().rev().collect();
        assert_eq!(rev_out, expect);
    }

    #[test]
    fn forward_with_tape_matches_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let cfg = PriorConfig {
                depth: rng.random_range(1..4),
                width: rng.random_range(1..10),
                seed: rng.random(),
            };
            let p = init_params(&cfg).unwrap();
            let n = rng.random_range(1..6);
            let batch = random_batch(&mut rng, n);
            let a = forward(&p, &batch).unwrap();
            let (b, _) = forward_with_tape(&p, &batch).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn empty_batch_round_trips() {
        let p = init_params(&PriorConfig {
            depth: 2,
            width: 4,
            seed: 0,
        })
        .unwrap();
        let batch = QueryBatch::new(&[]).unwrap();
        let (out, tape) = forward_with_tape(&p, &batch).unwrap();
        assert!(out.is_empty());
        let (grads, input_grads) = backward(&p, tape, &[]).unwrap();
        assert!(grads.iter().all(|&g| g == 0.0));
        assert!(input_grads.is_empty());
    }

    #[test]
    fn zero_output_grads_give_zero_gradients() {
        let p = init_params(&PriorConfig {
            depth: 3,
            width: 8,
            seed: 2,
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = random_batch(&mut rng, 5);
        let (_, tape) = forward_with_tape(&p, &batch).unwrap();
        let og = vec![Point3::ZERO; 5];
        let (grads, input_grads) = backward(&p, tape, &og).unwrap();
        assert!(grads.iter().all(|&g| g == 0.0));
        assert!(input_grads.iter().flatten().all(|&g| g == 0.0));
    }

    #[test]
    fn param_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let cfg = PriorConfig {
            depth: 3,
            width: 8,
            seed: 17,
        };
        let params = init_params(&cfg).unwrap();
        let batch = random_batch(&mut rng, 6);
        let og: Vec<Point3> = (0..6)
            .map(|_| {
                Point3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )
            })
            .collect();
        let (_, tape) = forward_with_tape(&params, &batch).unwrap();
        let (grads, _) = backward(&params, tape, &og).unwrap();
        let h = 1e-5;
        for i in 0..params.len() {
            let mut plus = params.clone();
            plus.values_mut()[i] += h;
            let mut minus = params.clone();
            minus.values_mut()[i] -= h;
            let numeric = (scalar_loss(&plus, &batch, &og) - scalar_loss(&minus, &batch, &og))
                / (2.0 * h);
            assert_close_rel(grads[i], numeric, 1e-4);
        }
    }

    #[test]
    fn input_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let cfg = PriorConfig {
            depth: 3,
            width: 8,
            seed: 23,
        };
        let params = init_params(&cfg).unwrap();
        let rows: Vec<[f64; 5]> = (0..4)
            .map(|_| {
                [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    1.0,
                ]
            })
            .collect();
        let og: Vec<Point3> = (0..4)
            .map(|_| {
                Point3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )
            })
            .collect();
        let batch = QueryBatch::new(&rows).unwrap();
        let (_, tape) = forward_with_tape(&params, &batch).unwrap();
        let (_, input_grads) = backward(&params, tape, &og).unwrap();
        let h = 1e-5;
        // d is discrete; check x, y, z, t only.
        for r in 0..rows.len() {
            for c in 0..4 {
                let mut plus = rows.clone();
                plus[r][c] += h;
                let mut minus = rows.clone();
                minus[r][c] -= h;
                let lp = scalar_loss(&params, &QueryBatch::new(&plus).unwrap(), &og);
                let lm = scalar_loss(&params, &QueryBatch::new(&minus).unwrap(), &og);
                assert_close_rel(input_grads[r][c], (lp - lm) / (2.0 * h), 1e-4);
            }
        }
    }

    #[test]
    fn doubling_output_grads_doubles_gradients_exactly() {
        let p = init_params(&PriorConfig {
            depth: 2,
            width: 6,
            seed: 8,
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let batch = random_batch(&mut rng, 5);
        let og: Vec<Point3> = (0..5)
            .map(|_| {
                Point3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )
            })
            .collect();
        let og2: Vec<Point3> = og.iter().map(|g| *g * 2.0).collect();
        let (_, tape1) = forward_with_tape(&p, &batch).unwrap();
        let (g1, i1) = backward(&p, tape1, &og).unwrap();
        let (_, tape2) = forward_with_tape(&p, &batch).unwrap();
        let (g2, i2) = backward(&p, tape2, &og2).unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!(2.0 * a, *b);
        }
        for (a, b) in i1.iter().flatten().zip(i2.iter().flatten()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn backward_rejects_mismatched_shapes() {
        let p1 = init_params(&PriorConfig {
            depth: 2,
            width: 4,
            seed: 0,
        })
        .unwrap();
        let p2 = init_params(&PriorConfig {
            depth: 3,
            width: 4,
            seed: 0,
        })
        .unwrap();
        let batch = QueryBatch::new(&[[0.0, 0.0, 0.0, 0.0, 1.0]]).unwrap();
        let (_, tape) = forward_with_tape(&p1, &batch).unwrap();
        assert!(matches!(
            backward(&p2, tape, &[Point3::ZERO]),
            Err(Error::ShapeMismatch(_))
        ));
        let (_, tape) = forward_with_tape(&p1, &batch).unwrap();
        assert!(matches!(
            backward(&p1, tape, &[]),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn query_batch_rejects_bad_direction_flag() {
        assert!(QueryBatch::new(&[[0.0, 0.0, 0.0, 0.0, 0.5]]).is_err());
        assert!(QueryBatch::new(&[[0.0, 0.0, 0.0, f64::NAN, 1.0]]).is_err());
    }
}
