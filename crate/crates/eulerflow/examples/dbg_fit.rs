use eulerflow::geom::{FrameSequence, Point3, PointCloud};
use eulerflow::loss::LossConfig;
use eulerflow::ode::extract_flow;
use eulerflow::prior::PriorConfig;
use eulerflow::train::{fit, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 30;
    let points: Vec<Point3> = (0..n)
        .map(|_| Point3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
        .collect();
    let seq = FrameSequence::new(
        (0..4).map(|i| PointCloud::from_points(points.clone(), i, i as f64 * 0.1)).collect(),
        0.1,
    ).unwrap();
    let prior_cfg = PriorConfig { depth: 2, width: 16, seed: 3 };
    let loss_cfg = LossConfig::default();
    let train_cfg = TrainConfig { learning_rate: 4e-3, max_epochs: 250, patience: 250, seed: 3, ..TrainConfig::default() };
    let (params, hist) = fit(&seq, &prior_cfg, &loss_cfg, &train_cfg, |r| {
        if r.epoch % 25 == 0 || r.epoch == 1 {
            println!("epoch {:4} total {:.6e} cycle {:.3e}", r.epoch, r.breakdown.total, r.breakdown.cycle_term);
        }
    }).unwrap();
    let flow = extract_flow(&params, &seq, 0, 1).unwrap();
    let max_mag = flow.residuals.iter().map(|r| r.norm()).fold(0.0, f64::max);
    let mean_mag: f64 = flow.residuals.iter().map(|r| r.norm()).sum::<f64>() / n as f64;
    println!("epochs run: {}", hist.epochs.len());
    println!("max flow magnitude {max_mag:.4}, mean {mean_mag:.4}");
}
