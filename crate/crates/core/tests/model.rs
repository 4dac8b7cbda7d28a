use prior_bridge::eval::{sample, SampleOptions};
use prior_bridge::geometry::synth;
use prior_bridge::model::{train, OptimizerKind, TrainConfig};
use prior_bridge::sde::NoiseSchedule;

fn circle_distance(p: &[f64; 3]) -> f64 {
    let r = (p[0] * p[0] + p[1] * p[1]).sqrt();
    ((r - 1.0).powi(2) + p[2] * p[2]).sqrt()
}

#[test]
fn circle_model_samples_concentrate_on_the_circle() {
    let data: Vec<_> = (0..16).map(|i| synth::circle_cloud(64, 1.0, 500 + i).unwrap()).collect();
    let cfg = TrainConfig {
        steps: 100,
        epochs: 300,
        batch_size: 8,
        learning_rate: 1e-3,
        optimizer: OptimizerKind::Adam,
        hidden: 64,
        depth: 2,
        seed: 21,
        schedule: NoiseSchedule::constant(1.0, 1.0).unwrap(),
        ..TrainConfig::default()
    };
    let run = train(&cfg, &data, None).unwrap();
    assert!(run.diverged.is_none());
    let opts = SampleOptions {
        n_items: 8,
        m_points: 64,
        steps: 100,
        seed: 5,
        keep_trajectories: false,
    };
    let batch = sample(&run.checkpoint, opts).unwrap();
    let points: Vec<_> = batch.items.iter().flat_map(|s| s.coords.iter()).collect();
    let near = points.iter().filter(|p| circle_distance(p) <= 0.15).count();
    let frac = near as f64 / points.len() as f64;
    assert!(frac >= 0.95, "only {frac:.3} of sampled points within 0.15 of the circle");
}
