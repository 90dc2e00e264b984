mod common;

use common::*;
use dpsct::forward::{Measurement, NoiseOptions};
use dpsct::harness::{map_oracle, MapOracleOptions};
use dpsct::image::{GridShape, ImageGrid};
use dpsct::score::{GaussianPrior, IntensityMap};
use dpsct::Error;

fn prior(shape: GridShape, mean: f64, var: f64) -> GaussianPrior {
    GaussianPrior::from_physical(&ImageGrid::filled(shape, mean), &vec![var; shape.len()], IntensityMap::new(0.01, 0.01).unwrap()).unwrap()
}

#[test]
fn zero_data_weight_returns_the_prior_mean() {
    let (m, truth) = small_problem(4, 16);
    let p = GaussianPrior::from_physical(&truth, &vec![1e-4; truth.shape().len()], IntensityMap::new(0.01, 0.01).unwrap()).unwrap();
    let sol = map_oracle(&m, &p, MapOracleOptions { measurement_weight: 0.0, ..Default::default() }).unwrap();
    assert_eq!(sol.iterations, 0);
    assert!(sol.image.rms_diff(&truth) < 1e-15);
}

#[test]
fn vague_prior_recovers_noiseless_truth() {
    let shape = GridShape::new(64, 64, 2.0).unwrap();
    let truth = ImageGrid::new(shape, uniform_vec(&mut rng(5), shape.len(), 0.01, 0.03)).unwrap();
    let g = dpsct::geometry::FanBeamGeometry::full_rotation(400.0, 200.0, 128, 3.0, 90).unwrap();
    let fm = model(shape, g, 1e5, 0.0);
    let m: Measurement = fm.simulate_noisy(&truth, NoiseOptions { noiseless: true, ..NoiseOptions::seeded(0) }).unwrap();
    let sol = map_oracle(&m, &prior(shape, 0.02, 1.0), MapOracleOptions { tolerance: 1e-6, ..Default::default() }).unwrap();
    assert!(sol.grad_norm <= 1e-6 * sol.initial_grad_norm);
    let rel = sol.image.rms_diff(&truth) / truth.norm() * (shape.len() as f64).sqrt();
    assert!(rel < 0.01, "relative error {rel}");
}

#[test]
fn iteration_cap_reports_non_convergence() {
    let (m, _) = small_problem(6, 16);
    let p = prior(m.model().projector().shape(), 0.02, 1e-4);
    match map_oracle(&m, &p, MapOracleOptions { max_iterations: 3, tolerance: 1e-12, ..Default::default() }) {
        Err(Error::NotConverged { iterations, .. }) => assert_eq!(iterations, 3),
        other => panic!("expected non-convergence, got {other:?}"),
    }
    let wrong = prior(GridShape::new(3, 3, 1.0).unwrap(), 0.02, 1e-4);
    assert!(map_oracle(&m, &wrong, MapOracleOptions::default()).is_err());
}
