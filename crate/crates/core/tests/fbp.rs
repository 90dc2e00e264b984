use std::sync::Arc;

use dpsct::fbp::{fbp_from_measurement, fbp_reconstruct, log_transform, LineIntegralSinogram};
use dpsct::forward::{ForwardModel, Measurement, NoiseOptions};
use dpsct::geometry::{project, FanBeamGeometry, GainBlurOperator, Projector};
use dpsct::image::{GridShape, ImageGrid};
use dpsct::phantoms::{rasterize, Ellipse, EllipsePhantomSpec, PhantomFamily};

const MU: f64 = 0.02;
const RADIUS: f64 = 100.0;

fn desk_shape() -> GridShape {
    GridShape::new(128, 128, 2.5).unwrap()
}

fn geometry(views: usize) -> FanBeamGeometry {
    FanBeamGeometry::full_rotation(1000.0, 500.0, 256, 4.0, views).unwrap()
}

/// Exact line integrals of a centered disk: `2μ√(R² − d²)` with `d` the
/// ray's distance from the origin.
fn analytic_disk_sinogram(g: &FanBeamGeometry) -> Vec<f64> {
    let mut out = Vec::with_capacity(g.n_bins());
    for v in 0..g.n_views() {
        for b in 0..g.n_det() {
            let (s, e) = g.ray(v, b);
            let (dx, dy) = (e[0] - s[0], e[1] - s[1]);
            let d = (s[0] * dy - s[1] * dx).abs() / dx.hypot(dy);
            out.push(if d < RADIUS { 2.0 * MU * (RADIUS * RADIUS - d * d).sqrt() } else { 0.0 });
        }
    }
    out
}

fn interior_mean(img: &ImageGrid, radius: f64) -> f64 {
    let shape = img.shape();
    let (mut s, mut n) = (0.0, 0);
    for r in 0..shape.height {
        for c in 0..shape.width {
            let (x, y) = shape.pixel_center(r, c);
            if x.hypot(y) < radius {
                s += img.get(r, c);
                n += 1;
            }
        }
    }
    s / n as f64
}

#[test]
fn analytic_disk_interior_mean_within_three_percent() {
    let g = geometry(240);
    let l = LineIntegralSinogram::new(analytic_disk_sinogram(&g), g).unwrap();
    let img = fbp_reconstruct(&l, desk_shape()).unwrap();
    let m = interior_mean(&img, 0.7 * RADIUS);
    assert!((m - MU).abs() / MU < 0.03, "interior mean {m}");
}

#[test]
fn projected_disk_interior_mean_within_three_percent() {
    let shape = desk_shape();
    let g = geometry(240);
    let truth = rasterize(&EllipsePhantomSpec::new(0.0, vec![Ellipse::disk([0.0, 0.0], RADIUS, MU)]).unwrap(), shape);
    let sino = project(&truth, &g).unwrap();
    let img = fbp_reconstruct(&LineIntegralSinogram::new(sino, g).unwrap(), shape).unwrap();
    let m = interior_mean(&img, 0.7 * RADIUS);
    assert!((m - MU).abs() / MU < 0.03, "interior mean {m}");
}

#[test]
fn sparse_views_are_worse_than_dense() {
    let shape = desk_shape();
    let truth = rasterize(&PhantomFamily::ChestLite.sample(shape, 11), shape);
    let rmse = |views| {
        let g = geometry(views);
        let sino = project(&truth, &g).unwrap();
        fbp_reconstruct(&LineIntegralSinogram::new(sino, g).unwrap(), shape).unwrap().rms_diff(&truth)
    };
    let (dense, sparse) = (rmse(240), rmse(24));
    assert!(sparse > dense, "sparse {sparse} vs dense {dense}");
}

#[test]
fn fbp_is_linear() {
    let shape = GridShape::new(24, 24, 4.0).unwrap();
    let g = geometry(36);
    let a: Vec<f64> = (0..g.n_bins()).map(|i| ((i * 7919) % 13) as f64 * 0.01).collect();
    let b: Vec<f64> = (0..g.n_bins()).map(|i| ((i * 104729) % 17) as f64 * 0.02).collect();
    let run = |v: Vec<f64>| fbp_reconstruct(&LineIntegralSinogram::new(v, g.clone()).unwrap(), shape).unwrap();
    let combo = run(a.iter().zip(&b).map(|(x, y)| 2.0 * x - 3.0 * y).collect());
    let (ra, rb) = (run(a), run(b));
    for i in 0..shape.len() {
        let want = 2.0 * ra.data()[i] - 3.0 * rb.data()[i];
        assert!((combo.data()[i] - want).abs() <= 1e-12 * (1.0 + want.abs()));
    }
}

fn flat_measurement(counts_of: impl Fn(f64) -> f64) -> Measurement {
    let shape = GridShape::new(8, 8, 4.0).unwrap();
    let g = geometry(4);
    let gain = 5e3;
    let model = ForwardModel::new(
        Arc::new(Projector::new(g, shape)),
        Arc::new(GainBlurOperator::uniform(256, gain, 0.0).unwrap()),
    )
    .unwrap();
    let counts = vec![counts_of(gain); 4 * 256];
    Measurement::with_plugin_variance(model, counts, 10.0).unwrap()
}

#[test]
fn log_transform_examples() {
    let l = log_transform(&flat_measurement(|g| g), 1.0).unwrap();
    assert!(l.values().iter().all(|&v| v == 0.0));
    let l = log_transform(&flat_measurement(|g| g * (-2.0f64).exp()), 1.0).unwrap();
    assert!(l.values().iter().all(|&v| (v - 2.0).abs() < 1e-12));
    let l = log_transform(&flat_measurement(|_| 0.0), 1.0).unwrap();
    assert!(l.values().iter().all(|&v| (v - 5e3f64.ln()).abs() < 1e-12));
    assert!(log_transform(&flat_measurement(|g| g), 0.0).is_err());
}

#[test]
fn fbp_of_noisy_measurement_is_finite() {
    let shape = GridShape::new(32, 32, 8.0).unwrap();
    let g = geometry(60);
    let model = ForwardModel::new(
        Arc::new(Projector::new(g, shape)),
        Arc::new(GainBlurOperator::uniform(256, 5e3, 0.5).unwrap()),
    )
    .unwrap();
    let truth = rasterize(&PhantomFamily::Disk.sample(shape, 0), shape);
    let m = model.simulate_noisy(&truth, NoiseOptions::seeded(4)).unwrap();
    let img = fbp_from_measurement(&m).unwrap();
    assert!(img.data().iter().all(|v| v.is_finite()));
    assert!((interior_mean(&img, 40.0) - 0.02).abs() < 0.004);
}
