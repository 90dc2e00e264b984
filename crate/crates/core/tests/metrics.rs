mod common;

use common::*;
use dpsct::image::{GridShape, ImageGrid};
use dpsct::metrics::{circular_mask, psnr, ssim, RunEnsemble};
use proptest::prelude::*;
use rand::Rng;

/// SSIM with an explicit 2-D Gaussian window at every valid position.
fn naive_ssim(x: &ImageGrid, y: &ImageGrid) -> f64 {
    let (w, h) = (x.width(), x.height());
    let win = 11usize;
    let mut k = vec![0.0; win * win];
    for i in 0..win {
        for j in 0..win {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            k[i * win + j] = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
        }
    }
    let ks: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= ks);
    let l = y.max() - y.min();
    let (c1, c2) = ((0.01 * l).powi(2), (0.03 * l).powi(2));
    let mut total = 0.0;
    let mut count = 0;
    for r in 0..=h - win {
        for c in 0..=w - win {
            let (mut mx, mut my) = (0.0, 0.0);
            for i in 0..win {
                for j in 0..win {
                    mx += k[i * win + j] * x.get(r + i, c + j);
                    my += k[i * win + j] * y.get(r + i, c + j);
                }
            }
            let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
            for i in 0..win {
                for j in 0..win {
                    let (a, b) = (x.get(r + i, c + j) - mx, y.get(r + i, c + j) - my);
                    vx += k[i * win + j] * a * a;
                    vy += k[i * win + j] * b * b;
                    cxy += k[i * win + j] * a * b;
                }
            }
            total += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    total / count as f64
}

fn random_image(seed: u64, w: usize, h: usize) -> ImageGrid {
    ImageGrid::new(GridShape::new(w, h, 1.0).unwrap(), uniform_vec(&mut rng(seed), w * h, 0.0, 0.05)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn ssim_matches_naive_window(seed in 0u64..1000, w in 11usize..24, h in 11usize..24, noise in 0.0f64..0.05) {
        let truth = random_image(seed, w, h);
        let mut r = rng(seed + 7);
        let recon = ImageGrid::new(truth.shape(), truth.data().iter().map(|v| v + noise * r.random_range(-1.0..1.0)).collect()).unwrap();
        let fast = ssim(&recon, &truth).unwrap();
        prop_assert!((fast - naive_ssim(&recon, &truth)).abs() < 1e-10);
        prop_assert!(fast <= 1.0 + 1e-12);
    }

    #[test]
    fn psnr_matches_definition(seed in 0u64..1000, n in 1usize..40) {
        let truth = random_image(seed, n, 3);
        prop_assume!(truth.max() > 0.0);
        let recon = random_image(seed + 1, n, 3);
        let mse: f64 = truth.data().iter().zip(recon.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / (3 * n) as f64;
        let want = 10.0 * (truth.max().powi(2) / mse).log10();
        prop_assert!((psnr(&recon, &truth).unwrap() - want).abs() < 1e-10);
    }

    #[test]
    fn statistics_ignore_run_order(seed in 0u64..1000, n in 2usize..9, rot in 0usize..8) {
        let runs: Vec<ImageGrid> = (0..n).map(|k| random_image(seed * 31 + k as u64, 12, 12)).collect();
        let mut shuffled = runs.clone();
        shuffled.rotate_left(rot % n);
        shuffled.swap(0, n - 1);
        let truth = random_image(seed + 999, 12, 12);
        let a = RunEnsemble::new(runs).unwrap().with_truth(truth.clone()).unwrap();
        let b = RunEnsemble::new(shuffled).unwrap().with_truth(truth).unwrap();
        prop_assert_eq!(a.mean_image(), b.mean_image());
        prop_assert_eq!(a.std_map().unwrap(), b.std_map().unwrap());
        prop_assert_eq!(a.bias_map().unwrap(), b.bias_map().unwrap());
    }
}

#[test]
fn std_recovers_known_noise_level() {
    let sigma = 0.004;
    let shape = GridShape::new(64, 64, 1.0).unwrap();
    let base = random_image(1, 64, 64);
    let mut r = rng(2);
    let runs: Vec<ImageGrid> = (0..32)
        .map(|_| {
            let d = base.data().iter().map(|v| v + sigma * r.sample::<f64, _>(rand_distr::StandardNormal)).collect();
            ImageGrid::new(shape, d).unwrap()
        })
        .collect();
    let e = RunEnsemble::new(runs).unwrap().with_truth(base).unwrap();
    let s = e.summary().unwrap();
    assert!((s.std / sigma - 1.0).abs() < 0.1, "{}", s.std);
    // bias of the mean of 32 draws: E|N(0, σ²/32)| = σ·√(2/(32π))
    let expected_bias = sigma * (2.0 / (32.0 * std::f64::consts::PI)).sqrt();
    assert!((s.bias / expected_bias - 1.0).abs() < 0.1, "{}", s.bias);
    assert_eq!(s.run_count, 32);
}

#[test]
fn mask_restricts_summaries() {
    let shape = GridShape::new(20, 20, 1.0).unwrap();
    let mask = circular_mask(shape, 5.0);
    let inside = mask.iter().filter(|&&m| m).count();
    assert!(inside > 60 && inside < 100, "{inside}");
    // runs differ only outside the mask
    let mut a = vec![0.01; 400];
    let b = vec![0.01; 400];
    for (i, m) in mask.iter().enumerate() {
        if !m {
            a[i] = 0.05;
        }
    }
    let e = RunEnsemble::new(vec![ImageGrid::new(shape, a).unwrap(), ImageGrid::new(shape, b).unwrap()]).unwrap();
    assert!(e.clone().with_mask(vec![false; 400]).is_err());
    assert!(e.clone().with_mask(vec![true; 399]).is_err());
    let e = e.with_mask(mask).unwrap();
    assert_eq!(e.summarize(&e.std_map().unwrap()).unwrap(), 0.0);
    assert!(RunEnsemble::new(vec![]).is_err());
}

#[test]
fn metric_preconditions() {
    let a = random_image(3, 12, 12);
    let b = random_image(4, 13, 12);
    assert!(psnr(&a, &b).is_err());
    assert!(ssim(&random_image(5, 10, 12), &random_image(6, 10, 12)).is_err());
    let flat = ImageGrid::filled(a.shape(), 0.02);
    assert!(ssim(&a, &flat).is_err());
    let single = RunEnsemble::new(vec![a.clone()]).unwrap();
    assert!(single.std_map().is_err());
    assert!(single.summary().is_err());
    assert!(RunEnsemble::new(vec![a.clone(), b]).is_err());
}
