mod common;

use common::*;
use dpsct::image::{GridShape, ImageGrid};
use dpsct::schedule::{diffuse_with_noise, forward_diffuse, jumpstart_kl, NoiseSchedule};
use dpsct::score::{
    jacobian_approximation_check, posterior_mean_jvp, posterior_mean_vjp, tweedie_x0, GaussianPrior, GmmPrior,
    IntensityMap, ScoreModel, MAX_JACOBIAN_SEGMENT,
};
use proptest::prelude::*;

fn shape() -> GridShape {
    GridShape::new(4, 3, 1.0).unwrap()
}

fn mixture(seed: u64) -> GmmPrior {
    let mut r = rng(seed);
    let means = (0..3).map(|_| uniform_vec(&mut r, 12, -1.5, 1.5)).collect();
    GmmPrior::new(shape(), vec![0.2, 0.5, 0.3], means, vec![0.1, 0.4, 0.9]).unwrap()
}

fn fd_jacobian_check(model: &dyn ScoreModel, x: &[f64], t: usize, s: &NoiseSchedule, v: &[f64]) -> f64 {
    let h = 1e-5;
    let shift = |sign: f64| -> Vec<f64> { x.iter().zip(v).map(|(a, b)| a + sign * h * b).collect() };
    let (ep, em) = (model.predict_eps(&shift(1.0), t, s).unwrap(), model.predict_eps(&shift(-1.0), t, s).unwrap());
    let jv = model.jvp_eps(x, t, s, v).unwrap();
    let err: Vec<f64> = ep.iter().zip(&em).zip(&jv).map(|((a, b), j)| (a - b) / (2.0 * h) - j).collect();
    max_abs(&err) / max_abs(&jv).max(1e-12)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gmm_jvp_matches_finite_differences(seed in 0u64..500, t in 1usize..=1000) {
        let s = NoiseSchedule::ddpm_default();
        let p = mixture(seed);
        let mut r = rng(seed + 1);
        let x = uniform_vec(&mut r, 12, -2.0, 2.0);
        let v = uniform_vec(&mut r, 12, -1.0, 1.0);
        prop_assert!(fd_jacobian_check(&p, &x, t, &s, &v) < 1e-6);
    }

    #[test]
    fn gmm_jacobian_is_symmetric(seed in 0u64..500, t in 1usize..=1000) {
        // ⟨u, J v⟩ = ⟨J u, v⟩, so the VJP default is exact
        let s = NoiseSchedule::ddpm_default();
        let p = mixture(seed);
        let mut r = rng(seed + 2);
        let x = uniform_vec(&mut r, 12, -2.0, 2.0);
        let (u, v) = (uniform_vec(&mut r, 12, -1.0, 1.0), uniform_vec(&mut r, 12, -1.0, 1.0));
        let a = dot(&u, &p.jvp_eps(&x, t, &s, &v).unwrap());
        let b = dot(&p.jvp_eps(&x, t, &s, &u).unwrap(), &v);
        prop_assert!((a - b).abs() < 1e-10 * a.abs().max(b.abs()).max(1.0));
    }

    #[test]
    fn responsibilities_form_a_distribution(seed in 0u64..500, t in 1usize..=1000, spread in 0.1f64..1e3) {
        let s = NoiseSchedule::ddpm_default();
        let p = mixture(seed);
        let x = uniform_vec(&mut rng(seed), 12, -spread, spread);
        let r = p.responsibilities(&x, t, &s).unwrap();
        prop_assert!(r.iter().all(|v| v.is_finite() && *v >= 0.0));
        prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn posterior_mean_jacobian_products_are_consistent() {
    let s = NoiseSchedule::ddpm_default();
    let p = mixture(4);
    let mut r = rng(5);
    let x = uniform_vec(&mut r, 12, -1.0, 1.0);
    let v = uniform_vec(&mut r, 12, -1.0, 1.0);
    for t in [3, 300, 900] {
        let jv = posterior_mean_jvp(&x, t, &p, &s, &v).unwrap();
        let vj = posterior_mean_vjp(&x, t, &p, &s, &v).unwrap();
        assert_eq!(jv, vj);
        let h = 1e-5;
        let xp: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a + h * b).collect();
        let xm: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a - h * b).collect();
        let (tp, tm) = (tweedie_x0(&xp, t, &p, &s).unwrap(), tweedie_x0(&xm, t, &p, &s).unwrap());
        for i in 0..12 {
            let fd = (tp[i] - tm[i]) / (2.0 * h);
            assert!((fd - jv[i]).abs() < 1e-6 * jv[i].abs().max(1.0), "t {t} i {i}");
        }
    }
}

#[test]
fn scaled_jacobian_is_near_identity_only_at_large_t() {
    let s = NoiseSchedule::ddpm_default();
    let p = GaussianPrior::new(shape(), vec![0.0; 12], vec![1.0; 12]).unwrap();
    let x = vec![0.3; 12];
    let seg: Vec<usize> = (0..12).collect();
    let late = jacobian_approximation_check(&p, &x, 1000, &s, &seg).unwrap();
    let early = jacobian_approximation_check(&p, &x, 10, &s, &seg).unwrap();
    assert!(late.max_diagonal_deviation < 1e-4);
    assert!(early.max_diagonal_deviation > 0.9);
    assert_eq!(late.off_diagonal_energy, 0.0);
    // diagonal entry: (1−ᾱ)/(ᾱσ²+1−ᾱ)
    let ab = s.alpha_bar(10);
    assert!((early.get(2, 2) - (1.0 - ab)).abs() < 1e-14);
    assert!(jacobian_approximation_check(&p, &x, 10, &s, &[]).is_err());
    assert!(jacobian_approximation_check(&p, &x, 10, &s, &[12]).is_err());
    assert!(jacobian_approximation_check(&p, &vec![0.0; 100], 10, &s, &(0..MAX_JACOBIAN_SEGMENT + 1).collect::<Vec<_>>()).is_err());
}

#[test]
fn mixture_jacobian_has_off_diagonal_energy() {
    // between two well-separated components the mixture couples pixels
    let sh = GridShape::new(2, 1, 1.0).unwrap();
    let p = GmmPrior::new(sh, vec![0.5, 0.5], vec![vec![-2.0, -2.0], vec![2.0, 2.0]], vec![0.05, 0.05]).unwrap();
    let s = NoiseSchedule::ddpm_default();
    let b = jacobian_approximation_check(&p, &[0.0, 0.0], 5, &s, &[0, 1]).unwrap();
    assert!(b.off_diagonal_energy > 0.01);
}

#[test]
fn physical_construction_round_trips() {
    let map = IntensityMap::new(0.01, 0.005).unwrap();
    let mean = ImageGrid::new(shape(), (0..12).map(|i| 0.01 + 0.001 * i as f64).collect()).unwrap();
    let var: Vec<f64> = (0..12).map(|i| 1e-6 * (1 + i) as f64).collect();
    let p = GaussianPrior::from_physical(&mean, &var, map).unwrap();
    for ((pm, m), (pv, v)) in p.physical_mean().iter().zip(mean.data()).zip(p.physical_variance().iter().zip(&var)) {
        assert!((pm - m).abs() < 1e-15);
        assert!((pv / v - 1.0).abs() < 1e-12);
    }
    assert!(IntensityMap::new(0.0, 0.0).is_err());
    assert!(GaussianPrior::new(shape(), vec![0.0; 12], vec![0.0; 12]).is_err());
    assert!(GmmPrior::new(shape(), vec![0.4, 0.4], vec![vec![0.0; 12]; 2], vec![1.0; 2]).is_err());
}

#[test]
fn diffusion_marginal_moments() {
    let s = NoiseSchedule::ddpm_default();
    let sh = GridShape::new(100, 100, 1.0).unwrap();
    let x0 = ImageGrid::filled(sh, 2.0);
    let t = 300;
    let xt = forward_diffuse(&x0, t, &s, 4).unwrap();
    let ab = s.alpha_bar(t);
    let n = sh.len() as f64;
    let mean = xt.data().iter().sum::<f64>() / n;
    let var = xt.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    assert!((mean - 2.0 * ab.sqrt()).abs() < 4.0 * ((1.0 - ab) / n).sqrt());
    assert!((var / (1.0 - ab) - 1.0).abs() < 0.05);
    assert_eq!(forward_diffuse(&x0, t, &s, 4).unwrap().data(), xt.data());
    assert!(diffuse_with_noise(&[1.0], &[0.0, 0.0], 5, &s).is_err());
}

#[test]
fn jumpstart_kl_decays_with_t() {
    let s = NoiseSchedule::ddpm_default();
    let sh = GridShape::new(3, 3, 1.0).unwrap();
    let a = ImageGrid::filled(sh, 1.0);
    let b = ImageGrid::filled(sh, 1.5);
    let kls: Vec<f64> = [1, 10, 100, 500, 1000].iter().map(|&t| jumpstart_kl(&a, &b, t, &s).unwrap()).collect();
    assert!(kls.windows(2).all(|w| w[1] < w[0]));
    assert_eq!(jumpstart_kl(&a, &a, 10, &s).unwrap(), 0.0);
    assert!(jumpstart_kl(&a, &b, 0, &s).is_err());
    assert!(jumpstart_kl(&a, &b, 1001, &s).is_err());
}

#[test]
fn schedule_validation() {
    assert!(NoiseSchedule::linear(0, 1e-4, 0.02).is_err());
    assert!(NoiseSchedule::linear(10, 0.0, 0.02).is_err());
    assert!(NoiseSchedule::linear(10, 1e-4, 1.0).is_err());
    let s = NoiseSchedule::linear(50, 1e-3, 0.05).unwrap();
    assert_eq!(s.steps(), 50);
    assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
}
