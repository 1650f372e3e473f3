use std::time::Instant;

use morphflow_core::latent::{
    chi2_critical, fit_prior, interpolate, load_codes, nearest_neighbor, project_to_hyperellipsoid, save_codes,
    Coords, GaussianPrior, LatentCode, LatentPresets, Space,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn gauss(rng: &mut ChaCha8Rng, d: usize) -> DVector<f64> {
    DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal))
}

fn random_prior(d: usize, seed: u64) -> GaussianPrior {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    // strongly anisotropic: eigenvalues spread over four decades
    let scales = DMatrix::from_diagonal(&DVector::from_fn(d, |i, _| 10f64.powf(-2.0 + 4.0 * i as f64 / d as f64)));
    let cov = &a * scales * a.transpose() + DMatrix::identity(d, d) * 1e-3;
    let cov = (&cov + cov.transpose()) * 0.5;
    GaussianPrior::new(gauss(&mut rng, d) * 3.0, cov).unwrap()
}

/// Mahalanobis distance through a Cholesky solve, independent of the whitener.
fn cholesky_distance(prior: &GaussianPrior, b: &DVector<f64>) -> f64 {
    let l = prior.cov().clone().cholesky().unwrap();
    let y = l.l().solve_lower_triangular(&(b - prior.mean())).unwrap();
    y.norm()
}

fn gamma_half(k: u32) -> f64 {
    // Gamma(k/2) for integer k
    if k % 2 == 0 {
        (1..k / 2).map(|i| i as f64).product()
    } else {
        let n = k / 2;
        let fact = |m: u32| (1..=m).map(|i| i as f64).product::<f64>();
        fact(2 * n) * std::f64::consts::PI.sqrt() / (4f64.powi(n as i32) * fact(n))
    }
}

/// Chi-squared CDF by Simpson quadrature in `u = sqrt(x)`, which removes the
/// singularity at the origin for one degree of freedom.
fn chi2_cdf_quadrature(q: f64, k: u32) -> f64 {
    let norm = 2f64.powf(k as f64 / 2.0) * gamma_half(k);
    let f = |u: f64| 2.0 * u.powi(k as i32 - 1) * (-u * u / 2.0).exp() / norm;
    let b = q.sqrt();
    let n = 20_000;
    let h = b / n as f64;
    let mut s = f(0.0) + f(b);
    for i in 1..n {
        s += f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

#[test]
fn chi2_one_dof_table_value() {
    let b = chi2_critical(1.0, 0.99).unwrap();
    assert!((b * b - 6.6349).abs() < 1e-4);
}

#[test]
fn chi2_quantile_inverts_quadrature_cdf() {
    for k in [1u32, 2, 3, 6, 7, 13, 26] {
        for rho in [0.5, 0.9, 0.95, 0.99] {
            let beta = chi2_critical(k as f64, rho).unwrap();
            let cdf = chi2_cdf_quadrature(beta * beta, k);
            assert!((cdf - rho).abs() < 1e-6, "k={k} rho={rho}: {cdf}");
        }
    }
}

#[test]
fn chi2_is_monotone_on_a_grid() {
    let dofs = [1.0, 2.0, 4.0, 7.0, 12.0, 26.0, 60.0];
    let rhos = [0.1, 0.5, 0.8, 0.95, 0.99, 0.999];
    for (i, &k) in dofs.iter().enumerate() {
        for (j, &r) in rhos.iter().enumerate() {
            let b = chi2_critical(k, r).unwrap();
            if i > 0 {
                assert!(chi2_critical(dofs[i - 1], r).unwrap() < b);
            }
            if j > 0 {
                assert!(chi2_critical(k, rhos[j - 1]).unwrap() < b);
            }
        }
    }
    assert!(chi2_critical(0.5, 0.9).is_err());
    assert!(chi2_critical(3.0, 1.0).is_err());
    assert!(chi2_critical(3.0, 0.0).is_err());
}

#[test]
fn standard_gaussian_prior_is_recovered() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let samples: Vec<DVector<f64>> = (0..10_000).map(|_| gauss(&mut rng, 3)).collect();
    let p = fit_prior(&samples).unwrap();
    assert!((p.cov() - DMatrix::identity(3, 3)).amax() < 0.1);
    assert!(p.mean().amax() < 0.05);
}

#[test]
fn affine_push_forward_of_prior() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, 0.0, -1.0, 1.0, 0.3, 0.0, 0.2, 0.5]);
    let b = DVector::from_vec(vec![1.0, -4.0, 2.0]);
    let samples: Vec<DVector<f64>> = (0..20_000).map(|_| &a * gauss(&mut rng, 3) + &b).collect();
    let p = fit_prior(&samples).unwrap();
    let cov = &a * a.transpose();
    assert!((p.mean() - &b).amax() < 0.05);
    assert!((p.cov() - &cov).amax() < 0.1 * cov.amax());
}

#[test]
fn whitener_whitens() {
    let p = random_prior(6, 3);
    let w = p.whitener();
    let should_be_identity = w * p.cov() * w;
    assert!((should_be_identity - DMatrix::identity(6, 6)).amax() < 1e-6);
}

#[test]
fn ten_thousand_projections_land_on_the_shell() {
    let start = Instant::now();
    let p = random_prior(7, 4);
    let beta = LatentPresets::published().expression.beta;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10_000 {
        let b = p.mean() + gauss(&mut rng, 7) * rng.random_range(0.01..20.0);
        let t = project_to_hyperellipsoid(&b, &p, beta).unwrap();
        assert!((cholesky_distance(&p, &t) - beta).abs() < 1e-8);
    }
    assert!(start.elapsed().as_secs_f64() < 5.0);
}

#[test]
fn codes_survive_a_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let codes = vec![
        LatentCode::new(DVector::from_vec(vec![0.1, -2.5e-17, 3.0]), Space::Identity, Coords::PostFlow),
        LatentCode::new(DVector::from_vec(vec![1.0 / 3.0]), Space::Expression, Coords::PreFlow),
    ];
    let path = dir.path().join("codes.txt");
    save_codes(&codes, &path).unwrap();
    assert_eq!(load_codes(&path).unwrap(), codes);
}

fn code(v: Vec<f64>) -> LatentCode {
    LatentCode::new(DVector::from_vec(v), Space::Expression, Coords::PostFlow)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn projection_is_idempotent_and_keeps_direction(seed in 0u64..1000, scale in 0.01f64..50.0, beta in 0.5f64..8.0) {
        let p = random_prior(5, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let b = p.mean() + gauss(&mut rng, 5) * scale;
        let once = project_to_hyperellipsoid(&b, &p, beta).unwrap();
        let twice = project_to_hyperellipsoid(&once, &p, beta).unwrap();
        prop_assert!((&once - &twice).amax() <= 1e-10 * (1.0 + once.amax()));
        let u = &b - p.mean();
        let v = &once - p.mean();
        prop_assert!((u.dot(&v) / (u.norm() * v.norm()) - 1.0).abs() < 1e-12);
        prop_assert!((p.mahalanobis(&once) - beta).abs() < 1e-8);
    }

    #[test]
    fn nearest_neighbour_matches_linear_scan(seed in 0u64..1000, n in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // coarse integer lattice makes exact ties common
        let mut v = || (0..3).map(|_| rng.random_range(-2i32..3) as f64).collect::<Vec<_>>();
        let pool: Vec<LatentCode> = (0..n).map(|_| code(v())).collect();
        let q = code(v());
        let (idx, dist) = nearest_neighbor(&q, &pool).unwrap();
        let mut best = (0, f64::INFINITY);
        for (i, c) in pool.iter().enumerate() {
            let d = (&c.values - &q.values).norm();
            if d < best.1 {
                best = (i, d);
            }
        }
        prop_assert_eq!(idx, best.0);
        prop_assert!((dist - best.1).abs() < 1e-15);
    }

    #[test]
    fn interpolation_is_a_convex_combination(seed in 0u64..1000, nu in 0.0f64..=1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = code(gauss(&mut rng, 4).as_slice().to_vec());
        let b = code(gauss(&mut rng, 4).as_slice().to_vec());
        let m = interpolate(&a, &b, nu).unwrap();
        let expected = &a.values * (1.0 - nu) + &b.values * nu;
        prop_assert!((m.values - expected).amax() < 1e-14);
        prop_assert_eq!(interpolate(&a, &b, 0.0).unwrap(), a.clone());
        prop_assert_eq!(interpolate(&a, &b, 1.0).unwrap(), b.clone());
    }
}
