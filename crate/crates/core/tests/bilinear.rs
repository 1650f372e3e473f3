use std::time::Instant;

use morphflow_core::bilinear::{
    assemble_tensor, hosvd, parallel_analysis, variance_truncation, BilinearModel, EncodeMode, IdentityKind,
    IdentityLabel, MeshGrid, ShapeTensor,
};
use morphflow_core::geometry::{Mesh, Plane, SymmetryMap};
use morphflow_core::Vec3;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn labels(n: usize) -> Vec<IdentityLabel> {
    (0..n)
        .map(|i| IdentityLabel {
            name: format!("id{i}"),
            kind: IdentityKind::Original,
        })
        .collect()
}

fn tensor_from(data: Vec<f64>, dims: (usize, usize, usize)) -> ShapeTensor {
    let ex = (0..dims.2).map(|e| format!("ex{e}")).collect();
    ShapeTensor::from_data(data, dims, labels(dims.1), ex).unwrap()
}

fn random_tensor(dims: (usize, usize, usize), seed: u64) -> ShapeTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = dims.0 * dims.1 * dims.2;
    tensor_from((0..n).map(|_| rng.sample(StandardNormal)).collect(), dims)
}

/// Every slice rebuilt from the model's own training coefficients.
fn rebuilt(model: &BilinearModel, dims: (usize, usize, usize)) -> Vec<f64> {
    let mut out = vec![0.0; dims.0 * dims.1 * dims.2];
    for e in 0..dims.2 {
        for i in 0..dims.1 {
            let x = model.reconstruct(&model.identity_code(i), &model.expression_code(e)).unwrap();
            let at = dims.0 * (i + dims.1 * e);
            out[at..at + dims.0].copy_from_slice(x.as_slice());
        }
    }
    out
}

fn frob(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn diff(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

#[test]
fn full_rank_hosvd_is_lossless() {
    let start = Instant::now();
    let dims = (300, 6, 5);
    let t = random_tensor(dims, 1);
    let m = hosvd(&t, 6, 5).unwrap();
    let err = frob(&diff(&rebuilt(&m, dims), t.data())) / frob(t.data());
    assert!(err < 1e-8, "{err}");
    assert!(start.elapsed().as_secs_f64() < 5.0);
}

#[test]
fn truncation_error_obeys_discarded_singular_value_bound() {
    let dims = (300, 6, 5);
    let t = random_tensor(dims, 2);
    for (d_id, d_ex) in [(1, 1), (3, 2), (5, 4), (6, 3), (2, 5)] {
        let m = hosvd(&t, d_id, d_ex).unwrap();
        let mean = m.mean().clone();
        let centered: Vec<f64> = t
            .data()
            .chunks(dims.0)
            .flat_map(|s| s.iter().zip(mean.iter()).map(|(a, b)| a - b).collect::<Vec<_>>())
            .collect();
        let centered_rebuilt: Vec<f64> = rebuilt(&m, dims)
            .chunks(dims.0)
            .flat_map(|s| s.iter().zip(mean.iter()).map(|(a, b)| a - b).collect::<Vec<_>>())
            .collect();
        let err2 = frob(&diff(&centered, &centered_rebuilt)).powi(2);
        let bound: f64 = m.singular_values_id().iter().skip(d_id).map(|s| s * s).sum::<f64>()
            + m.singular_values_ex().iter().skip(d_ex).map(|s| s * s).sum::<f64>();
        assert!(err2 <= bound * (1.0 + 1e-10) + 1e-10, "({d_id},{d_ex}): {err2} > {bound}");
    }
}

#[test]
fn rank_one_tensor_is_rebuilt_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (nv, ni, ne) = (30, 4, 3);
    let a: Vec<f64> = (0..nv).map(|_| rng.sample(StandardNormal)).collect();
    // centered modes keep the grand mean zero, so centering leaves rank one
    let b = [1.0, -2.0, 0.5, 0.5];
    let c = [2.0, -1.0, -1.0];
    let mut data = Vec::new();
    for ce in c {
        for bi in b {
            data.extend(a.iter().map(|av| av * bi * ce));
        }
    }
    let t = tensor_from(data, (nv, ni, ne));
    let m = hosvd(&t, 1, 1).unwrap();
    assert!(m.mean().amax() < 1e-14);
    assert!(frob(&diff(&rebuilt(&m, (nv, ni, ne)), t.data())) < 1e-10);
}

#[test]
fn training_faces_round_trip_through_codes() {
    let dims = (60, 5, 4);
    let t = random_tensor(dims, 4);
    let m = hosvd(&t, 5, 4).unwrap();
    for i in 0..5 {
        for e in 0..4 {
            let x = m.reconstruct(&m.identity_code(i), &m.expression_code(e)).unwrap();
            let truth = DVector::from_column_slice(t.slice(i, e));
            assert!((x - truth).amax() < 1e-7);
        }
    }
}

#[test]
fn encode_recovers_codes_and_residual_is_monotone() {
    let dims = (90, 5, 4);
    let t = random_tensor(dims, 5);
    let m = hosvd(&t, 4, 3).unwrap();
    let w_id = DVector::from_vec(vec![0.3, -0.2, 0.5, 0.1]);
    let w_ex = DVector::from_vec(vec![-0.4, 0.6, 0.2]);
    let face = m.reconstruct(&w_id, &w_ex).unwrap();
    let enc = m.encode(&face, &EncodeMode::FixExpression(w_ex.clone())).unwrap();
    assert!((enc.w_id - &w_id).amax() < 1e-8);
    let enc = m.encode(&face, &EncodeMode::FixIdentity(w_id.clone())).unwrap();
    assert!((enc.w_ex - &w_ex).amax() < 1e-8);
    let enc = m.encode(m.mean(), &EncodeMode::FixExpression(w_ex.clone())).unwrap();
    assert!(enc.w_id.amax() < 1e-10);

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let random = DVector::from_fn(dims.0, |_, _| rng.sample::<f64, _>(StandardNormal));
    let enc = m
        .encode(
            &random,
            &EncodeMode::Alternate {
                w_ex: m.expression_code(0),
                tol: 1e-14,
                max_iter: 50,
            },
        )
        .unwrap();
    assert!(enc.residuals.len() > 2);
    for w in enc.residuals.windows(2) {
        assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-12);
    }
}

#[test]
fn assembly_bookkeeping() {
    let pts = vec![
        Vec3::new(1.0, 0.0, 0.0),
        Vec3::new(-1.0, 0.0, 0.0),
        Vec3::new(0.0, 1.0, 0.0),
        Vec3::new(0.0, 0.0, 1.0),
    ];
    let faces = vec![[0, 2, 3], [1, 3, 2]];
    let sym = SymmetryMap::from_pairs(4, &[(0, 1), (2, 2), (3, 3)], Plane::yz()).unwrap();
    let mut grid = MeshGrid::new(vec!["a".into(), "b".into()], vec!["n".into(), "x".into(), "y".into()]);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for i in 0..2 {
        for e in 0..3 {
            let v = pts.iter().map(|p| p + Vec3::from_fn(|_, _| 0.1 * rng.random::<f64>())).collect();
            grid.insert(i, e, Mesh::new(v, faces.clone(), vec![]).unwrap()).unwrap();
        }
    }
    let plain = assemble_tensor(&grid, None, false).unwrap();
    assert_eq!(plain.dims(), (12, 2, 3));
    for i in 0..2 {
        for e in 0..3 {
            assert_eq!(plain.slice(i, e), grid.get(i, e).unwrap().to_flat().as_slice());
            for v in 0..12 {
                assert_eq!(plain.get(v, i, e), grid.get(i, e).unwrap().to_flat()[v]);
            }
        }
    }
    let aug = assemble_tensor(&grid, Some(&sym), true).unwrap();
    assert_eq!(aug.dims(), (12, 6, 3));
}

#[test]
fn parallel_analysis_on_noise_finds_at_most_one_component() {
    let mut small = 0;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = DMatrix::from_fn(60, 10, |_, _| rng.sample::<f64, _>(StandardNormal));
        if parallel_analysis(&data, 100, seed).unwrap() <= 1 {
            small += 1;
        }
    }
    assert!(small >= 18, "{small}/20");
}

#[test]
fn parallel_analysis_finds_planted_directions() {
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, d) = (100, 12);
        let dirs = DMatrix::from_fn(2, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let scores = DMatrix::from_fn(n, 2, |_, _| 10.0 * rng.sample::<f64, _>(StandardNormal));
        let noise = DMatrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let data = scores * dirs + noise;
        let k = parallel_analysis(&data, 100, seed).unwrap();
        assert_eq!(k, 2, "seed {seed}");
        assert_eq!(parallel_analysis(&data, 100, seed).unwrap(), k);
    }
}

fn scan_oracle(sv: &[f64], fraction: f64) -> usize {
    let total: f64 = sv.iter().map(|s| s * s).sum();
    (1..=sv.len())
        .find(|&d| sv[..d].iter().map(|s| s * s).sum::<f64>() / total >= fraction)
        .unwrap_or(sv.len())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn truncation_matches_linear_scan(mut sv in prop::collection::vec(0.01f64..10.0, 1..20), fraction in 0.05f64..0.99) {
        sv.sort_by(|a, b| b.total_cmp(a));
        prop_assert_eq!(variance_truncation(&sv, fraction).unwrap(), scan_oracle(&sv, fraction));
    }

    #[test]
    fn reconstruct_is_bilinear(seed in 0u64..200, a in -3.0f64..3.0) {
        let t = random_tensor((24, 4, 3), seed);
        let m = hosvd(&t, 3, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let mut v = |n: usize| DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let (i1, i2, e1, e2) = (v(3), v(3), v(2), v(2));
        let off = |wi: &DVector<f64>, we: &DVector<f64>| m.reconstruct(wi, we).unwrap() - m.mean();
        let lhs = off(&(&i1 + &i2), &e1);
        let rhs = off(&i1, &e1) + off(&i2, &e1);
        prop_assert!((lhs - rhs).amax() < 1e-10);
        let lhs = off(&i1, &(&e1 * a + &e2));
        let rhs = off(&i1, &e1) * a + off(&i1, &e2);
        prop_assert!((lhs - rhs).amax() < 1e-10);
        prop_assert!((m.reconstruct(&DVector::zeros(3), &e1).unwrap() - m.mean()).amax() == 0.0);
    }

    #[test]
    fn mode_bases_are_orthonormal(seed in 0u64..200) {
        let t = random_tensor((30, 6, 4), seed);
        let m = hosvd(&t, 4, 3).unwrap();
        prop_assert!((m.u_id().transpose() * m.u_id() - DMatrix::identity(4, 4)).amax() < 1e-8);
        prop_assert!((m.u_ex().transpose() * m.u_ex() - DMatrix::identity(3, 3)).amax() < 1e-8);
        for l in [m.lambda_id(), m.lambda_ex()] {
            prop_assert!(l.iter().all(|&x| x >= 0.0));
            for k in 1..l.len() {
                prop_assert!(l[k - 1] >= l[k]);
            }
        }
    }
}
