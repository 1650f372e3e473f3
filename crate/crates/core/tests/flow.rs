use morphflow_core::flow::{
    dequantize, loss_and_gradient, train, Flow, FlowShape, FrobeniusMode, TrainConfig, LN_2PI, SCALE_BOUND,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn random_flow(dim: usize, layers: usize, amplitude: f64, seed: u64) -> Flow {
    let shape = FlowShape {
        layers,
        hidden: vec![16, 16],
    };
    let mut f = Flow::new(dim, &shape, seed).unwrap();
    f.perturb(amplitude, seed + 100);
    f
}

fn random_vec(rng: &mut ChaCha8Rng, dim: usize, spread: f64) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| spread * rng.sample::<f64, _>(StandardNormal))
}

/// Central-difference Jacobian of the forward map.
fn fd_jacobian(flow: &Flow, w: &DVector<f64>, h: f64) -> DMatrix<f64> {
    let d = w.len();
    let mut j = DMatrix::zeros(d, d);
    for c in 0..d {
        let mut p = w.clone();
        p[c] += h;
        let mut m = w.clone();
        m[c] -= h;
        let diff = (flow.forward(&p).unwrap().0 - flow.forward(&m).unwrap().0) / (2.0 * h);
        j.set_column(c, &diff);
    }
    j
}

fn constant_layer() -> Flow {
    let shape = FlowShape {
        layers: 1,
        hidden: vec![4],
    };
    let mut f = Flow::new(2, &shape, 0).unwrap();
    let l = &mut f.layers[0];
    l.s_net.layers.last_mut().unwrap().bias[0] = (2f64.ln() / SCALE_BOUND).atanh();
    l.t_net.layers.last_mut().unwrap().bias[0] = 1.0;
    f
}

#[test]
fn constant_coupling_layer() {
    let f = constant_layer();
    let (z, ld) = f.forward(&DVector::from_vec(vec![0.7, -1.5])).unwrap();
    assert!((z[0] - 0.7).abs() < 1e-15);
    assert!((z[1] - (2.0 * -1.5 + 1.0)).abs() < 1e-12);
    assert!((ld - 2f64.ln()).abs() < 1e-12);
    let w = f.inverse(&DVector::from_vec(vec![0.7, 5.0])).unwrap();
    assert!((w[0] - 0.7).abs() < 1e-15);
    assert!((w[1] - 2.0).abs() < 1e-12);
    let fro = f.jacobian_frobenius(&DVector::from_vec(vec![0.3, 0.1])).unwrap();
    assert!((fro - 5f64.sqrt()).abs() < 1e-12);
}

#[test]
fn identity_flow_nll() {
    let f = Flow::new(2, &FlowShape::default(), 0).unwrap();
    assert!((f.nll(&DVector::zeros(2)).unwrap() - LN_2PI).abs() < 1e-14);
    let w = DVector::from_vec(vec![1.0, 0.0]);
    assert!((f.nll(&w).unwrap() - (LN_2PI + 0.5)).abs() < 1e-14);
    assert!((f.jacobian_frobenius(&w).unwrap() - 2f64.sqrt()).abs() < 1e-14);
    let z = DVector::from_vec(vec![0.25, -3.0]);
    assert_eq!(f.inverse(&z).unwrap(), z);
}

#[test]
fn standardization_is_layer_zero() {
    let mut f = Flow::new(2, &FlowShape::default(), 0).unwrap();
    f.set_standardization(DVector::from_vec(vec![1.0, -2.0]), DVector::from_vec(vec![2.0, 0.5]))
        .unwrap();
    let (z, ld) = f.forward(&DVector::from_vec(vec![3.0, -1.0])).unwrap();
    assert_eq!(z.as_slice(), &[1.0, 2.0]);
    assert!((ld - (-(2f64.ln()) - 0.5f64.ln())).abs() < 1e-15);
    assert_eq!(f.inverse(&z).unwrap().as_slice(), &[3.0, -1.0]);
}

#[test]
fn logdet_matches_numerical_determinant() {
    let f = random_flow(5, 6, 0.2, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let w = random_vec(&mut rng, 5, 1.0);
        let (_, ld) = f.forward(&w).unwrap();
        let det = fd_jacobian(&f, &w, 1e-5).lu().determinant();
        let expected = det.abs().ln();
        assert!((ld - expected).abs() <= 1e-4 * expected.abs().max(1.0), "{ld} vs {expected}");
    }
}

#[test]
fn per_layer_triangularity() {
    let f = random_flow(6, 4, 0.3, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let w = random_vec(&mut rng, 6, 1.0);
    for j in f.layer_jacobians(&w).unwrap().iter().skip(1).zip(&f.layers) {
        let (jac, layer) = j;
        let (ps, pl) = layer.pass_block();
        let (ts, tl) = layer.transformed_block();
        for r in ps..ps + pl {
            for c in ts..ts + tl {
                assert!(jac[(r, c)].abs() < 1e-10);
            }
        }
    }
    // The composed first layer leaves z_{1:d} independent of w_{d+1:D}.
    let single = random_flow(6, 1, 0.3, 5);
    let j = fd_jacobian(&single, &w, 1e-6);
    for r in 0..3 {
        for c in 3..6 {
            assert!(j[(r, c)].abs() < 1e-10);
        }
    }
}

#[test]
fn frobenius_matches_differences() {
    let f = random_flow(4, 4, 0.3, 21);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..10 {
        let w = random_vec(&mut rng, 4, 1.0);
        let exact = f.jacobian_frobenius(&w).unwrap();
        let fd = fd_jacobian(&f, &w, 1e-5).norm();
        assert!((exact - fd).abs() < 1e-4 * fd, "{exact} vs {fd}");
    }
}

/// Loss evaluated sample by sample from dense Jacobians, independent of the tape.
fn dense_loss(flow: &Flow, batch: &DMatrix<f64>, weight: f64, mode: FrobeniusMode) -> f64 {
    let mut total = 0.0;
    for c in 0..batch.ncols() {
        let w = batch.column(c).into_owned();
        let fro = match mode {
            FrobeniusMode::Composed => flow.jacobian_frobenius(&w).unwrap(),
            FrobeniusMode::PerLayerSum => flow.layer_frobenius_sum(&w).unwrap(),
        };
        total += flow.nll(&w).unwrap() + weight * fro;
    }
    total / batch.ncols() as f64
}

fn gradient_check(mode: FrobeniusMode) {
    let mut flow = random_flow(4, 2, 0.2, 31);
    flow.set_standardization(
        DVector::from_vec(vec![0.1, -0.2, 0.3, 0.0]),
        DVector::from_vec(vec![1.5, 0.7, 1.0, 2.0]),
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let batch = DMatrix::from_fn(4, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
    let (parts, grad) = loss_and_gradient(&flow, &batch, 1.0, mode).unwrap();
    assert!((parts.total - dense_loss(&flow, &batch, 1.0, mode)).abs() < 1e-10);
    let params = flow.params();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut probe = flow.clone();
    for i in 0..params.len() {
        let mut p = params.clone();
        p[i] += h;
        probe.set_params(&p).unwrap();
        let up = dense_loss(&probe, &batch, 1.0, mode);
        p[i] -= 2.0 * h;
        probe.set_params(&p).unwrap();
        let down = dense_loss(&probe, &batch, 1.0, mode);
        let fd = (up - down) / (2.0 * h);
        let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
        worst = worst.max(rel);
    }
    assert!(worst < 1e-4, "worst relative gradient error {worst}");
}

#[test]
fn gradient_matches_central_differences() {
    gradient_check(FrobeniusMode::Composed);
}

#[test]
fn per_layer_gradient_matches_central_differences() {
    gradient_check(FrobeniusMode::PerLayerSum);
}

#[test]
fn dequantization_support_and_mean() {
    let w = DVector::from_vec(vec![1.0, -3.0]);
    let var = DVector::from_vec(vec![4.0, 0.25]);
    let mut sum = DVector::zeros(2);
    let n = 100_000;
    for s in 0..n {
        let d = dequantize(&w, &var, s).unwrap() - &w;
        assert!(d[0] >= 0.0 && d[0] <= 2.0 && d[1] >= 0.0 && d[1] <= 0.5);
        sum += d;
    }
    let mean = sum / n as f64;
    assert!((mean[0] - 1.0).abs() < 0.01 && (mean[1] - 0.25).abs() < 0.01 * 0.25, "{mean}");
}

#[test]
fn identity_flow_samples_are_standard() {
    let f = Flow::new(2, &FlowShape::default(), 0).unwrap();
    let s = f.sample(10_000, 12).unwrap();
    assert!(s.column_mean().norm() < 0.1);
    assert_eq!(s, f.sample(10_000, 12).unwrap());
}

#[test]
fn file_round_trip_is_exact() {
    let f = random_flow(5, 6, 0.2, 2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("id.flow");
    f.save(&path).unwrap();
    assert_eq!(Flow::load(&path).unwrap(), f);
}

#[test]
fn gaussian_training_reaches_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let data = DMatrix::from_fn(2, 1000, |_, _| rng.sample::<f64, _>(StandardNormal));
    // Start away from the optimum so the curve records actual descent.
    let mut flow = Flow::new(2, &FlowShape::default(), 1).unwrap();
    flow.perturb(0.2, 2);
    let config = TrainConfig {
        epochs: 30,
        batch_size: 100,
        dequantize: false,
        jacobian_weight: 0.1,
        seed: 3,
        ..TrainConfig::default()
    };
    let (trained, history) = train(&flow, &data, &config).unwrap();
    let entropy = LN_2PI + 1.0;
    let mean_nll = trained.nll_batch(&data).unwrap().mean();
    assert!((mean_nll - entropy).abs() < 0.05 * entropy, "{mean_nll} vs {entropy}");
    let smooth: Vec<f64> = history.windows(5).map(|w| w.iter().map(|h| h.total).sum::<f64>() / 5.0).collect();
    for w in smooth.windows(2) {
        assert!(w[1] <= w[0] + 1e-9, "smoothed loss increased: {w:?}");
    }
}

#[test]
fn ring_samples_stay_in_support() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let data = DMatrix::from_fn(2, 1500, |_, _| 0.0);
    let data = DMatrix::from_columns(
        &(0..data.ncols())
            .map(|_| {
                let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let r = 3.0 + 0.3 * rng.sample::<f64, _>(StandardNormal);
                DVector::from_vec(vec![r * a.cos(), r * a.sin()])
            })
            .collect::<Vec<_>>(),
    );
    let radii: Vec<f64> = data.column_iter().map(|c| c.norm()).collect();
    let lo = radii.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = radii.iter().cloned().fold(0.0, f64::max);
    let config = TrainConfig {
        epochs: 150,
        batch_size: 100,
        learning_rate: 3e-3,
        dequantize: false,
        jacobian_weight: 0.01,
        seed: 5,
        ..TrainConfig::default()
    };
    let (trained, _) = train(&Flow::new(2, &FlowShape::default(), 2).unwrap(), &data, &config).unwrap();
    let samples = trained.sample(2000, 9).unwrap();
    let inside = samples.column_iter().filter(|c| (lo..=hi).contains(&c.norm())).count();
    assert!(inside as f64 >= 0.95 * 2000.0, "{inside} of 2000 inside [{lo}, {hi}]");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn round_trip_any_parameters(seed in 0u64..1000, amp in 0.0f64..1.0, dim in 2usize..7) {
        let f = random_flow(dim, 4, amp, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        for _ in 0..20 {
            let w = random_vec(&mut rng, dim, 2.0);
            let back = f.inverse(&f.forward(&w).unwrap().0).unwrap();
            prop_assert!((back - &w).amax() < 1e-9);
            let z = random_vec(&mut rng, dim, 2.0);
            let again = f.forward(&f.inverse(&z).unwrap()).unwrap().0;
            prop_assert!((again - &z).amax() < 1e-9);
        }
    }
}
