use morphflow_core::geometry::Mesh;
use morphflow_core::spectral::{
    detect_aus, mesh_features, patch_laplacian, project_patch, spectral_embedding, train_au_svm, train_linear_svm,
    AuClassifier, PatchSpectrum, SvmOptions,
};
use morphflow_core::synth::{au_catalog, au_samples, ellipsoid_template, Poser, Template};
use morphflow_core::Vec3;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn template() -> Template {
    ellipsoid_template(300).unwrap()
}

/// Degree minus adjacency of the induced patch graph, built from face edges.
fn degree_minus_adjacency(mesh: &Mesh, verts: &[usize]) -> DMatrix<f64> {
    let n = verts.len();
    let local = |v: usize| verts.iter().position(|&x| x == v);
    let mut a = DMatrix::<f64>::zeros(n, n);
    for f in mesh.faces() {
        for (p, q) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
            if let (Some(i), Some(j)) = (local(p), local(q)) {
                a[(i, j)] = 1.0;
                a[(j, i)] = 1.0;
            }
        }
    }
    let d = DMatrix::from_diagonal(&a.column_sum());
    d - a
}

#[test]
fn laplacian_matches_degree_minus_adjacency() {
    let t = template();
    for (k, &lm) in t.mesh.landmarks().iter().enumerate() {
        let (verts, l) = patch_laplacian(&t.mesh, lm, 1 + k % 3).unwrap();
        assert_eq!(l, degree_minus_adjacency(&t.mesh, &verts));
    }
}

#[test]
fn embedding_diagonalizes_the_laplacian() {
    let t = template();
    let (_, l) = patch_laplacian(&t.mesh, t.mesh.landmarks()[0], 3).unwrap();
    let tau = 12;
    let s = spectral_embedding(&l, tau).unwrap();
    let d = s.basis.transpose() * &l * &s.basis;
    assert!((d - DMatrix::from_diagonal(&s.eigenvalues)).amax() < 1e-7);
    assert!((s.basis.transpose() * &s.basis - DMatrix::identity(tau, tau)).amax() < 1e-8);
    assert!(s.eigenvalues[0].abs() < 1e-9);
    let c = s.basis.column(0);
    assert!((c.max() - c.min()).abs() < 1e-8);
}

#[test]
fn projection_matches_dense_product() {
    let t = template();
    let spec = PatchSpectrum::build(&t.mesh, t.mesh.landmarks()[1], 10).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let coords: Vec<Vec3> = (0..spec.vertices.len())
        .map(|_| Vec3::from_fn(|_, _| rng.sample(StandardNormal)))
        .collect();
    let omega = project_patch(&spec, &coords).unwrap();
    let phi = &spec.spectrum.basis;
    for ch in 0..3 {
        for j in 0..phi.ncols() {
            let mut s = 0.0;
            for i in 0..phi.nrows() {
                s += phi[(i, j)] * coords[i][ch];
            }
            assert!((omega[ch * phi.ncols() + j] - s).abs() < 1e-12);
        }
    }
}

fn objective(w: &[f64], b: f64, c: f64, xs: &[Vec<f64>], ys: &[f64]) -> f64 {
    let dot = |x: &[f64]| w.iter().zip(x).map(|(p, q)| p * q).sum::<f64>();
    0.5 * (w.iter().map(|v| v * v).sum::<f64>() + b * b)
        + c * xs.iter().zip(ys).map(|(x, y)| (1.0 - y * (dot(x) + b)).max(0.0)).sum::<f64>()
}

/// Full-batch subgradient descent with diminishing steps, best iterate kept.
fn subgradient_oracle(xs: &[Vec<f64>], ys: &[f64], c: f64, iters: usize) -> f64 {
    let d = xs[0].len();
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut best = objective(&w, b, c, xs, ys);
    for t in 0..iters {
        let mut gw = w.clone();
        let mut gb = b;
        for (x, &y) in xs.iter().zip(ys) {
            let m = y * (x.iter().zip(&w).map(|(p, q)| p * q).sum::<f64>() + b);
            if m < 1.0 {
                for (g, xi) in gw.iter_mut().zip(x) {
                    *g -= c * y * xi;
                }
                gb -= c * y;
            }
        }
        let eta = 0.05 / (1.0 + t as f64).sqrt();
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= eta * g;
        }
        b -= eta * gb;
        best = best.min(objective(&w, b, c, xs, ys));
    }
    best
}

#[test]
fn svm_objective_within_one_percent_of_subgradient_oracle() {
    for seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..40 {
            let y = if i % 2 == 0 { 1.0 } else { -1.0 };
            xs.push((0..3).map(|k| rng.sample::<f64, _>(StandardNormal) + if k == 0 { 0.8 * y } else { 0.0 }).collect::<Vec<f64>>());
            ys.push(y);
        }
        let c = 0.5;
        let svm = train_linear_svm(&xs, &ys, c, SvmOptions::default()).unwrap();
        let ours = svm.primal_objective(&xs, &ys);
        let oracle = subgradient_oracle(&xs, &ys, c, 100_000);
        assert!((ours - oracle).abs() <= 0.01 * oracle, "seed {seed}: {ours} vs {oracle}");
    }
}

/// Train one classifier per AU on generator meshes and score held-out meshes.
fn au_accuracy(train_n: usize, test_n: usize, tau: usize) -> (Vec<f64>, Vec<AuClassifier>, Template, Vec<PatchSpectrum>) {
    let tpl = ellipsoid_template(800).unwrap();
    let aus = au_catalog(1.0);
    let train = au_samples(&tpl, &aus, train_n, 0.08, 0.0, false, 11).unwrap();
    let test = au_samples(&tpl, &aus, test_n, 0.08, 0.0, false, 12).unwrap();
    let spectra: Vec<PatchSpectrum> = tpl
        .mesh
        .landmarks()
        .iter()
        .map(|&l| PatchSpectrum::build(&tpl.mesh, l, tau).unwrap())
        .collect();
    let ftrain: Vec<Vec<f64>> = train.iter().map(|s| mesh_features(&s.mesh, &spectra).unwrap()).collect();
    let mut classifiers = Vec::new();
    for (a, au) in aus.iter().enumerate() {
        let y: Vec<f64> = train.iter().map(|s| if s.labels[a] == 1 { 1.0 } else { -1.0 }).collect();
        let svm = train_au_svm(&ftrain, &y, 1.0, SvmOptions::default()).unwrap();
        classifiers.push(AuClassifier::from_svm(&au.name, &svm));
    }
    let mut correct = vec![0usize; aus.len()];
    for s in &test {
        let bits = detect_aus(&s.mesh, &spectra, &classifiers).unwrap();
        for (a, (b, l)) in bits.iter().zip(&s.labels).enumerate() {
            correct[a] += usize::from(b == l);
        }
    }
    let acc = correct.iter().map(|&c| c as f64 / test_n as f64).collect();
    (acc, classifiers, tpl, spectra)
}

#[test]
fn synthetic_aus_are_detected_and_neutral_is_silent() {
    let (acc, classifiers, tpl, spectra) = au_accuracy(40, 20, 12);
    for (a, v) in acc.iter().enumerate() {
        assert!(*v >= 0.95, "AU {a}: accuracy {v}");
    }
    let aus = au_catalog(1.0);
    let poser = Poser::new(&tpl, &aus, false);
    let neutral = poser.mesh(poser.pose(&[0.0; 9], &[])).unwrap();
    let bits = detect_aus(&neutral, &spectra, &classifiers).unwrap();
    assert!(bits.iter().all(|&b| b == 0), "{bits:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn laplacian_is_symmetric_psd_with_zero_row_sums(lm_pick in 0usize..9, rings in 1usize..4) {
        let t = template();
        let lm = t.mesh.landmarks()[lm_pick];
        let (_, l) = patch_laplacian(&t.mesh, lm, rings).unwrap();
        prop_assert_eq!(&l, &l.transpose());
        for r in l.row_iter() {
            prop_assert!(r.sum().abs() < 1e-12);
        }
        let s = spectral_embedding(&l, l.nrows()).unwrap();
        prop_assert!(s.eigenvalues.min() >= -1e-9);
        for k in 1..s.eigenvalues.len() {
            prop_assert!(s.eigenvalues[k - 1] <= s.eigenvalues[k]);
        }
    }

    #[test]
    fn projection_is_linear_and_contractive(seed in 0u64..1000, a in -2.0f64..2.0) {
        let t = template();
        let spec = PatchSpectrum::build(&t.mesh, t.mesh.landmarks()[(seed % 9) as usize], 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = spec.vertices.len();
        let u: Vec<Vec3> = (0..n).map(|_| Vec3::from_fn(|_, _| rng.sample(StandardNormal))).collect();
        let v: Vec<Vec3> = (0..n).map(|_| Vec3::from_fn(|_, _| rng.sample(StandardNormal))).collect();
        let mix: Vec<Vec3> = u.iter().zip(&v).map(|(p, q)| p * a + q).collect();
        let pu = project_patch(&spec, &u).unwrap();
        let pv = project_patch(&spec, &v).unwrap();
        let pm = project_patch(&spec, &mix).unwrap();
        for ((m, p), q) in pm.iter().zip(&pu).zip(&pv) {
            prop_assert!((m - (a * p + q)).abs() < 1e-10);
        }
        let norm_in: f64 = u.iter().map(|p| p.norm_squared()).sum::<f64>().sqrt();
        let norm_out: f64 = pu.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!(norm_out <= norm_in + 1e-12);
    }
}
