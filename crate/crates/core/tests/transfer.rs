use morphflow_core::correspondence::{build_map, MapOptions};
use morphflow_core::geometry::Mesh;
use morphflow_core::synth::ellipsoid_template;
use morphflow_core::transfer::{
    sample_subjects, transfer_expression, transfer_with_subjects, ExpressionBank, TransferParams,
};
use morphflow_core::Vec3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const AUS: usize = 4;

/// Random bank on an ellipsoid topology: neutral = template + noise, each
/// blendshape = neutral + a random offset field.
fn bank(subjects: usize, seed: u64) -> (Mesh, ExpressionBank) {
    let tpl = ellipsoid_template(60).unwrap().mesh;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut jitter = |scale: f64| -> Vec<Vec3> {
        tpl.vertices()
            .iter()
            .map(|_| Vec3::from_fn(|_, _| scale * rng.sample::<f64, _>(StandardNormal)))
            .collect()
    };
    let mut neutral = Vec::new();
    let mut shapes = Vec::new();
    for _ in 0..subjects {
        let n: Vec<Vec3> = tpl.vertices().iter().zip(jitter(1.0)).map(|(p, e)| p + e).collect();
        let s: Vec<Vec<Vec3>> = (0..AUS)
            .map(|_| n.iter().zip(jitter(2.0)).map(|(p, e)| p + e).collect())
            .collect();
        neutral.push(n);
        shapes.push(s);
    }
    let bank = ExpressionBank::new(
        tpl.faces().to_vec(),
        (0..subjects).map(|s| format!("s{s}")).collect(),
        (0..AUS).map(|a| format!("au{a}")).collect(),
        neutral,
        shapes,
    )
    .unwrap();
    (tpl, bank)
}

fn max_delta(a: &[Vec3], b: &[Vec3]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q).amax()).fold(0.0, f64::max)
}

/// Independent oracle: neutral + sum of active offsets, written out directly.
fn synthesize_oracle(bank: &ExpressionBank, s: usize, au: &[u8]) -> Vec<Vec3> {
    let neutral = bank.synthesize_by_index(s, &[0; AUS]).unwrap();
    let mut out = neutral.clone();
    for a in 0..AUS {
        if au[a] == 1 {
            let mut single = [0u8; AUS];
            single[a] = 1;
            let shape = bank.synthesize_by_index(s, &single).unwrap();
            for ((o, b), n) in out.iter_mut().zip(&shape).zip(&neutral) {
                *o += b - n;
            }
        }
    }
    out
}

#[test]
fn two_au_synthesis_matches_direct_sum() {
    let (_, bank) = bank(3, 1);
    let got = bank.synthesize_by_index(1, &[1, 0, 1, 0]).unwrap();
    assert!(max_delta(&got, &synthesize_oracle(&bank, 1, &[1, 0, 1, 0])) < 1e-12);
}

#[test]
fn zero_intensity_and_equal_expressions_are_identity() {
    let (tpl, bank) = bank(5, 2);
    let map = build_map(&tpl, &tpl, MapOptions::default()).unwrap();
    let params = TransferParams { delta: 0.0, kappa: 3, seed: 4 };
    let t = transfer_expression(&tpl, &[0, 1, 0, 0], &[1, 1, 0, 1], &bank, &map, params).unwrap();
    assert_eq!(t.mesh.vertices(), tpl.vertices());
    let params = TransferParams { delta: 1.0, kappa: 5, seed: 4 };
    let t = transfer_expression(&tpl, &[1, 0, 1, 0], &[1, 0, 1, 0], &bank, &map, params).unwrap();
    assert_eq!(t.mesh.vertices(), tpl.vertices());
}

#[test]
fn single_subject_identity_map_is_plain_arithmetic() {
    let (tpl, bank) = bank(4, 3);
    let map = build_map(&tpl, &tpl, MapOptions::default()).unwrap();
    let s = [0u8, 1, 0, 0];
    let e = [1u8, 0, 0, 1];
    let t = transfer_with_subjects(&tpl, &s, &e, &bank, &map, 1.0, &[2]).unwrap();
    let ys = synthesize_oracle(&bank, 2, &s);
    let ye = synthesize_oracle(&bank, 2, &e);
    let expected: Vec<Vec3> = tpl
        .vertices()
        .iter()
        .zip(ys.iter().zip(&ye))
        .map(|(x, (a, b))| x + (b - a))
        .collect();
    assert!(max_delta(t.mesh.vertices(), &expected) < 1e-12);
}

#[test]
fn ensemble_is_the_mean_of_its_members() {
    let (tpl, bank) = bank(8, 5);
    let map = build_map(&tpl, &tpl, MapOptions::default()).unwrap();
    let params = TransferParams { delta: 0.7, kappa: 5, seed: 9 };
    let s = [0u8; AUS];
    let e = [1u8, 1, 0, 0];
    let ens = transfer_expression(&tpl, &s, &e, &bank, &map, params).unwrap();
    assert_eq!(ens.subjects, sample_subjects(8, 5, 9).unwrap());
    let mut mean = vec![Vec3::zeros(); tpl.vertex_count()];
    for &k in &ens.subjects {
        let one = transfer_with_subjects(&tpl, &s, &e, &bank, &map, 0.7, &[k]).unwrap();
        for (m, v) in mean.iter_mut().zip(one.mesh.vertices()) {
            *m += v / ens.subjects.len() as f64;
        }
    }
    assert!(max_delta(ens.mesh.vertices(), &mean) < 1e-10);
    let again = transfer_expression(&tpl, &s, &e, &bank, &map, params).unwrap();
    assert_eq!(again.mesh.vertices(), ens.mesh.vertices());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn transfer_is_linear_in_intensity(d1 in 0.0f64..2.0, d2 in 0.0f64..2.0, seed in 0u64..100, bits in 0u8..16) {
        let (tpl, bank) = bank(6, seed);
        let map = build_map(&tpl, &tpl, MapOptions::default()).unwrap();
        let e: Vec<u8> = (0..AUS).map(|a| (bits >> a) & 1).collect();
        let s = [0u8; AUS];
        let run = |d: f64| {
            transfer_expression(&tpl, &s, &e, &bank, &map, TransferParams { delta: d, kappa: 3, seed })
                .unwrap()
                .mesh
        };
        let (a, b, ab) = (run(d1), run(d2), run(d1 + d2));
        for (((x, p), q), r) in tpl.vertices().iter().zip(a.vertices()).zip(b.vertices()).zip(ab.vertices()) {
            let lhs = p + q - x * 2.0;
            let rhs = r - x;
            prop_assert!((lhs - rhs).amax() < 1e-10);
        }
        prop_assert_eq!(ab.faces(), tpl.faces());
    }

    #[test]
    fn deformation_is_antisymmetric(seed in 0u64..100, s_bits in 0u8..16, e_bits in 0u8..16) {
        let (_, bank) = bank(2, seed);
        let s: Vec<u8> = (0..AUS).map(|a| (s_bits >> a) & 1).collect();
        let e: Vec<u8> = (0..AUS).map(|a| (e_bits >> a) & 1).collect();
        let fwd = bank.deformation_by_index(1, &s, &e).unwrap();
        let back = bank.deformation_by_index(1, &e, &s).unwrap();
        for (f, b) in fwd.iter().zip(&back) {
            prop_assert!((f + b).amax() < 1e-12);
        }
    }
}
