mod common;

use common::toy_tensor;
use morphfit::model::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_model(n: usize, n_a: usize, n_e: usize, seed: u64) -> BilinearModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensor = (0..3 * n * n_a * n_e).map(|_| rng.random_range(-5.0..5.0)).collect();
    let triangles = (1..n as u32 - 1).map(|i| [0, i, i + 1]).collect();
    BilinearModel::new(ModelParts {
        n_vertices: n,
        n_identity: n_a,
        n_expression: n_e,
        tensor,
        triangles,
        uv: (0..n).map(|_| [rng.random(), rng.random()]).collect(),
        semantic: (0..n).map(|_| rng.random_range(0..SemanticLabel::COUNT as u8)).collect(),
        landmarks: (0..n as u32).step_by(2).collect(),
        neutral_expression: (0..n_e).map(|j| (j == 0) as u8 as f64).collect(),
    })
    .unwrap()
}

fn random_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
}

fn triple_loop(model: &BilinearModel, a: &[f64], e: &[f64]) -> Vec<f64> {
    let rows = 3 * model.n_vertices();
    let mut out = vec![0.0; rows];
    for (r, o) in out.iter_mut().enumerate() {
        for (i, ai) in a.iter().enumerate() {
            for (j, ej) in e.iter().enumerate() {
                *o += model.entry(r, i, j) * ai * ej;
            }
        }
    }
    out
}

fn close(a: &[f64], b: &[f64], rel: f64) -> bool {
    let scale = b.iter().map(|x| x.abs()).fold(1e-300, f64::max);
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= rel * scale)
}

#[test]
fn contraction_matches_triple_loop() {
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let (n, n_a, n_e) = (rng.random_range(3..12), rng.random_range(1..6), rng.random_range(1..6));
        let model = random_model(n, n_a, n_e, seed);
        let a = random_vec(n_a, &mut rng);
        let e = random_vec(n_e, &mut rng);
        let got = model.contract(&a, &e).unwrap();
        assert!(close(&got.positions, &triple_loop(&model, &a, &e), 1e-12));
    }
}

#[test]
fn one_hot_coefficients_select_a_slice() {
    let model = random_model(4, 2, 3, 1);
    for i in 0..2 {
        for j in 0..3 {
            let a: Vec<f64> = (0..2).map(|k| (k == i) as u8 as f64).collect();
            let e: Vec<f64> = (0..3).map(|k| (k == j) as u8 as f64).collect();
            assert_eq!(model.contract(&a, &e).unwrap().positions, model.slice(i, j));
        }
    }
    assert!(matches!(model.contract(&[1.0], &[0.0; 3]), Err(ModelError::Sizing { .. })));
}

#[test]
fn bases_reproduce_the_contraction() {
    let model = random_model(5, 3, 4, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random_vec(3, &mut rng);
    let e = random_vec(4, &mut rng);
    let full = model.contract(&a, &e).unwrap().positions;
    let eb = model.expression_basis(&a).unwrap();
    let ib = model.identity_basis(&e).unwrap();
    let ev = nalgebra::DVector::from_column_slice(&e);
    let av = nalgebra::DVector::from_column_slice(&a);
    assert!(close((&eb * ev).as_slice(), &full, 1e-12));
    assert!(close((&ib * av).as_slice(), &full, 1e-12));
    assert!(model.expression_basis(&[0.0; 3]).unwrap().iter().all(|&x| x == 0.0));
    assert!(model.identity_basis(&[0.0; 4]).unwrap().iter().all(|&x| x == 0.0));
    for j in 0..4 {
        let onehot: Vec<f64> = (0..4).map(|k| (k == j) as u8 as f64).collect();
        assert_eq!(model.identity_basis(&onehot).unwrap().column(0).as_slice(), model.slice(0, j));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn contraction_is_bilinear(seed in 0u64..10_000, alpha in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = random_model(6, 3, 4, seed);
        let (a1, a2) = (random_vec(3, &mut rng), random_vec(3, &mut rng));
        let (e1, e2) = (random_vec(4, &mut rng), random_vec(4, &mut rng));
        let c = |a: &[f64], e: &[f64]| model.contract(a, e).unwrap().positions;
        let sum = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p + q).collect::<Vec<_>>();
        let scale = |x: &[f64], s: f64| x.iter().map(|p| p * s).collect::<Vec<_>>();
        prop_assert!(close(&c(&a1, &sum(&e1, &e2)), &sum(&c(&a1, &e1), &c(&a1, &e2)), 1e-12));
        prop_assert!(close(&c(&sum(&a1, &a2), &e1), &sum(&c(&a1, &e1), &c(&a2, &e1)), 1e-12));
        prop_assert!(close(&c(&scale(&a1, alpha), &e1), &scale(&c(&a1, &e1), alpha), 1e-12));
        prop_assert!(close(&c(&a1, &scale(&e1, alpha)), &scale(&c(&a1, &e1), alpha), 1e-12));
    }
}

#[test]
fn file_round_trip_and_errors() {
    let model = random_model(7, 3, 2, 5);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.mfit");
    save_model(&model, &path).unwrap();
    assert_eq!(load_model(&path).unwrap(), model);
    let bytes = std::fs::read(&path).unwrap();
    assert!(bytes.starts_with(b"MFIT0001"));

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_model(&bad), Err(ModelFileError::BadMagic)));
    let mut version = bytes.clone();
    version[7] = b'9';
    assert!(matches!(decode_model(&version), Err(ModelFileError::VersionMismatch { .. })));
    assert!(matches!(decode_model(&bytes[..bytes.len() / 2]), Err(ModelFileError::TruncatedPayload(_))));
    assert!(matches!(load_model(dir.path().join("missing")), Err(ModelFileError::Io(_))));
}

#[test]
fn invalid_parts_rejected() {
    let parts = || ModelParts {
        n_vertices: 6,
        n_identity: 1,
        n_expression: 1,
        tensor: toy_tensor(1, 1, 0),
        triangles: vec![[0, 1, 2]],
        uv: vec![[0.5, 0.5]; 6],
        semantic: vec![0; 6],
        landmarks: vec![0, 1],
        neutral_expression: vec![1.0],
    };
    assert!(BilinearModel::new(parts()).is_ok());
    assert!(BilinearModel::new(ModelParts { triangles: vec![[0, 1, 6]], ..parts() }).is_err());
    assert!(BilinearModel::new(ModelParts { uv: vec![[1.5, 0.5]; 6], ..parts() }).is_err());
    assert!(BilinearModel::new(ModelParts { semantic: vec![9; 6], ..parts() }).is_err());
    assert!(BilinearModel::new(ModelParts { landmarks: vec![6], ..parts() }).is_err());
    assert!(BilinearModel::new(ModelParts { tensor: vec![0.0; 5], ..parts() }).is_err());
}

#[test]
fn attributes_of_a_synthetic_face() {
    let model = common::small_model();
    let shape = model.contract(&{
        let mut a = vec![0.0; model.n_identity()];
        a[0] = 1.0;
        a
    }, model.neutral_expression()).unwrap();
    let attr = model.vertex_attributes(&shape).unwrap();
    for n in &attr.normals {
        assert!(((n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt() - 1.0).abs() < 1e-6);
    }
    assert!(attr.one_ring_area.iter().all(|&a| a > 0.0));
    let doubled = model.vertex_attributes(&shape.scaled(2.0)).unwrap();
    for (a, b) in attr.one_ring_area.iter().zip(&doubled.one_ring_area) {
        assert!((4.0 * a - b).abs() < 1e-9 * b);
    }
    for (a, b) in attr.curvature.iter().zip(&doubled.curvature) {
        assert!((a - 2.0 * b).abs() < 1e-9 * a.abs().max(1e-9));
    }
}
