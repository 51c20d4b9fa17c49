#![allow(dead_code)]

use std::sync::OnceLock;

use morphfit::model::BilinearModel;
use morphfit::spectral::{eigenbasis, graph_laplacian, SpectralBasis};
use morphfit::synthkit::{make_synthetic_model, SyntheticSpec};

/// Full-size synthetic model shared by the tests of one binary.
pub fn default_model() -> &'static BilinearModel {
    static MODEL: OnceLock<BilinearModel> = OnceLock::new();
    MODEL.get_or_init(|| make_synthetic_model(&SyntheticSpec::default()).expect("default synthetic model"))
}

/// Small model for fast tests.
pub fn small_spec() -> SyntheticSpec {
    SyntheticSpec {
        n_vertices: 300,
        n_identity: 10,
        n_expression: 8,
        n_landmarks: 40,
        smoothing_steps: 10,
        ..SyntheticSpec::default()
    }
}

pub fn small_model() -> &'static BilinearModel {
    static MODEL: OnceLock<BilinearModel> = OnceLock::new();
    MODEL.get_or_init(|| make_synthetic_model(&small_spec()).expect("small synthetic model"))
}

/// First 100 Laplacian eigenvectors of the default model.
pub fn default_basis() -> &'static SpectralBasis {
    static BASIS: OnceLock<SpectralBasis> = OnceLock::new();
    BASIS.get_or_init(|| {
        let model = default_model();
        let lap = graph_laplacian(model.n_vertices(), model.triangles()).expect("connected");
        eigenbasis(&lap, 100, model.mesh_hash()).expect("basis")
    })
}

use morphfit::model::ModelParts;

/// Hand-built model on six non-coplanar vertices, all of them landmarks.
pub fn toy_model(n_identity: usize, n_expression: usize, tensor: Vec<f64>) -> BilinearModel {
    BilinearModel::new(ModelParts {
        n_vertices: 6,
        n_identity,
        n_expression,
        tensor,
        triangles: vec![[0, 1, 2], [0, 2, 3], [0, 3, 4], [0, 4, 5]],
        uv: vec![[0.5, 0.5], [0.9, 0.5], [0.7, 0.1], [0.3, 0.1], [0.1, 0.5], [0.3, 0.9]],
        semantic: vec![0; 6],
        landmarks: (0..6).collect(),
        neutral_expression: {
            let mut e = vec![0.0; n_expression];
            e[0] = 1.0;
            e
        },
    })
    .expect("toy model")
}

/// Toy tensor with a well-spread mean shape in slot (0, 0) and random
/// remaining slots.
pub fn toy_tensor(n_identity: usize, n_expression: usize, seed: u64) -> Vec<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mean = [
        [0.0, 0.0, 30.0],
        [40.0, 0.0, 10.0],
        [20.0, 35.0, 5.0],
        [-20.0, 35.0, 0.0],
        [-40.0, 0.0, 12.0],
        [-10.0, -40.0, 20.0],
    ];
    let mut t = Vec::with_capacity(18 * n_identity * n_expression);
    for i in 0..n_identity {
        for j in 0..n_expression {
            for v in 0..6 {
                for c in 0..3 {
                    t.push(if i == 0 && j == 0 { mean[v][c] } else { rng.random_range(-4.0..4.0) });
                }
            }
        }
    }
    t
}

/// One-identity, one-expression model whose only slot is the given mesh.
pub fn mesh_model(vertices: &[[f64; 3]], triangles: Vec<[u32; 3]>, uv: Vec<[f64; 2]>, semantic: Vec<u8>) -> BilinearModel {
    BilinearModel::new(ModelParts {
        n_vertices: vertices.len(),
        n_identity: 1,
        n_expression: 1,
        tensor: vertices.iter().flatten().copied().collect(),
        triangles,
        uv,
        semantic,
        landmarks: (0..vertices.len() as u32).collect(),
        neutral_expression: vec![1.0],
    })
    .expect("mesh model")
}
