//! Graph-Laplacian spectral basis for per-vertex displacement fields.
//!
//! One scalar basis (the eigenvectors of the `k` smallest non-zero
//! eigenvalues) is shared by the x, y and z components of a field, so a
//! field encodes to `3k` coefficients laid out as three axis blocks.

use std::collections::VecDeque;

use thiserror::Error;

use crate::linalg::{symmetric_eigen, CsrMatrix, SymmetricEigen};
use crate::model::{cross, dot3, mesh_edges, norm3, sub, Shape};

#[derive(Debug, Error)]
pub enum SpectralError {
    #[error("mesh is disconnected: {components} connected components")]
    Disconnected { components: usize },
    #[error("laplacian has {count} numerically-zero eigenvalues; the mesh must be connected")]
    RepeatedZeroEigenvalue { count: usize },
    #[error("requested k = {k} but a mesh with {n} vertices has at most {max} non-zero eigenpairs")]
    InvalidK { k: usize, n: usize, max: usize },
    #[error("mesh hash mismatch: basis built for {basis}, field belongs to {field}")]
    MeshMismatch { basis: String, field: String },
    #[error("size mismatch for {what}: expected {expected}, got {got}")]
    Sizing {
        what: &'static str,
        expected: usize,
        got: usize,
    },
}

/// Edge weighting used when assembling the Laplacian.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LaplacianWeights {
    /// Combinatorial `Degree - Adjacency`.
    #[default]
    Uniform,
    /// Cotangent weights of a reference shape.
    Cotangent,
}

/// Number of connected components of the vertex graph induced by `triangles`.
pub fn connected_components(n_vertices: usize, triangles: &[[u32; 3]]) -> usize {
    let mut adj = vec![Vec::new(); n_vertices];
    for (a, b) in mesh_edges(triangles) {
        adj[a as usize].push(b as usize);
        adj[b as usize].push(a as usize);
    }
    let mut seen = vec![false; n_vertices];
    let mut components = 0;
    let mut queue = VecDeque::new();
    for start in 0..n_vertices {
        if seen[start] {
            continue;
        }
        components += 1;
        seen[start] = true;
        queue.push_back(start);
        while let Some(v) = queue.pop_front() {
            for &w in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    queue.push_back(w);
                }
            }
        }
    }
    components
}

/// Combinatorial Laplacian `L = D - A` of the mesh edge graph.
pub fn graph_laplacian(n_vertices: usize, triangles: &[[u32; 3]]) -> Result<CsrMatrix, SpectralError> {
    let components = connected_components(n_vertices, triangles);
    if components != 1 {
        return Err(SpectralError::Disconnected { components });
    }
    let mut trip = Vec::new();
    let mut degree = vec![0.0; n_vertices];
    for (a, b) in mesh_edges(triangles) {
        let (a, b) = (a as usize, b as usize);
        trip.push((a, b, -1.0));
        trip.push((b, a, -1.0));
        degree[a] += 1.0;
        degree[b] += 1.0;
    }
    trip.extend(degree.iter().enumerate().map(|(v, &d)| (v, v, d)));
    Ok(CsrMatrix::from_triplets(n_vertices, n_vertices, &trip))
}

/// Cotangent Laplacian of `shape`: off-diagonal `-(cot α + cot β) / 2`.
pub fn cotangent_laplacian(shape: &Shape, triangles: &[[u32; 3]]) -> Result<CsrMatrix, SpectralError> {
    let n = shape.n_vertices();
    let components = connected_components(n, triangles);
    if components != 1 {
        return Err(SpectralError::Disconnected { components });
    }
    let mut trip = Vec::new();
    let mut diag = vec![0.0; n];
    for tri in triangles {
        for corner in 0..3 {
            let o = tri[corner] as usize;
            let a = tri[(corner + 1) % 3] as usize;
            let b = tri[(corner + 2) % 3] as usize;
            let ea = sub(shape.vertex(a), shape.vertex(o));
            let eb = sub(shape.vertex(b), shape.vertex(o));
            let sin = norm3(cross(ea, eb));
            if sin <= 0.0 {
                continue;
            }
            let w = 0.5 * dot3(ea, eb) / sin;
            trip.push((a, b, -w));
            trip.push((b, a, -w));
            diag[a] += w;
            diag[b] += w;
        }
    }
    trip.extend(diag.iter().enumerate().map(|(v, &d)| (v, v, d)));
    Ok(CsrMatrix::from_triplets(n, n, &trip))
}

/// All eigenpairs of a (small, dense-able) sparse symmetric matrix.
pub fn full_spectrum(laplacian: &CsrMatrix) -> SymmetricEigen {
    symmetric_eigen(&laplacian.to_dense(), laplacian.n_rows())
}

/// Orthonormal eigenvectors for the `k` smallest strictly-positive eigenvalues.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralBasis {
    eigenvalues: Vec<f64>,
    /// Column-major `N x k`: vector `i` is `vectors[i * N..(i + 1) * N]`.
    vectors: Vec<f64>,
    n_vertices: usize,
    mesh_hash: String,
}

/// Per-vertex displacement vectors, mm.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    pub vectors: Vec<[f64; 3]>,
}

impl DisplacementField {
    pub fn zeros(n: usize) -> Self {
        Self {
            vectors: vec![[0.0; 3]; n],
        }
    }

    pub fn between(from: &Shape, to: &Shape) -> Self {
        assert_eq!(from.n_vertices(), to.n_vertices());
        Self {
            vectors: from.vertices().zip(to.vertices()).map(|(a, b)| sub(b, a)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Frobenius norm over all components.
    pub fn norm(&self) -> f64 {
        self.vectors.iter().map(|v| dot3(*v, *v)).sum::<f64>().sqrt()
    }

    pub fn max_length(&self) -> f64 {
        self.vectors.iter().map(|v| norm3(*v)).fold(0.0, f64::max)
    }
}

/// `3k` coefficients: x block, then y block, then z block.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralCoeffs {
    pub k: usize,
    pub values: Vec<f64>,
}

impl SpectralCoeffs {
    pub fn axis(&self, axis: usize) -> &[f64] {
        &self.values[axis * self.k..(axis + 1) * self.k]
    }
}

/// Numerical-zero threshold for Laplacian eigenvalues.
fn zero_threshold(values: &[f64]) -> f64 {
    let scale = values.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    1e-9 * scale
}

/// The `k` smallest non-zero eigenpairs of `laplacian`, the constant null
/// vector excluded. Each vector's first entry above `1e-10` in magnitude is
/// made positive.
pub fn eigenbasis(laplacian: &CsrMatrix, k: usize, mesh_hash: impl Into<String>) -> Result<SpectralBasis, SpectralError> {
    let n = laplacian.n_rows();
    let max = n.saturating_sub(1);
    if k == 0 || k > max {
        return Err(SpectralError::InvalidK { k, n, max });
    }
    let eig = full_spectrum(laplacian);
    SpectralBasis::from_spectrum(&eig, k, mesh_hash)
}

impl SpectralBasis {
    /// Selects the first `k` non-zero eigenpairs of a precomputed spectrum.
    pub fn from_spectrum(eig: &SymmetricEigen, k: usize, mesh_hash: impl Into<String>) -> Result<Self, SpectralError> {
        let n = eig.n;
        let max = n.saturating_sub(1);
        if k == 0 || k > max {
            return Err(SpectralError::InvalidK { k, n, max });
        }
        let tol = zero_threshold(&eig.values);
        let zeros = eig.values.iter().filter(|v| v.abs() <= tol).count();
        if zeros != 1 {
            return Err(SpectralError::RepeatedZeroEigenvalue { count: zeros });
        }
        let mut vectors = Vec::with_capacity(n * k);
        for i in 1..=k {
            let mut v = eig.vector(i).to_vec();
            if let Some(first) = v.iter().find(|x| x.abs() > 1e-10) {
                if *first < 0.0 {
                    v.iter_mut().for_each(|x| *x = -*x);
                }
            }
            vectors.extend(v);
        }
        Ok(Self {
            eigenvalues: eig.values[1..=k].to_vec(),
            vectors,
            n_vertices: n,
            mesh_hash: mesh_hash.into(),
        })
    }

    /// Builds a basis from stored parts, e.g. after loading from disk.
    pub fn from_parts(
        eigenvalues: Vec<f64>,
        vectors: Vec<f64>,
        n_vertices: usize,
        mesh_hash: impl Into<String>,
    ) -> Result<Self, SpectralError> {
        let k = eigenvalues.len();
        if vectors.len() != n_vertices * k {
            return Err(SpectralError::Sizing {
                what: "basis vectors",
                expected: n_vertices * k,
                got: vectors.len(),
            });
        }
        Ok(Self {
            eigenvalues,
            vectors,
            n_vertices,
            mesh_hash: mesh_hash.into(),
        })
    }

    pub fn k(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn n_vertices(&self) -> usize {
        self.n_vertices
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn mesh_hash(&self) -> &str {
        &self.mesh_hash
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.n_vertices..(i + 1) * self.n_vertices]
    }

    pub fn vectors_flat(&self) -> &[f64] {
        &self.vectors
    }

    /// Restriction to the first `k` vectors.
    pub fn truncated(&self, k: usize) -> SpectralBasis {
        assert!(k <= self.k());
        SpectralBasis {
            eigenvalues: self.eigenvalues[..k].to_vec(),
            vectors: self.vectors[..k * self.n_vertices].to_vec(),
            n_vertices: self.n_vertices,
            mesh_hash: self.mesh_hash.clone(),
        }
    }

    fn check_mesh(&self, mesh_hash: &str) -> Result<(), SpectralError> {
        if mesh_hash != self.mesh_hash {
            return Err(SpectralError::MeshMismatch {
                basis: self.mesh_hash.clone(),
                field: mesh_hash.to_string(),
            });
        }
        Ok(())
    }

    /// Per-axis projection coefficients `Vᵀ f`.
    pub fn encode(&self, field: &DisplacementField, mesh_hash: &str) -> Result<SpectralCoeffs, SpectralError> {
        self.check_mesh(mesh_hash)?;
        if field.len() != self.n_vertices {
            return Err(SpectralError::Sizing {
                what: "displacement field",
                expected: self.n_vertices,
                got: field.len(),
            });
        }
        let k = self.k();
        let mut values = vec![0.0; 3 * k];
        for i in 0..k {
            let basis = self.vector(i);
            let mut acc = [0.0; 3];
            for (b, d) in basis.iter().zip(&field.vectors) {
                acc[0] += b * d[0];
                acc[1] += b * d[1];
                acc[2] += b * d[2];
            }
            for axis in 0..3 {
                values[axis * k + i] = acc[axis];
            }
        }
        Ok(SpectralCoeffs { k, values })
    }

    /// `V c` per axis.
    pub fn decode(&self, coeffs: &SpectralCoeffs) -> Result<DisplacementField, SpectralError> {
        let k = self.k();
        if coeffs.k != k || coeffs.values.len() != 3 * k {
            return Err(SpectralError::Sizing {
                what: "spectral coefficients",
                expected: 3 * k,
                got: coeffs.values.len(),
            });
        }
        let mut vectors = vec![[0.0; 3]; self.n_vertices];
        for i in 0..k {
            let c = [coeffs.values[i], coeffs.values[k + i], coeffs.values[2 * k + i]];
            for (out, b) in vectors.iter_mut().zip(self.vector(i)) {
                out[0] += c[0] * b;
                out[1] += c[1] * b;
                out[2] += c[2] * b;
            }
        }
        Ok(DisplacementField { vectors })
    }

    /// `decode(encode(field))`.
    pub fn project(&self, field: &DisplacementField, mesh_hash: &str) -> Result<DisplacementField, SpectralError> {
        self.decode(&self.encode(field, mesh_hash)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cycle(n: usize) -> Vec<[u32; 3]> {
        // Degenerate "triangles" (a, b, b) contribute exactly the edge a-b.
        (0..n).map(|i| [i as u32, ((i + 1) % n) as u32, ((i + 1) % n) as u32]).collect()
    }

    #[test]
    fn path_graph_laplacian() {
        let l = graph_laplacian(3, &[[0, 1, 1], [1, 2, 2]]).unwrap();
        assert_eq!(l.to_dense(), vec![1.0, -1.0, 0.0, -1.0, 2.0, -1.0, 0.0, -1.0, 1.0]);
    }

    #[test]
    fn disconnected_mesh_is_rejected() {
        let err = graph_laplacian(6, &[[0, 1, 2], [3, 4, 5]]).unwrap_err();
        assert!(matches!(err, SpectralError::Disconnected { components: 2 }));
    }

    #[test]
    fn four_cycle_spectrum() {
        let l = graph_laplacian(4, &cycle(4)).unwrap();
        let dense = nalgebra::DMatrix::from_row_slice(4, 4, &l.to_dense());
        let mut oracle: Vec<f64> = dense.symmetric_eigen().eigenvalues.iter().copied().collect();
        oracle.sort_by(f64::total_cmp);
        let ours = full_spectrum(&l);
        for ((a, b), expected) in ours.values.iter().zip(&oracle).zip([0.0, 2.0, 2.0, 4.0]) {
            assert!((a - b).abs() < 1e-12);
            assert!((a - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn six_cycle_first_pair() {
        let l = graph_laplacian(6, &cycle(6)).unwrap();
        let basis = eigenbasis(&l, 2, "c6").unwrap();
        for &lam in basis.eigenvalues() {
            assert!((lam - (2.0 - 2.0 * (std::f64::consts::PI / 3.0).cos())).abs() < 1e-10);
        }
        for i in 0..2 {
            let v = basis.vector(i);
            assert!(v.iter().sum::<f64>().abs() < 1e-12);
            assert!((v.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let cross: f64 = basis.vector(0).iter().zip(basis.vector(1)).map(|(a, b)| a * b).sum();
        assert!(cross.abs() < 1e-12);
    }

    #[test]
    fn invalid_k_and_repeated_zero() {
        let l = graph_laplacian(4, &cycle(4)).unwrap();
        assert!(matches!(eigenbasis(&l, 4, ""), Err(SpectralError::InvalidK { .. })));
        assert!(matches!(eigenbasis(&l, 0, ""), Err(SpectralError::InvalidK { .. })));
        // Two disjoint edges assembled without the connectivity check.
        let l = CsrMatrix::from_triplets(
            4,
            4,
            &[
                (0, 0, 1.0),
                (0, 1, -1.0),
                (1, 0, -1.0),
                (1, 1, 1.0),
                (2, 2, 1.0),
                (2, 3, -1.0),
                (3, 2, -1.0),
                (3, 3, 1.0),
            ],
        );
        assert!(matches!(
            eigenbasis(&l, 1, ""),
            Err(SpectralError::RepeatedZeroEigenvalue { count: 2 })
        ));
    }

    fn grid(rows: usize, cols: usize) -> Vec<[u32; 3]> {
        let mut tris = Vec::new();
        for r in 0..rows - 1 {
            for c in 0..cols - 1 {
                let a = (r * cols + c) as u32;
                let b = a + 1;
                let d = a + cols as u32;
                tris.push([a, d, b]);
                tris.push([b, d, d + 1]);
            }
        }
        tris
    }

    #[test]
    fn full_basis_reconstructs_zero_mean_fields() {
        let tris = grid(4, 5);
        let l = graph_laplacian(20, &tris).unwrap();
        let basis = eigenbasis(&l, 19, "g").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut field: Vec<[f64; 3]> = (0..20).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        for axis in 0..3 {
            let mean = field.iter().map(|v| v[axis]).sum::<f64>() / 20.0;
            field.iter_mut().for_each(|v| v[axis] -= mean);
        }
        let field = DisplacementField { vectors: field };
        let back = basis.project(&field, "g").unwrap();
        for (a, b) in back.vectors.iter().zip(&field.vectors) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn constant_field_encodes_to_zero_and_hash_is_checked() {
        let tris = grid(3, 4);
        let l = graph_laplacian(12, &tris).unwrap();
        let basis = eigenbasis(&l, 5, "h").unwrap();
        let field = DisplacementField {
            vectors: vec![[1.0, -2.0, 0.5]; 12],
        };
        let c = basis.encode(&field, "h").unwrap();
        assert!(c.values.iter().all(|x| x.abs() < 1e-12));
        assert!(matches!(
            basis.encode(&field, "other"),
            Err(SpectralError::MeshMismatch { .. })
        ));
    }

    #[test]
    fn decode_then_encode_is_identity() {
        let tris = grid(5, 5);
        let l = graph_laplacian(25, &tris).unwrap();
        let basis = eigenbasis(&l, 8, "x").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let coeffs = SpectralCoeffs {
            k: 8,
            values: (0..24).map(|_| rng.random_range(-1.0..1.0)).collect(),
        };
        let field = basis.decode(&coeffs).unwrap();
        let back = basis.encode(&field, "x").unwrap();
        for (a, b) in back.values.iter().zip(&coeffs.values) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn cotangent_laplacian_has_zero_row_sums() {
        let tris = grid(3, 3);
        let verts: Vec<[f64; 3]> = (0..9).map(|v| [(v % 3) as f64, (v / 3) as f64, 0.1 * (v as f64).sin()]).collect();
        let l = cotangent_laplacian(&Shape::from_vertices(&verts), &tris).unwrap();
        assert!(l.is_symmetric(1e-14));
        for r in 0..9 {
            assert!(l.row(r).map(|(_, v)| v).sum::<f64>().abs() < 1e-12);
        }
    }
}
