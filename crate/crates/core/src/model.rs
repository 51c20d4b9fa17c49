//! Bilinear face model: a rank-3 tensor over (vertex coordinate, identity,
//! expression), plus the mesh topology, UV layout and semantic labels that
//! every shape produced by the model shares.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("size mismatch for {what}: expected {expected}, got {got}")]
    Sizing {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("triangle {triangle} references vertex {vertex} but the mesh has {n_vertices} vertices")]
    TriangleIndex {
        triangle: usize,
        vertex: u32,
        n_vertices: usize,
    },
    #[error("landmark {index} references vertex {vertex} but the mesh has {n_vertices} vertices")]
    LandmarkIndex {
        index: usize,
        vertex: u32,
        n_vertices: usize,
    },
    #[error("uv coordinate of vertex {vertex} lies outside [0,1]^2: ({u}, {v})")]
    UvOutOfRange { vertex: usize, u: f64, v: f64 },
    #[error("semantic label {label} at vertex {vertex} is not in the legend")]
    UnknownLabel { vertex: usize, label: u8 },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("vertex {0} has no non-degenerate incident triangle")]
    DegenerateVertex(usize),
}

#[derive(Debug, Error)]
pub enum ModelFileError {
    #[error("bad magic: not a model file")]
    BadMagic,
    #[error("unsupported model file version {found:?} (expected {expected:?})")]
    VersionMismatch { found: String, expected: String },
    #[error("truncated payload while reading {0}")]
    TruncatedPayload(&'static str),
    #[error("unsupported tensor layout: strides {0:?}")]
    Layout([u64; 3]),
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error(transparent)]
    Invalid(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Facial region labels carried per vertex and rasterized into UV space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum SemanticLabel {
    Other = 0,
    Eyes = 1,
    Eyebrows = 2,
    Nose = 3,
    Lips = 4,
    InnerMouth = 5,
}

impl SemanticLabel {
    pub const COUNT: usize = 6;

    pub const ALL: [SemanticLabel; 6] = [
        SemanticLabel::Other,
        SemanticLabel::Eyes,
        SemanticLabel::Eyebrows,
        SemanticLabel::Nose,
        SemanticLabel::Lips,
        SemanticLabel::InnerMouth,
    ];

    pub fn from_id(id: u8) -> Option<Self> {
        Self::ALL.get(id as usize).copied()
    }

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            SemanticLabel::Other => "other",
            SemanticLabel::Eyes => "eyes",
            SemanticLabel::Eyebrows => "eyebrows",
            SemanticLabel::Nose => "nose",
            SemanticLabel::Lips => "lips",
            SemanticLabel::InnerMouth => "inner_mouth",
        }
    }
}

/// A face shape: `3N` coordinates in millimeters, grouped per vertex.
#[derive(Debug, Clone, PartialEq)]
pub struct Shape {
    pub positions: Vec<f64>,
}

impl Shape {
    pub fn new(positions: Vec<f64>) -> Self {
        debug_assert_eq!(positions.len() % 3, 0);
        Self { positions }
    }

    pub fn from_vertices(vertices: &[[f64; 3]]) -> Self {
        Self {
            positions: vertices.iter().flatten().copied().collect(),
        }
    }

    pub fn n_vertices(&self) -> usize {
        self.positions.len() / 3
    }

    #[inline]
    pub fn vertex(&self, v: usize) -> [f64; 3] {
        let p = &self.positions[3 * v..3 * v + 3];
        [p[0], p[1], p[2]]
    }

    pub fn vertices(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        self.positions.chunks_exact(3).map(|p| [p[0], p[1], p[2]])
    }

    pub fn scaled(&self, factor: f64) -> Shape {
        Shape::new(self.positions.iter().map(|x| x * factor).collect())
    }

    /// Adds a per-vertex displacement field (same vertex count).
    pub fn displaced(&self, field: &[[f64; 3]]) -> Shape {
        assert_eq!(field.len(), self.n_vertices());
        let mut positions = self.positions.clone();
        for (p, d) in positions.chunks_exact_mut(3).zip(field) {
            p[0] += d[0];
            p[1] += d[1];
            p[2] += d[2];
        }
        Shape::new(positions)
    }

    pub fn is_finite(&self) -> bool {
        self.positions.iter().all(|x| x.is_finite())
    }
}

/// Identity (`a`) and expression (`e`) coefficient vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficients {
    pub identity: Vec<f64>,
    pub expression: Vec<f64>,
}

/// Per-vertex differential attributes of a shape.
#[derive(Debug, Clone, PartialEq)]
pub struct VertexAttributes {
    pub normals: Vec<[f64; 3]>,
    /// Sum of incident triangle areas, mm².
    pub one_ring_area: Vec<f64>,
    /// Signed mean-curvature proxy, mm⁻¹.
    pub curvature: Vec<f64>,
    /// Triangles skipped because their area was zero.
    pub degenerate_triangles: usize,
}

/// Raw constituents of a [`BilinearModel`], validated by [`BilinearModel::new`].
#[derive(Debug, Clone)]
pub struct ModelParts {
    pub n_vertices: usize,
    pub n_identity: usize,
    pub n_expression: usize,
    /// Identity-major: entry `(i, j, r)` lives at `(i * n_expression + j) * 3N + r`.
    pub tensor: Vec<f64>,
    pub triangles: Vec<[u32; 3]>,
    pub uv: Vec<[f64; 2]>,
    pub semantic: Vec<u8>,
    pub landmarks: Vec<u32>,
    pub neutral_expression: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BilinearModel {
    n_vertices: usize,
    n_identity: usize,
    n_expression: usize,
    tensor: Vec<f64>,
    triangles: Vec<[u32; 3]>,
    uv: Vec<[f64; 2]>,
    semantic: Vec<u8>,
    landmarks: Vec<u32>,
    neutral_expression: Vec<f64>,
}

pub const DEFAULT_LANDMARK_COUNT: usize = 96;

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<(), ModelError> {
    if expected == got {
        Ok(())
    } else {
        Err(ModelError::Sizing {
            what,
            expected,
            got,
        })
    }
}

impl BilinearModel {
    pub fn new(parts: ModelParts) -> Result<Self, ModelError> {
        let ModelParts {
            n_vertices,
            n_identity,
            n_expression,
            tensor,
            triangles,
            uv,
            semantic,
            landmarks,
            neutral_expression,
        } = parts;
        check_len("tensor", 3 * n_vertices * n_identity * n_expression, tensor.len())?;
        check_len("uv", n_vertices, uv.len())?;
        check_len("semantic labels", n_vertices, semantic.len())?;
        check_len("neutral expression", n_expression, neutral_expression.len())?;
        if tensor.iter().any(|x| !x.is_finite()) {
            return Err(ModelError::NonFinite("tensor"));
        }
        if neutral_expression.iter().any(|x| !x.is_finite()) {
            return Err(ModelError::NonFinite("neutral expression"));
        }
        for (t, tri) in triangles.iter().enumerate() {
            for &vertex in tri {
                if vertex as usize >= n_vertices {
                    return Err(ModelError::TriangleIndex {
                        triangle: t,
                        vertex,
                        n_vertices,
                    });
                }
            }
        }
        for (vertex, &[u, v]) in uv.iter().enumerate() {
            if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v) {
                return Err(ModelError::UvOutOfRange { vertex, u, v });
            }
        }
        for (vertex, &label) in semantic.iter().enumerate() {
            if SemanticLabel::from_id(label).is_none() {
                return Err(ModelError::UnknownLabel { vertex, label });
            }
        }
        for (index, &vertex) in landmarks.iter().enumerate() {
            if vertex as usize >= n_vertices {
                return Err(ModelError::LandmarkIndex {
                    index,
                    vertex,
                    n_vertices,
                });
            }
        }
        Ok(Self {
            n_vertices,
            n_identity,
            n_expression,
            tensor,
            triangles,
            uv,
            semantic,
            landmarks,
            neutral_expression,
        })
    }

    pub fn n_vertices(&self) -> usize {
        self.n_vertices
    }

    pub fn n_identity(&self) -> usize {
        self.n_identity
    }

    pub fn n_expression(&self) -> usize {
        self.n_expression
    }

    pub fn triangles(&self) -> &[[u32; 3]] {
        &self.triangles
    }

    pub fn uv(&self) -> &[[f64; 2]] {
        &self.uv
    }

    pub fn semantic(&self) -> &[u8] {
        &self.semantic
    }

    pub fn landmarks(&self) -> &[u32] {
        &self.landmarks
    }

    pub fn neutral_expression(&self) -> &[f64] {
        &self.neutral_expression
    }

    pub fn tensor(&self) -> &[f64] {
        &self.tensor
    }

    /// Strides of the flat tensor in (identity, expression, coordinate) order.
    pub fn strides(&self) -> [usize; 3] {
        let rows = 3 * self.n_vertices;
        [self.n_expression * rows, rows, 1]
    }

    /// The `3N` column of the tensor at identity `i`, expression `j`.
    #[inline]
    pub fn slice(&self, i: usize, j: usize) -> &[f64] {
        let rows = 3 * self.n_vertices;
        let start = (i * self.n_expression + j) * rows;
        &self.tensor[start..start + rows]
    }

    #[inline]
    pub fn entry(&self, r: usize, i: usize, j: usize) -> f64 {
        self.tensor[(i * self.n_expression + j) * 3 * self.n_vertices + r]
    }

    pub fn mesh_hash(&self) -> String {
        mesh_hash(self.n_vertices, &self.triangles)
    }

    /// Coordinate rows (`3v`, `3v+1`, `3v+2`) of the landmark vertices.
    pub fn landmark_rows(&self) -> Vec<usize> {
        vertex_rows(&self.landmarks)
    }

    fn check_identity(&self, a: &[f64]) -> Result<(), ModelError> {
        check_len("identity coefficients", self.n_identity, a.len())
    }

    fn check_expression(&self, e: &[f64]) -> Result<(), ModelError> {
        check_len("expression coefficients", self.n_expression, e.len())
    }

    /// Shape for identity `a` and expression `e`: the tensor contracted along
    /// its identity and expression modes.
    pub fn contract(&self, a: &[f64], e: &[f64]) -> Result<Shape, ModelError> {
        self.check_identity(a)?;
        self.check_expression(e)?;
        let rows = 3 * self.n_vertices;
        let mut out = vec![0.0; rows];
        for (i, &ai) in a.iter().enumerate() {
            if ai == 0.0 {
                continue;
            }
            for (j, &ej) in e.iter().enumerate() {
                let w = ai * ej;
                if w == 0.0 {
                    continue;
                }
                for (o, t) in out.iter_mut().zip(self.slice(i, j)) {
                    *o += w * t;
                }
            }
        }
        Ok(Shape::new(out))
    }

    pub fn contract_coeffs(&self, coeffs: &Coefficients) -> Result<Shape, ModelError> {
        self.contract(&coeffs.identity, &coeffs.expression)
    }

    /// `3N x N_e` matrix `B` with `contract(a, e) = B e`.
    pub fn expression_basis(&self, a: &[f64]) -> Result<DMatrix<f64>, ModelError> {
        let rows: Vec<usize> = (0..3 * self.n_vertices).collect();
        self.expression_basis_rows(a, &rows)
    }

    /// Rows `rows` of [`Self::expression_basis`].
    pub fn expression_basis_rows(&self, a: &[f64], rows: &[usize]) -> Result<DMatrix<f64>, ModelError> {
        self.check_identity(a)?;
        let mut basis = DMatrix::zeros(rows.len(), self.n_expression);
        for j in 0..self.n_expression {
            let mut col = basis.column_mut(j);
            for (i, &ai) in a.iter().enumerate() {
                if ai == 0.0 {
                    continue;
                }
                let slice = self.slice(i, j);
                for (k, &r) in rows.iter().enumerate() {
                    col[k] += ai * slice[r];
                }
            }
        }
        Ok(basis)
    }

    /// `3N x N_a` matrix `B` with `contract(a, e) = B a`.
    pub fn identity_basis(&self, e: &[f64]) -> Result<DMatrix<f64>, ModelError> {
        let rows: Vec<usize> = (0..3 * self.n_vertices).collect();
        self.identity_basis_rows(e, &rows)
    }

    pub fn identity_basis_rows(&self, e: &[f64], rows: &[usize]) -> Result<DMatrix<f64>, ModelError> {
        self.check_expression(e)?;
        let mut basis = DMatrix::zeros(rows.len(), self.n_identity);
        for i in 0..self.n_identity {
            let mut col = basis.column_mut(i);
            for (j, &ej) in e.iter().enumerate() {
                if ej == 0.0 {
                    continue;
                }
                let slice = self.slice(i, j);
                for (k, &r) in rows.iter().enumerate() {
                    col[k] += ej * slice[r];
                }
            }
        }
        Ok(basis)
    }

    /// The tensor restricted to coordinate rows `rows`, stored contiguously.
    pub fn row_tensor(&self, rows: &[usize]) -> RowTensor {
        let n = rows.len();
        let mut data = Vec::with_capacity(n * self.n_identity * self.n_expression);
        for i in 0..self.n_identity {
            for j in 0..self.n_expression {
                let slice = self.slice(i, j);
                data.extend(rows.iter().map(|&r| slice[r]));
            }
        }
        RowTensor {
            n_rows: n,
            n_identity: self.n_identity,
            n_expression: self.n_expression,
            data,
        }
    }

    pub fn check_shape(&self, shape: &Shape) -> Result<(), ModelError> {
        check_len("shape coordinates", 3 * self.n_vertices, shape.positions.len())
    }

    /// Normals, one-ring areas and curvature of `shape` on this topology.
    pub fn vertex_attributes(&self, shape: &Shape) -> Result<VertexAttributes, ModelError> {
        self.check_shape(shape)?;
        vertex_attributes(shape, &self.triangles)
    }

    /// Unique undirected edges `(lo, hi)` of the triangle mesh, sorted.
    pub fn edges(&self) -> Vec<(u32, u32)> {
        mesh_edges(&self.triangles)
    }
}

/// Coordinate rows of the given vertices, `[3v, 3v+1, 3v+2]` per vertex.
/// A subset of tensor rows with the same identity-major layout.
#[derive(Debug, Clone, PartialEq)]
pub struct RowTensor {
    n_rows: usize,
    n_identity: usize,
    n_expression: usize,
    data: Vec<f64>,
}

impl RowTensor {
    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    fn slice(&self, i: usize, j: usize) -> &[f64] {
        let start = (i * self.n_expression + j) * self.n_rows;
        &self.data[start..start + self.n_rows]
    }

    pub fn contract(&self, a: &[f64], e: &[f64]) -> Result<Vec<f64>, ModelError> {
        check_len("identity coefficients", self.n_identity, a.len())?;
        check_len("expression coefficients", self.n_expression, e.len())?;
        let mut out = vec![0.0; self.n_rows];
        for (i, &ai) in a.iter().enumerate() {
            for (j, &ej) in e.iter().enumerate() {
                let w = ai * ej;
                if w != 0.0 {
                    out.iter_mut().zip(self.slice(i, j)).for_each(|(o, t)| *o += w * t);
                }
            }
        }
        Ok(out)
    }

    /// `rows x N_e` matrix `B` with `contract(a, e) = B e`.
    pub fn expression_basis(&self, a: &[f64]) -> Result<DMatrix<f64>, ModelError> {
        check_len("identity coefficients", self.n_identity, a.len())?;
        let mut basis = DMatrix::zeros(self.n_rows, self.n_expression);
        for j in 0..self.n_expression {
            let mut col = basis.column_mut(j);
            for (i, &ai) in a.iter().enumerate() {
                if ai != 0.0 {
                    col.iter_mut().zip(self.slice(i, j)).for_each(|(c, t)| *c += ai * t);
                }
            }
        }
        Ok(basis)
    }

    /// `rows x N_a` matrix `B` with `contract(a, e) = B a`.
    pub fn identity_basis(&self, e: &[f64]) -> Result<DMatrix<f64>, ModelError> {
        check_len("expression coefficients", self.n_expression, e.len())?;
        let mut basis = DMatrix::zeros(self.n_rows, self.n_identity);
        for i in 0..self.n_identity {
            let mut col = basis.column_mut(i);
            for (j, &ej) in e.iter().enumerate() {
                if ej != 0.0 {
                    col.iter_mut().zip(self.slice(i, j)).for_each(|(c, t)| *c += ej * t);
                }
            }
        }
        Ok(basis)
    }
}

pub fn vertex_rows(vertices: &[u32]) -> Vec<usize> {
    vertices
        .iter()
        .flat_map(|&v| {
            let v = v as usize;
            [3 * v, 3 * v + 1, 3 * v + 2]
        })
        .collect()
}

pub fn mesh_edges(triangles: &[[u32; 3]]) -> Vec<(u32, u32)> {
    let mut edges: Vec<(u32, u32)> = triangles
        .iter()
        .flat_map(|t| [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])])
        .filter(|(a, b)| a != b)
        .map(|(a, b)| (a.min(b), a.max(b)))
        .collect();
    edges.sort_unstable();
    edges.dedup();
    edges
}

/// Stable identifier of a mesh topology.
pub fn mesh_hash(n_vertices: usize, triangles: &[[u32; 3]]) -> String {
    let mut hasher = Sha256::new();
    hasher.update((n_vertices as u64).to_le_bytes());
    for tri in triangles {
        for v in tri {
            hasher.update(v.to_le_bytes());
        }
    }
    let digest = hasher.finalize();
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

#[inline]
pub(crate) fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub(crate) fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub(crate) fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub(crate) fn norm3(a: [f64; 3]) -> f64 {
    dot3(a, a).sqrt()
}

/// Area-weighted vertex normals, one-ring areas, and the curvature proxy
/// `dot(n, (L x)_v) / one_ring_area(v)` with `L` the uniform graph Laplacian.
pub fn vertex_attributes(shape: &Shape, triangles: &[[u32; 3]]) -> Result<VertexAttributes, ModelError> {
    let n = shape.n_vertices();
    let mut normal_acc = vec![[0.0f64; 3]; n];
    let mut area = vec![0.0f64; n];
    let mut degenerate_triangles = 0;
    for tri in triangles {
        let [a, b, c] = tri.map(|v| shape.vertex(v as usize));
        let nrm = cross(sub(b, a), sub(c, a));
        let twice_area = norm3(nrm);
        if twice_area <= 0.0 || !twice_area.is_finite() {
            degenerate_triangles += 1;
            continue;
        }
        for &v in tri {
            let acc = &mut normal_acc[v as usize];
            acc[0] += nrm[0];
            acc[1] += nrm[1];
            acc[2] += nrm[2];
            area[v as usize] += 0.5 * twice_area;
        }
    }
    if degenerate_triangles > 0 {
        log::warn!("{degenerate_triangles} degenerate triangles skipped in vertex attributes");
    }

    let mut laplace = vec![[0.0f64; 3]; n];
    for (lo, hi) in mesh_edges(triangles) {
        let (lo, hi) = (lo as usize, hi as usize);
        let d = sub(shape.vertex(lo), shape.vertex(hi));
        for k in 0..3 {
            laplace[lo][k] += d[k];
            laplace[hi][k] -= d[k];
        }
    }

    let mut normals = Vec::with_capacity(n);
    let mut curvature = Vec::with_capacity(n);
    for v in 0..n {
        let len = norm3(normal_acc[v]);
        if len <= 0.0 || area[v] <= 0.0 {
            return Err(ModelError::DegenerateVertex(v));
        }
        let nrm = normal_acc[v].map(|x| x / len);
        curvature.push(dot3(nrm, laplace[v]) / area[v]);
        normals.push(nrm);
    }
    Ok(VertexAttributes {
        normals,
        one_ring_area: area,
        curvature,
        degenerate_triangles,
    })
}

const MAGIC: &[u8; 8] = b"MFIT0001";

/// Writes the binary model file.
///
/// Layout (little-endian): magic `MFIT0001`; `u32` counts N, N_a, N_e,
/// triangle count, landmark count; `u64` tensor strides (identity,
/// expression, coordinate); tensor `f64`; triangles `u32`; UV `f64`;
/// semantic labels `u8`; landmark indices `u32`; neutral expression `f64`.
pub fn save_model(model: &BilinearModel, path: impl AsRef<Path>) -> Result<(), ModelFileError> {
    fs::write(path, encode_model(model))?;
    Ok(())
}

pub fn encode_model(model: &BilinearModel) -> Vec<u8> {
    let mut buf = Vec::with_capacity(64 + model.tensor.len() * 8);
    buf.extend_from_slice(MAGIC);
    for count in [
        model.n_vertices,
        model.n_identity,
        model.n_expression,
        model.triangles.len(),
        model.landmarks.len(),
    ] {
        buf.extend_from_slice(&(count as u32).to_le_bytes());
    }
    for stride in model.strides() {
        buf.extend_from_slice(&(stride as u64).to_le_bytes());
    }
    for x in &model.tensor {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    for tri in &model.triangles {
        for v in tri {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    for uv in &model.uv {
        for x in uv {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    buf.extend_from_slice(&model.semantic);
    for v in &model.landmarks {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for x in &model.neutral_expression {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    buf
}

pub fn load_model(path: impl AsRef<Path>) -> Result<BilinearModel, ModelFileError> {
    decode_model(&fs::read(path)?)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, section: &'static str) -> Result<&'a [u8], ModelFileError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&end| end <= self.bytes.len())
            .ok_or(ModelFileError::TruncatedPayload(section))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32s(&mut self, n: usize, section: &'static str) -> Result<Vec<u32>, ModelFileError> {
        let raw = self.take(n.checked_mul(4).ok_or(ModelFileError::TruncatedPayload(section))?, section)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4-byte chunk")))
            .collect())
    }

    fn u64s(&mut self, n: usize, section: &'static str) -> Result<Vec<u64>, ModelFileError> {
        let raw = self.take(n.checked_mul(8).ok_or(ModelFileError::TruncatedPayload(section))?, section)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }

    fn f64s(&mut self, n: usize, section: &'static str) -> Result<Vec<f64>, ModelFileError> {
        Ok(self.u64s(n, section)?.into_iter().map(f64::from_bits).collect())
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<BilinearModel, ModelFileError> {
    if bytes.len() < MAGIC.len() {
        return Err(ModelFileError::BadMagic);
    }
    let magic = &bytes[..MAGIC.len()];
    if magic != MAGIC {
        if &magic[..4] == b"MFIT" {
            return Err(ModelFileError::VersionMismatch {
                found: String::from_utf8_lossy(&magic[4..]).into_owned(),
                expected: "0001".into(),
            });
        }
        return Err(ModelFileError::BadMagic);
    }
    let mut r = Reader {
        bytes,
        pos: MAGIC.len(),
    };
    let counts = r.u32s(5, "header")?;
    let [n, n_a, n_e, n_tri, n_lm] = [0, 1, 2, 3, 4].map(|i| counts[i] as usize);
    let strides = r.u64s(3, "header")?;
    let strides = [strides[0], strides[1], strides[2]];
    let rows = 3 * n as u64;
    if strides != [n_e as u64 * rows, rows, 1] {
        return Err(ModelFileError::Layout(strides));
    }
    let tensor_len = 3usize
        .checked_mul(n)
        .and_then(|x| x.checked_mul(n_a))
        .and_then(|x| x.checked_mul(n_e))
        .ok_or(ModelFileError::TruncatedPayload("tensor"))?;
    let tensor = r.f64s(tensor_len, "tensor")?;
    let tri_flat = r.u32s(3 * n_tri, "topology")?;
    let triangles = tri_flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    let uv_flat = r.f64s(2 * n, "uv")?;
    let uv = uv_flat.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
    let semantic = r.take(n, "semantic labels")?.to_vec();
    let landmarks = r.u32s(n_lm, "landmarks")?;
    let neutral_expression = r.f64s(n_e, "neutral expression")?;
    if r.pos != bytes.len() {
        return Err(ModelFileError::TrailingBytes(bytes.len() - r.pos));
    }
    Ok(BilinearModel::new(ModelParts {
        n_vertices: n,
        n_identity: n_a,
        n_expression: n_e,
        tensor,
        triangles,
        uv,
        semantic,
        landmarks,
        neutral_expression,
    })?)
}
