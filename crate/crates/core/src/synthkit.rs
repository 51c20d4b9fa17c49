//! Synthetic ground truth: a face-like bilinear model on a deformed
//! ellipsoid grid, random scenes with known pose and coefficients, depth
//! clouds, and smooth nonlinear deformations for the shape branch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fitting::{CameraPose, DepthCloud};
use crate::linalg::CsrMatrix;
use crate::model::{BilinearModel, Coefficients, ModelError, ModelParts, SemanticLabel, Shape, DEFAULT_LANDMARK_COUNT};
use crate::raster::{render, Image, RasterError, Texture, UvLayout};
use crate::shapenet::{predict_deformation, shape_input, train_shape_branch, ShapeNetError, ShapeSample, ShapeTrainConfig};
use crate::spectral::{graph_laplacian, DisplacementField, SpectralBasis, SpectralError};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("cannot lay out {0} vertices on a grid with at least 3 rows and 3 columns")]
    UnsupportedVertexCount(usize),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    ShapeNet(#[from] ShapeNetError),
}

/// Parameters of a synthetic bilinear model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub n_vertices: usize,
    pub n_identity: usize,
    pub n_expression: usize,
    pub n_landmarks: usize,
    /// Diffusion steps applied to the random mode fields.
    pub smoothing_steps: usize,
    /// RMS per-vertex displacement of one identity mode, mm.
    pub identity_amplitude: f64,
    /// RMS per-vertex displacement of one expression mode, mm.
    pub expression_amplitude: f64,
    /// RMS per-vertex displacement of one identity-expression interaction, mm.
    pub interaction_amplitude: f64,
    /// RMS of the nonlinear shape-branch target field, mm.
    pub nonlinear_amplitude: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_vertices: 1220,
            n_identity: 50,
            n_expression: 46,
            n_landmarks: DEFAULT_LANDMARK_COUNT,
            smoothing_steps: 10,
            identity_amplitude: 2.0,
            expression_amplitude: 3.0,
            interaction_amplitude: 0.1,
            nonlinear_amplitude: 2.0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.n_vertices < 9 {
            return Err(SynthError::UnsupportedVertexCount(self.n_vertices));
        }
        if self.n_identity == 0 || self.n_expression == 0 {
            return Err(SynthError::InvalidSpec("coefficient counts must be positive".into()));
        }
        if self.n_landmarks < 4 || self.n_landmarks > self.n_vertices {
            return Err(SynthError::InvalidSpec(format!(
                "landmark count {} must lie in 4..={}",
                self.n_landmarks, self.n_vertices
            )));
        }
        for (name, v) in [
            ("identity_amplitude", self.identity_amplitude),
            ("expression_amplitude", self.expression_amplitude),
            ("interaction_amplitude", self.interaction_amplitude),
            ("nonlinear_amplitude", self.nonlinear_amplitude),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(SynthError::InvalidSpec(format!("{name} must be finite and non-negative")));
            }
        }
        let constraints = 14;
        if (self.n_identity - 1) + (self.n_expression - 1) + constraints > 3 * self.n_vertices {
            return Err(SynthError::InvalidSpec("too many modes for the vertex count".into()));
        }
        Ok(())
    }
}

/// Factorizes `n` as `rows * cols` with the aspect closest to the face
/// patch (wider than tall).
pub fn grid_dims(n: usize) -> Result<(usize, usize), SynthError> {
    let target = 1.6f64.ln();
    let mut best: Option<(f64, usize, usize)> = None;
    for rows in 3..=n / 3 {
        if !n.is_multiple_of(rows) {
            continue;
        }
        let cols = n / rows;
        if cols < 3 {
            continue;
        }
        let score = ((cols as f64 / rows as f64).ln() - target).abs();
        if best.is_none_or(|(s, _, _)| score < s) {
            best = Some((score, rows, cols));
        }
    }
    best.map(|(_, r, c)| (r, c)).ok_or(SynthError::UnsupportedVertexCount(n))
}

const LON_SPAN: f64 = 75.0;
const LAT_SPAN: f64 = 55.0;
const SEMI_AXES: [f64; 3] = [75.0, 95.0, 60.0];

struct BaseMesh {
    positions: Vec<[f64; 3]>,
    angles: Vec<[f64; 2]>,
    triangles: Vec<[u32; 3]>,
    uv: Vec<[f64; 2]>,
    semantic: Vec<u8>,
}

fn gaussian_bump(lon: f64, lat: f64, center: [f64; 2], radius: [f64; 2]) -> f64 {
    let dx = (lon - center[0]) / radius[0];
    let dy = (lat - center[1]) / radius[1];
    (-(dx * dx + dy * dy)).exp()
}

fn in_ellipse(lon: f64, lat: f64, center: [f64; 2], radius: [f64; 2]) -> bool {
    let dx = (lon - center[0]) / radius[0];
    let dy = (lat - center[1]) / radius[1];
    dx * dx + dy * dy <= 1.0
}

fn region_label(lon: f64, lat: f64) -> SemanticLabel {
    if in_ellipse(lon, lat, [0.0, -26.0], [14.0, 2.5]) {
        SemanticLabel::InnerMouth
    } else if in_ellipse(lon, lat, [0.0, -26.0], [20.0, 7.0]) {
        SemanticLabel::Lips
    } else if in_ellipse(lon, lat, [0.0, -2.0], [9.0, 16.0]) {
        SemanticLabel::Nose
    } else if in_ellipse(lon.abs(), lat, [22.0, 14.0], [11.0, 5.0]) {
        SemanticLabel::Eyes
    } else if in_ellipse(lon.abs(), lat, [22.0, 25.0], [13.0, 3.5]) {
        SemanticLabel::Eyebrows
    } else {
        SemanticLabel::Other
    }
}

fn base_mesh(n: usize) -> Result<BaseMesh, SynthError> {
    let (rows, cols) = grid_dims(n)?;
    let mut positions = Vec::with_capacity(n);
    let mut angles = Vec::with_capacity(n);
    let mut uv = Vec::with_capacity(n);
    let mut semantic = Vec::with_capacity(n);
    let inset = 0.02;
    for r in 0..rows {
        let fr = r as f64 / (rows - 1) as f64;
        let lat_deg = -LAT_SPAN + 2.0 * LAT_SPAN * fr;
        for c in 0..cols {
            let fc = c as f64 / (cols - 1) as f64;
            let lon_deg = -LON_SPAN + 2.0 * LON_SPAN * fc;
            let (lon, lat) = (lon_deg.to_radians(), lat_deg.to_radians());
            let bulge = 14.0 * gaussian_bump(lon_deg, lat_deg, [0.0, -2.0], [8.0, 14.0])
                + 3.0 * gaussian_bump(lon_deg, lat_deg, [0.0, -26.0], [16.0, 6.0])
                - 4.0 * gaussian_bump(lon_deg.abs(), lat_deg, [22.0, 14.0], [9.0, 6.0])
                + 2.0 * gaussian_bump(lon_deg.abs(), lat_deg, [22.0, 26.0], [12.0, 4.0]);
            let radial = [lon.sin() * lat.cos(), lat.sin(), lon.cos() * lat.cos()];
            let mut p = [0.0; 3];
            for k in 0..3 {
                p[k] = SEMI_AXES[k] * radial[k];
            }
            p[2] += bulge;
            positions.push(p);
            angles.push([lon_deg, lat_deg]);
            uv.push([inset + (1.0 - 2.0 * inset) * fc, inset + (1.0 - 2.0 * inset) * (1.0 - fr)]);
            semantic.push(region_label(lon_deg, lat_deg).id());
        }
    }
    let mut triangles = Vec::with_capacity(2 * (rows - 1) * (cols - 1));
    for r in 0..rows - 1 {
        for c in 0..cols - 1 {
            let v00 = (r * cols + c) as u32;
            let v01 = v00 + 1;
            let v10 = v00 + cols as u32;
            let v11 = v10 + 1;
            triangles.push([v00, v01, v11]);
            triangles.push([v00, v11, v10]);
        }
    }
    Ok(BaseMesh {
        positions,
        angles,
        triangles,
        uv,
        semantic,
    })
}

/// Deterministic farthest-point sampling over the (longitude, latitude)
/// grid, starting from the vertex nearest the patch center.
fn spread_landmarks(angles: &[[f64; 2]], count: usize) -> Vec<u32> {
    let dist2 = |a: [f64; 2], b: [f64; 2]| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
    let start = (0..angles.len())
        .min_by(|&a, &b| dist2(angles[a], [0.0, 0.0]).total_cmp(&dist2(angles[b], [0.0, 0.0])))
        .unwrap_or(0);
    let mut chosen = vec![start as u32];
    let mut nearest: Vec<f64> = angles.iter().map(|&p| dist2(p, angles[start])).collect();
    while chosen.len() < count {
        let mut best = 0;
        for v in 0..angles.len() {
            if nearest[v] > nearest[best] {
                best = v;
            }
        }
        chosen.push(best as u32);
        for v in 0..angles.len() {
            nearest[v] = nearest[v].min(dist2(angles[v], angles[best]));
        }
    }
    chosen
}

/// Heat-diffusion smoothing `x <- x - tau L x` applied per axis.
fn diffuse(laplacian: &CsrMatrix, field: &mut [f64], steps: usize, tau: f64) {
    let n = laplacian.n_rows();
    let mut comp = vec![0.0; n];
    let mut lx = vec![0.0; n];
    for axis in 0..3 {
        for v in 0..n {
            comp[v] = field[3 * v + axis];
        }
        for _ in 0..steps {
            laplacian.mul_vec_into(&comp, &mut lx);
            for v in 0..n {
                comp[v] -= tau * lx[v];
            }
        }
        for v in 0..n {
            field[3 * v + axis] = comp[v];
        }
    }
}

fn diffusion_step(laplacian: &CsrMatrix) -> f64 {
    let max_degree = (0..laplacian.n_rows()).map(|r| laplacian.get(r, r)).fold(0.0, f64::max);
    1.0 / (2.0 * max_degree.max(1.0))
}

fn random_smooth_field(laplacian: &CsrMatrix, steps: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut field: Vec<f64> = (0..3 * laplacian.n_rows()).map(|_| normal.sample(rng)).collect();
    diffuse(laplacian, &mut field, steps, diffusion_step(laplacian));
    field
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Removes the span of `basis` (orthonormal) from `v`, twice for stability,
/// and normalizes. Returns `None` if nothing is left.
fn orthonormalize(mut v: Vec<f64>, basis: &[Vec<f64>]) -> Option<Vec<f64>> {
    let initial = dot(&v, &v).sqrt();
    for _ in 0..2 {
        for q in basis {
            let c = dot(q, &v);
            v.iter_mut().zip(q).for_each(|(x, qi)| *x -= c * qi);
        }
    }
    let norm = dot(&v, &v).sqrt();
    if !(norm > 1e-8 * initial) {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Some(v)
}

/// Directions a weak-perspective camera can absorb (translation, rotation
/// and scale about the origin) for the shape `mean`.
fn similarity_directions(mean: &[f64]) -> Vec<Vec<f64>> {
    let n = mean.len() / 3;
    let mut dirs = Vec::new();
    for axis in 0..3 {
        let mut t = vec![0.0; 3 * n];
        for v in 0..n {
            t[3 * v + axis] = 1.0;
        }
        dirs.push(t);
    }
    for axis in 0..3 {
        let mut w = [0.0; 3];
        w[axis] = 1.0;
        let mut r = vec![0.0; 3 * n];
        for v in 0..n {
            let x = &mean[3 * v..3 * v + 3];
            r[3 * v] = w[1] * x[2] - w[2] * x[1];
            r[3 * v + 1] = w[2] * x[0] - w[0] * x[2];
            r[3 * v + 2] = w[0] * x[1] - w[1] * x[0];
        }
        dirs.push(r);
    }
    dirs.push(mean.to_vec());
    dirs
}

/// Builds a synthetic bilinear model. The tensor is in offset form:
/// `C[:,0,0]` is the mean face, `C[:,i,0]` identity modes, `C[:,0,j]`
/// expression modes and `C[:,i,j]` small interactions, with the neutral
/// expression equal to the first unit vector.
pub fn make_synthetic_model(spec: &SyntheticSpec) -> Result<BilinearModel, SynthError> {
    spec.validate()?;
    let n = spec.n_vertices;
    let mesh = base_mesh(n)?;
    let laplacian = graph_laplacian(n, &mesh.triangles)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mean: Vec<f64> = mesh.positions.iter().flatten().copied().collect();
    let rows = 3 * n;

    let landmarks = spread_landmarks(&mesh.angles, spec.n_landmarks);
    let mut on_landmark = vec![false; n];
    landmarks.iter().for_each(|&v| on_landmark[v as usize] = true);
    // Modes avoid the camera-absorbable motions both over the whole face and
    // over the landmarks alone, so landmark fits can tell pose from shape.
    let mut constraints = similarity_directions(&mean);
    for mut d in similarity_directions(&mean) {
        for v in (0..n).filter(|&v| !on_landmark[v]) {
            d[3 * v..3 * v + 3].iter_mut().for_each(|x| *x = 0.0);
        }
        constraints.push(d);
    }
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for d in constraints {
        if let Some(q) = orthonormalize(d, &basis) {
            basis.push(q);
        }
    }
    let draw_modes = |count: usize, amplitude: f64, basis: &mut Vec<Vec<f64>>, rng: &mut ChaCha8Rng| {
        let scale = amplitude * (n as f64).sqrt();
        let mut modes = Vec::with_capacity(count);
        while modes.len() < count {
            let field = random_smooth_field(&laplacian, spec.smoothing_steps, rng);
            if let Some(q) = orthonormalize(field, basis) {
                modes.push(q.iter().map(|x| x * scale).collect::<Vec<f64>>());
                basis.push(q);
            }
        }
        modes
    };
    let identity_modes = draw_modes(spec.n_identity - 1, spec.identity_amplitude, &mut basis, &mut rng);
    let expression_modes = draw_modes(spec.n_expression - 1, spec.expression_amplitude, &mut basis, &mut rng);

    let pool_size = 16.min((spec.n_identity - 1) * (spec.n_expression - 1));
    let pool: Vec<Vec<f64>> = (0..pool_size)
        .map(|_| {
            let f = random_smooth_field(&laplacian, spec.smoothing_steps, &mut rng);
            let rms = (dot(&f, &f) / n as f64).sqrt();
            f.iter().map(|x| x / rms).collect()
        })
        .collect();

    let (n_a, n_e) = (spec.n_identity, spec.n_expression);
    let mut tensor = vec![0.0; rows * n_a * n_e];
    let slot = |i: usize, j: usize| (i * n_e + j) * rows;
    tensor[slot(0, 0)..slot(0, 0) + rows].copy_from_slice(&mean);
    for (k, m) in identity_modes.iter().enumerate() {
        let s = slot(k + 1, 0);
        tensor[s..s + rows].copy_from_slice(m);
    }
    for (k, m) in expression_modes.iter().enumerate() {
        let s = slot(0, k + 1);
        tensor[s..s + rows].copy_from_slice(m);
    }
    if !pool.is_empty() {
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        for i in 1..n_a {
            for j in 1..n_e {
                let w: Vec<f64> = (0..pool.len()).map(|_| normal.sample(&mut rng)).collect();
                let norm = dot(&w, &w).sqrt().max(1e-12);
                let s = slot(i, j);
                for (p, wk) in pool.iter().zip(&w) {
                    let c = spec.interaction_amplitude * wk / norm;
                    for r in 0..rows {
                        tensor[s + r] += c * p[r];
                    }
                }
            }
        }
    }

    let mut neutral_expression = vec![0.0; n_e];
    neutral_expression[0] = 1.0;
    Ok(BilinearModel::new(ModelParts {
        n_vertices: n,
        n_identity: n_a,
        n_expression: n_e,
        tensor,
        triangles: mesh.triangles,
        uv: mesh.uv,
        semantic: mesh.semantic,
        landmarks,
        neutral_expression,
    })?)
}

/// Mode vectors of a synthetic model: identity offsets `C[:,i,0]` for
/// `i >= 1` followed by expression offsets `C[:,0,j]` for `j >= 1`.
pub fn model_modes(model: &BilinearModel) -> Vec<Vec<f64>> {
    let mut modes = Vec::new();
    for i in 1..model.n_identity() {
        modes.push(model.slice(i, 0).to_vec());
    }
    for j in 1..model.n_expression() {
        modes.push(model.slice(0, j).to_vec());
    }
    modes
}

/// Root-mean-square per-vertex Euclidean distance, mm.
pub fn evaluate_rmse(predicted: &Shape, truth: &Shape) -> f64 {
    assert_eq!(predicted.positions.len(), truth.positions.len(), "shapes differ in size");
    let n = truth.n_vertices();
    if n == 0 {
        return 0.0;
    }
    let sse: f64 = predicted.positions.iter().zip(&truth.positions).map(|(a, b)| (a - b).powi(2)).sum();
    (sse / n as f64).sqrt()
}

/// Smooth color pattern in the model's UV layout; valid exactly on the UV
/// coverage.
pub fn procedural_texture(model: &BilinearModel, resolution: usize, seed: u64) -> Result<Texture, SynthError> {
    let layout = UvLayout::new(model, resolution)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e57_u64);
    let waves: Vec<[f64; 4]> = (0..4)
        .map(|_| {
            [
                rng.random_range(1.0..4.0),
                rng.random_range(1.0..4.0),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.04..0.1),
            ]
        })
        .collect();
    let base = [0.78, 0.58, 0.47];
    let mut image = Image::new(resolution, resolution, 3);
    let coverage = layout.coverage();
    for y in 0..resolution {
        for x in 0..resolution {
            let u = (x as f64 + 0.5) / resolution as f64;
            let v = (y as f64 + 0.5) / resolution as f64;
            let px = image.pixel_mut(x, y);
            for (c, out) in px.iter_mut().enumerate() {
                let mut value = base[c];
                for (k, w) in waves.iter().enumerate() {
                    let phase = w[2] + c as f64 * 0.7 + k as f64;
                    value += w[3] * (std::f64::consts::TAU * (w[0] * u + w[1] * v) + phase).sin();
                }
                *out = value.clamp(0.0, 1.0);
            }
        }
    }
    Ok(Texture { image, valid: coverage })
}

/// Smooth deformation that depends nonlinearly on the coefficients. Each
/// output is a fixed field from the low-frequency end of a spectral basis
/// weighted by `tanh` of a random affine function of the coefficients, plus
/// a constant field so the mean deformation is nonzero.
#[derive(Debug, Clone, PartialEq)]
pub struct NonlinearDeformation {
    fields: Vec<Vec<[f64; 3]>>,
    offset: Vec<[f64; 3]>,
    weights: Vec<Vec<f64>>,
    biases: Vec<f64>,
    n_inputs: usize,
}

impl NonlinearDeformation {
    /// `n_inputs` is the length of the coefficient vector passed to
    /// [`Self::evaluate`].
    pub fn new(basis: &SpectralBasis, n_inputs: usize, amplitude: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x05ee_d0ff_1e1d);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let band = basis.k().min(30);
        let n = basis.n_vertices();
        let band_field = |rng: &mut ChaCha8Rng| {
            let mut f = vec![[0.0; 3]; n];
            for i in 0..band {
                let c: [f64; 3] = std::array::from_fn(|_| normal.sample(rng) / (1.0 + i as f64).sqrt());
                for (v, x) in basis.vector(i).iter().enumerate() {
                    for k in 0..3 {
                        f[v][k] += c[k] * x;
                    }
                }
            }
            let rms = (f.iter().map(|d| d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sum::<f64>() / n as f64).sqrt();
            f.iter_mut().for_each(|d| d.iter_mut().for_each(|x| *x *= amplitude / rms.max(1e-300)));
            f
        };
        let n_terms = 6;
        let fields: Vec<Vec<[f64; 3]>> = (0..n_terms).map(|_| band_field(&mut rng)).collect();
        let mut offset = band_field(&mut rng);
        offset.iter_mut().for_each(|d| d.iter_mut().for_each(|x| *x *= 0.5));
        let input_scale = 2.0 / (n_inputs.max(1) as f64).sqrt();
        let weights = (0..n_terms)
            .map(|_| (0..n_inputs).map(|_| input_scale * normal.sample(&mut rng)).collect())
            .collect();
        let biases = (0..n_terms).map(|_| 0.5 * normal.sample(&mut rng)).collect();
        Self {
            fields,
            offset,
            weights,
            biases,
            n_inputs,
        }
    }

    pub fn n_inputs(&self) -> usize {
        self.n_inputs
    }

    pub fn evaluate(&self, inputs: &[f64]) -> DisplacementField {
        assert_eq!(inputs.len(), self.n_inputs, "input length");
        let mut out = self.offset.clone();
        for ((field, w), b) in self.fields.iter().zip(&self.weights).zip(&self.biases) {
            let g = (dot(w, inputs) + b).tanh();
            for (o, f) in out.iter_mut().zip(field) {
                for k in 0..3 {
                    o[k] += g * f[k];
                }
            }
        }
        DisplacementField { vectors: out }
    }
}

/// Scene sampling options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneOptions {
    pub seed: u64,
    pub image_size: usize,
    pub texture_resolution: usize,
    /// Standard deviation of Gaussian landmark noise, pixels.
    pub landmark_noise: f64,
    pub with_depth: bool,
    pub depth_samples_per_triangle: usize,
    pub render_image: bool,
    /// Max absolute yaw, pitch and roll, degrees.
    pub max_rotation_deg: [f64; 3],
    /// Standard deviation of identity coefficients (the anchor stays 1).
    pub identity_sigma: f64,
    /// Probability that an expression coefficient is active.
    pub expression_activity: f64,
    /// Keep active expression coefficients strictly inside `(0, 1)`.
    pub interior_expression: bool,
}

impl Default for SceneOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            image_size: 256,
            texture_resolution: 256,
            landmark_noise: 0.0,
            with_depth: false,
            depth_samples_per_triangle: 2,
            render_image: true,
            max_rotation_deg: [25.0, 12.0, 8.0],
            identity_sigma: 0.5,
            expression_activity: 0.3,
            interior_expression: false,
        }
    }
}

/// Ground-truth scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub pose: CameraPose,
    pub coeffs: Coefficients,
    /// Bilinear shape plus the nonlinear displacement when present.
    pub shape: Shape,
    pub displacement: Option<DisplacementField>,
    pub landmarks: Vec<[f64; 2]>,
    pub clean_landmarks: Vec<[f64; 2]>,
    pub depth: Option<DepthCloud>,
    pub texture: Option<Texture>,
    pub image: Option<Image>,
}

/// Identity with the anchor at 1 and Gaussian offsets; sparse expression in
/// `[0, 1]` with the neutral anchor at 1.
pub fn sample_coefficients(model: &BilinearModel, options: &SceneOptions, rng: &mut ChaCha8Rng) -> Coefficients {
    let normal = Normal::new(0.0, options.identity_sigma.max(0.0)).expect("finite sigma");
    let mut identity: Vec<f64> = (0..model.n_identity()).map(|_| normal.sample(rng)).collect();
    identity[0] = 1.0;
    let mut expression = model.neutral_expression().to_vec();
    for e in expression.iter_mut().skip(1) {
        if rng.random::<f64>() < options.expression_activity {
            *e = if options.interior_expression {
                rng.random_range(0.1..0.9)
            } else {
                rng.random::<f64>()
            };
        }
    }
    Coefficients { identity, expression }
}

pub fn sample_pose(options: &SceneOptions, rng: &mut ChaCha8Rng) -> CameraPose {
    let [yaw, pitch, roll] = options.max_rotation_deg.map(|d| d.to_radians());
    let mut sym = |m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
    let (y, p, r) = (sym(yaw), sym(pitch), sym(roll));
    let size = options.image_size as f64;
    let scale = size / 300.0 * rng.random_range(0.9..1.1);
    let t = [size / 2.0 + rng.random_range(-0.04..0.04) * size, size / 2.0 + rng.random_range(-0.04..0.04) * size];
    CameraPose::from_euler(p, y, r, scale, t)
}

/// Points on the surface of `shape`: every vertex plus random barycentric
/// samples inside each triangle.
pub fn sample_depth(model: &BilinearModel, shape: &Shape, per_triangle: usize, rng: &mut ChaCha8Rng) -> DepthCloud {
    let mut points: Vec<[f64; 3]> = shape.vertices().collect();
    for tri in model.triangles() {
        let [a, b, c] = tri.map(|v| shape.vertex(v as usize));
        for _ in 0..per_triangle {
            let (mut s, mut t) = (rng.random::<f64>(), rng.random::<f64>());
            if s + t > 1.0 {
                s = 1.0 - s;
                t = 1.0 - t;
            }
            let w = 1.0 - s - t;
            points.push(std::array::from_fn(|k| w * a[k] + s * b[k] + t * c[k]));
        }
    }
    DepthCloud { points }
}

/// Samples a scene. When `nonlinear` is given its field, evaluated at the
/// concatenated coefficients `[a, e]`, is added to the bilinear shape.
pub fn sample_scene(model: &BilinearModel, options: &SceneOptions, nonlinear: Option<&NonlinearDeformation>) -> Result<Scene, SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let coeffs = sample_coefficients(model, options, &mut rng);
    let pose = sample_pose(options, &mut rng);
    scene_from(model, coeffs, pose, options, nonlinear, &mut rng)
}

/// Builds a scene for given coefficients and pose.
pub fn scene_from(
    model: &BilinearModel,
    coeffs: Coefficients,
    pose: CameraPose,
    options: &SceneOptions,
    nonlinear: Option<&NonlinearDeformation>,
    rng: &mut ChaCha8Rng,
) -> Result<Scene, SynthError> {
    let bilinear = model.contract_coeffs(&coeffs)?;
    let displacement = match nonlinear {
        Some(f) => {
            let inputs: Vec<f64> = coeffs.identity.iter().chain(&coeffs.expression).copied().collect();
            if inputs.len() != f.n_inputs() {
                return Err(SynthError::InvalidSpec(format!(
                    "nonlinear deformation expects {} inputs, model provides {}",
                    f.n_inputs(),
                    inputs.len()
                )));
            }
            Some(f.evaluate(&inputs))
        }
        None => None,
    };
    let shape = match &displacement {
        Some(d) => bilinear.displaced(&d.vectors),
        None => bilinear,
    };
    let clean_landmarks: Vec<[f64; 2]> = model
        .landmarks()
        .iter()
        .map(|&v| pose.project_point(shape.vertex(v as usize)))
        .collect();
    let landmarks = if options.landmark_noise > 0.0 {
        let noise = Normal::new(0.0, options.landmark_noise).expect("finite noise");
        clean_landmarks
            .iter()
            .map(|p| [p[0] + noise.sample(rng), p[1] + noise.sample(rng)])
            .collect()
    } else {
        clean_landmarks.clone()
    };
    let depth = options
        .with_depth
        .then(|| sample_depth(model, &shape, options.depth_samples_per_triangle, rng));
    let (texture, image) = if options.render_image {
        let texture = procedural_texture(model, options.texture_resolution, options.seed)?;
        let rendered = render(model, &shape, &texture, &pose, options.image_size, options.image_size, None)?;
        (Some(texture), Some(rendered.image))
    } else {
        (None, None)
    };
    Ok(Scene {
        pose,
        coeffs,
        shape,
        displacement,
        landmarks,
        clean_landmarks,
        depth,
        texture,
        image,
    })
}

/// Settings of the with/without shape-branch comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub seeds: Vec<u64>,
    /// RMS of the learnable nonlinear field, mm.
    pub nonlinear_amplitude: f64,
    /// RMS of per-shape detail outside the spectral basis span, mm.
    pub detail_amplitude: f64,
    pub train: ShapeTrainConfig,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            n_train: 400,
            n_test: 50,
            seeds: (0..10).collect(),
            nonlinear_amplitude: 2.0,
            detail_amplitude: 0.5,
            train: ShapeTrainConfig::default(),
        }
    }
}

impl BenchmarkConfig {
    /// Defaults with the nonlinear amplitude taken from `spec`.
    pub fn for_spec(spec: &SyntheticSpec) -> Self {
        Self {
            nonlinear_amplitude: spec.nonlinear_amplitude,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    /// Held-out vertex RMSE of the bilinear shape alone, mm.
    pub rmse_without: f64,
    /// Held-out vertex RMSE with the predicted deformation added, mm.
    pub rmse_with: f64,
    pub final_training_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub runs: Vec<SeedReport>,
    pub mean_without: f64,
    pub mean_with: f64,
    /// Fraction of seeds where the deformation lowered the RMSE.
    pub improved_fraction: f64,
}

struct BranchSample {
    coeffs: Coefficients,
    e_src: Vec<f64>,
    /// Ground truth minus the bilinear target shape.
    residual: DisplacementField,
}

fn branch_sample(
    model: &BilinearModel,
    basis: &SpectralBasis,
    field: &NonlinearDeformation,
    detail_amplitude: f64,
    rng: &mut ChaCha8Rng,
) -> Result<BranchSample, SynthError> {
    let opts = SceneOptions::default();
    let coeffs = sample_coefficients(model, &opts, rng);
    let e_src = sample_coefficients(model, &opts, rng).expression;
    let inputs: Vec<f64> = coeffs.identity.iter().chain(&coeffs.expression).copied().collect();
    let mut residual = field.evaluate(&inputs);
    if detail_amplitude > 0.0 {
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let noise = DisplacementField {
            vectors: (0..model.n_vertices()).map(|_| std::array::from_fn(|_| normal.sample(rng))).collect(),
        };
        let hash = model.mesh_hash();
        let inside = basis.project(&noise, &hash)?;
        let mut detail: Vec<[f64; 3]> = noise
            .vectors
            .iter()
            .zip(&inside.vectors)
            .map(|(a, b)| [a[0] - b[0], a[1] - b[1], a[2] - b[2]])
            .collect();
        let rms = DisplacementField { vectors: detail.clone() }.norm() / (model.n_vertices() as f64).sqrt();
        detail.iter_mut().for_each(|d| d.iter_mut().for_each(|x| *x *= detail_amplitude / rms.max(1e-300)));
        for (r, d) in residual.vectors.iter_mut().zip(&detail) {
            for k in 0..3 {
                r[k] += d[k];
            }
        }
    }
    Ok(BranchSample { coeffs, e_src, residual })
}

/// Trains the shape branch on synthetic shapes whose ground truth adds a
/// smooth nonlinear field (plus detail no spectral field can express) to the
/// bilinear shape, then compares held-out vertex RMSE with and without the
/// predicted deformation. Supervision is the spectral encoding of
/// ground truth minus bilinear shape.
pub fn benchmark_shape_branch(model: &BilinearModel, basis: &SpectralBasis, config: &BenchmarkConfig) -> Result<BenchmarkReport, SynthError> {
    if config.n_train == 0 || config.n_test == 0 || config.seeds.is_empty() {
        return Err(SynthError::InvalidSpec("benchmark needs training samples, test samples and seeds".into()));
    }
    if basis.n_vertices() != model.n_vertices() {
        return Err(SynthError::InvalidSpec("basis and model vertex counts differ".into()));
    }
    let hash = model.mesh_hash();
    let mut runs = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        let field = NonlinearDeformation::new(basis, model.n_identity() + model.n_expression(), config.nonlinear_amplitude, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xbe7c_4a11);
        let mut train = Vec::with_capacity(config.n_train);
        for _ in 0..config.n_train {
            let s = branch_sample(model, basis, &field, config.detail_amplitude, &mut rng)?;
            train.push(ShapeSample {
                input: shape_input(&s.coeffs.identity, &s.e_src, &s.coeffs.expression),
                target: basis.encode(&s.residual, &hash)?.values,
            });
        }
        let train_cfg = ShapeTrainConfig {
            seed,
            ..config.train.clone()
        };
        let trained = train_shape_branch(&train, &train_cfg)?;
        let (mut sse_without, mut sse_with) = (0.0, 0.0);
        for _ in 0..config.n_test {
            let s = branch_sample(model, basis, &field, config.detail_amplitude, &mut rng)?;
            let linear = model.contract_coeffs(&s.coeffs)?;
            let truth = linear.displaced(&s.residual.vectors);
            let predicted = predict_deformation(&trained.params, &s.coeffs.identity, &s.e_src, &s.coeffs.expression, basis)?;
            sse_without += evaluate_rmse(&linear, &truth).powi(2);
            sse_with += evaluate_rmse(&linear.displaced(&predicted.vectors), &truth).powi(2);
        }
        let n = config.n_test as f64;
        let report = SeedReport {
            seed,
            rmse_without: (sse_without / n).sqrt(),
            rmse_with: (sse_with / n).sqrt(),
            final_training_loss: trained.epoch_losses.last().copied().unwrap_or(trained.initial_loss),
        };
        log::info!(
            "shape branch seed {seed}: without {:.4} mm, with {:.4} mm",
            report.rmse_without,
            report.rmse_with
        );
        runs.push(report);
    }
    let n = runs.len() as f64;
    Ok(BenchmarkReport {
        mean_without: runs.iter().map(|r| r.rmse_without).sum::<f64>() / n,
        mean_with: runs.iter().map(|r| r.rmse_with).sum::<f64>() / n,
        improved_fraction: runs.iter().filter(|r| r.rmse_with < r.rmse_without).count() as f64 / n,
        runs,
    })
}

/// The training set the benchmark draws for `seed`: inputs `[a, e_src,
/// e_tgt]` and spectral targets of the ground-truth residual.
pub fn branch_training_set(
    model: &BilinearModel,
    basis: &SpectralBasis,
    config: &BenchmarkConfig,
    seed: u64,
) -> Result<Vec<ShapeSample>, SynthError> {
    let hash = model.mesh_hash();
    let field = NonlinearDeformation::new(basis, model.n_identity() + model.n_expression(), config.nonlinear_amplitude, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xbe7c_4a11);
    (0..config.n_train)
        .map(|_| {
            let s = branch_sample(model, basis, &field, config.detail_amplitude, &mut rng)?;
            Ok(ShapeSample {
                input: shape_input(&s.coeffs.identity, &s.e_src, &s.coeffs.expression),
                target: basis.encode(&s.residual, &hash)?.values,
            })
        })
        .collect()
}
