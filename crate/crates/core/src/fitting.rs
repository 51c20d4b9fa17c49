//! Landmark-driven fitting of the bilinear model: weak-perspective camera
//! estimation, ridge-regularized coefficient solves, alternating single- and
//! multi-image fits, and Laplacian-regularized shape refinement from depth
//! or landmarks.
//!
//! Projection convention: `p = scale * R[0..2] * x + translation`, pixels
//! with y pointing down. Camera-space depth is `(R x).z`; smaller is nearer.

use nalgebra::{Cholesky, DMatrix, DVector, Matrix2x3, Matrix3, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{conjugate_gradient, CsrMatrix};
use crate::model::{BilinearModel, Coefficients, ModelError, RowTensor, Shape};
use crate::spectral::{graph_laplacian, DisplacementField, SpectralError};

#[derive(Debug, Error)]
pub enum FitError {
    #[error("size mismatch for {what}: expected {expected}, got {got}")]
    Sizing {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("need at least {needed} correspondences, got {got}")]
    TooFewCorrespondences { needed: usize, got: usize },
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(&'static str),
    #[error("singular normal equations in the {0} solve; use a positive ridge weight")]
    SingularNormalEquations(&'static str),
    #[error("under-constrained refinement: {0}")]
    UnderConstrained(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid camera pose: {0}")]
    InvalidPose(&'static str),
    #[error("depth cloud is empty")]
    EmptyDepth,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
}

/// Weak-perspective (scaled orthographic) camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub rotation: Matrix3<f64>,
    /// Pixels per millimeter.
    pub scale: f64,
    /// Pixels.
    pub translation: Vector2<f64>,
}

impl CameraPose {
    pub fn new(rotation: Matrix3<f64>, scale: f64, translation: Vector2<f64>) -> Result<Self, FitError> {
        let pose = Self {
            rotation,
            scale,
            translation,
        };
        pose.validate()?;
        Ok(pose)
    }

    pub fn validate(&self) -> Result<(), FitError> {
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(FitError::InvalidPose("scale must be positive"));
        }
        let err = (self.rotation.transpose() * self.rotation - Matrix3::identity()).amax();
        if !(err <= 1e-8) {
            return Err(FitError::InvalidPose("rotation is not orthonormal"));
        }
        if self.rotation.determinant() <= 0.0 {
            return Err(FitError::InvalidPose("rotation has negative determinant"));
        }
        if !self.translation.iter().all(|x| x.is_finite()) {
            return Err(FitError::InvalidPose("translation is not finite"));
        }
        Ok(())
    }

    /// Rotation about the camera axes by Euler angles (radians), composed as
    /// `Rz * Ry * Rx`, followed by the y/z flip that makes model +y point up
    /// in the image and model +z face the camera.
    pub fn from_euler(pitch: f64, yaw: f64, roll: f64, scale: f64, translation: [f64; 2]) -> Self {
        let r = nalgebra::Rotation3::from_euler_angles(pitch, yaw, roll).into_inner();
        let flip = Matrix3::new(1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0);
        Self {
            rotation: flip * r,
            scale,
            translation: Vector2::new(translation[0], translation[1]),
        }
    }

    #[inline]
    pub fn project_point(&self, x: [f64; 3]) -> [f64; 2] {
        let r = &self.rotation;
        [
            self.scale * (r[(0, 0)] * x[0] + r[(0, 1)] * x[1] + r[(0, 2)] * x[2]) + self.translation[0],
            self.scale * (r[(1, 0)] * x[0] + r[(1, 1)] * x[1] + r[(1, 2)] * x[2]) + self.translation[1],
        ]
    }

    /// Camera-space depth in mm; smaller is nearer to the viewer.
    #[inline]
    pub fn depth(&self, x: [f64; 3]) -> f64 {
        let r = &self.rotation;
        r[(2, 0)] * x[0] + r[(2, 1)] * x[1] + r[(2, 2)] * x[2]
    }

    /// `R x`, camera-space millimeters.
    pub fn to_camera(&self, x: [f64; 3]) -> [f64; 3] {
        let v = self.rotation * Vector3::from(x);
        [v[0], v[1], v[2]]
    }

    /// `Rᵀ p`, the inverse of [`Self::to_camera`].
    pub fn from_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let v = self.rotation.transpose() * Vector3::from(p);
        [v[0], v[1], v[2]]
    }

    /// Rotation rows as a row-major 9-vector.
    pub fn rotation_row_major(&self) -> [f64; 9] {
        let r = &self.rotation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
        ]
    }

    pub fn from_row_major(rotation: [f64; 9], scale: f64, translation: [f64; 2]) -> Result<Self, FitError> {
        Self::new(
            Matrix3::from_row_slice(&rotation),
            scale,
            Vector2::new(translation[0], translation[1]),
        )
    }
}

/// Projects every vertex of `shape`.
pub fn project(pose: &CameraPose, shape: &Shape) -> Vec<[f64; 2]> {
    shape.vertices().map(|x| pose.project_point(x)).collect()
}

/// Sum of squared reprojection errors.
pub fn reprojection_sse(pose: &CameraPose, points3d: &[[f64; 3]], points2d: &[[f64; 2]]) -> f64 {
    points3d
        .iter()
        .zip(points2d)
        .map(|(x, l)| {
            let p = pose.project_point(*x);
            (p[0] - l[0]).powi(2) + (p[1] - l[1]).powi(2)
        })
        .sum()
}

pub fn rmse_2d(a: &[[f64; 2]], b: &[[f64; 2]]) -> f64 {
    assert_eq!(a.len(), b.len());
    if a.is_empty() {
        return 0.0;
    }
    let sse: f64 = a.iter().zip(b).map(|(p, q)| (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sum();
    (sse / a.len() as f64).sqrt()
}

struct Centered {
    mean3: Vector3<f64>,
    mean2: Vector2<f64>,
    x: Vec<Vector3<f64>>,
    p: Vec<Vector2<f64>>,
}

fn center(points3d: &[[f64; 3]], points2d: &[[f64; 2]]) -> Centered {
    let n = points3d.len() as f64;
    let mean3 = points3d.iter().fold(Vector3::zeros(), |acc, x| acc + Vector3::from(*x)) / n;
    let mean2 = points2d.iter().fold(Vector2::zeros(), |acc, p| acc + Vector2::from(*p)) / n;
    Centered {
        mean3,
        mean2,
        x: points3d.iter().map(|x| Vector3::from(*x) - mean3).collect(),
        p: points2d.iter().map(|p| Vector2::from(*p) - mean2).collect(),
    }
}

/// Least-squares weak-perspective camera from 3D-2D correspondences.
///
/// Solves the 2x4 affine camera linearly, takes the nearest pair of
/// orthonormal rows (polar factor), sets the scale to the mean row norm and
/// completes the rotation with a cross product, then runs orthographic
/// Procrustes refinement passes that never increase the residual.
pub fn estimate_camera(points3d: &[[f64; 3]], points2d: &[[f64; 2]]) -> Result<CameraPose, FitError> {
    if points3d.len() != points2d.len() {
        return Err(FitError::Sizing {
            what: "2d correspondences",
            expected: points3d.len(),
            got: points2d.len(),
        });
    }
    if points3d.len() < 4 {
        return Err(FitError::TooFewCorrespondences {
            needed: 4,
            got: points3d.len(),
        });
    }
    let c = center(points3d, points2d);
    let cov = c.x.iter().fold(Matrix3::zeros(), |acc, x| acc + x * x.transpose());
    let sv = cov.symmetric_eigenvalues();
    let (lo, hi) = (sv.min(), sv.max());
    if !(hi > 0.0) || lo <= 1e-12 * hi {
        return Err(FitError::DegenerateConfiguration("3d points are coplanar or collinear"));
    }
    let cross_cov = c
        .x
        .iter()
        .zip(&c.p)
        .fold(Matrix2x3::zeros(), |acc, (x, p)| acc + p * x.transpose());
    let inv = cov
        .try_inverse()
        .ok_or(FitError::DegenerateConfiguration("3d covariance is singular"))?;
    let affine = cross_cov * inv;
    let svd = affine.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(FitError::DegenerateConfiguration("affine camera SVD failed")),
    };
    let rows = u * v_t;
    let scale = 0.5 * (affine.row(0).norm() + affine.row(1).norm());
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(FitError::DegenerateConfiguration("2d points carry no spread"));
    }
    let r1 = Vector3::new(rows[(0, 0)], rows[(0, 1)], rows[(0, 2)]);
    let r2 = Vector3::new(rows[(1, 0)], rows[(1, 1)], rows[(1, 2)]);
    let r3 = r1.cross(&r2);
    let rotation = Matrix3::from_rows(&[r1.transpose(), r2.transpose(), r3.transpose()]);
    let translation = c.mean2 - scale * (rotation.fixed_rows::<2>(0) * c.mean3);
    let pose = CameraPose {
        rotation,
        scale,
        translation,
    };
    Ok(refine_camera(&pose, points3d, points2d, 100))
}

/// Orthographic Procrustes refinement from `pose`. Alternates between
/// completing the unobserved depths and a scaled 3D Procrustes solve; the
/// reprojection residual is non-increasing and the returned pose is the
/// best one visited.
pub fn refine_camera(pose: &CameraPose, points3d: &[[f64; 3]], points2d: &[[f64; 2]], max_iter: usize) -> CameraPose {
    let c = center(points3d, points2d);
    let x_norm2: f64 = c.x.iter().map(|x| x.norm_squared()).sum();
    let mut best = *pose;
    best.translation = c.mean2 - best.scale * (best.rotation.fixed_rows::<2>(0) * c.mean3);
    let mut best_sse = reprojection_sse(&best, points3d, points2d);
    if x_norm2 <= 0.0 {
        return best;
    }
    for _ in 0..max_iter {
        let r3 = best.rotation.row(2).transpose();
        let mut m = Matrix3::zeros();
        for (x, p) in c.x.iter().zip(&c.p) {
            let y = Vector3::new(p[0], p[1], best.scale * r3.dot(x));
            m += y * x.transpose();
        }
        let svd = m.svd(true, true);
        let (u, v_t) = match (svd.u, svd.v_t) {
            (Some(u), Some(v_t)) => (u, v_t),
            _ => break,
        };
        let d = (u * v_t).determinant().signum();
        let fix = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
        let rotation = u * fix * v_t;
        let scale = (svd.singular_values[0] + svd.singular_values[1] + d * svd.singular_values[2]) / x_norm2;
        if !(scale > 0.0) || !scale.is_finite() {
            break;
        }
        let translation = c.mean2 - scale * (rotation.fixed_rows::<2>(0) * c.mean3);
        let candidate = CameraPose {
            rotation,
            scale,
            translation,
        };
        let sse = reprojection_sse(&candidate, points3d, points2d);
        let improved = sse < best_sse;
        let progress = best_sse - sse;
        if improved {
            best = candidate;
            best_sse = sse;
        }
        if !improved || progress <= 1e-15 * best_sse.max(1e-300) {
            break;
        }
    }
    best
}

/// Fitting parameters.
///
/// The anchors fix one identity coefficient to 1 and one expression
/// coefficient to its neutral value. A bilinear shape scales with either
/// coefficient vector, and a weak-perspective camera absorbs any scale, so
/// without an anchor the size of the fitted face is not observable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub max_outer_iterations: usize,
    /// Identity/expression passes per camera update.
    pub shape_sweeps: usize,
    /// After each outer iteration, also try stepping further along the
    /// change it made; kept only when the objective drops.
    pub extrapolate: bool,
    /// Relative change of the objective below which the fit stops.
    pub convergence_tol: f64,
    pub identity_ridge: f64,
    pub expression_ridge: f64,
    pub expression_bounds: (f64, f64),
    pub depth_iterations: usize,
    /// Smoothness weight `w` of the depth refinement.
    pub depth_regularization: f64,
    /// Smoothness weight `w` of the landmark refinement.
    pub landmark_regularization: f64,
    /// Small `‖D‖²` weight (relative to `w`) that keeps refinement systems
    /// positive definite.
    pub displacement_ridge: f64,
    /// Depth correspondences farther than this are dropped.
    pub depth_max_distance: Option<f64>,
    pub identity_anchor: Option<usize>,
    pub expression_anchor: Option<usize>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_outer_iterations: 20,
            shape_sweeps: 3,
            extrapolate: true,
            convergence_tol: 1e-6,
            identity_ridge: 1e-4,
            expression_ridge: 1e-4,
            expression_bounds: (0.0, 1.0),
            depth_iterations: 5,
            depth_regularization: 1.0,
            landmark_regularization: 0.01,
            displacement_ridge: 1e-3,
            depth_max_distance: None,
            identity_anchor: Some(0),
            expression_anchor: Some(0),
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<(), FitError> {
        let bad = |msg: &str| Err(FitError::InvalidConfig(msg.to_string()));
        if self.max_outer_iterations == 0 {
            return bad("max_outer_iterations must be at least 1");
        }
        if !(self.convergence_tol > 0.0) {
            return bad("convergence_tol must be positive");
        }
        for (name, w) in [
            ("identity_ridge", self.identity_ridge),
            ("expression_ridge", self.expression_ridge),
            ("depth_regularization", self.depth_regularization),
            ("landmark_regularization", self.landmark_regularization),
            ("displacement_ridge", self.displacement_ridge),
        ] {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(FitError::InvalidConfig(format!("{name} must be a finite non-negative weight")));
            }
        }
        let (lo, hi) = self.expression_bounds;
        if !(lo <= hi) {
            return bad("expression_bounds must satisfy lower <= upper");
        }
        if let Some(d) = self.depth_max_distance {
            if !(d > 0.0) {
                return bad("depth_max_distance must be positive");
            }
        }
        Ok(())
    }
}

/// Result of a single-image fit.
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub pose: CameraPose,
    pub coeffs: Coefficients,
    /// Pixels.
    pub landmark_rmse: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective (squared landmark error plus ridge terms) before the first
    /// outer iteration and after each one.
    pub objective_history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageFit {
    pub pose: CameraPose,
    pub expression: Vec<f64>,
    pub landmark_rmse: f64,
}

/// Result of a shared-identity multi-image fit.
#[derive(Debug, Clone, PartialEq)]
pub struct JointFitResult {
    pub identity: Vec<f64>,
    pub images: Vec<ImageFit>,
    pub iterations: usize,
    pub converged: bool,
    pub objective_history: Vec<f64>,
}

impl JointFitResult {
    /// Sum of squared landmark errors over all images.
    pub fn total_sse(&self, n_landmarks: usize) -> f64 {
        self.images
            .iter()
            .map(|im| im.landmark_rmse.powi(2) * n_landmarks as f64)
            .sum()
    }
}

/// Outcome of a box-constrained ridge solve.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSolve {
    pub solution: Vec<f64>,
    /// Quadratic objective `½xᵀQx − cᵀx` after the initial clamp and after
    /// each coordinate-descent sweep.
    pub sweep_objectives: Vec<f64>,
}

/// One linear least-squares block `‖J x − y‖²`.
struct LsqBlock {
    jacobian: DMatrix<f64>,
    target: DVector<f64>,
}

/// Minimizes `Σ‖J_b x − y_b‖² + ridge‖x_free‖²` with `fixed` components held
/// and the free ones optionally boxed. Bounded problems start from the
/// clamped unconstrained optimum (and from `warm` when given) and run
/// projected cyclic coordinate descent; the lower-objective run wins.
fn solve_blocks(
    blocks: &[LsqBlock],
    n: usize,
    ridge: f64,
    fixed: &[(usize, f64)],
    bounds: Option<(f64, f64)>,
    warm: Option<&[f64]>,
    what: &'static str,
) -> Result<BlockSolve, FitError> {
    let is_fixed = |i: usize| fixed.iter().any(|&(f, _)| f == i);
    let free: Vec<usize> = (0..n).filter(|&i| !is_fixed(i)).collect();
    let m = free.len();
    let mut q = DMatrix::<f64>::zeros(m, m);
    let mut c = DVector::<f64>::zeros(m);
    for block in blocks {
        let mut y = block.target.clone();
        for &(f, value) in fixed {
            y -= block.jacobian.column(f) * value;
        }
        let jf = block.jacobian.select_columns(&free);
        q += jf.tr_mul(&jf);
        c += jf.tr_mul(&y);
    }
    for i in 0..m {
        q[(i, i)] += ridge;
    }
    let chol = Cholesky::new(q.clone());
    let unconstrained = match chol {
        Some(ch) => ch.solve(&c),
        None => return Err(FitError::SingularNormalEquations(what)),
    };
    if unconstrained.iter().any(|x| !x.is_finite()) {
        return Err(FitError::SingularNormalEquations(what));
    }

    let assemble = |free_values: &[f64]| {
        let mut x = vec![0.0; n];
        for &(f, value) in fixed {
            x[f] = value;
        }
        for (k, &i) in free.iter().enumerate() {
            x[i] = free_values[k];
        }
        x
    };

    let Some((lo, hi)) = bounds else {
        let obj = quadratic_objective(&q, &c, unconstrained.as_slice());
        return Ok(BlockSolve {
            solution: assemble(unconstrained.as_slice()),
            sweep_objectives: vec![obj],
        });
    };

    let start: Vec<f64> = unconstrained.iter().map(|x| x.clamp(lo, hi)).collect();
    let mut best = coordinate_descent(&q, &c, start, lo, hi);
    if let Some(w) = warm {
        let warm_free: Vec<f64> = free.iter().map(|&i| w[i].clamp(lo, hi)).collect();
        let other = coordinate_descent(&q, &c, warm_free, lo, hi);
        if other.sweep_objectives.last() < best.sweep_objectives.last() {
            best = other;
        }
    }
    Ok(BlockSolve {
        solution: assemble(&best.solution),
        sweep_objectives: best.sweep_objectives,
    })
}

fn quadratic_objective(q: &DMatrix<f64>, c: &DVector<f64>, x: &[f64]) -> f64 {
    let xv = DVector::from_column_slice(x);
    0.5 * xv.dot(&(q * &xv)) - c.dot(&xv)
}

fn coordinate_descent(q: &DMatrix<f64>, c: &DVector<f64>, mut x: Vec<f64>, lo: f64, hi: f64) -> BlockSolve {
    let m = x.len();
    let xv = DVector::from_column_slice(&x);
    let mut grad = q * &xv - c;
    let mut history = vec![quadratic_objective(q, c, &x)];
    for _ in 0..2000 {
        let mut max_step: f64 = 0.0;
        for k in 0..m {
            let qkk = q[(k, k)];
            if qkk <= 0.0 {
                continue;
            }
            let updated = (x[k] - grad[k] / qkk).clamp(lo, hi);
            let delta = updated - x[k];
            if delta != 0.0 {
                x[k] = updated;
                grad.axpy(delta, &q.column(k), 1.0);
                max_step = max_step.max(delta.abs());
            }
        }
        let obj = quadratic_objective(q, c, &x);
        // Rounding can make a zero-progress sweep look like a tiny increase.
        let prev = *history.last().expect("history is seeded");
        history.push(obj.min(prev));
        if max_step <= 1e-14 * (1.0 + x.iter().fold(0.0f64, |a, v| a.max(v.abs()))) {
            break;
        }
    }
    BlockSolve {
        solution: x,
        sweep_objectives: history,
    }
}

fn check_landmarks(model: &BilinearModel, landmarks: &[[f64; 2]]) -> Result<(), FitError> {
    if landmarks.len() != model.landmarks().len() {
        return Err(FitError::Sizing {
            what: "landmarks",
            expected: model.landmarks().len(),
            got: landmarks.len(),
        });
    }
    if landmarks.iter().flatten().any(|x| !x.is_finite()) {
        return Err(FitError::InvalidConfig("landmarks must be finite".into()));
    }
    Ok(())
}

/// Maps basis rows (3 per landmark) through the camera: `J = s R₂ B`,
/// target `y = l − t`.
fn projected_block(basis_rows: &DMatrix<f64>, pose: &CameraPose, landmarks: &[[f64; 2]]) -> LsqBlock {
    let n_lm = landmarks.len();
    let cols = basis_rows.ncols();
    let r = &pose.rotation;
    let s = pose.scale;
    let mut jacobian = DMatrix::zeros(2 * n_lm, cols);
    for col in 0..cols {
        let b = basis_rows.column(col);
        let mut out = jacobian.column_mut(col);
        for k in 0..n_lm {
            let (bx, by, bz) = (b[3 * k], b[3 * k + 1], b[3 * k + 2]);
            out[2 * k] = s * (r[(0, 0)] * bx + r[(0, 1)] * by + r[(0, 2)] * bz);
            out[2 * k + 1] = s * (r[(1, 0)] * bx + r[(1, 1)] * by + r[(1, 2)] * bz);
        }
    }
    let mut target = DVector::zeros(2 * n_lm);
    for (k, l) in landmarks.iter().enumerate() {
        target[2 * k] = l[0] - pose.translation[0];
        target[2 * k + 1] = l[1] - pose.translation[1];
    }
    LsqBlock { jacobian, target }
}

/// Expression coefficients for fixed identity and pose: ridge least squares
/// on the landmark reprojection error, then projected coordinate descent
/// into `bounds`.
pub fn solve_expression(
    model: &BilinearModel,
    identity: &[f64],
    pose: &CameraPose,
    landmarks: &[[f64; 2]],
    ridge: f64,
    bounds: Option<(f64, f64)>,
) -> Result<BlockSolve, FitError> {
    check_landmarks(model, landmarks)?;
    let basis = model.expression_basis_rows(identity, &model.landmark_rows())?;
    let block = projected_block(&basis, pose, landmarks);
    solve_blocks(&[block], model.n_expression(), ridge, &[], bounds, None, "expression")
}

/// Identity coefficients for fixed expression and pose (ridge least squares).
pub fn solve_identity(
    model: &BilinearModel,
    expression: &[f64],
    pose: &CameraPose,
    landmarks: &[[f64; 2]],
    ridge: f64,
) -> Result<Vec<f64>, FitError> {
    check_landmarks(model, landmarks)?;
    let basis = model.identity_basis_rows(expression, &model.landmark_rows())?;
    let block = projected_block(&basis, pose, landmarks);
    Ok(solve_blocks(&[block], model.n_identity(), ridge, &[], None, None, "identity")?.solution)
}

/// Landmark positions (model space) of `contract(a, e)`.
fn landmark_points(tensor: &RowTensor, a: &[f64], e: &[f64]) -> Result<Vec<[f64; 3]>, FitError> {
    let x = tensor.contract(a, e)?;
    Ok(x.chunks_exact(3).map(|p| [p[0], p[1], p[2]]).collect())
}

#[derive(Clone)]
struct FitState {
    identity: Vec<f64>,
    poses: Vec<CameraPose>,
    expressions: Vec<Vec<f64>>,
}

struct Anchors {
    identity: Vec<(usize, f64)>,
    expression: Vec<(usize, f64)>,
}

fn anchors(model: &BilinearModel, config: &FitConfig) -> Result<Anchors, FitError> {
    let identity = match config.identity_anchor {
        Some(i) if i >= model.n_identity() => {
            return Err(FitError::InvalidConfig(format!("identity anchor {i} out of range")))
        }
        Some(i) => vec![(i, 1.0)],
        None => Vec::new(),
    };
    let expression = match config.expression_anchor {
        Some(j) if j >= model.n_expression() => {
            return Err(FitError::InvalidConfig(format!("expression anchor {j} out of range")))
        }
        Some(j) => {
            let value = model.neutral_expression()[j];
            if value == 0.0 {
                return Err(FitError::InvalidConfig(format!(
                    "expression anchor {j} has a zero neutral coefficient"
                )));
            }
            vec![(j, value)]
        }
        None => Vec::new(),
    };
    Ok(Anchors { identity, expression })
}

fn ridge_energy(x: &[f64], fixed: &[(usize, f64)]) -> f64 {
    x.iter()
        .enumerate()
        .filter(|(i, _)| !fixed.iter().any(|&(f, _)| f == *i))
        .map(|(_, v)| v * v)
        .sum()
}

const MAX_EXTRAPOLATION: f64 = 8.0;

struct Problem<'a> {
    tensor: RowTensor,
    sets: &'a [Vec<[f64; 2]>],
    config: &'a FitConfig,
    anchors: Anchors,
    n_identity: usize,
    n_expression: usize,
}

impl Problem<'_> {
    fn image_sse(&self, a: &[f64], e: &[f64], pose: &CameraPose, lm: &[[f64; 2]]) -> Result<f64, FitError> {
        Ok(reprojection_sse(pose, &landmark_points(&self.tensor, a, e)?, lm))
    }

    fn objective(&self, state: &FitState) -> Result<f64, FitError> {
        let mut total = self.config.identity_ridge * ridge_energy(&state.identity, &self.anchors.identity);
        for ((pose, e), lm) in state.poses.iter().zip(&state.expressions).zip(self.sets) {
            total += self.image_sse(&state.identity, e, pose, lm)?;
            total += self.config.expression_ridge * ridge_energy(e, &self.anchors.expression);
        }
        Ok(total)
    }

    /// `to + step * (to - from)`, with rotations extrapolated on SO(3) and
    /// expressions clamped to the bounds.
    fn extrapolate(&self, from: &FitState, to: &FitState, step: f64) -> FitState {
        let lerp = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| y + step * (y - x)).collect() };
        let (lo, hi) = self.config.expression_bounds;
        let poses = from
            .poses
            .iter()
            .zip(&to.poses)
            .map(|(p, q)| {
                let delta = UnitQuaternion::from_matrix(&(q.rotation * p.rotation.transpose()));
                let turn = UnitQuaternion::from_scaled_axis(delta.scaled_axis() * step);
                CameraPose {
                    rotation: (turn * UnitQuaternion::from_matrix(&q.rotation)).to_rotation_matrix().into_inner(),
                    scale: (q.scale + step * (q.scale - p.scale)).max(0.5 * q.scale),
                    translation: q.translation + (q.translation - p.translation) * step,
                }
            })
            .collect();
        let mut identity = lerp(&from.identity, &to.identity);
        for &(i, v) in &self.anchors.identity {
            identity[i] = v;
        }
        let expressions = from
            .expressions
            .iter()
            .zip(&to.expressions)
            .map(|(p, q)| {
                let mut e: Vec<f64> = lerp(p, q).into_iter().map(|x| x.clamp(lo, hi)).collect();
                for &(j, v) in &self.anchors.expression {
                    e[j] = v;
                }
                e
            })
            .collect();
        FitState {
            identity,
            poses,
            expressions,
        }
    }

    fn camera_step(&self, state: &mut FitState) -> Result<(), FitError> {
        for ((pose, e), set) in state.poses.iter_mut().zip(&state.expressions).zip(self.sets) {
            let pts = landmark_points(&self.tensor, &state.identity, e)?;
            let refined = refine_camera(pose, &pts, set, 50);
            *pose = match estimate_camera(&pts, set) {
                Ok(fresh) if reprojection_sse(&fresh, &pts, set) < reprojection_sse(&refined, &pts, set) => fresh,
                _ => refined,
            };
        }
        Ok(())
    }

    fn identity_step(&self, state: &mut FitState) -> Result<(), FitError> {
        let mut blocks = Vec::with_capacity(self.sets.len());
        for ((pose, e), set) in state.poses.iter().zip(&state.expressions).zip(self.sets) {
            let basis = self.tensor.identity_basis(e)?;
            blocks.push(projected_block(&basis, pose, set));
        }
        state.identity = solve_blocks(
            &blocks,
            self.n_identity,
            self.config.identity_ridge,
            &self.anchors.identity,
            None,
            None,
            "identity",
        )?
        .solution;
        Ok(())
    }

    fn expression_step(&self, state: &mut FitState) -> Result<(), FitError> {
        let basis = self.tensor.expression_basis(&state.identity)?;
        for ((pose, e), set) in state.poses.iter().zip(state.expressions.iter_mut()).zip(self.sets) {
            let block = projected_block(&basis, pose, set);
            let solved = solve_blocks(
                &[block],
                self.n_expression,
                self.config.expression_ridge,
                &self.anchors.expression,
                Some(self.config.expression_bounds),
                Some(e),
                "expression",
            )?;
            *e = solved.solution;
        }
        Ok(())
    }
}

/// Single-image fit. Identical to [`fit_joint`] with one landmark set.
pub fn fit_image(model: &BilinearModel, landmarks: &[[f64; 2]], config: &FitConfig) -> Result<FitResult, FitError> {
    let joint = fit_joint(model, &[landmarks.to_vec()], config)?;
    let image = joint.images.into_iter().next().expect("one image");
    Ok(FitResult {
        pose: image.pose,
        coeffs: Coefficients {
            identity: joint.identity,
            expression: image.expression,
        },
        landmark_rmse: image.landmark_rmse,
        iterations: joint.iterations,
        converged: joint.converged,
        objective_history: joint.objective_history,
    })
}

/// Multi-image fit with one identity shared by all images and a pose and
/// expression per image. Each outer iteration re-estimates the cameras, then
/// runs up to `shape_sweeps` passes of: identity from the normal equations
/// stacked over all images (in image order), then each expression.
pub fn fit_joint(model: &BilinearModel, landmark_sets: &[Vec<[f64; 2]>], config: &FitConfig) -> Result<JointFitResult, FitError> {
    config.validate()?;
    if landmark_sets.is_empty() {
        return Err(FitError::Sizing {
            what: "landmark sets",
            expected: 1,
            got: 0,
        });
    }
    for set in landmark_sets {
        check_landmarks(model, set)?;
    }
    let problem = Problem {
        tensor: model.row_tensor(&model.landmark_rows()),
        sets: landmark_sets,
        config,
        anchors: anchors(model, config)?,
        n_identity: model.n_identity(),
        n_expression: model.n_expression(),
    };
    let n_lm = model.landmarks().len();

    let mut identity = vec![0.0; model.n_identity()];
    for &(i, v) in &problem.anchors.identity {
        identity[i] = v;
    }
    let mut neutral = model.neutral_expression().to_vec();
    let (lo, hi) = config.expression_bounds;
    for (j, x) in neutral.iter_mut().enumerate() {
        *x = match problem.anchors.expression.iter().find(|&&(f, _)| f == j) {
            Some(&(_, v)) => v,
            None => x.clamp(lo, hi),
        };
    }
    let start_points = landmark_points(&problem.tensor, &identity, &neutral)?;
    let mut poses = Vec::with_capacity(landmark_sets.len());
    for set in landmark_sets {
        poses.push(estimate_camera(&start_points, set)?);
    }
    let mut state = FitState {
        identity,
        poses,
        expressions: vec![neutral; landmark_sets.len()],
    };

    let mut prev = problem.objective(&state)?;
    let mut history = vec![prev];
    let floor = 1e-20 * (n_lm * landmark_sets.len()) as f64;
    let mut converged = false;
    let mut iterations = 0;
    let mut step = 1.0;

    while !converged && iterations < config.max_outer_iterations {
        iterations += 1;
        let mut next = state.clone();
        problem.camera_step(&mut next)?;
        let mut inner_prev = problem.objective(&next)?;
        for _ in 0..config.shape_sweeps.max(1) {
            problem.identity_step(&mut next)?;
            problem.expression_step(&mut next)?;
            let inner = problem.objective(&next)?;
            let stalled = inner_prev - inner <= 1e-3 * config.convergence_tol * inner_prev;
            inner_prev = inner;
            if stalled || inner <= floor {
                break;
            }
        }

        let mut current = inner_prev;
        if config.extrapolate && iterations > 1 {
            let jump = problem.extrapolate(&state, &next, step);
            let jumped = problem.objective(&jump)?;
            if jumped < current {
                next = jump;
                current = jumped;
                step = (step * 1.5).min(MAX_EXTRAPOLATION);
            } else {
                step = 1.0;
            }
        }
        if current > prev {
            // Every block is an exact minimizer, so this is rounding noise.
            history.push(prev);
            converged = true;
            break;
        }
        state = next;
        history.push(current);
        let change = prev - current;
        converged = current <= floor || change <= config.convergence_tol * prev;
        prev = current;
    }

    let mut images = Vec::with_capacity(landmark_sets.len());
    for ((pose, e), set) in state.poses.iter().zip(&state.expressions).zip(landmark_sets) {
        let sse = problem.image_sse(&state.identity, e, pose, set)?;
        images.push(ImageFit {
            pose: *pose,
            expression: e.clone(),
            landmark_rmse: (sse / n_lm as f64).sqrt(),
        });
    }
    Ok(JointFitResult {
        identity: state.identity,
        images,
        iterations,
        converged,
        objective_history: history,
    })
}

/// 3D points in model-space millimeters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthCloud {
    pub points: Vec<[f64; 3]>,
}

impl DepthCloud {
    /// Converts camera-space points (`R x`) back into model space.
    pub fn from_camera_space(points: &[[f64; 3]], pose: &CameraPose) -> Self {
        Self {
            points: points.iter().map(|p| pose.from_camera(*p)).collect(),
        }
    }
}

/// Refined shape with its displacement from the input.
#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    pub shape: Shape,
    pub displacement: DisplacementField,
    /// Objective after each refinement solve.
    pub objective_history: Vec<f64>,
}

/// `w (‖L D‖² + μ‖D‖²)` for a per-axis displacement stack.
struct Smoothness<'a> {
    laplacian: &'a CsrMatrix,
    weight: f64,
    ridge: f64,
}

impl Smoothness<'_> {
    /// Adds `w (LᵀL + μI) x` to `out` for one scalar component.
    fn apply_axis(&self, x: &[f64], out: &mut [f64], scratch: &mut [f64], scratch2: &mut [f64]) {
        self.laplacian.mul_vec_into(x, scratch);
        self.laplacian.mul_vec_into(scratch, scratch2);
        for i in 0..x.len() {
            out[i] += self.weight * (scratch2[i] + self.ridge * x[i]);
        }
    }

    fn energy(&self, field: &DisplacementField) -> f64 {
        let mut total = 0.0;
        for axis in 0..3 {
            let comp: Vec<f64> = field.vectors.iter().map(|d| d[axis]).collect();
            let l = self.laplacian.mul_vec(&comp);
            total += l.iter().map(|x| x * x).sum::<f64>() + self.ridge * comp.iter().map(|x| x * x).sum::<f64>();
        }
        self.weight * total
    }
}

/// `sqrt(‖L D‖² + μ‖D‖²)`: the norm the refinement regularizer penalizes.
pub fn regularized_norm(model: &BilinearModel, field: &DisplacementField, ridge: f64) -> Result<f64, FitError> {
    let laplacian = graph_laplacian(model.n_vertices(), model.triangles())?;
    let smooth = Smoothness {
        laplacian: &laplacian,
        weight: 1.0,
        ridge,
    };
    Ok(smooth.energy(field).sqrt())
}

fn nearest(points: &[[f64; 3]], x: [f64; 3]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, p) in points.iter().enumerate() {
        let d = (p[0] - x[0]).powi(2) + (p[1] - x[1]).powi(2) + (p[2] - x[2]).powi(2);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Closest-point refinement against a depth cloud: alternate nearest-point
/// matching with the smooth displacement solve
/// `min_D Σ‖x + D − target‖² + w (‖L D‖² + μ‖D‖²)`.
pub fn refine_with_depth(model: &BilinearModel, shape: &Shape, depth: &DepthCloud, config: &FitConfig) -> Result<Refinement, FitError> {
    config.validate()?;
    model.check_shape(shape)?;
    if depth.points.is_empty() {
        return Err(FitError::EmptyDepth);
    }
    let n = model.n_vertices();
    let laplacian = graph_laplacian(n, model.triangles())?;
    let w = config.depth_regularization;
    let smooth = Smoothness {
        laplacian: &laplacian,
        weight: w,
        ridge: config.displacement_ridge,
    };
    let max_d2 = config.depth_max_distance.map(|d| d * d).unwrap_or(f64::INFINITY);

    let mut field = DisplacementField::zeros(n);
    let mut history = Vec::new();
    for _ in 0..config.depth_iterations.max(1) {
        let current = shape.displaced(&field.vectors);
        let mut weights = vec![0.0; n];
        let mut targets = vec![[0.0; 3]; n];
        for v in 0..n {
            let x = current.vertex(v);
            let (idx, d2) = nearest(&depth.points, x);
            if d2 <= max_d2 {
                weights[v] = 1.0;
                targets[v] = depth.points[idx];
            }
        }
        if w == 0.0 && weights.contains(&0.0) {
            return Err(FitError::UnderConstrained(
                "vertices without depth correspondences and zero smoothness weight".into(),
            ));
        }
        if weights.iter().all(|&x| x == 0.0) && w == 0.0 {
            return Err(FitError::UnderConstrained("no depth correspondences".into()));
        }

        let mut next = DisplacementField::zeros(n);
        let mut s1 = vec![0.0; n];
        let mut s2 = vec![0.0; n];
        for axis in 0..3 {
            let rhs: Vec<f64> = (0..n)
                .map(|v| weights[v] * (targets[v][axis] - shape.vertex(v)[axis]))
                .collect();
            let mut x: Vec<f64> = field.vectors.iter().map(|d| d[axis]).collect();
            let report = conjugate_gradient(
                |p, out| {
                    for i in 0..n {
                        out[i] = weights[i] * p[i];
                    }
                    smooth.apply_axis(p, out, &mut s1, &mut s2);
                },
                &rhs,
                &mut x,
                1e-13,
                20 * n + 100,
            );
            if !report.converged && report.relative_residual > 1e-8 {
                log::warn!("depth refinement CG stalled at relative residual {}", report.relative_residual);
            }
            for (d, xi) in next.vectors.iter_mut().zip(&x) {
                d[axis] = *xi;
            }
        }
        field = next;
        let refined = shape.displaced(&field.vectors);
        let data: f64 = (0..n)
            .map(|v| {
                let x = refined.vertex(v);
                let t = targets[v];
                weights[v] * ((x[0] - t[0]).powi(2) + (x[1] - t[1]).powi(2) + (x[2] - t[2]).powi(2))
            })
            .sum();
        history.push(data + smooth.energy(&field));
    }
    Ok(Refinement {
        shape: shape.displaced(&field.vectors),
        displacement: field,
        objective_history: history,
    })
}

/// Laplacian-editing solve that pulls projected landmark vertices toward
/// `landmarks`: `min_D Σ‖P(x_lm + D_lm) − l‖² + w (‖L D‖² + μ‖D‖²)`.
pub fn refine_with_landmarks(
    model: &BilinearModel,
    shape: &Shape,
    pose: &CameraPose,
    landmarks: &[[f64; 2]],
    config: &FitConfig,
) -> Result<Refinement, FitError> {
    config.validate()?;
    model.check_shape(shape)?;
    check_landmarks(model, landmarks)?;
    pose.validate()?;
    let w = config.landmark_regularization;
    if w == 0.0 {
        return Err(FitError::UnderConstrained(
            "landmarks constrain only their own vertices in two directions; a positive smoothness weight is required".into(),
        ));
    }
    let n = model.n_vertices();
    let laplacian = graph_laplacian(n, model.triangles())?;
    let smooth = Smoothness {
        laplacian: &laplacian,
        weight: w,
        ridge: config.displacement_ridge,
    };
    let s = pose.scale;
    let r2 = pose.rotation.fixed_rows::<2>(0).into_owned();
    // s² R₂ᵀR₂, the data-term Hessian block of one landmark vertex.
    let hess = (r2.transpose() * r2) * (s * s);

    let mut rhs = vec![0.0; 3 * n];
    for (&v, l) in model.landmarks().iter().zip(landmarks) {
        let v = v as usize;
        let p = pose.project_point(shape.vertex(v));
        let resid = Vector2::new(l[0] - p[0], l[1] - p[1]);
        let g = r2.transpose() * resid * s;
        for k in 0..3 {
            rhs[3 * v + k] += g[k];
        }
    }

    let lm: Vec<usize> = model.landmarks().iter().map(|&v| v as usize).collect();
    let mut comp = vec![0.0; n];
    let mut acc = vec![0.0; n];
    let mut s1 = vec![0.0; n];
    let mut s2 = vec![0.0; n];
    let apply = |x: &[f64], out: &mut [f64]| {
        out.iter_mut().for_each(|o| *o = 0.0);
        for &v in &lm {
            let d = Vector3::new(x[3 * v], x[3 * v + 1], x[3 * v + 2]);
            let h = hess * d;
            for k in 0..3 {
                out[3 * v + k] += h[k];
            }
        }
        for axis in 0..3 {
            for i in 0..n {
                comp[i] = x[3 * i + axis];
                acc[i] = 0.0;
            }
            smooth.apply_axis(&comp, &mut acc, &mut s1, &mut s2);
            for i in 0..n {
                out[3 * i + axis] += acc[i];
            }
        }
    };
    let mut x = vec![0.0; 3 * n];
    let report = conjugate_gradient(apply, &rhs, &mut x, 1e-13, 60 * n + 100);
    if !report.converged && report.relative_residual > 1e-8 {
        log::warn!("landmark refinement CG stalled at relative residual {}", report.relative_residual);
    }
    let field = DisplacementField {
        vectors: x.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
    };
    let refined = shape.displaced(&field.vectors);
    let data: f64 = lm
        .iter()
        .zip(landmarks)
        .map(|(&v, l)| {
            let p = pose.project_point(refined.vertex(v));
            (p[0] - l[0]).powi(2) + (p[1] - l[1]).powi(2)
        })
        .sum();
    Ok(Refinement {
        objective_history: vec![data + smooth.energy(&field)],
        shape: refined,
        displacement: field,
    })
}

/// Landmark RMSE (pixels) of `shape` under `pose`.
pub fn landmark_rmse(model: &BilinearModel, shape: &Shape, pose: &CameraPose, landmarks: &[[f64; 2]]) -> f64 {
    let projected: Vec<[f64; 2]> = model
        .landmarks()
        .iter()
        .map(|&v| pose.project_point(shape.vertex(v as usize)))
        .collect();
    rmse_2d(&projected, landmarks)
}
