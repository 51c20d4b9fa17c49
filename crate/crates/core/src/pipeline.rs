//! End-to-end operations shared by the command-line tool and the studio
//! service: fit, texture extraction, conditioning, shape deformation,
//! rendering and blending, plus the training/evaluation/synthesis wrappers.
//! Every failure is classified into an [`ErrorKind`] with a stable exit code.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compositor::{blend, vertex_distance_plane, BlendConfig, Blended, CompositeError};
use crate::fitting::{
    fit_image, landmark_rmse, refine_with_depth, refine_with_landmarks, DepthCloud, FitConfig, FitError, Refinement,
};
use crate::ganmath::{attention_compose_with, loss_breakdown, AttentionOrientation, DiscriminatorOutputs, GanError, LossBreakdown, LossWeights};
use crate::io::{self, IoError, PoseRecord};
use crate::model::{load_model, BilinearModel, Coefficients, ModelError, ModelFileError, Shape};
use crate::raster::{conditioning_stack, extract_texture, render, ConditioningConfig, ConditioningStack, Image, Mask, RasterError, Texture};
use crate::shapenet::{predict_deformation, train_shape_branch, MlpParams, ShapeNetError, ShapeTrainConfig, TrainedShapeBranch};
use crate::spectral::{eigenbasis, graph_laplacian, DisplacementField, SpectralBasis, SpectralError};
use crate::synthkit::{
    benchmark_shape_branch, branch_training_set, make_synthetic_model, sample_scene, BenchmarkConfig, BenchmarkReport, NonlinearDeformation,
    SceneOptions, SynthError, SyntheticSpec,
};

/// Failure classes, one exit code each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorKind {
    /// Output could not be written.
    Io,
    BadArgs,
    MissingInput,
    MalformedInput,
    NumericalFailure,
    /// Inputs disagree in size (landmark count, coefficient length, mesh).
    Sizing,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Io => 1,
            ErrorKind::BadArgs => 2,
            ErrorKind::MissingInput => 3,
            ErrorKind::MalformedInput => 4,
            ErrorKind::NumericalFailure => 5,
            ErrorKind::Sizing => 6,
        }
    }
}

#[derive(Debug, Error)]
#[error("{message}")]
pub struct PipelineError {
    pub kind: ErrorKind,
    pub message: String,
}

impl PipelineError {
    pub fn new(kind: ErrorKind, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }

    fn context(mut self, what: &str) -> Self {
        self.message = format!("{what}: {}", self.message);
        self
    }
}

type Result<T> = std::result::Result<T, PipelineError>;

impl From<IoError> for PipelineError {
    fn from(e: IoError) -> Self {
        let kind = if e.is_not_found() {
            ErrorKind::MissingInput
        } else {
            match e {
                IoError::Io { .. } => ErrorKind::Io,
                IoError::Unsupported(_) => ErrorKind::Io,
                _ => ErrorKind::MalformedInput,
            }
        };
        Self::new(kind, e.to_string())
    }
}

impl From<ModelError> for PipelineError {
    fn from(e: ModelError) -> Self {
        let kind = match e {
            ModelError::Sizing { .. } => ErrorKind::Sizing,
            _ => ErrorKind::MalformedInput,
        };
        Self::new(kind, e.to_string())
    }
}

impl From<ModelFileError> for PipelineError {
    fn from(e: ModelFileError) -> Self {
        let kind = match &e {
            ModelFileError::Io(io) if io.kind() == std::io::ErrorKind::NotFound => ErrorKind::MissingInput,
            _ => ErrorKind::MalformedInput,
        };
        Self::new(kind, e.to_string())
    }
}

impl From<FitError> for PipelineError {
    fn from(e: FitError) -> Self {
        let e = match e {
            FitError::Model(m) => return m.into(),
            FitError::Spectral(s) => return s.into(),
            other => other,
        };
        let kind = match &e {
            FitError::Sizing { .. } | FitError::TooFewCorrespondences { .. } => ErrorKind::Sizing,
            FitError::InvalidConfig(_) => ErrorKind::BadArgs,
            FitError::InvalidPose(_) => ErrorKind::MalformedInput,
            _ => ErrorKind::NumericalFailure,
        };
        Self::new(kind, e.to_string())
    }
}

impl From<SpectralError> for PipelineError {
    fn from(e: SpectralError) -> Self {
        let kind = match e {
            SpectralError::MeshMismatch { .. } | SpectralError::Sizing { .. } => ErrorKind::Sizing,
            SpectralError::InvalidK { .. } => ErrorKind::BadArgs,
            SpectralError::Disconnected { .. } => ErrorKind::MalformedInput,
            SpectralError::RepeatedZeroEigenvalue { .. } => ErrorKind::NumericalFailure,
        };
        Self::new(kind, e.to_string())
    }
}

impl From<RasterError> for PipelineError {
    fn from(e: RasterError) -> Self {
        let e = match e {
            RasterError::Model(m) => return m.into(),
            other => other,
        };
        let kind = match &e {
            RasterError::Sizing { .. } => ErrorKind::Sizing,
            RasterError::InvalidResolution => ErrorKind::BadArgs,
            RasterError::OverlappingUv { .. } => ErrorKind::MalformedInput,
            _ => ErrorKind::NumericalFailure,
        };
        Self::new(kind, e.to_string())
    }
}

impl From<ShapeNetError> for PipelineError {
    fn from(e: ShapeNetError) -> Self {
        let e = match e {
            ShapeNetError::Spectral(s) => return s.into(),
            other => other,
        };
        let kind = match &e {
            ShapeNetError::NonFiniteLoss { .. } => ErrorKind::NumericalFailure,
            ShapeNetError::InvalidConfig(_) | ShapeNetError::EmptyBatch => ErrorKind::BadArgs,
            _ => ErrorKind::Sizing,
        };
        Self::new(kind, e.to_string())
    }
}

impl From<CompositeError> for PipelineError {
    fn from(e: CompositeError) -> Self {
        match e {
            CompositeError::Sizing { .. } => Self::new(ErrorKind::Sizing, e.to_string()),
            CompositeError::InvalidConfig(_) => Self::new(ErrorKind::BadArgs, e.to_string()),
            CompositeError::Raster(r) => r.into(),
        }
    }
}

impl From<GanError> for PipelineError {
    fn from(e: GanError) -> Self {
        let kind = match e {
            GanError::Shape { .. } => ErrorKind::Sizing,
            GanError::NonFinite(_) | GanError::EmptyMask => ErrorKind::MalformedInput,
        };
        Self::new(kind, e.to_string())
    }
}

impl From<SynthError> for PipelineError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Model(m) => m.into(),
            SynthError::Raster(r) => r.into(),
            SynthError::Spectral(s) => s.into(),
            SynthError::ShapeNet(s) => s.into(),
            other => Self::new(ErrorKind::BadArgs, other.to_string()),
        }
    }
}

/// Configuration of every command; the JSON config file mirrors it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Model file; `None` builds the default synthetic model.
    pub model: Option<PathBuf>,
    /// Synthetic model used when `model` is `None`.
    pub synthetic: SyntheticSpec,
    pub fit: FitConfig,
    /// Texture and conditioning resolution.
    pub resolution: usize,
    /// Spectral basis size of the shape branch.
    pub k: usize,
    /// Trained shape-branch bundle used by transfers.
    pub shapenet: Option<PathBuf>,
    pub blend: BlendConfig,
    pub conditioning: ConditioningConfig,
    pub depth_refine: bool,
    /// Refine with landmarks when no depth is used.
    pub landmark_refine: bool,
    pub attention_orientation: AttentionOrientation,
    pub benchmark: BenchmarkConfig,
    pub scenes: SceneOptions,
    pub n_scenes: usize,
    /// Add a nonlinear field to synthesized scenes.
    pub nonlinear_scenes: bool,
    pub out: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            model: None,
            synthetic: SyntheticSpec::default(),
            fit: FitConfig::default(),
            resolution: 256,
            k: 100,
            shapenet: None,
            blend: BlendConfig::default(),
            conditioning: ConditioningConfig::default(),
            depth_refine: true,
            landmark_refine: true,
            attention_orientation: AttentionOrientation::default(),
            benchmark: BenchmarkConfig::default(),
            scenes: SceneOptions::default(),
            n_scenes: 1,
            nonlinear_scenes: false,
            out: None,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(io::read_json(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.fit.validate()?;
        self.blend.validate()?;
        if self.resolution == 0 {
            return Err(PipelineError::new(ErrorKind::BadArgs, "resolution must be at least 1"));
        }
        if self.k == 0 {
            return Err(PipelineError::new(ErrorKind::BadArgs, "k must be at least 1"));
        }
        Ok(())
    }

    pub fn conditioning_config(&self) -> ConditioningConfig {
        ConditioningConfig {
            resolution: self.resolution,
            ..self.conditioning.clone()
        }
    }
}

/// Loads the configured model file or builds the synthetic one.
pub fn load_configured_model(config: &PipelineConfig) -> Result<BilinearModel> {
    match &config.model {
        Some(path) => Ok(load_model(path).map_err(|e| PipelineError::from(e).context(&path.display().to_string()))?),
        None => Ok(make_synthetic_model(&config.synthetic)?),
    }
}

/// First `k` Laplacian eigenvectors of the model's mesh.
pub fn model_basis(model: &BilinearModel, k: usize) -> Result<SpectralBasis> {
    let lap = graph_laplacian(model.n_vertices(), model.triangles())?;
    Ok(eigenbasis(&lap, k, model.mesh_hash())?)
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum LandmarkFile {
    Plain(Vec<[f64; 2]>),
    Wrapped { landmarks: Vec<[f64; 2]> },
}

/// Landmarks as `[[x, y], ...]` or `{"landmarks": [[x, y], ...]}`, pixels.
pub fn parse_landmarks(bytes: &[u8]) -> Result<Vec<[f64; 2]>> {
    let lm = match serde_json::from_slice::<LandmarkFile>(bytes) {
        Ok(LandmarkFile::Plain(v)) | Ok(LandmarkFile::Wrapped { landmarks: v }) => v,
        Err(e) => return Err(PipelineError::new(ErrorKind::MalformedInput, format!("landmarks: {e}"))),
    };
    if lm.iter().flatten().any(|v| !v.is_finite()) {
        return Err(PipelineError::new(ErrorKind::MalformedInput, "landmarks contain non-finite values"));
    }
    Ok(lm)
}

pub fn read_landmarks(path: &Path) -> Result<Vec<[f64; 2]>> {
    parse_landmarks(&io::read_bytes(path)?).map_err(|e| e.context(&path.display().to_string()))
}

/// Coordinate frame of supplied depth points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DepthFrame {
    /// Rotated into the camera (`R x`); converted with the fitted pose.
    Camera,
    Model,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthInput {
    pub frame: DepthFrame,
    pub points: Vec<[f64; 3]>,
}

pub fn read_depth(path: &Path) -> Result<DepthInput> {
    let d: DepthInput = io::read_json(path)?;
    if d.points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(PipelineError::new(ErrorKind::MalformedInput, format!("{}: non-finite depth", path.display())));
    }
    Ok(d)
}

/// The expression file format shared by the CLI and the studio presets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpressionFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub expression: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ExpressionFileRaw {
    Plain(Vec<f64>),
    Full(ExpressionFile),
}

/// `{"expression": [...]}` (optionally named) or a bare array.
pub fn parse_expression(bytes: &[u8]) -> Result<Vec<f64>> {
    let e = match serde_json::from_slice::<ExpressionFileRaw>(bytes) {
        Ok(ExpressionFileRaw::Plain(e)) => e,
        Ok(ExpressionFileRaw::Full(f)) => f.expression,
        Err(err) => return Err(PipelineError::new(ErrorKind::MalformedInput, format!("expression: {err}"))),
    };
    if e.iter().any(|v| !v.is_finite()) {
        return Err(PipelineError::new(ErrorKind::MalformedInput, "expression contains non-finite values"));
    }
    Ok(e)
}

pub fn read_expression(path: &Path) -> Result<Vec<f64>> {
    parse_expression(&io::read_bytes(path)?).map_err(|e| e.context(&path.display().to_string()))
}

/// Length and bound check of an expression vector.
pub fn check_expression(model: &BilinearModel, e: &[f64], bounds: (f64, f64)) -> Result<()> {
    if e.len() != model.n_expression() {
        return Err(PipelineError::new(
            ErrorKind::Sizing,
            format!("expression has {} coefficients, model expects {}", e.len(), model.n_expression()),
        ));
    }
    if let Some((j, v)) = e.iter().enumerate().find(|(_, v)| !(**v >= bounds.0 && **v <= bounds.1)) {
        return Err(PipelineError::new(
            ErrorKind::MalformedInput,
            format!("expression coefficient {j} = {v} outside [{}, {}]", bounds.0, bounds.1),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementRecord {
    /// `depth` or `landmarks`.
    pub kind: String,
    pub objective_history: Vec<f64>,
    /// Largest per-vertex displacement, mm.
    pub max_displacement: f64,
    /// Landmark RMSE of the refined shape, pixels.
    pub landmark_rmse: f64,
}

pub const FIT_FORMAT: &str = "morphfit-fit";

/// Persisted fit: everything a transfer needs besides the image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub format: String,
    pub version: u32,
    pub mesh_hash: String,
    /// Width and height of the fitted image.
    pub image_size: [usize; 2],
    pub pose: PoseRecord,
    pub identity: Vec<f64>,
    pub expression: Vec<f64>,
    /// Landmark RMSE of the bilinear fit, pixels.
    pub landmark_rmse: f64,
    pub iterations: usize,
    pub converged: bool,
    pub objective_history: Vec<f64>,
    pub refinement: Option<RefinementRecord>,
    /// Per-vertex refinement displacement, mm.
    pub displacement: Option<Vec<[f64; 3]>>,
}

impl FitRecord {
    pub fn check_model(&self, model: &BilinearModel) -> Result<()> {
        if self.format != FIT_FORMAT {
            return Err(PipelineError::new(ErrorKind::MalformedInput, format!("not a fit record: {}", self.format)));
        }
        if self.mesh_hash != model.mesh_hash() {
            return Err(PipelineError::new(ErrorKind::Sizing, "fit record belongs to a different model"));
        }
        let checks = [
            ("identity", self.identity.len(), model.n_identity()),
            ("expression", self.expression.len(), model.n_expression()),
            ("displacement", self.displacement.as_ref().map_or(model.n_vertices(), |d| d.len()), model.n_vertices()),
        ];
        for (what, got, expected) in checks {
            if got != expected {
                return Err(PipelineError::new(ErrorKind::Sizing, format!("fit record {what}: expected {expected}, got {got}")));
            }
        }
        Ok(())
    }

    pub fn coefficients(&self) -> Coefficients {
        Coefficients {
            identity: self.identity.clone(),
            expression: self.expression.clone(),
        }
    }

    /// Bilinear shape for expression `e` plus the stored refinement.
    pub fn shape_with(&self, model: &BilinearModel, e: &[f64]) -> Result<Shape> {
        let s = model.contract(&self.identity, e)?;
        Ok(match &self.displacement {
            Some(d) => s.displaced(d),
            None => s,
        })
    }
}

/// Result of fitting one image.
#[derive(Debug, Clone, PartialEq)]
pub struct FitOutput {
    pub record: FitRecord,
    pub shape: Shape,
    pub texture: Texture,
    /// Fitted shape rendered with its own texture over the input.
    pub overlay: Image,
    pub coverage: Mask,
}

/// Fits the model to `landmarks`, refines with depth (or landmarks), and
/// extracts the texture.
pub fn run_fit(model: &BilinearModel, image: &Image, landmarks: &[[f64; 2]], depth: Option<&DepthInput>, config: &PipelineConfig) -> Result<FitOutput> {
    config.validate()?;
    if image.channels() != 3 {
        return Err(PipelineError::new(ErrorKind::MalformedInput, "image must be RGB"));
    }
    let fit = fit_image(model, landmarks, &config.fit)?;
    let base = model.contract_coeffs(&fit.coeffs)?;
    let refined: Option<(&str, Refinement)> = match depth {
        Some(d) if config.depth_refine => {
            let cloud = match d.frame {
                DepthFrame::Camera => DepthCloud::from_camera_space(&d.points, &fit.pose),
                DepthFrame::Model => DepthCloud { points: d.points.clone() },
            };
            Some(("depth", refine_with_depth(model, &base, &cloud, &config.fit)?))
        }
        _ if config.landmark_refine => Some(("landmarks", refine_with_landmarks(model, &base, &fit.pose, landmarks, &config.fit)?)),
        _ => None,
    };
    let shape = refined.as_ref().map_or_else(|| base.clone(), |(_, r)| r.shape.clone());
    if !shape.is_finite() {
        return Err(PipelineError::new(ErrorKind::NumericalFailure, "refined shape is not finite"));
    }
    let texture = extract_texture(image, &shape, &fit.pose, model, config.resolution)?;
    let overlay = render(model, &shape, &texture, &fit.pose, image.width(), image.height(), Some(image))?;
    let record = FitRecord {
        format: FIT_FORMAT.into(),
        version: 1,
        mesh_hash: model.mesh_hash(),
        image_size: [image.width(), image.height()],
        pose: PoseRecord::from(&fit.pose),
        identity: fit.coeffs.identity.clone(),
        expression: fit.coeffs.expression.clone(),
        landmark_rmse: fit.landmark_rmse,
        iterations: fit.iterations,
        converged: fit.converged,
        objective_history: fit.objective_history.clone(),
        refinement: refined.as_ref().map(|(kind, r)| RefinementRecord {
            kind: kind.to_string(),
            objective_history: r.objective_history.clone(),
            max_displacement: r.displacement.max_length(),
            landmark_rmse: landmark_rmse(model, &r.shape, &fit.pose, landmarks),
        }),
        displacement: refined.map(|(_, r)| r.displacement.vectors),
    };
    Ok(FitOutput {
        record,
        shape,
        texture,
        overlay: overlay.image,
        coverage: overlay.coverage,
    })
}

/// `fit.json`, `shape.obj`, `texture/` (float bundle), `texture.png`,
/// `texture_valid.png`, `overlay.png`, `coverage.png`.
pub fn write_fit_outputs(dir: &Path, model: &BilinearModel, out: &FitOutput) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| PipelineError::new(ErrorKind::Io, format!("{}: {e}", dir.display())))?;
    io::write_json(&dir.join("fit.json"), &out.record)?;
    io::write_obj(&dir.join("shape.obj"), model, &out.shape)?;
    io::write_texture(&dir.join("texture"), &out.texture)?;
    io::write_png(&dir.join("texture.png"), &out.texture.image)?;
    io::write_png(&dir.join("texture_valid.png"), &out.texture.valid.to_image())?;
    io::write_png(&dir.join("overlay.png"), &out.overlay)?;
    io::write_png(&dir.join("coverage.png"), &out.coverage.to_image())?;
    Ok(())
}

/// Trained shape branch with the basis its outputs refer to.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeBranch {
    pub params: MlpParams,
    pub basis: SpectralBasis,
}

/// Loads a shape-branch bundle and builds the matching basis.
pub fn load_shape_branch(model: &BilinearModel, dir: &Path) -> Result<ShapeBranch> {
    let (params, meta) = io::read_shape_branch(dir)?;
    if meta.mesh_hash != model.mesh_hash() {
        return Err(PipelineError::new(ErrorKind::Sizing, "shape branch was trained for a different mesh"));
    }
    let n_in = model.n_identity() + 2 * model.n_expression();
    if params.n_inputs() != n_in || params.n_outputs() % 3 != 0 {
        return Err(PipelineError::new(
            ErrorKind::Sizing,
            format!("shape branch maps {} -> {}, model needs {n_in} -> 3k", params.n_inputs(), params.n_outputs()),
        ));
    }
    let basis = model_basis(model, params.n_outputs() / 3)?;
    Ok(ShapeBranch { params, basis })
}

/// Source-side state reused across transfers of one fitted image.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferSource {
    pub record: FitRecord,
    pub image: Image,
    pub pose: crate::fitting::CameraPose,
    pub neutral: Shape,
    pub shape: Shape,
    pub texture: Texture,
}

pub fn prepare_source(model: &BilinearModel, record: &FitRecord, image: &Image, config: &PipelineConfig) -> Result<TransferSource> {
    config.validate()?;
    record.check_model(model)?;
    if [image.width(), image.height()] != record.image_size {
        return Err(PipelineError::new(
            ErrorKind::Sizing,
            format!("image is {}x{}, fit was made on {:?}", image.width(), image.height(), record.image_size),
        ));
    }
    if image.channels() != 3 {
        return Err(PipelineError::new(ErrorKind::MalformedInput, "image must be RGB"));
    }
    let pose = record.pose.to_pose()?;
    let shape = record.shape_with(model, &record.expression)?;
    let neutral = record.shape_with(model, model.neutral_expression())?;
    let texture = extract_texture(image, &shape, &pose, model, config.resolution)?;
    Ok(TransferSource {
        record: record.clone(),
        image: image.clone(),
        pose,
        neutral,
        shape,
        texture,
    })
}

/// UV-space generator outputs that replace the reused source texture.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedTexture {
    pub attention: Image,
    pub color: Image,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransferMetrics {
    /// Largest per-vertex distance between source and target, mm.
    pub max_vertex_displacement: f64,
    /// Largest predicted shape-branch displacement, mm (0 without one).
    pub max_predicted_displacement: f64,
    pub coverage_pixels: usize,
    pub dilated_pixels: usize,
    /// Attention values clamped into `[0, 1]`.
    pub attention_clamped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferOutput {
    pub target_expression: Vec<f64>,
    pub target_shape: Shape,
    pub predicted: Option<DisplacementField>,
    pub texture: Texture,
    pub conditioning: ConditioningStack,
    pub rendered: Image,
    pub coverage: Mask,
    pub distance: Image,
    pub blended: Blended,
    pub metrics: TransferMetrics,
}

/// Deforms the fitted face to `e_tgt`, renders it with the source texture
/// (or the composed generator output) and blends it into the image.
pub fn run_transfer(
    model: &BilinearModel,
    source: &TransferSource,
    e_tgt: &[f64],
    branch: Option<&ShapeBranch>,
    generated: Option<&GeneratedTexture>,
    config: &PipelineConfig,
) -> Result<TransferOutput> {
    config.validate()?;
    check_expression(model, e_tgt, config.fit.expression_bounds)?;
    let mut target = source.record.shape_with(model, e_tgt)?;
    let predicted = match branch {
        Some(b) => {
            let d = predict_deformation(&b.params, &source.record.identity, &source.record.expression, e_tgt, &b.basis)?;
            target = target.displaced(&d.vectors);
            Some(d)
        }
        None => None,
    };
    let (texture, attention_clamped) = match generated {
        Some(g) => {
            let c = attention_compose_with(&g.attention, &g.color, &source.texture.image, config.attention_orientation)?;
            (
                Texture {
                    image: c.image,
                    valid: source.texture.valid.clone(),
                },
                c.clamped,
            )
        }
        None => (source.texture.clone(), 0),
    };
    let conditioning = conditioning_stack(model, &source.neutral, &source.shape, &target, &source.texture, &config.conditioning_config())?;
    let (w, h) = (source.image.width(), source.image.height());
    let rendered = render(model, &target, &texture, &source.pose, w, h, Some(&source.image))?;
    let (distance, _) = vertex_distance_plane(model, &source.shape, &target, &source.pose, w, h)?;
    let blended = blend(&rendered.image, &source.image, &rendered.coverage, &distance, &config.blend)?;
    let max_vertex_displacement = DisplacementField::between(&source.shape, &target).max_length();
    let metrics = TransferMetrics {
        max_vertex_displacement,
        max_predicted_displacement: predicted.as_ref().map_or(0.0, |d| d.max_length()),
        coverage_pixels: rendered.coverage.count(),
        dilated_pixels: blended.dilated.count(),
        attention_clamped,
    };
    Ok(TransferOutput {
        target_expression: e_tgt.to_vec(),
        target_shape: target,
        predicted,
        texture,
        conditioning,
        rendered: rendered.image,
        coverage: rendered.coverage,
        distance,
        blended,
        metrics,
    })
}

#[derive(Debug, Serialize)]
struct TransferReport<'a> {
    target_expression: &'a [f64],
    metrics: &'a TransferMetrics,
    blend: &'a BlendConfig,
}

/// `output.png`, `rendered.png`, `target.obj`, `transfer.json`,
/// `conditioning/`, `texture/`, and the `masks/` bundle (coverage, dilated
/// mask, margin, distance plane, blend weights).
pub fn write_transfer_outputs(dir: &Path, model: &BilinearModel, out: &TransferOutput, config: &PipelineConfig) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| PipelineError::new(ErrorKind::Io, format!("{}: {e}", dir.display())))?;
    io::write_png(&dir.join("output.png"), &out.blended.image)?;
    io::write_png(&dir.join("rendered.png"), &out.rendered)?;
    io::write_obj(&dir.join("target.obj"), model, &out.target_shape)?;
    io::write_conditioning(&dir.join("conditioning"), &out.conditioning)?;
    io::write_texture(&dir.join("texture"), &out.texture)?;
    let mut masks = io::Bundle::new("transfer-masks", serde_json::json!({ "blend": config.blend }));
    for (name, img) in [
        ("coverage", out.coverage.to_image()),
        ("dilated", out.blended.dilated.to_image()),
        ("margin", out.blended.margin.to_image()),
        ("distance", out.distance.clone()),
        ("alpha", out.blended.alpha.clone()),
    ] {
        masks.planes.push(io::Plane::new(name, io::Precision::F32, img));
    }
    io::write_bundle(&dir.join("masks"), &masks)?;
    io::write_json(
        &dir.join("transfer.json"),
        &TransferReport {
            target_expression: &out.target_expression,
            metrics: &out.metrics,
            blend: &config.blend,
        },
    )?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub n_samples: usize,
    pub k: usize,
    pub initial_loss: f64,
    pub epoch_losses: Vec<f64>,
}

/// Trains the shape branch on the synthetic training set for `seed`.
pub fn run_train_shape(model: &BilinearModel, config: &PipelineConfig, seed: u64) -> Result<(TrainedShapeBranch, TrainReport)> {
    config.validate()?;
    let basis = model_basis(model, config.k)?;
    let samples = branch_training_set(model, &basis, &config.benchmark, seed)?;
    let train_cfg = ShapeTrainConfig {
        seed,
        ..config.benchmark.train.clone()
    };
    let trained = train_shape_branch(&samples, &train_cfg)?;
    let report = TrainReport {
        seed,
        n_samples: samples.len(),
        k: config.k,
        initial_loss: trained.initial_loss,
        epoch_losses: trained.epoch_losses.clone(),
    };
    Ok((trained, report))
}

pub fn write_train_outputs(dir: &Path, model: &BilinearModel, trained: &TrainedShapeBranch, report: &TrainReport, config: &PipelineConfig) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| PipelineError::new(ErrorKind::Io, format!("{}: {e}", dir.display())))?;
    io::write_shape_branch(
        &dir.join("shape_branch"),
        &trained.params,
        &model.mesh_hash(),
        Some(trained),
        serde_json::json!({ "seed": report.seed, "train": config.benchmark.train }),
    )?;
    io::write_json(&dir.join("train_report.json"), report)?;
    Ok(())
}

/// The with/without shape-branch comparison.
pub fn run_eval(model: &BilinearModel, config: &PipelineConfig) -> Result<BenchmarkReport> {
    config.validate()?;
    let basis = model_basis(model, config.k)?;
    Ok(benchmark_shape_branch(model, &basis, &config.benchmark)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneTruth {
    pub pose: PoseRecord,
    pub identity: Vec<f64>,
    pub expression: Vec<f64>,
    pub clean_landmarks: Vec<[f64; 2]>,
    pub nonlinear: bool,
}

/// Writes `model.mfit` and `scene_NNN/` directories (image, landmarks,
/// depth, ground truth, texture, mesh).
pub fn run_synth(dir: &Path, config: &PipelineConfig, seed: u64) -> Result<BilinearModel> {
    let spec = SyntheticSpec { seed, ..config.synthetic.clone() };
    let model = make_synthetic_model(&spec)?;
    std::fs::create_dir_all(dir).map_err(|e| PipelineError::new(ErrorKind::Io, format!("{}: {e}", dir.display())))?;
    crate::model::save_model(&model, dir.join("model.mfit")).map_err(|e| PipelineError::new(ErrorKind::Io, e.to_string()))?;
    let field = if config.nonlinear_scenes {
        let basis = model_basis(&model, config.k)?;
        Some(NonlinearDeformation::new(&basis, model.n_identity() + model.n_expression(), spec.nonlinear_amplitude, seed))
    } else {
        None
    };
    for i in 0..config.n_scenes {
        let opts = SceneOptions {
            seed: seed.wrapping_mul(1000).wrapping_add(i as u64),
            render_image: true,
            ..config.scenes.clone()
        };
        let scene = sample_scene(&model, &opts, field.as_ref())?;
        let sd = dir.join(format!("scene_{i:03}"));
        std::fs::create_dir_all(&sd).map_err(|e| PipelineError::new(ErrorKind::Io, format!("{}: {e}", sd.display())))?;
        io::write_png(&sd.join("image.png"), scene.image.as_ref().expect("rendered"))?;
        io::write_json(&sd.join("landmarks.json"), &scene.landmarks)?;
        if let Some(d) = &scene.depth {
            io::write_json(
                &sd.join("depth.json"),
                &DepthInput {
                    frame: DepthFrame::Model,
                    points: d.points.clone(),
                },
            )?;
        }
        io::write_json(
            &sd.join("truth.json"),
            &SceneTruth {
                pose: PoseRecord::from(&scene.pose),
                identity: scene.coeffs.identity.clone(),
                expression: scene.coeffs.expression.clone(),
                clean_landmarks: scene.clean_landmarks.clone(),
                nonlinear: scene.displacement.is_some(),
            },
        )?;
        if let Some(t) = &scene.texture {
            io::write_texture(&sd.join("texture"), t)?;
        }
        io::write_obj(&sd.join("shape.obj"), &model, &scene.shape)?;
    }
    Ok(model)
}

/// Discriminator outputs plus optional reconstruction terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossInput {
    pub outputs: DiscriminatorOutputs,
    #[serde(default)]
    pub l1: Option<f64>,
    #[serde(default)]
    pub perc: Option<f64>,
    #[serde(default)]
    pub weights: LossWeights,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    #[serde(flatten)]
    pub breakdown: LossBreakdown,
    /// Present when an L1 value was supplied.
    pub generator_objective: Option<f64>,
}

pub fn run_losses(input: &LossInput) -> Result<LossReport> {
    let breakdown = loss_breakdown(&input.outputs)?;
    let generator_objective = input
        .l1
        .map(|l1| crate::ganmath::generator_objective(breakdown.gan, l1, input.perc, &input.weights));
    Ok(LossReport {
        breakdown,
        generator_objective,
    })
}
