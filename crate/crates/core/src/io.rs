//! File formats: PNG images, PFM float planes, multi-plane bundles with a
//! JSON manifest, Wavefront OBJ meshes, and serializable pose records.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fitting::CameraPose;
use crate::model::{BilinearModel, Shape};
use crate::raster::{ConditioningStack, Image, Mask, Texture};
use crate::shapenet::{Activation, DenseLayer, MlpParams, Standardization, TrainedShapeBranch};
use crate::spectral::SpectralBasis;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{}: {reason}", path.display())]
    Malformed { path: PathBuf, reason: String },
    #[error("cannot store {0}")]
    Unsupported(String),
}

impl IoError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        IoError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    fn malformed(path: &Path, reason: impl Into<String>) -> Self {
        IoError::Malformed {
            path: path.to_path_buf(),
            reason: reason.into(),
        }
    }

    /// The error came from a file that does not exist.
    pub fn is_not_found(&self) -> bool {
        match self {
            IoError::Io { source, .. } => source.kind() == std::io::ErrorKind::NotFound,
            IoError::Image {
                source: image::ImageError::IoError(e),
                ..
            } => e.kind() == std::io::ErrorKind::NotFound,
            _ => false,
        }
    }
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>, IoError> {
    fs::read(path).map_err(|e| IoError::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    fs::write(path, bytes).map_err(|e| IoError::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|source| IoError::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|source| IoError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    bytes.push(b'\n');
    write_bytes(path, &bytes)
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes a 1-, 3- or 4-channel image with values in `[0, 1]` as 8-bit PNG.
pub fn encode_png(img: &Image) -> Result<Vec<u8>, IoError> {
    use image::{ExtendedColorType, ImageEncoder};
    let color = match img.channels() {
        1 => ExtendedColorType::L8,
        3 => ExtendedColorType::Rgb8,
        4 => ExtendedColorType::Rgba8,
        c => return Err(IoError::Unsupported(format!("a {c}-channel image as PNG"))),
    };
    let bytes: Vec<u8> = img.data().iter().map(|&v| to_u8(v)).collect();
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out)
        .write_image(&bytes, img.width() as u32, img.height() as u32, color)
        .map_err(|source| IoError::Image {
            path: PathBuf::from("<memory>"),
            source,
        })?;
    Ok(out)
}

/// Decodes any PNG to a 3-channel image in `[0, 1]`; alpha is dropped.
pub fn decode_png(bytes: &[u8]) -> Result<Image, IoError> {
    decode_png_at(bytes, Path::new("<memory>"))
}

fn decode_png_at(bytes: &[u8], path: &Path) -> Result<Image, IoError> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|source| IoError::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
    Image::from_vec(w as usize, h as usize, 3, data).map_err(|e| IoError::malformed(path, e.to_string()))
}

pub fn read_png(path: &Path) -> Result<Image, IoError> {
    decode_png_at(&read_bytes(path)?, path)
}

pub fn write_png(path: &Path, img: &Image) -> Result<(), IoError> {
    write_bytes(path, &encode_png(img)?)
}

fn to_f32(v: f64) -> Result<f32, IoError> {
    let f = v as f32;
    if !f.is_finite() {
        return Err(IoError::Unsupported(format!("value {v} in a 32-bit float plane")));
    }
    Ok(f)
}

/// Little-endian PFM, rows stored bottom to top. 1 or 3 channels.
pub fn encode_pfm(img: &Image) -> Result<Vec<u8>, IoError> {
    let tag = match img.channels() {
        1 => "Pf",
        3 => "PF",
        c => return Err(IoError::Unsupported(format!("a {c}-channel image as PFM"))),
    };
    let (w, h, c) = (img.width(), img.height(), img.channels());
    let mut out = format!("{tag}\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(w * h * c * 4);
    for y in (0..h).rev() {
        for &v in &img.data()[y * w * c..(y + 1) * w * c] {
            out.extend_from_slice(&to_f32(v)?.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_pfm(bytes: &[u8], path: &Path) -> Result<Image, IoError> {
    let bad = |r: &str| IoError::malformed(path, format!("PFM: {r}"));
    let mut fields = Vec::new();
    let mut pos = 0;
    // Header tokens: tag, width, height, scale.
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-text header"))?);
    }
    // Exactly one whitespace byte separates the header from the data.
    pos += 1;
    let c = match fields[0] {
        "Pf" => 1,
        "PF" => 3,
        _ => return Err(bad("unknown tag")),
    };
    let w: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    let scale: f64 = fields[3].parse().map_err(|_| bad("bad scale"))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(bad("bad scale"));
    }
    let little = scale < 0.0;
    let n = w.checked_mul(h).and_then(|n| n.checked_mul(c)).ok_or_else(|| bad("dimensions overflow"))?;
    let payload = bytes.get(pos..).unwrap_or(&[]);
    if payload.len() != n * 4 {
        return Err(bad(&format!("expected {} data bytes, found {}", n * 4, payload.len())));
    }
    let mut data = vec![0.0; n];
    for (k, chunk) in payload.chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (row, rest) = (k / (w * c), k % (w * c));
        data[(h - 1 - row) * w * c + rest] = v as f64;
    }
    Image::from_vec(w, h, c, data).map_err(|e| bad(&e.to_string()))
}

pub fn read_pfm(path: &Path) -> Result<Image, IoError> {
    decode_pfm(&read_bytes(path)?, path)
}

pub fn write_pfm(path: &Path, img: &Image) -> Result<(), IoError> {
    write_bytes(path, &encode_pfm(img)?)
}

/// How a bundle plane is stored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Precision {
    /// One 32-bit float per value.
    F32,
    /// Two 32-bit planes `hi = f32(v)`, `lo = f32(v - hi)`; `hi + lo`
    /// recovers `v` to about 48 significant bits.
    F64Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub name: String,
    pub precision: Precision,
    pub image: Image,
}

impl Plane {
    pub fn new(name: impl Into<String>, precision: Precision, image: Image) -> Self {
        Self {
            name: name.into(),
            precision,
            image,
        }
    }

    /// A row-major `rows x cols` matrix as a 1-channel plane.
    pub fn matrix(name: impl Into<String>, rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, IoError> {
        let image = Image::from_vec(cols, rows, 1, data).map_err(|e| IoError::Unsupported(e.to_string()))?;
        Ok(Self::new(name, Precision::F64Split, image))
    }
}

/// Named float planes plus free-form JSON metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub kind: String,
    pub metadata: serde_json::Value,
    pub planes: Vec<Plane>,
}

pub const BUNDLE_FORMAT: &str = "morphfit-bundle";
pub const BUNDLE_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    kind: String,
    metadata: serde_json::Value,
    planes: Vec<ManifestPlane>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestPlane {
    name: String,
    width: usize,
    height: usize,
    channels: usize,
    precision: Precision,
    /// Channel groups in order; each holds the `hi` file and, when split,
    /// the `lo` file.
    files: Vec<Vec<String>>,
}

impl Bundle {
    pub fn new(kind: impl Into<String>, metadata: serde_json::Value) -> Self {
        Self {
            kind: kind.into(),
            metadata,
            planes: Vec::new(),
        }
    }

    pub fn plane(&self, name: &str) -> Option<&Plane> {
        self.planes.iter().find(|p| p.name == name)
    }

    fn require(&self, name: &str, dir: &Path) -> Result<&Plane, IoError> {
        self.plane(name).ok_or_else(|| IoError::malformed(dir, format!("bundle has no plane {name:?}")))
    }
}

fn valid_plane_name(name: &str) -> bool {
    !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

/// Writes `manifest.json` and one PFM per channel group into `dir`.
pub fn write_bundle(dir: &Path, bundle: &Bundle) -> Result<(), IoError> {
    fs::create_dir_all(dir).map_err(|e| IoError::io(dir, e))?;
    let mut planes = Vec::with_capacity(bundle.planes.len());
    for plane in &bundle.planes {
        if !valid_plane_name(&plane.name) {
            return Err(IoError::Unsupported(format!("plane name {:?}", plane.name)));
        }
        let img = &plane.image;
        let groups: Vec<(usize, usize)> = if img.channels() == 3 {
            vec![(0, 3)]
        } else {
            (0..img.channels()).map(|c| (c, 1)).collect()
        };
        let mut files = Vec::new();
        for &(start, count) in &groups {
            let part = img.channels_range(start, count);
            let stem = if groups.len() == 1 {
                plane.name.clone()
            } else {
                format!("{}.c{start}", plane.name)
            };
            let mut names = vec![format!("{stem}.pfm")];
            let hi_data: Vec<f64> = part.data().iter().map(|&v| to_f32(v).map(|f| f as f64)).collect::<Result<_, _>>()?;
            let hi = Image::from_vec(part.width(), part.height(), count, hi_data).expect("same size");
            write_pfm(&dir.join(&names[0]), &hi)?;
            if plane.precision == Precision::F64Split {
                let lo_data = part.data().iter().zip(hi.data()).map(|(v, h)| v - h).collect();
                let lo = Image::from_vec(part.width(), part.height(), count, lo_data).expect("same size");
                names.push(format!("{stem}.lo.pfm"));
                write_pfm(&dir.join(&names[1]), &lo)?;
            }
            files.push(names);
        }
        planes.push(ManifestPlane {
            name: plane.name.clone(),
            width: img.width(),
            height: img.height(),
            channels: img.channels(),
            precision: plane.precision,
            files,
        });
    }
    let manifest = Manifest {
        format: BUNDLE_FORMAT.into(),
        version: BUNDLE_VERSION,
        kind: bundle.kind.clone(),
        metadata: bundle.metadata.clone(),
        planes,
    };
    write_json(&dir.join("manifest.json"), &manifest)
}

pub fn read_bundle(dir: &Path) -> Result<Bundle, IoError> {
    let manifest_path = dir.join("manifest.json");
    let manifest: Manifest = read_json(&manifest_path)?;
    let bad = |r: String| IoError::malformed(&manifest_path, r);
    if manifest.format != BUNDLE_FORMAT || manifest.version != BUNDLE_VERSION {
        return Err(bad(format!("unsupported bundle format {} v{}", manifest.format, manifest.version)));
    }
    let mut planes = Vec::new();
    for mp in manifest.planes {
        if !valid_plane_name(&mp.name) {
            return Err(bad(format!("invalid plane name {:?}", mp.name)));
        }
        let per_file = if mp.channels == 3 { 3 } else { 1 };
        let expected_groups = if mp.channels == 3 { 1 } else { mp.channels };
        let expected_files = if mp.precision == Precision::F64Split { 2 } else { 1 };
        if mp.files.len() != expected_groups || mp.files.iter().any(|f| f.len() != expected_files) {
            return Err(bad(format!("plane {:?} lists the wrong number of files", mp.name)));
        }
        let mut parts = Vec::new();
        for names in &mp.files {
            let mut acc: Option<Image> = None;
            for name in names {
                if name.contains('/') || name.contains('\\') || name.starts_with('.') {
                    return Err(bad(format!("file name {name:?} escapes the bundle")));
                }
                let img = read_pfm(&dir.join(name))?;
                if (img.width(), img.height(), img.channels()) != (mp.width, mp.height, per_file) {
                    return Err(IoError::malformed(&dir.join(name), "dimensions disagree with the manifest"));
                }
                acc = Some(match acc {
                    None => img,
                    Some(mut hi) => {
                        hi.data_mut().iter_mut().zip(img.data()).for_each(|(h, l)| *h += l);
                        hi
                    }
                });
            }
            parts.push(acc.expect("at least one file"));
        }
        let refs: Vec<&Image> = parts.iter().collect();
        let image = if refs.len() == 1 {
            parts[0].clone()
        } else {
            Image::stack(&refs).map_err(|e| bad(e.to_string()))?
        };
        planes.push(Plane {
            name: mp.name,
            precision: mp.precision,
            image,
        });
    }
    Ok(Bundle {
        kind: manifest.kind,
        metadata: manifest.metadata,
        planes,
    })
}

fn meta_field<T: serde::de::DeserializeOwned>(meta: &serde_json::Value, key: &str, dir: &Path) -> Result<T, IoError> {
    let v = meta.get(key).ok_or_else(|| IoError::malformed(dir, format!("metadata lacks {key:?}")))?;
    serde_json::from_value(v.clone()).map_err(|e| IoError::malformed(dir, format!("metadata {key:?}: {e}")))
}

fn expect_kind(bundle: &Bundle, kind: &str, dir: &Path) -> Result<(), IoError> {
    if bundle.kind != kind {
        return Err(IoError::malformed(dir, format!("expected a {kind} bundle, found {}", bundle.kind)));
    }
    Ok(())
}

pub const CONDITIONING_KIND: &str = "conditioning";
pub const BASIS_KIND: &str = "spectral-basis";
pub const SHAPE_BRANCH_KIND: &str = "shape-branch";
pub const TEXTURE_KIND: &str = "texture";

/// One plane per conditioning channel plus the UV coverage.
pub fn conditioning_bundle(stack: &ConditioningStack) -> Bundle {
    let mut b = Bundle::new(
        CONDITIONING_KIND,
        serde_json::json!({
            "resolution": stack.planes.width(),
            "seed": stack.seed,
            "position_scale": stack.position_scale,
            "channel_names": stack.channel_names,
        }),
    );
    for (c, name) in stack.channel_names.iter().enumerate() {
        b.planes.push(Plane::new(name.clone(), Precision::F32, stack.planes.channel(c)));
    }
    b.planes.push(Plane::new("coverage", Precision::F32, stack.coverage.to_image()));
    b
}

pub fn write_conditioning(dir: &Path, stack: &ConditioningStack) -> Result<(), IoError> {
    write_bundle(dir, &conditioning_bundle(stack))
}

fn image_to_mask(img: &Image) -> Mask {
    Mask {
        width: img.width(),
        height: img.height(),
        data: img.data().iter().map(|&v| v > 0.5).collect(),
    }
}

pub fn read_conditioning(dir: &Path) -> Result<ConditioningStack, IoError> {
    let b = read_bundle(dir)?;
    expect_kind(&b, CONDITIONING_KIND, dir)?;
    let names: Vec<String> = meta_field(&b.metadata, "channel_names", dir)?;
    let planes: Vec<&Image> = names.iter().map(|n| b.require(n, dir).map(|p| &p.image)).collect::<Result<_, _>>()?;
    let planes = Image::stack(&planes).map_err(|e| IoError::malformed(dir, e.to_string()))?;
    Ok(ConditioningStack {
        planes,
        coverage: image_to_mask(&b.require("coverage", dir)?.image),
        channel_names: names,
        seed: meta_field(&b.metadata, "seed", dir)?,
        position_scale: meta_field(&b.metadata, "position_scale", dir)?,
    })
}

pub fn write_texture(dir: &Path, texture: &Texture) -> Result<(), IoError> {
    let mut b = Bundle::new(TEXTURE_KIND, serde_json::json!({ "resolution": texture.image.width() }));
    b.planes.push(Plane::new("texture", Precision::F32, texture.image.clone()));
    b.planes.push(Plane::new("valid", Precision::F32, texture.valid.to_image()));
    write_bundle(dir, &b)
}

pub fn read_texture(dir: &Path) -> Result<Texture, IoError> {
    let b = read_bundle(dir)?;
    expect_kind(&b, TEXTURE_KIND, dir)?;
    Ok(Texture {
        image: b.require("texture", dir)?.image.clone(),
        valid: image_to_mask(&b.require("valid", dir)?.image),
    })
}

pub fn write_basis(dir: &Path, basis: &SpectralBasis) -> Result<(), IoError> {
    let mut b = Bundle::new(
        BASIS_KIND,
        serde_json::json!({
            "n_vertices": basis.n_vertices(),
            "k": basis.k(),
            "mesh_hash": basis.mesh_hash(),
        }),
    );
    b.planes.push(Plane::matrix("eigenvalues", 1, basis.k(), basis.eigenvalues().to_vec())?);
    b.planes.push(Plane::matrix("vectors", basis.k(), basis.n_vertices(), basis.vectors_flat().to_vec())?);
    write_bundle(dir, &b)
}

pub fn read_basis(dir: &Path) -> Result<SpectralBasis, IoError> {
    let b = read_bundle(dir)?;
    expect_kind(&b, BASIS_KIND, dir)?;
    let n: usize = meta_field(&b.metadata, "n_vertices", dir)?;
    let hash: String = meta_field(&b.metadata, "mesh_hash", dir)?;
    let values = b.require("eigenvalues", dir)?.image.data().to_vec();
    let vectors = b.require("vectors", dir)?.image.data().to_vec();
    SpectralBasis::from_parts(values, vectors, n, hash).map_err(|e| IoError::malformed(dir, e.to_string()))
}

/// Metadata stored alongside shape-branch weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeBranchMeta {
    pub dims: Vec<usize>,
    pub activations: Vec<Activation>,
    pub input_norm: Option<Standardization>,
    pub output_norm: Option<Standardization>,
    /// Mesh the spectral output coefficients refer to.
    pub mesh_hash: String,
    pub initial_loss: Option<f64>,
    #[serde(default)]
    pub epoch_losses: Vec<f64>,
    /// Anything else the writer wants to keep (config, seeds).
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub fn write_shape_branch(
    dir: &Path,
    params: &MlpParams,
    mesh_hash: &str,
    history: Option<&TrainedShapeBranch>,
    extra: serde_json::Value,
) -> Result<(), IoError> {
    let meta = ShapeBranchMeta {
        dims: params.dims(),
        activations: params.layers().iter().map(|l| l.activation).collect(),
        input_norm: params.input_norm.clone(),
        output_norm: params.output_norm.clone(),
        mesh_hash: mesh_hash.to_string(),
        initial_loss: history.map(|h| h.initial_loss),
        epoch_losses: history.map(|h| h.epoch_losses.clone()).unwrap_or_default(),
        extra,
    };
    let mut b = Bundle::new(SHAPE_BRANCH_KIND, serde_json::to_value(&meta).expect("plain data"));
    for (i, l) in params.layers().iter().enumerate() {
        // nalgebra is column-major; planes are row-major.
        let w: Vec<f64> = l.weights.transpose().iter().copied().collect();
        b.planes.push(Plane::matrix(format!("w{i}"), l.n_out(), l.n_in(), w)?);
        b.planes.push(Plane::matrix(format!("b{i}"), 1, l.n_out(), l.bias.iter().copied().collect())?);
    }
    write_bundle(dir, &b)
}

pub fn read_shape_branch(dir: &Path) -> Result<(MlpParams, ShapeBranchMeta), IoError> {
    use nalgebra::{DMatrix, DVector};
    let b = read_bundle(dir)?;
    expect_kind(&b, SHAPE_BRANCH_KIND, dir)?;
    let meta: ShapeBranchMeta = serde_json::from_value(b.metadata.clone()).map_err(|e| IoError::malformed(dir, e.to_string()))?;
    if meta.dims.len() != meta.activations.len() + 1 {
        return Err(IoError::malformed(dir, "dims and activations disagree"));
    }
    let mut layers = Vec::new();
    for (i, &act) in meta.activations.iter().enumerate() {
        let (n_in, n_out) = (meta.dims[i], meta.dims[i + 1]);
        let w = &b.require(&format!("w{i}"), dir)?.image;
        let bias = &b.require(&format!("b{i}"), dir)?.image;
        if (w.width(), w.height()) != (n_in, n_out) || bias.data().len() != n_out {
            return Err(IoError::malformed(dir, format!("layer {i} planes disagree with dims")));
        }
        layers.push(DenseLayer {
            weights: DMatrix::from_row_slice(n_out, n_in, w.data()),
            bias: DVector::from_column_slice(bias.data()),
            activation: act,
        });
    }
    let mut params = MlpParams::new(layers).map_err(|e| IoError::malformed(dir, e.to_string()))?;
    params.input_norm = meta.input_norm.clone();
    params.output_norm = meta.output_norm.clone();
    Ok((params, meta))
}

/// Triangle mesh as read from OBJ.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjMesh {
    pub vertices: Vec<[f64; 3]>,
    pub uv: Vec<[f64; 2]>,
    pub triangles: Vec<[u32; 3]>,
}

/// OBJ with positions, the model's UVs and triangles (1-based indices).
pub fn encode_obj(model: &BilinearModel, shape: &Shape) -> String {
    let mut s = String::with_capacity(shape.n_vertices() * 64);
    use std::fmt::Write as _;
    for v in shape.vertices() {
        let _ = writeln!(s, "v {} {} {}", v[0], v[1], v[2]);
    }
    for t in model.uv() {
        let _ = writeln!(s, "vt {} {}", t[0], t[1]);
    }
    for f in model.triangles() {
        let [a, b, c] = f.map(|i| i + 1);
        let _ = writeln!(s, "f {a}/{a} {b}/{b} {c}/{c}");
    }
    s
}

pub fn write_obj(path: &Path, model: &BilinearModel, shape: &Shape) -> Result<(), IoError> {
    let mut f = fs::File::create(path).map_err(|e| IoError::io(path, e))?;
    f.write_all(encode_obj(model, shape).as_bytes()).map_err(|e| IoError::io(path, e))
}

pub fn parse_obj(text: &str, path: &Path) -> Result<ObjMesh, IoError> {
    let mut mesh = ObjMesh {
        vertices: Vec::new(),
        uv: Vec::new(),
        triangles: Vec::new(),
    };
    for (ln, line) in text.lines().enumerate() {
        let bad = |r: &str| IoError::malformed(path, format!("line {}: {r}", ln + 1));
        let mut it = line.split_whitespace();
        let floats = |it: std::str::SplitWhitespace, n: usize| -> Result<Vec<f64>, IoError> {
            let v: Vec<f64> = it.map(|t| t.parse::<f64>()).collect::<Result<_, _>>().map_err(|_| bad("bad number"))?;
            if v.len() < n {
                return Err(bad("too few values"));
            }
            Ok(v)
        };
        match it.next() {
            Some("v") => {
                let v = floats(it, 3)?;
                mesh.vertices.push([v[0], v[1], v[2]]);
            }
            Some("vt") => {
                let v = floats(it, 2)?;
                mesh.uv.push([v[0], v[1]]);
            }
            Some("f") => {
                let idx: Vec<u32> = it
                    .map(|t| t.split('/').next().unwrap_or("").parse::<u32>())
                    .collect::<Result<_, _>>()
                    .map_err(|_| bad("bad face index"))?;
                if idx.len() != 3 || idx.contains(&0) {
                    return Err(bad("only triangles with positive indices are supported"));
                }
                mesh.triangles.push([idx[0] - 1, idx[1] - 1, idx[2] - 1]);
            }
            _ => {}
        }
    }
    let n = mesh.vertices.len() as u32;
    if mesh.triangles.iter().flatten().any(|&i| i >= n) {
        return Err(IoError::malformed(path, "face index out of range"));
    }
    Ok(mesh)
}

pub fn read_obj(path: &Path) -> Result<ObjMesh, IoError> {
    let bytes = read_bytes(path)?;
    let text = String::from_utf8(bytes).map_err(|_| IoError::malformed(path, "not UTF-8"))?;
    parse_obj(&text, path)
}

/// Serializable weak-perspective camera.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    /// Row-major rotation.
    pub rotation: [f64; 9],
    pub scale: f64,
    pub translation: [f64; 2],
}

impl From<&CameraPose> for PoseRecord {
    fn from(p: &CameraPose) -> Self {
        Self {
            rotation: p.rotation_row_major(),
            scale: p.scale,
            translation: [p.translation.x, p.translation.y],
        }
    }
}

impl PoseRecord {
    pub fn to_pose(&self) -> Result<CameraPose, crate::fitting::FitError> {
        CameraPose::from_row_major(self.rotation, self.scale, self.translation)
    }
}
