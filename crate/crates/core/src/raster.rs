//! Software rasterization in UV space and image space.
//!
//! Pixel `(x, y)` has its center at `(x + 0.5, y + 0.5)`. UV coordinates map
//! to texel space as `(u * res, v * res)` with `v` pointing down. Coverage is
//! decided at pixel centers with a top-left rule, so pixels on a shared edge
//! belong to exactly one triangle.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fitting::CameraPose;
use crate::model::{BilinearModel, ModelError, SemanticLabel, Shape};

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("resolution must be at least 1")]
    InvalidResolution,
    #[error("size mismatch for {what}: expected {expected}, got {got}")]
    Sizing {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("UV layout is not an embedding; overlapping triangle pairs: {pairs:?}")]
    OverlappingUv { pairs: Vec<(usize, usize)> },
    #[error("neutral shape has zero one-ring area at vertex {vertex}")]
    DegenerateNeutralArea { vertex: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Row-major float image with interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn filled(width: usize, height: usize, value: &[f64]) -> Self {
        let mut data = Vec::with_capacity(width * height * value.len());
        for _ in 0..width * height {
            data.extend_from_slice(value);
        }
        Self {
            width,
            height,
            channels: value.len(),
            data,
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self, RasterError> {
        if data.len() != width * height * channels {
            return Err(RasterError::Sizing {
                what: "image data",
                expected: width * height * channels,
                got: data.len(),
            });
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(RasterError::NonFinite("image data"));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// One channel as a single-channel image.
    pub fn channel(&self, c: usize) -> Image {
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self.data.iter().skip(c).step_by(self.channels).copied().collect(),
        }
    }

    /// Channels `range` as a new image.
    pub fn channels_range(&self, start: usize, count: usize) -> Image {
        let mut data = Vec::with_capacity(self.width * self.height * count);
        for px in self.data.chunks_exact(self.channels) {
            data.extend_from_slice(&px[start..start + count]);
        }
        Image {
            width: self.width,
            height: self.height,
            channels: count,
            data,
        }
    }

    /// Stacks images of equal size channel-wise.
    pub fn stack(planes: &[&Image]) -> Result<Image, RasterError> {
        let first = planes.first().ok_or(RasterError::Sizing {
            what: "planes",
            expected: 1,
            got: 0,
        })?;
        let (w, h) = (first.width, first.height);
        for p in planes {
            if p.width != w || p.height != h {
                return Err(RasterError::Sizing {
                    what: "plane size",
                    expected: w * h,
                    got: p.width * p.height,
                });
            }
        }
        let channels = planes.iter().map(|p| p.channels).sum();
        let mut data = Vec::with_capacity(w * h * channels);
        for i in 0..w * h {
            for p in planes {
                data.extend_from_slice(&p.data[i * p.channels..(i + 1) * p.channels]);
            }
        }
        Ok(Image {
            width: w,
            height: h,
            channels,
            data,
        })
    }

    /// Bilinear sample at continuous pixel coordinates (centers at +0.5),
    /// clamping at the borders.
    pub fn sample_bilinear(&self, x: f64, y: f64, out: &mut [f64]) {
        let fx = x - 0.5;
        let fy = y - 0.5;
        let x0 = fx.floor();
        let y0 = fy.floor();
        let tx = fx - x0;
        let ty = fy - y0;
        let clamp_x = |v: f64| v.clamp(0.0, (self.width - 1) as f64) as usize;
        let clamp_y = |v: f64| v.clamp(0.0, (self.height - 1) as f64) as usize;
        let (xa, xb) = (clamp_x(x0), clamp_x(x0 + 1.0));
        let (ya, yb) = (clamp_y(y0), clamp_y(y0 + 1.0));
        for (c, o) in out.iter_mut().enumerate().take(self.channels) {
            let top = self.get(xa, ya, c) * (1.0 - tx) + self.get(xb, ya, c) * tx;
            let bottom = self.get(xa, yb, c) * (1.0 - tx) + self.get(xb, yb, c) * tx;
            *o = top * (1.0 - ty) + bottom * ty;
        }
    }
}

/// Binary per-pixel mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.data[y * self.width + x] = value;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn and(&self, other: &Mask) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            data: self.data.iter().zip(&other.data).map(|(a, b)| *a && *b).collect(),
        }
    }

    pub fn to_image(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }
}

/// An image in the model's UV layout with its validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Texture {
    pub image: Image,
    pub valid: Mask,
}

impl Texture {
    pub fn resolution(&self) -> usize {
        self.image.width
    }

    /// Bilinear sample at UV coordinates using valid texels only. Returns
    /// `false` when no valid texel contributes.
    pub fn sample_uv(&self, u: f64, v: f64, out: &mut [f64]) -> bool {
        let res = self.image.width;
        let fx = u * res as f64 - 0.5;
        let fy = v * self.image.height as f64 - 0.5;
        let x0 = fx.floor();
        let y0 = fy.floor();
        let tx = fx - x0;
        let ty = fy - y0;
        let cx = |v: f64| v.clamp(0.0, (self.image.width - 1) as f64) as usize;
        let cy = |v: f64| v.clamp(0.0, (self.image.height - 1) as f64) as usize;
        let taps = [
            (cx(x0), cy(y0), (1.0 - tx) * (1.0 - ty)),
            (cx(x0 + 1.0), cy(y0), tx * (1.0 - ty)),
            (cx(x0), cy(y0 + 1.0), (1.0 - tx) * ty),
            (cx(x0 + 1.0), cy(y0 + 1.0), tx * ty),
        ];
        let channels = self.image.channels;
        out[..channels].iter_mut().for_each(|o| *o = 0.0);
        let mut total = 0.0;
        for (x, y, w) in taps {
            if w > 0.0 && self.valid.get(x, y) {
                total += w;
                for (c, o) in out.iter_mut().enumerate().take(channels) {
                    *o += w * self.image.get(x, y, c);
                }
            }
        }
        if total <= 1e-12 {
            return false;
        }
        out[..channels].iter_mut().for_each(|o| *o /= total);
        true
    }
}

#[inline]
fn edge_raw(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

/// Edge function evaluated from a canonical endpoint order, so the two
/// triangles sharing an edge see exactly negated values.
#[inline]
pub(crate) fn edge(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    if a[0] < b[0] || (a[0] == b[0] && a[1] <= b[1]) {
        edge_raw(a, b, p)
    } else {
        -edge_raw(b, a, p)
    }
}

/// Pixels exactly on edge `a -> b` belong to the triangle iff the edge is
/// top-left in this orientation.
#[inline]
fn owns_tie(a: [f64; 2], b: [f64; 2]) -> bool {
    let dx = b[0] - a[0];
    let dy = b[1] - a[1];
    dy < 0.0 || (dy == 0.0 && dx > 0.0)
}

#[inline]
fn inside(w: f64, a: [f64; 2], b: [f64; 2]) -> bool {
    w > 0.0 || (w == 0.0 && owns_tie(a, b))
}

/// Signed doubled area in pixel coordinates (y down).
#[inline]
pub fn signed_area2(v: &[[f64; 2]; 3]) -> f64 {
    edge(v[0], v[1], v[2])
}

/// Calls `emit(x, y, barycentric)` for every pixel center covered by the
/// triangle. Degenerate triangles cover nothing.
pub fn rasterize_triangle(v: [[f64; 2]; 3], width: usize, height: usize, mut emit: impl FnMut(usize, usize, [f64; 3])) {
    if width == 0 || height == 0 || v.iter().flatten().any(|c| !c.is_finite()) {
        return;
    }
    let area = signed_area2(&v);
    if area == 0.0 {
        return;
    }
    // Reorder to positive orientation, remembering where each corner went.
    let (order, a, b, c) = if area > 0.0 {
        ([0, 1, 2], v[0], v[1], v[2])
    } else {
        ([0, 2, 1], v[0], v[2], v[1])
    };
    let min_x = a[0].min(b[0]).min(c[0]);
    let max_x = a[0].max(b[0]).max(c[0]);
    let min_y = a[1].min(b[1]).min(c[1]);
    let max_y = a[1].max(b[1]).max(c[1]);
    let x_start = (min_x - 0.5).ceil().max(0.0);
    let x_end = (max_x - 0.5).floor().min(width as f64 - 1.0);
    let y_start = (min_y - 0.5).ceil().max(0.0);
    let y_end = (max_y - 0.5).floor().min(height as f64 - 1.0);
    if x_start > x_end || y_start > y_end {
        return;
    }
    for y in y_start as usize..=y_end as usize {
        let py = y as f64 + 0.5;
        for x in x_start as usize..=x_end as usize {
            let p = [x as f64 + 0.5, py];
            let w0 = edge(b, c, p);
            let w1 = edge(c, a, p);
            let w2 = edge(a, b, p);
            if inside(w0, b, c) && inside(w1, c, a) && inside(w2, a, b) {
                let sum = w0 + w1 + w2;
                let local = [w0 / sum, w1 / sum, w2 / sum];
                let mut bary = [0.0; 3];
                for k in 0..3 {
                    bary[order[k]] = local[k];
                }
                emit(x, y, bary);
            }
        }
    }
}

const NO_OWNER: u32 = u32::MAX;

/// Pixel ownership and barycentrics of the UV triangulation at one resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct UvLayout {
    resolution: usize,
    owner: Vec<u32>,
    bary: Vec<[f64; 3]>,
    triangles: Vec<[u32; 3]>,
}

impl UvLayout {
    pub fn new(model: &BilinearModel, resolution: usize) -> Result<Self, RasterError> {
        Self::from_parts(model.uv(), model.triangles(), resolution)
    }

    pub fn from_parts(uv: &[[f64; 2]], triangles: &[[u32; 3]], resolution: usize) -> Result<Self, RasterError> {
        if resolution == 0 {
            return Err(RasterError::InvalidResolution);
        }
        let res = resolution as f64;
        let mut owner = vec![NO_OWNER; resolution * resolution];
        let mut bary = vec![[0.0; 3]; resolution * resolution];
        let mut overlaps = BTreeSet::new();
        for (t, tri) in triangles.iter().enumerate() {
            let corners = tri.map(|v| {
                let p = uv[v as usize];
                [p[0] * res, p[1] * res]
            });
            rasterize_triangle(corners, resolution, resolution, |x, y, b| {
                let i = y * resolution + x;
                if owner[i] == NO_OWNER {
                    owner[i] = t as u32;
                    bary[i] = b;
                } else {
                    overlaps.insert((owner[i] as usize, t));
                }
            });
        }
        if !overlaps.is_empty() {
            return Err(RasterError::OverlappingUv {
                pairs: overlaps.into_iter().collect(),
            });
        }
        Ok(Self {
            resolution,
            owner,
            bary,
            triangles: triangles.to_vec(),
        })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    /// Triangle owning pixel `i` (row-major), if any.
    #[inline]
    pub fn owner(&self, i: usize) -> Option<usize> {
        match self.owner[i] {
            NO_OWNER => None,
            t => Some(t as usize),
        }
    }

    #[inline]
    pub fn barycentric(&self, i: usize) -> [f64; 3] {
        self.bary[i]
    }

    pub fn coverage(&self) -> Mask {
        Mask {
            width: self.resolution,
            height: self.resolution,
            data: self.owner.iter().map(|&o| o != NO_OWNER).collect(),
        }
    }

    /// Barycentric interpolation of per-vertex values (`channels` per
    /// vertex) over covered pixels; uncovered pixels are 0.
    pub fn interpolate(&self, values: &[f64], channels: usize) -> Image {
        let res = self.resolution;
        let mut img = Image::new(res, res, channels);
        for i in 0..res * res {
            let Some(t) = self.owner(i) else { continue };
            let tri = self.triangles[t];
            let b = self.bary[i];
            let out = &mut img.data[i * channels..(i + 1) * channels];
            for k in 0..3 {
                let v = tri[k] as usize;
                for c in 0..channels {
                    out[c] += b[k] * values[v * channels + c];
                }
            }
        }
        img
    }

    /// Model-space surface point under each covered pixel.
    fn surface_point(&self, shape: &Shape, i: usize) -> Option<(usize, [f64; 3])> {
        let t = self.owner(i)?;
        let tri = self.triangles[t];
        let b = self.bary[i];
        let mut x = [0.0; 3];
        for k in 0..3 {
            let p = shape.vertex(tri[k] as usize);
            for c in 0..3 {
                x[c] += b[k] * p[c];
            }
        }
        Some((t, x))
    }
}

/// Per-vertex attributes interpolated over the UV layout.
pub fn rasterize_uv(model: &BilinearModel, attributes: &[f64], channels: usize, resolution: usize) -> Result<(Image, Mask), RasterError> {
    let expected = model.n_vertices() * channels;
    if attributes.len() != expected {
        return Err(RasterError::Sizing {
            what: "vertex attributes",
            expected,
            got: attributes.len(),
        });
    }
    let layout = UvLayout::new(model, resolution)?;
    Ok((layout.interpolate(attributes, channels), layout.coverage()))
}

/// Z-buffered image-space rasterization of the front-facing triangles.
#[derive(Debug, Clone, PartialEq)]
pub struct ScreenRaster {
    pub width: usize,
    pub height: usize,
    /// Camera-space depth; `+inf` where nothing is drawn.
    pub depth: Vec<f64>,
    owner: Vec<u32>,
    bary: Vec<[f64; 3]>,
    projected: Vec<[f64; 2]>,
    vertex_depth: Vec<f64>,
    triangles: Vec<[u32; 3]>,
}

impl ScreenRaster {
    pub fn new(model: &BilinearModel, shape: &Shape, pose: &CameraPose, width: usize, height: usize) -> Result<Self, RasterError> {
        model.check_shape(shape)?;
        if !shape.is_finite() {
            return Err(RasterError::NonFinite("shape"));
        }
        let projected: Vec<[f64; 2]> = shape.vertices().map(|x| pose.project_point(x)).collect();
        let vertex_depth: Vec<f64> = shape.vertices().map(|x| pose.depth(x)).collect();
        let mut depth = vec![f64::INFINITY; width * height];
        let mut owner = vec![NO_OWNER; width * height];
        let mut bary = vec![[0.0; 3]; width * height];
        for (t, tri) in model.triangles().iter().enumerate() {
            let corners = tri.map(|v| projected[v as usize]);
            if !front_facing(&corners) {
                continue;
            }
            let z = tri.map(|v| vertex_depth[v as usize]);
            rasterize_triangle(corners, width, height, |x, y, b| {
                let i = y * width + x;
                let d = b[0] * z[0] + b[1] * z[1] + b[2] * z[2];
                if d < depth[i] {
                    depth[i] = d;
                    owner[i] = t as u32;
                    bary[i] = b;
                }
            });
        }
        Ok(Self {
            width,
            height,
            depth,
            owner,
            bary,
            projected,
            vertex_depth,
            triangles: model.triangles().to_vec(),
        })
    }

    #[inline]
    pub fn owner(&self, i: usize) -> Option<usize> {
        match self.owner[i] {
            NO_OWNER => None,
            t => Some(t as usize),
        }
    }

    pub fn coverage(&self) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            data: self.owner.iter().map(|&o| o != NO_OWNER).collect(),
        }
    }

    /// Interpolates per-vertex values over covered pixels.
    pub fn interpolate(&self, values: &[f64], channels: usize) -> Image {
        let mut img = Image::new(self.width, self.height, channels);
        for i in 0..self.width * self.height {
            let Some(t) = self.owner(i) else { continue };
            let tri = self.triangles[t];
            let b = self.bary[i];
            let out = &mut img.data[i * channels..(i + 1) * channels];
            for k in 0..3 {
                let v = tri[k] as usize;
                for c in 0..channels {
                    out[c] += b[k] * values[v * channels + c];
                }
            }
        }
        img
    }

    /// Depth of triangle `t`'s plane at screen point `p` (extrapolated).
    fn plane_depth(&self, t: usize, p: [f64; 2]) -> f64 {
        let tri = self.triangles[t];
        let v = tri.map(|i| self.projected[i as usize]);
        let area = edge(v[0], v[1], v[2]);
        let b = [edge(v[1], v[2], p) / area, edge(v[2], v[0], p) / area, edge(v[0], v[1], p) / area];
        (0..3).map(|k| b[k] * self.vertex_depth[tri[k] as usize]).sum()
    }
}

/// Front-facing in screen space (y down): the camera-space normal points
/// toward the viewer, i.e. negative signed area.
#[inline]
pub fn front_facing(corners: &[[f64; 2]; 3]) -> bool {
    signed_area2(corners) < 0.0
}

/// Rendered image, coverage and depth.
#[derive(Debug, Clone, PartialEq)]
pub struct Rendered {
    pub image: Image,
    pub coverage: Mask,
    pub raster: ScreenRaster,
}

/// Renders `texture` on `shape` over `background` (or black). Pixels keep
/// the background where no front-facing triangle with a valid texel lands.
pub fn render(
    model: &BilinearModel,
    shape: &Shape,
    texture: &Texture,
    pose: &CameraPose,
    width: usize,
    height: usize,
    background: Option<&Image>,
) -> Result<Rendered, RasterError> {
    let channels = texture.image.channels();
    let mut image = match background {
        Some(bg) => {
            if bg.width != width || bg.height != height || bg.channels != channels {
                return Err(RasterError::Sizing {
                    what: "background image",
                    expected: width * height * channels,
                    got: bg.data.len(),
                });
            }
            bg.clone()
        }
        None => Image::new(width, height, channels),
    };
    let raster = ScreenRaster::new(model, shape, pose, width, height)?;
    let uv: Vec<f64> = model.uv().iter().flatten().copied().collect();
    let uv_plane = raster.interpolate(&uv, 2);
    let mut coverage = Mask::new(width, height);
    let mut sample = vec![0.0; channels];
    for i in 0..width * height {
        if raster.owner(i).is_none() {
            continue;
        }
        let (u, v) = (uv_plane.data[2 * i], uv_plane.data[2 * i + 1]);
        if texture.sample_uv(u, v, &mut sample) {
            image.data[i * channels..(i + 1) * channels].copy_from_slice(&sample);
            coverage.data[i] = true;
        }
    }
    Ok(Rendered { image, coverage, raster })
}

/// Per-vertex scalar rendered with the z-buffer of `pose`; uncovered pixels
/// are 0.
pub fn render_vertex_scalar(
    model: &BilinearModel,
    shape: &Shape,
    pose: &CameraPose,
    width: usize,
    height: usize,
    values: &[f64],
) -> Result<(Image, Mask), RasterError> {
    if values.len() != model.n_vertices() {
        return Err(RasterError::Sizing {
            what: "vertex values",
            expected: model.n_vertices(),
            got: values.len(),
        });
    }
    let raster = ScreenRaster::new(model, shape, pose, width, height)?;
    Ok((raster.interpolate(values, 1), raster.coverage()))
}

/// Samples `image` into the UV layout through the fitted `shape` and `pose`.
/// Texels that project outside the image, lie on back-facing triangles, or
/// sit behind the visible surface are invalid.
pub fn extract_texture(
    image: &Image,
    shape: &Shape,
    pose: &CameraPose,
    model: &BilinearModel,
    resolution: usize,
) -> Result<Texture, RasterError> {
    let layout = UvLayout::new(model, resolution)?;
    let raster = ScreenRaster::new(model, shape, pose, image.width, image.height)?;
    let (mut zmin, mut zmax) = (f64::INFINITY, f64::NEG_INFINITY);
    for &z in &raster.vertex_depth {
        zmin = zmin.min(z);
        zmax = zmax.max(z);
    }
    let tol = 1e-3 * (zmax - zmin).max(1e-12);
    let channels = image.channels;
    let mut out = Image::new(resolution, resolution, channels);
    let mut valid = Mask::new(resolution, resolution);
    let (w, h) = (image.width as f64, image.height as f64);
    let mut sample = vec![0.0; channels];
    for i in 0..resolution * resolution {
        let Some((t, x)) = layout.surface_point(shape, i) else { continue };
        let corners = model.triangles()[t].map(|v| raster.projected[v as usize]);
        if !front_facing(&corners) {
            continue;
        }
        let p = pose.project_point(x);
        if !(p[0] >= 0.0 && p[0] < w && p[1] >= 0.0 && p[1] < h) {
            continue;
        }
        let texel_depth = pose.depth(x);
        let pixel = (p[1] as usize) * image.width + p[0] as usize;
        let visible_depth = match raster.owner(pixel) {
            Some(o) if o == t => f64::INFINITY,
            Some(o) => raster.plane_depth(o, p),
            None => f64::INFINITY,
        };
        if texel_depth > visible_depth + tol {
            continue;
        }
        image.sample_bilinear(p[0], p[1], &mut sample);
        out.data[i * channels..(i + 1) * channels].copy_from_slice(&sample);
        valid.data[i] = true;
    }
    Ok(Texture { image: out, valid })
}

/// Channel names of the conditioning stack, in order.
pub const CONDITIONING_CHANNELS: [&str; 15] = [
    "texture_r",
    "texture_g",
    "texture_b",
    "normal_x",
    "normal_y",
    "normal_z",
    "area_ratio",
    "curvature",
    "normal_diff_x",
    "normal_diff_y",
    "normal_diff_z",
    "position_diff_x",
    "position_diff_y",
    "position_diff_z",
    "noise",
];

pub const SEMANTIC_CHANNEL: &str = "semantic";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConditioningConfig {
    pub resolution: usize,
    pub seed: u64,
    pub include_semantic: bool,
    /// Millimeters mapped to 1.0 in the position-difference channels.
    pub position_scale: f64,
}

impl Default for ConditioningConfig {
    fn default() -> Self {
        Self {
            resolution: 256,
            seed: 0,
            include_semantic: false,
            position_scale: 10.0,
        }
    }
}

/// UV-space generator input planes.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningStack {
    pub planes: Image,
    pub coverage: Mask,
    pub channel_names: Vec<String>,
    pub seed: u64,
    pub position_scale: f64,
}

impl ConditioningStack {
    pub fn channel_index(&self, name: &str) -> Option<usize> {
        self.channel_names.iter().position(|n| n == name)
    }

    pub fn channel(&self, name: &str) -> Option<Image> {
        self.channel_index(name).map(|c| self.planes.channel(c))
    }

    /// Position difference in millimeters (undoing the configured scale).
    pub fn position_difference_mm(&self) -> Image {
        let start = self.channel_index("position_diff_x").expect("fixed layout");
        let mut img = self.planes.channels_range(start, 3);
        img.data.iter_mut().for_each(|x| *x *= self.position_scale);
        img
    }
}

/// Seeded uniform noise in `[0, 1)`, one value per pixel in row-major order.
pub fn noise_plane(seed: u64, resolution: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..resolution * resolution).map(|_| rng.random::<f64>()).collect();
    Image {
        width: resolution,
        height: resolution,
        channels: 1,
        data,
    }
}

/// Builds the conditioning stack for deforming `shape_src` into `shape_tgt`.
/// `neutral` is the neutral-expression shape of the same identity; the area
/// ratio is measured against it.
pub fn conditioning_stack(
    model: &BilinearModel,
    neutral: &Shape,
    shape_src: &Shape,
    shape_tgt: &Shape,
    texture_src: &Texture,
    config: &ConditioningConfig,
) -> Result<ConditioningStack, RasterError> {
    for s in [neutral, shape_src, shape_tgt] {
        model.check_shape(s)?;
    }
    let res = config.resolution;
    if texture_src.image.width != res || texture_src.image.height != res {
        return Err(RasterError::Sizing {
            what: "source texture resolution",
            expected: res,
            got: texture_src.image.width,
        });
    }
    if texture_src.image.channels != 3 {
        return Err(RasterError::Sizing {
            what: "source texture channels",
            expected: 3,
            got: texture_src.image.channels,
        });
    }
    if !(config.position_scale > 0.0) {
        return Err(RasterError::NonFinite("position scale"));
    }
    let layout = UvLayout::new(model, res)?;
    let n = model.n_vertices();
    let neutral_attr = model.vertex_attributes(neutral)?;
    let src_attr = model.vertex_attributes(shape_src)?;
    let tgt_attr = model.vertex_attributes(shape_tgt)?;
    if let Some(vertex) = neutral_attr.one_ring_area.iter().position(|&a| !(a > 0.0)) {
        return Err(RasterError::DegenerateNeutralArea { vertex });
    }

    let mut per_vertex = Vec::with_capacity(n * 11);
    for v in 0..n {
        let nt = tgt_attr.normals[v];
        let ns = src_attr.normals[v];
        let xt = shape_tgt.vertex(v);
        let xs = shape_src.vertex(v);
        per_vertex.extend_from_slice(&nt);
        per_vertex.push(tgt_attr.one_ring_area[v] / neutral_attr.one_ring_area[v]);
        per_vertex.push(tgt_attr.curvature[v]);
        for c in 0..3 {
            per_vertex.push(nt[c] - ns[c]);
        }
        for c in 0..3 {
            per_vertex.push((xt[c] - xs[c]) / config.position_scale);
        }
    }
    let geometry = layout.interpolate(&per_vertex, 11);
    let coverage = layout.coverage();

    let mut texture = texture_src.image.clone();
    for (i, px) in texture.data.chunks_exact_mut(3).enumerate() {
        if !(coverage.data[i] && texture_src.valid.data[i]) {
            px.iter_mut().for_each(|x| *x = 0.0);
        }
    }
    let noise = noise_plane(config.seed, res);
    let mut names: Vec<String> = CONDITIONING_CHANNELS.iter().map(|s| s.to_string()).collect();
    let planes = if config.include_semantic {
        let semantic = semantic_map_with_layout(model, &layout);
        names.push(SEMANTIC_CHANNEL.to_string());
        Image::stack(&[&texture, &geometry, &noise, &semantic.to_image()])?
    } else {
        Image::stack(&[&texture, &geometry, &noise])?
    };
    Ok(ConditioningStack {
        planes,
        coverage,
        channel_names: names,
        seed: config.seed,
        position_scale: config.position_scale,
    })
}

/// UV-space label plane.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemanticMap {
    pub resolution: usize,
    /// Label id per pixel; meaningful only where `coverage` is set.
    pub labels: Vec<u8>,
    pub coverage: Mask,
}

impl SemanticMap {
    pub fn to_image(&self) -> Image {
        Image {
            width: self.resolution,
            height: self.resolution,
            channels: 1,
            data: self.labels.iter().map(|&l| l as f64).collect(),
        }
    }

    /// Covered pixel count per label id.
    pub fn label_areas(&self) -> [usize; SemanticLabel::COUNT] {
        let mut areas = [0; SemanticLabel::COUNT];
        for (l, &c) in self.labels.iter().zip(&self.coverage.data) {
            if c {
                areas[*l as usize] += 1;
            }
        }
        areas
    }
}

/// Majority label of a triangle's corners; ties go to the lowest id.
pub fn triangle_label(labels: [u8; 3]) -> u8 {
    let mut best = (0usize, u8::MAX);
    for &l in &labels {
        let count = labels.iter().filter(|&&m| m == l).count();
        if count > best.0 || (count == best.0 && l < best.1) {
            best = (count, l);
        }
    }
    best.1
}

fn semantic_map_with_layout(model: &BilinearModel, layout: &UvLayout) -> SemanticMap {
    let res = layout.resolution;
    let tri_labels: Vec<u8> = model
        .triangles()
        .iter()
        .map(|t| triangle_label(t.map(|v| model.semantic()[v as usize])))
        .collect();
    let mut labels = vec![SemanticLabel::Other.id(); res * res];
    for (i, l) in labels.iter_mut().enumerate() {
        if let Some(t) = layout.owner(i) {
            *l = tri_labels[t];
        }
    }
    SemanticMap {
        resolution: res,
        labels,
        coverage: layout.coverage(),
    }
}

pub fn semantic_map(model: &BilinearModel, resolution: usize) -> Result<SemanticMap, RasterError> {
    let layout = UvLayout::new(model, resolution)?;
    Ok(semantic_map_with_layout(model, &layout))
}
