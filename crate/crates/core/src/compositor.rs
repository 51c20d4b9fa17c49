//! Face mask dilation, vertex-distance planes and the distance-driven blend
//! of a rendered face back into its source image.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fitting::CameraPose;
use crate::model::{BilinearModel, Shape};
use crate::raster::{render_vertex_scalar, Image, Mask, RasterError};

#[derive(Debug, Error)]
pub enum CompositeError {
    #[error("size mismatch for {what}: expected {expected}, got {got}")]
    Sizing {
        what: &'static str,
        expected: String,
        got: String,
    },
    #[error("invalid blend config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

/// Which image the distance weight `α` multiplies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlphaOrientation {
    /// `α·input + (1 − α)·rendered`: undeformed pixels keep the input.
    #[default]
    Input,
    /// `α·rendered + (1 − α)·input`.
    Rendered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlendConfig {
    /// Side of the square dilation element, pixels.
    pub kernel: usize,
    /// Distance falloff `σ²` in `α = exp(-d²/σ²)`, mm².
    pub sigma2: f64,
    pub orientation: AlphaOrientation,
}

impl Default for BlendConfig {
    fn default() -> Self {
        Self {
            kernel: 12,
            sigma2: 4.0,
            orientation: AlphaOrientation::Input,
        }
    }
}

impl BlendConfig {
    pub fn validate(&self) -> Result<(), CompositeError> {
        if self.kernel == 0 {
            return Err(CompositeError::InvalidConfig("kernel must be at least 1".into()));
        }
        if !(self.sigma2 > 0.0 && self.sigma2.is_finite()) {
            return Err(CompositeError::InvalidConfig("sigma2 must be positive".into()));
        }
        Ok(())
    }

    /// Blend weight for vertex distance `d` (mm).
    pub fn alpha(&self, d: f64) -> f64 {
        (-d * d / self.sigma2).exp()
    }
}

/// Window offsets of a `kernel`-wide square element anchored at its center,
/// `-(kernel/2) ..= kernel - 1 - kernel/2`.
pub fn kernel_offsets(kernel: usize) -> (isize, isize) {
    let lo = -((kernel / 2) as isize);
    (lo, lo + kernel as isize - 1)
}

/// Morphological dilation with a square element: a pixel is set when any
/// pixel of its window is set. Separable max over rows then columns.
pub fn dilate(mask: &Mask, kernel: usize) -> Mask {
    let (w, h) = (mask.width, mask.height);
    if kernel <= 1 {
        return mask.clone();
    }
    let (lo, hi) = kernel_offsets(kernel);
    let pass = |src: &[bool], len: usize, count: usize, stride: usize, step: usize| {
        let mut out = vec![false; src.len()];
        for line in 0..count {
            let base = line * stride;
            // Running count of set pixels in the window.
            let mut prefix = vec![0usize; len + 1];
            for i in 0..len {
                prefix[i + 1] = prefix[i] + src[base + i * step] as usize;
            }
            for i in 0..len {
                let a = (i as isize + lo).clamp(0, len as isize) as usize;
                let b = (i as isize + hi + 1).clamp(0, len as isize) as usize;
                out[base + i * step] = prefix[b] > prefix[a];
            }
        }
        out
    };
    let rows = pass(&mask.data, w, h, w, 1);
    let data = pass(&rows, h, w, 1, w);
    Mask { width: w, height: h, data }
}

/// Dilated band around `mask`, excluding the mask itself.
pub fn margin(mask: &Mask, kernel: usize) -> Mask {
    let d = dilate(mask, kernel);
    Mask {
        width: mask.width,
        height: mask.height,
        data: d.data.iter().zip(&mask.data).map(|(&d, &m)| d && !m).collect(),
    }
}

/// Per-vertex distance between `source` and `target`, rasterized with the
/// target's projection. Uncovered pixels are 0.
pub fn vertex_distance_plane(
    model: &BilinearModel,
    source: &Shape,
    target: &Shape,
    pose: &CameraPose,
    width: usize,
    height: usize,
) -> Result<(Image, Mask), CompositeError> {
    model.check_shape(source).map_err(RasterError::from)?;
    let d: Vec<f64> = source
        .vertices()
        .zip(target.vertices())
        .map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt())
        .collect();
    Ok(render_vertex_scalar(model, target, pose, width, height, &d)?)
}

/// Composite of a render and its source image.
#[derive(Debug, Clone, PartialEq)]
pub struct Blended {
    pub image: Image,
    pub dilated: Mask,
    pub margin: Mask,
    /// Per-pixel `α` on the coverage, 0 elsewhere.
    pub alpha: Image,
}

/// Inside `coverage` the output mixes input and render by `α(d)`. A margin
/// pixel adds the change made at its nearest covered pixel, scaled by
/// `1 − r/(R + 1)` with `r` the chessboard distance to the coverage and `R`
/// half the kernel. Everything else is copied from the input.
pub fn blend(rendered: &Image, input: &Image, coverage: &Mask, distance: &Image, config: &BlendConfig) -> Result<Blended, CompositeError> {
    config.validate()?;
    let (w, h, c) = (input.width(), input.height(), input.channels());
    let dims = |i: &Image| format!("{}x{}x{}", i.width(), i.height(), i.channels());
    if (rendered.width(), rendered.height(), rendered.channels()) != (w, h, c) {
        return Err(CompositeError::Sizing {
            what: "rendered image",
            expected: dims(input),
            got: dims(rendered),
        });
    }
    if (distance.width(), distance.height(), distance.channels()) != (w, h, 1) {
        return Err(CompositeError::Sizing {
            what: "distance plane",
            expected: format!("{w}x{h}x1"),
            got: dims(distance),
        });
    }
    if (coverage.width, coverage.height) != (w, h) {
        return Err(CompositeError::Sizing {
            what: "coverage mask",
            expected: format!("{w}x{h}"),
            got: format!("{}x{}", coverage.width, coverage.height),
        });
    }

    let mut out = input.clone();
    let mut alpha = Image::new(w, h, 1);
    for i in 0..w * h {
        if !coverage.data[i] {
            continue;
        }
        let a = config.alpha(distance.data()[i]);
        alpha.data_mut()[i] = a;
        let (x, y) = (i % w, i / w);
        let (inp, ren) = (input.pixel(x, y), rendered.pixel(x, y));
        let px: Vec<f64> = inp
            .iter()
            .zip(ren)
            .map(|(&p, &r)| match config.orientation {
                AlphaOrientation::Input => a * p + (1.0 - a) * r,
                AlphaOrientation::Rendered => a * r + (1.0 - a) * p,
            })
            .collect();
        out.pixel_mut(x, y).copy_from_slice(&px);
    }

    let dilated = dilate(coverage, config.kernel);
    let band = margin(coverage, config.kernel);
    // Breadth-first from the coverage; each margin pixel takes its origin
    // from the covered pixel that reached it first.
    let mut dist = vec![usize::MAX; w * h];
    let mut origin = vec![usize::MAX; w * h];
    let mut queue = VecDeque::new();
    for i in 0..w * h {
        if coverage.data[i] {
            dist[i] = 0;
            origin[i] = i;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (x, y) = ((i % w) as isize, (i / w) as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if dist[j] == usize::MAX && band.data[j] {
                    dist[j] = dist[i] + 1;
                    origin[j] = origin[i];
                    queue.push_back(j);
                }
            }
        }
    }
    let reach = (config.kernel / 2) as f64;
    let face = out.clone();
    for i in 0..w * h {
        if !band.data[i] || dist[i] == usize::MAX {
            continue;
        }
        let f = 1.0 - dist[i] as f64 / (reach + 1.0);
        let o = origin[i] * c;
        for k in 0..c {
            let change = face.data()[o + k] - input.data()[o + k];
            out.data_mut()[i * c + k] = input.data()[i * c + k] + f * change;
        }
    }
    Ok(Blended {
        image: out,
        dilated,
        margin: band,
        alpha,
    })
}
