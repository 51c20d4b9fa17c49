//! Least-squares adversarial loss arithmetic over supplied discriminator
//! outputs, the masked L1 term, the weighted generator objective, and the
//! per-channel attention composition.

use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use crate::raster::{Image, Mask};

#[derive(Debug, Error)]
pub enum GanError {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("shape mismatch for {what}: expected {expected}, got {got}")]
    Shape {
        what: &'static str,
        expected: String,
        got: String,
    },
    #[error("mask selects no pixels")]
    EmptyMask,
}

/// `Σ (x - 1)²`.
pub fn lbar2(x: &[f64]) -> f64 {
    x.iter().map(|v| (v - 1.0) * (v - 1.0)).sum()
}

/// `Σ x²`.
pub fn l2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// A discriminator output: a scalar or a flattened patch map.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct DOutput(pub Vec<f64>);

impl DOutput {
    pub fn scalar(v: f64) -> Self {
        Self(vec![v])
    }
}

impl<'de> Deserialize<'de> for DOutput {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Scalar(f64),
            Map(Vec<f64>),
        }
        Ok(match Raw::deserialize(d)? {
            Raw::Scalar(v) => DOutput(vec![v]),
            Raw::Map(v) => DOutput(v),
        })
    }
}

/// Outputs of the three discriminators on their real, fake and mismatched
/// inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorOutputs {
    pub real_on_real: DOutput,
    pub real_on_fake: DOutput,
    pub pair_matched_real: DOutput,
    pub pair_matched_fake: DOutput,
    pub pair_mismatched_real: DOutput,
    pub iden_real_real: DOutput,
    pub iden_real_fake: DOutput,
    pub iden_real_other: DOutput,
}

impl DiscriminatorOutputs {
    /// Matched-real outputs 1, everything else 0, each of length `len`.
    pub fn perfect(len: usize) -> Self {
        let one = DOutput(vec![1.0; len]);
        let zero = DOutput(vec![0.0; len]);
        Self {
            real_on_real: one.clone(),
            real_on_fake: zero.clone(),
            pair_matched_real: one.clone(),
            pair_matched_fake: zero.clone(),
            pair_mismatched_real: zero.clone(),
            iden_real_real: one,
            iden_real_fake: zero.clone(),
            iden_real_other: zero,
        }
    }

    fn named(&self) -> [(&'static str, &DOutput); 8] {
        [
            ("real_on_real", &self.real_on_real),
            ("real_on_fake", &self.real_on_fake),
            ("pair_matched_real", &self.pair_matched_real),
            ("pair_matched_fake", &self.pair_matched_fake),
            ("pair_mismatched_real", &self.pair_mismatched_real),
            ("iden_real_real", &self.iden_real_real),
            ("iden_real_fake", &self.iden_real_fake),
            ("iden_real_other", &self.iden_real_other),
        ]
    }

    /// All outputs finite, and all maps the same length.
    pub fn validate(&self) -> Result<(), GanError> {
        let named = self.named();
        for (name, o) in named {
            if o.0.is_empty() || o.0.iter().any(|v| !v.is_finite()) {
                return Err(GanError::NonFinite(name));
            }
        }
        let maps: Vec<_> = named.iter().filter(|(_, o)| o.0.len() > 1).collect();
        if let Some((_, first)) = maps.first() {
            for (name, o) in &maps {
                if o.0.len() != first.0.len() {
                    return Err(GanError::Shape {
                        what: name,
                        expected: first.0.len().to_string(),
                        got: o.0.len().to_string(),
                    });
                }
            }
        }
        Ok(())
    }
}

/// `L̄₂(D_real(T_real)) + L₂(D_real(T_fake))`.
pub fn loss_real(out: &DiscriminatorOutputs) -> Result<f64, GanError> {
    out.validate()?;
    Ok(lbar2(&out.real_on_real.0) + l2(&out.real_on_fake.0))
}

/// `2 L̄₂(matched real) + L₂(matched fake) + L₂(mismatched real)`.
pub fn loss_pair(out: &DiscriminatorOutputs) -> Result<f64, GanError> {
    out.validate()?;
    Ok(2.0 * lbar2(&out.pair_matched_real.0) + l2(&out.pair_matched_fake.0) + l2(&out.pair_mismatched_real.0))
}

/// `2 L̄₂(same identity) + L₂(generated) + L₂(other identity)`.
pub fn loss_iden(out: &DiscriminatorOutputs) -> Result<f64, GanError> {
    out.validate()?;
    Ok(2.0 * lbar2(&out.iden_real_real.0) + l2(&out.iden_real_fake.0) + l2(&out.iden_real_other.0))
}

pub fn loss_gan(out: &DiscriminatorOutputs) -> Result<f64, GanError> {
    Ok(loss_real(out)? + loss_pair(out)? + loss_iden(out)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub real: f64,
    pub pair: f64,
    pub iden: f64,
    pub gan: f64,
}

pub fn loss_breakdown(out: &DiscriminatorOutputs) -> Result<LossBreakdown, GanError> {
    let (real, pair, iden) = (loss_real(out)?, loss_pair(out)?, loss_iden(out)?);
    Ok(LossBreakdown {
        real,
        pair,
        iden,
        gan: real + pair + iden,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub l1: f64,
    pub perc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { l1: 10.0, perc: 10.0 }
    }
}

/// `L_GAN + λ_L1 L1 + λ_perc L_perc`; an absent perceptual term counts as 0.
pub fn generator_objective(gan: f64, l1: f64, perc: Option<f64>, weights: &LossWeights) -> f64 {
    gan + weights.l1 * l1 + weights.perc * perc.unwrap_or(0.0)
}

/// Mean absolute difference over the channels of the selected pixels (all
/// pixels when `mask` is `None`).
pub fn l1_loss(a: &Image, b: &Image, mask: Option<&Mask>) -> Result<f64, GanError> {
    let dims = |i: &Image| format!("{}x{}x{}", i.width(), i.height(), i.channels());
    if (a.width(), a.height(), a.channels()) != (b.width(), b.height(), b.channels()) {
        return Err(GanError::Shape {
            what: "l1 images",
            expected: dims(a),
            got: dims(b),
        });
    }
    if let Some(m) = mask {
        if (m.width, m.height) != (a.width(), a.height()) {
            return Err(GanError::Shape {
                what: "l1 mask",
                expected: format!("{}x{}", a.width(), a.height()),
                got: format!("{}x{}", m.width, m.height),
            });
        }
    }
    let c = a.channels();
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, (pa, pb)) in a.data().chunks_exact(c).zip(b.data().chunks_exact(c)).enumerate() {
        if mask.is_some_and(|m| !m.data[i]) {
            continue;
        }
        sum += pa.iter().zip(pb).map(|(x, y)| (x - y).abs()).sum::<f64>();
        count += c;
    }
    if count == 0 {
        return Err(GanError::EmptyMask);
    }
    Ok(sum / count as f64)
}

/// Which input an attention value of 1 selects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionOrientation {
    /// `A·source + (1 − A)·color`.
    #[default]
    Source,
    /// `A·color + (1 − A)·source`.
    Color,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Composition {
    pub image: Image,
    /// Attention values moved into `[0, 1]` by clamping.
    pub clamped: usize,
}

pub fn attention_compose(attention: &Image, color: &Image, source: &Image) -> Result<Composition, GanError> {
    attention_compose_with(attention, color, source, AttentionOrientation::default())
}

/// Per-channel convex combination of `source` and `color` weighted by the
/// 3-channel `attention` map.
pub fn attention_compose_with(
    attention: &Image,
    color: &Image,
    source: &Image,
    orientation: AttentionOrientation,
) -> Result<Composition, GanError> {
    for (what, img) in [("attention", attention), ("color", color), ("source", source)] {
        if img.channels() != 3 || (img.width(), img.height()) != (source.width(), source.height()) {
            return Err(GanError::Shape {
                what,
                expected: format!("{}x{}x3", source.width(), source.height()),
                got: format!("{}x{}x{}", img.width(), img.height(), img.channels()),
            });
        }
    }
    let mut out = source.clone();
    let mut clamped = 0;
    for (((o, &a), &c), &s) in out.data_mut().iter_mut().zip(attention.data()).zip(color.data()).zip(source.data()) {
        if !a.is_finite() {
            return Err(GanError::NonFinite("attention"));
        }
        let w = a.clamp(0.0, 1.0);
        clamped += (w != a) as usize;
        *o = match orientation {
            AttentionOrientation::Source => w * s + (1.0 - w) * c,
            AttentionOrientation::Color => w * c + (1.0 - w) * s,
        };
    }
    Ok(Composition { image: out, clamped })
}
