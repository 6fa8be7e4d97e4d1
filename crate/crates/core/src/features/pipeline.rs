use serde::{Deserialize, Serialize};

use super::{FeatureError, FeatureKind, FeatureMatrix, MEL_FLOOR};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    L2,
    Linf,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Log1pParams {
    pub a: f64,
    pub b: f64,
}

impl Default for Log1pParams {
    fn default() -> Self {
        Self { a: 5.0, b: 4.0 }
    }
}

impl Log1pParams {
    pub fn new(a: f64, b: f64) -> Result<Self, FeatureError> {
        if !(a > 0.0 && b > 0.0) {
            return Err(FeatureError::BadParam(format!("log1p a={a} b={b}")));
        }
        Ok(Self { a, b })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Softmax,
    Log1p(Log1pParams),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Euclidean,
    Cosine,
}

/// Per-frame transform: offset, then normalization, then scalings in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturePipeline {
    pub kind: FeatureKind,
    /// Added to every entry before normalization.
    pub offset: f64,
    pub norm: Norm,
    pub scales: Vec<Scale>,
    pub metric: Metric,
}

impl FeaturePipeline {
    /// L-inf + log1p, euclidean.
    pub fn chroma() -> Self {
        Self {
            kind: FeatureKind::Chroma,
            offset: 0.0,
            norm: Norm::Linf,
            scales: vec![Scale::Log1p(Log1pParams::default())],
            metric: Metric::Euclidean,
        }
    }

    /// L-inf + log1p, cosine. Log-mel values are shifted by the log floor
    /// first so that digital silence maps to zero and every entry is
    /// non-negative.
    pub fn mel() -> Self {
        Self {
            kind: FeatureKind::Mel,
            offset: -MEL_FLOOR.ln(),
            norm: Norm::Linf,
            scales: vec![Scale::Log1p(Log1pParams::default())],
            metric: Metric::Cosine,
        }
    }

    /// Softmax + log1p, cosine.
    pub fn ppg() -> Self {
        Self {
            kind: FeatureKind::Ppg,
            offset: 0.0,
            norm: Norm::None,
            scales: vec![Scale::Softmax, Scale::Log1p(Log1pParams::default())],
            metric: Metric::Cosine,
        }
    }

    /// MFCCs are signed, so log1p does not apply; L2 keeps them on the same
    /// scale as the other unit-range blocks.
    pub fn mfcc() -> Self {
        Self {
            kind: FeatureKind::Mfcc,
            offset: 0.0,
            norm: Norm::L2,
            scales: vec![],
            metric: Metric::Euclidean,
        }
    }

    pub fn default_for(kind: FeatureKind) -> Self {
        match kind {
            FeatureKind::Chroma => Self::chroma(),
            FeatureKind::Mel => Self::mel(),
            FeatureKind::Ppg => Self::ppg(),
            FeatureKind::Mfcc => Self::mfcc(),
            FeatureKind::Stacked | FeatureKind::Dlnco => Self {
                kind,
                offset: 0.0,
                norm: Norm::None,
                scales: vec![],
                metric: Metric::Euclidean,
            },
        }
    }

    pub fn without_log1p(mut self) -> Self {
        self.scales.retain(|s| !matches!(s, Scale::Log1p(_)));
        self
    }

    pub fn process_frame(&self, frame: &[f64]) -> Result<Vec<f64>, FeatureError> {
        let mut v: Vec<f64> = if self.offset != 0.0 {
            frame.iter().map(|x| x + self.offset).collect()
        } else {
            frame.to_vec()
        };
        if self.norm != Norm::None {
            v = normalize_frame(&v, self.norm);
        }
        for s in &self.scales {
            v = match s {
                Scale::Softmax => softmax_frame(&v),
                Scale::Log1p(p) => log1p_scale(&v, *p)?,
            };
        }
        Ok(v)
    }
}

pub fn normalize_frame(v: &[f64], mode: Norm) -> Vec<f64> {
    let n = match mode {
        Norm::L2 => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
        Norm::Linf => v.iter().fold(0.0f64, |m, x| m.max(x.abs())),
        Norm::None => return v.to_vec(),
    };
    if n == 0.0 {
        return v.to_vec();
    }
    v.iter().map(|x| x / n).collect()
}

/// `ln(a x + 1) / b` elementwise.
pub fn log1p_scale(v: &[f64], p: Log1pParams) -> Result<Vec<f64>, FeatureError> {
    v.iter()
        .map(|&x| {
            if x < 0.0 {
                Err(FeatureError::NegativeInput(x))
            } else {
                Ok((p.a * x).ln_1p() / p.b)
            }
        })
        .collect()
}

pub fn softmax_frame(v: &[f64]) -> Vec<f64> {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = e.iter().sum();
    e.into_iter().map(|x| x / sum).collect()
}

pub fn distance(x: &[f64], y: &[f64], metric: Metric) -> Result<f64, FeatureError> {
    if x.len() != y.len() {
        return Err(FeatureError::DimensionMismatch(x.len(), y.len()));
    }
    Ok(distance_unchecked(x, y, metric))
}

#[inline]
pub(crate) fn distance_unchecked(x: &[f64], y: &[f64], metric: Metric) -> f64 {
    match metric {
        Metric::Euclidean => x
            .iter()
            .zip(y)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt(),
        Metric::Cosine => {
            let (mut dot, mut nx, mut ny) = (0.0, 0.0, 0.0);
            for (a, b) in x.iter().zip(y) {
                dot += a * b;
                nx += a * a;
                ny += b * b;
            }
            if nx == 0.0 || ny == 0.0 {
                0.0
            } else {
                (1.0 - dot / (nx.sqrt() * ny.sqrt())).max(0.0)
            }
        }
    }
}

pub fn apply_pipeline(
    raw: &FeatureMatrix,
    p: &FeaturePipeline,
) -> Result<FeatureMatrix, FeatureError> {
    if raw.kind() != p.kind {
        return Err(FeatureError::KindMismatch {
            expected: p.kind,
            got: raw.kind(),
        });
    }
    let mut data = Vec::with_capacity(raw.data().len());
    for row in raw.rows() {
        data.extend(p.process_frame(row)?);
    }
    FeatureMatrix::new(data, raw.frames(), raw.dims(), raw.kind(), raw.clock())
}

/// Framewise concatenation of already processed parts.
pub fn stack(parts: &[FeatureMatrix]) -> Result<FeatureMatrix, FeatureError> {
    let first = parts
        .first()
        .ok_or_else(|| FeatureError::BadParam("nothing to stack".into()))?;
    if parts.len() == 1 {
        return Ok(first.clone());
    }
    for p in parts {
        if p.frames() != first.frames() {
            return Err(FeatureError::LengthMismatch(first.frames(), p.frames()));
        }
        if p.clock() != first.clock() {
            return Err(FeatureError::BadParam("clock mismatch".into()));
        }
    }
    let dims: usize = parts.iter().map(|p| p.dims()).sum();
    let mut data = Vec::with_capacity(dims * first.frames());
    for i in 0..first.frames() {
        for p in parts {
            data.extend_from_slice(p.row(i));
        }
    }
    FeatureMatrix::new(
        data,
        first.frames(),
        dims,
        FeatureKind::Stacked,
        first.clock(),
    )
}
