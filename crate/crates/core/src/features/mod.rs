//! Framewise features at 25 fps: spectral analysis, per-frame pipelines,
//! distances, stacking, and the FMX1 interchange format.

mod pipeline;
mod spectral;

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::timeline::FrameClock;

pub(crate) use pipeline::distance_unchecked;
pub(crate) use spectral::{dct_row, reflect_index};
pub use pipeline::{
    apply_pipeline, distance, log1p_scale, normalize_frame, softmax_frame, stack, FeaturePipeline,
    Log1pParams, Metric, Norm, Scale,
};
pub use spectral::{
    chroma, log_mel, mfcc, stft, SpectralAnalyzer, Spectrogram, FFT_SIZE, HOP, MEL_BANDS,
    MEL_FLOOR, N_BINS,
};

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("audio contains no samples")]
    EmptyAudio,
    #[error("expected {expected} dims, got {got}")]
    BadDimension { expected: usize, got: usize },
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("frame count mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("log1p input must be non-negative, got {0}")]
    NegativeInput(f64),
    #[error("kind mismatch: pipeline for {expected:?} applied to {got:?}")]
    KindMismatch { expected: FeatureKind, got: FeatureKind },
    #[error("invalid parameter: {0}")]
    BadParam(String),
    #[error("non-finite value at frame {0}")]
    NonFinite(usize),
    #[error("FMX1 format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Chroma,
    Mel,
    Mfcc,
    Ppg,
    Stacked,
    Dlnco,
}

impl FeatureKind {
    pub fn tag(self) -> u8 {
        match self {
            FeatureKind::Chroma => 0,
            FeatureKind::Mel => 1,
            FeatureKind::Mfcc => 2,
            FeatureKind::Ppg => 3,
            FeatureKind::Stacked => 4,
            FeatureKind::Dlnco => 5,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => FeatureKind::Chroma,
            1 => FeatureKind::Mel,
            2 => FeatureKind::Mfcc,
            3 => FeatureKind::Ppg,
            4 => FeatureKind::Stacked,
            5 => FeatureKind::Dlnco,
            _ => return None,
        })
    }
}

/// Frames x dims real matrix, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    data: Vec<f64>,
    frames: usize,
    dims: usize,
    kind: FeatureKind,
    clock: FrameClock,
}

impl FeatureMatrix {
    pub fn new(
        data: Vec<f64>,
        frames: usize,
        dims: usize,
        kind: FeatureKind,
        clock: FrameClock,
    ) -> Result<Self, FeatureError> {
        if data.len() != frames * dims {
            return Err(FeatureError::LengthMismatch(data.len(), frames * dims));
        }
        if dims == 0 {
            return Err(FeatureError::BadParam("zero-dimensional features".into()));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(FeatureError::NonFinite(i / dims));
        }
        Ok(Self {
            data,
            frames,
            dims,
            kind,
            clock,
        })
    }

    pub fn from_rows(
        rows: &[Vec<f64>],
        dims: usize,
        kind: FeatureKind,
        clock: FrameClock,
    ) -> Result<Self, FeatureError> {
        let mut data = Vec::with_capacity(rows.len() * dims);
        for r in rows {
            if r.len() != dims {
                return Err(FeatureError::DimensionMismatch(r.len(), dims));
            }
            data.extend_from_slice(r);
        }
        Self::new(data, rows.len(), dims, kind, clock)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn kind(&self) -> FeatureKind {
        self.kind
    }

    pub fn clock(&self) -> FrameClock {
        self.clock
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dims..(i + 1) * self.dims]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dims)
    }

    pub fn with_kind(mut self, kind: FeatureKind) -> Self {
        self.kind = kind;
        self
    }

    /// Frames `range` as a new matrix.
    pub fn slice(&self, range: std::ops::Range<usize>) -> FeatureMatrix {
        FeatureMatrix {
            data: self.data[range.start * self.dims..range.end * self.dims].to_vec(),
            frames: range.len(),
            dims: self.dims,
            kind: self.kind,
            clock: self.clock,
        }
    }

    /// Mean over consecutive groups of `factor` frames (last group may be short).
    pub fn mean_pooled(&self, factor: usize) -> FeatureMatrix {
        if factor <= 1 {
            return self.clone();
        }
        let frames = self.frames.div_ceil(factor);
        let mut data = vec![0.0; frames * self.dims];
        for (g, out) in data.chunks_exact_mut(self.dims).enumerate() {
            let lo = g * factor;
            let hi = ((g + 1) * factor).min(self.frames);
            for i in lo..hi {
                for (o, v) in out.iter_mut().zip(self.row(i)) {
                    *o += v;
                }
            }
            let n = (hi - lo) as f64;
            out.iter_mut().for_each(|o| *o /= n);
        }
        FeatureMatrix {
            data,
            frames,
            dims: self.dims,
            kind: self.kind,
            clock: self.clock,
        }
    }

    pub fn write_fmx<W: Write>(&self, mut w: W) -> Result<(), FeatureError> {
        let frames = u32::try_from(self.frames)
            .map_err(|_| FeatureError::Format("too many frames".into()))?;
        let dims =
            u32::try_from(self.dims).map_err(|_| FeatureError::Format("too many dims".into()))?;
        w.write_all(b"FMX1")?;
        w.write_all(&frames.to_le_bytes())?;
        w.write_all(&dims.to_le_bytes())?;
        w.write_all(&[self.kind.tag()])?;
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for &v in &self.data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_fmx<R: Read>(mut r: R) -> Result<Self, FeatureError> {
        let mut header = [0u8; 13];
        r.read_exact(&mut header)
            .map_err(|_| FeatureError::Format("truncated header".into()))?;
        if &header[..4] != b"FMX1" {
            return Err(FeatureError::Format("bad magic".into()));
        }
        let frames = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
        let dims = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
        let kind = FeatureKind::from_tag(header[12])
            .ok_or_else(|| FeatureError::Format(format!("unknown kind tag {}", header[12])))?;
        let mut body = Vec::new();
        r.read_to_end(&mut body)?;
        if body.len() != frames * dims * 4 {
            return Err(FeatureError::Format(format!(
                "expected {} data bytes, found {}",
                frames * dims * 4,
                body.len()
            )));
        }
        let data: Vec<f64> = body
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        Self::new(data, frames, dims, kind, FrameClock::default())
    }

    pub fn save_fmx(&self, path: &Path) -> Result<(), FeatureError> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_fmx(f)
    }

    pub fn load_fmx(path: &Path) -> Result<Self, FeatureError> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_fmx(f)
    }

    /// Debug export: header `d0,d1,...`, one frame per row.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<(), FeatureError> {
        let header: Vec<String> = (0..self.dims).map(|d| format!("d{d}")).collect();
        writeln!(w, "{}", header.join(","))?;
        for row in self.rows() {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{}", cells.join(","))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn fmx_layout_is_little_endian() {
        let m = FeatureMatrix::new(
            vec![1.0, 2.0],
            1,
            2,
            FeatureKind::Ppg,
            FrameClock::default(),
        )
        .unwrap();
        let mut buf = Vec::new();
        m.write_fmx(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"FMX1");
        assert_eq!(&buf[4..8], &[1, 0, 0, 0]);
        assert_eq!(&buf[8..12], &[2, 0, 0, 0]);
        assert_eq!(buf[12], 3);
        assert_eq!(&buf[13..17], &1.0f32.to_le_bytes());
        assert_eq!(buf.len(), 13 + 8);
    }

    #[test]
    fn fmx_rejects_truncation_and_magic() {
        assert!(FeatureMatrix::read_fmx(&b"FMX"[..]).is_err());
        let mut buf = b"FMX2".to_vec();
        buf.extend_from_slice(&[0; 9]);
        assert!(FeatureMatrix::read_fmx(&buf[..]).is_err());
        let mut buf = b"FMX1".to_vec();
        buf.extend_from_slice(&2u32.to_le_bytes());
        buf.extend_from_slice(&2u32.to_le_bytes());
        buf.push(0);
        buf.extend_from_slice(&[0; 12]);
        assert!(matches!(
            FeatureMatrix::read_fmx(&buf[..]),
            Err(FeatureError::Format(_))
        ));
    }

    #[test]
    fn mean_pooling() {
        let m = FeatureMatrix::new(
            vec![1.0, 3.0, 5.0, 7.0, 9.0],
            5,
            1,
            FeatureKind::Chroma,
            FrameClock::default(),
        )
        .unwrap();
        let p = m.mean_pooled(2);
        assert_eq!(p.data(), &[2.0, 6.0, 9.0]);
    }

    #[test]
    fn csv_export() {
        let m = FeatureMatrix::new(
            vec![0.5, 1.0],
            1,
            2,
            FeatureKind::Mel,
            FrameClock::default(),
        )
        .unwrap();
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "d0,d1\n0.5,1\n");
    }

    proptest! {
        #[test]
        fn fmx_round_trip(
            frames in 0usize..20,
            dims in 1usize..20,
            tag in 0u8..6,
            seed in prop::collection::vec(-1e6f32..1e6, 400),
        ) {
            let data: Vec<f64> = seed.iter().take(frames * dims).map(|&v| v as f64).collect();
            let kind = FeatureKind::from_tag(tag).unwrap();
            let m = FeatureMatrix::new(data, frames, dims, kind, FrameClock::default()).unwrap();
            let mut buf = Vec::new();
            m.write_fmx(&mut buf).unwrap();
            prop_assert_eq!(FeatureMatrix::read_fmx(&buf[..]).unwrap(), m);
        }
    }
}
