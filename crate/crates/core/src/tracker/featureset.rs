use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use crate::audio::AudioClip;
use crate::features::{
    chroma, dct_row, log_mel, stft, FeatureKind, FeatureMatrix, FeaturePipeline, MEL_BANDS,
};
use crate::ppg::{PhonemeSetName, PpgMatrix};
use crate::timeline::FrameClock;

use super::TrackError;

/// Which features are stacked for online alignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureSet {
    Chroma,
    Mel,
    Ppg(PhonemeSetName),
    ChromaMfcc(usize),
    ChromaPpg(PhonemeSetName),
}

impl fmt::Display for FeatureSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureSet::Chroma => write!(f, "chroma"),
            FeatureSet::Mel => write!(f, "mel"),
            FeatureSet::Ppg(s) => write!(f, "ppg:{s}"),
            FeatureSet::ChromaMfcc(n) => write!(f, "chroma+mfcc:{n}"),
            FeatureSet::ChromaPpg(s) => write!(f, "chroma+ppg:{s}"),
        }
    }
}

impl FromStr for FeatureSet {
    type Err = TrackError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || TrackError::Config(format!("unknown feature combination `{s}`"));
        let lower = s.trim().to_ascii_lowercase();
        let set = |name: &str| {
            name.parse::<PhonemeSetName>()
                .map_err(|_| TrackError::Config(format!("unknown phoneme set `{name}`")))
        };
        match lower.as_str() {
            "chroma" => return Ok(FeatureSet::Chroma),
            "mel" => return Ok(FeatureSet::Mel),
            _ => {}
        }
        if let Some(name) = lower.strip_prefix("chroma+ppg:") {
            return Ok(FeatureSet::ChromaPpg(set(name)?));
        }
        if let Some(name) = lower.strip_prefix("ppg:") {
            return Ok(FeatureSet::Ppg(set(name)?));
        }
        if let Some(n) = lower.strip_prefix("chroma+mfcc:") {
            let n: usize = n.parse().map_err(|_| bad())?;
            if n == 0 || n > MEL_BANDS {
                return Err(TrackError::Config(format!("{n} MFCC coefficients")));
            }
            return Ok(FeatureSet::ChromaMfcc(n));
        }
        Err(bad())
    }
}

impl FeatureSet {
    pub fn ppg_set(&self) -> Option<PhonemeSetName> {
        match self {
            FeatureSet::Ppg(s) | FeatureSet::ChromaPpg(s) => Some(*s),
            _ => None,
        }
    }

    pub fn needs_mel(&self) -> bool {
        matches!(self, FeatureSet::Mel | FeatureSet::ChromaMfcc(_))
    }

    pub fn has_chroma(&self) -> bool {
        matches!(
            self,
            FeatureSet::Chroma | FeatureSet::ChromaMfcc(_) | FeatureSet::ChromaPpg(_)
        )
    }
}

/// Per-kind processing applied before stacking.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureOptions {
    pub chroma: FeaturePipeline,
    pub mel: FeaturePipeline,
    pub mfcc: FeaturePipeline,
    pub ppg: FeaturePipeline,
}

impl Default for FeatureOptions {
    fn default() -> Self {
        Self {
            chroma: FeaturePipeline::chroma(),
            mel: FeaturePipeline::mel(),
            mfcc: FeaturePipeline::mfcc(),
            ppg: FeaturePipeline::ppg(),
        }
    }
}

impl FeatureOptions {
    pub fn without_chroma_log1p(mut self) -> Self {
        self.chroma = self.chroma.without_log1p();
        self
    }
}

/// One processed target frame; `Partial` covers only `range` of the stacked
/// reference dims (posteriors were unavailable).
#[derive(Debug, Clone, PartialEq)]
pub enum FrameFeatures {
    Full(Vec<f64>),
    Partial(Vec<f64>, Range<usize>),
}

/// Turns raw per-frame features into the stacked vector used for alignment,
/// identically for whole-file and streamed input.
#[derive(Debug, Clone)]
pub struct FrameFeaturizer {
    set: FeatureSet,
    opts: FeatureOptions,
}

impl FrameFeaturizer {
    pub fn new(set: FeatureSet, opts: FeatureOptions) -> Self {
        Self { set, opts }
    }

    pub fn set(&self) -> FeatureSet {
        self.set
    }

    pub fn dims(&self) -> usize {
        match self.set {
            FeatureSet::Chroma => 12,
            FeatureSet::Mel => MEL_BANDS,
            FeatureSet::Ppg(s) => ppg_dims(s),
            FeatureSet::ChromaMfcc(n) => 12 + n,
            FeatureSet::ChromaPpg(s) => 12 + ppg_dims(s),
        }
    }

    pub fn kind(&self) -> FeatureKind {
        match self.set {
            FeatureSet::Chroma => FeatureKind::Chroma,
            FeatureSet::Mel => FeatureKind::Mel,
            FeatureSet::Ppg(_) => FeatureKind::Ppg,
            _ => FeatureKind::Stacked,
        }
    }

    /// `ppg` of `None` on a set that needs posteriors gives a partial frame,
    /// or an error when there is nothing else to align on.
    pub fn frame(
        &self,
        chroma_raw: &[f64],
        mel_raw: Option<&[f64]>,
        ppg: Option<&[f64]>,
    ) -> Result<FrameFeatures, TrackError> {
        let mut out = Vec::with_capacity(self.dims());
        if self.set.has_chroma() {
            out.extend(self.opts.chroma.process_frame(chroma_raw)?);
        }
        match self.set {
            FeatureSet::Mel => {
                let mel = mel_raw.ok_or_else(|| TrackError::Config("mel frame missing".into()))?;
                out.extend(self.opts.mel.process_frame(mel)?);
            }
            FeatureSet::ChromaMfcc(n) => {
                let mel = mel_raw.ok_or_else(|| TrackError::Config("mel frame missing".into()))?;
                out.extend(self.opts.mfcc.process_frame(&dct_row(mel, n))?);
            }
            FeatureSet::Ppg(_) | FeatureSet::ChromaPpg(_) => match ppg {
                Some(row) => out.extend(self.opts.ppg.process_frame(row)?),
                None if self.set.has_chroma() => return Ok(FrameFeatures::Partial(out, 0..12)),
                None => return Err(TrackError::Config("no posteriors for a ppg-only frame".into())),
            },
            FeatureSet::Chroma => {}
        }
        Ok(FrameFeatures::Full(out))
    }

    /// Whole-file features of a clip, with posteriors from `ppg` if the set
    /// uses them.
    pub fn extract(&self, clip: &AudioClip, ppg: Option<&PpgMatrix>) -> Result<FeatureMatrix, TrackError> {
        let spec = stft(clip)?;
        let c = chroma(&spec);
        let mel = self.set.needs_mel().then(|| log_mel(&spec));
        let posteriors = match (self.set.ppg_set(), ppg) {
            (Some(want), Some(p)) => {
                check_ppg(p, want, c.frames())?;
                Some(p)
            }
            (Some(want), None) => {
                return Err(TrackError::Config(format!("feature set needs {want} posteriors")))
            }
            (None, _) => None,
        };
        let mut data = Vec::with_capacity(c.frames() * self.dims());
        for k in 0..c.frames() {
            let f = self.frame(
                c.row(k),
                mel.as_ref().map(|m| m.row(k)),
                posteriors.map(|p| p.row(k)),
            )?;
            match f {
                FrameFeatures::Full(v) => data.extend(v),
                FrameFeatures::Partial(..) => unreachable!("posteriors present"),
            }
        }
        Ok(FeatureMatrix::new(
            data,
            c.frames(),
            self.dims(),
            self.kind(),
            FrameClock::default(),
        )?)
    }
}

fn ppg_dims(set: PhonemeSetName) -> usize {
    crate::ppg::PhonemeSet::new(set).len()
}

/// Posteriors must use the expected set and cover exactly `frames` frames.
pub fn check_ppg(p: &PpgMatrix, want: PhonemeSetName, frames: usize) -> Result<(), TrackError> {
    if p.set().name() != want {
        return Err(TrackError::Config(format!(
            "posteriors use {}, feature set needs {want}",
            p.set().name()
        )));
    }
    if p.frames() != frames {
        return Err(TrackError::ClockMismatch {
            expected: frames,
            got: p.frames(),
        });
    }
    Ok(())
}
