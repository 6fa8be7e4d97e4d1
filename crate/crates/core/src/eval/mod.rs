//! Onset metrics, annotation files and the dataset benchmark.

mod bench;
mod synth;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::AudioError;
use crate::features::FeatureError;
use crate::offline_align::AlignError;
use crate::ppg::PpgError;
use crate::score::{LyricsTimeline, ScoreError};
use crate::timeline::{FrameClock, PathMap, TimelineError, WarpingPath};
use crate::tracker::{LatencyReport, TrackError};

pub use bench::{run_benchmark, song_ids, BenchConfig, Phases};
pub use synth::{generate_dataset, generate_song, SynthConfig, SynthSong};

/// Tolerances of the percentage of correct onsets, in milliseconds.
pub const PCO_THRESHOLDS_MS: [u32; 4] = [200, 300, 500, 1000];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: {0} estimates vs {1} references")]
    LengthMismatch(usize, usize),
    #[error("no onsets to evaluate")]
    Empty,
    #[error("onset at {time:.3} s lies outside the path span {start:.3}..{end:.3} s")]
    OutOfRange { time: f64, start: f64, end: f64 },
    #[error("dataset layout: missing {}", .0.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    DatasetLayout(Vec<PathBuf>),
    #[error("annotation: {0}")]
    Annotation(String),
    #[error("song {song}: {source}")]
    Song {
        song: String,
        #[source]
        source: Box<EvalError>,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Ppg(#[from] PpgError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error(transparent)]
    Track(#[from] TrackError),
    #[error(transparent)]
    Timeline(#[from] TimelineError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Onset {
    pub time_sec: f64,
    pub pitch: u8,
    pub syllable: String,
    pub word_index: usize,
    pub line_index: usize,
}

/// Ground-truth voice-note onsets of one recording.
#[derive(Debug, Clone, PartialEq)]
pub struct OnsetAnnotation {
    onsets: Vec<Onset>,
}

impl OnsetAnnotation {
    pub fn new(onsets: Vec<Onset>) -> Result<Self, EvalError> {
        if onsets.is_empty() {
            return Err(EvalError::Annotation("no onsets".into()));
        }
        if let Some(i) = onsets.iter().position(|o| !o.time_sec.is_finite()) {
            return Err(EvalError::Annotation(format!("row {}: time is not finite", i + 1)));
        }
        if let Some(i) = onsets.windows(2).position(|w| w[1].time_sec <= w[0].time_sec) {
            return Err(EvalError::Annotation(format!(
                "row {}: times must be strictly increasing",
                i + 2
            )));
        }
        Ok(Self { onsets })
    }

    /// Annotation of a timeline's notes, timed by `time_of(note)`.
    pub fn from_timeline(
        t: &LyricsTimeline,
        time_of: impl Fn(&crate::score::NoteUnit) -> f64,
    ) -> Result<Self, EvalError> {
        let owners = t.note_owners();
        let onsets = t
            .notes()
            .zip(owners)
            .map(|(n, (line, word))| Onset {
                time_sec: time_of(n),
                pitch: n.pitch,
                syllable: n.text.clone(),
                word_index: word,
                line_index: line,
            })
            .collect();
        Self::new(onsets)
    }

    pub fn onsets(&self) -> &[Onset] {
        &self.onsets
    }

    pub fn len(&self) -> usize {
        self.onsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.onsets.is_empty()
    }

    pub fn times(&self) -> Vec<f64> {
        self.onsets.iter().map(|o| o.time_sec).collect()
    }

    /// Index of the first note of every word.
    pub fn word_starts(&self) -> Vec<usize> {
        (0..self.onsets.len())
            .filter(|&i| i == 0 || self.onsets[i].word_index != self.onsets[i - 1].word_index)
            .collect()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), EvalError> {
        let mut wr = csv::Writer::from_writer(w);
        for o in &self.onsets {
            wr.serialize(o)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self, EvalError> {
        let mut rd = csv::Reader::from_reader(r);
        let expected = ["time_sec", "pitch", "syllable", "word_index", "line_index"];
        let headers = rd.headers()?;
        if headers.iter().ne(expected) {
            return Err(EvalError::Annotation(format!(
                "header must be `{}`",
                expected.join(",")
            )));
        }
        let onsets = rd.deserialize().collect::<Result<Vec<Onset>, _>>()?;
        Self::new(onsets)
    }

    pub fn save(&self, path: &Path) -> Result<(), EvalError> {
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

fn span(path: &WarpingPath, fr: f64) -> (f64, f64) {
    (path.first().0 as f64 / fr, path.last().0 as f64 / fr)
}

/// Maps onsets (seconds, side a of `path`) to side b.
pub fn estimate_onsets(path: &WarpingPath, onsets: &[f64], clock: &FrameClock) -> Result<Vec<f64>, EvalError> {
    let fr = clock.frame_rate as f64;
    let map = PathMap::new(path);
    let (start, end) = span(path, fr);
    onsets
        .iter()
        .map(|&t| {
            let x = t * fr;
            let (lo, hi) = map.span();
            // seconds-to-frames round-off at the ends is not out of range
            if !(x >= lo - 1e-9 && x <= hi + 1e-9) {
                return Err(EvalError::OutOfRange { time: t, start, end });
            }
            Ok(map.map_clamped(x) / fr)
        })
        .collect()
}

/// Like [`estimate_onsets`], but onsets outside the span map to the nearest end.
pub fn estimate_onsets_clamped(path: &WarpingPath, onsets: &[f64], clock: &FrameClock) -> Vec<f64> {
    let fr = clock.frame_rate as f64;
    let map = PathMap::new(path);
    onsets.iter().map(|&t| map.map_clamped(t * fr) / fr).collect()
}

fn abs_errors_ms(est: &[f64], gt: &[f64]) -> Result<Vec<f64>, EvalError> {
    if est.len() != gt.len() {
        return Err(EvalError::LengthMismatch(est.len(), gt.len()));
    }
    if est.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(est.iter().zip(gt).map(|(e, g)| (e - g).abs() * 1000.0).collect())
}

/// Mean, median and population standard deviation of the absolute errors, in ms.
pub fn aae_mae_std(est: &[f64], gt: &[f64]) -> Result<(f64, f64, f64), EvalError> {
    let mut err = abs_errors_ms(est, gt)?;
    let n = err.len() as f64;
    let mean = err.iter().sum::<f64>() / n;
    let var = err.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n;
    err.sort_by(f64::total_cmp);
    let mid = err.len() / 2;
    let median = if err.len() % 2 == 1 {
        err[mid]
    } else {
        (err[mid - 1] + err[mid]) / 2.0
    };
    Ok((mean, median, var.sqrt()))
}

/// Percentage of estimates strictly within `theta` seconds of the truth.
pub fn pco(est: &[f64], gt: &[f64], theta: f64) -> Result<f64, EvalError> {
    let err = abs_errors_ms(est, gt)?;
    let hits = err.iter().filter(|&&e| e < theta * 1000.0).count();
    Ok(100.0 * hits as f64 / err.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PcoLevel {
    /// First note of each word.
    Word,
    Note,
}

impl std::str::FromStr for PcoLevel {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "word" => Ok(PcoLevel::Word),
            "note" => Ok(PcoLevel::Note),
            _ => Err(EvalError::Annotation(format!("unknown pco level `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub aae_ms: f64,
    pub mae_ms: f64,
    pub std_ms: f64,
    /// Threshold in ms to percentage.
    pub pco: BTreeMap<u32, f64>,
}

impl Metrics {
    /// Note-level errors; PCO on notes or on word starts per `level`.
    pub fn compute(est: &[f64], gt: &OnsetAnnotation, level: PcoLevel) -> Result<Self, EvalError> {
        let truth = gt.times();
        let (aae_ms, mae_ms, std_ms) = aae_mae_std(est, &truth)?;
        let (e, g): (Vec<f64>, Vec<f64>) = match level {
            PcoLevel::Note => (est.to_vec(), truth),
            PcoLevel::Word => gt.word_starts().into_iter().map(|i| (est[i], truth[i])).unzip(),
        };
        let mut pcos = BTreeMap::new();
        for ms in PCO_THRESHOLDS_MS {
            pcos.insert(ms, pco(&e, &g, ms as f64 / 1000.0)?);
        }
        Ok(Self {
            aae_ms,
            mae_ms,
            std_ms,
            pco: pcos,
        })
    }

    /// Unweighted mean over songs.
    pub fn average<'a>(all: impl IntoIterator<Item = &'a Metrics>) -> Option<Metrics> {
        let all: Vec<&Metrics> = all.into_iter().collect();
        if all.is_empty() {
            return None;
        }
        let n = all.len() as f64;
        let avg = |f: &dyn Fn(&Metrics) -> f64| all.iter().map(|m| f(m)).sum::<f64>() / n;
        Some(Metrics {
            aae_ms: avg(&|m| m.aae_ms),
            mae_ms: avg(&|m| m.mae_ms),
            std_ms: avg(&|m| m.std_ms),
            pco: PCO_THRESHOLDS_MS
                .iter()
                .map(|&t| (t, avg(&|m| m.pco[&t])))
                .collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SongReport {
    pub id: String,
    pub notes: usize,
    pub offline: Option<Metrics>,
    pub online: Option<Metrics>,
    pub latency: Option<LatencyReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub features: String,
    pub pco_level: PcoLevel,
    /// Standard deviation convention.
    pub std: String,
    pub songs: Vec<SongReport>,
    pub offline: Option<Metrics>,
    pub online: Option<Metrics>,
}

impl EvalReport {
    pub fn new(features: String, pco_level: PcoLevel, mut songs: Vec<SongReport>) -> Self {
        songs.sort_by(|a, b| a.id.cmp(&b.id));
        let offline = Metrics::average(songs.iter().filter_map(|s| s.offline.as_ref()));
        let online = Metrics::average(songs.iter().filter_map(|s| s.online.as_ref()));
        Self {
            features,
            pco_level,
            std: "population".into(),
            songs,
            offline,
            online,
        }
    }

    pub fn to_json(&self) -> Result<String, EvalError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, EvalError> {
        Ok(serde_json::from_str(s)?)
    }

    /// Aligned text table, one row per song and phase plus the averages.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "{:<16} {:<8} {:>9} {:>9} {:>9}",
            "Song", "Phase", "AAE (ms)", "MAE (ms)", "Std (ms)"
        );
        for t in PCO_THRESHOLDS_MS {
            let _ = write!(s, " {:>9}", format!("PCO@{t}"));
        }
        s.push('\n');
        let mut row = |id: &str, phase: &str, m: &Metrics| {
            let _ = write!(s, "{id:<16} {phase:<8} {:>9.1} {:>9.1} {:>9.1}", m.aae_ms, m.mae_ms, m.std_ms);
            for t in PCO_THRESHOLDS_MS {
                let _ = write!(s, " {:>9.2}", m.pco[&t]);
            }
            s.push('\n');
        };
        for song in &self.songs {
            for (phase, m) in [("offline", &song.offline), ("online", &song.online)] {
                if let Some(m) = m {
                    row(&song.id, phase, m);
                }
            }
        }
        for (phase, m) in [("offline", &self.offline), ("online", &self.online)] {
            if let Some(m) = m {
                row("average", phase, m);
            }
        }
        s
    }
}
