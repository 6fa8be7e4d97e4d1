use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::{estimate_onsets_clamped, EvalError, EvalReport, Metrics, OnsetAnnotation, PcoLevel, SongReport};
use crate::audio::load_wav;
use crate::offline_align::{prepare, OfflineConfig};
use crate::ppg::{load_ppg, PhonemeSet};
use crate::score::parse_musicxml;
use crate::timeline::{FrameClock, WarpingPath};
use crate::tracker::{
    track_clip, FeatureOptions, FeatureSet, FilePpgProvider, FrameFeaturizer, OfflineModel, Pacing,
    PpgProvider, Tracker, TrackerConfig,
};

const REQUIRED: [&str; 6] = [
    "score.musicxml",
    "lyrics.txt",
    "ref.wav",
    "target.wav",
    "ann_ref.csv",
    "ann_target.csv",
];
const PPG_FILES: [&str; 2] = ["ppg_ref.fmx", "ppg_target.fmx"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Phases {
    pub offline: bool,
    pub online: bool,
}

impl Default for Phases {
    fn default() -> Self {
        Self {
            offline: true,
            online: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub features: FeatureSet,
    pub options: FeatureOptions,
    pub offline: OfflineConfig,
    pub tracker: TrackerConfig,
    pub pacing: Pacing,
    pub pco_level: PcoLevel,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            features: FeatureSet::Chroma,
            options: FeatureOptions::default(),
            offline: OfflineConfig::default(),
            tracker: TrackerConfig::default(),
            pacing: Pacing::Fast,
            pco_level: PcoLevel::Word,
        }
    }
}

/// Song directories under `root`, sorted by name.
pub fn song_ids(root: &Path) -> Result<Vec<String>, EvalError> {
    if !root.is_dir() {
        return Err(EvalError::DatasetLayout(vec![root.to_path_buf()]));
    }
    let mut ids = Vec::new();
    for entry in std::fs::read_dir(root)? {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            ids.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    ids.sort();
    Ok(ids)
}

fn missing_files(root: &Path, ids: &[String], cfg: &BenchConfig, phases: Phases) -> Vec<PathBuf> {
    let needs_ppg = phases.online && cfg.features.ppg_set().is_some();
    ids.iter()
        .flat_map(|id| {
            let dir = root.join(id);
            REQUIRED
                .iter()
                .chain(PPG_FILES.iter().filter(|_| needs_ppg))
                .map(move |f| dir.join(f))
        })
        .filter(|p| !p.is_file())
        .collect()
}

/// Evaluates every song under `root`; the offline phase scores the
/// pseudo-labels against the reference annotation, the online phase scores
/// the tracked path against the target annotation.
pub fn run_benchmark(root: &Path, cfg: &BenchConfig, phases: Phases) -> Result<EvalReport, EvalError> {
    let ids = song_ids(root)?;
    if ids.is_empty() {
        return Err(EvalError::DatasetLayout(vec![root.join("<song>")]));
    }
    let missing = missing_files(root, &ids, cfg, phases);
    if !missing.is_empty() {
        return Err(EvalError::DatasetLayout(missing));
    }
    let run = |id: &String| {
        eval_song(&root.join(id), id, cfg, phases).map_err(|e| EvalError::Song {
            song: id.clone(),
            source: Box::new(e),
        })
    };
    let songs: Vec<SongReport> = match cfg.pacing {
        // paced runs sleep, so give each its own thread
        Pacing::Realtime => std::thread::scope(|s| {
            let handles: Vec<_> = ids.iter().map(|id| s.spawn(move || run(id))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("song worker panicked"))
                .collect::<Result<_, _>>()
        })?,
        Pacing::Fast => ids.par_iter().map(run).collect::<Result<_, _>>()?,
    };
    Ok(EvalReport::new(cfg.features.to_string(), cfg.pco_level, songs))
}

fn eval_song(dir: &Path, id: &str, cfg: &BenchConfig, phases: Phases) -> Result<SongReport, EvalError> {
    let clock = FrameClock::default();
    let score = parse_musicxml(&dir.join("score.musicxml"), None)?;
    let lyrics = std::fs::read_to_string(dir.join("lyrics.txt"))?;
    let reference = load_wav(&dir.join("ref.wav"))?;
    let ann_ref = OnsetAnnotation::load(&dir.join("ann_ref.csv"))?;

    let art = prepare(&score, Some(&lyrics), &reference, &cfg.offline)?;
    let pseudo: Vec<f64> = art
        .timeline
        .notes()
        .map(|n| n.ref_time.expect("pseudo-labels fill every note"))
        .collect();
    if pseudo.len() != ann_ref.len() {
        return Err(EvalError::LengthMismatch(pseudo.len(), ann_ref.len()));
    }
    let offline = if phases.offline {
        Some(Metrics::compute(&pseudo, &ann_ref, cfg.pco_level)?)
    } else {
        None
    };

    let (online, latency) = if phases.online {
        let target = load_wav(&dir.join("target.wav"))?;
        let ann_target = OnsetAnnotation::load(&dir.join("ann_target.csv"))?;
        let (ppg_ref, ppg_target) = match cfg.features.ppg_set() {
            Some(name) => {
                let set = PhonemeSet::new(name);
                (
                    Some(load_ppg(&dir.join(PPG_FILES[0]), &set)?),
                    Some(load_ppg(&dir.join(PPG_FILES[1]), &set)?),
                )
            }
            None => (None, None),
        };
        let featurizer = FrameFeaturizer::new(cfg.features, cfg.options.clone());
        let model = OfflineModel {
            reference: featurizer.extract(&reference, ppg_ref.as_ref())?,
            timeline: art.timeline.clone(),
            tempo: score.tempo.clone(),
            score_ref_path: art.path.clone(),
        };
        let provider = ppg_target.map(|p| Box::new(FilePpgProvider::new(p)) as Box<dyn PpgProvider>);
        let tcfg = TrackerConfig {
            record_path: true,
            ..cfg.tracker.clone()
        };
        let mut tracker = Tracker::new(model, featurizer, provider, tcfg)?;
        let (_, latency) = track_clip(&mut tracker, &target, cfg.pacing)?;
        let path = WarpingPath::new(tracker.path().to_vec())?;
        let est = estimate_onsets_clamped(&path, &pseudo, &clock);
        if est.len() != ann_target.len() {
            return Err(EvalError::LengthMismatch(est.len(), ann_target.len()));
        }
        (Some(Metrics::compute(&est, &ann_target, cfg.pco_level)?), Some(latency))
    } else {
        (None, None)
    };

    Ok(SongReport {
        id: id.to_string(),
        notes: pseudo.len(),
        offline,
        online,
        latency,
    })
}
