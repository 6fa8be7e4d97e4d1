//! Real-time loop: chunked audio in, lyric events out.

mod featureset;
mod latency;
mod provider;
mod stream;

use std::sync::mpsc;
use std::time::{Duration, Instant};

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{chunk_stream, AudioChunk, AudioClip, CHUNK_SAMPLES, SAMPLE_RATE};
use crate::features::{FeatureError, FeatureMatrix, SpectralAnalyzer};
use crate::online_align::{OltwConfig, OltwError, OltwState};
use crate::ppg::PpgError;
use crate::score::{LyricsTimeline, UnitLevel};
use crate::timeline::{FrameClock, PathMap, TempoMap, TimelineError, WarpingPath};

pub use featureset::{check_ppg, FeatureOptions, FeatureSet, FrameFeatures, FrameFeaturizer};
pub use latency::{LatencyRecorder, LatencyReport};
pub use provider::{
    read_chunk, read_rows, serve_replay, write_chunk, write_rows, FilePpgProvider, PpgProvider,
    StreamPpgProvider, PROTOCOL_VERSION,
};
pub use stream::{ready_frames, StreamingExtractor};

#[derive(Debug, Error)]
pub enum TrackError {
    #[error("frame count mismatch: expected {expected}, got {got}")]
    ClockMismatch { expected: usize, got: usize },
    #[error("posterior provider: {0}")]
    Provider(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Ppg(#[from] PpgError),
    #[error(transparent)]
    Oltw(#[from] OltwError),
    #[error(transparent)]
    Timeline(#[from] TimelineError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Chunk release policy of the audio producer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pacing {
    /// One chunk per 160 ms, as a live input would deliver them.
    Realtime,
    /// As fast as the consumer takes them.
    Fast,
}

impl std::str::FromStr for Pacing {
    type Err = TrackError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "realtime" => Ok(Pacing::Realtime),
            "fast" => Ok(Pacing::Fast),
            _ => Err(TrackError::Config(format!("unknown pacing `{s}`"))),
        }
    }
}

pub const QUEUE_CAPACITY: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerConfig {
    pub oltw: OltwConfig,
    /// Soft deadline for the posteriors of one chunk.
    pub ppg_deadline: Duration,
    /// Keep (reference position, target frame) for every frame.
    pub record_path: bool,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            oltw: OltwConfig {
                keep_history: false,
                ..OltwConfig::default()
            },
            ppg_deadline: Duration::from_millis(120),
            record_path: false,
        }
    }
}

/// Everything the online phase needs from the offline phase.
#[derive(Debug, Clone)]
pub struct OfflineModel {
    /// Processed reference features, same feature set as the tracker.
    pub reference: FeatureMatrix,
    pub timeline: LyricsTimeline,
    pub tempo: TempoMap,
    /// Score frames (a) to reference frames (b).
    pub score_ref_path: WarpingPath,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyricEvent {
    pub wall_time: f64,
    pub target_time: f64,
    pub ref_time: f64,
    pub score_beat: f64,
    pub unit: UnitLevel,
    pub index: usize,
    pub text: String,
    pub latency: f64,
    /// Some frames of this chunk were aligned without posteriors.
    pub fallback: bool,
}

impl LyricEvent {
    /// The event with wall-clock fields zeroed, for comparing runs.
    pub fn without_timing(&self) -> LyricEvent {
        LyricEvent {
            wall_time: 0.0,
            latency: 0.0,
            ..self.clone()
        }
    }
}

struct UnitIndex {
    beats: Vec<f64>,
    owners: Vec<(usize, usize)>,
    note_text: Vec<String>,
    word_text: Vec<String>,
    line_text: Vec<String>,
}

impl UnitIndex {
    fn new(t: &LyricsTimeline) -> Self {
        let mut word_text = Vec::new();
        for w in t.words() {
            if word_text.len() <= w.index {
                word_text.resize(w.index + 1, String::new());
            }
            word_text[w.index] = w.text.clone();
        }
        let mut line_text = Vec::new();
        for l in &t.lines {
            if line_text.len() <= l.index {
                line_text.resize(l.index + 1, String::new());
            }
            line_text[l.index] = l.text.clone();
        }
        Self {
            beats: t.notes().map(|n| n.beat).collect(),
            owners: t.note_owners(),
            note_text: t.notes().map(|n| n.text.clone()).collect(),
            word_text,
            line_text,
        }
    }

    /// Latest note whose onset is at or before `beat`.
    fn note_at(&self, beat: f64) -> Option<usize> {
        self.beats
            .partition_point(|&b| b <= beat + 1e-9)
            .checked_sub(1)
    }
}

/// Single-owner alignment state for one performance.
pub struct Tracker {
    model: OfflineModel,
    featurizer: FrameFeaturizer,
    provider: Option<Box<dyn PpgProvider>>,
    cfg: TrackerConfig,
    extractor: StreamingExtractor,
    oltw: OltwState,
    ref_to_score: PathMap,
    units: UnitIndex,
    clock: FrameClock,
    current: [Option<usize>; 3],
    origin: Instant,
    latency: LatencyRecorder,
    stalls: usize,
    path: Vec<(usize, usize)>,
    needs_mel: bool,
    last_ppg: Option<Vec<f64>>,
}

impl Tracker {
    pub fn new(
        model: OfflineModel,
        featurizer: FrameFeaturizer,
        provider: Option<Box<dyn PpgProvider>>,
        cfg: TrackerConfig,
    ) -> Result<Self, TrackError> {
        let clock = model.reference.clock();
        if clock != FrameClock::default() {
            return Err(TrackError::Config("reference features use a foreign clock".into()));
        }
        if model.reference.dims() != featurizer.dims() {
            return Err(TrackError::Config(format!(
                "reference has {} dims, feature set {} has {}",
                model.reference.dims(),
                featurizer.set(),
                featurizer.dims()
            )));
        }
        match (featurizer.set().ppg_set(), &provider) {
            (Some(want), Some(p)) if p.set() != want => {
                return Err(TrackError::Config(format!(
                    "provider serves {}, feature set needs {want}",
                    p.set()
                )))
            }
            (Some(want), None) => {
                return Err(TrackError::Config(format!("feature set needs a {want} provider")))
            }
            _ => {}
        }
        let oltw = OltwState::new(model.reference.clone(), cfg.oltw.clone())?;
        let ref_to_score = PathMap::inverse(&model.score_ref_path);
        let units = UnitIndex::new(&model.timeline);
        let needs_mel = featurizer.set().needs_mel();
        Ok(Self {
            model,
            featurizer,
            provider,
            cfg,
            extractor: StreamingExtractor::new(),
            oltw,
            ref_to_score,
            units,
            clock,
            current: [None; 3],
            origin: Instant::now(),
            latency: LatencyRecorder::new(),
            stalls: 0,
            path: Vec::new(),
            needs_mel,
            last_ppg: None,
        })
    }

    /// Restarts the wall clock used for event timestamps.
    pub fn reset_clock(&mut self) {
        self.origin = Instant::now();
    }

    pub fn frames_processed(&self) -> usize {
        self.oltw.frames_consumed()
    }

    pub fn position(&self) -> f64 {
        self.oltw.position()
    }

    /// Frames aligned without posteriors so far.
    pub fn stalls(&self) -> usize {
        self.stalls
    }

    /// Recorded (reference position, target frame) pairs.
    pub fn path(&self) -> &[(usize, usize)] {
        &self.path
    }

    pub fn latency(&self) -> LatencyReport {
        self.latency.report(self.stalls)
    }

    /// Processes one chunk that became available at `arrival`.
    pub fn process_chunk(&mut self, chunk: &AudioChunk, arrival: Instant) -> Result<Vec<LyricEvent>, TrackError> {
        let started = Instant::now();
        if chunk.start_sample != self.extractor.samples_seen() {
            return Err(TrackError::Config(format!(
                "chunk starts at sample {}, expected {}",
                chunk.start_sample,
                self.extractor.samples_seen()
            )));
        }
        if let Some(p) = self.provider.as_mut() {
            p.push_audio(&chunk.samples)?;
        }
        let powers = self.extractor.push(&chunk.samples);
        let events = self.consume(powers, started, arrival)?;
        self.latency.record(started.elapsed());
        Ok(events)
    }

    /// Flushes the final frames at the end of the input.
    pub fn finish(&mut self) -> Result<Vec<LyricEvent>, TrackError> {
        let started = Instant::now();
        let powers = self.extractor.finish();
        self.consume(powers, started, started)
    }

    fn consume(&mut self, powers: Vec<Vec<f64>>, started: Instant, arrival: Instant) -> Result<Vec<LyricEvent>, TrackError> {
        if powers.is_empty() {
            return Ok(Vec::new());
        }
        let an = SpectralAnalyzer::shared();
        let deadline = started + self.cfg.ppg_deadline;
        let mut fallback = false;
        for power in powers {
            let k = self.oltw.frames_consumed();
            let chroma = an.chroma_from_power(&power);
            let mel = self.needs_mel.then(|| an.log_mel_from_power(&power));
            let mut ppg = match self.provider.as_mut() {
                Some(p) => p.row(k, deadline)?,
                None => None,
            };
            if ppg.is_some() {
                self.last_ppg.clone_from(&ppg);
            } else if self.provider.is_some() && !self.featurizer.set().has_chroma() {
                // nothing else to align on: hold the last posterior
                fallback = true;
                self.stalls += 1;
                let dims = self.featurizer.dims();
                ppg = Some(self.last_ppg.clone().unwrap_or_else(|| vec![1.0 / dims as f64; dims]));
            }
            let out = match self.featurizer.frame(&chroma, mel.as_deref(), ppg.as_deref())? {
                FrameFeatures::Full(v) => self.oltw.step(&v)?,
                FrameFeatures::Partial(v, range) => {
                    fallback = true;
                    self.stalls += 1;
                    self.oltw.step_partial(&v, range)?
                }
            };
            if self.cfg.record_path {
                self.path.push((out.aligned, k));
            }
        }
        if fallback {
            warn!("posteriors late at target frame {}; aligned on chroma", self.oltw.frames_consumed());
        }
        self.emit(arrival, fallback)
    }

    fn emit(&mut self, arrival: Instant, fallback: bool) -> Result<Vec<LyricEvent>, TrackError> {
        let fr = self.clock.frame_rate as f64;
        let pos = self.oltw.position();
        let score_frames = self.ref_to_score.map_clamped(pos);
        let beat = self.model.tempo.beat_at_time((score_frames / fr).max(0.0))?;
        let Some(note) = self.units.note_at(beat) else {
            return Ok(Vec::new());
        };
        let (line, word) = self.units.owners[note];
        let now = Instant::now();
        let target_time = self.oltw.frames_consumed().saturating_sub(1) as f64 / fr;
        let mut events = Vec::new();
        for (slot, level, index) in [
            (2, UnitLevel::Note, note),
            (1, UnitLevel::Word, word),
            (0, UnitLevel::Line, line),
        ] {
            if self.current[slot].is_some_and(|c| c >= index) {
                continue;
            }
            self.current[slot] = Some(index);
            let text = match level {
                UnitLevel::Note => &self.units.note_text[index],
                UnitLevel::Word => &self.units.word_text[index],
                UnitLevel::Line => &self.units.line_text[index],
            };
            events.push(LyricEvent {
                wall_time: now.duration_since(self.origin).as_secs_f64(),
                target_time,
                ref_time: pos / fr,
                score_beat: beat,
                unit: level,
                index,
                text: text.clone(),
                latency: now.saturating_duration_since(arrival).as_secs_f64(),
                fallback,
            });
        }
        Ok(events)
    }
}

/// Runs the two-stage pipeline: a producer releases chunks into a bounded
/// queue (paced per `pacing`), the calling thread aligns them and hands each
/// event to `sink` in order.
pub fn run_tracker<I, F>(
    tracker: &mut Tracker,
    chunks: I,
    pacing: Pacing,
    mut sink: F,
) -> Result<LatencyReport, TrackError>
where
    I: IntoIterator<Item = AudioChunk>,
    I::IntoIter: Send,
    F: FnMut(&LyricEvent) -> Result<(), TrackError>,
{
    let (tx, rx) = mpsc::sync_channel::<(AudioChunk, Instant)>(QUEUE_CAPACITY);
    let chunk_period = Duration::from_secs_f64(CHUNK_SAMPLES as f64 / SAMPLE_RATE as f64);
    tracker.reset_clock();
    let start = Instant::now();
    let chunks = chunks.into_iter();
    std::thread::scope(|s| {
        s.spawn(move || {
            for (i, chunk) in chunks.enumerate() {
                if pacing == Pacing::Realtime {
                    let due = start + chunk_period * i as u32;
                    let now = Instant::now();
                    if due > now {
                        std::thread::sleep(due - now);
                    }
                }
                if tx.send((chunk, Instant::now())).is_err() {
                    return;
                }
            }
        });
        for (chunk, arrival) in rx.iter() {
            for e in tracker.process_chunk(&chunk, arrival)? {
                sink(&e)?;
            }
        }
        for e in tracker.finish()? {
            sink(&e)?;
        }
        Ok(tracker.latency())
    })
}

/// Tracks a whole clip and collects its events.
pub fn track_clip(
    tracker: &mut Tracker,
    clip: &AudioClip,
    pacing: Pacing,
) -> Result<(Vec<LyricEvent>, LatencyReport), TrackError> {
    let expected = FrameClock::default().frame_count(clip.len());
    if let Some(n) = tracker.provider.as_ref().and_then(|p| p.frames()) {
        if n != expected {
            return Err(TrackError::ClockMismatch { expected, got: n });
        }
    }
    let mut events = Vec::new();
    let chunks: Vec<AudioChunk> = chunk_stream(clip).collect();
    let report = run_tracker(tracker, chunks, pacing, |e| {
        events.push(e.clone());
        Ok(())
    })?;
    Ok((events, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{synth_score_audio, ScoreNote};
    use crate::ppg::{synthetic_ppg, PhonemeSet, PhonemeSetName, PpgMatrix};
    use crate::score::{build_timeline, Syllabic, VocalNote};

    const PITCHES: [u8; 8] = [60, 64, 67, 72, 62, 65, 69, 71];

    fn fixture() -> (AudioClip, LyricsTimeline, TempoMap) {
        let tempo = TempoMap::constant(120.0).unwrap();
        let vocal: Vec<VocalNote> = PITCHES
            .iter()
            .enumerate()
            .map(|(i, &p)| VocalNote {
                onset: i as f64,
                duration: 1.0,
                pitch: p,
                syllable: format!("w{i}"),
                syllabic: Syllabic::Single,
            })
            .collect();
        let notes: Vec<ScoreNote> = vocal
            .iter()
            .map(|n| ScoreNote { onset: n.onset, duration: n.duration, pitch: n.pitch })
            .collect();
        let clip = synth_score_audio(&notes, &tempo).unwrap();
        let timeline = build_timeline(&vocal, &tempo, Some("w0 w1 w2 w3\nw4 w5 w6 w7")).unwrap();
        (clip, timeline, tempo)
    }

    fn fixture_ppg(frames: usize) -> PpgMatrix {
        let set = PhonemeSet::new(PhonemeSetName::Phoneme5);
        let labels: Vec<String> = (0..frames)
            .map(|k| set.labels()[(k / 12) % set.len()].clone())
            .collect();
        synthetic_ppg(&labels, &set, 0.8).unwrap()
    }

    fn tracker(set: FeatureSet, provider: Option<Box<dyn PpgProvider>>, ref_ppg: Option<&PpgMatrix>) -> (Tracker, AudioClip) {
        let (clip, timeline, tempo) = fixture();
        let featurizer = FrameFeaturizer::new(set, FeatureOptions::default());
        let reference = featurizer.extract(&clip, ref_ppg).unwrap();
        let n = reference.frames();
        let model = OfflineModel {
            reference,
            timeline,
            tempo,
            score_ref_path: WarpingPath::new((0..n).map(|i| (i, i)).collect()).unwrap(),
        };
        let cfg = TrackerConfig { record_path: true, ..TrackerConfig::default() };
        (Tracker::new(model, featurizer, provider, cfg).unwrap(), clip)
    }

    struct Silent(PhonemeSetName);

    impl PpgProvider for Silent {
        fn set(&self) -> PhonemeSetName {
            self.0
        }
        fn push_audio(&mut self, _: &[f32]) -> Result<(), TrackError> {
            Ok(())
        }
        fn row(&mut self, _: usize, _: Instant) -> Result<Option<Vec<f64>>, TrackError> {
            Ok(None)
        }
    }

    fn of(events: &[LyricEvent], unit: UnitLevel) -> Vec<&LyricEvent> {
        events.iter().filter(|e| e.unit == unit).collect()
    }

    #[test]
    fn self_alignment_fires_every_unit_once_in_order() {
        let (mut t, clip) = tracker(FeatureSet::Chroma, None, None);
        let (events, report) = track_clip(&mut t, &clip, Pacing::Fast).unwrap();
        let notes = of(&events, UnitLevel::Note);
        assert_eq!(notes.iter().map(|e| e.index).collect::<Vec<_>>(), (0..8).collect::<Vec<_>>());
        assert_eq!(of(&events, UnitLevel::Word).len(), 8);
        let lines = of(&events, UnitLevel::Line);
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[1].text, "w4 w5 w6 w7");
        for e in &notes {
            // detection happens within one chunk of the true onset
            let truth = e.index as f64 * 0.5;
            assert!(e.target_time >= truth - 0.2 && e.target_time <= truth + 0.4, "{e:?}");
            assert!(!e.fallback);
        }
        assert_eq!(t.frames_processed(), clip.len() / 640 + 1);
        assert_eq!(t.path().len(), t.frames_processed());
        assert_eq!(report.stalls, 0);
        assert_eq!(report.chunks as usize, clip.len().div_ceil(CHUNK_SAMPLES));
    }

    #[test]
    fn order_within_a_chunk_is_note_word_line() {
        let (mut t, clip) = tracker(FeatureSet::Chroma, None, None);
        let (events, _) = track_clip(&mut t, &clip, Pacing::Fast).unwrap();
        assert_eq!(events[0].unit, UnitLevel::Note);
        assert_eq!(events[1].unit, UnitLevel::Word);
        assert_eq!(events[2].unit, UnitLevel::Line);
        assert!(events.windows(2).all(|w| w[0].wall_time <= w[1].wall_time));
    }

    #[test]
    fn chroma_ppg_with_file_provider() {
        let (clip, _, _) = fixture();
        let frames = clip.len() / 640 + 1;
        let ppg = fixture_ppg(frames);
        let set = FeatureSet::ChromaPpg(PhonemeSetName::Phoneme5);
        let (mut t, clip) = tracker(set, Some(Box::new(FilePpgProvider::new(ppg.clone()))), Some(&ppg));
        let (events, report) = track_clip(&mut t, &clip, Pacing::Fast).unwrap();
        assert_eq!(of(&events, UnitLevel::Note).len(), 8);
        assert_eq!(report.stalls, 0);
    }

    #[test]
    fn missing_posteriors_fall_back_to_chroma() {
        let (clip, _, _) = fixture();
        let ppg = fixture_ppg(clip.len() / 640 + 1);
        let set = FeatureSet::ChromaPpg(PhonemeSetName::Phoneme5);
        let (mut t, clip) = tracker(set, Some(Box::new(Silent(PhonemeSetName::Phoneme5))), Some(&ppg));
        let (events, report) = track_clip(&mut t, &clip, Pacing::Fast).unwrap();
        let notes = of(&events, UnitLevel::Note);
        assert_eq!(notes.len(), 8);
        assert!(notes.iter().all(|e| e.fallback));
        assert_eq!(report.stalls, t.frames_processed());
    }

    #[test]
    fn ppg_only_stall_holds_last_row() {
        let (clip, _, _) = fixture();
        let ppg = fixture_ppg(clip.len() / 640 + 1);
        let set = FeatureSet::Ppg(PhonemeSetName::Phoneme5);
        let (mut t, clip) = tracker(set, Some(Box::new(Silent(PhonemeSetName::Phoneme5))), Some(&ppg));
        let (_, report) = track_clip(&mut t, &clip, Pacing::Fast).unwrap();
        assert_eq!(report.stalls, t.frames_processed());
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let (clip, timeline, tempo) = fixture();
        let ppg = fixture_ppg(clip.len() / 640 + 1);
        let chroma = FrameFeaturizer::new(FeatureSet::Chroma, FeatureOptions::default());
        let reference = chroma.extract(&clip, None).unwrap();
        let model = OfflineModel {
            score_ref_path: WarpingPath::new(vec![(0, 0), (1, 1)]).unwrap(),
            reference,
            timeline,
            tempo,
        };
        let set = FeatureSet::ChromaPpg(PhonemeSetName::Phoneme5);
        let cp = FrameFeaturizer::new(set, FeatureOptions::default());
        // dims differ from the reference
        assert!(matches!(
            Tracker::new(model.clone(), cp.clone(), None, TrackerConfig::default()),
            Err(TrackError::Config(_))
        ));
        let mut m2 = model.clone();
        m2.reference = cp.extract(&clip, Some(&ppg)).unwrap();
        assert!(matches!(
            Tracker::new(m2.clone(), cp.clone(), None, TrackerConfig::default()),
            Err(TrackError::Config(_))
        ));
        let wrong = Box::new(Silent(PhonemeSetName::Viseme14));
        assert!(matches!(
            Tracker::new(m2.clone(), cp.clone(), Some(wrong), TrackerConfig::default()),
            Err(TrackError::Config(_))
        ));
        let short = Box::new(FilePpgProvider::new(fixture_ppg(10)));
        let mut t = Tracker::new(m2, cp, Some(short), TrackerConfig::default()).unwrap();
        assert!(matches!(
            track_clip(&mut t, &clip, Pacing::Fast),
            Err(TrackError::ClockMismatch { got: 10, .. })
        ));

        let mut t = Tracker::new(model, chroma, None, TrackerConfig::default()).unwrap();
        let bad = AudioChunk { samples: vec![0.0; 100], start_sample: 5 };
        assert!(matches!(t.process_chunk(&bad, Instant::now()), Err(TrackError::Config(_))));
    }

    #[test]
    fn realtime_pacing_matches_fast_run() {
        let (mut a, clip) = tracker(FeatureSet::Chroma, None, None);
        let short = AudioClip::new(clip.samples()[..16000].to_vec()).unwrap();
        let (fast, _) = track_clip(&mut a, &short, Pacing::Fast).unwrap();
        let (mut b, _) = tracker(FeatureSet::Chroma, None, None);
        let start = Instant::now();
        let (slow, rep) = track_clip(&mut b, &short, Pacing::Realtime).unwrap();
        // seven chunks released 160 ms apart
        assert!(start.elapsed() >= Duration::from_millis(6 * 160));
        let strip = |v: &[LyricEvent]| v.iter().map(LyricEvent::without_timing).collect::<Vec<_>>();
        assert_eq!(strip(&fast), strip(&slow));
        assert_eq!(rep.chunks, 7);
    }

    #[test]
    fn pacing_parses() {
        assert_eq!("realtime".parse::<Pacing>().unwrap(), Pacing::Realtime);
        assert_eq!("fast".parse::<Pacing>().unwrap(), Pacing::Fast);
        assert!("slow".parse::<Pacing>().is_err());
    }
}
