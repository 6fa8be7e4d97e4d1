//! Position arithmetic: frames, seconds, beats, and mapping positions through
//! warping paths.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TimelineError {
    #[error("position {pos} outside range [{lo}, {hi}]")]
    OutOfRange { pos: f64, lo: f64, hi: f64 },
    #[error("warping path is empty")]
    EmptyPath,
    #[error("warping path not monotone at index {0}")]
    NotMonotone(usize),
    #[error("step {step:?} at index {index} not in the allowed step set")]
    BadStep { index: usize, step: (isize, isize) },
    #[error("invalid tempo map: {0}")]
    BadTempo(String),
    #[error("invalid frame clock: {0}")]
    BadClock(String),
    #[error("path csv line {line}: {msg}")]
    Csv { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Relation between samples, hops and frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameClock {
    pub frame_rate: u32,
    pub sample_rate: u32,
    pub hop: u32,
}

impl Default for FrameClock {
    fn default() -> Self {
        Self {
            frame_rate: 25,
            sample_rate: 16_000,
            hop: 640,
        }
    }
}

impl FrameClock {
    pub fn new(frame_rate: u32, sample_rate: u32, hop: u32) -> Result<Self, TimelineError> {
        if frame_rate == 0 || sample_rate == 0 || hop == 0 {
            return Err(TimelineError::BadClock("all fields must be positive".into()));
        }
        if sample_rate % hop != 0 || sample_rate / hop != frame_rate {
            return Err(TimelineError::BadClock(format!(
                "{sample_rate} / {hop} != {frame_rate}"
            )));
        }
        Ok(Self {
            frame_rate,
            sample_rate,
            hop,
        })
    }

    pub fn frames_to_seconds(&self, frames: f64) -> f64 {
        frames / self.frame_rate as f64
    }

    pub fn seconds_to_frames(&self, seconds: f64) -> f64 {
        seconds * self.frame_rate as f64
    }

    /// Number of centered analysis frames for a clip of `n_samples`.
    pub fn frame_count(&self, n_samples: usize) -> usize {
        n_samples / self.hop as usize + 1
    }
}

pub fn frames_to_seconds(f: f64, clock: &FrameClock) -> f64 {
    clock.frames_to_seconds(f)
}

/// Monotone list of `(a, b)` frame pairs.
///
/// The constructor only enforces that the path is non-empty and that both
/// coordinates are non-decreasing, so sparse anchor paths are representable.
/// Paths produced by DTW additionally satisfy [`WarpingPath::validate_steps`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WarpingPath {
    pairs: Vec<(usize, usize)>,
}

pub const STANDARD_STEPS: [(usize, usize); 3] = [(1, 1), (1, 0), (0, 1)];

impl WarpingPath {
    pub fn new(pairs: Vec<(usize, usize)>) -> Result<Self, TimelineError> {
        if pairs.is_empty() {
            return Err(TimelineError::EmptyPath);
        }
        for (i, w) in pairs.windows(2).enumerate() {
            if w[1].0 < w[0].0 || w[1].1 < w[0].1 {
                return Err(TimelineError::NotMonotone(i + 1));
            }
        }
        Ok(Self { pairs })
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn first(&self) -> (usize, usize) {
        self.pairs[0]
    }

    pub fn last(&self) -> (usize, usize) {
        self.pairs[self.pairs.len() - 1]
    }

    /// Swap the roles of the two coordinates.
    pub fn transposed(&self) -> WarpingPath {
        WarpingPath {
            pairs: self.pairs.iter().map(|&(a, b)| (b, a)).collect(),
        }
    }

    /// Checks that the path starts at (0, 0) and each move is in `steps`.
    pub fn validate_steps(&self, steps: &[(usize, usize)]) -> Result<(), TimelineError> {
        if self.pairs[0] != (0, 0) {
            return Err(TimelineError::BadStep {
                index: 0,
                step: (self.pairs[0].0 as isize, self.pairs[0].1 as isize),
            });
        }
        for (i, w) in self.pairs.windows(2).enumerate() {
            let step = (w[1].0 - w[0].0, w[1].1 - w[0].1);
            if !steps.contains(&step) {
                return Err(TimelineError::BadStep {
                    index: i + 1,
                    step: (step.0 as isize, step.1 as isize),
                });
            }
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<(), TimelineError> {
        writeln!(w, "a,b")?;
        for (a, b) in &self.pairs {
            writeln!(w, "{a},{b}")?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self, TimelineError> {
        let mut pairs = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if i == 0 {
                if line != "a,b" {
                    return Err(TimelineError::Csv {
                        line: 1,
                        msg: format!("expected header `a,b`, got `{line}`"),
                    });
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let parse = |s: Option<&str>| -> Result<usize, TimelineError> {
                s.and_then(|s| s.trim().parse().ok()).ok_or(TimelineError::Csv {
                    line: i + 1,
                    msg: format!("bad row `{line}`"),
                })
            };
            let mut it = line.split(',');
            let a = parse(it.next())?;
            let b = parse(it.next())?;
            if it.next().is_some() {
                return Err(TimelineError::Csv {
                    line: i + 1,
                    msg: "too many columns".into(),
                });
            }
            pairs.push((a, b));
        }
        Self::new(pairs)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), TimelineError> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv(f)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, TimelineError> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_csv(f)
    }
}

/// Piecewise-linear lookup table built from a warping path.
///
/// Pairs sharing the same `a` collapse to one knot at the midpoint of their `b`
/// range. Lookups are `O(log n)`.
#[derive(Debug, Clone)]
pub struct PathMap {
    knots_a: Vec<f64>,
    knots_b: Vec<f64>,
}

impl PathMap {
    pub fn new(path: &WarpingPath) -> Self {
        let mut knots_a: Vec<f64> = Vec::new();
        let mut knots_b: Vec<f64> = Vec::new();
        let pairs = path.pairs();
        let mut i = 0;
        while i < pairs.len() {
            let a = pairs[i].0;
            let lo = pairs[i].1;
            let mut hi = lo;
            while i < pairs.len() && pairs[i].0 == a {
                hi = pairs[i].1;
                i += 1;
            }
            knots_a.push(a as f64);
            knots_b.push(0.5 * (lo as f64 + hi as f64));
        }
        Self { knots_a, knots_b }
    }

    /// Map built from the transposed path (b to a).
    pub fn inverse(path: &WarpingPath) -> Self {
        Self::new(&path.transposed())
    }

    pub fn span(&self) -> (f64, f64) {
        (self.knots_a[0], self.knots_a[self.knots_a.len() - 1])
    }

    pub fn map(&self, a_pos: f64) -> Result<f64, TimelineError> {
        let (lo, hi) = self.span();
        if !(a_pos >= lo && a_pos <= hi) {
            return Err(TimelineError::OutOfRange {
                pos: a_pos,
                lo,
                hi,
            });
        }
        Ok(self.map_clamped(a_pos))
    }

    /// Like [`PathMap::map`] but clamps positions outside the span.
    pub fn map_clamped(&self, a_pos: f64) -> f64 {
        let n = self.knots_a.len();
        if a_pos <= self.knots_a[0] {
            return self.knots_b[0];
        }
        if a_pos >= self.knots_a[n - 1] {
            return self.knots_b[n - 1];
        }
        // first knot with a > a_pos
        let hi = self.knots_a.partition_point(|&k| k <= a_pos);
        let lo = hi - 1;
        let (a0, a1) = (self.knots_a[lo], self.knots_a[hi]);
        let (b0, b1) = (self.knots_b[lo], self.knots_b[hi]);
        b0 + (b1 - b0) * (a_pos - a0) / (a1 - a0)
    }
}

pub fn map_through_path(path: &WarpingPath, a_pos: f64) -> Result<f64, TimelineError> {
    PathMap::new(path).map(a_pos)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TempoSegment {
    pub beat_start: f64,
    pub time_start: f64,
    pub bpm: f64,
}

/// Piecewise-constant tempo, beats measured in quarter notes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TempoMap {
    segments: Vec<TempoSegment>,
}

impl TempoMap {
    pub fn constant(bpm: f64) -> Result<Self, TimelineError> {
        Self::from_changes(&[(0.0, bpm)])
    }

    /// Build from `(beat, bpm)` change points; time anchors are integrated.
    pub fn from_changes(changes: &[(f64, f64)]) -> Result<Self, TimelineError> {
        if changes.is_empty() {
            return Err(TimelineError::BadTempo("no tempo segments".into()));
        }
        let mut segments: Vec<TempoSegment> = Vec::with_capacity(changes.len());
        for &(beat, bpm) in changes {
            if !(bpm > 0.0) || !bpm.is_finite() {
                return Err(TimelineError::BadTempo(format!("bpm {bpm} at beat {beat}")));
            }
            match segments.last_mut() {
                None => segments.push(TempoSegment {
                    beat_start: beat,
                    time_start: 0.0,
                    bpm,
                }),
                Some(prev) if beat == prev.beat_start => prev.bpm = bpm,
                Some(prev) if beat < prev.beat_start => {
                    return Err(TimelineError::BadTempo("segments not sorted".into()))
                }
                Some(prev) => {
                    let time_start = prev.time_start + (beat - prev.beat_start) * 60.0 / prev.bpm;
                    segments.push(TempoSegment {
                        beat_start: beat,
                        time_start,
                        bpm,
                    });
                }
            }
        }
        Ok(Self { segments })
    }

    /// Build from explicit segments, checking that each time anchor matches
    /// the integration of the previous segments.
    pub fn from_segments(segments: Vec<TempoSegment>) -> Result<Self, TimelineError> {
        let changes: Vec<(f64, f64)> = segments.iter().map(|s| (s.beat_start, s.bpm)).collect();
        let built = Self::from_changes(&changes)?;
        if built.segments.len() != segments.len() {
            return Err(TimelineError::BadTempo("duplicate segment starts".into()));
        }
        let offset = segments[0].time_start;
        let mut out = Vec::with_capacity(segments.len());
        for (b, g) in built.segments.iter().zip(&segments) {
            let expected = b.time_start + offset;
            if (expected - g.time_start).abs() > 1e-6 {
                return Err(TimelineError::BadTempo(format!(
                    "segment at beat {} starts at {} s, expected {} s",
                    g.beat_start, g.time_start, expected
                )));
            }
            out.push(TempoSegment {
                time_start: expected,
                ..*b
            });
        }
        Ok(Self { segments: out })
    }

    pub fn segments(&self) -> &[TempoSegment] {
        &self.segments
    }

    pub fn beat_at_time(&self, t: f64) -> Result<f64, TimelineError> {
        let first = self.segments[0];
        if t < first.time_start || !t.is_finite() {
            return Err(TimelineError::OutOfRange {
                pos: t,
                lo: first.time_start,
                hi: f64::INFINITY,
            });
        }
        let idx = self.segments.partition_point(|s| s.time_start <= t) - 1;
        let s = self.segments[idx];
        Ok(s.beat_start + (t - s.time_start) * s.bpm / 60.0)
    }

    pub fn time_at_beat(&self, beat: f64) -> Result<f64, TimelineError> {
        let first = self.segments[0];
        if beat < first.beat_start || !beat.is_finite() {
            return Err(TimelineError::OutOfRange {
                pos: beat,
                lo: first.beat_start,
                hi: f64::INFINITY,
            });
        }
        let idx = self.segments.partition_point(|s| s.beat_start <= beat) - 1;
        let s = self.segments[idx];
        Ok(s.time_start + (beat - s.beat_start) * 60.0 / s.bpm)
    }

    /// Multiplies the tempo by piecewise-constant `(beat, factor)` changes.
    pub fn scaled(&self, factors: &[(f64, f64)]) -> Result<TempoMap, TimelineError> {
        let mut points: Vec<f64> = self
            .segments
            .iter()
            .map(|s| s.beat_start)
            .chain(factors.iter().map(|f| f.0))
            .filter(|&b| b >= self.segments[0].beat_start)
            .collect();
        points.sort_by(|a, b| a.partial_cmp(b).unwrap());
        points.dedup();
        let factor_at = |beat: f64| -> f64 {
            factors
                .iter()
                .rev()
                .find(|f| f.0 <= beat)
                .map(|f| f.1)
                .unwrap_or(1.0)
        };
        let bpm_at = |beat: f64| -> f64 {
            let idx = self.segments.partition_point(|s| s.beat_start <= beat) - 1;
            self.segments[idx].bpm
        };
        let changes: Vec<(f64, f64)> = points
            .into_iter()
            .map(|b| (b, bpm_at(b) * factor_at(b)))
            .collect();
        TempoMap::from_changes(&changes)
    }
}

pub fn beat_at_time(tm: &TempoMap, t: f64) -> Result<f64, TimelineError> {
    tm.beat_at_time(t)
}
