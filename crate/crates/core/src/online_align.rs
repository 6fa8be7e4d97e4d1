//! Online time warping: incremental, windowed alignment of a streamed target
//! against a fully known reference.

use std::collections::VecDeque;
use std::ops::Range;

use thiserror::Error;

use crate::features::{distance_unchecked, FeatureMatrix, Metric};
use crate::offline_align::{DtwConfig, DEFAULT_STEPS};
use crate::timeline::{TimelineError, WarpingPath};

#[derive(Debug, Error)]
pub enum OltwError {
    #[error("empty input sequence")]
    EmptyInput,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("frame has {got} dims, reference has {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Timeline(#[from] TimelineError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct OltwConfig {
    pub window_seconds: f64,
    pub max_run_count: usize,
    /// Steps are (target, reference) increments; only the standard three
    /// are supported, with any positive weights.
    pub dtw: DtwConfig,
    pub metric: Metric,
    /// Normalize frontier costs by path length when choosing a direction.
    pub normalize: bool,
    /// Median filter width on the reported (display) position; 0 disables.
    /// The alignment path is never smoothed.
    pub median_width: usize,
    pub keep_history: bool,
}

impl Default for OltwConfig {
    fn default() -> Self {
        Self {
            window_seconds: 3.0,
            max_run_count: 3,
            dtw: DtwConfig {
                weights: vec![2.0, 1.0, 1.0],
                ..DtwConfig::default()
            },
            metric: Metric::Euclidean,
            normalize: true,
            median_width: 5,
            keep_history: true,
        }
    }
}

impl OltwConfig {
    pub fn window_frames(&self, frame_rate: u32) -> usize {
        (self.window_seconds * frame_rate as f64).round() as usize
    }

    /// Step weights as (diagonal, target-only, reference-only).
    fn weights(&self) -> Result<[f64; 3], OltwError> {
        self.dtw
            .validate()
            .map_err(|e| OltwError::Config(e.to_string()))?;
        if self.dtw.band.is_some() {
            return Err(OltwError::Config("bands do not apply online".into()));
        }
        let mut w = [f64::INFINITY; 3];
        for (s, &wt) in self.dtw.steps.iter().zip(&self.dtw.weights) {
            let k = DEFAULT_STEPS
                .iter()
                .position(|d| d == s)
                .ok_or_else(|| OltwError::Config(format!("unsupported online step {s:?}")))?;
            w[k] = wt;
        }
        Ok(w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Inc {
    /// Next target frame.
    Row,
    /// Next reference frame.
    Column,
    Both,
}

#[derive(Debug, Clone)]
struct Row {
    lo: usize,
    vals: Vec<f64>,
}

impl Row {
    fn hi(&self) -> usize {
        self.lo + self.vals.len()
    }
}

#[derive(Debug, Clone)]
struct TargetFrame {
    data: Vec<f64>,
    dims: Option<Range<usize>>,
}

/// Result of one target frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutput {
    /// Smoothed, non-decreasing reference position in frames, for display.
    pub position: f64,
    /// Non-decreasing unsmoothed position; the alignment path.
    pub aligned: usize,
    /// Unsmoothed frontier argmin on the newest row.
    pub raw_position: usize,
    /// The reference frontier has reached the last reference frame.
    pub at_end: bool,
}

#[derive(Debug, Clone)]
pub struct OltwState {
    reference: FeatureMatrix,
    cfg: OltwConfig,
    weights: [f64; 3],
    c: usize,
    t: usize,
    j: usize,
    rows: VecDeque<Row>,
    targets: VecDeque<TargetFrame>,
    row_base: usize,
    run_count: usize,
    previous: Option<Inc>,
    recent: VecDeque<usize>,
    reported: f64,
    aligned: usize,
    cells: u64,
    history: Option<Vec<(usize, usize)>>,
}

impl OltwState {
    pub fn new(reference: FeatureMatrix, cfg: OltwConfig) -> Result<Self, OltwError> {
        if reference.frames() == 0 {
            return Err(OltwError::EmptyInput);
        }
        let c = cfg.window_frames(reference.clock().frame_rate);
        if c < 2 {
            return Err(OltwError::Config(format!(
                "window of {c} frames; at least 2 required"
            )));
        }
        if cfg.max_run_count < 1 {
            return Err(OltwError::Config("max_run_count must be at least 1".into()));
        }
        let weights = cfg.weights()?;
        let history = cfg.keep_history.then(Vec::new);
        Ok(Self {
            reference,
            weights,
            c,
            t: 0,
            j: 0,
            rows: VecDeque::with_capacity(c + 2),
            targets: VecDeque::with_capacity(c + 2),
            row_base: 0,
            run_count: 0,
            previous: None,
            recent: VecDeque::with_capacity(cfg.median_width.max(1)),
            reported: 0.0,
            aligned: 0,
            cells: 0,
            history,
            cfg,
        })
    }

    pub fn window(&self) -> usize {
        self.c
    }

    /// Target frames consumed so far.
    pub fn frames_consumed(&self) -> usize {
        self.t
    }

    /// Current reference frontier column.
    pub fn frontier(&self) -> usize {
        self.j
    }

    pub fn position(&self) -> f64 {
        self.reported
    }

    pub fn aligned(&self) -> usize {
        self.aligned
    }

    pub fn at_end(&self) -> bool {
        self.j + 1 >= self.reference.frames()
    }

    pub fn cells_evaluated(&self) -> u64 {
        self.cells
    }

    /// Cells currently held in the accumulated-cost band.
    pub fn stored_cells(&self) -> usize {
        self.rows.iter().map(|r| r.vals.len()).sum()
    }

    pub fn reference(&self) -> &FeatureMatrix {
        &self.reference
    }

    /// (reference position, target frame) per step, if history is kept.
    pub fn history(&self) -> Option<&[(usize, usize)]> {
        self.history.as_deref()
    }

    pub fn step(&mut self, frame: &[f64]) -> Result<StepOutput, OltwError> {
        if frame.len() != self.reference.dims() {
            return Err(OltwError::DimensionMismatch {
                expected: self.reference.dims(),
                got: frame.len(),
            });
        }
        self.advance(TargetFrame {
            data: frame.to_vec(),
            dims: None,
        })
    }

    /// Steps with a frame that only covers `dims` of the reference features;
    /// distances for this frame use that slice of each reference frame.
    pub fn step_partial(&mut self, frame: &[f64], dims: Range<usize>) -> Result<StepOutput, OltwError> {
        if dims.end > self.reference.dims() || dims.is_empty() || frame.len() != dims.len() {
            return Err(OltwError::DimensionMismatch {
                expected: dims.len(),
                got: frame.len(),
            });
        }
        self.advance(TargetFrame {
            data: frame.to_vec(),
            dims: Some(dims),
        })
    }

    fn advance(&mut self, frame: TargetFrame) -> Result<StepOutput, OltwError> {
        self.targets.push_back(frame);
        self.add_row();
        self.t += 1;
        loop {
            let inc = self.get_inc();
            if Some(inc) == self.previous {
                self.run_count += 1;
            } else {
                self.run_count = 1;
            }
            if inc != Inc::Both {
                self.previous = Some(inc);
            }
            if inc == Inc::Row {
                break;
            }
            if self.at_end() {
                break;
            }
            self.add_column();
            if inc == Inc::Both {
                break;
            }
        }
        Ok(self.report())
    }

    fn report(&mut self) -> StepOutput {
        let r = self.t - 1;
        let row = self.row(r).expect("current row stored");
        let mut best = (f64::INFINITY, row.lo);
        for (i, &v) in row.vals.iter().enumerate() {
            let score = self.score(v, r, row.lo + i);
            if score < best.0 {
                best = (score, row.lo + i);
            }
        }
        let raw = best.1;
        let smoothed = if self.cfg.median_width > 1 {
            if self.recent.len() == self.cfg.median_width {
                self.recent.pop_front();
            }
            self.recent.push_back(raw);
            let mut v: Vec<usize> = self.recent.iter().copied().collect();
            v.sort_unstable();
            let k = v.len();
            if k % 2 == 1 {
                v[k / 2] as f64
            } else {
                (v[k / 2 - 1] + v[k / 2]) as f64 / 2.0
            }
        } else {
            raw as f64
        };
        self.reported = self.reported.max(smoothed);
        self.aligned = self.aligned.max(raw);
        if let Some(h) = &mut self.history {
            h.push((self.aligned, r));
        }
        StepOutput {
            position: self.reported,
            aligned: self.aligned,
            raw_position: raw,
            at_end: self.at_end(),
        }
    }

    #[inline]
    fn score(&self, acc: f64, k: usize, l: usize) -> f64 {
        if self.cfg.normalize {
            acc / (k + l + 1) as f64
        } else {
            acc
        }
    }

    fn row(&self, k: usize) -> Option<&Row> {
        k.checked_sub(self.row_base).and_then(|i| self.rows.get(i))
    }

    fn get(&self, k: usize, l: usize) -> f64 {
        match self.row(k) {
            Some(row) if l >= row.lo && l < row.hi() => row.vals[l - row.lo],
            _ => f64::INFINITY,
        }
    }

    fn evaluate(&mut self, k: usize, l: usize) -> f64 {
        self.cells += 1;
        let target = &self.targets[k - self.row_base];
        let reference = self.reference.row(l);
        let d = match &target.dims {
            None => distance_unchecked(&target.data, reference, self.cfg.metric),
            Some(r) => distance_unchecked(&target.data, &reference[r.clone()], self.cfg.metric),
        };
        if k == 0 && l == 0 {
            return d;
        }
        let [wd, wt, wr] = self.weights;
        let mut best = f64::INFINITY;
        if k > 0 && l > 0 {
            best = best.min(self.get(k - 1, l - 1) + wd * d);
        }
        if k > 0 {
            best = best.min(self.get(k - 1, l) + wt * d);
        }
        if l > 0 {
            best = best.min(self.get(k, l - 1) + wr * d);
        }
        best
    }

    fn add_row(&mut self) {
        let r = self.t;
        let lo = (self.j + 1).saturating_sub(self.c);
        self.rows.push_back(Row {
            lo,
            vals: Vec::with_capacity(self.c + 1),
        });
        for l in lo..=self.j {
            let v = self.evaluate(r, l);
            self.rows.back_mut().expect("row just pushed").vals.push(v);
        }
        while self.rows.len() > self.c + 1 {
            self.rows.pop_front();
            self.targets.pop_front();
            self.row_base += 1;
        }
    }

    fn add_column(&mut self) {
        self.j += 1;
        let r = self.t - 1;
        let first = (r + 1).saturating_sub(self.c).max(self.row_base);
        let keep_from = self.j.saturating_sub(self.c);
        for k in first..=r {
            let v = self.evaluate(k, self.j);
            let row = &mut self.rows[k - self.row_base];
            debug_assert_eq!(row.hi(), self.j);
            row.vals.push(v);
            if row.lo + self.c < keep_from {
                row.vals.drain(..keep_from - row.lo);
                row.lo = keep_from;
            }
        }
    }

    fn get_inc(&self) -> Inc {
        let r = self.t - 1;
        if r < self.c {
            return Inc::Both;
        }
        if self.run_count > self.cfg.max_run_count {
            return if self.previous == Some(Inc::Row) {
                Inc::Column
            } else {
                Inc::Row
            };
        }
        let mut best = (f64::INFINITY, r, self.j);
        if let Some(row) = self.row(r) {
            for (i, &v) in row.vals.iter().enumerate() {
                let s = self.score(v, r, row.lo + i);
                if s < best.0 {
                    best = (s, r, row.lo + i);
                }
            }
        }
        let first = (r + 1).saturating_sub(self.c).max(self.row_base);
        for k in first..r {
            let s = self.score(self.get(k, self.j), k, self.j);
            if s < best.0 {
                best = (s, k, self.j);
            }
        }
        if best.1 < r {
            Inc::Column
        } else if best.2 < self.j {
            Inc::Row
        } else {
            Inc::Both
        }
    }
}

/// Feeds every target frame through a fresh state; returns (reference,
/// target) pairs, one per target frame.
pub fn oltw_run(
    reference: &FeatureMatrix,
    target: &FeatureMatrix,
    cfg: &OltwConfig,
) -> Result<WarpingPath, OltwError> {
    if target.frames() == 0 {
        return Err(OltwError::EmptyInput);
    }
    let mut state = OltwState::new(reference.clone(), cfg.clone())?;
    let mut pairs = Vec::with_capacity(target.frames());
    for (t, frame) in target.rows().enumerate() {
        let out = state.step(frame)?;
        pairs.push((out.aligned, t));
    }
    Ok(WarpingPath::new(pairs)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureKind;
    use crate::offline_align::dtw_full;
    use crate::timeline::{FrameClock, PathMap};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn matrix(rows: &[Vec<f64>]) -> FeatureMatrix {
        FeatureMatrix::from_rows(rows, rows[0].len(), FeatureKind::Chroma, FrameClock::default())
            .unwrap()
    }

    /// Slowly drifting random chroma-like rows.
    fn walk(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec<f64>> {
        let mut v: Vec<f64> = (0..12).map(|_| rng.gen_range(0.0..1.0)).collect();
        (0..n)
            .map(|_| {
                for e in &mut v {
                    *e = (*e + rng.gen_range(-0.2..0.2)).clamp(0.0, 1.0);
                }
                v.clone()
            })
            .collect()
    }

    #[test]
    fn init_and_config() {
        let r = matrix(&vec![vec![0.0; 12]; 75]);
        let s = OltwState::new(r.clone(), OltwConfig::default()).unwrap();
        assert_eq!(s.window(), 75);
        assert_eq!(s.frontier(), 0);
        let tiny = OltwConfig {
            window_seconds: 0.04,
            ..OltwConfig::default()
        };
        assert!(matches!(OltwState::new(r.clone(), tiny), Err(OltwError::Config(_))));
        let runs = OltwConfig {
            max_run_count: 0,
            ..OltwConfig::default()
        };
        assert!(OltwState::new(r.clone(), runs).is_err());
        let steps = OltwConfig {
            dtw: DtwConfig {
                steps: vec![(1, 1), (2, 1)],
                weights: vec![1.0, 1.0],
                band: None,
            },
            ..OltwConfig::default()
        };
        assert!(OltwState::new(r.clone(), steps).is_err());
        let mut s = OltwState::new(r.clone(), OltwConfig::default()).unwrap();
        assert!(matches!(
            s.step(&[0.0; 3]),
            Err(OltwError::DimensionMismatch { .. })
        ));
        let empty = FeatureMatrix::new(vec![], 0, 12, FeatureKind::Chroma, FrameClock::default()).unwrap();
        assert!(matches!(
            OltwState::new(empty.clone(), OltwConfig::default()),
            Err(OltwError::EmptyInput)
        ));
        assert!(matches!(
            oltw_run(&r, &empty, &OltwConfig::default()),
            Err(OltwError::EmptyInput)
        ));
    }

    #[test]
    fn identical_sequences_track_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rows = walk(&mut rng, 200);
        let r = matrix(&rows);
        let mut s = OltwState::new(r.clone(), OltwConfig::default()).unwrap();
        for (k, f) in rows.iter().enumerate() {
            let out = s.step(f).unwrap();
            assert!(out.aligned.abs_diff(k) <= 1, "step {k}: {}", out.aligned);
            assert!(out.raw_position.abs_diff(k) <= 1, "step {k}");
            // a causal median of width 5 trails a steady ramp by two frames
            assert!(out.position <= k as f64 + 1.0 && out.position >= k as f64 - 3.0, "step {k}");
        }
        let path = oltw_run(&r, &r.slice(0..50), &OltwConfig::default()).unwrap();
        assert!(path.pairs().iter().all(|&(a, b)| a.abs_diff(b) <= 1));
    }

    #[test]
    fn constant_frames_stay_in_window() {
        let r = matrix(&vec![vec![0.5; 12]; 400]);
        let mut s = OltwState::new(r, OltwConfig::default()).unwrap();
        let mut last = 0.0;
        for t in 0..300 {
            let out = s.step(&[0.5; 12]).unwrap();
            assert!(out.position >= last);
            assert!(out.position <= (t + s.window()) as f64);
            last = out.position;
        }
    }

    #[test]
    fn half_tempo_reaches_end() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let rows = walk(&mut rng, 150);
        let r = matrix(&rows);
        let slow: Vec<Vec<f64>> = rows.iter().flat_map(|f| [f.clone(), f.clone()]).collect();
        let mut s = OltwState::new(r, OltwConfig::default()).unwrap();
        let mut out = None;
        for f in &slow {
            out = Some(s.step(f).unwrap());
        }
        let out = out.unwrap();
        assert!((out.position - 149.0).abs() <= 3.0, "{}", out.position);
    }

    #[test]
    fn silence_prefix_holds_start() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut rows = vec![vec![0.0; 12]; 10];
        rows.extend(walk(&mut rng, 100).into_iter().map(|mut v| {
            v[0] += 1.0;
            v
        }));
        let r = matrix(&rows);
        let mut target = vec![vec![0.0; 12]; 10];
        target.extend_from_slice(&rows);
        let t = matrix(&target);
        let path = oltw_run(&r, &t, &OltwConfig::default()).unwrap();
        for &(a, b) in &path.pairs()[..20] {
            if b < 20 {
                assert!(a < 10 + 3, "target {b} at ref {a}");
            }
        }
        for &(a, _) in &path.pairs()[..10] {
            assert!(a < 10);
        }
    }

    #[test]
    fn follows_tempo_warp_like_offline_dtw() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let rows = walk(&mut rng, 400);
        let r = matrix(&rows);
        // resample the reference at a time-varying rate in [0.8, 1.25]
        let mut target = Vec::new();
        let mut pos = 0.0f64;
        while pos < 399.0 {
            target.push(rows[pos.round() as usize].clone());
            let rate = 1.0 + 0.2 * (target.len() as f64 / 60.0).sin();
            pos += rate;
        }
        let t = matrix(&target);
        let online = oltw_run(&r, &t, &OltwConfig::default()).unwrap();
        let (offline, _) = dtw_full(&t, &r, Metric::Euclidean, &OltwConfig::default().dtw).unwrap();
        let oracle = PathMap::new(&offline);
        let mut devs: Vec<f64> = online
            .pairs()
            .iter()
            .map(|&(a, b)| (a as f64 - oracle.map(b as f64).unwrap()).abs())
            .collect();
        devs.sort_by(f64::total_cmp);
        let median = devs[devs.len() / 2];
        assert!(median <= 3.0, "median {median}");
        assert!(*devs.last().unwrap() <= 75.0);
    }

    #[test]
    fn linear_cell_bound_and_bounded_storage() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let rows = walk(&mut rng, 600);
        let r = matrix(&rows);
        let target: Vec<Vec<f64>> = rows.iter().step_by(2).cloned().collect();
        let cfg = OltwConfig {
            keep_history: false,
            ..OltwConfig::default()
        };
        let mut s = OltwState::new(r, cfg).unwrap();
        let c = s.window();
        let mut peak = 0;
        for f in &target {
            s.step(f).unwrap();
            peak = peak.max(s.stored_cells());
        }
        let (n, m) = (target.len() as u64, 600u64);
        assert!(s.cells_evaluated() <= (n + m) * c as u64 * 2);
        assert!(peak <= (c + 1) * (2 * c + 2), "peak {peak}");
        assert!(s.history().is_none());
    }

    #[test]
    fn end_of_reference_clamps() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let rows = walk(&mut rng, 40);
        let r = matrix(&rows);
        let mut s = OltwState::new(r, OltwConfig::default()).unwrap();
        let mut last = None;
        for f in rows.iter().chain(rows.iter()) {
            last = Some(s.step(f).unwrap());
        }
        let last = last.unwrap();
        assert!(last.at_end);
        assert!(last.position <= 39.0);
        assert_eq!(s.frames_consumed(), 80);
    }

    #[test]
    fn partial_steps_use_slice() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let rows = walk(&mut rng, 120);
        let r = matrix(&rows);
        let mut full = OltwState::new(r.clone(), OltwConfig::default()).unwrap();
        let mut part = OltwState::new(r, OltwConfig::default()).unwrap();
        for f in &rows {
            let a = full.step(f).unwrap();
            let b = part.step_partial(&f[..12], 0..12).unwrap();
            assert_eq!(a, b);
        }
        assert!(part.step_partial(&[0.0; 3], 10..13).is_err());
        assert!(part.step_partial(&[0.0; 2], 0..3).is_err());
    }

    #[test]
    fn deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let rows = walk(&mut rng, 200);
        let r = matrix(&rows);
        let t = matrix(&walk(&mut rng, 180));
        let a = oltw_run(&r, &t, &OltwConfig::default()).unwrap();
        let b = oltw_run(&r, &t, &OltwConfig::default()).unwrap();
        assert_eq!(a, b);
        assert!(a.pairs().windows(2).all(|w| w[1].0 >= w[0].0));
    }
}
