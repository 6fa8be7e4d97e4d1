//! Offline score-to-reference alignment: DTW over a precomputed cost, DLNCO
//! onset features, memory-restricted multi-scale DTW, and pseudo-labels.

use std::borrow::Cow;

use log::{debug, warn};
use rayon::prelude::*;
use thiserror::Error;

use crate::audio::{synth_score_audio, AudioClip, AudioError};
use crate::features::{
    chroma, distance_unchecked, normalize_frame, stft, FeatureError, FeatureKind, FeatureMatrix,
    Metric, Norm,
};
use crate::score::{build_timeline, LyricsTimeline, ParsedScore, ScoreError};
use crate::timeline::{FrameClock, PathMap, TimelineError, WarpingPath};

#[derive(Debug, Error)]
pub enum AlignError {
    #[error("empty input sequence")]
    EmptyInput,
    #[error("constraint band does not connect start and end")]
    BandInfeasible,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Timeline(#[from] TimelineError),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Score(#[from] ScoreError),
}

pub const DEFAULT_STEPS: [(usize, usize); 3] = [(1, 1), (1, 0), (0, 1)];

/// Per-row inclusive column ranges of admissible cells.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Band {
    ranges: Vec<(usize, usize)>,
}

impl Band {
    pub fn new(ranges: Vec<(usize, usize)>) -> Result<Self, AlignError> {
        if ranges.is_empty() {
            return Err(AlignError::EmptyInput);
        }
        if let Some(i) = ranges.iter().position(|&(lo, hi)| lo > hi) {
            return Err(AlignError::Config(format!("band row {i} has lo > hi")));
        }
        Ok(Self { ranges })
    }

    pub fn full(n: usize, m: usize) -> Self {
        Self {
            ranges: vec![(0, m.saturating_sub(1)); n],
        }
    }

    pub fn rows(&self) -> usize {
        self.ranges.len()
    }

    pub fn range(&self, row: usize) -> (usize, usize) {
        self.ranges[row]
    }

    pub fn cells(&self) -> usize {
        self.ranges.iter().map(|&(lo, hi)| hi - lo + 1).sum()
    }

    pub fn contains(&self, n: usize, m: usize) -> bool {
        self.ranges
            .get(n)
            .is_some_and(|&(lo, hi)| lo <= m && m <= hi)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DtwConfig {
    /// Steps in tie-break preference order.
    pub steps: Vec<(usize, usize)>,
    pub weights: Vec<f64>,
    pub band: Option<Band>,
}

impl Default for DtwConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS.to_vec(),
            weights: vec![1.0; 3],
            band: None,
        }
    }
}

impl DtwConfig {
    pub fn validate(&self) -> Result<(), AlignError> {
        if !self.steps.contains(&(1, 1)) {
            return Err(AlignError::Config("step set must contain (1,1)".into()));
        }
        if self.steps.contains(&(0, 0)) {
            return Err(AlignError::Config("(0,0) is not a step".into()));
        }
        if self.weights.len() != self.steps.len() {
            return Err(AlignError::Config("one weight per step required".into()));
        }
        if self.weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(AlignError::Config("step weights must be positive".into()));
        }
        Ok(())
    }

    fn with_band(&self, band: Option<Band>) -> Self {
        Self {
            steps: self.steps.clone(),
            weights: self.weights.clone(),
            band,
        }
    }
}

/// Local cost between frame `n` of X and frame `m` of Y.
pub trait PairCost: Sync {
    fn len_x(&self) -> usize;
    fn len_y(&self) -> usize;
    fn cost(&self, n: usize, m: usize) -> f64;
}

/// A cost that can be rebuilt on mean-pooled features.
pub trait PoolableCost: PairCost + Sized {
    fn pooled(&self, factor: usize) -> Self;
}

/// Frame distance between two feature matrices under one metric.
#[derive(Debug, Clone)]
pub struct MatrixCost<'a> {
    x: Cow<'a, FeatureMatrix>,
    y: Cow<'a, FeatureMatrix>,
    metric: Metric,
}

impl<'a> MatrixCost<'a> {
    pub fn new(x: &'a FeatureMatrix, y: &'a FeatureMatrix, metric: Metric) -> Result<Self, AlignError> {
        if x.dims() != y.dims() {
            return Err(FeatureError::DimensionMismatch(x.dims(), y.dims()).into());
        }
        Ok(Self {
            x: Cow::Borrowed(x),
            y: Cow::Borrowed(y),
            metric,
        })
    }
}

impl PairCost for MatrixCost<'_> {
    fn len_x(&self) -> usize {
        self.x.frames()
    }
    fn len_y(&self) -> usize {
        self.y.frames()
    }
    fn cost(&self, n: usize, m: usize) -> f64 {
        distance_unchecked(self.x.row(n), self.y.row(m), self.metric)
    }
}

impl PoolableCost for MatrixCost<'_> {
    fn pooled(&self, factor: usize) -> Self {
        Self {
            x: Cow::Owned(self.x.mean_pooled(factor)),
            y: Cow::Owned(self.y.mean_pooled(factor)),
            metric: self.metric,
        }
    }
}

impl<F: Fn(usize, usize) -> f64 + Sync> PairCost for (usize, usize, F) {
    fn len_x(&self) -> usize {
        self.0
    }
    fn len_y(&self) -> usize {
        self.1
    }
    fn cost(&self, n: usize, m: usize) -> f64 {
        (self.2)(n, m)
    }
}

struct BandStore<'b> {
    band: &'b Band,
    offsets: Vec<usize>,
}

impl<'b> BandStore<'b> {
    fn new(band: &'b Band) -> Self {
        let mut offsets = Vec::with_capacity(band.rows() + 1);
        let mut acc = 0;
        offsets.push(0);
        for &(lo, hi) in &band.ranges {
            acc += hi - lo + 1;
            offsets.push(acc);
        }
        Self { band, offsets }
    }

    #[inline]
    fn index(&self, n: usize, m: usize) -> Option<usize> {
        let (lo, hi) = self.band.ranges[n];
        (lo <= m && m <= hi).then(|| self.offsets[n] + m - lo)
    }
}

/// Optimal warping path and its accumulated cost for an arbitrary local cost.
///
/// D(0,0) = d(0,0); every step adds `weight * d` of the cell it lands on.
/// Equal candidates resolve in step order.
pub fn dtw_with_cost<C: PairCost + ?Sized>(
    cost: &C,
    cfg: &DtwConfig,
) -> Result<(WarpingPath, f64), AlignError> {
    cfg.validate()?;
    let (n, m) = (cost.len_x(), cost.len_y());
    if n == 0 || m == 0 {
        return Err(AlignError::EmptyInput);
    }
    let full;
    let band = match &cfg.band {
        Some(b) => {
            if b.rows() != n || b.ranges.iter().any(|&(_, hi)| hi >= m) {
                return Err(AlignError::Config(format!(
                    "band shape does not fit a {n}x{m} problem"
                )));
            }
            b
        }
        None => {
            full = Band::full(n, m);
            &full
        }
    };
    if !band.contains(0, 0) || !band.contains(n - 1, m - 1) {
        return Err(AlignError::BandInfeasible);
    }
    let store = BandStore::new(band);

    let local: Vec<f64> = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| {
            let (lo, hi) = band.ranges[i];
            (lo..=hi).map(move |j| cost.cost(i, j))
        })
        .collect();

    let total = store.offsets[n];
    let mut acc = vec![f64::INFINITY; total];
    let mut choice = vec![u8::MAX; total];
    for i in 0..n {
        let (lo, hi) = band.ranges[i];
        for j in lo..=hi {
            let k = store.offsets[i] + j - lo;
            let d = local[k];
            if i == 0 && j == 0 {
                acc[k] = d;
                continue;
            }
            let mut best = f64::INFINITY;
            let mut pick = u8::MAX;
            for (s, (&(di, dj), &w)) in cfg.steps.iter().zip(&cfg.weights).enumerate() {
                if di > i || dj > j {
                    continue;
                }
                if let Some(p) = store.index(i - di, j - dj) {
                    let cand = acc[p] + w * d;
                    if cand < best {
                        best = cand;
                        pick = s as u8;
                    }
                }
            }
            acc[k] = best;
            choice[k] = pick;
        }
    }

    let end = store.index(n - 1, m - 1).expect("end in band");
    if !acc[end].is_finite() {
        return Err(AlignError::BandInfeasible);
    }
    let mut pairs = vec![(n - 1, m - 1)];
    let (mut i, mut j) = (n - 1, m - 1);
    while (i, j) != (0, 0) {
        let k = store.index(i, j).expect("path stays in band");
        let (di, dj) = cfg.steps[choice[k] as usize];
        i -= di;
        j -= dj;
        pairs.push((i, j));
    }
    pairs.reverse();
    Ok((WarpingPath::new(pairs)?, acc[end]))
}

/// DTW between two feature sequences.
pub fn dtw_full(
    x: &FeatureMatrix,
    y: &FeatureMatrix,
    metric: Metric,
    cfg: &DtwConfig,
) -> Result<(WarpingPath, f64), AlignError> {
    if x.frames() == 0 || y.frames() == 0 {
        return Err(AlignError::EmptyInput);
    }
    dtw_with_cost(&MatrixCost::new(x, y, metric)?, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DlncoParams {
    /// Seconds.
    pub norm_window: f64,
    /// Frames.
    pub decay_length: usize,
    pub floor: f64,
}

impl Default for DlncoParams {
    fn default() -> Self {
        Self {
            norm_window: 1.0,
            decay_length: 10,
            floor: 1e-4,
        }
    }
}

/// Decaying locally adaptive normalized chroma onsets from raw chroma.
pub fn dlnco(chroma_raw: &FeatureMatrix, p: &DlncoParams) -> Result<FeatureMatrix, AlignError> {
    if !(p.norm_window > 0.0 && p.decay_length > 0 && p.floor > 0.0) {
        return Err(AlignError::Config("DLNCO parameters must be positive".into()));
    }
    let (n, d) = (chroma_raw.frames(), chroma_raw.dims());
    let half = (p.norm_window * chroma_raw.clock().frame_rate as f64 / 2.0).floor() as usize;
    let kernel: Vec<f64> = (0..p.decay_length)
        .map(|i| (1.0 - i as f64 / p.decay_length as f64).sqrt())
        .collect();
    let mut out = vec![0.0f64; n * d];
    let mut onset = vec![0.0; n];
    let mut norm = vec![0.0; n];
    for c in 0..d {
        for t in 0..n {
            onset[t] = if t == 0 {
                0.0
            } else {
                (chroma_raw.row(t)[c] - chroma_raw.row(t - 1)[c]).max(0.0)
            };
        }
        for t in 0..n {
            let lo = t.saturating_sub(half);
            let hi = (t + half).min(n - 1);
            let peak = onset[lo..=hi].iter().cloned().fold(0.0, f64::max);
            norm[t] = onset[t] / peak.max(p.floor);
        }
        for t in 0..n {
            if norm[t] == 0.0 {
                continue;
            }
            for (i, k) in kernel.iter().enumerate() {
                if t + i >= n {
                    break;
                }
                let cell = &mut out[(t + i) * d + c];
                *cell = cell.max(norm[t] * k);
            }
        }
    }
    Ok(FeatureMatrix::new(out, n, d, FeatureKind::Dlnco, chroma_raw.clock())?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostWeights {
    pub chroma: f64,
    pub dlnco: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            chroma: 1.0,
            dlnco: 1.0,
        }
    }
}

/// Chroma rows scaled to unit length; near-silent rows become the uniform
/// vector so silence matches silence instead of matching everything.
fn unit_chroma(raw: &FeatureMatrix) -> Result<FeatureMatrix, AlignError> {
    let norms: Vec<f64> = raw
        .rows()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let peak = norms.iter().cloned().fold(0.0, f64::max);
    let threshold = peak * 1e-4;
    let uniform = 1.0 / (raw.dims() as f64).sqrt();
    let mut data = Vec::with_capacity(raw.data().len());
    for (row, &nrm) in raw.rows().zip(&norms) {
        if nrm <= threshold || nrm == 0.0 {
            data.extend(std::iter::repeat_n(uniform, raw.dims()));
        } else {
            data.extend(normalize_frame(row, Norm::L2));
        }
    }
    Ok(FeatureMatrix::new(data, raw.frames(), raw.dims(), raw.kind(), raw.clock())?)
}

/// Chroma cosine plus weighted DLNCO euclidean cost.
#[derive(Debug, Clone)]
pub struct OfflineCost {
    x_chroma: FeatureMatrix,
    y_chroma: FeatureMatrix,
    x_dlnco: FeatureMatrix,
    y_dlnco: FeatureMatrix,
    weights: CostWeights,
}

impl OfflineCost {
    pub fn new(
        x_chroma: &FeatureMatrix,
        y_chroma: &FeatureMatrix,
        x_dlnco: &FeatureMatrix,
        y_dlnco: &FeatureMatrix,
        weights: CostWeights,
    ) -> Result<Self, AlignError> {
        if x_chroma.frames() != x_dlnco.frames() {
            return Err(AlignError::LengthMismatch(x_chroma.frames(), x_dlnco.frames()));
        }
        if y_chroma.frames() != y_dlnco.frames() {
            return Err(AlignError::LengthMismatch(y_chroma.frames(), y_dlnco.frames()));
        }
        if x_chroma.clock() != y_chroma.clock() {
            return Err(AlignError::Config("feature clocks differ".into()));
        }
        if x_chroma.dims() != y_chroma.dims() {
            return Err(FeatureError::DimensionMismatch(x_chroma.dims(), y_chroma.dims()).into());
        }
        if x_dlnco.dims() != y_dlnco.dims() {
            return Err(FeatureError::DimensionMismatch(x_dlnco.dims(), y_dlnco.dims()).into());
        }
        if x_chroma.frames() == 0 || y_chroma.frames() == 0 {
            return Err(AlignError::EmptyInput);
        }
        Ok(Self {
            x_chroma: unit_chroma(x_chroma)?,
            y_chroma: unit_chroma(y_chroma)?,
            x_dlnco: x_dlnco.clone(),
            y_dlnco: y_dlnco.clone(),
            weights,
        })
    }

    /// Builds both feature kinds from raw chroma.
    pub fn from_chroma(
        x_chroma: &FeatureMatrix,
        y_chroma: &FeatureMatrix,
        params: &DlncoParams,
        weights: CostWeights,
    ) -> Result<Self, AlignError> {
        let xd = dlnco(x_chroma, params)?;
        let yd = dlnco(y_chroma, params)?;
        Self::new(x_chroma, y_chroma, &xd, &yd, weights)
    }

    pub fn chroma_term(&self, n: usize, m: usize) -> f64 {
        distance_unchecked(self.x_chroma.row(n), self.y_chroma.row(m), Metric::Cosine)
    }

    pub fn dlnco_term(&self, n: usize, m: usize) -> f64 {
        distance_unchecked(self.x_dlnco.row(n), self.y_dlnco.row(m), Metric::Euclidean)
    }
}

impl PairCost for OfflineCost {
    fn len_x(&self) -> usize {
        self.x_chroma.frames()
    }
    fn len_y(&self) -> usize {
        self.y_chroma.frames()
    }
    fn cost(&self, n: usize, m: usize) -> f64 {
        self.weights.chroma * self.chroma_term(n, m) + self.weights.dlnco * self.dlnco_term(n, m)
    }
}

impl PoolableCost for OfflineCost {
    fn pooled(&self, factor: usize) -> Self {
        Self {
            x_chroma: self.x_chroma.mean_pooled(factor),
            y_chroma: self.y_chroma.mean_pooled(factor),
            x_dlnco: self.x_dlnco.mean_pooled(factor),
            y_dlnco: self.y_dlnco.mean_pooled(factor),
            weights: self.weights,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MrmsConfig {
    /// Downsampling factors, coarse to fine.
    pub levels: Vec<usize>,
    /// Band widening, in frames of each level.
    pub margin: usize,
    /// Step set and weights; any band here is ignored.
    pub dtw: DtwConfig,
}

impl Default for MrmsConfig {
    fn default() -> Self {
        Self {
            levels: vec![32, 8, 1],
            margin: 25,
            dtw: DtwConfig::default(),
        }
    }
}

/// Projects a path found at `from` resolution onto an `n x m` grid at `to`
/// resolution and widens it by `margin` cells in both directions.
pub fn project_band(
    path: &WarpingPath,
    from: usize,
    to: usize,
    n: usize,
    m: usize,
    margin: usize,
) -> Band {
    let mut lo = vec![usize::MAX; n];
    let mut hi = vec![0usize; n];
    let fine = |k: usize, len: usize| (k / to).min(len - 1);
    for &(a, b) in path.pairs() {
        let (r0, r1) = (fine(a * from, n), fine((a + 1) * from - 1, n));
        let (c0, c1) = (fine(b * from, m), fine((b + 1) * from - 1, m));
        for r in r0..=r1 {
            lo[r] = lo[r].min(c0);
            hi[r] = hi[r].max(c1);
        }
    }
    for r in 0..n {
        if lo[r] == usize::MAX {
            (lo[r], hi[r]) = if r > 0 { (lo[r - 1], hi[r - 1]) } else { (0, 0) };
        }
    }
    let ranges = (0..n)
        .map(|r| {
            let l = lo[r.saturating_sub(margin)..=(r + margin).min(n - 1)]
                .iter()
                .min()
                .copied()
                .unwrap_or(0);
            let h = hi[r.saturating_sub(margin)..=(r + margin).min(n - 1)]
                .iter()
                .max()
                .copied()
                .unwrap_or(m - 1);
            (l.saturating_sub(margin), (h + margin).min(m - 1))
        })
        .collect();
    Band { ranges }
}

/// Coarse-to-fine DTW. Each level runs inside the widened projection of the
/// previous level's path; a level whose full matrix is no larger than a band
/// of that margin runs unconstrained.
pub fn mrms_dtw<C: PoolableCost>(
    cost: &C,
    cfg: &MrmsConfig,
) -> Result<(WarpingPath, f64), AlignError> {
    cfg.dtw.validate()?;
    let (n, m) = (cost.len_x(), cost.len_y());
    if n == 0 || m == 0 {
        return Err(AlignError::EmptyInput);
    }
    let mut levels: Vec<usize> = cfg.levels.iter().copied().filter(|&f| f > 1).collect();
    levels.sort_unstable_by(|a, b| b.cmp(a));
    levels.dedup();
    levels.retain(|&f| n.div_ceil(f) >= 2 && m.div_ceil(f) >= 2);
    levels.push(1);

    let mut prev: Option<(WarpingPath, usize)> = None;
    let mut result = None;
    for &f in &levels {
        let pooled;
        let level_cost: &C = if f == 1 {
            cost
        } else {
            pooled = cost.pooled(f);
            &pooled
        };
        let (ln, lm) = (level_cost.len_x(), level_cost.len_y());
        let fits = ln * lm <= (2 * cfg.margin + 1) * (ln + lm);
        let out = match (&prev, fits) {
            (Some((path, pf)), false) => {
                let run = |margin: usize| {
                    let band = project_band(path, *pf, f, ln, lm, margin);
                    debug!("level {f}: {}x{} band cells {}", ln, lm, band.cells());
                    dtw_with_cost(level_cost, &cfg.dtw.with_band(Some(band)))
                };
                match run(cfg.margin) {
                    Err(AlignError::BandInfeasible) => {
                        warn!("band infeasible at level {f}, retrying with doubled margin");
                        run(cfg.margin * 2)?
                    }
                    other => other?,
                }
            }
            _ => dtw_with_cost(level_cost, &cfg.dtw.with_band(None))?,
        };
        prev = Some((out.0.clone(), f));
        result = Some(out);
    }
    Ok(result.expect("at least one level"))
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct OfflineConfig {
    pub dlnco: DlncoParams,
    pub weights: CostWeights,
    pub mrms: MrmsConfig,
}

/// Aligns synthesized score audio (X) to the reference recording (Y).
pub fn align_audio(
    score_audio: &AudioClip,
    reference: &AudioClip,
    cfg: &OfflineConfig,
) -> Result<WarpingPath, AlignError> {
    let x = chroma(&stft(score_audio)?);
    let y = chroma(&stft(reference)?);
    let cost = OfflineCost::from_chroma(&x, &y, &cfg.dlnco, cfg.weights)?;
    Ok(mrms_dtw(&cost, &cfg.mrms)?.0)
}

/// Fills reference times from a score(a) to reference(b) frame path. Words
/// and lines take the time of their first note.
pub fn generate_pseudo_labels(
    timeline: &LyricsTimeline,
    score_ref_path: &WarpingPath,
    clock: &FrameClock,
) -> Result<LyricsTimeline, AlignError> {
    let map = PathMap::new(score_ref_path);
    let fr = clock.frame_rate as f64;
    let mut out = timeline.clone();
    for line in &mut out.lines {
        for word in &mut line.words {
            for note in &mut word.notes {
                note.ref_time = Some(map.map(note.score_time * fr)? / fr);
            }
            word.ref_time = word.notes.first().and_then(|n| n.ref_time);
        }
        line.ref_time = line.words.first().and_then(|w| w.ref_time);
    }
    Ok(out)
}

/// Output of the offline phase.
#[derive(Debug, Clone)]
pub struct OfflineArtifacts {
    pub score_audio: AudioClip,
    pub path: WarpingPath,
    pub timeline: LyricsTimeline,
}

/// Synthesizes the score, aligns it to the reference and labels the lyrics.
pub fn prepare(
    score: &ParsedScore,
    lyrics: Option<&str>,
    reference: &AudioClip,
    cfg: &OfflineConfig,
) -> Result<OfflineArtifacts, AlignError> {
    let timeline = build_timeline(&score.vocal, &score.tempo, lyrics)?;
    let score_audio = synth_score_audio(&score.all_notes(), &score.tempo)?;
    let path = align_audio(&score_audio, reference, cfg)?;
    let timeline = generate_pseudo_labels(&timeline, &path, &FrameClock::default())?;
    Ok(OfflineArtifacts {
        score_audio,
        path,
        timeline,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn clock() -> FrameClock {
        FrameClock::default()
    }

    fn matrix(rows: &[Vec<f64>]) -> FeatureMatrix {
        FeatureMatrix::from_rows(rows, rows[0].len(), FeatureKind::Chroma, clock()).unwrap()
    }

    fn random_matrix(rng: &mut ChaCha8Rng, n: usize, d: usize) -> FeatureMatrix {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.gen_range(0.0..1.0)).collect())
            .collect();
        matrix(&rows)
    }

    /// Minimum weighted path cost by exhaustive enumeration.
    fn brute_force<C: PairCost>(c: &C, cfg: &DtwConfig) -> f64 {
        fn walk<C: PairCost>(c: &C, cfg: &DtwConfig, i: usize, j: usize, acc: f64, best: &mut f64) {
            if (i, j) == (c.len_x() - 1, c.len_y() - 1) {
                *best = best.min(acc);
                return;
            }
            for (&(di, dj), &w) in cfg.steps.iter().zip(&cfg.weights) {
                let (ni, nj) = (i + di, j + dj);
                if ni < c.len_x() && nj < c.len_y() {
                    walk(c, cfg, ni, nj, acc + w * c.cost(ni, nj), best);
                }
            }
        }
        let mut best = f64::INFINITY;
        walk(c, cfg, 0, 0, c.cost(0, 0), &mut best);
        best
    }

    fn path_cost<C: PairCost>(c: &C, cfg: &DtwConfig, path: &WarpingPath) -> f64 {
        let p = path.pairs();
        let mut acc = c.cost(p[0].0, p[0].1);
        for w in p.windows(2) {
            let step = (w[1].0 - w[0].0, w[1].1 - w[0].1);
            let s = cfg.steps.iter().position(|&x| x == step).unwrap();
            acc += cfg.weights[s] * c.cost(w[1].0, w[1].1);
        }
        acc
    }

    #[test]
    fn identity_gives_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_matrix(&mut rng, 12, 5);
        let (path, cost) = dtw_full(&x, &x, Metric::Euclidean, &DtwConfig::default()).unwrap();
        assert_eq!(cost, 0.0);
        let diag: Vec<_> = (0..12).map(|i| (i, i)).collect();
        assert_eq!(path.pairs(), diag.as_slice());
    }

    #[test]
    fn single_frame_against_many() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_matrix(&mut rng, 1, 4);
        let y = random_matrix(&mut rng, 7, 4);
        let (path, _) = dtw_full(&x, &y, Metric::Euclidean, &DtwConfig::default()).unwrap();
        assert_eq!(path.len(), 7);
        assert!(path.pairs().iter().enumerate().all(|(k, &p)| p == (0, k)));
    }

    #[test]
    fn matches_brute_force_6x7() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = DtwConfig::default();
        for _ in 0..30 {
            let x = random_matrix(&mut rng, 6, 3);
            let y = random_matrix(&mut rng, 7, 3);
            let (path, cost) = dtw_full(&x, &y, Metric::Euclidean, &cfg).unwrap();
            let c = MatrixCost::new(&x, &y, Metric::Euclidean).unwrap();
            assert!((cost - brute_force(&c, &cfg)).abs() < 1e-9);
            assert!((path_cost(&c, &cfg, &path) - cost).abs() < 1e-9);
            path.validate_steps(&DEFAULT_STEPS).unwrap();
        }
    }

    #[test]
    fn weighted_and_custom_steps_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfgs = [
            DtwConfig {
                steps: DEFAULT_STEPS.to_vec(),
                weights: vec![2.0, 1.0, 1.0],
                band: None,
            },
            DtwConfig {
                steps: vec![(1, 1), (2, 1), (1, 2)],
                weights: vec![1.0, 1.5, 1.5],
                band: None,
            },
        ];
        for cfg in &cfgs {
            for _ in 0..10 {
                let x = random_matrix(&mut rng, 7, 2);
                let y = random_matrix(&mut rng, 8, 2);
                let c = MatrixCost::new(&x, &y, Metric::Euclidean).unwrap();
                let want = brute_force(&c, cfg);
                match dtw_with_cost(&c, cfg) {
                    Ok((_, cost)) => assert!((cost - want).abs() < 1e-9),
                    Err(AlignError::BandInfeasible) => assert!(want.is_infinite()),
                    Err(e) => panic!("{e}"),
                }
            }
        }
    }

    #[test]
    fn tie_break_prefers_diagonal() {
        let zero = (3usize, 3usize, |_: usize, _: usize| 0.0);
        let (path, _) = dtw_with_cost(&zero, &DtwConfig::default()).unwrap();
        assert_eq!(path.pairs(), &[(0, 0), (1, 1), (2, 2)]);
        let zero = (2usize, 4usize, |_: usize, _: usize| 0.0);
        let (path, _) = dtw_with_cost(&zero, &DtwConfig::default()).unwrap();
        assert_eq!(path.pairs(), &[(0, 0), (0, 1), (0, 2), (1, 3)]);
    }

    #[test]
    fn config_and_band_errors() {
        let c = (3usize, 3usize, |_: usize, _: usize| 1.0);
        let bad = DtwConfig {
            steps: vec![(1, 0), (0, 1)],
            weights: vec![1.0, 1.0],
            band: None,
        };
        assert!(matches!(dtw_with_cost(&c, &bad), Err(AlignError::Config(_))));
        let neg = DtwConfig {
            weights: vec![1.0, -1.0, 1.0],
            ..DtwConfig::default()
        };
        assert!(dtw_with_cost(&c, &neg).is_err());
        let band = Band::new(vec![(0, 0), (0, 0), (0, 0)]).unwrap();
        let cfg = DtwConfig::default().with_band(Some(band));
        assert!(matches!(dtw_with_cost(&c, &cfg), Err(AlignError::BandInfeasible)));
        let band = Band::new(vec![(0, 0), (2, 2), (2, 2)]).unwrap();
        let cfg = DtwConfig::default().with_band(Some(band));
        assert!(matches!(dtw_with_cost(&c, &cfg), Err(AlignError::BandInfeasible)));
        let empty = (0usize, 3usize, |_: usize, _: usize| 1.0);
        assert!(matches!(
            dtw_with_cost(&empty, &DtwConfig::default()),
            Err(AlignError::EmptyInput)
        ));
    }

    #[test]
    fn banded_equals_full_when_band_contains_optimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_matrix(&mut rng, 30, 4);
        let y = random_matrix(&mut rng, 34, 4);
        let c = MatrixCost::new(&x, &y, Metric::Euclidean).unwrap();
        let (path, cost) = dtw_with_cost(&c, &DtwConfig::default()).unwrap();
        let band = project_band(&path, 1, 1, 30, 34, 2);
        let (p2, c2) = dtw_with_cost(&c, &DtwConfig::default().with_band(Some(band))).unwrap();
        assert_eq!(p2, path);
        assert_eq!(c2, cost);
    }

    fn step_chroma(n: usize, at: usize, class: usize) -> FeatureMatrix {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|t| {
                let mut r = vec![0.0; 12];
                if t >= at {
                    r[class] = 1.0;
                }
                r
            })
            .collect();
        matrix(&rows)
    }

    #[test]
    fn dlnco_constant_is_zero() {
        let x = matrix(&vec![vec![0.3; 12]; 40]);
        let d = dlnco(&x, &DlncoParams::default()).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.0));
        assert_eq!(d.kind(), FeatureKind::Dlnco);
    }

    #[test]
    fn dlnco_step_decays() {
        let d = dlnco(&step_chroma(40, 10, 3), &DlncoParams::default()).unwrap();
        for t in 0..40 {
            let want = if (10..20).contains(&t) {
                (1.0 - (t - 10) as f64 / 10.0).sqrt()
            } else {
                0.0
            };
            assert!((d.row(t)[3] - want).abs() < 1e-12, "t={t}");
            for c in (0..12).filter(|&c| c != 3) {
                assert_eq!(d.row(t)[c], 0.0);
            }
        }
    }

    #[test]
    fn dlnco_symmetric_classes() {
        let rows: Vec<Vec<f64>> = (0..30)
            .map(|t| {
                let mut r = vec![0.0; 12];
                if t >= 5 {
                    r[0] = 2.0;
                    r[7] = 2.0;
                }
                r
            })
            .collect();
        let d = dlnco(&matrix(&rows), &DlncoParams::default()).unwrap();
        for t in 0..30 {
            assert_eq!(d.row(t)[0], d.row(t)[7]);
        }
        assert_eq!(d.row(5)[0], 1.0);
    }

    #[test]
    fn offline_cost_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_matrix(&mut rng, 20, 12);
        let y = random_matrix(&mut rng, 20, 12);
        let p = DlncoParams::default();
        let same = OfflineCost::from_chroma(&x, &x, &p, CostWeights::default()).unwrap();
        for n in 0..20 {
            assert!(same.cost(n, n).abs() < 1e-12);
        }
        let zeros = matrix(&vec![vec![0.0; 12]; 20]).with_kind(FeatureKind::Dlnco);
        let c = OfflineCost::new(&x, &y, &zeros, &zeros, CostWeights::default()).unwrap();
        let mc = MatrixCost::new(&x, &y, Metric::Cosine).unwrap();
        for (n, m) in [(0, 0), (3, 7), (19, 2)] {
            assert!((c.cost(n, m) - mc.cost(n, m)).abs() < 1e-12);
        }
        let one = OfflineCost::from_chroma(&x, &y, &p, CostWeights::default()).unwrap();
        let two = OfflineCost::from_chroma(
            &x,
            &y,
            &p,
            CostWeights {
                chroma: 1.0,
                dlnco: 2.0,
            },
        )
        .unwrap();
        for (n, m) in [(1, 1), (4, 9), (15, 3)] {
            let diff = two.cost(n, m) - one.cost(n, m);
            assert!((diff - one.dlnco_term(n, m)).abs() < 1e-12);
        }
        let short = random_matrix(&mut rng, 19, 12);
        assert!(matches!(
            OfflineCost::new(&x, &y, &short, &zeros, CostWeights::default()),
            Err(AlignError::LengthMismatch(..))
        ));
    }

    #[test]
    fn mrms_identity_and_small_equivalence() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_matrix(&mut rng, 300, 6);
        let c = MatrixCost::new(&x, &x, Metric::Euclidean).unwrap();
        let (path, cost) = mrms_dtw(&c, &MrmsConfig::default()).unwrap();
        assert_eq!(cost, 0.0);
        assert!(path.pairs().iter().all(|&(a, b)| a == b));
        assert_eq!(path.len(), 300);

        for _ in 0..5 {
            let n = rng.gen_range(1..=64);
            let m = rng.gen_range(1..=64);
            let x = random_matrix(&mut rng, n, 4);
            let y = random_matrix(&mut rng, m, 4);
            let c = MatrixCost::new(&x, &y, Metric::Euclidean).unwrap();
            let full = dtw_with_cost(&c, &DtwConfig::default()).unwrap();
            assert_eq!(mrms_dtw(&c, &MrmsConfig::default()).unwrap(), full);
        }
    }

    #[test]
    fn mrms_tracks_double_tempo() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        // smooth random walk so pooled levels stay informative
        let mut rows = Vec::new();
        let mut v: Vec<f64> = (0..12).map(|_| rng.gen_range(0.0..1.0)).collect();
        for _ in 0..800 {
            for e in &mut v {
                *e = (*e + rng.gen_range(-0.15..0.15)).clamp(0.0, 1.0);
            }
            rows.push(v.clone());
        }
        let x = matrix(&rows);
        let doubled: Vec<Vec<f64>> = rows.iter().flat_map(|r| [r.clone(), r.clone()]).collect();
        let y = matrix(&doubled);
        let c = MatrixCost::new(&x, &y, Metric::Euclidean).unwrap();
        let (path, _) = mrms_dtw(&c, &MrmsConfig::default()).unwrap();
        let near = path
            .pairs()
            .iter()
            .filter(|&&(a, b)| (b as f64 - 2.0 * a as f64).abs() <= 2.0)
            .count();
        assert!(near as f64 >= 0.95 * path.len() as f64, "{near}/{}", path.len());
    }

    #[test]
    fn pseudo_labels() {
        use crate::score::{build_timeline, Syllabic, VocalNote};
        use crate::timeline::TempoMap;
        let notes = vec![
            VocalNote {
                onset: 2.0,
                duration: 1.0,
                pitch: 60,
                syllable: "la".into(),
                syllabic: Syllabic::Single,
            },
            VocalNote {
                onset: 3.0,
                duration: 1.0,
                pitch: 62,
                syllable: "li".into(),
                syllabic: Syllabic::Single,
            },
        ];
        let tl = build_timeline(&notes, &TempoMap::constant(60.0).unwrap(), None).unwrap();
        let path = WarpingPath::new(vec![(0, 0), (100, 200)]).unwrap();
        let out = generate_pseudo_labels(&tl, &path, &clock()).unwrap();
        let refs: Vec<f64> = out.notes().map(|n| n.ref_time.unwrap()).collect();
        assert!((refs[0] - 4.0).abs() < 1e-12);
        assert!(refs[1] >= refs[0]);
        assert_eq!(out.lines[0].ref_time, Some(refs[0]));

        let diag = WarpingPath::new((0..=100).map(|i| (i, i)).collect()).unwrap();
        let out = generate_pseudo_labels(&tl, &diag, &clock()).unwrap();
        for n in out.notes() {
            assert!((n.ref_time.unwrap() - n.score_time).abs() < 1e-12);
        }
        let short = WarpingPath::new(vec![(0, 0), (10, 10)]).unwrap();
        assert!(generate_pseudo_labels(&tl, &short, &clock()).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn swap_symmetry(seed in any::<u64>(), n in 1usize..9, m in 1usize..9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_matrix(&mut rng, n, 3);
            let y = random_matrix(&mut rng, m, 3);
            let cfg = DtwConfig::default();
            let (_, a) = dtw_full(&x, &y, Metric::Euclidean, &cfg).unwrap();
            let (_, b) = dtw_full(&y, &x, Metric::Euclidean, &cfg).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn never_worse_than_random_paths(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (n, m) = (rng.gen_range(2..20), rng.gen_range(2..20));
            let x = random_matrix(&mut rng, n, 3);
            let y = random_matrix(&mut rng, m, 3);
            let cfg = DtwConfig::default();
            let c = MatrixCost::new(&x, &y, Metric::Euclidean).unwrap();
            let (_, best) = dtw_with_cost(&c, &cfg).unwrap();
            for _ in 0..20 {
                let (mut i, mut j) = (0, 0);
                let mut pairs = vec![(0, 0)];
                while (i, j) != (n - 1, m - 1) {
                    let s = if i == n - 1 { (0, 1) } else if j == m - 1 { (1, 0) } else { DEFAULT_STEPS[rng.gen_range(0..3)] };
                    i += s.0;
                    j += s.1;
                    pairs.push((i, j));
                }
                let p = WarpingPath::new(pairs).unwrap();
                prop_assert!(best <= path_cost(&c, &cfg, &p) + 1e-12);
            }
        }

        #[test]
        fn dlnco_bounded(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_matrix(&mut rng, 60, 12);
            let d = dlnco(&x, &DlncoParams::default()).unwrap();
            prop_assert!(d.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
