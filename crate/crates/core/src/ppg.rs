//! Phoneme sets, label collapsing, and phonetic posteriorgrams.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{FeatureError, FeatureKind, FeatureMatrix};
use crate::timeline::FrameClock;

const MAP_61_39: &str = include_str!("../data/timit61_to_phoneme39.tsv");
const MAP_39_14: &str = include_str!("../data/phoneme39_to_viseme14.tsv");
const MAP_39_5: &str = include_str!("../data/phoneme39_to_phoneme5.tsv");

const VISEME14: [&str; 14] = [
    "sil",
    "bilabial",
    "labiodental",
    "dental",
    "alveolar",
    "sibilant",
    "postalveolar",
    "velar",
    "rhotic",
    "rounded",
    "open",
    "front",
    "close",
    "back_rounded",
];
const PHONEME5: [&str; 5] = ["vowel", "stop", "fricative", "nasal", "silence"];

/// Row sums must be within this of 1.
pub const STOCHASTIC_TOL: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum PpgError {
    #[error("phoneme set mismatch: expected {expected} ({expected_dims} labels), got {got_dims}")]
    SetMismatch {
        expected: PhonemeSetName,
        expected_dims: usize,
        got_dims: usize,
    },
    #[error("frame {frame} is not a probability distribution (sum {sum})")]
    NotStochastic { frame: usize, sum: f64 },
    #[error("unknown label `{0}`")]
    UnknownLabel(String),
    #[error("unknown phoneme set `{0}`")]
    UnknownSet(String),
    #[error("collapse map: {0}")]
    Map(String),
    #[error("expected a ppg matrix, file holds {0:?}")]
    WrongKind(FeatureKind),
    #[error("frame clock {got:?} differs from feature clock {expected:?}")]
    ClockMismatch {
        expected: FrameClock,
        got: FrameClock,
    },
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhonemeSetName {
    Timit61,
    Phoneme39,
    Viseme14,
    Phoneme5,
}

impl fmt::Display for PhonemeSetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PhonemeSetName::Timit61 => "timit61",
            PhonemeSetName::Phoneme39 => "phoneme39",
            PhonemeSetName::Viseme14 => "viseme14",
            PhonemeSetName::Phoneme5 => "phoneme5",
        })
    }
}

impl FromStr for PhonemeSetName {
    type Err = PpgError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "timit61" => Ok(PhonemeSetName::Timit61),
            "phoneme39" => Ok(PhonemeSetName::Phoneme39),
            "viseme14" => Ok(PhonemeSetName::Viseme14),
            "phoneme5" => Ok(PhonemeSetName::Phoneme5),
            _ => Err(PpgError::UnknownSet(s.to_string())),
        }
    }
}

fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, PpgError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let mut it = line.split('\t');
        match (it.next(), it.next(), it.next()) {
            (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => {
                out.push((a.trim().to_string(), b.trim().to_string()))
            }
            _ => return Err(PpgError::Map(format!("line {}: `{line}`", i + 1))),
        }
    }
    Ok(out)
}

/// An ordered label inventory. Column `i` of a posteriorgram is `labels[i]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhonemeSet {
    name: PhonemeSetName,
    labels: Vec<String>,
}

impl PhonemeSet {
    pub fn new(name: PhonemeSetName) -> Self {
        let labels: Vec<String> = match name {
            PhonemeSetName::Timit61 => parse_pairs(MAP_61_39)
                .expect("bundled map")
                .into_iter()
                .map(|p| p.0)
                .collect(),
            PhonemeSetName::Phoneme39 => parse_pairs(MAP_39_5)
                .expect("bundled map")
                .into_iter()
                .map(|p| p.0)
                .collect(),
            PhonemeSetName::Viseme14 => VISEME14.iter().map(|s| s.to_string()).collect(),
            PhonemeSetName::Phoneme5 => PHONEME5.iter().map(|s| s.to_string()).collect(),
        };
        Self { name, labels }
    }

    pub fn name(&self) -> PhonemeSetName {
        self.name
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }
}

/// Total, surjective assignment of source labels to target labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CollapseMap {
    source: PhonemeSet,
    target: PhonemeSet,
    assignment: Vec<usize>,
}

impl CollapseMap {
    /// Parses the `source<TAB>target` text format.
    pub fn parse(text: &str, source: PhonemeSet, target: PhonemeSet) -> Result<Self, PpgError> {
        let mut assignment: Vec<Option<usize>> = vec![None; source.len()];
        for (s, t) in parse_pairs(text)? {
            let si = source
                .index_of(&s)
                .ok_or_else(|| PpgError::UnknownLabel(s.clone()))?;
            let ti = target.index_of(&t).ok_or(PpgError::UnknownLabel(t))?;
            if assignment[si].replace(ti).is_some() {
                return Err(PpgError::Map(format!("`{s}` mapped twice")));
            }
        }
        let assignment = assignment
            .into_iter()
            .enumerate()
            .map(|(i, a)| a.ok_or_else(|| PpgError::Map(format!("`{}` unmapped", source.labels[i]))))
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_assignment(source, target, assignment)
    }

    pub fn from_assignment(
        source: PhonemeSet,
        target: PhonemeSet,
        assignment: Vec<usize>,
    ) -> Result<Self, PpgError> {
        if assignment.len() != source.len() {
            return Err(PpgError::Map("assignment is not total".into()));
        }
        let mut hit = vec![false; target.len()];
        for &t in &assignment {
            *hit
                .get_mut(t)
                .ok_or_else(|| PpgError::Map(format!("target index {t} out of range")))? = true;
        }
        if let Some(miss) = hit.iter().position(|h| !h) {
            return Err(PpgError::Map(format!(
                "target `{}` has no source",
                target.labels[miss]
            )));
        }
        Ok(Self {
            source,
            target,
            assignment,
        })
    }

    pub fn load(path: &Path, source: PhonemeSet, target: PhonemeSet) -> Result<Self, PpgError> {
        let text = std::fs::read_to_string(path).map_err(FeatureError::from)?;
        Self::parse(&text, source, target)
    }

    pub fn identity(set: PhonemeSet) -> Self {
        let assignment = (0..set.len()).collect();
        Self {
            source: set.clone(),
            target: set,
            assignment,
        }
    }

    /// Bundled maps: 61->39, 39->14, 39->5 and their compositions.
    pub fn builtin(from: PhonemeSetName, to: PhonemeSetName) -> Result<Self, PpgError> {
        use PhonemeSetName::*;
        let set = PhonemeSet::new;
        let parse = |text, a, b| Self::parse(text, set(a), set(b));
        match (from, to) {
            (a, b) if a == b => Ok(Self::identity(set(a))),
            (Timit61, Phoneme39) => parse(MAP_61_39, Timit61, Phoneme39),
            (Phoneme39, Viseme14) => parse(MAP_39_14, Phoneme39, Viseme14),
            (Phoneme39, Phoneme5) => parse(MAP_39_5, Phoneme39, Phoneme5),
            (Timit61, t @ (Viseme14 | Phoneme5)) => {
                Self::builtin(Timit61, Phoneme39)?.compose(&Self::builtin(Phoneme39, t)?)
            }
            (a, b) => Err(PpgError::Map(format!("no bundled map {a} -> {b}"))),
        }
    }

    pub fn source(&self) -> &PhonemeSet {
        &self.source
    }

    pub fn target(&self) -> &PhonemeSet {
        &self.target
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    /// `self` then `next`.
    pub fn compose(&self, next: &CollapseMap) -> Result<CollapseMap, PpgError> {
        if self.target != next.source {
            return Err(PpgError::Map(format!(
                "cannot compose {} -> {} with {} -> {}",
                self.source.name, self.target.name, next.source.name, next.target.name
            )));
        }
        let assignment = self.assignment.iter().map(|&t| next.assignment[t]).collect();
        Self::from_assignment(self.source.clone(), next.target.clone(), assignment)
    }
}

/// Row-stochastic frames x labels matrix at the feature frame rate.
#[derive(Debug, Clone, PartialEq)]
pub struct PpgMatrix {
    matrix: FeatureMatrix,
    set: PhonemeSet,
}

impl PpgMatrix {
    pub fn new(matrix: FeatureMatrix, set: PhonemeSet) -> Result<Self, PpgError> {
        if matrix.kind() != FeatureKind::Ppg {
            return Err(PpgError::WrongKind(matrix.kind()));
        }
        if matrix.dims() != set.len() {
            return Err(PpgError::SetMismatch {
                expected: set.name,
                expected_dims: set.len(),
                got_dims: matrix.dims(),
            });
        }
        if matrix.clock() != FrameClock::default() {
            return Err(PpgError::ClockMismatch {
                expected: FrameClock::default(),
                got: matrix.clock(),
            });
        }
        for (i, row) in matrix.rows().enumerate() {
            let sum: f64 = row.iter().sum();
            let in_range = row.iter().all(|&p| (-1e-6..=1.0 + 1e-6).contains(&p));
            if !in_range || (sum - 1.0).abs() > STOCHASTIC_TOL {
                return Err(PpgError::NotStochastic { frame: i, sum });
            }
        }
        Ok(Self { matrix, set })
    }

    pub fn from_rows(rows: &[Vec<f64>], set: PhonemeSet) -> Result<Self, PpgError> {
        let m = FeatureMatrix::from_rows(rows, set.len(), FeatureKind::Ppg, FrameClock::default())?;
        Self::new(m, set)
    }

    pub fn matrix(&self) -> &FeatureMatrix {
        &self.matrix
    }

    pub fn into_matrix(self) -> FeatureMatrix {
        self.matrix
    }

    pub fn set(&self) -> &PhonemeSet {
        &self.set
    }

    pub fn frames(&self) -> usize {
        self.matrix.frames()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.matrix.row(i)
    }

    pub fn save(&self, path: &Path) -> Result<(), PpgError> {
        Ok(self.matrix.save_fmx(path)?)
    }
}

pub fn load_ppg(path: &Path, expected_set: &PhonemeSet) -> Result<PpgMatrix, PpgError> {
    let m = FeatureMatrix::load_fmx(path)?;
    PpgMatrix::new(m, expected_set.clone())
}

pub fn collapse(ppg: &PpgMatrix, map: &CollapseMap) -> Result<PpgMatrix, PpgError> {
    if ppg.set != map.source {
        return Err(PpgError::SetMismatch {
            expected: map.source.name,
            expected_dims: map.source.len(),
            got_dims: ppg.set.len(),
        });
    }
    let dims = map.target.len();
    let mut data = vec![0.0; ppg.frames() * dims];
    for (row, out) in ppg.matrix.rows().zip(data.chunks_exact_mut(dims)) {
        for (p, &t) in row.iter().zip(&map.assignment) {
            out[t] += p;
        }
    }
    let m = FeatureMatrix::new(data, ppg.frames(), dims, FeatureKind::Ppg, ppg.matrix.clock())?;
    PpgMatrix::new(m, map.target.clone())
}

/// Fixture posteriors: `confidence` on the true label, the rest uniform.
pub fn synthetic_ppg<S: AsRef<str>>(
    labels: &[S],
    set: &PhonemeSet,
    confidence: f64,
) -> Result<PpgMatrix, PpgError> {
    if !(confidence > 0.0 && confidence <= 1.0) {
        return Err(PpgError::Map(format!("confidence {confidence} outside (0, 1]")));
    }
    let n = set.len();
    let off = if n > 1 {
        (1.0 - confidence) / (n - 1) as f64
    } else {
        0.0
    };
    let mut data = Vec::with_capacity(labels.len() * n);
    for l in labels {
        let idx = set
            .index_of(l.as_ref())
            .ok_or_else(|| PpgError::UnknownLabel(l.as_ref().to_string()))?;
        data.extend((0..n).map(|j| if j == idx { confidence } else { off }));
    }
    let m = FeatureMatrix::new(data, labels.len(), n, FeatureKind::Ppg, FrameClock::default())?;
    PpgMatrix::new(m, set.clone())
}
