//! Symbolic score: vocal notes with syllables, and the line/word/note lyrics
//! timeline built from them.

mod musicxml;

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::timeline::{TempoMap, TimelineError};

pub use musicxml::{parse_musicxml, parse_musicxml_str, write_musicxml, ParsedScore};

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("xml error: {0}")]
    Xml(String),
    #[error("no vocal part found")]
    NoVocalPart,
    #[error("unsupported construct: {what} at {location}")]
    Unsupported { what: String, location: String },
    #[error("word assembly failed at note {note}: {msg}")]
    WordAssembly { note: usize, msg: String },
    #[error("lyrics line {line}: {msg}")]
    LineMatch { line: usize, msg: String },
    #[error("timeline json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Timeline(#[from] TimelineError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Syllabic {
    Single,
    Begin,
    Middle,
    End,
}

/// A sung note. An empty `syllable` marks a melisma continuation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocalNote {
    pub onset: f64,
    pub duration: f64,
    pub pitch: u8,
    pub syllable: String,
    pub syllabic: Syllabic,
}

impl VocalNote {
    pub fn is_continuation(&self) -> bool {
        self.syllable.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoteUnit {
    pub index: usize,
    pub text: String,
    pub beat: f64,
    pub duration_beats: f64,
    pub pitch: u8,
    pub score_time: f64,
    pub ref_time: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordUnit {
    pub index: usize,
    pub text: String,
    pub beat: f64,
    pub score_time: f64,
    pub ref_time: Option<f64>,
    pub notes: Vec<NoteUnit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineUnit {
    pub index: usize,
    pub text: String,
    pub beat: f64,
    pub score_time: f64,
    pub ref_time: Option<f64>,
    pub words: Vec<WordUnit>,
}

/// Line -> word -> note hierarchy. Indices are global per level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyricsTimeline {
    pub lines: Vec<LineUnit>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnitLevel {
    Line,
    Word,
    Note,
}

impl LyricsTimeline {
    pub fn words(&self) -> impl Iterator<Item = &WordUnit> {
        self.lines.iter().flat_map(|l| l.words.iter())
    }

    pub fn notes(&self) -> impl Iterator<Item = &NoteUnit> {
        self.words().flat_map(|w| w.notes.iter())
    }

    pub fn note_count(&self) -> usize {
        self.notes().count()
    }

    /// `(line, word)` owning each note, in note order.
    pub fn note_owners(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for l in &self.lines {
            for w in &l.words {
                out.extend(std::iter::repeat_n((l.index, w.index), w.notes.len()));
            }
        }
        out
    }

    pub fn to_json(&self) -> Result<String, ScoreError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, ScoreError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), ScoreError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ScoreError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn normalize_word(s: &str) -> String {
    s.chars()
        .filter(|c| c.is_alphanumeric())
        .flat_map(char::to_lowercase)
        .collect()
}

struct WordDraft {
    notes: Vec<usize>,
}

fn assemble_words(notes: &[VocalNote]) -> Result<Vec<WordDraft>, ScoreError> {
    let mut words: Vec<WordDraft> = Vec::new();
    let mut open: Option<WordDraft> = None;
    for (i, n) in notes.iter().enumerate() {
        if n.is_continuation() {
            match open.as_mut().or(words.last_mut()) {
                Some(w) => w.notes.push(i),
                None => {
                    return Err(ScoreError::WordAssembly {
                        note: i,
                        msg: "melisma before the first syllable".into(),
                    })
                }
            }
            continue;
        }
        match (n.syllabic, open.is_some()) {
            (Syllabic::Single, false) => words.push(WordDraft { notes: vec![i] }),
            (Syllabic::Begin, false) => open = Some(WordDraft { notes: vec![i] }),
            (Syllabic::Middle, true) => open.as_mut().unwrap().notes.push(i),
            (Syllabic::End, true) => {
                let mut w = open.take().unwrap();
                w.notes.push(i);
                words.push(w);
            }
            (s, true) => {
                return Err(ScoreError::WordAssembly {
                    note: i,
                    msg: format!("{s:?} syllable while a word is still open"),
                })
            }
            (s, false) => {
                return Err(ScoreError::WordAssembly {
                    note: i,
                    msg: format!("dangling {s:?} syllable"),
                })
            }
        }
    }
    if open.is_some() {
        return Err(ScoreError::WordAssembly {
            note: notes.len(),
            msg: "word started but never ended".into(),
        });
    }
    Ok(words)
}

/// Groups word indices into lines following the sidecar lyrics text.
fn match_lines(word_texts: &[String], lyrics: &str) -> Result<Vec<Vec<usize>>, ScoreError> {
    let normalized: Vec<String> = word_texts.iter().map(|w| normalize_word(w)).collect();
    let mut lines = Vec::new();
    let mut next = 0usize;
    for (ln, line) in lyrics.lines().enumerate() {
        let tokens: Vec<String> = line
            .split_whitespace()
            .map(normalize_word)
            .filter(|t| !t.is_empty())
            .collect();
        if tokens.is_empty() {
            continue;
        }
        let mut members = Vec::new();
        for tok in tokens {
            // punctuation-only score words ride along with the current line
            while next < normalized.len() && normalized[next].is_empty() {
                members.push(next);
                next += 1;
            }
            match normalized.get(next) {
                Some(w) if *w == tok => {
                    members.push(next);
                    next += 1;
                }
                Some(w) => {
                    return Err(ScoreError::LineMatch {
                        line: ln + 1,
                        msg: format!("expected `{tok}`, score has `{w}`"),
                    })
                }
                None => {
                    return Err(ScoreError::LineMatch {
                        line: ln + 1,
                        msg: format!("`{tok}` beyond the end of the score lyrics"),
                    })
                }
            }
        }
        lines.push(members);
    }
    while next < normalized.len() && normalized[next].is_empty() {
        if let Some(last) = lines.last_mut() {
            last.push(next);
        }
        next += 1;
    }
    if next < normalized.len() {
        return Err(ScoreError::LineMatch {
            line: lyrics.lines().count(),
            msg: format!("{} score words not covered by the lyrics file", normalized.len() - next),
        });
    }
    Ok(lines)
}

/// Builds the three-level timeline. Without a lyrics sidecar all words form a
/// single line. Reference times are left empty.
pub fn build_timeline(
    notes: &[VocalNote],
    tm: &TempoMap,
    line_breaks: Option<&str>,
) -> Result<LyricsTimeline, ScoreError> {
    if notes.windows(2).any(|w| w[1].onset < w[0].onset) {
        return Err(ScoreError::WordAssembly {
            note: 0,
            msg: "notes not sorted by onset".into(),
        });
    }
    let drafts = assemble_words(notes)?;
    let texts: Vec<String> = drafts
        .iter()
        .map(|d| d.notes.iter().map(|&i| notes[i].syllable.as_str()).collect())
        .collect();
    let groups = match line_breaks {
        Some(text) => match_lines(&texts, text)?,
        None => vec![(0..drafts.len()).collect()],
    };

    let mut note_idx = 0;
    let mut lines = Vec::with_capacity(groups.len());
    for (li, group) in groups.into_iter().enumerate() {
        let mut words = Vec::with_capacity(group.len());
        for wi in group {
            let mut units = Vec::new();
            for &ni in &drafts[wi].notes {
                let n = &notes[ni];
                units.push(NoteUnit {
                    index: note_idx,
                    text: n.syllable.clone(),
                    beat: n.onset,
                    duration_beats: n.duration,
                    pitch: n.pitch,
                    score_time: tm.time_at_beat(n.onset)?,
                    ref_time: None,
                });
                note_idx += 1;
            }
            words.push(WordUnit {
                index: wi,
                text: texts[wi].clone(),
                beat: units[0].beat,
                score_time: units[0].score_time,
                ref_time: None,
                notes: units,
            });
        }
        if words.is_empty() {
            continue;
        }
        let text = words
            .iter()
            .map(|w| w.text.as_str())
            .collect::<Vec<_>>()
            .join(" ");
        lines.push(LineUnit {
            index: li,
            text,
            beat: words[0].beat,
            score_time: words[0].score_time,
            ref_time: None,
            words,
        });
    }
    Ok(LyricsTimeline { lines })
}
