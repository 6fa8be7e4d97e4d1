use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{EvalError, OnsetAnnotation};
use crate::audio::{synth_score_audio, AudioClip, ScoreNote};
use crate::ppg::{synthetic_ppg, PhonemeSet, PhonemeSetName, PpgMatrix};
use crate::score::{build_timeline, write_musicxml, LyricsTimeline, Syllabic, VocalNote};
use crate::timeline::{FrameClock, TempoMap};

/// Parameters of the generated benchmark songs.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub songs: usize,
    pub seed: u64,
    /// Approximate vocal notes per song.
    pub notes: usize,
    pub words_per_line: usize,
    /// Target tempo factors are drawn from this range.
    pub tempo_range: (f64, f64),
    /// Beats per constant-factor tempo segment.
    pub segment_beats: f64,
    /// Noise power relative to the target signal, in dB.
    pub noise_db: f64,
    pub ppg_confidence: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            songs: 8,
            seed: 7,
            notes: 48,
            words_per_line: 5,
            tempo_range: (0.8, 1.25),
            segment_beats: 4.0,
            noise_db: -20.0,
            ppg_confidence: 0.8,
        }
    }
}

/// One generated song with both renditions.
#[derive(Debug, Clone)]
pub struct SynthSong {
    pub vocal: Vec<VocalNote>,
    pub bpm: f64,
    pub lyrics: String,
    pub timeline: LyricsTimeline,
    /// Piecewise `(beat, factor)` tempo scaling of the target.
    pub warp: Vec<(f64, f64)>,
    pub reference: AudioClip,
    pub target: AudioClip,
    pub ann_ref: OnsetAnnotation,
    pub ann_target: OnsetAnnotation,
    pub ppg_ref: PpgMatrix,
    pub ppg_target: PpgMatrix,
}

const ONSETS: [(&str, &str); 14] = [
    ("t", "stop"),
    ("k", "stop"),
    ("b", "stop"),
    ("d", "stop"),
    ("g", "stop"),
    ("s", "fricative"),
    ("f", "fricative"),
    ("w", "fricative"),
    ("sch", "fricative"),
    ("h", "fricative"),
    ("m", "nasal"),
    ("n", "nasal"),
    ("l", "vowel"),
    ("", "vowel"),
];
const VOWELS: [&str; 7] = ["a", "e", "i", "o", "u", "ei", "au"];
const CODAS: [(&str, &str); 6] = [
    ("", ""),
    ("", ""),
    ("", ""),
    ("n", "nasal"),
    ("t", "stop"),
    ("s", "fricative"),
];
const SCALE: [u8; 12] = [57, 59, 60, 62, 64, 65, 67, 69, 71, 72, 74, 76];

struct Syl {
    text: String,
    onset: &'static str,
    coda: &'static str,
}

fn syllable(rng: &mut ChaCha8Rng) -> Syl {
    let (o, oc) = *ONSETS.choose(rng).unwrap();
    let v = *VOWELS.choose(rng).unwrap();
    let (c, cc) = *CODAS.choose(rng).unwrap();
    Syl {
        text: format!("{o}{v}{c}"),
        onset: oc,
        coda: cc,
    }
}

/// Framewise broad-class labels of a rendition: consonant frames at note
/// starts and ends, vowel in between, silence outside notes.
fn frame_labels(notes: &[(VocalNote, &Syl)], tm: &TempoMap, frames: usize) -> Result<Vec<&'static str>, EvalError> {
    let clock = FrameClock::default();
    let mut labels = vec!["silence"; frames];
    for (n, s) in notes {
        let on = tm.time_at_beat(n.onset)?;
        let off = tm.time_at_beat(n.onset + n.duration)?;
        let edge = (0.25 * (off - on)).min(0.08);
        for (k, l) in labels.iter_mut().enumerate() {
            let t = clock.frames_to_seconds(k as f64);
            if t < on || t >= off {
                continue;
            }
            *l = if t < on + edge {
                s.onset
            } else if t >= off - edge && !s.coda.is_empty() {
                s.coda
            } else {
                "vowel"
            };
        }
    }
    Ok(labels)
}

fn noisy(clip: &AudioClip, db: f64, rng: &mut ChaCha8Rng) -> Result<AudioClip, EvalError> {
    let s = clip.samples();
    let rms = (s.iter().map(|&x| (x as f64).powi(2)).sum::<f64>() / s.len().max(1) as f64).sqrt();
    let sigma = rms * 10f64.powf(db / 20.0);
    let normal = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let out = s
        .iter()
        .map(|&x| (x as f64 + normal.sample(rng)).clamp(-1.0, 1.0) as f32)
        .collect();
    Ok(AudioClip::new(out)?)
}

/// Generates song `index` of a dataset deterministically from `cfg.seed`.
pub fn generate_song(cfg: &SynthConfig, index: usize) -> Result<SynthSong, EvalError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(1_000_003).wrapping_add(index as u64));
    let bpm = rng.gen_range(72..=112) as f64;
    let tempo = TempoMap::constant(bpm)?;

    let mut vocal = Vec::new();
    let mut syls = Vec::new();
    let mut lines: Vec<Vec<String>> = vec![Vec::new()];
    let mut beat = 1.0;
    let mut degree = rng.gen_range(3..8usize);
    while vocal.len() < cfg.notes {
        let n_syl = *[1usize, 1, 2, 2, 3].choose(&mut rng).unwrap();
        let mut word = String::new();
        for j in 0..n_syl {
            let s = syllable(&mut rng);
            // repeated pitches are common in declamatory writing
            if rng.gen_bool(0.7) {
                let step: isize = rng.gen_range(-2..=2);
                degree = (degree as isize + step).clamp(0, SCALE.len() as isize - 1) as usize;
            }
            let duration = *[0.5, 1.0, 1.0, 1.5, 2.0].choose(&mut rng).unwrap();
            let syllabic = match (n_syl, j) {
                (1, _) => Syllabic::Single,
                (_, 0) => Syllabic::Begin,
                (n, j) if j + 1 == n => Syllabic::End,
                _ => Syllabic::Middle,
            };
            word.push_str(&s.text);
            vocal.push(VocalNote {
                onset: beat,
                duration,
                pitch: SCALE[degree],
                syllable: s.text.clone(),
                syllabic,
            });
            syls.push(s);
            beat += duration;
        }
        lines.last_mut().unwrap().push(word);
        if lines.last().unwrap().len() == cfg.words_per_line {
            lines.push(Vec::new());
            beat += 1.0;
        } else if rng.gen_bool(0.25) {
            beat += 0.5;
        }
    }
    lines.retain(|l| !l.is_empty());
    let lyrics: String = lines.iter().map(|l| l.join(" ") + "\n").collect();
    let timeline = build_timeline(&vocal, &tempo, Some(&lyrics))?;

    let total_beats = beat + 1.0;
    let (lo, hi) = cfg.tempo_range;
    let mut warp = Vec::new();
    let mut b = 0.0;
    while b < total_beats {
        warp.push((b, rng.gen_range(lo..=hi)));
        b += cfg.segment_beats;
    }
    let target_tempo = tempo.scaled(&warp)?;

    let notes: Vec<ScoreNote> = vocal
        .iter()
        .map(|n| ScoreNote {
            onset: n.onset,
            duration: n.duration,
            pitch: n.pitch,
        })
        .collect();
    let reference = synth_score_audio(&notes, &tempo)?;
    let target = noisy(&synth_score_audio(&notes, &target_tempo)?, cfg.noise_db, &mut rng)?;

    let ann_ref = OnsetAnnotation::from_timeline(&timeline, |n| tempo.time_at_beat(n.beat).unwrap_or(f64::NAN))?;
    let ann_target = OnsetAnnotation::from_timeline(&timeline, |n| target_tempo.time_at_beat(n.beat).unwrap_or(f64::NAN))?;

    let clock = FrameClock::default();
    let set = PhonemeSet::new(PhonemeSetName::Phoneme5);
    let pairs: Vec<(VocalNote, &Syl)> = vocal.iter().cloned().zip(syls.iter()).collect();
    let ppg = |tm: &TempoMap, clip: &AudioClip| -> Result<PpgMatrix, EvalError> {
        let labels = frame_labels(&pairs, tm, clock.frame_count(clip.len()))?;
        Ok(synthetic_ppg(&labels, &set, cfg.ppg_confidence)?)
    };
    let ppg_ref = ppg(&tempo, &reference)?;
    let ppg_target = ppg(&target_tempo, &target)?;

    Ok(SynthSong {
        vocal,
        bpm,
        lyrics,
        timeline,
        warp,
        reference,
        target,
        ann_ref,
        ann_target,
        ppg_ref,
        ppg_target,
    })
}

impl SynthSong {
    /// Writes the song in the benchmark dataset layout.
    pub fn write(&self, dir: &Path) -> Result<(), EvalError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(
            dir.join("score.musicxml"),
            write_musicxml(&self.vocal, &[], &[(0.0, self.bpm)], 4),
        )?;
        std::fs::write(dir.join("lyrics.txt"), &self.lyrics)?;
        self.reference.write_wav(&dir.join("ref.wav"))?;
        self.target.write_wav(&dir.join("target.wav"))?;
        self.ann_ref.save(&dir.join("ann_ref.csv"))?;
        self.ann_target.save(&dir.join("ann_target.csv"))?;
        self.ppg_ref.save(&dir.join("ppg_ref.fmx"))?;
        self.ppg_target.save(&dir.join("ppg_target.fmx"))?;
        Ok(())
    }
}

/// Writes `cfg.songs` songs as `root/song_NN`; returns their ids.
pub fn generate_dataset(root: &Path, cfg: &SynthConfig) -> Result<Vec<String>, EvalError> {
    use rayon::prelude::*;
    (0..cfg.songs)
        .into_par_iter()
        .map(|i| {
            let id = format!("song_{i:02}");
            generate_song(cfg, i)?.write(&root.join(&id))?;
            Ok(id)
        })
        .collect()
}
