//! Audio loading, deadpan score synthesis and chunked streaming.

use std::path::Path;

use thiserror::Error;

use crate::timeline::{TempoMap, TimelineError};

pub const SAMPLE_RATE: u32 = 16_000;
/// 160 ms at 16 kHz.
pub const CHUNK_SAMPLES: usize = 2560;

const RESAMPLE_TAPS: usize = 32;
const RAMP_SECONDS: f64 = 0.010;
const HARMONIC_AMPS: [f64; 5] = [1.0, 0.5, 0.25, 0.125, 0.0625];

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("unsupported or malformed wav: {0}")]
    Format(String),
    #[error("audio contains no samples")]
    EmptyAudio,
    #[error("pitch {0} outside MIDI range 21..=108")]
    PitchOutOfRange(u8),
    #[error("no notes to synthesize")]
    NoNotes,
    #[error("audio contains non-finite samples")]
    NonFinite,
    #[error(transparent)]
    Tempo(#[from] TimelineError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<hound::Error> for AudioError {
    fn from(e: hound::Error) -> Self {
        match e {
            hound::Error::IoError(io) => AudioError::Io(io),
            other => AudioError::Format(other.to_string()),
        }
    }
}

/// Mono 16 kHz audio with samples in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>) -> Result<Self, AudioError> {
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(AudioError::NonFinite);
        }
        Ok(Self {
            samples,
            sample_rate: SAMPLE_RATE,
        })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Writes 16-bit PCM mono.
    pub fn write_wav(&self, path: &Path) -> Result<(), AudioError> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path, spec)?;
        for &s in &self.samples {
            w.write_sample((s.clamp(-1.0, 1.0) * i16::MAX as f32).round() as i16)?;
        }
        w.finalize()?;
        Ok(())
    }
}

pub fn load_wav(path: &Path) -> Result<AudioClip, AudioError> {
    let reader = hound::WavReader::open(path)?;
    read_wav(reader)
}

pub fn read_wav<R: std::io::Read>(reader: hound::WavReader<R>) -> Result<AudioClip, AudioError> {
    let spec = reader.spec();
    if spec.channels == 0 || spec.channels > 2 {
        return Err(AudioError::Format(format!("{} channels", spec.channels)));
    }
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<Result<_, _>>()?,
        (hound::SampleFormat::Float, 32) => {
            reader.into_samples::<f32>().collect::<Result<_, _>>()?
        }
        (fmt, bits) => {
            return Err(AudioError::Format(format!("{bits}-bit {fmt:?} samples")));
        }
    };
    let channels = spec.channels as usize;
    let mono: Vec<f32> = interleaved
        .chunks_exact(channels)
        .map(|frame| frame.iter().sum::<f32>() / channels as f32)
        .collect();
    if mono.is_empty() {
        return Err(AudioError::EmptyAudio);
    }
    if mono.iter().any(|s| !s.is_finite()) {
        return Err(AudioError::NonFinite);
    }
    let mut mono = if spec.sample_rate == SAMPLE_RATE {
        mono
    } else {
        resample(&mono, spec.sample_rate, SAMPLE_RATE)
    };
    let peak = mono.iter().fold(0.0f32, |m, s| m.max(s.abs()));
    if peak > 1.0 {
        mono.iter_mut().for_each(|s| *s /= peak);
    }
    AudioClip::new(mono)
}

/// Hann-windowed sinc interpolation with a fixed 32-tap kernel.
pub fn resample(input: &[f32], from_rate: u32, to_rate: u32) -> Vec<f32> {
    if from_rate == to_rate || input.is_empty() {
        return input.to_vec();
    }
    let ratio = to_rate as f64 / from_rate as f64;
    let out_len = (input.len() as f64 * ratio).round() as usize;
    // lowpass at the lower of the two Nyquist rates
    let cutoff = ratio.min(1.0);
    let half = (RESAMPLE_TAPS / 2) as f64 / cutoff;
    let step = from_rate as f64 / to_rate as f64;
    (0..out_len)
        .map(|i| {
            let t = i as f64 * step;
            let lo = (t - half).ceil().max(0.0) as usize;
            let hi = ((t + half).floor() as usize).min(input.len() - 1);
            let mut acc = 0.0f64;
            let mut norm = 0.0f64;
            for (k, &x) in input.iter().enumerate().take(hi + 1).skip(lo) {
                let d = t - k as f64;
                let w = 0.5 + 0.5 * (std::f64::consts::PI * d / half).cos();
                let arg = std::f64::consts::PI * d * cutoff;
                let sinc = if arg.abs() < 1e-12 { 1.0 } else { arg.sin() / arg };
                let h = cutoff * sinc * w;
                acc += x as f64 * h;
                norm += h;
            }
            // unity DC gain keeps edges from dipping
            if norm.abs() > 1e-9 {
                (acc / norm) as f32
            } else {
                0.0
            }
        })
        .collect()
}

/// A note in beat time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreNote {
    pub onset: f64,
    pub duration: f64,
    pub pitch: u8,
}

pub fn midi_to_hz(pitch: f64) -> f64 {
    440.0 * 2f64.powf((pitch - 69.0) / 12.0)
}

/// Deadpan additive rendering: five harmonics with amplitudes 1, 1/2, 1/4,
/// 1/8, 1/16 and 10 ms linear attack and release. Peak-normalized to 0.9.
pub fn synth_score_audio(notes: &[ScoreNote], tm: &TempoMap) -> Result<AudioClip, AudioError> {
    if notes.is_empty() {
        return Err(AudioError::NoNotes);
    }
    let sr = SAMPLE_RATE as f64;
    let mut spans = Vec::with_capacity(notes.len());
    for n in notes {
        if !(21..=108).contains(&n.pitch) {
            return Err(AudioError::PitchOutOfRange(n.pitch));
        }
        let start = tm.time_at_beat(n.onset)?;
        let end = tm.time_at_beat(n.onset + n.duration)?;
        spans.push((start, end, midi_to_hz(n.pitch as f64)));
    }
    let last_end = spans.iter().fold(0.0f64, |m, s| m.max(s.1));
    let len = ((last_end + RAMP_SECONDS) * sr).ceil() as usize + 1;
    let mut out = vec![0.0f64; len];
    let ramp = RAMP_SECONDS * sr;
    for &(start, end, f0) in &spans {
        let s0 = (start * sr).ceil() as usize;
        let s1 = (((end * sr) + ramp).floor() as usize).min(len - 1);
        let on_len = (end - start) * sr;
        for (i, slot) in out.iter_mut().enumerate().take(s1 + 1).skip(s0) {
            let rel = i as f64 - start * sr;
            let env = if rel < ramp {
                rel / ramp
            } else if rel <= on_len {
                1.0
            } else {
                (1.0 - (rel - on_len) / ramp).max(0.0)
            };
            if env <= 0.0 {
                continue;
            }
            let t = rel / sr;
            let mut v = 0.0;
            for (h, amp) in HARMONIC_AMPS.iter().enumerate() {
                let f = f0 * (h + 1) as f64;
                if f >= sr / 2.0 {
                    break;
                }
                v += amp * (2.0 * std::f64::consts::PI * f * t).sin();
            }
            *slot += env * v;
        }
    }
    let peak = out.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    let gain = if peak > 0.0 { 0.9 / peak } else { 0.0 };
    AudioClip::new(out.into_iter().map(|v| (v * gain) as f32).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AudioChunk {
    pub samples: Vec<f32>,
    pub start_sample: usize,
}

/// Gapless 2560-sample chunks; the final chunk may be shorter.
pub fn chunk_stream(clip: &AudioClip) -> impl Iterator<Item = AudioChunk> + '_ {
    clip.samples()
        .chunks(CHUNK_SAMPLES)
        .enumerate()
        .map(|(i, c)| AudioChunk {
            samples: c.to_vec(),
            start_sample: i * CHUNK_SAMPLES,
        })
}
