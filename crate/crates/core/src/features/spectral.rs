use std::sync::{Arc, OnceLock};

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::{FeatureError, FeatureKind, FeatureMatrix};
use crate::audio::{midi_to_hz, AudioClip, SAMPLE_RATE};
use crate::timeline::FrameClock;

pub const FFT_SIZE: usize = 1280;
pub const HOP: usize = 640;
pub const N_BINS: usize = FFT_SIZE / 2 + 1;
pub const MEL_BANDS: usize = 66;
pub const MEL_FLOOR: f64 = 1e-6;
const MEL_FMAX: f64 = 8000.0;

/// Complex STFT, frames x 641 bins.
#[derive(Debug, Clone)]
pub struct Spectrogram {
    bins: Vec<Complex<f64>>,
    frames: usize,
}

impl Spectrogram {
    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn frame(&self, i: usize) -> &[Complex<f64>] {
        &self.bins[i * N_BINS..(i + 1) * N_BINS]
    }

    pub fn magnitude(&self, i: usize, bin: usize) -> f64 {
        self.frame(i)[bin].norm()
    }

    fn power_frame(&self, i: usize) -> Vec<f64> {
        self.frame(i).iter().map(|c| c.norm_sqr()).collect()
    }
}

struct MelFilter {
    start: usize,
    weights: Vec<f64>,
}

/// Shared FFT plan, window, filterbank and pitch-class table.
///
/// Offline and streamed extraction both go through this type, so a frame
/// computed from the same 1280 samples is bit-identical on either path.
pub struct SpectralAnalyzer {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    mel: Vec<MelFilter>,
    chroma_class: Vec<Option<usize>>,
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

impl SpectralAnalyzer {
    pub fn shared() -> &'static SpectralAnalyzer {
        static ANALYZER: OnceLock<SpectralAnalyzer> = OnceLock::new();
        ANALYZER.get_or_init(SpectralAnalyzer::new)
    }

    fn new() -> Self {
        let fft = FftPlanner::new().plan_fft_forward(FFT_SIZE);
        // periodic Hann
        let window = (0..FFT_SIZE)
            .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / FFT_SIZE as f64).cos())
            .collect();
        let bin_hz = SAMPLE_RATE as f64 / FFT_SIZE as f64;

        let mel_max = hz_to_mel(MEL_FMAX);
        let edges: Vec<f64> = (0..MEL_BANDS + 2)
            .map(|i| mel_to_hz(mel_max * i as f64 / (MEL_BANDS + 1) as f64))
            .collect();
        let mel = (0..MEL_BANDS)
            .map(|i| {
                let (lo, mid, hi) = (edges[i], edges[i + 1], edges[i + 2]);
                let area = 2.0 / (hi - lo);
                let weights: Vec<(usize, f64)> = (0..N_BINS)
                    .filter_map(|k| {
                        let f = k as f64 * bin_hz;
                        let w = if f > lo && f < mid {
                            (f - lo) / (mid - lo)
                        } else if f >= mid && f < hi {
                            (hi - f) / (hi - mid)
                        } else {
                            0.0
                        };
                        (w > 0.0).then_some((k, w * area))
                    })
                    .collect();
                let start = weights.first().map(|w| w.0).unwrap_or(0);
                MelFilter {
                    start,
                    weights: weights.into_iter().map(|w| w.1).collect(),
                }
            })
            .collect();

        let (fmin, fmax) = (midi_to_hz(36.0), midi_to_hz(96.0));
        let chroma_class = (0..N_BINS)
            .map(|k| {
                let f = k as f64 * bin_hz;
                // C2..C7 inclusive, small slack for the rounded reference values
                if f >= fmin - 1e-6 && f <= fmax + 1e-6 {
                    let midi = (12.0 * (f / 440.0).log2() + 69.0).round() as i64;
                    Some(midi.rem_euclid(12) as usize)
                } else {
                    None
                }
            })
            .collect();
        Self {
            fft,
            window,
            mel,
            chroma_class,
        }
    }

    /// Windowed FFT of one 1280-sample frame.
    pub fn spectrum(&self, frame: &[f64]) -> Vec<Complex<f64>> {
        assert_eq!(frame.len(), FFT_SIZE);
        let mut buf: Vec<Complex<f64>> = frame
            .iter()
            .zip(&self.window)
            .map(|(x, w)| Complex::new(x * w, 0.0))
            .collect();
        self.fft.process(&mut buf);
        buf.truncate(N_BINS);
        buf
    }

    pub fn power(&self, frame: &[f64]) -> Vec<f64> {
        self.spectrum(frame).iter().map(|c| c.norm_sqr()).collect()
    }

    pub fn chroma_from_power(&self, power: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; 12];
        for (p, class) in power.iter().zip(&self.chroma_class) {
            if let Some(c) = class {
                out[*c] += p;
            }
        }
        out
    }

    pub fn log_mel_from_power(&self, power: &[f64]) -> Vec<f64> {
        self.mel
            .iter()
            .map(|f| {
                let e: f64 = f
                    .weights
                    .iter()
                    .zip(&power[f.start..])
                    .map(|(w, p)| w * p)
                    .sum();
                (e + MEL_FLOOR).ln()
            })
            .collect()
    }

    /// Bin indices covered by mel band `band`.
    pub fn mel_band_bins(&self, band: usize) -> std::ops::Range<usize> {
        let f = &self.mel[band];
        f.start..f.start + f.weights.len()
    }
}

/// Mirror index into `[0, len)` (reflect padding without edge repetition).
pub(crate) fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= len as isize {
        j = period - j;
    }
    j as usize
}

/// The 1280-sample frame centered at `k * 640`, reflect-padded at both ends.
pub(crate) fn centered_frame(samples: &[f32], k: usize) -> Vec<f64> {
    let start = (k * HOP) as isize - (FFT_SIZE / 2) as isize;
    (0..FFT_SIZE as isize)
        .map(|i| samples[reflect_index(start + i, samples.len())] as f64)
        .collect()
}

pub fn stft(clip: &AudioClip) -> Result<Spectrogram, FeatureError> {
    if clip.is_empty() {
        return Err(FeatureError::EmptyAudio);
    }
    let an = SpectralAnalyzer::shared();
    let frames = clip.len() / HOP + 1;
    let mut bins = Vec::with_capacity(frames * N_BINS);
    for k in 0..frames {
        bins.extend(an.spectrum(&centered_frame(clip.samples(), k)));
    }
    Ok(Spectrogram { bins, frames })
}

/// Raw (unnormalized) 12-bin chromagram.
pub fn chroma(spec: &Spectrogram) -> FeatureMatrix {
    let an = SpectralAnalyzer::shared();
    let mut data = Vec::with_capacity(spec.frames * 12);
    for i in 0..spec.frames {
        data.extend(an.chroma_from_power(&spec.power_frame(i)));
    }
    FeatureMatrix::new(data, spec.frames, 12, FeatureKind::Chroma, FrameClock::default())
        .expect("chroma of finite spectrum")
}

/// 66-band HTK log-mel spectrogram, natural log with a 1e-6 floor.
pub fn log_mel(spec: &Spectrogram) -> FeatureMatrix {
    let an = SpectralAnalyzer::shared();
    let mut data = Vec::with_capacity(spec.frames * MEL_BANDS);
    for i in 0..spec.frames {
        data.extend(an.log_mel_from_power(&spec.power_frame(i)));
    }
    FeatureMatrix::new(
        data,
        spec.frames,
        MEL_BANDS,
        FeatureKind::Mel,
        FrameClock::default(),
    )
    .expect("log-mel of finite spectrum")
}

/// Orthonormal DCT-II of a row, first `n` coefficients.
pub(crate) fn dct_row(row: &[f64], n: usize) -> Vec<f64> {
    let len = row.len() as f64;
    (0..n)
        .map(|k| {
            let scale = if k == 0 {
                (1.0 / len).sqrt()
            } else {
                (2.0 / len).sqrt()
            };
            let s: f64 = row
                .iter()
                .enumerate()
                .map(|(i, x)| {
                    x * (std::f64::consts::PI * k as f64 * (2 * i + 1) as f64 / (2.0 * len)).cos()
                })
                .sum();
            scale * s
        })
        .collect()
}

pub fn mfcc(mel: &FeatureMatrix, n: usize) -> Result<FeatureMatrix, FeatureError> {
    if mel.dims() != MEL_BANDS {
        return Err(FeatureError::BadDimension {
            expected: MEL_BANDS,
            got: mel.dims(),
        });
    }
    if n == 0 || n > MEL_BANDS {
        return Err(FeatureError::BadParam(format!("{n} coefficients")));
    }
    let mut data = Vec::with_capacity(mel.frames() * n);
    for row in mel.rows() {
        data.extend(dct_row(row, n));
    }
    FeatureMatrix::new(data, mel.frames(), n, FeatureKind::Mfcc, mel.clock())
}
