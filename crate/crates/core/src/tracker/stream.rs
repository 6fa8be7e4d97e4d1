use std::collections::VecDeque;

use crate::features::{reflect_index, SpectralAnalyzer, FFT_SIZE, HOP};

const HEAD: usize = FFT_SIZE + 1;
const TAIL: usize = 2 * FFT_SIZE;

/// Frames whose samples are all known after `total` samples, before the
/// end of the signal is reached.
pub fn ready_frames(total: usize) -> usize {
    if total <= FFT_SIZE / 2 {
        0
    } else {
        (total - FFT_SIZE / 2) / HOP + 1
    }
}

/// Incremental centered STFT over a sample stream.
///
/// Emits the power spectrum of frame `k` as soon as every sample it needs is
/// known; frames that need end-of-signal reflection are emitted by
/// [`StreamingExtractor::finish`]. Output equals whole-file extraction bit for bit.
#[derive(Debug, Clone, Default)]
pub struct StreamingExtractor {
    head: Vec<f32>,
    tail: VecDeque<f32>,
    total: usize,
    next_frame: usize,
    finished: bool,
}

impl StreamingExtractor {
    pub fn new() -> Self {
        Self {
            head: Vec::with_capacity(HEAD),
            tail: VecDeque::with_capacity(TAIL + 1),
            ..Self::default()
        }
    }

    pub fn samples_seen(&self) -> usize {
        self.total
    }

    pub fn frames_emitted(&self) -> usize {
        self.next_frame
    }

    /// Appends samples and returns power spectra of newly completed frames.
    pub fn push(&mut self, samples: &[f32]) -> Vec<Vec<f64>> {
        assert!(!self.finished, "push after finish");
        let mut out = Vec::new();
        // hop-sized pieces keep every pending frame inside the tail buffer
        for piece in samples.chunks(HOP) {
            for &s in piece {
                if self.head.len() < HEAD {
                    self.head.push(s);
                }
                if self.tail.len() == TAIL {
                    self.tail.pop_front();
                }
                self.tail.push_back(s);
            }
            self.total += piece.len();
            while self.ready(self.next_frame) {
                out.push(self.frame_power(self.next_frame, None));
                self.next_frame += 1;
            }
        }
        out
    }

    /// Flushes the frames that depend on the end of the signal.
    pub fn finish(&mut self) -> Vec<Vec<f64>> {
        if self.finished || self.total == 0 {
            self.finished = true;
            return Vec::new();
        }
        self.finished = true;
        let frames = self.total / HOP + 1;
        let mut out = Vec::new();
        while self.next_frame < frames {
            out.push(self.frame_power(self.next_frame, Some(self.total)));
            self.next_frame += 1;
        }
        out
    }

    fn ready(&self, k: usize) -> bool {
        let need = k * HOP + FFT_SIZE / 2 + usize::from(k == 0);
        self.total >= need
    }

    fn sample(&self, pos: usize) -> f32 {
        if pos < self.head.len() {
            return self.head[pos];
        }
        let base = self.total - self.tail.len();
        self.tail[pos.checked_sub(base).expect("sample still buffered")]
    }

    fn frame_power(&self, k: usize, end: Option<usize>) -> Vec<f64> {
        let start = (k * HOP) as isize - (FFT_SIZE / 2) as isize;
        let frame: Vec<f64> = (0..FFT_SIZE as isize)
            .map(|i| {
                let pos = start + i;
                let idx = match end {
                    Some(len) => reflect_index(pos, len),
                    None => pos.unsigned_abs(),
                };
                self.sample(idx) as f64
            })
            .collect();
        SpectralAnalyzer::shared().power(&frame)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::AudioClip;
    use crate::features::{chroma, log_mel, stft};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn stream_all(samples: &[f32], chunk: usize) -> Vec<Vec<f64>> {
        let mut ex = StreamingExtractor::new();
        let mut out = Vec::new();
        for c in samples.chunks(chunk) {
            out.extend(ex.push(c));
        }
        out.extend(ex.finish());
        out
    }

    #[test]
    fn matches_offline_for_many_lengths() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let an = SpectralAnalyzer::shared();
        for len in [1usize, 2, 639, 640, 641, 642, 1279, 1280, 1281, 1920, 2560, 5000, 16001] {
            let samples: Vec<f32> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let clip = AudioClip::new(samples.clone()).unwrap();
            let spec = stft(&clip).unwrap();
            let offline_c = chroma(&spec);
            let offline_m = log_mel(&spec);
            for chunk in [1usize, 7, 640, 2560, 20000] {
                let frames = stream_all(&samples, chunk);
                assert_eq!(frames.len(), spec.frames(), "len {len} chunk {chunk}");
                for (k, p) in frames.iter().enumerate() {
                    assert_eq!(an.chroma_from_power(p), offline_c.row(k), "len {len} frame {k}");
                    assert_eq!(an.log_mel_from_power(p), offline_m.row(k));
                }
            }
        }
    }

    #[test]
    fn frames_emitted_as_soon_as_complete() {
        let mut ex = StreamingExtractor::new();
        assert_eq!(ex.push(&[0.0; 640]).len(), 0);
        assert_eq!(ex.push(&[0.0; 1]).len(), 1);
        assert_eq!(ex.push(&[0.0; 639]).len(), 1);
        assert_eq!(ex.push(&[0.0; 2560]).len(), 4);
        assert_eq!(ex.frames_emitted(), 6);
        assert_eq!(ex.finish().len(), 1);
        assert_eq!(ex.frames_emitted(), 3840 / 640 + 1);
        assert!(ex.finish().is_empty());
    }

    #[test]
    fn ready_count_matches_extractor() {
        let mut ex = StreamingExtractor::new();
        let mut total = 0;
        for n in [1usize, 639, 1, 1, 638, 1, 2560, 100, 540, 1] {
            ex.push(&vec![0.0; n]);
            total += n;
            assert_eq!(ex.frames_emitted(), ready_frames(total), "after {total}");
        }
    }
}
