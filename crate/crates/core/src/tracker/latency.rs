use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::audio::{CHUNK_SAMPLES, SAMPLE_RATE};

/// Buckets per doubling; gives about 0.5% resolution.
const PER_OCTAVE: f64 = 128.0;
/// Smallest resolved latency, in seconds.
const FLOOR: f64 = 1e-7;
const BUCKETS: usize = 128 * 34;

/// Per-chunk processing times kept in a fixed-size log histogram, so memory
/// does not grow with the length of the performance.
#[derive(Debug, Clone)]
pub struct LatencyRecorder {
    counts: Vec<u64>,
    n: u64,
    sum: f64,
    max: f64,
}

impl Default for LatencyRecorder {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub chunks: u64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub max_ms: f64,
    pub mean_ms: f64,
    /// Mean processing time over chunk duration.
    pub rtf: f64,
    pub stalls: usize,
}

impl LatencyRecorder {
    pub fn new() -> Self {
        Self {
            counts: vec![0; BUCKETS],
            n: 0,
            sum: 0.0,
            max: 0.0,
        }
    }

    pub fn record(&mut self, d: Duration) {
        let s = d.as_secs_f64();
        self.counts[bucket(s)] += 1;
        self.n += 1;
        self.sum += s;
        self.max = self.max.max(s);
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    /// Upper edge of the bucket holding the `q` quantile, in seconds.
    pub fn quantile(&self, q: f64) -> f64 {
        if self.n == 0 {
            return 0.0;
        }
        let rank = ((q * self.n as f64).ceil() as u64).clamp(1, self.n);
        let mut seen = 0;
        for (i, &c) in self.counts.iter().enumerate() {
            seen += c;
            if seen >= rank {
                if i == BUCKETS - 1 {
                    return self.max;
                }
                return upper_edge(i).min(self.max);
            }
        }
        self.max
    }

    pub fn report(&self, stalls: usize) -> LatencyReport {
        let mean = if self.n == 0 { 0.0 } else { self.sum / self.n as f64 };
        LatencyReport {
            chunks: self.n,
            p50_ms: self.quantile(0.5) * 1e3,
            p95_ms: self.quantile(0.95) * 1e3,
            max_ms: self.max * 1e3,
            mean_ms: mean * 1e3,
            rtf: mean / (CHUNK_SAMPLES as f64 / SAMPLE_RATE as f64),
            stalls,
        }
    }
}

fn bucket(s: f64) -> usize {
    if s <= FLOOR {
        return 0;
    }
    let b = ((s / FLOOR).log2() * PER_OCTAVE).floor() as usize + 1;
    b.min(BUCKETS - 1)
}

fn upper_edge(i: usize) -> f64 {
    FLOOR * (i as f64 / PER_OCTAVE).exp2()
}
