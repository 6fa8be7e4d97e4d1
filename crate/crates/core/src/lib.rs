//! Real-time lyrics alignment for classical vocal performance.
//!
//! A reference recording is aligned offline to a symbolic score, which turns
//! the score's lyrics into a timeline on the reference. A live (target)
//! performance is then tracked against the reference with online DTW over
//! chroma and phonetic-posteriorgram features, and lyric positions are
//! emitted as events.

pub mod audio;
pub mod eval;
pub mod features;
pub mod offline_align;
pub mod online_align;
pub mod ppg;
pub mod score;
pub mod tracker;
pub mod timeline;
