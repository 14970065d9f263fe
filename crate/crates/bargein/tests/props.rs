//! Property tests for the invariants the pipeline leans on.

use proptest::prelude::*;

use bargein::data::{write_wav, read_wav};
use bargein::infusion::word_end_frame;

proptest! {
    // Word-end frames stay in range and respect time ordering.
    #[test]
    fn word_end_frame_in_bounds(t in 0.0f64..100.0, frames in 1usize..500) {
        let f = word_end_frame(t, 0.02, frames);
        prop_assert!(f < frames);
    }

    #[test]
    fn word_end_frame_monotone(a in 0.0f64..10.0, b in 0.0f64..10.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(word_end_frame(lo, 0.02, 600) <= word_end_frame(hi, 0.02, 600));
    }

    // WAV round trip is exact for samples already on the i16 grid.
    #[test]
    fn wav_roundtrip_exact(raw in proptest::collection::vec(-32768i32..32768, 1..400)) {
        let samples: Vec<f64> = raw.iter().map(|&q| q as f64 / 32768.0).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        write_wav(&path, &samples, 16_000).unwrap();
        let back = read_wav(&path).unwrap();
        prop_assert_eq!(back.sample_rate, 16_000);
        prop_assert_eq!(back.samples, samples);
    }
}
