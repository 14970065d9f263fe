//! Toy speech encoder: a strided linear front-end (20 ms hop at 16 kHz,
//! non-overlapping windows) followed by a small transformer stack. Sits
//! behind the same forward contract an adapter for a real pretrained
//! checkpoint would implement: (samples, rate) -> (M x h hidden, stride).

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::VarId;
use crate::data::Utterance;
use crate::nn::{LinearParams, ParamStore, Session, TransformerLayerParams};
use crate::tensor::Mat;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeechEncoderConfig {
    pub sample_rate: u32,
    /// Samples per output frame. 320 at 16 kHz = 20 ms stride.
    pub stride: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_width: usize,
}

impl SpeechEncoderConfig {
    pub fn toy() -> Self {
        SpeechEncoderConfig {
            sample_rate: 16_000,
            stride: 320,
            hidden: 32,
            layers: 1,
            heads: 2,
            ff_width: 64,
        }
    }

    pub fn frame_stride_s(&self) -> f64 {
        self.stride as f64 / self.sample_rate as f64
    }

    /// Frame count for a given sample count: ceil(len / stride), so the
    /// tail partial window is zero-padded rather than dropped.
    pub fn num_frames(&self, samples: usize) -> usize {
        samples.div_ceil(self.stride)
    }
}

pub struct SpeechEncoderParams {
    pub cfg: SpeechEncoderConfig,
    frontend: LinearParams,
    layers: Vec<TransformerLayerParams>,
    param_range: (usize, usize),
}

impl SpeechEncoderParams {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: SpeechEncoderConfig,
    ) -> Self {
        let start = store.len();
        let frontend = LinearParams::new(
            store,
            rng,
            &format!("{name}.frontend"),
            cfg.stride,
            cfg.hidden,
            true,
        );
        let layers = (0..cfg.layers)
            .map(|i| {
                TransformerLayerParams::new(
                    store,
                    rng,
                    &format!("{name}.layer{i}"),
                    cfg.hidden,
                    cfg.heads,
                    cfg.ff_width,
                )
            })
            .collect();
        let end = store.len();
        SpeechEncoderParams {
            cfg,
            frontend,
            layers,
            param_range: (start, end),
        }
    }

    /// Parameter ids owned by this encoder, for freeze/unfreeze control.
    pub fn param_ids(&self) -> std::ops::Range<usize> {
        self.param_range.0..self.param_range.1
    }

    pub fn set_trainable(&self, store: &mut ParamStore, flag: bool) {
        for id in self.param_ids() {
            store.set_trainable(id, flag);
        }
    }

    fn frame(&self, samples: &[f64]) -> Mat {
        let m = self.cfg.num_frames(samples.len());
        let mut frames = Mat::zeros(m, self.cfg.stride);
        for (i, &s) in samples.iter().enumerate() {
            frames.data[i] = s; // row-major M x stride is exactly sample order
        }
        frames
    }

    /// Returns the M x h hidden matrix for the utterance.
    pub fn forward(&self, sess: &mut Session, u: &Utterance) -> Result<VarId> {
        if u.sample_rate != self.cfg.sample_rate {
            return Err(Error::Config(format!(
                "utterance rate {} does not match encoder rate {}; resample upstream",
                u.sample_rate, self.cfg.sample_rate
            )));
        }
        if u.samples.is_empty() {
            return Err(Error::Validation("cannot encode empty utterance".into()));
        }
        let frames = sess.constant(self.frame(&u.samples));
        let mut x = self.frontend.forward(sess, frames);
        x = sess.tape.gelu(x);
        for layer in &self.layers {
            x = layer.forward(sess, x);
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn toy_utterance(n: usize) -> Utterance {
        Utterance {
            samples: (0..n).map(|i| (i as f64 * 0.05).sin() * 0.3).collect(),
            sample_rate: 16_000,
            alignment: None,
        }
    }

    #[test]
    fn frame_count_formula() {
        let cfg = SpeechEncoderConfig::toy();
        // 2.4 s at 16 kHz with a 20 ms stride.
        assert_eq!(cfg.num_frames(38_400), 120);
        assert_eq!(cfg.num_frames(1), 1);
        assert_eq!(cfg.num_frames(321), 2);
    }

    #[test]
    fn forward_shape_and_direct_count() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = SpeechEncoderParams::new(&mut store, &mut rng, "speech", SpeechEncoderConfig::toy());
        let u = toy_utterance(38_400);
        let mut sess = Session::new(&store);
        let h = enc.forward(&mut sess, &u).unwrap();
        assert_eq!(sess.tape.value(h).rows, 120);
        assert_eq!(sess.tape.value(h).cols, 32);
    }

    #[test]
    fn rate_mismatch_is_config_error() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = SpeechEncoderParams::new(&mut store, &mut rng, "speech", SpeechEncoderConfig::toy());
        let mut u = toy_utterance(1000);
        u.sample_rate = 8000;
        let mut sess = Session::new(&store);
        assert!(matches!(enc.forward(&mut sess, &u), Err(Error::Config(_))));
    }

    #[test]
    fn deterministic_across_runs() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let enc = SpeechEncoderParams::new(&mut store, &mut rng, "speech", SpeechEncoderConfig::toy());
        let u = toy_utterance(4800);
        let run = || {
            let mut sess = Session::new(&store);
            let h = enc.forward(&mut sess, &u).unwrap();
            sess.tape.value(h).data.clone()
        };
        assert_eq!(run(), run());
    }
}
