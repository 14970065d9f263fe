//! The three representation branches: speech, bot prompt, dialogue context.
//! Each branch ends in a bias-free linear projection to a common width `k`,
//! so the downstream fusion layer always sees equally sized vectors.

pub mod speech;
pub mod text;

pub use speech::{SpeechEncoderConfig, SpeechEncoderParams};
pub use text::TextEncoder;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DialogueContextLabel, NUM_CONTEXT_LABELS};
use crate::autodiff::VarId;
use crate::nn::{LinearParams, ParamStore, Session};
use crate::tensor::Mat;
use crate::{Error, Result};

/// Time-major encoder output with the stride binding frames to seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub hidden: Mat,
    pub frame_stride: f64,
}

/// Mean over the frame axis of an M x h hidden matrix.
pub fn mean_pool(hidden: &Mat) -> Result<Vec<f64>> {
    if hidden.rows == 0 {
        return Err(Error::Validation("mean_pool over empty sequence".into()));
    }
    Ok(crate::tensor::mean_rows(hidden))
}

/// Branch widths. The full-size profile matches the production model
/// dimensions; the toy profile keeps tests and desk runs fast.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WidthProfile {
    /// Speech / text hidden width h.
    pub hidden: usize,
    /// Dialogue context embedding width m.
    pub context_embed: usize,
    /// Common projection width k.
    pub projection: usize,
}

impl WidthProfile {
    pub fn full() -> Self {
        WidthProfile {
            hidden: 768,
            context_embed: 64,
            projection: 128,
        }
    }

    pub fn toy() -> Self {
        WidthProfile {
            hidden: 32,
            context_embed: 8,
            projection: 16,
        }
    }
}

/// Trainable d x m label embedding table plus an m -> k projection.
pub struct ContextEmbeddingParams {
    pub table: crate::nn::ParamId,
    pub projection: LinearParams,
}

impl ContextEmbeddingParams {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        embed_width: usize,
        proj_width: usize,
    ) -> Self {
        ContextEmbeddingParams {
            table: store.init("context.table", NUM_CONTEXT_LABELS, embed_width, rng),
            projection: LinearParams::new(store, rng, "context.proj", embed_width, proj_width, false),
        }
    }

    /// One-of-d row selection followed by the linear projection.
    pub fn forward(&self, sess: &mut Session, label: DialogueContextLabel) -> VarId {
        let table = sess.param(self.table);
        let row = sess.tape.select_rows(table, &[label.id]);
        self.projection.forward(sess, row)
    }
}
