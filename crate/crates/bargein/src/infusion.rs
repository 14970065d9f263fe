//! Lexical-infusion pretraining: teach the speech encoder (optionally
//! through extra transformer "language layers") to predict frozen
//! text-encoder word embeddings at word-end frames, minimizing a squared
//! L2 loss. The resulting representations replace the plain encoder
//! output downstream; with language layers the final language-layer and
//! encoder outputs are concatenated per frame.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::VarId;
use crate::checkpoint::{import_matching, Checkpoint};
use crate::data::{CorpusManifest, Split, Utterance};
use crate::encoders::{EncoderOutput, SpeechEncoderConfig, SpeechEncoderParams, TextEncoder};
use crate::nn::{LinearParams, Optimizer, OptimizerKind, ParamStore, Session, TransformerLayerParams};
use crate::tensor::Mat;
use crate::{Error, Result};

/// Maps a word's alignment end time to the closest encoder frame:
/// round half up, clamped into [0, frames-1].
pub fn word_end_frame(end_time: f64, frame_stride: f64, frames: usize) -> usize {
    assert!(end_time >= 0.0 && frame_stride > 0.0 && frames >= 1);
    let idx = (end_time / frame_stride + 0.5).floor() as usize;
    idx.min(frames - 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfusionConfig {
    pub speech: SpeechEncoderConfig,
    /// Number of language layers L; 0 infuses directly into encoder weights.
    pub language_layers: usize,
    /// Freeze the speech encoder and train only the language layers + head.
    pub freeze_encoder: bool,
    pub seed: u64,
}

impl InfusionConfig {
    pub fn toy(language_layers: usize, seed: u64) -> Self {
        InfusionConfig {
            speech: SpeechEncoderConfig::toy(),
            language_layers,
            freeze_encoder: false,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl PretrainConfig {
    /// The full-size recipe: ADAM 2e-4, clip 5, 800k steps, batch 16.
    pub fn full(seed: u64) -> Self {
        PretrainConfig {
            optimizer: OptimizerKind::Adam,
            learning_rate: 2e-4,
            steps: 800_000,
            batch_size: 16,
            clip_norm: Some(5.0),
            seed,
        }
    }

    pub fn toy(seed: u64) -> Self {
        PretrainConfig {
            steps: 2_000,
            batch_size: 8,
            ..Self::full(seed)
        }
    }
}

/// A per-word regression target: the contextual text embedding and the
/// frame index it is predicted from.
#[derive(Debug, Clone)]
pub struct WordTarget {
    pub word: String,
    pub embed_w: Vec<f64>,
    pub end_frame: usize,
}

pub struct InfusionModel {
    pub cfg: InfusionConfig,
    pub store: ParamStore,
    speech: SpeechEncoderParams,
    lang_layers: Vec<TransformerLayerParams>,
    head: LinearParams,
    pub text_encoder: TextEncoder,
}

impl InfusionModel {
    pub fn new(cfg: InfusionConfig) -> Self {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let h = cfg.speech.hidden;
        let speech = SpeechEncoderParams::new(&mut store, &mut rng, "speech", cfg.speech);
        let lang_layers: Vec<_> = (0..cfg.language_layers)
            .map(|i| {
                TransformerLayerParams::new(
                    &mut store,
                    &mut rng,
                    &format!("lang{i}"),
                    h,
                    cfg.speech.heads,
                    cfg.speech.ff_width,
                )
            })
            .collect();
        let text_encoder = TextEncoder::new(h);
        // Distinct head even when widths coincide; dropped at export time.
        let head = LinearParams::new(&mut store, &mut rng, "infusion.head", h, text_encoder.hidden, true);
        if cfg.freeze_encoder {
            speech.set_trainable(&mut store, false);
        }
        InfusionModel {
            cfg,
            store,
            speech,
            lang_layers,
            head,
            text_encoder,
        }
    }

    /// Word targets for an aligned utterance: contextual word embeddings
    /// from the whole transcript, plus word-end frame indices.
    pub fn word_targets(&self, u: &Utterance) -> Result<Vec<WordTarget>> {
        let alignment = u
            .alignment
            .as_ref()
            .ok_or_else(|| Error::Validation("utterance has no alignment".into()))?;
        if alignment.is_empty() {
            return Err(Error::Validation("utterance alignment is empty".into()));
        }
        let words: Vec<String> = alignment.iter().map(|w| w.word.clone()).collect();
        let embeds = self.text_encoder.transcript_word_embeddings(&words)?;
        let frames = self.cfg.speech.num_frames(u.samples.len());
        let stride = self.cfg.speech.frame_stride_s();
        Ok(alignment
            .iter()
            .zip(embeds)
            .map(|(w, embed_w)| WordTarget {
                word: w.word.clone(),
                embed_w,
                end_frame: word_end_frame(w.end_time, stride, frames),
            })
            .collect())
    }

    /// Frame features the prediction head consumes: encoder output run
    /// through the language layers when present, plain encoder output when
    /// L = 0.
    fn predictor_frames(&self, sess: &mut Session, u: &Utterance) -> Result<VarId> {
        let mut x = self.speech.forward(sess, u)?;
        for layer in &self.lang_layers {
            x = layer.forward(sess, x);
        }
        Ok(x)
    }

    fn utterance_loss(&self, sess: &mut Session, u: &Utterance) -> Result<VarId> {
        let targets = self.word_targets(u)?;
        let frames = self.predictor_frames(sess, u)?;
        let preds = self.head.forward(sess, frames);
        let idx: Vec<usize> = targets.iter().map(|t| t.end_frame).collect();
        let picked = sess.tape.select_rows(preds, &idx);
        let mut target_mat = Mat::zeros(targets.len(), self.text_encoder.hidden);
        for (r, t) in targets.iter().enumerate() {
            target_mat.data[r * target_mat.cols..(r + 1) * target_mat.cols]
                .copy_from_slice(&t.embed_w);
        }
        let tgt = sess.constant(target_mat);
        let neg = sess.tape.scale(tgt, -1.0);
        let diff = sess.tape.add(picked, neg);
        let sq = sess.tape.mul(diff, diff);
        Ok(sess.tape.sum_all(sq))
    }

    /// Eq-style per-utterance loss: sum over words of squared L2 distance
    /// between the head output at the word-end frame and the word embedding.
    pub fn infusion_loss(&self, u: &Utterance) -> Result<f64> {
        let mut sess = Session::new(&self.store);
        let loss = self.utterance_loss(&mut sess, u)?;
        Ok(sess.tape.value(loss).data[0])
    }

    fn batch_loss(&self, sess: &mut Session, batch: &[&Utterance]) -> Result<VarId> {
        let mut total: Option<VarId> = None;
        for u in batch {
            let l = self.utterance_loss(sess, u)?;
            total = Some(match total {
                Some(t) => sess.tape.add(t, l),
                None => l,
            });
        }
        Ok(sess.tape.scale(total.unwrap(), 1.0 / batch.len() as f64))
    }

    /// Mean over utterances of the per-utterance word-sum loss.
    pub fn batch_infusion_loss(&self, batch: &[&Utterance]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Validation("infusion loss over empty batch".into()));
        }
        let mut sess = Session::new(&self.store);
        let loss = self.batch_loss(&mut sess, batch)?;
        Ok(sess.tape.value(loss).data[0])
    }

    /// Loss plus analytic gradients aligned with the store, for gradient
    /// verification against finite differences.
    pub fn loss_grads(&self, batch: &[&Utterance]) -> Result<(f64, Vec<Mat>)> {
        if batch.is_empty() {
            return Err(Error::Validation("infusion loss over empty batch".into()));
        }
        let mut sess = Session::new(&self.store);
        let loss = self.batch_loss(&mut sess, batch)?;
        let v = sess.tape.value(loss).data[0];
        let grads = sess.grads(loss);
        Ok((v, grads))
    }

    /// Pretraining loop. Utterances without alignments are skipped with a
    /// count; an all-unaligned corpus is a configuration error. Returns the
    /// per-step loss curve.
    pub fn pretrain(&mut self, corpus: &CorpusManifest, cfg: &PretrainConfig) -> Result<PretrainOutcome> {
        if cfg.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        let aligned: Vec<&Utterance> = corpus
            .turns
            .iter()
            .filter(|t| t.split == Split::Train)
            .map(|t| &t.user)
            .filter(|u| u.alignment.as_ref().is_some_and(|a| !a.is_empty()))
            .collect();
        let skipped = corpus.split(Split::Train).count() - aligned.len();
        if aligned.is_empty() {
            return Err(Error::Config(
                "no aligned utterances in the train split; infusion needs word alignments".into(),
            ));
        }

        let text_sig_before = self.text_encoder.signature();
        let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, &self.store);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x1F51);
        let mut order: Vec<usize> = Vec::new();
        let mut curve = Vec::with_capacity(cfg.steps);
        for _ in 0..cfg.steps {
            let mut batch = Vec::with_capacity(cfg.batch_size);
            for _ in 0..cfg.batch_size {
                if order.is_empty() {
                    order = (0..aligned.len()).collect();
                    order.shuffle(&mut rng);
                }
                batch.push(aligned[order.pop().unwrap()]);
            }
            let mut sess = Session::new(&self.store);
            let loss = self.batch_loss(&mut sess, &batch)?;
            let loss_val = sess.tape.value(loss).data[0];
            if !loss_val.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite infusion loss at step {}",
                    curve.len()
                )));
            }
            let mut grads = sess.grads(loss);
            opt.step(&mut self.store, &mut grads, cfg.clip_norm)?;
            curve.push(loss_val);
        }
        debug_assert_eq!(self.text_encoder.signature(), text_sig_before);
        Ok(PretrainOutcome {
            loss_curve: curve,
            skipped_unaligned: skipped,
        })
    }

    /// Exported representation: plain encoder output when L = 0 (the
    /// weights themselves were infused); otherwise per-frame concatenation
    /// of the final language-layer output with the encoder's final layer.
    pub fn infused_representation(&self, u: &Utterance) -> Result<EncoderOutput> {
        let mut sess = Session::new(&self.store);
        let enc_out = self.speech.forward(&mut sess, u)?;
        let rep = if self.lang_layers.is_empty() {
            enc_out
        } else {
            let mut x = enc_out;
            for layer in &self.lang_layers {
                x = layer.forward(&mut sess, x);
            }
            sess.tape.concat_cols(&[x, enc_out])
        };
        Ok(EncoderOutput {
            hidden: sess.tape.value(rep).clone(),
            frame_stride: self.cfg.speech.frame_stride_s(),
        })
    }

    /// Plain (non-infused) encoder output, for probe comparisons.
    pub fn plain_representation(&self, u: &Utterance) -> Result<EncoderOutput> {
        let mut sess = Session::new(&self.store);
        let enc_out = self.speech.forward(&mut sess, u)?;
        Ok(EncoderOutput {
            hidden: sess.tape.value(enc_out).clone(),
            frame_stride: self.cfg.speech.frame_stride_s(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let cfg = serde_json::to_value(&self.cfg)
            .map_err(|e| Error::Io(format!("serialize config: {e}")))?;
        Checkpoint::new(cfg, self.store.clone()).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let cfg: InfusionConfig = serde_json::from_value(ck.config.clone())
            .map_err(|e| Error::Validation(format!("checkpoint config: {e}")))?;
        let mut model = InfusionModel::new(cfg);
        let imported = import_matching(&mut model.store, &ck.params);
        if imported != model.store.len() {
            return Err(Error::Validation(format!(
                "checkpoint tensor mismatch: imported {} of {}",
                imported,
                model.store.len()
            )));
        }
        Ok(model)
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub loss_curve: Vec<f64>,
    pub skipped_unaligned: usize,
}
