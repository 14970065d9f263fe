//! The contextual barge-in classifier: concatenate the enabled branch
//! representations (speech, bot prompt, dialogue context), apply a tanh
//! feed-forward fusion layer, and classify with a 2-way softmax head.
//! Includes the supervised training loop.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::VarId;
use crate::checkpoint::{import_matching, Checkpoint};
use crate::data::{BargeInLabel, CorpusManifest, DialogueTurn, Split, Utterance};
use crate::encoders::{
    ContextEmbeddingParams, EncoderOutput, SpeechEncoderConfig, SpeechEncoderParams, TextEncoder,
    WidthProfile,
};
use crate::nn::{
    LinearParams, Optimizer, OptimizerKind, ParamStore, Session, TransformerLayerParams,
};
use crate::tensor::Mat;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub widths: WidthProfile,
    pub speech: SpeechEncoderConfig,
    pub use_prompt: bool,
    pub use_context: bool,
    /// Extra transformer layers from infusion pretraining; when > 0 the
    /// speech representation is the per-frame concatenation of the final
    /// language layer and the encoder's final layer (width 2h).
    pub language_layers: usize,
    /// Fusion hidden width c_out.
    pub fusion_hidden: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl FusionConfig {
    pub fn toy(seed: u64) -> Self {
        FusionConfig {
            widths: WidthProfile::toy(),
            speech: SpeechEncoderConfig::toy(),
            use_prompt: false,
            use_context: false,
            language_layers: 0,
            fusion_hidden: 16,
            dropout: 0.2,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub dropout: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub fine_tune_speech: bool,
    pub clip_norm: Option<f64>,
}

impl TrainConfig {
    /// The full-size downstream recipe: SGD 5e-4, dropout 0.2.
    pub fn full(seed: u64) -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Sgd,
            learning_rate: 5e-4,
            dropout: 0.2,
            epochs: 20,
            batch_size: 16,
            seed,
            fine_tune_speech: true,
            clip_norm: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must be in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_recall: f64,
    pub val_f1: f64,
}

/// Per-branch wall-clock of one forward pass, milliseconds.
#[derive(Debug, Clone, Copy)]
pub struct BranchTimings {
    pub branch_ms: [f64; 3],
}

pub struct FusionModel {
    pub cfg: FusionConfig,
    pub store: ParamStore,
    speech: SpeechEncoderParams,
    lang_layers: Vec<TransformerLayerParams>,
    speech_proj: LinearParams,
    text_encoder: TextEncoder,
    prompt_proj: Option<LinearParams>,
    context: Option<ContextEmbeddingParams>,
    fusion: LinearParams,
    head: LinearParams,
}

impl FusionModel {
    pub fn new(cfg: FusionConfig) -> Self {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let h = cfg.widths.hidden;
        let k = cfg.widths.projection;
        let speech = SpeechEncoderParams::new(&mut store, &mut rng, "speech", cfg.speech);
        let lang_layers = (0..cfg.language_layers)
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
            .collect::<Vec<_>>();
        let rep_width = if cfg.language_layers > 0 { 2 * h } else { h };
        let speech_proj = LinearParams::new(&mut store, &mut rng, "proj.speech", rep_width, k, false);
        let text_encoder = TextEncoder::new(h);
        let prompt_proj = cfg
            .use_prompt
            .then(|| LinearParams::new(&mut store, &mut rng, "proj.prompt", h, k, false));
        let context = cfg
            .use_context
            .then(|| ContextEmbeddingParams::new(&mut store, &mut rng, cfg.widths.context_embed, k));
        let enabled = 1 + cfg.use_prompt as usize + cfg.use_context as usize;
        let fusion = LinearParams::new(&mut store, &mut rng, "fusion", enabled * k, cfg.fusion_hidden, true);
        let head = LinearParams::new(&mut store, &mut rng, "head", cfg.fusion_hidden, 2, true);
        FusionModel {
            cfg,
            store,
            speech,
            lang_layers,
            speech_proj,
            text_encoder,
            prompt_proj,
            context,
            fusion,
            head,
        }
    }

    /// Per-frame speech representation: encoder output, with the language
    /// layers' final output concatenated when they exist.
    fn speech_rep(&self, sess: &mut Session, u: &Utterance) -> Result<VarId> {
        let enc_out = self.speech.forward(sess, u)?;
        if self.lang_layers.is_empty() {
            return Ok(enc_out);
        }
        let mut x = enc_out;
        for layer in &self.lang_layers {
            x = layer.forward(sess, x);
        }
        Ok(sess.tape.concat_cols(&[x, enc_out]))
    }

    /// Pooled, pre-projection speech vector.
    fn pooled_speech(&self, sess: &mut Session, u: &Utterance) -> Result<VarId> {
        let rep = self.speech_rep(sess, u)?;
        Ok(sess.tape.mean_rows(rep))
    }

    /// Mean-pool the encoder frames and project: r_x = W^x * mean(H_x).
    /// Also returns the frame-level output for downstream consumers.
    pub fn encode_speech(&self, u: &Utterance) -> Result<(Vec<f64>, EncoderOutput)> {
        let mut sess = Session::new(&self.store);
        let rep = self.speech_rep(&mut sess, u)?;
        let pooled = sess.tape.mean_rows(rep);
        let rx = self.speech_proj.forward(&mut sess, pooled);
        Ok((
            sess.tape.value(rx).data.clone(),
            EncoderOutput {
                hidden: sess.tape.value(rep).clone(),
                frame_stride: self.cfg.speech.frame_stride_s(),
            },
        ))
    }

    /// r_p = W^p * mean over token hidden vectors.
    pub fn encode_prompt(&self, text: &str) -> Result<Vec<f64>> {
        let proj = self.prompt_proj.as_ref().ok_or_else(|| {
            Error::Config("prompt branch is not enabled in this model".into())
        })?;
        let pooled = self.text_encoder.pooled(text)?;
        let mut sess = Session::new(&self.store);
        let p = sess.constant(Mat::row_vec(pooled));
        let rp = proj.forward(&mut sess, p);
        Ok(sess.tape.value(rp).data.clone())
    }

    /// Concatenated branch vector in the fixed order speech, prompt, context.
    fn branch_concat(
        &self,
        sess: &mut Session,
        turn: &DialogueTurn,
        speech_pooled_cache: Option<&BTreeMap<String, Vec<f64>>>,
        prompt_cache: Option<&BTreeMap<String, Vec<f64>>>,
    ) -> Result<VarId> {
        let pooled = match speech_pooled_cache.and_then(|c| c.get(&turn.id)) {
            Some(v) => sess.constant(Mat::row_vec(v.clone())),
            None => self.pooled_speech(sess, &turn.user)?,
        };
        let rx = self.speech_proj.forward(sess, pooled);
        let mut parts = vec![rx];
        if let Some(proj) = &self.prompt_proj {
            if turn.prompt_text.is_empty() {
                return Err(Error::Validation(format!(
                    "turn {}: prompt branch enabled but prompt_text is empty",
                    turn.id
                )));
            }
            let pooled = match prompt_cache.and_then(|c| c.get(&turn.prompt_text)) {
                Some(v) => v.clone(),
                None => self.text_encoder.pooled(&turn.prompt_text)?,
            };
            let p = sess.constant(Mat::row_vec(pooled));
            parts.push(proj.forward(sess, p));
        }
        if let Some(ctx) = &self.context {
            parts.push(ctx.forward(sess, turn.context));
        }
        Ok(if parts.len() == 1 {
            parts[0]
        } else {
            sess.tape.concat_cols(&parts)
        })
    }

    fn logits(
        &self,
        sess: &mut Session,
        turn: &DialogueTurn,
        dropout: Option<(&mut ChaCha8Rng, f64)>,
        speech_cache: Option<&BTreeMap<String, Vec<f64>>>,
        prompt_cache: Option<&BTreeMap<String, Vec<f64>>>,
    ) -> Result<VarId> {
        let mut concat = self.branch_concat(sess, turn, speech_cache, prompt_cache)?;
        // Dropout site: the concatenated vector, before the fusion layer.
        if let Some((rng, rate)) = dropout {
            if rate > 0.0 {
                let w = sess.tape.value(concat).cols;
                let keep = 1.0 - rate;
                let mask: Vec<f64> = (0..w)
                    .map(|_| if rng.gen_bool(keep) { 1.0 / keep } else { 0.0 })
                    .collect();
                let mask = sess.constant(Mat::row_vec(mask));
                concat = sess.tape.mul(concat, mask);
            }
        }
        let fused = self.fusion.forward(sess, concat);
        let fused = sess.tape.tanh(fused);
        Ok(self.head.forward(sess, fused))
    }

    /// Inference forward: class probabilities [p_true, p_false].
    pub fn forward(&self, turn: &DialogueTurn) -> Result<[f64; 2]> {
        let mut sess = Session::new(&self.store);
        let logits = self.logits(&mut sess, turn, None, None, None)?;
        let probs = sess.tape.softmax_rows(logits);
        let v = sess.tape.value(probs);
        Ok([v.data[0], v.data[1]])
    }

    /// Forward with per-branch wall-clock, for the latency harness.
    pub fn forward_timed(&self, turn: &DialogueTurn) -> Result<BranchTimings> {
        let mut sess = Session::new(&self.store);
        let mut branch_ms = [0.0f64; 3];

        let t0 = Instant::now();
        let pooled = self.pooled_speech(&mut sess, &turn.user)?;
        let rx = self.speech_proj.forward(&mut sess, pooled);
        branch_ms[0] = t0.elapsed().as_secs_f64() * 1e3;

        let mut parts = vec![rx];
        if let Some(proj) = &self.prompt_proj {
            let t1 = Instant::now();
            let pooled = self.text_encoder.pooled(&turn.prompt_text)?;
            let p = sess.constant(Mat::row_vec(pooled));
            parts.push(proj.forward(&mut sess, p));
            branch_ms[1] = t1.elapsed().as_secs_f64() * 1e3;
        }
        if let Some(ctx) = &self.context {
            let t2 = Instant::now();
            parts.push(ctx.forward(&mut sess, turn.context));
            branch_ms[2] = t2.elapsed().as_secs_f64() * 1e3;
        }
        let concat = if parts.len() == 1 {
            parts[0]
        } else {
            sess.tape.concat_cols(&parts)
        };
        let fused = self.fusion.forward(&mut sess, concat);
        let fused = sess.tape.tanh(fused);
        let logits = self.head.forward(&mut sess, fused);
        let _ = sess.tape.softmax_rows(logits);
        Ok(BranchTimings { branch_ms })
    }

    pub fn predict(&self, turn: &DialogueTurn) -> Result<BargeInLabel> {
        let p = self.forward(turn)?;
        Ok(if p[0] >= p[1] {
            BargeInLabel::TrueBargeIn
        } else {
            BargeInLabel::FalseBargeIn
        })
    }

    /// Mean cross-entropy over a batch.
    pub fn loss(&self, batch: &[&DialogueTurn]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Validation("loss over empty batch".into()));
        }
        let mut sess = Session::new(&self.store);
        let loss = self.batch_loss(&mut sess, batch, None, None, None)?;
        Ok(sess.tape.value(loss).data[0])
    }

    /// Loss plus analytic gradients aligned with the store, for gradient
    /// verification against finite differences.
    pub fn loss_grads(&self, batch: &[&DialogueTurn]) -> Result<(f64, Vec<Mat>)> {
        if batch.is_empty() {
            return Err(Error::Validation("loss over empty batch".into()));
        }
        let mut sess = Session::new(&self.store);
        let loss = self.batch_loss(&mut sess, batch, None, None, None)?;
        let v = sess.tape.value(loss).data[0];
        let grads = sess.grads(loss);
        Ok((v, grads))
    }

    fn batch_loss(
        &self,
        sess: &mut Session,
        batch: &[&DialogueTurn],
        mut dropout: Option<(&mut ChaCha8Rng, f64)>,
        speech_cache: Option<&BTreeMap<String, Vec<f64>>>,
        prompt_cache: Option<&BTreeMap<String, Vec<f64>>>,
    ) -> Result<VarId> {
        let mut total: Option<VarId> = None;
        for turn in batch {
            let logits = self.logits(
                sess,
                turn,
                dropout.as_mut().map(|(rng, rate)| (&mut **rng, *rate)),
                speech_cache,
                prompt_cache,
            )?;
            let lp = sess.tape.log_softmax_rows(logits);
            let nll = sess.tape.nll_mean(lp, &[turn.label.index()]);
            total = Some(match total {
                Some(t) => sess.tape.add(t, nll),
                None => nll,
            });
        }
        Ok(sess.tape.scale(total.unwrap(), 1.0 / batch.len() as f64))
    }

    /// Supervised training. Returns the per-epoch metric log; the model is
    /// left holding the checkpoint with the best validation F1.
    pub fn train(&mut self, corpus: &CorpusManifest, cfg: &TrainConfig) -> Result<Vec<EpochMetrics>> {
        cfg.validate()?;
        let train_ids: Vec<usize> = corpus
            .turns
            .iter()
            .enumerate()
            .filter(|(_, t)| t.split == Split::Train)
            .map(|(i, _)| i)
            .collect();
        let has_val = corpus.split(Split::Validation).next().is_some();
        if train_ids.is_empty() || !has_val {
            return Err(Error::Config(
                "training requires non-empty train and validation splits".into(),
            ));
        }

        self.speech.set_trainable(&mut self.store, cfg.fine_tune_speech);

        // Frozen-encoder runs reuse pooled speech vectors across epochs.
        let speech_cache = if cfg.fine_tune_speech {
            None
        } else {
            let mut cache = BTreeMap::new();
            for turn in &corpus.turns {
                let mut sess = Session::new(&self.store);
                let pooled = self.pooled_speech(&mut sess, &turn.user)?;
                cache.insert(turn.id.clone(), sess.tape.value(pooled).data.clone());
            }
            Some(cache)
        };
        // The text encoder is frozen, so prompt vectors are always cacheable.
        let prompt_cache = if self.prompt_proj.is_some() {
            let mut cache = BTreeMap::new();
            for turn in &corpus.turns {
                if !cache.contains_key(&turn.prompt_text) {
                    cache.insert(
                        turn.prompt_text.clone(),
                        self.text_encoder.pooled(&turn.prompt_text)?,
                    );
                }
            }
            Some(cache)
        } else {
            None
        };

        let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, &self.store);
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9E37_79B9);
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xD20);
        let mut log = Vec::with_capacity(cfg.epochs);
        let mut best: Option<(f64, ParamStore)> = None;

        for epoch in 0..cfg.epochs {
            let mut order = train_ids.clone();
            order.shuffle(&mut shuffle_rng);
            let mut epoch_loss = 0.0;
            let mut batches = 0usize;
            for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
                let batch: Vec<&DialogueTurn> = chunk.iter().map(|&i| &corpus.turns[i]).collect();
                let mut sess = Session::new(&self.store);
                let loss = self.batch_loss(
                    &mut sess,
                    &batch,
                    Some((&mut dropout_rng, cfg.dropout)),
                    speech_cache.as_ref(),
                    prompt_cache.as_ref(),
                )?;
                let loss_val = sess.tape.value(loss).data[0];
                if !loss_val.is_finite() {
                    return Err(Error::Numerical(format!(
                        "non-finite loss at epoch {epoch} batch {bi} (turns {:?})",
                        batch.iter().map(|t| t.id.as_str()).collect::<Vec<_>>()
                    )));
                }
                let mut grads = sess.grads(loss);
                opt.step(&mut self.store, &mut grads, cfg.clip_norm)?;
                epoch_loss += loss_val;
                batches += 1;
            }
            let train_loss = epoch_loss / batches as f64;

            // Validation pass (inference mode, no dropout).
            let mut preds = Vec::new();
            let mut truths = Vec::new();
            for turn in corpus.split(Split::Validation) {
                let mut sess = Session::new(&self.store);
                let logits = self.logits(
                    &mut sess,
                    turn,
                    None,
                    speech_cache.as_ref(),
                    prompt_cache.as_ref(),
                )?;
                let v = sess.tape.value(logits);
                preds.push(if v.data[0] >= v.data[1] {
                    BargeInLabel::TrueBargeIn
                } else {
                    BargeInLabel::FalseBargeIn
                });
                truths.push(turn.label);
            }
            let (val_recall, val_f1) = crate::eval::metrics(&preds, &truths)?;
            if best.as_ref().map_or(true, |(f, _)| val_f1 > *f) {
                best = Some((val_f1, self.store.clone()));
            }
            log.push(EpochMetrics {
                epoch,
                train_loss,
                val_recall,
                val_f1,
            });
        }

        if let Some((_, store)) = best {
            self.store = store;
        }
        Ok(log)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let cfg = serde_json::to_value(&self.cfg)
            .map_err(|e| Error::Io(format!("serialize config: {e}")))?;
        Checkpoint::new(cfg, self.store.clone()).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let cfg: FusionConfig = serde_json::from_value(ck.config.clone())
            .map_err(|e| Error::Validation(format!("checkpoint config: {e}")))?;
        let mut model = FusionModel::new(cfg);
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

    /// Seeds the speech branch (encoder + language layers) from an
    /// infusion checkpoint's parameter store.
    pub fn import_speech_branch(&mut self, src: &ParamStore) -> usize {
        import_matching(&mut self.store, src)
    }
}
