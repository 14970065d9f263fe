//! Audio-only LSTM baseline: log-mel filterbank front-end plus a stacked
//! LSTM whose final hidden state feeds a 2-way softmax head.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::autodiff::VarId;
use crate::checkpoint::{import_matching, Checkpoint};
use crate::data::{BargeInLabel, CorpusManifest, DialogueTurn, Split, Utterance};
use crate::fusion::{EpochMetrics, TrainConfig};
use crate::nn::{LinearParams, LstmLayerParams, Optimizer, ParamStore, Session};
use crate::tensor::Mat;
use crate::{Error, Result};

/// Energy floor applied before the log, so silence maps to a finite constant.
pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterbankConfig {
    pub num_mels: usize,
    pub window_s: f64,
    pub hop_s: f64,
    pub sample_rate: u32,
}

impl Default for FilterbankConfig {
    fn default() -> Self {
        FilterbankConfig {
            num_mels: 40,
            window_s: 0.025,
            hop_s: 0.010,
            sample_rate: 16_000,
        }
    }
}

impl FilterbankConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_mels == 0 {
            return Err(Error::Config("num_mels must be >= 1".into()));
        }
        if self.hop_s <= 0.0 || self.hop_s > self.window_s {
            return Err(Error::Config("need 0 < hop <= window".into()));
        }
        Ok(())
    }

    pub fn window_samples(&self) -> usize {
        (self.window_s * self.sample_rate as f64).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.hop_s * self.sample_rate as f64).round() as usize
    }

    pub fn num_frames(&self, samples: usize) -> usize {
        let (w, h) = (self.window_samples(), self.hop_samples());
        if samples < w {
            0
        } else {
            (samples - w) / h + 1
        }
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filters over FFT bins, HTK-style band edges.
fn mel_filters(cfg: &FilterbankConfig, n_fft: usize) -> Vec<Vec<f64>> {
    let n_bins = n_fft / 2 + 1;
    let nyquist = cfg.sample_rate as f64 / 2.0;
    let mel_max = hz_to_mel(nyquist);
    let centers: Vec<f64> = (0..cfg.num_mels + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (cfg.num_mels + 1) as f64))
        .collect();
    let bin_hz = cfg.sample_rate as f64 / n_fft as f64;
    (0..cfg.num_mels)
        .map(|m| {
            let (lo, mid, hi) = (centers[m], centers[m + 1], centers[m + 2]);
            (0..n_bins)
                .map(|b| {
                    let f = b as f64 * bin_hz;
                    if f <= lo || f >= hi {
                        0.0
                    } else if f <= mid {
                        (f - lo) / (mid - lo)
                    } else {
                        (hi - f) / (hi - mid)
                    }
                })
                .collect()
        })
        .collect()
}

/// Log-mel energies, frames x num_mels.
pub fn filterbank(u: &Utterance, cfg: &FilterbankConfig) -> Result<Mat> {
    cfg.validate()?;
    if u.sample_rate != cfg.sample_rate {
        return Err(Error::Config(format!(
            "utterance rate {} does not match filterbank rate {}",
            u.sample_rate, cfg.sample_rate
        )));
    }
    let window = cfg.window_samples();
    let hop = cfg.hop_samples();
    let frames = cfg.num_frames(u.samples.len());
    if frames == 0 {
        return Err(Error::Validation(format!(
            "audio shorter than one window ({} < {window} samples)",
            u.samples.len()
        )));
    }
    let n_fft = window.next_power_of_two();
    let filters = mel_filters(cfg, n_fft);
    let hann: Vec<f64> = (0..window)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / window as f64).cos())
        .collect();

    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(n_fft);
    let mut out = Mat::zeros(frames, cfg.num_mels);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    for fr in 0..frames {
        let start = fr * hop;
        for i in 0..n_fft {
            let v = if i < window {
                u.samples[start + i] * hann[i]
            } else {
                0.0
            };
            buf[i] = Complex::new(v, 0.0);
        }
        fft.process(&mut buf);
        for (m, filt) in filters.iter().enumerate() {
            let mut energy = 0.0;
            for (b, &w) in filt.iter().enumerate() {
                if w > 0.0 {
                    energy += w * buf[b].norm_sqr();
                }
            }
            out.set(fr, m, energy.max(LOG_FLOOR).ln());
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub filterbank: FilterbankConfig,
    pub layers: usize,
    pub hidden: usize,
    pub seed: u64,
}

impl BaselineConfig {
    pub fn default_with_seed(seed: u64) -> Self {
        BaselineConfig {
            filterbank: FilterbankConfig::default(),
            layers: 2,
            hidden: 128,
            seed,
        }
    }

    pub fn toy(seed: u64) -> Self {
        BaselineConfig {
            filterbank: FilterbankConfig::default(),
            layers: 1,
            hidden: 24,
            seed,
        }
    }
}

pub struct RecurrentBaseline {
    pub cfg: BaselineConfig,
    pub store: ParamStore,
    layers: Vec<LstmLayerParams>,
    head: LinearParams,
}

impl RecurrentBaseline {
    pub fn new(cfg: BaselineConfig) -> Self {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut layers = Vec::with_capacity(cfg.layers);
        let mut input = cfg.filterbank.num_mels;
        for i in 0..cfg.layers {
            layers.push(LstmLayerParams::new(
                &mut store,
                &mut rng,
                &format!("lstm{i}"),
                input,
                cfg.hidden,
            ));
            input = cfg.hidden;
        }
        let head = LinearParams::new(&mut store, &mut rng, "head", cfg.hidden, 2, true);
        RecurrentBaseline {
            cfg,
            store,
            layers,
            head,
        }
    }

    fn logits(&self, sess: &mut Session, u: &Utterance) -> Result<VarId> {
        let feats = filterbank(u, &self.cfg.filterbank)?;
        let mut x = sess.constant(feats);
        // Intermediate layers need the full sequence; only the last layer
        // can stop at its final state.
        for layer in &self.layers[..self.layers.len() - 1] {
            x = layer.forward_seq(sess, x);
        }
        let last = self.layers.last().unwrap().forward_last(sess, x);
        Ok(self.head.forward(sess, last))
    }

    pub fn forward(&self, u: &Utterance) -> Result<[f64; 2]> {
        let mut sess = Session::new(&self.store);
        let logits = self.logits(&mut sess, u)?;
        let p = sess.tape.softmax_rows(logits);
        let v = sess.tape.value(p);
        Ok([v.data[0], v.data[1]])
    }

    pub fn predict(&self, u: &Utterance) -> Result<BargeInLabel> {
        let p = self.forward(u)?;
        Ok(if p[0] >= p[1] {
            BargeInLabel::TrueBargeIn
        } else {
            BargeInLabel::FalseBargeIn
        })
    }

    pub fn loss(&self, batch: &[&DialogueTurn]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Validation("loss over empty batch".into()));
        }
        let mut sess = Session::new(&self.store);
        let loss = self.batch_loss(&mut sess, batch)?;
        Ok(sess.tape.value(loss).data[0])
    }

    /// Loss plus analytic gradients aligned with the store, for gradient
    /// verification against finite differences.
    pub fn loss_grads(&self, batch: &[&DialogueTurn]) -> Result<(f64, Vec<Mat>)> {
        if batch.is_empty() {
            return Err(Error::Validation("loss over empty batch".into()));
        }
        let mut sess = Session::new(&self.store);
        let loss = self.batch_loss(&mut sess, batch)?;
        let v = sess.tape.value(loss).data[0];
        let grads = sess.grads(loss);
        Ok((v, grads))
    }

    fn batch_loss(&self, sess: &mut Session, batch: &[&DialogueTurn]) -> Result<VarId> {
        let mut total: Option<VarId> = None;
        for turn in batch {
            let logits = self.logits(sess, &turn.user)?;
            let lp = sess.tape.log_softmax_rows(logits);
            let nll = sess.tape.nll_mean(lp, &[turn.label.index()]);
            total = Some(match total {
                Some(t) => sess.tape.add(t, nll),
                None => nll,
            });
        }
        Ok(sess.tape.scale(total.unwrap(), 1.0 / batch.len() as f64))
    }

    pub fn train(&mut self, corpus: &CorpusManifest, cfg: &TrainConfig) -> Result<Vec<EpochMetrics>> {
        cfg.validate()?;
        let train_ids: Vec<usize> = corpus
            .turns
            .iter()
            .enumerate()
            .filter(|(_, t)| t.split == Split::Train)
            .map(|(i, _)| i)
            .collect();
        if train_ids.is_empty() || corpus.split(Split::Validation).next().is_none() {
            return Err(Error::Config(
                "training requires non-empty train and validation splits".into(),
            ));
        }
        let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, &self.store);
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9E37_79B9);
        let mut log = Vec::with_capacity(cfg.epochs);
        let mut best: Option<(f64, ParamStore)> = None;
        for epoch in 0..cfg.epochs {
            let mut order = train_ids.clone();
            order.shuffle(&mut shuffle_rng);
            let mut epoch_loss = 0.0;
            let mut batches = 0;
            for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
                let batch: Vec<&DialogueTurn> = chunk.iter().map(|&i| &corpus.turns[i]).collect();
                let mut sess = Session::new(&self.store);
                let loss = self.batch_loss(&mut sess, &batch)?;
                let loss_val = sess.tape.value(loss).data[0];
                if !loss_val.is_finite() {
                    return Err(Error::Numerical(format!(
                        "non-finite baseline loss at epoch {epoch} batch {bi}"
                    )));
                }
                let mut grads = sess.grads(loss);
                opt.step(&mut self.store, &mut grads, cfg.clip_norm)?;
                epoch_loss += loss_val;
                batches += 1;
            }
            let mut preds = Vec::new();
            let mut truths = Vec::new();
            for turn in corpus.split(Split::Validation) {
                preds.push(self.predict(&turn.user)?);
                truths.push(turn.label);
            }
            let (val_recall, val_f1) = crate::eval::metrics(&preds, &truths)?;
            if best.as_ref().map_or(true, |(f, _)| val_f1 > *f) {
                best = Some((val_f1, self.store.clone()));
            }
            log.push(EpochMetrics {
                epoch,
                train_loss: epoch_loss / batches as f64,
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
        let cfg: BaselineConfig = serde_json::from_value(ck.config.clone())
            .map_err(|e| Error::Validation(format!("checkpoint config: {e}")))?;
        let mut model = RecurrentBaseline::new(cfg);
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
