//! Deterministic toy text encoder: a rule-based subword tokenizer over
//! hash buckets, a fixed embedding table derived from a constant seed, and
//! a mean context window that makes token vectors mildly contextual. The
//! encoder has no trainable parameters and never changes — it stands in
//! for a frozen pretrained text model behind the same contract
//! (token ids -> hidden matrix).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Mat;
use crate::{Error, Result};

const TABLE_SEED: u64 = 0xB1_457_E0C;
const SUBWORD_LEN: usize = 4;
const CONTEXT_WINDOW: usize = 2;

#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub hidden: usize,
    pub buckets: u32,
}

impl TextEncoder {
    pub fn new(hidden: usize) -> Self {
        TextEncoder {
            hidden,
            buckets: 1024,
        }
    }

    /// Lowercase, split on non-alphanumeric, chop words into fixed-length
    /// subword chunks, hash each chunk into a bucket id.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::new();
        for word in text
            .to_lowercase()
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
        {
            ids.extend(self.tokenize_word(word));
        }
        ids
    }

    pub fn tokenize_word(&self, word: &str) -> Vec<u32> {
        let chars: Vec<char> = word
            .to_lowercase()
            .chars()
            .filter(|c| c.is_alphanumeric())
            .collect();
        chars
            .chunks(SUBWORD_LEN)
            .map(|chunk| {
                // FNV-1a over the chunk's UTF-8 bytes.
                let mut h: u64 = 0xcbf29ce484222325;
                for c in chunk {
                    let mut buf = [0u8; 4];
                    for b in c.encode_utf8(&mut buf).as_bytes() {
                        h ^= *b as u64;
                        h = h.wrapping_mul(0x100000001b3);
                    }
                }
                (h % self.buckets as u64) as u32
            })
            .collect()
    }

    /// Base (pre-context) embedding of a bucket id.
    pub fn embedding(&self, id: u32) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(TABLE_SEED ^ ((id as u64).wrapping_mul(0x9E3779B97F4A7C15)));
        (0..self.hidden).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Hidden matrix for a token sequence. Each token's vector is the
    /// average of its own embedding and the mean embedding of a small
    /// surrounding window.
    pub fn encode_ids(&self, ids: &[u32]) -> Result<Mat> {
        if ids.is_empty() {
            return Err(Error::Validation("cannot encode empty token sequence".into()));
        }
        let embeds: Vec<Vec<f64>> = ids.iter().map(|&id| self.embedding(id)).collect();
        let mut out = Mat::zeros(ids.len(), self.hidden);
        for i in 0..ids.len() {
            let lo = i.saturating_sub(CONTEXT_WINDOW);
            let hi = (i + CONTEXT_WINDOW + 1).min(ids.len());
            let span = (hi - lo) as f64;
            for c in 0..self.hidden {
                let ctx: f64 = embeds[lo..hi].iter().map(|e| e[c]).sum::<f64>() / span;
                out.set(i, c, 0.5 * embeds[i][c] + 0.5 * ctx);
            }
        }
        Ok(out)
    }

    pub fn encode(&self, text: &str) -> Result<Mat> {
        if text.trim().is_empty() {
            return Err(Error::Validation("cannot encode empty prompt text".into()));
        }
        self.encode_ids(&self.tokenize(text))
    }

    /// Mean-pooled prompt hidden vector (pre-projection).
    pub fn pooled(&self, text: &str) -> Result<Vec<f64>> {
        Ok(crate::tensor::mean_rows(&self.encode(text)?))
    }

    /// Contextual word embeddings for a whole transcript: the full token
    /// sequence is encoded once, then each word's subword vectors are
    /// averaged.
    pub fn transcript_word_embeddings(&self, words: &[String]) -> Result<Vec<Vec<f64>>> {
        let mut ids = Vec::new();
        let mut spans = Vec::with_capacity(words.len());
        for w in words {
            let toks = self.tokenize_word(w);
            if toks.is_empty() {
                return Err(Error::Validation(format!(
                    "word '{w}' produced no subword tokens"
                )));
            }
            spans.push((ids.len(), ids.len() + toks.len()));
            ids.extend(toks);
        }
        let hidden = self.encode_ids(&ids)?;
        Ok(spans
            .into_iter()
            .map(|(lo, hi)| {
                let mut mean = vec![0.0; self.hidden];
                for r in lo..hi {
                    for (m, &v) in mean.iter_mut().zip(hidden.row(r).iter()) {
                        *m += v;
                    }
                }
                let inv = 1.0 / (hi - lo) as f64;
                mean.iter_mut().for_each(|m| *m *= inv);
                mean
            })
            .collect())
    }

    /// Embedding of a word run through the encoder in isolation.
    pub fn word_embedding(&self, word: &str) -> Result<Vec<f64>> {
        if word.trim().is_empty() {
            return Err(Error::Validation("cannot embed empty word".into()));
        }
        Ok(self
            .transcript_word_embeddings(&[word.to_string()])?
            .remove(0))
    }

    /// Hash over a deterministic sample of the embedding table; any change
    /// to the encoder would alter it. Used to assert the encoder stayed
    /// frozen across a training run.
    pub fn signature(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for id in (0..self.buckets).step_by(37) {
            for v in self.embedding(id) {
                h.update(v.to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }
}
