//! Deterministic synthetic dialogue-corpus simulator. Each vocabulary word
//! renders to a distinct harmonic template, so word alignments are exact by
//! construction. Each context label owns a disjoint set of response words;
//! a turn is a TRUE barge-in when the user's words come from the active
//! context's response set. An `ambiguity_fraction` of turns reuse
//! bit-identical user audio under a context that flips the label, making
//! dialogue context strictly informative for those turns.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    BargeInLabel, CorpusManifest, DialogueContextLabel, DialogueTurn, Split, Utterance,
    WordAlignment, NUM_CONTEXT_LABELS,
};
use crate::{Error, Result};

/// Response words per context label; the sets are disjoint.
pub const WORDS_PER_CONTEXT: usize = 3;
const RESPONSE_WORDS: usize = NUM_CONTEXT_LABELS * WORDS_PER_CONTEXT;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
    pub sample_rate: u32,
    pub vocab_size: usize,
    pub ambiguity_fraction: f64,
    pub noise_snr_db: Option<f64>,
    pub echo_contamination: bool,
    pub mean_duration: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_train: 9000,
            n_val: 1000,
            n_test: 2000,
            seed: 0,
            sample_rate: 16_000,
            vocab_size: 50,
            ambiguity_fraction: 0.0,
            noise_snr_db: None,
            echo_contamination: false,
            mean_duration: 2.4,
        }
    }
}

impl GenConfig {
    pub fn toy(seed: u64) -> Self {
        GenConfig {
            n_train: 1600,
            n_val: 200,
            n_test: 200,
            seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_train < 2 || self.n_val < 2 || self.n_test < 2 {
            return Err(Error::Config("each split needs at least 2 turns".into()));
        }
        if !(0.0..=1.0).contains(&self.ambiguity_fraction) {
            return Err(Error::Config("ambiguity_fraction must be in [0, 1]".into()));
        }
        if self.vocab_size <= RESPONSE_WORDS {
            return Err(Error::Config(format!(
                "vocab_size {} must exceed the {} response words (largest expected-response demand)",
                self.vocab_size, RESPONSE_WORDS
            )));
        }
        if self.mean_duration <= 0.2 {
            return Err(Error::Config("mean_duration too short".into()));
        }
        Ok(())
    }
}

/// Accuracy ceiling of any audio-only classifier on this corpus.
pub fn expected_audio_only_ceiling(cfg: &GenConfig) -> f64 {
    1.0 - cfg.ambiguity_fraction / 2.0
}

/// Vocabulary word tokens. Ids [0, RESPONSE_WORDS) are response words;
/// word w belongs to context w / WORDS_PER_CONTEXT. The rest are distractors.
pub fn vocab_word(id: usize) -> String {
    if id < RESPONSE_WORDS {
        format!("resp{id:02}")
    } else {
        format!("dist{id:02}")
    }
}

fn prompt_for_context(ctx: DialogueContextLabel) -> String {
    format!("Could you tell me your {} now?", ctx.name())
}

/// Renders one word as a harmonic stack with a per-word fundamental and
/// amplitude pattern, with a short raised-cosine fade at both ends.
fn render_word(word_id: usize, dur_s: f64, sample_rate: u32) -> Vec<f64> {
    let n = (dur_s * sample_rate as f64).round() as usize;
    let f0 = 120.0 + 37.0 * word_id as f64;
    let mut pattern_rng = ChaCha8Rng::seed_from_u64(0xACC0 ^ (word_id as u64).wrapping_mul(0x9E3779B97F4A7C15));
    let harmonics: Vec<(f64, f64)> = (1..=4)
        .map(|h| (h as f64, pattern_rng.gen_range(0.15..1.0) / h as f64))
        .collect();
    let norm: f64 = harmonics.iter().map(|(_, a)| a).sum();
    let fade = (0.01 * sample_rate as f64) as usize;
    (0..n)
        .map(|i| {
            let t = i as f64 / sample_rate as f64;
            let mut s = 0.0;
            for (h, a) in &harmonics {
                s += a * (2.0 * std::f64::consts::PI * f0 * h * t).sin();
            }
            let mut env = 0.35 / norm;
            if i < fade {
                env *= 0.5 - 0.5 * (std::f64::consts::PI * (i as f64 / fade as f64 + 1.0)).cos();
            }
            if n - i <= fade {
                let j = (n - i) as f64 / fade as f64;
                env *= 0.5 - 0.5 * (std::f64::consts::PI * (j + 1.0)).cos();
            }
            s * env
        })
        .collect()
}

/// Snap to the 16-bit grid the WAV container stores, so that what we hold
/// in memory is exactly what round-trips through disk.
fn quantize(samples: &mut [f64]) {
    for s in samples.iter_mut() {
        *s = (s.clamp(-1.0, 1.0) * 32768.0).round().clamp(-32768.0, 32767.0) as f64 / 32768.0;
    }
}

struct RenderedUtterance {
    samples: Vec<f64>,
    alignment: Vec<WordAlignment>,
}

fn render_sequence(
    word_ids: &[usize],
    cfg: &GenConfig,
    rng: &mut ChaCha8Rng,
) -> RenderedUtterance {
    let gap_s = 0.04;
    let word_s = cfg.mean_duration / word_count_for(cfg) as f64 - gap_s;
    let mut samples = Vec::new();
    let mut alignment = Vec::new();
    for &wid in word_ids {
        // Jitter keeps durations varied while preserving the mean.
        let dur = word_s * rng.gen_range(0.9..1.1);
        let start = samples.len() as f64 / cfg.sample_rate as f64;
        samples.extend(render_word(wid, dur, cfg.sample_rate));
        let end = samples.len() as f64 / cfg.sample_rate as f64;
        alignment.push(WordAlignment {
            word: vocab_word(wid),
            start_time: start,
            end_time: end,
        });
        samples.extend(std::iter::repeat(0.0).take((gap_s * cfg.sample_rate as f64) as usize));
    }
    if cfg.echo_contamination {
        // Faint copy of a fixed "bot prompt" tone over the opening.
        let n = ((0.3 * cfg.sample_rate as f64) as usize).min(samples.len());
        for (i, s) in samples.iter_mut().take(n).enumerate() {
            let t = i as f64 / cfg.sample_rate as f64;
            *s += 0.02 * (2.0 * std::f64::consts::PI * 90.0 * t).sin();
        }
    }
    if let Some(snr_db) = cfg.noise_snr_db {
        let signal_power: f64 =
            samples.iter().map(|s| s * s).sum::<f64>() / samples.len().max(1) as f64;
        let noise_power = signal_power / 10f64.powf(snr_db / 10.0);
        let sigma = noise_power.sqrt();
        for s in samples.iter_mut() {
            // Box-Muller from two uniforms keeps us on the seeded stream.
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            *s += sigma * z;
        }
    }
    quantize(&mut samples);
    RenderedUtterance { samples, alignment }
}

fn word_count_for(cfg: &GenConfig) -> usize {
    ((cfg.mean_duration / 0.34).round() as usize).max(1)
}

fn context_words(ctx: usize) -> std::ops::Range<usize> {
    ctx * WORDS_PER_CONTEXT..(ctx + 1) * WORDS_PER_CONTEXT
}

fn sample_words(range: std::ops::Range<usize>, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..n)
        .map(|_| rng.gen_range(range.start..range.end))
        .collect()
}

pub fn generate(cfg: &GenConfig) -> Result<CorpusManifest> {
    cfg.validate()?;
    let mut turns = Vec::new();
    for (split, count) in [
        (Split::Train, cfg.n_train),
        (Split::Validation, cfg.n_val),
        (Split::Test, cfg.n_test),
    ] {
        generate_split(cfg, split, count, &mut turns)?;
    }
    let corpus = CorpusManifest {
        seed: cfg.seed,
        turns,
    };
    corpus.validate()?;
    Ok(corpus)
}

fn generate_split(
    cfg: &GenConfig,
    split: Split,
    count: usize,
    turns: &mut Vec<DialogueTurn>,
) -> Result<()> {
    // Ambiguous turns come in pairs (one TRUE + one FALSE with identical
    // audio), so round the ambiguous count down to even.
    let n_amb = {
        let raw = (cfg.ambiguity_fraction * count as f64).round() as usize;
        raw.min(count) / 2 * 2
    };
    let n_plain = count - n_amb;
    let split_tag = match split {
        Split::Train => 1u64,
        Split::Validation => 2,
        Split::Test => 3,
    };
    let n_words = word_count_for(cfg);
    let mut made = 0usize;

    // Plain turns alternate TRUE / FALSE so the balance holds within 1.
    for i in 0..n_plain {
        // Per-turn RNG stream derived from (seed, split, index) so turns
        // are independent of generation order.
        let mut rng = ChaCha8Rng::seed_from_u64(
            cfg.seed ^ split_tag.wrapping_mul(0x1000_0000_0000) ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
        );
        let ctx = DialogueContextLabel::new(rng.gen_range(0..NUM_CONTEXT_LABELS))?;
        let is_true = i % 2 == 0;
        let word_ids = if is_true {
            sample_words(context_words(ctx.id), n_words, &mut rng)
        } else {
            sample_words(RESPONSE_WORDS..cfg.vocab_size, n_words, &mut rng)
        };
        let rendered = render_sequence(&word_ids, cfg, &mut rng);
        turns.push(DialogueTurn {
            id: format!("{split}-{made:05}"),
            split,
            prompt_text: prompt_for_context(ctx),
            context: ctx,
            user: Utterance {
                samples: rendered.samples,
                sample_rate: cfg.sample_rate,
                alignment: Some(rendered.alignment),
            },
            label: if is_true {
                BargeInLabel::TrueBargeIn
            } else {
                BargeInLabel::FalseBargeIn
            },
        });
        made += 1;
    }

    // Ambiguous pairs: same rendered audio, contexts that flip the label.
    for p in 0..n_amb / 2 {
        let mut rng = ChaCha8Rng::seed_from_u64(
            cfg.seed
                ^ split_tag.wrapping_mul(0x2000_0000_0000)
                ^ (p as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F),
        );
        let ctx_true = DialogueContextLabel::new(rng.gen_range(0..NUM_CONTEXT_LABELS))?;
        let mut other = rng.gen_range(0..NUM_CONTEXT_LABELS - 1);
        if other >= ctx_true.id {
            other += 1;
        }
        let ctx_false = DialogueContextLabel::new(other)?;
        let word_ids = sample_words(context_words(ctx_true.id), n_words, &mut rng);
        let rendered = render_sequence(&word_ids, cfg, &mut rng);
        for (ctx, label) in [
            (ctx_true, BargeInLabel::TrueBargeIn),
            (ctx_false, BargeInLabel::FalseBargeIn),
        ] {
            turns.push(DialogueTurn {
                id: format!("{split}-{made:05}"),
                split,
                prompt_text: prompt_for_context(ctx),
                context: ctx,
                user: Utterance {
                    samples: rendered.samples.clone(),
                    sample_rate: cfg.sample_rate,
                    alignment: Some(rendered.alignment.clone()),
                },
                label,
            });
            made += 1;
        }
    }
    Ok(())
}
