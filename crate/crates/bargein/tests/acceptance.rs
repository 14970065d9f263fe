//! End-to-end acceptance gate. Each test covers one release criterion and
//! prints a single PASS line; a failed assertion marks the criterion FAIL.
//!
//! 1. gradient checks  2. loop oracles  3. alignment mapping
//! 4. end-to-end learning  5. context value under ambiguity
//! 6. infusion value  7. latency ordering  8. determinism

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use bargein::data::{BargeInLabel, CorpusManifest, DialogueContextLabel, Split, Utterance};
use bargein::datagen::{generate, GenConfig};
use bargein::encoders::speech::SpeechEncoderConfig;
use bargein::encoders::{mean_pool, ContextEmbeddingParams, WidthProfile};
use bargein::eval::{benchmark_latency, evaluate_split, metrics};
use bargein::fusion::{FusionConfig, FusionModel, TrainConfig};
use bargein::infusion::{word_end_frame, InfusionConfig, InfusionModel, PretrainConfig};
use bargein::nn::{OptimizerKind, ParamStore, Session};
use bargein::tensor::Mat;

/// The criteria are wall-clock sensitive (latency medians, time budgets),
/// so they run one at a time even when the harness is multi-threaded.
fn serial() -> std::sync::MutexGuard<'static, ()> {
    static LOCK: std::sync::OnceLock<std::sync::Mutex<()>> = std::sync::OnceLock::new();
    LOCK.get_or_init(|| std::sync::Mutex::new(()))
        .lock()
        .unwrap_or_else(std::sync::PoisonError::into_inner)
}

const FD_EPS: f64 = 1e-5;
const FD_REL_TOL: f64 = 1e-4;
const ORACLE_TOL: f64 = 1e-6;

fn tiny_speech_cfg() -> SpeechEncoderConfig {
    SpeechEncoderConfig {
        sample_rate: 16_000,
        stride: 320,
        hidden: 6,
        layers: 1,
        heads: 2,
        ff_width: 8,
    }
}

fn tiny_corpus(turns: usize) -> CorpusManifest {
    let cfg = GenConfig {
        n_train: turns.max(2),
        n_val: 2,
        n_test: 2,
        seed: 99,
        mean_duration: 0.25,
        ..GenConfig::default()
    };
    generate(&cfg).unwrap()
}

/// Central finite differences on up to `per_tensor` coordinates of every
/// trainable tensor. Returns the worst relative error seen.
fn fd_worst_rel<F: FnMut(&mut ParamStore) -> f64>(
    store: &mut ParamStore,
    grads: &[Mat],
    mut loss: F,
    per_tensor: usize,
) -> f64 {
    let mut worst: f64 = 0.0;
    for id in 0..store.len() {
        let n = store.get(id).data.len();
        let step = (n / per_tensor).max(1);
        for j in (0..n).step_by(step) {
            let orig = store.get(id).data[j];
            store.get_mut(id).data[j] = orig + FD_EPS;
            let up = loss(store);
            store.get_mut(id).data[j] = orig - FD_EPS;
            let down = loss(store);
            store.get_mut(id).data[j] = orig;
            let fd = (up - down) / (2.0 * FD_EPS);
            let an = grads[id].data[j];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
            if rel > worst {
                worst = rel;
            }
        }
    }
    worst
}

#[test]
fn criterion_1_gradient_checks() {
    let _guard = serial();
    let corpus = tiny_corpus(4);
    let turns: Vec<_> = corpus.split(Split::Train).take(4).collect();

    // (a) fusion cross-entropy, all branches and language layers enabled
    let fusion_cfg = FusionConfig {
        widths: WidthProfile {
            hidden: 6,
            context_embed: 4,
            projection: 5,
        },
        speech: tiny_speech_cfg(),
        use_prompt: true,
        use_context: true,
        language_layers: 1,
        fusion_hidden: 5,
        dropout: 0.0,
        seed: 3,
    };
    let mut model = FusionModel::new(fusion_cfg);
    let (_, grads) = model.loss_grads(&turns).unwrap();
    let mut grads_store = std::mem::take(&mut model.store);
    let worst = {
        let m = &mut model;
        let t = &turns;
        fd_worst_rel(
            &mut grads_store,
            &grads,
            |s| {
                std::mem::swap(&mut m.store, s);
                let l = m.loss(t).unwrap();
                std::mem::swap(&mut m.store, s);
                l
            },
            4,
        )
    };
    model.store = grads_store;
    assert!(worst < FD_REL_TOL, "fusion gradient rel err {worst}");

    // (b) infusion squared-L2 loss
    let inf_cfg = InfusionConfig {
        speech: tiny_speech_cfg(),
        language_layers: 1,
        freeze_encoder: false,
        seed: 5,
    };
    let mut inf = InfusionModel::new(inf_cfg);
    let utts: Vec<&Utterance> = turns.iter().map(|t| &t.user).collect();
    let (_, grads) = inf.loss_grads(&utts).unwrap();
    let mut store = std::mem::take(&mut inf.store);
    let worst = {
        let m = &mut inf;
        let u = &utts;
        fd_worst_rel(
            &mut store,
            &grads,
            |s| {
                std::mem::swap(&mut m.store, s);
                let l = m.batch_infusion_loss(u).unwrap();
                std::mem::swap(&mut m.store, s);
                l
            },
            4,
        )
    };
    inf.store = store;
    assert!(worst < FD_REL_TOL, "infusion gradient rel err {worst}");

    // (c) recurrent baseline cross-entropy
    let mut base_cfg = bargein::baseline::BaselineConfig::toy(7);
    base_cfg.layers = 2;
    base_cfg.hidden = 5;
    let mut base = bargein::baseline::RecurrentBaseline::new(base_cfg);
    let (_, grads) = base.loss_grads(&turns).unwrap();
    let mut store = std::mem::take(&mut base.store);
    let worst = {
        let m = &mut base;
        let t = &turns;
        fd_worst_rel(
            &mut store,
            &grads,
            |s| {
                std::mem::swap(&mut m.store, s);
                let l = m.loss(t).unwrap();
                std::mem::swap(&mut m.store, s);
                l
            },
            4,
        )
    };
    base.store = store;
    assert!(worst < FD_REL_TOL, "baseline gradient rel err {worst}");

    println!("ACCEPTANCE 1 (analytic gradients vs finite differences): PASS");
}

fn gelu_ref(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

#[test]
fn criterion_2_loop_oracles() {
    let _guard = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(42);

    // mean_pool vs per-column loop
    for _ in 0..120 {
        let rows = rng.gen_range(1..7);
        let cols = rng.gen_range(1..6);
        let m = Mat::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        );
        let got = mean_pool(&m).unwrap();
        for c in 0..cols {
            let mut s = 0.0;
            for r in 0..rows {
                s += m.at(r, c);
            }
            assert!((got[c] - s / rows as f64).abs() < ORACLE_TOL);
        }
    }

    // context embedding branch vs table-row x matrix loop
    for i in 0..120 {
        let m = rng.gen_range(2..5);
        let k = rng.gen_range(2..5);
        let mut store = ParamStore::new();
        let params = ContextEmbeddingParams::new(&mut store, &mut rng, m, k);
        let label = DialogueContextLabel::new(i % 10).unwrap();
        let mut sess = Session::new(&store);
        let out = params.forward(&mut sess, label);
        let got = sess.tape.value(out).data.clone();
        let table = store.get(params.table);
        let w = store.get(params.projection.w);
        for kk in 0..k {
            let mut s = 0.0;
            for mm in 0..m {
                s += table.at(label.id, mm) * w.at(mm, kk);
            }
            assert!((got[kk] - s).abs() < ORACLE_TOL);
        }
    }

    // full forward (speech front-end + context branch, no attention layers)
    // vs a straight-line loop reimplementation
    for i in 0..100 {
        let cfg = FusionConfig {
            widths: WidthProfile {
                hidden: 5,
                context_embed: 3,
                projection: 4,
            },
            speech: SpeechEncoderConfig {
                sample_rate: 16_000,
                stride: 320,
                hidden: 5,
                layers: 0,
                heads: 1,
                ff_width: 4,
            },
            use_prompt: false,
            use_context: true,
            language_layers: 0,
            fusion_hidden: 4,
            dropout: 0.0,
            seed: i,
        };
        let model = FusionModel::new(cfg);
        let n = rng.gen_range(400..1000);
        let turn = bargein::data::DialogueTurn {
            id: "o".into(),
            split: Split::Test,
            prompt_text: "x".into(),
            context: DialogueContextLabel::new((i % 10) as usize).unwrap(),
            user: Utterance {
                samples: (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect(),
                sample_rate: 16_000,
                alignment: None,
            },
            label: BargeInLabel::TrueBargeIn,
        };
        let got = model.forward(&turn).unwrap();

        let s = &model.store;
        let get = |name: &str| s.get(s.by_name(name).unwrap());
        let (fw, fb) = (get("speech.frontend.w"), get("speech.frontend.b"));
        let frames = (n + 319) / 320;
        // pooled GELU(frontend) over zero-padded frames
        let mut pooled = vec![0.0; 5];
        for f in 0..frames {
            for hcol in 0..5 {
                let mut acc = fb.at(0, hcol);
                for j in 0..320 {
                    let idx = f * 320 + j;
                    if idx < n {
                        acc += turn.user.samples[idx] * fw.at(j, hcol);
                    }
                }
                pooled[hcol] += gelu_ref(acc) / frames as f64;
            }
        }
        let wx = get("proj.speech.w");
        let mut concat = vec![0.0; 8];
        for k in 0..4 {
            for h in 0..5 {
                concat[k] += pooled[h] * wx.at(h, k);
            }
        }
        let (table, wc) = (get("context.table"), get("context.proj.w"));
        for k in 0..4 {
            for m in 0..3 {
                concat[4 + k] += table.at(turn.context.id, m) * wc.at(m, k);
            }
        }
        let (fuw, fub) = (get("fusion.w"), get("fusion.b"));
        let mut fused = vec![0.0; 4];
        for o in 0..4 {
            let mut acc = fub.at(0, o);
            for j in 0..8 {
                acc += concat[j] * fuw.at(j, o);
            }
            fused[o] = acc.tanh();
        }
        let (hw, hb) = (get("head.w"), get("head.b"));
        let mut logits = [0.0f64; 2];
        for o in 0..2 {
            logits[o] = hb.at(0, o);
            for j in 0..4 {
                logits[o] += fused[j] * hw.at(j, o);
            }
        }
        let mx = logits[0].max(logits[1]);
        let z = (logits[0] - mx).exp() + (logits[1] - mx).exp();
        for o in 0..2 {
            let want = (logits[o] - mx).exp() / z;
            assert!(
                (got[o] - want).abs() < ORACLE_TOL,
                "forward oracle {i}: {} vs {want}",
                got[o]
            );
        }
    }

    // infusion loss vs per-word assembly from exported pieces
    for i in 0..100 {
        let cfg = InfusionConfig {
            speech: SpeechEncoderConfig {
                sample_rate: 16_000,
                stride: 320,
                hidden: 5,
                layers: 0,
                heads: 1,
                ff_width: 4,
            },
            language_layers: 0,
            freeze_encoder: false,
            seed: 1000 + i,
        };
        let model = InfusionModel::new(cfg);
        let n_words = rng.gen_range(1..4);
        let dur = 0.1 * n_words as f64;
        let n = (dur * 16_000.0) as usize;
        let alignment = (0..n_words)
            .map(|w| bargein::data::WordAlignment {
                word: format!("w{}", rng.gen_range(0..20)),
                start_time: 0.1 * w as f64,
                end_time: 0.1 * (w + 1) as f64 - 0.01,
            })
            .collect();
        let u = Utterance {
            samples: (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            sample_rate: 16_000,
            alignment: Some(alignment),
        };
        let got = model.infusion_loss(&u).unwrap();

        let rep = model.plain_representation(&u).unwrap();
        let targets = model.word_targets(&u).unwrap();
        let s = &model.store;
        let hw = s.get(s.by_name("infusion.head.w").unwrap());
        let hb = s.get(s.by_name("infusion.head.b").unwrap());
        let mut want = 0.0;
        for t in &targets {
            for c in 0..hw.cols {
                let mut pred = hb.at(0, c);
                for r in 0..hw.rows {
                    pred += rep.hidden.at(t.end_frame, r) * hw.at(r, c);
                }
                let d = pred - t.embed_w[c];
                want += d * d;
            }
        }
        assert!(
            (got - want).abs() < ORACLE_TOL * want.abs().max(1.0),
            "infusion oracle {i}: {got} vs {want}"
        );
    }

    // metrics vs brute-force confusion counting
    for _ in 0..150 {
        let n = rng.gen_range(4..40);
        let preds: Vec<BargeInLabel> = (0..n)
            .map(|_| BargeInLabel::from_index(rng.gen_range(0..2)))
            .collect();
        let mut truths: Vec<BargeInLabel> = (0..n)
            .map(|_| BargeInLabel::from_index(rng.gen_range(0..2)))
            .collect();
        // guarantee both classes present
        truths[0] = BargeInLabel::TrueBargeIn;
        truths[1] = BargeInLabel::FalseBargeIn;
        let (recall, f1) = metrics(&preds, &truths).unwrap();
        let (mut tp, mut fp, mut tn, mut fnn) = (0.0, 0.0, 0.0, 0.0);
        for (p, t) in preds.iter().zip(truths.iter()) {
            match (p, t) {
                (BargeInLabel::TrueBargeIn, BargeInLabel::TrueBargeIn) => tp += 1.0,
                (BargeInLabel::TrueBargeIn, BargeInLabel::FalseBargeIn) => fp += 1.0,
                (BargeInLabel::FalseBargeIn, BargeInLabel::FalseBargeIn) => tn += 1.0,
                (BargeInLabel::FalseBargeIn, BargeInLabel::TrueBargeIn) => fnn += 1.0,
            }
        }
        let r_true = tp / (tp + fnn);
        let r_false = tn / (tn + fp);
        let want_recall = 100.0 * 0.5 * (r_true + r_false);
        let p_true = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let want_f1 = if p_true + r_true > 0.0 {
            100.0 * 2.0 * p_true * r_true / (p_true + r_true)
        } else {
            0.0
        };
        assert!((recall - want_recall).abs() < ORACLE_TOL);
        assert!((f1 - want_f1).abs() < ORACLE_TOL);
    }

    println!("ACCEPTANCE 2 (loop oracles for pooling, context, forward, infusion, metrics): PASS");
}

#[test]
fn criterion_3_alignment_mapping() {
    let _guard = serial();
    // zero, round half up, exact rounding case, clamp
    assert_eq!(word_end_frame(0.0, 0.02, 120), 0);
    assert_eq!(word_end_frame(1.24, 0.02, 120), 62);
    assert_eq!(word_end_frame(0.03, 0.02, 120), 2); // 1.5 rounds up
    assert_eq!(word_end_frame(10.0, 0.02, 120), 119);
    // monotone over 1000 random sorted times
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut times: Vec<f64> = (0..1000).map(|_| rng.gen_range(0.0..2.4)).collect();
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let frames: Vec<usize> = times.iter().map(|&t| word_end_frame(t, 0.02, 120)).collect();
    for w in frames.windows(2) {
        assert!(w[0] <= w[1]);
    }
    println!("ACCEPTANCE 3 (word-end frame mapping): PASS");
}

fn quick_train_cfg(seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig {
        optimizer: OptimizerKind::Adam,
        learning_rate: 1e-3,
        dropout: 0.2,
        epochs,
        batch_size: 8,
        seed,
        fine_tune_speech: true,
        clip_norm: None,
    }
}

#[test]
fn criterion_4_end_to_end_learning() {
    let _guard = serial();
    let gen = GenConfig {
        ambiguity_fraction: 0.0,
        ..GenConfig::toy(4)
    };
    let corpus = generate(&gen).unwrap();
    let mut model = FusionModel::new(FusionConfig::toy(4)); // audio only
    model.train(&corpus, &quick_train_cfg(4, 4)).unwrap();
    let scores = evaluate_split(&model, &corpus, Split::Test).unwrap();
    assert!(
        scores.f1 >= 90.0,
        "audio-only test F1 {:.1} below 90.0",
        scores.f1
    );
    println!(
        "ACCEPTANCE 4 (separable corpus learned, audio-only F1 {:.1} >= 90.0): PASS",
        scores.f1
    );
}

#[test]
fn criterion_5_context_value_under_ambiguity() {
    let _guard = serial();
    let gen = GenConfig {
        n_train: 1600,
        n_val: 100,
        n_test: 100,
        seed: 5,
        ambiguity_fraction: 0.2,
        ..GenConfig::default()
    };
    let corpus = generate(&gen).unwrap();

    // Resolving the ambiguous turns requires matching the spoken word
    // group against the dialogue context, a conjunction the fusion layer
    // only learns reliably from stable word-bearing speech features.
    // Pretrain the speech branch with the infusion objective, freeze it,
    // and train both classifiers on top with the identical recipe so the
    // comparison isolates the context branches.
    let mut infusion = InfusionModel::new(InfusionConfig::toy(0, 5));
    infusion.pretrain(&corpus, &PretrainConfig::toy(5)).unwrap();

    let frozen_cfg = TrainConfig {
        optimizer: OptimizerKind::Adam,
        learning_rate: 3e-3,
        dropout: 0.0,
        epochs: 80,
        batch_size: 8,
        seed: 5,
        fine_tune_speech: false,
        clip_norm: None,
    };
    let build = |use_prompt: bool, use_context: bool| {
        let mut m = FusionModel::new(FusionConfig {
            use_prompt,
            use_context,
            fusion_hidden: 64,
            dropout: 0.0,
            ..FusionConfig::toy(5)
        });
        m.import_speech_branch(&infusion.store);
        m
    };

    let mut audio_only = build(false, false);
    audio_only.train(&corpus, &frozen_cfg).unwrap();
    let audio_scores = evaluate_split(&audio_only, &corpus, Split::Test).unwrap();
    assert!(
        audio_scores.accuracy <= 92.0,
        "audio-only accuracy {:.1} above the 90.0 + 2.0 ceiling",
        audio_scores.accuracy
    );

    let mut full = build(true, true);
    full.train(&corpus, &frozen_cfg).unwrap();
    let full_scores = evaluate_split(&full, &corpus, Split::Test).unwrap();
    assert!(
        full_scores.f1 - audio_scores.f1 >= 5.0,
        "context gain {:.1} (full {:.1} vs audio {:.1}) below 5.0",
        full_scores.f1 - audio_scores.f1,
        full_scores.f1,
        audio_scores.f1
    );
    println!(
        "ACCEPTANCE 5 (ambiguity 0.2: audio acc {:.1} <= 92.0, context F1 gain {:.1} >= 5.0): PASS",
        audio_scores.accuracy,
        full_scores.f1 - audio_scores.f1
    );
}

/// Full-batch softmax regression on fixed features; returns held-out
/// accuracy. Every third example is held out.
fn probe_accuracy(feats: &[Vec<f64>], labels: &[usize], classes: usize) -> f64 {
    let d = feats[0].len();
    let mut w = vec![0.0f64; d * classes];
    let mut b = vec![0.0f64; classes];
    let train: Vec<usize> = (0..feats.len()).filter(|i| i % 3 != 0).collect();
    let test: Vec<usize> = (0..feats.len()).filter(|i| i % 3 == 0).collect();
    let lr = 0.5;
    for _ in 0..300 {
        let mut gw = vec![0.0f64; d * classes];
        let mut gb = vec![0.0f64; classes];
        for &i in &train {
            let x = &feats[i];
            let mut z = b.clone();
            for (j, &xj) in x.iter().enumerate() {
                for c in 0..classes {
                    z[c] += xj * w[j * classes + c];
                }
            }
            let mx = z.iter().cloned().fold(f64::MIN, f64::max);
            let mut p: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
            let sum: f64 = p.iter().sum();
            for v in p.iter_mut() {
                *v /= sum;
            }
            p[labels[i]] -= 1.0;
            for (j, &xj) in x.iter().enumerate() {
                for c in 0..classes {
                    gw[j * classes + c] += xj * p[c];
                }
            }
            for c in 0..classes {
                gb[c] += p[c];
            }
        }
        let n = train.len() as f64;
        for (wv, gv) in w.iter_mut().zip(gw.iter()) {
            *wv -= lr * gv / n;
        }
        for (bv, gv) in b.iter_mut().zip(gb.iter()) {
            *bv -= lr * gv / n;
        }
    }
    let mut hits = 0usize;
    for &i in &test {
        let x = &feats[i];
        let mut z = b.clone();
        for (j, &xj) in x.iter().enumerate() {
            for c in 0..classes {
                z[c] += xj * w[j * classes + c];
            }
        }
        let pred = z
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        if pred == labels[i] {
            hits += 1;
        }
    }
    100.0 * hits as f64 / test.len() as f64
}

fn word_end_features(
    model: &InfusionModel,
    turns: &[&bargein::data::DialogueTurn],
    word_ids: &mut std::collections::BTreeMap<String, usize>,
) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    for turn in turns {
        let rep = model.infused_representation(&turn.user).unwrap();
        for w in turn.user.alignment.as_ref().unwrap() {
            let f = word_end_frame(w.end_time, rep.frame_stride, rep.hidden.rows);
            let next = word_ids.len();
            let id = *word_ids.entry(w.word.clone()).or_insert(next);
            feats.push((0..rep.hidden.cols).map(|c| rep.hidden.at(f, c)).collect());
            labels.push(id);
        }
    }
    (feats, labels)
}

#[test]
fn criterion_6_infusion_value() {
    let _guard = serial();
    let gen = GenConfig {
        n_train: 200,
        n_val: 2,
        n_test: 2,
        seed: 6,
        mean_duration: 1.0,
        ..GenConfig::default()
    };
    let corpus = generate(&gen).unwrap();

    let cfg = InfusionConfig::toy(2, 6);
    let fresh = InfusionModel::new(cfg.clone());
    let mut pretrained = InfusionModel::new(cfg);
    let outcome = pretrained
        .pretrain(&corpus, &PretrainConfig::toy(6))
        .unwrap();

    let smooth = |w: &[f64]| w.iter().sum::<f64>() / w.len() as f64;
    let first = smooth(&outcome.loss_curve[..100]);
    let last = smooth(&outcome.loss_curve[outcome.loss_curve.len() - 100..]);
    assert!(
        last < 0.5 * first,
        "smoothed infusion loss fell only {first:.3} -> {last:.3}"
    );

    let probe_turns: Vec<_> = corpus.split(Split::Train).take(120).collect();
    let mut word_ids = std::collections::BTreeMap::new();
    let (feats_inf, labels) = word_end_features(&pretrained, &probe_turns, &mut word_ids);
    let (feats_plain, labels2) = word_end_features(&fresh, &probe_turns, &mut word_ids);
    assert_eq!(labels, labels2);
    let classes = word_ids.len();
    let acc_inf = probe_accuracy(&feats_inf, &labels, classes);
    let acc_plain = probe_accuracy(&feats_plain, &labels, classes);
    assert!(
        acc_inf - acc_plain >= 10.0,
        "word-identity probe gain {:.1} (infused {acc_inf:.1} vs plain {acc_plain:.1}) below 10.0",
        acc_inf - acc_plain
    );
    println!(
        "ACCEPTANCE 6 (infusion loss {first:.2}->{last:.2}, probe gain {:.1} >= 10.0): PASS",
        acc_inf - acc_plain
    );
}

#[test]
fn criterion_7_latency_ordering() {
    let _guard = serial();
    // Short utterances keep the shared speech-encoder cost small so the
    // per-branch work being compared is a measurable share of the total.
    let gen = GenConfig {
        n_train: 2,
        n_val: 2,
        n_test: 12,
        seed: 7,
        mean_duration: 0.4,
        ..GenConfig::default()
    };
    let corpus = generate(&gen).unwrap();
    // Wide branch projections make each enabled branch's extra work large
    // relative to scheduler and cache jitter; the shared speech encoder
    // stays at toy size so totals remain sub-millisecond.
    let bench_cfg = |use_prompt: bool, use_context: bool| FusionConfig {
        widths: WidthProfile {
            context_embed: 256,
            projection: 256,
            ..WidthProfile::toy()
        },
        use_prompt,
        use_context,
        fusion_hidden: 64,
        ..FusionConfig::toy(7)
    };
    let audio = FusionModel::new(bench_cfg(false, false));
    let with_ctx = FusionModel::new(bench_cfg(false, true));
    let all = FusionModel::new(bench_cfg(true, true));
    let mut medians = [[0.0f64; 3]; 3];
    for inv in 0..3 {
        // Interleave short harness calls so background-load bursts land on
        // all three models instead of whichever was being timed, then keep
        // the smallest median per model: scheduler noise only ever adds
        // time, so the minimum is the least-contaminated estimate.
        let mut per_model = [f64::INFINITY; 3];
        for _cycle in 0..15 {
            for (slot, model) in [&audio, &with_ctx, &all].into_iter().enumerate() {
                let summary = benchmark_latency(model, &corpus, Split::Test, 1, 1, 1).unwrap();
                per_model[slot] = per_model[slot].min(summary.median_ms);
            }
        }
        medians[inv] = per_model;
        assert!(
            medians[inv][0] <= medians[inv][1] && medians[inv][1] <= medians[inv][2],
            "invocation {inv}: medians {:?} not ordered audio <= +context <= +prompt+context",
            medians[inv]
        );
    }
    println!(
        "ACCEPTANCE 7 (median latency ordering {:.2} <= {:.2} <= {:.2} ms across 3 invocations): PASS",
        medians[2][0], medians[2][1], medians[2][2]
    );
}

#[test]
fn criterion_8_determinism() {
    let _guard = serial();
    let bin = env!("CARGO_BIN_EXE_bargein");
    let root = tempfile::tempdir().unwrap();
    let overrides = [
        "gen.n_train=16",
        "gen.n_val=4",
        "gen.n_test=4",
        "train.epochs=1",
        "pretrain.steps=5",
    ];
    let run = |args: &[&str]| {
        let mut cmd = std::process::Command::new(bin);
        cmd.args(args);
        for o in &overrides {
            cmd.args(["--set", o]);
        }
        let out = cmd.output().unwrap();
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    };
    let read = |p: std::path::PathBuf| std::fs::read(p).unwrap();

    for tag in ["a", "b"] {
        let data = root.path().join(format!("data-{tag}"));
        let pre = root.path().join(format!("pre-{tag}"));
        let trained = root.path().join(format!("train-{tag}"));
        let scored = root.path().join(format!("eval-{tag}"));
        run(&["gen-data", "--out", data.to_str().unwrap()]);
        run(&[
            "pretrain-infuse",
            "--data",
            data.to_str().unwrap(),
            "--out",
            pre.to_str().unwrap(),
        ]);
        run(&[
            "train",
            "--data",
            data.to_str().unwrap(),
            "--infusion",
            pre.join("infusion.ckpt").to_str().unwrap(),
            "--out",
            trained.to_str().unwrap(),
        ]);
        // evaluate takes no --set overrides; call it directly
        let out = std::process::Command::new(bin)
            .args([
                "evaluate",
                "--data",
                data.to_str().unwrap(),
                "--model",
                trained.join("model.ckpt").to_str().unwrap(),
                "--out",
                scored.to_str().unwrap(),
            ])
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let pairs = [
        ("data-a/manifest.jsonl", "data-b/manifest.jsonl"),
        (
            "data-a/audio/train-00000.wav",
            "data-b/audio/train-00000.wav",
        ),
        ("pre-a/infusion.ckpt", "pre-b/infusion.ckpt"),
        ("train-a/model.ckpt", "train-b/model.ckpt"),
        ("eval-a/scores.json", "eval-b/scores.json"),
    ];
    for (a, b) in pairs {
        assert_eq!(
            read(root.path().join(a)),
            read(root.path().join(b)),
            "{a} and {b} differ"
        );
    }
    println!("ACCEPTANCE 8 (bit-identical manifests, checkpoints, reports across reruns): PASS");
}
