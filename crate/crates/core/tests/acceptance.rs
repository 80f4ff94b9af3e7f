//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gazereward::checkpoint::{model_config_for, TrainedModel};
use gazereward::corpus::{apply_chat_template, ChatTemplate, PreferencePair};
use gazereward::fusion::{Fusion, ProjectorParams};
use gazereward::gazegen::{
    sliding_window_predict, window_weights, Channel, FeatureCombo, GazeFeatureMatrix, Level, Scheme, SurrogateConfig,
};
use gazereward::linalg::Mat;
use gazereward::pipeline::{FeatureSource, Pipeline};
use gazereward::remap::{remap_features, AlignedGroup, AlignmentMap};
use gazereward::rmcore::{
    bt_loss, grad_check, preference_prob, random_batch, score, ModelConfig, ParamGroup, RewardModelParams,
};
use gazereward::synthetic::{gaze_signal_dataset, holdout, text_signal_dataset, GazeSignalConfig, TextSignalConfig};
use gazereward::tokenizers::{align_words, ChunkTokenizer, TokenizedText};
use gazereward::trainer::{
    evaluate_accuracy, grid_search, history_csv, select_trial, train, trials_csv, Grid, Scheduler, TrainConfig, Trial,
};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn column(values: &[f64]) -> GazeFeatureMatrix {
    GazeFeatureMatrix {
        values: Mat::from_vec(values.len(), 1, values.to_vec()),
        channels: vec![Channel::Trt],
        scheme: Scheme::CharMax,
        level: Level::Token,
    }
}

fn single_word(tokens: usize) -> TokenizedText {
    let text = "x".repeat(tokens);
    ChunkTokenizer::fit([text.as_str()], 1).unwrap().tokenize(&text, false, &[]).unwrap()
}

fn one_group(src: usize, tgt: usize) -> AlignmentMap {
    AlignmentMap {
        groups: vec![AlignedGroup {
            source_words: vec![0],
            target_words: vec![0],
            source_tokens: (0..src).collect(),
            target_tokens: (0..tgt).collect(),
        }],
        source_len: src,
        target_len: tgt,
        specials_source: vec![],
        specials_target: vec![],
    }
}

fn remap_one(values: &[f64], tgt: usize, scheme: Scheme) -> Result<Vec<f64>, String> {
    let src = single_word(values.len());
    let out = ok(remap_features(&column(values), &one_group(values.len(), tgt), scheme, &src, &single_word(tgt)))?;
    Ok(out.values.column(0))
}

fn table_six() -> Outcome {
    let s1 = remap_one(&[11.23, 11.49, 10.16], 5, Scheme::CharMax)?;
    for v in &s1 {
        ensure((v - 6.576).abs() < 1e-9, format!("scheme 1 gave {v}, expected 6.576"))?;
    }
    let s2 = remap_one(&[24.53, 0.0, 0.0], 5, Scheme::FirstToken)?;
    ensure(s2 == vec![24.53, 0.0, 0.0, 0.0, 0.0], format!("scheme 2 gave {s2:?}"))?;
    let prose = remap_one(&[1.0, 2.0], 3, Scheme::CharMax)?;
    ensure(prose.iter().all(|&v| (v - 1.0).abs() < 1e-12), format!("(1, 2) over 3 gave {prose:?}"))?;
    Ok(format!("scheme 1 per token {:.3}", s1[0]))
}

fn random_text(rng: &mut ChaCha8Rng) -> String {
    let n = rng.gen_range(1..=15);
    (0..n)
        .map(|_| {
            let len = rng.gen_range(1..=10);
            (0..len).map(|_| rng.gen_range(b'a'..=b'z') as char).collect::<String>()
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn mass_conservation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let trials = 1200;
    let mut worst: f64 = 0.0;
    for trial in 0..trials {
        let template = if trial % 2 == 0 { ChatTemplate::Headered } else { ChatTemplate::Instruct };
        let text = ok(apply_chat_template(&random_text(&mut rng), &random_text(&mut rng), template))?;
        let a = ok(ChunkTokenizer::fit([text.as_str()], rng.gen_range(1..=6)))?;
        let b = ok(ChunkTokenizer::fit([text.as_str()], rng.gen_range(1..=6)))?;
        let source = ok(a.tokenize(&text, false, template.markers()))?;
        let target = ok(b.tokenize(&text, true, template.markers()))?;
        let align = ok(align_words(&source, &target))?;
        let channels = 2;
        let values = Mat::from_vec(
            source.len(),
            channels,
            (0..source.len() * channels).map(|_| rng.gen_range(0.0..400.0)).collect(),
        );
        let src = GazeFeatureMatrix {
            values,
            channels: vec![Channel::Trt, Channel::Ffd],
            scheme: Scheme::CharMax,
            level: Level::Token,
        };
        let out = ok(remap_features(&src, &align, Scheme::CharMax, &source, &target))?;
        for c in 0..channels {
            let total_in: f64 = src.values.column(c).iter().sum();
            let total_out: f64 = out.values.column(c).iter().sum();
            worst = worst.max((total_in - total_out).abs());
            for w in 0..source.words.len() {
                let sum_side = |tok: &TokenizedText, m: &Mat| -> f64 {
                    (0..tok.len()).filter(|&t| tok.word_ids[t] == Some(w)).map(|t| m.get(t, c)).sum()
                };
                let d = (sum_side(&source, &src.values) - sum_side(&target, &out.values)).abs();
                worst = worst.max(d);
            }
        }
    }
    ensure(worst < 1e-9, format!("largest sum difference {worst:e}"))?;
    Ok(format!("{trials} texts, largest sum difference {worst:.1e}"))
}

fn loss_fixtures() -> Outcome {
    let l0 = bt_loss(0.0, 0.0);
    ensure((l0 - std::f64::consts::LN_2).abs() < 1e-12, format!("margin 0 loss {l0}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_shift: f64 = 0.0;
    let mut worst_log: f64 = 0.0;
    for _ in 0..10_000 {
        let (w, l) = (rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0));
        let c = rng.gen_range(-50.0..50.0);
        worst_shift = worst_shift.max((preference_prob(w + c, l + c) - preference_prob(w, l)).abs());
        worst_log = worst_log.max((bt_loss(w, l) + preference_prob(w, l).ln()).abs());
    }
    ensure(worst_shift < 1e-12, format!("translation changed probability by {worst_shift:e}"))?;
    ensure(worst_log < 1e-12, format!("loss differs from -log p by {worst_log:e}"))?;
    Ok(format!("shift {worst_shift:.1e}, -log p {worst_log:.1e}"))
}

fn gradient_check() -> Outcome {
    let mut seen = std::collections::BTreeSet::new();
    let mut worst: f64 = 0.0;
    for fusion in [Fusion::Baseline, Fusion::Concat, Fusion::Add] {
        let config = ModelConfig {
            vocab_size: 24,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            max_positions: 32,
            fusion,
            feature_width: if fusion.uses_gaze() { 2 } else { 0 },
            special_rows: 6,
            eye_open_id: 4,
            eye_close_id: 5,
            init_std: 0.3,
        };
        let params = ok(RewardModelParams::init(config.clone(), 1))?;
        let batch = random_batch(&config, 4, 2);
        let report = ok(grad_check(&params, &batch, 1e-5, 1e-6))?;
        ensure(report.passes(1e-4), format!("{fusion}:\n{}", report.render(1e-4)))?;
        ensure(report.leaking_rows.is_empty(), format!("{fusion}: absent rows {:?} have gradient", report.leaking_rows))?;
        worst = worst.max(report.max_error());
        seen.extend(report.groups.keys().copied());
    }
    let missing: Vec<String> = ParamGroup::ALL.iter().filter(|g| !seen.contains(g)).map(|g| g.to_string()).collect();
    ensure(missing.is_empty(), format!("groups never checked: {missing:?}"))?;
    Ok(format!("max relative error {worst:.2e} over {} groups", seen.len()))
}

fn zero_gaze_neutrality() -> Outcome {
    let pairs = text_signal_dataset(&TextSignalConfig {
        pairs: 100,
        ..TextSignalConfig::default()
    });
    let mut pl = ok(Pipeline::fit(&pairs, ChatTemplate::Headered, Fusion::Add, FeatureCombo::Fcomb2_5, SurrogateConfig::default()))?;
    ok(pl.fit_norm(&pairs, &FeatureSource::Surrogate))?;
    let inputs = ok(pl.encode_pairs(&pairs, &FeatureSource::Surrogate))?;
    let cfg = ok(model_config_for(&pl, 64, 2, 2, 512, 0.02))?;
    let mut add = ok(RewardModelParams::init(cfg, 5))?;
    add.projector = Some(ProjectorParams::zeros(add.config.feature_width, add.config.d_model));
    let mut base = add.clone();
    base.config.fusion = Fusion::Baseline;
    base.config.feature_width = 0;
    base.projector = None;
    let mut compared = 0;
    for (a, b) in &inputs {
        for input in [a, b] {
            let ra = ok(score(&add, input))?;
            let rb = ok(score(&base, &gazereward::rmcore::ModelInput::text(input.ids.clone())))?;
            ensure(ra.to_bits() == rb.to_bits(), format!("rewards differ: {ra} vs {rb}"))?;
            compared += 1;
        }
    }
    Ok(format!("{compared} rewards bit-identical"))
}

fn windowed(range: std::ops::Range<usize>) -> Mat {
    let start = range.start as f64;
    let rows: Vec<f64> = range
        .flat_map(|p| {
            let p = p as f64;
            [p.sin() + 0.01 * start, (0.3 * p).cos() * (1.0 + start / 1000.0)]
        })
        .collect();
    Mat::from_vec(rows.len() / 2, 2, rows)
}

fn sliding_window() -> Outcome {
    for len in [1, 17, 511, 512] {
        let got = ok(sliding_window_predict(len, 512, 50, |r| Ok(windowed(r))))?;
        ensure(got == windowed(0..len), format!("length {len} differs from direct prediction"))?;
    }
    let mut worst_sum: f64 = 0.0;
    for len in [513, 900, 1000, 1400, 2048] {
        let mut total = vec![0.0; len];
        for (r, w) in window_weights(len, 512, 50) {
            for (p, x) in r.zip(w) {
                total[p] += x;
            }
        }
        worst_sum = total.iter().map(|t| (t - 1.0).abs()).fold(worst_sum, f64::max);
    }
    ensure(worst_sum < 1e-12, format!("weights deviate from 1 by {worst_sum:e}"))?;

    // Two windows, [0, 512) and [462, 900), cross-fading over [462, 512).
    let len = 900;
    let got = ok(sliding_window_predict(len, 512, 50, |r| Ok(windowed(r))))?;
    let (first, second) = (windowed(0..512), windowed(462..900));
    let mut worst: f64 = 0.0;
    for p in 0..len {
        for c in 0..2 {
            let expected = if p < 462 {
                first.get(p, c)
            } else if p >= 512 {
                second.get(p - 462, c)
            } else {
                let up = (p - 462 + 1) as f64 / 51.0;
                (1.0 - up) * first.get(p, c) + up * second.get(p - 462, c)
            };
            worst = worst.max((got.get(p, c) - expected).abs());
        }
    }
    ensure(worst < 1e-12, format!("900-token output differs from oracle by {worst:e}"))?;
    Ok(format!("oracle difference {worst:.1e}, weight sum deviation {worst_sum:.1e}"))
}

fn accuracy_of(fusion: Fusion, train_pairs: &[PreferencePair], test: &[PreferencePair], source: &FeatureSource, combo: FeatureCombo) -> Result<f64, String> {
    let cfg = TrainConfig {
        fusion,
        combo,
        seed: 1,
        epochs: 2,
        ..TrainConfig::default()
    };
    let out = ok(train(train_pairs, source, &cfg))?;
    Ok(ok(evaluate_accuracy(test, &out.model, source, None))?.accuracy)
}

fn gaze_signal() -> Outcome {
    let (pairs, records) = ok(gaze_signal_dataset(&GazeSignalConfig::default()))?;
    let source = ok(FeatureSource::from_records(records))?;
    let (train_pairs, test) = holdout(&pairs, 500);
    let base = accuracy_of(Fusion::Baseline, &train_pairs, &test, &source, FeatureCombo::Fcomb1)?;
    let concat = accuracy_of(Fusion::Concat, &train_pairs, &test, &source, FeatureCombo::Fcomb1)?;
    let add = accuracy_of(Fusion::Add, &train_pairs, &test, &source, FeatureCombo::Fcomb1)?;
    let summary = format!("baseline {base:.3}, concat {concat:.3}, add {add:.3}");
    ensure(base <= 0.55, format!("baseline above 0.55: {summary}"))?;
    ensure(concat >= 0.80 && add >= 0.80, format!("fusion below 0.80: {summary}"))?;
    let gain = concat.min(add) / base - 1.0;
    ensure(gain > 0.20, format!("relative improvement {gain:.3}: {summary}"))?;
    Ok(format!("{summary}, relative improvement {:.0}%", 100.0 * gain))
}

fn text_signal() -> Outcome {
    let pairs = text_signal_dataset(&TextSignalConfig::default());
    let (train_pairs, test) = holdout(&pairs, pairs.len() / 4);
    let source = FeatureSource::Surrogate;
    let mut parts = Vec::new();
    for fusion in [Fusion::Baseline, Fusion::Concat, Fusion::Add] {
        let acc = accuracy_of(fusion, &train_pairs, &test, &source, FeatureCombo::Fcomb2_5)?;
        ensure(acc >= 0.90, format!("{fusion} reached {acc:.3}"))?;
        parts.push(format!("{fusion} {acc:.3}"));
    }
    Ok(parts.join(", "))
}

fn small_config(fusion: Fusion) -> TrainConfig {
    TrainConfig {
        fusion,
        combo: FeatureCombo::Fcomb2_5,
        d_model: 32,
        epochs: 2,
        seed: 9,
        eval_every: 5,
        ..TrainConfig::default()
    }
}

fn determinism() -> Outcome {
    let pairs = text_signal_dataset(&TextSignalConfig {
        pairs: 160,
        ..TextSignalConfig::default()
    });
    let mut sizes = Vec::new();
    for fusion in [Fusion::Concat, Fusion::Add] {
        let cfg = small_config(fusion);
        let a = ok(train(&pairs, &FeatureSource::Surrogate, &cfg))?;
        let b = ok(train(&pairs, &FeatureSource::Surrogate, &cfg))?;
        let (ba, bb) = (ok(a.model.to_bytes())?, ok(b.model.to_bytes())?);
        ensure(ba == bb, format!("{fusion}: checkpoints differ"))?;
        ensure(history_csv(&a.history) == history_csv(&b.history), format!("{fusion}: histories differ"))?;
        sizes.push(format!("{fusion} {} bytes", ba.len()));
    }
    Ok(format!("identical checkpoints ({})", sizes.join(", ")))
}

fn argmin_of_table(csv: &str) -> Result<usize, String> {
    let mut best: Option<(usize, f64)> = None;
    for (i, line) in csv.lines().skip(1).enumerate() {
        let loss: f64 = line.split(',').nth(3).ok_or("short row")?.parse().map_err(|_| "bad loss")?;
        if best.map_or(true, |(_, b)| loss < b) {
            best = Some((i, loss));
        }
    }
    best.map(|(i, _)| i).ok_or_else(|| "empty table".to_string())
}

fn grid() -> Outcome {
    let pairs = text_signal_dataset(&TextSignalConfig {
        pairs: 120,
        ..TextSignalConfig::default()
    });
    // A floor of 1 makes cosine_min identical to constant, so every
    // (batch size, learning rate) cell holds an exact tie.
    let base = TrainConfig {
        min_lr_fraction: 1.0,
        ..small_config(Fusion::Baseline)
    };
    let grid = Grid {
        batch_sizes: vec![4, 8],
        lrs: vec![5e-4, 2e-3],
        schedulers: vec![Scheduler::CosineMin, Scheduler::Constant],
    };
    let out = ok(grid_search(&pairs, &FeatureSource::Surrogate, &base, &grid, 2))?;
    ensure(out.trials.len() == 8, "expected 8 trials")?;
    let table = trials_csv(&out.trials);
    let argmin = argmin_of_table(&table)?;
    ensure(argmin == out.best_index, format!("table argmin {argmin}, returned {}", out.best_index))?;
    let t = &out.trials[argmin];
    ensure(
        (out.best.batch_size, out.best.lr0, out.best.scheduler) == (t.batch_size, t.lr0, t.scheduler),
        "returned config does not match the table row",
    )?;
    for pair in out.trials.chunks(2) {
        ensure(pair[0].best_val_loss.to_bits() == pair[1].best_val_loss.to_bits(), "scheduler tie did not hold")?;
    }
    ensure(out.best.scheduler == Scheduler::Constant, "tie not resolved to the earlier cell")?;

    let trial = |loss| Trial {
        batch_size: 8,
        lr0: 1e-5,
        scheduler: Scheduler::Constant,
        best_val_loss: loss,
        best_step: 0,
    };
    ensure(select_trial(&[trial(0.7), trial(0.4), trial(0.4)]) == Some(1), "constructed tie not resolved to the first")?;

    let serial = ok(grid_search(&pairs, &FeatureSource::Surrogate, &base, &grid, 1))?;
    ensure(serial.trials == out.trials, "threaded and serial trials differ")?;
    Ok(format!(
        "best batch {} lr {:e} {} (loss {:.4})",
        out.best.batch_size, out.best.lr0, out.best.scheduler, t.best_val_loss
    ))
}

/// A model whose reward depends only on sequence length: blocks are zeroed,
/// every token embeds to [0, 0, 1, -1] and position p to [p, -p, 0, 0], so
/// the final norm gives p / sqrt((p^2 + 1) / 2) on the first coordinate,
/// which the head reads. Longer responses score higher.
fn length_model(pairs: &[PreferencePair]) -> Result<TrainedModel, String> {
    let pipeline = ok(Pipeline::fit(pairs, ChatTemplate::Headered, Fusion::Baseline, FeatureCombo::Fcomb1, SurrogateConfig::default()))?;
    let cfg = ok(model_config_for(&pipeline, 4, 1, 1, 64, 0.02))?;
    let mut params = ok(RewardModelParams::init(cfg, 0))?;
    let keep: Vec<bool> = params.specs().iter().map(|s| s.name.contains("gain")).collect();
    for (t, keep) in params.tensors_mut().into_iter().zip(keep) {
        if !keep {
            t.as_mut_slice().fill(0.0);
        }
    }
    for r in 0..params.tok_emb.rows() {
        params.tok_emb.row_mut(r).copy_from_slice(&[0.0, 0.0, 1.0, -1.0]);
    }
    for p in 0..params.pos_emb.rows() {
        params.pos_emb.row_mut(p).copy_from_slice(&[p as f64, -(p as f64), 0.0, 0.0]);
    }
    params.head_w.set(0, 0, 1.0);
    Ok(TrainedModel {
        pipeline,
        params,
        best_step: 0,
        best_val_loss: 0.0,
    })
}

fn metric_and_templates() -> Outcome {
    let words = |n: usize| vec!["ab"; n].join(" ");
    // (chosen words, rejected words): six longer, three shorter, one equal.
    let lengths = [(3, 1), (4, 2), (5, 1), (2, 1), (6, 3), (4, 3), (1, 2), (2, 5), (3, 4), (3, 3)];
    let pairs: Vec<PreferencePair> = lengths
        .iter()
        .enumerate()
        .map(|(i, &(c, r))| {
            let rejected = if c == r { vec!["cd"; r].join(" ") } else { words(r) };
            PreferencePair::new(format!("m{i}"), "hi there", words(c), rejected)
        })
        .collect();
    let model = length_model(&pairs)?;
    let report = ok(evaluate_accuracy(&pairs, &model, &FeatureSource::Surrogate, None))?;
    ensure(
        (report.correct, report.total, report.ties) == (6, 10, 1),
        format!("got {} correct, {} total, {} ties", report.correct, report.total, report.ties),
    )?;
    ensure(report.accuracy == 0.6, format!("accuracy {}", report.accuracy))?;

    let golden = [
        (
            ChatTemplate::Headered,
            "Example Prompt",
            "Example Response",
            "⟨im_start⟩ user Example Prompt ⟨im_end⟩ ⟨im_start⟩ assistant Example Response ⟨im_end⟩",
        ),
        (
            ChatTemplate::Instruct,
            "Example Prompt",
            "Example Response",
            "⟨s⟩ [INST] Example Prompt [/INST] Example Response ⟨/s⟩",
        ),
        (ChatTemplate::Headered, "Hi", "Hello", "⟨im_start⟩ user Hi ⟨im_end⟩ ⟨im_start⟩ assistant Hello ⟨im_end⟩"),
        (ChatTemplate::Instruct, "Hi", "Hello", "⟨s⟩ [INST] Hi [/INST] Hello ⟨/s⟩"),
    ];
    for (style, prompt, response, expected) in golden {
        let got = ok(apply_chat_template(prompt, response, style))?;
        ensure(got.as_bytes() == expected.as_bytes(), format!("{style}: {got:?}"))?;
    }
    Ok("accuracy 0.6 with one tie; 4 template strings byte-exact".into())
}

struct Criterion {
    name: &'static str,
    limit: Duration,
    run: fn() -> Outcome,
}

fn main() -> ExitCode {
    let secs = Duration::from_secs;
    let criteria = [
        Criterion { name: "remap fixture", limit: secs(1), run: table_six },
        Criterion { name: "remap mass conservation", limit: secs(10), run: mass_conservation },
        Criterion { name: "preference loss fixtures", limit: secs(5), run: loss_fixtures },
        Criterion { name: "gradient check", limit: secs(120), run: gradient_check },
        Criterion { name: "zero-gaze neutrality", limit: secs(10), run: zero_gaze_neutrality },
        Criterion { name: "sliding window", limit: secs(5), run: sliding_window },
        Criterion { name: "gaze-signal experiment", limit: secs(900), run: gaze_signal },
        Criterion { name: "text-signal sanity", limit: secs(900), run: text_signal },
        Criterion { name: "determinism", limit: Duration::MAX, run: determinism },
        Criterion { name: "grid search", limit: secs(600), run: grid },
        Criterion { name: "metric and template fixtures", limit: Duration::MAX, run: metric_and_templates },
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, c) in criteria.iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let result = match result {
            Ok(_) if elapsed > c.limit => Err(format!("took {:.1}s, limit {}s", elapsed.as_secs_f64(), c.limit.as_secs())),
            r => r,
        };
        match result {
            Ok(detail) => println!("PASS {n:>2} {}: {detail} ({:.1}s)", c.name, elapsed.as_secs_f64()),
            Err(why) => {
                failed += 1;
                println!("FAIL {n:>2} {}: {why} ({:.1}s)", c.name, elapsed.as_secs_f64());
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
