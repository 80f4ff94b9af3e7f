//! Pairwise training, evaluation and hyper-parameter search.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::checkpoint::{model_config_for, TrainedModel};
use crate::corpus::{split_dataset, ChatTemplate, PreferencePair};
use crate::error::{Error, Result};
use crate::fusion::{Fusion, Mode};
use crate::gazegen::{FeatureCombo, SurrogateConfig};
use crate::pipeline::{FeatureSource, Pipeline};
use crate::rmcore::{
    batch_loss, score, InputPair, ModelInput, RewardModelParams, DEFAULT_D_MODEL, DEFAULT_HEADS,
    DEFAULT_INIT_STD, DEFAULT_LAYERS, DEFAULT_POSITIONS,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Scheduler {
    Constant,
    Linear,
    CosineMin,
}

impl Scheduler {
    pub const ALL: [Scheduler; 3] = [Scheduler::Constant, Scheduler::Linear, Scheduler::CosineMin];
}

impl fmt::Display for Scheduler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheduler::Constant => "constant",
            Scheduler::Linear => "linear",
            Scheduler::CosineMin => "cosine_min",
        })
    }
}

impl FromStr for Scheduler {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Scheduler::Constant),
            "linear" => Ok(Scheduler::Linear),
            "cosine_min" => Ok(Scheduler::CosineMin),
            other => Err(Error::Config(format!(
                "unknown scheduler '{other}' (expected constant, linear or cosine_min)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub fusion: Fusion,
    pub combo: FeatureCombo,
    pub template: ChatTemplate,
    pub lr0: f64,
    pub scheduler: Scheduler,
    pub min_lr_fraction: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub val_frac: f64,
    pub seed: u64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub eval_every: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_positions: usize,
    pub init_std: f64,
    pub surrogate: SurrogateConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            fusion: Fusion::Baseline,
            combo: FeatureCombo::Fcomb1,
            template: ChatTemplate::Headered,
            lr0: 5e-4,
            scheduler: Scheduler::CosineMin,
            min_lr_fraction: 0.7,
            batch_size: 8,
            epochs: 2,
            val_frac: 0.15,
            seed: 0,
            weight_decay: 0.01,
            grad_clip: 1.0,
            eval_every: 50,
            d_model: DEFAULT_D_MODEL,
            n_layers: DEFAULT_LAYERS,
            n_heads: DEFAULT_HEADS,
            max_positions: DEFAULT_POSITIONS,
            init_std: DEFAULT_INIT_STD,
            surrogate: SurrogateConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

impl TrainConfig {
    pub const KEYS: [&'static str; 22] = [
        "fusion",
        "combo",
        "template",
        "lr0",
        "scheduler",
        "min_lr_fraction",
        "batch_size",
        "epochs",
        "val_frac",
        "seed",
        "weight_decay",
        "grad_clip",
        "eval_every",
        "d_model",
        "n_layers",
        "n_heads",
        "max_positions",
        "init_std",
        "window",
        "overlap",
        "epsilon_last_char",
        "k",
    ];

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.min_lr_fraction > 0.0 && self.min_lr_fraction <= 1.0) {
            return fail("min_lr_fraction must lie in (0, 1]");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1");
        }
        if self.epochs == 0 {
            return fail("epochs must be at least 1");
        }
        if !(0.0..1.0).contains(&self.val_frac) {
            return fail("val_frac must lie in [0, 1)");
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return fail("lr0 must be positive");
        }
        if !(self.weight_decay >= 0.0) || !(self.grad_clip > 0.0) {
            return fail("weight_decay must be non-negative and grad_clip positive");
        }
        if self.eval_every == 0 {
            return fail("eval_every must be at least 1");
        }
        self.surrogate.validate()
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "fusion" => self.fusion = v.parse()?,
            "combo" => self.combo = v.parse()?,
            "template" => self.template = v.parse()?,
            "lr0" => self.lr0 = parse(key, v)?,
            "scheduler" => self.scheduler = v.parse()?,
            "min_lr_fraction" => self.min_lr_fraction = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "val_frac" => self.val_frac = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "grad_clip" => self.grad_clip = parse(key, v)?,
            "eval_every" => self.eval_every = parse(key, v)?,
            "d_model" => self.d_model = parse(key, v)?,
            "n_layers" => self.n_layers = parse(key, v)?,
            "n_heads" => self.n_heads = parse(key, v)?,
            "max_positions" => self.max_positions = parse(key, v)?,
            "init_std" => self.init_std = parse(key, v)?,
            "window" => self.surrogate.window = parse(key, v)?,
            "overlap" => self.surrogate.overlap = parse(key, v)?,
            "epsilon_last_char" => self.surrogate.epsilon_last_char = parse(key, v)?,
            "k" => self.surrogate.k = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and lines
    /// starting with `#` are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            self.set(k.trim(), v).map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in Self::KEYS {
            let _ = writeln!(out, "{key} = {}", self.value(key));
        }
        out
    }

    fn value(&self, key: &str) -> String {
        match key {
            "fusion" => self.fusion.to_string(),
            "combo" => self.combo.to_string(),
            "template" => self.template.to_string(),
            "lr0" => self.lr0.to_string(),
            "scheduler" => self.scheduler.to_string(),
            "min_lr_fraction" => self.min_lr_fraction.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "epochs" => self.epochs.to_string(),
            "val_frac" => self.val_frac.to_string(),
            "seed" => self.seed.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "grad_clip" => self.grad_clip.to_string(),
            "eval_every" => self.eval_every.to_string(),
            "d_model" => self.d_model.to_string(),
            "n_layers" => self.n_layers.to_string(),
            "n_heads" => self.n_heads.to_string(),
            "max_positions" => self.max_positions.to_string(),
            "init_std" => self.init_std.to_string(),
            "window" => self.surrogate.window.to_string(),
            "overlap" => self.surrogate.overlap.to_string(),
            "epsilon_last_char" => self.surrogate.epsilon_last_char.to_string(),
            "k" => self.surrogate.k.to_string(),
            _ => unreachable!("key list and value table agree"),
        }
    }

    /// Short hash of the textual form.
    pub fn fingerprint(&self) -> String {
        hex::encode(&Sha256::digest(self.to_text().as_bytes())[..6])
    }
}

/// Learning rate at step `t` of `total`.
pub fn lr_schedule(cfg: &TrainConfig, t: usize, total: usize) -> f64 {
    let frac = t.min(total) as f64 / total.max(1) as f64;
    let lr0 = cfg.lr0;
    match cfg.scheduler {
        Scheduler::Constant => lr0,
        Scheduler::Linear => lr0 * (1.0 - frac),
        Scheduler::CosineMin => {
            let m = cfg.min_lr_fraction;
            m * lr0 + 0.5 * (1.0 - m) * lr0 * (1.0 + (PI * frac).cos())
        }
    }
}

/// Adaptive moments with decoupled weight decay on matrix parameters.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: RewardModelParams,
    v: RewardModelParams,
    decay: Vec<bool>,
    t: i32,
}

impl AdamW {
    pub fn new(params: &RewardModelParams, weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: params.zeros_like(),
            v: params.zeros_like(),
            decay: params.specs().iter().map(|s| s.decay).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut RewardModelParams, grads: &RewardModelParams, lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
            .zip(&self.decay);
        for ((((p, g), m), v), &decay) in tensors {
            let p = p.as_mut_slice();
            let (m, v) = (m.as_mut_slice(), v.as_mut_slice());
            for i in 0..p.len() {
                let gi = g.as_slice()[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                if decay {
                    p[i] -= lr * self.weight_decay * p[i];
                }
                p[i] -= lr * update;
            }
        }
    }
}

/// Scales `grads` so its global norm is at most `max_norm`; returns the norm
/// before clipping.
pub fn clip_grad_norm(grads: &mut RewardModelParams, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    pub step: usize,
    pub train_loss: Option<f64>,
    pub val_loss: Option<f64>,
    pub lr: f64,
}

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.10}")).unwrap_or_default();
    let mut out = String::from("step,train_loss,val_loss,lr\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{:e}", r.step, opt(r.train_loss), opt(r.val_loss), r.lr);
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: TrainedModel,
    pub history: Vec<HistoryRow>,
    pub initial_val_loss: f64,
    /// Every (step, validation loss) evaluation, in order.
    pub evaluations: Vec<(usize, f64)>,
}

fn mean_loss(params: &RewardModelParams, pairs: &[InputPair]) -> Result<f64> {
    let refs: Vec<&InputPair> = pairs.iter().collect();
    let mut total = 0.0;
    for chunk in refs.chunks(64) {
        total += batch_loss(params, chunk, Mode::Eval, 0, 0, None)? * chunk.len() as f64;
    }
    Ok(total / pairs.len() as f64)
}

fn fused_len(input: &ModelInput, fusion: Fusion) -> usize {
    match (fusion, &input.gaze) {
        (Fusion::Concat, Some(g)) => input.ids.len() + g.rows() + 2,
        _ => input.ids.len(),
    }
}

/// Splits `pairs` with `cfg.val_frac` and `cfg.seed`, then trains.
pub fn train(pairs: &[PreferencePair], features: &FeatureSource, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let (train_pairs, val_pairs) = split_dataset(pairs, cfg.val_frac, cfg.seed);
    train_with_validation(&train_pairs, &val_pairs, features, cfg)
}

/// Trains on `train_pairs` and keeps the parameters with the lowest
/// validation loss, including the initial ones. Without validation pairs the
/// training set is used for selection.
pub fn train_with_validation(
    train_pairs: &[PreferencePair],
    val_pairs: &[PreferencePair],
    features: &FeatureSource,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_pairs.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let mut pipeline = Pipeline::fit(train_pairs, cfg.template, cfg.fusion, cfg.combo, cfg.surrogate.clone())?;
    pipeline.fit_norm(train_pairs, features)?;
    train_pipeline(pipeline, train_pairs, val_pairs, features, cfg)
}

/// Training loop for an already fitted pipeline.
pub fn train_pipeline(
    pipeline: Pipeline,
    train_pairs: &[PreferencePair],
    val_pairs: &[PreferencePair],
    features: &FeatureSource,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_inputs = pipeline.encode_pairs(train_pairs, features)?;
    let val_inputs = if val_pairs.is_empty() {
        train_inputs.clone()
    } else {
        pipeline.encode_pairs(val_pairs, features)?
    };
    let longest = train_inputs
        .iter()
        .chain(&val_inputs)
        .flat_map(|(a, b)| [fused_len(a, cfg.fusion), fused_len(b, cfg.fusion)])
        .max()
        .unwrap_or(0);
    if longest > cfg.max_positions {
        return Err(Error::Length {
            what: "longest fused sequence vs max_positions",
            expected: cfg.max_positions,
            actual: longest,
        });
    }

    let model_cfg = model_config_for(&pipeline, cfg.d_model, cfg.n_layers, cfg.n_heads, cfg.max_positions, cfg.init_std)?;
    let mut params = RewardModelParams::init(model_cfg, cfg.seed)?;
    let mut opt = AdamW::new(&params, cfg.weight_decay);
    let steps_per_epoch = train_inputs.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;

    let initial_val_loss = mean_loss(&params, &val_inputs)?;
    let mut best = (0usize, initial_val_loss, params.clone());
    let mut evaluations = vec![(0, initial_val_loss)];
    let mut history = vec![HistoryRow {
        step: 0,
        train_loss: None,
        val_loss: Some(initial_val_loss),
        lr: lr_schedule(cfg, 0, total),
    }];
    log::info!(
        "training {} pairs ({} validation), {} steps, initial validation loss {initial_val_loss:.6}",
        train_inputs.len(),
        val_inputs.len(),
        total
    );

    let mut order: Vec<usize> = (0..train_inputs.len()).collect();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9)));
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let lr = lr_schedule(cfg, step, total);
            let batch: Vec<&InputPair> = chunk.iter().map(|&i| &train_inputs[i]).collect();
            let mut grads = params.zeros_like();
            let loss = batch_loss(&params, &batch, Mode::Train, cfg.seed, step as u64, Some(&mut grads))
                .map_err(|e| match e {
                    Error::NonFinite(_) => Error::Diverged { step: step + 1 },
                    other => other,
                })?;
            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::Diverged { step: step + 1 });
            }
            clip_grad_norm(&mut grads, cfg.grad_clip);
            opt.step(&mut params, &grads, lr);
            step += 1;

            let epoch_end = b + 1 == steps_per_epoch;
            let val_loss = if step % cfg.eval_every == 0 || epoch_end {
                let v = mean_loss(&params, &val_inputs)?;
                if !v.is_finite() {
                    return Err(Error::Diverged { step });
                }
                evaluations.push((step, v));
                if v < best.1 {
                    best = (step, v, params.clone());
                }
                log::debug!("step {step}: train {loss:.6}, validation {v:.6}");
                Some(v)
            } else {
                None
            };
            history.push(HistoryRow {
                step,
                train_loss: Some(loss),
                val_loss,
                lr,
            });
        }
    }
    let (best_step, best_val_loss, best_params) = best;
    log::info!("best validation loss {best_val_loss:.6} at step {best_step}");
    Ok(TrainOutcome {
        model: TrainedModel {
            pipeline,
            params: best_params,
            best_step: best_step as u64,
            best_val_loss,
        },
        history,
        initial_val_loss,
        evaluations,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubsetScore {
    pub correct: usize,
    pub total: usize,
    pub ties: usize,
}

impl SubsetScore {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub ties: usize,
    pub subsets: BTreeMap<String, SubsetScore>,
    /// Unweighted mean over non-empty subsets.
    pub macro_average: Option<f64>,
    pub fingerprint: String,
    pub warnings: Vec<String>,
}

impl EvalReport {
    /// Accuracy from (chosen, rejected) rewards; a tie counts as incorrect.
    pub fn from_rewards(rewards: &[(f64, f64)], subsets: &[Option<String>], fingerprint: &str) -> Self {
        let mut overall = SubsetScore {
            correct: 0,
            total: 0,
            ties: 0,
        };
        let mut by_subset: BTreeMap<String, SubsetScore> = BTreeMap::new();
        for (i, &(w, l)) in rewards.iter().enumerate() {
            let tally = |s: &mut SubsetScore| {
                s.total += 1;
                if w > l {
                    s.correct += 1;
                } else if w == l {
                    s.ties += 1;
                }
            };
            tally(&mut overall);
            if let Some(Some(name)) = subsets.get(i) {
                tally(by_subset.entry(name.clone()).or_insert(SubsetScore {
                    correct: 0,
                    total: 0,
                    ties: 0,
                }));
            }
        }
        let macro_average = (!by_subset.is_empty())
            .then(|| by_subset.values().map(SubsetScore::accuracy).sum::<f64>() / by_subset.len() as f64);
        EvalReport {
            accuracy: overall.accuracy(),
            correct: overall.correct,
            total: overall.total,
            ties: overall.ties,
            subsets: by_subset,
            macro_average,
            fingerprint: fingerprint.to_string(),
            warnings: Vec::new(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("subset,correct,total,ties,accuracy\n");
        let _ = writeln!(out, "overall,{},{},{},{:.6}", self.correct, self.total, self.ties, self.accuracy);
        for (name, s) in &self.subsets {
            let _ = writeln!(out, "{name},{},{},{},{:.6}", s.correct, s.total, s.ties, s.accuracy());
        }
        if let Some(m) = self.macro_average {
            let _ = writeln!(out, "macro,,,,{m:.6}");
        }
        out
    }

    pub fn to_text(&self) -> String {
        let width = self.subsets.keys().map(String::len).max().unwrap_or(0).max(7);
        let mut out = format!("{:<width$}  {:>7}  {:>7}  {:>5}  {:>8}\n", "subset", "correct", "total", "ties", "accuracy");
        let mut row = |name: &str, c: String, t: String, ties: String, a: f64| {
            let _ = writeln!(out, "{name:<width$}  {c:>7}  {t:>7}  {ties:>5}  {a:>8.4}");
        };
        row("overall", self.correct.to_string(), self.total.to_string(), self.ties.to_string(), self.accuracy);
        for (name, s) in &self.subsets {
            row(name, s.correct.to_string(), s.total.to_string(), s.ties.to_string(), s.accuracy());
        }
        if let Some(m) = self.macro_average {
            row("macro", String::new(), String::new(), String::new(), m);
        }
        let _ = writeln!(out, "config {}", self.fingerprint);
        for w in &self.warnings {
            let _ = writeln!(out, "warning: {w}");
        }
        out
    }
}

/// Rewards of every pair, chosen first.
pub fn pair_rewards(pairs: &[PreferencePair], model: &TrainedModel, features: &FeatureSource) -> Result<Vec<(f64, f64)>> {
    pairs
        .iter()
        .map(|p| {
            let (a, b) = model.pipeline.encode_pair(p, features)?;
            Ok((score(&model.params, &a)?, score(&model.params, &b)?))
        })
        .collect()
}

fn model_fingerprint(model: &TrainedModel) -> Result<String> {
    Ok(hex::encode(&Sha256::digest(model.to_bytes()?)[..6]))
}

/// Pairwise accuracy. With `vocab_hash`, the model must have been trained
/// with that vocabulary.
pub fn evaluate_accuracy(
    pairs: &[PreferencePair],
    model: &TrainedModel,
    features: &FeatureSource,
    vocab_hash: Option<&str>,
) -> Result<EvalReport> {
    if let Some(expected) = vocab_hash {
        let ours = model.pipeline.reward_tokenizer.vocab().hash();
        if ours != expected {
            return Err(Error::Checkpoint(format!(
                "vocabulary hash mismatch: model {ours}, expected {expected}"
            )));
        }
    }
    let rewards = pair_rewards(pairs, model, features)?;
    let subsets: Vec<Option<String>> = pairs.iter().map(|p| p.subset.clone()).collect();
    Ok(EvalReport::from_rewards(&rewards, &subsets, &model_fingerprint(model)?))
}

/// Per-subset accuracy and macro average. With `only`, other subsets are
/// dropped and requested subsets without pairs are reported as warnings.
pub fn bench_categories(
    pairs: &[PreferencePair],
    model: &TrainedModel,
    features: &FeatureSource,
    only: Option<&[String]>,
) -> Result<EvalReport> {
    if let Some(p) = pairs.iter().find(|p| p.subset.is_none()) {
        return Err(Error::Data(format!("pair {:?} has no subset label", p.id)));
    }
    let kept: Vec<PreferencePair> = pairs
        .iter()
        .filter(|p| only.map_or(true, |o| o.contains(p.subset.as_ref().expect("checked above"))))
        .cloned()
        .collect();
    let rewards = pair_rewards(&kept, model, features)?;
    let subsets: Vec<Option<String>> = kept.iter().map(|p| p.subset.clone()).collect();
    let mut report = EvalReport::from_rewards(&rewards, &subsets, &model_fingerprint(model)?);
    report.warnings = empty_subset_warnings(&report, only);
    Ok(report)
}

fn empty_subset_warnings(report: &EvalReport, only: Option<&[String]>) -> Vec<String> {
    let mut warnings = Vec::new();
    for name in only.unwrap_or(&[]) {
        if !report.subsets.contains_key(name) {
            let w = format!("subset {name:?} has no pairs and is excluded");
            log::warn!("{w}");
            warnings.push(w);
        }
    }
    warnings
}

#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub batch_sizes: Vec<usize>,
    pub lrs: Vec<f64>,
    pub schedulers: Vec<Scheduler>,
}

impl Default for Grid {
    fn default() -> Self {
        Grid {
            batch_sizes: vec![8, 16, 32],
            lrs: vec![1e-6, 5e-6, 1e-5, 5e-5],
            schedulers: Scheduler::ALL.to_vec(),
        }
    }
}

impl Grid {
    /// Cells in lexicographic (batch size, learning rate, scheduler) order.
    pub fn cells(&self) -> Vec<(usize, f64, Scheduler)> {
        let mut b = self.batch_sizes.clone();
        b.sort_unstable();
        b.dedup();
        let mut l = self.lrs.clone();
        l.sort_by(f64::total_cmp);
        l.dedup();
        let mut s = self.schedulers.clone();
        s.sort_unstable();
        s.dedup();
        let mut out = Vec::new();
        for &bs in &b {
            for &lr in &l {
                for &sc in &s {
                    out.push((bs, lr, sc));
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trial {
    pub batch_size: usize,
    pub lr0: f64,
    pub scheduler: Scheduler,
    pub best_val_loss: f64,
    pub best_step: usize,
}

#[derive(Clone, Debug)]
pub struct GridOutcome {
    pub best: TrainConfig,
    pub best_index: usize,
    pub trials: Vec<Trial>,
}

/// First trial with the smallest validation loss.
pub fn select_trial(trials: &[Trial]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, t) in trials.iter().enumerate() {
        if best.map_or(true, |b| t.best_val_loss < trials[b].best_val_loss) {
            best = Some(i);
        }
    }
    best
}

pub fn trials_csv(trials: &[Trial]) -> String {
    let mut out = String::from("batch_size,lr0,scheduler,best_val_loss,best_step\n");
    for t in trials {
        let _ = writeln!(out, "{},{:e},{},{:.10},{}", t.batch_size, t.lr0, t.scheduler, t.best_val_loss, t.best_step);
    }
    out
}

pub fn trials_text(trials: &[Trial], best: Option<usize>) -> String {
    let mut out = format!("{:>10}  {:>10}  {:<10}  {:>13}  {:>9}\n", "batch_size", "lr0", "scheduler", "best_val_loss", "best_step");
    for (i, t) in trials.iter().enumerate() {
        let _ = writeln!(
            out,
            "{:>10}  {:>10.1e}  {:<10}  {:>13.6}  {:>9}{}",
            t.batch_size,
            t.lr0,
            t.scheduler.to_string(),
            t.best_val_loss,
            t.best_step,
            if Some(i) == best { "  *" } else { "" }
        );
    }
    out
}

/// Trains every grid cell with the same data split and seed, using up to
/// `jobs` threads, and picks the cell with the lowest best validation loss.
pub fn grid_search(
    pairs: &[PreferencePair],
    features: &FeatureSource,
    base: &TrainConfig,
    grid: &Grid,
    jobs: usize,
) -> Result<GridOutcome> {
    let cells = grid.cells();
    if cells.is_empty() {
        return Err(Error::Config("grid has no cells".into()));
    }
    let (train_pairs, val_pairs) = split_dataset(pairs, base.val_frac, base.seed);
    let mut pipeline = Pipeline::fit(&train_pairs, base.template, base.fusion, base.combo, base.surrogate.clone())?;
    pipeline.fit_norm(&train_pairs, features)?;

    let run = |&(batch_size, lr0, scheduler): &(usize, f64, Scheduler)| -> Result<Trial> {
        let cfg = TrainConfig {
            batch_size,
            lr0,
            scheduler,
            ..base.clone()
        };
        let out = train_pipeline(pipeline.clone(), &train_pairs, &val_pairs, features, &cfg)?;
        Ok(Trial {
            batch_size,
            lr0,
            scheduler,
            best_val_loss: out.model.best_val_loss,
            best_step: out.model.best_step as usize,
        })
    };

    let jobs = jobs.clamp(1, cells.len());
    let mut results: Vec<Option<Result<Trial>>> = (0..cells.len()).map(|_| None).collect();
    if jobs == 1 {
        for (slot, cell) in results.iter_mut().zip(&cells) {
            *slot = Some(run(cell));
        }
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let done = std::sync::Mutex::new(&mut results);
        std::thread::scope(|s| {
            for _ in 0..jobs {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                    if i >= cells.len() {
                        break;
                    }
                    let r = run(&cells[i]);
                    done.lock().expect("no panics while holding the lock")[i] = Some(r);
                });
            }
        });
    }
    let trials: Vec<Trial> = results
        .into_iter()
        .map(|r| r.expect("every cell ran"))
        .collect::<Result<_>>()?;
    let best_index = select_trial(&trials).expect("non-empty");
    let t = &trials[best_index];
    Ok(GridOutcome {
        best: TrainConfig {
            batch_size: t.batch_size,
            lr0: t.lr0,
            scheduler: t.scheduler,
            ..base.clone()
        },
        best_index,
        trials,
    })
}
