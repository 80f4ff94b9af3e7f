//! Seeded synthetic preference data for controlled experiments.
//!
//! Two generators are provided. In the gaze-signal set the chosen and
//! rejected responses are drawn from one distribution and only the ingested
//! reading measures tell them apart. In the text-signal set the responses
//! differ in vocabulary and the measures are the plain surrogate.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{ChatTemplate, PreferencePair};
use crate::error::Result;
use crate::fusion::Fusion;
use crate::gazegen::{Channel, FeatureCombo, FeatureRecord, SurrogateConfig};
use crate::pipeline::{feature_id, Pipeline, Side};
use crate::tokenizers::word_segment;

fn random_word(rng: &mut ChaCha8Rng, letters: &[u8], len: std::ops::RangeInclusive<usize>) -> String {
    let n = rng.gen_range(len);
    (0..n).map(|_| *letters.choose(rng).expect("non-empty alphabet") as char).collect()
}

fn vocabulary(rng: &mut ChaCha8Rng, letters: &[u8], size: usize) -> Vec<String> {
    let mut words: Vec<String> = Vec::with_capacity(size);
    while words.len() < size {
        let w = random_word(rng, letters, 3..=8);
        if !words.contains(&w) {
            words.push(w);
        }
    }
    words
}

fn sentence(rng: &mut ChaCha8Rng, vocab: &[String], len: std::ops::RangeInclusive<usize>) -> Vec<String> {
    let n = rng.gen_range(len);
    (0..n).map(|_| vocab.choose(rng).expect("non-empty vocabulary").clone()).collect()
}

const ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz";

#[derive(Clone, Debug, PartialEq)]
pub struct GazeSignalConfig {
    pub pairs: usize,
    pub vocab_size: usize,
    /// Multiplier applied to every measure of the chosen response words.
    pub boost: f64,
    /// Half-width of the per-word multiplicative noise around 1.
    pub noise: f64,
    pub seed: u64,
}

impl Default for GazeSignalConfig {
    fn default() -> Self {
        GazeSignalConfig {
            pairs: 2000,
            vocab_size: 400,
            boost: 1.5,
            noise: 0.2,
            seed: 7,
        }
    }
}

/// Pairs whose two responses are identically distributed, plus feature
/// records in which the chosen response words read slower.
pub fn gaze_signal_dataset(cfg: &GazeSignalConfig) -> Result<(Vec<PreferencePair>, Vec<FeatureRecord>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let vocab = vocabulary(&mut rng, ALPHABET, cfg.vocab_size);
    let pairs: Vec<PreferencePair> = (0..cfg.pairs)
        .map(|i| {
            let prompt = sentence(&mut rng, &vocab, 3..=4).join(" ");
            let a = sentence(&mut rng, &vocab, 5..=6).join(" ");
            let b = sentence(&mut rng, &vocab, 5..=6).join(" ");
            PreferencePair::new(format!("g{i:05}"), prompt, a, b)
        })
        .collect();

    let pipeline = Pipeline::fit(
        &pairs,
        ChatTemplate::Headered,
        Fusion::Concat,
        FeatureCombo::Fcomb1,
        SurrogateConfig::default(),
    )?;
    let mut records = pipeline.surrogate_records(&pairs)?;
    for (k, rec) in records.iter_mut().enumerate() {
        let pair = &pairs[k / 2];
        let chosen = rec.id == feature_id(&pair.id, Side::Chosen);
        let response = if chosen { &pair.chosen } else { &pair.rejected };
        let n_words = rec.words.len();
        let first_response_word = n_words - word_segment(response).len();
        let factors: Vec<f64> = (0..n_words)
            .map(|w| {
                let jitter = 1.0 + rng.gen_range(-cfg.noise..=cfg.noise);
                if chosen && w >= first_response_word {
                    jitter * cfg.boost
                } else {
                    jitter
                }
            })
            .collect();
        for (name, values) in rec.features.iter_mut() {
            if name == Channel::NFix.name() || name == Channel::FixProp.name() {
                continue;
            }
            for (v, f) in values.iter_mut().zip(&factors) {
                *v *= f;
            }
        }
    }
    Ok((pairs, records))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextSignalConfig {
    pub pairs: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for TextSignalConfig {
    fn default() -> Self {
        TextSignalConfig {
            pairs: 800,
            vocab_size: 120,
            seed: 11,
        }
    }
}

/// Pairs in which the chosen response mixes shared words with words spelled
/// from the first half of the alphabet and the rejected one with words from
/// the second half.
pub fn text_signal_dataset(cfg: &TextSignalConfig) -> Vec<PreferencePair> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let shared = vocabulary(&mut rng, ALPHABET, cfg.vocab_size);
    let good = vocabulary(&mut rng, &ALPHABET[..13], cfg.vocab_size / 2);
    let bad = vocabulary(&mut rng, &ALPHABET[13..], cfg.vocab_size / 2);
    let response = |rng: &mut ChaCha8Rng, polar: &[String]| {
        let mut words = sentence(rng, &shared, 3..=4);
        words.extend(sentence(rng, polar, 2..=3));
        words.shuffle(rng);
        words.join(" ")
    };
    (0..cfg.pairs)
        .map(|i| {
            let prompt = sentence(&mut rng, &shared, 3..=4).join(" ");
            let chosen = response(&mut rng, &good);
            let rejected = response(&mut rng, &bad);
            PreferencePair::new(format!("t{i:05}"), prompt, chosen, rejected)
        })
        .collect()
}

/// Splits off the last `n_test` pairs.
pub fn holdout<T: Clone>(items: &[T], n_test: usize) -> (Vec<T>, Vec<T>) {
    let cut = items.len().saturating_sub(n_test);
    (items[..cut].to_vec(), items[cut..].to_vec())
}
