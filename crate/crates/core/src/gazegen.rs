//! Gaze feature generation.
//!
//! Features start at the word level, either from a closed-form surrogate of a
//! reading-time predictor or from an external JSON Lines file, and are then
//! spread onto gaze-tokenizer tokens with one of two schemes:
//!
//! * char-max: every character of a word carries the word value except the
//!   last, which carries a small epsilon; a token takes the max over its
//!   characters,
//! * first-token: the first token of a word carries the whole value.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::tokenizers::{TokenizedText, WordSpan};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Channel {
    #[serde(rename = "nFix")]
    NFix,
    #[serde(rename = "FFD")]
    Ffd,
    #[serde(rename = "GPT")]
    Gpt,
    #[serde(rename = "TRT")]
    Trt,
    #[serde(rename = "fixProp")]
    FixProp,
}

impl Channel {
    pub const ALL: [Channel; 5] = [
        Channel::NFix,
        Channel::Ffd,
        Channel::Gpt,
        Channel::Trt,
        Channel::FixProp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Channel::NFix => "nFix",
            Channel::Ffd => "FFD",
            Channel::Gpt => "GPT",
            Channel::Trt => "TRT",
            Channel::FixProp => "fixProp",
        }
    }

    pub fn from_name(name: &str) -> Option<Channel> {
        Channel::ALL.into_iter().find(|c| c.name() == name)
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    CharMax,
    FirstToken,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Word,
    Token,
}

/// The three channel/scheme combinations the pipeline supports.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FeatureCombo {
    #[serde(rename = "fcomb1")]
    Fcomb1,
    #[serde(rename = "fcomb2_5")]
    Fcomb2_5,
    #[serde(rename = "fcomb2_2")]
    Fcomb2_2,
}

impl FeatureCombo {
    pub fn channels(self) -> &'static [Channel] {
        match self {
            FeatureCombo::Fcomb1 => &[Channel::Trt],
            FeatureCombo::Fcomb2_5 => &[
                Channel::NFix,
                Channel::Ffd,
                Channel::Gpt,
                Channel::Trt,
                Channel::FixProp,
            ],
            FeatureCombo::Fcomb2_2 => &[Channel::Trt, Channel::Ffd],
        }
    }

    pub fn scheme(self) -> Scheme {
        match self {
            FeatureCombo::Fcomb1 => Scheme::CharMax,
            FeatureCombo::Fcomb2_5 | FeatureCombo::Fcomb2_2 => Scheme::FirstToken,
        }
    }

    pub fn width(self) -> usize {
        self.channels().len()
    }
}

impl fmt::Display for FeatureCombo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureCombo::Fcomb1 => "fcomb1",
            FeatureCombo::Fcomb2_5 => "fcomb2_5",
            FeatureCombo::Fcomb2_2 => "fcomb2_2",
        })
    }
}

impl FromStr for FeatureCombo {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fcomb1" => Ok(FeatureCombo::Fcomb1),
            "fcomb2_5" | "fcomb2.5" => Ok(FeatureCombo::Fcomb2_5),
            "fcomb2_2" | "fcomb2.2" => Ok(FeatureCombo::Fcomb2_2),
            other => Err(Error::Config(format!("unknown feature combo {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GazeFeatureMatrix {
    /// Rows are words or tokens; columns follow `channels`.
    pub values: Mat,
    pub channels: Vec<Channel>,
    pub scheme: Scheme,
    pub level: Level,
}

impl GazeFeatureMatrix {
    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    pub fn channel(&self, c: Channel) -> Option<Vec<f64>> {
        let k = self.channels.iter().position(|&x| x == c)?;
        Some(self.values.column(k))
    }

    /// Non-negativity, `FFD ≤ TRT`, `FFD ≤ GPT` and `fixProp ∈ [0, 1]`.
    pub fn validate(&self) -> Result<()> {
        check_channel_invariants(self.values.rows(), |c| self.channel(c))
    }
}

fn check_channel_invariants(
    rows: usize,
    get: impl Fn(Channel) -> Option<Vec<f64>>,
) -> Result<()> {
    for c in Channel::ALL {
        if let Some(v) = get(c) {
            if let Some(i) = v.iter().position(|x| !x.is_finite() || *x < 0.0) {
                return Err(Error::Feature(format!(
                    "{c} at index {i} is negative or non-finite ({})",
                    v[i]
                )));
            }
        }
    }
    let ffd = get(Channel::Ffd);
    for upper in [Channel::Trt, Channel::Gpt] {
        if let (Some(f), Some(u)) = (&ffd, get(upper)) {
            if let Some(i) = (0..rows).find(|&i| f[i] > u[i]) {
                return Err(Error::Feature(format!(
                    "FFD > {upper} at index {i} ({} > {})",
                    f[i], u[i]
                )));
            }
        }
    }
    if let Some(p) = get(Channel::FixProp) {
        if let Some(i) = p.iter().position(|x| *x > 1.0) {
            return Err(Error::Feature(format!("fixProp above 1 at index {i}")));
        }
    }
    Ok(())
}

/// Coefficients of the closed-form surrogate reader.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateCoefficients {
    pub ffd_base_ms: f64,
    pub ffd_per_char_ms: f64,
    pub chars_per_extra_fixation: usize,
    pub regression_penalty_ms: f64,
    pub regression_modulus: u32,
    pub fixprop_base: f64,
    pub fixprop_per_char: f64,
}

impl Default for SurrogateCoefficients {
    fn default() -> Self {
        SurrogateCoefficients {
            ffd_base_ms: 80.0,
            ffd_per_char_ms: 8.0,
            chars_per_extra_fixation: 6,
            regression_penalty_ms: 30.0,
            regression_modulus: 5,
            fixprop_base: 0.35,
            fixprop_per_char: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateConfig {
    pub coefficients: SurrogateCoefficients,
    /// Value given to the last character of each word under char-max (ms).
    pub epsilon_last_char: f64,
    pub window: usize,
    pub overlap: usize,
    /// Number of quantile bins for [`quantile_discretize`].
    pub k: usize,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        SurrogateConfig {
            coefficients: SurrogateCoefficients::default(),
            epsilon_last_char: 0.1,
            window: 512,
            overlap: 50,
            k: 10,
        }
    }
}

impl SurrogateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.overlap >= self.window {
            return Err(Error::Config(format!(
                "overlap ({}) must be smaller than window ({})",
                self.overlap, self.window
            )));
        }
        if self.k == 0 {
            return Err(Error::Config("K must be at least 1".into()));
        }
        if !(self.epsilon_last_char > 0.0) {
            return Err(Error::Config("epsilon_last_char must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WordFeatures {
    pub n_fix: f64,
    pub ffd: f64,
    pub trt: f64,
    pub gpt: f64,
    pub fix_prop: f64,
}

impl WordFeatures {
    pub fn get(&self, c: Channel) -> f64 {
        match c {
            Channel::NFix => self.n_fix,
            Channel::Ffd => self.ffd,
            Channel::Gpt => self.gpt,
            Channel::Trt => self.trt,
            Channel::FixProp => self.fix_prop,
        }
    }
}

/// Deterministic reading measures for one word, driven by its length and the
/// byte sum of its UTF-8 encoding.
pub fn surrogate_word_features(word: &str, coef: &SurrogateCoefficients) -> Result<WordFeatures> {
    if word.is_empty() {
        return Err(Error::Feature("surrogate needs a non-empty word".into()));
    }
    let len = word.chars().count();
    let n_fix = (1 + len / coef.chars_per_extra_fixation.max(1)) as f64;
    let ffd = coef.ffd_base_ms + coef.ffd_per_char_ms * len as f64;
    let trt = ffd * n_fix;
    let byte_sum: u64 = word.bytes().map(u64::from).sum();
    let regressed = byte_sum % u64::from(coef.regression_modulus.max(1)) == 0;
    let gpt = trt + if regressed { coef.regression_penalty_ms } else { 0.0 };
    let fix_prop = (coef.fixprop_base + coef.fixprop_per_char * len as f64).min(1.0);
    Ok(WordFeatures {
        n_fix,
        ffd,
        trt,
        gpt,
        fix_prop,
    })
}

/// Word-level surrogate matrix over `words`, columns in `channels` order.
pub fn surrogate_matrix(
    words: &[WordSpan],
    channels: &[Channel],
    coef: &SurrogateCoefficients,
    scheme: Scheme,
) -> Result<GazeFeatureMatrix> {
    let mut values = Mat::zeros(words.len(), channels.len());
    for (i, w) in words.iter().enumerate() {
        let f = surrogate_word_features(&w.text, coef)?;
        for (k, &c) in channels.iter().enumerate() {
            values.set(i, k, f.get(c));
        }
    }
    Ok(GazeFeatureMatrix {
        values,
        channels: channels.to_vec(),
        scheme,
        level: Level::Word,
    })
}

fn check_word_count(word_values: &[f64], tok: &TokenizedText) -> Result<()> {
    if word_values.len() != tok.words.len() {
        return Err(Error::Length {
            what: "word values vs words in tokenization",
            expected: tok.words.len(),
            actual: word_values.len(),
        });
    }
    Ok(())
}

/// Char-max distribution of word values onto tokens. Special tokens get 0.
pub fn words_to_tokens_charmax(
    word_values: &[f64],
    tok: &TokenizedText,
    epsilon: f64,
) -> Result<Vec<f64>> {
    check_word_count(word_values, tok)?;
    Ok((0..tok.len())
        .map(|t| match tok.word_ids[t] {
            None => 0.0,
            Some(w) => {
                let last_char = tok.words[w].end - 1;
                let (start, end) = tok.spans[t];
                (start..end)
                    .map(|c| if c == last_char { epsilon } else { word_values[w] })
                    .fold(f64::NEG_INFINITY, f64::max)
            }
        })
        .collect())
}

/// First-token distribution of word values onto tokens. Special tokens get 0.
pub fn words_to_tokens_firsttoken(word_values: &[f64], tok: &TokenizedText) -> Result<Vec<f64>> {
    check_word_count(word_values, tok)?;
    let mut out = vec![0.0; tok.len()];
    for (w, tokens) in tok.word_tokens().iter().enumerate() {
        if let Some(&first) = tokens.first() {
            out[first] = word_values[w];
        }
    }
    Ok(out)
}

/// Applies the word→token scheme to every channel of a word-level matrix.
pub fn distribute_to_tokens(
    words: &GazeFeatureMatrix,
    tok: &TokenizedText,
    scheme: Scheme,
    epsilon: f64,
) -> Result<GazeFeatureMatrix> {
    let mut values = Mat::zeros(tok.len(), words.channels.len());
    for k in 0..words.channels.len() {
        let column = words.values.column(k);
        let spread = match scheme {
            Scheme::CharMax => words_to_tokens_charmax(&column, tok, epsilon)?,
            Scheme::FirstToken => words_to_tokens_firsttoken(&column, tok)?,
        };
        for (t, v) in spread.into_iter().enumerate() {
            values.set(t, k, v);
        }
    }
    Ok(GazeFeatureMatrix {
        values,
        channels: words.channels.clone(),
        scheme,
        level: Level::Token,
    })
}

/// Position ranges of the windows covering `len` tokens and the blend weight
/// of each position inside its window.
///
/// Windows start every `window - overlap` positions; the last one is clipped
/// at `len`. Where two windows overlap, the earlier window's weight ramps
/// down linearly while the later one's ramps up, and the weights at every
/// position are normalised to sum to one.
pub fn window_weights(len: usize, window: usize, overlap: usize) -> Vec<(Range<usize>, Vec<f64>)> {
    assert!(overlap < window, "overlap must be smaller than window");
    if len == 0 {
        return Vec::new();
    }
    let stride = window - overlap;
    let mut ranges = Vec::new();
    let mut start = 0;
    loop {
        let end = (start + window).min(len);
        ranges.push(start..end);
        if end == len {
            break;
        }
        start += stride;
    }

    let ramp = |j: usize, m: usize| (j + 1) as f64 / (m + 1) as f64;
    let mut raw: Vec<Vec<f64>> = ranges
        .iter()
        .enumerate()
        .map(|(k, r)| {
            r.clone()
                .map(|p| {
                    let mut w = 1.0;
                    if k > 0 {
                        let prev_end = ranges[k - 1].end;
                        if p < prev_end {
                            w *= ramp(p - r.start, prev_end - r.start);
                        }
                    }
                    if let Some(next) = ranges.get(k + 1) {
                        if p >= next.start {
                            let m = r.end - next.start;
                            w *= 1.0 - ramp(p - next.start, m);
                        }
                    }
                    w
                })
                .collect()
        })
        .collect();

    let mut total = vec![0.0; len];
    for (r, w) in ranges.iter().zip(&raw) {
        for (p, x) in r.clone().zip(w) {
            total[p] += x;
        }
    }
    for (r, w) in ranges.iter().zip(raw.iter_mut()) {
        for (p, x) in r.clone().zip(w.iter_mut()) {
            *x /= total[p];
        }
    }
    ranges.into_iter().zip(raw).collect()
}

/// Runs `predictor` over overlapping windows and blends the results.
///
/// `predictor` receives a position range and must return one row per
/// position. Inputs no longer than `window` are passed through unchanged.
pub fn sliding_window_predict<F>(len: usize, window: usize, overlap: usize, mut predictor: F) -> Result<Mat>
where
    F: FnMut(Range<usize>) -> Result<Mat>,
{
    if overlap >= window {
        return Err(Error::Config(format!(
            "overlap ({overlap}) must be smaller than window ({window})"
        )));
    }
    if len <= window {
        return predictor(0..len);
    }
    let mut out: Option<Mat> = None;
    for (range, weights) in window_weights(len, window, overlap) {
        let part = predictor(range.clone())?;
        if part.rows() != range.len() {
            return Err(Error::Length {
                what: "predictor rows per window",
                expected: range.len(),
                actual: part.rows(),
            });
        }
        let acc = out.get_or_insert_with(|| Mat::zeros(len, part.cols()));
        for (i, (p, w)) in range.zip(weights).enumerate() {
            for (a, x) in acc.row_mut(p).iter_mut().zip(part.row(i)) {
                *a += w * x;
            }
        }
    }
    Ok(out.unwrap_or_else(|| Mat::zeros(0, 0)))
}

/// Mean-normalises `values` and assigns each to one of `k` near-equal
/// quantile bins, numbered from 1. Equal values share the bin of their first
/// occurrence in sorted order.
pub fn quantile_discretize(values: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    if values.is_empty() {
        return Err(Error::Feature("cannot discretize an empty sequence".into()));
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    if !(mean > 0.0) || !mean.is_finite() {
        return Err(Error::Feature(format!(
            "mean must be positive for normalisation (got {mean})"
        )));
    }
    let normalised: Vec<f64> = values.iter().map(|v| v / mean).collect();
    let n = normalised.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| normalised[a].total_cmp(&normalised[b]));
    let mut bins = vec![0; n];
    let mut rank_start = 0;
    for (rank, &i) in order.iter().enumerate() {
        if rank > 0 && normalised[i] != normalised[order[rank - 1]] {
            rank_start = rank;
        }
        bins[i] = rank_start * k / n + 1;
    }
    Ok(bins)
}

/// One line of a gaze features file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureRecord {
    pub id: String,
    pub words: Vec<String>,
    pub features: BTreeMap<String, Vec<f64>>,
}

impl FeatureRecord {
    pub fn from_matrix(id: impl Into<String>, words: &[String], m: &GazeFeatureMatrix) -> Self {
        FeatureRecord {
            id: id.into(),
            words: words.to_vec(),
            features: m
                .channels
                .iter()
                .enumerate()
                .map(|(k, c)| (c.name().to_string(), m.values.column(k)))
                .collect(),
        }
    }

    /// Validates the record against the expected word list and returns the
    /// word-level matrix. With a combo, columns follow the combo's channels
    /// (all of which must be present); otherwise all present channels in
    /// canonical order.
    pub fn to_matrix(
        &self,
        expected_words: &[String],
        combo: Option<FeatureCombo>,
    ) -> Result<GazeFeatureMatrix> {
        if let Some(i) = (0..expected_words.len().max(self.words.len()))
            .find(|&i| expected_words.get(i) != self.words.get(i))
        {
            return Err(Error::WordMismatch {
                index: i,
                expected: expected_words.get(i).cloned().unwrap_or_default(),
                found: self.words.get(i).cloned().unwrap_or_default(),
            });
        }
        if self.features.is_empty() {
            return Err(Error::Feature(format!("record {:?} has no channels", self.id)));
        }
        let mut present = BTreeMap::new();
        for (name, values) in &self.features {
            let c = Channel::from_name(name)
                .ok_or_else(|| Error::Feature(format!("unknown channel {name:?}")))?;
            if values.len() != self.words.len() {
                return Err(Error::Length {
                    what: "channel values vs words",
                    expected: self.words.len(),
                    actual: values.len(),
                });
            }
            present.insert(c, values);
        }
        check_channel_invariants(self.words.len(), |c| present.get(&c).map(|v| v.to_vec()))?;

        let channels: Vec<Channel> = match combo {
            Some(combo) => {
                for c in combo.channels() {
                    if !present.contains_key(c) {
                        return Err(Error::Feature(format!(
                            "record {:?} lacks channel {c} required by {combo}",
                            self.id
                        )));
                    }
                }
                combo.channels().to_vec()
            }
            None => present.keys().copied().collect(),
        };
        let mut values = Mat::zeros(self.words.len(), channels.len());
        for (k, c) in channels.iter().enumerate() {
            for (i, v) in present[c].iter().enumerate() {
                values.set(i, k, *v);
            }
        }
        Ok(GazeFeatureMatrix {
            values,
            channels,
            scheme: combo.map_or(Scheme::FirstToken, FeatureCombo::scheme),
            level: Level::Word,
        })
    }
}

pub fn load_features_jsonl(path: impl AsRef<Path>) -> Result<Vec<FeatureRecord>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: FeatureRecord =
            serde_json::from_str(&line).map_err(|e| Error::record(i + 1, e.to_string()))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_features_jsonl(path: impl AsRef<Path>, records: &[FeatureRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).expect("record serializes");
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizers::{word_segment, ChunkTokenizer};
    use proptest::prelude::*;

    fn tok(text: &str, chunk: usize) -> TokenizedText {
        ChunkTokenizer::fit([text], chunk)
            .unwrap()
            .tokenize(text, true, &[])
            .unwrap()
    }

    #[test]
    fn surrogate_values() {
        let c = SurrogateCoefficients::default();
        let f = surrogate_word_features("the", &c).unwrap();
        assert_eq!((f.n_fix, f.ffd, f.trt, f.gpt), (1.0, 104.0, 104.0, 104.0));
        assert!((f.fix_prop - 0.5).abs() < 1e-12);

        let f = surrogate_word_features("astrophotography", &c).unwrap();
        assert_eq!((f.n_fix, f.ffd, f.trt, f.fix_prop), (3.0, 208.0, 624.0, 1.0));
        // byte sum 1758, no regression bonus
        assert_eq!(f.gpt, 624.0);
        // "is": 105 + 115 = 220
        assert_eq!(surrogate_word_features("is", &c).unwrap().gpt, 96.0 + 30.0);

        assert!(surrogate_word_features("", &c).is_err());
    }

    #[test]
    fn charmax_examples() {
        let mut t = tok("cat", 2);
        assert_eq!(words_to_tokens_charmax(&[10.0], &t, 0.1).unwrap(), vec![10.0, 0.1]);
        t = tok("cat", 4);
        assert_eq!(words_to_tokens_charmax(&[10.0], &t, 0.1).unwrap(), vec![10.0]);
        t = tok(".", 4);
        assert_eq!(words_to_tokens_charmax(&[7.0], &t, 0.1).unwrap(), vec![0.1]);
        assert!(words_to_tokens_charmax(&[1.0, 2.0], &t, 0.1).is_err());
    }

    #[test]
    fn firsttoken_examples() {
        let t = tok("astrophotography", 6);
        assert_eq!(t.len(), 3);
        assert_eq!(
            words_to_tokens_firsttoken(&[24.53], &t).unwrap(),
            vec![24.53, 0.0, 0.0]
        );
        assert_eq!(words_to_tokens_firsttoken(&[5.0], &tok("a", 4)).unwrap(), vec![5.0]);
        assert_eq!(
            words_to_tokens_firsttoken(&[0.0], &t).unwrap(),
            vec![0.0, 0.0, 0.0]
        );
    }

    /// Blend of per-window predictions computed position by position from the
    /// window layout, without the weight tables.
    fn blend_oracle(len: usize, window: usize, overlap: usize, f: impl Fn(usize, usize) -> f64) -> Vec<f64> {
        let stride = window - overlap;
        let mut starts = vec![0];
        while starts.last().unwrap() + window < len {
            starts.push(starts.last().unwrap() + stride);
        }
        (0..len)
            .map(|p| {
                let covering: Vec<usize> = (0..starts.len())
                    .filter(|&k| p >= starts[k] && p < (starts[k] + window).min(len))
                    .collect();
                match covering.as_slice() {
                    [k] => f(*k, p),
                    [a, b] => {
                        let m = (starts[*a] + window) - starts[*b];
                        let up = (p - starts[*b] + 1) as f64 / (m + 1) as f64;
                        (1.0 - up) * f(*a, p) + up * f(*b, p)
                    }
                    _ => panic!("oracle handles at most two windows"),
                }
            })
            .collect()
    }

    #[test]
    fn sliding_window_matches_oracle() {
        // Window-dependent predictor so blending is observable.
        let pred = |k: usize, p: usize| (p as f64).sin() + k as f64 * 0.5;
        let (len, window, overlap) = (900, 512, 50);
        let starts: Vec<usize> = window_weights(len, window, overlap)
            .iter()
            .map(|(r, _)| r.start)
            .collect();
        assert_eq!(starts, vec![0, 462]);
        let out = sliding_window_predict(len, window, overlap, |r| {
            let k = starts.iter().position(|&s| s == r.start).unwrap();
            Ok(Mat::from_vec(r.len(), 1, r.map(|p| pred(k, p)).collect()))
        })
        .unwrap();
        let expected = blend_oracle(len, window, overlap, pred);
        for p in 0..len {
            assert!((out.get(p, 0) - expected[p]).abs() < 1e-12, "position {p}");
        }
    }

    #[test]
    fn short_input_is_passed_through() {
        let out = sliding_window_predict(7, 512, 50, |r| {
            Ok(Mat::from_vec(r.len(), 1, r.map(|p| p as f64 * 1.1).collect()))
        })
        .unwrap();
        assert_eq!(out.column(0), (0..7).map(|p| p as f64 * 1.1).collect::<Vec<_>>());
    }

    #[test]
    fn overlap_must_be_below_window() {
        assert!(sliding_window_predict(10, 5, 5, |r| Ok(Mat::zeros(r.len(), 1))).is_err());
    }

    #[test]
    fn quantile_examples() {
        let v: Vec<f64> = (1..=8).map(f64::from).collect();
        assert_eq!(quantile_discretize(&v, 4).unwrap(), vec![1, 1, 2, 2, 3, 3, 4, 4]);
        assert_eq!(quantile_discretize(&[3.0; 5], 4).unwrap(), vec![1; 5]);
        assert_eq!(quantile_discretize(&v, 1).unwrap(), vec![1; 8]);
        assert!(quantile_discretize(&[0.0, 0.0], 3).is_err());
    }

    #[test]
    fn feature_record_ingest() {
        let words = vec!["a".to_string(), "b".to_string()];
        let rec = FeatureRecord {
            id: "x".into(),
            words: words.clone(),
            features: [("TRT".to_string(), vec![11.2, 9.1])].into_iter().collect(),
        };
        let m = rec.to_matrix(&words, Some(FeatureCombo::Fcomb1)).unwrap();
        assert_eq!(m.values.shape(), (2, 1));
        assert_eq!(m.values.column(0), vec![11.2, 9.1]);

        let other = vec!["a".to_string(), "c".to_string()];
        assert!(matches!(
            rec.to_matrix(&other, None),
            Err(Error::WordMismatch { index: 1, .. })
        ));
        assert!(rec.to_matrix(&words, Some(FeatureCombo::Fcomb2_2)).is_err());

        let empty = FeatureRecord {
            features: BTreeMap::new(),
            ..rec.clone()
        };
        assert!(empty.to_matrix(&words, None).is_err());
    }

    #[test]
    fn ffd_above_trt_names_index() {
        let words: Vec<String> = ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect();
        let rec = FeatureRecord {
            id: "x".into(),
            words: words.clone(),
            features: [
                ("TRT".to_string(), vec![5.0, 5.0, 5.0, 5.0]),
                ("FFD".to_string(), vec![1.0, 1.0, 1.0, 9.0]),
            ]
            .into_iter()
            .collect(),
        };
        let err = rec.to_matrix(&words, None).unwrap_err().to_string();
        assert!(err.contains("index 3"), "{err}");
    }

    #[test]
    fn features_file_round_trip() {
        let words = word_segment("the astrophotography club");
        let m = surrogate_matrix(&words, &Channel::ALL, &SurrogateCoefficients::default(), Scheme::FirstToken).unwrap();
        let names: Vec<String> = words.iter().map(|w| w.text.clone()).collect();
        let recs = vec![FeatureRecord::from_matrix("t", &names, &m)];
        let f = tempfile::NamedTempFile::new().unwrap();
        write_features_jsonl(f.path(), &recs).unwrap();
        let back = load_features_jsonl(f.path()).unwrap();
        assert_eq!(back, recs);
        let m2 = back[0].to_matrix(&names, Some(FeatureCombo::Fcomb2_5)).unwrap();
        assert_eq!(m2.channel(Channel::Trt), m.channel(Channel::Trt));
    }

    proptest! {
        #[test]
        fn surrogate_respects_reading_orderings(word in "\\PC{1,30}") {
            let f = surrogate_word_features(&word, &SurrogateCoefficients::default()).unwrap();
            prop_assert!(f.ffd <= f.trt && f.trt <= f.gpt);
            prop_assert!(f.n_fix >= 1.0);
            prop_assert!((0.0..=1.0).contains(&f.fix_prop));
        }

        #[test]
        fn charmax_values_are_word_value_or_epsilon(
            text in "[a-z.,]{1,12}( [a-z.,]{1,12}){0,5}",
            chunk in 1usize..5,
            seed in 0u64..1000,
        ) {
            let t = tok(&text, chunk);
            let values: Vec<f64> = (0..t.words.len()).map(|i| 1.0 + ((seed + i as u64) % 97) as f64).collect();
            let eps = 0.1;
            let out = words_to_tokens_charmax(&values, &t, eps).unwrap();
            for (w, toks) in t.word_tokens().iter().enumerate() {
                for &k in toks {
                    prop_assert!(out[k] == values[w] || out[k] == eps);
                }
                if t.words[w].text.chars().count() == 1 {
                    prop_assert_eq!(out[toks[0]], eps);
                }
            }
        }

        #[test]
        fn firsttoken_conserves_word_values(
            text in "[a-z]{1,12}( [a-z]{1,12}){0,5}",
            chunk in 1usize..5,
        ) {
            let t = tok(&text, chunk);
            let values: Vec<f64> = (0..t.words.len()).map(|i| 0.37 * (i as f64 + 1.0)).collect();
            let out = words_to_tokens_firsttoken(&values, &t).unwrap();
            for (w, toks) in t.word_tokens().iter().enumerate() {
                prop_assert_eq!(toks.iter().map(|&k| out[k]).sum::<f64>(), values[w]);
                for &k in &toks[1..] {
                    prop_assert_eq!(out[k], 0.0);
                }
            }
        }

        #[test]
        fn window_weights_partition_unity(len in 1usize..400, window in 2usize..80, frac in 0.0f64..1.0) {
            let overlap = ((window - 1) as f64 * frac) as usize;
            let mut total = vec![0.0; len];
            for (r, w) in window_weights(len, window, overlap) {
                for (p, x) in r.zip(w) {
                    prop_assert!(x > 0.0);
                    total[p] += x;
                }
            }
            for t in total {
                prop_assert!((t - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn constant_predictor_gives_constant_output(len in 1usize..300, window in 2usize..60, frac in 0.0f64..0.5) {
            let overlap = ((window - 1) as f64 * frac) as usize;
            let out = sliding_window_predict(len, window, overlap, |r| Ok(Mat::filled(r.len(), 2, 3.25))).unwrap();
            for x in out.as_slice() {
                prop_assert!((x - 3.25).abs() < 1e-12);
            }
            let again = sliding_window_predict(len, window, overlap, |r| Ok(Mat::filled(r.len(), 2, 3.25))).unwrap();
            prop_assert_eq!(out, again);
        }

        #[test]
        fn quantile_matches_counting_oracle(values in proptest::collection::vec(0.0f64..100.0, 1..40), k in 1usize..12) {
            prop_assume!(values.iter().sum::<f64>() > 0.0);
            let bins = quantile_discretize(&values, k).unwrap();
            let n = values.len();
            for (i, v) in values.iter().enumerate() {
                let below = values.iter().filter(|x| *x < v).count();
                prop_assert_eq!(bins[i], below * k / n + 1);
                prop_assert!((1..=k).contains(&bins[i]));
            }
            for i in 0..n {
                for j in 0..n {
                    if values[i] <= values[j] {
                        prop_assert!(bins[i] <= bins[j]);
                    }
                }
            }
        }
    }
}
