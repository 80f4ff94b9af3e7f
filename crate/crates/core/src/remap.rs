//! Carrying token-level gaze features between tokenizers.
//!
//! Features produced in the gaze tokenizer's token space are folded back to
//! words and spread over the reward tokenizer's tokens of the same word:
//!
//! * scheme 1 (char-max features): the word's token values are summed and the
//!   sum is split equally over the target tokens,
//! * scheme 2 (first-token features): the first source token carries the word
//!   value, which is placed on the first target token.
//!
//! Target special tokens (chat markers) get zero in every channel.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::gazegen::{GazeFeatureMatrix, Level, Scheme};
use crate::linalg::Mat;
use crate::tokenizers::TokenizedText;

/// Words on both sides that cover the same characters, with their tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AlignedGroup {
    pub source_words: Vec<usize>,
    pub target_words: Vec<usize>,
    pub source_tokens: Vec<usize>,
    pub target_tokens: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AlignmentMap {
    pub groups: Vec<AlignedGroup>,
    pub source_len: usize,
    pub target_len: usize,
    pub specials_source: Vec<usize>,
    pub specials_target: Vec<usize>,
}

impl AlignmentMap {
    /// Every non-special token on each side sits in exactly one group, and
    /// index lists are strictly increasing.
    pub fn validate(&self) -> Result<()> {
        let check = |len: usize, specials: &[usize], lists: Vec<&Vec<usize>>| -> Result<()> {
            let mut seen = vec![0u32; len];
            for &s in specials {
                seen[s] += 1;
            }
            for list in lists {
                if list.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::Shape("token indices not increasing".into()));
                }
                for &t in list {
                    if t >= len {
                        return Err(Error::Shape(format!("token index {t} out of range")));
                    }
                    seen[t] += 1;
                }
            }
            match seen.iter().position(|&c| c != 1) {
                Some(t) => Err(Error::UncoveredToken(t)),
                None => Ok(()),
            }
        };
        check(
            self.source_len,
            &self.specials_source,
            self.groups.iter().map(|g| &g.source_tokens).collect(),
        )?;
        check(
            self.target_len,
            &self.specials_target,
            self.groups.iter().map(|g| &g.target_tokens).collect(),
        )
    }
}

/// A word whose non-first tokens carried values under scheme 2.
#[derive(Clone, Debug, PartialEq)]
pub struct NonZeroTail {
    pub word: usize,
    pub dropped: f64,
}

fn check_cover(len: usize, word_tokens: &[Vec<usize>]) -> Result<()> {
    let mut covered = vec![false; len];
    for toks in word_tokens {
        for &t in toks {
            if t >= len {
                return Err(Error::Length {
                    what: "token index vs token values",
                    expected: len,
                    actual: t + 1,
                });
            }
            covered[t] = true;
        }
    }
    match covered.iter().position(|c| !c) {
        Some(t) => Err(Error::UncoveredToken(t)),
        None => Ok(()),
    }
}

/// Word value = sum of its token values.
pub fn tokens_to_words_scheme1(token_values: &[f64], word_tokens: &[Vec<usize>]) -> Result<Vec<f64>> {
    check_cover(token_values.len(), word_tokens)?;
    Ok(word_tokens
        .iter()
        .map(|toks| toks.iter().map(|&t| token_values[t]).sum())
        .collect())
}

/// Word value = value of its first token. Words whose later tokens are
/// non-zero are reported (and logged); their tail values are ignored.
pub fn tokens_to_words_scheme2(
    token_values: &[f64],
    word_tokens: &[Vec<usize>],
) -> Result<(Vec<f64>, Vec<NonZeroTail>)> {
    check_cover(token_values.len(), word_tokens)?;
    let mut warnings = Vec::new();
    let values = word_tokens
        .iter()
        .enumerate()
        .map(|(w, toks)| {
            let tail: f64 = toks.iter().skip(1).map(|&t| token_values[t].abs()).sum();
            if tail != 0.0 {
                log::warn!("word {w}: ignoring non-zero values after its first token");
                warnings.push(NonZeroTail { word: w, dropped: tail });
            }
            toks.first().map_or(0.0, |&t| token_values[t])
        })
        .collect();
    Ok((values, warnings))
}

fn same_tokens(g: &AlignedGroup, source: &TokenizedText, target: &TokenizedText) -> bool {
    g.source_tokens.len() == g.target_tokens.len()
        && g.source_tokens
            .iter()
            .zip(&g.target_tokens)
            .all(|(&s, &t)| source.spans[s] == target.spans[t] && source.tokens[s] == target.tokens[t])
}

/// Maps a token-level matrix from the source side of `align` to its target
/// side. Channels are remapped independently. Groups whose tokens are
/// identical on both sides are copied token by token.
pub fn remap_features(
    src: &GazeFeatureMatrix,
    align: &AlignmentMap,
    scheme: Scheme,
    source: &TokenizedText,
    target: &TokenizedText,
) -> Result<GazeFeatureMatrix> {
    if src.rows() != align.source_len {
        return Err(Error::Length {
            what: "source feature rows vs alignment",
            expected: align.source_len,
            actual: src.rows(),
        });
    }
    let cols = src.values.cols();
    let mut out = Mat::zeros(align.target_len, cols);
    for g in &align.groups {
        if same_tokens(g, source, target) {
            for (&s, &t) in g.source_tokens.iter().zip(&g.target_tokens) {
                out.row_mut(t).copy_from_slice(src.values.row(s));
            }
            continue;
        }
        let m = g.target_tokens.len() as f64;
        for c in 0..cols {
            match scheme {
                Scheme::CharMax => {
                    let total: f64 = g.source_tokens.iter().map(|&t| src.values.get(t, c)).sum();
                    let share = total / m;
                    for &t in &g.target_tokens {
                        out.set(t, c, share);
                    }
                }
                Scheme::FirstToken => {
                    // First token of each source word in the group.
                    let mut total = 0.0;
                    for (k, &t) in g.source_tokens.iter().enumerate() {
                        let is_first = k == 0
                            || source.word_ids[t] != source.word_ids[g.source_tokens[k - 1]];
                        let v = src.values.get(t, c);
                        if is_first {
                            total += v;
                        } else if v != 0.0 {
                            log::warn!("token {t}: ignoring non-zero value after a word's first token");
                        }
                    }
                    if let Some(&first) = g.target_tokens.first() {
                        out.set(first, c, total);
                    }
                }
            }
        }
    }
    for &t in &align.specials_target {
        out.row_mut(t).fill(0.0);
    }
    Ok(GazeFeatureMatrix {
        values: out,
        channels: src.channels.clone(),
        scheme,
        level: Level::Token,
    })
}

/// Fixed-width per-word report of a remapping: words, token strings, token
/// indices and one channel's values before and after.
pub fn remap_report(
    source: &TokenizedText,
    target: &TokenizedText,
    align: &AlignmentMap,
    before: &[f64],
    after: &[f64],
) -> String {
    let fmt_vals = |idx: &[usize], vals: &[f64]| {
        let parts: Vec<String> = idx.iter().map(|&i| format!("{:.2}", vals[i])).collect();
        format!("[{}]", parts.join(", "))
    };
    let fmt_toks = |idx: &[usize], tok: &TokenizedText| {
        let parts: Vec<String> = idx.iter().map(|&i| format!("'{}'", tok.tokens[i])).collect();
        format!("[{}]", parts.join(", "))
    };
    let fmt_idx = |idx: &[usize]| {
        let parts: Vec<String> = idx.iter().map(usize::to_string).collect();
        format!("[{}]", parts.join(", "))
    };
    let mut out = String::new();
    for g in &align.groups {
        let words = |ws: &[usize], tok: &TokenizedText| {
            ws.iter()
                .map(|&w| tok.words[w].text.as_str())
                .collect::<Vec<_>>()
                .join(" ")
        };
        let rows = [
            ("Words", words(&g.source_words, source), words(&g.target_words, target)),
            (
                "Tokens str",
                fmt_toks(&g.source_tokens, source),
                fmt_toks(&g.target_tokens, target),
            ),
            ("Tokens idx", fmt_idx(&g.source_tokens), fmt_idx(&g.target_tokens)),
            (
                "Values",
                fmt_vals(&g.source_tokens, before),
                fmt_vals(&g.target_tokens, after),
            ),
        ];
        let w1 = rows.iter().map(|r| r.1.chars().count()).max().unwrap_or(0).max(11);
        let _ = writeln!(out, "{:<10} | {:<w1$} | Tokenizer 2", "", "Tokenizer 1");
        for (label, a, b) in rows {
            let _ = writeln!(out, "{label:<10} | {a:<w1$} | {b}");
        }
        out.push('\n');
    }
    out
}

/// The same content as [`remap_report`], one row per token, with values at
/// full precision.
pub fn remap_report_csv(
    source: &TokenizedText,
    target: &TokenizedText,
    align: &AlignmentMap,
    before: &[f64],
    after: &[f64],
) -> String {
    let quote = |s: &str| format!("\"{}\"", s.replace('"', "\"\""));
    let mut out = String::from("group,side,word,token_index,token,value\n");
    for (gi, g) in align.groups.iter().enumerate() {
        let sides = [
            ("source", source, &g.source_tokens, before),
            ("target", target, &g.target_tokens, after),
        ];
        for (side, tok, idx, vals) in sides {
            for &t in idx.iter() {
                let word = tok.word_ids[t].map(|w| tok.words[w].text.as_str()).unwrap_or("");
                let _ = writeln!(out, "{gi},{side},{},{t},{},{}", quote(word), quote(&tok.tokens[t]), vals[t]);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gazegen::Channel;
    use crate::tokenizers::{align_words, ChunkTokenizer};
    use proptest::prelude::*;

    fn single_word_map(src: usize, tgt: usize, specials: Vec<usize>) -> AlignmentMap {
        let offset = specials.len();
        AlignmentMap {
            groups: vec![AlignedGroup {
                source_words: vec![0],
                target_words: vec![0],
                source_tokens: (0..src).collect(),
                target_tokens: (offset..offset + tgt).collect(),
            }],
            source_len: src,
            target_len: tgt + offset,
            specials_source: vec![],
            specials_target: specials,
        }
    }

    fn column(values: &[f64]) -> GazeFeatureMatrix {
        GazeFeatureMatrix {
            values: Mat::from_vec(values.len(), 1, values.to_vec()),
            channels: vec![Channel::Trt],
            scheme: Scheme::CharMax,
            level: Level::Token,
        }
    }

    fn one_word_source(n: usize) -> TokenizedText {
        let text = "x".repeat(n);
        ChunkTokenizer::fit([text.as_str()], 1)
            .unwrap()
            .tokenize(&text, true, &[])
            .unwrap()
    }

    #[test]
    fn scheme1_word_sums() {
        let w = tokens_to_words_scheme1(&[11.23, 11.49, 10.16], &[vec![0, 1, 2]]).unwrap();
        assert!((w[0] - 32.88).abs() < 1e-12);
        assert_eq!(tokens_to_words_scheme1(&[4.5], &[vec![0]]).unwrap(), vec![4.5]);
        assert!(matches!(
            tokens_to_words_scheme1(&[1.0, 2.0], &[vec![0]]),
            Err(Error::UncoveredToken(1))
        ));
    }

    #[test]
    fn scheme2_first_token_wins() {
        let (w, warn) = tokens_to_words_scheme2(&[24.53, 0.0, 0.0], &[vec![0, 1, 2]]).unwrap();
        assert_eq!(w, vec![24.53]);
        assert!(warn.is_empty());
        let (w, warn) = tokens_to_words_scheme2(&[5.0, 7.0], &[vec![0, 1]]).unwrap();
        assert_eq!(w, vec![5.0]);
        assert_eq!(warn, vec![NonZeroTail { word: 0, dropped: 7.0 }]);
    }

    #[test]
    fn scheme1_spreads_equally() {
        let map = single_word_map(3, 5, vec![]);
        let out = remap_features(&column(&[11.23, 11.49, 10.16]), &map, Scheme::CharMax, &one_word_source(3), &one_word_source(5)).unwrap();
        for t in 0..5 {
            assert!((out.values.get(t, 0) - 6.576).abs() < 1e-9);
        }
        let map = single_word_map(2, 3, vec![]);
        let out = remap_features(&column(&[1.0, 2.0]), &map, Scheme::CharMax, &one_word_source(2), &one_word_source(3)).unwrap();
        assert_eq!(out.values.column(0), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn scheme2_places_on_first_target() {
        let map = single_word_map(3, 5, vec![]);
        let out = remap_features(&column(&[24.53, 0.0, 0.0]), &map, Scheme::FirstToken, &one_word_source(3), &one_word_source(5)).unwrap();
        assert_eq!(out.values.column(0), vec![24.53, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn special_rows_are_zero() {
        let map = single_word_map(2, 2, vec![0]);
        let out = remap_features(&column(&[3.0, 4.0]), &map, Scheme::CharMax, &one_word_source(2), &one_word_source(3)).unwrap();
        assert_eq!(out.values.column(0), vec![0.0, 3.5, 3.5]);
    }

    #[test]
    fn row_count_mismatch_is_an_error() {
        let map = single_word_map(3, 2, vec![]);
        assert!(remap_features(&column(&[1.0]), &map, Scheme::CharMax, &one_word_source(1), &one_word_source(2)).is_err());
    }

    #[test]
    fn report_lists_tokens_and_values() {
        let text = "astrophotography";
        let a = ChunkTokenizer::fit([text], 6).unwrap().tokenize(text, true, &[]).unwrap();
        let b = ChunkTokenizer::fit([text], 4).unwrap().tokenize(text, true, &[]).unwrap();
        let map = align_words(&a, &b).unwrap();
        let src = column(&[11.23, 11.49, 10.16]);
        let out = remap_features(&src, &map, Scheme::CharMax, &a, &b).unwrap();
        let report = remap_report(&a, &b, &map, &src.values.column(0), &out.values.column(0));
        assert!(report.contains("['astrop', 'hotogr', 'aphy']"), "{report}");
        assert!(report.contains("[8.22, 8.22, 8.22, 8.22]"), "{report}");
    }

    fn tokenize(text: &str, chunk: usize) -> TokenizedText {
        ChunkTokenizer::fit([text], chunk)
            .unwrap()
            .tokenize(text, true, &[])
            .unwrap()
    }

    proptest! {
        #[test]
        fn identity_when_tokenizations_coincide(
            text in "[a-z]{1,10}( [a-z]{1,10}){0,5}",
            chunk in 1usize..5,
            scale in 0.1f64..50.0,
        ) {
            let t = tokenize(&text, chunk);
            let map = align_words(&t, &t).unwrap();
            let vals: Vec<f64> = (0..t.len()).map(|i| scale * (i as f64 + 0.5)).collect();
            let out = remap_features(&column(&vals), &map, Scheme::CharMax, &t, &t).unwrap();
            prop_assert_eq!(out.values.column(0), vals);
        }

        #[test]
        fn scheme1_round_trip_preserves_word_sums(
            text in "[a-z]{1,14}( [a-z]{1,14}){0,6}",
            ca in 1usize..6,
            cb in 1usize..6,
            seed in 0u64..10_000,
        ) {
            let a = tokenize(&text, ca);
            let b = tokenize(&text, cb);
            let ab = align_words(&a, &b).unwrap();
            let ba = align_words(&b, &a).unwrap();
            let vals: Vec<f64> = (0..a.len()).map(|i| ((seed + 7 * i as u64) % 101) as f64 * 0.37).collect();
            let there = remap_features(&column(&vals), &ab, Scheme::CharMax, &a, &b).unwrap();
            let back = remap_features(&there, &ba, Scheme::CharMax, &b, &a).unwrap();
            let before = tokens_to_words_scheme1(&vals, &a.word_tokens()).unwrap();
            let after = tokens_to_words_scheme1(&back.values.column(0), &a.word_tokens()).unwrap();
            for (x, y) in before.iter().zip(&after) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
