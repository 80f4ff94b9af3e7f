//! Word segmentation and fixed-width chunk tokenizers.
//!
//! Both tokenizers in the pipeline share one word layer: maximal runs of
//! non-whitespace characters of the rendered text. A tokenizer only differs in
//! how many characters it packs into each subword chunk, so the gaze side and
//! the reward side generally disagree on token counts while agreeing on words.
//! All offsets are character (not byte) offsets.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{BOS, EOS, EYE_CLOSE, EYE_OPEN, IM_END, IM_START, INST_CLOSE, INST_OPEN};
use crate::error::{Error, Result};
use crate::remap::{AlignedGroup, AlignmentMap};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;

/// Chunk width of the tokenizer the gaze features are produced in.
pub const GAZE_CHUNK: usize = 4;
/// Chunk width of the reward model's tokenizer.
pub const REWARD_CHUNK: usize = 3;

pub fn default_specials() -> Vec<String> {
    [
        PAD, UNK, IM_START, IM_END, BOS, INST_OPEN, INST_CLOSE, EOS, EYE_OPEN, EYE_CLOSE,
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordSpan {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

impl WordSpan {
    pub fn overlap(&self, other: &WordSpan) -> usize {
        self.end.min(other.end).saturating_sub(self.start.max(other.start))
    }
}

/// Maximal runs of non-whitespace characters with their character offsets.
pub fn word_segment(text: &str) -> Vec<WordSpan> {
    let mut words = Vec::new();
    let mut current: Option<(usize, String)> = None;
    let mut pos = 0;
    for (i, ch) in text.chars().enumerate() {
        pos = i + 1;
        if ch.is_whitespace() {
            if let Some((start, word)) = current.take() {
                words.push(WordSpan {
                    text: word,
                    start,
                    end: i,
                });
            }
        } else {
            current.get_or_insert_with(|| (i, String::new())).1.push(ch);
        }
    }
    if let Some((start, word)) = current {
        words.push(WordSpan {
            text: word,
            start,
            end: pos,
        });
    }
    words
}

/// Splits a word left to right into pieces of at most `chunk` characters.
pub fn chunk_word(word: &str, chunk: usize) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    chars.chunks(chunk.max(1)).map(|c| c.iter().collect()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenizedText {
    pub tokens: Vec<String>,
    pub ids: Vec<u32>,
    /// Word index per token; `None` for special tokens.
    pub word_ids: Vec<Option<usize>>,
    /// Character span `[start, end)` per token.
    pub spans: Vec<(usize, usize)>,
    pub is_special: Vec<bool>,
    /// The shared word layer (markers excluded).
    pub words: Vec<WordSpan>,
}

impl TokenizedText {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Token indices belonging to each word, in order.
    pub fn word_tokens(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.words.len()];
        for (t, w) in self.word_ids.iter().enumerate() {
            if let Some(w) = w {
                out[*w].push(t);
            }
        }
        out
    }

    pub fn special_positions(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.is_special[i]).collect()
    }

    pub fn word_texts(&self) -> Vec<String> {
        self.words.iter().map(|w| w.text.clone()).collect()
    }
}

/// Special tokens first (ids `0..specials.len()`), then the sorted chunk set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    specials: Vec<String>,
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn new(specials: Vec<String>, tokens: impl IntoIterator<Item = String>) -> Self {
        let sorted: BTreeSet<String> = tokens
            .into_iter()
            .filter(|t| !specials.contains(t))
            .collect();
        let tokens: Vec<String> = sorted.into_iter().collect();
        let index = specials
            .iter()
            .chain(&tokens)
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab {
            specials,
            tokens,
            index,
        }
    }

    /// Observed chunks of every non-special word in `texts`.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, chunk: usize) -> Self {
        let specials = default_specials();
        let mut seen = BTreeSet::new();
        for text in texts {
            for w in word_segment(text) {
                if specials.contains(&w.text) {
                    continue;
                }
                seen.extend(chunk_word(&w.text, chunk));
            }
        }
        Vocab::new(specials, seen)
    }

    pub fn len(&self) -> usize {
        self.specials.len() + self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn special_id(&self, token: &str) -> Option<u32> {
        self.specials
            .iter()
            .position(|s| s == token)
            .map(|i| i as u32)
    }

    pub fn is_special_id(&self, id: u32) -> bool {
        (id as usize) < self.specials.len()
    }

    pub fn specials(&self) -> &[String] {
        &self.specials
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        let id = id as usize;
        if id < self.specials.len() {
            Some(&self.specials[id])
        } else {
            self.tokens.get(id - self.specials.len()).map(String::as_str)
        }
    }

    /// File form: `#specials`, the specials, `#tokens`, the sorted tokens.
    pub fn to_text(&self) -> String {
        let mut out = String::from("#specials\n");
        for s in &self.specials {
            out.push_str(s);
            out.push('\n');
        }
        out.push_str("#tokens\n");
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some("#specials") {
            return Err(Error::Config("vocabulary must start with #specials".into()));
        }
        let mut specials = Vec::new();
        let mut tokens = Vec::new();
        let mut in_tokens = false;
        for line in lines {
            if !in_tokens && line == "#tokens" {
                in_tokens = true;
            } else if in_tokens {
                tokens.push(line.to_string());
            } else {
                specials.push(line.to_string());
            }
        }
        let vocab = Vocab::new(specials, tokens.iter().cloned());
        if vocab.tokens != tokens {
            return Err(Error::Config("vocabulary tokens are not sorted and unique".into()));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Vocab::from_text(&text)
    }

    /// SHA-256 of the file form, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChunkTokenizer {
    chunk: usize,
    vocab: Vocab,
}

impl ChunkTokenizer {
    pub fn new(chunk: usize, vocab: Vocab) -> Result<Self> {
        if chunk == 0 {
            return Err(Error::Config("chunk width must be at least 1".into()));
        }
        Ok(ChunkTokenizer { chunk, vocab })
    }

    pub fn fit<'a>(texts: impl IntoIterator<Item = &'a str>, chunk: usize) -> Result<Self> {
        ChunkTokenizer::new(chunk, Vocab::build(texts, chunk))
    }

    pub fn chunk(&self) -> usize {
        self.chunk
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    /// Tokenizes `text`. Whitespace-delimited occurrences of `markers` become
    /// single special tokens when `add_specials` is set and are dropped
    /// otherwise; either way they never enter the word layer.
    pub fn tokenize(&self, text: &str, add_specials: bool, markers: &[&str]) -> Result<TokenizedText> {
        let mut marker_ids = HashMap::new();
        for &m in markers {
            let id = self
                .vocab
                .special_id(m)
                .ok_or_else(|| Error::UnknownMarker(m.to_string()))?;
            marker_ids.insert(m, id);
        }

        let mut out = TokenizedText {
            tokens: Vec::new(),
            ids: Vec::new(),
            word_ids: Vec::new(),
            spans: Vec::new(),
            is_special: Vec::new(),
            words: Vec::new(),
        };
        for w in word_segment(text) {
            if let Some(&id) = marker_ids.get(w.text.as_str()) {
                if add_specials {
                    out.tokens.push(w.text.clone());
                    out.ids.push(id);
                    out.word_ids.push(None);
                    out.spans.push((w.start, w.end));
                    out.is_special.push(true);
                }
                continue;
            }
            let word_index = out.words.len();
            let mut start = w.start;
            for piece in chunk_word(&w.text, self.chunk) {
                let len = piece.chars().count();
                out.ids.push(self.vocab.id(&piece));
                out.tokens.push(piece);
                out.word_ids.push(Some(word_index));
                out.spans.push((start, start + len));
                out.is_special.push(false);
                start += len;
            }
            out.words.push(w);
        }
        Ok(out)
    }
}

/// Word-level alignment between two tokenizations of the same text.
///
/// Words with identical character spans pair up one to one. Remaining words
/// are grouped into maximal runs of mutually overlapping spans, so every word
/// on each side belongs to exactly one group. A word that overlaps nothing on
/// the other side is an error.
pub fn align_words(a: &TokenizedText, b: &TokenizedText) -> Result<AlignmentMap> {
    let a_tokens = a.word_tokens();
    let b_tokens = b.word_tokens();
    let (na, nb) = (a.words.len(), b.words.len());
    let mut groups = Vec::new();
    let (mut i, mut j) = (0, 0);

    let unaligned = |w: &WordSpan| Error::Unaligned {
        word: w.text.clone(),
        start: w.start,
        end: w.end,
    };

    while i < na || j < nb {
        if i == na {
            return Err(unaligned(&b.words[j]));
        }
        if j == nb {
            return Err(unaligned(&a.words[i]));
        }
        let (wa, wb) = (&a.words[i], &b.words[j]);
        if wa.start == wb.start && wa.end == wb.end {
            groups.push(AlignedGroup {
                source_words: vec![i],
                target_words: vec![j],
                source_tokens: a_tokens[i].clone(),
                target_tokens: b_tokens[j].clone(),
            });
            i += 1;
            j += 1;
            continue;
        }
        if wa.overlap(wb) == 0 {
            return Err(if wa.start < wb.start {
                unaligned(wa)
            } else {
                unaligned(wb)
            });
        }
        let mut group = AlignedGroup {
            source_words: vec![i],
            target_words: vec![j],
            source_tokens: a_tokens[i].clone(),
            target_tokens: b_tokens[j].clone(),
        };
        let mut end = wa.end.max(wb.end);
        i += 1;
        j += 1;
        loop {
            if i < na && a.words[i].start < end {
                end = end.max(a.words[i].end);
                group.source_words.push(i);
                group.source_tokens.extend(&a_tokens[i]);
                i += 1;
            } else if j < nb && b.words[j].start < end {
                end = end.max(b.words[j].end);
                group.target_words.push(j);
                group.target_tokens.extend(&b_tokens[j]);
                j += 1;
            } else {
                break;
            }
        }
        groups.push(group);
    }

    Ok(AlignmentMap {
        groups,
        source_len: a.len(),
        target_len: b.len(),
        specials_source: a.special_positions(),
        specials_target: b.special_positions(),
    })
}
