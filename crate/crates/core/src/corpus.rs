//! Preference data: loading, pair construction, chat rendering and splits.
//!
//! Three JSON Lines inputs are understood:
//!
//! * pairs: `{"id","prompt","chosen","rejected"}` plus an optional `"subset"`,
//! * ranked: `{"id","prompt","responses":[{"text","rank"}]}` (lower rank is better),
//! * scored: `{"id","prompt","responses":[{"text","helpfulness"}]}`.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub id: String,
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset: Option<String>,
}

impl PreferencePair {
    pub fn new(
        id: impl Into<String>,
        prompt: impl Into<String>,
        chosen: impl Into<String>,
        rejected: impl Into<String>,
    ) -> Self {
        PreferencePair {
            id: id.into(),
            prompt: prompt.into(),
            chosen: chosen.into(),
            rejected: rejected.into(),
            subset: None,
        }
    }

    pub fn with_subset(mut self, subset: impl Into<String>) -> Self {
        self.subset = Some(subset.into());
        self
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.prompt.is_empty() {
            return Err("prompt is empty".into());
        }
        if self.chosen == self.rejected {
            return Err("chosen and rejected are identical".into());
        }
        Ok(())
    }

    /// Same pair with the preference reversed.
    pub fn swapped(&self) -> Self {
        PreferencePair {
            chosen: self.rejected.clone(),
            rejected: self.chosen.clone(),
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankedResponse {
    pub text: String,
    pub rank: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankedRecord {
    pub id: String,
    pub prompt: String,
    pub responses: Vec<RankedResponse>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoredResponse {
    pub text: String,
    pub helpfulness: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoredRecord {
    pub id: String,
    pub prompt: String,
    pub responses: Vec<ScoredResponse>,
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push((i + 1, line));
    }
    Ok(out)
}

fn string_field(obj: &Map<String, Value>, field: &str, line: usize) -> Result<String> {
    match obj.get(field) {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(Error::record(line, format!("field {field:?} must be a string"))),
        None => Err(Error::record(line, format!("missing field {field:?}"))),
    }
}

fn parse_pair_line(line: &str, lineno: usize) -> Result<PreferencePair> {
    let value: Value =
        serde_json::from_str(line).map_err(|e| Error::record(lineno, e.to_string()))?;
    let Value::Object(obj) = value else {
        return Err(Error::record(lineno, "expected a JSON object"));
    };
    for key in obj.keys() {
        if !matches!(
            key.as_str(),
            "id" | "prompt" | "chosen" | "rejected" | "subset"
        ) {
            return Err(Error::record(lineno, format!("unknown field {key:?}")));
        }
    }
    let subset = match obj.get("subset") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(_) => return Err(Error::record(lineno, "field \"subset\" must be a string")),
    };
    let pair = PreferencePair {
        id: string_field(&obj, "id", lineno)?,
        prompt: string_field(&obj, "prompt", lineno)?,
        chosen: string_field(&obj, "chosen", lineno)?,
        rejected: string_field(&obj, "rejected", lineno)?,
        subset,
    };
    pair.validate().map_err(|m| Error::record(lineno, m))?;
    Ok(pair)
}

/// Loads a pairs file, preserving input order.
pub fn load_pairs_jsonl(path: impl AsRef<Path>) -> Result<Vec<PreferencePair>> {
    let path = path.as_ref();
    let lines = read_lines(path)?;
    if lines.is_empty() {
        log::warn!("{}: no preference pairs found", path.display());
    }
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut pairs = Vec::with_capacity(lines.len());
    for (lineno, line) in lines {
        let pair = parse_pair_line(&line, lineno)?;
        if let Some(&first) = seen.get(&pair.id) {
            return Err(Error::DuplicateId {
                id: pair.id,
                first,
                second: lineno,
            });
        }
        seen.insert(pair.id.clone(), lineno);
        pairs.push(pair);
    }
    Ok(pairs)
}

pub fn write_pairs_jsonl(path: impl AsRef<Path>, pairs: &[PreferencePair]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for p in pairs {
        serde_json::to_writer(&mut buf, p).expect("pair serializes");
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

fn load_records<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let lines = read_lines(path)?;
    if lines.is_empty() {
        log::warn!("{}: no records found", path.display());
    }
    lines
        .into_iter()
        .map(|(lineno, line)| {
            serde_json::from_str(&line).map_err(|e| Error::record(lineno, e.to_string()))
        })
        .collect()
}

pub fn load_ranked_jsonl(path: impl AsRef<Path>) -> Result<Vec<RankedRecord>> {
    load_records(path.as_ref())
}

pub fn load_scored_jsonl(path: impl AsRef<Path>) -> Result<Vec<ScoredRecord>> {
    load_records(path.as_ref())
}

/// Index of the first element minimising (or maximising) `key`.
fn first_extreme<T>(items: &[T], key: impl Fn(&T) -> f64, want_max: bool) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, item) in items.iter().enumerate() {
        let k = key(item);
        let better = match best {
            None => true,
            Some((_, b)) if want_max => k > b,
            Some((_, b)) => k < b,
        };
        if better {
            best = Some((i, k));
        }
    }
    best.map(|(i, _)| i)
}

fn make_pair(id: &str, prompt: &str, chosen: &str, rejected: &str) -> Option<PreferencePair> {
    if chosen == rejected {
        return None;
    }
    Some(PreferencePair::new(id, prompt, chosen, rejected))
}

/// Best-ranked vs worst-ranked response. Ties at either extreme resolve to the
/// lowest list index; records without two distinct ranks yield nothing.
pub fn pairs_from_ranked(rec: &RankedRecord) -> Option<PreferencePair> {
    let best = first_extreme(&rec.responses, |r| r.rank as f64, false)?;
    let worst = first_extreme(&rec.responses, |r| r.rank as f64, true)?;
    if rec.responses[best].rank >= rec.responses[worst].rank {
        return None;
    }
    make_pair(
        &rec.id,
        &rec.prompt,
        &rec.responses[best].text,
        &rec.responses[worst].text,
    )
}

/// Highest vs lowest helpfulness; equal extremes yield nothing.
pub fn pairs_from_scored(rec: &ScoredRecord) -> Option<PreferencePair> {
    let best = first_extreme(&rec.responses, |r| r.helpfulness, true)?;
    let worst = first_extreme(&rec.responses, |r| r.helpfulness, false)?;
    if rec.responses[best].helpfulness <= rec.responses[worst].helpfulness {
        return None;
    }
    make_pair(
        &rec.id,
        &rec.prompt,
        &rec.responses[best].text,
        &rec.responses[worst].text,
    )
}

pub const IM_START: &str = "⟨im_start⟩";
pub const IM_END: &str = "⟨im_end⟩";
pub const BOS: &str = "⟨s⟩";
pub const EOS: &str = "⟨/s⟩";
pub const INST_OPEN: &str = "[INST]";
pub const INST_CLOSE: &str = "[/INST]";
pub const EYE_OPEN: &str = "⟨eye⟩";
pub const EYE_CLOSE: &str = "⟨/eye⟩";

/// How a prompt/response pair is laid out for the reward model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChatTemplate {
    /// `⟨im_start⟩ user … ⟨im_end⟩ ⟨im_start⟩ assistant … ⟨im_end⟩`
    Headered,
    /// `⟨s⟩ [INST] … [/INST] … ⟨/s⟩`
    Instruct,
}

impl ChatTemplate {
    pub fn markers(self) -> &'static [&'static str] {
        match self {
            ChatTemplate::Headered => &[IM_START, IM_END],
            ChatTemplate::Instruct => &[BOS, INST_OPEN, INST_CLOSE, EOS],
        }
    }
}

impl fmt::Display for ChatTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ChatTemplate::Headered => "headered",
            ChatTemplate::Instruct => "instruct",
        })
    }
}

impl FromStr for ChatTemplate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "headered" => Ok(ChatTemplate::Headered),
            "instruct" => Ok(ChatTemplate::Instruct),
            other => Err(Error::Config(format!("unknown chat template {other:?}"))),
        }
    }
}

/// Renders one prompt/response exchange. Marker strings inside user text are
/// rejected so that the rendering stays injective.
pub fn apply_chat_template(prompt: &str, response: &str, style: ChatTemplate) -> Result<String> {
    for marker in style.markers() {
        if prompt.contains(marker) || response.contains(marker) {
            return Err(Error::MarkerCollision {
                marker: marker.to_string(),
            });
        }
    }
    Ok(match style {
        ChatTemplate::Headered => {
            format!("{IM_START} user {prompt} {IM_END} {IM_START} assistant {response} {IM_END}")
        }
        ChatTemplate::Instruct => {
            format!("{BOS} {INST_OPEN} {prompt} {INST_CLOSE} {response} {EOS}")
        }
    })
}

/// Seeded partition into (train, validation). Each side keeps input order.
pub fn split_dataset(
    pairs: &[PreferencePair],
    val_frac: f64,
    seed: u64,
) -> (Vec<PreferencePair>, Vec<PreferencePair>) {
    let n = pairs.len();
    let n_val = ((val_frac.clamp(0.0, 1.0) * n as f64).round() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_val = vec![false; n];
    for &i in &order[..n_val] {
        is_val[i] = true;
    }
    let (val, train): (Vec<_>, Vec<_>) = pairs
        .iter()
        .cloned()
        .zip(is_val)
        .partition(|(_, v)| *v);
    (
        train.into_iter().map(|(p, _)| p).collect(),
        val.into_iter().map(|(p, _)| p).collect(),
    )
}
