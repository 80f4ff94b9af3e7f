//! From preference pairs to model inputs.
//!
//! Each response is rendered with the chat template and tokenized twice: by
//! the reward tokenizer (markers kept as special tokens) and by the gaze
//! tokenizer (markers dropped). Gaze features are produced per word of the
//! marker-free text, spread onto gaze tokens, optionally remapped onto reward
//! tokens, and standardised per channel with statistics from training data.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{apply_chat_template, ChatTemplate, PreferencePair};
use crate::error::{Error, Result};
use crate::fusion::Fusion;
use crate::gazegen::{
    distribute_to_tokens, sliding_window_predict, surrogate_matrix, FeatureCombo, FeatureRecord,
    GazeFeatureMatrix, SurrogateConfig,
};
use crate::linalg::Mat;
use crate::remap::remap_features;
use crate::rmcore::{InputPair, ModelInput};
use crate::tokenizers::{align_words, ChunkTokenizer, TokenizedText, GAZE_CHUNK, REWARD_CHUNK};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Chosen,
    Rejected,
}

impl Side {
    pub fn name(self) -> &'static str {
        match self {
            Side::Chosen => "chosen",
            Side::Rejected => "rejected",
        }
    }
}

/// Id of the feature record for one side of a pair.
pub fn feature_id(pair_id: &str, side: Side) -> String {
    format!("{pair_id}:{}", side.name())
}

/// Where gaze features come from.
#[derive(Clone, Debug, Default)]
pub enum FeatureSource {
    #[default]
    Surrogate,
    Records(HashMap<String, FeatureRecord>),
}

impl FeatureSource {
    pub fn from_records(records: Vec<FeatureRecord>) -> Result<Self> {
        let mut map = HashMap::new();
        for r in records {
            let id = r.id.clone();
            if map.insert(id.clone(), r).is_some() {
                return Err(Error::Feature(format!("duplicate feature record {id:?}")));
            }
        }
        Ok(FeatureSource::Records(map))
    }
}

/// Per-channel standardisation of projector inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureNorm {
    /// Mean and standard deviation over the non-special rows of `mats`.
    /// Degenerate channels keep a unit deviation.
    pub fn fit<'a>(mats: impl IntoIterator<Item = (&'a Mat, &'a [bool])>, width: usize) -> Self {
        let mut n = 0usize;
        let mut sum = vec![0.0; width];
        let mut sum_sq = vec![0.0; width];
        for (m, special) in mats {
            for r in (0..m.rows()).filter(|&r| !special[r]) {
                n += 1;
                for (k, v) in m.row(r).iter().enumerate() {
                    sum[k] += v;
                    sum_sq[k] += v * v;
                }
            }
        }
        let count = n.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sum_sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let var = (s / count - m * m).max(0.0);
                if var.sqrt() > 1e-9 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        FeatureNorm { mean, std }
    }

    pub fn apply(&self, m: &mut Mat, special: &[bool]) {
        for r in 0..m.rows() {
            let row = m.row_mut(r);
            if special[r] {
                row.fill(0.0);
                continue;
            }
            for ((v, mu), sd) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - mu) / sd;
            }
        }
    }
}

/// Raw projector input for one response, with its special rows flagged.
#[derive(Clone, Debug, PartialEq)]
pub struct RawFeatures {
    pub values: Mat,
    pub special: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct Pipeline {
    pub template: ChatTemplate,
    pub fusion: Fusion,
    pub combo: FeatureCombo,
    pub surrogate: SurrogateConfig,
    pub reward_tokenizer: ChunkTokenizer,
    pub gaze_tokenizer: ChunkTokenizer,
    pub norm: Option<FeatureNorm>,
}

impl Pipeline {
    /// Builds both vocabularies from the rendered responses of `pairs`.
    pub fn fit(
        pairs: &[PreferencePair],
        template: ChatTemplate,
        fusion: Fusion,
        combo: FeatureCombo,
        surrogate: SurrogateConfig,
    ) -> Result<Self> {
        surrogate.validate()?;
        let mut rendered = Vec::with_capacity(2 * pairs.len());
        for p in pairs {
            rendered.push(apply_chat_template(&p.prompt, &p.chosen, template)?);
            rendered.push(apply_chat_template(&p.prompt, &p.rejected, template)?);
        }
        let texts = || rendered.iter().map(String::as_str);
        Ok(Pipeline {
            template,
            fusion,
            combo,
            surrogate,
            reward_tokenizer: ChunkTokenizer::fit(texts(), REWARD_CHUNK)?,
            gaze_tokenizer: ChunkTokenizer::fit(texts(), GAZE_CHUNK)?,
            norm: None,
        })
    }

    pub fn render(&self, prompt: &str, response: &str) -> Result<String> {
        apply_chat_template(prompt, response, self.template)
    }

    pub fn reward_tokens(&self, rendered: &str) -> Result<TokenizedText> {
        self.reward_tokenizer.tokenize(rendered, true, self.template.markers())
    }

    pub fn gaze_tokens(&self, rendered: &str) -> Result<TokenizedText> {
        self.gaze_tokenizer.tokenize(rendered, false, self.template.markers())
    }

    /// Words a feature generator sees for this response (markers removed).
    pub fn feature_words(&self, prompt: &str, response: &str) -> Result<Vec<String>> {
        Ok(self.gaze_tokens(&self.render(prompt, response)?)?.word_texts())
    }

    /// Word-level features from a record or from the surrogate.
    pub fn word_features(&self, gaze: &TokenizedText, record: Option<&FeatureRecord>) -> Result<GazeFeatureMatrix> {
        match record {
            Some(r) => r.to_matrix(&gaze.word_texts(), Some(self.combo)),
            None => surrogate_matrix(
                &gaze.words,
                self.combo.channels(),
                &self.surrogate.coefficients,
                self.combo.scheme(),
            ),
        }
    }

    /// Unnormalised projector input for one response, or `None` for the
    /// text-only baseline.
    pub fn raw_features(&self, prompt: &str, response: &str, record: Option<&FeatureRecord>) -> Result<Option<RawFeatures>> {
        if !self.fusion.uses_gaze() {
            return Ok(None);
        }
        let rendered = self.render(prompt, response)?;
        let gaze = self.gaze_tokens(&rendered)?;
        let words = self.word_features(&gaze, record)?;
        let scheme = self.combo.scheme();
        let eps = self.surrogate.epsilon_last_char;
        let tokens = distribute_to_tokens(&words, &gaze, scheme, eps)?;
        let blended = sliding_window_predict(gaze.len(), self.surrogate.window, self.surrogate.overlap, |r| {
            Ok(tokens.values.slice_rows(r.start, r.end))
        })?;
        let tokens = GazeFeatureMatrix {
            values: blended,
            ..tokens
        };
        match self.fusion {
            Fusion::Concat => Ok(Some(RawFeatures {
                special: vec![false; tokens.rows()],
                values: tokens.values,
            })),
            _ => {
                let reward = self.reward_tokens(&rendered)?;
                let align = align_words(&gaze, &reward)?;
                let remapped = remap_features(&tokens, &align, scheme, &gaze, &reward)?;
                Ok(Some(RawFeatures {
                    values: remapped.values,
                    special: reward.is_special,
                }))
            }
        }
    }

    fn record<'a>(&self, source: &'a FeatureSource, pair_id: &str, side: Side) -> Result<Option<&'a FeatureRecord>> {
        match source {
            FeatureSource::Records(map) if self.fusion.uses_gaze() => map
                .get(&feature_id(pair_id, side))
                .map(Some)
                .ok_or_else(|| Error::Feature(format!("no feature record {:?}", feature_id(pair_id, side)))),
            _ => Ok(None),
        }
    }

    /// Standardisation statistics from the projector inputs of `pairs`.
    pub fn fit_norm(&mut self, pairs: &[PreferencePair], source: &FeatureSource) -> Result<()> {
        if !self.fusion.uses_gaze() {
            self.norm = None;
            return Ok(());
        }
        let mut raws = Vec::with_capacity(2 * pairs.len());
        for p in pairs {
            for (side, text) in [(Side::Chosen, &p.chosen), (Side::Rejected, &p.rejected)] {
                let rec = self.record(source, &p.id, side)?;
                if let Some(raw) = self.raw_features(&p.prompt, text, rec)? {
                    raws.push(raw);
                }
            }
        }
        self.norm = Some(FeatureNorm::fit(
            raws.iter().map(|r| (&r.values, r.special.as_slice())),
            self.combo.width(),
        ));
        Ok(())
    }

    pub fn encode(&self, prompt: &str, response: &str, record: Option<&FeatureRecord>) -> Result<ModelInput> {
        let rendered = self.render(prompt, response)?;
        let ids = self.reward_tokens(&rendered)?.ids;
        match self.raw_features(prompt, response, record)? {
            None => Ok(ModelInput::text(ids)),
            Some(mut raw) => {
                if let Some(norm) = &self.norm {
                    norm.apply(&mut raw.values, &raw.special);
                }
                Ok(ModelInput::with_gaze(ids, raw.values))
            }
        }
    }

    pub fn encode_pair(&self, pair: &PreferencePair, source: &FeatureSource) -> Result<InputPair> {
        let chosen = self.encode(&pair.prompt, &pair.chosen, self.record(source, &pair.id, Side::Chosen)?)?;
        let rejected = self.encode(&pair.prompt, &pair.rejected, self.record(source, &pair.id, Side::Rejected)?)?;
        Ok((chosen, rejected))
    }

    pub fn encode_pairs(&self, pairs: &[PreferencePair], source: &FeatureSource) -> Result<Vec<InputPair>> {
        pairs.iter().map(|p| self.encode_pair(p, source)).collect()
    }

    /// Surrogate feature records (word level, every channel) for both sides
    /// of each pair.
    pub fn surrogate_records(&self, pairs: &[PreferencePair]) -> Result<Vec<FeatureRecord>> {
        let mut out = Vec::with_capacity(2 * pairs.len());
        for p in pairs {
            for (side, text) in [(Side::Chosen, &p.chosen), (Side::Rejected, &p.rejected)] {
                let gaze = self.gaze_tokens(&self.render(&p.prompt, text)?)?;
                let m = surrogate_matrix(
                    &gaze.words,
                    &crate::gazegen::Channel::ALL,
                    &self.surrogate.coefficients,
                    self.combo.scheme(),
                )?;
                out.push(FeatureRecord::from_matrix(feature_id(&p.id, side), &gaze.word_texts(), &m));
            }
        }
        Ok(out)
    }
}
