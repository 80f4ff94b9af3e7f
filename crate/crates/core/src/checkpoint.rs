//! Self-contained model files.
//!
//! Layout: the 8-byte magic `GZRWCKPT`, a little-endian `u32` format version,
//! a `u32` header length and a JSON header, then a `u32` tensor count and for
//! each tensor its name (`u32` length + UTF-8), `u32` rows, `u32` cols and the
//! row-major `f64` values in little-endian order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{ChatTemplate, EYE_CLOSE, EYE_OPEN};
use crate::error::{Error, Result};
use crate::fusion::{Fusion, DEFAULT_P1, DEFAULT_P2};
use crate::gazegen::{FeatureCombo, SurrogateConfig};
use crate::linalg::Mat;
use crate::pipeline::{FeatureNorm, Pipeline};
use crate::rmcore::{ModelConfig, RewardModelParams};
use crate::tokenizers::{ChunkTokenizer, Vocab};

pub const MAGIC: &[u8; 8] = b"GZRWCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub model: ModelConfig,
    pub vocab_hash: String,
    pub fusion: Fusion,
    pub combo: FeatureCombo,
    pub template: ChatTemplate,
    pub reward_chunk: usize,
    pub gaze_chunk: usize,
    pub reward_vocab: String,
    pub gaze_vocab: String,
    pub surrogate: SurrogateConfig,
    pub norm: Option<FeatureNorm>,
    pub projector_dropout: (f64, f64),
    pub best_step: u64,
    pub best_val_loss: f64,
}

/// Trained parameters together with everything needed to encode inputs.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub pipeline: Pipeline,
    pub params: RewardModelParams,
    pub best_step: u64,
    pub best_val_loss: f64,
}

/// Model configuration matching a pipeline's vocabulary and feature combo.
pub fn model_config_for(
    pipeline: &Pipeline,
    d_model: usize,
    n_layers: usize,
    n_heads: usize,
    max_positions: usize,
    init_std: f64,
) -> Result<ModelConfig> {
    let vocab = pipeline.reward_tokenizer.vocab();
    let marker = |m: &str| {
        vocab
            .special_id(m)
            .ok_or_else(|| Error::UnknownMarker(m.to_string()))
    };
    let cfg = ModelConfig {
        vocab_size: vocab.len(),
        d_model,
        n_layers,
        n_heads,
        max_positions,
        fusion: pipeline.fusion,
        feature_width: if pipeline.fusion.uses_gaze() {
            pipeline.combo.width()
        } else {
            0
        },
        special_rows: vocab.specials().len(),
        eye_open_id: marker(EYE_OPEN)?,
        eye_close_id: marker(EYE_CLOSE)?,
        init_std,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn push_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("value {v} does not fit in u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated file at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

impl TrainedModel {
    pub fn header(&self) -> CheckpointHeader {
        let p = &self.pipeline;
        let (p1, p2) = self
            .params
            .projector
            .as_ref()
            .map_or((DEFAULT_P1, DEFAULT_P2), |pr| (pr.p1, pr.p2));
        CheckpointHeader {
            format_version: FORMAT_VERSION,
            model: self.params.config.clone(),
            vocab_hash: p.reward_tokenizer.vocab().hash(),
            fusion: p.fusion,
            combo: p.combo,
            template: p.template,
            reward_chunk: p.reward_tokenizer.chunk(),
            gaze_chunk: p.gaze_tokenizer.chunk(),
            reward_vocab: p.reward_tokenizer.vocab().to_text(),
            gaze_vocab: p.gaze_tokenizer.vocab().to_text(),
            surrogate: p.surrogate.clone(),
            norm: p.norm.clone(),
            projector_dropout: (p1, p2),
            best_step: self.best_step,
            best_val_loss: self.best_val_loss,
        }
    }

    /// Fails unless `vocab` is the vocabulary the model was trained with.
    pub fn check_vocab(&self, vocab: &Vocab) -> Result<()> {
        let ours = self.pipeline.reward_tokenizer.vocab().hash();
        let theirs = vocab.hash();
        if ours != theirs {
            return Err(Error::Checkpoint(format!(
                "vocabulary hash mismatch: model {ours}, supplied {theirs}"
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header()).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        push_u32(&mut buf, header.len())?;
        buf.extend_from_slice(&header);
        let specs = self.params.specs();
        let tensors = self.params.tensors();
        push_u32(&mut buf, tensors.len())?;
        for (spec, t) in specs.iter().zip(tensors) {
            push_u32(&mut buf, spec.name.len())?;
            buf.extend_from_slice(spec.name.as_bytes());
            push_u32(&mut buf, t.rows())?;
            push_u32(&mut buf, t.cols())?;
            for v in t.as_slice() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION as usize {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let header_len = r.u32()?;
        let header: CheckpointHeader =
            serde_json::from_slice(r.take(header_len)?).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;

        let reward_vocab = Vocab::from_text(&header.reward_vocab)?;
        if reward_vocab.hash() != header.vocab_hash {
            return Err(Error::Checkpoint("embedded vocabulary does not match its hash".into()));
        }
        let gaze_vocab = Vocab::from_text(&header.gaze_vocab)?;
        let pipeline = Pipeline {
            template: header.template,
            fusion: header.fusion,
            combo: header.combo,
            surrogate: header.surrogate.clone(),
            reward_tokenizer: ChunkTokenizer::new(header.reward_chunk, reward_vocab)?,
            gaze_tokenizer: ChunkTokenizer::new(header.gaze_chunk, gaze_vocab)?,
            norm: header.norm.clone(),
        };
        if pipeline.fusion != header.model.fusion {
            return Err(Error::Checkpoint("fusion in header and model config differ".into()));
        }
        if pipeline.reward_tokenizer.vocab().len() != header.model.vocab_size {
            return Err(Error::Checkpoint("vocabulary size differs from the model config".into()));
        }

        let mut params = RewardModelParams::init(header.model.clone(), 0)?;
        if let Some(p) = params.projector.as_mut() {
            (p.p1, p.p2) = header.projector_dropout;
        }
        let specs = params.specs();
        let count = r.u32()?;
        if count != specs.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {count}",
                specs.len()
            )));
        }
        for (spec, t) in specs.iter().zip(params.tensors_mut()) {
            let name_len = r.u32()?;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            if name != spec.name {
                return Err(Error::Checkpoint(format!("expected tensor {}, found {name}", spec.name)));
            }
            let (rows, cols) = (r.u32()?, r.u32()?);
            if (rows, cols) != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: shape {rows}x{cols}, expected {}x{}",
                    t.rows(),
                    t.cols()
                )));
            }
            let raw = r.take(rows * cols * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            *t = Mat::from_vec(rows, cols, data);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after the last tensor".into()));
        }
        if !params.all_finite() {
            return Err(Error::NonFinite("checkpoint parameters".into()));
        }
        pipeline.surrogate.validate()?;
        Ok(TrainedModel {
            pipeline,
            params,
            best_step: header.best_step,
            best_val_loss: header.best_val_loss,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        TrainedModel::from_bytes(&bytes)
    }
}
