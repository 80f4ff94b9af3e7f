//! Causal transformer reward model with hand-written gradients.
//!
//! Pre-norm blocks (multi-head causal self-attention, then a ReLU
//! feed-forward of width `4d`), a final layer norm and a linear head read at
//! the last unmasked position. Everything is computed in `f64`.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{
    fuse_add, fuse_concat, projector_backward, projector_forward, Fusion, FusedSequence, Mode,
    ProjectorCache, ProjectorParams,
};
use crate::linalg::{dot, Mat};
use crate::nn::{affine, affine_backward, layer_norm, layer_norm_backward, LayerNormCache, LN_EPS};
use crate::tokenizers::PAD_ID;

pub const DEFAULT_D_MODEL: usize = 64;
pub const DEFAULT_LAYERS: usize = 2;
pub const DEFAULT_HEADS: usize = 2;
pub const DEFAULT_POSITIONS: usize = 512;
pub const DEFAULT_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_positions: usize,
    pub fusion: Fusion,
    /// Gaze channels per row; zero without gaze fusion.
    pub feature_width: usize,
    /// Token ids below this value are special tokens.
    pub special_rows: usize,
    pub eye_open_id: u32,
    pub eye_close_id: u32,
    pub init_std: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!(
                "d_model ({}) must be a positive multiple of n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        if self.n_layers == 0 || self.max_positions == 0 || self.vocab_size == 0 {
            return fail("n_layers, max_positions and vocab_size must be positive".into());
        }
        if self.fusion.uses_gaze() && self.feature_width == 0 {
            return fail(format!("{} fusion needs at least one feature channel", self.fusion));
        }
        for id in [self.eye_open_id, self.eye_close_id] {
            if id as usize >= self.vocab_size {
                return fail(format!("marker id {id} outside the vocabulary"));
            }
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return fail(format!("init_std must be finite and non-negative, got {}", self.init_std));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Embeddings,
    Attention,
    FeedForward,
    Norms,
    Head,
    Projector,
    SpecialTokens,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 7] = [
        ParamGroup::Embeddings,
        ParamGroup::Attention,
        ParamGroup::FeedForward,
        ParamGroup::Norms,
        ParamGroup::Head,
        ParamGroup::Projector,
        ParamGroup::SpecialTokens,
    ];
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ParamGroup::Embeddings => "embeddings",
            ParamGroup::Attention => "attention",
            ParamGroup::FeedForward => "feed-forward",
            ParamGroup::Norms => "norms",
            ParamGroup::Head => "head",
            ParamGroup::Projector => "projector",
            ParamGroup::SpecialTokens => "special tokens",
        })
    }
}

/// Name, report group and weight-decay flag of one tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub group: ParamGroup,
    pub decay: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub ln1_gain: Mat,
    pub ln1_shift: Mat,
    pub wq: Mat,
    pub bq: Mat,
    pub wk: Mat,
    pub bk: Mat,
    pub wv: Mat,
    pub bv: Mat,
    pub wo: Mat,
    pub bo: Mat,
    pub ln2_gain: Mat,
    pub ln2_shift: Mat,
    pub ff1_w: Mat,
    pub ff1_b: Mat,
    pub ff2_w: Mat,
    pub ff2_b: Mat,
}

const BLOCK_TENSORS: [(&str, ParamGroup, bool); 16] = [
    ("ln1.gain", ParamGroup::Norms, false),
    ("ln1.shift", ParamGroup::Norms, false),
    ("attn.wq", ParamGroup::Attention, true),
    ("attn.bq", ParamGroup::Attention, false),
    ("attn.wk", ParamGroup::Attention, true),
    ("attn.bk", ParamGroup::Attention, false),
    ("attn.wv", ParamGroup::Attention, true),
    ("attn.bv", ParamGroup::Attention, false),
    ("attn.wo", ParamGroup::Attention, true),
    ("attn.bo", ParamGroup::Attention, false),
    ("ln2.gain", ParamGroup::Norms, false),
    ("ln2.shift", ParamGroup::Norms, false),
    ("ff.w1", ParamGroup::FeedForward, true),
    ("ff.b1", ParamGroup::FeedForward, false),
    ("ff.w2", ParamGroup::FeedForward, true),
    ("ff.b2", ParamGroup::FeedForward, false),
];

impl BlockParams {
    fn new<R: Rng>(d: usize, std: f64, rng: &mut R) -> Self {
        BlockParams {
            ln1_gain: Mat::filled(1, d, 1.0),
            ln1_shift: Mat::zeros(1, d),
            wq: Mat::gaussian(d, d, std, rng),
            bq: Mat::zeros(1, d),
            wk: Mat::gaussian(d, d, std, rng),
            bk: Mat::zeros(1, d),
            wv: Mat::gaussian(d, d, std, rng),
            bv: Mat::zeros(1, d),
            wo: Mat::gaussian(d, d, std, rng),
            bo: Mat::zeros(1, d),
            ln2_gain: Mat::filled(1, d, 1.0),
            ln2_shift: Mat::zeros(1, d),
            ff1_w: Mat::gaussian(d, 4 * d, std, rng),
            ff1_b: Mat::zeros(1, 4 * d),
            ff2_w: Mat::gaussian(4 * d, d, std, rng),
            ff2_b: Mat::zeros(1, d),
        }
    }

    fn tensors(&self) -> [&Mat; 16] {
        [
            &self.ln1_gain,
            &self.ln1_shift,
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.ln2_gain,
            &self.ln2_shift,
            &self.ff1_w,
            &self.ff1_b,
            &self.ff2_w,
            &self.ff2_b,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Mat; 16] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_shift,
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln2_gain,
            &mut self.ln2_shift,
            &mut self.ff1_w,
            &mut self.ff1_b,
            &mut self.ff2_w,
            &mut self.ff2_b,
        ]
    }
}

/// All trainable parameters. Gradients and optimizer moments use the same
/// type.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardModelParams {
    pub config: ModelConfig,
    pub tok_emb: Mat,
    pub pos_emb: Mat,
    pub blocks: Vec<BlockParams>,
    pub final_gain: Mat,
    pub final_shift: Mat,
    pub head_w: Mat,
    pub head_b: Mat,
    pub projector: Option<ProjectorParams>,
}

impl RewardModelParams {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let std = config.init_std;
        let tok_emb = Mat::gaussian(config.vocab_size, d, std, &mut rng);
        let pos_emb = Mat::gaussian(config.max_positions, d, std, &mut rng);
        let blocks = (0..config.n_layers).map(|_| BlockParams::new(d, std, &mut rng)).collect();
        let head_w = Mat::gaussian(d, 1, std, &mut rng);
        let projector = config
            .fusion
            .uses_gaze()
            .then(|| ProjectorParams::new(config.feature_width, d, std, &mut rng));
        Ok(RewardModelParams {
            tok_emb,
            pos_emb,
            blocks,
            final_gain: Mat::filled(1, d, 1.0),
            final_shift: Mat::zeros(1, d),
            head_w,
            head_b: Mat::zeros(1, 1),
            projector,
            config,
        })
    }

    /// Same shapes, every entry zero.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    pub fn specs(&self) -> Vec<TensorSpec> {
        let spec = |name: String, group, decay| TensorSpec { name, group, decay };
        let mut out = vec![
            spec("tok_emb".into(), ParamGroup::Embeddings, true),
            spec("pos_emb".into(), ParamGroup::Embeddings, true),
        ];
        for i in 0..self.blocks.len() {
            for (name, group, decay) in BLOCK_TENSORS {
                out.push(spec(format!("blocks.{i}.{name}"), group, decay));
            }
        }
        out.push(spec("final_norm.gain".into(), ParamGroup::Norms, false));
        out.push(spec("final_norm.shift".into(), ParamGroup::Norms, false));
        out.push(spec("head.weight".into(), ParamGroup::Head, true));
        out.push(spec("head.bias".into(), ParamGroup::Head, false));
        if let Some(p) = &self.projector {
            for (name, t) in p.tensors() {
                let decay = t.rows() > 1;
                out.push(spec(format!("projector.{name}"), ParamGroup::Projector, decay));
            }
        }
        out
    }

    pub fn tensors(&self) -> Vec<&Mat> {
        let mut out = vec![&self.tok_emb, &self.pos_emb];
        for b in &self.blocks {
            out.extend(b.tensors());
        }
        out.extend([&self.final_gain, &self.final_shift, &self.head_w, &self.head_b]);
        if let Some(p) = &self.projector {
            out.extend(p.tensors().map(|(_, t)| t));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out.extend([
            &mut self.final_gain,
            &mut self.final_shift,
            &mut self.head_w,
            &mut self.head_b,
        ]);
        if let Some(p) = &mut self.projector {
            out.extend(p.tensors_mut().map(|(_, t)| t));
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors().iter().map(|t| t.sum_sq()).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensors_mut() {
            t.scale(s);
        }
    }

    pub fn add_assign(&mut self, other: &RewardModelParams) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b);
        }
    }
}

/// Token ids plus optional gaze features for one rendered response.
///
/// For concatenation `gaze` holds one row per gaze-tokenizer token; for
/// addition it holds one row per entry of `ids`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput {
    pub ids: Vec<u32>,
    pub mask: Vec<u8>,
    pub gaze: Option<Mat>,
}

impl ModelInput {
    pub fn text(ids: Vec<u32>) -> Self {
        let mask = vec![1; ids.len()];
        ModelInput { ids, mask, gaze: None }
    }

    pub fn with_gaze(ids: Vec<u32>, gaze: Mat) -> Self {
        let mask = vec![1; ids.len()];
        ModelInput {
            ids,
            mask,
            gaze: Some(gaze),
        }
    }

    /// Right-pads to `len` with padding ids, zero mask and zero gaze rows for
    /// additive fusion.
    pub fn padded(&self, len: usize, fusion: Fusion) -> ModelInput {
        let mut out = self.clone();
        let extra = len.saturating_sub(self.ids.len());
        out.ids.extend(std::iter::repeat(PAD_ID).take(extra));
        out.mask.extend(std::iter::repeat(0).take(extra));
        if fusion == Fusion::Add {
            if let Some(g) = &self.gaze {
                out.gaze = Some(Mat::vstack(&[g, &Mat::zeros(extra, g.cols())]));
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RewardOutput {
    pub reward: f64,
}

#[derive(Clone, Debug)]
struct BlockCache {
    x: Mat,
    ln1: LayerNormCache,
    a: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    probs: Vec<Mat>,
    o: Mat,
    ln2: LayerNormCache,
    b: Mat,
    u: Mat,
    h: Mat,
}

#[derive(Clone, Debug)]
enum ContentCache {
    Embedded,
    Text {
        ids: Vec<u32>,
    },
    Concat {
        ids: Vec<u32>,
        gaze_rows: usize,
        projector: ProjectorCache,
    },
    Add {
        ids: Vec<u32>,
        projector: ProjectorCache,
    },
}

/// Saved activations of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    len: usize,
    blocks: Vec<BlockCache>,
    top: Mat,
    final_ln: LayerNormCache,
    z: Vec<f64>,
    content: ContentCache,
}

impl ForwardCache {
    /// Hidden states entering each block, plus the output of the last one.
    pub fn hidden_states(&self) -> Vec<&Mat> {
        let mut out: Vec<&Mat> = self.blocks.iter().map(|b| &b.x).collect();
        out.push(&self.top);
        out
    }
}

fn block_forward(p: &BlockParams, x: Mat, mask: &[u8], n_heads: usize) -> (Mat, BlockCache) {
    let (t_len, d) = x.shape();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (a, ln1) = layer_norm(&x, p.ln1_gain.as_slice(), p.ln1_shift.as_slice(), LN_EPS);
    let q = affine(&a, &p.wq, &p.bq);
    let k = affine(&a, &p.wk, &p.bk);
    let v = affine(&a, &p.wv, &p.bv);
    let mut o = Mat::zeros(t_len, d);
    let mut probs = Vec::with_capacity(n_heads);
    let mut scores = vec![0.0; t_len];
    for hd in 0..n_heads {
        let cols = hd * dh..(hd + 1) * dh;
        let mut pm = Mat::zeros(t_len, t_len);
        for i in 0..t_len {
            let qi = &q.row(i)[cols.clone()];
            let mut max = f64::NEG_INFINITY;
            for j in 0..=i {
                if mask[j] == 1 {
                    let s = dot(qi, &k.row(j)[cols.clone()]) * scale;
                    scores[j] = s;
                    max = max.max(s);
                }
            }
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut total = 0.0;
            let prow = pm.row_mut(i);
            for j in 0..=i {
                if mask[j] == 1 {
                    let e = (scores[j] - max).exp();
                    prow[j] = e;
                    total += e;
                }
            }
            for pj in prow[..=i].iter_mut() {
                *pj /= total;
            }
            let orow = &mut o.row_mut(i)[cols.clone()];
            for j in 0..=i {
                let pij = pm.get(i, j);
                if pij != 0.0 {
                    for (oc, vc) in orow.iter_mut().zip(&v.row(j)[cols.clone()]) {
                        *oc += pij * vc;
                    }
                }
            }
        }
        probs.push(pm);
    }
    let mut x1 = affine(&o, &p.wo, &p.bo);
    x1.add_assign(&x);
    let (b, ln2) = layer_norm(&x1, p.ln2_gain.as_slice(), p.ln2_shift.as_slice(), LN_EPS);
    let u = affine(&b, &p.ff1_w, &p.ff1_b);
    let h = u.map(|v| v.max(0.0));
    let mut x2 = affine(&h, &p.ff2_w, &p.ff2_b);
    x2.add_assign(&x1);
    let cache = BlockCache {
        x,
        ln1,
        a,
        q,
        k,
        v,
        probs,
        o,
        ln2,
        b,
        u,
        h,
    };
    (x2, cache)
}

fn block_backward(p: &BlockParams, c: &BlockCache, dx2: Mat, g: &mut BlockParams, n_heads: usize) -> Mat {
    let (t_len, d) = c.x.shape();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let mut dhid = affine_backward(&c.h, &p.ff2_w, &dx2, &mut g.ff2_w, &mut g.ff2_b);
    for (gv, u) in dhid.as_mut_slice().iter_mut().zip(c.u.as_slice()) {
        if *u <= 0.0 {
            *gv = 0.0;
        }
    }
    let db = affine_backward(&c.b, &p.ff1_w, &dhid, &mut g.ff1_w, &mut g.ff1_b);
    let mut dx1 = layer_norm_backward(
        &db,
        &c.ln2,
        p.ln2_gain.as_slice(),
        g.ln2_gain.as_mut_slice(),
        g.ln2_shift.as_mut_slice(),
    );
    dx1.add_assign(&dx2);

    let d_o = affine_backward(&c.o, &p.wo, &dx1, &mut g.wo, &mut g.bo);
    let mut dq = Mat::zeros(t_len, d);
    let mut dk = Mat::zeros(t_len, d);
    let mut dv = Mat::zeros(t_len, d);
    let mut dp = vec![0.0; t_len];
    for (hd, pm) in c.probs.iter().enumerate() {
        let cols = hd * dh..(hd + 1) * dh;
        for i in 0..t_len {
            let doi = &d_o.row(i)[cols.clone()];
            let prow = pm.row(i);
            let mut weighted = 0.0;
            for j in 0..=i {
                if prow[j] != 0.0 {
                    dp[j] = dot(doi, &c.v.row(j)[cols.clone()]);
                    weighted += prow[j] * dp[j];
                    for (dvc, doc) in dv.row_mut(j)[cols.clone()].iter_mut().zip(doi) {
                        *dvc += prow[j] * doc;
                    }
                }
            }
            for j in 0..=i {
                if prow[j] == 0.0 {
                    continue;
                }
                let ds = prow[j] * (dp[j] - weighted) * scale;
                for (dqc, kc) in dq.row_mut(i)[cols.clone()].iter_mut().zip(&c.k.row(j)[cols.clone()]) {
                    *dqc += ds * kc;
                }
                for (dkc, qc) in dk.row_mut(j)[cols.clone()].iter_mut().zip(&c.q.row(i)[cols.clone()]) {
                    *dkc += ds * qc;
                }
            }
        }
    }
    let mut da = affine_backward(&c.a, &p.wq, &dq, &mut g.wq, &mut g.bq);
    da.add_assign(&affine_backward(&c.a, &p.wk, &dk, &mut g.wk, &mut g.bk));
    da.add_assign(&affine_backward(&c.a, &p.wv, &dv, &mut g.wv, &mut g.bv));
    let mut dx = layer_norm_backward(
        &da,
        &c.ln1,
        p.ln1_gain.as_slice(),
        g.ln1_gain.as_mut_slice(),
        g.ln1_shift.as_mut_slice(),
    );
    dx.add_assign(&dx1);
    dx
}

/// Runs the transformer over fused content embeddings. The sequence is cut
/// after its last unmasked position, so trailing padding has no effect.
fn trunk_forward(
    params: &RewardModelParams,
    content: &Mat,
    mask: &[u8],
    cache_content: ContentCache,
) -> Result<(f64, ForwardCache)> {
    let cfg = &params.config;
    if content.rows() != mask.len() {
        return Err(Error::Length {
            what: "mask vs embedding rows",
            expected: content.rows(),
            actual: mask.len(),
        });
    }
    if content.cols() != cfg.d_model {
        return Err(Error::Length {
            what: "embedding width",
            expected: cfg.d_model,
            actual: content.cols(),
        });
    }
    if mask.len() > cfg.max_positions {
        return Err(Error::Length {
            what: "sequence length vs positional table",
            expected: cfg.max_positions,
            actual: mask.len(),
        });
    }
    let readout = mask
        .iter()
        .rposition(|&m| m == 1)
        .ok_or_else(|| Error::Shape("sequence has no unmasked position".into()))?;
    let len = readout + 1;
    let mut x = content.slice_rows(0, len);
    for t in 0..len {
        for (a, p) in x.row_mut(t).iter_mut().zip(params.pos_emb.row(t)) {
            *a += p;
        }
    }
    let mask = mask[..len].to_vec();
    let mut blocks = Vec::with_capacity(params.blocks.len());
    for (i, b) in params.blocks.iter().enumerate() {
        let (next, c) = block_forward(b, x, &mask, cfg.n_heads);
        if !next.all_finite() {
            return Err(Error::NonFinite(format!("activations after block {i}")));
        }
        blocks.push(c);
        x = next;
    }
    let last = x.slice_rows(readout, len);
    let (zm, final_ln) = layer_norm(&last, params.final_gain.as_slice(), params.final_shift.as_slice(), LN_EPS);
    let z = zm.into_vec();
    let reward = dot(&z, params.head_w.as_slice()) + params.head_b.as_slice()[0];
    if !reward.is_finite() {
        return Err(Error::NonFinite("reward".into()));
    }
    Ok((
        reward,
        ForwardCache {
            len,
            blocks,
            top: x,
            final_ln,
            z,
            content: cache_content,
        },
    ))
}

/// Scores already fused embeddings (positions are added here).
pub fn forward_reward(fused: &FusedSequence, params: &RewardModelParams) -> Result<RewardOutput> {
    trunk_forward(params, &fused.embeddings, &fused.attention_mask, ContentCache::Embedded)
        .map(|(reward, _)| RewardOutput { reward })
}

fn embed_tokens(params: &RewardModelParams, ids: &[u32]) -> Result<Mat> {
    let v = params.config.vocab_size;
    let d = params.config.d_model;
    let mut out = Mat::zeros(ids.len(), d);
    for (t, &id) in ids.iter().enumerate() {
        if id as usize >= v {
            return Err(Error::Shape(format!("token id {id} outside vocabulary of {v}")));
        }
        out.row_mut(t).copy_from_slice(params.tok_emb.row(id as usize));
    }
    Ok(out)
}

/// Token lookup, projection and fusion.
pub fn fuse_input<R: Rng>(
    params: &RewardModelParams,
    input: &ModelInput,
    mode: Mode,
    rng: &mut R,
) -> Result<FusedSequence> {
    fuse_with_cache(params, input, mode, rng).map(|(f, _)| f)
}

fn fuse_with_cache<R: Rng>(
    params: &RewardModelParams,
    input: &ModelInput,
    mode: Mode,
    rng: &mut R,
) -> Result<(FusedSequence, ContentCache)> {
    if input.mask.len() != input.ids.len() {
        return Err(Error::Length {
            what: "mask vs token ids",
            expected: input.ids.len(),
            actual: input.mask.len(),
        });
    }
    let text = embed_tokens(params, &input.ids)?;
    let ids = input.ids.clone();
    let fusion = params.config.fusion;
    if fusion == Fusion::Baseline {
        return Ok((FusedSequence::text_only(text, &input.mask)?, ContentCache::Text { ids }));
    }
    let gaze = input
        .gaze
        .as_ref()
        .ok_or_else(|| Error::Feature(format!("{fusion} fusion needs gaze features")))?;
    let projector = params
        .projector
        .as_ref()
        .ok_or_else(|| Error::Config("model has no gaze projector".into()))?;
    let (g, pc) = projector_forward(gaze, projector, mode, rng)?;
    match fusion {
        Fusion::Concat => {
            let open = params.tok_emb.row(params.config.eye_open_id as usize);
            let close = params.tok_emb.row(params.config.eye_close_id as usize);
            let fused = fuse_concat(&g, &text, &input.mask, (open, close))?;
            let gaze_rows = g.rows();
            Ok((
                fused,
                ContentCache::Concat {
                    ids,
                    gaze_rows,
                    projector: pc,
                },
            ))
        }
        _ => Ok((fuse_add(&g, &text, &input.mask)?, ContentCache::Add { ids, projector: pc })),
    }
}

/// Full forward pass keeping what the backward pass needs.
pub fn forward_train<R: Rng>(
    params: &RewardModelParams,
    input: &ModelInput,
    mode: Mode,
    rng: &mut R,
) -> Result<(f64, ForwardCache)> {
    let (fused, content) = fuse_with_cache(params, input, mode, rng)?;
    trunk_forward(params, &fused.embeddings, &fused.attention_mask, content)
}

/// Deterministic evaluation-mode score.
pub fn score(params: &RewardModelParams, input: &ModelInput) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    forward_train(params, input, Mode::Eval, &mut rng).map(|(r, _)| r)
}

/// Right-pads every input to the longest one and scores each.
pub fn score_batch(params: &RewardModelParams, inputs: &[ModelInput]) -> Result<Vec<f64>> {
    let len = inputs.iter().map(|i| i.ids.len()).max().unwrap_or(0);
    inputs
        .iter()
        .map(|i| score(params, &i.padded(len, params.config.fusion)))
        .collect()
}

fn add_row(m: &mut Mat, r: usize, v: &[f64]) {
    for (a, b) in m.row_mut(r).iter_mut().zip(v) {
        *a += b;
    }
}

/// Accumulates `dreward · ∂reward/∂θ` into `grads`.
pub fn backward(params: &RewardModelParams, cache: &ForwardCache, dreward: f64, grads: &mut RewardModelParams) {
    let d = params.config.d_model;
    let len = cache.len;
    for (gh, z) in grads.head_w.as_mut_slice().iter_mut().zip(&cache.z) {
        *gh += dreward * z;
    }
    grads.head_b.as_mut_slice()[0] += dreward;
    let dz = Mat::from_vec(1, d, params.head_w.as_slice().iter().map(|w| w * dreward).collect());
    let dlast = layer_norm_backward(
        &dz,
        &cache.final_ln,
        params.final_gain.as_slice(),
        grads.final_gain.as_mut_slice(),
        grads.final_shift.as_mut_slice(),
    );
    let mut dx = Mat::zeros(len, d);
    dx.row_mut(len - 1).copy_from_slice(dlast.row(0));
    for ((p, c), g) in params
        .blocks
        .iter()
        .zip(&cache.blocks)
        .zip(grads.blocks.iter_mut())
        .rev()
    {
        dx = block_backward(p, c, dx, g, params.config.n_heads);
    }
    for t in 0..len {
        add_row(&mut grads.pos_emb, t, dx.row(t));
    }
    match &cache.content {
        ContentCache::Embedded => {}
        ContentCache::Text { ids } => {
            for (t, &id) in ids.iter().take(len).enumerate() {
                add_row(&mut grads.tok_emb, id as usize, dx.row(t));
            }
        }
        ContentCache::Concat {
            ids,
            gaze_rows,
            projector,
        } => {
            let w = *gaze_rows;
            add_row(&mut grads.tok_emb, params.config.eye_open_id as usize, dx.row(0));
            add_row(&mut grads.tok_emb, params.config.eye_close_id as usize, dx.row(w + 1));
            for (t, &id) in ids.iter().enumerate().take(len.saturating_sub(w + 2)) {
                add_row(&mut grads.tok_emb, id as usize, dx.row(w + 2 + t));
            }
            if let (Some(p), Some(g)) = (&params.projector, grads.projector.as_mut()) {
                projector_backward(projector, p, &dx.slice_rows(1, w + 1), g);
            }
        }
        ContentCache::Add { ids, projector } => {
            for (t, &id) in ids.iter().take(len).enumerate() {
                add_row(&mut grads.tok_emb, id as usize, dx.row(t));
            }
            let mut dg = Mat::zeros(ids.len(), d);
            for t in 0..len {
                dg.row_mut(t).copy_from_slice(dx.row(t));
            }
            if let (Some(p), Some(g)) = (&params.projector, grads.projector.as_mut()) {
                projector_backward(projector, p, &dg, g);
            }
        }
    }
}

/// `exp(r_w) / (exp(r_w) + exp(r_l))`, evaluated as a logistic of the
/// difference.
pub fn preference_prob(r_w: f64, r_l: f64) -> f64 {
    sigmoid(r_w - r_l)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `−log σ(r_w − r_l)`.
pub fn bt_loss(r_w: f64, r_l: f64) -> f64 {
    softplus(r_l - r_w)
}

/// Derivative of [`bt_loss`] with respect to `r_w` (the one for `r_l` is its
/// negation).
pub fn bt_loss_grad(r_w: f64, r_l: f64) -> f64 {
    -sigmoid(r_l - r_w)
}

/// Seeds the dropout stream of one forward pass.
pub fn dropout_rng(seed: u64, step: u64, pair: u64, side: u64) -> ChaCha8Rng {
    let mut h = seed;
    for v in [step, pair, side] {
        h = splitmix(h ^ splitmix(v));
    }
    ChaCha8Rng::seed_from_u64(h)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A (chosen, rejected) pair of model inputs.
pub type InputPair = (ModelInput, ModelInput);

/// Mean pairwise loss of a batch and, when `grads` is given, its gradient.
///
/// Dropout streams come from `dropout_rng(seed, step, index, side)`.
pub fn batch_loss(
    params: &RewardModelParams,
    batch: &[&InputPair],
    mode: Mode,
    seed: u64,
    step: u64,
    mut grads: Option<&mut RewardModelParams>,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for (i, (chosen, rejected)) in batch.iter().map(|p| (&p.0, &p.1)).enumerate() {
        let mut rw_rng = dropout_rng(seed, step, i as u64, 0);
        let mut rl_rng = dropout_rng(seed, step, i as u64, 1);
        let (rw, cw) = forward_train(params, chosen, mode, &mut rw_rng)?;
        let (rl, cl) = forward_train(params, rejected, mode, &mut rl_rng)?;
        total += bt_loss(rw, rl);
        if let Some(g) = grads.as_deref_mut() {
            let dw = bt_loss_grad(rw, rl) * scale;
            backward(params, &cw, dw, g);
            backward(params, &cl, -dw, g);
        }
    }
    Ok(total * scale)
}

/// Largest relative gradient error of one parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupCheck {
    pub max_rel_error: f64,
    pub worst: String,
    pub checked: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub eps: f64,
    pub groups: BTreeMap<ParamGroup, GroupCheck>,
    /// Embedding rows of tokens absent from the batch that received a
    /// non-zero analytic gradient.
    pub leaking_rows: Vec<usize>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.groups.values().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.leaking_rows.is_empty() && self.groups.values().all(|g| g.max_rel_error < tol)
    }

    pub fn render(&self, tol: f64) -> String {
        let mut out = format!("{:<16} {:>10} {:>14}  {:<6} worst\n", "group", "checked", "max rel err", "status");
        for (g, c) in &self.groups {
            out.push_str(&format!(
                "{:<16} {:>10} {:>14.3e}  {:<6} {}\n",
                g.to_string(),
                c.checked,
                c.max_rel_error,
                if c.max_rel_error < tol { "ok" } else { "FAIL" },
                c.worst
            ));
        }
        out.push_str(&format!(
            "absent embedding rows with non-zero gradient: {}\n",
            self.leaking_rows.len()
        ));
        out
    }
}

/// Seeded random pairs that fit `config`. Every sequence starts with a
/// special token other than the gaze markers and carries gaze rows when the
/// fusion needs them.
pub fn random_batch(config: &ModelConfig, pairs: usize, seed: u64) -> Vec<InputPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let specials: Vec<u32> = (1..config.special_rows as u32)
        .filter(|&i| i != config.eye_open_id && i != config.eye_close_id)
        .collect();
    let budget = match config.fusion {
        Fusion::Concat => config.max_positions.saturating_sub(2) / 2,
        _ => config.max_positions,
    }
    .max(2);
    let input = |rng: &mut ChaCha8Rng| {
        let n = rng.gen_range(2..=budget.min(6));
        let mut ids = vec![specials.get(rng.gen_range(0..specials.len().max(1))).copied().unwrap_or(1)];
        ids.extend((1..n).map(|_| rng.gen_range(config.special_rows as u32..config.vocab_size as u32)));
        let rows = match config.fusion {
            Fusion::Baseline => return ModelInput::text(ids),
            Fusion::Concat => rng.gen_range(1..=budget.min(5)),
            Fusion::Add => ids.len(),
        };
        let f = config.feature_width;
        let gaze = Mat::from_vec(rows, f, (0..rows * f).map(|_| rng.gen_range(-1.0..1.0)).collect());
        ModelInput::with_gaze(ids, gaze)
    };
    (0..pairs).map(|_| (input(&mut rng), input(&mut rng))).collect()
}

/// Compares analytic gradients of the mean batch loss (evaluation mode)
/// against central differences for every parameter.
///
/// Relative error is `|a − n| / max(|a|, |n|, floor)`.
pub fn grad_check(params: &RewardModelParams, batch: &[InputPair], eps: f64, floor: f64) -> Result<GradCheckReport> {
    let refs: Vec<&InputPair> = batch.iter().collect();
    let mut grads = params.zeros_like();
    batch_loss(params, &refs, Mode::Eval, 0, 0, Some(&mut grads))?;

    let mut present = vec![false; params.config.vocab_size];
    for (a, b) in batch {
        for id in a.ids.iter().zip(&a.mask).chain(b.ids.iter().zip(&b.mask)).filter(|(_, &m)| m == 1).map(|(i, _)| *i) {
            present[id as usize] = true;
        }
        if params.config.fusion == Fusion::Concat {
            present[params.config.eye_open_id as usize] = true;
            present[params.config.eye_close_id as usize] = true;
        }
    }
    let d = params.config.d_model;
    let leaking_rows = (0..params.config.vocab_size)
        .filter(|&r| !present[r] && grads.tok_emb.row(r).iter().any(|&g| g != 0.0))
        .collect();

    let specs = params.specs();
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.as_slice().to_vec()).collect();
    let mut groups: BTreeMap<ParamGroup, GroupCheck> = BTreeMap::new();
    let mut probe = params.clone();
    for (ti, spec) in specs.iter().enumerate() {
        for i in 0..analytic[ti].len() {
            let orig = probe.tensors()[ti].as_slice()[i];
            probe.tensors_mut()[ti].as_mut_slice()[i] = orig + eps;
            let plus = batch_loss(&probe, &refs, Mode::Eval, 0, 0, None)?;
            probe.tensors_mut()[ti].as_mut_slice()[i] = orig - eps;
            let minus = batch_loss(&probe, &refs, Mode::Eval, 0, 0, None)?;
            probe.tensors_mut()[ti].as_mut_slice()[i] = orig;
            let num = (plus - minus) / (2.0 * eps);
            let ana = analytic[ti][i];
            let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(floor);
            let group = if ti == 0 && i / d < params.config.special_rows {
                ParamGroup::SpecialTokens
            } else {
                spec.group
            };
            let entry = groups.entry(group).or_insert(GroupCheck {
                max_rel_error: 0.0,
                worst: String::new(),
                checked: 0,
            });
            entry.checked += 1;
            if entry.worst.is_empty() || rel > entry.max_rel_error {
                entry.max_rel_error = rel;
                entry.worst = format!("{}[{}]", spec.name, i);
            }
        }
    }
    Ok(GradCheckReport {
        eps,
        groups,
        leaking_rows,
    })
}
