//! Gaze feature projection and the two ways of combining it with text.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gazegen::GazeFeatureMatrix;
use crate::linalg::Mat;
use crate::nn::{affine, affine_backward, layer_norm, layer_norm_backward, LayerNormCache, LN_EPS};

pub const PROJECTOR_HIDDEN: usize = 128;
pub const DEFAULT_P1: f64 = 0.1;
pub const DEFAULT_P2: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    Baseline,
    Concat,
    Add,
}

impl Fusion {
    pub fn uses_gaze(self) -> bool {
        self != Fusion::Baseline
    }
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Fusion::Baseline => "baseline",
            Fusion::Concat => "concat",
            Fusion::Add => "add",
        })
    }
}

impl FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Fusion::Baseline),
            "concat" => Ok(Fusion::Concat),
            "add" => Ok(Fusion::Add),
            other => Err(Error::Config(format!(
                "unknown fusion '{other}' (expected baseline, concat or add)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Two-layer feature projector: affine, layer norm, ReLU, dropout, affine,
/// dropout.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectorParams {
    pub w1: Mat,
    pub b1: Mat,
    pub ln_gain: Mat,
    pub ln_shift: Mat,
    pub w2: Mat,
    pub b2: Mat,
    pub p1: f64,
    pub p2: f64,
}

impl ProjectorParams {
    pub fn new<R: Rng>(f: usize, d: usize, std: f64, rng: &mut R) -> Self {
        ProjectorParams {
            w1: Mat::gaussian(f, PROJECTOR_HIDDEN, std, rng),
            b1: Mat::zeros(1, PROJECTOR_HIDDEN),
            ln_gain: Mat::filled(1, PROJECTOR_HIDDEN, 1.0),
            ln_shift: Mat::zeros(1, PROJECTOR_HIDDEN),
            w2: Mat::gaussian(PROJECTOR_HIDDEN, d, std, rng),
            b2: Mat::zeros(1, d),
            p1: DEFAULT_P1,
            p2: DEFAULT_P2,
        }
    }

    /// Every parameter zero, including the layer-norm gain.
    pub fn zeros(f: usize, d: usize) -> Self {
        ProjectorParams {
            w1: Mat::zeros(f, PROJECTOR_HIDDEN),
            b1: Mat::zeros(1, PROJECTOR_HIDDEN),
            ln_gain: Mat::zeros(1, PROJECTOR_HIDDEN),
            ln_shift: Mat::zeros(1, PROJECTOR_HIDDEN),
            w2: Mat::zeros(PROJECTOR_HIDDEN, d),
            b2: Mat::zeros(1, d),
            p1: DEFAULT_P1,
            p2: DEFAULT_P2,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = ProjectorParams::zeros(self.input_width(), self.output_width());
        z.p1 = self.p1;
        z.p2 = self.p2;
        z
    }

    pub fn input_width(&self) -> usize {
        self.w1.rows()
    }

    pub fn output_width(&self) -> usize {
        self.w2.cols()
    }

    pub fn validate(&self) -> Result<()> {
        for p in [self.p1, self.p2] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
            }
        }
        if self.w1.cols() != PROJECTOR_HIDDEN || self.w2.rows() != PROJECTOR_HIDDEN {
            return Err(Error::Shape(format!(
                "projector hidden width must be {PROJECTOR_HIDDEN}"
            )));
        }
        Ok(())
    }

    pub fn tensors(&self) -> [(&'static str, &Mat); 6] {
        [
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("ln_gain", &self.ln_gain),
            ("ln_shift", &self.ln_shift),
            ("w2", &self.w2),
            ("b2", &self.b2),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Mat); 6] {
        [
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("ln_gain", &mut self.ln_gain),
            ("ln_shift", &mut self.ln_shift),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
        ]
    }
}

/// Intermediate values kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ProjectorCache {
    x: Mat,
    ln: LayerNormCache,
    pre_relu: Mat,
    mask1: Option<Mat>,
    hidden: Mat,
    mask2: Option<Mat>,
}

fn dropout_mask<R: Rng>(rows: usize, cols: usize, p: f64, rng: &mut R) -> Mat {
    let keep = 1.0 / (1.0 - p);
    let mut m = Mat::zeros(rows, cols);
    for v in m.as_mut_slice() {
        if rng.gen::<f64>() >= p {
            *v = keep;
        }
    }
    m
}

fn apply_mask(x: &mut Mat, mask: &Mat) {
    for (a, m) in x.as_mut_slice().iter_mut().zip(mask.as_slice()) {
        *a *= m;
    }
}

pub fn projector_forward<R: Rng>(
    x: &Mat,
    p: &ProjectorParams,
    mode: Mode,
    rng: &mut R,
) -> Result<(Mat, ProjectorCache)> {
    if x.cols() != p.input_width() {
        return Err(Error::Length {
            what: "feature channels vs projector input",
            expected: p.input_width(),
            actual: x.cols(),
        });
    }
    let h1 = affine(x, &p.w1, &p.b1);
    let (pre_relu, ln) = layer_norm(&h1, p.ln_gain.as_slice(), p.ln_shift.as_slice(), LN_EPS);
    let mut hidden = pre_relu.map(|v| v.max(0.0));
    let mask1 = (mode == Mode::Train && p.p1 > 0.0)
        .then(|| dropout_mask(hidden.rows(), hidden.cols(), p.p1, rng));
    if let Some(m) = &mask1 {
        apply_mask(&mut hidden, m);
    }
    let mut out = affine(&hidden, &p.w2, &p.b2);
    let mask2 =
        (mode == Mode::Train && p.p2 > 0.0).then(|| dropout_mask(out.rows(), out.cols(), p.p2, rng));
    if let Some(m) = &mask2 {
        apply_mask(&mut out, m);
    }
    let cache = ProjectorCache {
        x: x.clone(),
        ln,
        pre_relu,
        mask1,
        hidden,
        mask2,
    };
    Ok((out, cache))
}

/// Accumulates parameter gradients for an upstream gradient `dout`.
pub fn projector_backward(cache: &ProjectorCache, p: &ProjectorParams, dout: &Mat, grads: &mut ProjectorParams) {
    let mut d = dout.clone();
    if let Some(m) = &cache.mask2 {
        apply_mask(&mut d, m);
    }
    let mut dh = affine_backward(&cache.hidden, &p.w2, &d, &mut grads.w2, &mut grads.b2);
    if let Some(m) = &cache.mask1 {
        apply_mask(&mut dh, m);
    }
    for (g, pre) in dh.as_mut_slice().iter_mut().zip(cache.pre_relu.as_slice()) {
        if *pre <= 0.0 {
            *g = 0.0;
        }
    }
    let dh1 = layer_norm_backward(
        &dh,
        &cache.ln,
        p.ln_gain.as_slice(),
        grads.ln_gain.as_mut_slice(),
        grads.ln_shift.as_mut_slice(),
    );
    cache.x.t_matmul_acc(&dh1, &mut grads.w1);
    dh1.sum_rows_into(grads.b1.as_mut_slice());
}

/// Projects token-level gaze features into the embedding width.
pub fn project_features<R: Rng>(
    feats: &GazeFeatureMatrix,
    params: &ProjectorParams,
    mode: Mode,
    rng: &mut R,
) -> Result<Mat> {
    projector_forward(&feats.values, params, mode, rng).map(|(out, _)| out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    Text,
    Concat { gaze_rows: usize },
    Add,
}

/// Input embeddings of the reward model after fusion.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedSequence {
    pub embeddings: Mat,
    pub attention_mask: Vec<u8>,
    pub layout: Layout,
    /// For concatenation: `⟨eye⟩`, the gaze rows and `⟨/eye⟩`.
    pub gaze_span: Option<Range<usize>>,
}

impl FusedSequence {
    pub fn text_only(text_emb: Mat, text_mask: &[u8]) -> Result<Self> {
        check_mask(&text_emb, text_mask)?;
        Ok(FusedSequence {
            embeddings: text_emb,
            attention_mask: text_mask.to_vec(),
            layout: Layout::Text,
            gaze_span: None,
        })
    }

    pub fn len(&self) -> usize {
        self.attention_mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attention_mask.is_empty()
    }
}

fn check_mask(emb: &Mat, mask: &[u8]) -> Result<()> {
    if emb.rows() != mask.len() {
        return Err(Error::Length {
            what: "mask vs embedding rows",
            expected: emb.rows(),
            actual: mask.len(),
        });
    }
    Ok(())
}

/// `⟨eye⟩ ∘ gaze ∘ ⟨/eye⟩ ∘ text`, with the gaze part fully unmasked.
pub fn fuse_concat(
    gaze_emb: &Mat,
    text_emb: &Mat,
    text_mask: &[u8],
    special_embs: (&[f64], &[f64]),
) -> Result<FusedSequence> {
    let d = text_emb.cols();
    let w = gaze_emb.rows();
    let widths = [gaze_emb.cols(), special_embs.0.len(), special_embs.1.len()];
    if let Some(&bad) = widths.iter().find(|&&c| c != d && !(c == 0 && w == 0)) {
        return Err(Error::Length {
            what: "embedding width",
            expected: d,
            actual: bad,
        });
    }
    check_mask(text_emb, text_mask)?;
    let open = Mat::from_vec(1, d, special_embs.0.to_vec());
    let close = Mat::from_vec(1, d, special_embs.1.to_vec());
    let gaze = if w == 0 { Mat::zeros(0, d) } else { gaze_emb.clone() };
    let embeddings = Mat::vstack(&[&open, &gaze, &close, text_emb]);
    let mut attention_mask = vec![1u8; w + 2];
    attention_mask.extend_from_slice(text_mask);
    Ok(FusedSequence {
        embeddings,
        attention_mask,
        layout: Layout::Concat { gaze_rows: w },
        gaze_span: Some(0..w + 2),
    })
}

/// Elementwise sum of remapped gaze embeddings and text embeddings.
pub fn fuse_add(gaze_emb: &Mat, text_emb: &Mat, text_mask: &[u8]) -> Result<FusedSequence> {
    if gaze_emb.shape() != text_emb.shape() {
        return Err(Error::Shape(format!(
            "gaze embeddings {:?} vs text embeddings {:?}",
            gaze_emb.shape(),
            text_emb.shape()
        )));
    }
    check_mask(text_emb, text_mask)?;
    let mut embeddings = text_emb.clone();
    embeddings.add_assign(gaze_emb);
    Ok(FusedSequence {
        embeddings,
        attention_mask: text_mask.to_vec(),
        layout: Layout::Add,
        gaze_span: None,
    })
}
