//! Feature/gradient stacks, per-sample metadata and ground-truth masks.

use std::collections::BTreeSet;
use std::fmt;
use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `D` spatial planes of identical `H x W` shape, stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneStack {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
    step_index: usize,
}

impl PlaneStack {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f64>,
        step_index: usize,
    ) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::ShapeMismatch(format!(
                "stack dimensions must be positive, got {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} values do not fill a {channels}x{height}x{width} stack",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(
                "stack contains non-finite values".into(),
            ));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
            step_index,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `(D, H, W)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn step_index(&self) -> usize {
        self.step_index
    }

    pub fn plane(&self, channel: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[channel * n..(channel + 1) * n]
    }

    pub fn planes(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.height * self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> Result<PlaneStack> {
        PlaneStack::new(
            self.channels,
            self.height,
            self.width,
            self.data.iter().map(|v| f(*v)).collect(),
            self.step_index,
        )
    }
}

/// Per-channel image-region features `A_c` at one denoising step.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack(pub PlaneStack);

/// Gradients of the response score with respect to a [`FeatureStack`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientStack(pub PlaneStack);

impl Deref for FeatureStack {
    type Target = PlaneStack;
    fn deref(&self) -> &PlaneStack {
        &self.0
    }
}

impl Deref for GradientStack {
    type Target = PlaneStack;
    fn deref(&self) -> &PlaneStack {
        &self.0
    }
}

/// Hidden states for the whole packed sequence, `L x D`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceFeatures {
    len: usize,
    dim: usize,
    data: Vec<f64>,
}

impl SequenceFeatures {
    pub fn new(len: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != len * dim {
            return Err(Error::ShapeMismatch(format!(
                "{} values do not fill a {len}x{dim} sequence",
                data.len()
            )));
        }
        Ok(Self { len, dim, data })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// One logged denoising step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: i64,
    /// Hooked hidden-state length at this step.
    pub seq_len: usize,
    /// One past the last image-token index; derived from the packing
    /// offsets when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub img_end: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariantLabel {
    Concise,
    Original,
    Verbose,
    Repeated,
}

impl VariantLabel {
    /// Ordered from least to most function-word redundancy.
    pub const ALL: [VariantLabel; 4] = [
        VariantLabel::Concise,
        VariantLabel::Original,
        VariantLabel::Verbose,
        VariantLabel::Repeated,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            VariantLabel::Concise => "concise",
            VariantLabel::Original => "original",
            VariantLabel::Verbose => "verbose",
            VariantLabel::Repeated => "repeated",
        }
    }
}

impl fmt::Display for VariantLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenInfo {
    pub index: usize,
    pub text: String,
    pub pos_tag: String,
    /// Member of the answer set whose logits form the attribution score.
    pub is_answer: bool,
    /// Occurrences of this token string among the response tokens.
    pub repeat_count: u32,
    /// Path of this token's own activation map, relative to the metadata file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_token_map: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskRef {
    #[serde(rename = "class")]
    pub class_name: String,
    pub path: String,
}

/// The per-sample packing record exported next to the feature files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetadata {
    pub sample_id: String,
    /// Offset of the first image token in the packed sequence.
    pub n_base: usize,
    /// Image-token grid `[H, W]`.
    pub grid: [usize; 2],
    pub hidden_dim: usize,
    pub steps: Vec<StepRecord>,
    pub tokens: Vec<TokenInfo>,
    #[serde(default)]
    pub response_text: String,
    #[serde(default)]
    pub variant_label: Option<VariantLabel>,
    #[serde(default)]
    pub mask_manifest: Vec<MaskRef>,
}

impl SampleMetadata {
    pub fn grid_h(&self) -> usize {
        self.grid[0]
    }

    pub fn grid_w(&self) -> usize {
        self.grid[1]
    }

    /// Number of image tokens, `H * W`.
    pub fn span_len(&self) -> usize {
        self.grid[0] * self.grid[1]
    }

    /// One past the last image-token index implied by the packing offsets.
    pub fn default_img_end(&self) -> usize {
        self.n_base + self.span_len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.span_len() == 0 {
            return Err(Error::Metadata(format!(
                "{}: grid {:?} is empty",
                self.sample_id, self.grid
            )));
        }
        if self.tokens.windows(2).any(|w| w[1].index <= w[0].index) {
            return Err(Error::Metadata(format!(
                "{}: token indices must be strictly increasing",
                self.sample_id
            )));
        }
        for tok in &self.tokens {
            if tok.repeat_count == 0 {
                return Err(Error::Metadata(format!(
                    "{}: token {} has repeat_count 0",
                    self.sample_id, tok.index
                )));
            }
            if tok.is_answer && tok.text.trim().is_empty() {
                return Err(Error::Metadata(format!(
                    "{}: answer token {} has empty text",
                    self.sample_id, tok.index
                )));
            }
        }
        Ok(())
    }
}

/// Binary mask of one object class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMask {
    pub class_name: String,
    /// Row-major, `true` = object pixel.
    pub mask: Vec<bool>,
}

impl ClassMask {
    pub fn area(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

/// Per-class ground-truth masks at image resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthMaskSet {
    image_size: (usize, usize),
    masks: Vec<ClassMask>,
}

impl GroundTruthMaskSet {
    pub fn new(image_size: (usize, usize), masks: Vec<ClassMask>) -> Result<Self> {
        let n = image_size.0 * image_size.1;
        if n == 0 {
            return Err(Error::ShapeMismatch("mask image size is empty".into()));
        }
        if let Some(bad) = masks.iter().find(|m| m.mask.len() != n) {
            return Err(Error::ShapeMismatch(format!(
                "mask {} has {} pixels, expected {}x{}",
                bad.class_name,
                bad.mask.len(),
                image_size.0,
                image_size.1
            )));
        }
        let names: BTreeSet<_> = masks.iter().map(|m| m.class_name.as_str()).collect();
        if names.len() != masks.len() {
            return Err(Error::Metadata("duplicate mask class names".into()));
        }
        Ok(Self { image_size, masks })
    }

    /// `(H_img, W_img)`.
    pub fn image_size(&self) -> (usize, usize) {
        self.image_size
    }

    pub fn masks(&self) -> &[ClassMask] {
        &self.masks
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    /// Union of all class masks.
    pub fn union(&self) -> Vec<bool> {
        let mut out = vec![false; self.image_size.0 * self.image_size.1];
        for m in &self.masks {
            for (o, v) in out.iter_mut().zip(&m.mask) {
                *o |= *v;
            }
        }
        out
    }
}
