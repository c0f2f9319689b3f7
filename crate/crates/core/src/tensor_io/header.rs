use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{ImageSize, PixelRect};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewKind {
    /// Only the downscaled global image, `a²` visual tokens.
    Global,
    /// Global view followed by `b` local crops, `a²·(b+1)` visual tokens.
    GlobalLocal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Value,
    KeyNoRope,
}

impl FeatureKind {
    pub const ALL: [FeatureKind; 2] = [FeatureKind::Value, FeatureKind::KeyNoRope];

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureKind::Value => "value",
            FeatureKind::KeyNoRope => "key_no_rope",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionType {
    Type1,
    Type2,
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalDims {
    pub h: usize,
    pub w: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetMeta {
    pub target_id: u32,
    pub surface_text: String,
    /// Number of text tokens describing the target.
    pub token_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionMeta {
    pub question_text: String,
    pub question_type: QuestionType,
    #[serde(default)]
    pub answer_options: Vec<String>,
    #[serde(default)]
    pub gt_answer: Option<String>,
    #[serde(default)]
    pub gt_boxes: Option<Vec<PixelRect>>,
}

impl Default for QuestionMeta {
    fn default() -> Self {
        Self {
            question_text: String::new(),
            question_type: QuestionType::Unknown,
            answer_options: Vec::new(),
            gt_answer: None,
            gt_boxes: None,
        }
    }
}

/// Location of one tensor in the payload; offsets are relative to the payload start.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
    pub byte_length: u64,
}

impl TensorEntry {
    pub fn end(&self) -> u64 {
        self.byte_offset + self.byte_length
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpHeader {
    pub format_version: u32,
    pub model_id: String,
    pub view_kind: ViewKind,
    pub grid_size_a: usize,
    pub crop_count_b: usize,
    #[serde(default)]
    pub local_dims: Option<LocalDims>,
    pub hidden_dim: usize,
    pub layers: Vec<usize>,
    pub feature_kind: FeatureKind,
    pub image_size: ImageSize,
    pub targets: Vec<TargetMeta>,
    pub question: QuestionMeta,
    #[serde(default)]
    pub tensor_index: Vec<TensorEntry>,
    /// Free-form provenance (map settings, generator parameters).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub annotations: BTreeMap<String, serde_json::Value>,
}

/// A header invariant that failed. Every variant is a distinct rejection reason.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Violation {
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("layers empty")]
    LayersEmpty,
    #[error("layers not increasing")]
    LayersNotIncreasing,
    #[error("grid size must be positive")]
    ZeroGridSize,
    #[error("hidden dim must be positive")]
    ZeroHiddenDim,
    #[error("image size must be positive")]
    ZeroImageSize,
    #[error("crop count {b} invalid for view kind {view:?}")]
    CropCount { view: ViewKind, b: usize },
    #[error("local dims missing for global_local view")]
    LocalDimsMissing,
    #[error("local dims given for global view")]
    LocalDimsUnexpected,
    #[error("local dims {h}x{w} do not hold a²·b = {expected} tokens")]
    LocalDimsProduct { h: usize, w: usize, expected: usize },
    #[error("target token count must be at least 1")]
    ZeroTokenCount,
    #[error("duplicate target id {0}")]
    DuplicateTargetId(u32),
    #[error("ground-truth box {0:?} lies outside the image")]
    GtBoxOutsideImage(PixelRect),
    #[error("duplicate tensor name")]
    DuplicateTensor,
    #[error("byte length {actual} does not match shape (expected {expected})")]
    TensorLength { expected: u64, actual: u64 },
    #[error("byte offset {0} not 64-byte aligned")]
    TensorMisaligned(u64),
    #[error("tensor overlaps `{0}`")]
    TensorOverlap(String),
    #[error("tensor ends at {end} beyond payload of {payload} bytes")]
    TensorOutOfBounds { end: u64, payload: u64 },
    #[error("shape {actual:?} inconsistent with geometry (expected {expected:?})")]
    TensorShape {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("tensor refers to layer {0} not listed in layers")]
    UnknownLayer(usize),
    #[error("tensor refers to unknown target {0}")]
    UnknownTarget(u32),
}

impl Violation {
    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            Violation::UnsupportedVersion(_) => "unsupported_version",
            Violation::LayersEmpty => "layers_empty",
            Violation::LayersNotIncreasing => "layers_not_increasing",
            Violation::ZeroGridSize => "zero_grid_size",
            Violation::ZeroHiddenDim => "zero_hidden_dim",
            Violation::ZeroImageSize => "zero_image_size",
            Violation::CropCount { .. } => "crop_count",
            Violation::LocalDimsMissing => "local_dims_missing",
            Violation::LocalDimsUnexpected => "local_dims_unexpected",
            Violation::LocalDimsProduct { .. } => "local_dims_product",
            Violation::ZeroTokenCount => "zero_token_count",
            Violation::DuplicateTargetId(_) => "duplicate_target_id",
            Violation::GtBoxOutsideImage(_) => "gt_box_outside_image",
            Violation::DuplicateTensor => "duplicate_tensor",
            Violation::TensorLength { .. } => "tensor_length",
            Violation::TensorMisaligned(_) => "tensor_misaligned",
            Violation::TensorOverlap(_) => "tensor_overlap",
            Violation::TensorOutOfBounds { .. } => "tensor_out_of_bounds",
            Violation::TensorShape { .. } => "tensor_shape",
            Violation::UnknownLayer(_) => "unknown_layer",
            Violation::UnknownTarget(_) => "unknown_target",
        }
    }
}

/// A violation together with the header field it concerns.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid header field `{field}`: {violation}")]
pub struct InvariantError {
    pub field: String,
    pub violation: Violation,
}

fn bad(field: impl Into<String>, violation: Violation) -> InvariantError {
    InvariantError {
        field: field.into(),
        violation,
    }
}

/// Role of a tensor, decoded from its name.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorRole {
    Visual {
        kind: FeatureKind,
        layer: usize,
    },
    Target {
        kind: FeatureKind,
        target_id: u32,
        layer: usize,
    },
    RelevanceMap {
        target_id: u32,
    },
    Other,
}

impl TensorRole {
    pub fn parse(name: &str) -> TensorRole {
        let parts: Vec<&str> = name.split('/').collect();
        match parts.as_slice() {
            ["relevance_map", id] => {
                id.parse()
                    .map_or(TensorRole::Other, |target_id| TensorRole::RelevanceMap {
                        target_id,
                    })
            }
            [kind, "visual", layer] => match (FeatureKind::parse(kind), layer.parse()) {
                (Some(kind), Ok(layer)) => TensorRole::Visual { kind, layer },
                _ => TensorRole::Other,
            },
            [kind, "target", id, layer] => {
                match (FeatureKind::parse(kind), id.parse(), layer.parse()) {
                    (Some(kind), Ok(target_id), Ok(layer)) => TensorRole::Target {
                        kind,
                        target_id,
                        layer,
                    },
                    _ => TensorRole::Other,
                }
            }
            _ => TensorRole::Other,
        }
    }
}

pub fn visual_tensor_name(kind: FeatureKind, layer: usize) -> String {
    format!("{kind}/visual/{layer}")
}

pub fn target_tensor_name(kind: FeatureKind, target_id: u32, layer: usize) -> String {
    format!("{kind}/target/{target_id}/{layer}")
}

pub fn relevance_tensor_name(target_id: u32) -> String {
    format!("relevance_map/{target_id}")
}

impl DumpHeader {
    /// Visual tokens per layer implied by the view geometry.
    pub fn visual_token_count(&self) -> usize {
        let a2 = self.grid_size_a * self.grid_size_a;
        match self.view_kind {
            ViewKind::Global => a2,
            ViewKind::GlobalLocal => a2 * (self.crop_count_b + 1),
        }
    }

    pub fn target(&self, target_id: u32) -> Option<&TargetMeta> {
        self.targets.iter().find(|t| t.target_id == target_id)
    }

    pub fn tensor_entry(&self, name: &str) -> Option<&TensorEntry> {
        self.tensor_index.iter().find(|e| e.name == name)
    }

    /// Checks every invariant that does not depend on the file length.
    pub fn validate(&self) -> Result<(), InvariantError> {
        if self.format_version != FORMAT_VERSION {
            return Err(bad(
                "format_version",
                Violation::UnsupportedVersion(self.format_version),
            ));
        }
        if self.layers.is_empty() {
            return Err(bad("layers", Violation::LayersEmpty));
        }
        if self.layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(bad("layers", Violation::LayersNotIncreasing));
        }
        if self.grid_size_a == 0 {
            return Err(bad("grid_size_a", Violation::ZeroGridSize));
        }
        if self.hidden_dim == 0 {
            return Err(bad("hidden_dim", Violation::ZeroHiddenDim));
        }
        if self.image_size.width == 0 || self.image_size.height == 0 {
            return Err(bad("image_size", Violation::ZeroImageSize));
        }
        self.validate_view()?;

        let mut ids = BTreeSet::new();
        for (i, t) in self.targets.iter().enumerate() {
            if t.token_count == 0 {
                return Err(bad(
                    format!("targets[{i}].token_count"),
                    Violation::ZeroTokenCount,
                ));
            }
            if !ids.insert(t.target_id) {
                return Err(bad(
                    format!("targets[{i}].target_id"),
                    Violation::DuplicateTargetId(t.target_id),
                ));
            }
        }
        if let Some(boxes) = &self.question.gt_boxes {
            for (i, b) in boxes.iter().enumerate() {
                if b.x0 >= b.x1 || b.y0 >= b.y1 || !b.within(self.image_size) {
                    return Err(bad(
                        format!("question.gt_boxes[{i}]"),
                        Violation::GtBoxOutsideImage(*b),
                    ));
                }
            }
        }
        self.validate_tensor_index()
    }

    fn validate_view(&self) -> Result<(), InvariantError> {
        let a2 = self.grid_size_a * self.grid_size_a;
        match self.view_kind {
            ViewKind::Global => {
                if self.crop_count_b != 0 {
                    return Err(bad(
                        "crop_count_b",
                        Violation::CropCount {
                            view: self.view_kind,
                            b: self.crop_count_b,
                        },
                    ));
                }
                if self.local_dims.is_some() {
                    return Err(bad("local_dims", Violation::LocalDimsUnexpected));
                }
            }
            ViewKind::GlobalLocal => {
                if self.crop_count_b == 0 {
                    return Err(bad(
                        "crop_count_b",
                        Violation::CropCount {
                            view: self.view_kind,
                            b: 0,
                        },
                    ));
                }
                let Some(LocalDims { h, w }) = self.local_dims else {
                    return Err(bad("local_dims", Violation::LocalDimsMissing));
                };
                let expected = a2 * self.crop_count_b;
                if h * w != expected {
                    return Err(bad(
                        "local_dims",
                        Violation::LocalDimsProduct { h, w, expected },
                    ));
                }
            }
        }
        Ok(())
    }

    fn validate_tensor_index(&self) -> Result<(), InvariantError> {
        let mut names = BTreeSet::new();
        for (i, e) in self.tensor_index.iter().enumerate() {
            let field = format!("tensor_index[{i}]");
            if !names.insert(e.name.as_str()) {
                return Err(bad(field, Violation::DuplicateTensor));
            }
            let expected = e.shape.iter().product::<usize>() as u64 * 4;
            if e.byte_length != expected {
                return Err(bad(
                    field,
                    Violation::TensorLength {
                        expected,
                        actual: e.byte_length,
                    },
                ));
            }
            if e.byte_offset % super::ALIGNMENT as u64 != 0 {
                return Err(bad(field, Violation::TensorMisaligned(e.byte_offset)));
            }
            self.validate_role(&field, e)?;
        }

        let mut by_offset: Vec<&TensorEntry> = self
            .tensor_index
            .iter()
            .filter(|e| e.byte_length > 0)
            .collect();
        by_offset.sort_by_key(|e| e.byte_offset);
        for w in by_offset.windows(2) {
            if w[0].end() > w[1].byte_offset {
                let i = self
                    .tensor_index
                    .iter()
                    .position(|e| e.name == w[1].name)
                    .unwrap_or_default();
                return Err(bad(
                    format!("tensor_index[{i}]"),
                    Violation::TensorOverlap(w[0].name.clone()),
                ));
            }
        }
        Ok(())
    }

    fn validate_role(&self, field: &str, e: &TensorEntry) -> Result<(), InvariantError> {
        let d = self.hidden_dim;
        let expected = match TensorRole::parse(&e.name) {
            TensorRole::Visual { layer, .. } => {
                if self.layers.binary_search(&layer).is_err() {
                    return Err(bad(field, Violation::UnknownLayer(layer)));
                }
                vec![self.visual_token_count(), d]
            }
            TensorRole::Target {
                target_id, layer, ..
            } => {
                if self.layers.binary_search(&layer).is_err() {
                    return Err(bad(field, Violation::UnknownLayer(layer)));
                }
                let Some(t) = self.target(target_id) else {
                    return Err(bad(field, Violation::UnknownTarget(target_id)));
                };
                vec![t.token_count, d]
            }
            TensorRole::RelevanceMap { target_id } => {
                if self.target(target_id).is_none() {
                    return Err(bad(field, Violation::UnknownTarget(target_id)));
                }
                if e.shape.len() == 2 {
                    return Ok(());
                }
                vec![0, 0]
            }
            TensorRole::Other => return Ok(()),
        };
        if e.shape != expected {
            return Err(bad(
                field,
                Violation::TensorShape {
                    expected,
                    actual: e.shape.clone(),
                },
            ));
        }
        Ok(())
    }
}
