//! Object relevance maps from cached token features.
//!
//! Per layer, a target text token is compared with every visual token by cosine
//! similarity. The per-layer maps are rolled out across a layer range with a
//! residual term, and the rolled-out maps of all tokens describing one target
//! are multiplied cell by cell. All arithmetic is done in `f64` in a fixed
//! order (layers ascending, cells row-major) so results are bit-reproducible.

mod build;
mod render;
mod smoothing;

use ndarray::{Array2, ArrayView1, ArrayView2, Zip};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::GridDims;
use crate::tensor_io::{DumpError, FeatureKind};

pub use build::{build_object_map, LayerRange, RelevanceConfig};
pub use render::{map_from_tensor, map_to_tensor, render_pgm};
pub use smoothing::{gaussian_kernel, smooth_and_downsample};

#[derive(Debug, Error)]
pub enum MapError {
    #[error("no maps to aggregate")]
    Empty,
    #[error("map shape {actual:?} differs from {expected:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("{tokens} visual tokens cannot be reshaped to {rows}x{cols}")]
    TokenCount {
        tokens: usize,
        rows: usize,
        cols: usize,
    },
    #[error("feature dims differ: target {target}, visual {visual}")]
    FeatureDim { target: usize, visual: usize },
    #[error("downsample factor {factor} exceeds map dims {rows}x{cols}")]
    FactorTooLarge {
        factor: usize,
        rows: usize,
        cols: usize,
    },
    #[error("invalid smoothing parameter: {0}")]
    InvalidSmoothing(String),
    #[error("layer {0} is not present in the dump")]
    LayerNotInDump(usize),
    #[error("layer range {start}..={end} is empty")]
    EmptyLayerRange { start: usize, end: usize },
    #[error("target {0} is not present in the dump")]
    UnknownTarget(u32),
    #[error(transparent)]
    Dump(#[from] DumpError),
}

/// Cosine map of one target token against the visual tokens of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerMap {
    pub values: Array2<f64>,
    pub layer_index: usize,
    pub target_token_index: usize,
}

impl LayerMap {
    pub fn at(mut self, layer_index: usize, target_token_index: usize) -> Self {
        self.layer_index = layer_index;
        self.target_token_index = target_token_index;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Smoothing {
    pub sigma: f64,
    pub downsample_factor: usize,
}

/// Where a map came from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub layer_range: Option<(usize, usize)>,
    pub feature_kind: Option<FeatureKind>,
    pub target_ids: Vec<u32>,
    pub smoothing: Option<Smoothing>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceMap {
    pub values: Array2<f64>,
    pub normalized: bool,
    pub provenance: Provenance,
}

impl RelevanceMap {
    pub fn new(values: Array2<f64>) -> Self {
        Self {
            values,
            normalized: false,
            provenance: Provenance::default(),
        }
    }

    /// Wraps `values` after min–max normalization.
    pub fn normalized(mut values: Array2<f64>) -> Self {
        normalize(&mut values);
        Self {
            values,
            normalized: true,
            provenance: Provenance::default(),
        }
    }

    pub fn dims(&self) -> GridDims {
        GridDims::new(self.values.nrows(), self.values.ncols())
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[[row, col]]
    }

    /// Row-major first cell holding the maximum.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = (0, 0);
        let mut best_v = f64::NEG_INFINITY;
        for ((r, c), &v) in self.values.indexed_iter() {
            if v > best_v {
                best_v = v;
                best = (r, c);
            }
        }
        best
    }
}

/// Min–max normalization to `[0, 1]` in place. A constant map becomes all 0.5.
pub fn normalize(values: &mut Array2<f64>) {
    let (min, max) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let span = max - min;
    if !(span.is_finite() && span > 0.0) {
        values.fill(0.5);
    } else {
        values.mapv_inplace(|v| (v - min) / span);
    }
}

fn cosine_row(
    target: ArrayView1<'_, f32>,
    target_norm: f64,
    row: ArrayView1<'_, f32>,
) -> Option<f64> {
    let mut dot = 0.0f64;
    let mut sq = 0.0f64;
    for (&t, &v) in target.iter().zip(row.iter()) {
        dot += f64::from(t) * f64::from(v);
        sq += f64::from(v) * f64::from(v);
    }
    let norm = sq.sqrt();
    (norm > 0.0 && target_norm > 0.0).then(|| dot / (target_norm * norm))
}

/// Cosine similarity between `target` and each row of `visual`, reshaped
/// row-major to `dims`. Zero-norm vectors contribute 0 and log a warning.
pub fn pseudo_attention(
    target: ArrayView1<'_, f32>,
    visual: ArrayView2<'_, f32>,
    dims: GridDims,
) -> Result<LayerMap, MapError> {
    if visual.nrows() != dims.cells() {
        return Err(MapError::TokenCount {
            tokens: visual.nrows(),
            rows: dims.rows,
            cols: dims.cols,
        });
    }
    if visual.ncols() != target.len() {
        return Err(MapError::FeatureDim {
            target: target.len(),
            visual: visual.ncols(),
        });
    }
    let target_norm = target
        .iter()
        .map(|&t| f64::from(t) * f64::from(t))
        .sum::<f64>()
        .sqrt();
    if target_norm == 0.0 {
        log::warn!("zero-norm target feature; pseudo-attention map is all zeros");
    }
    let mut zero_rows = 0usize;
    let values: Vec<f64> = visual
        .rows()
        .into_iter()
        .map(|row| {
            cosine_row(target, target_norm, row).unwrap_or_else(|| {
                zero_rows += 1;
                0.0
            })
        })
        .collect();
    if zero_rows > 0 && target_norm > 0.0 {
        log::warn!("{zero_rows} zero-norm visual tokens scored as cosine 0");
    }
    Ok(LayerMap {
        values: Array2::from_shape_vec((dims.rows, dims.cols), values).expect("sized above"),
        layer_index: 0,
        target_token_index: 0,
    })
}

fn check_shape(expected: (usize, usize), actual: (usize, usize)) -> Result<(), MapError> {
    if expected != actual {
        return Err(MapError::ShapeMismatch { expected, actual });
    }
    Ok(())
}

/// Residual term added to each per-layer map during rollout.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Residual {
    /// Identity matrix on square maps, nothing on non-square maps.
    #[default]
    Identity,
    /// No residual: a plain running average.
    None,
}

/// Running sum of `(A_k + I) / 2` over the given layers, normalized after every addition.
///
/// `I` is the identity of the map's shape; non-square maps have no identity,
/// so the residual term is dropped there and the sum is a plain average.
pub fn rollout_aggregate(per_layer: &[LayerMap]) -> Result<RelevanceMap, MapError> {
    rollout_aggregate_with(per_layer, Residual::Identity)
}

pub fn rollout_aggregate_with(
    per_layer: &[LayerMap],
    residual: Residual,
) -> Result<RelevanceMap, MapError> {
    let first = per_layer.first().ok_or(MapError::Empty)?;
    let shape = first.values.dim();
    let identity = residual == Residual::Identity && shape.0 == shape.1;
    let mut acc = Array2::<f64>::zeros(shape);
    for m in per_layer {
        check_shape(shape, m.values.dim())?;
        Zip::indexed(&mut acc)
            .and(&m.values)
            .for_each(|(r, c), a, &v| {
                let eye = if identity && r == c { 1.0 } else { 0.0 };
                *a += (v + eye) / 2.0;
            });
        normalize(&mut acc);
    }
    Ok(RelevanceMap {
        values: acc,
        normalized: true,
        provenance: Provenance {
            layer_range: Some((
                first.layer_index,
                per_layer[per_layer.len() - 1].layer_index,
            )),
            ..Provenance::default()
        },
    })
}

/// Cell-wise product of the per-token maps, normalized after every multiplication.
pub fn consensus_multiply(maps: &[RelevanceMap]) -> Result<RelevanceMap, MapError> {
    let first = maps.first().ok_or(MapError::Empty)?;
    let shape = first.values.dim();
    let mut acc = first.values.clone();
    normalize(&mut acc);
    for m in &maps[1..] {
        check_shape(shape, m.values.dim())?;
        acc.zip_mut_with(&m.values, |a, &v| *a *= v);
        normalize(&mut acc);
    }
    Ok(RelevanceMap {
        values: acc,
        normalized: true,
        provenance: first.provenance.clone(),
    })
}
