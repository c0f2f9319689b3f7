use serde::{Deserialize, Serialize};

use super::{
    consensus_multiply, pseudo_attention, rollout_aggregate_with, smooth_and_downsample, LayerMap,
    MapError, Provenance, RelevanceMap, Residual,
};
use crate::geometry::GridDims;
use crate::tensor_io::{FeatureKind, TokenDump, ViewKind};

/// Inclusive layer bounds `start..=end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerRange {
    pub start: usize,
    pub end: usize,
}

impl LayerRange {
    pub const fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelevanceConfig {
    /// `None` aggregates every layer in the dump.
    pub layer_range: Option<LayerRange>,
    pub feature_kind: FeatureKind,
    /// Gaussian sigma in grid cells; only applied to global-local dumps.
    pub sigma: f64,
    /// Block size for downsampling; only applied to global-local dumps.
    pub downsample_factor: usize,
    #[serde(default)]
    pub residual: Residual,
}

impl Default for RelevanceConfig {
    fn default() -> Self {
        Self {
            layer_range: None,
            feature_kind: FeatureKind::Value,
            sigma: 1.0,
            downsample_factor: 2,
            residual: Residual::Identity,
        }
    }
}

fn selected_layers(dump: &TokenDump, range: Option<LayerRange>) -> Result<Vec<usize>, MapError> {
    let layers = &dump.header.layers;
    let Some(LayerRange { start, end }) = range else {
        return Ok(layers.clone());
    };
    if start > end {
        return Err(MapError::EmptyLayerRange { start, end });
    }
    for bound in [start, end] {
        if layers.binary_search(&bound).is_err() {
            return Err(MapError::LayerNotInDump(bound));
        }
    }
    Ok(layers
        .iter()
        .copied()
        .filter(|l| (start..=end).contains(l))
        .collect())
}

/// Builds the relevance map of one target.
///
/// Global dumps compare against the `a × a` global tokens. Global-local dumps
/// use the local tokens, already laid out row-major as `h × w`, and finish
/// with smoothing and downsampling.
pub fn build_object_map(
    dump: &TokenDump,
    target_id: u32,
    config: &RelevanceConfig,
) -> Result<RelevanceMap, MapError> {
    let header = &dump.header;
    let target = header
        .target(target_id)
        .ok_or(MapError::UnknownTarget(target_id))?;
    let layers = selected_layers(dump, config.layer_range)?;
    let kind = config.feature_kind;

    let a2 = header.grid_size_a * header.grid_size_a;
    let (dims, token_rows) = match header.view_kind {
        ViewKind::Global => (GridDims::new(header.grid_size_a, header.grid_size_a), 0..a2),
        ViewKind::GlobalLocal => {
            let local = header
                .local_dims
                .expect("validated header has local dims for global_local");
            (
                GridDims::new(local.h, local.w),
                a2..a2 * (header.crop_count_b + 1),
            )
        }
    };

    let mut per_token = Vec::with_capacity(target.token_count);
    for token in 0..target.token_count {
        let mut per_layer = Vec::with_capacity(layers.len());
        for &layer in &layers {
            let visual = dump.visual(kind, layer)?;
            let visual = visual.slice(ndarray::s![token_rows.clone(), ..]);
            let text = dump.target_tokens(kind, target_id, layer)?;
            let map: LayerMap = pseudo_attention(text.row(token), visual, dims)?.at(layer, token);
            per_layer.push(map);
        }
        per_token.push(rollout_aggregate_with(&per_layer, config.residual)?);
    }
    let mut map = consensus_multiply(&per_token)?;
    if header.view_kind == ViewKind::GlobalLocal {
        map = smooth_and_downsample(&map, config.sigma, config.downsample_factor)?;
    }
    map.provenance = Provenance {
        layer_range: Some((layers[0], layers[layers.len() - 1])),
        feature_kind: Some(kind),
        target_ids: vec![target_id],
        smoothing: map.provenance.smoothing,
    };
    Ok(map)
}
