//! Region-of-interest proposals on a relevance map.
//!
//! Anchors are the highest-scoring cells that keep a minimum Euclidean
//! distance from each other. Each anchor seeds a square ROI that grows
//! symmetrically while its mean relevance stays above a threshold, up to a
//! maximum side length. Greedy NMS then removes redundant ROIs. Ties are
//! always broken row-major (smaller row first, then smaller column).

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{grid_to_pixels, GridDims, GridRect, ImageSize, PixelRect};
use crate::relevance_map::RelevanceMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub row: usize,
    pub col: usize,
    pub score: f64,
}

impl Anchor {
    fn dist_sq(&self, other: &Anchor) -> f64 {
        let dr = self.row as f64 - other.row as f64;
        let dc = self.col as f64 - other.col as f64;
        dr * dr + dc * dc
    }
}

/// Descending score, then row-major position.
fn by_rank(a: &Anchor, b: &Anchor) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.row.cmp(&b.row))
        .then(a.col.cmp(&b.col))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiProposal {
    pub rect: GridRect,
    pub anchor: Anchor,
    pub mean_relevance: f64,
    pub pixel_rect: PixelRect,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

#[derive(Debug, Error, PartialEq)]
pub enum ProposalConfigError {
    #[error("k must be at least 1")]
    ZeroK,
    #[error("s_min ({0}) and s_max ({1}) must be odd with 1 <= s_min <= s_max")]
    Sizes(usize, usize),
    #[error("{name} must lie in [0, 1], got {value}")]
    Threshold { name: &'static str, value: f64 },
    #[error("s_dist must be finite and non-negative, got {0}")]
    Distance(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProposalConfig {
    pub k: usize,
    pub s_min: usize,
    pub s_max: usize,
    pub s_dist: f64,
    pub expansion_threshold: f64,
    pub nms_iou_threshold: f64,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            k: 30,
            s_min: 3,
            s_max: 5,
            s_dist: 2.0,
            expansion_threshold: 0.5,
            nms_iou_threshold: 0.3,
        }
    }
}

impl ProposalConfig {
    pub fn validate(&self) -> Result<(), ProposalConfigError> {
        if self.k == 0 {
            return Err(ProposalConfigError::ZeroK);
        }
        if self.s_min == 0
            || self.s_min.is_multiple_of(2)
            || self.s_max.is_multiple_of(2)
            || self.s_min > self.s_max
        {
            return Err(ProposalConfigError::Sizes(self.s_min, self.s_max));
        }
        for (name, value) in [
            ("expansion_threshold", self.expansion_threshold),
            ("nms_iou_threshold", self.nms_iou_threshold),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(ProposalConfigError::Threshold { name, value });
            }
        }
        if !(self.s_dist.is_finite() && self.s_dist >= 0.0) {
            return Err(ProposalConfigError::Distance(self.s_dist));
        }
        Ok(())
    }
}

/// Greedy top-`k` cells at pairwise distance ≥ `s_dist`, in acceptance order.
pub fn extract_anchors(map: &RelevanceMap, k: usize, s_dist: f64) -> Vec<Anchor> {
    let mut cells: Vec<Anchor> = map
        .values
        .indexed_iter()
        .map(|((row, col), &score)| Anchor { row, col, score })
        .collect();
    cells.sort_by(by_rank);
    let min_sq = s_dist * s_dist;
    let mut accepted: Vec<Anchor> = Vec::with_capacity(k);
    for cell in cells {
        if accepted.len() == k {
            break;
        }
        if accepted.iter().all(|a| a.dist_sq(&cell) >= min_sq) {
            accepted.push(cell);
        }
    }
    accepted
}

fn rect_mean(map: &RelevanceMap, r: &GridRect) -> f64 {
    let mut sum = 0.0;
    for row in r.top..=r.bottom {
        for col in r.left..=r.right {
            sum += map.values[[row, col]];
        }
    }
    sum / r.area() as f64
}

/// Interval of length `min(size, n)` around `center`, shifted inward at the borders.
fn centered_span(center: usize, size: usize, n: usize) -> (usize, usize) {
    let size = size.min(n);
    let start = center.saturating_sub(size / 2).min(n - size);
    (start, start + size - 1)
}

/// Grows an ROI around `anchor`; see the module docs for the rule.
pub fn expand_roi(
    anchor: &Anchor,
    map: &RelevanceMap,
    s_min: usize,
    s_max: usize,
    threshold: f64,
) -> RoiProposal {
    let dims = map.dims();
    let (top, bottom) = centered_span(anchor.row, s_min, dims.rows);
    let (left, right) = centered_span(anchor.col, s_min, dims.cols);
    let mut rect = GridRect::new(top, left, bottom, right);
    let mut mean = rect_mean(map, &rect);
    loop {
        let candidate = GridRect::new(
            rect.top.saturating_sub(1),
            rect.left.saturating_sub(1),
            (rect.bottom + 1).min(dims.rows - 1),
            (rect.right + 1).min(dims.cols - 1),
        );
        if candidate == rect || candidate.height() > s_max || candidate.width() > s_max {
            break;
        }
        let candidate_mean = rect_mean(map, &candidate);
        if candidate_mean < threshold {
            break;
        }
        rect = candidate;
        mean = candidate_mean;
    }
    RoiProposal {
        rect,
        anchor: *anchor,
        mean_relevance: mean,
        pixel_rect: PixelRect::new(0, 0, 0, 0),
        confidence: None,
    }
}

/// Greedy NMS by anchor score; keeps a proposal iff IoU ≤ threshold with all kept ones.
pub fn nms(proposals: &[RoiProposal], iou_threshold: f64) -> Vec<RoiProposal> {
    let mut order: Vec<&RoiProposal> = proposals.iter().collect();
    order.sort_by(|a, b| by_rank(&a.anchor, &b.anchor));
    let mut kept: Vec<RoiProposal> = Vec::new();
    for p in order {
        if kept.iter().all(|k| k.rect.iou(&p.rect) <= iou_threshold) {
            kept.push(p.clone());
        }
    }
    kept
}

/// Anchors, expansion, NMS; returns proposals ranked by anchor score with pixel rects attached.
pub fn propose(
    map: &RelevanceMap,
    config: &ProposalConfig,
    image: ImageSize,
) -> Result<Vec<RoiProposal>, ProposalConfigError> {
    config.validate()?;
    let dims: GridDims = map.dims();
    let expanded: Vec<RoiProposal> = extract_anchors(map, config.k, config.s_dist)
        .iter()
        .map(|a| {
            expand_roi(
                a,
                map,
                config.s_min,
                config.s_max,
                config.expansion_threshold,
            )
        })
        .collect();
    let mut kept = nms(&expanded, config.nms_iou_threshold);
    for p in &mut kept {
        p.pixel_rect = grid_to_pixels(&p.rect, dims, image);
    }
    Ok(kept)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn map(values: Array2<f64>) -> RelevanceMap {
        RelevanceMap::new(values)
    }

    fn anchor(row: usize, col: usize, score: f64) -> Anchor {
        Anchor { row, col, score }
    }

    #[test]
    fn k1_is_row_major_argmax() {
        let mut v = Array2::zeros((4, 4));
        v[[2, 3]] = 0.9;
        v[[1, 2]] = 0.9;
        let a = extract_anchors(&map(v), 1, 2.0);
        assert_eq!(a, vec![anchor(1, 2, 0.9)]);
    }

    #[test]
    fn uniform_map_breaks_ties_row_major() {
        let a = extract_anchors(&map(Array2::from_elem((3, 3), 0.5)), 2, 1.0);
        assert_eq!(
            a.iter().map(|a| (a.row, a.col)).collect::<Vec<_>>(),
            vec![(0, 0), (0, 1)]
        );
    }

    #[test]
    fn anchors_respect_min_distance() {
        let v = Array2::from_shape_fn((4, 4), |(r, c)| (r * 4 + c) as f64 / 15.0);
        let a = extract_anchors(&map(v), 3, 2.0);
        // highest cells are at the bottom-right; (3,3) then (3,1) then (1,3)
        assert_eq!(
            a.iter().map(|a| (a.row, a.col)).collect::<Vec<_>>(),
            vec![(3, 3), (3, 1), (1, 3)]
        );
    }

    #[test]
    fn all_ones_map_grows_to_s_max() {
        let m = map(Array2::ones((9, 9)));
        let p = expand_roi(&anchor(4, 4, 1.0), &m, 3, 5, 0.5);
        assert_eq!(p.rect, GridRect::new(2, 2, 6, 6));
        assert_eq!(p.mean_relevance, 1.0);
    }

    #[test]
    fn delta_map_stays_at_s_min() {
        let mut v = Array2::zeros((9, 9));
        v[[4, 4]] = 1.0;
        let p = expand_roi(&anchor(4, 4, 1.0), &map(v), 3, 5, 0.5);
        assert_eq!(p.rect, GridRect::new(3, 3, 5, 5));
        assert!((p.mean_relevance - 1.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn border_anchor_shifts_initial_square_inward() {
        let m = map(Array2::ones((6, 6)));
        let p = expand_roi(&anchor(0, 5, 1.0), &m, 3, 3, 0.5);
        assert_eq!(p.rect, GridRect::new(0, 3, 2, 5));
        assert!(p.rect.contains_cell(0, 5));
    }

    #[test]
    fn grid_smaller_than_s_min_clamps() {
        let m = map(Array2::ones((2, 7)));
        let p = expand_roi(&anchor(1, 3, 1.0), &m, 3, 5, 0.5);
        assert_eq!(p.rect.height(), 2);
        assert_eq!(p.rect.width(), 5);
    }

    fn prop(rect: GridRect, score: f64) -> RoiProposal {
        RoiProposal {
            rect,
            anchor: anchor(rect.top, rect.left, score),
            mean_relevance: 0.0,
            pixel_rect: PixelRect::new(0, 0, 0, 0),
            confidence: None,
        }
    }

    #[test]
    fn disjoint_rects_all_survive_in_score_order() {
        let ps = vec![
            prop(GridRect::new(0, 0, 1, 1), 0.2),
            prop(GridRect::new(5, 5, 6, 6), 0.9),
            prop(GridRect::new(0, 5, 1, 6), 0.5),
        ];
        let kept = nms(&ps, 0.3);
        let scores: Vec<f64> = kept.iter().map(|p| p.anchor.score).collect();
        assert_eq!(scores, vec![0.9, 0.5, 0.2]);
    }

    #[test]
    fn identical_rects_keep_the_stronger() {
        let r = GridRect::new(1, 1, 3, 3);
        let kept = nms(&[prop(r, 0.8), prop(r, 0.9)], 0.3);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].anchor.score, 0.9);
    }

    #[test]
    fn iou_exactly_at_threshold_is_kept() {
        // 3x3 vs 3x3 sharing a 3x1 column: IoU = 3/15 = 0.2
        let a = prop(GridRect::new(0, 0, 2, 2), 0.9);
        let b = prop(GridRect::new(0, 2, 2, 4), 0.8);
        assert_eq!(nms(&[a.clone(), b.clone()], 0.2).len(), 2);
        assert_eq!(nms(&[a, b], 0.19).len(), 1);
    }

    #[test]
    fn two_peaks_lead_the_ranking() {
        let mut v = Array2::from_elem((16, 16), 0.05);
        for (r, c) in [(3, 3), (12, 11)] {
            for dr in 0..3 {
                for dc in 0..3 {
                    v[[r + dr - 1, c + dc - 1]] = 0.9;
                }
            }
            v[[r, c]] = 1.0;
        }
        let ps = propose(
            &map(v),
            &ProposalConfig::default(),
            ImageSize::new(160, 160),
        )
        .unwrap();
        assert!(ps.len() > 2);
        assert_eq!((ps[0].anchor.row, ps[0].anchor.col), (3, 3));
        assert_eq!((ps[1].anchor.row, ps[1].anchor.col), (12, 11));
        assert!(ps[2].anchor.score < 0.9);
        assert_eq!(
            ps[0].pixel_rect,
            grid_to_pixels(&ps[0].rect, GridDims::new(16, 16), ImageSize::new(160, 160))
        );
    }

    #[test]
    fn k1_gives_single_proposal() {
        let v = Array2::from_shape_fn((5, 5), |(r, c)| (r + c) as f64 / 8.0);
        let cfg = ProposalConfig {
            k: 1,
            ..ProposalConfig::default()
        };
        assert_eq!(
            propose(&map(v), &cfg, ImageSize::new(50, 50))
                .unwrap()
                .len(),
            1
        );
    }

    #[test]
    fn config_validation() {
        assert!(ProposalConfig::default().validate().is_ok());
        let even = ProposalConfig {
            s_min: 4,
            ..ProposalConfig::default()
        };
        assert!(matches!(
            even.validate(),
            Err(ProposalConfigError::Sizes(4, 5))
        ));
        let inverted = ProposalConfig {
            s_min: 7,
            ..ProposalConfig::default()
        };
        assert!(inverted.validate().is_err());
        let zero = ProposalConfig {
            k: 0,
            ..ProposalConfig::default()
        };
        assert_eq!(zero.validate(), Err(ProposalConfigError::ZeroK));
    }
}
