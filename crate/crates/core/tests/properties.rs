use std::collections::HashSet;

use focus_core::geometry::{ImageSize, PixelRect};
use focus_core::inference_plan::build_canvas;
use focus_core::ranking::{
    rank_and_select_type1, ExistenceOracle, Logits, OracleError, QuerySession, RankingConfig,
};
use focus_core::relevance_map::RelevanceMap;
use focus_core::roi_proposal::{expand_roi, extract_anchors, nms, propose, ProposalConfig};
use focus_core::tensor_io::{
    pack_dump, read_dump, target_tensor_name, visual_tensor_name, DumpHeader, FeatureKind,
    QuestionMeta, TargetMeta, Tensor, ViewKind, FORMAT_VERSION,
};
use ndarray::Array2;
use proptest::prelude::*;

fn header(a: usize, d: usize, layers: Vec<usize>, tokens: usize) -> DumpHeader {
    DumpHeader {
        format_version: FORMAT_VERSION,
        model_id: "prop".into(),
        view_kind: ViewKind::Global,
        grid_size_a: a,
        crop_count_b: 0,
        local_dims: None,
        hidden_dim: d,
        layers,
        feature_kind: FeatureKind::Value,
        image_size: ImageSize::new(100, 80),
        targets: vec![TargetMeta {
            target_id: 7,
            surface_text: "kite".into(),
            token_count: tokens,
        }],
        question: QuestionMeta::default(),
        tensor_index: Vec::new(),
        annotations: Default::default(),
    }
}

fn dump_parts() -> impl Strategy<Value = (DumpHeader, Vec<(String, Tensor)>)> {
    (
        1..5usize,
        1..6usize,
        proptest::collection::btree_set(0..50usize, 1..4),
        1..4usize,
    )
        .prop_flat_map(|(a, d, layers, tokens)| {
            let layers: Vec<usize> = layers.into_iter().collect();
            let per_layer = a * a * d + tokens * d;
            let bits = proptest::collection::vec(any::<u32>(), per_layer * layers.len());
            (Just(header(a, d, layers, tokens)), bits)
        })
        .prop_map(|(h, bits)| {
            let n = h.visual_token_count();
            let (d, tokens) = (h.hidden_dim, h.targets[0].token_count);
            let mut floats = bits.into_iter().map(f32::from_bits);
            let mut tensors = Vec::new();
            for &l in &h.layers {
                let v: Vec<f32> = floats.by_ref().take(n * d).collect();
                tensors.push((
                    visual_tensor_name(FeatureKind::Value, l),
                    Tensor::new(vec![n, d], v).unwrap(),
                ));
                let t: Vec<f32> = floats.by_ref().take(tokens * d).collect();
                tensors.push((
                    target_tensor_name(FeatureKind::Value, 7, l),
                    Tensor::new(vec![tokens, d], t).unwrap(),
                ));
            }
            (h, tensors)
        })
}

fn small_map() -> impl Strategy<Value = RelevanceMap> {
    (1..9usize, 1..9usize, any::<bool>()).prop_flat_map(|(r, c, ties)| {
        proptest::collection::vec(0.0f64..1.0, r * c).prop_map(move |v| {
            let v = if ties {
                v.into_iter().map(|x| (x * 3.0).floor() / 3.0).collect()
            } else {
                v
            };
            RelevanceMap::new(Array2::from_shape_vec((r, c), v).unwrap())
        })
    })
}

fn proposal_config() -> impl Strategy<Value = ProposalConfig> {
    (
        1..15usize,
        0..3usize,
        0..3usize,
        0.0f64..3.5,
        0.0f64..1.0,
        0.0f64..1.0,
    )
        .prop_map(
            |(k, a, b, s_dist, expansion_threshold, nms_iou_threshold)| ProposalConfig {
                k,
                s_min: 2 * a + 1,
                s_max: 2 * (a + b) + 1,
                s_dist,
                expansion_threshold,
                nms_iou_threshold,
            },
        )
}

/// Oracle whose logits are a hash of the rect; counts calls.
struct Hashed {
    calls: u64,
}

impl ExistenceOracle for Hashed {
    fn query(&mut self, rect: &PixelRect, _target: &str) -> Result<Logits, OracleError> {
        self.calls += 1;
        let h = (rect.x0 * 31 + rect.y0 * 17 + rect.x1 * 7 + rect.y1) % 13;
        Ok(Logits {
            l_yes: f64::from(h) / 2.0 - 3.0,
            l_no: 0.0,
        })
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn container_round_trips_bit_exactly((h, tensors) in dump_parts()) {
        let bytes = pack_dump(h, &tensors).unwrap();
        prop_assert_eq!(bytes.len() % 4, 0);
        let dump = read_dump(bytes.clone()).unwrap();
        let back = dump.tensors().unwrap();
        prop_assert_eq!(back.len(), tensors.len());
        for ((na, a), (nb, b)) in back.iter().zip(&tensors) {
            prop_assert_eq!(na, nb);
            prop_assert!(a.bit_eq(b));
        }
        // re-packing what was read gives the same bytes
        let again = pack_dump(dump.header.clone(), &back).unwrap();
        prop_assert_eq!(again, bytes);
    }

    #[test]
    fn anchors_respect_spacing_and_count(map in small_map(), cfg in proposal_config()) {
        let anchors = extract_anchors(&map, cfg.k, cfg.s_dist);
        prop_assert!(anchors.len() <= cfg.k);
        prop_assert!(!anchors.is_empty());
        for (i, a) in anchors.iter().enumerate() {
            for b in &anchors[..i] {
                let dr = a.row as f64 - b.row as f64;
                let dc = a.col as f64 - b.col as f64;
                prop_assert!(dr * dr + dc * dc >= cfg.s_dist * cfg.s_dist);
                prop_assert!(b.score >= a.score);
            }
        }
    }

    #[test]
    fn expanded_rois_stay_in_bounds(map in small_map(), cfg in proposal_config()) {
        let dims = map.dims();
        for a in extract_anchors(&map, cfg.k, cfg.s_dist) {
            let p = expand_roi(&a, &map, cfg.s_min, cfg.s_max, cfg.expansion_threshold);
            prop_assert!(p.rect.fits(dims));
            prop_assert!(p.rect.contains_cell(a.row, a.col));
            prop_assert!(p.rect.height() >= cfg.s_min.min(dims.rows));
            prop_assert!(p.rect.width() >= cfg.s_min.min(dims.cols));
            prop_assert!(p.rect.height() <= cfg.s_max && p.rect.width() <= cfg.s_max);
        }
    }

    #[test]
    fn nms_output_is_separated_subset(map in small_map(), cfg in proposal_config()) {
        let expanded: Vec<_> = extract_anchors(&map, cfg.k, cfg.s_dist)
            .iter()
            .map(|a| expand_roi(a, &map, cfg.s_min, cfg.s_max, cfg.expansion_threshold))
            .collect();
        let kept = nms(&expanded, cfg.nms_iou_threshold);
        prop_assert!(!kept.is_empty());
        for (i, p) in kept.iter().enumerate() {
            prop_assert!(expanded.contains(p));
            for q in &kept[..i] {
                prop_assert!(q.rect.iou(&p.rect) <= cfg.nms_iou_threshold);
            }
        }
        let full = propose(&map, &cfg, ImageSize::new(160, 120)).unwrap();
        prop_assert_eq!(full.len(), kept.len());
        for p in &full {
            prop_assert!(p.pixel_rect.within(ImageSize::new(160, 120)) && !p.pixel_rect.is_empty());
        }
    }

    #[test]
    fn canvas_placements_fit_and_do_not_overlap(
        raw in proptest::collection::vec((0u32..900, 0u32..700, 1u32..300, 1u32..300), 2..6),
    ) {
        let image = ImageSize::new(1200, 1000);
        let rects: Vec<PixelRect> = raw
            .iter()
            .map(|&(x, y, w, h)| PixelRect::new(x, y, (x + w).min(1200), (y + h).min(1000)))
            .collect();
        let canvas = ImageSize::new(1008, 1008);
        if let Ok(layout) = build_canvas(&rects, image, canvas) {
            prop_assert_eq!(layout.placements.len(), rects.len());
            for (i, p) in layout.placements.iter().enumerate() {
                prop_assert!(p.destination.within(canvas) && !p.destination.is_empty());
                prop_assert_eq!(p.source, rects[i]);
                for q in &layout.placements[..i] {
                    prop_assert_eq!(q.destination.intersection_area(&p.destination), 0);
                }
            }
        }
    }

    #[test]
    fn type1_budget_and_choice(map in small_map(), cfg in proposal_config(), n_steps in 1..10usize, overrun: bool) {
        let proposals = propose(&map, &cfg, ImageSize::new(300, 300)).unwrap();
        let mut oracle = Hashed { calls: 0 };
        let rc = RankingConfig { n_steps, overrun, t_type2: 0.6 };
        let (sel, queries) = {
            let mut session = QuerySession::new(&mut oracle);
            let sel = rank_and_select_type1(&proposals, "kite", &mut session, &rc).unwrap();
            (sel, session.counter().existence_queries)
        };
        let distinct: HashSet<PixelRect> = sel.scored.iter().map(|p| p.pixel_rect).collect();
        prop_assert_eq!(queries, distinct.len() as u64);
        prop_assert_eq!(oracle.calls, queries);
        if !overrun {
            prop_assert_eq!(sel.scored.len(), n_steps.min(proposals.len()));
        } else {
            prop_assert!(sel.scored.len() >= n_steps.min(proposals.len()));
        }
        let best = sel.best_proposal().confidence.unwrap();
        for p in &sel.scored {
            prop_assert!(p.confidence.unwrap() <= best);
        }
    }
}
