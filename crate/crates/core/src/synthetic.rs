//! Synthetic scenes, token dumps, and oracles for model-free testing.
//!
//! Feature construction, per layer in ascending order, drawing every random
//! number from one PCG64 stream (`rand_pcg::Pcg64::seed_from_u64(seed)`):
//!
//! 1. for each target in list order: `t = unit(g)`, with `g` a vector of `d`
//!    standard normals;
//! 2. for each visual token in dump order (global `a × a` grid, then the local
//!    `h × w` grid if present), with `C` the pixel rect of its cell:
//!    * `C` meets a planted box of target `k` (first match in target order):
//!      draw `n`, emit `unit(t_k + σ·n)`;
//!    * else `C` meets a distractor of target `k`: draw `g`, set
//!      `o = unit(g − (g·t_k)·t_k)`, emit `unit(0.5·t_k + 0.5·o)`;
//!    * else draw `g`, emit `unit(g)`;
//! 3. every text token of target `k` is `t_k`.
//!
//! Normals come from `rand_distr::StandardNormal`, arithmetic is `f64`, and
//! values are stored as `f32`. When the scene asks for key features, the same
//! procedure runs again for the key set after all value layers, continuing the
//! stream.

use std::collections::HashMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};

use crate::geometry::{grid_to_pixels, GridDims, GridRect, ImageSize, PixelRect};
use crate::ranking::{ExistenceOracle, Logits, OracleError};
use crate::relevance_map::RelevanceMap;
use crate::tensor_io::{
    DumpHeader, FeatureKind, LocalDims, QuestionMeta, QuestionType, TargetMeta, TokenDump,
    ViewKind, FORMAT_VERSION,
};

pub const SYNTHETIC_MODEL_ID: &str = "synthetic";
/// Logit margin returned by the geometric oracle.
pub const ORACLE_MARGIN: f64 = 4.0;

const OBJECT_NAMES: [&str; 8] = [
    "red car",
    "umbrella",
    "dog",
    "bench",
    "bicycle",
    "clock",
    "green bottle",
    "kite",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedTarget {
    pub target_id: u32,
    pub surface_text: String,
    pub token_count: usize,
    pub boxes: Vec<PixelRect>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Distractor {
    pub target_id: u32,
    pub rect: PixelRect,
}

/// A token-space scene; also the manifest written next to generated dumps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub seed: u64,
    pub image_size: ImageSize,
    pub view_kind: ViewKind,
    pub grid_size_a: usize,
    pub crop_count_b: usize,
    #[serde(default)]
    pub local_dims: Option<LocalDims>,
    pub hidden_dim: usize,
    pub layers: Vec<usize>,
    pub noise_level: f64,
    pub question_type: QuestionType,
    pub targets: Vec<PlantedTarget>,
    #[serde(default)]
    pub distractor_boxes: Vec<Distractor>,
    #[serde(default)]
    pub include_keys: bool,
}

/// Knobs for [`random_scene`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneParams {
    pub grid: usize,
    pub cell_px: u32,
    pub hidden_dim: usize,
    pub layers: Vec<usize>,
    pub noise_level: f64,
    pub targets: usize,
    pub boxes_per_target: usize,
    /// Inclusive range of planted box side lengths, in cells.
    pub box_cells: (usize, usize),
    pub distractors_per_target: usize,
    pub token_count: usize,
    pub question_type: QuestionType,
    pub include_keys: bool,
    /// `Some(b)` generates a global-local dump with `b` crops laid out as a
    /// `a × (a·b)` local grid.
    pub local_crops: Option<usize>,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            grid: 24,
            cell_px: 14,
            hidden_dim: 64,
            layers: vec![0, 1, 2, 3],
            noise_level: 0.0,
            targets: 1,
            boxes_per_target: 1,
            box_cells: (2, 2),
            distractors_per_target: 1,
            token_count: 2,
            question_type: QuestionType::Type1,
            include_keys: false,
            local_crops: None,
        }
    }
}

fn cell_rect(r: usize, c: usize, h: usize, w: usize) -> GridRect {
    GridRect::new(r, c, r + h - 1, c + w - 1)
}

/// Lays out planted and distractor boxes at random, cell-aligned with a few
/// pixels of inset, so that no two boxes share or touch a cell.
pub fn random_scene(params: &SceneParams, seed: u64) -> SyntheticScene {
    // layout uses its own stream so features do not shift with layout changes
    let mut rng = Pcg64::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let a = params.grid;
    let (rows, cols, local_dims) = match params.local_crops {
        Some(b) => (a, a * b, Some(LocalDims { h: a, w: a * b })),
        None => (a, a, None),
    };
    let image = ImageSize::new(cols as u32 * params.cell_px, rows as u32 * params.cell_px);
    let dims = GridDims::new(rows, cols);
    let mut used: Vec<GridRect> = Vec::new();
    let mut place = |rng: &mut Pcg64| -> PixelRect {
        let (lo, hi) = params.box_cells;
        for _ in 0..10_000 {
            let h = rng.random_range(lo..=hi);
            let w = rng.random_range(lo..=hi);
            let r = rng.random_range(0..=rows - h);
            let c = rng.random_range(0..=cols - w);
            let rect = cell_rect(r, c, h, w);
            // one-cell moat between boxes
            let moat = GridRect::new(
                rect.top.saturating_sub(1),
                rect.left.saturating_sub(1),
                rect.bottom + 1,
                rect.right + 1,
            );
            if used.iter().all(|u| u.intersection_area(&moat) == 0) {
                used.push(rect);
                let px = grid_to_pixels(&rect, dims, image);
                let inset = rng.random_range(0..params.cell_px.div_ceil(4).max(1));
                return PixelRect::new(px.x0 + inset, px.y0 + inset, px.x1 - inset, px.y1 - inset);
            }
        }
        panic!("scene too crowded for {} boxes", used.len() + 1);
    };
    let mut targets = Vec::new();
    for k in 0..params.targets {
        let boxes = (0..params.boxes_per_target)
            .map(|_| place(&mut rng))
            .collect();
        targets.push(PlantedTarget {
            target_id: k as u32,
            surface_text: OBJECT_NAMES[k % OBJECT_NAMES.len()].to_string(),
            token_count: params.token_count,
            boxes,
        });
    }
    let mut distractor_boxes = Vec::new();
    for k in 0..params.targets {
        for _ in 0..params.distractors_per_target {
            distractor_boxes.push(Distractor {
                target_id: k as u32,
                rect: place(&mut rng),
            });
        }
    }
    SyntheticScene {
        seed,
        image_size: image,
        view_kind: if local_dims.is_some() {
            ViewKind::GlobalLocal
        } else {
            ViewKind::Global
        },
        grid_size_a: a,
        crop_count_b: params.local_crops.unwrap_or(0),
        local_dims,
        hidden_dim: params.hidden_dim,
        layers: params.layers.clone(),
        noise_level: params.noise_level,
        question_type: params.question_type,
        targets,
        distractor_boxes,
        include_keys: params.include_keys,
    }
}

impl SyntheticScene {
    pub fn with_noise(mut self, noise_level: f64) -> Self {
        self.noise_level = noise_level;
        self
    }

    pub fn header(&self) -> DumpHeader {
        let gt: Vec<PixelRect> = self
            .targets
            .iter()
            .flat_map(|t| t.boxes.iter().copied())
            .collect();
        let names: Vec<&str> = self
            .targets
            .iter()
            .map(|t| t.surface_text.as_str())
            .collect();
        let question_text = match self.question_type {
            QuestionType::Type2 => format!("How many {} are in the image?", names.join(" and ")),
            _ => format!("Where is the {}?", names.join(" and the ")),
        };
        let mut annotations = std::collections::BTreeMap::new();
        annotations.insert("synthetic_seed".to_string(), self.seed.into());
        annotations.insert("noise_level".to_string(), self.noise_level.into());
        DumpHeader {
            format_version: FORMAT_VERSION,
            model_id: SYNTHETIC_MODEL_ID.into(),
            view_kind: self.view_kind,
            grid_size_a: self.grid_size_a,
            crop_count_b: self.crop_count_b,
            local_dims: self.local_dims,
            hidden_dim: self.hidden_dim,
            layers: self.layers.clone(),
            feature_kind: FeatureKind::Value,
            image_size: self.image_size,
            targets: self
                .targets
                .iter()
                .map(|t| TargetMeta {
                    target_id: t.target_id,
                    surface_text: t.surface_text.clone(),
                    token_count: t.token_count,
                })
                .collect(),
            question: QuestionMeta {
                question_text,
                question_type: self.question_type,
                answer_options: Vec::new(),
                gt_answer: None,
                gt_boxes: Some(gt),
            },
            tensor_index: Vec::new(),
            annotations,
        }
    }

    /// Cell grids in token order with their pixel footprint.
    fn token_cells(&self) -> Vec<PixelRect> {
        let mut grids = vec![GridDims::new(self.grid_size_a, self.grid_size_a)];
        if let Some(l) = self.local_dims {
            grids.push(GridDims::new(l.h, l.w));
        }
        let mut out = Vec::new();
        for dims in grids {
            for r in 0..dims.rows {
                for c in 0..dims.cols {
                    out.push(grid_to_pixels(
                        &GridRect::new(r, c, r, c),
                        dims,
                        self.image_size,
                    ));
                }
            }
        }
        out
    }

    /// Planted boxes of the target with this surface text.
    pub fn boxes_for(&self, target: &str) -> &[PixelRect] {
        self.targets
            .iter()
            .find(|t| t.surface_text == target)
            .map_or(&[], |t| t.boxes.as_slice())
    }
}

fn gaussian(rng: &mut Pcg64, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

enum CellRole {
    Planted(usize),
    Distractor(usize),
    Background,
}

fn feature_set(
    scene: &SyntheticScene,
    cells: &[PixelRect],
    roles: &[CellRole],
    rng: &mut Pcg64,
    kind: FeatureKind,
    dump: &mut TokenDump,
) {
    let d = scene.hidden_dim;
    for &layer in &scene.layers {
        let targets: Vec<Vec<f64>> = scene
            .targets
            .iter()
            .map(|_| unit(gaussian(rng, d)))
            .collect();
        let mut visual = Array2::<f32>::zeros((cells.len(), d));
        for (j, role) in roles.iter().enumerate() {
            let v = match *role {
                CellRole::Planted(k) => {
                    let n = gaussian(rng, d);
                    let t = &targets[k];
                    unit(
                        t.iter()
                            .zip(&n)
                            .map(|(t, n)| t + scene.noise_level * n)
                            .collect(),
                    )
                }
                CellRole::Distractor(k) => {
                    let g = gaussian(rng, d);
                    let t = &targets[k];
                    let proj = dot(&g, t);
                    let o = unit(g.iter().zip(t).map(|(g, t)| g - proj * t).collect());
                    unit(t.iter().zip(&o).map(|(t, o)| 0.5 * t + 0.5 * o).collect())
                }
                CellRole::Background => unit(gaussian(rng, d)),
            };
            for (dst, src) in visual.row_mut(j).iter_mut().zip(&v) {
                *dst = *src as f32;
            }
        }
        dump.insert_visual(kind, layer, visual);
        for (k, t) in scene.targets.iter().enumerate() {
            let tokens = Array2::from_shape_fn((t.token_count, d), |(_, c)| targets[k][c] as f32);
            dump.insert_target(kind, t.target_id, layer, tokens);
        }
    }
}

/// Builds the token dump of a scene; fully determined by the scene.
pub fn generate_dump(scene: &SyntheticScene) -> TokenDump {
    let cells = scene.token_cells();
    let roles: Vec<CellRole> = cells
        .iter()
        .map(|cell| {
            let meets = |r: &PixelRect| cell.intersection_area(r) > 0;
            if let Some(k) = scene.targets.iter().position(|t| t.boxes.iter().any(meets)) {
                return CellRole::Planted(k);
            }
            scene
                .distractor_boxes
                .iter()
                .find(|d| meets(&d.rect))
                .and_then(|d| {
                    scene
                        .targets
                        .iter()
                        .position(|t| t.target_id == d.target_id)
                })
                .map_or(CellRole::Background, CellRole::Distractor)
        })
        .collect();
    let mut rng = Pcg64::seed_from_u64(scene.seed);
    let mut dump = TokenDump::new(scene.header());
    feature_set(
        scene,
        &cells,
        &roles,
        &mut rng,
        FeatureKind::Value,
        &mut dump,
    );
    if scene.include_keys {
        feature_set(
            scene,
            &cells,
            &roles,
            &mut rng,
            FeatureKind::KeyNoRope,
            &mut dump,
        );
    }
    dump
}

/// Uniform random map in `[0, 1)`, for the random-map ablation.
pub fn random_map(dims: GridDims, seed: u64) -> RelevanceMap {
    let mut rng = Pcg64::seed_from_u64(seed);
    let values = Array2::from_shape_simple_fn((dims.rows, dims.cols), || rng.random::<f64>());
    RelevanceMap::normalized(values)
}

/// Whether `rect` covers at least half of some planted box of `target`.
pub fn covers_planted(scene: &SyntheticScene, rect: &PixelRect, target: &str) -> bool {
    scene
        .boxes_for(target)
        .iter()
        .any(|b| 2 * rect.intersection_area(b) >= b.area())
}

/// Says "Yes" (margin [`ORACLE_MARGIN`]) iff the queried rect covers at least
/// half of a planted box of the queried target. Answers can be flipped with a
/// fixed probability; flips are a pure function of `(seed, rect, target)`.
#[derive(Debug, Clone)]
pub struct GeometricOracle {
    boxes: HashMap<String, Vec<PixelRect>>,
    flip_probability: f64,
    seed: u64,
    calls: u64,
}

impl GeometricOracle {
    pub fn new(scene: &SyntheticScene) -> Self {
        Self {
            boxes: scene
                .targets
                .iter()
                .map(|t| (t.surface_text.clone(), t.boxes.clone()))
                .collect(),
            flip_probability: 0.0,
            seed: scene.seed,
            calls: 0,
        }
    }

    pub fn with_flip_probability(mut self, p: f64) -> Self {
        self.flip_probability = p;
        self
    }

    /// Total invocations, for cross-checking FP accounting.
    pub fn calls(&self) -> u64 {
        self.calls
    }

    fn flipped(&self, rect: &PixelRect, target: &str) -> bool {
        if self.flip_probability <= 0.0 {
            return false;
        }
        let mut h = self.seed ^ 0xd1b5_4a32_d192_ed03;
        for v in [rect.x0, rect.y0, rect.x1, rect.y1] {
            h = splitmix(h ^ u64::from(v));
        }
        for b in target.bytes() {
            h = splitmix(h ^ u64::from(b));
        }
        let u = (h >> 11) as f64 / (1u64 << 53) as f64;
        u < self.flip_probability
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl ExistenceOracle for GeometricOracle {
    fn query(&mut self, rect: &PixelRect, target: &str) -> Result<Logits, OracleError> {
        self.calls += 1;
        let boxes = self
            .boxes
            .get(target)
            .ok_or_else(|| OracleError::Unavailable(format!("target `{target}`")))?;
        let hit = boxes
            .iter()
            .any(|b| 2 * rect.intersection_area(b) >= b.area());
        let yes = hit != self.flipped(rect, target);
        Ok(if yes {
            Logits {
                l_yes: ORACLE_MARGIN,
                l_no: 0.0,
            }
        } else {
            Logits {
                l_yes: 0.0,
                l_no: ORACLE_MARGIN,
            }
        })
    }

    fn concurrent_safe(&self) -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ranking::existence_confidence;
    use crate::relevance_map::{build_object_map, RelevanceConfig, Residual};

    #[test]
    fn same_seed_same_bytes() {
        let scene = random_scene(&SceneParams::default(), 7).with_noise(0.3);
        let a = generate_dump(&scene).to_bytes().unwrap();
        let b = generate_dump(&scene).to_bytes().unwrap();
        assert_eq!(a, b);
        let other = generate_dump(&random_scene(&SceneParams::default(), 8))
            .to_bytes()
            .unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn dumps_pass_validation() {
        let params = SceneParams {
            targets: 2,
            distractors_per_target: 1,
            include_keys: true,
            ..SceneParams::default()
        };
        let dump = generate_dump(&random_scene(&params, 3));
        let back = TokenDump::from_bytes(dump.to_bytes().unwrap()).unwrap();
        assert!(back.has_kind(FeatureKind::KeyNoRope));
        assert_eq!(back.header.visual_token_count(), 576);
    }

    #[test]
    fn local_scene_has_local_tokens() {
        let params = SceneParams {
            grid: 6,
            local_crops: Some(2),
            ..SceneParams::default()
        };
        let scene = random_scene(&params, 5);
        assert_eq!(scene.local_dims, Some(LocalDims { h: 6, w: 12 }));
        let dump = TokenDump::from_bytes(generate_dump(&scene).to_bytes().unwrap()).unwrap();
        assert_eq!(dump.header.visual_token_count(), 36 * 3);
    }

    #[test]
    fn planted_boxes_stay_inside_and_apart() {
        let params = SceneParams {
            targets: 3,
            boxes_per_target: 2,
            distractors_per_target: 2,
            ..SceneParams::default()
        };
        for seed in 0..20 {
            let s = random_scene(&params, seed);
            let mut all: Vec<PixelRect> = s.targets.iter().flat_map(|t| t.boxes.clone()).collect();
            all.extend(s.distractor_boxes.iter().map(|d| d.rect));
            for (i, a) in all.iter().enumerate() {
                assert!(a.within(s.image_size) && !a.is_empty());
                for b in &all[i + 1..] {
                    assert_eq!(a.intersection_area(b), 0);
                }
            }
        }
    }

    fn planted_cells(scene: &SyntheticScene, dims: GridDims) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for r in 0..dims.rows {
            for c in 0..dims.cols {
                let cell = grid_to_pixels(&GridRect::new(r, c, r, c), dims, scene.image_size);
                if scene.targets[0]
                    .boxes
                    .iter()
                    .any(|b| cell.intersection_area(b) > 0)
                {
                    out.push((r, c));
                }
            }
        }
        out
    }

    #[test]
    fn noiseless_map_peaks_on_planted_cells() {
        let params = SceneParams {
            distractors_per_target: 0,
            ..SceneParams::default()
        };
        let cfg = RelevanceConfig {
            residual: Residual::None,
            ..RelevanceConfig::default()
        };
        for seed in 0..10 {
            let scene = random_scene(&params, seed);
            let map = build_object_map(&generate_dump(&scene), 0, &cfg).unwrap();
            let planted = planted_cells(&scene, map.dims());
            for ((r, c), &v) in map.values.indexed_iter() {
                if planted.contains(&(r, c)) {
                    assert_eq!(v, 1.0);
                } else {
                    assert!(v < 1.0);
                }
            }
        }
    }

    #[test]
    fn off_diagonal_planted_cells_tie_under_identity_residual() {
        let scene = random_scene(&SceneParams::default(), 11);
        let map = build_object_map(&generate_dump(&scene), 0, &RelevanceConfig::default()).unwrap();
        let scores: Vec<f64> = planted_cells(&scene, map.dims())
            .into_iter()
            .filter(|(r, c)| r != c)
            .map(|(r, c)| map.get(r, c))
            .collect();
        assert!(!scores.is_empty());
        assert!(scores.iter().all(|&v| (v - scores[0]).abs() < 1e-6));
    }

    #[test]
    fn random_map_is_seeded() {
        let dims = GridDims::new(5, 7);
        assert_eq!(random_map(dims, 3), random_map(dims, 3));
        assert_ne!(random_map(dims, 3).values, random_map(dims, 4).values);
        assert_eq!(random_map(dims, 3).dims(), dims);
    }

    #[test]
    fn oracle_confidence_values() {
        let scene = random_scene(&SceneParams::default(), 2);
        let mut o = GeometricOracle::new(&scene);
        let b = scene.targets[0].boxes[0];
        let name = scene.targets[0].surface_text.clone();
        let yes = o.query(&b, &name).unwrap();
        assert!((existence_confidence(yes.l_yes, yes.l_no) - 0.9640).abs() < 1e-4);
        let far = PixelRect::new(0, 0, 1, 1);
        let far = if far.intersection_area(&b) == 0 {
            far
        } else {
            PixelRect::new(335, 335, 336, 336)
        };
        let no = o.query(&far, &name).unwrap();
        assert!((existence_confidence(no.l_yes, no.l_no) + 0.9640).abs() < 1e-4);
        assert_eq!(o.calls(), 2);
        assert!(matches!(
            o.query(&b, "zebra"),
            Err(OracleError::Unavailable(_))
        ));
    }

    #[test]
    fn flips_are_deterministic() {
        let scene = random_scene(&SceneParams::default(), 2);
        let name = scene.targets[0].surface_text.clone();
        let rects: Vec<PixelRect> = (0..200)
            .map(|i| PixelRect::new(i, i, i + 20, i + 20))
            .collect();
        let answers = |p: f64| {
            let mut o = GeometricOracle::new(&scene).with_flip_probability(p);
            rects
                .iter()
                .map(|r| o.query(r, &name).unwrap().l_yes)
                .collect::<Vec<_>>()
        };
        assert_eq!(answers(0.3), answers(0.3));
        let base = answers(0.0);
        let flipped = answers(0.3);
        let changed = base.iter().zip(&flipped).filter(|(a, b)| a != b).count();
        assert!((30..90).contains(&changed), "{changed}");
    }
}
