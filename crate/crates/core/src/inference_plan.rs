//! Final-inference plans: what the model looks at after the search.

use std::collections::BTreeMap;
use std::io::Cursor;

use image::{imageops, DynamicImage, ImageFormat, Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{bounding_box, ImageSize, PixelRect};
use crate::roi_proposal::RoiProposal;
use crate::tensor_io::ViewKind;

pub const DEFAULT_CANVAS: ImageSize = ImageSize::new(1008, 1008);
pub const HIGHLIGHT_STROKE: u32 = 4;
const HIGHLIGHT_COLOR: Rgb<u8> = Rgb([255, 0, 0]);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanKind {
    SingleCrop,
    CombinedRect,
    CanvasPaste,
    Interleaved,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub source: PixelRect,
    pub destination: PixelRect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanvasLayout {
    pub canvas_size: ImageSize,
    pub placements: Vec<Placement>,
}

/// Serialized as `.plan.json`.
///
/// For interleaved plans `crops[0]` is the full image and the remaining crops
/// follow target order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferencePlan {
    pub kind: PlanKind,
    pub crops: Vec<PixelRect>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub canvas: Option<CanvasLayout>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub highlight_rects: Option<Vec<PixelRect>>,
}

impl InferencePlan {
    fn single(rect: PixelRect) -> Self {
        Self {
            kind: PlanKind::SingleCrop,
            crops: vec![rect],
            canvas: None,
            highlight_rects: None,
        }
    }

    fn interleaved(image_size: ImageSize, rects: Vec<PixelRect>) -> Self {
        let mut crops = vec![image_size.full_rect()];
        crops.extend(&rects);
        Self {
            kind: PlanKind::Interleaved,
            crops,
            canvas: None,
            highlight_rects: Some(rects),
        }
    }

    /// Canvas plan, or the combined bounding rect if no canvas can be laid out.
    fn pasted(rects: Vec<PixelRect>, image_size: ImageSize, config: &PlanConfig) -> Self {
        match build_canvas(&rects, image_size, config.canvas_size) {
            Ok(layout) => Self {
                kind: PlanKind::CanvasPaste,
                crops: rects,
                canvas: Some(layout),
                highlight_rects: None,
            },
            Err(e) => {
                log::warn!("canvas layout failed ({e}); using the combined rect");
                Self::combined(&rects)
            }
        }
    }

    fn combined(rects: &[PixelRect]) -> Self {
        Self {
            kind: PlanKind::CombinedRect,
            crops: vec![bounding_box(rects).expect("non-empty")],
            canvas: None,
            highlight_rects: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanConfig {
    /// Max center distance in pixels for combining targets into one rect.
    pub t_obj_dist: f64,
    pub canvas_size: ImageSize,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self {
            t_obj_dist: 1200.0,
            canvas_size: DEFAULT_CANVAS,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum PlanError {
    #[error("empty selection")]
    EmptySelection,
}

#[derive(Debug, Error, PartialEq)]
pub enum CanvasError {
    #[error("canvas needs at least 2 rects, got {0}")]
    TooFewRects(usize),
    #[error("zero-area rect {0:?}")]
    ZeroArea(PixelRect),
    #[error("zero-area canvas")]
    ZeroCanvas,
    #[error("rects cannot be separated on the canvas")]
    Inseparable,
}

/// Plan for single-instance questions, one selected proposal per target.
pub fn plan_type1(
    selected: &BTreeMap<u32, RoiProposal>,
    image_size: ImageSize,
    view_kind: ViewKind,
    config: &PlanConfig,
) -> Result<InferencePlan, PlanError> {
    let rects: Vec<PixelRect> = selected.values().map(|p| p.pixel_rect).collect();
    if rects.is_empty() {
        return Err(PlanError::EmptySelection);
    }
    if view_kind == ViewKind::GlobalLocal {
        return Ok(InferencePlan::interleaved(image_size, rects));
    }
    if rects.len() == 1 {
        return Ok(InferencePlan::single(rects[0]));
    }
    let mut spread: f64 = 0.0;
    for (i, a) in rects.iter().enumerate() {
        for b in &rects[i + 1..] {
            spread = spread.max(a.center_distance(b));
        }
    }
    if spread <= config.t_obj_dist {
        Ok(InferencePlan::combined(&rects))
    } else {
        Ok(InferencePlan::pasted(rects, image_size, config))
    }
}

/// Plan for multi-instance questions from merged regions; never fails.
pub fn plan_type2(
    merged: &[PixelRect],
    image_size: ImageSize,
    view_kind: ViewKind,
    config: &PlanConfig,
) -> InferencePlan {
    match (merged.len(), view_kind) {
        (0, _) => InferencePlan::single(image_size.full_rect()),
        (_, ViewKind::GlobalLocal) => InferencePlan::interleaved(image_size, merged.to_vec()),
        (1, ViewKind::Global) => InferencePlan::single(merged[0]),
        (_, ViewKind::Global) => InferencePlan::pasted(merged.to_vec(), image_size, config),
    }
}

fn scaled_centers(
    rects: &[PixelRect],
    image_size: ImageSize,
    canvas: ImageSize,
) -> Vec<(f64, f64)> {
    let sx = f64::from(canvas.width) / f64::from(image_size.width);
    let sy = f64::from(canvas.height) / f64::from(image_size.height);
    rects
        .iter()
        .map(|r| {
            let (cx, cy) = r.center();
            (cx * sx, cy * sy)
        })
        .collect()
}

/// Integer size of `source` at `scale`, trimmed on one side to keep the aspect.
fn scaled_size(source: &PixelRect, scale: f64) -> (u32, u32) {
    let (sw, sh) = (f64::from(source.width()), f64::from(source.height()));
    let mut w = (sw * scale).floor();
    let mut h = (sh * scale).floor();
    if w >= 1.0 && h >= 1.0 {
        let aspect = sw / sh;
        if w / h > aspect {
            w = (h * aspect).round().clamp(1.0, w);
        } else {
            h = (w / aspect).round().clamp(1.0, h);
        }
    }
    (w as u32, h as u32)
}

fn place(center: (f64, f64), size: (u32, u32)) -> Option<PixelRect> {
    let x0 = (center.0 - f64::from(size.0) / 2.0).round();
    let y0 = (center.1 - f64::from(size.1) / 2.0).round();
    if x0 < 0.0 || y0 < 0.0 {
        return None;
    }
    let (x0, y0) = (x0 as u32, y0 as u32);
    Some(PixelRect::new(x0, y0, x0 + size.0, y0 + size.1))
}

fn layout_at(
    rects: &[PixelRect],
    centers: &[(f64, f64)],
    canvas: ImageSize,
    scale: f64,
) -> Option<Vec<Placement>> {
    let mut out: Vec<Placement> = Vec::with_capacity(rects.len());
    for (r, &c) in rects.iter().zip(centers) {
        let size = scaled_size(r, scale);
        if size.0 == 0 || size.1 == 0 {
            return None;
        }
        let dest = place(c, size)?;
        if !dest.within(canvas)
            || out
                .iter()
                .any(|p| p.destination.intersection_area(&dest) > 0)
        {
            return None;
        }
        out.push(Placement {
            source: *r,
            destination: dest,
        });
    }
    Some(out)
}

/// Pastes rects onto a canvas at their relative positions.
///
/// Destination centers are the source centers scaled to the canvas. All
/// destinations share one shrink factor `f ≤ 1` of their source size, the
/// largest (to one pixel) at which they fit the canvas and do not overlap.
pub fn build_canvas(
    rects: &[PixelRect],
    image_size: ImageSize,
    canvas_size: ImageSize,
) -> Result<CanvasLayout, CanvasError> {
    if rects.len() < 2 {
        return Err(CanvasError::TooFewRects(rects.len()));
    }
    if let Some(r) = rects.iter().find(|r| r.is_empty()) {
        return Err(CanvasError::ZeroArea(*r));
    }
    if canvas_size.width == 0
        || canvas_size.height == 0
        || image_size.width == 0
        || image_size.height == 0
    {
        return Err(CanvasError::ZeroCanvas);
    }
    let centers = scaled_centers(rects, image_size, canvas_size);
    let layout = |f: f64| layout_at(rects, &centers, canvas_size, f);
    let finish = |placements| CanvasLayout {
        canvas_size,
        placements,
    };
    if let Some(p) = layout(1.0) {
        return Ok(finish(p));
    }
    let longest = rects
        .iter()
        .map(|r| r.width().max(r.height()))
        .max()
        .map_or(1.0, f64::from);
    // find any feasible factor by halving, then bisect between it and the last failure
    let mut hi = 1.0;
    let mut lo = 0.5;
    let mut best = loop {
        if let Some(p) = layout(lo) {
            break p;
        }
        hi = lo;
        lo /= 2.0;
        if lo * longest < 1.0 {
            return Err(CanvasError::Inseparable);
        }
    };
    while (hi - lo) * longest >= 1.0 {
        let mid = (lo + hi) / 2.0;
        match layout(mid) {
            Some(p) => {
                lo = mid;
                best = p;
            }
            None => hi = mid,
        }
    }
    Ok(finish(best))
}

#[derive(Debug, Error)]
pub enum ExecuteError {
    #[error("cannot decode image: {0}")]
    Decode(#[source] image::ImageError),
    #[error("cannot encode image: {0}")]
    Encode(#[source] image::ImageError),
    #[error("rect {rect:?} outside {width}x{height} image")]
    OutOfBounds {
        rect: PixelRect,
        width: u32,
        height: u32,
    },
    #[error("plan has no crops")]
    NoCrops,
    #[error("canvas_paste plan without canvas layout")]
    MissingCanvas,
}

fn check_bounds(rect: &PixelRect, img: &DynamicImage) -> Result<(), ExecuteError> {
    let size = ImageSize::new(img.width(), img.height());
    if rect.is_empty() || !rect.within(size) {
        return Err(ExecuteError::OutOfBounds {
            rect: *rect,
            width: size.width,
            height: size.height,
        });
    }
    Ok(())
}

fn crop(img: &DynamicImage, rect: &PixelRect) -> Result<DynamicImage, ExecuteError> {
    check_bounds(rect, img)?;
    Ok(img.crop_imm(rect.x0, rect.y0, rect.width(), rect.height()))
}

fn encode(img: &DynamicImage) -> Result<Vec<u8>, ExecuteError> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .map_err(ExecuteError::Encode)?;
    Ok(out.into_inner())
}

/// Draws a stroke of `HIGHLIGHT_STROKE` pixels just inside `rect`.
fn draw_highlight(img: &mut RgbImage, rect: &PixelRect) {
    let x1 = rect.x1.min(img.width());
    let y1 = rect.y1.min(img.height());
    for y in rect.y0..y1 {
        for x in rect.x0..x1 {
            let edge = x < rect.x0 + HIGHLIGHT_STROKE
                || y < rect.y0 + HIGHLIGHT_STROKE
                || x + HIGHLIGHT_STROKE >= rect.x1
                || y + HIGHLIGHT_STROKE >= rect.y1;
            if edge {
                img.put_pixel(x, y, HIGHLIGHT_COLOR);
            }
        }
    }
}

/// Renders a plan against the source image, returning PNG files in viewing
/// order. Interleaved plans yield the highlighted full image first, then one
/// crop per target; every other plan yields a single image.
pub fn execute_plan(
    plan: &InferencePlan,
    image_bytes: &[u8],
) -> Result<Vec<Vec<u8>>, ExecuteError> {
    let img = image::load_from_memory(image_bytes).map_err(ExecuteError::Decode)?;
    match plan.kind {
        PlanKind::SingleCrop | PlanKind::CombinedRect => {
            let rect = plan.crops.first().ok_or(ExecuteError::NoCrops)?;
            Ok(vec![encode(&crop(&img, rect)?)?])
        }
        PlanKind::CanvasPaste => {
            let layout = plan.canvas.as_ref().ok_or(ExecuteError::MissingCanvas)?;
            let mut canvas = RgbImage::new(layout.canvas_size.width, layout.canvas_size.height);
            for p in &layout.placements {
                let piece = crop(&img, &p.source)?.to_rgb8();
                let d = p.destination;
                if !d.within(layout.canvas_size) || d.is_empty() {
                    return Err(ExecuteError::OutOfBounds {
                        rect: d,
                        width: layout.canvas_size.width,
                        height: layout.canvas_size.height,
                    });
                }
                let resized = imageops::resize(
                    &piece,
                    d.width(),
                    d.height(),
                    imageops::FilterType::Triangle,
                );
                imageops::replace(&mut canvas, &resized, i64::from(d.x0), i64::from(d.y0));
            }
            Ok(vec![encode(&DynamicImage::ImageRgb8(canvas))?])
        }
        PlanKind::Interleaved => {
            let mut full = img.to_rgb8();
            for r in plan.highlight_rects.iter().flatten() {
                check_bounds(r, &img)?;
                draw_highlight(&mut full, r);
            }
            let mut out = vec![encode(&DynamicImage::ImageRgb8(full))?];
            for r in plan.crops.iter().skip(1) {
                out.push(encode(&crop(&img, r)?)?);
            }
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::GridRect;
    use crate::roi_proposal::Anchor;

    fn selection(rects: &[PixelRect]) -> BTreeMap<u32, RoiProposal> {
        rects
            .iter()
            .enumerate()
            .map(|(i, &r)| {
                let p = RoiProposal {
                    rect: GridRect::new(0, 0, 0, 0),
                    anchor: Anchor {
                        row: 0,
                        col: 0,
                        score: 1.0,
                    },
                    mean_relevance: 1.0,
                    pixel_rect: r,
                    confidence: Some(0.9),
                };
                (i as u32, p)
            })
            .collect()
    }

    fn assert_layout_valid(layout: &CanvasLayout) {
        let ps = &layout.placements;
        for (i, p) in ps.iter().enumerate() {
            assert!(p.destination.within(layout.canvas_size));
            let src = f64::from(p.source.width()) / f64::from(p.source.height());
            let dst = f64::from(p.destination.width()) / f64::from(p.destination.height());
            assert!((src / dst - 1.0).abs() <= 0.01, "aspect {src} vs {dst}");
            for q in &ps[i + 1..] {
                assert_eq!(p.destination.intersection_area(&q.destination), 0);
            }
        }
    }

    fn assert_order_preserved(layout: &CanvasLayout) {
        for p in &layout.placements {
            for q in &layout.placements {
                let (ps, qs) = (p.source.center(), q.source.center());
                let (pd, qd) = (p.destination.center(), q.destination.center());
                if ps.0 < qs.0 {
                    assert!(pd.0 < qd.0);
                }
                if ps.1 < qs.1 {
                    assert!(pd.1 < qd.1);
                }
            }
        }
    }

    #[test]
    fn one_target_is_a_single_crop() {
        let r = PixelRect::new(10, 10, 50, 60);
        let plan = plan_type1(
            &selection(&[r]),
            ImageSize::new(100, 100),
            ViewKind::Global,
            &PlanConfig::default(),
        )
        .unwrap();
        assert_eq!(plan.kind, PlanKind::SingleCrop);
        assert_eq!(plan.crops, vec![r]);
    }

    #[test]
    fn empty_type1_selection_is_an_error() {
        let err = plan_type1(
            &BTreeMap::new(),
            ImageSize::new(9, 9),
            ViewKind::Global,
            &PlanConfig::default(),
        );
        assert_eq!(err, Err(PlanError::EmptySelection));
    }

    #[test]
    fn close_targets_are_combined() {
        let a = PixelRect::new(0, 0, 100, 100);
        let b = PixelRect::new(100, 0, 200, 100);
        let plan = plan_type1(
            &selection(&[a, b]),
            ImageSize::new(3000, 3000),
            ViewKind::Global,
            &PlanConfig::default(),
        )
        .unwrap();
        assert_eq!(plan.kind, PlanKind::CombinedRect);
        assert_eq!(plan.crops, vec![PixelRect::new(0, 0, 200, 100)]);
    }

    #[test]
    fn distant_targets_are_pasted_in_order() {
        let a = PixelRect::new(2500, 100, 2700, 300);
        let b = PixelRect::new(100, 1800, 400, 2000);
        let plan = plan_type1(
            &selection(&[a, b]),
            ImageSize::new(3000, 2400),
            ViewKind::Global,
            &PlanConfig::default(),
        )
        .unwrap();
        assert_eq!(plan.kind, PlanKind::CanvasPaste);
        let layout = plan.canvas.as_ref().unwrap();
        assert_eq!(layout.placements.len(), 2);
        let (da, db) = (
            layout.placements[0].destination,
            layout.placements[1].destination,
        );
        // a is right of and above b
        assert!(da.center().0 > db.center().0);
        assert!(da.center().1 < db.center().1);
        assert_layout_valid(layout);
    }

    #[test]
    fn global_local_is_interleaved_with_full_image_first() {
        let a = PixelRect::new(0, 0, 10, 10);
        let b = PixelRect::new(20, 20, 30, 30);
        let img = ImageSize::new(64, 64);
        let plan = plan_type1(
            &selection(&[a, b]),
            img,
            ViewKind::GlobalLocal,
            &PlanConfig::default(),
        )
        .unwrap();
        assert_eq!(plan.kind, PlanKind::Interleaved);
        assert_eq!(plan.crops, vec![img.full_rect(), a, b]);
        assert_eq!(plan.highlight_rects, Some(vec![a, b]));
    }

    #[test]
    fn type2_fallbacks() {
        let img = ImageSize::new(640, 480);
        let cfg = PlanConfig::default();
        let empty = plan_type2(&[], img, ViewKind::Global, &cfg);
        assert_eq!(empty.kind, PlanKind::SingleCrop);
        assert_eq!(empty.crops, vec![img.full_rect()]);
        let r = PixelRect::new(1, 2, 3, 4);
        assert_eq!(plan_type2(&[r], img, ViewKind::Global, &cfg).crops, vec![r]);
    }

    #[test]
    fn type2_two_rects_make_a_canvas() {
        let img = ImageSize::new(640, 480);
        let rects = [
            PixelRect::new(400, 300, 500, 400),
            PixelRect::new(10, 20, 110, 90),
        ];
        let plan = plan_type2(&rects, img, ViewKind::Global, &PlanConfig::default());
        assert_eq!(plan.kind, PlanKind::CanvasPaste);
        let layout = plan.canvas.unwrap();
        assert_layout_valid(&layout);
        assert_order_preserved(&layout);
    }

    #[test]
    fn opposite_corner_squares_stay_symmetric() {
        let img = ImageSize::new(1000, 1000);
        let rects = [
            PixelRect::new(0, 0, 100, 100),
            PixelRect::new(900, 900, 1000, 1000),
        ];
        let layout = build_canvas(&rects, img, DEFAULT_CANVAS).unwrap();
        let (a, b) = (
            layout.placements[0].destination,
            layout.placements[1].destination,
        );
        assert_eq!(a, PixelRect::new(0, 0, 100, 100));
        assert_eq!((b.width(), b.height()), (100, 100));
        assert_eq!((b.x1, b.y1), (1008, 1008));
    }

    #[test]
    fn tiny_rects_are_not_shrunk() {
        let img = ImageSize::new(2000, 2000);
        let rects = [
            PixelRect::new(100, 100, 120, 130),
            PixelRect::new(1500, 1600, 1540, 1610),
        ];
        let layout = build_canvas(&rects, img, DEFAULT_CANVAS).unwrap();
        for p in &layout.placements {
            assert_eq!(p.source.width(), p.destination.width());
            assert_eq!(p.source.height(), p.destination.height());
        }
    }

    #[test]
    fn clustered_rects_shrink_until_separate() {
        let img = ImageSize::new(1008, 1008);
        let rects = [
            PixelRect::new(300, 300, 700, 700),
            PixelRect::new(350, 320, 800, 650),
            PixelRect::new(250, 400, 600, 900),
        ];
        let layout = build_canvas(&rects, img, DEFAULT_CANVAS).unwrap();
        assert_layout_valid(&layout);
        assert_order_preserved(&layout);
        assert!(layout.placements[0].destination.width() < 400);
    }

    #[test]
    fn canvas_errors() {
        let img = ImageSize::new(100, 100);
        let ok = PixelRect::new(0, 0, 10, 10);
        assert_eq!(
            build_canvas(&[ok], img, DEFAULT_CANVAS),
            Err(CanvasError::TooFewRects(1))
        );
        let empty = PixelRect::new(5, 5, 5, 9);
        assert_eq!(
            build_canvas(&[ok, empty], img, DEFAULT_CANVAS),
            Err(CanvasError::ZeroArea(empty))
        );
        assert_eq!(
            build_canvas(&[ok, ok], img, DEFAULT_CANVAS),
            Err(CanvasError::Inseparable)
        );
    }

    #[test]
    fn coincident_type2_rects_fall_back_to_combined() {
        let img = ImageSize::new(100, 100);
        let a = PixelRect::new(10, 10, 30, 30);
        let b = PixelRect::new(10, 10, 30, 30);
        let plan = plan_type2(&[a, b], img, ViewKind::Global, &PlanConfig::default());
        assert_eq!(plan.kind, PlanKind::CombinedRect);
    }

    fn gradient_png(w: u32, h: u32) -> Vec<u8> {
        let img = RgbImage::from_fn(w, h, |x, y| Rgb([(x % 256) as u8, (y % 256) as u8, 77]));
        encode(&DynamicImage::ImageRgb8(img)).unwrap()
    }

    #[test]
    fn full_image_crop_keeps_pixels() {
        let png = gradient_png(40, 30);
        let plan = InferencePlan::single(ImageSize::new(40, 30).full_rect());
        let out = execute_plan(&plan, &png).unwrap();
        let a = image::load_from_memory(&png).unwrap().to_rgb8();
        let b = image::load_from_memory(&out[0]).unwrap().to_rgb8();
        assert_eq!(a, b);
    }

    #[test]
    fn crop_has_rect_dimensions() {
        let png = gradient_png(40, 30);
        let out = execute_plan(&InferencePlan::single(PixelRect::new(5, 7, 15, 17)), &png).unwrap();
        let img = image::load_from_memory(&out[0]).unwrap();
        assert_eq!((img.width(), img.height()), (10, 10));
        assert_eq!(img.to_rgb8().get_pixel(0, 0), &Rgb([5, 7, 77]));
    }

    #[test]
    fn out_of_bounds_and_garbage() {
        let png = gradient_png(10, 10);
        let plan = InferencePlan::single(PixelRect::new(0, 0, 11, 5));
        assert!(matches!(
            execute_plan(&plan, &png),
            Err(ExecuteError::OutOfBounds { .. })
        ));
        assert!(matches!(
            execute_plan(&plan, b"nope"),
            Err(ExecuteError::Decode(_))
        ));
    }

    #[test]
    fn canvas_pixels_match_sources() {
        // flat colored blocks so resampling leaves interiors unchanged
        let mut img = RgbImage::from_pixel(600, 400, Rgb([0, 0, 0]));
        for (x, y) in [(20u32, 20u32), (450, 250)] {
            for dy in 0..100 {
                for dx in 0..100 {
                    img.put_pixel(x + dx, y + dy, Rgb([(x / 2) as u8, 200, (y / 2) as u8]));
                }
            }
        }
        let png = encode(&DynamicImage::ImageRgb8(img.clone())).unwrap();
        let rects = vec![
            PixelRect::new(20, 20, 120, 120),
            PixelRect::new(450, 250, 550, 350),
        ];
        let plan = plan_type2(
            &rects,
            ImageSize::new(600, 400),
            ViewKind::Global,
            &PlanConfig::default(),
        );
        let out = execute_plan(&plan, &png).unwrap();
        let canvas = image::load_from_memory(&out[0]).unwrap().to_rgb8();
        assert_eq!(canvas.dimensions(), (1008, 1008));
        for p in &plan.canvas.unwrap().placements {
            let (cx, cy) = p.destination.center();
            let (sx, sy) = p.source.center();
            assert_eq!(
                canvas.get_pixel(cx as u32, cy as u32),
                img.get_pixel(sx as u32, sy as u32)
            );
        }
    }

    #[test]
    fn interleaved_output_order_and_highlight() {
        let png = gradient_png(64, 64);
        let a = PixelRect::new(8, 8, 24, 24);
        let b = PixelRect::new(32, 40, 60, 60);
        let plan = InferencePlan::interleaved(ImageSize::new(64, 64), vec![a, b]);
        let out = execute_plan(&plan, &png).unwrap();
        assert_eq!(out.len(), 3);
        let full = image::load_from_memory(&out[0]).unwrap().to_rgb8();
        assert_eq!(full.dimensions(), (64, 64));
        assert_eq!(full.get_pixel(8, 8), &HIGHLIGHT_COLOR);
        assert_eq!(full.get_pixel(11, 15), &HIGHLIGHT_COLOR);
        assert_eq!(full.get_pixel(12, 15), &Rgb([12, 15, 77]));
        assert_eq!(full.get_pixel(23, 23), &HIGHLIGHT_COLOR);
        let second = image::load_from_memory(&out[2]).unwrap();
        assert_eq!((second.width(), second.height()), (28, 20));
    }

    #[test]
    fn plan_json_shape() {
        let plan = InferencePlan::single(PixelRect::new(0, 0, 4, 4));
        let json = serde_json::to_string(&plan).unwrap();
        assert_eq!(
            json,
            r#"{"kind":"single_crop","crops":[{"x0":0,"y0":0,"x1":4,"y1":4}]}"#
        );
        let back: InferencePlan = serde_json::from_str(&json).unwrap();
        assert_eq!(back, plan);
    }
}
