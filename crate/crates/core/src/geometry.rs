//! Grid- and pixel-space rectangles shared by every stage of the pipeline.

use serde::{Deserialize, Serialize};

/// Image extent in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageSize {
    pub width: u32,
    pub height: u32,
}

impl ImageSize {
    pub const fn new(width: u32, height: u32) -> Self {
        Self { width, height }
    }

    pub fn full_rect(&self) -> PixelRect {
        PixelRect::new(0, 0, self.width, self.height)
    }
}

/// Rows × columns of a map grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridDims {
    pub rows: usize,
    pub cols: usize,
}

impl GridDims {
    pub const fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols }
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }
}

/// Rectangle of grid cells with inclusive bounds, so a single cell has area 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridRect {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl GridRect {
    pub const fn new(top: usize, left: usize, bottom: usize, right: usize) -> Self {
        Self {
            top,
            left,
            bottom,
            right,
        }
    }

    pub fn height(&self) -> usize {
        self.bottom - self.top + 1
    }

    pub fn width(&self) -> usize {
        self.right - self.left + 1
    }

    pub fn area(&self) -> usize {
        self.height() * self.width()
    }

    pub fn contains_cell(&self, row: usize, col: usize) -> bool {
        (self.top..=self.bottom).contains(&row) && (self.left..=self.right).contains(&col)
    }

    pub fn contains(&self, other: &GridRect) -> bool {
        self.top <= other.top
            && self.left <= other.left
            && self.bottom >= other.bottom
            && self.right >= other.right
    }

    pub fn intersection_area(&self, other: &GridRect) -> usize {
        let top = self.top.max(other.top);
        let bottom = self.bottom.min(other.bottom);
        let left = self.left.max(other.left);
        let right = self.right.min(other.right);
        if top > bottom || left > right {
            0
        } else {
            (bottom - top + 1) * (right - left + 1)
        }
    }

    pub fn iou(&self, other: &GridRect) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        inter as f64 / union as f64
    }

    pub fn fits(&self, dims: GridDims) -> bool {
        self.top <= self.bottom
            && self.left <= self.right
            && self.bottom < dims.rows
            && self.right < dims.cols
    }
}

/// Half-open pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PixelRect {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl PixelRect {
    pub const fn new(x0: u32, y0: u32, x1: u32, y1: u32) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> u32 {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> u32 {
        self.y1.saturating_sub(self.y0)
    }

    pub fn area(&self) -> u64 {
        u64::from(self.width()) * u64::from(self.height())
    }

    pub fn is_empty(&self) -> bool {
        self.area() == 0
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (f64::from(self.x0) + f64::from(self.x1)) / 2.0,
            (f64::from(self.y0) + f64::from(self.y1)) / 2.0,
        )
    }

    pub fn center_distance(&self, other: &PixelRect) -> f64 {
        let (ax, ay) = self.center();
        let (bx, by) = other.center();
        (ax - bx).hypot(ay - by)
    }

    pub fn intersection(&self, other: &PixelRect) -> Option<PixelRect> {
        let r = PixelRect::new(
            self.x0.max(other.x0),
            self.y0.max(other.y0),
            self.x1.min(other.x1),
            self.y1.min(other.y1),
        );
        (r.x0 < r.x1 && r.y0 < r.y1).then_some(r)
    }

    pub fn intersection_area(&self, other: &PixelRect) -> u64 {
        self.intersection(other).map_or(0, |r| r.area())
    }

    pub fn union_area(&self, other: &PixelRect) -> u64 {
        self.area() + other.area() - self.intersection_area(other)
    }

    pub fn iou(&self, other: &PixelRect) -> f64 {
        let union = self.union_area(other);
        if union == 0 {
            0.0
        } else {
            self.intersection_area(other) as f64 / union as f64
        }
    }

    /// Smallest rectangle enclosing both.
    pub fn bounding(&self, other: &PixelRect) -> PixelRect {
        PixelRect::new(
            self.x0.min(other.x0),
            self.y0.min(other.y0),
            self.x1.max(other.x1),
            self.y1.max(other.y1),
        )
    }

    pub fn contains(&self, other: &PixelRect) -> bool {
        self.x0 <= other.x0 && self.y0 <= other.y0 && self.x1 >= other.x1 && self.y1 >= other.y1
    }

    pub fn within(&self, size: ImageSize) -> bool {
        self.x0 <= self.x1 && self.y0 <= self.y1 && self.x1 <= size.width && self.y1 <= size.height
    }
}

/// Bounding box of a non-empty set of rectangles.
pub fn bounding_box<'a, I>(rects: I) -> Option<PixelRect>
where
    I: IntoIterator<Item = &'a PixelRect>,
{
    rects.into_iter().copied().reduce(|a, b| a.bounding(&b))
}

/// Maps a grid rectangle to the pixels it covers.
///
/// Cell `(r, c)` spans `[c·W/cols, (c+1)·W/cols) × [r·H/rows, (r+1)·H/rows)`; the
/// union is rounded outward to whole pixels and clamped to the image.
pub fn grid_to_pixels(rect: &GridRect, dims: GridDims, image: ImageSize) -> PixelRect {
    let floor_div = |num: u64, den: u64| num / den;
    let ceil_div = |num: u64, den: u64| num.div_ceil(den);
    let (w, h) = (u64::from(image.width), u64::from(image.height));
    let (rows, cols) = (dims.rows as u64, dims.cols as u64);
    let x0 = floor_div(rect.left as u64 * w, cols);
    let x1 = ceil_div((rect.right as u64 + 1) * w, cols).min(w);
    let y0 = floor_div(rect.top as u64 * h, rows);
    let y1 = ceil_div((rect.bottom as u64 + 1) * h, rows).min(h);
    PixelRect::new(x0 as u32, y0 as u32, x1 as u32, y1 as u32)
}

/// Total area covered by a union of rectangles, by coordinate compression.
pub fn union_area(rects: &[PixelRect]) -> u64 {
    let rects: Vec<&PixelRect> = rects.iter().filter(|r| !r.is_empty()).collect();
    if rects.is_empty() {
        return 0;
    }
    let mut xs: Vec<u32> = rects.iter().flat_map(|r| [r.x0, r.x1]).collect();
    xs.sort_unstable();
    xs.dedup();
    let mut total = 0u64;
    for win in xs.windows(2) {
        let (xa, xb) = (win[0], win[1]);
        let mut spans: Vec<(u32, u32)> = rects
            .iter()
            .filter(|r| r.x0 <= xa && r.x1 >= xb)
            .map(|r| (r.y0, r.y1))
            .collect();
        spans.sort_unstable();
        let mut covered = 0u64;
        let mut cur: Option<(u32, u32)> = None;
        for (a, b) in spans {
            match cur {
                Some((ca, cb)) if a <= cb => cur = Some((ca, cb.max(b))),
                Some((ca, cb)) => {
                    covered += u64::from(cb - ca);
                    cur = Some((a, b));
                }
                None => cur = Some((a, b)),
            }
        }
        if let Some((ca, cb)) = cur {
            covered += u64::from(cb - ca);
        }
        total += covered * u64::from(xb - xa);
    }
    total
}
