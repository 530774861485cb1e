//! Normalized bounding-box algebra on the 1000×1000 grid.
//!
//! View windows travel through the tool protocol as integer boxes on a
//! 1000×1000 grid with a top-left origin. Crops are executed in pixel space
//! ([`PixelRect`]); [`to_pixels`] and [`from_pixels`] move between the two.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Side length of the normalized coordinate grid.
pub const GRID: u32 = 1000;

/// Cell boundaries of the 3×3 grid on the normalized frame.
pub const CELL_EDGES: [u32; 4] = [0, 333, 667, 1000];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GeometryError {
    #[error("invalid box [{0}, {1}, {2}, {3}]: need 0 <= min < max <= 1000 on both axes")]
    InvalidBox(i64, i64, i64, i64),
    #[error("image extent must be at least 1x1 pixel, got {0}x{1}")]
    EmptyImage(u32, u32),
    #[error("pixel rect ({0}, {1}, {2}, {3}) does not fit inside a {4}x{5} image")]
    RectOutOfBounds(u32, u32, u32, u32, u32, u32),
}

/// A view window on the normalized grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[i64; 4]", into = "[u32; 4]")]
pub struct NormBox {
    x_min: u32,
    y_min: u32,
    x_max: u32,
    y_max: u32,
}

impl NormBox {
    pub const FULL: NormBox = NormBox {
        x_min: 0,
        y_min: 0,
        x_max: GRID,
        y_max: GRID,
    };

    pub fn new(x_min: i64, y_min: i64, x_max: i64, y_max: i64) -> Result<Self, GeometryError> {
        let g = i64::from(GRID);
        let in_range = |v: i64| (0..=g).contains(&v);
        if !(in_range(x_min) && in_range(y_min) && in_range(x_max) && in_range(y_max))
            || x_min >= x_max
            || y_min >= y_max
        {
            return Err(GeometryError::InvalidBox(x_min, y_min, x_max, y_max));
        }
        Ok(Self {
            x_min: x_min as u32,
            y_min: y_min as u32,
            x_max: x_max as u32,
            y_max: y_max as u32,
        })
    }

    pub fn x_min(&self) -> u32 {
        self.x_min
    }
    pub fn y_min(&self) -> u32 {
        self.y_min
    }
    pub fn x_max(&self) -> u32 {
        self.x_max
    }
    pub fn y_max(&self) -> u32 {
        self.y_max
    }
    pub fn width(&self) -> u32 {
        self.x_max - self.x_min
    }
    pub fn height(&self) -> u32 {
        self.y_max - self.y_min
    }

    pub fn to_array(self) -> [u32; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    /// Cell `index` (row-major, 0..9) of the 3×3 grid laid over the frame.
    pub fn grid_cell(index: usize) -> NormBox {
        assert!(index < 9, "grid cell index {index} out of range");
        let (row, col) = (index / 3, index % 3);
        NormBox {
            x_min: CELL_EDGES[col],
            y_min: CELL_EDGES[row],
            x_max: CELL_EDGES[col + 1],
            y_max: CELL_EDGES[row + 1],
        }
    }

    /// Which grid cell equals this box, if any.
    pub fn as_grid_cell(&self) -> Option<usize> {
        (0..9).find(|&i| NormBox::grid_cell(i) == *self)
    }

    /// Grid cell (row-major) containing a normalized point; points on an edge
    /// belong to the cell to their right/below, except the outer edge.
    pub fn cell_of_point(x: f64, y: f64) -> usize {
        let idx = |v: f64| {
            CELL_EDGES[1..3]
                .iter()
                .filter(|&&e| v >= f64::from(e))
                .count()
        };
        idx(y) * 3 + idx(x)
    }

    pub fn intersection_area(&self, other: &NormBox) -> u64 {
        let w = self.x_max.min(other.x_max).saturating_sub(self.x_min.max(other.x_min));
        let h = self.y_max.min(other.y_max).saturating_sub(self.y_min.max(other.y_min));
        u64::from(w) * u64::from(h)
    }
}

impl TryFrom<[i64; 4]> for NormBox {
    type Error = GeometryError;
    fn try_from(v: [i64; 4]) -> Result<Self, Self::Error> {
        NormBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<NormBox> for [u32; 4] {
    fn from(b: NormBox) -> Self {
        b.to_array()
    }
}

/// How one view window relates to the next.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TransitionKind {
    ZoomIn,
    Backtrack,
    Drift,
    /// Identical consecutive boxes (or containment without area decrease).
    Degenerate,
}

impl TransitionKind {
    pub const ALL: [TransitionKind; 4] = [
        TransitionKind::ZoomIn,
        TransitionKind::Backtrack,
        TransitionKind::Drift,
        TransitionKind::Degenerate,
    ];

    pub fn index(self) -> usize {
        match self {
            TransitionKind::ZoomIn => 0,
            TransitionKind::Backtrack => 1,
            TransitionKind::Drift => 2,
            TransitionKind::Degenerate => 3,
        }
    }
}

pub fn area(b: &NormBox) -> u64 {
    u64::from(b.width()) * u64::from(b.height())
}

/// Proper-subset test. Shared edges are fine; equality is not.
pub fn strictly_contains(inner: &NormBox, outer: &NormBox) -> bool {
    inner != outer
        && inner.x_min >= outer.x_min
        && inner.y_min >= outer.y_min
        && inner.x_max <= outer.x_max
        && inner.y_max <= outer.y_max
}

pub fn classify_transition(b_t: &NormBox, b_next: &NormBox) -> TransitionKind {
    if b_t == b_next {
        TransitionKind::Degenerate
    } else if strictly_contains(b_next, b_t) {
        if area(b_next) < area(b_t) {
            TransitionKind::ZoomIn
        } else {
            TransitionKind::Degenerate
        }
    } else if strictly_contains(b_t, b_next) {
        TransitionKind::Backtrack
    } else {
        TransitionKind::Drift
    }
}

pub fn iou(a: &NormBox, b: &NormBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = area(a) + area(b) - inter;
    inter as f64 / union as f64
}

/// A rectangle in source-image pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelRect {
    pub left: u32,
    pub top: u32,
    pub width: u32,
    pub height: u32,
}

impl PixelRect {
    pub fn new(left: u32, top: u32, width: u32, height: u32) -> Self {
        Self {
            left,
            top,
            width,
            height,
        }
    }

    pub fn full(width: u32, height: u32) -> Self {
        Self::new(0, 0, width, height)
    }

    pub fn right(&self) -> u32 {
        self.left + self.width
    }
    pub fn bottom(&self) -> u32 {
        self.top + self.height
    }
    pub fn area(&self) -> u64 {
        u64::from(self.width) * u64::from(self.height)
    }

    /// Positive-area overlap.
    pub fn intersects(&self, other: &PixelRect) -> bool {
        self.left < other.right()
            && other.left < self.right()
            && self.top < other.bottom()
            && other.top < self.bottom()
    }

    pub fn contains_rect(&self, other: &PixelRect) -> bool {
        other.left >= self.left
            && other.top >= self.top
            && other.right() <= self.right()
            && other.bottom() <= self.bottom()
    }

    pub fn center(&self) -> (f64, f64) {
        (
            f64::from(self.left) + f64::from(self.width) / 2.0,
            f64::from(self.top) + f64::from(self.height) / 2.0,
        )
    }

    pub fn offset(&self, dx: u32, dy: u32) -> PixelRect {
        PixelRect::new(self.left + dx, self.top + dy, self.width, self.height)
    }
}

/// `round(num / den)` with halves rounded away from zero, for `num >= 0`.
fn div_round(num: u64, den: u64) -> u64 {
    (2 * num + den) / (2 * den)
}

/// Map one axis `[lo, hi)` of the normalized grid onto `extent` pixels.
fn axis_to_pixels(lo: u32, hi: u32, extent: u32) -> (u32, u32) {
    let g = u64::from(GRID);
    let e = u64::from(extent);
    let mut start = div_round(u64::from(lo) * e, g) as u32;
    let mut end = div_round(u64::from(hi) * e, g) as u32;
    if end <= start {
        if start < extent {
            end = start + 1;
        } else {
            start = extent - 1;
            end = extent;
        }
    }
    (start, end - start)
}

fn axis_from_pixels(start: u32, len: u32, extent: u32) -> (u32, u32) {
    let g = u64::from(GRID);
    let e = u64::from(extent);
    let mut lo = div_round(u64::from(start) * g, e) as u32;
    let mut hi = div_round(u64::from(start + len) * g, e) as u32;
    if hi <= lo {
        if lo < GRID {
            hi = lo + 1;
        } else {
            lo = GRID - 1;
            hi = GRID;
        }
    }
    (lo, hi)
}

/// Crop rectangle implied by `b` on an `image_w`×`image_h` image.
pub fn to_pixels(b: &NormBox, image_w: u32, image_h: u32) -> Result<PixelRect, GeometryError> {
    if image_w == 0 || image_h == 0 {
        return Err(GeometryError::EmptyImage(image_w, image_h));
    }
    let (left, width) = axis_to_pixels(b.x_min, b.x_max, image_w);
    let (top, height) = axis_to_pixels(b.y_min, b.y_max, image_h);
    Ok(PixelRect::new(left, top, width, height))
}

/// Normalized box of a pixel rectangle; inverse of [`to_pixels`] up to rounding.
pub fn from_pixels(r: &PixelRect, image_w: u32, image_h: u32) -> Result<NormBox, GeometryError> {
    if image_w == 0 || image_h == 0 {
        return Err(GeometryError::EmptyImage(image_w, image_h));
    }
    if r.width == 0 || r.height == 0 || r.right() > image_w || r.bottom() > image_h {
        return Err(GeometryError::RectOutOfBounds(
            r.left, r.top, r.width, r.height, image_w, image_h,
        ));
    }
    let (x_min, x_max) = axis_from_pixels(r.left, r.width, image_w);
    let (y_min, y_max) = axis_from_pixels(r.top, r.height, image_h);
    Ok(NormBox {
        x_min,
        y_min,
        x_max,
        y_max,
    })
}
