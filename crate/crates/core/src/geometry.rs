//! Integer axis-aligned boxes.
//!
//! Boxes are half-open: `[x1, y1, x2, y2]` covers the pixels with
//! `x1 <= x < x2` and `y1 <= y < y2`, so the area is `(x2 - x1) * (y2 - y1)`.
//! IoU is computed exactly as a ratio of integer areas and only turned into a
//! float at the edge of the API.

use std::fmt;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Extent of the normalized coordinate system used by grounding models.
pub const NORMALIZED_EXTENT: i64 = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CoordSpace {
    Pixel { width: i64, height: i64 },
    Normalized1000,
}

impl CoordSpace {
    pub fn extent(&self) -> (i64, i64) {
        match *self {
            CoordSpace::Pixel { width, height } => (width, height),
            CoordSpace::Normalized1000 => (NORMALIZED_EXTENT, NORMALIZED_EXTENT),
        }
    }
}

impl fmt::Display for CoordSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoordSpace::Pixel { width, height } => write!(f, "pixel({width}x{height})"),
            CoordSpace::Normalized1000 => f.write_str("normalized1000"),
        }
    }
}

/// A validated box: positive area and inside its coordinate space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawBBox", into = "RawBBox")]
pub struct BBox {
    x1: i64,
    y1: i64,
    x2: i64,
    y2: i64,
    space: CoordSpace,
}

#[derive(Serialize, Deserialize)]
struct RawBBox {
    coords: [i64; 4],
    space: CoordSpace,
}

impl TryFrom<RawBBox> for BBox {
    type Error = Error;
    fn try_from(raw: RawBBox) -> Result<Self> {
        BBox::new(raw.coords, raw.space)
    }
}

impl From<BBox> for RawBBox {
    fn from(b: BBox) -> Self {
        RawBBox {
            coords: b.coords(),
            space: b.space,
        }
    }
}

impl BBox {
    pub fn new(coords: [i64; 4], space: CoordSpace) -> Result<Self> {
        let [x1, y1, x2, y2] = coords;
        if x1 >= x2 || y1 >= y2 {
            return Err(Error::InvalidBox(format!(
                "{coords:?} has zero or negative area"
            )));
        }
        let (w, h) = space.extent();
        if w <= 0 || h <= 0 {
            return Err(Error::InvalidBox(format!("empty canvas {space}")));
        }
        if x1 < 0 || y1 < 0 || x2 > w || y2 > h {
            return Err(Error::InvalidBox(format!("{coords:?} outside {space}")));
        }
        Ok(BBox {
            x1,
            y1,
            x2,
            y2,
            space,
        })
    }

    pub fn pixel(coords: [i64; 4], width: i64, height: i64) -> Result<Self> {
        Self::new(coords, CoordSpace::Pixel { width, height })
    }

    pub fn normalized(coords: [i64; 4]) -> Result<Self> {
        Self::new(coords, CoordSpace::Normalized1000)
    }

    /// Clamps raw coordinates to the canvas of `space`, then validates.
    pub fn clipped(coords: [i64; 4], space: CoordSpace) -> Result<Self> {
        let (w, h) = space.extent();
        let [x1, y1, x2, y2] = coords;
        Self::new(
            [x1.clamp(0, w), y1.clamp(0, h), x2.clamp(0, w), y2.clamp(0, h)],
            space,
        )
    }

    pub fn coords(&self) -> [i64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn space(&self) -> CoordSpace {
        self.space
    }

    pub fn width(&self) -> i64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> i64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> i64 {
        self.width() * self.height()
    }

    /// The same coordinates re-homed into another coordinate space.
    pub fn with_space(&self, space: CoordSpace) -> Result<Self> {
        Self::new(self.coords(), space)
    }

    pub fn intersection_area(&self, other: &BBox) -> i64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0 || h <= 0 {
            0
        } else {
            w * h
        }
    }

    pub fn overlaps(&self, other: &BBox) -> bool {
        self.intersection_area(other) > 0
    }

    /// Exact IoU as a reduced ratio of integer areas.
    pub fn iou_exact(&self, other: &BBox) -> Result<Ratio<i64>> {
        self.check_space(other)?;
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        Ok(Ratio::new(inter, union))
    }

    pub fn iou(&self, other: &BBox) -> Result<f64> {
        let r = self.iou_exact(other)?;
        Ok(*r.numer() as f64 / *r.denom() as f64)
    }

    fn check_space(&self, other: &BBox) -> Result<()> {
        if self.space != other.space {
            return Err(Error::CoordSpaceMismatch(
                self.space.to_string(),
                other.space.to_string(),
            ));
        }
        Ok(())
    }

    /// Maps a pixel box onto the 0..=1000 grid by `round(1000 * c / extent)`.
    pub fn to_normalized_1000(&self) -> Result<BBox> {
        let CoordSpace::Pixel { width, height } = self.space else {
            return Err(Error::InvalidArgument(
                "box is already normalized".to_string(),
            ));
        };
        let nx = |c: i64| round_half_up(Ratio::new(c * NORMALIZED_EXTENT, width));
        let ny = |c: i64| round_half_up(Ratio::new(c * NORMALIZED_EXTENT, height));
        BBox::normalized([nx(self.x1), ny(self.y1), nx(self.x2), ny(self.y2)])
    }

    /// Inverse of [`BBox::to_normalized_1000`] up to rounding.
    pub fn from_normalized_1000(&self, width: i64, height: i64) -> Result<BBox> {
        if self.space != CoordSpace::Normalized1000 {
            return Err(Error::InvalidArgument("box is not normalized".to_string()));
        }
        check_extent(width, height)?;
        let px = |c: i64| round_half_up(Ratio::new(c * width, NORMALIZED_EXTENT));
        let py = |c: i64| round_half_up(Ratio::new(c * height, NORMALIZED_EXTENT));
        BBox::pixel([px(self.x1), py(self.y1), px(self.x2), py(self.y2)], width, height)
    }

    /// Scales then offsets every coordinate, rounding half-up.
    ///
    /// The result lives in the pixel space spanned by the transformed source
    /// canvas; callers pasting into a larger canvas re-home it with
    /// [`BBox::with_space`].
    pub fn apply_transform(&self, t: &AffineTransform) -> Result<BBox> {
        let CoordSpace::Pixel { width, height } = self.space else {
            return Err(Error::InvalidArgument(
                "transforms apply to pixel-space boxes".to_string(),
            ));
        };
        let coords = t.map_coords(self.coords());
        let [x1, y1, x2, y2] = coords;
        if x1 >= x2 || y1 >= y2 {
            return Err(Error::DegenerateTransform(self.coords()));
        }
        let [_, _, cw, ch] = t.map_coords([0, 0, width, height]);
        BBox::pixel(coords, cw, ch)
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        format_box_literal(f, self.coords())
    }
}

/// Writes `[x1, y1, x2, y2]`, the literal grounding models emit.
pub fn format_box_literal(f: &mut impl fmt::Write, c: [i64; 4]) -> fmt::Result {
    write!(f, "[{}, {}, {}, {}]", c[0], c[1], c[2], c[3])
}

pub fn box_literal(c: [i64; 4]) -> String {
    let mut s = String::new();
    format_box_literal(&mut s, c).expect("writing to a String");
    s
}

pub(crate) fn check_extent(width: i64, height: i64) -> Result<()> {
    if width <= 0 || height <= 0 {
        return Err(Error::InvalidArgument(format!(
            "canvas extent must be positive, got {width}x{height}"
        )));
    }
    Ok(())
}

/// `floor(r + 1/2)`, exact for any rational.
pub fn round_half_up(r: Ratio<i64>) -> i64 {
    let (n, d) = (*r.numer(), *r.denom());
    (2 * n + d).div_euclid(2 * d)
}

/// Uniform-in-kind affine map `c -> scale * c + offset` per axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawTransform", into = "RawTransform")]
pub struct AffineTransform {
    scale_x: Ratio<i64>,
    scale_y: Ratio<i64>,
    offset_x: i64,
    offset_y: i64,
}

#[derive(Serialize, Deserialize)]
struct RawTransform {
    scale_x: [i64; 2],
    scale_y: [i64; 2],
    offset_x: i64,
    offset_y: i64,
}

impl TryFrom<RawTransform> for AffineTransform {
    type Error = Error;
    fn try_from(raw: RawTransform) -> Result<Self> {
        let ratio = |[n, d]: [i64; 2]| {
            if d == 0 {
                Err(Error::InvalidArgument("zero scale denominator".to_string()))
            } else {
                Ok(Ratio::new(n, d))
            }
        };
        AffineTransform::new(
            ratio(raw.scale_x)?,
            ratio(raw.scale_y)?,
            raw.offset_x,
            raw.offset_y,
        )
    }
}

impl From<AffineTransform> for RawTransform {
    fn from(t: AffineTransform) -> Self {
        RawTransform {
            scale_x: [*t.scale_x.numer(), *t.scale_x.denom()],
            scale_y: [*t.scale_y.numer(), *t.scale_y.denom()],
            offset_x: t.offset_x,
            offset_y: t.offset_y,
        }
    }
}

impl AffineTransform {
    pub fn new(
        scale_x: Ratio<i64>,
        scale_y: Ratio<i64>,
        offset_x: i64,
        offset_y: i64,
    ) -> Result<Self> {
        let zero = Ratio::from_integer(0);
        if scale_x <= zero || scale_y <= zero {
            return Err(Error::InvalidArgument(format!(
                "scales must be positive, got {scale_x} and {scale_y}"
            )));
        }
        Ok(AffineTransform {
            scale_x,
            scale_y,
            offset_x,
            offset_y,
        })
    }

    pub fn identity() -> Self {
        Self::uniform(Ratio::from_integer(1), 0, 0)
    }

    /// Aspect-preserving scale followed by a translation.
    pub fn uniform(scale: Ratio<i64>, offset_x: i64, offset_y: i64) -> Self {
        Self::new(scale, scale, offset_x, offset_y).expect("caller passes a positive scale")
    }

    pub fn translation(offset_x: i64, offset_y: i64) -> Self {
        Self::uniform(Ratio::from_integer(1), offset_x, offset_y)
    }

    pub fn scale_x(&self) -> Ratio<i64> {
        self.scale_x
    }

    pub fn scale_y(&self) -> Ratio<i64> {
        self.scale_y
    }

    pub fn offset(&self) -> (i64, i64) {
        (self.offset_x, self.offset_y)
    }

    pub fn map_x(&self, x: i64) -> i64 {
        round_half_up(self.scale_x * x) + self.offset_x
    }

    pub fn map_y(&self, y: i64) -> i64 {
        round_half_up(self.scale_y * y) + self.offset_y
    }

    pub fn map_coords(&self, [x1, y1, x2, y2]: [i64; 4]) -> [i64; 4] {
        [self.map_x(x1), self.map_y(y1), self.map_x(x2), self.map_y(y2)]
    }

    /// `self` applied after `first`. The composed offset is rounded to an
    /// integer, so composing differs from sequential application by at most
    /// one pixel when `self` does not upscale.
    pub fn after(&self, first: &AffineTransform) -> AffineTransform {
        AffineTransform {
            scale_x: self.scale_x * first.scale_x,
            scale_y: self.scale_y * first.scale_y,
            offset_x: round_half_up(self.scale_x * first.offset_x) + self.offset_x,
            offset_y: round_half_up(self.scale_y * first.offset_y) + self.offset_y,
        }
    }
}
