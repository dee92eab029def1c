//! Axis-aligned box arithmetic and the invertible spatial transforms used to
//! build perturbed views.
//!
//! All coordinates are real-valued pixel positions with the origin at the
//! top-left corner, x growing rightward and y growing downward. Rotation and
//! scaling pivot on the image center.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid box [{x1}, {y1}, {x2}, {y2}]: requires finite x1 < x2 and y1 < y2")]
    InvalidBox { x1: f64, y1: f64, x2: f64, y2: f64 },
    #[error("image dimensions must be positive, got {width}x{height}")]
    InvalidDims { width: u32, height: u32 },
    #[error("box collapsed to zero area after clamping to {width}x{height}")]
    DegenerateResult { width: u32, height: u32 },
}

/// Pixel-space rectangle `[x1, y1, x2, y2]`.
///
/// Construction rejects non-finite coordinates and zero or negative extents,
/// so every value of this type has positive area.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeometryError> {
        let finite = x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite();
        if !finite || x1 >= x2 || y1 >= y2 {
            return Err(GeometryError::InvalidBox { x1, y1, x2, y2 });
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn from_array(c: [f64; 4]) -> Result<Self, GeometryError> {
        Self::new(c[0], c[1], c[2], c[3])
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }
    pub fn x2(&self) -> f64 {
        self.x2
    }
    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    /// Intersection area with `other`, zero when disjoint or merely touching.
    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Whether the box lies inside `[0, width] x [0, height]`.
    pub fn is_within(&self, dims: ImageDims) -> bool {
        self.x1 >= 0.0
            && self.y1 >= 0.0
            && self.x2 <= f64::from(dims.width)
            && self.y2 <= f64::from(dims.height)
    }

    /// Clamp into the frame. Returns `DegenerateResult` if nothing remains.
    pub fn clamp_to(&self, dims: ImageDims) -> Result<BoundingBox, GeometryError> {
        let w = f64::from(dims.width);
        let h = f64::from(dims.height);
        let x1 = self.x1.clamp(0.0, w);
        let x2 = self.x2.clamp(0.0, w);
        let y1 = self.y1.clamp(0.0, h);
        let y2 = self.y2.clamp(0.0, h);
        BoundingBox::new(x1, y1, x2, y2).map_err(|_| GeometryError::DegenerateResult {
            width: dims.width,
            height: dims.height,
        })
    }

    /// Smallest box enclosing all `points`. `None` if the points span no area.
    pub fn enclosing(points: &[(f64, f64)]) -> Option<BoundingBox> {
        let (mut x1, mut y1) = (f64::INFINITY, f64::INFINITY);
        let (mut x2, mut y2) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for &(x, y) in points {
            x1 = x1.min(x);
            y1 = y1.min(y);
            x2 = x2.max(x);
            y2 = y2.max(y);
        }
        BoundingBox::new(x1, y1, x2, y2).ok()
    }

    pub fn corners(&self) -> [(f64, f64); 4] {
        [
            (self.x1, self.y1),
            (self.x2, self.y1),
            (self.x2, self.y2),
            (self.x1, self.y2),
        ]
    }

    /// Round every coordinate to `decimals` places (serialization helper).
    pub fn rounded(&self, decimals: i32) -> BoundingBox {
        let f = 10f64.powi(decimals);
        let r = |v: f64| (v * f).round() / f;
        // Rounding cannot invert the ordering of coordinates that differ by
        // more than one unit at this precision; fall back to the raw box.
        BoundingBox::new(r(self.x1), r(self.y1), r(self.x2), r(self.y2)).unwrap_or(*self)
    }

    /// Total order on coordinates, used to canonicalize pools of boxes.
    pub fn canonical_cmp(&self, other: &BoundingBox) -> std::cmp::Ordering {
        self.x1
            .total_cmp(&other.x1)
            .then(self.y1.total_cmp(&other.y1))
            .then(self.x2.total_cmp(&other.x2))
            .then(self.y2.total_cmp(&other.y2))
    }
}

impl fmt::Display for BoundingBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.x1, self.y1, self.x2, self.y2)
    }
}

impl Serialize for BoundingBox {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_array().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for BoundingBox {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let c = <[f64; 4]>::deserialize(deserializer)?;
        BoundingBox::from_array(c).map_err(serde::de::Error::custom)
    }
}

/// Image extent in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageDims {
    pub width: u32,
    pub height: u32,
}

impl ImageDims {
    pub fn new(width: u32, height: u32) -> Result<Self, GeometryError> {
        if width == 0 || height == 0 {
            return Err(GeometryError::InvalidDims { width, height });
        }
        Ok(Self { width, height })
    }

    fn center(&self) -> (f64, f64) {
        (f64::from(self.width) / 2.0, f64::from(self.height) / 2.0)
    }
}

/// One invertible spatial perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransformSpec {
    Identity,
    /// Counterclockwise on screen, in degrees, about the image center.
    Rotate {
        degrees: f64,
    },
    /// Uniform zoom about the image center; the canvas is resized with it.
    Scale {
        factor: f64,
    },
    Translate {
        dx: f64,
        dy: f64,
    },
    HorizontalFlip,
}

impl TransformSpec {
    pub fn inverse(&self) -> TransformSpec {
        match *self {
            TransformSpec::Identity => TransformSpec::Identity,
            TransformSpec::Rotate { degrees } => TransformSpec::Rotate { degrees: -degrees },
            TransformSpec::Scale { factor } => TransformSpec::Scale {
                factor: 1.0 / factor,
            },
            TransformSpec::Translate { dx, dy } => TransformSpec::Translate { dx: -dx, dy: -dy },
            TransformSpec::HorizontalFlip => TransformSpec::HorizontalFlip,
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, TransformSpec::Identity)
    }

    /// Canvas size of the transformed view.
    pub fn output_dims(&self, dims: ImageDims) -> ImageDims {
        match *self {
            TransformSpec::Scale { factor } => {
                let scale = |v: u32| ((f64::from(v) * factor).round() as u32).max(1);
                ImageDims {
                    width: scale(dims.width),
                    height: scale(dims.height),
                }
            }
            _ => dims,
        }
    }

    /// Affine map from the original frame (`dims`) into the view frame.
    pub fn forward_map(&self, dims: ImageDims) -> Affine {
        let (cx, cy) = dims.center();
        match *self {
            TransformSpec::Identity => Affine::IDENTITY,
            TransformSpec::Rotate { degrees } => {
                let (s, c) = degrees.to_radians().sin_cos();
                // p' = C + R (p - C), R = [[c, s], [-s, c]] in y-down coordinates.
                Affine::new([c, s, cx - c * cx - s * cy, -s, c, cy + s * cx - c * cy])
            }
            TransformSpec::Scale { .. } => {
                let out = self.output_dims(dims);
                let sx = f64::from(out.width) / f64::from(dims.width);
                let sy = f64::from(out.height) / f64::from(dims.height);
                Affine::new([sx, 0.0, 0.0, 0.0, sy, 0.0])
            }
            TransformSpec::Translate { dx, dy } => Affine::new([1.0, 0.0, dx, 0.0, 1.0, dy]),
            TransformSpec::HorizontalFlip => {
                Affine::new([-1.0, 0.0, f64::from(dims.width), 0.0, 1.0, 0.0])
            }
        }
    }

    /// Affine map from the view frame back into the original frame.
    pub fn inverse_map(&self, dims_original: ImageDims) -> Affine {
        self.forward_map(dims_original)
            .inverse()
            .expect("view transforms are non-singular")
    }
}

/// Row-major 2x3 affine map `[a, b, c, d, e, f]`: `x' = a x + b y + c`,
/// `y' = d x + e y + f`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine {
    m: [f64; 6],
}

impl Affine {
    pub const IDENTITY: Affine = Affine {
        m: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
    };

    pub fn new(m: [f64; 6]) -> Self {
        Self { m }
    }

    pub fn coefficients(&self) -> [f64; 6] {
        self.m
    }

    pub fn apply(&self, (x, y): (f64, f64)) -> (f64, f64) {
        let m = &self.m;
        (m[0] * x + m[1] * y + m[2], m[3] * x + m[4] * y + m[5])
    }

    pub fn inverse(&self) -> Option<Affine> {
        let [a, b, c, d, e, f] = self.m;
        let det = a * e - b * d;
        if det == 0.0 || !det.is_finite() {
            return None;
        }
        let ia = e / det;
        let ib = -b / det;
        let id = -d / det;
        let ie = a / det;
        Some(Affine::new([
            ia,
            ib,
            -(ia * c + ib * f),
            id,
            ie,
            -(id * c + ie * f),
        ]))
    }
}

/// Intersection-over-union of two boxes, in `[0, 1]`.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    if a == b {
        return 1.0;
    }
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Map a box from the original frame into the view produced by `t`.
///
/// The four corners go through the affine map and the result is their
/// axis-aligned hull, clamped to the view canvas. For rotations this is the
/// minimal enclosing box of the rotated rectangle.
pub fn apply_transform(
    bbox: &BoundingBox,
    t: &TransformSpec,
    dims: ImageDims,
) -> Result<BoundingBox, GeometryError> {
    let out_dims = t.output_dims(dims);
    let degenerate = GeometryError::DegenerateResult {
        width: out_dims.width,
        height: out_dims.height,
    };
    let map = t.forward_map(dims);
    let mapped = bbox.corners().map(|p| map.apply(p));
    BoundingBox::enclosing(&mapped)
        .ok_or(degenerate)?
        .clamp_to(out_dims)
}

/// Map a box observed in the view produced by `t` back into the original
/// frame, clamped to `dims_original`.
///
/// Translate, scale, flip and identity invert the corner map exactly. For a
/// rotation the observed box is treated as the enclosing hull of a rotated
/// axis-aligned rectangle: the center is rotated back and the half-extents
/// are recovered by solving the hull-growth relation, so that
/// `invert_transform(apply_transform(b))` returns `b` for interior boxes. When
/// the observed box is too elongated for that relation to have a positive
/// solution, the hull of the back-rotated corners is used instead.
pub fn invert_transform(
    bbox: &BoundingBox,
    t: &TransformSpec,
    dims_original: ImageDims,
) -> Result<BoundingBox, GeometryError> {
    let degenerate = GeometryError::DegenerateResult {
        width: dims_original.width,
        height: dims_original.height,
    };
    let inv = t.inverse_map(dims_original);
    let candidate = match *t {
        TransformSpec::Rotate { degrees } => {
            deflate_rotated(bbox, degrees, &inv).or_else(|| hull_of_mapped(bbox, &inv))
        }
        _ => hull_of_mapped(bbox, &inv),
    };
    candidate.ok_or(degenerate)?.clamp_to(dims_original)
}

fn hull_of_mapped(bbox: &BoundingBox, map: &Affine) -> Option<BoundingBox> {
    let mapped = bbox.corners().map(|p| map.apply(p));
    BoundingBox::enclosing(&mapped)
}

fn deflate_rotated(bbox: &BoundingBox, degrees: f64, inv: &Affine) -> Option<BoundingBox> {
    let (s, c) = degrees.to_radians().sin_cos();
    let (s, c) = (s.abs(), c.abs());
    let det = c * c - s * s;
    if det <= 1e-6 {
        return None;
    }
    let hw_obs = bbox.width() / 2.0;
    let hh_obs = bbox.height() / 2.0;
    let hw = (c * hw_obs - s * hh_obs) / det;
    let hh = (c * hh_obs - s * hw_obs) / det;
    if hw <= 0.0 || hh <= 0.0 {
        return None;
    }
    let (cx, cy) = inv.apply(bbox.center());
    BoundingBox::new(cx - hw, cy - hh, cx + hw, cy + hh).ok()
}
