//! Slot geometry for flight patterns.
//!
//! Every pattern is laid out in a local frame where the pattern plane is
//! `z = 0`, slot 0 sits at the origin and the outline is walked
//! counterclockwise when viewed from `+z`. The local frame is then rotated by
//! the pattern's [`Orientation`] about the anchor and translated onto it.

use std::f64::consts::PI;
use std::fmt;
use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid pattern spec: {0}")]
    InvalidSpec(String),
    #[error("invalid admission rate {0}: must be > 0")]
    InvalidRate(f64),
    #[error("leg index {index} out of range 1..={max}")]
    IndexOutOfRange { index: usize, max: usize },
    #[error("pattern has {0} slot(s); clearance needs at least 2")]
    TooFewSlots(usize),
}

/// A point or displacement in meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 0.0 };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn dot(self, other: Vec3) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn cross(self, other: Vec3) -> Vec3 {
        Vec3::new(
            self.y * other.z - self.z * other.y,
            self.z * other.x - self.x * other.z,
            self.x * other.y - self.y * other.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn distance(self, other: Vec3) -> f64 {
        (self - other).norm()
    }

    /// Unit vector in the same direction, or `None` for (near) zero vectors.
    pub fn normalized(self) -> Option<Vec3> {
        let n = self.norm();
        (n > 1e-15).then(|| self * (1.0 / n))
    }

    pub fn lerp(self, other: Vec3, s: f64) -> Vec3 {
        self + (other - self) * s
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

impl From<[f64; 3]> for Vec3 {
    fn from(a: [f64; 3]) -> Self {
        Vec3::new(a[0], a[1], a[2])
    }
}

impl From<Vec3> for [f64; 3] {
    fn from(v: Vec3) -> Self {
        [v.x, v.y, v.z]
    }
}

impl fmt::Display for Vec3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.x, self.y, self.z)
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Vec3 {
    fn add_assign(&mut self, o: Vec3) {
        *self = *self + o;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// Rigid rotation of a pattern's local frame, stored as a unit quaternion.
///
/// In scenario files it can be written as a preset name (`"horizontal"`,
/// `"vertical"`, `"diagonal"`), as `{ axis = [..], angle_deg = .. }` or as an
/// explicit quaternion `{ w, x, y, z }`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "OrientationRepr", into = "OrientationRepr")]
pub struct Orientation {
    w: f64,
    x: f64,
    y: f64,
    z: f64,
}

impl Default for Orientation {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Orientation {
    pub const IDENTITY: Orientation = Orientation { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    pub fn from_quaternion(w: f64, x: f64, y: f64, z: f64) -> Result<Self, GeometryError> {
        let q = Orientation { w, x, y, z };
        let n = q.norm();
        if !n.is_finite() || (n - 1.0).abs() > 1e-9 {
            return Err(GeometryError::InvalidSpec(format!(
                "orientation quaternion norm {n} is not 1"
            )));
        }
        Ok(q)
    }

    pub fn from_axis_angle(axis: Vec3, angle_rad: f64) -> Result<Self, GeometryError> {
        let axis = axis
            .normalized()
            .ok_or_else(|| GeometryError::InvalidSpec("orientation axis is zero".into()))?;
        if !angle_rad.is_finite() {
            return Err(GeometryError::InvalidSpec("orientation angle is not finite".into()));
        }
        let (s, c) = (angle_rad / 2.0).sin_cos();
        Ok(Orientation { w: c, x: axis.x * s, y: axis.y * s, z: axis.z * s })
    }

    /// Pattern plane horizontal, normal pointing up.
    pub fn horizontal() -> Self {
        Self::IDENTITY
    }

    /// Pattern plane vertical (the local `y` axis maps onto world `z`).
    pub fn vertical() -> Self {
        Self::from_axis_angle(Vec3::new(1.0, 0.0, 0.0), PI / 2.0).expect("fixed axis")
    }

    /// Pattern plane tilted 45 degrees about the world `x` axis.
    pub fn diagonal() -> Self {
        Self::from_axis_angle(Vec3::new(1.0, 0.0, 0.0), PI / 4.0).expect("fixed axis")
    }

    pub fn quaternion(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn rotate(&self, v: Vec3) -> Vec3 {
        let u = Vec3::new(self.x, self.y, self.z);
        let t = u.cross(v) * 2.0;
        v + t * self.w + u.cross(t)
    }

    /// Composition: `self.then(other)` rotates by `self` first.
    pub fn then(&self, other: &Orientation) -> Orientation {
        let (a, b) = (other, self);
        Orientation {
            w: a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            x: a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            y: a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            z: a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        }
    }

    /// World direction of the local `+z` axis.
    pub fn normal(&self) -> Vec3 {
        self.rotate(Vec3::new(0.0, 0.0, 1.0))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum OrientationRepr {
    Preset(String),
    AxisAngle { axis: Vec3, angle_deg: f64 },
    Quaternion { w: f64, x: f64, y: f64, z: f64 },
}

impl TryFrom<OrientationRepr> for Orientation {
    type Error = GeometryError;

    fn try_from(r: OrientationRepr) -> Result<Self, Self::Error> {
        match r {
            OrientationRepr::Preset(name) => match name.as_str() {
                "horizontal" => Ok(Orientation::horizontal()),
                "vertical" => Ok(Orientation::vertical()),
                "diagonal" => Ok(Orientation::diagonal()),
                other => Err(GeometryError::InvalidSpec(format!(
                    "unknown orientation preset `{other}`, expected horizontal, vertical or diagonal"
                ))),
            },
            OrientationRepr::AxisAngle { axis, angle_deg } => {
                Orientation::from_axis_angle(axis, angle_deg.to_radians())
            }
            OrientationRepr::Quaternion { w, x, y, z } => Orientation::from_quaternion(w, x, y, z),
        }
    }
}

impl From<Orientation> for OrientationRepr {
    fn from(o: Orientation) -> Self {
        for (name, preset) in [
            ("horizontal", Orientation::horizontal()),
            ("vertical", Orientation::vertical()),
            ("diagonal", Orientation::diagonal()),
        ] {
            if o == preset {
                return OrientationRepr::Preset(name.into());
            }
        }
        OrientationRepr::Quaternion { w: o.w, x: o.x, y: o.y, z: o.z }
    }
}

/// Outline of a pattern. Composite variants chain their layers into one queue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Shape {
    Circle {
        radius: f64,
    },
    Ellipse {
        semi_major: f64,
        semi_minor: f64,
    },
    Rectangle {
        width: f64,
        height: f64,
    },
    #[serde(rename = "zigzag")]
    ZigZag {
        segment_length: f64,
        n_segments: usize,
        row_spacing: f64,
    },
    /// Coplanar layers; layer `i` encloses layer `i - 1`, layer 0 ends at the opening.
    #[serde(rename = "nested2d")]
    Nested2D { layers: Vec<Layer> },
    /// Layers stacked along the pattern normal, layer 0 at the opening's level.
    #[serde(rename = "stacked3d")]
    Stacked3D { layers: Vec<Layer>, layer_gap: f64 },
}

/// One layer of a composite pattern with its own slot count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    #[serde(flatten)]
    pub shape: Shape,
    pub slots: usize,
}

impl Layer {
    pub fn new(shape: Shape, slots: usize) -> Self {
        Self { shape, slots }
    }
}

impl Shape {
    pub fn is_composite(&self) -> bool {
        matches!(self, Shape::Nested2D { .. } | Shape::Stacked3D { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Shape::Circle { .. } => "circle",
            Shape::Ellipse { .. } => "ellipse",
            Shape::Rectangle { .. } => "rectangle",
            Shape::ZigZag { .. } => "zigzag",
            Shape::Nested2D { .. } => "nested2d",
            Shape::Stacked3D { .. } => "stacked3d",
        }
    }

    /// Local-frame bounding box `(min, max)` of a simple outline.
    fn extents(&self) -> ([f64; 2], [f64; 2]) {
        match *self {
            Shape::Circle { radius } => ([0.0, -radius], [2.0 * radius, radius]),
            Shape::Ellipse { semi_major, semi_minor } => {
                ([0.0, -semi_minor], [2.0 * semi_major, semi_minor])
            }
            Shape::Rectangle { width, height } => ([0.0, 0.0], [width, height]),
            Shape::ZigZag { segment_length, n_segments, row_spacing } => {
                let dx = zigzag_run(segment_length, row_spacing);
                let x_max = if n_segments >= 1 { dx } else { 0.0 };
                ([0.0, 0.0], [x_max, n_segments as f64 * row_spacing])
            }
            Shape::Nested2D { .. } | Shape::Stacked3D { .. } => unreachable!("simple shapes only"),
        }
    }

    fn validate_simple(&self, path: &str) -> Result<(), GeometryError> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(GeometryError::InvalidSpec(format!("{path}.{name} must be > 0, got {v}")))
            }
        };
        match *self {
            Shape::Circle { radius } => positive("radius", radius),
            Shape::Ellipse { semi_major, semi_minor } => {
                positive("semi_major", semi_major)?;
                positive("semi_minor", semi_minor)
            }
            Shape::Rectangle { width, height } => {
                positive("width", width)?;
                positive("height", height)
            }
            Shape::ZigZag { segment_length, n_segments, row_spacing } => {
                positive("segment_length", segment_length)?;
                positive("row_spacing", row_spacing)?;
                if n_segments < 1 {
                    return Err(GeometryError::InvalidSpec(format!(
                        "{path}.n_segments must be >= 1"
                    )));
                }
                if row_spacing >= segment_length {
                    return Err(GeometryError::InvalidSpec(format!(
                        "{path}.row_spacing ({row_spacing}) must be shorter than segment_length ({segment_length})"
                    )));
                }
                Ok(())
            }
            Shape::Nested2D { .. } | Shape::Stacked3D { .. } => Err(GeometryError::InvalidSpec(
                format!("{path}: composite patterns cannot be nested inside a layer"),
            )),
        }
    }
}

/// Horizontal run of one zig-zag segment climbing one row.
fn zigzag_run(segment_length: f64, row_spacing: f64) -> f64 {
    (segment_length * segment_length - row_spacing * row_spacing).max(0.0).sqrt()
}

/// Declarative pattern: outline, total slot count, opening position and alignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternSpec {
    pub shape: Shape,
    pub slot_count: usize,
    pub anchor: Vec3,
    #[serde(default)]
    pub orientation: Orientation,
}

impl PatternSpec {
    pub fn new(shape: Shape, slot_count: usize, anchor: Vec3) -> Self {
        Self { shape, slot_count, anchor, orientation: Orientation::IDENTITY }
    }

    /// Composite spec whose slot count is the sum of its layers.
    pub fn composite(shape: Shape, anchor: Vec3) -> Self {
        let slot_count = match &shape {
            Shape::Nested2D { layers } | Shape::Stacked3D { layers, .. } => {
                layers.iter().map(|l| l.slots).sum()
            }
            _ => 0,
        };
        Self::new(shape, slot_count, anchor)
    }

    pub fn with_orientation(mut self, orientation: Orientation) -> Self {
        self.orientation = orientation;
        self
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !self.anchor.is_finite() {
            return Err(GeometryError::InvalidSpec("anchor must be finite".into()));
        }
        let n = self.orientation.norm();
        if (n - 1.0).abs() > 1e-9 {
            return Err(GeometryError::InvalidSpec(format!("orientation norm {n} is not 1")));
        }
        if self.slot_count < 1 {
            return Err(GeometryError::InvalidSpec("slot count M must be >= 1".into()));
        }
        match &self.shape {
            Shape::Nested2D { layers } => {
                validate_layers(layers, self.slot_count)?;
                for (i, pair) in layers.windows(2).enumerate() {
                    let (inner, outer) = (&pair[0].shape, &pair[1].shape);
                    let (imin, imax) = inner.extents();
                    let (omin, omax) = outer.extents();
                    for axis in 0..2 {
                        if imax[axis] - imin[axis] >= omax[axis] - omin[axis] {
                            return Err(GeometryError::InvalidSpec(format!(
                                "nested2d layer {} must strictly contain layer {}",
                                i + 1,
                                i
                            )));
                        }
                    }
                }
                Ok(())
            }
            Shape::Stacked3D { layers, layer_gap } => {
                if !(layer_gap.is_finite() && *layer_gap > 0.0) {
                    return Err(GeometryError::InvalidSpec(format!(
                        "stacked3d layer_gap must be > 0, got {layer_gap}"
                    )));
                }
                validate_layers(layers, self.slot_count)
            }
            simple => simple.validate_simple("pattern"),
        }
    }
}

fn validate_layers(layers: &[Layer], slot_count: usize) -> Result<(), GeometryError> {
    if layers.is_empty() {
        return Err(GeometryError::InvalidSpec("composite pattern needs at least one layer".into()));
    }
    for (i, layer) in layers.iter().enumerate() {
        layer.shape.validate_simple(&format!("layers[{i}]"))?;
        if layer.slots < 1 {
            return Err(GeometryError::InvalidSpec(format!("layers[{i}].slots must be >= 1")));
        }
    }
    let total: usize = layers.iter().map(|l| l.slots).sum();
    if total != slot_count {
        return Err(GeometryError::InvalidSpec(format!(
            "slot count {slot_count} does not match the layer total {total}"
        )));
    }
    Ok(())
}

/// Realized slot coordinates in queue order. Slot 0 is the head at the opening.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Pattern {
    slots: Vec<Vec3>,
    leg_lengths: Vec<f64>,
    anchor: Vec3,
    orientation: Orientation,
}

impl Pattern {
    pub fn slots(&self) -> &[Vec3] {
        &self.slots
    }

    pub fn slot(&self, index: usize) -> Option<Vec3> {
        self.slots.get(index).copied()
    }

    pub fn slot_count(&self) -> usize {
        self.slots.len()
    }

    /// `leg_lengths()[k - 1]` is the chord from slot `k` to slot `k - 1`.
    pub fn leg_lengths(&self) -> &[f64] {
        &self.leg_lengths
    }

    /// Chord length of leg `k` (slot `k` to slot `k - 1`), `1 <= k <= M - 1`.
    pub fn leg_length(&self, k: usize) -> Option<f64> {
        k.checked_sub(1).and_then(|i| self.leg_lengths.get(i).copied())
    }

    pub fn anchor(&self) -> Vec3 {
        self.anchor
    }

    pub fn orientation(&self) -> Orientation {
        self.orientation
    }

    pub fn normal(&self) -> Vec3 {
        self.orientation.normal()
    }

    /// Height of the highest slot above the anchor, measured along the normal.
    pub fn top_height(&self) -> f64 {
        let n = self.normal();
        self.slots.iter().map(|s| (*s - self.anchor).dot(n)).fold(0.0, f64::max)
    }

    /// Center and radius of a sphere enclosing every slot.
    pub fn bounding_sphere(&self) -> (Vec3, f64) {
        let m = self.slots.len() as f64;
        let sum = self.slots.iter().fold(Vec3::ZERO, |acc, s| acc + *s);
        let center = sum * (1.0 / m);
        let radius = self.slots.iter().map(|s| s.distance(center)).fold(0.0, f64::max);
        (center, radius)
    }
}

/// Lays out the `M` slots of `spec`.
pub fn build_pattern(spec: &PatternSpec) -> Result<Pattern, GeometryError> {
    spec.validate()?;
    let local = match &spec.shape {
        Shape::Nested2D { layers } => {
            let (c0min, c0max) = layers[0].shape.extents();
            let center0 = [(c0min[0] + c0max[0]) / 2.0, (c0min[1] + c0max[1]) / 2.0];
            let mut out = Vec::with_capacity(spec.slot_count);
            for layer in layers {
                let (lo, hi) = layer.shape.extents();
                let shift = Vec3::new(
                    center0[0] - (lo[0] + hi[0]) / 2.0,
                    center0[1] - (lo[1] + hi[1]) / 2.0,
                    0.0,
                );
                out.extend(simple_slots(&layer.shape, layer.slots).into_iter().map(|p| p + shift));
            }
            out
        }
        Shape::Stacked3D { layers, layer_gap } => {
            let mut out = Vec::with_capacity(spec.slot_count);
            for (i, layer) in layers.iter().enumerate() {
                let lift = Vec3::new(0.0, 0.0, i as f64 * layer_gap);
                out.extend(simple_slots(&layer.shape, layer.slots).into_iter().map(|p| p + lift));
            }
            out
        }
        simple => simple_slots(simple, spec.slot_count),
    };

    // pin slot 0 exactly on the anchor despite trig round-off
    let origin = local[0];
    let slots: Vec<Vec3> = local
        .into_iter()
        .map(|p| spec.anchor + spec.orientation.rotate(p - origin))
        .collect();
    let leg_lengths: Vec<f64> = slots.windows(2).map(|w| w[1].distance(w[0])).collect();
    if let Some(k) = leg_lengths.iter().position(|l| l.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater)) {
        return Err(GeometryError::InvalidSpec(format!(
            "slots {} and {} coincide; use fewer slots or a larger outline",
            k,
            k + 1
        )));
    }
    Ok(Pattern { slots, leg_lengths, anchor: spec.anchor, orientation: spec.orientation })
}

/// Local-frame slots of a simple outline, slot 0 at the origin.
fn simple_slots(shape: &Shape, m: usize) -> Vec<Vec3> {
    match *shape {
        Shape::Circle { radius } => (0..m)
            .map(|k| {
                let theta = PI + 2.0 * PI * k as f64 / m as f64;
                Vec3::new(radius + radius * theta.cos(), radius * theta.sin(), 0.0)
            })
            .collect(),
        Shape::Ellipse { semi_major, semi_minor } => ellipse_slots(semi_major, semi_minor, m),
        Shape::Rectangle { width, height } => {
            let corners = [
                Vec3::ZERO,
                Vec3::new(width, 0.0, 0.0),
                Vec3::new(width, height, 0.0),
                Vec3::new(0.0, height, 0.0),
                Vec3::ZERO,
            ];
            let perimeter = 2.0 * (width + height);
            (0..m).map(|k| polyline_point(&corners, perimeter * k as f64 / m as f64)).collect()
        }
        Shape::ZigZag { segment_length, n_segments, row_spacing } => {
            let dx = zigzag_run(segment_length, row_spacing);
            let vertices: Vec<Vec3> = (0..=n_segments)
                .map(|i| {
                    let x = if i % 2 == 0 { 0.0 } else { dx };
                    Vec3::new(x, i as f64 * row_spacing, 0.0)
                })
                .collect();
            let total = segment_length * n_segments as f64;
            if m == 1 {
                return vec![Vec3::ZERO];
            }
            (0..m).map(|k| polyline_point(&vertices, total * k as f64 / (m - 1) as f64)).collect()
        }
        Shape::Nested2D { .. } | Shape::Stacked3D { .. } => unreachable!("validated as simple"),
    }
}

/// Point at path distance `s` along an open polyline.
fn polyline_point(vertices: &[Vec3], s: f64) -> Vec3 {
    let mut remaining = s;
    for w in vertices.windows(2) {
        let len = w[1].distance(w[0]);
        if remaining <= len {
            return w[0].lerp(w[1], remaining / len);
        }
        remaining -= len;
    }
    *vertices.last().expect("non-empty polyline")
}

/// Ellipse slots at equal arc-length spacing, starting at the left vertex.
fn ellipse_slots(a: f64, b: f64, m: usize) -> Vec<Vec3> {
    const SAMPLES: usize = 8192;
    let point = |theta: f64| Vec3::new(a + a * theta.cos(), b * theta.sin(), 0.0);
    let speed = |theta: f64| (a * a * theta.sin().powi(2) + b * b * theta.cos().powi(2)).sqrt();
    let h = 2.0 * PI / SAMPLES as f64;
    // cumulative arc length at each sample, Simpson on each sub-interval
    let mut cumulative = Vec::with_capacity(SAMPLES + 1);
    cumulative.push(0.0);
    for i in 0..SAMPLES {
        let t0 = PI + i as f64 * h;
        let seg = h / 6.0 * (speed(t0) + 4.0 * speed(t0 + h / 2.0) + speed(t0 + h));
        cumulative.push(cumulative[i] + seg);
    }
    let perimeter = cumulative[SAMPLES];
    (0..m)
        .map(|k| {
            let target = perimeter * k as f64 / m as f64;
            let i = cumulative.partition_point(|c| *c <= target).saturating_sub(1).min(SAMPLES - 1);
            let t0 = PI + i as f64 * h;
            // one Newton refinement inside the bracket
            let mut theta = t0 + (target - cumulative[i]) / speed(t0).max(1e-12);
            theta = theta.clamp(t0, t0 + h);
            let partial = |t: f64| {
                let mid = (t0 + t) / 2.0;
                (t - t0) / 6.0 * (speed(t0) + 4.0 * speed(mid) + speed(t))
            };
            for _ in 0..3 {
                let err = cumulative[i] + partial(theta) - target;
                theta = (theta - err / speed(theta).max(1e-12)).clamp(t0, t0 + h);
            }
            point(theta)
        })
        .collect()
}

/// Speed a drone needs to fly leg `leg_index` within one admission interval.
pub fn required_speed(pattern: &Pattern, lambda: f64, leg_index: usize) -> Result<f64, GeometryError> {
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(GeometryError::InvalidRate(lambda));
    }
    let max = pattern.slot_count().saturating_sub(1);
    let leg = pattern
        .leg_length(leg_index)
        .ok_or(GeometryError::IndexOutOfRange { index: leg_index, max })?;
    Ok(leg * lambda)
}

/// Smallest distance between any two slots.
pub fn min_slot_clearance(pattern: &Pattern) -> Result<f64, GeometryError> {
    let slots = pattern.slots();
    if slots.len() < 2 {
        return Err(GeometryError::TooFewSlots(slots.len()));
    }
    let mut best = f64::INFINITY;
    for (i, a) in slots.iter().enumerate() {
        for b in &slots[i + 1..] {
            best = best.min(a.distance(*b));
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn circle(radius: f64, m: usize) -> PatternSpec {
        PatternSpec::new(Shape::Circle { radius }, m, Vec3::ZERO)
    }

    fn assert_vec(a: Vec3, b: Vec3) {
        assert!(a.distance(b) < 1e-9, "{a} != {b}");
    }

    #[test]
    fn unit_circle_four_slots() {
        let p = build_pattern(&circle(1.0, 4)).unwrap();
        let expected = [
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, -1.0, 0.0),
            Vec3::new(2.0, 0.0, 0.0),
            Vec3::new(1.0, 1.0, 0.0),
        ];
        for (s, e) in p.slots().iter().zip(expected) {
            assert_vec(*s, e);
        }
        for leg in p.leg_lengths() {
            assert_abs_diff_eq!(*leg, 2f64.sqrt(), epsilon = 1e-12);
        }
    }

    #[test]
    fn single_slot_is_the_opening() {
        let anchor = Vec3::new(3.0, -1.0, 2.0);
        let p = build_pattern(&PatternSpec::new(Shape::Circle { radius: 1.0 }, 1, anchor)).unwrap();
        assert_eq!(p.slots(), &[anchor]);
        assert!(p.leg_lengths().is_empty());
    }

    #[test]
    fn zigzag_uniform_path_spacing() {
        let shape = Shape::ZigZag { segment_length: 2.0, n_segments: 3, row_spacing: 0.5 };
        let p = build_pattern(&PatternSpec::new(shape, 4, Vec3::ZERO)).unwrap();
        // slots land on the polyline vertices at path distances 0, 2, 4, 6
        let dx = (4.0f64 - 0.25).sqrt();
        let expected = [
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(dx, 0.5, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
            Vec3::new(dx, 1.5, 0.0),
        ];
        for (s, e) in p.slots().iter().zip(expected) {
            assert_vec(*s, e);
        }
        for leg in p.leg_lengths() {
            assert_abs_diff_eq!(*leg, 2.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn zigzag_rows_must_be_narrower_than_segments() {
        let shape = Shape::ZigZag { segment_length: 1.0, n_segments: 2, row_spacing: 1.0 };
        assert!(matches!(
            build_pattern(&PatternSpec::new(shape, 3, Vec3::ZERO)),
            Err(GeometryError::InvalidSpec(_))
        ));
    }

    #[test]
    fn rectangle_starts_at_anchor_corner() {
        let shape = Shape::Rectangle { width: 2.0, height: 1.0 };
        let p = build_pattern(&PatternSpec::new(shape, 6, Vec3::ZERO)).unwrap();
        let expected = [
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(2.0, 0.0, 0.0),
            Vec3::new(2.0, 1.0, 0.0),
            Vec3::new(1.0, 1.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
        ];
        for (s, e) in p.slots().iter().zip(expected) {
            assert_vec(*s, e);
        }
    }

    #[test]
    fn ellipse_arc_spacing_matches_circle_when_round() {
        let e = build_pattern(&PatternSpec::new(
            Shape::Ellipse { semi_major: 1.0, semi_minor: 1.0 },
            6,
            Vec3::ZERO,
        ))
        .unwrap();
        let c = build_pattern(&circle(1.0, 6)).unwrap();
        for (a, b) in e.slots().iter().zip(c.slots()) {
            assert!(a.distance(*b) < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn ellipse_slots_lie_on_outline() {
        let (a, b) = (2.0, 0.7);
        let p = build_pattern(&PatternSpec::new(
            Shape::Ellipse { semi_major: a, semi_minor: b },
            10,
            Vec3::ZERO,
        ))
        .unwrap();
        for s in p.slots() {
            let u = (s.x - a) / a;
            let v = s.y / b;
            assert_abs_diff_eq!(u * u + v * v, 1.0, epsilon = 1e-9);
        }
        // symmetric outline: slot k and slot M-k mirror across the major axis
        for k in 1..5 {
            let (p1, p2) = (p.slots()[k], p.slots()[10 - k]);
            assert_abs_diff_eq!(p1.x, p2.x, epsilon = 1e-7);
            assert_abs_diff_eq!(p1.y, -p2.y, epsilon = 1e-7);
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(build_pattern(&circle(0.0, 4)).is_err());
        assert!(build_pattern(&circle(-1.0, 4)).is_err());
        assert!(build_pattern(&circle(1.0, 0)).is_err());
        let zig = Shape::ZigZag { segment_length: 1.0, n_segments: 0, row_spacing: 0.1 };
        assert!(build_pattern(&PatternSpec::new(zig, 2, Vec3::ZERO)).is_err());
    }

    #[test]
    fn nested_layers_must_strictly_contain() {
        let shape = Shape::Nested2D {
            layers: vec![
                Layer::new(Shape::Circle { radius: 1.0 }, 4),
                Layer::new(Shape::Circle { radius: 1.0 }, 4),
            ],
        };
        let err = build_pattern(&PatternSpec::composite(shape, Vec3::ZERO)).unwrap_err();
        assert!(err.to_string().contains("contain"), "{err}");
    }

    #[test]
    fn nested_concatenation_and_junction() {
        let shape = Shape::Nested2D {
            layers: vec![
                Layer::new(Shape::Ellipse { semi_major: 1.0, semi_minor: 0.5 }, 6),
                Layer::new(Shape::Ellipse { semi_major: 1.5, semi_minor: 1.0 }, 8),
                Layer::new(Shape::Ellipse { semi_major: 2.0, semi_minor: 1.5 }, 10),
            ],
        };
        let spec = PatternSpec::composite(shape, Vec3::ZERO);
        assert_eq!(spec.slot_count, 24);
        let p = build_pattern(&spec).unwrap();
        assert_eq!(p.slot_count(), 24);
        assert_vec(p.slots()[0], Vec3::ZERO);
        // outer layers are concentric with layer 0
        assert_vec(p.slots()[6], Vec3::new(-0.5, 0.0, 0.0));
        assert_vec(p.slots()[14], Vec3::new(-1.0, 0.0, 0.0));
        assert!(p.leg_length(6).unwrap() > 0.0);
        assert!(p.leg_length(14).unwrap() > 0.0);
    }

    #[test]
    fn clearance_examples() {
        let p = build_pattern(&circle(1.0, 4)).unwrap();
        assert_abs_diff_eq!(min_slot_clearance(&p).unwrap(), 2f64.sqrt(), epsilon = 1e-12);

        let stack = Shape::Stacked3D {
            layers: vec![
                Layer::new(Shape::Circle { radius: 1.0 }, 4),
                Layer::new(Shape::Circle { radius: 1.0 }, 4),
            ],
            layer_gap: 0.3,
        };
        let p = build_pattern(&PatternSpec::composite(stack, Vec3::ZERO)).unwrap();
        assert_abs_diff_eq!(min_slot_clearance(&p).unwrap(), 0.3, epsilon = 1e-12);

        let line = Shape::ZigZag { segment_length: 1.0, n_segments: 1, row_spacing: 0.5 };
        let p = build_pattern(&PatternSpec::new(line, 2, Vec3::ZERO)).unwrap();
        assert_abs_diff_eq!(min_slot_clearance(&p).unwrap(), 1.0, epsilon = 1e-12);

        let p = build_pattern(&circle(1.0, 1)).unwrap();
        assert_eq!(min_slot_clearance(&p), Err(GeometryError::TooFewSlots(1)));
    }

    #[test]
    fn required_speed_examples() {
        let p = build_pattern(&circle(1.0, 4)).unwrap();
        assert_abs_diff_eq!(required_speed(&p, 1.0, 1).unwrap(), 2f64.sqrt(), epsilon = 1e-12);
        assert_eq!(required_speed(&p, 0.0, 1), Err(GeometryError::InvalidRate(0.0)));
        assert!(matches!(
            required_speed(&p, 1.0, 0),
            Err(GeometryError::IndexOutOfRange { .. })
        ));
        assert!(matches!(
            required_speed(&p, 1.0, 4),
            Err(GeometryError::IndexOutOfRange { .. })
        ));

        // 0.1 m legs at 10 per second: the 1 m/s demonstration speed
        let line = Shape::ZigZag { segment_length: 0.1, n_segments: 1, row_spacing: 0.05 };
        let p = build_pattern(&PatternSpec::new(line, 2, Vec3::ZERO)).unwrap();
        assert_abs_diff_eq!(required_speed(&p, 10.0, 1).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn orientation_presets_round_trip_through_toml() {
        #[derive(Serialize, Deserialize)]
        struct Holder {
            o: Orientation,
        }
        for o in [Orientation::horizontal(), Orientation::vertical(), Orientation::diagonal()] {
            let text = toml::to_string(&Holder { o }).unwrap();
            let back: Holder = toml::from_str(&text).unwrap();
            assert_eq!(back.o, o);
        }
        let q: Holder = toml::from_str("o = { axis = [0, 0, 1], angle_deg = 90 }").unwrap();
        assert_vec(q.o.rotate(Vec3::new(1.0, 0.0, 0.0)), Vec3::new(0.0, 1.0, 0.0));
        assert!(toml::from_str::<Holder>("o = \"sideways\"").is_err());
        assert!(toml::from_str::<Holder>("o = { w = 2, x = 0, y = 0, z = 0 }").is_err());
    }

    #[test]
    fn vertical_preset_tilts_normal() {
        assert_vec(Orientation::vertical().normal(), Vec3::new(0.0, -1.0, 0.0));
    }

    fn arb_simple_shape() -> impl Strategy<Value = Shape> {
        prop_oneof![
            (0.2f64..5.0).prop_map(|radius| Shape::Circle { radius }),
            (0.2f64..5.0, 0.2f64..5.0)
                .prop_map(|(semi_major, semi_minor)| Shape::Ellipse { semi_major, semi_minor }),
            (0.2f64..5.0, 0.2f64..5.0).prop_map(|(width, height)| Shape::Rectangle { width, height }),
            (0.5f64..3.0, 1usize..6, 0.05f64..0.45).prop_map(|(segment_length, n_segments, f)| {
                Shape::ZigZag { segment_length, n_segments, row_spacing: f * segment_length }
            }),
        ]
    }

    fn arb_orientation() -> impl Strategy<Value = Orientation> {
        (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0, -3.2f64..3.2).prop_filter_map(
            "non-zero axis",
            |(x, y, z, a)| Orientation::from_axis_angle(Vec3::new(x, y, z), a).ok(),
        )
    }

    fn arb_vec() -> impl Strategy<Value = Vec3> {
        (-10.0f64..10.0, -10.0f64..10.0, -10.0f64..10.0).prop_map(|(x, y, z)| Vec3::new(x, y, z))
    }

    proptest! {
        #[test]
        fn built_patterns_hold_their_invariants(
            shape in arb_simple_shape(), m in 1usize..24, anchor in arb_vec(), o in arb_orientation()
        ) {
            let spec = PatternSpec::new(shape, m, anchor).with_orientation(o);
            let p = build_pattern(&spec).unwrap();
            prop_assert_eq!(p.slot_count(), m);
            prop_assert!(p.slots()[0].distance(anchor) < 1e-9);
            prop_assert_eq!(p.leg_lengths().len(), m - 1);
            prop_assert!(p.leg_lengths().iter().all(|l| *l > 0.0));
        }

        #[test]
        fn orientation_equivariance(
            shape in arb_simple_shape(), m in 1usize..16, anchor in arb_vec(), o in arb_orientation()
        ) {
            let flat = build_pattern(&PatternSpec::new(shape.clone(), m, anchor)).unwrap();
            let turned = build_pattern(&PatternSpec::new(shape, m, anchor).with_orientation(o)).unwrap();
            for (f, t) in flat.slots().iter().zip(turned.slots()) {
                let expect = anchor + o.rotate(*f - anchor);
                prop_assert!(expect.distance(*t) < 1e-9);
            }
        }

        #[test]
        fn circle_legs_are_uniform(radius in 0.1f64..10.0, m in 2usize..64) {
            let p = build_pattern(&circle(radius, m)).unwrap();
            let first = p.leg_lengths()[0];
            prop_assert!(p.leg_lengths().iter().all(|l| (l - first).abs() < 1e-9));
        }

        #[test]
        fn zigzag_even_division_gives_equal_path_gaps(
            seg in 0.5f64..3.0, n in 1usize..6, f in 0.05f64..0.45, per in 1usize..4
        ) {
            // M - 1 = n * per divides the polyline into equal pieces
            let shape = Shape::ZigZag { segment_length: seg, n_segments: n, row_spacing: f * seg };
            let p = build_pattern(&PatternSpec::new(shape, n * per + 1, Vec3::ZERO)).unwrap();
            // within one segment consecutive slots are collinear, so chord = path gap
            let gap = seg / per as f64;
            for leg in p.leg_lengths() {
                prop_assert!((leg - gap).abs() < 1e-9);
            }
        }

        #[test]
        fn required_speed_is_linear_in_rate(radius in 0.1f64..5.0, m in 2usize..20, lambda in 0.01f64..50.0) {
            let p = build_pattern(&circle(radius, m)).unwrap();
            for k in 1..m {
                let v1 = required_speed(&p, lambda, k).unwrap();
                let v2 = required_speed(&p, 2.0 * lambda, k).unwrap();
                prop_assert_eq!(v2, 2.0 * v1);
            }
        }
    }
}
