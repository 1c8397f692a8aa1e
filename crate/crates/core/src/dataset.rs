//! Procedural training data: six analytic shape classes with exact signed
//! distance functions, area-uniform colored surface sampling, per-record
//! normalization, rendered conditioning views, and a binary record file with
//! a JSON manifest.
//!
//! Every shape is defined in a local frame by a handful of size parameters
//! and placed in the world by a rotation only, so the local distance
//! formulas stay exact Euclidean distances in the world frame. Records store
//! the normalization transform, which keeps an exact distance oracle
//! available in the same frame as the stored clouds.

use crate::error::{Error, Result};
use crate::geometry::{
    farthest_point_sample, flatness_filter, normalization_transform, render_view, Camera,
    PointCloud, ViewImage, DEFAULT_FLATNESS_THRESHOLD, POINT_CHANNELS,
};
use crate::meshing::SdfOracle;
use ndarray::{Array2, Array3};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

/// Number of shape classes.
pub const NUM_CLASSES: usize = 6;
/// Points drawn on the surface before normalization and selection.
pub const DENSE_SURFACE_POINTS: usize = 16_384;
/// Points kept per record after farthest-point selection.
pub const CLOUD_HI_POINTS: usize = 1024;
/// Low-resolution prefix of the selection, used as upsampler conditioning.
pub const CLOUD_LO_POINTS: usize = 256;
/// Rendered conditioning views per record.
pub const VIEWS_PER_RECORD: usize = 20;
/// Views are square with this many pixels per side.
pub const VIEW_RESOLUTION: usize = 32;
/// Cameras sit this far from the origin, looking at it.
pub const CAMERA_DISTANCE: f64 = 2.0;
/// Orthographic half-width; covers any rotation of the `[-1, 1]` cube.
pub const CAMERA_HALF_EXTENT: f64 = 1.8;
/// Lower bound for each size parameter.
pub const MIN_SCALE: f64 = 0.3;
/// Upper bound for each size parameter.
pub const MAX_SCALE: f64 = 1.0;

/// Binary record file name inside a dataset directory.
pub const RECORDS_FILE: &str = "records.bin";
/// Manifest file name inside a dataset directory.
pub const MANIFEST_FILE: &str = "manifest.json";

const FILE_MAGIC: [u8; 4] = *b"PLDS";
const FILE_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// Shape specification
// ---------------------------------------------------------------------------

/// The six procedural shape classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeClass {
    Sphere,
    Box,
    Cylinder,
    Cone,
    Torus,
    Capsule,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; NUM_CLASSES] = [
        ShapeClass::Sphere,
        ShapeClass::Box,
        ShapeClass::Cylinder,
        ShapeClass::Cone,
        ShapeClass::Torus,
        ShapeClass::Capsule,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Sphere => "sphere",
            ShapeClass::Box => "box",
            ShapeClass::Cylinder => "cylinder",
            ShapeClass::Cone => "cone",
            ShapeClass::Torus => "torus",
            ShapeClass::Capsule => "capsule",
        }
    }

    /// Index of this class in [`ShapeClass::ALL`].
    pub fn id(self) -> usize {
        Self::ALL.iter().position(|&c| c == self).unwrap()
    }

    pub fn from_id(id: usize) -> Result<ShapeClass> {
        Self::ALL
            .get(id)
            .copied()
            .ok_or_else(|| Error::invalid(format!("shape class id {id} out of range")))
    }

    pub fn from_name(name: &str) -> Result<ShapeClass> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.name() == name)
            .ok_or_else(|| Error::invalid(format!("unknown shape class {name:?}")))
    }
}

/// How surface colors are assigned, in the shape's local frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorScheme {
    /// One color everywhere.
    Solid,
    /// Two colors split by the sign of the coordinate along a seeded axis.
    TwoTone,
    /// Linear blend between two colors along a seeded axis.
    AxisGradient,
}

impl ColorScheme {
    pub const ALL: [ColorScheme; 3] = [
        ColorScheme::Solid,
        ColorScheme::TwoTone,
        ColorScheme::AxisGradient,
    ];

    pub fn id(self) -> usize {
        Self::ALL.iter().position(|&c| c == self).unwrap()
    }

    pub fn from_id(id: usize) -> Result<ColorScheme> {
        Self::ALL
            .get(id)
            .copied()
            .ok_or_else(|| Error::invalid(format!("color scheme id {id} out of range")))
    }
}

/// Everything needed to reproduce one shape: class, per-class size
/// parameters, a world rotation, and a seed for the color palette.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub class: ShapeClass,
    /// Size parameters, each in `[MIN_SCALE, MAX_SCALE]`. Their meaning is
    /// per-class (radius, half-extents, ...); unused entries are ignored.
    pub scale: [f64; 3],
    /// Unit quaternion `(w, x, y, z)` rotating the local frame into the
    /// world frame.
    pub rotation: [f64; 4],
    pub color_scheme: ColorScheme,
    /// Seeds the color palette and the paint direction.
    pub seed: u64,
}

impl ShapeSpec {
    pub fn validate(&self) -> Result<()> {
        for (i, &s) in self.scale.iter().enumerate() {
            if !s.is_finite() || !(MIN_SCALE..=MAX_SCALE).contains(&s) {
                return Err(Error::invalid(format!(
                    "scale[{i}] = {s} outside [{MIN_SCALE}, {MAX_SCALE}]"
                )));
            }
        }
        let norm2: f64 = self.rotation.iter().map(|&q| q * q).sum();
        if !norm2.is_finite() || (norm2.sqrt() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "rotation quaternion must be unit length, |q| = {}",
                norm2.sqrt()
            )));
        }
        Ok(())
    }

    /// Draws a spec for `class`: scales uniform in the allowed range, a
    /// uniform random rotation, a uniform color scheme, and a palette seed.
    pub fn random(class: ShapeClass, rng: &mut dyn RngCore) -> ShapeSpec {
        let scale = [
            rng.random_range(MIN_SCALE..=MAX_SCALE),
            rng.random_range(MIN_SCALE..=MAX_SCALE),
            rng.random_range(MIN_SCALE..=MAX_SCALE),
        ];
        let rotation = random_unit_quaternion(rng);
        let color_scheme = ColorScheme::ALL[rng.random_range(0..ColorScheme::ALL.len())];
        let seed = rng.random::<u64>();
        ShapeSpec {
            class,
            scale,
            rotation,
            color_scheme,
            seed,
        }
    }
}

fn random_unit_quaternion(rng: &mut dyn RngCore) -> [f64; 4] {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| standard_normal(rng));
        let n = q.iter().map(|&v| v * v).sum::<f64>().sqrt();
        if n > 1e-6 {
            return std::array::from_fn(|i| q[i] / n);
        }
    }
}

fn random_unit_vector(rng: &mut dyn RngCore) -> [f64; 3] {
    loop {
        let v: [f64; 3] = std::array::from_fn(|_| standard_normal(rng));
        let n = norm3(v);
        if n > 1e-6 {
            return scale3(v, 1.0 / n);
        }
    }
}

fn standard_normal(rng: &mut dyn RngCore) -> f64 {
    rng.sample::<f64, _>(rand_distr::StandardNormal)
}

fn quaternion_to_matrix(q: [f64; 4]) -> [[f64; 3]; 3] {
    let [w, x, y, z] = q;
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm3(a: [f64; 3]) -> f64 {
    dot3(a, a).sqrt()
}

fn scale3(a: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

// ---------------------------------------------------------------------------
// Resolved shapes: exact distances and area-uniform sampling
// ---------------------------------------------------------------------------

/// Per-class size parameters resolved from a spec's `scale`.
#[derive(Debug, Clone, Copy)]
enum ShapeDims {
    Sphere { r: f64 },
    Box { h: [f64; 3] },
    /// Axis along local z; `h` is the half-height.
    Cylinder { r: f64, h: f64 },
    /// Base disk of radius `r` at `z = -h`, apex at `z = +h`.
    Cone { r: f64, h: f64 },
    /// Axis along local z.
    Torus { major: f64, minor: f64 },
    /// Cylindrical segment half-length `h` along z, cap radius `r`.
    Capsule { r: f64, h: f64 },
}

fn resolve_dims(class: ShapeClass, scale: [f64; 3]) -> ShapeDims {
    let [s0, s1, s2] = scale;
    match class {
        ShapeClass::Sphere => ShapeDims::Sphere { r: 0.5 * s0 },
        ShapeClass::Box => ShapeDims::Box {
            h: [0.5 * s0, 0.5 * s1, 0.5 * s2],
        },
        ShapeClass::Cylinder => ShapeDims::Cylinder {
            r: 0.4 * s0,
            h: 0.5 * s2,
        },
        ShapeClass::Cone => ShapeDims::Cone {
            r: 0.45 * s0,
            h: 0.5 * s2,
        },
        ShapeClass::Torus => {
            let major = 0.35 * s0;
            // Tube stays strictly thinner than the ring, so the distance
            // formula never self-intersects.
            let minor = major * (0.2 + 0.3 * s1);
            ShapeDims::Torus { major, minor }
        }
        ShapeClass::Capsule => ShapeDims::Capsule {
            r: 0.25 * s0,
            h: 0.4 * s2,
        },
    }
}

/// A fully resolved shape: size parameters, world rotation, and palette.
/// Distances are exact Euclidean distances, positive inside.
#[derive(Debug, Clone)]
pub struct ProceduralShape {
    spec: ShapeSpec,
    dims: ShapeDims,
    /// Local-to-world rotation.
    rot: [[f64; 3]; 3],
    color_a: [f64; 3],
    color_b: [f64; 3],
    /// Unit direction in the local frame for two-tone and gradient paint.
    paint_dir: [f64; 3],
    /// Largest `|q|` over the local surface; bounds gradient coordinates.
    bound: f64,
}

/// Resolves a spec into a sampleable shape with an exact distance function.
pub fn generate_shape(spec: &ShapeSpec) -> Result<ProceduralShape> {
    spec.validate()?;
    let dims = resolve_dims(spec.class, spec.scale);
    let bound = match dims {
        ShapeDims::Sphere { r } => r,
        ShapeDims::Box { h } => norm3(h),
        ShapeDims::Cylinder { r, h } => r.hypot(h),
        ShapeDims::Cone { r, h } => r.hypot(h),
        ShapeDims::Torus { major, minor } => major + minor,
        ShapeDims::Capsule { r, h } => r + h,
    };
    let mut palette_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let draw_color = |rng: &mut ChaCha8Rng| -> [f64; 3] {
        std::array::from_fn(|_| rng.random_range(-0.9..0.9))
    };
    let color_a = draw_color(&mut palette_rng);
    let color_b = draw_color(&mut palette_rng);
    let paint_dir = random_unit_vector(&mut palette_rng);
    Ok(ProceduralShape {
        spec: spec.clone(),
        dims,
        rot: quaternion_to_matrix(spec.rotation),
        color_a,
        color_b,
        paint_dir,
        bound,
    })
}

impl ProceduralShape {
    pub fn spec(&self) -> &ShapeSpec {
        &self.spec
    }

    /// Largest distance from the origin to the surface.
    pub fn bounding_radius(&self) -> f64 {
        self.bound
    }

    /// World to local: multiply by the transposed rotation.
    pub fn to_local(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rot;
        [
            r[0][0] * p[0] + r[1][0] * p[1] + r[2][0] * p[2],
            r[0][1] * p[0] + r[1][1] * p[1] + r[2][1] * p[2],
            r[0][2] * p[0] + r[1][2] * p[1] + r[2][2] * p[2],
        ]
    }

    /// Local to world.
    pub fn to_world(&self, q: [f64; 3]) -> [f64; 3] {
        let r = &self.rot;
        [
            r[0][0] * q[0] + r[0][1] * q[1] + r[0][2] * q[2],
            r[1][0] * q[0] + r[1][1] * q[1] + r[1][2] * q[2],
            r[2][0] * q[0] + r[2][1] * q[1] + r[2][2] * q[2],
        ]
    }

    /// Exact signed distance in the local frame, positive inside.
    pub fn local_signed_distance(&self, q: [f64; 3]) -> f64 {
        match self.dims {
            ShapeDims::Sphere { r } => r - norm3(q),
            ShapeDims::Box { h } => sdf_box(q, h),
            ShapeDims::Cylinder { r, h } => sdf_cylinder(q, r, h),
            ShapeDims::Cone { r, h } => sdf_capped_cone(q, r, 0.0, h),
            ShapeDims::Torus { major, minor } => minor - (q[0].hypot(q[1]) - major).hypot(q[2]),
            ShapeDims::Capsule { r, h } => {
                let dz = q[2] - q[2].clamp(-h, h);
                r - (q[0] * q[0] + q[1] * q[1] + dz * dz).sqrt()
            }
        }
    }

    /// Draws a point uniformly by area on the local surface.
    pub fn sample_local_surface(&self, rng: &mut dyn RngCore) -> [f64; 3] {
        match self.dims {
            ShapeDims::Sphere { r } => scale3(random_unit_vector(rng), r),
            ShapeDims::Box { h } => sample_box(rng, h),
            ShapeDims::Cylinder { r, h } => sample_cylinder(rng, r, h),
            ShapeDims::Cone { r, h } => sample_cone(rng, r, h),
            ShapeDims::Torus { major, minor } => sample_torus(rng, major, minor),
            ShapeDims::Capsule { r, h } => sample_capsule(rng, r, h),
        }
    }

    /// Color for a local surface point, per the spec's scheme. All channels
    /// stay inside `[-1, 1]`.
    pub fn color_at_local(&self, q: [f64; 3]) -> [f64; 3] {
        match self.spec.color_scheme {
            ColorScheme::Solid => self.color_a,
            ColorScheme::TwoTone => {
                if dot3(q, self.paint_dir) > 0.0 {
                    self.color_a
                } else {
                    self.color_b
                }
            }
            ColorScheme::AxisGradient => {
                let t = (0.5 + dot3(q, self.paint_dir) / (2.0 * self.bound)).clamp(0.0, 1.0);
                std::array::from_fn(|i| self.color_a[i] + t * (self.color_b[i] - self.color_a[i]))
            }
        }
    }

    /// One colored surface point in the world frame: `[x, y, z, r, g, b]`.
    pub fn sample_colored(&self, rng: &mut dyn RngCore) -> [f64; POINT_CHANNELS] {
        let q = self.sample_local_surface(rng);
        let p = self.to_world(q);
        let c = self.color_at_local(q);
        [p[0], p[1], p[2], c[0], c[1], c[2]]
    }
}

impl SdfOracle for ProceduralShape {
    fn signed_distance(&self, p: [f64; 3]) -> f64 {
        self.local_signed_distance(self.to_local(p))
    }

    fn sample_surface(&self, rng: &mut dyn RngCore) -> [f64; 3] {
        self.to_world(self.sample_local_surface(rng))
    }
}

/// Exact box distance, positive inside. `h` holds the half-extents.
fn sdf_box(q: [f64; 3], h: [f64; 3]) -> f64 {
    let d = [q[0].abs() - h[0], q[1].abs() - h[1], q[2].abs() - h[2]];
    let outside = norm3([d[0].max(0.0), d[1].max(0.0), d[2].max(0.0)]);
    let inside = d[0].max(d[1]).max(d[2]).min(0.0);
    -(outside + inside)
}

/// Exact capped-cylinder distance, positive inside.
fn sdf_cylinder(q: [f64; 3], r: f64, h: f64) -> f64 {
    let dr = q[0].hypot(q[1]) - r;
    let dz = q[2].abs() - h;
    let outside = dr.max(0.0).hypot(dz.max(0.0));
    let inside = dr.max(dz).min(0.0);
    -(outside + inside)
}

/// Exact truncated-cone distance, positive inside: radius `rb` at `z = -h`,
/// radius `rt` at `z = +h`. With `rt = 0` this is a pointed cone; with
/// `rb = rt` it reduces to the cylinder formula.
fn sdf_capped_cone(q: [f64; 3], rb: f64, rt: f64, h: f64) -> f64 {
    let rho = q[0].hypot(q[1]);
    let z = q[2];
    // Distance to the cap annulus (or apex) at the nearer end.
    let cap_r = if z < 0.0 { rb } else { rt };
    let ca = [(rho - rho.min(cap_r)).max(0.0), z.abs() - h];
    // Distance to the slanted side segment from (rb, -h) to (rt, +h).
    let k1 = [rt, h];
    let k2 = [rt - rb, 2.0 * h];
    let t = (((k1[0] - rho) * k2[0] + (k1[1] - z) * k2[1]) / (k2[0] * k2[0] + k2[1] * k2[1]))
        .clamp(0.0, 1.0);
    let cb = [rho - k1[0] + k2[0] * t, z - k1[1] + k2[1] * t];
    let inside = cb[0] < 0.0 && ca[1] < 0.0;
    let d = (ca[0] * ca[0] + ca[1] * ca[1])
        .min(cb[0] * cb[0] + cb[1] * cb[1])
        .sqrt();
    if inside {
        d
    } else {
        -d
    }
}

fn sample_box(rng: &mut dyn RngCore, h: [f64; 3]) -> [f64; 3] {
    // Pick a face pair proportionally to its area, then a sign.
    let areas = [h[1] * h[2], h[0] * h[2], h[0] * h[1]];
    let total = areas[0] + areas[1] + areas[2];
    let mut u = rng.random_range(0.0..total);
    let mut axis = 0;
    for (i, &a) in areas.iter().enumerate() {
        if u < a {
            axis = i;
            break;
        }
        u -= a;
        axis = i;
    }
    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let mut p = [
        rng.random_range(-h[0]..h[0]),
        rng.random_range(-h[1]..h[1]),
        rng.random_range(-h[2]..h[2]),
    ];
    p[axis] = sign * h[axis];
    p
}

fn sample_cylinder(rng: &mut dyn RngCore, r: f64, h: f64) -> [f64; 3] {
    use std::f64::consts::PI;
    let side = 4.0 * PI * r * h;
    let caps = 2.0 * PI * r * r;
    let theta = rng.random_range(0.0..2.0 * PI);
    if rng.random_range(0.0..side + caps) < side {
        [r * theta.cos(), r * theta.sin(), rng.random_range(-h..h)]
    } else {
        let rho = r * rng.random_range(0.0_f64..1.0).sqrt();
        let z = if rng.random::<bool>() { h } else { -h };
        [rho * theta.cos(), rho * theta.sin(), z]
    }
}

fn sample_cone(rng: &mut dyn RngCore, r: f64, h: f64) -> [f64; 3] {
    use std::f64::consts::PI;
    let slant = r.hypot(2.0 * h);
    let lateral = PI * r * slant;
    let base = PI * r * r;
    let theta = rng.random_range(0.0..2.0 * PI);
    if rng.random_range(0.0..lateral + base) < lateral {
        // Area grows linearly with distance from the apex.
        let t = rng.random_range(0.0_f64..1.0).sqrt();
        let rho = r * t;
        [rho * theta.cos(), rho * theta.sin(), h - 2.0 * h * t]
    } else {
        let rho = r * rng.random_range(0.0_f64..1.0).sqrt();
        [rho * theta.cos(), rho * theta.sin(), -h]
    }
}

fn sample_torus(rng: &mut dyn RngCore, major: f64, minor: f64) -> [f64; 3] {
    use std::f64::consts::PI;
    let theta = rng.random_range(0.0..2.0 * PI);
    // The outer side of the tube carries more area; accept tube angles in
    // proportion to their distance from the axis.
    for _ in 0..10_000 {
        let phi = rng.random_range(0.0..2.0 * PI);
        let w = (major + minor * phi.cos()) / (major + minor);
        if rng.random_range(0.0..1.0) < w {
            let ring = major + minor * phi.cos();
            return [ring * theta.cos(), ring * theta.sin(), minor * phi.sin()];
        }
    }
    unreachable!("torus sampling accepts at least half of all draws");
}

fn sample_capsule(rng: &mut dyn RngCore, r: f64, h: f64) -> [f64; 3] {
    use std::f64::consts::PI;
    let side = 4.0 * PI * r * h;
    let caps = 4.0 * PI * r * r;
    if rng.random_range(0.0..side + caps) < side {
        let theta = rng.random_range(0.0..2.0 * PI);
        [r * theta.cos(), r * theta.sin(), rng.random_range(-h..h)]
    } else {
        let dir = random_unit_vector(rng);
        let offset = if dir[2] >= 0.0 { h } else { -h };
        [r * dir[0], r * dir[1], r * dir[2] + offset]
    }
}

// ---------------------------------------------------------------------------
// Normalized-frame oracle
// ---------------------------------------------------------------------------

/// A shape's distance oracle expressed in a normalized frame: a point `p`
/// there corresponds to `center + scale * p` in the world. Distances divide
/// by `scale`, so they remain exact.
#[derive(Debug, Clone)]
pub struct NormalizedShape {
    shape: ProceduralShape,
    center: [f64; 3],
    scale: f64,
}

impl NormalizedShape {
    pub fn new(shape: ProceduralShape, center: [f64; 3], scale: f64) -> Result<NormalizedShape> {
        if !scale.is_finite() || scale <= 0.0 {
            return Err(Error::invalid("normalization scale must be positive"));
        }
        if center.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("normalization center must be finite"));
        }
        Ok(NormalizedShape {
            shape,
            center,
            scale,
        })
    }

    pub fn shape(&self) -> &ProceduralShape {
        &self.shape
    }
}

impl SdfOracle for NormalizedShape {
    fn signed_distance(&self, p: [f64; 3]) -> f64 {
        let world = [
            self.center[0] + self.scale * p[0],
            self.center[1] + self.scale * p[1],
            self.center[2] + self.scale * p[2],
        ];
        self.shape.signed_distance(world) / self.scale
    }

    fn sample_surface(&self, rng: &mut dyn RngCore) -> [f64; 3] {
        let w = self.shape.sample_surface(rng);
        [
            (w[0] - self.center[0]) / self.scale,
            (w[1] - self.center[1]) / self.scale,
            (w[2] - self.center[2]) / self.scale,
        ]
    }
}

// ---------------------------------------------------------------------------
// Records
// ---------------------------------------------------------------------------

/// One rendered conditioning view together with its camera.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordView {
    pub camera: Camera,
    pub image: ViewImage,
}

/// One training example: the spec that produced it, the selected normalized
/// cloud, rendered views, and the world-to-normalized transform.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub spec: ShapeSpec,
    /// `(CLOUD_HI_POINTS, 6)`, all channels in `[-1, 1]`, stored at f32
    /// precision. Rows are in farthest-point selection order.
    pub cloud_hi: PointCloud,
    pub views: Vec<RecordView>,
    /// Subtract, then divide by `norm_scale`, to go world to normalized.
    pub norm_center: [f64; 3],
    pub norm_scale: f64,
}

impl DatasetRecord {
    pub fn class_id(&self) -> usize {
        self.spec.class.id()
    }

    /// The first [`CLOUD_LO_POINTS`] rows: a farthest-point subset of
    /// `cloud_hi` by the prefix property of greedy selection.
    pub fn cloud_lo(&self) -> Result<PointCloud> {
        let idx: Vec<usize> = (0..CLOUD_LO_POINTS).collect();
        self.cloud_hi.select(&idx)
    }

    /// The remaining rows: what an upsampler must produce on top of
    /// `cloud_lo`.
    pub fn upsampler_target(&self) -> Result<PointCloud> {
        let idx: Vec<usize> = (CLOUD_LO_POINTS..self.cloud_hi.len()).collect();
        self.cloud_hi.select(&idx)
    }

    /// Exact distance oracle in the same frame as the stored clouds.
    pub fn oracle(&self) -> Result<NormalizedShape> {
        NormalizedShape::new(generate_shape(&self.spec)?, self.norm_center, self.norm_scale)
    }
}

/// Builds one record: dense colored surface sampling, normalization to
/// `[-1, 1]`, a flatness check, rendered views from random directions, and
/// farthest-point selection down to [`CLOUD_HI_POINTS`] points. Returns
/// `None` when the flatness filter rejects the cloud.
///
/// The normalized cloud is rounded to f32 precision before selection, so the
/// stored rows equal the file contents bit for bit and re-running the
/// selection on `cloud_hi` reproduces its row order exactly.
pub fn build_record(spec: &ShapeSpec, rng: &mut dyn RngCore) -> Result<Option<DatasetRecord>> {
    let shape = generate_shape(spec)?;
    let mut points = Array2::zeros((DENSE_SURFACE_POINTS, POINT_CHANNELS));
    for mut row in points.rows_mut() {
        let sample = shape.sample_colored(rng);
        for (dst, &v) in row.iter_mut().zip(sample.iter()) {
            *dst = v;
        }
    }
    let dense = PointCloud::new(points)?;
    let (center, scale) = normalization_transform(&dense)?;
    let mut norm = dense.points;
    for mut row in norm.rows_mut() {
        for a in 0..3 {
            row[a] = ((row[a] - center[a]) / scale) as f32 as f64;
        }
        for c in 3..POINT_CHANNELS {
            row[c] = row[c] as f32 as f64;
        }
    }
    let norm_cloud = PointCloud::new(norm)?;
    if !flatness_filter(&norm_cloud, DEFAULT_FLATNESS_THRESHOLD)? {
        return Ok(None);
    }
    let mut views = Vec::with_capacity(VIEWS_PER_RECORD);
    for _ in 0..VIEWS_PER_RECORD {
        let dir = random_unit_vector(rng);
        let up_hint = if dir[2].abs() > 0.99 {
            [1.0, 0.0, 0.0]
        } else {
            [0.0, 0.0, 1.0]
        };
        let camera = Camera::looking_at(
            scale3(dir, CAMERA_DISTANCE),
            [0.0; 3],
            up_hint,
            CAMERA_HALF_EXTENT,
        )?;
        let image = render_view(&norm_cloud, &camera, VIEW_RESOLUTION)?;
        views.push(RecordView { camera, image });
    }
    let selected = farthest_point_sample(&norm_cloud, CLOUD_HI_POINTS)?;
    let cloud_hi = norm_cloud.select(&selected)?;
    Ok(Some(DatasetRecord {
        spec: spec.clone(),
        cloud_hi,
        views,
        norm_center: center,
        norm_scale: scale,
    }))
}

// ---------------------------------------------------------------------------
// Dataset files
// ---------------------------------------------------------------------------

/// Knobs for building a dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetBuildConfig {
    /// Records per class; classes are interleaved round-robin.
    pub per_class_count: usize,
    pub seed: u64,
}

/// Summary written next to the record file. `content_sha256` covers the full
/// record file, so identical configs produce identical manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub seed: u64,
    pub per_class_count: usize,
    pub record_count: usize,
    /// Shapes rejected by the flatness filter and redrawn.
    pub rejected_count: usize,
    pub class_counts: BTreeMap<String, usize>,
    pub cloud_hi_points: usize,
    pub cloud_lo_points: usize,
    pub views_per_record: usize,
    pub view_resolution: usize,
    pub content_sha256: String,
}

struct HashingWriter<W: Write> {
    inner: W,
    hasher: Sha256,
}

impl<W: Write> Write for HashingWriter<W> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.hasher.update(&buf[..n]);
        Ok(n)
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.inner.flush()
    }
}

struct HashingReader<R: Read> {
    inner: R,
    hasher: Sha256,
}

impl<R: Read> Read for HashingReader<R> {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.hasher.update(&buf[..n]);
        Ok(n)
    }
}

fn hex_digest(hasher: Sha256) -> String {
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Builds `per_class_count` records per class under `dir`, writing
/// [`RECORDS_FILE`] and [`MANIFEST_FILE`]. Classes are interleaved
/// round-robin; flatness rejections draw a fresh spec for the same class, so
/// the class histogram is exactly uniform. Deterministic given the config.
pub fn build_dataset(config: &DatasetBuildConfig, dir: &Path) -> Result<DatasetManifest> {
    if config.per_class_count == 0 {
        return Err(Error::invalid("per_class_count must be positive"));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let records_path = dir.join(RECORDS_FILE);
    let file = fs::File::create(&records_path).map_err(|e| Error::io(&records_path, e))?;
    let mut w = HashingWriter {
        inner: BufWriter::new(file),
        hasher: Sha256::new(),
    };
    let io_err = |e: std::io::Error| Error::io(&records_path, e);

    let total = config.per_class_count * NUM_CLASSES;
    w.write_all(&FILE_MAGIC).map_err(io_err)?;
    w.write_all(&FILE_VERSION.to_le_bytes()).map_err(io_err)?;
    for dim in [
        CLOUD_HI_POINTS,
        CLOUD_LO_POINTS,
        VIEWS_PER_RECORD,
        VIEW_RESOLUTION,
    ] {
        w.write_all(&(dim as u32).to_le_bytes()).map_err(io_err)?;
    }
    w.write_all(&(total as u64).to_le_bytes()).map_err(io_err)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut rejected = 0usize;
    let mut class_counts = BTreeMap::new();
    for i in 0..total {
        let class = ShapeClass::ALL[i % NUM_CLASSES];
        let record = loop {
            let spec = ShapeSpec::random(class, &mut rng);
            match build_record(&spec, &mut rng)? {
                Some(r) => break r,
                None => rejected += 1,
            }
        };
        write_record(&mut w, &record).map_err(io_err)?;
        *class_counts.entry(class.name().to_string()).or_insert(0) += 1;
    }
    w.flush().map_err(io_err)?;

    let manifest = DatasetManifest {
        format_version: FILE_VERSION,
        seed: config.seed,
        per_class_count: config.per_class_count,
        record_count: total,
        rejected_count: rejected,
        class_counts,
        cloud_hi_points: CLOUD_HI_POINTS,
        cloud_lo_points: CLOUD_LO_POINTS,
        views_per_record: VIEWS_PER_RECORD,
        view_resolution: VIEW_RESOLUTION,
        content_sha256: hex_digest(w.hasher),
    };
    let manifest_path = dir.join(MANIFEST_FILE);
    let mut json = serde_json::to_vec_pretty(&manifest)
        .map_err(|e| Error::Format(format!("manifest serialization failed: {e}")))?;
    json.push(b'\n');
    fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest)
}

fn write_record<W: Write>(w: &mut W, rec: &DatasetRecord) -> std::io::Result<()> {
    w.write_all(&(rec.spec.class.id() as u32).to_le_bytes())?;
    w.write_all(&(rec.spec.color_scheme.id() as u32).to_le_bytes())?;
    w.write_all(&rec.spec.seed.to_le_bytes())?;
    for v in rec
        .spec
        .scale
        .iter()
        .chain(rec.spec.rotation.iter())
        .chain(rec.norm_center.iter())
        .chain(std::iter::once(&rec.norm_scale))
    {
        w.write_all(&v.to_le_bytes())?;
    }
    for &v in rec.cloud_hi.points.iter() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    for view in &rec.views {
        let cam = &view.camera;
        for v in cam
            .position
            .iter()
            .chain(cam.forward.iter())
            .chain(cam.right.iter())
            .chain(cam.up.iter())
            .chain(std::iter::once(&cam.half_extent))
        {
            w.write_all(&v.to_le_bytes())?;
        }
        for &px in view.image.pixels.iter() {
            w.write_all(&px.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| Error::io(path, e))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R, path: &Path) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|e| Error::io(path, e))?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64s<R: Read>(r: &mut R, path: &Path, n: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; 8 * n];
    r.read_exact(&mut bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn read_f32s<R: Read>(r: &mut R, path: &Path, n: usize) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; 4 * n];
    r.read_exact(&mut bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn read_record<R: Read>(r: &mut R, path: &Path) -> Result<DatasetRecord> {
    let class = ShapeClass::from_id(read_u32(r, path)? as usize)?;
    let color_scheme = ColorScheme::from_id(read_u32(r, path)? as usize)?;
    let seed = read_u64(r, path)?;
    let floats = read_f64s(r, path, 11)?;
    let spec = ShapeSpec {
        class,
        scale: [floats[0], floats[1], floats[2]],
        rotation: [floats[3], floats[4], floats[5], floats[6]],
        color_scheme,
        seed,
    };
    spec.validate()?;
    let norm_center = [floats[7], floats[8], floats[9]];
    let norm_scale = floats[10];

    let cloud_vals = read_f32s(r, path, CLOUD_HI_POINTS * POINT_CHANNELS)?;
    if cloud_vals.iter().any(|v| !v.is_finite() || v.abs() > 1.0) {
        return Err(Error::Format(format!(
            "cloud values outside [-1, 1] in {}",
            path.display()
        )));
    }
    let points = Array2::from_shape_vec(
        (CLOUD_HI_POINTS, POINT_CHANNELS),
        cloud_vals.iter().map(|&v| v as f64).collect(),
    )
    .map_err(|e| Error::Format(format!("cloud block shape: {e}")))?;
    let cloud_hi = PointCloud::new(points)?;

    let mut views = Vec::with_capacity(VIEWS_PER_RECORD);
    for _ in 0..VIEWS_PER_RECORD {
        let cam = read_f64s(r, path, 13)?;
        let camera = Camera {
            position: [cam[0], cam[1], cam[2]],
            forward: [cam[3], cam[4], cam[5]],
            right: [cam[6], cam[7], cam[8]],
            up: [cam[9], cam[10], cam[11]],
            half_extent: cam[12],
        };
        let pixels = read_f32s(r, path, VIEW_RESOLUTION * VIEW_RESOLUTION * 5)?;
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format(format!(
                "non-finite view pixel in {}",
                path.display()
            )));
        }
        let image = ViewImage {
            pixels: Array3::from_shape_vec((VIEW_RESOLUTION, VIEW_RESOLUTION, 5), pixels)
                .map_err(|e| Error::Format(format!("view block shape: {e}")))?,
        };
        views.push(RecordView { camera, image });
    }
    NormalizedShape::new(generate_shape(&spec)?, norm_center, norm_scale)?;
    Ok(DatasetRecord {
        spec,
        cloud_hi,
        views,
        norm_center,
        norm_scale,
    })
}

/// Reads the manifest from a dataset directory.
pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_slice(&bytes).map_err(|e| Error::Parse {
        path: path.clone(),
        location: format!("line {}", e.line()),
        detail: e.to_string(),
    })?;
    if manifest.format_version != FILE_VERSION {
        return Err(Error::Format(format!(
            "manifest format version {} unsupported (expected {FILE_VERSION})",
            manifest.format_version
        )));
    }
    Ok(manifest)
}

/// Reads every record in a dataset directory, verifying the layout constants
/// and the manifest's content hash.
pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<DatasetRecord>)> {
    let manifest = load_manifest(dir)?;
    let path = dir.join(RECORDS_FILE);
    let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut r = HashingReader {
        inner: BufReader::new(file),
        hasher: Sha256::new(),
    };

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::io(&path, e))?;
    if magic != FILE_MAGIC {
        return Err(Error::Format(format!(
            "bad magic in {}: {magic:?}",
            path.display()
        )));
    }
    let version = read_u32(&mut r, &path)?;
    if version != FILE_VERSION {
        return Err(Error::Format(format!(
            "record file version {version} unsupported (expected {FILE_VERSION})"
        )));
    }
    for (name, expected) in [
        ("cloud_hi_points", CLOUD_HI_POINTS),
        ("cloud_lo_points", CLOUD_LO_POINTS),
        ("views_per_record", VIEWS_PER_RECORD),
        ("view_resolution", VIEW_RESOLUTION),
    ] {
        let got = read_u32(&mut r, &path)? as usize;
        if got != expected {
            return Err(Error::Format(format!(
                "record file {name} = {got}, expected {expected}"
            )));
        }
    }
    let count = read_u64(&mut r, &path)? as usize;
    if count != manifest.record_count {
        return Err(Error::Format(format!(
            "record file holds {count} records but manifest says {}",
            manifest.record_count
        )));
    }

    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        records.push(read_record(&mut r, &path)?);
    }
    let mut trailing = Vec::new();
    r.read_to_end(&mut trailing).map_err(|e| Error::io(&path, e))?;
    if !trailing.is_empty() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the last record in {}",
            trailing.len(),
            path.display()
        )));
    }
    let digest = hex_digest(r.hasher);
    if digest != manifest.content_sha256 {
        return Err(Error::Format(format!(
            "record file hash {digest} does not match manifest {}",
            manifest.content_sha256
        )));
    }
    Ok((manifest, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn test_rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn spec_with(
        class: ShapeClass,
        scale: [f64; 3],
        rotation: [f64; 4],
        color_scheme: ColorScheme,
        seed: u64,
    ) -> ShapeSpec {
        ShapeSpec {
            class,
            scale,
            rotation,
            color_scheme,
            seed,
        }
    }

    const IDENTITY_ROT: [f64; 4] = [1.0, 0.0, 0.0, 0.0];

    /// Containment decided by elementary geometry, independent of the
    /// distance formulas.
    fn inside_by_geometry(dims: ShapeDims, q: [f64; 3]) -> bool {
        let rho = q[0].hypot(q[1]);
        match dims {
            ShapeDims::Sphere { r } => norm3(q) < r,
            ShapeDims::Box { h } => (0..3).all(|a| q[a].abs() < h[a]),
            ShapeDims::Cylinder { r, h } => rho < r && q[2].abs() < h,
            ShapeDims::Cone { r, h } => {
                q[2].abs() < h && rho < r * (h - q[2]) / (2.0 * h)
            }
            ShapeDims::Torus { major, minor } => {
                let dr = rho - major;
                dr * dr + q[2] * q[2] < minor * minor
            }
            ShapeDims::Capsule { r, h } => {
                let dz = q[2] - q[2].clamp(-h, h);
                (q[0] * q[0] + q[1] * q[1] + dz * dz).sqrt() < r
            }
        }
    }

    #[test]
    fn sphere_center_distance_equals_radius() {
        let mut rng = test_rng(11);
        let rot = random_unit_quaternion(&mut rng);
        let spec = spec_with(ShapeClass::Sphere, [0.8, 0.5, 0.5], rot, ColorScheme::Solid, 1);
        let shape = generate_shape(&spec).unwrap();
        assert_eq!(shape.signed_distance([0.0, 0.0, 0.0]), 0.4);
    }

    #[test]
    fn box_corner_plus_unit_diagonal_reads_minus_one() {
        let spec = spec_with(
            ShapeClass::Box,
            [1.0, 0.6, 0.4],
            IDENTITY_ROT,
            ColorScheme::Solid,
            2,
        );
        let shape = generate_shape(&spec).unwrap();
        let s = 1.0 / 3.0_f64.sqrt();
        let p = [0.5 + s, 0.3 + s, 0.2 + s];
        assert!((shape.signed_distance(p) + 1.0).abs() < 1e-9);

        // The same configuration rotated into a random world frame agrees.
        let mut rng = test_rng(3);
        let rotated = spec_with(
            ShapeClass::Box,
            [1.0, 0.6, 0.4],
            random_unit_quaternion(&mut rng),
            ColorScheme::Solid,
            2,
        );
        let rotated = generate_shape(&rotated).unwrap();
        assert!((rotated.signed_distance(rotated.to_world(p)) + 1.0).abs() < 1e-9);
    }

    #[test]
    fn every_class_puts_samples_on_its_zero_set() {
        let mut rng = test_rng(17);
        for class in ShapeClass::ALL {
            for _ in 0..3 {
                let spec = ShapeSpec::random(class, &mut rng);
                let shape = generate_shape(&spec).unwrap();
                for _ in 0..400 {
                    let p = shape.sample_surface(&mut rng);
                    let d = shape.signed_distance(p);
                    assert!(
                        d.abs() < 1e-9,
                        "{}: surface sample off the zero set by {d}",
                        class.name()
                    );
                }
            }
        }
    }

    #[test]
    fn capped_cone_with_equal_radii_matches_the_cylinder_formula() {
        let mut rng = test_rng(23);
        for _ in 0..20 {
            let r = rng.random_range(0.1..0.6);
            let h = rng.random_range(0.1..0.6);
            for _ in 0..200 {
                let q = [
                    rng.random_range(-1.2..1.2),
                    rng.random_range(-1.2..1.2),
                    rng.random_range(-1.2..1.2),
                ];
                let cone = sdf_capped_cone(q, r, r, h);
                let cyl = sdf_cylinder(q, r, h);
                assert!(
                    (cone - cyl).abs() < 1e-12,
                    "degenerate cone {cone} vs cylinder {cyl} at {q:?}"
                );
            }
        }
    }

    #[test]
    fn signed_distances_match_a_brute_force_surface_scan() {
        // The nearest of 40k area-uniform surface samples overestimates the
        // true distance by at most the sampling resolution; the sign must
        // agree with an elementary containment test.
        let mut rng = test_rng(29);
        for class in ShapeClass::ALL {
            let spec = ShapeSpec::random(class, &mut rng);
            let shape = generate_shape(&spec).unwrap();
            let samples: Vec<[f64; 3]> =
                (0..40_000).map(|_| shape.sample_surface(&mut rng)).collect();
            for _ in 0..25 {
                let p = [
                    rng.random_range(-1.1..1.1),
                    rng.random_range(-1.1..1.1),
                    rng.random_range(-1.1..1.1),
                ];
                let d = shape.signed_distance(p);
                let brute = samples
                    .iter()
                    .map(|s| {
                        let e = [p[0] - s[0], p[1] - s[1], p[2] - s[2]];
                        norm3(e)
                    })
                    .fold(f64::INFINITY, f64::min);
                assert!(
                    d.abs() <= brute + 1e-9,
                    "{}: |sdf| = {} exceeds sampled distance {brute}",
                    class.name(),
                    d.abs()
                );
                assert!(
                    brute - d.abs() <= 0.04,
                    "{}: |sdf| = {} far below sampled distance {brute} at {p:?}",
                    class.name(),
                    d.abs()
                );
                if d.abs() > 1e-3 {
                    assert_eq!(
                        d > 0.0,
                        inside_by_geometry(shape.dims, shape.to_local(p)),
                        "{}: sign disagrees with containment at {p:?}",
                        class.name()
                    );
                }
            }
        }
    }

    #[test]
    fn rotation_preserves_local_distances() {
        let mut rng = test_rng(31);
        for class in ShapeClass::ALL {
            let spec = ShapeSpec::random(class, &mut rng);
            let shape = generate_shape(&spec).unwrap();
            for _ in 0..50 {
                let q = [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ];
                let via_world = shape.signed_distance(shape.to_world(q));
                let local = shape.local_signed_distance(q);
                assert!((via_world - local).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn box_faces_are_hit_in_proportion_to_area() {
        let spec = spec_with(
            ShapeClass::Box,
            [1.0, 0.6, 0.4],
            IDENTITY_ROT,
            ColorScheme::Solid,
            5,
        );
        let shape = generate_shape(&spec).unwrap();
        let h = [0.5, 0.3, 0.2];
        let mut rng = test_rng(37);
        let n = 24_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            let q = shape.sample_local_surface(&mut rng);
            let pinned: Vec<usize> = (0..3).filter(|&a| q[a].abs() == h[a]).collect();
            assert_eq!(pinned.len(), 1, "sample must sit on exactly one face pair");
            counts[pinned[0]] += 1;
        }
        let areas = [h[1] * h[2], h[0] * h[2], h[0] * h[1]];
        let total: f64 = areas.iter().sum();
        for a in 0..3 {
            let frac = counts[a] as f64 / n as f64;
            let expected = areas[a] / total;
            assert!(
                (frac - expected).abs() < 0.02,
                "face pair {a}: {frac} vs {expected}"
            );
        }
    }

    #[test]
    fn cylinder_caps_and_side_split_by_area() {
        let spec = spec_with(
            ShapeClass::Cylinder,
            [1.0, 0.5, 0.8],
            IDENTITY_ROT,
            ColorScheme::Solid,
            6,
        );
        let shape = generate_shape(&spec).unwrap();
        let (r, h) = (0.4, 0.4);
        let mut rng = test_rng(41);
        let n = 24_000;
        let mut caps = 0usize;
        for _ in 0..n {
            let q = shape.sample_local_surface(&mut rng);
            if q[2].abs() == h {
                caps += 1;
                assert!(q[0].hypot(q[1]) <= r + 1e-12);
            } else {
                assert!((q[0].hypot(q[1]) - r).abs() < 1e-12);
            }
        }
        let expected = r / (r + 2.0 * h);
        let frac = caps as f64 / n as f64;
        assert!((frac - expected).abs() < 0.02, "cap fraction {frac} vs {expected}");
    }

    #[test]
    fn cone_base_fraction_and_lateral_density() {
        let spec = spec_with(
            ShapeClass::Cone,
            [1.0, 0.5, 1.0],
            IDENTITY_ROT,
            ColorScheme::Solid,
            7,
        );
        let shape = generate_shape(&spec).unwrap();
        let (r, h) = (0.45_f64, 0.5);
        let slant = r.hypot(2.0 * h);
        let mut rng = test_rng(43);
        let n = 24_000;
        let mut base = 0usize;
        let mut t_sum = 0.0;
        let mut lateral = 0usize;
        for _ in 0..n {
            let q = shape.sample_local_surface(&mut rng);
            if q[2] == -h && q[0].hypot(q[1]) < r - 1e-12 {
                base += 1;
            } else {
                // On the slanted side the radial coordinate fixes the height.
                let t = q[0].hypot(q[1]) / r;
                assert!((q[2] - (h - 2.0 * h * t)).abs() < 1e-12);
                t_sum += t;
                lateral += 1;
            }
        }
        let expected = r / (r + slant);
        let frac = base as f64 / n as f64;
        assert!((frac - expected).abs() < 0.02, "base fraction {frac} vs {expected}");
        // Area grows linearly from the apex, so the apex-distance fraction
        // has mean 2/3.
        let t_mean = t_sum / lateral as f64;
        assert!((t_mean - 2.0 / 3.0).abs() < 0.02, "lateral density mean {t_mean}");
    }

    #[test]
    fn torus_tube_angle_density_matches_the_revolution_weight() {
        let spec = spec_with(
            ShapeClass::Torus,
            [1.0, 1.0, 0.5],
            IDENTITY_ROT,
            ColorScheme::Solid,
            8,
        );
        let shape = generate_shape(&spec).unwrap();
        let (major, minor) = (0.35, 0.35 * 0.5);
        let mut rng = test_rng(47);
        let n = 30_000;
        let mut cos_sum = 0.0;
        for _ in 0..n {
            let q = shape.sample_local_surface(&mut rng);
            let cos_phi = (q[0].hypot(q[1]) - major) / minor;
            let sin_phi = q[2] / minor;
            assert!((cos_phi * cos_phi + sin_phi * sin_phi - 1.0).abs() < 1e-9);
            cos_sum += cos_phi;
        }
        // Revolution area weights the tube angle by (major + minor cos), so
        // the mean cosine is minor / (2 major).
        let expected = minor / (2.0 * major);
        let mean = cos_sum / n as f64;
        assert!((mean - expected).abs() < 0.02, "mean tube cosine {mean} vs {expected}");
    }

    #[test]
    fn capsule_caps_cover_their_share() {
        let spec = spec_with(
            ShapeClass::Capsule,
            [1.0, 0.5, 0.8],
            IDENTITY_ROT,
            ColorScheme::Solid,
            9,
        );
        let shape = generate_shape(&spec).unwrap();
        let (r, h) = (0.25, 0.4 * 0.8);
        let mut rng = test_rng(53);
        let n = 24_000;
        let mut caps = 0usize;
        for _ in 0..n {
            let q = shape.sample_local_surface(&mut rng);
            if q[2].abs() > h + 1e-12 {
                caps += 1;
                let centre = if q[2] > 0.0 { h } else { -h };
                let d = (q[0] * q[0] + q[1] * q[1] + (q[2] - centre) * (q[2] - centre)).sqrt();
                assert!((d - r).abs() < 1e-12);
            } else {
                assert!((q[0].hypot(q[1]) - r).abs() < 1e-12);
            }
        }
        let expected = r / (r + h);
        let frac = caps as f64 / n as f64;
        assert!((frac - expected).abs() < 0.02, "cap fraction {frac} vs {expected}");
    }

    #[test]
    fn solid_scheme_paints_every_point_alike() {
        let mut rng = test_rng(59);
        let spec = ShapeSpec {
            color_scheme: ColorScheme::Solid,
            ..ShapeSpec::random(ShapeClass::Torus, &mut rng)
        };
        let shape = generate_shape(&spec).unwrap();
        let first = shape.sample_colored(&mut rng);
        for _ in 0..500 {
            let s = shape.sample_colored(&mut rng);
            assert_eq!(&s[3..], &first[3..]);
            assert!(s[3..].iter().all(|c| c.abs() <= 1.0));
        }
    }

    #[test]
    fn two_tone_uses_exactly_the_two_palette_colors() {
        let mut rng = test_rng(61);
        let spec = ShapeSpec {
            color_scheme: ColorScheme::TwoTone,
            ..ShapeSpec::random(ShapeClass::Sphere, &mut rng)
        };
        let shape = generate_shape(&spec).unwrap();
        let mut seen_a = 0usize;
        let mut seen_b = 0usize;
        for _ in 0..2000 {
            let s = shape.sample_colored(&mut rng);
            let c = [s[3], s[4], s[5]];
            if c == shape.color_a {
                seen_a += 1;
            } else if c == shape.color_b {
                seen_b += 1;
            } else {
                panic!("color {c:?} not in the palette");
            }
        }
        assert!(seen_a > 100 && seen_b > 100, "both tones must appear");
    }

    #[test]
    fn gradient_interpolates_the_palette_along_the_paint_axis() {
        let mut rng = test_rng(67);
        let spec = ShapeSpec {
            color_scheme: ColorScheme::AxisGradient,
            ..ShapeSpec::random(ShapeClass::Capsule, &mut rng)
        };
        let shape = generate_shape(&spec).unwrap();
        for _ in 0..500 {
            let q = shape.sample_local_surface(&mut rng);
            let c = shape.color_at_local(q);
            let t = (0.5 + dot3(q, shape.paint_dir) / (2.0 * shape.bound)).clamp(0.0, 1.0);
            for i in 0..3 {
                let expected = shape.color_a[i] + t * (shape.color_b[i] - shape.color_a[i]);
                assert!((c[i] - expected).abs() < 1e-12);
                assert!(c[i].abs() <= 1.0);
            }
            assert!((0.0..=1.0).contains(&t));
        }
    }

    #[test]
    fn same_seed_rebuilds_the_same_palette() {
        let mut rng = test_rng(71);
        let spec = ShapeSpec::random(ShapeClass::Cone, &mut rng);
        let a = generate_shape(&spec).unwrap();
        let b = generate_shape(&spec).unwrap();
        assert_eq!(a.color_a, b.color_a);
        assert_eq!(a.color_b, b.color_b);
        assert_eq!(a.paint_dir, b.paint_dir);

        let other = ShapeSpec {
            seed: spec.seed.wrapping_add(1),
            ..spec
        };
        let c = generate_shape(&other).unwrap();
        assert!(a.color_a != c.color_a || a.color_b != c.color_b || a.paint_dir != c.paint_dir);
    }

    #[test]
    fn spec_validation_rejects_out_of_range_values() {
        let mut rng = test_rng(73);
        let good = ShapeSpec::random(ShapeClass::Box, &mut rng);
        good.validate().unwrap();

        let mut bad = good.clone();
        bad.scale[1] = 0.2;
        assert!(bad.validate().is_err());
        let mut bad = good.clone();
        bad.scale[0] = 1.5;
        assert!(bad.validate().is_err());
        let mut bad = good.clone();
        bad.scale[2] = f64::NAN;
        assert!(bad.validate().is_err());
        let mut bad = good.clone();
        bad.rotation = [1.0, 0.0, 0.0, 0.1];
        assert!(bad.validate().is_err());
        assert!(generate_shape(&bad).is_err());
    }

    #[test]
    fn random_specs_stay_in_range_and_cover_all_schemes() {
        let mut rng = test_rng(79);
        let mut schemes = [false; 3];
        for _ in 0..200 {
            let spec = ShapeSpec::random(ShapeClass::Cylinder, &mut rng);
            spec.validate().unwrap();
            assert_eq!(spec.class, ShapeClass::Cylinder);
            let n: f64 = spec.rotation.iter().map(|&q| q * q).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
            schemes[spec.color_scheme.id()] = true;
        }
        assert!(schemes.iter().all(|&s| s), "all color schemes should appear");
    }

    #[test]
    fn class_ids_and_names_round_trip() {
        for (i, class) in ShapeClass::ALL.into_iter().enumerate() {
            assert_eq!(class.id(), i);
            assert_eq!(ShapeClass::from_id(i).unwrap(), class);
            assert_eq!(ShapeClass::from_name(class.name()).unwrap(), class);
        }
        assert!(ShapeClass::from_id(NUM_CLASSES).is_err());
        assert!(ShapeClass::from_name("pyramid").is_err());
        for (i, scheme) in ColorScheme::ALL.into_iter().enumerate() {
            assert_eq!(scheme.id(), i);
            assert_eq!(ColorScheme::from_id(i).unwrap(), scheme);
        }
        assert!(ColorScheme::from_id(3).is_err());
    }

    #[test]
    fn built_records_are_normalized_nested_and_accurate() {
        let mut rng = test_rng(83);
        let spec = ShapeSpec::random(ShapeClass::Torus, &mut rng);
        let rec = build_record(&spec, &mut rng).unwrap().expect("not flat");

        assert_eq!(rec.cloud_hi.len(), CLOUD_HI_POINTS);
        // Normalization pins the dense cloud's largest coordinate at 1;
        // the selected subset must stay inside and reach near the boundary.
        let max_abs = rec
            .cloud_hi
            .xyz()
            .iter()
            .fold(0.0_f64, |m, &v| m.max(v.abs()));
        assert!((0.95..=1.0).contains(&max_abs), "largest coordinate {max_abs}");
        assert!(rec.cloud_hi.points.iter().all(|&v| v.abs() <= 1.0));

        // Greedy selection re-run on the stored cloud reproduces its own
        // prefix, so the low-res cloud is exactly the first rows.
        let again = farthest_point_sample(&rec.cloud_hi, CLOUD_LO_POINTS).unwrap();
        let expected: Vec<usize> = (0..CLOUD_LO_POINTS).collect();
        assert_eq!(again, expected);
        let lo = rec.cloud_lo().unwrap();
        assert_eq!(lo.points, rec.cloud_hi.points.slice(ndarray::s![..CLOUD_LO_POINTS, ..]));
        let rest = rec.upsampler_target().unwrap();
        assert_eq!(rest.len(), CLOUD_HI_POINTS - CLOUD_LO_POINTS);

        assert!(flatness_filter(&rec.cloud_hi, DEFAULT_FLATNESS_THRESHOLD).unwrap());

        // Every stored point sits on the analytic surface expressed in the
        // normalized frame, far inside the 0.02 acceptance band.
        let oracle = rec.oracle().unwrap();
        let mut worst = 0.0_f64;
        for row in rec.cloud_hi.xyz().rows() {
            let d = oracle.signed_distance([row[0], row[1], row[2]]).abs();
            worst = worst.max(d);
        }
        assert!(worst < 1e-4, "worst surface deviation {worst}");
        let within = rec
            .cloud_hi
            .xyz()
            .rows()
            .into_iter()
            .filter(|row| oracle.signed_distance([row[0], row[1], row[2]]).abs() < 0.02)
            .count();
        assert!(within * 100 >= rec.cloud_hi.len() * 95);

        assert_eq!(rec.views.len(), VIEWS_PER_RECORD);
        for view in &rec.views {
            let px = &view.image.pixels;
            assert_eq!(px.shape(), &[VIEW_RESOLUTION, VIEW_RESOLUTION, 5]);
            let mut covered = 0usize;
            for y in 0..VIEW_RESOLUTION {
                for x in 0..VIEW_RESOLUTION {
                    let alpha = px[[y, x, 3]];
                    assert!(alpha == 0.0 || alpha == 1.0);
                    let depth = px[[y, x, 4]];
                    if alpha == 1.0 {
                        covered += 1;
                        // Cameras sit at distance 2 from a scene of radius
                        // at most sqrt(3).
                        assert!(depth > 0.2 && depth < 3.8, "depth {depth}");
                    } else {
                        assert_eq!(depth, 0.0);
                    }
                }
            }
            assert!(covered > 20, "view covers only {covered} pixels");
            assert!((norm3(view.camera.position) - CAMERA_DISTANCE).abs() < 1e-9);
            assert_eq!(view.camera.half_extent, CAMERA_HALF_EXTENT);
        }
    }

    #[test]
    fn normalized_oracle_matches_the_world_oracle() {
        let mut rng = test_rng(89);
        let spec = ShapeSpec::random(ShapeClass::Cone, &mut rng);
        let shape = generate_shape(&spec).unwrap();
        let center = [0.1, -0.2, 0.05];
        let scale = 0.55;
        let normalized = NormalizedShape::new(shape.clone(), center, scale).unwrap();
        for _ in 0..100 {
            let p = [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ];
            let world = [
                center[0] + scale * p[0],
                center[1] + scale * p[1],
                center[2] + scale * p[2],
            ];
            let expected = shape.signed_distance(world) / scale;
            assert!((normalized.signed_distance(p) - expected).abs() < 1e-12);
        }
        for _ in 0..200 {
            let s = normalized.sample_surface(&mut rng);
            assert!(normalized.signed_distance(s).abs() < 1e-9);
        }
        assert!(NormalizedShape::new(shape.clone(), center, 0.0).is_err());
        assert!(NormalizedShape::new(shape, [f64::NAN, 0.0, 0.0], 1.0).is_err());
    }

    #[test]
    fn tiny_dataset_round_trips_with_exact_balance() {
        let dir = tempfile::tempdir().unwrap();
        let config = DatasetBuildConfig {
            per_class_count: 2,
            seed: 7,
        };
        let manifest = build_dataset(&config, dir.path()).unwrap();
        assert_eq!(manifest.record_count, 2 * NUM_CLASSES);
        assert_eq!(manifest.rejected_count, 0);
        assert_eq!(manifest.class_counts.len(), NUM_CLASSES);
        for class in ShapeClass::ALL {
            assert_eq!(manifest.class_counts[class.name()], 2);
        }

        let (loaded_manifest, records) = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded_manifest, manifest);
        assert_eq!(records.len(), manifest.record_count);
        for (i, rec) in records.iter().enumerate() {
            assert_eq!(rec.class_id(), i % NUM_CLASSES, "round-robin class order");
            assert_eq!(rec.cloud_hi.len(), CLOUD_HI_POINTS);
            assert!(rec.cloud_hi.points.iter().all(|&v| v.abs() <= 1.0));
            let nested = farthest_point_sample(&rec.cloud_hi, CLOUD_LO_POINTS).unwrap();
            let expected: Vec<usize> = (0..CLOUD_LO_POINTS).collect();
            assert_eq!(nested, expected);
        }

        // The same configuration rebuilds byte-identical files.
        let dir2 = tempfile::tempdir().unwrap();
        let manifest2 = build_dataset(&config, dir2.path()).unwrap();
        assert_eq!(manifest2, manifest);
        let bytes1 = fs::read(dir.path().join(RECORDS_FILE)).unwrap();
        let bytes2 = fs::read(dir2.path().join(RECORDS_FILE)).unwrap();
        assert_eq!(bytes1, bytes2);
        let (_, records2) = load_dataset(dir2.path()).unwrap();
        assert_eq!(records, records2);

        // A different seed produces different content.
        let dir3 = tempfile::tempdir().unwrap();
        let manifest3 = build_dataset(
            &DatasetBuildConfig {
                per_class_count: 2,
                seed: 8,
            },
            dir3.path(),
        )
        .unwrap();
        assert_ne!(manifest3.content_sha256, manifest.content_sha256);
    }

    #[test]
    fn corrupted_dataset_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let config = DatasetBuildConfig {
            per_class_count: 1,
            seed: 13,
        };
        build_dataset(&config, dir.path()).unwrap();
        let records_path = dir.path().join(RECORDS_FILE);
        let pristine = fs::read(&records_path).unwrap();

        // Truncation is caught while reading records.
        fs::write(&records_path, &pristine[..pristine.len() - 100]).unwrap();
        assert!(load_dataset(dir.path()).is_err());

        // A flipped payload byte fails the manifest hash check.
        let mut flipped = pristine.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 0x01;
        fs::write(&records_path, &flipped).unwrap();
        assert!(load_dataset(dir.path()).is_err());

        // A bad magic number is rejected before anything else.
        let mut bad_magic = pristine.clone();
        bad_magic[0] = b'X';
        fs::write(&records_path, &bad_magic).unwrap();
        assert!(load_dataset(dir.path()).is_err());

        // Extra trailing bytes are rejected even though all records parse.
        let mut padded = pristine.clone();
        padded.extend_from_slice(&[0u8; 16]);
        fs::write(&records_path, &padded).unwrap();
        assert!(load_dataset(dir.path()).is_err());

        // A manifest that disagrees with the record count is rejected.
        fs::write(&records_path, &pristine).unwrap();
        let manifest_path = dir.path().join(MANIFEST_FILE);
        let mut manifest = load_manifest(dir.path()).unwrap();
        manifest.record_count = 5;
        fs::write(
            &manifest_path,
            serde_json::to_vec_pretty(&manifest).unwrap(),
        )
        .unwrap();
        assert!(load_dataset(dir.path()).is_err());

        // Unknown manifest fields are errors, not silently ignored.
        let mut value: serde_json::Value =
            serde_json::from_slice(&fs::read(&manifest_path).unwrap()).unwrap();
        value["record_count"] = serde_json::json!(6);
        value["surprise"] = serde_json::json!(true);
        fs::write(&manifest_path, serde_json::to_vec_pretty(&value).unwrap()).unwrap();
        assert!(load_manifest(dir.path()).is_err());

        // Restoring the original bytes loads cleanly again.
        manifest.record_count = 6;
        fs::write(
            &manifest_path,
            serde_json::to_vec_pretty(&manifest).unwrap(),
        )
        .unwrap();
        let (_, records) = load_dataset(dir.path()).unwrap();
        assert_eq!(records.len(), 6);
    }

    #[test]
    fn build_rejects_empty_configs_and_bad_specs() {
        let dir = tempfile::tempdir().unwrap();
        let config = DatasetBuildConfig {
            per_class_count: 0,
            seed: 1,
        };
        assert!(build_dataset(&config, dir.path()).is_err());

        let mut rng = test_rng(97);
        let mut spec = ShapeSpec::random(ShapeClass::Sphere, &mut rng);
        spec.scale[0] = 2.0;
        assert!(build_record(&spec, &mut rng).is_err());
    }
}
