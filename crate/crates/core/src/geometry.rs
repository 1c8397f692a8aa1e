//! Point-cloud types and operations: farthest-point sampling, normalization,
//! flatness filtering, orthographic view rendering with depth, back-projection
//! of rendered views, and ASCII PLY I/O.

use crate::error::{Error, Result};
use crate::linalg::singular_values_nx3;
use ndarray::{s, Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

/// Number of channels per point: xyz plus rgb.
pub const POINT_CHANNELS: usize = 6;
/// Depth value stored for uncovered pixels.
pub const BACKGROUND_DEPTH: f32 = 0.0;

/// A colored point cloud. `points` is `(K, 6)`: columns 0..3 are xyz and
/// 3..6 are rgb. Normalized clouds keep every channel in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Array2<f64>,
}

impl PointCloud {
    /// Validates shape and finiteness; does not require any value range.
    pub fn new(points: Array2<f64>) -> Result<Self> {
        if points.nrows() == 0 {
            return Err(Error::EmptyCloud("PointCloud::new".into()));
        }
        if points.ncols() != POINT_CHANNELS {
            return Err(Error::invalid(format!(
                "point cloud needs {POINT_CHANNELS} channels, got {}",
                points.ncols()
            )));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("PointCloud::new", "non-finite value"));
        }
        Ok(PointCloud { points })
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn xyz(&self) -> ArrayView2<'_, f64> {
        self.points.slice(s![.., 0..3])
    }

    pub fn colors(&self) -> ArrayView2<'_, f64> {
        self.points.slice(s![.., 3..6])
    }

    /// New cloud from the given row indices, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<PointCloud> {
        if indices.is_empty() {
            return Err(Error::EmptyCloud("PointCloud::select".into()));
        }
        let mut out = Array2::zeros((indices.len(), POINT_CHANNELS));
        for (row, &i) in indices.iter().enumerate() {
            if i >= self.len() {
                return Err(Error::invalid(format!("select index {i} out of range")));
            }
            out.row_mut(row).assign(&self.points.row(i));
        }
        Ok(PointCloud { points: out })
    }
}

/// Farthest-point sampling over xyz. Returns `m` row indices in selection
/// order, starting from row 0. Greedy selection is prefix-nested: the first
/// `p` indices of an `m`-point run equal a `p`-point run on the same cloud.
/// Distance ties go to the lowest index, so the result is deterministic.
pub fn farthest_point_sample(cloud: &PointCloud, m: usize) -> Result<Vec<usize>> {
    let n = cloud.len();
    if m == 0 || m > n {
        return Err(Error::invalid(format!(
            "farthest_point_sample: m={m} out of range 1..={n}"
        )));
    }
    let xyz = cloud.xyz();
    let mut selected = Vec::with_capacity(m);
    let mut min_dist = vec![f64::INFINITY; n];
    let mut current = 0usize;
    selected.push(current);
    for _ in 1..m {
        let p = [xyz[[current, 0]], xyz[[current, 1]], xyz[[current, 2]]];
        let mut best = 0usize;
        let mut best_d = -1.0;
        for i in 0..n {
            let dx = xyz[[i, 0]] - p[0];
            let dy = xyz[[i, 1]] - p[1];
            let dz = xyz[[i, 2]] - p[2];
            let d = dx * dx + dy * dy + dz * dz;
            if d < min_dist[i] {
                min_dist[i] = d;
            }
            if min_dist[i] > best_d {
                best_d = min_dist[i];
                best = i;
            }
        }
        current = best;
        selected.push(current);
    }
    Ok(selected)
}

/// Computes the `(center, scale)` pair used by [`normalize_cloud`]: the
/// bounding-box center and the largest absolute coordinate after centering.
/// A point `p` maps into the normalized frame as `(p - center) / scale`.
pub fn normalization_transform(cloud: &PointCloud) -> Result<([f64; 3], f64)> {
    let xyz = cloud.xyz();
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for row in xyz.rows() {
        for a in 0..3 {
            lo[a] = lo[a].min(row[a]);
            hi[a] = hi[a].max(row[a]);
        }
    }
    let center = [
        0.5 * (lo[0] + hi[0]),
        0.5 * (lo[1] + hi[1]),
        0.5 * (lo[2] + hi[2]),
    ];
    let mut scale = 0.0_f64;
    for row in xyz.rows() {
        for a in 0..3 {
            scale = scale.max((row[a] - center[a]).abs());
        }
    }
    if scale <= 0.0 {
        return Err(Error::invalid(
            "normalization_transform: cloud has zero spatial extent",
        ));
    }
    Ok((center, scale))
}

/// Centers the bounding box at the origin and scales positions uniformly so
/// the largest absolute coordinate is 1. Colors given in `[0, 1]` (no
/// negative channel anywhere) are remapped to `[-1, 1]`; colors with any
/// negative value are assumed to be already signed and left alone. Fails on
/// clouds with zero spatial extent.
pub fn normalize_cloud(cloud: &PointCloud) -> Result<PointCloud> {
    let (center, scale) = normalization_transform(cloud)?;
    let remap_colors = cloud.colors().iter().all(|&c| c >= 0.0);
    let mut out = cloud.points.clone();
    for mut row in out.rows_mut() {
        for a in 0..3 {
            row[a] = (row[a] - center[a]) / scale;
        }
        if remap_colors {
            for a in 3..6 {
                row[a] = row[a] * 2.0 - 1.0;
            }
        }
    }
    PointCloud::new(out)
}

/// Default threshold for [`flatness_filter`]: clouds whose thinnest direction
/// carries less than 2% of the normalized coordinate range are rejected.
pub const DEFAULT_FLATNESS_THRESHOLD: f64 = 0.02;

/// True when the cloud is not degenerate-flat: the smallest singular value of
/// the centered position matrix, scaled by `1/sqrt(K)`, is at least
/// `threshold`.
pub fn flatness_filter(cloud: &PointCloud, threshold: f64) -> Result<bool> {
    let xyz = cloud.xyz();
    let k = cloud.len() as f64;
    let mean = [
        xyz.column(0).sum() / k,
        xyz.column(1).sum() / k,
        xyz.column(2).sum() / k,
    ];
    let mut centered = xyz.to_owned();
    for mut row in centered.rows_mut() {
        for a in 0..3 {
            row[a] -= mean[a];
        }
    }
    let sv = singular_values_nx3(&centered.view())?;
    Ok(sv[2] / k.sqrt() >= threshold)
}

/// Orthographic camera with an orthonormal basis. Rays travel along
/// `forward`; the image plane is spanned by `right` (u axis, toward +x of the
/// image) and `up` (v axis, toward the top row).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub position: [f64; 3],
    pub forward: [f64; 3],
    pub right: [f64; 3],
    pub up: [f64; 3],
    /// Half the world-space width (and height) captured by the image.
    pub half_extent: f64,
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

fn scaled(a: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

impl Camera {
    /// Builds a camera at `position` looking at `target`. `up_hint` must not
    /// be parallel to the view direction.
    pub fn looking_at(
        position: [f64; 3],
        target: [f64; 3],
        up_hint: [f64; 3],
        half_extent: f64,
    ) -> Result<Camera> {
        if half_extent <= 0.0 {
            return Err(Error::invalid("camera half_extent must be positive"));
        }
        let dir = [
            target[0] - position[0],
            target[1] - position[1],
            target[2] - position[2],
        ];
        let n = norm(dir);
        if n < 1e-12 {
            return Err(Error::invalid("camera position equals target"));
        }
        let forward = scaled(dir, 1.0 / n);
        let r = cross(forward, up_hint);
        let rn = norm(r);
        if rn < 1e-9 {
            return Err(Error::invalid("camera up_hint parallel to view direction"));
        }
        let right = scaled(r, 1.0 / rn);
        let up = cross(right, forward);
        Ok(Camera {
            position,
            forward,
            right,
            up,
            half_extent,
        })
    }

    /// Plane coordinates `(u, v)` in world units relative to the camera
    /// center, plus depth along `forward`.
    pub fn project(&self, p: [f64; 3]) -> (f64, f64, f64) {
        let rel = [
            p[0] - self.position[0],
            p[1] - self.position[1],
            p[2] - self.position[2],
        ];
        (dot(rel, self.right), dot(rel, self.up), dot(rel, self.forward))
    }

    /// Inverse of [`Camera::project`].
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> [f64; 3] {
        [
            self.position[0] + u * self.right[0] + v * self.up[0] + depth * self.forward[0],
            self.position[1] + u * self.right[1] + v * self.up[1] + depth * self.forward[1],
            self.position[2] + u * self.right[2] + v * self.up[2] + depth * self.forward[2],
        ]
    }
}

/// A rendered view: `(H, W, 5)` with channels red, green, blue in `[0, 1]`,
/// coverage alpha in `{0, 1}`, and depth along the camera forward axis
/// ([`BACKGROUND_DEPTH`] where uncovered).
#[derive(Debug, Clone, PartialEq)]
pub struct ViewImage {
    pub pixels: Array3<f32>,
}

impl ViewImage {
    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }
    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }
}

/// Renders a cloud with signed colors into an RGBAD image by z-buffered point
/// splatting. Each point covers its pixel plus the four edge neighbors; the
/// smallest depth wins and depth ties keep the lowest point index. Points
/// behind the camera plane (depth <= 0) are skipped.
pub fn render_view(cloud: &PointCloud, camera: &Camera, resolution: usize) -> Result<ViewImage> {
    if resolution == 0 {
        return Err(Error::invalid("render_view: resolution must be positive"));
    }
    let w = resolution;
    let h = resolution;
    let mut pixels = Array3::<f32>::zeros((h, w, 5));
    // Depth buffer plus the index that wrote it, for deterministic ties.
    let mut zbuf = vec![f64::INFINITY; w * h];
    let mut owner = vec![usize::MAX; w * h];
    let colors = cloud.colors();
    for (idx, row) in cloud.xyz().rows().into_iter().enumerate() {
        let (u, v, depth) = camera.project([row[0], row[1], row[2]]);
        if depth <= 0.0 {
            continue;
        }
        // Map u in [-half, half] to pixel columns; v points up while row 0
        // is the top of the image.
        let fx = (u / camera.half_extent + 1.0) * 0.5 * w as f64 - 0.5;
        let fy = (1.0 - (v / camera.half_extent + 1.0) * 0.5) * h as f64 - 0.5;
        let cx = fx.round() as i64;
        let cy = fy.round() as i64;
        for (dx, dy) in [(0i64, 0i64), (-1, 0), (1, 0), (0, -1), (0, 1)] {
            let px = cx + dx;
            let py = cy + dy;
            if px < 0 || py < 0 || px >= w as i64 || py >= h as i64 {
                continue;
            }
            let pi = py as usize * w + px as usize;
            let closer = depth < zbuf[pi] || (depth == zbuf[pi] && idx < owner[pi]);
            if closer {
                zbuf[pi] = depth;
                owner[pi] = idx;
                let (py, px) = (py as usize, px as usize);
                for c in 0..3 {
                    pixels[[py, px, c]] = ((colors[[idx, c]] + 1.0) * 0.5) as f32;
                }
                pixels[[py, px, 3]] = 1.0;
                pixels[[py, px, 4]] = depth as f32;
            }
        }
    }
    Ok(ViewImage { pixels })
}

/// Back-projects every covered pixel of an RGBAD image into a point with a
/// signed color. Pixel centers map to plane coordinates; stored depth places
/// the point along the ray. Fails if no pixel is covered.
pub fn cloud_from_rgbad(image: &ViewImage, camera: &Camera) -> Result<PointCloud> {
    let h = image.height();
    let w = image.width();
    let mut rows: Vec<[f64; 6]> = Vec::new();
    for py in 0..h {
        for px in 0..w {
            if image.pixels[[py, px, 3]] < 0.5 {
                continue;
            }
            let u = ((px as f64 + 0.5) / w as f64 * 2.0 - 1.0) * camera.half_extent;
            let v = (1.0 - (py as f64 + 0.5) / h as f64 * 2.0) * camera.half_extent;
            let depth = image.pixels[[py, px, 4]] as f64;
            let p = camera.unproject(u, v, depth);
            rows.push([
                p[0],
                p[1],
                p[2],
                image.pixels[[py, px, 0]] as f64 * 2.0 - 1.0,
                image.pixels[[py, px, 1]] as f64 * 2.0 - 1.0,
                image.pixels[[py, px, 2]] as f64 * 2.0 - 1.0,
            ]);
        }
    }
    if rows.is_empty() {
        return Err(Error::EmptyCloud("cloud_from_rgbad: no covered pixels".into()));
    }
    let mut points = Array2::zeros((rows.len(), POINT_CHANNELS));
    for (i, r) in rows.iter().enumerate() {
        for c in 0..POINT_CHANNELS {
            points[[i, c]] = r[c];
        }
    }
    PointCloud::new(points)
}

/// Writes an ASCII PLY file with float positions and uchar colors. Signed
/// colors are mapped from `[-1, 1]` to 0..=255. Positions are written as
/// `f32` shortest round-trip decimals, so reading the file back reproduces
/// the `f32` values bit-exactly.
pub fn write_ply(cloud: &PointCloud, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path, e);
    writeln!(out, "ply").map_err(io_err)?;
    writeln!(out, "format ascii 1.0").map_err(io_err)?;
    writeln!(out, "element vertex {}", cloud.len()).map_err(io_err)?;
    for axis in ["x", "y", "z"] {
        writeln!(out, "property float {axis}").map_err(io_err)?;
    }
    for ch in ["red", "green", "blue"] {
        writeln!(out, "property uchar {ch}").map_err(io_err)?;
    }
    writeln!(out, "end_header").map_err(io_err)?;
    for row in cloud.points.rows() {
        let x = row[0] as f32;
        let y = row[1] as f32;
        let z = row[2] as f32;
        let to_u8 = |c: f64| -> u8 { (((c + 1.0) * 0.5).clamp(0.0, 1.0) * 255.0).round() as u8 };
        writeln!(
            out,
            "{x} {y} {z} {} {} {}",
            to_u8(row[3]),
            to_u8(row[4]),
            to_u8(row[5])
        )
        .map_err(io_err)?;
    }
    out.flush().map_err(io_err)?;
    Ok(())
}

/// Reads an ASCII PLY file written by [`write_ply`] (or an equivalent layout:
/// xyz floats followed by rgb uchars). Colors come back in `[-1, 1]`.
pub fn read_ply(path: &Path) -> Result<PointCloud> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines().enumerate();
    let parse_err = |line: usize, detail: String| Error::Parse {
        path: path.to_path_buf(),
        location: format!("line {}", line + 1),
        detail,
    };
    let mut vertex_count: Option<usize> = None;
    let mut header_done = 0usize;
    let mut properties: Vec<String> = Vec::new();
    for (ln, line) in lines.by_ref() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim();
        if ln == 0 && trimmed != "ply" {
            return Err(parse_err(ln, "missing ply magic".into()));
        }
        if trimmed.starts_with("element vertex ") {
            let n = trimmed["element vertex ".len()..]
                .trim()
                .parse::<usize>()
                .map_err(|e| parse_err(ln, format!("bad vertex count: {e}")))?;
            vertex_count = Some(n);
        } else if let Some(rest) = trimmed.strip_prefix("property ") {
            let mut parts = rest.split_whitespace();
            let _ty = parts.next();
            if let Some(name) = parts.next() {
                properties.push(name.to_string());
            }
        } else if trimmed == "end_header" {
            header_done = ln + 1;
            break;
        }
    }
    let n = vertex_count.ok_or_else(|| parse_err(header_done, "no element vertex".into()))?;
    if n == 0 {
        return Err(Error::EmptyCloud(format!("read_ply({})", path.display())));
    }
    let expected = ["x", "y", "z", "red", "green", "blue"];
    if properties != expected {
        return Err(parse_err(
            header_done,
            format!("unsupported property layout {properties:?}"),
        ));
    }
    let mut points = Array2::zeros((n, POINT_CHANNELS));
    let mut filled = 0usize;
    for (ln, line) in lines {
        if filled == n {
            break;
        }
        let line = line.map_err(|e| Error::io(path, e))?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 6 {
            return Err(parse_err(ln, format!("expected 6 fields, got {}", fields.len())));
        }
        for c in 0..3 {
            let v = fields[c]
                .parse::<f32>()
                .map_err(|e| parse_err(ln, format!("bad float: {e}")))?;
            points[[filled, c]] = v as f64;
        }
        for c in 3..6 {
            let v = fields[c]
                .parse::<u16>()
                .ok()
                .filter(|&v| v <= 255)
                .ok_or_else(|| parse_err(ln, "bad uchar color".into()))?;
            points[[filled, c]] = v as f64 / 255.0 * 2.0 - 1.0;
        }
        filled += 1;
    }
    if filled != n {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            location: "body".into(),
            detail: format!("expected {n} vertices, found {filled}"),
        });
    }
    PointCloud::new(points)
}
