//! Coordinate grids, synthetic desk-scale datasets with closed-form ground
//! truth, and dependency-free image/voxel/pose file I/O.
//!
//! Conventions: pixel/voxel coordinates are cell centers of the unit
//! square/cube (a 2x2 grid has centers {0.25, 0.75}^2); sphere coordinates
//! are unit-norm Cartesian points from (lat, lon) pairs.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{s, Array2};
use rand::Rng;

use crate::error::{FunctaError, Result};
use crate::render::{rays_from_pose, render_rays, CameraPose, RenderConfig, View};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Geometry {
    Square,
    Cube,
    Sphere,
}

#[derive(Clone)]
pub struct CoordGrid {
    pub coords: Array2<f64>,
    pub geometry: Geometry,
    pub resolution: Vec<usize>,
}

/// Cell centers of the unit square, row-major over (row, col); coordinates
/// are (x, y) with x along columns.
pub fn grid_2d(h: usize, w: usize) -> CoordGrid {
    assert!(h >= 1 && w >= 1);
    let coords = Array2::from_shape_fn((h * w, 2), |(k, c)| {
        let (j, i) = (k / w, k % w);
        match c {
            0 => (i as f64 + 0.5) / w as f64,
            _ => (j as f64 + 0.5) / h as f64,
        }
    });
    CoordGrid {
        coords,
        geometry: Geometry::Square,
        resolution: vec![h, w],
    }
}

/// Cell centers of the unit cube, row-major over (i, j, k).
pub fn grid_3d(r: usize) -> CoordGrid {
    assert!(r >= 1);
    let coords = Array2::from_shape_fn((r * r * r, 3), |(n, c)| {
        let i = n / (r * r);
        let j = (n / r) % r;
        let k = n % r;
        let idx = [i, j, k][c];
        (idx as f64 + 0.5) / r as f64
    });
    CoordGrid {
        coords,
        geometry: Geometry::Cube,
        resolution: vec![r, r, r],
    }
}

/// Unit-sphere Cartesian coordinates for an equally spaced lat/lon grid:
/// latitudes from pi/2 to -pi/2 (n_lat values), longitudes 0..2pi(n-1)/n.
pub fn sphere_coords(n_lat: usize, n_lon: usize) -> CoordGrid {
    assert!(n_lat >= 2 && n_lon >= 1);
    let coords = Array2::from_shape_fn((n_lat * n_lon, 3), |(k, c)| {
        let (li, lo) = (k / n_lon, k % n_lon);
        let lat = std::f64::consts::FRAC_PI_2
            - std::f64::consts::PI * li as f64 / (n_lat - 1) as f64;
        let lon = 2.0 * std::f64::consts::PI * lo as f64 / n_lon as f64;
        match c {
            0 => lat.cos() * lon.cos(),
            1 => lat.cos() * lon.sin(),
            _ => lat.sin(),
        }
    });
    CoordGrid {
        coords,
        geometry: Geometry::Sphere,
        resolution: vec![n_lat, n_lon],
    }
}

/// One gridded datapoint: coordinates, [0,1] targets and an optional label.
#[derive(Clone)]
pub struct GridItem {
    pub targets: Array2<f64>,
    pub label: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SyntheticKind {
    /// Grayscale Gaussian-blob images; label is the quadrant of the blob center.
    BlobImages,
    /// Binary ellipsoid occupancy voxels with per-axis rescale augmentation.
    EllipsoidVoxels,
    /// Smooth low-frequency fields on the sphere.
    SphereFields,
}

#[derive(Clone, Copy, Debug)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub count: usize,
    pub resolution: usize,
    pub seed: u64,
}

/// Deterministic generation: item `index` depends only on (spec, index).
pub fn make_item(spec: &SyntheticSpec, index: usize) -> GridItem {
    let mut rng = rng::seeded(spec.seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(index as u64 + 1)));
    match spec.kind {
        SyntheticKind::BlobImages => {
            let r = spec.resolution;
            let cx = rng.random_range(0.2..0.8);
            let cy = rng.random_range(0.2..0.8);
            let sigma = rng.random_range(0.05..0.16);
            let amp = rng.random_range(0.6..1.0);
            let grid = grid_2d(r, r);
            let targets = Array2::from_shape_fn((r * r, 1), |(k, _)| {
                let x = grid.coords[(k, 0)];
                let y = grid.coords[(k, 1)];
                let d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
                amp * (-d2 / (2.0 * sigma * sigma)).exp()
            });
            let label = match (cx < 0.5, cy < 0.5) {
                (true, true) => 0,
                (false, true) => 1,
                (true, false) => 2,
                (false, false) => 3,
            };
            GridItem {
                targets,
                label: Some(label),
            }
        }
        SyntheticKind::EllipsoidVoxels => {
            let r = spec.resolution;
            let cx = rng.random_range(0.4..0.6);
            let cy = rng.random_range(0.4..0.6);
            let cz = rng.random_range(0.4..0.6);
            let base = rng.random_range(0.18..0.30);
            // per-axis rescale augmentation
            let sx: f64 = rng.random_range(0.75..1.25);
            let sy: f64 = rng.random_range(0.75..1.25);
            let sz: f64 = rng.random_range(0.75..1.25);
            let grid = grid_3d(r);
            let targets = Array2::from_shape_fn((r * r * r, 1), |(k, _)| {
                let x = (grid.coords[(k, 0)] - cx) / (base * sx);
                let y = (grid.coords[(k, 1)] - cy) / (base * sy);
                let z = (grid.coords[(k, 2)] - cz) / (base * sz);
                if x * x + y * y + z * z <= 1.0 {
                    1.0
                } else {
                    0.0
                }
            });
            GridItem {
                targets,
                label: None,
            }
        }
        SyntheticKind::SphereFields => {
            let n_lat = spec.resolution;
            let n_lon = 2 * spec.resolution;
            let terms: Vec<(f64, f64, f64)> = (0..3)
                .map(|_| {
                    (
                        rng.random_range(0.2..1.0),
                        rng.random_range(1.0..3.0f64).round(),
                        rng.random_range(0.0..std::f64::consts::TAU),
                    )
                })
                .collect();
            let targets = Array2::from_shape_fn((n_lat * n_lon, 1), |(k, _)| {
                let (li, lo) = (k / n_lon, k % n_lon);
                let lat = std::f64::consts::FRAC_PI_2
                    - std::f64::consts::PI * li as f64 / (n_lat - 1) as f64;
                let lon = 2.0 * std::f64::consts::PI * lo as f64 / n_lon as f64;
                let mut v = 0.0;
                for (a, k_, b) in &terms {
                    v += a * (k_ * lon + b).sin() * (k_ * lat).cos();
                }
                0.5 + 0.5 * (v / 3.0)
            });
            GridItem {
                targets,
                label: None,
            }
        }
    }
}

pub fn make_dataset(spec: &SyntheticSpec) -> Vec<GridItem> {
    (0..spec.count).map(|i| make_item(spec, i)).collect()
}

pub fn coords_for(spec: &SyntheticSpec) -> CoordGrid {
    match spec.kind {
        SyntheticKind::BlobImages => grid_2d(spec.resolution, spec.resolution),
        SyntheticKind::EllipsoidVoxels => grid_3d(spec.resolution),
        SyntheticKind::SphereFields => sphere_coords(spec.resolution, 2 * spec.resolution),
    }
}

/// Analytic colored-sphere scene: constant density and RGB inside the sphere.
/// Raw network-space density is `density - 0.1` so the renderer's
/// elu(x)+0.1 processing recovers `density` exactly (closed-form oracle).
#[derive(Clone, Copy, Debug)]
pub struct SphereScene {
    pub center: [f64; 3],
    pub radius: f64,
    pub rgb: [f64; 3],
    pub density: f64,
}

impl SphereScene {
    pub fn field(&self, pts: &Array2<f64>) -> Result<Array2<f64>> {
        let mut raw = Array2::zeros((pts.nrows(), 4));
        for (i, row) in pts.rows().into_iter().enumerate() {
            let d2: f64 = (0..3).map(|c| (row[c] - self.center[c]).powi(2)).sum();
            if d2 <= self.radius * self.radius {
                for c in 0..3 {
                    raw[(i, c)] = self.rgb[c];
                }
                raw[(i, 3)] = self.density - 0.1;
            } else {
                raw[(i, 3)] = -30.0; // elu(-30)+0.1 ~= 0 density
            }
        }
        Ok(raw)
    }
}

/// A posed multi-view scene datapoint with ground-truth views rendered from
/// the analytic field.
#[derive(Clone)]
pub struct SceneItem {
    pub scene: SphereScene,
    pub views: Vec<View>,
    pub config: RenderConfig,
}

/// Camera on a circle of radius `dist` in the y=height plane, looking at the
/// origin.
pub fn look_at_origin_pose(angle: f64, dist: f64, height: f64, focal: f64) -> CameraPose {
    let eye = [dist * angle.cos(), dist * angle.sin(), height];
    // forward = normalize(eye - origin): camera -z axis points at the origin
    let norm = (eye.iter().map(|v| v * v).sum::<f64>()).sqrt();
    let zc = [eye[0] / norm, eye[1] / norm, eye[2] / norm];
    let up = [0.0, 0.0, 1.0];
    // xc = up x zc, normalized
    let mut xc = [
        up[1] * zc[2] - up[2] * zc[1],
        up[2] * zc[0] - up[0] * zc[2],
        up[0] * zc[1] - up[1] * zc[0],
    ];
    let xn = (xc.iter().map(|v| v * v).sum::<f64>()).sqrt();
    for v in &mut xc {
        *v /= xn;
    }
    let yc = [
        zc[1] * xc[2] - zc[2] * xc[1],
        zc[2] * xc[0] - zc[0] * xc[2],
        zc[0] * xc[1] - zc[1] * xc[0],
    ];
    let mut c2w = Array2::eye(4);
    for r in 0..3 {
        c2w[(r, 0)] = xc[r];
        c2w[(r, 1)] = yc[r];
        c2w[(r, 2)] = zc[r];
        c2w[(r, 3)] = eye[r];
    }
    CameraPose::new(c2w, focal).unwrap()
}

/// Deterministic sphere-scene datapoint with `n_views` ground-truth views.
pub fn make_scene(seed: u64, index: usize, n_views: usize, config: &RenderConfig) -> Result<SceneItem> {
    let mut rng = rng::seeded(seed ^ (0xd1b5_4a32_d192_ed03u64.wrapping_mul(index as u64 + 1)));
    let scene = SphereScene {
        center: [
            rng.random_range(-0.15..0.15),
            rng.random_range(-0.15..0.15),
            rng.random_range(-0.15..0.15),
        ],
        radius: rng.random_range(0.2..0.35),
        rgb: [
            rng.random_range(0.2..1.0),
            rng.random_range(0.2..1.0),
            rng.random_range(0.2..1.0),
        ],
        density: rng.random_range(4.0..9.0),
    };
    let dist = 0.5 * (config.near + config.far);
    let focal = config.width as f64 * 0.9;
    let mut views = Vec::with_capacity(n_views);
    for v in 0..n_views {
        let angle = std::f64::consts::TAU * v as f64 / n_views as f64;
        let pose = look_at_origin_pose(angle, dist, 0.3 * ((v % 3) as f64 - 1.0), focal);
        let rays = rays_from_pose(&pose, config)?;
        let image = render_rays(|p| scene.field(p), &rays, config.white_background)?;
        views.push(View { pose, image });
    }
    Ok(SceneItem {
        scene,
        views,
        config: *config,
    })
}

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

fn read_pnm_header(data: &[u8], magic: &str) -> Result<(usize, usize, usize, usize)> {
    // returns (width, height, maxval, payload offset)
    let mut pos = 0usize;
    let mut fields: Vec<usize> = Vec::new();
    if data.len() < 2 || &data[0..2] != magic.as_bytes() {
        return Err(FunctaError::Format(format!("bad magic, expected {magic}")));
    }
    pos += 2;
    while fields.len() < 3 {
        while pos < data.len() && (data[pos].is_ascii_whitespace()) {
            pos += 1;
        }
        if pos < data.len() && data[pos] == b'#' {
            while pos < data.len() && data[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < data.len() && data[pos].is_ascii_digit() {
            pos += 1;
        }
        if pos == start {
            return Err(FunctaError::Format("malformed header".into()));
        }
        let v: usize = std::str::from_utf8(&data[start..pos])
            .unwrap()
            .parse()
            .map_err(|e| FunctaError::Format(format!("header number: {e}")))?;
        fields.push(v);
    }
    if pos >= data.len() || !data[pos].is_ascii_whitespace() {
        return Err(FunctaError::Format("missing header terminator".into()));
    }
    pos += 1;
    Ok((fields[0], fields[1], fields[2], pos))
}

/// Write a binary PGM (P5); values clamped to [0,1], 8-bit quantized.
pub fn save_pgm(path: &Path, h: usize, w: usize, data: &Array2<f64>) -> Result<()> {
    if data.dim() != (h * w, 1) {
        return Err(FunctaError::Shape(format!(
            "pgm data {:?}, expected ({}, 1)",
            data.dim(),
            h * w
        )));
    }
    let mut f = std::fs::File::create(path)?;
    write!(f, "P5\n{w} {h}\n255\n")?;
    let bytes: Vec<u8> = data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    f.write_all(&bytes)?;
    Ok(())
}

/// Read a binary PGM (P5) into (h*w, 1) values in [0, 1].
pub fn load_pgm(path: &Path) -> Result<(usize, usize, Array2<f64>)> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let (w, h, maxval, off) = read_pnm_header(&buf, "P5")?;
    if buf.len() < off + w * h {
        return Err(FunctaError::Format("truncated pgm payload".into()));
    }
    let data = Array2::from_shape_fn((h * w, 1), |(k, _)| buf[off + k] as f64 / maxval as f64);
    Ok((h, w, data))
}

/// Write a binary PPM (P6) from (h*w, 3) RGB in [0,1].
pub fn save_ppm(path: &Path, h: usize, w: usize, data: &Array2<f64>) -> Result<()> {
    if data.dim() != (h * w, 3) {
        return Err(FunctaError::Shape(format!(
            "ppm data {:?}, expected ({}, 3)",
            data.dim(),
            h * w
        )));
    }
    let mut f = std::fs::File::create(path)?;
    write!(f, "P6\n{w} {h}\n255\n")?;
    let mut bytes = Vec::with_capacity(h * w * 3);
    for row in data.rows() {
        for c in 0..3 {
            bytes.push((row[c].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_ppm(path: &Path) -> Result<(usize, usize, Array2<f64>)> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let (w, h, maxval, off) = read_pnm_header(&buf, "P6")?;
    if buf.len() < off + w * h * 3 {
        return Err(FunctaError::Format("truncated ppm payload".into()));
    }
    let data = Array2::from_shape_fn((h * w, 3), |(k, c)| {
        buf[off + 3 * k + c] as f64 / maxval as f64
    });
    Ok((h, w, data))
}

/// Raw voxel grid: text header "VOX1\n<r0> <r1> <r2>\n" then one byte per
/// voxel (0..255 mapping to [0,1]), row-major over (i, j, k).
pub fn save_voxels(path: &Path, res: [usize; 3], data: &Array2<f64>) -> Result<()> {
    let n = res[0] * res[1] * res[2];
    if data.dim() != (n, 1) {
        return Err(FunctaError::Shape(format!(
            "voxel data {:?}, expected ({n}, 1)",
            data.dim()
        )));
    }
    let mut f = std::fs::File::create(path)?;
    write!(f, "VOX1\n{} {} {}\n", res[0], res[1], res[2])?;
    let bytes: Vec<u8> = data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_voxels(path: &Path) -> Result<([usize; 3], Array2<f64>)> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let text = String::from_utf8_lossy(&buf[..buf.len().min(64)]);
    let mut lines = text.lines();
    if lines.next() != Some("VOX1") {
        return Err(FunctaError::Format("bad voxel magic".into()));
    }
    let dims_line = lines
        .next()
        .ok_or_else(|| FunctaError::Format("missing voxel dims".into()))?;
    let dims: Vec<usize> = dims_line
        .split_whitespace()
        .map(|t| t.parse().map_err(|e| FunctaError::Format(format!("voxel dims: {e}"))))
        .collect::<Result<_>>()?;
    if dims.len() != 3 {
        return Err(FunctaError::Format("expected 3 voxel dims".into()));
    }
    let off = 5 + dims_line.len() + 1;
    let n = dims[0] * dims[1] * dims[2];
    if buf.len() < off + n {
        return Err(FunctaError::Format("truncated voxel payload".into()));
    }
    let data = Array2::from_shape_fn((n, 1), |(k, _)| buf[off + k] as f64 / 255.0);
    Ok(([dims[0], dims[1], dims[2]], data))
}

/// Pose file: four lines of four floats (camera-to-world), then a line with
/// the focal length.
pub fn save_pose(path: &Path, pose: &CameraPose) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    for r in 0..4 {
        let row: Vec<String> = (0..4).map(|c| format!("{:?}", pose.c2w[(r, c)])).collect();
        writeln!(f, "{}", row.join(" "))?;
    }
    writeln!(f, "{:?}", pose.focal)?;
    Ok(())
}

pub fn load_pose(path: &Path) -> Result<CameraPose> {
    let text = std::fs::read_to_string(path)?;
    let mut values = Vec::new();
    for tok in text.split_whitespace() {
        values.push(
            tok.parse::<f64>()
                .map_err(|e| FunctaError::Format(format!("pose value: {e}")))?,
        );
    }
    if values.len() != 17 {
        return Err(FunctaError::Format(format!(
            "pose file has {} values, expected 17",
            values.len()
        )));
    }
    let c2w = Array2::from_shape_fn((4, 4), |(r, c)| values[4 * r + c]);
    CameraPose::new(c2w, values[16])
}

/// Run-length or stencil observation mask over a row-major grid. Text format:
/// either "rle <len>: <start>:<count> ..." pairs or a PGM stencil where
/// value >= 0.5 marks observed.
pub fn load_mask(path: &Path, expect_len: usize) -> Result<Vec<bool>> {
    if path.extension().is_some_and(|e| e == "pgm") {
        let (_, _, img) = load_pgm(path)?;
        if img.nrows() != expect_len {
            return Err(FunctaError::Shape(format!(
                "mask stencil has {} pixels, expected {expect_len}",
                img.nrows()
            )));
        }
        return Ok(img.iter().map(|v| *v >= 0.5).collect());
    }
    let text = std::fs::read_to_string(path)?;
    let mut mask = vec![false; expect_len];
    for tok in text.split_whitespace() {
        let (a, b) = tok
            .split_once(':')
            .ok_or_else(|| FunctaError::Format("mask entries are start:count".into()))?;
        let start: usize = a.parse().map_err(|e| FunctaError::Format(format!("mask: {e}")))?;
        let count: usize = b.parse().map_err(|e| FunctaError::Format(format!("mask: {e}")))?;
        if start + count > expect_len {
            return Err(FunctaError::Format("mask range out of bounds".into()));
        }
        for m in &mut mask[start..start + count] {
            *m = true;
        }
    }
    Ok(mask)
}

pub fn save_mask(path: &Path, mask: &[bool]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    let mut i = 0;
    let mut spans = Vec::new();
    while i < mask.len() {
        if mask[i] {
            let start = i;
            while i < mask.len() && mask[i] {
                i += 1;
            }
            spans.push(format!("{start}:{}", i - start));
        } else {
            i += 1;
        }
    }
    writeln!(f, "{}", spans.join(" "))?;
    Ok(())
}

/// Reject targets outside [0,1] at ingestion.
pub fn validate_targets(targets: &Array2<f64>) -> Result<()> {
    if targets.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(FunctaError::Contract(
            "targets must lie in [0,1]; normalize before ingestion".into(),
        ));
    }
    Ok(())
}

/// Reshape a flat (h*w, 1) grayscale image to (h*w, 3) for PPM output.
pub fn gray_to_rgb(data: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((data.nrows(), 3));
    for c in 0..3 {
        out.slice_mut(s![.., c]).assign(&data.slice(s![.., 0]));
    }
    out
}
