//! Point-map readout: renders the labeled cloud into RGB, instance and
//! depth layers from a camera.
//!
//! Cameras look along their local −z with +y up. Pixel `(col, row)` covers
//! `[col, col+1) × [row, row+1)` in image coordinates, rows growing downward.

use crate::context::{InstanceId, LabeledPointCloud};
use crate::exec::Execution;
use crate::Vec3;
use nalgebra::{Matrix3, Rotation3};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const DEFAULT_RESOLUTION: usize = 512;
pub const DEFAULT_SPLAT_RADIUS: usize = 1;
pub const MIN_RESOLUTION: usize = 16;
/// Relative margin around the framed bounding box.
pub const FRAME_MARGIN: f64 = 1.1;

#[derive(Debug, Error)]
pub enum ProjectionError {
    #[error("EmptyCloud: nothing to render")]
    EmptyCloud,
    #[error("InvalidCamera: {0}")]
    InvalidCamera(String),
    #[error("IoError: {0}")]
    Io(#[from] std::io::Error),
    #[error("IoError: {0}")]
    Format(String),
    #[error("LabelOverflow: label {0} does not fit a 16-bit image")]
    LabelOverflow(InstanceId),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Lens {
    Perspective { fov_y: f64 },
    Orthographic { half_height: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    /// Camera-to-world rotation; columns are the camera x, y, z axes.
    pub rotation: Rotation3<f64>,
    pub position: Vec3,
    pub lens: Lens,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(rotation: Rotation3<f64>, position: Vec3, lens: Lens, width: usize, height: usize) -> Result<Self, ProjectionError> {
        let cam = Self { rotation, position, lens, width, height };
        cam.check()?;
        Ok(cam)
    }

    pub fn check(&self) -> Result<(), ProjectionError> {
        let bad = |m: String| Err(ProjectionError::InvalidCamera(m));
        match self.lens {
            Lens::Perspective { fov_y } if !(fov_y > 0.0 && fov_y < std::f64::consts::PI) => {
                return bad(format!("fov_y {fov_y} outside (0, pi)"))
            }
            Lens::Orthographic { half_height } if !(half_height > 0.0 && half_height.is_finite()) => {
                return bad(format!("half_height {half_height}"))
            }
            _ => {}
        }
        if self.width < MIN_RESOLUTION || self.height < MIN_RESOLUTION {
            return bad(format!("resolution {}x{} below {MIN_RESOLUTION}x{MIN_RESOLUTION}", self.width, self.height));
        }
        if !self.position.iter().all(|v| v.is_finite()) {
            return bad("position not finite".into());
        }
        Ok(())
    }

    /// World direction the camera looks along.
    pub fn forward(&self) -> Vec3 {
        -self.rotation.matrix().column(2).into_owned()
    }

    /// Continuous image coordinates and depth of `p`, or `None` when it is
    /// behind the camera or outside the image.
    pub fn project(&self, p: &Vec3) -> Option<(f64, f64, f64)> {
        let local = self.rotation.inverse() * (p - self.position);
        let depth = -local.z;
        if !(depth > 0.0) {
            return None;
        }
        let (w, h) = (self.width as f64, self.height as f64);
        let f = match self.lens {
            Lens::Perspective { fov_y } => (h / 2.0) / (fov_y / 2.0).tan() / depth,
            Lens::Orthographic { half_height } => (h / 2.0) / half_height,
        };
        let u = w / 2.0 + local.x * f;
        let v = h / 2.0 - local.y * f;
        if u >= 0.0 && u < w && v >= 0.0 && v < h {
            Some((u, v, depth))
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointMap {
    pub width: usize,
    pub height: usize,
    /// Row-major, channels in `[0, 1]`.
    pub rgb: Vec<[f64; 3]>,
    /// Row-major; 0 is empty or background.
    pub instance: Vec<InstanceId>,
    /// Row-major; `+∞` is empty.
    pub depth: Vec<f64>,
}

impl PointMap {
    pub fn empty(width: usize, height: usize) -> Self {
        let n = width * height;
        Self { width, height, rgb: vec![[0.0; 3]; n], instance: vec![0; n], depth: vec![f64::INFINITY; n] }
    }

    pub fn index(&self, col: usize, row: usize) -> usize {
        row * self.width + col
    }

    pub fn instance_at(&self, col: usize, row: usize) -> InstanceId {
        self.instance[self.index(col, row)]
    }

    pub fn depth_at(&self, col: usize, row: usize) -> f64 {
        self.depth[self.index(col, row)]
    }

    pub fn covered(&self) -> usize {
        self.depth.iter().filter(|d| d.is_finite()).count()
    }
}

/// Pixel offsets of a disc of integer radius.
fn disc(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                out.push((dx, dy));
            }
        }
    }
    out
}

pub fn render_pointmap(cloud: &LabeledPointCloud, camera: &Camera, splat_radius: usize) -> Result<PointMap, ProjectionError> {
    render_pointmap_with(cloud, camera, splat_radius, Execution::default())
}

/// Projects in parallel, then splats in point order so the nearest point
/// wins and equal depths keep the lower index.
pub fn render_pointmap_with(
    cloud: &LabeledPointCloud,
    camera: &Camera,
    splat_radius: usize,
    exec: Execution,
) -> Result<PointMap, ProjectionError> {
    if cloud.is_empty() {
        return Err(ProjectionError::EmptyCloud);
    }
    camera.check()?;
    let projected = exec.map(&cloud.points, |p| camera.project(&p.position));
    let mut map = PointMap::empty(camera.width, camera.height);
    let offsets = disc(splat_radius);
    let (w, h) = (camera.width as isize, camera.height as isize);
    for (point, hit) in cloud.points.iter().zip(projected) {
        let Some((u, v, depth)) = hit else { continue };
        let (col, row) = (u.floor() as isize, v.floor() as isize);
        for (dx, dy) in &offsets {
            let (c, r) = (col + dx, row + dy);
            if c < 0 || r < 0 || c >= w || r >= h {
                continue;
            }
            let k = map.index(c as usize, r as usize);
            if depth < map.depth[k] {
                map.depth[k] = depth;
                map.instance[k] = point.label;
                map.rgb[k] = point.color;
            }
        }
    }
    Ok(map)
}

/// Named canonical view directions.
pub const CANONICAL_VIEWS: [&str; 3] = ["top", "side_pos_x", "side_neg_x"];

/// Orthographic top-down (looking along −y) and side views (looking along
/// +x and −x) framing the cloud's bounding box. The top view keeps −z up in
/// the image; side views keep +y up.
pub fn canonical_cameras(cloud: &LabeledPointCloud) -> Result<Vec<Camera>, ProjectionError> {
    canonical_cameras_sized(cloud, DEFAULT_RESOLUTION, DEFAULT_RESOLUTION)
}

pub fn canonical_cameras_sized(cloud: &LabeledPointCloud, width: usize, height: usize) -> Result<Vec<Camera>, ProjectionError> {
    let aabb = cloud.aabb().ok_or(ProjectionError::EmptyCloud)?;
    let center = aabb.center();
    let ext = aabb.extent();
    let reach = ext.norm() + 1.0;
    let aspect = height as f64 / width as f64;
    let frames = [
        (Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 0.0, -1.0), Vec3::new(0.0, 1.0, 0.0), ext.x, ext.z),
        (Vec3::new(0.0, 0.0, 1.0), Vec3::new(0.0, 1.0, 0.0), Vec3::new(-1.0, 0.0, 0.0), ext.z, ext.y),
        (Vec3::new(0.0, 0.0, -1.0), Vec3::new(0.0, 1.0, 0.0), Vec3::new(1.0, 0.0, 0.0), ext.z, ext.y),
    ];
    frames
        .iter()
        .map(|(x, y, z, across, up)| {
            let rotation = Rotation3::from_matrix_unchecked(Matrix3::from_columns(&[*x, *y, *z]));
            let mut half_height = (up / 2.0).max(across / 2.0 * aspect) * FRAME_MARGIN;
            if !(half_height > 0.0) {
                half_height = 0.5;
            }
            Camera::new(rotation, center + z * reach, Lens::Orthographic { half_height }, width, height)
        })
        .collect()
}

/// Paths written by [`export_pointmap`] for `base`.
pub fn export_paths(base: &Path) -> [PathBuf; 4] {
    let with = |suffix: &str| {
        let mut s = base.as_os_str().to_owned();
        s.push(suffix);
        PathBuf::from(s)
    };
    [with("_rgb.png"), with("_instance.png"), with("_depth.f32"), with("_depth.txt")]
}

fn png_error(e: impl std::fmt::Display) -> ProjectionError {
    ProjectionError::Format(e.to_string())
}

fn write_png(path: &Path, width: usize, height: usize, color: png::ColorType, depth: png::BitDepth, data: &[u8]) -> Result<(), ProjectionError> {
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(depth);
    let mut writer = enc.write_header().map_err(png_error)?;
    writer.write_image_data(data).map_err(png_error)?;
    writer.finish().map_err(png_error)?;
    Ok(())
}

/// Writes `<base>_rgb.png` (8-bit RGB), `<base>_instance.png` (16-bit gray),
/// `<base>_depth.f32` (little-endian float32, row-major) and the
/// `<base>_depth.txt` sidecar holding `width height`.
pub fn export_pointmap(map: &PointMap, base: &Path) -> Result<Vec<PathBuf>, ProjectionError> {
    if let Some(&bad) = map.instance.iter().find(|&&l| l > u16::MAX as u32) {
        return Err(ProjectionError::LabelOverflow(bad));
    }
    let paths = export_paths(base);
    let rgb: Vec<u8> = map.rgb.iter().flat_map(|c| c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)).collect();
    write_png(&paths[0], map.width, map.height, png::ColorType::Rgb, png::BitDepth::Eight, &rgb)?;
    let inst: Vec<u8> = map.instance.iter().flat_map(|&l| (l as u16).to_be_bytes()).collect();
    write_png(&paths[1], map.width, map.height, png::ColorType::Grayscale, png::BitDepth::Sixteen, &inst)?;
    let mut depth = BufWriter::new(File::create(&paths[2])?);
    for d in &map.depth {
        depth.write_all(&(*d as f32).to_le_bytes())?;
    }
    depth.flush()?;
    std::fs::write(&paths[3], format!("{} {}\n", map.width, map.height))?;
    Ok(paths.to_vec())
}

/// Reads a 16-bit grayscale instance PNG back as `(width, height, labels)`.
pub fn read_instance_png(path: &Path) -> Result<(usize, usize, Vec<InstanceId>), ProjectionError> {
    let decoder = png::Decoder::new(std::io::BufReader::new(File::open(path)?));
    let mut reader = decoder.read_info().map_err(png_error)?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| png_error("image too large"))?];
    let info = reader.next_frame(&mut buf).map_err(png_error)?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Sixteen {
        return Err(png_error("expected 16-bit grayscale"));
    }
    let labels = buf[..info.buffer_size()].chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]]) as InstanceId).collect();
    Ok((info.width as usize, info.height as usize, labels))
}

/// Reads a raw depth layer using its sidecar.
pub fn read_depth(raw: &Path, sidecar: &Path) -> Result<(usize, usize, Vec<f32>), ProjectionError> {
    let header = std::fs::read_to_string(sidecar)?;
    let dims: Vec<usize> = header.split_whitespace().map(|t| t.parse().map_err(png_error)).collect::<Result<_, _>>()?;
    let [w, h] = dims[..] else { return Err(png_error("sidecar must hold `width height`")) };
    let bytes = std::fs::read(raw)?;
    if bytes.len() != w * h * 4 {
        return Err(png_error(format!("depth file has {} bytes, expected {}", bytes.len(), w * h * 4)));
    }
    Ok((w, h, bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect()))
}

/// Renders the canonical views and exports them as `<dir>/<view>_*`.
pub fn export_canonical_views(
    cloud: &LabeledPointCloud,
    dir: &Path,
    width: usize,
    height: usize,
    splat_radius: usize,
) -> Result<Vec<PathBuf>, ProjectionError> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for (name, cam) in CANONICAL_VIEWS.iter().zip(canonical_cameras_sized(cloud, width, height)?) {
        let map = render_pointmap(cloud, &cam, splat_radius)?;
        written.extend(export_pointmap(&map, &dir.join(name))?);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::LabeledPoint;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(points: &[(Vec3, InstanceId)]) -> LabeledPointCloud {
        LabeledPointCloud::new(points.iter().map(|(p, l)| LabeledPoint::new(*p, [0.2, 0.4, 0.6], *l)).collect())
    }

    fn looking_down_minus_z(lens: Lens) -> Camera {
        Camera::new(Rotation3::identity(), Vec3::zeros(), lens, 64, 64).unwrap()
    }

    #[test]
    fn on_axis_point() {
        for lens in [Lens::Perspective { fov_y: 1.0 }, Lens::Orthographic { half_height: 1.0 }] {
            let cam = looking_down_minus_z(lens);
            let map = render_pointmap(&cloud(&[(Vec3::new(0.0, 0.0, -2.0), 7)]), &cam, 1).unwrap();
            assert_eq!(map.instance_at(32, 32), 7);
            assert_eq!(map.depth_at(32, 32), 2.0);
            assert_eq!(map.covered(), 5);
        }
    }

    #[test]
    fn behind_camera_is_culled() {
        let cam = looking_down_minus_z(Lens::Perspective { fov_y: 1.0 });
        let map = render_pointmap(&cloud(&[(Vec3::new(0.0, 0.0, 2.0), 7)]), &cam, 1).unwrap();
        assert_eq!(map, PointMap::empty(64, 64));
    }

    #[test]
    fn nearest_wins_and_ties_keep_lower_index() {
        let cam = looking_down_minus_z(Lens::Perspective { fov_y: 1.0 });
        let map = render_pointmap(&cloud(&[(Vec3::new(0.0, 0.0, -2.0), 2), (Vec3::new(0.0, 0.0, -1.0), 1)]), &cam, 0).unwrap();
        assert_eq!(map.instance_at(32, 32), 1);
        let map = render_pointmap(&cloud(&[(Vec3::new(0.0, 0.0, -1.0), 4), (Vec3::new(0.0, 0.0, -1.0), 5)]), &cam, 0).unwrap();
        assert_eq!(map.instance_at(32, 32), 4);
    }

    #[test]
    fn rejects_bad_inputs() {
        let cam = looking_down_minus_z(Lens::Perspective { fov_y: 1.0 });
        assert!(matches!(render_pointmap(&LabeledPointCloud::default(), &cam, 1), Err(ProjectionError::EmptyCloud)));
        for lens in [Lens::Perspective { fov_y: 0.0 }, Lens::Perspective { fov_y: 4.0 }, Lens::Orthographic { half_height: -1.0 }] {
            assert!(Camera::new(Rotation3::identity(), Vec3::zeros(), lens, 64, 64).is_err());
        }
        assert!(Camera::new(Rotation3::identity(), Vec3::zeros(), Lens::Orthographic { half_height: 1.0 }, 8, 64).is_err());
    }

    #[test]
    fn canonical_framing() {
        let corners: Vec<(Vec3, InstanceId)> = (0..8)
            .map(|i| (Vec3::new((i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64), 1))
            .collect();
        let cams = canonical_cameras(&cloud(&corners)).unwrap();
        assert_eq!(cams.len(), 3);
        assert!((cams[0].forward() - Vec3::new(0.0, -1.0, 0.0)).norm() < 1e-12);
        assert!((cams[1].forward() - Vec3::new(1.0, 0.0, 0.0)).norm() < 1e-12);
        assert!((cams[2].forward() - Vec3::new(-1.0, 0.0, 0.0)).norm() < 1e-12);
        for c in &cams {
            let m = c.rotation.matrix();
            assert!((m.determinant() - 1.0).abs() < 1e-12);
        }

        let wide = cloud(&[(Vec3::zeros(), 1), (Vec3::new(2.0, 1.0, 1.0), 1)]);
        let Lens::Orthographic { half_height } = canonical_cameras(&wide).unwrap()[0].lens else { panic!() };
        assert!((half_height - 1.1).abs() < 1e-12);
    }

    #[test]
    fn canonical_views_contain_every_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let scale = Vec3::new(rng.random_range(0.1..10.0), rng.random_range(0.1..10.0), rng.random_range(0.1..10.0));
            let pts: Vec<(Vec3, InstanceId)> = (0..300)
                .map(|_| (Vec3::new(rng.random(), rng.random(), rng.random()).component_mul(&scale), 1))
                .collect();
            let c = cloud(&pts);
            for cam in canonical_cameras(&c).unwrap() {
                assert!(pts.iter().all(|(p, _)| cam.project(p).is_some()));
            }
        }
    }

    #[test]
    fn occlusion_and_label_fidelity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<(Vec3, InstanceId)> = (0..400)
            .map(|_| (Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-3.0..-1.0)), rng.random_range(1..5)))
            .collect();
        let c = cloud(&pts);
        let cam = Camera::new(Rotation3::identity(), Vec3::zeros(), Lens::Perspective { fov_y: 1.2 }, 32, 32).unwrap();
        let radius = 2;
        let map = render_pointmap(&c, &cam, radius).unwrap();
        let seq = render_pointmap_with(&c, &cam, radius, Execution::Sequential).unwrap();
        assert_eq!(map, seq);
        for row in 0..32 {
            for col in 0..32 {
                let mut best = f64::INFINITY;
                let mut labels = Vec::new();
                for (p, l) in &pts {
                    if let Some((u, v, d)) = cam.project(p) {
                        let (dc, dr) = (u.floor() as isize - col as isize, v.floor() as isize - row as isize);
                        if dc * dc + dr * dr <= (radius * radius) as isize {
                            best = best.min(d);
                            labels.push(*l);
                        }
                    }
                }
                assert_eq!(map.depth_at(col, row), best);
                let l = map.instance_at(col, row);
                assert!(l == 0 && labels.is_empty() || labels.contains(&l));
            }
        }
    }

    #[test]
    fn export_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut map = PointMap::empty(16, 16);
        for k in 0..256 {
            map.instance[k] = (k * 97 % 300) as u32;
            map.depth[k] = if k % 3 == 0 { f64::INFINITY } else { k as f64 * 0.5 };
            map.rgb[k] = [k as f64 / 255.0, 0.5, 1.0];
        }
        let files = export_pointmap(&map, &dir.path().join("view")).unwrap();
        assert_eq!(files.len(), 4);
        assert!(files.iter().all(|f| f.exists()));
        let (w, h, labels) = read_instance_png(&files[1]).unwrap();
        assert_eq!((w, h), (16, 16));
        assert_eq!(labels, map.instance);
        let (_, _, depth) = read_depth(&files[2], &files[3]).unwrap();
        assert!(depth.iter().zip(&map.depth).all(|(a, b)| *a as f64 == *b));
        assert!(matches!(export_pointmap(&map, Path::new("/nonexistent/dir/view")), Err(ProjectionError::Io(_))));
    }
}
