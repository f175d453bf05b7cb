//! Point-cloud data model, ASCII XYZ I/O and the pinhole camera.
//!
//! Cloud files hold one point per line, `X Y Z` or `X Y Z R G B`, separated by
//! whitespace. Lines starting with `#` are comments. Coordinates are written
//! with 6 decimals.
//!
//! Camera files hold 23 whitespace-separated numbers: the row-major 3x3
//! intrinsic matrix, the row-major 3x3 rotation, the camera center `T` in
//! world coordinates and the image size `width height`. The projection matrix
//! is `P = K [R | -R T]`. Image coordinates refer to pixel centers: pixel
//! `(i, j)` covers `[i - 0.5, i + 0.5) x [j - 0.5, j + 0.5)`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{Matrix3, Matrix3x4, Vector3, Vector4};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ClassLabel {
    #[default]
    Unlabeled,
    Ground,
    NonGround,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub rgb: Option<[u8; 3]>,
    pub class: ClassLabel,
}

impl Point3 {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Point3 { x, y, z, rgb: None, class: ClassLabel::Unlabeled }
    }

    pub fn with_rgb(mut self, rgb: [u8; 3]) -> Self {
        self.rgb = Some(rgb);
        self
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn xyz(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Source {
    Laser,
    DenseMatching,
    #[default]
    Synthetic,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3>,
    pub source: Source,
}

/// Axis-aligned xy extent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds2 {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl Bounds2 {
    pub fn width(&self) -> f64 {
        self.max_x - self.min_x
    }

    pub fn height(&self) -> f64 {
        self.max_y - self.min_y
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.min_x && x < self.max_x && y >= self.min_y && y < self.max_y
    }

    pub fn intersects(&self, other: &Bounds2) -> bool {
        self.min_x < other.max_x
            && other.min_x < self.max_x
            && self.min_y < other.max_y
            && other.min_y < self.max_y
    }

    pub fn expanded(&self, by: f64) -> Bounds2 {
        Bounds2 {
            min_x: self.min_x - by,
            min_y: self.min_y - by,
            max_x: self.max_x + by,
            max_y: self.max_y + by,
        }
    }
}

impl PointCloud {
    pub fn new(points: Vec<Point3>, source: Source) -> Self {
        PointCloud { points, source }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn bounds(&self) -> Option<Bounds2> {
        bounds_of(self.points.iter())
    }

    /// Points whose xy falls inside `b`, with their indices into this cloud.
    pub fn crop(&self, b: &Bounds2) -> (Vec<Point3>, Vec<usize>) {
        let mut pts = Vec::new();
        let mut idx = Vec::new();
        for (i, p) in self.points.iter().enumerate() {
            if b.contains(p.x, p.y) {
                pts.push(*p);
                idx.push(i);
            }
        }
        (pts, idx)
    }
}

pub(crate) fn bounds_of<'a>(points: impl Iterator<Item = &'a Point3>) -> Option<Bounds2> {
    let mut b: Option<Bounds2> = None;
    for p in points {
        b = Some(match b {
            None => Bounds2 { min_x: p.x, min_y: p.y, max_x: p.x, max_y: p.y },
            Some(b) => Bounds2 {
                min_x: b.min_x.min(p.x),
                min_y: b.min_y.min(p.y),
                max_x: b.max_x.max(p.x),
                max_y: b.max_y.max(p.y),
            },
        });
    }
    b
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudFormat {
    XyzAscii,
    XyzRgbAscii,
}

pub fn load_cloud(path: &Path, format: CloudFormat) -> Result<PointCloud> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let expected = match format {
        CloudFormat::XyzAscii => 3,
        CloudFormat::XyzRgbAscii => 6,
    };
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |msg: String| Error::Parse { path: path.to_path_buf(), line: i + 1, msg };
        let fields: Vec<&str> = line.split_whitespace().collect();
        // xyz files written with colors are still readable as plain xyz
        if fields.len() != expected && !(expected == 3 && fields.len() == 6) {
            return Err(parse_err(format!("expected {expected} fields, found {}", fields.len())));
        }
        let mut v = [0.0f64; 3];
        for (k, f) in fields.iter().take(3).enumerate() {
            v[k] = f.parse().map_err(|_| parse_err(format!("not a number: {f:?}")))?;
        }
        let mut p = Point3::new(v[0], v[1], v[2]);
        if !p.is_finite() {
            return Err(parse_err("non-finite coordinate".into()));
        }
        if expected == 6 {
            let mut rgb = [0u8; 3];
            for (k, f) in fields[3..6].iter().enumerate() {
                rgb[k] = f.parse().map_err(|_| parse_err(format!("not a color channel in [0,255]: {f:?}")))?;
            }
            p.rgb = Some(rgb);
        }
        points.push(p);
    }
    if points.is_empty() {
        return Err(Error::Empty(path.display().to_string()));
    }
    Ok(PointCloud::new(points, Source::Synthetic))
}

/// Writes the cloud; colors are written only for [`CloudFormat::XyzRgbAscii`]
/// (missing colors become `0 0 0`).
pub fn save_cloud(path: &Path, cloud: &PointCloud, format: CloudFormat) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_cloud(&mut w, cloud.points.iter(), format, |_| None).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Segment dump: xyz plus an integer segment id column.
pub fn save_labeled_cloud(path: &Path, points: &[Point3], ids: &[i64]) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_cloud(&mut w, points.iter(), CloudFormat::XyzAscii, |i| Some(ids[i]))
        .map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_cloud<'a, W: Write>(
    w: &mut W,
    points: impl Iterator<Item = &'a Point3>,
    format: CloudFormat,
    extra: impl Fn(usize) -> Option<i64>,
) -> std::io::Result<()> {
    for (i, p) in points.enumerate() {
        write!(w, "{:.6} {:.6} {:.6}", p.x, p.y, p.z)?;
        if format == CloudFormat::XyzRgbAscii {
            let [r, g, b] = p.rgb.unwrap_or([0, 0, 0]);
            write!(w, " {r} {g} {b}")?;
        }
        if let Some(id) = extra(i) {
            write!(w, " {id}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Pinhole camera, `P = K [R | -R T]` with `T` the camera center.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    k: Matrix3<f64>,
    r: Matrix3<f64>,
    t: Vector3<f64>,
    width: u32,
    height: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub x: f64,
    pub y: f64,
    pub depth: f64,
    pub in_frame: bool,
}

impl CameraModel {
    pub fn new(k: Matrix3<f64>, r: Matrix3<f64>, t: Vector3<f64>, width: u32, height: u32) -> Result<Self> {
        let ortho_err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if !(ortho_err < 1e-9) {
            return Err(Error::Camera(format!("rotation not orthonormal (|R'R - I| = {ortho_err:e})")));
        }
        if k[(1, 0)] != 0.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 {
            return Err(Error::Camera("intrinsic matrix is not upper-triangular".into()));
        }
        if !(k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0 && k[(2, 2)] > 0.0) {
            return Err(Error::Camera("intrinsic diagonal must be positive".into()));
        }
        if !t.iter().all(|v| v.is_finite()) {
            return Err(Error::Camera("non-finite camera center".into()));
        }
        Ok(CameraModel { k, r, t, width, height })
    }

    pub fn intrinsics(&self) -> &Matrix3<f64> {
        &self.k
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.r
    }

    pub fn center(&self) -> &Vector3<f64> {
        &self.t
    }

    pub fn image_size(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    /// The 3x4 projection matrix.
    pub fn projection_matrix(&self) -> Matrix3x4<f64> {
        let mut ext = Matrix3x4::zeros();
        ext.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.r);
        ext.set_column(3, &(-(self.r * self.t)));
        self.k * ext
    }

    pub fn project(&self, p: &Point3) -> Result<Projection> {
        let h = self.projection_matrix() * Vector4::new(p.x, p.y, p.z, 1.0);
        let depth = (self.r * (p.xyz() - self.t)).z;
        if !(depth > 0.0) || !(h.z > 0.0) {
            return Err(Error::BehindCamera { x: p.x, y: p.y, z: p.z, depth });
        }
        let x = h.x / h.z;
        let y = h.y / h.z;
        let in_frame = x >= -0.5 && x < self.width as f64 - 0.5 && y >= -0.5 && y < self.height as f64 - 0.5;
        Ok(Projection { x, y, depth, in_frame })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut nums = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.starts_with('#') {
                continue;
            }
            for tok in line.split_whitespace() {
                let v: f64 = tok.parse().map_err(|_| Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: format!("not a number: {tok:?}"),
                })?;
                nums.push(v);
            }
        }
        Self::from_numbers(&nums).map_err(|e| match e {
            Error::Camera(msg) => Error::Camera(format!("{}: {msg}", path.display())),
            e => e,
        })
    }

    /// 23 numbers (3x3 K, R, T, size), or 26 with K given as a 3x4 matrix
    /// whose last column is zero.
    fn from_numbers(nums: &[f64]) -> Result<Self> {
        let (k, rest) = match nums.len() {
            23 => (Matrix3::from_row_slice(&nums[0..9]), &nums[9..]),
            26 => {
                if nums[3] != 0.0 || nums[7] != 0.0 || nums[11] != 0.0 {
                    return Err(Error::Camera("3x4 intrinsic matrix must have a zero last column".into()));
                }
                let k: Vec<f64> = (0..3).flat_map(|r| nums[r * 4..r * 4 + 3].to_vec()).collect();
                (Matrix3::from_row_slice(&k), &nums[12..])
            }
            n => return Err(Error::Camera(format!("expected 23 numbers (K, R, T, width height), found {n}"))),
        };
        let r = Matrix3::from_row_slice(&rest[0..9]);
        let t = Vector3::new(rest[9], rest[10], rest[11]);
        let (w, h) = (rest[12], rest[13]);
        if !(w >= 1.0 && h >= 1.0 && w.fract() == 0.0 && h.fract() == 0.0) {
            return Err(Error::Camera(format!("image size must be positive integers, got {w} x {h}")));
        }
        Self::new(k, r, t, w as u32, h as u32)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        for m in [&self.k, &self.r] {
            for row in 0..3 {
                s.push_str(&format!("{:.12} {:.12} {:.12}\n", m[(row, 0)], m[(row, 1)], m[(row, 2)]));
            }
        }
        s.push_str(&format!("{:.12} {:.12} {:.12}\n", self.t.x, self.t.y, self.t.z));
        s.push_str(&format!("{} {}\n", self.width, self.height));
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix4, Rotation3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn reads_points_in_order() {
        let f = write_tmp("0 0 0\n1 2 3");
        let c = load_cloud(f.path(), CloudFormat::XyzAscii).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!((c.points[1].x, c.points[1].y, c.points[1].z), (1.0, 2.0, 3.0));
    }

    #[test]
    fn comments_and_colors() {
        let f = write_tmp("# header\n1 2 3 10 20 30\n\n4 5 6 0 255 0\n");
        let c = load_cloud(f.path(), CloudFormat::XyzRgbAscii).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.points[1].rgb, Some([0, 255, 0]));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let f = write_tmp("0 0 0\n1 1 1\na b c\n");
        match load_cloud(f.path(), CloudFormat::XyzAscii) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        let f = write_tmp("1 2 3 4 5 300\n");
        assert!(matches!(load_cloud(f.path(), CloudFormat::XyzRgbAscii), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn empty_file_is_an_error() {
        let f = write_tmp("# nothing\n");
        assert!(matches!(load_cloud(f.path(), CloudFormat::XyzAscii), Err(Error::Empty(_))));
    }

    #[test]
    fn save_load_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts: Vec<Point3> = (0..1000)
            .map(|_| {
                Point3::new(rng.gen_range(-5e3..5e3), rng.gen_range(-5e3..5e3), rng.gen_range(-100.0..400.0))
                    .with_rgb([rng.gen(), rng.gen(), rng.gen()])
            })
            .collect();
        let cloud = PointCloud::new(pts, Source::Laser);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.xyz");
        save_cloud(&path, &cloud, CloudFormat::XyzRgbAscii).unwrap();
        let back = load_cloud(&path, CloudFormat::XyzRgbAscii).unwrap();
        assert_eq!(back.len(), cloud.len());
        for (a, b) in cloud.points.iter().zip(&back.points) {
            assert!((a.x - b.x).abs() <= 1e-6 && (a.y - b.y).abs() <= 1e-6 && (a.z - b.z).abs() <= 1e-6);
            assert_eq!(a.rgb, b.rgb);
        }
    }

    fn identity_cam(t: Vector3<f64>) -> CameraModel {
        CameraModel::new(Matrix3::identity(), Matrix3::identity(), t, 100, 100).unwrap()
    }

    #[test]
    fn projection_divides_by_depth() {
        let p = identity_cam(Vector3::zeros()).project(&Point3::new(2.0, 4.0, 2.0)).unwrap();
        assert_eq!((p.x, p.y), (1.0, 2.0));
        assert!(p.in_frame);
    }

    #[test]
    fn projection_with_translation() {
        let p = identity_cam(Vector3::new(0.0, 0.0, -1.0)).project(&Point3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(p.depth, 2.0);
        assert_eq!((p.x, p.y), (0.0, 0.0));
    }

    #[test]
    fn behind_camera_is_reported() {
        let cam = identity_cam(Vector3::zeros());
        assert!(matches!(cam.project(&Point3::new(1.0, 1.0, -3.0)), Err(Error::BehindCamera { .. })));
        assert!(matches!(cam.project(&Point3::new(1.0, 1.0, 0.0)), Err(Error::BehindCamera { .. })));
    }

    #[test]
    fn in_frame_uses_pixel_centers() {
        let cam = identity_cam(Vector3::zeros());
        assert!(cam.project(&Point3::new(-0.4, 0.0, 1.0)).unwrap().in_frame);
        assert!(!cam.project(&Point3::new(-0.6, 0.0, 1.0)).unwrap().in_frame);
        assert!(cam.project(&Point3::new(99.4, 0.0, 1.0)).unwrap().in_frame);
        assert!(!cam.project(&Point3::new(99.5, 0.0, 1.0)).unwrap().in_frame);
    }

    fn random_camera(rng: &mut ChaCha8Rng) -> CameraModel {
        let f = rng.gen_range(500.0..3000.0);
        let k = Matrix3::new(f, rng.gen_range(-2.0..2.0), rng.gen_range(200.0..800.0), 0.0, f * rng.gen_range(0.9..1.1), rng.gen_range(200.0..600.0), 0.0, 0.0, 1.0);
        let r = Rotation3::from_euler_angles(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(-3.1..3.1));
        let t = Vector3::new(rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0), rng.gen_range(-1200.0..-800.0));
        CameraModel::new(k, *r.matrix(), t, 1000, 800).unwrap()
    }

    #[test]
    fn projection_matches_homogeneous_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let cam = random_camera(&mut rng);
            let p = Point3::new(rng.gen_range(-100.0..100.0), rng.gen_range(-100.0..100.0), rng.gen_range(0.0..40.0));
            // 4x4 world->camera transform built independently of projection_matrix()
            let mut world_to_cam = Matrix4::<f64>::identity();
            for r in 0..3 {
                for c in 0..3 {
                    world_to_cam[(r, c)] = cam.rotation()[(r, c)];
                }
            }
            let rt = cam.rotation() * cam.center();
            for r in 0..3 {
                world_to_cam[(r, 3)] = -rt[r];
            }
            let pc = world_to_cam * Vector4::new(p.x, p.y, p.z, 1.0);
            let uvw = cam.intrinsics() * Vector3::new(pc.x, pc.y, pc.z);
            let (ex, ey) = (uvw.x / uvw.z, uvw.y / uvw.z);
            let got = cam.project(&p).unwrap();
            assert!((got.x - ex).abs() < 1e-9 && (got.y - ey).abs() < 1e-9, "{got:?} vs ({ex}, {ey})");
        }
    }

    #[test]
    fn projection_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cam = random_camera(&mut rng);
        let p = Point3::new(3.0, -7.0, 12.0);
        let base = cam.project(&p).unwrap();
        for lambda in [0.001, 0.5, 3.0, 1e4] {
            let h = (cam.projection_matrix() * lambda) * Vector4::new(p.x, p.y, p.z, 1.0);
            assert!((h.x / h.z - base.x).abs() < 1e-9);
            assert!((h.y / h.z - base.y).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_invalid_cameras() {
        let bad_r = Matrix3::new(1.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(CameraModel::new(Matrix3::identity(), bad_r, Vector3::zeros(), 10, 10).is_err());
        let bad_k = Matrix3::new(1.0, 0.0, 0.0, 0.5, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(CameraModel::new(bad_k, Matrix3::identity(), Vector3::zeros(), 10, 10).is_err());
        let neg_k = Matrix3::new(-1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(CameraModel::new(neg_k, Matrix3::identity(), Vector3::zeros(), 10, 10).is_err());
    }

    #[test]
    fn camera_file_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cam = random_camera(&mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cam.txt");
        cam.save(&path).unwrap();
        let back = CameraModel::load(&path).unwrap();
        assert!((back.projection_matrix() - cam.projection_matrix()).abs().max() < 1e-6);
        assert_eq!(back.image_size(), (1000, 800));

        std::fs::write(&path, "1 0 0 0 1 0 0 0 1\n").unwrap();
        assert!(matches!(CameraModel::load(&path), Err(Error::Camera(_))));
    }
}
