//! Ground filtering by progressive TIN densification, and DTM gridding.
//!
//! Seeds are the lowest point of each seed cell. The seed grid splits the
//! cloud's xy extent into `floor(extent / seed_cell)` equal cells per axis, so
//! no cell is ever smaller than `seed_cell`. Four virtual corner vertices close
//! the TIN over the bounding box; they take part in the distance test but not
//! in the angle test and are never reported as points.
//!
//! Each densification pass visits the remaining points in ascending z (ties by
//! index) and promotes a point when its vertical offset from the containing
//! facet is at most `max_distance` and the angle it subtends at every real
//! facet vertex is at most `max_angle`. Points lying within `snap_distance` of
//! the facet skip the angle test; without that, noisy points next to a
//! vertex would be rejected on flat ground.

use spade::handles::FixedVertexHandle;
use spade::{DelaunayTriangulation, FloatTriangulation, HasPosition, Point2, PositionInTriangulation, Triangulation};

use crate::pointcloud_io::{bounds_of, ClassLabel, Point3, PointCloud};
use crate::raster::{GridSpec, RasterGrid};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundFilterParams {
    pub seed_cell: f64,
    /// Degrees.
    pub max_angle: f64,
    pub max_distance: f64,
    pub iterations_cap: usize,
    pub snap_distance: f64,
}

impl Default for GroundFilterParams {
    fn default() -> Self {
        GroundFilterParams { seed_cell: 10.0, max_angle: 6.0, max_distance: 1.4, iterations_cap: 20, snap_distance: 0.25 }
    }
}

impl GroundFilterParams {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("terrain.seed_cell", self.seed_cell),
            ("terrain.max_angle", self.max_angle),
            ("terrain.max_distance", self.max_distance),
            ("terrain.snap_distance", self.snap_distance),
        ];
        for (name, v) in pos {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        if self.max_angle >= 90.0 {
            return Err(Error::Config(format!("terrain.max_angle must be < 90, got {}", self.max_angle)));
        }
        if self.iterations_cap == 0 {
            return Err(Error::Config("terrain.iterations_cap must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct TinVertex {
    pos: Point2<f64>,
    z: f64,
    /// Index of the source point; `None` for virtual corners.
    id: Option<usize>,
}

impl HasPosition for TinVertex {
    type Scalar = f64;

    fn position(&self) -> Point2<f64> {
        self.pos
    }
}

/// A 2D Delaunay triangulation of ground points with heights.
pub struct TriangulatedTerrain {
    tin: DelaunayTriangulation<TinVertex>,
}

impl TriangulatedTerrain {
    /// Triangulates `points` in the given order.
    pub fn from_points(points: &[Point3]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Empty("ground point set".into()));
        }
        let mut tin = DelaunayTriangulation::new();
        for (i, p) in points.iter().enumerate() {
            insert(&mut tin, TinVertex { pos: Point2::new(p.x, p.y), z: p.z, id: Some(i) })?;
        }
        Ok(TriangulatedTerrain { tin })
    }

    pub fn num_vertices(&self) -> usize {
        self.tin.num_vertices()
    }

    /// Source indices of the vertices.
    pub fn vertex_ids(&self) -> Vec<usize> {
        self.tin.vertices().filter_map(|v| v.data().id).collect()
    }

    /// Triangles as triples of source indices (faces touching virtual
    /// vertices are skipped).
    pub fn triangles(&self) -> Vec<[usize; 3]> {
        self.tin
            .inner_faces()
            .filter_map(|f| {
                let [a, b, c] = f.vertices().map(|v| v.data().id);
                Some([a?, b?, c?])
            })
            .collect()
    }

    /// Linear interpolation inside the hull, nearest vertex outside.
    pub fn height_at(&self, x: f64, y: f64) -> Option<f64> {
        let p = Point2::new(x, y);
        self.tin
            .barycentric()
            .interpolate(|v| v.data().z, p)
            .or_else(|| self.tin.nearest_neighbor(p).map(|v| v.data().z))
    }
}

fn insert(tin: &mut DelaunayTriangulation<TinVertex>, v: TinVertex) -> Result<FixedVertexHandle> {
    tin.insert(v).map_err(|e| Error::Triangulation(format!("{e:?}")))
}

fn check_not_collinear(points: &[Point3]) -> Result<()> {
    let p0 = &points[0];
    let far = points
        .iter()
        .max_by(|a, b| {
            let da = (a.x - p0.x).powi(2) + (a.y - p0.y).powi(2);
            let db = (b.x - p0.x).powi(2) + (b.y - p0.y).powi(2);
            da.total_cmp(&db)
        })
        .unwrap();
    let (dx, dy) = (far.x - p0.x, far.y - p0.y);
    let len = (dx * dx + dy * dy).sqrt();
    if len == 0.0 {
        return Err(Error::Triangulation("all points share one xy position".into()));
    }
    let max_off = points.iter().map(|p| ((p.x - p0.x) * dy - (p.y - p0.y) * dx).abs() / len).fold(0.0, f64::max);
    if max_off <= 1e-9 * len {
        return Err(Error::Triangulation("points are collinear in xy".into()));
    }
    Ok(())
}

/// Plane z = a + b x + c y through the given points by least squares; `None`
/// when degenerate.
fn fit_height_plane(pts: &[(f64, f64, f64)]) -> Option<(f64, f64, f64)> {
    use nalgebra::{Matrix3, Vector3};
    let mut ata = Matrix3::<f64>::zeros();
    let mut atb = Vector3::<f64>::zeros();
    let (mx, my) = (
        pts.iter().map(|p| p.0).sum::<f64>() / pts.len() as f64,
        pts.iter().map(|p| p.1).sum::<f64>() / pts.len() as f64,
    );
    for &(x, y, z) in pts {
        let row = Vector3::new(1.0, x - mx, y - my);
        ata += row * row.transpose();
        atb += row * z;
    }
    let sol = ata.lu().solve(&atb)?;
    if !sol.iter().all(|v| v.is_finite()) || ata.determinant().abs() < 1e-9 {
        return None;
    }
    Some((sol[0] - sol[1] * mx - sol[2] * my, sol[1], sol[2]))
}

/// Labels every point ground or non-ground. Returns the labeled cloud.
pub fn filter_ground(cloud: &PointCloud, params: &GroundFilterParams) -> Result<PointCloud> {
    let labels = ground_mask(&cloud.points, params)?;
    let mut out = cloud.clone();
    for (p, g) in out.points.iter_mut().zip(labels) {
        p.class = if g { ClassLabel::Ground } else { ClassLabel::NonGround };
    }
    Ok(out)
}

/// Ground flags for `points` (see module docs).
pub fn ground_mask(points: &[Point3], params: &GroundFilterParams) -> Result<Vec<bool>> {
    params.validate()?;
    if points.is_empty() {
        return Err(Error::Empty("cloud for ground filtering".into()));
    }
    check_not_collinear(points)?;
    let b = bounds_of(points.iter()).unwrap();
    let nx = ((b.width() / params.seed_cell).floor() as usize).max(1);
    let ny = ((b.height() / params.seed_cell).floor() as usize).max(1);
    let (cw, ch) = (b.width() / nx as f64, b.height() / ny as f64);
    let cell_index = |p: &Point3| {
        let cx = if cw > 0.0 { (((p.x - b.min_x) / cw) as usize).min(nx - 1) } else { 0 };
        let cy = if ch > 0.0 { (((p.y - b.min_y) / ch) as usize).min(ny - 1) } else { 0 };
        cy * nx + cx
    };

    let mut lowest: Vec<Option<usize>> = vec![None; nx * ny];
    for (i, p) in points.iter().enumerate() {
        let c = cell_index(p);
        match lowest[c] {
            Some(j) if points[j].z <= p.z => {}
            _ => lowest[c] = Some(i),
        }
    }
    let seeds: Vec<usize> = lowest.into_iter().flatten().collect();

    let mut ground = vec![false; points.len()];
    let mut tin: DelaunayTriangulation<TinVertex> = DelaunayTriangulation::new();

    // virtual corners, heights from a local plane through the nearest seeds
    let pad = 1.0 + 0.01 * b.width().max(b.height());
    let corners = [
        (b.min_x - pad, b.min_y - pad),
        (b.max_x + pad, b.min_y - pad),
        (b.max_x + pad, b.max_y + pad),
        (b.min_x - pad, b.max_y + pad),
    ];
    for (x, y) in corners {
        let mut near: Vec<usize> = seeds.clone();
        near.sort_by(|&i, &j| {
            let di = (points[i].x - x).powi(2) + (points[i].y - y).powi(2);
            let dj = (points[j].x - x).powi(2) + (points[j].y - y).powi(2);
            di.total_cmp(&dj).then(i.cmp(&j))
        });
        near.truncate(8);
        let local: Vec<(f64, f64, f64)> = near.iter().map(|&i| (points[i].x, points[i].y, points[i].z)).collect();
        let z = match (local.len() >= 3).then(|| fit_height_plane(&local)).flatten() {
            Some((a, bx, by)) => a + bx * x + by * y,
            None => points[near[0]].z,
        };
        insert(&mut tin, TinVertex { pos: Point2::new(x, y), z, id: None })?;
    }
    for &i in &seeds {
        let p = &points[i];
        if let PositionInTriangulation::OnVertex(_) = tin.locate(Point2::new(p.x, p.y)) {
            continue;
        }
        insert(&mut tin, TinVertex { pos: Point2::new(p.x, p.y), z: p.z, id: Some(i) })?;
        ground[i] = true;
    }

    let tan_max = params.max_angle.to_radians().sin();
    for _ in 0..params.iterations_cap {
        let mut candidates: Vec<usize> = (0..points.len()).filter(|&i| !ground[i]).collect();
        candidates.sort_by(|&i, &j| points[i].z.total_cmp(&points[j].z).then(i.cmp(&j)));
        let mut accepted = 0usize;
        for i in candidates {
            let p = &points[i];
            let q = Point2::new(p.x, p.y);
            let face = match tin.locate(q) {
                PositionInTriangulation::OnFace(f) => tin.face(f).vertices(),
                PositionInTriangulation::OnEdge(e) => {
                    let e = tin.directed_edge(e);
                    match e.face().as_inner().or_else(|| e.rev().face().as_inner()) {
                        Some(f) => f.vertices(),
                        None => continue,
                    }
                }
                PositionInTriangulation::OnVertex(v) => {
                    if (tin.vertex(v).data().z - p.z).abs() <= params.snap_distance {
                        ground[i] = true;
                        accepted += 1;
                    }
                    continue;
                }
                _ => continue,
            };
            let v: [TinVertex; 3] = face.map(|h| *h.data());
            let a = nalgebra::Vector3::new(v[0].pos.x, v[0].pos.y, v[0].z);
            let e1 = nalgebra::Vector3::new(v[1].pos.x, v[1].pos.y, v[1].z) - a;
            let e2 = nalgebra::Vector3::new(v[2].pos.x, v[2].pos.y, v[2].z) - a;
            let n = e1.cross(&e2);
            if n.z.abs() < 1e-12 {
                continue;
            }
            let n = n / n.norm();
            let pv = nalgebra::Vector3::new(p.x, p.y, p.z);
            let d_perp = n.dot(&(pv - a)).abs();
            let d_vert = d_perp / n.z.abs();
            if d_vert > params.max_distance {
                continue;
            }
            let angles_ok = d_perp <= params.snap_distance
                || v.iter().filter(|t| t.id.is_some()).all(|t| {
                    let dist = ((p.x - t.pos.x).powi(2) + (p.y - t.pos.y).powi(2) + (p.z - t.z).powi(2)).sqrt();
                    dist > 0.0 && d_perp / dist <= tan_max
                });
            if !angles_ok {
                continue;
            }
            insert(&mut tin, TinVertex { pos: q, z: p.z, id: Some(i) })?;
            ground[i] = true;
            accepted += 1;
        }
        if accepted == 0 {
            break;
        }
    }
    Ok(ground)
}

/// DTM at each cell center from a TIN over the ground points; cells outside
/// the hull take the nearest vertex height.
pub fn build_dtm(ground: &PointCloud, spec: &GridSpec) -> Result<RasterGrid> {
    let tin = TriangulatedTerrain::from_points(&ground.points)?;
    let mut out = RasterGrid::new_empty(*spec);
    for r in 0..spec.height {
        for c in 0..spec.width {
            let (x, y) = spec.cell_center(r, c);
            if let Some(z) = tin.height_at(x, y) {
                out.set(r, c, z);
            }
        }
    }
    Ok(out)
}

/// Ground points of a labeled cloud.
pub fn ground_points(labeled: &PointCloud) -> PointCloud {
    PointCloud::new(
        labeled.points.iter().filter(|p| p.class == ClassLabel::Ground).copied().collect(),
        labeled.source,
    )
}
