//! Plane segmentation by Hough-seeded surface growing, clutter clustering,
//! segment features and rule-based classification.
//!
//! Every operation first sorts its points by (x, y, z, index) and centers them
//! on their centroid, and all tie-breaking happens in that canonical order.
//! Results therefore do not depend on the input order, and scaling all
//! coordinates and metric parameters by a power of two reproduces them
//! exactly.

use std::collections::VecDeque;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};

use crate::pointcloud_io::Point3;
use crate::raster::RasterGrid;
use crate::spatial::HashGrid3;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrowParams {
    pub grow_radius: f64,
    pub max_plane_dist: f64,
    pub min_seed_points: usize,
    pub clutter_radius: f64,
    pub min_clutter_size: usize,
    /// A grown plane is discarded when the points lying between one and three
    /// `max_plane_dist` off the plane, within `grow_radius` of it, outnumber
    /// its own points by this ratio. Slabs cut through volumetric clutter
    /// (tree crowns) fail this; real surfaces do not.
    pub max_shell_ratio: f64,
}

impl Default for GrowParams {
    fn default() -> Self {
        GrowParams {
            grow_radius: 1.0,
            max_plane_dist: 0.2,
            min_seed_points: 30,
            clutter_radius: 1.0,
            min_clutter_size: 20,
            max_shell_ratio: 0.5,
        }
    }
}

impl GrowParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("segmentation.grow_radius", self.grow_radius),
            ("segmentation.max_plane_dist", self.max_plane_dist),
            ("segmentation.clutter_radius", self.clutter_radius),
            ("segmentation.max_shell_ratio", self.max_shell_ratio),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        if self.min_seed_points < 3 || self.min_clutter_size == 0 {
            return Err(Error::Config(
                "segmentation.min_seed_points must be >= 3 and segmentation.min_clutter_size > 0".into(),
            ));
        }
        Ok(())
    }

    /// Same parameters with every length multiplied by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        GrowParams {
            grow_radius: self.grow_radius * s,
            max_plane_dist: self.max_plane_dist * s,
            clutter_radius: self.clutter_radius * s,
            ..*self
        }
    }
}

/// Plane n . p = d with unit normal, nz >= 0.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneModel {
    pub normal: Vector3<f64>,
    pub d: f64,
    /// Indices into the point slice the plane was fitted on, ascending.
    pub inliers: Vec<usize>,
}

impl PlaneModel {
    pub fn distance(&self, p: &Point3) -> f64 {
        (self.normal.dot(&p.xyz()) - self.d).abs()
    }

    /// Degrees from horizontal.
    pub fn slope_deg(&self) -> f64 {
        self.normal.z.abs().min(1.0).acos().to_degrees()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentKind {
    Plane,
    Clutter,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentFeatures {
    pub size: usize,
    pub area_xy: f64,
    pub planarity: f64,
    pub slope: f64,
    pub fit_residual: f64,
    pub mean_height_above_ground: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub kind: SegmentKind,
    /// Ascending indices into the segmented point slice.
    pub points: Vec<usize>,
    pub plane: Option<PlaneModel>,
}

fn orient(n: Vector3<f64>) -> Vector3<f64> {
    let flip = if n.z != 0.0 {
        n.z < 0.0
    } else if n.y != 0.0 {
        n.y < 0.0
    } else {
        n.x < 0.0
    };
    if flip {
        -n
    } else {
        n
    }
}

struct Moments {
    mean: Vector3<f64>,
    /// Eigenvalues descending with matching eigenvectors.
    values: [f64; 3],
    vectors: [Vector3<f64>; 3],
}

fn moments<'a>(pts: impl Iterator<Item = &'a Vector3<f64>> + Clone) -> Option<Moments> {
    let n = pts.clone().count();
    if n < 3 {
        return None;
    }
    let mean = pts.clone().fold(Vector3::zeros(), |a, p| a + p) / n as f64;
    let mut cov = Matrix3::zeros();
    for p in pts {
        let d = p - mean;
        cov += d * d.transpose();
    }
    cov /= n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    Some(Moments {
        mean,
        values: order.map(|i| eig.eigenvalues[i].max(0.0)),
        vectors: order.map(|i| eig.eigenvectors.column(i).into_owned()),
    })
}

/// Least-squares plane (normal, d) through the given points.
fn fit_plane<'a>(pts: impl Iterator<Item = &'a Vector3<f64>> + Clone) -> Option<(Vector3<f64>, f64)> {
    let m = moments(pts)?;
    let n = m.vectors[2];
    if !(n.norm() > 0.0) || !n.iter().all(|v| v.is_finite()) {
        return None;
    }
    let n = orient(n.normalize());
    Some((n, n.dot(&m.mean)))
}

/// Points sorted canonically and centered on their centroid.
struct Canon {
    /// Canonical position -> original index.
    order: Vec<usize>,
    /// Original index -> canonical position (only for the indexed subset).
    rank: Vec<usize>,
    pts: Vec<Vector3<f64>>,
    /// Same points as `Point3`, for the hash grid.
    p3: Vec<Point3>,
    centroid: Vector3<f64>,
}

impl Canon {
    fn new(points: &[Point3], subset: &[usize]) -> Canon {
        let mut order = subset.to_vec();
        order.sort_by(|&a, &b| {
            let (p, q) = (&points[a], &points[b]);
            p.x.total_cmp(&q.x).then(p.y.total_cmp(&q.y)).then(p.z.total_cmp(&q.z)).then(a.cmp(&b))
        });
        order.dedup();
        let n = order.len().max(1) as f64;
        let centroid = order.iter().fold(Vector3::zeros(), |a, &i| a + points[i].xyz()) / n;
        let pts: Vec<Vector3<f64>> = order.iter().map(|&i| points[i].xyz() - centroid).collect();
        let p3 = pts.iter().map(|v| Point3::new(v.x, v.y, v.z)).collect();
        let mut rank = vec![usize::MAX; points.len()];
        for (k, &i) in order.iter().enumerate() {
            rank[i] = k;
        }
        Canon { order, rank, pts, p3, centroid }
    }

    fn to_original(&self, canon: &[usize]) -> Vec<usize> {
        let mut v: Vec<usize> = canon.iter().map(|&k| self.order[k]).collect();
        v.sort_unstable();
        v
    }

    /// Plane in original coordinates from one in centered coordinates.
    fn plane(&self, n: Vector3<f64>, d: f64, inliers: &[usize]) -> PlaneModel {
        PlaneModel { normal: n, d: d + n.dot(&self.centroid), inliers: self.to_original(inliers) }
    }

    fn grid(&self, ids: &[usize], cell: f64) -> HashGrid3 {
        HashGrid3::new(&self.p3, ids, cell)
    }

    /// Neighbors of canonical point `k` within `radius`, ascending.
    fn neighbors(&self, grid: &HashGrid3, k: usize, radius: f64) -> Vec<usize> {
        let mut out = Vec::new();
        grid.for_each_within(&self.p3, &self.p3[k], radius, |j| out.push(j));
        out.sort_unstable();
        out
    }
}

/// Unique normal directions of a 5 degree (theta, phi) grid with nz >= 0.
fn hough_directions() -> Vec<Vector3<f64>> {
    let mut dirs = Vec::new();
    for i in 0..=18 {
        let theta = (5.0 * i as f64).to_radians();
        let nphi = match i {
            0 => 1,
            18 => 36,
            _ => 72,
        };
        for j in 0..nphi {
            let phi = (5.0 * j as f64).to_radians();
            dirs.push(Vector3::new(theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos()));
        }
    }
    dirs
}

/// Planes found by iterative peak extraction from a (theta, phi, rho)
/// accumulator, strongest first. Each peak is refined by least squares on its
/// inliers and its inliers' votes are withdrawn before the next peak.
pub fn hough_seed_planes(points: &[Point3], params: &GrowParams) -> Result<Vec<PlaneModel>> {
    params.validate()?;
    if points.len() < params.min_seed_points {
        return Ok(Vec::new());
    }
    let all: Vec<usize> = (0..points.len()).collect();
    let c = Canon::new(points, &all);
    let dirs = hough_directions();
    let bin = params.max_plane_dist;
    let radius = c.pts.iter().map(|p| p.norm()).fold(0.0, f64::max);
    let half = (radius / bin).ceil() as i64 + 1;
    let nrho = (2 * half + 1) as usize;
    let mut acc = vec![0i32; dirs.len() * nrho];
    let cell_of = |di: usize, p: &Vector3<f64>| di * nrho + ((dirs[di].dot(p) / bin).round() as i64 + half) as usize;
    for p in &c.pts {
        for di in 0..dirs.len() {
            acc[cell_of(di, p)] += 1;
        }
    }
    const BLOCKED: i32 = i32::MIN / 2;
    let mut active = vec![true; c.pts.len()];
    let mut planes: Vec<PlaneModel> = Vec::new();
    let inliers_of = |n: &Vector3<f64>, d: f64, active: &[bool]| -> Vec<usize> {
        (0..c.pts.len()).filter(|&k| active[k] && (n.dot(&c.pts[k]) - d).abs() <= params.max_plane_dist).collect()
    };
    loop {
        let (best, votes) = acc.iter().enumerate().fold((0, i32::MIN), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
        if votes < params.min_seed_points as i32 {
            break;
        }
        let (di, k) = (best / nrho, (best % nrho) as i64 - half);
        let (mut n, mut d) = (dirs[di], k as f64 * bin);
        let mut inl = inliers_of(&n, d, &active);
        for _ in 0..3 {
            match fit_plane(inl.iter().map(|&k| &c.pts[k])) {
                Some((n2, d2)) => {
                    n = n2;
                    d = d2;
                }
                None => break,
            }
            inl = inliers_of(&n, d, &active);
        }
        if inl.len() < params.min_seed_points {
            acc[best] = BLOCKED;
            continue;
        }
        for &k in &inl {
            active[k] = false;
            for di in 0..dirs.len() {
                acc[cell_of(di, &c.pts[k])] -= 1;
            }
        }
        planes.push(c.plane(n, d, &inl));
    }
    planes.sort_by(|a, b| b.inliers.len().cmp(&a.inliers.len()));
    Ok(planes)
}

/// Connected components of `ids` (canonical, ascending) under distance <=
/// `radius`, largest first, ties by smallest member.
fn components(c: &Canon, ids: &[usize], radius: f64) -> Vec<Vec<usize>> {
    let grid = c.grid(ids, radius);
    let mut seen = vec![false; c.pts.len()];
    let mut comps = Vec::new();
    for &s in ids {
        if seen[s] {
            continue;
        }
        seen[s] = true;
        let mut comp = vec![s];
        let mut q = VecDeque::from([s]);
        while let Some(k) = q.pop_front() {
            for j in c.neighbors(&grid, k, radius) {
                if !seen[j] {
                    seen[j] = true;
                    comp.push(j);
                    q.push_back(j);
                }
            }
        }
        comp.sort_unstable();
        comps.push(comp);
    }
    comps.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
    comps
}

const REFIT_EVERY: usize = 50;

/// Region growing from each seed's inliers (strongest seed first). Returns the
/// plane segments and the indices left unassigned.
pub fn surface_grow(points: &[Point3], seeds: &[PlaneModel], params: &GrowParams) -> Result<(Vec<Segment>, Vec<usize>)> {
    params.validate()?;
    let all: Vec<usize> = (0..points.len()).collect();
    let c = Canon::new(points, &all);
    let n = c.pts.len();
    let grid = c.grid(&(0..n).collect::<Vec<_>>(), params.grow_radius);
    let mut assigned = vec![false; n];
    let mut in_seg = vec![false; n];
    let mut segments = Vec::new();

    let mut order: Vec<usize> = (0..seeds.len()).collect();
    order.sort_by(|&a, &b| seeds[b].inliers.len().cmp(&seeds[a].inliers.len()).then(a.cmp(&b)));
    for si in order {
        let seed = &seeds[si];
        let sd = seed.d - seed.normal.dot(&c.centroid);
        let mut inl: Vec<usize> = seed
            .inliers
            .iter()
            .filter_map(|&i| c.rank.get(i).copied().filter(|&k| k != usize::MAX))
            .filter(|&k| !assigned[k] && (seed.normal.dot(&c.pts[k]) - sd).abs() <= params.max_plane_dist)
            .collect();
        inl.sort_unstable();
        inl.dedup();
        for comp in components(&c, &inl, params.grow_radius) {
            let comp: Vec<usize> = comp.into_iter().filter(|&k| !assigned[k]).collect();
            if comp.len() < params.min_seed_points {
                continue;
            }
            let mut seg = comp.clone();
            seg.iter().for_each(|&k| in_seg[k] = true);
            let (mut pn, mut pd) = fit_plane(seg.iter().map(|&k| &c.pts[k])).unwrap_or((seed.normal, sd));
            let mut queue: VecDeque<usize> = seg.iter().copied().collect();
            let mut since_fit = 0;
            while let Some(k) = queue.pop_front() {
                for j in c.neighbors(&grid, k, params.grow_radius) {
                    if assigned[j] || in_seg[j] || (pn.dot(&c.pts[j]) - pd).abs() > params.max_plane_dist {
                        continue;
                    }
                    in_seg[j] = true;
                    seg.push(j);
                    queue.push_back(j);
                    since_fit += 1;
                    if since_fit == REFIT_EVERY {
                        since_fit = 0;
                        if let Some((a, b)) = fit_plane(seg.iter().map(|&k| &c.pts[k])) {
                            pn = a;
                            pd = b;
                        }
                    }
                }
            }
            seg.sort_unstable();
            if let Some((a, b)) = fit_plane(seg.iter().map(|&k| &c.pts[k])) {
                pn = a;
                pd = b;
            }
            // shell test
            let mut shell = vec![false; n];
            let mut shell_count = 0usize;
            for &k in &seg {
                for j in c.neighbors(&grid, k, params.grow_radius) {
                    if in_seg[j] || shell[j] {
                        continue;
                    }
                    let dist = (pn.dot(&c.pts[j]) - pd).abs();
                    if dist > params.max_plane_dist && dist <= 3.0 * params.max_plane_dist {
                        shell[j] = true;
                        shell_count += 1;
                    }
                }
            }
            seg.iter().for_each(|&k| in_seg[k] = false);
            if shell_count as f64 > params.max_shell_ratio * seg.len() as f64 {
                continue;
            }
            seg.iter().for_each(|&k| assigned[k] = true);
            let plane = c.plane(pn, pd, &seg);
            segments.push(Segment { kind: SegmentKind::Plane, points: plane.inliers.clone(), plane: Some(plane) });
        }
    }
    let leftovers = c.to_original(&(0..n).filter(|&k| !assigned[k]).collect::<Vec<_>>());
    Ok((segments, leftovers))
}

/// Connected components of `leftovers` under distance <= clutter_radius;
/// components below min_clutter_size are dropped.
pub fn cluster_clutter(points: &[Point3], leftovers: &[usize], params: &GrowParams) -> Result<Vec<Segment>> {
    params.validate()?;
    let c = Canon::new(points, leftovers);
    let ids: Vec<usize> = (0..c.pts.len()).collect();
    let mut comps: Vec<Vec<usize>> =
        components(&c, &ids, params.clutter_radius).into_iter().filter(|comp| comp.len() >= params.min_clutter_size).collect();
    comps.sort_by_key(|comp| comp[0]);
    Ok(comps
        .into_iter()
        .map(|comp| Segment { kind: SegmentKind::Clutter, points: c.to_original(&comp), plane: None })
        .collect())
}

/// Plane segments, clutter segments and the points in neither.
#[derive(Debug, Clone)]
pub struct Segmentation {
    pub planes: Vec<Segment>,
    pub clutters: Vec<Segment>,
    pub unassigned: Vec<usize>,
}

/// Hough seeding, surface growing and clutter clustering in one call.
pub fn segment_points(points: &[Point3], params: &GrowParams) -> Result<Segmentation> {
    let seeds = hough_seed_planes(points, params)?;
    let (planes, left) = surface_grow(points, &seeds, params)?;
    let clutters = cluster_clutter(points, &left, params)?;
    let mut in_clutter = vec![false; points.len()];
    clutters.iter().flat_map(|s| &s.points).for_each(|&i| in_clutter[i] = true);
    let unassigned = left.into_iter().filter(|&i| !in_clutter[i]).collect();
    Ok(Segmentation { planes, clutters, unassigned })
}

/// Area of the convex hull of the points' xy.
pub fn convex_hull_area(xy: &[(f64, f64)]) -> f64 {
    let hull = convex_hull(xy);
    let n = hull.len();
    if n < 3 {
        return 0.0;
    }
    (0..n).map(|i| {
        let (a, b) = (hull[i], hull[(i + 1) % n]);
        a.0 * b.1 - b.0 * a.1
    })
    .sum::<f64>()
    .abs()
        / 2.0
}

/// Counter-clockwise convex hull (monotone chain).
pub fn convex_hull(xy: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut p = xy.to_vec();
    p.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    p.dedup();
    if p.len() < 3 {
        return p;
    }
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0);
    let mut lower: Vec<(f64, f64)> = Vec::new();
    for &q in &p {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], q) <= 0.0 {
            lower.pop();
        }
        lower.push(q);
    }
    let mut upper: Vec<(f64, f64)> = Vec::new();
    for &q in p.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], q) <= 0.0 {
            upper.pop();
        }
        upper.push(q);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

pub fn segment_features(points: &[Point3], seg: &Segment, dtm: &RasterGrid) -> Result<SegmentFeatures> {
    if seg.points.is_empty() {
        return Err(Error::Empty("segment".into()));
    }
    let pts: Vec<Vector3<f64>> = seg.points.iter().map(|&i| points[i].xyz()).collect();
    let xy: Vec<(f64, f64)> = pts.iter().map(|p| (p.x, p.y)).collect();
    let (planarity, plane) = match moments(pts.iter()) {
        Some(m) => {
            let pl = if m.values[1] > 0.0 { 1.0 - m.values[2] / m.values[1] } else { 0.0 };
            let n = orient(m.vectors[2].normalize());
            (pl.clamp(0.0, 1.0), Some((n, n.dot(&m.mean))))
        }
        None => (0.0, None),
    };
    let plane = seg.plane.as_ref().map(|p| (p.normal, p.d)).or(plane);
    let (slope, fit_residual) = match plane {
        Some((n, d)) => {
            let rms = (pts.iter().map(|p| (n.dot(p) - d).powi(2)).sum::<f64>() / pts.len() as f64).sqrt();
            (n.z.abs().min(1.0).acos().to_degrees(), rms)
        }
        None => (0.0, 0.0),
    };
    let mut h = 0.0;
    for p in &pts {
        let g = dtm.sample(p.x, p.y).ok_or_else(|| {
            Error::Geometry(format!("DTM does not cover segment point ({:.3}, {:.3})", p.x, p.y))
        })?;
        h += p.z - g;
    }
    Ok(SegmentFeatures {
        size: pts.len(),
        area_xy: convex_hull_area(&xy),
        planarity,
        slope,
        fit_residual,
        mean_height_above_ground: h / pts.len() as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassifyRules {
    pub roof_min_area: f64,
    pub roof_max_residual: f64,
    pub roof_max_slope: f64,
    pub roof_min_height: f64,
    pub tree_min_size: usize,
    pub tree_max_planarity: f64,
    pub tree_min_height: f64,
}

impl Default for ClassifyRules {
    fn default() -> Self {
        ClassifyRules {
            roof_min_area: 10.0,
            roof_max_residual: 0.15,
            roof_max_slope: 75.0,
            roof_min_height: 2.5,
            tree_min_size: 20,
            tree_max_planarity: 0.5,
            tree_min_height: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentClass {
    Roof,
    Tree,
    Other,
}

pub fn classify_segment(f: &SegmentFeatures, kind: SegmentKind, r: &ClassifyRules) -> SegmentClass {
    match kind {
        SegmentKind::Plane
            if f.area_xy >= r.roof_min_area
                && f.fit_residual <= r.roof_max_residual
                && f.slope <= r.roof_max_slope
                && f.mean_height_above_ground >= r.roof_min_height =>
        {
            SegmentClass::Roof
        }
        SegmentKind::Clutter
            if f.size >= r.tree_min_size && f.planarity < r.tree_max_planarity && f.mean_height_above_ground >= r.tree_min_height =>
        {
            SegmentClass::Tree
        }
        _ => SegmentClass::Other,
    }
}
