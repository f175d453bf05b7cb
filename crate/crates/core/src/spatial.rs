//! Uniform hash grids for neighbor queries.

use std::collections::HashMap;

use crate::pointcloud_io::Point3;

/// 3D hash grid over a subset of points; cell edge = query radius.
pub(crate) struct HashGrid3 {
    cell: f64,
    cells: HashMap<(i64, i64, i64), Vec<usize>>,
}

impl HashGrid3 {
    /// `ids` index into `points`; buckets keep the order of `ids`.
    pub fn new(points: &[Point3], ids: &[usize], cell: f64) -> Self {
        let mut cells: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
        for &i in ids {
            cells.entry(Self::key(&points[i], cell)).or_default().push(i);
        }
        HashGrid3 { cell, cells }
    }

    fn key(p: &Point3, cell: f64) -> (i64, i64, i64) {
        ((p.x / cell).floor() as i64, (p.y / cell).floor() as i64, (p.z / cell).floor() as i64)
    }

    /// Calls `f` for every indexed point within `radius` (<= cell) of `p`.
    pub fn for_each_within(&self, points: &[Point3], p: &Point3, radius: f64, mut f: impl FnMut(usize)) {
        let (kx, ky, kz) = Self::key(p, self.cell);
        let r2 = radius * radius;
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(bucket) = self.cells.get(&(kx + dx, ky + dy, kz + dz)) {
                        for &j in bucket {
                            let q = &points[j];
                            let d2 = (q.x - p.x).powi(2) + (q.y - p.y).powi(2) + (q.z - p.z).powi(2);
                            if d2 <= r2 {
                                f(j);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2D bucket index over a whole cloud for xy window queries.
pub(crate) struct XyIndex {
    min_x: f64,
    min_y: f64,
    cell: f64,
    nx: usize,
    ny: usize,
    buckets: Vec<Vec<u32>>,
}

impl XyIndex {
    pub fn new(points: &[Point3], cell: f64) -> Self {
        let b = crate::pointcloud_io::bounds_of(points.iter()).unwrap_or(crate::pointcloud_io::Bounds2 {
            min_x: 0.0,
            min_y: 0.0,
            max_x: 0.0,
            max_y: 0.0,
        });
        let nx = ((b.width() / cell).floor() as usize + 1).max(1);
        let ny = ((b.height() / cell).floor() as usize + 1).max(1);
        let mut buckets = vec![Vec::new(); nx * ny];
        for (i, p) in points.iter().enumerate() {
            let cx = (((p.x - b.min_x) / cell) as usize).min(nx - 1);
            let cy = (((p.y - b.min_y) / cell) as usize).min(ny - 1);
            buckets[cy * nx + cx].push(i as u32);
        }
        XyIndex { min_x: b.min_x, min_y: b.min_y, cell, nx, ny, buckets }
    }

    /// Indices of points whose xy lies in the closed window, ascending.
    pub fn query(&self, points: &[Point3], min_x: f64, min_y: f64, max_x: f64, max_y: f64) -> Vec<usize> {
        let cx0 = ((min_x - self.min_x) / self.cell).floor().max(0.0) as usize;
        let cy0 = ((min_y - self.min_y) / self.cell).floor().max(0.0) as usize;
        let cx1 = ((max_x - self.min_x) / self.cell).floor();
        let cy1 = ((max_y - self.min_y) / self.cell).floor();
        if cx1 < 0.0 || cy1 < 0.0 {
            return Vec::new();
        }
        let cx1 = (cx1 as usize).min(self.nx - 1);
        let cy1 = (cy1 as usize).min(self.ny - 1);
        let mut out = Vec::new();
        for cy in cy0..=cy1 {
            for cx in cx0..=cx1 {
                for &i in &self.buckets[cy * self.nx + cx] {
                    let p = &points[i as usize];
                    if p.x >= min_x && p.x <= max_x && p.y >= min_y && p.y <= max_y {
                        out.push(i as usize);
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }
}
