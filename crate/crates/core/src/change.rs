//! Patch-level change map, grouping of changed tiles into regions of
//! interest, and object-level verification (roof plane distance against the
//! other cloud, tree greenness in the orthoimage and camera images).

use std::collections::VecDeque;
use std::fmt;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::pointcloud_io::{Bounds2, CameraModel, ClassLabel, Point3, PointCloud};
use crate::raster::{GridSpec, PatchPair, RasterGrid, RgbRaster};
use crate::segmentation::{
    classify_segment, convex_hull, segment_features, segment_points, ClassifyRules, GrowParams, PlaneModel, Segment,
    SegmentClass, SegmentKind,
};
use crate::sicnn::Decision;
use crate::spatial::XyIndex;
use crate::terrain::{filter_ground, GroundFilterParams};
use crate::{Error, Result};

/// Fewer counterpart points than this under a roof counts as an absent surface.
pub const MIN_COUNTERPART_POINTS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TileState {
    Changed,
    Unchanged,
    Invalid,
}

impl TileState {
    fn as_str(self) -> &'static str {
        match self {
            TileState::Changed => "changed",
            TileState::Unchanged => "unchanged",
            TileState::Invalid => "invalid",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "changed" => Some(TileState::Changed),
            "unchanged" => Some(TileState::Unchanged),
            "invalid" => Some(TileState::Invalid),
            _ => None,
        }
    }

    /// Gray level in the rendered change map.
    pub fn gray(self) -> u8 {
        match self {
            TileState::Changed => 255,
            TileState::Unchanged => 0,
            TileState::Invalid => 128,
        }
    }
}

/// Per-tile classifier outcome over the patch tiling of a raster.
#[derive(Debug, Clone, PartialEq)]
pub struct ChangeMap {
    pub rows: usize,
    pub cols: usize,
    /// Top-left corner of tile (0, 0).
    pub origin: (f64, f64),
    /// Tile edge in meters.
    pub tile: f64,
    pub states: Vec<TileState>,
    pub scores: Vec<Option<f64>>,
}

impl ChangeMap {
    pub fn state(&self, row: usize, col: usize) -> TileState {
        self.states[row * self.cols + col]
    }

    pub fn tile_bounds(&self, row: usize, col: usize) -> Bounds2 {
        Bounds2 {
            min_x: self.origin.0 + col as f64 * self.tile,
            max_x: self.origin.0 + (col + 1) as f64 * self.tile,
            max_y: self.origin.1 - row as f64 * self.tile,
            min_y: self.origin.1 - (row + 1) as f64 * self.tile,
        }
    }

    /// Tile containing (x, y), if any.
    pub fn tile_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let c = ((x - self.origin.0) / self.tile).floor();
        let r = ((self.origin.1 - y) / self.tile).floor();
        (c >= 0.0 && r >= 0.0 && c < self.cols as f64 && r < self.rows as f64).then(|| (r as usize, c as usize))
    }

    /// (changed, unchanged, invalid) tile counts.
    pub fn counts(&self) -> (usize, usize, usize) {
        let n = |s| self.states.iter().filter(|&&x| x == s).count();
        (n(TileState::Changed), n(TileState::Unchanged), n(TileState::Invalid))
    }

    /// One gray byte per tile.
    pub fn render(&self) -> Vec<u8> {
        self.states.iter().map(|s| s.gray()).collect()
    }

    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        crate::raster::write_pgm(path, self.cols, self.rows, &self.render())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut s = format!(
            "# rows={} cols={} origin_x={} origin_y={} tile={}\ntile_row,tile_col,state,score\n",
            self.rows, self.cols, self.origin.0, self.origin.1, self.tile
        );
        for r in 0..self.rows {
            for c in 0..self.cols {
                let i = r * self.cols + c;
                let score = self.scores[i].map_or_else(|| "na".to_string(), |d| format!("{d:.6}"));
                s.push_str(&format!("{r},{c},{},{score}\n", self.states[i].as_str()));
            }
        }
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let perr = |line: usize, msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
        let mut lines = text.lines().enumerate();
        let header = lines.next().ok_or_else(|| Error::Empty(path.display().to_string()))?.1;
        let mut kv = std::collections::HashMap::new();
        for tok in header.trim_start_matches('#').split_whitespace() {
            if let Some((k, v)) = tok.split_once('=') {
                kv.insert(k, v);
            }
        }
        let get = |k: &str| -> Result<f64> {
            kv.get(k).and_then(|v| v.parse().ok()).ok_or_else(|| perr(1, format!("missing or bad header field {k}")))
        };
        let (rows, cols) = (get("rows")? as usize, get("cols")? as usize);
        let mut map = ChangeMap {
            rows,
            cols,
            origin: (get("origin_x")?, get("origin_y")?),
            tile: get("tile")?,
            states: vec![TileState::Invalid; rows * cols],
            scores: vec![None; rows * cols],
        };
        for (i, line) in lines {
            if line.starts_with("tile_row") || line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(perr(i + 1, format!("expected 4 fields, found {}", f.len())));
            }
            let r: usize = f[0].parse().map_err(|_| perr(i + 1, format!("bad row {:?}", f[0])))?;
            let c: usize = f[1].parse().map_err(|_| perr(i + 1, format!("bad col {:?}", f[1])))?;
            if r >= rows || c >= cols {
                return Err(perr(i + 1, format!("tile ({r}, {c}) outside {rows}x{cols}")));
            }
            let st = TileState::parse(f[2]).ok_or_else(|| perr(i + 1, format!("bad state {:?}", f[2])))?;
            let score = match f[3] {
                "na" => None,
                s => Some(s.parse().map_err(|_| perr(i + 1, format!("bad score {s:?}")))?),
            };
            map.states[r * cols + c] = st;
            map.scores[r * cols + c] = score;
        }
        Ok(map)
    }
}

/// Records one classifier result per pair. `grid` is the raster the pairs were
/// cut from.
pub fn build_change_map(
    grid: &GridSpec,
    patch_size_m: f64,
    pairs: &[PatchPair],
    results: &[(Decision, Option<f64>)],
) -> Result<ChangeMap> {
    if pairs.len() != results.len() {
        return Err(Error::Shape {
            expected: format!("{} classifier results", pairs.len()),
            got: results.len().to_string(),
        });
    }
    let s = crate::raster::patch_pixels(patch_size_m, grid.cell)?;
    let (rows, cols) = (grid.height / s, grid.width / s);
    let mut map = ChangeMap {
        rows,
        cols,
        origin: grid.origin,
        tile: patch_size_m,
        states: vec![TileState::Invalid; rows * cols],
        scores: vec![None; rows * cols],
    };
    for (pair, &(decision, score)) in pairs.iter().zip(results) {
        let (r, c) = pair.tile;
        if r >= rows || c >= cols {
            return Err(Error::Shape { expected: format!("tile inside {rows}x{cols}"), got: format!("({r}, {c})") });
        }
        let i = r * cols + c;
        map.states[i] = match decision {
            _ if !pair.valid => TileState::Invalid,
            Decision::Changed => TileState::Changed,
            Decision::Unchanged => TileState::Unchanged,
            Decision::Invalid => TileState::Invalid,
        };
        map.scores[i] = score;
    }
    Ok(map)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionOfInterest {
    /// Member tiles, row-major ascending.
    pub tiles: Vec<(usize, usize)>,
    pub rect: Bounds2,
}

/// 8-connected components of changed tiles, each bounding box grown by half a
/// patch; overlapping boxes are merged.
pub fn group_rois(map: &ChangeMap, patch_size_m: f64) -> Vec<RegionOfInterest> {
    let (rows, cols) = (map.rows, map.cols);
    let mut comp = vec![usize::MAX; rows * cols];
    let mut rois: Vec<RegionOfInterest> = Vec::new();
    for start in 0..rows * cols {
        if map.states[start] != TileState::Changed || comp[start] != usize::MAX {
            continue;
        }
        let id = rois.len();
        let mut tiles = Vec::new();
        let mut queue = VecDeque::from([start]);
        comp[start] = id;
        while let Some(i) = queue.pop_front() {
            let (r, c) = (i / cols, i % cols);
            tiles.push((r, c));
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                    if nr < 0 || nc < 0 || nr >= rows as i64 || nc >= cols as i64 {
                        continue;
                    }
                    let j = nr as usize * cols + nc as usize;
                    if map.states[j] == TileState::Changed && comp[j] == usize::MAX {
                        comp[j] = id;
                        queue.push_back(j);
                    }
                }
            }
        }
        tiles.sort_unstable();
        let rect = tiles
            .iter()
            .map(|&(r, c)| map.tile_bounds(r, c))
            .reduce(union)
            .expect("component has a tile")
            .expanded(patch_size_m / 2.0);
        rois.push(RegionOfInterest { tiles, rect });
    }
    // merge until no two boxes overlap
    loop {
        let mut merged = false;
        'outer: for i in 0..rois.len() {
            for j in i + 1..rois.len() {
                if rois[i].rect.intersects(&rois[j].rect) {
                    let b = rois.remove(j);
                    rois[i].rect = union(rois[i].rect, b.rect);
                    rois[i].tiles.extend(b.tiles);
                    rois[i].tiles.sort_unstable();
                    merged = true;
                    break 'outer;
                }
            }
        }
        if !merged {
            break;
        }
    }
    rois
}

fn union(a: Bounds2, b: Bounds2) -> Bounds2 {
    Bounds2 {
        min_x: a.min_x.min(b.min_x),
        min_y: a.min_y.min(b.min_y),
        max_x: a.max_x.max(b.max_x),
        max_y: a.max_y.max(b.max_y),
    }
}

/// Normalized excessive green index `(2g - r - b) / (2g + r + b)`; `None` for
/// a black pixel.
pub fn negi(r: u8, g: u8, b: u8) -> Option<f64> {
    let (r, g, b) = (r as f64, g as f64, b as f64);
    let den = 2.0 * g + r + b;
    (den > 0.0).then(|| (2.0 * g - r - b) / den)
}

/// Black pixels count as non-vegetation.
pub fn is_vegetation(rgb: [u8; 3], threshold: f64) -> bool {
    negi(rgb[0], rgb[1], rgb[2]).is_some_and(|v| v > threshold)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyParams {
    pub roof_dist_threshold: f64,
    pub negi_threshold: f64,
    pub vegetation_fraction_min: f64,
    pub footprint_buffer: f64,
    /// A tree is only a change candidate when less than this fraction of the
    /// other cloud's points under its crown stand above the tree height rule.
    pub canopy_presence_max: f64,
}

impl Default for VerifyParams {
    fn default() -> Self {
        VerifyParams {
            roof_dist_threshold: 0.5,
            negi_threshold: 0.1,
            vegetation_fraction_min: 0.5,
            footprint_buffer: 0.5,
            canopy_presence_max: 0.3,
        }
    }
}

impl VerifyParams {
    pub fn validate(&self) -> Result<()> {
        let pos = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("verify.{name} must be > 0, got {v}")))
            }
        };
        let frac = |name: &str, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("verify.{name} must be in (0, 1), got {v}")))
            }
        };
        pos("roof_dist_threshold", self.roof_dist_threshold)?;
        frac("negi_threshold", self.negi_threshold)?;
        frac("vegetation_fraction_min", self.vegetation_fraction_min)?;
        pos("footprint_buffer", self.footprint_buffer)?;
        frac("canopy_presence_max", self.canopy_presence_max)
    }
}

/// Bucketed view of a cloud for footprint queries.
pub struct IndexedCloud<'a> {
    pub cloud: &'a PointCloud,
    index: XyIndex,
}

impl<'a> IndexedCloud<'a> {
    pub fn new(cloud: &'a PointCloud) -> Self {
        IndexedCloud { cloud, index: XyIndex::new(&cloud.points, 2.0) }
    }

    /// Points whose xy lies inside `hull` (counter-clockwise) dilated by `buffer`.
    pub fn within_hull(&self, hull: &[(f64, f64)], buffer: f64) -> Vec<usize> {
        if hull.is_empty() {
            return Vec::new();
        }
        let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
        for &(x, y) in hull {
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
        let pts = &self.cloud.points;
        self.index
            .query(pts, x0 - buffer, y0 - buffer, x1 + buffer, y1 + buffer)
            .into_iter()
            .filter(|&i| hull_distance(hull, pts[i].x, pts[i].y) <= buffer)
            .collect()
    }
}

/// Distance from (x, y) to a counter-clockwise convex polygon; 0 inside.
fn hull_distance(hull: &[(f64, f64)], x: f64, y: f64) -> f64 {
    let n = hull.len();
    let seg_dist = |a: (f64, f64), b: (f64, f64)| {
        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
        let l2 = dx * dx + dy * dy;
        let t = if l2 > 0.0 { (((x - a.0) * dx + (y - a.1) * dy) / l2).clamp(0.0, 1.0) } else { 0.0 };
        ((x - a.0 - t * dx).powi(2) + (y - a.1 - t * dy).powi(2)).sqrt()
    };
    if n == 1 {
        return seg_dist(hull[0], hull[0]);
    }
    if n == 2 {
        return seg_dist(hull[0], hull[1]);
    }
    let mut inside = true;
    let mut best = f64::INFINITY;
    for i in 0..n {
        let (a, b) = (hull[i], hull[(i + 1) % n]);
        if (b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0) < 0.0 {
            inside = false;
        }
        best = best.min(seg_dist(a, b));
    }
    if inside {
        0.0
    } else {
        best
    }
}

fn hull_of(points: &[Point3], ids: &[usize]) -> Vec<(f64, f64)> {
    let xy: Vec<(f64, f64)> = ids.iter().map(|&i| (points[i].x, points[i].y)).collect();
    convex_hull(&xy)
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoofCheck {
    pub changed: bool,
    /// Median absolute point-plane distance; `None` when the other cloud has
    /// too few points under the footprint.
    pub plane_distance: Option<f64>,
    pub support: usize,
}

/// Compares a roof segment's plane against the other cloud's points under the
/// segment's dilated xy footprint.
pub fn verify_roof(segment_points: &[Point3], plane: &PlaneModel, other: &IndexedCloud, p: &VerifyParams) -> RoofCheck {
    let ids: Vec<usize> = (0..segment_points.len()).collect();
    let hull = hull_of(segment_points, &ids);
    let near = other.within_hull(&hull, p.footprint_buffer);
    let support = near.len();
    if support < MIN_COUNTERPART_POINTS {
        return RoofCheck { changed: true, plane_distance: None, support };
    }
    let d = median(near.iter().map(|&i| plane.distance(&other.cloud.points[i]).abs()).collect()).expect("non-empty");
    RoofCheck { changed: d > p.roof_dist_threshold, plane_distance: Some(d), support }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TreeCheck {
    pub changed: bool,
    pub vegetation_fraction: f64,
    pub samples: usize,
}

/// A camera with the image it took.
#[derive(Debug, Clone)]
pub struct CameraImage {
    pub camera: CameraModel,
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
}

impl CameraImage {
    fn pixel(&self, x: f64, y: f64) -> Option<[u8; 3]> {
        let (c, r) = ((x + 0.5).floor(), (y + 0.5).floor());
        (c >= 0.0 && r >= 0.0 && (c as usize) < self.width && (r as usize) < self.height)
            .then(|| self.pixels[r as usize * self.width + c as usize])
    }
}

/// Fraction of the tree points' image samples that look like vegetation. The
/// tree counts as still present only when that fraction exceeds
/// `vegetation_fraction_min`.
pub fn verify_tree(points: &[Point3], ortho: &RgbRaster, images: &[CameraImage], p: &VerifyParams) -> Result<TreeCheck> {
    let (mut samples, mut green) = (0usize, 0usize);
    let mut take = |rgb: [u8; 3]| {
        samples += 1;
        if is_vegetation(rgb, p.negi_threshold) {
            green += 1;
        }
    };
    for q in points {
        if let Some(rgb) = ortho.sample(q.x, q.y) {
            take(rgb);
        }
        for img in images {
            if let Ok(pr) = img.camera.project(q) {
                if pr.in_frame {
                    if let Some(rgb) = img.pixel(pr.x, pr.y) {
                        take(rgb);
                    }
                }
            }
        }
    }
    if samples == 0 {
        return Err(Error::VerificationImpossible(format!("none of {} tree points falls inside any image", points.len())));
    }
    let f = green as f64 / samples as f64;
    Ok(TreeCheck { changed: f <= p.vegetation_fraction_min, vegetation_fraction: f, samples })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ObjectClass {
    Building,
    Tree,
}

impl fmt::Display for ObjectClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ObjectClass::Building => "building",
            ObjectClass::Tree => "tree",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ChangeStatus {
    New,
    Demolished,
    UnchangedAfterVerification,
}

impl fmt::Display for ChangeStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ChangeStatus::New => "new",
            ChangeStatus::Demolished => "demolished",
            ChangeStatus::UnchangedAfterVerification => "unchanged_after_verification",
        })
    }
}

/// Epoch a detected object was segmented from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Epoch {
    A,
    B,
}

impl fmt::Display for Epoch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Epoch::A => "a",
            Epoch::B => "b",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Evidence {
    PlaneDistance(Option<f64>),
    VegetationFraction(Option<f64>),
}

impl Evidence {
    pub fn value(&self) -> Option<f64> {
        match *self {
            Evidence::PlaneDistance(v) | Evidence::VegetationFraction(v) => v,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectChange {
    pub id: usize,
    pub class: ObjectClass,
    pub status: ChangeStatus,
    pub epoch: Epoch,
    pub centroid: (f64, f64),
    pub evidence: Evidence,
    /// Indices into the source epoch's cloud.
    pub points: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ObjectParams {
    pub ground: GroundFilterParams,
    pub grow: GrowParams,
    pub rules: ClassifyRules,
    pub verify: VerifyParams,
}

/// Everything object extraction reads besides the ROI itself.
pub struct ObjectInputs<'a> {
    pub a: IndexedCloud<'a>,
    pub b: IndexedCloud<'a>,
    pub dtm: &'a RasterGrid,
    pub ortho: &'a RgbRaster,
    pub images: &'a [CameraImage],
    pub map: &'a ChangeMap,
}

impl<'a> ObjectInputs<'a> {
    pub fn new(
        cloud_a: &'a PointCloud,
        cloud_b: &'a PointCloud,
        dtm: &'a RasterGrid,
        ortho: &'a RgbRaster,
        images: &'a [CameraImage],
        map: &'a ChangeMap,
    ) -> Self {
        ObjectInputs { a: IndexedCloud::new(cloud_a), b: IndexedCloud::new(cloud_b), dtm, ortho, images, map }
    }
}

struct RoofPart {
    ids: Vec<usize>,
    check: RoofCheck,
}

/// Segments, classifies and verifies the objects of both epochs inside `roi`.
pub fn detect_objects(roi: &RegionOfInterest, inp: &ObjectInputs, p: &ObjectParams) -> Result<Vec<ObjectChange>> {
    let mut out = Vec::new();
    for (epoch, own, other) in [(Epoch::A, &inp.a, &inp.b), (Epoch::B, &inp.b, &inp.a)] {
        let (pts, idx) = own.cloud.crop(&roi.rect);
        if pts.len() < p.grow.min_seed_points {
            continue;
        }
        let labeled = match filter_ground(&PointCloud::new(pts, own.cloud.source), &p.ground) {
            Ok(c) => c,
            Err(Error::Triangulation(_)) => continue,
            Err(e) => return Err(e),
        };
        let (obj, obj_idx): (Vec<Point3>, Vec<usize>) = labeled
            .points
            .iter()
            .zip(&idx)
            .filter(|(q, _)| q.class == ClassLabel::NonGround)
            .map(|(q, &i)| (*q, i))
            .unzip();
        if obj.len() < p.grow.min_seed_points {
            continue;
        }
        let seg = segment_points(&obj, &p.grow)?;
        let mut roofs: Vec<RoofPart> = Vec::new();
        for s in seg.planes.iter().chain(&seg.clutters) {
            let Ok(f) = segment_features(&obj, s, inp.dtm) else { continue };
            match classify_segment(&f, s.kind, &p.rules) {
                SegmentClass::Roof => {
                    let plane = s.plane.as_ref().expect("plane segment has a model");
                    let sp: Vec<Point3> = s.points.iter().map(|&i| obj[i]).collect();
                    let check = verify_roof(&sp, plane, other, &p.verify);
                    roofs.push(RoofPart { ids: s.points.clone(), check });
                }
                SegmentClass::Tree => {
                    if let Some(o) = tree_object(&obj, s, epoch, other, inp, p)? {
                        out.push(ObjectChange { points: s.points.iter().map(|&i| obj_idx[i]).collect(), ..o });
                    }
                }
                SegmentClass::Other => {}
            }
        }
        for group in group_roof_parts(&obj, &roofs) {
            out.push(building_object(&obj, &obj_idx, &roofs, &group, epoch));
        }
    }
    out.retain(|o| inp.map.tile_of(o.centroid.0, o.centroid.1).is_some_and(|(r, c)| inp.map.state(r, c) != TileState::Invalid));
    Ok(out)
}

fn centroid(points: &[Point3], ids: &[usize]) -> (f64, f64) {
    let n = ids.len() as f64;
    let (sx, sy) = ids.iter().fold((0.0, 0.0), |(sx, sy), &i| (sx + points[i].x, sy + points[i].y));
    (sx / n, sy / n)
}

fn tree_object(
    obj: &[Point3],
    s: &Segment,
    epoch: Epoch,
    other: &IndexedCloud,
    inp: &ObjectInputs,
    p: &ObjectParams,
) -> Result<Option<ObjectChange>> {
    debug_assert_eq!(s.kind, SegmentKind::Clutter);
    // the other epoch still shows a canopy here: not a candidate
    let hull = hull_of(obj, &s.points);
    let under = other.within_hull(&hull, 0.0);
    if !under.is_empty() {
        let high = under
            .iter()
            .filter(|&&i| {
                let q = &other.cloud.points[i];
                inp.dtm.sample(q.x, q.y).is_some_and(|g| q.z - g >= p.rules.tree_min_height)
            })
            .count();
        if high as f64 / under.len() as f64 >= p.verify.canopy_presence_max {
            return Ok(None);
        }
    }
    let sp: Vec<Point3> = s.points.iter().map(|&i| obj[i]).collect();
    let (green, evidence) = match verify_tree(&sp, inp.ortho, inp.images, &p.verify) {
        Ok(t) => (!t.changed, Some(t.vegetation_fraction)),
        // keep the classifier's decision
        Err(Error::VerificationImpossible(_)) => (false, None),
        Err(e) => return Err(e),
    };
    let status = match (epoch, green) {
        (Epoch::A, true) | (Epoch::B, false) => ChangeStatus::UnchangedAfterVerification,
        (Epoch::A, false) => ChangeStatus::Demolished,
        (Epoch::B, true) => ChangeStatus::New,
    };
    Ok(Some(ObjectChange {
        id: 0,
        class: ObjectClass::Tree,
        status,
        epoch,
        centroid: centroid(obj, &s.points),
        evidence: Evidence::VegetationFraction(evidence),
        points: Vec::new(),
    }))
}

/// Roof parts whose points come within 1 m of each other (xy) form one building.
fn group_roof_parts(obj: &[Point3], roofs: &[RoofPart]) -> Vec<Vec<usize>> {
    let n = roofs.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], i: usize) -> usize {
        let mut r = i;
        while p[r] != r {
            r = p[r];
        }
        p[i] = r;
        r
    }
    let touch = |a: &RoofPart, b: &RoofPart| {
        a.ids.iter().any(|&i| b.ids.iter().any(|&j| (obj[i].x - obj[j].x).powi(2) + (obj[i].y - obj[j].y).powi(2) <= 1.0))
    };
    for i in 0..n {
        for j in i + 1..n {
            if find(&mut parent, i) != find(&mut parent, j) && touch(&roofs[i], &roofs[j]) {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                parent[rj.max(ri)] = ri.min(rj);
            }
        }
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut slot = vec![usize::MAX; n];
    for i in 0..n {
        let r = find(&mut parent, i);
        if slot[r] == usize::MAX {
            slot[r] = groups.len();
            groups.push(Vec::new());
        }
        groups[slot[r]].push(i);
    }
    groups
}

fn building_object(obj: &[Point3], obj_idx: &[usize], roofs: &[RoofPart], group: &[usize], epoch: Epoch) -> ObjectChange {
    let (mut w_changed, mut w_total) = (0usize, 0usize);
    let mut ids: Vec<usize> = Vec::new();
    for &g in group {
        let part = &roofs[g];
        w_total += part.ids.len();
        if part.check.changed {
            w_changed += part.ids.len();
        }
        ids.extend(&part.ids);
    }
    ids.sort_unstable();
    let largest = group.iter().map(|&g| &roofs[g]).max_by_key(|r| r.ids.len()).expect("group is non-empty");
    let changed = 2 * w_changed > w_total;
    let status = match (changed, epoch) {
        (false, _) => ChangeStatus::UnchangedAfterVerification,
        (true, Epoch::A) => ChangeStatus::Demolished,
        (true, Epoch::B) => ChangeStatus::New,
    };
    ObjectChange {
        id: 0,
        class: ObjectClass::Building,
        status,
        epoch,
        centroid: centroid(obj, &ids),
        evidence: Evidence::PlaneDistance(largest.check.plane_distance),
        points: ids.iter().map(|&i| obj_idx[i]).collect(),
    }
}

/// Runs [`detect_objects`] on every ROI, drops duplicates of the same object
/// seen from two ROIs and numbers the result from 1.
pub fn detect_all(rois: &[RegionOfInterest], inp: &ObjectInputs, p: &ObjectParams) -> Result<Vec<ObjectChange>> {
    let per_roi: Vec<Result<Vec<ObjectChange>>> = rois.par_iter().map(|r| detect_objects(r, inp, p)).collect();
    let mut all: Vec<ObjectChange> = Vec::new();
    for r in per_roi {
        for o in r? {
            let dup = all.iter().position(|k| {
                k.class == o.class
                    && k.epoch == o.epoch
                    && (k.centroid.0 - o.centroid.0).hypot(k.centroid.1 - o.centroid.1) < 2.0
            });
            match dup {
                Some(k) if all[k].points.len() >= o.points.len() => {}
                Some(k) => all[k] = o,
                None => all.push(o),
            }
        }
    }
    for (i, o) in all.iter_mut().enumerate() {
        o.id = i + 1;
    }
    Ok(all)
}

pub const REPORT_HEADER: &str = "object_id,class,status,epoch,centroid_x,centroid_y,evidence_value";

pub fn report_csv(objects: &[ObjectChange]) -> String {
    let mut s = format!("{REPORT_HEADER}\n");
    for o in objects {
        let ev = o.evidence.value().map_or_else(|| "na".to_string(), |v| format!("{v:.4}"));
        s.push_str(&format!(
            "{},{},{},{},{:.3},{:.3},{ev}\n",
            o.id, o.class, o.status, o.epoch, o.centroid.0, o.centroid.1
        ));
    }
    s
}

pub fn write_report(path: &Path, objects: &[ObjectChange]) -> Result<()> {
    fs::write(path, report_csv(objects)).map_err(|e| Error::io(path, e))
}

/// A report row as read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub id: usize,
    pub class: ObjectClass,
    pub status: ChangeStatus,
    pub epoch: Epoch,
    pub centroid: (f64, f64),
    pub evidence: Option<f64>,
}

pub fn load_report(path: &Path) -> Result<Vec<ReportRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let perr = |line: usize, msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(perr(i + 1, format!("expected 7 fields, found {}", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| perr(i + 1, format!("bad number {s:?}")));
        out.push(ReportRow {
            id: f[0].parse().map_err(|_| perr(i + 1, format!("bad id {:?}", f[0])))?,
            class: match f[1] {
                "building" => ObjectClass::Building,
                "tree" => ObjectClass::Tree,
                s => return Err(perr(i + 1, format!("bad class {s:?}"))),
            },
            status: match f[2] {
                "new" => ChangeStatus::New,
                "demolished" => ChangeStatus::Demolished,
                "unchanged_after_verification" => ChangeStatus::UnchangedAfterVerification,
                s => return Err(perr(i + 1, format!("bad status {s:?}"))),
            },
            epoch: match f[3] {
                "a" => Epoch::A,
                "b" => Epoch::B,
                s => return Err(perr(i + 1, format!("bad epoch {s:?}"))),
            },
            centroid: (num(f[4])?, num(f[5])?),
            evidence: if f[6] == "na" { None } else { Some(num(f[6])?) },
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pointcloud_io::Source;
    use crate::raster::GrayPatch;
    use crate::segmentation::tests::{blob, planted_plane};
    use nalgebra::Vector3;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn map_with(rows: usize, cols: usize, changed: &[(usize, usize)]) -> ChangeMap {
        let mut states = vec![TileState::Unchanged; rows * cols];
        for &(r, c) in changed {
            states[r * cols + c] = TileState::Changed;
        }
        ChangeMap { rows, cols, origin: (0.0, rows as f64 * 10.0), tile: 10.0, states, scores: vec![None; rows * cols] }
    }

    fn pair_at(r: usize, c: usize, valid: bool) -> PatchPair {
        let p = GrayPatch::uniform(2, 0);
        PatchPair { a: p.clone(), b: p, tile: (r, c), tile_xy: (0.0, 0.0), label: None, valid }
    }

    #[test]
    fn change_map_records_results() {
        let grid = GridSpec::new((0.0, 40.0), 5.0, 8, 8).unwrap();
        let pairs: Vec<PatchPair> = (0..4).flat_map(|r| (0..4).map(move |c| pair_at(r, c, (r, c) != (0, 0)))).collect();
        let res: Vec<(Decision, Option<f64>)> = pairs
            .iter()
            .map(|p| if p.tile == (2, 3) { (Decision::Changed, Some(1.2)) } else { (Decision::Unchanged, Some(0.1)) })
            .collect();
        let m = build_change_map(&grid, 10.0, &pairs, &res).unwrap();
        assert_eq!((m.rows, m.cols), (4, 4));
        assert_eq!(m.state(2, 3), TileState::Changed);
        assert_eq!(m.state(0, 0), TileState::Invalid);
        assert_eq!(m.counts(), (1, 14, 1));
        assert_eq!(m.scores[2 * 4 + 3], Some(1.2));
        let all_unchanged = vec![(Decision::Unchanged, None); 16];
        assert_eq!(build_change_map(&grid, 10.0, &pairs, &all_unchanged).unwrap().counts().0, 0);
        assert!(matches!(build_change_map(&grid, 10.0, &pairs, &res[1..]), Err(Error::Shape { .. })));
    }

    #[test]
    fn change_map_files() {
        let mut m = map_with(3, 4, &[(1, 2)]);
        m.states[0] = TileState::Invalid;
        m.scores[6] = Some(0.75);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("map.csv");
        m.save_csv(&p).unwrap();
        assert_eq!(ChangeMap::load_csv(&p).unwrap(), m);
        let pgm = dir.path().join("map.pgm");
        m.save_pgm(&pgm).unwrap();
        let (w, h, ch, data) = crate::raster::read_pnm(&pgm).unwrap();
        assert_eq!((w, h, ch), (4, 3, 1));
        assert_eq!((data[0], data[6], data[1]), (128, 255, 0));
    }

    #[test]
    fn single_tile_roi_is_twenty_meters() {
        let rois = group_rois(&map_with(5, 5, &[(2, 2)]), 10.0);
        assert_eq!(rois.len(), 1);
        let r = rois[0].rect;
        assert_eq!((r.width(), r.height()), (20.0, 20.0));
        assert_eq!((r.min_x, r.max_y), (15.0, 35.0));
    }

    #[test]
    fn diagonal_tiles_connect() {
        let rois = group_rois(&map_with(5, 5, &[(1, 1), (2, 2)]), 10.0);
        assert_eq!(rois.len(), 1);
        assert_eq!(rois[0].tiles, vec![(1, 1), (2, 2)]);
        assert_eq!(group_rois(&map_with(8, 8, &[(1, 1), (1, 6)]), 10.0).len(), 2);
    }

    #[test]
    fn overlapping_expansions_merge() {
        // one empty tile between: the expanded boxes only touch
        assert_eq!(group_rois(&map_with(5, 5, &[(0, 0), (0, 2)]), 10.0).len(), 2);
        // a larger expansion makes them overlap
        assert_eq!(group_rois(&map_with(5, 5, &[(0, 0), (0, 2)]), 14.0).len(), 1);
    }

    /// Union-find over changed tiles with 8-neighbor links.
    fn components_oracle(m: &ChangeMap) -> Vec<Vec<(usize, usize)>> {
        let n = m.rows * m.cols;
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut Vec<usize>, i: usize) -> usize {
            if p[i] != i {
                let r = find(p, p[i]);
                p[i] = r;
            }
            p[i]
        }
        for i in 0..n {
            for j in 0..n {
                let (ri, ci, rj, cj) = (i / m.cols, i % m.cols, j / m.cols, j % m.cols);
                if m.states[i] == TileState::Changed
                    && m.states[j] == TileState::Changed
                    && ri.abs_diff(rj) <= 1
                    && ci.abs_diff(cj) <= 1
                {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    parent[a] = b;
                }
            }
        }
        let mut groups: std::collections::BTreeMap<usize, Vec<(usize, usize)>> = Default::default();
        for i in (0..n).filter(|&i| m.states[i] == TileState::Changed) {
            let r = find(&mut parent, i);
            groups.entry(r).or_default().push((i / m.cols, i % m.cols));
        }
        groups.into_values().collect()
    }

    proptest! {
        #[test]
        fn every_changed_tile_in_exactly_one_roi(bits in proptest::collection::vec(any::<bool>(), 64)) {
            let changed: Vec<(usize, usize)> = (0..64).filter(|&i| bits[i] && i % 3 == 0).map(|i| (i / 8, i % 8)).collect();
            let m = map_with(8, 8, &changed);
            let rois = group_rois(&m, 10.0);
            let mut seen: Vec<(usize, usize)> = rois.iter().flat_map(|r| r.tiles.clone()).collect();
            seen.sort_unstable();
            prop_assert_eq!(seen, changed.clone());
            for r in &rois {
                for &(tr, tc) in &r.tiles {
                    let tb = m.tile_bounds(tr, tc);
                    prop_assert!(r.rect.min_x <= tb.min_x - 5.0 + 1e-9 && r.rect.max_x >= tb.max_x + 5.0 - 1e-9);
                    prop_assert!(r.rect.min_y <= tb.min_y - 5.0 + 1e-9 && r.rect.max_y >= tb.max_y + 5.0 - 1e-9);
                }
            }
            for i in 0..rois.len() {
                for j in i + 1..rois.len() {
                    prop_assert!(!rois[i].rect.intersects(&rois[j].rect));
                }
            }
            // every 8-connected component sits inside a single ROI
            for comp in components_oracle(&m) {
                let owner = rois.iter().position(|r| r.tiles.contains(&comp[0])).unwrap();
                prop_assert!(comp.iter().all(|t| rois[owner].tiles.contains(t)));
            }
        }

        #[test]
        fn negi_is_scale_invariant(r in 1u8..=25, g in 0u8..=25, b in 0u8..=25, k in 1u8..=10) {
            let a = negi(r, g, b).unwrap();
            let s = negi(r * k, g * k, b * k).unwrap();
            prop_assert!((a - s).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&a));
        }
    }

    #[test]
    fn negi_examples() {
        assert_eq!(negi(0, 255, 0), Some(1.0));
        assert_eq!(negi(100, 100, 100), Some(0.0));
        assert!((negi(50, 150, 30).unwrap() - 220.0 / 380.0).abs() < 1e-12);
        assert_eq!(negi(0, 0, 0), None);
        assert!(!is_vegetation([0, 0, 0], 0.1));
    }

    fn roof_patch(z: f64, sigma: f64, density: f64, seed: u64) -> Vec<Point3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        planted_plane(Vector3::new(0.0, 0.0, z), Vector3::x(), Vector3::y(), (10.0, 8.0), density, sigma, &mut rng)
    }

    fn horizontal(z: f64) -> PlaneModel {
        PlaneModel { normal: Vector3::z(), d: z, inliers: Vec::new() }
    }

    #[test]
    fn roof_against_same_plane_is_unchanged() {
        let seg = roof_patch(6.0, 0.02, 10.0, 1);
        let other = PointCloud::new(roof_patch(6.0, 0.02, 15.0, 2), Source::DenseMatching);
        let idx = IndexedCloud::new(&other);
        let c = verify_roof(&seg, &horizontal(6.0), &idx, &VerifyParams::default());
        assert!(!c.changed);
        assert!(c.plane_distance.unwrap() < 0.05);
    }

    #[test]
    fn roof_offsets() {
        let seg = roof_patch(6.0, 0.02, 10.0, 1);
        for (dz, expect) in [(1.0, true), (0.3, false), (0.8, true), (-0.8, true)] {
            let other = PointCloud::new(roof_patch(6.0 + dz, 0.02, 15.0, 3), Source::DenseMatching);
            let c = verify_roof(&seg, &horizontal(6.0), &IndexedCloud::new(&other), &VerifyParams::default());
            assert_eq!(c.changed, expect, "offset {dz}");
        }
    }

    #[test]
    fn roof_without_counterpart_is_changed() {
        let seg = roof_patch(6.0, 0.02, 10.0, 1);
        let far = PointCloud::new(vec![Point3::new(100.0, 100.0, 0.0); 50], Source::Laser);
        let c = verify_roof(&seg, &horizontal(6.0), &IndexedCloud::new(&far), &VerifyParams::default());
        assert!(c.changed);
        assert_eq!((c.plane_distance, c.support), (None, 0));
    }

    #[test]
    fn dilated_hull_membership() {
        let sq = convex_hull(&[(0.0, 0.0), (2.0, 0.0), (2.0, 2.0), (0.0, 2.0)]);
        assert_eq!(hull_distance(&sq, 1.0, 1.0), 0.0);
        assert!((hull_distance(&sq, 2.4, 1.0) - 0.4).abs() < 1e-12);
        assert!((hull_distance(&sq, 3.0, 3.0) - 2f64.sqrt()).abs() < 1e-12);
        let cloud = PointCloud::new(
            vec![Point3::new(1.0, 1.0, 0.0), Point3::new(2.4, 1.0, 0.0), Point3::new(2.6, 1.0, 0.0)],
            Source::Laser,
        );
        assert_eq!(IndexedCloud::new(&cloud).within_hull(&sq, 0.5), vec![0, 1]);
    }

    fn ortho_filled(rgb: [u8; 3]) -> RgbRaster {
        let spec = GridSpec::new((0.0, 10.0), 0.1, 100, 100).unwrap();
        RgbRaster { spec, pixels: vec![rgb; spec.len()] }
    }

    fn crown(seed: u64) -> Vec<Point3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        blob(Vector3::new(5.0, 5.0, 8.0), 2.5, 300, &mut rng)
    }

    #[test]
    fn tree_on_green_ortho_is_unchanged() {
        let t = verify_tree(&crown(1), &ortho_filled([60, 160, 50]), &[], &VerifyParams::default()).unwrap();
        assert!(!t.changed);
        assert_eq!(t.vegetation_fraction, 1.0);
    }

    #[test]
    fn tree_on_gray_ortho_is_changed() {
        let t = verify_tree(&crown(1), &ortho_filled([120, 120, 120]), &[], &VerifyParams::default()).unwrap();
        assert!(t.changed);
        assert_eq!(t.vegetation_fraction, 0.0);
    }

    #[test]
    fn half_green_resolves_to_changed() {
        let mut o = ortho_filled([120, 120, 120]);
        let w = o.spec.width;
        for r in 0..o.spec.height {
            for c in 0..w / 2 {
                o.pixels[r * w + c] = [60, 160, 50];
            }
        }
        // two points, one per half
        let pts = [Point3::new(2.0, 5.0, 8.0), Point3::new(8.0, 5.0, 8.0)];
        let t = verify_tree(&pts, &o, &[], &VerifyParams::default()).unwrap();
        assert_eq!(t.vegetation_fraction, 0.5);
        assert!(t.changed);
    }

    #[test]
    fn tree_outside_every_image_is_unverifiable() {
        let pts = [Point3::new(50.0, 50.0, 8.0)];
        let r = verify_tree(&pts, &ortho_filled([60, 160, 50]), &[], &VerifyParams::default());
        assert!(matches!(r, Err(Error::VerificationImpossible(_))));
    }

    #[test]
    fn camera_samples_count() {
        use nalgebra::{Matrix3, Vector3 as V};
        // nadir camera looking at the ortho footprint, image all gray
        let cam = CameraModel::new(
            Matrix3::new(100.0, 0.0, 49.5, 0.0, 100.0, 49.5, 0.0, 0.0, 1.0),
            Matrix3::from_diagonal(&V::new(1.0, -1.0, -1.0)),
            V::new(5.0, 5.0, 18.0),
            100,
            100,
        )
        .unwrap();
        let img = CameraImage { camera: cam, width: 100, height: 100, pixels: vec![[120, 120, 120]; 10_000] };
        let t = verify_tree(&crown(2), &ortho_filled([60, 160, 50]), &[img], &VerifyParams::default()).unwrap();
        assert_eq!(t.samples, 600);
        assert!((t.vegetation_fraction - 0.5).abs() < 1e-12);
    }

    #[test]
    fn verify_params_validation() {
        assert!(VerifyParams::default().validate().is_ok());
        let bad = VerifyParams { vegetation_fraction_min: 1.0, ..Default::default() };
        assert!(matches!(bad.validate(), Err(Error::Config(m)) if m.contains("vegetation_fraction_min")));
        let bad = VerifyParams { roof_dist_threshold: -0.5, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    // A 40 m scene: ground at z = 0 with a flat 8 x 12 m building and a tree.
    struct Planted {
        ground: Vec<Point3>,
        roof: Vec<Point3>,
        tree: Vec<Point3>,
    }

    fn planted(seed: u64, sigma: f64) -> Planted {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, sigma.max(1e-9)).unwrap();
        let in_bldg = |x: f64, y: f64| (10.0..18.0).contains(&x) && (14.0..26.0).contains(&y);
        let in_tree = |x: f64, y: f64| (x - 30.0).hypot(y - 20.0) < 3.0;
        let mut ground = Vec::new();
        for _ in 0..(40 * 40 * 8) {
            let (x, y) = (rng.gen_range(0.0..40.0), rng.gen_range(0.0..40.0));
            if !in_bldg(x, y) && !in_tree(x, y) {
                ground.push(Point3::new(x, y, noise.sample(&mut rng)));
            }
        }
        let roof: Vec<Point3> = (0..(8 * 12 * 8))
            .map(|_| Point3::new(rng.gen_range(10.0..18.0), rng.gen_range(14.0..26.0), 7.0 + noise.sample(&mut rng)))
            .collect();
        let tree = blob(Vector3::new(30.0, 20.0, 8.0), 3.0, 300, &mut rng);
        Planted { ground, roof, tree }
    }

    fn whole_map(state: TileState) -> ChangeMap {
        ChangeMap { rows: 4, cols: 4, origin: (0.0, 40.0), tile: 10.0, states: vec![state; 16], scores: vec![None; 16] }
    }

    fn flat_dtm() -> RasterGrid {
        let spec = GridSpec::new((0.0, 40.0), 0.5, 80, 80).unwrap();
        RasterGrid { spec, values: vec![0.0; spec.len()], empty: vec![false; spec.len()] }
    }

    fn roi_all() -> RegionOfInterest {
        RegionOfInterest { tiles: vec![(1, 1)], rect: Bounds2 { min_x: 0.0, min_y: 0.0, max_x: 40.0, max_y: 40.0 } }
    }

    fn green_where_tree(tree_green: bool) -> RgbRaster {
        let spec = GridSpec::new((0.0, 40.0), 0.1, 400, 400).unwrap();
        let mut px = vec![[120u8, 120, 120]; spec.len()];
        if tree_green {
            for r in 0..400 {
                for c in 0..400 {
                    let (x, y) = spec.cell_center(r, c);
                    if (x - 30.0).hypot(y - 20.0) < 3.5 {
                        px[r * 400 + c] = [60, 160, 50];
                    }
                }
            }
        }
        RgbRaster { spec, pixels: px }
    }

    #[test]
    fn demolished_building_and_false_tree_change() {
        // epoch A has building and tree; epoch B has bare ground there but the
        // ortho still shows the tree
        let s = planted(5, 0.02);
        let a = PointCloud::new([s.ground.clone(), s.roof.clone(), s.tree.clone()].concat(), Source::Laser);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let b_pts: Vec<Point3> =
            (0..(40 * 40 * 8)).map(|_| Point3::new(rng.gen_range(0.0..40.0), rng.gen_range(0.0..40.0), 0.0)).collect();
        let b = PointCloud::new(b_pts, Source::DenseMatching);
        let dtm = flat_dtm();
        let ortho = green_where_tree(true);
        let map = whole_map(TileState::Changed);
        let inp = ObjectInputs::new(&a, &b, &dtm, &ortho, &[], &map);
        let objs = detect_all(&[roi_all()], &inp, &ObjectParams::default()).unwrap();
        let bldg: Vec<_> = objs.iter().filter(|o| o.class == ObjectClass::Building).collect();
        assert_eq!(bldg.len(), 1, "{objs:?}");
        assert_eq!((bldg[0].status, bldg[0].epoch), (ChangeStatus::Demolished, Epoch::A));
        assert!((bldg[0].centroid.0 - 14.0).abs() < 0.5 && (bldg[0].centroid.1 - 20.0).abs() < 0.5);
        let trees: Vec<_> = objs.iter().filter(|o| o.class == ObjectClass::Tree).collect();
        assert_eq!(trees.len(), 1, "{objs:?}");
        assert_eq!(trees[0].status, ChangeStatus::UnchangedAfterVerification);

        // same data with a gray ortho: the tree is gone
        let gray = green_where_tree(false);
        let inp = ObjectInputs::new(&a, &b, &dtm, &gray, &[], &map);
        let objs = detect_all(&[roi_all()], &inp, &ObjectParams::default()).unwrap();
        let t = objs.iter().find(|o| o.class == ObjectClass::Tree).unwrap();
        assert_eq!(t.status, ChangeStatus::Demolished);

        // invalid tiles suppress every object
        let inv = whole_map(TileState::Invalid);
        let inp = ObjectInputs::new(&a, &b, &dtm, &ortho, &[], &inv);
        assert!(detect_all(&[roi_all()], &inp, &ObjectParams::default()).unwrap().is_empty());
    }

    #[test]
    fn new_building_is_sourced_from_b() {
        let s = planted(6, 0.02);
        let a = PointCloud::new(s.ground.clone(), Source::Laser);
        let b = PointCloud::new([s.ground, s.roof].concat(), Source::DenseMatching);
        let dtm = flat_dtm();
        let ortho = green_where_tree(false);
        let map = whole_map(TileState::Changed);
        let inp = ObjectInputs::new(&a, &b, &dtm, &ortho, &[], &map);
        let objs = detect_all(&[roi_all()], &inp, &ObjectParams::default()).unwrap();
        assert_eq!(objs.len(), 1, "{objs:?}");
        assert_eq!((objs[0].class, objs[0].status, objs[0].epoch), (ObjectClass::Building, ChangeStatus::New, Epoch::B));
        assert!(objs[0].evidence.value().unwrap() > 5.0);
    }

    #[test]
    fn unchanged_scene_has_no_changes() {
        let s = planted(7, 0.02);
        let a = PointCloud::new([s.ground.clone(), s.roof.clone(), s.tree.clone()].concat(), Source::Laser);
        let s2 = planted(8, 0.02);
        let b = PointCloud::new([s2.ground, s2.roof, s2.tree].concat(), Source::DenseMatching);
        let dtm = flat_dtm();
        let ortho = green_where_tree(true);
        let map = whole_map(TileState::Changed);
        let inp = ObjectInputs::new(&a, &b, &dtm, &ortho, &[], &map);
        let objs = detect_all(&[roi_all()], &inp, &ObjectParams::default()).unwrap();
        assert!(objs.iter().all(|o| o.status == ChangeStatus::UnchangedAfterVerification), "{objs:?}");
        // both epochs see the building; trees with a canopy in the other epoch are not candidates
        assert_eq!(objs.iter().filter(|o| o.class == ObjectClass::Building).count(), 2);
        assert_eq!(objs.iter().filter(|o| o.class == ObjectClass::Tree).count(), 0);
    }

    #[test]
    fn sparse_roi_yields_nothing() {
        let a = PointCloud::new(vec![Point3::new(1.0, 1.0, 0.0); 5], Source::Laser);
        let b = a.clone();
        let dtm = flat_dtm();
        let ortho = green_where_tree(false);
        let map = whole_map(TileState::Changed);
        let inp = ObjectInputs::new(&a, &b, &dtm, &ortho, &[], &map);
        assert!(detect_objects(&roi_all(), &inp, &ObjectParams::default()).unwrap().is_empty());
    }

    #[test]
    fn report_round_trip() {
        let objs = vec![
            ObjectChange {
                id: 1,
                class: ObjectClass::Building,
                status: ChangeStatus::New,
                epoch: Epoch::B,
                centroid: (12.5, 30.25),
                evidence: Evidence::PlaneDistance(Some(6.5)),
                points: vec![],
            },
            ObjectChange {
                id: 2,
                class: ObjectClass::Tree,
                status: ChangeStatus::UnchangedAfterVerification,
                epoch: Epoch::A,
                centroid: (1.0, 2.0),
                evidence: Evidence::VegetationFraction(None),
                points: vec![],
            },
        ];
        let csv = report_csv(&objs);
        assert!(csv.starts_with(REPORT_HEADER));
        assert!(csv.contains("2,tree,unchanged_after_verification,a,1.000,2.000,na"));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        write_report(&p, &objs).unwrap();
        let rows = load_report(&p).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!((rows[0].class, rows[0].status, rows[0].evidence), (ObjectClass::Building, ChangeStatus::New, Some(6.5)));
    }
}
