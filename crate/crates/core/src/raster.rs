//! DSM / nDSM rasters, the height-to-gray transfer, gap conjugation, patch
//! tiling and augmentation.
//!
//! Rasters are north-up and row-major: row 0 lies at the maximum y of the
//! grid, `origin` is the top-left corner. Empty cells are tracked in a
//! separate mask and never carry a sentinel height.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::pointcloud_io::{Bounds2, PointCloud};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    /// Top-left corner (min x, max y).
    pub origin: (f64, f64),
    pub cell: f64,
    pub width: usize,
    pub height: usize,
}

impl GridSpec {
    pub fn new(origin: (f64, f64), cell: f64, width: usize, height: usize) -> Result<Self> {
        if !(cell > 0.0) || !cell.is_finite() {
            return Err(Error::Config(format!("raster cell size must be positive, got {cell}")));
        }
        Ok(GridSpec { origin, cell, width, height })
    }

    /// Smallest grid anchored at `b`'s top-left corner that covers `b`.
    pub fn covering(b: &Bounds2, cell: f64) -> Result<Self> {
        if !(cell > 0.0) {
            return Err(Error::Config(format!("raster cell size must be positive, got {cell}")));
        }
        let width = ((b.width() / cell) - 1e-9).ceil().max(1.0) as usize;
        let height = ((b.height() / cell) - 1e-9).ceil().max(1.0) as usize;
        GridSpec::new((b.min_x, b.max_y), cell, width, height)
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn bounds(&self) -> Bounds2 {
        Bounds2 {
            min_x: self.origin.0,
            max_y: self.origin.1,
            max_x: self.origin.0 + self.width as f64 * self.cell,
            min_y: self.origin.1 - self.height as f64 * self.cell,
        }
    }

    /// (row, col) of the cell containing (x, y), if inside the grid.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let c = ((x - self.origin.0) / self.cell).floor();
        let r = ((self.origin.1 - y) / self.cell).floor();
        if c < 0.0 || r < 0.0 || c >= self.width as f64 || r >= self.height as f64 {
            None
        } else {
            Some((r as usize, c as usize))
        }
    }

    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.origin.0 + (col as f64 + 0.5) * self.cell,
            self.origin.1 - (row as f64 + 0.5) * self.cell,
        )
    }

    fn same_geometry(&self, other: &GridSpec) -> bool {
        self.width == other.width
            && self.height == other.height
            && (self.cell - other.cell).abs() <= 1e-12 * self.cell
            && (self.origin.0 - other.origin.0).abs() <= 1e-9
            && (self.origin.1 - other.origin.1).abs() <= 1e-9
    }

    pub fn check_same(&self, other: &GridSpec) -> Result<()> {
        if self.same_geometry(other) {
            Ok(())
        } else {
            Err(Error::Geometry(format!("{self:?} vs {other:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RasterGrid {
    pub spec: GridSpec,
    pub values: Vec<f64>,
    pub empty: Vec<bool>,
}

impl RasterGrid {
    pub fn new_empty(spec: GridSpec) -> Self {
        RasterGrid { spec, values: vec![0.0; spec.len()], empty: vec![true; spec.len()] }
    }

    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        let i = row * self.spec.width + col;
        (!self.empty[i]).then_some(self.values[i])
    }

    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        let i = row * self.spec.width + col;
        self.values[i] = v;
        self.empty[i] = false;
    }

    /// Value of the cell containing (x, y).
    pub fn sample(&self, x: f64, y: f64) -> Option<f64> {
        self.spec.cell_of(x, y).and_then(|(r, c)| self.get(r, c))
    }

    pub fn empty_fraction(&self) -> f64 {
        self.empty.iter().filter(|&&e| e).count() as f64 / self.empty.len().max(1) as f64
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        let io = |e| Error::io(path, e);
        w.write_all(b"DMRG").map_err(io)?;
        w.write_all(&1u32.to_le_bytes()).map_err(io)?;
        for v in [self.spec.origin.0, self.spec.origin.1, self.spec.cell] {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        w.write_all(&(self.spec.width as u32).to_le_bytes()).map_err(io)?;
        w.write_all(&(self.spec.height as u32).to_le_bytes()).map_err(io)?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        let mask: Vec<u8> = self.empty.iter().map(|&e| e as u8).collect();
        w.write_all(&mask).map_err(io)?;
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |m: &str| Error::Data(format!("{}: {m}", path.display()));
        if bytes.len() < 40 || &bytes[0..4] != b"DMRG" {
            return Err(bad("not a raster file"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        if u32_at(4) != 1 {
            return Err(bad("unsupported raster version"));
        }
        let spec = GridSpec::new((f64_at(8), f64_at(16)), f64_at(24), u32_at(32) as usize, u32_at(36) as usize)?;
        let n = spec.len();
        if bytes.len() != 40 + n * 9 {
            return Err(bad("truncated raster"));
        }
        let values = (0..n).map(|i| f64_at(40 + i * 8)).collect();
        let empty = bytes[40 + n * 8..].iter().map(|&b| b != 0).collect();
        Ok(RasterGrid { spec, values, empty })
    }
}

/// Per-cell maximum z; cells without points stay empty.
pub fn rasterize_dsm(cloud: &PointCloud, spec: &GridSpec) -> Result<RasterGrid> {
    rasterize_dsm_footprint(cloud, spec, 0.0)
}

/// Like [`rasterize_dsm`], but each point also contributes to every cell whose
/// center lies within `footprint` meters of it. `footprint = 0` is plain
/// per-cell rasterization.
pub fn rasterize_dsm_footprint(cloud: &PointCloud, spec: &GridSpec, footprint: f64) -> Result<RasterGrid> {
    if !(spec.cell > 0.0) {
        return Err(Error::Config(format!("raster cell size must be positive, got {}", spec.cell)));
    }
    if !(footprint >= 0.0) {
        return Err(Error::Config(format!("point footprint must be >= 0, got {footprint}")));
    }
    let mut out = RasterGrid::new_empty(*spec);
    let w = spec.width;
    let bump = |out: &mut RasterGrid, i: usize, z: f64| {
        if out.empty[i] || z > out.values[i] {
            out.values[i] = z;
            out.empty[i] = false;
        }
    };
    let reach = (footprint / spec.cell).ceil() as i64 + 1;
    let f2 = footprint * footprint;
    for p in &cloud.points {
        if let Some((r, c)) = spec.cell_of(p.x, p.y) {
            bump(&mut out, r * w + c, p.z);
        }
        if footprint > 0.0 {
            let cc = ((p.x - spec.origin.0) / spec.cell).floor() as i64;
            let rr = ((spec.origin.1 - p.y) / spec.cell).floor() as i64;
            for r in (rr - reach).max(0)..=(rr + reach).min(spec.height as i64 - 1) {
                let cy = spec.origin.1 - (r as f64 + 0.5) * spec.cell;
                for c in (cc - reach).max(0)..=(cc + reach).min(spec.width as i64 - 1) {
                    let cx = spec.origin.0 + (c as f64 + 0.5) * spec.cell;
                    if (cx - p.x).powi(2) + (cy - p.y).powi(2) <= f2 {
                        bump(&mut out, r as usize * w + c as usize, p.z);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// nDSM = DSM - DTM; empty in either input stays empty.
pub fn normalize_dsm(dsm: &RasterGrid, dtm: &RasterGrid) -> Result<RasterGrid> {
    dsm.spec.check_same(&dtm.spec)?;
    let mut out = RasterGrid::new_empty(dsm.spec);
    for i in 0..dsm.values.len() {
        if !dsm.empty[i] && !dtm.empty[i] {
            out.values[i] = dsm.values[i] - dtm.values[i];
            out.empty[i] = false;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrayTransferParams {
    /// Steepness.
    pub q: f64,
    /// Truncation height, m.
    pub t: f64,
}

impl Default for GrayTransferParams {
    fn default() -> Self {
        GrayTransferParams { q: 10.0, t: -2.0 }
    }
}

impl GrayTransferParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.q > 0.0) || !self.t.is_finite() {
            return Err(Error::Config(format!("gray.q must be > 0 (got {}), gray.t finite (got {})", self.q, self.t)));
        }
        Ok(())
    }
}

/// `255 (x - t) / ((x - t) + q)` rounded half-up, 0 below `t`.
pub fn height_to_gray(x: f64, p: &GrayTransferParams) -> u8 {
    if !(x >= p.t) {
        return 0;
    }
    let s = x - p.t;
    let v = 255.0 * s / (s + p.q);
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Unchanged,
    Changed,
}

impl Label {
    pub fn value(self) -> f64 {
        match self {
            Label::Unchanged => 0.0,
            Label::Changed => 1.0,
        }
    }

    pub fn from_flag(changed: bool) -> Self {
        if changed {
            Label::Changed
        } else {
            Label::Unchanged
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrayPatch {
    pub size: usize,
    pub pixels: Vec<u8>,
    pub gap: Vec<bool>,
    /// (row, col) of the top-left pixel in the parent raster.
    pub anchor: (usize, usize),
}

impl GrayPatch {
    pub fn new(size: usize, pixels: Vec<u8>, gap: Vec<bool>, anchor: (usize, usize)) -> Result<Self> {
        if pixels.len() != size * size || gap.len() != size * size {
            return Err(Error::Shape {
                expected: format!("{} pixels", size * size),
                got: format!("{} pixels, {} mask entries", pixels.len(), gap.len()),
            });
        }
        Ok(GrayPatch { size, pixels, gap, anchor })
    }

    pub fn uniform(size: usize, value: u8) -> Self {
        GrayPatch { size, pixels: vec![value; size * size], gap: vec![false; size * size], anchor: (0, 0) }
    }

    pub fn gap_fraction(&self) -> f64 {
        self.gap.iter().filter(|&&g| g).count() as f64 / self.gap.len().max(1) as f64
    }

    fn remap(&self, f: impl Fn(usize, usize) -> (usize, usize)) -> GrayPatch {
        let s = self.size;
        let mut pixels = vec![0u8; s * s];
        let mut gap = vec![false; s * s];
        for r in 0..s {
            for c in 0..s {
                let (sr, sc) = f(r, c);
                pixels[r * s + c] = self.pixels[sr * s + sc];
                gap[r * s + c] = self.gap[sr * s + sc];
            }
        }
        GrayPatch { size: s, pixels, gap, anchor: self.anchor }
    }

    /// Mirror left-right.
    pub fn flip_h(&self) -> GrayPatch {
        let s = self.size;
        self.remap(|r, c| (r, s - 1 - c))
    }

    /// Mirror top-bottom.
    pub fn flip_v(&self) -> GrayPatch {
        let s = self.size;
        self.remap(|r, c| (s - 1 - r, c))
    }

    /// Rotate 90 degrees clockwise.
    pub fn rot90(&self) -> GrayPatch {
        let s = self.size;
        self.remap(|r, c| (s - 1 - c, r))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchPair {
    /// Laser-derived patch.
    pub a: GrayPatch,
    /// Dense-matching-derived patch.
    pub b: GrayPatch,
    /// (tile row, tile col) in the patch tiling.
    pub tile: (usize, usize),
    /// World coordinates of the patch's top-left corner.
    pub tile_xy: (f64, f64),
    pub label: Option<Label>,
    pub valid: bool,
}

/// Default ceiling on the fraction of gap pixels in a valid pair.
pub const MAX_GAP_RATIO: f64 = 0.5;

/// Mirrors gaps between the two patches and zeroes gap pixels. The pair is
/// valid when the (shared) gap fraction is at most `max_gap_ratio`.
pub fn conjugate_gaps(a: &GrayPatch, b: &GrayPatch, max_gap_ratio: f64) -> Result<(GrayPatch, GrayPatch, bool)> {
    if a.size != b.size || a.anchor != b.anchor {
        return Err(Error::Shape {
            expected: format!("{0}x{0} at {1:?}", a.size, a.anchor),
            got: format!("{0}x{0} at {1:?}", b.size, b.anchor),
        });
    }
    let mut a2 = a.clone();
    let mut b2 = b.clone();
    let mut gaps = 0usize;
    for i in 0..a.pixels.len() {
        if a.gap[i] || b.gap[i] {
            gaps += 1;
            a2.gap[i] = true;
            b2.gap[i] = true;
            a2.pixels[i] = 0;
            b2.pixels[i] = 0;
        }
    }
    let valid = gaps as f64 / a.pixels.len().max(1) as f64 <= max_gap_ratio;
    Ok((a2, b2, valid))
}

fn gray_patch_from(r: &RasterGrid, row0: usize, col0: usize, size: usize, p: &GrayTransferParams) -> GrayPatch {
    let mut pixels = Vec::with_capacity(size * size);
    let mut gap = Vec::with_capacity(size * size);
    for r_ in row0..row0 + size {
        for c in col0..col0 + size {
            match r.get(r_, c) {
                Some(v) => {
                    pixels.push(height_to_gray(v, p));
                    gap.push(false);
                }
                None => {
                    pixels.push(0);
                    gap.push(true);
                }
            }
        }
    }
    GrayPatch { size, pixels, gap, anchor: (row0, col0) }
}

/// Patch edge length in pixels for a patch of `size_m` meters.
pub fn patch_pixels(size_m: f64, cell: f64) -> Result<usize> {
    let px = size_m / cell;
    let n = px.round();
    if !(n >= 1.0) || (px - n).abs() > 1e-6 {
        return Err(Error::Config(format!("patch size {size_m} m is not a whole number of {cell} m cells")));
    }
    Ok(n as usize)
}

/// Non-overlapping tiling of two co-registered nDSMs into gray patch pairs.
/// Partial tiles at the right and bottom edges are dropped.
pub fn patchify(ra: &RasterGrid, rb: &RasterGrid, size_m: f64, p: &GrayTransferParams) -> Result<Vec<PatchPair>> {
    ra.spec.check_same(&rb.spec)?;
    p.validate()?;
    let s = patch_pixels(size_m, ra.spec.cell)?;
    let (tiles_r, tiles_c) = (ra.spec.height / s, ra.spec.width / s);
    let mut out = Vec::with_capacity(tiles_r * tiles_c);
    for tr in 0..tiles_r {
        for tc in 0..tiles_c {
            let pa = gray_patch_from(ra, tr * s, tc * s, s, p);
            let pb = gray_patch_from(rb, tr * s, tc * s, s, p);
            let (a, b, valid) = conjugate_gaps(&pa, &pb, MAX_GAP_RATIO)?;
            let tile_xy = (
                ra.spec.origin.0 + (tc * s) as f64 * ra.spec.cell,
                ra.spec.origin.1 - (tr * s) as f64 * ra.spec.cell,
            );
            out.push(PatchPair { a, b, tile: (tr, tc), tile_xy, label: None, valid });
        }
    }
    Ok(out)
}

/// Five extra pairs: flip-H, flip-V, rot90, rot180, rot270 (clockwise).
pub fn augment(pair: &PatchPair) -> [PatchPair; 5] {
    let with = |a: GrayPatch, b: GrayPatch| PatchPair { a, b, ..pair.clone() };
    let r90 = (pair.a.rot90(), pair.b.rot90());
    let r180 = (r90.0.rot90(), r90.1.rot90());
    let r270 = (r180.0.rot90(), r180.1.rot90());
    [
        with(pair.a.flip_h(), pair.b.flip_h()),
        with(pair.a.flip_v(), pair.b.flip_v()),
        with(r90.0, r90.1),
        with(r180.0, r180.1),
        with(r270.0, r270.1),
    ]
}

// ---- image files ----

pub fn write_pgm(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<()> {
    let mut buf = format!("P5\n{width} {height}\n255\n").into_bytes();
    buf.extend_from_slice(data);
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[[u8; 3]]) -> Result<()> {
    let mut buf = format!("P6\n{width} {height}\n255\n").into_bytes();
    for px in rgb {
        buf.extend_from_slice(px);
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads a binary PGM (`P5`) or PPM (`P6`) with maxval 255. Returns
/// (width, height, channels, data).
pub fn read_pnm(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(f);
    let bad = |m: &str| Error::Data(format!("{}: {m}", path.display()));
    let mut tokens = Vec::new();
    let mut line = String::new();
    while tokens.len() < 4 {
        line.clear();
        if r.read_line(&mut line).map_err(|e| Error::io(path, e))? == 0 {
            return Err(bad("truncated header"));
        }
        let content = line.split('#').next().unwrap_or("");
        tokens.extend(content.split_whitespace().map(str::to_owned));
    }
    let channels = match tokens[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        _ => return Err(bad("not a binary PGM/PPM")),
    };
    let w: usize = tokens[1].parse().map_err(|_| bad("bad width"))?;
    let h: usize = tokens[2].parse().map_err(|_| bad("bad height"))?;
    if tokens[3] != "255" {
        return Err(bad("maxval must be 255"));
    }
    let mut data = vec![0u8; w * h * channels];
    r.read_exact(&mut data).map_err(|e| Error::io(path, e))?;
    Ok((w, h, channels, data))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RgbRaster {
    pub spec: GridSpec,
    pub pixels: Vec<[u8; 3]>,
}

impl RgbRaster {
    pub fn sample(&self, x: f64, y: f64) -> Option<[u8; 3]> {
        self.spec.cell_of(x, y).map(|(r, c)| self.pixels[r * self.spec.width + c])
    }

    pub fn save_ppm(&self, path: &Path) -> Result<()> {
        write_ppm(path, self.spec.width, self.spec.height, &self.pixels)
    }

    /// Loads pixels from a PPM; georeferencing comes from `spec`.
    pub fn load_ppm(path: &Path, spec: GridSpec) -> Result<Self> {
        let (w, h, ch, data) = read_pnm(path)?;
        if ch != 3 || w != spec.width || h != spec.height {
            return Err(Error::Geometry(format!(
                "{}: {w}x{h}x{ch} image does not match {}x{} grid",
                path.display(),
                spec.width,
                spec.height
            )));
        }
        let pixels = data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        Ok(RgbRaster { spec, pixels })
    }
}

// ---- patch files and manifest ----

pub const MANIFEST_HEADER: &str = "tile_row,tile_col,path_a,path_b,label,valid";

fn gap_path(p: &Path) -> PathBuf {
    let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("patch");
    p.with_file_name(format!("{stem}_gap.pgm"))
}

fn save_patch(path: &Path, patch: &GrayPatch) -> Result<()> {
    write_pgm(path, patch.size, patch.size, &patch.pixels)?;
    let mask: Vec<u8> = patch.gap.iter().map(|&g| if g { 255 } else { 0 }).collect();
    write_pgm(&gap_path(path), patch.size, patch.size, &mask)
}

fn load_patch(path: &Path, anchor: (usize, usize)) -> Result<GrayPatch> {
    let (w, h, ch, pixels) = read_pnm(path)?;
    if ch != 1 || w != h {
        return Err(Error::Data(format!("{}: patches must be square PGM", path.display())));
    }
    let gp = gap_path(path);
    let gap = if gp.exists() {
        let (gw, gh, _, g) = read_pnm(&gp)?;
        if gw != w || gh != h {
            return Err(Error::Data(format!("{}: gap mask size mismatch", gp.display())));
        }
        g.into_iter().map(|v| v >= 128).collect()
    } else {
        vec![false; w * h]
    };
    GrayPatch::new(w, pixels, gap, anchor)
}

/// Writes `tile_<row>_<col>_<epoch>.pgm` (+ `_gap.pgm`) for every pair and the
/// manifest `manifest.csv` into `dir`. Returns the manifest path.
pub fn save_pairs(dir: &Path, pairs: &[PatchPair]) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::from(MANIFEST_HEADER);
    manifest.push('\n');
    for p in pairs {
        let (r, c) = p.tile;
        let na = format!("tile_{r}_{c}_a.pgm");
        let nb = format!("tile_{r}_{c}_b.pgm");
        save_patch(&dir.join(&na), &p.a)?;
        save_patch(&dir.join(&nb), &p.b)?;
        let label = match p.label {
            Some(Label::Changed) => "1",
            Some(Label::Unchanged) => "0",
            None => "",
        };
        manifest.push_str(&format!("{r},{c},{na},{nb},{label},{}\n", p.valid as u8));
    }
    let path = dir.join("manifest.csv");
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Reads a manifest and its patches. Relative patch paths resolve against the
/// manifest's directory. `grid` (the nDSM geometry) fills in `tile_xy`.
pub fn load_pairs(manifest: &Path, grid: Option<&GridSpec>) -> Result<Vec<PatchPair>> {
    let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let dir = manifest.parent().unwrap_or(Path::new("."));
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == MANIFEST_HEADER => {}
        _ => {
            return Err(Error::Parse {
                path: manifest.to_path_buf(),
                line: 1,
                msg: format!("expected header `{MANIFEST_HEADER}`"),
            })
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse { path: manifest.to_path_buf(), line: i + 1, msg };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(err(format!("expected 6 fields, found {}", f.len())));
        }
        let tr: usize = f[0].parse().map_err(|_| err(format!("bad tile_row {:?}", f[0])))?;
        let tc: usize = f[1].parse().map_err(|_| err(format!("bad tile_col {:?}", f[1])))?;
        let label = match f[4].trim() {
            "" => None,
            "0" => Some(Label::Unchanged),
            "1" => Some(Label::Changed),
            other => return Err(err(format!("label must be 0, 1 or blank, got {other:?}"))),
        };
        let valid = match f[5].trim() {
            "0" => false,
            "1" => true,
            other => return Err(err(format!("valid must be 0 or 1, got {other:?}"))),
        };
        let pa = dir.join(f[2]);
        let pb = dir.join(f[3]);
        let a0 = load_patch(&pa, (0, 0))?;
        let s = a0.size;
        let anchor = (tr * s, tc * s);
        let a = GrayPatch { anchor, ..a0 };
        let b = GrayPatch { anchor, ..load_patch(&pb, anchor)? };
        if b.size != s {
            return Err(err("patches of a pair differ in size".into()));
        }
        let tile_xy = grid
            .map(|g| (g.origin.0 + (tc * s) as f64 * g.cell, g.origin.1 - (tr * s) as f64 * g.cell))
            .unwrap_or((0.0, 0.0));
        out.push(PatchPair { a, b, tile: (tr, tc), tile_xy, label, valid });
    }
    Ok(out)
}
