//! Deterministic two-epoch synthetic scenes: analytic terrain, box buildings
//! with flat or gabled roofs, ellipsoidal tree crowns; laser and dense-matching
//! point sampling with the usual multimodal pathologies; an orthoimage with a
//! matching nadir camera; ground-truth change records and tile masks.
//!
//! Every random draw comes from a ChaCha stream keyed by (seed, stream kind,
//! entity id), so adding or removing one entity never perturbs another's
//! samples.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;

use crate::change::{ChangeStatus, ObjectClass};
use crate::pointcloud_io::{Bounds2, CameraModel, Point3, PointCloud, Source};
use crate::raster::{GridSpec, RgbRaster};
use crate::{Error, Result};

pub const TERRAIN_RGB: [u8; 3] = [120, 120, 120];
pub const ROOF_RGB: [u8; 3] = [150, 60, 60];
pub const CANOPY_RGB: [u8; 3] = [60, 160, 50];

/// Vertical crown semi-axis over crown radius.
const CROWN_ASPECT: f64 = 1.25;
/// Edge of the square terrain sampling tiles, meters.
const TERRAIN_TILE: f64 = 10.0;
const MAX_PLACEMENT_TRIES: usize = 2000;

#[derive(Clone, Copy)]
#[repr(u64)]
enum Stream {
    Terrain = 1,
    PlaceBuilding,
    PlaceTree,
    Change,
    Gaps,
    Position,
    Noise,
    Keep,
    CanopyFailure,
}

fn keyed_rng(seed: u64, stream: Stream, salt: u64, entity: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(stream as u64).to_le_bytes());
    key[16..24].copy_from_slice(&salt.to_le_bytes());
    key[24..32].copy_from_slice(&entity.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Terrain {
    Plane { z0: f64, gx: f64, gy: f64 },
    Bumps { z0: f64, gx: f64, gy: f64, amp: f64, wavelength: f64, phase_x: f64, phase_y: f64 },
}

impl Terrain {
    pub fn height(&self, x: f64, y: f64) -> f64 {
        match *self {
            Terrain::Plane { z0, gx, gy } => z0 + gx * x + gy * y,
            Terrain::Bumps { z0, gx, gy, amp, wavelength, phase_x, phase_y } => {
                let k = 2.0 * PI / wavelength;
                z0 + gx * x + gy * y + amp * (k * x + phase_x).sin() * (k * y + phase_y).cos()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Roof {
    Flat,
    /// Ridge height above the eaves; the ridge runs along the long side.
    Gabled { ridge: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Building {
    pub id: u64,
    pub footprint: Bounds2,
    /// Eave height above the terrain at the footprint center.
    pub height: f64,
    pub roof: Roof,
}

impl Building {
    fn center(&self) -> (f64, f64) {
        ((self.footprint.min_x + self.footprint.max_x) / 2.0, (self.footprint.min_y + self.footprint.max_y) / 2.0)
    }

    /// Roof height at (x, y), which must lie in the footprint.
    pub fn roof_z(&self, terrain: &Terrain, x: f64, y: f64) -> f64 {
        let (cx, cy) = self.center();
        let eave = terrain.height(cx, cy) + self.height;
        match self.roof {
            Roof::Flat => eave,
            Roof::Gabled { ridge } => {
                let f = &self.footprint;
                let (off, half) = if f.width() >= f.height() {
                    ((y - cy).abs(), f.height() / 2.0)
                } else {
                    ((x - cx).abs(), f.width() / 2.0)
                };
                eave + ridge * (1.0 - off / half).max(0.0)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tree {
    pub id: u64,
    pub center: (f64, f64),
    /// Crown radius in xy.
    pub radius: f64,
    /// Crown top above the terrain.
    pub height: f64,
}

impl Tree {
    fn crown_axis(&self) -> f64 {
        CROWN_ASPECT * self.radius
    }

    /// Height of the crown center.
    fn crown_z(&self, terrain: &Terrain) -> f64 {
        terrain.height(self.center.0, self.center.1) + self.height - self.crown_axis()
    }

    fn covers(&self, x: f64, y: f64) -> bool {
        (x - self.center.0).hypot(y - self.center.1) < self.radius
    }

    fn half_depth(&self, x: f64, y: f64) -> f64 {
        let rho2 = ((x - self.center.0).powi(2) + (y - self.center.1).powi(2)) / (self.radius * self.radius);
        self.crown_axis() * (1.0 - rho2).max(0.0).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub bounds: Bounds2,
    pub terrain: Terrain,
    pub buildings: Vec<Building>,
    pub trees: Vec<Tree>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Surface {
    Terrain,
    Roof(u64),
    Canopy(u64),
}

impl Scene {
    /// The visible top surface at (x, y) and its height.
    pub fn surface_at(&self, x: f64, y: f64) -> (Surface, f64) {
        for b in &self.buildings {
            if b.footprint.contains(x, y) {
                return (Surface::Roof(b.id), b.roof_z(&self.terrain, x, y));
            }
        }
        for t in &self.trees {
            if t.covers(x, y) {
                return (Surface::Canopy(t.id), t.crown_z(&self.terrain) + t.half_depth(x, y));
            }
        }
        (Surface::Terrain, self.terrain.height(x, y))
    }

    fn next_id(&self) -> u64 {
        self.buildings.iter().map(|b| b.id).chain(self.trees.iter().map(|t| t.id)).max().unwrap_or(0) + 1
    }

    fn building_fits(&self, r: &Bounds2, avoid: &[Building], trees: &[Tree]) -> bool {
        let inner = shrink(&self.bounds, 2.0);
        r.min_x >= inner.min_x
            && r.max_x <= inner.max_x
            && r.min_y >= inner.min_y
            && r.max_y <= inner.max_y
            && avoid.iter().all(|b| !b.footprint.expanded(4.0).intersects(r))
            && trees.iter().all(|t| rect_disk_distance(r, t.center) > t.radius + 2.0)
    }

    fn tree_fits(&self, c: (f64, f64), radius: f64, buildings: &[Building], avoid: &[Tree]) -> bool {
        let inner = shrink(&self.bounds, 1.0);
        c.0 - radius >= inner.min_x
            && c.0 + radius <= inner.max_x
            && c.1 - radius >= inner.min_y
            && c.1 + radius <= inner.max_y
            && buildings.iter().all(|b| rect_disk_distance(&b.footprint, c) > radius + 2.0)
            && avoid.iter().all(|t| (t.center.0 - c.0).hypot(t.center.1 - c.1) > t.radius + radius + 1.0)
    }
}

fn shrink(b: &Bounds2, by: f64) -> Bounds2 {
    b.expanded(-by)
}

fn rect_disk_distance(r: &Bounds2, c: (f64, f64)) -> f64 {
    let dx = (r.min_x - c.0).max(0.0).max(c.0 - r.max_x);
    let dy = (r.min_y - c.1).max(0.0).max(c.1 - r.max_y);
    dx.hypot(dy)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SceneCounts {
    pub buildings: usize,
    pub trees: usize,
}

impl Default for SceneCounts {
    fn default() -> Self {
        SceneCounts { buildings: 12, trees: 20 }
    }
}

fn random_building(scene: &Scene, id: u64, rng: &mut ChaCha8Rng) -> Building {
    let short = rng.gen_range(6.0..9.5);
    let long = rng.gen_range(10.0..20.0);
    let (w, h) = if rng.gen_bool(0.5) { (long, short) } else { (short, long) };
    let x0 = rng.gen_range(scene.bounds.min_x..scene.bounds.max_x - w);
    let y0 = rng.gen_range(scene.bounds.min_y..scene.bounds.max_y - h);
    let height = rng.gen_range(4.0..15.0);
    let roof = if rng.gen_bool(0.5) { Roof::Flat } else { Roof::Gabled { ridge: rng.gen_range(1.5..3.5) } };
    Building { id, footprint: Bounds2 { min_x: x0, min_y: y0, max_x: x0 + w, max_y: y0 + h }, height, roof }
}

fn random_tree(scene: &Scene, id: u64, rng: &mut ChaCha8Rng) -> Tree {
    let radius = rng.gen_range(2.0..3.5);
    let c = (rng.gen_range(scene.bounds.min_x..scene.bounds.max_x), rng.gen_range(scene.bounds.min_y..scene.bounds.max_y));
    let height = 2.0 * CROWN_ASPECT * radius + rng.gen_range(2.0..5.0);
    Tree { id, center: c, radius, height }
}

fn place_building(scene: &Scene, id: u64, avoid: &[Building], trees: &[Tree], rng: &mut ChaCha8Rng) -> Result<Building> {
    for _ in 0..MAX_PLACEMENT_TRIES {
        let b = random_building(scene, id, rng);
        if scene.building_fits(&b.footprint, avoid, trees) {
            return Ok(b);
        }
    }
    Err(Error::Data(format!("could not place building {id} after {MAX_PLACEMENT_TRIES} tries; scene too crowded")))
}

fn place_tree(scene: &Scene, id: u64, buildings: &[Building], avoid: &[Tree], rng: &mut ChaCha8Rng) -> Result<Tree> {
    for _ in 0..MAX_PLACEMENT_TRIES {
        let t = random_tree(scene, id, rng);
        if scene.tree_fits(t.center, t.radius, buildings, avoid) {
            return Ok(t);
        }
    }
    Err(Error::Data(format!("could not place tree {id} after {MAX_PLACEMENT_TRIES} tries; scene too crowded")))
}

pub fn generate_scene(bounds: Bounds2, counts: SceneCounts, seed: u64) -> Result<Scene> {
    if !(bounds.width() > 0.0 && bounds.height() > 0.0) {
        return Err(Error::Config(format!("scene bounds must have positive extent, got {bounds:?}")));
    }
    let mut tr = keyed_rng(seed, Stream::Terrain, 0, 0);
    let terrain = Terrain::Bumps {
        z0: tr.gen_range(0.0..20.0),
        gx: tr.gen_range(-0.015..0.015),
        gy: tr.gen_range(-0.015..0.015),
        amp: tr.gen_range(0.3..1.0),
        wavelength: 150.0,
        phase_x: tr.gen_range(0.0..2.0 * PI),
        phase_y: tr.gen_range(0.0..2.0 * PI),
    };
    let mut scene = Scene { bounds, terrain, buildings: Vec::new(), trees: Vec::new() };
    let mut rng = keyed_rng(seed, Stream::PlaceBuilding, 0, 0);
    for i in 0..counts.buildings {
        let b = place_building(&scene, i as u64 + 1, &scene.buildings, &[], &mut rng)?;
        scene.buildings.push(b);
    }
    let mut rng = keyed_rng(seed, Stream::PlaceTree, 0, 0);
    for i in 0..counts.trees {
        let t = place_tree(&scene, (counts.buildings + i) as u64 + 1, &scene.buildings, &scene.trees, &mut rng)?;
        scene.trees.push(t);
    }
    Ok(scene)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Laser,
    DenseMatching,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapRegion {
    pub rect: Bounds2,
    pub drop_prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplingModel {
    pub modality: Modality,
    /// Points per square meter of visible surface.
    pub density: f64,
    pub surface_noise_sigma: f64,
    /// Crowns are sampled through their whole depth and half of the ground
    /// under them returns too.
    pub canopy_penetration: bool,
    pub canopy_match_failure_prob: f64,
    pub registration_shift: (f64, f64),
    pub gap_regions: Vec<GapRegion>,
}

impl SamplingModel {
    pub fn laser() -> Self {
        SamplingModel {
            modality: Modality::Laser,
            density: 10.0,
            surface_noise_sigma: 0.02,
            canopy_penetration: true,
            canopy_match_failure_prob: 0.0,
            registration_shift: (0.0, 0.0),
            gap_regions: Vec::new(),
        }
    }

    pub fn dense_matching() -> Self {
        SamplingModel {
            modality: Modality::DenseMatching,
            density: 15.0,
            surface_noise_sigma: 0.10,
            canopy_penetration: false,
            canopy_match_failure_prob: 0.7,
            registration_shift: (0.08, -0.05),
            gap_regions: Vec::new(),
        }
    }

    /// Noise, shift, canopy failure and gaps switched off.
    pub fn without_pathologies(mut self) -> Self {
        self.surface_noise_sigma = 0.0;
        self.registration_shift = (0.0, 0.0);
        self.canopy_match_failure_prob = 0.0;
        self.gap_regions.clear();
        self
    }

    pub fn validate(&self) -> Result<()> {
        let name = match self.modality {
            Modality::Laser => "laser",
            Modality::DenseMatching => "dense",
        };
        if !(self.density > 0.0 && self.density.is_finite()) {
            return Err(Error::Config(format!("{name}.density must be > 0, got {}", self.density)));
        }
        if !(self.surface_noise_sigma >= 0.0 && self.surface_noise_sigma.is_finite()) {
            return Err(Error::Config(format!("{name}.noise_sigma must be >= 0, got {}", self.surface_noise_sigma)));
        }
        if !(0.0..=1.0).contains(&self.canopy_match_failure_prob) {
            return Err(Error::Config(format!(
                "{name}.canopy_failure_prob must be in [0, 1], got {}",
                self.canopy_match_failure_prob
            )));
        }
        if !(self.registration_shift.0.is_finite() && self.registration_shift.1.is_finite()) {
            return Err(Error::Config(format!("{name}.shift must be finite")));
        }
        for g in &self.gap_regions {
            if !(0.0..=1.0).contains(&g.drop_prob) {
                return Err(Error::Config(format!("{name} gap drop probability must be in [0, 1], got {}", g.drop_prob)));
            }
        }
        Ok(())
    }

    fn salt(&self) -> u64 {
        match self.modality {
            Modality::Laser => 1,
            Modality::DenseMatching => 2,
        }
    }
}

/// Whether image matching fails on this tree's crown under `model`.
pub fn canopy_failed(model: &SamplingModel, seed: u64, tree_id: u64) -> bool {
    model.canopy_match_failure_prob > 0.0
        && keyed_rng(seed, Stream::CanopyFailure, model.salt(), tree_id).gen::<f64>() < model.canopy_match_failure_prob
}

/// Whether the tree's crown shows up in a cloud sampled with `model`.
pub fn canopy_visible(model: &SamplingModel, seed: u64, tree_id: u64) -> bool {
    !canopy_failed(model, seed, tree_id)
}

enum Entity<'a> {
    TerrainTile(u64, Bounds2),
    Building(&'a Building),
    Tree(&'a Tree),
}

fn poisson(rng: &mut ChaCha8Rng, mean: f64) -> usize {
    if mean <= 0.0 {
        0
    } else {
        Poisson::new(mean).expect("positive mean").sample(rng) as usize
    }
}

pub fn sample_cloud(scene: &Scene, model: &SamplingModel, seed: u64) -> Result<PointCloud> {
    model.validate()?;
    let b = &scene.bounds;
    let nx = (b.width() / TERRAIN_TILE).ceil() as usize;
    let ny = (b.height() / TERRAIN_TILE).ceil() as usize;
    let mut entities = Vec::with_capacity(nx * ny + scene.buildings.len() + scene.trees.len());
    for j in 0..ny {
        for i in 0..nx {
            let tile = Bounds2 {
                min_x: b.min_x + i as f64 * TERRAIN_TILE,
                min_y: b.min_y + j as f64 * TERRAIN_TILE,
                max_x: (b.min_x + (i + 1) as f64 * TERRAIN_TILE).min(b.max_x),
                max_y: (b.min_y + (j + 1) as f64 * TERRAIN_TILE).min(b.max_y),
            };
            entities.push(Entity::TerrainTile((j * nx + i) as u64, tile));
        }
    }
    entities.extend(scene.buildings.iter().map(Entity::Building));
    entities.extend(scene.trees.iter().map(Entity::Tree));
    let failed: Vec<bool> = scene.trees.iter().map(|t| canopy_failed(model, seed, t.id)).collect();
    let parts: Vec<Vec<Point3>> = entities.par_iter().map(|e| sample_entity(scene, model, seed, &failed, e)).collect();
    let source = match model.modality {
        Modality::Laser => Source::Laser,
        Modality::DenseMatching => Source::DenseMatching,
    };
    Ok(PointCloud::new(parts.concat(), source))
}

fn sample_entity(scene: &Scene, model: &SamplingModel, seed: u64, failed: &[bool], e: &Entity) -> Vec<Point3> {
    // terrain tiles and objects never share entity keys
    let (key, area) = match e {
        Entity::TerrainTile(k, r) => (*k, r.width() * r.height()),
        Entity::Building(bd) => ((1 << 40) + bd.id, bd.footprint.width() * bd.footprint.height()),
        Entity::Tree(t) => ((1 << 40) + t.id, PI * t.radius * t.radius),
    };
    let salt = model.salt();
    let mut pos = keyed_rng(seed, Stream::Position, salt, key);
    let mut keep = keyed_rng(seed, Stream::Keep, salt, key);
    let mut noise_rng = keyed_rng(seed, Stream::Noise, salt, key);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let n = poisson(&mut pos, model.density * area);
    let mut raw: Vec<(f64, f64, f64)> = Vec::with_capacity(n);
    match e {
        Entity::TerrainTile(_, r) => {
            for _ in 0..n {
                let (x, y) = (pos.gen_range(r.min_x..r.max_x), pos.gen_range(r.min_y..r.max_y));
                let k: f64 = keep.gen();
                if scene.buildings.iter().any(|b| b.footprint.contains(x, y)) {
                    continue;
                }
                if let Some(ti) = scene.trees.iter().position(|t| t.covers(x, y)) {
                    let visible = if model.canopy_penetration { k < 0.5 } else { failed[ti] };
                    if !visible {
                        continue;
                    }
                }
                raw.push((x, y, scene.terrain.height(x, y)));
            }
        }
        Entity::Building(bd) => {
            let f = &bd.footprint;
            for _ in 0..n {
                let (x, y) = (pos.gen_range(f.min_x..f.max_x), pos.gen_range(f.min_y..f.max_y));
                raw.push((x, y, bd.roof_z(&scene.terrain, x, y)));
            }
        }
        Entity::Tree(t) => {
            let ti = scene.trees.iter().position(|s| s.id == t.id).expect("tree belongs to scene");
            if failed[ti] {
                return Vec::new();
            }
            let cz = t.crown_z(&scene.terrain);
            // laser returns come from the whole crown depth, matching only
            // from its sunlit upper part
            let band = if model.canopy_penetration { -1.0..1.0 } else { -0.5..1.0 };
            for _ in 0..n {
                let rho = t.radius * pos.gen::<f64>().sqrt();
                let phi = pos.gen_range(0.0..2.0 * PI);
                let (x, y) = (t.center.0 + rho * phi.cos(), t.center.1 + rho * phi.sin());
                let u = pos.gen_range(band.clone());
                raw.push((x, y, cz + u * t.half_depth(x, y)));
            }
        }
    }
    let mut out = Vec::with_capacity(raw.len());
    for (x, y, z) in raw {
        let z = z + model.surface_noise_sigma * noise.sample(&mut noise_rng);
        let (x, y) = (x + model.registration_shift.0, y + model.registration_shift.1);
        let k: f64 = keep.gen();
        if model.gap_regions.iter().any(|g| g.rect.contains(x, y) && k < g.drop_prob) {
            continue;
        }
        out.push(Point3::new(x, y, z));
    }
    out
}

/// `count` square gap regions of edge `size` placed away from every building
/// of the given scenes.
pub fn gap_regions(scenes: &[&Scene], count: usize, size: f64, drop_prob: f64, seed: u64) -> Result<Vec<GapRegion>> {
    let Some(first) = scenes.first() else { return Ok(Vec::new()) };
    let b = first.bounds;
    let mut rng = keyed_rng(seed, Stream::Gaps, 0, 0);
    let mut out: Vec<GapRegion> = Vec::new();
    for i in 0..count {
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_TRIES {
            if b.width() <= size || b.height() <= size {
                break;
            }
            let x0 = rng.gen_range(b.min_x..b.max_x - size);
            let y0 = rng.gen_range(b.min_y..b.max_y - size);
            let rect = Bounds2 { min_x: x0, min_y: y0, max_x: x0 + size, max_y: y0 + size };
            let clear = scenes.iter().all(|s| s.buildings.iter().all(|bd| !bd.footprint.expanded(2.0).intersects(&rect)))
                && out.iter().all(|g| !g.rect.intersects(&rect));
            if clear {
                out.push(GapRegion { rect, drop_prob });
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Data(format!("could not place gap region {} of {count}", i + 1)));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ChangeSpec {
    pub add_buildings: usize,
    pub remove_buildings: usize,
    pub add_trees: usize,
    pub remove_trees: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Footprint {
    Rect(Bounds2),
    Disk { center: (f64, f64), radius: f64 },
}

impl Footprint {
    /// Positive-area overlap with `r`.
    pub fn intersects(&self, r: &Bounds2) -> bool {
        match *self {
            Footprint::Rect(b) => b.intersects(r),
            Footprint::Disk { center, radius } => rect_disk_distance(r, center) < radius,
        }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Footprint::Rect(b) => b.contains(x, y),
            Footprint::Disk { center, radius } => (x - center.0).hypot(y - center.1) < radius,
        }
    }

    pub fn bbox(&self) -> Bounds2 {
        match *self {
            Footprint::Rect(b) => b,
            Footprint::Disk { center, radius } => {
                Bounds2 { min_x: center.0 - radius, min_y: center.1 - radius, max_x: center.0 + radius, max_y: center.1 + radius }
            }
        }
    }

    pub fn centroid(&self) -> (f64, f64) {
        match *self {
            Footprint::Rect(b) => ((b.min_x + b.max_x) / 2.0, (b.min_y + b.max_y) / 2.0),
            Footprint::Disk { center, .. } => center,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChangeRecord {
    pub id: u64,
    pub class: ObjectClass,
    /// `New` or `Demolished`.
    pub status: ChangeStatus,
    pub footprint: Footprint,
}

/// Boolean flags over a square tiling anchored at the top-left of `bounds`;
/// partial tiles at the right and bottom are dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct TileMask {
    pub origin: (f64, f64),
    pub tile: f64,
    pub rows: usize,
    pub cols: usize,
    pub flags: Vec<bool>,
}

impl TileMask {
    pub fn new(bounds: &Bounds2, tile: f64) -> Self {
        let cols = (bounds.width() / tile + 1e-9).floor() as usize;
        let rows = (bounds.height() / tile + 1e-9).floor() as usize;
        TileMask { origin: (bounds.min_x, bounds.max_y), tile, rows, cols, flags: vec![false; rows * cols] }
    }

    pub fn tile_bounds(&self, row: usize, col: usize) -> Bounds2 {
        Bounds2 {
            min_x: self.origin.0 + col as f64 * self.tile,
            max_x: self.origin.0 + (col + 1) as f64 * self.tile,
            max_y: self.origin.1 - row as f64 * self.tile,
            min_y: self.origin.1 - (row + 1) as f64 * self.tile,
        }
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.flags[row * self.cols + col]
    }

    pub fn count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    fn mark(&mut self, f: &Footprint) {
        for r in 0..self.rows {
            for c in 0..self.cols {
                if f.intersects(&self.tile_bounds(r, c)) {
                    self.flags[r * self.cols + c] = true;
                }
            }
        }
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut s = String::from("tile_row,tile_col,changed\n");
        for r in 0..self.rows {
            for c in 0..self.cols {
                let _ = writeln!(s, "{r},{c},{}", self.get(r, c) as u8);
            }
        }
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    /// Reads flags written by [`TileMask::save_csv`] into a mask shaped like `self`.
    pub fn load_flags(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (i, line) in text.lines().enumerate().skip(1) {
            let perr = |msg: String| Error::Parse { path: path.to_path_buf(), line: i + 1, msg };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 3 {
                return Err(perr(format!("expected 3 fields, found {}", f.len())));
            }
            let r: usize = f[0].parse().map_err(|_| perr(format!("bad row {:?}", f[0])))?;
            let c: usize = f[1].parse().map_err(|_| perr(format!("bad col {:?}", f[1])))?;
            if r >= self.rows || c >= self.cols {
                return Err(perr(format!("tile ({r}, {c}) outside {}x{}", self.rows, self.cols)));
            }
            self.flags[r * self.cols + c] = match f[2] {
                "0" => false,
                "1" => true,
                s => return Err(perr(format!("bad flag {s:?}"))),
            };
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub records: Vec<ChangeRecord>,
    pub tiles: TileMask,
}

/// Tiles touched by any of the footprints.
pub fn mask_of(bounds: &Bounds2, tile: f64, footprints: impl IntoIterator<Item = Footprint>) -> TileMask {
    let mut m = TileMask::new(bounds, tile);
    for f in footprints {
        m.mark(&f);
    }
    m
}

fn choose(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    let mut v = rand::seq::index::sample(rng, n, k).into_vec();
    v.sort_unstable();
    v
}

/// Applies `spec` to `scene`; ground truth uses 10 m tiles.
pub fn apply_changes(scene: &Scene, spec: &ChangeSpec) -> Result<(Scene, GroundTruth)> {
    apply_changes_tiled(scene, spec, 10.0)
}

pub fn apply_changes_tiled(scene: &Scene, spec: &ChangeSpec, tile: f64) -> Result<(Scene, GroundTruth)> {
    if spec.remove_buildings > scene.buildings.len() || spec.remove_trees > scene.trees.len() {
        return Err(Error::Config(format!(
            "cannot remove {} buildings / {} trees from a scene with {} / {}",
            spec.remove_buildings,
            spec.remove_trees,
            scene.buildings.len(),
            scene.trees.len()
        )));
    }
    let mut rng = keyed_rng(spec.seed, Stream::Change, 0, 0);
    let mut records = Vec::new();
    let gone_b = choose(&mut rng, scene.buildings.len(), spec.remove_buildings);
    let gone_t = choose(&mut rng, scene.trees.len(), spec.remove_trees);
    let mut next = scene.next_id();
    let mut out = scene.clone();
    out.buildings = scene.buildings.iter().enumerate().filter(|(i, _)| !gone_b.contains(i)).map(|(_, b)| *b).collect();
    out.trees = scene.trees.iter().enumerate().filter(|(i, _)| !gone_t.contains(i)).map(|(_, t)| *t).collect();
    for &i in &gone_b {
        let b = &scene.buildings[i];
        records.push(ChangeRecord { id: b.id, class: ObjectClass::Building, status: ChangeStatus::Demolished, footprint: Footprint::Rect(b.footprint) });
    }
    for &i in &gone_t {
        let t = &scene.trees[i];
        records.push(ChangeRecord {
            id: t.id,
            class: ObjectClass::Tree,
            status: ChangeStatus::Demolished,
            footprint: Footprint::Disk { center: t.center, radius: t.radius },
        });
    }
    // new objects keep clear of everything that existed in either epoch
    let mut all_b = scene.buildings.clone();
    let mut all_t = scene.trees.clone();
    for _ in 0..spec.add_buildings {
        let b = place_building(scene, next, &all_b, &all_t, &mut rng)?;
        next += 1;
        all_b.push(b);
        out.buildings.push(b);
        records.push(ChangeRecord { id: b.id, class: ObjectClass::Building, status: ChangeStatus::New, footprint: Footprint::Rect(b.footprint) });
    }
    for _ in 0..spec.add_trees {
        let t = place_tree(scene, next, &all_b, &all_t, &mut rng)?;
        next += 1;
        all_t.push(t);
        out.trees.push(t);
        records.push(ChangeRecord {
            id: t.id,
            class: ObjectClass::Tree,
            status: ChangeStatus::New,
            footprint: Footprint::Disk { center: t.center, radius: t.radius },
        });
    }
    let tiles = mask_of(&scene.bounds, tile, records.iter().map(|r| r.footprint));
    Ok((out, GroundTruth { records, tiles }))
}

/// Tiles whose appearance differs between the two sampled epochs: every
/// building change, and every tree whose crown is visible in exactly one
/// cloud. Trees added or kept but lost to matching failure count by what the
/// clouds show, not by what exists.
pub fn visible_change_mask(
    a: &Scene,
    b: &Scene,
    truth: &GroundTruth,
    (model_a, seed_a): (&SamplingModel, u64),
    (model_b, seed_b): (&SamplingModel, u64),
) -> TileMask {
    let mut fps: Vec<Footprint> =
        truth.records.iter().filter(|r| r.class == ObjectClass::Building).map(|r| r.footprint).collect();
    let vis_a = |id| a.trees.iter().any(|t| t.id == id) && canopy_visible(model_a, seed_a, id);
    let vis_b = |id| b.trees.iter().any(|t| t.id == id) && canopy_visible(model_b, seed_b, id);
    for t in a.trees.iter().chain(b.trees.iter().filter(|t| !a.trees.iter().any(|s| s.id == t.id))) {
        if vis_a(t.id) != vis_b(t.id) {
            fps.push(Footprint::Disk { center: t.center, radius: t.radius });
        }
    }
    let mut m = TileMask { flags: vec![false; truth.tiles.flags.len()], ..truth.tiles.clone() };
    for f in &fps {
        m.mark(f);
    }
    m
}

/// Top-down rendering of the scene and a nadir camera that sees the same
/// picture. The camera flies high enough that relief displacement stays far
/// below one pixel.
pub fn render_ortho(scene: &Scene, cell: f64) -> Result<(RgbRaster, CameraModel)> {
    let spec = GridSpec::covering(&scene.bounds, cell)?;
    let rows: Vec<Vec<[u8; 3]>> = (0..spec.height)
        .into_par_iter()
        .map(|r| {
            (0..spec.width)
                .map(|c| {
                    let (x, y) = spec.cell_center(r, c);
                    match scene.surface_at(x, y).0 {
                        Surface::Terrain => TERRAIN_RGB,
                        Surface::Roof(_) => ROOF_RGB,
                        Surface::Canopy(_) => CANOPY_RGB,
                    }
                })
                .collect()
        })
        .collect();
    let ortho = RgbRaster { spec, pixels: rows.concat() };
    let gb = spec.bounds();
    let (cx, cy) = ((gb.min_x + gb.max_x) / 2.0, (gb.min_y + gb.max_y) / 2.0);
    let z_ref = scene.terrain.height(cx, cy);
    let altitude = 200.0 * spec.width.max(spec.height) as f64 * cell;
    let f = altitude / cell;
    let k = Matrix3::new(
        f,
        0.0,
        spec.width as f64 / 2.0 - 0.5,
        0.0,
        f,
        spec.height as f64 / 2.0 - 0.5,
        0.0,
        0.0,
        1.0,
    );
    let r = Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0));
    let cam = CameraModel::new(k, r, Vector3::new(cx, cy, z_ref + altitude), spec.width as u32, spec.height as u32)?;
    Ok((ortho, cam))
}

// ---- scene files ----

fn fmt_terrain(t: &Terrain) -> String {
    match *t {
        Terrain::Plane { z0, gx, gy } => format!("plane {z0} {gx} {gy}"),
        Terrain::Bumps { z0, gx, gy, amp, wavelength, phase_x, phase_y } => {
            format!("bumps {z0} {gx} {gy} {amp} {wavelength} {phase_x} {phase_y}")
        }
    }
}

pub fn scene_to_string(s: &Scene) -> String {
    let b = &s.bounds;
    let mut out = String::from("# deltamap synthetic scene\n[scene]\n");
    let _ = writeln!(out, "bounds = {} {} {} {}", b.min_x, b.min_y, b.max_x, b.max_y);
    let _ = writeln!(out, "terrain = {}", fmt_terrain(&s.terrain));
    for bd in &s.buildings {
        let f = &bd.footprint;
        let roof = match bd.roof {
            Roof::Flat => "flat".to_string(),
            Roof::Gabled { ridge } => format!("gabled {ridge}"),
        };
        let _ = write!(
            out,
            "\n[building]\nid = {}\nfootprint = {} {} {} {}\nheight = {}\nroof = {roof}\n",
            bd.id, f.min_x, f.min_y, f.max_x, f.max_y, bd.height
        );
    }
    for t in &s.trees {
        let _ = write!(
            out,
            "\n[tree]\nid = {}\ncenter = {} {}\nradius = {}\nheight = {}\n",
            t.id, t.center.0, t.center.1, t.radius, t.height
        );
    }
    out
}

pub fn save_scene(path: &Path, s: &Scene) -> Result<()> {
    fs::write(path, scene_to_string(s)).map_err(|e| Error::io(path, e))
}

pub fn load_scene(path: &Path) -> Result<Scene> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_scene(&text).map_err(|(line, msg)| Error::Parse { path: path.to_path_buf(), line, msg })
}

type Block = (usize, String, Vec<(usize, String, String)>);

fn parse_scene(text: &str) -> std::result::Result<Scene, (usize, String)> {
    let mut blocks: Vec<Block> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            blocks.push((i + 1, name.trim().to_string(), Vec::new()));
        } else if let Some((k, v)) = line.split_once('=') {
            let Some(b) = blocks.last_mut() else { return Err((i + 1, "key outside a [block]".into())) };
            b.2.push((i + 1, k.trim().to_string(), v.trim().to_string()));
        } else {
            return Err((i + 1, format!("expected `key = value` or `[block]`, got {line:?}")));
        }
    }
    let nums = |line: usize, v: &str, n: usize| -> std::result::Result<Vec<f64>, (usize, String)> {
        let out: Vec<f64> = v.split_whitespace().map(|t| t.parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(|_| (line, format!("bad number in {v:?}")))?;
        if out.len() != n {
            return Err((line, format!("expected {n} numbers, got {}", out.len())));
        }
        Ok(out)
    };
    let mut bounds = None;
    let mut terrain = None;
    let mut buildings = Vec::new();
    let mut trees = Vec::new();
    for (bline, name, kvs) in blocks {
        let get = |key: &str| -> std::result::Result<(usize, &str), (usize, String)> {
            kvs.iter().find(|(_, k, _)| k == key).map(|(l, _, v)| (*l, v.as_str())).ok_or((bline, format!("[{name}] lacks `{key}`")))
        };
        for (l, k, _) in &kvs {
            let known: &[&str] = match name.as_str() {
                "scene" => &["bounds", "terrain"],
                "building" => &["id", "footprint", "height", "roof"],
                "tree" => &["id", "center", "radius", "height"],
                _ => return Err((bline, format!("unknown block [{name}]"))),
            };
            if !known.contains(&k.as_str()) {
                return Err((*l, format!("unknown key `{k}` in [{name}]")));
            }
        }
        let id = |line_val: (usize, &str)| line_val.1.parse::<u64>().map_err(|_| (line_val.0, format!("bad id {:?}", line_val.1)));
        match name.as_str() {
            "scene" => {
                let (l, v) = get("bounds")?;
                let b = nums(l, v, 4)?;
                bounds = Some(Bounds2 { min_x: b[0], min_y: b[1], max_x: b[2], max_y: b[3] });
                let (l, v) = get("terrain")?;
                let (kind, rest) = v.split_once(' ').unwrap_or((v, ""));
                terrain = Some(match kind {
                    "plane" => {
                        let t = nums(l, rest, 3)?;
                        Terrain::Plane { z0: t[0], gx: t[1], gy: t[2] }
                    }
                    "bumps" => {
                        let t = nums(l, rest, 7)?;
                        Terrain::Bumps { z0: t[0], gx: t[1], gy: t[2], amp: t[3], wavelength: t[4], phase_x: t[5], phase_y: t[6] }
                    }
                    k => return Err((l, format!("unknown terrain kind {k:?}"))),
                });
            }
            "building" => {
                let (l, v) = get("footprint")?;
                let f = nums(l, v, 4)?;
                let (l, v) = get("height")?;
                let h = nums(l, v, 1)?[0];
                let (l, v) = get("roof")?;
                let roof = match v.split_once(' ') {
                    None if v == "flat" => Roof::Flat,
                    Some(("gabled", r)) => Roof::Gabled { ridge: nums(l, r, 1)?[0] },
                    _ => return Err((l, format!("bad roof {v:?}"))),
                };
                buildings.push(Building {
                    id: id(get("id")?)?,
                    footprint: Bounds2 { min_x: f[0], min_y: f[1], max_x: f[2], max_y: f[3] },
                    height: h,
                    roof,
                });
            }
            "tree" => {
                let (l, v) = get("center")?;
                let c = nums(l, v, 2)?;
                let (l, v) = get("radius")?;
                let radius = nums(l, v, 1)?[0];
                let (l, v) = get("height")?;
                let height = nums(l, v, 1)?[0];
                trees.push(Tree { id: id(get("id")?)?, center: (c[0], c[1]), radius, height });
            }
            _ => unreachable!("checked above"),
        }
    }
    let bounds = bounds.ok_or((1, "missing [scene] block".to_string()))?;
    let terrain = terrain.ok_or((1, "missing [scene] block".to_string()))?;
    Ok(Scene { bounds, terrain, buildings, trees })
}

pub const TRUTH_HEADER: &str = "id,class,status,footprint";

pub fn save_truth(path: &Path, records: &[ChangeRecord]) -> Result<()> {
    let mut s = format!("{TRUTH_HEADER}\n");
    for r in records {
        let fp = match r.footprint {
            Footprint::Rect(b) => format!("rect {} {} {} {}", b.min_x, b.min_y, b.max_x, b.max_y),
            Footprint::Disk { center, radius } => format!("disk {} {} {radius}", center.0, center.1),
        };
        let _ = writeln!(s, "{},{},{},{fp}", r.id, r.class, r.status);
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn load_truth(path: &Path) -> Result<Vec<ChangeRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let perr = |msg: String| Error::Parse { path: path.to_path_buf(), line: i + 1, msg };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(perr(format!("expected 4 fields, found {}", f.len())));
        }
        let class = match f[1] {
            "building" => ObjectClass::Building,
            "tree" => ObjectClass::Tree,
            s => return Err(perr(format!("bad class {s:?}"))),
        };
        let status = match f[2] {
            "new" => ChangeStatus::New,
            "demolished" => ChangeStatus::Demolished,
            s => return Err(perr(format!("bad status {s:?}"))),
        };
        let toks: Vec<&str> = f[3].split_whitespace().collect();
        let v: Vec<f64> = toks[1..].iter().map(|t| t.parse()).collect::<std::result::Result<_, _>>().map_err(|_| perr(format!("bad footprint {:?}", f[3])))?;
        let footprint = match (toks.first(), v.len()) {
            (Some(&"rect"), 4) => Footprint::Rect(Bounds2 { min_x: v[0], min_y: v[1], max_x: v[2], max_y: v[3] }),
            (Some(&"disk"), 3) => Footprint::Disk { center: (v[0], v[1]), radius: v[2] },
            _ => return Err(perr(format!("bad footprint {:?}", f[3]))),
        };
        let id = f[0].parse().map_err(|_| perr(format!("bad id {:?}", f[0])))?;
        out.push(ChangeRecord { id, class, status, footprint });
    }
    Ok(out)
}

// ---- whole two-epoch worlds ----

#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub size: f64,
    pub counts: SceneCounts,
    pub changes: ChangeSpec,
    pub laser: SamplingModel,
    pub dense: SamplingModel,
    pub gap_count: usize,
    pub gap_size: f64,
    pub gap_drop_prob: f64,
    pub ortho_cell: f64,
    pub tile: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            size: 200.0,
            counts: SceneCounts::default(),
            changes: ChangeSpec { add_buildings: 4, remove_buildings: 4, add_trees: 4, remove_trees: 4, seed: 0 },
            laser: SamplingModel::laser(),
            dense: SamplingModel::dense_matching(),
            gap_count: 2,
            gap_size: 12.0,
            gap_drop_prob: 0.97,
            ortho_cell: 0.1,
            tile: 10.0,
            seed: 0,
        }
    }
}

/// Epoch A is the laser survey of the original scene, epoch B the dense
/// matching survey of the changed scene. The ortho and camera show epoch B.
#[derive(Debug, Clone)]
pub struct World {
    pub scene_a: Scene,
    pub scene_b: Scene,
    pub truth: GroundTruth,
    /// Tiles whose appearance changed between the clouds.
    pub visible: TileMask,
    pub laser: PointCloud,
    pub dense: PointCloud,
    pub ortho: RgbRaster,
    pub camera: CameraModel,
    pub dense_model: SamplingModel,
}

pub fn build_world(cfg: &WorldConfig) -> Result<World> {
    if !(cfg.size > 0.0) {
        return Err(Error::Config(format!("synth.size must be > 0, got {}", cfg.size)));
    }
    let bounds = Bounds2 { min_x: 0.0, min_y: 0.0, max_x: cfg.size, max_y: cfg.size };
    let scene_a = generate_scene(bounds, cfg.counts, cfg.seed)?;
    let spec = ChangeSpec { seed: cfg.seed, ..cfg.changes };
    let (scene_b, truth) = apply_changes_tiled(&scene_a, &spec, cfg.tile)?;
    let mut dense_model = cfg.dense.clone();
    dense_model.gap_regions.extend(gap_regions(&[&scene_a, &scene_b], cfg.gap_count, cfg.gap_size, cfg.gap_drop_prob, cfg.seed)?);
    // the survey area is the scene; shifted points past its edge are cut
    let clip = |mut c: PointCloud| {
        c.points.retain(|p| p.x >= bounds.min_x && p.x < bounds.max_x && p.y > bounds.min_y && p.y <= bounds.max_y);
        c
    };
    let laser = clip(sample_cloud(&scene_a, &cfg.laser, cfg.seed)?);
    let dense = clip(sample_cloud(&scene_b, &dense_model, cfg.seed)?);
    let visible = visible_change_mask(&scene_a, &scene_b, &truth, (&cfg.laser, cfg.seed), (&dense_model, cfg.seed));
    let (ortho, camera) = render_ortho(&scene_b, cfg.ortho_cell)?;
    Ok(World { scene_a, scene_b, truth, visible, laser, dense, ortho, camera, dense_model })
}
