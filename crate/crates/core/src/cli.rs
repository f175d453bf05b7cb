//! Configuration and the subcommands of the `deltamap` binary.
//!
//! Stages talk to each other only through files in the output directory:
//!
//! | stage       | reads                                         | writes |
//! |-------------|-----------------------------------------------|--------|
//! | `synth`     | config                                        | `scene_a.txt scene_b.txt cloud_a.xyz cloud_b.xyz ortho.ppm ortho.grid ortho.camera truth.csv truth_tiles.csv labels.csv canopy_failures.csv` |
//! | `rasterize` | clouds                                        | `dtm.grid ndsm_a.grid ndsm_b.grid` |
//! | `patchify`  | nDSMs, optional `labels.csv`                  | `patches/manifest.csv` + PGMs |
//! | `train`     | patch manifest(s)                             | `model.scnn history.csv epochs.csv` |
//! | `infer`     | model, patches, `ndsm_a.grid`                 | `changemap.csv changemap.pgm` |
//! | `objects`   | change map, clouds, DTM, ortho, camera        | `report.csv` |
//! | `eval`      | change map, labels, optional truth and report | `metrics.csv objects_eval.csv` |
//!
//! Every run also writes `manifest.txt`, a config file holding every resolved
//! value.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};
use rayon::prelude::*;

use crate::change::{
    build_change_map, detect_all, group_rois, load_report, write_report, CameraImage, ChangeMap, ObjectClass,
    ObjectInputs, ObjectParams, TileState, VerifyParams,
};
use crate::evalx::{metrics, score_objects, tally, write_metrics, Metric};
use crate::pointcloud_io::{load_cloud, save_cloud, Bounds2, CameraModel, CloudFormat, PointCloud};
use crate::raster::{
    load_pairs, normalize_dsm, patch_pixels, patchify, rasterize_dsm_footprint, save_pairs, GrayTransferParams, GridSpec,
    Label, PatchPair, RasterGrid, RgbRaster,
};
use crate::segmentation::{ClassifyRules, GrowParams};
use crate::sicnn::{
    classify, load_model, save_history, save_model, train_with_progress, Architecture, OptimizerKind, TrainConfig,
    TrainOutcome,
};
use crate::synth::{
    build_world, canopy_failed, load_truth, save_scene, save_truth, ChangeSpec, SamplingModel, SceneCounts,
    TileMask, WorldConfig,
};
use crate::terrain::{build_dtm, filter_ground, ground_points, GroundFilterParams};
use crate::{Error, Result};

/// Every configuration key with its default.
const KEYS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("run.threads", "0"),
    ("run.deterministic", "false"),
    ("output.dir", "deltamap_out"),
    ("input.cloud_a", "auto"),
    ("input.cloud_b", "auto"),
    ("input.ortho", "auto"),
    ("input.camera", "auto"),
    ("input.labels", "auto"),
    ("input.truth", "auto"),
    ("input.pairs", "auto"),
    ("input.model", "auto"),
    ("raster.cell", "0.1"),
    ("raster.footprint", "0.35"),
    ("raster.patch_size", "10"),
    ("raster.bounds", "auto"),
    ("raster.dtm_cloud", "a"),
    ("gray.q", "10"),
    ("gray.t", "-2"),
    ("terrain.seed_cell", "10"),
    ("terrain.max_angle", "6"),
    ("terrain.max_distance", "1.4"),
    ("terrain.iterations_cap", "20"),
    ("terrain.snap_distance", "0.25"),
    ("segmentation.grow_radius", "1"),
    ("segmentation.max_plane_dist", "0.2"),
    ("segmentation.min_seed_points", "30"),
    ("segmentation.clutter_radius", "1"),
    ("segmentation.min_clutter_size", "20"),
    ("segmentation.max_shell_ratio", "0.5"),
    ("classify.roof_min_area", "10"),
    ("classify.roof_max_residual", "0.15"),
    ("classify.roof_max_slope", "75"),
    ("classify.roof_min_height", "2.5"),
    ("classify.tree_min_size", "20"),
    ("classify.tree_max_planarity", "0.5"),
    ("classify.tree_min_height", "2"),
    ("verify.roof_dist_threshold", "0.5"),
    ("verify.negi_threshold", "0.1"),
    ("verify.vegetation_fraction_min", "0.5"),
    ("verify.footprint_buffer", "0.5"),
    ("verify.canopy_presence_max", "0.3"),
    ("train.batch_size", "128"),
    ("train.learning_rate", "0.0001"),
    ("train.epochs", "10"),
    ("train.margin", "1"),
    ("train.decision_threshold", "0.5"),
    ("train.optimizer", "adam"),
    ("train.validation_fraction", "0.1"),
    ("train.augment_changed", "true"),
    ("synth.size", "200"),
    ("synth.buildings", "12"),
    ("synth.trees", "20"),
    ("synth.add_buildings", "4"),
    ("synth.remove_buildings", "4"),
    ("synth.add_trees", "4"),
    ("synth.remove_trees", "4"),
    ("synth.gap_count", "2"),
    ("synth.gap_size", "12"),
    ("synth.gap_drop_prob", "0.97"),
    ("synth.ortho_cell", "0.1"),
    ("laser.density", "10"),
    ("laser.noise_sigma", "0.02"),
    ("laser.canopy_penetration", "true"),
    ("laser.canopy_failure_prob", "0"),
    ("laser.shift_x", "0"),
    ("laser.shift_y", "0"),
    ("dense.density", "15"),
    ("dense.noise_sigma", "0.1"),
    ("dense.canopy_penetration", "false"),
    ("dense.canopy_failure_prob", "0.7"),
    ("dense.shift_x", "0.08"),
    ("dense.shift_y", "-0.05"),
    ("pipeline.train_worlds", "2"),
    ("pipeline.test_seed_offset", "1000"),
];

/// Raw `key = value` settings, defaults filled in.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Default for Settings {
    fn default() -> Self {
        Settings { values: KEYS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect() }
    }
}

impl Settings {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(v) => {
                *v = value.trim().to_string();
                Ok(())
            }
            None => Err(Error::Config(format!("unknown config key `{key}`"))),
        }
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("key {key} is not in the key table"))
    }

    /// Applies a `section.key = value` file.
    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("{}:{}: expected `key = value`, got {line:?}", path.display(), i + 1)));
            };
            self.set(k.trim(), v).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("{}:{}: {m}", path.display(), i + 1)),
                e => e,
            })?;
        }
        Ok(())
    }

    /// Applies `--key value`, `--key=value` and `--deterministic` tokens.
    pub fn apply_overrides(&mut self, args: &[String]) -> Result<()> {
        let mut i = 0;
        while i < args.len() {
            let tok = &args[i];
            let Some(name) = tok.strip_prefix("--") else {
                return Err(Error::Config(format!("expected `--key value`, got {tok:?}")));
            };
            if name == "deterministic" {
                self.set("run.deterministic", "true")?;
                i += 1;
                continue;
            }
            let (key, value) = match name.split_once('=') {
                Some((k, v)) => (k.to_string(), v.to_string()),
                None => {
                    let v = args.get(i + 1).ok_or_else(|| Error::Config(format!("`--{name}` needs a value")))?;
                    i += 1;
                    (name.to_string(), v.clone())
                }
            };
            let key = match key.as_str() {
                "out" => "output.dir".to_string(),
                "threads" => "run.threads".to_string(),
                _ => key,
            };
            self.set(&key, &value)?;
            i += 1;
        }
        Ok(())
    }

    /// The settings as a config file, one `key = value` per line.
    pub fn to_config_text(&self, command: &str) -> String {
        let mut s = format!("# deltamap {command}\n");
        for (k, v) in &self.values {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    fn num<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key);
        v.parse().map_err(|_| Error::Config(format!("`{key}`: cannot parse {v:?}")))
    }

    fn flag(&self, key: &str) -> Result<bool> {
        match self.get(key) {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            v => Err(Error::Config(format!("`{key}`: expected true or false, got {v:?}"))),
        }
    }

    fn positive(&self, key: &str) -> Result<f64> {
        let v: f64 = self.num(key)?;
        if v > 0.0 && v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Config(format!("`{key}` must be > 0, got {v}")))
        }
    }

    fn probability(&self, key: &str) -> Result<f64> {
        let v: f64 = self.num(key)?;
        if (0.0..=1.0).contains(&v) {
            Ok(v)
        } else {
            Err(Error::Config(format!("`{key}` must be in [0, 1], got {v}")))
        }
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        match self.get(key) {
            "auto" | "" => None,
            p => Some(PathBuf::from(p)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DtmCloud {
    A,
    B,
    Both,
}

/// Explicit input files; `None` means the stage's default file in the output
/// directory.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Inputs {
    pub cloud_a: Option<PathBuf>,
    pub cloud_b: Option<PathBuf>,
    pub ortho: Option<PathBuf>,
    pub camera: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    /// Comma-separated list of patch manifests.
    pub pairs: Option<String>,
    pub model: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub threads: usize,
    pub deterministic: bool,
    pub out_dir: PathBuf,
    pub inputs: Inputs,
    pub cell: f64,
    pub footprint: f64,
    pub patch_size: f64,
    pub bounds: Option<Bounds2>,
    pub dtm_cloud: DtmCloud,
    pub gray: GrayTransferParams,
    pub ground: GroundFilterParams,
    pub grow: GrowParams,
    pub rules: ClassifyRules,
    pub verify: VerifyParams,
    pub train: TrainConfig,
    pub world: WorldConfig,
    pub train_worlds: usize,
    pub test_seed_offset: u64,
}

impl PipelineConfig {
    pub fn from_settings(s: &Settings) -> Result<Self> {
        let seed: u64 = s.num("seed")?;
        let bounds = match s.get("raster.bounds") {
            "auto" => None,
            v => {
                let n: Vec<f64> = v
                    .split_whitespace()
                    .map(|t| t.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::Config(format!("`raster.bounds`: expected 4 numbers or auto, got {v:?}")))?;
                if n.len() != 4 || !(n[2] > n[0] && n[3] > n[1]) {
                    return Err(Error::Config(format!("`raster.bounds` must be `min_x min_y max_x max_y` with max > min, got {v:?}")));
                }
                Some(Bounds2 { min_x: n[0], min_y: n[1], max_x: n[2], max_y: n[3] })
            }
        };
        let dtm_cloud = match s.get("raster.dtm_cloud") {
            "a" => DtmCloud::A,
            "b" => DtmCloud::B,
            "both" => DtmCloud::Both,
            v => return Err(Error::Config(format!("`raster.dtm_cloud` must be a, b or both, got {v:?}"))),
        };
        let gray = GrayTransferParams { q: s.num("gray.q")?, t: s.num("gray.t")? };
        gray.validate()?;
        let ground = GroundFilterParams {
            seed_cell: s.num("terrain.seed_cell")?,
            max_angle: s.num("terrain.max_angle")?,
            max_distance: s.num("terrain.max_distance")?,
            iterations_cap: s.num("terrain.iterations_cap")?,
            snap_distance: s.num("terrain.snap_distance")?,
        };
        ground.validate()?;
        let grow = GrowParams {
            grow_radius: s.num("segmentation.grow_radius")?,
            max_plane_dist: s.num("segmentation.max_plane_dist")?,
            min_seed_points: s.num("segmentation.min_seed_points")?,
            clutter_radius: s.num("segmentation.clutter_radius")?,
            min_clutter_size: s.num("segmentation.min_clutter_size")?,
            max_shell_ratio: s.num("segmentation.max_shell_ratio")?,
        };
        grow.validate()?;
        let rules = ClassifyRules {
            roof_min_area: s.positive("classify.roof_min_area")?,
            roof_max_residual: s.positive("classify.roof_max_residual")?,
            roof_max_slope: s.positive("classify.roof_max_slope")?,
            roof_min_height: s.num("classify.roof_min_height")?,
            tree_min_size: s.num("classify.tree_min_size")?,
            tree_max_planarity: s.probability("classify.tree_max_planarity")?,
            tree_min_height: s.num("classify.tree_min_height")?,
        };
        if rules.roof_max_slope > 90.0 {
            return Err(Error::Config(format!("`classify.roof_max_slope` must be <= 90, got {}", rules.roof_max_slope)));
        }
        let verify = VerifyParams {
            roof_dist_threshold: s.num("verify.roof_dist_threshold")?,
            negi_threshold: s.num("verify.negi_threshold")?,
            vegetation_fraction_min: s.num("verify.vegetation_fraction_min")?,
            footprint_buffer: s.num("verify.footprint_buffer")?,
            canopy_presence_max: s.num("verify.canopy_presence_max")?,
        };
        verify.validate()?;
        let train = TrainConfig {
            batch_size: s.num("train.batch_size")?,
            learning_rate: s.num("train.learning_rate")?,
            epochs: s.num("train.epochs")?,
            margin: s.num("train.margin")?,
            seed,
            decision_threshold: s.num("train.decision_threshold")?,
            optimizer: match s.get("train.optimizer") {
                "adam" => OptimizerKind::Adam,
                "sgd" => OptimizerKind::Sgd,
                v => return Err(Error::Config(format!("`train.optimizer` must be adam or sgd, got {v:?}"))),
            },
            validation_fraction: s.num("train.validation_fraction")?,
            augment_changed: s.flag("train.augment_changed")?,
        };
        train.validate()?;
        let model = |prefix: &str, base: SamplingModel| -> Result<SamplingModel> {
            let m = SamplingModel {
                density: s.positive(&format!("{prefix}.density"))?,
                surface_noise_sigma: s.num(&format!("{prefix}.noise_sigma"))?,
                canopy_penetration: s.flag(&format!("{prefix}.canopy_penetration"))?,
                canopy_match_failure_prob: s.probability(&format!("{prefix}.canopy_failure_prob"))?,
                registration_shift: (s.num(&format!("{prefix}.shift_x"))?, s.num(&format!("{prefix}.shift_y"))?),
                ..base
            };
            m.validate()?;
            Ok(m)
        };
        let world = WorldConfig {
            size: s.positive("synth.size")?,
            counts: SceneCounts { buildings: s.num("synth.buildings")?, trees: s.num("synth.trees")? },
            changes: ChangeSpec {
                add_buildings: s.num("synth.add_buildings")?,
                remove_buildings: s.num("synth.remove_buildings")?,
                add_trees: s.num("synth.add_trees")?,
                remove_trees: s.num("synth.remove_trees")?,
                seed,
            },
            laser: model("laser", SamplingModel::laser())?,
            dense: model("dense", SamplingModel::dense_matching())?,
            gap_count: s.num("synth.gap_count")?,
            gap_size: s.positive("synth.gap_size")?,
            gap_drop_prob: s.probability("synth.gap_drop_prob")?,
            ortho_cell: s.positive("synth.ortho_cell")?,
            tile: s.positive("raster.patch_size")?,
            seed,
        };
        let cfg = PipelineConfig {
            seed,
            threads: s.num("run.threads")?,
            deterministic: s.flag("run.deterministic")?,
            out_dir: PathBuf::from(s.get("output.dir")),
            inputs: Inputs {
                cloud_a: s.path("input.cloud_a"),
                cloud_b: s.path("input.cloud_b"),
                ortho: s.path("input.ortho"),
                camera: s.path("input.camera"),
                labels: s.path("input.labels"),
                truth: s.path("input.truth"),
                pairs: s.path("input.pairs").map(|p| p.to_string_lossy().into_owned()),
                model: s.path("input.model"),
            },
            cell: s.positive("raster.cell")?,
            footprint: s.num("raster.footprint")?,
            patch_size: s.positive("raster.patch_size")?,
            bounds,
            dtm_cloud,
            gray,
            ground,
            grow,
            rules,
            verify,
            train,
            world,
            train_worlds: s.num("pipeline.train_worlds")?,
            test_seed_offset: s.num("pipeline.test_seed_offset")?,
        };
        if !(cfg.footprint >= 0.0) {
            return Err(Error::Config(format!("`raster.footprint` must be >= 0, got {}", cfg.footprint)));
        }
        patch_pixels(cfg.patch_size, cfg.cell)
            .map_err(|_| Error::Config(format!("`raster.patch_size` ({}) must be a whole number of `raster.cell` ({})", cfg.patch_size, cfg.cell)))?;
        if cfg.train_worlds == 0 {
            return Err(Error::Config("`pipeline.train_worlds` must be >= 1".into()));
        }
        Ok(cfg)
    }

    fn object_params(&self) -> ObjectParams {
        ObjectParams { ground: self.ground, grow: self.grow, rules: self.rules, verify: self.verify }
    }

    fn architecture(&self) -> Result<Architecture> {
        Ok(Architecture { input: patch_pixels(self.patch_size, self.cell)?, ..Architecture::default() })
    }
}

fn note(msg: impl AsRef<str>) {
    eprintln!("deltamap: {}", msg.as_ref());
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn or_default(explicit: &Option<PathBuf>, dir: &Path, name: &str) -> PathBuf {
    explicit.clone().unwrap_or_else(|| dir.join(name))
}

fn save_grid_spec(path: &Path, g: &GridSpec) -> Result<()> {
    let s = format!("{} {} {} {} {}\n", g.origin.0, g.origin.1, g.cell, g.width, g.height);
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn load_grid_spec(path: &Path) -> Result<GridSpec> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let t: Vec<&str> = text.split_whitespace().collect();
    let bad = || Error::Parse { path: path.to_path_buf(), line: 1, msg: "expected `origin_x origin_y cell width height`".into() };
    if t.len() != 5 {
        return Err(bad());
    }
    let f = |i: usize| t[i].parse::<f64>().map_err(|_| bad());
    let u = |i: usize| t[i].parse::<usize>().map_err(|_| bad());
    GridSpec::new((f(0)?, f(1)?), f(2)?, u(3)?, u(4)?)
}

/// Writes one synthetic two-epoch world into `dir`.
pub fn run_synth(cfg: &PipelineConfig, dir: &Path, seed: u64) -> Result<()> {
    create_dir(dir)?;
    let wc = WorldConfig { seed, changes: ChangeSpec { seed, ..cfg.world.changes }, ..cfg.world.clone() };
    let w = build_world(&wc)?;
    save_scene(&dir.join("scene_a.txt"), &w.scene_a)?;
    save_scene(&dir.join("scene_b.txt"), &w.scene_b)?;
    save_cloud(&dir.join("cloud_a.xyz"), &w.laser, CloudFormat::XyzAscii)?;
    save_cloud(&dir.join("cloud_b.xyz"), &w.dense, CloudFormat::XyzAscii)?;
    w.ortho.save_ppm(&dir.join("ortho.ppm"))?;
    save_grid_spec(&dir.join("ortho.grid"), &w.ortho.spec)?;
    w.camera.save(&dir.join("ortho.camera"))?;
    save_truth(&dir.join("truth.csv"), &w.truth.records)?;
    w.truth.tiles.save_csv(&dir.join("truth_tiles.csv"))?;
    w.visible.save_csv(&dir.join("labels.csv"))?;
    let mut fails = String::from("id,center_x,center_y,radius\n");
    for t in w.scene_a.trees.iter().filter(|t| w.scene_b.trees.iter().any(|s| s.id == t.id)) {
        if canopy_failed(&w.dense_model, seed, t.id) {
            fails.push_str(&format!("{},{},{},{}\n", t.id, t.center.0, t.center.1, t.radius));
        }
    }
    let p = dir.join("canopy_failures.csv");
    fs::write(&p, fails).map_err(|e| Error::io(&p, e))?;
    note(format!(
        "synth {}: {} laser points, {} dense points, {} planted changes, {} changed tiles",
        dir.display(),
        w.laser.len(),
        w.dense.len(),
        w.truth.records.len(),
        w.visible.count()
    ));
    Ok(())
}

fn load_clouds(cfg: &PipelineConfig, dir: &Path) -> Result<(PointCloud, PointCloud)> {
    let a = load_cloud(&or_default(&cfg.inputs.cloud_a, dir, "cloud_a.xyz"), CloudFormat::XyzAscii)?;
    let b = load_cloud(&or_default(&cfg.inputs.cloud_b, dir, "cloud_b.xyz"), CloudFormat::XyzAscii)?;
    Ok((a, b))
}

/// Union of both clouds' extents, snapped outward to whole patches.
fn auto_bounds(a: &PointCloud, b: &PointCloud, patch: f64) -> Result<Bounds2> {
    let (ba, bb) = (a.bounds().ok_or_else(|| Error::Empty("cloud A".into()))?, b.bounds().ok_or_else(|| Error::Empty("cloud B".into()))?);
    let snap_down = |v: f64| (v / patch + 1e-6).floor() * patch;
    let snap_up = |v: f64| (v / patch - 1e-6).ceil() * patch;
    let mut u = Bounds2 {
        min_x: snap_down(ba.min_x.min(bb.min_x)),
        min_y: snap_down(ba.min_y.min(bb.min_y)),
        max_x: snap_up(ba.max_x.max(bb.max_x)),
        max_y: snap_up(ba.max_y.max(bb.max_y)),
    };
    if u.max_x <= u.min_x {
        u.max_x = u.min_x + patch;
    }
    if u.max_y <= u.min_y {
        u.max_y = u.min_y + patch;
    }
    Ok(u)
}

pub fn run_rasterize(cfg: &PipelineConfig, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    let (a, b) = load_clouds(cfg, dir)?;
    let bounds = match cfg.bounds {
        Some(b) => b,
        None => auto_bounds(&a, &b, cfg.patch_size)?,
    };
    let grid = GridSpec::covering(&bounds, cfg.cell)?;
    let dtm_src = match cfg.dtm_cloud {
        DtmCloud::A => a.clone(),
        DtmCloud::B => b.clone(),
        DtmCloud::Both => PointCloud::new([a.points.clone(), b.points.clone()].concat(), a.source),
    };
    let ground = ground_points(&filter_ground(&dtm_src, &cfg.ground)?);
    note(format!("rasterize: {} of {} points are ground", ground.len(), dtm_src.len()));
    let dtm = build_dtm(&ground, &grid)?;
    let ndsm_a = normalize_dsm(&rasterize_dsm_footprint(&a, &grid, cfg.footprint)?, &dtm)?;
    let ndsm_b = normalize_dsm(&rasterize_dsm_footprint(&b, &grid, cfg.footprint)?, &dtm)?;
    dtm.save(&dir.join("dtm.grid"))?;
    ndsm_a.save(&dir.join("ndsm_a.grid"))?;
    ndsm_b.save(&dir.join("ndsm_b.grid"))?;
    note(format!(
        "rasterize: {}x{} cells, empty A {:.1} %, empty B {:.1} %",
        grid.width,
        grid.height,
        100.0 * ndsm_a.empty_fraction(),
        100.0 * ndsm_b.empty_fraction()
    ));
    Ok(())
}

fn load_labels(cfg: &PipelineConfig, dir: &Path, grid: &GridSpec) -> Result<Option<TileMask>> {
    let path = match &cfg.inputs.labels {
        Some(p) => p.clone(),
        None => {
            let p = dir.join("labels.csv");
            if !p.exists() {
                return Ok(None);
            }
            p
        }
    };
    let mut mask = TileMask::new(&grid.bounds(), cfg.patch_size);
    mask.load_flags(&path)?;
    Ok(Some(mask))
}

pub fn run_patchify(cfg: &PipelineConfig, dir: &Path) -> Result<PathBuf> {
    let ra = RasterGrid::load(&dir.join("ndsm_a.grid"))?;
    let rb = RasterGrid::load(&dir.join("ndsm_b.grid"))?;
    let mut pairs = patchify(&ra, &rb, cfg.patch_size, &cfg.gray)?;
    if let Some(mask) = load_labels(cfg, dir, &ra.spec)? {
        for p in &mut pairs {
            let (r, c) = p.tile;
            if r < mask.rows && c < mask.cols {
                p.label = Some(Label::from_flag(mask.get(r, c)));
            }
        }
    }
    let manifest = save_pairs(&dir.join("patches"), &pairs)?;
    let valid = pairs.iter().filter(|p| p.valid).count();
    let changed = pairs.iter().filter(|p| p.valid && p.label == Some(Label::Changed)).count();
    note(format!("patchify: {} pairs, {valid} valid, {changed} labeled changed", pairs.len()));
    Ok(manifest)
}

fn pair_manifests(cfg: &PipelineConfig, dir: &Path) -> Vec<PathBuf> {
    match &cfg.inputs.pairs {
        Some(list) => list.split(',').map(|s| PathBuf::from(s.trim())).collect(),
        None => vec![dir.join("patches").join("manifest.csv")],
    }
}

/// Trains on the valid, labeled pairs of every manifest; writes the model and
/// training logs into `dir`.
pub fn run_train(cfg: &PipelineConfig, dir: &Path, manifests: &[PathBuf]) -> Result<TrainOutcome> {
    create_dir(dir)?;
    let mut data: Vec<PatchPair> = Vec::new();
    for m in manifests {
        data.extend(load_pairs(m, None)?.into_iter().filter(|p| p.valid && p.label.is_some()));
    }
    let changed = data.iter().filter(|p| p.label == Some(Label::Changed)).count();
    note(format!("train: {} labeled pairs ({changed} changed) from {} manifest(s)", data.len(), manifests.len()));
    let arch = cfg.architecture()?;
    let out = train_with_progress(&data, &arch, &cfg.train, |e| {
        note(format!(
            "train: epoch {} mean loss {:.5}, validation accuracy {:.3} (threshold rule {:.3})",
            e.epoch, e.mean_loss, e.val_accuracy, e.val_threshold_accuracy
        ))
    })?;
    save_model(&or_default(&None, dir, "model.scnn"), &out.params)?;
    save_history(&dir.join("history.csv"), &out.history)?;
    let mut s = String::from("epoch,mean_loss,val_accuracy,val_threshold_accuracy\n");
    for e in &out.epochs {
        s.push_str(&format!("{},{:.6},{:.6},{:.6}\n", e.epoch, e.mean_loss, e.val_accuracy, e.val_threshold_accuracy));
    }
    let p = dir.join("epochs.csv");
    fs::write(&p, s).map_err(|e| Error::io(&p, e))?;
    note(format!("train: kept epoch {}", out.best_epoch));
    Ok(out)
}

pub fn run_infer(cfg: &PipelineConfig, dir: &Path, model: &Path) -> Result<ChangeMap> {
    let grid = RasterGrid::load(&dir.join("ndsm_a.grid"))?.spec;
    let params = load_model(model, patch_pixels(cfg.patch_size, cfg.cell)?)?;
    let mut pairs = Vec::new();
    for m in pair_manifests(cfg, dir) {
        pairs.extend(load_pairs(&m, Some(&grid))?);
    }
    let thr = cfg.train.decision_threshold;
    let results: Vec<Result<_>> = pairs.par_iter().map(|p| classify(&params, p, thr)).collect();
    let results: Vec<_> = results.into_iter().collect::<Result<_>>()?;
    let map = build_change_map(&grid, cfg.patch_size, &pairs, &results)?;
    map.save_csv(&dir.join("changemap.csv"))?;
    map.save_pgm(&dir.join("changemap.pgm"))?;
    let (c, u, i) = map.counts();
    note(format!("infer: {c} changed, {u} unchanged, {i} invalid tiles"));
    Ok(map)
}

pub fn run_objects(cfg: &PipelineConfig, dir: &Path) -> Result<usize> {
    let map = ChangeMap::load_csv(&dir.join("changemap.csv"))?;
    let (a, b) = load_clouds(cfg, dir)?;
    let dtm = RasterGrid::load(&dir.join("dtm.grid"))?;
    let ortho_path = or_default(&cfg.inputs.ortho, dir, "ortho.ppm");
    let ortho_grid = load_grid_spec(&ortho_path.with_extension("grid"))?;
    let ortho = RgbRaster::load_ppm(&ortho_path, ortho_grid)?;
    let cam_path = or_default(&cfg.inputs.camera, dir, "ortho.camera");
    let mut images = Vec::new();
    if cfg.inputs.camera.is_some() || cam_path.exists() {
        let camera = CameraModel::load(&cam_path)?;
        let (w, h) = camera.image_size();
        if (w as usize, h as usize) != (ortho.spec.width, ortho.spec.height) {
            return Err(Error::Camera(format!("{}: image size {w}x{h} does not match the ortho", cam_path.display())));
        }
        images.push(CameraImage { camera, width: w as usize, height: h as usize, pixels: ortho.pixels.clone() });
    }
    let rois = group_rois(&map, cfg.patch_size);
    let inputs = ObjectInputs::new(&a, &b, &dtm, &ortho, &images, &map);
    let objects = detect_all(&rois, &inputs, &cfg.object_params())?;
    write_report(&dir.join("report.csv"), &objects)?;
    note(format!("objects: {} regions, {} objects", rois.len(), objects.len()));
    Ok(objects.len())
}

/// Patch and object scores of one evaluated world.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub patch_accuracy: Metric,
    pub buildings: Option<crate::evalx::ObjectScore>,
    pub trees: Option<crate::evalx::ObjectScore>,
    /// (candidates, verified unchanged) for kept trees whose canopy matching failed.
    pub canopy_failures: Option<(usize, usize)>,
}

pub fn run_eval(cfg: &PipelineConfig, dir: &Path) -> Result<EvalSummary> {
    let map = ChangeMap::load_csv(&dir.join("changemap.csv"))?;
    let bounds = Bounds2 {
        min_x: map.origin.0,
        max_y: map.origin.1,
        max_x: map.origin.0 + map.cols as f64 * map.tile,
        min_y: map.origin.1 - map.rows as f64 * map.tile,
    };
    let labels_path = or_default(&cfg.inputs.labels, dir, "labels.csv");
    let mut labels = TileMask::new(&bounds, map.tile);
    labels.load_flags(&labels_path)?;
    let (mut pred, mut truth) = (Vec::new(), Vec::new());
    for r in 0..map.rows.min(labels.rows) {
        for c in 0..map.cols.min(labels.cols) {
            match map.state(r, c) {
                TileState::Invalid => {}
                s => {
                    pred.push(s == TileState::Changed);
                    truth.push(labels.get(r, c));
                }
            }
        }
    }
    let conf = tally(&pred, &truth)?;
    write_metrics(&dir.join("metrics.csv"), &conf)?;
    let m = metrics(&conf);
    note(format!("eval: accuracy {} precision {} recall {} over {} valid tiles", m.accuracy, m.precision, m.recall, conf.total()));
    let mut summary = EvalSummary { patch_accuracy: m.accuracy, buildings: None, trees: None, canopy_failures: None };
    let truth_path = or_default(&cfg.inputs.truth, dir, "truth.csv");
    let report_path = dir.join("report.csv");
    if truth_path.exists() && report_path.exists() {
        let records = load_truth(&truth_path)?;
        let rows = load_report(&report_path)?;
        let b = score_objects(&records, &rows, ObjectClass::Building, 1.0);
        let t = score_objects(&records, &rows, ObjectClass::Tree, 1.0);
        let mut s = String::from("class,true_changes,recovered,false_changes\n");
        for (name, sc) in [("building", b), ("tree", t)] {
            s.push_str(&format!("{name},{},{},{}\n", sc.true_changes, sc.recovered, sc.false_changes));
        }
        let fail_path = dir.join("canopy_failures.csv");
        if fail_path.exists() {
            let text = fs::read_to_string(&fail_path).map_err(|e| Error::io(&fail_path, e))?;
            let disks: Vec<(f64, f64, f64)> = text
                .lines()
                .skip(1)
                .filter_map(|l| {
                    let f: Vec<f64> = l.split(',').filter_map(|v| v.parse().ok()).collect();
                    (f.len() == 4).then(|| (f[1], f[2], f[3]))
                })
                .collect();
            let cands: Vec<_> = rows
                .iter()
                .filter(|r| r.class == ObjectClass::Tree && r.epoch == crate::change::Epoch::A)
                .filter(|r| disks.iter().any(|&(x, y, rad)| (r.centroid.0 - x).hypot(r.centroid.1 - y) < rad + 1.0))
                .collect();
            let kept = cands.iter().filter(|r| r.status == crate::change::ChangeStatus::UnchangedAfterVerification).count();
            s.push_str(&format!("# canopy_failure_candidates,{},verified_unchanged,{kept}\n", cands.len()));
            note(format!("eval: {kept} of {} canopy-failure candidates verified unchanged", cands.len()));
            summary.canopy_failures = Some((cands.len(), kept));
        }
        let p = dir.join("objects_eval.csv");
        fs::write(&p, s).map_err(|e| Error::io(&p, e))?;
        note(format!(
            "eval: buildings {}/{} recovered, {} false; trees {}/{} recovered, {} false",
            b.recovered, b.true_changes, b.false_changes, t.recovered, t.true_changes, t.false_changes
        ));
        summary.buildings = Some(b);
        summary.trees = Some(t);
    }
    Ok(summary)
}

/// Synthetic training worlds, a held-out test world, training, inference,
/// object extraction and evaluation.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<EvalSummary> {
    let out = &cfg.out_dir;
    let mut manifests = Vec::new();
    for k in 0..cfg.train_worlds {
        let dir = out.join(format!("train_{k}"));
        run_synth(cfg, &dir, cfg.seed.wrapping_add(k as u64))?;
        run_rasterize(cfg, &dir)?;
        manifests.push(run_patchify(cfg, &dir)?);
    }
    let test = out.join("test");
    run_synth(cfg, &test, cfg.seed.wrapping_add(cfg.test_seed_offset))?;
    run_rasterize(cfg, &test)?;
    run_patchify(cfg, &test)?;
    run_train(cfg, out, &manifests)?;
    run_infer(cfg, &test, &out.join("model.scnn"))?;
    run_objects(cfg, &test)?;
    run_eval(cfg, &test)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Command {
    Synth,
    Rasterize,
    Patchify,
    Train,
    Infer,
    Objects,
    Eval,
    Pipeline,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Rasterize => "rasterize",
            Command::Patchify => "patchify",
            Command::Train => "train",
            Command::Infer => "infer",
            Command::Objects => "objects",
            Command::Eval => "eval",
            Command::Pipeline => "pipeline",
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "deltamap",
    about = "Building and tree change detection between laser and dense-matching point clouds",
    after_help = "Any config key can be overridden as `--section.key value`, e.g. `--seed 7 --train.epochs 3`.\n`--out DIR` sets output.dir, `--threads N` sets run.threads, `--deterministic` sets run.deterministic.\nDELTAMAP_THREADS overrides the thread count."
)]
struct Args {
    #[arg(value_enum)]
    command: Command,
    /// `section.key = value` config file.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// `--key value` overrides.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

/// Resolves settings from an optional config file plus overrides.
pub fn resolve(config: Option<&Path>, overrides: &[String]) -> Result<(Settings, PipelineConfig)> {
    let mut s = Settings::default();
    if let Some(p) = config {
        s.load_file(p)?;
    }
    s.apply_overrides(overrides)?;
    let cfg = PipelineConfig::from_settings(&s)?;
    Ok((s, cfg))
}

fn init_threads(cfg: &PipelineConfig) -> Result<()> {
    let n = match std::env::var("DELTAMAP_THREADS") {
        Ok(v) => v.trim().parse::<usize>().map_err(|_| Error::Config(format!("DELTAMAP_THREADS must be a count, got {v:?}")))?,
        Err(_) => cfg.threads,
    };
    // a pool may already exist when called twice in one process
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Runs one subcommand with an already-resolved configuration.
pub fn execute(command: Command, settings: &Settings, cfg: &PipelineConfig) -> Result<()> {
    let dir = &cfg.out_dir;
    create_dir(dir)?;
    let manifest = dir.join("manifest.txt");
    fs::write(&manifest, settings.to_config_text(command.name())).map_err(|e| Error::io(&manifest, e))?;
    match command {
        Command::Synth => run_synth(cfg, dir, cfg.seed),
        Command::Rasterize => run_rasterize(cfg, dir),
        Command::Patchify => run_patchify(cfg, dir).map(|_| ()),
        Command::Train => run_train(cfg, dir, &pair_manifests(cfg, dir)).map(|_| ()),
        Command::Infer => run_infer(cfg, dir, &or_default(&cfg.inputs.model, dir, "model.scnn")).map(|_| ()),
        Command::Objects => run_objects(cfg, dir).map(|_| ()),
        Command::Eval => run_eval(cfg, dir).map(|_| ()),
        Command::Pipeline => run_pipeline(cfg).map(|_| ()),
    }
}

/// Entry point of the binary; returns the process exit code.
pub fn main_with_args(argv: Vec<String>) -> i32 {
    let args = match Args::try_parse_from(argv) {
        Ok(a) => a,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let run = || -> Result<()> {
        let (settings, cfg) = resolve(args.config.as_deref(), &args.overrides)?;
        init_threads(&cfg)?;
        execute(args.command, &settings, &cfg)
    };
    match run() {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("deltamap: error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn defaults_match_documented_values() {
        let cfg = PipelineConfig::from_settings(&Settings::default()).unwrap();
        assert_eq!((cfg.cell, cfg.patch_size), (0.1, 10.0));
        assert_eq!(cfg.architecture().unwrap().input, 100);
        assert_eq!((cfg.gray.q, cfg.gray.t), (10.0, -2.0));
        assert_eq!(crate::raster::MAX_GAP_RATIO, 0.5);
        assert_eq!((cfg.train.batch_size, cfg.train.learning_rate, cfg.train.epochs), (128, 1e-4, 10));
        assert_eq!(cfg.train.decision_threshold, 0.5);
        assert_eq!((cfg.grow.grow_radius, cfg.grow.max_plane_dist), (1.0, 0.2));
        assert_eq!(cfg.verify.roof_dist_threshold, 0.5);
        assert_eq!(cfg.world.laser, SamplingModel::laser());
        assert_eq!(cfg.world.dense, SamplingModel::dense_matching());
    }

    #[test]
    fn overrides_and_unknown_keys() {
        let (_, cfg) = resolve(None, &args("--seed 7 --train.epochs=3 --deterministic --out /tmp/x")).unwrap();
        assert_eq!((cfg.seed, cfg.train.epochs, cfg.deterministic), (7, 3, true));
        assert_eq!(cfg.out_dir, PathBuf::from("/tmp/x"));
        assert_eq!(cfg.train.seed, 7);
        match resolve(None, &args("--train.epochz 3")) {
            Err(Error::Config(m)) => assert!(m.contains("train.epochz"), "{m}"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(resolve(None, &args("--seed")), Err(Error::Config(_))));
    }

    #[test]
    fn invariant_violations_name_the_field() {
        for (over, field) in [
            ("--raster.cell -1", "raster.cell"),
            ("--verify.vegetation_fraction_min 1.5", "vegetation_fraction_min"),
            ("--train.batch_size 0", "train.batch_size"),
            ("--dense.canopy_failure_prob 2", "dense.canopy_failure_prob"),
            ("--terrain.max_angle 95", "terrain.max_angle"),
            ("--raster.patch_size 10.05", "raster.patch_size"),
        ] {
            match resolve(None, &args(over)) {
                Err(Error::Config(m)) => assert!(m.contains(field), "{over}: {m}"),
                other => panic!("{over}: {other:?}"),
            }
        }
    }

    #[test]
    fn config_file_and_manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.cfg");
        fs::write(&p, "# experiment\nseed = 11\nsynth.size = 50\n\ntrain.optimizer = sgd\n").unwrap();
        let (s, cfg) = resolve(Some(&p), &args("--synth.buildings 2")).unwrap();
        assert_eq!((cfg.seed, cfg.world.size, cfg.world.counts.buildings), (11, 50.0, 2));
        assert_eq!(cfg.train.optimizer, OptimizerKind::Sgd);
        let m = dir.path().join("manifest.txt");
        fs::write(&m, s.to_config_text("synth")).unwrap();
        let (s2, cfg2) = resolve(Some(&m), &[]).unwrap();
        assert_eq!((s2, cfg2), (s, cfg));
        fs::write(&p, "seed = 1\nbogus.key = 2\n").unwrap();
        match resolve(Some(&p), &[]) {
            Err(Error::Config(m)) => assert!(m.contains("bogus.key") && m.contains(":2"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn exit_codes() {
        assert_eq!(main_with_args(args("deltamap pipeline --no.such.key 1")), 1);
        assert_eq!(main_with_args(args("deltamap frobnicate")), 1);
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_string_lossy().into_owned();
        let missing = dir.path().join("nope.xyz");
        let code = main_with_args(args(&format!("deltamap rasterize --out {out} --input.cloud_a {}", missing.display())));
        assert_eq!(code, 2);
        assert!(dir.path().join("manifest.txt").exists());
    }

    #[test]
    fn auto_bounds_snap_to_patches() {
        use crate::pointcloud_io::{Point3, Source};
        let a = PointCloud::new(vec![Point3::new(0.01, 0.2, 0.0), Point3::new(199.97, 199.9, 0.0)], Source::Laser);
        let b = PointCloud::new(vec![Point3::new(0.08, -0.04, 0.0)], Source::DenseMatching);
        let u = auto_bounds(&a, &b, 10.0).unwrap();
        assert_eq!((u.min_x, u.min_y, u.max_x, u.max_y), (0.0, -10.0, 200.0, 200.0));
    }

    #[test]
    fn grid_spec_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("o.grid");
        let g = GridSpec::new((1.5, 99.25), 0.1, 40, 30).unwrap();
        save_grid_spec(&p, &g).unwrap();
        assert_eq!(load_grid_spec(&p).unwrap(), g);
    }
}
