//! Seeded synthetic surround-view scenes, their 2D annotations and depth
//! maps, and the on-disk dataset format.

use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::depth::{render_synthetic_depth, DepthError, DepthMap};
use crate::geometry::{normalize_angle, project_box, Box2D, Box3D, Camera, GeometryError, Intrinsics, Vec3};

pub const FORMAT_VERSION: u32 = 1;
pub const MAX_PLACEMENT_TRIES: usize = 1000;

pub const CLASS_NAMES: [&str; 10] = [
    "car",
    "truck",
    "construction_vehicle",
    "bus",
    "trailer",
    "barrier",
    "motorcycle",
    "bicycle",
    "pedestrian",
    "traffic_cone",
];

/// Typical `(l, w, h)` per class, in the order of [`CLASS_NAMES`].
const CLASS_DIMS: [[f64; 3]; 10] = [
    [4.6, 1.95, 1.73],
    [6.9, 2.5, 2.8],
    [6.4, 2.8, 3.2],
    [11.0, 2.9, 3.5],
    [12.0, 2.9, 3.9],
    [0.5, 2.5, 1.0],
    [2.1, 0.8, 1.5],
    [1.7, 0.6, 1.3],
    [0.73, 0.67, 1.77],
    [0.41, 0.41, 1.07],
];

/// Rough cruising speed per class, m/s.
const CLASS_SPEED: [f64; 10] = [8.0, 6.0, 2.0, 6.0, 4.0, 0.0, 6.0, 3.0, 1.2, 0.0];

pub const NUM_ATTRIBUTES: u8 = 4;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("scene {scene}: could not place box {index} after {tries} attempts")]
    PlacementFailure { scene: usize, index: usize, tries: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("{file}:{line}: {reason}")]
    Format { file: String, line: usize, reason: String },
    #[error("checksum mismatch for {path}")]
    ChecksumMismatch { path: String },
    #[error("unsupported format version {found} in {file} (supported: {supported})")]
    UnsupportedVersion { file: String, found: u32, supported: u32 },
    #[error("scene {0} carries only 2D labels")]
    GroundTruthHidden(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Depth(#[from] DepthError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SceneError + '_ {
    move |source| SceneError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RigPreset {
    /// Six cameras at 60° spacing, 70° field of view, 1600×900.
    Nuscenes,
    /// Five forward and side cameras, 50° field of view, 1920×1280.
    Waymo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rig {
    pub preset: RigPreset,
    pub image_scale: f64,
    pub cameras: Vec<Camera>,
}

impl Rig {
    pub fn new(preset: RigPreset, image_scale: f64) -> Result<Self, SceneError> {
        if !(image_scale > 0.0 && image_scale <= 4.0) {
            return Err(SceneError::InvalidConfig(format!("image_scale {image_scale}")));
        }
        let (w, h, hfov, cams): (f64, f64, f64, Vec<(&str, f64)>) = match preset {
            RigPreset::Nuscenes => (
                1600.0,
                900.0,
                70.0,
                vec![
                    ("CAM_FRONT_LEFT", 60.0),
                    ("CAM_FRONT", 0.0),
                    ("CAM_FRONT_RIGHT", -60.0),
                    ("CAM_BACK_LEFT", 120.0),
                    ("CAM_BACK", 180.0),
                    ("CAM_BACK_RIGHT", -120.0),
                ],
            ),
            RigPreset::Waymo => (
                1920.0,
                1280.0,
                50.0,
                vec![
                    ("SIDE_LEFT", 90.0),
                    ("FRONT_LEFT", 45.0),
                    ("FRONT", 0.0),
                    ("FRONT_RIGHT", -45.0),
                    ("SIDE_RIGHT", -90.0),
                ],
            ),
        };
        let width = (w * image_scale).round().max(1.0) as u32;
        let height = (h * image_scale).round().max(1.0) as u32;
        let f = (width as f64 / 2.0) / (hfov.to_radians() / 2.0).tan();
        let k = Intrinsics::new(f, f, width as f64 / 2.0, height as f64 / 2.0)?;
        let cameras = cams
            .into_iter()
            .map(|(id, deg)| {
                let yaw = deg.to_radians();
                let pos = Vec3::new(yaw.cos(), yaw.sin(), 1.6);
                Camera::looking_along(id, k, yaw, pos, width, height)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            preset,
            image_scale,
            cameras,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub rig: RigPreset,
    pub image_scale: f64,
    pub min_boxes: usize,
    pub max_boxes: usize,
    pub min_radius: f64,
    pub max_radius: f64,
    /// Relative sampling weight per class; length must match the class list.
    pub class_weights: Vec<f64>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            rig: RigPreset::Nuscenes,
            image_scale: 1.0,
            min_boxes: 4,
            max_boxes: 12,
            min_radius: 6.0,
            max_radius: 40.0,
            class_weights: vec![4.0, 1.0, 0.5, 0.5, 0.5, 1.0, 1.0, 1.0, 2.0, 1.0],
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: String| Err(SceneError::InvalidConfig(m));
        if self.min_boxes > self.max_boxes {
            return bad(format!("min_boxes {} > max_boxes {}", self.min_boxes, self.max_boxes));
        }
        if !(self.min_radius > 0.0 && self.max_radius > self.min_radius) {
            return bad(format!("radius range [{}, {}]", self.min_radius, self.max_radius));
        }
        if self.class_weights.len() != CLASS_NAMES.len() {
            return bad(format!("{} class weights for {} classes", self.class_weights.len(), CLASS_NAMES.len()));
        }
        if self.class_weights.iter().any(|w| !(*w >= 0.0)) || self.class_weights.iter().sum::<f64>() <= 0.0 {
            return bad("class weights must be nonnegative with a positive sum".into());
        }
        if !(self.image_scale > 0.0 && self.image_scale <= 4.0) {
            return bad(format!("image_scale {}", self.image_scale));
        }
        Ok(())
    }

    pub fn rig(&self) -> Result<Rig, SceneError> {
        Rig::new(self.rig, self.image_scale)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    Full3d,
    Only2d,
}

/// A 2D label in one camera; `source` is the index of the 3D box it was
/// projected from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub bbox: Box2D,
    pub class_id: usize,
    pub attribute_id: u8,
    pub source: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: String,
    pub label_mode: LabelMode,
    pub cameras: Vec<Camera>,
    gt_boxes: Vec<Box3D>,
    /// One list per camera.
    pub ann2d: Vec<Vec<Annotation>>,
    /// One map per camera.
    pub depth_maps: Vec<DepthMap>,
}

impl Scene {
    /// Builds a scene from explicit boxes, deriving annotations and depth.
    pub fn from_boxes(id: impl Into<String>, label_mode: LabelMode, cameras: Vec<Camera>, gt_boxes: Vec<Box3D>) -> Self {
        let ann2d = annotate(&cameras, &gt_boxes);
        let depth_maps = cameras.iter().map(|c| render_synthetic_depth(&gt_boxes, c)).collect();
        Self {
            id: id.into(),
            label_mode,
            cameras,
            gt_boxes,
            ann2d,
            depth_maps,
        }
    }

    /// 3D labels, available only for fully labelled scenes.
    pub fn gt_boxes(&self) -> Result<&[Box3D], SceneError> {
        match self.label_mode {
            LabelMode::Full3d => Ok(&self.gt_boxes),
            LabelMode::Only2d => Err(SceneError::GroundTruthHidden(self.id.clone())),
        }
    }

    /// The simulated world regardless of label mode. For synthesizing the
    /// initial detector and for measuring results, never for supervision.
    pub fn simulation_gt(&self) -> &[Box3D] {
        &self.gt_boxes
    }
}

/// Well-mixed per-index seed derived from a master seed.
pub fn splitmix64(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn sample_class(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut r = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if r < *w {
            return i;
        }
        r -= w;
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

fn sample_ground_position(rng: &mut ChaCha8Rng, r_min: f64, r_max: f64) -> (f64, f64) {
    let r = rng.gen_range(r_min * r_min..r_max * r_max).sqrt();
    let theta = rng.gen_range(-PI..PI);
    (r * theta.cos(), r * theta.sin())
}

fn footprint_radius(b: &Box3D) -> f64 {
    0.5 * b.dims[0].hypot(b.dims[1])
}

/// Places boxes on the ground plane without overlap.
fn place_boxes(rng: &mut ChaCha8Rng, config: &SceneConfig, scene: usize) -> Result<Vec<Box3D>, SceneError> {
    let count = rng.gen_range(config.min_boxes..=config.max_boxes);
    let mut boxes: Vec<Box3D> = Vec::with_capacity(count);
    for index in 0..count {
        let class_id = sample_class(rng, &config.class_weights);
        let typical = CLASS_DIMS[class_id];
        let dims = typical.map(|d| d * rng.gen_range(0.9..1.1));
        let yaw = rng.gen_range(-PI..PI);
        let speed = CLASS_SPEED[class_id] * rng.gen::<f64>();
        let attribute_id = rng.gen_range(0..NUM_ATTRIBUTES);
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_TRIES {
            let (x, y) = sample_ground_position(rng, config.min_radius, config.max_radius);
            let mut b = Box3D::new(Vec3::new(x, y, dims[2] / 2.0), dims, yaw);
            b.velocity = [speed * yaw.cos(), speed * yaw.sin()];
            b.class_id = class_id;
            b.attribute_id = attribute_id;
            let clear = boxes.iter().all(|o| {
                let d = (o.center.x - x).hypot(o.center.y - y);
                d > footprint_radius(o) + footprint_radius(&b)
            });
            if clear {
                placed = Some(b);
                break;
            }
        }
        boxes.push(placed.ok_or(SceneError::PlacementFailure {
            scene,
            index,
            tries: MAX_PLACEMENT_TRIES,
        })?);
    }
    Ok(boxes)
}

/// Projections of every visible box into every camera, in box order.
pub fn annotate(cameras: &[Camera], boxes: &[Box3D]) -> Vec<Vec<Annotation>> {
    cameras
        .iter()
        .map(|cam| {
            boxes
                .iter()
                .enumerate()
                .filter_map(|(i, b)| {
                    project_box(cam, b).ok().map(|bbox| Annotation {
                        bbox,
                        class_id: b.class_id,
                        attribute_id: b.attribute_id,
                        source: i,
                    })
                })
                .collect()
        })
        .collect()
}

/// Generates scene number `index` of a dataset seeded with `seed`.
pub fn generate_scene(seed: u64, index: usize, label_mode: LabelMode, rig: &Rig, config: &SceneConfig) -> Result<Scene, SceneError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed, index as u64));
    let gt_boxes = place_boxes(&mut rng, config, index)?;
    Ok(Scene::from_boxes(format!("scene_{index:04}"), label_mode, rig.cameras.clone(), gt_boxes))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    /// Per-axis standard deviation of the center offset, meters.
    pub center_sigma: f64,
    /// Standard deviation of the log scale factor applied to each dimension.
    pub scale_sigma: f64,
    pub yaw_sigma: f64,
    pub velocity_sigma: f64,
    pub class_flip_rate: f64,
    /// Expected spurious boxes per ground-truth box.
    pub spurious_rate: f64,
    pub drop_rate: f64,
    pub score_min: f64,
    pub score_max: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            center_sigma: 0.5,
            scale_sigma: 0.15,
            yaw_sigma: 0.2,
            velocity_sigma: 0.2,
            class_flip_rate: 0.05,
            spurious_rate: 0.1,
            drop_rate: 0.05,
            score_min: 0.3,
            score_max: 1.0,
        }
    }
}

impl NoiseConfig {
    pub fn zero() -> Self {
        Self {
            center_sigma: 0.0,
            scale_sigma: 0.0,
            yaw_sigma: 0.0,
            velocity_sigma: 0.0,
            class_flip_rate: 0.0,
            spurious_rate: 0.0,
            drop_rate: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let sig = [self.center_sigma, self.scale_sigma, self.yaw_sigma, self.velocity_sigma];
        let rates = [self.class_flip_rate, self.spurious_rate, self.drop_rate];
        if sig.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(SceneError::InvalidConfig("noise sigmas must be finite and nonnegative".into()));
        }
        if rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(SceneError::InvalidConfig("noise rates must lie in [0, 1]".into()));
        }
        if !(0.0 < self.score_min && self.score_min < self.score_max && self.score_max <= 1.0) {
            return Err(SceneError::InvalidConfig(format!(
                "score range [{}, {})",
                self.score_min, self.score_max
            )));
        }
        Ok(())
    }
}

/// A synthesized detection; `origin` names the ground-truth box it was
/// derived from, `None` for spurious ones.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoisyBox {
    pub bbox: Box3D,
    pub origin: Option<usize>,
}

fn normal(sigma: f64) -> Normal<f64> {
    Normal::new(0.0, sigma).expect("sigma validated")
}

/// Ground truth degraded into plausible detector output.
pub fn perturb_predictions(gt: &[Box3D], noise: &NoiseConfig, seed: u64) -> Result<Vec<NoisyBox>, SceneError> {
    noise.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (nc, ns, ny, nv) = (
        normal(noise.center_sigma),
        LogNormal::new(0.0, noise.scale_sigma).expect("sigma validated"),
        normal(noise.yaw_sigma),
        normal(noise.velocity_sigma),
    );
    let n_classes = CLASS_NAMES.len();
    let mut out = Vec::with_capacity(gt.len());
    for (i, g) in gt.iter().enumerate() {
        let drop = rng.gen::<f64>() < noise.drop_rate;
        let mut b = *g;
        b.center = b.center + Vec3::new(nc.sample(&mut rng), nc.sample(&mut rng), nc.sample(&mut rng));
        for d in &mut b.dims {
            *d *= ns.sample(&mut rng);
        }
        b.yaw = normalize_angle(b.yaw + ny.sample(&mut rng));
        b.velocity = [b.velocity[0] + nv.sample(&mut rng), b.velocity[1] + nv.sample(&mut rng)];
        if rng.gen::<f64>() < noise.class_flip_rate {
            b.class_id = (b.class_id + rng.gen_range(1..n_classes)) % n_classes;
        }
        b.score = rng.gen_range(noise.score_min..noise.score_max);
        let spurious = rng.gen::<f64>() < noise.spurious_rate;
        if !drop {
            out.push(NoisyBox { bbox: b, origin: Some(i) });
        }
        if spurious {
            let class_id = rng.gen_range(0..n_classes);
            let (x, y) = sample_ground_position(&mut rng, 6.0, 40.0);
            let dims = CLASS_DIMS[class_id];
            let mut s = Box3D::new(Vec3::new(x, y, dims[2] / 2.0), dims, rng.gen_range(-PI..PI));
            s.class_id = class_id;
            s.attribute_id = rng.gen_range(0..NUM_ATTRIBUTES);
            s.score = rng.gen_range(noise.score_min..noise.score_max);
            out.push(NoisyBox { bbox: s, origin: None });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub full3d_fraction: f64,
    pub full3d: usize,
    pub only2d: usize,
}

impl Split {
    /// The first `full3d` scenes carry 3D labels.
    pub fn new(scenes: usize, full3d_fraction: f64) -> Result<Self, SceneError> {
        if !(0.0..=1.0).contains(&full3d_fraction) {
            return Err(SceneError::InvalidConfig(format!("split fraction {full3d_fraction}")));
        }
        let full3d = (scenes as f64 * full3d_fraction).round() as usize;
        Ok(Self {
            full3d_fraction,
            full3d,
            only2d: scenes - full3d,
        })
    }

    pub fn mode_of(&self, index: usize) -> LabelMode {
        if index < self.full3d {
            LabelMode::Full3d
        } else {
            LabelMode::Only2d
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub scene_count: usize,
    pub split: Split,
    pub class_names: Vec<String>,
    pub scene_config: SceneConfig,
    pub rig: Rig,
    pub files: Vec<FileEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub scenes: Vec<Scene>,
}

impl Dataset {
    pub fn class_names(&self) -> &[String] {
        &self.manifest.class_names
    }

    pub fn scene(&self, id: &str) -> Option<&Scene> {
        self.scenes.iter().find(|s| s.id == id)
    }
}

/// Generates a complete dataset in memory. The manifest's file list is
/// filled in by [`write_dataset`].
pub fn generate_dataset(seed: u64, scenes: usize, full3d_fraction: f64, config: &SceneConfig) -> Result<Dataset, SceneError> {
    config.validate()?;
    let split = Split::new(scenes, full3d_fraction)?;
    let rig = config.rig()?;
    let scenes = (0..scenes)
        .map(|i| generate_scene(seed, i, split.mode_of(i), &rig, config))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Dataset {
        manifest: DatasetManifest {
            version: FORMAT_VERSION,
            seed,
            scene_count: scenes.len(),
            split,
            class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
            scene_config: config.clone(),
            rig,
            files: Vec::new(),
        },
        scenes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BoxRecord {
    center: [f64; 3],
    dims: [f64; 3],
    yaw: f64,
    vel: [f64; 2],
    class: usize,
    attribute: u8,
}

impl From<&Box3D> for BoxRecord {
    fn from(b: &Box3D) -> Self {
        Self {
            center: b.center.to_array(),
            dims: b.dims,
            yaw: b.yaw,
            vel: b.velocity,
            class: b.class_id,
            attribute: b.attribute_id,
        }
    }
}

impl BoxRecord {
    fn to_box(&self) -> Box3D {
        Box3D {
            center: Vec3::from_array(self.center),
            dims: self.dims,
            yaw: self.yaw,
            velocity: self.vel,
            class_id: self.class,
            score: 1.0,
            attribute_id: self.attribute,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnRecord {
    /// `[x, y, w, h, depth]`.
    bbox: [f64; 5],
    class: usize,
    attribute: u8,
    source: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneRecord {
    version: u32,
    id: String,
    label_mode: LabelMode,
    gt_boxes: Vec<BoxRecord>,
    ann2d: Vec<Vec<AnnRecord>>,
    depth: Vec<String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SCENES_FILE: &str = "scenes.jsonl";

fn depth_path(scene: &str, camera: &str) -> String {
    format!("depth/{scene}_{camera}.dpm")
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), SceneError> {
    fs::write(path, bytes).map_err(io_err(path))
}

/// Writes `manifest.json`, `scenes.jsonl` and one `.dpm` file per scene and
/// camera under `dir`. Returns the manifest with its file list filled in.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<DatasetManifest, SceneError> {
    let depth_dir = dir.join("depth");
    fs::create_dir_all(&depth_dir).map_err(io_err(&depth_dir))?;
    let mut files = Vec::new();
    let mut jsonl = String::new();
    for scene in &dataset.scenes {
        let mut depth = Vec::with_capacity(scene.cameras.len());
        for (cam, map) in scene.cameras.iter().zip(&scene.depth_maps) {
            let rel = depth_path(&scene.id, &cam.id);
            let bytes = map.to_bytes();
            write_file(&dir.join(&rel), &bytes)?;
            files.push(FileEntry {
                path: rel.clone(),
                sha256: sha256_hex(&bytes),
            });
            depth.push(rel);
        }
        let record = SceneRecord {
            version: FORMAT_VERSION,
            id: scene.id.clone(),
            label_mode: scene.label_mode,
            gt_boxes: scene.gt_boxes.iter().map(BoxRecord::from).collect(),
            ann2d: scene
                .ann2d
                .iter()
                .map(|anns| {
                    anns.iter()
                        .map(|a| AnnRecord {
                            bbox: a.bbox.to_array(),
                            class: a.class_id,
                            attribute: a.attribute_id,
                            source: a.source,
                        })
                        .collect()
                })
                .collect(),
            depth,
        };
        jsonl.push_str(&serde_json::to_string(&record).expect("scene record serializes"));
        jsonl.push('\n');
    }
    write_file(&dir.join(SCENES_FILE), jsonl.as_bytes())?;
    files.insert(
        0,
        FileEntry {
            path: SCENES_FILE.into(),
            sha256: sha256_hex(jsonl.as_bytes()),
        },
    );
    let manifest = DatasetManifest {
        files,
        ..dataset.manifest.clone()
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_file(&dir.join(MANIFEST_FILE), format!("{text}\n").as_bytes())?;
    Ok(manifest)
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, SceneError> {
    fs::read(path).map_err(io_err(path))
}

fn format_err(file: &str, line: usize, reason: impl Into<String>) -> SceneError {
    SceneError::Format {
        file: file.into(),
        line,
        reason: reason.into(),
    }
}

/// Reads and validates a dataset directory: versions, checksums, and that
/// every annotation is the exact projection of its source box.
pub fn read_dataset(dir: &Path) -> Result<Dataset, SceneError> {
    let manifest_bytes = read_bytes(&dir.join(MANIFEST_FILE))?;
    let raw: serde_json::Value = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| format_err(MANIFEST_FILE, e.line(), e.to_string()))?;
    let version = raw.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != FORMAT_VERSION {
        return Err(SceneError::UnsupportedVersion {
            file: MANIFEST_FILE.into(),
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let manifest: DatasetManifest =
        serde_json::from_value(raw).map_err(|e| format_err(MANIFEST_FILE, 0, e.to_string()))?;
    for cam in &manifest.rig.cameras {
        cam.validate()?;
    }

    let mut contents = std::collections::HashMap::new();
    for entry in &manifest.files {
        if entry.path.contains("..") || Path::new(&entry.path).is_absolute() {
            return Err(format_err(MANIFEST_FILE, 0, format!("bad file path {}", entry.path)));
        }
        let bytes = read_bytes(&dir.join(&entry.path))?;
        if sha256_hex(&bytes) != entry.sha256 {
            return Err(SceneError::ChecksumMismatch {
                path: entry.path.clone(),
            });
        }
        contents.insert(entry.path.clone(), bytes);
    }
    let scenes_bytes = contents
        .remove(SCENES_FILE)
        .ok_or_else(|| format_err(MANIFEST_FILE, 0, "scenes.jsonl not listed"))?;

    let cams = &manifest.rig.cameras;
    let mut scenes = Vec::with_capacity(manifest.scene_count);
    for (k, line) in BufReader::new(scenes_bytes.as_slice()).lines().enumerate() {
        let lineno = k + 1;
        let line = line.map_err(|e| format_err(SCENES_FILE, lineno, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| format_err(SCENES_FILE, lineno, e.to_string()))?;
        let v = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if v != FORMAT_VERSION {
            return Err(SceneError::UnsupportedVersion {
                file: format!("{SCENES_FILE}:{lineno}"),
                found: v,
                supported: FORMAT_VERSION,
            });
        }
        let rec: SceneRecord =
            serde_json::from_value(value).map_err(|e| format_err(SCENES_FILE, lineno, e.to_string()))?;
        let bad = |m: String| format_err(SCENES_FILE, lineno, m);
        if rec.ann2d.len() != cams.len() || rec.depth.len() != cams.len() {
            return Err(bad(format!("expected {} cameras", cams.len())));
        }
        let gt_boxes: Vec<Box3D> = rec.gt_boxes.iter().map(BoxRecord::to_box).collect();
        for b in &gt_boxes {
            b.validate().map_err(|e| bad(e.to_string()))?;
            if b.class_id >= manifest.class_names.len() {
                return Err(bad(format!("class {} out of range", b.class_id)));
            }
        }
        let mut ann2d = Vec::with_capacity(cams.len());
        for (cam, anns) in cams.iter().zip(&rec.ann2d) {
            let mut list = Vec::with_capacity(anns.len());
            for a in anns {
                let src = gt_boxes
                    .get(a.source)
                    .ok_or_else(|| bad(format!("annotation source {} out of range", a.source)))?;
                let bbox = Box2D::from_array(a.bbox);
                if project_box(cam, src).ok() != Some(bbox) || a.class != src.class_id || a.attribute != src.attribute_id {
                    return Err(bad(format!("annotation in {} disagrees with box {}", cam.id, a.source)));
                }
                list.push(Annotation {
                    bbox,
                    class_id: a.class,
                    attribute_id: a.attribute,
                    source: a.source,
                });
            }
            ann2d.push(list);
        }
        let mut depth_maps = Vec::with_capacity(cams.len());
        for (cam, rel) in cams.iter().zip(&rec.depth) {
            let bytes = contents
                .get(rel)
                .ok_or_else(|| bad(format!("depth file {rel} not listed in manifest")))?;
            let map = DepthMap::from_bytes(bytes)?;
            map.check_camera(cam)?;
            depth_maps.push(map);
        }
        scenes.push(Scene {
            id: rec.id,
            label_mode: rec.label_mode,
            cameras: cams.clone(),
            gt_boxes,
            ann2d,
            depth_maps,
        });
    }
    if scenes.len() != manifest.scene_count {
        return Err(format_err(
            SCENES_FILE,
            0,
            format!("{} scenes, manifest lists {}", scenes.len(), manifest.scene_count),
        ));
    }
    Ok(Dataset { manifest, scenes })
}

/// Default location of a dataset directory's manifest.
pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join(MANIFEST_FILE)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SceneConfig {
        SceneConfig {
            image_scale: 0.25,
            ..SceneConfig::default()
        }
    }

    #[test]
    fn same_seed_same_scene() {
        let cfg = small();
        let rig = cfg.rig().unwrap();
        let a = generate_scene(7, 3, LabelMode::Full3d, &rig, &cfg).unwrap();
        let b = generate_scene(7, 3, LabelMode::Full3d, &rig, &cfg).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(8, 3, LabelMode::Full3d, &rig, &cfg).unwrap();
        assert_ne!(a.gt_boxes, c.gt_boxes);
    }

    #[test]
    fn empty_scene() {
        let cfg = SceneConfig {
            min_boxes: 0,
            max_boxes: 0,
            ..small()
        };
        let s = generate_scene(1, 0, LabelMode::Full3d, &cfg.rig().unwrap(), &cfg).unwrap();
        assert!(s.ann2d.iter().all(|a| a.is_empty()));
        assert!(s.depth_maps.iter().all(|m| m.values().iter().all(|v| *v == f32::INFINITY)));
    }

    #[test]
    fn annotations_replay_projection() {
        let cfg = small();
        let rig = cfg.rig().unwrap();
        for i in 0..10 {
            let s = generate_scene(42, i, LabelMode::Full3d, &rig, &cfg).unwrap();
            let mut visible = 0;
            for (cam, anns) in s.cameras.iter().zip(&s.ann2d) {
                let expected: Vec<_> = s
                    .gt_boxes
                    .iter()
                    .enumerate()
                    .filter_map(|(k, b)| project_box(cam, b).ok().map(|p| (k, p)))
                    .collect();
                assert_eq!(expected.len(), anns.len());
                for ((k, p), a) in expected.iter().zip(anns) {
                    assert_eq!(*k, a.source);
                    assert_eq!(*p, a.bbox);
                    visible += 1;
                }
            }
            assert!(visible > 0);
            // no two footprints overlap
            for (a, b) in s.gt_boxes.iter().enumerate().flat_map(|(i, a)| s.gt_boxes[i + 1..].iter().map(move |b| (a, b))) {
                let d = (a.center.x - b.center.x).hypot(a.center.y - b.center.y);
                assert!(d > footprint_radius(a) + footprint_radius(b));
            }
        }
    }

    #[test]
    fn rig_geometry() {
        let rig = Rig::new(RigPreset::Nuscenes, 1.0).unwrap();
        assert_eq!(rig.cameras.len(), 6);
        let k = rig.cameras[0].intrinsics;
        assert!((k.fx - 800.0 / 35f64.to_radians().tan()).abs() < 1e-9);
        assert_eq!((rig.cameras[0].width, rig.cameras[0].height), (1600, 900));
        // a point straight ahead of the front camera lands on the principal point
        let front = &rig.cameras[1];
        let (u, v, _) = crate::geometry::project_point(front, Vec3::new(20.0, 0.0, 1.6)).unwrap();
        assert!((u - 800.0).abs() < 1e-9 && (v - 450.0).abs() < 1e-9);
        assert_eq!(Rig::new(RigPreset::Waymo, 1.0).unwrap().cameras.len(), 5);
    }

    #[test]
    fn placement_failure() {
        let cfg = SceneConfig {
            min_boxes: 200,
            max_boxes: 200,
            min_radius: 6.0,
            max_radius: 7.0,
            ..small()
        };
        let err = generate_scene(1, 0, LabelMode::Full3d, &cfg.rig().unwrap(), &cfg).unwrap_err();
        assert!(matches!(err, SceneError::PlacementFailure { .. }));
    }

    #[test]
    fn only2d_hides_ground_truth() {
        let cfg = small();
        let s = generate_scene(3, 0, LabelMode::Only2d, &cfg.rig().unwrap(), &cfg).unwrap();
        assert!(matches!(s.gt_boxes(), Err(SceneError::GroundTruthHidden(_))));
        assert!(!s.simulation_gt().is_empty());
    }

    #[test]
    fn zero_noise_is_identity() {
        let cfg = small();
        let s = generate_scene(5, 0, LabelMode::Full3d, &cfg.rig().unwrap(), &cfg).unwrap();
        let p = perturb_predictions(s.simulation_gt(), &NoiseConfig::zero(), 9).unwrap();
        assert_eq!(p.len(), s.simulation_gt().len());
        for (k, (n, g)) in p.iter().zip(s.simulation_gt()).enumerate() {
            assert_eq!(n.origin, Some(k));
            assert_eq!(Box3D { score: 1.0, ..n.bbox }, *g);
            assert!((0.3..1.0).contains(&n.bbox.score));
        }
        assert_eq!(p, perturb_predictions(s.simulation_gt(), &NoiseConfig::zero(), 9).unwrap());
    }

    #[test]
    fn center_noise_statistics() {
        let gt: Vec<Box3D> = (0..1000)
            .map(|k| Box3D::new(Vec3::new(10.0 + k as f64, 0.0, 1.0), [4.0, 2.0, 1.5], 0.0))
            .collect();
        let noise = NoiseConfig {
            class_flip_rate: 0.0,
            spurious_rate: 0.0,
            drop_rate: 0.0,
            ..NoiseConfig::default()
        };
        let p = perturb_predictions(&gt, &noise, 11).unwrap();
        let dx: Vec<f64> = p.iter().zip(&gt).map(|(a, b)| a.bbox.center.x - b.center.x).collect();
        let mean = dx.iter().sum::<f64>() / dx.len() as f64;
        let sd = (dx.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (dx.len() - 1) as f64).sqrt();
        assert!((sd - 0.5).abs() < 0.05, "sd {sd}");
    }

    #[test]
    fn split_counts() {
        let s = Split::new(60, 1.0 / 3.0).unwrap();
        assert_eq!((s.full3d, s.only2d), (20, 40));
        assert_eq!(s.mode_of(19), LabelMode::Full3d);
        assert_eq!(s.mode_of(20), LabelMode::Only2d);
        assert!(Split::new(10, 1.5).is_err());
    }
}
