//! Dataset synthesis and loading for the decoder tasks.
//!
//! Generation is reproducible down to the byte: every sample's randomness
//! comes from seeds derived as (master seed, domain, global sample index),
//! so samples can be produced in parallel, in any order, on any thread
//! count, and the output files never change. Manifests carry a sha256 per
//! file and contain no timestamps.
//!
//! Pipeline per sample: deform scatterers with the jittered stimulus,
//! render the raw frame, add read noise, cast to f32, crop 128x128,
//! quantize to 8-bit levels, store as SPKL. The f32 cast happens on the
//! full frame before cropping so a re-crop of a kept raw frame reproduces
//! the shipped crop bit for bit.

use std::io::Read as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mechanics::{
    texture_mask_procedural, ContactStimulus, MaterialModel, TextureMask, DEFAULT_KERNEL_SIGMA_MM,
    DEFAULT_PATCH_MM, NO_CONTACT_CLASS, TEXTURE_CLASSES,
};
use crate::optics::{self, CropSpec, OpticsParams, CROP_SIZE};
use crate::rng::{derive_seed, rng_for};
use crate::scene::SceneConfig;
use crate::tensor::Tensor;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SCENE_FILE: &str = "scene.json";

/// Contact position jitter, uniform in +- this many mm per axis.
pub const POSITION_JITTER_MM: f64 = 0.3;
/// Force jitter, uniform in +- this fraction of the nominal force.
pub const FORCE_JITTER_FRAC: f64 = 0.02;

// ── Task specifications ─────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

fn default_train_per_class() -> usize {
    200
}
fn default_test_per_class() -> usize {
    40
}
fn default_kernel_sigma() -> f64 {
    DEFAULT_KERNEL_SIGMA_MM
}

/// Four discrete contact sites around the camera window, classified from
/// single frames. Sites sit a few mm off-centre so each one displaces its
/// own scatterer neighbourhood.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PositionTask {
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Contact sites as fractions of (width, depth).
    pub sites: Vec<(f64, f64)>,
    /// Nominal forces cycled across samples.
    pub force_levels_n: Vec<f64>,
    pub kernel_sigma_mm: f64,
}

impl Default for PositionTask {
    fn default() -> Self {
        PositionTask {
            train_per_class: default_train_per_class(),
            test_per_class: default_test_per_class(),
            sites: vec![(0.42, 0.42), (0.58, 0.42), (0.42, 0.58), (0.58, 0.58)],
            force_levels_n: vec![0.25, 0.5, 0.75, 1.0],
            kernel_sigma_mm: default_kernel_sigma(),
        }
    }
}

/// One named contact site for force regression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForceSite {
    pub name: String,
    /// Fractions of (width, depth).
    pub site: (f64, f64),
}

/// Scalar force regression at a handful of fixed sites. The recorded
/// target is the jittered force actually applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForceTask {
    pub sites: Vec<ForceSite>,
    pub force_levels_n: Vec<f64>,
    pub train_repeats: usize,
    pub test_repeats: usize,
    pub kernel_sigma_mm: f64,
}

impl Default for ForceTask {
    fn default() -> Self {
        ForceTask {
            sites: vec![
                ForceSite {
                    name: "A".into(),
                    site: (0.5, 0.5),
                },
                ForceSite {
                    name: "B".into(),
                    site: (0.44, 0.56),
                },
                ForceSite {
                    name: "C".into(),
                    site: (0.56, 0.44),
                },
            ],
            force_levels_n: (1..=10).map(|i| i as f64 * 0.1).collect(),
            train_repeats: 20,
            test_repeats: 4,
            kernel_sigma_mm: default_kernel_sigma(),
        }
    }
}

/// Eight engraved tiles pressed by a gripper, plus a no-contact class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextureTask {
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub grip_force_n: f64,
    /// Wide kernel: the tile face presses flat, not a point.
    pub kernel_sigma_mm: f64,
    pub mask_hw: (usize, usize),
    pub patch_mm: (f64, f64),
    /// Grip site as fractions of (width, depth).
    pub site: (f64, f64),
}

impl Default for TextureTask {
    fn default() -> Self {
        TextureTask {
            train_per_class: default_train_per_class(),
            test_per_class: default_test_per_class(),
            grip_force_n: 0.6,
            kernel_sigma_mm: 10.0,
            mask_hw: (64, 64),
            patch_mm: DEFAULT_PATCH_MM,
            site: (0.5, 0.5),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskSpec {
    Position4(PositionTask),
    Force(ForceTask),
    Texture9(TextureTask),
}

impl TaskSpec {
    pub fn name(&self) -> &'static str {
        match self {
            TaskSpec::Position4(_) => "position4",
            TaskSpec::Force(_) => "force",
            TaskSpec::Texture9(_) => "texture9",
        }
    }

    /// Class names in label order, when the task is a classification.
    pub fn class_names(&self) -> Option<Vec<String>> {
        match self {
            TaskSpec::Position4(t) => Some(
                (0..t.sites.len())
                    .map(|i| format!("position-{}", i + 1))
                    .collect(),
            ),
            TaskSpec::Force(_) => None,
            TaskSpec::Texture9(_) => Some(
                TEXTURE_CLASSES
                    .iter()
                    .map(|s| s.to_string())
                    .chain(std::iter::once(NO_CONTACT_CLASS.to_string()))
                    .collect(),
            ),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            TaskSpec::Position4(t) => {
                if t.sites.len() < 2 {
                    return Err(Error::InvalidArgument(
                        "position task needs at least 2 sites".into(),
                    ));
                }
                if t.train_per_class == 0 || t.test_per_class == 0 {
                    return Err(Error::InvalidArgument(
                        "per-class sample counts must be positive".into(),
                    ));
                }
                if t.force_levels_n.is_empty() || t.force_levels_n.iter().any(|&f| f <= 0.0) {
                    return Err(Error::InvalidArgument(
                        "force levels must be positive".into(),
                    ));
                }
                check_fracs(t.sites.iter())?;
                check_sigma(t.kernel_sigma_mm)
            }
            TaskSpec::Force(t) => {
                if t.sites.is_empty() {
                    return Err(Error::InvalidArgument("force task needs sites".into()));
                }
                let mut names = std::collections::BTreeSet::new();
                for s in &t.sites {
                    if !names.insert(s.name.as_str()) {
                        return Err(Error::InvalidArgument(format!(
                            "duplicate site name \"{}\"",
                            s.name
                        )));
                    }
                }
                if t.force_levels_n.is_empty() || t.force_levels_n.iter().any(|&f| f <= 0.0) {
                    return Err(Error::InvalidArgument(
                        "force levels must be positive".into(),
                    ));
                }
                if t.train_repeats == 0 || t.test_repeats == 0 {
                    return Err(Error::InvalidArgument(
                        "repeat counts must be positive".into(),
                    ));
                }
                check_fracs(t.sites.iter().map(|s| &s.site))?;
                check_sigma(t.kernel_sigma_mm)
            }
            TaskSpec::Texture9(t) => {
                if t.train_per_class == 0 || t.test_per_class == 0 {
                    return Err(Error::InvalidArgument(
                        "per-class sample counts must be positive".into(),
                    ));
                }
                if t.grip_force_n <= 0.0 {
                    return Err(Error::InvalidArgument("grip force must be positive".into()));
                }
                if t.mask_hw.0 < 8 || t.mask_hw.1 < 8 {
                    return Err(Error::InvalidArgument(
                        "texture masks need at least 8x8 cells".into(),
                    ));
                }
                if t.patch_mm.0 <= 0.0 || t.patch_mm.1 <= 0.0 {
                    return Err(Error::InvalidArgument("patch extents must be positive".into()));
                }
                check_fracs(std::iter::once(&t.site))?;
                check_sigma(t.kernel_sigma_mm)
            }
        }
    }

    /// The sensor geometry each task was designed around.
    pub fn default_scene(&self) -> SceneConfig {
        match self {
            TaskSpec::Texture9(_) => SceneConfig::gripper_default(),
            _ => SceneConfig::flat_default(),
        }
    }
}

fn check_fracs<'a>(fracs: impl Iterator<Item = &'a (f64, f64)>) -> Result<()> {
    for f in fracs {
        if !(0.05..=0.95).contains(&f.0) || !(0.05..=0.95).contains(&f.1) {
            return Err(Error::InvalidArgument(format!(
                "contact site fraction {f:?} outside [0.05, 0.95]"
            )));
        }
    }
    Ok(())
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma <= 0.0 {
        return Err(Error::InvalidArgument(
            "kernel sigma must be positive".into(),
        ));
    }
    Ok(())
}

// ── Sample planning ─────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct PlannedSample {
    pub split: Split,
    pub class_id: Option<usize>,
    pub class_name: Option<String>,
    pub site_name: Option<String>,
    /// Nominal force before jitter; zero means no contact.
    pub base_force_n: f64,
    pub site_frac: (f64, f64),
    pub texture_class: Option<String>,
}

impl PlannedSample {
    pub fn has_contact(&self) -> bool {
        self.base_force_n > 0.0
    }
}

/// Deterministic sample plan: the full train block, then the full test
/// block. A sample's position in this list is its global index, which
/// derives its seeds.
pub fn plan_samples(task: &TaskSpec) -> Vec<PlannedSample> {
    let mut plan = Vec::new();
    match task {
        TaskSpec::Position4(t) => {
            for (split, count) in [(Split::Train, t.train_per_class), (Split::Test, t.test_per_class)] {
                for (class, &site) in t.sites.iter().enumerate() {
                    for i in 0..count {
                        plan.push(PlannedSample {
                            split,
                            class_id: Some(class),
                            class_name: Some(format!("position-{}", class + 1)),
                            site_name: None,
                            base_force_n: t.force_levels_n[i % t.force_levels_n.len()],
                            site_frac: site,
                            texture_class: None,
                        });
                    }
                }
            }
        }
        TaskSpec::Force(t) => {
            for (split, repeats) in [(Split::Train, t.train_repeats), (Split::Test, t.test_repeats)] {
                for site in &t.sites {
                    for &level in &t.force_levels_n {
                        for _ in 0..repeats {
                            plan.push(PlannedSample {
                                split,
                                class_id: None,
                                class_name: None,
                                site_name: Some(site.name.clone()),
                                base_force_n: level,
                                site_frac: site.site,
                                texture_class: None,
                            });
                        }
                    }
                }
            }
        }
        TaskSpec::Texture9(t) => {
            let names = task.class_names().expect("texture task is classified");
            for (split, count) in [(Split::Train, t.train_per_class), (Split::Test, t.test_per_class)] {
                for (class, name) in names.iter().enumerate() {
                    let is_contact = name != NO_CONTACT_CLASS;
                    for _ in 0..count {
                        plan.push(PlannedSample {
                            split,
                            class_id: Some(class),
                            class_name: Some(name.clone()),
                            site_name: None,
                            base_force_n: if is_contact { t.grip_force_n } else { 0.0 },
                            site_frac: t.site,
                            texture_class: is_contact.then(|| name.clone()),
                        });
                    }
                }
            }
        }
    }
    plan
}

// ── SPKL image container ────────────────────────────────────────────────
//
// magic "SPKL" | u32 version = 1 | u32 h | u32 w | f32 pixels, row-major,
// little-endian.

const SPKL_MAGIC: &[u8; 4] = b"SPKL";
const SPKL_VERSION: u32 = 1;

pub fn encode_spkl(h: usize, w: usize, pixels: &[f32]) -> Result<Vec<u8>> {
    if pixels.len() != h * w {
        return Err(Error::ShapeMismatch(format!(
            "{} pixels for a {h}x{w} frame",
            pixels.len()
        )));
    }
    let mut buf = Vec::with_capacity(16 + pixels.len() * 4);
    buf.extend_from_slice(SPKL_MAGIC);
    buf.extend_from_slice(&SPKL_VERSION.to_le_bytes());
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    for &v in pixels {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(buf)
}

pub fn decode_spkl(bytes: &[u8]) -> Result<(usize, usize, Vec<f32>)> {
    let mut cursor = std::io::Cursor::new(bytes);
    let mut magic = [0u8; 4];
    cursor
        .read_exact(&mut magic)
        .map_err(|_| Error::Format("truncated SPKL header".into()))?;
    if &magic != SPKL_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected \"SPKL\"",
            String::from_utf8_lossy(&magic)
        )));
    }
    let mut u32buf = [0u8; 4];
    let mut next_u32 = || -> Result<u32> {
        cursor
            .read_exact(&mut u32buf)
            .map_err(|_| Error::Format("truncated SPKL header".into()))?;
        Ok(u32::from_le_bytes(u32buf))
    };
    let version = next_u32()?;
    if version != SPKL_VERSION {
        return Err(Error::Format(format!("unsupported SPKL version {version}")));
    }
    let h = next_u32()? as usize;
    let w = next_u32()? as usize;
    if h == 0 || w == 0 || (h as u64) * (w as u64) > (1 << 28) {
        return Err(Error::Format(format!("implausible SPKL size {h}x{w}")));
    }
    let payload = &bytes[16..];
    if payload.len() != h * w * 4 {
        return Err(Error::Format(format!(
            "SPKL payload is {} bytes, {h}x{w} needs {}",
            payload.len(),
            h * w * 4
        )));
    }
    let pixels = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
        .collect();
    Ok((h, w, pixels))
}

pub fn read_spkl(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_spkl(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

// ── Manifest ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub index: usize,
    pub split: Split,
    pub file: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub raw_file: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub class_id: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub class_name: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub site: Option<String>,
    /// Actual jittered force; absent for no-contact samples.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub force_n: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub contact_xy_mm: Option<(f64, f64)>,
    pub sha256: String,
    pub stim_seed: u64,
    pub noise_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub task: TaskSpec,
    pub master_seed: u64,
    pub crop: String,
    pub scene_hash: String,
    pub min_distance_mm: f64,
    pub keep_raw: bool,
    pub records: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn records_for(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Write via a temp file in the same directory, then rename into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

// ── Generation ──────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct GenConfig {
    pub task: TaskSpec,
    /// Scene override; each task carries a sensible default.
    pub scene: Option<SceneConfig>,
    pub master_seed: u64,
    pub crop: CropSpec,
    /// Also store the raw full frame per sample (floats before crop and
    /// quantization), enabling later re-crops.
    pub keep_raw: bool,
    pub min_distance_mm: Option<f64>,
}

impl GenConfig {
    pub fn new(task: TaskSpec, master_seed: u64) -> Self {
        GenConfig {
            task,
            scene: None,
            master_seed,
            crop: CropSpec::Named(optics::NamedRegion::A),
            keep_raw: false,
            min_distance_mm: None,
        }
    }
}

/// Quantize to integer levels 0..=255 with the peak mapped to 255.
/// Operates on the f32 representation so crops of stored raw frames
/// reproduce shipped samples exactly.
pub fn quantize_to_u8_levels(pixels: &[f32]) -> Vec<f32> {
    let max = pixels.iter().cloned().fold(0.0f32, f32::max);
    if max <= 0.0 {
        return vec![0.0; pixels.len()];
    }
    let scale = 255.0 / max as f64;
    pixels
        .iter()
        .map(|&v| ((v as f64 * scale).round().clamp(0.0, 255.0)) as f32)
        .collect()
}

pub fn crop_f32(frame: &[f32], h: usize, w: usize, spec: CropSpec) -> Result<Vec<f32>> {
    let (r0, c0) = optics::crop_origin(h, w, spec)?;
    let mut out = Vec::with_capacity(CROP_SIZE * CROP_SIZE);
    for r in r0..r0 + CROP_SIZE {
        out.extend_from_slice(&frame[r * w + c0..r * w + c0 + CROP_SIZE]);
    }
    Ok(out)
}

struct SampleOutput {
    record: SampleRecord,
}

/// The jittered physical stimulus for a planned sample. Draw order (x
/// jitter, y jitter, force jitter) is part of the reproducibility contract.
fn realized_stimulus(
    planned: &PlannedSample,
    scene: &SceneConfig,
    task: &TaskSpec,
    masks: &std::collections::BTreeMap<String, TextureMask>,
    stim_seed: u64,
) -> Option<ContactStimulus> {
    if !planned.has_contact() {
        return None;
    }
    let mut rng = rng_for(stim_seed, "jitter", 0);
    let jx = rng.gen_range(-POSITION_JITTER_MM..=POSITION_JITTER_MM);
    let jy = rng.gen_range(-POSITION_JITTER_MM..=POSITION_JITTER_MM);
    let jf = rng.gen_range(-FORCE_JITTER_FRAC..=FORCE_JITTER_FRAC);
    let cx = planned.site_frac.0 * scene.geometry.width_mm + jx;
    let cy = planned.site_frac.1 * scene.geometry.depth_mm + jy;
    let force = planned.base_force_n * (1.0 + jf);
    let (sigma, patch) = match task {
        TaskSpec::Position4(t) => (t.kernel_sigma_mm, DEFAULT_PATCH_MM),
        TaskSpec::Force(t) => (t.kernel_sigma_mm, DEFAULT_PATCH_MM),
        TaskSpec::Texture9(t) => (t.kernel_sigma_mm, t.patch_mm),
    };
    let texture = planned
        .texture_class
        .as_ref()
        .map(|name| masks.get(name).expect("mask built for every class").clone());
    Some(ContactStimulus {
        contact_xy: crate::geom::Point2::new(cx, cy),
        force_n: force,
        kernel_sigma_mm: sigma,
        texture,
        patch_mm: patch,
    })
}

pub fn gen_dataset(cfg: &GenConfig, out_dir: &Path) -> Result<DatasetManifest> {
    cfg.task.validate()?;
    let scene = cfg.scene.clone().unwrap_or_else(|| cfg.task.default_scene());
    scene.validate()?;
    let mut params = OpticsParams::from_scene(&scene);
    if let Some(d) = cfg.min_distance_mm {
        params.min_distance_mm = d;
    }
    params.validate()?;
    let (raw_h, raw_w) = scene.camera.raw_pixels;
    optics::crop_origin(raw_h, raw_w, cfg.crop)?;

    let plan = plan_samples(&cfg.task);
    let material = MaterialModel::for_slab(&scene.geometry);
    material.validate(&scene.geometry)?;

    // texture masks are shared across samples; seed by class id
    let mut masks = std::collections::BTreeMap::new();
    if let TaskSpec::Texture9(t) = &cfg.task {
        for (class, name) in TEXTURE_CLASSES.iter().enumerate() {
            let seed = derive_seed(cfg.master_seed, "texture-mask", class as u64);
            masks.insert(
                name.to_string(),
                texture_mask_procedural(name, t.mask_hw.0, t.mask_hw.1, seed)?,
            );
        }
    }

    for split in [Split::Train, Split::Test] {
        let dir = out_dir.join("samples").join(split.to_string());
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        if cfg.keep_raw {
            let dir = out_dir.join("raw").join(split.to_string());
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
    }

    // undeformed frame, shared by every no-contact sample (noise differs
    // per sample, applied to a copy)
    let base_noiseless: Option<Vec<f64>> = if plan.iter().any(|p| !p.has_contact()) {
        Some(optics::render_intensity(
            &scene,
            &scene.scatterers,
            &params.noiseless(),
        )?)
    } else {
        None
    };

    let train_total = plan.iter().filter(|p| p.split == Split::Train).count();
    let scene_hash = scene.hash_hex();

    let outputs: Result<Vec<SampleOutput>> = plan
        .par_iter()
        .enumerate()
        .map(|(index, planned)| {
            let stim_seed = derive_seed(cfg.master_seed, "stim", index as u64);
            let noise_seed = derive_seed(cfg.master_seed, "noise", index as u64);
            let stimulus = realized_stimulus(planned, &scene, &cfg.task, &masks, stim_seed);
            let mut pixels: Vec<f64> = match &stimulus {
                Some(stim) => {
                    let deformed =
                        crate::mechanics::deform_scatterers(&scene.scatterers, stim, &material, &scene.geometry)?;
                    optics::render_intensity(&scene, &deformed, &params.noiseless())?
                }
                None => base_noiseless.as_ref().expect("base frame rendered").clone(),
            };
            optics::apply_read_noise(&mut pixels, params.noise_frac, noise_seed);
            let raw_f32: Vec<f32> = pixels.iter().map(|&v| v as f32).collect();
            let cropped = crop_f32(&raw_f32, raw_h, raw_w, cfg.crop)?;
            let quantized = quantize_to_u8_levels(&cropped);

            let split_index = if planned.split == Split::Train {
                index
            } else {
                index - train_total
            };
            let rel_file = format!("samples/{}/{split_index:05}.spkl", planned.split);
            let bytes = encode_spkl(CROP_SIZE, CROP_SIZE, &quantized)?;
            let sha = sha256_hex(&bytes);
            write_atomic(&out_dir.join(&rel_file), &bytes)?;

            let raw_file = if cfg.keep_raw {
                let rel_raw = format!("raw/{}/{split_index:05}.spkl", planned.split);
                let raw_bytes = encode_spkl(raw_h, raw_w, &raw_f32)?;
                write_atomic(&out_dir.join(&rel_raw), &raw_bytes)?;
                Some(rel_raw)
            } else {
                None
            };

            Ok(SampleOutput {
                record: SampleRecord {
                    index,
                    split: planned.split,
                    file: rel_file,
                    raw_file,
                    class_id: planned.class_id,
                    class_name: planned.class_name.clone(),
                    site: planned.site_name.clone(),
                    force_n: stimulus.as_ref().map(|s| s.force_n),
                    contact_xy_mm: stimulus.as_ref().map(|s| (s.contact_xy.x, s.contact_xy.y)),
                    sha256: sha,
                    stim_seed,
                    noise_seed,
                },
            })
        })
        .collect();
    let records: Vec<SampleRecord> = outputs?.into_iter().map(|o| o.record).collect();

    // persist texture masks for inspection
    if !masks.is_empty() {
        let mask_dir = out_dir.join("masks");
        std::fs::create_dir_all(&mask_dir).map_err(|e| Error::io(&mask_dir, e))?;
        for (name, mask) in &masks {
            mask.write_pgm(&mask_dir.join(format!("{name}.pgm")))?;
        }
    }

    let manifest = DatasetManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        task: cfg.task.clone(),
        master_seed: cfg.master_seed,
        crop: cfg.crop.to_string(),
        scene_hash,
        min_distance_mm: params.min_distance_mm,
        keep_raw: cfg.keep_raw,
        records,
    };
    let scene_json = scene.to_json();
    write_atomic(&out_dir.join(SCENE_FILE), scene_json.as_bytes())?;
    let manifest_json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Format(format!("manifest serialization: {e}")))?;
    write_atomic(&out_dir.join(MANIFEST_FILE), manifest_json.as_bytes())?;
    Ok(manifest)
}

// ── Loading ─────────────────────────────────────────────────────────────

/// An in-memory split: standardized inputs plus aligned labels/targets.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub hw: (usize, usize),
    /// (N, 1, h, w), each image standardized to zero mean, unit variance.
    pub inputs: Tensor<f32>,
    pub class_labels: Vec<Option<usize>>,
    pub force_targets: Vec<Option<f64>>,
    pub records: Vec<SampleRecord>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn labels(&self) -> Result<Vec<usize>> {
        self.class_labels
            .iter()
            .enumerate()
            .map(|(i, l)| {
                l.ok_or_else(|| {
                    Error::InvalidArgument(format!("sample {i} has no class label"))
                })
            })
            .collect()
    }

    pub fn forces(&self) -> Result<Vec<f64>> {
        self.force_targets
            .iter()
            .enumerate()
            .map(|(i, f)| {
                f.ok_or_else(|| {
                    Error::InvalidArgument(format!("sample {i} has no force target"))
                })
            })
            .collect()
    }

    /// Gather a batch of inputs by sample indices.
    pub fn gather(&self, indices: &[usize]) -> Tensor<f32> {
        let (h, w) = self.hw;
        let plane = h * w;
        let mut data = Vec::with_capacity(indices.len() * plane);
        for &i in indices {
            data.extend_from_slice(&self.inputs.data[i * plane..(i + 1) * plane]);
        }
        Tensor {
            shape: vec![indices.len(), 1, h, w],
            data,
        }
    }

    /// Restrict to a subset of samples, preserving order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            hw: self.hw,
            inputs: self.gather(indices),
            class_labels: indices.iter().map(|&i| self.class_labels[i]).collect(),
            force_targets: indices.iter().map(|&i| self.force_targets[i]).collect(),
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
        }
    }

    /// Build from already-quantized frames (ablations, tests).
    pub fn from_frames(
        hw: (usize, usize),
        frames: &[Vec<f32>],
        records: Vec<SampleRecord>,
    ) -> Result<Dataset> {
        let (h, w) = hw;
        if frames.len() != records.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} frames vs {} records",
                frames.len(),
                records.len()
            )));
        }
        let mut data = Vec::with_capacity(frames.len() * h * w);
        for f in frames {
            if f.len() != h * w {
                return Err(Error::ShapeMismatch(format!(
                    "frame has {} pixels, expected {h}x{w}",
                    f.len()
                )));
            }
            data.extend(standardize(f));
        }
        Ok(Dataset {
            hw,
            inputs: Tensor {
                shape: vec![frames.len(), 1, h, w],
                data,
            },
            class_labels: records.iter().map(|r| r.class_id).collect(),
            force_targets: records.iter().map(|r| r.force_n.or(Some(0.0))).collect(),
            records,
        })
    }
}

/// Zero-mean, unit-variance per image, accumulated in f64. A constant
/// image maps to all zeros.
pub fn standardize(pixels: &[f32]) -> Vec<f32> {
    let n = pixels.len() as f64;
    let mean = pixels.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = pixels
        .iter()
        .map(|&v| {
            let d = v as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    if var <= 0.0 {
        return vec![0.0; pixels.len()];
    }
    let inv = 1.0 / var.sqrt();
    pixels
        .iter()
        .map(|&v| ((v as f64 - mean) * inv) as f32)
        .collect()
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if manifest.schema_version != MANIFEST_SCHEMA_VERSION {
        return Err(Error::Format(format!(
            "unsupported manifest schema version {}",
            manifest.schema_version
        )));
    }
    Ok(manifest)
}

fn verified_read(dir: &Path, rel: &str, expected_sha: Option<&str>) -> Result<Vec<u8>> {
    let path = dir.join(rel);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if let Some(expected) = expected_sha {
        let got = sha256_hex(&bytes);
        if got != expected {
            return Err(Error::CorruptData(format!(
                "checksum mismatch for {rel}: manifest says {expected}, file hashes to {got}"
            )));
        }
    }
    Ok(bytes)
}

/// Load one split, verifying every file against its manifest checksum.
pub fn load_split(dir: &Path, manifest: &DatasetManifest, split: Split) -> Result<Dataset> {
    let records: Vec<SampleRecord> = manifest.records_for(split).cloned().collect();
    if records.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "dataset has no {split} samples"
        )));
    }
    let loaded: Result<Vec<(usize, usize, Vec<f32>)>> = records
        .par_iter()
        .map(|r| {
            let bytes = verified_read(dir, &r.file, Some(&r.sha256))?;
            decode_spkl(&bytes).map_err(|e| match e {
                Error::Format(msg) => Error::Format(format!("{}: {msg}", r.file)),
                other => other,
            })
        })
        .collect();
    let loaded = loaded?;
    let (h, w) = (loaded[0].0, loaded[0].1);
    for (i, l) in loaded.iter().enumerate() {
        if (l.0, l.1) != (h, w) {
            return Err(Error::CorruptData(format!(
                "frame {} is {}x{}, first frame is {h}x{w}",
                records[i].file, l.0, l.1
            )));
        }
    }
    let mut data = Vec::with_capacity(records.len() * h * w);
    for l in &loaded {
        data.extend(standardize(&l.2));
    }
    Ok(Dataset {
        hw: (h, w),
        inputs: Tensor {
            shape: vec![records.len(), 1, h, w],
            data,
        },
        class_labels: records.iter().map(|r| r.class_id).collect(),
        force_targets: records
            .iter()
            .map(|r| Some(r.force_n.unwrap_or(0.0)))
            .collect(),
        records,
    })
}

/// Load a split from the kept raw frames, recropped at `crop`. With the
/// crop the dataset was generated with, this reproduces `load_split`
/// exactly.
pub fn load_split_recropped(
    dir: &Path,
    manifest: &DatasetManifest,
    split: Split,
    crop: CropSpec,
) -> Result<Dataset> {
    if !manifest.keep_raw {
        return Err(Error::InvalidArgument(
            "dataset was generated without raw frames; re-cropping needs keep_raw".into(),
        ));
    }
    let records: Vec<SampleRecord> = manifest.records_for(split).cloned().collect();
    if records.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "dataset has no {split} samples"
        )));
    }
    let frames: Result<Vec<Vec<f32>>> = records
        .par_iter()
        .map(|r| {
            let rel = r.raw_file.as_ref().ok_or_else(|| {
                Error::CorruptData(format!("record {} lacks a raw frame", r.index))
            })?;
            // raw files carry no manifest checksum; SPKL framing still guards size
            let bytes = verified_read(dir, rel, None)?;
            let (h, w, pixels) = decode_spkl(&bytes)?;
            let cropped = crop_f32(&pixels, h, w, crop)?;
            Ok(quantize_to_u8_levels(&cropped))
        })
        .collect();
    let frames = frames?;
    Dataset::from_frames((CROP_SIZE, CROP_SIZE), &frames, records)
}

// ── Epoch shuffling ─────────────────────────────────────────────────────

/// Fisher-Yates order for one epoch; (seed, epoch) pins the permutation.
pub fn epoch_order(n: usize, shuffle_seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng_for(shuffle_seed, "epoch", epoch);
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    order
}

/// Resolve a dataset directory's manifest path for error messages.
pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join(MANIFEST_FILE)
}
