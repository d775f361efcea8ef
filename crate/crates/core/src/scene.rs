//! Static sensor description: elastomer slab, embedded scatterers, coherent
//! source, and the bare sensor grid on the bottom face.
//!
//! Coordinates: x spans the slab width, y the depth, z the thickness. The
//! camera face is z = 0, the contact face is z = thickness. All lengths in
//! millimetres.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geom::{Point2, Point3};

pub const SCHEMA_VERSION: u32 = 1;

/// Scatterers keep this clearance from every slab face.
pub const FACE_MARGIN_MM: f64 = 0.1;

// ── Slab ────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlabGeometry {
    pub width_mm: f64,
    pub depth_mm: f64,
    pub thickness_mm: f64,
    pub refractive_index: f64,
}

impl SlabGeometry {
    pub fn validate(&self) -> Result<()> {
        if !(self.width_mm > 0.0 && self.depth_mm > 0.0 && self.thickness_mm > 0.0) {
            return Err(Error::InvalidGeometry(format!(
                "slab dimensions must be positive, got {}x{}x{}",
                self.width_mm, self.depth_mm, self.thickness_mm
            )));
        }
        if self.thickness_mm > self.width_mm.min(self.depth_mm) {
            return Err(Error::InvalidGeometry(format!(
                "thickness {} exceeds min(width, depth) = {}",
                self.thickness_mm,
                self.width_mm.min(self.depth_mm)
            )));
        }
        if !(self.refractive_index > 1.0) {
            return Err(Error::InvalidGeometry(format!(
                "refractive index must exceed 1, got {}",
                self.refractive_index
            )));
        }
        Ok(())
    }

    pub fn contains(&self, p: Point3) -> bool {
        p.x >= 0.0
            && p.x <= self.width_mm
            && p.y >= 0.0
            && p.y <= self.depth_mm
            && p.z >= 0.0
            && p.z <= self.thickness_mm
    }
}

// ── Scatterers ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScattererField {
    pub positions: Vec<Point3>,
    /// Per-scatterer amplitude weight, all 1.0 for a uniform field.
    pub amplitudes: Vec<f64>,
    pub seed: u64,
}

impl ScattererField {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn validate(&self, geom: &SlabGeometry) -> Result<()> {
        if self.positions.len() != self.amplitudes.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} positions vs {} amplitudes",
                self.positions.len(),
                self.amplitudes.len()
            )));
        }
        if self.amplitudes.iter().any(|&a| !(a > 0.0)) {
            return Err(Error::InvalidArgument(
                "scatterer amplitudes must be positive".into(),
            ));
        }
        let m = FACE_MARGIN_MM;
        for (i, p) in self.positions.iter().enumerate() {
            let inside = p.x >= m
                && p.x <= geom.width_mm - m
                && p.y >= m
                && p.y <= geom.depth_mm - m
                && p.z >= m
                && p.z <= geom.thickness_mm - m;
            if !inside {
                return Err(Error::InvalidGeometry(format!(
                    "scatterer {i} at ({}, {}, {}) violates the {m} mm face margin",
                    p.x, p.y, p.z
                )));
            }
        }
        Ok(())
    }
}

/// Uniformly sample `count` scatterers in the margin-inset slab volume.
///
/// Per point the draw order is x, then y, then z, so a fixed seed pins the
/// whole field regardless of callers.
pub fn sample_scatterers(geom: &SlabGeometry, count: usize, seed: u64) -> Result<ScattererField> {
    geom.validate()?;
    if count == 0 {
        return Err(Error::InvalidArgument(
            "scatterer count must be at least 1".into(),
        ));
    }
    let m = FACE_MARGIN_MM;
    let dims = [geom.width_mm, geom.depth_mm, geom.thickness_mm];
    if dims.iter().any(|&d| d <= 2.0 * m) {
        return Err(Error::InvalidGeometry(format!(
            "slab too thin to hold scatterers with a {m} mm margin"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut positions = Vec::with_capacity(count);
    for _ in 0..count {
        let x = rng.gen_range(m..geom.width_mm - m);
        let y = rng.gen_range(m..geom.depth_mm - m);
        let z = rng.gen_range(m..geom.thickness_mm - m);
        positions.push(Point3::new(x, y, z));
    }
    Ok(ScattererField {
        positions,
        amplitudes: vec![1.0; count],
        seed,
    })
}

/// Method-of-images expansion of one scatterer against the reflective top
/// face. Order 0 is the point itself; order 1 adds its mirror across
/// z = thickness.
pub fn image_sources(p: Point3, geom: &SlabGeometry, order: u32) -> Vec<Point3> {
    let mut out = Vec::with_capacity(order as usize + 1);
    out.push(p);
    if order >= 1 {
        out.push(Point3::new(p.x, p.y, 2.0 * geom.thickness_mm - p.z));
    }
    out
}

// ── Source ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSpec {
    /// Injection point, typically on a slab edge at mid-thickness.
    pub position: Point3,
    pub wavelength_nm: f64,
    /// FWHM of the source line; spread over `spectral_samples` when > 1.
    pub linewidth_nm: f64,
    pub spectral_samples: usize,
}

impl SourceSpec {
    pub fn validate(&self, geom: &SlabGeometry) -> Result<()> {
        if !(self.wavelength_nm > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "wavelength must be positive, got {}",
                self.wavelength_nm
            )));
        }
        if !(self.linewidth_nm >= 0.0) {
            return Err(Error::InvalidArgument("linewidth must be >= 0".into()));
        }
        if self.spectral_samples < 1 {
            return Err(Error::InvalidArgument(
                "spectral_samples must be at least 1".into(),
            ));
        }
        if !geom.contains(self.position) {
            return Err(Error::InvalidGeometry(format!(
                "source at ({}, {}, {}) lies outside the slab",
                self.position.x, self.position.y, self.position.z
            )));
        }
        Ok(())
    }
}

// ── Camera ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BitDepth {
    /// Quantize to 0..=255 at capture.
    Eight,
    /// Keep raw floating-point intensities.
    Float,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraSpec {
    /// Centre of the sensing window on the bottom face.
    pub center: Point2,
    /// (rows, cols) of the raw grid.
    pub raw_pixels: (usize, usize),
    pub pixel_pitch_mm: f64,
    pub bit_depth: BitDepth,
    /// Additive Gaussian read noise, as a fraction of the frame maximum.
    pub read_noise_frac: f64,
}

impl CameraSpec {
    pub fn validate(&self, geom: &SlabGeometry) -> Result<()> {
        let (h, w) = self.raw_pixels;
        if h < 128 || w < 128 {
            return Err(Error::InvalidArgument(format!(
                "raw grid must be at least 128x128, got {h}x{w}"
            )));
        }
        if !(self.pixel_pitch_mm > 0.0) {
            return Err(Error::InvalidArgument("pixel pitch must be positive".into()));
        }
        if !(0.0..=0.1).contains(&self.read_noise_frac) {
            return Err(Error::InvalidArgument(format!(
                "read_noise_frac must lie in [0, 0.1], got {}",
                self.read_noise_frac
            )));
        }
        let half_w = 0.5 * (w as f64) * self.pixel_pitch_mm;
        let half_h = 0.5 * (h as f64) * self.pixel_pitch_mm;
        let fits = self.center.x - half_w >= 0.0
            && self.center.x + half_w <= geom.width_mm
            && self.center.y - half_h >= 0.0
            && self.center.y + half_h <= geom.depth_mm;
        if !fits {
            return Err(Error::InvalidGeometry(format!(
                "camera window ({}x{} px at {} mm pitch) does not fit the bottom face",
                h, w, self.pixel_pitch_mm
            )));
        }
        Ok(())
    }

    /// World position of pixel (row, col); the grid is centred on `center`
    /// and lies in the z = 0 plane. Rows advance along +y, columns along +x.
    pub fn pixel_position(&self, row: usize, col: usize) -> Point3 {
        let (h, w) = self.raw_pixels;
        let x = self.center.x + (col as f64 - 0.5 * (w as f64 - 1.0)) * self.pixel_pitch_mm;
        let y = self.center.y + (row as f64 - 0.5 * (h as f64 - 1.0)) * self.pixel_pitch_mm;
        Point3::new(x, y, 0.0)
    }
}

// ── Scene ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub schema_version: u32,
    pub geometry: SlabGeometry,
    pub scatterers: ScattererField,
    pub source: SourceSpec,
    pub camera: CameraSpec,
    /// Method-of-images order against the top face: 0 or 1.
    pub reflection_order: u32,
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "unsupported scene schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.geometry.validate()?;
        self.scatterers.validate(&self.geometry)?;
        self.source.validate(&self.geometry)?;
        self.camera.validate(&self.geometry)?;
        if self.reflection_order > 1 {
            return Err(Error::InvalidArgument(format!(
                "reflection_order must be 0 or 1, got {}",
                self.reflection_order
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let scene: SceneConfig =
            serde_json::from_str(text).map_err(|e| Error::Format(format!("scene JSON: {e}")))?;
        scene.validate()?;
        Ok(scene)
    }

    /// SHA-256 of the canonical JSON serialization, hex-encoded. Identifies
    /// the exact scene (scatterer positions included) in manifests.
    pub fn hash_hex(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_json().as_bytes());
        let digest = hasher.finalize();
        let mut out = String::with_capacity(64);
        for b in digest {
            out.push_str(&format!("{b:02x}"));
        }
        out
    }

    /// Flat benchtop sensor: 55 x 61 x 3 mm slab, source mid-edge at x = 0,
    /// 192x192 window at 20 um pitch centred on the bottom face.
    pub fn flat_default() -> Self {
        Self::build_default(55.0, 61.0, 3.0, 7)
    }

    /// Fingertip-sized gripper pad: 28 x 28 x 6 mm.
    pub fn gripper_default() -> Self {
        Self::build_default(28.0, 28.0, 6.0, 11)
    }

    fn build_default(width: f64, depth: f64, thickness: f64, scatterer_seed: u64) -> Self {
        let geometry = SlabGeometry {
            width_mm: width,
            depth_mm: depth,
            thickness_mm: thickness,
            refractive_index: 1.41,
        };
        let scatterers =
            sample_scatterers(&geometry, 500, scatterer_seed).expect("default slab is sampleable");
        SceneConfig {
            schema_version: SCHEMA_VERSION,
            geometry,
            scatterers,
            source: SourceSpec {
                position: Point3::new(0.0, depth / 2.0, thickness / 2.0),
                wavelength_nm: 635.0,
                linewidth_nm: 1.0,
                spectral_samples: 1,
            },
            camera: CameraSpec {
                center: Point2::new(width / 2.0, depth / 2.0),
                raw_pixels: (192, 192),
                pixel_pitch_mm: 0.02,
                bit_depth: BitDepth::Float,
                read_noise_frac: 0.005,
            },
            reflection_order: 1,
        }
    }
}
