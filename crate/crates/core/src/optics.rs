//! Coherent speckle rendering and frame statistics.
//!
//! Each sensor pixel sums phasors from every scatterer (and its top-face
//! mirror image when reflections are enabled):
//!
//!   E_m(p) = sum_k sum_q a_k / (d1_k * d2_qp) * exp(i * 2 pi * n * (d1_k + d2_qp) / lambda_m)
//!   I(p)   = (1/M) * sum_m |E_m(p)|^2
//!
//! with d1 the source-to-scatterer distance, d2 the image-to-pixel distance,
//! and lambda_m the in-vacuum wavelength of spectral sample m. Distances are
//! clamped below at `min_distance_mm` in the amplitude denominator only; the
//! phase always uses the true path. Accumulation order is fixed (scatterers
//! in index order, image sources inner, spectral samples outer) so renders
//! are bit-identical regardless of thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Point3;
use crate::rng;
use crate::scene::{ScattererField, SceneConfig, SlabGeometry, SourceSpec};

/// Side length of every cropped decoder input.
pub const CROP_SIZE: usize = 128;

/// Raw grid on which the named crop regions are defined.
pub const NAMED_REGION_GRID: (usize, usize) = (192, 192);

/// Amplitude-denominator clamp. Scatterers can sit arbitrarily close to the
/// sensing plane; without a clamp a single near-pixel scatterer dominates
/// its neighbourhood and the frame loses fully developed speckle statistics.
pub const DEFAULT_MIN_DISTANCE_MM: f64 = 2.0;

// ── Parameters and image type ───────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpticsParams {
    pub spectral_samples: usize,
    /// Additive Gaussian read noise as a fraction of the frame maximum.
    pub noise_frac: f64,
    /// Lower clamp on distances in the amplitude denominator.
    pub min_distance_mm: f64,
}

impl OpticsParams {
    pub fn from_scene(scene: &SceneConfig) -> Self {
        OpticsParams {
            spectral_samples: scene.source.spectral_samples,
            noise_frac: scene.camera.read_noise_frac,
            min_distance_mm: DEFAULT_MIN_DISTANCE_MM,
        }
    }

    pub fn noiseless(mut self) -> Self {
        self.noise_frac = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.spectral_samples < 1 {
            return Err(Error::InvalidArgument(
                "spectral_samples must be at least 1".into(),
            ));
        }
        if !(0.0..=0.1).contains(&self.noise_frac) {
            return Err(Error::InvalidArgument(format!(
                "noise_frac must lie in [0, 0.1], got {}",
                self.noise_frac
            )));
        }
        if !(self.min_distance_mm > 0.0) {
            return Err(Error::InvalidArgument(
                "min_distance_mm must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    Raw,
    UnitPeak,
    EightBit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub scene_hash: String,
    pub stimulus_hash: String,
    pub noise_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeckleImage {
    pub h: usize,
    pub w: usize,
    /// Row-major intensities, never negative.
    pub pixels: Vec<f64>,
    pub normalization: Normalization,
    pub provenance: Provenance,
}

impl SpeckleImage {
    pub fn max(&self) -> f64 {
        self.pixels.iter().cloned().fold(0.0, f64::max)
    }

    /// Rescale so the peak is 1 (no-op on an all-zero frame).
    pub fn into_unit_peak(mut self) -> SpeckleImage {
        let m = self.max();
        if m > 0.0 {
            for p in &mut self.pixels {
                *p /= m;
            }
        }
        self.normalization = Normalization::UnitPeak;
        self
    }

    /// Quantize to integer levels 0..=255 (peak maps to 255).
    pub fn into_eight_bit(mut self) -> SpeckleImage {
        let m = self.max();
        if m > 0.0 {
            let scale = 255.0 / m;
            for p in &mut self.pixels {
                *p = (*p * scale).round().clamp(0.0, 255.0);
            }
        }
        self.normalization = Normalization::EightBit;
        self
    }

    /// Write as 8-bit PGM, scaling the peak to 255.
    pub fn write_pgm(&self, path: &std::path::Path) -> Result<()> {
        let m = self.max();
        let scale = if m > 0.0 { 255.0 / m } else { 0.0 };
        let bytes: Vec<u8> = self
            .pixels
            .iter()
            .map(|&v| (v * scale).round().clamp(0.0, 255.0) as u8)
            .collect();
        crate::pgm::write_pgm8(path, self.w, self.h, &bytes)
    }
}

// ── Spectral sampling ───────────────────────────────────────────────────

/// Acklam's rational approximation of the inverse standard normal CDF.
/// Relative error below 1.2e-9 across (0, 1).
#[allow(clippy::excessive_precision)] // coefficients as published
fn inv_norm_cdf(p: f64) -> f64 {
    debug_assert!(p > 0.0 && p < 1.0);
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;
    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    }
}

/// Wavelengths of the spectral samples: Gaussian quantile midpoints across
/// the source line (FWHM `linewidth_nm`), so a plain 1/M intensity average
/// reproduces the lineshape. One sample sits exactly at the centre.
pub fn spectral_wavelengths_nm(source: &SourceSpec) -> Vec<f64> {
    let m = source.spectral_samples;
    if m <= 1 || source.linewidth_nm <= 0.0 {
        return vec![source.wavelength_nm];
    }
    let sigma = source.linewidth_nm / (8.0 * std::f64::consts::LN_2).sqrt();
    (0..m)
        .map(|i| source.wavelength_nm + sigma * inv_norm_cdf((i as f64 + 0.5) / m as f64))
        .collect()
}

// ── Rendering ───────────────────────────────────────────────────────────

struct Contribution {
    // image-source position
    x: f64,
    y: f64,
    z: f64,
    // true source-to-scatterer distance (phase) and clamped amplitude factor
    d1: f64,
    amp_over_d1: f64,
}

fn contributions(
    source: &SourceSpec,
    field: &ScattererField,
    geom: &SlabGeometry,
    reflection_order: u32,
    params: &OpticsParams,
) -> Vec<Contribution> {
    let mut out = Vec::with_capacity(field.len() * (reflection_order as usize + 1));
    for (p, &a) in field.positions.iter().zip(&field.amplitudes) {
        let d1 = source.position.dist(*p);
        let amp_over_d1 = a / d1.max(params.min_distance_mm);
        for q in crate::scene::image_sources(*p, geom, reflection_order) {
            out.push(Contribution {
                x: q.x,
                y: q.y,
                z: q.z,
                d1,
                amp_over_d1,
            });
        }
    }
    out
}

/// Contributions transposed into parallel arrays so the pixel loop can run
/// eight lanes wide.
struct ContributionLanes {
    x: Vec<f64>,
    y: Vec<f64>,
    z: Vec<f64>,
    d1: Vec<f64>,
    amp_over_d1: Vec<f64>,
}

fn lanes_of(contribs: &[Contribution]) -> ContributionLanes {
    ContributionLanes {
        x: contribs.iter().map(|c| c.x).collect(),
        y: contribs.iter().map(|c| c.y).collect(),
        z: contribs.iter().map(|c| c.z).collect(),
        d1: contribs.iter().map(|c| c.d1).collect(),
        amp_over_d1: contribs.iter().map(|c| c.amp_over_d1).collect(),
    }
}

/// Phasor sum at one camera point. Accumulation order is fixed: eight
/// lanes striped across the contribution list, combined pairwise, then any
/// tail in index order. This never depends on thread count.
fn field_intensity_lanes(
    point: Point3,
    lanes: &ContributionLanes,
    wavenumbers_per_mm: &[f64],
    min_distance_mm: f64,
) -> f64 {
    let n = lanes.d1.len();
    let chunks = n / 8;
    let mut acc = 0.0;
    for &k in wavenumbers_per_mm {
        let mut er = [0.0f64; 8];
        let mut ei = [0.0f64; 8];
        for ci in 0..chunks {
            let o = ci * 8;
            let xs: &[f64; 8] = lanes.x[o..o + 8].try_into().unwrap();
            let ys: &[f64; 8] = lanes.y[o..o + 8].try_into().unwrap();
            let zs: &[f64; 8] = lanes.z[o..o + 8].try_into().unwrap();
            let d1s: &[f64; 8] = lanes.d1[o..o + 8].try_into().unwrap();
            let amps: &[f64; 8] = lanes.amp_over_d1[o..o + 8].try_into().unwrap();
            let mut amp = [0.0f64; 8];
            let mut phase = [0.0f64; 8];
            for l in 0..8 {
                let dx = point.x - xs[l];
                let dy = point.y - ys[l];
                let dz = point.z - zs[l];
                let d2 = (dx * dx + dy * dy + dz * dz).sqrt();
                amp[l] = amps[l] / d2.max(min_distance_mm);
                phase[l] = k * (d1s[l] + d2);
            }
            crate::trig::accumulate_phasors8(&phase, &amp, &mut er, &mut ei);
        }
        let mut er_t = ((er[0] + er[1]) + (er[2] + er[3])) + ((er[4] + er[5]) + (er[6] + er[7]));
        let mut ei_t = ((ei[0] + ei[1]) + (ei[2] + ei[3])) + ((ei[4] + ei[5]) + (ei[6] + ei[7]));
        for i in chunks * 8..n {
            let dx = point.x - lanes.x[i];
            let dy = point.y - lanes.y[i];
            let dz = point.z - lanes.z[i];
            let d2 = (dx * dx + dy * dy + dz * dz).sqrt();
            let amp = lanes.amp_over_d1[i] / d2.max(min_distance_mm);
            let (s, c) = crate::trig::sincos(k * (lanes.d1[i] + d2));
            er_t += amp * c;
            ei_t += amp * s;
        }
        acc += er_t * er_t + ei_t * ei_t;
    }
    acc / wavenumbers_per_mm.len() as f64
}

fn field_intensity(
    point: Point3,
    contribs: &[Contribution],
    wavenumbers_per_mm: &[f64],
    min_distance_mm: f64,
) -> f64 {
    field_intensity_lanes(point, &lanes_of(contribs), wavenumbers_per_mm, min_distance_mm)
}

fn wavenumbers(source: &SourceSpec, refractive_index: f64, spectral_samples: usize) -> Vec<f64> {
    let mut src = *source;
    src.spectral_samples = spectral_samples;
    spectral_wavelengths_nm(&src)
        .iter()
        // lambda arrives in nm; distances are mm
        .map(|l_nm| 2.0 * std::f64::consts::PI * refractive_index / (l_nm * 1e-6))
        .collect()
}

/// Coherent intensity at an arbitrary probe point. Exposed for physics
/// checks; rendering samples this on the camera grid.
pub fn point_intensity(
    point: Point3,
    source: &SourceSpec,
    field: &ScattererField,
    geom: &SlabGeometry,
    reflection_order: u32,
    params: &OpticsParams,
) -> f64 {
    let contribs = contributions(source, field, geom, reflection_order, params);
    let ks = wavenumbers(source, geom.refractive_index, params.spectral_samples);
    field_intensity(point, &contribs, &ks, params.min_distance_mm)
}

/// Noise-free intensity frame on the camera grid, row-major.
pub fn render_intensity(
    scene: &SceneConfig,
    field: &ScattererField,
    params: &OpticsParams,
) -> Result<Vec<f64>> {
    params.validate()?;
    if field.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot render an empty scatterer field".into(),
        ));
    }
    if field.positions.len() != field.amplitudes.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} positions vs {} amplitudes",
            field.positions.len(),
            field.amplitudes.len()
        )));
    }
    let contribs = contributions(
        &scene.source,
        field,
        &scene.geometry,
        scene.reflection_order,
        params,
    );
    let ks = wavenumbers(&scene.source, scene.geometry.refractive_index, params.spectral_samples);
    let lanes = lanes_of(&contribs);
    let (h, w) = scene.camera.raw_pixels;
    let mut pixels = vec![0.0f64; h * w];
    pixels
        .par_chunks_mut(w)
        .enumerate()
        .for_each(|(row, out_row)| {
            for (col, out) in out_row.iter_mut().enumerate() {
                let p = scene.camera.pixel_position(row, col);
                *out = field_intensity_lanes(p, &lanes, &ks, params.min_distance_mm);
            }
        });
    Ok(pixels)
}

/// Additive Gaussian read noise: sigma = frac * max(frame), drawn per pixel
/// in row-major order from a ChaCha8 stream, clamped at zero. No RNG state
/// is consumed when the effective sigma is zero.
pub fn apply_read_noise(pixels: &mut [f64], noise_frac: f64, noise_seed: u64) {
    if noise_frac <= 0.0 {
        return;
    }
    let max = pixels.iter().cloned().fold(0.0, f64::max);
    if max <= 0.0 {
        return;
    }
    let sigma = noise_frac * max;
    let mut rng = rng::rng_for(noise_seed, "read-noise", 0);
    for p in pixels.iter_mut() {
        *p = (*p + sigma * rng::standard_normal(&mut rng)).max(0.0);
    }
}

/// Render the camera frame for a (possibly deformed) scatterer field.
///
/// `stimulus_hash` goes into the provenance record; pass `None` for an
/// undeformed scene.
pub fn render_speckle(
    scene: &SceneConfig,
    field: &ScattererField,
    params: &OpticsParams,
    noise_seed: u64,
    stimulus_hash: Option<&str>,
) -> Result<SpeckleImage> {
    let mut pixels = render_intensity(scene, field, params)?;
    apply_read_noise(&mut pixels, params.noise_frac, noise_seed);
    let (h, w) = scene.camera.raw_pixels;
    Ok(SpeckleImage {
        h,
        w,
        pixels,
        normalization: Normalization::Raw,
        provenance: Provenance {
            scene_hash: scene.hash_hex(),
            stimulus_hash: stimulus_hash.unwrap_or("none").to_string(),
            noise_seed,
        },
    })
}

// ── Cropping ────────────────────────────────────────────────────────────

/// Named 128x128 crop windows on the 192x192 raw grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NamedRegion {
    A,
    B,
    C,
    D,
}

impl NamedRegion {
    pub const ALL: [NamedRegion; 4] = [
        NamedRegion::A,
        NamedRegion::B,
        NamedRegion::C,
        NamedRegion::D,
    ];

    /// (row, col) origin on the default raw grid. A is centred; B, C, D
    /// hug three corners.
    pub fn origin(self) -> (usize, usize) {
        match self {
            NamedRegion::A => (32, 32),
            NamedRegion::B => (0, 0),
            NamedRegion::C => (0, 64),
            NamedRegion::D => (64, 0),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NamedRegion::A => "A",
            NamedRegion::B => "B",
            NamedRegion::C => "C",
            NamedRegion::D => "D",
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        match text.trim().to_ascii_uppercase().as_str() {
            "A" => Ok(NamedRegion::A),
            "B" => Ok(NamedRegion::B),
            "C" => Ok(NamedRegion::C),
            "D" => Ok(NamedRegion::D),
            other => Err(Error::InvalidArgument(format!(
                "unknown crop region \"{other}\" (expected A, B, C, or D)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CropSpec {
    Named(NamedRegion),
    Origin { row: usize, col: usize },
}

impl CropSpec {
    /// Parse "A".."D" or an explicit "row,col" origin.
    pub fn parse(text: &str) -> Result<Self> {
        let t = text.trim();
        if let Some((r, c)) = t.split_once(',') {
            let row = r.trim().parse().map_err(|_| {
                Error::InvalidArgument(format!("bad crop origin \"{t}\""))
            })?;
            let col = c.trim().parse().map_err(|_| {
                Error::InvalidArgument(format!("bad crop origin \"{t}\""))
            })?;
            Ok(CropSpec::Origin { row, col })
        } else {
            Ok(CropSpec::Named(NamedRegion::parse(t)?))
        }
    }
}

impl std::fmt::Display for CropSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CropSpec::Named(r) => f.write_str(r.as_str()),
            CropSpec::Origin { row, col } => write!(f, "{row},{col}"),
        }
    }
}

/// Resolve a crop spec to an origin and bounds-check the 128x128 window
/// against an h x w frame. Named regions are only defined on the default
/// 192x192 raw grid; explicit origins work on any frame that contains the
/// window.
pub fn crop_origin(h: usize, w: usize, spec: CropSpec) -> Result<(usize, usize)> {
    let (row0, col0) = match spec {
        CropSpec::Named(region) => {
            if (h, w) != NAMED_REGION_GRID {
                return Err(Error::InvalidArgument(format!(
                    "named region {} requires a {}x{} raw frame, got {h}x{w}",
                    region.as_str(),
                    NAMED_REGION_GRID.0,
                    NAMED_REGION_GRID.1,
                )));
            }
            region.origin()
        }
        CropSpec::Origin { row, col } => (row, col),
    };
    if row0 + CROP_SIZE > h || col0 + CROP_SIZE > w {
        return Err(Error::InvalidArgument(format!(
            "crop at ({row0}, {col0}) exceeds the {h}x{w} frame"
        )));
    }
    Ok((row0, col0))
}

/// Extract a 128x128 window (see `crop_origin` for the rules).
pub fn crop_region(img: &SpeckleImage, spec: CropSpec) -> Result<SpeckleImage> {
    let (row0, col0) = crop_origin(img.h, img.w, spec)?;
    let mut pixels = Vec::with_capacity(CROP_SIZE * CROP_SIZE);
    for r in row0..row0 + CROP_SIZE {
        pixels.extend_from_slice(&img.pixels[r * img.w + col0..r * img.w + col0 + CROP_SIZE]);
    }
    Ok(SpeckleImage {
        h: CROP_SIZE,
        w: CROP_SIZE,
        pixels,
        normalization: img.normalization,
        provenance: img.provenance.clone(),
    })
}

// ── Statistics ──────────────────────────────────────────────────────────

fn mean_and_var(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

/// Speckle contrast sigma/mean (population sigma). Fully developed speckle
/// sits near 1. Errors on an all-zero frame, where the ratio is undefined.
pub fn speckle_contrast(img: &SpeckleImage) -> Result<f64> {
    let (mean, var) = mean_and_var(&img.pixels);
    if !(mean > 0.0) {
        return Err(Error::Numeric(
            "speckle contrast undefined: frame mean is zero".into(),
        ));
    }
    Ok(var.sqrt() / mean)
}

/// Zero-normalized cross-correlation of two frames, in [-1, 1].
pub fn zncc(a: &SpeckleImage, b: &SpeckleImage) -> Result<f64> {
    if (a.h, a.w) != (b.h, b.w) {
        return Err(Error::InvalidArgument(format!(
            "zncc shape mismatch: {}x{} vs {}x{}",
            a.h, a.w, b.h, b.w
        )));
    }
    let (ma, va) = mean_and_var(&a.pixels);
    let (mb, vb) = mean_and_var(&b.pixels);
    if !(va > 0.0) || !(vb > 0.0) {
        return Err(Error::InvalidArgument(
            "zncc undefined for zero-variance input".into(),
        ));
    }
    let n = a.pixels.len() as f64;
    let cov = a
        .pixels
        .iter()
        .zip(&b.pixels)
        .map(|(&x, &y)| (x - ma) * (y - mb))
        .sum::<f64>()
        / n;
    Ok(cov / (va.sqrt() * vb.sqrt()))
}

/// Kolmogorov-Smirnov distance between the pixel intensity distribution and
/// the exponential law fitted by its mean. Small values indicate fully
/// developed speckle.
pub fn ks_exponential_distance(img: &SpeckleImage) -> Result<f64> {
    let (mean, _) = mean_and_var(&img.pixels);
    if !(mean > 0.0) {
        return Err(Error::Numeric(
            "KS distance undefined: frame mean is zero".into(),
        ));
    }
    let mut sorted = img.pixels.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("intensities are finite"));
    let n = sorted.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in sorted.iter().enumerate() {
        let cdf = 1.0 - (-x / mean).exp();
        let lo = i as f64 / n;
        let hi = (i + 1) as f64 / n;
        d = d.max((cdf - lo).abs()).max((hi - cdf).abs());
    }
    Ok(d)
}
