//! Quasi-static contact mechanics: Hookean indentation with a Gaussian
//! pressure kernel, optional engraved texture patches, and the resulting
//! vertical displacement of the scatterer field.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Point2, Point3};
use crate::pgm;
use crate::rng;
use crate::scene::{ScattererField, SlabGeometry};

/// Canonical texture class names for the engraved tile set.
pub const TEXTURE_CLASSES: [&str; 8] = [
    "white-dragon",
    "red-dragon",
    "green-dragon",
    "one-of-characters",
    "one-of-bamboos",
    "five-of-circles",
    "six-of-circles",
    "seven-of-circles",
];

/// Tenth class of the texture task; handled upstream as "no stimulus".
pub const NO_CONTACT_CLASS: &str = "no-contact";

/// Calibrated so a 0-1 N sweep modulates optical paths by tens of
/// wavelengths: correlation to the rest frame then decays smoothly across
/// the whole range instead of crashing to a floor at the first step.
pub const DEFAULT_STIFFNESS_N_PER_MM: f64 = 500.0;
pub const DEFAULT_KERNEL_SIGMA_MM: f64 = 1.5;
pub const DEFAULT_RELIEF_FRAC: f64 = 0.6;
/// Texture tile footprint, (x extent, y extent) in mm.
pub const DEFAULT_PATCH_MM: (f64, f64) = (15.0, 19.0);

// ── Material ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaterialModel {
    pub stiffness_n_per_mm: f64,
    /// Saturation depth of the indentation, at most half the slab thickness.
    pub max_indent_mm: f64,
}

impl MaterialModel {
    pub fn for_slab(geom: &SlabGeometry) -> Self {
        MaterialModel {
            stiffness_n_per_mm: DEFAULT_STIFFNESS_N_PER_MM,
            max_indent_mm: geom.thickness_mm / 3.0,
        }
    }

    pub fn validate(&self, geom: &SlabGeometry) -> Result<()> {
        if !(self.stiffness_n_per_mm > 0.0) {
            return Err(Error::InvalidArgument(
                "stiffness must be positive".into(),
            ));
        }
        if !(self.max_indent_mm > 0.0) || self.max_indent_mm > geom.thickness_mm / 2.0 {
            return Err(Error::InvalidArgument(format!(
                "max_indent_mm must lie in (0, thickness/2]; got {} for thickness {}",
                self.max_indent_mm, geom.thickness_mm
            )));
        }
        Ok(())
    }
}

// ── Texture masks ───────────────────────────────────────────────────────

/// Binary engraving mask: 1 = raised (full contact), 0 = engraved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextureMask {
    pub h: usize,
    pub w: usize,
    /// Row-major cells, values 0 or 1.
    pub cells: Vec<u8>,
    /// Depth reduction on engraved cells: factor 1 - relief_frac.
    pub relief_frac: f64,
    pub class_name: String,
}

impl TextureMask {
    pub fn validate(&self) -> Result<()> {
        if self.h < 8 || self.w < 8 {
            return Err(Error::InvalidArgument(format!(
                "mask must be at least 8x8, got {}x{}",
                self.h, self.w
            )));
        }
        if self.cells.len() != self.h * self.w {
            return Err(Error::ShapeMismatch(format!(
                "mask cells {} vs {}x{}",
                self.cells.len(),
                self.h,
                self.w
            )));
        }
        if self.cells.iter().any(|&c| c > 1) {
            return Err(Error::InvalidArgument("mask cells must be 0 or 1".into()));
        }
        if !self.cells.contains(&1) {
            return Err(Error::InvalidArgument(
                "mask must contain at least one raised cell".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.relief_frac) {
            return Err(Error::InvalidArgument(format!(
                "relief_frac must lie in [0, 1], got {}",
                self.relief_frac
            )));
        }
        Ok(())
    }

    pub fn cell(&self, row: usize, col: usize) -> u8 {
        self.cells[row * self.w + col]
    }

    pub fn raised_count(&self) -> usize {
        self.cells.iter().filter(|&&c| c == 1).count()
    }

    /// Write as binary PGM, raised = 255, engraved = 0.
    pub fn write_pgm(&self, path: &std::path::Path) -> Result<()> {
        let bytes: Vec<u8> = self.cells.iter().map(|&c| if c == 1 { 255 } else { 0 }).collect();
        pgm::write_pgm8(path, self.w, self.h, &bytes)
    }

    /// Read from PGM; any pixel >= 128 counts as raised.
    pub fn read_pgm(path: &std::path::Path, relief_frac: f64, class_name: &str) -> Result<Self> {
        let (w, h, bytes) = pgm::read_pgm8(path)?;
        let mask = TextureMask {
            h,
            w,
            cells: bytes.iter().map(|&b| u8::from(b >= 128)).collect(),
            relief_frac,
            class_name: class_name.to_string(),
        };
        mask.validate()?;
        Ok(mask)
    }
}

/// Normalize a user-facing class name to its canonical kebab-case form.
pub fn canonical_class_name(name: &str) -> String {
    name.trim()
        .to_ascii_lowercase()
        .replace([' ', '_'], "-")
}

struct MaskGrid {
    h: usize,
    w: usize,
    cells: Vec<u8>,
}

impl MaskGrid {
    fn raised(h: usize, w: usize) -> Self {
        MaskGrid {
            h,
            w,
            cells: vec![1; h * w],
        }
    }

    /// Engrave the axis-aligned rect [r0, r1) x [c0, c1), fractions of h/w.
    fn engrave_rect(&mut self, r0: f64, c0: f64, r1: f64, c1: f64) {
        let rr0 = (r0 * self.h as f64).floor().max(0.0) as usize;
        let rr1 = ((r1 * self.h as f64).ceil() as usize).min(self.h);
        let cc0 = (c0 * self.w as f64).floor().max(0.0) as usize;
        let cc1 = ((c1 * self.w as f64).ceil() as usize).min(self.w);
        for r in rr0..rr1 {
            for c in cc0..cc1 {
                self.cells[r * self.w + c] = 0;
            }
        }
    }

    /// Engrave a closed rectangular band: the area of the outer rect not
    /// covered by the inner rect.
    fn engrave_frame(&mut self, r0: f64, c0: f64, r1: f64, c1: f64, band: f64) {
        self.engrave_rect(r0, c0, r1, c0 + band); // left
        self.engrave_rect(r0, c1 - band, r1, c1); // right
        self.engrave_rect(r0, c0, r0 + band, c1); // top
        self.engrave_rect(r1 - band, c0, r1, c1); // bottom
    }

    /// Engrave a disc; centre in fractions, radius as a fraction of min(h, w).
    fn engrave_disc(&mut self, cr: f64, cc: f64, radius: f64) {
        let rad = radius * self.h.min(self.w) as f64;
        let (cy, cx) = (cr * self.h as f64, cc * self.w as f64);
        for r in 0..self.h {
            for c in 0..self.w {
                let dy = r as f64 + 0.5 - cy;
                let dx = c as f64 + 0.5 - cx;
                if dy * dy + dx * dx <= rad * rad {
                    self.cells[r * self.w + c] = 0;
                }
            }
        }
    }

    /// Engrave a band of half-width `hw` around the segment (ra,ca)-(rb,cb).
    fn engrave_stroke(&mut self, ra: f64, ca: f64, rb: f64, cb: f64, hw: f64) {
        let scale = self.h.min(self.w) as f64;
        let (ay, ax) = (ra * self.h as f64, ca * self.w as f64);
        let (by, bx) = (rb * self.h as f64, cb * self.w as f64);
        let (vy, vx) = (by - ay, bx - ax);
        let len2 = vy * vy + vx * vx;
        let half = hw * scale;
        for r in 0..self.h {
            for c in 0..self.w {
                let (py, px) = (r as f64 + 0.5 - ay, c as f64 + 0.5 - ax);
                let t = if len2 > 0.0 {
                    ((py * vy + px * vx) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let (dy, dx) = (py - t * vy, px - t * vx);
                if dy * dy + dx * dx <= half * half {
                    self.cells[r * self.w + c] = 0;
                }
            }
        }
    }

    /// Flip boundary cells with probability 0.12 to emulate engraving
    /// tolerance. Single pass over the pristine layout, so band cores (and
    /// with them closed frames) survive.
    fn roughen(&mut self, seed: u64) {
        let mut rng = rng::rng_for(seed, "mask-roughen", 0);
        let src = self.cells.clone();
        let at = |r: isize, c: isize| -> u8 {
            if r < 0 || c < 0 || r >= self.h as isize || c >= self.w as isize {
                1
            } else {
                src[r as usize * self.w + c as usize]
            }
        };
        for r in 0..self.h as isize {
            for c in 0..self.w as isize {
                let v = at(r, c);
                let boundary = at(r - 1, c) != v
                    || at(r + 1, c) != v
                    || at(r, c - 1) != v
                    || at(r, c + 1) != v;
                // draw for every cell so the stream layout is position-stable
                let flip = rng.gen::<f64>() < 0.12;
                if boundary && flip {
                    self.cells[(r as usize) * self.w + c as usize] = 1 - v;
                }
            }
        }
    }
}

/// Deterministic engraving layout for one of the eight texture classes.
///
/// Pure function of (class, resolution, seed); the seed only jitters band
/// edges, never the layout itself. Unknown class names are rejected.
pub fn texture_mask_procedural(
    class_name: &str,
    h: usize,
    w: usize,
    seed: u64,
) -> Result<TextureMask> {
    if h < 8 || w < 8 {
        return Err(Error::InvalidArgument(format!(
            "mask resolution must be at least 8x8, got {h}x{w}"
        )));
    }
    let canonical = canonical_class_name(class_name);
    let mut g = MaskGrid::raised(h, w);
    match canonical.as_str() {
        "white-dragon" => {
            g.engrave_frame(0.18, 0.18, 0.82, 0.82, 0.10);
        }
        "red-dragon" => {
            g.engrave_frame(0.30, 0.22, 0.62, 0.78, 0.07);
            g.engrave_rect(0.10, 0.44, 0.90, 0.56);
            g.engrave_rect(0.10, 0.30, 0.17, 0.70);
            g.engrave_rect(0.83, 0.30, 0.90, 0.70);
        }
        "green-dragon" => {
            g.engrave_stroke(0.15, 0.15, 0.78, 0.85, 0.055);
            g.engrave_stroke(0.15, 0.85, 0.78, 0.15, 0.055);
            g.engrave_rect(0.86, 0.20, 0.94, 0.80);
        }
        "one-of-characters" => {
            g.engrave_rect(0.12, 0.15, 0.24, 0.85);
            for &r in &[0.38, 0.56, 0.74] {
                for &c in &[0.20, 0.44, 0.68] {
                    g.engrave_rect(r, c, r + 0.12, c + 0.14);
                }
            }
        }
        "one-of-bamboos" => {
            g.engrave_rect(0.10, 0.43, 0.90, 0.57);
            g.engrave_rect(0.10, 0.33, 0.17, 0.67);
            g.engrave_rect(0.83, 0.33, 0.90, 0.67);
        }
        "five-of-circles" => {
            for &(r, c) in &[(0.22, 0.22), (0.22, 0.78), (0.5, 0.5), (0.78, 0.22), (0.78, 0.78)] {
                g.engrave_disc(r, c, 0.11);
            }
        }
        "six-of-circles" => {
            for &r in &[0.20, 0.50, 0.80] {
                for &c in &[0.32, 0.68] {
                    g.engrave_disc(r, c, 0.11);
                }
            }
        }
        "seven-of-circles" => {
            for &(r, c) in &[(0.15, 0.22), (0.24, 0.50), (0.33, 0.78)] {
                g.engrave_disc(r, c, 0.10);
            }
            for &r in &[0.60, 0.84] {
                for &c in &[0.33, 0.67] {
                    g.engrave_disc(r, c, 0.10);
                }
            }
        }
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown texture class \"{other}\"; valid classes: {}",
                TEXTURE_CLASSES.join(", ")
            )));
        }
    }
    g.roughen(seed);
    let mask = TextureMask {
        h,
        w,
        cells: g.cells,
        relief_frac: DEFAULT_RELIEF_FRAC,
        class_name: canonical,
    };
    mask.validate()?;
    Ok(mask)
}

// ── Stimulus ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContactStimulus {
    /// Contact centre on the top face.
    pub contact_xy: Point2,
    pub force_n: f64,
    /// Gaussian pressure kernel width.
    pub kernel_sigma_mm: f64,
    pub texture: Option<TextureMask>,
    /// Texture footprint (x extent, y extent) centred on `contact_xy`.
    pub patch_mm: (f64, f64),
}

impl ContactStimulus {
    pub fn point_contact(contact_xy: Point2, force_n: f64) -> Self {
        ContactStimulus {
            contact_xy,
            force_n,
            kernel_sigma_mm: DEFAULT_KERNEL_SIGMA_MM,
            texture: None,
            patch_mm: DEFAULT_PATCH_MM,
        }
    }

    pub fn validate(&self, geom: &SlabGeometry) -> Result<()> {
        if !(self.force_n >= 0.0) || !self.force_n.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "force must be finite and >= 0, got {}",
                self.force_n
            )));
        }
        if !(self.kernel_sigma_mm > 0.0) {
            return Err(Error::InvalidArgument(
                "kernel sigma must be positive".into(),
            ));
        }
        let c = self.contact_xy;
        if c.x < 0.0 || c.x > geom.width_mm || c.y < 0.0 || c.y > geom.depth_mm {
            return Err(Error::InvalidGeometry(format!(
                "contact point ({}, {}) lies outside the top face",
                c.x, c.y
            )));
        }
        if !(self.patch_mm.0 > 0.0 && self.patch_mm.1 > 0.0) {
            return Err(Error::InvalidArgument("patch extents must be positive".into()));
        }
        if let Some(mask) = &self.texture {
            mask.validate()?;
        }
        Ok(())
    }

    /// Hash of the stimulus for image provenance records.
    pub fn hash_hex(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("stimulus serialization cannot fail");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Texture attenuation at a point: 1 on raised cells and anywhere the
    /// patch does not cover, 1 - relief_frac on engraved cells.
    fn texture_factor(&self, xy: Point2) -> f64 {
        let Some(mask) = &self.texture else {
            return 1.0;
        };
        let (ex, ey) = self.patch_mm;
        let u = (xy.x - (self.contact_xy.x - 0.5 * ex)) / ex;
        let v = (xy.y - (self.contact_xy.y - 0.5 * ey)) / ey;
        if !(0.0..1.0).contains(&u) || !(0.0..1.0).contains(&v) {
            return 1.0;
        }
        let col = ((u * mask.w as f64) as usize).min(mask.w - 1);
        let row = ((v * mask.h as f64) as usize).min(mask.h - 1);
        if mask.cell(row, col) == 1 {
            1.0
        } else {
            1.0 - mask.relief_frac
        }
    }
}

// ── Deformation ─────────────────────────────────────────────────────────

/// Surface indentation depth (mm, >= 0) at a point on the top face:
/// min(F/k, max_indent) * exp(-r^2 / (2 sigma^2)) * texture factor.
pub fn surface_indent(stim: &ContactStimulus, mat: &MaterialModel, xy: Point2) -> f64 {
    let depth0 = (stim.force_n / mat.stiffness_n_per_mm).min(mat.max_indent_mm);
    let dx = xy.x - stim.contact_xy.x;
    let dy = xy.y - stim.contact_xy.y;
    let s2 = stim.kernel_sigma_mm * stim.kernel_sigma_mm;
    depth0 * (-(dx * dx + dy * dy) / (2.0 * s2)).exp() * stim.texture_factor(xy)
}

/// Displace scatterers vertically under the stimulus. Displacement decays
/// linearly with depth (bottom face pinned): dz = -indent * z / thickness.
/// The input field is left untouched; positions are clamped to the slab.
pub fn deform_scatterers(
    field: &ScattererField,
    stim: &ContactStimulus,
    mat: &MaterialModel,
    geom: &SlabGeometry,
) -> Result<ScattererField> {
    stim.validate(geom)?;
    mat.validate(geom)?;
    let t = geom.thickness_mm;
    let positions = field
        .positions
        .iter()
        .map(|p| {
            let indent = surface_indent(stim, mat, Point2::new(p.x, p.y));
            let z = (p.z - indent * p.z / t).clamp(0.0, t);
            Point3::new(p.x.clamp(0.0, geom.width_mm), p.y.clamp(0.0, geom.depth_mm), z)
        })
        .collect();
    Ok(ScattererField {
        positions,
        amplitudes: field.amplitudes.clone(),
        seed: field.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene;

    fn slab() -> SlabGeometry {
        SlabGeometry {
            width_mm: 55.0,
            depth_mm: 61.0,
            thickness_mm: 3.0,
            refractive_index: 1.41,
        }
    }

    fn material() -> MaterialModel {
        MaterialModel::for_slab(&slab())
    }

    #[test]
    fn center_depth_is_hookean() {
        let stim = ContactStimulus::point_contact(Point2::new(20.0, 20.0), 0.5);
        let d = surface_indent(&stim, &material(), Point2::new(20.0, 20.0));
        assert_eq!(d, 0.5 / DEFAULT_STIFFNESS_N_PER_MM);
    }

    #[test]
    fn depth_saturates_at_max_indent() {
        // Far past the linear range: 10 * stiffness * max_indent newtons.
        let f = 10.0 * DEFAULT_STIFFNESS_N_PER_MM * material().max_indent_mm;
        let stim = ContactStimulus::point_contact(Point2::new(20.0, 20.0), f);
        let d = surface_indent(&stim, &material(), Point2::new(20.0, 20.0));
        assert_eq!(d, 1.0); // thickness / 3
    }

    #[test]
    fn gaussian_falloff_at_one_sigma() {
        let stim = ContactStimulus::point_contact(Point2::new(20.0, 20.0), 0.5);
        let d = surface_indent(&stim, &material(), Point2::new(21.5, 20.0));
        let expected = 0.5 / DEFAULT_STIFFNESS_N_PER_MM * (-0.5f64).exp();
        assert!((d - expected).abs() < 1e-15);
    }

    #[test]
    fn engraved_cells_attenuate_depth() {
        let mut stim = ContactStimulus::point_contact(Point2::new(20.0, 20.0), 0.5);
        let mut mask = texture_mask_procedural("white-dragon", 16, 16, 0).unwrap();
        // force a known pattern: left half engraved, right half raised
        for r in 0..16 {
            for c in 0..16 {
                mask.cells[r * 16 + c] = u8::from(c >= 8);
            }
        }
        stim.texture = Some(mask);
        let raised = surface_indent(&stim, &material(), Point2::new(20.2, 20.0));
        let engraved = surface_indent(&stim, &material(), Point2::new(19.8, 20.0));
        let ratio = engraved / raised;
        // engraved factor is 0.4, modulo the Gaussian difference of the two
        // sample points (symmetric around the contact, so it cancels)
        assert!((ratio - 0.4).abs() < 1e-12, "ratio {ratio}");
        // outside the patch the factor returns to 1
        let outside = surface_indent(&stim, &material(), Point2::new(20.0, 35.0));
        let bare = {
            let s = ContactStimulus::point_contact(Point2::new(20.0, 20.0), 0.5);
            surface_indent(&s, &material(), Point2::new(20.0, 35.0))
        };
        assert_eq!(outside, bare);
    }

    #[test]
    fn zero_force_is_identity() {
        let g = slab();
        let field = scene::sample_scatterers(&g, 100, 5).unwrap();
        let stim = ContactStimulus::point_contact(Point2::new(27.0, 30.0), 0.0);
        let out = deform_scatterers(&field, &stim, &material(), &g).unwrap();
        assert_eq!(out, field);
    }

    #[test]
    fn deformation_is_vertical_monotone_and_leaves_input_alone() {
        let g = slab();
        let field = scene::sample_scatterers(&g, 200, 5).unwrap();
        let before = field.clone();
        let mk = |f| ContactStimulus::point_contact(Point2::new(27.0, 30.0), f);
        let lo = deform_scatterers(&field, &mk(0.3), &material(), &g).unwrap();
        let hi = deform_scatterers(&field, &mk(0.9), &material(), &g).unwrap();
        assert_eq!(field, before);
        for ((orig, a), b) in field.positions.iter().zip(&lo.positions).zip(&hi.positions) {
            assert_eq!(orig.x, a.x);
            assert_eq!(orig.y, a.y);
            assert!(a.z <= orig.z);
            assert!(b.z <= a.z, "more force, deeper");
            assert!(b.z >= 0.0);
        }
    }

    #[test]
    fn unknown_texture_class_is_rejected() {
        let err = texture_mask_procedural("two-of-swords", 64, 64, 0).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
        assert!(err.to_string().contains("two-of-swords"));
    }

    #[test]
    fn masks_are_deterministic_in_all_inputs() {
        let a = texture_mask_procedural("six-of-circles", 64, 64, 9).unwrap();
        let b = texture_mask_procedural("six-of-circles", 64, 64, 9).unwrap();
        assert_eq!(a, b);
        let c = texture_mask_procedural("six-of-circles", 64, 64, 10).unwrap();
        assert_ne!(a, c, "seed must jitter the engraving edges");
    }

    #[test]
    fn accepts_display_style_class_names() {
        let a = texture_mask_procedural("White Dragon", 64, 64, 0).unwrap();
        let b = texture_mask_procedural("white-dragon", 64, 64, 0).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.class_name, "white-dragon");
    }

    #[test]
    fn white_dragon_frame_is_closed() {
        // Flood-fill raised cells from the centre; a closed engraved frame
        // must keep the fill away from the grid border.
        let mask = texture_mask_procedural("white-dragon", 64, 64, 0).unwrap();
        let (h, w) = (mask.h, mask.w);
        let mut seen = vec![false; h * w];
        let mut queue = vec![(h / 2, w / 2)];
        assert_eq!(mask.cell(h / 2, w / 2), 1, "centre must be raised");
        seen[(h / 2) * w + w / 2] = true;
        while let Some((r, c)) = queue.pop() {
            assert!(r != 0 && c != 0 && r != h - 1 && c != w - 1, "fill escaped the frame");
            for (nr, nc) in [(r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)] {
                if mask.cell(nr, nc) == 1 && !seen[nr * w + nc] {
                    seen[nr * w + nc] = true;
                    queue.push((nr, nc));
                }
            }
        }
    }

    #[test]
    fn classes_differ_pairwise_by_at_least_ten_percent() {
        for seed in [0u64, 1, 2] {
            let masks: Vec<TextureMask> = TEXTURE_CLASSES
                .iter()
                .map(|c| texture_mask_procedural(c, 64, 64, seed).unwrap())
                .collect();
            let cells = 64 * 64;
            for i in 0..masks.len() {
                for j in i + 1..masks.len() {
                    let hamming: usize = masks[i]
                        .cells
                        .iter()
                        .zip(&masks[j].cells)
                        .filter(|(a, b)| a != b)
                        .count();
                    assert!(
                        hamming * 10 >= cells,
                        "seed {seed}: {} vs {} differ in only {hamming}/{cells} cells",
                        TEXTURE_CLASSES[i],
                        TEXTURE_CLASSES[j]
                    );
                }
            }
        }
    }

    #[test]
    fn mask_pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mask.pgm");
        let mask = texture_mask_procedural("five-of-circles", 64, 64, 4).unwrap();
        mask.write_pgm(&path).unwrap();
        let back = TextureMask::read_pgm(&path, mask.relief_frac, &mask.class_name).unwrap();
        assert_eq!(mask, back);
    }

    #[test]
    fn stimulus_hash_tracks_content() {
        let a = ContactStimulus::point_contact(Point2::new(1.0, 2.0), 0.5);
        let mut b = a.clone();
        assert_eq!(a.hash_hex(), b.hash_hex());
        b.force_n = 0.6;
        assert_ne!(a.hash_hex(), b.hash_hex());
    }
}
