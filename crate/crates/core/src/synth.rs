//! Procedural conveyor-belt dataset synthesis.
//!
//! Each sample is a height field of randomly placed particles rendered over
//! a flat belt. Depth is the height above the belt (baseline 0); reflectance
//! is a Lambertian shading of the height field under a fixed light, with an
//! albedo and texture-noise level inherited from whichever particle is on
//! top at each pixel. Class identity comes from particle shape and size
//! laws; the two mixed categories reuse the ore laws, so they genuinely
//! overlap the pure classes.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::{
    write_plane, DatasetManifest, ManifestEntry, MaterialClass, Plane, CLASS_COUNT,
};
use crate::error::{Error, Result};
use crate::stream;

/// Per-class sample counts at scale 1.0, in [`MaterialClass::ALL`] order.
pub const CLASS_BASE_COUNTS: [usize; CLASS_COUNT] = [164, 122, 860, 698, 503, 616, 45];

const BELT_ALBEDO: f64 = 0.15;
const BELT_NOISE: f64 = 0.02;
const LIGHT: [f64; 3] = [0.4, 0.25, 0.882];

#[derive(Clone, Copy, Debug)]
pub struct GeneratorConfig {
    pub image_height: usize,
    pub image_width: usize,
    /// Multiplier on the base class counts; each class keeps at least one
    /// sample.
    pub scale: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            image_height: 64,
            image_width: 64,
            scale: 1.0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_height < 16 || self.image_width < 16 {
            return Err(Error::Config(format!(
                "image size {}x{} below the 16-pixel minimum",
                self.image_height, self.image_width
            )));
        }
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(Error::Config(format!("scale {} must be positive", self.scale)));
        }
        Ok(())
    }

    pub fn class_counts(&self) -> Result<[usize; CLASS_COUNT]> {
        self.validate()?;
        let mut counts = [0usize; CLASS_COUNT];
        for (i, &base) in CLASS_BASE_COUNTS.iter().enumerate() {
            counts[i] = ((base as f64 * self.scale).round() as usize).max(1);
        }
        Ok(counts)
    }
}

/// Height field plus the per-pixel surface properties of whatever particle
/// currently tops each pixel.
struct Canvas {
    h: usize,
    w: usize,
    height: Vec<f64>,
    albedo: Vec<f64>,
    noise_amp: Vec<f64>,
}

impl Canvas {
    fn new(h: usize, w: usize) -> Self {
        Canvas {
            h,
            w,
            height: vec![0.0; h * w],
            albedo: vec![BELT_ALBEDO; h * w],
            noise_amp: vec![BELT_NOISE; h * w],
        }
    }

    fn raise(&mut self, r: usize, c: usize, z: f64, albedo: f64, noise_amp: f64) {
        let i = r * self.w + c;
        if z > self.height[i] {
            self.height[i] = z;
            self.albedo[i] = albedo;
            self.noise_amp[i] = noise_amp;
        }
    }
}

/// Surface texture of one material family: base albedo and noise level.
///
/// Albedo is shared across families on purpose: mean brightness would make
/// classification trivially linear. Identity must be read from structure
/// (particle size, shape, clustering) and from the class-specific texture
/// noise level.
#[derive(Clone, Copy)]
struct Finish {
    albedo: f64,
    noise: f64,
}

const BASE_ALBEDO: f64 = 0.65;
const ORE1_FINISH: Finish = Finish { albedo: BASE_ALBEDO, noise: 0.03 };
const ORE2_FINISH: Finish = Finish { albedo: BASE_ALBEDO, noise: 0.09 };
const ORE3_FINISH: Finish = Finish { albedo: BASE_ALBEDO, noise: 0.06 };
const CYL_FINISH: Finish = Finish { albedo: BASE_ALBEDO, noise: 0.02 };
const AGGL_FINISH: Finish = Finish { albedo: BASE_ALBEDO, noise: 0.12 };

/// Height multipliers per size law, tuned so per-image depth volume is
/// roughly level across the ore families: mean depth alone should not
/// separate them.
const ORE1_HEIGHT: f64 = 1.3;
const ORE2_HEIGHT: f64 = 0.75;
const ORE3_HEIGHT: f64 = 0.45;
const AGGL_HEIGHT: f64 = 1.1;
const CYL_HEIGHT: f64 = 0.6;

fn particle_albedo(rng: &mut ChaCha8Rng, finish: Finish) -> f64 {
    (finish.albedo + stream::normal_f64(rng) * 0.08).clamp(0.1, 1.0)
}

/// Scaled hemispherical cap: height k·sqrt(r² − ρ²) inside radius r.
fn stamp_cap(canvas: &mut Canvas, cx: f64, cy: f64, r: f64, k: f64, albedo: f64, noise: f64) {
    let r0 = (cy - r).floor().max(0.0) as usize;
    let r1 = ((cy + r).ceil() as usize).min(canvas.h.saturating_sub(1));
    let c0 = (cx - r).floor().max(0.0) as usize;
    let c1 = ((cx + r).ceil() as usize).min(canvas.w.saturating_sub(1));
    for row in r0..=r1 {
        for col in c0..=c1 {
            let dy = row as f64 - cy;
            let dx = col as f64 - cx;
            let sq = r * r - dx * dx - dy * dy;
            if sq > 0.0 {
                canvas.raise(row, col, k * sq.sqrt(), albedo, noise);
            }
        }
    }
}

/// A cylinder lying on the belt: the depth camera sees k·(r + sqrt(r² − d²))
/// at distance d from the axis projection.
#[allow(clippy::too_many_arguments)]
fn stamp_cylinder(
    canvas: &mut Canvas,
    cx: f64,
    cy: f64,
    angle: f64,
    half_len: f64,
    r: f64,
    k: f64,
    albedo: f64,
    noise: f64,
) {
    let dx = angle.cos();
    let dy = angle.sin();
    let (p0x, p0y) = (cx - dx * half_len, cy - dy * half_len);
    let (p1x, p1y) = (cx + dx * half_len, cy + dy * half_len);
    let reach = half_len + r;
    let r0 = (cy - reach).floor().max(0.0) as usize;
    let r1 = ((cy + reach).ceil() as usize).min(canvas.h.saturating_sub(1));
    let c0 = (cx - reach).floor().max(0.0) as usize;
    let c1 = ((cx + reach).ceil() as usize).min(canvas.w.saturating_sub(1));
    let seg_x = p1x - p0x;
    let seg_y = p1y - p0y;
    let seg_sq = (seg_x * seg_x + seg_y * seg_y).max(1e-12);
    for row in r0..=r1 {
        for col in c0..=c1 {
            let px = col as f64 - p0x;
            let py = row as f64 - p0y;
            let t = ((px * seg_x + py * seg_y) / seg_sq).clamp(0.0, 1.0);
            let ex = px - t * seg_x;
            let ey = py - t * seg_y;
            let d_sq = ex * ex + ey * ey;
            let sq = r * r - d_sq;
            if sq > 0.0 {
                canvas.raise(row, col, k * (r + sq.sqrt()), albedo, noise);
            }
        }
    }
}

/// Scatters sphere caps with radii drawn from one ore size law.
#[allow(clippy::too_many_arguments)]
fn scatter_caps(
    canvas: &mut Canvas,
    rng: &mut ChaCha8Rng,
    count: usize,
    r_lo: f64,
    r_hi: f64,
    height: f64,
    finish: Finish,
) {
    for _ in 0..count {
        let cx = rng.gen_range(0.0..canvas.w as f64);
        let cy = rng.gen_range(0.0..canvas.h as f64);
        let r = rng.gen_range(r_lo..r_hi);
        let albedo = particle_albedo(rng, finish);
        stamp_cap(canvas, cx, cy, r, height, albedo, finish.noise);
    }
}

fn render_class(class: MaterialClass, canvas: &mut Canvas, rng: &mut ChaCha8Rng) {
    let area_scale = (canvas.h * canvas.w) as f64 / (64.0 * 64.0);
    let scaled = |lo: usize, hi: usize, rng: &mut ChaCha8Rng| -> usize {
        let n = rng.gen_range(lo..=hi) as f64 * area_scale;
        (n.round() as usize).max(1)
    };
    match class {
        MaterialClass::Ore1 => {
            let n = scaled(26, 36, rng);
            scatter_caps(canvas, rng, n, 2.0, 4.0, ORE1_HEIGHT, ORE1_FINISH);
        }
        MaterialClass::Ore2 => {
            let n = scaled(9, 13, rng);
            scatter_caps(canvas, rng, n, 3.5, 6.5, ORE2_HEIGHT, ORE2_FINISH);
        }
        MaterialClass::Ore3 => {
            let n = scaled(3, 5, rng);
            scatter_caps(canvas, rng, n, 6.0, 10.0, ORE3_HEIGHT, ORE3_FINISH);
        }
        MaterialClass::Mixed1 => {
            let n1 = scaled(13, 18, rng);
            scatter_caps(canvas, rng, n1, 2.0, 4.0, ORE1_HEIGHT, ORE1_FINISH);
            let n2 = scaled(4, 6, rng);
            scatter_caps(canvas, rng, n2, 3.5, 6.5, ORE2_HEIGHT, ORE2_FINISH);
        }
        MaterialClass::Mixed2 => {
            let n1 = scaled(4, 6, rng);
            scatter_caps(canvas, rng, n1, 3.5, 6.5, ORE2_HEIGHT, ORE2_FINISH);
            let n2 = scaled(1, 2, rng);
            scatter_caps(canvas, rng, n2, 6.0, 10.0, ORE3_HEIGHT, ORE3_FINISH);
        }
        MaterialClass::Agglomerated => {
            let clusters = scaled(3, 5, rng);
            for _ in 0..clusters {
                let cx = rng.gen_range(0.0..canvas.w as f64);
                let cy = rng.gen_range(0.0..canvas.h as f64);
                let blobs = rng.gen_range(8..=14);
                for _ in 0..blobs {
                    let bx = cx + stream::normal_f64(rng) * 4.0;
                    let by = cy + stream::normal_f64(rng) * 4.0;
                    let r = rng.gen_range(1.5..3.5);
                    let albedo = particle_albedo(rng, AGGL_FINISH);
                    stamp_cap(canvas, bx, by, r, AGGL_HEIGHT, albedo, AGGL_FINISH.noise);
                }
            }
        }
        MaterialClass::Cylindrical => {
            let n = scaled(3, 6, rng);
            for _ in 0..n {
                let cx = rng.gen_range(0.0..canvas.w as f64);
                let cy = rng.gen_range(0.0..canvas.h as f64);
                let angle = rng.gen_range(0.0..std::f64::consts::PI);
                let half_len = rng.gen_range(6.0..12.0);
                let r = rng.gen_range(2.5..4.0);
                let albedo = particle_albedo(rng, CYL_FINISH);
                stamp_cylinder(canvas, cx, cy, angle, half_len, r, CYL_HEIGHT, albedo, CYL_FINISH.noise);
            }
        }
    }
}

/// Lambertian shade of the height field under the fixed light direction.
fn shade(canvas: &Canvas, r: usize, c: usize) -> f64 {
    let h = canvas.h;
    let w = canvas.w;
    let at = |r: usize, c: usize| canvas.height[r * w + c];
    let gx = match c {
        0 => at(r, 1) - at(r, 0),
        _ if c == w - 1 => at(r, w - 1) - at(r, w - 2),
        _ => (at(r, c + 1) - at(r, c - 1)) / 2.0,
    };
    let gy = match r {
        0 => at(1, c) - at(0, c),
        _ if r == h - 1 => at(h - 1, c) - at(h - 2, c),
        _ => (at(r + 1, c) - at(r - 1, c)) / 2.0,
    };
    let norm = (gx * gx + gy * gy + 1.0).sqrt();
    let dot = (-gx * LIGHT[0] - gy * LIGHT[1] + LIGHT[2]) / norm;
    dot.max(0.0)
}

/// Renders one sample deterministically from its stream.
pub fn render_sample(
    class: MaterialClass,
    height: usize,
    width: usize,
    rng: &mut ChaCha8Rng,
) -> (Plane, Plane) {
    let mut canvas = Canvas::new(height, width);
    render_class(class, &mut canvas, rng);

    let mut reflectance = Vec::with_capacity(height * width);
    for r in 0..height {
        for c in 0..width {
            let i = r * width + c;
            let base = shade(&canvas, r, c) * canvas.albedo[i];
            let noisy = base + stream::normal_f64(rng) * canvas.noise_amp[i];
            reflectance.push(noisy.clamp(0.0, 1.0));
        }
    }

    // Belt baseline: if particles covered every pixel, re-zero the minimum
    // exactly as the sensor's conveyor subtraction would.
    let min = canvas.height.iter().copied().fold(f64::INFINITY, f64::min);
    if min > 0.0 {
        for v in &mut canvas.height {
            *v -= min;
        }
    }

    let mut depth = Plane::new(height, width, canvas.height).expect("finite height field");
    let mut reflectance = Plane::new(height, width, reflectance).expect("finite shading");
    depth.quantize_to_f32();
    reflectance.quantize_to_f32();
    (depth, reflectance)
}

/// Generates the dataset under `out_dir`: plane files in `planes/` plus a
/// `manifest.tsv`. Fully deterministic per (seed, class, index).
pub fn generate_synthetic_dataset(
    cfg: &GeneratorConfig,
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    let counts = cfg.class_counts()?;
    let planes_dir = out_dir.join("planes");
    fs::create_dir_all(&planes_dir)?;

    let mut entries = Vec::new();
    for (ci, class) in MaterialClass::ALL.iter().enumerate() {
        for j in 0..counts[ci] {
            let id = format!("{}_{j:05}", class.name().to_lowercase());
            let mut rng = stream::derive(seed, "synth-sample", &[ci as u64, j as u64]);
            let (depth, reflectance) = render_sample(*class, cfg.image_height, cfg.image_width, &mut rng);
            let ref_rel = format!("planes/{id}_ref.dpc");
            let dep_rel = format!("planes/{id}_dep.dpc");
            write_plane(&out_dir.join(&ref_rel), &reflectance)?;
            write_plane(&out_dir.join(&dep_rel), &depth)?;
            entries.push(ManifestEntry {
                id,
                class: *class,
                reflectance_path: ref_rel.into(),
                depth_path: dep_rel.into(),
            });
        }
    }
    let manifest = DatasetManifest { entries };
    manifest.write(&out_dir.join("manifest.tsv"))?;
    Ok(manifest)
}
