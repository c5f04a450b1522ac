//! Seeded synthetic cohort of finger-drawn digits.
//!
//! Every participant gets a persistent writing style: overall size, slant,
//! aspect, rotation and placement on the canvas, a fixed personal
//! displacement of each digit's control points, and a choice between glyph
//! variants (a crossed 7, an open 4, ...). Each drawing then perturbs that
//! style with per-attempt jitter and is sampled along a Catmull-Rom spline.
//! Used for tests, demos and desk-scale experiments when no recorded
//! dataset is at hand.

use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::stroke::{self, DatasetManifest, Drawing, DrawingRecord, StrokeError, StrokePoint, CANVAS_SIZE};

type Glyph = Vec<Vec<(f64, f64)>>;

fn glyph(digit: u32, variant: bool) -> Glyph {
    let g: &[&[(f64, f64)]] = match (digit, variant) {
        (0, _) => &[&[
            (0.5, 0.05), (0.2, 0.2), (0.12, 0.5), (0.2, 0.8), (0.5, 0.95),
            (0.8, 0.8), (0.88, 0.5), (0.8, 0.2), (0.52, 0.06),
        ]],
        (1, false) => &[&[(0.3, 0.25), (0.55, 0.05), (0.55, 0.95)]],
        (1, true) => &[&[(0.3, 0.25), (0.55, 0.05), (0.55, 0.95)], &[(0.3, 0.95), (0.8, 0.95)]],
        (2, false) => &[&[(0.2, 0.25), (0.35, 0.08), (0.65, 0.08), (0.8, 0.28), (0.7, 0.5), (0.2, 0.95), (0.85, 0.95)]],
        (2, true) => &[&[(0.2, 0.25), (0.4, 0.05), (0.75, 0.15), (0.65, 0.5), (0.2, 0.92), (0.45, 0.8), (0.85, 0.92)]],
        (3, _) => &[&[
            (0.2, 0.12), (0.5, 0.04), (0.78, 0.18), (0.7, 0.4), (0.45, 0.5),
            (0.75, 0.6), (0.82, 0.82), (0.5, 0.96), (0.18, 0.86),
        ]],
        (4, false) => &[&[(0.65, 0.05), (0.15, 0.65), (0.88, 0.65)], &[(0.65, 0.3), (0.65, 0.97)]],
        (4, true) => &[&[(0.2, 0.05), (0.15, 0.6), (0.85, 0.6)], &[(0.65, 0.05), (0.65, 0.97)]],
        (5, false) => &[&[
            (0.8, 0.05), (0.25, 0.05), (0.2, 0.45), (0.55, 0.4), (0.82, 0.6),
            (0.75, 0.88), (0.45, 0.97), (0.18, 0.85),
        ]],
        (5, true) => &[
            &[(0.25, 0.05), (0.2, 0.45), (0.55, 0.4), (0.82, 0.6), (0.75, 0.88), (0.45, 0.97), (0.18, 0.85)],
            &[(0.25, 0.05), (0.8, 0.07)],
        ],
        (6, _) => &[&[
            (0.72, 0.06), (0.4, 0.2), (0.2, 0.55), (0.25, 0.85), (0.5, 0.96),
            (0.78, 0.8), (0.72, 0.56), (0.45, 0.5), (0.22, 0.65),
        ]],
        (7, false) => &[&[(0.15, 0.07), (0.85, 0.07), (0.45, 0.97)]],
        (7, true) => &[&[(0.15, 0.07), (0.85, 0.07), (0.45, 0.97)], &[(0.35, 0.5), (0.75, 0.5)]],
        (8, _) => &[&[
            (0.55, 0.05), (0.25, 0.2), (0.35, 0.42), (0.68, 0.58), (0.78, 0.8), (0.5, 0.96),
            (0.22, 0.8), (0.35, 0.58), (0.68, 0.42), (0.75, 0.2), (0.55, 0.05),
        ]],
        (9, false) => &[&[(0.78, 0.3), (0.5, 0.05), (0.22, 0.25), (0.35, 0.48), (0.78, 0.35), (0.75, 0.6), (0.6, 0.97)]],
        (9, true) => &[&[(0.78, 0.3), (0.5, 0.05), (0.22, 0.25), (0.35, 0.48), (0.78, 0.3), (0.78, 0.97)]],
        _ => unreachable!("digit outside 0..=9"),
    };
    g.iter().map(|s| s.to_vec()).collect()
}

/// Per-drawing variability. Larger values make participants harder to tell
/// apart.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Noise {
    /// Std of control-point jitter, as a fraction of the glyph box.
    pub point_jitter: f64,
    /// Std of the relative size change.
    pub scale_jitter: f64,
    /// Std of the placement change, fraction of the canvas.
    pub offset_jitter: f64,
    /// Std of the rotation change, radians.
    pub rotation_jitter: f64,
}

impl Default for Noise {
    fn default() -> Self {
        Noise { point_jitter: 0.03, scale_jitter: 0.05, offset_jitter: 0.03, rotation_jitter: 0.04 }
    }
}

/// A participant's persistent writing style.
#[derive(Debug, Clone, PartialEq)]
pub struct Style {
    pub size: f64,
    pub aspect: f64,
    pub slant: f64,
    pub rotation: f64,
    pub center: (f64, f64),
    variants: [bool; 10],
    displacement: Vec<Glyph>,
}

impl Style {
    pub fn sample(rng: &mut impl Rng) -> Style {
        let normal = |s: f64| Normal::new(0.0, s).unwrap();
        let variants = std::array::from_fn(|_| rng.gen_bool(0.5));
        let personal = normal(0.06);
        let displacement = (0..10u32)
            .map(|d| {
                glyph(d, variants[d as usize])
                    .iter()
                    .map(|s| s.iter().map(|_| (personal.sample(rng), personal.sample(rng))).collect())
                    .collect()
            })
            .collect();
        Style {
            size: rng.gen_range(0.45..0.8),
            aspect: rng.gen_range(0.7..1.2),
            slant: normal(0.2).sample(rng),
            rotation: normal(0.1).sample(rng),
            center: (rng.gen_range(0.35..0.65), rng.gen_range(0.35..0.65)),
            variants,
            displacement,
        }
    }

    /// One attempt at `digit` in this style.
    pub fn draw(&self, participant: &str, digit: u32, noise: &Noise, rng: &mut impl Rng) -> Drawing {
        let normal = |s: f64| Normal::new(0.0, s.max(1e-12)).unwrap();
        let jitter = normal(noise.point_jitter);
        let size = self.size * (1.0 + normal(noise.scale_jitter).sample(rng)) * CANVAS_SIZE;
        let rot = self.rotation + normal(noise.rotation_jitter).sample(rng);
        let cx = (self.center.0 + normal(noise.offset_jitter).sample(rng)) * CANVAS_SIZE;
        let cy = (self.center.1 + normal(noise.offset_jitter).sample(rng)) * CANVAS_SIZE;
        let (sin, cos) = rot.sin_cos();

        let base = glyph(digit, self.variants[digit as usize]);
        let disp = &self.displacement[digit as usize];
        let mut t = 0.0;
        let strokes = base
            .iter()
            .zip(disp)
            .map(|(stroke, d)| {
                let control: Vec<(f64, f64)> = stroke
                    .iter()
                    .zip(d)
                    .map(|(&(x, y), &(dx, dy))| {
                        // Glyph box centered at the origin, then slant, aspect, rotate.
                        let u = x - 0.5 + dx + jitter.sample(rng);
                        let v = y - 0.5 + dy + jitter.sample(rng);
                        let u = (u - self.slant * v) * self.aspect;
                        (cx + size * (cos * u - sin * v), cy + size * (sin * u + cos * v))
                    })
                    .collect();
                let pts = catmull_rom(&control, 3.0);
                let out: Vec<StrokePoint> = pts
                    .into_iter()
                    .map(|(x, y)| {
                        t += 8.0;
                        StrokePoint::timed(x.clamp(0.0, CANVAS_SIZE), y.clamp(0.0, CANVAS_SIZE), t)
                    })
                    .collect();
                t += 120.0;
                out
            })
            .collect();
        Drawing { participant_id: participant.to_string(), digit, device_id: Some("synthetic".into()), strokes }
    }
}

/// Samples a Catmull-Rom spline through `control` about every `spacing` px.
fn catmull_rom(control: &[(f64, f64)], spacing: f64) -> Vec<(f64, f64)> {
    if control.len() < 2 {
        return control.to_vec();
    }
    let n = control.len();
    let at = |i: isize| control[i.clamp(0, n as isize - 1) as usize];
    let mut out = vec![control[0]];
    for i in 0..n - 1 {
        let (p0, p1, p2, p3) = (at(i as isize - 1), at(i as isize), at(i as isize + 1), at(i as isize + 2));
        let len = ((p2.0 - p1.0).powi(2) + (p2.1 - p1.1).powi(2)).sqrt();
        let steps = ((len / spacing).ceil() as usize).max(1);
        for s in 1..=steps {
            let t = s as f64 / steps as f64;
            let (t2, t3) = (t * t, t * t * t);
            let f = |a: f64, b: f64, c: f64, d: f64| {
                0.5 * (2.0 * b + (-a + c) * t + (2.0 * a - 5.0 * b + 4.0 * c - d) * t2 + (-a + 3.0 * b - 3.0 * c + d) * t3)
            };
            out.push((f(p0.0, p1.0, p2.0, p3.0), f(p0.1, p1.1, p2.1, p3.1)));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CohortConfig {
    pub participants: usize,
    pub drawings_per_digit: usize,
    pub seed: u64,
    pub noise: Noise,
}

impl Default for CohortConfig {
    fn default() -> Self {
        CohortConfig { participants: 5, drawings_per_digit: 20, seed: 2024, noise: Noise::default() }
    }
}

pub fn participant_name(i: usize) -> String {
    format!("p{:02}", i + 1)
}

/// Generates a whole cohort as `(id, drawing)` pairs with deterministic ids.
pub fn generate_cohort(cfg: &CohortConfig) -> Vec<(String, Drawing)> {
    let mut out = Vec::with_capacity(cfg.participants * cfg.drawings_per_digit * 10);
    for p in 0..cfg.participants {
        let name = participant_name(p);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(p as u64 + 1)));
        let style = Style::sample(&mut rng);
        for digit in 0..10 {
            for k in 0..cfg.drawings_per_digit {
                let d = style.draw(&name, digit, &cfg.noise, &mut rng);
                out.push((format!("{name}-{digit}-{k:04}"), d));
            }
        }
    }
    out
}

/// In-memory manifest of a generated cohort.
pub fn cohort_manifest(cfg: &CohortConfig) -> DatasetManifest {
    let records = generate_cohort(cfg)
        .into_iter()
        .map(|(id, d)| {
            let d = stroke::validate_drawing(&d).expect("generated drawings are valid");
            DrawingRecord { path: format!("synthetic/{id}.json").into(), id, drawing: Arc::new(d) }
        })
        .collect();
    DatasetManifest::from_records("synthetic".into(), records)
}

/// Writes a generated cohort in the on-disk dataset layout.
pub fn write_cohort(root: &Path, cfg: &CohortConfig) -> Result<usize, StrokeError> {
    let cohort = generate_cohort(cfg);
    for (id, d) in &cohort {
        let dir = root.join(&d.participant_id).join(d.digit.to_string());
        let io = |e: std::io::Error| StrokeError::IoFailure { path: dir.clone(), reason: e.to_string() };
        std::fs::create_dir_all(&dir).map_err(io)?;
        std::fs::write(dir.join(format!("{id}.json")), d.to_json()).map_err(io)?;
    }
    Ok(cohort.len())
}
