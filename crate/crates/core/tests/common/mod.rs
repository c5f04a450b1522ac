//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use rand::Rng;
use trace_auth::stroke::{Drawing, StrokePoint};

/// Random drawing with 1-4 strokes of 1-10 points anywhere on the canvas.
pub fn random_drawing(rng: &mut impl Rng) -> Drawing {
    let strokes = (0..rng.gen_range(1..=4))
        .map(|_| {
            (0..rng.gen_range(1..=10))
                .map(|_| StrokePoint::new(rng.gen_range(0.0..=256.0), rng.gen_range(0.0..=256.0)))
                .collect()
        })
        .collect();
    Drawing { participant_id: "oracle".into(), digit: rng.gen_range(0..10), device_id: Some("test".into()), strokes }
}

/// Distance from a point to a segment, by cases: the perpendicular foot when
/// it falls inside the segment, otherwise the nearer endpoint.
fn point_segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let ab = (b.0 - a.0, b.1 - a.1);
    let ap = (p.0 - a.0, p.1 - a.1);
    let bp = (p.0 - b.0, p.1 - b.1);
    let len = ab.0.hypot(ab.1);
    if len == 0.0 || ap.0 * ab.0 + ap.1 * ab.1 <= 0.0 {
        return ap.0.hypot(ap.1);
    }
    if bp.0 * ab.0 + bp.1 * ab.1 >= 0.0 {
        return bp.0.hypot(bp.1);
    }
    (ab.0 * ap.1 - ab.1 * ap.0).abs() / len
}

/// Brute force: test every source pixel center against every segment.
pub fn oracle_mask(d: &Drawing, width: u32) -> Vec<bool> {
    let r = width as f64 / 2.0;
    let mut segs = Vec::new();
    for s in &d.strokes {
        if s.len() == 1 {
            segs.push(((s[0].x, s[0].y), (s[0].x, s[0].y)));
        }
        for w in s.windows(2) {
            segs.push(((w[0].x, w[0].y), (w[1].x, w[1].y)));
        }
    }
    let mut mask = vec![false; 256 * 256];
    for row in 0..256 {
        for col in 0..256 {
            let p = (col as f64 + 0.5, row as f64 + 0.5);
            mask[row * 256 + col] = segs.iter().any(|&(a, b)| point_segment_distance(p, a, b) <= r);
        }
    }
    mask
}

/// An output cell is ink whenever any source pixel in its block is.
pub fn oracle_reduce(mask: &[bool], size: usize) -> Vec<u8> {
    let block = 256 / size;
    let mut out = vec![0u8; size * size];
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        out[(i / 256 / block) * size + (i % 256) / block] = 1;
    }
    out
}

pub fn oracle_rasterize(d: &Drawing, size: usize, width: u32) -> Vec<u8> {
    oracle_reduce(&oracle_mask(d, width), size)
}

/// Direct seven-deep loop-nest cross-correlation with zero padding.
pub fn conv_oracle(
    x: &[f64],
    (c_in, h, w): (usize, usize, usize),
    k: &[f64],
    (c_out, kh, kw): (usize, usize, usize),
    bias: &[f64],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; c_out * ho * wo];
    for o in 0..c_out {
        for i in 0..ho {
            for j in 0..wo {
                let mut acc = bias[o];
                for c in 0..c_in {
                    for u in 0..kh {
                        for v in 0..kw {
                            let (r, s) = ((i * stride + u) as isize - pad as isize, (j * stride + v) as isize - pad as isize);
                            if r >= 0 && s >= 0 && (r as usize) < h && (s as usize) < w {
                                acc += k[((o * c_in + c) * kh + u) * kw + v] * x[(c * h + r as usize) * w + s as usize];
                            }
                        }
                    }
                }
                out[(o * ho + i) * wo + j] = acc;
            }
        }
    }
    (out, ho, wo)
}

/// AUC as the probability that a random positive outranks a random
/// negative, ties counting one half.
pub fn mann_whitney_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &y)| y).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &y)| !y).map(|(&s, _)| s).collect();
    let mut wins = 0.0;
    for p in &pos {
        for n in &neg {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

pub const FD_STEP: f64 = 1e-3;
pub const FD_TOLERANCE: f64 = 1e-3;

/// Central finite-difference gradient of `f` at `x`.
pub fn numeric_gradient(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + FD_STEP;
            let up = f(&probe);
            probe[i] = orig - FD_STEP;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖ + ‖b‖, tiny)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut a.iter().zip(b).map(|(x, y)| x - y));
    let scale = norm(&mut a.iter().copied()) + norm(&mut b.iter().copied());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

pub mod gradcheck;

use std::collections::HashSet;
use std::sync::Arc;
use trace_auth::harness::SplitPlan;
use trace_auth::stroke::{DatasetManifest, DrawingRecord};

/// Cheap manifest: `counts[i]` one-dot drawings for participant `i`, digits
/// cycling 0-9.
pub fn tiny_manifest(counts: &[usize]) -> DatasetManifest {
    let mut records = Vec::new();
    for (p, &n) in counts.iter().enumerate() {
        let participant = format!("u{p:02}");
        for k in 0..n {
            let digit = (k % 10) as u32;
            let drawing = Drawing {
                participant_id: participant.clone(),
                digit,
                device_id: Some("test".into()),
                strokes: vec![vec![StrokePoint::new(128.0, 128.0)]],
            };
            let id = format!("{participant}-{k:05}");
            records.push(DrawingRecord { path: id.clone().into(), id, drawing: Arc::new(drawing) });
        }
    }
    DatasetManifest::from_records("memory".into(), records)
}

/// Checks every split-protocol invariant; returns the first violation.
pub fn check_split(manifest: &DatasetManifest, plan: &SplitPlan) -> Result<(), String> {
    let n = manifest.drawings_of(&plan.authorized_id).len() as f64;
    let parts = [(&plan.train, 0.6), (&plan.val, 0.2), (&plan.test, 0.2)];
    for (i, (part, ratio)) in parts.iter().enumerate() {
        let got = part.authorized.len() as f64;
        if (got - ratio * n).abs() > 1.0 {
            return Err(format!("partition {i}: {got} authorized, expected {} ± 1", ratio * n));
        }
        if part.unauthorized.len() != part.authorized.len() {
            return Err(format!("partition {i}: {} unauthorized vs {} authorized", part.unauthorized.len(), part.authorized.len()));
        }
        if part.authorized.iter().any(|s| !s.authorized || s.participant_id != plan.authorized_id) {
            return Err(format!("partition {i}: foreign sample on the authorized side"));
        }
    }
    let a = &plan.attackers;
    let sets: Vec<HashSet<&String>> = [&a.train, &a.val, &a.test].iter().map(|v| v.iter().collect()).collect();
    if sets.iter().any(|s| s.contains(&plan.authorized_id)) {
        return Err("authorized participant listed as attacker".into());
    }
    if !sets[0].is_disjoint(&sets[1]) || !sets[0].is_disjoint(&sets[2]) || !sets[1].is_disjoint(&sets[2]) {
        return Err("attacker sets overlap".into());
    }
    for (i, part) in [&plan.train, &plan.val, &plan.test].iter().enumerate() {
        if let Some(s) = part.unauthorized.iter().find(|s| s.authorized || !sets[i].contains(&s.participant_id)) {
            return Err(format!("partition {i}: sample {} from {} outside its attacker set", s.id, s.participant_id));
        }
    }
    let mut seen = HashSet::new();
    for s in plan.train.all().chain(plan.val.all()).chain(plan.test.all()) {
        if !seen.insert(&s.id) {
            return Err(format!("drawing {} appears twice", s.id));
        }
    }
    Ok(())
}
