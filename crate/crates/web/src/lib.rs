//! Browser bindings for the demo page: stroke rasterization, a ROC /
//! threshold explorer and the compound false-acceptance calculator.
//!
//! The plain Rust functions are usable natively; the `wasm` module wraps
//! them for JavaScript.

use serde::{Deserialize, Serialize};
use trace_auth::eval::{self, RocCurve};
use trace_auth::raster::{rasterize, RasterConfig};
use trace_auth::stroke::{self, Drawing, StrokePoint};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Operating {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
    pub acc: f64,
    pub eer: f64,
}

/// Rasterizes strokes given as `[[[x, y], ...], ...]` on the 256 canvas.
pub fn rasterize_strokes(strokes: &[Vec<(f64, f64)>], size: usize, width: u32) -> Result<Vec<u8>, String> {
    let drawing = Drawing {
        participant_id: "demo".into(),
        digit: 0,
        device_id: Some("browser".into()),
        strokes: strokes.iter().map(|s| s.iter().map(|&(x, y)| StrokePoint::new(x, y)).collect()).collect(),
    };
    let drawing = stroke::validate_drawing(&drawing).map_err(|e| e.to_string())?;
    let cfg = RasterConfig::new(size, width).map_err(|e| e.to_string())?;
    rasterize(&drawing, &cfg).map(|img| img.values).map_err(|e| e.to_string())
}

/// Scores and labels with their ROC, queried at arbitrary thresholds.
#[derive(Debug, Clone)]
pub struct Explorer {
    scores: Vec<f64>,
    labels: Vec<bool>,
    roc: RocCurve,
}

impl Explorer {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self, String> {
        let roc = eval::roc(&scores, &labels).map_err(|e| e.to_string())?;
        Ok(Explorer { scores, labels, roc })
    }

    /// Two overlapping normal score populations, for the demo without data.
    pub fn synthetic(n: usize, separation: f64, seed: u64) -> Result<Self, String> {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let neg = Normal::new(0.0, 1.0).map_err(|e| e.to_string())?;
        let pos = Normal::new(separation, 1.0).map_err(|e| e.to_string())?;
        let mut scores = Vec::with_capacity(2 * n);
        let mut labels = Vec::with_capacity(2 * n);
        for _ in 0..n {
            scores.push(pos.sample(&mut rng));
            labels.push(true);
            scores.push(neg.sample(&mut rng));
            labels.push(false);
        }
        Explorer::new(scores, labels)
    }

    pub fn roc_points(&self) -> &[(f64, f64)] {
        &self.roc.points
    }

    pub fn auc(&self) -> f64 {
        eval::auc(&self.roc)
    }

    pub fn score_range(&self) -> (f64, f64) {
        let lo = self.scores.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    }

    pub fn at(&self, threshold: f64) -> Operating {
        let c = eval::confusion(&self.scores, &self.labels, threshold).expect("validated on construction");
        let (far, frr) = (eval::far(&c), eval::frr(&c));
        Operating { threshold, far, frr, acc: eval::acc(&c), eer: eval::eer_paper(far, frr) }
    }

    /// Threshold where FAR and FRR are closest.
    pub fn crossing(&self) -> Option<Operating> {
        let curve = eval::tradeoff_curve(&self.scores, &self.labels).ok()?;
        eval::eer_point(&curve).map(|p| self.at(p.threshold))
    }
}

pub fn compound_far(far: f64, symbols: u32) -> f64 {
    eval::compound_far(far, symbols)
}

#[cfg(target_arch = "wasm32")]
mod wasm {
    use wasm_bindgen::prelude::*;

    fn js_err(e: String) -> JsValue {
        JsValue::from_str(&e)
    }

    /// `strokes_json`: `[[[x, y], ...], ...]`. Returns `size * size` cells, 1 = ink.
    #[wasm_bindgen(js_name = rasterizeStrokes)]
    pub fn rasterize_strokes(strokes_json: &str, size: usize, width: u32) -> Result<Vec<u8>, JsValue> {
        let strokes: Vec<Vec<(f64, f64)>> = serde_json::from_str(strokes_json).map_err(|e| js_err(e.to_string()))?;
        super::rasterize_strokes(&strokes, size, width).map_err(js_err)
    }

    #[wasm_bindgen(js_name = compoundFar)]
    pub fn compound_far(far: f64, symbols: u32) -> f64 {
        super::compound_far(far, symbols)
    }

    #[wasm_bindgen]
    pub struct RocExplorer(super::Explorer);

    #[wasm_bindgen]
    impl RocExplorer {
        #[wasm_bindgen(constructor)]
        pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<RocExplorer, JsValue> {
            super::Explorer::new(scores, labels.into_iter().map(|l| l != 0).collect()).map(RocExplorer).map_err(js_err)
        }

        pub fn synthetic(n: usize, separation: f64, seed: u64) -> Result<RocExplorer, JsValue> {
            super::Explorer::synthetic(n, separation, seed).map(RocExplorer).map_err(js_err)
        }

        /// Flat `[fpr0, tpr0, fpr1, tpr1, ...]`.
        #[wasm_bindgen(js_name = rocPoints)]
        pub fn roc_points(&self) -> Vec<f64> {
            self.0.roc_points().iter().flat_map(|&(x, y)| [x, y]).collect()
        }

        pub fn auc(&self) -> f64 {
            self.0.auc()
        }

        #[wasm_bindgen(js_name = scoreRange)]
        pub fn score_range(&self) -> Vec<f64> {
            let (lo, hi) = self.0.score_range();
            vec![lo, hi]
        }

        /// JSON `{threshold, far, frr, acc, eer}`.
        pub fn at(&self, threshold: f64) -> String {
            serde_json::to_string(&self.0.at(threshold)).unwrap()
        }

        pub fn crossing(&self) -> Option<String> {
            self.0.crossing().map(|o| serde_json::to_string(&o).unwrap())
        }
    }
}
