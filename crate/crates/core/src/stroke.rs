//! Stroke data model, canonical JSON parsing and dataset loading.
//!
//! Canonical document:
//!
//! ```json
//! {"participant": "p01", "digit": 3, "device": "pixel-7",
//!  "strokes": [[{"x": 10, "y": 20, "t": 0}, {"x": 30, "y": 40, "t": 16}]]}
//! ```
//!
//! Coordinates are source-canvas pixels in `[0, 256]`. `device` and `t` are
//! optional. Unknown fields are ignored. The on-disk layout of a dataset is
//! `<root>/<participant>/<digit>/<uuid>.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

/// Side length of the capture canvas, in pixels.
pub const CANVAS_SIZE: f64 = 256.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StrokeError {
    #[error("malformed json: {0}")]
    MalformedJson(String),
    #[error("schema violation at `{field}`: {reason}")]
    SchemaViolation { field: String, reason: String },
    #[error("non-finite coordinate at `{field}`")]
    NonFiniteCoordinate { field: String },
    #[error("drawing has no points")]
    EmptyDrawing,
    #[error("digit label {0} is outside 0..=9")]
    LabelOutOfRange(u32),
    #[error("timestamps decrease along stroke {stroke}")]
    TimestampOrder { stroke: usize },
    #[error("io failure on {path}: {reason}")]
    IoFailure { path: PathBuf, reason: String },
    #[error("no valid drawings under {0}")]
    NoValidDrawings(PathBuf),
}

impl StrokeError {
    fn schema(field: impl Into<String>, reason: impl Into<String>) -> Self {
        StrokeError::SchemaViolation {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrokePoint {
    pub x: f64,
    pub y: f64,
    /// Milliseconds since the drawing started. Carried, never used as a feature.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t: Option<f64>,
}

impl StrokePoint {
    pub fn new(x: f64, y: f64) -> Self {
        StrokePoint { x, y, t: None }
    }

    pub fn timed(x: f64, y: f64, t: f64) -> Self {
        StrokePoint { x, y, t: Some(t) }
    }
}

pub type Stroke = Vec<StrokePoint>;

/// One finger-drawn digit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Drawing {
    #[serde(rename = "participant")]
    pub participant_id: String,
    pub digit: u32,
    #[serde(rename = "device", default, skip_serializing_if = "Option::is_none")]
    pub device_id: Option<String>,
    pub strokes: Vec<Stroke>,
}

impl Drawing {
    pub fn point_count(&self) -> usize {
        self.strokes.iter().map(Vec::len).sum()
    }

    /// Serializes to the canonical schema.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("drawing serializes")
    }

    /// Reflects every x coordinate about the canvas center.
    pub fn mirrored_x(&self) -> Drawing {
        let mut d = self.clone();
        for p in d.strokes.iter_mut().flatten() {
            p.x = CANVAS_SIZE - p.x;
        }
        d
    }
}

/// Parses a canonical drawing document.
pub fn parse_drawing_json(bytes: &[u8]) -> Result<Drawing, StrokeError> {
    let text = std::str::from_utf8(bytes)
        .map_err(|e| StrokeError::MalformedJson(format!("invalid utf-8: {e}")))?;
    let value: Value =
        serde_json::from_str(text).map_err(|e| StrokeError::MalformedJson(e.to_string()))?;
    drawing_from_value(&value)
}

/// Builds a [`Drawing`] from an already-parsed canonical JSON value.
pub fn drawing_from_value(value: &Value) -> Result<Drawing, StrokeError> {
    let obj = value
        .as_object()
        .ok_or_else(|| StrokeError::schema("$", "expected an object"))?;

    let participant_id = match obj.get("participant") {
        Some(Value::String(s)) if !s.is_empty() => s.clone(),
        Some(Value::String(_)) => return Err(StrokeError::schema("participant", "empty")),
        Some(_) => return Err(StrokeError::schema("participant", "expected a string")),
        None => return Err(StrokeError::schema("participant", "missing")),
    };

    let digit = match obj.get("digit") {
        Some(v) => v
            .as_u64()
            .and_then(|d| u32::try_from(d).ok())
            .ok_or_else(|| StrokeError::schema("digit", "expected a non-negative integer"))?,
        None => return Err(StrokeError::schema("digit", "missing")),
    };

    let device_id = match obj.get("device") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(_) => return Err(StrokeError::schema("device", "expected a string")),
    };

    let raw_strokes = match obj.get("strokes") {
        Some(Value::Array(a)) if !a.is_empty() => a,
        Some(Value::Array(_)) => return Err(StrokeError::schema("strokes", "empty")),
        Some(_) => return Err(StrokeError::schema("strokes", "expected an array")),
        None => return Err(StrokeError::schema("strokes", "missing")),
    };

    let mut strokes = Vec::with_capacity(raw_strokes.len());
    for (si, raw) in raw_strokes.iter().enumerate() {
        let points = raw
            .as_array()
            .ok_or_else(|| StrokeError::schema(format!("strokes[{si}]"), "expected an array"))?;
        let mut stroke = Vec::with_capacity(points.len());
        for (pi, p) in points.iter().enumerate() {
            let field = format!("strokes[{si}][{pi}]");
            let po = p
                .as_object()
                .ok_or_else(|| StrokeError::schema(&field, "expected an object"))?;
            let x = coordinate(po, "x", &field)?
                .ok_or_else(|| StrokeError::schema(format!("{field}.x"), "missing"))?;
            let y = coordinate(po, "y", &field)?
                .ok_or_else(|| StrokeError::schema(format!("{field}.y"), "missing"))?;
            let t = coordinate(po, "t", &field)?;
            stroke.push(StrokePoint { x, y, t });
        }
        strokes.push(stroke);
    }

    Ok(Drawing {
        participant_id,
        digit,
        device_id,
        strokes,
    })
}

fn coordinate(obj: &Map<String, Value>, key: &str, at: &str) -> Result<Option<f64>, StrokeError> {
    let field = || format!("{at}.{key}");
    match obj.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::Number(n)) => {
            let v = n
                .as_f64()
                .ok_or_else(|| StrokeError::NonFiniteCoordinate { field: field() })?;
            if v.is_finite() {
                Ok(Some(v))
            } else {
                Err(StrokeError::NonFiniteCoordinate { field: field() })
            }
        }
        // Some clients stringify numbers; "NaN" / "Infinity" arrive this way.
        Some(Value::String(s)) => match s.trim().parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(Some(v)),
            Ok(_) => Err(StrokeError::NonFiniteCoordinate { field: field() }),
            Err(_) => Err(StrokeError::schema(field(), "expected a number")),
        },
        Some(_) => Err(StrokeError::schema(field(), "expected a number")),
    }
}

/// Cleans a parsed drawing: clamps coordinates into the canvas, drops empty
/// strokes, and rejects drawings that end up with no points.
pub fn validate_drawing(d: &Drawing) -> Result<Drawing, StrokeError> {
    if d.digit > 9 {
        return Err(StrokeError::LabelOutOfRange(d.digit));
    }
    let mut strokes = Vec::with_capacity(d.strokes.len());
    for s in d.strokes.iter().filter(|s| !s.is_empty()) {
        let mut last_t = f64::NEG_INFINITY;
        let mut cleaned = Vec::with_capacity(s.len());
        for p in s {
            if !(p.x.is_finite() && p.y.is_finite()) {
                return Err(StrokeError::NonFiniteCoordinate {
                    field: format!("strokes[{}]", strokes.len()),
                });
            }
            if let Some(t) = p.t {
                if !t.is_finite() || t < last_t {
                    return Err(StrokeError::TimestampOrder {
                        stroke: strokes.len(),
                    });
                }
                last_t = t;
            }
            cleaned.push(StrokePoint {
                x: p.x.clamp(0.0, CANVAS_SIZE),
                y: p.y.clamp(0.0, CANVAS_SIZE),
                t: p.t,
            });
        }
        strokes.push(cleaned);
    }
    if strokes.is_empty() {
        return Err(StrokeError::EmptyDrawing);
    }
    Ok(Drawing {
        participant_id: d.participant_id.clone(),
        digit: d.digit,
        device_id: d.device_id.clone(),
        strokes,
    })
}

/// Parse followed by validation.
pub fn read_drawing(bytes: &[u8]) -> Result<Drawing, StrokeError> {
    validate_drawing(&parse_drawing_json(bytes)?)
}

/// A drawing that passed validation, with its storage identity.
#[derive(Debug, Clone)]
pub struct DrawingRecord {
    /// File stem; unique within a dataset.
    pub id: String,
    pub path: PathBuf,
    pub drawing: Arc<Drawing>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Rejection {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct DatasetManifest {
    pub participants: Vec<String>,
    pub index: BTreeMap<(String, u32), Vec<DrawingRecord>>,
    pub rejections: Vec<Rejection>,
    pub source_path: PathBuf,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.index.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All records of one participant, ordered by digit then id.
    pub fn drawings_of(&self, participant: &str) -> Vec<&DrawingRecord> {
        self.index
            .range((participant.to_string(), 0)..=(participant.to_string(), u32::MAX))
            .flat_map(|(_, v)| v.iter())
            .collect()
    }

    pub fn records(&self) -> impl Iterator<Item = &DrawingRecord> {
        self.index.values().flatten()
    }

    /// Builds an in-memory manifest; records are sorted by id within each key.
    pub fn from_records(source_path: PathBuf, records: Vec<DrawingRecord>) -> Self {
        let mut index: BTreeMap<(String, u32), Vec<DrawingRecord>> = BTreeMap::new();
        for r in records {
            index
                .entry((r.drawing.participant_id.clone(), r.drawing.digit))
                .or_default()
                .push(r);
        }
        for v in index.values_mut() {
            v.sort_by(|a, b| a.id.cmp(&b.id));
        }
        let mut participants: Vec<String> = index.keys().map(|(p, _)| p.clone()).collect();
        participants.dedup();
        DatasetManifest {
            participants,
            index,
            rejections: Vec::new(),
            source_path,
        }
    }
}

/// Indexes every `<root>/<participant>/<digit>/<id>.json` file. Files that
/// fail parsing or validation, or whose content disagrees with their
/// directory, are listed in `rejections`.
pub fn load_dataset(root: &Path) -> Result<DatasetManifest, StrokeError> {
    let io_err = |path: &Path, e: &dyn std::fmt::Display| StrokeError::IoFailure {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    if !root.is_dir() {
        return Err(io_err(root, &"not a directory"));
    }
    let mut records = Vec::new();
    let mut rejections = Vec::new();
    let mut paths: Vec<PathBuf> = Vec::new();
    for entry in walkdir::WalkDir::new(root).min_depth(3).max_depth(3) {
        let entry = entry.map_err(|e| io_err(root, &e))?;
        if entry.file_type().is_file()
            && entry.path().extension().is_some_and(|e| e == "json")
        {
            paths.push(entry.into_path());
        }
    }
    paths.sort();

    for path in paths {
        let bytes = fs::read(&path).map_err(|e| io_err(&path, &e))?;
        let reject = |reason: String| Rejection {
            path: path.clone(),
            reason,
        };
        match read_drawing(&bytes) {
            Ok(d) => {
                let rel: Vec<String> = path
                    .strip_prefix(root)
                    .unwrap_or(&path)
                    .iter()
                    .map(|c| c.to_string_lossy().into_owned())
                    .collect();
                if rel[0] != d.participant_id || rel[1] != d.digit.to_string() {
                    rejections.push(reject(format!(
                        "content ({}, {}) disagrees with location {}/{}",
                        d.participant_id, d.digit, rel[0], rel[1]
                    )));
                    continue;
                }
                let id = path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                records.push(DrawingRecord {
                    id,
                    path: path.clone(),
                    drawing: Arc::new(d),
                });
            }
            Err(e) => rejections.push(reject(e.to_string())),
        }
    }

    if records.is_empty() {
        return Err(StrokeError::NoValidDrawings(root.to_path_buf()));
    }
    let mut manifest = DatasetManifest::from_records(root.to_path_buf(), records);
    manifest.rejections = rejections;
    Ok(manifest)
}

/// Writes a drawing into the dataset layout under a fresh uuid and returns
/// `(id, path)`.
pub fn store_drawing(root: &Path, d: &Drawing) -> Result<(String, PathBuf), StrokeError> {
    let dir = root.join(&d.participant_id).join(d.digit.to_string());
    fs::create_dir_all(&dir).map_err(|e| StrokeError::IoFailure {
        path: dir.clone(),
        reason: e.to_string(),
    })?;
    let id = uuid::Uuid::new_v4().to_string();
    let path = dir.join(format!("{id}.json"));
    fs::write(&path, d.to_json()).map_err(|e| StrokeError::IoFailure {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    Ok((id, path))
}

/// Maps alternative JSON layouts onto the canonical schema.
///
/// Accepted variations: `participant_id` / `user` / `user_id` for the
/// participant, `label` for the digit, `device_id` for the device,
/// `points` (a single stroke) instead of `strokes`, and points written as
/// `[x, y]` or `[x, y, t]` arrays. Canonical documents pass through.
pub fn adapt_external(value: &Value) -> Result<Drawing, StrokeError> {
    let obj = value
        .as_object()
        .ok_or_else(|| StrokeError::schema("$", "expected an object"))?;
    let mut out = Map::new();
    let pick = |keys: &[&str]| keys.iter().find_map(|k| obj.get(*k)).cloned();

    if let Some(p) = pick(&["participant", "participant_id", "user", "user_id"]) {
        let p = match p {
            Value::Number(n) => Value::String(n.to_string()),
            other => other,
        };
        out.insert("participant".into(), p);
    }
    if let Some(d) = pick(&["digit", "label"]) {
        let d = match d {
            Value::String(s) => s.trim().parse::<u64>().map(Value::from).unwrap_or(Value::String(s)),
            other => other,
        };
        out.insert("digit".into(), d);
    }
    if let Some(dev) = pick(&["device", "device_id"]) {
        out.insert("device".into(), dev);
    }
    let strokes = match (obj.get("strokes"), obj.get("points")) {
        (Some(s), _) => s.clone(),
        (None, Some(p)) => Value::Array(vec![p.clone()]),
        (None, None) => Value::Null,
    };
    let strokes = match strokes {
        Value::Array(list) => Value::Array(
            list.into_iter()
                .map(|s| match s {
                    Value::Array(points) => {
                        Value::Array(points.into_iter().map(point_object).collect())
                    }
                    other => other,
                })
                .collect(),
        ),
        other => other,
    };
    if !strokes.is_null() {
        out.insert("strokes".into(), strokes);
    }
    drawing_from_value(&Value::Object(out))
}

fn point_object(p: Value) -> Value {
    match p {
        Value::Array(xs) if xs.len() == 2 || xs.len() == 3 => {
            let mut m = Map::new();
            m.insert("x".into(), xs[0].clone());
            m.insert("y".into(), xs[1].clone());
            if let Some(t) = xs.get(2) {
                m.insert("t".into(), t.clone());
            }
            Value::Object(m)
        }
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Drawing {
        Drawing {
            participant_id: "p01".into(),
            digit: 3,
            device_id: None,
            strokes: vec![vec![StrokePoint::new(10.0, 20.0), StrokePoint::new(30.0, 40.0)]],
        }
    }

    #[test]
    fn parses_canonical_document() {
        let d = parse_drawing_json(
            br#"{"participant":"p01","digit":3,"strokes":[[{"x":10,"y":20},{"x":30,"y":40}]],"extra":1}"#,
        )
        .unwrap();
        assert_eq!(d.strokes.len(), 1);
        assert_eq!(d.strokes[0].len(), 2);
        assert_eq!(d, sample());
    }

    #[test]
    fn rejects_empty_strokes() {
        let e = parse_drawing_json(br#"{"participant":"p01","digit":3,"strokes":[]}"#).unwrap_err();
        assert!(matches!(e, StrokeError::SchemaViolation { ref field, .. } if field == "strokes"));
    }

    #[test]
    fn rejects_nan_string_coordinate() {
        let e = parse_drawing_json(
            br#"{"participant":"p01","digit":3,"strokes":[[{"x":"NaN","y":1}]]}"#,
        )
        .unwrap_err();
        assert!(matches!(e, StrokeError::NonFiniteCoordinate { .. }));
    }

    #[test]
    fn malformed_and_missing_fields() {
        assert!(matches!(
            parse_drawing_json(b"{not json").unwrap_err(),
            StrokeError::MalformedJson(_)
        ));
        assert!(matches!(
            parse_drawing_json(br#"{"digit":3,"strokes":[[{"x":1,"y":1}]]}"#).unwrap_err(),
            StrokeError::SchemaViolation { ref field, .. } if field == "participant"
        ));
        assert!(matches!(
            parse_drawing_json(br#"{"participant":"a","strokes":[[{"x":1,"y":1}]]}"#).unwrap_err(),
            StrokeError::SchemaViolation { ref field, .. } if field == "digit"
        ));
    }

    #[test]
    fn clamps_out_of_range_points() {
        let mut d = sample();
        d.strokes[0][0] = StrokePoint::new(300.0, 100.0);
        d.strokes[0][1] = StrokePoint::new(-4.0, 257.0);
        let v = validate_drawing(&d).unwrap();
        assert_eq!((v.strokes[0][0].x, v.strokes[0][0].y), (256.0, 100.0));
        assert_eq!((v.strokes[0][1].x, v.strokes[0][1].y), (0.0, 256.0));
    }

    #[test]
    fn single_point_stroke_is_valid() {
        let mut d = sample();
        d.strokes = vec![vec![StrokePoint::new(128.0, 128.0)]];
        assert_eq!(validate_drawing(&d).unwrap().point_count(), 1);
    }

    #[test]
    fn label_out_of_range() {
        let mut d = sample();
        d.digit = 12;
        assert_eq!(validate_drawing(&d).unwrap_err(), StrokeError::LabelOutOfRange(12));
    }

    #[test]
    fn empty_strokes_dropped_then_empty_rejected() {
        let mut d = sample();
        d.strokes.push(vec![]);
        assert_eq!(validate_drawing(&d).unwrap().strokes.len(), 1);
        d.strokes = vec![vec![], vec![]];
        assert_eq!(validate_drawing(&d).unwrap_err(), StrokeError::EmptyDrawing);
    }

    #[test]
    fn decreasing_timestamps_rejected() {
        let mut d = sample();
        d.strokes[0] = vec![StrokePoint::timed(1.0, 1.0, 10.0), StrokePoint::timed(2.0, 2.0, 5.0)];
        assert!(matches!(validate_drawing(&d), Err(StrokeError::TimestampOrder { stroke: 0 })));
    }

    #[test]
    fn adapter_accepts_pair_arrays_and_aliases() {
        let v: Value = serde_json::from_str(
            r#"{"user_id": 7, "label": "4", "points": [[1, 2, 0], [3, 4, 8]]}"#,
        )
        .unwrap();
        let d = adapt_external(&v).unwrap();
        assert_eq!(d.participant_id, "7");
        assert_eq!(d.digit, 4);
        assert_eq!(d.strokes[0][1], StrokePoint::timed(3.0, 4.0, 8.0));
        let canonical: Value = serde_json::from_str(&sample().to_json()).unwrap();
        assert_eq!(adapt_external(&canonical).unwrap(), sample());
    }
}
