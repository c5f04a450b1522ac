//! Biometric metrics: FAR, FRR, EER, ACC, ROC / AUC, FAR-FRR trade-off and
//! compound multi-symbol FAR.
//!
//! Positive class is the authorized user (`label == true`). Scores are
//! oriented "higher = more authorized" and a sample is accepted iff
//! `score >= threshold`; autoencoder errors are negated before they get here
//! (see [`crate::models::TrainedModel::oriented_value`]).
//!
//! Note that FAR here is `FP / (FP + TN)`, the false positive rate of the
//! authorized class. It is not `1 - TPR`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("{scores} scores but {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("no samples")]
    EmptyInput,
    #[error("ROC needs both classes present")]
    SingleClassInput,
    #[error("score {0} is not finite")]
    NonFiniteScore(f64),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn positives(&self) -> usize {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> usize {
        self.fp + self.tn
    }
}

fn check(scores: &[f64], labels: &[bool]) -> Result<(), EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch { scores: scores.len(), labels: labels.len() });
    }
    if scores.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    if let Some(&s) = scores.iter().find(|s| s.is_nan()) {
        return Err(EvalError::NonFiniteScore(s));
    }
    Ok(())
}

/// Tallies predictions `score >= tau` against labels.
pub fn confusion(scores: &[f64], labels: &[bool], tau: f64) -> Result<ConfusionCounts, EvalError> {
    check(scores, labels)?;
    let mut c = ConfusionCounts::default();
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= tau, y) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// False acceptance rate, `FP / (FP + TN)`; 0 without unauthorized samples.
pub fn far(c: &ConfusionCounts) -> f64 {
    ratio(c.fp, c.negatives())
}

/// False rejection rate, `FN / (FN + TP)`; 0 without authorized samples.
pub fn frr(c: &ConfusionCounts) -> f64 {
    ratio(c.fn_, c.positives())
}

pub fn acc(c: &ConfusionCounts) -> f64 {
    ratio(c.tp + c.tn, c.total())
}

/// Equal error rate as the mean of FAR and FRR at the operating threshold.
pub fn eer_paper(far: f64, frr: f64) -> f64 {
    (far + frr) / 2.0
}

/// FAR of `k` independent symbol attempts that must all be accepted.
pub fn compound_far(far: f64, k: u32) -> f64 {
    far.powi(k as i32)
}

/// Serializes `±inf` thresholds as the strings `"inf"` / `"-inf"`.
mod thresholds_serde {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        v.iter()
            .map(|&x| {
                if x == f64::INFINITY {
                    Repr::Text("inf".into())
                } else if x == f64::NEG_INFINITY {
                    Repr::Text("-inf".into())
                } else {
                    Repr::Num(x)
                }
            })
            .collect::<Vec<_>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Vec::<Repr>::deserialize(d)?
            .into_iter()
            .map(|r| match r {
                Repr::Num(x) => Ok(x),
                Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
                Repr::Text(t) if t == "-inf" => Ok(f64::NEG_INFINITY),
                Repr::Text(t) => Err(serde::de::Error::custom(format!("bad threshold `{t}`"))),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// `(false positive rate, true positive rate)` pairs.
    pub points: Vec<(f64, f64)>,
    #[serde(with = "thresholds_serde")]
    pub thresholds: Vec<f64>,
}

/// ROC over every distinct score, bracketed by `+inf` (nothing accepted)
/// and `-inf` (everything accepted). Equal scores form one step.
pub fn roc(scores: &[f64], labels: &[bool]) -> Result<RocCurve, EvalError> {
    check(scores, labels)?;
    let pos = labels.iter().filter(|&&y| y).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(EvalError::SingleClassInput);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![(0.0, 0.0)];
    let mut thresholds = vec![f64::INFINITY];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
        thresholds.push(s);
    }
    points.push((1.0, 1.0));
    thresholds.push(f64::NEG_INFINITY);
    Ok(RocCurve { points, thresholds })
}

/// Trapezoidal area under the curve.
pub fn auc(r: &RocCurve) -> f64 {
    r.points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

/// FAR and FRR at every distinct score, plus one threshold just below the
/// minimum (everything accepted) and one just above the maximum (nothing
/// accepted), ordered by increasing threshold.
pub fn tradeoff_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<TradeoffPoint>, EvalError> {
    check(scores, labels)?;
    if let Some(&s) = scores.iter().find(|s| s.is_infinite()) {
        return Err(EvalError::NonFiniteScore(s));
    }
    let pos = labels.iter().filter(|&&y| y).count();
    let neg = labels.len() - pos;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let lowest = scores[order[0]];
    let highest = scores[*order.last().unwrap()];
    let mut out = vec![TradeoffPoint { threshold: lowest.next_down(), far: ratio(neg, neg), frr: 0.0 }];
    // Below threshold s lie the samples already passed; they are rejected.
    let (mut rejected_pos, mut rejected_neg) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        out.push(TradeoffPoint {
            threshold: s,
            far: ratio(neg - rejected_neg, neg),
            frr: ratio(rejected_pos, pos),
        });
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                rejected_pos += 1;
            } else {
                rejected_neg += 1;
            }
            i += 1;
        }
    }
    out.push(TradeoffPoint { threshold: highest.next_up(), far: 0.0, frr: ratio(pos, pos) });
    Ok(out)
}

/// The trade-off point minimizing `|FAR - FRR|` (lowest threshold on ties).
pub fn eer_point(curve: &[TradeoffPoint]) -> Option<TradeoffPoint> {
    curve
        .iter()
        .copied()
        .min_by(|a, b| (a.far - a.frr).abs().total_cmp(&(b.far - b.frr).abs()))
}

/// Crossing-point EER: FAR at the threshold minimizing `|FAR - FRR|`.
pub fn eer_roc(curve: &[TradeoffPoint]) -> Option<f64> {
    eer_point(curve).map(|p| p.far)
}

/// How the values in a report relate to the underlying model output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    /// Classifier probability, accept iff `score >= threshold`.
    Score,
    /// Negated reconstruction error, accept iff `error <= threshold`.
    NegatedError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub far: f64,
    pub frr: f64,
    /// `(far + frr) / 2`.
    pub eer: f64,
    /// Crossing-point EER from the trade-off curve.
    pub eer_roc: Option<f64>,
    pub acc: f64,
    /// `None` when only one class was present.
    pub auc: Option<f64>,
    pub counts: ConfusionCounts,
    /// Operating threshold in the model's own units.
    pub threshold: f64,
    pub orientation: Orientation,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_digit: BTreeMap<u32, f64>,
    pub roc: Option<RocCurve>,
    pub tradeoff: Vec<TradeoffPoint>,
    /// Oriented scores and labels the curves were computed from.
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
    /// Set when FAR (no unauthorized) or FRR (no authorized) fell back to 0.
    pub missing_negatives: bool,
    pub missing_positives: bool,
}

impl EvalReport {
    /// Builds the full report from oriented scores. `oriented_threshold` is in
    /// the same orientation as the scores; `threshold` is what gets recorded.
    pub fn from_scores(
        scores: &[f64],
        labels: &[bool],
        oriented_threshold: f64,
        threshold: f64,
        orientation: Orientation,
        digits: Option<&[u32]>,
    ) -> Result<EvalReport, EvalError> {
        let counts = confusion(scores, labels, oriented_threshold)?;
        let (far, frr) = (far(&counts), frr(&counts));
        let roc = match roc(scores, labels) {
            Ok(r) => Some(r),
            Err(EvalError::SingleClassInput) => None,
            Err(e) => return Err(e),
        };
        let tradeoff = tradeoff_curve(scores, labels)?;
        let per_digit = match digits {
            Some(d) => per_digit_accuracy(scores, labels, d, oriented_threshold)?,
            None => BTreeMap::new(),
        };
        Ok(EvalReport {
            far,
            frr,
            eer: eer_paper(far, frr),
            eer_roc: eer_roc(&tradeoff),
            acc: acc(&counts),
            auc: roc.as_ref().map(auc),
            counts,
            threshold,
            orientation,
            per_digit,
            roc,
            tradeoff,
            scores: scores.to_vec(),
            labels: labels.to_vec(),
            missing_negatives: counts.negatives() == 0,
            missing_positives: counts.positives() == 0,
        })
    }
}

/// Accuracy within each digit label; digits with no samples are omitted.
pub fn per_digit_accuracy(
    scores: &[f64],
    labels: &[bool],
    digits: &[u32],
    tau: f64,
) -> Result<BTreeMap<u32, f64>, EvalError> {
    check(scores, labels)?;
    if digits.len() != scores.len() {
        return Err(EvalError::LengthMismatch { scores: scores.len(), labels: digits.len() });
    }
    let mut tally: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for ((&s, &y), &d) in scores.iter().zip(labels).zip(digits) {
        let e = tally.entry(d).or_default();
        e.0 += ((s >= tau) == y) as usize;
        e.1 += 1;
    }
    Ok(tally.into_iter().map(|(d, (ok, n))| (d, ok as f64 / n as f64)).collect())
}
