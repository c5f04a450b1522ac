//! Per-participant experiment protocol: splits, class balancing, training
//! with early stopping, threshold calibration, evaluation and sweeps.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::eval::{self, EvalError, EvalReport, Orientation};
use crate::models::{Calibration, ModelError, ModelKind, Network, TrainedModel};
use crate::raster::{rasterize, RasterConfig, RasterError};
use crate::stroke::{DatasetManifest, Drawing};
use crate::tensor::{self, OptimizerConfig, OptimizerState, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("need at least {needed} participants, dataset has {found}")]
    InsufficientParticipants { found: usize, needed: usize },
    #[error("participant `{0}` is not in the dataset")]
    UnknownParticipant(String),
    #[error("{what}: need {needed} samples, only {available} available")]
    InsufficientData { what: String, needed: usize, available: usize },
    #[error("need at least {needed} values to calibrate, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
    #[error("{kind:?} is not a {expected}")]
    WrongModelKind { kind: ModelKind, expected: &'static str },
    #[error("training diverged at epoch {epoch} (non-finite loss)")]
    DivergedTraining { epoch: usize },
    #[error("invalid run config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("worker pool: {0}")]
    Pool(String),
}

/// Ratio of unauthorized participants assigned to train / val / test.
pub const ATTACKER_WEIGHTS: [usize; 3] = [11, 4, 4];

/// One drawing placed in a split, with its class label.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub participant_id: String,
    pub digit: u32,
    pub authorized: bool,
    pub drawing: Arc<Drawing>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Default)]
pub struct Partition {
    pub authorized: Vec<Sample>,
    pub unauthorized: Vec<Sample>,
}

impl Partition {
    pub fn all(&self) -> impl Iterator<Item = &Sample> {
        self.authorized.iter().chain(&self.unauthorized)
    }

    pub fn len(&self) -> usize {
        self.authorized.len() + self.unauthorized.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Attacker identities per partition.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackerAssignment {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct SplitPlan {
    pub authorized_id: String,
    pub seed: u64,
    pub attackers: AttackerAssignment,
    pub train: Partition,
    pub val: Partition,
    pub test: Partition,
}

impl SplitPlan {
    pub fn part(&self, p: Part) -> &Partition {
        match p {
            Part::Train => &self.train,
            Part::Val => &self.val,
            Part::Test => &self.test,
        }
    }

    /// Keeps `size` authorized training drawings and re-balances the
    /// unauthorized training set to the same count. Val and test are untouched.
    pub fn with_train_size(&self, size: usize, seed: u64) -> Result<SplitPlan, HarnessError> {
        if size > self.train.authorized.len() {
            return Err(HarnessError::InsufficientData {
                what: "authorized training drawings".into(),
                needed: size,
                available: self.train.authorized.len(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut plan = self.clone();
        plan.train.authorized.truncate(size);
        plan.train.unauthorized = stratified_sample(
            &group_by_attacker(&self.train.unauthorized, &self.attackers.train),
            size,
            &mut rng,
        )?;
        Ok(plan)
    }
}

/// Splits `n` participants over train / val / test in proportion to
/// [`ATTACKER_WEIGHTS`] using largest remainders, with at least one per bucket.
pub fn allocate_attackers(n: usize) -> Result<[usize; 3], HarnessError> {
    if n < 3 {
        return Err(HarnessError::InsufficientParticipants { found: n + 1, needed: 4 });
    }
    let total: usize = ATTACKER_WEIGHTS.iter().sum();
    let mut counts = ATTACKER_WEIGHTS.map(|w| n * w / total);
    let mut rest = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    // Largest fractional part first; ties keep bucket order.
    order.sort_by_key(|&i| std::cmp::Reverse((n * ATTACKER_WEIGHTS[i]) % total));
    for &i in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        counts[i] += 1;
        rest -= 1;
    }
    while let Some(empty) = counts.iter().position(|&c| c == 0) {
        let donor = (0..3).max_by_key(|&i| (counts[i], std::cmp::Reverse(i))).unwrap();
        counts[donor] -= 1;
        counts[empty] += 1;
    }
    Ok(counts)
}

/// Water-filling allocation of `n` draws over groups of the given sizes:
/// equal shares, capped by group size, leftovers spread in group order.
fn allocate_evenly(sizes: &[usize], n: usize) -> Vec<usize> {
    let mut alloc = vec![0; sizes.len()];
    let mut rest = n;
    loop {
        let open: Vec<usize> = (0..sizes.len()).filter(|&i| alloc[i] < sizes[i]).collect();
        if rest == 0 || open.is_empty() {
            break;
        }
        let share = rest / open.len();
        if share == 0 {
            for &i in open.iter().take(rest) {
                alloc[i] += 1;
            }
            break;
        }
        for &i in &open {
            let add = share.min(sizes[i] - alloc[i]);
            alloc[i] += add;
            rest -= add;
        }
    }
    alloc
}

/// Groups samples as attacker → digit → samples, attackers in the given order.
fn group_by_attacker(samples: &[Sample], order: &[String]) -> Vec<Vec<Vec<Sample>>> {
    order
        .iter()
        .map(|a| {
            let mut by_digit: BTreeMap<u32, Vec<Sample>> = BTreeMap::new();
            for s in samples.iter().filter(|s| &s.participant_id == a) {
                by_digit.entry(s.digit).or_default().push(s.clone());
            }
            by_digit.into_values().collect()
        })
        .collect()
}

/// Draws `n` samples with equal shares per attacker, then per digit.
fn stratified_sample(groups: &[Vec<Vec<Sample>>], n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Sample>, HarnessError> {
    let sizes: Vec<usize> = groups.iter().map(|g| g.iter().map(Vec::len).sum()).collect();
    let available: usize = sizes.iter().sum();
    if available < n {
        return Err(HarnessError::InsufficientData { what: "unauthorized drawings".into(), needed: n, available });
    }
    let mut out = Vec::with_capacity(n);
    for (attacker, quota) in groups.iter().zip(allocate_evenly(&sizes, n)) {
        let digit_sizes: Vec<usize> = attacker.iter().map(Vec::len).collect();
        for (pool, take) in attacker.iter().zip(allocate_evenly(&digit_sizes, quota)) {
            out.extend(pool.choose_multiple(rng, take).cloned());
        }
    }
    out.shuffle(rng);
    Ok(out)
}

fn samples_of(manifest: &DatasetManifest, participant: &str, authorized: bool) -> Vec<Sample> {
    manifest
        .drawings_of(participant)
        .into_iter()
        .map(|r| Sample {
            id: r.id.clone(),
            participant_id: r.drawing.participant_id.clone(),
            digit: r.drawing.digit,
            authorized,
            drawing: Arc::clone(&r.drawing),
        })
        .collect()
}

/// Builds the per-participant split: authorized drawings 60:20:20, other
/// participants assigned whole to train / val / test, and each partition's
/// unauthorized side subsampled to the size of its authorized side.
pub fn make_split(manifest: &DatasetManifest, authorized_id: &str, seed: u64) -> Result<SplitPlan, HarnessError> {
    if !manifest.participants.iter().any(|p| p == authorized_id) {
        return Err(HarnessError::UnknownParticipant(authorized_id.to_string()));
    }
    let mut others: Vec<String> = manifest.participants.iter().filter(|p| *p != authorized_id).cloned().collect();
    let [n_train, n_val, _] = allocate_attackers(others.len())
        .map_err(|_| HarnessError::InsufficientParticipants { found: manifest.participants.len(), needed: 4 })?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut own = samples_of(manifest, authorized_id, true);
    own.shuffle(&mut rng);
    let n = own.len();
    let tr = (n as f64 * 0.6).round() as usize;
    let va = (n as f64 * 0.2).round() as usize;
    let test_auth = own.split_off(tr + va);
    let val_auth = own.split_off(tr);
    let train_auth = own;

    others.shuffle(&mut rng);
    let test_ids = others.split_off(n_train + n_val);
    let val_ids = others.split_off(n_train);
    let train_ids = others;

    let pool = |ids: &[String]| -> Vec<Sample> { ids.iter().flat_map(|p| samples_of(manifest, p, false)).collect() };
    let mut draw = |ids: &[String], count: usize| stratified_sample(&group_by_attacker(&pool(ids), ids), count, &mut rng);
    let train_un = draw(&train_ids, train_auth.len())?;
    let val_un = draw(&val_ids, val_auth.len())?;
    let test_un = draw(&test_ids, test_auth.len())?;

    Ok(SplitPlan {
        authorized_id: authorized_id.to_string(),
        seed,
        attackers: AttackerAssignment { train: train_ids, val: val_ids, test: test_ids },
        train: Partition { authorized: train_auth, unauthorized: train_un },
        val: Partition { authorized: val_auth, unauthorized: val_un },
        test: Partition { authorized: test_auth, unauthorized: test_un },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainRunConfig {
    pub model: ModelKind,
    pub raster: RasterConfig,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Classifiers only: pick the validation threshold minimizing |FAR - FRR|
    /// instead of 0.5.
    pub calibrate_threshold: bool,
    /// Autoencoders: threshold = mean + k·std of validation errors.
    pub threshold_k: f64,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        TrainRunConfig {
            model: ModelKind::ShallowCnn,
            raster: RasterConfig::default(),
            optimizer: OptimizerConfig::default(),
            batch_size: 32,
            max_epochs: 100,
            patience: 5,
            seed: 42,
            calibrate_threshold: false,
            threshold_k: 2.0,
        }
    }
}

impl TrainRunConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::InvalidConfig(m.to_string()));
        if self.patience < 1 {
            return bad("patience must be >= 1");
        }
        if self.max_epochs < 1 {
            return bad("max_epochs must be >= 1");
        }
        if self.batch_size < 1 {
            return bad("batch_size must be >= 1");
        }
        if !(self.optimizer.learning_rate > 0.0) {
            return bad("learning rate must be positive");
        }
        self.raster.validate()?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(serde_json::to_vec(self).unwrap()))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 over every record's id and canonical JSON, in index order.
pub fn dataset_hash(manifest: &DatasetManifest) -> String {
    let mut h = Sha256::new();
    for r in manifest.records() {
        h.update(r.id.as_bytes());
        h.update([0]);
        h.update(r.drawing.to_json().as_bytes());
        h.update([0]);
    }
    hex(&h.finalize())
}

/// Reproducibility record written next to every run's outputs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub seed: u64,
    pub config_hash: String,
    pub dataset_hash: String,
    pub participants: Vec<String>,
    pub tool_version: String,
}

impl RunManifest {
    pub fn new(cfg: &TrainRunConfig, manifest: &DatasetManifest, participants: Vec<String>) -> Self {
        RunManifest {
            seed: cfg.seed,
            config_hash: cfg.hash(),
            dataset_hash: dataset_hash(manifest),
            participants,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Stops after `patience` consecutive epochs without a strictly lower
/// validation loss.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best_loss: f64,
    pub best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping { patience, best_loss: f64::INFINITY, best_epoch: 0, stale: 0 }
    }

    pub fn observe(&mut self, epoch: usize, loss: f64) -> StopDecision {
        if loss < self.best_loss {
            self.best_loss = loss;
            self.best_epoch = epoch;
            self.stale = 0;
            StopDecision::Improved
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                StopDecision::Stop
            } else {
                StopDecision::Continue
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub participant_id: String,
    pub model: TrainedModel,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// Accuracy on the validation partition at the stored threshold.
    pub val_acc: f64,
    /// Test-partition evaluation.
    pub report: EvalReport,
    /// Distinct participants whose drawings entered training batches.
    pub training_participants: BTreeSet<String>,
    pub duration_secs: f64,
}

/// What gets persisted for a run besides the model file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub participant_id: String,
    pub model: ModelKind,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub val_acc: f64,
    pub report: EvalReport,
    pub duration_secs: f64,
}

impl RunResult {
    pub fn summary(&self) -> RunSummary {
        RunSummary {
            participant_id: self.participant_id.clone(),
            model: self.model.kind(),
            history: self.history.clone(),
            best_epoch: self.best_epoch,
            val_acc: self.val_acc,
            report: self.report.clone(),
            duration_secs: self.duration_secs,
        }
    }
}

/// Rasterized partition ready for the network.
struct Prepared {
    inputs: Vec<Tensor>,
    labels: Vec<bool>,
    digits: Vec<u32>,
    participants: Vec<String>,
}

fn prepare<'a>(samples: impl Iterator<Item = &'a Sample>, raster: &RasterConfig) -> Result<Prepared, HarnessError> {
    let samples: Vec<&Sample> = samples.collect();
    let inputs = samples
        .par_iter()
        .map(|s| rasterize(&s.drawing, raster).map(|r| r.to_tensor()))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Prepared {
        inputs,
        labels: samples.iter().map(|s| s.authorized).collect(),
        digits: samples.iter().map(|s| s.digit).collect(),
        participants: samples.iter().map(|s| s.participant_id.clone()).collect(),
    })
}

/// Per-sample loss and its gradient with respect to the network output.
fn sample_loss(kind: ModelKind, output: &Tensor, input: &Tensor, label: bool) -> Result<(f64, Tensor), HarnessError> {
    if kind.is_classifier() {
        let p = output.data()[0];
        let y = if label { 1.0 } else { 0.0 };
        Ok((tensor::bce_loss(p, y), Tensor::scalar(tensor::bce_grad(p, y))))
    } else {
        Ok((tensor::mse_loss(output, input)?, tensor::mse_grad(output, input)?))
    }
}

fn mean_loss(net: &Network, data: &Prepared) -> Result<f64, HarnessError> {
    let mut total = 0.0;
    for (x, &y) in data.inputs.iter().zip(&data.labels) {
        let out = net.forward(x)?;
        total += sample_loss(net.spec.kind, &out, x, y)?.0;
    }
    Ok(total / data.inputs.len().max(1) as f64)
}

pub type Progress<'a> = &'a (dyn Fn(&EpochRecord) + Sync);

struct Fitted {
    network: Network,
    history: Vec<EpochRecord>,
    best_epoch: usize,
    training_participants: BTreeSet<String>,
}

/// Mini-batch training with early stopping; returns the best-validation
/// parameters.
fn fit(train: &Prepared, val: &Prepared, cfg: &TrainRunConfig, progress: Option<Progress>) -> Result<Fitted, HarnessError> {
    let spec = cfg.model.build(cfg.raster.image_size)?;
    let mut net = Network::init(spec, cfg.seed)?;
    let mut opt = OptimizerState::new(cfg.optimizer, &net.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = net.params.iter().map(|p| p.value.clone()).collect::<Vec<_>>();
    let mut history = Vec::new();
    let mut seen = BTreeSet::new();
    let mut order: Vec<usize> = (0..train.inputs.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut train_total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            net.zero_grad();
            for &i in batch {
                let x = &train.inputs[i];
                seen.insert(train.participants[i].clone());
                let cache = net.forward_cached(x)?;
                let (loss, grad) = sample_loss(cfg.model, cache.output(), x, train.labels[i])?;
                train_total += loss;
                net.backward(&cache, &grad)?;
            }
            let scale = 1.0 / batch.len() as f64;
            net.params.iter_mut().for_each(|p| p.scale_grad(scale));
            opt.step(&mut net.params).map_err(|e| match e {
                TensorError::NonFiniteGradient(_) => HarnessError::DivergedTraining { epoch },
                other => other.into(),
            })?;
        }
        let record = EpochRecord {
            epoch,
            train_loss: train_total / train.inputs.len().max(1) as f64,
            val_loss: mean_loss(&net, val)?,
        };
        if !record.train_loss.is_finite() || !record.val_loss.is_finite() {
            return Err(HarnessError::DivergedTraining { epoch });
        }
        history.push(record);
        if let Some(cb) = progress {
            cb(&record);
        }
        match stopper.observe(epoch, record.val_loss) {
            StopDecision::Improved => best = net.params.iter().map(|p| p.value.clone()).collect(),
            StopDecision::Continue => {}
            StopDecision::Stop => break,
        }
    }
    let network = Network::from_parameters(net.spec.clone(), best)?;
    Ok(Fitted { network, history, best_epoch: stopper.best_epoch, training_participants: seen })
}

fn oriented_scores(model: &TrainedModel, data: &Prepared) -> Result<Vec<f64>, HarnessError> {
    data.inputs
        .par_iter()
        .map(|x| {
            let out = model.network.forward(x)?;
            Ok(if model.kind().is_classifier() {
                out.data()[0]
            } else {
                -tensor::mse_loss(&out, x)?
            })
        })
        .collect()
}

fn oriented_threshold(model: &TrainedModel) -> (f64, Orientation) {
    if model.kind().is_classifier() {
        (model.threshold, Orientation::Score)
    } else {
        (-model.threshold, Orientation::NegatedError)
    }
}

fn report_on(model: &TrainedModel, data: &Prepared) -> Result<EvalReport, HarnessError> {
    let scores = oriented_scores(model, data)?;
    let (tau, orientation) = oriented_threshold(model);
    Ok(EvalReport::from_scores(&scores, &data.labels, tau, model.threshold, orientation, Some(&data.digits))?)
}

/// Trains a binary classifier on the balanced training partition.
pub fn train_classifier(split: &SplitPlan, cfg: &TrainRunConfig, progress: Option<Progress>) -> Result<RunResult, HarnessError> {
    if !cfg.model.is_classifier() {
        return Err(HarnessError::WrongModelKind { kind: cfg.model, expected: "classifier" });
    }
    cfg.validate()?;
    let started = Instant::now();
    let train = prepare(split.train.all(), &cfg.raster)?;
    let val = prepare(split.val.all(), &cfg.raster)?;
    let test = prepare(split.test.all(), &cfg.raster)?;
    let fitted = fit(&train, &val, cfg, progress)?;

    let mut model = TrainedModel { network: fitted.network, raster: cfg.raster, threshold: 0.5, calibration: None };
    let val_scores = oriented_scores(&model, &val)?;
    if cfg.calibrate_threshold {
        let curve = eval::tradeoff_curve(&val_scores, &val.labels)?;
        if let Some(p) = eval::eer_point(&curve) {
            model.threshold = p.threshold;
        }
    }
    let val_acc = eval::acc(&eval::confusion(&val_scores, &val.labels, model.threshold)?);
    let report = report_on(&model, &test)?;
    Ok(RunResult {
        participant_id: split.authorized_id.clone(),
        model,
        history: fitted.history,
        best_epoch: fitted.best_epoch,
        val_acc,
        report,
        training_participants: fitted.training_participants,
        duration_secs: started.elapsed().as_secs_f64(),
    })
}

/// `threshold = mean + k·std` with the population standard deviation.
pub fn calibrate_threshold(errors: &[f64], k: f64) -> Result<Calibration, HarnessError> {
    if errors.len() < 2 {
        return Err(HarnessError::InsufficientSamples { needed: 2, got: errors.len() });
    }
    let n = errors.len() as f64;
    let mean = errors.iter().sum::<f64>() / n;
    let var = errors.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    Ok(Calibration { mean, std, k, threshold: mean + k * std })
}

/// Autoencoder threshold at two standard deviations above the mean error.
pub fn calibrate_ae_threshold(errors: &[f64]) -> Result<Calibration, HarnessError> {
    calibrate_threshold(errors, 2.0)
}

/// Trains an autoencoder on authorized training drawings only; the threshold
/// comes from the authorized validation errors.
pub fn train_autoencoder(split: &SplitPlan, cfg: &TrainRunConfig, progress: Option<Progress>) -> Result<RunResult, HarnessError> {
    if !cfg.model.is_autoencoder() {
        return Err(HarnessError::WrongModelKind { kind: cfg.model, expected: "autoencoder" });
    }
    cfg.validate()?;
    let started = Instant::now();
    let train = prepare(split.train.authorized.iter(), &cfg.raster)?;
    let val_auth = prepare(split.val.authorized.iter(), &cfg.raster)?;
    let val = prepare(split.val.all(), &cfg.raster)?;
    let test = prepare(split.test.all(), &cfg.raster)?;
    let fitted = fit(&train, &val_auth, cfg, progress)?;

    let mut model = TrainedModel { network: fitted.network, raster: cfg.raster, threshold: 0.0, calibration: None };
    let errors: Vec<f64> = oriented_scores(&model, &val_auth)?.into_iter().map(|s| -s).collect();
    let cal = calibrate_threshold(&errors, cfg.threshold_k)?;
    model.threshold = cal.threshold;
    model.calibration = Some(cal);

    let val_scores = oriented_scores(&model, &val)?;
    let val_acc = eval::acc(&eval::confusion(&val_scores, &val.labels, -model.threshold)?);
    let report = report_on(&model, &test)?;
    Ok(RunResult {
        participant_id: split.authorized_id.clone(),
        model,
        history: fitted.history,
        best_epoch: fitted.best_epoch,
        val_acc,
        report,
        training_participants: fitted.training_participants,
        duration_secs: started.elapsed().as_secs_f64(),
    })
}

/// Dispatches on the configured model kind.
pub fn train(split: &SplitPlan, cfg: &TrainRunConfig, progress: Option<Progress>) -> Result<RunResult, HarnessError> {
    if cfg.model.is_classifier() {
        train_classifier(split, cfg, progress)
    } else {
        train_autoencoder(split, cfg, progress)
    }
}

/// Split, then train, for one authorized participant.
pub fn run_participant(manifest: &DatasetManifest, participant: &str, cfg: &TrainRunConfig) -> Result<RunResult, HarnessError> {
    let split = make_split(manifest, participant, cfg.seed)?;
    train(&split, cfg, None)
}

fn pool(workers: usize) -> Result<rayon::ThreadPool, HarnessError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| HarnessError::Pool(e.to_string()))
}

/// One independent run per participant, `workers` at a time. Results come
/// back in the order of `participants`.
pub fn run_participants(
    manifest: &DatasetManifest,
    participants: &[String],
    cfg: &TrainRunConfig,
    workers: usize,
) -> Result<Vec<RunResult>, HarnessError> {
    pool(workers)?.install(|| participants.par_iter().map(|p| run_participant(manifest, p, cfg)).collect())
}

/// Test accuracy per digit label for a trained model.
pub fn evaluate_per_digit(model: &TrainedModel, split: &SplitPlan) -> Result<BTreeMap<u32, f64>, HarnessError> {
    let test = prepare(split.test.all(), &model.raster)?;
    let scores = oriented_scores(model, &test)?;
    let (tau, _) = oriented_threshold(model);
    Ok(eval::per_digit_accuracy(&scores, &test.labels, &test.digits, tau)?)
}

/// Evaluates a model on one partition of a split.
pub fn evaluate(model: &TrainedModel, split: &SplitPlan, part: Part) -> Result<EvalReport, HarnessError> {
    let data = prepare(split.part(part).all(), &model.raster)?;
    report_on(model, &data)
}

/// Test accuracy as a function of the authorized training-set size. The
/// test partition is the same for every size.
pub fn data_quantity_sweep(
    manifest: &DatasetManifest,
    authorized_id: &str,
    sizes: &[usize],
    cfg: &TrainRunConfig,
    workers: usize,
) -> Result<BTreeMap<usize, f64>, HarnessError> {
    let split = make_split(manifest, authorized_id, cfg.seed)?;
    let runs: Vec<(usize, f64)> = pool(workers)?.install(|| {
        sizes
            .par_iter()
            .map(|&size| {
                let plan = split.with_train_size(size, cfg.seed ^ size as u64)?;
                Ok((size, train(&plan, cfg, None)?.report.acc))
            })
            .collect::<Result<_, HarnessError>>()
    })?;
    Ok(runs.into_iter().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub image_size: usize,
    pub line_width: u32,
    pub val_acc: f64,
    pub best_val_loss: f64,
    pub test_acc: f64,
}

/// Trains one model per `(image_size, line_width)` and ranks the cells by
/// validation accuracy.
pub fn raster_param_sweep(
    manifest: &DatasetManifest,
    authorized_id: &str,
    grid: &[(usize, u32)],
    cfg: &TrainRunConfig,
    workers: usize,
) -> Result<Vec<SweepCell>, HarnessError> {
    let split = make_split(manifest, authorized_id, cfg.seed)?;
    let mut cells: Vec<SweepCell> = pool(workers)?.install(|| {
        grid.par_iter()
            .map(|&(image_size, line_width)| {
                let mut c = *cfg;
                c.raster = RasterConfig { image_size, line_width, downscale: cfg.raster.downscale };
                let r = train(&split, &c, None)?;
                let best_val_loss = r.history.iter().map(|h| h.val_loss).fold(f64::INFINITY, f64::min);
                Ok(SweepCell { image_size, line_width, val_acc: r.val_acc, best_val_loss, test_acc: r.report.acc })
            })
            .collect::<Result<_, HarnessError>>()
    })?;
    cells.sort_by(|a, b| {
        b.val_acc
            .total_cmp(&a.val_acc)
            .then(a.best_val_loss.total_cmp(&b.best_val_loss))
            .then((a.image_size, a.line_width).cmp(&(b.image_size, b.line_width)))
    });
    Ok(cells)
}

/// Metrics of one participant's model, or their mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub far: f64,
    pub frr: f64,
    pub eer: f64,
    pub acc: f64,
    pub auc: Option<f64>,
}

impl MetricRow {
    pub fn of(r: &EvalReport) -> Self {
        MetricRow { far: r.far, frr: r.frr, eer: r.eer, acc: r.acc, auc: r.auc }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub model: Option<ModelKind>,
    pub rows: Vec<(String, MetricRow)>,
    /// Unweighted mean over participants.
    pub mean: MetricRow,
}

/// Averages the per-participant test metrics.
pub fn aggregate(results: &[RunSummary]) -> AggregateReport {
    let rows: Vec<(String, MetricRow)> =
        results.iter().map(|r| (r.participant_id.clone(), MetricRow::of(&r.report))).collect();
    let n = rows.len().max(1) as f64;
    let mean_of = |f: fn(&MetricRow) -> f64| rows.iter().map(|(_, m)| f(m)).sum::<f64>() / n;
    let aucs: Vec<f64> = rows.iter().filter_map(|(_, m)| m.auc).collect();
    let mean = MetricRow {
        far: mean_of(|m| m.far),
        frr: mean_of(|m| m.frr),
        eer: mean_of(|m| m.eer),
        acc: mean_of(|m| m.acc),
        auc: (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64),
    };
    let kinds: BTreeSet<ModelKind> = results.iter().map(|r| r.model).collect();
    AggregateReport { model: (kinds.len() == 1).then(|| *kinds.iter().next().unwrap()), rows, mean }
}

impl AggregateReport {
    /// Plain-text table: one row per participant and the mean.
    pub fn render(&self) -> String {
        let pct = |v: f64| format!("{:>6.1}%", v * 100.0);
        let auc = |v: Option<f64>| v.map_or("     -".to_string(), |a| format!("{a:>6.3}"));
        let mut s = format!(
            "model: {}\n{:<12} {:>7} {:>7} {:>7} {:>7} {:>6}\n",
            self.model.map_or("mixed", ModelKind::name),
            "participant",
            "FAR",
            "FRR",
            "EER",
            "ACC",
            "AUC"
        );
        for (p, m) in self.rows.iter().map(|(p, m)| (p.as_str(), m)).chain([("mean", &self.mean)]) {
            s.push_str(&format!("{p:<12} {} {} {} {} {}\n", pct(m.far), pct(m.frr), pct(m.eer), pct(m.acc), auc(m.auc)));
        }
        s
    }
}
