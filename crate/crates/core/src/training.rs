//! Training loop, evaluation, checkpoints and the ablation switchboard.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detector::{bias_statistic, DetectorState, Prediction, DEFAULT_COVERAGE};
use crate::error::{Error, Result};
use crate::losses::{evaluate_batch, LossBreakdown, LossConfig, Objective};
use crate::metrics::{auc, MetricsReport};
use crate::model::{ForgeryNet, ForwardMode, ModelConfig, Params};
use crate::synth::{augment, stream, Family, SyntheticSample};
use crate::tensor::FeatureMap;

/// One configuration of the component ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    NoAe,
    AeNoBias,
    Ae,
    AeLsa,
    AeLsaRl,
    AeLsaBe,
    AeLsaCd,
    Full,
}

impl Arm {
    pub const ALL: [Arm; 8] = [
        Arm::NoAe,
        Arm::AeNoBias,
        Arm::Ae,
        Arm::AeLsa,
        Arm::AeLsaRl,
        Arm::AeLsaBe,
        Arm::AeLsaCd,
        Arm::Full,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Arm::NoAe => "no_ae",
            Arm::AeNoBias => "ae_no_bias",
            Arm::Ae => "ae",
            Arm::AeLsa => "ae_lsa",
            Arm::AeLsaRl => "ae_lsa_rl",
            Arm::AeLsaBe => "ae_lsa_be",
            Arm::AeLsaCd => "ae_lsa_cd",
            Arm::Full => "full",
        }
    }

    pub fn mode(self) -> ForwardMode {
        match self {
            Arm::NoAe => ForwardMode::Input,
            Arm::AeNoBias => ForwardMode::Reconstruction,
            Arm::Ae => ForwardMode::Bias,
            _ => ForwardMode::AttendedBias,
        }
    }

    pub fn objective(self) -> Objective {
        match self {
            Arm::AeLsaRl => Objective::REAL_RECONSTRUCTION,
            Arm::AeLsaBe | Arm::Full => Objective::BIAS_EXPANSION,
            _ => Objective::CROSS_ENTROPY,
        }
    }

    pub fn uses_detector(self) -> bool {
        matches!(self, Arm::AeLsaCd | Arm::Full)
    }

    /// Enabled components out of `{ae, bias, lsa, rl, be, cd}`.
    pub fn components(self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self != Arm::NoAe {
            out.push("ae");
        }
        if !matches!(self, Arm::NoAe | Arm::AeNoBias) {
            out.push("bias");
        }
        if self.mode() == ForwardMode::AttendedBias {
            out.push("lsa");
        }
        let obj = self.objective();
        if obj == Objective::REAL_RECONSTRUCTION {
            out.push("rl");
        }
        if obj == Objective::BIAS_EXPANSION {
            out.push("be");
        }
        if self.uses_detector() {
            out.push("cd");
        }
        out
    }

    /// Arms that share this key train identically and differ only at prediction time.
    fn training_key(self) -> (ForwardMode, Objective) {
        (self.mode(), self.objective())
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arm::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown arm '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub arm: Arm,
    pub seed: u64,
    pub augment: bool,
    pub loss: LossConfig,
    pub coverage: f64,
    /// Calibrate the detector on real training samples only.
    pub calibrate_real_only: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            lr: 2e-4,
            weight_decay: 1e-5,
            epochs: 30,
            arm: Arm::Full,
            seed: 0,
            augment: true,
            loss: LossConfig::default(),
            coverage: DEFAULT_COVERAGE,
            calibrate_real_only: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("train.lr must be non-negative, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "train.weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if !(self.coverage > 0.0 && self.coverage <= 1.0) {
            return Err(Error::Config(format!(
                "detector.coverage must lie in (0, 1], got {}",
                self.coverage
            )));
        }
        self.loss.validate()
    }
}

/// Adam with L2-coupled weight decay (the decay term is added to the gradient).
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut Params, grads: &[f64], lr: f64, weight_decay: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, &g), m), v) in params.0.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let g = g + weight_decay * *p;
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 0 is the untrained model; training epochs count from 1.
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub val_auc: Option<f64>,
    pub val_acc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: Params,
    pub detector: DetectorState,
    pub best_epoch: usize,
    pub history: Vec<EpochLog>,
}

fn mean_breakdown(items: &[LossBreakdown]) -> LossBreakdown {
    let n = items.len().max(1) as f64;
    let sum = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
    LossBreakdown {
        l1: sum(|b| b.l1),
        l2: sum(|b| b.l2),
        l3: sum(|b| b.l3),
        l_be: sum(|b| b.l_be),
        l_c: sum(|b| b.l_c),
        total: sum(|b| b.total),
    }
}

const SHUFFLE_TAG: u64 = 0x5155;
const AUGMENT_TAG: u64 = 0xA06;

/// Loss and (optionally) accumulated gradients for one mini-batch.
fn batch_step(
    net: &ForgeryNet,
    params: &Params,
    cfg: &TrainConfig,
    images: &[FeatureMap],
    labels: &[u8],
    grads: Option<&mut [f64]>,
) -> Result<LossBreakdown> {
    let mode = cfg.arm.mode();
    let bundle = net.forward(params, images, mode)?;
    let biases: Vec<&[f64]> = bundle.samples.iter().map(|s| s.bias.data.as_slice()).collect();
    let probs = bundle.probs();
    let loss = evaluate_batch(&cfg.loss, cfg.arm.objective(), &biases, &probs, labels)?;
    if let Some(grads) = grads {
        for (i, trace) in bundle.samples.iter().enumerate() {
            let gb = loss.grad_bias.as_ref().map(|g| FeatureMap {
                channels: trace.bias.channels,
                height: trace.bias.height,
                width: trace.bias.width,
                data: g[i].clone(),
            });
            net.backward(params, trace, mode, gb.as_ref(), loss.grad_prob[i], grads);
        }
    }
    Ok(loss.breakdown)
}

/// Total-loss gradient of a labelled batch, for external checks.
pub fn loss_and_gradient(
    net: &ForgeryNet,
    params: &Params,
    cfg: &TrainConfig,
    images: &[FeatureMap],
    labels: &[u8],
) -> Result<(LossBreakdown, Vec<f64>)> {
    let mut grads = vec![0.0; net.num_params()];
    let b = batch_step(net, params, cfg, images, labels, Some(&mut grads))?;
    Ok((b, grads))
}

pub fn loss_value(
    net: &ForgeryNet,
    params: &Params,
    cfg: &TrainConfig,
    images: &[FeatureMap],
    labels: &[u8],
) -> Result<LossBreakdown> {
    batch_step(net, params, cfg, images, labels, None)
}

fn probabilities(net: &ForgeryNet, params: &Params, mode: ForwardMode, samples: &[SyntheticSample]) -> Result<Vec<f64>> {
    samples
        .chunks(32)
        .map(|chunk| {
            let images: Vec<FeatureMap> = chunk.iter().map(|s| s.image.clone()).collect();
            net.forward(params, &images, mode).map(|b| b.probs())
        })
        .collect::<Result<Vec<_>>>()
        .map(|v| v.concat())
}

/// Mean absolute bias of each sample under the trained model.
pub fn bias_statistics(net: &ForgeryNet, params: &Params, samples: &[SyntheticSample]) -> Result<Vec<f64>> {
    let images: Vec<FeatureMap> = samples.iter().map(|s| s.image.clone()).collect();
    let out = net.reconstruct(params, &images)?;
    images
        .iter()
        .zip(out)
        .map(|(x, (xo, _))| crate::model::compute_bias(x, &xo).map(|b| bias_statistic(&b)))
        .collect()
}

fn validation(net: &ForgeryNet, params: &Params, mode: ForwardMode, val: &[SyntheticSample]) -> Result<(Option<f64>, Option<f64>)> {
    if val.is_empty() {
        return Ok((None, None));
    }
    let probs = probabilities(net, params, mode, val)?;
    let labels: Vec<u8> = val.iter().map(|s| s.label).collect();
    let acc = labels
        .iter()
        .zip(&probs)
        .filter(|(&l, &p)| l == u8::from(p > 0.5))
        .count() as f64
        / labels.len() as f64;
    Ok((auc(&labels, &probs).ok(), Some(acc)))
}

/// Trains `net` from its seeded initialisation.
///
/// Keeps the parameters with the best validation AUC (the last epoch when
/// validation is unavailable) and calibrates the detector for arms that use it.
pub fn train(
    net: &ForgeryNet,
    cfg: &TrainConfig,
    train_set: &[SyntheticSample],
    val_set: &[SyntheticSample],
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if !(train_set.iter().any(|s| s.label == 0) && train_set.iter().any(|s| s.label == 1)) {
        return Err(Error::InvalidInput("training split must contain both classes".into()));
    }
    let mode = cfg.arm.mode();
    let mut params = net.init_params();
    let mut adam = Adam::new(params.len());
    let mut history = Vec::with_capacity(cfg.epochs + 1);

    let initial: Vec<LossBreakdown> = train_set
        .chunks(cfg.batch_size)
        .map(|chunk| {
            let images: Vec<FeatureMap> = chunk.iter().map(|s| s.image.clone()).collect();
            let labels: Vec<u8> = chunk.iter().map(|s| s.label).collect();
            loss_value(net, &params, cfg, &images, &labels)
        })
        .collect::<Result<_>>()?;
    let (val_auc, val_acc) = validation(net, &params, mode, val_set)?;
    let log = EpochLog {
        epoch: 0,
        loss: mean_breakdown(&initial),
        val_auc,
        val_acc,
    };
    on_epoch(&log);
    history.push(log);

    let mut best = (params.clone(), 0usize, val_auc);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut grads = vec![0.0; params.len()];
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut stream(cfg.seed, &[SHUFFLE_TAG, epoch as u64]));
        let mut losses = Vec::with_capacity(order.len().div_ceil(cfg.batch_size));
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let images: Vec<FeatureMap> = chunk
                .iter()
                .map(|&i| {
                    let img = &train_set[i].image;
                    if cfg.augment {
                        augment(img, &mut stream(cfg.seed, &[AUGMENT_TAG, epoch as u64, i as u64]))
                    } else {
                        img.clone()
                    }
                })
                .collect();
            let labels: Vec<u8> = chunk.iter().map(|&i| train_set[i].label).collect();
            grads.fill(0.0);
            let breakdown = batch_step(net, &params, cfg, &images, &labels, Some(&mut grads))
                .map_err(|e| match e {
                    Error::Numerical(detail) => Error::Divergence { epoch, batch: b, detail },
                    other => other,
                })?;
            if !breakdown.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    batch: b,
                    detail: format!("non-finite loss or gradient, losses {breakdown:?}"),
                });
            }
            adam.step(&mut params, &grads, cfg.lr, cfg.weight_decay);
            losses.push(breakdown);
        }
        let (val_auc, val_acc) = validation(net, &params, mode, val_set)?;
        let log = EpochLog {
            epoch,
            loss: mean_breakdown(&losses),
            val_auc,
            val_acc,
        };
        log::info!(
            "{} epoch {epoch}: total {:.5} (l_c {:.4}, l1 {:.4}, l2 {:.4}, l3 {:.4}) val auc {:?}",
            cfg.arm,
            log.loss.total,
            log.loss.l_c,
            log.loss.l1,
            log.loss.l2,
            log.loss.l3,
            log.val_auc
        );
        on_epoch(&log);
        history.push(log);
        let improved = match (val_auc, best.2) {
            (Some(v), Some(b)) => v > b,
            (Some(_), None) => true,
            (None, _) => true,
        };
        if improved {
            best = (params.clone(), epoch, val_auc);
        }
    }

    let (params, best_epoch, _) = best;
    let detector = if cfg.arm.uses_detector() {
        calibrate_detector(net, &params, cfg, train_set)?
    } else {
        DetectorState::uncalibrated(cfg.coverage)
    };
    Ok(TrainOutcome {
        params,
        detector,
        best_epoch,
        history,
    })
}

/// One full pass over the (unaugmented) training set.
pub fn calibrate_detector(
    net: &ForgeryNet,
    params: &Params,
    cfg: &TrainConfig,
    train_set: &[SyntheticSample],
) -> Result<DetectorState> {
    let population: Vec<SyntheticSample> = train_set
        .iter()
        .filter(|s| !cfg.calibrate_real_only || s.label == 0)
        .cloned()
        .collect();
    let stats = bias_statistics(net, params, &population)?;
    DetectorState::calibrate(&stats, cfg.coverage)
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub predictions: Vec<Prediction>,
}

/// Scores `samples` with the arm's prediction rule: detector-corrected for
/// arms with the open-set detector, classifier-only otherwise.
pub fn evaluate(
    net: &ForgeryNet,
    params: &Params,
    arm: Arm,
    detector: &DetectorState,
    samples: &[SyntheticSample],
) -> Result<Evaluation> {
    let rule = if arm.uses_detector() {
        detector.clone()
    } else {
        DetectorState::disabled()
    };
    rule.threshold()?;
    let mut predictions = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(32) {
        let images: Vec<FeatureMap> = chunk.iter().map(|s| s.image.clone()).collect();
        predictions.extend(rule.predict(net, params, arm.mode(), &images)?);
    }
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    let hard: Vec<u8> = predictions.iter().map(|p| p.label).collect();
    let scores: Vec<f64> = predictions.iter().map(|p| p.score).collect();
    let routes: Vec<&str> = predictions.iter().map(|p| p.route.as_str()).collect();
    let report = MetricsReport::compute(&labels, &hard, &scores, &routes, rule.tau)?;
    Ok(Evaluation { report, predictions })
}

/// Reals plus the fakes of one family.
pub fn family_subset(samples: &[SyntheticSample], family: Family) -> Vec<SyntheticSample> {
    samples
        .iter()
        .filter(|s| s.family.is_none() || s.family == Some(family))
        .cloned()
        .collect()
}

// ---------------------------------------------------------------------------
// checkpoints

const PARAMS_MAGIC: &[u8; 8] = b"FGNPRM01";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub arm: Arm,
    pub seed: u64,
    pub epoch: usize,
    pub tau: Option<f64>,
    pub coverage: f64,
    pub statistic: String,
    pub calibration_size: usize,
    pub n_params: usize,
    pub params_sha256: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub metrics: Vec<EpochLog>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub params: Params,
    pub detector: DetectorState,
    pub epoch: usize,
    pub history: Vec<EpochLog>,
}

pub fn config_hash(model: &ModelConfig, train: &TrainConfig) -> String {
    let text = serde_json::to_string(&(model, train)).expect("configs serialize");
    hex::encode(&Sha256::digest(text.as_bytes())[..8])
}

fn encode_params(params: &Params) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * params.len());
    out.extend_from_slice(PARAMS_MAGIC);
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for v in &params.0 {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn decode_params(bytes: &[u8], path: &Path) -> Result<Params> {
    if bytes.len() < 16 || &bytes[..8] != PARAMS_MAGIC {
        return Err(Error::corrupt(path, "not a parameter blob"));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() != 16 + 8 * n {
        return Err(Error::corrupt(
            path,
            format!("header declares {n} values but blob holds {} bytes", bytes.len()),
        ));
    }
    Ok(Params(
        bytes[16..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    ))
}

impl Checkpoint {
    pub fn from_outcome(model: ModelConfig, train: TrainConfig, outcome: TrainOutcome) -> Self {
        Self {
            model,
            train,
            params: outcome.params,
            detector: outcome.detector,
            epoch: outcome.best_epoch,
            history: outcome.history,
        }
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            config_hash: config_hash(&self.model, &self.train),
            arm: self.train.arm,
            seed: self.train.seed,
            epoch: self.epoch,
            tau: self.detector.tau,
            coverage: self.detector.coverage,
            statistic: self.detector.statistic.clone(),
            calibration_size: self.detector.calibration_size,
            n_params: self.params.len(),
            params_sha256: hex::encode(Sha256::digest(encode_params(&self.params))),
            model: self.model.clone(),
            train: self.train.clone(),
            metrics: self.history.clone(),
        }
    }

    /// Writes `params.bin` and `manifest.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let blob = dir.join("params.bin");
        fs::write(&blob, encode_params(&self.params)).map_err(|e| Error::io(&blob, e))?;
        let manifest = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&self.manifest()).expect("manifest serializes");
        fs::write(&manifest, text + "\n").map_err(|e| Error::io(&manifest, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.json");
        let text = fs::read_to_string(&manifest_path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::corrupt(&manifest_path, "missing manifest")
            } else {
                Error::io(&manifest_path, e)
            }
        })?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::corrupt(&manifest_path, e.to_string()))?;
        let blob_path = dir.join("params.bin");
        let bytes = fs::read(&blob_path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::corrupt(&blob_path, "missing parameter blob")
            } else {
                Error::io(&blob_path, e)
            }
        })?;
        if hex::encode(Sha256::digest(&bytes)) != manifest.params_sha256 {
            return Err(Error::corrupt(&blob_path, "checksum does not match manifest"));
        }
        let params = decode_params(&bytes, &blob_path)?;
        let net = ForgeryNet::new(manifest.model.clone()).map_err(|e| Error::corrupt(&manifest_path, e.to_string()))?;
        if net.num_params() != params.len() || manifest.n_params != params.len() {
            return Err(Error::corrupt(&blob_path, "parameter count does not match model config"));
        }
        Ok(Self {
            model: manifest.model,
            train: manifest.train,
            params,
            detector: DetectorState {
                tau: manifest.tau,
                statistic: manifest.statistic,
                coverage: manifest.coverage,
                calibration_size: manifest.calibration_size,
            },
            epoch: manifest.epoch,
            history: manifest.metrics,
        })
    }
}

// ---------------------------------------------------------------------------
// ablation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub arm: Arm,
    pub seed: u64,
    pub intra_auc: Option<f64>,
    pub cross_auc: Option<f64>,
    pub family_auc: BTreeMap<String, f64>,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub arms: Vec<Arm>,
    pub seeds: Vec<u64>,
    pub train_families: Vec<Family>,
    pub cells: Vec<AblationCell>,
}

/// Seeds needed for a "two out of three" style majority.
pub fn seeds_required(n_seeds: usize) -> usize {
    (2 * n_seeds).div_ceil(3)
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl AblationTable {
    pub fn cell(&self, arm: Arm, seed: u64) -> Option<&AblationCell> {
        self.cells.iter().find(|c| c.arm == arm && c.seed == seed)
    }

    pub fn cross(&self, arm: Arm, seed: u64) -> Option<f64> {
        self.cell(arm, seed).and_then(|c| c.cross_auc)
    }

    /// Rows are arms; columns are intra/cross AUC per seed followed by the means.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("arm");
        for s in &self.seeds {
            out.push_str(&format!(",intra_auc_seed{s},cross_auc_seed{s}"));
        }
        out.push_str(",intra_auc_mean,cross_auc_mean\n");
        let fmt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
        for &arm in &self.arms {
            out.push_str(arm.as_str());
            let (mut intra, mut cross) = (Vec::new(), Vec::new());
            for &s in &self.seeds {
                let c = self.cell(arm, s);
                let (i, x) = (c.and_then(|c| c.intra_auc), c.and_then(|c| c.cross_auc));
                intra.extend(i);
                cross.extend(x);
                out.push_str(&format!(",{},{}", fmt(i), fmt(x)));
            }
            out.push_str(&format!(",{},{}\n", fmt(mean(&intra)), fmt(mean(&cross))));
        }
        out
    }

    /// Per-seed check of `full ≥ ae_lsa_be ≥ ae_lsa_rl ≥ ae_lsa` on cross-family
    /// AUC with `full - ae_lsa ≥ gap`; `None` when an arm is missing.
    pub fn ordering_holds(&self, seed: u64, gap: f64) -> Option<bool> {
        let f = self.cross(Arm::Full, seed)?;
        let be = self.cross(Arm::AeLsaBe, seed)?;
        let rl = self.cross(Arm::AeLsaRl, seed)?;
        let base = self.cross(Arm::AeLsa, seed)?;
        Some(f >= be && be >= rl && rl >= base && f - base >= gap)
    }

    pub fn summary(&self) -> serde_json::Value {
        use serde_json::json;
        let pair = |hi: Arm, lo: Arm| -> Option<bool> {
            let mut passing = 0;
            for &s in &self.seeds {
                if self.cross(hi, s)? >= self.cross(lo, s)? {
                    passing += 1;
                }
            }
            Some(passing >= seeds_required(self.seeds.len()))
        };
        let mut gap_passing = 0;
        let mut chain_passing = 0;
        let mut complete = true;
        for &s in &self.seeds {
            match (self.cross(Arm::Full, s), self.cross(Arm::AeLsa, s)) {
                (Some(f), Some(b)) if f - b >= 0.03 => gap_passing += 1,
                (Some(_), Some(_)) => {}
                _ => complete = false,
            }
            if self.ordering_holds(s, 0.03) == Some(true) {
                chain_passing += 1;
            }
        }
        let need = seeds_required(self.seeds.len());
        let mean_cross: BTreeMap<&str, Option<f64>> = self
            .arms
            .iter()
            .map(|&a| {
                let v: Vec<f64> = self.seeds.iter().filter_map(|&s| self.cross(a, s)).collect();
                (a.as_str(), mean(&v))
            })
            .collect();
        json!({
            "seeds": self.seeds,
            "seeds_required": need,
            "train_families": self.train_families.iter().map(|f| f.as_str()).collect::<Vec<_>>(),
            "mean_cross_auc": mean_cross,
            "orderings": {
                "full_ge_ae_lsa_be": pair(Arm::Full, Arm::AeLsaBe),
                "ae_lsa_be_ge_ae_lsa_rl": pair(Arm::AeLsaBe, Arm::AeLsaRl),
                "ae_lsa_rl_ge_ae_lsa": pair(Arm::AeLsaRl, Arm::AeLsa),
                "full_minus_ae_lsa_ge_0_03": complete.then_some(gap_passing >= need),
                "chain_with_gap": complete.then_some(chain_passing >= need),
            },
            "chain_seeds_passing": chain_passing,
        })
    }
}

/// Trains every `(arm, seed)` and scores intra-family (families seen in
/// training) and cross-family (the rest) AUC on `test`.
///
/// Arms that only differ by the detector share one training run.
pub fn run_ablation_matrix(
    model: &ModelConfig,
    base: &TrainConfig,
    train_set: &[SyntheticSample],
    val_set: &[SyntheticSample],
    test_set: &[SyntheticSample],
    arms: &[Arm],
    seeds: &[u64],
) -> Result<AblationTable> {
    if arms.is_empty() {
        return Err(Error::Config("ablation needs at least one arm".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let train_families: Vec<Family> = Family::ALL
        .into_iter()
        .filter(|f| train_set.iter().any(|s| s.family == Some(*f)))
        .collect();
    let test_families: Vec<Family> = Family::ALL
        .into_iter()
        .filter(|f| test_set.iter().any(|s| s.family == Some(*f)))
        .collect();
    let mut cells = Vec::new();
    for &seed in seeds {
        let mut trained: BTreeMap<(u8, bool, bool, bool), (TrainOutcome, ForgeryNet)> = BTreeMap::new();
        for &arm in arms {
            let mcfg = ModelConfig {
                seed,
                ..model.clone()
            };
            let tcfg = TrainConfig {
                arm,
                seed,
                ..base.clone()
            };
            let (mode, obj) = arm.training_key();
            let key = (mode as u8, obj.l1, obj.l2, obj.l3);
            if let std::collections::btree_map::Entry::Vacant(slot) = trained.entry(key) {
                let net = ForgeryNet::new(mcfg)?;
                log::info!("ablation: training {arm} with seed {seed}");
                let outcome = train(&net, &tcfg, train_set, val_set, |_| {})?;
                slot.insert((outcome, net));
            }
            let (outcome, net) = &trained[&key];
            let detector = if arm.uses_detector() {
                calibrate_detector(net, &outcome.params, &tcfg, train_set)?
            } else {
                DetectorState::disabled()
            };
            let mut family_auc = BTreeMap::new();
            let (mut intra, mut cross) = (Vec::new(), Vec::new());
            for &f in &test_families {
                let subset = family_subset(test_set, f);
                let eval = evaluate(net, &outcome.params, arm, &detector, &subset)?;
                family_auc.insert(f.as_str().to_string(), eval.report.auc);
                if train_families.contains(&f) {
                    intra.push(eval.report.auc);
                } else {
                    cross.push(eval.report.auc);
                }
            }
            cells.push(AblationCell {
                arm,
                seed,
                intra_auc: mean(&intra),
                cross_auc: mean(&cross),
                family_auc,
                best_epoch: outcome.best_epoch,
            });
        }
    }
    Ok(AblationTable {
        arms: arms.to_vec(),
        seeds: seeds.to_vec(),
        train_families,
        cells,
    })
}
