//! Training with decoder consistency, early stopping, checkpoints and the
//! with/without-consistency ablation.
//!
//! Each step runs the shared encoder once, computes the main prediction and
//! (when consistency is enabled) the auxiliary prediction from the same
//! features, and minimizes `L_s + α · L_c` with Adam. Validation runs the
//! main branch in evaluation mode and scores the supervised loss only.
//!
//! A run directory contains `train_log.jsonl` (one record per step and per
//! epoch), `history.json`, and `checkpoints/{best,last}/` with
//! `model.safetensors` plus a `manifest.json`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::data::{self, augment, sample_rng, to_batch, AugmentationConfig, Pair, SplitSpec};
use crate::decoders::{ForwardMode, NetworkConfig, ParameterBreakdown, PlutoNet};
use crate::error::{Error, Result};
use crate::losses::{combine, consistency_loss, supervised_loss, total_loss, LossConfig};
use crate::metrics::{evaluate, EvalConfig, MetricsReport};

/// Smallest decrease of the validation loss that counts as an improvement.
pub const MIN_IMPROVEMENT: f64 = 1e-8;
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub early_stopping: bool,
    pub early_stop_patience: usize,
    pub consistency_enabled: bool,
    /// Add `α · L_c` to the validation loss (needs an extra auxiliary pass).
    pub validation_includes_consistency: bool,
    /// Seeds initialization, batch order and augmentation.
    pub seed: u64,
    pub shuffle: bool,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<usize>,
    /// Omit wall-clock times so repeated runs write identical files.
    pub deterministic: bool,
    /// Defaults to `<output_dir>/checkpoints`.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            max_epochs: 30,
            batch_size: 8,
            early_stopping: true,
            early_stop_patience: 5,
            consistency_enabled: true,
            validation_includes_consistency: false,
            seed: 0,
            shuffle: true,
            max_steps: None,
            deterministic: true,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return err(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if self.max_epochs == 0 {
            return err("max_epochs must be at least 1".into());
        }
        if self.early_stop_patience == 0 {
            return err("early_stop_patience must be at least 1".into());
        }
        if self.batch_size == 0 {
            return err("batch_size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return err(format!("Adam betas must lie in [0, 1), got {} and {}", self.beta1, self.beta2));
        }
        if !(self.adam_eps > 0.0) {
            return err(format!("adam_eps must be > 0, got {}", self.adam_eps));
        }
        if self.max_steps == Some(0) {
            return err("max_steps must be at least 1 when set".into());
        }
        Ok(())
    }

    pub fn adam(&self) -> ParamsAdamW {
        ParamsAdamW {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStopping,
    MaxEpochs,
    MaxSteps,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub train_l_s: f64,
    /// `None` when consistency training is disabled.
    pub train_l_c: Option<f64>,
    pub train_total: f64,
    pub val_total: f64,
    pub val_dice: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wall_time_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stop_reason: StopReason,
    pub total_steps: usize,
}

impl TrainHistory {
    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch - 1]
    }

    pub fn val_totals(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.val_total).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub l_s: f64,
    pub l_c: Option<f64>,
    pub total: f64,
}

/// Index (0-based) of the best validation loss under the strict-improvement rule.
pub fn best_index(val_totals: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in val_totals.iter().enumerate() {
        match best {
            Some((_, b)) if v < b - MIN_IMPROVEMENT => best = Some((i, v)),
            None => best = Some((i, v)),
            _ => {}
        }
    }
    best.map(|b| b.0)
}

/// True once the best validation loss has not improved for `patience`
/// consecutive epochs.
pub fn early_stop_check(val_totals: &[f64], patience: usize) -> bool {
    match best_index(val_totals) {
        Some(b) => val_totals.len() - 1 - b >= patience,
        None => false,
    }
}

/// Batch order for one epoch: a permutation of `0..n` from `(seed, epoch)`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize, shuffle: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        let mut h = Sha256::new();
        h.update(b"order");
        h.update(seed.to_le_bytes());
        h.update((epoch as u64).to_le_bytes());
        order.shuffle(&mut ChaCha8Rng::from_seed(h.finalize().into()));
    }
    order
}

/// Where a run's data came from, recorded in checkpoint manifests.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub dataset: String,
    pub data_root: Option<PathBuf>,
    pub spec: Option<SplitSpec>,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub crate_version: String,
    pub config_hash: String,
    pub network: NetworkConfig,
    pub parameters: ParameterBreakdown,
    pub checksum: String,
    pub epoch: usize,
    pub val_loss: f64,
    pub val_dice: f64,
    pub threshold: f64,
    pub split: SplitInfo,
}

pub const WEIGHTS_FILE: &str = "model.safetensors";
pub const MANIFEST_FILE: &str = "manifest.json";

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Write `model.safetensors` and `manifest.json` into `dir`.
pub fn save_checkpoint(model: &PlutoNet, dir: &Path, manifest: &CheckpointManifest) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    model.store().save(&dir.join(WEIGHTS_FILE))?;
    write_json(&dir.join(MANIFEST_FILE), manifest)
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Rebuild a model from a checkpoint directory. When `expected` is given, its
/// architecture hash must match the manifest's.
pub fn load_checkpoint(dir: &Path, expected: Option<&NetworkConfig>) -> Result<(PlutoNet, CheckpointManifest)> {
    let manifest = read_manifest(dir)?;
    if manifest.network.architecture_hash() != manifest.config_hash {
        return Err(Error::Config(format!(
            "{}: manifest config hash does not match its network description",
            dir.display()
        )));
    }
    if let Some(cfg) = expected {
        let h = cfg.architecture_hash();
        if h != manifest.config_hash {
            return Err(Error::Config(format!(
                "checkpoint {} was built for config hash {} but {} was requested",
                dir.display(),
                manifest.config_hash,
                h
            )));
        }
    }
    let mut net = manifest.network.clone();
    net.backbone.weights_path = None;
    let model = PlutoNet::new(&net, 0, DType::F32, &Device::Cpu)?;
    model.store().load(&dir.join(WEIGHTS_FILE), None)?;
    Ok((model, manifest))
}

struct JsonLog(Option<BufWriter<File>>);

impl JsonLog {
    fn record(&mut self, kind: &str, value: &impl Serialize) -> Result<()> {
        if let Some(w) = &mut self.0 {
            let mut v = serde_json::to_value(value).expect("record serializes");
            v.as_object_mut()
                .expect("records are objects")
                .insert("kind".into(), kind.into());
            writeln!(w, "{v}").and_then(|_| w.flush()).map_err(|e| Error::Io {
                path: PathBuf::from("train_log.jsonl"),
                source: e,
            })?;
        }
        Ok(())
    }
}

/// Trains one model. Outputs are written only when an output directory is set.
pub struct Trainer<'a> {
    model: &'a PlutoNet,
    cfg: TrainConfig,
    loss: LossConfig,
    augmentation: AugmentationConfig,
    eval: EvalConfig,
    output_dir: Option<PathBuf>,
    split: SplitInfo,
}

impl<'a> Trainer<'a> {
    pub fn new(model: &'a PlutoNet, cfg: &TrainConfig, loss: &LossConfig) -> Self {
        Self {
            model,
            cfg: cfg.clone(),
            loss: *loss,
            augmentation: AugmentationConfig::default(),
            eval: EvalConfig::default(),
            output_dir: None,
            split: SplitInfo::default(),
        }
    }

    pub fn augmentation(mut self, aug: &AugmentationConfig) -> Self {
        self.augmentation = *aug;
        self
    }

    pub fn eval(mut self, eval: &EvalConfig) -> Self {
        self.eval = *eval;
        self
    }

    pub fn output_dir(mut self, dir: &Path) -> Self {
        self.output_dir = Some(dir.to_path_buf());
        self
    }

    pub fn split_info(mut self, info: SplitInfo) -> Self {
        self.split = info;
        self
    }

    fn checkpoint_root(&self) -> Option<PathBuf> {
        self.cfg
            .checkpoint_dir
            .clone()
            .or_else(|| self.output_dir.as_ref().map(|d| d.join("checkpoints")))
    }

    fn manifest(&self, record: &EpochRecord) -> Result<CheckpointManifest> {
        let network = self.model.config().clone();
        Ok(CheckpointManifest {
            format_version: CHECKPOINT_FORMAT_VERSION,
            crate_version: env!("CARGO_PKG_VERSION").into(),
            config_hash: network.architecture_hash(),
            network,
            parameters: self.model.count_parameters(),
            checksum: self.model.checksum()?,
            epoch: record.epoch,
            val_loss: record.val_total,
            val_dice: record.val_dice,
            threshold: self.eval.threshold,
            split: self.split.clone(),
        })
    }

    fn step(&self, opt: &mut AdamW, batch: &[&Pair]) -> Result<(f64, Option<f64>, f64)> {
        let store = self.model.store();
        let (images, truth) = to_batch(batch, store.dtype(), &store.device())?;
        let out = self.model.forward(
            &images,
            ForwardMode::Train {
                auxiliary: self.cfg.consistency_enabled,
            },
        )?;
        let l_s = supervised_loss(&out.main, &truth, &self.loss)?;
        let l_c = match &out.aux {
            Some(aux) => Some(consistency_loss(&out.main, aux, &self.loss)?),
            None => None,
        };
        let objective = combine(&l_s, l_c.as_ref(), self.loss.alpha)?;
        let scalar = |t: &candle_core::Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        let ls = scalar(&l_s)?;
        let lc = l_c.as_ref().map(scalar).transpose()?;
        let bundle = total_loss(ls, lc.unwrap_or(0.0), &self.loss)?;
        let total = scalar(&objective)?;
        if !total.is_finite() {
            return Err(Error::Numeric(format!("non-finite training loss {total}")));
        }
        debug_assert!((total - bundle.total).abs() <= 1e-5 * bundle.total.abs().max(1.0));
        opt.backward_step(&objective)?;
        out.stats.apply()?;
        Ok((ls, lc, total))
    }

    fn validate(&self, val: &[Pair]) -> Result<(f64, f64)> {
        let ev = evaluate(self.model, val, &self.eval, &self.loss)?;
        let mut total = ev.supervised_loss.expect("evaluate records the loss");
        if self.cfg.validation_includes_consistency && self.cfg.consistency_enabled {
            total += self.loss.alpha * self.validation_consistency(val)?;
        }
        Ok((total, ev.mean().dice))
    }

    fn validation_consistency(&self, val: &[Pair]) -> Result<f64> {
        let aux = self
            .model
            .auxiliary()
            .ok_or_else(|| Error::Config("validation consistency needs the auxiliary decoder".into()))?;
        let store = self.model.store();
        let mut sum = 0.0;
        for chunk in val.chunks(self.eval.batch_size) {
            let refs: Vec<&Pair> = chunk.iter().collect();
            let (images, _) = to_batch(&refs, store.dtype(), &store.device())?;
            let main = self.model.forward(&images, ForwardMode::Eval)?.main;
            let pyr = self
                .model
                .extract_features(&images, &mut crate::blocks::ForwardCtx::eval())?;
            let l = consistency_loss(&main, &aux.forward(&pyr)?, &self.loss)?;
            sum += l.to_dtype(DType::F64)?.to_scalar::<f64>()? * chunk.len() as f64;
        }
        Ok(sum / val.len() as f64)
    }

    /// Train until early stopping, `max_epochs`, or `max_steps`.
    pub fn fit(&self, train: &[Pair], val: &[Pair]) -> Result<TrainHistory> {
        self.cfg.validate()?;
        self.loss.validate()?;
        self.augmentation.validate()?;
        if train.is_empty() || val.is_empty() {
            return Err(Error::Data(format!(
                "training needs nonempty splits (train {}, validation {})",
                train.len(),
                val.len()
            )));
        }
        if self.cfg.consistency_enabled && self.model.auxiliary().is_none() {
            return Err(Error::Config("consistency training needs the auxiliary decoder".into()));
        }
        let mut log = JsonLog(None);
        if let Some(dir) = &self.output_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("train_log.jsonl");
            log.0 = Some(BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?));
        }
        let ckpt_root = self.checkpoint_root();
        let mut opt = AdamW::new(self.model.trainable_vars(), self.cfg.adam())?;
        let mut epochs: Vec<EpochRecord> = Vec::new();
        let mut step = 0usize;
        let mut stop_reason = StopReason::MaxEpochs;
        for epoch in 1..=self.cfg.max_epochs {
            let started = Instant::now();
            let order = epoch_order(self.cfg.seed, epoch, train.len(), self.cfg.shuffle);
            let (mut sum_s, mut sum_c, mut sum_t, mut n_steps) = (0.0, 0.0, 0.0, 0usize);
            for idx in order.chunks(self.cfg.batch_size) {
                let batch: Vec<Pair> = idx
                    .iter()
                    .map(|&i| {
                        let p = &train[i];
                        augment(p, &self.augmentation, &mut sample_rng(self.cfg.seed, epoch, &p.id))
                    })
                    .collect();
                let refs: Vec<&Pair> = batch.iter().collect();
                let (l_s, l_c, total) = self.step(&mut opt, &refs)?;
                step += 1;
                n_steps += 1;
                sum_s += l_s;
                sum_c += l_c.unwrap_or(0.0);
                sum_t += total;
                log.record("step", &StepRecord { epoch, step, l_s, l_c, total })?;
                if self.cfg.max_steps.is_some_and(|m| step >= m) {
                    stop_reason = StopReason::MaxSteps;
                    break;
                }
            }
            let (val_total, val_dice) = self.validate(val)?;
            let n = n_steps as f64;
            let record = EpochRecord {
                epoch,
                steps: n_steps,
                train_l_s: sum_s / n,
                train_l_c: self.cfg.consistency_enabled.then_some(sum_c / n),
                train_total: sum_t / n,
                val_total,
                val_dice,
                wall_time_s: (!self.cfg.deterministic).then(|| started.elapsed().as_secs_f64()),
            };
            log::info!(
                "epoch {epoch}: train {:.5} val {:.5} val dice {:.4}",
                record.train_total,
                record.val_total,
                record.val_dice
            );
            log.record("epoch", &record)?;
            epochs.push(record.clone());
            let totals: Vec<f64> = epochs.iter().map(|e| e.val_total).collect();
            if let Some(root) = &ckpt_root {
                let manifest = self.manifest(&record)?;
                if best_index(&totals) == Some(totals.len() - 1) {
                    save_checkpoint(self.model, &root.join("best"), &manifest)?;
                }
                save_checkpoint(self.model, &root.join("last"), &manifest)?;
            }
            if stop_reason == StopReason::MaxSteps {
                break;
            }
            if self.cfg.early_stopping && early_stop_check(&totals, self.cfg.early_stop_patience) {
                stop_reason = StopReason::EarlyStopping;
                break;
            }
        }
        let totals: Vec<f64> = epochs.iter().map(|e| e.val_total).collect();
        let history = TrainHistory {
            best_epoch: best_index(&totals).expect("at least one epoch ran") + 1,
            epochs,
            stop_reason,
            total_steps: step,
        };
        if let Some(dir) = &self.output_dir {
            write_json(&dir.join("history.json"), &history)?;
        }
        Ok(history)
    }
}

/// Preprocessed train/validation/test pairs and their provenance.
pub struct LoadedData {
    pub train: Vec<Pair>,
    pub val: Vec<Pair>,
    pub test: Vec<Pair>,
    pub info: SplitInfo,
}

/// Load, split and preprocess the corpus named by a run configuration.
pub fn load_data(cfg: &RunConfig) -> Result<LoadedData> {
    let samples = data::load_corpus(&cfg.data.root, cfg.data.strict)?;
    let split = data::split_corpus(&samples, &cfg.data.split)?;
    let ids = |v: &[data::Sample]| v.iter().map(|s| s.id.clone()).collect::<Vec<_>>();
    let info = SplitInfo {
        dataset: cfg.data.name.clone(),
        data_root: Some(cfg.data.root.clone()),
        spec: Some(cfg.data.split),
        train_ids: ids(&split.train),
        val_ids: ids(&split.val),
        test_ids: ids(&split.test),
    };
    Ok(LoadedData {
        train: data::load_pairs(&split.train)?,
        val: data::load_pairs(&split.val)?,
        test: data::load_pairs(&split.test)?,
        info,
    })
}

/// A finished training run.
pub struct TrainOutcome {
    pub model: PlutoNet,
    pub history: TrainHistory,
    pub report: MetricsReport,
}

/// Train one model from `cfg` on already-loaded data, writing outputs to
/// `dir`, then score the best checkpoint's weights on the test split.
pub fn train_run(cfg: &RunConfig, data: &LoadedData, dir: &Path, label: &str) -> Result<TrainOutcome> {
    let model = PlutoNet::new(&cfg.network(), cfg.train.seed, DType::F32, &Device::Cpu)?;
    let eval = cfg.eval.eval_config();
    let history = Trainer::new(&model, &cfg.train, &cfg.loss)
        .augmentation(&cfg.data.augmentation)
        .eval(&eval)
        .output_dir(dir)
        .split_info(data.info.clone())
        .fit(&data.train, &data.val)?;
    let best_dir = cfg
        .train
        .checkpoint_dir
        .clone()
        .unwrap_or_else(|| dir.join("checkpoints"))
        .join("best");
    let (model, _) = load_checkpoint(&best_dir, Some(&cfg.network()))?;
    let mut report = MetricsReport::new(eval.threshold);
    if !data.test.is_empty() {
        let ev = evaluate(&model, &data.test, &eval, &cfg.loss)?;
        report.extend(ev.rows(label));
        let path = dir.join("test_metrics.csv");
        report.write_csv(&path)?;
    }
    Ok(TrainOutcome { model, history, report })
}

/// Both arms of the consistency ablation.
pub struct AblationOutcome {
    pub without: TrainOutcome,
    pub with: TrainOutcome,
    /// Two rows per dataset in the configured aggregation.
    pub report: MetricsReport,
}

pub fn ablation_labels(dataset: &str) -> [String; 2] {
    [format!("{dataset} No Consistency"), format!("{dataset} With Consistency")]
}

/// Train the two arms from the same seed and data order, differing only in
/// `consistency_enabled`, and report both on the test split.
pub fn run_ablation(cfg: &RunConfig, data: &LoadedData) -> Result<AblationOutcome> {
    if data.test.is_empty() {
        return Err(Error::Data("the ablation needs a nonempty test split".into()));
    }
    let [no_label, with_label] = ablation_labels(&cfg.data.name);
    let arm = |enabled: bool, sub: &str, label: &str| {
        let mut c = cfg.clone();
        c.train.consistency_enabled = enabled;
        c.train.checkpoint_dir = None;
        let dir = cfg.output_dir.join(sub);
        c.write_resolved(&dir)?;
        train_run(&c, data, &dir, label)
    };
    let without = arm(false, "no_consistency", &no_label)?;
    let with = arm(true, "with_consistency", &with_label)?;
    let mut report = MetricsReport::new(cfg.eval.threshold);
    for (outcome, label) in [(&without, &no_label), (&with, &with_label)] {
        let row = outcome
            .report
            .find(label, cfg.eval.aggregation)
            .expect("arm report carries both aggregations")
            .clone();
        report.rows.push(row);
    }
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    report.write_csv(&cfg.output_dir.join("ablation.csv"))?;
    let table = cfg.output_dir.join("ablation.txt");
    std::fs::write(&table, report.to_table()).map_err(|e| Error::io(&table, e))?;
    Ok(AblationOutcome { without, with, report })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn early_stopping_hand_simulations() {
        let v = [1.9, 1.7, 1.8, 1.9];
        assert!(!early_stop_check(&v[..3], 2));
        assert!(early_stop_check(&v, 2));
        assert_eq!(best_index(&v), Some(1));
        let flat = [1.5; 4];
        assert!(!early_stop_check(&flat[..3], 3));
        assert!(early_stop_check(&flat, 3));
        assert!(!early_stop_check(&[1.2], 1));
        assert!(!early_stop_check(&[], 1));
        let falling: Vec<f64> = (0..30).map(|i| 2.0 - i as f64 * 0.01).collect();
        for n in 1..=30 {
            assert!(!early_stop_check(&falling[..n], 1));
        }
    }

    #[test]
    fn improvement_must_exceed_threshold() {
        assert_eq!(best_index(&[1.0, 1.0 - 1e-9, 1.0 - 2e-9]), Some(0));
        assert_eq!(best_index(&[1.0, 1.0 - 1e-7]), Some(1));
    }

    #[test]
    fn epoch_order_is_a_seeded_permutation() {
        let a = epoch_order(1, 1, 50, true);
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert_eq!(a, epoch_order(1, 1, 50, true));
        assert_ne!(a, epoch_order(1, 2, 50, true));
        assert_eq!(epoch_order(1, 1, 5, false), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { learning_rate: 0.0, ..Default::default() },
            TrainConfig { max_epochs: 0, ..Default::default() },
            TrainConfig { early_stop_patience: 0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }
}
