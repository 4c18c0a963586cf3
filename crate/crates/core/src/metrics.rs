//! Thresholded segmentation metrics: Dice, IoU, precision and recall.
//!
//! A pixel is predicted positive when its probability is `>= threshold`.
//! Ratios with an empty denominator score 1 when prediction and ground truth
//! are both empty for that ratio, and 0 otherwise. Per-image scores are
//! averaged (`mean`); pooled counts give the `micro` aggregate.

use std::fmt::Write as _;
use std::path::Path;

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::data::{to_batch, Pair};
use crate::decoders::{ForwardMode, PlutoNet};
use crate::error::{Error, Result};
use crate::losses::{supervised_loss, LossConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub threshold: f64,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            batch_size: 8,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("threshold must lie in [0, 1], got {}", self.threshold)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("evaluation batch size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

impl ConfusionCounts {
    pub fn pixels(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn add(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }

    pub fn dice(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    pub fn iou(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp + self.fn_)
    }

    /// With no predicted positives: 1 if the ground truth is empty too, else 0.
    pub fn precision(&self) -> f64 {
        if self.tp + self.fp == 0 {
            if self.fn_ == 0 { 1.0 } else { 0.0 }
        } else {
            ratio(self.tp, self.tp + self.fp)
        }
    }

    /// With no true positives in the ground truth: 1 if nothing is predicted, else 0.
    pub fn recall(&self) -> f64 {
        if self.tp + self.fn_ == 0 {
            if self.fp == 0 { 1.0 } else { 0.0 }
        } else {
            ratio(self.tp, self.tp + self.fn_)
        }
    }

    pub fn values(&self) -> MetricValues {
        MetricValues {
            dice: self.dice(),
            iou: self.iou(),
            precision: self.precision(),
            recall: self.recall(),
        }
    }
}

/// Count agreement between thresholded probabilities and a binary mask.
pub fn confusion(pred: &[f32], truth: &[f32], threshold: f64) -> Result<ConfusionCounts> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!(
            "prediction has {} pixels but ground truth has {}",
            pred.len(),
            truth.len()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.iter().zip(truth) {
        match (p as f64 >= threshold, t >= 0.5) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub dice: f64,
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Mean,
    Micro,
}

impl Aggregation {
    pub fn as_str(&self) -> &'static str {
        match self {
            Aggregation::Mean => "mean",
            Aggregation::Micro => "micro",
        }
    }
}

/// Per-image confusion counts for one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub ids: Vec<String>,
    pub per_image: Vec<ConfusionCounts>,
    pub threshold: f64,
    /// Supervised loss of the main prediction, averaged over images.
    pub supervised_loss: Option<f64>,
}

impl Evaluation {
    pub fn from_counts(ids: Vec<String>, per_image: Vec<ConfusionCounts>, threshold: f64) -> Result<Self> {
        if per_image.is_empty() || ids.len() != per_image.len() {
            return Err(Error::Data("evaluation needs one id per image and at least one image".into()));
        }
        Ok(Self {
            ids,
            per_image,
            threshold,
            supervised_loss: None,
        })
    }

    pub fn mean(&self) -> MetricValues {
        let n = self.per_image.len() as f64;
        let mut m = MetricValues::default();
        for v in self.per_image.iter().map(ConfusionCounts::values) {
            m.dice += v.dice;
            m.iou += v.iou;
            m.precision += v.precision;
            m.recall += v.recall;
        }
        MetricValues {
            dice: m.dice / n,
            iou: m.iou / n,
            precision: m.precision / n,
            recall: m.recall / n,
        }
    }

    pub fn micro(&self) -> MetricValues {
        let mut total = ConfusionCounts::default();
        for c in &self.per_image {
            total.add(c);
        }
        total.values()
    }

    pub fn aggregate(&self, agg: Aggregation) -> MetricValues {
        match agg {
            Aggregation::Mean => self.mean(),
            Aggregation::Micro => self.micro(),
        }
    }

    /// One report row per aggregation.
    pub fn rows(&self, method: &str) -> Vec<ReportRow> {
        [Aggregation::Mean, Aggregation::Micro]
            .into_iter()
            .map(|agg| ReportRow {
                method: method.to_string(),
                aggregation: agg,
                images: self.per_image.len(),
                values: self.aggregate(agg),
            })
            .collect()
    }
}

/// Run the main branch in evaluation mode over `pairs` and count per image.
pub fn evaluate(model: &PlutoNet, pairs: &[Pair], cfg: &EvalConfig, loss: &LossConfig) -> Result<Evaluation> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Data("cannot evaluate an empty split".into()));
    }
    let dtype = model.store().dtype();
    let device = model.store().device();
    let mut counts = Vec::with_capacity(pairs.len());
    let mut loss_sum = 0.0;
    for chunk in pairs.chunks(cfg.batch_size) {
        let refs: Vec<&Pair> = chunk.iter().collect();
        let (images, truth) = to_batch(&refs, dtype, &device)?;
        let out = model.forward(&images, ForwardMode::Eval)?;
        let l = supervised_loss(&out.main, &truth, loss)?
            .to_dtype(DType::F64)?
            .to_scalar::<f64>()?;
        loss_sum += l * chunk.len() as f64;
        let probs = out.main.tensor().to_dtype(DType::F32)?.flatten_from(1)?.to_vec2::<f32>()?;
        for (p, pair) in probs.iter().zip(chunk) {
            counts.push(confusion(p, &pair.mask, cfg.threshold)?);
        }
    }
    let ids = pairs.iter().map(|p| p.id.clone()).collect();
    let mut ev = Evaluation::from_counts(ids, counts, cfg.threshold)?;
    ev.supervised_loss = Some(loss_sum / pairs.len() as f64);
    Ok(ev)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub aggregation: Aggregation,
    pub images: usize,
    #[serde(flatten)]
    pub values: MetricValues,
}

/// Rows of Dice | IoU | Precision | Recall.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub threshold: f64,
    pub rows: Vec<ReportRow>,
}

impl MetricsReport {
    pub fn new(threshold: f64) -> Self {
        Self {
            threshold,
            rows: Vec::new(),
        }
    }

    pub fn extend(&mut self, rows: impl IntoIterator<Item = ReportRow>) {
        self.rows.extend(rows);
    }

    pub fn find(&self, method: &str, agg: Aggregation) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.aggregation == agg)
    }

    pub fn to_table(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.method.len())
            .chain(["Method".len()])
            .max()
            .unwrap_or(6);
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<width$}  {:<5}  {:>6}  {:>6}  {:>6}  {:>9}  {:>6}",
            "Method", "Agg", "Images", "Dice", "IoU", "Precision", "Recall"
        );
        for r in &self.rows {
            let v = &r.values;
            let _ = writeln!(
                s,
                "{:<width$}  {:<5}  {:>6}  {:>6.4}  {:>6.4}  {:>9.4}  {:>6.4}",
                r.method,
                r.aggregation.as_str(),
                r.images,
                v.dice,
                v.iou,
                v.precision,
                v.recall
            );
        }
        s
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Data(format!("csv encoding failed: {e}"));
        w.write_record(["method", "aggregation", "images", "threshold", "dice", "iou", "precision", "recall"])
            .map_err(csv_err)?;
        for r in &self.rows {
            let v = &r.values;
            w.write_record([
                r.method.clone(),
                r.aggregation.as_str().to_string(),
                r.images.to_string(),
                self.threshold.to_string(),
                v.dice.to_string(),
                v.iou.to_string(),
                v.precision.to_string(),
                v.recall.to_string(),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::Data(format!("csv encoding failed: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn counts(pred: &[f32], truth: &[f32]) -> ConfusionCounts {
        confusion(pred, truth, 0.5).unwrap()
    }

    #[test]
    fn worked_example() {
        // tp = 1, fp = 1, fn = 0
        let c = counts(&[0.9, 0.7, 0.1, 0.2], &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(c, ConfusionCounts { tp: 1, fp: 1, fn_: 0, tn: 2 });
        assert!((c.dice() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(c.iou(), 0.5);
        assert_eq!(c.precision(), 0.5);
        assert_eq!(c.recall(), 1.0);
    }

    #[test]
    fn threshold_is_inclusive() {
        let c = counts(&[0.5, 0.4999], &[1.0, 1.0]);
        assert_eq!((c.tp, c.fn_), (1, 1));
    }

    #[test]
    fn degenerate_rules() {
        let both_empty = counts(&[0.0; 4], &[0.0; 4]).values();
        assert_eq!(both_empty, MetricValues { dice: 1.0, iou: 1.0, precision: 1.0, recall: 1.0 });
        let missed = counts(&[0.0; 4], &[1.0, 0.0, 0.0, 0.0]).values();
        assert_eq!((missed.dice, missed.iou, missed.precision, missed.recall), (0.0, 0.0, 0.0, 0.0));
        let spurious = counts(&[1.0, 0.0, 0.0, 0.0], &[0.0; 4]).values();
        assert_eq!((spurious.dice, spurious.precision, spurious.recall), (0.0, 0.0, 0.0));
    }

    #[test]
    fn mean_and_micro_differ() {
        let a = counts(&[1.0, 1.0, 1.0, 1.0], &[1.0, 1.0, 1.0, 1.0]);
        let b = counts(&[1.0, 0.0, 0.0, 0.0], &[0.0, 1.0, 0.0, 0.0]);
        let ev = Evaluation::from_counts(vec!["a".into(), "b".into()], vec![a, b], 0.5).unwrap();
        assert_eq!(ev.mean().dice, 0.5);
        assert!((ev.micro().dice - 8.0 / 10.0).abs() < 1e-12);
    }

    #[test]
    fn report_formats() {
        let ev = Evaluation::from_counts(
            vec!["a".into()],
            vec![counts(&[0.9, 0.7, 0.1, 0.2], &[1.0, 0.0, 0.0, 0.0])],
            0.5,
        )
        .unwrap();
        let mut r = MetricsReport::new(0.5);
        r.extend(ev.rows("toy With Consistency"));
        let table = r.to_table();
        for col in ["Dice", "IoU", "Precision", "Recall", "0.6667", "0.5000"] {
            assert!(table.contains(col), "{table}");
        }
        let csv = r.to_csv().unwrap();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("method,aggregation,images,threshold,dice,iou,precision,recall"));
        assert!(r.find("toy With Consistency", Aggregation::Micro).is_some());
    }

    #[test]
    fn empty_evaluation_rejected() {
        assert!(Evaluation::from_counts(vec![], vec![], 0.5).is_err());
    }

    proptest! {
        #[test]
        fn identities(bits in prop::collection::vec((any::<bool>(), any::<bool>()), 1..64)) {
            let pred: Vec<f32> = bits.iter().map(|b| b.0 as u8 as f32).collect();
            let truth: Vec<f32> = bits.iter().map(|b| b.1 as u8 as f32).collect();
            let c = counts(&pred, &truth);
            prop_assert_eq!(c.pixels() as usize, bits.len());
            let v = c.values();
            prop_assert!((v.dice - 2.0 * v.iou / (1.0 + v.iou)).abs() < 1e-12);
            prop_assert!(v.iou <= v.dice + 1e-15);
            for x in [v.dice, v.iou, v.precision, v.recall] {
                prop_assert!((0.0..=1.0).contains(&x));
            }
        }
    }
}
