//! Dice-style agreement losses.
//!
//! Both the supervised loss (prediction vs. ground truth) and the
//! consistency loss (main vs. auxiliary prediction) use
//!
//! ```text
//! loss(p, q) = 2 · (1 − Σ p·q / (Σ p² + Σ q² + ε))
//! ```
//!
//! and the training objective is `L = L_s + α · L_c`. The formula is kept
//! exactly as written, so perfect agreement scores 1 (not 0) and every
//! logged loss lies in [1, 2]. The constant offset has no effect on
//! gradients.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::decoders::MaskTensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// One sum over every pixel of every sample.
    Joint,
    /// Loss per sample, then the batch mean.
    PerSample,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub epsilon: f64,
    pub alpha: f64,
    pub reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-6,
            alpha: 1.0,
            reduction: Reduction::Joint,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("loss epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("loss alpha must be >= 0, got {}", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_s: f64,
    pub l_c: f64,
    pub total: f64,
}

fn check_pair(p: &Tensor, q: &Tensor) -> Result<()> {
    if p.dims() != q.dims() {
        return Err(Error::Shape(format!(
            "loss operands differ in shape: {:?} vs {:?}",
            p.dims(),
            q.dims()
        )));
    }
    Ok(())
}

/// `Σ p·q / (Σ p² + Σ q² + ε)` over all elements; `epsilon` may be zero here.
pub fn overlap_ratio(p: &Tensor, q: &Tensor, epsilon: f64) -> Result<Tensor> {
    check_pair(p, q)?;
    let inter = (p * q)?.sum_all()?;
    let denom = ((p.sqr()?.sum_all()? + q.sqr()?.sum_all()?)? + epsilon)?;
    Ok((inter / denom)?)
}

/// `2 · (1 − Σ p·q / (Σ p² + Σ q² + ε))` summed jointly over all elements.
/// Returns a differentiable scalar tensor.
pub fn dice_pair_loss(p: &Tensor, q: &Tensor, epsilon: f64) -> Result<Tensor> {
    if !(epsilon > 0.0) {
        return Err(Error::Config(format!("loss epsilon must be > 0, got {epsilon}")));
    }
    Ok(((overlap_ratio(p, q, epsilon)?.neg()? + 1.0)? * 2.0)?)
}

fn reduced_loss(p: &Tensor, q: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    cfg.validate()?;
    match cfg.reduction {
        Reduction::Joint => dice_pair_loss(p, q, cfg.epsilon),
        Reduction::PerSample => {
            check_pair(p, q)?;
            let n = p.dims()[0];
            let losses = (0..n)
                .map(|i| dice_pair_loss(&p.get(i)?, &q.get(i)?, cfg.epsilon))
                .collect::<Result<Vec<_>>>()?;
            Ok(Tensor::stack(&losses, 0)?.mean_all()?)
        }
    }
}

/// Agreement between the main and auxiliary predictions.
pub fn consistency_loss(p_m: &MaskTensor, p_a: &MaskTensor, cfg: &LossConfig) -> Result<Tensor> {
    reduced_loss(p_m.tensor(), p_a.tensor(), cfg)
}

/// Agreement between the main prediction and the binary ground truth.
pub fn supervised_loss(p_m: &MaskTensor, p_t: &MaskTensor, cfg: &LossConfig) -> Result<Tensor> {
    let t = p_t.tensor();
    let non_binary = t
        .ne(0.0)?
        .mul(&t.ne(1.0)?)?
        .to_dtype(DType::F32)?
        .sum_all()?
        .to_scalar::<f32>()?;
    if non_binary > 0.0 {
        return Err(Error::Data("ground-truth mask is not binary".into()));
    }
    reduced_loss(p_m.tensor(), t, cfg)
}

/// `L = L_s + α · L_c` on tensors; `l_c = None` is the supervised-only objective.
pub fn combine(l_s: &Tensor, l_c: Option<&Tensor>, alpha: f64) -> Result<Tensor> {
    match l_c {
        Some(l_c) => Ok((l_s + (l_c * alpha)?)?),
        None => Ok(l_s.clone()),
    }
}

/// Scalar bookkeeping of `L = L_s + α · L_c`.
pub fn total_loss(l_s: f64, l_c: f64, cfg: &LossConfig) -> Result<LossBundle> {
    if !l_s.is_finite() || !l_c.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss: l_s = {l_s}, l_c = {l_c}")));
    }
    Ok(LossBundle {
        l_s,
        l_c,
        total: l_s + cfg.alpha * l_c,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use proptest::prelude::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(v, &Device::Cpu).unwrap()
    }

    fn scalar(x: &Tensor) -> f64 {
        x.to_scalar::<f64>().unwrap()
    }

    #[test]
    fn identical_ones_give_one() {
        let ones = t(&[1.0; 16]);
        let l = scalar(&dice_pair_loss(&ones, &ones, 1e-12).unwrap());
        assert!((l - 1.0).abs() < 1e-12);
    }

    #[test]
    fn disjoint_gives_two() {
        let l = scalar(&dice_pair_loss(&t(&[1.0; 9]), &t(&[0.0; 9]), 1e-6).unwrap());
        assert_eq!(l, 2.0);
    }

    #[test]
    fn scalar_hand_evaluation() {
        let l = scalar(&dice_pair_loss(&t(&[0.5]), &t(&[1.0]), 1e-6).unwrap());
        let want = 2.0 * (1.0 - 0.5 / (1.25 + 1e-6));
        assert!((l - want).abs() < 1e-12);
        assert!((l - 1.2000006).abs() < 1e-6);
    }

    #[test]
    fn errors() {
        assert!(matches!(dice_pair_loss(&t(&[1.0]), &t(&[1.0, 0.0]), 1e-6), Err(Error::Shape(_))));
        assert!(matches!(dice_pair_loss(&t(&[1.0]), &t(&[1.0]), 0.0), Err(Error::Config(_))));
        assert!(LossConfig { alpha: -1.0, ..Default::default() }.validate().is_err());
        assert!(matches!(total_loss(f64::NAN, 1.0, &LossConfig::default()), Err(Error::Numeric(_))));
    }

    #[test]
    fn total_loss_arithmetic() {
        let cfg = |alpha| LossConfig { alpha, ..Default::default() };
        assert_eq!(total_loss(1.7, 1.2, &cfg(0.0)).unwrap().total, 1.7);
        assert!((total_loss(1.3, 1.1, &cfg(1.0)).unwrap().total - 2.4).abs() < 1e-15);
        assert_eq!(total_loss(1.0, 2.0, &cfg(0.5)).unwrap().total, 2.0);
    }

    #[test]
    fn supervised_requires_binary_truth() {
        let dev = Device::Cpu;
        let p = MaskTensor::new(Tensor::full(0.3f32, (1, 1, 224, 224), &dev).unwrap()).unwrap();
        let soft = MaskTensor::new(Tensor::full(0.5f32, (1, 1, 224, 224), &dev).unwrap()).unwrap();
        assert!(matches!(supervised_loss(&p, &soft, &LossConfig::default()), Err(Error::Data(_))));
        let truth = MaskTensor::new(Tensor::ones((1, 1, 224, 224), DType::F32, &dev).unwrap()).unwrap();
        let perfect = supervised_loss(&truth, &truth, &LossConfig::default()).unwrap();
        assert!((perfect.to_scalar::<f32>().unwrap() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn per_sample_reduction_averages_samples() {
        let p = Tensor::new(&[[1.0f64, 1.0], [1.0, 0.0]], &Device::Cpu).unwrap();
        let q = Tensor::new(&[[1.0f64, 1.0], [0.0, 1.0]], &Device::Cpu).unwrap();
        let cfg = LossConfig { reduction: Reduction::PerSample, ..Default::default() };
        let l = scalar(&reduced_loss(&p, &q, &cfg).unwrap());
        let first = 2.0 * (1.0 - 2.0 / (4.0 + 1e-6));
        assert!((l - (first + 2.0) / 2.0).abs() < 1e-12);
    }

    fn mask_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..=1.0, n)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn range_symmetry_and_minimum(p in mask_strategy(16), q in mask_strategy(16)) {
            let eps = 1e-6;
            let (pt, qt) = (t(&p), t(&q));
            let pq = scalar(&dice_pair_loss(&pt, &qt, eps).unwrap());
            let qp = scalar(&dice_pair_loss(&qt, &pt, eps).unwrap());
            prop_assert_eq!(pq, qp);
            prop_assert!((0.0..=2.0).contains(&pq));
            let mass: f64 = p.iter().chain(&q).map(|v| v * v).sum();
            if mass >= 1.0 {
                prop_assert!(pq >= 1.0 - 2.0 * eps);
            }
            let pp = scalar(&dice_pair_loss(&pt, &pt, eps).unwrap());
            prop_assert!(pp <= pq + 1e-6);
        }

        #[test]
        fn joint_scaling_leaves_zero_eps_ratio(p in mask_strategy(16), q in mask_strategy(16), c in 0.05f64..1.0) {
            let r = scalar(&overlap_ratio(&t(&p), &t(&q), 0.0).unwrap());
            let ps: Vec<f64> = p.iter().map(|v| v * c).collect();
            let qs: Vec<f64> = q.iter().map(|v| v * c).collect();
            let rs = scalar(&overlap_ratio(&t(&ps), &t(&qs), 0.0).unwrap());
            if r.is_finite() {
                prop_assert!((r - rs).abs() < 1e-12);
            }
        }
    }
}
