//! Per-image density-map losses (MSE, error-sensitive BCE, Focal-MSE), the
//! dual-phase curriculum selector, and the weighted batch reduction.
//!
//! Losses are summed over pixels. Gradients are taken with respect to the
//! predicted density map.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_ES_EPS: f64 = 1e-7;
pub const DEFAULT_SWITCH_EPOCH: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossKind {
    Mse,
    Es,
    Fmse,
}

impl LossKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            LossKind::Mse => "MSE",
            LossKind::Es => "ES",
            LossKind::Fmse => "FMSE",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "MSE" => Ok(LossKind::Mse),
            "ES" => Ok(LossKind::Es),
            "FMSE" => Ok(LossKind::Fmse),
            other => Err(Error::Contract(format!("unknown loss kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub kind: LossKind,
    pub value: f64,
    pub grad: Tensor,
}

fn check_pair(pred: &Tensor, gt: &Tensor, op: &'static str) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::dim(
            op,
            format!("prediction {:?} vs ground truth {:?}", pred.shape(), gt.shape()),
        ));
    }
    Ok(())
}

/// `Σ (p - g)^2`, gradient `2 (p - g)`.
pub fn mse_loss(pred: &Tensor, gt: &Tensor) -> Result<LossReport> {
    check_pair(pred, gt, "mse_loss")?;
    let mut value = 0.0;
    let grad: Vec<f64> = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(p, g)| {
            let d = p - g;
            value += d * d;
            2.0 * d
        })
        .collect();
    Ok(LossReport {
        kind: LossKind::Mse,
        value,
        grad: Tensor::new(pred.shape().to_vec(), grad)?,
    })
}

/// Pixelwise binary cross-entropy `-Σ [g ln p + (1-g) ln(1-p)]` with `p`
/// clamped to `[eps, 1-eps]` and `g` clamped to `[0, 1]`. The gradient
/// `(p - g) / (p (1 - p))` is evaluated at the clamped `p`.
pub fn es_loss_with_eps(pred: &Tensor, gt: &Tensor, eps: f64) -> Result<LossReport> {
    check_pair(pred, gt, "es_loss")?;
    if !(eps > 0.0 && eps < 0.5) {
        return Err(Error::Contract(format!("es clamp eps {eps} outside (0, 0.5)")));
    }
    let mut value = 0.0;
    let grad: Vec<f64> = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&p, &g)| {
            let p = p.clamp(eps, 1.0 - eps);
            let g = g.clamp(0.0, 1.0);
            value -= g * p.ln() + (1.0 - g) * (1.0 - p).ln();
            (p - g) / (p * (1.0 - p))
        })
        .collect();
    Ok(LossReport {
        kind: LossKind::Es,
        value: value.max(0.0),
        grad: Tensor::new(pred.shape().to_vec(), grad)?,
    })
}

pub fn es_loss(pred: &Tensor, gt: &Tensor) -> Result<LossReport> {
    es_loss_with_eps(pred, gt, DEFAULT_ES_EPS)
}

/// MSE on the raw ground truth plus the error-sensitive term.
pub fn focal_mse_loss_with_eps(pred: &Tensor, gt: &Tensor, eps: f64) -> Result<LossReport> {
    let mse = mse_loss(pred, gt)?;
    let es = es_loss_with_eps(pred, gt, eps)?;
    Ok(LossReport {
        kind: LossKind::Fmse,
        value: mse.value + es.value,
        grad: crate::tensor::add(&mse.grad, &es.grad)?,
    })
}

pub fn focal_mse_loss(pred: &Tensor, gt: &Tensor) -> Result<LossReport> {
    focal_mse_loss_with_eps(pred, gt, DEFAULT_ES_EPS)
}

pub fn loss_for(kind: LossKind, pred: &Tensor, gt: &Tensor, eps: f64) -> Result<LossReport> {
    match kind {
        LossKind::Mse => mse_loss(pred, gt),
        LossKind::Es => es_loss_with_eps(pred, gt, eps),
        LossKind::Fmse => focal_mse_loss_with_eps(pred, gt, eps),
    }
}

/// Dual-phase schedule: Focal-MSE before `switch_epoch`, MSE from it on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CurriculumPolicy {
    pub switch_epoch: usize,
}

impl Default for CurriculumPolicy {
    fn default() -> Self {
        Self {
            switch_epoch: DEFAULT_SWITCH_EPOCH,
        }
    }
}

pub fn select_loss(policy: &CurriculumPolicy, epoch: usize) -> LossKind {
    if epoch < policy.switch_epoch {
        LossKind::Fmse
    } else {
        LossKind::Mse
    }
}

/// Result of the weighted batch reduction.
#[derive(Clone, Debug)]
pub struct BatchLoss {
    pub kind: LossKind,
    /// `(1/n) Σ U_i L_i`
    pub value: f64,
    /// Unweighted per-image loss values.
    pub per_image: Vec<f64>,
    /// Per-image gradients already scaled by `U_i / n`.
    pub grads: Vec<Tensor>,
}

/// Weighted mean of per-image losses of one kind.
pub fn batch_loss_with_kind(
    preds: &[Tensor],
    gts: &[Tensor],
    weights: &[f64],
    kind: LossKind,
    eps: f64,
) -> Result<BatchLoss> {
    let n = preds.len();
    if n == 0 || gts.len() != n || weights.len() != n {
        return Err(Error::Contract(format!(
            "batch_loss needs equal non-empty lists, got {} preds, {} gts, {} weights",
            n,
            gts.len(),
            weights.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
        return Err(Error::Contract(format!("loss weight {w} is negative or non-finite")));
    }
    let mut value = 0.0;
    let mut per_image = Vec::with_capacity(n);
    let mut grads = Vec::with_capacity(n);
    for ((pred, gt), &w) in preds.iter().zip(gts).zip(weights) {
        let report = loss_for(kind, pred, gt, eps)?;
        value += w * report.value;
        per_image.push(report.value);
        grads.push(crate::tensor::scale(&report.grad, w / n as f64)?);
    }
    Ok(BatchLoss {
        kind,
        value: value / n as f64,
        per_image,
        grads,
    })
}

/// Weighted batch loss with the kind chosen by the curriculum at `epoch`.
pub fn batch_loss(
    preds: &[Tensor],
    gts: &[Tensor],
    weights: &[f64],
    policy: &CurriculumPolicy,
    epoch: usize,
) -> Result<BatchLoss> {
    batch_loss_with_kind(preds, gts, weights, select_loss(policy, epoch), DEFAULT_ES_EPS)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn px(v: f64) -> Tensor {
        Tensor::new(vec![1, 1], vec![v]).unwrap()
    }

    #[test]
    fn mse_examples() {
        let g = Tensor::new(vec![1, 2], vec![0.3, 0.7]).unwrap();
        let same = mse_loss(&g, &g).unwrap();
        assert_eq!(same.value, 0.0);
        assert!(same.grad.data().iter().all(|&v| v == 0.0));
        let r = mse_loss(
            &Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap(),
            &Tensor::zeros(&[1, 2]),
        )
        .unwrap();
        assert_eq!(r.value, 1.0);
        assert_eq!(r.grad.data(), &[2.0, 0.0]);
        assert!(mse_loss(&Tensor::zeros(&[2, 2]), &Tensor::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn es_examples() {
        let r = es_loss(&px(0.5), &px(1.0)).unwrap();
        assert!((r.value - 2f64.ln()).abs() < 1e-12);
        assert!((r.grad.data()[0] + 2.0).abs() < 1e-12);
        for g in [0.0, 1.0] {
            assert!(es_loss(&px(g), &px(g)).unwrap().value < 1e-5);
        }
        let soft = es_loss(&px(0.5), &px(0.5)).unwrap();
        assert!((soft.value - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn es_clamps_ground_truth_above_one() {
        let a = es_loss(&px(0.3), &px(4.0)).unwrap();
        let b = es_loss(&px(0.3), &px(1.0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fmse_examples() {
        let r = focal_mse_loss(&px(0.5), &px(1.0)).unwrap();
        assert!((r.value - 0.943_147_180_559_945_3).abs() < 1e-12);
        assert_eq!(r.kind, LossKind::Fmse);
        let g = Tensor::new(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert!(focal_mse_loss(&g, &g).unwrap().value < 1e-5);
    }

    #[test]
    fn fmse_gradient_dominates_mse_on_grid() {
        for i in 1..100 {
            let p = i as f64 / 100.0;
            for g in [0.0, 1.0] {
                let f = focal_mse_loss(&px(p), &px(g)).unwrap().grad.data()[0];
                let m = mse_loss(&px(p), &px(g)).unwrap().grad.data()[0];
                assert_eq!(f.signum(), m.signum(), "p={p} g={g}");
                assert!(f.abs() > m.abs(), "p={p} g={g}");
            }
        }
    }

    #[test]
    fn curriculum_examples() {
        let policy = CurriculumPolicy { switch_epoch: 20 };
        assert_eq!(select_loss(&policy, 19), LossKind::Fmse);
        assert_eq!(select_loss(&policy, 20), LossKind::Mse);
        assert_eq!(select_loss(&policy, 21), LossKind::Mse);
        let never = CurriculumPolicy { switch_epoch: 0 };
        assert!((0..100).all(|e| select_loss(&never, e) == LossKind::Mse));
        // exactly one switch over 0..E
        let switches = (1..60)
            .filter(|&e| select_loss(&policy, e) != select_loss(&policy, e - 1))
            .count();
        assert_eq!(switches, 1);
    }

    #[test]
    fn batch_examples() {
        let gts = vec![Tensor::zeros(&[1, 1]), Tensor::zeros(&[1, 1])];
        let preds = vec![px(1.0), px(2f64.sqrt())];
        let kind = LossKind::Mse;
        let eps = DEFAULT_ES_EPS;
        let mean = batch_loss_with_kind(&preds, &gts, &[1.0, 1.0], kind, eps).unwrap();
        assert!((mean.value - 1.5).abs() < 1e-12);
        let weighted = batch_loss_with_kind(&preds, &gts, &[0.2, 0.8], kind, eps).unwrap();
        assert!((weighted.value - 0.9).abs() < 1e-12);
        let dropped = batch_loss_with_kind(&preds, &gts, &[0.0, 1.0], kind, eps).unwrap();
        assert!((dropped.value - 1.0).abs() < 1e-12);
        assert!(dropped.grads[0].data().iter().all(|&v| v == 0.0));
        assert!(batch_loss_with_kind(&preds, &gts[..1], &[1.0, 1.0], kind, eps).is_err());
        assert!(batch_loss_with_kind(&preds, &gts, &[1.0], kind, eps).is_err());
        assert!(batch_loss_with_kind(&preds, &gts, &[1.0, -1.0], kind, eps).is_err());
        let by_policy = batch_loss(&preds, &gts, &[1.0, 1.0], &CurriculumPolicy::default(), 3)
            .unwrap();
        assert_eq!(by_policy.kind, LossKind::Fmse);
    }

    fn random_pair(rng: &mut ChaCha8Rng) -> (Tensor, Tensor) {
        let pred = Tensor::from_fn(&[4, 5], |_| rng.gen_range(0.05..0.95)).unwrap();
        let gt = Tensor::from_fn(&[4, 5], |_| rng.gen_range(0.0..1.0)).unwrap();
        (pred, gt)
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            let (pred, gt) = random_pair(&mut rng);
            for kind in [LossKind::Mse, LossKind::Es, LossKind::Fmse] {
                let f = |p: &Tensor| {
                    let r = loss_for(kind, p, &gt, DEFAULT_ES_EPS)?;
                    Ok((Tensor::scalar(r.value)?, r.grad))
                };
                let err = grad_check(f, &pred, 1e-5).unwrap();
                assert!(err < 1e-6, "{kind}: {err}");
            }
        }
    }

    proptest! {
        #[test]
        fn losses_are_nonnegative(
            p in prop::collection::vec(0.0f64..=1.0, 6),
            g in prop::collection::vec(0.0f64..=2.0, 6),
        ) {
            let pred = Tensor::new(vec![2, 3], p).unwrap();
            let gt = Tensor::new(vec![2, 3], g).unwrap();
            for kind in [LossKind::Mse, LossKind::Es, LossKind::Fmse] {
                prop_assert!(loss_for(kind, &pred, &gt, DEFAULT_ES_EPS).unwrap().value >= 0.0);
            }
        }

        #[test]
        fn batch_loss_is_linear_in_weights(
            w1 in prop::collection::vec(0.0f64..3.0, 3),
            w2 in prop::collection::vec(0.0f64..3.0, 3),
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (preds, gts): (Vec<_>, Vec<_>) = (0..3).map(|_| random_pair(&mut rng)).unzip();
            let sum_w: Vec<f64> = w1.iter().zip(&w2).map(|(a, b)| a + b).collect();
            let eval = |w: &[f64]| {
                batch_loss_with_kind(&preds, &gts, w, LossKind::Fmse, DEFAULT_ES_EPS).unwrap().value
            };
            let lhs = eval(&sum_w);
            let rhs = eval(&w1) + eval(&w2);
            prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + lhs.abs()));
        }
    }
}
