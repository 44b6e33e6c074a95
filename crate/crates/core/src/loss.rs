//! Combined soft-Dice and cross-entropy objective.
//!
//! `loss = 1 - (2Σxy + ε) / (Σx + Σy + ε) - (1/N) Σ x·ln(y)`
//!
//! The cross-entropy term above only sees foreground voxels. [`LossVariant::FullBce`]
//! swaps in the two-sided binary cross-entropy `-(1/N) Σ [x ln y + (1-x) ln(1-y)]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Predictions are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` inside the logarithm;
/// the Dice term sees the raw probabilities.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossVariant {
    #[default]
    AsWritten,
    FullBce,
}

impl std::str::FromStr for LossVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "as-written" => Ok(LossVariant::AsWritten),
            "full-bce" => Ok(LossVariant::FullBce),
            other => Err(Error::domain(format!("unknown loss variant {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub epsilon: f64,
    pub variant: LossVariant,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            epsilon: 1e-5,
            variant: LossVariant::AsWritten,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::domain(format!("loss epsilon must be positive, got {}", self.epsilon)));
        }
        Ok(())
    }
}

#[inline]
fn clamp_prob(y: f64) -> f64 {
    y.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

struct Sums {
    n: f64,
    sx: f64,
    sy: f64,
    sxy: f64,
    ce: f64,
}

fn accumulate<T: Scalar>(pred: &[T], target: &[T], cfg: &LossConfig) -> Result<Sums> {
    cfg.validate()?;
    if pred.len() != target.len() {
        return Err(Error::domain(format!(
            "prediction has {} values but target has {}",
            pred.len(),
            target.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::domain("loss over zero voxels"));
    }
    let mut s = Sums {
        n: pred.len() as f64,
        sx: 0.0,
        sy: 0.0,
        sxy: 0.0,
        ce: 0.0,
    };
    for (i, (&p, &t)) in pred.iter().zip(target).enumerate() {
        let (p, x) = (p.as_f64(), t.as_f64());
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::domain(format!("prediction {p} at {i} is outside [0, 1]")));
        }
        if x != 0.0 && x != 1.0 {
            return Err(Error::domain(format!("target {x} at {i} is not 0 or 1")));
        }
        let y = clamp_prob(p);
        s.sx += x;
        s.sy += p;
        s.sxy += x * p;
        s.ce += match cfg.variant {
            LossVariant::AsWritten => x * y.ln(),
            LossVariant::FullBce => x * y.ln() + (1.0 - x) * (1.0 - y).ln(),
        };
    }
    Ok(s)
}

fn value(s: &Sums, eps: f64) -> f64 {
    1.0 - (2.0 * s.sxy + eps) / (s.sx + s.sy + eps) - s.ce / s.n
}

/// Loss over flattened probabilities `pred` and binary labels `target`.
pub fn combined_loss<T: Scalar>(pred: &[T], target: &[T], cfg: &LossConfig) -> Result<T> {
    let s = accumulate(pred, target, cfg)?;
    Ok(T::lit(value(&s, cfg.epsilon)))
}

/// Loss and its gradient with respect to each prediction. The log terms are
/// differentiated at the clamped value.
pub fn combined_loss_grad<T: Scalar>(
    pred: &[T],
    target: &[T],
    cfg: &LossConfig,
) -> Result<(T, Vec<T>)> {
    let s = accumulate(pred, target, cfg)?;
    let eps = cfg.epsilon;
    let num = 2.0 * s.sxy + eps;
    let den = s.sx + s.sy + eps;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let (y, x) = (clamp_prob(p.as_f64()), t.as_f64());
            let dice = -(2.0 * x * den - num) / (den * den);
            let ce = match cfg.variant {
                LossVariant::AsWritten => -x / (s.n * y),
                LossVariant::FullBce => -x / (s.n * y) + (1.0 - x) / (s.n * (1.0 - y)),
            };
            T::lit(dice + ce)
        })
        .collect();
    Ok((T::lit(value(&s, eps)), grad))
}

#[inline]
pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Loss on logits: applies the sigmoid, then chains the probability gradient
/// through `σ'(z) = σ(1 - σ)`. The clamp is treated as identity in the chain.
pub fn combined_loss_logits<T: Scalar>(
    logits: &[T],
    target: &[T],
    cfg: &LossConfig,
) -> Result<(T, Vec<T>)> {
    let probs: Vec<T> = logits.iter().map(|&z| sigmoid(z)).collect();
    let (loss, mut grad) = combined_loss_grad(&probs, target, cfg)?;
    for (g, &y) in grad.iter_mut().zip(&probs) {
        *g *= y * (T::one() - y);
    }
    Ok((loss, grad))
}
