//! Fused loss ops taking logits, so sigmoid and log stay numerically stable.

use super::graph::{Graph, Var};
use super::Tensor;
use crate::error::{Error, Result};

/// Lower clamp on probabilities inside logarithms.
pub const LOG_CLAMP: f64 = 1e-12;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln σ(x)` without overflow.
fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Clamped `ln σ(z)` and its derivative in `z`.
fn clamped_log_sigmoid(z: f64) -> (f64, f64) {
    let l = log_sigmoid(z);
    let floor = LOG_CLAMP.ln();
    if l < floor {
        (floor, 0.0)
    } else {
        (l, 1.0 - sigmoid(z))
    }
}

pub fn smooth_l1_value(e: f64, delta: f64) -> f64 {
    let a = e.abs();
    if a < delta {
        0.5 * a * a / delta
    } else {
        a - 0.5 * delta
    }
}

fn smooth_l1_grad(e: f64, delta: f64) -> f64 {
    if e.abs() < delta {
        e / delta
    } else {
        e.signum()
    }
}

fn check_len(graph: &Graph, v: Var, n: usize, what: &str) -> Result<()> {
    if graph.value(v).len() != n {
        return Err(Error::Shape(format!(
            "{what}: prediction has {} values, target has {n}",
            graph.value(v).len()
        )));
    }
    if !graph.value(v).is_finite() {
        return Err(Error::Numeric(format!("{what}: non-finite prediction")));
    }
    Ok(())
}

impl Graph {
    /// Heatmap focal loss on logits: `(1−p)^α·ln p` where the target is exactly 1,
    /// `(1−y)^β·p^α·ln(1−p)` elsewhere, negated and divided by the count of
    /// target-1 cells (at least 1).
    pub fn shape_focal_loss(&mut self, logits: Var, target: &[f64], alpha: f64, beta: f64) -> Result<Var> {
        check_len(self, logits, target.len(), "shape focal loss")?;
        if target.iter().any(|t| t.is_nan()) {
            return Err(Error::Numeric("shape focal loss: NaN target".into()));
        }
        let z = self.value(logits).data();
        let positives = target.iter().filter(|&&t| t == 1.0).count().max(1) as f64;
        let mut total = 0.0;
        let mut grad = vec![0.0; z.len()];
        for (i, (&zi, &yi)) in z.iter().zip(target).enumerate() {
            let p = sigmoid(zi);
            if yi == 1.0 {
                let (lp, dlp) = clamped_log_sigmoid(zi);
                let q = (1.0 - p).powf(alpha);
                total -= q * lp;
                let dq = -alpha * p * q;
                grad[i] = -(dq * lp + q * dlp);
            } else {
                let (l1p, dl1p) = clamped_log_sigmoid(-zi);
                let wy = (1.0 - yi).powf(beta);
                let pa = p.powf(alpha);
                total -= wy * pa * l1p;
                let dpa = alpha * pa * (1.0 - p);
                grad[i] = -wy * (dpa * l1p - pa * dl1p);
            }
        }
        grad.iter_mut().for_each(|g| *g /= positives);
        Ok(self.push(
            Tensor::scalar(total / positives),
            &[logits],
            Box::new(move |ctx| vec![Some(grad.iter().map(|g| g * ctx.grad[0]).collect())]),
        ))
    }

    /// Binary focal loss on logits with labels 1 (positive), 0 (negative), −1 (ignored).
    ///
    /// Positives are weighted by `alpha` and negatives by `1 − alpha`; the sum is
    /// divided by `normalizer`.
    pub fn sigmoid_focal_loss(
        &mut self,
        logits: Var,
        labels: &[i8],
        alpha: f64,
        gamma: f64,
        normalizer: f64,
    ) -> Result<Var> {
        check_len(self, logits, labels.len(), "focal loss")?;
        let z = self.value(logits).data();
        let mut total = 0.0;
        let mut grad = vec![0.0; z.len()];
        for (i, (&zi, &li)) in z.iter().zip(labels).enumerate() {
            if li < 0 {
                continue;
            }
            // Work with the logit of the true class so p_t = σ(s).
            let (s, sign, weight) = if li > 0 {
                (zi, 1.0, alpha)
            } else {
                (-zi, -1.0, 1.0 - alpha)
            };
            let pt = sigmoid(s);
            let (lpt, dlpt) = clamped_log_sigmoid(s);
            let m = (1.0 - pt).powf(gamma);
            total -= weight * m * lpt;
            let dm = -gamma * pt * m;
            grad[i] = -weight * (dm * lpt + m * dlpt) * sign;
        }
        let norm = normalizer.max(1.0);
        grad.iter_mut().for_each(|g| *g /= norm);
        Ok(self.push(
            Tensor::scalar(total / norm),
            &[logits],
            Box::new(move |ctx| vec![Some(grad.iter().map(|g| g * ctx.grad[0]).collect())]),
        ))
    }

    /// `Σ wᵢ·smoothL1(predᵢ − targetᵢ) / normalizer`, quadratic below `delta`.
    pub fn smooth_l1_loss(
        &mut self,
        pred: Var,
        target: &[f64],
        weights: &[f64],
        delta: f64,
        normalizer: f64,
    ) -> Result<Var> {
        check_len(self, pred, target.len(), "smooth-L1")?;
        if weights.len() != target.len() {
            return Err(Error::Shape("smooth-L1: weight length mismatch".into()));
        }
        let x = self.value(pred).data();
        let norm = normalizer.max(1.0);
        let mut total = 0.0;
        let mut grad = vec![0.0; x.len()];
        for i in 0..x.len() {
            if weights[i] == 0.0 {
                continue;
            }
            let e = x[i] - target[i];
            total += weights[i] * smooth_l1_value(e, delta);
            grad[i] = weights[i] * smooth_l1_grad(e, delta) / norm;
        }
        Ok(self.push(
            Tensor::scalar(total / norm),
            &[pred],
            Box::new(move |ctx| vec![Some(grad.iter().map(|g| g * ctx.grad[0]).collect())]),
        ))
    }

    /// Mean binary cross-entropy between `σ(logits)` and soft targets in [0, 1].
    pub fn bce_with_logits(&mut self, logits: Var, target: &[f64]) -> Result<Var> {
        check_len(self, logits, target.len(), "BCE")?;
        let z = self.value(logits).data();
        let n = z.len().max(1) as f64;
        let mut total = 0.0;
        let mut grad = vec![0.0; z.len()];
        for (i, (&zi, &ti)) in z.iter().zip(target).enumerate() {
            total -= ti * log_sigmoid(zi) + (1.0 - ti) * log_sigmoid(-zi);
            grad[i] = (sigmoid(zi) - ti) / n;
        }
        Ok(self.push(
            Tensor::scalar(total / n),
            &[logits],
            Box::new(move |ctx| vec![Some(grad.iter().map(|g| g * ctx.grad[0]).collect())]),
        ))
    }
}
