use super::{MicronetError, Result};

/// Loss value together with its gradient w.r.t. the prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// Mean-reduced smooth L1 (Huber with transition at `beta`).
pub fn smooth_l1(pred: &[f64], target: &[f64], beta: f64) -> Result<LossGrad> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(MicronetError::ShapeMismatch(format!(
            "smooth_l1 on {} predictions vs {} targets",
            pred.len(),
            target.len()
        )));
    }
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = p - t;
            if d.abs() < beta {
                loss += 0.5 * d * d / beta;
                d / beta / n
            } else {
                loss += d.abs() - 0.5 * beta;
                d.signum() / n
            }
        })
        .collect();
    Ok(LossGrad {
        loss: loss / n,
        grad,
    })
}

/// Mean-reduced absolute error.
pub fn l1(pred: &[f64], target: &[f64]) -> Result<LossGrad> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(MicronetError::ShapeMismatch(format!(
            "l1 on {} predictions vs {} targets",
            pred.len(),
            target.len()
        )));
    }
    let n = pred.len() as f64;
    let loss = pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / n;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = p - t;
            if d == 0.0 {
                0.0
            } else {
                d.signum() / n
            }
        })
        .collect();
    Ok(LossGrad { loss, grad })
}

/// Half mean squared error: `0.5 * mean((p - t)^2)`.
pub fn squared_error(pred: &[f64], target: &[f64]) -> Result<LossGrad> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(MicronetError::ShapeMismatch("squared_error".into()));
    }
    let n = pred.len() as f64;
    let loss = pred.iter().zip(target).map(|(p, t)| 0.5 * (p - t).powi(2)).sum::<f64>() / n;
    let grad = pred.iter().zip(target).map(|(p, t)| (p - t) / n).collect();
    Ok(LossGrad { loss, grad })
}

/// Numerically stable log-softmax.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

/// Softmax focal loss `-alpha * (1 - p_t)^gamma * ln p_t`.
pub fn focal_loss(logits: &[f64], class_index: usize, alpha: f64, gamma: f64) -> Result<LossGrad> {
    if class_index >= logits.len() {
        return Err(MicronetError::IndexOutOfRange {
            index: class_index,
            len: logits.len(),
        });
    }
    let log_p = log_softmax(logits);
    let probs: Vec<f64> = log_p.iter().map(|lp| lp.exp()).collect();
    let log_pt = log_p[class_index];
    let pt = probs[class_index];
    let one_minus = (1.0 - pt).max(0.0);
    let loss = -alpha * one_minus.powf(gamma) * log_pt;
    // dL/dz_j = dL/dp_t * p_t * (delta_tj - p_j); fold p_t in to avoid 1/p_t.
    let dl_dpt_times_pt = if gamma == 0.0 {
        -alpha
    } else {
        alpha * (gamma * one_minus.powf(gamma - 1.0) * pt * log_pt - one_minus.powf(gamma))
    };
    let grad = probs
        .iter()
        .enumerate()
        .map(|(j, &pj)| {
            let delta = if j == class_index { 1.0 } else { 0.0 };
            dl_dpt_times_pt * (delta - pj)
        })
        .collect();
    Ok(LossGrad { loss, grad })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numeric_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut plus = x.to_vec();
                let mut minus = x.to_vec();
                plus[i] += eps;
                minus[i] -= eps;
                (f(&plus) - f(&minus)) / (2.0 * eps)
            })
            .collect()
    }

    #[test]
    fn smooth_l1_examples() {
        assert_eq!(smooth_l1(&[1.0, 2.0], &[1.0, 2.0], 1.0).unwrap().loss, 0.0);
        assert_eq!(smooth_l1(&[0.5], &[0.0], 1.0).unwrap().loss, 0.125);
        assert_eq!(smooth_l1(&[2.0], &[0.0], 1.0).unwrap().loss, 1.5);
        assert!(smooth_l1(&[2.0], &[0.0, 1.0], 1.0).is_err());
    }

    #[test]
    fn focal_uniform_logits() {
        let (alpha, gamma) = (0.25, 2.0);
        let lg = focal_loss(&[0.3, 0.3, 0.3], 1, alpha, gamma).unwrap();
        let expected = -alpha * (1.0f64 - 1.0 / 3.0).powf(gamma) * (1.0f64 / 3.0).ln();
        assert!((lg.loss - expected).abs() < 1e-15);
    }

    #[test]
    fn focal_saturates_for_confident_correct() {
        let lg = focal_loss(&[60.0, -60.0, -60.0], 0, 0.25, 2.0).unwrap();
        assert!(lg.loss < 1e-40);
        assert!(matches!(
            focal_loss(&[0.0, 0.0], 2, 0.25, 2.0),
            Err(MicronetError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn focal_gradient_matches_finite_differences() {
        let logits = [0.7, -1.2, 0.1, 2.3];
        for class in 0..4 {
            let analytic = focal_loss(&logits, class, 0.25, 2.0).unwrap().grad;
            let numeric = numeric_grad(
                |z| focal_loss(z, class, 0.25, 2.0).unwrap().loss,
                &logits,
                1e-6,
            );
            for (a, n) in analytic.iter().zip(&numeric) {
                assert!((a - n).abs() / a.abs().max(n.abs()).max(1e-8) < 1e-6, "{a} vs {n}");
            }
        }
    }

    #[test]
    fn smooth_l1_gradient_matches_finite_differences() {
        let pred = [0.2, -1.7, 3.0, 0.05];
        let target = [0.0, 0.0, 1.0, 0.6];
        let analytic = smooth_l1(&pred, &target, 1.0).unwrap().grad;
        let numeric = numeric_grad(|p| smooth_l1(p, &target, 1.0).unwrap().loss, &pred, 1e-6);
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!((a - n).abs() < 1e-8);
        }
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[1000.0, -5.0, 3.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|v| v.is_finite()));
    }
}
