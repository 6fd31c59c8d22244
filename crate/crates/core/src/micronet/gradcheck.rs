use super::layers::{self, Layer};
use super::{Matrix, Result, Rng};

/// Gradients smaller than this are compared on an absolute scale.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// `(tensor, element)` of the worst parameter.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error < tolerance
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "max relative error {:.3e} at tensor {} element {} (analytic {:.6e}, numeric {:.6e}) over {} parameters",
            self.max_relative_error, self.worst.0, self.worst.1, self.analytic, self.numeric, self.checked
        )
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Compares `analytic` against central differences of `loss`, perturbing every
/// tensor element exposed by `params_mut`.
pub fn compare_with_finite_differences<M: Clone>(
    model: &M,
    analytic: &[Vec<f64>],
    eps: f64,
    params_mut: impl Fn(&mut M) -> Vec<&mut [f64]>,
    loss: impl Fn(&M) -> f64,
) -> GradCheckReport {
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut probe = model.clone();
    for (t, grads) in analytic.iter().enumerate() {
        for (e, &a) in grads.iter().enumerate() {
            let original = params_mut(&mut probe)[t][e];
            params_mut(&mut probe)[t][e] = original + eps;
            let plus = loss(&probe);
            params_mut(&mut probe)[t][e] = original - eps;
            let minus = loss(&probe);
            params_mut(&mut probe)[t][e] = original;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_relative_error || report.checked == 1 {
                report.max_relative_error = err;
                report.worst = (t, e);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    report
}

/// Loss on the model output: returns the value and `dL/d output`.
pub type OutputLoss<'a> = dyn Fn(&Matrix) -> (f64, Matrix) + 'a;

/// Gradient check of a layer stack in evaluation mode.
pub fn grad_check(model: &[Layer], x: &Matrix, loss_fn: &OutputLoss<'_>, eps: f64) -> Result<GradCheckReport> {
    let mut rng = Rng::new(0);
    let trace = layers::forward(model, x, false, &mut rng)?;
    let (_, upstream) = loss_fn(&trace.output);
    let analytic = layers::backward(model, &trace, &upstream)?.flatten(model);
    let owned: Vec<Layer> = model.to_vec();
    Ok(compare_with_finite_differences(
        &owned,
        &analytic,
        eps,
        |m| layers::params_mut(m),
        |m| {
            let out = layers::infer(m, x).expect("shapes already validated");
            loss_fn(&out).0
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::micronet::layers::LinearLayer;
    use crate::micronet::loss::squared_error;

    fn mse(target: Matrix) -> impl Fn(&Matrix) -> (f64, Matrix) {
        move |out: &Matrix| {
            let lg = squared_error(out.data(), target.data()).unwrap();
            (lg.loss, Matrix::from_vec(out.rows(), out.cols(), lg.grad).unwrap())
        }
    }

    #[test]
    fn two_layer_relu_net_passes() {
        let mut rng = Rng::new(2024);
        let model = layers::two_layer(5, 7, 3, true, &mut rng);
        let rows: Vec<Vec<f64>> = (0..4).map(|_| (0..5).map(|_| rng.normal()).collect()).collect();
        let x = Matrix::from_rows(&rows).unwrap();
        let target = Matrix::from_vec(4, 3, (0..12).map(|_| rng.normal()).collect()).unwrap();
        let pre = layers::infer(&model[..1], &x).unwrap();
        assert!(pre.data().iter().all(|v| v.abs() > 1e-3), "kink too close");
        let report = grad_check(&model, &x, &mse(target), 1e-5).unwrap();
        assert!(report.passes(1e-4), "{report}");
        assert_eq!(report.checked, 5 * 7 + 7 + 7 * 3 + 3);
    }

    #[test]
    fn identity_layer_is_exact() {
        let mut layer = LinearLayer::zeros(3, 3, true);
        layer.weight = Matrix::identity(3);
        let model = vec![Layer::Linear(layer)];
        let x = Matrix::from_rows(&[vec![0.2, -0.7, 1.1]]).unwrap();
        let target = Matrix::row_vector(&[1.0, 0.0, -1.0]);
        let report = grad_check(&model, &x, &mse(target), 1e-5).unwrap();
        assert!(report.max_relative_error < 1e-8, "{report}");
    }

    #[test]
    fn reports_offending_parameter() {
        let mut rng = Rng::new(4);
        let model = layers::two_layer(2, 3, 1, true, &mut rng);
        let x = Matrix::row_vector(&[0.5, -0.25]);
        let trace = layers::forward(&model, &x, false, &mut rng).unwrap();
        let mut analytic = layers::backward(&model, &trace, &Matrix::row_vector(&[1.0]))
            .unwrap()
            .flatten(&model);
        analytic[2][1] += 10.0;
        let owned = model.clone();
        let report = compare_with_finite_differences(
            &owned,
            &analytic,
            1e-5,
            |m| layers::params_mut(m),
            |m| layers::infer(m, &x).unwrap().get(0, 0),
        );
        assert_eq!(report.worst, (2, 1));
        assert!(!report.passes(1e-4));
    }
}
