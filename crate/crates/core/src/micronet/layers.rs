use super::{Matrix, MicronetError, Result, Rng};

/// Fully connected layer computing `x * W + b` with `W` stored `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub has_bias: bool,
}

impl LinearLayer {
    /// Uniform Glorot initialization, zero bias.
    pub fn new(inputs: usize, outputs: usize, has_bias: bool, rng: &mut Rng) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let data = (0..inputs * outputs)
            .map(|_| rng.range(-limit, limit))
            .collect();
        Self {
            weight: Matrix::from_vec(inputs, outputs, data).expect("sized"),
            bias: vec![0.0; outputs],
            has_bias,
        }
    }

    pub fn zeros(inputs: usize, outputs: usize, has_bias: bool) -> Self {
        Self {
            weight: Matrix::zeros(inputs, outputs),
            bias: vec![0.0; outputs],
            has_bias,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.rows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut y = x.matmul(&self.weight).map_err(|_| {
            MicronetError::ShapeMismatch(format!(
                "linear {}->{} fed {} features",
                self.inputs(),
                self.outputs(),
                x.cols()
            ))
        })?;
        if self.has_bias {
            y.add_row_broadcast(&self.bias)?;
        }
        Ok(y)
    }

    /// Returns the parameter gradient and the gradient w.r.t. `x`.
    pub fn backward(&self, x: &Matrix, grad_out: &Matrix) -> Result<(LinearGrad, Matrix)> {
        if grad_out.shape() != (x.rows(), self.outputs()) {
            return Err(MicronetError::ShapeMismatch(format!(
                "linear backward: upstream {:?}, expected {:?}",
                grad_out.shape(),
                (x.rows(), self.outputs())
            )));
        }
        let weight = x.t_matmul(grad_out)?;
        let bias = if self.has_bias {
            grad_out.column_sums()
        } else {
            vec![0.0; self.outputs()]
        };
        let input = grad_out.matmul_t(&self.weight)?;
        Ok((LinearGrad { weight, bias }, input))
    }

    /// Tensors in checkpoint order: weight, then bias when enabled.
    pub fn params(&self) -> Vec<&[f64]> {
        let mut out = vec![self.weight.data()];
        if self.has_bias {
            out.push(&self.bias);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = vec![self.weight.data_mut()];
        if self.has_bias {
            out.push(&mut self.bias);
        }
        out
    }

    pub fn param_shapes(&self) -> Vec<(usize, usize)> {
        let mut out = vec![self.weight.shape()];
        if self.has_bias {
            out.push((1, self.outputs()));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrad {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl LinearGrad {
    pub fn zeros_like(layer: &LinearLayer) -> Self {
        Self {
            weight: Matrix::zeros(layer.inputs(), layer.outputs()),
            bias: vec![0.0; layer.outputs()],
        }
    }

    pub fn accumulate(&mut self, other: &LinearGrad) -> Result<()> {
        self.weight.add_assign(&other.weight)?;
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += b;
        }
        Ok(())
    }

    /// Flattened in the same order as [`LinearLayer::params`].
    pub fn flatten_into(&self, layer: &LinearLayer, out: &mut Vec<Vec<f64>>) {
        out.push(self.weight.data().to_vec());
        if layer.has_bias {
            out.push(self.bias.clone());
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Linear(LinearLayer),
    Relu,
    /// Inverted dropout with the given drop probability.
    Dropout(f64),
}

/// Cached values from [`forward`] needed by [`backward`].
#[derive(Debug, Clone)]
pub struct Trace {
    /// Input to every layer, in order.
    pub inputs: Vec<Matrix>,
    /// Multiplicative dropout masks, one per layer (`None` elsewhere).
    pub masks: Vec<Option<Vec<f64>>>,
    pub output: Matrix,
}

#[derive(Debug, Clone)]
pub struct Gradients {
    /// One entry per layer; `Some` for linear layers.
    pub layers: Vec<Option<LinearGrad>>,
    pub input: Matrix,
}

impl Gradients {
    pub fn flatten(&self, model: &[Layer]) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        for (layer, grad) in model.iter().zip(&self.layers) {
            if let (Layer::Linear(l), Some(g)) = (layer, grad) {
                g.flatten_into(l, &mut out);
            }
        }
        out
    }
}

pub fn forward(model: &[Layer], x: &Matrix, train_mode: bool, rng: &mut Rng) -> Result<Trace> {
    let mut inputs = Vec::with_capacity(model.len());
    let mut masks = Vec::with_capacity(model.len());
    let mut current = x.clone();
    for layer in model {
        let next = match layer {
            Layer::Linear(l) => {
                masks.push(None);
                l.forward(&current)?
            }
            Layer::Relu => {
                masks.push(None);
                current.map(|v| v.max(0.0))
            }
            Layer::Dropout(p) => {
                if train_mode && *p > 0.0 {
                    let keep = 1.0 - p;
                    let mask: Vec<f64> = (0..current.data().len())
                        .map(|_| if rng.uniform() < *p { 0.0 } else { 1.0 / keep })
                        .collect();
                    let mut out = current.clone();
                    for (v, m) in out.data_mut().iter_mut().zip(&mask) {
                        *v *= m;
                    }
                    masks.push(Some(mask));
                    out
                } else {
                    masks.push(None);
                    current.clone()
                }
            }
        };
        inputs.push(std::mem::replace(&mut current, next));
    }
    Ok(Trace {
        inputs,
        masks,
        output: current,
    })
}

/// Output-only forward pass in evaluation mode.
pub fn infer(model: &[Layer], x: &Matrix) -> Result<Matrix> {
    let mut current = x.clone();
    for layer in model {
        current = match layer {
            Layer::Linear(l) => l.forward(&current)?,
            Layer::Relu => current.map(|v| v.max(0.0)),
            Layer::Dropout(_) => current,
        };
    }
    Ok(current)
}

pub fn backward(model: &[Layer], trace: &Trace, grad_out: &Matrix) -> Result<Gradients> {
    if trace.inputs.len() != model.len() {
        return Err(MicronetError::ShapeMismatch(
            "trace does not belong to this model".into(),
        ));
    }
    if grad_out.shape() != trace.output.shape() {
        return Err(MicronetError::ShapeMismatch(format!(
            "upstream gradient {:?} vs output {:?}",
            grad_out.shape(),
            trace.output.shape()
        )));
    }
    let mut layers = vec![None; model.len()];
    let mut grad = grad_out.clone();
    for (i, layer) in model.iter().enumerate().rev() {
        let input = &trace.inputs[i];
        grad = match layer {
            Layer::Linear(l) => {
                let (g, dx) = l.backward(input, &grad)?;
                layers[i] = Some(g);
                dx
            }
            Layer::Relu => {
                let mut g = grad;
                for (gv, &x) in g.data_mut().iter_mut().zip(input.data()) {
                    if x <= 0.0 {
                        *gv = 0.0;
                    }
                }
                g
            }
            Layer::Dropout(_) => {
                let mut g = grad;
                if let Some(mask) = &trace.masks[i] {
                    for (gv, m) in g.data_mut().iter_mut().zip(mask) {
                        *gv *= m;
                    }
                }
                g
            }
        };
    }
    Ok(Gradients {
        layers,
        input: grad,
    })
}

pub fn params(model: &[Layer]) -> Vec<&[f64]> {
    model
        .iter()
        .flat_map(|l| match l {
            Layer::Linear(l) => l.params(),
            _ => Vec::new(),
        })
        .collect()
}

pub fn params_mut(model: &mut [Layer]) -> Vec<&mut [f64]> {
    model
        .iter_mut()
        .flat_map(|l| match l {
            Layer::Linear(l) => l.params_mut(),
            _ => Vec::new(),
        })
        .collect()
}

pub fn param_shapes(model: &[Layer]) -> Vec<(usize, usize)> {
    model
        .iter()
        .flat_map(|l| match l {
            Layer::Linear(l) => l.param_shapes(),
            _ => Vec::new(),
        })
        .collect()
}

/// `Linear(in, hidden) -> ReLU -> Linear(hidden, out)`.
pub fn two_layer(inputs: usize, hidden: usize, outputs: usize, bias: bool, rng: &mut Rng) -> Vec<Layer> {
    vec![
        Layer::Linear(LinearLayer::new(inputs, hidden, bias, rng)),
        Layer::Relu,
        Layer::Linear(LinearLayer::new(hidden, outputs, bias, rng)),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_linear_is_identity() {
        let mut layer = LinearLayer::zeros(3, 3, true);
        layer.weight = Matrix::identity(3);
        let x = Matrix::from_rows(&[vec![1.0, -2.0, 3.5]]).unwrap();
        let model = [Layer::Linear(layer)];
        let trace = forward(&model, &x, false, &mut Rng::new(0)).unwrap();
        assert_eq!(trace.output, x);
    }

    #[test]
    fn relu_sign_case() {
        let x = Matrix::row_vector(&[1.0, -1.0]);
        let out = infer(&[Layer::Relu], &x).unwrap();
        assert_eq!(out.data(), &[1.0, 0.0]);
    }

    #[test]
    fn eval_mode_dropout_is_identity() {
        let mut rng = Rng::new(5);
        let model = vec![
            Layer::Linear(LinearLayer::new(4, 6, true, &mut rng)),
            Layer::Relu,
            Layer::Dropout(0.5),
            Layer::Linear(LinearLayer::new(6, 2, true, &mut rng)),
        ];
        let x = Matrix::from_rows(&[vec![0.1, 0.2, -0.3, 0.4], vec![1.0, 0.0, 0.5, -1.0]]).unwrap();
        let a = forward(&model, &x, false, &mut Rng::new(1)).unwrap();
        let b = forward(&model, &x, false, &mut Rng::new(2)).unwrap();
        assert_eq!(a.output, b.output);
        assert_eq!(a.output, infer(&model, &x).unwrap());
    }

    #[test]
    fn dropout_preserves_expectation() {
        let model = [Layer::Dropout(0.1)];
        let x = Matrix::from_vec(1, 1000, vec![2.0; 1000]).unwrap();
        let mut rng = Rng::new(9);
        let mut total = 0.0;
        let passes = 100;
        for _ in 0..passes {
            let t = forward(&model, &x, true, &mut rng).unwrap();
            total += t.output.data().iter().sum::<f64>();
        }
        let mean = total / (passes * 1000) as f64;
        assert!((mean - 2.0).abs() / 2.0 < 0.01, "{mean}");
    }

    #[test]
    fn zero_upstream_zero_gradients() {
        let mut rng = Rng::new(11);
        let model = two_layer(3, 5, 2, true, &mut rng);
        let x = Matrix::from_rows(&[vec![0.3, -0.2, 0.9]]).unwrap();
        let trace = forward(&model, &x, true, &mut rng).unwrap();
        let g = backward(&model, &trace, &Matrix::zeros(1, 2)).unwrap();
        assert!(g.flatten(&model).iter().flatten().all(|&v| v == 0.0));
        assert!(g.input.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_is_linear_in_upstream() {
        let mut rng = Rng::new(12);
        let model = two_layer(3, 5, 2, true, &mut rng);
        let x = Matrix::from_rows(&[vec![0.3, -0.2, 0.9], vec![-1.0, 0.4, 0.1]]).unwrap();
        let trace = forward(&model, &x, false, &mut rng).unwrap();
        let up = Matrix::from_rows(&[vec![0.5, -1.5], vec![2.0, 0.25]]).unwrap();
        let mut up2 = up.clone();
        up2.scale(2.0);
        let g1 = backward(&model, &trace, &up).unwrap().flatten(&model);
        let g2 = backward(&model, &trace, &up2).unwrap().flatten(&model);
        for (a, b) in g1.iter().flatten().zip(g2.iter().flatten()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn shape_mismatch_reported() {
        let mut rng = Rng::new(1);
        let model = two_layer(3, 4, 2, true, &mut rng);
        let x = Matrix::zeros(2, 5);
        assert!(matches!(
            forward(&model, &x, false, &mut rng),
            Err(MicronetError::ShapeMismatch(_))
        ));
    }
}
