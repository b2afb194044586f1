//! Central finite-difference gradient checks.

use crate::autograd::{Graph, Var};
use crate::tensor::Tensor;

/// Agreement between backpropagated and finite-difference gradients for one
/// input tensor.
#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub name: String,
    /// `‖g_analytic − g_numeric‖₂ / max(‖g_analytic‖₂, ‖g_numeric‖₂, 1e-8)`.
    pub relative_error: f64,
    pub max_abs_error: f64,
    pub analytic_norm: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors
            .iter()
            .max_by(|a, b| a.relative_error.total_cmp(&b.relative_error))
    }
}

/// Compares the gradient of the scalar built by `build` with respect to every
/// element of every input against `(f(x + h) − f(x − h)) / 2h`.
pub fn check_gradients<F>(inputs: &[(String, Tensor<f64>)], step: f64, build: F) -> GradCheckReport
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let eval = |values: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars);
        g.item(out)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| g.leaf(t.clone())).collect();
    let loss = build(&mut g, &vars);
    let grads = g.backward(loss);

    let mut values: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut report = GradCheckReport::default();
    for (i, (name, tensor)) in inputs.iter().enumerate() {
        let analytic = grads.wrt_or_zeros(vars[i], tensor.shape());
        let mut diff2 = 0.0;
        let mut a2 = 0.0;
        let mut n2 = 0.0;
        let mut max_abs: f64 = 0.0;
        for j in 0..tensor.len() {
            let original = values[i].data()[j];
            values[i].data_mut()[j] = original + step;
            let plus = eval(&values);
            values[i].data_mut()[j] = original - step;
            let minus = eval(&values);
            values[i].data_mut()[j] = original;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.data()[j];
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
            max_abs = max_abs.max((a - numeric).abs());
        }
        let denom = a2.sqrt().max(n2.sqrt()).max(1e-8);
        report.tensors.push(TensorCheck {
            name: name.clone(),
            relative_error: diff2.sqrt() / denom,
            max_abs_error: max_abs,
            analytic_norm: a2.sqrt(),
        });
    }
    report
}
