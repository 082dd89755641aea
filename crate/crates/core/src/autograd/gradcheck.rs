use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    /// (input index, element index) where the maximum occurred.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

/// Denominator floor for the relative error, so that near-zero gradients
/// are judged on absolute error.
pub const REL_FLOOR: f64 = 1e-3;

/// Checks every element of every input of `f` in 64-bit precision.
///
/// `f` must build a scalar from the given leaves; it is rebuilt from scratch
/// for each perturbed evaluation, so the numeric side only ever reads
/// forward values.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        if g.value(out).numel() != 1 {
            return Err(Error::Contract("gradient check needs a scalar".into()));
        }
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match g.grad(*v) {
            Some(gr) => gr.to_vec(),
            None => vec![0.0; inputs[k].numel()],
        };
        for e in 0..inputs[k].numel() {
            let base = inputs[k].data()[e];
            let mut perturbed = |delta: f64| -> Result<f64> {
                let mut data = inputs[k].data().to_vec();
                data[e] = base + delta;
                work[k] = Tensor::new(inputs[k].shape().to_vec(), data)?;
                let r = eval(&work);
                work[k] = inputs[k].clone();
                r
            };
            let numeric = (perturbed(h)? - perturbed(-h)?) / (2.0 * h);
            let a = analytic[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            if rel > report.max_rel_error || !rel.is_finite() {
                report = GradCheck {
                    max_rel_error: rel,
                    worst: (k, e),
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(report)
}
