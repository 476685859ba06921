//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates forward passes, so it is an
//! independent oracle for [`Graph::backward`].

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// A scalar-valued function of some tensors, buildable at any precision.
pub trait GraphFn {
    fn build<T: Element>(&self, g: &mut Graph<T>, inputs: &[Var]) -> Result<Var>;
}

/// Denominator floor for [`relative_error`]; gradients smaller than this
/// are compared on an absolute scale.
pub const MAGNITUDE_FLOOR: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR);
    (analytic - numeric).abs() / scale
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input, element, analytic, numeric)` at the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

fn evaluate<T: Element, F: GraphFn>(f: &F, inputs: &[Tensor<T>]) -> Result<T> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), false)).collect();
    let root = f.build(&mut g, &vars)?;
    g.value(root)
        .item()
        .ok_or_else(|| Error::invalid("gradcheck function must return a scalar"))
}

/// Analytic gradients of `f` at `inputs` via [`Graph::backward`].
pub fn analytic<T: Element, F: GraphFn>(f: &F, inputs: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let root = f.build(&mut g, &vars)?;
    let grads = g.backward(root)?;
    Ok(vars
        .iter()
        .map(|&v| grads.wrt(v).expect("leaf requires grad").clone())
        .collect())
}

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h`, in `f64`.
pub fn numeric<F: GraphFn>(f: &F, inputs: &[Tensor<f64>], h: f64) -> Result<Vec<Tensor<f64>>> {
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut grad = vec![0.0; inputs[i].numel()];
        for (j, gj) in grad.iter_mut().enumerate() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = evaluate(f, &work)?;
            work[i].data_mut()[j] = orig - h;
            let minus = evaluate(f, &work)?;
            work[i].data_mut()[j] = orig;
            *gj = (plus - minus) / (2.0 * h);
        }
        out.push(Tensor::new(inputs[i].shape().to_vec(), grad)?);
    }
    Ok(out)
}

fn compare(analytic: &[Tensor<f64>], numeric: &[Tensor<f64>]) -> GradCheckReport {
    let mut report = GradCheckReport::default();
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        for (j, (&av, &nv)) in a.data().iter().zip(n.data()).enumerate() {
            let err = relative_error(av, nv);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((i, j, av, nv));
            }
        }
    }
    report
}

/// Float64 analytic gradients against float64 central differences.
pub fn check<F: GraphFn>(f: &F, inputs: &[Tensor<f64>], h: f64) -> Result<GradCheckReport> {
    let a = analytic(f, inputs)?;
    let n = numeric(f, inputs, h)?;
    Ok(compare(&a, &n))
}

/// Float32 analytic gradients against float64 central differences of the
/// same function at the same (f32-representable) point.
pub fn check_f32<F: GraphFn>(f: &F, inputs: &[Tensor<f32>], h: f64) -> Result<GradCheckReport> {
    let a: Vec<Tensor<f64>> = analytic(f, inputs)?.iter().map(Tensor::cast).collect();
    let wide: Vec<Tensor<f64>> = inputs.iter().map(Tensor::cast).collect();
    let n = numeric(f, &wide, h)?;
    Ok(compare(&a, &n))
}

#[cfg(test)]
mod tests {
    use super::*;

    struct SquareSum;

    impl GraphFn for SquareSum {
        fn build<T: Element>(&self, g: &mut Graph<T>, x: &[Var]) -> Result<Var> {
            let sq = g.mul(x[0], x[0])?;
            Ok(g.sum(sq))
        }
    }

    #[test]
    fn numeric_matches_known_derivative() {
        let x = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let n = numeric(&SquareSum, std::slice::from_ref(&x), 1e-5).unwrap();
        for (d, v) in n[0].data().iter().zip(x.data()) {
            assert!((d - 2.0 * v).abs() < 1e-8);
        }
        assert!(check(&SquareSum, &[x], 1e-5).unwrap().passes(1e-8));
    }

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
        assert!((relative_error(1e-9, 0.0) - 1e-4).abs() < 1e-15);
    }
}
