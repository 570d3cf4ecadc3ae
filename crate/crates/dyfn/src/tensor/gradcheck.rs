//! Central finite-difference checking of tape gradients.
//!
//! Used both by the test suites and by the `grad_check` training diagnostic.

use super::tape::{GradTape, Var};
use super::Tensor;

#[derive(Debug, Clone)]
pub struct LeafReport {
    pub index: usize,
    pub max_rel_err: f64,
    pub worst_element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Worst relative error across every element of every leaf.
    pub max_rel_err: f64,
    pub per_leaf: Vec<LeafReport>,
    /// Function value at the unperturbed point.
    pub value: f64,
}

/// Compare tape gradients of `f` against central finite differences with
/// step `h` on every element of every leaf.
///
/// The relative error denominator is floored at `1e-6 * (1 + |f|)`, which
/// absorbs the cancellation noise of the differences themselves; exact-zero
/// gradients compare as zero error.
pub fn check_gradients<F>(leaves: &[Tensor], f: F, h: f64) -> GradCheckReport
where
    F: for<'t> Fn(&'t GradTape, &[Var<'t>]) -> Var<'t>,
{
    let eval = |points: &[Tensor]| -> f64 {
        let tape = GradTape::new();
        let vars: Vec<Var> = points.iter().map(|t| tape.leaf(t.clone())).collect();
        f(&tape, &vars).value().item()
    };

    let value = eval(leaves);
    let analytic: Vec<Tensor> = {
        let tape = GradTape::new();
        let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&tape, &vars);
        let grads = tape.backward(&out);
        vars.iter().map(|v| grads.wrt_or_zeros(v)).collect()
    };

    let floor = 1e-6 * (1.0 + value.abs());
    let mut per_leaf = Vec::with_capacity(leaves.len());
    let mut max_rel = 0.0f64;
    for (li, leaf) in leaves.iter().enumerate() {
        let mut report = LeafReport {
            index: li,
            max_rel_err: 0.0,
            worst_element: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for ei in 0..leaf.len() {
            let mut plus = leaves.to_vec();
            let mut minus = leaves.to_vec();
            plus[li] = bump(leaf, ei, h);
            minus[li] = bump(leaf, ei, -h);
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic[li].data()[ei];
            let denom = a.abs().max(numeric.abs()).max(floor);
            let rel = (a - numeric).abs() / denom;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_element = ei;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
        max_rel = max_rel.max(report.max_rel_err);
        per_leaf.push(report);
    }
    GradCheckReport {
        max_rel_err: max_rel,
        per_leaf,
        value,
    }
}

fn bump(t: &Tensor, index: usize, delta: f64) -> Tensor {
    let mut data = t.data().to_vec();
    data[index] += delta;
    Tensor::new(t.shape().to_vec(), data).unwrap()
}
