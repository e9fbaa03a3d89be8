//! Central finite-difference gradient checking used across the tape
//! and decoder tests.

use ndarray::Array2;

use super::{NodeId, Tape};

/// Build the graph twice per perturbed element and compare analytic
/// gradients against central differences.
///
/// `build` must be a pure function of the leaf values.
pub fn check_gradients<F>(inputs: &[Array2<f64>], build: F, step: f64, tol: f64)
where
    F: Fn(&mut Tape, &[NodeId]) -> NodeId,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|a| tape.leaf(a.clone())).collect();
    let loss = build(&mut tape, &ids);
    tape.backward(loss);
    let analytic: Vec<Array2<f64>> = ids
        .iter()
        .map(|id| {
            tape.grad(*id)
                .cloned()
                .unwrap_or_else(|| Array2::zeros(tape.value(*id).dim()))
        })
        .collect();

    let eval = |perturbed: &[Array2<f64>]| -> f64 {
        let mut t = Tape::new();
        let ids: Vec<NodeId> = perturbed.iter().map(|a| t.leaf(a.clone())).collect();
        let l = build(&mut t, &ids);
        t.value(l)[[0, 0]]
    };

    for (pi, input) in inputs.iter().enumerate() {
        for idx in 0..input.len() {
            let (r, c) = (idx / input.ncols(), idx % input.ncols());
            let mut plus: Vec<Array2<f64>> = inputs.to_vec();
            plus[pi][[r, c]] += step;
            let mut minus: Vec<Array2<f64>> = inputs.to_vec();
            minus[pi][[r, c]] -= step;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * step);
            let a = analytic[pi][[r, c]];
            let denom = 1.0_f64.max(a.abs()).max(numeric.abs());
            let rel = (a - numeric).abs() / denom;
            assert!(
                rel < tol,
                "gradient mismatch input {pi} at ({r},{c}): analytic {a}, numeric {numeric}, rel {rel:.3e}"
            );
        }
    }
}
