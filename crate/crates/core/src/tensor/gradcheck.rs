//! Finite-difference gradient checking.
//!
//! Central differences with step `h` on each leaf element, compared against
//! the tape gradient as a maximum relative error. This is the independent
//! oracle for everything the tape computes, so it never calls `backward`.

use crate::parallel::par_map;
use crate::scalar::Scalar;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Relative-error floor: elements whose gradient magnitude sits below this
/// are compared on an absolute scale instead, keeping finite-difference
/// round-off from dominating near-zero gradients.
const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct LeafReport {
    pub name: String,
    pub elements: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub leaves: Vec<LeafReport>,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err < self.tolerance
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Checks tape gradients against central finite differences.
///
/// `leaves` carries the named leaf values. `grads` evaluates the graph once
/// and returns (loss, per-leaf gradients in the same order); `loss` evaluates
/// the value only and is called twice per element, with workers operating on
/// private copies of the leaves.
pub fn check_gradients<T, G, L>(
    leaves: &[(String, Vec<T>)],
    grads: G,
    loss: L,
    h: f64,
    tolerance: f64,
    jobs: usize,
) -> GradCheckReport
where
    T: Scalar,
    G: Fn(&[(String, Vec<T>)]) -> (T, Vec<Vec<T>>),
    L: Fn(&[(String, Vec<T>)]) -> T + Sync + Send,
{
    let (_, analytic) = grads(leaves);
    assert_eq!(analytic.len(), leaves.len(), "gradient count must match leaf count");

    // Flatten (leaf, element) pairs and chunk them across workers; each
    // worker perturbs its private copy in place.
    let mut coords = Vec::new();
    for (li, (_, data)) in leaves.iter().enumerate() {
        for ei in 0..data.len() {
            coords.push((li, ei));
        }
    }
    let chunk = coords.len().div_ceil(jobs.max(1)).max(1);
    let chunks: Vec<Vec<(usize, usize)>> = coords.chunks(chunk).map(|c| c.to_vec()).collect();
    let step = T::from_f64(h);

    let results: Vec<Vec<(usize, usize, f64)>> = par_map(chunks, jobs, |chunk| {
        let mut local: Vec<(String, Vec<T>)> = leaves.to_vec();
        let mut out = Vec::with_capacity(chunk.len());
        for (li, ei) in chunk {
            let orig = local[li].1[ei];
            local[li].1[ei] = orig + step;
            let up = loss(&local).to_f64();
            local[li].1[ei] = orig - step;
            let down = loss(&local).to_f64();
            local[li].1[ei] = orig;
            let fd = (up - down) / (2.0 * h);
            out.push((li, ei, fd));
        }
        out
    });

    let mut reports: Vec<LeafReport> = leaves
        .iter()
        .map(|(name, data)| LeafReport {
            name: name.clone(),
            elements: data.len(),
            max_rel_err: 0.0,
            worst_index: 0,
        })
        .collect();
    for (li, ei, fd) in results.into_iter().flatten() {
        let tape_g = analytic[li][ei].to_f64();
        let err = rel_err(tape_g, fd);
        if err > reports[li].max_rel_err || !err.is_finite() {
            reports[li].max_rel_err = err;
            reports[li].worst_index = ei;
        }
    }
    let max_rel_err = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    GradCheckReport { leaves: reports, max_rel_err, tolerance }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tape, Tensor};

    #[test]
    fn affine_function_is_exact() {
        // loss = <a, c> + 1 is affine, central differences are exact.
        let leaves = vec![("a".to_string(), vec![0.5, -1.5, 2.0])];
        let coeff = [3.0, -2.0, 0.25];
        let eval = |ls: &[(String, Vec<f64>)]| {
            ls[0].1.iter().zip(coeff).map(|(x, c)| x * c).sum::<f64>() + 1.0
        };
        let report = check_gradients(
            &leaves,
            |ls| (eval(ls), vec![coeff.to_vec()]),
            eval,
            DEFAULT_STEP,
            1e-9,
            1,
        );
        assert!(report.passed(), "max err {}", report.max_rel_err);
    }

    #[test]
    fn catches_a_wrong_gradient() {
        let leaves = vec![("a".to_string(), vec![1.0, 2.0])];
        let eval = |ls: &[(String, Vec<f64>)]| ls[0].1.iter().map(|x| x * x).sum::<f64>();
        let report = check_gradients(
            &leaves,
            // wrong: claims gradient is x, truth is 2x
            |ls| (eval(ls), vec![ls[0].1.clone()]),
            eval,
            DEFAULT_STEP,
            DEFAULT_TOLERANCE,
            1,
        );
        assert!(!report.passed());
    }

    #[test]
    fn layernorm_only_graph_is_tight() {
        let dim = 6;
        let x: Vec<f64> = (0..dim).map(|i| (i as f64 * 1.3).sin()).collect();
        let scale: Vec<f64> = (0..dim).map(|i| 1.0 + 0.1 * i as f64).collect();
        let leaves = vec![("x".to_string(), x), ("scale".to_string(), scale)];
        let run = |ls: &[(String, Vec<f64>)], want_grads: bool| {
            let mut tape = Tape::new();
            let mut xt = Tensor::new(vec![1, dim], ls[0].1.clone()).unwrap();
            xt.requires_grad = true;
            let mut st = Tensor::new(vec![dim], ls[1].1.clone()).unwrap();
            st.requires_grad = true;
            let x = tape.leaf(&xt);
            let s = tape.leaf(&st);
            let y = tape.layernorm(x, s, 1e-6, true).unwrap();
            let sq = tape.mul(y, y).unwrap();
            let loss = tape.sum(sq);
            let value = tape.value(loss)[0];
            if !want_grads {
                return (value, Vec::new());
            }
            let mut grads = tape.backward(loss);
            (value, vec![grads.take(x).unwrap(), grads.take(s).unwrap()])
        };
        let report = check_gradients(
            &leaves,
            |ls| run(ls, true),
            |ls| run(ls, false).0,
            DEFAULT_STEP,
            1e-6,
            1,
        );
        assert!(report.passed(), "max err {}", report.max_rel_err);
    }
}
