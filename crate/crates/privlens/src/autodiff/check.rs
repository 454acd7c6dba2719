//! Validation harnesses: central-difference gradient checks and randomized
//! adjoint dot-product tests.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use super::{NodeId, Tape};
use crate::tensor::Tensor;
use crate::{Error, Result};

fn random_tensor(dims: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = dims.iter().product();
    Tensor::from_vec(dims, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .expect("consistent size")
}

/// Randomized adjoint test for a recorded (sub)graph `x -> build -> y`:
/// returns the relative discrepancy between `<J v, w>` (directional
/// derivative by central differences) and `<v, J^T w>` (one backward pass)
/// for random `v`, `w`.
pub fn adjoint_dot_error<F>(build: F, x: &Tensor, seed: u64, eps: f64) -> f64
where
    F: Fn(&mut Tape, NodeId) -> NodeId,
{
    let mut tape = Tape::new();
    let xid = tape.leaf(x.clone());
    let y = build(&mut tape, xid);
    let y_dims = tape.value(y).dims().to_vec();
    let w = random_tensor(&y_dims, seed);
    let v = random_tensor(x.dims(), seed + 1);
    tape.backward_multi(&[(y, w.clone())])
        .expect("seeded backward");
    let lhs = tape
        .grad(xid)
        .expect("leaf reachable from output")
        .dot(&v);

    let h = |t: f64| -> f64 {
        let mut probe = x.clone();
        probe.axpy_in_place(t, &v);
        let mut tape = Tape::new();
        let xid = tape.leaf(probe);
        let y = build(&mut tape, xid);
        tape.value(y).dot(&w)
    };
    let rhs = (h(eps) - h(-eps)) / (2.0 * eps);
    (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1.0)
}

/// Compares an analytic gradient against central finite differences of a
/// deterministic scalar function, coordinate by coordinate, and returns the
/// worst relative error. Rejects functions that do not reproduce their own
/// value bit for bit on repeated evaluation.
pub fn grad_check<F>(f: F, x: &[f64], analytic: &[f64], eps: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if analytic.len() != x.len() {
        return Err(Error::shape("gradient length does not match input"));
    }
    if !(eps > 0.0) {
        return Err(Error::invalid("eps must be positive"));
    }
    let v1 = f(x)?;
    let v2 = f(x)?;
    if v1.to_bits() != v2.to_bits() {
        return Err(Error::invalid(
            "non-deterministic function rejected by grad_check",
        ));
    }
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let fp = f(&probe)?;
        probe[i] = x[i] - eps;
        let fm = f(&probe)?;
        probe[i] = x[i];
        let fd = (fp - fm) / (2.0 * eps);
        let denom = analytic[i].abs().max(fd.abs()).max(1e-6);
        worst = worst.max((analytic[i] - fd).abs() / denom);
    }
    Ok(worst)
}
