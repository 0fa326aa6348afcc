//! Central finite-difference oracle shared by the unit tests.

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Largest norm-wise relative error between the tape gradient of `f` and a
/// central difference with step `h`, taken over every input.
pub(crate) fn max_relative_error(
    inputs: &[Tensor],
    f: impl Fn(&[Var]) -> Result<Var>,
    h: f64,
) -> f64 {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let grads = f(&vars).unwrap().backward().unwrap();

    let eval = |xs: &[Tensor]| -> f64 {
        let consts: Vec<Var> = xs.iter().map(|t| Var::constant(t.clone())).collect();
        f(&consts).unwrap().value().item().unwrap()
    };

    let mut worst: f64 = 0.0;
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(var);
        let mut numeric = vec![0.0; inputs[i].len()];
        for j in 0..inputs[i].len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            numeric[j] = (eval(&plus) - eval(&minus)) / (2.0 * h);
        }
        let diff: f64 = analytic
            .data()
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n) * (a - n))
            .sum::<f64>()
            .sqrt();
        let scale = analytic
            .sum_squares()
            .sqrt()
            .max(numeric.iter().map(|n| n * n).sum::<f64>().sqrt())
            .max(1e-8);
        worst = worst.max(diff / scale);
    }
    worst
}

/// `Σ w ⊙ y` with fixed pseudo-random weights so that every output element
/// contributes to the checked gradient.
pub(crate) fn weighted_sum(y: &Var, seed: u64) -> Result<Var> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let w = Tensor::uniform(y.shape().to_vec(), -1.0, 1.0, &mut rng);
    y.mul(&Var::constant(w))?.sum()
}
