use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{max_relative_error, weighted_sum};
use super::*;
use crate::error::{Error, Result};

const SEEDS: u64 = 100;
const H: f64 = 1e-5;
const TOL: f64 = 1e-6;

fn rand_in(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape.to_vec(), -2.0, 2.0, rng)
}

/// Runs the finite-difference oracle for `SEEDS` random draws of the inputs.
fn check_op(name: &str, shapes: &[&[usize]], f: impl Fn(&[Var]) -> Result<Var>) {
    check_op_with(name, shapes, |s, rng| rand_in(s, rng), f)
}

fn check_op_with(
    name: &str,
    shapes: &[&[usize]],
    gen: impl Fn(&[usize], &mut ChaCha8Rng) -> Tensor,
    f: impl Fn(&[Var]) -> Result<Var>,
) {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Tensor> = shapes.iter().map(|s| gen(s, &mut rng)).collect();
        let err = max_relative_error(&inputs, |v| weighted_sum(&f(v)?, seed), H);
        assert!(err < TOL, "{name}: seed {seed} relative error {err:e}");
    }
}

#[test]
fn backward_of_sum_is_ones() {
    let tape = Tape::new();
    let x = tape.param(Tensor::from_vec(vec![1.0, -2.0, 3.0]));
    let g = x.sum().unwrap().backward().unwrap();
    assert_eq!(g.wrt(&x).data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn backward_of_square_sum() {
    let tape = Tape::new();
    let x = tape.param(Tensor::from_vec(vec![1.0, 2.0]));
    let g = x.mul(&x).unwrap().sum().unwrap().backward().unwrap();
    assert_eq!(g.wrt(&x).data(), &[2.0, 4.0]);
}

#[test]
fn backward_requires_tracked_scalar() {
    let tape = Tape::new();
    let x = tape.param(Tensor::ones(vec![2]));
    assert!(matches!(x.backward(), Err(Error::Contract(_))));
    let c = Var::constant(Tensor::scalar(1.0));
    assert!(matches!(c.backward(), Err(Error::Contract(_))));
}

#[test]
fn untouched_leaves_get_zero() {
    let tape = Tape::new();
    let x = tape.param(Tensor::ones(vec![2]));
    let unused = tape.param(Tensor::ones(vec![3]));
    let g = x.sum().unwrap().backward().unwrap();
    assert!(g.get(&unused).is_none());
    assert_eq!(g.wrt(&unused), Tensor::zeros(vec![3]));
}

#[test]
fn constants_never_touch_a_tape() {
    let tape = Tape::new();
    let a = Var::constant(Tensor::ones(vec![4]));
    let b = a.add(&a).unwrap().exp().unwrap().sum().unwrap();
    assert!(!b.is_tracked());
    assert_eq!(tape.len(), 0);
}

#[test]
fn mixing_tapes_is_rejected() {
    let (t1, t2) = (Tape::new(), Tape::new());
    let a = t1.param(Tensor::ones(vec![2]));
    let b = t2.param(Tensor::ones(vec![2]));
    assert!(matches!(a.add(&b), Err(Error::Contract(_))));
}

#[test]
fn tape_is_topologically_ordered() {
    let tape = Tape::new();
    let x = tape.param(Tensor::ones(vec![2]));
    let y = x.scale(2.0).unwrap().exp().unwrap();
    let _ = y.sum().unwrap();
    assert_eq!(tape.len(), 4);
}

#[test]
fn grad_elementwise() {
    check_op("add", &[&[3, 4], &[3, 4]], |v| v[0].add(&v[1]));
    check_op("sub", &[&[3, 4], &[3, 4]], |v| v[0].sub(&v[1]));
    check_op("mul", &[&[3, 4], &[3, 4]], |v| v[0].mul(&v[1]));
    check_op("mul_scalar", &[&[3, 4], &[]], |v| v[0].mul(&v[1]));
    check_op("add_scalar_lhs", &[&[], &[5]], |v| v[0].add(&v[1]));
    check_op("scale", &[&[6]], |v| v[0].scale(-0.7));
    check_op("add_scalar", &[&[6]], |v| v[0].add_scalar(1.0)?.mul(&v[0]));
    check_op("exp", &[&[6]], |v| v[0].exp());
    check_op_with(
        "log",
        &[&[6]],
        |s, rng| Tensor::uniform(s.to_vec(), 0.2, 2.0, rng),
        |v| v[0].log(),
    );
    check_op("gelu", &[&[7]], |v| v[0].gelu());
    check_op("silu", &[&[7]], |v| v[0].silu());
}

#[test]
fn grad_matmul_and_bias() {
    check_op("matmul", &[&[3, 5], &[5, 2]], |v| v[0].matmul(&v[1]));
    check_op("add_bias", &[&[4, 3], &[3]], |v| v[0].add_bias(&v[1]));
}

#[test]
fn grad_normalisation() {
    check_op("softmax_last", &[&[3, 5]], |v| v[0].softmax(1));
    check_op("softmax_first", &[&[4, 3]], |v| v[0].softmax(0));
    check_op("log_softmax_mid", &[&[2, 4, 3]], |v| v[0].log_softmax(1));
    check_op("layernorm", &[&[3, 6], &[6], &[6]], |v| v[0].layernorm(&v[1], &v[2], 1e-5));
}

#[test]
fn grad_reductions_and_views() {
    check_op("sum", &[&[3, 2]], |v| v[0].mul(&v[0])?.sum());
    check_op("mean", &[&[3, 2]], |v| v[0].mul(&v[0])?.mean());
    check_op("sum_axis", &[&[3, 4]], |v| v[0].sum_axis(0));
    check_op("mean_axis", &[&[3, 4]], |v| v[0].mean_axis(1));
    check_op("max_axis", &[&[5, 4]], |v| v[0].max_axis(0));
    check_op("reshape", &[&[3, 4]], |v| v[0].reshape(vec![2, 6]));
    check_op("permute", &[&[2, 3, 4]], |v| v[0].permute(&[1, 2, 0]));
    check_op("transpose", &[&[2, 5]], |v| v[0].transpose());
}

#[test]
fn grad_gather_and_broadcast() {
    check_op("gather", &[&[5, 3]], |v| v[0].gather_rows(&[4, 0, 4, 2]));
    check_op("broadcast_mul_rows", &[&[2, 3, 4], &[2, 4]], |v| v[0].broadcast_mul(&v[1]));
    check_op("broadcast_mul_scalar", &[&[2, 3, 4], &[2, 1]], |v| v[0].broadcast_mul(&v[1]));
    check_op("broadcast_add", &[&[2, 3, 4], &[2, 4]], |v| v[0].broadcast_add(&v[1]));
}

#[test]
fn grad_composite_chain() {
    check_op("mlp", &[&[4, 3], &[3, 5], &[5], &[5]], |v| {
        let h = v[0].matmul(&v[1])?.add_bias(&v[2])?;
        let h = h.layernorm(&v[3], &Var::constant(Tensor::zeros(vec![5])), 1e-5)?;
        h.gelu()?.softmax(1)
    });
}

#[test]
fn tape_replay_is_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let tape = Tape::new();
        let a = tape.param(Tensor::randn(vec![4, 6], &mut rng));
        let b = tape.param(Tensor::randn(vec![6, 3], &mut rng));
        let y = a.matmul(&b).unwrap().softmax(1).unwrap().log().unwrap().sum().unwrap();
        let g = y.backward().unwrap();
        (y.value().clone(), g.wrt(&a), g.wrt(&b))
    };
    let (y1, ga1, gb1) = run();
    let (y2, ga2, gb2) = run();
    assert_eq!(y1.data()[0].to_bits(), y2.data()[0].to_bits());
    assert!(ga1.data().iter().zip(ga2.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    assert!(gb1.data().iter().zip(gb2.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn softmax_matches_extended_precision_oracle() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::uniform(vec![6], -3.0, 3.0, &mut rng);
        let s = x.softmax(0).unwrap();
        // Two-term compensated sums stand in for extended precision.
        let exps: Vec<f64> = x.data().iter().map(|v| v.exp()).collect();
        let (mut total, mut comp) = (0.0f64, 0.0f64);
        for &e in &exps {
            let y = e - comp;
            let t = total + y;
            comp = (t - total) - y;
            total = t;
        }
        for (p, e) in s.data().iter().zip(&exps) {
            assert!((p - e / total).abs() < 1e-14);
        }
    }
}

fn small_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-2.0f64..2.0, rows * cols)
        .prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn softmax_rows_sum_to_one(x in small_matrix(3, 7)) {
        let s = x.softmax(1).unwrap();
        for row in s.data().chunks(7) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_is_permutation_equivariant(
        x in prop::collection::vec(-5.0f64..5.0, 8),
        perm in Just((0..8).collect::<Vec<usize>>()).prop_shuffle(),
    ) {
        let px: Vec<f64> = perm.iter().map(|&i| x[i]).collect();
        let s = Tensor::from_vec(x).softmax(0).unwrap();
        let ps = Tensor::from_vec(px).softmax(0).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            prop_assert!((ps.data()[k] - s.data()[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn matmul_is_associative(a in small_matrix(3, 4), b in small_matrix(4, 2), c in small_matrix(2, 5)) {
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        prop_assert!(left.max_abs_diff(&right) < 1e-10);
    }
}
