use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn eval1(f: impl FnOnce(&mut Tape, Var) -> crate::Result<Var>, x: Tensor) -> Vec<f64> {
    let mut tape = Tape::new();
    let v = tape.constant(x);
    let out = f(&mut tape, v).unwrap();
    tape.value(out).data().to_vec()
}

#[test]
fn primitive_examples() {
    assert_eq!(eval1(|t, x| t.relu(x), Tensor::scalar(-1.5)), [0.0]);
    assert_eq!(eval1(|t, x| t.sigmoid(x), Tensor::scalar(0.0)), [0.5]);
    let sm = eval1(|t, x| t.softmax(x), Tensor::vector(&[0.0, 0.0, 0.0]));
    for p in sm {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }

    let mut tape = Tape::new();
    let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let b = tape.constant(t(&[2, 1], &[1.0, 1.0]));
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.shape(c), &[2, 1]);
    assert_eq!(tape.value(c).data(), &[3.0, 7.0]);
}

#[test]
fn one_by_one_kernel_scales_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[2, 3, 5, 4], &mut rng);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    // 3 -> 3 channels, identity times two
    let mut k = vec![0.0; 9];
    for c in 0..3 {
        k[c * 3 + c] = 2.0;
    }
    let w = tape.constant(t(&[3, 3, 1, 1], &k));
    let y = tape.conv2d(xv, w, None, 1, 0).unwrap();
    assert_eq!(tape.shape(y), x.shape());
    for (a, b) in tape.value(y).data().iter().zip(x.data()) {
        assert_eq!(*a, 2.0 * b);
    }
}

#[test]
fn conv_rejects_oversized_kernel() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros([1, 1, 2, 2]));
    let w = tape.constant(Tensor::zeros([1, 1, 3, 3]));
    assert!(matches!(tape.conv2d(x, w, None, 1, 0), Err(Error::Shape { .. })));
    assert!(tape.conv2d(x, w, None, 1, 1).is_ok());
}

#[test]
fn shape_errors_and_unknown_primitive() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros([2, 3]));
    let b = tape.constant(Tensor::zeros([2, 3]));
    assert!(matches!(tape.matmul(a, b), Err(Error::Shape { .. })));
    assert!(matches!(
        tape.eval_primitive("fft", &[a], &Attrs::default()),
        Err(Error::UnsupportedOp(_))
    ));
    let r = tape.eval_primitive("add", &[a, b], &Attrs::default()).unwrap();
    assert_eq!(tape.shape(r[0]), &[2, 3]);
}

#[test]
fn power_rule_and_sigmoid_slope() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(3.0), true);
    let y = tape.mul(x, x).unwrap();
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[6.0]);

    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(0.0), true);
    let y = tape.sigmoid(x).unwrap();
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[0.25]);
}

#[test]
fn backward_contract_errors() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros([3]), true);
    let y = tape.relu(x).unwrap();
    assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    let s = tape.sum(y).unwrap();
    tape.backward(s).unwrap();
    assert!(tape.is_frozen());
    assert!(matches!(tape.backward(s), Err(Error::State(_))));
    assert!(matches!(tape.relu(x), Err(Error::State(_))));
}

#[test]
fn add_passes_gradient_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut tape = Tape::new();
    let a = tape.leaf(random(&[4], &mut rng), true);
    let b = tape.leaf(random(&[4], &mut rng), true);
    let w = tape.constant(Tensor::vector(&[1.0, -2.0, 0.5, 3.0]));
    let s = tape.add(a, b).unwrap();
    let m = tape.mul(s, w).unwrap();
    let out = tape.sum(m).unwrap();
    tape.backward(out).unwrap();
    assert_eq!(tape.grad(a).unwrap().data(), &[1.0, -2.0, 0.5, 3.0]);
    assert_eq!(tape.grad(b).unwrap().data(), &[1.0, -2.0, 0.5, 3.0]);
}

#[test]
fn constants_get_no_gradient() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::scalar(2.0));
    let b = tape.leaf(Tensor::scalar(5.0), true);
    let y = tape.mul(a, b).unwrap();
    tape.backward(y).unwrap();
    assert!(tape.grad(a).is_none());
    assert_eq!(tape.grad(b).unwrap().data(), &[2.0]);
}

/// Reduce any output to a scalar with fixed random weights so every output
/// element contributes a distinct amount to the gradient.
fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> crate::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let shape = tape.shape(y).to_vec();
    let w = tape.constant(random(&shape, &mut rng));
    let m = tape.mul(y, w)?;
    tape.sum(m)
}

type Builder = fn(&mut Tape, &[Var]) -> crate::Result<Var>;

fn primitive_cases() -> Vec<(&'static str, Vec<Vec<usize>>, Builder)> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], |t, p| t.matmul(p[0], p[1])),
        ("bmm", vec![vec![2, 3, 4], vec![2, 4, 2]], |t, p| t.bmm(p[0], p[1])),
        ("conv2d", vec![vec![2, 2, 7, 6], vec![3, 2, 3, 3], vec![3]], |t, p| {
            t.conv2d(p[0], p[1], Some(p[2]), 2, 1)
        }),
        ("relu", vec![vec![3, 5]], |t, p| t.relu(p[0])),
        ("sigmoid", vec![vec![3, 5]], |t, p| t.sigmoid(p[0])),
        ("tanh", vec![vec![3, 5]], |t, p| t.tanh(p[0])),
        ("softmax", vec![vec![3, 5]], |t, p| t.softmax(p[0])),
        ("log_softmax", vec![vec![3, 5]], |t, p| t.log_softmax(p[0])),
        ("concat", vec![vec![2, 3, 2], vec![2, 1, 2]], |t, p| t.concat(&[p[0], p[1]], 1)),
        ("split", vec![vec![2, 5]], |t, p| {
            let parts = t.split(p[0], 1, &[2, 3])?;
            let a = t.sum(parts[0])?;
            let b = t.scale(parts[1], 3.0)?;
            let b = t.sum(b)?;
            t.add(a, b)
        }),
        ("add", vec![vec![4], vec![4]], |t, p| t.add(p[0], p[1])),
        ("sub", vec![vec![4], vec![4]], |t, p| t.sub(p[0], p[1])),
        ("mul", vec![vec![4], vec![4]], |t, p| t.mul(p[0], p[1])),
        ("minimum", vec![vec![6], vec![6]], |t, p| t.minimum(p[0], p[1])),
        ("scale", vec![vec![4]], |t, p| t.scale(p[0], -1.7)),
        ("add_scalar", vec![vec![4]], |t, p| t.add_scalar(p[0], 0.3)),
        ("add_bias", vec![vec![3, 4], vec![4]], |t, p| t.add_bias(p[0], p[1])),
        ("mean", vec![vec![3, 4]], |t, p| t.mean(p[0])),
        ("sum_last", vec![vec![3, 4]], |t, p| t.sum_last(p[0])),
        ("exp", vec![vec![5]], |t, p| t.exp(p[0])),
        ("log", vec![vec![5]], |t, p| {
            let e = t.exp(p[0])?;
            let s = t.add_scalar(e, 0.5)?;
            t.log(s)
        }),
        ("clamp", vec![vec![6]], |t, p| t.clamp(p[0], -0.5, 0.5)),
        ("permute", vec![vec![2, 3, 4]], |t, p| t.permute(p[0], &[2, 0, 1])),
        ("reshape", vec![vec![2, 6]], |t, p| t.reshape(p[0], &[3, 4])),
    ]
}

#[test]
fn every_primitive_matches_central_differences() {
    let cfg = GradCheckConfig::default();
    for (name, shapes, build) in primitive_cases() {
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed * 31 + name.len() as u64);
            let params: Vec<Tensor> = shapes.iter().map(|s| random(s, &mut rng)).collect();
            let report = check_gradients(
                |tape: &mut Tape, p: &[Var]| {
                    let y = build(tape, p)?;
                    weighted_sum(tape, y, seed)
                },
                &params,
                cfg,
            )
            .unwrap();
            assert!(
                report.passed(),
                "{name} seed {seed}: worst relative error {}",
                report.worst()
            );
        }
    }
}

#[test]
fn linear_layer_passes() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&[5, 3], &mut rng);
    let params = vec![random(&[3, 2], &mut rng), random(&[2], &mut rng)];
    let report = check_gradients(
        |tape: &mut Tape, p: &[Var]| {
            let xv = tape.constant(x.clone());
            let h = tape.matmul(xv, p[0])?;
            let y = tape.add_bias(h, p[1])?;
            let y = tape.tanh(y)?;
            tape.sum(y)
        },
        &params,
        GradCheckConfig::default(),
    )
    .unwrap();
    assert!(report.passed());
    assert_eq!(report.params.len(), 2);
}

#[test]
fn scaled_sigmoid_backward_is_caught() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let params = vec![random(&[6], &mut rng)];
    let report = check_gradients(
        |tape: &mut Tape, p: &[Var]| {
            tape.inject_backward_fault(OpKind::Sigmoid, 1.01);
            let y = tape.sigmoid(p[0])?;
            tape.sum(y)
        },
        &params,
        GradCheckConfig::default(),
    )
    .unwrap();
    assert!(!report.passed());
    assert!(report.worst() > 5e-3);
}

#[test]
fn zero_parameters_pass_vacuously() {
    let report = check_gradients(
        |tape: &mut Tape, _p: &[Var]| {
            let c = tape.constant(Tensor::scalar(1.0));
            Ok(c)
        },
        &[],
        GradCheckConfig::default(),
    )
    .unwrap();
    assert!(report.passed());
    assert!(report.params.is_empty());
}

#[test]
fn non_finite_function_is_an_oracle_error() {
    let params = vec![Tensor::vector(&[0.0, 1.0])];
    let err = check_gradients(
        |tape: &mut Tape, p: &[Var]| {
            let inf = tape.constant(Tensor::scalar(f64::INFINITY));
            let s = tape.sum(p[0])?;
            tape.add(s, inf)
        },
        &params,
        GradCheckConfig::default(),
    );
    assert!(matches!(err, Err(Error::Oracle(_))));
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(
        rows in 1usize..5, cols in 1usize..7, seed in any::<u64>(), spread in 0.1f64..50.0
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-spread..spread)).collect();
        let y = eval1(|t, x| t.softmax(x), t(&[rows, cols], &data));
        for row in y.chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(row.iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn concat_then_split_is_identity(
        a in 1usize..4, b in 1usize..4, c in 1usize..4, outer in 1usize..3, seed in any::<u64>()
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::new();
        let xs: Vec<Tensor> = [a, b, c].iter().map(|&k| random(&[outer, k, 2], &mut rng)).collect();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let cat = tape.concat(&vars, 1).unwrap();
        let parts = tape.split(cat, 1, &[a, b, c]).unwrap();
        for (p, x) in parts.iter().zip(&xs) {
            prop_assert_eq!(tape.value(*p), x);
        }
    }
}
