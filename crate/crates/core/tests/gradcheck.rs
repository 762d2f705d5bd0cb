//! Tape gradients against central finite differences.

use mtplan_core::autodiff::{Tape, Tensor, Var};
use mtplan_core::rng::rng_from_seed;
use mtplan_core::Result;
use rand::Rng as _;

type Build = dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

fn random_tensor(rng: &mut impl rand::Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn eval(inputs: &[Tensor], f: &Build) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars).unwrap();
    tape.value(out).item()
}

/// Largest norm-relative error between analytic and numeric gradients over
/// all inputs.
fn gradient_error(inputs: &[Tensor], h: f64, f: &Build) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars).unwrap();
    tape.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = tape
            .grad(*v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        let mut numeric = vec![0.0; analytic.len()];
        for (e, slot) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[e] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[e] -= h;
            *slot = (eval(&plus, f) - eval(&minus, f)) / (2.0 * h);
        }
        let diff: f64 = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale: f64 =
            analytic.iter().map(|a| a * a).sum::<f64>().sqrt() + numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        // Exactly-zero gradients are compared in absolute terms.
        worst = worst.max(if scale > 1e-6 { diff / scale } else { diff });
    }
    worst
}

/// Contract `out` with a fixed random weight so every output entry matters.
fn project(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    let mut rng = rng_from_seed(seed);
    let w = tape.constant(random_tensor(&mut rng, &shape));
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

fn dims(rng: &mut impl rand::Rng) -> (usize, usize, usize) {
    (rng.random_range(1..4), rng.random_range(1..5), rng.random_range(1..5))
}

const SHAPES: u64 = 20;
const TOL: f64 = 1e-5;

fn check_primitive(name: &str, make: impl Fn(u64) -> (Vec<Tensor>, Box<Build>)) {
    for trial in 0..SHAPES {
        let (inputs, f) = make(trial);
        let err = gradient_error(&inputs, 1e-5, &*f);
        assert!(err < TOL, "{name} trial {trial}: relative error {err:e}");
    }
}

#[test]
fn matmul_gradient() {
    check_primitive("matmul", |t| {
        let mut rng = rng_from_seed(100 + t);
        let (b, m, k) = dims(&mut rng);
        let n = rng.random_range(1..5);
        let a = random_tensor(&mut rng, &[b, m, k]);
        let w = random_tensor(&mut rng, &[k, n]);
        (
            vec![a, w],
            Box::new(move |tp: &mut Tape, v: &[Var]| {
                let o = tp.matmul(v[0], v[1])?;
                project(tp, o, t)
            }),
        )
    });
}

#[test]
fn batch_matmul_gradient() {
    for transpose in [false, true] {
        check_primitive("batch_matmul", |t| {
            let mut rng = rng_from_seed(200 + t);
            let (b, m, k) = dims(&mut rng);
            let n = rng.random_range(1..5);
            let a = random_tensor(&mut rng, &[b, m, k]);
            let bs = if transpose { [b, n, k] } else { [b, k, n] };
            let w = random_tensor(&mut rng, &bs);
            (
                vec![a, w],
                Box::new(move |tp: &mut Tape, v: &[Var]| {
                    let o = tp.batch_matmul(v[0], v[1], transpose)?;
                    project(tp, o, t)
                }),
            )
        });
    }
}

#[test]
fn add_and_broadcast_gradient() {
    check_primitive("add", |t| {
        let mut rng = rng_from_seed(300 + t);
        let (b, m, k) = dims(&mut rng);
        let a = random_tensor(&mut rng, &[b, m, k]);
        let c = if t % 2 == 0 {
            random_tensor(&mut rng, &[k])
        } else {
            random_tensor(&mut rng, &[m, k])
        };
        (
            vec![a, c],
            Box::new(move |tp: &mut Tape, v: &[Var]| {
                let o = tp.add(v[0], v[1])?;
                project(tp, o, t)
            }),
        )
    });
}

#[test]
fn mul_scale_and_scale_by_gradient() {
    check_primitive("mul/scale", |t| {
        let mut rng = rng_from_seed(400 + t);
        let (b, m, k) = dims(&mut rng);
        let a = random_tensor(&mut rng, &[b, m, k]);
        let c = random_tensor(&mut rng, &[b, m, k]);
        let s = random_tensor(&mut rng, &[1]);
        (
            vec![a, c, s],
            Box::new(move |tp: &mut Tape, v: &[Var]| {
                let o = tp.mul(v[0], v[1])?;
                let o = tp.scale(o, -1.7);
                let o = tp.scale_by(o, v[2])?;
                project(tp, o, t)
            }),
        )
    });
}

#[test]
fn softmax_gradients() {
    check_primitive("row_softmax", |t| {
        let mut rng = rng_from_seed(500 + t);
        let (b, m, k) = dims(&mut rng);
        let a = random_tensor(&mut rng, &[b, m, k]).scaled_for_test(3.0);
        (
            vec![a],
            Box::new(move |tp: &mut Tape, v: &[Var]| {
                let o = tp.row_softmax(v[0]);
                project(tp, o, t)
            }),
        )
    });
    check_primitive("causal_row_softmax", |t| {
        let mut rng = rng_from_seed(600 + t);
        let (b, n, _) = dims(&mut rng);
        let a = random_tensor(&mut rng, &[b, n, n]).scaled_for_test(3.0);
        (
            vec![a],
            Box::new(move |tp: &mut Tape, v: &[Var]| {
                let o = tp.causal_row_softmax(v[0])?;
                project(tp, o, t)
            }),
        )
    });
}

#[test]
fn layer_norm_gradient() {
    check_primitive("layer_norm", |t| {
        let mut rng = rng_from_seed(700 + t);
        let (b, m, _) = dims(&mut rng);
        let k = rng.random_range(2..6);
        let x = random_tensor(&mut rng, &[b, m, k]);
        let g = random_tensor(&mut rng, &[k]);
        let bias = random_tensor(&mut rng, &[k]);
        (
            vec![x, g, bias],
            Box::new(move |tp: &mut Tape, v: &[Var]| {
                let o = tp.layer_norm(v[0], v[1], v[2])?;
                project(tp, o, t)
            }),
        )
    });
}

#[test]
fn relu_gradient_away_from_kink() {
    check_primitive("relu", |t| {
        let mut rng = rng_from_seed(800 + t);
        let (b, m, k) = dims(&mut rng);
        let mut a = random_tensor(&mut rng, &[b, m, k]);
        for x in a.data_mut() {
            if x.abs() < 0.05 {
                *x += 0.1;
            }
        }
        (
            vec![a],
            Box::new(move |tp: &mut Tape, v: &[Var]| {
                let o = tp.relu(v[0]);
                project(tp, o, t)
            }),
        )
    });
}

#[test]
fn embedding_gradient_with_repeated_ids() {
    check_primitive("embedding", |t| {
        let mut rng = rng_from_seed(900 + t);
        let (rows, b, d) = dims(&mut rng);
        let n = rng.random_range(1..5);
        let table = random_tensor(&mut rng, &[rows + 1, d]);
        let ids: Vec<usize> = (0..b * n).map(|_| rng.random_range(0..=rows)).collect();
        (
            vec![table],
            Box::new(move |tp: &mut Tape, v: &[Var]| {
                let o = tp.embedding(v[0], &ids, &[b, n])?;
                project(tp, o, t)
            }),
        )
    });
}

#[test]
fn concat_slice_reshape_gradient() {
    check_primitive("concat/slice/reshape", |t| {
        let mut rng = rng_from_seed(1000 + t);
        let (b, m, k) = dims(&mut rng);
        let k2 = rng.random_range(1..4);
        let a = random_tensor(&mut rng, &[b, m, k]);
        let c = random_tensor(&mut rng, &[b, m, k2]);
        (
            vec![a, c],
            Box::new(move |tp: &mut Tape, v: &[Var]| {
                let cat = tp.concat(&[v[0], v[1]])?;
                let start = k / 2;
                let len = k + k2 - start;
                let s = tp.slice(cat, start, len)?;
                let r = tp.reshape(s, &[b * m * len])?;
                project(tp, r, t)
            }),
        )
    });
}

#[test]
fn cross_entropy_gradient_with_masks() {
    check_primitive("cross_entropy", |t| {
        let mut rng = rng_from_seed(1100 + t);
        let (b, n, _) = dims(&mut rng);
        let m = rng.random_range(2..6);
        let logits = random_tensor(&mut rng, &[b, n, m]).scaled_for_test(2.0);
        let mut targets: Vec<Option<usize>> = (0..b * n)
            .map(|_| rng.random_bool(0.7).then(|| rng.random_range(0..m)))
            .collect();
        targets[0] = Some(0);
        (
            vec![logits],
            Box::new(move |tp: &mut Tape, v: &[Var]| tp.cross_entropy(v[0], &targets)),
        )
    });
}

#[test]
fn composite_graph_matches_finite_differences() {
    for seed in 0..5 {
        let mut rng = rng_from_seed(1200 + seed);
        let x = random_tensor(&mut rng, &[2, 3, 4]);
        let w1 = random_tensor(&mut rng, &[4, 5]);
        let w2 = random_tensor(&mut rng, &[5, 5]);
        let w3 = random_tensor(&mut rng, &[5, 6]);
        let targets: Vec<Option<usize>> = (0..6).map(|_| Some(rng.random_range(0..6))).collect();
        let f = move |tp: &mut Tape, v: &[Var]| -> Result<Var> {
            let a = tp.matmul(v[0], v[1])?;
            let a = tp.matmul(a, v[2])?;
            let s = tp.row_softmax(a);
            let logits = tp.matmul(s, v[3])?;
            tp.cross_entropy(logits, &targets)
        };
        let err = gradient_error(&[x, w1, w2, w3], 1e-5, &f);
        assert!(err < 1e-6, "seed {seed}: {err:e}");
    }
}

#[test]
fn product_rule_example() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(2.0), true);
    let y = tape.leaf(Tensor::scalar(3.0), true);
    let l = tape.mul(x, y).unwrap();
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[3.0]);
    assert_eq!(tape.grad(y).unwrap(), &[2.0]);
}

#[test]
fn sum_of_layer_norm() {
    let mut rng = rng_from_seed(1300);
    let x = random_tensor(&mut rng, &[3, 5]);
    let g = Tensor::filled(&[5], 1.0);
    let b = Tensor::zeros(&[5]);
    let f = |tp: &mut Tape, v: &[Var]| -> Result<Var> {
        let o = tp.layer_norm(v[0], v[1], v[2])?;
        Ok(tp.sum(o))
    };
    assert!(gradient_error(&[x, g, b], 1e-5, &f) < 1e-5);
}

#[test]
fn detached_values_get_no_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(2.0), true);
    let d = tape.detach(x);
    let y = tape.mul(x, d).unwrap();
    tape.backward(y).unwrap();
    assert!(tape.grad(d).is_none());
    assert_eq!(tape.grad(x).unwrap(), &[2.0]);
}

#[test]
fn backward_contract_errors() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap(), true);
    assert!(tape.backward(x).is_err());
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert!(tape.backward(s).is_err());
    tape.reset_grads();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0]);
}

#[test]
fn cross_entropy_gradient_is_softmax_minus_onehot() {
    let logits = Tensor::new(&[1, 3], vec![0.5, -1.0, 2.0]).unwrap();
    let mut tape = Tape::new();
    let v = tape.leaf(logits.clone(), true);
    let l = tape.cross_entropy(v, &[Some(1)]).unwrap();
    tape.backward(l).unwrap();
    let z: f64 = logits.data().iter().map(|x| x.exp()).sum();
    let expect: Vec<f64> = logits
        .data()
        .iter()
        .enumerate()
        .map(|(i, x)| x.exp() / z - if i == 1 { 1.0 } else { 0.0 })
        .collect();
    for (a, b) in tape.grad(v).unwrap().iter().zip(&expect) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(tape.cross_entropy(v, &[Some(3)]).is_err());
}

#[test]
fn uniform_softmax_and_deterministic_forward() {
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::filled(&[2, 4], 0.3));
    let s = tape.row_softmax(v);
    assert!(tape.value(s).data().iter().all(|p| (p - 0.25).abs() < 1e-15));

    let mut rng = rng_from_seed(1400);
    let x = random_tensor(&mut rng, &[3, 4, 6]);
    let w = random_tensor(&mut rng, &[6, 6]);
    let run = || {
        let mut tape = Tape::new();
        let a = tape.constant(x.clone());
        let b = tape.constant(w.clone());
        let m = tape.matmul(a, b).unwrap();
        let s = tape.row_softmax(m);
        tape.value(s).clone()
    };
    assert_eq!(run(), run());
}

trait ScaledForTest {
    fn scaled_for_test(self, c: f64) -> Self;
}

impl ScaledForTest for Tensor {
    fn scaled_for_test(mut self, c: f64) -> Self {
        self.data_mut().iter_mut().for_each(|x| *x *= c);
        self
    }
}
