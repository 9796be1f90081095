use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reidapt_autodiff::{AutodiffError, Tape, Tensor, Var};

/// Builds a scalar objective from one op applied to freshly recorded inputs.
type Build = dyn Fn(&mut Tape, &[Var]) -> Var;

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()
}

/// Evaluates `sum(op(inputs) * probe)` so every output element contributes.
fn objective(build: &Build, shapes: &[Vec<usize>], data: &[Vec<f64>], probe_seed: u64) -> (f64, Vec<Vec<f64>>) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = shapes
        .iter()
        .zip(data)
        .map(|(s, d)| tape.variable(s.clone(), d.clone()).unwrap())
        .collect();
    let out = build(&mut tape, &vars);
    let n = tape.value(out).len();
    let mut rng = ChaCha8Rng::seed_from_u64(probe_seed);
    let probe = tape.constant(tape.shape(out).to_vec(), random_vec(&mut rng, n)).unwrap();
    let prod = tape.mul(out, probe).unwrap();
    let loss = tape.sum(prod).unwrap();
    let value = tape.scalar(loss);
    let grads = tape.backward(loss).unwrap();
    (value, vars.iter().map(|&v| grads.wrt(v)).collect())
}

/// Central finite differences against the tape gradient, relative tolerance 1e-3.
fn gradcheck(name: &str, build: &Build, shapes: &[Vec<usize>], trials: u64) {
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
        let data: Vec<Vec<f64>> = shapes.iter().map(|s| random_vec(&mut rng, s.iter().product())).collect();
        let (_, analytic) = objective(build, shapes, &data, trial);
        let h = 1e-6;
        for (k, input) in data.iter().enumerate() {
            for i in 0..input.len() {
                let mut plus = data.clone();
                plus[k][i] += h;
                let mut minus = data.clone();
                minus[k][i] -= h;
                let fd = (objective(build, shapes, &plus, trial).0 - objective(build, shapes, &minus, trial).0) / (2.0 * h);
                let an = analytic[k][i];
                let tol = 1e-3 * an.abs().max(fd.abs()).max(1e-3);
                assert!(
                    (an - fd).abs() <= tol,
                    "{name}: input {k} element {i} trial {trial}: analytic {an} vs fd {fd}"
                );
            }
        }
    }
}

#[test]
fn gradients_match_finite_differences_for_every_op() {
    let cases: Vec<(&str, Box<Build>, Vec<Vec<usize>>)> = vec![
        ("matmul", Box::new(|t, v| t.matmul(v[0], v[1]).unwrap()), vec![vec![3, 4], vec![4, 2]]),
        ("add", Box::new(|t, v| t.add(v[0], v[1]).unwrap()), vec![vec![5], vec![5]]),
        ("sub", Box::new(|t, v| t.sub(v[0], v[1]).unwrap()), vec![vec![5], vec![5]]),
        ("mul", Box::new(|t, v| t.mul(v[0], v[1]).unwrap()), vec![vec![2, 3], vec![2, 3]]),
        ("add_bias", Box::new(|t, v| t.add_bias(v[0], v[1]).unwrap()), vec![vec![2, 3, 2], vec![3]]),
        ("scale", Box::new(|t, v| t.scale(v[0], -1.7).unwrap()), vec![vec![4]]),
        ("add_scalar", Box::new(|t, v| t.add_scalar(v[0], 0.3).unwrap()), vec![vec![4]]),
        (
            "conv2d",
            Box::new(|t, v| t.conv2d(v[0], v[1], 1, 1).unwrap()),
            vec![vec![2, 2, 4, 3], vec![3, 2, 3, 3]],
        ),
        (
            "conv2d_stride2",
            Box::new(|t, v| t.conv2d(v[0], v[1], 2, 1).unwrap()),
            vec![vec![1, 2, 5, 4], vec![2, 2, 3, 3]],
        ),
        ("relu", Box::new(|t, v| t.relu(v[0]).unwrap()), vec![vec![8]]),
        ("leaky_relu", Box::new(|t, v| t.leaky_relu(v[0], 0.2).unwrap()), vec![vec![8]]),
        ("tanh", Box::new(|t, v| t.tanh(v[0]).unwrap()), vec![vec![6]]),
        ("sigmoid", Box::new(|t, v| t.sigmoid(v[0]).unwrap()), vec![vec![6]]),
        ("softplus", Box::new(|t, v| t.softplus(v[0]).unwrap()), vec![vec![6]]),
        ("exp", Box::new(|t, v| t.exp(v[0]).unwrap()), vec![vec![6]]),
        (
            "sqrt",
            Box::new(|t, v| {
                let sq = t.square(v[0]).unwrap();
                let shifted = t.add_scalar(sq, 0.5).unwrap();
                t.sqrt(shifted).unwrap()
            }),
            vec![vec![6]],
        ),
        ("abs", Box::new(|t, v| t.abs(v[0]).unwrap()), vec![vec![6]]),
        ("square", Box::new(|t, v| t.square(v[0]).unwrap()), vec![vec![6]]),
        ("max_pool2d", Box::new(|t, v| t.max_pool2d(v[0], 2).unwrap()), vec![vec![1, 2, 4, 4]]),
        ("upsample2x", Box::new(|t, v| t.upsample2x(v[0]).unwrap()), vec![vec![1, 2, 2, 3]]),
        ("sum_axis", Box::new(|t, v| t.sum_axis(v[0], 1).unwrap()), vec![vec![2, 3, 2]]),
        ("mean_axis", Box::new(|t, v| t.mean_axis(v[0], 2).unwrap()), vec![vec![2, 3, 4]]),
        ("max_axis", Box::new(|t, v| t.max_axis(v[0], 2).unwrap()), vec![vec![2, 3, 4]]),
        ("sum", Box::new(|t, v| t.sum(v[0]).unwrap()), vec![vec![3, 3]]),
        ("mean", Box::new(|t, v| t.mean(v[0]).unwrap()), vec![vec![3, 3]]),
        (
            "softmax_cross_entropy",
            Box::new(|t, v| t.softmax_cross_entropy(v[0], &[2, 0, 1]).unwrap()),
            vec![vec![3, 4]],
        ),
        ("reshape", Box::new(|t, v| t.reshape(v[0], [3, 2]).unwrap()), vec![vec![2, 3]]),
        ("permute", Box::new(|t, v| t.permute(v[0], &[0, 2, 1]).unwrap()), vec![vec![2, 3, 4]]),
        ("gather_rows", Box::new(|t, v| t.gather_rows(v[0], &[2, 0, 2, 1]).unwrap()), vec![vec![3, 2]]),
        ("segment_sum", Box::new(|t, v| t.segment_sum(v[0], &[1, 0, 1, 2, 2], 3).unwrap()), vec![vec![5]]),
        ("l2_normalize_rows", Box::new(|t, v| t.l2_normalize_rows(v[0], 1e-12).unwrap()), vec![vec![3, 4]]),
    ];
    for (name, build, shapes) in &cases {
        gradcheck(name, build.as_ref(), shapes, 20);
    }
}

#[test]
fn relu_forward() {
    let mut t = Tape::new();
    let x = t.constant([3], vec![-1.0, 0.0, 2.0]).unwrap();
    let y = t.relu(x).unwrap();
    assert_eq!(t.value(y), &[0.0, 0.0, 2.0]);
}

#[test]
fn matmul_by_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random_vec(&mut rng, 9);
    let mut t = Tape::new();
    let eye = t.constant([3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
    let av = t.constant([3, 3], a.clone()).unwrap();
    let p = t.matmul(eye, av).unwrap();
    assert_eq!(t.value(p), a.as_slice());
}

#[test]
fn uniform_softmax_cross_entropy_is_ln2() {
    let mut t = Tape::new();
    let logits = t.constant([1, 2], vec![0.0, 0.0]).unwrap();
    let l = t.softmax_cross_entropy(logits, &[0]).unwrap();
    assert!((t.scalar(l) - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn shape_mismatch_names_both_shapes() {
    let mut t = Tape::new();
    let a = t.constant([2, 3], vec![0.0; 6]).unwrap();
    let b = t.constant([2, 2], vec![0.0; 4]).unwrap();
    match t.matmul(a, b) {
        Err(AutodiffError::ShapeMismatch { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 2]);
        }
        other => panic!("expected shape mismatch, got {other:?}"),
    }
}

#[test]
fn non_finite_output_is_rejected() {
    let mut t = Tape::new();
    let x = t.constant([1], vec![-1.0]).unwrap();
    assert_eq!(t.sqrt(x).unwrap_err(), AutodiffError::NonFinite { op: "sqrt" });
    let y = t.constant([1], vec![1000.0]).unwrap();
    assert!(matches!(t.exp(y), Err(AutodiffError::NonFinite { .. })));
}

#[test]
fn backward_of_sum_of_squares() {
    let mut t = Tape::new();
    let x = t.variable([2], vec![1.0, 2.0]).unwrap();
    let sq = t.square(x).unwrap();
    let loss = t.sum(sq).unwrap();
    let g = t.backward(loss).unwrap();
    assert_eq!(g.wrt(x), vec![2.0, 4.0]);
}

#[test]
fn euclidean_distance_gradient_matches_finite_differences() {
    // d/du ||u - v|| = (u - v) / ||u - v|| = [0.6, -0.8] at u=[3,0], v=[0,4]
    let dist = |u: &[f64]| ((u[0] - 0.0).powi(2) + (u[1] - 4.0).powi(2)).sqrt();
    let h = 1e-4;
    let fd = [
        (dist(&[3.0 + h, 0.0]) - dist(&[3.0 - h, 0.0])) / (2.0 * h),
        (dist(&[3.0, h]) - dist(&[3.0, -h])) / (2.0 * h),
    ];
    let mut t = Tape::new();
    let u = t.variable([2], vec![3.0, 0.0]).unwrap();
    let v = t.constant([2], vec![0.0, 4.0]).unwrap();
    let d = t.sub(u, v).unwrap();
    let sq = t.square(d).unwrap();
    let s = t.sum(sq).unwrap();
    let loss = t.sqrt(s).unwrap();
    assert!((t.scalar(loss) - 5.0).abs() < 1e-12);
    let g = t.backward(loss).unwrap().wrt(u);
    for (a, b) in g.iter().zip(fd) {
        assert!((a - b).abs() < 1e-8, "{a} vs {b}");
    }
    assert!((g[0] - 0.6).abs() < 1e-12 && (g[1] + 0.8).abs() < 1e-12);
}

#[test]
fn loss_independent_of_input_gives_zero_grad() {
    let mut t = Tape::new();
    let x = t.variable([3], vec![1.0, 2.0, 3.0]).unwrap();
    let y = t.variable([2], vec![1.0, -1.0]).unwrap();
    let sq = t.square(y).unwrap();
    let loss = t.sum(sq).unwrap();
    let g = t.backward(loss).unwrap();
    assert_eq!(g.wrt(x), vec![0.0; 3]);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut t = Tape::new();
    let x = t.variable([2], vec![1.0, 2.0]).unwrap();
    assert_eq!(t.backward(x).unwrap_err(), AutodiffError::NonScalarLoss(vec![2]));
}

#[test]
fn gradients_of_independent_losses_add() {
    let data = vec![0.3, -1.2, 0.7];
    let grad_of = |which: u8| {
        let mut t = Tape::new();
        let x = t.variable([3], data.clone()).unwrap();
        let e = t.exp(x).unwrap();
        let l1 = t.sum(e).unwrap();
        let sq = t.square(x).unwrap();
        let l2 = t.mean(sq).unwrap();
        let loss = match which {
            0 => l1,
            1 => l2,
            _ => t.add(l1, l2).unwrap(),
        };
        t.backward(loss).unwrap().wrt(x)
    };
    let (a, b, both) = (grad_of(0), grad_of(1), grad_of(2));
    for i in 0..3 {
        assert!((a[i] + b[i] - both[i]).abs() < 1e-14);
    }
}

#[test]
fn shared_input_gradients_accumulate() {
    // loss = sum(x*x) recorded through mul(x, x): both operands feed the same leaf.
    let mut t = Tape::new();
    let x = t.variable([2], vec![1.5, -2.0]).unwrap();
    let p = t.mul(x, x).unwrap();
    let loss = t.sum(p).unwrap();
    assert_eq!(t.backward(loss).unwrap().wrt(x), vec![3.0, -4.0]);
}

#[test]
fn constants_record_no_gradient() {
    let mut t = Tape::new();
    let c = t.constant([2], vec![1.0, 2.0]).unwrap();
    let y = t.square(c).unwrap();
    assert!(!t.requires_grad(y));
    let s = t.sum(y).unwrap();
    let g = t.backward(s).unwrap();
    assert!(g.get(c).is_none());
}

#[test]
fn tensor_leaf_respects_requires_grad() {
    let p = Tensor::param([2], vec![1.0, 1.0]).unwrap();
    let mut t = Tape::new();
    let v = t.leaf(&p);
    assert!(t.requires_grad(v));
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn permute_roundtrip(d0 in 1usize..4, d1 in 1usize..4, d2 in 1usize..4) {
            let n = d0 * d1 * d2;
            let data: Vec<f64> = (0..n).map(|i| i as f64).collect();
            let mut t = Tape::new();
            let x = t.constant([d0, d1, d2], data.clone()).unwrap();
            let y = t.permute(x, &[2, 0, 1]).unwrap();
            let z = t.permute(y, &[1, 2, 0]).unwrap();
            prop_assert_eq!(t.value(z), data.as_slice());
        }

        #[test]
        fn forward_is_bit_reproducible(seed in 0u64..1000) {
            let run = || {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut t = Tape::new();
                let x = t.variable([1, 2, 6, 5], random_vec(&mut rng, 60)).unwrap();
                let w = t.variable([3, 2, 3, 3], random_vec(&mut rng, 54)).unwrap();
                let y = t.conv2d(x, w, 1, 1).unwrap();
                let r = t.relu(y).unwrap();
                let l = t.mean(r).unwrap();
                let v = t.scalar(l);
                (v, t.backward(l).unwrap().wrt(w))
            };
            let (a, b) = (run(), run());
            prop_assert_eq!(a.0.to_bits(), b.0.to_bits());
            prop_assert_eq!(a.1, b.1);
        }
    }
}
