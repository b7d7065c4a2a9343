use hrnn::gradcheck::{check_gradients, random_tensor};
use hrnn::tensor::{gemm, Binary, MatRef, Tape, Tensor, Unary};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for l in 0..k {
                c[i * n + j] += a[i * k + l] * b[l * n + j];
            }
        }
    }
    c
}

fn rt(shape: &[usize], seed: u64) -> Tensor<f64> {
    random_tensor(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// A broadcast partner: a suffix of `shape` with some axes set to 1.
fn partner(shape: &[usize], keep: usize, ones: u8) -> Vec<usize> {
    let tail = &shape[shape.len() - keep.min(shape.len())..];
    tail.iter()
        .enumerate()
        .map(|(i, &d)| if ones >> i & 1 == 1 { 1 } else { d })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_matches_triple_loop(batch in 1usize..4, m in 1usize..9, k in 1usize..9, n in 1usize..9, seed in any::<u64>()) {
        let a = rt(&[batch, m, k], seed);
        let b = rt(&[k, n], seed ^ 1);
        let tape = Tape::new();
        let c = tape.constant(a.clone()).matmul(tape.constant(b.clone())).unwrap().value();
        prop_assert_eq!(c.shape(), &[batch, m, n]);
        let want = naive_matmul(a.data(), b.data(), batch * m, k, n);
        for (x, y) in c.data().iter().zip(&want) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gemm_with_transposes_and_accumulation(m in 1usize..7, k in 1usize..7, n in 1usize..7, seed in any::<u64>()) {
        let a = rt(&[k, m], seed);
        let b = rt(&[n, k], seed ^ 2);
        let c0 = rt(&[m, n], seed ^ 3);
        let mut c = c0.data().to_vec();
        gemm(MatRef::row_major(a.data(), k, m).t(), MatRef::row_major(b.data(), n, k).t(), 0.5, &mut c, n);
        let at: Vec<f64> = (0..m * k).map(|i| a.data()[(i % k) * m + i / k]).collect();
        let bt: Vec<f64> = (0..k * n).map(|i| b.data()[(i % n) * k + i / n]).collect();
        let prod = naive_matmul(&at, &bt, m, k, n);
        for ((got, p), c0) in c.iter().zip(&prod).zip(c0.data()) {
            prop_assert!((got - (p + 0.5 * c0)).abs() < 1e-12);
        }
    }

    #[test]
    fn binary_ops_broadcast_and_differentiate(
        shape in prop::collection::vec(1usize..4, 1..4),
        keep in 0usize..4,
        ones in any::<u8>(),
        which in 0usize..4,
        seed in any::<u64>(),
    ) {
        let op = [Binary::Add, Binary::Sub, Binary::Mul, Binary::Div][which];
        let other = partner(&shape, keep, ones);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // keep divisors away from zero
        let inputs = vec![random_tensor::<f64>(&shape, -1.0, 1.0, &mut rng), random_tensor::<f64>(&other, 0.5, 1.5, &mut rng)];
        let w = rt(&shape, seed ^ 4);
        let rep = check_gradients(&inputs, 1e-6, 1e-3, None, |tape, v| Ok(v[0].binary(op, v[1])?.mul(tape.constant(w.clone()))?.sum_all())).unwrap();
        prop_assert!(rep.max_rel_err < 1e-6, "{op:?} {shape:?} with {other:?}: {:e}", rep.max_rel_err);
    }

    #[test]
    fn unary_ops_differentiate(len in 1usize..12, which in 0usize..7, seed in any::<u64>()) {
        let op = [Unary::Neg, Unary::Exp, Unary::Log, Unary::Sigmoid, Unary::Gelu, Unary::Sqrt, Unary::Square][which];
        let positive = matches!(op, Unary::Log | Unary::Sqrt);
        let (lo, hi) = if positive { (0.2, 3.0) } else { (-3.0, 3.0) };
        let inputs = vec![random_tensor::<f64>(&[len], lo, hi, &mut ChaCha8Rng::seed_from_u64(seed))];
        let w = rt(&[len], seed ^ 5);
        let rep = check_gradients(&inputs, 1e-6, 1e-3, None, |tape, v| Ok(v[0].unary(op).mul(tape.constant(w.clone()))?.sum_all())).unwrap();
        prop_assert!(rep.max_rel_err < 1e-6, "{op:?}: {:e}", rep.max_rel_err);
    }

    #[test]
    fn reductions_match_direct_sums(shape in prop::collection::vec(1usize..5, 1..4), axis in 0usize..3, seed in any::<u64>()) {
        let axis = axis % shape.len();
        let x = rt(&shape, seed);
        let tape = Tape::new();
        let s = tape.constant(x.clone()).sum(axis).unwrap().value();
        let mean = tape.constant(x.clone()).mean(axis).unwrap().value();
        let inner: usize = shape[axis + 1..].iter().product();
        let len = shape[axis];
        for (i, (&got, &avg)) in s.data().iter().zip(mean.data()).enumerate() {
            let (o, r) = (i / inner, i % inner);
            let want: f64 = (0..len).map(|l| x.data()[(o * len + l) * inner + r]).sum();
            prop_assert!((got - want).abs() < 1e-12);
            prop_assert!((avg - want / len as f64).abs() < 1e-12);
        }
        let w = rt(s.shape(), seed ^ 6);
        let rep = check_gradients(&[x], 1e-6, 1e-3, None, |tape, v| Ok(v[0].mean(axis)?.mul(tape.constant(w.clone()))?.sum_all())).unwrap();
        prop_assert!(rep.max_rel_err < 1e-6);
    }

    #[test]
    fn composite_expression_gradients(m in 1usize..5, k in 1usize..5, seed in any::<u64>()) {
        let inputs = vec![rt(&[2, m, k], seed), rt(&[k, 3], seed ^ 7), rt(&[3], seed ^ 8)];
        let rep = check_gradients(&inputs, 1e-6, 1e-3, None, |_, v| {
            let h = v[0].matmul(v[1])?.add(v[2])?.gelu();
            Ok(h.square().mean(1)?.sigmoid().reshape(&[6])?.sum_all())
        })
        .unwrap();
        prop_assert!(rep.max_rel_err < 1e-6, "{:e} {:?}", rep.max_rel_err, rep.worst);
    }
}

#[test]
fn gradients_accumulate_over_reuse() {
    let tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::from_vec(vec![3.0]));
    // y = x·x + x
    let y = x.mul(x).unwrap().add(x).unwrap().sum_all();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(&x).unwrap().data(), &[7.0]);
}
