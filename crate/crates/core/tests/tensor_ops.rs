use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rpeflow::tensor::{concat, gradcheck, Tape, Tensor};
use rpeflow::{Error, Tensor64};

fn t(shape: &[usize], data: &[f64]) -> Tensor64 {
    Tensor::from_f64(shape, data).unwrap()
}

fn random(shape: &[usize], seed: u64) -> Tensor64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

#[test]
fn add_direct_arithmetic() {
    let tape = Tape::new();
    let y = tape
        .constant(t(&[2], &[1.0, 2.0]))
        .add(tape.constant(t(&[2], &[3.0, 4.0])))
        .unwrap();
    assert_eq!(y.value().data(), &[4.0, 6.0]);
}

#[test]
fn mul_by_ones_is_identity_with_unit_gradient() {
    let tape = Tape::new();
    let x = tape.var(t(&[3], &[0.5, -2.0, 7.0]));
    let y = x.mul(tape.constant(Tensor::ones(&[1]))).unwrap();
    assert_eq!(y.value().data(), x.value().data());
    let g = tape.backward(y.sum()).unwrap();
    assert_eq!(g.wrt(x).data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn exp_derivative_at_zero_matches_central_difference() {
    let h = 1e-5;
    let numeric = ((h as f64).exp() - (-h as f64).exp()) / (2.0 * h);
    let tape = Tape::new();
    let x = tape.var(t(&[1], &[0.0]));
    let g = tape.backward(x.exp().unwrap().sum()).unwrap();
    assert!((g.wrt(x).data()[0] - numeric).abs() < 1e-8);
    assert!((g.wrt(x).data()[0] - 1.0).abs() < 1e-8);
}

#[test]
fn shape_and_domain_errors() {
    let tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::ones(&[2, 3]));
    let b = tape.constant(Tensor::ones(&[2]));
    assert!(matches!(a.add(b), Err(Error::Shape(_))));
    let neg = tape.constant(t(&[1], &[-1.0]));
    assert!(matches!(neg.ln(), Err(Error::Domain(_))));
    assert!(matches!(neg.sqrt(), Err(Error::Domain(_))));
    let zero = tape.constant(t(&[1], &[0.0]));
    assert!(matches!(neg.div(zero), Err(Error::Domain(_))));
}

#[test]
fn matmul_examples() {
    let tape = Tape::new();
    let m = random(&[3, 3], 1);
    let y = tape
        .constant(Tensor::eye(3))
        .matmul(tape.constant(m.clone()))
        .unwrap();
    assert_eq!(&*y.value(), &m);
    let y = tape
        .constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]))
        .matmul(tape.constant(t(&[2, 1], &[1.0, 1.0])))
        .unwrap();
    assert_eq!(y.value().data(), &[3.0, 7.0]);
    assert_eq!(y.shape(), vec![2, 1]);
    let bad = tape
        .constant(Tensor::<f64>::ones(&[2, 3]))
        .matmul(tape.constant(Tensor::ones(&[2, 3])));
    assert!(matches!(bad, Err(Error::Shape(_))));
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let b = random(&[3, 2], 3);
    let rep = gradcheck(
        "matmul",
        |a| a.matmul(a.tape().constant(b.clone())).map(|y| y.sum()),
        &random(&[4, 3], 2),
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(rep.passed(), "{rep:?}");
    let a = random(&[2, 4, 3], 4);
    let rep = gradcheck(
        "batched matmul rhs",
        |b| a_const(&a, b).and_then(|y| y.square()).map(|y| y.sum()),
        &random(&[2, 3, 2], 5),
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(rep.passed(), "{rep:?}");
}

fn a_const<'t>(a: &Tensor64, b: rpeflow::tensor::Var<'t, f64>) -> rpeflow::Result<rpeflow::tensor::Var<'t, f64>> {
    b.tape().constant(a.clone()).matmul(b)
}

#[test]
fn softmax_examples() {
    let tape = Tape::new();
    let y = tape.constant(t(&[3], &[0.0, 0.0, 0.0])).softmax(0).unwrap();
    for &v in y.value().data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let y = tape.constant(t(&[2], &[1000.0, 1000.0])).softmax(0).unwrap();
    assert_eq!(y.value().data(), &[0.5, 0.5]);
    assert!(tape.constant(t(&[2], &[0.0, 0.0])).softmax(1).is_err());
}

#[test]
fn softmax_jacobian_matches_finite_differences() {
    // Weighted sum probes every row of the Jacobian.
    let w = random(&[5], 11);
    let rep = gradcheck(
        "softmax",
        |x| {
            let y = x.softmax(0)?;
            Ok(y.mul(x.tape().constant(w.clone()))?.sum())
        },
        &random(&[5], 10),
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(rep.passed(), "{rep:?}");
}

#[test]
fn conv2d_identity_and_depthwise_sum() {
    let tape = Tape::new();
    let x = random(&[4, 5, 3], 20);
    let w = Tensor::eye(3).reshape(&[1, 1, 3, 3]).unwrap();
    let y = tape.constant(x.clone()).conv2d(tape.constant(w), 1, 0).unwrap();
    assert_eq!(&*y.value(), &x);

    let ones = Tensor::<f64>::ones(&[5, 5, 2]);
    let k = Tensor::<f64>::ones(&[3, 3, 2]);
    let y = tape
        .constant(ones)
        .depthwise_conv2d(tape.constant(k), 1, 1)
        .unwrap();
    let v = y.value();
    for yy in 1..4 {
        for xx in 1..4 {
            assert_eq!(v.at(&[yy, xx, 0]), 9.0);
            assert_eq!(v.at(&[yy, xx, 1]), 9.0);
        }
    }
    assert_eq!(v.at(&[0, 0, 0]), 4.0);
}

#[test]
fn conv2d_output_extent_and_kernel_error() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::ones(&[8, 8, 2]));
    let w = tape.constant(Tensor::ones(&[3, 3, 2, 4]));
    assert_eq!(x.conv2d(w, 2, 1).unwrap().shape(), vec![4, 4, 4]);
    let small = tape.constant(Tensor::ones(&[2, 2, 2]));
    let big = tape.constant(Tensor::ones(&[5, 5, 2, 1]));
    assert!(matches!(small.conv2d(big, 1, 1), Err(Error::Shape(_))));
}

#[test]
fn conv2d_gradients_match_finite_differences() {
    let x = random(&[4, 4, 2], 30);
    let rep = gradcheck(
        "conv2d weight",
        |w| {
            let xv = w.tape().constant(x.clone());
            Ok(xv.conv2d(w, 1, 1)?.square()?.sum())
        },
        &random(&[3, 3, 2, 3], 31),
        1e-5,
        1e-5,
    )
    .unwrap();
    assert!(rep.passed(), "{rep:?}");
    let w = random(&[3, 3, 2, 3], 32);
    let rep = gradcheck(
        "conv2d input stride 2",
        |x| {
            let wv = x.tape().constant(w.clone());
            Ok(x.conv2d(wv, 2, 1)?.square()?.sum())
        },
        &random(&[5, 5, 2], 33),
        1e-5,
        1e-5,
    )
    .unwrap();
    assert!(rep.passed(), "{rep:?}");
    let x = random(&[4, 4, 2], 34);
    let rep = gradcheck(
        "depthwise weight",
        |w| {
            let xv = w.tape().constant(x.clone());
            Ok(xv.depthwise_conv2d(w, 1, 1)?.square()?.sum())
        },
        &random(&[3, 3, 2], 35),
        1e-5,
        1e-5,
    )
    .unwrap();
    assert!(rep.passed(), "{rep:?}");
}

#[test]
fn layernorm_examples() {
    let tape = Tape::new();
    let g = tape.constant(Tensor::ones(&[2]));
    let b = tape.constant(Tensor::zeros(&[2]));
    let y = tape.constant(t(&[2], &[1.0, 3.0])).layernorm(0, g, b).unwrap();
    assert!((y.value().data()[0] + 1.0).abs() < 1e-3);
    assert!((y.value().data()[1] - 1.0).abs() < 1e-3);
    let g = tape.constant(Tensor::ones(&[3]));
    let b = tape.constant(Tensor::zeros(&[3]));
    let y = tape
        .constant(Tensor::full(&[2, 3], 4.2))
        .layernorm(1, g, b)
        .unwrap();
    assert!(y.value().data().iter().all(|&v| v == 0.0));
    let one = tape.constant(Tensor::ones(&[1]));
    assert!(tape.constant(Tensor::ones(&[3, 1])).normalize(1).is_err());
    let _ = one;
}

#[test]
fn layernorm_gradient_matches_finite_differences() {
    let w = random(&[3, 4], 41);
    let gamma = random(&[4], 42);
    let beta = random(&[4], 43);
    let rep = gradcheck(
        "layernorm",
        |x| {
            let tape = x.tape();
            let y = x.layernorm(1, tape.constant(gamma.clone()), tape.constant(beta.clone()))?;
            Ok(y.mul(tape.constant(w.clone()))?.sum())
        },
        &random(&[3, 4], 40),
        1e-5,
        1e-5,
    )
    .unwrap();
    assert!(rep.passed(), "{rep:?}");
    // Interior axis.
    let rep = gradcheck(
        "layernorm axis 0",
        |x| Ok(x.normalize(0)?.mul(x.tape().constant(w.clone()))?.sum()),
        &random(&[3, 4], 44),
        1e-5,
        1e-5,
    )
    .unwrap();
    assert!(rep.passed(), "{rep:?}");
}

#[test]
fn gradcheck_examples() {
    let rep = gradcheck(
        "sum sq",
        |x| Ok(x.square()?.sum()),
        &t(&[2], &[1.0, 2.0]),
        1e-5,
        1e-8,
    )
    .unwrap();
    assert!(rep.passed(), "{rep:?}");
    assert!(rep.max_rel_err < 1e-8);

    let tape = Tape::new();
    let x = tape.var(t(&[1], &[1.0]));
    let g = tape.backward(x.relu().unwrap().sum()).unwrap();
    assert_eq!(g.wrt(x).data(), &[1.0]);
}

#[test]
fn gradcheck_reports_non_finite() {
    let rep = gradcheck(
        "sqrt at zero",
        |x| Ok(x.sqrt()?.sum()),
        &t(&[1], &[1e-12]),
        1e-5,
        1e-4,
    );
    // sqrt(1e-12 - 1e-5) is a domain error: central differences cannot be taken.
    assert!(rep.is_err());
}

#[test]
fn unary_ops_gradcheck() {
    let x = t(&[5], &[0.3, -0.7, 1.2, -1.5, 0.9]);
    let pos = t(&[5], &[0.3, 0.7, 1.2, 1.5, 0.9]);
    type F = for<'t> fn(rpeflow::tensor::Var<'t, f64>) -> rpeflow::Result<rpeflow::tensor::Var<'t, f64>>;
    let cases: Vec<(&str, F, &Tensor64)> = vec![
        ("exp", |x| Ok(x.exp()?.sum()), &x),
        ("expm1", |x| Ok(x.expm1()?.sum()), &x),
        ("log", |x| Ok(x.ln()?.sum()), &pos),
        ("neg", |x| Ok(x.neg()?.square()?.sum()), &x),
        ("relu", |x| Ok(x.relu()?.square()?.sum()), &x),
        ("leaky", |x| Ok(x.leaky_relu()?.square()?.sum()), &x),
        ("sqrt", |x| Ok(x.sqrt()?.sum()), &pos),
        ("div", |x| Ok(x.div(x.square()?.offset(1.0))?.sum()), &x),
        ("clamp", |x| Ok(x.clamp(-1.0, 1.0).square()?.sum()), &x),
        ("row_norm", |x| Ok(x.reshape(&[1, 5])?.row_norm()?.sum()), &x),
    ];
    for (name, f, input) in cases {
        let rep = gradcheck(name, f, input, 1e-5, 1e-6).unwrap();
        assert!(rep.passed(), "{rep:?}");
    }
}

#[test]
fn reductions_concat_narrow_gradcheck() {
    let w = random(&[2, 7], 51);
    let rep = gradcheck(
        "concat/narrow/sum_axis/max_axis",
        |x| {
            let tape = x.tape();
            let a = x.narrow(1, 0, 3)?;
            let b = x.narrow(1, 3, 4)?;
            let c = concat(&[b, a], 1)?;
            let s = c.mul(tape.constant(w.clone()))?.sum_axis(0)?.square()?.sum();
            let m = x.max_axis(1)?.sum();
            s.add(m)
        },
        &random(&[2, 7], 50),
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(rep.passed(), "{rep:?}");
}

#[test]
fn correlation_gradcheck_and_self_peak() {
    let b = random(&[4, 4, 3], 61);
    let rep = gradcheck(
        "correlation",
        |a| {
            let bv = a.tape().constant(b.clone());
            Ok(a.correlation(bv, 1)?.square()?.sum())
        },
        &random(&[4, 4, 3], 60),
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(rep.passed(), "{rep:?}");
    let a = random(&[4, 4, 3], 62);
    let rep = gradcheck(
        "correlation rhs",
        |b| {
            let av = b.tape().constant(a.clone());
            Ok(av.correlation(b, 2)?.square()?.sum())
        },
        &random(&[4, 4, 3], 63),
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(rep.passed(), "{rep:?}");
}

#[test]
fn diamond_graph_accumulates() {
    let tape = Tape::new();
    let x = tape.var(t(&[1], &[3.0]));
    let y = x.add(x).unwrap();
    let g = tape.backward(y.sum()).unwrap();
    assert_eq!(g.wrt(x).data(), &[2.0]);
    // Deeper diamond: z = x*x + x
    let tape = Tape::new();
    let x = tape.var(t(&[1], &[3.0]));
    let z = x.mul(x).unwrap().add(x).unwrap();
    let g = tape.backward(z.sum()).unwrap();
    assert_eq!(g.wrt(x).data(), &[7.0]);
}

#[test]
fn backward_requires_scalar() {
    let tape = Tape::new();
    let x = tape.var(Tensor::<f64>::ones(&[2]));
    assert!(tape.backward(x).is_err());
}

#[test]
fn constants_receive_no_gradient() {
    let tape = Tape::new();
    let c = tape.constant(Tensor::<f64>::ones(&[2]));
    let x = tape.var(Tensor::<f64>::ones(&[2]));
    let g = tape.backward(c.mul(x).unwrap().sum()).unwrap();
    assert!(g.get(c).is_none());
    assert!(g.get(x).is_some());
}

#[test]
fn f32_tape_runs() {
    let tape = Tape::<f32>::new();
    let x = tape.var(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
    let g = tape.backward(x.square().unwrap().sum()).unwrap();
    assert_eq!(g.wrt(x).data(), &[2.0f32, 4.0]);
}

proptest! {
    #[test]
    fn broadcast_add_commutes(rows in 1usize..4, cols in 1usize..5, seed in 0u64..1000) {
        let a = random(&[rows, cols], seed);
        let b = random(&[cols], seed + 1);
        let tape = Tape::new();
        let ab = tape.constant(a.clone()).add(tape.constant(b.clone())).unwrap();
        let ba = tape.constant(b).add(tape.constant(a)).unwrap();
        prop_assert_eq!(ab.value().data().to_vec(), ba.value().data().to_vec());
    }

    #[test]
    fn softmax_sums_to_one(vals in proptest::collection::vec(-500.0f64..500.0, 2..12)) {
        let n = vals.len();
        let tape = Tape::new();
        let y = tape.constant(Tensor::new(&[n], vals).unwrap()).softmax(0).unwrap();
        let s: f64 = y.value().data().iter().sum();
        prop_assert!((s - 1.0).abs() <= 1e-9);
        prop_assert!(y.value().data().iter().all(|&v| v >= 0.0 && v.is_finite()));
    }

    #[test]
    fn randomized_elementwise_gradcheck(seed in 0u64..50) {
        let b = random(&[3, 4], seed + 100).map(|v| v + 2.0);
        let rep = gradcheck(
            "mixed",
            |x| {
                let bv = x.tape().constant(b.clone());
                let y = x.mul(bv)?.div(bv.square()?)?.exp()?.sub(x.leaky_relu()?)?;
                Ok(y.square()?.sum())
            },
            &random(&[3, 4], seed),
            1e-5,
            1e-4,
        ).unwrap();
        prop_assert!(rep.passed(), "{:?}", rep);
    }
}
