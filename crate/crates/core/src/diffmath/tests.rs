use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Central-difference gradient of a scalar function of one leaf.
fn fd_grad(x: &Tensor, f: &impl Fn(&mut Graph, Var) -> Var) -> Vec<f64> {
    let h = 1e-5;
    (0..x.len())
        .map(|i| {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let mut g = Graph::new();
            let v = g.variable(xp);
            let o = f(&mut g, v);
            let fp = g.value(o).item();
            let mut g = Graph::new();
            let v = g.variable(xm);
            let o = f(&mut g, v);
            let fm = g.value(o).item();
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

fn assert_grad_matches(x: &Tensor, f: impl Fn(&mut Graph, Var) -> Var) {
    let mut g = Graph::new();
    let v = g.variable(x.clone());
    let o = f(&mut g, v);
    let grads = g.backward(o).unwrap();
    let analytic = grads.wrt(v).unwrap();
    let numeric = fd_grad(x, &f);
    for (a, n) in analytic.data().iter().zip(&numeric) {
        assert!(relative_error(*a, *n) < 1e-6, "analytic {a} numeric {n}");
    }
}

#[test]
fn matmul_identity_and_dot() {
    let mut g = Graph::new();
    let i = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let b = g.constant(t(&[2, 1], &[3.0, 4.0]));
    let c = g.matmul(i, b).unwrap();
    assert_eq!(g.value(c).data(), &[3.0, 4.0]);

    let a = g.constant(t(&[1, 2], &[1.0, 2.0]));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[11.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    match g.matmul(a, b) {
        Err(Error::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn matmul_gradient_of_sum_is_ones_times_bt() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[4, 2], &mut rng);
    let bc = b.clone();
    let f = move |g: &mut Graph, v: Var| {
        let bv = g.constant(bc.clone());
        let c = g.matmul(v, bv).unwrap();
        g.sum_all(c)
    };
    let mut g = Graph::new();
    let v = g.variable(a.clone());
    let o = f(&mut g, v);
    let grad = g.backward(o).unwrap().wrt(v).unwrap();
    // ones(3,2) · bᵀ: every row equals the row sums of b.
    for r in 0..3 {
        for k in 0..4 {
            let expect = b.get(&[k, 0]) + b.get(&[k, 1]);
            assert!((grad.get(&[r, k]) - expect).abs() < 1e-12);
        }
    }
    let numeric = fd_grad(&a, &f);
    for (x, y) in grad.data().iter().zip(&numeric) {
        assert!((x - y).abs() < 1e-8);
    }
}

#[test]
fn batched_matmul_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random(&[2, 3, 4], &mut rng);
    let b = random(&[2, 5, 4], &mut rng);
    let w = random(&[2, 3, 5], &mut rng);
    let (bc, wc) = (b.clone(), w.clone());
    assert_grad_matches(&a, move |g, v| {
        let bv = g.constant(bc.clone());
        let wv = g.constant(wc.clone());
        let c = g.matmul_nt(v, bv).unwrap();
        let c = g.mul(c, wv).unwrap();
        g.sum_all(c)
    });
    let (ac, wc) = (a.clone(), w.clone());
    assert_grad_matches(&b, move |g, v| {
        let av = g.constant(ac.clone());
        let wv = g.constant(wc.clone());
        let c = g.matmul_nt(av, v).unwrap();
        let c = g.mul(c, wv).unwrap();
        g.sum_all(c)
    });
    let shared = random(&[4, 5], &mut rng);
    let (ac, wc) = (a.clone(), w.clone());
    assert_grad_matches(&shared, move |g, v| {
        let av = g.constant(ac.clone());
        let wv = g.constant(wc.clone());
        let c = g.matmul(av, v).unwrap();
        let c = g.mul(c, wv).unwrap();
        g.sum_all(c)
    });
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[3], &[0.0, 0.0, 0.0]));
    let y = g.softmax_last(x).unwrap();
    for &v in g.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = g.constant(t(&[2], &[1000.0, 0.0]));
    let y = g.softmax_last(x).unwrap();
    let d = g.value(y).data();
    assert!((d[0] - 1.0).abs() < 1e-12 && d[1].abs() < 1e-12);

    let x = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
    let y = g.softmax_last(x).unwrap();
    let denom: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
    for (i, &v) in g.value(y).data().iter().enumerate() {
        assert!((v - ((i + 1) as f64).exp() / denom).abs() < 1e-12);
    }
}

#[test]
fn softmax_rows_sum_to_one_and_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::from_fn(&[4, 6], |_| rng.random_range(-30.0..30.0));
    let mut g = Graph::new();
    let v = g.constant(x);
    let y = g.softmax_last(v).unwrap();
    for row in g.value(y).data().chunks(6) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|&p| p >= 0.0));
    }
    let x = random(&[2, 5], &mut rng);
    let w = random(&[2, 5], &mut rng);
    assert_grad_matches(&x, move |g, v| {
        let wv = g.constant(w.clone());
        let y = g.softmax_last(v).unwrap();
        let y = g.mul(y, wv).unwrap();
        g.sum_all(y)
    });
}

#[test]
fn activation_values_and_derivatives() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::scalar(0.0));
    let s = g.sigmoid(x);
    assert_eq!(g.value(s).item(), 0.5);
    let th = g.tanh(x);
    assert_eq!(g.value(th).item(), 0.0);
    let grads = g.backward(th).unwrap();
    assert_eq!(grads.wrt(x).unwrap().item(), 1.0);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100 {
        let v: f64 = rng.random_range(-40.0..40.0);
        let oracle = v.exp().ln_1p();
        assert!((softplus(v) - oracle).abs() < 1e-12, "softplus({v})");
    }

    let x = Tensor::from_fn(&[7], |i| -1.5 + 0.45 * i as f64 + 0.01);
    for act in [
        Activation::Sigmoid,
        Activation::Tanh,
        Activation::Relu,
        Activation::Softplus,
        Activation::Exp,
        Activation::Abs,
        Activation::Square,
        Activation::Neg,
    ] {
        assert_grad_matches(&x, move |g, v| {
            let y = g.unary(v, act);
            let y = g.square(y);
            g.sum_all(y)
        });
    }
    let pos = Tensor::from_fn(&[5], |i| 0.3 + i as f64);
    assert_grad_matches(&pos, |g, v| {
        let y = g.ln(v);
        let y = g.powf(y, 3.0);
        g.sum_all(y)
    });
}

#[test]
fn structural_ops_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&[3, 4, 2], &mut rng);
    let w = random(&[3, 2, 3], &mut rng);
    assert_grad_matches(&x, move |g, v| {
        let a = g.narrow_last(v, 1, 1).unwrap();
        let b = g.select(v, 1, 2).unwrap();
        let b = g.reshape(b, &[3, 1, 2]).unwrap();
        let s = g.sum_last(b).unwrap();
        let c = g.concat_last(&[a, v]).unwrap();
        let c = g.select(c, 1, 0).unwrap();
        let st = g.stack(&[c, c], 1).unwrap();
        let wv = g.constant(w.clone());
        let p = g.mul(st, wv).unwrap();
        let p = g.sum_all(p);
        let q = g.sum_all(s);
        let q = g.square(q);
        g.add(p, q).unwrap()
    });
    let x = random(&[5, 3], &mut rng);
    assert_grad_matches(&x, |g, v| {
        let r = g.gather_rows(v, &[4, 0, 4]).unwrap();
        let s = g.gather_sum_rows(v, &[vec![1, 2], vec![], vec![3, 3]]).unwrap();
        let m = g.mul(r, s).unwrap();
        let f = g.masked_fill(m, &[false, true, false], 0.0).unwrap();
        g.sum_all(f)
    });
}

#[test]
fn broadcasting_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let big = random(&[2, 3, 4], &mut rng);
    let row = random(&[4], &mut rng);
    let col = random(&[2, 3, 1], &mut rng);
    let (bc, cc) = (big.clone(), col.clone());
    assert_grad_matches(&row, move |g, v| {
        let b = g.constant(bc.clone());
        let c = g.constant(cc.clone());
        let y = g.add(b, v).unwrap();
        let y = g.mul(y, c).unwrap();
        let y = g.sub(y, v).unwrap();
        let y = g.square(y);
        g.sum_all(y)
    });
    let (bc, rc) = (big.clone(), row.clone());
    assert_grad_matches(&col, move |g, v| {
        let b = g.constant(bc.clone());
        let r = g.constant(rc.clone());
        let y = g.mul(b, v).unwrap();
        let y = g.sub(r, y).unwrap();
        let y = g.square(y);
        g.sum_all(y)
    });
}

#[test]
fn masked_fill_with_neg_infinity_renormalises() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[2, 3]));
    let m = g.masked_fill(x, &[false, false, true], f64::NEG_INFINITY).unwrap();
    let y = g.softmax_last(m).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5, 0.0, 0.5, 0.5, 0.0]);
}

#[test]
fn grad_check_tanh_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut params = ParamSet::new();
    let w = params.add_uniform("w", &[3, 4], 0.3, &mut rng).unwrap();
    let x = random(&[4, 2], &mut rng);
    let report = grad_check(
        |g: &mut Graph, p: &ParamSet| {
            let wv = g.param(p, w);
            let xv = g.constant(x.clone());
            let y = g.matmul(wv, xv)?;
            let y = g.tanh(y);
            Ok(g.sum_all(y))
        },
        &params,
        1e-6,
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
    assert_eq!(report.n_checked, 12);
}

#[test]
fn grad_check_constant_function_has_zero_gradients() {
    let mut params = ParamSet::new();
    let w = params.add("w", Tensor::ones(&[2, 2])).unwrap();
    let f = |g: &mut Graph, p: &ParamSet| {
        let wv = g.param(p, w);
        let z = g.scale(wv, 0.0);
        let s = g.sum_all(z);
        Ok(g.add_scalar(s, 3.0))
    };
    let mut g = Graph::new();
    let out = f(&mut g, &params).unwrap();
    let grads = g.backward(out).unwrap().param_grads(&params);
    assert!(grads[0].data().iter().all(|&v| v == 0.0));
    assert!(grad_check(f, &params, 1e-9).unwrap().passed());
}

#[test]
fn grad_check_rejects_non_finite_objective() {
    let mut params = ParamSet::new();
    let w = params.add("w", Tensor::full(&[1], -1.0)).unwrap();
    let res = grad_check(
        |g: &mut Graph, p: &ParamSet| {
            let wv = g.param(p, w);
            let l = g.ln(wv);
            Ok(g.sum_all(l))
        },
        &params,
        1e-6,
    );
    assert!(matches!(res, Err(Error::NonFinite(_))));
}

#[test]
fn duplicate_parameter_names_rejected() {
    let mut params = ParamSet::new();
    params.add("a", Tensor::zeros(&[1])).unwrap();
    assert!(params.add("a", Tensor::zeros(&[1])).is_err());
}
