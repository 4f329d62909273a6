use proptest::prelude::*;

use super::*;
use crate::Error;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn wavy(shape: &[usize], seed: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|i| ((i as f64 + 1.0) * 0.731 + seed).sin()).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

#[test]
fn contract_examples() {
    let g = Graph::new();
    let eye = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let b = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    assert_eq!(eye.contract("ij,jk->ik", &b).unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0]);

    let x = g.constant(t(&[2], &[1.0, 2.0]));
    let y = g.constant(t(&[2], &[3.0, 4.0]));
    assert_eq!(x.contract("a,a->", &y).unwrap().value().item().unwrap(), 11.0);

    let a = g.constant(Tensor::ones(&[2, 3, 1]));
    let v = g.constant(Tensor::ones(&[3, 1, 2]));
    let r = a.contract("mak,akv->mkv", &v).unwrap();
    assert!(r.value().data().iter().all(|&e| e == 3.0));

    let bad = g.constant(Tensor::ones(&[3, 3]));
    assert!(matches!(eye.contract("ij,jk->ik", &bad), Err(Error::Dimension(_))));
}

#[test]
fn elementwise_examples() {
    let g = Graph::new();
    let z = g.constant(Tensor::scalar(0.0));
    assert_eq!(z.sigmoid().value().item().unwrap(), 0.5);
    assert_eq!(z.tanh().value().item().unwrap(), 0.0);
    let e = g.constant(Tensor::scalar(-0.8)).exp().value().item().unwrap();
    assert!((e - 0.449329).abs() < 1e-6);

    let a = g.constant(Tensor::ones(&[2, 3]));
    let b = g.constant(Tensor::ones(&[2]));
    assert!(matches!(a.add(&b), Err(Error::Dimension(_))));
    let c = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
    assert_eq!(a.mul(&c).unwrap().value().data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    assert_eq!(a.sub(&c).unwrap().value().data()[2], -2.0);
    assert_eq!(c.scale(2.0).value().data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn softmax_examples() {
    let g = Graph::new();
    let u = g.constant(Tensor::zeros(&[3])).softmax(0).unwrap().value();
    assert!(u.data().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
    let one = g.constant(Tensor::scalar(7.0).reshape(vec![1]).unwrap()).softmax(0).unwrap();
    assert_eq!(one.value().data(), &[1.0]);
    let s = g.constant(t(&[2], &[1.0, 2.0])).softmax(0).unwrap().value();
    assert!((s.data()[0] - 0.26894).abs() < 1e-5);
    assert!((s.data()[1] - 0.73106).abs() < 1e-5);
    assert!(g.constant(Tensor::zeros(&[3])).softmax(1).is_err());
}

#[test]
fn structural_examples() {
    let g = Graph::new();
    let n = g.constant(t(&[2], &[3.0, 4.0])).l2_normalize(0).unwrap().value();
    assert!((n.data()[0] - 0.6).abs() < 1e-15 && (n.data()[1] - 0.8).abs() < 1e-15);
    let zero = g.constant(Tensor::zeros(&[2]));
    assert!(matches!(zero.l2_normalize(0), Err(Error::Degenerate(_))));

    let m = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    assert_eq!(m.reduce_sum(0).unwrap().value().data(), &[4.0, 6.0]);
    assert_eq!(m.reduce_sum(1).unwrap().value().data(), &[3.0, 7.0]);

    let a = g.constant(t(&[1], &[1.0]));
    let b = g.constant(t(&[1], &[2.0]));
    assert_eq!(Var::concat(&[a, b], 0).unwrap().value().data(), &[1.0, 2.0]);

    let cols = Var::concat(&[m, m], 1).unwrap();
    assert_eq!(cols.value().data(), &[1.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 4.0]);
    assert_eq!(cols.narrow(1, 1, 2).unwrap().value().data(), &[2.0, 1.0, 4.0, 3.0]);

    let w = g.constant(t(&[2, 1], &[1.0, -1.0]));
    let bias = g.constant(t(&[1], &[0.5]));
    assert_eq!(m.affine(&w, &bias).unwrap().value().data(), &[-0.5, -0.5]);
}

#[test]
fn bce_values() {
    let g = Graph::new();
    let l = g.constant(Tensor::zeros(&[4]));
    let v = l.bce_with_logits(&Tensor::ones(&[4])).unwrap().value().item().unwrap();
    assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
    let sat = g.constant(Tensor::full(&[1], 50.0));
    assert!(sat.bce_with_logits(&Tensor::ones(&[1])).unwrap().value().item().unwrap() < 1e-20);
}

#[test]
fn grad_check_examples() {
    let x = wavy(&[5], 0.3);
    let half_sq = grad_check(|_, x| Ok(x.mul(&x)?.sum().scale(0.5)), &x, 1e-5).unwrap();
    assert!(half_sq < 1e-8, "{half_sq}");
    let sig = grad_check(|_, x| Ok(x.sigmoid().sum()), &x, 1e-5).unwrap();
    assert!(sig < 1e-6, "{sig}");
    let sm = grad_check(|_, x| x.softmax(0)?.narrow(0, 0, 1)?.reshape(&[]), &x, 1e-5).unwrap();
    assert!(sm < 1e-6, "{sm}");
}

/// Weighted sum so that every output component carries a distinct gradient.
fn probe<'g>(v: Var<'g>) -> Result<Var<'g>, Error> {
    let w = v.graph().constant(wavy(&v.shape(), 1.7));
    Ok(v.mul(&w)?.sum())
}

#[test]
fn every_primitive_passes_grad_check() {
    let tol = 1e-6;
    let step = 1e-5;
    let x = wavy(&[3, 4], 0.1);
    let y = wavy(&[4, 2], 0.9);
    type Case<'a> = (&'static str, Box<dyn Fn() -> f64 + 'a>);
    let cases: Vec<Case> = vec![
        ("contract", Box::new(|| {
            grad_check_many(|_, v| probe(v[0].contract("ij,jk->ik", &v[1])?), &[x.clone(), y.clone()], step).unwrap()
        })),
        ("contract-batched", Box::new(|| {
            let a = wavy(&[2, 3, 2], 0.2);
            let b = wavy(&[3, 2, 4], 0.5);
            grad_check_many(|_, v| probe(v[0].contract("mak,akv->mkv", &v[1])?), &[a.clone(), b.clone()], step).unwrap()
        })),
        ("add-broadcast", Box::new(|| {
            let b = wavy(&[4], 0.4);
            grad_check_many(|_, v| probe(v[0].add(&v[1])?), &[x.clone(), b.clone()], step).unwrap()
        })),
        ("sub", Box::new(|| {
            let b = wavy(&[3, 1], 0.4);
            grad_check_many(|_, v| probe(v[0].sub(&v[1])?), &[x.clone(), b.clone()], step).unwrap()
        })),
        ("mul", Box::new(|| {
            let b = wavy(&[3, 4], 0.8);
            grad_check_many(|_, v| probe(v[0].mul(&v[1])?), &[x.clone(), b.clone()], step).unwrap()
        })),
        ("mul-self", Box::new(|| grad_check(|_, v| probe(v.mul(&v)?), &x, step).unwrap())),
        ("scale", Box::new(|| grad_check(|_, v| probe(v.scale(-1.5).add_scalar(2.0)), &x, step).unwrap())),
        ("exp", Box::new(|| grad_check(|_, v| probe(v.exp()), &x, step).unwrap())),
        ("tanh", Box::new(|| grad_check(|_, v| probe(v.tanh()), &x, step).unwrap())),
        ("sigmoid", Box::new(|| grad_check(|_, v| probe(v.sigmoid()), &x, step).unwrap())),
        ("relu", Box::new(|| grad_check(|_, v| probe(v.relu()), &x, step).unwrap())),
        ("softmax-0", Box::new(|| grad_check(|_, v| probe(v.softmax(0)?), &x, step).unwrap())),
        ("softmax-1", Box::new(|| grad_check(|_, v| probe(v.softmax(1)?), &x, step).unwrap())),
        ("reduce_sum", Box::new(|| grad_check(|_, v| probe(v.reduce_sum(0)?), &x, step).unwrap())),
        ("concat", Box::new(|| {
            grad_check_many(|_, v| probe(Var::concat(&[v[0], v[1]], 0)?), &[x.clone(), wavy(&[2, 4], 0.6)], step).unwrap()
        })),
        ("narrow", Box::new(|| grad_check(|_, v| probe(v.narrow(1, 1, 2)?), &x, step).unwrap())),
        ("reshape", Box::new(|| grad_check(|_, v| probe(v.reshape(&[2, 6])?), &x, step).unwrap())),
        ("affine", Box::new(|| {
            let b = wavy(&[2], 0.3);
            grad_check_many(|_, v| probe(v[0].affine(&v[1], &v[2])?), &[x.clone(), y.clone(), b.clone()], step).unwrap()
        })),
        ("l2_normalize", Box::new(|| grad_check(|_, v| probe(v.l2_normalize(1)?), &x, step).unwrap())),
        ("bce", Box::new(|| {
            let targets = Tensor::new(vec![3, 4], (0..12).map(|i| (i % 2) as f64).collect()).unwrap();
            grad_check(move |_, v| v.bce_with_logits(&targets), &x, step).unwrap()
        })),
    ];
    for (name, case) in cases {
        let err = case();
        assert!(err < tol, "{name}: relative error {err}");
    }
}

#[test]
fn straight_through_passes_gradient() {
    let g = Graph::new();
    let x = g.param(t(&[3], &[1.0, 2.0, 3.0]));
    let y = x.straight_through_mask(&[true, false, true]).unwrap();
    assert_eq!(y.value().data(), &[1.0, 0.0, 3.0]);
    let grads = g.backward(y.sum());
    assert_eq!(grads.wrt(x).unwrap().data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn unused_leaf_has_zero_gradient() {
    let g = Graph::new();
    let x = g.param(Tensor::ones(&[2]));
    let unused = g.param(Tensor::ones(&[3]));
    let c = g.constant(Tensor::ones(&[2]));
    let loss = x.mul(&x).unwrap().sum();
    let grads = g.backward(loss);
    assert_eq!(grads.wrt(unused).unwrap().data(), &[0.0, 0.0, 0.0]);
    assert!(grads.wrt(c).is_none());
}

#[test]
fn backward_accumulates_across_independent_subgraphs() {
    let g = Graph::new();
    let x = g.param(t(&[2], &[0.5, -1.0]));
    let f = x.exp().sum();
    let h = x.mul(&x).unwrap().sum();
    let gf = g.backward(f).wrt(x).unwrap().clone();
    let gh = g.backward(h).wrt(x).unwrap().clone();
    let total = f.add(&h).unwrap();
    let gt = g.backward(total).wrt(x).unwrap().clone();
    for i in 0..2 {
        assert!((gt.data()[i] - (gf.data()[i] + gh.data()[i])).abs() < 1e-15);
    }
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let g = Graph::new();
        let a = g.constant(wavy(&[7, 9], 0.2));
        let b = g.constant(wavy(&[9, 5], 0.4));
        a.contract("ij,jk->ik", &b).unwrap().softmax(1).unwrap().value().data().to_vec()
    };
    assert_eq!(run(), run());
}

#[test]
fn param_store_rejects_duplicates_and_keeps_order() {
    let mut p = ParamStore::new();
    p.insert("b", Tensor::ones(&[1])).unwrap();
    p.insert("a", Tensor::ones(&[2])).unwrap();
    assert!(p.insert("b", Tensor::ones(&[1])).is_err());
    assert_eq!(p.names().collect::<Vec<_>>(), vec!["b", "a"]);
    assert_eq!(p.numel(), 3);
}

proptest! {
    #[test]
    fn softmax_is_a_shift_invariant_distribution(
        xs in proptest::collection::vec(-20.0f64..20.0, 1..12),
        c in -50.0f64..50.0,
    ) {
        let g = Graph::new();
        let n = xs.len();
        let x = g.constant(Tensor::vector(xs.clone()).unwrap());
        let s = x.softmax(0).unwrap().value();
        let shifted = g.constant(Tensor::vector(xs.iter().map(|v| v - c).collect()).unwrap());
        let s2 = shifted.softmax(0).unwrap().value();
        let total: f64 = s.data().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        prop_assert!(s.data().iter().all(|&v| v >= 0.0));
        for i in 0..n {
            prop_assert!((s.data()[i] - s2.data()[i]).abs() < 1e-12);
        }
    }
}
