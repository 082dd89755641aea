use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape.to_vec(), data).unwrap()
}

fn rand_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    t(shape, &data)
}

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
    }
}

#[test]
fn matmul_examples() {
    let mut g = Graph::<f64>::new();
    let i = g.input(t(&[2, 2], &[1., 0., 0., 1.]));
    let ii = g.matmul(i, i).unwrap();
    assert_eq!(g.value(ii).data(), &[1., 0., 0., 1.]);

    let a = g.input(t(&[2, 2], &[1., 2., 3., 4.]));
    let b = g.input(t(&[2, 1], &[1., 1.]));
    let ab = g.matmul(a, b).unwrap();
    assert_eq!(g.shape(ab), &[2, 1]);
    assert_eq!(g.value(ab).data(), &[3., 7.]);

    let s = g.sum(ab);
    g.backward(s).unwrap();
    // d sum(ab) / da = ones[2,1] * b^T
    assert_eq!(g.grad(a).unwrap(), &[1., 1., 1., 1.]);
    assert_eq!(g.grad(b).unwrap(), &[4., 6.]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::<f32>::new();
    let a = g.input(Tensor::zeros([2, 3]).unwrap());
    let b = g.input(Tensor::zeros([2, 3]).unwrap());
    let err = g.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]"), "{err}");
}

#[test]
fn softmax_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.input(t(&[3], &[0., 0., 0.]));
    let y = g.softmax(x, 0).unwrap();
    close(g.value(y).data(), &[1. / 3.; 3], 1e-12);

    let x = g.input(t(&[3], &[1f64.ln(), 2f64.ln(), 3f64.ln()]));
    let y = g.softmax(x, 0).unwrap();
    close(g.value(y).data(), &[1. / 6., 2. / 6., 3. / 6.], 1e-12);

    assert!(g.softmax(x, 1).is_err());
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::<f64>::new();
    let gain = g.input(t(&[2], &[1., 1.]));
    let bias = g.input(t(&[2], &[0., 0.]));
    let x = g.input(t(&[2, 2], &[5., 5., 1., 3.]));
    let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
    let v = g.value(y).data();
    close(&v[..2], &[0., 0.], 0.0);
    // mean 2, variance 1: the eps shifts the result by about eps / 2
    close(&v[2..], &[-1., 1.], 1e-5);

    let bad = g.input(t(&[3], &[1., 1., 1.]));
    assert!(g.layer_norm(x, bad, bias, 1e-5).is_err());
}

#[test]
fn structural_examples() {
    let mut g = Graph::<f64>::new();
    let z = g.input(t(&[1], &[0.]));
    let gz = g.gelu(z);
    assert_eq!(g.value(gz).item(), 0.0);

    let m = g.input(t(&[2, 2], &[1., 5., 7., 2.]));
    let (mx, arg) = g.max_over_axis(m, 0).unwrap();
    assert_eq!(g.value(mx).data(), &[7., 5.]);
    assert_eq!(arg, vec![1, 0]);

    let x = g.input(t(&[2, 2], &[1., 2., 3., 4.]));
    let d = g.gather_rows(x, &[0, 0]).unwrap();
    assert_eq!(g.value(d).data(), &[1., 2., 1., 2.]);
    assert!(g.gather_rows(x, &[2]).is_err());
}

#[test]
fn max_ties_route_to_first_index() {
    let mut g = Graph::<f64>::new();
    let x = g.input(t(&[3, 1], &[2., 2., 1.]));
    let (m, _) = g.max_over_axis(x, 0).unwrap();
    let s = g.sum(m);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1., 0., 0.]);
}

#[test]
fn backward_basics() {
    let mut g = Graph::<f64>::new();
    let x = g.input(t(&[3], &[1., -2., 0.5]));
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1., 1., 1.]);

    let mut g = Graph::<f64>::new();
    let x = g.input(t(&[3], &[1., -2., 0.5]));
    let xx = g.mul(x, x).unwrap();
    let s = g.sum(xx);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2., -4., 1.]);

    // a second call accumulates
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[4., -8., 2.]);
    g.zero_grad();
    assert!(g.grad(x).is_none());
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::<f64>::new();
    let x = g.input(t(&[2], &[1., 2.]));
    assert!(matches!(g.backward(x), Err(Error::Contract(_))));
}

#[test]
fn shared_subexpression_matches_sum_rule() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let xv = rand_tensor(&mut rng, &[4, 3]);
    let wv = rand_tensor(&mut rng, &[3, 3]);

    // f(x) = sum(gelu(xW)) + sum(gelu(xW) * gelu(xW)) sharing h = gelu(xW)
    let mut g = Graph::<f64>::new();
    let x = g.input(xv.clone());
    let w = g.input(wv.clone());
    let xw = g.matmul(x, w).unwrap();
    let h = g.gelu(xw);
    let a = g.sum(h);
    let hh = g.mul(h, h).unwrap();
    let b = g.sum(hh);
    let f = g.add(a, b).unwrap();
    g.backward(f).unwrap();
    let shared = g.grad(x).unwrap().to_vec();

    let single = |second: bool| {
        let mut g = Graph::<f64>::new();
        let x = g.input(xv.clone());
        let w = g.input(wv.clone());
        let xw = g.matmul(x, w).unwrap();
        let h = g.gelu(xw);
        let out = if second {
            let hh = g.mul(h, h).unwrap();
            g.sum(hh)
        } else {
            g.sum(h)
        };
        g.backward(out).unwrap();
        g.grad(x).unwrap().to_vec()
    };
    let (ga, gb) = (single(false), single(true));
    let oracle: Vec<f64> = ga.iter().zip(&gb).map(|(a, b)| a + b).collect();
    close(&shared, &oracle, 1e-12);
}

#[test]
fn attention_matches_composed_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (batch, t, heads, dh) = (2, 3, 2, 2);
    let c = heads * dh;
    let qkv = rand_tensor(&mut rng, &[batch * t, 3 * c]);
    let mut g = Graph::<f64>::new();
    let x = g.input(qkv);
    let fused = g.attention(x, batch, heads).unwrap();
    let mut rows = Vec::new();
    for b in 0..batch {
        let seq = g.slice(x, 0, b * t, t).unwrap();
        let mut outs = Vec::new();
        for h in 0..heads {
            let q = g.slice(seq, 1, h * dh, dh).unwrap();
            let k = g.slice(seq, 1, c + h * dh, dh).unwrap();
            let v = g.slice(seq, 1, 2 * c + h * dh, dh).unwrap();
            let kt = g.transpose(k).unwrap();
            let s = g.matmul(q, kt).unwrap();
            let s = g.scale(s, 1.0 / (dh as f64).sqrt());
            let p = g.softmax(s, 1).unwrap();
            outs.push(g.matmul(p, v).unwrap());
        }
        rows.push(g.concat(&outs, 1).unwrap());
    }
    let composed = g.concat(&rows, 0).unwrap();
    close(g.value(fused).data(), g.value(composed).data(), 1e-12);
    assert!(g.attention(x, 4, 2).is_err());
}

fn mlp_loss(g: &mut Graph<f64>, v: &[Var]) -> crate::Result<Var> {
    // v = [x, w1, b1, w2, b2, w3, b3]
    let mut h = v[0];
    for (l, pair) in v[1..].chunks(2).enumerate() {
        h = g.matmul(h, pair[0])?;
        h = g.add_row(h, pair[1])?;
        if l < 2 {
            h = g.gelu(h);
        }
    }
    let hh = g.mul(h, h)?;
    Ok(g.mean(hh))
}

#[test]
fn three_layer_mlp_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let dims = [5, 8, 6, 3];
    let mut inputs = vec![rand_tensor(&mut rng, &[4, dims[0]])];
    for l in 0..3 {
        inputs.push(rand_tensor(&mut rng, &[dims[l], dims[l + 1]]));
        inputs.push(rand_tensor(&mut rng, &[dims[l + 1]]));
    }
    let r = check_gradients(&inputs, 1e-3, mlp_loss).unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

#[test]
fn f32_runs_are_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        store.normal("w", vec![6, 4], 0.5, &mut rng).unwrap();
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::full([3, 6], 0.25f32).unwrap());
        let w = g.param(&store, "w").unwrap();
        let y = g.matmul(x, w).unwrap();
        let y = g.softmax(y, 1).unwrap();
        let s = g.sum(y);
        let l = g.log(s);
        g.backward(l).unwrap();
        (g.value(y).data().to_vec(), g.param_grads())
    };
    assert_eq!(run(), run());
}

fn unary_case(op: &'static str) -> impl Fn(&mut Graph<f64>, &[Var]) -> crate::Result<Var> {
    move |g, v| {
        let y = match op {
            "gelu" => g.gelu(v[0]),
            "exp" => g.exp(v[0]),
            "softmax" => g.softmax(v[0], 1)?,
            "log_softmax" => g.log_softmax(v[0], 0)?,
            "transpose" => g.transpose(v[0])?,
            "layer_norm_plain" => g.layer_norm_plain(v[0], 1e-5),
            "mean_over_axis" => g.mean_over_axis(v[0], 0)?,
            "attention" => g.attention(v[0], 2, 2)?,
            _ => unreachable!(),
        };
        // a fixed non-uniform weighting exercises every output element
        let n = g.value(y).numel();
        let w = g.constant(Tensor::new(g.shape(y).to_vec(), (0..n).map(|i| 0.3 + i as f64 * 0.17).collect())?);
        let yw = g.mul(y, w)?;
        Ok(g.sum(yw))
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn unary_ops_match_finite_differences(seed in any::<u64>(), op in 0usize..8) {
        let names = ["gelu", "exp", "softmax", "log_softmax", "transpose", "layer_norm_plain", "mean_over_axis", "attention"];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = if names[op] == "attention" { [6, 12] } else { [3, 4] };
        let x = rand_tensor(&mut rng, &shape);
        let r = check_gradients(&[x], 1e-4, unary_case(names[op])).unwrap();
        prop_assert!(r.max_rel_error < 1e-4, "{} {:?}", names[op], r);
    }

    #[test]
    fn softmax_rows_sum_to_one(data in prop::collection::vec(-30.0f32..30.0, 12)) {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::new([3, 4], data).unwrap());
        let y = g.softmax(x, 1).unwrap();
        for r in 0..3 {
            let s: f32 = g.value(y).row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_rows_have_zero_mean(data in prop::collection::vec(-100.0f32..100.0, 16)) {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::new([2, 8], data).unwrap());
        let y = g.layer_norm_plain(x, 1e-5);
        for r in 0..2 {
            let m: f64 = g.value(y).row(r).iter().map(|&v| v as f64).sum::<f64>() / 8.0;
            prop_assert!(m.abs() < 1e-5);
        }
    }
}
