use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::VigtError;
use crate::nn::MultiHeadAttention;
use crate::reference::{self, random_mat};

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, data).unwrap()
}

/// Central differences of a scalar-valued graph function against its
/// reverse-mode gradient, for every element of every input.
fn check_grads(inputs: &[Tensor<f64>], f: impl Fn(&mut Graph<'_, f64>, &[Var]) -> Var, tol: f64) {
    let store = ParamStore::<f64>::new();
    let run = |xs: &[Tensor<f64>]| -> (f64, Vec<Tensor<f64>>) {
        let mut g = Graph::new(&store, false, 0);
        let vars: Vec<Var> = xs.iter().map(|x| g.leaf(x.clone())).collect();
        let out = f(&mut g, &vars);
        g.backward(out).unwrap();
        let grads = vars
            .iter()
            .zip(xs)
            .map(|(&v, x)| g.grad(v).unwrap_or_else(|| Tensor::zeros(x.shape())))
            .collect();
        (g.scalar(out), grads)
    };
    let (_, analytic) = run(inputs);
    let h = 1e-6;
    for (i, x) in inputs.iter().enumerate() {
        for e in 0..x.numel() {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[e] += h;
            let up = run(&xs).0;
            xs[i].data_mut()[e] -= 2.0 * h;
            let dn = run(&xs).0;
            let fd = (up - dn) / (2.0 * h);
            let a = analytic[i].data()[e];
            let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-8);
            assert!(rel < tol, "input {i} element {e}: analytic {a} vs fd {fd}");
        }
    }
}

#[test]
fn matmul_examples() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::eval(&store);
    let m = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let i = g.input(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let mv = g.input(m.clone());
    let out = g.matmul(i, mv).unwrap();
    assert_eq!(g.value(out), &m);

    let a = g.input(t(&[1, 2], &[1.0, 2.0]));
    let b = g.input(t(&[2, 1], &[3.0, 4.0]));
    let out = g.matmul(a, b).unwrap();
    assert_eq!(g.value(out).data(), &[11.0]);

    match g.matmul(a, a) {
        Err(VigtError::Dimension(msg)) => assert!(msg.contains("[1, 2]"), "{msg}"),
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn matmul_sum_gradient_is_ones_times_bt() {
    let (a, b) = (random_mat(3, 4, 1), random_mat(4, 2, 2));
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store, false, 0);
    let (va, vb) = (g.leaf(a), g.leaf(b.clone()));
    let p = g.matmul(va, vb).unwrap();
    let s = g.sum(p);
    g.backward(s).unwrap();
    let ga = g.grad(va).unwrap();
    for r in 0..3 {
        for c in 0..4 {
            let want: f64 = b.row(c).iter().sum();
            assert!((ga.at(r, c) - want).abs() < 1e-12);
        }
    }
    check_grads(
        &[random_mat(3, 4, 3), random_mat(4, 2, 4)],
        |g, v| {
            let p = g.matmul_t(v[0], v[1], false, false).unwrap();
            let p = g.sigmoid(p);
            g.sum(p)
        },
        1e-6,
    );
    check_grads(
        &[random_mat(4, 3, 5), random_mat(2, 4, 6)],
        |g, v| {
            let p = g.matmul_t(v[0], v[1], true, true).unwrap();
            let p = g.sigmoid(p);
            g.sum(p)
        },
        1e-6,
    );
}

#[test]
fn softmax_examples() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::eval(&store);
    let x = g.input(t(&[1, 3], &[0.0, 0.0, 0.0]));
    let s = g.softmax_lastdim(x).unwrap();
    for &v in g.value(s).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = g.input(t(&[1, 2], &[1000.0, 0.0]));
    let s = g.softmax_lastdim(x).unwrap();
    let v = g.value(s).data();
    assert!(v.iter().all(|x| x.is_finite()));
    assert!((v[0] - 1.0).abs() < 1e-15 && v[1] < 1e-300);

    let raw = [0.3, -1.2, 2.5, 0.7];
    let x = g.input(t(&[1, 4], &raw));
    let s = g.softmax_lastdim(x).unwrap();
    let denom: f64 = raw.iter().map(|v| v.exp()).sum();
    for (got, r) in g.value(s).data().iter().zip(raw) {
        assert!((got - r.exp() / denom).abs() < 1e-12);
    }

    let x = g.input(t(&[1, 2], &[f64::NAN, 0.0]));
    assert!(matches!(g.softmax_lastdim(x), Err(VigtError::Numeric(_))));
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(values in prop::collection::vec(-1e4f64..1e4, 1..24), cols in 1usize..6) {
        let rows = values.len() / cols;
        prop_assume!(rows > 0);
        let store = ParamStore::<f64>::new();
        let mut g = Graph::eval(&store);
        let x = g.input(t(&[rows, cols], &values[..rows * cols]));
        let s = g.softmax_lastdim(x).unwrap();
        for row in g.value(s).data().chunks(cols) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_standardises(values in prop::collection::vec(-100f64..100.0, 8)) {
        let spread = values.iter().cloned().fold(f64::MIN, f64::max)
            - values.iter().cloned().fold(f64::MAX, f64::min);
        prop_assume!(spread > 1.0);
        let store = ParamStore::<f64>::new();
        let mut g = Graph::eval(&store);
        let x = g.input(t(&[1, 8], &values));
        let gain = g.input(Tensor::full(&[8], 1.0));
        let bias = g.input(Tensor::zeros(&[8]));
        let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
        let v = g.value(y).data();
        let mean = v.iter().sum::<f64>() / 8.0;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 8.0;
        prop_assert!(mean.abs() < 1e-5);
        prop_assert!((var - 1.0).abs() < 1e-5);
    }
}

#[test]
fn softmax_gradient() {
    check_grads(
        &[random_mat(3, 5, 7), random_mat(3, 5, 8)],
        |g, v| {
            let s = g.softmax_lastdim(v[0]).unwrap();
            let w = g.mul(s, v[1]).unwrap();
            g.sum(w)
        },
        1e-6,
    );
}

#[test]
fn layer_norm_examples() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::eval(&store);
    let gain = g.input(t(&[3], &[2.0, 2.0, 2.0]));
    let bias = g.input(t(&[3], &[0.5, -1.0, 0.0]));
    let x = g.input(t(&[1, 3], &[4.0, 4.0, 4.0]));
    let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, -1.0, 0.0]);

    let gain = g.input(Tensor::full(&[2], 1.0));
    let bias = g.input(Tensor::zeros(&[2]));
    let x = g.input(t(&[1, 2], &[1.0, 3.0]));
    let eps = 1e-5;
    let y = g.layer_norm(x, gain, bias, eps).unwrap();
    let s = 1.0 / (1.0f64 + eps).sqrt();
    let v = g.value(y).data();
    assert!((v[0] + s).abs() < 1e-15 && (v[1] - s).abs() < 1e-15);

    let empty = g.input(Tensor::zeros(&[2, 0]));
    let gz = g.input(Tensor::zeros(&[0]));
    assert!(g.layer_norm(empty, gz, gz, eps).is_err());
}

#[test]
fn layer_norm_gradient() {
    check_grads(
        &[
            random_mat(3, 6, 9),
            random_mat(1, 6, 10).reshaped(&[6]).unwrap(),
            random_mat(1, 6, 11).reshaped(&[6]).unwrap(),
            random_mat(3, 6, 12),
        ],
        |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
            let w = g.mul(y, v[3]).unwrap();
            g.sum(w)
        },
        1e-6,
    );
}

#[test]
fn conv_examples() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::eval(&store);
    let x = random_mat(5, 3, 13);
    let xv = g.input(x.clone());
    let mut eye = vec![0.0; 9];
    for i in 0..3 {
        eye[i * 3 + i] = 1.0;
    }
    let k = g.input(t(&[1, 3, 3], &eye));
    let b = g.input(Tensor::zeros(&[3]));
    let y = g.conv1d(xv, k, b).unwrap();
    assert_eq!(g.value(y), &x);

    let x = g.input(t(&[3, 1], &[1.0, 2.0, 3.0]));
    let k = g.input(t(&[3, 1, 1], &[1.0 / 3.0; 3]));
    let b = g.input(Tensor::zeros(&[1]));
    let y = g.conv1d(x, k, b).unwrap();
    let want = [1.0, 2.0, 5.0 / 3.0];
    // [0+1+2]/3, [1+2+3]/3, [2+3+0]/3
    for (got, w) in g.value(y).data().iter().zip(want) {
        assert!((got - w).abs() < 1e-15, "{got} vs {w}");
    }

    let k = g.input(Tensor::zeros(&[2, 1, 1]));
    assert!(matches!(g.conv1d(x, k, b), Err(VigtError::Config(_))));
}

#[test]
fn conv_gradient() {
    check_grads(
        &[
            random_mat(6, 3, 14),
            random_mat(3, 6, 15).reshaped(&[3, 3, 2]).unwrap(),
            random_mat(1, 2, 16).reshaped(&[2]).unwrap(),
        ],
        |g, v| {
            let y = g.conv1d(v[0], v[1], v[2]).unwrap();
            let y = g.sigmoid(y);
            g.sum(y)
        },
        1e-5,
    );
}

#[test]
fn elementwise_gradients() {
    let pos = Tensor::from_f64(&[2, 3], &[0.4, 1.3, 2.2, 0.7, 0.9, 3.1]).unwrap();
    check_grads(
        &[random_mat(2, 3, 17), pos.clone()],
        |g, v| {
            let a = g.add(v[0], v[1]).unwrap();
            let b = g.sub(a, v[1]).unwrap();
            let c = g.div(b, v[1]).unwrap();
            let d = g.log(v[1]).unwrap();
            let e = g.mul(c, d).unwrap();
            let f = g.scale(e, 1.5);
            let f = g.add_scalar(f, 0.25);
            g.mean(f)
        },
        1e-6,
    );
    // values kept away from the kinks at 0 and +-1
    let x = Tensor::from_f64(&[1, 6], &[-2.3, -0.6, -0.2, 0.3, 0.7, 1.8]).unwrap();
    check_grads(
        &[x.clone()],
        |g, v| {
            let r = g.relu(v[0]);
            let s = g.smooth_l1(v[0]);
            let c = g.clamp(v[0], -1.0, 1.0);
            let rs = g.add(r, s).unwrap();
            let all = g.add(rs, c).unwrap();
            g.sum(all)
        },
        1e-6,
    );
    check_grads(
        &[random_mat(2, 3, 18), random_mat(2, 3, 19)],
        |g, v| {
            let m = g.maximum(v[0], v[1]).unwrap();
            let n = g.minimum(v[0], v[1]).unwrap();
            let p = g.mul(m, n).unwrap();
            g.sum(p)
        },
        1e-6,
    );
}

#[test]
fn shape_op_gradients() {
    check_grads(
        &[
            random_mat(2, 3, 20),
            random_mat(4, 3, 21),
            random_mat(2, 5, 22),
        ],
        |g, v| {
            let rows = g.concat_rows(&[v[0], v[1]]).unwrap();
            let sr = g.slice_rows(rows, 1, 4).unwrap();
            let cols = g.concat_cols(&[v[0], v[2]]).unwrap();
            let sc = g.slice_cols(cols, 2, 4).unwrap();
            let r = g.reshape(sc, &[4, 2]).unwrap();
            let r = g.slice_rows(r, 0, 3).unwrap();
            let prod = g.matmul(sr, r).unwrap();
            let s = g.sigmoid(prod);
            g.sum(s)
        },
        1e-6,
    );
}

#[test]
fn sigmoid_is_stable() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::eval(&store);
    let x = g.input(t(&[1, 3], &[-800.0, 0.0, 800.0]));
    let y = g.sigmoid(x);
    assert_eq!(g.value(y).data(), &[0.0, 0.5, 1.0]);
}

#[test]
fn attention_examples() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mha = MultiHeadAttention::new(&mut store, "mha", 8, 2, &mut rng).unwrap();
    let q = random_mat(4, 8, 23);
    let kv = random_mat(1, 8, 24);
    let mut g = Graph::eval(&store);
    let (qv, kvv) = (g.input(q), g.input(kv));
    let (_, map) = mha.forward(&mut g, qv, kvv, 0.0).unwrap();
    assert!(map.data.iter().all(|&a| a == 1.0));

    assert!(matches!(
        MultiHeadAttention::new(&mut store, "bad", 10, 4, &mut rng),
        Err(VigtError::Config(_))
    ));
}

/// Zero query and key projections give uniform attention, and with identity
/// value and output maps the result is the mean of the value rows.
#[test]
fn attention_reduces_to_mean_of_values() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let d = 6;
    let mha = MultiHeadAttention::new(&mut store, "mha", d, 3, &mut rng).unwrap();
    let mut eye = Tensor::zeros(&[d, d]);
    for i in 0..d {
        eye.data_mut()[i * d + i] = 1.0;
    }
    for (name, value) in [
        ("mha.query.weight", Tensor::zeros(&[d, d])),
        ("mha.key.weight", Tensor::zeros(&[d, d])),
        ("mha.value.weight", eye.clone()),
        ("mha.output.weight", eye),
    ] {
        store.by_name_mut(name).unwrap().value = value;
    }
    let x = random_mat(5, d, 25);
    let mut g = Graph::eval(&store);
    let xv = g.input(x.clone());
    let (out, _) = mha.forward(&mut g, xv, xv, 0.0).unwrap();
    for r in 0..5 {
        for c in 0..d {
            let mean = (0..5).map(|i| x.at(i, c)).sum::<f64>() / 5.0;
            assert!((g.value(out).at(r, c) - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_matches_reference_and_differentiates() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mha = MultiHeadAttention::new(&mut store, "mha", 8, 2, &mut rng).unwrap();
    let (q, kv) = (random_mat(3, 8, 26), random_mat(5, 8, 27));
    let mut g = Graph::eval(&store);
    let (qv, kvv) = (g.input(q.clone()), g.input(kv.clone()));
    let (out, map) = mha.forward(&mut g, qv, kvv, 0.0).unwrap();
    let (want, want_maps) = reference::attention(
        &store,
        "mha",
        &reference::to_mat(&q),
        &reference::to_mat(&kv),
        2,
    );
    assert!(reference::max_abs_diff(&reference::to_mat(g.value(out)), &want) < 1e-12);
    for h in 0..2 {
        for r in 0..3 {
            let row = map.row(h, r);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for c in 0..5 {
                assert!((row[c] - want_maps[h][r][c]).abs() < 1e-12);
            }
        }
    }

    // parameter gradients against central differences
    let loss_of = |s: &ParamStore<f64>| -> (f64, Gradients<f64>) {
        let mut g = Graph::new(s, false, 0);
        let (qv, kvv) = (g.input(q.clone()), g.input(kv.clone()));
        let (out, _) = mha.forward(&mut g, qv, kvv, 0.0).unwrap();
        let sq = g.mul(out, out).unwrap();
        let l = g.sum(sq);
        g.backward(l).unwrap();
        (g.scalar(l), g.param_grads())
    };
    let (_, grads) = loss_of(&store);
    let h = 1e-6;
    for (id, p) in store.iter() {
        let analytic = grads.get(id).expect("every projection receives a gradient");
        for e in (0..p.value.numel()).step_by(5) {
            let mut s = store.clone();
            s.value_mut(id).data_mut()[e] += h;
            let up = loss_of(&s).0;
            s.value_mut(id).data_mut()[e] -= 2.0 * h;
            let dn = loss_of(&s).0;
            let fd = (up - dn) / (2.0 * h);
            let a = analytic.data()[e];
            let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-8);
            assert!(rel < 1e-4, "{} [{e}]: {a} vs {fd}", p.name);
        }
    }
}

#[test]
fn backward_examples() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store, false, 0);
    let x = g.leaf(t(&[1], &[3.0]));
    g.backward(x).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1.0]);

    let mut g = Graph::new(&store, false, 0);
    let x = g.leaf(t(&[2], &[1.0, 2.0]));
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
    // a second call accumulates
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[4.0, 8.0]);

    assert!(matches!(g.backward(sq), Err(VigtError::Usage(_))));
}

#[test]
fn shared_parameter_accumulates_both_uses() {
    let mut store = ParamStore::<f64>::new();
    let id = store.register("w", t(&[1, 1], &[3.0])).unwrap();
    let mut g = Graph::new(&store, false, 0);
    let a = g.param(id);
    let b = g.param(id);
    let p = g.mul(a, b).unwrap();
    g.backward(p).unwrap();
    assert_eq!(g.param_grads().get(id).unwrap().data(), &[6.0]);
}

#[test]
fn dropout_behaviour() {
    let store = ParamStore::<f64>::new();
    let x = random_mat(4, 50, 28);
    let mut g = Graph::eval(&store);
    let xv = g.input(x.clone());
    let y = g.dropout(xv, 0.5).unwrap();
    assert_eq!(g.value(y), &x);

    let mut g = Graph::new(&store, true, 11);
    let xv = g.input(x.clone());
    let y = g.dropout(xv, 0.25).unwrap();
    let mut dropped = 0;
    for (out, inp) in g.value(y).data().iter().zip(x.data()) {
        if *out == 0.0 {
            dropped += 1;
        } else {
            assert!((out - inp / 0.75).abs() < 1e-12);
        }
    }
    assert!((20..80).contains(&dropped), "{dropped} of 200 dropped");
    assert!(g.dropout(xv, 1.0).is_err());
}

#[test]
fn eval_forward_is_bit_identical() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mha = MultiHeadAttention::new(&mut store, "mha", 8, 4, &mut rng).unwrap();
    let x = random_mat(6, 8, 29);
    let run = || {
        let mut g = Graph::eval(&store);
        let xv = g.input(x.clone());
        let (out, _) = mha.forward(&mut g, xv, xv, 0.1).unwrap();
        g.value(out).clone()
    };
    assert_eq!(run(), run());
}

#[test]
fn f32_matches_f64_closely() {
    let (a, b) = (random_mat(5, 7, 30), random_mat(7, 3, 31));
    let s64 = ParamStore::<f64>::new();
    let s32 = ParamStore::<f32>::new();
    let mut g64 = Graph::eval(&s64);
    let mut g32 = Graph::eval(&s32);
    let (x, y) = (g64.input(a.clone()), g64.input(b.clone()));
    let p64 = g64.matmul(x, y).unwrap();
    let (x, y) = (g32.input(a.cast()), g32.input(b.cast()));
    let p32 = g32.matmul(x, y).unwrap();
    for (u, v) in g64.value(p64).data().iter().zip(g32.value(p32).data()) {
        assert!((u - *v as f64).abs() < 1e-4);
    }
}
