//! Straight-line f64 re-implementations used as test oracles. Nothing here
//! touches the graph: parameters are read by name and every step is an
//! explicit loop.

use crate::nn::LN_EPS;
use crate::tensor::{ParamStore, Tensor};

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(t: &Tensor<f64>) -> Mat {
    let c = t.last_dim();
    t.data().chunks(c).map(|r| r.to_vec()).collect()
}

pub fn param(store: &ParamStore<f64>, name: &str) -> Vec<f64> {
    store
        .by_name(name)
        .unwrap_or_else(|| panic!("no parameter {name}"))
        .value
        .data()
        .to_vec()
}

pub fn matmul(a: &Mat, w: &[f64], d_out: usize) -> Mat {
    a.iter()
        .map(|row| {
            (0..d_out)
                .map(|o| {
                    row.iter()
                        .enumerate()
                        .map(|(i, x)| x * w[i * d_out + o])
                        .sum()
                })
                .collect()
        })
        .collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

pub fn relu(a: &Mat) -> Mat {
    a.iter()
        .map(|r| r.iter().map(|x| x.max(0.0)).collect())
        .collect()
}

pub fn linear(store: &ParamStore<f64>, name: &str, x: &Mat) -> Mat {
    let w = store.by_name(&format!("{name}.weight")).unwrap();
    let d_out = w.value.shape()[1];
    let mut y = matmul(x, w.value.data(), d_out);
    if let Some(b) = store.by_name(&format!("{name}.bias")) {
        for row in &mut y {
            for (v, bb) in row.iter_mut().zip(b.value.data()) {
                *v += bb;
            }
        }
    }
    y
}

pub fn layer_norm(store: &ParamStore<f64>, name: &str, x: &Mat) -> Mat {
    let gain = param(store, &format!("{name}.gain"));
    let bias = param(store, &format!("{name}.bias"));
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let s = (var + LN_EPS).sqrt();
            row.iter()
                .enumerate()
                .map(|(i, v)| (v - mean) / s * gain[i] + bias[i])
                .collect()
        })
        .collect()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Returns the output and the per-head attention rows `[heads][Lq][Lk]`.
pub fn attention(
    store: &ParamStore<f64>,
    name: &str,
    q_in: &Mat,
    kv_in: &Mat,
    heads: usize,
) -> (Mat, Vec<Mat>) {
    let q = linear(store, &format!("{name}.query"), q_in);
    let k = linear(store, &format!("{name}.key"), kv_in);
    let v = linear(store, &format!("{name}.value"), kv_in);
    let d = q[0].len();
    let dk = d / heads;
    let mut joined = vec![vec![0.0; d]; q.len()];
    let mut maps = Vec::new();
    for h in 0..heads {
        let cols = h * dk..(h + 1) * dk;
        let mut map = Vec::new();
        for (i, qi) in q.iter().enumerate() {
            let scores: Vec<f64> = k
                .iter()
                .map(|kj| cols.clone().map(|c| qi[c] * kj[c]).sum::<f64>() / (dk as f64).sqrt())
                .collect();
            let a = softmax(&scores);
            for c in cols.clone() {
                joined[i][c] = a.iter().zip(&v).map(|(w, vj)| w * vj[c]).sum();
            }
            map.push(a);
        }
        maps.push(map);
    }
    (linear(store, &format!("{name}.output"), &joined), maps)
}

pub fn ffn(store: &ParamStore<f64>, name: &str, x: &Mat) -> Mat {
    let h = relu(&linear(store, &format!("{name}.up"), x));
    linear(store, &format!("{name}.down"), &h)
}

pub fn conv(store: &ParamStore<f64>, name: &str, x: &Mat) -> Mat {
    let kt = store.by_name(&format!("{name}.kernel")).unwrap();
    let (k, d, d_out) = (
        kt.value.shape()[0],
        kt.value.shape()[1],
        kt.value.shape()[2],
    );
    let ker = kt.value.data();
    let b = param(store, &format!("{name}.bias"));
    let pad = (k - 1) as isize / 2;
    let t = x.len() as isize;
    (0..t)
        .map(|row| {
            (0..d_out)
                .map(|o| {
                    let mut acc = b[o];
                    for j in 0..k {
                        let src = row + j as isize - pad;
                        if src < 0 || src >= t {
                            continue;
                        }
                        for c in 0..d {
                            acc += x[src as usize][c] * ker[(j * d + c) * d_out + o];
                        }
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

pub fn sinusoid(n: usize, d: usize) -> Mat {
    (0..n)
        .map(|p| {
            (0..d)
                .map(|i| {
                    let angle = p as f64 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
                    if i % 2 == 0 {
                        angle.sin()
                    } else {
                        angle.cos()
                    }
                })
                .collect()
        })
        .collect()
}

pub fn feature_encoder(
    store: &ParamStore<f64>,
    name: &str,
    x: &Mat,
    conv_layers: usize,
    heads: usize,
) -> Mat {
    let x1 = add(x, &sinusoid(x.len(), x[0].len()));
    let mut h = layer_norm(store, &format!("{name}.ln_conv"), &x1);
    for i in 0..conv_layers {
        h = relu(&conv(store, &format!("{name}.conv{i}"), &h));
    }
    let x2 = add(&h, &x1);
    let n = layer_norm(store, &format!("{name}.ln_attn"), &x2);
    let (a, _) = attention(store, &format!("{name}.attn"), &n, &n, heads);
    let x3 = add(&a, &x2);
    let n = layer_norm(store, &format!("{name}.ln_ffn"), &x3);
    add(&ffn(store, &format!("{name}.ffn"), &n), &x3)
}

pub fn co_attention(store: &ParamStore<f64>, name: &str, q: &Mat, kv: &Mat, heads: usize) -> Mat {
    let (a, _) = attention(store, &format!("{name}.attn"), q, kv, heads);
    let q2 = layer_norm(store, &format!("{name}.ln_attn"), &add(&a, q));
    let f = ffn(store, &format!("{name}.ffn"), &q2);
    layer_norm(store, &format!("{name}.ln_ffn"), &add(&f, &q2))
}

/// Transformer over `[tok; q; v] + pos` (or `[q; v] + pos[1..]` without the
/// token). Returns the final sequence and the per-layer attention maps.
pub fn vl_transformer(
    store: &ParamStore<f64>,
    q: &Mat,
    v: &Mat,
    layers: usize,
    heads: usize,
    use_token: bool,
) -> (Mat, Vec<Vec<Mat>>) {
    let d = q[0].len();
    let pos = param(store, "transformer.pos_table");
    let mut seq = Vec::new();
    if use_token {
        seq.push(param(store, "transformer.reg_token"));
    }
    seq.extend(q.iter().cloned());
    seq.extend(v.iter().cloned());
    let offset = if use_token { 0 } else { 1 };
    let mut z: Mat = seq
        .iter()
        .enumerate()
        .map(|(i, r)| {
            r.iter()
                .enumerate()
                .map(|(c, x)| x + pos[(i + offset) * d + c])
                .collect()
        })
        .collect();
    let mut maps = Vec::new();
    for b in 0..layers {
        let name = format!("transformer.block{b}");
        let n = layer_norm(store, &format!("{name}.ln_attn"), &z);
        let (a, m) = attention(store, &format!("{name}.attn"), &n, &n, heads);
        let z1 = add(&a, &z);
        let n = layer_norm(store, &format!("{name}.ln_ffn"), &z1);
        z = add(&ffn(store, &format!("{name}.ffn"), &n), &z1);
        maps.push(m);
    }
    if store.by_name("transformer.final_ln.gain").is_some() {
        z = layer_norm(store, "transformer.final_ln", &z);
    }
    (z, maps)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn regression_head(store: &ParamStore<f64>, name: &str, x: &[f64]) -> [f64; 2] {
    let x = vec![x.to_vec()];
    let h = relu(&linear(store, &format!("{name}.fc0"), &x));
    let h = relu(&linear(store, &format!("{name}.fc1"), &h));
    let o = linear(store, &format!("{name}.fc2"), &h);
    [sigmoid(o[0][0]), sigmoid(o[0][1])]
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len());
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

pub fn random_mat(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}
