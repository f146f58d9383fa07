//! Forward ops and their vector-Jacobian products.

use rand::Rng;

use super::graph::{Graph, Op, Var};
use super::{Scalar, Tensor};
use crate::error::{Result, VigtError};

fn same_shape<E: Scalar>(g: &Graph<'_, E>, a: Var, b: Var, what: &str) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(VigtError::dim(format!(
            "{what}: shapes {:?} and {:?} differ",
            g.shape(a),
            g.shape(b)
        )));
    }
    Ok(())
}

fn map_unary<E: Scalar>(x: &Tensor<E>, f: impl Fn(E) -> E) -> Tensor<E> {
    Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect()).expect("shape")
}

fn zip_binary<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>, f: impl Fn(E, E) -> E) -> Tensor<E> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("shape")
}

/// Batch layout of a matmul: how many matrices each side holds.
struct MatMulPlan {
    m: usize,
    k: usize,
    n: usize,
    batch: usize,
    a_batched: bool,
    b_batched: bool,
    out_shape: Vec<usize>,
}

fn plan_matmul(sa: &[usize], sb: &[usize], a_t: bool, b_t: bool) -> Result<MatMulPlan> {
    let err = || {
        VigtError::dim(format!(
            "matmul: incompatible shapes {sa:?}{} x {sb:?}{}",
            if a_t { "^T" } else { "" },
            if b_t { "^T" } else { "" }
        ))
    };
    if sa.len() < 2 || sb.len() < 2 {
        return Err(err());
    }
    let (ra, ca) = (sa[sa.len() - 2], sa[sa.len() - 1]);
    let (rb, cb) = (sb[sb.len() - 2], sb[sb.len() - 1]);
    let (m, k) = if a_t { (ca, ra) } else { (ra, ca) };
    let (k2, n) = if b_t { (cb, rb) } else { (rb, cb) };
    if k != k2 {
        return Err(err());
    }
    let batch_a = &sa[..sa.len() - 2];
    let batch_b = &sb[..sb.len() - 2];
    let (batch_dims, a_batched, b_batched) = if batch_a == batch_b {
        (batch_a.to_vec(), !batch_a.is_empty(), !batch_b.is_empty())
    } else if batch_b.is_empty() {
        (batch_a.to_vec(), true, false)
    } else if batch_a.is_empty() {
        (batch_b.to_vec(), false, true)
    } else {
        return Err(err());
    };
    let batch = batch_dims.iter().product::<usize>().max(1);
    let mut out_shape = batch_dims;
    out_shape.extend([m, n]);
    Ok(MatMulPlan {
        m,
        k,
        n,
        batch,
        a_batched,
        b_batched,
        out_shape,
    })
}

impl<E: Scalar> Graph<'_, E> {
    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.requires_grad(v))
    }

    /// Matrix product over the last two dimensions. Leading batch dimensions
    /// must match or be absent on one side, which is then shared.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Matrix product with optional transposition of either operand.
    pub fn matmul_t(&mut self, a: Var, b: Var, a_t: bool, b_t: bool) -> Result<Var> {
        let p = plan_matmul(self.shape(a), self.shape(b), a_t, b_t)?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![E::zero(); p.batch * p.m * p.n];
        let (sa, sb, sc) = (p.m * p.k, p.k * p.n, p.m * p.n);
        for i in 0..p.batch {
            let ao = if p.a_batched { i * sa } else { 0 };
            let bo = if p.b_batched { i * sb } else { 0 };
            E::gemm(
                p.m,
                p.k,
                p.n,
                &av[ao..ao + sa],
                a_t,
                &bv[bo..bo + sb],
                b_t,
                &mut out[i * sc..(i + 1) * sc],
                false,
            );
        }
        let rg = self.rg(&[a, b]);
        let t = Tensor::new(p.out_shape, out)?;
        Ok(self.push(t, Op::MatMul { a, b, a_t, b_t }, rg))
    }

    /// `a + b`, where `b`'s shape must equal `a`'s or be a suffix of it
    /// (e.g. a bias row added to every row).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(VigtError::dim(format!(
                "add: cannot broadcast {sb:?} onto {sa:?}"
            )));
        }
        let bv = self.value(b).data();
        let chunk = bv.len();
        let mut out = self.value(a).clone();
        for row in out.data_mut().chunks_mut(chunk) {
            for (x, &y) in row.iter_mut().zip(bv) {
                *x = *x + y;
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "sub")?;
        let out = zip_binary(self.value(a), self.value(b), |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub { a, b }, rg))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "mul")?;
        let out = zip_binary(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul { a, b }, rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "div")?;
        let out = zip_binary(self.value(a), self.value(b), |x, y| x / y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Div { a, b }, rg))
    }

    /// Element-wise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "maximum")?;
        let out = zip_binary(
            self.value(a),
            self.value(b),
            |x, y| if x >= y { x } else { y },
        );
        for i in 0..out.numel() {
            let bit = self.value(a).data()[i] >= self.value(b).data()[i];
            self.note_branch(bit);
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Maximum { a, b }, rg))
    }

    /// Element-wise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "minimum")?;
        let out = zip_binary(
            self.value(a),
            self.value(b),
            |x, y| if x <= y { x } else { y },
        );
        for i in 0..out.numel() {
            let bit = self.value(a).data()[i] <= self.value(b).data()[i];
            self.note_branch(bit);
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Minimum { a, b }, rg))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let k = E::from_f64_lossy(k);
        let out = map_unary(self.value(a), |x| x * k);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale { a, k }, rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let c = E::from_f64_lossy(c);
        let out = map_unary(self.value(a), |x| x + c);
        let rg = self.rg(&[a]);
        self.push(out, Op::AddScalar { a }, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = map_unary(self.value(a), |x| if x > E::zero() { x } else { E::zero() });
        if self.track_branches {
            for i in 0..out.numel() {
                let bit = self.value(a).data()[i] > E::zero();
                self.note_branch(bit);
            }
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::Relu { a }, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = map_unary(self.value(a), |x| {
            if x >= E::zero() {
                E::one() / (E::one() + (-x).exp())
            } else {
                let e = x.exp();
                e / (E::one() + e)
            }
        });
        let rg = self.rg(&[a]);
        self.push(out, Op::Sigmoid { a }, rg)
    }

    /// Natural logarithm; non-positive input is a numeric error.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| !(x > E::zero())) {
            return Err(VigtError::Numeric("log of a non-positive value".into()));
        }
        let out = map_unary(self.value(a), E::ln);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Log { a }, rg))
    }

    /// Clamp into `[lo, hi]`; the gradient is zero outside the open interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let (lo, hi) = (E::from_f64_lossy(lo), E::from_f64_lossy(hi));
        let out = map_unary(self.value(a), |x| x.max(lo).min(hi));
        if self.track_branches {
            for i in 0..out.numel() {
                let x = self.value(a).data()[i];
                self.note_branch(x > lo);
                self.note_branch(x < hi);
            }
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::Clamp { a, lo, hi }, rg)
    }

    /// Element-wise smooth-L1 with threshold 1:
    /// `0.5 x^2` when `|x| < 1`, else `|x| - 0.5`.
    pub fn smooth_l1(&mut self, a: Var) -> Var {
        let half = E::from_f64_lossy(0.5);
        let out = map_unary(self.value(a), |x| {
            if x.abs() < E::one() {
                half * x * x
            } else {
                x.abs() - half
            }
        });
        if self.track_branches {
            for i in 0..out.numel() {
                let x = self.value(a).data()[i];
                self.note_branch(x.abs() < E::one());
                self.note_branch(x > E::zero());
            }
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::SmoothL1 { a }, rg)
    }

    /// Softmax over the last dimension, stabilised by subtracting the row max.
    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.data().iter().any(|v| v.is_nan()) {
            return Err(VigtError::Numeric("softmax input contains NaN".into()));
        }
        let c = x.last_dim();
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(c) {
            let max = row.iter().fold(E::neg_infinity(), |m, &v| m.max(v));
            let mut sum = E::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum = sum + *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Softmax { a }, rg))
    }

    /// Layer normalisation over the last dimension followed by the affine
    /// `gain * xhat + bias`. Variance is the biased (population) estimate.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        if d == 0 {
            return Err(VigtError::dim("layer_norm: zero-length last dimension"));
        }
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(VigtError::dim(format!(
                "layer_norm: gain {:?} / bias {:?} must be [{d}]",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let eps = E::from_f64_lossy(eps);
        let dn = E::from_usize(d).expect("usize");
        let rows = xv.rows();
        let mut xhat = vec![E::zero(); xv.numel()];
        let mut inv_std = vec![E::zero(); rows];
        let (gv, bv) = (self.value(gain).data(), self.value(bias).data());
        let mut out = vec![E::zero(); xv.numel()];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<E>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<E>() / dn;
            let is = E::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv[j] + bv[j];
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// "Same"-length 1-D convolution over the first axis of `x: [T, d]` with
    /// `kernel: [K, d, d_out]` (K odd, zero padding `(K-1)/2` each side) and
    /// `bias: [d_out]`.
    pub fn conv1d(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (sx, sk, sbias) = (self.shape(x), self.shape(kernel), self.shape(bias));
        if sk.len() != 3 || sk[0] % 2 == 0 {
            return Err(VigtError::config(format!(
                "conv1d: kernel must be [K, d, d_out] with odd K, got {sk:?}"
            )));
        }
        let (k, d, d_out) = (sk[0], sk[1], sk[2]);
        if sx.len() != 2 || sx[1] != d || sbias != [d_out] {
            return Err(VigtError::dim(format!(
                "conv1d: input {sx:?}, kernel {sk:?}, bias {sbias:?} do not agree"
            )));
        }
        let t = sx[0];
        let pad = (k - 1) / 2;
        let xv = self.value(x).data();
        let width = k * d;
        let mut cols = vec![E::zero(); t * width];
        for row in 0..t {
            for j in 0..k {
                let src = row as isize + j as isize - pad as isize;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let src = src as usize;
                cols[row * width + j * d..row * width + (j + 1) * d]
                    .copy_from_slice(&xv[src * d..(src + 1) * d]);
            }
        }
        let bv = self.value(bias).data();
        let mut out = Vec::with_capacity(t * d_out);
        for _ in 0..t {
            out.extend_from_slice(bv);
        }
        E::gemm(
            t,
            width,
            d_out,
            &cols,
            false,
            self.value(kernel).data(),
            false,
            &mut out,
            true,
        );
        let rg = self.rg(&[x, kernel, bias]);
        let value = Tensor::new(vec![t, d_out], out)?;
        Ok(self.push(
            value,
            Op::Conv1d {
                x,
                kernel,
                bias,
                cols,
                k,
            },
            rg,
        ))
    }

    /// Inverted dropout: survivors are scaled by `1/(1-rate)` in training;
    /// outside training (or at rate 0) the input node is returned unchanged.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(VigtError::config(format!(
                "dropout rate {rate} not in [0, 1)"
            )));
        }
        if !self.is_training() || rate == 0.0 {
            return Ok(a);
        }
        let keep = E::from_f64_lossy(1.0 / (1.0 - rate));
        let n = self.value(a).numel();
        let mask: Vec<E> = (0..n)
            .map(|_| {
                if self.rng.random::<f64>() >= rate {
                    keep
                } else {
                    E::zero()
                }
            })
            .collect();
        let out = zip_binary(
            self.value(a),
            &Tensor::new(self.shape(a).to_vec(), mask.clone())?,
            |x, m| x * m,
        );
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Dropout { a, mask }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<E>();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum { a }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s = x.data().iter().copied().sum::<E>() / E::from_usize(x.numel()).expect("usize");
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean { a }, rg)
    }

    /// Concatenation along the first dimension.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| VigtError::dim("concat_rows: no inputs"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return Err(VigtError::dim(format!(
                    "concat_rows: trailing dims {:?} vs {:?}",
                    &s[1..],
                    tail
                )));
            }
            rows += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// Concatenation of 2-D tensors along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| VigtError::dim("concat_cols: no inputs"))?;
        let rows = self.shape(*first)[0];
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(VigtError::dim(format!("concat_cols: bad part shape {s:?}")));
            }
            total += s[1];
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::new(vec![rows, total], data)?,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// Rows `start..start+len` along the first dimension.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if len == 0 || start + len > s[0] {
            return Err(VigtError::dim(format!(
                "slice_rows: {start}..{} out of range for {s:?}",
                start + len
            )));
        }
        let inner: usize = s[1..].iter().product();
        let data = self.value(a).data()[start * inner..(start + len) * inner].to_vec();
        let mut shape = s;
        shape[0] = len;
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(shape, data)?, Op::SliceRows { a, start }, rg))
    }

    /// Columns `start..start+len` of a 2-D tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || len == 0 || start + len > s[1] {
            return Err(VigtError::dim(format!(
                "slice_cols: {start}..{} out of range for {s:?}",
                start + len
            )));
        }
        let x = self.value(a);
        let mut data = Vec::with_capacity(s[0] * len);
        for r in 0..s[0] {
            data.extend_from_slice(&x.row(r)[start..start + len]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::new(vec![s[0], len], data)?,
            Op::SliceCols { a, start },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Reshape { a }, rg))
    }

    pub(crate) fn backprop_node(&self, i: usize, g: &[E], grads: &mut [Option<Vec<E>>]) {
        let out = self.value(Var(i));
        match &self.nodes[i].op {
            Op::Input | Op::Param => unreachable!("leaves are handled by backward"),
            Op::MatMul { a, b, a_t, b_t } => {
                let (a, b, a_t, b_t) = (*a, *b, *a_t, *b_t);
                let p = plan_matmul(self.shape(a), self.shape(b), a_t, b_t).expect("planned");
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                let (sa, sb, sc) = (p.m * p.k, p.k * p.n, p.m * p.n);
                if self.requires_grad(a) {
                    Self::accumulate_with(grads, a, av.len(), |da| {
                        for bi in 0..p.batch {
                            let ao = if p.a_batched { bi * sa } else { 0 };
                            let bo = if p.b_batched { bi * sb } else { 0 };
                            let gc = &g[bi * sc..(bi + 1) * sc];
                            let bb = &bv[bo..bo + sb];
                            let dst = &mut da[ao..ao + sa];
                            if a_t {
                                // dA (stored [k, m]) = B' dC^T
                                E::gemm(p.k, p.n, p.m, bb, b_t, gc, true, dst, true);
                            } else {
                                // dA = dC B'^T
                                E::gemm(p.m, p.n, p.k, gc, false, bb, !b_t, dst, true);
                            }
                        }
                    });
                }
                if self.requires_grad(b) {
                    Self::accumulate_with(grads, b, bv.len(), |db| {
                        for bi in 0..p.batch {
                            let ao = if p.a_batched { bi * sa } else { 0 };
                            let bo = if p.b_batched { bi * sb } else { 0 };
                            let gc = &g[bi * sc..(bi + 1) * sc];
                            let aa = &av[ao..ao + sa];
                            let dst = &mut db[bo..bo + sb];
                            if b_t {
                                // dB (stored [n, k]) = dC^T A'
                                E::gemm(p.n, p.m, p.k, gc, true, aa, a_t, dst, true);
                            } else {
                                // dB = A'^T dC
                                E::gemm(p.k, p.m, p.n, aa, !a_t, gc, false, dst, true);
                            }
                        }
                    });
                }
            }
            Op::Add { a, b } => {
                if self.requires_grad(*a) {
                    Self::accumulate(grads, *a, g.to_vec());
                }
                if self.requires_grad(*b) {
                    let len = self.value(*b).numel();
                    Self::accumulate_with(grads, *b, len, |db| {
                        for chunk in g.chunks(len) {
                            for (d, &x) in db.iter_mut().zip(chunk) {
                                *d = *d + x;
                            }
                        }
                    });
                }
            }
            Op::Sub { a, b } => {
                if self.requires_grad(*a) {
                    Self::accumulate(grads, *a, g.to_vec());
                }
                if self.requires_grad(*b) {
                    Self::accumulate(grads, *b, g.iter().map(|&x| -x).collect());
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.requires_grad(*a) {
                    Self::accumulate(grads, *a, g.iter().zip(bv).map(|(&x, &y)| x * y).collect());
                }
                if self.requires_grad(*b) {
                    Self::accumulate(grads, *b, g.iter().zip(av).map(|(&x, &y)| x * y).collect());
                }
            }
            Op::Div { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.requires_grad(*a) {
                    Self::accumulate(grads, *a, g.iter().zip(bv).map(|(&x, &y)| x / y).collect());
                }
                if self.requires_grad(*b) {
                    let db = g
                        .iter()
                        .zip(av.iter().zip(bv))
                        .map(|(&x, (&p, &q))| -x * p / (q * q))
                        .collect();
                    Self::accumulate(grads, *b, db);
                }
            }
            Op::Maximum { a, b } | Op::Minimum { a, b } => {
                let is_max = matches!(self.nodes[i].op, Op::Maximum { .. });
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let pick_a: Vec<bool> = av
                    .iter()
                    .zip(bv)
                    .map(|(&x, &y)| if is_max { x >= y } else { x <= y })
                    .collect();
                if self.requires_grad(*a) {
                    let da = g
                        .iter()
                        .zip(&pick_a)
                        .map(|(&x, &p)| if p { x } else { E::zero() })
                        .collect();
                    Self::accumulate(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let db = g
                        .iter()
                        .zip(&pick_a)
                        .map(|(&x, &p)| if p { E::zero() } else { x })
                        .collect();
                    Self::accumulate(grads, *b, db);
                }
            }
            Op::Scale { a, k } => {
                if self.requires_grad(*a) {
                    Self::accumulate(grads, *a, g.iter().map(|&x| x * *k).collect());
                }
            }
            Op::AddScalar { a } | Op::Reshape { a } => {
                if self.requires_grad(*a) {
                    Self::accumulate(grads, *a, g.to_vec());
                }
            }
            Op::Relu { a } => {
                let av = self.value(*a).data();
                let da = g
                    .iter()
                    .zip(av)
                    .map(|(&x, &v)| if v > E::zero() { x } else { E::zero() })
                    .collect();
                Self::accumulate(grads, *a, da);
            }
            Op::Sigmoid { a } => {
                let y = out.data();
                let da = g
                    .iter()
                    .zip(y)
                    .map(|(&x, &s)| x * s * (E::one() - s))
                    .collect();
                Self::accumulate(grads, *a, da);
            }
            Op::Log { a } => {
                let av = self.value(*a).data();
                Self::accumulate(grads, *a, g.iter().zip(av).map(|(&x, &v)| x / v).collect());
            }
            Op::Clamp { a, lo, hi } => {
                let av = self.value(*a).data();
                let da = g
                    .iter()
                    .zip(av)
                    .map(|(&x, &v)| if v > *lo && v < *hi { x } else { E::zero() })
                    .collect();
                Self::accumulate(grads, *a, da);
            }
            Op::SmoothL1 { a } => {
                let av = self.value(*a).data();
                let da = g
                    .iter()
                    .zip(av)
                    .map(|(&x, &v)| {
                        if v.abs() < E::one() {
                            x * v
                        } else if v > E::zero() {
                            x
                        } else {
                            -x
                        }
                    })
                    .collect();
                Self::accumulate(grads, *a, da);
            }
            Op::Softmax { a } => {
                let c = out.last_dim();
                let y = out.data();
                let mut da = vec![E::zero(); y.len()];
                for ((dr, yr), gr) in da.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                    let dot = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum::<E>();
                    for j in 0..c {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                Self::accumulate(grads, *a, da);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = out.last_dim();
                let rows = inv_std.len();
                let gv = self.value(*gain).data();
                if self.requires_grad(*gain) {
                    Self::accumulate_with(grads, *gain, d, |dg| {
                        for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                            for j in 0..d {
                                dg[j] = dg[j] + gr[j] * hr[j];
                            }
                        }
                    });
                }
                if self.requires_grad(*bias) {
                    Self::accumulate_with(grads, *bias, d, |db| {
                        for gr in g.chunks(d) {
                            for j in 0..d {
                                db[j] = db[j] + gr[j];
                            }
                        }
                    });
                }
                if self.requires_grad(*x) {
                    let dn = E::from_usize(d).expect("usize");
                    let mut dx = vec![E::zero(); rows * d];
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut m1 = E::zero();
                        let mut m2 = E::zero();
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            m1 = m1 + dh;
                            m2 = m2 + dh * hr[j];
                        }
                        m1 = m1 / dn;
                        m2 = m2 / dn;
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            dx[r * d + j] = inv_std[r] * (dh - m1 - hr[j] * m2);
                        }
                    }
                    Self::accumulate(grads, *x, dx);
                }
            }
            Op::Conv1d {
                x,
                kernel,
                bias,
                cols,
                k,
            } => {
                let d_out = out.last_dim();
                let t = out.rows();
                let width = cols.len() / t;
                let d = width / *k;
                if self.requires_grad(*bias) {
                    Self::accumulate_with(grads, *bias, d_out, |db| {
                        for gr in g.chunks(d_out) {
                            for j in 0..d_out {
                                db[j] = db[j] + gr[j];
                            }
                        }
                    });
                }
                if self.requires_grad(*kernel) {
                    Self::accumulate_with(grads, *kernel, width * d_out, |dk| {
                        E::gemm(width, t, d_out, cols, true, g, false, dk, true);
                    });
                }
                if self.requires_grad(*x) {
                    let mut dcols = vec![E::zero(); t * width];
                    let kv = self.value(*kernel).data();
                    E::gemm(t, d_out, width, g, false, kv, true, &mut dcols, false);
                    let pad = (*k - 1) / 2;
                    Self::accumulate_with(grads, *x, t * d, |dx| {
                        for row in 0..t {
                            for j in 0..*k {
                                let src = row as isize + j as isize - pad as isize;
                                if src < 0 || src >= t as isize {
                                    continue;
                                }
                                let src = src as usize;
                                let from = &dcols[row * width + j * d..row * width + (j + 1) * d];
                                for (dst, &v) in dx[src * d..(src + 1) * d].iter_mut().zip(from) {
                                    *dst = *dst + v;
                                }
                            }
                        }
                    });
                }
            }
            Op::Dropout { a, mask } => {
                let da = g.iter().zip(mask).map(|(&x, &m)| x * m).collect();
                Self::accumulate(grads, *a, da);
            }
            Op::Sum { a } => {
                let n = self.value(*a).numel();
                Self::accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::Mean { a } => {
                let n = self.value(*a).numel();
                let v = g[0] / E::from_usize(n).expect("usize");
                Self::accumulate(grads, *a, vec![v; n]);
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if self.requires_grad(p) {
                        Self::accumulate(grads, p, g[offset..offset + n].to_vec());
                    }
                    offset += n;
                }
            }
            Op::ConcatCols { parts } => {
                let total = out.last_dim();
                let mut col = 0;
                for &p in parts {
                    let s = self.shape(p);
                    let (rows, c) = (s[0], s[1]);
                    if self.requires_grad(p) {
                        let mut dp = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            dp.extend_from_slice(&g[r * total + col..r * total + col + c]);
                        }
                        Self::accumulate(grads, p, dp);
                    }
                    col += c;
                }
            }
            Op::SliceRows { a, start } => {
                let inner: usize = out.shape()[1..].iter().product();
                let len = self.value(*a).numel();
                let off = start * inner;
                Self::accumulate_with(grads, *a, len, |da| {
                    for (d, &x) in da[off..off + g.len()].iter_mut().zip(g) {
                        *d = *d + x;
                    }
                });
            }
            Op::SliceCols { a, start } => {
                let cols_in = self.value(*a).last_dim();
                let c = out.last_dim();
                let len = self.value(*a).numel();
                Self::accumulate_with(grads, *a, len, |da| {
                    for (r, gr) in g.chunks(c).enumerate() {
                        let base = r * cols_in + start;
                        for (d, &x) in da[base..base + c].iter_mut().zip(gr) {
                            *d = *d + x;
                        }
                    }
                });
            }
        }
    }
}
