//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value. `backward`
//! replays the nodes in reverse and accumulates vector-Jacobian products.
//! A tape lives for one loss evaluation; nothing is retained across steps.

use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Conv2d { input: Var, kernel: Var, bias: Var },
    MeanPool2(Var),
    Reshape(Var),
    Softmax(Var),
    LnClamped(Var, f64),
    SoftmaxNll(Var, Vec<usize>),
    Pick(Var, Vec<usize>),
    SelectRows(Var, Vec<usize>),
    SumRows(Var),
    Sum(Var),
    Mean(Var),
    Square(Var),
    GradReverse(Var, f64),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, or `None` when the loss
    /// does not depend on it.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `var`, with zeros when the loss does not reach it.
    pub fn get_or_zeros(&self, var: Var, shape: &[usize]) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape.to_vec()))
    }
}

fn dims2(t: &Tensor, context: &str) -> Result<(usize, usize)> {
    match *t.shape() {
        [n, m] => Ok((n, m)),
        _ => Err(Error::Contract(format!(
            "{context} expects a matrix, got shape {:?}",
            t.shape()
        ))),
    }
}

fn dims4(t: &Tensor, context: &str) -> Result<[usize; 4]> {
    match *t.shape() {
        [b, c, h, w] => Ok([b, c, h, w]),
        _ => Err(Error::Contract(format!(
            "{context} expects a [batch, channels, height, width] tensor, got {:?}",
            t.shape()
        ))),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A tracked input whose gradient is reported by `backward`.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// An untracked input; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant)
    }

    /// Copies the current value of `v` as a constant, cutting the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = dims2(self.value(a), "matmul lhs")?;
        let (k2, m) = dims2(self.value(b), "matmul rhs")?;
        if k != k2 {
            return Err(Error::shape("matmul", &[k, m], &[k2, m]));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[p * m..(p + 1) * m];
                for (o, &w) in orow.iter_mut().zip(brow) {
                    *o += x * w;
                }
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// Adds a length-`m` bias to every row of an `[n, m]` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (n, m) = dims2(self.value(a), "add_bias")?;
        if self.value(bias).shape() != [m] {
            return Err(Error::shape("add_bias", &[m], self.value(bias).shape()));
        }
        let bv = self.value(bias).data().to_vec();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(m) {
            for (o, b) in row.iter_mut().zip(&bv) {
                *o += b;
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.push(value, Op::AddBias(a, bias)))
    }

    fn zip_same(&mut self, a: Var, b: Var, context: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(context, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same(a, b, "add", |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|x| x * factor).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Scale(a, factor))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Relu(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|x| x * x).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Square(a))
    }

    /// Valid (unpadded) stride-1 cross-correlation.
    ///
    /// `input` is `[batch, c_in, h, w]`, `kernel` is `[c_out, c_in, k, k]`,
    /// `bias` is `[c_out]`; the output is `[batch, c_out, h-k+1, w-k+1]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let [b, ci, h, w] = dims4(self.value(input), "conv2d input")?;
        let [co, ci2, kh, kw] = dims4(self.value(kernel), "conv2d kernel")?;
        if ci != ci2 {
            return Err(Error::shape("conv2d channels", &[co, ci, kh, kw], &[co, ci2, kh, kw]));
        }
        if self.value(bias).shape() != [co] {
            return Err(Error::shape("conv2d bias", &[co], self.value(bias).shape()));
        }
        if kh > h || kw > w {
            return Err(Error::Contract(format!(
                "conv2d kernel {kh}x{kw} larger than input {h}x{w}"
            )));
        }
        let (oh, ow) = (h - kh + 1, w - kw + 1);
        let x = self.value(input).data();
        let k = self.value(kernel).data();
        let bv = self.value(bias).data();
        let mut out = vec![0.0; b * co * oh * ow];
        for n in 0..b {
            for o in 0..co {
                let plane = &mut out[(n * co + o) * oh * ow..(n * co + o + 1) * oh * ow];
                plane.iter_mut().for_each(|v| *v = bv[o]);
                for c in 0..ci {
                    let xin = &x[(n * ci + c) * h * w..(n * ci + c + 1) * h * w];
                    let ker = &k[(o * ci + c) * kh * kw..(o * ci + c + 1) * kh * kw];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wgt = ker[ky * kw + kx];
                            for y in 0..oh {
                                let src = &xin[(y + ky) * w + kx..(y + ky) * w + kx + ow];
                                let dst = &mut plane[y * ow..(y + 1) * ow];
                                for (d, s) in dst.iter_mut().zip(src) {
                                    *d += wgt * s;
                                }
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![b, co, oh, ow], out)?;
        Ok(self.push(value, Op::Conv2d { input, kernel, bias }))
    }

    /// 2x2 mean pooling with stride 2; a trailing odd row or column is dropped.
    pub fn mean_pool2(&mut self, input: Var) -> Result<Var> {
        let [b, c, h, w] = dims4(self.value(input), "mean_pool2")?;
        if h < 2 || w < 2 {
            return Err(Error::Contract(format!("mean_pool2 needs at least 2x2 input, got {h}x{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let x = self.value(input).data();
        let mut out = vec![0.0; b * c * oh * ow];
        for p in 0..b * c {
            let src = &x[p * h * w..(p + 1) * h * w];
            for y in 0..oh {
                for xx in 0..ow {
                    let s = src[2 * y * w + 2 * xx]
                        + src[2 * y * w + 2 * xx + 1]
                        + src[(2 * y + 1) * w + 2 * xx]
                        + src[(2 * y + 1) * w + 2 * xx + 1];
                    out[p * oh * ow + y * ow + xx] = 0.25 * s;
                }
            }
        }
        let value = Tensor::new(vec![b, c, oh, ow], out)?;
        Ok(self.push(value, Op::MeanPool2(input)))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(a)))
    }

    /// Row-wise softmax of an `[n, m]` matrix.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (n, m) = dims2(self.value(a), "softmax")?;
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(m) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.push(value, Op::Softmax(a)))
    }

    /// `ln(max(x, floor))` elementwise; the gradient is zero where clamped.
    pub fn ln_clamped(&mut self, a: Var, floor: f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| x.max(floor).ln()).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::LnClamped(a, floor))
    }

    /// Per-row negative log-likelihood `-max(log_softmax(z_i)[y_i], ln floor)`
    /// from logits, shape `[n]`.
    ///
    /// The floor bounds the value only: the gradient is always
    /// `softmax(z_i) - onehot(y_i)`, so confidently wrong rows keep a signal.
    pub fn softmax_nll(&mut self, logits: Var, labels: &[usize], floor: f64) -> Result<Var> {
        let (n, m) = dims2(self.value(logits), "softmax_nll")?;
        if labels.len() != n {
            return Err(Error::shape("softmax_nll labels", &[n], &[labels.len()]));
        }
        if let Some(bad) = labels.iter().find(|&&j| j >= m) {
            return Err(Error::Range(format!("label {bad} with only {m} columns")));
        }
        let ln_floor = floor.ln();
        let out = self
            .value(logits)
            .data()
            .chunks(m)
            .zip(labels)
            .map(|(z, &y)| {
                let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                -(z[y] - lse).max(ln_floor)
            })
            .collect();
        let value = Tensor::new(vec![n], out)?;
        Ok(self.push(value, Op::SoftmaxNll(logits, labels.to_vec())))
    }

    /// Picks `a[i, index[i]]` from each row of an `[n, m]` matrix.
    pub fn pick(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let (n, m) = dims2(self.value(a), "pick")?;
        if index.len() != n {
            return Err(Error::shape("pick index", &[n], &[index.len()]));
        }
        if let Some(bad) = index.iter().find(|&&j| j >= m) {
            return Err(Error::Range(format!("pick column {bad} with only {m} columns")));
        }
        let data = self.value(a).data();
        let out = index.iter().enumerate().map(|(i, &j)| data[i * m + j]).collect();
        let value = Tensor::new(vec![n], out)?;
        Ok(self.push(value, Op::Pick(a, index.to_vec())))
    }

    /// Gathers rows (along the leading dimension) in the given order.
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let n = t.rows();
        if rows.is_empty() {
            return Err(Error::Contract("select_rows with no rows".into()));
        }
        if let Some(bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::Range(format!("row {bad} of a tensor with {n} rows")));
        }
        let w = t.row_len();
        let mut out = Vec::with_capacity(rows.len() * w);
        for &r in rows {
            out.extend_from_slice(t.row(r));
        }
        let mut shape = t.shape().to_vec();
        shape[0] = rows.len();
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::SelectRows(a, rows.to_vec())))
    }

    /// Sums each row of an `[n, m]` matrix into an `[n]` vector.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let (n, m) = dims2(self.value(a), "sum_rows")?;
        let out = self.value(a).data().chunks(m).map(|r| r.iter().sum()).collect();
        let value = Tensor::new(vec![n], out)?;
        Ok(self.push(value, Op::SumRows(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Identity forward; multiplies the incoming gradient by `-lambda`.
    pub fn grad_reverse(&mut self, a: Var, lambda: f64) -> Result<Var> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::Config(format!(
                "gradient reversal strength must be finite and >= 0, got {lambda}"
            )));
        }
        let value = self.value(a).clone();
        Ok(self.push(value, Op::GradReverse(a, lambda)))
    }

    /// Sum of scalar nodes.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| Error::Contract("add_all with no terms".into()))?;
        let mut acc = first;
        for &t in rest {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::Constant => {}
                Op::MatMul(a, b) => {
                    let (n, k) = dims2(self.value(*a), "matmul")?;
                    let m = self.value(*b).shape()[1];
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    let mut ga = vec![0.0; n * k];
                    let mut gb = vec![0.0; k * m];
                    for r in 0..n {
                        let grow = &g[r * m..(r + 1) * m];
                        for p in 0..k {
                            let brow = &bv[p * m..(p + 1) * m];
                            ga[r * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                            let x = av[r * k + p];
                            if x != 0.0 {
                                for (gbv, &gv) in gb[p * m..(p + 1) * m].iter_mut().zip(grow) {
                                    *gbv += x * gv;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::AddBias(a, b) => {
                    let m = self.value(*b).len();
                    let mut gb = vec![0.0; m];
                    for row in g.chunks(m) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.iter().map(|v| -v).collect());
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    let ga = g.iter().zip(bv).map(|(x, y)| x * y).collect();
                    let gb = g.iter().zip(av).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, f) => {
                    accumulate(&mut grads, *a, g.iter().map(|v| v * f).collect());
                }
                Op::Relu(a) => {
                    let x = self.value(*a).data();
                    let ga = g.iter().zip(x).map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 }).collect();
                    accumulate(&mut grads, *a, ga);
                }
                Op::Conv2d { input, kernel, bias } => {
                    let (gi, gk, gbias) = self.conv2d_backward(*input, *kernel, node, &g)?;
                    accumulate(&mut grads, *input, gi);
                    accumulate(&mut grads, *kernel, gk);
                    accumulate(&mut grads, *bias, gbias);
                }
                Op::MeanPool2(a) => {
                    let [b, c, h, w] = dims4(self.value(*a), "mean_pool2")?;
                    let (oh, ow) = (h / 2, w / 2);
                    let mut ga = vec![0.0; b * c * h * w];
                    for p in 0..b * c {
                        for y in 0..oh {
                            for x in 0..ow {
                                let v = 0.25 * g[p * oh * ow + y * ow + x];
                                let base = p * h * w;
                                ga[base + 2 * y * w + 2 * x] += v;
                                ga[base + 2 * y * w + 2 * x + 1] += v;
                                ga[base + (2 * y + 1) * w + 2 * x] += v;
                                ga[base + (2 * y + 1) * w + 2 * x + 1] += v;
                            }
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Reshape(a) => accumulate(&mut grads, *a, g),
                Op::Softmax(a) => {
                    let m = node.value.shape()[1];
                    let y = node.value.data();
                    let mut ga = vec![0.0; y.len()];
                    for ((grow, yrow), out) in g.chunks(m).zip(y.chunks(m)).zip(ga.chunks_mut(m)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((o, &gv), &yv) in out.iter_mut().zip(grow).zip(yrow) {
                            *o = yv * (gv - dot);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LnClamped(a, floor) => {
                    let x = self.value(*a).data();
                    let ga = g
                        .iter()
                        .zip(x)
                        .map(|(&gv, &xv)| if xv > *floor { gv / xv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *a, ga);
                }
                Op::SoftmaxNll(a, labels) => {
                    let z = self.value(*a);
                    let m = z.shape()[1];
                    let mut ga = Vec::with_capacity(z.len());
                    for ((row, &y), gv) in z.data().chunks(m).zip(labels).zip(g) {
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let total: f64 = row.iter().map(|v| (v - max).exp()).sum();
                        for (j, v) in row.iter().enumerate() {
                            let p = (v - max).exp() / total;
                            ga.push(gv * (p - if j == y { 1.0 } else { 0.0 }));
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Pick(a, index) => {
                    let m = self.value(*a).shape()[1];
                    let mut ga = vec![0.0; self.value(*a).len()];
                    for (i, &j) in index.iter().enumerate() {
                        ga[i * m + j] += g[i];
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SelectRows(a, rows) => {
                    let src = self.value(*a);
                    let w = src.row_len();
                    let mut ga = vec![0.0; src.len()];
                    for (k, &r) in rows.iter().enumerate() {
                        for (o, v) in ga[r * w..(r + 1) * w].iter_mut().zip(&g[k * w..(k + 1) * w]) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SumRows(a) => {
                    let m = self.value(*a).shape()[1];
                    let ga = g.iter().flat_map(|&v| std::iter::repeat_n(v, m)).collect();
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let n = self.value(*a).len();
                    accumulate(&mut grads, *a, vec![g[0]; n]);
                }
                Op::Mean(a) => {
                    let n = self.value(*a).len();
                    accumulate(&mut grads, *a, vec![g[0] / n as f64; n]);
                }
                Op::Square(a) => {
                    let x = self.value(*a).data();
                    accumulate(&mut grads, *a, g.iter().zip(x).map(|(gv, xv)| 2.0 * gv * xv).collect());
                }
                Op::GradReverse(a, lambda) => {
                    accumulate(&mut grads, *a, g.iter().map(|v| -lambda * v).collect());
                }
            }
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|g| Tensor::new(self.nodes[i].value.shape().to_vec(), g).expect("gradient shape")))
            .collect();
        Ok(Gradients { grads })
    }

    fn conv2d_backward(
        &self,
        input: Var,
        kernel: Var,
        node: &Node,
        g: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let [b, ci, h, w] = dims4(self.value(input), "conv2d input")?;
        let [co, _, kh, kw] = dims4(self.value(kernel), "conv2d kernel")?;
        let [_, _, oh, ow] = dims4(&node.value, "conv2d output")?;
        let x = self.value(input).data();
        let k = self.value(kernel).data();
        let mut gi = vec![0.0; x.len()];
        let mut gk = vec![0.0; k.len()];
        let mut gb = vec![0.0; co];
        for n in 0..b {
            for o in 0..co {
                let gplane = &g[(n * co + o) * oh * ow..(n * co + o + 1) * oh * ow];
                gb[o] += gplane.iter().sum::<f64>();
                for c in 0..ci {
                    let xin = &x[(n * ci + c) * h * w..(n * ci + c + 1) * h * w];
                    let gin = &mut gi[(n * ci + c) * h * w..(n * ci + c + 1) * h * w];
                    let kbase = (o * ci + c) * kh * kw;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wgt = k[kbase + ky * kw + kx];
                            let mut acc = 0.0;
                            for y in 0..oh {
                                let grow = &gplane[y * ow..(y + 1) * ow];
                                let off = (y + ky) * w + kx;
                                let xrow = &xin[off..off + ow];
                                acc += grow.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>();
                                for (d, gv) in gin[off..off + ow].iter_mut().zip(grow) {
                                    *d += wgt * gv;
                                }
                            }
                            gk[kbase + ky * kw + kx] += acc;
                        }
                    }
                }
            }
        }
        Ok((gi, gk, gb))
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], target: Var, contribution: Vec<f64>) {
    match &mut grads[target.0] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}
