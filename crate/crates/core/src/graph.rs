//! Reverse-mode autodiff tape over [`Tensor`]s.
//!
//! Every operation evaluates eagerly and appends a node; [`Graph::backward`]
//! walks the tape in reverse. Nodes only receive gradients when one of their
//! ancestors is a parameter.

use crate::error::{Error, Result};
use crate::kernels::{self, AttnGeom, ConvGeom};
use crate::tensor::{check_same_dims, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Silu(Var),
    Sigmoid(Var),
    Concat(Var, Var),
    Upsample2(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        tau: T,
        geom: AttnGeom,
        probs: Vec<T>,
    },
    Charbonnier {
        pred: Var,
        target: Var,
        eps: T,
    },
    Mse(Var, Var),
    HalfSumSq(Var),
    WeightedSum {
        a: Var,
        b: Var,
        weight: T,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar with respect to every node that needs one.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant: no gradient flows into it.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    /// Softmax probabilities cached by an attention node, laid out `(N, heads, d_q, d_k)`.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (n, cin, h, wd) = self.value(x).dims4()?;
        let (cout, wcin, kh, kw) = self.value(w).dims4()?;
        if wcin != cin {
            return Err(Error::dim_in("channels", wcin, cin, "convolution input"));
        }
        if let Some(b) = b {
            if self.value(b).numel() != cout {
                return Err(Error::dim_in(
                    "channels",
                    cout,
                    self.value(b).numel(),
                    "convolution bias",
                ));
            }
        }
        let geom =
            ConvGeom::new((n, cin, h, wd), (cout, kh, kw), stride, pad).ok_or_else(|| {
                Error::Shape(format!("kernel {kh}x{kw} does not fit a {h}x{wd} input"))
            })?;
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let value = Tensor::new(vec![n, cout, geom.ho, geom.wo], out)?;
        let needs = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(value, Op::Conv { x, w, b, geom }, needs))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa == sb {
            return Ok(());
        }
        match (self.value(a).dims4(), self.value(b).dims4()) {
            (Ok(da), Ok(db)) => check_same_dims(da, db, what),
            _ => Err(Error::Shape(format!("{what}: {sa:?} vs {sb:?}"))),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Add(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::from_f64(s);
        let value = self.value(a).map(|x| x * s);
        let needs = self.ng(a);
        self.push(value, Op::Scale(a, s), needs)
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * kernels::sigmoid(x));
        let needs = self.ng(a);
        self.push(value, Op::Silu(a), needs)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(kernels::sigmoid);
        let needs = self.ng(a);
        self.push(value, Op::Sigmoid(a), needs)
    }

    /// Channel concatenation of two `(N, C_a, H, W)` and `(N, C_b, H, W)` maps.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca, h, w) = self.value(a).dims4()?;
        let (nb, cb, hb, wb) = self.value(b).dims4()?;
        check_same_dims((n, 0, h, w), (nb, 0, hb, wb), "channel concatenation")?;
        let (la, lb) = (ca * h * w, cb * h * w);
        let mut data = Vec::with_capacity(n * (la + lb));
        for s in 0..n {
            data.extend_from_slice(&self.value(a).data()[s * la..(s + 1) * la]);
            data.extend_from_slice(&self.value(b).data()[s * lb..(s + 1) * lb]);
        }
        let value = Tensor::new(vec![n, ca + cb, h, w], data)?;
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Concat(a, b), needs))
    }

    pub fn upsample2(&mut self, a: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(a).dims4()?;
        let data = kernels::upsample2(self.value(a).data(), n * c, h, w);
        let value = Tensor::new(vec![n, c, 2 * h, 2 * w], data)?;
        let needs = self.ng(a);
        Ok(self.push(value, Op::Upsample2(a), needs))
    }

    /// Channel attention `Softmax(τ · Q Kᵀ) · V` with `Q: (N, C_q, H, W)` and
    /// `K, V: (N, C_k, H, W)`; spatial positions are flattened.
    pub fn channel_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        tau: f64,
        heads: usize,
    ) -> Result<Var> {
        let (n, cq, h, w) = self.value(q).dims4()?;
        let (nk, ck, hk, wk) = self.value(k).dims4()?;
        check_same_dims((n, 0, h, w), (nk, 0, hk, wk), "attention keys")?;
        check_same_dims((nk, ck, hk, wk), self.value(v).dims4()?, "attention values")?;
        if heads == 0 || cq % heads != 0 || ck % heads != 0 {
            return Err(Error::Config(format!(
                "{heads} heads do not divide {cq} query / {ck} key channels"
            )));
        }
        let geom = AttnGeom {
            n,
            cq,
            ck,
            p: h * w,
            heads,
        };
        let tau = T::from_f64(tau);
        let probs =
            kernels::attention_probs(self.value(q).data(), self.value(k).data(), &geom, tau);
        let out = kernels::attention_apply(&probs, self.value(v).data(), &geom);
        let value = Tensor::new(vec![n, cq, h, w], out)?;
        let needs = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                tau,
                geom,
                probs,
            },
            needs,
        ))
    }

    /// `mean(sqrt((pred − target)² + ε²))`.
    pub fn charbonnier(&mut self, pred: Var, target: Var, eps: f64) -> Result<Var> {
        self.same_shape(pred, target, "charbonnier loss")?;
        let eps = T::from_f64(eps);
        let e2 = eps * eps;
        let mut sum = T::zero();
        for (&p, &t) in self
            .value(pred)
            .data()
            .iter()
            .zip(self.value(target).data())
        {
            let r = p - t;
            sum += (r * r + e2).sqrt();
        }
        let n = T::from_f64(self.value(pred).numel() as f64);
        let needs = self.ng(pred) || self.ng(target);
        Ok(self.push(
            Tensor::scalar(sum / n),
            Op::Charbonnier { pred, target, eps },
            needs,
        ))
    }

    /// Mean squared difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse loss")?;
        let mut sum = T::zero();
        for (&x, &y) in self.value(a).data().iter().zip(self.value(b).data()) {
            let r = x - y;
            sum += r * r;
        }
        let n = T::from_f64(self.value(a).numel() as f64);
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::scalar(sum / n), Op::Mse(a, b), needs))
    }

    /// `Σ x² / 2`.
    pub fn half_sum_sq(&mut self, a: Var) -> Var {
        let mut sum = T::zero();
        for &x in self.value(a).data() {
            sum += x * x;
        }
        let half = T::from_f64(0.5);
        let needs = self.ng(a);
        self.push(Tensor::scalar(sum * half), Op::HalfSumSq(a), needs)
    }

    /// `a + weight · b` for two scalars.
    pub fn weighted_sum(&mut self, a: Var, b: Var, weight: f64) -> Result<Var> {
        if self.value(a).numel() != 1 || self.value(b).numel() != 1 {
            return Err(Error::Shape("weighted_sum expects two scalars".into()));
        }
        let weight = T::from_f64(weight);
        let value = Tensor::scalar(self.scalar_value(a) + weight * self.scalar_value(b));
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::WeightedSum { a, b, weight }, needs))
    }

    /// Gradients of the scalar `loss` with respect to every node on a path from a parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(gy);
                    continue;
                }
                Op::Conv { x, w, b, geom } => {
                    let cg = kernels::conv2d_backward(
                        self.value(*x).data(),
                        self.value(*w).data(),
                        gy.data(),
                        geom,
                        self.ng(*x),
                    );
                    if let Some(dx) = cg.dx {
                        self.accumulate(&mut grads, *x, dx);
                    }
                    if self.ng(*w) {
                        self.accumulate(&mut grads, *w, cg.dw);
                    }
                    if let Some(b) = b {
                        if self.ng(*b) {
                            self.accumulate(&mut grads, *b, cg.db);
                        }
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*b) {
                        self.accumulate(&mut grads, *b, gy.data().to_vec());
                    }
                    if self.ng(*a) {
                        self.accumulate(&mut grads, *a, gy.into_data());
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                    if self.ng(*a) {
                        let d = gy.data().iter().zip(vb).map(|(&g, &y)| g * y).collect();
                        self.accumulate(&mut grads, *a, d);
                    }
                    if self.ng(*b) {
                        let d = gy.data().iter().zip(va).map(|(&g, &x)| g * x).collect();
                        self.accumulate(&mut grads, *b, d);
                    }
                }
                Op::Scale(a, s) => {
                    let d = gy.data().iter().map(|&g| g * *s).collect();
                    self.accumulate(&mut grads, *a, d);
                }
                Op::Silu(a) => {
                    let d = gy
                        .data()
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(&g, &x)| {
                            let s = kernels::sigmoid(x);
                            g * s * (T::one() + x * (T::one() - s))
                        })
                        .collect();
                    self.accumulate(&mut grads, *a, d);
                }
                Op::Sigmoid(a) => {
                    let d = gy
                        .data()
                        .iter()
                        .zip(node.value.data())
                        .map(|(&g, &s)| g * s * (T::one() - s))
                        .collect();
                    self.accumulate(&mut grads, *a, d);
                }
                Op::Concat(a, b) => {
                    let (n, ca, h, w) = self.value(*a).dims4()?;
                    let cb = self.value(*b).dims4()?.1;
                    let (la, lb) = (ca * h * w, cb * h * w);
                    let mut da = Vec::with_capacity(n * la);
                    let mut db = Vec::with_capacity(n * lb);
                    for chunk in gy.data().chunks(la + lb) {
                        da.extend_from_slice(&chunk[..la]);
                        db.extend_from_slice(&chunk[la..]);
                    }
                    if self.ng(*a) {
                        self.accumulate(&mut grads, *a, da);
                    }
                    if self.ng(*b) {
                        self.accumulate(&mut grads, *b, db);
                    }
                }
                Op::Upsample2(a) => {
                    let (n, c, h, w) = self.value(*a).dims4()?;
                    let d = kernels::upsample2_backward(gy.data(), n * c, h, w);
                    self.accumulate(&mut grads, *a, d);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    tau,
                    geom,
                    probs,
                } => {
                    let ag = kernels::attention_backward(
                        self.value(*q).data(),
                        self.value(*k).data(),
                        self.value(*v).data(),
                        probs,
                        gy.data(),
                        geom,
                        *tau,
                    );
                    if self.ng(*q) {
                        self.accumulate(&mut grads, *q, ag.dq);
                    }
                    if self.ng(*k) {
                        self.accumulate(&mut grads, *k, ag.dk);
                    }
                    if self.ng(*v) {
                        self.accumulate(&mut grads, *v, ag.dv);
                    }
                }
                Op::Charbonnier { pred, target, eps } => {
                    let g0 = gy.data()[0];
                    let n = T::from_f64(self.value(*pred).numel() as f64);
                    let e2 = *eps * *eps;
                    let d: Vec<T> = self
                        .value(*pred)
                        .data()
                        .iter()
                        .zip(self.value(*target).data())
                        .map(|(&p, &t)| {
                            let r = p - t;
                            g0 * r / ((r * r + e2).sqrt() * n)
                        })
                        .collect();
                    if self.ng(*target) {
                        self.accumulate(&mut grads, *target, d.iter().map(|&x| -x).collect());
                    }
                    if self.ng(*pred) {
                        self.accumulate(&mut grads, *pred, d);
                    }
                }
                Op::Mse(a, b) => {
                    let g0 = gy.data()[0];
                    let scale = T::from_f64(2.0) * g0 / T::from_f64(self.value(*a).numel() as f64);
                    let d: Vec<T> = self
                        .value(*a)
                        .data()
                        .iter()
                        .zip(self.value(*b).data())
                        .map(|(&x, &y)| scale * (x - y))
                        .collect();
                    if self.ng(*b) {
                        self.accumulate(&mut grads, *b, d.iter().map(|&x| -x).collect());
                    }
                    if self.ng(*a) {
                        self.accumulate(&mut grads, *a, d);
                    }
                }
                Op::HalfSumSq(a) => {
                    let g0 = gy.data()[0];
                    let d = self.value(*a).data().iter().map(|&x| g0 * x).collect();
                    self.accumulate(&mut grads, *a, d);
                }
                Op::WeightedSum { a, b, weight } => {
                    let g0 = gy.data()[0];
                    if self.ng(*a) {
                        self.accumulate(&mut grads, *a, vec![g0]);
                    }
                    if self.ng(*b) {
                        self.accumulate(&mut grads, *b, vec![g0 * *weight]);
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, d: Vec<T>) {
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.data_mut().iter_mut().zip(&d) {
                    *e += *x;
                }
            }
            slot @ None => {
                let shape = self.value(v).shape().to_vec();
                *slot = Some(Tensor::new(shape, d).expect("gradient matches its node's shape"));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numeric_grad(f: impl Fn(&Tensor<f64>) -> f64, x: &Tensor<f64>) -> Vec<f64> {
        let h = 1e-6;
        (0..x.numel())
            .map(|i| {
                let mut p = x.clone();
                p.data_mut()[i] += h;
                let mut m = x.clone();
                m.data_mut()[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn rand_tensor(shape: &[usize], salt: u64) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |i| {
            let v = ((i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt) >> 40;
            (v % 2000) as f64 / 1000.0 - 1.0
        })
    }

    #[test]
    fn elementwise_chain_gradient() {
        let x0 = rand_tensor(&[1, 2, 3, 3], 1);
        let build = |x: &Tensor<f64>| {
            let mut g = Graph::new();
            let xv = g.param(x.clone());
            let s = g.silu(xv);
            let sg = g.sigmoid(s);
            let m = g.mul(sg, xv).unwrap();
            let up = g.upsample2(m).unwrap();
            let c = g.concat_channels(up, up).unwrap();
            let l = g.half_sum_sq(c);
            (g, xv, l)
        };
        let (g, xv, l) = build(&x0);
        let grads = g.backward(l).unwrap();
        let analytic = grads.get(xv).unwrap().data().to_vec();
        let numeric = numeric_grad(
            |x| {
                let (g, _, l) = build(x);
                g.scalar_value(l)
            },
            &x0,
        );
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!((a - n).abs() < 1e-7, "{a} vs {n}");
        }
    }

    #[test]
    fn attention_gradient_all_inputs() {
        let q0 = rand_tensor(&[2, 4, 2, 3], 3);
        let k0 = rand_tensor(&[2, 4, 2, 3], 5);
        let v0 = rand_tensor(&[2, 4, 2, 3], 7);
        let build = |q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>| {
            let mut g = Graph::new();
            let (qv, kv, vv) = (g.param(q.clone()), g.param(k.clone()), g.param(v.clone()));
            let o = g.channel_attention(qv, kv, vv, 0.7, 2).unwrap();
            let l = g.half_sum_sq(o);
            (g, [qv, kv, vv], l)
        };
        let (g, vars, l) = build(&q0, &k0, &v0);
        let grads = g.backward(l).unwrap();
        let inputs = [&q0, &k0, &v0];
        for which in 0..3 {
            let numeric = numeric_grad(
                |t| {
                    let mut args = inputs;
                    args[which] = t;
                    let (g, _, l) = build(args[0], args[1], args[2]);
                    g.scalar_value(l)
                },
                inputs[which],
            );
            let analytic = grads.get(vars[which]).unwrap().data();
            for (a, n) in analytic.iter().zip(&numeric) {
                assert!((a - n).abs() < 1e-7, "input {which}: {a} vs {n}");
            }
        }
    }

    #[test]
    fn losses_and_weighted_sum_gradient() {
        let p0 = rand_tensor(&[1, 3, 2, 2], 11);
        let t = rand_tensor(&[1, 3, 2, 2], 13);
        let build = |p: &Tensor<f64>| {
            let mut g = Graph::new();
            let pv = g.param(p.clone());
            let tv = g.input(t.clone());
            let c = g.charbonnier(pv, tv, 1e-3).unwrap();
            let m = g.mse(pv, tv).unwrap();
            let l = g.weighted_sum(c, m, 0.3).unwrap();
            (g, pv, l)
        };
        let (g, pv, l) = build(&p0);
        let analytic = g.backward(l).unwrap().get(pv).unwrap().data().to_vec();
        let numeric = numeric_grad(|p| build(p).0.scalar_value(build(p).2), &p0);
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!((a - n).abs() < 1e-7, "{a} vs {n}");
        }
    }

    #[test]
    fn inputs_receive_no_gradient() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::full(vec![1, 1, 2, 2], 1.0));
        let w = g.param(Tensor::full(vec![1, 1, 1, 1], 2.0));
        let y = g.conv2d(x, w, None, 1, 0).unwrap();
        let l = g.half_sum_sq(y);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(x).is_none());
        assert_eq!(grads.get(w).unwrap().data(), &[8.0]);
    }
}
