//! Reverse-mode automatic differentiation over an append-only graph.
//!
//! Nodes are pushed in evaluation order, so node indices already form a
//! topological order and the backward sweep is a reverse scan. Each op's
//! forward value is produced by the matching [`Tensor`] kernel.

use crate::attention::rope::{rope_apply, rope_inverse};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{lanes, rms_inverse, sigmoid, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    /// Adds a constant tensor (an additive mask); gradient passes straight through.
    AddConst(Var),
    Softmax(Var, usize),
    ReduceStd(Var, usize),
    GatherRows(Var, Vec<usize>),
    Embedding(Var, Vec<usize>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    RmsNorm(Var, Var, T),
    Silu(Var),
    Rope(Var, Vec<usize>, f64),
    Sum(Var),
    CrossEntropy(Var, Vec<Option<usize>>),
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

#[derive(Clone, Debug, Default)]
pub struct Graph<T: Real = f64> {
    nodes: Vec<Node<T>>,
    swept: bool,
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            swept: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input tensor. Gradients are collected only for leaves created
    /// with `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Clears every gradient buffer so `backward` may run again.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.swept = false;
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, inputs: &[Var]) -> bool {
        inputs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn unary(&mut self, a: Var, value: Tensor<T>, op: Op<T>) -> Var {
        let rg = self.tracked(&[a]);
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, value: Tensor<T>, op: Op<T>) -> Var {
        let rg = self.tracked(&[a, b]);
        self.push(value, op, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.binary(a, b, v, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose()?;
        Ok(self.unary(a, v, Op::Transpose(a)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.binary(a, b, v, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.binary(a, b, v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).scale(s);
        self.unary(a, v, Op::Scale(a, s))
    }

    /// `a + mask` where `mask` is a constant (typically entries in `{0, -inf}`).
    pub fn add_const(&mut self, a: Var, mask: &Tensor<T>) -> Result<Var> {
        let v = self.value(a).add(mask)?;
        Ok(self.unary(a, v, Op::AddConst(a)))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let v = self.value(a).softmax(axis)?;
        Ok(self.unary(a, v, Op::Softmax(a, axis)))
    }

    pub fn reduce_std(&mut self, a: Var, axis: usize) -> Result<Var> {
        let v = self.value(a).reduce_std(axis)?;
        Ok(self.unary(a, v, Op::ReduceStd(a, axis)))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let v = self.value(a).gather_rows(idx)?;
        Ok(self.unary(a, v, Op::GatherRows(a, idx.to_vec())))
    }

    /// Row lookup with repeats allowed; backward scatter-adds.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let v = self.value(table).select_rows(ids)?;
        Ok(self.unary(table, v, Op::Embedding(table, ids.to_vec())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a).slice_cols(start, len)?;
        Ok(self.unary(a, v, Op::SliceCols(a, start)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let v = {
            let refs: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
            Tensor::concat_cols(&refs)?
        };
        let rg = self.tracked(parts);
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: T) -> Result<Var> {
        let v = self.value(x).rms_norm(self.value(gain), eps)?;
        Ok(self.binary(x, gain, v, Op::RmsNorm(x, gain, eps)))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).silu();
        self.unary(a, v, Op::Silu(a))
    }

    pub fn rope(&mut self, a: Var, positions: &[usize], base: f64) -> Result<Var> {
        let v = rope_apply(self.value(a), positions, base)?;
        Ok(self.unary(a, v, Op::Rope(a, positions.to_vec(), base)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.unary(a, v, Op::Sum(a))
    }

    /// Mean next-token cross-entropy over rows whose target is `Some`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let v = Tensor::scalar(cross_entropy(self.value(logits), targets)?);
        Ok(self.unary(logits, v, Op::CrossEntropy(logits, targets.to_vec())))
    }

    /// Reverse sweep from a scalar `loss`, filling `grad` on every tracked node.
    ///
    /// A second call without [`Graph::zero_grad`] is an error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.swept {
            return Err(Error::Backward(
                "gradients already computed; call zero_grad before another sweep".into(),
            ));
        }
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.requires_grad {
            return Err(Error::Backward("loss does not depend on any tracked leaf".into()));
        }
        self.swept = true;
        let seed = Tensor::full(root.value.shape(), T::one());
        self.nodes[loss.0].grad = Some(seed);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = node.grad.as_ref() else {
                continue;
            };
            let contributions = self.local_grads(i, g)?;
            for (input, delta) in contributions {
                // Inputs always precede their consumers.
                assert!(input.0 < i, "graph is not topologically ordered");
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut self.nodes[input.0].grad {
                    Some(acc) => acc.accumulate(&delta)?,
                    slot @ None => *slot = Some(delta),
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                if wants(a) {
                    out.push((a, g.matmul(&val(b).transpose()?)?));
                }
                if wants(b) {
                    out.push((b, val(a).transpose()?.matmul(g)?));
                }
            }
            &Op::Transpose(a) => out.push((a, g.transpose()?)),
            &Op::Add(a, b) => {
                out.push((a, g.clone()));
                out.push((b, g.clone()));
            }
            &Op::Mul(a, b) => {
                if wants(a) {
                    out.push((a, g.mul(val(b))?));
                }
                if wants(b) {
                    out.push((b, g.mul(val(a))?));
                }
            }
            &Op::Scale(a, s) => out.push((a, g.scale(s))),
            &Op::AddConst(a) => out.push((a, g.clone())),
            &Op::Softmax(a, axis) => out.push((a, softmax_backward(&node.value, g, axis)?)),
            &Op::ReduceStd(a, axis) => {
                out.push((a, std_backward(val(a), &node.value, g, axis)?))
            }
            Op::GatherRows(a, idx) | Op::Embedding(a, idx) => {
                let src = val(*a);
                let c = src.cols();
                let mut dx = Tensor::zeros(src.shape());
                let d = dx.data_mut();
                for (r, &row) in idx.iter().enumerate() {
                    for (o, &gv) in d[row * c..(row + 1) * c].iter_mut().zip(g.row(r)) {
                        *o += gv;
                    }
                }
                out.push((*a, dx));
            }
            &Op::SliceCols(a, start) => {
                let src = val(a);
                let (r, c, w) = (src.rows(), src.cols(), g.cols());
                let mut dx = Tensor::zeros(src.shape());
                let d = dx.data_mut();
                for row in 0..r {
                    d[row * c + start..row * c + start + w].copy_from_slice(g.row(row));
                }
                out.push((a, dx));
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = val(p).cols();
                    out.push((p, g.slice_cols(start, w)?));
                    start += w;
                }
            }
            &Op::RmsNorm(x, gain, eps) => {
                let (dx, dg) = rms_norm_backward(val(x), val(gain), g, eps)?;
                out.push((x, dx));
                out.push((gain, dg));
            }
            &Op::Silu(a) => {
                let dx = val(a).zip_map(g, "silu_backward", |x, gv| {
                    let s = sigmoid(x);
                    gv * s * (T::one() + x * (T::one() - s))
                })?;
                out.push((a, dx));
            }
            Op::Rope(a, positions, base) => out.push((*a, rope_inverse(g, positions, *base)?)),
            &Op::Sum(a) => out.push((a, Tensor::full(val(a).shape(), g.item()))),
            Op::CrossEntropy(logits, targets) => {
                out.push((*logits, cross_entropy_backward(val(*logits), targets, g.item())?))
            }
        }
        Ok(out)
    }
}

fn softmax_backward<T: Real>(y: &Tensor<T>, g: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, extent, inner) = lanes(y.shape(), axis)?;
    let (yd, gd) = (y.data(), g.data());
    let mut dx = vec![T::zero(); yd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * extent * inner + i;
            let mut dot = T::zero();
            for j in 0..extent {
                let k = base + j * inner;
                dot += gd[k] * yd[k];
            }
            for j in 0..extent {
                let k = base + j * inner;
                dx[k] = yd[k] * (gd[k] - dot);
            }
        }
    }
    Tensor::new(y.shape().to_vec(), dx)
}

fn std_backward<T: Real>(
    x: &Tensor<T>,
    std: &Tensor<T>,
    g: &Tensor<T>,
    axis: usize,
) -> Result<Tensor<T>> {
    let (outer, extent, inner) = lanes(x.shape(), axis)?;
    let n = T::lit(extent as f64);
    let xd = x.data();
    let mut dx = vec![T::zero(); xd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let r = o * inner + i;
            let s = std.data()[r];
            // Zero spread: use the zero subgradient.
            if s == T::zero() {
                continue;
            }
            let base = o * extent * inner + i;
            let mut mean = T::zero();
            for j in 0..extent {
                mean += xd[base + j * inner];
            }
            mean /= n;
            let coef = g.data()[r] / (n * s);
            for j in 0..extent {
                let k = base + j * inner;
                dx[k] = coef * (xd[k] - mean);
            }
        }
    }
    Tensor::new(x.shape().to_vec(), dx)
}

fn rms_norm_backward<T: Real>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    g: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (r, c) = (x.rows(), x.cols());
    let n = T::lit(c as f64);
    let mut dx = vec![T::zero(); r * c];
    let mut dg = vec![T::zero(); c];
    for i in 0..r {
        let row = x.row(i);
        let gr = g.row(i);
        let inv = rms_inverse(row, eps);
        // dxhat = g * gain; dx = inv * (dxhat - xhat * mean(dxhat * xhat))
        let mut proj = T::zero();
        for j in 0..c {
            let xhat = row[j] * inv;
            dg[j] += gr[j] * xhat;
            proj += gr[j] * gain.data()[j] * xhat;
        }
        proj /= n;
        for j in 0..c {
            let xhat = row[j] * inv;
            dx[i * c + j] = inv * (gr[j] * gain.data()[j] - xhat * proj);
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(gain.shape().to_vec(), dg)?,
    ))
}

fn scored_rows(targets: &[Option<usize>], logits: &Tensor<impl Real>) -> Result<usize> {
    if logits.shape().len() != 2 || logits.rows() != targets.len() {
        return Err(Error::Dimension {
            op: "cross_entropy",
            left: logits.shape().to_vec(),
            right: vec![targets.len()],
        });
    }
    let v = logits.cols();
    let mut n = 0;
    for &t in targets.iter().flatten() {
        if t >= v {
            return Err(Error::TokenOutOfRange { id: t, vocab: v });
        }
        n += 1;
    }
    Ok(n)
}

/// Mean cross-entropy over the rows with a target; zero when none are scored.
pub fn cross_entropy<T: Real>(logits: &Tensor<T>, targets: &[Option<usize>]) -> Result<T> {
    let n = scored_rows(targets, logits)?;
    if n == 0 {
        return Ok(T::zero());
    }
    let mut total = T::zero();
    for (i, t) in targets.iter().enumerate() {
        if let Some(t) = *t {
            let row = logits.row(i);
            let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let mut s = T::zero();
            for &x in row {
                s += (x - max).exp();
            }
            total += max + s.ln() - row[t];
        }
    }
    Ok(total / T::lit(n as f64))
}

fn cross_entropy_backward<T: Real>(
    logits: &Tensor<T>,
    targets: &[Option<usize>],
    g: T,
) -> Result<Tensor<T>> {
    let n = scored_rows(targets, logits)?;
    let mut dx = Tensor::zeros(logits.shape());
    if n == 0 {
        return Ok(dx);
    }
    let coef = g / T::lit(n as f64);
    let c = logits.cols();
    let d = dx.data_mut();
    for (i, t) in targets.iter().enumerate() {
        if let Some(t) = *t {
            let p = Tensor::new(vec![c], logits.row(i).to_vec())?.softmax(0)?;
            for (j, &pj) in p.data().iter().enumerate() {
                let onehot = if j == t { T::one() } else { T::zero() };
                d[i * c + j] = coef * (pj - onehot);
            }
        }
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn rand_t(rng: &mut Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), rng.normal_vec(n, 1.0)).unwrap()
    }

    /// Central finite differences of `f` at `x`.
    fn numeric_grad(x: &Tensor, h: f64, f: impl Fn(&Tensor) -> f64) -> Tensor {
        let mut g = Tensor::zeros(x.shape());
        for i in 0..x.len() {
            let mut plus = x.clone();
            plus.data_mut()[i] += h;
            let mut minus = x.clone();
            minus.data_mut()[i] -= h;
            g.data_mut()[i] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        g
    }

    fn max_rel_err(a: &Tensor, b: &Tensor) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
            .fold(0.0, f64::max)
    }

    /// Checks d(sum(w ∘ op(x)))/dx for a random weighting `w`.
    fn check_unary(shape: &[usize], seed: u64, op: impl Fn(&mut Graph, Var) -> Var) {
        let mut rng = Rng::new(seed);
        let x = rand_t(&mut rng, shape);
        let probe = {
            let mut g = Graph::new();
            let v = g.constant(x.clone());
            let y = op(&mut g, v);
            rand_t(&mut rng, g.value(y).shape())
        };
        let eval = |x: &Tensor| {
            let mut g = Graph::new();
            let v = g.constant(x.clone());
            let y = op(&mut g, v);
            g.value(y).mul(&probe).unwrap().sum()
        };
        let mut g = Graph::new();
        let v = g.param(x.clone());
        let y = op(&mut g, v);
        let w = g.constant(probe.clone());
        let p = g.mul(y, w).unwrap();
        let loss = g.sum(p);
        g.backward(loss).unwrap();
        let analytic = g.grad(v).unwrap().clone();
        let numeric = numeric_grad(&x, 1e-5, eval);
        let err = max_rel_err(&analytic, &numeric);
        assert!(err < 1e-5, "relative error {err}");
    }

    #[test]
    fn sum_gives_ones() {
        let mut g = Graph::<f64>::new();
        let w = g.param(Tensor::from_f64(&[2, 2], &[1., 2., 3., 4.]).unwrap());
        let l = g.sum(w);
        g.backward(l).unwrap();
        assert_eq!(g.grad(w).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::<f64>::new();
        let w = g.param(Tensor::from_f64(&[1], &[1.5]).unwrap());
        let sq = g.mul(w, w).unwrap();
        let l = g.sum(sq);
        g.backward(l).unwrap();
        assert_eq!(g.grad(w).unwrap().data(), &[3.0]);
    }

    #[test]
    fn backward_twice_is_an_error_until_reset() {
        let mut g = Graph::<f64>::new();
        let w = g.param(Tensor::from_f64(&[1], &[2.0]).unwrap());
        let l = g.sum(w);
        g.backward(l).unwrap();
        assert!(matches!(g.backward(l), Err(Error::Backward(_))));
        g.zero_grad();
        g.backward(l).unwrap();
        assert_eq!(g.grad(w).unwrap().data(), &[1.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f64>::new();
        let w = g.param(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(w), Err(Error::Backward(_))));
    }

    #[test]
    fn composite_matmul_softmax_sum() {
        let mut rng = Rng::new(21);
        let a = rand_t(&mut rng, &[3, 3]);
        let b = rand_t(&mut rng, &[3, 3]);
        let w = rand_t(&mut rng, &[3, 3]);
        let build = |g: &mut Graph, av: Var| {
            let bv = g.constant(b.clone());
            let m = g.matmul(av, bv).unwrap();
            let s = g.softmax(m, 1).unwrap();
            let wv = g.constant(w.clone());
            let p = g.mul(s, wv).unwrap();
            g.sum(p)
        };
        let mut g = Graph::new();
        let av = g.param(a.clone());
        let l = build(&mut g, av);
        g.backward(l).unwrap();
        let numeric = numeric_grad(&a, 1e-6, |x| {
            let mut g = Graph::new();
            let v = g.constant(x.clone());
            let l = build(&mut g, v);
            g.value(l).item()
        });
        assert!(max_rel_err(g.grad(av).unwrap(), &numeric) < 1e-6);
    }

    #[test]
    fn matmul_both_sides() {
        let mut rng = Rng::new(4);
        let b = rand_t(&mut rng, &[4, 2]);
        check_unary(&[3, 4], 4, |g, a| {
            let bv = g.constant(b.clone());
            g.matmul(a, bv).unwrap()
        });
        let a = rand_t(&mut rng, &[3, 4]);
        check_unary(&[4, 2], 5, |g, b| {
            let av = g.constant(a.clone());
            g.matmul(av, b).unwrap()
        });
    }

    #[test]
    fn elementwise_and_shape_ops() {
        check_unary(&[3, 4], 6, |g, a| g.transpose(a).unwrap());
        check_unary(&[3, 4], 7, |g, a| g.mul(a, a).unwrap());
        check_unary(&[3, 4], 8, |g, a| g.add(a, a).unwrap());
        check_unary(&[3, 4], 9, |g, a| g.scale(a, 0.37));
        check_unary(&[3, 4], 10, |g, a| g.silu(a));
        check_unary(&[3, 6], 11, |g, a| g.slice_cols(a, 2, 3).unwrap());
        check_unary(&[3, 4], 12, |g, a| {
            let l = g.slice_cols(a, 0, 1).unwrap();
            let r = g.slice_cols(a, 1, 3).unwrap();
            g.concat_cols(&[r, l]).unwrap()
        });
    }

    #[test]
    fn softmax_both_axes() {
        check_unary(&[3, 5], 13, |g, a| g.softmax(a, 1).unwrap());
        check_unary(&[3, 5], 14, |g, a| g.softmax(a, 0).unwrap());
    }

    #[test]
    fn masked_softmax_gradient_is_zero_on_masked_entries() {
        let mask = Tensor::from_f64(&[2, 3], &[0., f64::NEG_INFINITY, 0., 0., 0., f64::NEG_INFINITY])
            .unwrap();
        check_unary(&[2, 3], 15, |g, a| {
            let m = g.add_const(a, &mask).unwrap();
            g.softmax(m, 1).unwrap()
        });
        let mut g = Graph::new();
        let a = g.param(Tensor::from_f64(&[2, 3], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap());
        let m = g.add_const(a, &mask).unwrap();
        let s = g.softmax(m, 1).unwrap();
        let w = g.constant(Tensor::from_f64(&[2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap());
        let p = g.mul(s, w).unwrap();
        let l = g.sum(p);
        g.backward(l).unwrap();
        let d = g.grad(a).unwrap().data();
        assert_eq!(d[1], 0.0);
        assert_eq!(d[5], 0.0);
    }

    #[test]
    fn reduce_std_gradient() {
        check_unary(&[4, 5], 16, |g, a| g.reduce_std(a, 1).unwrap());
        check_unary(&[4, 5], 17, |g, a| g.reduce_std(a, 0).unwrap());
    }

    #[test]
    fn gather_and_embedding_gradients() {
        check_unary(&[5, 2], 18, |g, a| g.gather_rows(a, &[0, 2, 3]).unwrap());
        check_unary(&[5, 2], 19, |g, a| g.embedding(a, &[4, 1, 4, 0]).unwrap());
    }

    #[test]
    fn rms_norm_gradients() {
        let mut rng = Rng::new(20);
        let gain = rand_t(&mut rng, &[6]);
        check_unary(&[3, 6], 20, |g, x| {
            let gv = g.constant(gain.clone());
            g.rms_norm(x, gv, 1e-6).unwrap()
        });
        let x = rand_t(&mut rng, &[3, 6]);
        check_unary(&[6], 22, |g, gv| {
            let xv = g.constant(x.clone());
            g.rms_norm(xv, gv, 1e-6).unwrap()
        });
    }

    #[test]
    fn rope_gradient() {
        check_unary(&[4, 6], 23, |g, a| g.rope(a, &[0, 5, 9, 300], 10000.0).unwrap());
    }

    #[test]
    fn cross_entropy_value_and_gradient() {
        let uniform = Tensor::<f64>::zeros(&[3, 8]);
        let ce = cross_entropy(&uniform, &[Some(1), None, Some(7)]).unwrap();
        assert!((ce - 8f64.ln()).abs() < 1e-15);
        let targets = [Some(2), None, Some(0)];
        check_unary(&[3, 4], 24, |g, a| {
            let l = g.cross_entropy(a, &targets).unwrap();
            // Lift to a 1×1 so the probe weighting applies.
            let one = g.constant(Tensor::from_f64(&[], &[1.0]).unwrap());
            g.mul(l, one).unwrap()
        });
    }

    #[test]
    fn cross_entropy_matches_log_softmax_oracle() {
        let mut rng = Rng::new(25);
        let logits = rand_t(&mut rng, &[4, 6]);
        let targets = [Some(0), Some(5), Some(3), Some(3)];
        let mut oracle = 0.0;
        for (i, t) in targets.iter().enumerate() {
            let row = logits.row(i);
            let lse = row.iter().map(|x| x.exp()).sum::<f64>().ln();
            oracle += lse - row[t.unwrap()];
        }
        oracle /= 4.0;
        let got = cross_entropy(&logits, &targets).unwrap();
        assert!((got - oracle).abs() < 1e-12);
    }

    #[test]
    fn untracked_inputs_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::from_f64(&[1, 2], &[1., 2.]).unwrap());
        let b = g.constant(Tensor::from_f64(&[2, 1], &[3., 4.]).unwrap());
        let m = g.matmul(a, b).unwrap();
        let l = g.sum(m);
        g.backward(l).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[3., 4.]);
        assert!(g.grad(b).is_none());
    }
}
