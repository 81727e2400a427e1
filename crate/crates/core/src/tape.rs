//! Reverse-mode automatic differentiation over a dynamic tape.
//!
//! The tape records the fixed set of vector operations the models need.
//! Forward values are computed eagerly as nodes are pushed; `backward`
//! walks the nodes in reverse and accumulates (`+=`) parameter gradients.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// A trainable tensor with its gradient buffer and AdaGrad accumulator.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub accum: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let grad = Tensor::zeros(value.rows(), value.cols());
        let accum = grad.clone();
        self.params.push(Parameter {
            name: name.into(),
            value,
            grad,
            accum,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> Vec<ParamId> {
        (0..self.params.len()).map(ParamId).collect()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Snapshot of all values (for best-epoch restore).
    pub fn snapshot(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn restore(&mut self, snap: &[Tensor]) {
        assert_eq!(snap.len(), self.params.len());
        for (p, s) in self.params.iter_mut().zip(snap) {
            p.value = s.clone();
        }
    }

    /// Global-norm gradient clipping over the given parameters.
    /// Returns the pre-clip norm.
    pub fn clip_global_norm(&mut self, ids: &[ParamId], max_norm: f64) -> f64 {
        let sq: f64 = ids.iter().map(|id| self.params[id.0].grad.sq_norm()).sum();
        let norm = sq.sqrt();
        if norm > max_norm && norm > 0.0 {
            let scale = max_norm / norm;
            for id in ids {
                for g in self.params[id.0].grad.as_mut_slice() {
                    *g *= scale;
                }
            }
        }
        norm
    }

    /// One AdaGrad step on the given parameters; gradients are zeroed after.
    ///
    /// accum += g^2; value -= lr * g / (sqrt(accum) + eps)
    pub fn adagrad_step(&mut self, ids: &[ParamId], lr: f64, eps: f64) -> Result<()> {
        for id in ids {
            let p = &mut self.params[id.0];
            if !p.grad.all_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite gradient in parameter `{}`",
                    p.name
                )));
            }
            let n = p.value.len();
            for i in 0..n {
                let g = p.grad.as_slice()[i];
                if g == 0.0 {
                    continue;
                }
                let a = p.accum.as_slice()[i] + g * g;
                p.accum.as_mut_slice()[i] = a;
                p.value.as_mut_slice()[i] -= lr * g / (a.sqrt() + eps);
            }
            p.grad.fill(0.0);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    /// Constant input vector; no gradient flows out.
    Input,
    /// Whole parameter tensor as a node (biases, class embeddings).
    Param(ParamId),
    /// Single row of a parameter matrix (embedding lookup).
    Row(ParamId, usize),
    /// y = W x, W a parameter matrix.
    MatVec(ParamId, Var),
    /// y = W^T x, W a parameter matrix.
    MatTVec(ParamId, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Concat(Vec<Var>),
    Mean(Vec<Var>),
    LogSoftmax(Var),
    /// Scalar x[idx].
    Pick(Var, usize),
    /// Scalar c * sum of scalar nodes.
    SumScaled(Vec<Var>, f64),
    Neg(Var),
}

/// Dynamic tape; rebuilt per example or minibatch.
#[derive(Default)]
pub struct Tape {
    ops: Vec<Op>,
    vals: Vec<Tensor>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.vals[v.0]
    }

    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.vals[v.0].len(), 1);
        self.vals[v.0].as_slice()[0]
    }

    fn push(&mut self, op: Op, val: Tensor) -> Var {
        self.ops.push(op);
        self.vals.push(val);
        Var(self.vals.len() - 1)
    }

    pub fn input(&mut self, v: Tensor) -> Var {
        self.push(Op::Input, v)
    }

    pub fn param(&mut self, ps: &ParamSet, id: ParamId) -> Var {
        self.push(Op::Param(id), ps.value(id).clone())
    }

    pub fn row(&mut self, ps: &ParamSet, id: ParamId, r: usize) -> Var {
        let v = Tensor::vector(ps.value(id).row(r).to_vec());
        self.push(Op::Row(id, r), v)
    }

    pub fn matvec(&mut self, ps: &ParamSet, w: ParamId, x: Var) -> Result<Var> {
        let m = ps.value(w);
        let xv = &self.vals[x.0];
        if m.cols() != xv.len() {
            return Err(Error::DimMismatch(format!(
                "matvec: {}x{} by {}",
                m.rows(),
                m.cols(),
                xv.len()
            )));
        }
        let mut out = vec![0.0; m.rows()];
        for (i, o) in out.iter_mut().enumerate() {
            *o = m
                .row(i)
                .iter()
                .zip(xv.as_slice())
                .map(|(a, b)| a * b)
                .sum();
        }
        Ok(self.push(Op::MatVec(w, x), Tensor::vector(out)))
    }

    pub fn mat_t_vec(&mut self, ps: &ParamSet, w: ParamId, x: Var) -> Result<Var> {
        let m = ps.value(w);
        let xv = &self.vals[x.0];
        if m.rows() != xv.len() {
            return Err(Error::DimMismatch(format!(
                "mat_t_vec: ({}x{})^T by {}",
                m.rows(),
                m.cols(),
                xv.len()
            )));
        }
        let mut out = vec![0.0; m.cols()];
        for i in 0..m.rows() {
            let xi = xv.as_slice()[i];
            for (j, o) in out.iter_mut().enumerate() {
                *o += m.get(i, j) * xi;
            }
        }
        Ok(self.push(Op::MatTVec(w, x), Tensor::vector(out)))
    }

    /// W x + b.
    pub fn affine(&mut self, ps: &ParamSet, w: ParamId, x: Var, b: ParamId) -> Result<Var> {
        let wx = self.matvec(ps, w, x)?;
        let bv = self.param(ps, b);
        self.add(wx, bv)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.vals[a.0], &self.vals[b.0]);
        if av.len() != bv.len() {
            return Err(Error::DimMismatch(format!(
                "add: {} vs {}",
                av.len(),
                bv.len()
            )));
        }
        let out: Vec<f64> = av
            .as_slice()
            .iter()
            .zip(bv.as_slice())
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(Op::Add(a, b), Tensor::vector(out)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.vals[a.0], &self.vals[b.0]);
        if av.len() != bv.len() {
            return Err(Error::DimMismatch(format!(
                "mul: {} vs {}",
                av.len(),
                bv.len()
            )));
        }
        let out: Vec<f64> = av
            .as_slice()
            .iter()
            .zip(bv.as_slice())
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(Op::Mul(a, b), Tensor::vector(out)))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.vals[x.0]
            .as_slice()
            .iter()
            .map(|v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        self.push(Op::Sigmoid(x), Tensor::vector(out))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.vals[x.0].as_slice().iter().map(|v| v.tanh()).collect();
        self.push(Op::Tanh(x), Tensor::vector(out))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Empty("concat of no vectors".into()));
        }
        let mut out = Vec::new();
        for p in parts {
            out.extend_from_slice(self.vals[p.0].as_slice());
        }
        Ok(self.push(Op::Concat(parts.to_vec()), Tensor::vector(out)))
    }

    pub fn mean(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Empty("mean of no vectors".into()));
        }
        let n = self.vals[parts[0].0].len();
        let mut out = vec![0.0; n];
        for p in parts {
            let v = &self.vals[p.0];
            if v.len() != n {
                return Err(Error::DimMismatch("mean over ragged vectors".into()));
            }
            for (o, x) in out.iter_mut().zip(v.as_slice()) {
                *o += x;
            }
        }
        let inv = 1.0 / parts.len() as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        Ok(self.push(Op::Mean(parts.to_vec()), Tensor::vector(out)))
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let out = crate::tensor::log_softmax(self.vals[x.0].as_slice());
        self.push(Op::LogSoftmax(x), Tensor::vector(out))
    }

    pub fn pick(&mut self, x: Var, idx: usize) -> Result<Var> {
        let v = &self.vals[x.0];
        if idx >= v.len() {
            return Err(Error::DimMismatch(format!(
                "pick index {} out of {}",
                idx,
                v.len()
            )));
        }
        let val = v.as_slice()[idx];
        Ok(self.push(Op::Pick(x, idx), Tensor::vector(vec![val])))
    }

    /// c * sum of scalar nodes; used for batch-mean losses.
    pub fn sum_scaled(&mut self, parts: &[Var], c: f64) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Empty("sum of no scalars".into()));
        }
        let mut s = 0.0;
        for p in parts {
            debug_assert_eq!(self.vals[p.0].len(), 1);
            s += self.vals[p.0].as_slice()[0];
        }
        Ok(self.push(Op::SumScaled(parts.to_vec(), c), Tensor::vector(vec![c * s])))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.vals[x.0].as_slice().iter().map(|v| -v).collect();
        self.push(Op::Neg(x), Tensor::vector(out))
    }

    /// Backward pass from a scalar node with seed gradient 1.
    /// Parameter gradients accumulate into `ps`; running twice doubles them.
    pub fn backward(&mut self, loss: Var, ps: &mut ParamSet) -> Result<()> {
        if self.vals[loss.0].len() != 1 {
            return Err(Error::InvalidArg("backward from non-scalar node".into()));
        }
        let mut grads: Vec<Tensor> = self
            .vals
            .iter()
            .map(|v| Tensor::zeros_vec(v.len()))
            .collect();
        grads[loss.0].as_mut_slice()[0] = 1.0;

        for i in (0..self.ops.len()).rev() {
            if grads[i].sq_norm() == 0.0 {
                continue;
            }
            let g = grads[i].clone();
            let gs = g.as_slice();
            match &self.ops[i] {
                Op::Input => {}
                Op::Param(id) => {
                    let pg = ps.get_mut(*id).grad.as_mut_slice();
                    for (p, x) in pg.iter_mut().zip(gs) {
                        *p += x;
                    }
                }
                Op::Row(id, r) => {
                    let pg = ps.get_mut(*id).grad.row_mut(*r);
                    for (p, x) in pg.iter_mut().zip(gs) {
                        *p += x;
                    }
                }
                Op::MatVec(w, x) => {
                    let xv = self.vals[x.0].clone();
                    {
                        let wp = ps.get_mut(*w);
                        for (r, gr) in gs.iter().enumerate() {
                            if *gr == 0.0 {
                                continue;
                            }
                            let row = wp.grad.row_mut(r);
                            for (j, xj) in xv.as_slice().iter().enumerate() {
                                row[j] += gr * xj;
                            }
                        }
                    }
                    let wv = &ps.get(*w).value;
                    let gx = grads[x.0].as_mut_slice();
                    for (r, gr) in gs.iter().enumerate() {
                        if *gr == 0.0 {
                            continue;
                        }
                        let row = wv.row(r);
                        for (j, gxj) in gx.iter_mut().enumerate() {
                            *gxj += gr * row[j];
                        }
                    }
                }
                Op::MatTVec(w, x) => {
                    let xv = self.vals[x.0].clone();
                    {
                        let wp = ps.get_mut(*w);
                        for (r, xr) in xv.as_slice().iter().enumerate() {
                            let row = wp.grad.row_mut(r);
                            for (j, gj) in gs.iter().enumerate() {
                                row[j] += xr * gj;
                            }
                        }
                    }
                    let wv = &ps.get(*w).value;
                    let gx = grads[x.0].as_mut_slice();
                    for (r, gxr) in gx.iter_mut().enumerate() {
                        let row = wv.row(r);
                        *gxr += row.iter().zip(gs).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    for (p, x) in grads[a.0].as_mut_slice().iter_mut().zip(gs) {
                        *p += x;
                    }
                    for (p, x) in grads[b.0].as_mut_slice().iter_mut().zip(gs) {
                        *p += x;
                    }
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let av = self.vals[a.0].clone();
                    let bv = self.vals[b.0].clone();
                    for ((p, x), bvx) in grads[a.0]
                        .as_mut_slice()
                        .iter_mut()
                        .zip(gs)
                        .zip(bv.as_slice())
                    {
                        *p += x * bvx;
                    }
                    for ((p, x), avx) in grads[b.0]
                        .as_mut_slice()
                        .iter_mut()
                        .zip(gs)
                        .zip(av.as_slice())
                    {
                        *p += x * avx;
                    }
                }
                Op::Sigmoid(x) => {
                    let x = *x;
                    let yv = self.vals[i].clone();
                    for ((p, g), y) in grads[x.0]
                        .as_mut_slice()
                        .iter_mut()
                        .zip(gs)
                        .zip(yv.as_slice())
                    {
                        *p += g * y * (1.0 - y);
                    }
                }
                Op::Tanh(x) => {
                    let x = *x;
                    let yv = self.vals[i].clone();
                    for ((p, g), y) in grads[x.0]
                        .as_mut_slice()
                        .iter_mut()
                        .zip(gs)
                        .zip(yv.as_slice())
                    {
                        *p += g * (1.0 - y * y);
                    }
                }
                Op::Concat(parts) => {
                    let parts = parts.clone();
                    let mut off = 0;
                    for p in parts {
                        let n = self.vals[p.0].len();
                        for (dst, src) in grads[p.0]
                            .as_mut_slice()
                            .iter_mut()
                            .zip(&gs[off..off + n])
                        {
                            *dst += src;
                        }
                        off += n;
                    }
                }
                Op::Mean(parts) => {
                    let parts = parts.clone();
                    let inv = 1.0 / parts.len() as f64;
                    for p in parts {
                        for (dst, src) in grads[p.0].as_mut_slice().iter_mut().zip(gs) {
                            *dst += src * inv;
                        }
                    }
                }
                Op::LogSoftmax(x) => {
                    let x = *x;
                    let yv = self.vals[i].clone();
                    let gsum: f64 = gs.iter().sum();
                    for ((p, g), y) in grads[x.0]
                        .as_mut_slice()
                        .iter_mut()
                        .zip(gs)
                        .zip(yv.as_slice())
                    {
                        *p += g - y.exp() * gsum;
                    }
                }
                Op::Pick(x, idx) => {
                    let (x, idx) = (*x, *idx);
                    grads[x.0].as_mut_slice()[idx] += gs[0];
                }
                Op::SumScaled(parts, c) => {
                    let (parts, c) = (parts.clone(), *c);
                    for p in parts {
                        grads[p.0].as_mut_slice()[0] += c * gs[0];
                    }
                }
                Op::Neg(x) => {
                    let x = *x;
                    for (p, g) in grads[x.0].as_mut_slice().iter_mut().zip(gs) {
                        *p -= g;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Compare analytic gradients (already accumulated in `ps.grad`) against
/// central finite differences on a random coordinate subset of each
/// parameter. Returns the maximum relative error.
pub fn grad_check(
    ps: &mut ParamSet,
    mut forward: impl FnMut(&ParamSet) -> f64,
    eps: f64,
    coords_per_param: usize,
    seed: u64,
) -> Result<f64> {
    if !(1e-6..=1e-4).contains(&eps) {
        return Err(Error::InvalidArg(format!("grad_check eps {eps} outside [1e-6, 1e-4]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel = 0.0f64;
    for pi in 0..ps.len() {
        let n = ps.get(ParamId(pi)).value.len();
        let k = coords_per_param.min(n);
        let idxs = sample(&mut rng, n, k);
        for ci in idxs {
            let orig = ps.get(ParamId(pi)).value.as_slice()[ci];
            ps.get_mut(ParamId(pi)).value.as_mut_slice()[ci] = orig + eps;
            let fp = forward(ps);
            ps.get_mut(ParamId(pi)).value.as_mut_slice()[ci] = orig - eps;
            let fm = forward(ps);
            ps.get_mut(ParamId(pi)).value.as_mut_slice()[ci] = orig;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::Numerical("non-finite loss during grad check".into()));
            }
            let numeric = (fp - fm) / (2.0 * eps);
            let analytic = ps.get(ParamId(pi)).grad.as_slice()[ci];
            // Central differences on an O(1) loss resolve gradients only
            // down to roughly ulp(loss)/eps ~ 1e-11; a coordinate where
            // both sides sit below that resolution carries no signal, so
            // it is compared absolutely instead of relatively.
            let scale = analytic.abs().max(numeric.abs());
            let rel = if scale < 1e-7 {
                if (analytic - numeric).abs() < 1e-8 {
                    0.0
                } else {
                    (analytic - numeric).abs() / 1e-8
                }
            } else {
                (analytic - numeric).abs() / scale
            };
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

/// Uniform(-0.08, 0.08) init for matrices and embeddings.
pub fn init_uniform(rows: usize, cols: usize, rng: &mut impl rand::Rng) -> Tensor {
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-0.08..0.08)).collect();
    Tensor::matrix(rows, cols, data).expect("sized by construction")
}
