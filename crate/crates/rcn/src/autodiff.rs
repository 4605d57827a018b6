//! Reverse-mode differentiation over a recorded tape of tensor operations.
//!
//! A [`Tape`] records every operation of one forward pass in execution order, so a
//! node's parents always precede it. [`Tape::backward`] walks the tape in reverse and
//! accumulates adjoints; accumulation order is the recording order, which keeps
//! gradients bit-reproducible.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{
    self, channel_sums, conv2d_backward, conv2d_forward, max_pool2d_forward, sigmoid_scalar, PatchGeometry, Tensor,
};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    OneMinus(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Conv2d { input: Var, kernels: Var, bias: Option<Var>, cols: Vec<f64>, geometry: PatchGeometry },
    MaxPool { input: Var, argmax: Vec<usize> },
    Reshape(Var),
    Concat(Vec<Var>),
    Linear { x: Var, w: Var, b: Var },
    Mean(Vec<Var>),
    Sum(Var),
    SigmoidCrossEntropy { logit: Var, label: f64 },
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
}

/// A single-owner record of one forward pass.
#[derive(Default)]
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value: Cow::Owned(value), op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Records a constant or an input. Leaves still receive adjoints.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Records a leaf that borrows its value, used for parameters.
    pub fn borrowed_leaf(&mut self, value: &'p Tensor) -> Var {
        self.nodes.push(Node { value: Cow::Borrowed(value), op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).scale(k);
        self.push(v, Op::Scale(a, k))
    }

    /// `1 - a`, elementwise.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| 1.0 - x);
        self.push(v, Op::OneMinus(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = tensor::sigmoid(self.value(a));
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = tensor::tanh_op(self.value(a));
        self.push(v, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = tensor::relu(self.value(a));
        self.push(v, Op::Relu(a))
    }

    pub fn conv2d(&mut self, input: Var, kernels: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let fwd = conv2d_forward(
            self.value(input),
            self.value(kernels),
            bias.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        Ok(self.push(fwd.output, Op::Conv2d { input, kernels, bias, cols: fwd.cols, geometry: fwd.geometry }))
    }

    pub fn max_pool2d(&mut self, input: Var, window: usize, stride: usize) -> Result<Var> {
        let fwd = max_pool2d_forward(self.value(input), window, stride)?;
        Ok(self.push(fwd.output, Op::MaxPool { input, argmax: fwd.argmax }))
    }

    /// Valid-mode correlation map `[1, Hs-Ht+1, Ws-Wt+1]`; differentiable in both inputs.
    pub fn cross_correlate(&mut self, search: Var, template: Var) -> Result<Var> {
        tensor::check_correlate_shapes(self.value(search), self.value(template))?;
        let (c, h, w) = self.value(template).chw()?;
        let kernel = self.reshape(template, &[1, c, h, w])?;
        self.conv2d(search, kernel, None, 1, 0)
    }

    pub fn reshape(&mut self, a: Var, dims: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(dims)?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    /// Flattens and concatenates into one rank-1 tensor.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let n = data.len();
        self.push(Tensor::new(vec![n], data).expect("length matches"), Op::Concat(parts.to_vec()))
    }

    /// `W·x + b` with `W: [out, in]`, `x` flattened to `in`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (out, inp) = match *wv.dims() {
            [o, i] => (o, i),
            _ => return Err(Error::shape(format!("linear weight must be [out,in], got {:?}", wv.dims()))),
        };
        if xv.len() != inp {
            return Err(Error::shape(format!("linear input axis: expected {inp} values, got {}", xv.len())));
        }
        if bv.dims() != [out] {
            return Err(Error::shape(format!("linear bias axis: expected [{out}], got {:?}", bv.dims())));
        }
        let xs = xv.data();
        let data = wv
            .data()
            .chunks(inp)
            .zip(bv.data())
            .map(|(row, &bias)| bias + row.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        let v = Tensor::new(vec![out], data)?;
        Ok(self.push(v, Op::Linear { x, w, b }))
    }

    /// Mean of equally shaped values.
    pub fn mean(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Contract("mean of nothing".into()))?;
        let mut acc = self.value(*first).clone();
        for &p in &parts[1..] {
            acc.add_assign(self.value(p))?;
        }
        let v = acc.scale(1.0 / parts.len() as f64);
        Ok(self.push(v, Op::Mean(parts.to_vec())))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    /// Sigmoid cross-entropy of a scalar logit against a binary label.
    pub fn sigmoid_cross_entropy(&mut self, logit: Var, label: f64) -> Result<Var> {
        let z = self.value(logit);
        if !z.is_scalar() {
            return Err(Error::Contract(format!("logit must be scalar, got {:?}", z.dims())));
        }
        let v = Tensor::scalar(sigmoid_cross_entropy(z.item(), label));
        Ok(self.push(v, Op::SigmoidCrossEntropy { logit, label }))
    }

    /// Adjoints of `loss` with respect to every recorded value.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::Contract(format!("backward needs a scalar loss, got dims {:?}", lv.dims())));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::new(lv.dims().to_vec(), vec![1.0])?);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<'p>, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let out = &*node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone())?;
                accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone())?;
                accumulate(grads, *b, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, g.hadamard(self.value(*b))?)?;
                accumulate(grads, *b, g.hadamard(self.value(*a))?)?;
            }
            Op::Scale(a, k) => accumulate(grads, *a, g.scale(*k))?,
            Op::OneMinus(a) => accumulate(grads, *a, g.scale(-1.0))?,
            Op::Sigmoid(a) => accumulate(grads, *a, g.zip_map(out, "sigmoid'", |g, s| g * s * (1.0 - s))?)?,
            Op::Tanh(a) => accumulate(grads, *a, g.zip_map(out, "tanh'", |g, t| g * (1.0 - t * t))?)?,
            Op::Relu(a) => {
                accumulate(grads, *a, g.zip_map(self.value(*a), "relu'", |g, x| if x > 0.0 { g } else { 0.0 })?)?
            }
            Op::Conv2d { input, kernels, bias, cols, geometry } => {
                let (dx, dk) = conv2d_backward(g, self.value(*kernels), cols, geometry);
                accumulate(grads, *input, dx.reshape(self.value(*input).dims())?)?;
                accumulate(grads, *kernels, dk)?;
                if let Some(b) = bias {
                    accumulate(grads, *b, channel_sums(g))?;
                }
            }
            Op::MaxPool { input, argmax } => {
                let mut dx = Tensor::zeros(self.value(*input).dims());
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    dx.data_mut()[src] += gv;
                }
                accumulate(grads, *input, dx)?;
            }
            Op::Reshape(a) => accumulate(grads, *a, g.reshape(self.value(*a).dims())?)?,
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let dims = self.value(p).dims().to_vec();
                    let n: usize = dims.iter().product();
                    let piece = Tensor::new(dims, g.data()[offset..offset + n].to_vec())?;
                    offset += n;
                    accumulate(grads, p, piece)?;
                }
            }
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let inp = xv.len();
                let mut dw = Vec::with_capacity(wv.len());
                let mut dx = vec![0.0; inp];
                for (row, &gy) in wv.data().chunks(inp).zip(g.data()) {
                    dw.extend(xv.data().iter().map(|&xi| gy * xi));
                    for (d, &wi) in dx.iter_mut().zip(row) {
                        *d += gy * wi;
                    }
                }
                accumulate(grads, *x, Tensor::new(xv.dims().to_vec(), dx)?)?;
                accumulate(grads, *w, Tensor::new(wv.dims().to_vec(), dw)?)?;
                accumulate(grads, *b, g.clone())?;
            }
            Op::Mean(parts) => {
                let share = g.scale(1.0 / parts.len() as f64);
                for &p in parts {
                    accumulate(grads, p, share.clone())?;
                }
            }
            Op::Sum(a) => {
                let dims = self.value(*a).dims().to_vec();
                accumulate(grads, *a, Tensor::full(&dims, g.item()))?;
            }
            Op::SigmoidCrossEntropy { logit, label } => {
                let z = self.value(*logit);
                let d = sigmoid_scalar(z.item()) - label;
                accumulate(grads, *logit, Tensor::new(z.dims().to_vec(), vec![d * g.item()])?)?;
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// Numerically stable `softplus(z) - y·z`.
pub fn sigmoid_cross_entropy(logit: f64, label: f64) -> f64 {
    logit.max(0.0) - label * logit + (-logit.abs()).exp().ln_1p()
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Adjoint of `v`, or `None` when `v` does not reach the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, zero-filled when `v` does not reach the loss.
    pub fn get_or_zeros(&self, tape: &Tape<'_>, v: Var) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.value(v).dims()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub frozen: bool,
}

/// Named trainable tensors. Names are unique; iteration order is lexicographic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: BTreeMap<String, Param>,
}

pub type ParamGrads = BTreeMap<String, Tensor>;

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        self.params.insert(name, Param { value, frozen: false });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.params.get(name).is_some_and(|p| p.frozen)
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))?;
        p.frozen = frozen;
        Ok(())
    }

    /// Freezes every parameter whose name starts with `prefix`.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        for (name, p) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                p.frozen = true;
            }
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }
}

/// Lazily records parameters of a [`ParamSet`] as borrowed leaves on a tape.
pub struct Binder<'p> {
    params: &'p ParamSet,
    vars: HashMap<&'p str, Var>,
}

impl<'p> Binder<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Binder { params, vars: HashMap::new() }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn var(&mut self, tape: &mut Tape<'p>, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let (key, p) = self
            .params
            .params
            .get_key_value(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))?;
        let v = tape.borrowed_leaf(&p.value);
        self.vars.insert(key.as_str(), v);
        Ok(v)
    }

    /// Gradients of every bound parameter; parameters the pass never touched get zeros.
    pub fn param_grads(&self, tape: &Tape<'p>, grads: &Gradients) -> ParamGrads {
        let mut out = BTreeMap::new();
        for (name, p) in self.params.iter() {
            let g = match self.vars.get(name) {
                Some(&v) => grads.get_or_zeros(tape, v),
                None => Tensor::zeros(p.value.dims()),
            };
            out.insert(name.to_string(), g);
        }
        out
    }
}

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub entries_checked: usize,
}

/// Compares analytic gradients with central differences on a sampled subset of entries.
///
/// `f` returns the loss and its analytic parameter gradients. At most
/// `per_tensor` entries are checked in each tensor (all of them when the tensor is
/// smaller). The error of one entry is `|a-n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<F>(f: F, params: &ParamSet, eps: f64, per_tensor: usize, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&ParamSet) -> Result<(f64, ParamGrads)>,
{
    if !(eps > 0.0) {
        return Err(Error::Contract(format!("finite-difference step must be positive, got {eps}")));
    }
    let (loss, analytic) = f(params)?;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("loss is not finite: {loss}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = params.clone();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, entries_checked: 0 };
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let n = params.get(&name)?.len();
        let mut idx: Vec<usize> = if n <= per_tensor { (0..n).collect() } else { sample(&mut rng, n, per_tensor).into_vec() };
        idx.sort_unstable();
        let grad = analytic
            .get(&name)
            .ok_or_else(|| Error::Contract(format!("no analytic gradient for {name}")))?;
        for i in idx {
            let orig = params.get(&name)?.data()[i];
            work.get_mut(&name)?.data_mut()[i] = orig + eps;
            let up = f(&work)?.0;
            work.get_mut(&name)?.data_mut()[i] = orig - eps;
            let down = f(&work)?.0;
            work.get_mut(&name)?.data_mut()[i] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss while perturbing {name}[{i}]")));
            }
            let numeric = (up - down) / (2.0 * eps);
            let a = grad.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.entries_checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}
