use std::rc::Rc;
use std::sync::atomic::{AtomicU32, Ordering};

use rand::Rng;

use super::conv::{conv_backward, conv_forward, ConvGeometry, Padding};
use super::gemm::gemm;
use super::lstm::{dir_backward, dir_forward, Combine, DirParams, DirTrace, LstmDirection};
use super::{dims_str, Result, Tensor, TensorError};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a particular [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    idx: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.idx
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    /// Negative-side slope; `LeakyRelu(0.3)` for the senone DNN.
    LeakyRelu(f64),
    /// Unit-scale ELU: `x` for `x > 0`, `e^x - 1` otherwise.
    Elu,
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu(a) => {
                if x >= 0.0 {
                    x
                } else {
                    a * x
                }
            }
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative given input `x` and output `y`. At the relu kinks the
    /// positive-side slope is used.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x >= 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(a) => {
                if x >= 0.0 {
                    1.0
                } else {
                    a
                }
            }
            Activation::Elu => {
                if x >= 0.0 {
                    1.0
                } else {
                    y + 1.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
        }
    }

    /// Whether the first derivative jumps at a kink (ELU's does not).
    pub fn slope_jumps(self) -> bool {
        match self {
            Activation::Relu => true,
            Activation::LeakyRelu(a) => a != 1.0,
            _ => false,
        }
    }

    /// Input values at which a derivative is discontinuous.
    pub fn kinks(self) -> &'static [f64] {
        match self {
            Activation::Relu | Activation::LeakyRelu(_) | Activation::Elu => &[0.0],
            Activation::Sigmoid | Activation::Tanh => &[],
        }
    }
}

/// Which statistics batch norm normalizes with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    BatchStats,
    MovingStats,
}

/// Per-feature statistics of the current batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Moving mean/variance with their blending momentum.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Weight kept by the old statistics on each update.
    pub momentum: f64,
    pub eps: f64,
}

impl RunningStats {
    pub const DEFAULT_MOMENTUM: f64 = 0.99;
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn new(features: usize) -> Self {
        Self {
            mean: vec![0.0; features],
            var: vec![1.0; features],
            momentum: Self::DEFAULT_MOMENTUM,
            eps: Self::DEFAULT_EPS,
        }
    }

    pub fn blend(&mut self, batch: &BatchStats) {
        let m = self.momentum;
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = m * *r + (1.0 - m) * b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var) {
            *r = (m * *r + (1.0 - m) * b).max(0.0);
        }
    }
}

/// Learnable scale/shift plus moving statistics for one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub stats: RunningStats,
}

impl BatchNormState {
    pub fn new(features: usize) -> Self {
        Self {
            gamma: Tensor::full([features], 1.0),
            beta: Tensor::zeros([features]),
            stats: RunningStats::new(features),
        }
    }

    /// Records `gamma`/`beta` as trainable leaves and applies batch norm.
    /// Returns the output together with the `(gamma, beta)` leaves.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        x: Var,
        mode: BnMode,
        update: bool,
    ) -> Result<(Var, Var, Var)> {
        let g = tape.leaf(self.gamma.clone(), true);
        let b = tape.leaf(self.beta.clone(), true);
        let y = tape.batch_norm(x, g, b, &mut self.stats, mode, update)?;
        Ok((y, g, b))
    }
}

/// Feature layout for batch norm: index = (outer * feat + f) * inner + i.
#[derive(Clone, Copy, Debug)]
struct BnLayout {
    outer: usize,
    feat: usize,
    inner: usize,
}

impl BnLayout {
    fn for_dims(dims: &[usize]) -> Option<Self> {
        match dims.len() {
            2 => Some(Self {
                outer: dims[0],
                feat: dims[1],
                inner: 1,
            }),
            4 => Some(Self {
                outer: dims[0],
                feat: dims[1],
                inner: dims[2] * dims[3],
            }),
            _ => None,
        }
    }

    fn for_each_feature(&self, mut f: impl FnMut(usize, usize)) {
        for o in 0..self.outer {
            for c in 0..self.feat {
                let base = (o * self.feat + c) * self.inner;
                for i in 0..self.inner {
                    f(c, base + i);
                }
            }
        }
    }

    fn count(&self) -> f64 {
        (self.outer * self.inner) as f64
    }
}

enum Op {
    Leaf,
    Affine {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        k: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    Activation {
        x: Var,
        kind: Activation,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        mode: BnMode,
        layout: BnLayout,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Mse {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: f64,
    },
    Sum {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Gather {
        x: Var,
        index: Rc<[usize]>,
    },
    MeanLastAxis {
        x: Var,
        width: usize,
    },
    BiLstm {
        x: Var,
        dirs: [LstmDirection; 2],
        combine: Combine,
        traces: Box<[DirTrace; 2]>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    needs_grad: bool,
}

/// Records operations for reverse-mode differentiation.
///
/// Records are appended in execution order, so recording order is a
/// topological order and [`Tape::backward`] visits each record once in
/// reverse.
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Tensor>>,
    validate: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            validate: cfg!(debug_assertions),
        }
    }

    /// Toggles the non-finite check on every recorded output.
    pub fn set_validate(&mut self, on: bool) {
        self.validate = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input. Leaves with `requires_grad == false` never receive a gradient.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_unchecked(value, Op::Leaf, requires_grad, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[self.check(v).expect("foreign variable")].value
    }

    pub fn try_value(&self, v: Var) -> Result<&Tensor> {
        Ok(&self.nodes[self.check(v)?].value)
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.value(v).dims()
    }

    /// Accumulated gradient of a leaf, present only after a backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.check(v).ok().and_then(|i| self.leaf_grads[i].as_ref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        let i = self.check(v).ok()?;
        self.leaf_grads[i].take()
    }

    /// For every input element of a relu-family activation, whether it lies
    /// on the kink's positive side. Two evaluations with equal patterns are
    /// on the same smooth piece.
    pub fn kink_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Activation { x, kind } = node.op {
                if kind.slope_jumps() {
                    out.extend(self.nodes[x.idx].value.data().iter().map(|&v| v >= 0.0));
                }
            }
        }
        out
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape == self.id && v.idx < self.nodes.len() {
            Ok(v.idx)
        } else {
            Err(TensorError::UnknownVar(v.idx))
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.idx].needs_grad
    }

    fn push_unchecked(
        &mut self,
        value: Tensor,
        op: Op,
        requires_grad: bool,
        needs_grad: bool,
    ) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            needs_grad,
        });
        self.leaf_grads.push(None);
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if self.validate && !value.all_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let needs = inputs.iter().any(|&v| self.needs(v));
        Ok(self.push_unchecked(value, op, false, needs))
    }

    fn mismatch(op: &'static str, expected: impl Into<String>, got: &[usize]) -> TensorError {
        TensorError::ShapeMismatch {
            op,
            expected: expected.into(),
            got: dims_str(got),
        }
    }

    // ---- operations -------------------------------------------------------

    /// `x[B x I] . w[I x O] + b[O]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xi, wi, bi) = (self.check(x)?, self.check(w)?, self.check(b)?);
        let (xd, wd, bd) = (
            self.nodes[xi].value.dims(),
            self.nodes[wi].value.dims(),
            self.nodes[bi].value.dims(),
        );
        if xd.len() != 2 || wd.len() != 2 || xd[1] != wd[0] || bd != [wd[1]] {
            return Err(TensorError::ShapeMismatch {
                op: "affine",
                expected: "x: BxI, w: IxO, b: O".into(),
                got: format!("x {}, w {}, b {}", dims_str(xd), dims_str(wd), dims_str(bd)),
            });
        }
        let (bsz, inp, out) = (xd[0], xd[1], wd[1]);
        let mut y = vec![0.0; bsz * out];
        let bias = self.nodes[bi].value.data();
        for row in y.chunks_mut(out) {
            row.copy_from_slice(bias);
        }
        gemm(
            bsz,
            inp,
            out,
            1.0,
            self.nodes[xi].value.data(),
            false,
            self.nodes[wi].value.data(),
            false,
            1.0,
            &mut y,
        );
        let value = Tensor::from_parts(vec![bsz, out], y);
        self.push("affine", value, Op::Affine { x, w, b }, &[x, w, b])
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        k: Var,
        bias: Option<Var>,
        stride: (usize, usize),
        padding: Padding,
    ) -> Result<Var> {
        let (xi, ki) = (self.check(x)?, self.check(k)?);
        let geom = ConvGeometry::new(
            self.nodes[xi].value.dims(),
            self.nodes[ki].value.dims(),
            stride,
            padding,
        )?;
        let bias_data = match bias {
            Some(b) => {
                let bi = self.check(b)?;
                let bd = self.nodes[bi].value.dims();
                if bd != [geom.out_ch] {
                    return Err(Self::mismatch(
                        "conv2d bias",
                        format!("{}", geom.out_ch),
                        bd,
                    ));
                }
                Some(self.nodes[bi].value.data())
            }
            None => None,
        };
        let y = conv_forward(
            &geom,
            self.nodes[xi].value.data(),
            self.nodes[ki].value.data(),
            bias_data,
        );
        let value = Tensor::from_parts(geom.out_dims().to_vec(), y);
        let mut inputs = vec![x, k];
        inputs.extend(bias);
        self.push("conv2d", value, Op::Conv2d { x, k, bias, geom }, &inputs)
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let xi = self.check(x)?;
        let value = self.nodes[xi].value.map(|v| kind.apply(v));
        self.push("activation", value, Op::Activation { x, kind }, &[x])
    }

    /// `gamma * (x - mu) / sqrt(var + eps) + beta`, per feature (rank 2) or per channel (rank 4).
    ///
    /// With `update`, the moving statistics blend in this batch's statistics
    /// after normalization, whichever `mode` is used.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats,
        mode: BnMode,
        update: bool,
    ) -> Result<Var> {
        let (xi, gi, bi) = (self.check(x)?, self.check(gamma)?, self.check(beta)?);
        let xd = self.nodes[xi].value.dims().to_vec();
        let layout = BnLayout::for_dims(&xd)
            .ok_or_else(|| Self::mismatch("batch_norm", "BxF or BxCxHxW", &xd))?;
        let f = layout.feat;
        for (name, d) in [
            ("batch_norm gamma", self.nodes[gi].value.dims()),
            ("batch_norm beta", self.nodes[bi].value.dims()),
        ] {
            if d != [f] {
                return Err(Self::mismatch(name, f.to_string(), d));
            }
        }
        if stats.mean.len() != f || stats.var.len() != f {
            return Err(Self::mismatch(
                "batch_norm stats",
                f.to_string(),
                &[stats.mean.len()],
            ));
        }
        let xs = self.nodes[xi].value.data();
        let n = layout.count();
        let mut mean = vec![0.0; f];
        layout.for_each_feature(|c, i| mean[c] += xs[i]);
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; f];
        layout.for_each_feature(|c, i| {
            let d = xs[i] - mean[c];
            var[c] += d * d;
        });
        var.iter_mut().for_each(|v| *v /= n);
        let batch = BatchStats { mean, var };

        let (mu, sigma2) = match mode {
            BnMode::BatchStats => (&batch.mean, &batch.var),
            BnMode::MovingStats => (&stats.mean, &stats.var),
        };
        let inv_std: Vec<f64> = sigma2
            .iter()
            .map(|v| 1.0 / (v + stats.eps).sqrt())
            .collect();
        let g = self.nodes[gi].value.data();
        let b = self.nodes[bi].value.data();
        let mut xhat = vec![0.0; xs.len()];
        let mut y = vec![0.0; xs.len()];
        layout.for_each_feature(|c, i| {
            let h = (xs[i] - mu[c]) * inv_std[c];
            xhat[i] = h;
            y[i] = g[c] * h + b[c];
        });
        if update {
            stats.blend(&batch);
        }
        let value = Tensor::from_parts(xd, y);
        self.push(
            "batch_norm",
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                mode,
                layout,
            },
            &[x, gamma, beta],
        )
    }

    /// Inverted dropout. Eval mode and `rate == 0` return `x` itself.
    ///
    /// With `channel_wise`, one draw covers each `(dim0, dim1)` slice (a whole
    /// feature map of a `BxCxHxW` tensor).
    pub fn dropout(
        &mut self,
        x: Var,
        rate: f64,
        train: bool,
        channel_wise: bool,
        rng: &mut impl Rng,
    ) -> Result<Var> {
        let xi = self.check(x)?;
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::InvalidRate(rate));
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let dims = self.nodes[xi].value.dims().to_vec();
        let keep = 1.0 / (1.0 - rate);
        let len = self.nodes[xi].value.len();
        let group = if channel_wise && dims.len() > 2 {
            dims[2..].iter().product()
        } else {
            1
        };
        let mut mask = Vec::with_capacity(len);
        for _ in 0..len / group {
            let m = if rng.random::<f64>() < rate {
                0.0
            } else {
                keep
            };
            mask.extend(std::iter::repeat_n(m, group));
        }
        let xs = self.nodes[xi].value.data();
        let y: Vec<f64> = xs.iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::from_parts(dims, y);
        self.push("dropout", value, Op::Dropout { x, mask }, &[x])
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let li = self.check(logits)?;
        let dims = self.nodes[li].value.dims();
        if dims.len() != 2 || dims[0] != labels.len() {
            return Err(Self::mismatch(
                "softmax_cross_entropy",
                format!("{}xD logits", labels.len()),
                dims,
            ));
        }
        let classes = dims[1];
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(TensorError::LabelOutOfRange { label, classes });
        }
        let zs = self.nodes[li].value.data();
        let mut probs = vec![0.0; zs.len()];
        let mut total = 0.0;
        for (r, (row, prow)) in zs
            .chunks(classes)
            .zip(probs.chunks_mut(classes))
            .enumerate()
        {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (p, &z) in prow.iter_mut().zip(row) {
                *p = (z - max).exp();
                denom += *p;
            }
            prow.iter_mut().for_each(|p| *p /= denom);
            total += denom.ln() + max - row[labels[r]];
        }
        let value = Tensor::scalar(total / labels.len() as f64);
        self.push(
            "softmax_cross_entropy",
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Mean over all elements of `(a - b)^2`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = self.same_dims("mse", a, b)?;
        let (av, bv) = (self.nodes[ai].value.data(), self.nodes[bi].value.data());
        let s: f64 = av.iter().zip(bv).map(|(x, y)| (x - y) * (x - y)).sum();
        let value = Tensor::scalar(s / av.len() as f64);
        self.push("mse", value, Op::Mse { a, b }, &[a, b])
    }

    fn same_dims(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (ad, bd) = (self.nodes[ai].value.dims(), self.nodes[bi].value.dims());
        if ad != bd {
            return Err(Self::mismatch(op, dims_str(ad), bd));
        }
        Ok((ai, bi))
    }

    fn zip_with(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ai, bi) = self.same_dims(name, a, b)?;
        let av = &self.nodes[ai].value;
        let data = av
            .data()
            .iter()
            .zip(self.nodes[bi].value.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::from_parts(av.dims().to_vec(), data);
        self.push(name, value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let xi = self.check(x)?;
        let value = self.nodes[xi].value.map(|v| v * c);
        self.push("scale", value, Op::Scale { x, c }, &[x])
    }

    /// Sum of all elements. Panics on a foreign variable.
    pub fn sum(&mut self, x: Var) -> Var {
        self.try_sum(x).expect("sum of a foreign variable")
    }

    pub fn try_sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let value = Tensor::scalar(self.nodes[xi].value.data().iter().sum());
        self.push("sum", value, Op::Sum { x }, &[x])
    }

    pub fn reshape(&mut self, x: Var, dims: impl Into<Vec<usize>>) -> Result<Var> {
        let xi = self.check(x)?;
        let value = self.nodes[xi].value.clone().reshape(dims)?;
        self.push("reshape", value, Op::Reshape { x }, &[x])
    }

    /// `out[i] = x[index[i]]` over flat storage, shaped as `dims`.
    ///
    /// Splicing, upsampling, permutation and slicing are all gathers.
    pub fn gather(
        &mut self,
        x: Var,
        index: impl Into<Rc<[usize]>>,
        dims: impl Into<Vec<usize>>,
    ) -> Result<Var> {
        let xi = self.check(x)?;
        let index: Rc<[usize]> = index.into();
        let dims = dims.into();
        let src = self.nodes[xi].value.data();
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(Self::mismatch(
                "gather",
                format!("index < {}", src.len()),
                &[bad],
            ));
        }
        let data: Vec<f64> = index.iter().map(|&i| src[i]).collect();
        let value = Tensor::new(dims, data)?;
        self.push("gather", value, Op::Gather { x, index }, &[x])
    }

    /// Mean over the last axis; a rank-1 input collapses to a one-element tensor.
    pub fn mean_last_axis(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let dims = self.nodes[xi].value.dims();
        let width = *dims.last().unwrap();
        let out_dims = if dims.len() > 1 {
            dims[..dims.len() - 1].to_vec()
        } else {
            vec![1]
        };
        let data = self.nodes[xi]
            .value
            .data()
            .chunks(width)
            .map(|c| c.iter().sum::<f64>() / width as f64)
            .collect();
        let value = Tensor::from_parts(out_dims, data);
        self.push("mean_last_axis", value, Op::MeanLastAxis { x, width }, &[x])
    }

    /// Bidirectional LSTM over a `T x I` sequence.
    pub fn bilstm(
        &mut self,
        x: Var,
        fwd: LstmDirection,
        bwd: LstmDirection,
        combine: Combine,
    ) -> Result<Var> {
        let xi = self.check(x)?;
        let xd = self.nodes[xi].value.dims().to_vec();
        if xd.len() != 2 {
            return Err(Self::mismatch("bilstm", "TxI", &xd));
        }
        let (steps, inp) = (xd[0], xd[1]);
        let hid = {
            let i = self.check(fwd.recurrent)?;
            self.nodes[i].value.dims()[0]
        };
        for d in [fwd, bwd] {
            let (wi, hi, bi) = (
                self.check(d.input)?,
                self.check(d.recurrent)?,
                self.check(d.bias)?,
            );
            let ok = self.nodes[wi].value.dims() == [inp, 4 * hid]
                && self.nodes[hi].value.dims() == [hid, 4 * hid]
                && self.nodes[bi].value.dims() == [4 * hid];
            if !ok {
                return Err(Self::mismatch(
                    "bilstm",
                    format!("Wx {inp}x{}, Wh {hid}x{}, b {}", 4 * hid, 4 * hid, 4 * hid),
                    self.nodes[wi].value.dims(),
                ));
            }
        }
        let xs = self.nodes[xi].value.data();
        let params = |d: LstmDirection| DirParams {
            wx: self.nodes[d.input.idx].value.data(),
            wh: self.nodes[d.recurrent.idx].value.data(),
            b: self.nodes[d.bias.idx].value.data(),
        };
        let tf = dir_forward(xs, steps, inp, hid, &params(fwd), false);
        let tb = dir_forward(xs, steps, inp, hid, &params(bwd), true);
        let value = match combine {
            Combine::Sum => {
                let data = tf
                    .hidden
                    .iter()
                    .zip(&tb.hidden)
                    .map(|(a, b)| a + b)
                    .collect();
                Tensor::from_parts(vec![steps, hid], data)
            }
            Combine::Concat => {
                let mut data = Vec::with_capacity(steps * 2 * hid);
                for t in 0..steps {
                    data.extend_from_slice(&tf.hidden[t * hid..(t + 1) * hid]);
                    data.extend_from_slice(&tb.hidden[t * hid..(t + 1) * hid]);
                }
                Tensor::from_parts(vec![steps, 2 * hid], data)
            }
        };
        let inputs = [
            x,
            fwd.input,
            fwd.recurrent,
            fwd.bias,
            bwd.input,
            bwd.recurrent,
            bwd.bias,
        ];
        self.push(
            "bilstm",
            value,
            Op::BiLstm {
                x,
                dirs: [fwd, bwd],
                combine,
                traces: Box::new([tf, tb]),
            },
            &inputs,
        )
    }

    // ---- backward ---------------------------------------------------------

    /// Propagates d(loss)/d(.) to every leaf with `requires_grad`.
    ///
    /// Leaf gradients accumulate across calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let li = self.check(loss)?;
        let ld = self.nodes[li].value.dims();
        if !self.nodes[li].value.is_scalar() {
            return Err(TensorError::NotScalar(ld.to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[li] = Some(Tensor::from_parts(ld.to_vec(), vec![1.0]));
        for i in (0..=li).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.backward_node(i, &gout, &mut grads);
        }
        for (i, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                if self.nodes[i].requires_grad {
                    match &mut self.leaf_grads[i] {
                        Some(acc) => acc.add_assign(&g),
                        slot @ None => *slot = Some(g),
                    }
                }
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, data: Vec<f64>) {
        if !self.needs(v) {
            return;
        }
        let dims = self.nodes[v.idx].value.dims().to_vec();
        let g = Tensor::from_parts(dims, data);
        match &mut grads[v.idx] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn val(&self, v: Var) -> &[f64] {
        self.nodes[v.idx].value.data()
    }

    fn backward_node(&self, i: usize, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        let dy = gout.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let (bsz, inp) = (
                    self.nodes[x.idx].value.dims()[0],
                    self.nodes[x.idx].value.dims()[1],
                );
                let out = self.nodes[w.idx].value.dims()[1];
                if self.needs(*x) {
                    let mut dx = vec![0.0; bsz * inp];
                    gemm(
                        bsz,
                        out,
                        inp,
                        1.0,
                        dy,
                        false,
                        self.val(*w),
                        true,
                        0.0,
                        &mut dx,
                    );
                    self.accumulate(grads, *x, dx);
                }
                if self.needs(*w) {
                    let mut dw = vec![0.0; inp * out];
                    gemm(
                        inp,
                        bsz,
                        out,
                        1.0,
                        self.val(*x),
                        true,
                        dy,
                        false,
                        0.0,
                        &mut dw,
                    );
                    self.accumulate(grads, *w, dw);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; out];
                    for row in dy.chunks(out) {
                        db.iter_mut().zip(row).for_each(|(a, g)| *a += g);
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Conv2d { x, k, bias, geom } => {
                let need = (
                    self.needs(*x),
                    self.needs(*k),
                    bias.is_some_and(|b| self.needs(b)),
                );
                let g = conv_backward(geom, self.val(*x), self.val(*k), dy, need);
                if let Some(dx) = g.dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dk) = g.dk {
                    self.accumulate(grads, *k, dk);
                }
                if let (Some(db), Some(b)) = (g.db, bias) {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Activation { x, kind } => {
                let xs = self.val(*x);
                let ys = self.nodes[i].value.data();
                let dx = dy
                    .iter()
                    .zip(xs.iter().zip(ys))
                    .map(|(g, (&xv, &yv))| g * kind.derivative(xv, yv))
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                mode,
                layout,
            } => {
                let f = layout.feat;
                let mut dgamma = vec![0.0; f];
                let mut dbeta = vec![0.0; f];
                layout.for_each_feature(|c, j| {
                    dgamma[c] += dy[j] * xhat[j];
                    dbeta[c] += dy[j];
                });
                if self.needs(*x) {
                    let g = self.val(*gamma);
                    let mut dx = vec![0.0; dy.len()];
                    match mode {
                        BnMode::MovingStats => {
                            layout.for_each_feature(|c, j| dx[j] = dy[j] * g[c] * inv_std[c]);
                        }
                        BnMode::BatchStats => {
                            // sums of dxhat and dxhat * xhat per feature
                            let n = layout.count();
                            let mut s1 = vec![0.0; f];
                            let mut s2 = vec![0.0; f];
                            layout.for_each_feature(|c, j| {
                                let dh = dy[j] * g[c];
                                s1[c] += dh;
                                s2[c] += dh * xhat[j];
                            });
                            layout.for_each_feature(|c, j| {
                                let dh = dy[j] * g[c];
                                dx[j] = inv_std[c] / n * (n * dh - s1[c] - xhat[j] * s2[c]);
                            });
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::Dropout { x, mask } => {
                let dx = dy.iter().zip(mask).map(|(g, m)| g * m).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let g = dy[0] / labels.len() as f64;
                let classes = probs.len() / labels.len();
                let mut dz: Vec<f64> = probs.iter().map(|p| p * g).collect();
                for (r, &l) in labels.iter().enumerate() {
                    dz[r * classes + l] -= g;
                }
                self.accumulate(grads, *logits, dz);
            }
            Op::Mse { a, b } => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let c = 2.0 * dy[0] / av.len() as f64;
                let da: Vec<f64> = av.iter().zip(bv).map(|(x, y)| c * (x - y)).collect();
                if self.needs(*b) {
                    self.accumulate(grads, *b, da.iter().map(|v| -v).collect());
                }
                self.accumulate(grads, *a, da);
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, dy.to_vec());
                self.accumulate(grads, *b, dy.to_vec());
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, dy.to_vec());
                self.accumulate(grads, *b, dy.iter().map(|v| -v).collect());
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.val(*a), self.val(*b));
                if self.needs(*a) {
                    self.accumulate(grads, *a, dy.iter().zip(bv).map(|(g, y)| g * y).collect());
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, dy.iter().zip(av).map(|(g, x)| g * x).collect());
                }
            }
            Op::Scale { x, c } => {
                self.accumulate(grads, *x, dy.iter().map(|g| g * c).collect());
            }
            Op::Sum { x } => {
                let n = self.nodes[x.idx].value.len();
                self.accumulate(grads, *x, vec![dy[0]; n]);
            }
            Op::Reshape { x } => {
                self.accumulate(grads, *x, dy.to_vec());
            }
            Op::Gather { x, index } => {
                let mut dx = vec![0.0; self.nodes[x.idx].value.len()];
                for (g, &j) in dy.iter().zip(index.iter()) {
                    dx[j] += g;
                }
                self.accumulate(grads, *x, dx);
            }
            Op::MeanLastAxis { x, width } => {
                let inv = 1.0 / *width as f64;
                let dx = dy
                    .iter()
                    .flat_map(|g| std::iter::repeat_n(g * inv, *width))
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::BiLstm {
                x,
                dirs,
                combine,
                traces,
            } => {
                let xd = self.nodes[x.idx].value.dims();
                let (steps, inp) = (xd[0], xd[1]);
                let hid = self.nodes[dirs[0].recurrent.idx].value.dims()[0];
                let (dh_f, dh_b) = match combine {
                    Combine::Sum => (dy.to_vec(), dy.to_vec()),
                    Combine::Concat => {
                        let mut f = Vec::with_capacity(steps * hid);
                        let mut b = Vec::with_capacity(steps * hid);
                        for row in dy.chunks(2 * hid) {
                            f.extend_from_slice(&row[..hid]);
                            b.extend_from_slice(&row[hid..]);
                        }
                        (f, b)
                    }
                };
                let xs = self.val(*x);
                for (d, (tr, dh)) in dirs.iter().zip(traces.iter().zip([dh_f, dh_b])) {
                    let p = DirParams {
                        wx: self.val(d.input),
                        wh: self.val(d.recurrent),
                        b: self.val(d.bias),
                    };
                    let g = dir_backward(xs, steps, inp, hid, &p, tr, &dh);
                    self.accumulate(grads, *x, g.dx);
                    self.accumulate(grads, d.input, g.dwx);
                    self.accumulate(grads, d.recurrent, g.dwh);
                    self.accumulate(grads, d.bias, g.db);
                }
            }
        }
    }
}
