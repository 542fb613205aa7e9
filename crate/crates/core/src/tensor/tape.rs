use super::ops::{self, ConvGeom};
use super::{gemm, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an op defined outside the tape.
///
/// Returns one optional gradient buffer per input, in input order. A `None`
/// entry means no contribution.
pub trait CustomOp<T: Real> {
    fn name(&self) -> &'static str;

    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad_output: &[T]) -> Vec<Option<Vec<T>>>;
}

enum Op<T: Real> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    ChannelAffine {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    MeanAll(Var),
    SumAll(Var),
    Scale(Var, T),
    WeightedSum(Vec<(Var, T)>),
    BatchMean(Var),
    StraightThrough(Var),
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp<T>>,
    },
}

impl<T: Real> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batch_norm",
            Op::ChannelAffine { .. } => "channel_affine",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Add(..) => "add",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::Linear { .. } => "linear",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::MeanAll(_) => "mean_all",
            Op::SumAll(_) => "sum_all",
            Op::Scale(..) => "scale",
            Op::WeightedSum(_) => "weighted_sum",
            Op::BatchMean(_) => "batch_mean",
            Op::StraightThrough(_) => "straight_through",
            Op::Custom { op, .. } => op.name(),
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, .. } => vec![*x, *w],
            Op::BatchNorm { x, gamma, beta, .. } | Op::ChannelAffine { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
            Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::GlobalAvgPool(x)
            | Op::MeanAll(x)
            | Op::SumAll(x)
            | Op::Scale(x, _)
            | Op::BatchMean(x)
            | Op::StraightThrough(x) => vec![*x],
            Op::Add(a, b) => vec![*a, *b],
            Op::Linear { x, w, b } => vec![*x, *w, *b],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
            Op::WeightedSum(terms) => terms.iter().map(|(v, _)| *v).collect(),
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Batch statistics produced by a training-mode normalization, used by the
/// caller to update running averages.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance.
    pub var: Vec<T>,
    /// Number of elements each channel statistic was computed over.
    pub count: usize,
}

/// A Wengert list: every forward op appends a node, [`Tape::backward`] walks
/// it in reverse.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Leaf gradients from one backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for a leaf, `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let inputs = op.inputs();
        if cfg!(debug_assertions) {
            let inputs_finite = inputs.iter().all(|v| self.nodes[v.0].value.is_finite());
            assert!(
                !inputs_finite || value.is_finite(),
                "{} produced non-finite values from finite inputs",
                op.name()
            );
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an externally defined differentiable op.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Var {
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
        )
    }

    /// 2-D cross-correlation. `x` is NCHW, `w` is OIKK.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] {
            return Err(Error::shape("conv2d", xs, ws));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d: stride must be positive"));
        }
        let k = ws[2];
        if xs[2] + 2 * pad < k || xs[3] + 2 * pad < k {
            return Err(Error::shape("conv2d", xs, ws));
        }
        let geom = ConvGeom::new(xs[0], xs[1], xs[2], xs[3], ws[0], k, stride, pad);
        let cols = ops::im2col(self.value(x).data(), &geom);
        let out = ops::conv_forward(self.value(w).data(), &cols, &geom);
        let out = Tensor::new(vec![geom.batch, geom.cout, geom.hout, geom.wout], out)?;
        Ok(self.push(out, Op::Conv2d { x, w, geom, cols }))
    }

    /// Per-channel normalization with batch statistics and a learned affine
    /// transform. Accepts `[B, C]` or `[B, C, H, W]`.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, BatchStats<T>)> {
        let (b, c, s) = self.channel_dims("batch_norm", x, gamma, beta)?;
        let fwd = ops::batch_norm_forward(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            b,
            c,
            s,
            eps,
        );
        let out = Tensor::new(self.shape(x).to_vec(), fwd.out)?;
        let stats = BatchStats {
            mean: fwd.mean,
            var: fwd.var,
            count: b * s,
        };
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat: fwd.xhat,
                inv_std: fwd.inv_std,
            },
        );
        Ok((v, stats))
    }

    /// Normalization with fixed statistics (evaluation-mode batch norm).
    pub fn channel_affine(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: T,
    ) -> Result<Var> {
        let (b, c, s) = self.channel_dims("channel_affine", x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::shape("channel_affine", &[c], &[mean.len(), var.len()]));
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * s;
                for i in base..base + s {
                    let h = (xd[i] - mean[ci]) * inv_std[ci];
                    xhat[i] = h;
                    out[i] = g[ci] * h + bt[ci];
                }
            }
        }
        let out = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(
            out,
            Op::ChannelAffine {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    fn channel_dims(&self, op: &'static str, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let xs = self.shape(x);
        if xs.len() != 2 && xs.len() != 4 {
            return Err(Error::shape(op, xs, self.shape(gamma)));
        }
        let c = xs[1];
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::shape(op, xs, self.shape(gamma)));
        }
        let s = xs[2..].iter().product();
        Ok((xs[0], c, s))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|&a| a.max(T::zero())).collect(),
        )
        .expect("same shape");
        self.push(out, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|&a| ops::sigmoid(a)).collect(),
        )
        .expect("same shape");
        self.push(out, Op::Sigmoid(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&p, &q)| p + q)
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// `[B, C, H, W] -> [B, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 4 {
            return Err(Error::shape("global_avg_pool", xs, &[0, 0, 0, 0]));
        }
        let (b, c, s) = (xs[0], xs[1], xs[2] * xs[3]);
        let inv = T::one() / T::of(s as f64);
        let data = self
            .value(x)
            .data()
            .chunks(s)
            .map(|ch| ch.iter().copied().sum::<T>() * inv)
            .collect();
        let out = Tensor::new(vec![b, c], data)?;
        Ok(self.push(out, Op::GlobalAvgPool(x)))
    }

    /// `y = x W^T + b` with `x: [B, in]`, `W: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::shape("linear", xs, ws));
        }
        let (batch, fin, fout) = (xs[0], xs[1], ws[0]);
        if self.value(b).numel() != fout {
            return Err(Error::shape("linear", ws, self.shape(b)));
        }
        let mut out = vec![T::zero(); batch * fout];
        for row in out.chunks_mut(fout) {
            row.copy_from_slice(self.value(b).data());
        }
        gemm(
            false,
            true,
            batch,
            fout,
            fin,
            T::one(),
            self.value(x).data(),
            self.value(w).data(),
            T::one(),
            &mut out,
        );
        let out = Tensor::new(vec![batch, fout], out)?;
        Ok(self.push(out, Op::Linear { x, w, b }))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.shape(logits);
        if ls.len() != 2 || ls[0] != labels.len() || ls[0] == 0 {
            return Err(Error::shape("softmax_cross_entropy", ls, &[labels.len()]));
        }
        let k = ls[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let data = self.value(logits).data();
        let mut probs = vec![T::zero(); data.len()];
        let mut loss = T::zero();
        for (i, (row, p)) in data.chunks(k).zip(probs.chunks_mut(k)).enumerate() {
            let max = row.iter().fold(T::neg_infinity(), |m, &a| m.max(a));
            let mut z = T::zero();
            for (pj, &a) in p.iter_mut().zip(row) {
                *pj = (a - max).exp();
                z += *pj;
            }
            for pj in p.iter_mut() {
                *pj = *pj / z;
            }
            loss += z.ln() + max - row[labels[i]];
        }
        loss = loss / T::of(labels.len() as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.data().iter().copied().sum::<T>() / T::of(v.numel() as f64);
        self.push(Tensor::scalar(m), Op::MeanAll(x))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| a * factor).collect())
            .expect("same shape");
        self.push(out, Op::Scale(x, factor))
    }

    /// `sum_i c_i x_i` over same-shaped inputs.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let Some(&(first, _)) = terms.first() else {
            return Err(Error::invalid("weighted_sum of nothing"));
        };
        let shape = self.shape(first).to_vec();
        let mut out = vec![T::zero(); self.value(first).numel()];
        for &(v, c) in terms {
            if self.shape(v) != shape.as_slice() {
                return Err(Error::shape("weighted_sum", &shape, self.shape(v)));
            }
            for (o, &a) in out.iter_mut().zip(self.value(v).data()) {
                *o += c * a;
            }
        }
        Ok(self.push(Tensor::new(shape, out)?, Op::WeightedSum(terms.to_vec())))
    }

    /// Column mean of a `[B, C]` matrix, giving `[C]`.
    pub fn batch_mean(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 2 || xs[0] == 0 {
            return Err(Error::invalid(format!(
                "batch_mean needs a non-empty [B, C] input, got {xs:?}"
            )));
        }
        let (b, c) = (xs[0], xs[1]);
        let mut out = vec![T::zero(); c];
        for row in self.value(x).data().chunks(c) {
            for (o, &a) in out.iter_mut().zip(row) {
                *o += a;
            }
        }
        let inv = T::one() / T::of(b as f64);
        out.iter_mut().for_each(|o| *o *= inv);
        Ok(self.push(Tensor::new(vec![c], out)?, Op::BatchMean(x)))
    }

    /// Forward `1(x > threshold)`, backward identity.
    pub fn straight_through_threshold(&mut self, x: Var, threshold: T) -> Var {
        let v = self.value(x);
        let out = Tensor::new(
            v.shape().to_vec(),
            v.data()
                .iter()
                .map(|&a| if a > threshold { T::one() } else { T::zero() })
                .collect(),
        )
        .expect("same shape");
        self.push(out, Op::StraightThrough(x))
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
        }
        // Keep only leaf gradients.
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, geom, cols } => {
                let gt = ops::conv_grad_output_to_rows(g, geom);
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); geom.cout * geom.kdim()];
                    gemm(
                        false,
                        true,
                        geom.cout,
                        geom.kdim(),
                        geom.ncols(),
                        T::one(),
                        &gt,
                        cols,
                        T::zero(),
                        &mut dw,
                    );
                    accumulate(grads, *w, dw);
                }
                if self.wants(*x) {
                    let mut dcols = vec![T::zero(); geom.kdim() * geom.ncols()];
                    gemm(
                        true,
                        false,
                        geom.kdim(),
                        geom.ncols(),
                        geom.cout,
                        T::one(),
                        self.value(*w).data(),
                        &gt,
                        T::zero(),
                        &mut dcols,
                    );
                    accumulate(grads, *x, ops::col2im(&dcols, geom));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (b, c, s) = dims_bcs(self.shape(*x));
                let gam = self.value(*gamma).data();
                let (dx, dgamma, dbeta) = ops::batch_norm_backward(g, xhat, inv_std, gam, b, c, s);
                if self.wants(*x) {
                    accumulate(grads, *x, dx);
                }
                if self.wants(*gamma) {
                    accumulate(grads, *gamma, dgamma);
                }
                if self.wants(*beta) {
                    accumulate(grads, *beta, dbeta);
                }
            }
            Op::ChannelAffine {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (b, c, s) = dims_bcs(self.shape(*x));
                let gam = self.value(*gamma).data();
                let mut dx = vec![T::zero(); g.len()];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * s;
                        for i in base..base + s {
                            dx[i] = g[i] * gam[ci] * inv_std[ci];
                            dgamma[ci] += g[i] * xhat[i];
                            dbeta[ci] += g[i];
                        }
                    }
                }
                if self.wants(*x) {
                    accumulate(grads, *x, dx);
                }
                if self.wants(*gamma) {
                    accumulate(grads, *gamma, dgamma);
                }
                if self.wants(*beta) {
                    accumulate(grads, *beta, dbeta);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let dx = g
                    .iter()
                    .zip(xv)
                    .map(|(&gi, &a)| if a > T::zero() { gi } else { T::zero() })
                    .collect();
                accumulate(grads, *x, dx);
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let dx = g.iter().zip(y).map(|(&gi, &s)| gi * s * (T::one() - s)).collect();
                accumulate(grads, *x, dx);
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.to_vec());
                }
            }
            Op::GlobalAvgPool(x) => {
                let xs = self.shape(*x);
                let s = xs[2] * xs[3];
                let inv = T::one() / T::of(s as f64);
                let mut dx = Vec::with_capacity(xs.iter().product());
                for &gi in g {
                    dx.extend(std::iter::repeat_n(gi * inv, s));
                }
                accumulate(grads, *x, dx);
            }
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let (batch, fin) = (xs[0], xs[1]);
                let fout = self.shape(*w)[0];
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); batch * fin];
                    gemm(
                        false,
                        false,
                        batch,
                        fin,
                        fout,
                        T::one(),
                        g,
                        self.value(*w).data(),
                        T::zero(),
                        &mut dx,
                    );
                    accumulate(grads, *x, dx);
                }
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); fout * fin];
                    gemm(
                        true,
                        false,
                        fout,
                        fin,
                        batch,
                        T::one(),
                        g,
                        self.value(*x).data(),
                        T::zero(),
                        &mut dw,
                    );
                    accumulate(grads, *w, dw);
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); fout];
                    for row in g.chunks(fout) {
                        for (d, &gi) in db.iter_mut().zip(row) {
                            *d += gi;
                        }
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let k = self.shape(*logits)[1];
                let scale = g[0] / T::of(labels.len() as f64);
                let mut dx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    dx[i * k + l] -= scale;
                }
                accumulate(grads, *logits, dx);
            }
            Op::MeanAll(x) => {
                let n = self.value(*x).numel();
                accumulate(grads, *x, vec![g[0] / T::of(n as f64); n]);
            }
            Op::SumAll(x) => {
                let n = self.value(*x).numel();
                accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::Scale(x, factor) => {
                accumulate(grads, *x, g.iter().map(|&gi| gi * *factor).collect());
            }
            Op::WeightedSum(terms) => {
                for &(v, c) in terms {
                    if self.wants(v) {
                        accumulate(grads, v, g.iter().map(|&gi| gi * c).collect());
                    }
                }
            }
            Op::BatchMean(x) => {
                let xs = self.shape(*x);
                let inv = T::one() / T::of(xs[0] as f64);
                let row: Vec<T> = g.iter().map(|&gi| gi * inv).collect();
                let mut dx = Vec::with_capacity(xs[0] * xs[1]);
                for _ in 0..xs[0] {
                    dx.extend_from_slice(&row);
                }
                accumulate(grads, *x, dx);
            }
            Op::StraightThrough(x) => accumulate(grads, *x, g.to_vec()),
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor<T>> = inputs.iter().map(|v| self.value(*v)).collect();
                let input_grads = op.backward(&values, &node.value, g);
                debug_assert_eq!(input_grads.len(), inputs.len(), "{}", op.name());
                for (v, dg) in inputs.iter().zip(input_grads) {
                    if let Some(dg) = dg {
                        if self.wants(*v) {
                            assert_eq!(dg.len(), self.value(*v).numel(), "{}", op.name());
                            accumulate(grads, *v, dg);
                        }
                    }
                }
            }
        }
    }
}

fn dims_bcs(shape: &[usize]) -> (usize, usize, usize) {
    (shape[0], shape[1], shape[2..].iter().product())
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}
