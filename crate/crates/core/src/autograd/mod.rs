//! A small define-by-run reverse-mode autodiff tape.
//!
//! Every forward call appends a node holding its value; [`Graph::backward`]
//! walks the tape in reverse. Nodes that cannot reach a gradient-requiring
//! leaf are skipped during the backward sweep.

mod conv;
mod spatial;

pub use conv::Conv2dCfg;

use crate::tensor::{softmax_rows, Tensor};
use conv::ConvGeom;

/// Label value excluded from losses and metrics.
pub const IGNORE_LABEL: u8 = 255;

const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    AddN(Vec<Var>),
    AddConst(Var),
    Scale(Var, f64),
    Mul(Var, Var),
    MulConst(Var, Tensor),
    SumAll(Var),
    Log(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    SoftmaxRows(Var),
    Relu(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        cfg: Conv2dCfg,
    },
    BatchNorm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Subsample(Var),
    ShiftCrop(Var),
    GlobalAvgPool(Var),
    Upsample(Var),
    Concat(Vec<Var>),
    WeightedSum {
        terms: Vec<(Var, usize)>,
        w: Var,
    },
    CrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        targets: Vec<u8>,
        selected: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Result of a batch-normalization forward pass in training mode.
pub struct BatchNormOut {
    pub out: Var,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(va.shape(), data);
        let ng = self.ng(&[a, b]);
        self.push(t, Op::Add(a, b), ng)
    }

    /// Sum of same-shaped tensors, accumulated left to right.
    pub fn add_n(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "add_n of nothing");
        if xs.len() == 1 {
            return xs[0];
        }
        let mut acc = self.value(xs[0]).clone();
        for &x in &xs[1..] {
            acc.add_assign(self.value(x));
        }
        let ng = self.ng(xs);
        self.push(acc, Op::AddN(xs.to_vec()), ng)
    }

    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Var {
        let va = self.value(a);
        assert_eq!(va.shape(), c.shape(), "add_const shape mismatch");
        let data = va.data().iter().zip(c.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(va.shape(), data);
        let ng = self.ng(&[a]);
        self.push(t, Op::AddConst(a), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|x| x * s);
        let ng = self.ng(&[a]);
        self.push(t, Op::Scale(a, s), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(va.shape(), data);
        let ng = self.ng(&[a, b]);
        self.push(t, Op::Mul(a, b), ng)
    }

    pub fn mul_const(&mut self, a: Var, c: &Tensor) -> Var {
        let va = self.value(a);
        assert_eq!(va.shape(), c.shape(), "mul_const shape mismatch");
        let data = va.data().iter().zip(c.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(va.shape(), data);
        let ng = self.ng(&[a]);
        self.push(t, Op::MulConst(a, c.clone()), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(&[a]);
        self.push(t, Op::SumAll(a), ng)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::ln);
        let ng = self.ng(&[a]);
        self.push(t, Op::Log(a), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let t = self.value(a).matmul(self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(t, Op::MatMul(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a).transpose();
        let ng = self.ng(&[a]);
        self.push(t, Op::Transpose(a), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = self.value(a).clone().reshape(shape);
        let ng = self.ng(&[a]);
        self.push(t, Op::Reshape(a), ng)
    }

    /// Softmax over the last axis of a matrix.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let cols = va.cols();
        let t = Tensor::new(va.shape(), softmax_rows(va.data(), cols));
        let ng = self.ng(&[a]);
        self.push(t, Op::SoftmaxRows(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.max(0.0));
        let ng = self.ng(&[a]);
        self.push(t, Op::Relu(a), ng)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, cfg: Conv2dCfg) -> Var {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), cfg);
        let data = conv::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let t = Tensor::new(&[geom.n, geom.cout, geom.ho, geom.wo], data);
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        self.push(t, Op::Conv2d { x, w, b, cfg }, ng)
    }

    /// Batch normalization using the statistics of the current batch.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
    ) -> BatchNormOut {
        let (n, c, h, w) = self.value(x).dims4();
        let plane = h * w;
        let m = (n * plane) as f64;
        let xd = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * plane;
                mean[ch] += xd[base..base + plane].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|v| *v /= m);
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * plane;
                var[ch] += xd[base..base + plane]
                    .iter()
                    .map(|v| (v - mean[ch]).powi(2))
                    .sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= m);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let out = self.normalize(x, gamma, beta, &mean, inv_std, true);
        BatchNormOut { out, mean, var }
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        mean: &[f64],
        var: &[f64],
    ) -> Var {
        let inv_std = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        self.normalize(x, gamma, beta, mean, inv_std, false)
    }

    fn normalize(
        &mut self,
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        mean: &[f64],
        inv_std: Vec<f64>,
        batch_stats: bool,
    ) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let plane = h * w;
        let xd = self.value(x).data();
        let g = gamma.map(|v| self.value(v).data());
        let bt = beta.map(|v| self.value(v).data());
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * plane;
                let gv = g.map_or(1.0, |g| g[ch]);
                let bv = bt.map_or(0.0, |b| b[ch]);
                for i in base..base + plane {
                    let xh = (xd[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = gv * xh + bv;
                }
            }
        }
        let t = Tensor::new(&[n, c, h, w], out);
        let mut deps = vec![x];
        deps.extend(gamma);
        deps.extend(beta);
        let ng = self.ng(&deps);
        self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            ng,
        )
    }

    /// 3x3 max pooling with padding one.
    pub fn max_pool3(&mut self, x: Var, stride: usize) -> Var {
        let (t, argmax) = spatial::max_pool3_forward(self.value(x), stride);
        let ng = self.ng(&[x]);
        self.push(t, Op::MaxPool { x, argmax }, ng)
    }

    /// Keeps every second row and column (`x[:, :, ::2, ::2]`).
    pub fn subsample2(&mut self, x: Var) -> Var {
        let t = spatial::subsample2_forward(self.value(x));
        let ng = self.ng(&[x]);
        self.push(t, Op::Subsample(x), ng)
    }

    /// `y[.., i, j] = x[.., i + 1, j + 1]`, zero past the border.
    pub fn shift_crop(&mut self, x: Var) -> Var {
        let t = spatial::shift_crop_forward(self.value(x));
        let ng = self.ng(&[x]);
        self.push(t, Op::ShiftCrop(x), ng)
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let t = spatial::global_avg_pool_forward(self.value(x));
        let ng = self.ng(&[x]);
        self.push(t, Op::GlobalAvgPool(x), ng)
    }

    /// Bilinear resize (half-pixel centers, no corner alignment).
    pub fn upsample_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let t = spatial::bilinear_forward(self.value(x), out_h, out_w);
        let ng = self.ng(&[x]);
        self.push(t, Op::Upsample(x), ng)
    }

    /// Channel concatenation of NCHW tensors.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Var {
        let vals: Vec<&Tensor> = xs.iter().map(|&v| self.value(v)).collect();
        let t = spatial::concat_channels_forward(&vals);
        let ng = self.ng(xs);
        self.push(t, Op::Concat(xs.to_vec()), ng)
    }

    /// `sum_t w[idx_t] * x_t` where `w` is indexed in flat order.
    pub fn weighted_sum(&mut self, terms: &[(Var, usize)], w: Var) -> Var {
        assert!(!terms.is_empty(), "weighted_sum of nothing");
        let wd = self.value(w).data();
        let mut acc = Tensor::zeros(self.value(terms[0].0).shape());
        for &(x, idx) in terms {
            let wv = wd[idx];
            let xv = self.value(x);
            assert_eq!(xv.shape(), acc.shape(), "weighted_sum shape mismatch");
            for (a, b) in acc.data_mut().iter_mut().zip(xv.data()) {
                *a += wv * b;
            }
        }
        let mut deps: Vec<Var> = terms.iter().map(|t| t.0).collect();
        deps.push(w);
        let ng = self.ng(&deps);
        self.push(
            acc,
            Op::WeightedSum {
                terms: terms.to_vec(),
                w,
            },
            ng,
        )
    }

    /// Pixel-wise softmax cross-entropy over NCHW logits.
    ///
    /// Pixels labelled [`IGNORE_LABEL`] are skipped. With `keep_fraction < 1`
    /// only the hardest `ceil(keep_fraction * valid)` pixels (highest loss,
    /// ties by position) contribute, which is online hard-pixel bootstrapping.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u8], keep_fraction: f64) -> Var {
        let (n, c, h, w) = self.value(logits).dims4();
        let plane = h * w;
        assert_eq!(targets.len(), n * plane, "target size mismatch");
        let ld = self.value(logits).data();
        let mut probs = vec![0.0; ld.len()];
        let mut losses = Vec::with_capacity(targets.len());
        for b in 0..n {
            for p in 0..plane {
                let idx = |ch: usize| (b * c + ch) * plane + p;
                let max = (0..c).map(|ch| ld[idx(ch)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for ch in 0..c {
                    let e = (ld[idx(ch)] - max).exp();
                    probs[idx(ch)] = e;
                    total += e;
                }
                for ch in 0..c {
                    probs[idx(ch)] /= total;
                }
                let t = targets[b * plane + p];
                if t != IGNORE_LABEL {
                    let t = t as usize;
                    assert!(t < c, "label {t} out of range for {c} classes");
                    let loss = -(ld[idx(t)] - max - total.ln());
                    losses.push((b * plane + p, loss));
                }
            }
        }
        let keep = if keep_fraction >= 1.0 {
            losses.len()
        } else {
            ((keep_fraction * losses.len() as f64).ceil() as usize).min(losses.len())
        };
        if keep < losses.len() {
            losses.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            losses.truncate(keep);
            losses.sort_by_key(|l| l.0);
        }
        let value = if losses.is_empty() {
            0.0
        } else {
            losses.iter().map(|l| l.1).sum::<f64>() / losses.len() as f64
        };
        let selected = losses.into_iter().map(|l| l.0).collect();
        let ng = self.ng(&[logits]);
        self.push(
            Tensor::scalar(value),
            Op::CrossEntropy {
                logits,
                probs,
                targets: targets.to_vec(),
                selected,
            },
            ng,
        )
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).numel(), 1, "backward from non-scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::full(self.shape(output), 1.0));
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate_data(&self, grads: &mut [Option<Tensor>], v: Var, data: Vec<f64>) {
        let shape = self.shape(v).to_vec();
        self.accumulate(grads, v, Tensor::new(&shape, data));
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddN(xs) => {
                for &x in xs {
                    self.accumulate(grads, x, g.clone());
                }
            }
            Op::AddConst(a) | Op::Reshape(a) => {
                self.accumulate_data(grads, *a, gd.to_vec());
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.map(|v| v * s)),
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let ga = gd.iter().zip(vb).map(|(g, b)| g * b).collect();
                let gb = gd.iter().zip(va).map(|(g, a)| g * a).collect();
                self.accumulate_data(grads, *a, ga);
                self.accumulate_data(grads, *b, gb);
            }
            Op::MulConst(a, c) => {
                let ga = gd.iter().zip(c.data()).map(|(g, c)| g * c).collect();
                self.accumulate_data(grads, *a, ga);
            }
            Op::SumAll(a) => {
                let shape = self.shape(*a).to_vec();
                self.accumulate(grads, *a, Tensor::full(&shape, gd[0]));
            }
            Op::Log(a) => {
                let va = self.value(*a).data();
                let ga = gd.iter().zip(va).map(|(g, x)| g / x).collect();
                self.accumulate_data(grads, *a, ga);
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].needs_grad {
                    self.accumulate(grads, *a, g.matmul(&vb.transpose()));
                }
                if self.nodes[b.0].needs_grad {
                    self.accumulate(grads, *b, va.transpose().matmul(g));
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::SoftmaxRows(a) => {
                let y = node.value.data();
                let cols = node.value.cols();
                let mut ga = vec![0.0; y.len()];
                for ((yr, gr), out) in y.chunks(cols).zip(gd.chunks(cols)).zip(ga.chunks_mut(cols)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for ((o, y), g) in out.iter_mut().zip(yr).zip(gr) {
                        *o = y * (g - dot);
                    }
                }
                self.accumulate_data(grads, *a, ga);
            }
            Op::Relu(a) => {
                let va = self.value(*a).data();
                let ga = gd
                    .iter()
                    .zip(va)
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate_data(grads, *a, ga);
            }
            Op::Conv2d { x, w, b, cfg } => {
                let geom = ConvGeom::new(self.shape(*x), self.shape(*w), *cfg);
                if self.ng(&[*x, *w]) {
                    let (gx, gw) = conv::conv2d_backward(
                        self.value(*x).data(),
                        self.value(*w).data(),
                        gd,
                        &geom,
                    );
                    self.accumulate_data(grads, *x, gx);
                    self.accumulate_data(grads, *w, gw);
                }
                if let Some(b) = b {
                    let gb = conv::bias_grad(gd, geom.cout, geom.ho * geom.wo);
                    self.accumulate_data(grads, *b, gb);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (n, c, h, w) = node.value.dims4();
                let plane = h * w;
                let m = (n * plane) as f64;
                let gv = gamma.map(|v| self.value(v).data());
                let mut ggamma = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * plane;
                        for i in base..base + plane {
                            ggamma[ch] += gd[i] * xhat[i];
                            gbeta[ch] += gd[i];
                        }
                    }
                }
                if self.nodes[x.0].needs_grad {
                    let mut gx = vec![0.0; gd.len()];
                    for ch in 0..c {
                        let scale = gv.map_or(1.0, |g| g[ch]);
                        let k = scale * inv_std[ch];
                        for b in 0..n {
                            let base = (b * c + ch) * plane;
                            for i in base..base + plane {
                                gx[i] = if *batch_stats {
                                    k / m * (m * gd[i] - gbeta[ch] - xhat[i] * ggamma[ch])
                                } else {
                                    k * gd[i]
                                };
                            }
                        }
                    }
                    self.accumulate_data(grads, *x, gx);
                }
                if let Some(gm) = gamma {
                    self.accumulate_data(grads, *gm, ggamma);
                }
                if let Some(bt) = beta {
                    self.accumulate_data(grads, *bt, gbeta);
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut gx = vec![0.0; self.value(*x).numel()];
                for (g, &src) in gd.iter().zip(argmax) {
                    gx[src] += g;
                }
                self.accumulate_data(grads, *x, gx);
            }
            Op::Subsample(x) => {
                let gx = spatial::subsample2_backward(self.value(*x), g);
                self.accumulate_data(grads, *x, gx);
            }
            Op::ShiftCrop(x) => {
                let gx = spatial::shift_crop_backward(g);
                self.accumulate_data(grads, *x, gx);
            }
            Op::GlobalAvgPool(x) => {
                let gx = spatial::global_avg_pool_backward(self.value(*x), g);
                self.accumulate_data(grads, *x, gx);
            }
            Op::Upsample(x) => {
                let gx = spatial::bilinear_backward(self.value(*x), g);
                self.accumulate_data(grads, *x, gx);
            }
            Op::Concat(xs) => {
                let shapes: Vec<&[usize]> = xs.iter().map(|&v| self.shape(v)).collect();
                let parts = spatial::concat_channels_backward(&shapes, g);
                for (&x, gx) in xs.iter().zip(parts) {
                    self.accumulate_data(grads, x, gx);
                }
            }
            Op::WeightedSum { terms, w } => {
                let wd = self.value(*w).data();
                let mut gw = vec![0.0; wd.len()];
                for &(x, idx) in terms {
                    let xv = self.value(x).data();
                    gw[idx] += gd.iter().zip(xv).map(|(g, x)| g * x).sum::<f64>();
                    if self.nodes[x.0].needs_grad {
                        let wv = wd[idx];
                        self.accumulate_data(grads, x, gd.iter().map(|g| g * wv).collect());
                    }
                }
                self.accumulate_data(grads, *w, gw);
            }
            Op::CrossEntropy {
                logits,
                probs,
                targets,
                selected,
            } => {
                let (_, c, h, w) = self.value(*logits).dims4();
                let plane = h * w;
                let mut gl = vec![0.0; probs.len()];
                if !selected.is_empty() {
                    let scale = gd[0] / selected.len() as f64;
                    for &pix in selected {
                        let (b, p) = (pix / plane, pix % plane);
                        for ch in 0..c {
                            let i = (b * c + ch) * plane + p;
                            let onehot = if targets[pix] as usize == ch { 1.0 } else { 0.0 };
                            gl[i] = scale * (probs[i] - onehot);
                        }
                    }
                }
                self.accumulate_data(grads, *logits, gl);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences of `f` around `x`.
    fn numeric_grad(x: &Tensor, f: &dyn Fn(&Tensor) -> f64) -> Vec<f64> {
        let h = 1e-5;
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

    fn check(shape: &[usize], build: &dyn Fn(&mut Graph, Var) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0 = Tensor::randn(shape, 1.0, &mut rng);
        let f = |x: &Tensor| {
            let mut g = Graph::new();
            let v = g.leaf(x.clone(), true);
            let out = build(&mut g, v);
            g.scalar(out)
        };
        let mut g = Graph::new();
        let v = g.leaf(x0.clone(), true);
        let out = build(&mut g, v);
        let grads = g.backward(out);
        let analytic = grads.get(v).expect("no gradient").data().to_vec();
        let numeric = numeric_grad(&x0, &f);
        for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
            assert!(
                (a - n).abs() <= 1e-6 + 1e-5 * n.abs().max(a.abs()),
                "entry {i}: analytic {a} numeric {n}"
            );
        }
    }

    /// Projects a tensor to a scalar with fixed pseudo-random weights so every
    /// output element influences the result.
    fn probe(g: &mut Graph, v: Var) -> Var {
        let shape = g.shape(v).to_vec();
        let n: usize = shape.iter().product();
        let w = Tensor::new(&shape, (0..n).map(|i| ((i * 7919 % 13) as f64 - 6.0) / 5.0).collect());
        let m = g.mul_const(v, &w);
        g.sum_all(m)
    }

    #[test]
    fn grad_conv_variants() {
        for cfg in [
            Conv2dCfg::new(1, 1, 1, 1),
            Conv2dCfg::new(2, 1, 1, 1),
            Conv2dCfg::new(1, 2, 2, 2),
            Conv2dCfg::new(2, 4, 4, 4),
        ] {
            let groups = cfg.groups;
            check(&[2, 4, 5, 5], &move |g, x| {
                let mut rng = ChaCha8Rng::seed_from_u64(3);
                let w = g.leaf(Tensor::randn(&[4, 4 / groups, 3, 3], 0.5, &mut rng), true);
                let b = g.leaf(Tensor::randn(&[4], 0.5, &mut rng), true);
                let y = g.conv2d(x, w, Some(b), cfg);
                probe(g, y)
            });
        }
    }

    #[test]
    fn grad_conv_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(&[2, 2, 4, 4], 1.0, &mut rng);
        check(&[2, 2, 3, 3], &move |g, w| {
            let xv = g.constant(x.clone());
            let y = g.conv2d(xv, w, None, Conv2dCfg::new(2, 2, 2, 1));
            probe(g, y)
        });
    }

    #[test]
    fn grad_batch_norm_both_modes() {
        check(&[3, 2, 3, 3], &|g, x| {
            let gm = g.leaf(Tensor::new(&[2], vec![1.5, -0.5]), true);
            let bt = g.leaf(Tensor::new(&[2], vec![0.1, 0.2]), true);
            let y = g.batch_norm_train(x, Some(gm), Some(bt)).out;
            probe(g, y)
        });
        check(&[2, 2, 3, 3], &|g, x| {
            let y = g.batch_norm_eval(x, None, None, &[0.1, -0.2], &[1.5, 0.7]);
            probe(g, y)
        });
    }

    #[test]
    fn grad_spatial_ops() {
        check(&[2, 2, 5, 5], &|g, x| {
            let y = g.max_pool3(x, 2);
            probe(g, y)
        });
        check(&[1, 2, 4, 4], &|g, x| {
            let y = g.max_pool3(x, 1);
            probe(g, y)
        });
        check(&[1, 2, 5, 4], &|g, x| {
            let y = g.subsample2(x);
            probe(g, y)
        });
        check(&[1, 2, 4, 4], &|g, x| {
            let y = g.shift_crop(x);
            probe(g, y)
        });
        check(&[2, 3, 3, 2], &|g, x| {
            let y = g.global_avg_pool(x);
            probe(g, y)
        });
        check(&[1, 2, 3, 2], &|g, x| {
            let y = g.upsample_bilinear(x, 7, 5);
            probe(g, y)
        });
        check(&[1, 2, 1, 1], &|g, x| {
            let y = g.upsample_bilinear(x, 3, 3);
            probe(g, y)
        });
    }

    #[test]
    fn grad_matrix_ops() {
        check(&[3, 4], &|g, x| {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let w = g.leaf(Tensor::randn(&[4, 2], 1.0, &mut rng), true);
            let y = g.matmul(x, w);
            let t = g.transpose(y);
            let s = g.softmax_rows(t);
            let r = g.reshape(s, &[1, 6]);
            let l = g.scale(r, 3.0);
            let e = g.add_const(l, &Tensor::full(&[1, 6], 2.0));
            let lg = g.log(e);
            probe(g, lg)
        });
        check(&[2, 3], &|g, x| {
            let sq = g.mul(x, x);
            let r = g.relu(x);
            let s = g.add_n(&[sq, r, x]);
            probe(g, s)
        });
    }

    #[test]
    fn grad_weighted_sum_and_concat() {
        check(&[1, 2, 2, 2], &|g, x| {
            let w = g.leaf(Tensor::new(&[1, 3], vec![0.2, 0.5, 0.3]), true);
            let r = g.relu(x);
            let y = g.weighted_sum(&[(x, 0), (r, 2)], w);
            let c = g.concat_channels(&[y, x, r]);
            probe(g, c)
        });
        check(&[1, 3], &|g, w| {
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let a = g.leaf(Tensor::randn(&[1, 1, 2, 2], 1.0, &mut rng), false);
            let b = g.leaf(Tensor::randn(&[1, 1, 2, 2], 1.0, &mut rng), false);
            let y = g.weighted_sum(&[(a, 0), (b, 1), (a, 2)], w);
            probe(g, y)
        });
    }

    #[test]
    fn grad_cross_entropy_with_bootstrapping() {
        let targets = vec![0, 2, IGNORE_LABEL, 1, 1, 0, 2, 2];
        for keep in [1.0, 0.5, 0.25] {
            let t = targets.clone();
            check(&[2, 3, 2, 2], &move |g, x| g.cross_entropy(x, &t, keep));
        }
    }

    #[test]
    fn cross_entropy_uniform_logits_is_log_classes() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 4, 2, 2]));
        let l = g.cross_entropy(x, &[0, 1, 2, 3], 1.0);
        assert!((g.scalar(l) - 4f64.ln()).abs() < 1e-12);
        let all_ignored = g.cross_entropy(x, &[IGNORE_LABEL; 4], 1.0);
        assert_eq!(g.scalar(all_ignored), 0.0);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(2.0));
        let b = g.leaf(Tensor::scalar(3.0), true);
        let c = g.mul(a, b);
        let grads = g.backward(c);
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap().data(), &[2.0]);
    }
}
