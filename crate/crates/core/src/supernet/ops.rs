//! Building blocks of the network: conv/BN units, candidate operations and
//! their forward passes on the tape.
//!
//! Parameterized candidates are pre-activation: `ReLU -> conv(s) -> BN`.
//! `sep_conv_3x3` stacks two depthwise+pointwise units (stride on the first);
//! dilated separable convolutions use one unit with the dilation in the
//! depthwise stage. Strided `skip_connect` keeps every second pixel.

use std::collections::HashMap;
use std::time::Instant;

use rand_chacha::ChaCha8Rng;

use crate::arch_space::OpKind;
use crate::autograd::Conv2dCfg;
use crate::autograd::{Graph, Var};
use crate::error::{invalid, Result};
use crate::latency::OpContext;
use crate::params::ParamStore;
use crate::seeds;
use crate::tensor::Tensor;

/// Momentum of the running batch-norm statistics.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics and record them.
    Train,
    /// Normalize with running statistics.
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Bn {
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvSlot {
    weight: usize,
    bias: Option<usize>,
    cfg: Conv2dCfg,
}

/// Optional ReLU, a chain of convolutions, optional BN, optional ReLU.
#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct Unit {
    pre_relu: bool,
    convs: Vec<ConvSlot>,
    bn: Option<Bn>,
    post_relu: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) enum OpModule {
    MaxPool { stride: usize },
    Skip { stride: usize },
    Units(Vec<Unit>),
}

/// Two stride-2 1x1 convolutions, the second on the input shifted by one
/// pixel, concatenated and normalized.
#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct FactorizedReduce {
    a: ConvSlot,
    b: ConvSlot,
    bn: Bn,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) enum Preprocess {
    Unit(Unit),
    Reduce(FactorizedReduce),
}

pub(crate) struct Builder {
    pub params: ParamStore,
    pub buffers: ParamStore,
    rng: ChaCha8Rng,
}

impl Builder {
    pub fn new(seed: u64, stream: &str) -> Self {
        Self {
            params: ParamStore::new(),
            buffers: ParamStore::new(),
            rng: seeds::stream(seed, stream),
        }
    }

    /// He-normal weights `[cout, cin/groups, k, k]`.
    pub fn conv(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        cfg: Conv2dCfg,
        bias: bool,
    ) -> ConvSlot {
        let fan_in = cin / cfg.groups * k * k;
        let w = Tensor::randn(
            &[cout, cin / cfg.groups, k, k],
            (2.0 / fan_in as f64).sqrt(),
            &mut self.rng,
        );
        let weight = self.params.push(format!("{name}.weight"), w);
        let bias = bias.then(|| self.params.push(format!("{name}.bias"), Tensor::zeros(&[cout])));
        ConvSlot { weight, bias, cfg }
    }

    pub fn bn(&mut self, name: &str, c: usize) -> Bn {
        Bn {
            gamma: self.params.push(format!("{name}.gamma"), Tensor::full(&[c], 1.0)),
            beta: self.params.push(format!("{name}.beta"), Tensor::zeros(&[c])),
            mean: self.buffers.push(format!("{name}.running_mean"), Tensor::zeros(&[c])),
            var: self.buffers.push(format!("{name}.running_var"), Tensor::full(&[c], 1.0)),
        }
    }

    /// `[ReLU] -> kxk conv -> BN -> [ReLU]`.
    pub fn conv_bn(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        cfg: Conv2dCfg,
        pre_relu: bool,
        post_relu: bool,
    ) -> Unit {
        let conv = self.conv(&format!("{name}.conv"), cin, cout, k, cfg, false);
        let bn = self.bn(&format!("{name}.bn"), cout);
        Unit {
            pre_relu,
            convs: vec![conv],
            bn: Some(bn),
            post_relu,
        }
    }

    /// Convolution with bias and no normalization.
    pub fn conv_bias(&mut self, name: &str, cin: usize, cout: usize, post_relu: bool) -> Unit {
        let conv = self.conv(name, cin, cout, 1, Conv2dCfg::default(), true);
        Unit {
            pre_relu: false,
            convs: vec![conv],
            bn: None,
            post_relu,
        }
    }

    fn separable(&mut self, name: &str, c: usize, stride: usize, dilation: usize) -> Unit {
        let dw = self.conv(
            &format!("{name}.dw"),
            c,
            c,
            3,
            Conv2dCfg::new(stride, dilation, dilation, c),
            false,
        );
        let pw = self.conv(&format!("{name}.pw"), c, c, 1, Conv2dCfg::default(), false);
        let bn = self.bn(&format!("{name}.bn"), c);
        Unit {
            pre_relu: true,
            convs: vec![dw, pw],
            bn: Some(bn),
            post_relu: false,
        }
    }

    /// Candidate `op` mapping `c` channels to `c` channels at `stride`;
    /// `None` for `zero`.
    pub fn op(&mut self, name: &str, op: OpKind, c: usize, stride: usize) -> Option<OpModule> {
        let name = format!("{name}.{}", op.name());
        Some(match op {
            OpKind::Zero => return None,
            OpKind::MaxPool3x3 => OpModule::MaxPool { stride },
            OpKind::SkipConnect => OpModule::Skip { stride },
            OpKind::Conv3x3 => OpModule::Units(vec![self.conv_bn(
                &name,
                c,
                c,
                3,
                Conv2dCfg::new(stride, 1, 1, 1),
                true,
                false,
            )]),
            OpKind::SepConv3x3 => OpModule::Units(vec![
                self.separable(&format!("{name}.0"), c, stride, 1),
                self.separable(&format!("{name}.1"), c, 1, 1),
            ]),
            OpKind::DilSepConv3x3R2 | OpKind::DilSepConv3x3R4 | OpKind::DilSepConv3x3R8 => {
                OpModule::Units(vec![self.separable(&name, c, stride, op.dilation())])
            }
        })
    }

    pub fn preprocess(&mut self, name: &str, cin: usize, cout: usize, reduce: bool) -> Preprocess {
        if reduce {
            let cfg = Conv2dCfg::new(2, 0, 1, 1);
            let half = cout / 2;
            Preprocess::Reduce(FactorizedReduce {
                a: self.conv(&format!("{name}.conv_a"), cin, half, 1, cfg, false),
                b: self.conv(&format!("{name}.conv_b"), cin, cout - half, 1, cfg, false),
                bn: self.bn(&format!("{name}.bn"), cout),
            })
        } else {
            Preprocess::Unit(self.conv_bn(name, cin, cout, 1, Conv2dCfg::default(), true, false))
        }
    }
}

/// Batch statistics observed by one forward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BnStats {
    entries: Vec<(usize, usize, Vec<f64>, Vec<f64>, usize)>,
}

impl BnStats {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `running = (1 - m) running + m batch`, with the unbiased batch variance.
    pub fn apply(&self, buffers: &mut ParamStore) {
        for (mi, vi, mean, var, count) in &self.entries {
            let unbias = if *count > 1 {
                *count as f64 / (*count - 1) as f64
            } else {
                1.0
            };
            let rm = buffers.get_mut(*mi).data_mut();
            for (r, b) in rm.iter_mut().zip(mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
            let rv = buffers.get_mut(*vi).data_mut();
            for (r, b) in rv.iter_mut().zip(var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b * unbias;
            }
        }
    }
}

/// Forward state: the tape, parameter leaves and batch-norm bookkeeping.
pub(crate) struct Fwd<'a> {
    pub g: &'a mut Graph,
    pub vars: &'a [Var],
    pub buffers: &'a ParamStore,
    pub mode: BnMode,
    pub stats: BnStats,
}

impl<'a> Fwd<'a> {
    pub fn new(g: &'a mut Graph, vars: &'a [Var], buffers: &'a ParamStore, mode: BnMode) -> Self {
        Self {
            g,
            vars,
            buffers,
            mode,
            stats: BnStats::default(),
        }
    }

    fn conv(&mut self, c: &ConvSlot, x: Var) -> Var {
        let b = c.bias.map(|i| self.vars[i]);
        self.g.conv2d(x, self.vars[c.weight], b, c.cfg)
    }

    fn bn(&mut self, bn: &Bn, x: Var) -> Var {
        let (gamma, beta) = (Some(self.vars[bn.gamma]), Some(self.vars[bn.beta]));
        match self.mode {
            BnMode::Train => {
                let (n, _, h, w) = self.g.value(x).dims4();
                let out = self.g.batch_norm_train(x, gamma, beta);
                self.stats
                    .entries
                    .push((bn.mean, bn.var, out.mean, out.var, n * h * w));
                out.out
            }
            BnMode::Eval => {
                let mean = self.buffers.get(bn.mean).data();
                let var = self.buffers.get(bn.var).data();
                self.g.batch_norm_eval(x, gamma, beta, mean, var)
            }
        }
    }

    /// `relu_x` is the rectified input when the caller already has it.
    pub fn unit(&mut self, u: &Unit, x: Var, relu_x: Option<Var>) -> Var {
        let mut h = if u.pre_relu {
            relu_x.unwrap_or_else(|| self.g.relu(x))
        } else {
            x
        };
        for c in &u.convs {
            h = self.conv(c, h);
        }
        if let Some(bn) = &u.bn {
            h = self.bn(bn, h);
        }
        if u.post_relu {
            h = self.g.relu(h);
        }
        h
    }

    pub fn op(&mut self, op: &OpModule, x: Var, relu_x: Option<Var>) -> Var {
        match op {
            OpModule::MaxPool { stride } => self.g.max_pool3(x, *stride),
            OpModule::Skip { stride: 1 } => x,
            OpModule::Skip { .. } => self.g.subsample2(x),
            OpModule::Units(units) => {
                let mut h = self.unit(&units[0], x, relu_x);
                for u in &units[1..] {
                    h = self.unit(u, h, None);
                }
                h
            }
        }
    }

    pub fn preprocess(&mut self, p: &Preprocess, x: Var) -> Var {
        match p {
            Preprocess::Unit(u) => self.unit(u, x, None),
            Preprocess::Reduce(fr) => {
                let r = self.g.relu(x);
                let a = self.conv(&fr.a, r);
                let shifted = self.g.shift_crop(r);
                let b = self.conv(&fr.b, shifted);
                let cat = self.g.concat_channels(&[a, b]);
                self.bn(&fr.bn, cat)
            }
        }
    }
}

/// Rectified copies of feature maps, computed once per tape node.
#[derive(Default)]
pub(crate) struct ReluCache {
    map: HashMap<usize, Var>,
}

impl ReluCache {
    pub fn get(&mut self, g: &mut Graph, x: Var) -> Var {
        *self.map.entry(x.index()).or_insert_with(|| g.relu(x))
    }
}

/// Median wall-clock microseconds of a single-image forward of `op` at `ctx`.
pub fn profile_op(op: OpKind, ctx: &OpContext, trials: usize) -> Result<f64> {
    if trials == 0 {
        return Err(invalid("profiling needs trials >= 1"));
    }
    let mut b = Builder::new(0, "profile");
    let module = b.op("probe", op, ctx.channels, ctx.stride);
    let mut rng = seeds::stream(0, "profile-input");
    let input = Tensor::randn(&[1, ctx.channels, ctx.h, ctx.w], 1.0, &mut rng);
    let run = |b: &Builder| {
        let mut g = Graph::new();
        let vars = b.params.leaves(&mut g, false);
        let x = g.constant(input.clone());
        let start = Instant::now();
        if let Some(m) = &module {
            let mut f = Fwd::new(&mut g, &vars, &b.buffers, BnMode::Eval);
            let y = f.op(m, x, None);
            std::hint::black_box(f.g.value(y).data()[0]);
        }
        start.elapsed().as_secs_f64() * 1e6
    };
    for _ in 0..2 {
        run(&b);
    }
    let mut times: Vec<f64> = (0..trials).map(|_| run(&b)).collect();
    times.sort_by(f64::total_cmp);
    Ok(times[times.len() / 2])
}
