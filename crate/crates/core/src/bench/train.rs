use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::data::{augment, collate, normalize_pixel, Sample, SegmentationSource, Split};
use super::metrics::{fps_from_ms, Confusion, EvalReport};
use crate::arch_space::{Genotype, NetworkLayout};
use crate::autograd::Graph;
use crate::error::{invalid, Error, Result};
use crate::latency::profiling_device;
use crate::optim::{poly_lr, Sgd};
use crate::params::ParamStore;
use crate::seeds;
use crate::supernet::{argmax_classes, BnMode, Network};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub poly_power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Fraction of hardest pixels kept by the bootstrapped cross-entropy.
    pub keep_fraction: f64,
    pub augment: bool,
    pub fps_trials: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            lr: 0.01,
            poly_power: 0.9,
            momentum: 0.9,
            weight_decay: 5e-4,
            keep_fraction: 0.25,
            augment: true,
            fps_trials: 10,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn violations(&self, prefix: &str) -> Vec<String> {
        let mut v = Vec::new();
        if self.batch_size == 0 {
            v.push(format!("{prefix}batch_size must be >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            v.push(format!("{prefix}lr must be > 0, got {}", self.lr));
        }
        if !(self.poly_power > 0.0) {
            v.push(format!("{prefix}poly_power must be > 0, got {}", self.poly_power));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            v.push(format!("{prefix}momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            v.push(format!("{prefix}weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            v.push(format!(
                "{prefix}keep_fraction must lie in (0, 1], got {}",
                self.keep_fraction
            ));
        }
        if self.fps_trials < 10 {
            v.push(format!("{prefix}fps_trials must be >= 10, got {}", self.fps_trials));
        }
        v
    }
}

pub struct FinetuneResult {
    pub network: Network,
    pub report: EvalReport,
    /// Mean bootstrapped loss of every optimizer step.
    pub losses: Vec<f64>,
}

/// Trains a derived network from scratch on the finetune split and
/// evaluates it on the test split.
pub fn finetune(
    genotype: &Genotype,
    layout: &NetworkLayout,
    data: &dyn SegmentationSource,
    config: &FinetuneConfig,
) -> Result<FinetuneResult> {
    let problems = config.violations("finetune.");
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    if data.num_classes() != layout.head.num_classes {
        return Err(invalid(format!(
            "dataset has {} classes, network predicts {}",
            data.num_classes(),
            layout.head.num_classes
        )));
    }
    let pool = data.split(Split::Finetune);
    if pool.is_empty() && config.epochs > 0 {
        return Err(invalid("finetune split is empty"));
    }
    let mut net = Network::derived(layout, genotype, seeds::derive_seed(config.seed, "derived"))?;
    let mut sgd = Sgd::new(config.momentum, config.weight_decay, net.params());
    let steps_per_epoch = pool.len().div_ceil(config.batch_size);
    let total = steps_per_epoch * config.epochs;
    let mut losses = Vec::with_capacity(total);
    let mut step = 0;
    for epoch in 0..config.epochs {
        let mut rng = seeds::stream(config.seed, &format!("finetune/epoch/{epoch}"));
        let mut order: Vec<usize> = (0..pool.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let samples: Vec<Sample> = chunk
                .iter()
                .map(|&i| {
                    if config.augment {
                        augment(&pool[i], &mut rng)
                    } else {
                        pool[i].clone()
                    }
                })
                .collect();
            let batch = collate(&samples)?;
            let lr = poly_lr(step, total, config.lr, config.poly_power);
            let loss = train_step(&mut net, &mut sgd, &batch.images, &batch.targets, config.keep_fraction, lr)?;
            if !loss.is_finite() {
                let tail = &losses[losses.len().saturating_sub(10)..];
                return Err(Error::NonFinite {
                    step,
                    detail: format!("finetune loss {loss}; preceding losses {tail:?}"),
                });
            }
            losses.push(loss);
            step += 1;
        }
    }
    let confusion = evaluate(&net, data.split(Split::Test), data.num_classes(), config.batch_size)?;
    let size = data.image_size();
    let (latency_ms, _) = measure_fps(&net, size, config.fps_trials)?;
    let report = EvalReport::new(confusion, latency_ms, size)?;
    Ok(FinetuneResult {
        network: net,
        report,
        losses,
    })
}

fn train_step(
    net: &mut Network,
    sgd: &mut Sgd,
    images: &Tensor,
    targets: &[u8],
    keep_fraction: f64,
    lr: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let vars = net.params().leaves(&mut g, true);
    let x = g.constant(images.clone());
    let out = net.forward(&mut g, &vars, x, None, BnMode::Train)?;
    let loss = g.cross_entropy(out.logits, targets, keep_fraction);
    let value = g.value(loss).data()[0];
    if !value.is_finite() {
        return Ok(value);
    }
    let mut grads = g.backward(loss);
    let grads = ParamStore::collect_grads(&vars, &mut grads);
    sgd.step(net.params_mut(), &grads, lr);
    net.apply_stats(&out.stats);
    Ok(value)
}

/// Confusion matrix of `net` (running BN statistics) over `samples`.
pub fn evaluate(net: &Network, samples: &[Sample], num_classes: usize, batch_size: usize) -> Result<Confusion> {
    let mut confusion = Confusion::new(num_classes);
    for chunk in samples.chunks(batch_size.max(1)) {
        let batch = collate(chunk)?;
        let zs = uniform_relaxation(net);
        let logits = net.predict(&batch.images, zs.as_deref(), BnMode::Eval)?;
        confusion.accumulate(&batch.targets, &argmax_classes(&logits))?;
    }
    Ok(confusion)
}

// A supernet is evaluated as the uniform mixture; derived networks take none.
fn uniform_relaxation(net: &Network) -> Option<Vec<Tensor>> {
    net.is_supernet().then(|| {
        let p = net.layout().edges_per_cell();
        let q = crate::arch_space::NUM_OPS;
        vec![Tensor::full(&[p, q], 1.0 / q as f64); net.layout().num_cells()]
    })
}

/// Median single-image forward time in milliseconds and the matching FPS.
/// Only the forward pass is timed; graph setup and input creation are not.
pub fn measure_fps(net: &Network, input_size: [usize; 2], trials: usize) -> Result<(f64, f64)> {
    if trials < 10 {
        return Err(invalid(format!("measure_fps needs trials >= 10, got {trials}")));
    }
    profiling_device()?;
    let [h, w] = input_size;
    let mut rng = seeds::stream(0, "fps-input");
    let input = Tensor::randn(&[1, 3, h, w], 1.0, &mut rng).map(normalize_pixel);
    let zs = uniform_relaxation(net);
    let run = || -> Result<f64> {
        let mut g = Graph::new();
        let vars = net.params().leaves(&mut g, false);
        let x = g.constant(input.clone());
        let zv: Option<Vec<_>> = zs
            .as_ref()
            .map(|zs| zs.iter().map(|z| g.constant(z.clone())).collect());
        let start = Instant::now();
        let out = net.forward(&mut g, &vars, x, zv.as_deref(), BnMode::Eval)?;
        std::hint::black_box(g.value(out.logits).data()[0]);
        Ok(start.elapsed().as_secs_f64() * 1e3)
    };
    for _ in 0..2 {
        run()?;
    }
    let mut times = (0..trials).map(|_| run()).collect::<Result<Vec<f64>>>()?;
    times.sort_by(f64::total_cmp);
    let ms = times[times.len() / 2];
    Ok((ms, fps_from_ms(ms)))
}
