use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{DeriveFrom, SearchConfig};
use super::derive::derive_genotype;
use crate::arch_space::{build_network_layout, Genotype, NetworkLayout, NUM_OPS};
use crate::autograd::{Graph, Var};
use crate::bench::{sample_batch, SegmentationSource, Split};
use crate::error::{invalid, Error, Result};
use crate::ggm::{mix_chain, propagate_chain, GgmParams};
use crate::latency::{
    genotype_latency, latency_loss_var, network_expected_latency, network_latency_var, LatencyTable,
};
use crate::optim::{cosine_lr, Adam, Sgd};
use crate::params::ParamStore;
use crate::relaxation::{
    gumbel_noise, gumbel_softmax, mean_entropy, op_probabilities, temperature, ArchParams,
};
use crate::seeds;
use crate::supernet::{BnMode, Network};
use crate::tensor::Tensor;

/// Diagnostics of one search step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub ce: f64,
    /// Expected latency (µs) under the step's relaxed sample.
    pub latency: f64,
    /// `β ln(latency)`.
    pub latency_loss: f64,
    pub temperature: f64,
    /// Mean per-edge entropy (nats) of `softmax(α')`.
    pub entropy: f64,
    pub weight_lr: f64,
}

/// All mutable state of a search run.
pub struct SearchState {
    pub config: SearchConfig,
    pub layout: NetworkLayout,
    slices: Vec<Tensor>,
    arch: ParamStore,
    pub mixer: GgmParams,
    pub supernet: Network,
    arch_opt: Adam,
    mixer_opt: Adam,
    weight_opt: Sgd,
    pub step: usize,
    pub trajectory: Vec<StepMetrics>,
}

impl SearchState {
    pub fn new(config: &SearchConfig, lut: &LatencyTable) -> Result<Self> {
        config.validate()?;
        let layout = build_network_layout(&config.layout)?;
        let slices = lut.slices(&layout)?;
        let (k, p) = (layout.num_cells(), layout.edges_per_cell());
        let alpha = crate::relaxation::init_arch_params(
            k,
            p,
            NUM_OPS,
            config.arch_init_scale,
            seeds::derive_seed(config.seed, "arch"),
        )?;
        let mut arch = ParamStore::new();
        for (i, a) in alpha.into_cells().into_iter().enumerate() {
            arch.push(format!("cell{i}"), a);
        }
        let mixer = GgmParams::new(config.ggm.clone(), k, p, NUM_OPS, config.seed)?;
        let supernet = Network::supernet(&layout, config.seed)?;
        let w = &config.weight_optimizer;
        Ok(Self {
            arch_opt: Adam::new(config.arch_optimizer.clone(), &arch),
            mixer_opt: Adam::new(config.arch_optimizer.clone(), mixer.store()),
            weight_opt: Sgd::new(w.momentum, w.weight_decay, supernet.params()),
            config: config.clone(),
            layout,
            slices,
            arch,
            mixer,
            supernet,
            step: 0,
            trajectory: Vec::new(),
        })
    }

    /// Raw per-cell logits `α`.
    pub fn arch(&self) -> ArchParams {
        ArchParams::from_cells(self.arch.tensors().to_vec()).expect("non-empty by construction")
    }

    /// Mixer-updated logits `α'`.
    pub fn arch_updated(&self) -> Result<ArchParams> {
        ArchParams::from_cells(propagate_chain(&self.arch(), &self.mixer)?)
    }

    pub fn latency_slices(&self) -> &[Tensor] {
        &self.slices
    }

    /// Expected latency under `softmax(α')`, without noise.
    pub fn expected_latency(&self) -> Result<f64> {
        let probs: Vec<Tensor> = self.arch_updated()?.cells().iter().map(op_probabilities).collect();
        network_expected_latency(&probs, &self.slices)
    }

    pub fn derive(&self) -> Result<Genotype> {
        let logits = match self.config.derive_from {
            DeriveFrom::Updated => self.arch_updated()?,
            DeriveFrom::Raw => self.arch(),
        };
        Ok(derive_genotype(&logits, &self.layout))
    }

    /// Every tensor needed to resume, including optimizer moments.
    pub fn checkpoint(&self) -> ParamStore {
        let mut s = ParamStore::new();
        s.push("meta.step", Tensor::scalar(self.step as f64));
        for (n, t) in self.arch.iter() {
            s.push(format!("alpha.{n}"), t.clone());
        }
        for (n, t) in self.mixer.store().iter() {
            s.push(format!("mixer.{n}"), t.clone());
        }
        for (n, t) in self.supernet.state().iter() {
            s.push(format!("net.{n}"), t.clone());
        }
        for part in [
            self.arch_opt.state("opt.arch"),
            self.mixer_opt.state("opt.mixer"),
            self.weight_opt.state("opt.weight"),
        ] {
            for (n, t) in part.iter() {
                s.push(n.to_string(), t.clone());
            }
        }
        s
    }

    pub fn restore(&mut self, s: &ParamStore) -> Result<()> {
        let sub = |prefix: &str| {
            let mut out = ParamStore::new();
            for (n, t) in s.iter() {
                if let Some(rest) = n.strip_prefix(prefix) {
                    out.push(rest.to_string(), t.clone());
                }
            }
            out
        };
        let step = s
            .by_name("meta.step")
            .ok_or_else(|| invalid("checkpoint lacks meta.step"))?
            .data()[0] as usize;
        let alpha = sub("alpha.");
        let mixer = sub("mixer.");
        for (store, src, what) in [
            (&mut self.arch, &alpha, "alpha"),
            (self.mixer.store_mut(), &mixer, "mixer"),
        ] {
            if src.len() != store.len() || store.load_matching(src) != store.len() {
                return Err(invalid(format!("checkpoint {what} tensors do not match the config")));
            }
        }
        self.supernet.load_state(&sub("net."))?;
        self.arch_opt.load_state("opt.arch", s)?;
        self.mixer_opt.load_state("opt.mixer", s)?;
        self.weight_opt.load_state("opt.weight", s)?;
        self.step = step;
        Ok(())
    }
}

/// Runs one joint update of weights, `α` and mixer weights.
pub fn search_step(state: &mut SearchState, data: &dyn SegmentationSource) -> Result<StepMetrics> {
    let cfg = &state.config;
    let step = state.step;
    if step >= cfg.steps {
        return Err(invalid(format!("search already ran its {} steps", cfg.steps)));
    }
    let lambda = temperature(step, &cfg.temperature_schedule())?;
    let mut batch_rng = seeds::stream(cfg.seed, &format!("batch/{step}"));
    let batch = sample_batch(data.split(Split::SearchTrain), cfg.batch_size, cfg.augment, &mut batch_rng)?;
    let val_batch = if cfg.held_out_ce {
        Some(sample_batch(data.split(Split::SearchVal), cfg.batch_size, false, &mut batch_rng)?)
    } else {
        None
    };

    let mut g = Graph::new();
    let wv = state.supernet.params().leaves(&mut g, true);
    let av = state.arch.leaves(&mut g, true);
    let mv = state.mixer.store().leaves(&mut g, state.mixer.trainable());
    let updated = mix_chain(&mut g, &av, &state.mixer, &mv)?;
    let mut noise_rng = seeds::stream(cfg.seed, &format!("gumbel/{step}"));
    let p = state.layout.edges_per_cell();
    let zs = updated
        .iter()
        .map(|&a| {
            let noise = gumbel_noise(p, NUM_OPS, &mut noise_rng);
            gumbel_softmax(&mut g, a, &noise, lambda)
        })
        .collect::<Result<Vec<Var>>>()?;

    let x = g.constant(batch.images.clone());
    let out = state.supernet.forward(&mut g, &wv, x, Some(&zs), BnMode::Train)?;
    let ce_w = g.cross_entropy(out.logits, &batch.targets, 1.0);
    let ce_a = match &val_batch {
        Some(vb) => {
            let xv = g.constant(vb.images.clone());
            let ov = state.supernet.forward(&mut g, &wv, xv, Some(&zs), BnMode::Train)?;
            g.cross_entropy(ov.logits, &vb.targets, 1.0)
        }
        None => ce_w,
    };
    let lat = network_latency_var(&mut g, &zs, &state.slices);
    let lat_loss = latency_loss_var(&mut g, lat, cfg.beta);
    let loss = g.add(ce_a, lat_loss);

    let scalar = |g: &Graph, v: Var| g.value(v).data()[0];
    let entropy = mean_entropy(&updated.iter().map(|&a| g.value(a).clone()).collect::<Vec<_>>());
    let weight_lr = cosine_lr(
        step,
        cfg.steps,
        cfg.weight_optimizer.lr_max,
        cfg.weight_optimizer.lr_min,
    );
    let metrics = StepMetrics {
        step,
        loss: scalar(&g, loss),
        ce: scalar(&g, ce_a),
        latency: scalar(&g, lat),
        latency_loss: scalar(&g, lat_loss),
        temperature: lambda,
        entropy,
        weight_lr,
    };
    if !metrics.loss.is_finite() || !scalar(&g, ce_w).is_finite() {
        let arch = state.arch();
        let worst = arch
            .cells()
            .iter()
            .flat_map(|t| t.data().iter().map(|v| v.abs()))
            .fold(0.0, f64::max);
        return Err(Error::NonFinite {
            step,
            detail: format!(
                "loss {} (ce {}, latency {}, λ {lambda}); max |α| {worst}; α finite: {}",
                metrics.loss,
                metrics.ce,
                metrics.latency,
                arch.is_finite()
            ),
        });
    }

    let (wgrads, agrads, mgrads) = if val_batch.is_some() {
        let mut gw = g.backward(ce_w);
        let wgrads = ParamStore::collect_grads(&wv, &mut gw);
        let mut ga = g.backward(loss);
        (
            wgrads,
            ParamStore::collect_grads(&av, &mut ga),
            ParamStore::collect_grads(&mv, &mut ga),
        )
    } else {
        let mut grads = g.backward(loss);
        (
            ParamStore::collect_grads(&wv, &mut grads),
            ParamStore::collect_grads(&av, &mut grads),
            ParamStore::collect_grads(&mv, &mut grads),
        )
    };
    state.weight_opt.step(state.supernet.params_mut(), &wgrads, weight_lr);
    state.arch_opt.step(&mut state.arch, &agrads);
    if state.mixer.trainable() {
        state.mixer_opt.step(state.mixer.store_mut(), &mgrads);
    }
    state.supernet.apply_stats(&out.stats);
    state.step += 1;
    state.trajectory.push(metrics.clone());
    Ok(metrics)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub config: SearchConfig,
    /// Final raw `α`, one `p x q` block per cell.
    pub arch: Vec<Vec<Vec<f64>>>,
    /// Final mixer-updated `α'`.
    pub arch_updated: Vec<Vec<Vec<f64>>>,
    pub genotype: Genotype,
    pub trajectory: Vec<StepMetrics>,
    /// Expected latency (µs) under `softmax(α')`, without noise.
    pub final_expected_latency: f64,
    /// LUT latency (µs) of the derived genotype.
    pub genotype_latency: f64,
    /// Absent from [`SearchResult::deterministic_json`].
    #[serde(default)]
    pub wall_clock_secs: f64,
    #[serde(skip)]
    pub mixer: ParamStore,
}

fn nested(a: &ArchParams) -> Vec<Vec<Vec<f64>>> {
    a.cells()
        .iter()
        .map(|t| (0..t.rows()).map(|r| t.row(r).to_vec()).collect())
        .collect()
}

impl SearchResult {
    pub fn from_state(state: &SearchState, wall_clock_secs: f64) -> Result<Self> {
        let genotype = state.derive()?;
        Ok(Self {
            config: state.config.clone(),
            arch: nested(&state.arch()),
            arch_updated: nested(&state.arch_updated()?),
            genotype_latency: genotype_latency(&genotype, &state.slices)?,
            genotype,
            trajectory: state.trajectory.clone(),
            final_expected_latency: state.expected_latency()?,
            wall_clock_secs,
            mixer: state.mixer.store().clone(),
        })
    }

    /// JSON of everything except wall-clock time; identical for identical
    /// `(config, seed)`.
    pub fn deterministic_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("result serialization is infallible");
        if let Some(o) = v.as_object_mut() {
            o.remove("wall_clock_secs");
        }
        serde_json::to_string_pretty(&v).expect("result serialization is infallible")
    }
}

/// Where and whether a run persists its state.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub checkpoint_dir: Option<PathBuf>,
    /// Continue from the checkpoint in `checkpoint_dir` when one exists.
    pub resume: bool,
}

const CHECKPOINT_FILE: &str = "checkpoint.bin";
const TRAJECTORY_FILE: &str = "trajectory.json";
const CONFIG_FILE: &str = "config.json";

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_checkpoint(state: &SearchState, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_atomic(&dir.join(CONFIG_FILE), serde_json::to_string_pretty(&state.config)?.as_bytes())?;
    write_atomic(
        &dir.join(TRAJECTORY_FILE),
        serde_json::to_string_pretty(&state.trajectory)?.as_bytes(),
    )?;
    write_atomic(&dir.join(CHECKPOINT_FILE), &state.checkpoint().encode())
}

/// Restores a checkpoint written for the same config.
pub fn load_checkpoint(state: &mut SearchState, dir: &Path) -> Result<()> {
    let saved: SearchConfig = serde_json::from_str(&std::fs::read_to_string(dir.join(CONFIG_FILE))?)?;
    if saved != state.config {
        return Err(invalid(format!(
            "checkpoint in {} was written for a different config",
            dir.display()
        )));
    }
    let store = ParamStore::load(&dir.join(CHECKPOINT_FILE))?;
    let trajectory: Vec<StepMetrics> =
        serde_json::from_str(&std::fs::read_to_string(dir.join(TRAJECTORY_FILE))?)?;
    state.restore(&store)?;
    if trajectory.len() != state.step {
        return Err(invalid("checkpoint trajectory length differs from its step"));
    }
    state.trajectory = trajectory;
    Ok(())
}

pub fn run_search(config: &SearchConfig, data: &dyn SegmentationSource, lut: &LatencyTable) -> Result<SearchResult> {
    run_search_with(config, data, lut, &RunOptions::default(), &mut |_| {})
}

/// Runs all remaining steps; `progress` sees every step's metrics.
pub fn run_search_with(
    config: &SearchConfig,
    data: &dyn SegmentationSource,
    lut: &LatencyTable,
    options: &RunOptions,
    progress: &mut dyn FnMut(&StepMetrics),
) -> Result<SearchResult> {
    if data.split(Split::SearchTrain).is_empty() {
        return Err(invalid("search-train split is empty"));
    }
    if data.num_classes() != config.layout.num_classes {
        return Err(invalid(format!(
            "dataset has {} classes, layout predicts {}",
            data.num_classes(),
            config.layout.num_classes
        )));
    }
    let start = Instant::now();
    let mut state = SearchState::new(config, lut)?;
    if let (true, Some(dir)) = (options.resume, &options.checkpoint_dir) {
        if dir.join(CHECKPOINT_FILE).exists() {
            load_checkpoint(&mut state, dir)?;
        }
    }
    while state.step < config.steps {
        if let Err(e) = search_step(&mut state, data) {
            if let (Error::NonFinite { .. }, Some(dir)) = (&e, &options.checkpoint_dir) {
                std::fs::create_dir_all(dir)?;
                write_atomic(&dir.join("nonfinite_dump.bin"), &state.checkpoint().encode())?;
            }
            return Err(e);
        }
        progress(state.trajectory.last().expect("step just pushed"));
        if let Some(dir) = &options.checkpoint_dir {
            let periodic = config.checkpoint_every > 0 && state.step % config.checkpoint_every == 0;
            if periodic || state.step == config.steps {
                save_checkpoint(&state, dir)?;
            }
        }
    }
    SearchResult::from_state(&state, start.elapsed().as_secs_f64())
}
