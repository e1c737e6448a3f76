//! Graph-guided update of architecture logits between adjacent cells.
//!
//! For each adjacent pair `(k-1, k)` a reasoning graph is built over the edges
//! of the two cells, the previous cell's logits are embedded, propagated by one
//! residual graph convolution and mapped back, and the result is fused into
//! cell `k`:
//!
//! ```text
//! Adj   = softmax_rows((α_k w1)(α_prev w2)^T)
//! H     = α_prev Φ1
//! G     = Adj H W_g + H
//! α'_k  = α_k + γ G Φ2
//! ```
//!
//! The operation-identity graph flattens both cells to `p*q` scalar nodes with
//! `Adj = softmax_rows(flat(α_k) flat(α_prev)^T)`, embeds each node `1 -> d`
//! and maps back `d -> 1`. The fully-connected mixer replaces the graph by a
//! dense map of `flat(α_prev)` to a `p x q` correction under the same fusion.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{invalid, Error, Result};
use crate::params::ParamStore;
use crate::relaxation::ArchParams;
use crate::seeds;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReasoningGraphKind {
    EdgeSimilarity,
    OperationIdentity,
}

impl fmt::Display for ReasoningGraphKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::EdgeSimilarity => "edge_similarity",
            Self::OperationIdentity => "operation_identity",
        })
    }
}

/// How cells exchange information.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixerMode {
    Ggm,
    Fc,
    /// Independent cells: `α' = α`.
    Off,
}

impl fmt::Display for MixerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Ggm => "ggm",
            Self::Fc => "fc",
            Self::Off => "off",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sharing {
    PerPair,
    Shared,
}

/// Whether cell `k` receives the updated `α'_{k-1}` or the raw `α_{k-1}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Propagation {
    Chained,
    Raw,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixerInit {
    Random,
    Zero,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GgmConfig {
    pub mode: MixerMode,
    pub d: usize,
    pub gamma: f64,
    pub kind: ReasoningGraphKind,
    pub sharing: Sharing,
    pub propagation: Propagation,
    pub init: MixerInit,
    /// Frozen mixer weights receive no optimizer updates.
    pub freeze: bool,
}

impl Default for GgmConfig {
    fn default() -> Self {
        Self {
            mode: MixerMode::Ggm,
            d: 64,
            gamma: 0.5,
            kind: ReasoningGraphKind::EdgeSimilarity,
            sharing: Sharing::PerPair,
            propagation: Propagation::Chained,
            init: MixerInit::Random,
            freeze: false,
        }
    }
}

impl GgmConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.d == 0 {
            v.push("ggm.d must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            v.push(format!("ggm.gamma must lie in [0, 1], got {}", self.gamma));
        }
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum PairSlots {
    Edge {
        w1: usize,
        w2: usize,
        wg: usize,
        phi1: usize,
        phi2: usize,
    },
    Op {
        embed: usize,
        wg: usize,
        unembed: usize,
    },
    Fc {
        w: usize,
        b: usize,
    },
}

/// Learned mixer weights for every adjacent pair of a `K`-cell network.
#[derive(Clone, Debug, PartialEq)]
pub struct GgmParams {
    pub config: GgmConfig,
    num_cells: usize,
    p: usize,
    q: usize,
    store: ParamStore,
    pairs: Vec<PairSlots>,
}

impl GgmParams {
    pub fn new(config: GgmConfig, num_cells: usize, p: usize, q: usize, seed: u64) -> Result<Self> {
        let problems = config.violations();
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        if num_cells == 0 || p == 0 || q == 0 {
            return Err(invalid("ggm needs at least one cell, edge and op"));
        }
        let n_pairs = match (config.mode, config.sharing) {
            (MixerMode::Off, _) => 0,
            (_, Sharing::PerPair) => num_cells - 1,
            (_, Sharing::Shared) => (num_cells - 1).min(1),
        };
        let mut rng = seeds::stream(seed, "ggm");
        let mut store = ParamStore::new();
        let zero = config.init == MixerInit::Zero;
        let mut weight = |store: &mut ParamStore, name: String, rows: usize, cols: usize| {
            let t = if zero {
                Tensor::zeros(&[rows, cols])
            } else {
                Tensor::randn(&[rows, cols], 1.0 / (rows as f64).sqrt(), &mut rng)
            };
            store.push(name, t)
        };
        let d = config.d;
        let mut pairs = Vec::with_capacity(n_pairs);
        for i in 0..n_pairs {
            let prefix = match config.sharing {
                Sharing::PerPair => format!("{}.pair{}", config.mode, i + 1),
                Sharing::Shared => format!("{}.shared", config.mode),
            };
            let slots = match (config.mode, config.kind) {
                (MixerMode::Fc, _) => PairSlots::Fc {
                    w: weight(&mut store, format!("{prefix}.w"), p * q, p * q),
                    b: store.push(format!("{prefix}.b"), Tensor::zeros(&[1, p * q])),
                },
                (_, ReasoningGraphKind::EdgeSimilarity) => PairSlots::Edge {
                    w1: weight(&mut store, format!("{prefix}.w1"), q, q),
                    w2: weight(&mut store, format!("{prefix}.w2"), q, q),
                    wg: weight(&mut store, format!("{prefix}.wg"), d, d),
                    phi1: weight(&mut store, format!("{prefix}.phi1"), q, d),
                    phi2: weight(&mut store, format!("{prefix}.phi2"), d, q),
                },
                (_, ReasoningGraphKind::OperationIdentity) => PairSlots::Op {
                    embed: weight(&mut store, format!("{prefix}.embed"), 1, d),
                    wg: weight(&mut store, format!("{prefix}.wg"), d, d),
                    unembed: weight(&mut store, format!("{prefix}.unembed"), d, 1),
                },
            };
            pairs.push(slots);
        }
        Ok(Self {
            config,
            num_cells,
            p,
            q,
            store,
            pairs,
        })
    }

    pub fn num_cells(&self) -> usize {
        self.num_cells
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Whether the optimizer should update these weights.
    pub fn trainable(&self) -> bool {
        !self.config.freeze && !self.store.is_empty()
    }

    fn slots(&self, k: usize) -> PairSlots {
        match self.config.sharing {
            Sharing::PerPair => self.pairs[k - 1],
            Sharing::Shared => self.pairs[0],
        }
    }

    /// Named weight of pair `(k-1, k)`, for inspection and tests.
    pub fn pair_weight(&self, k: usize, name: &str) -> Option<&Tensor> {
        let prefix = match self.config.sharing {
            Sharing::PerPair => format!("{}.pair{k}", self.config.mode),
            Sharing::Shared => format!("{}.shared", self.config.mode),
        };
        self.store.by_name(&format!("{prefix}.{name}"))
    }

    pub fn pair_weight_mut(&mut self, k: usize, name: &str) -> Option<&mut Tensor> {
        let prefix = match self.config.sharing {
            Sharing::PerPair => format!("{}.pair{k}", self.config.mode),
            Sharing::Shared => format!("{}.shared", self.config.mode),
        };
        let i = self.store.index_of(&format!("{prefix}.{name}"))?;
        Some(self.store.get_mut(i))
    }
}

/// `softmax_rows((α_k w1)(α_prev w2)^T)` on the tape.
pub fn adjacency_var(g: &mut Graph, alpha_k: Var, alpha_prev: Var, w1: Var, w2: Var) -> Var {
    let a = g.matmul(alpha_k, w1);
    let b = g.matmul(alpha_prev, w2);
    let bt = g.transpose(b);
    let sim = g.matmul(a, bt);
    g.softmax_rows(sim)
}

/// `Adj H W_g + H` on the tape.
pub fn gcn_var(g: &mut Graph, h: Var, adj: Var, wg: Var) -> Var {
    let ah = g.matmul(adj, h);
    let ahw = g.matmul(ah, wg);
    g.add(ahw, h)
}

fn correction_var(
    g: &mut Graph,
    alpha_k: Var,
    alpha_prev: Var,
    slots: PairSlots,
    vars: &[Var],
    p: usize,
    q: usize,
) -> Var {
    match slots {
        PairSlots::Edge {
            w1,
            w2,
            wg,
            phi1,
            phi2,
        } => {
            let adj = adjacency_var(g, alpha_k, alpha_prev, vars[w1], vars[w2]);
            let h = g.matmul(alpha_prev, vars[phi1]);
            let prop = gcn_var(g, h, adj, vars[wg]);
            g.matmul(prop, vars[phi2])
        }
        PairSlots::Op { embed, wg, unembed } => {
            let a = g.reshape(alpha_k, &[p * q, 1]);
            let b = g.reshape(alpha_prev, &[p * q, 1]);
            let bt = g.transpose(b);
            let sim = g.matmul(a, bt);
            let adj = g.softmax_rows(sim);
            let h = g.matmul(b, vars[embed]);
            let prop = gcn_var(g, h, adj, vars[wg]);
            let out = g.matmul(prop, vars[unembed]);
            g.reshape(out, &[p, q])
        }
        PairSlots::Fc { w, b } => {
            let flat = g.reshape(alpha_prev, &[1, p * q]);
            let y = g.matmul(flat, vars[w]);
            let y = g.add(y, vars[b]);
            g.reshape(y, &[p, q])
        }
    }
}

/// `α'_k` on the tape; `k >= 1` is the index of the receiving cell and
/// `vars` are the leaves of `params.store()`.
pub fn update_var(
    g: &mut Graph,
    alpha_k: Var,
    alpha_prev: Var,
    params: &GgmParams,
    vars: &[Var],
    k: usize,
) -> Var {
    if params.config.mode == MixerMode::Off {
        return alpha_k;
    }
    let c = correction_var(
        g,
        alpha_k,
        alpha_prev,
        params.slots(k),
        vars,
        params.p,
        params.q,
    );
    let c = g.scale(c, params.config.gamma);
    g.add(alpha_k, c)
}

/// `α'_0 = α_0`, then `α'_k` from `α_k` and its predecessor for every `k >= 1`.
pub fn mix_chain(g: &mut Graph, alphas: &[Var], params: &GgmParams, vars: &[Var]) -> Result<Vec<Var>> {
    if alphas.len() != params.num_cells {
        return Err(invalid(format!(
            "mixer built for {} cells, got {}",
            params.num_cells,
            alphas.len()
        )));
    }
    if vars.len() != params.store.len() {
        return Err(invalid("mixer variables do not match its parameter store"));
    }
    for &a in alphas {
        if g.shape(a) != [params.p, params.q] {
            return Err(Error::Shape(format!(
                "architecture block {:?}, mixer expects [{}, {}]",
                g.shape(a),
                params.p,
                params.q
            )));
        }
    }
    let mut out: Vec<Var> = Vec::with_capacity(alphas.len());
    for (k, &a) in alphas.iter().enumerate() {
        if k == 0 {
            out.push(a);
            continue;
        }
        let prev = match params.config.propagation {
            Propagation::Chained => out[k - 1],
            Propagation::Raw => alphas[k - 1],
        };
        out.push(update_var(g, a, prev, params, vars, k));
    }
    Ok(out)
}

fn check_matrix(name: &str, t: &Tensor, rows: usize, cols: usize) -> Result<()> {
    if t.shape() != [rows, cols] {
        return Err(Error::Shape(format!(
            "{name} has shape {:?}, expected [{rows}, {cols}]",
            t.shape()
        )));
    }
    Ok(())
}

/// Row-stochastic `p x p` adjacency between the edges of two cells.
pub fn compute_adjacency(alpha_k: &Tensor, alpha_prev: &Tensor, w1: &Tensor, w2: &Tensor) -> Result<Tensor> {
    if alpha_k.shape().len() != 2 {
        return Err(Error::Shape("alpha_k must be a matrix".into()));
    }
    let (p, q) = (alpha_k.rows(), alpha_k.cols());
    check_matrix("alpha_prev", alpha_prev, p, q)?;
    check_matrix("w1", w1, q, q)?;
    check_matrix("w2", w2, q, q)?;
    let mut g = Graph::new();
    let vs = [alpha_k, alpha_prev, w1, w2].map(|t| g.constant(t.clone()));
    let adj = adjacency_var(&mut g, vs[0], vs[1], vs[2], vs[3]);
    Ok(g.value(adj).clone())
}

/// One residual graph convolution `Adj H W_g + H`.
pub fn gcn_propagate(h: &Tensor, adj: &Tensor, wg: &Tensor) -> Result<Tensor> {
    if h.shape().len() != 2 {
        return Err(Error::Shape("H must be a matrix".into()));
    }
    let (n, d) = (h.rows(), h.cols());
    check_matrix("Adj", adj, n, n)?;
    check_matrix("W_g", wg, d, d)?;
    let mut g = Graph::new();
    let vs = [h, adj, wg].map(|t| g.constant(t.clone()));
    let out = gcn_var(&mut g, vs[0], vs[1], vs[2]);
    Ok(g.value(out).clone())
}

/// `α'_k` for receiving cell `k >= 1` given the predecessor's logits.
pub fn ggm_update(alpha_k: &Tensor, alpha_prev: &Tensor, params: &GgmParams, k: usize) -> Result<Tensor> {
    check_matrix("alpha_k", alpha_k, params.p, params.q)?;
    check_matrix("alpha_prev", alpha_prev, params.p, params.q)?;
    if k == 0 || k >= params.num_cells {
        return Err(invalid(format!(
            "receiving cell {k} outside 1..{}",
            params.num_cells
        )));
    }
    let mut g = Graph::new();
    let vars = params.store.leaves(&mut g, false);
    let a = g.constant(alpha_k.clone());
    let b = g.constant(alpha_prev.clone());
    let out = update_var(&mut g, a, b, params, &vars, k);
    Ok(g.value(out).clone())
}

/// Updated logits of every cell.
pub fn propagate_chain(arch: &ArchParams, params: &GgmParams) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let vars = params.store.leaves(&mut g, false);
    let alphas: Vec<Var> = arch.cells().iter().map(|a| g.constant(a.clone())).collect();
    let out = mix_chain(&mut g, &alphas, params, &vars)?;
    Ok(out.into_iter().map(|v| g.value(v).clone()).collect())
}
