//! The one-shot supernet and derived (discrete) networks.
//!
//! Both share one module structure and parameter naming; a derived network
//! instantiates only the operations its genotype selects, so its parameters
//! are a subset of the supernet's and can be copied from it by name.
//!
//! Cell `k` reads `i1` = output of cell `k-1` and `i2` = output of cell `k-2`
//! (the stem output stands in for missing predecessors).

pub mod ops;

use crate::arch_space::{candidate_ops, validate_genotype, Genotype, NetworkLayout, OpKind};
use crate::autograd::Conv2dCfg;
use crate::autograd::{Graph, Var};
use crate::error::{invalid, Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub use ops::{BnMode, BnStats};
use ops::{Builder, Fwd, OpModule, Preprocess, ReluCache, Unit};

#[derive(Clone, Debug, PartialEq)]
struct EdgeModule {
    /// `(op, module)` for every instantiated non-zero operation.
    ops: Vec<(OpKind, OpModule)>,
}

#[derive(Clone, Debug, PartialEq)]
struct CellModule {
    pre1: Preprocess,
    pre2: Preprocess,
    edges: Vec<EdgeModule>,
}

#[derive(Clone, Debug, PartialEq)]
struct HeadModule {
    branches: Vec<Unit>,
    pool: Unit,
    classifier: Unit,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    layout: NetworkLayout,
    genotype: Option<Genotype>,
    params: ParamStore,
    buffers: ParamStore,
    stem: Vec<Unit>,
    cells: Vec<CellModule>,
    head: HeadModule,
}

/// Logits and batch statistics of one forward pass.
pub struct ForwardOut {
    pub logits: Var,
    pub stats: BnStats,
}

impl Network {
    /// Every candidate operation on every edge.
    pub fn supernet(layout: &NetworkLayout, seed: u64) -> Result<Self> {
        Self::build(layout, None, seed, "supernet")
    }

    /// Only the operations selected by `genotype`.
    pub fn derived(layout: &NetworkLayout, genotype: &Genotype, seed: u64) -> Result<Self> {
        let violations = validate_genotype(genotype, layout);
        if !violations.is_empty() {
            return Err(Error::InvalidGenotype(
                violations.iter().map(ToString::to_string).collect(),
            ));
        }
        Self::build(layout, Some(genotype), seed, "derived")
    }

    fn build(layout: &NetworkLayout, genotype: Option<&Genotype>, seed: u64, stream: &str) -> Result<Self> {
        let mut b = Builder::new(seed, stream);
        let [c1, c2, c0] = layout.stem.channels;
        let [s1, s2, s3] = layout.stem.strides;
        let stem = vec![
            b.conv_bn("stem.0", 3, c1, 3, Conv2dCfg::new(s1, 1, 1, 1), false, true),
            b.conv_bn("stem.1", c1, c2, 3, Conv2dCfg::new(s2, 1, 1, 1), false, true),
            b.conv_bn("stem.2", c2, c0, 3, Conv2dCfg::new(s3, 1, 1, 1), false, false),
        ];
        let stem_stride = layout.stem_stride();
        // (channels, stride) of the two most recent outputs
        let mut prev = (c0, stem_stride);
        let mut prev_prev = (c0, stem_stride);
        let mut cells = Vec::with_capacity(layout.num_cells());
        for (k, cl) in layout.cells.iter().enumerate() {
            let c = cl.channels;
            let reduce_from = |src: (usize, usize)| -> Result<bool> {
                match src.1 {
                    s if s == cl.input_stride => Ok(false),
                    s if s * 2 == cl.input_stride => Ok(true),
                    s => Err(invalid(format!(
                        "cell {k}: cannot adapt stride {s} input to stride {}",
                        cl.input_stride
                    ))),
                }
            };
            let pre1 = b.preprocess(&format!("cell{k}.pre1"), prev.0, c, reduce_from(prev)?);
            let pre2 = b.preprocess(&format!("cell{k}.pre2"), prev_prev.0, c, reduce_from(prev_prev)?);
            let mut edges = Vec::with_capacity(cl.spec.num_edges());
            for e in 0..cl.spec.num_edges() {
                let stride = cl.spec.edge_stride(e);
                let chosen: Vec<OpKind> = match genotype {
                    Some(g) => vec![g.op(k, e)],
                    None => candidate_ops().to_vec(),
                };
                let ops = chosen
                    .into_iter()
                    .filter_map(|op| {
                        b.op(&format!("cell{k}.edge{e}"), op, c, stride)
                            .map(|m| (op, m))
                    })
                    .collect();
                edges.push(EdgeModule { ops });
            }
            cells.push(CellModule { pre1, pre2, edges });
            let out_stride = if cl.spec.is_reduction {
                cl.input_stride * 2
            } else {
                cl.input_stride
            };
            prev_prev = prev;
            prev = (cl.out_channels, out_stride);
        }
        let h = &layout.head;
        let branches = h
            .rates
            .iter()
            .enumerate()
            .map(|(i, &r)| {
                let (k, cfg) = if r == 1 {
                    (1, Conv2dCfg::default())
                } else {
                    (3, Conv2dCfg::new(1, r, r, 1))
                };
                b.conv_bn(&format!("head.aspp{i}"), h.in_channels, h.branch_channels, k, cfg, false, true)
            })
            .collect();
        let pool = b.conv_bias("head.pool", h.in_channels, h.branch_channels, true);
        let concat = h.branch_channels * (h.rates.len() + 1);
        let classifier = b.conv_bias("head.classifier", concat, h.num_classes, false);
        Ok(Self {
            layout: layout.clone(),
            genotype: genotype.cloned(),
            params: b.params,
            buffers: b.buffers,
            stem,
            cells,
            head: HeadModule {
                branches,
                pool,
                classifier,
            },
        })
    }

    pub fn layout(&self) -> &NetworkLayout {
        &self.layout
    }

    pub fn genotype(&self) -> Option<&Genotype> {
        self.genotype.as_ref()
    }

    pub fn is_supernet(&self) -> bool {
        self.genotype.is_none()
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn buffers(&self) -> &ParamStore {
        &self.buffers
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Copies same-named, same-shaped parameters and running statistics.
    pub fn load_shared(&mut self, other: &Network) -> usize {
        self.params.load_matching(&other.params) + self.buffers.load_matching(&other.buffers)
    }

    pub fn apply_stats(&mut self, stats: &BnStats) {
        stats.apply(&mut self.buffers);
    }

    /// Parameters and running statistics under `param.` / `buffer.` prefixes.
    pub fn state(&self) -> ParamStore {
        let mut s = ParamStore::new();
        for (n, t) in self.params.iter() {
            s.push(format!("param.{n}"), t.clone());
        }
        for (n, t) in self.buffers.iter() {
            s.push(format!("buffer.{n}"), t.clone());
        }
        s
    }

    /// Restores every tensor of [`Network::state`]; all must be present.
    pub fn load_state(&mut self, s: &ParamStore) -> Result<()> {
        for (prefix, store) in [("param", &mut self.params), ("buffer", &mut self.buffers)] {
            for i in 0..store.len() {
                let name = format!("{prefix}.{}", store.name(i));
                let t = s
                    .by_name(&name)
                    .ok_or_else(|| invalid(format!("checkpoint lacks {name}")))?;
                if t.shape() != store.get(i).shape() {
                    return Err(Error::Shape(format!(
                        "checkpoint {name} has shape {:?}, network expects {:?}",
                        t.shape(),
                        store.get(i).shape()
                    )));
                }
                *store.get_mut(i) = t.clone();
            }
        }
        Ok(())
    }

    fn check_input(&self, shape: &[usize]) -> Result<(usize, usize)> {
        if shape.len() != 4 || shape[1] != 3 || shape[0] == 0 {
            return Err(Error::Shape(format!("expected N x 3 x H x W images, got {shape:?}")));
        }
        let s = self.layout.total_stride();
        let (h, w) = (shape[2], shape[3]);
        if h == 0 || w == 0 || h % s != 0 || w % s != 0 {
            return Err(invalid(format!(
                "input {h}x{w} is not divisible by the total stride {s}"
            )));
        }
        Ok((h, w))
    }

    /// Per-pixel logits `N x classes x H x W`. Supernets need one `p x q`
    /// relaxation per cell in `zs`; derived networks take `None`.
    pub fn forward(
        &self,
        g: &mut Graph,
        vars: &[Var],
        images: Var,
        zs: Option<&[Var]>,
        mode: BnMode,
    ) -> Result<ForwardOut> {
        let (h, w) = self.check_input(g.shape(images))?;
        if vars.len() != self.params.len() {
            return Err(invalid("parameter variables do not match the network"));
        }
        match (self.is_supernet(), zs) {
            (true, Some(zs)) => {
                if zs.len() != self.cells.len() {
                    return Err(invalid(format!(
                        "{} relaxations for {} cells",
                        zs.len(),
                        self.cells.len()
                    )));
                }
                let p = self.layout.edges_per_cell();
                for &z in zs {
                    if g.shape(z) != [p, crate::arch_space::NUM_OPS] {
                        return Err(Error::Shape(format!(
                            "relaxation shape {:?}, expected [{p}, {}]",
                            g.shape(z),
                            crate::arch_space::NUM_OPS
                        )));
                    }
                }
            }
            (true, None) => return Err(invalid("a supernet forward needs relaxations")),
            (false, Some(_)) => return Err(invalid("a derived network takes no relaxations")),
            (false, None) => {}
        }
        let mut f = Fwd::new(g, vars, &self.buffers, mode);
        let mut x = images;
        for u in &self.stem {
            x = f.unit(u, x, None);
        }
        let mut prev = x;
        let mut prev_prev = x;
        for (k, cell) in self.cells.iter().enumerate() {
            let z = zs.map(|zs| zs[k]);
            let out = self.cell_forward(&mut f, k, cell, prev, prev_prev, z);
            prev_prev = prev;
            prev = out;
        }
        let logits = self.head_forward(&mut f, prev, h, w);
        Ok(ForwardOut {
            logits,
            stats: f.stats,
        })
    }

    fn cell_forward(
        &self,
        f: &mut Fwd<'_>,
        k: usize,
        cell: &CellModule,
        in1: Var,
        in2: Var,
        z: Option<Var>,
    ) -> Var {
        let spec = &self.layout.cells[k].spec;
        let q = crate::arch_space::NUM_OPS;
        let mut nodes = vec![f.preprocess(&cell.pre1, in1), f.preprocess(&cell.pre2, in2)];
        let mut relu = ReluCache::default();
        for node in spec.num_inputs..spec.num_inputs + spec.num_intermediate {
            let mut terms = Vec::new();
            for e in spec.incoming(node) {
                let x = nodes[spec.edges[e].source];
                for (op, module) in &cell.edges[e].ops {
                    let rx = matches!(module, OpModule::Units(_)).then(|| relu.get(f.g, x));
                    let y = f.op(module, x, rx);
                    terms.push((y, e * q + op.index()));
                }
            }
            let out = match z {
                Some(z) => f.g.weighted_sum(&terms, z),
                None => {
                    let ys: Vec<Var> = terms.iter().map(|t| t.0).collect();
                    f.g.add_n(&ys)
                }
            };
            nodes.push(out);
        }
        f.g.concat_channels(&nodes[spec.num_inputs..])
    }

    fn head_forward(&self, f: &mut Fwd<'_>, x: Var, h: usize, w: usize) -> Var {
        let (_, _, fh, fw) = f.g.value(x).dims4();
        let mut parts: Vec<Var> = self
            .head
            .branches
            .iter()
            .map(|u| f.unit(u, x, None))
            .collect();
        let pooled = f.g.global_avg_pool(x);
        let pooled = f.unit(&self.head.pool, pooled, None);
        parts.push(f.g.upsample_bilinear(pooled, fh, fw));
        let cat = f.g.concat_channels(&parts);
        let logits = f.unit(&self.head.classifier, cat, None);
        if (fh, fw) == (h, w) {
            logits
        } else {
            f.g.upsample_bilinear(logits, h, w)
        }
    }

    /// Logits for a batch with constant weights.
    pub fn predict(&self, images: &Tensor, zs: Option<&[Tensor]>, mode: BnMode) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.params.leaves(&mut g, false);
        let x = g.constant(images.clone());
        let zv: Option<Vec<Var>> = zs.map(|zs| zs.iter().map(|z| g.constant(z.clone())).collect());
        let out = self.forward(&mut g, &vars, x, zv.as_deref(), mode)?;
        Ok(g.value(out.logits).clone())
    }
}

/// Per-pixel argmax over classes of `N x C x H x W` logits.
pub fn argmax_classes(logits: &Tensor) -> Vec<u8> {
    let (n, c, h, w) = logits.dims4();
    let plane = h * w;
    let d = logits.data();
    let mut out = Vec::with_capacity(n * plane);
    for b in 0..n {
        for i in 0..plane {
            let mut best = 0;
            let mut bv = f64::NEG_INFINITY;
            for ch in 0..c {
                let v = d[(b * c + ch) * plane + i];
                if v > bv {
                    bv = v;
                    best = ch;
                }
            }
            out.push(best as u8);
        }
    }
    out
}
