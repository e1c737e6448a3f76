//! Operation latency lookup table and the expected-latency objective.
//!
//! Latencies are in microseconds. The expected latency of a cell is
//! `sum_e sum_m z[e][m] * lat[e][m]`; the network latency sums cells in order
//! and excludes stem and head. Summation order is fixed (edges then cells, left
//! to right) so that a one-hot relaxation reproduces the genotype's table sum
//! exactly.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::arch_space::{candidate_ops, Genotype, NetworkLayout, OpKind, NUM_OPS};
use crate::autograd::{Graph, Var};
use crate::error::{invalid, Error, Result};
use crate::supernet::ops::profile_op;
use crate::tensor::Tensor;

pub const LUT_VERSION: u32 = 1;

/// Synthetic cost of an operation that performs no arithmetic (`skip_connect`,
/// `zero`), in microseconds.
pub const SYNTHETIC_FLOOR_USEC: f64 = 1.0;

/// Multiply-accumulates per microsecond in the synthetic cost model.
pub const SYNTHETIC_MACS_PER_USEC: f64 = 1000.0;

/// Environment variable selecting the profiling device.
pub const DEVICE_ENV: &str = "GAS_DEVICE";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LutMode {
    Profiled,
    Synthetic,
}

impl fmt::Display for LutMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Profiled => "profiled",
            Self::Synthetic => "synthetic",
        })
    }
}

/// Where and at what shape an edge operation executes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OpContext {
    pub cell: usize,
    pub edge: usize,
    pub h: usize,
    pub w: usize,
    pub channels: usize,
    pub stride: usize,
}

impl OpContext {
    pub fn out_size(&self) -> [usize; 2] {
        [self.h.div_ceil(self.stride), self.w.div_ceil(self.stride)]
    }
}

/// Every edge context of `layout` at its configured input size, cell-major.
pub fn op_contexts(layout: &NetworkLayout) -> Vec<OpContext> {
    let mut out = Vec::new();
    for (k, cell) in layout.cells.iter().enumerate() {
        for e in 0..cell.spec.num_edges() {
            let [h, w] = layout.edge_input_size(k, e, layout.input_size);
            out.push(OpContext {
                cell: k,
                edge: e,
                h,
                w,
                channels: cell.channels,
                stride: cell.spec.edge_stride(e),
            });
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyEntry {
    pub op: OpKind,
    pub cell: usize,
    pub edge: usize,
    pub h: usize,
    pub w: usize,
    pub channels: usize,
    pub stride: usize,
    pub usec: f64,
}

impl LatencyEntry {
    fn new(op: OpKind, ctx: OpContext, usec: f64) -> Self {
        Self {
            op,
            cell: ctx.cell,
            edge: ctx.edge,
            h: ctx.h,
            w: ctx.w,
            channels: ctx.channels,
            stride: ctx.stride,
            usec,
        }
    }

    pub fn context(&self) -> OpContext {
        OpContext {
            cell: self.cell,
            edge: self.edge,
            h: self.h,
            w: self.w,
            channels: self.channels,
            stride: self.stride,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LutFile {
    version: u32,
    hardware: String,
    mode: LutMode,
    entries: Vec<LatencyEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatencyTable {
    pub hardware: String,
    pub mode: LutMode,
    entries: Vec<LatencyEntry>,
    index: HashMap<(OpContext, OpKind), usize>,
}

impl LatencyTable {
    pub fn from_entries(hardware: String, mode: LutMode, entries: Vec<LatencyEntry>) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if !(e.usec > 0.0) || !e.usec.is_finite() {
                return Err(invalid(format!(
                    "latency of {} at cell {} edge {} must be positive and finite, got {}",
                    e.op, e.cell, e.edge, e.usec
                )));
            }
            if e.h == 0 || e.w == 0 || e.channels == 0 || !(1..=2).contains(&e.stride) {
                return Err(invalid(format!(
                    "invalid context for cell {} edge {}",
                    e.cell, e.edge
                )));
            }
            if index.insert((e.context(), e.op), i).is_some() {
                return Err(invalid(format!(
                    "duplicate entry for {} at cell {} edge {}",
                    e.op, e.cell, e.edge
                )));
            }
        }
        Ok(Self {
            hardware,
            mode,
            entries,
            index,
        })
    }

    pub fn entries(&self) -> &[LatencyEntry] {
        &self.entries
    }

    pub fn get(&self, op: OpKind, ctx: &OpContext) -> Option<f64> {
        self.index.get(&(*ctx, op)).map(|&i| self.entries[i].usec)
    }

    /// `p x q` latencies of cell `cell`, in edge and operation order.
    pub fn cell_slice(&self, layout: &NetworkLayout, cell: usize) -> Result<Tensor> {
        let ctxs: Vec<OpContext> = op_contexts(layout).into_iter().filter(|c| c.cell == cell).collect();
        if ctxs.is_empty() {
            return Err(invalid(format!("layout has no cell {cell}")));
        }
        let mut data = Vec::with_capacity(ctxs.len() * NUM_OPS);
        for ctx in &ctxs {
            for op in candidate_ops() {
                data.push(self.get(op, ctx).ok_or_else(|| missing(op, ctx))?);
            }
        }
        Ok(Tensor::new(&[ctxs.len(), NUM_OPS], data))
    }

    /// One slice per cell; fails on the first missing entry.
    pub fn slices(&self, layout: &NetworkLayout) -> Result<Vec<Tensor>> {
        (0..layout.num_cells()).map(|k| self.cell_slice(layout, k)).collect()
    }

    /// Every (op, context) pair of `layout` that the table lacks.
    pub fn missing_entries(&self, layout: &NetworkLayout) -> Vec<String> {
        let mut out = Vec::new();
        for ctx in op_contexts(layout) {
            for op in candidate_ops() {
                if self.get(op, &ctx).is_none() {
                    out.push(missing(op, &ctx).to_string());
                }
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        let file = LutFile {
            version: LUT_VERSION,
            hardware: self.hardware.clone(),
            mode: self.mode,
            entries: self.entries.clone(),
        };
        serde_json::to_string_pretty(&file).expect("table serialization is infallible")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: LutFile =
            serde_json::from_str(text).map_err(|e| Error::Parse(format!("latency table: {e}")))?;
        if file.version != LUT_VERSION {
            return Err(Error::Version {
                expected: LUT_VERSION,
                found: file.version,
            });
        }
        Self::from_entries(file.hardware, file.mode, file.entries)
    }
}

fn missing(op: OpKind, ctx: &OpContext) -> Error {
    Error::MissingLatency(format!(
        "{op} at cell {} edge {} ({}x{}, C={}, stride {})",
        ctx.cell, ctx.edge, ctx.h, ctx.w, ctx.channels, ctx.stride
    ))
}

/// Multiply-accumulate count of one forward pass of `op` at `ctx`.
pub fn op_macs(op: OpKind, ctx: &OpContext) -> f64 {
    let [ho, wo] = ctx.out_size();
    let area = (ho * wo) as f64;
    let c = ctx.channels as f64;
    let separable = (9.0 * c + c * c) * area;
    match op {
        OpKind::Zero | OpKind::SkipConnect => 0.0,
        OpKind::MaxPool3x3 => 9.0 * c * area,
        OpKind::Conv3x3 => 9.0 * c * c * area,
        OpKind::SepConv3x3 => 2.0 * separable,
        OpKind::DilSepConv3x3R2 | OpKind::DilSepConv3x3R4 | OpKind::DilSepConv3x3R8 => separable,
    }
}

/// Per-operation multiplier of the synthetic model. Pooling comparisons are
/// cheaper than MACs; dilated access patterns cost slightly more with rate.
pub fn synthetic_factor(op: OpKind) -> f64 {
    match op {
        OpKind::MaxPool3x3 => 0.25,
        OpKind::DilSepConv3x3R2 => 1.05,
        OpKind::DilSepConv3x3R4 => 1.10,
        OpKind::DilSepConv3x3R8 => 1.15,
        _ => 1.0,
    }
}

/// `floor + factor(op) * MACs / throughput`.
pub fn synthetic_latency(op: OpKind, ctx: &OpContext) -> f64 {
    SYNTHETIC_FLOOR_USEC + synthetic_factor(op) * op_macs(op, ctx) / SYNTHETIC_MACS_PER_USEC
}

/// Profiling target named by [`DEVICE_ENV`], `cpu` when unset.
pub fn profiling_device() -> Result<String> {
    let name = std::env::var(DEVICE_ENV).unwrap_or_else(|_| "cpu".into());
    check_device(&name)?;
    Ok(name)
}

/// Only the host CPU has a profiling backend.
pub fn check_device(name: &str) -> Result<()> {
    if name == "cpu" {
        Ok(())
    } else {
        Err(Error::BackendUnavailable(format!(
            "no profiling backend for device {name:?} (only \"cpu\")"
        )))
    }
}

fn host_descriptor() -> String {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!(
        "{}-{} cpu, {threads} thread(s), f64 reference kernels",
        std::env::consts::OS,
        std::env::consts::ARCH
    )
}

/// Builds a table covering every (op, context) of `layout`.
///
/// Profiled entries are the median of `trials` timed single-image forwards
/// after warmup; `zero` takes the smallest measured latency of its context.
pub fn build_lut(layout: &NetworkLayout, mode: LutMode, trials: usize) -> Result<LatencyTable> {
    let ctxs = op_contexts(layout);
    let mut entries = Vec::with_capacity(ctxs.len() * NUM_OPS);
    match mode {
        LutMode::Synthetic => {
            for ctx in &ctxs {
                for op in candidate_ops() {
                    entries.push(LatencyEntry::new(op, *ctx, synthetic_latency(op, ctx)));
                }
            }
            LatencyTable::from_entries("synthetic cost model v1".into(), mode, entries)
        }
        LutMode::Profiled => {
            if trials == 0 {
                return Err(invalid("profiled mode needs trials >= 1"));
            }
            let device = profiling_device()?;
            // Identical shapes are timed once.
            let mut cache: HashMap<(OpKind, usize, usize, usize, usize), f64> = HashMap::new();
            for ctx in &ctxs {
                let mut measured = Vec::with_capacity(NUM_OPS);
                for op in candidate_ops() {
                    if op == OpKind::Zero {
                        continue;
                    }
                    let key = (op, ctx.h, ctx.w, ctx.channels, ctx.stride);
                    let usec = match cache.get(&key) {
                        Some(&v) => v,
                        None => {
                            let v = profile_op(op, ctx, trials)?.max(f64::MIN_POSITIVE);
                            cache.insert(key, v);
                            v
                        }
                    };
                    measured.push((op, usec));
                }
                let floor = measured.iter().map(|m| m.1).fold(f64::INFINITY, f64::min);
                for op in candidate_ops() {
                    let usec = if op == OpKind::Zero {
                        floor
                    } else {
                        measured.iter().find(|m| m.0 == op).unwrap().1
                    };
                    entries.push(LatencyEntry::new(op, *ctx, usec));
                }
            }
            LatencyTable::from_entries(format!("{device}: {}", host_descriptor()), mode, entries)
        }
    }
}

fn check_pair(z: &Tensor, lat: &Tensor) -> Result<()> {
    if z.shape() != lat.shape() || z.shape().len() != 2 {
        return Err(Error::Shape(format!(
            "relaxation {:?} and latency slice {:?} differ",
            z.shape(),
            lat.shape()
        )));
    }
    Ok(())
}

/// `sum_e sum_m z[e][m] * lat[e][m]`.
pub fn cell_expected_latency(z: &Tensor, lat: &Tensor) -> Result<f64> {
    check_pair(z, lat)?;
    Ok(z.data().iter().zip(lat.data()).map(|(a, b)| a * b).sum())
}

/// Expected latency of the whole network, cells summed in order.
pub fn network_expected_latency(zs: &[Tensor], slices: &[Tensor]) -> Result<f64> {
    if zs.len() != slices.len() {
        return Err(invalid(format!(
            "{} relaxations for {} cells",
            zs.len(),
            slices.len()
        )));
    }
    let mut cells = Vec::with_capacity(zs.len());
    for (z, lat) in zs.iter().zip(slices) {
        cells.push(cell_expected_latency(z, lat)?);
    }
    Ok(cells.iter().sum())
}

/// Table sum of the operations a genotype selects, in the same order as
/// [`network_expected_latency`].
pub fn genotype_latency(g: &Genotype, slices: &[Tensor]) -> Result<f64> {
    if g.cells.len() != slices.len() {
        return Err(invalid(format!(
            "genotype has {} cells, table covers {}",
            g.cells.len(),
            slices.len()
        )));
    }
    let mut cells = Vec::with_capacity(slices.len());
    for (k, lat) in slices.iter().enumerate() {
        let mut s = 0.0;
        for e in 0..lat.rows() {
            s += lat.at(e, g.op(k, e).index());
        }
        cells.push(s);
    }
    Ok(cells.iter().sum())
}

/// One-hot relaxation of a genotype.
pub fn one_hot(g: &Genotype, p: usize) -> Vec<Tensor> {
    (0..g.cells.len())
        .map(|k| {
            let mut t = Tensor::zeros(&[p, NUM_OPS]);
            for e in 0..p {
                t.set(e, g.op(k, e).index(), 1.0);
            }
            t
        })
        .collect()
}

/// Expected latency on the tape, matching [`network_expected_latency`].
pub fn network_latency_var(g: &mut Graph, zs: &[Var], slices: &[Tensor]) -> Var {
    assert_eq!(zs.len(), slices.len(), "one relaxation per cell");
    let cells: Vec<Var> = zs
        .iter()
        .zip(slices)
        .map(|(&z, lat)| {
            let prod = g.mul_const(z, lat);
            g.sum_all(prod)
        })
        .collect();
    g.add_n(&cells)
}

/// `beta * ln(lat)`.
pub fn latency_loss(lat: f64, beta: f64) -> Result<f64> {
    if !(lat > 0.0) {
        return Err(invalid(format!("latency must be > 0, got {lat}")));
    }
    Ok(beta * lat.ln())
}

/// `beta * ln(lat)` on the tape; `lat` is a positive scalar node.
pub fn latency_loss_var(g: &mut Graph, lat: Var, beta: f64) -> Var {
    let l = g.log(lat);
    g.scale(l, beta)
}

/// Smallest achievable network latency of `layout` under the table.
pub fn min_latency(slices: &[Tensor]) -> f64 {
    let cells: Vec<f64> = slices
        .iter()
        .map(|lat| {
            let mut s = 0.0;
            for e in 0..lat.rows() {
                s += lat.row(e).iter().cloned().fold(f64::INFINITY, f64::min);
            }
            s
        })
        .collect();
    cells.iter().sum()
}

/// Operations at the per-edge minimum latency, for every edge of every cell.
pub fn lightest_ops(slices: &[Tensor]) -> Vec<Vec<Vec<OpKind>>> {
    slices
        .iter()
        .map(|lat| {
            (0..lat.rows())
                .map(|e| {
                    let row = lat.row(e);
                    let m = row.iter().cloned().fold(f64::INFINITY, f64::min);
                    candidate_ops().into_iter().filter(|op| row[op.index()] == m).collect()
                })
                .collect()
        })
        .collect()
}
