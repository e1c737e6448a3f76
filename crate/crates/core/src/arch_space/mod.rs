//! Candidate operations, cell topology and network macro-layout.

mod dot;
mod genotype;

pub use dot::{export_cell_dot, export_dot, op_census, CellCensus, OpCensus};
pub use genotype::{
    deserialize, serialize, validate_genotype, CellGenotype, EdgeChoice, Fingerprint, Genotype,
    Violation, GENOTYPE_VERSION,
};

use serde::{Deserialize, Serialize};
use std::fmt;

use crate::error::{invalid, Error, Result};

/// The closed set of candidate operations on every cell edge.
///
/// The declaration order is the operation axis of every architecture matrix,
/// sample and latency slice; [`OpKind::index`] is stable across runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpKind {
    #[serde(rename = "max_pool_3x3")]
    MaxPool3x3,
    #[serde(rename = "skip_connect")]
    SkipConnect,
    #[serde(rename = "conv_3x3")]
    Conv3x3,
    #[serde(rename = "zero")]
    Zero,
    #[serde(rename = "sep_conv_3x3")]
    SepConv3x3,
    #[serde(rename = "dil_sep_conv_3x3_r2")]
    DilSepConv3x3R2,
    #[serde(rename = "dil_sep_conv_3x3_r4")]
    DilSepConv3x3R4,
    #[serde(rename = "dil_sep_conv_3x3_r8")]
    DilSepConv3x3R8,
}

/// Number of candidate operations.
pub const NUM_OPS: usize = 8;

const ALL_OPS: [OpKind; NUM_OPS] = [
    OpKind::MaxPool3x3,
    OpKind::SkipConnect,
    OpKind::Conv3x3,
    OpKind::Zero,
    OpKind::SepConv3x3,
    OpKind::DilSepConv3x3R2,
    OpKind::DilSepConv3x3R4,
    OpKind::DilSepConv3x3R8,
];

/// All operations in axis order.
pub fn candidate_ops() -> [OpKind; NUM_OPS] {
    ALL_OPS
}

impl OpKind {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<OpKind> {
        ALL_OPS.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::MaxPool3x3 => "max_pool_3x3",
            OpKind::SkipConnect => "skip_connect",
            OpKind::Conv3x3 => "conv_3x3",
            OpKind::Zero => "zero",
            OpKind::SepConv3x3 => "sep_conv_3x3",
            OpKind::DilSepConv3x3R2 => "dil_sep_conv_3x3_r2",
            OpKind::DilSepConv3x3R4 => "dil_sep_conv_3x3_r4",
            OpKind::DilSepConv3x3R8 => "dil_sep_conv_3x3_r8",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        ALL_OPS.iter().copied().find(|op| op.name() == name)
    }

    /// Spatial kernel extent; `None` for operations without a window.
    pub fn kernel_size(self) -> Option<usize> {
        match self {
            OpKind::SkipConnect | OpKind::Zero => None,
            _ => Some(3),
        }
    }

    pub fn dilation(self) -> usize {
        match self {
            OpKind::DilSepConv3x3R2 => 2,
            OpKind::DilSepConv3x3R4 => 4,
            OpKind::DilSepConv3x3R8 => 8,
            _ => 1,
        }
    }

    pub fn is_parameterless(self) -> bool {
        matches!(
            self,
            OpKind::MaxPool3x3 | OpKind::SkipConnect | OpKind::Zero
        )
    }

    /// Dilation of four or more.
    pub fn is_large_receptive_field(self) -> bool {
        self.dilation() >= 4
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Node ids inside a cell: `0` and `1` are the inputs, `2..2+N` the
/// intermediate nodes in topological order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub source: usize,
    pub target: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellSpec {
    pub num_inputs: usize,
    pub num_intermediate: usize,
    pub edges: Vec<Edge>,
    pub is_reduction: bool,
}

/// Edge count `p = N(N+3)/2` of a cell with `N` intermediate nodes.
pub fn edge_count(num_intermediate: usize) -> usize {
    num_intermediate * (num_intermediate + 3) / 2
}

/// Fully connected cell DAG: every intermediate node reads all earlier nodes.
pub fn build_cell_topology(num_intermediate: usize, is_reduction: bool) -> Result<CellSpec> {
    if num_intermediate == 0 {
        return Err(invalid("a cell needs at least one intermediate node"));
    }
    let mut edges = Vec::with_capacity(edge_count(num_intermediate));
    for i in 0..num_intermediate {
        let target = 2 + i;
        for source in 0..target {
            edges.push(Edge { source, target });
        }
    }
    Ok(CellSpec {
        num_inputs: 2,
        num_intermediate,
        edges,
        is_reduction,
    })
}

impl CellSpec {
    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Edge indices feeding `node`, in source order.
    pub fn incoming(&self, node: usize) -> impl Iterator<Item = usize> + '_ {
        self.edges
            .iter()
            .enumerate()
            .filter(move |(_, e)| e.target == node)
            .map(|(i, _)| i)
    }

    pub fn edge_stride(&self, edge: usize) -> usize {
        if self.is_reduction && self.edges[edge].source < self.num_inputs {
            2
        } else {
            1
        }
    }

    pub fn node_name(&self, node: usize) -> String {
        if node < self.num_inputs {
            format!("i{}", node + 1)
        } else {
            format!("x{}", node - self.num_inputs + 1)
        }
    }
}

/// Macro-structure settings shared by search, latency modelling and
/// retraining.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LayoutConfig {
    pub num_cells: usize,
    pub num_nodes: usize,
    pub initial_channels: usize,
    /// Reduction cell indices; `None` places them at `K/3` and `2K/3`.
    pub reductions: Option<Vec<usize>>,
    pub stem_strides: [usize; 3],
    pub aspp_rates: Vec<usize>,
    pub aspp_channels: usize,
    pub num_classes: usize,
    /// Input height and width used for latency contexts and benchmarking.
    pub input_size: [usize; 2],
}

impl Default for LayoutConfig {
    fn default() -> Self {
        Self {
            num_cells: 14,
            num_nodes: 2,
            initial_channels: 8,
            reductions: None,
            stem_strides: [2, 1, 2],
            aspp_rates: vec![1, 6, 12],
            aspp_channels: 16,
            num_classes: 19,
            input_size: [64, 64],
        }
    }
}

impl LayoutConfig {
    pub fn resolved_reductions(&self) -> Vec<usize> {
        match &self.reductions {
            Some(r) => r.clone(),
            None => {
                let k = self.num_cells;
                let mut r = vec![k / 3, 2 * k / 3];
                r.dedup();
                r.retain(|&i| i < k);
                r
            }
        }
    }

    /// Every constraint violation, not only the first.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.num_cells == 0 {
            v.push("layout.num_cells must be >= 1".into());
        }
        if self.num_nodes == 0 {
            v.push("layout.num_nodes must be >= 1".into());
        }
        if self.initial_channels < 2 {
            v.push("layout.initial_channels must be >= 2".into());
        }
        if self.num_classes < 2 {
            v.push("layout.num_classes must be >= 2".into());
        }
        if self.aspp_channels == 0 {
            v.push("layout.aspp_channels must be >= 1".into());
        }
        if self.aspp_rates.is_empty() || self.aspp_rates.contains(&0) {
            v.push("layout.aspp_rates must be non-empty positive dilations".into());
        }
        if self.stem_strides.iter().any(|s| !(1..=2).contains(s)) {
            v.push("layout.stem_strides must be 1 or 2".into());
        }
        let red = self.resolved_reductions();
        if red.iter().any(|&r| r >= self.num_cells) {
            v.push(format!(
                "layout.reductions {red:?} out of range for {} cells",
                self.num_cells
            ));
        }
        if red.windows(2).any(|w| w[0] >= w[1]) {
            v.push(format!(
                "layout.reductions {red:?} must be strictly increasing without duplicates"
            ));
        }
        let stride = self.total_stride_for(&red);
        if self.input_size.iter().any(|&s| s == 0 || s % stride != 0) {
            v.push(format!(
                "layout.input_size {:?} must be divisible by the total stride {stride}",
                self.input_size
            ));
        }
        v
    }

    fn total_stride_for(&self, reductions: &[usize]) -> usize {
        self.stem_strides.iter().product::<usize>() << reductions.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StemSpec {
    pub channels: [usize; 3],
    pub strides: [usize; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub in_channels: usize,
    pub rates: Vec<usize>,
    pub branch_channels: usize,
    pub image_pooling: bool,
    pub num_classes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellLayout {
    pub spec: CellSpec,
    /// Width of every node inside the cell.
    pub channels: usize,
    /// Channels of the cell output (concatenation of intermediate nodes).
    pub out_channels: usize,
    /// Spatial stride, relative to the image, of this cell's inputs.
    pub input_stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkLayout {
    pub stem: StemSpec,
    pub cells: Vec<CellLayout>,
    pub head: HeadSpec,
    pub initial_channels: usize,
    pub reductions: Vec<usize>,
    pub input_size: [usize; 2],
}

pub fn build_network_layout(config: &LayoutConfig) -> Result<NetworkLayout> {
    let violations = config.violations();
    if !violations.is_empty() {
        return Err(Error::Config(violations));
    }
    let reductions = config.resolved_reductions();
    let c0 = config.initial_channels;
    let stem = StemSpec {
        channels: [c0 / 2, c0 / 2, c0],
        strides: config.stem_strides,
    };
    let mut stride = stem.strides.iter().product::<usize>();
    let mut channels = c0;
    let mut cells = Vec::with_capacity(config.num_cells);
    for k in 0..config.num_cells {
        let is_reduction = reductions.contains(&k);
        if is_reduction {
            channels *= 2;
        }
        cells.push(CellLayout {
            spec: build_cell_topology(config.num_nodes, is_reduction)?,
            channels,
            out_channels: channels * config.num_nodes,
            input_stride: stride,
        });
        if is_reduction {
            stride *= 2;
        }
    }
    let head = HeadSpec {
        in_channels: cells.last().map_or(c0, |c| c.out_channels),
        rates: config.aspp_rates.clone(),
        branch_channels: config.aspp_channels,
        image_pooling: true,
        num_classes: config.num_classes,
    };
    Ok(NetworkLayout {
        stem,
        cells,
        head,
        initial_channels: c0,
        reductions,
        input_size: config.input_size,
    })
}

impl NetworkLayout {
    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.cells[0].spec.num_intermediate
    }

    pub fn edges_per_cell(&self) -> usize {
        self.cells[0].spec.num_edges()
    }

    pub fn stem_stride(&self) -> usize {
        self.stem.strides.iter().product()
    }

    pub fn total_stride(&self) -> usize {
        self.stem_stride() << self.reductions.len()
    }

    pub fn channel_sequence(&self) -> Vec<usize> {
        self.cells.iter().map(|c| c.channels).collect()
    }

    pub fn fingerprint(&self) -> Fingerprint {
        Fingerprint {
            num_cells: self.num_cells(),
            num_nodes: self.num_nodes(),
            reductions: self.reductions.clone(),
            channels: self.initial_channels,
        }
    }

    /// Input spatial size (h, w) of edge `edge` in cell `cell` for an image of
    /// size `input`.
    pub fn edge_input_size(&self, cell: usize, edge: usize, input: [usize; 2]) -> [usize; 2] {
        let c = &self.cells[cell];
        let src = c.spec.edges[edge].source;
        let s = c.input_stride;
        let base = [input[0].div_ceil(s), input[1].div_ceil(s)];
        if c.spec.is_reduction && src >= c.spec.num_inputs {
            [base[0].div_ceil(2), base[1].div_ceil(2)]
        } else {
            base
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn op_set_is_closed_and_ordered() {
        let ops = candidate_ops();
        assert_eq!(ops.len(), 8);
        assert_eq!(ops, candidate_ops());
        assert_eq!(ops.iter().filter(|o| **o == OpKind::Zero).count(), 1);
        assert_eq!(OpKind::Zero.index(), 3);
        for (i, op) in ops.iter().enumerate() {
            assert_eq!(op.index(), i);
            assert_eq!(OpKind::from_name(op.name()), Some(*op));
            assert_eq!(OpKind::from_index(i), Some(*op));
        }
        assert_eq!(OpKind::from_index(8), None);
        assert_eq!(OpKind::DilSepConv3x3R8.dilation(), 8);
    }

    #[test]
    fn serde_names_match_display() {
        for op in candidate_ops() {
            let s = serde_json::to_string(&op).unwrap();
            assert_eq!(s, format!("\"{op}\""));
        }
    }

    #[test]
    fn two_node_cell_edges() {
        let c = build_cell_topology(2, false).unwrap();
        let pairs: Vec<(usize, usize)> = c.edges.iter().map(|e| (e.source, e.target)).collect();
        assert_eq!(pairs, vec![(0, 2), (1, 2), (0, 3), (1, 3), (2, 3)]);
        assert_eq!(build_cell_topology(1, false).unwrap().num_edges(), 2);
        assert_eq!(build_cell_topology(3, false).unwrap().num_edges(), 9);
        assert!(build_cell_topology(0, false).is_err());
    }

    #[test]
    fn edge_count_matches_enumeration() {
        for n in 1..=4 {
            let enumerated: usize = (1..=n).map(|i| i + 1).sum();
            assert_eq!(edge_count(n), enumerated);
            let cell = build_cell_topology(n, false).unwrap();
            assert_eq!(cell.num_edges(), enumerated);
            for node in 2..2 + n {
                assert_eq!(cell.incoming(node).count(), node);
            }
        }
    }

    #[test]
    fn reduction_strides_only_on_input_edges() {
        let c = build_cell_topology(2, true).unwrap();
        let strides: Vec<usize> = (0..5).map(|e| c.edge_stride(e)).collect();
        assert_eq!(strides, vec![2, 2, 2, 2, 1]);
    }

    #[test]
    fn layout_channel_doubling() {
        let cfg = LayoutConfig {
            num_cells: 6,
            reductions: Some(vec![1, 3]),
            input_size: [32, 32],
            ..Default::default()
        };
        let l = build_network_layout(&cfg).unwrap();
        assert_eq!(l.channel_sequence(), vec![8, 16, 16, 32, 32, 32]);
        assert_eq!(l.total_stride(), 16);
    }

    #[test]
    fn default_layout_has_fourteen_cells_and_stride_sixteen() {
        let l = build_network_layout(&LayoutConfig::default()).unwrap();
        assert_eq!(l.num_cells(), 14);
        assert_eq!(l.cells[0].channels, 8);
        assert_eq!(l.reductions, vec![4, 9]);
        assert_eq!(l.total_stride(), 16);
    }

    #[test]
    fn single_normal_cell() {
        let cfg = LayoutConfig {
            num_cells: 1,
            reductions: Some(vec![]),
            input_size: [8, 8],
            ..Default::default()
        };
        let l = build_network_layout(&cfg).unwrap();
        assert_eq!(l.channel_sequence(), vec![8]);
        assert!(!l.cells[0].spec.is_reduction);
    }

    #[test]
    fn rejects_bad_reductions() {
        for bad in [vec![6], vec![2, 2], vec![3, 1]] {
            let cfg = LayoutConfig {
                num_cells: 6,
                reductions: Some(bad),
                input_size: [64, 64],
                ..Default::default()
            };
            assert!(matches!(build_network_layout(&cfg), Err(Error::Config(_))));
        }
    }
}
