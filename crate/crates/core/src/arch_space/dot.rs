//! Graphviz export and operation census of genotypes.

use serde::{Deserialize, Serialize};
use std::fmt::Write;

use super::{Genotype, NetworkLayout, OpKind};

/// One `subgraph cluster_<k>` per cell. Parameterless operations are dashed,
/// dilation >= 4 operations green and bold, pruned edges omitted.
pub fn export_dot(g: &Genotype, layout: &NetworkLayout) -> String {
    let mut s = header();
    for k in 0..g.cells.len().min(layout.cells.len()) {
        write_cluster(&mut s, g, layout, k);
    }
    writeln!(s, "}}").unwrap();
    s
}

/// The same rendering restricted to cell `k`; `None` when out of range.
pub fn export_cell_dot(g: &Genotype, layout: &NetworkLayout, k: usize) -> Option<String> {
    if k >= g.cells.len() || k >= layout.cells.len() {
        return None;
    }
    let mut s = header();
    write_cluster(&mut s, g, layout, k);
    writeln!(s, "}}").unwrap();
    Some(s)
}

fn header() -> String {
    let mut s = String::new();
    writeln!(s, "digraph genotype {{").unwrap();
    writeln!(s, "  rankdir=LR;").unwrap();
    writeln!(s, "  node [shape=box, style=rounded];").unwrap();
    s
}

fn write_cluster(s: &mut String, g: &Genotype, layout: &NetworkLayout, k: usize) {
    let (cell, cl) = (&g.cells[k], &layout.cells[k]);
    let kind = if cl.spec.is_reduction { "reduction" } else { "normal" };
    writeln!(s, "  subgraph cluster_{k} {{").unwrap();
    writeln!(s, "    label=\"cell {k} ({kind}, C={})\";", cl.channels).unwrap();
    for node in 0..cl.spec.num_inputs + cl.spec.num_intermediate {
        let name = cl.spec.node_name(node);
        writeln!(s, "    c{k}_{name} [label=\"{name}\"];").unwrap();
    }
    for choice in &cell.edges {
        if choice.op == OpKind::Zero {
            continue;
        }
        let Some(e) = cl.spec.edges.get(choice.edge) else {
            continue;
        };
        let style = if choice.op.is_parameterless() {
            "style=dashed, color=gray40"
        } else if choice.op.is_large_receptive_field() {
            "style=bold, color=green4"
        } else {
            "style=solid, color=black"
        };
        writeln!(
            s,
            "    c{k}_{} -> c{k}_{} [label=\"{}\", {style}];",
            cl.spec.node_name(e.source),
            cl.spec.node_name(e.target),
            choice.op
        )
        .unwrap();
    }
    writeln!(s, "  }}").unwrap();
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellCensus {
    pub cell: usize,
    /// Stage index: number of reduction cells at or before this cell.
    pub stage: usize,
    pub lightweight: usize,
    pub large_receptive_field: usize,
    pub parameterized: usize,
    pub pruned: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCensus {
    pub per_cell: Vec<CellCensus>,
    pub lightweight: usize,
    pub large_receptive_field: usize,
    pub per_op: Vec<(OpKind, usize)>,
}

/// Counts lightweight (parameterless, including `zero`) and large
/// receptive-field operations per cell and overall.
pub fn op_census(g: &Genotype, layout: &NetworkLayout) -> OpCensus {
    let mut census = OpCensus::default();
    let mut per_op = [0usize; super::NUM_OPS];
    let mut stage = 0;
    for (k, cell) in g.cells.iter().enumerate() {
        if layout.cells.get(k).is_some_and(|c| c.spec.is_reduction) {
            stage += 1;
        }
        let mut c = CellCensus {
            cell: k,
            stage,
            ..Default::default()
        };
        for e in &cell.edges {
            per_op[e.op.index()] += 1;
            if e.op.is_parameterless() {
                c.lightweight += 1;
            } else {
                c.parameterized += 1;
            }
            if e.op.is_large_receptive_field() {
                c.large_receptive_field += 1;
            }
            if e.op == OpKind::Zero {
                c.pruned += 1;
            }
        }
        census.lightweight += c.lightweight;
        census.large_receptive_field += c.large_receptive_field;
        census.per_cell.push(c);
    }
    census.per_op = super::candidate_ops()
        .iter()
        .map(|op| (*op, per_op[op.index()]))
        .collect();
    census
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch_space::{build_network_layout, LayoutConfig};

    fn layout(k: usize) -> NetworkLayout {
        build_network_layout(&LayoutConfig {
            num_cells: k,
            reductions: Some(vec![]),
            input_size: [16, 16],
            ..Default::default()
        })
        .unwrap()
    }

    fn edge_lines(dot: &str) -> Vec<&str> {
        dot.lines().filter(|l| l.contains("->")).collect()
    }

    #[test]
    fn single_cell_has_five_edges() {
        let l = layout(1);
        let g = Genotype::uniform(&l, OpKind::Conv3x3);
        let dot = export_dot(&g, &l);
        assert_eq!(edge_lines(&dot).len(), 5);
        assert!(dot.contains("subgraph cluster_0"));
    }

    #[test]
    fn pruned_edge_is_omitted() {
        let l = layout(1);
        let mut g = Genotype::uniform(&l, OpKind::Conv3x3);
        g.cells[0].edges[4].op = OpKind::Zero;
        let dot = export_dot(&g, &l);
        assert_eq!(edge_lines(&dot).len(), 4);
        assert!(!dot.contains("c0_x1 -> c0_x2"));
    }

    #[test]
    fn all_skip_is_all_dashed() {
        let l = layout(2);
        let g = Genotype::uniform(&l, OpKind::SkipConnect);
        let dot = export_dot(&g, &l);
        let edges = edge_lines(&dot);
        assert_eq!(edges.len(), 10);
        assert!(edges.iter().all(|e| e.contains("style=dashed")));
    }

    #[test]
    fn census_counts() {
        let l = layout(2);
        let mut g = Genotype::uniform(&l, OpKind::DilSepConv3x3R8);
        g.cells[0].edges[0].op = OpKind::MaxPool3x3;
        g.cells[0].edges[1].op = OpKind::Zero;
        let c = op_census(&g, &l);
        assert_eq!(c.lightweight, 2);
        assert_eq!(c.large_receptive_field, 8);
        assert_eq!(c.per_cell[0].pruned, 1);
        assert_eq!(c.per_op.iter().map(|p| p.1).sum::<usize>(), 10);
    }
}
