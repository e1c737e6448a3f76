use serde::{Deserialize, Serialize};
use std::fmt;

use super::{NetworkLayout, OpKind};
use crate::error::{Error, Result};

pub const GENOTYPE_VERSION: u32 = 1;

/// Layout identity a genotype was derived for.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fingerprint {
    #[serde(rename = "K")]
    pub num_cells: usize,
    #[serde(rename = "N")]
    pub num_nodes: usize,
    pub reductions: Vec<usize>,
    pub channels: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeChoice {
    pub edge: usize,
    pub op: OpKind,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellGenotype {
    pub index: usize,
    /// One entry per edge; `zero` marks a pruned edge.
    pub edges: Vec<EdgeChoice>,
}

impl CellGenotype {
    pub fn op(&self, edge: usize) -> Option<OpKind> {
        self.edges.iter().find(|e| e.edge == edge).map(|e| e.op)
    }

    pub fn pruned(&self) -> Vec<usize> {
        self.edges
            .iter()
            .filter(|e| e.op == OpKind::Zero)
            .map(|e| e.edge)
            .collect()
    }
}

/// A discrete architecture: one operation per edge of every cell.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Genotype {
    pub version: u32,
    pub fingerprint: Fingerprint,
    pub cells: Vec<CellGenotype>,
}

impl Genotype {
    /// Builds a genotype from per-cell operation lists in edge order.
    pub fn from_ops(fingerprint: Fingerprint, ops: Vec<Vec<OpKind>>) -> Self {
        let cells = ops
            .into_iter()
            .enumerate()
            .map(|(index, edges)| CellGenotype {
                index,
                edges: edges
                    .into_iter()
                    .enumerate()
                    .map(|(edge, op)| EdgeChoice { edge, op })
                    .collect(),
            })
            .collect();
        Self {
            version: GENOTYPE_VERSION,
            fingerprint,
            cells,
        }
    }

    /// Same operation on every edge of every cell of `layout`.
    pub fn uniform(layout: &NetworkLayout, op: OpKind) -> Self {
        let p = layout.edges_per_cell();
        Self::from_ops(
            layout.fingerprint(),
            vec![vec![op; p]; layout.num_cells()],
        )
    }

    /// Operation of `edge` in cell `cell`, `zero` when absent.
    pub fn op(&self, cell: usize, edge: usize) -> OpKind {
        self.cells
            .get(cell)
            .and_then(|c| c.op(edge))
            .unwrap_or(OpKind::Zero)
    }

    pub fn ops(&self) -> impl Iterator<Item = OpKind> + '_ {
        self.cells.iter().flat_map(|c| c.edges.iter().map(|e| e.op))
    }
}

/// A single genotype/layout inconsistency.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    Fingerprint {
        field: &'static str,
        expected: String,
        found: String,
    },
    Version(u32),
    CellCount { expected: usize, found: usize },
    CellIndex { position: usize, found: usize },
    EdgeSet { cell: usize, detail: String },
    NodeDisconnected { cell: usize, node: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Fingerprint {
                field,
                expected,
                found,
            } => write!(f, "fingerprint {field}: layout has {expected}, genotype has {found}"),
            Violation::Version(v) => write!(f, "unsupported genotype version {v}"),
            Violation::CellCount { expected, found } => {
                write!(f, "expected {expected} cells, found {found}")
            }
            Violation::CellIndex { position, found } => {
                write!(f, "cell at position {position} has index {found}")
            }
            Violation::EdgeSet { cell, detail } => write!(f, "cell {cell}: {detail}"),
            Violation::NodeDisconnected { cell, node } => {
                write!(f, "cell {cell}: node {node} disconnected")
            }
        }
    }
}

/// Checks a genotype against a layout and reports every violation.
pub fn validate_genotype(g: &Genotype, layout: &NetworkLayout) -> Vec<Violation> {
    let mut out = Vec::new();
    if g.version != GENOTYPE_VERSION {
        out.push(Violation::Version(g.version));
    }
    let fp = layout.fingerprint();
    let mut field = |name: &'static str, expected: String, found: String| {
        if expected != found {
            out.push(Violation::Fingerprint {
                field: name,
                expected,
                found,
            });
        }
    };
    field("K", fp.num_cells.to_string(), g.fingerprint.num_cells.to_string());
    field("N", fp.num_nodes.to_string(), g.fingerprint.num_nodes.to_string());
    field(
        "reductions",
        format!("{:?}", fp.reductions),
        format!("{:?}", g.fingerprint.reductions),
    );
    field(
        "channels",
        fp.channels.to_string(),
        g.fingerprint.channels.to_string(),
    );
    if g.cells.len() != layout.num_cells() {
        out.push(Violation::CellCount {
            expected: layout.num_cells(),
            found: g.cells.len(),
        });
    }
    for (pos, (cell, cl)) in g.cells.iter().zip(&layout.cells).enumerate() {
        if cell.index != pos {
            out.push(Violation::CellIndex {
                position: pos,
                found: cell.index,
            });
        }
        let p = cl.spec.num_edges();
        let mut seen = vec![0usize; p];
        for e in &cell.edges {
            match seen.get_mut(e.edge) {
                Some(c) => *c += 1,
                None => out.push(Violation::EdgeSet {
                    cell: pos,
                    detail: format!("edge {} does not exist (cell has {p})", e.edge),
                }),
            }
        }
        for (edge, &count) in seen.iter().enumerate() {
            if count != 1 {
                out.push(Violation::EdgeSet {
                    cell: pos,
                    detail: format!("edge {edge} listed {count} times"),
                });
            }
        }
        for node in cl.spec.num_inputs..cl.spec.num_inputs + cl.spec.num_intermediate {
            let alive = cl
                .spec
                .incoming(node)
                .any(|e| cell.op(e).is_some_and(|op| op != OpKind::Zero));
            if !alive {
                out.push(Violation::NodeDisconnected {
                    cell: pos,
                    node: cl.spec.node_name(node),
                });
            }
        }
    }
    out
}

/// Pretty JSON with stable field order.
pub fn serialize(g: &Genotype) -> String {
    serde_json::to_string_pretty(g).expect("genotype serialization is infallible")
}

pub fn deserialize(text: &str) -> Result<Genotype> {
    if text.trim().is_empty() {
        return Err(Error::Parse("empty genotype text".into()));
    }
    let g: Genotype =
        serde_json::from_str(text).map_err(|e| Error::Parse(format!("genotype: {e}")))?;
    if g.version != GENOTYPE_VERSION {
        return Err(Error::Version {
            expected: GENOTYPE_VERSION,
            found: g.version,
        });
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch_space::{build_network_layout, LayoutConfig};

    fn toy_layout(k: usize) -> NetworkLayout {
        build_network_layout(&LayoutConfig {
            num_cells: k,
            reductions: Some(vec![]),
            input_size: [16, 16],
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn all_skip_is_valid() {
        let l = toy_layout(3);
        let g = Genotype::uniform(&l, OpKind::SkipConnect);
        assert!(validate_genotype(&g, &l).is_empty());
    }

    #[test]
    fn disconnected_node_is_reported() {
        let l = toy_layout(2);
        let mut g = Genotype::uniform(&l, OpKind::SkipConnect);
        g.cells[1].edges[0].op = OpKind::Zero;
        g.cells[1].edges[1].op = OpKind::Zero;
        let v = validate_genotype(&g, &l);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].to_string(), "cell 1: node x1 disconnected");
    }

    #[test]
    fn fingerprint_mismatch_lists_every_violation() {
        let big = build_network_layout(&LayoutConfig::default()).unwrap();
        let small = build_network_layout(&LayoutConfig {
            num_cells: 6,
            input_size: [32, 32],
            ..Default::default()
        })
        .unwrap();
        let g = Genotype::uniform(&big, OpKind::Conv3x3);
        let v = validate_genotype(&g, &small);
        assert!(v
            .iter()
            .any(|x| matches!(x, Violation::Fingerprint { field: "K", .. })));
        assert!(v
            .iter()
            .any(|x| matches!(x, Violation::Fingerprint { field: "reductions", .. })));
        assert!(v.iter().any(|x| matches!(x, Violation::CellCount { .. })));
    }

    #[test]
    fn round_trip_and_format() {
        let l = toy_layout(2);
        let mut g = Genotype::uniform(&l, OpKind::SepConv3x3);
        g.cells[0].edges[4].op = OpKind::Zero;
        let text = serialize(&g);
        assert!(text.contains("\"version\": 1"));
        assert!(text.contains("\"K\": 2"));
        assert!(text.contains("\"op\": \"zero\""));
        assert_eq!(deserialize(&text).unwrap(), g);
        assert_eq!(g.cells[0].pruned(), vec![4]);
    }

    #[test]
    fn rejects_malformed_text() {
        let l = toy_layout(1);
        let text = serialize(&Genotype::uniform(&l, OpKind::SkipConnect));
        assert!(matches!(deserialize(""), Err(Error::Parse(_))));
        let bad_op = text.replacen("skip_connect", "conv_5x5", 1);
        assert!(matches!(deserialize(&bad_op), Err(Error::Parse(_))));
        let bad_version = text.replacen("\"version\": 1", "\"version\": 7", 1);
        assert!(matches!(deserialize(&bad_version), Err(Error::Version { found: 7, .. })));
        let missing = text.replacen("\"version\": 1,", "", 1);
        assert!(matches!(deserialize(&missing), Err(Error::Parse(_))));
    }
}
