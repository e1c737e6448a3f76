use crate::arch_space::{Genotype, NetworkLayout, OpKind};
use crate::relaxation::ArchParams;

// Index of the largest value; the first one wins ties and NaN never wins.
fn argmax_where(row: &[f64], keep: impl Fn(usize) -> bool) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in row.iter().enumerate() {
        if !keep(i) {
            continue;
        }
        match best {
            None => best = Some(i),
            Some(b) if v > row[b] || (row[b].is_nan() && !v.is_nan()) => best = Some(i),
            _ => {}
        }
    }
    best
}

/// Discrete genotype from per-edge logits.
///
/// Each edge takes its argmax op (lowest index on ties); `zero` prunes the
/// edge. An intermediate node left with no live incoming edge gets back the
/// incoming edge whose best non-zero logit is highest (lowest edge index on
/// ties), with that non-zero op.
pub fn derive_genotype(logits: &ArchParams, layout: &NetworkLayout) -> Genotype {
    let zero = OpKind::Zero.index();
    let ops = layout
        .cells
        .iter()
        .zip(logits.cells())
        .map(|(cl, a)| {
            let spec = &cl.spec;
            let mut chosen: Vec<OpKind> = (0..spec.num_edges())
                .map(|e| OpKind::from_index(argmax_where(a.row(e), |_| true).unwrap_or(0)).expect("op index"))
                .collect();
            for node in spec.num_inputs..spec.num_inputs + spec.num_intermediate {
                if spec.incoming(node).any(|e| chosen[e] != OpKind::Zero) {
                    continue;
                }
                // (edge, best non-zero op) of the strongest candidate so far
                let mut repair: Option<(usize, usize)> = None;
                for e in spec.incoming(node) {
                    let row = a.row(e);
                    let op = argmax_where(row, |i| i != zero).expect("more than one op");
                    let better = match repair {
                        None => true,
                        Some((be, bo)) => {
                            let (v, bv) = (row[op], a.row(be)[bo]);
                            v > bv || (bv.is_nan() && !v.is_nan())
                        }
                    };
                    if better {
                        repair = Some((e, op));
                    }
                }
                let (e, op) = repair.expect("every intermediate node has incoming edges");
                chosen[e] = OpKind::from_index(op).expect("op index");
            }
            chosen
        })
        .collect();
    Genotype::from_ops(layout.fingerprint(), ops)
}
