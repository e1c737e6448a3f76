use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::arch_space::{validate_genotype, Genotype, NetworkLayout, OpKind, NUM_OPS};
use crate::error::{invalid, Error, Result};
use crate::latency::genotype_latency;
use crate::seeds;
use crate::tensor::Tensor;

/// Draws (valid or not) allowed per requested genotype before giving up.
pub const REJECTION_CAP: usize = 1_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RandomSetting {
    /// Uniform op per edge, no latency constraint.
    A,
    /// Uniform op per edge, kept only at or under a latency budget.
    B,
}

fn draw<R: Rng>(layout: &NetworkLayout, rng: &mut R) -> Genotype {
    let ops = layout
        .cells
        .iter()
        .map(|c| {
            (0..c.spec.num_edges())
                .map(|_| OpKind::from_index(rng.gen_range(0..NUM_OPS)).expect("op index"))
                .collect()
        })
        .collect();
    Genotype::from_ops(layout.fingerprint(), ops)
}

/// `n` valid genotypes by rejection sampling; setting B also rejects
/// genotypes whose LUT latency exceeds `budget` (µs).
pub fn random_search(
    setting: RandomSetting,
    n: usize,
    slices: &[Tensor],
    layout: &NetworkLayout,
    budget: Option<f64>,
    seed: u64,
) -> Result<Vec<Genotype>> {
    if n == 0 {
        return Err(invalid("random search needs n >= 1"));
    }
    let budget = match (setting, budget) {
        (RandomSetting::B, None) => return Err(invalid("setting b needs a latency budget")),
        (RandomSetting::B, Some(b)) => Some(b),
        (RandomSetting::A, _) => None,
    };
    let mut rng = seeds::stream(seed, "random-search");
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let mut attempts = 0usize;
        loop {
            if attempts == REJECTION_CAP {
                return Err(Error::InfeasibleBudget {
                    budget: budget.unwrap_or(f64::INFINITY),
                    attempts,
                });
            }
            attempts += 1;
            let g = draw(layout, &mut rng);
            if !validate_genotype(&g, layout).is_empty() {
                continue;
            }
            if let Some(b) = budget {
                if genotype_latency(&g, slices)? > b {
                    continue;
                }
            }
            out.push(g);
            break;
        }
    }
    Ok(out)
}
