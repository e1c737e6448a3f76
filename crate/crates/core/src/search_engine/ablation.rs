use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::config::SearchConfig;
use super::search::run_search;
use crate::arch_space::{build_network_layout, Genotype};
use crate::bench::{finetune, FinetuneConfig, SegmentationSource};
use crate::error::{invalid, Result};
use crate::ggm::{MixerMode, ReasoningGraphKind};
use crate::latency::LatencyTable;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationSuite {
    /// GGM vs fully-connected mixer vs independent cells.
    GgmVsFcVsIndependent,
    /// GGM hidden width `d`.
    DSweep,
    /// Edge-similarity vs operation-identity reasoning graph.
    GraphKind,
    /// Latency weight `β`.
    BetaSweep,
}

pub const D_SWEEP: [usize; 5] = [16, 32, 64, 128, 256];
pub const BETA_SWEEP: [f64; 3] = [0.0005, 0.005, 0.05];

impl AblationSuite {
    pub const ALL: [AblationSuite; 4] = [
        AblationSuite::GgmVsFcVsIndependent,
        AblationSuite::DSweep,
        AblationSuite::GraphKind,
        AblationSuite::BetaSweep,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationSuite::GgmVsFcVsIndependent => "ggm",
            AblationSuite::DSweep => "d",
            AblationSuite::GraphKind => "graph",
            AblationSuite::BetaSweep => "beta",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.name() == name)
    }

    /// `(row label, config)` for every variant, derived from `base`.
    pub fn variants(self, base: &SearchConfig) -> Vec<(String, SearchConfig)> {
        let with = |f: &dyn Fn(&mut SearchConfig)| {
            let mut c = base.clone();
            f(&mut c);
            c
        };
        match self {
            AblationSuite::GgmVsFcVsIndependent => [
                ("ggm", MixerMode::Ggm),
                ("fully-connected", MixerMode::Fc),
                ("independent", MixerMode::Off),
            ]
            .into_iter()
            .map(|(label, mode)| (label.to_string(), with(&|c| c.ggm.mode = mode)))
            .collect(),
            AblationSuite::DSweep => D_SWEEP
                .into_iter()
                .map(|d| {
                    (
                        format!("d={d}"),
                        with(&|c| {
                            c.ggm.mode = MixerMode::Ggm;
                            c.ggm.d = d;
                        }),
                    )
                })
                .collect(),
            AblationSuite::GraphKind => [
                ("edge-similarity", ReasoningGraphKind::EdgeSimilarity),
                ("operation-identity", ReasoningGraphKind::OperationIdentity),
            ]
            .into_iter()
            .map(|(label, kind)| {
                (
                    label.to_string(),
                    with(&|c| {
                        c.ggm.mode = MixerMode::Ggm;
                        c.ggm.kind = kind;
                    }),
                )
            })
            .collect(),
            AblationSuite::BetaSweep => BETA_SWEEP
                .into_iter()
                .map(|b| (format!("beta={b}"), with(&|c| c.beta = b)))
                .collect(),
        }
    }
}

/// One search (and optional retraining) of one variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub seed: u64,
    pub genotype: Genotype,
    pub expected_latency: f64,
    pub genotype_latency: f64,
    pub miou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub runs: Vec<AblationRun>,
    pub mean_miou: Option<f64>,
    pub var_miou: Option<f64>,
    pub mean_latency: f64,
    pub var_latency: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub suite: AblationSuite,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

/// Mean and sample variance (`n - 1` denominator; 0 for a single value).
pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

impl AblationRow {
    fn from_runs(label: String, runs: Vec<AblationRun>) -> Self {
        let lat: Vec<f64> = runs.iter().map(|r| r.expected_latency).collect();
        let (mean_latency, var_latency) = mean_var(&lat);
        let mious: Option<Vec<f64>> = runs.iter().map(|r| r.miou).collect();
        let (mean_miou, var_miou) = match mious {
            Some(m) => {
                let (a, b) = mean_var(&m);
                (Some(a), Some(b))
            }
            None => (None, None),
        };
        Self {
            label,
            runs,
            mean_miou,
            var_miou,
            mean_latency,
            var_latency,
        }
    }
}

impl AblationReport {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Markdown table: one row per variant.
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "| {} | mean mIoU | var mIoU | mean latency (us) | var latency |\n|---|---|---|---|---|\n",
            self.suite.name()
        );
        let fmt = |v: Option<f64>, digits: usize| v.map_or("-".to_string(), |x| format!("{x:.digits$}"));
        for r in &self.rows {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {:.2} | {:.3} |",
                r.label,
                fmt(r.mean_miou, 4),
                fmt(r.var_miou, 6),
                r.mean_latency,
                r.var_latency
            );
        }
        s
    }
}

/// Runs every variant of `suite` for every seed; with `retrain` each derived
/// genotype is also finetuned and scored on the test split.
pub fn run_ablation(
    suite: AblationSuite,
    seeds: &[u64],
    base: &SearchConfig,
    data: &dyn SegmentationSource,
    lut: &LatencyTable,
    retrain: bool,
    progress: &mut dyn FnMut(&str, u64, &AblationRun),
) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(invalid("an ablation needs at least one seed"));
    }
    let mut rows = Vec::new();
    for (label, cfg) in suite.variants(base) {
        let layout = build_network_layout(&cfg.layout)?;
        let mut runs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let cfg = SearchConfig { seed, ..cfg.clone() };
            let result = run_search(&cfg, data, lut)?;
            let miou = if retrain {
                let ft = FinetuneConfig {
                    seed,
                    ..cfg.finetune.clone()
                };
                Some(finetune(&result.genotype, &layout, data, &ft)?.report.miou)
            } else {
                None
            };
            let run = AblationRun {
                seed,
                genotype: result.genotype,
                expected_latency: result.final_expected_latency,
                genotype_latency: result.genotype_latency,
                miou,
            };
            progress(&label, seed, &run);
            runs.push(run);
        }
        rows.push(AblationRow::from_runs(label, runs));
    }
    Ok(AblationReport {
        suite,
        seeds: seeds.to_vec(),
        rows,
    })
}
