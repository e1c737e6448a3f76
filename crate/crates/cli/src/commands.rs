use std::fmt::Write as _;
use std::path::Path;

use gas_core::arch_space::{
    self, build_network_layout, export_cell_dot, export_dot, op_census, validate_genotype, Genotype, NetworkLayout,
    OpKind,
};
use gas_core::bench::{evaluate, finetune, measure_fps, Confusion, EvalReport, SegmentationSource, Split};
use gas_core::error::Error;
use gas_core::latency::{build_lut, genotype_latency, LutMode};
use gas_core::params::ParamStore;
use gas_core::relaxation::ArchParams;
use gas_core::search_engine::{
    derive_genotype, random_search, run_ablation, run_search_with, AblationSuite, RandomSetting, RunOptions,
    SearchConfig, SearchResult, StepMetrics,
};
use gas_core::supernet::Network;
use gas_core::tensor::Tensor;
use serde::Serialize;

use crate::failure::{CliResult, Failure};
use crate::manifest::RunManifest;
use crate::output::Outputs;
use crate::{plot, settings};
use crate::{
    AblateArgs, Cli, Command, DeriveArgs, DeriveFromArg, EvalArgs, LutAction, LutArgs, LutModeArg, RandomArgs,
    SearchArgs, SettingArg, SuiteArg, TrainArgs, VizArgs,
};

pub fn run(cli: &Cli) -> CliResult<()> {
    let (name, out_dir) = match &cli.command {
        Command::Lut {
            action: LutAction::Build(a),
        } => (
            "lut build",
            a.out.parent().map(Path::to_path_buf).unwrap_or_default(),
        ),
        Command::Search(a) => ("search", a.out.clone()),
        Command::Derive(a) => ("derive", a.out.clone()),
        Command::Train(a) => ("train", a.out.clone()),
        Command::Eval(a) => ("eval", a.out.clone()),
        Command::Ablate(a) => ("ablate", a.out.clone()),
        Command::Viz(a) => ("viz", a.out.clone()),
        Command::RandomBaseline(a) => ("random-baseline", a.out.clone()),
    };
    let mut m = RunManifest::new(name);
    let outcome = match &cli.command {
        Command::Lut {
            action: LutAction::Build(a),
        } => lut(a, &mut m),
        Command::Search(a) => search(a, &mut m),
        Command::Derive(a) => derive(a, &mut m),
        Command::Train(a) => train(a, &mut m),
        Command::Eval(a) => eval(a, &mut m),
        Command::Ablate(a) => ablate(a, &mut m),
        Command::Viz(a) => viz(a, &mut m),
        Command::RandomBaseline(a) => random_baseline(a, &mut m),
    };
    m.finish(&outcome);
    let path = cli
        .manifest
        .clone()
        .unwrap_or_else(|| out_dir.join("manifest.jsonl"));
    if let Err(e) = m.append(&path) {
        eprintln!("{}", serde_json::json!({ "warning": format!("manifest {}: {e}", path.display()) }));
    }
    outcome
}

fn record_config(m: &mut RunManifest, cfg: &SearchConfig) {
    m.config = serde_json::to_value(cfg).ok();
    m.seed = Some(cfg.seed);
}

fn progress(line: impl AsRef<str>) {
    eprintln!("{}", line.as_ref());
}

fn json_pretty<T: Serialize>(v: &T) -> CliResult<String> {
    Ok(serde_json::to_string_pretty(v)?)
}

/// Reads a genotype and checks it against `layout`, before any training.
fn read_genotype(path: &Path, layout: &NetworkLayout) -> CliResult<Genotype> {
    let g = arch_space::deserialize(&settings::read_text(path)?)?;
    let v = validate_genotype(&g, layout);
    if !v.is_empty() {
        return Err(Error::InvalidGenotype(v.iter().map(ToString::to_string).collect()).into());
    }
    Ok(g)
}

fn lut(a: &LutArgs, m: &mut RunManifest) -> CliResult<()> {
    let layout_cfg = match &a.layout {
        Some(p) => {
            m.inputs.push(p.clone());
            settings::read_layout(p)?
        }
        None => {
            let cfg = settings::validate(settings::resolve_unchecked(&a.cfg)?)?;
            record_config(m, &cfg);
            cfg.layout
        }
    };
    if let Some(p) = &a.cfg.config {
        m.inputs.push(p.clone());
    }
    let layout = build_network_layout(&layout_cfg)?;
    let mode = match a.mode {
        LutModeArg::Synthetic => LutMode::Synthetic,
        LutModeArg::Profiled => LutMode::Profiled,
    };
    let dir = a.out.parent().map(Path::to_path_buf).unwrap_or_default();
    let file = a
        .out
        .file_name()
        .ok_or_else(|| Failure::usage("--out must name a file"))?
        .to_string_lossy()
        .into_owned();
    let mut out = Outputs::prepare(&dir, &[&file], a.force)?;
    let table = build_lut(&layout, mode, a.trials)?;
    progress(format!(
        "lut: {} entries, mode {mode}, hardware {:?}",
        table.entries().len(),
        table.hardware
    ));
    out.write(&file, table.to_json())?;
    m.outputs.extend_from_slice(out.written());
    Ok(())
}

const SEARCH_OUTPUTS: [&str; 6] = [
    "genotype.json",
    "result.json",
    "trajectory.csv",
    "loss.svg",
    "latency.svg",
    "config.toml",
];

fn trajectory_csv(t: &[StepMetrics]) -> String {
    let mut s = String::from("step,loss,ce,latency,latency_loss,temperature,entropy,weight_lr\n");
    for r in t {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.step, r.loss, r.ce, r.latency, r.latency_loss, r.temperature, r.entropy, r.weight_lr
        );
    }
    s
}

fn search(a: &SearchArgs, m: &mut RunManifest) -> CliResult<()> {
    let mut cfg = settings::resolve_unchecked(&a.cfg)?;
    if let Some(b) = a.beta {
        cfg.beta = b;
    }
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    let cfg = settings::validate(cfg)?;
    record_config(m, &cfg);
    m.inputs.push(a.lut.clone());
    m.inputs.extend(a.cfg.config.clone());
    let mut names = SEARCH_OUTPUTS.to_vec();
    if !a.resume {
        names.push("checkpoint");
    }
    let mut out = Outputs::prepare(&a.out, &names, a.force)?;
    let table = settings::read_lut(&a.lut)?;
    let missing = table.missing_entries(&settings::layout_of(&cfg)?);
    if !missing.is_empty() {
        return Err(Error::MissingLatency(missing.join(", ")).into());
    }
    let layout = settings::layout_of(&cfg)?;
    let data = settings::dataset(&a.cfg, &cfg, &layout)?;
    progress(format!(
        "search: {} steps, seed {}, beta {}, ggm {:?}, lut mode {}",
        cfg.steps, cfg.seed, cfg.beta, cfg.ggm.mode, table.mode
    ));
    let checkpoint = out.path("checkpoint");
    if a.force && !a.resume && checkpoint.exists() {
        std::fs::remove_dir_all(&checkpoint)?;
    }
    let options = RunOptions {
        checkpoint_dir: Some(checkpoint.clone()),
        resume: a.resume,
    };
    let every = (cfg.steps / 20).max(1);
    let total = cfg.steps;
    let result = run_search_with(&cfg, &data, &table, &options, &mut |s| {
        if (s.step + 1) % every == 0 || s.step + 1 == total {
            progress(format!(
                "step {}/{total} loss {:.4} ce {:.4} latency {:.2}us temperature {:.3}",
                s.step + 1,
                s.loss,
                s.ce,
                s.latency,
                s.temperature
            ));
        }
    })?;
    out.record(checkpoint);
    out.write("genotype.json", arch_space::serialize(&result.genotype))?;
    out.write("result.json", result.deterministic_json())?;
    out.write("trajectory.csv", trajectory_csv(&result.trajectory))?;
    out.write("config.toml", cfg.to_toml())?;
    let t = &result.trajectory;
    let series = |f: fn(&StepMetrics) -> f64| t.iter().map(|s| (s.step as f64, f(s))).collect::<Vec<_>>();
    plot::line_chart(
        &out.path("loss.svg"),
        "search loss",
        "step",
        "loss",
        &[
            ("total".into(), series(|s| s.loss)),
            ("cross-entropy".into(), series(|s| s.ce)),
        ],
    )?;
    out.record(out.path("loss.svg"));
    plot::line_chart(
        &out.path("latency.svg"),
        "expected latency",
        "step",
        "latency (us)",
        &[("expected latency".into(), series(|s| s.latency))],
    )?;
    out.record(out.path("latency.svg"));
    progress(format!(
        "search done in {:.1}s: expected latency {:.2}us, genotype latency {:.2}us",
        result.wall_clock_secs, result.final_expected_latency, result.genotype_latency
    ));
    m.outputs.extend_from_slice(out.written());
    Ok(())
}

fn derive(a: &DeriveArgs, m: &mut RunManifest) -> CliResult<()> {
    m.inputs.push(a.result.clone());
    let mut out = Outputs::prepare(&a.out, &["genotype.json"], a.force)?;
    let result: SearchResult = serde_json::from_str(&settings::read_text(&a.result)?)
        .map_err(|e| Error::Parse(format!("{}: {e}", a.result.display())))?;
    record_config(m, &result.config);
    let layout = build_network_layout(&result.config.layout)?;
    let nested = match a.from {
        DeriveFromArg::Updated => &result.arch_updated,
        DeriveFromArg::Raw => &result.arch,
    };
    let cells = nested
        .iter()
        .map(|rows| {
            let q = rows.first().map_or(0, Vec::len);
            if rows.iter().any(|r| r.len() != q) {
                return Err(Error::Parse("ragged architecture logits".into()));
            }
            Ok(Tensor::new(&[rows.len(), q], rows.concat()))
        })
        .collect::<Result<Vec<_>, Error>>()?;
    let arch = ArchParams::from_cells(cells)?;
    if arch.num_cells() != layout.num_cells() || arch.num_edges() != layout.edges_per_cell() {
        return Err(Error::Shape("architecture logits do not match the result's layout".into()).into());
    }
    let g = derive_genotype(&arch, &layout);
    out.write("genotype.json", arch_space::serialize(&g))?;
    m.outputs.extend_from_slice(out.written());
    Ok(())
}

/// Table 1 rows quoted as metadata; nothing here is measured.
const REFERENCE_ROWS: [(&str, &str, f64, f64, f64); 2] = [
    ("GAS", "769x1537", 71.8, 9.22, 108.4),
    ("GAS*", "769x1537", 73.5, 9.22, 108.4),
];
const REFERENCE_NOTE: &str = "paper-reported, not reproduced";

#[derive(Serialize)]
struct ReferenceRow {
    method: &'static str,
    input_size: &'static str,
    miou_percent: f64,
    latency_ms: f64,
    fps: f64,
    note: &'static str,
}

#[derive(Serialize)]
struct ReportFile<'a> {
    method: &'a str,
    report: &'a EvalReport,
    genotype_latency_us: Option<f64>,
    reference: Vec<ReferenceRow>,
}

fn report_json(method: &str, report: &EvalReport, genotype_latency_us: Option<f64>) -> CliResult<String> {
    let reference = REFERENCE_ROWS
        .iter()
        .map(|&(method, input_size, miou_percent, latency_ms, fps)| ReferenceRow {
            method,
            input_size,
            miou_percent,
            latency_ms,
            fps,
            note: REFERENCE_NOTE,
        })
        .collect();
    json_pretty(&ReportFile {
        method,
        report,
        genotype_latency_us,
        reference,
    })
}

fn report_markdown(method: &str, report: &EvalReport) -> String {
    let mut s = String::from(
        "| Method | Input Size | mIoU (%) | Latency (ms) | FPS | Note |\n|---|---|---|---|---|---|\n",
    );
    let [h, w] = report.input_size;
    let _ = writeln!(
        s,
        "| {method} | {h}x{w} | {:.1} | {:.3} | {:.1} | measured, toy benchmark, this host |",
        report.miou * 100.0,
        report.latency_ms,
        report.fps
    );
    for (m, size, miou, lat, fps) in REFERENCE_ROWS {
        let _ = writeln!(s, "| {m} | {size} | {miou:.1} | {lat:.2} | {fps:.1} | {REFERENCE_NOTE} |");
    }
    s.push_str("\nPer-class IoU:\n\n| class | IoU |\n|---|---|\n");
    for (c, iou) in report.per_class_iou.iter().enumerate() {
        let v = iou.map_or("-".to_string(), |x| format!("{x:.4}"));
        let _ = writeln!(s, "| {c} | {v} |");
    }
    s
}

fn train(a: &TrainArgs, m: &mut RunManifest) -> CliResult<()> {
    let mut cfg = settings::resolve_unchecked(&a.cfg)?;
    if let Some(e) = a.epochs {
        cfg.finetune.epochs = e;
    }
    let cfg = settings::validate(cfg)?;
    record_config(m, &cfg);
    m.inputs.push(a.genotype.clone());
    let layout = settings::layout_of(&cfg)?;
    let g = read_genotype(&a.genotype, &layout)?;
    let mut out = Outputs::prepare(
        &a.out,
        &["weights.bin", "report.json", "report.md", "loss.svg", "config.toml"],
        a.force,
    )?;
    let data = settings::dataset(&a.cfg, &cfg, &layout)?;
    progress(format!(
        "train: {} epochs, seed {}, {} finetune samples",
        cfg.finetune.epochs,
        cfg.finetune.seed,
        data.split(Split::Finetune).len()
    ));
    let result = finetune(&g, &layout, &data, &cfg.finetune)?;
    out.write("weights.bin", result.network.state().encode())?;
    out.write("report.json", report_json("this run", &result.report, None)?)?;
    out.write("report.md", report_markdown("this run", &result.report))?;
    out.write("config.toml", cfg.to_toml())?;
    let losses: Vec<(f64, f64)> = result.losses.iter().enumerate().map(|(i, &l)| (i as f64, l)).collect();
    plot::line_chart(&out.path("loss.svg"), "finetune loss", "iteration", "loss", &[("loss".into(), losses)])?;
    out.record(out.path("loss.svg"));
    progress(format!(
        "train done: mIoU {:.4}, latency {:.3}ms, {:.1} FPS",
        result.report.miou, result.report.latency_ms, result.report.fps
    ));
    m.outputs.extend_from_slice(out.written());
    Ok(())
}

fn eval(a: &EvalArgs, m: &mut RunManifest) -> CliResult<()> {
    let cfg = settings::validate(settings::resolve_unchecked(&a.cfg)?)?;
    record_config(m, &cfg);
    m.inputs.push(a.genotype.clone());
    m.inputs.extend(a.weights.clone());
    let layout = settings::layout_of(&cfg)?;
    let g = read_genotype(&a.genotype, &layout)?;
    let mut out = Outputs::prepare(&a.out, &["report.json", "report.md"], a.force)?;
    let data = settings::dataset(&a.cfg, &cfg, &layout)?;
    let test = data.split(Split::Test);
    let mut net = Network::derived(&layout, &g, cfg.finetune.seed)?;
    let (method, confusion) = if a.oracle {
        let mut c = Confusion::new(data.num_classes());
        for s in test {
            c.accumulate(&s.mask, &s.mask)?;
        }
        ("ground-truth oracle", c)
    } else {
        let path = a.weights.as_ref().expect("clap requires --weights without --oracle");
        net.load_state(&ParamStore::load(path)?)?;
        ("this run", evaluate(&net, test, data.num_classes(), cfg.finetune.batch_size)?)
    };
    let (latency_ms, _) = measure_fps(&net, layout.input_size, a.trials)?;
    let report = EvalReport::new(confusion, latency_ms, layout.input_size)?;
    out.write("report.json", report_json(method, &report, None)?)?;
    out.write("report.md", report_markdown(method, &report))?;
    progress(format!("eval: mIoU {:.4}, {:.1} FPS", report.miou, report.fps));
    m.outputs.extend_from_slice(out.written());
    Ok(())
}

fn ablate(a: &AblateArgs, m: &mut RunManifest) -> CliResult<()> {
    let suite = match a.suite {
        SuiteArg::Ggm => AblationSuite::GgmVsFcVsIndependent,
        SuiteArg::D => AblationSuite::DSweep,
        SuiteArg::Graph => AblationSuite::GraphKind,
        SuiteArg::Beta => AblationSuite::BetaSweep,
    };
    let cfg = settings::validate(settings::resolve_unchecked(&a.cfg)?)?;
    record_config(m, &cfg);
    m.inputs.push(a.lut.clone());
    let retrain = !a.no_retrain;
    let mut names = vec!["report.json", "table.md", "latency.svg"];
    if retrain {
        names.push("miou.svg");
    }
    let mut out = Outputs::prepare(&a.out, &names, a.force)?;
    let table = settings::read_lut(&a.lut)?;
    let layout = settings::layout_of(&cfg)?;
    let data = settings::dataset(&a.cfg, &cfg, &layout)?;
    progress(format!(
        "ablate {}: {} variants x {} seeds, retrain {retrain}",
        suite.name(),
        suite.variants(&cfg).len(),
        a.seeds.len()
    ));
    let report = run_ablation(suite, &a.seeds, &cfg, &data, &table, retrain, &mut |label, seed, run| {
        let miou = run.miou.map_or("-".to_string(), |x| format!("{x:.4}"));
        progress(format!(
            "{label} seed {seed}: expected latency {:.2}us, mIoU {miou}",
            run.expected_latency
        ));
    })?;
    out.write("report.json", json_pretty(&report)?)?;
    out.write("table.md", report.to_table())?;
    let bars = |f: &dyn Fn(&gas_core::search_engine::AblationRow) -> Option<(f64, f64)>| {
        report
            .rows
            .iter()
            .filter_map(|r| f(r).map(|(mean, var)| (r.label.clone(), mean, Some(var.sqrt()))))
            .collect::<Vec<_>>()
    };
    plot::bar_chart(
        &out.path("latency.svg"),
        &format!("{}: expected latency", suite.name()),
        "latency (us)",
        &bars(&|r| Some((r.mean_latency, r.var_latency))),
    )?;
    out.record(out.path("latency.svg"));
    if retrain {
        plot::bar_chart(
            &out.path("miou.svg"),
            &format!("{}: test mIoU", suite.name()),
            "mIoU",
            &bars(&|r| r.mean_miou.zip(r.var_miou)),
        )?;
        out.record(out.path("miou.svg"));
    }
    m.outputs.extend_from_slice(out.written());
    Ok(())
}

fn renderer_available() -> bool {
    std::process::Command::new("dot")
        .arg("-V")
        .output()
        .is_ok_and(|o| o.status.success())
}

fn census_markdown(c: &arch_space::OpCensus) -> String {
    let mut s = String::from(
        "| cell | stage | lightweight | large receptive field (dilation >= 4) | parameterized | pruned |\n|---|---|---|---|---|---|\n",
    );
    for r in &c.per_cell {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} | {} |",
            r.cell, r.stage, r.lightweight, r.large_receptive_field, r.parameterized, r.pruned
        );
    }
    let _ = writeln!(
        s,
        "\nTotal: {} lightweight (parameterless), {} large receptive field.\n\n| op | count |\n|---|---|",
        c.lightweight, c.large_receptive_field
    );
    for (op, n) in &c.per_op {
        let _ = writeln!(s, "| {} | {n} |", op.name());
    }
    s
}

fn viz(a: &VizArgs, m: &mut RunManifest) -> CliResult<()> {
    let cfg = settings::validate(settings::resolve_unchecked(&a.cfg)?)?;
    record_config(m, &cfg);
    m.inputs.push(a.genotype.clone());
    let layout = settings::layout_of(&cfg)?;
    let g = read_genotype(&a.genotype, &layout)?;
    let cell_files: Vec<String> = (0..layout.num_cells()).map(|k| format!("cell_{k}.dot")).collect();
    let mut names: Vec<&str> = vec!["network.dot", "census.json", "census.md"];
    names.extend(cell_files.iter().map(String::as_str));
    let mut out = Outputs::prepare(&a.out, &names, a.force)?;
    let mut dots = vec![out.write("network.dot", export_dot(&g, &layout))?];
    for (k, name) in cell_files.iter().enumerate() {
        let text = export_cell_dot(&g, &layout, k).expect("validated genotype has every cell");
        dots.push(out.write(name, text)?);
    }
    let census = op_census(&g, &layout);
    out.write("census.json", json_pretty(&census)?)?;
    out.write("census.md", census_markdown(&census))?;
    if renderer_available() {
        for dot in &dots {
            let svg = dot.with_extension("svg");
            let status = std::process::Command::new("dot")
                .arg("-Tsvg")
                .arg(dot)
                .arg("-o")
                .arg(&svg)
                .status()?;
            if !status.success() {
                return Err(Failure::runtime(format!("dot failed on {}", dot.display())));
            }
            out.record(svg);
        }
    } else {
        eprintln!(
            "{}",
            serde_json::json!({ "warning": "graphviz `dot` not found; wrote DOT files only" })
        );
    }
    progress(format!(
        "viz: {} lightweight, {} large receptive field ops",
        census.lightweight, census.large_receptive_field
    ));
    m.outputs.extend_from_slice(out.written());
    Ok(())
}

#[derive(Serialize)]
struct RandomEntry {
    genotype: Genotype,
    latency_us: f64,
}

#[derive(Serialize)]
struct RandomSummary {
    setting: RandomSetting,
    n: usize,
    budget_us: Option<f64>,
    seed: u64,
    mean_latency_us: f64,
    max_latency_us: f64,
    /// Fraction of sampled edges that are `zero`.
    zero_fraction: f64,
}

fn random_baseline(a: &RandomArgs, m: &mut RunManifest) -> CliResult<()> {
    let cfg = settings::validate(settings::resolve_unchecked(&a.cfg)?)?;
    record_config(m, &cfg);
    m.inputs.push(a.lut.clone());
    let setting = match a.setting {
        SettingArg::A => RandomSetting::A,
        SettingArg::B => RandomSetting::B,
    };
    let mut out = Outputs::prepare(&a.out, &["genotypes.json", "summary.json"], a.force)?;
    let layout = settings::layout_of(&cfg)?;
    let slices = settings::read_lut(&a.lut)?.slices(&layout)?;
    let gs = random_search(setting, a.n, &slices, &layout, a.budget, cfg.seed)?;
    let entries = gs
        .into_iter()
        .map(|g| {
            Ok(RandomEntry {
                latency_us: genotype_latency(&g, &slices)?,
                genotype: g,
            })
        })
        .collect::<Result<Vec<_>, Error>>()?;
    let lats: Vec<f64> = entries.iter().map(|e| e.latency_us).collect();
    let edges: usize = entries.iter().map(|e| e.genotype.ops().count()).sum();
    let zeros: usize = entries
        .iter()
        .map(|e| e.genotype.ops().filter(|&o| o == OpKind::Zero).count())
        .sum();
    let summary = RandomSummary {
        setting,
        n: a.n,
        budget_us: a.budget,
        seed: cfg.seed,
        mean_latency_us: lats.iter().sum::<f64>() / lats.len() as f64,
        max_latency_us: lats.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        zero_fraction: zeros as f64 / edges.max(1) as f64,
    };
    out.write("genotypes.json", json_pretty(&entries)?)?;
    out.write("summary.json", json_pretty(&summary)?)?;
    progress(format!(
        "random-baseline: {} genotypes, mean latency {:.2}us",
        a.n, summary.mean_latency_us
    ));
    m.outputs.extend_from_slice(out.written());
    Ok(())
}
