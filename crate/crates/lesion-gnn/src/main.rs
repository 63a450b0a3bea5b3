//! Command-line runner: cohort generation, cross-validated training,
//! hyperparameter sweeps, and per-lesion explanation export.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use lesion_gnn::cohort::{
    cohort_stats, generate_cohort, load_cohort, records_to_graphs, save_cohort, CohortSpec, Task,
};
use lesion_gnn::eval::{cross_validate, sweep, SweepAxis};
use lesion_gnn::graph::{LesionGraph, Region};
use lesion_gnn::layers::{GraphContext, LayerKind};
use lesion_gnn::model::{load_checkpoint, predict, save_checkpoint, Arch, ModelConfig};
use lesion_gnn::train::{OptimConfig, TrainConfig};
use lesion_gnn::{Error, Result};

#[derive(Parser)]
#[command(name = "lesion-gnn", version, about = "Lesion-graph classification engine")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic cohort as JSONL
    Generate(GenerateArgs),
    /// Ten-fold cross-validated training
    Cv(CvArgs),
    /// One-axis hyperparameter sweep, cross-validated per value
    Sweep(SweepArgs),
    /// Export per-lesion scores and region histograms from a checkpoint
    Explain(ExplainArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Output JSONL path; a spec.json sidecar is written next to it
    #[arg(long)]
    out: PathBuf,
    /// Spec overrides as key=value (n_patients, positive_fraction,
    /// lesion_min, lesion_max, feature_dim, signal_fraction,
    /// signal_strength, region_priors=a,b,c,d)
    #[arg(long = "spec", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ModelArgs {
    /// Cohort JSONL path
    #[arg(long)]
    cohort: PathBuf,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Prediction horizon
    #[arg(long, default_value = "1y")]
    task: String,
    /// Message-passing layer: gcn | sage | edge | gat
    #[arg(long, default_value = "gcn")]
    layer: String,
    /// Architecture: graph | setproc (setproc ignores edges)
    #[arg(long, default_value = "graph")]
    arch: String,
    /// Disable the self-pruning module
    #[arg(long = "no-spm")]
    no_spm: bool,
    /// SPM retention ratio
    #[arg(long, default_value_t = 0.5)]
    r: f64,
    /// Neighbors per node in the kNN graph
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// Gaussian edge-weight bandwidth
    #[arg(long, default_value_t = 0.01)]
    tau: f64,
    #[arg(long, default_value_t = 300)]
    epochs: usize,
    #[arg(long = "batch-size", default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long = "weight-decay", default_value_t = 1e-4)]
    weight_decay: f64,
    #[arg(long, default_value_t = 0.5)]
    dropout: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Cap on concurrent folds / sweep points
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct CvArgs {
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Sweep axis: r | k | tau | layers | spm | layer_kind
    #[arg(long)]
    axis: String,
    /// Value grid: comma list ("0.25,0.5") or range ("0.1..1.0:0.1",
    /// "1..10")
    #[arg(long)]
    values: String,
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long)]
    cohort: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "1y")]
    task: String,
    /// Patient ids to explain (default: every patient)
    #[arg(long, value_delimiter = ',')]
    patients: Vec<String>,
    #[arg(long)]
    jobs: Option<usize>,
}

fn main() {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Generate(a) => cmd_generate(a),
        Cmd::Cv(a) => cmd_cv(a),
        Cmd::Sweep(a) => cmd_sweep(a),
        Cmd::Explain(a) => cmd_explain(a),
    };
    if let Err(e) = res {
        eprintln!("error: {e}");
        let code = match e {
            Error::Param(_) | Error::Usage(_) => 2,
            _ => 1,
        };
        std::process::exit(code);
    }
}

fn apply_override(spec: &mut CohortSpec, kv: &str) -> Result<()> {
    let (k, v) = kv
        .split_once('=')
        .ok_or_else(|| Error::Usage(format!("expected KEY=VALUE, got '{kv}'")))?;
    macro_rules! bad {
        () => {
            |_| Error::Usage(format!("invalid value '{v}' for spec key '{k}'"))
        };
    }
    match k {
        "n_patients" => spec.n_patients = v.parse().map_err(bad!())?,
        "positive_fraction" => spec.positive_fraction = v.parse().map_err(bad!())?,
        "lesion_min" => spec.lesion_count_range.0 = v.parse().map_err(bad!())?,
        "lesion_max" => spec.lesion_count_range.1 = v.parse().map_err(bad!())?,
        "feature_dim" => spec.feature_dim = v.parse().map_err(bad!())?,
        "signal_fraction" => spec.signal_fraction = v.parse().map_err(bad!())?,
        "signal_strength" => spec.signal_strength = v.parse().map_err(bad!())?,
        "noise_sd" => spec.noise_sd = v.parse().map_err(bad!())?,
        "seed" => spec.seed = v.parse().map_err(bad!())?,
        "region_priors" => {
            let parts: Vec<f64> = v
                .split(',')
                .map(|p| p.parse().map_err(|_| Error::Usage(format!("bad prior '{p}'"))))
                .collect::<Result<_>>()?;
            let arr: [f64; 4] = parts
                .try_into()
                .map_err(|_| Error::Usage("region_priors needs 4 values".into()))?;
            spec.region_priors = arr;
        }
        other => return Err(Error::Usage(format!("unknown spec key '{other}'"))),
    }
    Ok(())
}

fn cmd_generate(args: GenerateArgs) -> Result<()> {
    let mut spec = CohortSpec { seed: args.seed, ..CohortSpec::default() };
    for kv in &args.overrides {
        apply_override(&mut spec, kv)?;
    }
    let records = generate_cohort(&spec)?;
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    save_cohort(&records, &args.out)?;
    let sidecar = args.out.with_file_name(format!(
        "{}.spec.json",
        args.out.file_stem().and_then(|s| s.to_str()).unwrap_or("cohort")
    ));
    std::fs::write(
        &sidecar,
        serde_json::to_string_pretty(&spec).map_err(|e| Error::Schema(e.to_string()))?,
    )?;
    let stats = cohort_stats(&records)?;
    println!(
        "wrote {} patients ({} positive, {} negative, {} lesions) to {}",
        stats.n_patients,
        stats.n_positive,
        stats.n_negative,
        stats.n_lesions,
        args.out.display()
    );
    Ok(())
}

fn init_jobs(jobs: Option<usize>) -> Result<()> {
    if let Some(n) = jobs {
        if n == 0 {
            return Err(Error::Param("--jobs must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Param(format!("cannot set --jobs: {e}")))?;
    }
    Ok(())
}

struct Resolved {
    graphs: Vec<LesionGraph>,
    mcfg: ModelConfig,
    tcfg: TrainConfig,
    ocfg: OptimConfig,
    task: Task,
}

fn resolve(args: &ModelArgs) -> Result<Resolved> {
    init_jobs(args.jobs)?;
    let task: Task = args.task.parse()?;
    let layer_kind: LayerKind = args.layer.parse()?;
    let arch = match args.arch.as_str() {
        "graph" => Arch::Graph,
        "setproc" => Arch::SetProc,
        other => return Err(Error::Usage(format!("unknown arch '{other}'"))),
    };
    let records = load_cohort(&args.cohort)?;
    let mut mcfg = ModelConfig {
        arch,
        layer_kind,
        r: args.r,
        k: args.k,
        tau: args.tau,
        dropout: args.dropout,
        use_spm: !args.no_spm,
        ..ModelConfig::default()
    };
    let graphs = records_to_graphs(&records, task, &mcfg.graph_config())?;
    mcfg.feature_dim = graphs[0].feature_dim();
    mcfg.validate()?;
    let tcfg = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch_size,
        balanced_sampling: true,
    };
    tcfg.validate()?;
    let ocfg = OptimConfig { lr: args.lr, weight_decay: args.weight_decay, ..OptimConfig::default() };
    Ok(Resolved { graphs, mcfg, tcfg, ocfg, task })
}

fn write_manifest(dir: &Path, command: &str, args: &ModelArgs, r: &Resolved) -> Result<()> {
    let manifest = serde_json::json!({
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "cohort": args.cohort.display().to_string(),
        "task": r.task.name(),
        "seed": args.seed,
        "model": r.mcfg,
        "train": {
            "epochs": r.tcfg.epochs,
            "batch_size": r.tcfg.batch_size,
            "balanced_sampling": r.tcfg.balanced_sampling,
        },
        "optim": {
            "lr": r.ocfg.lr,
            "weight_decay": r.ocfg.weight_decay,
            "beta1": r.ocfg.beta1,
            "beta2": r.ocfg.beta2,
            "eps": r.ocfg.eps,
        },
    });
    std::fs::write(
        dir.join("run.json"),
        serde_json::to_string_pretty(&manifest).map_err(|e| Error::Schema(e.to_string()))?,
    )?;
    Ok(())
}

fn cmd_cv(args: CvArgs) -> Result<()> {
    let r = resolve(&args.model)?;
    std::fs::create_dir_all(&args.model.out)?;
    let report = cross_validate(&r.graphs, &r.mcfg, &r.tcfg, &r.ocfg, args.model.seed)?;

    let mut folds_csv = String::from("fold,auc,precision,recall,f1\n");
    for f in &report.folds {
        folds_csv.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6}\n",
            f.fold, f.metrics.auc, f.metrics.precision, f.metrics.recall, f.metrics.f1
        ));
    }
    std::fs::write(args.model.out.join("folds.csv"), folds_csv)?;

    for f in &report.folds {
        save_checkpoint(&args.model.out.join(format!("fold{}.ckpt", f.fold)), &r.mcfg, &f.params)?;
        let mut hist = String::from("epoch,train_loss,val_auc\n");
        for e in &f.history {
            hist.push_str(&format!("{},{:.6},{:.6}\n", e.epoch, e.train_loss, e.val_auc));
        }
        std::fs::write(args.model.out.join(format!("history_fold{}.csv", f.fold)), hist)?;
    }
    write_manifest(&args.model.out, "cv", &args.model, &r)?;

    println!("AUC {:.3} ± {:.3}", report.mean.auc, report.std.auc);
    println!(
        "precision {:.3} ± {:.3}  recall {:.3} ± {:.3}  F1 {:.3} ± {:.3}",
        report.mean.precision,
        report.std.precision,
        report.mean.recall,
        report.std.recall,
        report.mean.f1,
        report.std.f1
    );
    Ok(())
}

/// Parse a value grid: "a,b,c", "lo..hi" (step 1), or "lo..hi:step".
fn parse_float_values(s: &str) -> Result<Vec<f64>> {
    let parse_one = |p: &str| -> Result<f64> {
        p.trim().parse().map_err(|_| Error::Usage(format!("bad value '{p}'")))
    };
    if let Some((range, step)) = s.split_once(':').map(|(r, st)| (r, Some(st))).or_else(|| {
        if s.contains("..") {
            Some((s, None))
        } else {
            None
        }
    }) {
        let (lo, hi) = range
            .split_once("..")
            .ok_or_else(|| Error::Usage(format!("bad range '{s}'")))?;
        let (lo, hi) = (parse_one(lo)?, parse_one(hi)?);
        let step = match step {
            Some(st) => parse_one(st)?,
            None => 1.0,
        };
        if step <= 0.0 || hi < lo {
            return Err(Error::Usage(format!("bad range '{s}'")));
        }
        let n = ((hi - lo) / step).round() as usize;
        let mut vals: Vec<f64> = (0..=n).map(|i| lo + i as f64 * step).collect();
        vals.retain(|&v| v <= hi + 1e-9);
        return Ok(vals);
    }
    s.split(',').map(parse_one).collect()
}

fn parse_axis(axis: &str, values: &str) -> Result<SweepAxis> {
    let as_usize = |vals: Vec<f64>| -> Result<Vec<usize>> {
        vals.into_iter()
            .map(|v| {
                if v.fract() == 0.0 && v >= 0.0 {
                    Ok(v as usize)
                } else {
                    Err(Error::Usage(format!("expected integer values, got {v}")))
                }
            })
            .collect()
    };
    match axis {
        "r" => Ok(SweepAxis::R(parse_float_values(values)?)),
        "tau" => Ok(SweepAxis::Tau(parse_float_values(values)?)),
        "k" => Ok(SweepAxis::K(as_usize(parse_float_values(values)?)?)),
        "layers" => Ok(SweepAxis::Layers(as_usize(parse_float_values(values)?)?)),
        "spm" => values
            .split(',')
            .map(|v| match v.trim() {
                "true" | "on" => Ok(true),
                "false" | "off" => Ok(false),
                other => Err(Error::Usage(format!("bad spm value '{other}'"))),
            })
            .collect::<Result<_>>()
            .map(SweepAxis::Spm),
        "layer_kind" | "layer" => values
            .split(',')
            .map(|v| v.trim().parse())
            .collect::<Result<_>>()
            .map(SweepAxis::LayerKind),
        other => Err(Error::Usage(format!(
            "unknown axis '{other}' (expected r, k, tau, layers, spm, layer_kind)"
        ))),
    }
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let r = resolve(&args.model)?;
    let axis = parse_axis(&args.axis, &args.values)?;
    std::fs::create_dir_all(&args.model.out)?;
    let points = sweep(&r.graphs, &r.mcfg, &r.tcfg, &r.ocfg, &axis, args.model.seed)?;

    let mut csv = String::from("axis,value,mean_auc,std_auc,mean_f1,std_f1\n");
    for p in &points {
        csv.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6}\n",
            axis.name(),
            p.label,
            p.report.mean.auc,
            p.report.std.auc,
            p.report.mean.f1,
            p.report.std.f1
        ));
        println!("{}={}: AUC {:.3} ± {:.3}", axis.name(), p.label, p.report.mean.auc, p.report.std.auc);
    }
    std::fs::write(args.model.out.join("sweep.csv"), csv)?;
    write_manifest(&args.model.out, "sweep", &args.model, &r)?;
    Ok(())
}

fn cmd_explain(args: ExplainArgs) -> Result<()> {
    init_jobs(args.jobs)?;
    let task: Task = args.task.parse()?;
    let (mcfg, params) = load_checkpoint(&args.checkpoint)?;
    let records = load_cohort(&args.cohort)?;
    let graphs = records_to_graphs(&records, task, &mcfg.graph_config())?;
    if graphs[0].feature_dim() != mcfg.feature_dim {
        return Err(Error::Schema(format!(
            "checkpoint expects feature dim {}, cohort has {}",
            mcfg.feature_dim,
            graphs[0].feature_dim()
        )));
    }
    let selected: Vec<&LesionGraph> = if args.patients.is_empty() {
        graphs.iter().collect()
    } else {
        let wanted: std::collections::BTreeSet<&str> =
            args.patients.iter().map(|s| s.as_str()).collect();
        let found: Vec<&LesionGraph> =
            graphs.iter().filter(|g| wanted.contains(g.patient_id.as_str())).collect();
        if found.len() != wanted.len() {
            let have: std::collections::BTreeSet<&str> =
                found.iter().map(|g| g.patient_id.as_str()).collect();
            let missing: Vec<&&str> = wanted.difference(&have).collect();
            return Err(Error::Input(format!("patients not in cohort: {missing:?}")));
        }
        found
    };

    std::fs::create_dir_all(&args.out)?;
    let mut pre: BTreeMap<&'static str, usize> = BTreeMap::new();
    let mut post: BTreeMap<&'static str, usize> = BTreeMap::new();
    let mut patients = Vec::with_capacity(selected.len());
    for g in &selected {
        let (prob, prune) = predict(&GraphContext::new(g), &params, &mcfg)?;
        let lesions: Vec<serde_json::Value> = g
            .lesions
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let retained = prune.retained.contains(&i);
                *pre.entry(l.region.name()).or_insert(0) += 1;
                if retained {
                    *post.entry(l.region.name()).or_insert(0) += 1;
                }
                serde_json::json!({
                    "score": prune.scores[i],
                    "retained": retained,
                    "pos": l.position,
                    "region": l.region.name(),
                })
            })
            .collect();
        patients.push(serde_json::json!({
            "id": g.patient_id,
            "label": g.label,
            "prob": prob,
            "retained_count": prune.retained.len(),
            "lesions": lesions,
        }));
    }
    let explanation = serde_json::json!({
        "checkpoint": args.checkpoint.display().to_string(),
        "task": task.name(),
        "patients": patients,
    });
    std::fs::write(
        args.out.join("explain.json"),
        serde_json::to_string_pretty(&explanation).map_err(|e| Error::Schema(e.to_string()))?,
    )?;

    let pre_total: usize = pre.values().sum();
    let post_total: usize = post.values().sum();
    let mut csv = String::from("region,pre_fraction,post_fraction\n");
    let mut out = std::io::stdout();
    for region in Region::ALL {
        let p = *pre.get(region.name()).unwrap_or(&0) as f64 / pre_total.max(1) as f64;
        let q = *post.get(region.name()).unwrap_or(&0) as f64 / post_total.max(1) as f64;
        csv.push_str(&format!("{},{:.6},{:.6}\n", region.name(), p, q));
        writeln!(out, "{}: {:.3} -> {:.3}", region.name(), p, q)?;
    }
    std::fs::write(args.out.join("regions.csv"), csv)?;
    Ok(())
}
