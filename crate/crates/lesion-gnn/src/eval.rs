//! Metrics (midrank ROC AUC, precision/recall/F1), stratified 10-fold
//! cross-validation, and one-axis hyperparameter sweeps.

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::graph::{build_graph, LesionGraph};
use crate::layers::{GraphContext, LayerKind};
use crate::model::{predict, ModelConfig, ModelParams};
use crate::rng::{derive_seed, substream};
use crate::train::{train_fold, EpochStats, OptimConfig, TrainConfig};
use crate::{Error, Result};

pub const N_FOLDS: usize = 10;

/// ROC AUC by the rank-sum (Mann-Whitney) statistic with midranks for ties,
/// so tied score pairs count 0.5.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Input("scores and labels differ in length".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Degenerate("AUC needs both classes present".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("non-finite score passed to roc_auc".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    // midranks: tied scores all get the average of their 1-based ranks
    let mut rank = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            rank[idx] = mid;
        }
        i = j + 1;
    }
    let rank_sum: f64 =
        labels.iter().zip(&rank).filter(|(&l, _)| l == 1).map(|(_, &r)| r).sum();
    Ok((rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0) / (n_pos * n_neg) as f64)
}

/// Threshold scores at 0.5 and report precision, recall, and F1. With no
/// predicted positives the precision is defined as 0 (likewise recall with
/// no actual positives), and F1 is 0 whenever precision + recall is 0.
pub fn precision_recall_f1(scores: &[f64], labels: &[u8]) -> Result<(f64, f64, f64)> {
    if scores.len() != labels.len() {
        return Err(Error::Input("scores and labels differ in length".into()));
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        let pred = s >= 0.5;
        match (pred, l == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok((precision, recall, f1))
}

/// Index sets of one cross-validation fold.
#[derive(Clone, Debug)]
pub struct FoldSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratified 10-fold splits: each class is shuffled and dealt round-robin
/// into 10 partitions; fold i tests on partition i, validates on partition
/// (i+1) % 10, and trains on the rest (roughly 80/10/10).
pub fn make_folds(labels: &[u8], seed: u64) -> Result<Vec<FoldSplit>> {
    if labels.len() < 2 * N_FOLDS {
        return Err(Error::Input(format!(
            "cross-validation needs at least {} patients, got {}",
            2 * N_FOLDS,
            labels.len()
        )));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos < N_FOLDS || n_neg < N_FOLDS {
        return Err(Error::Degenerate(format!(
            "each class needs at least {N_FOLDS} patients for stratified folds \
             (got {n_pos} positive, {n_neg} negative)"
        )));
    }
    let mut rng = substream(seed, "folds", 0);
    let mut partitions: Vec<Vec<usize>> = vec![vec![]; N_FOLDS];
    for class in [1u8, 0u8] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        for (j, i) in idx.into_iter().enumerate() {
            partitions[j % N_FOLDS].push(i);
        }
    }
    Ok((0..N_FOLDS)
        .map(|f| {
            let test = partitions[f].clone();
            let val = partitions[(f + 1) % N_FOLDS].clone();
            let train = (0..N_FOLDS)
                .filter(|&p| p != f && p != (f + 1) % N_FOLDS)
                .flat_map(|p| partitions[p].iter().copied())
                .collect();
            FoldSplit { train, val, test }
        })
        .collect())
}

/// Test-set metrics of one fold.
#[derive(Clone, Copy, Debug)]
pub struct Metrics {
    pub auc: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Everything produced by one fold: checkpointed parameters, training
/// history, and held-out metrics.
pub struct FoldOutcome {
    pub fold: usize,
    pub metrics: Metrics,
    pub best_epoch: usize,
    pub best_val_auc: f64,
    pub history: Vec<EpochStats>,
    pub params: ModelParams,
    pub test_ids: Vec<String>,
}

pub struct CvReport {
    pub folds: Vec<FoldOutcome>,
    pub mean: Metrics,
    /// Sample (n-1) standard deviation across folds.
    pub std: Metrics,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn summarize(folds: &[FoldOutcome]) -> (Metrics, Metrics) {
    let pick = |f: fn(&Metrics) -> f64| -> (f64, f64) {
        let vals: Vec<f64> = folds.iter().map(|o| f(&o.metrics)).collect();
        mean_std(&vals)
    };
    let (auc_m, auc_s) = pick(|m| m.auc);
    let (p_m, p_s) = pick(|m| m.precision);
    let (r_m, r_s) = pick(|m| m.recall);
    let (f_m, f_s) = pick(|m| m.f1);
    (
        Metrics { auc: auc_m, precision: p_m, recall: r_m, f1: f_m },
        Metrics { auc: auc_s, precision: p_s, recall: r_s, f1: f_s },
    )
}

fn eval_on(graphs: &[&LesionGraph], params: &ModelParams, cfg: &ModelConfig) -> Result<Metrics> {
    let scores: Vec<f64> = graphs
        .iter()
        .map(|g| predict(&GraphContext::new(g), params, cfg).map(|(p, _)| p))
        .collect::<Result<_>>()?;
    let labels: Vec<u8> = graphs.iter().map(|g| g.label).collect();
    let auc = roc_auc(&scores, &labels)?;
    let (precision, recall, f1) = precision_recall_f1(&scores, &labels)?;
    Ok(Metrics { auc, precision, recall, f1 })
}

/// Run stratified 10-fold cross-validation. Folds train in parallel; fold i
/// uses the RNG substream derived from (seed, "fold", i), so the result is
/// independent of scheduling.
pub fn cross_validate(
    graphs: &[LesionGraph],
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    ocfg: &OptimConfig,
    seed: u64,
) -> Result<CvReport> {
    let labels: Vec<u8> = graphs.iter().map(|g| g.label).collect();
    let splits = make_folds(&labels, seed)?;
    let mut folds: Vec<FoldOutcome> = splits
        .par_iter()
        .enumerate()
        .map(|(f, split)| -> Result<FoldOutcome> {
            let train: Vec<&LesionGraph> = split.train.iter().map(|&i| &graphs[i]).collect();
            let val: Vec<&LesionGraph> = split.val.iter().map(|&i| &graphs[i]).collect();
            let test: Vec<&LesionGraph> = split.test.iter().map(|&i| &graphs[i]).collect();
            let out = train_fold(&train, &val, mcfg, tcfg, ocfg, derive_seed(seed, "fold", f as u64))?;
            let metrics = eval_on(&test, &out.best, mcfg)?;
            Ok(FoldOutcome {
                fold: f,
                metrics,
                best_epoch: out.best_epoch,
                best_val_auc: out.best_val_auc,
                history: out.history,
                params: out.best,
                test_ids: test.iter().map(|g| g.patient_id.clone()).collect(),
            })
        })
        .collect::<Result<_>>()?;
    folds.sort_by_key(|o| o.fold);
    let (mean, std) = summarize(&folds);
    Ok(CvReport { folds, mean, std })
}

/// One sweep axis with its value grid.
#[derive(Clone, Debug)]
pub enum SweepAxis {
    R(Vec<f64>),
    K(Vec<usize>),
    Tau(Vec<f64>),
    Layers(Vec<usize>),
    Spm(Vec<bool>),
    LayerKind(Vec<LayerKind>),
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::R(_) => "r",
            SweepAxis::K(_) => "k",
            SweepAxis::Tau(_) => "tau",
            SweepAxis::Layers(_) => "layers",
            SweepAxis::Spm(_) => "spm",
            SweepAxis::LayerKind(_) => "layer_kind",
        }
    }

    pub fn labels(&self) -> Vec<String> {
        match self {
            SweepAxis::R(v) => v.iter().map(|x| format!("{x}")).collect(),
            SweepAxis::K(v) => v.iter().map(|x| format!("{x}")).collect(),
            SweepAxis::Tau(v) => v.iter().map(|x| format!("{x}")).collect(),
            SweepAxis::Layers(v) => v.iter().map(|x| format!("{x}")).collect(),
            SweepAxis::Spm(v) => v.iter().map(|x| format!("{x}")).collect(),
            SweepAxis::LayerKind(v) => v.iter().map(|x| x.name().to_string()).collect(),
        }
    }

    fn len(&self) -> usize {
        match self {
            SweepAxis::R(v) => v.len(),
            SweepAxis::K(v) => v.len(),
            SweepAxis::Tau(v) => v.len(),
            SweepAxis::Layers(v) => v.len(),
            SweepAxis::Spm(v) => v.len(),
            SweepAxis::LayerKind(v) => v.len(),
        }
    }
}

/// Hidden-dim chain for an enrichment depth: the final layer is always 8
/// wide and each extra layer prepends a 64-wide one.
pub fn layers_to_hidden_dims(n_layers: usize) -> Result<Vec<usize>> {
    if n_layers == 0 {
        return Err(Error::Param("layer count must be >= 1".into()));
    }
    let mut dims = vec![64; n_layers - 1];
    dims.push(8);
    Ok(dims)
}

fn apply_axis(base: &ModelConfig, axis: &SweepAxis, i: usize) -> Result<ModelConfig> {
    let mut cfg = base.clone();
    match axis {
        SweepAxis::R(v) => cfg.r = v[i],
        SweepAxis::K(v) => cfg.k = v[i],
        SweepAxis::Tau(v) => cfg.tau = v[i],
        SweepAxis::Layers(v) => {
            cfg.hidden_dims = layers_to_hidden_dims(v[i])?;
            cfg.head_dims[0] = *cfg.hidden_dims.last().unwrap();
        }
        SweepAxis::Spm(v) => cfg.use_spm = v[i],
        SweepAxis::LayerKind(v) => cfg.layer_kind = v[i],
    }
    cfg.validate()?;
    Ok(cfg)
}

pub struct SweepPoint {
    pub label: String,
    pub config: ModelConfig,
    pub report: CvReport,
}

/// Cross-validate once per value of `axis`, holding everything else fixed.
/// Every point reuses the same seed, so the fold assignment is identical
/// across values; k and tau points rebuild the graph edges from the stored
/// lesions.
pub fn sweep(
    graphs: &[LesionGraph],
    base: &ModelConfig,
    tcfg: &TrainConfig,
    ocfg: &OptimConfig,
    axis: &SweepAxis,
    seed: u64,
) -> Result<Vec<SweepPoint>> {
    if axis.len() == 0 {
        return Err(Error::Param("sweep needs at least one value".into()));
    }
    let labels = axis.labels();
    let mut points = Vec::with_capacity(axis.len());
    for (i, label) in labels.into_iter().enumerate() {
        let cfg = apply_axis(base, axis, i)?;
        let rebuilt: Vec<LesionGraph>;
        let use_graphs: &[LesionGraph] =
            if cfg.k != base.k || cfg.tau != base.tau || cfg.distance_floor != base.distance_floor
            {
                let gc = cfg.graph_config();
                rebuilt = graphs
                    .iter()
                    .map(|g| {
                        build_graph(g.lesions.clone(), g.label, g.patient_id.clone(), &gc)
                    })
                    .collect::<Result<_>>()?;
                &rebuilt
            } else {
                graphs
            };
        let report = cross_validate(use_graphs, &cfg, tcfg, ocfg, seed)?;
        points.push(SweepPoint { label, config: cfg, report });
    }
    Ok(points)
}
