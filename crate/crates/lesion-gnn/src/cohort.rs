//! Synthetic patient cohorts with a planted, recoverable signal, plus JSONL
//! persistence and summary statistics.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write as _};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{build_graph, GraphConfig, Lesion, LesionGraph, Region};
use crate::rng::substream;
use crate::{Error, Result};

/// Region anchor points in the unit cube; region labels are assigned by
/// nearest anchor, and planted-signal lesions are sampled near the
/// signal-region anchors.
pub const REGION_ANCHORS: [(Region, [f64; 3]); 4] = [
    (Region::Periventricular, [0.5, 0.5, 0.5]),
    (Region::Subcortical, [0.2, 0.8, 0.6]),
    (Region::Juxtacortical, [0.8, 0.2, 0.7]),
    (Region::Infratentorial, [0.5, 0.5, 0.1]),
];

/// Regions the planted signal is biased toward.
pub const SIGNAL_REGIONS: [Region; 3] =
    [Region::Periventricular, Region::Infratentorial, Region::Juxtacortical];

fn nearest_region(pos: [f64; 3]) -> Region {
    REGION_ANCHORS
        .iter()
        .min_by(|(_, a), (_, b)| {
            let da: f64 = (0..3).map(|i| (pos[i] - a[i]).powi(2)).sum();
            let db: f64 = (0..3).map(|i| (pos[i] - b[i]).powi(2)).sum();
            da.partial_cmp(&db).unwrap()
        })
        .map(|&(r, _)| r)
        .unwrap()
}

/// Cohort generator parameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CohortSpec {
    pub n_patients: usize,
    pub positive_fraction: f64,
    /// Inclusive bounds of the per-patient lesion count, sampled
    /// log-uniformly.
    pub lesion_count_range: (usize, usize),
    /// Total feature dimension, including the 3 appended position entries.
    pub feature_dim: usize,
    /// Fraction of each positive patient's lesions that carry the signal.
    pub signal_fraction: f64,
    /// Mean feature shift of signal lesions along a fixed random direction.
    pub signal_strength: f64,
    /// Standard deviation of the isotropic Gaussian feature noise.
    pub noise_sd: f64,
    /// Per-region sampling weight for signal-lesion anchors, in
    /// [`Region::ALL`] order; renormalized over [`SIGNAL_REGIONS`].
    pub region_priors: [f64; 4],
    pub seed: u64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        CohortSpec {
            n_patients: 430,
            positive_fraction: 303.0 / 430.0,
            lesion_count_range: (2, 40),
            feature_dim: 16,
            signal_fraction: 0.5,
            signal_strength: 1.0,
            noise_sd: 0.5,
            region_priors: [0.25; 4],
            seed: 0,
        }
    }
}

impl CohortSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_patients == 0 {
            return Err(Error::Param("n_patients must be >= 1".into()));
        }
        for (name, v) in
            [("positive_fraction", self.positive_fraction), ("signal_fraction", self.signal_fraction)]
        {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::Param(format!("{name} must be in (0, 1], got {v}")));
            }
        }
        if self.feature_dim < 4 {
            return Err(Error::Param(format!(
                "feature_dim must be >= 4 (3 position entries are appended), got {}",
                self.feature_dim
            )));
        }
        let (lo, hi) = self.lesion_count_range;
        if lo < 1 || hi < lo {
            return Err(Error::Param(format!("bad lesion_count_range ({lo}, {hi})")));
        }
        if !(self.signal_strength >= 0.0 && self.signal_strength.is_finite()) {
            return Err(Error::Param("signal_strength must be finite and >= 0".into()));
        }
        if !(self.noise_sd > 0.0 && self.noise_sd.is_finite()) {
            return Err(Error::Param("noise_sd must be finite and > 0".into()));
        }
        if self.region_priors.iter().any(|&p| !(p >= 0.0) || !p.is_finite())
            || self.region_priors.iter().sum::<f64>() <= 0.0
        {
            return Err(Error::Param("region_priors must be non-negative with positive sum".into()));
        }
        Ok(())
    }
}

/// One lesion as persisted: position, nearest-anchor region, and the full
/// feature vector (positions appended as the last 3 entries).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LesionRecord {
    pub pos: [f64; 3],
    pub region: Region,
    pub feat: Vec<f64>,
}

/// One synthetic patient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub id: String,
    pub label_1y: u8,
    /// Two-year label, present only on the subset mirroring the smaller
    /// follow-up cohort.
    pub label_2y: Option<u8>,
    pub lesions: Vec<LesionRecord>,
    /// Generator ground truth: which lesions carry the planted signal.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signal: Option<Vec<bool>>,
}

fn standard_normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn log_uniform(rng: &mut impl Rng, lo: usize, hi: usize) -> usize {
    if lo == hi {
        return lo;
    }
    let x = rng.gen_range((lo as f64).ln()..(hi as f64).ln()).exp();
    (x.round() as usize).clamp(lo, hi)
}

/// Pick a signal-region anchor weighted by the spec's priors.
fn signal_anchor(spec: &CohortSpec, rng: &mut impl Rng) -> [f64; 3] {
    let weights: Vec<f64> = SIGNAL_REGIONS
        .iter()
        .map(|r| {
            let i = Region::ALL.iter().position(|a| a == r).unwrap();
            spec.region_priors[i]
        })
        .collect();
    let total: f64 = weights.iter().sum();
    // fall back to uniform if the priors zero out every signal region
    let mut t = rng.gen::<f64>() * if total > 0.0 { total } else { weights.len() as f64 };
    for (r, w) in SIGNAL_REGIONS.iter().zip(if total > 0.0 {
        weights.clone()
    } else {
        vec![1.0; weights.len()]
    }) {
        if t < w {
            let i = REGION_ANCHORS.iter().position(|(a, _)| a == r).unwrap();
            return REGION_ANCHORS[i].1;
        }
        t -= w;
    }
    REGION_ANCHORS[0].1
}

/// Generate the cohort. Positive patients get ceil(signal_fraction * n)
/// signal lesions whose base features are mean-shifted by signal_strength
/// along one fixed random unit direction; signal positions cluster near
/// the signal-region anchors, all other positions are uniform in the unit
/// cube.
/// Deterministic in the spec's seed.
pub fn generate_cohort(spec: &CohortSpec) -> Result<Vec<PatientRecord>> {
    spec.validate()?;
    let base_dim = spec.feature_dim - 3;

    // fixed cohort-wide signal direction in the base feature space
    let mut dir_rng = substream(spec.seed, "direction", 0);
    let mut direction: Vec<f64> = (0..base_dim).map(|_| standard_normal(&mut dir_rng)).collect();
    let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    for v in &mut direction {
        *v /= norm;
    }

    let n_pos = (spec.positive_fraction * spec.n_patients as f64).round() as usize;
    let mut labels: Vec<u8> = (0..spec.n_patients).map(|i| (i < n_pos) as u8).collect();
    labels.shuffle(&mut substream(spec.seed, "labels", 0));

    // two-year labels exist on a fixed 347/430 fraction of patients
    let n_2y = ((spec.n_patients as f64) * 347.0 / 430.0).round() as usize;
    let mut has_2y: Vec<bool> = (0..spec.n_patients).map(|i| i < n_2y).collect();
    has_2y.shuffle(&mut substream(spec.seed, "subset2y", 0));
    let mut flip_rng = substream(spec.seed, "flip2y", 0);

    let mut records = Vec::with_capacity(spec.n_patients);
    for (i, &label) in labels.iter().enumerate() {
        let mut rng = substream(spec.seed, "patient", i as u64);
        let n_lesions = log_uniform(&mut rng, spec.lesion_count_range.0, spec.lesion_count_range.1);

        let n_signal = if label == 1 {
            (spec.signal_fraction * n_lesions as f64).ceil() as usize
        } else {
            0
        };
        let mut signal = vec![false; n_lesions];
        let mut order: Vec<usize> = (0..n_lesions).collect();
        order.shuffle(&mut rng);
        for &j in order.iter().take(n_signal) {
            signal[j] = true;
        }

        let lesions: Vec<LesionRecord> = (0..n_lesions)
            .map(|j| {
                let pos: [f64; 3] = if signal[j] {
                    let anchor = signal_anchor(spec, &mut rng);
                    std::array::from_fn(|c| {
                        (anchor[c] + 0.12 * standard_normal(&mut rng)).clamp(0.0, 1.0)
                    })
                } else {
                    std::array::from_fn(|_| rng.gen())
                };
                let mut feat: Vec<f64> =
                    (0..base_dim).map(|_| spec.noise_sd * standard_normal(&mut rng)).collect();
                if signal[j] {
                    for (f, d) in feat.iter_mut().zip(&direction) {
                        *f += spec.signal_strength * d;
                    }
                }
                feat.extend_from_slice(&pos);
                LesionRecord { pos, region: nearest_region(pos), feat }
            })
            .collect();

        let label_2y = if has_2y[i] {
            let flip = flip_rng.gen::<f64>() < 0.1;
            Some(if flip { 1 - label } else { label })
        } else {
            None
        };

        records.push(PatientRecord {
            id: format!("p{i:04}"),
            label_1y: label,
            label_2y,
            lesions,
            signal: Some(signal),
        });
    }
    Ok(records)
}

/// Write one patient per line as JSON.
pub fn save_cohort(records: &[PatientRecord], path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Schema(e.to_string()))?;
        out.write_all(line.as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Read a JSONL cohort, validating per-patient structure and cohort-wide
/// feature-dimension consistency.
pub fn load_cohort(path: &Path) -> Result<Vec<PatientRecord>> {
    let file = std::fs::File::open(path)?;
    let mut records = Vec::new();
    let mut dim: Option<usize> = None;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PatientRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        if rec.lesions.is_empty() {
            return Err(Error::Schema(format!("patient '{}' (line {}) has no lesions", rec.id, i + 1)));
        }
        if let Some(sig) = &rec.signal {
            if sig.len() != rec.lesions.len() {
                return Err(Error::Schema(format!(
                    "patient '{}' (line {}): signal length {} != lesion count {}",
                    rec.id,
                    i + 1,
                    sig.len(),
                    rec.lesions.len()
                )));
            }
        }
        for l in &rec.lesions {
            match dim {
                None => dim = Some(l.feat.len()),
                Some(d) if d != l.feat.len() => {
                    return Err(Error::Schema(format!(
                        "feature dimension {} at line {} conflicts with {}",
                        l.feat.len(),
                        i + 1,
                        d
                    )))
                }
                _ => {}
            }
        }
        records.push(rec);
    }
    Ok(records)
}

/// Prediction horizon of a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    #[serde(rename = "1y")]
    OneYear,
    #[serde(rename = "2y")]
    TwoYear,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::OneYear => "1y",
            Task::TwoYear => "2y",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1y" => Ok(Task::OneYear),
            "2y" => Ok(Task::TwoYear),
            other => Err(Error::Usage(format!("unknown task '{other}' (expected 1y or 2y)"))),
        }
    }
}

/// Build per-patient lesion graphs for one task. The two-year task keeps
/// only patients carrying a two-year label.
pub fn records_to_graphs(
    records: &[PatientRecord],
    task: Task,
    gc: &GraphConfig,
) -> Result<Vec<LesionGraph>> {
    let mut graphs = Vec::new();
    for r in records {
        let label = match task {
            Task::OneYear => r.label_1y,
            Task::TwoYear => match r.label_2y {
                Some(l) => l,
                None => continue,
            },
        };
        let lesions: Vec<Lesion> = r
            .lesions
            .iter()
            .map(|l| Lesion { position: l.pos, features: l.feat.clone(), region: l.region })
            .collect();
        graphs.push(build_graph(lesions, label, r.id.clone(), gc)?);
    }
    if graphs.is_empty() {
        return Err(Error::Schema(format!("no patient carries a {} label", task.name())));
    }
    Ok(graphs)
}

/// Cohort-level summary.
#[derive(Clone, Debug, Serialize)]
pub struct CohortStats {
    pub n_patients: usize,
    pub n_positive: usize,
    pub n_negative: usize,
    pub n_with_2y: usize,
    pub n_lesions: usize,
    /// lesion count -> number of patients
    pub lesion_count_hist: BTreeMap<usize, usize>,
    /// region name -> fraction of all lesions
    pub region_fractions: BTreeMap<String, f64>,
}

pub fn cohort_stats(records: &[PatientRecord]) -> Result<CohortStats> {
    if records.is_empty() {
        return Err(Error::Input("cohort_stats on an empty cohort".into()));
    }
    let n_positive = records.iter().filter(|r| r.label_1y == 1).count();
    let n_with_2y = records.iter().filter(|r| r.label_2y.is_some()).count();
    let mut lesion_count_hist = BTreeMap::new();
    let mut region_counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut n_lesions = 0usize;
    for r in records {
        *lesion_count_hist.entry(r.lesions.len()).or_insert(0) += 1;
        for l in &r.lesions {
            *region_counts.entry(l.region.name().to_string()).or_insert(0) += 1;
            n_lesions += 1;
        }
    }
    let region_fractions = region_counts
        .into_iter()
        .map(|(k, v)| (k, v as f64 / n_lesions as f64))
        .collect();
    Ok(CohortStats {
        n_patients: records.len(),
        n_positive,
        n_negative: records.len() - n_positive,
        n_with_2y,
        n_lesions,
        lesion_count_hist,
        region_fractions,
    })
}
