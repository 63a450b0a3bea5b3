//! Full pipeline assembly: message-passing enrichment -> self-pruning ->
//! sum readout -> MLP head -> sigmoid, plus the two edge-free baselines
//! (Set-Proc and logistic regression on mean features) and checkpoint I/O.

use std::io::{Read as _, Write as _};
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::graph::{GraphConfig, LesionGraph};
use crate::layers::{glorot, layer_forward, GraphContext, LayerKind, LayerParams};
use crate::prune::{spm_forward, PruneResult};
use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result};

/// Graph model or the edge-free set baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Graph,
    SetProc,
}

/// Architecture and graph-construction hyperparameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    pub layer_kind: LayerKind,
    /// Output dims of the enrichment layers (input is `feature_dim`).
    pub hidden_dims: Vec<usize>,
    /// Dims of the head's feed-forward chain; a final ->1 layer is implied.
    pub head_dims: Vec<usize>,
    /// Retention ratio of the self-pruning module.
    pub r: f64,
    pub k: usize,
    pub tau: f64,
    pub distance_floor: f64,
    pub dropout: f64,
    pub use_spm: bool,
    pub feature_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            arch: Arch::Graph,
            layer_kind: LayerKind::Gcn,
            hidden_dims: vec![64, 8],
            head_dims: vec![8, 8],
            r: 0.5,
            k: 5,
            tau: 0.01,
            distance_floor: 0.0,
            dropout: 0.5,
            use_spm: true,
            feature_dim: 16,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dims.is_empty() || self.hidden_dims.iter().any(|&d| d == 0) {
            return Err(Error::Param("hidden_dims must be non-empty and positive".into()));
        }
        if self.head_dims.is_empty() || self.head_dims.iter().any(|&d| d == 0) {
            return Err(Error::Param("head_dims must be non-empty and positive".into()));
        }
        if self.head_dims[0] != *self.hidden_dims.last().unwrap() {
            return Err(Error::Param(format!(
                "head input dim {} must equal last hidden dim {}",
                self.head_dims[0],
                self.hidden_dims.last().unwrap()
            )));
        }
        if !(self.r > 0.0 && self.r <= 1.0) {
            return Err(Error::Param(format!("r must be in (0, 1], got {}", self.r)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Param(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        if self.feature_dim == 0 {
            return Err(Error::Param("feature_dim must be positive".into()));
        }
        self.graph_config().validate()
    }

    pub fn graph_config(&self) -> GraphConfig {
        GraphConfig { k: self.k, tau: self.tau, distance_floor: self.distance_floor }
    }
}

/// One dense layer.
#[derive(Clone, Debug)]
pub struct LinearParams {
    pub w: Tensor,
    pub b: Tensor,
}

impl LinearParams {
    pub fn init(d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        LinearParams { w: glorot(d_in, d_out, rng), b: Tensor::zeros(1, d_out) }
    }

    fn zeros(d_in: usize, d_out: usize) -> Self {
        LinearParams { w: Tensor::zeros(d_in, d_out), b: Tensor::zeros(1, d_out) }
    }
}

/// Feature-enrichment stage: message-passing layers or per-lesion linears.
#[derive(Clone, Debug)]
pub enum Enrichment {
    Graph(Vec<LayerParams>),
    Set(Vec<LinearParams>),
}

/// All learnable arrays of one model instance.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub enrich: Enrichment,
    /// SPM projection vector, (last hidden dim) x 1.
    pub proj: Tensor,
    /// Head chain; the last entry is the ->1 output layer.
    pub head: Vec<LinearParams>,
}

fn standard_normal(rng: &mut impl Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

impl ModelParams {
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut dims = vec![cfg.feature_dim];
        dims.extend(&cfg.hidden_dims);
        let enrich = match cfg.arch {
            Arch::Graph => Enrichment::Graph(
                dims.windows(2)
                    .map(|w| LayerParams::init(cfg.layer_kind, w[0], w[1], rng))
                    .collect(),
            ),
            Arch::SetProc => Enrichment::Set(
                dims.windows(2).map(|w| LinearParams::init(w[0], w[1], rng)).collect(),
            ),
        };
        let d = *cfg.hidden_dims.last().unwrap();
        let proj =
            Tensor::new(d, 1, (0..d).map(|_| 0.1 * standard_normal(rng)).collect()).unwrap();
        let mut head: Vec<LinearParams> = cfg
            .head_dims
            .windows(2)
            .map(|w| LinearParams::init(w[0], w[1], rng))
            .collect();
        head.push(LinearParams::init(*cfg.head_dims.last().unwrap(), 1, rng));
        Ok(ModelParams { enrich, proj, head })
    }

    /// Same structure as [`init`](Self::init) but all-zero arrays; used to
    /// rebuild a parameter set from a checkpoint.
    fn zeros(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut dims = vec![cfg.feature_dim];
        dims.extend(&cfg.hidden_dims);
        let enrich = match cfg.arch {
            Arch::Graph => Enrichment::Graph(
                dims.windows(2)
                    .map(|w| LayerParams::zeros(cfg.layer_kind, w[0], w[1]))
                    .collect(),
            ),
            Arch::SetProc => Enrichment::Set(
                dims.windows(2).map(|w| LinearParams::zeros(w[0], w[1])).collect(),
            ),
        };
        let d = *cfg.hidden_dims.last().unwrap();
        let mut head: Vec<LinearParams> = cfg
            .head_dims
            .windows(2)
            .map(|w| LinearParams::zeros(w[0], w[1]))
            .collect();
        head.push(LinearParams::zeros(*cfg.head_dims.last().unwrap(), 1));
        Ok(ModelParams { enrich, proj: Tensor::zeros(d, 1), head })
    }

    /// Named views of every learnable array, in a fixed order shared with
    /// [`register`](Self::register) and the optimizer.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![];
        match &self.enrich {
            Enrichment::Graph(layers) => {
                for (i, layer) in layers.iter().enumerate() {
                    for (name, t) in layer.tensors() {
                        out.push((format!("layer{i}.{name}"), t));
                    }
                }
            }
            Enrichment::Set(layers) => {
                for (i, l) in layers.iter().enumerate() {
                    out.push((format!("set{i}.w"), &l.w));
                    out.push((format!("set{i}.b"), &l.b));
                }
            }
        }
        out.push(("proj".into(), &self.proj));
        for (i, l) in self.head.iter().enumerate() {
            out.push((format!("head{i}.w"), &l.w));
            out.push((format!("head{i}.b"), &l.b));
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![];
        match &mut self.enrich {
            Enrichment::Graph(layers) => {
                for (i, layer) in layers.iter_mut().enumerate() {
                    for (name, t) in layer.tensors_mut() {
                        out.push((format!("layer{i}.{name}"), t));
                    }
                }
            }
            Enrichment::Set(layers) => {
                for (i, l) in layers.iter_mut().enumerate() {
                    out.push((format!("set{i}.w"), &mut l.w));
                    out.push((format!("set{i}.b"), &mut l.b));
                }
            }
        }
        out.push(("proj".into(), &mut self.proj));
        for (i, l) in self.head.iter_mut().enumerate() {
            out.push((format!("head{i}.w"), &mut l.w));
            out.push((format!("head{i}.b"), &mut l.b));
        }
        out
    }

    /// Register every array on the tape (same order as [`named`](Self::named)).
    pub fn register(&self, tape: &mut Tape) -> ModelVars {
        let enrich = match &self.enrich {
            Enrichment::Graph(layers) => {
                EnrichVars::Graph(layers.iter().map(|l| l.register(tape)).collect())
            }
            Enrichment::Set(layers) => EnrichVars::Set(
                layers
                    .iter()
                    .map(|l| (tape.param(l.w.clone()), tape.param(l.b.clone())))
                    .collect(),
            ),
        };
        let proj = tape.param(self.proj.clone());
        let head = self
            .head
            .iter()
            .map(|l| (tape.param(l.w.clone()), tape.param(l.b.clone())))
            .collect();
        ModelVars { enrich, proj, head }
    }
}

/// Tape handles mirroring [`ModelParams`].
pub struct ModelVars {
    pub enrich: EnrichVars,
    pub proj: Var,
    pub head: Vec<(Var, Var)>,
}

pub enum EnrichVars {
    Graph(Vec<crate::layers::LayerVars>),
    Set(Vec<(Var, Var)>),
}

impl ModelVars {
    /// Flat list aligned with `ModelParams::named`.
    pub fn flat(&self) -> Vec<Var> {
        let mut out = vec![];
        match &self.enrich {
            EnrichVars::Graph(layers) => {
                for l in layers {
                    out.extend(l.flat());
                }
            }
            EnrichVars::Set(layers) => {
                for &(w, b) in layers {
                    out.push(w);
                    out.push(b);
                }
            }
        }
        out.push(self.proj);
        for &(w, b) in &self.head {
            out.push(w);
            out.push(b);
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Output handles of one forward pass.
pub struct ForwardOut {
    /// Predicted probability, 1x1.
    pub prob: Var,
    /// Pre-sigmoid logit, 1x1.
    pub logit: Var,
    pub prune: PruneResult,
}

/// Run the pipeline for one graph on an existing tape.
///
/// `unit_gates` forces the SPM gates to 1.0 (keeps the selection), which at
/// r=1 makes the pipeline identical to `use_spm=false`.
pub fn forward_on_tape(
    tape: &mut Tape,
    ctx: &GraphContext,
    vars: &ModelVars,
    cfg: &ModelConfig,
    mode: Mode,
    rng: &mut impl Rng,
    unit_gates: bool,
) -> Result<ForwardOut> {
    if ctx.features.cols() != cfg.feature_dim {
        return Err(Error::Shape {
            op: "forward",
            lhs: format!("graph features {}x{}", ctx.features.rows(), ctx.features.cols()),
            rhs: format!("configured feature_dim {}", cfg.feature_dim),
        });
    }
    let training = mode == Mode::Train;
    let mut h = tape.constant(ctx.features.clone());

    match &vars.enrich {
        EnrichVars::Graph(layers) => {
            let last = layers.len() - 1;
            for (i, layer) in layers.iter().enumerate() {
                // the final enrichment layer stays linear so the SPM sees
                // signed features
                h = layer_forward(tape, h, ctx, layer, i < last)?;
                if i < last {
                    h = tape.dropout(h, cfg.dropout, training, rng)?;
                }
            }
        }
        EnrichVars::Set(layers) => {
            let last = layers.len() - 1;
            for (i, &(w, b)) in layers.iter().enumerate() {
                let lin = tape.matmul(h, w)?;
                h = tape.add_row(lin, b)?;
                if i < last {
                    h = tape.relu(h);
                    h = tape.dropout(h, cfg.dropout, training, rng)?;
                }
            }
        }
    }

    let (pooled, prune) = if cfg.use_spm {
        let (gated, prune) = spm_forward(tape, h, vars.proj, cfg.r, unit_gates)?;
        (gated, prune)
    } else {
        // readout over all nodes, ungated
        let n = tape.value(h).rows();
        let prune = PruneResult {
            scores: vec![1.0; n],
            retained: (0..n).collect(),
            gated_features: tape.value(h).clone(),
        };
        (h, prune)
    };

    let mut x = tape.sum_rows(pooled);
    let n_head = vars.head.len();
    for (i, &(w, b)) in vars.head.iter().enumerate() {
        let lin = tape.matmul(x, w)?;
        x = tape.add_row(lin, b)?;
        if i + 1 < n_head {
            x = tape.relu(x);
            if i == 0 {
                x = tape.dropout(x, cfg.dropout, training, rng)?;
            }
        }
    }
    let logit = x;
    let prob = tape.sigmoid(logit);
    Ok(ForwardOut { prob, logit, prune })
}

/// Evaluate one graph with a fresh tape in eval mode; deterministic.
pub fn predict(ctx: &GraphContext, params: &ModelParams, cfg: &ModelConfig) -> Result<(f64, PruneResult)> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0); // unused in eval mode
    let out = forward_on_tape(&mut tape, ctx, &vars, cfg, Mode::Eval, &mut rng, false)?;
    Ok((tape.value(out.prob).item(), out.prune))
}

/// Arithmetic mean over lesion feature rows.
pub fn mean_feature_vector(graph: &LesionGraph) -> Result<Vec<f64>> {
    if graph.lesions.is_empty() {
        return Err(Error::Input("mean_feature_vector on a graph with no lesions".into()));
    }
    let f = graph.feature_dim();
    let mut out = vec![0.0; f];
    for l in &graph.lesions {
        for (o, &v) in out.iter_mut().zip(&l.features) {
            *o += v;
        }
    }
    let n = graph.lesions.len() as f64;
    for o in &mut out {
        *o /= n;
    }
    Ok(out)
}

/// L2-regularized logistic regression trained by full-batch gradient descent.
#[derive(Clone, Debug)]
pub struct LogisticRegression {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LogisticRegression {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let z: f64 = self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias;
        1.0 / (1.0 + (-z).exp())
    }
}

/// Fit the LR baseline. Zero-initialized and full-batch, so the result is
/// deterministic for a fixed input order.
pub fn logistic_regression_fit(
    xs: &[Vec<f64>],
    ys: &[u8],
    l2: f64,
    epochs: usize,
    lr: f64,
) -> Result<LogisticRegression> {
    if xs.is_empty() || xs.len() != ys.len() {
        return Err(Error::Input("empty or mismatched LR training data".into()));
    }
    if ys.iter().all(|&y| y == 0) || ys.iter().all(|&y| y == 1) {
        return Err(Error::Degenerate("LR training set contains a single class".into()));
    }
    let d = xs[0].len();
    let n = xs.len() as f64;
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    for _ in 0..epochs {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for (x, &y) in xs.iter().zip(ys) {
            let z: f64 = w.iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>() + b;
            let p = 1.0 / (1.0 + (-z).exp());
            let err = p - y as f64;
            for (g, &xi) in gw.iter_mut().zip(x) {
                *g += err * xi;
            }
            gb += err;
        }
        for (wi, gi) in w.iter_mut().zip(&gw) {
            *wi -= lr * (gi / n + l2 * *wi);
        }
        b -= lr * gb / n;
    }
    Ok(LogisticRegression { weights: w, bias: b })
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"LGNN";
const CHECKPOINT_VERSION: u32 = 1;

/// Write a versioned checkpoint: JSON config header followed by named
/// parameter arrays as 64-bit little-endian floats.
pub fn save_checkpoint(path: &Path, cfg: &ModelConfig, params: &ModelParams) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let cfg_json = serde_json::to_vec(cfg).map_err(|e| Error::Schema(e.to_string()))?;
    buf.extend_from_slice(&(cfg_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&cfg_json);
    let named = params.named();
    buf.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in named {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rows() as u32).to_le_bytes());
        buf.extend_from_slice(&(t.cols() as u32).to_le_bytes());
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ModelParams)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::Schema("truncated checkpoint".into()));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 4)? != CHECKPOINT_MAGIC {
        return Err(Error::Schema("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Schema(format!("unsupported checkpoint version {version}")));
    }
    let cfg_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let cfg: ModelConfig = serde_json::from_slice(take(&mut pos, cfg_len)?)
        .map_err(|e| Error::Schema(format!("bad config header: {e}")))?;
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;

    let mut params = ModelParams::zeros(&cfg)?;
    let mut filled = std::collections::BTreeSet::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|e| Error::Schema(e.to_string()))?;
        let rows = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let raw = take(&mut pos, rows * cols * 8)?;
        let data: Vec<f64> =
            raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let mut found = false;
        for (pname, t) in params.named_mut() {
            if pname == name {
                if t.shape() != (rows, cols) {
                    return Err(Error::Schema(format!(
                        "array '{name}' has shape {rows}x{cols}, expected {}x{}",
                        t.shape().0,
                        t.shape().1
                    )));
                }
                t.data_mut().copy_from_slice(&data);
                found = true;
                break;
            }
        }
        if !found {
            return Err(Error::Schema(format!("unexpected array '{name}' in checkpoint")));
        }
        filled.insert(name);
    }
    if filled.len() != params.named().len() {
        return Err(Error::Schema("checkpoint is missing parameter arrays".into()));
    }
    Ok((cfg, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_graph, GraphConfig, Lesion, Region};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn test_config() -> ModelConfig {
        ModelConfig {
            feature_dim: 6,
            hidden_dims: vec![8, 4],
            head_dims: vec![4, 4],
            tau: 0.5,
            ..ModelConfig::default()
        }
    }

    fn random_graph(rng: &mut impl Rng, n: usize, f: usize, label: u8) -> LesionGraph {
        let lesions: Vec<Lesion> = (0..n)
            .map(|_| Lesion {
                position: [rng.gen(), rng.gen(), rng.gen()],
                features: (0..f).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                region: Region::Subcortical,
            })
            .collect();
        let cfg = GraphConfig { k: 3, tau: 0.5, ..GraphConfig::default() };
        build_graph(lesions, label, "p".into(), &cfg).unwrap()
    }

    #[test]
    fn zero_head_output_layer_predicts_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let cfg = test_config();
        let mut params = ModelParams::init(&cfg, &mut rng).unwrap();
        let out_layer = params.head.last_mut().unwrap();
        for v in out_layer.w.data_mut() {
            *v = 0.0;
        }
        let g = random_graph(&mut rng, 7, 6, 1);
        let ctx = GraphContext::new(&g);
        let (prob, _) = predict(&ctx, &params, &cfg).unwrap();
        assert_eq!(prob, 0.5);
    }

    #[test]
    fn output_always_in_open_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let cfg = test_config();
        let params = ModelParams::init(&cfg, &mut rng).unwrap();
        for _ in 0..10 {
            let n = rng.gen_range(1..12);
            let g = random_graph(&mut rng, n, 6, 0);
            let ctx = GraphContext::new(&g);
            let (prob, _) = predict(&ctx, &params, &cfg).unwrap();
            assert!(prob > 0.0 && prob < 1.0);
        }
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let cfg = test_config();
        let params = ModelParams::init(&cfg, &mut rng).unwrap();
        let g = random_graph(&mut rng, 9, 6, 1);
        let ctx = GraphContext::new(&g);
        let (p1, _) = predict(&ctx, &params, &cfg).unwrap();
        let (p2, _) = predict(&ctx, &params, &cfg).unwrap();
        assert_eq!(p1.to_bits(), p2.to_bits());
    }

    #[test]
    fn feature_dim_mismatch_is_shape_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        let cfg = test_config();
        let params = ModelParams::init(&cfg, &mut rng).unwrap();
        let g = random_graph(&mut rng, 4, 5, 0); // 5 != 6
        let ctx = GraphContext::new(&g);
        assert!(matches!(predict(&ctx, &params, &cfg), Err(Error::Shape { .. })));
    }

    #[test]
    fn prediction_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(64);
        for kind in LayerKind::ALL {
            let cfg = ModelConfig { layer_kind: kind, ..test_config() };
            let params = ModelParams::init(&cfg, &mut rng).unwrap();
            let g = random_graph(&mut rng, 10, 6, 1);
            let base = predict(&GraphContext::new(&g), &params, &cfg).unwrap().0;

            let perm: Vec<usize> = vec![4, 9, 0, 7, 2, 5, 1, 8, 3, 6];
            let mut inv = vec![0; 10];
            for (new, &old) in perm.iter().enumerate() {
                inv[old] = new;
            }
            let permuted = LesionGraph {
                lesions: perm.iter().map(|&p| g.lesions[p].clone()).collect(),
                edges: g
                    .edges
                    .iter()
                    .map(|&(i, j, w)| {
                        let (a, b) = (inv[i], inv[j]);
                        (a.min(b), a.max(b), w)
                    })
                    .collect(),
                label: g.label,
                patient_id: g.patient_id.clone(),
            };
            let moved = predict(&GraphContext::new(&permuted), &params, &cfg).unwrap().0;
            assert!((base - moved).abs() < 1e-9, "{}: {base} vs {moved}", kind.name());
        }
    }

    #[test]
    fn spm_bypass_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(65);
        let cfg_spm = ModelConfig { r: 1.0, ..test_config() };
        let cfg_off = ModelConfig { use_spm: false, ..test_config() };
        let params = ModelParams::init(&cfg_spm, &mut rng).unwrap();
        let g = random_graph(&mut rng, 8, 6, 1);
        let ctx = GraphContext::new(&g);

        let logit = |cfg: &ModelConfig, unit_gates: bool| {
            let mut tape = Tape::new();
            let vars = params.register(&mut tape);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let out =
                forward_on_tape(&mut tape, &ctx, &vars, cfg, Mode::Eval, &mut rng, unit_gates)
                    .unwrap();
            tape.value(out.logit).item()
        };
        let with_unit_gates = logit(&cfg_spm, true);
        let without_spm = logit(&cfg_off, false);
        assert!((with_unit_gates - without_spm).abs() < 1e-12);
    }

    #[test]
    fn set_proc_ignores_edges() {
        let mut rng = ChaCha8Rng::seed_from_u64(66);
        let cfg = ModelConfig { arch: Arch::SetProc, ..test_config() };
        let params = ModelParams::init(&cfg, &mut rng).unwrap();
        let g = random_graph(&mut rng, 6, 6, 1);
        let mut no_edges = g.clone();
        no_edges.edges.clear();
        let p1 = predict(&GraphContext::new(&g), &params, &cfg).unwrap().0;
        let p2 = predict(&GraphContext::new(&no_edges), &params, &cfg).unwrap().0;
        assert_eq!(p1.to_bits(), p2.to_bits());
    }

    #[test]
    fn set_proc_single_lesion_same_with_or_without_edges() {
        let mut rng = ChaCha8Rng::seed_from_u64(67);
        let cfg = ModelConfig { arch: Arch::SetProc, ..test_config() };
        let params = ModelParams::init(&cfg, &mut rng).unwrap();
        let g = random_graph(&mut rng, 1, 6, 0);
        let p = predict(&GraphContext::new(&g), &params, &cfg).unwrap().0;
        assert!(p > 0.0 && p < 1.0);
    }

    #[test]
    fn mean_feature_vector_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(68);
        let g1 = random_graph(&mut rng, 1, 4, 0);
        assert_eq!(mean_feature_vector(&g1).unwrap(), g1.lesions[0].features);

        let mut g2 = random_graph(&mut rng, 2, 4, 0);
        g2.lesions[1].features = g2.lesions[0].features.iter().map(|v| -v).collect();
        for v in mean_feature_vector(&g2).unwrap() {
            assert!(v.abs() < 1e-15);
        }

        let g3 = random_graph(&mut rng, 8, 4, 0);
        let mean = mean_feature_vector(&g3).unwrap();
        for j in 0..4 {
            let col: f64 = g3.lesions.iter().map(|l| l.features[j]).sum::<f64>() / 8.0;
            assert!((mean[j] - col).abs() < 1e-12);
        }
    }

    #[test]
    fn lr_separable_two_points() {
        let xs = vec![vec![1.0, 0.0], vec![-1.0, 0.0]];
        let ys = vec![1u8, 0u8];
        let lr = logistic_regression_fit(&xs, &ys, 1e-3, 500, 0.5).unwrap();
        assert!(lr.predict(&xs[0]) > 0.5);
        assert!(lr.predict(&xs[1]) < 0.5);
    }

    #[test]
    fn lr_l2_shrinks_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(69);
        let xs: Vec<Vec<f64>> =
            (0..20).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let ys: Vec<u8> = (0..20).map(|i| (i % 3 == 0) as u8).collect();
        let weak = logistic_regression_fit(&xs, &ys, 1e-4, 2000, 0.05).unwrap();
        let strong = logistic_regression_fit(&xs, &ys, 10.0, 2000, 0.05).unwrap();
        let norm = |w: &[f64]| w.iter().map(|v| v * v).sum::<f64>().sqrt();
        // at steady state |w| <= max|grad| / l2
        assert!(norm(&strong.weights) < 0.11, "strong-l2 norm {}", norm(&strong.weights));
        assert!(norm(&strong.weights) < 0.1 * norm(&weak.weights));
    }

    #[test]
    fn lr_rejects_single_class() {
        let xs = vec![vec![1.0], vec![2.0]];
        assert!(matches!(
            logistic_regression_fit(&xs, &[1, 1], 1e-3, 10, 0.1),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        for kind in LayerKind::ALL {
            let cfg = ModelConfig { layer_kind: kind, ..test_config() };
            let params = ModelParams::init(&cfg, &mut rng).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("model.ckpt");
            save_checkpoint(&path, &cfg, &params).unwrap();
            let (cfg2, params2) = load_checkpoint(&path).unwrap();
            assert_eq!(cfg.layer_kind, cfg2.layer_kind);
            assert_eq!(cfg.feature_dim, cfg2.feature_dim);
            for ((n1, t1), (n2, t2)) in params.named().iter().zip(params2.named().iter()) {
                assert_eq!(n1, n2);
                assert_eq!(t1, t2);
            }
        }
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Schema(_))));
    }
}
