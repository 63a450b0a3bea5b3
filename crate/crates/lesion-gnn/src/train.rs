//! AdamW optimization, balanced mini-batch sampling, and the per-fold
//! training loop with validation-AUC checkpoint selection.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::eval::roc_auc;
use crate::layers::GraphContext;
use crate::model::{forward_on_tape, predict, Mode, ModelConfig, ModelParams};
use crate::rng::substream;
use crate::tensor::{Tape, Tensor};
use crate::{Error, Result};

/// AdamW hyperparameters.
#[derive(Clone, Copy, Debug)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig { lr: 1e-4, weight_decay: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Training-loop configuration.
#[derive(Clone, Copy, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub balanced_sampling: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 300, batch_size: 16, balanced_sampling: true }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Param("epochs must be >= 1".into()));
        }
        if self.balanced_sampling && self.batch_size < 2 {
            return Err(Error::Param("batch_size must be >= 2 with balanced sampling".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Param("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// AdamW with decoupled weight decay: theta <- theta - lr*m_hat/(sqrt(v_hat)+eps)
/// - lr*wd*theta. Moment buffers are allocated on the first step.
pub struct AdamW {
    cfg: OptimConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamW {
    pub fn new(cfg: OptimConfig) -> Self {
        AdamW { cfg, m: vec![], v: vec![], t: 0 }
    }

    /// One update over named parameters and their aligned gradients.
    pub fn step(&mut self, params: &mut [(String, &mut Tensor)], grads: &[Tensor]) -> Result<()> {
        debug_assert_eq!(params.len(), grads.len());
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Tensor::zeros(g.rows(), g.cols())).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let bc1 = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.t as i32);
        for (((name, theta), grad), (m, v)) in
            params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if !grad.all_finite() {
                return Err(Error::Numeric(format!("non-finite gradient for parameter '{name}'")));
            }
            for i in 0..theta.data().len() {
                let g = grad.data()[i];
                let mi = self.cfg.beta1 * m.data()[i] + (1.0 - self.cfg.beta1) * g;
                let vi = self.cfg.beta2 * v.data()[i] + (1.0 - self.cfg.beta2) * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                let x = theta.data()[i];
                theta.data_mut()[i] = x
                    - self.cfg.lr * m_hat / (v_hat.sqrt() + self.cfg.eps)
                    - self.cfg.lr * self.cfg.weight_decay * x;
            }
        }
        Ok(())
    }
}

/// Class-balanced index batches. Every batch holds ceil(b/2) majority and
/// floor(b/2) minority samples: majority indices are covered once per epoch
/// (the final chunk is padded by resampling), minority slots are drawn with
/// replacement.
pub fn balanced_batches(
    labels: &[u8],
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<usize>>> {
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 0).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Degenerate("balanced sampling requires both classes".into()));
    }
    let (mut majority, minority) =
        if pos.len() >= neg.len() { (pos, neg) } else { (neg, pos) };
    majority.shuffle(rng);

    let maj_per = batch_size - batch_size / 2;
    let min_per = batch_size / 2;
    let n_batches = majority.len().div_ceil(maj_per);
    let mut batches = Vec::with_capacity(n_batches);
    for chunk in majority.chunks(maj_per) {
        let mut batch: Vec<usize> = chunk.to_vec();
        while batch.len() < maj_per {
            batch.push(majority[rng.gen_range(0..majority.len())]);
        }
        for _ in 0..min_per {
            batch.push(minority[rng.gen_range(0..minority.len())]);
        }
        batch.shuffle(rng);
        batches.push(batch);
    }
    Ok(batches)
}

/// Plain shuffled batches without class balancing.
pub fn plain_batches(n: usize, batch_size: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// Per-epoch training record.
#[derive(Clone, Copy, Debug)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: f64,
}

/// Result of one fold's training.
pub struct TrainOutcome {
    /// Parameters of the epoch with the best validation AUC (earlier epoch
    /// wins ties).
    pub best: ModelParams,
    pub best_epoch: usize,
    pub best_val_auc: f64,
    pub history: Vec<EpochStats>,
}

/// Train on one fold: balanced batches of per-graph BCE, AdamW updates, and
/// per-epoch validation AUC for checkpoint selection.
pub fn train_fold(
    train: &[&crate::graph::LesionGraph],
    val: &[&crate::graph::LesionGraph],
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    ocfg: &OptimConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    tcfg.validate()?;
    mcfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Input("train and validation sets must be non-empty".into()));
    }
    let labels: Vec<u8> = train.iter().map(|g| g.label).collect();
    if tcfg.balanced_sampling && (labels.iter().all(|&l| l == 0) || labels.iter().all(|&l| l == 1))
    {
        return Err(Error::Degenerate("training set contains a single class".into()));
    }

    let train_ctxs: Vec<GraphContext> = train.iter().map(|g| GraphContext::new(g)).collect();
    let val_ctxs: Vec<GraphContext> = val.iter().map(|g| GraphContext::new(g)).collect();
    let val_labels: Vec<u8> = val.iter().map(|g| g.label).collect();

    let mut init_rng = substream(seed, "init", 0);
    let mut batch_rng = substream(seed, "batches", 0);
    let mut dropout_rng = substream(seed, "dropout", 0);

    let mut params = ModelParams::init(mcfg, &mut init_rng)?;
    let mut optim = AdamW::new(*ocfg);

    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut history = Vec::with_capacity(tcfg.epochs);

    for epoch in 0..tcfg.epochs {
        let batches = if tcfg.balanced_sampling {
            balanced_batches(&labels, tcfg.batch_size, &mut batch_rng)?
        } else {
            plain_batches(train.len(), tcfg.batch_size, &mut batch_rng)
        };

        let mut epoch_loss = 0.0;
        for batch in &batches {
            let mut tape = Tape::new();
            let vars = params.register(&mut tape);
            let mut losses = Vec::with_capacity(batch.len());
            for &gi in batch {
                let out = forward_on_tape(
                    &mut tape,
                    &train_ctxs[gi],
                    &vars,
                    mcfg,
                    Mode::Train,
                    &mut dropout_rng,
                    false,
                )?;
                let target = Tensor::scalar(labels[gi] as f64);
                losses.push(tape.bce_loss(out.prob, &target)?);
            }
            let loss = tape.mean_scalars(&losses)?;
            epoch_loss += tape.value(loss).item();
            let grads = tape.backward(loss)?;

            let flat_vars = vars.flat();
            let grad_tensors: Vec<Tensor> = flat_vars
                .iter()
                .zip(params.named().iter())
                .map(|(&v, (_, t))| grads.get_or_zeros(v, t.rows(), t.cols()))
                .collect();
            let mut named = params.named_mut();
            optim.step(&mut named, &grad_tensors)?;
        }
        let train_loss = epoch_loss / batches.len() as f64;

        let scores: Vec<f64> = val_ctxs
            .iter()
            .map(|ctx| predict(ctx, &params, mcfg).map(|(p, _)| p))
            .collect::<Result<_>>()?;
        let val_auc = roc_auc(&scores, &val_labels)?;

        history.push(EpochStats { epoch, train_loss, val_auc });
        let better = match &best {
            None => true,
            Some((auc, _, _)) => val_auc > *auc,
        };
        if better {
            best = Some((val_auc, epoch, params.clone()));
        }
    }

    let (best_val_auc, best_epoch, best) = best.expect("epochs >= 1");
    Ok(TrainOutcome { best, best_epoch, best_val_auc, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn adamw_first_step_hand_derived() {
        // wd=0, theta=1, g=1, lr=0.1: m_hat = v_hat = 1, theta' ~ 0.9
        let cfg = OptimConfig { lr: 0.1, weight_decay: 0.0, ..OptimConfig::default() };
        let mut opt = AdamW::new(cfg);
        let mut theta = Tensor::scalar(1.0);
        let grads = vec![Tensor::scalar(1.0)];
        let mut named = vec![("theta".to_string(), &mut theta)];
        opt.step(&mut named, &grads).unwrap();
        assert!((theta.item() - 0.9).abs() < 1e-8);
    }

    #[test]
    fn adamw_zero_gradient_no_decay_is_identity() {
        let cfg = OptimConfig { weight_decay: 0.0, ..OptimConfig::default() };
        let mut opt = AdamW::new(cfg);
        let mut theta = Tensor::row(&[1.5, -2.0]);
        let before = theta.clone();
        let grads = vec![Tensor::zeros(1, 2)];
        let mut named = vec![("theta".to_string(), &mut theta)];
        opt.step(&mut named, &grads).unwrap();
        assert_eq!(theta, before);
    }

    #[test]
    fn adamw_pure_decay_term() {
        let cfg = OptimConfig { lr: 0.1, weight_decay: 0.01, ..OptimConfig::default() };
        let mut opt = AdamW::new(cfg);
        let mut theta = Tensor::scalar(3.0);
        let grads = vec![Tensor::scalar(0.0)];
        let mut named = vec![("theta".to_string(), &mut theta)];
        opt.step(&mut named, &grads).unwrap();
        assert!((theta.item() - 3.0 * (1.0 - 0.001)).abs() < 1e-15);
    }

    #[test]
    fn adamw_with_zero_decay_equals_adam_oracle() {
        let cfg = OptimConfig { lr: 0.01, weight_decay: 0.0, ..OptimConfig::default() };
        let mut opt = AdamW::new(cfg);
        let mut theta = Tensor::row(&[0.5, -1.2, 2.0]);

        // hand-rolled Adam reference
        let mut ref_theta = [0.5, -1.2, 2.0];
        let mut m = [0.0; 3];
        let mut v = [0.0; 3];
        let mut rng = ChaCha8Rng::seed_from_u64(80);
        for t in 1..=25u32 {
            let g: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            for i in 0..3 {
                m[i] = 0.9 * m[i] + 0.1 * g[i];
                v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
                let mh = m[i] / (1.0 - 0.9f64.powi(t as i32));
                let vh = v[i] / (1.0 - 0.999f64.powi(t as i32));
                ref_theta[i] -= 0.01 * mh / (vh.sqrt() + 1e-8);
            }
            let grads = vec![Tensor::row(&g)];
            let mut named = vec![("theta".to_string(), &mut theta)];
            opt.step(&mut named, &grads).unwrap();
        }
        for (a, b) in theta.data().iter().zip(&ref_theta) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn adamw_rejects_nan_gradient() {
        let mut opt = AdamW::new(OptimConfig::default());
        let mut theta = Tensor::scalar(1.0);
        let grads = vec![Tensor::scalar(f64::NAN)];
        let mut named = vec![("proj".to_string(), &mut theta)];
        let err = opt.step(&mut named, &grads).unwrap_err();
        assert!(err.to_string().contains("proj"));
    }

    #[test]
    fn balanced_batches_even_split() {
        let mut rng = ChaCha8Rng::seed_from_u64(81);
        let labels: Vec<u8> = [vec![1u8; 8], vec![0u8; 8]].concat();
        let batches = balanced_batches(&labels, 4, &mut rng).unwrap();
        assert_eq!(batches.len(), 4);
        for b in &batches {
            assert_eq!(b.len(), 4);
            let pos = b.iter().filter(|&&i| labels[i] == 1).count();
            assert_eq!(pos, 2);
        }
    }

    #[test]
    fn balanced_batches_skewed_cohort() {
        let mut rng = ChaCha8Rng::seed_from_u64(82);
        let labels: Vec<u8> = [vec![1u8; 303], vec![0u8; 127]].concat();
        let batches = balanced_batches(&labels, 16, &mut rng).unwrap();
        let mut seen_majority: std::collections::BTreeSet<usize> = Default::default();
        for b in &batches {
            assert_eq!(b.len(), 16);
            let pos = b.iter().filter(|&&i| labels[i] == 1).count();
            assert_eq!(pos, 8);
            seen_majority.extend(b.iter().filter(|&&i| labels[i] == 1));
        }
        // every majority index appears at least once in the epoch
        assert_eq!(seen_majority.len(), 303);
    }

    #[test]
    fn balanced_batches_count_diff_at_most_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(83);
        for _ in 0..100 {
            let n = rng.gen_range(4..200);
            let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2) as u8).collect();
            labels[0] = 0;
            labels[1] = 1;
            let b = rng.gen_range(2..20);
            for batch in balanced_batches(&labels, b, &mut rng).unwrap() {
                let pos = batch.iter().filter(|&&i| labels[i] == 1).count() as i64;
                let neg = batch.len() as i64 - pos;
                assert!((pos - neg).abs() <= 1, "pos {pos} neg {neg}");
            }
        }
    }

    #[test]
    fn balanced_batches_single_class_is_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(84);
        assert!(matches!(
            balanced_batches(&[1, 1, 1], 2, &mut rng),
            Err(Error::Degenerate(_))
        ));
    }

    fn tiny_cohort(seed: u64, n: usize, shift: f64) -> Vec<crate::graph::LesionGraph> {
        use crate::graph::{build_graph, GraphConfig, Lesion, Region};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let label = (i % 2) as u8;
                let lesions: Vec<Lesion> = (0..rng.gen_range(2..6))
                    .map(|_| Lesion {
                        position: [rng.gen(), rng.gen(), rng.gen()],
                        features: (0..6)
                            .map(|_| rng.gen_range(-1.0..1.0) + label as f64 * shift)
                            .collect(),
                        region: Region::Subcortical,
                    })
                    .collect();
                let cfg = GraphConfig { k: 3, tau: 0.7, ..GraphConfig::default() };
                build_graph(lesions, label, format!("p{i}"), &cfg).unwrap()
            })
            .collect()
    }

    fn small_model_config() -> ModelConfig {
        ModelConfig {
            feature_dim: 6,
            hidden_dims: vec![8, 4],
            head_dims: vec![4, 4],
            tau: 0.7,
            k: 3,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn train_fold_rejects_zero_epochs() {
        let cohort = tiny_cohort(85, 8, 1.0);
        let refs: Vec<&crate::graph::LesionGraph> = cohort.iter().collect();
        let tcfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
        let res = train_fold(
            &refs[..6],
            &refs[6..],
            &small_model_config(),
            &tcfg,
            &OptimConfig::default(),
            1,
        );
        assert!(matches!(res, Err(Error::Param(_))));
    }

    #[test]
    fn train_fold_is_deterministic() {
        let cohort = tiny_cohort(86, 12, 1.0);
        let refs: Vec<&crate::graph::LesionGraph> = cohort.iter().collect();
        let tcfg = TrainConfig { epochs: 3, batch_size: 4, balanced_sampling: true };
        let run = || {
            train_fold(
                &refs[..8],
                &refs[8..],
                &small_model_config(),
                &tcfg,
                &OptimConfig::default(),
                7,
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.history.len(), b.history.len());
        for (x, y) in a.history.iter().zip(&b.history) {
            assert_eq!(x.train_loss.to_bits(), y.train_loss.to_bits());
            assert_eq!(x.val_auc.to_bits(), y.val_auc.to_bits());
        }
        for ((_, t1), (_, t2)) in a.best.named().iter().zip(b.best.named().iter()) {
            assert_eq!(t1, t2);
        }
    }

    #[test]
    fn training_reduces_loss_on_separable_cohort() {
        let cohort = tiny_cohort(87, 24, 2.0);
        let refs: Vec<&crate::graph::LesionGraph> = cohort.iter().collect();
        let tcfg = TrainConfig { epochs: 40, batch_size: 8, balanced_sampling: true };
        let ocfg = OptimConfig { lr: 5e-3, ..OptimConfig::default() };
        let mcfg = ModelConfig { dropout: 0.0, ..small_model_config() };
        let out = train_fold(&refs[..20], &refs[20..], &mcfg, &tcfg, &ocfg, 3).unwrap();
        let first = out.history.first().unwrap().train_loss;
        let last = out.history.last().unwrap().train_loss;
        assert!(last < first, "loss did not decrease: {first} -> {last}");
    }
}
