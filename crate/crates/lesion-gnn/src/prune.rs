//! Self-pruning module (SPM): score every enriched lesion with a learnable
//! projection, keep the top ceil(N*r), and gate the kept rows by their
//! scores so the projection receives gradient.

use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result};

/// Per-lesion importance scores and the retained subset, exported for
/// explainability.
#[derive(Clone, Debug)]
pub struct PruneResult {
    /// Post-sigmoid importance score per lesion, in (0, 1).
    pub scores: Vec<f64>,
    /// Indices of the kept lesions, ascending.
    pub retained: Vec<usize>,
    /// Kept feature rows scaled by their scores (value snapshot).
    pub gated_features: Tensor,
}

/// sigma(Z_hat p / ||p||) as an Nx1 column. Differentiable in both inputs;
/// a zero-norm p is guarded by an epsilon inside `normalize`.
pub fn compute_scores(tape: &mut Tape, z_hat: Var, p: Var) -> Result<Var> {
    let unit = tape.normalize(p);
    let raw = tape.matmul(z_hat, unit)?;
    Ok(tape.sigmoid(raw))
}

/// Indices of the ceil(N*r) largest scores; ties broken by smaller index.
/// The returned set is sorted ascending.
pub fn top_r_select(scores: &[f64], r: f64) -> Result<Vec<usize>> {
    if !(r > 0.0 && r <= 1.0) {
        return Err(Error::Param(format!("retention ratio r must be in (0, 1], got {r}")));
    }
    if scores.is_empty() {
        return Err(Error::Param("top_r_select on empty score vector".into()));
    }
    let keep = (scores.len() as f64 * r).ceil() as usize;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut retained: Vec<usize> = order.into_iter().take(keep).collect();
    retained.sort_unstable();
    Ok(retained)
}

/// Gate the retained rows: row i of the output is score_i * z_hat_i.
pub fn apply_gate(tape: &mut Tape, z_hat: Var, scores: Var, retained: &[usize]) -> Result<Var> {
    let rows = tape.gather_rows(z_hat, retained);
    let gates = tape.gather_rows(scores, retained);
    tape.mul_col(rows, gates)
}

/// Full SPM forward: score, select, gate. `unit_gates` replaces the score
/// gates by 1.0 (used to check the r=1 vs no-SPM identity).
pub fn spm_forward(
    tape: &mut Tape,
    z_hat: Var,
    p: Var,
    r: f64,
    unit_gates: bool,
) -> Result<(Var, PruneResult)> {
    let scores_var = compute_scores(tape, z_hat, p)?;
    let scores: Vec<f64> = tape.value(scores_var).data().to_vec();
    let retained = top_r_select(&scores, r)?;
    let gated = if unit_gates {
        tape.gather_rows(z_hat, &retained)
    } else {
        apply_gate(tape, z_hat, scores_var, &retained)?
    };
    let result = PruneResult {
        scores,
        retained,
        gated_features: tape.value(gated).clone(),
    };
    Ok((gated, result))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::check_gradients;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn orthogonal_row_scores_half() {
        let mut tape = Tape::new();
        let z = tape.param(Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap());
        let p = tape.param(Tensor::column(&[1.0, 0.0]));
        let s = compute_scores(&mut tape, z, p).unwrap();
        assert!((tape.value(s).data()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn scores_are_invariant_to_p_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let z = random_tensor(&mut rng, 6, 4);
        let p = random_tensor(&mut rng, 4, 1);
        let run = |p: &Tensor| {
            let mut tape = Tape::new();
            let zv = tape.param(z.clone());
            let pv = tape.param(p.clone());
            let s = compute_scores(&mut tape, zv, pv).unwrap();
            tape.value(s).data().to_vec()
        };
        let base = run(&p);
        let scaled = run(&p.map(|v| 2.0 * v));
        for (a, b) in base.iter().zip(&scaled) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn scores_match_dot_product_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let z = random_tensor(&mut rng, 5, 4);
        let p = random_tensor(&mut rng, 4, 1);
        let mut tape = Tape::new();
        let zv = tape.param(z.clone());
        let pv = tape.param(p.clone());
        let s = compute_scores(&mut tape, zv, pv).unwrap();
        let norm = p.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        for i in 0..5 {
            let dot: f64 = (0..4).map(|j| z.get(i, j) * p.get(j, 0)).sum();
            let expect = 1.0 / (1.0 + (-dot / norm).exp());
            assert!((tape.value(s).data()[i] - expect).abs() < 1e-9);
            let v = tape.value(s).data()[i];
            assert!(v > 0.0 && v < 1.0);
        }
    }

    #[test]
    fn top_r_counts() {
        // N=7, r=0.5 -> ceil(3.5) = 4 kept
        let scores: Vec<f64> = (0..7).map(|i| i as f64 / 10.0).collect();
        assert_eq!(top_r_select(&scores, 0.5).unwrap().len(), 4);
        // single lesion always kept
        assert_eq!(top_r_select(&[0.3], 0.1).unwrap(), vec![0]);
        // r=1 keeps all
        assert_eq!(top_r_select(&scores, 1.0).unwrap().len(), 7);
    }

    #[test]
    fn top_r_grid_exhaustive() {
        for n in 1..=50usize {
            let scores: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
            for step in 1..=10usize {
                let r = step as f64 / 10.0;
                let retained = top_r_select(&scores, r).unwrap();
                assert_eq!(retained.len(), (n as f64 * r).ceil() as usize, "n={n} r={r}");
            }
        }
    }

    #[test]
    fn top_r_tie_break_by_index() {
        // keep = ceil(3 * 0.3) = 1; the 0.9 tie resolves to the smaller index
        let retained = top_r_select(&[0.9, 0.9, 0.1], 0.3).unwrap();
        assert_eq!(retained, vec![0]);
        // exhaustive sort oracle on random ties
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        for _ in 0..50 {
            let n = rng.gen_range(1..20);
            let scores: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..4) as f64) / 4.0).collect();
            let r = rng.gen_range(1..=10) as f64 / 10.0;
            let got = top_r_select(&scores, r).unwrap();
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| {
                scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b))
            });
            let keep = (n as f64 * r).ceil() as usize;
            let mut expect: Vec<usize> = order[..keep].to_vec();
            expect.sort_unstable();
            assert_eq!(got, expect);
        }
    }

    #[test]
    fn top_r_rejects_bad_r() {
        assert!(top_r_select(&[0.5], 0.0).is_err());
        assert!(top_r_select(&[0.5], 1.5).is_err());
        assert!(top_r_select(&[0.5], -0.1).is_err());
    }

    #[test]
    fn selection_invariant_under_constant_score_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        for _ in 0..20 {
            let n = rng.gen_range(1..30);
            let pre: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
            let s1: Vec<f64> = pre.iter().map(|&x| sig(x)).collect();
            let s2: Vec<f64> = pre.iter().map(|&x| sig(x + 1.7)).collect();
            assert_eq!(top_r_select(&s1, 0.5).unwrap(), top_r_select(&s2, 0.5).unwrap());
        }
    }

    #[test]
    fn gate_scales_rows_by_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(54);
        let z = random_tensor(&mut rng, 4, 3);
        let p = random_tensor(&mut rng, 3, 1);
        let mut tape = Tape::new();
        let zv = tape.param(z.clone());
        let pv = tape.param(p);
        let (gated, result) = spm_forward(&mut tape, zv, pv, 1.0, false).unwrap();
        assert_eq!(result.retained, vec![0, 1, 2, 3]);
        for (row, &i) in result.retained.iter().enumerate() {
            for j in 0..3 {
                let expect = result.scores[i] * z.get(i, j);
                assert!((tape.value(gated).get(row, j) - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn gated_output_identical_under_p_rescale() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let z = random_tensor(&mut rng, 9, 4);
        let p = random_tensor(&mut rng, 4, 1);
        let run = |p: &Tensor| {
            let mut tape = Tape::new();
            let zv = tape.param(z.clone());
            let pv = tape.param(p.clone());
            let (gated, res) = spm_forward(&mut tape, zv, pv, 0.5, false).unwrap();
            (tape.value(gated).clone(), res.retained)
        };
        let (g1, r1) = run(&p);
        let (g2, r2) = run(&p.map(|v| 3.5 * v));
        assert_eq!(r1, r2);
        for (a, b) in g1.data().iter().zip(g2.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_flows_to_projection_through_gating() {
        let mut rng = ChaCha8Rng::seed_from_u64(56);
        let z = random_tensor(&mut rng, 8, 4);
        let p = random_tensor(&mut rng, 4, 1);
        // freeze the selection so finite differences see a smooth function
        let retained = {
            let mut tape = Tape::new();
            let zv = tape.constant(z.clone());
            let pv = tape.param(p.clone());
            let s = compute_scores(&mut tape, zv, pv).unwrap();
            top_r_select(tape.value(s).data(), 0.5).unwrap()
        };
        let err = check_gradients(
            |tape, pv| {
                let zv = tape.constant(z.clone());
                let s = compute_scores(tape, zv, pv)?;
                let gated = apply_gate(tape, zv, s, &retained)?;
                let sq = tape.mul(gated, gated)?;
                Ok(tape.sum_all(sq))
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");

        // and the gradient is actually nonzero
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let pv = tape.param(p.clone());
        let s = compute_scores(&mut tape, zv, pv).unwrap();
        let gated = apply_gate(&mut tape, zv, s, &retained).unwrap();
        let sq = tape.mul(gated, gated).unwrap();
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss).unwrap();
        let gp = grads.get(pv).unwrap();
        assert!(gp.data().iter().any(|&v| v.abs() > 1e-12));
    }
}
