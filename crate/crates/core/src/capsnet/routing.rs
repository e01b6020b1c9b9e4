//! Capsule squashing and routing-by-agreement.
//!
//! Value-level reference implementations. The network forward pass runs the
//! same recurrence on the differentiation tape; tests cross-check the two.

/// Squashing nonlinearity: `v * |v| / (1 + |v|^2)`.
///
/// Scales the norm into `[0, 1)` while preserving direction; the zero
/// vector maps to itself (the limit at the origin).
pub fn squash(v: &[f64]) -> Vec<f64> {
    let n2: f64 = v.iter().map(|x| x * x).sum();
    let g = n2.sqrt() / (1.0 + n2);
    v.iter().map(|x| x * g).collect()
}

/// Routing outcome: parent output vectors and the final coupling matrix.
#[derive(Debug, Clone)]
pub struct RoutingResult {
    /// Parent capsule outputs `v_j`, one vector per parent.
    pub outputs: Vec<Vec<f64>>,
    /// Final couplings `c_ij` indexed `[lower][parent]`; each row sums to 1.
    pub couplings: Vec<Vec<f64>>,
    /// Couplings after each iteration's softmax, for inspection.
    pub coupling_history: Vec<Vec<Vec<f64>>>,
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|b| (b - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Routing by agreement over prediction vectors `predictions[i][j]`
/// (lower capsule `i`'s prediction for parent `j`).
///
/// Logits start at zero. Each of the `iterations` rounds: couplings are the
/// per-lower softmax over parents; each parent sums its coupled
/// predictions and squashes; logits grow by the prediction-output dot
/// product, strengthening the bond to parents that agree.
pub fn dynamic_routing(predictions: &[Vec<Vec<f64>>], iterations: usize) -> RoutingResult {
    assert!(iterations >= 1, "routing needs at least one iteration");
    let num_lower = predictions.len();
    let num_parents = predictions[0].len();
    let dim = predictions[0][0].len();

    let mut logits = vec![vec![0.0; num_parents]; num_lower];
    let mut couplings = vec![vec![0.0; num_parents]; num_lower];
    let mut outputs = vec![vec![0.0; dim]; num_parents];
    let mut coupling_history = Vec::with_capacity(iterations);

    for _ in 0..iterations {
        for (i, row) in logits.iter().enumerate() {
            couplings[i] = softmax(row);
        }
        coupling_history.push(couplings.clone());

        for (j, out) in outputs.iter_mut().enumerate() {
            let mut s = vec![0.0; dim];
            for (i, preds) in predictions.iter().enumerate() {
                let c = couplings[i][j];
                for (sd, pd) in s.iter_mut().zip(&preds[j]) {
                    *sd += c * pd;
                }
            }
            *out = squash(&s);
        }

        for (i, preds) in predictions.iter().enumerate() {
            for (j, out) in outputs.iter().enumerate() {
                let agreement: f64 = preds[j].iter().zip(out).map(|(a, b)| a * b).sum();
                logits[i][j] += agreement;
            }
        }
    }

    RoutingResult { outputs, couplings, coupling_history }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn squash_fixed_points() {
        assert_eq!(squash(&[0.0, 0.0, 0.0]), vec![0.0, 0.0, 0.0]);

        let unit = squash(&[1.0, 0.0]);
        assert!((norm(&unit) - 0.5).abs() < 1e-12);
        assert!((unit[0] - 0.5).abs() < 1e-12 && unit[1].abs() < 1e-15);

        let big = squash(&[100.0, 0.0]);
        let expected = 100.0 * 100.0 / (1.0 + 100.0 * 100.0);
        assert!((norm(&big) - expected).abs() < 1e-12);
        assert!(big[0] > 0.0);
    }

    #[test]
    fn squash_norm_below_one_and_monotone() {
        let mut last = 0.0;
        for k in 1..200 {
            let x = k as f64 * 0.1;
            let n = norm(&squash(&[x, 0.0, 0.0]));
            assert!(n < 1.0);
            assert!(n > last, "norm not monotone at |v| = {x}");
            last = n;
        }
    }

    #[test]
    fn single_parent_takes_all_coupling() {
        // Softmax of a single logit is 1 regardless of iterations.
        let preds = vec![vec![vec![0.3, -0.7]]; 3];
        for r in 1..4 {
            let res = dynamic_routing(&preds, r);
            for row in &res.couplings {
                assert!((row[0] - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_logits_start_uniform() {
        // 4 parents: the first softmax (before any agreement update) is 0.25.
        let preds = vec![vec![vec![1.0, 0.0]; 4]; 2];
        let res = dynamic_routing(&preds, 3);
        for row in &res.coupling_history[0] {
            for c in row {
                assert!((c - 0.25).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn couplings_always_sum_to_one() {
        let preds = vec![
            vec![vec![0.5, 0.1], vec![-0.2, 0.4], vec![0.9, -0.9]],
            vec![vec![-0.5, 0.8], vec![0.3, 0.3], vec![0.0, -1.2]],
        ];
        for r in 1..5 {
            let res = dynamic_routing(&preds, r);
            for iter_couplings in &res.coupling_history {
                for row in iter_couplings {
                    let sum: f64 = row.iter().sum();
                    assert!((sum - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn aligned_parent_wins_and_strengthens() {
        // Both lower capsules predict the same direction for parent 0, but
        // mutually orthogonal directions for parent 1. Parent 0's output
        // reinforces, so agreement pulls the couplings toward it, strictly
        // per iteration.
        let aligned = vec![0.8, 0.0, 0.0];
        let preds = vec![
            vec![aligned.clone(), vec![0.0, 0.8, 0.0]],
            vec![aligned, vec![0.0, 0.0, 0.8]],
        ];
        let res = dynamic_routing(&preds, 3);
        for i in 0..2 {
            assert!(res.couplings[i][0] > res.couplings[i][1]);
            for w in res.coupling_history.windows(2) {
                assert!(
                    w[1][i][0] > w[0][i][0],
                    "coupling toward the aligned parent must increase: {:?}",
                    res.coupling_history
                );
            }
        }
        // Parent 0's output points along the agreed direction.
        assert!(res.outputs[0][0] > 0.0);
        assert!(res.outputs[0][1].abs() < 1e-12);
        assert!(res.outputs[0][2].abs() < 1e-12);
    }
}
