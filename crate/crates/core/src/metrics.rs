//! Reconstruction and statistical metrics over token-id sequences.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::defense::{apply_defense, DefenseContext, DefenseSpec};
use crate::error::{Error, Result};
use crate::model::{greedy_next, SplitModel};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconScore {
    /// Percentage in [0, 100].
    pub precision: f64,
    /// Percentage in [0, 100].
    pub recall: f64,
    /// LCS F1 in [0, 1].
    pub rouge_l: f64,
}

fn nonempty(xs: &[usize], what: &'static str) -> Result<()> {
    if xs.is_empty() {
        Err(Error::Empty(what))
    } else {
        Ok(())
    }
}

/// Bag-of-tokens precision and recall, in percent.
pub fn precision_recall(recovered: &[usize], truth: &[usize]) -> Result<(f64, f64)> {
    nonempty(recovered, "recovered sequence")?;
    nonempty(truth, "reference sequence")?;
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for &t in truth {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in recovered {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    let c = common as f64;
    Ok((100.0 * c / recovered.len() as f64, 100.0 * c / truth.len() as f64))
}

/// Longest common subsequence length.
pub fn lcs_len(a: &[usize], b: &[usize]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F1 with equal weighting of LCS precision and recall.
pub fn rouge_l(recovered: &[usize], truth: &[usize]) -> Result<f64> {
    nonempty(recovered, "recovered sequence")?;
    nonempty(truth, "reference sequence")?;
    let l = lcs_len(recovered, truth) as f64;
    if l == 0.0 {
        return Ok(0.0);
    }
    let p = l / recovered.len() as f64;
    let r = l / truth.len() as f64;
    Ok(2.0 * p * r / (p + r))
}

pub fn recon_score(recovered: &[usize], truth: &[usize]) -> Result<ReconScore> {
    let (precision, recall) = precision_recall(recovered, truth)?;
    Ok(ReconScore {
        precision,
        recall,
        rouge_l: rouge_l(recovered, truth)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correlation {
    pub r: f64,
    /// Set when either input has zero variance; `r` is then 0.
    pub degenerate: bool,
}

/// Sample Pearson correlation.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<Correlation> {
    if xs.len() != ys.len() {
        return Err(Error::ShapeMismatch {
            op: "pearson",
            detail: format!("{} vs {} values", xs.len(), ys.len()),
        });
    }
    if xs.len() < 2 {
        return Err(Error::InvalidArgument("pearson needs at least two points".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(Correlation { r: 0.0, degenerate: true });
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    Ok(Correlation { r, degenerate: false })
}

/// Mean and sample standard deviation (n − 1 denominator, 0 for a single value).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return Self { mean: f64::NAN, std: f64::NAN, n };
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std, n }
    }

    pub fn stderr(&self) -> f64 {
        if self.n == 0 {
            f64::NAN
        } else {
            self.std / (self.n as f64).sqrt()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtilityScore {
    /// Fraction of prompts whose greedy next token is unchanged by the defense.
    pub agreement: f64,
    /// Mean KL(clean ‖ defended) of the next-token distributions.
    pub kl_divergence: f64,
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// KL divergence between the softmax distributions of two logit rows.
pub fn kl_from_logits(clean: &[f64], defended: &[f64]) -> f64 {
    let p = log_softmax(clean);
    let q = log_softmax(defended);
    p.iter().zip(&q).map(|(lp, lq)| lp.exp() * (lp - lq)).sum::<f64>().max(0.0)
}

/// Next-token agreement and divergence between clean and defended pipelines.
///
/// Prompt `i` draws defense randomness from `rng.derive(i)`.
pub fn utility_proxy(model: &SplitModel, prompts: &[Vec<usize>], spec: &DefenseSpec, rng: &Rng) -> Result<UtilityScore> {
    if prompts.is_empty() {
        return Err(Error::Empty("utility corpus"));
    }
    let mut agree = 0usize;
    let mut kl = 0.0;
    for (i, ids) in prompts.iter().enumerate() {
        let h0 = model.embed(ids)?;
        let h = model.client_forward(&h0)?;
        let mut r = rng.derive(i as u64);
        let ctx = DefenseContext::new(model, &h0);
        let hd = apply_defense(&h, spec, Some(&ctx), &mut r)?;
        let clean = model.server_forward(&h)?;
        let defended = model.server_forward(&hd)?;
        if greedy_next(&clean) == greedy_next(&defended) {
            agree += 1;
        }
        let last = clean.rows() - 1;
        kl += kl_from_logits(clean.row(last), defended.row(last));
    }
    let n = prompts.len() as f64;
    Ok(UtilityScore {
        agreement: agree as f64 / n,
        kl_divergence: kl / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const A: usize = 0;
    const B: usize = 1;
    const C: usize = 2;
    const D: usize = 3;
    const E: usize = 4;

    #[test]
    fn hand_examples() {
        assert_eq!(precision_recall(&[A, B, C], &[A, B, C]).unwrap(), (100.0, 100.0));
        assert_eq!(precision_recall(&[A, C, B, E], &[A, B, C, D]).unwrap(), (75.0, 75.0));
        assert_eq!(precision_recall(&[A, A], &[A]).unwrap(), (50.0, 100.0));
        assert_eq!(rouge_l(&[A, B, C], &[A, B, C]).unwrap(), 1.0);
        assert_eq!(rouge_l(&[A, C, B, E], &[A, B, C, D]).unwrap(), 0.5);
        assert_eq!(rouge_l(&[A, B], &[C, D]).unwrap(), 0.0);
        assert!(rouge_l(&[], &[A]).is_err());
        assert!(precision_recall(&[A], &[]).is_err());
    }

    #[test]
    fn pearson_examples() {
        let xs = [1.0, 2.0, 4.0, 7.0];
        let up: Vec<f64> = xs.iter().map(|x| 2.0 * x + 3.0).collect();
        let down: Vec<f64> = xs.iter().map(|x| -x).collect();
        assert!((pearson(&xs, &up).unwrap().r - 1.0).abs() < 1e-15);
        assert!((pearson(&xs, &down).unwrap().r + 1.0).abs() < 1e-15);
        // Manual: means 3.5 and 2.5; sxy = 9, sxx = 21, syy = 5.
        let ys = [2.0, 1.0, 3.0, 4.0];
        let want = 9.0 / (21.0f64.sqrt() * 5.0f64.sqrt());
        assert!((pearson(&xs, &ys).unwrap().r - want).abs() < 1e-12);
        let flat = pearson(&xs, &[1.0; 4]).unwrap();
        assert!(flat.degenerate && flat.r == 0.0);
        assert!(pearson(&xs, &ys[..3]).is_err());
    }

    #[test]
    fn mean_std() {
        let s = MeanStd::of(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.mean, 2.5);
        assert!((s.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(MeanStd::of(&[3.0]).std, 0.0);
    }

    #[test]
    fn kl_is_zero_for_identical_rows() {
        assert_eq!(kl_from_logits(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]), 0.0);
        assert!(kl_from_logits(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) > 0.0);
    }

    fn seq() -> impl Strategy<Value = Vec<usize>> {
        proptest::collection::vec(0usize..6, 1..12)
    }

    proptest! {
        #[test]
        fn swapping_swaps_precision_and_recall(a in seq(), b in seq()) {
            let (p, r) = precision_recall(&a, &b).unwrap();
            let (p2, r2) = precision_recall(&b, &a).unwrap();
            prop_assert_eq!((p, r), (r2, p2));
        }

        #[test]
        fn rouge_is_symmetric_and_bounded_by_bag(a in seq(), b in seq()) {
            let r1 = rouge_l(&a, &b).unwrap();
            prop_assert_eq!(r1, rouge_l(&b, &a).unwrap());
            let l = lcs_len(&a, &b) as f64;
            let (p, r) = precision_recall(&a, &b).unwrap();
            prop_assert!(100.0 * l / a.len() as f64 <= p + 1e-12);
            prop_assert!(100.0 * l / b.len() as f64 <= r + 1e-12);
        }

        #[test]
        fn pearson_affine_invariant(
            xs in proptest::collection::vec(-10.0f64..10.0, 3..10),
            a in 0.1f64..5.0, b in -5.0f64..5.0,
        ) {
            let ys: Vec<f64> = xs.iter().enumerate().map(|(i, x)| x * x - i as f64).collect();
            let base = pearson(&xs, &ys).unwrap();
            let moved: Vec<f64> = xs.iter().map(|x| a * x + b).collect();
            let other = pearson(&moved, &ys).unwrap();
            prop_assert_eq!(base.degenerate, other.degenerate);
            prop_assert!((base.r - other.r).abs() < 1e-9);
        }
    }
}
