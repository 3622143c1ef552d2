use serde::{Deserialize, Serialize};

use super::{ModelVars, SplitModel};
use crate::error::{Error, Result};
use crate::optim::AdamState;
use crate::rng::Rng;
use crate::tape::GradTape;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    /// Sequences per optimizer step.
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            lr: 0.01,
            batch: 4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    /// Mean loss over the first tenth of the run.
    pub initial_smoothed: f64,
    /// Mean loss over the last tenth of the run.
    pub final_smoothed: f64,
}

/// Next-token cross-entropy training with Adam on every parameter.
///
/// Fails with [`Error::NonConvergence`] unless the smoothed loss at the
/// end of the run is strictly below the smoothed loss at the start.
pub fn toy_train(model: &mut SplitModel, corpus: &[Vec<usize>], cfg: &TrainConfig) -> Result<TrainReport> {
    let max = model.config().max_seq_len;
    let seqs: Vec<&[usize]> = corpus
        .iter()
        .filter(|s| s.len() >= 2)
        .map(|s| &s[..s.len().min(max + 1)])
        .collect();
    if seqs.is_empty() {
        return Err(Error::Empty("training corpus"));
    }
    if cfg.steps == 0 || cfg.batch == 0 {
        return Err(Error::InvalidArgument("steps and batch must be positive".into()));
    }
    let mut rng = Rng::new(cfg.seed);
    let mut states: Vec<AdamState> = model
        .params_mut()
        .iter()
        .map(|p| AdamState::new(p.shape(), cfg.lr))
        .collect();
    debug_assert_eq!(states.len(), model.param_count());
    let mut losses = Vec::with_capacity(cfg.steps);

    for _ in 0..cfg.steps {
        let mut tape = GradTape::new();
        let vars = ModelVars::trainable(&mut tape, model);
        let mut total = None;
        for _ in 0..cfg.batch {
            let s = seqs[rng.below(seqs.len())];
            let (input, target) = (&s[..s.len() - 1], &s[1..]);
            let logits = vars.logits(&mut tape, model, input)?;
            let ce = tape.cross_entropy(logits, target)?;
            total = Some(match total {
                None => ce,
                Some(t) => tape.add(t, ce)?,
            });
        }
        let loss = tape.scale(total.expect("batch is positive"), 1.0 / cfg.batch as f64)?;
        losses.push(tape.value(loss).item());
        let mut grads = tape.backward(loss)?;
        let leaves = vars.all();
        for ((param, state), var) in model.params_mut().into_iter().zip(&mut states).zip(leaves) {
            if let Some(g) = grads.take(var) {
                state.step(param, &g)?;
            }
        }
    }

    let w = (cfg.steps / 10).max(1);
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let initial_smoothed = mean(&losses[..w]);
    let final_smoothed = mean(&losses[losses.len() - w..]);
    if !(final_smoothed < initial_smoothed) {
        return Err(Error::NonConvergence {
            initial: initial_smoothed,
            last: final_smoothed,
        });
    }
    Ok(TrainReport {
        losses,
        initial_smoothed,
        final_smoothed,
    })
}
