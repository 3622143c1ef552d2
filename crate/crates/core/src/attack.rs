//! ActInv: recover the client's prompt from cut-layer activations.
//!
//! Phase one optimizes dummy embeddings so the client submodel maps them
//! close to the observed activations. Phase two snaps every optimized row to
//! its nearest embedding-table row.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SplitModel;
use crate::optim::AdamState;
use crate::rng::Rng;
use crate::tape::{row_cosine_distance_single, row_cosine_distance_value, GradTape};
use crate::tensor::Tensor;

/// Default enumeration cap for [`brute_force_invert`].
pub const BRUTE_FORCE_CAP: u128 = 1 << 20;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Distance {
    #[default]
    Cosine,
    Euclidean,
}

impl Distance {
    pub fn name(self) -> &'static str {
        match self {
            Distance::Cosine => "cosine",
            Distance::Euclidean => "euclidean",
        }
    }

    /// Distance between two rows.
    pub fn rows(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Distance::Cosine => row_cosine_distance_single(a, b),
            Distance::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum(),
        }
    }
}

impl fmt::Display for Distance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Distance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Distance::Cosine),
            "euclidean" => Ok(Distance::Euclidean),
            _ => Err(Error::InvalidArgument(format!("unknown distance {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitKind {
    /// L rows drawn uniformly from the embedding table.
    #[default]
    SampleEmbeddingRows,
    /// Entries drawn from N(0, 1/D).
    Gaussian,
}

impl FromStr for InitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sample-embedding-rows" => Ok(InitKind::SampleEmbeddingRows),
            "gaussian" => Ok(InitKind::Gaussian),
            _ => Err(Error::InvalidArgument(format!("unknown init {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub iterations: usize,
    pub lr: f64,
    pub distance: Distance,
    /// Distance used for token projection; defaults to `distance`.
    pub projection: Option<Distance>,
    pub init: InitKind,
    /// Extra optimization runs from fresh initializations.
    pub restarts: usize,
    /// Record a trace point every this many iterations; 0 disables tracing.
    pub trace_every: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            lr: 0.01,
            distance: Distance::Cosine,
            projection: None,
            init: InitKind::SampleEmbeddingRows,
            restarts: 0,
            trace_every: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidConfig("attack iterations must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("attack learning rate must be > 0, got {}", self.lr)));
        }
        Ok(())
    }

    pub fn projection_distance(&self) -> Distance {
        self.projection.unwrap_or(self.distance)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub restart: usize,
    pub iteration: usize,
    pub distance: f64,
    /// Positional token accuracy of the current iterate, when ground truth is supplied.
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Inversion {
    pub embeddings: Tensor,
    pub distance: f64,
    /// Distance of the first initialization.
    pub initial_distance: f64,
    pub trace: Vec<TracePoint>,
    /// Restarts abandoned because the loss became non-finite.
    pub diverged: usize,
}

#[derive(Clone, Debug)]
pub struct AttackResult {
    pub tokens: Vec<usize>,
    pub embeddings: Tensor,
    pub distance: f64,
    pub projection: Distance,
    pub trace: Vec<TracePoint>,
    pub wall_time: f64,
}

/// Mean row distance between two L×D activations.
///
/// Cosine: mean of `1 − cos` per row pair, a zero-norm row counting as 1.
/// Euclidean: mean squared row distance.
pub fn activation_distance(a: &Tensor, b: &Tensor, kind: Distance) -> Result<f64> {
    if a.shape() != b.shape() || a.rank() != 2 {
        return Err(Error::ShapeMismatch {
            op: "activation_distance",
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    Ok(match kind {
        Distance::Cosine => row_cosine_distance_value(a, b),
        Distance::Euclidean => {
            let d = a.sub(b)?;
            d.dot(&d) / a.rows() as f64
        }
    })
}

/// Nearest embedding-table row for every row of `h`; ties go to the smaller id.
pub fn project_to_tokens(h: &Tensor, embedding: &Tensor, kind: Distance) -> Vec<usize> {
    (0..h.rows())
        .map(|r| {
            let row = h.row(r);
            let mut best = (0, f64::INFINITY);
            for v in 0..embedding.rows() {
                let d = kind.rows(row, embedding.row(v));
                if d < best.1 {
                    best = (v, d);
                }
            }
            best.0
        })
        .collect()
}

fn initial_embeddings(model: &SplitModel, l: usize, init: InitKind, rng: &mut Rng) -> Tensor {
    let d = model.config().hidden_dim;
    match init {
        InitKind::SampleEmbeddingRows => {
            let v = model.config().vocab_size;
            let mut data = Vec::with_capacity(l * d);
            for _ in 0..l {
                data.extend_from_slice(model.embedding.row(rng.below(v)));
            }
            Tensor::new(vec![l, d], data).expect("row lengths match")
        }
        InitKind::Gaussian => {
            let sd = 1.0 / (d as f64).sqrt();
            Tensor::new(vec![l, d], rng.normals(l * d).into_iter().map(|x| x * sd).collect()).expect("sized")
        }
    }
}

fn positional_accuracy(a: &[usize], b: &[usize]) -> f64 {
    let hits = a.iter().zip(b).filter(|(x, y)| x == y).count();
    hits as f64 / b.len().max(1) as f64
}

/// Optimizes dummy embeddings to match `h_obs` through the client submodel.
///
/// Returns the iterate with the lowest distance seen across all iterations
/// and restarts. `truth` only feeds the trace.
pub fn invert_activations(
    model: &SplitModel,
    h_obs: &Tensor,
    cfg: &AttackConfig,
    rng: &mut Rng,
    truth: Option<&[usize]>,
) -> Result<Inversion> {
    cfg.validate()?;
    let d = model.config().hidden_dim;
    if h_obs.rank() != 2 || h_obs.cols() != d || h_obs.rows() == 0 {
        return Err(Error::ShapeMismatch {
            op: "invert_activations",
            detail: format!("observed activations {:?}, hidden size {d}", h_obs.shape()),
        });
    }
    let l = h_obs.rows();
    let proj = cfg.projection_distance();
    let mut best: Option<(f64, Tensor)> = None;
    let mut initial_distance = f64::NAN;
    let mut trace = Vec::new();
    let mut diverged = 0;

    for restart in 0..=cfg.restarts {
        let mut x = initial_embeddings(model, l, cfg.init, rng);
        let mut adam = AdamState::new(x.shape(), cfg.lr);
        let mut ok = true;
        for it in 0..=cfg.iterations {
            let mut tape = GradTape::new();
            let xv = tape.leaf(x.clone());
            let y = model.client_forward_on(&mut tape, xv)?;
            let obs = tape.constant_ref(h_obs);
            let loss = match cfg.distance {
                Distance::Cosine => tape.row_cosine_distance(y, obs),
                Distance::Euclidean => tape.mean_squared_row_distance(y, obs),
            };
            let loss = match loss {
                Ok(v) => v,
                Err(Error::NonFinite(_)) => {
                    ok = false;
                    break;
                }
                Err(e) => return Err(e),
            };
            let dist = tape.value(loss).item();
            if restart == 0 && it == 0 {
                initial_distance = dist;
            }
            if best.as_ref().map_or(true, |(b, _)| dist < *b) {
                best = Some((dist, x.clone()));
            }
            if cfg.trace_every > 0 && (it % cfg.trace_every == 0 || it == cfg.iterations) {
                trace.push(TracePoint {
                    restart,
                    iteration: it,
                    distance: dist,
                    accuracy: truth.map(|t| positional_accuracy(&project_to_tokens(&x, &model.embedding, proj), t)),
                });
            }
            if it == cfg.iterations {
                break;
            }
            let grads = match tape.backward(loss) {
                Ok(g) => g,
                Err(Error::NonFinite(_)) => {
                    ok = false;
                    break;
                }
                Err(e) => return Err(e),
            };
            if let Some(g) = grads.get(xv) {
                adam.step(&mut x, g)?;
            }
            if !x.is_finite() {
                ok = false;
                break;
            }
        }
        if !ok {
            diverged += 1;
        }
    }
    match best {
        Some((distance, embeddings)) => Ok(Inversion {
            embeddings,
            distance,
            initial_distance,
            trace,
            diverged,
        }),
        None => Err(Error::Diverged(cfg.restarts + 1)),
    }
}

/// Inversion followed by nearest-neighbor token projection.
pub fn actinv(
    model: &SplitModel,
    h_obs: &Tensor,
    cfg: &AttackConfig,
    rng: &mut Rng,
    truth: Option<&[usize]>,
) -> Result<AttackResult> {
    let start = Instant::now();
    let inv = invert_activations(model, h_obs, cfg, rng, truth)?;
    let projection = cfg.projection_distance();
    let tokens = project_to_tokens(&inv.embeddings, &model.embedding, projection);
    Ok(AttackResult {
        tokens,
        embeddings: inv.embeddings,
        distance: inv.distance,
        projection,
        trace: inv.trace,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// Sequence `index` in lexicographic order over `[0, v)^l`.
fn nth_sequence(mut index: u128, v: usize, l: usize) -> Vec<usize> {
    let mut out = vec![0; l];
    for slot in out.iter_mut().rev() {
        *slot = (index % v as u128) as usize;
        index /= v as u128;
    }
    out
}

/// Exhaustive search for the sequence whose client activations are closest
/// to `h_obs`; ties go to the lexicographically smallest sequence.
pub fn brute_force_invert(model: &SplitModel, h_obs: &Tensor, kind: Distance, cap: u128) -> Result<(Vec<usize>, f64)> {
    let v = model.config().vocab_size;
    let l = h_obs.rows();
    let total = (v as u128)
        .checked_pow(l as u32)
        .filter(|&t| t <= cap)
        .ok_or(Error::CapExceeded {
            size: (v as u128).saturating_pow(l as u32),
            cap,
        })?;
    // One chunk per leading token keeps the reduction order fixed.
    let per_first = total / v as u128;
    let chunks: Vec<Result<(u128, f64)>> = (0..v as u128)
        .into_par_iter()
        .map(|first| {
            let mut best = (u128::MAX, f64::INFINITY);
            for i in first * per_first..(first + 1) * per_first {
                let ids = nth_sequence(i, v, l);
                let h = model.client_forward(&model.embed(&ids)?)?;
                let d = activation_distance(&h, h_obs, kind)?;
                if d < best.1 {
                    best = (i, d);
                }
            }
            Ok(best)
        })
        .collect();
    let mut best = (u128::MAX, f64::INFINITY);
    for c in chunks {
        let c = c?;
        if c.1 < best.1 {
            best = c;
        }
    }
    if best.0 == u128::MAX {
        return Err(Error::NonFinite("brute_force_invert"));
    }
    Ok((nth_sequence(best.0, v, l), best.1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::defense::element_sparsify;
    use crate::model::ModelConfig;

    fn model(split: usize, vocab: usize, d: usize) -> SplitModel {
        SplitModel::init(ModelConfig {
            vocab_size: vocab,
            hidden_dim: d,
            num_blocks: 2,
            split_point: split,
            num_heads: 2,
            ffn_dim: 2 * d,
            max_seq_len: 4,
            seed: 21,
        })
        .unwrap()
    }

    fn short(iterations: usize) -> AttackConfig {
        AttackConfig {
            iterations,
            ..AttackConfig::default()
        }
    }

    #[test]
    fn distance_examples() {
        let a = Tensor::from_rows(&[vec![1.0, 0.0], vec![2.0, 5.0]]).unwrap();
        assert_eq!(activation_distance(&a, &a, Distance::Cosine).unwrap(), 0.0);
        assert_eq!(activation_distance(&a, &a, Distance::Euclidean).unwrap(), 0.0);
        assert_eq!(activation_distance(&a, &a.scale(2.0), Distance::Cosine).unwrap(), 0.0);
        let x = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let y = Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap();
        assert_eq!(activation_distance(&x, &y, Distance::Cosine).unwrap(), 1.0);
        assert_eq!(activation_distance(&x, &y, Distance::Euclidean).unwrap(), 2.0);
        let z = Tensor::zeros(&[1, 2]);
        assert_eq!(activation_distance(&x, &z, Distance::Cosine).unwrap(), 1.0);
        assert!(activation_distance(&x, &a, Distance::Cosine).is_err());
    }

    #[test]
    fn projection_examples() {
        let m = model(1, 16, 8);
        let h = m.embed(&[7]).unwrap();
        assert_eq!(project_to_tokens(&h, &m.embedding, Distance::Cosine), vec![7]);
        let ids = [3, 0, 15, 3];
        let h = m.embed(&ids).unwrap();
        for kind in [Distance::Cosine, Distance::Euclidean] {
            assert_eq!(project_to_tokens(&h, &m.embedding, kind), ids.to_vec());
        }
        let mut rng = Rng::new(1);
        let h = Tensor::matrix(4, 8, rng.normals(32)).unwrap();
        for kind in [Distance::Cosine, Distance::Euclidean] {
            let got = project_to_tokens(&h, &m.embedding, kind);
            for (r, &tok) in got.iter().enumerate() {
                let scan: Vec<f64> = (0..16).map(|v| kind.rows(h.row(r), m.embedding.row(v))).collect();
                let min = scan.iter().cloned().fold(f64::INFINITY, f64::min);
                assert_eq!(tok, scan.iter().position(|d| *d == min).unwrap());
            }
            let again = project_to_tokens(&m.embed(&got).unwrap(), &m.embedding, kind);
            assert_eq!(again, got);
        }
    }

    #[test]
    fn identity_client_is_matched() {
        let m = model(0, 16, 8);
        let ids = [4, 9, 9, 1];
        let h = m.client_forward(&m.embed(&ids).unwrap()).unwrap();
        let r = actinv(&m, &h, &short(200), &mut Rng::new(2), Some(&ids)).unwrap();
        assert!(r.distance < 1e-6, "distance {}", r.distance);
        assert_eq!(r.tokens, ids.to_vec());
    }

    #[test]
    fn best_iterate_never_worse_than_start() {
        let m = model(1, 16, 8);
        let h = m.client_forward(&m.embed(&[1, 2, 3]).unwrap()).unwrap();
        let cfg = AttackConfig {
            trace_every: 10,
            ..short(50)
        };
        let inv = invert_activations(&m, &h, &cfg, &mut Rng::new(3), Some(&[1, 2, 3])).unwrap();
        assert!(inv.distance <= inv.initial_distance);
        assert_eq!(inv.trace.len(), 6);
        assert!(inv.trace.iter().all(|t| t.accuracy.is_some()));
    }

    #[test]
    fn defended_channel_keeps_a_gap() {
        let m = model(1, 16, 8);
        let h = m.client_forward(&m.embed(&[5, 6, 7, 8]).unwrap()).unwrap();
        let hd = element_sparsify(&h, 0.9).unwrap();
        let r = actinv(&m, &hd, &short(300), &mut Rng::new(4), None).unwrap();
        assert!(r.distance > 0.0);
    }

    #[test]
    fn cosine_attack_is_scale_invariant() {
        let m = model(1, 16, 8);
        let h = m.client_forward(&m.embed(&[5, 6, 7]).unwrap()).unwrap();
        let a = actinv(&m, &h, &short(100), &mut Rng::new(5), None).unwrap();
        let b = actinv(&m, &h.scale(4.0), &short(100), &mut Rng::new(5), None).unwrap();
        assert_eq!(a.tokens, b.tokens);
    }

    #[test]
    fn brute_force_matches_nested_loops() {
        let m = model(1, 4, 4);
        let truth = [2, 0, 3];
        let h = m.client_forward(&m.embed(&truth).unwrap()).unwrap();
        let (ids, d) = brute_force_invert(&m, &h, Distance::Cosine, BRUTE_FORCE_CAP).unwrap();
        assert_eq!(ids, truth.to_vec());
        assert_eq!(d, 0.0);

        let hd = element_sparsify(&h, 0.5).unwrap();
        let (got, gd) = brute_force_invert(&m, &hd, Distance::Cosine, BRUTE_FORCE_CAP).unwrap();
        let mut best = (vec![], f64::INFINITY);
        for a in 0..4 {
            for b in 0..4 {
                for c in 0..4 {
                    let s = vec![a, b, c];
                    let out = m.client_forward(&m.embed(&s).unwrap()).unwrap();
                    let d = activation_distance(&out, &hd, Distance::Cosine).unwrap();
                    if d < best.1 {
                        best = (s, d);
                    }
                }
            }
        }
        assert_eq!((got, gd), best);
        assert!(matches!(
            brute_force_invert(&m, &hd, Distance::Cosine, 10),
            Err(Error::CapExceeded { size: 64, cap: 10 })
        ));
    }
}
