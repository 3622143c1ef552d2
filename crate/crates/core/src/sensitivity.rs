//! Perturbation amplification (PAF) analysis of client sub-layers.
//!
//! For a layer Jacobian `J` (`n×m`, row-vector convention) with eigenpairs
//! `(σ_i, μ_i)` of `JJᵀ`, one Monte Carlo draw `δ ~ N(0, I_m)` contributes
//! `Σ_i |‖J‖₂ cos θ_i / √(σ_i + 1)|`, where `θ_i` is the angle between `δJᵀ`
//! and `μ_i`. Every sub-layer acts on token rows independently, so a layer
//! Jacobian is block diagonal with one `d_in×d_out` block per row and the
//! eigenpairs of `JJᵀ` are the union of the per-block eigenpairs.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{actinv, AttackConfig};
use crate::defense::{apply_defense, DefenseContext, DefenseSpec};
use crate::error::{Error, Result};
use crate::linalg::{solve, sym_eig};
use crate::metrics::{pearson, rouge_l, Correlation, MeanStd};
use crate::model::{LayerRef, SplitModel};
use crate::rng::Rng;
use crate::tape::{jacobian, DEFAULT_JACOBIAN_CAP};
use crate::tensor::Tensor;

pub const DEFAULT_DRAWS: usize = 64;
pub const DEFAULT_INPUTS: usize = 100;
/// Eigenvalues below this fraction of the largest count as null space.
const NULL_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PafConfig {
    /// δ draws per input.
    pub draws: usize,
    /// Upper bound on the number of inputs used.
    pub max_inputs: usize,
    pub cap: usize,
}

impl Default for PafConfig {
    fn default() -> Self {
        Self {
            draws: DEFAULT_DRAWS,
            max_inputs: DEFAULT_INPUTS,
            cap: DEFAULT_JACOBIAN_CAP,
        }
    }
}

struct SpectralBlock {
    /// `Mᵀ J_b`: row `i` dotted with `δ_b` gives `δ_b J_bᵀ · μ_i`.
    k: Tensor,
    values: Vec<f64>,
}

/// Eigen-structure of a block-diagonal Jacobian, precomputed for sampling.
pub struct LayerSpectrum {
    blocks: Vec<usize>,
    unique: Vec<SpectralBlock>,
    widths: Vec<usize>,
    /// `‖J‖₂`.
    pub spectral_norm: f64,
    pub eig_min: f64,
    pub eig_max: f64,
}

impl LayerSpectrum {
    /// `blocks` are the diagonal blocks of `J`, in order. Identical blocks
    /// share one eigendecomposition.
    pub fn new(blocks: &[Tensor]) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::Empty("jacobian blocks"));
        }
        let mut uniq_src: Vec<&Tensor> = Vec::new();
        let mut unique = Vec::new();
        let mut index = Vec::with_capacity(blocks.len());
        for b in blocks {
            if b.rank() != 2 {
                return Err(Error::ShapeMismatch {
                    op: "LayerSpectrum",
                    detail: format!("block {:?}", b.shape()),
                });
            }
            if let Some(i) = uniq_src.iter().position(|u| *u == b) {
                index.push(i);
                continue;
            }
            let eig = sym_eig(&b.matmul_t(b)?)?;
            let k = eig.vectors.matmul(b)?;
            index.push(unique.len());
            uniq_src.push(b);
            unique.push(SpectralBlock {
                k,
                values: eig.values.iter().map(|v| v.max(0.0)).collect(),
            });
        }
        let all = unique.iter().flat_map(|u| u.values.iter().copied());
        let eig_max = all.clone().fold(0.0, f64::max);
        let eig_min = all.fold(f64::INFINITY, f64::min);
        Ok(Self {
            widths: blocks.iter().map(|b| b.cols()).collect(),
            blocks: index,
            unique,
            spectral_norm: eig_max.sqrt(),
            eig_min,
            eig_max,
        })
    }

    /// Total output width `m`.
    pub fn output_dim(&self) -> usize {
        self.widths.iter().sum()
    }

    pub fn is_zero(&self) -> bool {
        self.spectral_norm == 0.0
    }

    fn positive(&self) -> impl Iterator<Item = f64> + '_ {
        let tol = NULL_TOL * self.eig_max;
        self.blocks
            .iter()
            .flat_map(move |&b| self.unique[b].values.iter().copied().filter(move |v| *v > tol))
    }

    /// The single-draw summand for a given `δ` (length `m`).
    pub fn term(&self, delta: &[f64]) -> f64 {
        if self.is_zero() {
            return 0.0;
        }
        let mut norm_sq = 0.0;
        let mut weighted = 0.0;
        let mut offset = 0;
        for (&b, &w) in self.blocks.iter().zip(&self.widths) {
            let blk = &self.unique[b];
            let d = &delta[offset..offset + w];
            offset += w;
            for (i, s) in blk.values.iter().enumerate() {
                let c: f64 = blk.k.row(i).iter().zip(d).map(|(x, y)| x * y).sum();
                norm_sq += c * c;
                weighted += c.abs() / (s + 1.0).sqrt();
            }
        }
        if norm_sq == 0.0 {
            0.0
        } else {
            self.spectral_norm * weighted / norm_sq.sqrt()
        }
    }

    /// Supremum of [`term`](Self::term) over all directions:
    /// `‖J‖₂·√(Σ_{σ_i>0} 1/(σ_i+1))`, attained when `δJᵀ` has eigen-coordinates
    /// proportional to `1/√(σ_i+1)`.
    pub fn max_paf(&self) -> f64 {
        if self.is_zero() {
            return 0.0;
        }
        self.spectral_norm * self.positive().map(|s| 1.0 / (s + 1.0)).sum::<f64>().sqrt()
    }

    /// Amplification along the single eigen-direction with the smallest
    /// nonzero eigenvalue: `‖J‖₂ / √(σ_min + 1)`.
    pub fn aligned_paf(&self) -> f64 {
        if self.is_zero() {
            return 0.0;
        }
        let s_min = self.positive().fold(f64::INFINITY, f64::min);
        self.spectral_norm / (s_min + 1.0).sqrt()
    }
}

/// Monte Carlo PAF of a fixed Jacobian.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PafEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub samples: usize,
    pub max_paf: f64,
    pub aligned_paf: f64,
    /// Largest single-draw term.
    pub best_term: f64,
}

fn draw_terms(spec: &LayerSpectrum, draws: usize, rng: &mut Rng) -> Vec<f64> {
    let m = spec.output_dim();
    (0..draws).map(|_| spec.term(&rng.normals(m))).collect()
}

fn estimate(spec: &LayerSpectrum, terms: &[f64]) -> PafEstimate {
    let s = MeanStd::of(terms);
    PafEstimate {
        mean: s.mean,
        stderr: s.stderr(),
        samples: terms.len(),
        max_paf: spec.max_paf(),
        aligned_paf: spec.aligned_paf(),
        best_term: terms.iter().cloned().fold(0.0, f64::max),
    }
}

/// PAF of an explicit `n×m` Jacobian from `samples` draws.
pub fn paf_of_matrix(j: &Tensor, samples: usize, rng: &mut Rng) -> Result<PafEstimate> {
    if samples == 0 {
        return Err(Error::InvalidArgument("samples must be >= 1".into()));
    }
    let spec = LayerSpectrum::new(std::slice::from_ref(j))?;
    Ok(estimate(&spec, &draw_terms(&spec, samples, rng)))
}

/// Closed-form PAF of `c·I_n`: `n·(c/√(c²+1))·Γ(n/2)/(√π·Γ((n+1)/2))`.
pub fn identity_paf(c: f64, n: usize) -> f64 {
    // Γ(n/2)/Γ((n+1)/2) by the recursion Γ(x+1) = xΓ(x) from n = 1 or 2.
    let mut ratio = if n % 2 == 1 {
        std::f64::consts::PI.sqrt() // Γ(1/2)/Γ(1)
    } else {
        2.0 / std::f64::consts::PI.sqrt() // Γ(1)/Γ(3/2)
    };
    let mut k = if n % 2 == 1 { 1 } else { 2 };
    while k < n {
        // Γ((k+2)/2)/Γ((k+3)/2) = (k/2)/((k+1)/2) · Γ(k/2)/Γ((k+1)/2)
        ratio *= k as f64 / (k + 1) as f64;
        k += 2;
    }
    let c = c.abs();
    n as f64 * (c / (c * c + 1.0).sqrt()) * ratio / std::f64::consts::PI.sqrt()
}

/// Per-row Jacobian blocks of one sub-layer at the operating point `z` (L×d_in).
pub fn layer_jacobian_blocks(model: &SplitModel, layer: LayerRef, z: &Tensor, cap: usize) -> Result<Vec<Tensor>> {
    let mut out: Vec<Tensor> = Vec::with_capacity(z.rows());
    let row_independent = !matches!(
        layer.kind,
        crate::model::LayerKind::RmsNorm1 | crate::model::LayerKind::RmsNorm2 | crate::model::LayerKind::Activation
    ) || model.blocks[layer.block].is_bypassed(layer.kind);
    for r in 0..z.rows() {
        if row_independent && r > 0 {
            out.push(out[0].clone());
            continue;
        }
        let row = Tensor::matrix(1, z.cols(), z.row(r).to_vec())?;
        out.push(jacobian(|tape, x| model.layer_forward_on(tape, layer, x), &row, cap)?);
    }
    Ok(out)
}

/// Fully materialized `(L·d_in)×(L·d_out)` Jacobian of one sub-layer.
pub fn layer_jacobian_full(model: &SplitModel, layer: LayerRef, z: &Tensor, cap: usize) -> Result<Tensor> {
    jacobian(|tape, x| model.layer_forward_on(tape, layer, x), z, cap)
}

/// The input a sub-layer sees when the model runs on `ids`.
pub fn layer_operating_point(model: &SplitModel, layer: LayerRef, ids: &[usize]) -> Result<Tensor> {
    let h0 = model.embed(ids)?;
    let traces = model.trace_hidden(&h0, layer.block + 1)?;
    traces
        .get(layer.block)
        .and_then(|t| t.input(layer.kind))
        .cloned()
        .ok_or_else(|| Error::InvalidLayer(format!("{layer} is not evaluated (its branch is bypassed)")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputPaf {
    pub mean: f64,
    pub max_paf: f64,
    pub best_term: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PafReport {
    pub layer: LayerRef,
    pub mean: f64,
    pub stderr: f64,
    pub draws: usize,
    pub inputs: usize,
    /// Mean over inputs of the directional supremum.
    pub max_paf: f64,
    /// Mean over inputs of the smallest-eigenvalue direction amplification.
    pub aligned_paf: f64,
    /// Mean over inputs of `‖J‖₂`.
    pub spectral_norm: f64,
    pub eig_min: f64,
    pub eig_max: f64,
    /// Every sampled Jacobian was zero.
    pub degenerate: bool,
    pub per_input: Vec<InputPaf>,
}

/// Monte Carlo PAF of `layer` over the operating points of `prompts`.
///
/// Input `i` draws from `rng.derive(i)`; results are merged in input order.
pub fn paf_estimate(model: &SplitModel, layer: LayerRef, prompts: &[Vec<usize>], cfg: &PafConfig, rng: &Rng) -> Result<PafReport> {
    if prompts.is_empty() {
        return Err(Error::Empty("PAF inputs"));
    }
    if cfg.draws == 0 {
        return Err(Error::InvalidArgument("draws must be >= 1".into()));
    }
    let inputs = &prompts[..prompts.len().min(cfg.max_inputs.max(1))];
    let per: Vec<Result<(Vec<f64>, LayerSpectrum)>> = inputs
        .par_iter()
        .enumerate()
        .map(|(i, ids)| {
            let z = layer_operating_point(model, layer, ids)?;
            let spec = LayerSpectrum::new(&layer_jacobian_blocks(model, layer, &z, cfg.cap)?)?;
            let terms = draw_terms(&spec, cfg.draws, &mut rng.derive(i as u64));
            Ok((terms, spec))
        })
        .collect();
    let mut all = Vec::with_capacity(inputs.len() * cfg.draws);
    let mut per_input = Vec::with_capacity(inputs.len());
    let (mut max_sum, mut aligned_sum, mut norm_sum) = (0.0, 0.0, 0.0);
    let (mut eig_min, mut eig_max) = (f64::INFINITY, 0.0f64);
    let mut degenerate = true;
    for r in per {
        let (terms, spec) = r?;
        let e = estimate(&spec, &terms);
        max_sum += e.max_paf;
        aligned_sum += e.aligned_paf;
        norm_sum += spec.spectral_norm;
        eig_min = eig_min.min(spec.eig_min);
        eig_max = eig_max.max(spec.eig_max);
        degenerate &= spec.is_zero();
        per_input.push(InputPaf {
            mean: e.mean,
            max_paf: e.max_paf,
            best_term: e.best_term,
        });
        all.extend(terms);
    }
    let n = inputs.len() as f64;
    let s = MeanStd::of(&all);
    Ok(PafReport {
        layer,
        mean: s.mean,
        stderr: s.stderr(),
        draws: cfg.draws,
        inputs: inputs.len(),
        max_paf: max_sum / n,
        aligned_paf: aligned_sum / n,
        spectral_norm: norm_sum / n,
        eig_min,
        eig_max,
        degenerate,
        per_input,
    })
}

/// Max-PAF of `layer` averaged over the operating points of `prompts`.
pub fn max_paf(model: &SplitModel, layer: LayerRef, prompts: &[Vec<usize>], cap: usize) -> Result<f64> {
    if prompts.is_empty() {
        return Err(Error::Empty("PAF inputs"));
    }
    let mut total = 0.0;
    for ids in prompts {
        let z = layer_operating_point(model, layer, ids)?;
        total += LayerSpectrum::new(&layer_jacobian_blocks(model, layer, &z, cap)?)?.max_paf();
    }
    Ok(total / prompts.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegInverseReport {
    /// `‖Δ_reg‖₂²` with `Δ_reg = δJᵀ(JJᵀ + I)⁻¹`.
    pub lhs: f64,
    /// `Σ_i (‖δJᵀ‖₂ cos θ_i)² / (σ_i + 1)`.
    pub rhs: f64,
    /// `Σ cos² θ_i` over the nonzero spectrum (1 unless `δJᵀ = 0`).
    pub cos_sq_sum: f64,
    pub holds: bool,
}

/// Checks the regularized reconstruction bound for one `(J, δ)`.
pub fn reg_inverse_bound(j: &Tensor, delta: &[f64]) -> Result<RegInverseReport> {
    if j.rank() != 2 || j.cols() != delta.len() {
        return Err(Error::ShapeMismatch {
            op: "reg_inverse_bound",
            detail: format!("J {:?} with δ of length {}", j.shape(), delta.len()),
        });
    }
    if !j.is_finite() || delta.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("reg_inverse_bound"));
    }
    let n = j.rows();
    let u: Vec<f64> = (0..n).map(|i| j.row(i).iter().zip(delta).map(|(a, b)| a * b).sum()).collect();
    let jjt = j.matmul_t(j)?;
    let mut s = jjt.clone();
    for i in 0..n {
        s.set(i, i, s.get(i, i) + 1.0);
    }
    let reg = solve(&s, &Tensor::matrix(n, 1, u.clone())?)?;
    let lhs = reg.dot(&reg);
    let eig = sym_eig(&jjt)?;
    let u_sq: f64 = u.iter().map(|x| x * x).sum();
    let tol = NULL_TOL * eig.values.first().copied().unwrap_or(0.0);
    let (mut rhs, mut cos_sq) = (0.0, 0.0);
    for (i, &sigma) in eig.values.iter().enumerate() {
        let proj: f64 = eig.vector(i).iter().zip(&u).map(|(a, b)| a * b).sum();
        rhs += proj * proj / (sigma.max(0.0) + 1.0);
        if sigma > tol && u_sq > 0.0 {
            cos_sq += proj * proj / u_sq;
        }
    }
    Ok(RegInverseReport {
        lhs,
        rhs,
        cos_sq_sum: cos_sq,
        holds: lhs <= rhs * (1.0 + 1e-8) + f64::MIN_POSITIVE,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BypassRow {
    pub layer: LayerRef,
    pub paf: f64,
    pub paf_stderr: f64,
    pub rouge_l_mean: f64,
    pub rouge_l_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BypassStudy {
    pub rows: Vec<BypassRow>,
    pub r: f64,
    pub degenerate: bool,
}

/// Pearson correlation between per-layer PAF and bypassed-model ROUGE-L.
pub fn correlate(rows: Vec<BypassRow>) -> Result<BypassStudy> {
    let xs: Vec<f64> = rows.iter().map(|r| r.paf).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.rouge_l_mean).collect();
    let Correlation { r, degenerate } = pearson(&xs, &ys)?;
    Ok(BypassStudy { rows, r, degenerate })
}

/// ROUGE-L of ActInv against each bypassed variant, paired with the layer's
/// PAF on the original model.
///
/// Prompt `i` uses `rng.derive(i)` for the defense and the attack under
/// every layer, so layers differ only through the bypass. PAF for layer `k`
/// draws from `rng.derive(u64::MAX - k)`.
pub fn bypass_study(
    model: &SplitModel,
    layers: &[LayerRef],
    prompts: &[Vec<usize>],
    attack: &AttackConfig,
    defense: &DefenseSpec,
    paf: &PafConfig,
    rng: &Rng,
) -> Result<BypassStudy> {
    if prompts.is_empty() {
        return Err(Error::Empty("bypass study prompts"));
    }
    let mut rows = Vec::with_capacity(layers.len());
    for (k, &layer) in layers.iter().enumerate() {
        let bypassed = model.bypass(layer)?;
        let scores: Vec<Result<f64>> = prompts
            .par_iter()
            .enumerate()
            .map(|(i, ids)| {
                let mut r = rng.derive(i as u64);
                let h0 = bypassed.embed(ids)?;
                let h = bypassed.client_forward(&h0)?;
                let ctx = DefenseContext::new(&bypassed, &h0);
                let hd = apply_defense(&h, defense, Some(&ctx), &mut r)?;
                let res = actinv(&bypassed, &hd, attack, &mut r, None)?;
                rouge_l(&res.tokens, ids)
            })
            .collect();
        let scores = scores.into_iter().collect::<Result<Vec<f64>>>()?;
        let s = MeanStd::of(&scores);
        let report = paf_estimate(model, layer, prompts, paf, &rng.derive(u64::MAX - k as u64))?;
        rows.push(BypassRow {
            layer,
            paf: report.mean,
            paf_stderr: report.stderr,
            rouge_l_mean: s.mean,
            rouge_l_std: s.std,
        });
    }
    correlate(rows)
}
