//! Activation perturbation defenses applied at the cut layer.
//!
//! PriPert perturbs the transmitted activations in the direction that a
//! regularized inverse Jacobian of the client maps to the largest input-space
//! deviation. With `J` the `n×m` client Jacobian (row-vector convention,
//! `δ ≈ Δ·J`) the inverse action is `G = Jᵀ(JJᵀ + εI)⁻¹`, evaluated here in the
//! equivalent form `(JᵀJ + εI)⁻¹Jᵀ` so that only the columns of `J` for the
//! perturbed activation coordinates are ever needed.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cholesky, cholesky_solve, inverse, spectral_norm, top_singular, vec_mat};
use crate::model::SplitModel;
use crate::rng::Rng;
use crate::tape::{jacobian_columns, GradTape, Var, DEFAULT_JACOBIAN_CAP};
use crate::tensor::Tensor;

/// Gaussian variances for defense levels 1 to 5.
pub const GAUSSIAN_LEVELS: [f64; 5] = [1e-4, 1e-3, 1e-2, 1e-1, 1.0];
/// Zeroing ratios for defense levels 1 to 5 (sparsification and PriPert-L0).
pub const RATIO_LEVELS: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DefenseKind {
    None,
    Gaussian,
    ElementSparsify,
    TokenSparsify,
    PripertL0,
    PripertL2,
}

impl DefenseKind {
    pub const ALL: [DefenseKind; 6] = [
        DefenseKind::None,
        DefenseKind::Gaussian,
        DefenseKind::ElementSparsify,
        DefenseKind::TokenSparsify,
        DefenseKind::PripertL0,
        DefenseKind::PripertL2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DefenseKind::None => "none",
            DefenseKind::Gaussian => "gaussian",
            DefenseKind::ElementSparsify => "element-sparsify",
            DefenseKind::TokenSparsify => "token-sparsify",
            DefenseKind::PripertL0 => "pripert-l0",
            DefenseKind::PripertL2 => "pripert-l2",
        }
    }

    pub fn is_pripert(self) -> bool {
        matches!(self, DefenseKind::PripertL0 | DefenseKind::PripertL2)
    }
}

impl fmt::Display for DefenseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DefenseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown defense kind {s:?}")))
    }
}

/// Which end of the PriPert-L0 score ranking gets zeroed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum L0RankOrder {
    /// Zero the coordinates whose removal moves the input furthest.
    #[default]
    MaxImpactZeroed,
    /// Keep the high-impact coordinates and zero the rest.
    MinImpactZeroed,
}

impl FromStr for L0RankOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max-impact-zeroed" => Ok(Self::MaxImpactZeroed),
            "min-impact-zeroed" => Ok(Self::MinImpactZeroed),
            _ => Err(Error::InvalidArgument(format!("unknown l0 rank order {s:?}"))),
        }
    }
}

/// One defense and its strength parameters. Only the fields relevant to
/// `kind` are read.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DefenseSpec {
    pub kind: DefenseKind,
    pub variance: f64,
    /// Fraction zeroed, in [0, 1].
    pub ratio: f64,
    /// L2 budget μ.
    pub budget: f64,
    pub steps: usize,
    pub epsilon: f64,
    pub l0_rank_order: L0RankOrder,
    /// Token rows eligible for PriPert; `None` protects every row.
    pub protected: Option<Vec<usize>>,
}

impl Default for DefenseSpec {
    fn default() -> Self {
        Self {
            kind: DefenseKind::None,
            variance: 0.0,
            ratio: 0.0,
            budget: 1.0,
            steps: 2,
            epsilon: 1.0,
            l0_rank_order: L0RankOrder::default(),
            protected: None,
        }
    }
}

impl DefenseSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn gaussian(variance: f64) -> Self {
        Self {
            kind: DefenseKind::Gaussian,
            variance,
            ..Self::default()
        }
    }

    pub fn element_sparsify(ratio: f64) -> Self {
        Self {
            kind: DefenseKind::ElementSparsify,
            ratio,
            ..Self::default()
        }
    }

    pub fn token_sparsify(ratio: f64) -> Self {
        Self {
            kind: DefenseKind::TokenSparsify,
            ratio,
            ..Self::default()
        }
    }

    pub fn pripert_l0(ratio: f64) -> Self {
        Self {
            kind: DefenseKind::PripertL0,
            ratio,
            ..Self::default()
        }
    }

    pub fn pripert_l2(budget: f64) -> Self {
        Self {
            kind: DefenseKind::PripertL2,
            budget,
            ..Self::default()
        }
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        self
    }

    pub fn with_protected(mut self, rows: Vec<usize>) -> Self {
        self.protected = Some(rows);
        self
    }

    /// The five-level ladder for `kind`; `None` and PriPert-L2 have no ladder.
    pub fn ladder(kind: DefenseKind) -> Vec<DefenseSpec> {
        match kind {
            DefenseKind::Gaussian => GAUSSIAN_LEVELS.iter().map(|&v| Self::gaussian(v)).collect(),
            DefenseKind::ElementSparsify => RATIO_LEVELS.iter().map(|&r| Self::element_sparsify(r)).collect(),
            DefenseKind::TokenSparsify => RATIO_LEVELS.iter().map(|&r| Self::token_sparsify(r)).collect(),
            DefenseKind::PripertL0 => RATIO_LEVELS.iter().map(|&r| Self::pripert_l0(r)).collect(),
            DefenseKind::None | DefenseKind::PripertL2 => Vec::new(),
        }
    }

    /// The strength parameter that matters for this kind.
    pub fn parameter(&self) -> f64 {
        match self.kind {
            DefenseKind::None => 0.0,
            DefenseKind::Gaussian => self.variance,
            DefenseKind::ElementSparsify | DefenseKind::TokenSparsify | DefenseKind::PripertL0 => self.ratio,
            DefenseKind::PripertL2 => self.budget,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        match self.kind {
            DefenseKind::Gaussian if !(self.variance >= 0.0 && self.variance.is_finite()) => {
                return bad(format!("gaussian variance must be >= 0, got {}", self.variance))
            }
            DefenseKind::ElementSparsify | DefenseKind::TokenSparsify | DefenseKind::PripertL0
                if !(0.0..=1.0).contains(&self.ratio) =>
            {
                return bad(format!("ratio must lie in [0, 1], got {}", self.ratio))
            }
            DefenseKind::PripertL2 if !(self.budget > 0.0 && self.budget.is_finite()) => {
                return bad(format!("pripert-l2 budget must be > 0, got {}", self.budget))
            }
            _ => {}
        }
        if self.kind.is_pripert() {
            if self.steps == 0 {
                return bad("approximation steps must be >= 1".into());
            }
            if !(self.epsilon > 0.0) {
                return bad(format!("epsilon must be > 0, got {}", self.epsilon));
            }
        }
        Ok(())
    }
}

/// `kind` or `kind:parameter`, e.g. `element-sparsify:0.5`, `gaussian:1e-2`.
impl FromStr for DefenseSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, param) = match s.split_once(':') {
            Some((k, p)) => (k.trim(), Some(p.trim())),
            None => (s.trim(), None),
        };
        let kind: DefenseKind = kind.parse()?;
        let value = match param {
            Some(p) => Some(
                p.parse::<f64>()
                    .map_err(|_| Error::InvalidArgument(format!("bad defense parameter {p:?}")))?,
            ),
            None => None,
        };
        let spec = match (kind, value) {
            (DefenseKind::None, _) => Self::none(),
            (_, None) => return Err(Error::InvalidArgument(format!("{kind} needs a parameter"))),
            (DefenseKind::Gaussian, Some(v)) => Self::gaussian(v),
            (DefenseKind::ElementSparsify, Some(v)) => Self::element_sparsify(v),
            (DefenseKind::TokenSparsify, Some(v)) => Self::token_sparsify(v),
            (DefenseKind::PripertL0, Some(v)) => Self::pripert_l0(v),
            (DefenseKind::PripertL2, Some(v)) => Self::pripert_l2(v),
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl fmt::Display for DefenseSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            DefenseKind::None => f.write_str("none"),
            k => write!(f, "{k}:{}", self.parameter()),
        }
    }
}

/// A differentiable client map `z ↦ F_C(z)` whose Jacobian PriPert inverts.
pub trait ClientMap: Sync {
    fn apply<'a>(&'a self, tape: &mut GradTape<'a>, z: Var) -> Result<Var>;
}

impl ClientMap for SplitModel {
    fn apply<'a>(&'a self, tape: &mut GradTape<'a>, z: Var) -> Result<Var> {
        self.client_forward_on(tape, z)
    }
}

/// `z ↦ flatten(z)·A` for an `n×m` matrix `A`.
#[derive(Clone, Debug)]
pub struct LinearMap {
    pub a: Tensor,
}

impl ClientMap for LinearMap {
    fn apply<'a>(&'a self, tape: &mut GradTape<'a>, z: Var) -> Result<Var> {
        let n = tape.value(z).len();
        let flat = tape.reshape(z, &[1, n])?;
        let a = tape.constant_ref(&self.a);
        tape.matmul(flat, a)
    }
}

/// What PriPert needs besides the activations: the client map and its input.
pub struct DefenseContext<'a> {
    pub map: &'a dyn ClientMap,
    /// Client input (the embeddings `h0`).
    pub z: &'a Tensor,
    pub cap: usize,
}

impl<'a> DefenseContext<'a> {
    pub fn new(map: &'a dyn ClientMap, z: &'a Tensor) -> Self {
        Self {
            map,
            z,
            cap: DEFAULT_JACOBIAN_CAP,
        }
    }
}

fn count_for(ratio: f64, n: usize) -> usize {
    // Guard against products like 0.7·10 = 6.999… rounding down a whole unit.
    ((ratio * n as f64 + 1e-9).floor() as usize).min(n)
}

pub fn gaussian_noise(h: &Tensor, variance: f64, rng: &mut Rng) -> Result<Tensor> {
    if !(variance >= 0.0) {
        return Err(Error::InvalidArgument(format!("variance {variance} < 0")));
    }
    if variance == 0.0 {
        return Ok(h.clone());
    }
    let sd = variance.sqrt();
    let mut out = h.clone();
    for v in out.data_mut() {
        *v += sd * rng.normal();
    }
    Ok(out)
}

/// Zeroes the `⌊ratio·count⌋` smallest-magnitude elements.
pub fn element_sparsify(h: &Tensor, ratio: f64) -> Result<Tensor> {
    check_ratio(ratio)?;
    let k = count_for(ratio, h.len());
    let mut order: Vec<usize> = (0..h.len()).collect();
    order.sort_by(|&a, &b| h.data()[a].abs().total_cmp(&h.data()[b].abs()).then(a.cmp(&b)));
    let mut out = h.clone();
    for &i in &order[..k] {
        out.data_mut()[i] = 0.0;
    }
    Ok(out)
}

/// Zeroes the `⌊ratio·L⌋` rows with the smallest Euclidean norm.
pub fn token_sparsify(h: &Tensor, ratio: f64) -> Result<Tensor> {
    check_ratio(ratio)?;
    let l = h.rows();
    let k = count_for(ratio, l);
    let norms: Vec<f64> = (0..l).map(|r| h.row(r).iter().map(|v| v * v).sum::<f64>()).collect();
    let mut order: Vec<usize> = (0..l).collect();
    order.sort_by(|&a, &b| norms[a].total_cmp(&norms[b]).then(a.cmp(&b)));
    let mut out = h.clone();
    for &r in &order[..k] {
        out.row_mut(r).iter_mut().for_each(|v| *v = 0.0);
    }
    Ok(out)
}

fn check_ratio(ratio: f64) -> Result<()> {
    if (0.0..=1.0).contains(&ratio) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("ratio {ratio} outside [0, 1]")))
    }
}

/// Averaged regularized inverse Jacobian restricted to selected activation
/// coordinates.
#[derive(Clone, Debug)]
pub struct InverseJacobianBundle {
    /// `k×n`: row `j` is the input deviation induced by a unit perturbation
    /// of activation coordinate `coords[j]`.
    pub g: Tensor,
    /// Flat activation indices covered by the rows of `g`.
    pub coords: Vec<usize>,
    pub epsilon: f64,
    /// Number of path points averaged.
    pub endpoints: usize,
}

/// Regularized inverse action at a single point.
fn inverse_at(map: &dyn ClientMap, z: &Tensor, coords: &[usize], epsilon: f64, cap: usize) -> Result<Tensor> {
    let mut tape = GradTape::new();
    let zv = tape.leaf(z.clone());
    let y = map.apply(&mut tape, zv)?;
    let jc = jacobian_columns(&tape, zv, y, coords, cap)?;
    let mut gram = jc.t_matmul(&jc)?;
    for i in 0..coords.len() {
        gram.set(i, i, gram.get(i, i) + epsilon);
    }
    let l = cholesky(&gram)?;
    cholesky_solve(&l, &jc.transpose()?)
}

/// Builds the path-averaged inverse Jacobian.
///
/// `steps = 1` uses the point `z` only. Otherwise `first_delta` turns the
/// single-point map into a perturbation over `coords`, the reconstruction
/// endpoint `ẑ = z + δ·G(z)` is estimated from it, and `steps` uniformly
/// spaced points on the segment from `z` to `ẑ` are averaged with
/// trapezoid weights.
pub fn inverse_jacobian_bundle(
    map: &dyn ClientMap,
    z: &Tensor,
    coords: &[usize],
    steps: usize,
    epsilon: f64,
    cap: usize,
    first_delta: impl Fn(&Tensor) -> Result<Vec<f64>>,
) -> Result<InverseJacobianBundle> {
    if steps == 0 {
        return Err(Error::InvalidArgument("steps must be >= 1".into()));
    }
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon {epsilon} must be > 0")));
    }
    let g0 = inverse_at(map, z, coords, epsilon, cap)?;
    if steps == 1 {
        return Ok(InverseJacobianBundle {
            g: g0,
            coords: coords.to_vec(),
            epsilon,
            endpoints: 1,
        });
    }
    let delta = first_delta(&g0)?;
    let shift = Tensor::new(z.shape().to_vec(), vec_mat(&delta, &g0))?;
    let seg = (steps - 1) as f64;
    let mut g = g0.scale(0.5 / seg);
    for i in 1..steps {
        let t = i as f64 / seg;
        let point = z.add(&shift.scale(t))?;
        let w = if i == steps - 1 { 0.5 / seg } else { 1.0 / seg };
        g.add_assign(&inverse_at(map, &point, coords, epsilon, cap)?.scale(w))?;
    }
    Ok(InverseJacobianBundle {
        g: g.ensure_finite("inverse_jacobian_bundle")?,
        coords: coords.to_vec(),
        epsilon,
        endpoints: steps,
    })
}

/// Unit direction over the bundle's coordinates maximizing `‖δ·G‖₂`, with
/// its first nonzero component positive.
pub fn l2_direction(g: &Tensor) -> Result<Vec<f64>> {
    let mut v = top_singular(g)?.left;
    if v.iter().find(|x| x.abs() > 1e-14).is_some_and(|x| *x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    Ok(v)
}

fn l2_delta(g: &Tensor, budget: f64) -> Result<Vec<f64>> {
    Ok(l2_direction(g)?.into_iter().map(|x| x * budget).collect())
}

/// Adds `μ·v_max` on the bundle's coordinates.
pub fn pripert_l2(h: &Tensor, bundle: &InverseJacobianBundle, budget: f64) -> Result<Tensor> {
    if !(budget > 0.0) {
        return Err(Error::InvalidArgument(format!("budget {budget} must be > 0")));
    }
    let delta = l2_delta(&bundle.g, budget)?;
    let mut out = h.clone();
    for (&c, d) in bundle.coords.iter().zip(&delta) {
        out.data_mut()[c] += d;
    }
    Ok(out)
}

/// Positions within `coords` chosen for zeroing.
fn l0_selection(h: &Tensor, g: &Tensor, coords: &[usize], ratio: f64, order: L0RankOrder) -> Vec<usize> {
    let scores: Vec<f64> = coords
        .iter()
        .enumerate()
        .map(|(j, &c)| h.data()[c].abs() * g.row(j).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let mut idx: Vec<usize> = (0..coords.len()).collect();
    match order {
        L0RankOrder::MaxImpactZeroed => idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b))),
        L0RankOrder::MinImpactZeroed => idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b))),
    }
    idx.truncate(count_for(ratio, coords.len()));
    idx
}

fn l0_delta(h: &Tensor, g: &Tensor, coords: &[usize], ratio: f64, order: L0RankOrder) -> Vec<f64> {
    let mut delta = vec![0.0; coords.len()];
    for j in l0_selection(h, g, coords, ratio, order) {
        delta[j] = -h.data()[coords[j]];
    }
    delta
}

/// Zeroes the `⌊ratio·k⌋` covered coordinates ranked by `|h_j|·‖G_j‖₂`.
pub fn pripert_l0(h: &Tensor, bundle: &InverseJacobianBundle, ratio: f64, order: L0RankOrder) -> Result<Tensor> {
    check_ratio(ratio)?;
    let mut out = h.clone();
    for j in l0_selection(h, &bundle.g, &bundle.coords, ratio, order) {
        out.data_mut()[bundle.coords[j]] = 0.0;
    }
    Ok(out)
}

/// Flat activation coordinates PriPert may touch.
pub fn protected_coords(h: &Tensor, protected: Option<&[usize]>) -> Result<Vec<usize>> {
    let (l, d) = (h.rows(), h.cols());
    match protected {
        None => Ok((0..l * d).collect()),
        Some(rows) => {
            let mut rows = rows.to_vec();
            rows.sort_unstable();
            rows.dedup();
            if let Some(&r) = rows.iter().find(|&&r| r >= l) {
                return Err(Error::InvalidArgument(format!("protected row {r} >= sequence length {l}")));
            }
            Ok(rows.iter().flat_map(|&r| r * d..(r + 1) * d).collect())
        }
    }
}

/// Builds the bundle PriPert would use for `spec` on `h`.
pub fn pripert_bundle(h: &Tensor, spec: &DefenseSpec, ctx: &DefenseContext<'_>) -> Result<InverseJacobianBundle> {
    let coords = protected_coords(h, spec.protected.as_deref())?;
    let first = |g: &Tensor| -> Result<Vec<f64>> {
        match spec.kind {
            DefenseKind::PripertL2 => l2_delta(g, spec.budget),
            _ => Ok(l0_delta(h, g, &coords, spec.ratio, spec.l0_rank_order)),
        }
    };
    inverse_jacobian_bundle(ctx.map, ctx.z, &coords, spec.steps, spec.epsilon, ctx.cap, first)
}

/// Applies `spec` to the cut-layer activations `h`.
///
/// PriPert kinds need `ctx`. With `spec.protected` set they only score and
/// perturb the listed token rows; other kinds ignore it.
pub fn apply_defense(h: &Tensor, spec: &DefenseSpec, ctx: Option<&DefenseContext<'_>>, rng: &mut Rng) -> Result<Tensor> {
    spec.validate()?;
    match spec.kind {
        DefenseKind::None => Ok(h.clone()),
        DefenseKind::Gaussian => gaussian_noise(h, spec.variance, rng),
        DefenseKind::ElementSparsify => element_sparsify(h, spec.ratio),
        DefenseKind::TokenSparsify => token_sparsify(h, spec.ratio),
        DefenseKind::PripertL0 | DefenseKind::PripertL2 => {
            let ctx = ctx.ok_or(Error::MissingContext("pripert"))?;
            if spec.protected.as_ref().is_some_and(|p| p.is_empty()) {
                return Ok(h.clone());
            }
            let bundle = pripert_bundle(h, spec, ctx)?;
            match spec.kind {
                DefenseKind::PripertL2 => pripert_l2(h, &bundle, spec.budget),
                _ => pripert_l0(h, &bundle, spec.ratio, spec.l0_rank_order),
            }
        }
    }
}

/// Vector norms usable in the reconstruction-error bound.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum QNorm {
    L1,
    L2,
    Inf,
}

impl QNorm {
    pub fn of(self, v: &[f64]) -> f64 {
        match self {
            QNorm::L1 => v.iter().map(|x| x.abs()).sum(),
            QNorm::L2 => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
            QNorm::Inf => v.iter().fold(0.0, |m, x| m.max(x.abs())),
        }
    }

    /// Induced norm of `x ↦ x·A` for row vectors `x`.
    pub fn operator(self, a: &Tensor) -> Result<f64> {
        match self {
            QNorm::L1 => Ok((0..a.rows())
                .map(|i| a.row(i).iter().map(|v| v.abs()).sum::<f64>())
                .fold(0.0, f64::max)),
            QNorm::L2 => spectral_norm(a),
            QNorm::Inf => Ok((0..a.cols())
                .map(|j| (0..a.rows()).map(|i| a.get(i, j).abs()).sum::<f64>())
                .fold(0.0, f64::max)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundCheck {
    /// `‖δ‖_q`.
    pub perturbation: f64,
    /// `‖Δ‖_q` with `Δ = δA⁻¹`.
    pub deviation: f64,
    /// `μ / C`.
    pub bound: f64,
    pub holds: bool,
}

/// For a linear client `z ↦ zA`, checks that the budget-saturating `δ`
/// (rescaled to `‖δ‖_q = μ`) induces `‖δA⁻¹‖_q ≥ μ / ‖A‖_q`.
pub fn deviation_bound(a: &Tensor, delta: &[f64], budget: f64, q: QNorm) -> Result<BoundCheck> {
    let norm = q.of(delta);
    if norm == 0.0 {
        return Err(Error::InvalidArgument("perturbation direction is zero".into()));
    }
    let delta: Vec<f64> = delta.iter().map(|x| x * budget / norm).collect();
    let inv = inverse(a)?;
    let deviation = q.of(&vec_mat(&delta, &inv));
    let c = q.operator(a)?;
    let bound = budget / c;
    Ok(BoundCheck {
        perturbation: q.of(&delta),
        deviation,
        bound,
        holds: deviation >= bound * (1.0 - 1e-12),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct NearestNeighborCheck {
    /// Distance from the true embedding to its nearest other embedding.
    pub d_min: f64,
    /// The spectral-norm threshold `C·d_min/2` that `μ` must exceed.
    pub threshold: f64,
    pub delta: Vec<f64>,
    pub recovered_point: Vec<f64>,
    pub recovered_token: usize,
    /// True when the nearest-neighbor projection no longer returns the true token.
    pub recovery_fails: bool,
}

/// Aims a budget-`μ` perturbation so the reconstruction moves straight
/// toward the nearest other embedding, then projects it back to a token.
pub fn deviation_nearest_neighbor(a: &Tensor, embeddings: &Tensor, token: usize, budget: f64) -> Result<NearestNeighborCheck> {
    let v = embeddings.rows();
    if token >= v {
        return Err(Error::TokenOutOfRange { id: token, vocab: v });
    }
    let z = embeddings.row(token);
    let dist = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
    let (nearest, d_min) = (0..v)
        .filter(|&i| i != token)
        .map(|i| (i, dist(z, embeddings.row(i))))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .ok_or(Error::Empty("other embeddings"))?;
    if d_min == 0.0 {
        return Err(Error::InvalidArgument("duplicate embedding rows".into()));
    }
    let u: Vec<f64> = embeddings.row(nearest).iter().zip(z).map(|(e, z)| (e - z) / d_min).collect();
    let ua = vec_mat(&u, a);
    let n = QNorm::L2.of(&ua);
    let delta: Vec<f64> = ua.iter().map(|x| x * budget / n).collect();
    let shift = vec_mat(&delta, &inverse(a)?);
    let point: Vec<f64> = z.iter().zip(&shift).map(|(p, s)| p + s).collect();
    let recovered_token = (0..v)
        .map(|i| (i, dist(&point, embeddings.row(i))))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .map(|(i, _)| i)
        .unwrap_or(token);
    Ok(NearestNeighborCheck {
        d_min,
        threshold: spectral_norm(a)? * d_min / 2.0,
        delta,
        recovered_point: point,
        recovered_token,
        recovery_fails: recovered_token != token,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeviationReport {
    pub bound: BoundCheck,
    /// Present when `μ` exceeds `C·d_min/2` for the aimed perturbation.
    pub nearest_neighbor: Option<NearestNeighborCheck>,
}

/// Runs the bound check for `delta` and, when the budget is large enough,
/// the aimed nearest-neighbor failure check for `token`.
pub fn deviation_verify(
    a: &Tensor,
    embeddings: &Tensor,
    token: usize,
    delta: &[f64],
    budget: f64,
    q: QNorm,
) -> Result<DeviationReport> {
    let bound = deviation_bound(a, delta, budget, q)?;
    let nn = deviation_nearest_neighbor(a, embeddings, token, budget)?;
    let nearest_neighbor = (budget > nn.threshold).then_some(nn);
    Ok(DeviationReport { bound, nearest_neighbor })
}
