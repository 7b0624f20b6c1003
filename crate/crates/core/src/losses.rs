//! Every training objective as a scalar node on a [`Tape`].
//!
//! Masks, labels and other data enter as plain tensors and become constants;
//! scores and probabilities are nodes, so `backward` reaches the networks
//! that produced them.

use std::collections::BTreeMap;

use crate::engine::{input_jacobian, BoundMlp, NodeId, Tape, Tensor};
use crate::error::{HexaError, Result};
use crate::networks::Component;

/// Discriminator regularisation scheme.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Regularizer {
    /// `‖∇D‖²` at real inputs.
    #[default]
    ZeroCentered,
    /// `(‖∇D‖ − 1)²` at random interpolates of real and generated inputs.
    StandardGp,
    /// No penalty; discriminator weights are clipped after every update.
    WeightClip,
}

impl Regularizer {
    pub fn name(self) -> &'static str {
        match self {
            Regularizer::ZeroCentered => "zero_centered",
            Regularizer::StandardGp => "standard_gp",
            Regularizer::WeightClip => "weight_clip",
        }
    }
}

impl std::str::FromStr for Regularizer {
    type Err = HexaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero_centered" => Ok(Regularizer::ZeroCentered),
            "standard_gp" => Ok(Regularizer::StandardGp),
            "weight_clip" => Ok(Regularizer::WeightClip),
            other => Err(HexaError::config(format!(
                "unknown regularizer '{other}' (zero_centered, standard_gp, weight_clip)"
            ))),
        }
    }
}

impl std::fmt::Display for Regularizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// How the element-wise critic averages real and fake scores.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CriticBalance {
    /// Per unit, fake mean minus real mean over the rows of each group.
    #[default]
    PerUnit,
    /// One mean over the whole batch, so each group is weighted by its size.
    Joint,
}

impl CriticBalance {
    pub fn name(self) -> &'static str {
        match self {
            CriticBalance::PerUnit => "per_unit",
            CriticBalance::Joint => "joint",
        }
    }
}

impl std::str::FromStr for CriticBalance {
    type Err = HexaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_unit" => Ok(CriticBalance::PerUnit),
            "joint" => Ok(CriticBalance::Joint),
            other => Err(HexaError::config(format!("unknown critic balance '{other}' (per_unit, joint)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    /// Element-wise gradient penalty on `D_MI`.
    pub lambda1: f64,
    /// Gradient penalty on `D_CG`.
    pub lambda2: f64,
    /// Reconstruction term for `E` and `G_MI`.
    pub alpha1: f64,
    /// Element-wise adversarial term for `G_CG`.
    pub alpha2: f64,
    /// Cross-entropy term for `G_CG`.
    pub alpha3: f64,
    /// Pseudo-label adversarial term for `C`.
    pub alpha4: f64,
    pub regularizer: Regularizer,
    /// Clip constant used by [`Regularizer::WeightClip`].
    pub clip: f64,
    pub critic_balance: CriticBalance,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 10.0,
            lambda2: 10.0,
            alpha1: 10.0,
            alpha2: 1.0,
            alpha3: 0.01,
            alpha4: 0.1,
            regularizer: Regularizer::ZeroCentered,
            clip: 0.01,
            critic_balance: CriticBalance::PerUnit,
        }
    }
}

impl LossWeights {
    /// All-zero weights with the default regulariser.
    pub fn zero() -> Self {
        Self {
            lambda1: 0.0,
            lambda2: 0.0,
            alpha1: 0.0,
            alpha2: 0.0,
            alpha3: 0.0,
            alpha4: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("alpha1", self.alpha1),
            ("alpha2", self.alpha2),
            ("alpha3", self.alpha3),
            ("alpha4", self.alpha4),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(HexaError::config(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        if !(self.clip > 0.0) {
            return Err(HexaError::config(format!("clip must be positive, got {}", self.clip)));
        }
        Ok(())
    }
}

/// `Σ coeff ⊙ node`.
fn weighted_total(tape: &mut Tape, node: NodeId, coeff: Tensor) -> Result<NodeId> {
    let c = tape.constant(coeff);
    let prod = tape.hadamard(node, c)?;
    tape.sum(prod)
}

fn check_scores(op: &'static str, scores: &Tensor, m: &Tensor) -> Result<()> {
    let (b, w) = scores.dims();
    if m.rows() != b || m.cols() + 1 != w {
        return Err(HexaError::dim(
            op,
            format!("scores {:?} need mask of shape [{b}, {}], got {:?}", scores.shape(), w - 1, m.shape()),
        ));
    }
    Ok(())
}

/// `−Σ_{i≤d} mean_b (1−m_i)·D_i`; the label column is ignored.
pub fn loss_g_mi(tape: &mut Tape, scores: NodeId, m: &Tensor) -> Result<NodeId> {
    check_scores("loss_g_mi", tape.value(scores), m)?;
    let (b, w) = tape.value(scores).dims();
    let d = w - 1;
    let mut coeff = Tensor::zeros(b, w);
    for j in 0..b {
        for i in 0..d {
            coeff.set(j, i, -(1.0 - m.get(j, i)) / b as f64);
        }
    }
    weighted_total(tape, scores, coeff)
}

/// Element-wise critic loss.
///
/// Over the `d` element columns, plus the label column with mask `m_y` when
/// `m_y` is given, the critic is pushed down on observed entries and up on
/// imputed ones. Rows in `scores_cond` are conditionally generated and count
/// as fake in every column.
///
/// With [`CriticBalance::Joint`] each column contributes
/// `mean_b [(1−m_i)·D_i − m_i·D_i] + mean_{b_c} D_i`. With
/// [`CriticBalance::PerUnit`] it contributes the mean over all its fake
/// entries (imputed and conditional) minus the mean over its observed
/// entries; a column lacking either group contributes nothing.
pub fn loss_d_mi(
    tape: &mut Tape,
    scores_data: NodeId,
    m: &Tensor,
    m_y: Option<&[bool]>,
    scores_cond: Option<NodeId>,
    balance: CriticBalance,
) -> Result<NodeId> {
    check_scores("loss_d_mi", tape.value(scores_data), m)?;
    let (b, w) = tape.value(scores_data).dims();
    let d = w - 1;
    if let Some(my) = m_y {
        if my.len() != b {
            return Err(HexaError::dim("loss_d_mi", format!("{} label flags for {b} rows", my.len())));
        }
    }
    let bc = match scores_cond {
        Some(cond) => {
            let (bc, wc) = tape.value(cond).dims();
            if wc != w {
                return Err(HexaError::dim("loss_d_mi", format!("conditional scores width {wc}, data width {w}")));
            }
            bc
        }
        None => 0,
    };
    let mut columns: Vec<(usize, Vec<bool>)> =
        (0..d).map(|i| (i, (0..b).map(|j| m.get(j, i) == 1.0).collect())).collect();
    if let Some(my) = m_y {
        columns.push((d, my.to_vec()));
    }
    let mut coeff = Tensor::zeros(b, w);
    let mut coeff_cond = Tensor::zeros(bc, w);
    for (i, observed) in columns {
        let n_real = observed.iter().filter(|&&o| o).count();
        let n_fake = b - n_real + bc;
        let (real, fake, cond) = match balance {
            CriticBalance::Joint => (1.0 / b as f64, 1.0 / b as f64, 1.0 / bc.max(1) as f64),
            CriticBalance::PerUnit if n_real == 0 || n_fake == 0 => continue,
            CriticBalance::PerUnit => (1.0 / n_real as f64, 1.0 / n_fake as f64, 1.0 / n_fake as f64),
        };
        for (j, &o) in observed.iter().enumerate() {
            coeff.set(j, i, if o { -real } else { fake });
        }
        for j in 0..bc {
            coeff_cond.set(j, i, cond);
        }
    }
    let data_term = weighted_total(tape, scores_data, coeff)?;
    match scores_cond {
        Some(cond) if bc > 0 => {
            let cond_term = weighted_total(tape, cond, coeff_cond)?;
            tape.add(data_term, cond_term)
        }
        _ => Ok(data_term),
    }
}

/// `mean_b Σ_i m_i (x_i − x̄_i)²`.
pub fn loss_recon(tape: &mut Tape, x: &Tensor, xbar: NodeId, m: &Tensor) -> Result<NodeId> {
    if x.dims() != m.dims() || tape.value(xbar).dims() != x.dims() {
        return Err(HexaError::dim(
            "loss_recon",
            format!("x {:?}, x̄ {:?}, m {:?}", x.shape(), tape.value(xbar).shape(), m.shape()),
        ));
    }
    let b = x.rows() as f64;
    let xi = tape.constant(x.clone());
    let diff = tape.sub(xi, xbar)?;
    let sq = tape.square(diff)?;
    weighted_total(tape, sq, m.map(|v| v / b))
}

/// Squared (or `(‖·‖−1)²` when `centered_at_one`) norms of Jacobian rows
/// restricted to the first `width` input columns, weighted per row.
fn penalty_from_jacobian(
    tape: &mut Tape,
    jac: NodeId,
    width: usize,
    row_weights: Vec<f64>,
    centered_at_one: bool,
) -> Result<NodeId> {
    let (rows, cols) = tape.value(jac).dims();
    let sq = tape.square(jac)?;
    if !centered_at_one {
        let mut coeff = Tensor::zeros(rows, cols);
        for (r, &wgt) in row_weights.iter().enumerate() {
            for c in 0..width {
                coeff.set(r, c, wgt);
            }
        }
        return weighted_total(tape, sq, coeff);
    }
    let mut pick = Tensor::zeros(cols, 1);
    for c in 0..width {
        pick.set(c, 0, 1.0);
    }
    let pick = tape.constant(pick);
    let norm_sq = tape.matmul(sq, pick)?;
    let norm = tape.sqrt(norm_sq)?;
    let one = tape.constant(Tensor::scalar(1.0));
    let gap = tape.sub(norm, one)?;
    let gap_sq = tape.square(gap)?;
    weighted_total(tape, gap_sq, Tensor::from_matrix(rows, 1, row_weights)?)
}

/// Element-wise input-gradient penalty for `D_MI` evaluated at `x_hat`.
///
/// For each feature unit `i`, the mean over rows with `m_i = 1` of
/// `‖∇_{x̂} D_MI(x̂, y)_i‖²` (or `(‖·‖ − 1)²` when `centered_at_one`), summed
/// over units; units with no observed rows contribute nothing. When
/// `label_unit` is given, the label unit is penalised the same way over the
/// rows flagged `true`. Gradients are taken with respect to the `x̂` columns
/// only, never the label inputs.
pub fn gp_mi(
    tape: &mut Tape,
    d_mi: &BoundMlp,
    x_hat: NodeId,
    y: NodeId,
    m: &Tensor,
    label_unit: Option<&[bool]>,
    centered_at_one: bool,
) -> Result<NodeId> {
    let (b, d) = tape.value(x_hat).dims();
    if m.dims() != (b, d) {
        return Err(HexaError::dim("gp_mi", format!("x̂ {:?}, m {:?}", tape.value(x_hat).shape(), m.shape())));
    }
    let mut units = Vec::new();
    let mut unit_rows: Vec<Vec<bool>> = Vec::new();
    for i in 0..d {
        let rows: Vec<bool> = (0..b).map(|j| m.get(j, i) == 1.0).collect();
        if rows.iter().any(|&r| r) {
            units.push(i);
            unit_rows.push(rows);
        }
    }
    if let Some(flags) = label_unit {
        if flags.iter().any(|&f| f) {
            units.push(d);
            unit_rows.push(flags.to_vec());
        }
    }
    if units.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let input = tape.concat_cols(x_hat, y)?;
    let trace = d_mi.forward(tape, input)?;
    let jac = input_jacobian(tape, d_mi, &trace, &units)?;
    let u = units.len();
    let mut row_weights = vec![0.0; b * u];
    for (k, rows) in unit_rows.iter().enumerate() {
        let count = rows.iter().filter(|&&r| r).count() as f64;
        for j in 0..b {
            if rows[j] {
                row_weights[j * u + k] = 1.0 / count;
            }
        }
    }
    penalty_from_jacobian(tape, jac, d, row_weights, centered_at_one)
}

/// `mean_b ‖∇_h D_CG(h, y)‖²` (or `(‖·‖ − 1)²`), gradient w.r.t. `h` only.
pub fn gp_cg(tape: &mut Tape, d_cg: &BoundMlp, h: NodeId, y: NodeId, centered_at_one: bool) -> Result<NodeId> {
    let (b, d_h) = tape.value(h).dims();
    if b == 0 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let input = tape.concat_cols(h, y)?;
    let trace = d_cg.forward(tape, input)?;
    let jac = input_jacobian(tape, d_cg, &trace, &[0])?;
    penalty_from_jacobian(tape, jac, d_h, vec![1.0 / b as f64; b], centered_at_one)
}

/// `x_a + ε ⊙ (x_b − x_a)` with one `ε` per row.
pub fn interpolate(a: &Tensor, b: &Tensor, eps: &[f64]) -> Result<Tensor> {
    if a.dims() != b.dims() || eps.len() != a.rows() {
        return Err(HexaError::dim("interpolate", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let mut out = a.clone();
    for j in 0..a.rows() {
        for (o, (&va, &vb)) in out.row_mut(j).iter_mut().zip(a.row(j).iter().zip(b.row(j))) {
            *o = va + eps[j] * (vb - va);
        }
    }
    Ok(out)
}

/// `−mean(score_fake)`.
pub fn loss_g_cg(tape: &mut Tape, score_fake: NodeId) -> Result<NodeId> {
    let mean = tape.mean(score_fake)?;
    tape.scale(mean, -1.0)
}

/// `mean(score_fake) − mean(score_real)`.
pub fn loss_d_cg(tape: &mut Tape, score_fake: NodeId, score_real: NodeId) -> Result<NodeId> {
    let f = tape.mean(score_fake)?;
    let r = tape.mean(score_real)?;
    tape.sub(f, r)
}

/// `−mean_b Σ_k t_k · ln(max(p_k, 1e-12))`.
pub fn cross_entropy(tape: &mut Tape, probs: NodeId, targets: &Tensor) -> Result<NodeId> {
    if tape.value(probs).dims() != targets.dims() {
        return Err(HexaError::dim(
            "cross_entropy",
            format!("probs {:?}, targets {:?}", tape.value(probs).shape(), targets.shape()),
        ));
    }
    let b = targets.rows().max(1) as f64;
    let logp = tape.log(probs)?;
    weighted_total(tape, logp, targets.map(|t| -t / b))
}

/// `−mean` of the label column of `D_MI` scores on pseudo-labelled rows.
pub fn loss_c_adv(tape: &mut Tape, scores_u: NodeId) -> Result<NodeId> {
    let (b, w) = tape.value(scores_u).dims();
    let mut coeff = Tensor::zeros(b, w);
    for j in 0..b {
        coeff.set(j, w - 1, -1.0 / b.max(1) as f64);
    }
    weighted_total(tape, scores_u, coeff)
}

/// Score-function surrogate whose gradient w.r.t. the classifier is an
/// unbiased estimate of the gradient of [`loss_c_adv`] when `y_u` is sampled
/// from `probs`: `−(1/b) Σ_j (s_j − s̄) · ln p(y_u,j | x_j)` with `s` the
/// label-column scores (treated as constants) and `s̄` their mean.
pub fn pseudo_label_surrogate(tape: &mut Tape, probs: NodeId, y_u: &Tensor, label_scores: &[f64]) -> Result<NodeId> {
    let (b, n_c) = tape.value(probs).dims();
    if y_u.dims() != (b, n_c) || label_scores.len() != b {
        return Err(HexaError::dim(
            "pseudo_label_surrogate",
            format!("probs {:?}, y_u {:?}, {} scores", tape.value(probs).shape(), y_u.shape(), label_scores.len()),
        ));
    }
    if b == 0 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let baseline = label_scores.iter().sum::<f64>() / b as f64;
    let mut coeff = Tensor::zeros(b, n_c);
    for j in 0..b {
        let adv = label_scores[j] - baseline;
        for k in 0..n_c {
            coeff.set(j, k, -adv * y_u.get(j, k) / b as f64);
        }
    }
    let logp = tape.log(probs)?;
    weighted_total(tape, logp, coeff)
}

/// Named loss terms feeding [`assemble_objective`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Part {
    /// Element-wise critic loss, label unit included when enabled.
    DMi,
    GpMi,
    GMi,
    Recon,
    DCg,
    GpCg,
    GCg,
    /// Element-wise generator loss on conditionally generated rows.
    GMiCond,
    /// Cross-entropy of `C` on conditionally generated rows.
    CeCond,
    /// Cross-entropy of `C` on labelled plus conditional rows.
    Ce,
    /// Classifier adversarial term (or a surrogate with the same gradient).
    CAdv,
}

impl Part {
    pub fn name(self) -> &'static str {
        match self {
            Part::DMi => "L_D_MI",
            Part::GpMi => "L_GP_MI",
            Part::GMi => "L_G_MI",
            Part::Recon => "L_recon",
            Part::DCg => "L_D_CG",
            Part::GpCg => "L_GP_CG",
            Part::GCg => "L_G_CG",
            Part::GMiCond => "L_G_MI(x̂_c)",
            Part::CeCond => "L_CE(x̂_c, y_c)",
            Part::Ce => "L_CE(x̂_lc, y_lc)",
            Part::CAdv => "L_C",
        }
    }
}

pub type LossParts = BTreeMap<Part, NodeId>;

/// Weighted objective for one component: `base + Σ weight·term`.
///
/// The base term must be present. A weighted term may be absent only when
/// its weight is zero, for penalties under [`Regularizer::WeightClip`], or
/// for [`Part::CAdv`] when a batch has no unlabelled rows.
pub fn assemble_objective(tape: &mut Tape, weights: &LossWeights, component: Component, parts: &LossParts) -> Result<NodeId> {
    let clip = weights.regularizer == Regularizer::WeightClip;
    let (base, terms): (Part, Vec<(Part, f64, bool)>) = match component {
        Component::DiscMi => (Part::DMi, vec![(Part::GpMi, weights.lambda1, clip)]),
        Component::Encoder | Component::GenMi => (Part::GMi, vec![(Part::Recon, weights.alpha1, false)]),
        Component::DiscCg => (Part::DCg, vec![(Part::GpCg, weights.lambda2, clip)]),
        Component::GenCg => (
            Part::GCg,
            vec![(Part::GMiCond, weights.alpha2, false), (Part::CeCond, weights.alpha3, false)],
        ),
        Component::Classifier => (Part::Ce, vec![(Part::CAdv, weights.alpha4, true)]),
    };
    let missing = |p: Part| HexaError::contract(format!("objective for {} is missing {}", component.name(), p.name()));
    let base_id = *parts.get(&base).ok_or_else(|| missing(base))?;
    let mut sum = vec![(base_id, 1.0)];
    for (part, w, optional) in terms {
        if w == 0.0 || (optional && !parts.contains_key(&part)) {
            continue;
        }
        let id = *parts.get(&part).ok_or_else(|| missing(part))?;
        sum.push((id, w));
    }
    tape.weighted_sum(&sum)
}
