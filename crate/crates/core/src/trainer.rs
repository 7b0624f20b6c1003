//! The alternating training schedule.
//!
//! Each batch group runs three steps in order:
//!
//! 1. imputation: `n_critic` updates of `D_MI`, then one joint update of `E`
//!    and `G_MI`;
//! 2. conditional generation: `n_cg` rounds of `n_critic` `D_CG` updates
//!    followed by one `G_CG` update;
//! 3. classification: one update of `C` on labelled rows, class-balancing
//!    conditional rows and pseudo-labelled rows.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{sample_batch, uniform_noise, Batch, DirtyDataset};
use crate::engine::{clip_weights, RmsPropState, Tape, Tensor, DEFAULT_DECAY, DEFAULT_EPSILON, DEFAULT_LEARNING_RATE};
use crate::error::{HexaError, Result};
use crate::losses::{
    assemble_objective, cross_entropy, gp_cg, gp_mi, interpolate, loss_d_cg, loss_d_mi, loss_g_cg, loss_g_mi,
    loss_recon, pseudo_label_surrogate, LossParts, LossWeights, Part, Regularizer,
};
use crate::networks::{fill_noise, sample_pseudo_label, Component, HexaGanParams, InitScheme};

const PROBE_SEED_SALT: u64 = 0x05ee_d0f9_a0be;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub n_critic: usize,
    pub n_cg: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub decay: f64,
    pub epsilon: f64,
    /// Noise width for `G_CG`; `None` means the feature count.
    pub d_z: Option<usize>,
    pub seed: u64,
    pub init: InitScheme,
    /// Train `E`/`G_MI`/`D_MI`; when off, missing inputs stay noise-filled.
    pub use_imputation: bool,
    /// Train `G_CG`/`D_CG` and balance classifier batches with generated rows.
    pub use_conditional: bool,
    /// Use the label unit of `D_MI` and the pseudo-label term for `C`.
    pub use_label_unit: bool,
    /// Also show `D_MI` conditionally generated rows, all marked fake,
    /// during its imputation-step updates.
    pub critic_sees_conditional: bool,
    /// Include the label unit in the `D_MI` gradient penalty.
    pub penalize_label_unit: bool,
    /// Epoch interval for [`EpochRecord::checkpoint_due`]; 0 means final only.
    pub checkpoint_every: usize,
    /// Pass hidden vectors to [`TrainObserver::on_hidden`] every epoch.
    pub export_hidden: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            n_critic: 5,
            n_cg: 10,
            batch_size: 64,
            epochs: 300,
            learning_rate: DEFAULT_LEARNING_RATE,
            decay: DEFAULT_DECAY,
            epsilon: DEFAULT_EPSILON,
            d_z: None,
            seed: 0,
            init: InitScheme::He,
            use_imputation: true,
            use_conditional: true,
            use_label_unit: true,
            critic_sees_conditional: false,
            penalize_label_unit: false,
            checkpoint_every: 10,
            export_hidden: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        let positive = [
            ("n_critic", self.n_critic),
            ("n_cg", self.n_cg),
            ("epochs", self.epochs),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(HexaError::config(format!("{name} must be >= 1")));
            }
        }
        if self.batch_size < 2 {
            return Err(HexaError::config(format!("batch_size must be >= 2, got {}", self.batch_size)));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(HexaError::config(format!("learning_rate must be >= 0, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.decay) || !(self.epsilon > 0.0) {
            return Err(HexaError::config("rmsprop decay must lie in [0,1) and epsilon be positive"));
        }
        if self.d_z == Some(0) {
            return Err(HexaError::config("d_z must be >= 1"));
        }
        if !self.use_imputation && (self.use_conditional || self.use_label_unit) {
            return Err(HexaError::config(
                "conditional generation and the label unit both need the imputation networks",
            ));
        }
        Ok(())
    }

    pub fn noise_width(&self, d: usize) -> usize {
        self.d_z.unwrap_or(d)
    }
}

/// Per-step values of every recorded loss, by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossTrace {
    series: BTreeMap<String, Vec<f64>>,
}

impl LossTrace {
    pub fn push(&mut self, name: &str, value: f64) {
        self.series.entry(name.to_string()).or_default().push(value);
    }

    pub fn get(&self, name: &str) -> &[f64] {
        self.series.get(name).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.series.keys().map(String::as_str)
    }

    fn lengths(&self) -> BTreeMap<String, usize> {
        self.series.iter().map(|(k, v)| (k.clone(), v.len())).collect()
    }

    /// Mean of each series over entries appended after `since`.
    fn means_since(&self, since: &BTreeMap<String, usize>) -> BTreeMap<String, f64> {
        self.series
            .iter()
            .filter_map(|(k, v)| {
                let start = since.get(k).copied().unwrap_or(0);
                let tail = &v[start..];
                (!tail.is_empty()).then(|| (k.clone(), tail.iter().sum::<f64>() / tail.len() as f64))
            })
            .collect()
    }
}

/// Summary emitted at the end of every epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub losses: BTreeMap<String, f64>,
    pub probe_rmse: Option<f64>,
    pub checkpoint_due: bool,
}

/// Held-out cells scored after every epoch.
#[derive(Clone, Debug)]
pub struct Probe {
    /// Dataset as seen by the model (scored cells missing).
    pub data: DirtyDataset,
    /// Ground truth, aligned with `data.x`.
    pub truth: Tensor,
    /// `1` marks a scored cell.
    pub scored: Tensor,
}

impl Probe {
    pub fn rmse(&self, x_hat: &Tensor) -> f64 {
        let mut sum = 0.0;
        let mut count = 0usize;
        for ((&t, &v), &s) in self.truth.data().iter().zip(x_hat.data()).zip(self.scored.data()) {
            if s == 1.0 {
                sum += (t - v) * (t - v);
                count += 1;
            }
        }
        (sum / count.max(1) as f64).sqrt()
    }
}

/// Hooks called while [`train`] runs. All methods default to no-ops.
pub trait TrainObserver {
    fn on_batch(&mut self, _row_ids: &[usize]) {}

    fn on_epoch(&mut self, _record: &EpochRecord, _state: &TrainState) -> Result<()> {
        Ok(())
    }

    /// Encoded labelled rows, conditionally generated rows, and their labels.
    fn on_hidden(&mut self, _epoch: usize, _real: &Tensor, _generated: &Tensor, _labels: &Tensor) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: HexaGanParams,
    /// One per network, indexed by [`Component::index`].
    pub optimizers: Vec<RmsPropState>,
    /// Completed epochs.
    pub epoch: usize,
    pub rng: ChaCha8Rng,
    pub trace: LossTrace,
    /// Parameter updates applied per network, indexed by [`Component::index`].
    pub updates: [usize; 6],
    /// Batch groups without labelled rows, where steps 2 and 3 were skipped.
    pub skipped_groups: usize,
    pub history: Vec<EpochRecord>,
}

impl TrainState {
    pub fn new(d: usize, n_classes: usize, cfg: &TrainConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let params = HexaGanParams::init(d, n_classes, cfg.noise_width(d), cfg.init, &mut rng)?;
        let optimizers = Component::ALL
            .iter()
            .map(|&c| RmsPropState::new(params.network(c).params(), cfg.learning_rate, cfg.decay, cfg.epsilon))
            .collect();
        Ok(Self {
            params,
            optimizers,
            epoch: 0,
            rng,
            trace: LossTrace::default(),
            updates: [0; 6],
            skipped_groups: 0,
            history: Vec::new(),
        })
    }

    fn checked(&self, component: Component, value: f64) -> Result<f64> {
        if value.is_finite() {
            Ok(value)
        } else {
            Err(HexaError::Divergence {
                component: component.name(),
                epoch: self.epoch + 1,
                step: self.updates[component.index()] + 1,
                value,
            })
        }
    }

    fn apply(&mut self, component: Component, grads: Vec<Tensor>, weights: &LossWeights) -> Result<()> {
        let net = self.params.network_mut(component);
        self.optimizers[component.index()].step(net.params_mut(), &grads)?;
        let is_critic = matches!(component, Component::DiscMi | Component::DiscCg);
        if is_critic && weights.regularizer == Regularizer::WeightClip {
            clip_weights(net.params_mut(), weights.clip)?;
        }
        self.updates[component.index()] += 1;
        Ok(())
    }

    pub fn updates_of(&self, component: Component) -> usize {
        self.updates[component.index()]
    }

    /// Imputes `ds` with noise from the state's generator.
    pub fn impute_with(&mut self, ds: &DirtyDataset) -> Result<Tensor> {
        impute_dataset(&self.params, ds, &mut self.rng)
    }
}

/// `x̂` for every row of `ds`: observed cells copied, missing cells generated.
pub fn impute_dataset<R: Rng + ?Sized>(params: &HexaGanParams, ds: &DirtyDataset, rng: &mut R) -> Result<Tensor> {
    if ds.d() != params.d {
        return Err(HexaError::contract(format!(
            "model expects {} features, dataset has {}",
            params.d,
            ds.d()
        )));
    }
    let z = uniform_noise(ds.n(), ds.d(), rng);
    params.impute(&ds.x, &ds.mask, &z)
}

/// Inputs the classifier sees for `ds`: imputed rows, or noise-filled rows
/// when the imputation networks are disabled.
pub fn classifier_inputs<R: Rng + ?Sized>(
    params: &HexaGanParams,
    cfg: &TrainConfig,
    ds: &DirtyDataset,
    rng: &mut R,
) -> Result<Tensor> {
    if cfg.use_imputation {
        impute_dataset(params, ds, rng)
    } else {
        fill_noise(&ds.x, &ds.mask, &uniform_noise(ds.n(), ds.d(), rng))
    }
}

/// Rows to synthesise per class so every class reaches the largest count.
pub fn balance_targets(counts: &[usize]) -> Vec<usize> {
    let max = counts.iter().copied().max().unwrap_or(0);
    counts.iter().map(|&c| max - c).collect()
}

fn label_counts(y: &Tensor, labeled: &[bool]) -> Vec<usize> {
    let mut counts = vec![0; y.cols()];
    for (j, &l) in labeled.iter().enumerate() {
        if l {
            if let Some(c) = y.row(j).iter().position(|&v| v == 1.0) {
                counts[c] += 1;
            }
        }
    }
    counts
}

/// One-hot targets for the rows [`balance_targets`] asks for, class by class.
fn deficit_labels(y: &Tensor, labeled: &[bool]) -> Tensor {
    let deficits = balance_targets(&label_counts(y, labeled));
    let total: usize = deficits.iter().sum();
    let mut out = Tensor::zeros(total, y.cols());
    let mut r = 0;
    for (c, &k) in deficits.iter().enumerate() {
        for _ in 0..k {
            out.set(r, c, 1.0);
            r += 1;
        }
    }
    out
}

/// Tape-free forward: `(h_c, x̂_c)` for noise `z` and labels `y_c`.
fn generate_conditional(params: &HexaGanParams, z: &Tensor, y_c: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let nets = params.bind(&mut tape, &[]);
    let zi = tape.constant(z.clone());
    let yi = tape.constant(y_c.clone());
    let h = nets.generate_hidden_conditional(&mut tape, zi, yi)?;
    let x = nets.generate_imputation(&mut tape, h)?;
    Ok((tape.value(h).clone(), tape.value(x).clone()))
}

fn conditional_rows(state: &mut TrainState, y: &Tensor, labeled: &[bool]) -> Result<Option<(Tensor, Tensor)>> {
    let y_c = deficit_labels(y, labeled);
    if y_c.rows() == 0 {
        return Ok(None);
    }
    let z = uniform_noise(y_c.rows(), state.params.d_z, &mut state.rng);
    let (_, x_c) = generate_conditional(&state.params, &z, &y_c)?;
    Ok(Some((x_c, y_c)))
}

/// True labels on labelled rows, fresh draws from `C(x̂)` elsewhere.
fn label_inputs(state: &mut TrainState, batch: &Batch, x_hat: &Tensor) -> Result<Tensor> {
    if batch.label_mask.iter().all(|&l| l) {
        return Ok(batch.y.clone());
    }
    let probs = state.params.predict_proba(x_hat)?;
    let drawn = sample_pseudo_label(&probs, &mut state.rng)?;
    let mut y = batch.y.clone();
    for (j, &l) in batch.label_mask.iter().enumerate() {
        if !l {
            y.row_mut(j).copy_from_slice(drawn.row(j));
        }
    }
    Ok(y)
}

fn row_uniforms(state: &mut TrainState, n: usize) -> Vec<f64> {
    (0..n).map(|_| state.rng.random::<f64>()).collect()
}

/// `n_critic` updates of `D_MI`, then one joint update of `E` and `G_MI`.
pub fn imputation_step(state: &mut TrainState, cfg: &TrainConfig, batch: &Batch) -> Result<()> {
    if batch.is_empty() {
        return Err(HexaError::contract("imputation_step on an empty batch"));
    }
    if !cfg.use_imputation {
        return Ok(());
    }
    let w = &cfg.weights;
    let x_tilde = fill_noise(&batch.x, &batch.m, &batch.z)?;
    let (x_bar, x_hat) = {
        let mut tape = Tape::new();
        let nets = state.params.bind(&mut tape, &[]);
        let xt = tape.constant(x_tilde.clone());
        let mi = tape.constant(batch.m.clone());
        let h = nets.encode(&mut tape, xt, mi)?;
        let xbar = nets.generate_imputation(&mut tape, h)?;
        let xhat = nets.compose_imputed(&mut tape, &batch.x, &batch.m, xbar)?;
        (tape.value(xbar).clone(), tape.value(xhat).clone())
    };
    let cond = if cfg.use_conditional && cfg.critic_sees_conditional {
        conditional_rows(state, &batch.y, &batch.label_mask)?
    } else {
        None
    };
    let m_y = cfg.use_label_unit.then_some(batch.label_mask.as_slice());
    let gp_label = if cfg.penalize_label_unit { m_y } else { None };

    for _ in 0..cfg.n_critic {
        let y = label_inputs(state, batch, &x_hat)?;
        let eps = (w.regularizer == Regularizer::StandardGp).then(|| row_uniforms(state, batch.len()));
        let mut tape = Tape::new();
        let nets = state.params.bind(&mut tape, &[Component::DiscMi]);
        let xh = tape.constant(x_hat.clone());
        let yi = tape.constant(y);
        let scores = nets.discriminate_elements(&mut tape, xh, yi)?;
        let cond_scores = match &cond {
            Some((x_c, y_c)) => {
                let xc = tape.constant(x_c.clone());
                let yc = tape.constant(y_c.clone());
                Some(nets.discriminate_elements(&mut tape, xc, yc)?)
            }
            None => None,
        };
        let mut parts = LossParts::new();
        let d_loss = loss_d_mi(&mut tape, scores, &batch.m, m_y, cond_scores, cfg.weights.critic_balance)?;
        parts.insert(Part::DMi, d_loss);
        let d_mi = nets.net(Component::DiscMi);
        let gp = match (w.regularizer, eps) {
            (Regularizer::ZeroCentered, _) => Some(gp_mi(&mut tape, d_mi, xh, yi, &batch.m, gp_label, false)?),
            (Regularizer::StandardGp, Some(eps)) => {
                let xi = tape.constant(interpolate(&x_hat, &x_bar, &eps)?);
                Some(gp_mi(&mut tape, d_mi, xi, yi, &batch.m, gp_label, true)?)
            }
            _ => None,
        };
        if let Some(gp) = gp {
            parts.insert(Part::GpMi, gp);
        }
        let obj = assemble_objective(&mut tape, w, Component::DiscMi, &parts)?;
        let value = state.checked(Component::DiscMi, tape.value(obj).item())?;
        let mut grads = tape.backward(obj)?;
        let g = nets.net(Component::DiscMi).grads(&mut grads);
        state.apply(Component::DiscMi, g, w)?;
        state.trace.push("D_MI", value);
        if let Some(gp) = gp {
            state.trace.push("GP_MI", tape.value(gp).item());
        }
    }

    let y = label_inputs(state, batch, &x_hat)?;
    let mut tape = Tape::new();
    let nets = state.params.bind(&mut tape, &[Component::Encoder, Component::GenMi]);
    let xt = tape.constant(x_tilde);
    let mi = tape.constant(batch.m.clone());
    let h = nets.encode(&mut tape, xt, mi)?;
    let xbar = nets.generate_imputation(&mut tape, h)?;
    let xhat = nets.compose_imputed(&mut tape, &batch.x, &batch.m, xbar)?;
    let yi = tape.constant(y);
    let scores = nets.discriminate_elements(&mut tape, xhat, yi)?;
    let g_loss = loss_g_mi(&mut tape, scores, &batch.m)?;
    let recon = loss_recon(&mut tape, &batch.x, xbar, &batch.m)?;
    let parts = LossParts::from([(Part::GMi, g_loss), (Part::Recon, recon)]);
    let obj = assemble_objective(&mut tape, w, Component::GenMi, &parts)?;
    let value = state.checked(Component::GenMi, tape.value(obj).item())?;
    let mut grads = tape.backward(obj)?;
    let ge = nets.net(Component::Encoder).grads(&mut grads);
    let gg = nets.net(Component::GenMi).grads(&mut grads);
    state.apply(Component::Encoder, ge, w)?;
    state.apply(Component::GenMi, gg, w)?;
    state.trace.push("G_MI", value);
    state.trace.push("recon", tape.value(recon).item());
    Ok(())
}

/// `n_cg` rounds of `n_critic` `D_CG` updates and one `G_CG` update.
///
/// Real pairs are encoded labelled rows; fake pairs share their labels.
/// Batches without labelled rows are skipped.
pub fn conditional_step(state: &mut TrainState, cfg: &TrainConfig, batch: &Batch) -> Result<()> {
    if !cfg.use_conditional {
        return Ok(());
    }
    let lab = batch.labeled();
    if lab.is_empty() {
        state.skipped_groups += 1;
        return Ok(());
    }
    let w = &cfg.weights;
    let b = lab.len();
    let d_z = state.params.d_z;
    let h_l = {
        let x_tilde = fill_noise(&lab.x, &lab.m, &lab.z)?;
        let mut tape = Tape::new();
        let nets = state.params.bind(&mut tape, &[]);
        let xt = tape.constant(x_tilde);
        let mi = tape.constant(lab.m.clone());
        let h = nets.encode(&mut tape, xt, mi)?;
        tape.value(h).clone()
    };
    let y_l = lab.y.clone();

    for _ in 0..cfg.n_cg {
        for _ in 0..cfg.n_critic {
            let z = uniform_noise(b, d_z, &mut state.rng);
            let (h_c, _) = generate_conditional(&state.params, &z, &y_l)?;
            let eps = (w.regularizer == Regularizer::StandardGp).then(|| row_uniforms(state, b));
            let mut tape = Tape::new();
            let nets = state.params.bind(&mut tape, &[Component::DiscCg]);
            let hl = tape.constant(h_l.clone());
            let yl = tape.constant(y_l.clone());
            let hc = tape.constant(h_c.clone());
            let real = nets.discriminate_hidden(&mut tape, hl, yl)?;
            let fake = nets.discriminate_hidden(&mut tape, hc, yl)?;
            let mut parts = LossParts::new();
            let d_loss = loss_d_cg(&mut tape, fake, real)?;
            parts.insert(Part::DCg, d_loss);
            let d_cg = nets.net(Component::DiscCg);
            let gp = match (w.regularizer, eps) {
                (Regularizer::ZeroCentered, _) => Some(gp_cg(&mut tape, d_cg, hl, yl, false)?),
                (Regularizer::StandardGp, Some(eps)) => {
                    let hi = tape.constant(interpolate(&h_l, &h_c, &eps)?);
                    Some(gp_cg(&mut tape, d_cg, hi, yl, true)?)
                }
                _ => None,
            };
            if let Some(gp) = gp {
                parts.insert(Part::GpCg, gp);
            }
            let obj = assemble_objective(&mut tape, w, Component::DiscCg, &parts)?;
            let value = state.checked(Component::DiscCg, tape.value(obj).item())?;
            let mut grads = tape.backward(obj)?;
            let g = nets.net(Component::DiscCg).grads(&mut grads);
            state.apply(Component::DiscCg, g, w)?;
            state.trace.push("D_CG", value);
        }

        let z = uniform_noise(b, d_z, &mut state.rng);
        let mut tape = Tape::new();
        let nets = state.params.bind(&mut tape, &[Component::GenCg]);
        let zi = tape.constant(z);
        let yc = tape.constant(y_l.clone());
        let h_c = nets.generate_hidden_conditional(&mut tape, zi, yc)?;
        let fake = nets.discriminate_hidden(&mut tape, h_c, yc)?;
        let mut parts = LossParts::new();
        let g_loss = loss_g_cg(&mut tape, fake)?;
        parts.insert(Part::GCg, g_loss);
        if w.alpha2 != 0.0 || w.alpha3 != 0.0 {
            let x_c = nets.generate_imputation(&mut tape, h_c)?;
            if w.alpha2 != 0.0 {
                let scores = nets.discriminate_elements(&mut tape, x_c, yc)?;
                let term = loss_g_mi(&mut tape, scores, &Tensor::zeros(b, state.params.d))?;
                parts.insert(Part::GMiCond, term);
            }
            if w.alpha3 != 0.0 {
                let probs = nets.classify(&mut tape, x_c)?;
                let term = cross_entropy(&mut tape, probs, &y_l)?;
                parts.insert(Part::CeCond, term);
            }
        }
        let obj = assemble_objective(&mut tape, w, Component::GenCg, &parts)?;
        let value = state.checked(Component::GenCg, tape.value(obj).item())?;
        let mut grads = tape.backward(obj)?;
        let g = nets.net(Component::GenCg).grads(&mut grads);
        state.apply(Component::GenCg, g, w)?;
        state.trace.push("G_CG", value);
    }
    Ok(())
}

fn batch_inputs(state: &HexaGanParams, cfg: &TrainConfig, batch: &Batch) -> Result<Tensor> {
    if cfg.use_imputation {
        state.impute(&batch.x, &batch.m, &batch.z)
    } else {
        fill_noise(&batch.x, &batch.m, &batch.z)
    }
}

/// One update of `C` on labelled plus class-balancing rows, with the
/// pseudo-label term on unlabelled rows when the label unit is in use.
pub fn classifier_step(state: &mut TrainState, cfg: &TrainConfig, batch: &Batch) -> Result<()> {
    let lab = batch.labeled();
    if lab.is_empty() {
        return Err(HexaError::contract("classifier_step needs labelled rows"));
    }
    let w = &cfg.weights;
    let mut x_lc = batch_inputs(&state.params, cfg, &lab)?;
    let mut y_lc = lab.y.clone();
    if cfg.use_conditional {
        if let Some((x_c, y_c)) = conditional_rows(state, &lab.y, &lab.label_mask)? {
            x_lc = x_lc.vstack(&x_c)?;
            y_lc = y_lc.vstack(&y_c)?;
        }
    }
    let unl = batch.unlabeled();
    let adversarial = cfg.use_label_unit && w.alpha4 != 0.0 && !unl.is_empty();
    let x_u = if adversarial { Some(batch_inputs(&state.params, cfg, &unl)?) } else { None };

    let mut tape = Tape::new();
    let nets = state.params.bind(&mut tape, &[Component::Classifier]);
    let xi = tape.constant(x_lc);
    let probs = nets.classify(&mut tape, xi)?;
    let ce = cross_entropy(&mut tape, probs, &y_lc)?;
    let mut parts = LossParts::from([(Part::Ce, ce)]);
    let mut c_adv = None;
    if let Some(x_u) = x_u {
        let xu = tape.constant(x_u.clone());
        let p_u = nets.classify(&mut tape, xu)?;
        let y_u = sample_pseudo_label(tape.value(p_u), &mut state.rng)?;
        let scores = state
            .params
            .network(Component::DiscMi)
            .infer(&x_u.hstack(&y_u)?)?;
        let label_scores: Vec<f64> = (0..scores.rows()).map(|j| scores.get(j, scores.cols() - 1)).collect();
        c_adv = Some(-label_scores.iter().sum::<f64>() / label_scores.len() as f64);
        let surrogate = pseudo_label_surrogate(&mut tape, p_u, &y_u, &label_scores)?;
        parts.insert(Part::CAdv, surrogate);
    }
    let obj = assemble_objective(&mut tape, w, Component::Classifier, &parts)?;
    state.checked(Component::Classifier, tape.value(obj).item())?;
    let mut grads = tape.backward(obj)?;
    let g = nets.net(Component::Classifier).grads(&mut grads);
    state.apply(Component::Classifier, g, w)?;
    state.trace.push("CE", tape.value(ce).item());
    if let Some(v) = c_adv {
        state.trace.push("L_C", v);
    }
    Ok(())
}

fn labeled_class_count(ds: &DirtyDataset) -> usize {
    ds.class_counts().iter().filter(|&&c| c > 0).count()
}

/// Runs the full schedule for `cfg.epochs` epochs.
pub fn train(ds: &DirtyDataset, cfg: &TrainConfig, probe: Option<&Probe>, observer: &mut dyn TrainObserver) -> Result<TrainState> {
    cfg.validate()?;
    if labeled_class_count(ds) < 2 {
        return Err(HexaError::data("training needs labelled rows from at least two classes"));
    }
    if let Some(p) = probe {
        if p.data.d() != ds.d() || p.truth.dims() != p.data.x.dims() || p.scored.dims() != p.data.x.dims() {
            return Err(HexaError::contract("probe shapes do not match the training data"));
        }
    }
    let mut state = TrainState::new(ds.d(), ds.n_classes(), cfg)?;
    let mut order: Vec<usize> = (0..ds.n()).collect();
    for epoch in 0..cfg.epochs {
        let marks = state.trace.lengths();
        order.shuffle(&mut state.rng);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let batch = sample_batch(ds, chunk, &mut state.rng)?;
            observer.on_batch(&batch.row_ids);
            imputation_step(&mut state, cfg, &batch)?;
            if batch.n_labeled() == 0 {
                state.skipped_groups += 1;
                continue;
            }
            conditional_step(&mut state, cfg, &batch)?;
            classifier_step(&mut state, cfg, &batch)?;
        }
        state.epoch = epoch + 1;
        let probe_rmse = match probe {
            Some(p) => {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ PROBE_SEED_SALT ^ (epoch as u64));
                Some(p.rmse(&impute_dataset(&state.params, &p.data, &mut rng)?))
            }
            None => None,
        };
        let last = epoch + 1 == cfg.epochs;
        let record = EpochRecord {
            epoch: epoch + 1,
            losses: state.trace.means_since(&marks),
            probe_rmse,
            checkpoint_due: last || (cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0),
        };
        if cfg.export_hidden && cfg.use_conditional {
            export_hidden(&state, cfg, ds, epoch + 1, observer)?;
        }
        observer.on_epoch(&record, &state)?;
        state.history.push(record);
    }
    Ok(state)
}

fn export_hidden(
    state: &TrainState,
    cfg: &TrainConfig,
    ds: &DirtyDataset,
    epoch: usize,
    observer: &mut dyn TrainObserver,
) -> Result<()> {
    let idx: Vec<usize> = (0..ds.n()).filter(|&j| ds.label_mask[j]).collect();
    let lab = ds.subset(&idx)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ PROBE_SEED_SALT ^ (epoch as u64).rotate_left(32));
    let z = uniform_noise(lab.n(), lab.d(), &mut rng);
    let (_, h_l) = state.params.impute_with_hidden(&lab.x, &lab.mask, &z)?;
    let zc = uniform_noise(lab.n(), state.params.d_z, &mut rng);
    let (h_c, _) = generate_conditional(&state.params, &zc, &lab.y)?;
    observer.on_hidden(epoch, &h_l, &h_c, &lab.y)
}
