//! Training procedures: naive MF, MF-IPS, MF-DR, CausE and domain
//! adversarial MF (DAMF), plus the bound tracer used during DAMF training.
//!
//! Every trainer is a pure function of its inputs and `config.seed`. Random
//! draws come from separate named streams of the seed, so trainers that
//! share a stream (e.g. the MNAR mini-batches) see identical draws even when
//! one of them also consumes other streams.

use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{Error, Result};
use crate::estimators::{
    bound_value, capacity_terms, ideal_loss_clipped, naive_loss_clipped, pmd_gap_clipped, BoundComponents, LossBatch,
};
use crate::model::{
    init_with, rng_stream, BoundConfig, FactorModel, InteractionSet, PropensityMap, RatingScale, TrainConfig,
};
use crate::optim::{
    batch_from_indices, grad_discrepancy, grad_dr_model, grad_imputation, grad_weighted_mf, project_max_norm,
    sample_observed_indices, sample_uniform_pairs, DrBatch, FactorAdam, FactorGrad, GradTarget,
};

const STREAM_INIT: u64 = 0;
const STREAM_MNAR: u64 = 1;
const STREAM_AUX_INIT: u64 = 2;
const STREAM_UNIFORM: u64 = 3;
const STREAM_MCAR: u64 = 4;
const STREAM_TRACE: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub iteration: usize,
    pub bound: BoundComponents,
    /// Full-matrix loss of clipped predictions, when the truth is known.
    pub ideal_loss: Option<f64>,
}

/// Bound components logged during training.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainTrace {
    pub records: Vec<TraceRecord>,
}

impl TrainTrace {
    pub fn bounds(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.bound.total).collect()
    }

    pub fn ideal_losses(&self) -> Option<Vec<f64>> {
        self.records.iter().map(|r| r.ideal_loss).collect()
    }
}

/// Evaluates the four bound components for the current model.
///
/// (i) is the naive loss of clipped predictions on all observed data.
/// (ii) is the clipped discrepancy between `M` fresh uniform pairs and the
/// observed pairs, maximized by `options.trace_ascent_steps` steps of
/// monotone projected ascent that start from `adversary`, floored at zero.
/// (iii) and (iv) depend only on the hypothesis class and the sample size,
/// so they are constant over a run.
pub fn trace_bound<R: Rng + ?Sized>(
    iteration: usize,
    model: &FactorModel,
    adversary: &FactorModel,
    data: &InteractionSet,
    options: &DamfOptions<'_>,
    rng: &mut R,
) -> Result<TraceRecord> {
    let (m, n) = data.dims();
    let scale = data.scale();
    let naive = naive_loss_clipped(data, model)?;
    let observed = LossBatch::from_observed(data);
    let uniform = sample_uniform_pairs(m, n, data.len(), rng)?;
    let pmd = if options.trace_ascent_steps == 0 {
        pmd_gap_clipped(model, adversary, &uniform, &observed, &scale)?
    } else {
        clipped_gap_ascent(model, adversary.clone(), &uniform, &observed, &scale, options)?
    }
    .max(0.0);
    let (complexity, confidence) = capacity_terms(&options.bound, &scale, m, n, data.len())?;
    let ideal_loss = options
        .true_ratings
        .map(|r| ideal_loss_clipped(r, model, &scale))
        .transpose()?;
    Ok(TraceRecord {
        iteration,
        bound: bound_value(naive, pmd, complexity, confidence),
        ideal_loss,
    })
}

/// Pairs with the model's clipped prediction attached.
fn clipped_targets(model: &FactorModel, batch: &LossBatch, scale: &RatingScale) -> Vec<(usize, usize, f64)> {
    batch
        .pairs
        .iter()
        .map(|&(u, i)| (u, i, scale.clamp(model.score(u, i))))
        .collect()
}

fn clipped_gap(
    adversary: &FactorModel,
    mcar: &[(usize, usize, f64)],
    mnar: &[(usize, usize, f64)],
    scale: &RatingScale,
) -> f64 {
    let mean = |pairs: &[(usize, usize, f64)]| {
        pairs
            .iter()
            .map(|&(u, i, t)| (t - scale.clamp(adversary.score(u, i))).powi(2))
            .sum::<f64>()
            / pairs.len() as f64
    };
    mean(mcar) - mean(mnar)
}

/// Normalized-gradient ascent on the clipped gap with step halving on
/// failure, so the returned value is at least the gap at the start.
fn clipped_gap_ascent(
    model: &FactorModel,
    mut adversary: FactorModel,
    mcar: &LossBatch,
    mnar: &LossBatch,
    scale: &RatingScale,
    options: &DamfOptions<'_>,
) -> Result<f64> {
    mcar.check_in(model)?;
    mnar.check_in(model)?;
    let mcar = clipped_targets(model, mcar, scale);
    let mnar = clipped_targets(model, mnar, scale);
    let mut gap = clipped_gap(&adversary, &mcar, &mnar, scale);
    let mut eta = options.trace_step_size;
    for _ in 0..options.trace_ascent_steps {
        let mut grad = FactorGrad::zeros_like(&adversary);
        for (pairs, sign) in [(&mcar, 1.0), (&mnar, -1.0)] {
            let w = sign * 2.0 / pairs.len() as f64;
            for &(u, i, t) in pairs.iter() {
                let diff = adversary.score(u, i) - t;
                let g = w * diff;
                for k in 0..adversary.dim() {
                    grad.user[(u, k)] += g * adversary.item_factors[(i, k)];
                    grad.item[(i, k)] += g * adversary.user_factors[(u, k)];
                }
            }
        }
        let norm = (grad.user.norm_squared() + grad.item.norm_squared()).sqrt();
        if norm == 0.0 {
            break;
        }
        let mut accepted = false;
        while eta > 1e-6 * options.trace_step_size {
            let mut trial = adversary.clone();
            trial.user_factors += &grad.user * (eta / norm);
            trial.item_factors += &grad.item * (eta / norm);
            project_max_norm(&mut trial, options.adversary_max_norm);
            let trial_gap = clipped_gap(&trial, &mcar, &mnar, scale);
            if trial_gap >= gap {
                adversary = trial;
                gap = trial_gap;
                accepted = true;
                break;
            }
            eta *= 0.5;
        }
        if !accepted {
            break;
        }
        eta = (eta * 1.5).min(options.trace_step_size);
    }
    Ok(gap)
}

/// Validation-based early stopping that keeps the best model seen.
struct Checkpoints<'a> {
    validation: Option<&'a InteractionSet>,
    patience: usize,
    best: Option<(f64, FactorModel)>,
    stale: usize,
}

impl<'a> Checkpoints<'a> {
    fn new(validation: Option<&'a InteractionSet>, patience: usize) -> Self {
        Self {
            validation,
            patience,
            best: None,
            stale: 0,
        }
    }

    /// Returns true when training should stop.
    fn check(&mut self, model: &FactorModel) -> Result<bool> {
        let Some(val) = self.validation else {
            return Ok(false);
        };
        let loss = naive_loss_clipped(val, model)?;
        match &self.best {
            Some((best, _)) if loss >= *best => {
                self.stale += 1;
                Ok(self.patience > 0 && self.stale >= self.patience)
            }
            _ => {
                self.best = Some((loss, model.clone()));
                self.stale = 0;
                Ok(false)
            }
        }
    }

    fn finish(self, last: FactorModel) -> Result<FactorModel> {
        if let Some(val) = self.validation {
            if let Some((best, model)) = self.best {
                if naive_loss_clipped(val, &last)? >= best {
                    return Ok(model);
                }
            }
        }
        Ok(last)
    }
}

fn check_inputs(data: &InteractionSet, config: &TrainConfig, validation: Option<&InteractionSet>) -> Result<()> {
    config.validate()?;
    if let Some(v) = validation {
        if v.dims() != data.dims() {
            return Err(Error::Shape(format!(
                "validation is {:?}, training data is {:?}",
                v.dims(),
                data.dims()
            )));
        }
    }
    Ok(())
}

/// Draws MNAR mini-batches and repeats each for the inner steps (or draws
/// a fresh one per inner step when `resample_inner` is set).
struct MnarBatches<'a, R> {
    data: &'a InteractionSet,
    rng: R,
    size: usize,
    resample: bool,
    current: Vec<usize>,
}

impl<'a, R: Rng> MnarBatches<'a, R> {
    fn new(data: &'a InteractionSet, rng: R, config: &TrainConfig) -> Self {
        Self {
            data,
            rng,
            size: config.batch_size,
            resample: config.resample_inner,
            current: Vec::new(),
        }
    }

    fn indices(&mut self, inner_step: usize) -> Result<&[usize]> {
        if inner_step == 0 || self.resample {
            self.current = sample_observed_indices(self.data, self.size, &mut self.rng)?;
        }
        Ok(&self.current)
    }
}

/// Normalized inverse-propensity weights per observed triple:
/// `w_j = (M / S) / P_j` with `S = sum_j 1 / P_j`.
///
/// The mean of `w * loss` over uniformly drawn observed triples equals
/// `(m n / S)` times the IPS loss, a data-dependent constant that is 1 in
/// expectation under the true propensities and makes `P == 1` collapse to
/// unit weights.
pub fn ips_weights(data: &InteractionSet, propensity: &PropensityMap) -> Result<(Vec<f64>, f64)> {
    let inv: Vec<f64> = data
        .iter()
        .map(|t| propensity.try_get(t.user, t.item).map(|p| 1.0 / p))
        .collect::<Result<_>>()?;
    let total: f64 = inv.iter().sum();
    let ratio = data.len() as f64 / total;
    let cells = (data.num_users() * data.num_items()) as f64;
    Ok((inv.into_iter().map(|w| ratio * w).collect(), cells / total))
}

fn train_weighted(
    data: &InteractionSet,
    weights: Option<&[f64]>,
    config: &TrainConfig,
    validation: Option<&InteractionSet>,
) -> Result<FactorModel> {
    check_inputs(data, config, validation)?;
    let (m, n) = data.dims();
    let mut model = init_with(m, n, config.dim, &mut rng_stream(config.seed, STREAM_INIT));
    let mut adam = FactorAdam::for_model(&model);
    let mut batches = MnarBatches::new(data, rng_stream(config.seed, STREAM_MNAR), config);
    let mut checkpoints = Checkpoints::new(validation, config.patience);
    let ones = vec![1.0; config.batch_size];

    for it in 0..config.max_iterations {
        for step in 0..config.inner_steps {
            let idx = batches.indices(step)?;
            let batch = batch_from_indices(data, idx);
            let w: Vec<f64> = match weights {
                Some(all) => idx.iter().map(|&k| all[k]).collect(),
                None => ones.clone(),
            };
            let grad = grad_weighted_mf(&model, &batch, &w, config.l2)?;
            adam.descend(&mut model, &grad, config.learning_rate)?;
        }
        if (it + 1) % config.log_every == 0 && checkpoints.check(&model)? {
            break;
        }
    }
    checkpoints.finish(model)
}

/// Matrix factorization on the naive (observed-average) loss.
pub fn train_mf(
    data: &InteractionSet,
    config: &TrainConfig,
    validation: Option<&InteractionSet>,
) -> Result<FactorModel> {
    train_weighted(data, None, config, validation)
}

/// Matrix factorization on the inverse-propensity-scored loss.
pub fn train_mf_ips(
    data: &InteractionSet,
    propensity: &PropensityMap,
    config: &TrainConfig,
    validation: Option<&InteractionSet>,
) -> Result<FactorModel> {
    let (w, _) = ips_weights(data, propensity)?;
    train_weighted(data, Some(&w), config, validation)
}

/// How MF-DR treats its imputation model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Imputation {
    /// Jointly learned error-imputation model.
    #[default]
    Learned,
    /// Imputed losses fixed at zero; MF-DR then reduces to MF-IPS.
    FrozenZero,
}

/// Doubly robust joint learning.
///
/// An imputation factor model produces pseudo-ratings Rt, giving imputed
/// losses `(R - Rt)^2`. Each outer iteration first fits the imputation model
/// to the observed errors `(r - R)^2` and then descends the prediction model
/// on the DR objective, with the imputed term estimated on uniform pairs.
pub fn train_mf_dr(
    data: &InteractionSet,
    propensity: &PropensityMap,
    config: &TrainConfig,
    imputation_mode: Imputation,
    validation: Option<&InteractionSet>,
) -> Result<FactorModel> {
    let (weights, _) = ips_weights(data, propensity)?;
    if imputation_mode == Imputation::FrozenZero {
        return train_weighted(data, Some(&weights), config, validation);
    }
    check_inputs(data, config, validation)?;
    let (m, n) = data.dims();
    let mut model = init_with(m, n, config.dim, &mut rng_stream(config.seed, STREAM_INIT));
    let mut imputation = init_with(m, n, config.dim, &mut rng_stream(config.seed, STREAM_AUX_INIT));
    let mut adam = FactorAdam::for_model(&model);
    let mut adam_imp = FactorAdam::for_model(&imputation);
    let mut batches = MnarBatches::new(data, rng_stream(config.seed, STREAM_MNAR), config);
    let mut uniform_rng = rng_stream(config.seed, STREAM_UNIFORM);
    let mut checkpoints = Checkpoints::new(validation, config.patience);

    for it in 0..config.max_iterations {
        let uniform = sample_uniform_pairs(m, n, config.batch_size, &mut uniform_rng)?;
        for step in 0..config.inner_steps {
            let idx = batches.indices(step)?.to_vec();
            let batch = batch_from_indices(data, &idx);
            let w: Vec<f64> = idx.iter().map(|&k| weights[k]).collect();
            let g_imp = grad_imputation(&model, &imputation, &batch, &w, config.l2)?;
            adam_imp.descend(&mut imputation, &g_imp, config.learning_rate)?;
            let dr = DrBatch {
                observed: &batch,
                weights: &w,
                uniform: &uniform,
                imputed_scale: 1.0,
            };
            let grad = grad_dr_model(&model, &imputation, &dr, config.l2)?;
            adam.descend(&mut model, &grad, config.learning_rate)?;
        }
        if (it + 1) % config.log_every == 0 && checkpoints.check(&model)? {
            break;
        }
    }
    checkpoints.finish(model)
}

/// CausE: an MNAR and an MCAR factor model trained on their own naive
/// losses, tied by `tradeoff * (|U_mcar - U_mnar|^2 + |V_mcar - V_mnar|^2)`.
/// Returns the MNAR model.
pub fn train_cause(
    mnar: &InteractionSet,
    mcar: &InteractionSet,
    config: &TrainConfig,
    validation: Option<&InteractionSet>,
) -> Result<FactorModel> {
    Ok(train_cause_pair(mnar, mcar, config, validation)?.0)
}

/// Both CausE models, MNAR first.
pub fn train_cause_pair(
    mnar: &InteractionSet,
    mcar: &InteractionSet,
    config: &TrainConfig,
    validation: Option<&InteractionSet>,
) -> Result<(FactorModel, FactorModel)> {
    check_inputs(mnar, config, validation)?;
    if mnar.dims() != mcar.dims() {
        return Err(Error::Shape(format!(
            "MNAR data is {:?}, MCAR data is {:?}",
            mnar.dims(),
            mcar.dims()
        )));
    }
    let (m, n) = mnar.dims();
    let mut model = init_with(m, n, config.dim, &mut rng_stream(config.seed, STREAM_INIT));
    let mut twin = init_with(m, n, config.dim, &mut rng_stream(config.seed, STREAM_AUX_INIT));
    let mut adam = FactorAdam::for_model(&model);
    let mut adam_twin = FactorAdam::for_model(&twin);
    let mut batches = MnarBatches::new(mnar, rng_stream(config.seed, STREAM_MNAR), config);
    let mut mcar_batches = MnarBatches::new(mcar, rng_stream(config.seed, STREAM_MCAR), config);
    let mut checkpoints = Checkpoints::new(validation, config.patience);
    let ones = vec![1.0; config.batch_size];
    let beta = config.tradeoff;

    for it in 0..config.max_iterations {
        for step in 0..config.inner_steps {
            let batch = batch_from_indices(mnar, batches.indices(step)?);
            let twin_batch = batch_from_indices(mcar, mcar_batches.indices(step)?);
            let mut grad = grad_weighted_mf(&model, &batch, &ones, config.l2)?;
            let mut twin_grad = grad_weighted_mf(&twin, &twin_batch, &ones, config.l2)?;
            if beta != 0.0 {
                let coupling = FactorGrad {
                    user: (&model.user_factors - &twin.user_factors) * (2.0 * beta),
                    item: (&model.item_factors - &twin.item_factors) * (2.0 * beta),
                };
                grad.add_scaled(&coupling, 1.0);
                twin_grad.add_scaled(&coupling, -1.0);
            }
            adam.descend(&mut model, &grad, config.learning_rate)?;
            adam_twin.descend(&mut twin, &twin_grad, config.learning_rate)?;
        }
        if (it + 1) % config.log_every == 0 && checkpoints.check(&model)? {
            break;
        }
    }
    Ok((checkpoints.finish(model)?, twin))
}

/// DAMF-specific settings.
#[derive(Debug, Clone, Copy)]
pub struct DamfOptions<'a> {
    /// Adversary predictions are `adversary_center + U' V'^T`.
    pub adversary_center: f64,
    /// Adversary rows are kept inside the max-norm ball so that
    /// `|adversary prediction - adversary_center| <= adversary_max_norm`.
    pub adversary_max_norm: f64,
    pub bound: BoundConfig,
    /// Attach the ideal loss to every trace record.
    pub true_ratings: Option<&'a DMatrix<f64>>,
    /// Ascent steps used to tighten the discrepancy term of each trace record.
    pub trace_ascent_steps: usize,
    /// Initial (and largest) Frobenius length of one trace ascent step.
    pub trace_step_size: f64,
}

impl DamfOptions<'_> {
    /// Adversary confined to the rating scale; bound at delta = 0.05.
    pub fn for_data(data: &InteractionSet) -> Result<Self> {
        let scale = data.scale();
        let bound = BoundConfig::for_scale(&scale, 0.05)?;
        Ok(Self {
            adversary_center: scale.mid(),
            adversary_max_norm: scale.width() / 2.0,
            bound,
            true_ratings: None,
            trace_ascent_steps: 500,
            trace_step_size: 3.0,
        })
    }
}

/// The adversary DAMF starts from under `seed`.
pub fn init_adversary(m: usize, n: usize, d: usize, seed: u64, options: &DamfOptions<'_>) -> FactorModel {
    let mut adversary =
        init_with(m, n, d, &mut rng_stream(seed, STREAM_AUX_INIT)).with_offset(options.adversary_center);
    project_max_norm(&mut adversary, options.adversary_max_norm);
    adversary
}

/// Domain adversarial matrix factorization.
///
/// Each outer iteration samples an MNAR mini-batch and a batch of uniform
/// (MCAR) pairs, takes `inner_steps` Adam descent steps on the model against
/// `naive + tradeoff * gap + l2 * |U, V|^2` with the adversary fixed, then
/// `inner_steps` Adam ascent steps on the adversary against the gap with the
/// model fixed. The adversary's Adam state persists across iterations. Every
/// `log_every` iterations a [`TraceRecord`] is appended.
pub fn train_damf(
    data: &InteractionSet,
    config: &TrainConfig,
    options: &DamfOptions<'_>,
    validation: Option<&InteractionSet>,
) -> Result<(FactorModel, TrainTrace)> {
    check_inputs(data, config, validation)?;
    if let Some(r) = options.true_ratings {
        if r.shape() != data.dims() {
            return Err(Error::Shape("true ratings do not match the data".into()));
        }
    }
    let (m, n) = data.dims();
    let mut model = init_with(m, n, config.dim, &mut rng_stream(config.seed, STREAM_INIT));
    let mut adversary = init_adversary(m, n, config.dim, config.seed, options);
    let mut adam = FactorAdam::for_model(&model);
    let mut adam_adv = FactorAdam::for_model(&adversary);
    let mut batches = MnarBatches::new(data, rng_stream(config.seed, STREAM_MNAR), config);
    let mut uniform_rng = rng_stream(config.seed, STREAM_UNIFORM);
    let mut trace_rng = rng_stream(config.seed, STREAM_TRACE);
    let mut checkpoints = Checkpoints::new(validation, config.patience);
    let mut trace = TrainTrace::default();
    let ones = vec![1.0; config.batch_size];
    let beta = config.tradeoff;

    for it in 0..config.max_iterations {
        let mcar = sample_uniform_pairs(m, n, config.batch_size, &mut uniform_rng)?;
        let mut mnar = LossBatch::unlabeled(Vec::new());
        for step in 0..config.inner_steps {
            mnar = batch_from_indices(data, batches.indices(step)?);
            let mut grad = grad_weighted_mf(&model, &mnar, &ones, config.l2)?;
            if beta != 0.0 {
                let (gu, gv) = grad_discrepancy(&model, &adversary, &mcar, &mnar, GradTarget::Model)?;
                grad.add_scaled(&FactorGrad { user: gu, item: gv }, beta);
            }
            adam.descend(&mut model, &grad, config.learning_rate)?;
        }
        for _ in 0..config.inner_steps {
            let (gu, gv) = grad_discrepancy(&model, &adversary, &mcar, &mnar, GradTarget::Adversary)?;
            adam_adv.ascend(&mut adversary, &FactorGrad { user: gu, item: gv }, config.learning_rate)?;
            project_max_norm(&mut adversary, options.adversary_max_norm);
        }
        if (it + 1) % config.log_every == 0 {
            trace
                .records
                .push(trace_bound(it + 1, &model, &adversary, data, options, &mut trace_rng)?);
            if checkpoints.check(&model)? {
                break;
            }
        }
    }
    Ok((checkpoints.finish(model)?, trace))
}

/// The five training procedures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Mf,
    MfIps,
    MfDr,
    Cause,
    Damf,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Mf, Method::MfIps, Method::MfDr, Method::Cause, Method::Damf];

    pub fn name(self) -> &'static str {
        match self {
            Method::Mf => "mf",
            Method::MfIps => "mf-ips",
            Method::MfDr => "mf-dr",
            Method::Cause => "cause",
            Method::Damf => "damf",
        }
    }

    pub fn needs_propensity(self) -> bool {
        matches!(self, Method::MfIps | Method::MfDr)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL.into_iter().find(|m| m.name() == s.trim()).ok_or_else(|| {
            Error::Config(format!(
                "unknown method `{s}` (expected mf, mf-ips, mf-dr, cause or damf)"
            ))
        })
    }
}
