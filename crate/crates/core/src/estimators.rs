//! Loss estimators for learning from missing-not-at-random ratings.
//!
//! All estimators use the squared loss. `ideal_loss` needs the full rating
//! matrix and is only available on synthetic data; `naive_loss` is biased
//! under MNAR observation; `ips_loss` and `dr_loss` are unbiased when the
//! true propensities are supplied. The propensity matrix divergence (PMD)
//! compares two observation mechanisms through the loss between the model
//! and an adversary, and needs no propensities at all.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::{BoundConfig, FactorModel, InteractionSet, PropensityMap, RatingScale, TrainConfig};
use crate::optim::{grad_discrepancy, project_max_norm, GradTarget};

/// A mini-batch of (user, item) pairs, with ratings when drawn from observed
/// data and without when drawn uniformly from the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBatch {
    pub pairs: Vec<(usize, usize)>,
    pub ratings: Option<Vec<f64>>,
}

impl LossBatch {
    pub fn labeled(pairs: Vec<(usize, usize)>, ratings: Vec<f64>) -> Result<Self> {
        if pairs.len() != ratings.len() {
            return Err(Error::Shape(format!(
                "{} pairs but {} ratings",
                pairs.len(),
                ratings.len()
            )));
        }
        Ok(Self {
            pairs,
            ratings: Some(ratings),
        })
    }

    pub fn unlabeled(pairs: Vec<(usize, usize)>) -> Self {
        Self { pairs, ratings: None }
    }

    /// Every observed triple of `data`, in storage order.
    pub fn from_observed(data: &InteractionSet) -> Self {
        Self {
            pairs: data.iter().map(|t| (t.user, t.item)).collect(),
            ratings: Some(data.iter().map(|t| t.value).collect()),
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub(crate) fn check_in(&self, model: &FactorModel) -> Result<()> {
        for &(u, i) in &self.pairs {
            if u >= model.num_users() {
                return Err(Error::Range {
                    what: "user",
                    index: u,
                    bound: model.num_users(),
                });
            }
            if i >= model.num_items() {
                return Err(Error::Range {
                    what: "item",
                    index: i,
                    bound: model.num_items(),
                });
            }
        }
        Ok(())
    }
}

/// Squared loss.
#[inline]
pub fn point_loss(r: f64, r_hat: f64) -> f64 {
    let e = r - r_hat;
    e * e
}

/// Average loss over every cell of the true rating matrix.
pub fn ideal_loss(true_ratings: &DMatrix<f64>, model: &FactorModel) -> Result<f64> {
    ideal_loss_with(true_ratings, model, None)
}

/// [`ideal_loss`] with predictions clamped into `scale`.
pub fn ideal_loss_clipped(true_ratings: &DMatrix<f64>, model: &FactorModel, scale: &RatingScale) -> Result<f64> {
    ideal_loss_with(true_ratings, model, Some(scale))
}

fn ideal_loss_with(true_ratings: &DMatrix<f64>, model: &FactorModel, scale: Option<&RatingScale>) -> Result<f64> {
    let (m, n) = true_ratings.shape();
    model.check_dims(m, n)?;
    let pred = model.predictions();
    let mut total = 0.0;
    for i in 0..n {
        for u in 0..m {
            let p = pred[(u, i)];
            let p = scale.map_or(p, |s| s.clamp(p));
            total += point_loss(true_ratings[(u, i)], p);
        }
    }
    Ok(total / (m * n) as f64)
}

/// Mean loss over the observed ratings.
pub fn naive_loss(data: &InteractionSet, model: &FactorModel) -> Result<f64> {
    model.check_dims(data.num_users(), data.num_items())?;
    let total: f64 = data
        .iter()
        .map(|t| point_loss(t.value, model.score(t.user, t.item)))
        .sum();
    Ok(total / data.len() as f64)
}

/// [`naive_loss`] with predictions clamped into the data's scale.
pub fn naive_loss_clipped(data: &InteractionSet, model: &FactorModel) -> Result<f64> {
    model.check_dims(data.num_users(), data.num_items())?;
    let scale = data.scale();
    let total: f64 = data
        .iter()
        .map(|t| point_loss(t.value, scale.clamp(model.score(t.user, t.item))))
        .sum();
    Ok(total / data.len() as f64)
}

/// Mean loss over a labeled batch.
pub fn naive_loss_batch(batch: &LossBatch, model: &FactorModel) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let ratings = batch
        .ratings
        .as_ref()
        .ok_or_else(|| Error::Argument("naive loss needs a labeled batch".into()))?;
    batch.check_in(model)?;
    let total: f64 = batch
        .pairs
        .iter()
        .zip(ratings)
        .map(|(&(u, i), &r)| point_loss(r, model.score(u, i)))
        .sum();
    Ok(total / batch.len() as f64)
}

/// Inverse-propensity-scored loss: observed losses divided by their
/// propensity, summed, and averaged over all m n cells.
pub fn ips_loss(data: &InteractionSet, model: &FactorModel, propensity: &PropensityMap) -> Result<f64> {
    model.check_dims(data.num_users(), data.num_items())?;
    let mut total = 0.0;
    for t in data.iter() {
        let p = propensity.try_get(t.user, t.item)?;
        total += point_loss(t.value, model.score(t.user, t.item)) / p;
    }
    Ok(total / (data.num_users() * data.num_items()) as f64)
}

/// Doubly robust loss with a dense matrix of imputed losses.
///
/// Each cell contributes its imputed loss, and each observed cell adds the
/// propensity-weighted correction `(loss - imputed) / p`.
pub fn dr_loss(
    data: &InteractionSet,
    model: &FactorModel,
    propensity: &PropensityMap,
    imputation: &DMatrix<f64>,
) -> Result<f64> {
    let (m, n) = data.dims();
    model.check_dims(m, n)?;
    if imputation.shape() != (m, n) {
        return Err(Error::Shape(format!(
            "imputation is {:?}, data is {m} x {n}",
            imputation.shape()
        )));
    }
    if imputation.iter().any(|x| !x.is_finite()) {
        return Err(Error::Argument("imputed losses must be finite".into()));
    }
    // Correction terms first so that an all-zero imputation reproduces
    // ips_loss's summation order exactly.
    let mut correction = 0.0;
    for t in data.iter() {
        let p = propensity.try_get(t.user, t.item)?;
        correction += (point_loss(t.value, model.score(t.user, t.item)) - imputation[(t.user, t.item)]) / p;
    }
    let imputed: f64 = imputation.iter().sum();
    Ok((correction + imputed) / (m * n) as f64)
}

/// One evaluation of the PMD objective at a fixed adversary: mean loss
/// between model and adversary on the MCAR batch minus the same mean on the
/// MNAR batch. Ratings are not used.
pub fn pmd_gap(
    model: &FactorModel,
    adversary: &FactorModel,
    mcar_batch: &LossBatch,
    mnar_batch: &LossBatch,
) -> Result<f64> {
    Ok(batch_disagreement(model, adversary, mcar_batch, None)?
        - batch_disagreement(model, adversary, mnar_batch, None)?)
}

/// [`pmd_gap`] with both predictions clamped into `scale`.
pub fn pmd_gap_clipped(
    model: &FactorModel,
    adversary: &FactorModel,
    mcar_batch: &LossBatch,
    mnar_batch: &LossBatch,
    scale: &RatingScale,
) -> Result<f64> {
    Ok(batch_disagreement(model, adversary, mcar_batch, Some(scale))?
        - batch_disagreement(model, adversary, mnar_batch, Some(scale))?)
}

fn batch_disagreement(
    model: &FactorModel,
    adversary: &FactorModel,
    batch: &LossBatch,
    scale: Option<&RatingScale>,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("discrepancy batch"));
    }
    batch.check_in(model)?;
    batch.check_in(adversary)?;
    let clip = |x: f64| scale.map_or(x, |s| s.clamp(x));
    let total: f64 = batch
        .pairs
        .iter()
        .map(|&(u, i)| point_loss(clip(model.score(u, i)), clip(adversary.score(u, i))))
        .sum();
    Ok(total / batch.len() as f64)
}

/// Largest gap over an explicit finite adversary class, truncated at zero
/// because the class implicitly contains the model itself. Returns the value
/// and the index of the maximizing candidate (`None` when the model wins).
pub fn pmd_over_candidates(
    model: &FactorModel,
    candidates: &[FactorModel],
    mcar_batch: &LossBatch,
    mnar_batch: &LossBatch,
) -> Result<(f64, Option<usize>)> {
    let mut best = (0.0, None);
    for (idx, cand) in candidates.iter().enumerate() {
        let gap = pmd_gap(model, cand, mcar_batch, mnar_batch)?;
        if gap > best.0 {
            best = (gap, Some(idx));
        }
    }
    Ok(best)
}

/// Result of a projected gradient ascent on the adversary.
#[derive(Debug, Clone)]
pub struct PmdEstimate {
    /// max(gap, 0) at the final adversary.
    pub value: f64,
    pub adversary: FactorModel,
    /// Gap after each accepted ascent step, starting with the initial gap.
    pub history: Vec<f64>,
}

/// Empirical PMD between the MCAR and MNAR batches.
///
/// Starts the adversary at the model plus a small seeded perturbation and
/// runs `config.max_iterations` steps of projected gradient ascent (step
/// `config.learning_rate`, adversary rows kept inside the max-norm ball of
/// radius `sqrt(max_norm)`). A step that would lower the gap is retried at
/// half the step size, so the recorded gaps never decrease.
pub fn pmd_empirical(
    model: &FactorModel,
    mcar_batch: &LossBatch,
    mnar_batch: &LossBatch,
    config: &TrainConfig,
    max_norm: f64,
) -> Result<PmdEstimate> {
    config.validate()?;
    if mcar_batch.is_empty() || mnar_batch.is_empty() {
        return Err(Error::Empty("discrepancy batch"));
    }
    let mut rng = crate::model::rng_stream(config.seed, 7);
    let noise = crate::model::init_with(model.num_users(), model.num_items(), model.dim(), &mut rng);
    let mut adversary = model.clone();
    adversary.user_factors += noise.user_factors * 1e-2;
    adversary.item_factors += noise.item_factors * 1e-2;
    project_max_norm(&mut adversary, max_norm);
    pmd_ascent(
        model,
        adversary,
        mcar_batch,
        mnar_batch,
        config.max_iterations,
        config.learning_rate,
        max_norm,
    )
}

/// Monotone projected gradient ascent on the gap from a given adversary.
pub fn pmd_ascent(
    model: &FactorModel,
    mut adversary: FactorModel,
    mcar_batch: &LossBatch,
    mnar_batch: &LossBatch,
    steps: usize,
    step_size: f64,
    max_norm: f64,
) -> Result<PmdEstimate> {
    let mut gap = pmd_gap(model, &adversary, mcar_batch, mnar_batch)?;
    let mut history = vec![gap];
    let mut eta = step_size;
    for _ in 0..steps {
        let (gu, gv) = grad_discrepancy(model, &adversary, mcar_batch, mnar_batch, GradTarget::Adversary)?;
        let mut accepted = false;
        for _ in 0..30 {
            let mut trial = adversary.clone();
            trial.user_factors += &gu * eta;
            trial.item_factors += &gv * eta;
            project_max_norm(&mut trial, max_norm);
            let trial_gap = pmd_gap(model, &trial, mcar_batch, mnar_batch)?;
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
        history.push(gap);
        eta = (eta * 2.0).min(step_size);
    }
    Ok(PmdEstimate {
        value: gap.max(0.0),
        adversary,
        history,
    })
}

/// Max-norm Rademacher surrogate sqrt(A^2 (m + n) / M), constant 1.
pub fn complexity_surrogate(a: f64, m: usize, n: usize, num_observed: usize) -> Result<f64> {
    if num_observed == 0 {
        return Err(Error::Argument("complexity surrogate needs M > 0".into()));
    }
    if a.is_nan() || a < 0.0 {
        return Err(Error::Argument(format!("max-norm radius must be nonnegative, got {a}")));
    }
    Ok((a * a * (m + n) as f64 / num_observed as f64).sqrt())
}

/// Term (iii): 2 L (3 R + 2 R') with both complexities from the surrogate.
pub fn complexity_term(lipschitz: f64, a: f64, m: usize, n: usize, num_observed: usize) -> Result<f64> {
    let r = complexity_surrogate(a, m, n, num_observed)?;
    Ok(2.0 * lipschitz * (3.0 * r + 2.0 * r))
}

/// Term (iv): 3 Delta sqrt(log(6 / delta) / (2 M)).
pub fn confidence_term(loss_bound: f64, confidence: f64, num_observed: usize) -> Result<f64> {
    if num_observed == 0 {
        return Err(Error::Argument("confidence term needs M > 0".into()));
    }
    Ok(3.0 * loss_bound * ((6.0 / confidence).ln() / (2.0 * num_observed as f64)).sqrt())
}

/// The four components of the propensity-independent bound and their sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundComponents {
    pub naive: f64,
    pub pmd: f64,
    pub complexity: f64,
    pub confidence: f64,
    pub total: f64,
}

pub fn bound_value(naive: f64, pmd: f64, complexity_terms: f64, confidence_term: f64) -> BoundComponents {
    BoundComponents {
        naive,
        pmd,
        complexity: complexity_terms,
        confidence: confidence_term,
        total: naive + pmd + complexity_terms + confidence_term,
    }
}

/// Terms (iii) and (iv) for `M` observations.
pub fn capacity_terms(
    cfg: &BoundConfig,
    scale: &RatingScale,
    m: usize,
    n: usize,
    num_observed: usize,
) -> Result<(f64, f64)> {
    Ok((
        complexity_term(cfg.lipschitz, cfg.max_norm_bound, m, n, num_observed)?,
        confidence_term(scale.loss_bound(), cfg.confidence, num_observed)?,
    ))
}
