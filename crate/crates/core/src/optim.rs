//! Adam, mini-batch sampling and the analytic gradients of every training
//! objective.

use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{Error, Result};
use crate::estimators::LossBatch;
use crate::model::{FactorModel, InteractionSet};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// Moment buffers for one flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step_count: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step_count: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.first_moment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first_moment.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }
}

/// One bias-corrected Adam descent step on `params`.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.len() {
        return Err(Error::Shape(format!(
            "adam: {} params, {} grads, state for {}",
            params.len(),
            grads.len(),
            state.len()
        )));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
    {
        *m = BETA1 * *m + (1.0 - BETA1) * g;
        *v = BETA2 * *v + (1.0 - BETA2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + EPS);
    }
    Ok(())
}

/// Gradient with respect to both factor matrices of a [`FactorModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct FactorGrad {
    pub user: DMatrix<f64>,
    pub item: DMatrix<f64>,
}

impl FactorGrad {
    pub fn zeros_like(model: &FactorModel) -> Self {
        Self {
            user: DMatrix::zeros(model.num_users(), model.dim()),
            item: DMatrix::zeros(model.num_items(), model.dim()),
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.user *= s;
        self.item *= s;
    }

    pub fn add_scaled(&mut self, other: &FactorGrad, s: f64) {
        self.user += &other.user * s;
        self.item += &other.item * s;
    }
}

/// Adam state for a user/item factor pair.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorAdam {
    user: AdamState,
    item: AdamState,
}

impl FactorAdam {
    pub fn for_model(model: &FactorModel) -> Self {
        Self {
            user: AdamState::new(model.user_factors.len()),
            item: AdamState::new(model.item_factors.len()),
        }
    }

    /// Descent step: parameters move against `grad`.
    pub fn descend(&mut self, model: &mut FactorModel, grad: &FactorGrad, lr: f64) -> Result<()> {
        adam_step(
            model.user_factors.as_mut_slice(),
            grad.user.as_slice(),
            &mut self.user,
            lr,
        )?;
        adam_step(
            model.item_factors.as_mut_slice(),
            grad.item.as_slice(),
            &mut self.item,
            lr,
        )
    }

    /// Ascent step: parameters move along `grad`.
    pub fn ascend(&mut self, model: &mut FactorModel, grad: &FactorGrad, lr: f64) -> Result<()> {
        let mut neg = grad.clone();
        neg.scale(-1.0);
        self.descend(model, &neg, lr)
    }
}

/// Positions of `t` triples drawn uniformly with replacement.
pub fn sample_observed_indices<R: Rng + ?Sized>(data: &InteractionSet, t: usize, rng: &mut R) -> Result<Vec<usize>> {
    if data.is_empty() {
        return Err(Error::Empty("cannot sample from an empty interaction set"));
    }
    if t == 0 {
        return Err(Error::Argument("batch size must be positive".into()));
    }
    Ok((0..t).map(|_| rng.random_range(0..data.len())).collect())
}

/// Labeled batch made of the triples at `indices`.
pub fn batch_from_indices(data: &InteractionSet, indices: &[usize]) -> LossBatch {
    let triples = data.triples();
    LossBatch {
        pairs: indices.iter().map(|&k| (triples[k].user, triples[k].item)).collect(),
        ratings: Some(indices.iter().map(|&k| triples[k].value).collect()),
    }
}

/// `t` triples drawn uniformly with replacement from the observed set.
pub fn sample_observed_batch<R: Rng + ?Sized>(data: &InteractionSet, t: usize, rng: &mut R) -> Result<LossBatch> {
    let idx = sample_observed_indices(data, t, rng)?;
    Ok(batch_from_indices(data, &idx))
}

/// `t` unlabeled pairs drawn uniformly with replacement from the m x n grid.
pub fn sample_uniform_pairs<R: Rng + ?Sized>(m: usize, n: usize, t: usize, rng: &mut R) -> Result<LossBatch> {
    if t == 0 || m == 0 || n == 0 {
        return Err(Error::Argument(
            "uniform sampling needs positive m, n and batch size".into(),
        ));
    }
    let pairs = (0..t)
        .map(|_| (rng.random_range(0..m), rng.random_range(0..n)))
        .collect();
    Ok(LossBatch::unlabeled(pairs))
}

fn add_l2(grad: &mut FactorGrad, model: &FactorModel, l2: f64) {
    if l2 != 0.0 {
        grad.user += &model.user_factors * (2.0 * l2);
        grad.item += &model.item_factors * (2.0 * l2);
    }
}

/// Accumulates `coef * d(score(u, i))/d(factors)` into `grad` for one pair.
#[inline]
fn push_pair(grad: &mut FactorGrad, model: &FactorModel, u: usize, i: usize, coef: f64) {
    for k in 0..model.dim() {
        grad.user[(u, k)] += coef * model.item_factors[(i, k)];
        grad.item[(i, k)] += coef * model.user_factors[(u, k)];
    }
}

/// Gradient of `sum_b w_b (r_b - U_u V_i)^2 / |batch| + l2 (|U|_F^2 + |V|_F^2)`.
///
/// Unit weights give the naive loss; inverse propensities give IPS.
pub fn grad_weighted_mf(model: &FactorModel, batch: &LossBatch, weights: &[f64], l2: f64) -> Result<FactorGrad> {
    let ratings = batch
        .ratings
        .as_ref()
        .ok_or_else(|| Error::Argument("weighted MF gradient needs a labeled batch".into()))?;
    if weights.len() != batch.len() {
        return Err(Error::Shape(format!(
            "{} weights for a batch of {}",
            weights.len(),
            batch.len()
        )));
    }
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    batch.check_in(model)?;
    let mut grad = FactorGrad::zeros_like(model);
    let inv = 1.0 / batch.len() as f64;
    for ((&(u, i), &r), &w) in batch.pairs.iter().zip(ratings).zip(weights) {
        let err = r - model.score(u, i);
        push_pair(&mut grad, model, u, i, -2.0 * w * err * inv);
    }
    add_l2(&mut grad, model, l2);
    Ok(grad)
}

/// Which side of the model / adversary pair a discrepancy gradient is for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradTarget {
    Model,
    Adversary,
}

/// Gradient of [`pmd_gap`](crate::estimators::pmd_gap) with respect to the
/// chosen side's factors, holding the other side fixed.
pub fn grad_discrepancy(
    model: &FactorModel,
    adversary: &FactorModel,
    mcar_batch: &LossBatch,
    mnar_batch: &LossBatch,
    target: GradTarget,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if mcar_batch.is_empty() || mnar_batch.is_empty() {
        return Err(Error::Empty("discrepancy batch"));
    }
    mcar_batch.check_in(model)?;
    mnar_batch.check_in(model)?;
    if model.dim() != adversary.dim()
        || model.num_users() != adversary.num_users()
        || model.num_items() != adversary.num_items()
    {
        return Err(Error::Shape("model and adversary shapes differ".into()));
    }
    let (wrt, other) = match target {
        GradTarget::Model => (model, adversary),
        GradTarget::Adversary => (adversary, model),
    };
    let mut grad = FactorGrad::zeros_like(wrt);
    for (batch, sign) in [(mcar_batch, 1.0), (mnar_batch, -1.0)] {
        let inv = sign / batch.len() as f64;
        for &(u, i) in &batch.pairs {
            // d/dx (x - y)^2 = 2 (x - y), with x the differentiated side
            let diff = wrt.score(u, i) - other.score(u, i);
            push_pair(&mut grad, wrt, u, i, 2.0 * diff * inv);
        }
    }
    Ok((grad.user, grad.item))
}

/// Mini-batch view of the doubly robust objective.
///
/// `weights` are the observed batch's inverse-propensity weights and
/// `imputed_scale` multiplies the imputed-loss term estimated on the uniform
/// batch, so that both terms share one normalization.
#[derive(Debug, Clone, Copy)]
pub struct DrBatch<'a> {
    pub observed: &'a LossBatch,
    pub weights: &'a [f64],
    pub uniform: &'a LossBatch,
    pub imputed_scale: f64,
}

impl DrBatch<'_> {
    fn check(&self, model: &FactorModel, imputation: &FactorModel) -> Result<&[f64]> {
        let ratings = self
            .observed
            .ratings
            .as_deref()
            .ok_or_else(|| Error::Argument("DR needs a labeled observed batch".into()))?;
        if self.weights.len() != self.observed.len() {
            return Err(Error::Shape("DR weights misaligned with batch".into()));
        }
        if self.observed.is_empty() || self.uniform.is_empty() {
            return Err(Error::Empty("DR batch"));
        }
        for b in [self.observed, self.uniform] {
            b.check_in(model)?;
            b.check_in(imputation)?;
        }
        Ok(ratings)
    }
}

/// Batch DR objective: `imputed_scale * mean_uniform (R - Rt)^2 +
/// mean_obs w ((r - R)^2 - (R - Rt)^2)`, where R is the model and Rt the
/// imputation model's pseudo-rating, so the imputed loss is `(R - Rt)^2`.
pub fn dr_batch_objective(model: &FactorModel, imputation: &FactorModel, batch: &DrBatch<'_>) -> Result<f64> {
    let ratings = batch.check(model, imputation)?;
    let imputed: f64 = batch
        .uniform
        .pairs
        .iter()
        .map(|&(u, i)| (model.score(u, i) - imputation.score(u, i)).powi(2))
        .sum::<f64>()
        / batch.uniform.len() as f64;
    let corr: f64 = batch
        .observed
        .pairs
        .iter()
        .zip(ratings)
        .zip(batch.weights)
        .map(|((&(u, i), &r), &w)| {
            let p = model.score(u, i);
            w * ((r - p).powi(2) - (p - imputation.score(u, i)).powi(2))
        })
        .sum::<f64>()
        / batch.observed.len() as f64;
    Ok(batch.imputed_scale * imputed + corr)
}

/// Gradient of [`dr_batch_objective`] plus L2 with respect to the model.
pub fn grad_dr_model(
    model: &FactorModel,
    imputation: &FactorModel,
    batch: &DrBatch<'_>,
    l2: f64,
) -> Result<FactorGrad> {
    let ratings = batch.check(model, imputation)?;
    let mut grad = FactorGrad::zeros_like(model);
    let inv_u = batch.imputed_scale / batch.uniform.len() as f64;
    for &(u, i) in &batch.uniform.pairs {
        let diff = model.score(u, i) - imputation.score(u, i);
        push_pair(&mut grad, model, u, i, 2.0 * diff * inv_u);
    }
    let inv_o = 1.0 / batch.observed.len() as f64;
    for ((&(u, i), &r), &w) in batch.observed.pairs.iter().zip(ratings).zip(batch.weights) {
        let p = model.score(u, i);
        let coef = -2.0 * (r - p) - 2.0 * (p - imputation.score(u, i));
        push_pair(&mut grad, model, u, i, w * coef * inv_o);
    }
    add_l2(&mut grad, model, l2);
    Ok(grad)
}

/// Error-imputation fit on observed pairs: `mean_obs w ((R - Rt)^2 - (r - R)^2)^2`.
pub fn imputation_objective(
    model: &FactorModel,
    imputation: &FactorModel,
    observed: &LossBatch,
    weights: &[f64],
) -> Result<f64> {
    let ratings = observed
        .ratings
        .as_deref()
        .ok_or_else(|| Error::Argument("imputation fit needs a labeled batch".into()))?;
    if weights.len() != observed.len() {
        return Err(Error::Shape("imputation weights misaligned with batch".into()));
    }
    if observed.is_empty() {
        return Err(Error::Empty("batch"));
    }
    observed.check_in(model)?;
    let total: f64 = observed
        .pairs
        .iter()
        .zip(ratings)
        .zip(weights)
        .map(|((&(u, i), &r), &w)| {
            let p = model.score(u, i);
            w * ((p - imputation.score(u, i)).powi(2) - (r - p).powi(2)).powi(2)
        })
        .sum();
    Ok(total / observed.len() as f64)
}

/// Gradient of [`imputation_objective`] plus L2 with respect to the
/// imputation model.
pub fn grad_imputation(
    model: &FactorModel,
    imputation: &FactorModel,
    observed: &LossBatch,
    weights: &[f64],
    l2: f64,
) -> Result<FactorGrad> {
    imputation_objective(model, imputation, observed, weights)?;
    let ratings = observed.ratings.as_deref().unwrap_or_default();
    let mut grad = FactorGrad::zeros_like(imputation);
    let inv = 1.0 / observed.len() as f64;
    for ((&(u, i), &r), &w) in observed.pairs.iter().zip(ratings).zip(weights) {
        let p = model.score(u, i);
        let gap = p - imputation.score(u, i);
        let resid = gap * gap - (r - p).powi(2);
        // d/dRt of resid^2 = 2 resid * (-2 gap)
        push_pair(&mut grad, imputation, u, i, -4.0 * w * resid * gap * inv);
    }
    add_l2(&mut grad, imputation, l2);
    Ok(grad)
}

/// Rescales every user and item row onto the ball of radius `sqrt(max_norm)`
/// so that all predictions satisfy `|U_u . V_i| <= max_norm`.
pub fn project_max_norm(model: &mut FactorModel, max_norm: f64) {
    let radius = max_norm.max(0.0).sqrt();
    for mat in [&mut model.user_factors, &mut model.item_factors] {
        for mut row in mat.row_iter_mut() {
            let norm = row.norm();
            if norm > radius {
                row *= radius / norm;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_factors, rng_stream, Rating, RatingScale};

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut x = vec![1.0, -2.0, 3.5];
        let before = x.clone();
        let mut st = AdamState::new(3);
        adam_step(&mut x, &[0.0; 3], &mut st, 0.1).unwrap();
        assert_eq!(x, before);
    }

    #[test]
    fn adam_converges_on_scalar_quadratic() {
        let mut x = [0.0];
        let mut st = AdamState::new(1);
        for _ in 0..5000 {
            let g = 2.0 * (x[0] - 3.0);
            adam_step(&mut x, &[g], &mut st, 0.05).unwrap();
        }
        assert!((x[0] - 3.0).abs() < 1e-3, "x = {}", x[0]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // m_hat = g, v_hat = g^2, step = lr * |g| / (|g| + eps).
        for g in [0.3, -7.0, 1e3] {
            let mut x = [0.0];
            let mut st = AdamState::new(1);
            adam_step(&mut x, &[g], &mut st, 0.01).unwrap();
            let expected = -0.01 * f64::signum(g);
            assert!(
                (x[0] - expected).abs() < 0.01 * expected.abs(),
                "{} vs {}",
                x[0],
                expected
            );
        }
    }

    #[test]
    fn adam_shape_mismatch() {
        let mut st = AdamState::new(2);
        assert!(adam_step(&mut [0.0; 2], &[0.0; 3], &mut st, 0.1).is_err());
    }

    fn data() -> InteractionSet {
        let r = |user, item, value| Rating { user, item, value };
        InteractionSet::new(
            3,
            4,
            vec![r(0, 0, 5.0), r(1, 3, 2.0), r(2, 1, 4.0), r(2, 2, 1.0)],
            RatingScale::five_star(),
        )
        .unwrap()
    }

    #[test]
    fn observed_batch_support_and_determinism() {
        let d = data();
        let mut a = rng_stream(3, 1);
        let mut b = rng_stream(3, 1);
        let ba = sample_observed_batch(&d, d.len(), &mut a).unwrap();
        let bb = sample_observed_batch(&d, d.len(), &mut b).unwrap();
        assert_eq!(ba, bb);
        let observed: Vec<_> = d.iter().map(|t| (t.user, t.item, t.value)).collect();
        for (&(u, i), &r) in ba.pairs.iter().zip(ba.ratings.as_ref().unwrap()) {
            assert!(observed.contains(&(u, i, r)));
        }
    }

    #[test]
    fn observed_batch_frequencies_are_uniform() {
        let d = data();
        let draws = 100_000;
        let batch = sample_observed_batch(&d, draws, &mut rng_stream(5, 0)).unwrap();
        let p = 1.0 / d.len() as f64;
        let se = (draws as f64 * p * (1.0 - p)).sqrt();
        for t in d.iter() {
            let c = batch.pairs.iter().filter(|&&x| x == (t.user, t.item)).count() as f64;
            assert!((c - draws as f64 * p).abs() < 3.0 * se, "count {c}");
        }
    }

    #[test]
    fn uniform_pairs() {
        let b = sample_uniform_pairs(1, 1, 10, &mut rng_stream(0, 0)).unwrap();
        assert!(b.pairs.iter().all(|&p| p == (0, 0)));
        assert!(b.ratings.is_none());
        let a = sample_uniform_pairs(7, 3, 50, &mut rng_stream(9, 2)).unwrap();
        assert_eq!(a, sample_uniform_pairs(7, 3, 50, &mut rng_stream(9, 2)).unwrap());

        let (m, draws) = (5, 100_000);
        let b = sample_uniform_pairs(m, 4, draws, &mut rng_stream(1, 0)).unwrap();
        let p = 1.0 / m as f64;
        let se = (draws as f64 * p * (1.0 - p)).sqrt();
        for u in 0..m {
            let c = b.pairs.iter().filter(|x| x.0 == u).count() as f64;
            assert!((c - draws as f64 * p).abs() < 3.0 * se);
        }
    }

    #[test]
    fn weighted_mf_gradient_examples() {
        let model = FactorModel::new(DMatrix::from_element(1, 1, 0.0), DMatrix::from_element(1, 1, 1.0)).unwrap();
        let batch = LossBatch::labeled(vec![(0, 0)], vec![2.0]).unwrap();
        let g = grad_weighted_mf(&model, &batch, &[1.0], 0.0).unwrap();
        assert_eq!(g.user[(0, 0)], -4.0);
        assert_eq!(g.item[(0, 0)], 0.0);

        let perfect = LossBatch::labeled(vec![(0, 0)], vec![0.0]).unwrap();
        let g = grad_weighted_mf(&model, &perfect, &[3.0], 0.0).unwrap();
        assert!(g.user.iter().chain(g.item.iter()).all(|&x| x == 0.0));

        assert!(matches!(
            grad_weighted_mf(&model, &batch, &[1.0, 1.0], 0.0),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn discrepancy_gradient_special_cases() {
        let model = init_factors(4, 3, 2, 1).unwrap();
        let adv = init_factors(4, 3, 2, 2).unwrap();
        let b1 = LossBatch::unlabeled(vec![(0, 0), (3, 2), (1, 1)]);
        let b2 = LossBatch::unlabeled(vec![(2, 0)]);
        let (gu, gv) = grad_discrepancy(&model, &model, &b1, &b2, GradTarget::Model).unwrap();
        assert!(gu.iter().chain(gv.iter()).all(|&x| x == 0.0));
        let (gu, gv) = grad_discrepancy(&model, &adv, &b1, &b1, GradTarget::Model).unwrap();
        assert!(gu.iter().chain(gv.iter()).all(|&x| x.abs() < 1e-15));
        assert!(grad_discrepancy(&model, &adv, &b1, &LossBatch::unlabeled(vec![]), GradTarget::Adversary).is_err());
    }

    #[test]
    fn max_norm_projection_bounds_predictions() {
        let mut m = init_factors(6, 5, 3, 4).unwrap();
        m.user_factors *= 10.0;
        project_max_norm(&mut m, 2.0);
        let pred = m.predictions();
        assert!(pred.iter().all(|x| x.abs() <= 2.0 + 1e-12));
        let mut small = init_factors(6, 5, 3, 4).unwrap();
        small.user_factors *= 1e-3;
        small.item_factors *= 1e-3;
        let before = small.clone();
        project_max_norm(&mut small, 2.0);
        assert_eq!(small, before);
    }
}
