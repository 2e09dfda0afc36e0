//! Propensity estimators: popularity-based (user, item, user-item), 1-bit
//! matrix completion, and the naive-Bayes reference that uses a small MCAR
//! sample.

use log::warn;
use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::{InteractionSet, PropensityMap};

/// Floor applied to users/items without observations and to 1BitMC output.
pub const PROPENSITY_FLOOR: f64 = 1e-6;

/// Largest m * n accepted by [`one_bit_mc`].
pub const ONE_BIT_MC_MAX_CELLS: usize = 4_000_000;

fn normalized_counts(counts: &[usize]) -> Vec<f64> {
    let max = counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    counts.iter().map(|&c| (c as f64 / max).max(PROPENSITY_FLOOR)).collect()
}

/// Per-user observation count divided by the largest user count.
pub fn user_propensity(data: &InteractionSet) -> PropensityMap {
    PropensityMap::Factorized {
        user: normalized_counts(&data.user_counts()),
        item: vec![1.0; data.num_items()],
    }
}

/// Per-item observation count divided by the largest item count.
pub fn item_propensity(data: &InteractionSet) -> PropensityMap {
    PropensityMap::Factorized {
        user: vec![1.0; data.num_users()],
        item: normalized_counts(&data.item_counts()),
    }
}

/// Product of the user and item propensities.
pub fn user_item_propensity(data: &InteractionSet) -> PropensityMap {
    PropensityMap::Factorized {
        user: normalized_counts(&data.user_counts()),
        item: normalized_counts(&data.item_counts()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OneBitMcConfig {
    /// tau: the nuclear norm of the logit matrix is capped at tau * sqrt(m n).
    pub nuclear_cap_scale: f64,
    /// gamma: every logit is capped at gamma in absolute value.
    pub entry_cap: f64,
    pub step_size: f64,
    pub iterations: usize,
}

impl Default for OneBitMcConfig {
    fn default() -> Self {
        Self {
            nuclear_cap_scale: 1.0,
            entry_cap: 5.0,
            step_size: 1.0,
            iterations: 500,
        }
    }
}

impl OneBitMcConfig {
    fn validate(&self) -> Result<()> {
        if !(self.nuclear_cap_scale > 0.0 && self.entry_cap > 0.0 && self.step_size > 0.0) || self.iterations == 0 {
            return Err(Error::Argument(format!("1BitMC settings must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Dense 0/1 observation indicator matrix.
pub fn observation_matrix(data: &InteractionSet) -> DMatrix<f64> {
    let mut o = DMatrix::zeros(data.num_users(), data.num_items());
    for t in data.iter() {
        o[(t.user, t.item)] = 1.0;
    }
    o
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Bernoulli log-likelihood of `observed` under probabilities sigmoid(logits).
pub fn one_bit_log_likelihood(logits: &DMatrix<f64>, observed: &DMatrix<f64>) -> f64 {
    logits
        .iter()
        .zip(observed.iter())
        // log sigmoid(x) = -softplus(-x), log(1 - sigmoid(x)) = -softplus(x)
        .map(|(&g, &o)| -o * softplus(-g) - (1.0 - o) * softplus(g))
        .sum()
}

/// Gradient of [`one_bit_log_likelihood`] with respect to the logits.
pub fn one_bit_gradient(logits: &DMatrix<f64>, observed: &DMatrix<f64>) -> DMatrix<f64> {
    observed.zip_map(logits, |o, g| o - sigmoid(g))
}

/// Euclidean projection of a nonnegative vector onto
/// `{x >= 0, sum(x) <= radius}`.
pub fn project_simplex_ball(values: &[f64], radius: f64) -> Vec<f64> {
    let total: f64 = values.iter().sum();
    if total <= radius {
        return values.to_vec();
    }
    if radius <= 0.0 {
        return vec![0.0; values.len()];
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (j, &s) in sorted.iter().enumerate() {
        cumsum += s;
        let t = (cumsum - radius) / (j + 1) as f64;
        if s - t > 0.0 {
            theta = t;
        } else {
            break;
        }
    }
    values.iter().map(|&s| (s - theta).max(0.0)).collect()
}

/// Projection onto the nuclear-norm ball of the given radius. Matrices
/// already inside the ball are returned unchanged.
pub fn project_nuclear_ball(mat: &DMatrix<f64>, radius: f64) -> DMatrix<f64> {
    let (m, n) = mat.shape();
    if m == 0 || n == 0 {
        return mat.clone();
    }
    let a = faer::Mat::<f64>::from_fn(m, n, |i, j| mat[(i, j)]);
    let Ok(svd) = a.thin_svd() else {
        warn!("nuclear projection: SVD did not converge; rescaling instead");
        let bound = mat.norm() * (m.min(n) as f64).sqrt();
        return if bound > radius {
            mat * (radius / bound)
        } else {
            mat.clone()
        };
    };
    let k = m.min(n);
    let sv: Vec<f64> = (0..k).map(|j| svd.S()[j]).collect();
    if sv.iter().sum::<f64>() <= radius {
        return mat.clone();
    }
    let projected = project_simplex_ball(&sv, radius);
    let (u, v) = (svd.U(), svd.V());
    DMatrix::from_fn(m, n, |i, j| (0..k).map(|r| u[(i, r)] * projected[r] * v[(j, r)]).sum())
}

/// Diagnostics of a 1BitMC fit.
#[derive(Debug, Clone)]
pub struct OneBitMcFit {
    pub propensity: PropensityMap,
    pub logits: DMatrix<f64>,
    /// Log-likelihood of every accepted iterate, starting at the zero matrix.
    pub log_likelihood: Vec<f64>,
    /// False when a full backtracking sweep failed to find a non-decreasing
    /// step before the iteration budget ran out.
    pub converged: bool,
}

/// Propensities by 1-bit matrix completion. See [`one_bit_mc_fit`].
pub fn one_bit_mc(data: &InteractionSet, config: &OneBitMcConfig) -> Result<PropensityMap> {
    Ok(one_bit_mc_fit(data, config)?.propensity)
}

/// Maximizes the Bernoulli log-likelihood of the observation pattern over
/// logit matrices with `|G|_* <= tau sqrt(mn)` and `|G|_max <= gamma` by
/// projected gradient ascent. Each step clamps entries into [-gamma, gamma]
/// and then projects onto the nuclear-norm ball. Steps that would lower the
/// likelihood are retried at half the step size, so accepted iterates never
/// lose likelihood.
pub fn one_bit_mc_fit(data: &InteractionSet, config: &OneBitMcConfig) -> Result<OneBitMcFit> {
    config.validate()?;
    let (m, n) = data.dims();
    if m.saturating_mul(n) > ONE_BIT_MC_MAX_CELLS {
        return Err(Error::Capacity(format!(
            "1BitMC works on dense {m} x {n} logits; limit is {ONE_BIT_MC_MAX_CELLS} cells"
        )));
    }
    let observed = observation_matrix(data);
    let radius = config.nuclear_cap_scale * ((m * n) as f64).sqrt();
    let gamma = config.entry_cap;

    let mut logits = DMatrix::zeros(m, n);
    let mut ll = one_bit_log_likelihood(&logits, &observed);
    let mut trace = vec![ll];
    let mut eta = config.step_size;
    let mut converged = false;

    for _ in 0..config.iterations {
        let grad = one_bit_gradient(&logits, &observed);
        let mut accepted = None;
        for _ in 0..40 {
            let stepped = (&logits + &grad * eta).map(|x| x.clamp(-gamma, gamma));
            let candidate = project_nuclear_ball(&stepped, radius);
            let cand_ll = one_bit_log_likelihood(&candidate, &observed);
            if cand_ll >= ll {
                accepted = Some((candidate, cand_ll));
                break;
            }
            eta *= 0.5;
        }
        let Some((candidate, cand_ll)) = accepted else {
            warn!("1BitMC: no ascent step found after backtracking; returning best iterate");
            break;
        };
        let gain = cand_ll - ll;
        logits = candidate;
        ll = cand_ll;
        trace.push(ll);
        if gain <= 1e-9 * ll.abs().max(1.0) {
            converged = true;
            break;
        }
        eta = (eta * 2.0).min(config.step_size);
    }
    if !converged {
        warn!(
            "1BitMC: stopped after {} accepted steps without meeting tolerance",
            trace.len() - 1
        );
    }

    let probs = logits.map(|g| sigmoid(g).max(PROPENSITY_FLOOR));
    Ok(OneBitMcFit {
        propensity: PropensityMap::Dense(probs),
        logits,
        log_likelihood: trace,
        converged,
    })
}

/// P(R = r | O = 1) * P(O = 1) / P(R = r).
pub fn naive_bayes_propensity(p_rating_given_observed: f64, p_observed: f64, p_rating: f64) -> f64 {
    (p_rating_given_observed * p_observed / p_rating).clamp(PROPENSITY_FLOOR, 1.0)
}

/// Laplace-smoothed rating-level distribution (+1 per level).
pub fn smoothed_level_distribution(data: &InteractionSet) -> Vec<f64> {
    let scale = data.scale();
    let levels = scale.levels().len();
    let mut counts = vec![1.0; levels];
    for t in data.iter() {
        counts[scale.level_index(t.value)] += 1.0;
    }
    let total: f64 = counts.iter().sum();
    counts.into_iter().map(|c| c / total).collect()
}

/// Reference propensities from Bayes' rule, using the MNAR training ratings
/// for P(R | O = 1) and a small MCAR sample for P(R).
///
/// Observed training pairs get the value for their rating level; every other
/// cell gets the marginal observation rate M / (m n), which is all that is
/// identifiable without a rating.
pub fn true_propensity_naive_bayes(train: &InteractionSet, mcar_sample: &InteractionSet) -> Result<PropensityMap> {
    if mcar_sample.is_empty() {
        return Err(Error::Empty("naive-Bayes propensity needs a nonempty MCAR sample"));
    }
    let scale = train.scale();
    if scale.levels().is_empty() {
        return Err(Error::Argument("rating scale has no integer levels".into()));
    }
    let given_observed = smoothed_level_distribution(train);
    let marginal = smoothed_level_distribution(mcar_sample);
    let p_observed = train.density();
    let mut values = DMatrix::from_element(
        train.num_users(),
        train.num_items(),
        p_observed.clamp(PROPENSITY_FLOOR, 1.0),
    );
    for t in train.iter() {
        let k = scale.level_index(t.value);
        values[(t.user, t.item)] = naive_bayes_propensity(given_observed[k], p_observed, marginal[k]);
    }
    Ok(PropensityMap::Dense(values))
}
