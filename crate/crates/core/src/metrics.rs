//! Rating-prediction and ranking metrics.

use crate::error::{Error, Result};
use crate::estimators::point_loss;
use crate::model::{FactorModel, InteractionSet};

/// Gain applied to a rating in DCG.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Gain {
    /// 2^(R - 1)
    #[default]
    PowMinusOne,
    /// 2^R - 1
    PowThenMinusOne,
}

impl Gain {
    pub fn apply(self, r: f64) -> f64 {
        match self {
            Gain::PowMinusOne => (r - 1.0).exp2(),
            Gain::PowThenMinusOne => r.exp2() - 1.0,
        }
    }
}

/// Which items a test item competes with for rank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RankingUniverse {
    /// Only the user's own test items.
    #[default]
    TestItems,
    /// Every item in the catalog.
    FullCatalog,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RankingOptions {
    pub gain: Gain,
    pub universe: RankingUniverse,
}

/// Mean squared error of clipped predictions over the test pairs.
pub fn mse(test: &InteractionSet, model: &FactorModel) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Empty("test set"));
    }
    model.check_dims(test.num_users(), test.num_items())?;
    let scale = test.scale();
    let total: f64 = test
        .iter()
        .map(|t| point_loss(t.value, scale.clamp(model.score(t.user, t.item))))
        .sum();
    Ok(total / test.len() as f64)
}

/// Test items per user as (item, rating).
fn by_user(test: &InteractionSet) -> Vec<Vec<(usize, f64)>> {
    let mut out = vec![Vec::new(); test.num_users()];
    for t in test.iter() {
        out[t.user].push((t.item, t.value));
    }
    out
}

/// Descending by score, ties broken by ascending item index.
fn rank_order(a: (usize, f64), b: (usize, f64)) -> std::cmp::Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// 1-based rank of each of `items` for user `u`, aligned with `items`.
fn ranks(model: &FactorModel, u: usize, items: &[(usize, f64)], universe: RankingUniverse) -> Vec<usize> {
    let pool: Vec<(usize, f64)> = match universe {
        RankingUniverse::TestItems => items.iter().map(|&(i, _)| (i, model.score(u, i))).collect(),
        RankingUniverse::FullCatalog => (0..model.num_items()).map(|i| (i, model.score(u, i))).collect(),
    };
    let mut order = pool.clone();
    order.sort_by(|&a, &b| rank_order(a, b));
    let mut rank_of = std::collections::HashMap::with_capacity(order.len());
    for (pos, &(i, _)) in order.iter().enumerate() {
        rank_of.insert(i, pos + 1);
    }
    items.iter().map(|(i, _)| rank_of[i]).collect()
}

/// 1-based ranks of `items` for `user`, in the order given.
pub fn rank_items(model: &FactorModel, user: usize, items: &[usize], universe: RankingUniverse) -> Result<Vec<usize>> {
    model.check_dims(model.num_users().max(user + 1), model.num_items())?;
    if let Some(&bad) = items.iter().find(|&&i| i >= model.num_items()) {
        return Err(Error::Range {
            what: "item",
            index: bad,
            bound: model.num_items(),
        });
    }
    let tagged: Vec<(usize, f64)> = items.iter().map(|&i| (i, 0.0)).collect();
    Ok(ranks(model, user, &tagged, universe))
}

fn discount(rank: usize) -> f64 {
    1.0 / ((rank + 1) as f64).log2()
}

pub fn ndcg_at_k(test: &InteractionSet, model: &FactorModel, k: usize) -> Result<f64> {
    ndcg_at_k_with(test, model, k, &RankingOptions::default())
}

/// Per-user DCG@K / IDCG@K averaged over users with at least one test item.
pub fn ndcg_at_k_with(test: &InteractionSet, model: &FactorModel, k: usize, opts: &RankingOptions) -> Result<f64> {
    if k == 0 {
        return Err(Error::Argument("K must be at least 1".into()));
    }
    model.check_dims(test.num_users(), test.num_items())?;
    let mut total = 0.0;
    let mut users = 0usize;
    for (u, items) in by_user(test).iter().enumerate() {
        if items.is_empty() {
            continue;
        }
        let dcg: f64 = ranks(model, u, items, opts.universe)
            .iter()
            .zip(items)
            .filter(|(&r, _)| r <= k)
            .map(|(&r, &(_, rating))| opts.gain.apply(rating) * discount(r))
            .sum();
        let mut sorted: Vec<f64> = items.iter().map(|&(_, r)| r).collect();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let idcg: f64 = sorted
            .iter()
            .take(k)
            .enumerate()
            .map(|(pos, &r)| opts.gain.apply(r) * discount(pos + 1))
            .sum();
        if idcg > 0.0 {
            total += dcg / idcg;
            users += 1;
        }
    }
    if users == 0 {
        return Err(Error::Empty("no user has a scorable test item"));
    }
    Ok(total / users as f64)
}

pub fn recall_at_k(test: &InteractionSet, model: &FactorModel, k: usize) -> Result<f64> {
    recall_at_k_with(test, model, k, &RankingOptions::default())
}

/// Rating-weighted recall: per user, the rating mass ranked inside the top K
/// over the user's total test rating mass. Users with zero mass are skipped.
pub fn recall_at_k_with(test: &InteractionSet, model: &FactorModel, k: usize, opts: &RankingOptions) -> Result<f64> {
    if k == 0 {
        return Err(Error::Argument("K must be at least 1".into()));
    }
    model.check_dims(test.num_users(), test.num_items())?;
    let mut total = 0.0;
    let mut users = 0usize;
    for (u, items) in by_user(test).iter().enumerate() {
        let mass: f64 = items.iter().map(|&(_, r)| r).sum();
        if items.is_empty() || mass == 0.0 {
            continue;
        }
        let hit: f64 = ranks(model, u, items, opts.universe)
            .iter()
            .zip(items)
            .filter(|(&r, _)| r <= k)
            .map(|(_, &(_, rating))| rating)
            .sum();
        total += hit / mass;
        users += 1;
    }
    if users == 0 {
        return Err(Error::Empty("no user has positive test rating mass"));
    }
    Ok(total / users as f64)
}

/// Metrics of one trained model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricValues {
    pub mse: f64,
    pub ndcg: f64,
    pub recall: f64,
    /// Full-matrix MSE of clipped predictions, when the truth is known.
    pub ideal_mse: Option<f64>,
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, sd }
    }
}

/// Metrics over several seeds for one method.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub method: String,
    pub k: usize,
    pub per_seed: Vec<MetricValues>,
}

impl MetricReport {
    pub fn mse(&self) -> Summary {
        Summary::of(&self.per_seed.iter().map(|v| v.mse).collect::<Vec<_>>())
    }

    pub fn ndcg(&self) -> Summary {
        Summary::of(&self.per_seed.iter().map(|v| v.ndcg).collect::<Vec<_>>())
    }

    pub fn recall(&self) -> Summary {
        Summary::of(&self.per_seed.iter().map(|v| v.recall).collect::<Vec<_>>())
    }

    pub fn ideal_mse(&self) -> Option<Summary> {
        let v: Option<Vec<f64>> = self.per_seed.iter().map(|v| v.ideal_mse).collect();
        v.filter(|v| !v.is_empty()).map(|v| Summary::of(&v))
    }
}
