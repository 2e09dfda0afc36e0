//! Domain types shared across the crate: rating scale, sparse observed
//! ratings, propensities, bilinear factor models and training settings.

use std::collections::HashSet;

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Closed rating interval. `loss_bound` is the largest squared loss two
/// in-range values can produce.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatingScale {
    r_min: f64,
    r_max: f64,
}

impl RatingScale {
    pub fn new(r_min: f64, r_max: f64) -> Result<Self> {
        if !(r_min.is_finite() && r_max.is_finite() && r_min < r_max) {
            return Err(Error::Argument(format!(
                "rating scale needs r_min < r_max, got [{r_min}, {r_max}]"
            )));
        }
        Ok(Self { r_min, r_max })
    }

    /// The 1..=5 star scale used by the public MNAR benchmarks.
    pub fn five_star() -> Self {
        Self { r_min: 1.0, r_max: 5.0 }
    }

    pub fn min(&self) -> f64 {
        self.r_min
    }

    pub fn max(&self) -> f64 {
        self.r_max
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.r_min + self.r_max)
    }

    pub fn width(&self) -> f64 {
        self.r_max - self.r_min
    }

    /// Delta = (r_max - r_min)^2.
    pub fn loss_bound(&self) -> f64 {
        self.width() * self.width()
    }

    pub fn contains(&self, r: f64) -> bool {
        r >= self.r_min && r <= self.r_max
    }

    pub fn clamp(&self, r: f64) -> f64 {
        r.clamp(self.r_min, self.r_max)
    }

    /// Integer levels `ceil(r_min)..=floor(r_max)`.
    pub fn levels(&self) -> Vec<i64> {
        (self.r_min.ceil() as i64..=self.r_max.floor() as i64).collect()
    }

    /// Position of `r` in [`levels`](Self::levels) after rounding to the
    /// nearest level.
    pub fn level_index(&self, r: f64) -> usize {
        let levels = self.levels();
        let lo = levels[0];
        let idx = (r.round() as i64 - lo).clamp(0, levels.len() as i64 - 1);
        idx as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rating {
    pub user: usize,
    pub item: usize,
    pub value: f64,
}

/// Observed entries of an m x n rating matrix. A pair is present exactly when
/// its observation indicator is 1.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionSet {
    num_users: usize,
    num_items: usize,
    triples: Vec<Rating>,
    scale: RatingScale,
}

impl InteractionSet {
    pub fn new(num_users: usize, num_items: usize, triples: Vec<Rating>, scale: RatingScale) -> Result<Self> {
        if num_users == 0 || num_items == 0 {
            return Err(Error::Argument(format!(
                "dimensions must be positive, got {num_users} x {num_items}"
            )));
        }
        if triples.is_empty() {
            return Err(Error::Empty("interaction set has no observed ratings"));
        }
        let mut seen = HashSet::with_capacity(triples.len());
        for t in &triples {
            if t.user >= num_users {
                return Err(Error::Range {
                    what: "user",
                    index: t.user,
                    bound: num_users,
                });
            }
            if t.item >= num_items {
                return Err(Error::Range {
                    what: "item",
                    index: t.item,
                    bound: num_items,
                });
            }
            if !t.value.is_finite() || !scale.contains(t.value) {
                return Err(Error::RatingOutOfScale {
                    rating: t.value,
                    min: scale.min(),
                    max: scale.max(),
                });
            }
            if !seen.insert((t.user, t.item)) {
                return Err(Error::Duplicate {
                    user: t.user,
                    item: t.item,
                });
            }
        }
        Ok(Self {
            num_users,
            num_items,
            triples,
            scale,
        })
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.num_users, self.num_items)
    }

    /// Number of observed ratings (M).
    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn triples(&self) -> &[Rating] {
        &self.triples
    }

    pub fn iter(&self) -> impl Iterator<Item = &Rating> {
        self.triples.iter()
    }

    pub fn scale(&self) -> RatingScale {
        self.scale
    }

    /// M / (m n).
    pub fn density(&self) -> f64 {
        self.len() as f64 / (self.num_users as f64 * self.num_items as f64)
    }

    pub fn mean_rating(&self) -> f64 {
        self.triples.iter().map(|t| t.value).sum::<f64>() / self.len() as f64
    }

    pub fn user_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_users];
        for t in &self.triples {
            counts[t.user] += 1;
        }
        counts
    }

    pub fn item_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_items];
        for t in &self.triples {
            counts[t.item] += 1;
        }
        counts
    }

    /// Same triples embedded in a larger grid.
    pub fn with_dims(&self, num_users: usize, num_items: usize) -> Result<Self> {
        Self::new(num_users, num_items, self.triples.clone(), self.scale)
    }
}

/// Observation probabilities for every (user, item) pair.
#[derive(Debug, Clone, PartialEq)]
pub enum PropensityMap {
    Dense(DMatrix<f64>),
    /// Entry (u, i) is `user[u] * item[i]`.
    Factorized {
        user: Vec<f64>,
        item: Vec<f64>,
    },
    Uniform(f64),
}

fn check_probability(user: usize, item: usize, value: f64) -> Result<()> {
    if value > 0.0 && value <= 1.0 {
        Ok(())
    } else {
        Err(Error::Propensity { user, item, value })
    }
}

impl PropensityMap {
    pub fn dense(values: DMatrix<f64>) -> Result<Self> {
        for u in 0..values.nrows() {
            for i in 0..values.ncols() {
                check_probability(u, i, values[(u, i)])?;
            }
        }
        Ok(PropensityMap::Dense(values))
    }

    pub fn factorized(user: Vec<f64>, item: Vec<f64>) -> Result<Self> {
        for (u, &p) in user.iter().enumerate() {
            check_probability(u, 0, p)?;
        }
        for (i, &p) in item.iter().enumerate() {
            check_probability(0, i, p)?;
        }
        Ok(PropensityMap::Factorized { user, item })
    }

    pub fn uniform(p: f64) -> Result<Self> {
        check_probability(0, 0, p)?;
        Ok(PropensityMap::Uniform(p))
    }

    pub fn get(&self, user: usize, item: usize) -> f64 {
        match self {
            PropensityMap::Dense(m) => m[(user, item)],
            PropensityMap::Factorized { user: pu, item: pi } => pu[user] * pi[item],
            PropensityMap::Uniform(p) => *p,
        }
    }

    /// Like [`get`](Self::get) but bounds-checked and validated.
    pub fn try_get(&self, user: usize, item: usize) -> Result<f64> {
        let (m, n) = match self {
            PropensityMap::Dense(mat) => (mat.nrows(), mat.ncols()),
            PropensityMap::Factorized { user, item } => (user.len(), item.len()),
            PropensityMap::Uniform(_) => (usize::MAX, usize::MAX),
        };
        if user >= m {
            return Err(Error::Range {
                what: "propensity user",
                index: user,
                bound: m,
            });
        }
        if item >= n {
            return Err(Error::Range {
                what: "propensity item",
                index: item,
                bound: n,
            });
        }
        let p = self.get(user, item);
        check_probability(user, item, p)?;
        Ok(p)
    }

    pub fn to_dense(&self, m: usize, n: usize) -> DMatrix<f64> {
        DMatrix::from_fn(m, n, |u, i| self.get(u, i))
    }
}

/// Bilinear predictor: prediction for (u, i) is `offset` plus the dot
/// product of row u of the user factors with row i of the item factors.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorModel {
    pub user_factors: DMatrix<f64>,
    pub item_factors: DMatrix<f64>,
    /// Constant added to every prediction; zero for trained predictors.
    pub offset: f64,
}

impl FactorModel {
    pub fn new(user_factors: DMatrix<f64>, item_factors: DMatrix<f64>) -> Result<Self> {
        if user_factors.ncols() != item_factors.ncols() || user_factors.ncols() == 0 {
            return Err(Error::Shape(format!(
                "factor widths differ or are zero: {} vs {}",
                user_factors.ncols(),
                item_factors.ncols()
            )));
        }
        if user_factors.iter().chain(item_factors.iter()).any(|x| !x.is_finite()) {
            return Err(Error::Argument("factor entries must be finite".into()));
        }
        Ok(Self {
            user_factors,
            item_factors,
            offset: 0.0,
        })
    }

    pub fn zeros(m: usize, n: usize, d: usize) -> Self {
        Self {
            user_factors: DMatrix::zeros(m, d),
            item_factors: DMatrix::zeros(n, d),
            offset: 0.0,
        }
    }

    pub fn with_offset(mut self, offset: f64) -> Self {
        self.offset = offset;
        self
    }

    pub fn num_users(&self) -> usize {
        self.user_factors.nrows()
    }

    pub fn num_items(&self) -> usize {
        self.item_factors.nrows()
    }

    pub fn dim(&self) -> usize {
        self.user_factors.ncols()
    }

    /// Unchecked dot product; callers guarantee the indices.
    #[inline]
    pub(crate) fn score(&self, user: usize, item: usize) -> f64 {
        let d = self.dim();
        let mut acc = 0.0;
        for k in 0..d {
            acc += self.user_factors[(user, k)] * self.item_factors[(item, k)];
        }
        if self.offset == 0.0 {
            acc
        } else {
            acc + self.offset
        }
    }

    pub fn predict(&self, user: usize, item: usize) -> Result<f64> {
        if user >= self.num_users() {
            return Err(Error::Range {
                what: "user",
                index: user,
                bound: self.num_users(),
            });
        }
        if item >= self.num_items() {
            return Err(Error::Range {
                what: "item",
                index: item,
                bound: self.num_items(),
            });
        }
        Ok(self.score(user, item))
    }

    pub fn predict_clipped(&self, user: usize, item: usize, scale: &RatingScale) -> Result<f64> {
        self.predict(user, item).map(|r| scale.clamp(r))
    }

    /// Full prediction matrix.
    pub fn predictions(&self) -> DMatrix<f64> {
        let mut p = &self.user_factors * self.item_factors.transpose();
        if self.offset != 0.0 {
            p.add_scalar_mut(self.offset);
        }
        p
    }

    pub fn check_dims(&self, m: usize, n: usize) -> Result<()> {
        if self.num_users() != m || self.num_items() != n {
            return Err(Error::Shape(format!(
                "model is {} x {}, data is {m} x {n}",
                self.num_users(),
                self.num_items()
            )));
        }
        Ok(())
    }

    pub fn squared_norm(&self) -> f64 {
        self.user_factors.norm_squared() + self.item_factors.norm_squared()
    }
}

/// Deterministic generator for one named stream of a run. Distinct streams
/// of the same seed never share draws, so adding a consumer on one stream
/// leaves every other stream's sequence untouched.
pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub(crate) fn init_with<R: Rng>(m: usize, n: usize, d: usize, rng: &mut R) -> FactorModel {
    let a = 1.0 / (d as f64).sqrt();
    let dist = rand_distr::Uniform::new_inclusive(-a, a).expect("finite bounds");
    let user_factors = DMatrix::from_fn(m, d, |_, _| rng.sample(dist));
    let item_factors = DMatrix::from_fn(n, d, |_, _| rng.sample(dist));
    FactorModel {
        user_factors,
        item_factors,
        offset: 0.0,
    }
}

/// Factors drawn i.i.d. uniform on [-1/sqrt(d), 1/sqrt(d)].
pub fn init_factors(m: usize, n: usize, d: usize, seed: u64) -> Result<FactorModel> {
    if m == 0 || n == 0 || d == 0 {
        return Err(Error::Argument(format!(
            "init_factors needs positive sizes, got m={m} n={n} d={d}"
        )));
    }
    Ok(init_with(m, n, d, &mut rng_stream(seed, 0)))
}

/// Hyperparameters shared by every trainer. The loss is always squared loss.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub dim: usize,
    /// L2 weight on the squared Frobenius norms of the factors.
    pub l2: f64,
    /// Weight of the discrepancy term (DAMF) or the inter-task penalty (CausE).
    pub tradeoff: f64,
    pub batch_size: usize,
    pub inner_steps: usize,
    pub learning_rate: f64,
    pub max_iterations: usize,
    pub seed: u64,
    /// Outer iterations between trace / validation checkpoints.
    pub log_every: usize,
    /// Stop after this many checkpoints without validation improvement.
    /// Only active when a validation set is supplied.
    pub patience: usize,
    /// Draw a fresh MNAR batch before every inner step instead of once per
    /// outer iteration.
    pub resample_inner: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dim: 20,
            l2: 1e-4,
            tradeoff: 0.1,
            batch_size: 256,
            inner_steps: 1,
            learning_rate: 0.01,
            max_iterations: 2500,
            seed: 0,
            log_every: 50,
            patience: 10,
            resample_inner: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Argument(msg.to_string()));
        if self.dim == 0 {
            return bad("dim must be positive");
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return bad("l2 must be a nonnegative finite number");
        }
        if !(self.tradeoff >= 0.0 && self.tradeoff.is_finite()) {
            return bad("tradeoff must be a nonnegative finite number");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.inner_steps == 0 {
            return bad("inner_steps must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.log_every == 0 {
            return bad("log_every must be positive");
        }
        Ok(())
    }
}

/// Constants of the generalization bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundConfig {
    /// Upper cap on the max-norm radius A. The traced value is the largest
    /// absolute clipped prediction, never above this cap.
    pub max_norm_bound: f64,
    /// delta: the bound holds with probability at least 1 - delta.
    pub confidence: f64,
    /// L, Lipschitz constant of the loss on the clipped range.
    pub lipschitz: f64,
}

impl BoundConfig {
    pub fn new(max_norm_bound: f64, confidence: f64, lipschitz: f64) -> Result<Self> {
        if max_norm_bound.is_nan() || max_norm_bound <= 0.0 {
            return Err(Error::Argument("max_norm_bound must be positive".into()));
        }
        if !(confidence > 0.0 && confidence < 1.0) {
            return Err(Error::Argument(format!(
                "confidence must lie in (0, 1), got {confidence}"
            )));
        }
        if lipschitz.is_nan() || lipschitz <= 0.0 {
            return Err(Error::Argument("lipschitz must be positive".into()));
        }
        Ok(Self {
            max_norm_bound,
            confidence,
            lipschitz,
        })
    }

    /// A = max(|r_min|, |r_max|), L = 2 (r_max - r_min) for squared loss.
    pub fn for_scale(scale: &RatingScale, confidence: f64) -> Result<Self> {
        Self::new(
            scale.min().abs().max(scale.max().abs()),
            confidence,
            2.0 * scale.width(),
        )
    }
}
