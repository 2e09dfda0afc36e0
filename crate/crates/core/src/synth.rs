//! Synthetic worlds with known ratings and observation probabilities.

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{rng_stream, InteractionSet, PropensityMap, Rating, RatingScale};

/// Lowest propensity outside a zero-propensity block.
pub const PROPENSITY_CLAMP: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub num_users: usize,
    pub num_items: usize,
    /// Rank of the noise-free rating matrix (one dimension carries the
    /// scale midpoint).
    pub latent_dim: usize,
    /// Standard deviation of the low-rank signal around the scale midpoint.
    pub rating_sd: f64,
    /// Standard deviation of the i.i.d. Gaussian noise added to each cell.
    pub noise: f64,
    /// Exponential tilt of the observation probability towards high ratings.
    pub selection_strength: f64,
    pub base_rate: f64,
    /// Cells `[0, users) x [0, items)` that are never observed.
    pub zero_block: Option<(usize, usize)>,
    pub scale: RatingScale,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_users: 200,
            num_items: 100,
            latent_dim: 5,
            rating_sd: 1.0,
            noise: 0.0,
            selection_strength: 1.0,
            base_rate: 0.05,
            zero_block: None,
            scale: RatingScale::five_star(),
            seed: 0,
        }
    }
}

impl SynthSpec {
    /// The 200 x 100 MNAR benchmark: rank-5 ratings with unit signal and unit
    /// noise, selection strength 1, base rate 0.05.
    pub fn benchmark() -> Self {
        Self {
            noise: 1.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_users == 0 || self.num_items == 0 || self.latent_dim == 0 {
            return Err(Error::Argument("synthetic dimensions must be positive".into()));
        }
        if !(self.base_rate > 0.0 && self.base_rate <= 1.0) {
            return Err(Error::Argument(format!(
                "base_rate must lie in (0, 1], got {}",
                self.base_rate
            )));
        }
        if !(self.noise >= 0.0 && self.rating_sd >= 0.0 && self.selection_strength.is_finite()) {
            return Err(Error::Argument("noise and rating_sd must be nonnegative".into()));
        }
        if let Some((bu, bi)) = self.zero_block {
            if bu > self.num_users || bi > self.num_items {
                return Err(Error::Argument("zero block exceeds the grid".into()));
            }
        }
        Ok(())
    }
}

/// Ground truth of a synthetic world.
#[derive(Debug, Clone, PartialEq)]
pub struct TrueWorld {
    pub ratings: DMatrix<f64>,
    /// Observation probabilities; zero only inside the zero-propensity block.
    pub observation: DMatrix<f64>,
    pub scale: RatingScale,
}

impl TrueWorld {
    pub fn dims(&self) -> (usize, usize) {
        self.ratings.shape()
    }

    /// The observation probabilities as a propensity map. Fails when a cell
    /// has zero probability, where inverse propensity weighting is undefined.
    pub fn propensity(&self) -> Result<PropensityMap> {
        PropensityMap::dense(self.observation.clone())
    }

    /// Draws an observed training set.
    pub fn observe(&self, seed: u64) -> Result<InteractionSet> {
        sample_observation(&self.ratings, &self.observation, self.scale, seed)
    }
}

fn std_dev(values: &DMatrix<f64>) -> f64 {
    let n = values.len() as f64;
    let mean = values.sum() / n;
    (values.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
}

/// Builds the true rating matrix and observation probabilities.
///
/// Ratings are `mid + s * (A B^T) + noise`, clamped into the scale, where
/// A, B have `latent_dim - 1` standard normal columns and `s` rescales the
/// product to `rating_sd`. Observation probabilities are
/// `clamp(base_rate * exp(selection_strength * (R - mid)), 0.01, 1)`.
pub fn gen_true_world(spec: &SynthSpec) -> Result<TrueWorld> {
    spec.validate()?;
    let (m, n, k) = (spec.num_users, spec.num_items, spec.latent_dim - 1);
    let mut rng = rng_stream(spec.seed, 0);
    let a = DMatrix::from_fn(m, k, |_, _| rng.sample::<f64, _>(StandardNormal));
    let b = DMatrix::from_fn(n, k, |_, _| rng.sample::<f64, _>(StandardNormal));
    let signal = &a * b.transpose();
    let sd = std_dev(&signal);
    let s = if sd > 0.0 { spec.rating_sd / sd } else { 0.0 };
    let mid = spec.scale.mid();

    let mut noise_rng = rng_stream(spec.seed, 1);
    let ratings = signal.map(|x| {
        let eps = if spec.noise > 0.0 {
            spec.noise * noise_rng.sample::<f64, _>(StandardNormal)
        } else {
            0.0
        };
        spec.scale.clamp(mid + s * x + eps)
    });

    let mut observation =
        ratings.map(|r| (spec.base_rate * (spec.selection_strength * (r - mid)).exp()).clamp(PROPENSITY_CLAMP, 1.0));
    if let Some((bu, bi)) = spec.zero_block {
        observation.view_mut((0, 0), (bu, bi)).fill(0.0);
    }
    Ok(TrueWorld {
        ratings,
        observation,
        scale: spec.scale,
    })
}

/// One independent Bernoulli draw per cell; observed cells carry their true
/// rating.
pub fn sample_observation(
    true_ratings: &DMatrix<f64>,
    probabilities: &DMatrix<f64>,
    scale: RatingScale,
    seed: u64,
) -> Result<InteractionSet> {
    sample_observation_with(true_ratings, probabilities, scale, &mut rng_stream(seed, 0))
}

pub fn sample_observation_with<R: Rng + ?Sized>(
    true_ratings: &DMatrix<f64>,
    probabilities: &DMatrix<f64>,
    scale: RatingScale,
    rng: &mut R,
) -> Result<InteractionSet> {
    if true_ratings.shape() != probabilities.shape() {
        return Err(Error::Shape(format!(
            "ratings {:?} vs probabilities {:?}",
            true_ratings.shape(),
            probabilities.shape()
        )));
    }
    let (m, n) = true_ratings.shape();
    let mut triples = Vec::new();
    for u in 0..m {
        for i in 0..n {
            if rng.random::<f64>() < probabilities[(u, i)] {
                triples.push(Rating {
                    user: u,
                    item: i,
                    value: true_ratings[(u, i)],
                });
            }
        }
    }
    InteractionSet::new(m, n, triples, scale)
}

/// MCAR test set: `per_user` distinct items per user, chosen uniformly.
pub fn sample_mcar_test(world: &TrueWorld, per_user: usize, seed: u64) -> Result<InteractionSet> {
    let (m, n) = world.dims();
    if per_user == 0 || per_user > n {
        return Err(Error::Argument(format!("per_user must lie in 1..={n}, got {per_user}")));
    }
    let mut rng = rng_stream(seed, 0);
    let mut triples = Vec::with_capacity(m * per_user);
    for u in 0..m {
        let mut items = sample(&mut rng, n, per_user).into_vec();
        items.sort_unstable();
        triples.extend(items.into_iter().map(|i| Rating {
            user: u,
            item: i,
            value: world.ratings[(u, i)],
        }));
    }
    InteractionSet::new(m, n, triples, world.scale)
}
