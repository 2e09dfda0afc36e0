//! Finite-difference oracles for every analytic gradient. Each returns the
//! worst relative error over [`CONFIGS`] random configurations.

use super::{dot, flatten, numeric_grad, random_model, rel_err};
use damf_core::estimators::LossBatch;
use damf_core::model::rng_stream;
use damf_core::optim::{grad_discrepancy, grad_dr_model, grad_imputation, grad_weighted_mf, DrBatch, GradTarget};
use damf_core::propensity::one_bit_gradient;
use damf_core::FactorModel;
use nalgebra::DMatrix;
use rand::Rng;

const H: f64 = 1e-5;
pub const CONFIGS: u64 = 100;

fn random_pairs<R: Rng>(rng: &mut R, m: usize, n: usize, t: usize) -> Vec<(usize, usize)> {
    (0..t)
        .map(|_| (rng.random_range(0..m), rng.random_range(0..n)))
        .collect()
}

fn random_labeled<R: Rng>(rng: &mut R, m: usize, n: usize, t: usize) -> LossBatch {
    let pairs = random_pairs(rng, m, n, t);
    let ratings = (0..t).map(|_| rng.random_range(1.0..5.0)).collect();
    LossBatch::labeled(pairs, ratings).unwrap()
}

fn shape<R: Rng>(rng: &mut R) -> (usize, usize, usize) {
    (rng.random_range(2..7), rng.random_range(2..7), rng.random_range(1..5))
}

fn score(model: &FactorModel, u: usize, i: usize) -> f64 {
    dot(model, u, i)
}

pub fn weighted_mf() -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..CONFIGS {
        let mut rng = rng_stream(seed, 11);
        let (m, n, d) = shape(&mut rng);
        let model = random_model(&mut rng, m, n, d, 1.0);
        let t = rng.random_range(1..12);
        let batch = random_labeled(&mut rng, m, n, t);
        let weights: Vec<f64> = (0..t).map(|_| rng.random_range(0.5..4.0)).collect();
        let l2 = rng.random_range(0.0..0.1);

        let f = |mdl: &FactorModel| {
            let ratings = batch.ratings.as_ref().unwrap();
            let fit: f64 = batch
                .pairs
                .iter()
                .zip(ratings)
                .zip(&weights)
                .map(|((&(u, i), &r), &w)| w * (r - score(mdl, u, i)).powi(2))
                .sum::<f64>()
                / t as f64;
            let reg = mdl
                .user_factors
                .iter()
                .chain(mdl.item_factors.iter())
                .map(|x| x * x)
                .sum::<f64>();
            fit + l2 * reg
        };
        let g = grad_weighted_mf(&model, &batch, &weights, l2).unwrap();
        let err = rel_err(&flatten(&g.user, &g.item), &numeric_grad(&model, H, f));
        worst = worst.max(err);
    }
    worst
}

pub fn discrepancy() -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..CONFIGS {
        let mut rng = rng_stream(seed, 12);
        let (m, n, d) = shape(&mut rng);
        let model = random_model(&mut rng, m, n, d, 1.0);
        let adversary = random_model(&mut rng, m, n, d, 1.0).with_offset(rng.random_range(-1.0..3.0));
        let t1 = rng.random_range(1..10);
        let t2 = rng.random_range(1..10);
        let mcar = LossBatch::unlabeled(random_pairs(&mut rng, m, n, t1));
        let mnar = LossBatch::unlabeled(random_pairs(&mut rng, m, n, t2));

        let gap = |a: &FactorModel, b: &FactorModel| {
            let mean = |batch: &LossBatch| {
                batch
                    .pairs
                    .iter()
                    .map(|&(u, i)| (score(a, u, i) - score(b, u, i)).powi(2))
                    .sum::<f64>()
                    / batch.len() as f64
            };
            mean(&mcar) - mean(&mnar)
        };

        let (gu, gi) = grad_discrepancy(&model, &adversary, &mcar, &mnar, GradTarget::Model).unwrap();
        let fd = numeric_grad(&model, H, |x| gap(x, &adversary));
        let err = rel_err(&flatten(&gu, &gi), &fd);
        worst = worst.max(err);

        let (gu, gi) = grad_discrepancy(&model, &adversary, &mcar, &mnar, GradTarget::Adversary).unwrap();
        let fd = numeric_grad(&adversary, H, |x| gap(&model, x));
        let err = rel_err(&flatten(&gu, &gi), &fd);
        worst = worst.max(err);
    }
    worst
}

fn log_likelihood(logits: &DMatrix<f64>, observed: &DMatrix<f64>) -> f64 {
    logits
        .iter()
        .zip(observed.iter())
        .map(|(&g, &o)| {
            let s = 1.0 / (1.0 + (-g).exp());
            o * s.ln() + (1.0 - o) * (1.0 - s).ln()
        })
        .sum()
}

pub fn one_bit() -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..CONFIGS {
        let mut rng = rng_stream(seed, 13);
        let m = rng.random_range(2..8);
        let n = rng.random_range(2..8);
        let logits = DMatrix::from_fn(m, n, |_, _| rng.random_range(-4.0..4.0));
        let observed = DMatrix::from_fn(m, n, |_, _| if rng.random_bool(0.3) { 1.0 } else { 0.0 });

        let analytic = one_bit_gradient(&logits, &observed);
        let mut fd = Vec::with_capacity(m * n);
        let mut an = Vec::with_capacity(m * n);
        for j in 0..n {
            for i in 0..m {
                let mut plus = logits.clone();
                let mut minus = logits.clone();
                plus[(i, j)] += H;
                minus[(i, j)] -= H;
                fd.push((log_likelihood(&plus, &observed) - log_likelihood(&minus, &observed)) / (2.0 * H));
                an.push(analytic[(i, j)]);
            }
        }
        let err = rel_err(&an, &fd);
        worst = worst.max(err);
    }
    worst
}

pub fn dr_model() -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..CONFIGS {
        let mut rng = rng_stream(seed, 14);
        let (m, n, d) = shape(&mut rng);
        let model = random_model(&mut rng, m, n, d, 1.0).with_offset(rng.random_range(0.0..3.0));
        let imputation = random_model(&mut rng, m, n, d, 1.0).with_offset(3.0);
        let t = rng.random_range(1..10);
        let observed = random_labeled(&mut rng, m, n, t);
        let tu = rng.random_range(1..10);
        let uniform = LossBatch::unlabeled(random_pairs(&mut rng, m, n, tu));
        let weights: Vec<f64> = (0..t).map(|_| rng.random_range(0.5..4.0)).collect();
        let imputed_scale = rng.random_range(0.5..3.0);
        let l2 = rng.random_range(0.0..0.1);
        let batch = DrBatch {
            observed: &observed,
            weights: &weights,
            uniform: &uniform,
            imputed_scale,
        };

        let f = |mdl: &FactorModel| {
            let imp = |u, i| score(&imputation, u, i);
            let imputed = uniform
                .pairs
                .iter()
                .map(|&(u, i)| (score(mdl, u, i) - imp(u, i)).powi(2))
                .sum::<f64>()
                / uniform.len() as f64;
            let corr = observed
                .pairs
                .iter()
                .zip(observed.ratings.as_ref().unwrap())
                .zip(&weights)
                .map(|((&(u, i), &r), &w)| {
                    let p = score(mdl, u, i);
                    w * ((r - p).powi(2) - (p - imp(u, i)).powi(2))
                })
                .sum::<f64>()
                / t as f64;
            let reg = mdl
                .user_factors
                .iter()
                .chain(mdl.item_factors.iter())
                .map(|x| x * x)
                .sum::<f64>();
            imputed_scale * imputed + corr + l2 * reg
        };
        let g = grad_dr_model(&model, &imputation, &batch, l2).unwrap();
        let err = rel_err(&flatten(&g.user, &g.item), &numeric_grad(&model, H, f));
        worst = worst.max(err);
    }
    worst
}

pub fn imputation() -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..CONFIGS {
        let mut rng = rng_stream(seed, 15);
        let (m, n, d) = shape(&mut rng);
        let model = random_model(&mut rng, m, n, d, 1.0).with_offset(3.0);
        let imputation = random_model(&mut rng, m, n, d, 1.0).with_offset(rng.random_range(1.0..4.0));
        let t = rng.random_range(1..10);
        let observed = random_labeled(&mut rng, m, n, t);
        let weights: Vec<f64> = (0..t).map(|_| rng.random_range(0.5..4.0)).collect();
        let l2 = rng.random_range(0.0..0.1);

        let f = |imp: &FactorModel| {
            let fit = observed
                .pairs
                .iter()
                .zip(observed.ratings.as_ref().unwrap())
                .zip(&weights)
                .map(|((&(u, i), &r), &w)| {
                    let p = score(&model, u, i);
                    w * ((p - score(imp, u, i)).powi(2) - (r - p).powi(2)).powi(2)
                })
                .sum::<f64>()
                / t as f64;
            let reg = imp
                .user_factors
                .iter()
                .chain(imp.item_factors.iter())
                .map(|x| x * x)
                .sum::<f64>();
            fit + l2 * reg
        };
        let g = grad_imputation(&model, &imputation, &observed, &weights, l2).unwrap();
        let err = rel_err(&flatten(&g.user, &g.item), &numeric_grad(&imputation, H, f));
        worst = worst.max(err);
    }
    worst
}
