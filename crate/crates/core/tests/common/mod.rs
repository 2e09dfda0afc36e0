#![allow(dead_code)]

pub mod grad_oracles;

use damf_core::FactorModel;
use nalgebra::DMatrix;
use rand::Rng;

pub fn random_model<R: Rng>(rng: &mut R, m: usize, n: usize, d: usize, spread: f64) -> FactorModel {
    let u = DMatrix::from_fn(m, d, |_, _| rng.random_range(-spread..spread));
    let v = DMatrix::from_fn(n, d, |_, _| rng.random_range(-spread..spread));
    FactorModel::new(u, v).unwrap()
}

pub fn dot(model: &FactorModel, u: usize, i: usize) -> f64 {
    model.offset + model.user_factors.row(u).dot(&model.item_factors.row(i))
}

/// Central differences of `f` over every user then every item factor entry.
pub fn numeric_grad(model: &FactorModel, h: f64, f: impl Fn(&FactorModel) -> f64) -> Vec<f64> {
    let mut out = Vec::new();
    for which in 0..2 {
        let (rows, cols) = if which == 0 {
            model.user_factors.shape()
        } else {
            model.item_factors.shape()
        };
        for r in 0..rows {
            for c in 0..cols {
                let mut plus = model.clone();
                let mut minus = model.clone();
                if which == 0 {
                    plus.user_factors[(r, c)] += h;
                    minus.user_factors[(r, c)] -= h;
                } else {
                    plus.item_factors[(r, c)] += h;
                    minus.item_factors[(r, c)] -= h;
                }
                out.push((f(&plus) - f(&minus)) / (2.0 * h));
            }
        }
    }
    out
}

/// Row-major flattening matching [`numeric_grad`]'s order.
pub fn flatten(user: &DMatrix<f64>, item: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(user.len() + item.len());
    for mat in [user, item] {
        for r in 0..mat.nrows() {
            for c in 0..mat.ncols() {
                out.push(mat[(r, c)]);
            }
        }
    }
    out
}

/// Norm-wise relative error.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-8)
}

pub fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Average ranks (ties share the mean of their positions).
fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start;
        while end + 1 < idx.len() && v[idx[end + 1]] == v[idx[start]] {
            end += 1;
        }
        let r = (start + end) as f64 / 2.0 + 1.0;
        for &k in &idx[start..=end] {
            ranks[k] = r;
        }
        start = end + 1;
    }
    ranks
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let (ma, _) = mean_sd(a);
    let (mb, _) = mean_sd(b);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    pearson(&average_ranks(a), &average_ranks(b))
}

/// Every permutation of `0..n`.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}
