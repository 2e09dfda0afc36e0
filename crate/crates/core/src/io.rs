//! Dataset loading, splitting, statistics and the on-disk formats.
//!
//! * triples: whitespace-separated `user item rating`, 1-based indices.
//! * dense matrices (propensities, true ratings): one row per user,
//!   space-separated.
//! * models: a `m n d` header, then the m user rows, then the n item rows.
//! * traces: CSV, one column per bound component.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::model::{rng_stream, FactorModel, InteractionSet, PropensityMap, Rating, RatingScale};
use crate::trainers::TrainTrace;

/// Environment variable naming the dataset root.
pub const DATA_DIR_ENV: &str = "DATA_DIR";

/// Resolves a relative dataset path against `$DATA_DIR` when it is set.
pub fn data_path(path: impl AsRef<Path>) -> PathBuf {
    let path = path.as_ref();
    match std::env::var_os(DATA_DIR_ENV) {
        Some(root) if path.is_relative() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

/// Reads a triple file. Dimensions default to the largest index seen;
/// `dims` overrides them (and must cover every index).
pub fn load_triples(
    path: impl AsRef<Path>,
    scale: RatingScale,
    dims: Option<(usize, usize)>,
) -> Result<InteractionSet> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_triples(BufReader::new(file), path, scale, dims)
}

pub fn parse_triples<R: BufRead>(
    reader: R,
    path: &Path,
    scale: RatingScale,
    dims: Option<(usize, usize)>,
) -> Result<InteractionSet> {
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut triples = Vec::new();
    let mut seen = HashSet::new();
    let (mut max_user, mut max_item) = (0usize, 0usize);
    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 3 {
            return Err(parse_err(
                lineno,
                format!("expected `user item rating`, got {} fields", fields.len()),
            ));
        }
        let index = |s: &str, what: &str| -> Result<usize> {
            match s.parse::<usize>() {
                Ok(0) => Err(parse_err(lineno, format!("{what} index 0; indices are 1-based"))),
                Ok(v) => Ok(v),
                Err(_) => Err(parse_err(lineno, format!("bad {what} index {s:?}"))),
            }
        };
        let user = index(fields[0], "user")?;
        let item = index(fields[1], "item")?;
        let value: f64 = fields[2]
            .parse()
            .map_err(|_| parse_err(lineno, format!("bad rating {:?}", fields[2])))?;
        if !value.is_finite() || !scale.contains(value) {
            return Err(parse_err(
                lineno,
                format!("rating {value} out of range [{}, {}]", scale.min(), scale.max()),
            ));
        }
        if !seen.insert((user, item)) {
            return Err(Error::Duplicate {
                user: user - 1,
                item: item - 1,
            });
        }
        max_user = max_user.max(user);
        max_item = max_item.max(item);
        triples.push(Rating {
            user: user - 1,
            item: item - 1,
            value,
        });
    }
    let (m, n) = dims.unwrap_or((max_user, max_item));
    InteractionSet::new(m, n, triples, scale)
}

fn fmt_value(v: f64) -> String {
    // Debug formatting is the shortest string that parses back bit-exactly.
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v:?}")
    }
}

pub fn format_triples(data: &InteractionSet) -> String {
    let mut out = String::new();
    for t in data.iter() {
        let _ = writeln!(out, "{} {} {}", t.user + 1, t.item + 1, fmt_value(t.value));
    }
    out
}

pub fn write_triples(path: impl AsRef<Path>, data: &InteractionSet) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_triples(data)).map_err(|e| Error::io(path, e))
}

/// Uniform random partition into (train, validation) with
/// `floor(fraction * M)` validation triples.
pub fn split_train_val(data: &InteractionSet, fraction: f64, seed: u64) -> Result<(InteractionSet, InteractionSet)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Argument(format!(
            "split fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let n_val = (fraction * data.len() as f64).floor() as usize;
    if n_val == 0 || n_val == data.len() {
        return Err(Error::Argument(format!(
            "fraction {fraction} of {} ratings leaves an empty side",
            data.len()
        )));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng_stream(seed, 0));
    let (val_idx, train_idx) = order.split_at(n_val);
    let pick = |idx: &[usize]| {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        let triples = idx.iter().map(|&k| data.triples()[k]).collect();
        InteractionSet::new(data.num_users(), data.num_items(), triples, data.scale())
    };
    Ok((pick(train_idx)?, pick(val_idx)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetStats {
    pub num_users: usize,
    pub num_items: usize,
    /// Training ratings.
    pub num_ratings: usize,
    /// M / (m n) over the union's dimensions.
    pub sparsity: f64,
    pub mean_train: f64,
    pub mean_test: f64,
    /// KL(train || test) of the smoothed rating-level distributions.
    pub kl_divergence: f64,
    /// KL(test || train), kept for diagnosing the direction question.
    pub kl_reverse: f64,
}

/// Laplace-smoothed (+1 per level) rating-level distribution.
pub fn level_distribution(data: &InteractionSet) -> Vec<f64> {
    crate::propensity::smoothed_level_distribution(data)
}

pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| a * (a / b).ln())
        .sum::<f64>()
        .max(0.0)
}

pub fn dataset_stats(train: &InteractionSet, test: &InteractionSet) -> Result<DatasetStats> {
    if train.scale() != test.scale() {
        return Err(Error::Argument("train and test use different rating scales".into()));
    }
    let m = train.num_users().max(test.num_users());
    let n = train.num_items().max(test.num_items());
    let (p, q) = (level_distribution(train), level_distribution(test));
    Ok(DatasetStats {
        num_users: m,
        num_items: n,
        num_ratings: train.len(),
        sparsity: train.len() as f64 / (m as f64 * n as f64),
        mean_train: train.mean_rating(),
        mean_test: test.mean_rating(),
        kl_divergence: kl_divergence(&p, &q),
        kl_reverse: kl_divergence(&q, &p),
    })
}

pub fn format_matrix(mat: &DMatrix<f64>) -> String {
    let mut out = String::new();
    for row in mat.row_iter() {
        let line: Vec<String> = row.iter().map(|&v| fmt_value(v)).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

pub fn parse_matrix(text: &str, path: &Path) -> Result<DMatrix<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split_whitespace()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                msg: e.to_string(),
            })?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    msg: format!("row has {} columns, expected {}", row.len(), first.len()),
                });
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Empty("matrix file has no rows"));
    }
    let (m, n) = (rows.len(), rows[0].len());
    Ok(DMatrix::from_row_iterator(m, n, rows.into_iter().flatten()))
}

pub fn write_matrix(path: impl AsRef<Path>, mat: &DMatrix<f64>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_matrix(mat)).map_err(|e| Error::io(path, e))
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_matrix(&text, path)
}

/// Writes the propensities densely over an m x n grid.
pub fn write_propensity(path: impl AsRef<Path>, propensity: &PropensityMap, m: usize, n: usize) -> Result<()> {
    write_matrix(path, &propensity.to_dense(m, n))
}

pub fn read_propensity(path: impl AsRef<Path>) -> Result<PropensityMap> {
    PropensityMap::dense(read_matrix(path)?)
}

pub fn format_model(model: &FactorModel) -> String {
    let mut out = format!("{} {} {}", model.num_users(), model.num_items(), model.dim());
    if model.offset != 0.0 {
        out.push(' ');
        out.push_str(&fmt_value(model.offset));
    }
    out.push('\n');
    out.push_str(&format_matrix(&model.user_factors));
    out.push_str(&format_matrix(&model.item_factors));
    out
}

pub fn parse_model(text: &str, path: &Path) -> Result<FactorModel> {
    let mut lines = text.lines();
    let header = lines.next().ok_or(Error::Empty("model file is empty"))?;
    let bad_header = |msg: String| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        msg,
    };
    let fields: Vec<&str> = header.split_whitespace().collect();
    if !(3..=4).contains(&fields.len()) {
        return Err(bad_header("header must be `m n d` or `m n d offset`".into()));
    }
    let dims: Vec<usize> = fields[..3]
        .iter()
        .map(|s| s.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| bad_header(format!("bad header: {e}")))?;
    let (m, n, d) = (dims[0], dims[1], dims[2]);
    let offset = match fields.get(3) {
        Some(s) => s.parse::<f64>().map_err(|e| bad_header(format!("bad offset: {e}")))?,
        None => 0.0,
    };
    let body: Vec<&str> = lines.filter(|l| !l.trim().is_empty()).collect();
    if body.len() != m + n {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg: format!("expected {} factor rows, found {}", m + n, body.len()),
        });
    }
    let users = parse_matrix(&body[..m].join("\n"), path)?;
    let items = parse_matrix(&body[m..].join("\n"), path)?;
    if users.ncols() != d || items.ncols() != d {
        return Err(Error::Shape(format!("factor rows must have {d} columns")));
    }
    Ok(FactorModel::new(users, items)?.with_offset(offset))
}

pub fn write_model(path: impl AsRef<Path>, model: &FactorModel) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_model(model)).map_err(|e| Error::io(path, e))
}

pub fn read_model(path: impl AsRef<Path>) -> Result<FactorModel> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_model(&text, path)
}

pub const TRACE_HEADER: &str = "iteration,naive,pmd,complexity,confidence,bound,ideal";

pub fn format_trace(trace: &TrainTrace) -> String {
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for r in &trace.records {
        let ideal = r.ideal_loss.map(fmt_value).unwrap_or_default();
        let b = &r.bound;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.iteration,
            fmt_value(b.naive),
            fmt_value(b.pmd),
            fmt_value(b.complexity),
            fmt_value(b.confidence),
            fmt_value(b.total),
            ideal
        );
    }
    out
}

pub fn write_trace(path: impl AsRef<Path>, trace: &TrainTrace) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_trace(trace)).map_err(|e| Error::io(path, e))
}
