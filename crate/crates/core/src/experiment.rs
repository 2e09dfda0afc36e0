//! Experiment runner: trains every configured method over several seeds and
//! aggregates test metrics.
//!
//! Configs are flat `key = value` text files; `#` starts a comment. Keys:
//!
//! | key | default | meaning |
//! |---|---|---|
//! | `dataset` | `synthetic` | `synthetic` or `files` |
//! | `train_path`, `test_path` | | triple files (relative paths resolve under `DATA_DIR`) |
//! | `num_users`, `num_items` | 200, 100 | grid size (synthetic) or dimension override (files) |
//! | `latent_dim`, `rating_sd`, `noise` | 5, 1, 1 | synthetic ratings |
//! | `selection_strength`, `base_rate` | 1, 0.05 | synthetic observation model |
//! | `zero_block` | none | `UxI` block that is never observed |
//! | `synth_seed`, `observe_seed` | 0, 1 | world and training-sample seeds |
//! | `test_per_user` | 10 | MCAR test items per synthetic user |
//! | `methods` | `mf, damf` | comma list; `mf-ips:true` overrides the propensity of one entry |
//! | `seeds`, `seed_offset` | 5, 0 | runs use seeds `offset .. offset + seeds` |
//! | `k`, `gain`, `universe` | 5, `pow-minus-one`, `test` | ranking metrics |
//! | `propensity` | `user` | `user`, `item`, `user-item`, `1bitmc`, `nb-true`, `true` |
//! | `one_bit_tau`, `one_bit_gamma`, `one_bit_step`, `one_bit_iterations` | 1, 5, 1, 500 | 1BitMC |
//! | `cause_mcar_fraction`, `nb_mcar_fraction`, `mcar_seed` | 0.1, 0.05, 7919 | MCAR samples drawn from the test set |
//! | `validation_fraction`, `split_seed` | 0, 0 | held-out share of the training set for early stopping |
//! | `dim`, `l2`, `tradeoff`, `batch_size`, `inner_steps`, `learning_rate` | 20, 1e-4, 0.1, 256, 1, 0.01 | training |
//! | `max_iterations`, `log_every`, `patience`, `resample_inner` | 2500, 50, 10, false | training |
//! | `confidence`, `trace_ascent_steps`, `trace_step_size` | 0.05, 500, 3 | DAMF bound trace |

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::seq::index::sample;

use crate::error::{Error, Result};
use crate::estimators::ideal_loss_clipped;
use crate::io::{data_path, dataset_stats, format_trace, load_triples, split_train_val, DatasetStats};
use crate::metrics::{
    mse, ndcg_at_k_with, recall_at_k_with, Gain, MetricReport, MetricValues, RankingOptions, RankingUniverse,
};
use crate::model::{rng_stream, FactorModel, InteractionSet, PropensityMap, Rating, RatingScale, TrainConfig};
use crate::propensity::{
    item_propensity, one_bit_mc, true_propensity_naive_bayes, user_item_propensity, user_propensity, OneBitMcConfig,
};
use crate::synth::{gen_true_world, sample_mcar_test, SynthSpec};
use crate::trainers::{
    train_cause, train_damf, train_mf, train_mf_dr, train_mf_ips, DamfOptions, Imputation, Method, TrainTrace,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PropensityKind {
    User,
    Item,
    UserItem,
    OneBitMc,
    /// Naive Bayes with the rating prior taken from an MCAR sample.
    NbTrue,
    /// The generating probabilities; synthetic data only.
    True,
}

impl PropensityKind {
    pub const ALL: [PropensityKind; 6] = [
        PropensityKind::User,
        PropensityKind::Item,
        PropensityKind::UserItem,
        PropensityKind::OneBitMc,
        PropensityKind::NbTrue,
        PropensityKind::True,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PropensityKind::User => "user",
            PropensityKind::Item => "item",
            PropensityKind::UserItem => "user-item",
            PropensityKind::OneBitMc => "1bitmc",
            PropensityKind::NbTrue => "nb-true",
            PropensityKind::True => "true",
        }
    }
}

impl FromStr for PropensityKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown propensity estimator `{s}`")))
    }
}

/// One row of the results table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MethodSpec {
    pub method: Method,
    /// Overrides the experiment-wide estimator for this row.
    pub propensity: Option<PropensityKind>,
}

impl MethodSpec {
    pub fn label(&self) -> String {
        match self.propensity {
            Some(p) => format!("{}:{}", self.method, p.name()),
            None => self.method.to_string(),
        }
    }
}

impl FromStr for MethodSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (method, propensity) = match s.trim().split_once(':') {
            Some((m, p)) => (m.parse::<Method>()?, Some(p.parse::<PropensityKind>()?)),
            None => (s.parse::<Method>()?, None),
        };
        if propensity.is_some() && !method.needs_propensity() {
            return Err(Error::Config(format!("`{method}` takes no propensity estimator")));
        }
        Ok(Self { method, propensity })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic {
        spec: SynthSpec,
        observe_seed: u64,
        test_per_user: usize,
    },
    Files {
        train: PathBuf,
        test: PathBuf,
        dims: Option<(usize, usize)>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub source: DataSource,
    pub methods: Vec<MethodSpec>,
    pub seeds: usize,
    pub seed_offset: u64,
    pub k: usize,
    pub ranking: RankingOptions,
    pub propensity: PropensityKind,
    pub one_bit: OneBitMcConfig,
    pub cause_mcar_fraction: f64,
    pub nb_mcar_fraction: f64,
    pub mcar_seed: u64,
    pub validation_fraction: f64,
    pub split_seed: u64,
    pub train: TrainConfig,
    pub confidence: f64,
    pub trace_ascent_steps: usize,
    pub trace_step_size: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic {
                spec: SynthSpec::benchmark(),
                observe_seed: 1,
                test_per_user: 10,
            },
            methods: vec![
                MethodSpec {
                    method: Method::Mf,
                    propensity: None,
                },
                MethodSpec {
                    method: Method::Damf,
                    propensity: None,
                },
            ],
            seeds: 5,
            seed_offset: 0,
            k: 5,
            ranking: RankingOptions::default(),
            propensity: PropensityKind::User,
            one_bit: OneBitMcConfig::default(),
            cause_mcar_fraction: 0.1,
            nb_mcar_fraction: 0.05,
            mcar_seed: 7919,
            validation_fraction: 0.0,
            split_seed: 0,
            train: TrainConfig::default(),
            confidence: 0.05,
            trace_ascent_steps: 500,
            trace_step_size: 3.0,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| Error::Config(format!("bad value `{value}` for `{key}`: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!(
            "bad value `{value}` for `{key}`: expected true or false"
        ))),
    }
}

fn parse_block(value: &str) -> Result<(usize, usize)> {
    let (u, i) = value
        .split_once(['x', 'X'])
        .ok_or_else(|| Error::Config(format!("zero_block must look like `20x10`, got `{value}`")))?;
    Ok((
        parse_value("zero_block", u.trim())?,
        parse_value("zero_block", i.trim())?,
    ))
}

/// Splits `key = value` lines, dropping comments and blank lines.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
        out.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(out)
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut spec = SynthSpec::benchmark();
        let (mut observe_seed, mut test_per_user) = (1, 10);
        let mut dataset = "synthetic".to_string();
        let (mut train_path, mut test_path) = (None, None);
        let (mut num_users, mut num_items) = (None, None);

        for (key, value) in parse_key_values(text)? {
            let v = value.as_str();
            match key.as_str() {
                "dataset" => dataset = v.to_string(),
                "train_path" => train_path = Some(PathBuf::from(v)),
                "test_path" => test_path = Some(PathBuf::from(v)),
                "num_users" => num_users = Some(parse_value(&key, v)?),
                "num_items" => num_items = Some(parse_value(&key, v)?),
                "latent_dim" => spec.latent_dim = parse_value(&key, v)?,
                "rating_sd" => spec.rating_sd = parse_value(&key, v)?,
                "noise" => spec.noise = parse_value(&key, v)?,
                "selection_strength" => spec.selection_strength = parse_value(&key, v)?,
                "base_rate" => spec.base_rate = parse_value(&key, v)?,
                "zero_block" => spec.zero_block = Some(parse_block(v)?),
                "synth_seed" => spec.seed = parse_value(&key, v)?,
                "observe_seed" => observe_seed = parse_value(&key, v)?,
                "test_per_user" => test_per_user = parse_value(&key, v)?,
                "methods" => {
                    cfg.methods = v
                        .split(',')
                        .filter(|s| !s.trim().is_empty())
                        .map(str::parse)
                        .collect::<Result<_>>()?
                }
                "seeds" => cfg.seeds = parse_value(&key, v)?,
                "seed_offset" => cfg.seed_offset = parse_value(&key, v)?,
                "k" => cfg.k = parse_value(&key, v)?,
                "gain" => {
                    cfg.ranking.gain = match v {
                        "pow-minus-one" => Gain::PowMinusOne,
                        "pow-then-minus-one" => Gain::PowThenMinusOne,
                        _ => return Err(Error::Config(format!("unknown gain `{v}`"))),
                    }
                }
                "universe" => {
                    cfg.ranking.universe = match v {
                        "test" => RankingUniverse::TestItems,
                        "catalog" => RankingUniverse::FullCatalog,
                        _ => return Err(Error::Config(format!("unknown ranking universe `{v}`"))),
                    }
                }
                "propensity" => cfg.propensity = v.parse()?,
                "one_bit_tau" => cfg.one_bit.nuclear_cap_scale = parse_value(&key, v)?,
                "one_bit_gamma" => cfg.one_bit.entry_cap = parse_value(&key, v)?,
                "one_bit_step" => cfg.one_bit.step_size = parse_value(&key, v)?,
                "one_bit_iterations" => cfg.one_bit.iterations = parse_value(&key, v)?,
                "cause_mcar_fraction" => cfg.cause_mcar_fraction = parse_value(&key, v)?,
                "nb_mcar_fraction" => cfg.nb_mcar_fraction = parse_value(&key, v)?,
                "mcar_seed" => cfg.mcar_seed = parse_value(&key, v)?,
                "validation_fraction" => cfg.validation_fraction = parse_value(&key, v)?,
                "split_seed" => cfg.split_seed = parse_value(&key, v)?,
                "dim" => cfg.train.dim = parse_value(&key, v)?,
                "l2" => cfg.train.l2 = parse_value(&key, v)?,
                "tradeoff" => cfg.train.tradeoff = parse_value(&key, v)?,
                "batch_size" => cfg.train.batch_size = parse_value(&key, v)?,
                "inner_steps" => cfg.train.inner_steps = parse_value(&key, v)?,
                "learning_rate" => cfg.train.learning_rate = parse_value(&key, v)?,
                "max_iterations" => cfg.train.max_iterations = parse_value(&key, v)?,
                "log_every" => cfg.train.log_every = parse_value(&key, v)?,
                "patience" => cfg.train.patience = parse_value(&key, v)?,
                "resample_inner" => cfg.train.resample_inner = parse_bool(&key, v)?,
                "confidence" => cfg.confidence = parse_value(&key, v)?,
                "trace_ascent_steps" => cfg.trace_ascent_steps = parse_value(&key, v)?,
                "trace_step_size" => cfg.trace_step_size = parse_value(&key, v)?,
                _ => return Err(Error::Config(format!("unknown key `{key}`"))),
            }
        }

        cfg.source = match dataset.as_str() {
            "synthetic" => {
                spec.num_users = num_users.unwrap_or(spec.num_users);
                spec.num_items = num_items.unwrap_or(spec.num_items);
                DataSource::Synthetic {
                    spec,
                    observe_seed,
                    test_per_user,
                }
            }
            "files" => {
                let (Some(train), Some(test)) = (train_path, test_path) else {
                    return Err(Error::Config("dataset = files needs train_path and test_path".into()));
                };
                let dims = match (num_users, num_items) {
                    (None, None) => None,
                    (Some(m), Some(n)) => Some((m, n)),
                    _ => return Err(Error::Config("give both num_users and num_items or neither".into())),
                };
                DataSource::Files { train, test, dims }
            }
            other => return Err(Error::Config(format!("unknown dataset `{other}`"))),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.methods.is_empty() {
            return Err(Error::Config("no methods listed".into()));
        }
        if self.seeds == 0 {
            return Err(Error::Config("seeds must be at least 1".into()));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        for (name, f) in [
            ("cause_mcar_fraction", self.cause_mcar_fraction),
            ("nb_mcar_fraction", self.nb_mcar_fraction),
        ] {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1], got {f}")));
            }
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config(format!(
                "validation_fraction must lie in [0, 1), got {}",
                self.validation_fraction
            )));
        }
        if let DataSource::Synthetic { spec, .. } = &self.source {
            spec.validate()?;
        }
        Ok(())
    }
}

/// Train / validation / test split with the ground truth when it is known.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: InteractionSet,
    pub validation: Option<InteractionSet>,
    pub test: InteractionSet,
    pub true_ratings: Option<DMatrix<f64>>,
    pub true_propensity: Option<DMatrix<f64>>,
}

/// Builds the train and test sets and, when configured, the validation split.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let (train, test, true_ratings, true_propensity) = match &cfg.source {
        DataSource::Synthetic {
            spec,
            observe_seed,
            test_per_user,
        } => {
            let world = gen_true_world(spec)?;
            let train = world.observe(*observe_seed)?;
            let test = sample_mcar_test(&world, *test_per_user, spec.seed.wrapping_add(1))?;
            (train, test, Some(world.ratings), Some(world.observation))
        }
        DataSource::Files { train, test, dims } => {
            let scale = RatingScale::five_star();
            let tr = load_triples(data_path(train), scale, None)?;
            let te = load_triples(data_path(test), scale, None)?;
            let (m, n) = dims.unwrap_or((tr.num_users().max(te.num_users()), tr.num_items().max(te.num_items())));
            (tr.with_dims(m, n)?, te.with_dims(m, n)?, None, None)
        }
    };
    let (train, validation) = if cfg.validation_fraction > 0.0 {
        let (t, v) = split_train_val(&train, cfg.validation_fraction, cfg.split_seed)?;
        (t, Some(v))
    } else {
        (train, None)
    };
    Ok(PreparedData {
        train,
        validation,
        test,
        true_ratings,
        true_propensity,
    })
}

/// A uniform share of the test triples (at least one), drawn on its own
/// stream of `seed`.
pub fn mcar_sample(test: &InteractionSet, fraction: f64, seed: u64, stream: u64) -> Result<InteractionSet> {
    let total = test.len();
    let size = ((total as f64 * fraction).floor() as usize).clamp(1, total);
    let mut idx = sample(&mut rng_stream(seed, stream), total, size).into_vec();
    idx.sort_unstable();
    let triples: Vec<Rating> = idx.into_iter().map(|k| test.triples()[k]).collect();
    InteractionSet::new(test.num_users(), test.num_items(), triples, test.scale())
}

const STREAM_CAUSE_SAMPLE: u64 = 0;
const STREAM_NB_SAMPLE: u64 = 1;

/// Propensities for the training set under `kind`.
pub fn estimate_propensity(kind: PropensityKind, data: &PreparedData, cfg: &ExperimentConfig) -> Result<PropensityMap> {
    let train = &data.train;
    match kind {
        PropensityKind::User => Ok(user_propensity(train)),
        PropensityKind::Item => Ok(item_propensity(train)),
        PropensityKind::UserItem => Ok(user_item_propensity(train)),
        PropensityKind::OneBitMc => one_bit_mc(train, &cfg.one_bit),
        PropensityKind::NbTrue => {
            let mcar = mcar_sample(&data.test, cfg.nb_mcar_fraction, cfg.mcar_seed, STREAM_NB_SAMPLE)?;
            true_propensity_naive_bayes(train, &mcar)
        }
        PropensityKind::True => match &data.true_propensity {
            Some(p) => PropensityMap::dense(p.clone()),
            None => Err(Error::Config("the `true` propensity needs a synthetic dataset".into())),
        },
    }
}

/// Test metrics of one model.
pub fn evaluate(model: &FactorModel, data: &PreparedData, k: usize, ranking: &RankingOptions) -> Result<MetricValues> {
    let test = &data.test;
    Ok(MetricValues {
        mse: mse(test, model)?,
        ndcg: ndcg_at_k_with(test, model, k, ranking)?,
        recall: recall_at_k_with(test, model, k, ranking)?,
        ideal_mse: data
            .true_ratings
            .as_ref()
            .map(|r| ideal_loss_clipped(r, model, &test.scale()))
            .transpose()?,
    })
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub reports: Vec<MetricReport>,
    /// Bound trace of the first DAMF seed.
    pub damf_trace: Option<TrainTrace>,
    pub stats: DatasetStats,
}

/// Runs every configured method for every seed. A pure function of the
/// config and the dataset files.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let data = prepare_data(cfg)?;
    let stats = dataset_stats(&data.train, &data.test)?;
    log::info!(
        "train {} ratings, test {} ratings on {} x {}",
        data.train.len(),
        data.test.len(),
        stats.num_users,
        stats.num_items
    );
    let needs_cause = cfg.methods.iter().any(|m| m.method == Method::Cause);
    let cause_mcar = if needs_cause {
        Some(mcar_sample(
            &data.test,
            cfg.cause_mcar_fraction,
            cfg.mcar_seed,
            STREAM_CAUSE_SAMPLE,
        )?)
    } else {
        None
    };

    let mut reports = Vec::with_capacity(cfg.methods.len());
    let mut damf_trace = None;
    for spec in &cfg.methods {
        let propensity = if spec.method.needs_propensity() {
            Some(estimate_propensity(
                spec.propensity.unwrap_or(cfg.propensity),
                &data,
                cfg,
            )?)
        } else {
            None
        };
        let mut per_seed = Vec::with_capacity(cfg.seeds);
        for s in 0..cfg.seeds {
            let train_cfg = TrainConfig {
                seed: cfg.seed_offset + s as u64,
                ..cfg.train
            };
            let val = data.validation.as_ref();
            let model = match spec.method {
                Method::Mf => train_mf(&data.train, &train_cfg, val)?,
                Method::MfIps => train_mf_ips(&data.train, propensity.as_ref().expect("estimated"), &train_cfg, val)?,
                Method::MfDr => train_mf_dr(
                    &data.train,
                    propensity.as_ref().expect("estimated"),
                    &train_cfg,
                    Imputation::Learned,
                    val,
                )?,
                Method::Cause => train_cause(&data.train, cause_mcar.as_ref().expect("sampled"), &train_cfg, val)?,
                Method::Damf => {
                    let mut opts = DamfOptions::for_data(&data.train)?;
                    opts.bound = crate::model::BoundConfig::for_scale(&data.train.scale(), cfg.confidence)?;
                    opts.true_ratings = data.true_ratings.as_ref();
                    let first = damf_trace.is_none();
                    opts.trace_ascent_steps = if first { cfg.trace_ascent_steps } else { 0 };
                    opts.trace_step_size = cfg.trace_step_size;
                    let (model, trace) = train_damf(&data.train, &train_cfg, &opts, val)?;
                    if first {
                        damf_trace = Some(trace);
                    }
                    model
                }
            };
            let values = evaluate(&model, &data, cfg.k, &cfg.ranking)?;
            log::info!("{} seed {}: {:?}", spec.label(), train_cfg.seed, values);
            per_seed.push(values);
        }
        reports.push(MetricReport {
            method: spec.label(),
            k: cfg.k,
            per_seed,
        });
    }
    Ok(ExperimentResult {
        reports,
        damf_trace,
        stats,
    })
}

pub const RESULTS_HEADER: &str =
    "method,k,seeds,mse_mean,mse_sd,ndcg_mean,ndcg_sd,recall_mean,recall_sd,ideal_mse_mean,ideal_mse_sd";

/// One row per method: mean and standard deviation of each metric.
pub fn format_results(reports: &[MetricReport]) -> String {
    let mut out = String::from(RESULTS_HEADER);
    out.push('\n');
    for r in reports {
        let (mse, ndcg, recall) = (r.mse(), r.ndcg(), r.recall());
        let _ = write!(
            out,
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.method,
            r.k,
            r.per_seed.len(),
            mse.mean,
            mse.sd,
            ndcg.mean,
            ndcg.sd,
            recall.mean,
            recall.sd
        );
        match r.ideal_mse() {
            Some(s) => {
                let _ = writeln!(out, ",{:.6},{:.6}", s.mean, s.sd);
            }
            None => out.push_str(",,\n"),
        }
    }
    out
}

/// Every seed's metrics, one row each.
pub fn format_per_seed(reports: &[MetricReport], seed_offset: u64) -> String {
    let mut out = String::from("method,seed,mse,ndcg,recall,ideal_mse\n");
    for r in reports {
        for (s, v) in r.per_seed.iter().enumerate() {
            let ideal = v.ideal_mse.map(|x| format!("{x:.6}")).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{:.6},{:.6},{:.6},{}",
                r.method,
                seed_offset + s as u64,
                v.mse,
                v.ndcg,
                v.recall,
                ideal
            );
        }
    }
    out
}

pub fn format_stats(stats: &DatasetStats) -> String {
    format!(
        "num_users,num_items,num_ratings,sparsity,mean_train,mean_test,kl_divergence,kl_reverse\n{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
        stats.num_users,
        stats.num_items,
        stats.num_ratings,
        stats.sparsity,
        stats.mean_train,
        stats.mean_test,
        stats.kl_divergence,
        stats.kl_reverse
    )
}

/// Writes `results.csv`, `per_seed.csv`, `stats.csv` and, when DAMF ran,
/// `damf_trace.csv` into `out_dir`. Returns the written paths.
pub fn write_experiment(
    result: &ExperimentResult,
    cfg: &ExperimentConfig,
    out_dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>> {
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = vec![
        ("results.csv", format_results(&result.reports)),
        ("per_seed.csv", format_per_seed(&result.reports, cfg.seed_offset)),
        ("stats.csv", format_stats(&result.stats)),
    ];
    if let Some(trace) = &result.damf_trace {
        files.push(("damf_trace.csv", format_trace(trace)));
    }
    let mut written = Vec::new();
    for (name, text) in files {
        let path = dir.join(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}
