use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use damf_core::estimators::ideal_loss_clipped;
use damf_core::experiment::{
    estimate_propensity, prepare_data, run_experiment, write_experiment, DataSource, ExperimentConfig, PreparedData,
    PropensityKind,
};
use damf_core::io::{
    data_path, format_trace, load_triples, read_matrix, read_model, read_propensity, write_matrix, write_model,
    write_propensity, write_triples, TRACE_HEADER,
};
use damf_core::metrics::{mse, ndcg_at_k_with, recall_at_k_with, Gain, RankingOptions, RankingUniverse};
use damf_core::model::BoundConfig;
use damf_core::trainers::{
    init_adversary, trace_bound, train_cause, train_damf, train_mf, train_mf_dr, train_mf_ips, DamfOptions, Imputation,
    Method, TrainTrace,
};
use damf_core::{InteractionSet, RatingScale};

#[derive(Parser)]
#[command(
    name = "damf",
    version,
    about = "Debiased matrix factorization for MNAR explicit feedback"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write it (plus the bound trace for damf).
    Train(TrainArgs),
    /// Score a saved model on a test file.
    Evaluate(EvaluateArgs),
    /// Estimate propensities for a training file.
    EstimatePropensity(PropensityArgs),
    /// Write a synthetic world: train/test triples, true ratings, propensities.
    GenerateSynthetic(SynthArgs),
    /// Run every method of a config over several seeds.
    RunExperiment(ExperimentArgs),
    /// Evaluate the four bound components for a saved model.
    TraceBound(TraceArgs),
}

#[derive(Args, Clone, Copy)]
struct Dims {
    /// Number of users (defaults to the largest index seen).
    #[arg(long)]
    num_users: Option<usize>,
    /// Number of items (defaults to the largest index seen).
    #[arg(long)]
    num_items: Option<usize>,
}

impl Dims {
    fn get(self) -> Result<Option<(usize, usize)>> {
        match (self.num_users, self.num_items) {
            (None, None) => Ok(None),
            (Some(m), Some(n)) => Ok(Some((m, n))),
            _ => bail!("give both --num-users and --num-items or neither"),
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    method: Method,
    /// Training triples.
    #[arg(long)]
    data: PathBuf,
    /// Flat key = value file with training settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Propensity estimator for mf-ips and mf-dr (overrides the config).
    #[arg(long)]
    propensity: Option<PropensityKind>,
    /// Dense propensity matrix file; takes precedence over --propensity.
    #[arg(long)]
    propensity_file: Option<PathBuf>,
    /// MCAR triples, required by cause and by the nb-true estimator.
    #[arg(long)]
    mcar: Option<PathBuf>,
    /// Validation triples for early stopping.
    #[arg(long)]
    validation: Option<PathBuf>,
    /// True rating matrix; adds the ideal loss to the damf trace.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[command(flatten)]
    dims: Dims,
}

#[derive(Clone, Copy, ValueEnum)]
enum GainArg {
    PowMinusOne,
    PowThenMinusOne,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, value_enum, default_value = "pow-minus-one")]
    gain: GainArg,
    /// Rank each user's test items against the whole catalog.
    #[arg(long)]
    full_catalog: bool,
    /// True rating matrix for the ideal MSE.
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Args)]
struct PropensityArgs {
    #[arg(long)]
    method: PropensityKind,
    #[arg(long)]
    data: PathBuf,
    /// MCAR triples for nb-true.
    #[arg(long)]
    mcar: Option<PathBuf>,
    /// 1BitMC settings and other keys, as in experiment configs.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "propensity.txt")]
    out: PathBuf,
    #[command(flatten)]
    dims: Dims,
}

#[derive(Args)]
struct SynthArgs {
    /// Synthetic keys of the experiment config format.
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "synthetic")]
    out: PathBuf,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed_offset.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's k.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value = "results")]
    out: PathBuf,
}

#[derive(Args)]
struct TraceArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Starting adversary; a fresh one is drawn from --seed otherwise.
    #[arg(long)]
    adversary: Option<PathBuf>,
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long, default_value_t = 0.05)]
    delta: f64,
    #[arg(long, default_value_t = 500)]
    ascent_steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the record as CSV here instead of printing it.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load(path: &Path, dims: Option<(usize, usize)>) -> Result<InteractionSet> {
    let path = data_path(path);
    load_triples(&path, RatingScale::five_star(), dims).with_context(|| format!("loading {}", path.display()))
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::from_file(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(ExperimentConfig::default()),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Wraps a bare training set so the propensity estimators can run on it.
fn as_prepared(train: InteractionSet, mcar: Option<InteractionSet>) -> PreparedData {
    let test = mcar.unwrap_or_else(|| train.clone());
    PreparedData {
        train,
        validation: None,
        test,
        true_ratings: None,
        true_propensity: None,
    }
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(kind) = args.propensity {
        cfg.propensity = kind;
    }
    let dims = args.dims.get()?;
    let data = load(&args.data, dims)?;
    let (m, n) = data.dims();
    let mcar = args.mcar.as_deref().map(|p| load(p, Some((m, n)))).transpose()?;
    let validation = args.validation.as_deref().map(|p| load(p, Some((m, n)))).transpose()?;
    let truth = args.truth.as_deref().map(read_matrix).transpose()?;

    let propensity = if args.method.needs_propensity() {
        Some(match &args.propensity_file {
            Some(p) => read_propensity(p)?,
            None => {
                if cfg.propensity == PropensityKind::NbTrue && mcar.is_none() {
                    bail!("the nb-true estimator needs --mcar");
                }
                estimate_propensity(cfg.propensity, &as_prepared(data.clone(), mcar.clone()), &cfg)?
            }
        })
    } else {
        None
    };

    let val = validation.as_ref();
    let mut trace: Option<TrainTrace> = None;
    let model = match args.method {
        Method::Mf => train_mf(&data, &cfg.train, val)?,
        Method::MfIps => train_mf_ips(&data, propensity.as_ref().expect("estimated"), &cfg.train, val)?,
        Method::MfDr => train_mf_dr(
            &data,
            propensity.as_ref().expect("estimated"),
            &cfg.train,
            Imputation::Learned,
            val,
        )?,
        Method::Cause => {
            let Some(mcar) = &mcar else {
                bail!("cause needs --mcar");
            };
            train_cause(&data, mcar, &cfg.train, val)?
        }
        Method::Damf => {
            let mut opts = DamfOptions::for_data(&data)?;
            opts.bound = BoundConfig::for_scale(&data.scale(), cfg.confidence)?;
            opts.true_ratings = truth.as_ref();
            opts.trace_ascent_steps = cfg.trace_ascent_steps;
            opts.trace_step_size = cfg.trace_step_size;
            let (model, t) = train_damf(&data, &cfg.train, &opts, val)?;
            trace = Some(t);
            model
        }
    };

    create_dir(&args.out)?;
    let model_path = args.out.join("model.txt");
    write_model(&model_path, &model)?;
    println!("wrote {}", model_path.display());
    if let Some(t) = trace {
        let trace_path = args.out.join("trace.csv");
        fs::write(&trace_path, format_trace(&t)).with_context(|| format!("writing {}", trace_path.display()))?;
        println!("wrote {}", trace_path.display());
    }
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let model = read_model(&args.model)?;
    let test = load(&args.test, Some((model.num_users(), model.num_items())))?;
    let opts = RankingOptions {
        gain: match args.gain {
            GainArg::PowMinusOne => Gain::PowMinusOne,
            GainArg::PowThenMinusOne => Gain::PowThenMinusOne,
        },
        universe: if args.full_catalog {
            RankingUniverse::FullCatalog
        } else {
            RankingUniverse::TestItems
        },
    };
    println!("mse\t{:.6}", mse(&test, &model)?);
    println!("ndcg@{}\t{:.6}", args.k, ndcg_at_k_with(&test, &model, args.k, &opts)?);
    println!(
        "recall@{}\t{:.6}",
        args.k,
        recall_at_k_with(&test, &model, args.k, &opts)?
    );
    if let Some(truth) = &args.truth {
        let truth = read_matrix(truth)?;
        println!("ideal_mse\t{:.6}", ideal_loss_clipped(&truth, &model, &test.scale())?);
    }
    Ok(())
}

fn cmd_propensity(args: PropensityArgs) -> Result<()> {
    let cfg = load_config(args.config.as_deref())?;
    let data = load(&args.data, args.dims.get()?)?;
    let (m, n) = data.dims();
    let mcar = args.mcar.as_deref().map(|p| load(p, Some((m, n)))).transpose()?;
    match args.method {
        PropensityKind::NbTrue if mcar.is_none() => bail!("nb-true needs --mcar"),
        PropensityKind::True => bail!("true propensities exist only for synthetic worlds (see generate-synthetic)"),
        _ => {}
    }
    let p = estimate_propensity(args.method, &as_prepared(data, mcar), &cfg)?;
    write_propensity(&args.out, &p, m, n)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn cmd_synthetic(args: SynthArgs) -> Result<()> {
    let mut cfg = load_config(Some(&args.spec))?;
    if let DataSource::Synthetic { spec, .. } = &mut cfg.source {
        if let Some(seed) = args.seed {
            spec.seed = seed;
        }
    } else {
        bail!("generate-synthetic needs a synthetic spec (dataset = synthetic)");
    }
    let data = prepare_data(&cfg)?;
    create_dir(&args.out)?;
    let out = &args.out;
    write_triples(out.join("train.txt"), &data.train)?;
    if let Some(val) = &data.validation {
        write_triples(out.join("validation.txt"), val)?;
    }
    write_triples(out.join("test.txt"), &data.test)?;
    write_matrix(
        out.join("true_ratings.txt"),
        data.true_ratings.as_ref().expect("synthetic"),
    )?;
    write_matrix(
        out.join("propensity.txt"),
        data.true_propensity.as_ref().expect("synthetic"),
    )?;
    println!(
        "wrote {} training and {} test ratings to {}",
        data.train.len(),
        data.test.len(),
        out.display()
    );
    Ok(())
}

fn cmd_experiment(args: ExperimentArgs) -> Result<()> {
    let mut cfg = load_config(Some(&args.config))?;
    if let Some(seed) = args.seed {
        cfg.seed_offset = seed;
    }
    if let Some(k) = args.k {
        cfg.k = k;
    }
    let result = run_experiment(&cfg)?;
    for r in &result.reports {
        let (m, nd, rc) = (r.mse(), r.ndcg(), r.recall());
        let ideal = r
            .ideal_mse()
            .map(|s| format!("  ideal-MSE {:.4} (±{:.4})", s.mean, s.sd))
            .unwrap_or_default();
        println!(
            "{:<16} MSE {:.4} (±{:.4})  NDCG@{k} {:.4} (±{:.4})  Recall@{k} {:.4} (±{:.4}){ideal}",
            r.method,
            m.mean,
            m.sd,
            nd.mean,
            nd.sd,
            rc.mean,
            rc.sd,
            k = r.k
        );
    }
    for path in write_experiment(&result, &cfg, &args.out)? {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_trace(args: TraceArgs) -> Result<()> {
    let model = read_model(&args.model)?;
    let data = load(&args.data, Some((model.num_users(), model.num_items())))?;
    let truth = args.truth.as_deref().map(read_matrix).transpose()?;
    let mut opts = DamfOptions::for_data(&data)?;
    opts.bound = BoundConfig::for_scale(&data.scale(), args.delta)?;
    opts.true_ratings = truth.as_ref();
    opts.trace_ascent_steps = args.ascent_steps;
    let (m, n) = data.dims();
    let adversary = match &args.adversary {
        Some(p) => read_model(p)?,
        None => init_adversary(m, n, model.dim(), args.seed, &opts),
    };
    let record = trace_bound(
        0,
        &model,
        &adversary,
        &data,
        &opts,
        &mut damf_core::model::rng_stream(args.seed, 5),
    )?;
    let text = format_trace(&TrainTrace { records: vec![record] });
    match &args.out {
        Some(path) => {
            fs::write(path, &text).with_context(|| format!("writing {}", path.display()))?;
            println!("wrote {}", path.display());
        }
        None => {
            let values = text.lines().nth(1).unwrap_or_default();
            for (name, value) in TRACE_HEADER.split(',').zip(values.split(',')).skip(1) {
                println!("{name}\t{value}");
            }
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::EstimatePropensity(a) => cmd_propensity(a),
        Command::GenerateSynthetic(a) => cmd_synthetic(a),
        Command::RunExperiment(a) => cmd_experiment(a),
        Command::TraceBound(a) => cmd_trace(a),
    }
}
