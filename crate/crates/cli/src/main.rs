//! `nais`: train, evaluate and inspect FISM / NAIS item-based recommenders.

use std::collections::HashSet;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nais_core::baselines::{ItemKnn, Popularity};
use nais_core::dataio::{
    dataset_from_interactions, load_ncf_prefix, parse_raw_interactions, write_ncf_dataset, DataError, Dataset, ItemId,
    UserId,
};
use nais_core::evaluator::{attention_stats, evaluate, explain, EvalError, Scorer};
use nais_core::model::{
    logit_evaluations, nais_predict_for_user, nais_score, refresh_prediction, ModelError, ModelParams, NaisParams,
};
use nais_core::store::{load_model, save_model, StoreError};
use nais_core::synthetic::{generate, SyntheticConfig};
use nais_core::trainer::{train_fism_with, train_nais_with, EpochLog, ModelKind, TrainConfig, TrainError};

#[derive(Parser)]
#[command(
    name = "nais",
    version,
    about = "Item-based collaborative filtering with FISM and NAIS"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a FISM or NAIS model and save it.
    Train(TrainArgs),
    /// Leave-one-out HR@K / NDCG@K of a saved model or a baseline.
    Eval(EvalArgs),
    /// Attention breakdown of one (user, item) prediction.
    Explain(ExplainArgs),
    /// Per-prediction attention mean and variance as CSV.
    Stats(StatsArgs),
    /// Stream interactions into a cached prediction, checking it against full recomputation.
    RefreshDemo(RefreshArgs),
    /// Turn a raw rating log into leave-one-out dataset files.
    Prepare(PrepareArgs),
    /// Write a synthetic dataset in the processed file format.
    Synth(SynthArgs),
}

#[derive(Args)]
struct DataArg {
    /// Dataset prefix: reads PREFIX.train.rating, PREFIX.test.rating, PREFIX.test.negative.
    #[arg(long)]
    data: PathBuf,
}

fn unit_interval(s: &str) -> Result<f64, String> {
    let x: f64 = s.parse().map_err(|_| format!("{s:?} is not a number"))?;
    if (0.0..=1.0).contains(&x) {
        Ok(x)
    } else {
        Err(format!("{x} is outside [0, 1]"))
    }
}

fn positive_real(s: &str) -> Result<f64, String> {
    let x: f64 = s.parse().map_err(|_| format!("{s:?} is not a number"))?;
    if x > 0.0 && x.is_finite() {
        Ok(x)
    } else {
        Err(format!("{x} must be positive"))
    }
}

fn non_negative_real(s: &str) -> Result<f64, String> {
    let x: f64 = s.parse().map_err(|_| format!("{s:?} is not a number"))?;
    if x >= 0.0 && x.is_finite() {
        Ok(x)
    } else {
        Err(format!("{x} must be non-negative"))
    }
}

fn model_kind(s: &str) -> Result<ModelKind, String> {
    s.parse().map_err(|e: TrainError| e.to_string())
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArg,
    /// fism, nais-prod or nais-concat.
    #[arg(long, default_value = "nais-prod", value_parser = model_kind)]
    model: ModelKind,
    /// Embedding size.
    #[arg(long, default_value_t = 16, value_parser = clap::value_parser!(u64).range(1..))]
    k: u64,
    /// Hidden size of the attention network.
    #[arg(long, default_value_t = 16, value_parser = clap::value_parser!(u64).range(1..))]
    attention_factor: u64,
    /// FISM history normalization exponent.
    #[arg(long, default_value_t = 0.0, value_parser = unit_interval)]
    alpha: f64,
    /// Softmax smoothing exponent.
    #[arg(long, default_value_t = 0.5, value_parser = unit_interval)]
    beta: f64,
    /// L2 regularization strength.
    #[arg(long, default_value_t = 0.0, value_parser = non_negative_real)]
    lambda: f64,
    /// Adagrad learning rate.
    #[arg(long, default_value_t = 0.01, value_parser = positive_real)]
    lr: f64,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    /// Negatives sampled per positive.
    #[arg(long, default_value_t = 4)]
    neg_ratio: usize,
    /// Cutoff of the per-epoch evaluation.
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
    topk: u64,
    /// Skip the per-epoch evaluation.
    #[arg(long)]
    no_eval: bool,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// FISM model file whose embeddings initialize a NAIS model.
    #[arg(long)]
    pretrain: Option<PathBuf>,
    /// Where to write the trained model.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    Pop,
    Itemknn,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArg,
    /// Saved model file.
    #[arg(long, required_unless_present = "baseline", conflicts_with = "baseline")]
    model: Option<PathBuf>,
    /// Evaluate a non-learned baseline instead of a model file.
    #[arg(long, value_enum)]
    baseline: Option<Baseline>,
    /// Keep only the strongest neighbours per item for itemknn.
    #[arg(long)]
    neighbors: Option<usize>,
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
    topk: u64,
}

#[derive(Args)]
struct ExplainArgs {
    #[command(flatten)]
    data: DataArg,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    user: UserId,
    /// Target item; defaults to the user's test item.
    #[arg(long)]
    item: Option<ItemId>,
}

#[derive(Args)]
struct StatsArgs {
    #[command(flatten)]
    data: DataArg,
    /// NAIS model file.
    #[arg(long)]
    model: PathBuf,
    /// CSV destination; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RefreshArgs {
    #[command(flatten)]
    data: DataArg,
    /// NAIS model file.
    #[arg(long)]
    model: PathBuf,
    /// Watched user.
    #[arg(long)]
    user: UserId,
    /// Watched candidate item.
    #[arg(long)]
    item: ItemId,
    /// Interaction stream, one `user item` pair per line. Without it, random
    /// unseen items of the watched user are streamed.
    #[arg(long)]
    events: Option<PathBuf>,
    /// Number of generated events when no stream file is given.
    #[arg(long, default_value_t = 1000)]
    num_events: usize,
    /// Compare against full recomputation every this many refreshes.
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
    check_every: u64,
    /// Allowed |cached − full| / max(1, |full|).
    #[arg(long, default_value_t = 1e-8, value_parser = positive_real)]
    tolerance: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct PrepareArgs {
    /// Raw log with `user item rating timestamp` rows (`::`, tab or comma separated).
    #[arg(long)]
    raw: PathBuf,
    /// Output prefix.
    #[arg(long)]
    out: PathBuf,
    /// Seed for the evaluation negatives.
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 600)]
    users: usize,
    #[arg(long, default_value_t = 800)]
    items: usize,
    #[arg(long, default_value_t = 40)]
    topics: usize,
    #[arg(long, default_value_t = 25.0, value_parser = positive_real)]
    median_history: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

/// Failure classes with their process exit codes.
#[derive(Debug)]
enum CliError {
    /// Inconsistent flags or an unusable model file for the command.
    Usage(String),
    Diverged(String),
    /// A user or item outside the dataset or model.
    Unknown(String),
    Other(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Other(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Diverged(_) => 3,
            CliError::Unknown(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Diverged(m) | CliError::Unknown(m) | CliError::Other(m) => m,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Other(e.to_string())
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        CliError::Other(e.to_string())
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::ItemOutOfRange { .. } => CliError::Unknown(e.to_string()),
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Model(m) => m.into(),
            EvalError::UnknownUser(_) | EvalError::EmptyHistory(_) => CliError::Unknown(e.to_string()),
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. } | TrainError::NonFiniteGradient { .. } => CliError::Diverged(e.to_string()),
            TrainError::Config(_) => CliError::Usage(e.to_string()),
            TrainError::Model(m) => m.into(),
            TrainError::Eval(m) => m.into(),
            TrainError::Data(d) => d.into(),
        }
    }
}

fn banner(out: &mut impl Write, command: &str, fields: &[(&str, String)]) -> io::Result<()> {
    writeln!(out, "# nais {command}")?;
    for (key, value) in fields {
        writeln!(out, "# {key}={value}")?;
    }
    Ok(())
}

fn load_data(arg: &DataArg) -> Result<Dataset, CliError> {
    Ok(load_ncf_prefix(&arg.data)?)
}

fn data_fields(arg: &DataArg, ds: &Dataset) -> Vec<(&'static str, String)> {
    vec![
        ("data", arg.data.display().to_string()),
        ("users", ds.num_users.to_string()),
        ("items", ds.num_items.to_string()),
        ("train_interactions", ds.num_train_interactions().to_string()),
    ]
}

fn load_nais(path: &PathBuf) -> Result<NaisParams, CliError> {
    match load_model(path)? {
        ModelParams::Nais(p) => Ok(p),
        ModelParams::Fism(_) => Err(CliError::Usage(format!(
            "{} holds a FISM model; this command needs a NAIS model",
            path.display()
        ))),
    }
}

fn check_user(ds: &Dataset, user: UserId) -> Result<(), CliError> {
    if (user as usize) < ds.num_users {
        Ok(())
    } else {
        Err(CliError::Unknown(format!(
            "unknown user {user} (dataset has {} users)",
            ds.num_users
        )))
    }
}

fn check_item(num_items: usize, item: ItemId) -> Result<(), CliError> {
    if (item as usize) < num_items {
        Ok(())
    } else {
        Err(CliError::Unknown(format!(
            "unknown item {item} (model covers {num_items} items)"
        )))
    }
}

fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    let ds = load_data(&args.data)?;
    let cfg = TrainConfig {
        model: args.model,
        k: args.k as usize,
        attention_factor: args.attention_factor as usize,
        alpha: args.alpha,
        beta: args.beta,
        lambda: args.lambda,
        lr: args.lr,
        epochs: args.epochs,
        neg_ratio: args.neg_ratio,
        seed: args.seed,
        eval_top_k: (!args.no_eval).then_some(args.topk as usize),
    };
    cfg.validate()?;
    let pretrain = match (&args.pretrain, cfg.model) {
        (None, _) => None,
        (Some(_), ModelKind::Fism) => {
            return Err(CliError::Usage("--pretrain only applies to NAIS models".into()));
        }
        (Some(path), _) => match load_model(path)? {
            ModelParams::Fism(f) => Some(f),
            ModelParams::Nais(_) => {
                return Err(CliError::Usage(format!("{} is not a FISM model", path.display())));
            }
        },
    };

    let stdout = io::stdout();
    let mut out = stdout.lock();
    let mut fields = data_fields(&args.data, &ds);
    fields.extend([
        ("model", cfg.model.to_string()),
        ("k", cfg.k.to_string()),
        ("attention_factor", cfg.attention_factor.to_string()),
        ("alpha", cfg.alpha.to_string()),
        ("beta", cfg.beta.to_string()),
        ("lambda", cfg.lambda.to_string()),
        ("lr", cfg.lr.to_string()),
        ("epochs", cfg.epochs.to_string()),
        ("neg_ratio", cfg.neg_ratio.to_string()),
        ("topk", cfg.eval_top_k.map_or("off".into(), |k| k.to_string())),
        ("seed", cfg.seed.to_string()),
        ("init_seed", cfg.init_seed().to_string()),
        ("epoch1_sampling_seed", cfg.sampling_seed(1).to_string()),
        ("epoch1_shuffle_seed", cfg.shuffle_seed(1).to_string()),
        (
            "pretrain",
            args.pretrain
                .as_ref()
                .map_or("none".into(), |p| p.display().to_string()),
        ),
        ("out", args.out.display().to_string()),
    ]);
    banner(&mut out, "train", &fields)?;
    let k = cfg.eval_top_k.unwrap_or(10);
    writeln!(out, "# epoch\tloss\tseconds\thr@{k}\tndcg@{k}")?;

    let mut print = |log: &EpochLog| {
        let _ = writeln!(out, "{log}");
        let _ = out.flush();
    };
    let params = match cfg.model {
        ModelKind::Fism => ModelParams::Fism(train_fism_with(&ds, &cfg, |log, _| print(log))?.params),
        ModelKind::Nais(_) => {
            ModelParams::Nais(train_nais_with(&ds, &cfg, pretrain.as_ref(), |log, _| print(log))?.params)
        }
    };
    save_model(&params, &args.out)?;
    Ok(())
}

fn report(model: &dyn Scorer, ds: &Dataset, k: usize) -> Result<String, CliError> {
    Ok(evaluate(model, ds, k)?.to_string())
}

fn cmd_eval(args: &EvalArgs) -> Result<(), CliError> {
    let ds = load_data(&args.data)?;
    let k = args.topk as usize;
    let mut fields = data_fields(&args.data, &ds);
    fields.push(("topk", k.to_string()));
    let text = match (&args.model, args.baseline) {
        (Some(path), _) => {
            let params = load_model(path)?;
            fields.push(("model", path.display().to_string()));
            report(&params, &ds, k)?
        }
        (None, Some(Baseline::Pop)) => {
            fields.push(("baseline", "pop".into()));
            report(&Popularity::fit(&ds), &ds, k)?
        }
        (None, Some(Baseline::Itemknn)) => {
            fields.push(("baseline", "itemknn".into()));
            fields.push(("neighbors", args.neighbors.map_or("all".into(), |n| n.to_string())));
            report(&ItemKnn::fit(&ds, args.neighbors), &ds, k)?
        }
        (None, None) => return Err(CliError::Usage("pass --model or --baseline".into())),
    };
    let stdout = io::stdout();
    let mut out = stdout.lock();
    banner(&mut out, "eval", &fields)?;
    writeln!(out, "{text}")?;
    Ok(())
}

fn cmd_explain(args: &ExplainArgs) -> Result<(), CliError> {
    let ds = load_data(&args.data)?;
    let params = load_model(&args.model)?;
    check_user(&ds, args.user)?;
    let target = match args.item {
        Some(i) => i,
        None => ds
            .test_pairs
            .iter()
            .find(|(u, _)| *u == args.user)
            .map(|(_, i)| *i)
            .ok_or_else(|| CliError::Usage(format!("user {} has no test item; pass --item", args.user)))?,
    };
    check_item(params.num_items(), target)?;
    let ex = explain(&params, &ds, args.user, target)?;
    let stdout = io::stdout();
    let mut out = stdout.lock();
    let mut fields = data_fields(&args.data, &ds);
    fields.push(("model", args.model.display().to_string()));
    banner(&mut out, "explain", &fields)?;
    writeln!(out, "{ex}")?;
    Ok(())
}

fn cmd_stats(args: &StatsArgs) -> Result<(), CliError> {
    let ds = load_data(&args.data)?;
    let params = load_nais(&args.model)?;
    let stats = attention_stats(&params, &ds)?;
    let sink: Box<dyn Write> = match &args.out {
        Some(path) => Box::new(fs::File::create(path)?),
        None => Box::new(io::stdout().lock()),
    };
    let mut sink = BufWriter::new(sink);
    writeln!(sink, "user,item,mean,variance")?;
    for s in &stats {
        writeln!(sink, "{},{},{:e},{:e}", s.user, s.item, s.mean, s.variance)?;
    }
    sink.flush()?;
    Ok(())
}

fn read_events(path: &PathBuf) -> Result<Vec<(UserId, ItemId)>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Other(format!("{}: {e}", path.display())))?;
    let mut events = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|f| !f.is_empty());
        let mut next = || -> Result<u32, CliError> {
            fields
                .next()
                .and_then(|f| f.parse().ok())
                .ok_or_else(|| CliError::Other(format!("{}:{}: expected `user item`", path.display(), idx + 1)))
        };
        events.push((next()?, next()?));
    }
    Ok(events)
}

fn generated_events(ds: &Dataset, user: UserId, candidate: ItemId, count: usize, seed: u64) -> Vec<(UserId, ItemId)> {
    let mut pool: Vec<ItemId> = {
        let seen: HashSet<ItemId> = ds.history(user).iter().copied().collect();
        (0..ds.num_items as ItemId)
            .filter(|i| *i != candidate && !seen.contains(i))
            .collect()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let take = count.min(pool.len());
    for n in 0..take {
        let swap = rng.random_range(n..pool.len());
        pool.swap(n, swap);
    }
    pool[..take].iter().map(|&i| (user, i)).collect()
}

fn cmd_refresh_demo(args: &RefreshArgs) -> Result<(), CliError> {
    let ds = load_data(&args.data)?;
    let params = load_nais(&args.model)?;
    check_user(&ds, args.user)?;
    check_item(params.num_items(), args.item)?;
    let events = match &args.events {
        Some(path) => read_events(path)?,
        None => generated_events(&ds, args.user, args.item, args.num_events, args.seed),
    };

    let stdout = io::stdout();
    let mut out = stdout.lock();
    let mut fields = data_fields(&args.data, &ds);
    fields.extend([
        ("model", args.model.display().to_string()),
        ("user", args.user.to_string()),
        ("item", args.item.to_string()),
        (
            "events",
            args.events
                .as_ref()
                .map_or(format!("generated:{}", events.len()), |p| p.display().to_string()),
        ),
        ("check_every", args.check_every.to_string()),
        ("tolerance", args.tolerance.to_string()),
        ("seed", args.seed.to_string()),
    ]);
    banner(&mut out, "refresh-demo", &fields)?;

    let mut history: Vec<ItemId> = ds.history(args.user).to_vec();
    let (initial, mut cache) = nais_predict_for_user(&params, args.user, &history, args.item)?;
    writeln!(out, "initial\t{initial:.12e}")?;
    writeln!(out, "# step\tcached\tfull\trel_diff")?;
    let (mut refreshes, mut skipped, mut checks, mut failures, mut refresh_logits) = (0u64, 0u64, 0u64, 0u64, 0u64);
    let mut score = initial;
    for &(user, item) in &events {
        if user != args.user {
            skipped += 1;
            continue;
        }
        check_item(params.num_items(), item)?;
        if item == args.item || cache.contains(item) {
            skipped += 1;
            continue;
        }
        let before = logit_evaluations();
        score = refresh_prediction(&params, &mut cache, item)?;
        refresh_logits += logit_evaluations() - before;
        history.push(item);
        refreshes += 1;
        if refreshes % args.check_every == 0 {
            let full = nais_score(&params, &history, args.item)?;
            let diff = (score - full).abs() / full.abs().max(1.0);
            checks += 1;
            if diff > args.tolerance {
                failures += 1;
            }
            writeln!(out, "{refreshes}\t{score:.12e}\t{full:.12e}\t{diff:.3e}")?;
        }
    }
    writeln!(out, "final\t{score:.12e}")?;
    writeln!(out, "refreshes\t{refreshes}")?;
    writeln!(out, "skipped\t{skipped}")?;
    writeln!(
        out,
        "logits_per_refresh\t{}",
        if refreshes == 0 {
            0.0
        } else {
            refresh_logits as f64 / refreshes as f64
        }
    )?;
    writeln!(out, "checks\t{checks}")?;
    writeln!(out, "failures\t{failures}")?;
    if failures > 0 {
        return Err(CliError::Other(format!(
            "{failures} of {checks} checks exceeded the tolerance"
        )));
    }
    Ok(())
}

fn cmd_prepare(args: &PrepareArgs) -> Result<(), CliError> {
    let interactions = parse_raw_interactions(&args.raw)?;
    let ds = dataset_from_interactions(&interactions, args.seed)?;
    write_ncf_dataset(&ds, &args.out)?;
    let stdout = io::stdout();
    let mut out = stdout.lock();
    banner(
        &mut out,
        "prepare",
        &[
            ("raw", args.raw.display().to_string()),
            ("out", args.out.display().to_string()),
            ("seed", args.seed.to_string()),
            ("users", ds.num_users.to_string()),
            ("items", ds.num_items.to_string()),
            ("interactions", ds.num_interactions().to_string()),
        ],
    )?;
    Ok(())
}

fn cmd_synth(args: &SynthArgs) -> Result<(), CliError> {
    let cfg = SyntheticConfig {
        num_users: args.users,
        num_items: args.items,
        num_topics: args.topics,
        median_history: args.median_history,
        seed: args.seed,
        ..SyntheticConfig::default()
    };
    if cfg.num_topics == 0 || cfg.num_items < cfg.num_topics || cfg.num_items < cfg.min_history + 101 {
        return Err(CliError::Usage(format!(
            "need 1 <= topics <= items and at least {} items",
            cfg.min_history + 101
        )));
    }
    let ds = generate(&cfg)?;
    write_ncf_dataset(&ds, &args.out)?;
    let stdout = io::stdout();
    let mut out = stdout.lock();
    banner(
        &mut out,
        "synth",
        &[
            ("out", args.out.display().to_string()),
            ("users", ds.num_users.to_string()),
            ("items", ds.num_items.to_string()),
            ("topics", cfg.num_topics.to_string()),
            ("median_history", cfg.median_history.to_string()),
            ("seed", cfg.seed.to_string()),
            ("interactions", ds.num_interactions().to_string()),
        ],
    )?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Explain(a) => cmd_explain(a),
        Command::Stats(a) => cmd_stats(a),
        Command::RefreshDemo(a) => cmd_refresh_demo(a),
        Command::Prepare(a) => cmd_prepare(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}
