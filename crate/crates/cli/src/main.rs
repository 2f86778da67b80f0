//! Command-line surface: robust training, certification, cascades, the
//! estimator benchmark, and the ball-radius conversion.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 flag errors. Human-readable
//! summaries go to standard output; machine artifacts only to --out paths.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use certnet::autodual::Norm;
use certnet::certifier::{activation_input_sizes, epsilon_l2_equivalent, robust_error, EvalMode};
use certnet::io::{
    load_csv, load_idx, load_model, save_model, write_certificates, write_metrics, Dataset,
    ModelMeta,
};
use certnet::netgraph::{conv_net, mlp, NetworkGraph};
use certnet::projest::{median, plan_tail, sample_cauchy, splitmix64, DEFAULT_K_BUDGET};
use certnet::tensor::Tensor;
use certnet::trainer::{
    cascade_predict, cascade_train, train, Cascade, Optimizer, TrainConfig,
};

#[derive(Parser)]
#[command(name = "certnet", version, about = "Certified robustness training and verification")]
struct Cli {
    /// Worker threads for dataset-level certification; defaults to all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Robust training of a single model.
    Train(TrainArgs),
    /// Certify a trained model over a dataset.
    Certify(CertifyArgs),
    /// Train a cascade of models, each on what the previous could not certify.
    CascadeTrain(CascadeTrainArgs),
    /// Certified prediction for one input.
    Predict(PredictArgs),
    /// Benchmark the random-projection norm estimator.
    EstimateBench(BenchArgs),
    /// Convert an l-inf radius to the volume-equivalent l2 radius.
    ConvertEpsilon(ConvertArgs),
}

#[derive(Args, Clone)]
struct TrainArgs {
    /// mlp:D1-D2-...-DK, conv-small, wide:K, or deep:K
    #[arg(long)]
    arch: String,
    /// CSV file (label first) or a directory of IDX files.
    #[arg(long)]
    data: PathBuf,
    /// Held-out set; defaults to an 80/20 split of --data.
    #[arg(long)]
    test_data: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1, allow_hyphen_values = true)]
    epsilon: f64,
    /// Ramp start; defaults to epsilon (no ramp).
    #[arg(long, allow_hyphen_values = true)]
    epsilon_start: Option<f64>,
    #[arg(long, default_value_t = 0)]
    warmup_epochs: usize,
    #[arg(long, default_value = "linf")]
    norm: String,
    /// Number of random projections for the bound pass.
    #[arg(long, conflicts_with = "exact")]
    projection: Option<usize>,
    /// Exact bound computation (quadratic in width).
    #[arg(long)]
    exact: bool,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 50)]
    batch_size: usize,
    /// adam:LR or sgd:LR,MOMENTUM
    #[arg(long, default_value = "adam:0.001")]
    optimizer: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for model.json and metrics.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CertifyArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0.1, allow_hyphen_values = true)]
    epsilon: f64,
    #[arg(long, default_value = "linf")]
    norm: String,
    /// exact, median:R, or highprob:DELTA,M
    #[arg(long, default_value = "exact")]
    mode: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Certificate file path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CascadeTrainArgs {
    #[arg(long, default_value_t = 2)]
    stages: usize,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args)]
struct PredictArgs {
    /// Single model file.
    #[arg(long, conflicts_with = "cascade")]
    model: Option<PathBuf>,
    /// Cascade directory written by cascade-train.
    #[arg(long)]
    cascade: Option<PathBuf>,
    /// Comma-separated feature values.
    #[arg(long, allow_hyphen_values = true)]
    input: String,
    /// Ball radius; defaults to the radius stored in the model metadata.
    #[arg(long, allow_hyphen_values = true)]
    epsilon: Option<f64>,
}

#[derive(Args)]
struct BenchArgs {
    /// Projection counts, comma separated.
    #[arg(long, default_value = "10,50,100")]
    r: String,
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    /// Vector sizes, comma separated.
    #[arg(long, default_value = "100,200,400,800")]
    sizes: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV output path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ConvertArgs {
    #[arg(long)]
    dim: f64,
    #[arg(long, allow_hyphen_values = true)]
    epsilon_inf: f64,
}

enum CliError {
    /// Bad flag values: exit 2.
    Usage(String),
    /// Everything else: exit 1.
    Runtime(String),
}

impl From<certnet::Error> for CliError {
    fn from(e: certnet::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if rayon::ThreadPoolBuilder::new().num_threads(threads).build_global().is_err() {
            eprintln!("warning: thread pool already initialized");
        }
    }
    let result = match cli.cmd {
        Cmd::Train(a) => cmd_train(&a),
        Cmd::Certify(a) => cmd_certify(&a),
        Cmd::CascadeTrain(a) => cmd_cascade_train(&a),
        Cmd::Predict(a) => cmd_predict(&a),
        Cmd::EstimateBench(a) => cmd_estimate_bench(&a),
        Cmd::ConvertEpsilon(a) => cmd_convert_epsilon(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

// ---- flag parsing helpers --------------------------------------------------

fn parse_norm(s: &str) -> CliResult<Norm> {
    match s {
        "linf" => Ok(Norm::Linf),
        "l2" => Ok(Norm::L2),
        other => Err(CliError::Usage(format!("--norm must be linf or l2, got {other:?}"))),
    }
}

fn check_epsilon(eps: f64) -> CliResult<()> {
    if !(eps >= 0.0) {
        return Err(CliError::Usage(format!("--epsilon must be >= 0, got {eps}")));
    }
    Ok(())
}

fn parse_optimizer(s: &str) -> CliResult<Optimizer> {
    let bad = || CliError::Usage(format!("--optimizer must be adam:LR or sgd:LR,MOMENTUM, got {s:?}"));
    let (kind, rest) = s.split_once(':').ok_or_else(bad)?;
    match kind {
        "adam" => {
            let lr: f64 = rest.parse().map_err(|_| bad())?;
            Ok(Optimizer::Adam { lr, beta1: 0.9, beta2: 0.999 })
        }
        "sgd" => {
            let (lr, momentum) = match rest.split_once(',') {
                Some((l, m)) => (l.parse().map_err(|_| bad())?, m.parse().map_err(|_| bad())?),
                None => (rest.parse().map_err(|_| bad())?, 0.9),
            };
            Ok(Optimizer::Sgd { lr, momentum })
        }
        _ => Err(bad()),
    }
}

fn parse_usize_list(s: &str, flag: &str) -> CliResult<Vec<usize>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("{flag}: bad entry {:?}", p.trim())))
        })
        .collect()
}

/// exact | median:R | highprob:DELTA,M
fn parse_mode(s: &str, net: &NetworkGraph, seed: u64) -> CliResult<EvalMode> {
    if s == "exact" {
        return Ok(EvalMode::Exact);
    }
    if let Some(r) = s.strip_prefix("median:") {
        let r: usize = r
            .parse()
            .map_err(|_| CliError::Usage(format!("--mode median:R needs an integer, got {s:?}")))?;
        return Ok(EvalMode::Median { r, seed });
    }
    if let Some(rest) = s.strip_prefix("highprob:") {
        let bad = || CliError::Usage(format!("--mode highprob:DELTA,M, got {s:?}"));
        let (d, m) = rest.split_once(',').ok_or_else(bad)?;
        let delta: f64 = d.parse().map_err(|_| bad())?;
        let m: usize = m.parse().map_err(|_| bad())?;
        let sizes = activation_input_sizes(net)?;
        let plan = plan_tail(delta, &sizes, m, DEFAULT_K_BUDGET)?;
        println!(
            "tail_plan: n_estimates={} delta_hat={:.4} k={} eps_tail={}",
            plan.n_estimates, plan.delta_hat, plan.k, plan.eps_tail
        );
        return Ok(EvalMode::HighProb { plan, seed });
    }
    Err(CliError::Usage(format!("--mode must be exact, median:R, or highprob:DELTA,M, got {s:?}")))
}

// ---- data and architectures -------------------------------------------------

fn load_data(path: &Path, split: &str) -> CliResult<Dataset> {
    if path.extension().map(|e| e == "csv").unwrap_or(false) {
        return Ok(load_csv(path, false)?);
    }
    if path.is_dir() {
        let images = path.join(format!("{split}-images.idx"));
        let labels = path.join(format!("{split}-labels.idx"));
        return Ok(load_idx(&images, &labels)?);
    }
    Err(CliError::Runtime(format!("--data {}: not a csv file or IDX directory", path.display())))
}

fn classes_of(ds: &Dataset) -> usize {
    ds.ys.iter().copied().max().map(|m| m + 1).unwrap_or(2).max(2)
}

fn square_side(features: usize) -> CliResult<usize> {
    let side = (features as f64).sqrt().round() as usize;
    if side * side != features {
        return Err(CliError::Usage(format!(
            "convolutional architectures need square inputs, got {features} features"
        )));
    }
    Ok(side)
}

fn build_arch(spec: &str, features: usize, classes: usize, seed: u64) -> CliResult<NetworkGraph> {
    if let Some(dims) = spec.strip_prefix("mlp:") {
        let dims: Vec<usize> = dims
            .split('-')
            .map(|d| d.parse().map_err(|_| CliError::Usage(format!("--arch mlp: bad dims {spec:?}"))))
            .collect::<CliResult<_>>()?;
        if dims.len() < 2 {
            return Err(CliError::Usage("--arch mlp needs at least input-output dims".into()));
        }
        if dims[0] != features {
            return Err(CliError::Usage(format!(
                "--arch input dim {} does not match data features {}",
                dims[0], features
            )));
        }
        return Ok(mlp(&dims, seed)?);
    }
    if spec == "conv-small" {
        let side = square_side(features)?;
        return Ok(conv_net([1, side, side], [16, 32], 100, classes, seed)?);
    }
    if let Some(k) = spec.strip_prefix("wide:") {
        let k: usize = k.parse().map_err(|_| CliError::Usage(format!("--arch wide: bad K in {spec:?}")))?;
        let side = square_side(features)?;
        return Ok(conv_net([1, side, side], [4 * k, 8 * k], 128, classes, seed)?);
    }
    if let Some(k) = spec.strip_prefix("deep:") {
        let k: usize = k.parse().map_err(|_| CliError::Usage(format!("--arch deep: bad K in {spec:?}")))?;
        let mut dims = vec![features];
        dims.extend(std::iter::repeat(100).take(k.max(1)));
        dims.push(classes);
        return Ok(mlp(&dims, seed)?);
    }
    Err(CliError::Usage(format!(
        "--arch must be mlp:D-D-..., conv-small, wide:K, or deep:K, got {spec:?}"
    )))
}

fn train_config(a: &TrainArgs) -> CliResult<TrainConfig> {
    check_epsilon(a.epsilon)?;
    if a.batch_size == 0 {
        return Err(CliError::Usage("--batch-size must be >= 1".into()));
    }
    if let Some(r) = a.projection {
        if r == 0 {
            return Err(CliError::Usage("--projection must be >= 1".into()));
        }
    }
    let mut cfg = TrainConfig::new(parse_optimizer(&a.optimizer)?, a.epochs, a.epsilon);
    cfg.batch_size = a.batch_size;
    cfg.norm = parse_norm(&a.norm)?;
    cfg.projection = a.projection;
    cfg.seed = a.seed;
    if let Some(start) = a.epsilon_start {
        check_epsilon(start)?;
        if start > a.epsilon {
            return Err(CliError::Usage(format!(
                "--epsilon-start {start} above --epsilon {}",
                a.epsilon
            )));
        }
        cfg.eps_start = start;
    }
    cfg.eps_warmup_epochs = a.warmup_epochs;
    Ok(cfg)
}

fn split_data(a: &TrainArgs) -> CliResult<(Dataset, Dataset)> {
    let train_ds = load_data(&a.data, "train")?;
    if train_ds.is_empty() {
        return Err(CliError::Runtime(format!("{}: empty dataset", a.data.display())));
    }
    match &a.test_data {
        Some(p) => Ok((train_ds, load_data(p, "test")?)),
        None => {
            let cut = (train_ds.len() * 4 / 5).max(1);
            Ok((train_ds.slice(0, cut), train_ds.slice(cut.min(train_ds.len() - 1), train_ds.len())))
        }
    }
}

// ---- commands ---------------------------------------------------------------

fn cmd_train(a: &TrainArgs) -> CliResult<()> {
    let cfg = train_config(a)?;
    let (train_ds, test_ds) = split_data(a)?;
    let classes = classes_of(&train_ds).max(classes_of(&test_ds));
    let mut net = build_arch(&a.arch, train_ds.features(), classes, a.seed)?;

    std::fs::create_dir_all(&a.out).map_err(|e| CliError::Runtime(e.to_string()))?;
    let report = train(&mut net, &train_ds.xs, &train_ds.ys, &test_ds.xs, &test_ds.ys, &cfg)?;
    if report.diverged {
        eprintln!("warning: training diverged; wrote the last stable checkpoint");
    }
    let meta = ModelMeta::new(cfg.norm, cfg.eps_end, cfg.seed);
    save_model(&net, &meta, &a.out.join("model.json"), false)?;
    write_metrics(&report.metrics, &a.out.join("metrics.csv"))?;
    if let Some(last) = report.metrics.last() {
        println!(
            "trained {} epochs: test robust_error={} standard_error={}",
            report.metrics.len(),
            last.test_robust_error,
            last.test_standard_error
        );
    }
    Ok(())
}

fn cmd_certify(a: &CertifyArgs) -> CliResult<()> {
    check_epsilon(a.epsilon)?;
    let norm = parse_norm(&a.norm)?;
    let (net, _meta) = load_model(&a.model)?;
    let ds = load_data(&a.data, "test")?;
    if ds.is_empty() {
        return Err(CliError::Runtime(format!("{}: empty dataset", a.data.display())));
    }
    let mode = parse_mode(&a.mode, &net, a.seed)?;
    let report = robust_error(&net, &ds.xs, &ds.ys, a.epsilon, norm, &mode)?;
    if let Some(out) = &a.out {
        write_certificates(&report.certificates, out)?;
    }
    println!(
        "robust_error={} standard_error={} n={}",
        report.robust_error, report.standard_error, report.n
    );
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct CascadeManifest {
    epsilon: f64,
    norm: String,
    /// Stage model files in training order.
    stages: Vec<String>,
    trained_on: Vec<usize>,
    certified: Vec<usize>,
}

fn cmd_cascade_train(a: &CascadeTrainArgs) -> CliResult<()> {
    if a.stages == 0 {
        return Err(CliError::Usage("--stages must be >= 1".into()));
    }
    let cfg = train_config(&a.train)?;
    let (train_ds, test_ds) = split_data(&a.train)?;
    let classes = classes_of(&train_ds).max(classes_of(&test_ds));
    let nets = (0..a.stages)
        .map(|i| {
            build_arch(
                &a.train.arch,
                train_ds.features(),
                classes,
                splitmix64(a.train.seed ^ (i as u64 + 1)),
            )
        })
        .collect::<CliResult<Vec<_>>>()?;
    std::fs::create_dir_all(&a.train.out).map_err(|e| CliError::Runtime(e.to_string()))?;

    let cascade = cascade_train(nets, &train_ds.xs, &train_ds.ys, &cfg)?;
    let meta = ModelMeta::new(cfg.norm, cfg.eps_end, cfg.seed);
    let mut stage_files = Vec::new();
    for (i, stage) in cascade.stages.iter().enumerate() {
        let name = format!("stage{}.json", i + 1);
        save_model(stage, &meta, &a.train.out.join(&name), false)?;
        stage_files.push(name);
    }
    let manifest = CascadeManifest {
        epsilon: cascade.eps,
        norm: a.train.norm.clone(),
        stages: stage_files,
        trained_on: cascade.stats.iter().map(|s| s.trained_on).collect(),
        certified: cascade.stats.iter().map(|s| s.certified).collect(),
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Runtime(e.to_string()))?;
    std::fs::write(a.train.out.join("cascade.json"), text)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    println!(
        "cascade: {} stages, stage sizes {:?}",
        cascade.stages.len(),
        cascade.stats.iter().map(|s| s.trained_on).collect::<Vec<_>>()
    );
    Ok(())
}

fn load_cascade(dir: &Path) -> CliResult<Cascade> {
    let text = std::fs::read_to_string(dir.join("cascade.json"))
        .map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
    let manifest: CascadeManifest =
        serde_json::from_str(&text).map_err(|e| CliError::Runtime(e.to_string()))?;
    let mut stages = Vec::new();
    for name in &manifest.stages {
        stages.push(load_model(&dir.join(name))?.0);
    }
    let stats = manifest
        .trained_on
        .iter()
        .zip(&manifest.certified)
        .map(|(&t, &c)| certnet::trainer::CascadeStageStats { trained_on: t, certified: c })
        .collect();
    Ok(Cascade {
        stages,
        eps: manifest.epsilon,
        norm: parse_norm(&manifest.norm)?,
        stats,
    })
}

fn cmd_predict(a: &PredictArgs) -> CliResult<()> {
    let features: Vec<f64> = a
        .input
        .split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("--input: bad value {:?}", v.trim())))
        })
        .collect::<CliResult<_>>()?;
    let x = Tensor::new(vec![1, features.len()], features)?;

    let cascade = match (&a.model, &a.cascade) {
        (Some(path), None) => {
            let (net, meta) = load_model(path)?;
            Cascade {
                stages: vec![net],
                eps: a.epsilon.unwrap_or(meta.epsilon),
                norm: parse_norm(&meta.norm)?,
                stats: vec![],
            }
        }
        (None, Some(dir)) => {
            let mut c = load_cascade(dir)?;
            if let Some(eps) = a.epsilon {
                c.eps = eps;
            }
            c
        }
        _ => return Err(CliError::Usage("provide exactly one of --model or --cascade".into())),
    };
    check_epsilon(cascade.eps)?;
    match cascade_predict(&cascade, &x)? {
        Some(label) => println!("{label}"),
        None => println!("NO_CERTIFICATE"),
    }
    Ok(())
}

fn cmd_estimate_bench(a: &BenchArgs) -> CliResult<()> {
    let rs = parse_usize_list(&a.r, "--r")?;
    let sizes = parse_usize_list(&a.sizes, "--sizes")?;
    if a.trials == 0 || rs.is_empty() || sizes.is_empty() {
        return Err(CliError::Usage("--trials, --r, and --sizes must be nonempty".into()));
    }
    let mut lines = vec!["r,size,p5,p50,p95,seconds".to_string()];
    for &size in &sizes {
        for &r in &rs {
            let mut errs = Vec::with_capacity(a.trials);
            let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(a.seed ^ ((r * 31 + size) as u64)));
            let started = Instant::now();
            for trial in 0..a.trials {
                let v: Vec<f64> = (0..size).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let l1: f64 = v.iter().map(|x| x.abs()).sum();
                if l1 == 0.0 {
                    continue;
                }
                let proj = sample_cauchy(r, size, splitmix64(a.seed ^ trial as u64));
                let mut samples: Vec<f64> = (0..r)
                    .map(|i| {
                        v.iter()
                            .zip(&proj.data()[i * size..(i + 1) * size])
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            .abs()
                    })
                    .collect();
                let est = median(&mut samples);
                errs.push((est - l1) / l1);
            }
            let secs = started.elapsed().as_secs_f64();
            errs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let q = |p: f64| errs[((errs.len() - 1) as f64 * p).round() as usize];
            lines.push(format!("{r},{size},{},{},{},{}", q(0.05), q(0.5), q(0.95), secs));
        }
    }
    let text = lines.join("\n") + "\n";
    match &a.out {
        Some(p) => std::fs::write(p, text).map_err(|e| CliError::Runtime(e.to_string()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_convert_epsilon(a: &ConvertArgs) -> CliResult<()> {
    if a.dim < 1.0 {
        return Err(CliError::Usage(format!("--dim must be >= 1, got {}", a.dim)));
    }
    check_epsilon(a.epsilon_inf).map_err(|_| {
        CliError::Usage(format!("--epsilon-inf must be >= 0, got {}", a.epsilon_inf))
    })?;
    println!("{}", epsilon_l2_equivalent(a.dim, a.epsilon_inf));
    Ok(())
}
