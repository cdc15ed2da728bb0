use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use switchstate::analytics::{self, Metrics, StateSource};
use switchstate::io::{self as sio, Dataset};
use switchstate::learning::{self, FitConfig, FitReport};
use switchstate::simulator::{self, SeparationSpec};
use switchstate::{ModelParams, Sequence};

const THREADS_ENV: &str = "SWITCHSTATE_THREADS";

/// Recurrent switching-state HMM toolkit: simulate, fit, classify, analyze.
#[derive(Debug, Parser)]
#[command(name = "switchstate", version, subcommand_required = false, arg_required_else_help = true)]
struct Cli {
    /// Worker threads (falls back to SWITCHSTATE_THREADS, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Only log errors.
    #[arg(long, short, global = true, conflicts_with = "verbose")]
    quiet: bool,
    /// More logging (repeat for trace output).
    #[arg(long, short, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Print the effective fit configuration as JSON and exit.
    #[arg(long, global = true)]
    show_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample a model and a labeled dataset from it.
    Simulate(SimulateArgs),
    /// Train a model with generalized EM.
    Fit(FitArgs),
    /// Classify every sequence of a manifest.
    Classify(ClassifyArgs),
    /// Utilization, dwell times, transition matrices and covariance edges.
    Analyze(AnalyzeArgs),
    /// Accuracy, sensitivity, specificity, PPV and NPV on a labeled manifest.
    Evaluate(EvaluateArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Compare forward-backward with brute-force path enumeration.
    OracleCheck(OracleArgs),
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long = "K", default_value_t = 4)]
    k: usize,
    #[arg(long = "D", default_value_t = 10)]
    d: usize,
    #[arg(long = "C", default_value_t = 2)]
    c: usize,
    /// Training sequences.
    #[arg(long = "N", default_value_t = 100)]
    n: usize,
    #[arg(long = "T", default_value_t = 130)]
    t: usize,
    /// Held-out sequences written to a second manifest (none when 0).
    #[arg(long, default_value_t = 0)]
    n_test: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
    /// JSON file with separation settings.
    #[arg(long)]
    sep: Option<PathBuf>,
}

#[derive(Debug, Args, Default)]
struct ConfigOverrides {
    #[arg(long = "K")]
    k: Option<usize>,
    #[arg(long = "M")]
    iterations: Option<usize>,
    #[arg(long = "L")]
    inner_steps: Option<usize>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    cov_floor: Option<f64>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    freeze_g: bool,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// JSON file with FitConfig fields; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_model: Option<PathBuf>,
    /// Objective trace CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
    /// Cross-validate over this many stratified folds instead of one fit.
    #[arg(long)]
    folds: Option<usize>,
    /// Record wall-clock timings in the trace (otherwise zeros, so output is reproducible).
    #[arg(long)]
    timings: bool,
    /// Positive class index for fold metrics.
    #[arg(long, default_value_t = 1)]
    positive_class: usize,
    #[command(flatten)]
    overrides: ConfigOverrides,
}

#[derive(Debug, Args)]
struct ClassifyArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Defaults to stdout.
    #[arg(long)]
    out_csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SourceArg {
    Posterior,
    Viterbi,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Report JSON; defaults to stdout.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Directory for transition and utilization SVGs.
    #[arg(long)]
    svg: Option<PathBuf>,
    /// Covariance edge CSV.
    #[arg(long)]
    edges_csv: Option<PathBuf>,
    /// Text file with one region name per line (default r0..r{D-1}).
    #[arg(long)]
    regions: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    top_n: usize,
    /// State assignment used for utilization.
    #[arg(long, value_enum, default_value_t = SourceArg::Posterior)]
    source: SourceArg,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 1)]
    positive_class: usize,
    /// Also write metrics and confusion matrix as JSON.
    #[arg(long)]
    out_json: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    instances: usize,
    #[arg(long, default_value_t = 1e-5)]
    h: f64,
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
}

#[derive(Debug, Args)]
struct OracleArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    instances: usize,
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
}

/// Error with the exit code it maps to.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(anyhow::Error),
}

impl From<switchstate::Error> for Failure {
    fn from(e: switchstate::Error) -> Self {
        Failure::Data(e.into())
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Data(e)
    }
}

type Outcome = Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    init_logging(&cli);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("run with --help for usage");
            ExitCode::from(1)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn init_logging(cli: &Cli) {
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => log::LevelFilter::Error,
        (false, 0) => log::LevelFilter::Info,
        (false, 1) => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format(|buf, record| {
            use std::io::Write;
            writeln!(buf, "[{}] {}", record.level().as_str().to_lowercase(), record.args())
        })
        .target(env_logger::Target::Stderr)
        .init();
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>, Failure> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var(THREADS_ENV) {
            Ok(v) if !v.trim().is_empty() => Some(
                v.trim()
                    .parse::<usize>()
                    .map_err(|_| usage(format!("{THREADS_ENV}={v:?} is not a thread count")))?,
            ),
            _ => None,
        },
    };
    if n == Some(0) {
        return Err(usage("thread count must be at least 1"));
    }
    Ok(n)
}

fn run(cli: Cli) -> Outcome {
    if let Some(n) = thread_count(cli.threads)? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Data(e.into()))?;
    }
    if cli.show_config {
        let config = match &cli.command {
            Some(Command::Fit(args)) => fit_config(args)?,
            _ => FitConfig::default(),
        };
        println!("{}", serde_json::to_string_pretty(&config).map_err(anyhow::Error::from)?);
        return Ok(());
    }
    match cli.command {
        None => Err(usage("a subcommand is required")),
        Some(Command::Simulate(a)) => simulate(a),
        Some(Command::Fit(a)) => fit(a),
        Some(Command::Classify(a)) => classify(a),
        Some(Command::Analyze(a)) => analyze(a),
        Some(Command::Evaluate(a)) => evaluate(a),
        Some(Command::Gradcheck(a)) => gradcheck(a),
        Some(Command::OracleCheck(a)) => oracle_check(a),
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| anyhow::anyhow!("creating {}: {e}", parent.display()))?;
    }
    fs::write(path, text).map_err(|e| anyhow::anyhow!("writing {}: {e}", path.display()))?;
    Ok(())
}

fn require_file(path: &Path, what: &str) -> Outcome {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{what} {} does not exist", path.display())))
    }
}

fn json<T: Serialize>(value: &T) -> Result<String, Failure> {
    Ok(serde_json::to_string_pretty(value).map_err(anyhow::Error::from)? + "\n")
}

// ---- simulate ----

#[derive(Serialize)]
struct GroundTruth<'a> {
    seed: u64,
    separation: &'a SeparationSpec,
    params: &'a ModelParams,
    train_paths: Vec<Vec<usize>>,
    test_paths: Vec<Vec<usize>>,
}

fn simulate(a: SimulateArgs) -> Outcome {
    if a.k == 0 || a.d == 0 || a.c == 0 || a.t == 0 {
        return Err(usage("--K, --D, --C and --T must be positive"));
    }
    let spec = match &a.sep {
        Some(path) => {
            require_file(path, "separation file")?;
            let text = fs::read_to_string(path).map_err(|e| anyhow::anyhow!("reading {}: {e}", path.display()))?;
            serde_json::from_str::<SeparationSpec>(&text)
                .map_err(|e| usage(format!("{}: {e}", path.display())))?
        }
        None => SeparationSpec::default(),
    };
    let class_names: Vec<String> = (0..a.c).map(|c| format!("class_{c}")).collect();
    let mut params = simulator::sample_params(a.k, a.d, a.c, &spec, a.seed)?;
    params.class_names = class_names.clone();

    let rename = |mut seqs: Vec<Sequence>, prefix: &str| {
        for (i, s) in seqs.iter_mut().enumerate() {
            s.id = format!("{prefix}_{i:05}");
        }
        seqs
    };
    let train = simulator::sample_dataset(&params, a.n, a.t, a.seed.wrapping_add(1))?;
    let test = simulator::sample_dataset(&params, a.n_test, a.t, a.seed.wrapping_add(2))?;
    let notes = format!("simulated: K={} D={} C={} T={} seed={}", a.k, a.d, a.c, a.t, a.seed);

    let train_manifest = sio::save_dataset(&a.out_dir, "train.json", &class_names, &rename(train.sequences, "train"), &notes)?;
    log::info!("wrote {} training sequences to {}", a.n, train_manifest.display());
    if a.n_test > 0 {
        let test_manifest = sio::save_dataset(&a.out_dir, "test.json", &class_names, &rename(test.sequences, "test"), &notes)?;
        log::info!("wrote {} test sequences to {}", a.n_test, test_manifest.display());
    }
    let truth = GroundTruth {
        seed: a.seed,
        separation: &spec,
        params: &params,
        train_paths: train.true_paths,
        test_paths: test.true_paths,
    };
    write_file(&a.out_dir.join("ground_truth.json"), &json(&truth)?)?;
    sio::save_model(&params, a.out_dir.join("true_model.json"))?;
    Ok(())
}

// ---- fit ----

fn fit_config(a: &FitArgs) -> Result<FitConfig, Failure> {
    let mut config = match &a.config {
        Some(path) => {
            require_file(path, "config file")?;
            let text = fs::read_to_string(path).map_err(|e| anyhow::anyhow!("reading {}: {e}", path.display()))?;
            serde_json::from_str::<FitConfig>(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?
        }
        None => FitConfig::default(),
    };
    let o = &a.overrides;
    if let Some(v) = o.k {
        config.k = v;
    }
    if let Some(v) = o.iterations {
        config.iterations = v;
    }
    if let Some(v) = o.inner_steps {
        config.inner_steps = v;
    }
    if let Some(v) = o.eta {
        config.eta = v;
    }
    if let Some(v) = o.alpha {
        config.alpha = v;
    }
    if let Some(v) = o.kappa {
        config.kappa = v;
    }
    if let Some(v) = o.seed {
        config.seed = v;
    }
    if let Some(v) = o.cov_floor {
        config.cov_floor = v;
    }
    if let Some(v) = o.tol {
        config.tol = v;
    }
    if o.freeze_g {
        config.freeze_g = true;
    }
    config.validate().map_err(|e| usage(e.to_string()))?;
    Ok(config)
}

fn sibling(base: &Path, suffix: &str) -> PathBuf {
    let stem = base.file_stem().map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned());
    base.with_file_name(format!("{stem}{suffix}"))
}

fn trace_text(report: &FitReport, timings: bool) -> String {
    let mut trace = report.objective_trace.clone();
    if !timings {
        for e in &mut trace {
            e.e_seconds = 0.0;
            e.m_seconds = 0.0;
        }
    }
    sio::trace_csv(&trace)
}

fn fit(a: FitArgs) -> Outcome {
    require_file(&a.manifest, "manifest")?;
    let config = fit_config(&a)?;
    let out_model = a
        .out_model
        .clone()
        .ok_or_else(|| usage("--out-model is required"))?;

    let mut outputs = Vec::new();
    match a.folds {
        Some(f) if f < 2 => return Err(usage("--folds must be at least 2")),
        Some(f) => {
            outputs.extend((0..f).map(|i| sibling(&out_model, &format!(".fold{i}.json"))));
            outputs.push(sibling(&out_model, ".folds.csv"));
        }
        None => outputs.push(out_model.clone()),
    }
    outputs.extend(a.trace.iter().cloned());
    if !a.force {
        if let Some(p) = outputs.iter().find(|p| p.exists()) {
            return Err(usage(format!("{} exists; pass --force to overwrite", p.display())));
        }
    }

    let data = sio::load_dataset(&a.manifest)?;
    let labeled: Vec<Sequence> = data.sequences.iter().filter(|s| s.label.is_some()).cloned().collect();
    if labeled.len() < data.sequences.len() {
        log::warn!(
            "ignoring {} unlabeled sequences",
            data.sequences.len() - labeled.len()
        );
    }
    match a.folds {
        Some(f) => cross_validate(&a, &config, &data, &labeled, &out_model, f),
        None => {
            let report = learning::em_fit(&labeled, &data.class_names, &config)?;
            log::info!(
                "{} iterations, converged: {}, final objective {:.6}",
                report.iterations_run,
                report.converged,
                report.final_objective()
            );
            sio::save_model(&report.params, &out_model)?;
            if let Some(path) = &a.trace {
                write_file(path, &trace_text(&report, a.timings))?;
            }
            println!(
                "iterations: {}\nconverged: {}\nfinal_objective: {:?}",
                report.iterations_run,
                report.converged,
                report.final_objective()
            );
            Ok(())
        }
    }
}

/// Fold of each labeled sequence: sequences of each class are dealt
/// round-robin in manifest order.
fn fold_assignment(seqs: &[Sequence], folds: usize) -> Vec<usize> {
    let mut seen = std::collections::HashMap::new();
    seqs.iter()
        .map(|s| {
            let n = seen.entry(s.label).or_insert(0usize);
            let f = *n % folds;
            *n += 1;
            f
        })
        .collect()
}

fn cross_validate(
    a: &FitArgs,
    config: &FitConfig,
    data: &Dataset,
    labeled: &[Sequence],
    out_model: &Path,
    folds: usize,
) -> Outcome {
    let assign = fold_assignment(labeled, folds);
    let mut summary = String::from("fold,n_train,n_test,accuracy,sensitivity,specificity,ppv,npv\n");
    let mut traces = String::new();
    let mut all: Vec<Metrics> = Vec::new();
    for f in 0..folds {
        let train: Vec<Sequence> = labeled.iter().zip(&assign).filter(|(_, &g)| g != f).map(|(s, _)| s.clone()).collect();
        let test: Vec<Sequence> = labeled.iter().zip(&assign).filter(|(_, &g)| g == f).map(|(s, _)| s.clone()).collect();
        let report = learning::em_fit(&train, &data.class_names, config)?;
        sio::save_model(&report.params, sibling(out_model, &format!(".fold{f}.json")))?;
        let (metrics, _) = analytics::evaluate(&report.params, &test, a.positive_class)?;
        let _ = writeln!(summary, "{f},{},{},{}", train.len(), test.len(), metric_cells(&metrics));
        log::info!("fold {f}: accuracy {}", fmt_metric(metrics.accuracy));
        if a.trace.is_some() {
            for line in trace_text(&report, a.timings).lines().skip(1) {
                let _ = writeln!(traces, "{f},{line}");
            }
        }
        all.push(metrics);
    }
    let mean = |get: fn(&Metrics) -> Option<f64>| {
        let vals: Vec<f64> = all.iter().filter_map(get).collect();
        if vals.is_empty() {
            String::new()
        } else {
            format!("{:?}", vals.iter().sum::<f64>() / vals.len() as f64)
        }
    };
    let _ = writeln!(
        summary,
        "mean,,,{},{},{},{},{}",
        mean(|m| m.accuracy),
        mean(|m| m.sensitivity),
        mean(|m| m.specificity),
        mean(|m| m.ppv),
        mean(|m| m.npv)
    );
    write_file(&sibling(out_model, ".folds.csv"), &summary)?;
    if let Some(path) = &a.trace {
        write_file(path, &format!("fold,iteration,objective,e_seconds,m_seconds\n{traces}"))?;
    }
    print!("{summary}");
    Ok(())
}

fn metric_cells(m: &Metrics) -> String {
    [m.accuracy, m.sensitivity, m.specificity, m.ppv, m.npv]
        .iter()
        .map(|v| v.map_or(String::new(), |x| format!("{x:?}")))
        .collect::<Vec<_>>()
        .join(",")
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.2}"))
}

// ---- model + data commands ----

fn load_pair(model: &Path, manifest: &Path) -> Result<(ModelParams, Dataset), Failure> {
    require_file(model, "model")?;
    require_file(manifest, "manifest")?;
    let params = sio::load_model(model)?;
    let data = sio::load_dataset(manifest)?;
    if !params.class_names.is_empty() && params.class_names != data.class_names {
        return Err(Failure::Data(anyhow::anyhow!(
            "manifest classes {:?} do not match the model's {:?}",
            data.class_names,
            params.class_names
        )));
    }
    if let Some(s) = data.sequences.iter().find(|s| s.dim() != params.d) {
        return Err(Failure::Data(anyhow::anyhow!(
            "sequence {} has dimension {} but the model expects {}",
            s.id,
            s.dim(),
            params.d
        )));
    }
    Ok((params, data))
}

fn classify(a: ClassifyArgs) -> Outcome {
    let (params, data) = load_pair(&a.model, &a.manifest)?;
    let mut out = String::from("id,label,predicted,tie");
    for name in &data.class_names {
        let _ = write!(out, ",score_{name}");
    }
    out.push('\n');
    for seq in &data.sequences {
        let r = analytics::classify(&params, seq)?;
        let label = seq.label.map_or(String::new(), |y| data.class_names[y].clone());
        let _ = write!(out, "{},{label},{},{}", seq.id, data.class_names[r.class], r.tie);
        for s in &r.scores {
            let _ = write!(out, ",{s:?}");
        }
        out.push('\n');
    }
    match &a.out_csv {
        Some(path) => write_file(path, &out),
        None => {
            print!("{out}");
            Ok(())
        }
    }
}

fn region_names(path: Option<&Path>, d: usize) -> Result<Vec<String>, Failure> {
    match path {
        None => Ok((0..d).map(|i| format!("r{i}")).collect()),
        Some(p) => {
            require_file(p, "region file")?;
            let text = fs::read_to_string(p).map_err(|e| anyhow::anyhow!("reading {}: {e}", p.display()))?;
            Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
        }
    }
}

fn analyze(a: AnalyzeArgs) -> Outcome {
    let (params, data) = load_pair(&a.model, &a.manifest)?;
    let names = region_names(a.regions.as_deref(), params.d)?;
    let source = match a.source {
        SourceArg::Posterior => StateSource::Posterior,
        SourceArg::Viterbi => StateSource::Viterbi,
    };
    let report = analytics::analyze(&params, &data.sequences, &names, a.top_n, source)?;
    if !report.utilization.empty_classes.is_empty() {
        log::warn!("classes without sequences: {:?}", report.utilization.empty_classes);
    }
    let text = json(&report)?;
    match &a.report {
        Some(path) => write_file(path, &text)?,
        None => print!("{text}"),
    }
    if let Some(path) = &a.edges_csv {
        write_file(path, &analytics::edges_csv(&report.covariance_edges))?;
    }
    if let Some(dir) = &a.svg {
        for (c, m) in report.transition_matrices.iter().enumerate() {
            let title = format!("transitions: {}", report.class_names.get(c).map_or("", String::as_str));
            write_file(&dir.join(format!("transitions_{c}.svg")), &analytics::heatmap_svg(&title, m))?;
        }
        write_file(
            &dir.join("utilization.svg"),
            &analytics::utilization_svg(&report.class_names, &report.utilization),
        )?;
    }
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Outcome {
    let (params, data) = load_pair(&a.model, &a.manifest)?;
    if a.positive_class >= params.c {
        return Err(usage(format!(
            "--positive-class {} out of range for {} classes",
            a.positive_class, params.c
        )));
    }
    let (metrics, _) = analytics::evaluate(&params, &data.sequences, a.positive_class)?;
    let c = metrics.confusion;
    println!("positive_class: {}", data.class_names[a.positive_class]);
    println!("tp: {}  fn: {}  tn: {}  fp: {}", c.tp, c.fn_, c.tn, c.fp);
    println!("accuracy: {}", fmt_metric(metrics.accuracy));
    println!("sensitivity: {}", fmt_metric(metrics.sensitivity));
    println!("specificity: {}", fmt_metric(metrics.specificity));
    println!("ppv: {}", fmt_metric(metrics.ppv));
    println!("npv: {}", fmt_metric(metrics.npv));
    let undefined = metrics.undefined();
    if !undefined.is_empty() {
        log::warn!("undefined metrics (zero denominator): {}", undefined.join(", "));
    }
    if let Some(path) = &a.out_json {
        write_file(path, &json(&metrics)?)?;
    }
    Ok(())
}

// ---- self checks ----

fn gradcheck(a: GradcheckArgs) -> Outcome {
    if a.h <= 0.0 || a.instances == 0 {
        return Err(usage("--h must be positive and --instances at least 1"));
    }
    let report = learning::gradcheck(a.instances, a.seed, a.h)?;
    print!("{}", json(&report)?);
    if report.passes(a.tol) {
        Ok(())
    } else {
        Err(Failure::Data(anyhow::anyhow!(
            "gradient check failed: max relative error G {:e}, Pi {:e} (tolerance {:e})",
            report.max_rel_err_g,
            report.max_rel_err_pi,
            a.tol
        )))
    }
}

fn oracle_check(a: OracleArgs) -> Outcome {
    if a.instances == 0 {
        return Err(usage("--instances must be at least 1"));
    }
    let report = switchstate::verify::oracle_check(a.instances, a.seed)?;
    print!("{}", json(&report)?);
    if report.max_error() < a.tol {
        Ok(())
    } else {
        Err(Failure::Data(anyhow::anyhow!(
            "oracle check failed: max error {:e} (tolerance {:e})",
            report.max_error(),
            a.tol
        )))
    }
}
