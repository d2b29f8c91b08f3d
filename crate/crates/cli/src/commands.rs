//! Subcommand parsing and dispatch.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use taskroute::classifier::{load_description_embeddings, ClassifierParams};
use taskroute::data::{write_pool, write_records, PromptRecord};
use taskroute::discovery::{cluster_report, DiscoveryResult};
use taskroute::inference::{route_with_tolerance, RouterState};
use taskroute::neural::TrainSpec;
use taskroute::pipeline::{discover, fit_classifier, fit_router};
use taskroute::synth::{
    cost_curve, eval_router, generate, write_curve_csv, write_metrics_csv, EvalMetrics, GroundTruth, KnnBaseline,
    MlpBaseline, SynthSpec,
};
use taskroute::{load_artifact, load_dataset, save_artifact, Dataset, Error, PipelineConfig};

use crate::server::{load_service_state, serve, AppState, ArtifactPaths};

#[derive(Debug, Parser)]
#[command(name = "taskroute", version, about = "Task-discovery prompt router")]
struct Cli {
    /// Pipeline config in `key = value` form.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Prompt records (one JSON object per line).
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Model pool (one JSON object per line).
    #[arg(long, global = true)]
    pool: Option<PathBuf>,
    /// Directory holding trained artifacts.
    #[arg(long, global = true, default_value = "artifacts")]
    artifacts: PathBuf,
    /// Output file or directory, depending on the subcommand.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Preset {
    /// Three tasks, low observation noise.
    Clean,
    /// Three tasks, noisy observations and a per-prompt effect.
    Noisy,
    /// Noisy preset with one model strong on a single task only.
    Specialization,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic train/eval fixture with ground truth.
    Synth {
        #[arg(long, value_enum, default_value = "noisy")]
        preset: Preset,
        #[arg(long, default_value_t = 100)]
        prompts_per_task: usize,
        #[arg(long, default_value_t = 334)]
        eval_prompts_per_task: usize,
        #[arg(long, default_value_t = 0)]
        outliers: usize,
    },
    /// Cluster prompts into tasks and pick candidates per task.
    Discover,
    /// Train the task classifier on the discovered labels.
    TrainClassifier {
        /// Optional `{task_id, embedding}` lines replacing cluster description means.
        #[arg(long)]
        descriptions: Option<PathBuf>,
    },
    /// Train the shared trunk, general heads, then task adapters.
    TrainRouter,
    /// Route every prompt in a file.
    Route {
        /// Lines with `embedding` (or `prompt_embedding`) and optional `prompt_id`.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        tolerance: f64,
    },
    /// Score routing on an eval set and write metrics and cost-curve CSVs.
    Eval {
        #[arg(long)]
        truth: PathBuf,
        /// Training records; enables the kNN and MLP baselines.
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long, default_value_t = 0.05)]
        grid_step: f64,
    },
    /// Serve routing decisions over HTTP.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: String,
    },
}

/// Why a command stopped: bad invocation or bad data.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Data(e)
    }
}

type Outcome = std::result::Result<(), Failure>;

fn required<'a>(v: &'a Option<PathBuf>, flag: &str) -> std::result::Result<&'a Path, Failure> {
    v.as_deref().ok_or_else(|| Failure::Usage(format!("--{flag} is required for this subcommand")))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_text(path: &Path, text: &str) -> taskroute::Result<()> {
    std::fs::write(path, text).map_err(io_err(path))
}

fn ensure_dir(path: &Path) -> taskroute::Result<()> {
    std::fs::create_dir_all(path).map_err(io_err(path))
}

impl Cli {
    fn paths(&self) -> std::result::Result<ArtifactPaths, Failure> {
        Ok(ArtifactPaths::new(&self.artifacts, required(&self.pool, "pool")?))
    }

    /// `--config`, else the config saved by `discover`, else defaults; then
    /// `--seed` on top.
    fn resolve_config(&self) -> taskroute::Result<PipelineConfig> {
        let saved = self.artifacts.join("config.tkra");
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None if saved.exists() => load_artifact(&saved)?,
            None => PipelineConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn dataset(&self) -> std::result::Result<Dataset, Failure> {
        Ok(load_dataset(required(&self.data, "data")?, required(&self.pool, "pool")?)?)
    }

    fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| self.artifacts.clone())
    }
}

fn synth(cli: &Cli, preset: Preset, ppt: usize, eval_ppt: usize, outliers: usize) -> Outcome {
    let seed = cli.seed.unwrap_or(0);
    let base = match preset {
        Preset::Clean => SynthSpec::three_task(ppt, seed),
        Preset::Noisy => SynthSpec::noisy_three_task(ppt, seed),
        Preset::Specialization => SynthSpec {
            quality_noise: 0.1,
            prompt_effect: 0.06,
            ..SynthSpec::specialization(ppt, seed)
        },
    };
    let train_spec = SynthSpec {
        outlier_count: outliers,
        outlier_rbo: (outliers > 0).then_some((0.7, 0.25)),
        id_prefix: "train".into(),
        ..base.clone()
    };
    let eval_spec = SynthSpec {
        prompts_per_task: eval_ppt,
        id_prefix: "eval".into(),
        seed: seed.wrapping_add(1),
        ..base
    };
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
    ensure_dir(&out)?;
    let (train, train_truth) = generate(&train_spec)?;
    let (eval, eval_truth) = generate(&eval_spec)?;
    write_pool(train.pool(), &out.join("pool.jsonl"))?;
    write_records(train.records(), &out.join("train.jsonl"))?;
    write_records(eval.records(), &out.join("eval.jsonl"))?;
    train_truth.write(&out.join("train_truth.json"))?;
    eval_truth.write(&out.join("eval_truth.json"))?;
    println!(
        "wrote {} train and {} eval prompts over {} models to {}",
        train.len(),
        eval.len(),
        train.pool_size(),
        out.display()
    );
    Ok(())
}

fn run_discover(cli: &Cli) -> Outcome {
    let cfg = cli.resolve_config()?;
    let ds = cli.dataset()?;
    let result = discover(&ds, &cfg)?;
    ensure_dir(&cli.artifacts)?;
    save_artifact(&cfg, &cli.artifacts.join("config.tkra"))?;
    save_artifact(&result, &cli.artifacts.join("discovery.tkra"))?;
    let report = cluster_report(&result, &ds);
    let out = cli.out_dir();
    ensure_dir(&out)?;
    write_text(&out.join("cluster_report.txt"), &report)?;
    print!("{report}");
    Ok(())
}

fn run_train_classifier(cli: &Cli, descriptions: Option<&Path>) -> Outcome {
    let cfg = cli.resolve_config()?;
    let ds = cli.dataset()?;
    let result: DiscoveryResult = load_artifact(&cli.artifacts.join("discovery.tkra"))?;
    let overrides = descriptions.map(load_description_embeddings).transpose()?;
    let (params, report) = fit_classifier(&ds, &result, &cfg, overrides.as_ref())?;
    save_artifact(&params, &cli.artifacts.join("classifier.tkra"))?;
    let mut text = format!("initial bce {}\n", report.initial_loss);
    for (i, l) in report.epoch_losses.iter().enumerate() {
        let _ = writeln!(text, "epoch {} bce {l}", i + 1);
    }
    let out = cli.out_dir();
    ensure_dir(&out)?;
    write_text(&out.join("classifier_report.txt"), &text)?;
    println!(
        "classifier: {} tasks, bce {:.6} -> {:.6}",
        params.task_count(),
        report.initial_loss,
        report.final_loss()
    );
    Ok(())
}

fn run_train_router(cli: &Cli) -> Outcome {
    let cfg = cli.resolve_config()?;
    let ds = cli.dataset()?;
    let result: DiscoveryResult = load_artifact(&cli.artifacts.join("discovery.tkra"))?;
    let clf: ClassifierParams = load_artifact(&cli.artifacts.join("classifier.tkra"))?;
    let t = fit_router(&ds, &result, &clf, &cfg)?;
    save_artifact(&t.router, &cli.artifacts.join("router.tkra"))?;
    let text = t.adapters.render(Some(&t.base));
    let out = cli.out_dir();
    ensure_dir(&out)?;
    write_text(&out.join("router_report.txt"), &text)?;
    println!(
        "router: {} adapters, base mse {:.6} -> {:.6}",
        t.router.task_adapters.len(),
        t.base.initial_loss,
        t.base.final_loss()
    );
    Ok(())
}

#[derive(Debug, Deserialize)]
struct RouteLine {
    #[serde(default)]
    prompt_id: Option<String>,
    #[serde(alias = "prompt_embedding")]
    embedding: Vec<f64>,
}

/// One line of `route` output.
#[derive(Debug, Serialize, Deserialize)]
pub struct DecisionLine {
    pub prompt_id: Option<String>,
    pub model_id: String,
    pub model_index: usize,
    pub task_id: Option<usize>,
    pub final_scores: Vec<f64>,
    pub cost: f64,
}

fn run_route(cli: &Cli, input: &Path, tolerance: f64) -> Outcome {
    if !(0.0..=1.0).contains(&tolerance) {
        return Err(Failure::Usage(format!("--tolerance {tolerance} outside [0, 1]")));
    }
    let state = load_service_state(&cli.paths()?)?.routing;
    let text = std::fs::read_to_string(input).map_err(io_err(input))?;
    let mut out = String::new();
    for (i, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let line: RouteLine = serde_json::from_str(raw).map_err(|e| Error::Record {
            path: input.to_path_buf(),
            line: i + 1,
            field: "embedding".into(),
            message: e.to_string(),
        })?;
        let d = route_with_tolerance(&state, &line.embedding, tolerance)?;
        let row = DecisionLine {
            prompt_id: line.prompt_id,
            model_id: state.pool[d.chosen_model].model_id.clone(),
            model_index: d.chosen_model,
            task_id: d.task_id,
            final_scores: d.final_scores,
            cost: d.cost,
        };
        out.push_str(&serde_json::to_string(&row).map_err(|e| Error::Invalid(e.to_string()))?);
        out.push('\n');
    }
    match &cli.out {
        Some(p) => write_text(p, &out)?,
        None => {
            let _ = std::io::stdout().write_all(out.as_bytes());
        }
    }
    Ok(())
}

fn decide_all<'a>(state: &'a RouterState) -> impl FnMut(&PromptRecord) -> taskroute::Result<usize> + 'a {
    |r| Ok(route_with_tolerance(state, &r.prompt_embedding, 0.0)?.chosen_model)
}

fn comparison_row(out: &mut String, name: &str, m: &EvalMetrics) {
    let _ = writeln!(
        out,
        "{name},{},{},{},{}",
        m.mean_quality, m.mean_true_quality, m.oracle_ratio, m.mean_cost
    );
}

fn run_eval(cli: &Cli, truth_path: &Path, train_path: Option<&Path>, step: f64) -> Outcome {
    if !(step > 0.0 && step <= 1.0) {
        return Err(Failure::Usage(format!("--grid-step {step} outside (0, 1]")));
    }
    let state = load_service_state(&cli.paths()?)?.routing;
    let ds = cli.dataset()?;
    let truth = GroundTruth::load(truth_path)?;
    let model_ids: Vec<String> = ds.pool().iter().map(|m| m.model_id.clone()).collect();
    let out = cli.out_dir();
    ensure_dir(&out)?;

    let metrics = eval_router(&mut decide_all(&state), &ds, &truth)?;
    write_metrics_csv(&metrics, &model_ids, &out.join("metrics.csv"))?;
    let steps = (1.0 / step).round() as usize;
    let grid: Vec<f64> = (0..=steps).map(|i| (i as f64 * step).min(1.0)).collect();
    let curve = cost_curve(&state, &ds, &truth, &grid)?;
    write_curve_csv(&curve, &out.join("cost_curve.csv"))?;

    let mut cmp = String::from("decider,mean_quality,mean_true_quality,oracle_ratio,mean_cost\n");
    comparison_row(&mut cmp, "two-stage", &metrics);
    for (name, alpha) in [("stage1-only", 0.0), ("stage2-only", 1.0)] {
        let mut s = state.clone();
        s.config.alpha = alpha;
        comparison_row(&mut cmp, name, &eval_router(&mut decide_all(&s), &ds, &truth)?);
    }
    let mut best: Option<(usize, EvalMetrics)> = None;
    for m in 0..ds.pool_size() {
        let e = eval_router(&mut |_: &PromptRecord| Ok(m), &ds, &truth)?;
        if best.as_ref().is_none_or(|(_, b)| e.mean_true_quality > b.mean_true_quality) {
            best = Some((m, e));
        }
    }
    if let Some((m, e)) = &best {
        comparison_row(&mut cmp, &format!("single:{}", model_ids[*m]), e);
    }
    if let Some(path) = train_path {
        let train = load_dataset(path, required(&cli.pool, "pool")?)?;
        let cfg = &state.config;
        let knn = KnnBaseline::fit(&train, cfg.knn_k)?;
        comparison_row(&mut cmp, "knn", &eval_router(&mut |r: &PromptRecord| knn.decide(&r.prompt_embedding), &ds, &truth)?);
        let spec = TrainSpec {
            learning_rate: cfg.learning_rate,
            epochs: cfg.classifier_epochs,
            batch_size: cfg.batch_size,
            seed: cfg.seed,
            shuffle: true,
        }
        .derived("train/baseline-mlp");
        let mlp = MlpBaseline::fit(&train, cfg.adapter_hidden_dim, &spec)?;
        comparison_row(&mut cmp, "mlp", &eval_router(&mut |r: &PromptRecord| mlp.decide(&r.prompt_embedding), &ds, &truth)?);
    }
    write_text(&out.join("comparison.csv"), &cmp)?;
    println!(
        "prompts {}  mean quality {:.4}  true {:.4}  oracle ratio {:.4}  mean cost {:.4}",
        metrics.prompts, metrics.mean_quality, metrics.mean_true_quality, metrics.oracle_ratio, metrics.mean_cost
    );
    Ok(())
}

fn run_serve(cli: &Cli, bind: &str) -> Outcome {
    let paths = cli.paths()?;
    let state = load_service_state(&paths)?;
    let runtime = tokio::runtime::Runtime::new().map_err(|e| Error::Invalid(format!("tokio runtime: {e}")))?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(bind)
            .await
            .map_err(|e| Error::Invalid(format!("cannot bind {bind}: {e}")))?;
        log::info!("serving on {bind}");
        eprintln!("listening on {}", listener.local_addr().map_or_else(|_| bind.to_string(), |a| a.to_string()));
        serve(AppState::new(state, Some(paths)), listener)
            .await
            .map_err(|e| Error::Invalid(format!("server stopped: {e}")))
    })?;
    Ok(())
}

fn dispatch(cli: &Cli) -> Outcome {
    match &cli.command {
        Command::Synth {
            preset,
            prompts_per_task,
            eval_prompts_per_task,
            outliers,
        } => synth(cli, *preset, *prompts_per_task, *eval_prompts_per_task, *outliers),
        Command::Discover => run_discover(cli),
        Command::TrainClassifier { descriptions } => run_train_classifier(cli, descriptions.as_deref()),
        Command::TrainRouter => run_train_router(cli),
        Command::Route { input, tolerance } => run_route(cli, input, *tolerance),
        Command::Eval {
            truth,
            train,
            grid_step,
        } => run_eval(cli, truth, train.as_deref(), *grid_step),
        Command::Serve { bind } => run_serve(cli, bind),
    }
}

/// Runs the CLI and returns the process exit code: 0 on success, 1 on a
/// usage error, 2 on a data or artifact error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}
