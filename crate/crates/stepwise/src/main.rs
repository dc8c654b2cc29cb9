//! Operator entry point: synthetic data generation, training, streaming
//! inference, scoring, and plotting, plus an end-to-end benchmark mode.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use stepwise::belief::{parse_belief, write_belief};
use stepwise::eval::{
    self, bin_and_extract_segments, parse_segments_csv, pr_curve_points, render_pr_curve,
    render_timeline, write_map_report, write_pr_report, write_segments_csv, ActionSegment,
};
use stepwise::pipeline::{infer_episode, run_benchmark, PipelineConfig};
use stepwise::synth::{
    profile_by_code, read_features, write_features, TaskGenerator, TaskProfile, BUILTIN_PROFILES,
};
use stepwise::tcn::{read_model, write_model};
use stepwise::training::{load_config_file, train_task, write_loss_trace, LabeledSequence, TrainConfig};
use stepwise::{Result, StepwiseError, TaskDefinition};

#[derive(Parser)]
#[command(name = "stepwise", version, about = "Task-step detection pipeline over per-frame features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic episodes for the built-in task profiles.
    Synth(SynthArgs),
    /// Train one model on a directory of generated episodes.
    Train(TrainArgs),
    /// Stream a feature file through online inference and write a belief CSV.
    Infer(InferArgs),
    /// Score a belief CSV against ground-truth segments.
    Eval(EvalArgs),
    /// Render timeline and precision-recall SVGs.
    Plot(PlotArgs),
    /// Run the full benchmark on the built-in profiles and print the mAP table.
    E2e(E2eArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory (one subdirectory per task).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Comma-separated task codes, or `all`.
    #[arg(long, default_value = "all")]
    profiles: String,
    /// Class-mean scale of the generated features.
    #[arg(long, default_value_t = 10.0)]
    separation: f64,
    /// Feature dimension.
    #[arg(long, default_value_t = 64)]
    dim: usize,
    /// Episodes per task.
    #[arg(long, default_value_t = 10)]
    episodes: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory of `*.feat` / `*.gt.csv` episode pairs (one task).
    #[arg(long)]
    data: PathBuf,
    /// Output directory for `model.bin` and `loss_trace.csv`.
    #[arg(long)]
    out: PathBuf,
    /// Number of real steps in the task.
    #[arg(long)]
    num_steps: usize,
    /// key=value training config file; flags win over the file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = 2)]
    stages: usize,
    #[arg(long, default_value_t = 4)]
    layers: usize,
    #[arg(long, default_value_t = 16)]
    hidden: usize,
}

#[derive(Args)]
struct InferArgs {
    /// Trained model file.
    #[arg(long)]
    model: PathBuf,
    /// Feature binary to stream.
    #[arg(long)]
    features: PathBuf,
    /// Belief CSV destination.
    #[arg(long)]
    out: PathBuf,
    /// Task code written into the belief records.
    #[arg(long, default_value = "TASK")]
    task_code: String,
    /// Ordering-penalty coefficient.
    #[arg(long, default_value_t = 3.0)]
    alpha: f64,
    #[arg(long, default_value_t = 3)]
    median_window: usize,
    #[arg(long, default_value_t = 1200)]
    buffer_capacity: usize,
}

#[derive(Args)]
struct EvalArgs {
    /// Belief CSV with the predictions.
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth segment CSV.
    #[arg(long)]
    gt: PathBuf,
    /// Optional directory for the report CSVs.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated IOU thresholds for the printed AP lines.
    #[arg(long, default_value = "0.1,0.2,0.3,0.4,0.5")]
    threshold_list: String,
}

#[derive(Args)]
struct PlotArgs {
    /// Belief CSV with the predictions.
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth segment CSV.
    #[arg(long)]
    gt: PathBuf,
    /// Directory for `timeline.svg` and `pr_curve.svg`.
    #[arg(long)]
    out: PathBuf,
    /// IOU threshold of the precision-recall curve.
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
}

#[derive(Args)]
struct E2eArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 10.0)]
    separation: f64,
    #[arg(long, default_value_t = 0.15)]
    lambda: f64,
    #[arg(long, default_value_t = 3.0)]
    alpha: f64,
    /// Comma-separated task codes, or `all`.
    #[arg(long, default_value = "all")]
    profiles: String,
    /// Optional directory for report CSVs and timelines.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 40)]
    train_episodes: u64,
    #[arg(long, default_value_t = 10)]
    eval_episodes: u64,
}

/// Verbosity from `STEPWISE_LOG`: `quiet`, `info` (default), or `debug`.
fn verbosity() -> u8 {
    match std::env::var("STEPWISE_LOG").as_deref() {
        Ok("quiet") | Ok("error") => 0,
        Ok("debug") => 2,
        _ => 1,
    }
}

fn info(msg: &str) {
    if verbosity() >= 1 {
        eprintln!("[stepwise] {msg}");
    }
}

fn debug(msg: &str) {
    if verbosity() >= 2 {
        eprintln!("[stepwise:debug] {msg}");
    }
}

fn resolve_profiles(list: &str) -> Result<Vec<&'static TaskProfile>> {
    if list.eq_ignore_ascii_case("all") {
        return Ok(BUILTIN_PROFILES.iter().collect());
    }
    list.split(',')
        .map(|code| {
            profile_by_code(code.trim()).ok_or_else(|| {
                StepwiseError::InvalidArgument(format!("unknown task profile {:?}", code.trim()))
            })
        })
        .collect()
}

/// Fully renders a set of files in memory, then writes them, so a failure
/// partway through preparation leaves nothing on disk.
fn write_files(dir: &Path, files: Vec<(PathBuf, Vec<u8>)>) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (path, bytes) in files {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes)?;
        debug(&format!("wrote {}", path.display()));
    }
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let profiles = resolve_profiles(&args.profiles)?;
    let mut files = Vec::new();
    for profile in profiles {
        let generator = TaskGenerator::new(profile, args.dim, args.separation, args.seed)?;
        for idx in 0..args.episodes {
            let episode = generator.episode(idx)?;
            let mut feat = Vec::new();
            write_features(&episode.features, &mut feat)?;
            let mut gt = Vec::new();
            write_segments_csv(&episode.ground_truth_segments(), &mut gt)?;
            let base = args.out.join(profile.code);
            files.push((base.join(format!("ep{idx:03}.feat")), feat));
            files.push((base.join(format!("ep{idx:03}.gt.csv")), gt));
        }
        info(&format!("{}: generated {} episodes", profile.code, args.episodes));
    }
    write_files(&args.out, files)
}

/// Rasterizes ground-truth segments to per-frame labels; later-starting
/// segments own any shared frames.
fn segments_to_labels(segments: &[ActionSegment], frames: usize, frame_rate: f64) -> Vec<usize> {
    let mut ordered: Vec<&ActionSegment> = segments.iter().collect();
    ordered.sort_by(|a, b| a.start.partial_cmp(&b.start).unwrap());
    let mut labels = vec![0usize; frames];
    for seg in ordered {
        let lo = (seg.start * frame_rate).floor().max(0.0) as usize;
        let hi = (((seg.stop * frame_rate).floor()) as usize).min(frames);
        for label in labels.iter_mut().take(hi).skip(lo) {
            *label = seg.step_id as usize;
        }
    }
    labels
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = &args.config {
        cfg.apply_map(&load_config_file(path)?)?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(lambda) = args.lambda {
        cfg.lambda = lambda;
    }
    if let Some(epochs) = args.epochs {
        cfg.epochs = epochs;
    }

    let mut feat_paths: Vec<PathBuf> = fs::read_dir(&args.data)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "feat"))
        .collect();
    feat_paths.sort();
    if feat_paths.is_empty() {
        return Err(StepwiseError::InvalidArgument(format!(
            "no .feat episodes under {}",
            args.data.display()
        )));
    }

    let mut dataset = Vec::with_capacity(feat_paths.len());
    for path in &feat_paths {
        let features = read_features(fs::File::open(path)?)?;
        let gt_path = path.with_extension("").with_extension("gt.csv");
        let gt_text = fs::read_to_string(&gt_path).map_err(|_| {
            StepwiseError::InvalidArgument(format!("missing ground truth {}", gt_path.display()))
        })?;
        let segments = parse_segments_csv(&gt_text)?;
        let labels = segments_to_labels(&segments, features.num_frames(), features.frame_rate);
        if labels.iter().any(|&l| l > args.num_steps) {
            return Err(StepwiseError::InvalidArgument(format!(
                "{} references a step beyond --num-steps {}",
                gt_path.display(),
                args.num_steps
            )));
        }
        dataset.push(LabeledSequence::new(features, labels)?);
    }
    info(&format!("training on {} episodes", dataset.len()));

    let model_cfg = stepwise::tcn::ModelConfig {
        num_stages: args.stages,
        layers_per_stage: args.layers,
        hidden_dim: args.hidden,
        num_classes: args.num_steps + 1,
        in_dim: dataset[0].features.dim(),
    };
    let (model, trace) = train_task(&dataset, model_cfg, &cfg)?;
    info(&format!(
        "final epoch mean loss {:.6}",
        trace.last().copied().unwrap_or(f64::NAN)
    ));

    let mut model_bytes = Vec::new();
    write_model(&model, &mut model_bytes)?;
    let mut trace_bytes = Vec::new();
    write_loss_trace(&mut trace_bytes, &trace)?;
    write_files(
        &args.out,
        vec![
            (args.out.join("model.bin"), model_bytes),
            (args.out.join("loss_trace.csv"), trace_bytes),
        ],
    )
}

fn cmd_infer(args: InferArgs) -> Result<()> {
    let model = read_model(fs::File::open(&args.model)?)?;
    let features = read_features(fs::File::open(&args.features)?)?;
    let task = TaskDefinition::numbered(&args.task_code, model.config.num_classes - 1);
    info(&format!(
        "streaming {} frames through a {}-step task",
        features.num_frames(),
        task.num_steps()
    ));
    let records = infer_episode(
        &model,
        &features,
        &task,
        args.alpha,
        args.median_window,
        args.buffer_capacity,
    )?;
    let mut bytes = Vec::new();
    write_belief(&records, &mut bytes)?;
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(&args.out, bytes)?;
    Ok(())
}

fn parse_thresholds(list: &str) -> Result<Vec<f64>> {
    list.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| StepwiseError::InvalidArgument(format!("bad threshold {s:?}")))
        })
        .collect()
}

fn load_pred_and_gt(pred: &Path, gt: &Path) -> Result<(String, Vec<ActionSegment>, Vec<ActionSegment>)> {
    let records = parse_belief(&fs::read(pred)?)?;
    let code = records
        .first()
        .map(|r| r.task_code.clone())
        .unwrap_or_else(|| "TASK".into());
    let extraction = bin_and_extract_segments(&records)?;
    for warning in &extraction.warnings {
        info(&format!("extraction: {warning}"));
    }
    let gt_segments = parse_segments_csv(&fs::read_to_string(gt)?)?;
    Ok((code, extraction.segments, gt_segments))
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let thresholds = parse_thresholds(&args.threshold_list)?;
    let (code, pred, gt) = load_pred_and_gt(&args.pred, &args.gt)?;
    for &thr in &thresholds {
        let ap = eval::average_precision(&pred, &gt, thr)?;
        println!("AP@{thr:.2} = {ap:.3}");
    }
    let report = eval::build_report(&[(code, pred, gt)])?;
    let mut map_bytes = Vec::new();
    write_map_report(&report, &mut map_bytes)?;
    let mut pr_bytes = Vec::new();
    write_pr_report(&report, &mut pr_bytes)?;
    print!("{}", String::from_utf8_lossy(&map_bytes));
    print!("{}", String::from_utf8_lossy(&pr_bytes));
    if let Some(out) = &args.out {
        write_files(
            out,
            vec![
                (out.join("map_report.csv"), map_bytes),
                (out.join("pr_report.csv"), pr_bytes),
            ],
        )?;
    }
    Ok(())
}

fn cmd_plot(args: PlotArgs) -> Result<()> {
    let (code, pred, gt) = load_pred_and_gt(&args.pred, &args.gt)?;
    let timeline = render_timeline(&pred, &gt);
    let points = pr_curve_points(&pred, &gt, args.threshold)?;
    let curve = render_pr_curve(&points, &format!("{code} PR @ IOU {:.2}", args.threshold));
    write_files(
        &args.out,
        vec![
            (args.out.join("timeline.svg"), timeline.into_bytes()),
            (args.out.join("pr_curve.svg"), curve.into_bytes()),
        ],
    )
}

fn cmd_e2e(args: E2eArgs) -> Result<()> {
    let profiles = resolve_profiles(&args.profiles)?;
    let cfg = PipelineConfig {
        seed: args.seed,
        separation: args.separation,
        lambda: args.lambda,
        alpha: args.alpha,
        train_episodes: args.train_episodes,
        eval_episodes: args.eval_episodes,
        ..PipelineConfig::default()
    };
    let start = std::time::Instant::now();
    let result = run_benchmark(&profiles, &cfg)?;
    info(&format!("benchmark finished in {:.1} s", start.elapsed().as_secs_f64()));
    for run in &result.runs {
        for warning in &run.warnings {
            debug(warning);
        }
    }
    let mut map_bytes = Vec::new();
    write_map_report(&result.report, &mut map_bytes)?;
    let mut pr_bytes = Vec::new();
    write_pr_report(&result.report, &mut pr_bytes)?;
    print!("{}", String::from_utf8_lossy(&map_bytes));
    print!("{}", String::from_utf8_lossy(&pr_bytes));
    if let Some(out) = &args.out {
        let mut files = vec![
            (out.join("map_report.csv"), map_bytes),
            (out.join("pr_report.csv"), pr_bytes),
        ];
        for run in &result.runs {
            let svg = render_timeline(&run.predictions, &run.ground_truth);
            files.push((out.join(format!("timeline_{}.svg", run.code)), svg.into_bytes()));
        }
        write_files(out, files)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Infer(args) => cmd_infer(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Plot(args) => cmd_plot(args),
        Command::E2e(args) => cmd_e2e(args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
