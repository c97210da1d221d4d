use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use pyraflow::boxes::GtObject;
use pyraflow::config::{digest_bytes, RunConfig};
use pyraflow::gradflow::{
    probe_config, render_ratio_table, supervision_matrix, FlowMode, FlowOptions, FlowReport,
    FlowStatistic,
};
use pyraflow::gradsuite::{run_gradient_suite, SuiteOptions, TOLERANCE};
use pyraflow::heads::LossMode;
use pyraflow::metrics::ApSummary;
use pyraflow::pyramid::Builder;
use pyraflow::scene::{generate_scene, Scene, SizeBin, CLASS_NAMES};
use pyraflow::train::{
    evaluate_checkpoint, train, write_run, Progress, CHECKPOINT_FILE, CONFIG_FILE,
};
use pyraflow::{Error, ParamSet};

#[derive(Parser)]
#[command(
    name = "pyraflow",
    version,
    about = "Toy pyramid detectors and gradient-flow analysis"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a detector and write report, curves, config and checkpoint.
    Train(TrainArgs),
    /// Evaluate a saved checkpoint on the configured evaluation scenes.
    Eval(EvalArgs),
    /// Measure direct-path and full-path supervision matrices.
    Gradflow(GradflowArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Generate synthetic scenes and their annotations.
    SceneGen(SceneGenArgs),
}

/// Flags that override fields of the run configuration.
#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Run configuration (TOML). Defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_builder)]
    builder: Option<Builder>,
    #[arg(long)]
    cascade_times: Option<usize>,
    #[arg(long, value_parser = parse_loss_mode)]
    loss_mode: Option<LossMode>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory; falls back to `out_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the number of training steps.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    out: PathBuf,
    /// Configuration to use instead of the one saved in the run directory.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint to use instead of the one saved in the run directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Statistic {
    Feature,
    StageParameters,
}

#[derive(Args)]
struct GradflowArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Directory for the two JSON reports.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of probe seeds, starting at `--seed` (default 0).
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    /// Probe images per seed.
    #[arg(long, default_value_t = 2)]
    batch: usize,
    #[arg(long, value_enum, default_value_t = Statistic::Feature)]
    statistic: Statistic,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Coordinates checked per input or parameter tensor.
    #[arg(long, default_value_t = 24)]
    coords: usize,
    /// Write the per-case results as JSON to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SceneGenArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory for `annotations.json` (and images).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    count: u64,
    /// Also write every scene as a binary PPM image.
    #[arg(long)]
    images: bool,
}

fn parse_builder(s: &str) -> Result<Builder, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_loss_mode(s: &str) -> Result<LossMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

type CliResult<T> = Result<T, String>;

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

impl ConfigArgs {
    fn resolve(&self) -> CliResult<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p).map_err(err)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(b) = self.builder {
            c.pyramid.builder = b;
        }
        if let Some(t) = self.cascade_times {
            c.pyramid.cascade_times = t;
        }
        if let Some(m) = self.loss_mode {
            c.loss.mode = m;
        }
        c.validate().map_err(err)?;
        Ok(c)
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| format!("cannot create {}: {e}", dir.display()))
}

fn ap_line(ap: &ApSummary) -> String {
    let bin = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    format!(
        "AP {:.4}  S {}  M {}  L {}",
        ap.overall,
        bin(ap.small),
        bin(ap.medium),
        bin(ap.large)
    )
}

fn run_train(args: TrainArgs) -> CliResult<()> {
    let mut config = args.config.resolve()?;
    if let Some(steps) = args.steps {
        config.train.steps = steps;
    }
    let out = args
        .out
        .or_else(|| config.out_dir.clone())
        .ok_or("no output directory: pass --out or set out_dir in the config")?;
    create_dir(&out)?;
    let quiet = args.quiet;
    let log_every = (config.train.steps / 20).max(1);
    let mut window = (0.0, 0usize);
    let outcome = train(&config, &mut |p| match p {
        Progress::Step { step, breakdown } => {
            window.0 += breakdown.total;
            window.1 += 1;
            if !quiet && (step + 1) % log_every == 0 {
                eprintln!(
                    "step {:>6}  loss {:.4}",
                    step + 1,
                    window.0 / window.1 as f64
                );
                window = (0.0, 0);
            }
        }
        Progress::Eval { step, ap } => {
            if !quiet {
                eprintln!("eval {step:>6}  {}", ap_line(ap));
            }
        }
    })
    .map_err(err)?;
    write_run(&config, &outcome, &out).map_err(err)?;
    println!("{}", ap_line(&outcome.report.ap));
    println!("wrote {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    config_digest: String,
    checkpoint_digest: String,
    ap: ApSummary,
}

fn run_eval(args: EvalArgs) -> CliResult<()> {
    let config_path = args.config.unwrap_or_else(|| args.out.join(CONFIG_FILE));
    let ckpt_path = args
        .checkpoint
        .unwrap_or_else(|| args.out.join(CHECKPOINT_FILE));
    let config = RunConfig::load(&config_path).map_err(err)?;
    let params = ParamSet::load_json(&ckpt_path).map_err(err)?;
    let ap = evaluate_checkpoint(&config, &params).map_err(err)?;
    let ckpt_bytes = std::fs::read(&ckpt_path)
        .map_err(|e| format!("cannot read {}: {e}", ckpt_path.display()))?;
    let report = EvalReport {
        config_digest: config.digest().map_err(err)?,
        checkpoint_digest: digest_bytes(&ckpt_bytes),
        ap,
    };
    let path = args.out.join("eval.json");
    let text = serde_json::to_string_pretty(&report).map_err(err)? + "\n";
    std::fs::write(&path, text).map_err(|e| format!("cannot write {}: {e}", path.display()))?;
    println!("{}", ap_line(&report.ap));
    Ok(())
}

fn run_gradflow(args: GradflowArgs) -> CliResult<()> {
    if args.seeds == 0 {
        return Err("--seeds must be at least 1".into());
    }
    let config = args.config.resolve()?;
    let model = probe_config(
        &config.model(),
        config.pyramid.builder,
        config.pyramid.cascade_times,
        config.loss.mode.uses_aux(),
    );
    let first = args.config.seed.unwrap_or(0);
    let digest = config.digest().map_err(err)?;
    let statistic = match args.statistic {
        Statistic::Feature => FlowStatistic::Feature,
        Statistic::StageParameters => FlowStatistic::StageParameters,
    };
    let mut reports = Vec::new();
    for mode in [FlowMode::DirectPath, FlowMode::FullPath] {
        let options = FlowOptions {
            mode,
            statistic,
            seeds: (first..first + args.seeds).collect(),
            batch: args.batch,
            scene: config.train_scenes(),
        };
        let matrix = supervision_matrix(&model, &options).map_err(err)?;
        let report = FlowReport::new(&matrix, &digest).map_err(err)?;
        println!("{}", report.render_table());
        reports.push(report);
    }
    println!("{}", render_ratio_table(&reports[0], &reports[1]));
    if let Some(out) = args.out {
        create_dir(&out)?;
        for r in &reports {
            r.write(&out.join(format!("gradflow_{}.json", r.mode.as_str())))
                .map_err(err)?;
        }
    }
    Ok(())
}

fn run_gradcheck(args: GradcheckArgs) -> CliResult<()> {
    let options = SuiteOptions {
        trials: args.trials,
        seed: args.seed,
        coords: args.coords,
        ..SuiteOptions::default()
    };
    let started = std::time::Instant::now();
    let entries = run_gradient_suite(&options, &mut |e| {
        let flag = if e.max_rel_error < TOLERANCE {
            "ok"
        } else {
            "FAIL"
        };
        println!(
            "{:<22} {:>4} trials {:>7} coords {:>4} kinks  max rel err {:.3e}  {flag}",
            e.name, e.trials, e.coords_checked, e.kinks, e.max_rel_error
        );
    })
    .map_err(err)?;
    println!(
        "{} cases in {:.1}s",
        entries.len(),
        started.elapsed().as_secs_f64()
    );
    if let Some(path) = args.out {
        let text = serde_json::to_string_pretty(&entries).map_err(err)? + "\n";
        std::fs::write(&path, text).map_err(|e| format!("cannot write {}: {e}", path.display()))?;
    }
    let failed: Vec<&str> = entries
        .iter()
        .filter(|e| !(e.max_rel_error < TOLERANCE))
        .map(|e| e.name.as_str())
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(format!("gradient check failed for {}", failed.join(", ")))
    }
}

#[derive(Serialize)]
struct AnnotatedObject {
    bbox: [f64; 4],
    class: usize,
    class_name: &'static str,
    size_bin: SizeBin,
}

#[derive(Serialize)]
struct SceneRecord {
    index: u64,
    objects: Vec<AnnotatedObject>,
}

fn annotate(o: &GtObject) -> AnnotatedObject {
    AnnotatedObject {
        bbox: [o.bbox.x1, o.bbox.y1, o.bbox.x2, o.bbox.y2],
        class: o.class,
        class_name: CLASS_NAMES[o.class],
        size_bin: SizeBin::of(&o.bbox),
    }
}

fn write_ppm(scene: &Scene, path: &Path) -> CliResult<()> {
    let (_, h, w) = match scene.image.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return Err(format!("unexpected image shape {s:?}")),
    };
    let data = scene.image.data();
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = data[(c * h + y) * w + x].clamp(0.0, 1.0);
                bytes.push((v * 255.0).round() as u8);
            }
        }
    }
    std::fs::write(path, bytes).map_err(|e| format!("cannot write {}: {e}", path.display()))
}

fn run_scene_gen(args: SceneGenArgs) -> CliResult<()> {
    let config = args.config.resolve()?;
    let mut spec = config.train_scenes();
    if let Some(s) = args.config.seed {
        spec.seed = s;
    }
    create_dir(&args.out)?;
    let mut records = Vec::new();
    for index in 0..args.count {
        let scene = generate_scene(&spec, index).map_err(err)?;
        if args.images {
            write_ppm(&scene, &args.out.join(format!("scene_{index:05}.ppm")))?;
        }
        records.push(SceneRecord {
            index,
            objects: scene.objects.iter().map(annotate).collect(),
        });
    }
    let path = args.out.join("annotations.json");
    let text = serde_json::to_string_pretty(&records).map_err(err)? + "\n";
    std::fs::write(&path, text).map_err(|e| format!("cannot write {}: {e}", path.display()))?;
    println!("wrote {} scenes to {}", args.count, args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let msg = e.to_string();
            eprintln!("{}", msg.lines().next().unwrap_or("invalid arguments"));
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Gradflow(a) => run_gradflow(a),
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::SceneGen(a) => run_scene_gen(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {}", msg.replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
