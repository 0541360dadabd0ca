use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use uwgan::checkpoint;
use uwgan::config::{CommandSpec, RunConfig};
use uwgan::datasets::{
    build_dataset, load_dataset, load_real_pool, Split, SyntheticQuad, WaterType,
};
use uwgan::losses::GanMode;
use uwgan::pipeline::{enhance_dir, evaluate_dirs, run_ablation};
use uwgan::training::{
    prepare_real_pool, train_loop, TrainConfig, TrainState, TrainingPair, EFFECTIVE_CONFIG,
};
use uwgan::{Error, Result};

/// Physics-feedback adversarial underwater image enhancement.
#[derive(Parser, Debug)]
#[command(name = "uwgan", version)]
struct Cli {
    /// Log level (error, warn, info, debug).
    #[arg(long, global = true, default_value = "warn")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a synthetic dataset from an RGB-D corpus.
    Synthesize(SynthesizeArgs),
    /// Train the generator and both discriminators.
    Train(TrainArgs),
    /// Enhance every image in a directory with a trained generator.
    Enhance(EnhanceArgs),
    /// Score images, optionally against references of the same name.
    Evaluate(EvaluateArgs),
    /// Train the full model and the three leave-one-out variants and compare them.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
struct SynthesizeArgs {
    /// Directory of `<stem>.png|jpg` images with `<stem>.depth.png|f32` depth.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Water types, e.g. `b,c,d`.
    #[arg(long, value_delimiter = ',')]
    types: Option<Vec<String>>,
    /// Relative share of each type, e.g. `2,1,1`.
    #[arg(long, value_delimiter = ',')]
    proportions: Option<Vec<f64>>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Training resolution as `N` or `HxW`.
    #[arg(long)]
    resolution: Option<String>,
    #[arg(long)]
    test_fraction: Option<f64>,
    #[arg(long)]
    max_depth: Option<f64>,
    #[arg(long)]
    depth_range: Option<f64>,
    #[arg(long)]
    depth_png_scale: Option<f64>,
    #[arg(long)]
    depth_scale: Option<f64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum GanModeArg {
    Bce,
    LeastSquares,
}

#[derive(Args, Debug, Default)]
struct TrainOverrides {
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    epochs: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    adam_eps: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lambda_cycle: Option<f64>,
    #[arg(long)]
    lambda_pixel: Option<f64>,
    #[arg(long)]
    lambda_coral: Option<f64>,
    #[arg(long)]
    disable_da: bool,
    #[arg(long)]
    disable_feedback: bool,
    #[arg(long)]
    disable_pixel: bool,
    #[arg(long)]
    gan_mode: Option<GanModeArg>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    preview_count: Option<usize>,
    /// Real-image size as `N` or `HxW`.
    #[arg(long)]
    real_resolution: Option<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset manifest, or the directory holding `manifest.json`.
    #[arg(long)]
    data: PathBuf,
    /// Directory of unpaired real underwater images.
    #[arg(long)]
    real: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue from a full training checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Args, Debug)]
struct EnhanceArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Where to write `metrics.json` and `metrics.txt`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    real: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: TrainOverrides,
}

fn parse_size(s: &str) -> Result<[usize; 2]> {
    let parse = |v: &str| {
        v.trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("bad size '{s}' (expected N or HxW)")))
    };
    match s.split_once(['x', 'X']) {
        Some((h, w)) => Ok([parse(h)?, parse(w)?]),
        None => {
            let n = parse(s)?;
            Ok([n, n])
        }
    }
}

fn load_run_config(path: Option<&Path>) -> Result<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

fn command_spec(name: &str, config: Option<&Path>, out: &Path) -> CommandSpec {
    CommandSpec {
        name: name.into(),
        config_path: config.map(|p| p.display().to_string()),
        overrides: std::env::args().skip(2).collect(),
        output_dir: out.display().to_string(),
    }
}

fn write_frozen(out: &Path, mut run: RunConfig, spec: CommandSpec) -> Result<()> {
    run.command = Some(spec);
    run.write(&out.join(EFFECTIVE_CONFIG))
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn synthesize(args: &SynthesizeArgs) -> Result<()> {
    let mut cfg = load_run_config(args.config.as_deref())?
        .dataset
        .unwrap_or_default();
    if let Some(types) = &args.types {
        cfg.types = types
            .iter()
            .map(|t| WaterType::parse(t))
            .collect::<Result<_>>()?;
    }
    if let Some(p) = &args.proportions {
        cfg.proportions = p.clone();
    }
    if let Some(v) = args.count {
        cfg.count = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(r) = &args.resolution {
        cfg.train_resolution = parse_size(r)?;
    }
    if let Some(v) = args.test_fraction {
        cfg.test_fraction = v;
    }
    if let Some(v) = args.max_depth {
        cfg.depth.max_depth = v;
    }
    if let Some(v) = args.depth_range {
        cfg.depth.range = v;
    }
    if let Some(v) = args.depth_png_scale {
        cfg.depth_png_scale = v;
    }
    if let Some(v) = args.depth_scale {
        cfg.depth_scale = v;
    }
    cfg.validate()?;
    if !args.corpus.is_dir() {
        return Err(io_err(
            &args.corpus,
            std::io::Error::new(std::io::ErrorKind::NotFound, "corpus directory not found"),
        ));
    }
    let manifest = build_dataset(&cfg, &args.corpus, &args.out)?;
    write_frozen(
        &args.out,
        RunConfig::for_dataset(&cfg),
        command_spec("synthesize", args.config.as_deref(), &args.out),
    )?;
    for s in &manifest.skipped {
        eprintln!("warning: skipped {}: {}", s.path, s.reason);
    }
    let per_type: Vec<String> = WaterType::ALL
        .iter()
        .map(|t| {
            let n = manifest
                .records
                .iter()
                .filter(|r| r.provenance.water_type == *t)
                .count();
            format!("{}: {n}", t.id())
        })
        .collect();
    println!(
        "wrote {} quad(s) ({}), {} test, {} source(s) skipped -> {}",
        manifest.records.len(),
        per_type.join(", "),
        manifest.split(Split::Test).count(),
        manifest.skipped.len(),
        args.out.join(uwgan::datasets::MANIFEST_FILE).display()
    );
    Ok(())
}

fn apply_overrides(cfg: &mut TrainConfig, o: &TrainOverrides) -> Result<()> {
    macro_rules! set {
        ($($field:ident),*) => {$(
            if let Some(v) = o.$field {
                cfg.$field = v;
            }
        )*};
    }
    set!(
        steps,
        seed,
        learning_rate,
        beta1,
        beta2,
        adam_eps,
        batch_size,
        checkpoint_every,
        preview_count
    );
    if o.epochs.is_some() {
        cfg.epochs = o.epochs;
    }
    if let Some(v) = o.lambda_cycle {
        cfg.weights.lambda_cycle = v;
    }
    if let Some(v) = o.lambda_pixel {
        cfg.weights.lambda_pixel = v;
    }
    if let Some(v) = o.lambda_coral {
        cfg.weights.lambda_coral = v;
    }
    cfg.disable_da |= o.disable_da;
    cfg.disable_feedback |= o.disable_feedback;
    cfg.disable_pixel |= o.disable_pixel;
    if let Some(m) = o.gan_mode {
        cfg.gan_mode = match m {
            GanModeArg::Bce => GanMode::Bce,
            GanModeArg::LeastSquares => GanMode::LeastSquares,
        };
    }
    if let Some(r) = &o.real_resolution {
        cfg.real_resolution = Some(parse_size(r)?);
    }
    cfg.validate()
}

fn manifest_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join(uwgan::datasets::MANIFEST_FILE)
    } else {
        data.to_path_buf()
    }
}

struct Prepared {
    train: Vec<TrainingPair>,
    eval: Vec<(String, SyntheticQuad)>,
    real: Vec<(String, uwgan::tensor::Tensor<f32>)>,
}

fn prepare(cfg: &TrainConfig, data: &Path, real: Option<&Path>) -> Result<Prepared> {
    let (manifest, quads) = load_dataset(&manifest_path(data))?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (record, quad) in quads {
        match record.split {
            Split::Train => {
                train.push(TrainingPair::from_quad(&record.id, &quad));
                test.push((record.id, quad));
            }
            Split::Test => test.push((record.id, quad)),
        }
    }
    if train.is_empty() {
        return Err(Error::Validation(
            "the dataset has no training quads".into(),
        ));
    }
    let size = cfg.real_resolution.unwrap_or(manifest.train_resolution);
    let real = match real {
        Some(dir) if cfg.terms().coral => {
            let pool = load_real_pool(dir, None)?;
            for w in &pool.warnings {
                eprintln!("warning: skipped real image {}: {}", w.path, w.reason);
            }
            pool.require(true)?;
            prepare_real_pool(&pool, (size[0], size[1]))
        }
        None if cfg.terms().coral => {
            return Err(Error::Config(
                "domain adaptation is enabled: pass --real DIR or --disable-da".into(),
            ))
        }
        _ => Vec::new(),
    };
    // evaluate on the held-out split when there is one
    let has_test = manifest.split(Split::Test).next().is_some();
    let eval = if has_test {
        let test_ids: Vec<&str> = manifest.split(Split::Test).map(|r| r.id.as_str()).collect();
        test.into_iter()
            .filter(|(id, _)| test_ids.contains(&id.as_str()))
            .collect()
    } else {
        test
    };
    Ok(Prepared { train, eval, real })
}

fn train(args: &TrainArgs) -> Result<()> {
    let (state, base) = match &args.resume {
        Some(path) => {
            let (state, cfg) = checkpoint::load_state(path)?;
            (Some(state), cfg.unwrap_or_default())
        }
        None => (None, TrainConfig::default()),
    };
    let mut cfg = load_run_config(args.config.as_deref())?
        .train
        .unwrap_or(base);
    apply_overrides(&mut cfg, &args.overrides)?;
    let data = prepare(&cfg, &args.data, args.real.as_deref())?;
    let state = match state {
        Some(s) => s,
        None => TrainState::new(&cfg)?,
    };
    let summary = train_loop(&cfg, &data.train, &data.real, state, &args.out)?;
    write_frozen(
        &args.out,
        RunConfig::for_training(&cfg),
        command_spec("train", args.config.as_deref(), &args.out),
    )?;
    match &summary.last {
        Some(l) => println!(
            "trained to step {}: total {:.4}, D_g {:.4} -> {}",
            summary.steps,
            l.total,
            l.d_g,
            summary.final_checkpoint.display()
        ),
        None => println!("no steps run -> {}", summary.final_checkpoint.display()),
    }
    Ok(())
}

fn enhance(args: &EnhanceArgs) -> Result<()> {
    let generator = checkpoint::load_generator(&args.checkpoint)?;
    if !args.input.is_dir() {
        return Err(io_err(
            &args.input,
            std::io::Error::new(std::io::ErrorKind::NotFound, "input directory not found"),
        ));
    }
    let report = enhance_dir(&generator, &args.input, &args.out)?;
    write_frozen(
        &args.out,
        RunConfig::default(),
        command_spec("enhance", None, &args.out),
    )?;
    for s in &report.skipped {
        eprintln!("warning: skipped {}: {}", s.path, s.reason);
    }
    if report.written.is_empty() {
        eprintln!("warning: no images enhanced in {}", args.input.display());
    }
    println!(
        "enhanced {} image(s) -> {}",
        report.written.len(),
        args.out.display()
    );
    Ok(())
}

fn evaluate(args: &EvaluateArgs) -> Result<()> {
    let (report, skipped) = evaluate_dirs(&args.images, args.reference.as_deref())?;
    for s in &skipped {
        eprintln!("warning: skipped {}: {}", s.path, s.reason);
    }
    let table = report.to_table();
    print!("{table}");
    if let Some(out) = &args.out {
        fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
        let json = serde_json::to_string_pretty(&report).expect("report serializes");
        fs::write(out.join("metrics.json"), json + "\n").map_err(|e| io_err(out, e))?;
        fs::write(out.join("metrics.txt"), &table).map_err(|e| io_err(out, e))?;
        write_frozen(
            out,
            RunConfig::default(),
            command_spec("evaluate", None, out),
        )?;
    }
    Ok(())
}

fn ablate(args: &AblateArgs) -> Result<()> {
    let mut cfg = load_run_config(args.config.as_deref())?
        .train
        .unwrap_or_default();
    apply_overrides(&mut cfg, &args.overrides)?;
    let data = prepare(&cfg, &args.data, args.real.as_deref())?;
    let report = run_ablation(&cfg, &data.train, &data.real, &data.eval, &args.out)?;
    let table = report.to_table();
    print!("{table}");
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    fs::write(args.out.join("ablation.json"), json + "\n").map_err(|e| io_err(&args.out, e))?;
    fs::write(args.out.join("ablation.txt"), &table).map_err(|e| io_err(&args.out, e))?;
    write_frozen(
        &args.out,
        RunConfig::for_training(&cfg),
        command_spec("ablate", args.config.as_deref(), &args.out),
    )
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
    env_logger::Builder::new()
        .parse_filters(&cli.log)
        .format_timestamp(None)
        .init();
    let result = match &cli.command {
        Command::Synthesize(a) => synthesize(a),
        Command::Train(a) => train(a),
        Command::Enhance(a) => enhance(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Ablate(a) => ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Divergence {
                last_finite: Some(last),
                ..
            } = &e
            {
                eprintln!("last finite losses: {last}");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
