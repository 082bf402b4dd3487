mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use flowalign::data::{self, SegSample};
use flowalign::fam::UpsampleMode;
use flowalign::gradcheck::{self, Scope};
use flowalign::metrics::{benchmark_forward, EvalReport};
use flowalign::model::{self, count_flops, Mode};
use flowalign::params::ParamStore;
use flowalign::pnm::Raster;
use flowalign::{ablation, train, viz, Error, Shape, Tape};
use log::info;
use serde_json::json;

use config::{RunConfig, CONFIG_FILE};

#[derive(Parser)]
#[command(name = "flowalign", version, about = "Flow-aligned FPN segmentation at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum UpsampleArg {
    Bilinear,
    Nearest,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    Sampler,
    Primitives,
    Fam,
    Model,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write checkpoints, log and effective config.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Plain bilinear decoder instead of flow alignment.
        #[arg(long)]
        no_fam: bool,
        #[arg(long, value_parser = ["1", "3", "5", "7"])]
        fam_k: Option<String>,
        #[arg(long, value_enum)]
        upsample: Option<UpsampleArg>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        iters: Option<usize>,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_report: Option<PathBuf>,
        #[arg(long, default_value = "val")]
        split: String,
        /// Model config; defaults to the one saved next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also time this many forward passes at the dataset's image size.
        #[arg(long, default_value_t = 0)]
        bench_runs: usize,
    },
    /// Compare analytic and finite-difference gradients.
    Gradcheck {
        #[arg(long, value_enum, default_value = "all")]
        scope: ScopeArg,
        #[arg(long, default_value_t = 10)]
        seeds: u64,
    },
    /// Time eval-mode forward passes.
    Bench {
        /// Without a checkpoint, a freshly initialised model is timed.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// NxCxHxW, e.g. 1x3x64x64.
        #[arg(long)]
        shape: Option<String>,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        warmup: Option<usize>,
        #[arg(long)]
        no_fam: bool,
    },
    /// Render predictions, flow fields, feature heatmaps and an error map.
    Viz {
        #[arg(long)]
        checkpoint: PathBuf,
        /// P6 image; its size must be a multiple of 32.
        #[arg(long)]
        image: PathBuf,
        /// Optional P5 label map for the error map.
        #[arg(long)]
        label: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Flow module to render (e.g. dec.fam2); repeatable.
        #[arg(long)]
        level: Vec<String>,
    },
    /// Train the decoder ablation grid and the flow-kernel sweep.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated seeds for the decoder grid.
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        kernel_iters: Option<usize>,
        #[arg(long)]
        skip_kernel_grid: bool,
        #[arg(long)]
        skip_decoder_grid: bool,
    },
}

enum Failure {
    Lib(Error),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl Failure {
    fn kind_and_code(&self) -> (&'static str, u8) {
        match self {
            Failure::Lib(Error::Config(_) | Error::InvalidArgument(_)) => ("config", 2),
            Failure::Lib(Error::NonFinite { .. }) | Failure::Check(_) => ("numeric", 3),
            Failure::Lib(Error::Io { .. } | Error::Format { .. }) => ("io", 4),
            Failure::Lib(_) => ("internal", 1),
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Lib(e) => e.to_string(),
            Failure::Check(m) => m.clone(),
        }
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn config_error(msg: impl Into<String>) -> Failure {
    Failure::Lib(Error::Config(vec![msg.into()]))
}

fn io_error(path: &Path, e: std::io::Error) -> Failure {
    Failure::Lib(Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Config for a checkpoint: explicit file, else the one saved next to it.
fn checkpoint_config(checkpoint: &Path, explicit: Option<&Path>) -> flowalign::Result<RunConfig> {
    if let Some(p) = explicit {
        return RunConfig::load(p);
    }
    let beside = checkpoint.parent().unwrap_or(Path::new(".")).join(CONFIG_FILE);
    if beside.is_file() {
        RunConfig::load(&beside)
    } else {
        Ok(RunConfig::default())
    }
}

fn load_checkpoint(path: &Path, cfg: &RunConfig) -> flowalign::Result<ParamStore> {
    let params = ParamStore::load(path)?;
    params.check_compatible(&model::init_params(&cfg.model, 0)?)?;
    Ok(params)
}

/// Copy a user-supplied config verbatim and write the effective one.
fn record_config(cfg: &RunConfig, source: Option<&Path>, out: &Path) -> CmdResult {
    cfg.save_to(out)?;
    if let Some(src) = source {
        let dst = out.join("config.input.json");
        fs::copy(src, &dst).map_err(|e| io_error(&dst, e))?;
    }
    Ok(())
}

fn parse_shape(s: &str) -> std::result::Result<[usize; 4], Failure> {
    let dims: Vec<usize> = s
        .split(['x', ','])
        .map(|d| d.trim().parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| config_error(format!("bad shape {s:?}; expected NxCxHxW")))?;
    dims.try_into()
        .map_err(|_| config_error(format!("bad shape {s:?}; expected four dimensions")))
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string(v).expect("json"));
}

fn cmd_gen_data(
    config: Option<PathBuf>,
    seed: Option<u64>,
    n: Option<usize>,
    size: Option<usize>,
    classes: Option<usize>,
    out: PathBuf,
) -> CmdResult {
    let mut cfg = RunConfig::load_or_default(config.as_deref())?;
    let g = &mut cfg.gen;
    g.seed = seed.unwrap_or(g.seed);
    g.n_samples = n.unwrap_or(g.n_samples);
    g.size = size.unwrap_or(g.size);
    g.num_classes = classes.unwrap_or(g.num_classes);
    let errs = cfg.gen.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs).into());
    }
    let manifest = data::gen_synthetic(&out, &cfg.gen)?;
    print_json(&json!({
        "out": out,
        "samples": manifest.sample_count,
        "train": manifest.splits.train.len(),
        "val": manifest.splits.val.len(),
        "classes": manifest.class_names,
    }));
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    config: Option<PathBuf>,
    data_dir: Option<PathBuf>,
    out: Option<PathBuf>,
    no_fam: bool,
    fam_k: Option<String>,
    upsample: Option<UpsampleArg>,
    seed: Option<u64>,
    iters: Option<usize>,
) -> CmdResult {
    let mut cfg = RunConfig::load_or_default(config.as_deref())?;
    if data_dir.is_some() {
        cfg.data = data_dir;
    }
    if out.is_some() {
        cfg.out = out;
    }
    if no_fam {
        cfg.model.use_fam = false;
    }
    if let Some(k) = fam_k {
        cfg.model.fam.kernel = k.parse().expect("validated by clap");
    }
    if let Some(u) = upsample {
        cfg.model.fam.upsample_mode = match u {
            UpsampleArg::Bilinear => UpsampleMode::Bilinear,
            UpsampleArg::Nearest => UpsampleMode::Nearest,
        };
    }
    cfg.train.seed = seed.unwrap_or(cfg.train.seed);
    cfg.train.total_iters = iters.unwrap_or(cfg.train.total_iters);
    let mut errs = cfg.validate();
    if cfg.data.is_none() {
        errs.push("data: no dataset given (--data or \"data\" in the config)".into());
    }
    if cfg.out.is_none() {
        errs.push("out: no output directory given (--out or \"out\" in the config)".into());
    }
    if !errs.is_empty() {
        return Err(Error::Config(errs).into());
    }
    let (data_dir, out) = (cfg.data.clone().unwrap(), cfg.out.clone().unwrap());
    let ds = data::load_dataset(&data_dir)?;
    record_config(&cfg, config.as_deref(), &out)?;
    let summary = train::train_loop(&ds, &cfg.model, &cfg.train, &out)?;
    print_json(&json!({
        "out": out,
        "iters": summary.iters,
        "final_loss": summary.losses.last(),
        "best_miou": summary.best_miou,
        "final_miou": summary.final_miou,
        "seconds": summary.seconds,
    }));
    Ok(())
}

fn cmd_eval(
    checkpoint: PathBuf,
    data_dir: PathBuf,
    out_report: Option<PathBuf>,
    split: String,
    config: Option<PathBuf>,
    bench_runs: usize,
) -> CmdResult {
    let cfg = checkpoint_config(&checkpoint, config.as_deref())?;
    cfg.check()?;
    let params = load_checkpoint(&checkpoint, &cfg)?;
    let ds = data::load_dataset(&data_dir)?;
    let cm = train::evaluate(&params, &cfg.model, &ds, &split)?;
    let miou = cm.miou()?;
    let shape = Shape::new(1, 3, ds.manifest.height, ds.manifest.width);
    let latency = if bench_runs > 0 {
        Some(benchmark_forward(&params, &cfg.model, shape, cfg.bench.warmup, bench_runs)?)
    } else {
        None
    };
    let report = EvalReport {
        miou: miou.mean,
        per_class_iou: miou.per_class,
        class_names: ds.manifest.class_names.clone(),
        pixel_accuracy: cm.pixel_accuracy(),
        gflops: count_flops(&cfg.model, shape)?.gflops(),
        samples: ds.split(&split)?.len(),
        ignored_pixels: cm.ignored(),
        latency,
    };
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    if let Some(path) = out_report {
        fs::write(&path, &text).map_err(|e| io_error(&path, e))?;
    }
    println!("{text}");
    Ok(())
}

fn cmd_gradcheck(scope: ScopeArg, seeds: u64) -> CmdResult {
    let scope = match scope {
        ScopeArg::Sampler => Scope::Sampler,
        ScopeArg::Primitives => Scope::Primitives,
        ScopeArg::Fam => Scope::Fam,
        ScopeArg::Model => Scope::Model,
        ScopeArg::All => Scope::All,
    };
    let suite = gradcheck::run_suite(scope, seeds)?;
    for r in &suite.reports {
        println!(
            "{:<22} max_rel_err={:.3e} max_abs_err={:.3e} checked={:<5} {}",
            r.name,
            r.max_rel_err,
            r.max_abs_err,
            r.checked,
            if r.passed() { "PASS" } else { "FAIL" }
        );
    }
    let verdict = if suite.passed() { "PASS" } else { "FAIL" };
    println!("gradcheck {verdict} ({} seeds, {:.1}s)", seeds, suite.seconds);
    if suite.passed() {
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "gradient check failed (tolerance {:e})",
            gradcheck::TOLERANCE
        )))
    }
}

fn cmd_bench(
    checkpoint: Option<PathBuf>,
    config: Option<PathBuf>,
    shape: Option<String>,
    runs: Option<usize>,
    warmup: Option<usize>,
    no_fam: bool,
) -> CmdResult {
    let mut cfg = match &checkpoint {
        Some(c) => checkpoint_config(c, config.as_deref())?,
        None => RunConfig::load_or_default(config.as_deref())?,
    };
    if no_fam {
        cfg.model.use_fam = false;
    }
    if let Some(s) = shape {
        cfg.bench.shape = parse_shape(&s)?;
    }
    cfg.bench.runs = runs.unwrap_or(cfg.bench.runs);
    cfg.bench.warmup = warmup.unwrap_or(cfg.bench.warmup);
    cfg.check()?;
    let params = match &checkpoint {
        Some(c) => load_checkpoint(c, &cfg)?,
        None => model::init_params(&cfg.model, cfg.train.seed)?,
    };
    let [n, c, h, w] = cfg.bench.shape;
    let shape = Shape::new(n, c, h, w);
    let report = benchmark_forward(&params, &cfg.model, shape, cfg.bench.warmup, cfg.bench.runs)?;
    let gflops = count_flops(&cfg.model, shape)?.gflops();
    print_json(&json!({ "use_fam": cfg.model.use_fam, "gflops": gflops, "bench": report }));
    Ok(())
}

fn read_sample(image: &Path, label: Option<&Path>) -> flowalign::Result<(SegSample, bool)> {
    let img = data::raster_to_image(&Raster::read(image)?)?;
    let s = img.shape();
    let (labels, has_label) = match label {
        Some(p) => {
            let r = Raster::read(p)?;
            if r.channels != 1 || (r.height, r.width) != (s.h, s.w) {
                return Err(Error::Format {
                    path: p.to_path_buf(),
                    msg: format!("expected a {}x{} grayscale label map", s.w, s.h),
                });
            }
            (r.data, true)
        }
        None => (vec![flowalign::IGNORE_LABEL; s.h * s.w], false),
    };
    Ok((SegSample::new(img, data::LabelMap::new(s.h, s.w, labels)?)?, has_label))
}

fn cmd_viz(
    checkpoint: PathBuf,
    image: PathBuf,
    label: Option<PathBuf>,
    out_dir: PathBuf,
    config: Option<PathBuf>,
    levels: Vec<String>,
) -> CmdResult {
    let mut cfg = checkpoint_config(&checkpoint, config.as_deref())?;
    if !levels.is_empty() {
        cfg.viz.levels = levels;
    }
    cfg.check()?;
    let params = load_checkpoint(&checkpoint, &cfg)?;
    let (sample, has_label) = read_sample(&image, label.as_deref())?;
    fs::create_dir_all(&out_dir).map_err(|e| io_error(&out_dir, e))?;
    let (h, w) = (sample.label.h, sample.label.w);

    let mut tape = Tape::new();
    let bound = params.bind_frozen(&mut tape)?;
    let x = tape.constant(sample.image.clone())?;
    let out = model::model_forward(&mut tape, x, &bound, &cfg.model, Mode::Eval)?;
    let pred: Vec<u8> = tape
        .value(out.logits)
        .argmax_channels()
        .into_iter()
        .map(|c| c as u8)
        .collect();
    let palette = data::palette(cfg.model.num_classes);
    let mut written = Vec::new();
    let mut save = |name: String, img: Raster| -> CmdResult {
        let path = out_dir.join(&name);
        viz::write_ppm(&img, &path)?;
        written.push(name);
        Ok(())
    };
    save("input.ppm".into(), data::image_to_raster(&sample.image)?)?;
    save("prediction.ppm".into(), viz::label_map(&pred, w, h, &palette)?)?;
    if has_label {
        save("label.ppm".into(), viz::label_map(&sample.label.data, w, h, &palette)?)?;
        save("error.ppm".into(), viz::error_map(&pred, &sample.label.data, w, h, &palette)?)?;
    }
    for (level, &v) in &out.pyramid.levels {
        save(format!("feature_F{level}.ppm"), viz::feature_heatmap(tape.value(v))?)?;
    }
    for (level, &v) in &out.pyramid.refined {
        save(format!("feature_refined_F{level}.ppm"), viz::feature_heatmap(tape.value(v))?)?;
    }
    for (prefix, &flow) in &out.flows {
        if !cfg.viz.levels.is_empty() && !cfg.viz.levels.contains(prefix) {
            continue;
        }
        let view = viz::upsample_flow_for_view(tape.value(flow), h, w)?;
        save(format!("flow_{prefix}_color.ppm"), viz::flow_to_color(&view, None)?)?;
        save(
            format!("flow_{prefix}_arrows.ppm"),
            viz::flow_arrows(&view, cfg.viz.arrow_stride, cfg.viz.arrow_scale)?,
        )?;
    }
    info!("wrote {} images to {}", written.len(), out_dir.display());
    print_json(&json!({ "out_dir": out_dir, "files": written }));
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_ablate(
    config: Option<PathBuf>,
    data_dir: Option<PathBuf>,
    out: Option<PathBuf>,
    seeds: Option<String>,
    iters: Option<usize>,
    kernel_iters: Option<usize>,
    skip_kernel_grid: bool,
    skip_decoder_grid: bool,
) -> CmdResult {
    let mut cfg = RunConfig::load_or_default(config.as_deref())?;
    if data_dir.is_some() {
        cfg.data = data_dir;
    }
    if out.is_some() {
        cfg.out = out;
    }
    if let Some(s) = seeds {
        cfg.ablation.seeds = s
            .split(',')
            .map(|x| x.trim().parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| config_error(format!("bad seed list {s:?}")))?;
    }
    cfg.train.total_iters = iters.unwrap_or(cfg.train.total_iters);
    cfg.ablation.kernel_iters = kernel_iters.unwrap_or(cfg.ablation.kernel_iters);
    cfg.ablation.run_kernel_grid &= !skip_kernel_grid;
    cfg.ablation.run_decoder_grid &= !skip_decoder_grid;
    let mut errs = cfg.validate();
    if cfg.data.is_none() {
        errs.push("data: no dataset given".into());
    }
    if cfg.out.is_none() {
        errs.push("out: no output directory given".into());
    }
    if !errs.is_empty() {
        return Err(Error::Config(errs).into());
    }
    let (data_dir, out) = (cfg.data.clone().unwrap(), cfg.out.clone().unwrap());
    let ds = data::load_dataset(&data_dir)?;
    record_config(&cfg, config.as_deref(), &out)?;
    let rows = ablation::run_ablation(&ds, &cfg.model, &cfg.train, &cfg.ablation, &out)?;
    print!("{}", ablation::format_table(&rows, &ablation::summarize(&rows)));
    Ok(())
}

fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::GenData {
            config,
            seed,
            n,
            size,
            classes,
            out,
        } => cmd_gen_data(config, seed, n, size, classes, out),
        Command::Train {
            config,
            data,
            out,
            no_fam,
            fam_k,
            upsample,
            seed,
            iters,
        } => cmd_train(config, data, out, no_fam, fam_k, upsample, seed, iters),
        Command::Eval {
            checkpoint,
            data,
            out_report,
            split,
            config,
            bench_runs,
        } => cmd_eval(checkpoint, data, out_report, split, config, bench_runs),
        Command::Gradcheck { scope, seeds } => cmd_gradcheck(scope, seeds),
        Command::Bench {
            checkpoint,
            config,
            shape,
            runs,
            warmup,
            no_fam,
        } => cmd_bench(checkpoint, config, shape, runs, warmup, no_fam),
        Command::Viz {
            checkpoint,
            image,
            label,
            out_dir,
            config,
            level,
        } => cmd_viz(checkpoint, image, label, out_dir, config, level),
        Command::Ablate {
            config,
            data,
            out,
            seeds,
            iters,
            kernel_iters,
            skip_kernel_grid,
            skip_decoder_grid,
        } => cmd_ablate(
            config,
            data,
            out,
            seeds,
            iters,
            kernel_iters,
            skip_kernel_grid,
            skip_decoder_grid,
        ),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (kind, code) = f.kind_and_code();
            let line = json!({ "error": kind, "exit_code": code, "message": f.message().replace('\n', " ") });
            eprintln!("{line}");
            ExitCode::from(code)
        }
    }
}
