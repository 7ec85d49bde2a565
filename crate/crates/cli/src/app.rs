//! Argument parsing and command orchestration for the `socprob` binary.
//!
//! Progress goes to standard error; machine-readable results go to
//! standard output and, when `--out` is given, to files with a JSON run
//! manifest beside each artifact. Exit codes: 0 success, 1 usage,
//! 2 data/format, 3 numeric failure.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use socprob_core::evaluation::{
    ablation_sweep, evaluate_baseline_scene, linear_baseline, rollout, stationary_baseline,
    AblationEntry, AblationKind, DecodeMode, MetricReport, NeighborMode, RolloutOutcome,
    average_report,
};
use socprob_core::prob_map::{encode_frame, fit_grid};
use socprob_core::trajectory::{leave_one_out, scene_to_tsv, Scene};
use socprob_core::training::{prepare_scene, train, SceneSamples, TrainConfig};

use crate::checkpoint;
use crate::config::{parse_grid, Settings};
use crate::dataio;
use crate::error::{CliError, Result};
use crate::evalpar::{evaluate_scene_parallel, thread_pool};
use crate::export;
use crate::fsutil;
use crate::gradcheck;
use crate::manifest::ManifestBuilder;

#[derive(Parser)]
#[command(
    name = "socprob",
    version,
    about = "Pedestrian trajectory forecasting on probability maps"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate scene annotations and report corpus statistics
    Ingest(IngestArgs),
    /// Encode one frame of a scene as a probability-map image
    Encode(EncodeArgs),
    /// Train a model; writes a checkpoint and its loss log
    Train(TrainArgs),
    /// Roll a trained model forward over one sample window
    Predict(PredictArgs),
    /// Score a checkpoint or baseline on a held-out scene; run sweeps
    Eval(EvalArgs),
    /// Leave-one-out baseline benchmark over every scene
    Baseline(BaselineArgs),
    /// Write ground-truth maps and overlays for one sample window
    Export(ExportArgs),
    /// Compare analytic gradients against finite differences
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct DataOpts {
    /// Scene directory of <name>.txt files; defaults to $SOCPROB_DATA
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
}

/// Settings shared by commands that build maps and windows. Applied on
/// top of defaults and the optional `--config` file, in that order.
#[derive(Args)]
struct ConfigOpts {
    /// key=value settings file (between defaults and flags)
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Map grid as WxH cells
    #[arg(long, value_name = "WxH")]
    grid: Option<String>,
    /// Gaussian spread for the prediction target, meters
    #[arg(long, value_name = "M")]
    sigma_target: Option<f64>,
    /// Gaussian spread for other pedestrians, meters
    #[arg(long, value_name = "M")]
    sigma_other: Option<f64>,
    /// Observed steps per window
    #[arg(long, value_name = "N")]
    obs_len: Option<usize>,
    /// Predicted steps per window
    #[arg(long, value_name = "N")]
    pred_len: Option<usize>,
    /// Encode only the target (drop neighbors from the maps)
    #[arg(long)]
    no_integration: bool,
    /// Sampled rollouts per prediction (best-of-k)
    #[arg(long, value_name = "N")]
    k: Option<usize>,
    /// Seed for every random choice this command makes
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Steps between consecutive window starts
    #[arg(long, value_name = "N")]
    window_stride: Option<usize>,
    /// Fractional margin around the scene when fitting the grid
    #[arg(long, value_name = "F")]
    margin_frac: Option<f64>,
}

impl ConfigOpts {
    fn resolve(&self) -> Result<Settings> {
        let mut s = Settings::default();
        if let Some(path) = &self.config {
            let text = fsutil::read_text(path)?;
            s.apply_file(&text, path)?;
        }
        if let Some(grid) = &self.grid {
            let (w, h) = parse_grid(grid)?;
            s.train.grid_width = w;
            s.train.grid_height = h;
        }
        let t = &mut s.train;
        if let Some(v) = self.sigma_target {
            t.sigma_target = v;
        }
        if let Some(v) = self.sigma_other {
            t.sigma_other = v;
        }
        if let Some(v) = self.obs_len {
            t.obs_len = v;
        }
        if let Some(v) = self.pred_len {
            t.pred_len = v;
        }
        if self.no_integration {
            t.integrate_neighbors = false;
        }
        if let Some(v) = self.seed {
            t.seed = v;
        }
        if let Some(v) = self.k {
            s.k = v;
        }
        if let Some(v) = self.window_stride {
            s.window_stride = v;
        }
        if let Some(v) = self.margin_frac {
            s.margin_frac = v;
        }
        Ok(s)
    }
}

#[derive(Args)]
struct TrainOpts {
    /// Adam learning rate
    #[arg(long, value_name = "F")]
    lr: Option<f64>,
    #[arg(long, value_name = "N")]
    batch_size: Option<usize>,
    #[arg(long, value_name = "N")]
    epochs: Option<usize>,
    /// Hidden channels per layer, comma separated (e.g. 8,4)
    #[arg(long, value_name = "LIST")]
    channels: Option<String>,
    #[arg(long, value_name = "N")]
    kernel_size: Option<usize>,
    /// Global gradient clipping threshold
    #[arg(long, value_name = "F")]
    clip_norm: Option<f64>,
}

impl TrainOpts {
    fn apply(&self, s: &mut Settings) -> Result<()> {
        let t = &mut s.train;
        if let Some(v) = self.lr {
            t.lr = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.epochs {
            t.epochs = v;
        }
        if let Some(v) = self.kernel_size {
            t.kernel_size = v;
        }
        if let Some(v) = self.clip_norm {
            t.clip_norm = v;
        }
        if let Some(list) = &self.channels {
            s.set("hidden_channels", list)?;
        }
        Ok(())
    }
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum DecodeArg {
    Argmax,
    Sample,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum BaselineArg {
    Linear,
    Stationary,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum AblationArg {
    MapSize,
    Integration,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum FormatArg {
    Pgm,
    Csv,
    Both,
}

#[derive(Args)]
struct IngestArgs {
    #[command(flatten)]
    data: DataOpts,
    /// Also write one normalized TSV per scene into this directory
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EncodeArgs {
    #[command(flatten)]
    data: DataOpts,
    #[command(flatten)]
    config: ConfigOpts,
    /// Scene to encode from
    #[arg(long, value_name = "NAME")]
    scene: String,
    /// Scene step to encode (0-based)
    #[arg(long, value_name = "N", default_value_t = 0)]
    step: i64,
    /// Target pedestrian id; defaults to the lowest id present
    #[arg(long, value_name = "ID")]
    ped: Option<i64>,
    /// Output image; `.pgm` or `.csv` picks the format
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataOpts,
    #[command(flatten)]
    config: ConfigOpts,
    #[command(flatten)]
    train: TrainOpts,
    /// Leave this scene out of training
    #[arg(long, value_name = "NAME", conflicts_with = "scene")]
    held_out: Option<String>,
    /// Train on this single scene only
    #[arg(long, value_name = "NAME")]
    scene: Option<String>,
    /// Cap the total number of training samples
    #[arg(long, value_name = "N")]
    limit_samples: Option<usize>,
    /// Checkpoint output path
    #[arg(long, value_name = "PATH", default_value = "model.sprb")]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    data: DataOpts,
    /// Trained checkpoint to roll forward
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    /// Scene holding the sample window
    #[arg(long, value_name = "NAME")]
    scene: String,
    /// Sample window index within the scene
    #[arg(long, value_name = "N", default_value_t = 0)]
    sample: usize,
    /// Emit only one decode mode (default: argmax and k samples)
    #[arg(long, value_enum, value_name = "MODE")]
    decode: Option<DecodeArg>,
    /// Pin neighbors at their last observed position
    #[arg(long)]
    frozen_neighbors: bool,
    /// Encode only the target (drop neighbors from the maps)
    #[arg(long)]
    no_integration: bool,
    /// Also write the per-step predicted maps as PGM images
    #[arg(long)]
    maps: bool,
    /// Sampled rollouts to emit
    #[arg(long, value_name = "N", default_value_t = 20)]
    k: usize,
    #[arg(long, value_name = "N", default_value_t = 0)]
    seed: u64,
    /// Output directory
    #[arg(long, value_name = "DIR", default_value = "prediction")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataOpts,
    #[command(flatten)]
    config: ConfigOpts,
    /// Trained checkpoint; repeat for sweep entries
    #[arg(long, value_name = "PATH")]
    checkpoint: Vec<PathBuf>,
    /// Scene to evaluate (the leave-one-out test set)
    #[arg(long, value_name = "NAME")]
    held_out: Option<String>,
    /// Score a closed-form baseline instead of a model
    #[arg(long, value_enum, value_name = "KIND")]
    baseline: Option<BaselineArg>,
    /// Run a configuration sweep instead of a single evaluation
    #[arg(long, value_enum, value_name = "KIND")]
    ablation: Option<AblationArg>,
    /// Square grid sizes for the map-size sweep
    #[arg(long, value_name = "LIST", default_value = "80,100,150,200")]
    sizes: String,
    /// Pin neighbors at their last observed position during rollout
    #[arg(long)]
    frozen_neighbors: bool,
    /// Worker threads (default: available cores)
    #[arg(long, value_name = "N")]
    threads: Option<usize>,
    /// Write the metrics CSV here as well as to standard output
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BaselineArgs {
    #[command(flatten)]
    data: DataOpts,
    #[command(flatten)]
    config: ConfigOpts,
    /// Which closed-form predictor to score
    #[arg(long, value_enum, value_name = "KIND", default_value_t = BaselineArg::Linear)]
    baseline: BaselineArg,
    /// Write the metrics CSV here as well as to standard output
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[command(flatten)]
    data: DataOpts,
    #[command(flatten)]
    config: ConfigOpts,
    /// Scene holding the sample window
    #[arg(long, value_name = "NAME")]
    scene: String,
    /// Sample window index within the scene
    #[arg(long, value_name = "N", default_value_t = 0)]
    sample: usize,
    /// Map file format
    #[arg(long, value_enum, value_name = "FMT", default_value_t = FormatArg::Both)]
    format: FormatArg,
    /// Output directory
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Single-layer witness configuration (fast)
    #[arg(long)]
    tiny: bool,
    #[arg(long, value_name = "N", default_value_t = 0)]
    seed: u64,
}

/// Parses argv and runs the chosen command; returns the exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Ingest(a) => cmd_ingest(a),
        Command::Encode(a) => cmd_encode(a),
        Command::Train(a) => cmd_train(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Baseline(a) => cmd_baseline(a),
        Command::Export(a) => cmd_export(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load_scenes(data: &DataOpts) -> Result<(PathBuf, Vec<Scene>)> {
    let dir = dataio::resolve_data_dir(data.data.as_deref())?;
    let scenes = dataio::load_dir(&dir)?;
    Ok((dir, scenes))
}

fn progress(msg: &str) {
    eprintln!("[socprob] {msg}");
}

/// Prints to stdout without mixing into progress output.
fn emit(text: &str) {
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(text.as_bytes());
}

fn cmd_ingest(args: IngestArgs) -> Result<i32> {
    let (dir, scenes) = load_scenes(&args.data)?;
    progress(&format!("loaded {} scene(s) from {}", scenes.len(), dir.display()));

    let mut csv = String::from(
        "scene,pedestrians,points,frame_base,frame_stride,min_x,min_y,max_x,max_y\n",
    );
    for scene in &scenes {
        let (lo, hi) = scene.bounds();
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            scene.name,
            scene.trajectories().len(),
            scene.num_points(),
            scene.frame_base(),
            scene.frame_stride(),
            lo.x,
            lo.y,
            hi.x,
            hi.y
        ));
    }
    emit(&csv);

    if let Some(out_dir) = &args.out {
        let mut manifest = ManifestBuilder::new("ingest", Default::default(), 0);
        manifest.input(&dir);
        for scene in &scenes {
            let path = out_dir.join(format!("{}.tsv", scene.name));
            fsutil::write_atomic(&path, scene_to_tsv(scene).as_bytes())?;
            manifest.output(&path);
        }
        let summary = out_dir.join("scenes.csv");
        fsutil::write_atomic(&summary, csv.as_bytes())?;
        manifest.output(&summary);
        manifest.finish(None)?;
        progress(&format!("wrote normalized scenes to {}", out_dir.display()));
    }
    Ok(0)
}

fn cmd_encode(args: EncodeArgs) -> Result<i32> {
    let s = args.config.resolve()?;
    let (dir, scenes) = load_scenes(&args.data)?;
    let scene = dataio::select_scene(&scenes, &args.scene)?;

    let points: Vec<_> = scene
        .trajectories()
        .iter()
        .flat_map(|t| t.positions.iter().copied())
        .collect();
    let spec = fit_grid(
        &points,
        s.train.grid_width,
        s.train.grid_height,
        s.margin_frac,
    )?;
    let frame = scene.positions_at_step(args.step);
    if frame.is_empty() {
        return Err(CliError::usage(format!(
            "scene {} has no pedestrians at step {}",
            scene.name, args.step
        )));
    }
    let target = match args.ped {
        Some(id) => id,
        None => frame[0].0,
    };
    if !frame.iter().any(|&(id, _)| id == target) {
        return Err(CliError::usage(format!(
            "pedestrian {target} is not present at step {}",
            args.step
        )));
    }
    let map = encode_frame::<f64>(&frame, target, &spec, &s.train.encode_options())?;

    let body = match args.out.extension().and_then(|e| e.to_str()) {
        Some("pgm") => export::pgm_string(&map),
        Some("csv") => export::heatmap_csv(&map),
        _ => {
            return Err(CliError::usage(format!(
                "--out must end in .pgm or .csv, got {}",
                args.out.display()
            )))
        }
    };
    fsutil::write_atomic(&args.out, body.as_bytes())?;
    let mut manifest = ManifestBuilder::new("encode", s.resolved_map(), s.train.seed);
    manifest.input(&dir);
    manifest.output(&args.out);
    manifest.finish(None)?;
    progress(&format!(
        "encoded scene {} step {} target {} -> {}",
        scene.name,
        args.step,
        target,
        args.out.display()
    ));
    Ok(0)
}

fn cmd_train(args: TrainArgs) -> Result<i32> {
    let mut s = args.config.resolve()?;
    args.train.apply(&mut s)?;
    let (dir, scenes) = load_scenes(&args.data)?;

    let chosen: Vec<&Scene> = match (&args.scene, &args.held_out) {
        (Some(name), _) => vec![dataio::select_scene(&scenes, name)?],
        (None, Some(held)) => leave_one_out(&scenes, held)?.0,
        (None, None) => scenes.iter().collect(),
    };
    if chosen.is_empty() {
        return Err(CliError::usage("no scenes left to train on".to_string()));
    }

    let mut prepared: Vec<SceneSamples> = Vec::with_capacity(chosen.len());
    for scene in &chosen {
        prepared.push(prepare_scene(scene, &s.train, s.margin_frac, s.window_stride)?);
    }
    if let Some(limit) = args.limit_samples {
        let mut left = limit;
        for data in &mut prepared {
            let keep = data.samples.len().min(left);
            data.samples.truncate(keep);
            left -= keep;
        }
        prepared.retain(|d| !d.samples.is_empty());
    }
    let total: usize = prepared.iter().map(|d| d.samples.len()).sum();
    progress(&format!(
        "training on {} scene(s), {} sample(s), {} epoch(s)",
        prepared.len(),
        total,
        s.train.epochs
    ));

    let run = train(&prepared, &s.train)?;
    for (i, loss) in run.loss_log.iter().enumerate() {
        progress(&format!("epoch {}/{}: mean_loss={loss}", i + 1, s.train.epochs));
    }

    checkpoint::save(&run.checkpoint, &args.out)?;
    let loss_csv = export::loss_log_csv(&run.loss_log);
    let loss_path = sibling(&args.out, ".loss.csv");
    fsutil::write_atomic(&loss_path, loss_csv.as_bytes())?;
    emit(&loss_csv);

    let mut manifest = ManifestBuilder::new("train", s.resolved_map(), s.train.seed);
    manifest.input(&dir);
    manifest.output(&args.out);
    manifest.output(&loss_path);
    manifest.finish(None)?;
    progress(&format!("checkpoint written to {}", args.out.display()));
    Ok(0)
}

/// `model.sprb` -> `model<suffix>` next to it.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_os_string())
        .unwrap_or_else(|| "out".into());
    let mut name = stem;
    name.push(suffix);
    path.with_file_name(name)
}

fn cmd_predict(args: PredictArgs) -> Result<i32> {
    let ckpt = checkpoint::load(&args.checkpoint)?;
    let mut cfg = ckpt.config.clone();
    if args.no_integration {
        cfg.integrate_neighbors = false;
    }
    let (dir, scenes) = load_scenes(&args.data)?;
    let scene = dataio::select_scene(&scenes, &args.scene)?;
    let data = prepare_scene(
        scene,
        &cfg,
        socprob_core::training::DEFAULT_MARGIN_FRAC,
        1,
    )?;
    let sample = data.samples.get(args.sample).ok_or_else(|| {
        CliError::usage(format!(
            "scene {} has {} sample window(s); --sample {} is out of range",
            scene.name,
            data.samples.len(),
            args.sample
        ))
    })?;
    let neighbors = if args.frozen_neighbors {
        NeighborMode::Frozen
    } else {
        NeighborMode::Joint
    };

    let mut manifest = ManifestBuilder::new("predict", predict_config(&cfg, args.k), args.seed);
    manifest.input(&args.checkpoint);
    manifest.input(&dir);
    let mut fallbacks = 0usize;
    let mut first_overlay: Option<String> = None;

    let run_one = |mode: DecodeMode, stream: u64| -> Result<RolloutOutcome<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
        rng.set_stream(stream);
        Ok(rollout(
            &ckpt.params,
            sample,
            &data.spec,
            &cfg,
            mode,
            neighbors,
            &mut rng,
        )?)
    };

    if args.decode != Some(DecodeArg::Sample) {
        let outcome = run_one(DecodeMode::Argmax, 0)?;
        fallbacks += outcome.fallbacks;
        let overlay = export::overlay_csv(sample, Some(&outcome));
        let path = args.out.join("overlay_argmax.csv");
        fsutil::write_atomic(&path, overlay.as_bytes())?;
        manifest.output(&path);
        if args.maps {
            for (m, map) in outcome.target_maps.iter().enumerate() {
                let p = args.out.join(format!("map_argmax_step{m:02}.pgm"));
                fsutil::write_atomic(&p, export::pgm_string(map).as_bytes())?;
                manifest.output(&p);
            }
        }
        first_overlay = Some(overlay);
    }
    if args.decode != Some(DecodeArg::Argmax) {
        if args.k == 0 {
            return Err(CliError::usage("--k must be at least 1".to_string()));
        }
        for j in 0..args.k {
            let outcome = run_one(DecodeMode::Sample, j as u64)?;
            fallbacks += outcome.fallbacks;
            let overlay = export::overlay_csv(sample, Some(&outcome));
            let path = args.out.join(format!("overlay_sample{j:02}.csv"));
            fsutil::write_atomic(&path, overlay.as_bytes())?;
            manifest.output(&path);
            if first_overlay.is_none() {
                first_overlay = Some(overlay);
            }
        }
    }

    if fallbacks > 0 {
        progress(&format!(
            "{fallbacks} decode step(s) fell back to the previous position"
        ));
    }
    emit(first_overlay.as_deref().unwrap_or(""));
    manifest.finish(None)?;
    progress(&format!("prediction artifacts in {}", args.out.display()));
    Ok(0)
}

/// Checkpoint-derived settings recorded in predict/eval manifests.
fn predict_config(
    cfg: &TrainConfig,
    k: usize,
) -> std::collections::BTreeMap<String, String> {
    let mut s = Settings::default();
    s.train = cfg.clone();
    s.k = k;
    s.resolved_map()
}

fn cmd_eval(args: EvalArgs) -> Result<i32> {
    let mut s = args.config.resolve()?;
    let (dir, scenes) = load_scenes(&args.data)?;
    let held_out = args.held_out.as_deref().ok_or_else(|| {
        CliError::usage("eval needs --held-out <SCENE>".to_string())
    })?;
    let (_, test_scene) = leave_one_out(&scenes, held_out)?;

    if let Some(kind) = args.ablation {
        return eval_ablation(&args, s, &dir, test_scene, kind);
    }

    let report = if let Some(kind) = args.baseline {
        if !args.checkpoint.is_empty() {
            return Err(CliError::usage(
                "--baseline and --checkpoint are mutually exclusive".to_string(),
            ));
        }
        let data = prepare_scene(test_scene, &s.train, s.margin_frac, s.window_stride)?;
        run_baseline(kind, &data)?
    } else {
        let [ckpt_path] = args.checkpoint.as_slice() else {
            return Err(CliError::usage(
                "eval needs exactly one --checkpoint (or --baseline)".to_string(),
            ));
        };
        let ckpt = checkpoint::load(ckpt_path)?;
        let mut cfg = ckpt.config.clone();
        override_eval_config(&mut cfg, &args.config);
        s.train = cfg.clone();
        let data = prepare_scene(test_scene, &cfg, s.margin_frac, s.window_stride)?;
        let neighbors = if args.frozen_neighbors {
            NeighborMode::Frozen
        } else {
            NeighborMode::Joint
        };
        progress(&format!(
            "evaluating {} sample(s) of {} (k={}, seed={})",
            data.samples.len(),
            data.name,
            s.k,
            s.train.seed
        ));
        let pool = thread_pool(args.threads)?;
        evaluate_scene_parallel(
            &ckpt.params,
            &data,
            &cfg,
            neighbors,
            s.k,
            s.train.seed,
            &pool,
        )?
    };

    let csv = export::metrics_csv(std::slice::from_ref(&report));
    emit(&csv);
    if let Some(out) = &args.out {
        fsutil::write_atomic(out, csv.as_bytes())?;
        let mut manifest = ManifestBuilder::new("eval", s.resolved_map(), s.train.seed);
        manifest.input(&dir);
        for c in &args.checkpoint {
            manifest.input(c);
        }
        manifest.output(out);
        manifest.finish(None)?;
    }
    Ok(0)
}

/// Flags that may retune a loaded checkpoint's evaluation-time encoding;
/// the model structure itself always comes from the file.
fn override_eval_config(cfg: &mut TrainConfig, opts: &ConfigOpts) {
    if let Some(v) = opts.sigma_target {
        cfg.sigma_target = v;
    }
    if let Some(v) = opts.sigma_other {
        cfg.sigma_other = v;
    }
    if opts.no_integration {
        cfg.integrate_neighbors = false;
    }
    if let Some(v) = opts.seed {
        cfg.seed = v;
    } else {
        cfg.seed = 0;
    }
}

fn run_baseline(kind: BaselineArg, data: &SceneSamples) -> Result<MetricReport> {
    let pred_len = data
        .samples
        .first()
        .map(|smp| smp.pred_len())
        .unwrap_or(0);
    let report = match kind {
        BaselineArg::Linear => evaluate_baseline_scene(&data.name, data, |smp| {
            linear_baseline(&smp.observed, pred_len)
        })?,
        BaselineArg::Stationary => evaluate_baseline_scene(&data.name, data, |smp| {
            stationary_baseline(&smp.observed, pred_len)
        })?,
    };
    Ok(report)
}

fn eval_ablation(
    args: &EvalArgs,
    s: Settings,
    dir: &Path,
    scene: &Scene,
    kind: AblationArg,
) -> Result<i32> {
    let checkpoints: Vec<_> = args
        .checkpoint
        .iter()
        .map(|p| checkpoint::load(p))
        .collect::<Result<_>>()?;

    let (kind, entries, base) = match kind {
        AblationArg::Integration => {
            let [on, off] = checkpoints.as_slice() else {
                return Err(CliError::usage(
                    "integration sweep needs exactly two --checkpoint files \
                     (trained with and without integration)"
                        .to_string(),
                ));
            };
            // Order entries on-first regardless of argument order.
            let (on, off) = if on.config.integrate_neighbors {
                (on, off)
            } else {
                (off, on)
            };
            let mut base = on.config.clone();
            base.seed = s.train.seed;
            let entries = vec![
                AblationEntry {
                    label: "integration_on".to_string(),
                    grid: (on.config.grid_width, on.config.grid_height),
                    integrate_neighbors: true,
                    params: Some(&on.params),
                },
                AblationEntry {
                    label: "integration_off".to_string(),
                    grid: (off.config.grid_width, off.config.grid_height),
                    integrate_neighbors: false,
                    params: Some(&off.params),
                },
            ];
            (AblationKind::Integration, entries, base)
        }
        AblationArg::MapSize => {
            let sizes: Vec<usize> = args
                .sizes
                .split(',')
                .map(|t| {
                    t.trim().parse().map_err(|_| {
                        CliError::usage(format!("bad --sizes entry '{}'", t.trim()))
                    })
                })
                .collect::<Result<_>>()?;
            if sizes.is_empty() {
                return Err(CliError::usage("--sizes must not be empty".to_string()));
            }
            if !checkpoints.is_empty() && checkpoints.len() != sizes.len() {
                return Err(CliError::usage(format!(
                    "map-size sweep needs no checkpoints (decode ground truth) \
                     or one per size ({} sizes, {} checkpoints)",
                    sizes.len(),
                    checkpoints.len()
                )));
            }
            let base = match checkpoints.first() {
                Some(c) => {
                    let mut base = c.config.clone();
                    base.seed = s.train.seed;
                    base
                }
                None => s.train.clone(),
            };
            let entries = sizes
                .iter()
                .enumerate()
                .map(|(i, &n)| AblationEntry {
                    label: format!("grid{n}"),
                    grid: (n, n),
                    integrate_neighbors: base.integrate_neighbors,
                    params: checkpoints.get(i).map(|c| &c.params),
                })
                .collect();
            (AblationKind::MapSize, entries, base)
        }
    };

    progress(&format!(
        "sweep over {} configuration(s) on scene {}",
        entries.len(),
        scene.name
    ));
    let rows = ablation_sweep(kind, &entries, scene, &base, s.k, base.seed)?;
    let csv = export::ablation_csv(&rows, s.k, base.seed);
    emit(&csv);
    if let Some(out) = &args.out {
        fsutil::write_atomic(out, csv.as_bytes())?;
        let mut manifest = ManifestBuilder::new("eval", s.resolved_map(), base.seed);
        manifest.input(dir);
        for c in &args.checkpoint {
            manifest.input(c);
        }
        manifest.output(out);
        manifest.finish(None)?;
    }
    Ok(0)
}

fn cmd_baseline(args: BaselineArgs) -> Result<i32> {
    let s = args.config.resolve()?;
    let (dir, scenes) = load_scenes(&args.data)?;

    let mut reports = Vec::with_capacity(scenes.len());
    for scene in &scenes {
        // Leave-one-out framing: the closed-form baseline has nothing to
        // fit, but each scene is still scored as the held-out split.
        let (_, test_scene) = leave_one_out(&scenes, &scene.name)?;
        let data = prepare_scene(test_scene, &s.train, s.margin_frac, s.window_stride)?;
        if data.samples.is_empty() {
            progress(&format!("scene {} yields no sample windows; skipped", scene.name));
            continue;
        }
        reports.push(run_baseline(args.baseline, &data)?);
    }
    if reports.is_empty() {
        return Err(CliError::usage(
            "no scene yields a single sample window".to_string(),
        ));
    }
    if reports.len() > 1 {
        let avg = average_report(&reports)?;
        reports.push(avg);
    }
    let csv = export::metrics_csv(&reports);
    emit(&csv);
    if let Some(out) = &args.out {
        fsutil::write_atomic(out, csv.as_bytes())?;
        let mut manifest = ManifestBuilder::new("baseline", s.resolved_map(), 0);
        manifest.input(&dir);
        manifest.output(out);
        manifest.finish(None)?;
    }
    Ok(0)
}

fn cmd_export(args: ExportArgs) -> Result<i32> {
    let s = args.config.resolve()?;
    let (dir, scenes) = load_scenes(&args.data)?;
    let scene = dataio::select_scene(&scenes, &args.scene)?;
    let data = prepare_scene(scene, &s.train, s.margin_frac, s.window_stride)?;
    let sample = data.samples.get(args.sample).ok_or_else(|| {
        CliError::usage(format!(
            "scene {} has {} sample window(s); --sample {} is out of range",
            scene.name,
            data.samples.len(),
            args.sample
        ))
    })?;

    let mut manifest = ManifestBuilder::new("export", s.resolved_map(), s.train.seed);
    manifest.input(&dir);
    let opts = s.train.encode_options();
    let write_map =
        |map: &socprob_core::prob_map::ProbMap<f64>, stem: &str, manifest: &mut ManifestBuilder| -> Result<()> {
            if args.format != FormatArg::Csv {
                let p = args.out.join(format!("{stem}.pgm"));
                fsutil::write_atomic(&p, export::pgm_string(map).as_bytes())?;
                manifest.output(&p);
            }
            if args.format != FormatArg::Pgm {
                let p = args.out.join(format!("{stem}.csv"));
                fsutil::write_atomic(&p, export::heatmap_csv(map).as_bytes())?;
                manifest.output(&p);
            }
            Ok(())
        };

    for (t, pos) in sample.observed.iter().enumerate() {
        let mut frame = vec![(sample.target_id, *pos)];
        for nb in &sample.neighbors_observed {
            if let Some(p) = nb.steps[t] {
                frame.push((nb.id, p));
            }
        }
        let map = encode_frame::<f64>(&frame, sample.target_id, &data.spec, &opts)?;
        write_map(&map, &format!("gt_obs_step{t:02}"), &mut manifest)?;
    }
    for (m, pos) in sample.future.iter().enumerate() {
        let mut frame = vec![(sample.target_id, *pos)];
        for nb in &sample.neighbors_future {
            if let Some(p) = nb.steps[m] {
                frame.push((nb.id, p));
            }
        }
        let map = encode_frame::<f64>(&frame, sample.target_id, &data.spec, &opts)?;
        write_map(&map, &format!("gt_future_step{m:02}"), &mut manifest)?;
    }
    let overlay = export::overlay_csv::<f64>(sample, None);
    let overlay_path = args.out.join("overlay.csv");
    fsutil::write_atomic(&overlay_path, overlay.as_bytes())?;
    manifest.output(&overlay_path);
    emit(&overlay);
    manifest.finish(None)?;
    progress(&format!(
        "wrote {} map step(s) for scene {} sample {} to {}",
        sample.obs_len() + sample.pred_len(),
        scene.name,
        args.sample,
        args.out.display()
    ));
    Ok(0)
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<i32> {
    progress(&format!(
        "gradient check ({}, seed {})",
        if args.tiny { "tiny" } else { "full" },
        args.seed
    ));
    let report = gradcheck::run(args.tiny, args.seed)?;
    let mut csv = String::from("tensor,max_rel_err\n");
    for (name, err) in &report.rows {
        csv.push_str(&format!("{name},{err}\n"));
    }
    emit(&csv);
    if report.passed() {
        progress(&format!(
            "PASS: max relative error {:.3e} < {:.0e}",
            report.max_rel_err, report.threshold
        ));
        Ok(0)
    } else {
        progress(&format!(
            "FAIL: max relative error {:.3e} >= {:.0e}",
            report.max_rel_err, report.threshold
        ));
        Ok(3)
    }
}
