//! Command-line driver: dataset generation, MAE pretraining, training,
//! rendering, evaluation, verification, and parameter arithmetic.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage, 3 I/O,
//! 4 config/shape mismatch.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use nvist_core::camera::{relativize_pose, CameraPose};
use nvist_core::model::{count_parameters, ModelConfig};
use nvist_core::render::{render_image, RenderOptions};
use nvist_core::scene::{generate_dataset, write_ppm, DatasetOptions, BACKGROUND};
use nvist_core::train::{
    evaluate, load_checkpoint, pretrain_mae, train, Dataset, Harness, MaeTrainConfig, TrainConfig,
};
use nvist_core::verify::{run_all, run_suite, SuiteReport};
use nvist_core::Error;

#[derive(Parser)]
#[command(name = "nvist", version, about = "Single-image novel view synthesis at desk scale")]
struct Cli {
    /// Thread count (or env NVIST_THREADS). Compute is single-threaded and
    /// bit-reproducible by design; values above 1 are accepted and recorded
    /// but do not change execution.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a procedural multi-view dataset with analytic ray tracing
    GenData(GenDataArgs),
    /// Masked-autoencoder pretraining of the encoder
    PretrainMae(PretrainArgs),
    /// Train the full model
    Train(TrainArgs),
    /// Render novel views from a trained checkpoint
    Render(RenderArgs),
    /// Evaluate held-out scenes of a dataset
    Eval(EvalArgs),
    /// Run the numeric verification suites at 64-bit
    Verify(VerifyArgs),
    /// Report token counts and parameter arithmetic for a preset
    ParamCount(ParamCountArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    scenes: Option<usize>,
    #[arg(long)]
    views: Option<usize>,
    /// Image size as WxH
    #[arg(long)]
    size: Option<String>,
    /// Every Nth scene is held out (0 disables)
    #[arg(long)]
    holdout_stride: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// key=value config file; flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Run directory for checkpoint and metrics
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Run directory for checkpoint, metrics, and resolved config
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Pixels sampled per step
    #[arg(long)]
    pixels: Option<usize>,
    /// Quadrature samples per ray
    #[arg(long)]
    samples: Option<usize>,
    /// Keep encoder parameters at initialization (ablation)
    #[arg(long)]
    freeze_encoder: bool,
    /// Seed the encoder from a pretraining checkpoint
    #[arg(long)]
    init_encoder: Option<PathBuf>,
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    /// Run directory containing checkpoint.nvst
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Output directory for PPM images
    #[arg(long)]
    out: PathBuf,
    /// Input scene index
    #[arg(long, default_value_t = 0)]
    scene: usize,
    /// Input view index within the scene
    #[arg(long, default_value_t = 0)]
    view: usize,
    /// Render N views orbiting the scene instead of the input view itself
    #[arg(long)]
    orbit: Option<usize>,
    #[arg(long, default_value_t = 96)]
    samples: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 96)]
    samples: usize,
    /// Evaluate all scenes instead of the held-out split
    #[arg(long)]
    all: bool,
}

#[derive(Args)]
struct VerifyArgs {
    /// Run a single suite (gradcheck, vm, compositing, pose)
    #[arg(long)]
    suite: Option<String>,
}

#[derive(Args)]
struct ParamCountArgs {
    /// Configuration preset
    #[arg(long, default_value = "paper")]
    preset: String,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = cli
        .threads
        .or_else(|| std::env::var("NVIST_THREADS").ok().and_then(|v| v.parse().ok()))
        .unwrap_or(1);
    if threads > 1 {
        eprintln!("note: compute is single-threaded and bit-reproducible; --threads {threads} recorded but not used");
    }
    let result = match cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::PretrainMae(a) => cmd_pretrain(a, threads),
        Command::Train(a) => cmd_train(a, threads),
        Command::Render(a) => cmd_render(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Verify(a) => cmd_verify(a),
        Command::ParamCount(a) => cmd_param_count(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(error_code(&e))
        }
    }
}

fn error_code(e: &Error) -> u8 {
    match e {
        Error::Io(_)
        | Error::Json(_)
        | Error::Dataset(_)
        | Error::CheckpointCorrupt(_)
        | Error::CheckpointVersion { .. } => 3,
        Error::Config(_)
        | Error::Validation(_)
        | Error::Normalization(_)
        | Error::CheckpointShape { .. }
        | Error::Metric(_)
        | Error::Evaluation(_) => 4,
    }
}

fn usage_error(msg: &str) -> ExitCode {
    eprintln!("usage error: {msg}");
    ExitCode::from(2)
}

// --- config files --------------------------------------------------------

/// `[section]` headers over `key = value` lines; `#` starts a comment.
/// Every key must be consumed by the command or the file is rejected.
struct FileCfg {
    map: BTreeMap<(String, String), String>,
    used: std::cell::RefCell<std::collections::HashSet<(String, String)>>,
}

impl FileCfg {
    fn empty() -> FileCfg {
        FileCfg { map: BTreeMap::new(), used: Default::default() }
    }

    fn load(path: &Path) -> Result<FileCfg, Error> {
        let text = std::fs::read_to_string(path)?;
        let mut map = BTreeMap::new();
        let mut section = String::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{}:{}: expected 'key = value', got '{}'", path.display(), ln + 1, line))
            })?;
            if section.is_empty() {
                return Err(Error::Config(format!(
                    "{}:{}: key '{}' appears before any [section]",
                    path.display(),
                    ln + 1,
                    key.trim()
                )));
            }
            map.insert((section.clone(), key.trim().to_string()), value.trim().to_string());
        }
        Ok(FileCfg { map, used: Default::default() })
    }

    fn get<T: std::str::FromStr>(&self, section: &str, key: &str) -> Result<Option<T>, Error> {
        let k = (section.to_string(), key.to_string());
        match self.map.get(&k) {
            None => Ok(None),
            Some(v) => {
                self.used.borrow_mut().insert(k);
                v.parse().map(Some).map_err(|_| {
                    Error::Config(format!("config key {section}.{key}: cannot parse '{v}'"))
                })
            }
        }
    }

    /// Hard error on any key no command option consumed.
    fn finish(&self) -> Result<(), Error> {
        let used = self.used.borrow();
        let unknown: Vec<String> = self
            .map
            .keys()
            .filter(|k| !used.contains(*k))
            .map(|(s, k)| format!("{s}.{k}"))
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown config keys: {}", unknown.join(", "))))
        }
    }
}

fn load_cfg(path: &Option<PathBuf>) -> Result<FileCfg, Error> {
    match path {
        Some(p) => FileCfg::load(p),
        None => Ok(FileCfg::empty()),
    }
}

fn echo_config(run: &Path, sections: &[(&str, Vec<(String, String)>)]) -> Result<(), Error> {
    let mut out = String::new();
    for (section, keys) in sections {
        out.push_str(&format!("[{section}]\n"));
        for (k, v) in keys {
            out.push_str(&format!("{k} = {v}\n"));
        }
    }
    std::fs::create_dir_all(run)?;
    std::fs::write(run.join("config.txt"), out)?;
    Ok(())
}

/// Desk-scale model preset adapted to the dataset's image size.
fn model_for(data: &Dataset) -> Result<ModelConfig, Error> {
    let mut cfg = ModelConfig::toy();
    cfg.encoder.image_width = data.width;
    cfg.encoder.image_height = data.height;
    cfg.validate()?;
    Ok(cfg)
}

// --- commands ------------------------------------------------------------

fn cmd_gen_data(a: GenDataArgs) -> Result<ExitCode, Error> {
    let file = load_cfg(&a.config)?;
    let d = DatasetOptions::default();
    let size = match a.size.or(file.get::<String>("data", "size")?) {
        None => (d.width, d.height),
        Some(s) => match s.split_once('x').and_then(|(w, h)| Some((w.parse().ok()?, h.parse().ok()?))) {
            Some(wh) => wh,
            None => return Ok(usage_error(&format!("--size expects WxH, got '{s}'"))),
        },
    };
    let opts = DatasetOptions {
        n_scenes: a.scenes.or(file.get("data", "scenes")?).unwrap_or(d.n_scenes),
        views_per_scene: a.views.or(file.get("data", "views")?).unwrap_or(d.views_per_scene),
        width: size.0,
        height: size.1,
        holdout_stride: a
            .holdout_stride
            .or(file.get("data", "holdout_stride")?)
            .unwrap_or(d.holdout_stride),
        seed: a.seed.or(file.get("data", "seed")?).unwrap_or(d.seed),
    };
    file.finish()?;
    if opts.n_scenes == 0 || opts.views_per_scene == 0 {
        return Ok(usage_error("--scenes and --views must be positive"));
    }
    let manifest = generate_dataset(&a.out, &opts)?;
    println!(
        "wrote {} scenes x {} views at {}x{} to {} ({} held out)",
        manifest.scenes.len(),
        opts.views_per_scene,
        opts.width,
        opts.height,
        a.out.display(),
        manifest.test_indices().len()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_pretrain(a: PretrainArgs, threads: usize) -> Result<ExitCode, Error> {
    let file = load_cfg(&a.config)?;
    let data = Dataset::load(&a.data)?;
    let d = MaeTrainConfig::default();
    let cfg = MaeTrainConfig {
        model: model_for(&data)?,
        total_steps: a.steps.or(file.get("mae", "steps")?).unwrap_or(d.total_steps),
        seed: a.seed.or(file.get("mae", "seed")?).unwrap_or(d.seed),
        lr: file.get("mae", "lr")?.unwrap_or(d.lr),
        head_depth: file.get("mae", "head_depth")?.unwrap_or(d.head_depth),
        checkpoint_stride: file.get("mae", "checkpoint_stride")?.unwrap_or(d.checkpoint_stride),
    };
    file.finish()?;
    echo_config(
        &a.run,
        &[(
            "mae",
            vec![
                ("data".into(), a.data.display().to_string()),
                ("steps".into(), cfg.total_steps.to_string()),
                ("seed".into(), cfg.seed.to_string()),
                ("lr".into(), format!("{:e}", cfg.lr)),
                ("head_depth".into(), cfg.head_depth.to_string()),
                ("checkpoint_stride".into(), cfg.checkpoint_stride.to_string()),
                ("threads".into(), threads.to_string()),
            ],
        )],
    )?;
    let losses = pretrain_mae::<f32>(&data, &cfg, &a.run, a.resume)?;
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        println!("pretrained {} steps: loss {first:.5} -> {last:.5}", losses.len());
    } else {
        println!("nothing to do (already at {} steps)", cfg.total_steps);
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(a: TrainArgs, threads: usize) -> Result<ExitCode, Error> {
    let file = load_cfg(&a.config)?;
    let data = Dataset::load(&a.data)?;
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        model: model_for(&data)?,
        total_steps: a.steps.or(file.get("train", "steps")?).unwrap_or(d.total_steps),
        seed: a.seed.or(file.get("train", "seed")?).unwrap_or(d.seed),
        pixels_per_step: a.pixels.or(file.get("train", "pixels")?).unwrap_or(d.pixels_per_step),
        n_samples: a.samples.or(file.get("train", "samples")?).unwrap_or(d.n_samples),
        stratified: file.get("train", "stratified")?.unwrap_or(d.stratified),
        lr_encoder: file.get("train", "lr_encoder")?.unwrap_or(d.lr_encoder),
        lr_decoder: file.get("train", "lr_decoder")?.unwrap_or(d.lr_decoder),
        checkpoint_stride: file.get("train", "checkpoint_stride")?.unwrap_or(d.checkpoint_stride),
        freeze_encoder: a.freeze_encoder || file.get("train", "freeze_encoder")?.unwrap_or(false),
        init_encoder: a.init_encoder.clone().or(file.get::<String>("train", "init_encoder")?.map(PathBuf::from)),
        loss: d.loss,
    };
    file.finish()?;
    echo_config(
        &a.run,
        &[(
            "train",
            vec![
                ("data".into(), a.data.display().to_string()),
                ("steps".into(), cfg.total_steps.to_string()),
                ("seed".into(), cfg.seed.to_string()),
                ("pixels".into(), cfg.pixels_per_step.to_string()),
                ("samples".into(), cfg.n_samples.to_string()),
                ("stratified".into(), cfg.stratified.to_string()),
                ("lr_encoder".into(), format!("{:e}", cfg.lr_encoder)),
                ("lr_decoder".into(), format!("{:e}", cfg.lr_decoder)),
                ("checkpoint_stride".into(), cfg.checkpoint_stride.to_string()),
                ("freeze_encoder".into(), cfg.freeze_encoder.to_string()),
                (
                    "init_encoder".into(),
                    cfg.init_encoder
                        .as_ref()
                        .map(|p| p.display().to_string())
                        .unwrap_or_else(|| "none".into()),
                ),
                ("threads".into(), threads.to_string()),
            ],
        )],
    )?;
    train::<f32>(&data, &cfg, &a.run, a.resume, None)?;
    println!("trained to step {} (run dir {})", cfg.total_steps, a.run.display());
    Ok(ExitCode::SUCCESS)
}

fn load_harness(run: &Path, data: &Dataset) -> Result<Harness<f32>, Error> {
    let cfg = TrainConfig { model: model_for(data)?, ..TrainConfig::default() };
    let mut h = Harness::<f32>::new(&cfg);
    load_checkpoint(&run.join("checkpoint.nvst"), &mut h.store, Some(&mut h.opt))?;
    Ok(h)
}

fn cmd_render(a: RenderArgs) -> Result<ExitCode, Error> {
    let data = Dataset::load(&a.data)?;
    // Load everything before creating any output: a missing or corrupt
    // checkpoint must not leave partial files behind.
    let h = load_harness(&a.run, &data)?;
    let scene = data
        .manifest
        .scenes
        .get(a.scene)
        .ok_or_else(|| Error::Config(format!("scene {} out of range", a.scene)))?;
    let view = scene
        .views
        .get(a.view)
        .ok_or_else(|| Error::Config(format!("view {} out of range", a.view)))?;
    let input_pose = view.pose();
    let (vm, z) = h.decode_field(&data.images[a.scene][a.view], &input_pose);

    let targets: Vec<CameraPose> = match a.orbit {
        None => vec![input_pose.clone()],
        Some(0) => return Ok(usage_error("--orbit must be positive")),
        Some(n) => {
            // Orbit at the input camera's radius and elevation.
            let r_xz = (input_pose.center[0].powi(2) + input_pose.center[2].powi(2)).sqrt();
            let y = input_pose.center[1];
            let base = input_pose.center[2].atan2(input_pose.center[0]);
            (0..n)
                .map(|i| {
                    let ang = base + i as f64 / n as f64 * std::f64::consts::TAU;
                    CameraPose::look_at(
                        [r_xz * ang.cos(), y, r_xz * ang.sin()],
                        [0.0, 0.0, 0.0],
                        input_pose.focal,
                        input_pose.image_size,
                    )
                })
                .collect()
        }
    };

    std::fs::create_dir_all(&a.out)?;
    let opts =
        RenderOptions { n_samples: a.samples, stratified: false, background: BACKGROUND };
    for (i, target) in targets.iter().enumerate() {
        let rel = relativize_pose(&input_pose, target, z)?;
        let (rgb, depth, _acc) = render_image(&h.store, &vm, &h.model.renderer, &rel, &opts);
        write_ppm(&a.out.join(format!("rgb_{i:03}.ppm")), &rgb, data.width, data.height)?;
        // Depth is exported min-max normalized; the raw range lives in a
        // sidecar so values stay recoverable.
        let (lo, hi) = depth
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        let span = (hi - lo).max(1e-12);
        let norm: Vec<f64> =
            depth.iter().flat_map(|&v| std::iter::repeat((v - lo) / span).take(3)).collect();
        write_ppm(&a.out.join(format!("depth_{i:03}.ppm")), &norm, data.width, data.height)?;
        std::fs::write(a.out.join(format!("depth_{i:03}_range.txt")), format!("{lo} {hi}\n"))?;
    }
    println!("rendered {} view(s) to {}", targets.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(a: EvalArgs) -> Result<ExitCode, Error> {
    let data = Dataset::load(&a.data)?;
    let h = load_harness(&a.run, &data)?;
    let indices = if a.all {
        (0..data.manifest.scenes.len()).collect()
    } else {
        let held = data.manifest.test_indices();
        if held.is_empty() {
            return Err(Error::Evaluation(
                "dataset has no held-out scenes; pass --all to evaluate the training split".into(),
            ));
        }
        held
    };
    let report = evaluate(&h, &data, &indices, a.samples)?;
    for s in &report.per_scene {
        println!(
            "scene {:3}: psnr {:6.2} dB  ssim {:.4}  (background baseline {:.2} dB)",
            s.scene_index, s.psnr, s.ssim, s.baseline_psnr
        );
    }
    println!(
        "mean over {} scenes: psnr {:.2} dB  ssim {:.4}  baseline {:.2} dB",
        report.per_scene.len(),
        report.mean_psnr,
        report.mean_ssim,
        report.baseline_psnr
    );
    Ok(ExitCode::SUCCESS)
}

fn print_suite(report: &SuiteReport) {
    println!("suite {}", report.suite);
    for c in &report.checks {
        println!(
            "  {:32} max err {:9.3e}  tol {:7.1e}  {}",
            c.name,
            c.max_err,
            c.tolerance,
            if c.pass() { "ok" } else { "FAIL" }
        );
    }
}

fn cmd_verify(a: VerifyArgs) -> Result<ExitCode, Error> {
    let reports = match &a.suite {
        Some(name) => vec![run_suite(name)?],
        None => run_all(),
    };
    let mut ok = true;
    for r in &reports {
        print_suite(r);
        ok &= r.pass();
    }
    if ok {
        println!("all suites passed");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("verification FAILED");
        Ok(ExitCode::from(1))
    }
}

fn cmd_param_count(a: ParamCountArgs) -> Result<ExitCode, Error> {
    let cfg = match a.preset.as_str() {
        "paper" => ModelConfig::paper(),
        "toy" => ModelConfig::toy(),
        other => return Err(Error::Config(format!("unknown preset '{other}' (paper, toy)"))),
    };
    let counts = count_parameters(&cfg);
    println!(
        "preset {}: {}x{} images, patch {}, embed {}",
        a.preset,
        cfg.encoder.image_width,
        cfg.encoder.image_height,
        cfg.encoder.patch_size,
        cfg.encoder.embed_dim
    );
    println!("feature tokens {}", cfg.encoder.feature_token_count());
    println!("output tokens  {}", cfg.decoder.output_token_count());
    println!(
        "head widths    {} (matrix) / {} (vector)",
        cfg.decoder.matrix_head_width(),
        cfg.decoder.vector_head_width()
    );
    println!("encoder params  {:>12}", counts.encoder);
    println!("decoder params  {:>12}", counts.decoder);
    println!("renderer params {:>12}", counts.renderer);
    println!("total           {:>12}", counts.total());
    Ok(ExitCode::SUCCESS)
}
