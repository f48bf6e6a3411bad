use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use spa_core::ablation::{run_ablation, Axis};
use spa_core::certify::{run_suite, INSTANCES, SUITES};
use spa_core::config::{load_config, print_config, TrainConfig};
use spa_core::evalprobe::{feature_pca_map, run_pose_probe, ProbeConfig};
use spa_core::model::render_view;
use spa_core::scenes::{generate_dataset, read_dataset, write_dataset, write_f32, write_pgm, write_ppm, Dataset, DatasetConfig};
use spa_core::trainer::{TeacherSpec, Trainer};
use spa_core::SpaError;

#[derive(Parser)]
#[command(name = "spa", version, about = "Spatial-awareness pre-training on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthetic dataset tools.
    #[command(subcommand)]
    Scenes(ScenesCmd),
    /// Pre-train the encoder through the volume renderer.
    Pretrain(PretrainArgs),
    /// Render one dataset view with a checkpoint's EMA weights.
    Render(RenderArgs),
    /// Finite-difference certification of the gradients.
    Gradcheck(GradcheckArgs),
    /// Frozen-feature probes.
    #[command(subcommand)]
    Probe(ProbeCmd),
    /// PCA images of the encoder feature maps.
    Features(FeaturesArgs),
    /// Mask-ratio or loss-component ablation grid.
    Ablate(AblateArgs),
}

#[derive(Subcommand)]
enum ScenesCmd {
    /// Generate and write a dataset of random scenes.
    Gen(GenArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    views: usize,
    /// Square image side in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 16)]
    teacher_dim: usize,
}

#[derive(Args)]
struct PretrainArgs {
    /// JSON config; omitted means the desk profile defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, required_unless_present = "print_config")]
    data: Option<PathBuf>,
    #[arg(long, required_unless_present = "print_config")]
    out: Option<PathBuf>,
    /// Print the resolved config with per-key sources and exit.
    #[arg(long)]
    print_config: bool,
    /// Continue from a checkpoint instead of a fresh initialisation.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Scene id from the dataset manifest.
    #[arg(long)]
    scene: String,
    #[arg(long, default_value_t = 0)]
    view: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// One of primitives, encoder, volume, render; all when omitted.
    #[arg(long)]
    suite: Option<String>,
    #[arg(long, default_value_t = INSTANCES)]
    instances: u64,
}

#[derive(Subcommand)]
enum ProbeCmd {
    /// Relative camera pose regression from frozen class tokens.
    Pose(PoseArgs),
}

#[derive(Args)]
struct PoseArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pairs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Probe a freshly initialised encoder of the checkpoint's architecture.
    #[arg(long)]
    random_encoder: bool,
}

#[derive(Args)]
struct FeaturesArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    /// mask_ratio or loss.
    #[arg(long)]
    axis: String,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Training data; four scenes matching the config are generated when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<SpaError> for Failure {
    fn from(e: SpaError) -> Self {
        match e {
            SpaError::Config { .. } => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

type Run = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    let res = match cli.cmd {
        Cmd::Scenes(ScenesCmd::Gen(a)) => scenes_gen(a),
        Cmd::Pretrain(a) => pretrain(a),
        Cmd::Render(a) => render(a),
        Cmd::Gradcheck(a) => gradcheck(a),
        Cmd::Probe(ProbeCmd::Pose(a)) => probe_pose(a),
        Cmd::Features(a) => features(a),
        Cmd::Ablate(a) => ablate(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}

fn config_or_default(path: Option<&Path>) -> Result<TrainConfig, Failure> {
    match path {
        None => Ok(TrainConfig::desk()),
        Some(p) if !p.exists() => Err(Failure::Usage(format!("{}: config file not found", p.display()))),
        Some(p) => Ok(load_config(p)?),
    }
}

fn mkdir(dir: &Path) -> Run {
    fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))
}

fn scenes_gen(a: GenArgs) -> Run {
    let cfg = DatasetConfig {
        views: a.views,
        width: a.size,
        height: a.size,
        teacher_dim: a.teacher_dim,
        ..DatasetConfig::default()
    };
    let ds = generate_dataset(&cfg, a.n, a.seed)?;
    write_dataset(&ds, &a.out)?;
    println!("wrote {} scenes to {}", ds.samples.len(), a.out.display());
    Ok(())
}

fn print_step(prefix: &str, r: &spa_core::trainer::StepReport) {
    println!(
        "{prefix}step {:>6}  lr {:.3e}  total {:.5}  color {:.4}  depth {:.4}  {:.0} ms",
        r.step, r.lr, r.breakdown.total, r.breakdown.color, r.breakdown.depth, r.ms
    );
}

fn pretrain(a: PretrainArgs) -> Run {
    let cfg = config_or_default(a.config.as_deref())?;
    if a.print_config {
        // A closed pipe (`| head`) is not an error worth reporting.
        let _ = writeln!(std::io::stdout(), "{}", print_config(&cfg));
        return Ok(());
    }
    let (data, out) = (a.data.unwrap(), a.out.unwrap());
    let ds = read_dataset(&data)?;
    let mut tr = match &a.resume {
        Some(ckpt) => {
            let tr = Trainer::load(ckpt)?;
            if tr.cfg != cfg && a.config.is_some() {
                return Err(Failure::Usage("--config differs from the config stored in the resumed checkpoint".into()));
            }
            tr
        }
        None => Trainer::new(&cfg, TeacherSpec::of(&ds))?,
    };
    let reports = tr.fit(&ds, &out, None, |r| print_step("", r))?;
    println!("{} steps, checkpoint in {}", reports.len(), out.display());
    Ok(())
}

fn load_data(path: &Path) -> Result<Dataset, Failure> {
    Ok(read_dataset(path)?)
}

fn render(a: RenderArgs) -> Run {
    let tr = Trainer::load(&a.ckpt)?;
    let ds = load_data(&a.data)?;
    let sample = ds
        .samples
        .iter()
        .find(|s| s.scene_id == a.scene)
        .ok_or_else(|| Failure::Runtime(format!("scene `{}` not in {}", a.scene, a.data.display())))?;
    let store = tr.ema_store();
    let img = render_view(&tr.model, &store, sample, a.view, tr.cfg.seed)?;
    let (w, h) = sample.image_size();
    mkdir(&a.out)?;
    write_ppm(&a.out.join("rgb.ppm"), w, h, &img.rgb)?;
    write_f32(&a.out.join("depth.f32"), &img.depth)?;
    let far = img.depth.iter().cloned().fold(0.0f32, f32::max).max(1e-6);
    let grey: Vec<u8> = img.depth.iter().map(|d| (d / far * 255.0).round() as u8).collect();
    write_pgm(&a.out.join("depth.pgm"), w, h, &grey)?;
    println!("rendered {} view {} to {}", a.scene, a.view, a.out.display());
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Run {
    let names: Vec<&str> = match &a.suite {
        Some(s) => vec![s.as_str()],
        None => SUITES.to_vec(),
    };
    if let Some(bad) = names.iter().find(|n| !SUITES.contains(n)) {
        return Err(Failure::Usage(format!("unknown suite `{bad}` (one of {})", SUITES.join(", "))));
    }
    let mut failed = 0;
    for name in names {
        let rep = run_suite(name, a.instances)?;
        for r in &rep.reports {
            println!(
                "{} {:<28} abs {:.2e} rel {:.2e} ({} coords)",
                if r.passed { "ok  " } else { "FAIL" },
                r.op,
                r.max_abs_err,
                r.max_rel_err,
                r.coords
            );
        }
        let bad = rep.failures().count();
        println!("suite {name}: {} checks, {bad} failed, {:.1} s", rep.reports.len(), rep.seconds);
        failed += bad;
    }
    if failed > 0 {
        return Err(Failure::Runtime(format!("{failed} gradient checks failed")));
    }
    Ok(())
}

fn probe_pose(a: PoseArgs) -> Run {
    let tr = Trainer::load(&a.ckpt)?;
    let ds = load_data(&a.data)?;
    let (model, store) = if a.random_encoder {
        let fresh = Trainer::new(&tr.cfg, tr.teacher)?;
        (fresh.model, fresh.store)
    } else {
        (tr.model.clone(), tr.ema_store())
    };
    let errs = run_pose_probe(&ds, a.pairs, &model, &store, &ProbeConfig::default(), a.seed)?;
    mkdir(&a.out)?;
    let json = serde_json::json!({
        "mean_trans": errs.mean_trans,
        "mean_rot": errs.mean_rot,
        "invalid": errs.invalid,
        "n": errs.n,
        "seed": a.seed,
        "random_encoder": a.random_encoder,
        "trans": errs.trans,
        "rot": errs.rot,
    });
    let path = a.out.join("pose_errors.json");
    fs::write(&path, serde_json::to_string_pretty(&json).unwrap())
        .map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    println!(
        "held-out pairs {}  mean translation error {:.4}  mean rotation error {:.4} rad",
        errs.n, errs.mean_trans, errs.mean_rot
    );
    Ok(())
}

fn features(a: FeaturesArgs) -> Run {
    let tr = Trainer::load(&a.ckpt)?;
    let ds = load_data(&a.data)?;
    let store = tr.ema_store();
    mkdir(&a.out)?;
    for sample in &ds.samples {
        for (v, img) in feature_pca_map(&tr.model, &store, sample)?.iter().enumerate() {
            write_ppm(&a.out.join(format!("{}_view{v}.ppm", sample.scene_id)), img.width, img.height, &img.rgb)?;
        }
    }
    println!("wrote feature PCA images for {} scenes to {}", ds.samples.len(), a.out.display());
    Ok(())
}

fn ablate(a: AblateArgs) -> Run {
    let axis: Axis = a.axis.parse().map_err(|e: SpaError| Failure::Usage(e.to_string()))?;
    let cfg = config_or_default(a.config.as_deref())?;
    let ds = match &a.data {
        Some(d) => load_data(d)?,
        None => {
            let size = cfg.encoder.image_size;
            let dc = DatasetConfig {
                width: size,
                height: size,
                teacher_dim: cfg.render.semantic_dim,
                ..DatasetConfig::default()
            };
            generate_dataset(&dc, 4, cfg.seed)?
        }
    };
    let results = run_ablation(&cfg, axis, &ds, &a.out, |label, r| print_step(&format!("[{label}] "), r))?;
    for r in &results {
        println!("{}", r.csv_row());
    }
    Ok(())
}
