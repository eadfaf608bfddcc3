//! Subcommands of the `motiondiff` binary. Each command reads its inputs,
//! writes its outputs plus a resolved config beside them, and never touches
//! its inputs.

pub mod config;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use motiondiff::checkpoint::Checkpoint;
use motiondiff::diffusion::train;
use motiondiff::metrics::{evaluate, EvalConfig, DEFAULT_SAMPLES_PER_TEXT, DEFAULT_SUBSET_SIZE};
use motiondiff::motion::{
    generate_synthetic_dataset, load_dataset, load_motion, save_motion, trajectory_csv, write_dataset,
    SyntheticSpec,
};
use motiondiff::{Error, SeededRng};

use config::TrainFile;

#[derive(Debug, Parser)]
#[command(
    name = "motiondiff",
    version,
    about = "Text-conditioned diffusion for keypoint motion"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic captioned dataset from a family spec.
    GenData(GenDataArgs),
    /// Train a denoiser from a TOML config.
    Train(TrainArgs),
    /// Sample motions for a caption from a checkpoint.
    Sample(SampleArgs),
    /// Score a checkpoint on the families of a synthetic spec.
    Eval(EvalArgs),
    /// Dump a motion file as frame,joint,x,y,z rows.
    ExportTraj(ExportArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub text: String,
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    /// Guidance weight; defaults to the one stored in the checkpoint.
    #[arg(long)]
    pub w: Option<f64>,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub w: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_SAMPLES_PER_TEXT)]
    pub samples_per_text: usize,
    #[arg(long, default_value_t = DEFAULT_SUBSET_SIZE)]
    pub subset_size: usize,
    #[arg(long, default_value_t = DEFAULT_SUBSET_SIZE)]
    pub variance_pairs: usize,
    /// Give every chain of a caption the same noise (degenerate check).
    #[arg(long)]
    pub shared_noise: bool,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub motion: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// 1 for bad input or configuration, 2 for runtime and numeric failures.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return if e.is_validation() { 1 } else { 2 };
        }
        if cause.is::<toml::de::Error>() || cause.is::<serde_json::Error>() {
            return 1;
        }
    }
    2
}

fn require_file(path: &Path, what: &str) -> motiondiff::Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(vec![format!(
            "{what} {} does not exist",
            path.display()
        )]))
    }
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Sample(a) => sample_cmd(&a),
        Command::Eval(a) => eval_cmd(&a),
        Command::ExportTraj(a) => export_traj(&a),
    }
}

#[derive(Serialize)]
struct GenDataRecord<'a> {
    spec: &'a SyntheticSpec,
    n: usize,
    seed: u64,
}

pub fn gen_data(a: &GenDataArgs) -> anyhow::Result<()> {
    require_file(&a.spec, "spec")?;
    let spec = SyntheticSpec::from_json_file(&a.spec)?;
    let entries = generate_synthetic_dataset(&spec, a.n, a.seed)?;
    create_dir(&a.out)?;
    let manifest = write_dataset(&a.out, &entries)?;
    write_json(
        &a.out.join("gen_data_config.json"),
        &GenDataRecord {
            spec: &spec,
            n: a.n,
            seed: a.seed,
        },
    )?;
    println!("{}", manifest.display());
    Ok(())
}

pub fn train_cmd(a: &TrainArgs) -> anyhow::Result<()> {
    require_file(&a.config, "config")?;
    let src = fs::read_to_string(&a.config).with_context(|| format!("reading {}", a.config.display()))?;
    let mut file = TrainFile::parse(&src)?;
    let cwd = std::env::current_dir()?;
    // Flag paths are relative to the working directory, config paths to the
    // config file.
    if let Some(d) = &a.dataset {
        file.dataset = Some(cwd.join(d));
    }
    if let Some(d) = &a.out_dir {
        file.out_dir = Some(cwd.join(d));
    }
    file.seed = a.seed.or(file.seed);
    file.steps = a.steps.or(file.steps);
    file.lr = a.lr.or(file.lr);
    let base = a.config.parent().map(Path::to_path_buf).unwrap_or_default();
    let run = file.resolve(&cwd.join(base))?;

    let dataset = load_dataset(&run.dataset)?;
    let outcome = train(&dataset, &run.config)?;
    create_dir(&run.out_dir)?;
    fs::write(
        run.out_dir.join("train_config.toml"),
        toml::to_string(&run.resolved)?,
    )?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in outcome.step_losses.iter().enumerate() {
        csv.push_str(&format!("{},{l:?}\n", i + 1));
    }
    fs::write(run.out_dir.join("loss.csv"), csv)?;
    let ck_path = run.out_dir.join("checkpoint.json");
    outcome.checkpoint.save(&ck_path)?;
    match outcome.step_losses.last() {
        Some(l) => println!(
            "{} ({} steps, final loss {l:.6})",
            ck_path.display(),
            outcome.step_losses.len()
        ),
        None => println!("{} (0 steps)", ck_path.display()),
    }
    Ok(())
}

#[derive(Serialize)]
struct SampleRecord<'a> {
    checkpoint: &'a Path,
    text: &'a str,
    count: usize,
    w: f64,
    seed: u64,
    files: Vec<String>,
}

pub fn sample_cmd(a: &SampleArgs) -> anyhow::Result<()> {
    require_file(&a.checkpoint, "checkpoint")?;
    if a.count == 0 {
        return Err(Error::InvalidArgument("count must be at least 1".into()).into());
    }
    let model = Checkpoint::load(&a.checkpoint)?.model()?;
    let w = a.w.unwrap_or(model.guidance.w);
    if !(w.is_finite() && w >= 0.0) {
        return Err(Error::InvalidArgument(format!("w must be finite and >= 0, got {w}")).into());
    }
    let motions = model.sample_motions(&a.text, a.count, w, &mut SeededRng::new(a.seed))?;
    create_dir(&a.out)?;
    let mut files = Vec::new();
    for (i, m) in motions.iter().enumerate() {
        let name = format!("sample_{i:03}.json");
        save_motion(m, a.out.join(&name))?;
        files.push(name);
    }
    write_json(
        &a.out.join("sample_manifest.json"),
        &SampleRecord {
            checkpoint: &a.checkpoint,
            text: &a.text,
            count: a.count,
            w,
            seed: a.seed,
            files,
        },
    )?;
    println!("{}", a.out.display());
    Ok(())
}

pub fn eval_cmd(a: &EvalArgs) -> anyhow::Result<()> {
    require_file(&a.checkpoint, "checkpoint")?;
    require_file(&a.spec, "spec")?;
    let model = Checkpoint::load(&a.checkpoint)?.model()?;
    let spec = SyntheticSpec::from_json_file(&a.spec)?;
    let config = EvalConfig {
        samples_per_text: a.samples_per_text,
        subset_size: a.subset_size,
        variance_pairs: a.variance_pairs,
        w: a.w.unwrap_or(model.guidance.w),
        seed: a.seed,
        shared_noise: a.shared_noise,
    };
    let report = evaluate(&model, &spec, &config)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_json(&a.out, &report)?;
    println!(
        "diversity {:.6} variance {:.6} conditional_accuracy {:.4}",
        report.diversity, report.variance, report.conditional_accuracy
    );
    Ok(())
}

#[derive(Serialize)]
struct ExportRecord<'a> {
    motion: &'a Path,
    out: &'a Path,
}

pub fn export_traj(a: &ExportArgs) -> anyhow::Result<()> {
    require_file(&a.motion, "motion")?;
    let motion = load_motion(&a.motion)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    fs::write(&a.out, trajectory_csv(&motion)).with_context(|| format!("writing {}", a.out.display()))?;
    let mut record = a.out.clone().into_os_string();
    record.push(".config.json");
    write_json(
        Path::new(&record),
        &ExportRecord {
            motion: &a.motion,
            out: &a.out,
        },
    )?;
    println!("{}", a.out.display());
    Ok(())
}
