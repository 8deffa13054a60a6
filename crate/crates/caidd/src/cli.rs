//! Command-line driver: `train`, `sample`, `eval`, `ablate` and `gen-data`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use caidd_core::ablation::{grid, run_variant, standard_placements, AblationSpec, EvalPlan, Variant};
use caidd_core::denoiser::Resolution;
use caidd_core::experts::Experts;
use caidd_core::metrics::{evaluate, EvalSet, DEFAULT_EXTRACTOR};
use caidd_core::sampler::{blank_target, AblationOverrides, SampleRequest, Sampler};
use caidd_core::synthfaces::make_dataset;
use caidd_core::trainer::{TrainConfig, Trainer};
use caidd_core::ImageTensor;
use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::images::{load_image_folder, save_png};
use crate::report::{ablation_csv, write_report, RunWriter};
use crate::{checkpoint, config, dataset};

#[derive(Debug, Parser)]
#[command(name = "caidd", version, about = "Identity-conditional diffusion face swapping")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a denoiser and write losses.csv and checkpoints.
    Train(TrainArgs),
    /// Generate images from a checkpoint.
    Sample(SampleArgs),
    /// Score generated images against references.
    Eval(EvalArgs),
    /// Train and evaluate a grid of ablation variants.
    Ablate(AblateArgs),
    /// Render a synthetic face dataset.
    GenData(GenDataArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Configuration file of `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override applied after the file, as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Shortcut for `--set seed=N`.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ConfigArgs {
    fn all_overrides(&self) -> Vec<String> {
        let mut o = self.overrides.clone();
        if let Some(s) = self.seed {
            o.push(format!("seed={}", s));
        }
        o
    }

    /// Loads the file; a missing `--config` is a usage error.
    fn load(&self) -> Result<TrainConfig> {
        let path = self
            .config
            .as_ref()
            .ok_or_else(|| Error::usage("--config is required"))?;
        if !path.exists() {
            return Err(Error::usage(format!("config file {} does not exist", path.display())));
        }
        config::load(path, &self.all_overrides())
    }
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Folder of PNG images; without it a synthetic set is rendered.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Synthetic set size.
    #[arg(long, default_value_t = 8)]
    pub faces: usize,
    /// Distinct identities in the synthetic set.
    #[arg(long, default_value_t = 8)]
    pub identities: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from this checkpoint; its configuration is used, with `--set` overrides.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Print progress to stderr.
    #[arg(long)]
    pub verbose: bool,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Identity source image; repeat for several outputs.
    #[arg(long, required = true)]
    pub source: Vec<PathBuf>,
    /// Structure image; a blank image is used when omitted.
    #[arg(long)]
    pub target: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Ablation switch applied at sampling time; repeatable.
    #[arg(long = "ablate", value_name = "SWITCH")]
    pub ablate: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Folder of generated images.
    #[arg(long)]
    pub outputs: PathBuf,
    /// Folder of structure references, paired with outputs by sorted order.
    #[arg(long)]
    pub references: PathBuf,
    /// Folder of identity references; defaults to `--references`.
    #[arg(long)]
    pub identity_references: Option<PathBuf>,
    #[arg(long, default_value = DEFAULT_EXTRACTOR)]
    pub extractor: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Comma separated variants.
    #[arg(long, default_value = "full,no_cross_attention,no_identity,no_expert_losses")]
    pub variants: String,
    /// Placement sets separated by `;`, each like `mid+high`.
    #[arg(long, default_value = "high;mid+high;low+mid+high")]
    pub placements: String,
    /// Number of source/target pairs sampled per variant.
    #[arg(long, default_value_t = 4)]
    pub pairs: usize,
    /// Reverse steps per sample.
    #[arg(long, default_value_t = 50)]
    pub sample_steps: usize,
    /// Variants trained concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub identities: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long)]
    pub out: PathBuf,
}

fn make_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_resolved(cfg: &TrainConfig, dir: &Path) -> Result<()> {
    let p = dir.join("config.resolved");
    std::fs::write(&p, config::to_text(cfg)).map_err(|e| Error::io(&p, e))
}

fn load_folder(dir: &Path, size: usize) -> Result<Vec<ImageTensor>> {
    let loaded = load_image_folder(dir, size)?;
    if !loaded.errors.is_empty() {
        eprintln!("{}", loaded.summary());
    }
    if loaded.images.is_empty() {
        return Err(caidd_core::Error::contract(format!("no readable PNG images in {}", dir.display())).into());
    }
    Ok(loaded.tensors())
}

/// Training images and, for synthetic sets, their identity labels.
fn training_data(args: &DataArgs, cfg: &TrainConfig) -> Result<(Vec<ImageTensor>, Option<Vec<usize>>)> {
    let size = cfg.denoiser.image_size;
    match &args.data {
        Some(dir) => Ok((load_folder(dir, size)?, None)),
        None => {
            if args.faces < args.identities || args.identities == 0 {
                return Err(Error::usage("--faces must be at least --identities, which must be positive"));
            }
            let ds = make_dataset(args.faces, args.identities, cfg.seed, size)?;
            Ok((ds.images(), Some(ds.identities)))
        }
    }
}

pub fn run_train(args: &TrainArgs) -> Result<()> {
    make_dir(&args.out)?;
    let mut trainer_state = None;
    let cfg = match &args.resume {
        Some(path) => {
            let mut ckpt = checkpoint::load(path)?;
            for o in args.cfg.all_overrides() {
                let (k, v) = config::split_assignment(&o)?;
                config::set(&mut ckpt.config, k, v)?;
            }
            ckpt.config.validate()?;
            let cfg = ckpt.config.clone();
            trainer_state = Some(ckpt);
            cfg
        }
        None => args.cfg.load()?,
    };
    write_resolved(&cfg, &args.out)?;
    let (data, _) = training_data(&args.data, &cfg)?;
    let mut trainer = match &trainer_state {
        Some(ckpt) => Trainer::resume(ckpt, &data)?,
        None => Trainer::new(cfg, &data)?,
    };
    let mut writer = RunWriter::create(&args.out, args.resume.is_some())?;
    writer.quiet = !args.verbose;
    let result = trainer.fit(&mut writer);
    writer.flush()?;
    let ckpt = result?;
    checkpoint::save(&ckpt, &args.out.join("final.ckpt"))?;
    Ok(())
}

fn parse_switches(names: &[String]) -> Result<AblationOverrides> {
    let mut o = AblationOverrides::default();
    for n in names {
        match n.as_str() {
            "disable_cross_attention" => o.disable_cross_attention = Some(true),
            "disable_identity_token" => o.disable_identity_token = Some(true),
            "disable_parse_tokens" => o.disable_parse_tokens = Some(true),
            "disable_gaze_token" => o.disable_gaze_token = Some(true),
            other => {
                return Err(Error::usage(format!(
                    "unknown ablation switch `{}`; valid: disable_cross_attention, disable_identity_token, disable_parse_tokens, disable_gaze_token",
                    other
                )))
            }
        }
    }
    Ok(o)
}

pub fn run_sample(args: &SampleArgs) -> Result<()> {
    let ckpt = checkpoint::load(&args.checkpoint)?;
    let t = ckpt.config.schedule.timesteps;
    if args.steps == 0 || args.steps > t {
        return Err(Error::usage(format!("--steps must be in 1..={}", t)));
    }
    let overrides = parse_switches(&args.ablate)?;
    let size = ckpt.config.denoiser.image_size;
    let load = |p: &Path| -> Result<ImageTensor> {
        let img = load_png_native(p)?;
        let s = img.shape();
        if s[2] != size || s[3] != size {
            return Err(caidd_core::Error::config(
                "image_size",
                format!("{} is {}x{}, the checkpoint expects {}x{}", p.display(), s[3], s[2], size, size),
            )
            .into());
        }
        Ok(img)
    };
    let target = match &args.target {
        Some(p) => load(p)?,
        None => blank_target(size),
    };
    make_dir(&args.out)?;
    write_resolved(&ckpt.config, &args.out)?;
    let digest = checkpoint::digest(&ckpt);
    let sampler = Sampler::new(&ckpt)?;
    for (i, src) in args.source.iter().enumerate() {
        let req = SampleRequest {
            source: load(src)?,
            target: target.clone(),
            seed: args.seed,
            steps: args.steps,
            overrides,
        };
        let img = sampler.sample(&req)?;
        let stem = format!("sample_{:03}", i);
        save_png(&img, &args.out.join(format!("{}.png", stem)))?;
        let record = serde_json::json!({
            "seed": args.seed,
            "steps": args.steps,
            "checkpoint_digest": digest,
            "source": src.display().to_string(),
            "target": args.target.as_ref().map(|p| p.display().to_string()),
            "ablate": args.ablate,
        });
        let side = args.out.join(format!("{}.json", stem));
        std::fs::write(&side, serde_json::to_string_pretty(&record).expect("json") + "\n")
            .map_err(|e| Error::io(&side, e))?;
    }
    Ok(())
}

/// Loads a PNG at its own size.
fn load_png_native(p: &Path) -> Result<ImageTensor> {
    let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
        .map_err(|e| Error::format(p, e.to_string()))?;
    Ok(crate::images::from_rgb8(&img.to_rgb8()))
}

pub fn run_eval(args: &EvalArgs) -> Result<()> {
    let cfg = match &args.cfg.config {
        Some(_) => args.cfg.load()?,
        None => {
            let mut c = TrainConfig::default();
            for o in args.cfg.all_overrides() {
                let (k, v) = config::split_assignment(&o)?;
                config::set(&mut c, k, v)?;
            }
            c
        }
    };
    let size = cfg.denoiser.image_size;
    let outputs = load_folder(&args.outputs, size)?;
    let refs = load_folder(&args.references, size)?;
    let ids = args
        .identity_references
        .as_ref()
        .map(|d| load_folder(d, size))
        .transpose()?;
    let experts = Experts::new(cfg.experts, size)?;
    let report = evaluate(
        &EvalSet {
            outputs: &outputs,
            references: &refs,
            identity_references: ids.as_deref(),
        },
        &experts,
        &args.extractor,
        &config::digest(&cfg),
    )?;
    make_dir(&args.out)?;
    write_resolved(&cfg, &args.out)?;
    write_report(&report, &args.out)?;
    print!("{}", crate::report::metrics_text(&report));
    Ok(())
}

/// Source/target pairs over the training set: source `i` with the next face
/// of a different identity as target (the next face when labels are unknown).
pub fn cross_pairs(data: &[ImageTensor], identities: Option<&[usize]>, n: usize, seed: u64, steps: usize) -> Result<EvalPlan> {
    if data.len() < 2 {
        return Err(caidd_core::Error::contract("evaluation pairs need at least two images").into());
    }
    let mut sources = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for k in 0..n {
        let i = k % data.len();
        let j = (1..data.len())
            .map(|d| (i + d) % data.len())
            .find(|&j| identities.map_or(true, |ids| ids[j] != ids[i]))
            .unwrap_or((i + 1) % data.len());
        sources.push(data[i].clone());
        targets.push(data[j].clone());
    }
    Ok(EvalPlan {
        sources,
        targets,
        seed,
        steps,
    })
}

pub fn parse_variants(s: &str) -> Result<Vec<Variant>> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| Variant::parse(p).map_err(|e| Error::usage(e.to_string())))
        .collect()
}

pub fn parse_placement_sets(s: &str) -> Result<Vec<Vec<Resolution>>> {
    if s.trim().is_empty() {
        return Ok(standard_placements());
    }
    s.split(';')
        .map(|p| Resolution::parse_list(p).map_err(|e| Error::usage(e.to_string())))
        .collect()
}

/// Runs `specs` on up to `jobs` threads; rows come back in `specs` order.
pub fn run_specs(
    base: &TrainConfig,
    specs: &[AblationSpec],
    data: &[ImageTensor],
    plan: &EvalPlan,
    jobs: usize,
) -> Result<Vec<caidd_core::ablation::AblationRow>> {
    let digest = config::digest(base);
    let jobs = jobs.clamp(1, specs.len().max(1));
    let mut rows: Vec<Option<caidd_core::Result<_>>> = (0..specs.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        for (chunk_specs, chunk_rows) in specs.chunks(specs.len().div_ceil(jobs).max(1)).zip(rows.chunks_mut(specs.len().div_ceil(jobs).max(1))) {
            let digest = &digest;
            scope.spawn(move || {
                for (s, slot) in chunk_specs.iter().zip(chunk_rows) {
                    *slot = Some(run_variant(base, s, data, plan, digest));
                }
            });
        }
    });
    rows.into_iter()
        .map(|r| r.expect("every slot filled").map_err(Error::from))
        .collect()
}

pub fn run_ablate(args: &AblateArgs) -> Result<()> {
    let variants = parse_variants(&args.variants)?;
    let placements = parse_placement_sets(&args.placements)?;
    if variants.is_empty() {
        return Err(Error::usage("no variants requested"));
    }
    let cfg = args.cfg.load()?;
    make_dir(&args.out)?;
    write_resolved(&cfg, &args.out)?;
    let (data, ids) = training_data(&args.data, &cfg)?;
    let plan = cross_pairs(&data, ids.as_deref(), args.pairs.max(1), cfg.seed, args.sample_steps)?;
    let specs = grid(&variants, &placements);
    let rows = run_specs(&cfg, &specs, &data, &plan, args.jobs)?;
    for r in &rows {
        checkpoint::save(&r.checkpoint, &args.out.join(format!("{}.ckpt", r.name.replace('@', "_").replace('+', "-"))))?;
    }
    let p = args.out.join("ablation.csv");
    let csv = ablation_csv(&rows);
    std::fs::write(&p, &csv).map_err(|e| Error::io(&p, e))?;
    print!("{}", csv);
    Ok(())
}

pub fn run_gen_data(args: &GenDataArgs) -> Result<()> {
    if args.n < args.identities || args.identities == 0 {
        return Err(Error::usage(format!(
            "need n >= identities >= 1, got n = {}, identities = {}",
            args.n, args.identities
        )));
    }
    let ds = make_dataset(args.n, args.identities, args.seed, args.size)?;
    let entries = dataset::export(&ds, &args.out)?;
    dataset::validate_manifest(&entries, 1e-6)?;
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train(a) => run_train(a),
        Command::Sample(a) => run_sample(a),
        Command::Eval(a) => run_eval(a),
        Command::Ablate(a) => run_ablate(a),
        Command::GenData(a) => run_gen_data(a),
    }
}

/// Parses `args` (program name first), runs, and returns the exit code.
pub fn main_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e);
            e.exit_code()
        }
    }
}
