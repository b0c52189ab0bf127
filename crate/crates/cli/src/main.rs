mod config;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use twinmae_core::attention::DropMode;
use twinmae_core::checkpoint::{self, Checkpoint};
use twinmae_core::probe::{self, ProbeSpec};
use twinmae_core::seeds;
use twinmae_core::train::{self, TrainConfig, Trainer};
use twinmae_core::video::{save_gray_png, write_clip, Frame, FramePair, VideoClip};
use twinmae_core::{Error, Real};

use config::RunConfig;

/// Environment variable naming the default directory for outputs.
const OUTPUT_ROOT_ENV: &str = "TWINMAE_OUTPUT_ROOT";

#[derive(Parser, Debug)]
#[command(name = "twinmae", version, about = "Twin-frame masked autoencoder pre-training with attention dropout")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pre-train a model and write checkpoints, metrics and the resolved config.
    Pretrain(PretrainArgs),
    /// Within/between-frame decoder attention statistics as CSV.
    Stats(StatsArgs),
    /// Correspondence probe accuracy as JSON.
    Probe(ProbeArgs),
    /// Temporal matching heatmaps as grayscale PNGs.
    Heatmap(HeatmapArgs),
    /// Original, masked and reconstructed frames as PNGs.
    Reconstruct(ReconstructArgs),
    /// Write synthetic clips as PNG directories plus a manifest.
    GenData(GenDataArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Mode {
    Asad,
    Random,
    None,
    Static,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML config with [train], [model], [data] and [probe] sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output location (defaults to a directory under $TWINMAE_OUTPUT_ROOT).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// Attention dropout ratio.
    #[arg(long)]
    p: Option<f64>,
    #[arg(long)]
    asad_in_encoder: bool,
    #[arg(long)]
    no_identity_embed: bool,
    #[arg(long)]
    max_gap: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    warmup_epochs: Option<usize>,
    #[arg(long)]
    clips: Option<usize>,
    /// Read clips from a manifest instead of generating them.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, value_enum)]
    precision: Option<Precision>,
    /// Stop after this many steps (the schedule still spans all epochs).
    #[arg(long)]
    stop_at: Option<u64>,
    /// Continue from a checkpoint of the same configuration.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct StatsArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 20)]
    samples: usize,
}

#[derive(Args, Debug)]
struct ProbeArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 32)]
    pairs: usize,
}

#[derive(Args, Debug)]
struct HeatmapArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Decoder layer (default: last).
    #[arg(long)]
    layer: Option<usize>,
    #[arg(long, requires = "frame_b")]
    frame_a: Option<PathBuf>,
    #[arg(long, requires = "frame_a")]
    frame_b: Option<PathBuf>,
    /// Use the first frame in both slots.
    #[arg(long)]
    same_frame: bool,
}

#[derive(Args, Debug)]
struct ReconstructArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, requires = "frame_b")]
    frame_a: Option<PathBuf>,
    #[arg(long, requires = "frame_a")]
    frame_b: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 8)]
    clips: usize,
}

/// Failure classes mapped to exit codes.
enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::RejectedInput(m) => Failure::Usage(m),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    ExitCode::from(run(std::env::args_os().collect()))
}

fn run(argv: Vec<OsString>) -> u8 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Pretrain(a) => pretrain(a),
        Command::Stats(a) => stats(a),
        Command::Probe(a) => probe_cmd(a),
        Command::Heatmap(a) => heatmap(a),
        Command::Reconstruct(a) => reconstruct(a),
        Command::GenData(a) => gen_data(a),
    };
    match result {
        Ok(()) => 0,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            1
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            2
        }
    }
}

fn default_out(name: &str) -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs")).join(name)
}

fn runtime(context: &str) -> impl Fn(std::io::Error) -> Failure + '_ {
    move |e| Failure::Runtime(format!("{context}: {e}"))
}

fn load_config(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref()).map_err(Failure::Usage)?;
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

/// Refuses to reuse a non-empty directory unless forced.
fn claim_dir(dir: &Path, force: bool) -> CliResult {
    if dir.exists() && !force && fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(true) {
        return Err(Failure::Usage(format!("{} exists and is not empty; pass --force to overwrite", dir.display())));
    }
    fs::create_dir_all(dir).map_err(runtime("creating output directory"))
}

fn claim_file(path: &Path, force: bool) -> CliResult {
    if path.exists() && !force {
        return Err(Failure::Usage(format!("{} exists; pass --force to overwrite", path.display())));
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(runtime("creating output directory"))?;
    }
    Ok(())
}

fn write_json<S: serde::Serialize>(path: &Path, value: &S) -> CliResult {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Runtime(e.to_string()))?;
    fs::write(path, text + "\n").map_err(runtime("writing JSON"))
}

fn pretrain(a: PretrainArgs) -> CliResult {
    let mut cfg = load_config(&a.common)?;
    match a.mode {
        Some(Mode::Asad) => cfg.model.drop_mode = DropMode::Asad,
        Some(Mode::Random) => cfg.model.drop_mode = DropMode::Random,
        Some(Mode::None) => cfg.model.drop_mode = DropMode::None,
        Some(Mode::Static) => {
            cfg.model.drop_mode = DropMode::None;
            cfg.data.static_pairs = true;
        }
        None => {}
    }
    if let Some(p) = a.p {
        cfg.model.drop_ratio = p;
    }
    cfg.model.asad_in_encoder |= a.asad_in_encoder;
    if a.no_identity_embed {
        cfg.model.identity_embed = false;
    }
    let t = &mut cfg.train;
    t.batch_size = a.batch_size.unwrap_or(t.batch_size);
    t.epochs = a.epochs.unwrap_or(t.epochs);
    t.warmup_epochs = a.warmup_epochs.unwrap_or(t.warmup_epochs);
    t.checkpoint_every = a.checkpoint_every.unwrap_or(t.checkpoint_every);
    t.workers = a.workers.unwrap_or(t.workers);
    if let Some(p) = a.precision {
        t.precision = match p {
            Precision::F32 => "f32".into(),
            Precision::F64 => "f64".into(),
        };
    }
    cfg.data.max_gap = a.max_gap.unwrap_or(cfg.data.max_gap);
    cfg.data.clips = a.clips.unwrap_or(cfg.data.clips);
    if a.manifest.is_some() {
        cfg.data.manifest = a.manifest;
    }
    let out = a.common.out.clone().unwrap_or_else(|| default_out("pretrain"));
    if a.resume.is_none() {
        claim_dir(&out, a.common.force)?;
    } else {
        fs::create_dir_all(&out).map_err(runtime("creating output directory"))?;
    }
    let train_cfg = cfg.train_config(out.clone());
    train_cfg.validate()?;
    let mut resolved = serde_json::to_value(&cfg).map_err(|e| Failure::Runtime(e.to_string()))?;
    resolved["config_hash"] = train_cfg.trajectory_hash()?.into();
    write_json(&out.join("config.json"), &resolved)?;
    match cfg.train.precision.as_str() {
        "f32" => train_with::<f32>(train_cfg, a.resume.as_deref(), a.stop_at),
        "f64" => train_with::<f64>(train_cfg, a.resume.as_deref(), a.stop_at),
        other => Err(Failure::Usage(format!("unknown precision {other}; expected f32 or f64"))),
    }
}

fn train_with<T: Real>(cfg: TrainConfig, resume: Option<&Path>, stop: Option<u64>) -> CliResult {
    let mut trainer = match resume {
        Some(path) => Trainer::<T>::resume(cfg, &Checkpoint::load(path)?)?,
        None => Trainer::<T>::new(cfg)?,
    };
    eprintln!(
        "training {} parameters for {} steps ({} warmup), starting at step {}",
        trainer.model().parameter_count(),
        trainer.total_steps(),
        trainer.warmup_steps(),
        trainer.step()
    );
    let end = stop.unwrap_or(trainer.total_steps()).min(trainer.total_steps());
    while trainer.step() < end {
        let r = trainer.train_step()?;
        if r.step % 50 == 0 || r.step + 1 == end {
            eprintln!("step {} epoch {} loss {:.4} lr {:.3e} between {:.4}", r.step, r.epoch, r.loss, r.lr, r.between_mass_mean);
        }
    }
    let name = if trainer.is_done() { train::FINAL_CHECKPOINT.to_string() } else { format!("step-{:06}.ckpt", trainer.step()) };
    let path = trainer.config().output_dir.join(name);
    trainer.save(&path)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

/// Loads a checkpoint in whichever precision it was written.
enum AnyCheckpoint {
    F32(Checkpoint<f32>),
    F64(Checkpoint<f64>),
}

fn load_any(path: &Path) -> CliResult<AnyCheckpoint> {
    let bytes = fs::read(path).map_err(|e| Failure::Runtime(format!("reading {}: {e}", path.display())))?;
    match checkpoint::peek(&bytes)?.1.as_deref() {
        Some("f64") => Ok(AnyCheckpoint::F64(Checkpoint::from_bytes(&bytes)?)),
        _ => Ok(AnyCheckpoint::F32(Checkpoint::from_bytes(&bytes)?)),
    }
}

macro_rules! with_checkpoint {
    ($path:expr, |$ck:ident| $body:expr) => {
        match load_any($path)? {
            AnyCheckpoint::F32($ck) => $body,
            AnyCheckpoint::F64($ck) => $body,
        }
    };
}

fn stored_hash<T: Real>(ck: &Checkpoint<T>) -> String {
    ck.meta.get("config_hash").and_then(|v| v.as_str()).unwrap_or("").to_string()
}

/// Scene used for evaluation: the checkpoint's training scene unless a
/// config file overrides it.
fn eval_scene<T: Real>(ck: &Checkpoint<T>, common: &Common) -> CliResult<RunConfig> {
    let mut cfg = load_config(common)?;
    if common.config.is_none() {
        if let Ok(stored) = train::stored_train_config(ck) {
            cfg.data = stored.data;
            cfg.probe.scene.canvas = stored.model.input_size;
            cfg.probe.scene.patch = stored.model.patch;
        }
    }
    Ok(cfg)
}

fn stats(a: StatsArgs) -> CliResult {
    with_checkpoint!(&a.checkpoint, |ck| {
        let model = train::load_model(&ck)?;
        let cfg = eval_scene(&ck, &a.common)?;
        let seed = cfg.train.seed;
        let pairs = if a.samples == 0 {
            Vec::new()
        } else {
            probe::synthetic_pairs(&cfg.data.scene, a.samples, cfg.data.max_gap, seed)?
        };
        let stats = probe::decoder_attention_stats(&model, &pairs, seed)?;
        emit(&a.common, &stats.to_csv(), &cfg)
    })
}

/// Writes `text` to `--out` (with the resolved config alongside) or stdout.
fn emit(common: &Common, text: &str, cfg: &RunConfig) -> CliResult {
    match &common.out {
        Some(path) => {
            claim_file(path, common.force)?;
            fs::write(path, text).map_err(runtime("writing output"))?;
            write_json(&path.with_extension("config.json"), cfg)
        }
        None => std::io::stdout().write_all(text.as_bytes()).map_err(runtime("writing stdout")),
    }
}

fn probe_cmd(a: ProbeArgs) -> CliResult {
    with_checkpoint!(&a.checkpoint, |ck| {
        let model = train::load_model(&ck)?;
        let cfg = eval_scene(&ck, &a.common)?;
        let seed = cfg.train.seed;
        let spec = ProbeSpec { scene: cfg.probe.scene.clone(), ..cfg.probe.clone() };
        let pairs = probe::probe_pairs(&spec, a.pairs, seed)?;
        let report = probe::matching_probe(&model, &pairs, seed, &stored_hash(&ck))?;
        let text = serde_json::to_string_pretty(&report).map_err(|e| Failure::Runtime(e.to_string()))? + "\n";
        emit(&a.common, &text, &cfg)
    })
}

fn input_pair(frame_a: &Option<PathBuf>, frame_b: &Option<PathBuf>, cfg: &RunConfig, seed: u64) -> CliResult<FramePair> {
    match (frame_a, frame_b) {
        (Some(a), Some(b)) => Ok(FramePair {
            frame_a: Frame::read(a)?,
            frame_b: Frame::read(b)?,
            start: 0,
            gap: 1,
            correspondence: None,
        }),
        _ => Ok(probe::probe_pairs(&cfg.probe, 1, seed)?.remove(0)),
    }
}

fn heatmap(a: HeatmapArgs) -> CliResult {
    with_checkpoint!(&a.checkpoint, |ck| {
        let model = train::load_model(&ck)?;
        let cfg = eval_scene(&ck, &a.common)?;
        let mut pair = input_pair(&a.frame_a, &a.frame_b, &cfg, cfg.train.seed)?;
        if a.same_frame {
            pair = FramePair::from_single(pair.frame_a);
        }
        let map = probe::ftem_heatmap(&model, &pair, a.layer)?;
        let out = a.common.out.clone().unwrap_or_else(|| default_out("heatmap"));
        claim_dir(&out, a.common.force)?;
        save_gray_png(map.width, map.height, &map.frame_a, &out.join(format!("ftem_layer{}_frame_a.png", map.layer)))?;
        save_gray_png(map.width, map.height, &map.frame_b, &out.join(format!("ftem_layer{}_frame_b.png", map.layer)))?;
        pair.frame_a.save_png(&out.join("frame_a.png"))?;
        pair.frame_b.save_png(&out.join("frame_b.png"))?;
        write_json(&out.join("config.json"), &cfg)
    })
}

fn reconstruct(a: ReconstructArgs) -> CliResult {
    with_checkpoint!(&a.checkpoint, |ck| {
        let model = train::load_model(&ck)?;
        let cfg = eval_scene(&ck, &a.common)?;
        let seed = cfg.train.seed;
        let pair = input_pair(&a.frame_a, &a.frame_b, &cfg, seed)?;
        let r = probe::reconstruct_demo(&model, &pair, &mut seeds::stream(&[seed]))?;
        let out = a.common.out.clone().unwrap_or_else(|| default_out("reconstruct"));
        claim_dir(&out, a.common.force)?;
        for (i, tag) in ["a", "b"].iter().enumerate() {
            r.original[i].save_png(&out.join(format!("frame_{tag}_original.png")))?;
            r.masked[i].save_png(&out.join(format!("frame_{tag}_masked.png")))?;
            r.reconstruction[i].save_png(&out.join(format!("frame_{tag}_reconstruction.png")))?;
        }
        eprintln!("masked patches {}, masked-patch mse {:.5}", r.mask.masked.len(), r.masked_mse);
        write_json(&out.join("config.json"), &cfg)
    })
}

fn gen_data(a: GenDataArgs) -> CliResult {
    let cfg = load_config(&a.common)?;
    let out = a.common.out.clone().unwrap_or_else(|| default_out("data"));
    claim_dir(&out, a.common.force)?;
    cfg.data.scene.validate()?;
    let mut manifest = String::from("# synthetic clips\n");
    for i in 0..a.clips {
        let seed = seeds::derive_seed(&[cfg.train.seed, i as u64]);
        let clip: VideoClip = twinmae_core::video::generate_clip(&cfg.data.scene, seed)?;
        let name = format!("clip_{i:04}");
        write_clip(&clip, &out.join(&name))?;
        manifest.push_str(&name);
        manifest.push('\n');
    }
    fs::write(out.join("manifest.txt"), manifest).map_err(runtime("writing manifest"))?;
    write_json(&out.join("config.json"), &cfg)
}
