//! The `herdid` command line.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 data error,
//! 3 numeric failure. Every run that gets past argument parsing prints a
//! reproducibility header to stderr.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cloudops::{farthest_point_sample, normalize_cloud, unproject, StartRule};
use crate::config::{seed_from, Config, SEED_ENV};
use crate::embednet::{embed_batch, forward, predicted_class, read_checkpoint, write_checkpoint, NetworkParams};
use crate::error::Error;
use crate::io::{
    read_depth_crop, read_depth_frame, read_gallery, read_ply, read_split_manifest, write_depth_crop, write_gallery,
    write_ply, write_split_manifest,
};
use crate::model::{PointCloud, Sample, SplitManifest};
use crate::openset::{build_gallery, evaluate, knn_predict, leave_sequence_out, random_split};
use crate::pipeline::train_on_split;
use crate::saliency::{pcsm_drop, pcsm_scores, rank_colors, DropMode};
use crate::segmentation::segment_frame;
use crate::synth::{load_samples, make_dataset, read_dataset_index, sample_id, DatasetIndex};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(name = "herdid", version, about = "Depth-only open-set animal identification")]
pub struct Cli {
    /// Config file (TOML). Every key is optional.
    #[arg(long, global = true, visible_aliases = ["params", "intrinsics"])]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.epochs=30`. Repeatable.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Run seed. Falls back to HERDID_SEED, then to the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for the per-sample stages.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Segment depth frames against a background frame and write crops.
    Segment(SegmentArgs),
    /// Reproject crops to point clouds (PLY).
    Cloud(CloudArgs),
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Random split plus temporal neighbor removal; writes a manifest.
    Split(SplitArgs),
    /// Train the embedding network on the train side of a manifest.
    Train(TrainArgs),
    /// Export embeddings as CSV.
    Embed(EmbedArgs),
    /// Build a kNN gallery from a manifest.
    Enroll(EnrollArgs),
    /// Identify point clouds against a gallery.
    Identify(IdentifyArgs),
    /// Score the test side of a manifest.
    Eval(EvalArgs),
    /// Per-point saliency of one cloud, written as a colored PLY.
    Saliency(SaliencyArgs),
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    /// Empty-scene depth frame.
    #[arg(long)]
    pub bg: PathBuf,
    /// Output root; crops go to `<out>/crops/<identity>/`.
    #[arg(long)]
    pub out: PathBuf,
    /// Label crops with this identity (otherwise `unlabeled`).
    #[arg(long)]
    pub identity: Option<u32>,
    #[arg(required = true)]
    pub frames: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CloudArgs {
    /// Output directory for `<crop-stem>.ply`.
    #[arg(long)]
    pub out: PathBuf,
    /// Sets `cloud.points`.
    #[arg(long)]
    pub points: Option<usize>,
    #[arg(required = true)]
    pub crops: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Sets `synth.identities`.
    #[arg(long)]
    pub identities: Option<usize>,
    /// Sets `synth.frames`.
    #[arg(long)]
    pub frames: Option<usize>,
    /// Sets `synth.sequences`.
    #[arg(long)]
    pub sequences: Option<usize>,
    /// Sets `synth.exaggerated_spine`.
    #[arg(long)]
    pub exaggerate: Option<u32>,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Sets `split.ratio`.
    #[arg(long)]
    pub ratio: Option<f64>,
    /// Sets `split.n`.
    #[arg(long)]
    pub n: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Checkpoint directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Dataset root (defaults to the one recorded in the manifest).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, required_unless_present = "manifest")]
    pub dataset: Option<PathBuf>,
    /// Read the dataset root from this manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EnrollArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct IdentifyArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub gallery: PathBuf,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(required = true)]
    pub clouds: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Accuracy CSV.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Sets `gallery.k`.
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SaliencyArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub cloud: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Class to explain (defaults to the cloud's label, then the prediction).
    #[arg(long)]
    pub class: Option<usize>,
    /// Also run the iterative dropping experiment.
    #[arg(long)]
    pub drop: bool,
    /// Drop random points instead of the most salient ones.
    #[arg(long)]
    pub random: bool,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Run(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Run(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Run(e) if e.is_numeric() => 3,
            CliError::Run(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Run(e) => write!(f, "{e}"),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Config overrides implied by subcommand flags, applied after `--set`.
fn flag_overrides(command: &Command) -> Vec<String> {
    let mut o = Vec::new();
    let mut push = |key: &str, v: Option<String>| {
        if let Some(v) = v {
            o.push(format!("{key}={v}"));
        }
    };
    match command {
        Command::Cloud(a) => push("cloud.points", a.points.map(|v| v.to_string())),
        Command::Synth(a) => {
            push("synth.identities", a.identities.map(|v| v.to_string()));
            push("synth.frames", a.frames.map(|v| v.to_string()));
            push("synth.sequences", a.sequences.map(|v| v.to_string()));
            push("synth.exaggerated_spine", a.exaggerate.map(|v| v.to_string()));
        }
        Command::Split(a) => {
            push("split.ratio", a.ratio.map(|v| format!("{v:?}")));
            push("split.n", a.n.map(|v| v.to_string()));
        }
        Command::Eval(a) => push("gallery.k", a.k.map(|v| v.to_string())),
        Command::Saliency(a) if a.random => push("saliency.mode", Some("random".into())),
        _ => {}
    }
    o
}

fn load_config(cli: &Cli) -> CliResult<Config> {
    let text = match &cli.config {
        Some(p) => Some(fs::read_to_string(p).map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))?),
        None => None,
    };
    let env = std::env::var(SEED_ENV).ok();
    let seed = seed_from(cli.seed, env.as_deref()).map_err(|e| CliError::Usage(e.to_string()))?;
    let mut overrides = cli.overrides.clone();
    overrides.extend(flag_overrides(&cli.command));
    Config::from_parts(text.as_deref(), &overrides, seed).map_err(|e| CliError::Usage(e.to_string()))
}

fn execute(cli: Cli) -> CliResult {
    let config = load_config(&cli)?;
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(CliError::Usage("--jobs must be >= 1".into()));
        }
        // A second build in the same process fails harmlessly.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
    eprintln!(
        "herdid {VERSION} | seed {} | config sha256:{}",
        config.seed,
        config.hash()
    );
    match &cli.command {
        Command::Segment(a) => segment(&config, a),
        Command::Cloud(a) => cloud(&config, a),
        Command::Synth(a) => synth(&config, a),
        Command::Split(a) => split(&config, a),
        Command::Train(a) => train(&config, a),
        Command::Embed(a) => embed(&config, a),
        Command::Enroll(a) => enroll(&config, a),
        Command::Identify(a) => identify(&config, a),
        Command::Eval(a) => eval(&config, a),
        Command::Saliency(a) => saliency(&config, a),
    }
}

fn write_file(path: &Path, text: &str) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_owned(),
            source: e,
        })?;
    }
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_owned(),
        source: e,
    })?;
    Ok(())
}

fn segment(config: &Config, a: &SegmentArgs) -> CliResult {
    let background = read_depth_frame(&a.bg)?;
    let label = a.identity.map_or_else(|| "unlabeled".to_string(), |i| i.to_string());
    let dir = a.out.join("crops").join(&label);
    let mut total = 0;
    for path in &a.frames {
        let frame = read_depth_frame(path)?;
        let crops = segment_frame(&frame, &background, &config.segmentation)?;
        for (blob, crop) in crops.iter().enumerate() {
            let name = format!("{}.png", sample_id(&frame.sequence_id, frame.frame_index, blob));
            write_depth_crop(&crop.depth, a.identity, Some(crop.bbox), &dir.join(name))?;
        }
        println!("{}: {} blob(s)", path.display(), crops.len());
        total += crops.len();
    }
    println!("wrote {total} crop(s) to {}", dir.display());
    Ok(())
}

fn cloud(config: &Config, a: &CloudArgs) -> CliResult {
    for path in &a.crops {
        let (crop, meta) = read_depth_crop(path)?;
        let bbox = meta.bbox.unwrap_or_else(|| crate::model::BoundingBox::whole(&crop));
        let raw = unproject(&crop, &bbox, &config.camera)?;
        let mut cloud = farthest_point_sample(&raw, config.cloud.points.min(raw.len()), StartRule::Lexicographic)?;
        cloud.label = meta.identity;
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let out = a.out.join(format!("{stem}.ply"));
        write_ply(&cloud, None, &out)?;
        println!("{} -> {} ({} points)", path.display(), out.display(), cloud.len());
    }
    Ok(())
}

fn synth(config: &Config, a: &SynthArgs) -> CliResult {
    let (_, index) = make_dataset(&config.synth, &a.out)?;
    println!(
        "wrote {} samples of {} identities to {}",
        index.samples.len(),
        config.synth.identities,
        a.out.display()
    );
    Ok(())
}

fn split(config: &Config, a: &SplitArgs) -> CliResult {
    let index = read_dataset_index(&a.dataset, config.camera)?;
    let refs: Vec<_> = index.samples.iter().map(|e| e.reference()).collect();
    let base = random_split(&refs, config.split.ratio, config.split.seed)?;
    let mut manifest = leave_sequence_out(&base, config.split.n);
    manifest.dataset = Some(a.dataset.to_string_lossy().into_owned());
    write_split_manifest(&manifest, &a.out)?;
    let unknown: Vec<String> = manifest.unknown_identities.iter().map(|u| u.to_string()).collect();
    println!(
        "train {} | test {} | removed {} | unknown identities: [{}]",
        manifest.train_ids.len(),
        manifest.test_ids.len(),
        manifest.pre_removal_train_ids.len() - manifest.train_ids.len(),
        unknown.join(", ")
    );
    Ok(())
}

fn dataset_root(flag: Option<&PathBuf>, manifest: Option<&SplitManifest>) -> CliResult<PathBuf> {
    flag.cloned()
        .or_else(|| manifest.and_then(|m| m.dataset.as_ref().map(PathBuf::from)))
        .ok_or_else(|| CliError::Usage("no dataset recorded in the manifest; pass --dataset".into()))
}

fn load(config: &Config, root: &Path) -> CliResult<(DatasetIndex, Vec<Sample>)> {
    let index = read_dataset_index(root, config.camera)?;
    let samples = load_samples(root, &index, config.cloud.points)?;
    Ok((index, samples))
}

fn read_manifest(path: &Path) -> CliResult<SplitManifest> {
    let m = read_split_manifest(path)?;
    m.validate()?;
    Ok(m)
}

fn train(config: &Config, a: &TrainArgs) -> CliResult {
    let manifest = read_manifest(&a.manifest)?;
    let root = dataset_root(a.dataset.as_ref(), Some(&manifest))?;
    let (_, samples) = load(config, &root)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    write_file(&a.out.join("config.toml"), &config.to_toml())?;
    let seed = config.seed;
    let out = a.out.clone();
    let outcome = train_on_split(config, &manifest, &samples, |params, record| {
        write_checkpoint(params, seed, record.epoch, &out.join(format!("epoch-{:04}.ckpt", record.epoch)))?;
        write_checkpoint(params, seed, record.epoch, &out.join("best.ckpt"))?;
        println!("epoch {}: validation accuracy {:.4} (saved)", record.epoch, record.accuracy);
        Ok(())
    })?;
    write_checkpoint(&outcome.last, seed, config.train.epochs, &a.out.join("last.ckpt"))?;
    write_file(&a.out.join("history.csv"), &outcome.history.to_csv())?;
    match (outcome.history.best_epoch, outcome.history.best_accuracy) {
        (Some(e), Some(acc)) => println!("best validation accuracy {acc:.4} at epoch {e}"),
        _ => {
            write_checkpoint(&outcome.params, seed, 0, &a.out.join("best.ckpt"))?;
            println!("no epochs run; best.ckpt holds the initial parameters");
        }
    }
    Ok(())
}

fn load_params(path: &Path) -> CliResult<NetworkParams> {
    Ok(read_checkpoint(path)?.0)
}

fn embed(config: &Config, a: &EmbedArgs) -> CliResult {
    let params = load_params(&a.ckpt)?;
    let manifest = a.manifest.as_deref().map(read_manifest).transpose()?;
    let root = dataset_root(a.dataset.as_ref(), manifest.as_ref())?;
    let (_, samples) = load(config, &root)?;
    let clouds: Vec<PointCloud> = samples.iter().map(|s| s.cloud.clone()).collect();
    let embeddings = embed_batch(&params, &clouds)?;
    let dim = params.spec().embedding_dim;
    let mut csv = String::from("sample_id,label");
    for i in 0..dim {
        let _ = write!(csv, ",e_{i}");
    }
    csv.push('\n');
    for (s, e) in samples.iter().zip(&embeddings) {
        let _ = write!(csv, "{},{}", s.id, s.identity);
        for v in e {
            let _ = write!(csv, ",{v}");
        }
        csv.push('\n');
    }
    write_file(&a.out, &csv)?;
    println!("wrote {} embeddings to {}", samples.len(), a.out.display());
    Ok(())
}

fn enroll(config: &Config, a: &EnrollArgs) -> CliResult {
    let params = load_params(&a.ckpt)?;
    let manifest = read_manifest(&a.manifest)?;
    let root = dataset_root(a.dataset.as_ref(), Some(&manifest))?;
    let (_, samples) = load(config, &root)?;
    let gallery = build_gallery(&params, &manifest, &samples, config.gallery.k)?;
    write_gallery(&gallery, &a.out)?;
    println!("enrolled {} embeddings (k = {})", gallery.len(), gallery.k);
    Ok(())
}

/// Resamples to the configured size and normalizes, as for training.
fn network_cloud(config: &Config, raw: &PointCloud) -> CliResult<PointCloud> {
    let sampled = if raw.len() > config.cloud.points {
        farthest_point_sample(raw, config.cloud.points, StartRule::Lexicographic)?
    } else {
        raw.clone()
    };
    Ok(normalize_cloud(&sampled))
}

fn identify(config: &Config, a: &IdentifyArgs) -> CliResult {
    let params = load_params(&a.ckpt)?;
    let gallery = read_gallery(&a.gallery)?;
    let mut csv = String::from("cloud,predicted,mean_distance\n");
    for path in &a.clouds {
        let cloud = network_cloud(config, &read_ply(path)?)?;
        let embedding = forward(&params, &cloud)?.embedding;
        let p = knn_predict(&gallery, &embedding)?;
        let mean = p.neighbor_distances.iter().sum::<f64>() / p.neighbor_distances.len() as f64;
        let _ = writeln!(csv, "{},{},{mean}", path.display(), p.identity);
    }
    match &a.out {
        Some(out) => write_file(out, &csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn eval(config: &Config, a: &EvalArgs) -> CliResult {
    let params = load_params(&a.ckpt)?;
    let manifest = read_manifest(&a.manifest)?;
    let root = dataset_root(a.dataset.as_ref(), Some(&manifest))?;
    let (_, samples) = load(config, &root)?;
    let report = evaluate(&params, &manifest, &samples, config.gallery.k)?;
    write_file(&a.out, &report.to_csv())?;
    println!("{}", report.summary());
    Ok(())
}

fn saliency(config: &Config, a: &SaliencyArgs) -> CliResult {
    let params = load_params(&a.ckpt)?;
    let raw = read_ply(&a.cloud)?;
    let sampled = if raw.len() > config.cloud.points {
        farthest_point_sample(&raw, config.cloud.points, StartRule::Lexicographic)?
    } else {
        raw
    };
    let cloud = normalize_cloud(&sampled);
    let class = match a.class.or(sampled.label.map(|l| l as usize)) {
        Some(c) => c,
        None => predicted_class(&forward(&params, &cloud)?.logits),
    };
    let scores = pcsm_scores(&params, &cloud, class)?;
    write_ply(&sampled, Some(&rank_colors(&scores)), &a.out)?;
    println!("scored {} points for class {class} -> {}", scores.len(), a.out.display());
    if a.drop {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let s = &config.saliency;
        let outcome = pcsm_drop(&params, &cloud, class, s.drop_count, s.max_iters, s.mode, &mut rng)?;
        let mode = match s.mode {
            DropMode::Saliency => "saliency",
            DropMode::Random => "random",
        };
        match outcome.first_misclassification {
            Some(r) => println!("{mode} dropping: misclassified after {r} round(s) ({} points)", r * s.drop_count),
            None => println!("{mode} dropping: {:?} after {} points", outcome.status, outcome.dropped.len()),
        }
    }
    Ok(())
}
