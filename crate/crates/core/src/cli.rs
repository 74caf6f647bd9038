//! The `vard` command line: data generation, staged training, inference,
//! evaluation and benchmarking.
//!
//! Exit codes follow [`Error::exit_code`]; a clap usage error exits with 2.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport, EvalTarget, Prediction};
use crate::io::{
    colormap, list_samples, load_prior, load_tokenizer, load_upsampler, read_png, read_sample, save_prior,
    save_tokenizer, save_upsampler, write_pfm, write_png_gray16, write_png_rgb8, write_sample, Checkpoint, ModelKind,
};
use crate::prior::{Prior, PriorSample, PriorTrainer};
use crate::recipe::{component_seed, prepare_sample, prior_samples, upsampler_samples, Models, Prepared};
use crate::sampler::{make_schedule, GuidanceConfig, Pipeline};
use crate::synth::{build_splits, generate_scene, SceneFamily};
use crate::tensor::Tensor;
use crate::tokenizer::{Tokenizer, TokenizerTrainer};
use crate::upsampler::{rgb_input, Upsampler, UpsamplerTrainer};

#[derive(Parser, Debug)]
#[command(name = "vard", version, about = "Next-scale autoregressive depth estimation")]
pub struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `train.seed` and `guidance.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; falls back to `VARD_THREADS`, then to the core count.
    #[arg(long, global = true, env = "VARD_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render the synthetic train/val/test splits to `data.dir`.
    Datagen,
    /// Train one stage and write its checkpoint to `output.dir`.
    Train(TrainArgs),
    /// Predict depth for a PNG or every PNG in a directory.
    Infer(InferArgs),
    /// Score a dataset split.
    Eval(EvalArgs),
    /// Time the sampler per scale.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    Tokenizer,
    Prior,
    Upsampler,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    pub stage: Stage,
    /// Continue from the stage's checkpoint if it holds trainer state.
    #[arg(long)]
    pub resume: bool,
    /// Stop once this many epochs are done; the checkpoint stays resumable.
    #[arg(long)]
    pub until_epoch: Option<usize>,
}

#[derive(Args, Debug, Default, Clone)]
pub struct GuidanceArgs {
    /// `none`, `constant` or `optimized`.
    #[arg(long)]
    pub preset: Option<String>,
    /// Explicit per-scale weights, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub weights: Option<Vec<f32>>,
    /// Median over this many seeds.
    #[arg(long)]
    pub ensemble: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f32>,
    #[arg(long)]
    pub top_k: Option<usize>,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    pub input: PathBuf,
    /// Output directory; defaults to `<output.dir>/infer`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub guidance: GuidanceArgs,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Split directory; defaults to `<data.dir>/test`.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Score the ground truth itself instead of running the models.
    #[arg(long)]
    pub oracle: bool,
    /// Evaluate all three guidance presets.
    #[arg(long)]
    pub sweep_guidance: bool,
    /// Where to write the per-sample records.
    #[arg(long)]
    pub records: Option<PathBuf>,
    #[command(flatten)]
    pub guidance: GuidanceArgs,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    /// Input image; a synthetic test scene when omitted.
    #[arg(long)]
    pub image: Option<PathBuf>,
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
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
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
        cfg.guidance.seed = seed;
    }
    let pool = build_pool(cli.threads)?;
    pool.install(|| match &cli.command {
        Command::Datagen => cmd_datagen(&cfg).map(|s| println!("{s}")),
        Command::Train(a) => cmd_train(&cfg, a.stage, a.resume, a.until_epoch),
        Command::Infer(a) => {
            let cfg = apply_guidance(cfg, &a.guidance)?;
            let out = a.out.clone().unwrap_or_else(|| cfg.output.dir.join("infer"));
            cmd_infer(&cfg, &a.input, &out).map(|_| ())
        }
        Command::Eval(a) => {
            let cfg = apply_guidance(cfg, &a.guidance)?;
            cmd_eval(&cfg, a)
        }
        Command::Bench(a) => {
            let report = cmd_bench(&cfg, a.repeats, a.image.as_deref())?;
            print!("{}", report.table());
            Ok(())
        }
    })
}

fn build_pool(threads: Option<usize>) -> Result<rayon::ThreadPool> {
    if threads == Some(0) {
        return Err(Error::Config("--threads must be positive".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Folds command-line guidance flags into the config and revalidates it.
pub fn apply_guidance(mut cfg: RunConfig, g: &GuidanceArgs) -> Result<RunConfig> {
    if let Some(p) = &g.preset {
        cfg.guidance.preset = p.clone();
        cfg.guidance.weights = None;
    }
    if let Some(w) = &g.weights {
        cfg.guidance.weights = Some(w.clone());
    }
    if let Some(n) = g.ensemble {
        cfg.guidance.ensemble = n;
    }
    if let Some(t) = g.temperature {
        cfg.guidance.temperature = t;
    }
    if g.top_k.is_some() {
        cfg.guidance.top_k = g.top_k;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Checkpoint location of one model kind.
pub fn checkpoint_path(cfg: &RunConfig, kind: ModelKind) -> PathBuf {
    cfg.output.dir.join(format!("{}.vard", kind.tag()))
}

fn log_path(cfg: &RunConfig, kind: ModelKind) -> PathBuf {
    cfg.output.dir.join(format!("{}.loss.log", kind.tag()))
}

const SPLITS: [&str; 3] = ["train", "val", "test"];

fn family_name(f: SceneFamily) -> &'static str {
    match f {
        SceneFamily::Indoor => "indoor",
        SceneFamily::Roadway => "roadway",
        SceneFamily::Empty => "empty",
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatagenSummary {
    pub root: PathBuf,
    pub counts: [usize; 3],
}

impl std::fmt::Display for DatagenSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "wrote train={} val={} test={} to {}",
            self.counts[0],
            self.counts[1],
            self.counts[2],
            self.root.display()
        )
    }
}

/// Renders every split to `data.dir`. Each split also gets `index.txt`
/// with one `index family seed` line per sample.
pub fn cmd_datagen(cfg: &RunConfig) -> Result<DatagenSummary> {
    let d = &cfg.data;
    let splits = build_splits(d.n_train, d.n_val, d.n_test, d.base_seed);
    let mut counts = [0; 3];
    for (s, (name, seeds)) in SPLITS.iter().zip([&splits.train, &splits.val, &splits.test]).enumerate() {
        let dir = d.dir.join(name);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let rendered: Vec<Result<_>> = {
            use rayon::prelude::*;
            seeds
                .par_iter()
                .enumerate()
                .map(|(i, &seed)| generate_scene(seed, &d.scene(i)))
                .collect()
        };
        let mut index = String::new();
        for (i, sample) in rendered.into_iter().enumerate() {
            write_sample(&dir, i, &sample?)?;
            let _ = writeln!(index, "{i:04} {} {}", family_name(d.scene(i).family), seeds[i]);
        }
        let path = dir.join("index.txt");
        std::fs::write(&path, index).map_err(|e| Error::io(&path, e))?;
        counts[s] = seeds.len();
    }
    Ok(DatagenSummary {
        root: d.dir.clone(),
        counts,
    })
}

/// Loads a split from disk. Families come from `index.txt` when present and
/// otherwise from the config's round-robin assignment.
pub fn load_split(cfg: &RunConfig, dir: &Path) -> Result<Vec<Prepared>> {
    let families = read_families(dir)?;
    list_samples(dir)?
        .iter()
        .map(|f| {
            let family = families
                .as_ref()
                .and_then(|m| m.iter().find(|(i, _)| *i == f.index).map(|(_, fam)| *fam))
                .unwrap_or_else(|| cfg.data.scene(f.index).family);
            prepare_sample(cfg, read_sample(f)?, family)
        })
        .collect()
}

fn read_families(dir: &Path) -> Result<Option<Vec<(usize, SceneFamily)>>> {
    let path = dir.join("index.txt");
    let Ok(text) = std::fs::read_to_string(&path) else {
        return Ok(None);
    };
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let mut parts = line.split_whitespace();
        let bad = || Error::Data(format!("{}: malformed line {line:?}", path.display()));
        let index = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let family = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        out.push((index, family));
    }
    Ok(Some(out))
}

struct LossLog(BufWriter<File>);

impl LossLog {
    fn open(path: &Path, append: bool) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(LossLog(BufWriter::new(file)))
    }

    fn line(&mut self, step: u64, loss: f32) {
        let _ = writeln!(self.0, "{step} {loss}");
    }

    fn flush(&mut self) {
        let _ = self.0.flush();
    }
}

fn require(path: &Path, what: &str) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::Dependency(format!(
            "{what} checkpoint {} not found; run `vard train {what}` first",
            path.display()
        )));
    }
    Checkpoint::read(path)
}

/// Loads both tokenizers and checks them against the config.
pub fn load_tokenizers(cfg: &RunConfig) -> Result<(Tokenizer, Tokenizer)> {
    let (depth, _) = load_tokenizer(
        &require(&checkpoint_path(cfg, ModelKind::TokenizerDepth), "tokenizer")?,
        ModelKind::TokenizerDepth,
    )?;
    let (rgb, _) = load_tokenizer(
        &require(&checkpoint_path(cfg, ModelKind::TokenizerRgb), "tokenizer")?,
        ModelKind::TokenizerRgb,
    )?;
    let mut bad = Vec::new();
    if depth.config.vocab != cfg.model.vocab {
        bad.push("V".to_string());
    }
    if depth.config.latent_channels != cfg.model.channels || rgb.config.latent_channels != cfg.model.channels {
        bad.push("C".to_string());
    }
    if depth.schedule().len() != cfg.model.scales || rgb.schedule().len() != cfg.model.scales {
        bad.push("K".to_string());
    }
    if depth.schedule() != &cfg.model.schedule || rgb.schedule() != &cfg.model.schedule {
        bad.push("schedule".to_string());
    }
    if !bad.is_empty() {
        return Err(Error::Compatibility { fields: bad });
    }
    Ok((depth, rgb))
}

/// Loads all four checkpoints.
pub fn load_models(cfg: &RunConfig) -> Result<Models> {
    let (depth, rgb) = load_tokenizers(cfg)?;
    let (prior, _) = load_prior(&require(&checkpoint_path(cfg, ModelKind::Prior), "prior")?)?;
    let (upsampler, _) = load_upsampler(&require(&checkpoint_path(cfg, ModelKind::Upsampler), "upsampler")?)?;
    let models = Models {
        depth,
        rgb,
        prior,
        upsampler,
    };
    models.pipeline()?;
    Ok(models)
}

fn resume_from(path: &Path, resume: bool) -> Result<Option<Checkpoint>> {
    if resume && path.exists() {
        Checkpoint::read(path).map(Some)
    } else {
        Ok(None)
    }
}

fn snapshot_mismatch(what: &str) -> Error {
    Error::Config(format!(
        "the {what} checkpoint was trained with different model settings; drop --resume to start over"
    ))
}

pub fn cmd_train(cfg: &RunConfig, stage: Stage, resume: bool, until: Option<usize>) -> Result<()> {
    let train_dir = cfg.data.dir.join("train");
    match stage {
        Stage::Tokenizer => {
            let data = load_split(cfg, &train_dir)?;
            let depth: Vec<Tensor> = data.iter().map(|p| p.depth_image.clone()).collect();
            train_tokenizer_stage(cfg, ModelKind::TokenizerDepth, &depth, resume, until)?;
            let rgb: Vec<Tensor> = data.iter().map(|p| rgb_input(&p.sample.rgb)).collect();
            train_tokenizer_stage(cfg, ModelKind::TokenizerRgb, &rgb, resume, until)
        }
        Stage::Prior => {
            let (depth, rgb) = load_tokenizers(cfg)?;
            let data = load_split(cfg, &train_dir)?;
            train_prior_stage(cfg, &depth, &rgb, &data, resume, until)
        }
        Stage::Upsampler => {
            let (depth, rgb) = load_tokenizers(cfg)?;
            let data = load_split(cfg, &train_dir)?;
            train_upsampler_stage(cfg, &depth, &rgb, &data, resume, until)
        }
    }
}

fn train_tokenizer_stage(
    cfg: &RunConfig,
    kind: ModelKind,
    images: &[Tensor],
    resume: bool,
    until: Option<usize>,
) -> Result<()> {
    let is_rgb = kind == ModelKind::TokenizerRgb;
    let path = checkpoint_path(cfg, kind);
    let model_cfg = if is_rgb { cfg.rgb_tokenizer() } else { cfg.depth_tokenizer() };
    let mut train_cfg = cfg.train.tokenizer.clone();
    train_cfg.seed = component_seed(cfg.train.seed, if is_rgb { 2 } else { 1 });

    let (mut tok, mut trainer) = match resume_from(&path, resume)? {
        Some(ck) => match load_tokenizer(&ck, kind)? {
            (tok, Some(tr)) => {
                if tok.config != model_cfg {
                    return Err(snapshot_mismatch(kind.tag()));
                }
                (tok, tr)
            }
            (_, None) => return Err(Error::Checkpoint(format!("{} holds no trainer state", path.display()))),
        },
        None => {
            let tok = Tokenizer::new(model_cfg, &mut ChaCha8Rng::seed_from_u64(train_cfg.seed))?;
            let tr = TokenizerTrainer::new(&tok, train_cfg.clone());
            (tok, tr)
        }
    };
    trainer.config.epochs = train_cfg.epochs;
    let stop = until.unwrap_or(train_cfg.epochs).min(train_cfg.epochs);
    let mut log = LossLog::open(&log_path(cfg, kind), trainer.epochs_done > 0)?;
    loop {
        trainer.run_until(&mut tok, images, trainer.epochs_done + 1, |s| {
            log.line(s.epoch as u64, s.loss);
            println!(
                "{} epoch {} loss {:.5} mse {:.5} usage_entropy {:.3} reseeded {}",
                kind.tag(),
                s.epoch,
                s.loss,
                s.mse,
                s.usage_entropy,
                s.reseeded
            );
        })?;
        log.flush();
        save_tokenizer(&tok, kind, Some(&trainer)).write(&path)?;
        if trainer.epochs_done >= stop {
            break;
        }
    }
    Ok(())
}

fn train_prior_stage(
    cfg: &RunConfig,
    depth: &Tokenizer,
    rgb: &Tokenizer,
    data: &[Prepared],
    resume: bool,
    until: Option<usize>,
) -> Result<()> {
    let path = checkpoint_path(cfg, ModelKind::Prior);
    let mut train_cfg = cfg.train.prior.clone();
    train_cfg.seed = component_seed(cfg.train.seed, 3);
    let (mut prior, mut trainer) = match resume_from(&path, resume)? {
        Some(ck) => match load_prior(&ck)? {
            (p, Some(tr)) => {
                if p.config != cfg.prior() {
                    return Err(snapshot_mismatch("prior"));
                }
                (p, tr)
            }
            (_, None) => return Err(Error::Checkpoint(format!("{} holds no trainer state", path.display()))),
        },
        None => {
            let p = Prior::new(cfg.prior(), &mut ChaCha8Rng::seed_from_u64(train_cfg.seed))?;
            let tr = PriorTrainer::new(&p, train_cfg.clone());
            (p, tr)
        }
    };
    let samples = prior_samples(depth, rgb, data)?;
    let phase_a: Vec<PriorSample> = samples
        .iter()
        .zip(data)
        .filter(|(_, p)| p.family == cfg.train.phase_a_family)
        .map(|(s, _)| s.clone())
        .collect();
    let phase_a = if phase_a.is_empty() { samples.clone() } else { phase_a };
    let total = trainer.config.epochs();
    let stop = until.unwrap_or(total).min(total);
    let mut log = LossLog::open(&log_path(cfg, ModelKind::Prior), trainer.epochs_done > 0)?;
    while trainer.epochs_done < stop {
        let mut last = None;
        trainer.run_until(&mut prior, &phase_a, &samples, trainer.epochs_done + 1, |r| {
            log.line(r.step, r.loss);
            last = Some(r.clone());
        })?;
        log.flush();
        if let Some(r) = last {
            println!("prior epoch {} phase {} step {} loss {:.5}", r.epoch, r.phase, r.step, r.loss);
        }
        save_prior(&prior, Some(&trainer)).write(&path)?;
    }
    if trainer.epochs_done == 0 {
        save_prior(&prior, Some(&trainer)).write(&path)?;
    }
    Ok(())
}

fn train_upsampler_stage(
    cfg: &RunConfig,
    depth: &Tokenizer,
    rgb: &Tokenizer,
    data: &[Prepared],
    resume: bool,
    until: Option<usize>,
) -> Result<()> {
    let path = checkpoint_path(cfg, ModelKind::Upsampler);
    let mut train_cfg = cfg.train.upsampler.clone();
    train_cfg.seed = component_seed(cfg.train.seed, 4);
    let (mut up, mut trainer) = match resume_from(&path, resume)? {
        Some(ck) => match load_upsampler(&ck)? {
            (u, Some(tr)) => {
                if u.config != cfg.upsampler() {
                    return Err(snapshot_mismatch("upsampler"));
                }
                (u, tr)
            }
            (_, None) => return Err(Error::Checkpoint(format!("{} holds no trainer state", path.display()))),
        },
        None => {
            let u = Upsampler::new(cfg.upsampler(), &mut ChaCha8Rng::seed_from_u64(train_cfg.seed))?;
            let tr = UpsamplerTrainer::new(&u, train_cfg.clone());
            (u, tr)
        }
    };
    let samples = upsampler_samples(depth, data)?;
    let total = trainer.config.epochs;
    let stop = until.unwrap_or(total).min(total);
    let mut log = LossLog::open(&log_path(cfg, ModelKind::Upsampler), trainer.epochs_done > 0)?;
    while trainer.epochs_done < stop {
        let mut last = (0, 0.0);
        trainer.run_until(&mut up, &samples, depth, rgb, trainer.epochs_done + 1, |step, loss| {
            log.line(step, loss);
            last = (step, loss);
        })?;
        log.flush();
        println!("upsampler epoch {} step {} loss {:.6}", trainer.epochs_done, last.0, last.1);
        save_upsampler(&up, Some(&trainer)).write(&path)?;
    }
    if trainer.epochs_done == 0 {
        save_upsampler(&up, Some(&trainer)).write(&path)?;
    }
    Ok(())
}

/// Reads an RGB PNG as a `[3, H, W]` tensor in `[0, 1]`.
pub fn read_rgb(path: &Path) -> Result<Tensor> {
    let img = read_png(path)?;
    if img.channels != 3 {
        return Err(Error::Data(format!("{}: expected an RGB image", path.display())));
    }
    let n = img.width * img.height;
    let mut planar = vec![0.0; 3 * n];
    for (i, px) in img.data.chunks(3).enumerate() {
        for c in 0..3 {
            planar[c * n + i] = px[c];
        }
    }
    Tensor::new(&[3, img.height, img.width], planar)
}

fn predict(pipe: &Pipeline<'_>, rgb: &Tensor, cfg: &RunConfig) -> Result<(Tensor, Vec<f64>)> {
    let g = cfg.guidance()?;
    if cfg.guidance.ensemble > 1 {
        Ok((pipe.sample_ensemble(rgb, &g, cfg.guidance.ensemble)?, Vec::new()))
    } else {
        pipe.sample_depth(rgb, &g).map(|(d, s)| (d, s.stage_ms))
    }
}

/// Files written for one input image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InferOutputs {
    pub pfm: PathBuf,
    pub png16: PathBuf,
    pub scaling: PathBuf,
    pub color: PathBuf,
}

/// Predicts depth for `input` (a PNG or a directory of PNGs) and writes a PFM,
/// a range-scaled 16-bit PNG with its scaling sidecar and a color-mapped PNG
/// per image.
pub fn cmd_infer(cfg: &RunConfig, input: &Path, out_dir: &Path) -> Result<Vec<InferOutputs>> {
    let models = load_models(cfg)?;
    let pipe = models.pipeline()?;
    let inputs: Vec<PathBuf> = if input.is_dir() {
        let mut v: Vec<PathBuf> = std::fs::read_dir(input)
            .map_err(|e| Error::io(input, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        v.sort();
        v
    } else {
        vec![input.to_path_buf()]
    };
    if inputs.is_empty() {
        return Err(Error::Data(format!("no PNG images found in {}", input.display())));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let (h, w) = (cfg.data.height, cfg.data.width);
    let mut written = Vec::new();
    for path in inputs {
        let rgb = read_rgb(&path)?;
        if rgb.shape()[1..] != [h, w] {
            return Err(Error::Data(format!(
                "{}: image is {}x{}, the models expect {h}x{w}",
                path.display(),
                rgb.shape()[1],
                rgb.shape()[2]
            )));
        }
        let (depth, _) = predict(&pipe, &rgb, cfg)?;
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let outs = InferOutputs {
            pfm: out_dir.join(format!("{stem}.pfm")),
            png16: out_dir.join(format!("{stem}.depth16.png")),
            scaling: out_dir.join(format!("{stem}.depth16.txt")),
            color: out_dir.join(format!("{stem}.color.png")),
        };
        write_depth_outputs(&outs, depth.data(), w, h)?;
        println!("{} -> {}", path.display(), outs.pfm.display());
        written.push(outs);
    }
    Ok(written)
}

fn write_depth_outputs(outs: &InferOutputs, depth: &[f32], w: usize, h: usize) -> Result<()> {
    write_pfm(&outs.pfm, w, h, depth)?;
    let lo = depth.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = depth.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let unit: Vec<f32> = depth.iter().map(|d| (d - lo) / span).collect();
    write_png_gray16(&outs.png16, w, h, &unit)?;
    let sidecar = format!(
        "# depth_m = offset + scale * value / 65535\noffset {lo}\nscale {span}\n"
    );
    std::fs::write(&outs.scaling, sidecar).map_err(|e| Error::io(&outs.scaling, e))?;
    let n = w * h;
    let mut planar = vec![0.0; 3 * n];
    for (i, &t) in unit.iter().enumerate() {
        let rgb = colormap(t);
        for c in 0..3 {
            planar[c * n + i] = rgb[c];
        }
    }
    write_png_rgb8(&outs.color, w, h, &planar)
}

/// Evaluates the trained models (or the oracle) on a loaded split.
pub fn evaluate_split(models: Option<&Models>, cfg: &RunConfig, data: &[Prepared]) -> Result<EvalReport> {
    let targets: Vec<EvalTarget<'_>> = data
        .iter()
        .map(|p| EvalTarget {
            depth: p.sample.depth.data(),
            valid: &p.sample.valid,
        })
        .collect();
    match models {
        None => evaluate(&targets, cfg.eval.align, |i| {
            Ok(Prediction {
                depth: data[i].sample.depth.data().to_vec(),
                stage_ms: Vec::new(),
            })
        }),
        Some(m) => {
            let pipe = m.pipeline()?;
            evaluate(&targets, cfg.eval.align, |i| {
                let (depth, stage_ms) = predict(&pipe, &data[i].sample.rgb, cfg)?;
                Ok(Prediction {
                    depth: depth.into_data(),
                    stage_ms,
                })
            })
        }
    }
}

/// Loads a split file by file; failures are reported and skipped.
fn load_split_lenient(cfg: &RunConfig, dir: &Path) -> Result<(Vec<Prepared>, Vec<String>)> {
    let families = read_families(dir)?;
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for f in list_samples(dir)? {
        let family = families
            .as_ref()
            .and_then(|m| m.iter().find(|(i, _)| *i == f.index).map(|(_, fam)| *fam))
            .unwrap_or_else(|| cfg.data.scene(f.index).family);
        match read_sample(&f).and_then(|s| prepare_sample(cfg, s, family)) {
            Ok(p) => ok.push(p),
            Err(e) => failed.push(format!("{}: {e}", f.rgb.display())),
        }
    }
    Ok((ok, failed))
}

/// One row of a guidance sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub preset: &'static str,
    pub abs_rel: f64,
    pub delta1: f64,
}

/// Evaluates the three presets with otherwise identical settings.
pub fn sweep_guidance(models: &Models, cfg: &RunConfig, data: &[Prepared]) -> Result<Vec<SweepRow>> {
    ["none", "constant", "optimized"]
        .into_iter()
        .map(|preset| {
            let mut c = cfg.clone();
            c.guidance.preset = preset.into();
            c.guidance.weights = None;
            make_schedule(preset, c.model.scales)?;
            let r = evaluate_split(Some(models), &c, data)?;
            Ok(SweepRow {
                preset,
                abs_rel: r.abs_rel,
                delta1: r.delta1,
            })
        })
        .collect()
}

pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut out = String::from("guidance    AbsRel    delta1\n");
    for r in rows {
        let _ = writeln!(out, "{:<10} {:>7.3} {:>9.3}", r.preset, r.abs_rel, r.delta1);
    }
    out
}

fn cmd_eval(cfg: &RunConfig, a: &EvalArgs) -> Result<()> {
    let dir = a.dataset.clone().unwrap_or_else(|| cfg.data.dir.join("test"));
    let (data, failed) = load_split_lenient(cfg, &dir)?;
    for f in &failed {
        eprintln!("skipped {f}");
    }
    let models = if a.oracle { None } else { Some(load_models(cfg)?) };
    let records = a
        .records
        .clone()
        .unwrap_or_else(|| cfg.output.dir.join("eval").join("records.txt"));
    if let Some(parent) = records.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    if a.sweep_guidance {
        let models = models.ok_or_else(|| Error::Config("--sweep-guidance needs trained models".into()))?;
        let rows = sweep_guidance(&models, cfg, &data)?;
        let table = sweep_table(&rows);
        print!("{table}");
        std::fs::write(&records, table).map_err(|e| Error::io(&records, e))?;
    } else {
        let report = evaluate_split(models.as_ref(), cfg, &data)?;
        print!("{}", report.table());
        std::fs::write(&records, report.records()).map_err(|e| Error::io(&records, e))?;
    }
    if !failed.is_empty() {
        return Err(Error::Data(format!("{} sample(s) could not be read", failed.len())));
    }
    Ok(())
}

/// Min, median and max of one timed quantity over the repeats.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Timing {
    pub median_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
}

impl Timing {
    fn of(values: &[f64]) -> Self {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median_ms = if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        };
        Timing {
            median_ms,
            min_ms: v[0],
            max_ms: v[n - 1],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub repeats: usize,
    pub stages: Vec<Timing>,
    pub decode: Timing,
    pub total: Timing,
    /// Largest `|Σ stages + decode − total| / total` over the timed runs.
    pub accounting_gap: f64,
}

impl BenchReport {
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "repeats {} (one warm-up run excluded)", self.repeats);
        let _ = writeln!(out, "stage     median_ms     min_ms     max_ms");
        let row = |out: &mut String, name: &str, t: &Timing| {
            let _ = writeln!(out, "{name:<8} {:>10.3} {:>10.3} {:>10.3}", t.median_ms, t.min_ms, t.max_ms);
        };
        for (k, t) in self.stages.iter().enumerate() {
            row(&mut out, &format!("scale{}", k + 1), t);
        }
        row(&mut out, "decode", &self.decode);
        row(&mut out, "total", &self.total);
        let _ = writeln!(
            out,
            "stages {} accounting_gap {:.3}% {}",
            self.stages.len(),
            100.0 * self.accounting_gap,
            if self.accounting_gap <= 0.05 { "ok" } else { "FAIL" }
        );
        out
    }
}

/// Times `repeats` runs of the sampler after one warm-up run.
pub fn bench_pipeline(pipe: &Pipeline<'_>, rgb: &Tensor, g: &GuidanceConfig, repeats: usize) -> Result<BenchReport> {
    if repeats < 1 {
        return Err(Error::Config("repeats must be at least 1".into()));
    }
    pipe.sample_depth(rgb, g)?;
    let mut runs = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        runs.push(pipe.sample_depth(rgb, g)?.1);
    }
    let k = runs[0].stage_ms.len();
    let stages = (0..k)
        .map(|i| Timing::of(&runs.iter().map(|r| r.stage_ms[i]).collect::<Vec<_>>()))
        .collect();
    let gap = runs
        .iter()
        .map(|r| (r.stage_ms.iter().sum::<f64>() + r.decode_ms - r.total_ms).abs() / r.total_ms)
        .fold(0.0, f64::max);
    Ok(BenchReport {
        repeats,
        stages,
        decode: Timing::of(&runs.iter().map(|r| r.decode_ms).collect::<Vec<_>>()),
        total: Timing::of(&runs.iter().map(|r| r.total_ms).collect::<Vec<_>>()),
        accounting_gap: gap,
    })
}

pub fn cmd_bench(cfg: &RunConfig, repeats: usize, image: Option<&Path>) -> Result<BenchReport> {
    if repeats < 1 {
        return Err(Error::Config("repeats must be at least 1".into()));
    }
    let models = load_models(cfg)?;
    let rgb = match image {
        Some(p) => read_rgb(p)?,
        None => {
            let seed = build_splits(0, 0, 1, cfg.data.base_seed).test[0];
            generate_scene(seed, &cfg.data.scene(0))?.rgb
        }
    };
    let started = Instant::now();
    let report = bench_pipeline(&models.pipeline()?, &rgb, &cfg.guidance()?, repeats)?;
    eprintln!("bench wall time {:.2}s", started.elapsed().as_secs_f64());
    Ok(report)
}
