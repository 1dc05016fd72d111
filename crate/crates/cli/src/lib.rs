//! `lipsync` subcommands. Every command resolves a flat `key=value` run
//! configuration (defaults, then `--config` file, then `--set`, then
//! dedicated flags) and embeds it in whatever it writes.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use lipsync_core::checkpoint::Checkpoint;
use lipsync_core::config::ModelConfig;
use lipsync_core::data::io::{format_kv, load_clip, load_dataset, parse_kv, save_clip, write_png};
use lipsync_core::data::{preset_speakers, toy_corpus, VideoClip, SAMPLE_RATE};
use lipsync_core::evalkit::{evaluate_clip, MetricsReport, SurrogateEmbedder};
use lipsync_core::personalization::{personalize, PersonalAdapter, PersonalizeConfig};
use lipsync_core::pipeline::{infer, pick_reference, self_driven, InferOptions, LengthPolicy};
use lipsync_core::syncnet::{init_syncnet, train_syncnet, SyncTrainConfig};
use lipsync_core::training::{init_model, train_generalized, LossBreakdown, TrainConfig, TrainObserver};
use lipsync_core::{Error, Result};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub mod plot;

/// Relative paths are resolved against this directory when it is set.
pub const HOME_ENV: &str = "LIPSYNC_HOME";

pub const KIND_MODEL: &str = "model";
pub const KIND_SYNCNET: &str = "syncnet";
pub const KIND_ADAPTER: &str = "adapter";

#[derive(Debug, Parser)]
#[command(name = "lipsync", version, about = "Audio-driven mouth inpainting toolkit")]
pub struct Cli {
    /// Seed for every random choice of the command.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// key=value configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set train.steps=100`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a two-speaker toy corpus.
    SynthData(SynthArgs),
    /// Train the audio-visual synchrony scorer.
    TrainSyncnet(TrainSyncArgs),
    /// Generalized adversarial self-reconstruction training.
    Train(TrainArgs),
    /// Fit a per-person adapter on top of a trained model.
    Personalize(PersonalizeArgs),
    /// Drive a template clip with an audio track.
    Infer(InferArgs),
    /// Self-driven reconstruction metrics over a dataset.
    Evaluate(EvaluateArgs),
    /// Plot the numeric columns of a line-delimited JSON log.
    PlotMetrics(PlotArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub clips_per_speaker: usize,
    #[arg(long, default_value_t = 2.0)]
    pub duration: f64,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Only render the speaker with this index (0 or 1).
    #[arg(long)]
    pub speaker: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainSyncArgs {
    /// Dataset root holding one directory per clip.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Loss stream, one JSON record per step.
    #[arg(long)]
    pub loss_log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset root holding one directory per clip.
    #[arg(long)]
    pub data: PathBuf,
    /// SyncNet checkpoint; required while the sync weight is positive.
    #[arg(long)]
    pub syncnet: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lambda_sync: Option<f64>,
    /// Disable lower-face masking of the fine pyramid levels.
    #[arg(long)]
    pub no_mask: bool,
    /// Loss stream, one JSON record per step.
    #[arg(long)]
    pub loss_log: Option<PathBuf>,
    /// Write `<out>.step<N>.ckpt` every N steps.
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PersonalizeArgs {
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub person_dir: PathBuf,
    #[arg(long)]
    pub general_dir: PathBuf,
    /// SyncNet checkpoint; required while the sync weight is positive.
    #[arg(long)]
    pub syncnet: Option<PathBuf>,
    #[arg(long)]
    pub lambda_p: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub person_id: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    /// Loss stream, one JSON record per step.
    #[arg(long)]
    pub loss_log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub adapter: Option<PathBuf>,
    /// Template clip directory.
    #[arg(long)]
    pub template: PathBuf,
    /// Driving audio: a 16 kHz mono WAV file or a clip directory.
    #[arg(long)]
    pub audio: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Reference frame; drawn from `--seed` when absent.
    #[arg(long)]
    pub ref_index: Option<usize>,
    /// Extend the template by palindromic looping instead of trimming audio.
    #[arg(long)]
    pub loop_template: bool,
    #[arg(long)]
    pub no_mask: bool,
    #[arg(long, default_value_t = 0)]
    pub feather: usize,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub adapter: Option<PathBuf>,
    /// Dataset root holding one directory per clip.
    #[arg(long)]
    pub data: PathBuf,
    /// Enables the sync-confidence column.
    /// SyncNet checkpoint; required while the sync weight is positive.
    #[arg(long)]
    pub syncnet: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub no_mask: bool,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[arg(long)]
    pub log: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Columns to draw; all numeric columns when empty.
    #[arg(long, value_delimiter = ',')]
    pub columns: Vec<String>,
}

/// Prefixes to the file path relative to [`HOME_ENV`] when set.
pub fn resolve(path: &Path) -> PathBuf {
    match std::env::var_os(HOME_ENV) {
        Some(home) if path.is_relative() => Path::new(&home).join(path),
        _ => path.to_path_buf(),
    }
}

/// Fully resolved configuration for one command.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub kv: BTreeMap<String, String>,
}

impl RunConfig {
    /// Defaults, then the file, then `key=value` overrides, then the seed.
    pub fn resolve(file: Option<&Path>, overrides: &[String], seed: u64) -> Result<Self> {
        let mut kv = ModelConfig::default().to_kv();
        kv.extend(PersonalizeConfig::default().to_kv());
        kv.extend(SyncTrainConfig::default().to_kv());
        if let Some(f) = file {
            let f = resolve(f);
            let text = fs::read_to_string(&f).map_err(|e| Error::io(&f, e))?;
            for (k, v) in parse_kv(&text)? {
                Self::check_known(&kv, &k)?;
                kv.insert(k, v);
            }
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            let k = k.trim().to_string();
            Self::check_known(&kv, &k)?;
            kv.insert(k, v.trim().to_string());
        }
        for k in ["train.seed", "sync.seed", "personalize.seed"] {
            kv.insert(k.into(), seed.to_string());
        }
        let rc = Self { kv };
        rc.model()?;
        rc.personalize()?;
        rc.sync()?;
        Ok(rc)
    }

    fn check_known(kv: &BTreeMap<String, String>, key: &str) -> Result<()> {
        if kv.contains_key(key) {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown key `{key}`")))
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.kv.insert(key.to_string(), value.to_string());
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let c = ModelConfig::from_kv(&self.kv)?;
        c.validate()?;
        Ok(c)
    }

    pub fn train(&self) -> Result<TrainConfig> {
        TrainConfig::from_kv(&self.kv)
    }

    pub fn personalize(&self) -> Result<PersonalizeConfig> {
        PersonalizeConfig::from_kv(&self.kv)
    }

    pub fn sync(&self) -> Result<SyncTrainConfig> {
        SyncTrainConfig::from_kv(&self.kv)
    }

    /// Keys of one section, e.g. `model`.
    pub fn section(&self, prefix: &str) -> BTreeMap<String, String> {
        self.kv
            .iter()
            .filter(|(k, _)| k.starts_with(&format!("{prefix}.")))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }
}

fn stamp(ckpt: &mut Checkpoint, rc: &RunConfig, command: &str, seed: u64) {
    ckpt.config = rc.kv.clone();
    ckpt.created.insert("tool".into(), format!("lipsync {}", env!("CARGO_PKG_VERSION")));
    ckpt.created.insert("command".into(), command.into());
    ckpt.created.insert("seed".into(), seed.to_string());
}

/// Loads a checkpoint of `kind` and checks it against `cfg`.
pub fn load_checked(path: &Path, kind: &str, cfg: &ModelConfig) -> Result<Checkpoint> {
    let path = resolve(path);
    if !path.exists() {
        return Err(Error::Checkpoint(format!(
            "{} does not exist; train or pass the right path",
            path.display()
        )));
    }
    let c = Checkpoint::load(&path)?;
    c.expect_kind(kind)?;
    c.expect_fingerprint(&cfg.fingerprint())?;
    Ok(c)
}

/// The model config recorded in a checkpoint.
pub fn recorded_model(path: &Path) -> Result<ModelConfig> {
    let path = resolve(path);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let (m, _) = Checkpoint::read_manifest(&bytes)?;
    ModelConfig::from_kv(&m.config)
}

pub fn load_model(path: &Path, cfg: &ModelConfig) -> Result<Checkpoint> {
    let c = load_checked(path, KIND_MODEL, cfg)?;
    let template = init_model(cfg, &mut ChaCha8Rng::seed_from_u64(0));
    c.require_like(&template)?;
    Ok(c)
}

pub fn load_syncnet(path: &Path, cfg: &ModelConfig) -> Result<Checkpoint> {
    let c = load_checked(path, KIND_SYNCNET, cfg)?;
    let mut template = lipsync_core::nn::ParamStore::new();
    init_syncnet(cfg, &mut ChaCha8Rng::seed_from_u64(0), &mut template);
    c.require_like(&template)?;
    Ok(c)
}

pub fn load_adapter(path: &Path, cfg: &ModelConfig, base: &Checkpoint) -> Result<PersonalAdapter> {
    let c = load_checked(path, KIND_ADAPTER, cfg)?;
    let id = c.created.get("person_id").cloned().unwrap_or_default();
    let lambda = c
        .config
        .get("personalize.lambda_p")
        .and_then(|v| v.parse().ok())
        .unwrap_or(1.0);
    let a = PersonalAdapter::from_store(&c.params, &id, lambda);
    a.validate(cfg, &base.params)?;
    Ok(a)
}

/// Appends one JSON record per line.
pub struct JsonlLog {
    file: Option<fs::File>,
}

impl JsonlLog {
    pub fn create(path: Option<&Path>) -> Result<Self> {
        let file = match path {
            Some(p) => {
                let p = resolve(p);
                if let Some(d) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                    fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
                }
                Some(fs::File::create(&p).map_err(|e| Error::io(&p, e))?)
            }
            None => None,
        };
        Ok(Self { file })
    }

    pub fn write(&mut self, v: &serde_json::Value) -> Result<()> {
        if let Some(f) = &mut self.file {
            writeln!(f, "{v}").map_err(|e| Error::io("loss log", e))?;
        }
        Ok(())
    }
}

/// Streams losses to JSONL and writes periodic or abort checkpoints next to
/// the final output.
struct RunObserver<'a> {
    log: JsonlLog,
    out: PathBuf,
    cfg: &'a ModelConfig,
    rc: &'a RunConfig,
    seed: u64,
}

impl RunObserver<'_> {
    fn sibling(&self, suffix: &str) -> PathBuf {
        let stem = self.out.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
        self.out.with_file_name(format!("{stem}.{suffix}.ckpt"))
    }
}

impl TrainObserver for RunObserver<'_> {
    fn on_step(&mut self, l: &LossBreakdown) -> Result<()> {
        if l.step % 100 == 0 {
            log::info!("step {} rec {:.4} sync {:.4} adv_g {:.3} adv_d {:.3}", l.step, l.l_rec, l.l_sync, l.l_adv_g, l.l_adv_d);
        }
        self.log.write(&serde_json::to_value(l).expect("serializable"))
    }

    fn on_checkpoint(&mut self, step: usize, params: &lipsync_core::nn::ParamStore<f32>, aborted: bool) -> Result<()> {
        let path = if aborted {
            self.sibling("abort")
        } else {
            self.sibling(&format!("step{step}"))
        };
        let mut c = Checkpoint::new(KIND_MODEL, &self.cfg.fingerprint(), params.clone());
        stamp(&mut c, self.rc, "train", self.seed);
        c.created.insert("step".into(), step.to_string());
        c.save(&path)
    }
}

fn load_clips(dir: &Path, cfg: &ModelConfig) -> Result<Vec<VideoClip>> {
    let clips = load_dataset(&resolve(dir))?;
    if let Some(c) = clips.iter().find(|c| c.size() != cfg.image_size) {
        return Err(Error::Shape(format!(
            "dataset holds {0}×{0} clips but model.image_size is {1}",
            c.size(),
            cfg.image_size
        )));
    }
    Ok(clips)
}

pub fn run(cli: Cli) -> Result<()> {
    let rc = RunConfig::resolve(cli.config.as_deref(), &cli.overrides, cli.seed)?;
    let seed = cli.seed;
    match cli.command {
        Command::SynthData(a) => synth_data(&a, seed),
        Command::TrainSyncnet(a) => cmd_train_syncnet(&a, rc, seed),
        Command::Train(a) => cmd_train(&a, rc, seed),
        Command::Personalize(a) => cmd_personalize(&a, rc, seed),
        Command::Infer(a) => cmd_infer(&a, rc, seed),
        Command::Evaluate(a) => cmd_evaluate(&a, rc, seed),
        Command::PlotMetrics(a) => plot::plot_log(&resolve(&a.log), &resolve(&a.out), &a.columns),
    }
}

fn synth_data(a: &SynthArgs, seed: u64) -> Result<()> {
    let all = preset_speakers();
    let speakers = match a.speaker {
        Some(i) => vec![all
            .get(i)
            .ok_or_else(|| Error::InvalidArgument(format!("speaker index {i} (0 or 1)")))?.clone()],
        None => all.to_vec(),
    };
    let clips = toy_corpus(&speakers, a.clips_per_speaker, a.duration, a.size, seed)?;
    let out = resolve(&a.out);
    for (i, c) in clips.iter().enumerate() {
        save_clip(c, &out.join(format!("clip_{i:05}")))?;
    }
    log::info!("wrote {} clips to {}", clips.len(), out.display());
    Ok(())
}

fn cmd_train_syncnet(a: &TrainSyncArgs, mut rc: RunConfig, seed: u64) -> Result<()> {
    if let Some(s) = a.steps {
        rc.set("sync.steps", s);
    }
    let cfg = rc.model()?;
    let tc = rc.sync()?;
    let clips = load_clips(&a.data, &cfg)?;
    let r = train_syncnet(&cfg, &clips, &tc)?;
    let mut log = JsonlLog::create(a.loss_log.as_deref())?;
    for (step, l) in r.losses.iter().enumerate() {
        log.write(&serde_json::json!({ "step": step, "loss": l }))?;
    }
    let mut c = Checkpoint::new(KIND_SYNCNET, &cfg.fingerprint(), r.params);
    stamp(&mut c, &rc, "train-syncnet", seed);
    c.save(&resolve(&a.out))
}

fn cmd_train(a: &TrainArgs, mut rc: RunConfig, seed: u64) -> Result<()> {
    if let Some(s) = a.steps {
        rc.set("train.steps", s);
    }
    if let Some(l) = a.lambda_sync {
        rc.set("train.lambda_sync", l);
    }
    if a.no_mask {
        rc.set("train.masking", false);
    }
    if let Some(k) = a.checkpoint_every {
        rc.set("train.checkpoint_every", k);
    }
    let cfg = rc.model()?;
    let tc = rc.train()?;
    let sync = match &a.syncnet {
        Some(p) => Some(load_syncnet(p, &cfg)?.params),
        None if tc.lambda_sync > 0.0 => {
            return Err(Error::Config(
                "train.lambda_sync > 0 needs --syncnet (or set --lambda-sync 0)".into(),
            ))
        }
        None => None,
    };
    let clips = load_clips(&a.data, &cfg)?;
    let out = resolve(&a.out);
    let mut obs = RunObserver {
        log: JsonlLog::create(a.loss_log.as_deref())?,
        out: out.clone(),
        cfg: &cfg,
        rc: &rc,
        seed,
    };
    let params = train_generalized(&cfg, &clips, sync.as_ref(), &tc, &mut obs)?;
    let mut c = Checkpoint::new(KIND_MODEL, &cfg.fingerprint(), params);
    stamp(&mut c, &rc, "train", seed);
    c.save(&out)
}

fn cmd_personalize(a: &PersonalizeArgs, mut rc: RunConfig, seed: u64) -> Result<()> {
    // the architecture comes from the base checkpoint
    for (k, v) in recorded_model(&a.base)?.to_kv() {
        rc.set(&k, v);
    }
    if let Some(l) = a.lambda_p {
        rc.set("personalize.lambda_p", l);
    }
    if let Some(e) = a.epochs {
        rc.set("personalize.epochs", e);
    }
    if let Some(id) = &a.person_id {
        rc.set("personalize.person_id", id);
    }
    let cfg = rc.model()?;
    let pc = rc.personalize()?;
    let base = load_model(&a.base, &cfg)?;
    let sync = match &a.syncnet {
        Some(p) => Some(load_syncnet(p, &cfg)?.params),
        None => None,
    };
    let person = load_clips(&a.person_dir, &cfg)?;
    let general = load_clips(&a.general_dir, &cfg)?;
    let mut obs = RunObserver {
        log: JsonlLog::create(a.loss_log.as_deref())?,
        out: resolve(&a.out),
        cfg: &cfg,
        rc: &rc,
        seed,
    };
    let adapter = personalize(&cfg, &base.params, sync.as_ref(), &person, &general, &pc, &mut obs)?;
    let mut c = Checkpoint::new(KIND_ADAPTER, &cfg.fingerprint(), adapter.to_store());
    stamp(&mut c, &rc, "personalize", seed);
    c.created.insert("person_id".into(), adapter.person_id.clone());
    c.save(&resolve(&a.out))
}

/// Mono 16 kHz samples from a WAV file or a clip directory.
pub fn read_audio(path: &Path) -> Result<(Vec<f32>, u32)> {
    let path = resolve(path);
    if path.is_dir() {
        let c = load_clip(&path)?;
        return Ok((c.waveform, SAMPLE_RATE));
    }
    let mut r = hound::WavReader::open(&path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let spec = r.spec();
    if spec.channels != 1 {
        return Err(Error::InvalidArgument(format!(
            "{}: expected mono audio, got {} channels",
            path.display(),
            spec.channels
        )));
    }
    let bad = |e: hound::Error| Error::Format(format!("{}: {e}", path.display()));
    let samples: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => r.samples::<f32>().collect::<std::result::Result<_, _>>().map_err(bad)?,
        hound::SampleFormat::Int => {
            let scale = (1i64 << (spec.bits_per_sample - 1)) as f32;
            r.samples::<i32>()
                .map(|s| s.map(|v| v as f32 / scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(bad)?
        }
    };
    Ok((samples, spec.sample_rate))
}

fn cmd_infer(a: &InferArgs, mut rc: RunConfig, seed: u64) -> Result<()> {
    for (k, v) in recorded_model(&a.ckpt)?.to_kv() {
        rc.set(&k, v);
    }
    let cfg = rc.model()?;
    let base = load_model(&a.ckpt, &cfg)?;
    let adapter = match &a.adapter {
        Some(p) => Some(load_adapter(p, &cfg, &base)?),
        None => None,
    };
    let template = load_clip(&resolve(&a.template))?;
    let (wave, rate) = read_audio(&a.audio)?;
    let ref_index = a.ref_index.unwrap_or_else(|| pick_reference(seed, template.len()));
    let opts = InferOptions {
        ref_index,
        masking: !a.no_mask,
        policy: if a.loop_template {
            LengthPolicy::LoopTemplate
        } else {
            LengthPolicy::Trim
        },
        crop: None,
        feather_px: a.feather,
    };
    let out = infer(&cfg, &base.params, adapter.as_ref(), &template, &wave, rate, &opts)?;
    let dir = resolve(&a.out);
    let frames_dir = dir.join("frames");
    fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
    for (t, f) in out.frames.iter().enumerate() {
        write_png(&frames_dir.join(format!("{t:06}.png")), f)?;
    }
    let mut m = rc.section("model");
    m.insert("ckpt".into(), resolve(&a.ckpt).display().to_string());
    m.insert(
        "adapter".into(),
        a.adapter.as_ref().map_or("none".into(), |p| resolve(p).display().to_string()),
    );
    m.insert("template".into(), resolve(&a.template).display().to_string());
    m.insert("audio".into(), resolve(&a.audio).display().to_string());
    m.insert("seed".into(), seed.to_string());
    m.insert("ref_index".into(), ref_index.to_string());
    m.insert("masking".into(), opts.masking.to_string());
    m.insert("policy".into(), format!("{:?}", opts.policy).to_lowercase());
    m.insert("feather".into(), a.feather.to_string());
    m.insert("frames".into(), out.frames.len().to_string());
    let idx: Vec<String> = out.template_index.iter().map(|i| i.to_string()).collect();
    m.insert("template_index".into(), idx.join(","));
    let path = dir.join("manifest.txt");
    fs::write(&path, format_kv(&m)).map_err(|e| Error::io(&path, e))
}

fn cmd_evaluate(a: &EvaluateArgs, mut rc: RunConfig, seed: u64) -> Result<()> {
    for (k, v) in recorded_model(&a.ckpt)?.to_kv() {
        rc.set(&k, v);
    }
    let cfg = rc.model()?;
    let base = load_model(&a.ckpt, &cfg)?;
    let adapter = match &a.adapter {
        Some(p) => Some(load_adapter(p, &cfg, &base)?),
        None => None,
    };
    let sync = match &a.syncnet {
        Some(p) => Some(load_syncnet(p, &cfg)?.params),
        None => None,
    };
    let clips = load_clips(&a.data, &cfg)?;
    let embedder = SurrogateEmbedder::default();
    let mut report = MetricsReport {
        config_fingerprint: cfg.fingerprint(),
        clips: Vec::new(),
    };
    for (i, clip) in clips.iter().enumerate() {
        // one seeded reference per clip, shared by all its frames
        let r = pick_reference(seed.wrapping_add(i as u64), clip.len());
        let frames = self_driven(&cfg, &base.params, adapter.as_ref(), clip, r, !a.no_mask)?;
        let name = format!("clip_{i:05}");
        let sync_ref = sync.as_ref().map(|p| (&cfg, p));
        report.clips.push(evaluate_clip(&name, &frames, clip, sync_ref, &embedder)?);
    }
    let out = resolve(&a.out);
    if let Some(d) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    fs::write(&out, report.to_jsonl()).map_err(|e| Error::io(&out, e))?;
    let agg = report.aggregate();
    println!(
        "clips {} ssim {:.4} psnr {:.2} lmd {:.3} mouth_corr {:.3}",
        report.clips.len(),
        agg.ssim.mean,
        agg.psnr.mean,
        agg.lmd.mean,
        agg.mouth_corr.mean
    );
    Ok(())
}

/// `error[<class>]: <message>` on one line.
pub fn error_line(e: &Error) -> String {
    let msg = e.to_string().replace('\n', " ");
    format!("error[{}]: {msg}", e.class())
}
