//! `specmimic`: batch driver for corpus synthesis, training, enhancement
//! and evaluation.
//!
//! Exit codes: 0 ok, 2 usage, 3 I/O, 4 divergence, 5 artifact/data mismatch.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use specmimic::dsp::BINS;
use specmimic::io::{self, Checkpoint, IoError, Manifest, Split};
use specmimic::metrics;
use specmimic::models::{
    Arch, DnnClassifierConfig, DnnMapperConfig, Model, ModelError, ResnetMapperConfig, Role,
    WrbnConfig,
};
use specmimic::seed;
use specmimic::synth::{self, CorpusConfig, SynthError};
use specmimic::training::{
    self, data, loss_magnitudes, FeatureSet, LrMode, Outcome, RunOptions, TrainConfig, TrainError,
    TrainState,
};

use config::Map;

/// A failed command: message for stderr and the process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub msg: String,
}

impl Failure {
    pub fn usage(msg: impl Into<String>) -> Self {
        Self {
            code: 2,
            msg: msg.into(),
        }
    }

    pub fn io(msg: impl Into<String>) -> Self {
        Self {
            code: 3,
            msg: msg.into(),
        }
    }

    pub fn mismatch(msg: impl Into<String>) -> Self {
        Self {
            code: 5,
            msg: msg.into(),
        }
    }
}

impl From<IoError> for Failure {
    fn from(e: IoError) -> Self {
        Failure::io(e.to_string())
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        Failure::mismatch(e.to_string())
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        let code = match &e {
            TrainError::Io(_) => 3,
            TrainError::Diverged { .. } => 4,
            TrainError::Config(_) => 2,
            _ => 5,
        };
        Failure {
            code,
            msg: e.to_string(),
        }
    }
}

impl From<SynthError> for Failure {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Config(_) => Failure::usage(e.to_string()),
            _ => Failure::io(e.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, Failure>;

#[derive(Parser)]
#[command(
    name = "specmimic",
    version,
    about = "Spectral mapping with mimic loss"
)]
struct Cli {
    /// Worker threads for data preparation and batch-parallel kernels.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic parallel corpus.
    SynthData(SynthArgs),
    /// Train a frame classifier on clean features.
    TrainClassifier(ClassifierArgs),
    /// Train a spectral mapper on the fidelity loss.
    PretrainMapper(MapperArgs),
    /// Continue mapper training with fidelity plus weighted mimic loss.
    TrainMimic(MimicArgs),
    /// Map one utterance to a denoised feature matrix.
    Enhance(EnhanceArgs),
    /// Score a mapper (or the identity) on one split.
    Eval(EvalArgs),
    /// Render a feature matrix as a PGM image.
    ExportSpectrogram(ExportArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    train: usize,
    #[arg(long, default_value_t = 69)]
    dev: usize,
    #[arg(long, default_value_t = 55)]
    test: usize,
    #[arg(long, default_value_t = 40)]
    classes: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 2)]
    min_segments: usize,
    #[arg(long, default_value_t = 4)]
    max_segments: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scale {
    Desk,
    Paper,
}

#[derive(Args)]
struct TrainArgs {
    /// Corpus directory written by synth-data.
    #[arg(long)]
    data: PathBuf,
    /// Trained model checkpoint (best dev epoch).
    #[arg(long)]
    out: PathBuf,
    /// key=value file; flags take precedence over it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra key=value override, repeatable.
    #[arg(long = "set", value_parser = config::parse_pair)]
    sets: Vec<(String, String)>,
    #[arg(long, value_enum, default_value_t = Scale::Desk)]
    scale: Scale,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Loss trace CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Resumable training state, rewritten after every epoch.
    #[arg(long)]
    state: Option<PathBuf>,
    /// Continue from a state written by --state.
    #[arg(long)]
    resume: Option<PathBuf>,
}

impl TrainArgs {
    fn flags(&self) -> Vec<(String, String)> {
        let mut f = Vec::new();
        let mut add = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                f.push((format!("train.{k}"), v));
            }
        };
        add("epochs", self.epochs.map(|v| v.to_string()));
        add("lr0", self.lr.map(|v| v.to_string()));
        add("batch_size", self.batch_size.map(|v| v.to_string()));
        add("seed", self.seed.map(|v| v.to_string()));
        f.extend(self.sets.iter().cloned());
        f
    }
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum ClassifierArch {
    Dnn,
    Wrbn,
}

#[derive(Args)]
struct ClassifierArgs {
    #[arg(long, value_enum)]
    arch: ClassifierArch,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum MapperArch {
    Dnn,
    Resnet,
}

#[derive(Clone, Copy, ValueEnum)]
enum LrModeArg {
    Exp,
    Drop,
}

#[derive(Args)]
struct MapperArgs {
    #[arg(long, value_enum)]
    arch: MapperArch,
    #[arg(long, value_enum)]
    lr_mode: Option<LrModeArg>,
    /// Start from this mapper checkpoint instead of a fresh initialization.
    #[arg(long)]
    init: Option<PathBuf>,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args)]
struct MimicArgs {
    #[arg(long)]
    mapper: PathBuf,
    #[arg(long)]
    classifier: PathBuf,
    /// Mimic weight, or `auto` to balance both terms on the dev set at the start.
    #[arg(long)]
    alpha: Option<String>,
    #[arg(long, value_enum)]
    lr_mode: Option<LrModeArg>,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args)]
struct EnhanceArgs {
    #[arg(long)]
    mapper: PathBuf,
    /// 16 kHz mono WAV, or an SMAP matrix of normalized log spectra.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Mapper checkpoint, or `identity` to score the noisy features.
    #[arg(long)]
    mapper: String,
    #[arg(long)]
    classifier: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "dev")]
    split: Split,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.max(1))
        .build_global()
    {
        eprintln!("error: thread pool: {e}");
        return ExitCode::from(2);
    }
    let result = match cli.cmd {
        Command::SynthData(a) => synth_data(a),
        Command::TrainClassifier(a) => train_classifier(a),
        Command::PretrainMapper(a) => pretrain_mapper(a),
        Command::TrainMimic(a) => train_mimic(a),
        Command::Enhance(a) => enhance(a),
        Command::Eval(a) => eval(a),
        Command::ExportSpectrogram(a) => export(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

fn synth_data(a: SynthArgs) -> Result<()> {
    let cfg = CorpusConfig {
        train: a.train,
        dev: a.dev,
        test: a.test,
        classes: a.classes,
        seed: a.seed,
        min_segments: a.min_segments,
        max_segments: a.max_segments,
    };
    synth::build_corpus(&cfg, &a.out)?;
    println!("{}", a.out.join(Manifest::FILE_NAME).display());
    Ok(())
}

fn corpus_classes(dir: &Path) -> Result<usize> {
    let m = Manifest::read(&dir.join(Manifest::FILE_NAME))?;
    m.header
        .get("classes")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Failure::mismatch("manifest header has no class count"))
}

fn load_sets(dir: &Path) -> Result<(FeatureSet, FeatureSet)> {
    Ok((
        FeatureSet::load(dir, Split::Train)?,
        FeatureSet::load(dir, Split::Dev)?,
    ))
}

fn load_model(path: &Path) -> Result<Model> {
    Ok(Model::from_checkpoint(&io::read_checkpoint(path)?)?)
}

fn require_role(m: &Model, role: Role, what: &Path) -> Result<()> {
    if m.role() == role {
        Ok(())
    } else {
        Err(Failure::mismatch(format!(
            "{}: expected a {role} checkpoint, got a {}",
            what.display(),
            m.role()
        )))
    }
}

fn require_classes(cls: &Model, classes: usize) -> Result<()> {
    let d = cls.arch().output_width();
    if d == classes {
        Ok(())
    } else {
        Err(Failure::mismatch(format!(
            "classifier has {d} outputs, corpus has {classes} classes"
        )))
    }
}

fn preset(arch: &str, scale: Scale, classes: usize) -> Arch {
    match (arch, scale) {
        ("dnn-mapper", Scale::Desk) => Arch::DnnMapper(DnnMapperConfig::desk()),
        ("dnn-mapper", Scale::Paper) => Arch::DnnMapper(DnnMapperConfig::paper()),
        ("resnet", Scale::Desk) => Arch::ResnetMapper(ResnetMapperConfig::desk()),
        ("resnet", Scale::Paper) => Arch::ResnetMapper(ResnetMapperConfig::paper()),
        ("dnn-classifier", Scale::Desk) => Arch::DnnClassifier(DnnClassifierConfig::desk(classes)),
        ("dnn-classifier", Scale::Paper) => Arch::DnnClassifier(DnnClassifierConfig {
            classes,
            ..DnnClassifierConfig::paper()
        }),
        ("wrbn", Scale::Desk) => Arch::Wrbn(WrbnConfig::desk(classes)),
        ("wrbn", Scale::Paper) => Arch::Wrbn(WrbnConfig {
            classes,
            ..WrbnConfig::paper()
        }),
        _ => unreachable!("preset names are fixed"),
    }
}

fn defaults(arch: &Arch, scale: Scale) -> Map {
    let cfg = match scale {
        Scale::Desk => TrainConfig::desk(arch),
        Scale::Paper => TrainConfig {
            lr0: TrainConfig::paper_lr(arch),
            ..TrainConfig::default()
        },
    };
    let mut m = arch.to_config();
    m.extend(cfg.to_map());
    m
}

/// What a training command starts from.
struct Setup {
    model: Model,
    cfg: TrainConfig,
    resume: Option<TrainState>,
    effective: Map,
}

/// Resolves the effective configuration and the starting model. `base` is
/// the default layer; a resume checkpoint's echoed config replaces it.
fn setup(t: &TrainArgs, base: Map, start: Option<Model>) -> Result<Setup> {
    let resumed = match &t.resume {
        Some(p) => Some(io::read_checkpoint(p)?),
        None => None,
    };
    let layer0 = match &resumed {
        Some(ck) => {
            let mut m = ck.config.clone();
            m.retain(|k, _| base.contains_key(k));
            if m.get("arch") != base.get("arch") || m.get("role") != base.get("role") {
                return Err(Failure::mismatch(
                    "resume state is for a different architecture",
                ));
            }
            m
        }
        None => base,
    };
    let effective = config::layer(layer0, t.config.as_deref(), &t.flags())?;
    let arch = Arch::from_config(&effective).map_err(|e| Failure::usage(e.to_string()))?;
    let cfg = TrainConfig::from_map(&effective)?;
    let model = match (start, &resumed) {
        (_, Some(ck)) => {
            let m = Model::from_checkpoint(ck)?;
            if m.arch() != &arch {
                return Err(Failure::mismatch(
                    "resume state architecture differs from the requested one",
                ));
            }
            m
        }
        (Some(m), None) => {
            if m.arch() != &arch {
                return Err(Failure::mismatch(
                    "initial checkpoint architecture differs from the requested one",
                ));
            }
            m
        }
        (None, None) => Model::new(arch, seed::derive(cfg.seed, &[0x1417]))?,
    };
    let resume = match &resumed {
        Some(ck) => Some(TrainState::from_checkpoint(ck, &model)?),
        None => None,
    };
    Ok(Setup {
        model,
        cfg,
        resume,
        effective,
    })
}

/// Runs `train` with the state hook, then writes the model and trace.
fn finish_training(
    t: &TrainArgs,
    s: Setup,
    train: impl FnOnce(&mut Model, &TrainConfig, RunOptions<'_>) -> training::Result<Outcome>,
) -> Result<(Model, Outcome)> {
    let Setup {
        mut model,
        cfg,
        resume,
        effective,
    } = s;
    let resumed = resume.is_some();
    let template = model.clone();
    let mut hook = |st: &TrainState| -> training::Result<()> {
        if let Some(p) = &t.state {
            let mut ck = st.to_checkpoint(&template, &cfg);
            ck.config.extend(effective.clone());
            ck.config.insert("kind".into(), "train-state".into());
            io::write_checkpoint(p, &ck)?;
        }
        Ok(())
    };
    let outcome = train(
        &mut model,
        &cfg,
        RunOptions {
            resume,
            on_epoch: Some(&mut hook),
        },
    )?;
    let mut ck: Checkpoint = model.to_checkpoint();
    ck.config.extend(effective);
    ck.config.insert("kind".into(), "model".into());
    if let Some(b) = &outcome.best {
        ck.config.insert("best_epoch".into(), b.epoch.to_string());
    }
    io::write_checkpoint(&t.out, &ck)?;
    if let Some(p) = &t.trace {
        training::write_trace(p, &outcome.trace, resumed)?;
    }
    Ok((model, outcome))
}

fn report(outcome: &Outcome) {
    if let Some(b) = &outcome.best {
        println!("best_epoch={}", b.epoch);
        let s = &b.scores;
        for (k, v) in [
            ("dev_fidelity", s.fidelity),
            ("dev_mimic", s.mimic),
            ("dev_ce", s.ce),
            ("dev_accuracy", s.accuracy),
        ] {
            if let Some(v) = v {
                println!("{k}={v}");
            }
        }
    }
}

fn train_classifier(a: ClassifierArgs) -> Result<()> {
    let classes = corpus_classes(&a.train.data)?;
    let name = match a.arch {
        ClassifierArch::Dnn => "dnn-classifier",
        ClassifierArch::Wrbn => "wrbn",
    };
    let arch = preset(name, a.train.scale, classes);
    let s = setup(&a.train, defaults(&arch, a.train.scale), None)?;
    require_classes(&s.model, classes)?;
    let (train, dev) = load_sets(&a.train.data)?;
    let (_, out) = finish_training(&a.train, s, |m, cfg, opts| {
        training::pretrain_classifier(m, &train, &dev, cfg, opts)
    })?;
    report(&out);
    Ok(())
}

fn lr_mode_flag(m: Option<LrModeArg>) -> Vec<(String, String)> {
    m.map(|m| {
        let v = match m {
            LrModeArg::Exp => LrMode::Exp,
            LrModeArg::Drop => LrMode::Drop,
        };
        vec![("train.lr_mode".to_string(), v.to_string())]
    })
    .unwrap_or_default()
}

fn pretrain_mapper(a: MapperArgs) -> Result<()> {
    let name = match a.arch {
        MapperArch::Dnn => "dnn-mapper",
        MapperArch::Resnet => "resnet",
    };
    let start = match &a.init {
        Some(p) => {
            let m = load_model(p)?;
            require_role(&m, Role::Mapper, p)?;
            if m.arch().tag() != preset(name, Scale::Desk, 2).tag() {
                return Err(Failure::mismatch(format!(
                    "{}: checkpoint holds a {} mapper, not {name}",
                    p.display(),
                    m.arch().tag()
                )));
            }
            Some(m)
        }
        None => None,
    };
    let arch = match &start {
        Some(m) => m.arch().clone(),
        None => preset(name, a.train.scale, 2),
    };
    let mut t = a.train;
    t.sets.splice(0..0, lr_mode_flag(a.lr_mode));
    let s = setup(&t, defaults(&arch, t.scale), start)?;
    let (train, dev) = load_sets(&t.data)?;
    let (_, out) = finish_training(&t, s, |m, cfg, opts| {
        training::pretrain_mapper(m, &train, &dev, cfg, opts)
    })?;
    report(&out);
    Ok(())
}

fn train_mimic(a: MimicArgs) -> Result<()> {
    let mapper = load_model(&a.mapper)?;
    require_role(&mapper, Role::Mapper, &a.mapper)?;
    let cls = load_model(&a.classifier)?;
    require_role(&cls, Role::Classifier, &a.classifier)?;
    require_classes(&cls, corpus_classes(&a.train.data)?)?;
    let (train, dev) = load_sets(&a.train.data)?;

    let mut base = defaults(mapper.arch(), a.train.scale);
    base.insert(
        "train.alpha".into(),
        TrainConfig::default_alpha(cls.arch()).to_string(),
    );
    let mut t = a.train;
    t.sets.splice(0..0, lr_mode_flag(a.lr_mode));
    match a.alpha.as_deref() {
        None => {}
        Some("auto") => {
            let (fid, mim) = loss_magnitudes(&mapper, &cls, &dev)?;
            if !(mim > 0.0) {
                return Err(Failure::mismatch(
                    "mimic loss is zero at the start; cannot balance",
                ));
            }
            let alpha = fid / mim;
            println!("alpha={alpha}");
            t.sets.insert(0, ("train.alpha".into(), alpha.to_string()));
        }
        Some(v) => {
            v.parse::<f64>()
                .map_err(|_| Failure::usage(format!("--alpha: cannot parse {v:?}")))?;
            t.sets.insert(0, ("train.alpha".into(), v.to_string()));
        }
    }
    let s = setup(&t, base, Some(mapper))?;
    let (_, out) = finish_training(&t, s, |m, cfg, opts| {
        training::train_mimic(m, &cls, &train, &dev, cfg, opts)
    })?;
    report(&out);
    Ok(())
}

fn read_frames(path: &Path) -> Result<specmimic::tensor::Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Failure::io(format!("{}: {e}", path.display())))?;
    let frames = if bytes.starts_with(b"RIFF") {
        let w = io::decode_wav(&bytes)?;
        data::features(&w)?
    } else {
        io::decode_smap(&bytes)?
    };
    if frames.dims()[1] != BINS {
        return Err(Failure::mismatch(format!(
            "{}: {} columns, expected {BINS}",
            path.display(),
            frames.dims()[1]
        )));
    }
    Ok(frames)
}

fn enhance(a: EnhanceArgs) -> Result<()> {
    let mapper = load_model(&a.mapper)?;
    require_role(&mapper, Role::Mapper, &a.mapper)?;
    let frames = read_frames(&a.input)?;
    let out = training::enhance(&mapper, &frames)?;
    io::write_smap(&a.out, &out)?;
    println!("frames={}", out.dims()[0]);
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let mapper = if a.mapper == "identity" {
        None
    } else {
        let p = PathBuf::from(&a.mapper);
        let m = load_model(&p)?;
        require_role(&m, Role::Mapper, &p)?;
        Some(m)
    };
    let cls = match &a.classifier {
        Some(p) => {
            let c = load_model(p)?;
            require_role(&c, Role::Classifier, p)?;
            require_classes(&c, corpus_classes(&a.data)?)?;
            Some(c)
        }
        None => None,
    };
    let set = FeatureSet::load(&a.data, a.split)?;
    let r = metrics::evaluate(mapper.as_ref(), cls.as_ref(), &set, a.split.name())?;
    let text = serde_json::to_string_pretty(&r).expect("report serializes") + "\n";
    print!("{text}");
    if let Some(p) = &a.out {
        std::fs::write(p, &text).map_err(|e| Failure::io(format!("{}: {e}", p.display())))?;
    }
    Ok(())
}

fn export(a: ExportArgs) -> Result<()> {
    let m = io::read_smap(&a.input)?;
    io::write_pgm(&a.out, &m)?;
    Ok(())
}
