//! The two spectral mappers and two frame classifiers.
//!
//! Every model is a [`Model`]: an [`Arch`] (hyperparameters) plus a
//! [`ParamStore`] whose entries are named `mapper/...` or `classifier/...`.
//! A forward pass binds the store to a [`Tape`] and returns the output
//! variable together with any pending moving-statistic updates.
//!
//! | arch | input rows | output rows |
//! |---|---|---|
//! | DNN mapper | 8481 (spliced static + deltas) | 257 |
//! | ResNet mapper | 2827 (spliced, viewed as 1 x 11 x 257) | 257 |
//! | DNN classifier | 2827 | D logits |
//! | WRBN classifier | 257, one whole utterance | D logits |

mod dnn;
mod layers;
pub mod params;
pub mod resnet;
mod wrbn;

use std::collections::BTreeMap;
use std::fmt;

use crate::dsp::{BINS, DELTA_SPLICE_WIDTH, SPLICE_WIDTH};
use crate::tensor::{Tape, TensorError, Var};

pub use params::{Bound, Param, ParamKind, ParamStore};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{arch} expects input rows of width {expected}, got {got}")]
    InputWidth {
        arch: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{0} needs at least one frame")]
    Empty(&'static str),
    #[error("config: {0}")]
    Config(String),
    #[error("parameter {name}: {reason}")]
    Param { name: String, reason: String },
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Mapper,
    Classifier,
}

impl Role {
    pub fn prefix(self) -> &'static str {
        match self {
            Role::Mapper => "mapper",
            Role::Classifier => "classifier",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.prefix())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Dropout active (stream seeded by `seed`), moving statistics updated.
    Train {
        seed: u64,
    },
    Eval,
}

/// Which feature view a model consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputKind {
    /// Static + delta + delta-delta frames spliced with +-5 context.
    DeltaSpliced,
    /// Static frames spliced with +-5 context.
    Spliced,
    /// Unspliced frames of one whole utterance.
    Utterance,
}

impl InputKind {
    pub fn width(self) -> usize {
        match self {
            InputKind::DeltaSpliced => DELTA_SPLICE_WIDTH,
            InputKind::Spliced => SPLICE_WIDTH,
            InputKind::Utterance => BINS,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DnnMapperConfig {
    pub hidden: usize,
    pub layers: usize,
    pub dropout: f64,
}

impl DnnMapperConfig {
    pub fn paper() -> Self {
        Self {
            hidden: 2048,
            layers: 2,
            dropout: 0.3,
        }
    }

    pub fn desk() -> Self {
        Self {
            hidden: 128,
            ..Self::paper()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResnetMapperConfig {
    pub filters: [usize; 4],
    pub fc: usize,
    /// Channel-wise dropout after every conv.
    pub dropout: f64,
}

impl ResnetMapperConfig {
    pub fn paper() -> Self {
        Self {
            filters: [128, 128, 256, 256],
            fc: 2048,
            dropout: 0.1,
        }
    }

    pub fn desk() -> Self {
        Self {
            filters: [16, 16, 32, 32],
            fc: 128,
            dropout: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DnnClassifierConfig {
    pub hidden: usize,
    pub layers: usize,
    pub leak: f64,
    pub classes: usize,
}

impl DnnClassifierConfig {
    pub fn paper() -> Self {
        Self {
            hidden: 1024,
            layers: 6,
            leak: 0.3,
            classes: 1999,
        }
    }

    pub fn desk(classes: usize) -> Self {
        Self {
            hidden: 64,
            classes,
            ..Self::paper()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WrbnConfig {
    /// Channels of the three residual blocks; the stem uses the first.
    pub widths: [usize; 3],
    /// Hidden units per LSTM direction.
    pub lstm: usize,
    /// Width of the linear layers around the LSTMs.
    pub linear: usize,
    pub dropout: f64,
    pub classes: usize,
    pub freq_pool: FreqPool,
}

/// How the WRBN reduces each downsampled frame before the projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FreqPool {
    /// Keep every channel at every reduced frequency.
    Flatten,
    /// Average over frequency, one value per channel.
    Mean,
}

impl fmt::Display for FreqPool {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FreqPool::Flatten => "flatten",
            FreqPool::Mean => "mean",
        })
    }
}

impl std::str::FromStr for FreqPool {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "flatten" => Ok(FreqPool::Flatten),
            "mean" => Ok(FreqPool::Mean),
            _ => Err(format!("unknown frequency pooling {s:?}")),
        }
    }
}

impl WrbnConfig {
    pub fn paper() -> Self {
        Self {
            widths: [80, 160, 320],
            lstm: 512,
            linear: 512,
            dropout: 0.2,
            classes: 1999,
            freq_pool: FreqPool::Flatten,
        }
    }

    pub fn desk(classes: usize) -> Self {
        Self {
            widths: [8, 16, 32],
            lstm: 64,
            linear: 64,
            dropout: 0.2,
            classes,
            freq_pool: FreqPool::Flatten,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Arch {
    DnnMapper(DnnMapperConfig),
    ResnetMapper(ResnetMapperConfig),
    DnnClassifier(DnnClassifierConfig),
    Wrbn(WrbnConfig),
}

impl Arch {
    pub fn role(&self) -> Role {
        match self {
            Arch::DnnMapper(_) | Arch::ResnetMapper(_) => Role::Mapper,
            Arch::DnnClassifier(_) | Arch::Wrbn(_) => Role::Classifier,
        }
    }

    /// Short tag stored in checkpoints: `dnn`, `resnet` or `wrbn`.
    pub fn tag(&self) -> &'static str {
        match self {
            Arch::DnnMapper(_) | Arch::DnnClassifier(_) => "dnn",
            Arch::ResnetMapper(_) => "resnet",
            Arch::Wrbn(_) => "wrbn",
        }
    }

    pub fn input(&self) -> InputKind {
        match self {
            Arch::DnnMapper(_) => InputKind::DeltaSpliced,
            Arch::ResnetMapper(_) | Arch::DnnClassifier(_) => InputKind::Spliced,
            Arch::Wrbn(_) => InputKind::Utterance,
        }
    }

    pub fn output_width(&self) -> usize {
        match self {
            Arch::DnnMapper(_) | Arch::ResnetMapper(_) => BINS,
            Arch::DnnClassifier(c) => c.classes,
            Arch::Wrbn(c) => c.classes,
        }
    }

    /// `key=value` description sufficient to rebuild the architecture.
    pub fn to_config(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("role", self.role().to_string());
        put("arch", self.tag().to_string());
        match self {
            Arch::DnnMapper(c) => {
                put("hidden", c.hidden.to_string());
                put("layers", c.layers.to_string());
                put("dropout", c.dropout.to_string());
            }
            Arch::ResnetMapper(c) => {
                put("filters", join(&c.filters));
                put("fc", c.fc.to_string());
                put("dropout", c.dropout.to_string());
            }
            Arch::DnnClassifier(c) => {
                put("hidden", c.hidden.to_string());
                put("layers", c.layers.to_string());
                put("leak", c.leak.to_string());
                put("classes", c.classes.to_string());
            }
            Arch::Wrbn(c) => {
                put("widths", join(&c.widths));
                put("lstm", c.lstm.to_string());
                put("linear", c.linear.to_string());
                put("dropout", c.dropout.to_string());
                put("classes", c.classes.to_string());
                put("freq_pool", c.freq_pool.to_string());
            }
        }
        m
    }

    pub fn from_config(cfg: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| {
            cfg.get(k)
                .map(String::as_str)
                .ok_or_else(|| ModelError::Config(format!("missing key {k}")))
        };
        let num = |k: &str| -> Result<usize> { parse(k, get(k)?) };
        let real = |k: &str| -> Result<f64> { parse(k, get(k)?) };
        let arch = match (get("role")?, get("arch")?) {
            ("mapper", "dnn") => Arch::DnnMapper(DnnMapperConfig {
                hidden: num("hidden")?,
                layers: num("layers")?,
                dropout: real("dropout")?,
            }),
            ("mapper", "resnet") => Arch::ResnetMapper(ResnetMapperConfig {
                filters: split::<4>("filters", get("filters")?)?,
                fc: num("fc")?,
                dropout: real("dropout")?,
            }),
            ("classifier", "dnn") => Arch::DnnClassifier(DnnClassifierConfig {
                hidden: num("hidden")?,
                layers: num("layers")?,
                leak: real("leak")?,
                classes: num("classes")?,
            }),
            ("classifier", "wrbn") => Arch::Wrbn(WrbnConfig {
                widths: split::<3>("widths", get("widths")?)?,
                lstm: num("lstm")?,
                linear: num("linear")?,
                dropout: real("dropout")?,
                classes: num("classes")?,
                freq_pool: cfg
                    .get("freq_pool")
                    .map_or(Ok(FreqPool::Flatten), |v| parse("freq_pool", v))?,
            }),
            (r, a) => return Err(ModelError::Config(format!("unknown architecture {r}/{a}"))),
        };
        arch.validate()?;
        Ok(arch)
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        let rate_ok = |r: f64| (0.0..1.0).contains(&r);
        match self {
            Arch::DnnMapper(c) if c.hidden == 0 || !rate_ok(c.dropout) => {
                bad("dnn mapper needs hidden > 0 and dropout in [0,1)")
            }
            Arch::ResnetMapper(c) if c.filters.contains(&0) || c.fc == 0 || !rate_ok(c.dropout) => {
                bad("resnet mapper needs positive widths and dropout in [0,1)")
            }
            Arch::DnnClassifier(c) if c.hidden == 0 || c.layers == 0 || c.classes < 2 => {
                bad("dnn classifier needs hidden, layers > 0 and classes >= 2")
            }
            Arch::Wrbn(c)
                if c.widths.contains(&0)
                    || c.lstm == 0
                    || c.linear == 0
                    || c.classes < 2
                    || !rate_ok(c.dropout) =>
            {
                bad("wrbn needs positive widths, classes >= 2 and dropout in [0,1)")
            }
            _ => Ok(()),
        }
    }
}

fn join(v: &[usize]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| ModelError::Config(format!("{key}: cannot parse {v:?}")))
}

fn split<const N: usize>(key: &str, v: &str) -> Result<[usize; N]> {
    let parts: Vec<usize> = v.split(',').map(|p| parse(key, p)).collect::<Result<_>>()?;
    parts
        .try_into()
        .map_err(|_| ModelError::Config(format!("{key}: expected {N} comma-separated values")))
}

/// A moving-statistics update produced by a train-mode pass.
#[derive(Clone, Debug, PartialEq)]
pub struct StatUpdate {
    pub mean: usize,
    pub var: usize,
    pub new_mean: Vec<f64>,
    pub new_var: Vec<f64>,
}

/// Output of a forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub out: Var,
    /// Pending moving-statistic updates; apply with [`Model::apply_stats`].
    pub stats: Vec<StatUpdate>,
}

/// Counts of weight tensors by layer type.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Census {
    pub conv: usize,
    pub affine: usize,
    pub lstm_directions: usize,
    pub batch_norm: usize,
}

#[derive(Clone, Debug)]
enum Layout {
    DnnMapper(dnn::MapperLayout),
    Resnet(resnet::Layout),
    DnnClassifier(dnn::ClassifierLayout),
    Wrbn(wrbn::Layout),
}

#[derive(Clone, Debug)]
pub struct Model {
    arch: Arch,
    params: ParamStore,
    layout: Layout,
}

impl Model {
    /// Builds and initializes a model; `seed` drives weight initialization.
    pub fn new(arch: Arch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let prefix = arch.role().prefix();
        let (params, layout) = match &arch {
            Arch::DnnMapper(c) => {
                let (p, l) = dnn::build_mapper(c, prefix, seed);
                (p, Layout::DnnMapper(l))
            }
            Arch::ResnetMapper(c) => {
                let (p, l) = resnet::build(c, prefix, seed);
                (p, Layout::Resnet(l))
            }
            Arch::DnnClassifier(c) => {
                let (p, l) = dnn::build_classifier(c, prefix, seed);
                (p, Layout::DnnClassifier(l))
            }
            Arch::Wrbn(c) => {
                let (p, l) = wrbn::build(c, prefix, seed);
                (p, Layout::Wrbn(l))
            }
        };
        Ok(Self {
            arch,
            params,
            layout,
        })
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn role(&self) -> Role {
        self.arch.role()
    }

    pub fn input(&self) -> InputKind {
        self.arch.input()
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Replaces every parameter value by name. All names must be present
    /// with matching shapes; nothing is modified on error.
    pub fn load_values<'a>(
        &mut self,
        values: impl IntoIterator<Item = (&'a str, &'a crate::tensor::Tensor)>,
    ) -> Result<()> {
        let mut staged = self.params.clone();
        let mut seen = vec![false; staged.len()];
        for (name, t) in values {
            let i = staged.position(name).ok_or_else(|| ModelError::Param {
                name: name.to_string(),
                reason: "not part of this architecture".into(),
            })?;
            if staged.value(i).dims() != t.dims() {
                return Err(ModelError::Param {
                    name: name.to_string(),
                    reason: format!(
                        "shape {:?}, expected {:?}",
                        t.dims(),
                        staged.value(i).dims()
                    ),
                });
            }
            *staged.value_mut(i) = t.clone();
            seen[i] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(ModelError::Param {
                name: staged.entry(i).name.clone(),
                reason: "missing".into(),
            });
        }
        self.params = staged;
        Ok(())
    }

    pub fn census(&self) -> Census {
        let mut c = Census::default();
        for p in self.params.iter() {
            let local = p.name.rsplit('/').next().unwrap_or("");
            match (local, p.value.rank()) {
                ("k", 4) => c.conv += 1,
                ("w", 2) => c.affine += 1,
                ("wx", _) => c.lstm_directions += 1,
                ("gamma", _) => c.batch_norm += 1,
                _ => {}
            }
        }
        c
    }

    /// Runs the model on `x` (rows of [`InputKind::width`]).
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var, mode: Mode) -> Result<Forward> {
        let dims = tape.try_value(x)?.dims().to_vec();
        let expected = self.input().width();
        if dims.len() != 2 || dims[1] != expected {
            return Err(ModelError::InputWidth {
                arch: self.arch.tag(),
                expected,
                got: dims.last().copied().unwrap_or(0),
            });
        }
        let mut ctx = layers::Ctx::new(tape, bound, &self.params, mode);
        let out = match (&self.layout, &self.arch) {
            (Layout::DnnMapper(l), Arch::DnnMapper(c)) => dnn::mapper_forward(&mut ctx, l, c, x)?,
            (Layout::Resnet(l), Arch::ResnetMapper(c)) => resnet::forward(&mut ctx, l, c, x)?,
            (Layout::DnnClassifier(l), Arch::DnnClassifier(c)) => {
                dnn::classifier_forward(&mut ctx, l, c, x)?
            }
            (Layout::Wrbn(l), Arch::Wrbn(c)) => wrbn::forward(&mut ctx, l, c, x)?,
            _ => unreachable!("layout always matches arch"),
        };
        Ok(ctx.finish(out))
    }

    /// Convenience inference: binds frozen parameters on a fresh tape and
    /// returns the eval-mode output.
    pub fn infer(&self, x: crate::tensor::Tensor) -> Result<crate::tensor::Tensor> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, true);
        let xv = tape.constant(x);
        let f = self.forward(&mut tape, &bound, xv, Mode::Eval)?;
        Ok(tape.value(f.out).clone())
    }

    /// Architecture and parameters, without optimizer state.
    pub fn to_checkpoint(&self) -> crate::io::Checkpoint {
        let mut config = self.arch.to_config();
        config.insert("kind".into(), "model".into());
        crate::io::Checkpoint {
            tensors: self
                .params
                .iter()
                .map(|p| (p.name.clone(), p.value.clone()))
                .collect(),
            optimizer: None,
            config,
        }
    }

    /// Rebuilds a model from [`Model::to_checkpoint`] output or a training
    /// state checkpoint (current, not best, parameters).
    pub fn from_checkpoint(ck: &crate::io::Checkpoint) -> Result<Self> {
        let mut m = Self::new(Arch::from_config(&ck.config)?, 0)?;
        m.load_values(
            ck.tensors
                .iter()
                .filter(|(n, _)| !n.starts_with("best/"))
                .map(|(n, t)| (n.as_str(), t)),
        )?;
        Ok(m)
    }

    pub fn apply_stats(&mut self, updates: &[StatUpdate]) {
        for u in updates {
            self.params
                .value_mut(u.mean)
                .data_mut()
                .copy_from_slice(&u.new_mean);
            self.params
                .value_mut(u.var)
                .data_mut()
                .copy_from_slice(&u.new_var);
        }
    }
}
