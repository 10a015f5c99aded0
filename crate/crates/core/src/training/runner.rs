//! The epoch loop shared by every training stage, and the three objectives.

use std::collections::BTreeMap;
use std::path::Path;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use super::data::{
    concat_rows, frame_batches, model_input, resplice_index, spliced_rows, utterance_groups,
    FeatureSet,
};
use super::schedule::{lr_schedule, Plateau};
use super::{
    fidelity_loss, joint_loss, mimic_loss, Result, TrainConfig, TrainError, DIVERGENCE_LIMIT,
};
use crate::dsp::{BINS, SPLICE_WIDTH};
use crate::io::{Checkpoint, IoError};
use crate::models::{Bound, InputKind, Mode, Model, ParamStore, Role, StatUpdate};
use crate::seed;
use crate::tensor::{Tape, Tensor, Var};

/// One CSV trace line. Training columns are per step; dev columns are
/// filled on the last step of each epoch (and on the step-0 row).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: u64,
    pub lr: f64,
    pub fidelity: Option<f64>,
    pub mimic: Option<f64>,
    pub joint: Option<f64>,
    pub dev_fidelity: Option<f64>,
    pub dev_ce: Option<f64>,
}

pub fn write_trace(path: &Path, rows: &[TraceRow], append: bool) -> Result<()> {
    let io_err = |e: std::io::Error| {
        TrainError::Io(IoError::Io {
            path: path.display().to_string(),
            source: e,
        })
    };
    let exists = path.exists();
    let file = std::fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .map_err(io_err)?;
    let mut w = csv::WriterBuilder::new()
        .has_headers(!(append && exists))
        .from_writer(file);
    for r in rows {
        w.serialize(r).map_err(|e| io_err(e.into()))?;
    }
    w.flush().map_err(io_err)?;
    Ok(())
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>> {
    let bad = |e: csv::Error| {
        TrainError::Io(IoError::Corrupt {
            format: "trace",
            reason: e.to_string(),
        })
    };
    let mut r = csv::Reader::from_path(path).map_err(bad)?;
    r.deserialize().map(|row| row.map_err(bad)).collect()
}

/// Dev-set scores after an epoch. `select` ranks checkpoints and drives the
/// lr drop: dev CE for classifiers, dev fidelity (+ alpha * mimic) for mappers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct DevScores {
    pub fidelity: Option<f64>,
    pub mimic: Option<f64>,
    pub ce: Option<f64>,
    pub accuracy: Option<f64>,
    pub select: f64,
}

impl DevScores {
    fn put(&self, prefix: &str, m: &mut BTreeMap<String, String>) {
        let fields = [
            ("fidelity", self.fidelity),
            ("mimic", self.mimic),
            ("ce", self.ce),
            ("accuracy", self.accuracy),
            ("select", Some(self.select)),
        ];
        for (k, v) in fields {
            if let Some(v) = v {
                m.insert(format!("{prefix}.{k}"), format!("{:016x}", v.to_bits()));
            }
        }
    }

    fn take(prefix: &str, m: &BTreeMap<String, String>) -> Result<Self> {
        let f = |k: &str| -> Result<Option<f64>> {
            m.get(&format!("{prefix}.{k}"))
                .map(|v| {
                    u64::from_str_radix(v, 16)
                        .map(f64::from_bits)
                        .map_err(|_| TrainError::Resume(format!("unreadable {prefix}.{k}")))
                })
                .transpose()
        };
        Ok(Self {
            fidelity: f("fidelity")?,
            mimic: f("mimic")?,
            ce: f("ce")?,
            accuracy: f("accuracy")?,
            select: f("select")?
                .ok_or_else(|| TrainError::Resume(format!("missing {prefix}.select")))?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Best {
    /// 1-based epoch that produced this model.
    pub epoch: usize,
    pub scores: DevScores,
    pub params: ParamStore,
}

/// Everything needed to continue a run exactly where it stopped. Values are
/// held at 32-bit precision at epoch boundaries, so a state written to a
/// checkpoint and read back resumes bit-identically.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub params: ParamStore,
    pub adam: AdamState,
    pub plateau: Plateau,
    pub best: Option<Best>,
    pub initial: DevScores,
}

const BEST_PREFIX: &str = "best/";

impl TrainState {
    /// Serializes alongside the model and run configuration.
    pub fn to_checkpoint(&self, model: &Model, cfg: &TrainConfig) -> Checkpoint {
        let mut tensors: Vec<(String, Tensor)> = self
            .params
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect();
        let mut schedule = self.plateau.to_map();
        schedule.insert("epoch".into(), self.epoch.to_string());
        schedule.insert("step".into(), self.step.to_string());
        self.initial.put("initial", &mut schedule);
        if let Some(b) = &self.best {
            tensors.extend(
                b.params
                    .iter()
                    .map(|p| (format!("{BEST_PREFIX}{}", p.name), p.value.clone())),
            );
            schedule.insert("best.epoch".into(), b.epoch.to_string());
            b.scores.put("best", &mut schedule);
        }
        let mut optimizer = self.adam.to_optimizer_state(&self.params);
        optimizer.schedule = schedule;
        let mut config = model.arch().to_config();
        config.extend(cfg.to_map());
        config.insert("kind".into(), "train-state".into());
        Checkpoint {
            tensors,
            optimizer: Some(optimizer),
            config,
        }
    }

    /// Restores a state for `model` (whose architecture must match).
    pub fn from_checkpoint(ck: &Checkpoint, model: &Model) -> Result<Self> {
        let opt = ck
            .optimizer
            .as_ref()
            .ok_or_else(|| TrainError::Resume("checkpoint holds no optimizer state".into()))?;
        let s = &opt.schedule;
        let parse = |k: &str| -> Result<u64> {
            s.get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| TrainError::Resume(format!("missing or bad {k}")))
        };
        let mut current = model.clone();
        current.load_values(
            ck.tensors
                .iter()
                .filter(|(n, _)| !n.starts_with(BEST_PREFIX))
                .map(|(n, t)| (n.as_str(), t)),
        )?;
        let best = if s.contains_key("best.epoch") {
            let mut b = model.clone();
            b.load_values(
                ck.tensors
                    .iter()
                    .filter_map(|(n, t)| n.strip_prefix(BEST_PREFIX).map(|n| (n, t))),
            )?;
            Some(Best {
                epoch: parse("best.epoch")? as usize,
                scores: DevScores::take("best", s)?,
                params: b.params().clone(),
            })
        } else {
            None
        };
        Ok(Self {
            epoch: parse("epoch")? as usize,
            step: parse("step")?,
            adam: AdamState::from_optimizer_state(opt, current.params())?,
            params: current.params().clone(),
            plateau: Plateau::from_map(s)?,
            best,
            initial: DevScores::take("initial", s)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Outcome {
    pub trace: Vec<TraceRow>,
    /// Dev scores of the starting model.
    pub initial: DevScores,
    /// Dev scores after each epoch run in this call.
    pub epochs: Vec<DevScores>,
    pub best: Option<Best>,
    pub state: TrainState,
}

type EpochHook<'a> = &'a mut dyn FnMut(&TrainState) -> Result<()>;

#[derive(Default)]
pub struct RunOptions<'a> {
    pub resume: Option<TrainState>,
    /// Called after every epoch with the resumable state.
    pub on_epoch: Option<EpochHook<'a>>,
}

struct StepLoss {
    joint: Var,
    fidelity: Option<Var>,
    mimic: Option<Var>,
    stats: Vec<StatUpdate>,
}

trait Objective {
    type Batch;
    fn batches(&self, seed: u64) -> Vec<Self::Batch>;
    fn loss(
        &self,
        tape: &mut Tape,
        model: &Model,
        bound: &Bound,
        batch: &Self::Batch,
        mode: Mode,
    ) -> Result<StepLoss>;
    fn evaluate(&self, model: &Model) -> Result<DevScores>;
}

fn check_finite(step: u64, loss: f64) -> Result<()> {
    if loss.is_finite() && loss <= DIVERGENCE_LIMIT {
        Ok(())
    } else {
        Err(TrainError::Diverged { step, loss })
    }
}

fn run<O: Objective>(
    model: &mut Model,
    obj: &O,
    cfg: &TrainConfig,
    opts: RunOptions<'_>,
) -> Result<Outcome> {
    cfg.validate()?;
    let mut trace = Vec::new();
    let mut st = match opts.resume {
        Some(s) => {
            let names: Vec<&str> = s.params.iter().map(|p| p.name.as_str()).collect();
            let ours: Vec<&str> = model.params().iter().map(|p| p.name.as_str()).collect();
            if names != ours {
                return Err(TrainError::Resume(
                    "state does not match the model's parameters".into(),
                ));
            }
            model.load_values(s.params.iter().map(|p| (p.name.as_str(), &p.value)))?;
            s
        }
        None => {
            let initial = obj.evaluate(model)?;
            check_finite(0, initial.select)?;
            trace.push(TraceRow {
                step: 0,
                lr: lr_schedule(0, cfg, false),
                dev_fidelity: initial.fidelity,
                dev_ce: initial.ce,
                ..Default::default()
            });
            TrainState {
                epoch: 0,
                step: 0,
                params: model.params().clone(),
                adam: AdamState::new(model.params()),
                plateau: Plateau::default(),
                best: None,
                initial,
            }
        }
    };
    let mut on_epoch = opts.on_epoch;
    let mut epochs = Vec::new();
    for epoch in st.epoch..cfg.epochs {
        let batches = obj.batches(seed::derive(cfg.seed, &[epoch as u64]));
        for (b, batch) in batches.iter().enumerate() {
            let mut tape = Tape::new();
            let bound = model.params().bind(&mut tape, false);
            let mode = Mode::Train {
                seed: seed::derive(cfg.seed, &[epoch as u64, b as u64, 0xD0]),
            };
            let sl = obj.loss(&mut tape, model, &bound, batch, mode)?;
            let scalar = |t: &Tape, v: Option<Var>| v.map(|v| t.value(v).data()[0]);
            let joint = tape.value(sl.joint).data()[0];
            check_finite(st.step, joint)?;
            let row_fid = scalar(&tape, sl.fidelity);
            let row_mim = scalar(&tape, sl.mimic);
            tape.backward(sl.joint)?;
            let mut grads = vec![None; model.params().len()];
            for (i, v) in bound.pairs() {
                grads[i] = tape.take_grad(v);
            }
            let lr = lr_schedule(st.step, cfg, st.plateau.dropped);
            st.adam.step(model.params_mut(), &grads, lr)?;
            model.apply_stats(&sl.stats);
            st.step += 1;
            trace.push(TraceRow {
                step: st.step,
                lr,
                fidelity: row_fid,
                mimic: row_mim,
                joint: Some(joint),
                ..Default::default()
            });
        }
        model.params_mut().snap_f32();
        st.adam.snap_f32();
        let dev = obj.evaluate(model)?;
        check_finite(st.step, dev.select)?;
        if let Some(last) = trace.last_mut() {
            last.dev_fidelity = dev.fidelity;
            last.dev_ce = dev.ce;
        }
        st.plateau.observe(dev.select, cfg);
        if st
            .best
            .as_ref()
            .is_none_or(|b| dev.select < b.scores.select)
        {
            st.best = Some(Best {
                epoch: epoch + 1,
                scores: dev,
                params: model.params().clone(),
            });
        }
        epochs.push(dev);
        st.epoch = epoch + 1;
        st.params = model.params().clone();
        if let Some(hook) = on_epoch.as_mut() {
            hook(&st)?;
        }
    }
    if let Some(b) = &st.best {
        *model.params_mut() = b.params.clone();
    }
    Ok(Outcome {
        trace,
        initial: st.initial,
        epochs,
        best: st.best.clone(),
        state: st,
    })
}

fn require_role(model: &Model, role: Role) -> Result<()> {
    if model.role() != role {
        return Err(TrainError::Role {
            expected: role,
            got: model.role(),
        });
    }
    Ok(())
}

fn require_nonempty(set: &FeatureSet, name: &'static str) -> Result<()> {
    if set.is_empty() {
        Err(TrainError::Empty(name))
    } else {
        Ok(())
    }
}

/// `(summed cross-entropy, correct argmax count)` of row logits.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> (f64, usize) {
    let d = logits.dims()[1];
    let mut ce = 0.0;
    let mut correct = 0;
    for (row, &z) in logits.data().chunks_exact(d).zip(labels) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        ce += lse - row[z];
        let arg = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                if v > bv {
                    (i, v)
                } else {
                    (bi, bv)
                }
            })
            .0;
        correct += usize::from(arg == z);
    }
    (ce, correct)
}

/// Eval-mode logits of a classifier for one utterance's `T x 257` frames.
pub fn classify(classifier: &Model, frames: &Tensor) -> Result<Tensor> {
    Ok(classifier.infer(model_input(classifier.input(), frames)?)?)
}

/// Eval-mode mapper output for one utterance's noisy `T x 257` frames.
pub fn enhance(mapper: &Model, noisy: &Tensor) -> Result<Tensor> {
    Ok(mapper.infer(model_input(mapper.input(), noisy)?)?)
}

/// Frame-weighted `(fidelity, mimic)` of `mapper` against `classifier` on
/// `set`. Their ratio is the alpha that makes both terms equal at the start
/// of mimic training.
pub fn loss_magnitudes(mapper: &Model, classifier: &Model, set: &FeatureSet) -> Result<(f64, f64)> {
    require_nonempty(set, "magnitude set")?;
    let (mut fid, mut mim) = (0.0, 0.0);
    for u in &set.utterances {
        let t = u.frames() as f64;
        let den = enhance(mapper, &u.noisy)?;
        fid += mse(&den, &u.clean) * t;
        mim += mse(
            &classify(classifier, &den)?,
            &classify(classifier, &u.clean)?,
        ) * t;
    }
    let n = set.frames() as f64;
    Ok((fid / n, mim / n))
}

fn mse(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64
}

fn check_labels(set: &FeatureSet, classes: usize) -> Result<()> {
    for u in &set.utterances {
        if let Some(&bad) = u.labels.iter().find(|&&l| l >= classes) {
            return Err(TrainError::Labels(format!(
                "{}: label {bad} outside 0..{classes}",
                u.id
            )));
        }
    }
    Ok(())
}

enum ClassifierBatch {
    Frames(Vec<(usize, usize)>),
    Utterance(usize),
}

struct ClassifierObjective<'a> {
    train: &'a FeatureSet,
    dev: &'a FeatureSet,
    kind: InputKind,
    batch_size: usize,
}

impl Objective for ClassifierObjective<'_> {
    type Batch = ClassifierBatch;

    fn batches(&self, seed: u64) -> Vec<ClassifierBatch> {
        let mut rng = seed::rng(seed, &[0xBA]);
        let lens: Vec<usize> = self.train.utterances.iter().map(|u| u.frames()).collect();
        match self.kind {
            InputKind::Utterance => {
                let mut order: Vec<usize> = (0..lens.len()).collect();
                rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
                order.into_iter().map(ClassifierBatch::Utterance).collect()
            }
            _ => frame_batches(&lens, self.batch_size, &mut rng)
                .into_iter()
                .map(ClassifierBatch::Frames)
                .collect(),
        }
    }

    fn loss(
        &self,
        tape: &mut Tape,
        model: &Model,
        bound: &Bound,
        batch: &ClassifierBatch,
        mode: Mode,
    ) -> Result<StepLoss> {
        let us = &self.train.utterances;
        let (x, labels) = match batch {
            ClassifierBatch::Utterance(i) => (us[*i].clean.clone(), us[*i].labels.clone()),
            ClassifierBatch::Frames(picks) => {
                let frames: Vec<&Tensor> = us.iter().map(|u| &u.clean).collect();
                let labels = picks.iter().map(|&(u, t)| us[u].labels[t]).collect();
                (spliced_rows(&frames, picks), labels)
            }
        };
        let xv = tape.constant(x);
        let f = model.forward(tape, bound, xv, mode)?;
        let ce = tape.softmax_cross_entropy(f.out, &labels)?;
        Ok(StepLoss {
            joint: ce,
            fidelity: None,
            mimic: None,
            stats: f.stats,
        })
    }

    fn evaluate(&self, model: &Model) -> Result<DevScores> {
        let mut ce = 0.0;
        let mut correct = 0;
        let mut frames = 0;
        for u in &self.dev.utterances {
            let logits = classify(model, &u.clean)?;
            let (c, k) = cross_entropy(&logits, &u.labels);
            ce += c;
            correct += k;
            frames += u.frames();
        }
        let ce = ce / frames as f64;
        Ok(DevScores {
            ce: Some(ce),
            accuracy: Some(correct as f64 / frames as f64),
            select: ce,
            ..Default::default()
        })
    }
}

/// Trains a classifier on clean features with cross-entropy. The DNN sees
/// frame-shuffled batches of spliced rows, the WRBN one whole utterance per
/// step. Trace rows carry the batch cross-entropy in the `joint` column.
pub fn pretrain_classifier(
    model: &mut Model,
    train: &FeatureSet,
    dev: &FeatureSet,
    cfg: &TrainConfig,
    opts: RunOptions<'_>,
) -> Result<Outcome> {
    require_role(model, Role::Classifier)?;
    require_nonempty(train, "train")?;
    require_nonempty(dev, "dev")?;
    let classes = model.arch().output_width();
    check_labels(train, classes)?;
    check_labels(dev, classes)?;
    let obj = ClassifierObjective {
        train,
        dev,
        kind: model.input(),
        batch_size: cfg.batch_size,
    };
    run(model, &obj, cfg, opts)
}

struct Mimic<'a> {
    classifier: &'a Model,
    alpha: f64,
    train_logits: Vec<Tensor>,
    dev_logits: Vec<Tensor>,
}

struct MapperObjective<'a> {
    train: &'a FeatureSet,
    dev: &'a FeatureSet,
    kind: InputKind,
    batch_size: usize,
    mimic: Option<Mimic<'a>>,
}

impl MapperObjective<'_> {
    /// Classifier pass over the denoised rows of a stacked utterance group.
    fn denoised_logits(
        &self,
        tape: &mut Tape,
        m: &Mimic<'_>,
        cbound: &Bound,
        out: Var,
        lens: &[usize],
    ) -> Result<Vec<Var>> {
        let n: usize = lens.iter().sum();
        match m.classifier.input() {
            InputKind::Utterance => {
                let mut offset = 0;
                let mut parts = Vec::with_capacity(lens.len());
                for &t in lens {
                    let idx: Rc<[usize]> = (offset * BINS..(offset + t) * BINS).collect();
                    let rows = tape.gather(out, idx, vec![t, BINS])?;
                    parts.push(m.classifier.forward(tape, cbound, rows, Mode::Eval)?.out);
                    offset += t;
                }
                Ok(parts)
            }
            _ => {
                let spliced = tape.gather(out, resplice_index(lens), vec![n, SPLICE_WIDTH])?;
                Ok(vec![
                    m.classifier.forward(tape, cbound, spliced, Mode::Eval)?.out,
                ])
            }
        }
    }
}

impl Objective for MapperObjective<'_> {
    type Batch = Vec<usize>;

    fn batches(&self, seed: u64) -> Vec<Vec<usize>> {
        let lens: Vec<usize> = self.train.utterances.iter().map(|u| u.frames()).collect();
        utterance_groups(&lens, self.batch_size, &mut seed::rng(seed, &[0xB0]))
    }

    fn loss(
        &self,
        tape: &mut Tape,
        model: &Model,
        bound: &Bound,
        group: &Vec<usize>,
        mode: Mode,
    ) -> Result<StepLoss> {
        let us: Vec<_> = group.iter().map(|&i| &self.train.utterances[i]).collect();
        let inputs = us
            .iter()
            .map(|u| model_input(self.kind, &u.noisy))
            .collect::<Result<Vec<_>>>()?;
        let x = tape.constant(concat_rows(&inputs));
        let y = tape.constant(concat_rows(us.iter().map(|u| &u.clean)));
        let f = model.forward(tape, bound, x, mode)?;
        let fid = fidelity_loss(tape, y, f.out)?;
        let Some(m) = &self.mimic else {
            return Ok(StepLoss {
                joint: fid,
                fidelity: Some(fid),
                mimic: None,
                stats: f.stats,
            });
        };
        let lens: Vec<usize> = us.iter().map(|u| u.frames()).collect();
        let n: usize = lens.iter().sum();
        let cbound = m.classifier.params().bind(tape, true);
        let denoised = self.denoised_logits(tape, m, &cbound, f.out, &lens)?;
        let mim = if denoised.len() == 1 {
            let target = tape.constant(concat_rows(group.iter().map(|&i| &m.train_logits[i])));
            mimic_loss(tape, target, denoised[0])?
        } else {
            let mut total: Option<Var> = None;
            for ((&i, &t), d) in group.iter().zip(&lens).zip(denoised) {
                let target = tape.constant(m.train_logits[i].clone());
                let part = mimic_loss(tape, target, d)?;
                let part = tape.scale(part, t as f64 / n as f64)?;
                total = Some(match total {
                    None => part,
                    Some(acc) => tape.add(acc, part)?,
                });
            }
            total.expect("groups are non-empty")
        };
        let joint = joint_loss(tape, fid, mim, m.alpha)?;
        Ok(StepLoss {
            joint,
            fidelity: Some(fid),
            mimic: Some(mim),
            stats: f.stats,
        })
    }

    fn evaluate(&self, model: &Model) -> Result<DevScores> {
        let mut fid = 0.0;
        let mut mim = 0.0;
        let mut ce = 0.0;
        let mut correct = 0;
        let mut frames = 0;
        for (k, u) in self.dev.utterances.iter().enumerate() {
            let t = u.frames();
            let den = enhance(model, &u.noisy)?;
            fid += mse(&den, &u.clean) * t as f64;
            if let Some(m) = &self.mimic {
                let logits = classify(m.classifier, &den)?;
                mim += mse(&logits, &m.dev_logits[k]) * t as f64;
                let (c, n) = cross_entropy(&logits, &u.labels);
                ce += c;
                correct += n;
            }
            frames += t;
        }
        let n = frames as f64;
        let fidelity = fid / n;
        Ok(match &self.mimic {
            None => DevScores {
                fidelity: Some(fidelity),
                select: fidelity,
                ..Default::default()
            },
            Some(m) => DevScores {
                fidelity: Some(fidelity),
                mimic: Some(mim / n),
                ce: Some(ce / n),
                accuracy: Some(correct as f64 / n),
                select: fidelity + m.alpha * mim / n,
            },
        })
    }
}

/// Trains a mapper on the fidelity loss alone. Batches are shuffled groups
/// of whole utterances holding at least `batch_size` frames.
pub fn pretrain_mapper(
    model: &mut Model,
    train: &FeatureSet,
    dev: &FeatureSet,
    cfg: &TrainConfig,
    opts: RunOptions<'_>,
) -> Result<Outcome> {
    require_role(model, Role::Mapper)?;
    require_nonempty(train, "train")?;
    require_nonempty(dev, "dev")?;
    let obj = MapperObjective {
        train,
        dev,
        kind: model.input(),
        batch_size: cfg.batch_size,
        mimic: None,
    };
    run(model, &obj, cfg, opts)
}

/// Continues mapper training on `fidelity + alpha * mimic` against a frozen
/// classifier. With `alpha = 0` the parameter trajectory is identical to
/// [`pretrain_mapper`] from the same starting point.
pub fn train_mimic(
    mapper: &mut Model,
    classifier: &Model,
    train: &FeatureSet,
    dev: &FeatureSet,
    cfg: &TrainConfig,
    opts: RunOptions<'_>,
) -> Result<Outcome> {
    require_role(mapper, Role::Mapper)?;
    require_role(classifier, Role::Classifier)?;
    require_nonempty(train, "train")?;
    require_nonempty(dev, "dev")?;
    let classes = classifier.arch().output_width();
    check_labels(dev, classes)?;
    let logits = |set: &FeatureSet| -> Result<Vec<Tensor>> {
        set.utterances
            .iter()
            .map(|u| classify(classifier, &u.clean))
            .collect()
    };
    let obj = MapperObjective {
        train,
        dev,
        kind: mapper.input(),
        batch_size: cfg.batch_size,
        mimic: Some(Mimic {
            classifier,
            alpha: cfg.alpha,
            train_logits: logits(train)?,
            dev_logits: logits(dev)?,
        }),
    };
    run(mapper, &obj, cfg, opts)
}
