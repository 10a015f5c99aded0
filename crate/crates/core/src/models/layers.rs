//! Parameter layouts for the building blocks and the per-pass context that applies them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{Bound, ParamKind, ParamStore};
use super::{Forward, Mode, StatUpdate};
use crate::tensor::init::{kaiming, xavier};
use crate::tensor::{
    Activation, BnMode, Combine, LstmDirection, Padding, Result, RunningStats, Tape, Tensor, Var,
};

#[derive(Clone, Copy, Debug)]
pub(crate) struct AffineIdx {
    pub w: usize,
    /// Absent when a batch-statistics BN follows and would cancel it.
    pub b: Option<usize>,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvIdx {
    pub k: usize,
    pub b: Option<usize>,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct BnIdx {
    pub gamma: usize,
    pub beta: usize,
    pub mean: usize,
    pub var: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct LstmIdx {
    pub fwd: [usize; 3],
    pub bwd: [usize; 3],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Init {
    Kaiming,
    Xavier,
    /// Xavier scaled by 0.1 so untrained logits start near uniform.
    SmallXavier,
}

/// Allocates named, initialized parameters under a common prefix.
pub(crate) struct Builder<'a> {
    pub store: ParamStore,
    prefix: &'a str,
    rng: ChaCha8Rng,
}

impl<'a> Builder<'a> {
    pub fn new(prefix: &'a str, seed: u64) -> Self {
        Self {
            store: ParamStore::new(),
            prefix,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn name(&self, local: &str) -> String {
        format!("{}/{}", self.prefix, local)
    }

    fn weight(&mut self, dims: Vec<usize>, fan_in: usize, fan_out: usize, init: Init) -> Tensor {
        match init {
            Init::Kaiming => kaiming(dims, fan_in, &mut self.rng),
            Init::Xavier => xavier(dims, fan_in, fan_out, &mut self.rng),
            Init::SmallXavier => xavier(dims, fan_in, fan_out, &mut self.rng).map(|v| 0.1 * v),
        }
    }

    pub fn affine(&mut self, name: &str, inp: usize, out: usize, init: Init) -> AffineIdx {
        let mut a = self.affine_no_bias(name, inp, out, init);
        a.b = Some(self.store.push(
            self.name(&format!("{name}/b")),
            Tensor::zeros([out]),
            ParamKind::Trainable,
        ));
        a
    }

    pub fn affine_no_bias(&mut self, name: &str, inp: usize, out: usize, init: Init) -> AffineIdx {
        let w = self.weight(vec![inp, out], inp, out, init);
        AffineIdx {
            w: self
                .store
                .push(self.name(&format!("{name}/w")), w, ParamKind::Trainable),
            b: None,
        }
    }

    pub fn conv(&mut self, name: &str, inp: usize, out: usize, size: usize, bias: bool) -> ConvIdx {
        let fan_in = inp * size * size;
        let k = self.weight(
            vec![out, inp, size, size],
            fan_in,
            out * size * size,
            Init::Kaiming,
        );
        let k = self
            .store
            .push(self.name(&format!("{name}/k")), k, ParamKind::Trainable);
        let b = bias.then(|| {
            self.store.push(
                self.name(&format!("{name}/b")),
                Tensor::zeros([out]),
                ParamKind::Trainable,
            )
        });
        ConvIdx { k, b }
    }

    pub fn bn(&mut self, name: &str, features: usize) -> BnIdx {
        let stats = RunningStats::new(features);
        BnIdx {
            gamma: self.store.push(
                self.name(&format!("{name}/gamma")),
                Tensor::full([features], 1.0),
                ParamKind::Trainable,
            ),
            beta: self.store.push(
                self.name(&format!("{name}/beta")),
                Tensor::zeros([features]),
                ParamKind::Trainable,
            ),
            mean: self.store.push(
                self.name(&format!("{name}/moving_mean")),
                Tensor::new([features], stats.mean).expect("positive width"),
                ParamKind::Statistic,
            ),
            var: self.store.push(
                self.name(&format!("{name}/moving_var")),
                Tensor::new([features], stats.var).expect("positive width"),
                ParamKind::Statistic,
            ),
        }
    }

    pub fn lstm(&mut self, name: &str, inp: usize, hid: usize) -> LstmIdx {
        let mut dir = |d: &str| {
            let wx = self.weight(vec![inp, 4 * hid], inp, hid, Init::Xavier);
            let wh = self.weight(vec![hid, 4 * hid], hid, hid, Init::Xavier);
            [
                self.store.push(
                    self.name(&format!("{name}/{d}/wx")),
                    wx,
                    ParamKind::Trainable,
                ),
                self.store.push(
                    self.name(&format!("{name}/{d}/wh")),
                    wh,
                    ParamKind::Trainable,
                ),
                self.store.push(
                    self.name(&format!("{name}/{d}/b")),
                    Tensor::zeros([4 * hid]),
                    ParamKind::Trainable,
                ),
            ]
        };
        let fwd = dir("fwd");
        let bwd = dir("bwd");
        LstmIdx { fwd, bwd }
    }
}

/// State of one forward pass: the tape, bound parameters, dropout stream
/// and pending moving-statistic updates.
pub(crate) struct Ctx<'a> {
    pub tape: &'a mut Tape,
    pub bound: &'a Bound,
    pub store: &'a ParamStore,
    pub train: bool,
    rng: ChaCha8Rng,
    stats: Vec<StatUpdate>,
}

impl<'a> Ctx<'a> {
    pub fn new(tape: &'a mut Tape, bound: &'a Bound, store: &'a ParamStore, mode: Mode) -> Self {
        let (train, seed) = match mode {
            Mode::Train { seed } => (true, seed),
            Mode::Eval => (false, 0),
        };
        Self {
            tape,
            bound,
            store,
            train,
            rng: ChaCha8Rng::seed_from_u64(seed),
            stats: Vec::new(),
        }
    }

    pub fn finish(self, out: Var) -> Forward {
        Forward {
            out,
            stats: self.stats,
        }
    }

    pub fn affine(&mut self, x: Var, p: AffineIdx) -> Result<Var> {
        let b = match p.b {
            Some(b) => self.bound.var(b),
            None => {
                let out = self.store.value(p.w).dims()[1];
                self.tape.constant(Tensor::zeros([out]))
            }
        };
        self.tape.affine(x, self.bound.var(p.w), b)
    }

    pub fn conv(&mut self, x: Var, p: ConvIdx, stride: usize) -> Result<Var> {
        let b = p.b.map(|b| self.bound.var(b));
        self.tape
            .conv2d(x, self.bound.var(p.k), b, (stride, stride), Padding::Same)
    }

    pub fn act(&mut self, x: Var, kind: Activation) -> Result<Var> {
        self.tape.activation(x, kind)
    }

    pub fn dropout(&mut self, x: Var, rate: f64, channel_wise: bool) -> Result<Var> {
        self.tape
            .dropout(x, rate, self.train, channel_wise, &mut self.rng)
    }

    /// Batch norm; moving statistics are updated (as a pending
    /// [`StatUpdate`]) whenever the pass is in train mode.
    pub fn bn(&mut self, x: Var, p: BnIdx, mode: BnMode) -> Result<Var> {
        let mut stats = RunningStats::new(self.store.value(p.mean).len());
        stats.mean.copy_from_slice(self.store.value(p.mean).data());
        stats.var.copy_from_slice(self.store.value(p.var).data());
        let y = self.tape.batch_norm(
            x,
            self.bound.var(p.gamma),
            self.bound.var(p.beta),
            &mut stats,
            mode,
            self.train,
        )?;
        if self.train {
            self.stats.push(StatUpdate {
                mean: p.mean,
                var: p.var,
                new_mean: stats.mean,
                new_var: stats.var,
            });
        }
        Ok(y)
    }

    pub fn bilstm(&mut self, x: Var, p: LstmIdx, combine: Combine) -> Result<Var> {
        let dir = |ix: [usize; 3]| LstmDirection {
            input: self.bound.var(ix[0]),
            recurrent: self.bound.var(ix[1]),
            bias: self.bound.var(ix[2]),
        };
        let (f, b) = (dir(p.fwd), dir(p.bwd));
        self.tape.bilstm(x, f, b, combine)
    }
}
