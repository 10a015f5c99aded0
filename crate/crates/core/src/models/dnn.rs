use super::layers::{AffineIdx, BnIdx, Builder, Ctx, Init};
use super::params::ParamStore;
use super::{DnnClassifierConfig, DnnMapperConfig, Result};
use crate::dsp::{BINS, DELTA_SPLICE_WIDTH, SPLICE_WIDTH};
use crate::tensor::{Activation, BnMode, Var};

#[derive(Clone, Debug)]
pub(crate) struct MapperLayout {
    hidden: Vec<(AffineIdx, BnIdx)>,
    out: AffineIdx,
}

pub(crate) fn build_mapper(
    c: &DnnMapperConfig,
    prefix: &str,
    seed: u64,
) -> (ParamStore, MapperLayout) {
    let mut b = Builder::new(prefix, seed);
    let mut width = DELTA_SPLICE_WIDTH;
    let mut hidden = Vec::new();
    for l in 1..=c.layers {
        let a = b.affine(&format!("fc{l}"), width, c.hidden, Init::Kaiming);
        let n = b.bn(&format!("bn{l}"), c.hidden);
        hidden.push((a, n));
        width = c.hidden;
    }
    let out = b.affine("out", width, BINS, Init::SmallXavier);
    (b.store, MapperLayout { hidden, out })
}

/// (affine, BN on moving statistics, relu, dropout) x layers, then linear.
pub(crate) fn mapper_forward(
    ctx: &mut Ctx,
    l: &MapperLayout,
    c: &DnnMapperConfig,
    x: Var,
) -> Result<Var> {
    let mut h = x;
    for &(a, n) in &l.hidden {
        h = ctx.affine(h, a)?;
        h = ctx.bn(h, n, BnMode::MovingStats)?;
        h = ctx.act(h, Activation::Relu)?;
        h = ctx.dropout(h, c.dropout, false)?;
    }
    Ok(ctx.affine(h, l.out)?)
}

#[derive(Clone, Debug)]
pub(crate) struct ClassifierLayout {
    hidden: Vec<(AffineIdx, BnIdx)>,
    out: AffineIdx,
}

pub(crate) fn build_classifier(
    c: &DnnClassifierConfig,
    prefix: &str,
    seed: u64,
) -> (ParamStore, ClassifierLayout) {
    let mut b = Builder::new(prefix, seed);
    let mut width = SPLICE_WIDTH;
    let mut hidden = Vec::new();
    for l in 1..=c.layers {
        let a = b.affine_no_bias(&format!("fc{l}"), width, c.hidden, Init::Kaiming);
        let n = b.bn(&format!("bn{l}"), c.hidden);
        hidden.push((a, n));
        width = c.hidden;
    }
    let out = b.affine("out", width, c.classes, Init::SmallXavier);
    (b.store, ClassifierLayout { hidden, out })
}

/// (affine, BN, leaky relu) x layers, then linear logits. BN uses batch
/// statistics in train mode and moving statistics in eval mode.
pub(crate) fn classifier_forward(
    ctx: &mut Ctx,
    l: &ClassifierLayout,
    c: &DnnClassifierConfig,
    x: Var,
) -> Result<Var> {
    let mode = if ctx.train {
        BnMode::BatchStats
    } else {
        BnMode::MovingStats
    };
    let mut h = x;
    for &(a, n) in &l.hidden {
        h = ctx.affine(h, a)?;
        h = ctx.bn(h, n, mode)?;
        h = ctx.act(h, Activation::LeakyRelu(c.leak))?;
    }
    Ok(ctx.affine(h, l.out)?)
}
