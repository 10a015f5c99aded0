//! Wide residual network front end followed by two bidirectional LSTM layers.
//!
//! Per utterance: `T x 257` is viewed as a `1 x 1 x T x 257` image, passed
//! through a conv stem and three blocks of three pre-activation units
//! (BN, ELU, dropout, conv, twice). Blocks two and three halve both axes
//! and open with a 1x1 stride-2 bypass. Each reduced frame is flattened
//! (all channels and frequencies) or mean-pooled over frequency, projected
//! by a linear layer, and rows are repeated (nearest neighbour) back to `T`
//! before the LSTMs.

use std::rc::Rc;

use super::layers::{AffineIdx, BnIdx, Builder, ConvIdx, Ctx, Init, LstmIdx};
use super::params::ParamStore;
use super::{FreqPool, ModelError, Result, WrbnConfig};
use crate::dsp::BINS;
use crate::tensor::{conv_output_len, Activation, BnMode, Combine, Padding, Var};

const UNITS_PER_BLOCK: usize = 3;

#[derive(Clone, Copy, Debug)]
struct Unit {
    bn1: BnIdx,
    conv1: ConvIdx,
    bn2: BnIdx,
    conv2: ConvIdx,
    bypass: Option<ConvIdx>,
    stride: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct Layout {
    stem: ConvIdx,
    units: Vec<Unit>,
    final_bn: BnIdx,
    proj: AffineIdx,
    lstm1: LstmIdx,
    lstm2: LstmIdx,
    lin: AffineIdx,
    out: AffineIdx,
}

/// Frequency bins left after the strided blocks (65 for three blocks).
pub fn reduced_bins(blocks: usize) -> usize {
    (1..blocks).fold(BINS, |f, _| {
        conv_output_len(f, 3, 2, Padding::Same).expect("positive")
    })
}

pub(crate) fn build(c: &WrbnConfig, prefix: &str, seed: u64) -> (ParamStore, Layout) {
    let mut b = Builder::new(prefix, seed);
    let stem = b.conv("stem", 1, c.widths[0], 3, false);
    let mut ch = c.widths[0];
    let mut units = Vec::new();
    for (bi, &w) in c.widths.iter().enumerate() {
        for ui in 0..UNITS_PER_BLOCK {
            let name = format!("block{}/unit{}", bi + 1, ui + 1);
            let stride = if bi > 0 && ui == 0 { 2 } else { 1 };
            let bypass = (stride != 1 || ch != w)
                .then(|| b.conv(&format!("{name}/bypass"), ch, w, 1, false));
            units.push(Unit {
                bn1: b.bn(&format!("{name}/bn1"), ch),
                conv1: b.conv(&format!("{name}/conv1"), ch, w, 3, false),
                bn2: b.bn(&format!("{name}/bn2"), w),
                conv2: b.conv(&format!("{name}/conv2"), w, w, 3, false),
                bypass,
                stride,
            });
            ch = w;
        }
    }
    let final_bn = b.bn("final_bn", ch);
    let proj_in = match c.freq_pool {
        FreqPool::Flatten => ch * reduced_bins(c.widths.len()),
        FreqPool::Mean => ch,
    };
    let proj = b.affine("proj", proj_in, c.linear, Init::Xavier);
    let lstm1 = b.lstm("lstm1", c.linear, c.lstm);
    let lstm2 = b.lstm("lstm2", c.lstm, c.lstm);
    let lin = b.affine("lin", 2 * c.lstm, c.linear, Init::Xavier);
    let out = b.affine("out", c.linear, c.classes, Init::SmallXavier);
    (
        b.store,
        Layout {
            stem,
            units,
            final_bn,
            proj,
            lstm1,
            lstm2,
            lin,
            out,
        },
    )
}

fn unit(ctx: &mut Ctx, u: &Unit, rate: f64, bn_mode: BnMode, x: Var) -> Result<Var> {
    let mut h = x;
    for (bn, conv, stride) in [(u.bn1, u.conv1, u.stride), (u.bn2, u.conv2, 1)] {
        h = ctx.bn(h, bn, bn_mode)?;
        h = ctx.act(h, Activation::Elu)?;
        h = ctx.dropout(h, rate, false)?;
        h = ctx.conv(h, conv, stride)?;
    }
    let shortcut = match u.bypass {
        Some(p) => ctx.conv(x, p, u.stride)?,
        None => x,
    };
    Ok(ctx.tape.add(h, shortcut)?)
}

pub(crate) fn forward(ctx: &mut Ctx, l: &Layout, c: &WrbnConfig, x: Var) -> Result<Var> {
    let dims = ctx.tape.dims(x).to_vec();
    let (t, f) = (dims[0], dims[1]);
    if t == 0 {
        return Err(ModelError::Empty("wrbn"));
    }
    let bn_mode = if ctx.train {
        BnMode::BatchStats
    } else {
        BnMode::MovingStats
    };
    let mut h = ctx.tape.reshape(x, [1, 1, t, f])?;
    h = ctx.conv(h, l.stem, 1)?;
    for u in &l.units {
        h = unit(ctx, u, c.dropout, bn_mode, h)?;
    }
    h = ctx.bn(h, l.final_bn, bn_mode)?;
    h = ctx.act(h, Activation::Elu)?;

    let hd = ctx.tape.dims(h).to_vec();
    let (ch, tr, fr) = (hd[1], hd[2], hd[3]);
    let (src, fr) = match c.freq_pool {
        FreqPool::Flatten => (h, fr),
        FreqPool::Mean => (ctx.tape.mean_last_axis(h)?, 1),
    };
    let width = ch * fr;
    // [1, C, T', F'] -> [T', C * F'], channel-major within a row.
    let rows: Rc<[usize]> = (0..tr * width)
        .map(|i| {
            let (t, j) = (i / width, i % width);
            (j / fr) * tr * fr + t * fr + j % fr
        })
        .collect();
    h = ctx.tape.gather(src, rows, [tr, width])?;
    h = ctx.affine(h, l.proj)?;

    let factor = 1usize << (c.widths.len() - 1);
    let upsample: Rc<[usize]> = (0..t * c.linear)
        .map(|i| ((i / c.linear) / factor).min(tr - 1) * c.linear + i % c.linear)
        .collect();
    h = ctx.tape.gather(h, upsample, [t, c.linear])?;

    h = ctx.bilstm(h, l.lstm1, Combine::Sum)?;
    h = ctx.bilstm(h, l.lstm2, Combine::Concat)?;
    h = ctx.affine(h, l.lin)?;
    Ok(ctx.affine(h, l.out)?)
}
