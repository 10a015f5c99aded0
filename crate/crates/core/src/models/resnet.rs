use super::layers::{AffineIdx, Builder, ConvIdx, Ctx, Init};
use super::params::ParamStore;
use super::{ResnetMapperConfig, Result};
use crate::dsp::{BINS, SPAN};
use crate::tensor::{conv_output_len, Activation, Padding, Var};

#[derive(Clone, Copy, Debug)]
pub(crate) struct BlockIdx {
    pub down: ConvIdx,
    pub res: [ConvIdx; 2],
}

#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub blocks: Vec<BlockIdx>,
    fc: [AffineIdx; 2],
    out: AffineIdx,
    flat: usize,
}

/// Spatial size after the four stride-2 blocks: 11 x 257 -> 1 x 17.
pub fn final_spatial() -> (usize, usize) {
    let mut hw = (SPAN, BINS);
    for _ in 0..4 {
        hw = (
            conv_output_len(hw.0, 3, 2, Padding::Same).expect("positive"),
            conv_output_len(hw.1, 3, 2, Padding::Same).expect("positive"),
        );
    }
    hw
}

pub(crate) fn build(c: &ResnetMapperConfig, prefix: &str, seed: u64) -> (ParamStore, Layout) {
    let mut b = Builder::new(prefix, seed);
    let mut ch = 1;
    let mut blocks = Vec::new();
    for (i, &f) in c.filters.iter().enumerate() {
        let n = i + 1;
        let down = b.conv(&format!("block{n}/down"), ch, f, 3, true);
        let r1 = b.conv(&format!("block{n}/res1"), f, f, 3, true);
        let r2 = b.conv(&format!("block{n}/res2"), f, f, 3, true);
        blocks.push(BlockIdx {
            down,
            res: [r1, r2],
        });
        ch = f;
    }
    let (h, w) = final_spatial();
    let flat = ch * h * w;
    let fc1 = b.affine("fc1", flat, c.fc, Init::Kaiming);
    let fc2 = b.affine("fc2", c.fc, c.fc, Init::Kaiming);
    let out = b.affine("out", c.fc, BINS, Init::SmallXavier);
    (
        b.store,
        Layout {
            blocks,
            fc: [fc1, fc2],
            out,
            flat,
        },
    )
}

/// `d = drop(relu(conv_s2(x)))`, `r = drop(relu(conv(drop(relu(conv(d))))))`, `d + r`.
pub(crate) fn block(ctx: &mut Ctx, p: &BlockIdx, rate: f64, x: Var) -> Result<Var> {
    let mut d = ctx.conv(x, p.down, 2)?;
    d = ctx.act(d, Activation::Relu)?;
    d = ctx.dropout(d, rate, true)?;
    let mut r = d;
    for conv in p.res {
        r = ctx.conv(r, conv, 1)?;
        r = ctx.act(r, Activation::Relu)?;
        r = ctx.dropout(r, rate, true)?;
    }
    Ok(ctx.tape.add(d, r)?)
}

pub(crate) fn forward(ctx: &mut Ctx, l: &Layout, c: &ResnetMapperConfig, x: Var) -> Result<Var> {
    let rows = ctx.tape.dims(x)[0];
    let mut h = ctx.tape.reshape(x, [rows, 1, SPAN, BINS])?;
    for p in &l.blocks {
        h = block(ctx, p, c.dropout, h)?;
    }
    h = ctx.tape.reshape(h, [rows, l.flat])?;
    for fc in l.fc {
        h = ctx.affine(h, fc)?;
        h = ctx.act(h, Activation::Relu)?;
    }
    Ok(ctx.affine(h, l.out)?)
}

/// One mapper residual block with its own parameters, for standalone use.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    params: ParamStore,
    idx: BlockIdx,
    rate: f64,
}

impl ResidualBlock {
    pub fn new(in_ch: usize, filters: usize, rate: f64, seed: u64) -> Self {
        let mut b = Builder::new("block", seed);
        let down = b.conv("down", in_ch, filters, 3, true);
        let r1 = b.conv("res1", filters, filters, 3, true);
        let r2 = b.conv("res2", filters, filters, 3, true);
        Self {
            params: b.store,
            idx: BlockIdx {
                down,
                res: [r1, r2],
            },
            rate,
        }
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn forward(
        &self,
        tape: &mut crate::tensor::Tape,
        bound: &super::Bound,
        x: Var,
        mode: super::Mode,
    ) -> Result<Var> {
        let mut ctx = Ctx::new(tape, bound, &self.params, mode);
        block(&mut ctx, &self.idx, self.rate, x)
    }
}
