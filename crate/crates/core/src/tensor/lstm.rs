//! Bidirectional LSTM kernels with full backpropagation through time.
//!
//! Gate layout inside the `4H` axis is input, forget, candidate, output.
//! Input weights are `I x 4H`, recurrent weights `H x 4H`, bias `4H`.

use super::gemm::gemm;
use super::tape::Var;

/// How the two directions of a bidirectional layer are merged per step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Combine {
    /// `h_fwd[t] + h_bwd[t]`, width `H`.
    Sum,
    /// `[h_fwd[t], h_bwd[t]]`, width `2H`.
    Concat,
}

/// Tape variables holding one direction's parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LstmDirection {
    pub input: Var,
    pub recurrent: Var,
    pub bias: Var,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Everything one direction keeps for the backward pass, indexed by real time.
#[derive(Clone, Debug)]
pub(crate) struct DirTrace {
    pub gates: Vec<f64>,
    pub cells: Vec<f64>,
    pub tanh_cells: Vec<f64>,
    pub hidden: Vec<f64>,
    pub reverse: bool,
}

pub(crate) struct DirParams<'a> {
    pub wx: &'a [f64],
    pub wh: &'a [f64],
    pub b: &'a [f64],
}

fn order(t: usize, reverse: bool) -> Box<dyn Iterator<Item = usize>> {
    if reverse {
        Box::new((0..t).rev())
    } else {
        Box::new(0..t)
    }
}

pub(crate) fn dir_forward(
    x: &[f64],
    steps: usize,
    inp: usize,
    hid: usize,
    p: &DirParams,
    reverse: bool,
) -> DirTrace {
    let g4 = 4 * hid;
    let mut pre = vec![0.0; steps * g4];
    gemm(steps, inp, g4, 1.0, x, false, p.wx, false, 0.0, &mut pre);
    for row in pre.chunks_mut(g4) {
        row.iter_mut().zip(p.b).for_each(|(v, b)| *v += b);
    }
    let mut gates = vec![0.0; steps * g4];
    let mut cells = vec![0.0; steps * hid];
    let mut tanh_cells = vec![0.0; steps * hid];
    let mut hidden = vec![0.0; steps * hid];
    let mut prev: Option<usize> = None;
    let mut acc = vec![0.0; g4];
    for t in order(steps, reverse) {
        acc.copy_from_slice(&pre[t * g4..(t + 1) * g4]);
        if let Some(pt) = prev {
            gemm(
                1,
                hid,
                g4,
                1.0,
                &hidden[pt * hid..(pt + 1) * hid],
                false,
                p.wh,
                false,
                1.0,
                &mut acc,
            );
        }
        let g = &mut gates[t * g4..(t + 1) * g4];
        for j in 0..hid {
            let ig = sigmoid(acc[j]);
            let fg = sigmoid(acc[hid + j]);
            let cg = acc[2 * hid + j].tanh();
            let og = sigmoid(acc[3 * hid + j]);
            g[j] = ig;
            g[hid + j] = fg;
            g[2 * hid + j] = cg;
            g[3 * hid + j] = og;
            let c_prev = prev.map_or(0.0, |pt| cells[pt * hid + j]);
            let c = fg * c_prev + ig * cg;
            let tc = c.tanh();
            cells[t * hid + j] = c;
            tanh_cells[t * hid + j] = tc;
            hidden[t * hid + j] = og * tc;
        }
        prev = Some(t);
    }
    DirTrace {
        gates,
        cells,
        tanh_cells,
        hidden,
        reverse,
    }
}

pub(crate) struct DirGrads {
    pub dx: Vec<f64>,
    pub dwx: Vec<f64>,
    pub dwh: Vec<f64>,
    pub db: Vec<f64>,
}

/// Backpropagation through time for one direction given `dh[t]` from above.
pub(crate) fn dir_backward(
    x: &[f64],
    steps: usize,
    inp: usize,
    hid: usize,
    p: &DirParams,
    tr: &DirTrace,
    dh_out: &[f64],
) -> DirGrads {
    let g4 = 4 * hid;
    let mut dpre = vec![0.0; steps * g4];
    let mut dh_next = vec![0.0; hid];
    let mut dc_next = vec![0.0; hid];
    // Steps in reverse processing order; `prev` is the step processed before `t`.
    let fwd: Vec<usize> = order(steps, tr.reverse).collect();
    for (pos, &t) in fwd.iter().enumerate().rev() {
        let prev = pos.checked_sub(1).map(|q| fwd[q]);
        let g = &tr.gates[t * g4..(t + 1) * g4];
        let da = &mut dpre[t * g4..(t + 1) * g4];
        for j in 0..hid {
            let (ig, fg, cg, og) = (g[j], g[hid + j], g[2 * hid + j], g[3 * hid + j]);
            let tc = tr.tanh_cells[t * hid + j];
            let dh = dh_out[t * hid + j] + dh_next[j];
            let d_o = dh * tc;
            let dc = dh * og * (1.0 - tc * tc) + dc_next[j];
            let c_prev = prev.map_or(0.0, |pt| tr.cells[pt * hid + j]);
            let di = dc * cg;
            let dg = dc * ig;
            let df = dc * c_prev;
            dc_next[j] = dc * fg;
            da[j] = di * ig * (1.0 - ig);
            da[hid + j] = df * fg * (1.0 - fg);
            da[2 * hid + j] = dg * (1.0 - cg * cg);
            da[3 * hid + j] = d_o * og * (1.0 - og);
        }
        if prev.is_some() {
            gemm(1, g4, hid, 1.0, da, false, p.wh, true, 0.0, &mut dh_next);
        } else {
            dh_next.fill(0.0);
        }
    }

    let mut dwx = vec![0.0; inp * g4];
    gemm(inp, steps, g4, 1.0, x, true, &dpre, false, 0.0, &mut dwx);
    let mut dx = vec![0.0; steps * inp];
    gemm(steps, g4, inp, 1.0, &dpre, false, p.wx, true, 0.0, &mut dx);
    let mut db = vec![0.0; g4];
    for row in dpre.chunks(g4) {
        db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
    }
    // dWh = sum_t h_prev(t)^T dpre[t]
    let mut dwh = vec![0.0; hid * g4];
    for pos in 1..fwd.len() {
        let (t, pt) = (fwd[pos], fwd[pos - 1]);
        gemm(
            hid,
            1,
            g4,
            1.0,
            &tr.hidden[pt * hid..(pt + 1) * hid],
            false,
            &dpre[t * g4..(t + 1) * g4],
            false,
            1.0,
            &mut dwh,
        );
    }
    DirGrads { dx, dwx, dwh, db }
}
