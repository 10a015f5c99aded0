//! 2-D convolution kernels (im2col + GEMM), batch-parallel.
//!
//! Work is split only along the batch axis and per-sample weight-gradient
//! partials are reduced in sample order, so results do not depend on the
//! number of rayon workers.

use rayon::prelude::*;

use super::gemm::gemm;
use super::{dims_str, Result, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding so the output has `ceil(n / stride)` positions; odd
    /// padding puts the extra row/column on the high-index side.
    Same,
    Valid,
}

/// Output length along one axis, or `None` when the kernel does not fit.
pub fn conv_output_len(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: Padding,
) -> Option<usize> {
    if stride == 0 || input == 0 || kernel == 0 {
        return None;
    }
    match padding {
        Padding::Same => Some(input.div_ceil(stride)),
        Padding::Valid => (kernel <= input).then(|| (input - kernel) / stride + 1),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_ch: usize,
    pub h: usize,
    pub w: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub oh: usize,
    pub ow: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeometry {
    pub fn new(x: &[usize], k: &[usize], stride: (usize, usize), padding: Padding) -> Result<Self> {
        if x.len() != 4 || k.len() != 4 || x[1] != k[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                expected: "x: BxCxHxW, k: FxCxKhxKw with matching C".into(),
                got: format!("x {}, k {}", dims_str(x), dims_str(k)),
            });
        }
        let (sh, sw) = stride;
        if sh == 0 || sw == 0 {
            return Err(TensorError::ZeroStride);
        }
        let (h, w, kh, kw) = (x[2], x[3], k[2], k[3]);
        let too_large = TensorError::KernelTooLarge {
            kernel: (kh, kw),
            input: (h, w),
        };
        let oh = conv_output_len(h, kh, sh, padding).ok_or(too_large.clone())?;
        let ow = conv_output_len(w, kw, sw, padding).ok_or(too_large)?;
        let (pad_top, pad_left) = match padding {
            Padding::Valid => (0, 0),
            Padding::Same => {
                let ph = ((oh - 1) * sh + kh).saturating_sub(h);
                let pw = ((ow - 1) * sw + kw).saturating_sub(w);
                (ph / 2, pw / 2)
            }
        };
        Ok(Self {
            batch: x[0],
            in_ch: x[1],
            h,
            w,
            out_ch: k[0],
            kh,
            kw,
            sh,
            sw,
            oh,
            ow,
            pad_top,
            pad_left,
        })
    }

    pub fn out_dims(&self) -> [usize; 4] {
        [self.batch, self.out_ch, self.oh, self.ow]
    }

    fn patch(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    fn in_sample(&self) -> usize {
        self.in_ch * self.h * self.w
    }

    fn out_sample(&self) -> usize {
        self.out_ch * self.positions()
    }

    /// Input row/col index for output position `o` and kernel tap `t`, if inside the image.
    #[inline]
    fn src(o: usize, t: usize, stride: usize, pad: usize, n: usize) -> Option<usize> {
        let p = o * stride + t;
        (p >= pad && p - pad < n).then(|| p - pad)
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let hw = self.positions();
        let mut row = 0;
        for c in 0..self.in_ch {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let dst = &mut cols[row * hw..(row + 1) * hw];
                    for oy in 0..self.oh {
                        let out = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        match Self::src(oy, i, self.sh, self.pad_top, self.h) {
                            None => out.fill(0.0),
                            Some(iy) => {
                                let src_row = &plane[iy * self.w..(iy + 1) * self.w];
                                for (ox, v) in out.iter_mut().enumerate() {
                                    *v = match Self::src(ox, j, self.sw, self.pad_left, self.w) {
                                        Some(ix) => src_row[ix],
                                        None => 0.0,
                                    };
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let hw = self.positions();
        let mut row = 0;
        for c in 0..self.in_ch {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let src = &cols[row * hw..(row + 1) * hw];
                    for oy in 0..self.oh {
                        if let Some(iy) = Self::src(oy, i, self.sh, self.pad_top, self.h) {
                            let dst_row = &mut plane[iy * self.w..(iy + 1) * self.w];
                            for ox in 0..self.ow {
                                if let Some(ix) = Self::src(ox, j, self.sw, self.pad_left, self.w) {
                                    dst_row[ix] += src[oy * self.ow + ox];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

pub(crate) fn conv_forward(
    g: &ConvGeometry,
    x: &[f64],
    k: &[f64],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let mut out = vec![0.0; g.batch * g.out_sample()];
    let (patch, hw) = (g.patch(), g.positions());
    out.par_chunks_mut(g.out_sample())
        .zip(x.par_chunks(g.in_sample()))
        .for_each(|(y, xb)| {
            let mut cols = vec![0.0; patch * hw];
            g.im2col(xb, &mut cols);
            gemm(g.out_ch, patch, hw, 1.0, k, false, &cols, false, 0.0, y);
            if let Some(b) = bias {
                for (f, plane) in y.chunks_mut(hw).enumerate() {
                    plane.iter_mut().for_each(|v| *v += b[f]);
                }
            }
        });
    out
}

pub(crate) struct ConvGrads {
    pub dx: Option<Vec<f64>>,
    pub dk: Option<Vec<f64>>,
    pub db: Option<Vec<f64>>,
}

pub(crate) fn conv_backward(
    g: &ConvGeometry,
    x: &[f64],
    k: &[f64],
    dy: &[f64],
    need: (bool, bool, bool),
) -> ConvGrads {
    let (need_dx, need_dk, need_db) = need;
    let (patch, hw) = (g.patch(), g.positions());
    let mut dx = need_dx.then(|| vec![0.0; g.batch * g.in_sample()]);

    let per_sample = |xb: &[f64], dyb: &[f64], dxb: Option<&mut [f64]>| -> Option<Vec<f64>> {
        let dkb = need_dk.then(|| {
            let mut cols = vec![0.0; patch * hw];
            g.im2col(xb, &mut cols);
            let mut dkb = vec![0.0; g.out_ch * patch];
            gemm(
                g.out_ch, hw, patch, 1.0, dyb, false, &cols, true, 0.0, &mut dkb,
            );
            dkb
        });
        if let Some(dxb) = dxb {
            let mut dcols = vec![0.0; patch * hw];
            gemm(
                patch, g.out_ch, hw, 1.0, k, true, dyb, false, 0.0, &mut dcols,
            );
            g.col2im(&dcols, dxb);
        }
        dkb
    };

    let partials: Vec<Option<Vec<f64>>> = match dx.as_mut() {
        Some(dx) => dx
            .par_chunks_mut(g.in_sample())
            .zip(
                x.par_chunks(g.in_sample())
                    .zip(dy.par_chunks(g.out_sample())),
            )
            .map(|(dxb, (xb, dyb))| per_sample(xb, dyb, Some(dxb)))
            .collect(),
        None if need_dk => x
            .par_chunks(g.in_sample())
            .zip(dy.par_chunks(g.out_sample()))
            .map(|(xb, dyb)| per_sample(xb, dyb, None))
            .collect(),
        None => Vec::new(),
    };

    let dk = need_dk.then(|| {
        let mut acc = vec![0.0; g.out_ch * patch];
        for p in partials.iter().flatten() {
            acc.iter_mut().zip(p).for_each(|(a, b)| *a += b);
        }
        acc
    });
    let db = need_db.then(|| {
        let mut acc = vec![0.0; g.out_ch];
        for dyb in dy.chunks(g.out_sample()) {
            for (f, plane) in dyb.chunks(hw).enumerate() {
                acc[f] += plane.iter().sum::<f64>();
            }
        }
        acc
    });
    ConvGrads { dx, dk, db }
}
