//! STFT log-magnitude features: 25 ms Hamming frames every 10 ms at 16 kHz,
//! a 512-point FFT, 257 log magnitudes per frame, then per-utterance mean
//! normalization, context splicing and optional delta augmentation.

mod fft;

use std::f64::consts::PI;

use crate::tensor::Tensor;

pub use fft::{fft_512, Fft};

pub const SAMPLE_RATE: u32 = 16_000;
pub const WINDOW: usize = 400;
pub const HOP: usize = 160;
pub const FFT_SIZE: usize = 512;
pub const BINS: usize = FFT_SIZE / 2 + 1;
pub const CONTEXT: usize = 5;
/// Frames per spliced row (`2 * CONTEXT + 1`).
pub const SPAN: usize = 2 * CONTEXT + 1;
pub const SPLICE_WIDTH: usize = BINS * SPAN;
pub const DELTA_SPLICE_WIDTH: usize = 3 * BINS * SPAN;
pub const MAGNITUDE_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DspError {
    #[error("signal of {0} samples is shorter than one {WINDOW}-sample window")]
    TooShort(usize),
    #[error("frame of {len} samples exceeds FFT size {size}")]
    FrameTooLong { len: usize, size: usize },
    #[error("FFT size {0} is not a power of two")]
    NotPowerOfTwo(usize),
    #[error("spectrogram is already mean-normalized")]
    AlreadyNormalized,
    #[error("expected {expected} columns, got {got}")]
    Width { expected: usize, got: usize },
    #[error("expected a {SAMPLE_RATE} Hz signal, got {0} Hz")]
    SampleRate(u32),
    #[error("empty input")]
    Empty,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>) -> Self {
        Self {
            samples,
            sample_rate: SAMPLE_RATE,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64
    }

    pub fn rms(&self) -> f64 {
        self.power().sqrt()
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, s| m.max(s.abs()))
    }
}

/// Symmetric Hamming window `0.54 - 0.46 cos(2 pi n / (N - 1))`.
pub fn hamming(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    let denom = (n - 1) as f64;
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / denom).cos())
        .collect()
}

/// `1 + floor((N - 400) / 160)` for `N >= 400`.
pub fn frame_count(samples: usize) -> Option<usize> {
    (samples >= WINDOW).then(|| 1 + (samples - WINDOW) / HOP)
}

/// Frame `t` covers samples `[160 t, 160 t + 400)`, Hamming-weighted.
pub fn frame_and_window(w: &Waveform) -> Result<Vec<Vec<f64>>, DspError> {
    if w.sample_rate != SAMPLE_RATE {
        return Err(DspError::SampleRate(w.sample_rate));
    }
    let count = frame_count(w.len()).ok_or(DspError::TooShort(w.len()))?;
    let win = hamming(WINDOW);
    Ok((0..count)
        .map(|t| {
            w.samples[t * HOP..t * HOP + WINDOW]
                .iter()
                .zip(&win)
                .map(|(s, h)| s * h)
                .collect()
        })
        .collect())
}

/// `ln(max(|X[k]|, 1e-8))` for the 257 non-redundant bins.
pub fn log_magnitude(spectrum: &[num_complex::Complex64]) -> Vec<f64> {
    spectrum
        .iter()
        .take(BINS)
        .map(|c| c.norm().max(MAGNITUDE_FLOOR).ln())
        .collect()
}

/// `T x 257` log-magnitude frames.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    frames: Tensor,
    normalized: bool,
}

impl Spectrogram {
    pub fn from_matrix(frames: Tensor, normalized: bool) -> Result<Self, DspError> {
        match frames.dims() {
            [_, BINS] => Ok(Self { frames, normalized }),
            [_, got] => Err(DspError::Width {
                expected: BINS,
                got: *got,
            }),
            _ => Err(DspError::Width {
                expected: BINS,
                got: 0,
            }),
        }
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn into_frames(self) -> Tensor {
        self.frames
    }

    pub fn num_frames(&self) -> usize {
        self.frames.dims()[0]
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        self.frames.row(t)
    }
}

/// Waveform to raw (un-normalized) log-magnitude spectrogram.
pub fn spectrogram(w: &Waveform) -> Result<Spectrogram, DspError> {
    let frames = frame_and_window(w)?;
    let mut data = Vec::with_capacity(frames.len() * BINS);
    for f in &frames {
        data.extend(log_magnitude(&fft_512(f)?));
    }
    let t = Tensor::new([frames.len(), BINS], data).expect("non-empty frame list");
    Ok(Spectrogram {
        frames: t,
        normalized: false,
    })
}

/// Subtracts each bin's mean over the utterance.
pub fn mean_normalize(s: &Spectrogram) -> Result<Spectrogram, DspError> {
    if s.normalized {
        return Err(DspError::AlreadyNormalized);
    }
    Ok(Spectrogram {
        frames: subtract_column_means(&s.frames),
        normalized: true,
    })
}

pub(crate) fn subtract_column_means(m: &Tensor) -> Tensor {
    let (rows, cols) = (m.dims()[0], m.dims()[1]);
    let mut means = vec![0.0; cols];
    for r in 0..rows {
        means.iter_mut().zip(m.row(r)).for_each(|(a, v)| *a += v);
    }
    means.iter_mut().for_each(|v| *v /= rows as f64);
    Tensor::from_fn([rows, cols], |i| m.data()[i] - means[i % cols])
}

/// Rows of `frames.len() * (2 context + 1)` spliced features.
#[derive(Clone, Debug, PartialEq)]
pub struct SplicedFeatures {
    pub rows: Tensor,
    pub context: usize,
}

impl SplicedFeatures {
    pub fn width(&self) -> usize {
        self.rows.dims()[1]
    }

    pub fn num_rows(&self) -> usize {
        self.rows.dims()[0]
    }
}

/// Flat gather index that splices a `rows x width` matrix with `+-context`
/// frames, replicating the edge frames. Output is `rows x (2c+1) width`.
pub fn splice_index(rows: usize, width: usize, context: usize) -> Vec<usize> {
    let span = 2 * context + 1;
    let mut idx = Vec::with_capacity(rows * span * width);
    for m in 0..rows {
        for off in 0..span {
            let src = (m + off).saturating_sub(context).min(rows - 1);
            idx.extend(src * width..(src + 1) * width);
        }
    }
    idx
}

/// Splices any `T x W` matrix into `T x (2c+1) W` rows.
pub fn splice_matrix(m: &Tensor, context: usize) -> Tensor {
    let (rows, width) = (m.dims()[0], m.dims()[1]);
    let src = m.data();
    let data = splice_index(rows, width, context)
        .into_iter()
        .map(|i| src[i])
        .collect();
    Tensor::new([rows, (2 * context + 1) * width], data).expect("non-empty")
}

pub fn splice(s: &Spectrogram, context: usize) -> SplicedFeatures {
    SplicedFeatures {
        rows: splice_matrix(&s.frames, context),
        context,
    }
}

/// Two-tap regression deltas along time with edge replication:
/// `d_t = sum_{n=1,2} n (x_{t+n} - x_{t-n}) / 10`.
pub fn deltas(m: &Tensor) -> Tensor {
    let (rows, cols) = (m.dims()[0], m.dims()[1]);
    let at = |t: isize, c: usize| m.data()[(t.clamp(0, rows as isize - 1) as usize) * cols + c];
    Tensor::from_fn([rows, cols], |i| {
        let (t, c) = ((i / cols) as isize, i % cols);
        (1..=2)
            .map(|n| n as f64 * (at(t + n, c) - at(t - n, c)))
            .sum::<f64>()
            / 10.0
    })
}

/// Per-frame `[static, delta, delta-delta]` (771 wide).
pub fn with_deltas(s: &Spectrogram) -> Tensor {
    let d1 = deltas(&s.frames);
    let d2 = deltas(&d1);
    let t = s.num_frames();
    let mut data = Vec::with_capacity(t * 3 * BINS);
    for r in 0..t {
        data.extend_from_slice(s.frames.row(r));
        data.extend_from_slice(d1.row(r));
        data.extend_from_slice(d2.row(r));
    }
    Tensor::new([t, 3 * BINS], data).expect("non-empty")
}

/// Delta-augmented frames spliced with `+-5` context: `T x 8481`.
pub fn add_deltas(s: &Spectrogram) -> SplicedFeatures {
    SplicedFeatures {
        rows: splice_matrix(&with_deltas(s), CONTEXT),
        context: CONTEXT,
    }
}
