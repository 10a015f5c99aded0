//! Iterative radix-2 decimation-in-time FFT.

use std::f64::consts::PI;
use std::sync::OnceLock;

use num_complex::Complex64;

use super::{DspError, FFT_SIZE};

/// Precomputed bit-reversal permutation and twiddles for one power-of-two size.
#[derive(Clone, Debug)]
pub struct Fft {
    n: usize,
    rev: Vec<usize>,
    twiddles: Vec<Complex64>,
}

impl Fft {
    pub fn new(n: usize) -> Result<Self, DspError> {
        if n == 0 || !n.is_power_of_two() {
            return Err(DspError::NotPowerOfTwo(n));
        }
        let bits = n.trailing_zeros();
        let rev = (0..n)
            .map(|i| {
                if bits == 0 {
                    0
                } else {
                    i.reverse_bits() >> (usize::BITS - bits)
                }
            })
            .collect();
        let twiddles = (0..n / 2)
            .map(|k| Complex64::from_polar(1.0, -2.0 * PI * k as f64 / n as f64))
            .collect();
        Ok(Self { n, rev, twiddles })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// In-place `X[k] = sum_n x[n] e^{-2 pi i k n / N}`.
    pub fn forward(&self, buf: &mut [Complex64]) {
        assert_eq!(buf.len(), self.n, "buffer length must equal the FFT size");
        for i in 0..self.n {
            let j = self.rev[i];
            if i < j {
                buf.swap(i, j);
            }
        }
        let mut len = 2;
        while len <= self.n {
            let half = len / 2;
            let step = self.n / len;
            for start in (0..self.n).step_by(len) {
                for k in 0..half {
                    let w = self.twiddles[k * step];
                    let a = buf[start + k];
                    let b = buf[start + k + half] * w;
                    buf[start + k] = a + b;
                    buf[start + k + half] = a - b;
                }
            }
            len <<= 1;
        }
    }

    /// Zero-pads a real frame to the FFT size and transforms it.
    pub fn real(&self, frame: &[f64]) -> Result<Vec<Complex64>, DspError> {
        if frame.len() > self.n {
            return Err(DspError::FrameTooLong {
                len: frame.len(),
                size: self.n,
            });
        }
        let mut buf = vec![Complex64::new(0.0, 0.0); self.n];
        for (b, &x) in buf.iter_mut().zip(frame) {
            b.re = x;
        }
        self.forward(&mut buf);
        Ok(buf)
    }
}

/// 512-point transform of a real frame of at most 512 samples.
pub fn fft_512(frame: &[f64]) -> Result<Vec<Complex64>, DspError> {
    static PLAN: OnceLock<Fft> = OnceLock::new();
    PLAN.get_or_init(|| Fft::new(FFT_SIZE).expect("512 is a power of two"))
        .real(frame)
}
