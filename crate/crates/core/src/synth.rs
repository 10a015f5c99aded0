//! Synthetic parallel corpus: harmonic "phone" segments with exact per-frame
//! class labels, additive noise mixed at a target SNR.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::dsp::{frame_count, Waveform, HOP, SAMPLE_RATE, WINDOW};
use crate::io::{self, quantize, IoError, Manifest, ManifestEntry, Split};
use crate::seed;

/// The six mixing SNRs, assigned round-robin within each split.
pub const SNRS: [i32; 6] = [-6, -3, 0, 3, 6, 9];
pub const CLEAN_PEAK: f64 = 0.5;
const MIN_SEGMENT: usize = SAMPLE_RATE as usize / 10;
const MAX_SEGMENT: usize = 4 * SAMPLE_RATE as usize / 10;
/// Mixtures are rescaled below this peak so 16-bit storage never clips.
const MIX_PEAK: f64 = 0.99;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("clean signal has zero power")]
    SilentClean,
    #[error("noise has {noise} samples, clean has {clean}")]
    NoiseTooShort { noise: usize, clean: usize },
    #[error("invalid corpus config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] IoError),
}

/// Fixed harmonic recipe of one class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassTemplate {
    pub f0: f64,
    /// `(harmonic number, amplitude)`, 2 to 4 entries.
    pub partials: Vec<(u32, f64)>,
}

/// Template of `class`, a pure function of the class id.
pub fn class_template(class: usize) -> ClassTemplate {
    let mut rng = seed::rng(0xC1A55, &[class as u64]);
    let f0 = rng.random_range(90.0..420.0);
    let count = rng.random_range(2..=4);
    let mut numbers: Vec<u32> = (1..=7).collect();
    let mut partials = Vec::with_capacity(count);
    for _ in 0..count {
        let n = numbers.swap_remove(rng.random_range(0..numbers.len()));
        partials.push((n, rng.random_range(0.25..1.0)));
    }
    partials.sort_by_key(|p| p.0);
    ClassTemplate { f0, partials }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub class: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CleanUtterance {
    pub wave: Waveform,
    pub segments: Vec<Segment>,
    pub labels: Vec<usize>,
}

fn render_segment(out: &mut Vec<f64>, t: &ClassTemplate, len: usize, rng: &mut impl Rng) {
    let jitter = rng.random_range(0.98..1.02);
    let phases: Vec<f64> = t
        .partials
        .iter()
        .map(|_| rng.random_range(0.0..2.0 * PI))
        .collect();
    let fs = SAMPLE_RATE as f64;
    for n in 0..len {
        let env = 0.6 + 0.4 * (PI * n as f64 / len as f64).sin();
        let s: f64 = t
            .partials
            .iter()
            .zip(&phases)
            .map(|(&(h, a), ph)| {
                a * (2.0 * PI * t.f0 * jitter * h as f64 * n as f64 / fs + ph).sin()
            })
            .sum();
        out.push(env * s);
    }
}

/// Label of every analysis frame: the class of the segment holding the frame center.
pub fn frame_labels(segments: &[Segment], samples: usize) -> Vec<usize> {
    let frames = frame_count(samples).unwrap_or(0);
    (0..frames)
        .map(|t| {
            let center = t * HOP + WINDOW / 2;
            segments
                .iter()
                .find(|s| center < s.end)
                .or(segments.last())
                .map(|s| s.class)
                .expect("at least one segment")
        })
        .collect()
}

/// Concatenates `num_segments` segments of 100-400 ms, peak-normalized to
/// 0.5 and quantized to 16 bits. The first segment has `first_class` when
/// given; the rest are drawn uniformly from `0..classes`.
pub fn synth_clean_utterance(
    seed: u64,
    num_segments: usize,
    classes: usize,
    first_class: Option<usize>,
) -> CleanUtterance {
    assert!(num_segments >= 1 && classes >= 1);
    let mut rng = seed::rng(seed, &[1]);
    let mut samples = Vec::new();
    let mut segments = Vec::with_capacity(num_segments);
    for i in 0..num_segments {
        let class = match (i, first_class) {
            (0, Some(c)) => c % classes,
            _ => rng.random_range(0..classes),
        };
        let len = rng.random_range(MIN_SEGMENT..=MAX_SEGMENT);
        let start = samples.len();
        render_segment(&mut samples, &class_template(class), len, &mut rng);
        segments.push(Segment {
            class,
            start,
            end: samples.len(),
        });
    }
    let peak = samples.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    for s in &mut samples {
        *s = quantize(*s * CLEAN_PEAK / peak);
    }
    let labels = frame_labels(&segments, samples.len());
    CleanUtterance {
        wave: Waveform::new(samples),
        segments,
        labels,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseKind {
    White,
    /// One-pole lowpass of white noise.
    Lowpass,
    /// Sum of four circularly shifted clean-like signals.
    Babble,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 3] = [NoiseKind::White, NoiseKind::Lowpass, NoiseKind::Babble];
}

/// Seeded noise of `len` samples with unit RMS.
pub fn synth_noise(seed: u64, len: usize, kind: NoiseKind, classes: usize) -> Waveform {
    assert!(len > 0);
    let mut rng = seed::rng(seed, &[2]);
    let white = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
        (0..len).map(|_| StandardNormal.sample(rng)).collect()
    };
    let mut x = match kind {
        NoiseKind::White => white(&mut rng),
        NoiseKind::Lowpass => {
            let w = white(&mut rng);
            let mut y = 0.0;
            w.iter()
                .map(|v| {
                    y = 0.95 * y + 0.05 * v;
                    y
                })
                .collect()
        }
        NoiseKind::Babble => {
            let mut acc = vec![0.0; len];
            for talker in 0..4u64 {
                let segs = len / MIN_SEGMENT + 1;
                let u = synth_clean_utterance(
                    seed::derive(seed, &[3, talker]),
                    segs,
                    classes.max(1),
                    None,
                );
                let src = &u.wave.samples;
                let shift = rng.random_range(0..src.len());
                for (i, a) in acc.iter_mut().enumerate() {
                    *a += src[(i + shift) % src.len()];
                }
            }
            acc
        }
    };
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / len as f64).sqrt();
    if rms > 0.0 {
        x.iter_mut().for_each(|v| *v /= rms);
    }
    Waveform::new(x)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mixture {
    pub noisy: Waveform,
    /// The clean signal after the same clip-protection scale as `noisy`.
    pub clean: Waveform,
    /// Gain applied to the noise before clip protection.
    pub noise_gain: f64,
    /// Common factor (<= 1) applied to clean and noisy to avoid clipping.
    pub clip_scale: f64,
}

fn power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

/// `10 log10(P_clean / P_noisy-clean)`.
pub fn measured_snr(clean: &[f64], noisy: &[f64]) -> f64 {
    let diff: Vec<f64> = clean.iter().zip(noisy).map(|(c, n)| n - c).collect();
    10.0 * (power(clean) / power(&diff)).log10()
}

/// `clean + g * noise` with `10 log10(P_clean / P_{g noise}) = snr_db`. If the
/// mixture would exceed 0.99 in magnitude, clean and mixture are scaled
/// together (leaving the SNR unchanged). Without quantization the result is
/// exact; with `quantize_16` both outputs are rounded to 16-bit codes.
pub fn mix_at_snr(
    clean: &Waveform,
    noise: &Waveform,
    snr_db: f64,
    quantize_16: bool,
) -> Result<Mixture, SynthError> {
    let n = clean.len();
    if noise.len() < n {
        return Err(SynthError::NoiseTooShort {
            noise: noise.len(),
            clean: n,
        });
    }
    let pc = power(&clean.samples);
    if pc == 0.0 || n == 0 {
        return Err(SynthError::SilentClean);
    }
    let noise = &noise.samples[..n];
    let g = (pc / (power(noise) * 10f64.powf(snr_db / 10.0))).sqrt();
    let mut noisy: Vec<f64> = clean
        .samples
        .iter()
        .zip(noise)
        .map(|(c, v)| c + g * v)
        .collect();
    let peak = noisy.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    let clip_scale = if peak > MIX_PEAK {
        MIX_PEAK / peak
    } else {
        1.0
    };
    let mut clean_out = clean.samples.clone();
    for (c, m) in clean_out.iter_mut().zip(&mut noisy) {
        *c *= clip_scale;
        *m *= clip_scale;
        if quantize_16 {
            *c = quantize(*c);
            *m = quantize(*m);
        }
    }
    Ok(Mixture {
        noisy: Waveform::new(noisy),
        clean: Waveform::new(clean_out),
        noise_gain: g,
        clip_scale,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusConfig {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub classes: usize,
    pub seed: u64,
    /// Inclusive range of segments per utterance.
    pub min_segments: usize,
    pub max_segments: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            train: 200,
            dev: 69,
            test: 55,
            classes: 40,
            seed: 1,
            min_segments: 2,
            max_segments: 4,
        }
    }
}

impl CorpusConfig {
    pub fn size(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Dev => self.dev,
            Split::Test => self.test,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Config(m.into()));
        if self.train == 0 || self.dev == 0 || self.test == 0 {
            return bad("every split needs at least one utterance");
        }
        if self.classes < 2 {
            return bad("need at least 2 classes");
        }
        if self.min_segments == 0 || self.min_segments > self.max_segments {
            return bad("segment range must satisfy 1 <= min <= max");
        }
        Ok(())
    }

    pub fn header(&self) -> Vec<(String, String)> {
        vec![
            ("train".into(), self.train.to_string()),
            ("dev".into(), self.dev.to_string()),
            ("test".into(), self.test.to_string()),
            ("classes".into(), self.classes.to_string()),
            ("seed".into(), self.seed.to_string()),
            (
                "segments".into(),
                format!("{}-{}", self.min_segments, self.max_segments),
            ),
        ]
    }
}

/// One parallel utterance, already quantized to 16 bits.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub split: Split,
    pub clean: Waveform,
    pub noisy: Waveform,
    pub snr_db: i32,
    pub noise: NoiseKind,
    pub labels: Vec<usize>,
    pub segments: Vec<Segment>,
}

fn split_code(s: Split) -> u64 {
    match s {
        Split::Train => 11,
        Split::Dev => 22,
        Split::Test => 33,
    }
}

/// Utterance `index` of `split`; a pure function of the config.
pub fn generate_utterance(cfg: &CorpusConfig, split: Split, index: usize) -> Utterance {
    let base = seed::derive(cfg.seed, &[split_code(split), index as u64]);
    let mut rng = seed::rng(base, &[0]);
    let segments = rng.random_range(cfg.min_segments..=cfg.max_segments);
    let clean = synth_clean_utterance(
        seed::derive(base, &[1]),
        segments,
        cfg.classes,
        Some(index % cfg.classes),
    );
    let kind = NoiseKind::ALL[rng.random_range(0..NoiseKind::ALL.len())];
    let noise = synth_noise(
        seed::derive(base, &[2]),
        clean.wave.len(),
        kind,
        cfg.classes,
    );
    let snr = SNRS[index % SNRS.len()];
    let mix = mix_at_snr(&clean.wave, &noise, snr as f64, true)
        .expect("synthetic clean speech is never silent");
    Utterance {
        id: format!("{}-{index:04}", split.name()),
        split,
        clean: mix.clean,
        noisy: mix.noisy,
        snr_db: snr,
        noise: kind,
        labels: clean.labels,
        segments: clean.segments,
    }
}

/// Every utterance of `split`, generated in parallel and returned in index order.
pub fn generate_split(cfg: &CorpusConfig, split: Split) -> Vec<Utterance> {
    (0..cfg.size(split))
        .into_par_iter()
        .map(|i| generate_utterance(cfg, split, i))
        .collect()
}

/// Writes `clean/`, `noisy/`, `labels/` and the manifest under `dir`.
pub fn build_corpus(cfg: &CorpusConfig, dir: &Path) -> Result<Manifest, SynthError> {
    cfg.validate()?;
    let mkdir = |p: &Path| {
        std::fs::create_dir_all(p).map_err(|source| IoError::Io {
            path: p.display().to_string(),
            source,
        })
    };
    for sub in ["clean", "noisy", "labels"] {
        mkdir(&dir.join(sub))?;
    }
    let mut manifest = Manifest::default();
    manifest.header.extend(cfg.header());
    for split in Split::ALL {
        for u in generate_split(cfg, split) {
            let entry = ManifestEntry {
                clean: format!("clean/{}.wav", u.id).into(),
                noisy: format!("noisy/{}.wav", u.id).into(),
                labels: format!("labels/{}.lab", u.id).into(),
                snr_db: u.snr_db,
                id: u.id,
            };
            io::write_wav(&dir.join(&entry.clean), &u.clean)?;
            io::write_wav(&dir.join(&entry.noisy), &u.noisy)?;
            io::write_labels(&dir.join(&entry.labels), &u.labels)?;
            manifest.entries.push(entry);
        }
    }
    manifest.write(&dir.join(Manifest::FILE_NAME))?;
    Ok(manifest)
}
