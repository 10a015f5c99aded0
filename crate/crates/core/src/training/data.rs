//! Per-utterance feature matrices and batch assembly.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use super::TrainError;
use crate::dsp::{self, Waveform, BINS, CONTEXT};
use crate::io::{self, Manifest, Split};
use crate::models::InputKind;
use crate::synth::Utterance;
use crate::tensor::Tensor;

/// Mean-normalized log-magnitude frames of one waveform, `T x 257`.
pub fn features(w: &Waveform) -> Result<Tensor, TrainError> {
    Ok(dsp::mean_normalize(&dsp::spectrogram(w)?)?.into_frames())
}

/// Builds the model view of a `T x 257` normalized frame matrix.
pub fn model_input(kind: InputKind, frames: &Tensor) -> Result<Tensor, TrainError> {
    Ok(match kind {
        InputKind::Utterance => frames.clone(),
        InputKind::Spliced => dsp::splice_matrix(frames, CONTEXT),
        InputKind::DeltaSpliced => {
            let s = dsp::Spectrogram::from_matrix(frames.clone(), true)?;
            dsp::add_deltas(&s).rows
        }
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureUtterance {
    pub id: String,
    pub snr_db: i32,
    pub clean: Tensor,
    pub noisy: Tensor,
    pub labels: Vec<usize>,
}

impl FeatureUtterance {
    pub fn frames(&self) -> usize {
        self.clean.dims()[0]
    }
}

/// One split's utterances as normalized feature matrices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureSet {
    pub utterances: Vec<FeatureUtterance>,
}

impl FeatureSet {
    pub fn from_synth(us: &[Utterance]) -> Result<Self, TrainError> {
        let utterances = us
            .par_iter()
            .map(|u| Self::build(&u.id, u.snr_db, &u.clean, &u.noisy, u.labels.clone()))
            .collect::<Result<_, _>>()?;
        Ok(Self { utterances })
    }

    /// Reads one split of a corpus directory holding a manifest.
    pub fn load(dir: &Path, split: Split) -> Result<Self, TrainError> {
        let manifest = Manifest::read(&dir.join(Manifest::FILE_NAME))?;
        let utterances = manifest
            .split(split)
            .par_iter()
            .map(|e| {
                let clean = io::read_wav(&dir.join(&e.clean))?;
                let noisy = io::read_wav(&dir.join(&e.noisy))?;
                let labels = io::read_labels(&dir.join(&e.labels))?;
                Self::build(&e.id, e.snr_db, &clean, &noisy, labels)
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { utterances })
    }

    fn build(
        id: &str,
        snr_db: i32,
        clean: &Waveform,
        noisy: &Waveform,
        labels: Vec<usize>,
    ) -> Result<FeatureUtterance, TrainError> {
        let c = features(clean)?;
        let n = features(noisy)?;
        if c.dims() != n.dims() {
            return Err(TrainError::NotParallel(id.to_string()));
        }
        if labels.len() != c.dims()[0] {
            return Err(TrainError::Labels(format!(
                "{id}: {} labels for {} frames",
                labels.len(),
                c.dims()[0]
            )));
        }
        Ok(FeatureUtterance {
            id: id.to_string(),
            snr_db,
            clean: c,
            noisy: n,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn frames(&self) -> usize {
        self.utterances.iter().map(FeatureUtterance::frames).sum()
    }

    /// One past the largest label.
    pub fn classes(&self) -> usize {
        self.utterances
            .iter()
            .flat_map(|u| u.labels.iter())
            .max()
            .map_or(0, |m| m + 1)
    }
}

/// Stacks matrices with equal column counts.
pub fn concat_rows<'a>(parts: impl IntoIterator<Item = &'a Tensor>) -> Tensor {
    let mut data = Vec::new();
    let mut rows = 0;
    let mut width = 0;
    for p in parts {
        width = p.dims()[1];
        rows += p.dims()[0];
        data.extend_from_slice(p.data());
    }
    Tensor::new([rows, width], data).expect("row counts add up")
}

/// Shuffled groups of whole utterances, each closed once it holds at least
/// `min_frames` frames. The final group may be smaller.
pub fn utterance_groups(lens: &[usize], min_frames: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..lens.len()).collect();
    order.shuffle(rng);
    let mut groups = Vec::new();
    let mut cur = Vec::new();
    let mut frames = 0;
    for i in order {
        cur.push(i);
        frames += lens[i];
        if frames >= min_frames {
            groups.push(std::mem::take(&mut cur));
            frames = 0;
        }
    }
    if !cur.is_empty() {
        groups.push(cur);
    }
    groups
}

/// Shuffled `(utterance, frame)` batches of `size`; the last may be smaller.
pub fn frame_batches(lens: &[usize], size: usize, rng: &mut impl Rng) -> Vec<Vec<(usize, usize)>> {
    let mut all: Vec<(usize, usize)> = lens
        .iter()
        .enumerate()
        .flat_map(|(u, &n)| (0..n).map(move |t| (u, t)))
        .collect();
    all.shuffle(rng);
    all.chunks(size.max(1)).map(<[_]>::to_vec).collect()
}

/// Spliced rows for selected frames (edge-replicated context), `n x 2827`.
pub fn spliced_rows(frames: &[&Tensor], picks: &[(usize, usize)]) -> Tensor {
    let span = 2 * CONTEXT + 1;
    let mut data = Vec::with_capacity(picks.len() * span * BINS);
    for &(u, t) in picks {
        let m = frames[u];
        let rows = m.dims()[0] as isize;
        for o in -(CONTEXT as isize)..=CONTEXT as isize {
            let r = (t as isize + o).clamp(0, rows - 1) as usize;
            data.extend_from_slice(&m.data()[r * BINS..(r + 1) * BINS]);
        }
    }
    Tensor::new([picks.len(), span * BINS], data).expect("sizes agree")
}

/// Gather index that re-splices the rows of several stacked utterances
/// (lengths `lens`, width 257) without crossing utterance boundaries.
pub fn resplice_index(lens: &[usize]) -> Vec<usize> {
    let mut idx = Vec::new();
    let mut offset = 0;
    for &n in lens {
        idx.extend(
            dsp::splice_index(n, BINS, CONTEXT)
                .into_iter()
                .map(|i| i + offset * BINS),
        );
        offset += n;
    }
    idx
}
