use rand::Rng;

use super::distort::{apply_distortion, distort};
use super::image::{CleanImage, PatchPair};
use super::spec::ConfounderSet;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::seed;

const TAG_CROP: u64 = 1;
const TAG_DISTORT: u64 = 2;
const TAG_SPEC: u64 = 3;

/// How distortions are assigned to the pairs of a batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplingMode {
    /// Every pair uses confounder `i` (zero-based).
    Serial(usize),
    /// Pairs span all confounders, split as evenly as possible with the
    /// remainder going to the lowest indices; pairs are grouped by index.
    Parallel,
    /// Each pair draws its confounder uniformly at random.
    Outer,
}

/// Per-confounder pair counts of a parallel batch.
pub fn parallel_counts(batch: usize, n: usize) -> Vec<usize> {
    (0..n).map(|i| batch / n + usize::from(i < batch % n)).collect()
}

/// Crop window for pair `pair_seed`: `(image index, top, left)`.
pub fn crop_position(images: &[CleanImage], patch: usize, pair_seed: u64) -> Result<(usize, usize, usize)> {
    let mut rng = seed::rng(seed::derive(pair_seed, TAG_CROP));
    let idx = rng.random_range(0..images.len());
    let img = &images[idx];
    if img.height() < patch || img.width() < patch {
        return Err(Error::InvalidImage(format!(
            "{} is {}x{}, smaller than the {patch}px patch",
            img.source_id(),
            img.height(),
            img.width()
        )));
    }
    let top = rng.random_range(0..=img.height() - patch);
    let left = rng.random_range(0..=img.width() - patch);
    Ok((idx, top, left))
}

/// Draws `batch` distorted/clean patch pairs.
///
/// Pair `j` derives its own seed from `(seed, j)` and from that three
/// independent streams: crop position, distortion noise and (in
/// [`SamplingMode::Outer`]) the confounder choice.
pub fn sample_batch(
    images: &[CleanImage],
    set: &ConfounderSet,
    mode: SamplingMode,
    batch: usize,
    patch: usize,
    seed: u64,
) -> Result<Vec<PatchPair>> {
    if images.is_empty() {
        return Err(Error::InvalidConfig("no images to sample from".into()));
    }
    if patch == 0 {
        return Err(Error::InvalidConfig("patch size must be positive".into()));
    }
    let n = set.len();
    let assignment: Vec<usize> = match mode {
        SamplingMode::Serial(i) => {
            if i >= n {
                return Err(Error::InvalidConfig(format!("serial index {i} out of range for {n} confounders")));
            }
            vec![i; batch]
        }
        SamplingMode::Parallel => parallel_counts(batch, n)
            .into_iter()
            .enumerate()
            .flat_map(|(i, c)| std::iter::repeat_n(i, c))
            .collect(),
        SamplingMode::Outer => (0..batch)
            .map(|j| {
                let pair_seed = seed::derive(seed, j as u64);
                seed::rng(seed::derive(pair_seed, TAG_SPEC)).random_range(0..n)
            })
            .collect(),
    };
    assignment
        .into_iter()
        .enumerate()
        .map(|(j, spec_index)| {
            let pair_seed = seed::derive(seed, j as u64);
            let (idx, top, left) = crop_position(images, patch, pair_seed)?;
            let clean = images[idx].crop(top, left, patch)?;
            let spec = set.get(spec_index).expect("assignment within range");
            let distorted = distort(&clean, spec, seed::derive(pair_seed, TAG_DISTORT))?;
            Ok(PatchPair {
                distorted,
                clean,
                spec_index,
            })
        })
        .collect()
}

/// One rendition of `image` per confounder; rendition `i` uses the seed
/// `derive(seed, i)`.
pub fn counterfactual_augment(image: &CleanImage, set: &ConfounderSet, seed: u64) -> Result<Vec<Tensor>> {
    set.specs()
        .iter()
        .enumerate()
        .map(|(i, spec)| apply_distortion(image, spec, seed::derive(seed, i as u64)))
        .collect()
}
