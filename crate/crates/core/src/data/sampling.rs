//! Rare-class filtering and repeat-factor sampling.

use rand::Rng;

use crate::data::coco::DatasetIndex;
use crate::error::{Error, Result};
use crate::nn::{derive_seed, named_rng};

/// Drops categories with fewer than `min_instances` non-crowd instances,
/// together with their annotations, and renumbers the vocabulary.
///
/// Images left without annotations by the filter are dropped as well.
pub fn filter_rare_classes(index: &DatasetIndex, min_instances: usize) -> DatasetIndex {
    let counts = index.instance_counts();
    let keep: Vec<usize> = (0..index.vocab.len())
        .filter(|&c| counts[c] >= min_instances)
        .collect();
    let (vocab, map) = index.vocab.retain(&keep);
    let mut samples = Vec::with_capacity(index.samples.len());
    for s in &index.samples {
        let had_any = !s.instances.is_empty();
        let mut s = s.clone();
        s.instances.retain_mut(|inst| match map[inst.category_id] {
            Some(new_id) => {
                inst.category_id = new_id;
                true
            }
            None => false,
        });
        if had_any && s.instances.is_empty() {
            continue;
        }
        samples.push(s);
    }
    DatasetIndex::new(
        index.image_dir.clone(),
        vocab,
        samples,
        index.rejected_annotations,
    )
}

/// Per-image repeat factors: each category gets `max(1, sqrt(tau / f))`,
/// with `f` the fraction of images containing it, and an image takes the
/// largest factor among its categories.
pub fn repeat_factors(index: &DatasetIndex, tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::Range(format!("repeat threshold {tau} is outside (0, 1]")));
    }
    let n = index.len().max(1) as f64;
    let per_cat: Vec<f64> = (0..index.vocab.len())
        .map(|c| {
            let f = index.category_freq.get(&c).copied().unwrap_or(0) as f64 / n;
            if f > 0.0 {
                (tau / f).sqrt().max(1.0)
            } else {
                1.0
            }
        })
        .collect();
    Ok(index
        .samples
        .iter()
        .map(|s| {
            s.instances
                .iter()
                .filter(|i| !i.iscrowd)
                .map(|i| per_cat[i.category_id])
                .fold(1.0, f64::max)
        })
        .collect())
}

/// Sample positions for one epoch. Sample `i` appears `floor(r_i)` times plus
/// once more with probability `frac(r_i)`, drawn from a stream keyed by
/// `(seed, i, epoch)` so the result does not depend on evaluation order.
pub fn epoch_indices(factors: &[f64], seed: u64, epoch: u64) -> Vec<usize> {
    let mut out = Vec::new();
    for (i, &r) in factors.iter().enumerate() {
        let base = r.floor();
        let frac = r - base;
        let mut count = base as usize;
        if frac > 0.0 {
            let mut rng = named_rng(derive_seed(&[seed, i as u64, epoch]), "repeat");
            if rng.random::<f64>() < frac {
                count += 1;
            }
        }
        out.extend(std::iter::repeat_n(i, count));
    }
    out
}
