//! TAD ("tag adding & dropping") augmentation and outlier injection.
//!
//! Tag-adding appends up to `floor(beta * U)` random vocabulary tags
//! (U = count of unimportant original tags), each labeled unimportant
//! and distinct from every original tag. Tag-dropping removes up to
//! `floor(beta_hat * U)` unimportant tags. Both counts are sampled
//! uniformly from `0..=bound`, per item, per epoch.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::{TagVocabulary, TaggedItem};
use crate::error::{Error, Result};

/// Coefficients bounding the two augmentation subprocedures.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TadConfig {
    /// Adding coefficient (beta).
    pub beta: f64,
    /// Dropping coefficient (beta-hat).
    pub beta_hat: f64,
}

impl TadConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta_hat.is_finite())
            || self.beta < 0.0
            || self.beta_hat < 0.0
        {
            return Err(Error::Config(format!(
                "TAD coefficients must be finite and non-negative, got beta={} beta_hat={}",
                self.beta, self.beta_hat
            )));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.beta == 0.0 && self.beta_hat == 0.0
    }
}

/// Upper bound on the number of tags to add for an item with `u`
/// unimportant original tags.
pub fn add_bound(beta: f64, u: usize) -> usize {
    (beta * u as f64).floor() as usize
}

fn vocabulary_candidates(item: &TaggedItem, vocab: &TagVocabulary) -> Vec<u32> {
    vocab.all_ids().filter(|id| !item.tags.contains(id)).collect()
}

/// Appends `a ~ Uniform[0, floor(beta * U)]` unique vocabulary tags,
/// excluding all original tags, each labeled unimportant. If the
/// vocabulary cannot supply enough candidates, all available ones are
/// added; this never fails.
pub fn tad_add(
    item: &TaggedItem,
    vocab: &TagVocabulary,
    beta: f64,
    rng: &mut ChaCha8Rng,
) -> TaggedItem {
    let bound = add_bound(beta, item.unimportant_count());
    if bound == 0 {
        return item.clone();
    }
    let count = rng.random_range(0..=bound);
    let mut candidates = vocabulary_candidates(item, vocab);
    candidates.shuffle(rng);
    candidates.truncate(count);
    let mut out = item.clone();
    for id in candidates {
        out.tags.push(id);
        out.labels.push(false);
    }
    out
}

/// Removes `d ~ Uniform[0, floor(beta_hat * U)]` unimportant tags,
/// uniformly without replacement. Important tags are never removed.
pub fn tad_drop(item: &TaggedItem, beta_hat: f64, rng: &mut ChaCha8Rng) -> TaggedItem {
    let candidates: Vec<usize> =
        (0..item.tags.len()).filter(|&i| !item.labels[i]).collect();
    drop_among(item, beta_hat, rng, &candidates)
}

fn drop_among(
    item: &TaggedItem,
    beta_hat: f64,
    rng: &mut ChaCha8Rng,
    candidates: &[usize],
) -> TaggedItem {
    let bound = (beta_hat * candidates.len() as f64).floor() as usize;
    if bound == 0 {
        return item.clone();
    }
    let count = rng.random_range(0..=bound);
    let mut chosen = candidates.to_vec();
    chosen.shuffle(rng);
    chosen.truncate(count);
    chosen.sort_unstable();
    let mut out = item.clone();
    for &i in chosen.iter().rev() {
        out.tags.remove(i);
        out.labels.remove(i);
    }
    out
}

/// Full augmentation: add first, then drop, with the drop pool being
/// the *original* unimportant tags, so freshly added tags are not
/// immediately droppable and the two bounds stay independent.
pub fn tad_augment(
    item: &TaggedItem,
    cfg: &TadConfig,
    vocab: &TagVocabulary,
    rng: &mut ChaCha8Rng,
) -> TaggedItem {
    if cfg.is_identity() {
        return item.clone();
    }
    let original_unimportant: Vec<usize> =
        (0..item.tags.len()).filter(|&i| !item.labels[i]).collect();
    let added = tad_add(item, vocab, cfg.beta, rng);
    // Added slots sit after the originals, so the candidate indices are
    // still valid in `added`.
    drop_among(&added, cfg.beta_hat, rng, &original_unimportant)
}

/// Appends `count_per_item` vocabulary tags unrelated to each item
/// (never among its originals), labeled unimportant and flagged as
/// outliers. Returns the augmented items and, per item, the slot
/// indices of the injected tags.
pub fn inject_outliers(
    items: &[TaggedItem],
    count_per_item: usize,
    vocab: &TagVocabulary,
    rng: &mut ChaCha8Rng,
) -> (Vec<TaggedItem>, Vec<Vec<usize>>) {
    let mut out_items = Vec::with_capacity(items.len());
    let mut flags = Vec::with_capacity(items.len());
    for item in items {
        let mut candidates = vocabulary_candidates(item, vocab);
        candidates.shuffle(rng);
        candidates.truncate(count_per_item);
        let mut augmented = item.clone();
        let mut slots = Vec::with_capacity(candidates.len());
        for id in candidates {
            slots.push(augmented.tags.len());
            augmented.tags.push(id);
            augmented.labels.push(false);
        }
        out_items.push(augmented);
        flags.push(slots);
    }
    (out_items, flags)
}
