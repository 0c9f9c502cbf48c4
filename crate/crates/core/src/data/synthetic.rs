//! Planted-pattern generator: a synthetic dataset whose labels follow a
//! rule an independent oracle can recompute from the pixels.
//!
//! Every tag id owns a distinct solid color. An image is a grid of
//! cells, each painted with the color of one of the item's "painted"
//! tags; a tag is labeled important iff its color occupies at least
//! `threshold` cells. Distractor tags are listed on the item but never
//! painted, so their occupancy is zero.

use rand::seq::SliceRandom;
use rand::Rng;

use super::{ItemImage, TagVocabulary, TaggedItem};
use crate::error::{Error, Result};
use crate::rng::rng_for;

/// Pixels per grid cell; the tiny backbone's three stride-2 stages
/// reduce one cell to one grid feature.
pub const CELL_PX: usize = 8;

#[derive(Debug, Clone)]
pub struct SyntheticConfig {
    /// Number of real tags (ids 1..=vocab_size).
    pub vocab_size: usize,
    pub items: usize,
    /// Cells per image side.
    pub grid_side: usize,
    /// Inclusive range of painted tags per image.
    pub patterns_per_image: (usize, usize),
    /// Inclusive range of distractor tags per item.
    pub distractors_per_item: (usize, usize),
    /// Minimum cells a tag's pattern must occupy to be important.
    pub threshold: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            vocab_size: 120,
            items: 2000,
            grid_side: 4,
            patterns_per_image: (2, 4),
            distractors_per_item: (2, 5),
            threshold: 1,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.items == 0 || self.grid_side == 0 || self.threshold == 0 {
            return Err(Error::Config("synthetic counts must be positive".into()));
        }
        if self.vocab_size > 250 {
            return Err(Error::Config(
                "synthetic vocabulary is limited to 250 tags (distinct colors)".into(),
            ));
        }
        let (plo, phi) = self.patterns_per_image;
        let (dlo, dhi) = self.distractors_per_item;
        if plo == 0 || plo > phi || dlo > dhi {
            return Err(Error::Config("invalid pattern/distractor ranges".into()));
        }
        if phi > self.grid_side * self.grid_side {
            return Err(Error::Config(format!(
                "cannot paint {phi} patterns on {} cells",
                self.grid_side * self.grid_side
            )));
        }
        if phi + dhi > self.vocab_size {
            return Err(Error::Config(format!(
                "vocabulary of {} tags too small for {phi} patterns + {dhi} distractors",
                self.vocab_size
            )));
        }
        Ok(())
    }
}

/// Solid color owned by a tag id. Odd multipliers are bijections mod
/// 256, so triples are distinct for ids below 251.
pub fn tag_color(id: u32) -> [u8; 3] {
    let i = id as u32;
    [
        (i.wrapping_mul(97) % 251) as u8,
        (i.wrapping_mul(151).wrapping_add(37) % 251) as u8,
        (i.wrapping_mul(199).wrapping_add(89) % 251) as u8,
    ]
}

fn sample_distinct(rng: &mut impl Rng, pool: &[u32], count: usize) -> Vec<u32> {
    let mut pool = pool.to_vec();
    pool.shuffle(rng);
    pool.truncate(count);
    pool
}

/// Deterministically generates the dataset and its vocabulary.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<(Vec<TaggedItem>, TagVocabulary)> {
    cfg.validate()?;
    let vocab =
        TagVocabulary::from_names((1..=cfg.vocab_size).map(|i| format!("tag{i:03}")))?;
    let all_ids: Vec<u32> = vocab.all_ids().collect();
    let side = cfg.grid_side * CELL_PX;
    let cells = cfg.grid_side * cfg.grid_side;

    let mut items = Vec::with_capacity(cfg.items);
    for idx in 0..cfg.items {
        let mut rng = rng_for(cfg.seed, &[0x73796e7468, idx as u64]); // "synth"
        let n_pat = rng.random_range(cfg.patterns_per_image.0..=cfg.patterns_per_image.1);
        let painted = sample_distinct(&mut rng, &all_ids, n_pat);

        // Each painted tag claims one guaranteed cell; the rest are uniform.
        let mut cell_owner = vec![0usize; cells];
        let mut order: Vec<usize> = (0..cells).collect();
        order.shuffle(&mut rng);
        for (slot, &cell) in order.iter().enumerate() {
            cell_owner[cell] =
                if slot < n_pat { slot } else { rng.random_range(0..n_pat) };
        }
        let mut occupancy = vec![0usize; n_pat];
        for &owner in &cell_owner {
            occupancy[owner] += 1;
        }

        let remaining: Vec<u32> =
            all_ids.iter().copied().filter(|id| !painted.contains(id)).collect();
        let n_dis = rng.random_range(cfg.distractors_per_item.0..=cfg.distractors_per_item.1);
        let distractors = sample_distinct(&mut rng, &remaining, n_dis);

        let mut tags: Vec<(u32, bool)> = painted
            .iter()
            .enumerate()
            .map(|(i, &id)| (id, occupancy[i] >= cfg.threshold))
            .chain(distractors.iter().map(|&id| (id, false)))
            .collect();
        tags.shuffle(&mut rng);

        let mut pixels = vec![0f32; 3 * side * side];
        for cy in 0..cfg.grid_side {
            for cx in 0..cfg.grid_side {
                let color = tag_color(painted[cell_owner[cy * cfg.grid_side + cx]]);
                for ch in 0..3 {
                    let value = color[ch] as f32 / 255.0;
                    for py in 0..CELL_PX {
                        let y = cy * CELL_PX + py;
                        let row = ch * side * side + y * side + cx * CELL_PX;
                        for px in 0..CELL_PX {
                            pixels[row + px] = value;
                        }
                    }
                }
            }
        }

        items.push(TaggedItem::new(
            format!("synth-{idx:05}"),
            ItemImage::Pixels { data: pixels, height: side, width: side },
            tags.iter().map(|&(id, _)| id).collect(),
            tags.iter().map(|&(_, important)| important).collect(),
        )?);
    }
    Ok((items, vocab))
}

/// Independent labeling oracle: counts, straight from the pixels, how
/// many cells carry each tag's color.
pub fn occupancy_from_pixels(item: &TaggedItem, grid_side: usize) -> Result<Vec<(u32, usize)>> {
    let ItemImage::Pixels { data, height, width } = &item.image else {
        return Err(Error::Data(format!("item `{}` has no pixel image", item.id)));
    };
    if *height != grid_side * CELL_PX || *width != grid_side * CELL_PX {
        return Err(Error::Data(format!(
            "item `{}`: image {}x{} does not match grid side {grid_side}",
            item.id, height, width
        )));
    }
    let side = *width;
    let mut counts = vec![0usize; item.tags.len()];
    for cy in 0..grid_side {
        for cx in 0..grid_side {
            // Cells are solid; the center pixel identifies the color.
            let y = cy * CELL_PX + CELL_PX / 2;
            let x = cx * CELL_PX + CELL_PX / 2;
            let px = |ch: usize| (data[ch * side * side + y * side + x] * 255.0).round() as u8;
            let color = [px(0), px(1), px(2)];
            for (i, &tag) in item.tags.iter().enumerate() {
                if tag_color(tag) == color {
                    counts[i] += 1;
                }
            }
        }
    }
    Ok(item.tags.iter().copied().zip(counts).collect())
}
