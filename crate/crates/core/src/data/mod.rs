//! Data model: tag vocabulary, annotated items, padded mini-batches.

pub mod io;
pub mod preprocess;
pub mod synthetic;

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::nn::{ImageInput, Mask};
use crate::tensor::{Element, Tensor};

/// Bidirectional tag-name <-> id map. Ids are contiguous from 1; id 0
/// is the padding slot and never names a tag.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TagVocabulary {
    names: Vec<String>,
    ids: BTreeMap<String, u32>,
}

impl TagVocabulary {
    pub fn from_names<I: IntoIterator<Item = String>>(names: I) -> Result<Self> {
        let mut v = TagVocabulary::default();
        for name in names {
            if name.trim().is_empty() {
                return Err(Error::Data("empty tag name in vocabulary".into()));
            }
            if v.ids.contains_key(&name) {
                return Err(Error::Data(format!("duplicate tag `{name}` in vocabulary")));
            }
            let id = (v.names.len() + 1) as u32;
            v.ids.insert(name.clone(), id);
            v.names.push(name);
        }
        Ok(v)
    }

    /// Number of real tags (excluding the padding id).
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Embedding rows needed: tags plus the padding row.
    pub fn model_vocab_size(&self) -> usize {
        self.names.len() + 1
    }

    pub fn id_of(&self, name: &str) -> Option<u32> {
        self.ids.get(name).copied()
    }

    pub fn name_of(&self, id: u32) -> Option<&str> {
        if id == 0 {
            return None;
        }
        self.names.get(id as usize - 1).map(String::as_str)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// All ids, 1..=len.
    pub fn all_ids(&self) -> impl Iterator<Item = u32> + '_ {
        (1..=self.names.len() as u32).into_iter()
    }
}

/// Image payload of one item.
#[derive(Debug, Clone, PartialEq)]
pub enum ItemImage {
    /// Path relative to the dataset file; resolved by `materialize_images`.
    PathRef(String),
    /// Decoded pixels, channel-major (3, h, w), values in [0, 1].
    Pixels { data: Vec<f32>, height: usize, width: usize },
    /// Precomputed feature grid (cells x dim).
    Features { data: Vec<f32>, cells: usize, dim: usize },
    None,
}

/// One annotated image with its tag list and importance labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TaggedItem {
    pub id: String,
    pub image: ItemImage,
    pub tags: Vec<u32>,
    /// Parallel to `tags`; true marks an important tag.
    pub labels: Vec<bool>,
    /// Ground-truth concept ids (preprocessing only).
    pub ground_truth_concepts: Option<BTreeSet<u32>>,
}

impl TaggedItem {
    pub fn new(id: String, image: ItemImage, tags: Vec<u32>, labels: Vec<bool>) -> Result<Self> {
        if tags.len() != labels.len() {
            return Err(Error::Data(format!(
                "item `{id}`: {} tags but {} labels",
                tags.len(),
                labels.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for &t in &tags {
            if t == 0 {
                return Err(Error::Data(format!("item `{id}`: tag id 0 is reserved for padding")));
            }
            if !seen.insert(t) {
                return Err(Error::Data(format!("item `{id}`: duplicate tag id {t}")));
            }
        }
        Ok(TaggedItem { id, image, tags, labels, ground_truth_concepts: None })
    }

    pub fn important_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    pub fn unimportant_count(&self) -> usize {
        self.labels.len() - self.important_count()
    }
}

/// Padded, masked mini-batch.
#[derive(Debug)]
pub struct Batch<T: Element> {
    /// (bs, l) row-major; 0 marks padding.
    pub tag_ids: Vec<u32>,
    /// (bs, l); padded cells are false and never read.
    pub labels: Vec<bool>,
    pub mask: Mask,
    pub images: Option<ImageInput<T>>,
    /// Item ids in batch order, for reporting.
    pub item_ids: Vec<String>,
    pub bs: usize,
    pub l: usize,
}

impl<T: Element> Batch<T> {
    /// Labels as a 0/1 tensor of shape (bs, l).
    pub fn labels_tensor(&self) -> Tensor<T> {
        let data = self.labels.iter().map(|&b| if b { T::ONE } else { T::ZERO }).collect();
        Tensor::new(data, &[self.bs, self.l]).expect("labels shape")
    }
}

/// Deterministic choice of which tags survive lenient truncation:
/// important labels first, then ascending id.
fn truncation_order(item: &TaggedItem) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..item.tags.len()).collect();
    idx.sort_by_key(|&i| (!item.labels[i], item.tags[i]));
    idx
}

/// Pads tag lists to length `l` with id 0 and groups items into batches
/// of `bs` (last batch may be smaller).
///
/// Items with more than `l` tags are an error in strict mode; in
/// lenient mode they are truncated, never dropping an important tag
/// while an unimportant one remains.
pub fn pad_and_batch<T: Element>(
    items: &[TaggedItem],
    l: usize,
    bs: usize,
    strict: bool,
) -> Result<Vec<Batch<T>>> {
    if l < 1 || bs < 1 {
        return Err(Error::Config("batch size and tag capacity must be >= 1".into()));
    }
    let mut batches = Vec::new();
    for chunk in items.chunks(bs) {
        let rows = chunk.len();
        let mut tag_ids = vec![0u32; rows * l];
        let mut labels = vec![false; rows * l];
        let mut mask = vec![false; rows * l];
        let mut item_ids = Vec::with_capacity(rows);
        let mut images: Vec<&ItemImage> = Vec::with_capacity(rows);
        for (r, item) in chunk.iter().enumerate() {
            if item.tags.is_empty() {
                return Err(Error::Data(format!("item `{}` has no tags", item.id)));
            }
            let kept: Vec<usize> = if item.tags.len() > l {
                if strict {
                    return Err(Error::Data(format!(
                        "item `{}` has {} tags, exceeding capacity l={l}",
                        item.id,
                        item.tags.len()
                    )));
                }
                truncation_order(item).into_iter().take(l).collect()
            } else {
                (0..item.tags.len()).collect()
            };
            for (slot, &i) in kept.iter().enumerate() {
                tag_ids[r * l + slot] = item.tags[i];
                labels[r * l + slot] = item.labels[i];
                mask[r * l + slot] = true;
            }
            item_ids.push(item.id.clone());
            images.push(&item.image);
        }
        let images = collate_images::<T>(&images, &item_ids)?;
        batches.push(Batch {
            tag_ids,
            labels,
            mask: Mask::new(mask, rows, l)?,
            images,
            item_ids,
            bs: rows,
            l,
        });
    }
    Ok(batches)
}

fn collate_images<T: Element>(
    images: &[&ItemImage],
    item_ids: &[String],
) -> Result<Option<ImageInput<T>>> {
    if images.iter().any(|i| matches!(i, ItemImage::None)) {
        if images.iter().all(|i| matches!(i, ItemImage::None)) {
            return Ok(None);
        }
        return Err(Error::Data("batch mixes items with and without images".into()));
    }
    if let Some(ItemImage::PathRef(p)) = images.iter().find(|i| matches!(i, ItemImage::PathRef(_)))
    {
        return Err(Error::Data(format!(
            "image `{p}` not materialized; load pixel data before batching"
        )));
    }
    match images[0] {
        ItemImage::Pixels { height, width, .. } => {
            let (h, w) = (*height, *width);
            let mut data = Vec::with_capacity(images.len() * 3 * h * w);
            for (img, id) in images.iter().zip(item_ids) {
                match img {
                    ItemImage::Pixels { data: d, height: ih, width: iw } if *ih == h && *iw == w => {
                        data.extend(d.iter().map(|&v| T::from_f64(v as f64)));
                    }
                    _ => {
                        return Err(Error::Data(format!(
                            "item `{id}`: inconsistent image kind or size in batch"
                        )))
                    }
                }
            }
            Ok(Some(ImageInput::Pixels(Tensor::new(data, &[images.len(), 3, h, w])?)))
        }
        ItemImage::Features { cells, dim, .. } => {
            let (c, d) = (*cells, *dim);
            let mut data = Vec::with_capacity(images.len() * c * d);
            for (img, id) in images.iter().zip(item_ids) {
                match img {
                    ItemImage::Features { data: f, cells: ic, dim: idim } if *ic == c && *idim == d => {
                        data.extend(f.iter().map(|&v| T::from_f64(v as f64)));
                    }
                    _ => {
                        return Err(Error::Data(format!(
                            "item `{id}`: inconsistent feature grid in batch"
                        )))
                    }
                }
            }
            Ok(Some(ImageInput::Grid(Tensor::new(data, &[images.len(), c, d])?)))
        }
        _ => unreachable!("PathRef and None handled above"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(id: &str, tags: Vec<u32>, labels: Vec<bool>) -> TaggedItem {
        TaggedItem::new(id.to_string(), ItemImage::None, tags, labels).unwrap()
    }

    #[test]
    fn vocabulary_roundtrip_and_reserved_pad() {
        let v = TagVocabulary::from_names(["sky", "sea", "cat"].map(String::from)).unwrap();
        assert_eq!(v.len(), 3);
        assert_eq!(v.model_vocab_size(), 4);
        assert_eq!(v.id_of("sea"), Some(2));
        assert_eq!(v.name_of(2), Some("sea"));
        assert_eq!(v.name_of(0), None);
        for id in v.all_ids() {
            assert_eq!(v.id_of(v.name_of(id).unwrap()), Some(id));
        }
        assert!(TagVocabulary::from_names(["a", "a"].map(String::from)).is_err());
    }

    #[test]
    fn padding_and_mask_follow_tag_ids() {
        let items = vec![item("a", vec![5, 2, 9], vec![true, false, true])];
        let batches = pad_and_batch::<f32>(&items, 5, 4, true).unwrap();
        assert_eq!(batches.len(), 1);
        let b = &batches[0];
        assert_eq!(b.tag_ids, vec![5, 2, 9, 0, 0]);
        assert_eq!(b.mask.as_slice(), &[true, true, true, false, false]);
        assert_eq!(b.labels, vec![true, false, true, false, false]);
    }

    #[test]
    fn strict_overflow_reports_item_and_count() {
        let items = vec![item("crowded", (1..=17).collect(), vec![false; 17])];
        let err = pad_and_batch::<f32>(&items, 16, 4, true).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("crowded") && msg.contains("17"), "{msg}");
    }

    #[test]
    fn lenient_truncation_keeps_important_tags_first() {
        let tags: Vec<u32> = (1..=8).collect();
        let labels = vec![false, true, false, false, true, false, false, true];
        let items = vec![item("big", tags, labels)];
        let batches = pad_and_batch::<f32>(&items, 4, 4, false).unwrap();
        let b = &batches[0];
        // Important ids 2, 5, 8 survive, then the smallest unimportant id.
        assert_eq!(b.tag_ids, vec![2, 5, 8, 1]);
        assert_eq!(b.labels, vec![true, true, true, false]);
    }

    #[test]
    fn batching_splits_into_chunks() {
        let items: Vec<TaggedItem> =
            (0..5).map(|i| item(&format!("i{i}"), vec![1], vec![true])).collect();
        let batches = pad_and_batch::<f32>(&items, 2, 2, true).unwrap();
        assert_eq!(batches.len(), 3);
        assert_eq!(batches[2].bs, 1);
    }

    proptest::proptest! {
        #[test]
        fn lenient_never_drops_important_while_unimportant_remain(
            n_tags in 1usize..24,
            important in proptest::collection::vec(proptest::bool::ANY, 24),
            l in 1usize..12,
        ) {
            let tags: Vec<u32> = (1..=n_tags as u32).collect();
            let labels: Vec<bool> = important[..n_tags].to_vec();
            let it = item("x", tags, labels.clone());
            let batches = pad_and_batch::<f32>(&[it], l, 1, false).unwrap();
            let b = &batches[0];
            let kept_important = b.labels.iter().filter(|&&x| x).count();
            let total_important = labels.iter().filter(|&&x| x).count();
            // Either all important tags survived, or every kept slot is important.
            let kept_total = b.mask.count_valid();
            proptest::prop_assert!(
                kept_important == total_important.min(l) || kept_important == kept_total
            );
        }
    }
}
