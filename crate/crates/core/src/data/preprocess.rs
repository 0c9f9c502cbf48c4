//! Concept-list preprocessing for NUS-WIDE-style raw annotations.
//!
//! Three rules, applied in order per item:
//!   1. keep only tags that appear in the evaluation concept list;
//!   2. drop the item unless its surviving tags cover every annotated
//!      ground-truth concept;
//!   3. drop the item if no tag survived.
//! A kept tag is labeled important iff it is one of the item's
//! ground-truth concepts.

use std::collections::BTreeSet;

use super::{ItemImage, TagVocabulary, TaggedItem};
use crate::error::Result;

/// One raw annotation record before preprocessing.
#[derive(Debug, Clone)]
pub struct RawItem {
    pub id: String,
    pub tags: Vec<String>,
    /// Annotated ground-truth concepts.
    pub concepts: Vec<String>,
    pub image: Option<String>,
}

/// Why an item did not survive preprocessing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dropped {
    pub id: String,
    pub reason: String,
}

/// Applies the three preprocessing rules. Returns surviving items
/// (tags mapped into the concept vocabulary) and a drop log; malformed
/// records are rejected individually, never aborting the run.
pub fn preprocess_nuswide(
    raw: &[RawItem],
    concepts: &TagVocabulary,
) -> Result<(Vec<TaggedItem>, Vec<Dropped>)> {
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for item in raw {
        match preprocess_one(item, concepts)? {
            Ok(t) => kept.push(t),
            Err(reason) => dropped.push(Dropped { id: item.id.clone(), reason }),
        }
    }
    Ok((kept, dropped))
}

fn preprocess_one(
    item: &RawItem,
    concepts: &TagVocabulary,
) -> Result<std::result::Result<TaggedItem, String>> {
    let mut ground_truth = BTreeSet::new();
    for c in &item.concepts {
        match concepts.id_of(c) {
            Some(id) => {
                ground_truth.insert(id);
            }
            None => {
                return Ok(Err(format!("ground-truth concept `{c}` not in concept list")));
            }
        }
    }

    // Rule 1: keep only tags inside the concept list (deduplicated).
    let mut surviving = Vec::new();
    let mut seen = BTreeSet::new();
    for t in &item.tags {
        if let Some(id) = concepts.id_of(t) {
            if seen.insert(id) {
                surviving.push(id);
            }
        }
    }

    // Rule 2: surviving tags must cover every annotated concept.
    if !ground_truth.iter().all(|id| seen.contains(id)) {
        return Ok(Err("surviving tags do not cover the annotated concepts".into()));
    }
    // Rule 3: something must survive.
    if surviving.is_empty() {
        return Ok(Err("no tags left after concept filtering".into()));
    }

    let labels = surviving.iter().map(|id| ground_truth.contains(id)).collect();
    let image = match &item.image {
        Some(p) => ItemImage::PathRef(p.clone()),
        None => ItemImage::None,
    };
    let mut tagged = TaggedItem::new(item.id.clone(), image, surviving, labels)?;
    tagged.ground_truth_concepts = Some(ground_truth);
    Ok(Ok(tagged))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn concepts() -> TagVocabulary {
        TagVocabulary::from_names(
            ["sky", "water", "person", "animal", "grass"].map(String::from),
        )
        .unwrap()
    }

    fn raw(id: &str, tags: &[&str], gt: &[&str]) -> RawItem {
        RawItem {
            id: id.into(),
            tags: tags.iter().map(|s| s.to_string()).collect(),
            concepts: gt.iter().map(|s| s.to_string()).collect(),
            image: None,
        }
    }

    #[test]
    fn keeps_item_with_noise_tag_removed_and_labels_assigned() {
        let v = concepts();
        let (kept, dropped) =
            preprocess_nuswide(&[raw("a", &["sky", "xyz"], &["sky"])], &v).unwrap();
        assert!(dropped.is_empty());
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].tags, vec![v.id_of("sky").unwrap()]);
        assert_eq!(kept[0].labels, vec![true]);
    }

    #[test]
    fn drops_item_whose_tags_cannot_cover_ground_truth() {
        let v = concepts();
        let (kept, dropped) =
            preprocess_nuswide(&[raw("b", &["sky"], &["sky", "water"])], &v).unwrap();
        assert!(kept.is_empty());
        assert_eq!(dropped.len(), 1);
        assert!(dropped[0].reason.contains("cover"));
    }

    #[test]
    fn drops_item_with_nothing_left() {
        let v = concepts();
        let (kept, dropped) = preprocess_nuswide(&[raw("c", &["xyz", "qqq"], &[])], &v).unwrap();
        assert!(kept.is_empty());
        assert_eq!(dropped.len(), 1);
        assert!(dropped[0].reason.contains("no tags left"));
    }

    #[test]
    fn six_item_fixture_yields_exactly_two_survivors() {
        let v = concepts();
        let fixture = vec![
            // Survives: xyz removed, sky important, grass unimportant.
            raw("keep-1", &["sky", "grass", "xyz"], &["sky"]),
            // Dropped: water not among the tags.
            raw("drop-cover", &["sky"], &["sky", "water"]),
            // Dropped: nothing survives the concept filter.
            raw("drop-empty", &["foo", "bar"], &[]),
            // Survives: person+animal important, water unimportant.
            raw("keep-2", &["person", "animal", "water", "nonsense"], &["person", "animal"]),
            // Dropped: unknown ground-truth concept is malformed.
            raw("drop-unknown-gt", &["sky"], &["skyscraper"]),
            // Dropped: tag list empty after filtering.
            raw("drop-all-noise", &["blurry", "jpeg"], &["sky"]),
        ];
        let (kept, dropped) = preprocess_nuswide(&fixture, &v).unwrap();
        assert_eq!(
            kept.iter().map(|i| i.id.as_str()).collect::<Vec<_>>(),
            vec!["keep-1", "keep-2"]
        );
        assert_eq!(dropped.len(), 4);
        let k1 = &kept[0];
        assert_eq!(k1.tags, vec![v.id_of("sky").unwrap(), v.id_of("grass").unwrap()]);
        assert_eq!(k1.labels, vec![true, false]);
        let k2 = &kept[1];
        assert_eq!(
            k2.tags,
            vec![v.id_of("person").unwrap(), v.id_of("animal").unwrap(), v.id_of("water").unwrap()]
        );
        assert_eq!(k2.labels, vec![true, true, false]);
    }

    #[test]
    fn output_invariants_hold_on_survivors() {
        let v = concepts();
        let fixture = vec![
            raw("x", &["sky", "water", "junk"], &["water"]),
            raw("y", &["animal"], &["animal"]),
        ];
        let (kept, _) = preprocess_nuswide(&fixture, &v).unwrap();
        for item in &kept {
            assert!(!item.tags.is_empty());
            let gt = item.ground_truth_concepts.as_ref().unwrap();
            for c in gt {
                assert!(item.tags.contains(c), "tags must cover ground truth");
            }
            for (t, l) in item.tags.iter().zip(&item.labels) {
                assert_eq!(*l, gt.contains(t));
            }
        }
    }
}
