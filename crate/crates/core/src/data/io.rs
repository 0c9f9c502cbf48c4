//! Dataset, vocabulary, and image file formats.
//!
//! Datasets are UTF-8 line-delimited JSON: one item per line with
//! fields `id` (string), `tags` (array of strings), `labels` (array of
//! 0/1) and exactly one of `image` (path relative to the dataset file)
//! or `features` (cells x dim nested numeric array). Vocabulary files
//! hold one tag per line; the 1-based line number is the id.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::preprocess::RawItem;
use super::{ItemImage, TagVocabulary, TaggedItem};
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct ItemRecord {
    id: String,
    tags: Vec<String>,
    labels: Vec<u8>,
    #[serde(skip_serializing_if = "Option::is_none")]
    image: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    features: Option<Vec<Vec<f64>>>,
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse { line, message: message.into() }
}

/// Loads a dataset file. Image paths stay as references; call
/// [`materialize_images`] to decode pixels.
pub fn load_items(path: &Path, vocab: &TagVocabulary) -> Result<Vec<TaggedItem>> {
    let file = fs::File::open(path)?;
    let mut items = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let lineno = lineno + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ItemRecord = serde_json::from_str(&line)
            .map_err(|e| parse_err(lineno, format!("invalid record: {e}")))?;
        if record.labels.len() != record.tags.len() {
            return Err(parse_err(
                lineno,
                format!(
                    "field `labels` has {} entries for {} tags",
                    record.labels.len(),
                    record.tags.len()
                ),
            ));
        }
        if let Some(bad) = record.labels.iter().find(|&&l| l > 1) {
            return Err(parse_err(lineno, format!("field `labels` contains non-binary value {bad}")));
        }
        let image = match (&record.image, &record.features) {
            (Some(p), None) => ItemImage::PathRef(p.clone()),
            (None, Some(grid)) => {
                let cells = grid.len();
                let dim = grid.first().map_or(0, Vec::len);
                if cells == 0 || dim == 0 || grid.iter().any(|row| row.len() != dim) {
                    return Err(parse_err(lineno, "field `features` must be a non-empty rectangular array"));
                }
                ItemImage::Features {
                    data: grid.iter().flatten().map(|&v| v as f32).collect(),
                    cells,
                    dim,
                }
            }
            (None, None) => {
                return Err(parse_err(lineno, "record needs exactly one of `image` or `features`, has neither"))
            }
            (Some(_), Some(_)) => {
                return Err(parse_err(lineno, "record needs exactly one of `image` or `features`, has both"))
            }
        };
        let mut tags = Vec::with_capacity(record.tags.len());
        for t in &record.tags {
            tags.push(
                vocab
                    .id_of(t)
                    .ok_or_else(|| parse_err(lineno, format!("field `tags`: `{t}` not in vocabulary")))?,
            );
        }
        let labels = record.labels.iter().map(|&l| l == 1).collect();
        items.push(
            TaggedItem::new(record.id, image, tags, labels)
                .map_err(|e| parse_err(lineno, e.to_string()))?,
        );
    }
    Ok(items)
}

/// Writes a dataset file next to any PNG images it references.
/// Items holding raw pixels are written to `images/<item-id>.png`
/// relative to the output file.
pub fn save_items(items: &[TaggedItem], path: &Path, vocab: &TagVocabulary) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let mut out = fs::File::create(path)?;
    for item in items {
        let image_field = match &item.image {
            ItemImage::PathRef(p) => Some(p.clone()),
            ItemImage::Pixels { data, height, width } => {
                let rel = format!("images/{}.png", item.id);
                let png_path = dir.join(&rel);
                fs::create_dir_all(png_path.parent().expect("images dir"))?;
                write_png(&png_path, data, *height, *width)?;
                Some(rel)
            }
            ItemImage::Features { .. } | ItemImage::None => None,
        };
        let features_field = match &item.image {
            ItemImage::Features { data, cells, dim } => Some(
                (0..*cells)
                    .map(|c| data[c * dim..(c + 1) * dim].iter().map(|&v| v as f64).collect())
                    .collect::<Vec<Vec<f64>>>(),
            ),
            _ => None,
        };
        if image_field.is_none() && features_field.is_none() {
            return Err(Error::Data(format!(
                "item `{}` has no image payload to serialize",
                item.id
            )));
        }
        let mut names = Vec::with_capacity(item.tags.len());
        for &t in &item.tags {
            names.push(
                vocab
                    .name_of(t)
                    .ok_or_else(|| Error::Data(format!("tag id {t} not in vocabulary")))?
                    .to_string(),
            );
        }
        let record = ItemRecord {
            id: item.id.clone(),
            tags: names,
            labels: item.labels.iter().map(|&b| u8::from(b)).collect(),
            image: image_field,
            features: features_field,
        };
        serde_json::to_writer(&mut out, &record)
            .map_err(|e| Error::Data(format!("serializing item `{}`: {e}", item.id)))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Decodes `PathRef` images (relative to `base`) into pixel data.
pub fn materialize_images(items: &mut [TaggedItem], base: &Path) -> Result<()> {
    for item in items {
        if let ItemImage::PathRef(rel) = &item.image {
            let full = base.join(rel);
            let (data, height, width) = read_png(&full)
                .map_err(|e| Error::Data(format!("item `{}`: loading `{rel}`: {e}", item.id)))?;
            item.image = ItemImage::Pixels { data, height, width };
        }
    }
    Ok(())
}

fn write_png(path: &Path, data: &[f32], height: usize, width: usize) -> Result<()> {
    let mut img = image::RgbImage::new(width as u32, height as u32);
    for y in 0..height {
        for x in 0..width {
            let px = |ch: usize| (data[ch * height * width + y * width + x] * 255.0).round() as u8;
            img.put_pixel(x as u32, y as u32, image::Rgb([px(0), px(1), px(2)]));
        }
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Data(format!("writing `{}`: {e}", path.display())))
}

fn read_png(path: &Path) -> Result<(Vec<f32>, usize, usize)> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("decoding `{}`: {e}", path.display())))?
        .to_rgb8();
    let (width, height) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0f32; 3 * height * width];
    for y in 0..height {
        for x in 0..width {
            let p = img.get_pixel(x as u32, y as u32);
            for ch in 0..3 {
                data[ch * height * width + y * width + x] = p[ch] as f32 / 255.0;
            }
        }
    }
    Ok((data, height, width))
}

/// One tag per line; the 1-based line number is the id.
pub fn save_vocab(vocab: &TagVocabulary, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut out = fs::File::create(path)?;
    for name in vocab.names() {
        writeln!(out, "{name}")?;
    }
    Ok(())
}

pub fn load_vocab(path: &Path) -> Result<TagVocabulary> {
    let file = fs::File::open(path)?;
    let mut names = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let name = line.trim();
        if name.is_empty() {
            return Err(parse_err(lineno + 1, "empty vocabulary line"));
        }
        names.push(name.to_string());
    }
    TagVocabulary::from_names(names)
}

#[derive(Debug, Serialize, Deserialize)]
struct RawRecord {
    id: String,
    tags: Vec<String>,
    concepts: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    image: Option<String>,
}

/// Loads raw pre-annotation records (tags + ground-truth concepts).
pub fn load_raw_items(path: &Path) -> Result<Vec<RawItem>> {
    let file = fs::File::open(path)?;
    let mut items = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: RawRecord = serde_json::from_str(&line)
            .map_err(|e| parse_err(lineno + 1, format!("invalid raw record: {e}")))?;
        items.push(RawItem { id: r.id, tags: r.tags, concepts: r.concepts, image: r.image });
    }
    Ok(items)
}

/// Writes raw records (used to build fixtures and synthetic corpora).
pub fn save_raw_items(items: &[RawItem], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut out = fs::File::create(path)?;
    for item in items {
        let record = RawRecord {
            id: item.id.clone(),
            tags: item.tags.clone(),
            concepts: item.concepts.clone(),
            image: item.image.clone(),
        };
        serde_json::to_writer(&mut out, &record)
            .map_err(|e| Error::Data(format!("serializing raw `{}`: {e}", item.id)))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{generate_synthetic, SyntheticConfig};

    #[test]
    fn dataset_roundtrip_preserves_structure() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SyntheticConfig { items: 6, vocab_size: 20, ..Default::default() };
        let (items, vocab) = generate_synthetic(&cfg).unwrap();
        let path = dir.path().join("data.jsonl");
        save_items(&items, &path, &vocab).unwrap();
        let mut loaded = load_items(&path, &vocab).unwrap();
        materialize_images(&mut loaded, dir.path()).unwrap();
        assert_eq!(loaded.len(), items.len());
        for (a, b) in items.iter().zip(&loaded) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.tags, b.tags);
            assert_eq!(a.labels, b.labels);
            // PNG roundtrip is exact for 8-bit-quantized pixels.
            assert_eq!(a.image, b.image);
        }
    }

    #[test]
    fn features_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = TagVocabulary::from_names(["a", "b"].map(String::from)).unwrap();
        let item = TaggedItem::new(
            "f1".into(),
            ItemImage::Features { data: vec![0.25, -1.5, 3.0, 0.125], cells: 2, dim: 2 },
            vec![1, 2],
            vec![true, false],
        )
        .unwrap();
        let path = dir.path().join("feat.jsonl");
        save_items(&[item.clone()], &path, &vocab).unwrap();
        let loaded = load_items(&path, &vocab).unwrap();
        assert_eq!(loaded[0], item);
    }

    #[test]
    fn missing_labels_field_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        fs::write(&path, "{\"id\":\"ok\",\"tags\":[\"a\"],\"labels\":[1],\"features\":[[0.0]]}\n{\"id\":\"x\",\"tags\":[\"a\"],\"features\":[[0.0]]}\n").unwrap();
        let vocab = TagVocabulary::from_names(["a"].map(String::from)).unwrap();
        let err = load_items(&path, &vocab).unwrap_err();
        match err {
            Error::Parse { line, message } => {
                assert_eq!(line, 2);
                assert!(message.contains("labels"), "{message}");
            }
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn empty_file_is_empty_list() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        fs::write(&path, "").unwrap();
        let vocab = TagVocabulary::from_names(["a"].map(String::from)).unwrap();
        assert!(load_items(&path, &vocab).unwrap().is_empty());
    }

    #[test]
    fn vocab_file_line_number_is_id() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let vocab = TagVocabulary::from_names(["sky", "sea", "sun"].map(String::from)).unwrap();
        save_vocab(&vocab, &path).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "sky\nsea\nsun\n");
        let loaded = load_vocab(&path).unwrap();
        assert_eq!(loaded, vocab);
        assert_eq!(loaded.id_of("sea"), Some(2));
    }
}
