//! Line-delimited JSON dataset manifests.
//!
//! Line 1 is a header declaring the image shape and the split of every
//! class. Each following line is one example:
//!
//! ```text
//! {"format":"vsalign-manifest","version":1,"image_shape":{"height":8,"width":8,"channels":1},"splits":{"base":[0,1],"val":[2],"novel":[3]},"sidecar":"images.bin"}
//! {"class_id":0,"split":"base","payload":{"sidecar":0}}
//! {"class_id":3,"split":"novel","payload":{"path":"img/3_0.png"}}
//! ```
//!
//! Payloads are either an index into the binary sidecar (raw little-endian
//! `f64` images) or an image file path relative to the manifest.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetSplit, ImageShape, LabeledExample, SplitKind};
use crate::error::{Error, Result};
use crate::ClassId;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const SIDECAR_FILE: &str = "images.bin";

const FORMAT: &str = "vsalign-manifest";
const VERSION: u32 = 1;
const SIDECAR_MAGIC: &[u8; 8] = b"VSAIMG01";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    image_shape: ImageShape,
    splits: SplitLists,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sidecar: Option<String>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SplitLists {
    #[serde(default)]
    base: Vec<ClassId>,
    #[serde(default)]
    val: Vec<ClassId>,
    #[serde(default)]
    novel: Vec<ClassId>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    class_id: ClassId,
    split: SplitKind,
    payload: Payload,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Payload {
    Sidecar(usize),
    Path(String),
}

/// Loads and validates a manifest. Every class must hold at least
/// `min_examples_per_class` examples (typically `k_shot + q_per_class`).
pub fn load_manifest(path: &Path, min_examples_per_class: usize) -> Result<Dataset> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let malformed = |line: usize, message: String| Error::Malformed {
        path: path.to_path_buf(),
        line,
        message,
    };
    let base_dir = path.parent().unwrap_or(Path::new("."));

    let mut lines = BufReader::new(file).lines().enumerate();
    let header: Header = loop {
        match lines.next() {
            None => return Err(malformed(1, "empty manifest".into())),
            Some((i, line)) => {
                let line = line.map_err(|e| Error::io(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                break serde_json::from_str(&line)
                    .map_err(|e| malformed(i + 1, format!("bad header: {e}")))?;
            }
        }
    };
    if header.format != FORMAT {
        return Err(malformed(1, format!("unknown format `{}`", header.format)));
    }
    if header.version != VERSION {
        return Err(malformed(
            1,
            format!("unsupported manifest version {}", header.version),
        ));
    }
    let shape = header.image_shape;
    if shape.is_empty() {
        return Err(malformed(1, format!("empty image shape {shape}")));
    }

    let mut class_split: BTreeMap<ClassId, SplitKind> = BTreeMap::new();
    for (kind, list) in [
        (SplitKind::Base, &header.splits.base),
        (SplitKind::Val, &header.splits.val),
        (SplitKind::Novel, &header.splits.novel),
    ] {
        for &c in list {
            if let Some(prev) = class_split.insert(c, kind) {
                if prev != kind {
                    return Err(Error::SplitOverlap {
                        path: path.to_path_buf(),
                        line: 1,
                        class_id: c,
                        first: prev.to_string(),
                        second: kind.to_string(),
                    });
                }
            }
        }
    }

    let sidecar = match &header.sidecar {
        Some(name) => Some(read_sidecar(&base_dir.join(name), shape)?),
        None => None,
    };

    let mut examples = Vec::new();
    let mut first_line: BTreeMap<ClassId, usize> = BTreeMap::new();
    for (i, line) in lines {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record =
            serde_json::from_str(&line).map_err(|e| malformed(line_no, e.to_string()))?;
        match class_split.get(&rec.class_id) {
            None => {
                return Err(malformed(
                    line_no,
                    format!("class {} is not declared in the header", rec.class_id),
                ))
            }
            Some(&declared) if declared != rec.split => {
                return Err(Error::SplitOverlap {
                    path: path.to_path_buf(),
                    line: line_no,
                    class_id: rec.class_id,
                    first: declared.to_string(),
                    second: rec.split.to_string(),
                })
            }
            _ => {}
        }
        let image = match rec.payload {
            Payload::Sidecar(idx) => {
                let images = sidecar.as_ref().ok_or_else(|| {
                    malformed(line_no, "sidecar payload but header names no sidecar".into())
                })?;
                images.get(idx).cloned().ok_or_else(|| {
                    malformed(
                        line_no,
                        format!("sidecar index {idx} out of range ({} images)", images.len()),
                    )
                })?
            }
            Payload::Path(rel) => read_image_file(&base_dir.join(&rel), shape)
                .map_err(|e| malformed(line_no, format!("{rel}: {e}")))?,
        };
        if let Some(v) = image.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(malformed(line_no, format!("pixel value {v} outside [0, 1]")));
        }
        first_line.entry(rec.class_id).or_insert(line_no);
        examples.push(LabeledExample {
            image,
            class_id: rec.class_id,
        });
    }

    let split = DatasetSplit::new(
        header.splits.base,
        header.splits.val,
        header.splits.novel,
    )?;
    let dataset = Dataset::new(shape, examples, split)?;
    for &class_id in class_split.keys() {
        let have = dataset.examples_of(class_id).len();
        if have < min_examples_per_class {
            return Err(Error::InsufficientExamples {
                class_id,
                have,
                need: min_examples_per_class,
                line: first_line.get(&class_id).copied().unwrap_or(1),
            });
        }
    }
    Ok(dataset)
}

/// Writes `dataset` as a manifest plus binary sidecar into `dir` and returns
/// the manifest path. Output bytes are a pure function of the dataset.
pub fn write_manifest(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let split = dataset.split();
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        image_shape: dataset.shape(),
        splits: SplitLists {
            base: split.classes(SplitKind::Base).iter().copied().collect(),
            val: split.classes(SplitKind::Val).iter().copied().collect(),
            novel: split.classes(SplitKind::Novel).iter().copied().collect(),
        },
        sidecar: Some(SIDECAR_FILE.into()),
    };
    let mut text = serde_json::to_string(&header).map_err(|e| Error::Serde(e.to_string()))?;
    text.push('\n');
    let mut blob = Vec::with_capacity(24 + dataset.len() * dataset.shape().len() * 8);
    blob.extend_from_slice(SIDECAR_MAGIC);
    blob.extend_from_slice(&(dataset.len() as u64).to_le_bytes());
    blob.extend_from_slice(&(dataset.shape().len() as u64).to_le_bytes());
    for (i, ex) in dataset.examples().iter().enumerate() {
        let kind = split
            .kind_of(ex.class_id)
            .expect("dataset examples always belong to a split");
        let rec = Record {
            class_id: ex.class_id,
            split: kind,
            payload: Payload::Sidecar(i),
        };
        text.push_str(&serde_json::to_string(&rec).map_err(|e| Error::Serde(e.to_string()))?);
        text.push('\n');
        for v in &ex.image {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = dir.join(MANIFEST_FILE);
    write_file(&manifest, text.as_bytes())?;
    write_file(&dir.join(SIDECAR_FILE), &blob)?;
    Ok(manifest)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn read_sidecar(path: &Path, shape: ImageShape) -> Result<Vec<Vec<f64>>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Malformed {
        path: path.to_path_buf(),
        line: 0,
        message: m.to_string(),
    };
    if bytes.len() < 24 || &bytes[..8] != SIDECAR_MAGIC {
        return Err(bad("not an image sidecar"));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let per = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    if per != shape.len() {
        return Err(bad(&format!(
            "sidecar images have {per} values, header shape {shape} needs {}",
            shape.len()
        )));
    }
    if bytes.len() != 24 + count * per * 8 {
        return Err(bad("sidecar length does not match its header"));
    }
    let values: Vec<f64> = bytes[24..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(values.chunks(per.max(1)).map(<[f64]>::to_vec).collect())
}

fn read_image_file(path: &Path, shape: ImageShape) -> std::result::Result<Vec<f64>, String> {
    let img = image::open(path).map_err(|e| e.to_string())?;
    if img.height() as usize != shape.height || img.width() as usize != shape.width {
        return Err(format!(
            "image is {}x{}, expected {}x{}",
            img.height(),
            img.width(),
            shape.height,
            shape.width
        ));
    }
    let raw: Vec<u8> = match shape.channels {
        1 => img.to_luma8().into_raw(),
        3 => img.to_rgb8().into_raw(),
        c => return Err(format!("unsupported channel count {c}")),
    };
    Ok(raw.into_iter().map(|v| f64::from(v) / 255.0).collect())
}
