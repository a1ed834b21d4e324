//! Datasets: the synthetic scene generator, vocabularies, and JSON-lines
//! annotation files with PPM images and PGM masks.

pub mod synth;
pub mod vocab;

use std::collections::HashSet;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::BiTemporalPair;
use crate::error::{Error, Result};
use crate::raster::{BinaryMask, Raster};

pub use synth::{generate, generate_parallel, GenerateOptions};
pub use vocab::Vocabulary;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub id: String,
    pub split: Split,
    pub pair: BiTemporalPair,
}

/// One line of an annotation file. Paths are relative to the image root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub id: String,
    pub img_a: String,
    pub img_b: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    pub captions: Vec<String>,
    pub split: Split,
}

pub const ANNOTATIONS: &str = "annotations.jsonl";

/// Writes `images/`, `masks/` and the annotation file under `dir`.
pub fn write_dataset(dir: &Path, instances: &[Instance]) -> Result<()> {
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let ann_path = dir.join(ANNOTATIONS);
    let file = std::fs::File::create(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
    let mut out = BufWriter::new(file);
    for inst in instances {
        let rec = AnnotationRecord {
            id: inst.id.clone(),
            img_a: format!("images/{}_a.ppm", inst.id),
            img_b: format!("images/{}_b.ppm", inst.id),
            mask: inst.pair.mask.as_ref().map(|_| format!("masks/{}.pgm", inst.id)),
            captions: inst.pair.captions.clone(),
            split: inst.split,
        };
        inst.pair.image_a.write_ppm(&dir.join(&rec.img_a))?;
        inst.pair.image_b.write_ppm(&dir.join(&rec.img_b))?;
        if let (Some(m), Some(p)) = (&inst.pair.mask, &rec.mask) {
            m.write_pgm(&dir.join(p))?;
        }
        let line = serde_json::to_string(&rec).expect("record serializes");
        writeln!(out, "{line}").map_err(|e| Error::io(&ann_path, e))?;
    }
    out.flush().map_err(|e| Error::io(&ann_path, e))
}

fn ingest<T>(id: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Ingestion(format!("record {id}: {e}")))
}

/// Reads and validates every record, keeping those in `split` if given.
pub fn load_dataset(annotations: &Path, image_root: &Path, split: Option<Split>) -> Result<Vec<Instance>> {
    let text = std::fs::read_to_string(annotations).map_err(|e| Error::io(annotations, e))?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let rec: AnnotationRecord = serde_json::from_str(line).map_err(|e| {
            let id = serde_json::from_str::<serde_json::Value>(line)
                .ok()
                .and_then(|v| v.get("id").and_then(|i| i.as_str()).map(str::to_owned))
                .unwrap_or_else(|| format!("at line {}", n + 1));
            Error::Ingestion(format!("record {id}: malformed: {e}"))
        })?;
        if !seen.insert(rec.id.clone()) {
            return Err(Error::Ingestion(format!("record {}: duplicate id", rec.id)));
        }
        if split.is_some_and(|s| s != rec.split) {
            continue;
        }
        let a = ingest(&rec.id, Raster::read_ppm(&image_root.join(&rec.img_a)))?;
        let b = ingest(&rec.id, Raster::read_ppm(&image_root.join(&rec.img_b)))?;
        let mut pair = ingest(&rec.id, BiTemporalPair::new(a, b))?;
        if let Some(m) = &rec.mask {
            let mask = ingest(&rec.id, BinaryMask::read_pgm(&image_root.join(m)))?;
            pair = ingest(&rec.id, pair.with_mask(mask))?;
        }
        pair.captions = rec.captions;
        out.push(Instance { id: rec.id, split: rec.split, pair });
    }
    Ok(out)
}
