//! Line-delimited manifest persistence and image export.
//!
//! The manifest file holds one JSON object per line. The first line is the
//! header record (`"record": "header"`) carrying the seed, geometry,
//! patients and conversion events; every following line is one visit
//! (`"record": "visit"`). Field names are listed in `docs/schema.md`.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::render::Rendered;
use super::{CohortManifest, ConversionEvent, ImageGeometry, PatientRecord, VisitRecord};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum Line {
    Header {
        schema_version: u32,
        seed: u64,
        geometry: ImageGeometry,
        patients: Vec<PatientRecord>,
        conversion_events: Vec<ConversionEvent>,
    },
    Visit(VisitRecord),
}

pub fn save_manifest(manifest: &CohortManifest, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = Line::Header {
        schema_version: SCHEMA_VERSION,
        seed: manifest.seed,
        geometry: manifest.geometry,
        patients: manifest.patients.clone(),
        conversion_events: manifest.conversion_events.clone(),
    };
    let mut write_line = |line: &Line| -> Result<()> {
        serde_json::to_writer(&mut w, line)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))
    };
    write_line(&header)?;
    for v in &manifest.visits {
        write_line(&Line::Visit(v.clone()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_manifest(path: &Path) -> Result<CohortManifest> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let corrupt = |reason: String| Error::Corrupt {
        path: path.to_path_buf(),
        reason,
    };
    let first = lines
        .next()
        .ok_or_else(|| corrupt("empty manifest".into()))?
        .map_err(|e| Error::io(path, e))?;
    let mut manifest = match serde_json::from_str::<Line>(&first)? {
        Line::Header {
            schema_version,
            seed,
            geometry,
            patients,
            conversion_events,
        } => {
            if schema_version != SCHEMA_VERSION {
                return Err(corrupt(format!("unsupported schema version {schema_version}")));
            }
            CohortManifest {
                seed,
                geometry,
                patients,
                visits: Vec::new(),
                conversion_events,
            }
        }
        Line::Visit(_) => return Err(corrupt("first record must be the header".into())),
    };
    for line in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Line>(&line)? {
            Line::Visit(v) => manifest.visits.push(v),
            Line::Header { .. } => return Err(corrupt("duplicate header record".into())),
        }
    }
    manifest.validate()?;
    Ok(manifest)
}

/// Writes `<image_id>.png` and `<image_id>.mask.png` for every visit.
pub fn write_cohort_images(dir: &Path, manifest: &CohortManifest, rendered: &[Rendered]) -> Result<()> {
    if rendered.len() != manifest.visits.len() {
        return Err(Error::Shape {
            expected: format!("{} images", manifest.visits.len()),
            actual: format!("{}", rendered.len()),
        });
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (v, r) in manifest.visits.iter().zip(rendered) {
        r.image.save_png(&dir.join(format!("{}.png", v.image_id)))?;
        r.mask.save_png(&dir.join(format!("{}.mask.png", v.image_id)))?;
    }
    Ok(())
}
