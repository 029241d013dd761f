//! Dataset directory format.
//!
//! ```text
//! <dir>/dataset.json          metadata (schema version, tag, classes, dims, style)
//! <dir>/annotations.jsonl     one record per image, in dataset order
//! <dir>/images/<name>.png     8-bit RGB, lossless
//! ```

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ClassId, Dataset, DatasetItem, DomainTag, FullAnnotation, Instance, Provenance, WeakAnnotation};
use crate::error::{Error, Result};
use crate::geom::BoundingBox;
use crate::image::{write_file, RgbImage};
use crate::toyworld::{SceneSpec, StyleParams};

pub const SCHEMA_VERSION: u32 = 1;
pub const METADATA_FILE: &str = "dataset.json";
pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const IMAGES_DIR: &str = "images";

#[derive(Serialize, Deserialize)]
struct Metadata {
    schema_version: u32,
    tag: DomainTag,
    class_names: Vec<String>,
    width: usize,
    height: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    style: Option<StyleParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<Provenance>,
    num_items: usize,
}

#[derive(Serialize, Deserialize)]
struct DiskInstance {
    bbox: [f64; 4],
    class: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    schema_version: u32,
    file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    full: Option<Vec<DiskInstance>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weak: Option<WeakAnnotation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hidden: Option<Vec<DiskInstance>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scene: Option<SceneSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    render_seed: Option<u64>,
}

fn to_disk(ann: &FullAnnotation) -> Vec<DiskInstance> {
    ann.instances
        .iter()
        .map(|i| DiskInstance {
            bbox: i.bbox.to_array(),
            class: i.class.get(),
        })
        .collect()
}

fn from_disk(v: Vec<DiskInstance>, num_classes: usize) -> Result<FullAnnotation> {
    let instances = v
        .into_iter()
        .map(|d| {
            let bbox = BoundingBox::new(d.bbox[0], d.bbox[1], d.bbox[2], d.bbox[3])
                .map_err(|e| Error::validation(e.to_string()))?;
            Ok(Instance::new(bbox, ClassId::checked(d.class, num_classes)?))
        })
        .collect::<Result<_>>()?;
    Ok(FullAnnotation::new(instances))
}

/// Write `ds` to `dir`, creating it if needed. Output is byte-deterministic.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    ds.validate()?;
    fs::create_dir_all(dir.join(IMAGES_DIR))?;
    let meta = Metadata {
        schema_version: SCHEMA_VERSION,
        tag: ds.tag,
        class_names: ds.class_names.clone(),
        width: ds.width,
        height: ds.height,
        style: ds.style.clone(),
        provenance: ds.provenance.clone(),
        num_items: ds.items.len(),
    };
    write_file(&dir.join(METADATA_FILE), serde_json::to_string_pretty(&meta)?.as_bytes())?;

    let mut lines = String::new();
    for item in &ds.items {
        let file = format!("{IMAGES_DIR}/{}.png", item.name);
        item.image.save_png(&dir.join(&file))?;
        let rec = Record {
            schema_version: SCHEMA_VERSION,
            file,
            full: item.full.as_ref().map(to_disk),
            weak: item.weak.clone(),
            hidden: item.hidden.as_ref().map(to_disk),
            scene: item.scene.clone(),
            render_seed: item.render_seed,
        };
        lines.push_str(&serde_json::to_string(&rec)?);
        lines.push('\n');
    }
    write_file(&dir.join(ANNOTATIONS_FILE), lines.as_bytes())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta_path = dir.join(METADATA_FILE);
    if !meta_path.exists() {
        return Err(Error::MissingArtifact(meta_path));
    }
    let meta: Metadata = serde_json::from_slice(&fs::read(&meta_path)?).map_err(|e| Error::Parse {
        path: meta_path.clone(),
        line: e.line(),
        message: e.to_string(),
    })?;
    if meta.schema_version != SCHEMA_VERSION {
        return Err(Error::Parse {
            path: meta_path,
            line: 1,
            message: format!("unsupported schema version {}", meta.schema_version),
        });
    }
    let c = meta.class_names.len();
    let mut ds = Dataset::new(meta.tag, meta.class_names, meta.width, meta.height);
    ds.style = meta.style;
    ds.provenance = meta.provenance;

    let ann_path = dir.join(ANNOTATIONS_FILE);
    let reader = BufReader::new(fs::File::open(&ann_path)?);
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: ann_path.clone(),
            line: lineno,
            message,
        };
        let rec: Record = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if rec.schema_version != SCHEMA_VERSION {
            return Err(parse_err(format!("unsupported schema version {}", rec.schema_version)));
        }
        let name = rec
            .file
            .strip_prefix(&format!("{IMAGES_DIR}/"))
            .and_then(|f| f.strip_suffix(".png"))
            .ok_or_else(|| parse_err(format!("unexpected image path {}", rec.file)))?
            .to_string();
        let at_line = |e: Error| Error::validation(format!("{}:{lineno}: {e}", ann_path.display()));
        let image = RgbImage::load_png(&dir.join(&rec.file))?;
        let mut item = DatasetItem::new(name, image);
        item.full = rec.full.map(|v| from_disk(v, c)).transpose().map_err(at_line)?;
        item.hidden = rec.hidden.map(|v| from_disk(v, c)).transpose().map_err(at_line)?;
        item.weak = rec.weak;
        item.scene = rec.scene;
        item.render_seed = rec.render_seed;
        ds.items.push(item);
    }
    if ds.items.len() != meta.num_items {
        return Err(Error::validation(format!(
            "metadata declares {} items, annotations hold {}",
            meta.num_items,
            ds.items.len()
        )));
    }
    ds.validate()?;
    Ok(ds)
}
