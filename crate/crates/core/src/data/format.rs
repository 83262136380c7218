//! Line-oriented embedding file format and its JSON manifest sidecar.
//!
//! ```text
//! GPROTO-EMB v1 dim=<d> views=4
//! <id>\t<relation>\t<main>\t<head>\t<tail>\t<context>
//! ```
//!
//! Each view is a comma-separated list of `d` decimal floats. Blank lines are
//! ignored; records are numbered from 1 in error messages.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{Dataset, DatasetManifest, Instance, NUM_VIEWS};
use crate::error::{GpamError, Result};

pub const FORMAT_MAGIC: &str = "GPROTO-EMB";
const FORMAT_VERSION: &str = "v1";

fn parse_header(line: &str) -> Result<usize> {
    let mut parts = line.split_whitespace();
    if parts.next() != Some(FORMAT_MAGIC) {
        return Err(GpamError::Schema(format!("missing {FORMAT_MAGIC} header")));
    }
    match parts.next() {
        Some(FORMAT_VERSION) => {}
        Some(other) => {
            return Err(GpamError::Schema(format!(
                "unsupported format version {other}"
            )))
        }
        None => return Err(GpamError::Schema("header lacks a version".into())),
    }
    let mut dim = None;
    let mut views = None;
    for kv in parts {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| GpamError::Schema(format!("bad header field {kv:?}")))?;
        let parsed: usize = value
            .parse()
            .map_err(|_| GpamError::Schema(format!("bad header value {kv:?}")))?;
        match key {
            "dim" => dim = Some(parsed),
            "views" => views = Some(parsed),
            _ => return Err(GpamError::Schema(format!("unknown header field {key:?}"))),
        }
    }
    let dim = dim.ok_or_else(|| GpamError::Schema("header lacks dim".into()))?;
    let views = views.ok_or_else(|| GpamError::Schema("header lacks views".into()))?;
    if dim == 0 {
        return Err(GpamError::Schema("dim must be positive".into()));
    }
    if views != NUM_VIEWS {
        return Err(GpamError::Schema(format!(
            "expected views={NUM_VIEWS}, found views={views}"
        )));
    }
    Ok(dim)
}

fn parse_view(field: &str, record: usize, dim: usize) -> Result<Vec<f64>> {
    let values = field
        .split(',')
        .map(|s| {
            s.trim().parse::<f64>().map_err(|e| GpamError::Parse {
                record,
                message: format!("bad float {s:?}: {e}"),
            })
        })
        .collect::<Result<Vec<f64>>>()?;
    if values.len() != dim {
        return Err(GpamError::Schema(format!(
            "record {record}: view has {} components, expected dim={dim}",
            values.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(GpamError::Data(format!(
            "record {record}: non-finite component"
        )));
    }
    Ok(values)
}

/// Parses the embedding format from a string. The manifest is derived from
/// the records, with every relation in the training split.
pub fn parse_embeddings(text: &str) -> Result<Dataset> {
    let mut lines = text.lines();
    let header = loop {
        match lines.next() {
            None => return Err(GpamError::Schema("empty input: no header".into())),
            Some(l) if l.trim().is_empty() => continue,
            Some(l) => break l,
        }
    };
    let dim = parse_header(header)?;
    let mut instances = Vec::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let record = instances.len() + 1;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 + NUM_VIEWS {
            return Err(GpamError::Parse {
                record,
                message: format!(
                    "expected {} tab-separated fields, found {}",
                    2 + NUM_VIEWS,
                    fields.len()
                ),
            });
        }
        if fields[0].is_empty() || fields[1].is_empty() {
            return Err(GpamError::Parse {
                record,
                message: "empty id or relation".into(),
            });
        }
        let views = [
            parse_view(fields[2], record, dim)?,
            parse_view(fields[3], record, dim)?,
            parse_view(fields[4], record, dim)?,
            parse_view(fields[5], record, dim)?,
        ];
        instances.push(Instance::new(fields[0], fields[1], views));
    }
    let manifest = DatasetManifest::from_instances(dim, &instances);
    Ok(Dataset {
        manifest,
        instances,
    })
}

/// Sidecar path: `<path>.manifest.json`.
pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

/// Loads an embedding file. When a manifest sidecar exists its split
/// assignment is used after checking it against the records.
pub fn load_embeddings(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    let mut dataset = parse_embeddings(&text)?;
    let sidecar = manifest_path(path);
    if sidecar.exists() {
        let manifest = read_manifest(&sidecar)?;
        if manifest.dim != dataset.manifest.dim {
            return Err(GpamError::Schema(format!(
                "manifest dim {} disagrees with file dim {}",
                manifest.dim, dataset.manifest.dim
            )));
        }
        let mut derived: Vec<(&str, usize)> = dataset
            .manifest
            .relations
            .iter()
            .map(|r| (r.name.as_str(), r.count))
            .collect();
        let mut listed: Vec<(&str, usize)> = manifest
            .relations
            .iter()
            .map(|r| (r.name.as_str(), r.count))
            .collect();
        derived.sort();
        listed.sort();
        if derived != listed {
            return Err(GpamError::Schema(
                "manifest relation counts disagree with embedding records".into(),
            ));
        }
        dataset.manifest = manifest;
    }
    Ok(dataset)
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(path)?)?;
    manifest.validate()?;
    Ok(manifest)
}

pub fn write_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(manifest)? + "\n")?;
    Ok(())
}

/// Serialises instances in the embedding format.
pub fn format_embeddings(dim: usize, instances: &[Instance]) -> String {
    let mut out = format!("{FORMAT_MAGIC} {FORMAT_VERSION} dim={dim} views={NUM_VIEWS}\n");
    for inst in instances {
        out.push_str(&inst.id);
        out.push('\t');
        out.push_str(&inst.label);
        for view in &inst.views {
            out.push('\t');
            for (i, v) in view.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                // `Display` for f64 prints the shortest representation that round-trips.
                let _ = write!(out, "{v}");
            }
        }
        out.push('\n');
    }
    out
}

/// Writes the embedding file and its manifest sidecar.
pub fn write_embeddings(path: &Path, dataset: &Dataset) -> Result<()> {
    for inst in &dataset.instances {
        inst.validate()?;
        if inst.dim() != dataset.manifest.dim {
            return Err(GpamError::Schema(format!(
                "instance {} has dim {}, manifest says {}",
                inst.id,
                inst.dim(),
                dataset.manifest.dim
            )));
        }
        if inst.id.contains(['\t', '\n']) || inst.label.contains(['\t', '\n']) {
            return Err(GpamError::Input(format!(
                "instance {}: id and relation may not contain tabs or newlines",
                inst.id
            )));
        }
    }
    fs::write(
        path,
        format_embeddings(dataset.manifest.dim, &dataset.instances),
    )?;
    write_manifest(&manifest_path(path), &dataset.manifest)
}
