//! Plain-text point cloud files and split manifests.
//!
//! A cloud file is one `x y z` triple per line, optionally preceded by a
//! `# label <id>` header line. A manifest lists one `path<TAB>label` entry
//! per line, paths relative to the manifest's directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::PointCloud;
use crate::error::{Error, Result};

pub fn format_cloud(cloud: &PointCloud) -> String {
    let mut s = String::with_capacity(cloud.len() * 32);
    if let Some(l) = cloud.label() {
        let _ = writeln!(s, "# label {l}");
    }
    for p in cloud.points() {
        let _ = writeln!(s, "{} {} {}", p[0], p[1], p[2]);
    }
    s
}

pub fn parse_cloud(text: &str) -> Result<PointCloud> {
    let mut label = None;
    let mut points = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if let Some(v) = rest.trim().strip_prefix("label") {
                let v = v.trim();
                label = Some(v.parse().map_err(|_| {
                    Error::Data(format!("line {}: bad label {v:?}", lineno + 1))
                })?);
            }
            continue;
        }
        let mut coords = [0f32; 3];
        let mut it = line.split_whitespace();
        for c in coords.iter_mut() {
            let tok = it
                .next()
                .ok_or_else(|| Error::Data(format!("line {}: expected 3 coordinates", lineno + 1)))?;
            *c = tok
                .parse()
                .map_err(|_| Error::Data(format!("line {}: bad coordinate {tok:?}", lineno + 1)))?;
        }
        if it.next().is_some() {
            return Err(Error::Data(format!("line {}: expected 3 coordinates", lineno + 1)));
        }
        points.push(coords);
    }
    PointCloud::new(points, label).map_err(|e| Error::Data(e.to_string()))
}

pub fn write_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    fs::write(path, format_cloud(cloud)).map_err(|e| Error::io(path, e))
}

pub fn read_cloud(path: &Path) -> Result<PointCloud> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_cloud(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: u32,
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut s = String::new();
    for e in entries {
        let _ = writeln!(s, "{}\t{}", e.path.display(), e.label);
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Reads a manifest; returned paths are resolved against its directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (p, l) = line.split_once('\t').ok_or_else(|| {
            Error::Data(format!("{}:{}: expected path<TAB>label", path.display(), lineno + 1))
        })?;
        let label = l.trim().parse().map_err(|_| {
            Error::Data(format!("{}:{}: bad label {l:?}", path.display(), lineno + 1))
        })?;
        out.push(ManifestEntry {
            path: base.join(p),
            label,
        });
    }
    Ok(out)
}
