//! Dataset records and the line-delimited index format.
//!
//! One record per line:
//!
//! ```text
//! <image_path>|<width>|<height>|<source>|<region>(;<region>)*
//! region := <kind>:<x0>,<y0>,<x1>,<y1>:<tok>( <tok>)*
//! ```
//!
//! `source` is `natural` or `document`; `kind` is `local` or `global`.
//! Captions are space-separated token ids and may be empty (curated indexes
//! carry boxes only). A record with no regions ends with an empty final
//! field. Image paths may not contain `|`, `;`, `:` or newlines. Box
//! coordinates round-trip exactly through their shortest decimal form.

use crate::error::{Error, Result};
use crate::geom::BoxF;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SourceTag {
    Natural,
    Document,
}

impl SourceTag {
    fn as_str(self) -> &'static str {
        match self {
            SourceTag::Natural => "natural",
            SourceTag::Document => "document",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegionKind {
    Local,
    Global,
}

impl RegionKind {
    fn as_str(self) -> &'static str {
        match self {
            RegionKind::Local => "local",
            RegionKind::Global => "global",
        }
    }
}

/// A captioned box. Global regions span the full image.
#[derive(Clone, Debug, PartialEq)]
pub struct Region {
    pub bbox: BoxF,
    /// Token ids; empty only in curated (caption-less) indexes.
    pub caption: Vec<u16>,
    pub kind: RegionKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRecord {
    /// Path relative to the index file.
    pub image_path: String,
    pub width: usize,
    pub height: usize,
    pub source: SourceTag,
    pub regions: Vec<Region>,
}

impl DatasetRecord {
    /// Structural invariants checked on load: boxes ordered and in-bounds.
    pub fn validate(&self) -> Result<()> {
        for r in &self.regions {
            if !r.bbox.in_bounds(self.width as f64, self.height as f64) {
                return Err(Error::Data(format!(
                    "{}: region box ({}, {}, {}, {}) outside {}x{}",
                    self.image_path, r.bbox.x0, r.bbox.y0, r.bbox.x1, r.bbox.y1, self.width, self.height
                )));
            }
        }
        Ok(())
    }

    pub fn local_regions(&self) -> impl Iterator<Item = (usize, &Region)> {
        self.regions
            .iter()
            .enumerate()
            .filter(|(_, r)| r.kind == RegionKind::Local)
    }

    pub fn global_region(&self) -> Option<usize> {
        self.regions.iter().position(|r| r.kind == RegionKind::Global)
    }
}

fn format_region(r: &Region) -> String {
    let caption = r
        .caption
        .iter()
        .map(u16::to_string)
        .collect::<Vec<_>>()
        .join(" ");
    format!(
        "{}:{},{},{},{}:{}",
        r.kind.as_str(),
        r.bbox.x0,
        r.bbox.y0,
        r.bbox.x1,
        r.bbox.y1,
        caption
    )
}

pub fn format_record(rec: &DatasetRecord) -> Result<String> {
    if rec
        .image_path
        .contains(|c| c == '|' || c == ';' || c == ':' || c == '\n')
    {
        return Err(Error::Argument(format!(
            "image path '{}' contains a reserved character",
            rec.image_path
        )));
    }
    let regions = rec
        .regions
        .iter()
        .map(format_region)
        .collect::<Vec<_>>()
        .join(";");
    Ok(format!(
        "{}|{}|{}|{}|{}",
        rec.image_path,
        rec.width,
        rec.height,
        rec.source.as_str(),
        regions
    ))
}

pub fn write_dataset(records: &[DatasetRecord], path: &Path) -> Result<()> {
    let mut out = String::new();
    for rec in records {
        out.push_str(&format_record(rec)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn parse_record(line: &str, path: &str, lineno: usize) -> Result<DatasetRecord> {
    let err = |msg: String| Error::Parse {
        path: path.to_string(),
        line: lineno,
        msg,
    };
    let fields: Vec<&str> = line.split('|').collect();
    if fields.len() != 5 {
        return Err(err(format!("expected 5 |-fields, got {}", fields.len())));
    }
    let width: usize = fields[1]
        .parse()
        .map_err(|_| err(format!("bad width '{}'", fields[1])))?;
    let height: usize = fields[2]
        .parse()
        .map_err(|_| err(format!("bad height '{}'", fields[2])))?;
    let source = match fields[3] {
        "natural" => SourceTag::Natural,
        "document" => SourceTag::Document,
        s => return Err(err(format!("unknown source '{s}'"))),
    };
    let mut regions = Vec::new();
    if !fields[4].is_empty() {
        for rtext in fields[4].split(';') {
            let parts: Vec<&str> = rtext.split(':').collect();
            if parts.len() != 3 {
                return Err(err(format!("region '{rtext}' needs kind:coords:caption")));
            }
            let kind = match parts[0] {
                "local" => RegionKind::Local,
                "global" => RegionKind::Global,
                s => return Err(err(format!("unknown region kind '{s}'"))),
            };
            let coords: Vec<f64> = parts[1]
                .split(',')
                .map(|c| c.parse().map_err(|_| err(format!("bad coordinate '{c}'"))))
                .collect::<Result<_>>()?;
            if coords.len() != 4 {
                return Err(err("region needs 4 coordinates".into()));
            }
            let bbox = BoxF::new(coords[0], coords[1], coords[2], coords[3]);
            if !(bbox.x0 < bbox.x1 && bbox.y0 < bbox.y1) {
                return Err(err(format!(
                    "degenerate box {},{},{},{}",
                    bbox.x0, bbox.y0, bbox.x1, bbox.y1
                )));
            }
            let caption: Vec<u16> = if parts[2].is_empty() {
                Vec::new()
            } else {
                parts[2]
                    .split(' ')
                    .map(|t| t.parse().map_err(|_| err(format!("bad token '{t}'"))))
                    .collect::<Result<_>>()?
            };
            regions.push(Region {
                bbox,
                caption,
                kind,
            });
        }
    }
    let rec = DatasetRecord {
        image_path: fields[0].to_string(),
        width,
        height,
        source,
        regions,
    };
    rec.validate().map_err(|e| err(e.to_string()))?;
    Ok(rec)
}

pub fn read_dataset(path: &Path) -> Result<Vec<DatasetRecord>> {
    let text = std::fs::read_to_string(path)?;
    let display = path.display().to_string();
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        records.push(parse_record(line, &display, i + 1)?);
    }
    Ok(records)
}
