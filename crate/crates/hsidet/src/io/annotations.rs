//! Line-oriented annotation CSV (`path,class,cx,cy,w,h`, box normalized to
//! [0,1]), detection output CSV, and run-length mask decoding.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One ground-truth box, coordinates normalized to the image extent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub path: String,
    pub class: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl AnnotationRecord {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("cx", self.cx), ("cy", self.cy), ("w", self.w), ("h", self.h)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Format(format!(
                    "annotation {name}={v} outside [0,1]"
                )));
            }
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::Format("annotation box must have positive size".into()));
        }
        Ok(())
    }
}

/// Parse annotation CSV text; errors carry 1-based line numbers.
pub fn parse_annotations(text: &str) -> Result<Vec<AnnotationRecord>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(Error::Format(format!(
                "line {}: expected 6 comma-separated fields, got {}",
                lineno + 1,
                fields.len()
            )));
        }
        let parse_f = |i: usize, name: &str| -> Result<f64> {
            fields[i].trim().parse::<f64>().map_err(|_| {
                Error::Format(format!("line {}: bad {name} '{}'", lineno + 1, fields[i]))
            })
        };
        let record = AnnotationRecord {
            path: fields[0].trim().to_string(),
            class: fields[1].trim().parse().map_err(|_| {
                Error::Format(format!("line {}: bad class '{}'", lineno + 1, fields[1]))
            })?,
            cx: parse_f(2, "cx")?,
            cy: parse_f(3, "cy")?,
            w: parse_f(4, "w")?,
            h: parse_f(5, "h")?,
        };
        record
            .validate()
            .map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1)))?;
        out.push(record);
    }
    Ok(out)
}

pub fn format_annotations(records: &[AnnotationRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.path, r.class, r.cx, r.cy, r.w, r.h
        ));
    }
    out
}

pub fn read_annotations(path: &Path) -> Result<Vec<AnnotationRecord>> {
    parse_annotations(&std::fs::read_to_string(path)?)
}

pub fn write_annotations(path: &Path, records: &[AnnotationRecord]) -> Result<()> {
    std::fs::write(path, format_annotations(records))?;
    Ok(())
}

/// One output detection row: `path,class,score,x1,y1,x2,y2` in source pixels.
pub fn format_detection_row(
    path: &str,
    class: usize,
    score: f64,
    corners: (f64, f64, f64, f64),
) -> String {
    format!(
        "{},{},{:.6},{:.2},{:.2},{:.2},{:.2}\n",
        path, class, score, corners.0, corners.1, corners.2, corners.3
    )
}

/// Tight pixel bounding box, inclusive coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelBox {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl PixelBox {
    pub fn width(&self) -> usize {
        self.x_max - self.x_min + 1
    }

    pub fn height(&self) -> usize {
        self.y_max - self.y_min + 1
    }
}

/// Decode a run-length mask ("start length" pairs, 1-indexed, column-major)
/// into the tight bounding box of its pixels. Empty input means no box.
pub fn rle_to_bbox(rle: &str, height: usize, width: usize) -> Result<Option<PixelBox>> {
    let tokens: Vec<&str> = rle.split_whitespace().collect();
    if tokens.is_empty() {
        return Ok(None);
    }
    if tokens.len() % 2 != 0 {
        return Err(Error::Format(format!(
            "rle: expected start/length pairs, got {} tokens",
            tokens.len()
        )));
    }
    let total = height * width;
    let mut bbox: Option<PixelBox> = None;
    for pair in tokens.chunks(2) {
        let start: usize = pair[0]
            .parse()
            .map_err(|_| Error::Format(format!("rle: bad start '{}'", pair[0])))?;
        let len: usize = pair[1]
            .parse()
            .map_err(|_| Error::Format(format!("rle: bad length '{}'", pair[1])))?;
        if start == 0 || len == 0 {
            return Err(Error::Format("rle: starts are 1-indexed, lengths >= 1".into()));
        }
        if start - 1 + len > total {
            return Err(Error::Format(format!(
                "rle: run {start}+{len} exceeds {height}x{width} image"
            )));
        }
        for offset in 0..len {
            let linear = start - 1 + offset;
            // Column-major: columns fill top to bottom.
            let x = linear / height;
            let y = linear % height;
            bbox = Some(match bbox {
                None => PixelBox {
                    x_min: x,
                    y_min: y,
                    x_max: x,
                    y_max: y,
                },
                Some(b) => PixelBox {
                    x_min: b.x_min.min(x),
                    y_min: b.y_min.min(y),
                    x_max: b.x_max.max(x),
                    y_max: b.y_max.max(y),
                },
            });
        }
    }
    Ok(bbox)
}
