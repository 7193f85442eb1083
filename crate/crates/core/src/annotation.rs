//! JSONL annotation ingestion, box granularity selection and label maps.
//!
//! One record per line:
//!
//! ```text
//! {"image_path": "img/0001.png",
//!  "char_boxes": [[[x,y],[x,y],[x,y],[x,y]], ...],
//!  "word_boxes": [[[x,y],[x,y],[x,y],[x,y]], ...],
//!  "transcriptions": ["word", ...]}
//! ```
//!
//! Vertices are ordered left-top, left-bottom, right-top, right-bottom.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{fill_spans, quad_spans, QuadBox};
use crate::raster::BinaryMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Char,
    Word,
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Granularity::Char => "char",
            Granularity::Word => "word",
        })
    }
}

impl std::str::FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "char" => Ok(Granularity::Char),
            "word" => Ok(Granularity::Word),
            other => Err(Error::Config(format!("unknown granularity {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationSet {
    pub image_path: PathBuf,
    pub char_boxes: Vec<QuadBox>,
    pub word_boxes: Vec<QuadBox>,
    pub transcriptions: Option<Vec<String>>,
}

impl AnnotationSet {
    /// Box list for the requested granularity.
    pub fn select_boxes(&self, granularity: Granularity) -> Result<&[QuadBox]> {
        let boxes = match granularity {
            Granularity::Char => &self.char_boxes,
            Granularity::Word => &self.word_boxes,
        };
        if boxes.is_empty() {
            return Err(Error::AbsentGranularity(granularity));
        }
        Ok(boxes)
    }
}

/// Parsed file plus validation counters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParsedAnnotations {
    pub records: Vec<AnnotationSet>,
    /// Boxes dropped for having the wrong vertex count, non-finite or
    /// self-intersecting coordinates.
    pub dropped_boxes: usize,
    /// Records dropped because no valid box remained.
    pub dropped_records: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawRecord {
    image_path: Option<String>,
    #[serde(default)]
    char_boxes: Vec<Vec<[f64; 2]>>,
    #[serde(default)]
    word_boxes: Vec<Vec<[f64; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    transcriptions: Option<Vec<String>>,
}

fn validate_boxes(raw: Vec<Vec<[f64; 2]>>, dropped: &mut usize) -> Vec<QuadBox> {
    raw.into_iter()
        .filter_map(|pts| {
            let quad = <[[f64; 2]; 4]>::try_from(pts).ok().map(QuadBox::from_array);
            match quad {
                Some(q) if q.is_finite() && q.is_simple() => Some(q),
                _ => {
                    *dropped += 1;
                    None
                }
            }
        })
        .collect()
}

/// Parses JSONL text; `origin` is only used in error messages.
pub fn parse_annotations_str(text: &str, origin: &Path) -> Result<ParsedAnnotations> {
    let mut out = ParsedAnnotations::default();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        let image_path = raw.image_path.ok_or_else(|| Error::Parse {
            path: origin.to_path_buf(),
            line: line_no,
            message: "record is missing image_path".into(),
        })?;
        let char_boxes = validate_boxes(raw.char_boxes, &mut out.dropped_boxes);
        let word_boxes = validate_boxes(raw.word_boxes, &mut out.dropped_boxes);
        if char_boxes.is_empty() && word_boxes.is_empty() {
            out.dropped_records += 1;
            continue;
        }
        out.records.push(AnnotationSet {
            image_path: PathBuf::from(image_path),
            char_boxes,
            word_boxes,
            transcriptions: raw.transcriptions,
        });
    }
    if out.dropped_boxes > 0 {
        log::warn!(
            "{}: dropped {} invalid boxes ({} records left empty)",
            origin.display(),
            out.dropped_boxes,
            out.dropped_records
        );
    }
    Ok(out)
}

pub fn parse_annotations(path: impl AsRef<Path>) -> Result<ParsedAnnotations> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading annotations {}", path.display()), e))?;
    parse_annotations_str(&text, path)
}

fn to_raw(set: &AnnotationSet) -> RawRecord {
    let conv = |b: &[QuadBox]| b.iter().map(|q| q.to_array().to_vec()).collect();
    RawRecord {
        image_path: Some(set.image_path.to_string_lossy().into_owned()),
        char_boxes: conv(&set.char_boxes),
        word_boxes: conv(&set.word_boxes),
        transcriptions: set.transcriptions.clone(),
    }
}

pub fn write_annotations_to(records: &[AnnotationSet], mut w: impl Write) -> Result<()> {
    for set in records {
        serde_json::to_writer(&mut w, &to_raw(set))?;
        w.write_all(b"\n")
            .map_err(|e| Error::io("writing annotations", e))?;
    }
    Ok(())
}

pub fn write_annotations(records: &[AnnotationSet], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path)
        .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut w = std::io::BufWriter::new(file);
    write_annotations_to(records, &mut w)?;
    w.flush()
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Union of the rasterized boxes.
pub fn label_map(boxes: &[QuadBox], width: usize, height: usize) -> BinaryMask {
    let mut mask = BinaryMask::zeros(width, height);
    for quad in boxes {
        fill_spans(&mut mask, &quad_spans(quad, width, height));
    }
    mask
}
