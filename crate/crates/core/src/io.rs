//! Text formats: detection CSV and annotation JSON lines.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::detection::{BoundingBox, Detection};
use crate::froc::Annotation;
use crate::{Error, Result};

pub const DETECTION_CSV_HEADER: &str = "image_id,x_min,y_min,x_max,y_max,score";

/// One `image_id,x_min,y_min,x_max,y_max,score` line per detection, after a header line.
pub fn write_detections_csv<W: Write>(out: &mut W, detections: &[Detection]) -> std::io::Result<()> {
    writeln!(out, "{DETECTION_CSV_HEADER}")?;
    for d in detections {
        let b = &d.bbox;
        writeln!(
            out,
            "{},{},{},{},{},{}",
            d.image_id, b.x_min, b.y_min, b.x_max, b.y_max, d.score
        )?;
    }
    Ok(())
}

/// Parses the detection CSV; the header line is optional.
pub fn parse_detections_csv(text: &str) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (no == 0 && line == DETECTION_CSV_HEADER) {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(Error::Parse(format!(
                "line {}: expected 6 comma-separated fields, got {}",
                no + 1,
                fields.len()
            )));
        }
        let num = |k: usize| {
            fields[k].trim().parse::<f64>().map_err(|_| {
                Error::Parse(format!("line {}: field {} `{}` is not a number", no + 1, k + 1, fields[k]))
            })
        };
        let bbox = BoundingBox::new(num(1)?, num(2)?, num(3)?, num(4)?)
            .map_err(|e| Error::Parse(format!("line {}: {e}", no + 1)))?;
        let score = num(5)?;
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::Parse(format!("line {}: score {score} outside [0, 1]", no + 1)));
        }
        out.push(Detection {
            image_id: fields[0].trim().to_string(),
            bbox,
            score,
        });
    }
    Ok(out)
}

pub fn read_detections_csv(path: impl AsRef<Path>) -> Result<Vec<Detection>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_detections_csv(&text).map_err(|e| match e {
        Error::Parse(msg) => Error::Parse(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn save_detections_csv(path: impl AsRef<Path>, detections: &[Detection]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_detections_csv(&mut buf, detections).expect("writing to memory");
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn write_annotations_jsonl<W: Write>(out: &mut W, annotations: &[Annotation]) -> std::io::Result<()> {
    for a in annotations {
        serde_json::to_writer(&mut *out, a)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn parse_annotations_jsonl(text: &str) -> Result<Vec<Annotation>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(no, l)| {
            let a: Annotation = serde_json::from_str(l)
                .map_err(|e| Error::Parse(format!("line {}: {e}", no + 1)))?;
            if !(a.diameter_mm.is_finite() && a.diameter_mm > 0.0) {
                return Err(Error::Parse(format!(
                    "line {}: diameter_mm must be positive",
                    no + 1
                )));
            }
            Ok(a)
        })
        .collect()
}

pub fn read_annotations_jsonl(path: impl AsRef<Path>) -> Result<Vec<Annotation>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations_jsonl(&text).map_err(|e| match e {
        Error::Parse(msg) => Error::Parse(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn save_annotations_jsonl(path: impl AsRef<Path>, annotations: &[Annotation]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_annotations_jsonl(&mut buf, annotations).expect("writing to memory");
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_roundtrip_and_errors() {
        let d = vec![Detection {
            image_id: "test_0001".into(),
            bbox: BoundingBox::new(1.5, 2.0, 10.25, 12.0).unwrap(),
            score: 0.875,
        }];
        let mut buf = Vec::new();
        write_detections_csv(&mut buf, &d).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "image_id,x_min,y_min,x_max,y_max,score\ntest_0001,1.5,2,10.25,12,0.875\n");
        assert_eq!(parse_detections_csv(&text).unwrap(), d);
        assert!(parse_detections_csv("a,1,2,3").is_err());
        assert!(parse_detections_csv("a,1,2,3,4,1.5").is_err());
        assert!(parse_detections_csv("a,1,2,0,4,0.5").is_err());
    }

    #[test]
    fn jsonl_rejects_bad_diameter() {
        let ok = r#"{"image_id":"a","box":[0,0,4,4],"diameter_mm":3.2}"#;
        assert_eq!(parse_annotations_jsonl(ok).unwrap().len(), 1);
        let bad = r#"{"image_id":"a","box":[0,0,4,4],"diameter_mm":0}"#;
        assert!(parse_annotations_jsonl(bad).is_err());
    }
}
