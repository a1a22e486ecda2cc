//! Comma-separated detection files: `image,x,y,w,h,class,score`.

use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;

use super::{ClassId, Detection};
use crate::error::{MitosError, Result};
use crate::proposal::BBox;

pub const DETECTION_HEADER: &str = "image,x,y,w,h,class,score";

/// Writes detections grouped by image, in the given order. Coordinates use
/// the shortest exact decimal form, scores six decimals.
pub fn write_detections<W: Write>(out: &mut W, per_image: &[(String, Vec<Detection>)]) -> std::io::Result<()> {
    writeln!(out, "{}", DETECTION_HEADER)?;
    for (image, dets) in per_image {
        for d in dets {
            writeln!(
                out,
                "{},{},{},{},{},{},{:.6}",
                image, d.bbox.x, d.bbox.y, d.bbox.w, d.bbox.h, d.class_id, d.score
            )?;
        }
    }
    Ok(())
}

pub fn save_detections(path: &Path, per_image: &[(String, Vec<Detection>)]) -> Result<()> {
    let mut buf = Vec::new();
    write_detections(&mut buf, per_image).map_err(|e| MitosError::io(path, e))?;
    std::fs::write(path, buf).map_err(|e| MitosError::io(path, e))
}

/// Parses a detection file; images keep first-appearance order.
pub fn parse_detections(text: &str, origin: &str) -> Result<IndexMap<String, Vec<Detection>>> {
    let fmt = |line: usize, msg: String| MitosError::Format {
        path: origin.to_string(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end() == DETECTION_HEADER => {}
        Some((_, h)) => return Err(fmt(1, format!("expected header {:?}, found {:?}", DETECTION_HEADER, h))),
        None => return Ok(IndexMap::new()),
    }
    let mut out: IndexMap<String, Vec<Detection>> = IndexMap::new();
    for (i, line) in lines {
        let ln = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(fmt(ln, format!("expected 7 fields, found {}", f.len())));
        }
        let num = |s: &str, what: &str| s.trim().parse::<f64>().map_err(|_| fmt(ln, format!("bad {} {:?}", what, s)));
        let bbox = BBox::new(num(f[1], "x")?, num(f[2], "y")?, num(f[3], "w")?, num(f[4], "h")?)
            .map_err(|e| fmt(ln, e.to_string()))?;
        let class_id: ClassId = f[5].trim().parse().map_err(|e: MitosError| fmt(ln, e.to_string()))?;
        if class_id == ClassId::Background {
            return Err(fmt(ln, "background is not a detection class".into()));
        }
        let score = num(f[6], "score")?;
        if !(score > 0.0 && score <= 1.0) {
            return Err(fmt(ln, format!("score {} outside (0, 1]", score)));
        }
        out.entry(f[0].to_string()).or_default().push(Detection { bbox, class_id, score });
    }
    Ok(out)
}

pub fn load_detections(path: &Path) -> Result<IndexMap<String, Vec<Detection>>> {
    let text = std::fs::read_to_string(path).map_err(|e| MitosError::io(path, e))?;
    parse_detections(&text, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let d = Detection {
            bbox: BBox::new(1.25, 2.0, 30.5, 28.0).unwrap(),
            class_id: ClassId::MitoticFigure,
            score: 0.912345,
        };
        let rows = vec![("a.png".to_string(), vec![d]), ("b.png".to_string(), vec![])];
        let mut buf = Vec::new();
        write_detections(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "image,x,y,w,h,class,score\na.png,1.25,2,30.5,28,mitotic_figure,0.912345\n");
        let back = parse_detections(&text, "mem").unwrap();
        assert_eq!(back["a.png"], vec![d]);
    }

    #[test]
    fn errors_name_line() {
        let err = parse_detections("image,x,y,w,h,class,score\na,1,1,1,1,background,0.9\n", "f").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{}", err);
        assert!(parse_detections("nope\n", "f").is_err());
    }
}
