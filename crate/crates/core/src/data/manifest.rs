//! Dataset manifest: one `[images]` section with per-image metadata and
//! provenance, one `[annotations]` section with
//! `image,x,y,w,h,cx,cy,class` records. Numbers are written in their
//! shortest exact decimal form, so save → load reproduces every value.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::BoxAnnotation;
use crate::detection::ClassId;
use crate::error::{MitosError, Result};
use crate::proposal::BBox;

pub const MANIFEST_VERSION: u32 = 1;
const MAGIC: &str = "# mitos-manifest";
const IMAGE_HEADER: &str =
    "image,width,height,resolution_um_per_px,scanner,rotation_deg,stain_normalized,source_tile,scale_x,scale_y,source,notes";
const ANNOTATION_HEADER: &str = "image,x,y,w,h,cx,cy,class";

/// How a record was derived from its source frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Provenance {
    /// Clockwise rotation applied, in degrees (0 for none).
    pub rotation_deg: u32,
    pub stain_normalized: bool,
    /// Index (row-major, 0..16) of the tile this record was cut from.
    pub source_tile: Option<usize>,
    /// Factors mapping source-frame pixels onto this image.
    pub scale_x: f64,
    pub scale_y: f64,
    /// Image id of the record this one was derived from; empty for originals.
    pub source: String,
    /// Free-form `;`-separated flags.
    pub notes: String,
}

impl Default for Provenance {
    fn default() -> Self {
        Provenance {
            rotation_deg: 0,
            stain_normalized: false,
            source_tile: None,
            scale_x: 1.0,
            scale_y: 1.0,
            source: String::new(),
            notes: String::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    /// Path of the image relative to the manifest's directory; unique.
    pub image: String,
    pub width: usize,
    pub height: usize,
    pub resolution_um_per_px: f64,
    pub scanner: String,
    pub provenance: Provenance,
    pub annotations: Vec<BoxAnnotation>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<ImageRecord>,
}

fn check_text(field: &str, v: &str) -> Result<()> {
    if v.contains([',', '\n', '\r']) {
        return Err(MitosError::invalid(format!("{} {:?} may not contain commas or line breaks", field, v)));
    }
    Ok(())
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, image: &str) -> Option<&ImageRecord> {
        self.records.iter().find(|r| r.image == image)
    }

    /// Unique ids, positive sizes and resolutions, annotations inside their image.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.image.as_str()) {
                return Err(MitosError::invalid(format!("duplicate image {}", r.image)));
            }
            if r.width == 0 || r.height == 0 || !(r.resolution_um_per_px > 0.0) {
                return Err(MitosError::invalid(format!("image {}: size and resolution must be positive", r.image)));
            }
            for a in &r.annotations {
                if !a.within(r.width as f64, r.height as f64) {
                    return Err(MitosError::invalid(format!(
                        "image {}: annotation ({}, {}, {}, {}) outside {}x{}",
                        r.image, a.bbox.x, a.bbox.y, a.bbox.w, a.bbox.h, r.width, r.height
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> Result<String> {
        self.validate()?;
        let mut s = String::new();
        let _ = writeln!(s, "{} {}", MAGIC, MANIFEST_VERSION);
        let _ = writeln!(s, "[images]\n{}", IMAGE_HEADER);
        for r in &self.records {
            let p = &r.provenance;
            for (f, v) in [("image", &r.image), ("scanner", &r.scanner), ("source", &p.source), ("notes", &p.notes)] {
                check_text(f, v)?;
            }
            let tile = p.source_tile.map(|t| t.to_string()).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                r.image,
                r.width,
                r.height,
                r.resolution_um_per_px,
                r.scanner,
                p.rotation_deg,
                p.stain_normalized,
                tile,
                p.scale_x,
                p.scale_y,
                p.source,
                p.notes
            );
        }
        let _ = writeln!(s, "[annotations]\n{}", ANNOTATION_HEADER);
        for r in &self.records {
            for a in &r.annotations {
                let b = &a.bbox;
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{},{}",
                    r.image, b.x, b.y, b.w, b.h, a.centroid.0, a.centroid.1, a.class_id
                );
            }
        }
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = self.to_text()?;
        std::fs::write(path, text).map_err(|e| MitosError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| MitosError::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Parses manifest text. An empty input is an empty manifest.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let fmt = |line: usize, msg: String| MitosError::Format {
            path: origin.to_string(),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end_matches('\r')));
        let Some((_, first)) = lines.next() else {
            return Ok(DatasetManifest::default());
        };
        let version = first
            .strip_prefix(MAGIC)
            .and_then(|v| v.trim().parse::<u32>().ok())
            .ok_or_else(|| fmt(1, format!("expected \"{} <version>\"", MAGIC)))?;
        if version != MANIFEST_VERSION {
            return Err(MitosError::Version {
                what: "manifest",
                found: version,
                expected: MANIFEST_VERSION,
            });
        }
        #[derive(PartialEq)]
        enum Section {
            None,
            Images,
            Annotations,
        }
        let mut section = Section::None;
        let mut expect_header: Option<&str> = None;
        let mut records: Vec<ImageRecord> = Vec::new();
        let mut index = std::collections::HashMap::new();
        for (ln, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            if let Some(h) = expect_header.take() {
                if line != h {
                    return Err(fmt(ln, format!("expected header {:?}", h)));
                }
                continue;
            }
            match line {
                "[images]" if section == Section::None => {
                    section = Section::Images;
                    expect_header = Some(IMAGE_HEADER);
                    continue;
                }
                "[annotations]" if section == Section::Images => {
                    section = Section::Annotations;
                    expect_header = Some(ANNOTATION_HEADER);
                    continue;
                }
                _ => {}
            }
            let f: Vec<&str> = line.split(',').collect();
            let num = |s: &str, what: &str| -> Result<f64> {
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| fmt(ln, format!("bad {} {:?}", what, s)))
            };
            let int = |s: &str, what: &str| -> Result<usize> {
                s.parse::<usize>().map_err(|_| fmt(ln, format!("bad {} {:?}", what, s)))
            };
            match section {
                Section::None => return Err(fmt(ln, "expected [images] section".into())),
                Section::Images => {
                    if f.len() != 12 {
                        return Err(fmt(ln, format!("image record needs 12 fields, found {}", f.len())));
                    }
                    let rec = ImageRecord {
                        image: f[0].to_string(),
                        width: int(f[1], "width")?,
                        height: int(f[2], "height")?,
                        resolution_um_per_px: num(f[3], "resolution")?,
                        scanner: f[4].to_string(),
                        provenance: Provenance {
                            rotation_deg: int(f[5], "rotation")? as u32,
                            stain_normalized: f[6].parse().map_err(|_| fmt(ln, format!("bad flag {:?}", f[6])))?,
                            source_tile: if f[7].is_empty() { None } else { Some(int(f[7], "tile")?) },
                            scale_x: num(f[8], "scale_x")?,
                            scale_y: num(f[9], "scale_y")?,
                            source: f[10].to_string(),
                            notes: f[11].to_string(),
                        },
                        annotations: Vec::new(),
                    };
                    if rec.width == 0 || rec.height == 0 || !(rec.resolution_um_per_px > 0.0) {
                        return Err(fmt(ln, format!("image {}: size and resolution must be positive", rec.image)));
                    }
                    if index.insert(rec.image.clone(), records.len()).is_some() {
                        return Err(fmt(ln, format!("duplicate image {}", rec.image)));
                    }
                    records.push(rec);
                }
                Section::Annotations => {
                    if f.len() != 8 {
                        return Err(fmt(ln, format!("annotation record needs 8 fields, found {}", f.len())));
                    }
                    let Some(&ri) = index.get(f[0]) else {
                        return Err(fmt(ln, format!("annotation for unknown image {}", f[0])));
                    };
                    let bbox = BBox::new(num(f[1], "x")?, num(f[2], "y")?, num(f[3], "w")?, num(f[4], "h")?)
                        .map_err(|e| fmt(ln, e.to_string()))?;
                    let class_id: ClassId = f[7].parse().map_err(|e: MitosError| fmt(ln, e.to_string()))?;
                    let a = BoxAnnotation::new(bbox, class_id, (num(f[5], "cx")?, num(f[6], "cy")?))
                        .map_err(|e| fmt(ln, format!("image {}: {}", f[0], e)))?;
                    let r = &mut records[ri];
                    if !a.within(r.width as f64, r.height as f64) {
                        return Err(fmt(
                            ln,
                            format!("image {}: annotation outside {}x{} bounds", r.image, r.width, r.height),
                        ));
                    }
                    r.annotations.push(a);
                }
            }
        }
        if let Some(h) = expect_header {
            return Err(fmt(text.lines().count(), format!("missing header {:?}", h)));
        }
        Ok(DatasetManifest { records })
    }

    /// Absolute path of a record's image given the manifest's location.
    pub fn image_path(manifest_path: &Path, record: &ImageRecord) -> PathBuf {
        manifest_path.parent().unwrap_or(Path::new(".")).join(&record.image)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> DatasetManifest {
        let a = BoxAnnotation::new(BBox::new(1.5, 2.25, 20.0, 18.125).unwrap(), ClassId::MitoticFigure, (11.0, 10.1)).unwrap();
        let b = BoxAnnotation::centered(BBox::new(100.0, 50.0, 30.0, 30.0).unwrap(), ClassId::NotMitoticFigure).unwrap();
        DatasetManifest {
            records: vec![
                ImageRecord {
                    image: "f0.png".into(),
                    width: 299,
                    height: 299,
                    resolution_um_per_px: 0.2455,
                    scanner: "synthetic".into(),
                    provenance: Provenance::default(),
                    annotations: vec![a, b],
                },
                ImageRecord {
                    image: "f0_t3_r90.png".into(),
                    width: 299,
                    height: 299,
                    resolution_um_per_px: 1.0 / 3.0,
                    scanner: "aperio".into(),
                    provenance: Provenance {
                        rotation_deg: 90,
                        stain_normalized: true,
                        source_tile: Some(3),
                        scale_x: 299.0 / 385.0,
                        scale_y: 299.0 / 384.0,
                        source: "f0.png".into(),
                        notes: "resized".into(),
                    },
                    annotations: vec![],
                },
            ],
        }
    }

    #[test]
    fn round_trip() {
        let m = sample();
        let text = m.to_text().unwrap();
        assert_eq!(DatasetManifest::parse(&text, "mem").unwrap(), m);
    }

    #[test]
    fn empty_input_is_empty_manifest() {
        assert!(DatasetManifest::parse("", "mem").unwrap().is_empty());
        let text = DatasetManifest::default().to_text().unwrap();
        assert!(DatasetManifest::parse(&text, "mem").unwrap().is_empty());
    }

    #[test]
    fn out_of_bounds_annotation_names_record() {
        let text = sample().to_text().unwrap().replace("100,50,30,30,115,65", "290,50,30,30,300,65");
        let err = DatasetManifest::parse(&text, "m.csv").unwrap_err().to_string();
        assert!(err.contains("f0.png") && err.contains("line"), "{}", err);
    }

    #[test]
    fn version_and_format_errors() {
        let text = sample().to_text().unwrap();
        let v2 = text.replacen("manifest 1", "manifest 2", 1);
        assert!(matches!(DatasetManifest::parse(&v2, "m").unwrap_err(), MitosError::Version { found: 2, .. }));
        let bad = text.replace("0.2455", "zero");
        let err = DatasetManifest::parse(&bad, "m").unwrap_err().to_string();
        assert!(err.contains("line 4"), "{}", err);
    }
}
