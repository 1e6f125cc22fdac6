//! Dataset manifests, deterministic splits, and the synthetic generator.

mod synth;

pub(crate) use synth::derive_seed;
pub use synth::{make_synthetic, make_synthetic_with, render_fundus, SynthOptions, SynthSpec};

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imaging::RoiBox;

pub const MANIFEST_HEADER: [&str; 6] = ["image_path", "label", "roi_x0", "roi_y0", "roi_x1", "roi_y1"];

/// One dataset row: image path, binary label, optional ROI box.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleRecord {
    pub image_path: PathBuf,
    /// 1 = referable, 0 = non-referable.
    pub label: u8,
    pub roi: Option<RoiBox>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetManifest {
    pub records: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn new(records: Vec<SampleRecord>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            if r.label > 1 {
                return Err(Error::validation(format!("label {} is not binary", r.label)));
            }
            if !seen.insert(&r.image_path) {
                return Err(Error::validation(format!(
                    "duplicate image path {}",
                    r.image_path.display()
                )));
            }
        }
        Ok(Self { records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// (non-referable, referable) counts.
    pub fn class_counts(&self) -> (usize, usize) {
        let pos = self.records.iter().filter(|r| r.label == 1).count();
        (self.records.len() - pos, pos)
    }
}

/// Parses a manifest CSV; relative image paths resolve against the CSV's
/// parent directory.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)
        .map_err(|e| csv_error(e, 1))?;

    let headers = reader.headers().map_err(|e| csv_error(e, 1))?.clone();
    let expected: Vec<&str> = MANIFEST_HEADER.to_vec();
    let found: Vec<&str> = headers.iter().collect();
    if found != expected {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header {expected:?}, found {found:?}"),
        });
    }

    let mut records = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            csv_error(e, line)
        })?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);

        let raw_path = row.get(0).unwrap_or("");
        if raw_path.is_empty() {
            return Err(Error::Parse { line, message: "empty image path".into() });
        }
        let label: u8 = row
            .get(1)
            .unwrap_or("")
            .parse()
            .map_err(|_| Error::Parse { line, message: format!("bad label {:?}", row.get(1)) })?;
        if label > 1 {
            return Err(Error::Validation(format!(
                "line {line}: label {label} must be 0 or 1"
            )));
        }

        let roi_fields: Vec<&str> = (2..6).map(|i| row.get(i).unwrap_or("")).collect();
        let empties = roi_fields.iter().filter(|f| f.is_empty()).count();
        let roi = match empties {
            4 => None,
            0 => {
                let mut vals = [0usize; 4];
                for (v, f) in vals.iter_mut().zip(&roi_fields) {
                    *v = f.parse().map_err(|_| Error::Parse {
                        line,
                        message: format!("bad roi coordinate {f:?}"),
                    })?;
                }
                let b = RoiBox::new(vals[0], vals[1], vals[2], vals[3]);
                if b.x0 >= b.x1 || b.y0 >= b.y1 {
                    return Err(Error::Validation(format!(
                        "line {line}: roi box {b:?} has non-positive extent"
                    )));
                }
                Some(b)
            }
            _ => {
                return Err(Error::Parse {
                    line,
                    message: "roi columns must be all present or all empty".into(),
                })
            }
        };

        let p = PathBuf::from(raw_path);
        let image_path = if p.is_absolute() { p } else { base.join(p) };
        records.push(SampleRecord { image_path, label, roi });
    }

    DatasetManifest::new(records)
}

fn csv_error(e: csv::Error, line: u64) -> Error {
    Error::Parse { line, message: e.to_string() }
}

/// Writes the manifest with the exact schema header (UTF-8, LF newlines).
pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| csv_error(e, 0))?;
    w.write_record(MANIFEST_HEADER).map_err(|e| csv_error(e, 0))?;
    for r in &manifest.records {
        let roi = r.roi.map(|b| {
            [b.x0.to_string(), b.y0.to_string(), b.x1.to_string(), b.y1.to_string()]
        });
        let empty = [String::new(), String::new(), String::new(), String::new()];
        let roi = roi.unwrap_or(empty);
        w.write_record([
            r.image_path.to_string_lossy().as_ref(),
            &r.label.to_string(),
            &roi[0],
            &roi[1],
            &roi[2],
            &roi[3],
        ])
        .map_err(|e| csv_error(e, 0))?;
    }
    w.flush()?;
    Ok(())
}

/// Stratified split into (train, val, test), deterministic under `seed`.
pub fn split_records(
    manifest: &DatasetManifest,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest, DatasetManifest)> {
    let (ft, fv, fe) = fractions;
    if ft <= 0.0 || fv <= 0.0 || fe <= 0.0 {
        return Err(Error::validation("split fractions must be positive"));
    }
    if (ft + fv + fe - 1.0).abs() > 1e-9 {
        return Err(Error::validation("split fractions must sum to 1"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts: [Vec<SampleRecord>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for class in 0..2u8 {
        let mut members: Vec<&SampleRecord> =
            manifest.records.iter().filter(|r| r.label == class).collect();
        if members.len() < 3 {
            return Err(Error::validation(format!(
                "class {class} has {} samples, fewer than the 3 partitions",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        let n = members.len();
        let n_train = (ft * n as f64).floor() as usize;
        let n_val = ((ft + fv) * n as f64).floor() as usize - n_train;
        for (i, r) in members.into_iter().enumerate() {
            let bucket = if i < n_train {
                0
            } else if i < n_train + n_val {
                1
            } else {
                2
            };
            parts[bucket].push(r.clone());
        }
    }
    let [train, val, test] = parts;
    Ok((
        DatasetManifest::new(train)?,
        DatasetManifest::new(val)?,
        DatasetManifest::new(test)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(name: &str, label: u8, roi: Option<RoiBox>) -> SampleRecord {
        SampleRecord { image_path: PathBuf::from(format!("/data/{name}.png")), label, roi }
    }

    fn sample_manifest(n_per_class: usize) -> DatasetManifest {
        let mut records = Vec::new();
        for i in 0..n_per_class {
            records.push(record(&format!("neg{i}"), 0, None));
            records.push(record(&format!("pos{i}"), 1, Some(RoiBox::new(1, 2, 30, 40))));
        }
        DatasetManifest::new(records).unwrap()
    }

    #[test]
    fn write_then_load_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.csv");
        let m = sample_manifest(4);
        write_manifest(&m, &path).unwrap();
        let back = load_manifest(&path).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn counts_two_row_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        std::fs::write(
            &path,
            "image_path,label,roi_x0,roi_y0,roi_x1,roi_y1\na.png,0,,,,\nb.png,1,,,,\n",
        )
        .unwrap();
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.class_counts(), (1, 1));
        assert_eq!(m.records[0].roi, None);
        // Relative paths resolve against the manifest directory.
        assert_eq!(m.records[0].image_path, dir.path().join("a.png"));
    }

    #[test]
    fn bad_label_names_its_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        std::fs::write(
            &path,
            "image_path,label,roi_x0,roi_y0,roi_x1,roi_y1\na.png,0,,,,\nb.png,2,,,,\n",
        )
        .unwrap();
        match load_manifest(&path) {
            Err(Error::Validation(msg)) => assert!(msg.contains("line 3"), "{msg}"),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn partial_roi_columns_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        std::fs::write(
            &path,
            "image_path,label,roi_x0,roi_y0,roi_x1,roi_y1\na.png,0,1,2,,\n",
        )
        .unwrap();
        assert!(matches!(load_manifest(&path), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn wrong_header_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        std::fs::write(&path, "path,label,roi_x0,roi_y0,roi_x1,roi_y1\n").unwrap();
        assert!(matches!(load_manifest(&path), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn split_is_stratified_and_exhaustive() {
        let m = sample_manifest(50);
        let (train, val, test) = split_records(&m, (0.8, 0.1, 0.1), 7).unwrap();
        assert_eq!(train.len(), 80);
        assert_eq!(val.len(), 10);
        assert_eq!(test.len(), 10);
        assert_eq!(train.class_counts(), (40, 40));
        assert_eq!(val.class_counts(), (5, 5));
        assert_eq!(test.class_counts(), (5, 5));

        let mut all: Vec<&PathBuf> = train
            .records
            .iter()
            .chain(&val.records)
            .chain(&test.records)
            .map(|r| &r.image_path)
            .collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 100);
    }

    #[test]
    fn split_is_deterministic_per_seed() {
        let m = sample_manifest(20);
        let a = split_records(&m, (0.6, 0.2, 0.2), 3).unwrap();
        let b = split_records(&m, (0.6, 0.2, 0.2), 3).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert_eq!(a.2, b.2);
        let c = split_records(&m, (0.6, 0.2, 0.2), 4).unwrap();
        assert_eq!(c.0.len(), a.0.len());
        assert_ne!(a.0, c.0, "different seeds should permute differently");
    }

    #[test]
    fn split_rejects_tiny_classes() {
        let mut records = vec![record("a", 0, None), record("b", 0, None), record("c", 0, None)];
        records.push(record("d", 1, None));
        let m = DatasetManifest::new(records).unwrap();
        assert!(split_records(&m, (0.8, 0.1, 0.1), 1).is_err());
    }

    #[test]
    fn duplicate_paths_are_rejected() {
        let records = vec![record("a", 0, None), record("a", 1, None)];
        assert!(DatasetManifest::new(records).is_err());
    }
}
