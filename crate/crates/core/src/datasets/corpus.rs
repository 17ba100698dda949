use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{io_err, DatasetError, Result};
use crate::fingerprint::{FingerprintDataset, Point, RssSample, Site};

pub const CORPUS_FILE_NAME: &str = "fingerprints.jsonl";
const CORPUS_FORMAT: &str = "edgeloc-corpus";
const CORPUS_VERSION: u32 = 1;

/// First line of a corpus file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusHeader {
    pub format: String,
    pub version: u32,
    pub ap_roster: Vec<String>,
    pub site: Site,
    pub cell_size: f64,
    pub samples: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleRecord {
    readings: Vec<Option<f64>>,
    location: Point,
    cell: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    floor: Option<i32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    building: Option<i32>,
}

/// A directory resolves to the corpus file inside it.
fn corpus_path(path: &Path) -> PathBuf {
    if path.is_dir() || path.extension().is_none() {
        path.join(CORPUS_FILE_NAME)
    } else {
        path.to_path_buf()
    }
}

pub fn write_corpus_to<W: Write>(dataset: &FingerprintDataset, mut out: W) -> Result<()> {
    dataset.validate()?;
    let grid = dataset.grid()?;
    let header = CorpusHeader {
        format: CORPUS_FORMAT.into(),
        version: CORPUS_VERSION,
        ap_roster: dataset.ap_roster.clone(),
        site: dataset.site,
        cell_size: dataset.grid_cell_size,
        samples: dataset.len(),
    };
    let line_err = |e: std::io::Error| DatasetError::Io { path: "<corpus>".into(), source: e };
    serde_json::to_writer(&mut out, &header).map_err(|e| line_err(e.into()))?;
    out.write_all(b"\n").map_err(line_err)?;
    for s in &dataset.samples {
        let rec = SampleRecord {
            readings: s.readings.clone(),
            location: s.location,
            cell: grid.cell_of(&s.location)?,
            floor: s.floor,
            building: s.building,
        };
        serde_json::to_writer(&mut out, &rec).map_err(|e| line_err(e.into()))?;
        out.write_all(b"\n").map_err(line_err)?;
    }
    out.flush().map_err(line_err)
}

/// Writes `path` (or `path/fingerprints.jsonl` for a directory) and returns the file written.
pub fn write_corpus(dataset: &FingerprintDataset, path: &Path) -> Result<PathBuf> {
    let file = corpus_path(path);
    if let Some(parent) = file.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let f = fs::File::create(&file).map_err(io_err(&file))?;
    write_corpus_to(dataset, BufWriter::new(f))?;
    Ok(file)
}

pub fn read_corpus(path: &Path) -> Result<FingerprintDataset> {
    let file = corpus_path(path);
    let f = fs::File::open(&file).map_err(io_err(&file))?;
    let mut lines = BufReader::new(f).lines();
    let parse_err = |line: usize, e: &dyn std::fmt::Display| DatasetError::Parse { line, message: e.to_string() };

    let first = lines
        .next()
        .ok_or_else(|| parse_err(1, &"empty corpus file"))?
        .map_err(io_err(&file))?;
    let header: CorpusHeader = serde_json::from_str(&first).map_err(|e| parse_err(1, &e))?;
    if header.format != CORPUS_FORMAT || header.version != CORPUS_VERSION {
        return Err(parse_err(1, &format!("unsupported corpus {} v{}", header.format, header.version)));
    }
    let mut samples = Vec::with_capacity(header.samples);
    for (k, line) in lines.enumerate() {
        let line = line.map_err(io_err(&file))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord = serde_json::from_str(&line).map_err(|e| parse_err(k + 2, &e))?;
        samples.push(RssSample {
            readings: rec.readings,
            location: rec.location,
            floor: rec.floor,
            building: rec.building,
        });
    }
    if samples.len() != header.samples {
        return Err(parse_err(0, &format!("header promises {} samples, found {}", header.samples, samples.len())));
    }
    let ds = FingerprintDataset {
        ap_roster: header.ap_roster,
        samples,
        site: header.site,
        grid_cell_size: header.cell_size,
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> FingerprintDataset {
        FingerprintDataset {
            ap_roster: vec!["a".into(), "b".into()],
            samples: vec![
                RssSample {
                    readings: vec![Some(-61.25), None],
                    location: Point::new(0.1, 0.2),
                    floor: Some(2),
                    building: None,
                },
                RssSample {
                    readings: vec![Some(-0.1), Some(-99.999)],
                    location: Point::new(3.0, 1.5),
                    floor: None,
                    building: None,
                },
            ],
            site: Site { width: 3.2, height: 1.6 },
            grid_cell_size: 1.6,
        }
    }

    #[test]
    fn roundtrip_through_directory() {
        let dir = tempfile::tempdir().unwrap();
        let file = write_corpus(&tiny(), dir.path()).unwrap();
        assert!(file.ends_with(CORPUS_FILE_NAME));
        assert_eq!(read_corpus(dir.path()).unwrap(), tiny());
    }

    #[test]
    fn null_marks_not_detected_and_cell_is_recorded() {
        let mut buf = Vec::new();
        write_corpus_to(&tiny(), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].contains("[-61.25,null]"));
        assert!(lines[2].contains("\"cell\":1"));
    }

    #[test]
    fn truncated_corpus_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let file = write_corpus(&tiny(), dir.path()).unwrap();
        let text = fs::read_to_string(&file).unwrap();
        let cut: Vec<&str> = text.lines().take(2).collect();
        fs::write(&file, cut.join("\n")).unwrap();
        assert!(matches!(read_corpus(dir.path()), Err(DatasetError::Parse { .. })));
    }
}
