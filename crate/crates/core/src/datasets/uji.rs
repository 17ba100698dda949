//! UJIIndoorLoc CSV: `WAP001..WAP520` readings (`+100` = not detected),
//! then LONGITUDE, LATITUDE (meters), FLOOR, BUILDINGID, SPACEID,
//! RELATIVEPOSITION, USERID, PHONEID, TIMESTAMP.

use std::path::Path;

use super::{io_err, DatasetError, Result};
use crate::fingerprint::{FingerprintDataset, Point, RssSample, Site, DEFAULT_CELL_SIZE};

pub const UJI_NOT_DETECTED: f64 = 100.0;

const REQUIRED: [&str; 4] = ["LONGITUDE", "LATITUDE", "FLOOR", "BUILDINGID"];

struct RawRow {
    readings: Vec<Option<f64>>,
    x: f64,
    y: f64,
    floor: i32,
    building: i32,
}

struct RawFile {
    roster: Vec<String>,
    rows: Vec<RawRow>,
}

fn is_ap_column(name: &str) -> bool {
    name.len() > 3 && name.starts_with("WAP") && name[3..].bytes().all(|b| b.is_ascii_digit())
}

fn read_file(path: &Path, building: i32) -> Result<RawFile> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);

    let missing: Vec<String> = REQUIRED.iter().filter(|c| find(c).is_none()).map(|c| c.to_string()).collect();
    let ap_cols: Vec<usize> = (0..headers.len()).filter(|&i| is_ap_column(&headers[i])).collect();
    if !missing.is_empty() || ap_cols.len() < 2 {
        let mut missing = missing;
        if ap_cols.len() < 2 {
            missing.push("WAPnnn (at least 2 AP columns)".into());
        }
        return Err(DatasetError::MissingColumns(missing));
    }
    let [lon, lat, floor_col, bld] = REQUIRED.map(|c| find(c).unwrap());

    let mut rows = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = k + 2;
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.parse::<f64>().ok())
                .filter(|v| v.is_finite())
                .ok_or_else(|| DatasetError::Parse {
                    line,
                    message: format!("column {} is not a number", &headers[i]),
                })
        };
        let b = num(bld)? as i32;
        if b != building {
            continue;
        }
        let readings = ap_cols
            .iter()
            .map(|&i| num(i).map(|v| (v != UJI_NOT_DETECTED).then_some(v)))
            .collect::<Result<Vec<_>>>()?;
        rows.push(RawRow {
            readings,
            x: num(lon)?,
            y: num(lat)?,
            floor: num(floor_col)? as i32,
            building: b,
        });
    }
    Ok(RawFile {
        roster: ap_cols.iter().map(|&i| headers[i].to_string()).collect(),
        rows,
    })
}

/// Ingests several files of one building into a shared coordinate frame:
/// the union bounding box is shifted to start at the origin, so a training
/// file and its validation file stay comparable.
pub fn ingest_uji_files(paths: &[&Path], building: i32) -> Result<Vec<FingerprintDataset>> {
    let files = paths.iter().map(|p| read_file(p, building)).collect::<Result<Vec<_>>>()?;
    if let Some(first) = files.first() {
        if let Some(other) = files.iter().find(|f| f.roster != first.roster) {
            return Err(DatasetError::Parse {
                line: 1,
                message: format!("AP columns differ between files ({} vs {})", first.roster.len(), other.roster.len()),
            });
        }
    }
    let all = files.iter().flat_map(|f| &f.rows);
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for r in all {
        x0 = x0.min(r.x);
        y0 = y0.min(r.y);
        x1 = x1.max(r.x);
        y1 = y1.max(r.y);
    }
    if !x0.is_finite() {
        return Err(DatasetError::EmptyBuilding(building));
    }
    let site = Site {
        width: (x1 - x0).max(DEFAULT_CELL_SIZE),
        height: (y1 - y0).max(DEFAULT_CELL_SIZE),
    };

    files
        .into_iter()
        .zip(paths)
        .map(|(f, path)| {
            log::info!("{}: {} rows for building {building}", path.display(), f.rows.len());
            let samples = f
                .rows
                .into_iter()
                .map(|r| RssSample {
                    readings: r.readings,
                    location: Point::new(r.x - x0, r.y - y0),
                    floor: Some(r.floor),
                    building: Some(r.building),
                })
                .collect();
            Ok(FingerprintDataset {
                ap_roster: f.roster,
                samples,
                site,
                grid_cell_size: DEFAULT_CELL_SIZE,
            })
        })
        .collect()
}

/// Rows of `building` from one UJIIndoorLoc CSV.
pub fn ingest_uji(path: &Path, building: i32) -> Result<FingerprintDataset> {
    let mut v = ingest_uji_files(&[path], building)?;
    Ok(v.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    const AUX: &str = "SPACEID,RELATIVEPOSITION,USERID,PHONEID,TIMESTAMP";

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::File::create(&p).unwrap().write_all(body.as_bytes()).unwrap();
        p
    }

    #[test]
    fn parses_hand_written_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let csv = format!(
            "WAP001,WAP002,WAP003,LONGITUDE,LATITUDE,FLOOR,BUILDINGID,{AUX}\n\
             -70,100,-88,-7640.5,4864900.25,1,0,106,2,2,23,1371713733\n\
             100,-45,100,-7630.5,4864910.25,2,0,106,2,2,23,1371713734\n\
             -60,-61,-62,-7500.0,4864000.0,0,1,1,1,1,1,1371713735\n"
        );
        let p = write(dir.path(), "train.csv", &csv);
        let ds = ingest_uji(&p, 0).unwrap();
        assert_eq!(ds.ap_roster, vec!["WAP001", "WAP002", "WAP003"]);
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.samples[0].readings, vec![Some(-70.0), None, Some(-88.0)]);
        assert_eq!(ds.samples[1].readings, vec![None, Some(-45.0), None]);
        assert_eq!(ds.samples[0].location, Point::new(0.0, 0.0));
        assert_eq!(ds.samples[1].location, Point::new(10.0, 10.0));
        assert_eq!(ds.samples[1].floor, Some(2));
        assert_eq!(ds.site, Site { width: 10.0, height: 10.0 });
    }

    #[test]
    fn all_missing_row_is_kept() {
        let dir = tempfile::tempdir().unwrap();
        let csv = format!(
            "WAP001,WAP002,LONGITUDE,LATITUDE,FLOOR,BUILDINGID,{AUX}\n\
             100,100,1.0,2.0,0,0,0,0,0,0,0\n\
             -50,100,4.0,5.0,0,0,0,0,0,0,0\n"
        );
        let ds = ingest_uji(&write(dir.path(), "a.csv", &csv), 0).unwrap();
        assert_eq!(ds.samples[0].readings, vec![None, None]);
    }

    #[test]
    fn missing_columns_are_named() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "bad.csv", "WAP001,WAP002,LONGITUDE,FLOOR\n-50,-60,1.0,0\n");
        match ingest_uji(&p, 0) {
            Err(DatasetError::MissingColumns(cols)) => {
                assert_eq!(cols, vec!["LATITUDE".to_string(), "BUILDINGID".to_string()]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unreadable_file_is_io_error() {
        assert!(matches!(
            ingest_uji(Path::new("/nonexistent/uji.csv"), 0),
            Err(DatasetError::Io { .. })
        ));
    }

    #[test]
    fn shared_frame_across_files() {
        let dir = tempfile::tempdir().unwrap();
        let head = format!("WAP001,WAP002,LONGITUDE,LATITUDE,FLOOR,BUILDINGID,{AUX}\n");
        let a = write(dir.path(), "a.csv", &format!("{head}-50,-60,10.0,20.0,0,0,0,0,0,0,0\n"));
        let b = write(dir.path(), "b.csv", &format!("{head}-55,-65,5.0,30.0,0,0,0,0,0,0,0\n"));
        let v = ingest_uji_files(&[&a, &b], 0).unwrap();
        assert_eq!(v[0].samples[0].location, Point::new(5.0, 0.0));
        assert_eq!(v[1].samples[0].location, Point::new(0.0, 10.0));
        assert_eq!(v[0].site, v[1].site);
    }
}
