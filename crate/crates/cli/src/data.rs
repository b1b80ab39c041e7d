//! Dataset files: county and site CSVs, and CSV encoding of result rows.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use encor::placement::{check_coordinates, County, Dataset, SitePoint};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::CliError;

pub const COUNTIES_FILE: &str = "counties.csv";
pub const POPS_FILE: &str = "pops.csv";
pub const CDNS_FILE: &str = "cdns.csv";

fn reader(text: &str) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes())
}

/// Parses CSV text into rows, reporting the 1-based file line of the first
/// bad record.
pub fn parse_rows<T: DeserializeOwned>(text: &str, path: &Path) -> Result<Vec<T>, CliError> {
    let malformed = |line: u64, reason: String| CliError::Malformed {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut rdr = reader(text);
    let headers = rdr.headers().map_err(|e| malformed(1, e.to_string()))?.clone();
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            malformed(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let row = rec
            .deserialize(Some(&headers))
            .map_err(|e| malformed(line, e.to_string()))?;
        out.push(row);
    }
    Ok(out)
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Missing {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn check_all<'a>(
    path: &Path,
    text: &str,
    coords: impl Iterator<Item = (f64, f64)> + 'a,
) -> Result<(), CliError> {
    // Record lines again so a bad coordinate also names its line.
    let mut rdr = reader(text);
    let lines: Vec<u64> = rdr
        .records()
        .map(|r| r.ok().and_then(|r| r.position().map(|p| p.line())).unwrap_or(0))
        .collect();
    for ((lat, lon), line) in coords.zip(lines) {
        check_coordinates(lat, lon).map_err(|e| CliError::Malformed {
            path: path.to_path_buf(),
            line,
            reason: e.to_string(),
        })?;
    }
    Ok(())
}

pub fn read_counties(path: &Path) -> Result<Vec<County>, CliError> {
    let text = read(path)?;
    let rows: Vec<County> = parse_rows(&text, path)?;
    check_all(path, &text, rows.iter().map(|c| (c.lat, c.lon)))?;
    Ok(rows)
}

pub fn read_sites(path: &Path) -> Result<Vec<SitePoint>, CliError> {
    let text = read(path)?;
    let rows: Vec<SitePoint> = parse_rows(&text, path)?;
    check_all(path, &text, rows.iter().map(|s| (s.lat, s.lon)))?;
    Ok(rows)
}

pub fn read_dataset(counties: &Path, pops: &Path, cdns: &Path) -> Result<Dataset, CliError> {
    Ok(Dataset {
        counties: read_counties(counties)?,
        pops: read_sites(pops)?,
        cdns: read_sites(cdns)?,
    })
}

pub fn to_csv<T: Serialize>(rows: &[T]) -> Result<String, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Data(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Data(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// Writes `bytes` to a temporary file next to `path`, then renames it over
/// `path`, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let io = |e: std::io::Error| CliError::Io {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(io)?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp: PathBuf = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.map_err(io)
}

/// The three dataset files, with the county population total recorded in a
/// leading comment.
pub fn dataset_files(d: &Dataset) -> Result<Vec<(&'static str, String)>, CliError> {
    let counties = format!("# total_population={}\n{}", d.total_population(), to_csv(&d.counties)?);
    Ok(vec![
        (COUNTIES_FILE, counties),
        (POPS_FILE, to_csv(&d.pops)?),
        (CDNS_FILE, to_csv(&d.cdns)?),
    ])
}
