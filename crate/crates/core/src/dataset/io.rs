//! Matrix CSV and dataset manifest formats.
//!
//! One CSV per channel: the header row and first column carry material
//! names, each cell holds a coefficient or is empty (NaN is read as
//! empty). The manifest ties the channel files together:
//!
//! ```json
//! {"materials": [...], "classes": [...], "channels": [...],
//!  "files": {"static": "static.csv"}, "mu_max": 2.0}
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{FrictionDataset, MaterialClass, MaterialLibrary};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub materials: Vec<String>,
    pub classes: Vec<MaterialClass>,
    pub channels: Vec<String>,
    pub files: BTreeMap<String, String>,
    pub mu_max: f64,
}

/// Serialize one channel as a matrix CSV.
pub fn write_matrix_csv(ds: &FrictionDataset, c: usize) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec![String::new()];
    header.extend(ds.library().names().iter().cloned());
    w.write_record(&header)?;
    for i in 0..ds.n() {
        let mut row = vec![ds.library().name(i).to_string()];
        for j in 0..ds.n() {
            row.push(ds.get(i, j, c).map(|v| v.to_string()).unwrap_or_default());
        }
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::schema(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::schema(e.to_string()))
}

/// Parse a matrix CSV into `(row names, column names, cells)`.
pub fn parse_matrix_csv(text: &str) -> Result<(Vec<String>, Vec<String>, Vec<Vec<Option<f64>>>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let cols: Vec<String> = rdr.headers()?.iter().skip(1).map(str::to_string).collect();
    let mut rows = Vec::new();
    let mut cells = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != cols.len() + 1 {
            return Err(Error::schema(format!(
                "matrix row {} has {} cells, expected {}",
                line + 1,
                rec.len() - 1,
                cols.len()
            )));
        }
        rows.push(rec[0].to_string());
        let row = rec
            .iter()
            .skip(1)
            .map(|s| {
                if s.is_empty() || s.eq_ignore_ascii_case("nan") || s.eq_ignore_ascii_case("n/a") {
                    Ok(None)
                } else {
                    s.parse::<f64>()
                        .map(Some)
                        .map_err(|_| Error::schema(format!("bad coefficient `{s}`")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        cells.push(row);
    }
    Ok((rows, cols, cells))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Write `manifest.json` plus one `<channel>.csv` per channel into `dir`.
pub fn write_dataset(ds: &FrictionDataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = BTreeMap::new();
    for (c, label) in ds.channels().iter().enumerate() {
        let file = format!("{label}.csv");
        let path = dir.join(&file);
        fs::write(&path, write_matrix_csv(ds, c)?).map_err(|e| Error::io(&path, e))?;
        files.insert(label.clone(), file);
    }
    let manifest = DatasetManifest {
        materials: ds.library().names().to_vec(),
        classes: ds.library().classes().to_vec(),
        channels: ds.channels().to_vec(),
        files,
        mu_max: ds.mu_max(),
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Load a dataset from its manifest. Channel files are resolved relative
/// to the manifest's directory; rows and columns may come in any order.
pub fn read_dataset(manifest_path: &Path) -> Result<FrictionDataset> {
    let manifest: DatasetManifest = serde_json::from_str(&read_text(manifest_path)?)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let library = MaterialLibrary::new(manifest.materials.clone(), manifest.classes.clone())?;
    let mut ds = FrictionDataset::new(library, manifest.channels.clone(), manifest.mu_max)?;
    for (c, label) in manifest.channels.iter().enumerate() {
        let file = manifest.files.get(label).ok_or_else(|| {
            Error::schema(format!("manifest lists no file for channel `{label}`"))
        })?;
        let (rows, cols, cells) = parse_matrix_csv(&read_text(&base.join(file))?)?;
        let ri: Vec<usize> = rows
            .iter()
            .map(|r| ds.library().index_of(r))
            .collect::<Result<_>>()?;
        let ci: Vec<usize> = cols
            .iter()
            .map(|r| ds.library().index_of(r))
            .collect::<Result<_>>()?;
        for (r, row) in cells.iter().enumerate() {
            for (k, cell) in row.iter().enumerate() {
                if let Some(v) = cell {
                    ds.set(ri[r], ci[k], c, *v)
                        .map_err(|e| Error::schema(format!("{file}: {e}")))?;
                }
            }
        }
    }
    Ok(ds)
}
