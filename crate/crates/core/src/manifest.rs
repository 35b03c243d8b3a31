//! Dataset manifest CSV: one row per scene.
//!
//! Header `scene_id,raster_path,t,y,u_true,p_true,cov1,cov2`, optionally
//! followed by `pi_hat`. Ground-truth cells may be empty for observational
//! data; raster paths are relative to the manifest's directory.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::dgp::SceneRecord;
use crate::error::{Error, Result};

pub const COLUMNS: [&str; 8] = ["scene_id", "raster_path", "t", "y", "u_true", "p_true", "cov1", "cov2"];
pub const PI_HAT: &str = "pi_hat";

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub scene_id: u64,
    pub raster_path: String,
    pub t: u8,
    pub y: f64,
    pub u_true: Option<f64>,
    pub p_true: Option<f64>,
    pub covariates: [f64; 2],
    pub pi_hat: Option<f64>,
}

impl From<&SceneRecord> for ManifestRow {
    fn from(r: &SceneRecord) -> Self {
        ManifestRow {
            scene_id: r.scene_id,
            raster_path: r.raster_ref.clone(),
            t: r.t,
            y: r.y,
            u_true: Some(r.u_true),
            p_true: Some(r.p_true),
            covariates: [r.covariates.first().copied().unwrap_or(0.0), r.covariates.get(1).copied().unwrap_or(0.0)],
            pi_hat: None,
        }
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Serializes rows; the `pi_hat` column is written when any row has one.
pub fn write_manifest<W: Write>(rows: &[ManifestRow], out: W) -> Result<()> {
    let with_pi = rows.iter().any(|r| r.pi_hat.is_some());
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    let mut header: Vec<&str> = COLUMNS.to_vec();
    if with_pi {
        header.push(PI_HAT);
    }
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.scene_id.to_string(),
            r.raster_path.clone(),
            r.t.to_string(),
            r.y.to_string(),
            opt(r.u_true),
            opt(r.p_true),
            r.covariates[0].to_string(),
            r.covariates[1].to_string(),
        ];
        if with_pi {
            rec.push(opt(r.pi_hat));
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("manifest", e))?;
    Ok(())
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, row: usize) -> Result<T> {
    let text = rec.get(i).unwrap_or_default().trim();
    text.parse()
        .map_err(|_| Error::format(format!("row {row} column {}", header_name(i)), format!("cannot parse `{text}`")))
}

fn header_name(i: usize) -> &'static str {
    COLUMNS.get(i).copied().unwrap_or(PI_HAT)
}

fn finite(v: f64, i: usize, row: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::format(format!("row {row} column {}", header_name(i)), "value is not finite"))
    }
}

fn optional(rec: &csv::StringRecord, i: usize, row: usize) -> Result<Option<f64>> {
    if rec.get(i).unwrap_or_default().trim().is_empty() {
        Ok(None)
    } else {
        field(rec, i, row).and_then(|v| finite(v, i, row)).map(Some)
    }
}

/// Parses manifest text. Rows are numbered from 1 in error messages.
pub fn parse_manifest(bytes: &[u8]) -> Result<Vec<ManifestRow>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
    let header = rdr.headers()?.clone();
    let names: Vec<&str> = header.iter().map(str::trim).collect();
    let with_pi = match names.as_slice() {
        n if n == COLUMNS => false,
        [head @ .., last] if head == COLUMNS && *last == PI_HAT => true,
        _ => return Err(Error::format("header", format!("expected `{}` with optional `{PI_HAT}`", COLUMNS.join(",")))),
    };
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        let t: u8 = field(&rec, 2, row)?;
        if t > 1 {
            return Err(Error::format(format!("row {row} column t"), "treatment must be 0 or 1"));
        }
        let p_true = optional(&rec, 5, row)?;
        let pi_hat = if with_pi { optional(&rec, 8, row)? } else { None };
        for (p, col) in [(p_true, 5), (pi_hat, 8)] {
            if p.is_some_and(|p| !(p > 0.0 && p < 1.0)) {
                return Err(Error::format(
                    format!("row {row} column {}", header_name(col)),
                    "probability must lie in (0, 1)",
                ));
            }
        }
        rows.push(ManifestRow {
            scene_id: field(&rec, 0, row)?,
            raster_path: rec.get(1).unwrap_or_default().to_string(),
            t,
            y: finite(field(&rec, 3, row)?, 3, row)?,
            u_true: optional(&rec, 4, row)?,
            p_true,
            covariates: [finite(field(&rec, 6, row)?, 6, row)?, finite(field(&rec, 7, row)?, 7, row)?],
            pi_hat,
        });
    }
    Ok(rows)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRow>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&bytes)
}

/// Resolves a row's raster path against the manifest location.
pub fn raster_location(manifest: &Path, row: &ManifestRow) -> PathBuf {
    let p = Path::new(&row.raster_path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest.parent().unwrap_or(Path::new(".")).join(p)
    }
}
