use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

use crate::Common;

/// Root for outputs: `--out`, else `$IRSNOMA_OUT/<leaf>`, else
/// `<run.output_dir>/<leaf>`.
pub fn out_dir(common: &Common, configured: &str, leaf: &str) -> PathBuf {
    if let Some(p) = &common.out {
        return p.clone();
    }
    let root = std::env::var_os("IRSNOMA_OUT").map(PathBuf::from).unwrap_or_else(|| PathBuf::from(configured));
    root.join(leaf)
}

pub fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Writes rows with a header through a temporary file, so readers never
/// see a half-written table.
pub fn write_csv<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<()> {
    let tmp = path.with_extension("csv.tmp");
    let file = fs::File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
    write_csv_to(file, header, rows)?;
    fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))
}

/// The header is written explicitly so an empty table still has one.
pub fn write_csv_to<T: Serialize>(out: impl Write, header: &[&str], rows: &[T]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))
}
