use std::path::Path;

use anyhow::{Context, Result};
use sha2::{Digest, Sha256};

/// Fixed 17-significant-digit form used for every real in reports.
pub fn real(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.16e}")
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 over the concatenated contents of `paths`.
pub fn digest_files(paths: &[impl AsRef<Path>]) -> Result<String> {
    let mut h = Sha256::new();
    for p in paths {
        let p = p.as_ref();
        let bytes = std::fs::read(p)
            .map_err(haan_core::Error::from)
            .with_context(|| format!("reading {}", p.display()))?;
        h.update(&bytes);
    }
    Ok(hex(&h.finalize()))
}

pub fn digest_chunks<'a>(chunks: impl IntoIterator<Item = &'a [u8]>) -> String {
    let mut h = Sha256::new();
    chunks.into_iter().for_each(|c| h.update(c));
    hex(&h.finalize())
}

pub fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path)
        .map_err(|e| haan_core::Error::Io(e.to_string()))
        .with_context(|| format!("creating {}", path.display()))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)
        .map_err(haan_core::Error::from)
        .with_context(|| format!("writing {}", path.display()))
}
