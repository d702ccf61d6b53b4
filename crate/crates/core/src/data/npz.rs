//! NPZ archives: ZIP files of `.npy` members (stored or deflate).

use std::collections::BTreeMap;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use zip::result::ZipError;
use zip::write::SimpleFileOptions;
use zip::{CompressionMethod, DateTime, ZipArchive, ZipWriter};

use super::npy::{parse_npy, NpyArray};
use crate::error::{data_err, Error, Result};

fn zip_err(context: &str, e: ZipError) -> Error {
    match e {
        ZipError::Io(io) => Error::Io(io),
        ZipError::UnsupportedArchive(why) => data_err(format!("{context}: unsupported archive feature: {why}")),
        other => data_err(format!("{context}: {other}")),
    }
}

/// Reads every `.npy` member of an NPZ archive held in memory. Keys are the
/// member names without the `.npy` suffix.
pub fn read_npz_bytes(bytes: &[u8]) -> Result<BTreeMap<String, NpyArray>> {
    let mut zip = ZipArchive::new(Cursor::new(bytes)).map_err(|e| zip_err("not a readable ZIP archive", e))?;
    let mut out = BTreeMap::new();
    for i in 0..zip.len() {
        let mut f = zip.by_index(i).map_err(|e| zip_err("reading member", e))?;
        let name = f.name().to_string();
        match f.compression() {
            CompressionMethod::Stored | CompressionMethod::Deflated => {}
            other => {
                return Err(data_err(format!(
                    "member {name}: unsupported compression method {other:?} (only stored and deflate)"
                )))
            }
        }
        let Some(key) = name.strip_suffix(".npy") else { continue };
        let mut buf = Vec::with_capacity(f.size() as usize);
        f.read_to_end(&mut buf).map_err(|e| data_err(format!("member {name}: {e}")))?;
        let arr = parse_npy(&buf).map_err(|e| data_err(format!("member {name}: {e}")))?;
        out.insert(key.to_string(), arr);
    }
    Ok(out)
}

pub fn read_npz(path: impl AsRef<Path>) -> Result<BTreeMap<String, NpyArray>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| data_err(format!("cannot read {}: {e}", path.display())))?;
    read_npz_bytes(&bytes)
}

/// Builds an NPZ archive; members are named `<key>.npy` and carry a fixed
/// timestamp so identical inputs give identical bytes.
pub fn write_npz_bytes(members: &[(&str, &NpyArray)], compress: bool) -> Result<Vec<u8>> {
    let mut zip = ZipWriter::new(Cursor::new(Vec::new()));
    let method = if compress { CompressionMethod::Deflated } else { CompressionMethod::Stored };
    let opts = SimpleFileOptions::default()
        .compression_method(method)
        .last_modified_time(DateTime::default());
    for (key, arr) in members {
        zip.start_file(format!("{key}.npy"), opts)
            .map_err(|e| zip_err("writing member", e))?;
        zip.write_all(&arr.to_bytes())?;
    }
    let cursor = zip.finish().map_err(|e| zip_err("finishing archive", e))?;
    Ok(cursor.into_inner())
}

pub fn write_npz(path: impl AsRef<Path>, members: &[(&str, &NpyArray)], compress: bool) -> Result<()> {
    std::fs::write(path, write_npz_bytes(members, compress)?)?;
    Ok(())
}
