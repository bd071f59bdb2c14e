//! On-disk volume format: a key-value text header plus a raw payload.
//!
//! ```text
//! format = rgmm-volume
//! version = 1
//! dims = 32 32 32
//! spacing = 1.33 1.33 1.33
//! dtype = float32
//! byte_order = little-endian
//! data_file = ct.raw
//! ```
//!
//! The payload holds `nx * ny * nz` little-endian `f32` values in x-fastest
//! order. `data_file` is resolved relative to the header's directory.
//! Blank lines and lines starting with `#` are ignored.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::{PatientDataset, Volume};
use crate::error::{Error, Result};

pub const HEADER_EXTENSION: &str = "vhdr";
pub const PAYLOAD_EXTENSION: &str = "raw";
const FORMAT_TAG: &str = "rgmm-volume";
const FORMAT_VERSION: &str = "1";

pub fn read_volume(header_path: impl AsRef<Path>) -> Result<Volume> {
    let header_path = header_path.as_ref();
    let text = fs::read_to_string(header_path).map_err(|e| Error::io(header_path, e))?;
    let header = parse_header(&text)?;

    let dims = parse_triple::<usize>(&header, "dims")?;
    let spacing = parse_triple::<f64>(&header, "spacing")?;
    expect_value(&header, "format", FORMAT_TAG)?;
    expect_value(&header, "version", FORMAT_VERSION)?;
    expect_value(&header, "dtype", "float32")?;
    expect_value(&header, "byte_order", "little-endian")?;
    let data_file = require(&header, "data_file")?;

    let payload_path = header_path.parent().unwrap_or_else(|| Path::new(".")).join(data_file);
    let bytes = fs::read(&payload_path).map_err(|e| Error::io(&payload_path, e))?;
    let n: usize = dims.iter().product();
    if bytes.len() != n * 4 {
        return Err(Error::MalformedHeader(format!(
            "{}: payload has {} bytes, header dims {:?} need {}",
            payload_path.display(),
            bytes.len(),
            dims,
            n * 4
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Volume::new(dims, spacing, data).map_err(|e| Error::MalformedHeader(format!("{}: {e}", header_path.display())))
}

/// Writes `<stem>.vhdr` and `<stem>.raw` side by side. Returns the header path.
pub fn write_volume(volume: &Volume, header_path: impl AsRef<Path>) -> Result<PathBuf> {
    let header_path = header_path.as_ref().with_extension(HEADER_EXTENSION);
    let payload_path = header_path.with_extension(PAYLOAD_EXTENSION);
    let payload_name = payload_path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::InvalidArgument(format!("bad volume path {}", header_path.display())))?;

    let [nx, ny, nz] = volume.dims();
    let [sx, sy, sz] = volume.spacing();
    let header = format!(
        "format = {FORMAT_TAG}\nversion = {FORMAT_VERSION}\ndims = {nx} {ny} {nz}\nspacing = {sx} {sy} {sz}\n\
         dtype = float32\nbyte_order = little-endian\ndata_file = {payload_name}\n"
    );
    let mut bytes = Vec::with_capacity(volume.len() * 4);
    for v in volume.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(dir) = header_path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(&payload_path, bytes).map_err(|e| Error::io(&payload_path, e))?;
    fs::write(&header_path, header).map_err(|e| Error::io(&header_path, e))?;
    Ok(header_path)
}

/// Header paths for one patient's volumes.
#[derive(Debug, Clone)]
pub struct PatientPaths {
    pub mr: Vec<PathBuf>,
    pub ct: PathBuf,
    pub mask: PathBuf,
}

impl PatientPaths {
    /// Standard directory layout: `mr0.vhdr .. mr{d-1}.vhdr`, `ct.vhdr`,
    /// `mask.vhdr`. The channel count is discovered from the files present.
    pub fn in_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mr = mr_headers_in(dir)?;
        Ok(Self {
            mr,
            ct: dir.join(format!("ct.{HEADER_EXTENSION}")),
            mask: dir.join(format!("mask.{HEADER_EXTENSION}")),
        })
    }
}

/// `mr0.vhdr`, `mr1.vhdr`, ... up to the first gap.
pub fn mr_headers_in(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut mr = Vec::new();
    loop {
        let p = dir.join(format!("mr{}.{HEADER_EXTENSION}", mr.len()));
        if !p.is_file() {
            break;
        }
        mr.push(p);
    }
    if mr.is_empty() {
        return Err(Error::MalformedHeader(format!("no mr0.{HEADER_EXTENSION} in {}", dir.display())));
    }
    Ok(mr)
}

pub fn load_patient(paths: &PatientPaths, patient_id: impl Into<String>) -> Result<PatientDataset> {
    let mr = paths.mr.iter().map(read_volume).collect::<Result<Vec<_>>>()?;
    let ct = read_volume(&paths.ct)?;
    let mask = read_volume(&paths.mask)?;
    PatientDataset::new(patient_id, mr, ct, mask)
}

pub fn write_patient(patient: &PatientDataset, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut written = Vec::new();
    for (c, v) in patient.mr_channels().iter().enumerate() {
        written.push(write_volume(v, dir.join(format!("mr{c}")))?);
    }
    written.push(write_volume(patient.ct(), dir.join("ct"))?);
    written.push(write_volume(patient.mask(), dir.join("mask"))?);
    Ok(written)
}

/// Loads every patient directory under `root` (a directory counts when it
/// holds `ct.vhdr`), in lexicographic order of directory name. The
/// directory name becomes the patient id.
pub fn load_cohort(root: impl AsRef<Path>) -> Result<Vec<PatientDataset>> {
    let root = root.as_ref();
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let path = entry.path();
        if path.join(format!("ct.{HEADER_EXTENSION}")).is_file() {
            dirs.push(path);
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::EmptyInput("cohort directory holds no patients"));
    }
    dirs.iter()
        .map(|d| {
            let id = d.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
            load_patient(&PatientPaths::in_dir(d)?, id)
        })
        .collect()
}

fn parse_header(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::MalformedHeader(format!("line {}: expected `key = value`", lineno + 1)))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn require<'a>(header: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str> {
    header
        .get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::MalformedHeader(format!("missing key `{key}`")))
}

fn expect_value(header: &BTreeMap<String, String>, key: &str, want: &str) -> Result<()> {
    let got = require(header, key)?;
    if got != want {
        return Err(Error::MalformedHeader(format!("`{key}` is `{got}`, expected `{want}`")));
    }
    Ok(())
}

fn parse_triple<T: std::str::FromStr>(header: &BTreeMap<String, String>, key: &str) -> Result<[T; 3]> {
    let raw = require(header, key)?;
    let parts: Vec<T> = raw
        .split_whitespace()
        .map(|s| s.parse::<T>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::MalformedHeader(format!("`{key}` is not a numeric triple: `{raw}`")))?;
    <[T; 3]>::try_from(parts).map_err(|_| Error::MalformedHeader(format!("`{key}` needs exactly 3 values: `{raw}`")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_errors_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let v = Volume::new([2, 1, 1], [1.0, 2.0, 0.5], vec![1.5, -3.0]).unwrap();
        let hdr = write_volume(&v, dir.path().join("a")).unwrap();
        assert_eq!(read_volume(&hdr).unwrap(), v);

        let text = fs::read_to_string(&hdr).unwrap();
        fs::write(&hdr, text.replace("dims = 2 1 1", "dims = 2 1")).unwrap();
        assert!(matches!(read_volume(&hdr), Err(Error::MalformedHeader(_))));

        fs::write(&hdr, text.replace("float32", "float64")).unwrap();
        assert!(matches!(read_volume(&hdr), Err(Error::MalformedHeader(_))));

        fs::write(&hdr, text.replace("dims = 2 1 1", "dims = 3 1 1")).unwrap();
        assert!(matches!(read_volume(&hdr), Err(Error::MalformedHeader(_))));
    }
}
