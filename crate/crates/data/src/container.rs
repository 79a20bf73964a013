//! Two-file scene container: a JSON header (`.hsij`) next to raw payloads.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cube::{HsiCube, HsiDataset, LabelRaster, SplitMask};
use crate::error::{DataError, Result};

pub const MAGIC: &str = "HSIC1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub magic: String,
    pub bands: usize,
    pub height: usize,
    pub width: usize,
    pub classes: u16,
    #[serde(default)]
    pub class_names: Vec<String>,
    pub dtype: String,
    pub layout: String,
    pub labels_file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_file: Option<String>,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read_exact_len(path: &Path, what: &'static str, expected: u64) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(io(path))?;
    if bytes.len() as u64 != expected {
        return Err(DataError::ByteLength {
            what,
            expected,
            actual: bytes.len() as u64,
        });
    }
    Ok(bytes)
}

pub fn read_header(path: &Path) -> Result<Header> {
    let text = fs::read_to_string(path).map_err(io(path))?;
    // check the magic before the schema so a foreign file reports the right error
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| DataError::Header {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let magic = raw.get("magic").and_then(|m| m.as_str()).unwrap_or("");
    if magic != MAGIC {
        return Err(DataError::BadMagic {
            found: magic.to_string(),
        });
    }
    let h: Header = serde_json::from_value(raw).map_err(|e| DataError::Header {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    if h.dtype != "f32le" || h.layout != "bsq" {
        return Err(DataError::Header {
            path: path.to_path_buf(),
            msg: format!("unsupported dtype/layout {}/{}", h.dtype, h.layout),
        });
    }
    Ok(h)
}

/// Loads a scene given its header and cube payload paths. Label and mask
/// files are resolved relative to the header's directory.
pub fn load_cube(header_path: &Path, data_path: &Path) -> Result<HsiDataset> {
    let h = read_header(header_path)?;
    let dir = header_path.parent().unwrap_or(Path::new("."));
    let n = h.bands * h.height * h.width;
    let bytes = read_exact_len(data_path, "cube payload", 4 * n as u64)?;
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let cube = HsiCube::new(h.bands, h.height, h.width, data)?;

    let lp = dir.join(&h.labels_file);
    let px = h.height * h.width;
    let lb = read_exact_len(&lp, "labels", 2 * px as u64)?;
    let labels: Vec<u16> = lb.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
    let labels = LabelRaster::new(h.height, h.width, h.classes, labels)?;

    let mask = match &h.mask_file {
        Some(m) => {
            let mp = dir.join(m);
            let mb = read_exact_len(&mp, "mask", px as u64)?;
            Some(SplitMask::new(&labels, mb)?)
        }
        None => None,
    };
    let name = header_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    HsiDataset::new(name, cube, labels, mask, h.class_names)
}

/// Loads `<dir>/<name>.hsij` with its `<name>.hsib` payload.
pub fn load_named(dir: &Path, name: &str) -> Result<HsiDataset> {
    load_cube(&dir.join(format!("{name}.hsij")), &dir.join(format!("{name}.hsib")))
}

/// Paths written by [`save`].
#[derive(Debug, Clone)]
pub struct SavedPaths {
    pub header: PathBuf,
    pub data: PathBuf,
}

/// Writes `ds` as `<dir>/<name>.hsij` plus payload files.
pub fn save(ds: &HsiDataset, dir: &Path) -> Result<SavedPaths> {
    fs::create_dir_all(dir).map_err(io(dir))?;
    let name = &ds.name;
    let header = Header {
        magic: MAGIC.into(),
        bands: ds.cube.bands(),
        height: ds.cube.height(),
        width: ds.cube.width(),
        classes: ds.labels.classes(),
        class_names: ds.class_names.clone(),
        dtype: "f32le".into(),
        layout: "bsq".into(),
        labels_file: format!("{name}.labels.u16"),
        mask_file: ds.mask.as_ref().map(|_| format!("{name}.mask.u8")),
    };
    let hp = dir.join(format!("{name}.hsij"));
    let dp = dir.join(format!("{name}.hsib"));
    let text = serde_json::to_string_pretty(&header).expect("header serializes");
    fs::write(&hp, text).map_err(io(&hp))?;
    let bytes: Vec<u8> = ds.cube.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(&dp, bytes).map_err(io(&dp))?;
    let lp = dir.join(&header.labels_file);
    let lb: Vec<u8> = ds.labels.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(&lp, lb).map_err(io(&lp))?;
    if let (Some(m), Some(f)) = (&ds.mask, &header.mask_file) {
        let mp = dir.join(f);
        fs::write(&mp, m.data()).map_err(io(&mp))?;
    }
    Ok(SavedPaths { header: hp, data: dp })
}
