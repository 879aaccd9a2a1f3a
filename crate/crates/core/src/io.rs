//! Cube files and atomic writes.
//!
//! A cube is two files: `X.cube`, the raw little-endian band-sequential
//! payload, and `X.cube.json`, its header. ENVI images (`.hdr` plus binary)
//! can be imported for public datasets.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cube::SpectralCube;
use crate::error::{FusionError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

impl std::str::FromStr for Dtype {
    type Err = FusionError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Dtype::F32),
            "f64" => Ok(Dtype::F64),
            other => Err(FusionError::param(format!(
                "dtype must be f32 or f64, got {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CubeHeader {
    pub rows: usize,
    pub cols: usize,
    pub bands: usize,
    pub dtype: Dtype,
    pub interleave: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub band_centers: Option<Vec<f64>>,
    #[serde(default)]
    pub provenance: serde_json::Value,
}

impl CubeHeader {
    pub fn payload_len(&self) -> usize {
        self.rows * self.cols * self.bands * self.dtype.size()
    }
}

/// `X.cube` → `X.cube.json`
pub fn header_path(payload: &Path) -> PathBuf {
    let mut name = payload.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

/// Writes `bytes` to a temporary file next to `path`, then renames it over
/// `path`, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| FusionError::param(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = dir.join(tmp_name);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

pub fn encode(cube: &SpectralCube, dtype: Dtype) -> Vec<u8> {
    let mut out = Vec::with_capacity(cube.data().len() * dtype.size());
    match dtype {
        Dtype::F32 => cube
            .data()
            .iter()
            .for_each(|v| out.extend((*v as f32).to_le_bytes())),
        Dtype::F64 => cube.data().iter().for_each(|v| out.extend(v.to_le_bytes())),
    }
    out
}

fn decode(bytes: &[u8], dtype: Dtype) -> Vec<f64> {
    match dtype {
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Dtype::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    }
}

/// Writes `path` and its JSON header atomically. `f32` output rounds.
pub fn write_cube(
    path: &Path,
    cube: &SpectralCube,
    dtype: Dtype,
    provenance: serde_json::Value,
) -> Result<()> {
    let header = CubeHeader {
        rows: cube.rows(),
        cols: cube.cols(),
        bands: cube.bands(),
        dtype,
        interleave: "bsq".into(),
        band_centers: cube.band_centers().map(<[f64]>::to_vec),
        provenance,
    };
    write_atomic(path, &encode(cube, dtype))?;
    let mut json = serde_json::to_vec_pretty(&header)?;
    json.push(b'\n');
    write_atomic(&header_path(path), &json)
}

pub fn read_header(path: &Path) -> Result<CubeHeader> {
    let hp = header_path(path);
    let text = fs::read(&hp).map_err(|e| FusionError::Format(format!("{}: {e}", hp.display())))?;
    let header: CubeHeader = serde_json::from_slice(&text)
        .map_err(|e| FusionError::Format(format!("{}: {e}", hp.display())))?;
    if header.interleave != "bsq" {
        return Err(FusionError::Format(format!(
            "{}: interleave must be \"bsq\", got {:?}",
            hp.display(),
            header.interleave
        )));
    }
    if header.rows == 0 || header.cols == 0 || header.bands == 0 {
        return Err(FusionError::Format(format!(
            "{}: dimensions must be positive",
            hp.display()
        )));
    }
    Ok(header)
}

/// Reads a cube written by [`write_cube`], widening `f32` payloads.
pub fn read_cube(path: &Path) -> Result<(SpectralCube, CubeHeader)> {
    let header = read_header(path)?;
    let bytes =
        fs::read(path).map_err(|e| FusionError::Format(format!("{}: {e}", path.display())))?;
    let expect = header.payload_len();
    if bytes.len() != expect {
        return Err(FusionError::Format(format!(
            "{}: payload is {} bytes but {}x{}x{} {:?} needs {expect}",
            path.display(),
            bytes.len(),
            header.rows,
            header.cols,
            header.bands,
            header.dtype
        )));
    }
    let mut cube = SpectralCube::new(
        header.rows,
        header.cols,
        header.bands,
        decode(&bytes, header.dtype),
    )
    .map_err(|e| FusionError::Format(format!("{}: {e}", path.display())))?;
    if let Some(centers) = &header.band_centers {
        cube = cube.with_band_centers(centers.clone())?;
    }
    Ok((cube, header))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnviHeader {
    pub samples: usize,
    pub lines: usize,
    pub bands: usize,
    pub data_type: u32,
    pub interleave: String,
    pub byte_order: u32,
    pub header_offset: usize,
    pub wavelength: Option<Vec<f64>>,
    pub band_names: Option<Vec<String>>,
}

/// Parses the `key = value` / `key = { a, b }` syntax of an ENVI header.
pub fn parse_envi_header(text: &str) -> Result<EnviHeader> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("ENVI") {
        return Err(FusionError::Format(
            "ENVI header must start with \"ENVI\"".into(),
        ));
    }
    let mut fields = std::collections::HashMap::new();
    let rest: Vec<&str> = lines.collect();
    let mut i = 0;
    while i < rest.len() {
        let line = rest[i];
        i += 1;
        let Some((key, value)) = line.split_once('=') else {
            continue;
        };
        let mut value = value.trim().to_string();
        if value.starts_with('{') {
            while !value.contains('}') && i < rest.len() {
                value.push(' ');
                value.push_str(rest[i].trim());
                i += 1;
            }
            value = value
                .trim_start_matches('{')
                .trim_end_matches('}')
                .trim()
                .to_string();
        }
        fields.insert(key.trim().to_lowercase(), value);
    }
    let num = |key: &str| -> Result<usize> {
        fields
            .get(key)
            .ok_or_else(|| FusionError::Format(format!("ENVI header lacks \"{key}\"")))?
            .parse()
            .map_err(|_| {
                FusionError::Format(format!("ENVI header field \"{key}\" is not an integer"))
            })
    };
    let list = |key: &str| {
        fields.get(key).map(|v| {
            v.split(',')
                .map(|s| s.trim().to_string())
                .collect::<Vec<_>>()
        })
    };
    let wavelength = match list("wavelength") {
        Some(items) => Some(
            items
                .iter()
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| FusionError::Format("ENVI wavelength list is not numeric".into()))?,
        ),
        None => None,
    };
    Ok(EnviHeader {
        samples: num("samples")?,
        lines: num("lines")?,
        bands: num("bands")?,
        data_type: num("data type")? as u32,
        interleave: fields
            .get("interleave")
            .map(|s| s.to_lowercase())
            .unwrap_or_else(|| "bsq".into()),
        byte_order: fields
            .get("byte order")
            .map(|s| s.parse().unwrap_or(0))
            .unwrap_or(0),
        header_offset: fields
            .get("header offset")
            .map(|s| s.parse().unwrap_or(0))
            .unwrap_or(0),
        wavelength,
        band_names: list("band names"),
    })
}

fn envi_sample_size(data_type: u32) -> Result<usize> {
    Ok(match data_type {
        1 => 1,
        2 | 12 => 2,
        3 | 4 | 13 => 4,
        5 => 8,
        other => {
            return Err(FusionError::Format(format!(
                "unsupported ENVI data type {other}"
            )))
        }
    })
}

fn envi_value(bytes: &[u8], data_type: u32, big_endian: bool) -> f64 {
    macro_rules! read {
        ($t:ty) => {{
            let arr = bytes.try_into().unwrap();
            (if big_endian {
                <$t>::from_be_bytes(arr)
            } else {
                <$t>::from_le_bytes(arr)
            }) as f64
        }};
    }
    match data_type {
        1 => bytes[0] as f64,
        2 => read!(i16),
        12 => read!(u16),
        3 => read!(i32),
        13 => read!(u32),
        4 => read!(f32),
        _ => read!(f64),
    }
}

/// Imports an ENVI image given its `.hdr`. The binary is the header path
/// without extension, or with `.img`, `.dat`, `.raw` or `.bsq`. Band centers
/// come from the `wavelength` list when it is strictly monotonic.
pub fn read_envi(hdr: &Path) -> Result<SpectralCube> {
    let text = fs::read_to_string(hdr)
        .map_err(|e| FusionError::Format(format!("{}: {e}", hdr.display())))?;
    let h = parse_envi_header(&text)?;
    let stem = hdr.with_extension("");
    let data_path = std::iter::once(stem.clone())
        .chain(
            ["img", "dat", "raw", "bsq"]
                .iter()
                .map(|e| stem.with_extension(e)),
        )
        .find(|p| p.is_file())
        .ok_or_else(|| {
            FusionError::Format(format!("no ENVI data file next to {}", hdr.display()))
        })?;
    let bytes = fs::read(&data_path)?;
    let size = envi_sample_size(h.data_type)?;
    let count = h.samples * h.lines * h.bands;
    let expect = h.header_offset + count * size;
    if bytes.len() < expect {
        return Err(FusionError::Format(format!(
            "{}: {} bytes, header implies at least {expect}",
            data_path.display(),
            bytes.len()
        )));
    }
    let body = &bytes[h.header_offset..expect];
    let (rows, cols, bands) = (h.lines, h.samples, h.bands);
    let value = |i: usize| {
        envi_value(
            &body[i * size..(i + 1) * size],
            h.data_type,
            h.byte_order == 1,
        )
    };
    let index: Box<dyn Fn(usize, usize, usize) -> usize> = match h.interleave.as_str() {
        "bsq" => Box::new(move |r, c, b| (b * rows + r) * cols + c),
        "bil" => Box::new(move |r, c, b| (r * bands + b) * cols + c),
        "bip" => Box::new(move |r, c, b| (r * cols + c) * bands + b),
        other => {
            return Err(FusionError::Format(format!(
                "unsupported ENVI interleave {other:?}"
            )))
        }
    };
    let cube = SpectralCube::from_fn(rows, cols, bands, |r, c, b| value(index(r, c, b)))?;
    match h.wavelength {
        Some(w) if w.len() == bands => Ok(cube.clone().with_band_centers(w).unwrap_or(cube)),
        _ => Ok(cube),
    }
}
