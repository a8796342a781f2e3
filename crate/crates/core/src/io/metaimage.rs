//! MetaImage (`.mhd` + `.raw`) reader and writer.
//!
//! Only the subset needed here: 3-D, little-endian, `MET_SHORT` or
//! `MET_FLOAT` elements stored in a separate data file.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::volume::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementType {
    Short,
    Float,
}

impl ElementType {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "MET_SHORT" => Some(Self::Short),
            "MET_FLOAT" => Some(Self::Float),
            _ => None,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Self::Short => "MET_SHORT",
            Self::Float => "MET_FLOAT",
        }
    }

    fn size(self) -> usize {
        match self {
            Self::Short => 2,
            Self::Float => 4,
        }
    }
}

fn parse_list<T: std::str::FromStr>(path: &Path, key: &str, value: &str, n: usize) -> Result<Vec<T>> {
    let items: Vec<T> = value
        .split_whitespace()
        .map(|s| s.parse::<T>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::format(path, key, format!("cannot parse '{value}'")))?;
    if items.len() != n {
        return Err(Error::format(
            path,
            key,
            format!("expected {n} values, got {}", items.len()),
        ));
    }
    Ok(items)
}

/// Reads a MetaImage header and its raw data file. The volume is returned
/// uncalibrated.
pub fn read_metaimage(header: &Path) -> Result<Volume> {
    let text = fs::read_to_string(header).map_err(|e| Error::io(header, e))?;
    let mut fields = HashMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(header, line, "expected 'Key = Value'"))?;
        fields.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get = |key: &str| {
        fields
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::format(header, key, "missing"))
    };

    if let Some(t) = fields.get("ObjectType") {
        if t != "Image" {
            return Err(Error::format(header, "ObjectType", format!("unsupported '{t}'")));
        }
    }
    let ndims: usize = get("NDims")?
        .parse()
        .map_err(|_| Error::format(header, "NDims", "not an integer"))?;
    if ndims != 3 {
        return Err(Error::format(
            header,
            "NDims",
            format!("only 3-D images supported, got {ndims}"),
        ));
    }
    for key in ["BinaryDataByteOrderMSB", "ElementByteOrderMSB"] {
        if let Some(v) = fields.get(key) {
            if v.eq_ignore_ascii_case("true") {
                return Err(Error::format(header, key, "big-endian data not supported"));
            }
        }
    }
    if let Some(v) = fields.get("CompressedData") {
        if v.eq_ignore_ascii_case("true") {
            return Err(Error::format(header, "CompressedData", "compressed data not supported"));
        }
    }
    let dims: Vec<usize> = parse_list(header, "DimSize", get("DimSize")?, 3)?;
    let spacing: Vec<f64> = match fields.get("ElementSpacing").or_else(|| fields.get("ElementSize")) {
        Some(v) => parse_list(header, "ElementSpacing", v, 3)?,
        None => vec![1.0; 3],
    };
    let origin: Vec<f64> = match fields.get("Offset").or_else(|| fields.get("Origin")) {
        Some(v) => parse_list(header, "Offset", v, 3)?,
        None => vec![0.0; 3],
    };
    let etype_str = get("ElementType")?;
    let etype = ElementType::parse(etype_str)
        .ok_or_else(|| Error::format(header, "ElementType", format!("unsupported '{etype_str}'")))?;
    let data_file = get("ElementDataFile")?;
    if data_file == "LOCAL" || data_file.starts_with("LIST") || data_file.contains('%') {
        return Err(Error::format(
            header,
            "ElementDataFile",
            format!("only a single external data file is supported, got '{data_file}'"),
        ));
    }
    let raw_path = header.parent().unwrap_or(Path::new(".")).join(data_file);
    let bytes = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;

    let n: usize = dims.iter().product();
    let need = n * etype.size();
    if bytes.len() < need {
        return Err(Error::format(
            &raw_path,
            "ElementDataFile",
            format!("holds {} bytes, {need} expected", bytes.len()),
        ));
    }
    let data: Vec<f64> = match etype {
        ElementType::Short => bytes[..need]
            .chunks_exact(2)
            .map(|b| i16::from_le_bytes([b[0], b[1]]) as f64)
            .collect(),
        ElementType::Float => bytes[..need]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect(),
    };
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::format(&raw_path, "ElementDataFile", "non-finite voxel values"));
    }
    Volume::new(
        [dims[0], dims[1], dims[2]],
        [spacing[0], spacing[1], spacing[2]],
        [origin[0], origin[1], origin[2]],
        data,
    )
    .map_err(|e| Error::format(header, "DimSize", e.to_string()))
}

/// Header text and raw bytes for `volume` stored as `etype`; `data_file` is
/// the raw file name recorded in the header.
pub fn encode_metaimage(volume: &Volume, etype: ElementType, data_file: &str) -> (String, Vec<u8>) {
    let d = volume.dims();
    let s = volume.spacing();
    let o = volume.origin();
    let header = format!(
        "ObjectType = Image\nNDims = 3\nBinaryData = True\nBinaryDataByteOrderMSB = False\nCompressedData = False\n\
         Offset = {} {} {}\nElementSpacing = {} {} {}\nDimSize = {} {} {}\nElementType = {}\nElementDataFile = {}\n",
        o[0],
        o[1],
        o[2],
        s[0],
        s[1],
        s[2],
        d[0],
        d[1],
        d[2],
        etype.name(),
        data_file
    );
    let mut bytes = Vec::with_capacity(volume.data().len() * etype.size());
    for &v in volume.data() {
        match etype {
            ElementType::Short => {
                let q = v.round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
                bytes.extend_from_slice(&q.to_le_bytes());
            }
            ElementType::Float => bytes.extend_from_slice(&(v as f32).to_le_bytes()),
        }
    }
    (header, bytes)
}

/// Path of the raw companion file for a header path (`x.mhd` -> `x.raw`).
pub fn raw_path_for(header: &Path) -> PathBuf {
    header.with_extension("raw")
}

pub fn write_metaimage(volume: &Volume, header: &Path, etype: ElementType) -> Result<()> {
    let raw = raw_path_for(header);
    let name = raw
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::invalid(format!("bad output path {}", header.display())))?;
    let (text, bytes) = encode_metaimage(volume, etype, name);
    super::write_atomic(&raw, &bytes)?;
    super::write_atomic(header, text.as_bytes())
}
