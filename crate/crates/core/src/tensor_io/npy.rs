//! Reader and writer for the NPY v1.0 array format, restricted to C-order
//! little-endian `f8`/`f4` arrays of rank 1 to 3.

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::error::{Error, Result};
use crate::framework::FeatureMap;
use crate::matcore::Mat;

const MAGIC: &[u8; 6] = b"\x93NUMPY";
const PREAMBLE: usize = 10;
const ALIGN: usize = 64;

/// Ways an NPY file can be rejected.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum NpyError {
    #[error("missing \\x93NUMPY magic string")]
    BadMagic,

    #[error("unsupported format version {0}.{1}, only 1.0 is supported")]
    UnsupportedVersion(u8, u8),

    #[error("fortran_order arrays are not supported")]
    FortranOrder,

    #[error("unsupported dtype {0:?}, expected '<f8' or '<f4'")]
    UnsupportedDtype(String),

    #[error("truncated file: expected {expected} bytes of {what}, found {found}")]
    Truncated {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("{0} bytes of trailing data after the array payload")]
    TrailingData(usize),

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("unsupported rank {0}, expected 1 to 3 dimensions")]
    UnsupportedRank(usize),
}

/// Element type stored in the file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F8,
    F4,
}

impl Dtype {
    pub fn descr(self) -> &'static str {
        match self {
            Dtype::F8 => "<f8",
            Dtype::F4 => "<f4",
        }
    }

    fn size(self) -> usize {
        match self {
            Dtype::F8 => 8,
            Dtype::F4 => 4,
        }
    }
}

/// Parsed NPY header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NpyHeader {
    pub dtype: Dtype,
    pub fortran_order: bool,
    pub shape: Vec<usize>,
    /// Total bytes before the payload.
    pub header_len: usize,
}

/// A loaded array: header plus payload widened to `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct NpyArray {
    pub header: NpyHeader,
    pub data: Vec<f64>,
}

impl NpyArray {
    /// Rank 1 loads as a column, rank 2 as is. Rank 3 `(d, H, W)` flattens the grid.
    pub fn to_mat(&self) -> Result<Mat> {
        let s = &self.header.shape;
        let (r, c) = match s.len() {
            1 => (s[0], 1),
            2 => (s[0], s[1]),
            _ => (s[0], s[1] * s[2]),
        };
        Mat::new(r, c, self.data.clone())
    }

    /// Feature map with the grid taken from a rank-3 shape, or `W = p, H = 1`
    /// for rank 2, unless overridden.
    pub fn to_feature_map(&self, width: Option<usize>, height: Option<usize>) -> Result<FeatureMap> {
        let x = self.to_mat()?;
        let p = x.cols();
        let (w, h) = match (width, height, self.header.shape.len()) {
            (Some(w), Some(h), _) => (w, h),
            (Some(w), None, _) => (w, if w > 0 && p % w == 0 { p / w } else { 0 }),
            (None, Some(h), _) => (if h > 0 && p % h == 0 { p / h } else { 0 }, h),
            (None, None, 3) => (self.header.shape[2], self.header.shape[1]),
            (None, None, _) => (p, 1),
        };
        FeatureMap::new(x, w, h)
    }
}

/// Header dictionary text for a C-order `<f8` array, without padding.
pub fn header_dict(dtype: Dtype, shape: &[usize]) -> String {
    let dims = match shape {
        [n] => format!("({n},)"),
        _ => format!(
            "({})",
            shape.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(", ")
        ),
    };
    format!(
        "{{'descr': '{}', 'fortran_order': False, 'shape': {dims}, }}",
        dtype.descr()
    )
}

/// Complete file bytes for an `<f8` array with the given shape.
pub fn encode(shape: &[usize], data: &[f64]) -> Vec<u8> {
    let dict = header_dict(Dtype::F8, shape);
    let unpadded = PREAMBLE + dict.len() + 1;
    let pad = (ALIGN - unpadded % ALIGN) % ALIGN;
    let header_len = dict.len() + pad + 1;
    let mut out = Vec::with_capacity(PREAMBLE + header_len + data.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header_len as u16).to_le_bytes());
    out.extend_from_slice(dict.as_bytes());
    out.extend(std::iter::repeat_n(b' ', pad));
    out.push(b'\n');
    for x in data {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

/// Parses complete file bytes.
pub fn decode(bytes: &[u8]) -> std::result::Result<NpyArray, NpyError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(NpyError::BadMagic);
    }
    if bytes.len() < PREAMBLE {
        return Err(NpyError::Truncated {
            what: "preamble",
            expected: PREAMBLE,
            found: bytes.len(),
        });
    }
    let (major, minor) = (bytes[6], bytes[7]);
    if (major, minor) != (1, 0) {
        return Err(NpyError::UnsupportedVersion(major, minor));
    }
    let hlen = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let body = &bytes[PREAMBLE..];
    if body.len() < hlen {
        return Err(NpyError::Truncated {
            what: "header",
            expected: hlen,
            found: body.len(),
        });
    }
    let text = std::str::from_utf8(&body[..hlen])
        .map_err(|_| NpyError::MalformedHeader("header is not ASCII".into()))?;
    let (dtype, fortran_order, shape) = parse_dict(text)?;
    if fortran_order {
        return Err(NpyError::FortranOrder);
    }
    if shape.is_empty() || shape.len() > 3 {
        return Err(NpyError::UnsupportedRank(shape.len()));
    }
    if shape.contains(&0) {
        return Err(NpyError::MalformedHeader(format!("zero-length dimension in {shape:?}")));
    }
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &n| acc.checked_mul(n))
        .ok_or_else(|| NpyError::MalformedHeader("shape overflows".into()))?;
    let payload = &body[hlen..];
    let expected = count * dtype.size();
    if payload.len() < expected {
        return Err(NpyError::Truncated {
            what: "payload",
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(NpyError::TrailingData(payload.len() - expected));
    }
    let data = match dtype {
        Dtype::F8 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect(),
        Dtype::F4 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")) as f64)
            .collect(),
    };
    Ok(NpyArray {
        header: NpyHeader {
            dtype,
            fortran_order,
            shape,
            header_len: PREAMBLE + hlen,
        },
        data,
    })
}

fn parse_dict(text: &str) -> std::result::Result<(Dtype, bool, Vec<usize>), NpyError> {
    let t = text.trim_end_matches(['\n', ' ', '\0']).trim();
    let inner = t
        .strip_prefix('{')
        .and_then(|s| s.strip_suffix('}'))
        .ok_or_else(|| NpyError::MalformedHeader(format!("not a dictionary: {t:?}")))?;

    let descr = value_after(inner, "descr")?;
    let descr = descr
        .split(['\'', '"'])
        .nth(1)
        .ok_or_else(|| NpyError::MalformedHeader("descr is not a string".into()))?;
    let dtype = match descr {
        "<f8" => Dtype::F8,
        "<f4" => Dtype::F4,
        other => return Err(NpyError::UnsupportedDtype(other.to_string())),
    };

    let fortran = value_after(inner, "fortran_order")?;
    let fortran_order = if fortran.starts_with("True") {
        true
    } else if fortran.starts_with("False") {
        false
    } else {
        return Err(NpyError::MalformedHeader("fortran_order is not a boolean".into()));
    };

    let shape_text = value_after(inner, "shape")?;
    let tuple = shape_text
        .strip_prefix('(')
        .and_then(|s| s.split(')').next())
        .ok_or_else(|| NpyError::MalformedHeader("shape is not a tuple".into()))?;
    let shape = tuple
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.trim_end_matches('L')
                .parse::<usize>()
                .map_err(|_| NpyError::MalformedHeader(format!("bad dimension {s:?}")))
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok((dtype, fortran_order, shape))
}

fn value_after<'a>(dict: &'a str, key: &str) -> std::result::Result<&'a str, NpyError> {
    for quote in ['\'', '"'] {
        let pat = format!("{quote}{key}{quote}");
        if let Some(pos) = dict.find(&pat) {
            let rest = dict[pos + pat.len()..].trim_start();
            let rest = rest
                .strip_prefix(':')
                .ok_or_else(|| NpyError::MalformedHeader(format!("no ':' after {key}")))?;
            return Ok(rest.trim_start());
        }
    }
    Err(NpyError::MalformedHeader(format!("missing key {key:?}")))
}

fn npy_err(path: &Path, source: NpyError) -> Error {
    Error::Npy {
        path: path.to_path_buf(),
        source,
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn read_npy(path: impl AsRef<Path>) -> Result<NpyArray> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    decode(&bytes).map_err(|e| npy_err(path, e))
}

/// Only the header, for inspection.
pub fn read_npy_header(path: impl AsRef<Path>) -> Result<NpyHeader> {
    read_npy(path).map(|a| a.header)
}

/// Writes a matrix as a rank-2 `<f8` array.
pub fn write_npy(mat: &Mat, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode(&[mat.rows(), mat.cols()], mat.data()))
}

/// Writes a vector as a rank-1 `<f8` array.
pub fn write_npy_vector(v: &[f64], path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode(&[v.len()], v))
}

/// Writes a `(d, H, W)` rank-3 `<f8` array from a feature map.
pub fn write_npy_feature_map(fm: &FeatureMap, path: impl AsRef<Path>) -> Result<()> {
    let shape = [fm.x().rows(), fm.height(), fm.width()];
    write_bytes(path.as_ref(), &encode(&shape, fm.x().data()))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(bytes).map_err(|e| io_err(path, e))
}
