//! Binary cube files and NPY import.
//!
//! Cube file layout, all integers little-endian:
//!
//! | offset | size | field                         |
//! |--------|------|-------------------------------|
//! | 0      | 4    | magic `HSIC`                  |
//! | 4      | 2    | format version (1)            |
//! | 6      | 12   | H, W, B as `u32`              |
//! | 18     | 1    | dtype tag (1 = `f32`)         |
//! | 19     | …    | `f32` payload, band axis fastest |

use std::fs;
use std::path::Path;

use crate::cube::Cube;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"HSIC";
pub const VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 1;
pub const HEADER_LEN: usize = 19;

fn format_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn encode_cube(cube: &Cube) -> Result<Vec<u8>> {
    let (h, w, b) = cube.dims();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * cube.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for d in [h, w, b] {
        let d = u32::try_from(d).map_err(|_| Error::invalid(format!("extent {d} does not fit in u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.push(DTYPE_F32);
    for &v in cube.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

/// Parses a cube file image. `path` is only used in error messages.
pub fn decode_cube(bytes: &[u8], path: &Path) -> Result<Cube> {
    if bytes.len() < HEADER_LEN {
        return Err(format_err(
            path,
            format!("truncated header: expected {HEADER_LEN} bytes, got {}", bytes.len()),
        ));
    }
    if &bytes[0..4] != MAGIC {
        return Err(format_err(path, format!("bad magic {:?}", &bytes[0..4])));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(format_err(path, format!("unsupported format version {version}")));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[6 + 4 * i..10 + 4 * i].try_into().expect("4 bytes")) as usize;
    let (h, w, b) = (dim(0), dim(1), dim(2));
    if h == 0 || w == 0 || b == 0 {
        return Err(format_err(path, format!("zero extent in dims {h}x{w}x{b}")));
    }
    if bytes[18] != DTYPE_F32 {
        return Err(format_err(path, format!("unsupported dtype tag {}", bytes[18])));
    }
    let expected = h
        .checked_mul(w)
        .and_then(|n| n.checked_mul(b))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| format_err(path, format!("dims {h}x{w}x{b} overflow")))?;
    let actual = bytes.len() - HEADER_LEN;
    if actual < expected {
        return Err(format_err(
            path,
            format!("truncated payload: expected {expected} bytes, got {actual}"),
        ));
    }
    if actual > expected {
        return Err(format_err(
            path,
            format!("trailing data: expected {expected} payload bytes, got {actual}"),
        ));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Cube::from_vec(h, w, b, data)
}

pub fn write_cube(cube: &Cube, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_cube(cube)?)
}

pub fn read_cube(path: impl AsRef<Path>) -> Result<Cube> {
    let path = path.as_ref();
    decode_cube(&read_bytes(path)?, path)
}

/// Rounds every value to `f32`, as a write/read round trip would.
pub fn quantize(cube: &Cube) -> Cube {
    cube.map(|v| v as f32 as f64)
}

struct NpyHeader {
    descr: String,
    fortran_order: bool,
    shape: Vec<usize>,
}

/// Value text following `'key':` in a header dict.
fn dict_value<'a>(dict: &'a str, key: &str) -> Option<&'a str> {
    let pat_sq = format!("'{key}'");
    let pat_dq = format!("\"{key}\"");
    let at = dict.find(&pat_sq).map(|i| i + pat_sq.len()).or_else(|| dict.find(&pat_dq).map(|i| i + pat_dq.len()))?;
    let rest = dict[at..].trim_start().strip_prefix(':')?.trim_start();
    Some(rest)
}

fn parse_npy_header(dict: &str, path: &Path) -> Result<NpyHeader> {
    let err = |m: &str| format_err(path, format!("NPY header: {m}"));
    let descr = dict_value(dict, "descr").ok_or_else(|| err("missing 'descr'"))?;
    let quote = descr.chars().next().filter(|c| *c == '\'' || *c == '"').ok_or_else(|| err("bad 'descr'"))?;
    let descr = descr[1..].split(quote).next().ok_or_else(|| err("bad 'descr'"))?.to_string();

    let fo = dict_value(dict, "fortran_order").ok_or_else(|| err("missing 'fortran_order'"))?;
    let fortran_order = if fo.starts_with("True") {
        true
    } else if fo.starts_with("False") {
        false
    } else {
        return Err(err("bad 'fortran_order'"));
    };

    let shape = dict_value(dict, "shape").ok_or_else(|| err("missing 'shape'"))?;
    let inner = shape
        .strip_prefix('(')
        .and_then(|s| s.split(')').next())
        .ok_or_else(|| err("bad 'shape'"))?;
    let shape = inner
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>().map_err(|_| err("bad 'shape'")))
        .collect::<Result<Vec<_>>>()?;
    Ok(NpyHeader {
        descr,
        fortran_order,
        shape,
    })
}

/// Parses an NPY v1.0 image holding a C-order 3-D float array.
pub fn decode_npy(bytes: &[u8], path: &Path) -> Result<Cube> {
    if bytes.len() < 10 || &bytes[0..6] != b"\x93NUMPY" {
        return Err(format_err(path, "not an NPY file"));
    }
    if (bytes[6], bytes[7]) != (1, 0) {
        return Err(format_err(
            path,
            format!("unsupported NPY version {}.{}", bytes[6], bytes[7]),
        ));
    }
    let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let start = 10 + header_len;
    if bytes.len() < start {
        return Err(format_err(path, "truncated NPY header"));
    }
    let dict = std::str::from_utf8(&bytes[10..start]).map_err(|_| format_err(path, "NPY header is not text"))?;
    let header = parse_npy_header(dict, path)?;
    if header.fortran_order {
        return Err(format_err(path, "unsupported layout: Fortran-order arrays are not accepted"));
    }
    let [h, w, b] = header.shape[..] else {
        return Err(format_err(
            path,
            format!("expected a 3-D array, got rank {} shape {:?}", header.shape.len(), header.shape),
        ));
    };
    if h == 0 || w == 0 || b == 0 {
        return Err(format_err(path, format!("zero extent in shape {:?}", header.shape)));
    }
    let width = match header.descr.as_str() {
        "<f4" => 4,
        "<f8" => 8,
        other => return Err(format_err(path, format!("unsupported dtype {other:?}"))),
    };
    let expected = h
        .checked_mul(w)
        .and_then(|n| n.checked_mul(b))
        .and_then(|n| n.checked_mul(width))
        .ok_or_else(|| format_err(path, "shape overflow"))?;
    let payload = &bytes[start..];
    if payload.len() != expected {
        return Err(format_err(
            path,
            format!("truncated payload: expected {expected} bytes, got {}", payload.len()),
        ));
    }
    let data = if width == 4 {
        payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect()
    } else {
        payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect()
    };
    Cube::from_vec(h, w, b, data)
}

pub fn import_npy(path: impl AsRef<Path>) -> Result<Cube> {
    let path = path.as_ref();
    decode_npy(&read_bytes(path)?, path)
}

/// Reads a cube from a cube file, or from an NPY file when the extension is
/// `.npy`.
pub fn load_cube(path: impl AsRef<Path>) -> Result<Cube> {
    let path = path.as_ref();
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("npy")) {
        import_npy(path)
    } else {
        read_cube(path)
    }
}
