//! NPY container (format versions 1.0 and 2.0), little-endian C-order only.

use crate::error::{data_err, Result};

const MAGIC: &[u8; 6] = b"\x93NUMPY";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NpyDtype {
    U8,
    I64,
    F32,
    F64,
}

impl NpyDtype {
    pub fn descr(self) -> &'static str {
        match self {
            NpyDtype::U8 => "|u1",
            NpyDtype::I64 => "<i8",
            NpyDtype::F32 => "<f4",
            NpyDtype::F64 => "<f8",
        }
    }

    fn from_descr(d: &str) -> Result<Self> {
        match d {
            "|u1" | "<u1" | "u1" => Ok(NpyDtype::U8),
            "<i8" => Ok(NpyDtype::I64),
            "<f4" => Ok(NpyDtype::F32),
            "<f8" => Ok(NpyDtype::F64),
            other if other.starts_with('>') => Err(data_err(format!(
                "big-endian dtype {other:?} is not supported"
            ))),
            other => Err(data_err(format!(
                "unsupported NPY dtype {other:?} (expected u1, <i8, <f4 or <f8)"
            ))),
        }
    }

    pub fn itemsize(self) -> usize {
        match self {
            NpyDtype::U8 => 1,
            NpyDtype::I64 | NpyDtype::F64 => 8,
            NpyDtype::F32 => 4,
        }
    }
}

/// A parsed array: dtype, shape and the raw little-endian payload.
#[derive(Clone, Debug, PartialEq)]
pub struct NpyArray {
    pub dtype: NpyDtype,
    pub shape: Vec<usize>,
    pub data: Vec<u8>,
}

impl NpyArray {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn from_u8(shape: &[usize], data: Vec<u8>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { dtype: NpyDtype::U8, shape: shape.to_vec(), data }
    }

    pub fn from_i64(shape: &[usize], values: &[i64]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), values.len());
        let data = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self { dtype: NpyDtype::I64, shape: shape.to_vec(), data }
    }

    pub fn from_f32(shape: &[usize], values: &[f32]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), values.len());
        let data = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self { dtype: NpyDtype::F32, shape: shape.to_vec(), data }
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), values.len());
        let data = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self { dtype: NpyDtype::F64, shape: shape.to_vec(), data }
    }

    /// Every element widened to `f64`.
    pub fn to_f64(&self) -> Vec<f64> {
        match self.dtype {
            NpyDtype::U8 => self.data.iter().map(|&b| b as f64).collect(),
            NpyDtype::I64 => self
                .data
                .chunks_exact(8)
                .map(|c| i64::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            NpyDtype::F32 => self
                .data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            NpyDtype::F64 => self
                .data
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        }
    }

    /// Integer view; floats must hold integral values.
    pub fn to_i64(&self) -> Result<Vec<i64>> {
        match self.dtype {
            NpyDtype::U8 => Ok(self.data.iter().map(|&b| b as i64).collect()),
            NpyDtype::I64 => Ok(self
                .data
                .chunks_exact(8)
                .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                .collect()),
            _ => self
                .to_f64()
                .into_iter()
                .map(|v| {
                    if v.fract() == 0.0 && v.abs() < 9.0e15 {
                        Ok(v as i64)
                    } else {
                        Err(data_err(format!("non-integral label value {v}")))
                    }
                })
                .collect(),
        }
    }

    /// Serializes as format version 1.0 (2.0 when the header needs it).
    pub fn to_bytes(&self) -> Vec<u8> {
        let shape = match self.shape.len() {
            1 => format!("({},)", self.shape[0]),
            _ => format!(
                "({})",
                self.shape.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(", ")
            ),
        };
        let dict = format!(
            "{{'descr': '{}', 'fortran_order': False, 'shape': {shape}, }}",
            self.dtype.descr()
        );
        let (version, prefix) = if dict.len() + 11 < 65_536 { (1u8, 10) } else { (2u8, 12) };
        let unpadded = prefix + dict.len() + 1;
        let pad = (64 - unpadded % 64) % 64;
        let header_len = dict.len() + pad + 1;
        let mut out = Vec::with_capacity(prefix + header_len + self.data.len());
        out.extend_from_slice(MAGIC);
        out.push(version);
        out.push(0);
        if version == 1 {
            out.extend_from_slice(&(header_len as u16).to_le_bytes());
        } else {
            out.extend_from_slice(&(header_len as u32).to_le_bytes());
        }
        out.extend_from_slice(dict.as_bytes());
        out.extend(std::iter::repeat(b' ').take(pad));
        out.push(b'\n');
        out.extend_from_slice(&self.data);
        out
    }
}

pub fn parse_npy(bytes: &[u8]) -> Result<NpyArray> {
    if bytes.len() < 8 || &bytes[..6] != MAGIC {
        return Err(data_err("bad NPY magic (expected \\x93NUMPY)"));
    }
    let (major, minor) = (bytes[6], bytes[7]);
    let (header_len, start): (usize, usize) = match (major, minor) {
        (1, 0) if bytes.len() >= 10 => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
        (2, 0) | (3, 0) if bytes.len() >= 12 => (
            u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize,
            12,
        ),
        (1, 0) | (2, 0) | (3, 0) => return Err(data_err("NPY preamble truncated")),
        _ => return Err(data_err(format!("unsupported NPY version {major}.{minor}"))),
    };
    let end = start
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| data_err(format!("NPY header of {header_len} bytes runs past the end of the file")))?;
    let header = std::str::from_utf8(&bytes[start..end])
        .map_err(|_| data_err("NPY header is not valid text"))?;
    let dict = HeaderDict::parse(header)?;
    if dict.fortran_order {
        return Err(data_err(
            "fortran_order=True arrays are not supported; save with C order (np.ascontiguousarray)",
        ));
    }
    let dtype = NpyDtype::from_descr(&dict.descr)?;
    let payload = &bytes[end..];
    let expected = dict
        .shape
        .iter()
        .try_fold(dtype.itemsize(), |a, &s| a.checked_mul(s))
        .ok_or_else(|| data_err(format!("NPY shape {:?} overflows", dict.shape)))?;
    if payload.len() != expected {
        return Err(data_err(format!(
            "NPY length mismatch: shape {:?} of {} needs {expected} bytes, payload has {}",
            dict.shape,
            dtype.descr(),
            payload.len()
        )));
    }
    Ok(NpyArray {
        dtype,
        shape: dict.shape,
        data: payload.to_vec(),
    })
}

struct HeaderDict {
    descr: String,
    fortran_order: bool,
    shape: Vec<usize>,
}

/// Parser for the Python-literal header dict, e.g.
/// `{'descr': '<f4', 'fortran_order': False, 'shape': (2, 3), }`.
struct Lexer<'a> {
    s: &'a [u8],
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn skip_ws(&mut self) {
        while self.pos < self.s.len() && self.s[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.s.get(self.pos).copied()
    }

    fn expect(&mut self, c: u8) -> Result<()> {
        if self.peek() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(data_err(format!(
                "malformed NPY header: expected '{}' at byte {}",
                c as char, self.pos
            )))
        }
    }

    fn string(&mut self) -> Result<String> {
        let q = self.peek().filter(|&c| c == b'\'' || c == b'"').ok_or_else(|| {
            data_err(format!("malformed NPY header: expected a string at byte {}", self.pos))
        })?;
        self.pos += 1;
        let start = self.pos;
        while self.pos < self.s.len() && self.s[self.pos] != q {
            self.pos += 1;
        }
        if self.pos >= self.s.len() {
            return Err(data_err("malformed NPY header: unterminated string"));
        }
        let out = String::from_utf8_lossy(&self.s[start..self.pos]).into_owned();
        self.pos += 1;
        Ok(out)
    }

    fn word(&mut self) -> String {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.s.len() && (self.s[self.pos].is_ascii_alphanumeric() || self.s[self.pos] == b'_') {
            self.pos += 1;
        }
        String::from_utf8_lossy(&self.s[start..self.pos]).into_owned()
    }

    fn tuple(&mut self) -> Result<Vec<usize>> {
        self.expect(b'(')?;
        let mut out = Vec::new();
        loop {
            match self.peek() {
                Some(b')') => {
                    self.pos += 1;
                    return Ok(out);
                }
                Some(b',') => self.pos += 1,
                Some(c) if c.is_ascii_digit() => {
                    let w = self.word();
                    let w = w.trim_end_matches('L');
                    out.push(w.parse().map_err(|_| data_err(format!("bad NPY shape extent {w:?}")))?);
                }
                _ => return Err(data_err("malformed NPY header: bad shape tuple")),
            }
        }
    }
}

impl HeaderDict {
    fn parse(text: &str) -> Result<Self> {
        let mut lx = Lexer { s: text.as_bytes(), pos: 0 };
        let (mut descr, mut fortran, mut shape) = (None, None, None);
        lx.expect(b'{')?;
        loop {
            match lx.peek() {
                Some(b'}') => break,
                Some(b',') => {
                    lx.pos += 1;
                    continue;
                }
                None => return Err(data_err("malformed NPY header: unterminated dict")),
                _ => {}
            }
            let key = lx.string()?;
            lx.expect(b':')?;
            match key.as_str() {
                "descr" => descr = Some(lx.string()?),
                "fortran_order" => {
                    fortran = Some(match lx.word().as_str() {
                        "True" => true,
                        "False" => false,
                        other => return Err(data_err(format!("bad fortran_order value {other:?}"))),
                    })
                }
                "shape" => shape = Some(lx.tuple()?),
                other => return Err(data_err(format!("unexpected NPY header key {other:?}"))),
            }
        }
        Ok(Self {
            descr: descr.ok_or_else(|| data_err("NPY header lacks 'descr'"))?,
            fortran_order: fortran.ok_or_else(|| data_err("NPY header lacks 'fortran_order'"))?,
            shape: shape.ok_or_else(|| data_err("NPY header lacks 'shape'"))?,
        })
    }
}
