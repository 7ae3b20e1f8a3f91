//! Matrix types, the `TCM1` binary format, CSV I/O and PGM density bitmaps.
//!
//! `TCM1` layout (all little-endian):
//!
//! ```text
//! offset 0   "TCM1"
//! offset 4   u32 rows
//! offset 8   u32 cols
//! offset 12  f64 scale
//! offset 20  rows * cols signed bytes, row-major
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const TCM_MAGIC: &[u8; 4] = b"TCM1";
const TCM_HEADER_LEN: usize = 20;

/// A quantized weight matrix. Values live in the signed 8-bit domain and
/// dequantize as `value * scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightMatrix {
    rows: usize,
    cols: usize,
    values: Vec<i8>,
    scale: f64,
    pub name: String,
}

impl WeightMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<i8>, scale: f64) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Invalid(format!("scale must be positive, got {scale}")));
        }
        Ok(WeightMatrix {
            rows,
            cols,
            values,
            scale,
            name: String::new(),
        })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        WeightMatrix {
            rows,
            cols,
            values: vec![0; rows * cols],
            scale: 1.0,
            name: String::new(),
        }
    }

    /// Builds a matrix from nested rows; convenient for fixtures.
    pub fn from_rows(rows: &[Vec<i8>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().position(|r| r.len() != cols) {
            return Err(Error::Dimension(format!(
                "row {bad} has {} values, expected {cols}",
                rows[bad].len()
            )));
        }
        Self::new(rows.len(), cols, rows.concat(), 1.0)
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn values(&self) -> &[i8] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> i8 {
        self.values[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: i8) {
        self.values[row * self.cols + col] = value;
    }

    pub fn row(&self, row: usize) -> &[i8] {
        &self.values[row * self.cols..(row + 1) * self.cols]
    }

    pub fn nonzeros(&self) -> usize {
        self.values.iter().filter(|&&v| v != 0).count()
    }

    pub fn stats(&self) -> SparsityStats {
        SparsityStats::from_counts(self.nonzeros(), self.rows * self.cols)
    }

    pub(crate) fn values_mut(&mut self) -> &mut [i8] {
        &mut self.values
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparsityStats {
    pub nonzeros: usize,
    pub density: f64,
    pub pruning_rate: f64,
}

impl SparsityStats {
    pub fn from_counts(nonzeros: usize, cells: usize) -> Self {
        let density = if cells == 0 {
            0.0
        } else {
            nonzeros as f64 / cells as f64
        };
        SparsityStats {
            nonzeros,
            density,
            pruning_rate: 1.0 - density,
        }
    }
}

/// Real-valued matrix, the input to 8-bit quantization.
#[derive(Debug, Clone, PartialEq)]
pub struct RealMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixFormat {
    Tcm,
    Csv,
}

impl MatrixFormat {
    /// `.csv` selects CSV; anything else is treated as `TCM1`.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => MatrixFormat::Csv,
            _ => MatrixFormat::Tcm,
        }
    }
}

pub fn load_matrix(path: impl AsRef<Path>, format: MatrixFormat) -> Result<WeightMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut m = match format {
        MatrixFormat::Tcm => decode_tcm(&bytes)?,
        MatrixFormat::Csv => {
            let text = std::str::from_utf8(&bytes)
                .map_err(|e| Error::at_byte(e.valid_up_to(), "invalid UTF-8"))?;
            parse_csv(text)?
        }
    };
    m.name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(m)
}

pub fn save_matrix(m: &WeightMatrix, path: impl AsRef<Path>, format: MatrixFormat) -> Result<()> {
    let path = path.as_ref();
    let bytes = match format {
        MatrixFormat::Tcm => encode_tcm(m),
        MatrixFormat::Csv => format_csv(m).into_bytes(),
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_tcm(m: &WeightMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(TCM_HEADER_LEN + m.values.len());
    out.extend_from_slice(TCM_MAGIC);
    out.extend_from_slice(&(m.rows as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols as u32).to_le_bytes());
    out.extend_from_slice(&m.scale.to_le_bytes());
    out.extend(m.values.iter().map(|&v| v as u8));
    out
}

pub fn decode_tcm(bytes: &[u8]) -> Result<WeightMatrix> {
    if bytes.len() < TCM_HEADER_LEN {
        return Err(Error::at_byte(
            bytes.len(),
            format!("truncated header ({} of {TCM_HEADER_LEN} bytes)", bytes.len()),
        ));
    }
    if &bytes[0..4] != TCM_MAGIC {
        return Err(Error::at_byte(0, "bad magic, expected \"TCM1\""));
    }
    let u32_at = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    let rows = u32_at(4);
    let cols = u32_at(8);
    let scale = f64::from_le_bytes(bytes[12..20].try_into().unwrap());
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::at_byte(12, format!("scale must be positive, got {scale}")));
    }
    let payload = &bytes[TCM_HEADER_LEN..];
    let expected = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::at_byte(4, "rows * cols overflows"))?;
    if payload.len() != expected {
        return Err(Error::at_byte(
            TCM_HEADER_LEN + payload.len().min(expected),
            format!(
                "payload holds {} values, header declares {rows}x{cols} = {expected}",
                payload.len()
            ),
        ));
    }
    let values = payload.iter().map(|&b| b as i8).collect();
    WeightMatrix::new(rows, cols, values, scale)
}

/// Header line written by [`format_csv`]. Only `scale=` is interpreted on read.
fn csv_header(m: &WeightMatrix) -> String {
    format!("# rows={} cols={} scale={}", m.rows, m.cols, m.scale)
}

pub fn format_csv(m: &WeightMatrix) -> String {
    let mut out = csv_header(m);
    out.push('\n');
    for r in 0..m.rows {
        let line: Vec<String> = m.row(r).iter().map(i8::to_string).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

pub fn parse_csv(text: &str) -> Result<WeightMatrix> {
    let mut scale = 1.0;
    let mut cols: Option<usize> = None;
    let mut values = Vec::new();
    let mut rows = 0;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(header) = line.strip_prefix('#') {
            if rows > 0 {
                return Err(Error::at_line(line_no, "header line after data"));
            }
            for field in header.split_whitespace() {
                if let Some(s) = field.strip_prefix("scale=") {
                    scale = s
                        .parse()
                        .map_err(|_| Error::at_line(line_no, format!("bad scale {s:?}")))?;
                }
            }
            continue;
        }
        let mut count = 0;
        for field in line.split(',') {
            let field = field.trim();
            let v: i64 = field
                .parse()
                .map_err(|_| Error::at_line(line_no, format!("not an integer: {field:?}")))?;
            let v = i8::try_from(v).map_err(|_| {
                Error::at_line(line_no, format!("value {v} outside [-128, 127]"))
            })?;
            values.push(v);
            count += 1;
        }
        match cols {
            None => cols = Some(count),
            Some(c) if c != count => {
                return Err(Error::at_line(
                    line_no,
                    format!("row has {count} values, expected {c}"),
                ))
            }
            _ => {}
        }
        rows += 1;
    }
    let cols = cols.ok_or_else(|| Error::at_line(1, "no data rows"))?;
    WeightMatrix::new(rows, cols, values, scale)
        .map_err(|e| Error::at_line(1, e.to_string()))
}

/// Reads a real-valued CSV (same layout rules as integer CSV, '#' lines skipped).
pub fn load_real_csv(path: impl AsRef<Path>) -> Result<RealMatrix> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cols: Option<usize> = None;
    let mut values = Vec::new();
    let mut rows = 0;
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let before = values.len();
        for field in line.split(',') {
            let field = field.trim();
            let v: f64 = field
                .parse()
                .map_err(|_| Error::at_line(idx + 1, format!("not a number: {field:?}")))?;
            if !v.is_finite() {
                return Err(Error::at_line(idx + 1, "non-finite value"));
            }
            values.push(v);
        }
        let count = values.len() - before;
        match cols {
            None => cols = Some(count),
            Some(c) if c != count => {
                return Err(Error::at_line(
                    idx + 1,
                    format!("row has {count} values, expected {c}"),
                ))
            }
            _ => {}
        }
        rows += 1;
    }
    let cols = cols.ok_or_else(|| Error::at_line(1, "no data rows"))?;
    Ok(RealMatrix { rows, cols, values })
}

/// Grayscale bitmap, one byte per pixel, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitmap {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

pub const PIXEL_ZERO: u8 = 0;
pub const PIXEL_OCCUPIED: u8 = 255;
pub const PIXEL_SEPARATOR: u8 = 128;

/// Anything that can be drawn as a zero/nonzero density map.
pub trait DensityBitmap {
    fn density_bitmap(&self) -> Bitmap;
}

impl DensityBitmap for WeightMatrix {
    fn density_bitmap(&self) -> Bitmap {
        Bitmap {
            width: self.cols,
            height: self.rows,
            pixels: self
                .values
                .iter()
                .map(|&v| if v == 0 { PIXEL_ZERO } else { PIXEL_OCCUPIED })
                .collect(),
        }
    }
}

pub fn encode_pgm(bitmap: &Bitmap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", bitmap.width, bitmap.height).into_bytes();
    out.extend_from_slice(&bitmap.pixels);
    out
}

pub fn render_density(target: &impl DensityBitmap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&encode_pgm(&target.density_bitmap()))
        .map_err(|e| Error::io(path, e))
}
