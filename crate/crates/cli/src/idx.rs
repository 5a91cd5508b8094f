//! IDX image/label files, optionally gzip-compressed.
//!
//! Headers are big-endian: a 32-bit magic (`0x0803` for 3-d unsigned-byte
//! images, `0x0801` for 1-d labels) followed by one 32-bit size per
//! dimension. Paths ending in `.gz` are (de)compressed transparently.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use ktied_core::data::Dataset;
use ktied_core::DenseMatrix;

use crate::error::{CliError, CliResult};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

fn read_bytes(path: &Path) -> CliResult<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| CliError::io(path, e))?;
    if !is_gz(path) {
        return Ok(raw);
    }
    let mut out = Vec::new();
    GzDecoder::new(raw.as_slice())
        .read_to_end(&mut out)
        .map_err(|e| CliError::format(format!("{}: gzip: {e}", path.display())))?;
    Ok(out)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let out = if is_gz(path) {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(bytes).map_err(|e| CliError::io(path, e))?;
        enc.finish().map_err(|e| CliError::io(path, e))?
    } else {
        bytes.to_vec()
    };
    fs::write(path, out).map_err(|e| CliError::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> CliResult<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| CliError::format("unexpected EOF"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> CliResult<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn finish(&self) -> CliResult<()> {
        if self.pos != self.bytes.len() {
            return Err(CliError::format(format!(
                "{} trailing bytes",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

/// Decoded images as `(count, rows, cols, pixels)`.
pub fn parse_images(bytes: &[u8]) -> CliResult<(usize, usize, usize, Vec<u8>)> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.u32()? != IMAGES_MAGIC {
        return Err(CliError::format("bad magic"));
    }
    let n = c.u32()? as usize;
    let rows = c.u32()? as usize;
    let cols = c.u32()? as usize;
    let len = n
        .checked_mul(rows)
        .and_then(|x| x.checked_mul(cols))
        .ok_or_else(|| CliError::format("image dimensions overflow"))?;
    let pixels = c.take(len)?.to_vec();
    c.finish()?;
    Ok((n, rows, cols, pixels))
}

pub fn parse_labels(bytes: &[u8]) -> CliResult<Vec<u8>> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.u32()? != LABELS_MAGIC {
        return Err(CliError::format("bad magic"));
    }
    let n = c.u32()? as usize;
    let labels = c.take(n)?.to_vec();
    c.finish()?;
    Ok(labels)
}

/// Load an image file and its label file into a dataset with raw pixel
/// values in `[0, 255]`. The class count is one past the largest label.
pub fn load_idx_pair(images: &Path, labels: &Path) -> CliResult<Dataset> {
    let (n, rows, cols, pixels) = parse_images(&read_bytes(images)?)?;
    let labels = parse_labels(&read_bytes(labels)?)?;
    if labels.len() != n {
        return Err(CliError::format(format!(
            "count mismatch: {n} images, {} labels",
            labels.len()
        )));
    }
    if n == 0 {
        return Err(CliError::format("empty IDX files"));
    }
    let features = DenseMatrix::from_vec(n, rows * cols, pixels.iter().map(|&p| p as f64).collect())?;
    let labels: Vec<usize> = labels.into_iter().map(usize::from).collect();
    let num_classes = labels.iter().max().map_or(1, |&m| m + 1);
    Ok(Dataset::new(features, labels, num_classes)?)
}

/// Write `d` as an image/label pair with images shaped `rows x cols`.
/// Features must be integers in `[0, 255]` and labels below 256.
pub fn write_idx_pair(d: &Dataset, rows: usize, cols: usize, images: &Path, labels: &Path) -> CliResult<()> {
    if rows * cols != d.dim() {
        return Err(CliError::Usage(format!(
            "{rows}x{cols} images do not match feature width {}",
            d.dim()
        )));
    }
    let header = |magic: u32, dims: &[usize]| -> CliResult<Vec<u8>> {
        let mut out = magic.to_be_bytes().to_vec();
        for &dim in dims {
            let dim = u32::try_from(dim).map_err(|_| CliError::Usage(format!("dimension {dim} too large")))?;
            out.extend_from_slice(&dim.to_be_bytes());
        }
        Ok(out)
    };

    let mut img = header(IMAGES_MAGIC, &[d.len(), rows, cols])?;
    for &x in d.features().as_slice() {
        if !(0.0..=255.0).contains(&x) || x.fract() != 0.0 {
            return Err(CliError::Usage(format!("feature {x} is not a byte value")));
        }
        img.push(x as u8);
    }
    let mut lab = header(LABELS_MAGIC, &[d.len()])?;
    for &y in d.labels() {
        lab.push(u8::try_from(y).map_err(|_| CliError::Usage(format!("label {y} does not fit a byte")))?);
    }
    write_bytes(images, &img)?;
    write_bytes(labels, &lab)
}
