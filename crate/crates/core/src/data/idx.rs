//! IDX files: big-endian magic (`0x00000803` images, `0x00000801` labels),
//! big-endian `u32` dimensions, then unsigned bytes.

use std::path::Path;

use crate::error::{Error, Result};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug)]
pub struct IdxImages {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

impl IdxImages {
    pub fn len(&self) -> usize {
        self.pixels.len() / (self.rows * self.cols).max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn format_err(path: &Path, offset: usize, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        detail: detail.into(),
    }
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| format_err(path, offset, "truncated header"))
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != expected {
        return Err(format_err(
            path,
            0,
            format!("magic {magic:#010x}, expected {expected:#010x}"),
        ));
    }
    Ok(())
}

fn check_payload(bytes: &[u8], header: usize, declared: usize, path: &Path) -> Result<()> {
    let actual = bytes.len() - header;
    if actual != declared {
        let offset = header + actual.min(declared);
        return Err(format_err(
            path,
            offset,
            format!("header declares {declared} payload bytes, file has {actual}"),
        ));
    }
    Ok(())
}

pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<IdxImages> {
    check_magic(bytes, IMAGES_MAGIC, path)?;
    let n = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    check_payload(bytes, 16, n * rows * cols, path)?;
    Ok(IdxImages {
        rows,
        cols,
        pixels: bytes[16..].to_vec(),
    })
}

pub fn parse_idx_labels(bytes: &[u8], classes: usize, path: &Path) -> Result<Vec<usize>> {
    check_magic(bytes, LABELS_MAGIC, path)?;
    let n = be_u32(bytes, 4, path)? as usize;
    check_payload(bytes, 8, n, path)?;
    bytes[8..]
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            if (l as usize) < classes {
                Ok(l as usize)
            } else {
                Err(format_err(path, 8 + i, format!("label {l} outside [0, {classes})")))
            }
        })
        .collect()
}

pub fn read_idx_images(path: &Path) -> Result<IdxImages> {
    parse_idx_images(&read_all(path)?, path)
}

pub fn read_idx_labels(path: &Path, classes: usize) -> Result<Vec<usize>> {
    parse_idx_labels(&read_all(path)?, classes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn images_file(n: u32, rows: u32, cols: u32, payload: usize) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
        for d in [n, rows, cols] {
            b.extend_from_slice(&d.to_be_bytes());
        }
        b.extend((0..payload).map(|i| i as u8));
        b
    }

    fn offset_of(err: Error) -> u64 {
        match err {
            Error::Format { offset, .. } => offset,
            other => panic!("expected format error, got {other}"),
        }
    }

    #[test]
    fn parses_images() {
        let p = Path::new("imgs");
        let img = parse_idx_images(&images_file(2, 2, 3, 12), p).unwrap();
        assert_eq!((img.len(), img.rows, img.cols), (2, 2, 3));
        assert_eq!(img.pixels[11], 11);
    }

    #[test]
    fn corrupted_magic_reports_offset_zero() {
        let mut bytes = images_file(1, 1, 1, 1);
        bytes[3] = 0x01;
        let err = parse_idx_images(&bytes, Path::new("x")).unwrap_err();
        assert_eq!(offset_of(err), 0);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let bytes = images_file(2, 2, 2, 7);
        let err = parse_idx_images(&bytes, Path::new("x")).unwrap_err();
        assert_eq!(offset_of(err), 16 + 7);
        let bytes = images_file(2, 2, 2, 9);
        assert!(parse_idx_images(&bytes, Path::new("x")).is_err());
        assert_eq!(offset_of(parse_idx_images(&bytes[..10], Path::new("x")).unwrap_err()), 8);
    }

    #[test]
    fn label_out_of_range_names_its_byte() {
        let mut b = LABELS_MAGIC.to_be_bytes().to_vec();
        b.extend_from_slice(&3u32.to_be_bytes());
        b.extend_from_slice(&[1, 9, 12]);
        let err = parse_idx_labels(&b, 10, Path::new("l")).unwrap_err();
        assert_eq!(offset_of(err), 10);
        assert!(parse_idx_labels(&b[..10], 10, Path::new("l")).is_err());
    }
}
