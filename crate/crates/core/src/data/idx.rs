use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(offset as u64, "truncated IDX header"))
}

fn check_magic(bytes: &[u8], want: u32, what: &str) -> Result<()> {
    let got = read_u32(bytes, 0)?;
    if got != want {
        return Err(Error::format(
            0,
            format!("bad IDX {what} magic {got:#010x}, expected {want:#010x}"),
        ));
    }
    Ok(())
}

fn payload(bytes: &[u8], header: usize, len: usize) -> Result<&[u8]> {
    let end = header + len;
    if bytes.len() < end {
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated IDX payload: expected {len} bytes after offset {header}"),
        ));
    }
    if bytes.len() > end {
        return Err(Error::format(
            end as u64,
            "trailing bytes after IDX payload",
        ));
    }
    Ok(&bytes[header..end])
}

/// Parses an IDX3 image file into `[N, 1, rows, cols]` pixels scaled by 1/255.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor> {
    check_magic(bytes, IMAGE_MAGIC, "image")?;
    let n = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    let data = payload(bytes, 16, n * rows * cols)?;
    let pixels = data.iter().map(|&b| b as f32 / 255.0).collect();
    Tensor::new(vec![n, 1, rows, cols], pixels)
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    check_magic(bytes, LABEL_MAGIC, "label")?;
    let n = read_u32(bytes, 4)? as usize;
    Ok(payload(bytes, 8, n)?.iter().map(|&b| b as usize).collect())
}

/// Loads an image/label IDX pair. The class count is `max label + 1`, at
/// least 10 so splits of the same corpus agree.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let ib = std::fs::read(ip).map_err(|e| Error::io(ip, e))?;
    let lb = std::fs::read(lp).map_err(|e| Error::io(lp, e))?;
    let images = parse_idx_images(&ib).map_err(|e| with_path(e, ip))?;
    let labels = parse_idx_labels(&lb).map_err(|e| with_path(e, lp))?;
    if images.shape()[0] != labels.len() {
        return Err(Error::format(
            4,
            format!(
                "{} holds {} images but {} holds {} labels",
                ip.display(),
                images.shape()[0],
                lp.display(),
                labels.len()
            ),
        ));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1).max(10);
    let split = ip
        .file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .unwrap_or_default();
    Dataset::new(images, labels, classes, split)
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Format { offset, msg } => Error::Format {
            offset,
            msg: format!("{}: {msg}", path.display()),
        },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(magic: u32, dims: &[u32]) -> Vec<u8> {
        let mut v = magic.to_be_bytes().to_vec();
        for d in dims {
            v.extend_from_slice(&d.to_be_bytes());
        }
        v
    }

    #[test]
    fn images_and_labels() {
        let mut img = header(IMAGE_MAGIC, &[2, 1, 2]);
        img.extend_from_slice(&[0x80, 0xff, 0, 51]);
        let t = parse_idx_images(&img).unwrap();
        assert_eq!(t.shape(), &[2, 1, 1, 2]);
        assert!((t.data()[0] - 0.50196).abs() < 1e-5);
        assert_eq!(t.data()[1], 1.0);

        let mut lbl = header(LABEL_MAGIC, &[2]);
        lbl.extend_from_slice(&[3, 7]);
        assert_eq!(parse_idx_labels(&lbl).unwrap(), vec![3, 7]);
    }

    #[test]
    fn rejects_bad_files() {
        let lbl = header(LABEL_MAGIC, &[0, 1, 1]);
        assert!(matches!(
            parse_idx_images(&lbl),
            Err(Error::Format { offset: 0, .. })
        ));
        let mut short = header(IMAGE_MAGIC, &[2, 2, 2]);
        short.push(1);
        assert!(matches!(
            parse_idx_images(&short),
            Err(Error::Format { .. })
        ));
        assert!(parse_idx_labels(&[0, 0]).is_err());
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        let t = parse_idx_images(&header(IMAGE_MAGIC, &[0, 28, 28])).unwrap();
        assert_eq!(t.len(), 0);
        assert!(parse_idx_labels(&header(LABEL_MAGIC, &[0]))
            .unwrap()
            .is_empty());
    }
}
