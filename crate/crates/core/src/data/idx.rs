//! IDX (MNIST-style) ingestion: big-endian magic, big-endian `u32`
//! dimension sizes, unsigned-byte payload.

use std::fs;
use std::path::Path;

use super::{Dataset, TaskSample};
use crate::error::{Error, Result};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Length(format!("{what}: header truncated at byte {offset}")))
}

fn parse_images(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let magic = read_u32(bytes, 0, "images")?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "bad image magic 0x{magic:08x}, expected 0x{IMAGES_MAGIC:08x}"
        )));
    }
    let count = read_u32(bytes, 4, "images")? as usize;
    let rows = read_u32(bytes, 8, "images")? as usize;
    let cols = read_u32(bytes, 12, "images")? as usize;
    let width = rows * cols;
    let payload = &bytes[16..];
    if payload.len() != count * width {
        return Err(Error::Length(format!(
            "image payload has {} bytes, header promises {count}×{rows}×{cols} = {}",
            payload.len(),
            count * width
        )));
    }
    Ok((count, width, payload.to_vec()))
}

fn parse_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = read_u32(bytes, 0, "labels")?;
    if magic != LABELS_MAGIC {
        return Err(Error::Format(format!(
            "bad label magic 0x{magic:08x}, expected 0x{LABELS_MAGIC:08x}"
        )));
    }
    let count = read_u32(bytes, 4, "labels")? as usize;
    let payload = &bytes[8..];
    if payload.len() != count {
        return Err(Error::Length(format!(
            "label payload has {} bytes, header promises {count}",
            payload.len()
        )));
    }
    Ok(payload.to_vec())
}

/// Decodes an image/label pair already in memory. Pixels are scaled to
/// `[0, 1]` and flattened row-major; every sample gets task id `task`.
pub fn parse_idx(images: &[u8], labels: &[u8], task: usize, classes: usize) -> Result<Dataset> {
    let (count, width, pixels) = parse_images(images)?;
    let labels = parse_labels(labels)?;
    if labels.len() != count {
        return Err(Error::Length(format!("{count} images but {} labels", labels.len())));
    }
    let samples = pixels
        .chunks(width.max(1))
        .zip(&labels)
        .map(|(px, &y)| TaskSample {
            x: px.iter().map(|&p| p as f64 / 255.0).collect(),
            y: y as usize,
            t: task,
        })
        .collect();
    let mut per_task = vec![2; task + 1];
    per_task[task] = classes;
    Dataset::new(width, samples, &per_task)
}

pub fn load_idx(images_path: &Path, labels_path: &Path, task: usize, classes: usize) -> Result<Dataset> {
    parse_idx(&fs::read(images_path)?, &fs::read(labels_path)?, task, classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn images(count: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut out = IMAGES_MAGIC.to_be_bytes().to_vec();
        for v in [count, rows, cols] {
            out.extend_from_slice(&v.to_be_bytes());
        }
        out.extend_from_slice(pixels);
        out
    }

    fn labels(values: &[u8]) -> Vec<u8> {
        let mut out = LABELS_MAGIC.to_be_bytes().to_vec();
        out.extend_from_slice(&(values.len() as u32).to_be_bytes());
        out.extend_from_slice(values);
        out
    }

    #[test]
    fn decodes_two_small_images() {
        let px = [0u8, 51, 102, 255, 255, 0, 204, 153];
        let d = parse_idx(&images(2, 2, 2, &px), &labels(&[3, 7]), 0, 10).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.width(), 4);
        let flat: Vec<f64> = d.samples().iter().flat_map(|s| s.x.clone()).collect();
        let expected: Vec<f64> = px.iter().map(|&p| p as f64 / 255.0).collect();
        assert_eq!(flat, expected);
        assert_eq!(d.get(1).y, 7);
    }

    #[test]
    fn wrong_magic_is_a_format_error() {
        let mut bad = images(1, 1, 1, &[0]);
        bad[..4].copy_from_slice(&0u32.to_be_bytes());
        match parse_idx(&bad, &labels(&[0]), 0, 2) {
            Err(Error::Format(msg)) => assert!(msg.contains("0x00000000")),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn count_mismatch_is_a_length_error() {
        let r = parse_idx(&images(2, 1, 1, &[0, 1]), &labels(&[0]), 0, 2);
        assert!(matches!(r, Err(Error::Length(_))));
    }

    #[test]
    fn truncated_payload_is_a_length_error() {
        let r = parse_idx(&images(2, 2, 2, &[0; 7]), &labels(&[0, 1]), 0, 2);
        assert!(matches!(r, Err(Error::Length(_))));
    }
}
