//! IDX (MNIST) reader and writer. Big-endian headers, unsigned-byte payload.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use super::Dataset;
use crate::error::{Error, Result};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;
const MNIST_CLASSES: usize = 10;

fn read_u32_be(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("IDX header truncated at byte {offset}")))
}

/// Parses an IDX image file into `(rows, cols, pixels)`; pixels are raw
/// bytes, one image after another.
pub fn read_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = read_u32_be(bytes, 0)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "bad IDX image magic number {magic:#010x}, expected {IMAGES_MAGIC:#010x}"
        )));
    }
    let n = read_u32_be(bytes, 4)? as usize;
    let rows = read_u32_be(bytes, 8)? as usize;
    let cols = read_u32_be(bytes, 12)? as usize;
    let payload = &bytes[16..];
    let expected = n * rows * cols;
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "IDX image payload has {} bytes, header promises {expected}",
            payload.len()
        )));
    }
    Ok((n, rows, cols, payload))
}

pub fn read_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = read_u32_be(bytes, 0)?;
    if magic != LABELS_MAGIC {
        return Err(Error::Format(format!(
            "bad IDX label magic number {magic:#010x}, expected {LABELS_MAGIC:#010x}"
        )));
    }
    let n = read_u32_be(bytes, 4)? as usize;
    let payload = &bytes[8..];
    if payload.len() != n {
        return Err(Error::Format(format!(
            "IDX label payload has {} bytes, header promises {n}",
            payload.len()
        )));
    }
    Ok(payload)
}

/// Loads an MNIST image/label pair. Pixels are scaled to `[0, 1]` by
/// dividing by 255; sample order follows the files.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let image_bytes = fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let label_bytes = fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let (n, rows, cols, pixels) = read_idx_images(&image_bytes)?;
    let labels = read_idx_labels(&label_bytes)?;
    if labels.len() != n {
        return Err(Error::Consistency(format!(
            "{} has {n} images but {} has {} labels",
            images_path.display(),
            labels_path.display(),
            labels.len()
        )));
    }
    let features = Array2::from_shape_vec((n, rows * cols), pixels.iter().map(|&p| f64::from(p) / 255.0).collect())
        .expect("payload length checked against header");
    Dataset::new(features, labels.iter().map(|&l| l as usize).collect(), MNIST_CLASSES)
}

pub fn write_idx_images(path: &Path, rows: usize, cols: usize, images: &[Vec<u8>]) -> Result<()> {
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    for dim in [images.len(), rows, cols] {
        out.extend_from_slice(&(dim as u32).to_be_bytes());
    }
    for img in images {
        if img.len() != rows * cols {
            return Err(Error::Shape(format!("image of {} bytes, expected {}", img.len(), rows * cols)));
        }
        out.extend_from_slice(img);
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use tempfile::tempdir;

    use super::*;

    fn write_pair(dir: &Path, images: &[Vec<u8>], labels: &[u8]) -> (std::path::PathBuf, std::path::PathBuf) {
        let ip = dir.join("images.idx3-ubyte");
        let lp = dir.join("labels.idx1-ubyte");
        write_idx_images(&ip, 28, 28, images).unwrap();
        write_idx_labels(&lp, labels).unwrap();
        (ip, lp)
    }

    #[test]
    fn single_zero_image() {
        let dir = tempdir().unwrap();
        let (ip, lp) = write_pair(dir.path(), &[vec![0u8; 784]], &[3]);
        let ds = load_mnist_idx(&ip, &lp).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.feature_dim(), 784);
        assert_eq!(ds.num_classes(), 10);
        assert!(ds.features().iter().all(|&v| v == 0.0));
        assert_eq!(ds.labels(), &[3]);
    }

    #[test]
    fn crafted_bytes_scale_exactly() {
        let dir = tempdir().unwrap();
        let mut a = vec![0u8; 784];
        a[0] = 255;
        a[1] = 51;
        a[783] = 1;
        let mut b = vec![0u8; 784];
        b[10] = 128;
        let (ip, lp) = write_pair(dir.path(), &[a, b], &[0, 9]);
        let ds = load_mnist_idx(&ip, &lp).unwrap();
        let f = ds.features();
        assert_eq!(f[[0, 0]], 1.0);
        assert_eq!(f[[0, 1]], 0.2);
        assert_eq!(f[[0, 783]], 1.0 / 255.0);
        assert_eq!(f[[1, 10]], 128.0 / 255.0);
        assert_eq!(ds.labels(), &[0, 9]);
    }

    #[test]
    fn bad_magic_is_format_error() {
        let dir = tempdir().unwrap();
        let (ip, lp) = write_pair(dir.path(), &[vec![0u8; 784]], &[1]);
        // swap the files: label file handed in as images
        assert!(matches!(load_mnist_idx(&lp, &ip), Err(Error::Format(_))));
    }

    #[test]
    fn count_mismatch_is_consistency_error() {
        let dir = tempdir().unwrap();
        let (ip, lp) = write_pair(dir.path(), &[vec![0u8; 784], vec![1u8; 784]], &[1]);
        assert!(matches!(load_mnist_idx(&ip, &lp), Err(Error::Consistency(_))));
    }

    #[test]
    fn out_of_range_label_rejected() {
        let dir = tempdir().unwrap();
        let (ip, lp) = write_pair(dir.path(), &[vec![0u8; 784]], &[10]);
        assert!(matches!(load_mnist_idx(&ip, &lp), Err(Error::Consistency(_))));
    }

    #[test]
    fn truncated_payload_rejected() {
        let mut bytes = IMAGES_MAGIC.to_be_bytes().to_vec();
        for d in [2u32, 28, 28] {
            bytes.extend_from_slice(&d.to_be_bytes());
        }
        bytes.extend_from_slice(&[0u8; 784]);
        assert!(matches!(read_idx_images(&bytes), Err(Error::Format(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn round_trip_recovers_pixels(pixels in proptest::collection::vec(any::<u8>(), 784 * 3), labels in proptest::collection::vec(0u8..10, 3)) {
            let dir = tempdir().unwrap();
            let images: Vec<Vec<u8>> = pixels.chunks(784).map(|c| c.to_vec()).collect();
            let (ip, lp) = write_pair(dir.path(), &images, &labels);
            let ds = load_mnist_idx(&ip, &lp).unwrap();
            for (v, &p) in ds.features().iter().zip(&pixels) {
                prop_assert_eq!((v * 255.0).round() as u8, p);
                prop_assert_eq!(*v, f64::from(p) / 255.0);
            }
            let got: Vec<u8> = ds.labels().iter().map(|&l| l as u8).collect();
            prop_assert_eq!(got, labels);
        }
    }
}
