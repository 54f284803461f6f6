//! Rendering and the raw `DMIM` image container.
//!
//! Layout: magic `DMIM`, then `u32` height, width, channels (little-endian),
//! then `height·width·channels` little-endian `f32` values, row-major HWC.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::sim::PhaseField;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: &[u8; 4] = b"DMIM";

/// Maps the field linearly from `[min, max]` onto `[0, 255]`, replicated
/// across three channels. Constant fields render as mid-gray.
pub fn render_image(field: &PhaseField) -> Tensor {
    let n = field.size();
    let (lo, hi) = (field.min(), field.max());
    let mut data = Vec::with_capacity(n * n * 3);
    for &c in field.values() {
        let v = if hi > lo { (c - lo) / (hi - lo) * 255.0 } else { 127.5 };
        data.extend_from_slice(&[v, v, v]);
    }
    Tensor::new(vec![n, n, 3], data).expect("render shape")
}

pub fn write_image(path: &Path, image: &Tensor) -> Result<()> {
    if image.ndim() != 3 {
        return Err(Error::ImageFormat {
            path: path.to_path_buf(),
            reason: format!("expected (H, W, C) tensor, got {:?}", image.shape()),
        });
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut bytes = Vec::with_capacity(16 + image.len() * 4);
    bytes.extend_from_slice(IMAGE_MAGIC);
    for &d in image.shape() {
        bytes.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in image.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    let bad = |reason: String| Error::ImageFormat {
        path: path.to_path_buf(),
        reason,
    };
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..4] != IMAGE_MAGIC {
        return Err(bad("missing DMIM header".into()));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let shape = vec![dim(0), dim(1), dim(2)];
    let count: usize = shape.iter().product();
    if count == 0 || bytes.len() != 16 + 4 * count {
        return Err(bad(format!(
            "header {shape:?} does not match payload of {} bytes",
            bytes.len() - 16
        )));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_channels() {
        let f = PhaseField::new(2, vec![-0.8, 0.1, 0.9, 0.3]).unwrap();
        let img = render_image(&f);
        assert_eq!(img.shape(), &[2, 2, 3]);
        assert_eq!(&img.data()[0..3], &[0.0, 0.0, 0.0]);
        assert_eq!(&img.data()[6..9], &[255.0, 255.0, 255.0]);
        for px in img.data().chunks_exact(3) {
            assert!(px[0] == px[1] && px[1] == px[2]);
            assert!((0.0..=255.0).contains(&px[0]));
        }
    }

    #[test]
    fn constant_is_mid_gray() {
        let img = render_image(&PhaseField::uniform(4, 0.2).unwrap());
        assert!(img.data().iter().all(|&v| v == 127.5));
    }

    #[test]
    fn file_roundtrip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.dmim");
        let img = Tensor::new(vec![2, 3, 1], vec![0.0, 1.5, 255.0, 3.25, 7.0, 9.5]).unwrap();
        write_image(&path, &img).unwrap();
        assert_eq!(read_image(&path).unwrap(), img);
        std::fs::write(&path, b"DMIM\x01\0\0\0").unwrap();
        assert!(matches!(read_image(&path), Err(Error::ImageFormat { .. })));
    }
}
