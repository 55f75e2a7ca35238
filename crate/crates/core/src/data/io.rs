//! Image, mask and embedding files.
//!
//! Masks are 1-channel 8-bit PNGs (nonzero = foreground). Embeddings are a
//! 16-byte header (`FBDEMB01`, little-endian `u32` dimension, `u32` zero)
//! followed by little-endian `f32` values.

use std::fs;
use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};

use crate::diffusion::ImageGrid;
use crate::error::{Error, Result};
use crate::losses::{BinaryMask, IdentityEmbedding};
use crate::tensor::Tensor;

pub const EMBEDDING_MAGIC: &[u8; 8] = b"FBDEMB01";

fn image_err(path: &Path, source: image::ImageError) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

fn ensure_exists(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::MissingFile(path.to_path_buf()))
    }
}

pub fn read_image(path: &Path) -> Result<ImageGrid> {
    ensure_exists(path)?;
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
    Ok(image_from_rgb8(&img))
}

pub fn image_from_rgb8(img: &RgbImage) -> ImageGrid {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let t = Tensor::from_fn(&[3, h, w], |i| {
        let (c, y, x) = (i / (h * w), (i / w) % h, i % w);
        img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    });
    ImageGrid::new(t).expect("bytes map into [0, 1]")
}

pub fn image_to_rgb8(image: &ImageGrid) -> RgbImage {
    let (h, w) = (image.height(), image.width());
    let d = image.tensor().data();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([0, 1, 2].map(|c| (d[(c * h + y) * w + x] * 255.0).round() as u8))
    })
}

pub fn write_image(path: &Path, image: &ImageGrid) -> Result<()> {
    image_to_rgb8(image)
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| image_err(path, e))
}

pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    ensure_exists(path)?;
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    BinaryMask::new(h, w, img.pixels().map(|p| p[0] != 0).collect())
}

pub fn write_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    let (h, w) = (mask.height(), mask.width());
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([if mask.get(y as usize, x as usize) { 255 } else { 0 }])
    })
    .save_with_format(path, image::ImageFormat::Png)
    .map_err(|e| image_err(path, e))
}

pub fn encode_embedding(e: &IdentityEmbedding) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * e.dim());
    out.extend_from_slice(EMBEDDING_MAGIC);
    out.extend_from_slice(&(e.dim() as u32).to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    for &v in e.values() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_embedding(bytes: &[u8]) -> Result<IdentityEmbedding> {
    let bad = |reason: &str| Error::invalid("embedding", reason.to_string());
    if bytes.len() < 16 || &bytes[..8] != EMBEDDING_MAGIC {
        return Err(bad("missing FBDEMB01 header"));
    }
    let dim = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    if bytes.len() != 16 + 4 * dim {
        return Err(bad("payload length does not match the header dimension"));
    }
    let values = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect::<Vec<_>>();
    IdentityEmbedding::try_from(values)
}

pub fn read_embedding(path: &Path) -> Result<IdentityEmbedding> {
    ensure_exists(path)?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_embedding(&bytes).map_err(|e| Error::Schema {
        location: path.display().to_string(),
        field: "embedding".into(),
        reason: e.to_string(),
    })
}

pub fn write_embedding(path: &Path, e: &IdentityEmbedding) -> Result<()> {
    fs::write(path, encode_embedding(e)).map_err(|err| Error::io(path, err))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        let mut m = BinaryMask::empty(5, 7);
        m.set(1, 2, true);
        m.set(4, 6, true);
        write_mask(&p, &m).unwrap();
        assert_eq!(read_mask(&p).unwrap(), m);
    }

    #[test]
    fn image_png_round_trip_of_byte_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("i.png");
        let t = Tensor::from_fn(&[3, 4, 6], |i| ((i * 37) % 256) as f64 / 255.0);
        let img = ImageGrid::new(t).unwrap();
        write_image(&p, &img).unwrap();
        assert_eq!(read_image(&p).unwrap(), img);
    }

    #[test]
    fn embedding_binary_layout() {
        let e = IdentityEmbedding::normalized(vec![3.0, 4.0]).unwrap();
        let bytes = encode_embedding(&e);
        assert_eq!(&bytes[..8], b"FBDEMB01");
        assert_eq!(&bytes[8..16], &[2, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(&bytes[16..20], &0.6f32.to_le_bytes());
        let back = decode_embedding(&bytes).unwrap();
        assert!((back.values()[1] - 0.8).abs() < 1e-7);
        assert!(decode_embedding(&bytes[..18]).is_err());
    }

    #[test]
    fn missing_files_are_reported() {
        let err = read_mask(Path::new("/nonexistent/m.png")).unwrap_err();
        assert!(matches!(err, Error::MissingFile(_)));
    }
}
