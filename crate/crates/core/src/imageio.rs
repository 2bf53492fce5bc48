//! Grayscale image decoding for query uploads (PGM or PNG) and PNG encoding
//! for browsers.

use std::io::Cursor;
use std::path::Path;

use image::{GrayImage, ImageFormat};

use crate::synth::{pgm, ImageSample};

#[derive(Debug, thiserror::Error)]
pub enum ImageError {
    #[error("unreadable image: {0}")]
    Decode(String),
    #[error("{path}: {source}")]
    Io { path: std::path::PathBuf, source: std::io::Error },
}

/// PGM (P5) is decoded natively; anything else goes through the `image`
/// crate and is converted to 8-bit luma.
pub fn decode_image(bytes: &[u8], individual_id: &str, image_id: &str) -> Result<ImageSample, ImageError> {
    let (width, height, pixels) = if bytes.starts_with(b"P5") {
        pgm::decode(bytes).map_err(|e| ImageError::Decode(e.to_string()))?
    } else {
        let img = image::load_from_memory(bytes).map_err(|e| ImageError::Decode(e.to_string()))?;
        let g = img.to_luma8();
        (g.width() as usize, g.height() as usize, g.into_raw())
    };
    if width == 0 || height == 0 {
        return Err(ImageError::Decode("empty image".into()));
    }
    Ok(ImageSample {
        individual_id: individual_id.into(),
        image_id: image_id.into(),
        height,
        width,
        pixels,
    })
}

pub fn read_image(path: &Path, individual_id: &str, image_id: &str) -> Result<ImageSample, ImageError> {
    let bytes = std::fs::read(path).map_err(|e| ImageError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    decode_image(&bytes, individual_id, image_id)
}

pub fn encode_png(img: &ImageSample) -> Vec<u8> {
    let g = GrayImage::from_raw(img.width as u32, img.height as u32, img.pixels.clone())
        .expect("pixel buffer matches dimensions");
    let mut out = Cursor::new(Vec::new());
    g.write_to(&mut out, ImageFormat::Png).expect("in-memory PNG encoding");
    out.into_inner()
}
