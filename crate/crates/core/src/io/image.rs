//! 8-bit RGB PNG and binary PPM images as `1 × 3 × h × w` tensors on the
//! 0–255 scale.

use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ImageEncoder, ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

fn format_of(path: &Path) -> Result<ImageFormat> {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => Ok(ImageFormat::Png),
        Some("ppm") | Some("pnm") => Ok(ImageFormat::Pnm),
        _ => Err(Error::Format(format!("{}: expected a .png or .ppm file", path.display()))),
    }
}

pub fn from_rgb8(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| raw[(y * w + x) * 3 + c] as f32)
}

/// Values are clamped to 0–255 and rounded half away from zero.
pub fn to_rgb8(t: &Tensor) -> Result<RgbImage> {
    let s = t.shape();
    if s.n != 1 || s.c != 3 {
        return Err(Error::shape("image", "c", 3, s.c));
    }
    let mut raw = vec![0u8; s.h * s.w * 3];
    for c in 0..3 {
        for (p, &v) in t.plane(0, c).iter().enumerate() {
            raw[p * 3 + c] = quantize(v);
        }
    }
    RgbImage::from_raw(s.w as u32, s.h as u32, raw).ok_or_else(|| Error::Format("image buffer size".into()))
}

pub fn quantize(v: f32) -> u8 {
    if v.is_nan() {
        return 0;
    }
    v.clamp(0.0, 255.0).round() as u8
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    let format = format_of(path)?;
    let io = |e: std::io::Error| Error::Io(format!("{}: {e}", path.display()));
    let mut reader = image::ImageReader::open(path).map_err(io)?.with_guessed_format().map_err(io)?;
    if reader.format().is_none() {
        reader.set_format(format);
    }
    let img = reader
        .decode()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Ok(from_rgb8(&img.to_rgb8()))
}

pub fn write_image(path: &Path, t: &Tensor) -> Result<()> {
    let format = format_of(path)?;
    let img = to_rgb8(t)?;
    let io = |e: std::io::Error| Error::Io(format!("{}: {e}", path.display()));
    let enc = |e: image::ImageError| Error::Format(format!("{}: {e}", path.display()));
    match format {
        ImageFormat::Pnm => {
            let file = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
            PnmEncoder::new(file)
                .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
                .write_image(img.as_raw(), img.width(), img.height(), image::ExtendedColorType::Rgb8)
                .map_err(enc)
        }
        _ => img.save_with_format(path, format).map_err(enc),
    }
}
