//! 8-bit PNG reading and writing.
//!
//! Encoding settings are fixed so identical pixels (and provenance text)
//! always produce identical bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::TensorField;

/// Keyword of the tEXt chunk carrying provenance.
pub const PROVENANCE_KEY: &str = "softguard";

/// Decoded 8-bit image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Png8 {
    pub width: u32,
    pub height: u32,
    /// Samples per pixel: 1 (gray or palette index) or 3 (RGB).
    pub samples: usize,
    pub data: Vec<u8>,
    pub palette: Option<Vec<u8>>,
}

enum Kind<'a> {
    Gray,
    Rgb,
    Indexed(&'a [u8]),
}

fn encode(
    path: &Path,
    width: u32,
    height: u32,
    kind: Kind<'_>,
    data: &[u8],
    provenance: Option<&str>,
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let wrap = |e: png::EncodingError| Error::Format(format!("{}: {e}", path.display()));
    {
        let mut enc = png::Encoder::new(&mut out, width, height);
        enc.set_depth(png::BitDepth::Eight);
        match kind {
            Kind::Gray => enc.set_color(png::ColorType::Grayscale),
            Kind::Rgb => enc.set_color(png::ColorType::Rgb),
            Kind::Indexed(palette) => {
                enc.set_color(png::ColorType::Indexed);
                enc.set_palette(palette.to_vec());
            }
        }
        enc.set_compression(png::Compression::Balanced);
        enc.set_filter(png::Filter::NoFilter);
        if let Some(text) = provenance {
            enc.add_text_chunk(PROVENANCE_KEY.to_string(), text.to_string())
                .map_err(wrap)?;
        }
        let mut writer = enc.write_header().map_err(wrap)?;
        writer.write_image_data(data).map_err(wrap)?;
        writer.finish().map_err(wrap)?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn write_gray(path: &Path, width: u32, height: u32, data: &[u8], provenance: Option<&str>) -> Result<()> {
    encode(path, width, height, Kind::Gray, data, provenance)
}

/// `data` is interleaved RGB, row-major.
pub fn write_rgb(path: &Path, width: u32, height: u32, data: &[u8], provenance: Option<&str>) -> Result<()> {
    encode(path, width, height, Kind::Rgb, data, provenance)
}

/// `palette` is 3 bytes per entry; `data` holds palette indices.
pub fn write_indexed(
    path: &Path,
    width: u32,
    height: u32,
    data: &[u8],
    palette: &[u8],
    provenance: Option<&str>,
) -> Result<()> {
    encode(path, width, height, Kind::Indexed(palette), data, provenance)
}

/// Reads an 8-bit PNG without palette expansion.
pub fn read_png(path: &Path) -> Result<Png8> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let wrap = |e: png::DecodingError| Error::Format(format!("{}: {e}", path.display()));
    let mut reader = decoder.read_info().map_err(wrap)?;
    let mut buf = vec![
        0;
        reader
            .output_buffer_size()
            .ok_or_else(|| Error::Format(format!("{}: image too large", path.display())))?
    ];
    let info = reader.next_frame(&mut buf).map_err(wrap)?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Format(format!("{}: expected 8-bit samples", path.display())));
    }
    let samples = match info.color_type {
        png::ColorType::Grayscale | png::ColorType::Indexed => 1,
        png::ColorType::Rgb => 3,
        other => {
            return Err(Error::Format(format!(
                "{}: unsupported color type {other:?}",
                path.display()
            )))
        }
    };
    buf.truncate(info.buffer_size());
    let palette = reader.info().palette.as_ref().map(|p| p.to_vec());
    Ok(Png8 {
        width: info.width,
        height: info.height,
        samples,
        data: buf,
        palette,
    })
}

/// `round(255 v)` with halves rounded up, after clamping to `[0, 1]`.
#[inline]
pub fn quantize(v: f64) -> u8 {
    (255.0 * v.clamp(0.0, 1.0) + 0.5).floor() as u8
}

#[inline]
pub fn dequantize(q: u8) -> f64 {
    f64::from(q) / 255.0
}

/// Interleaves a `(3, H, W)` tensor into quantized RGB bytes.
pub fn tensor_to_rgb8(image: &TensorField) -> Result<Vec<u8>> {
    if image.channels() != 3 {
        return Err(Error::invalid(format!(
            "expected 3 channels, got {}",
            image.channels()
        )));
    }
    let plane = image.plane();
    let mut out = Vec::with_capacity(plane * 3);
    for p in 0..plane {
        for c in 0..3 {
            out.push(quantize(image.data()[c * plane + p]));
        }
    }
    Ok(out)
}

/// Inverse of [`tensor_to_rgb8`] up to quantization.
pub fn rgb8_to_tensor(height: usize, width: usize, rgb: &[u8]) -> Result<TensorField> {
    if rgb.len() != height * width * 3 {
        return Err(Error::invalid("RGB buffer does not match image size"));
    }
    let plane = height * width;
    let mut t = TensorField::zeros(3, height, width);
    for p in 0..plane {
        for c in 0..3 {
            t.data_mut()[c * plane + p] = dequantize(rgb[p * 3 + c]);
        }
    }
    Ok(t)
}

/// Loads an RGB PNG as a `(3, H, W)` tensor in `[0, 1]`.
pub fn load_rgb_tensor(path: &Path) -> Result<TensorField> {
    let png = read_png(path)?;
    if png.samples != 3 {
        return Err(Error::Format(format!("{}: expected an RGB image", path.display())));
    }
    rgb8_to_tensor(png.height as usize, png.width as usize, &png.data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounding_is_half_up() {
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(-3.0), 0);
        assert_eq!(quantize(7.0), 255);
        for q in 0..=255u8 {
            assert_eq!(quantize(dequantize(q)), q);
        }
    }

    #[test]
    fn png_round_trips_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let rgb: Vec<u8> = (0..4 * 3 * 3).map(|i| (i * 7) as u8).collect();
        let a = dir.path().join("a.png");
        let b = dir.path().join("b.png");
        write_rgb(&a, 4, 3, &rgb, Some("x")).unwrap();
        write_rgb(&b, 4, 3, &rgb, Some("x")).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        let back = read_png(&a).unwrap();
        assert_eq!((back.width, back.height, back.samples), (4, 3, 3));
        assert_eq!(back.data, rgb);

        let idx = dir.path().join("i.png");
        write_indexed(&idx, 2, 2, &[0, 1, 1, 0], &[0, 0, 0, 255, 0, 0], None).unwrap();
        let back = read_png(&idx).unwrap();
        assert_eq!(back.data, vec![0, 1, 1, 0]);
        assert_eq!(back.palette.unwrap().len(), 6);
    }

    #[test]
    fn missing_and_corrupt_files_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(read_png(&dir.path().join("none.png")), Err(Error::Io { .. })));
        let bad = dir.path().join("bad.png");
        std::fs::write(&bad, b"not a png").unwrap();
        assert!(matches!(read_png(&bad), Err(Error::Format(_))));
    }
}
