//! PNG input/output and bilinear resampling shared by the data pipeline and
//! the explanation renderer.

use std::path::Path;

use crate::error::{Error, Result};
use crate::fsutil;

/// An 8-bit image with 1 (gray) or 3 (RGB) interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

pub fn read_png(path: &Path) -> Result<RawImage> {
    let bytes = fsutil::read(path)?;
    decode_png(&bytes).map_err(|detail| Error::Image { path: path.to_owned(), detail })
}

fn decode_png(bytes: &[u8]) -> std::result::Result<RawImage, String> {
    let decoder = png::Decoder::new(bytes);
    let mut reader = decoder.read_info().map_err(|e| e.to_string())?;
    let info = reader.info();
    if info.bit_depth != png::BitDepth::Eight {
        return Err(format!("unsupported bit depth {:?}, expected 8", info.bit_depth));
    }
    let (width, height) = (info.width as usize, info.height as usize);
    let (stride, keep) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        png::ColorType::Indexed => return Err("palette images are not supported".into()),
    };
    let mut buf = vec![0; reader.output_buffer_size()];
    let frame = reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
    let data = &buf[..frame.buffer_size()];
    let line = frame.line_size;
    let mut pixels = Vec::with_capacity(width * height * keep);
    for row in data.chunks(line).take(height) {
        for px in row[..width * stride].chunks_exact(stride) {
            pixels.extend_from_slice(&px[..keep]);
        }
    }
    Ok(RawImage { width, height, channels: keep, pixels })
}

pub fn encode_png(image: &RawImage) -> Result<Vec<u8>> {
    let color = match image.channels {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => return Err(Error::InvalidArgument(format!("cannot encode a {c}-channel PNG"))),
    };
    if image.pixels.len() != image.width * image.height * image.channels {
        return Err(Error::InvalidArgument("pixel buffer does not match image extents".into()));
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, image.width as u32, image.height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| Error::InvalidArgument(e.to_string()))?;
        w.write_image_data(&image.pixels).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    }
    Ok(out)
}

pub fn write_png(path: &Path, image: &RawImage) -> Result<()> {
    fsutil::write_atomic(path, &encode_png(image)?)
}

/// Maps `[0, 1]` to 8-bit with rounding; out-of-range values are clamped.
pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Bilinear resampling of an interleaved h×w×c buffer with half-pixel
/// centres: source coordinate `(d + 0.5)·(in/out) − 0.5`, clamped to the
/// valid range.
pub fn bilinear_resize(src: &[f64], h: usize, w: usize, c: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    assert!(h > 0 && w > 0 && c > 0 && out_h > 0 && out_w > 0, "extents must be positive");
    assert_eq!(src.len(), h * w * c);
    if (h, w) == (out_h, out_w) {
        return src.to_vec();
    }
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|d| {
                let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let (ys, xs) = (taps(h, out_h), taps(w, out_w));
    let mut out = vec![0.0; out_h * out_w * c];
    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            let o = (oy * out_w + ox) * c;
            for k in 0..c {
                let at = |y: usize, x: usize| src[(y * w + x) * c + k];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out[o + k] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_hand_trace_and_constants() {
        assert_eq!(bilinear_resize(&[0.0, 1.0], 1, 2, 1, 1, 4), [0.0, 0.25, 0.75, 1.0]);
        let c = bilinear_resize(&[0.3; 12], 2, 2, 3, 5, 7);
        assert!(c.iter().all(|&v| v == 0.3));
    }

    #[test]
    fn png_round_trip() {
        let gray = RawImage { width: 3, height: 2, channels: 1, pixels: vec![0, 51, 255, 7, 8, 9] };
        assert_eq!(decode_png(&encode_png(&gray).unwrap()).unwrap(), gray);
        let rgb = RawImage { width: 1, height: 2, channels: 3, pixels: vec![1, 2, 3, 4, 5, 6] };
        assert_eq!(decode_png(&encode_png(&rgb).unwrap()).unwrap(), rgb);
    }

    #[test]
    fn rejects_sixteen_bit() {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, 1, 1);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(png::BitDepth::Sixteen);
            enc.write_header().unwrap().write_image_data(&[0, 1]).unwrap();
        }
        assert!(decode_png(&out).unwrap_err().contains("bit depth"));
    }
}
