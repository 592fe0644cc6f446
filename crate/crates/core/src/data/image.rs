use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Decodes a P6 PPM (maxval 255) or 8-bit PNG into a 3×H×W tensor in [0, 1].
pub fn decode_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_bytes(&bytes).map_err(|message| Error::Image {
        path: path.to_path_buf(),
        message,
    })
}

/// [`decode_image`] followed by a bilinear resize when the image is not
/// already `size`×`size`.
pub fn load_image(path: impl AsRef<Path>, size: usize) -> Result<Tensor> {
    let image = decode_image(path)?;
    match image.shape() {
        [_, h, w] if *h == size && *w == size => Ok(image),
        _ => resize_bilinear(&image, size, size),
    }
}

const PNG_SIGNATURE: &[u8] = b"\x89PNG\r\n\x1a\n";

fn decode_bytes(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    if bytes.starts_with(b"P6") {
        decode_ppm(bytes)
    } else if bytes.starts_with(PNG_SIGNATURE) {
        decode_png(bytes)
    } else {
        Err("unsupported image format (expected binary PPM or PNG)".into())
    }
}

fn planar_from_interleaved(width: usize, height: usize, pixels: &[u8], stride: usize) -> Tensor {
    let plane = width * height;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in pixels.chunks_exact(stride).take(plane).enumerate() {
        for c in 0..3 {
            let v = if stride < 3 { px[0] } else { px[c] };
            data[c * plane + i] = v as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, height, width], data).expect("planar buffer sized from dimensions")
}

fn decode_ppm(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err("truncated PPM header".into()),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or("malformed PPM header")?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err("malformed PPM header".into()),
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(format!("unsupported PPM maxval {maxval} (expected 255)"));
    }
    if width == 0 || height == 0 {
        return Err("empty PPM image".into());
    }
    let needed = width * height * 3;
    let pixels = &bytes[pos..];
    if pixels.len() < needed {
        return Err(format!("truncated PPM data: {} of {needed} bytes", pixels.len()));
    }
    Ok(planar_from_interleaved(width, height, &pixels[..needed], 3))
}

fn decode_png(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| format!("PNG: {e}"))?;
    let size = reader.output_buffer_size().ok_or("PNG too large")?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| format!("PNG: {e}"))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(format!("unsupported PNG bit depth {:?}", info.bit_depth));
    }
    let stride = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        other => return Err(format!("unsupported PNG color type {other:?}")),
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let mut packed = Vec::with_capacity(w * h * stride);
    for row in buf.chunks(info.line_size).take(h) {
        packed.extend_from_slice(&row[..w * stride]);
    }
    Ok(planar_from_interleaved(w, h, &packed, stride))
}

/// Binary PPM bytes for a 3×H×W tensor; values are clamped to [0, 1] and
/// rounded to the nearest 8-bit level.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let [c, h, w]: [usize; 3] = image
        .shape()
        .try_into()
        .map_err(|_| Error::shape("encode_ppm", format!("expected 3×H×W, got {:?}", image.shape())))?;
    if c != 3 {
        return Err(Error::shape("encode_ppm", format!("expected 3 channels, got {c}")));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    let data = image.data();
    out.reserve(3 * plane);
    for i in 0..plane {
        for ch in 0..3 {
            out.push((data[ch * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn write_ppm(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_ppm(image)?).map_err(|e| Error::io(path, e))
}

/// Bilinear resampling of the window `[y0, y0+ch) × [x0, x0+cw)` of a C×H×W
/// image to C×`out_h`×`out_w`. Sample points are clamped to the window, so no
/// pixel outside it is read.
pub fn crop_resize(
    image: &Tensor,
    (y0, x0): (usize, usize),
    (ch, cw): (usize, usize),
    (out_h, out_w): (usize, usize),
) -> Result<Tensor> {
    let [c, h, w]: [usize; 3] = image
        .shape()
        .try_into()
        .map_err(|_| Error::shape("crop_resize", format!("expected C×H×W, got {:?}", image.shape())))?;
    if ch == 0 || cw == 0 || y0 + ch > h || x0 + cw > w || out_h == 0 || out_w == 0 {
        return Err(Error::invalid(
            "crop_resize",
            format!("window {ch}x{cw} at ({y0},{x0}) invalid for {h}x{w} image → {out_h}x{out_w}"),
        ));
    }
    let axis = |start: usize, len: usize, out: usize| -> Vec<(usize, usize, f32)> {
        (0..out)
            .map(|i| {
                let s = ((i as f32 + 0.5) * len as f32 / out as f32 - 0.5).clamp(0.0, (len - 1) as f32);
                let lo = s.floor() as usize;
                let hi = (lo + 1).min(len - 1);
                (start + lo, start + hi, s - lo as f32)
            })
            .collect()
    };
    let ys = axis(y0, ch, out_h);
    let xs = axis(x0, cw, out_w);
    let src = image.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for plane in src.chunks(h * w).take(c) {
        for &(ya, yb, ty) in &ys {
            for &(xa, xb, tx) in &xs {
                let top = plane[ya * w + xa] * (1.0 - tx) + plane[ya * w + xb] * tx;
                let bottom = plane[yb * w + xa] * (1.0 - tx) + plane[yb * w + xb] * tx;
                out.push(top * (1.0 - ty) + bottom * ty);
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

pub fn resize_bilinear(image: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w) = match image.shape() {
        [_, h, w] => (*h, *w),
        s => return Err(Error::shape("resize_bilinear", format!("expected C×H×W, got {s:?}"))),
    };
    crop_resize(image, (0, 0), (h, w), (out_h, out_w))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decodes_hand_built_ppm() {
        let mut bytes = b"P6\n# a comment\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 0, 0, 255, 0, 0, 0, 255, 51, 102, 204]);
        let t = decode_bytes(&bytes).unwrap();
        assert_eq!(t.shape(), &[3, 2, 2]);
        let expected = [
            1.0, 0.0, 0.0, 0.2, // R
            0.0, 1.0, 0.0, 0.4, // G
            0.0, 0.0, 1.0, 0.8, // B
        ];
        for (a, b) in t.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn all_white_is_all_one() {
        let mut bytes = b"P6 3 2 255\n".to_vec();
        bytes.extend(std::iter::repeat(255).take(18));
        let t = decode_bytes(&bytes).unwrap();
        assert!(t.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn rejects_truncated_and_unknown() {
        let mut bytes = b"P6\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3]);
        assert!(decode_bytes(&bytes).unwrap_err().contains("truncated"));
        assert!(decode_bytes(b"P6\n2").is_err());
        assert!(decode_bytes(b"GIF89a").unwrap_err().contains("unsupported"));
        assert!(decode_bytes(b"P6\n1 1\n65535\n\0\0\0\0\0\0").is_err());
        assert!(decode_bytes(&PNG_SIGNATURE[..]).is_err());
    }

    #[test]
    fn ppm_round_trip_preserves_bytes() {
        let mut bytes = b"P6\n5 3\n255\n".to_vec();
        bytes.extend((0..45u32).map(|i| (i * 37 % 256) as u8));
        let t = decode_bytes(&bytes).unwrap();
        assert_eq!(encode_ppm(&t).unwrap(), bytes);
    }

    #[test]
    fn decodes_png() {
        let rgb: Vec<u8> = (0..2 * 3 * 3).map(|i| (i * 13) as u8).collect();
        let mut buf = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut buf, 3, 2);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc.write_header().unwrap();
            w.write_image_data(&rgb).unwrap();
        }
        let t = decode_bytes(&buf).unwrap();
        assert_eq!(t.shape(), &[3, 2, 3]);
        let ppm = encode_ppm(&t).unwrap();
        assert_eq!(&ppm[ppm.len() - rgb.len()..], rgb.as_slice());
    }

    #[test]
    fn resize_identity_and_constant() {
        let t = Tensor::new(vec![1, 2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(resize_bilinear(&t, 2, 2).unwrap(), t);
        let c = Tensor::full(&[3, 5, 7], 0.25);
        let r = resize_bilinear(&c, 11, 4).unwrap();
        assert!(r.data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }

    #[test]
    fn crop_never_reads_outside_window() {
        // Window holds 0.5; everything around it is NaN.
        let mut data = vec![f32::NAN; 6 * 6];
        for y in 1..4 {
            for x in 2..5 {
                data[y * 6 + x] = 0.5;
            }
        }
        let t = Tensor::new(vec![1, 6, 6], data).unwrap();
        let r = crop_resize(&t, (1, 2), (3, 3), (8, 8)).unwrap();
        assert!(r.data().iter().all(|&v| v == 0.5));
    }
}
