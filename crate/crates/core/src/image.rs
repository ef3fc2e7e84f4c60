//! RGB images in `[0, 1]`, binary PPM and 8-bit PNG files, and tensor conversion.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `height x width x 3` interleaved RGB values, nominally in `[0, 1]`.
/// Out-of-range samples are kept and clamped when quantized.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != width * height * 3 {
            return Err(Error::dim(
                "image",
                format!("{} values for {width}x{height}x3", pixels.len()),
            ));
        }
        if let Some(v) = pixels.iter().find(|v| !v.is_finite()) {
            return Err(Error::config(format!("pixel value {v} is not finite")));
        }
        Ok(ImageBuffer { width, height, pixels })
    }

    /// Builds an image from 8-bit samples, `p -> p / 255`.
    pub fn from_bytes(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(width, height, bytes.iter().map(|&b| b as f32 / 255.0).collect())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    /// `[r, g, b]` at row `y`, column `x`.
    pub fn get(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Quantized samples, `round(v * 255)` with halves rounded up.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels.iter().map(|&v| quantize(v)).collect()
    }

    /// `[1, 3, H, W]` planar tensor.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let plane = self.width * self.height;
        let mut data = vec![0.0; 3 * plane];
        for (i, px) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * plane + i] = px[c];
            }
        }
        Tensor::new(vec![1, 3, self.height, self.width], data).expect("planar layout")
    }

    /// Item `index` of a `[N, 3, H, W]` tensor; values are clamped into `[0, 1]`.
    pub fn from_tensor(t: &Tensor<f32>, index: usize) -> Result<Self> {
        let [n, c, h, w] = t.dims4()?;
        if c != 3 || index >= n {
            return Err(Error::dim("image", format!("item {index} of {:?}", t.shape())));
        }
        let plane = h * w;
        let item = &t.data()[index * 3 * plane..(index + 1) * 3 * plane];
        let mut pixels = Vec::with_capacity(3 * plane);
        for i in 0..plane {
            for c in 0..3 {
                let v = item[c * plane + i];
                if !v.is_finite() {
                    return Err(Error::NonFinite { op: "image" });
                }
                pixels.push(v.clamp(0.0, 1.0));
            }
        }
        Ok(ImageBuffer {
            width: w,
            height: h,
            pixels,
        })
    }

    /// Top-left aligned `size x size` window at `(y, x)` as a `[1, 3, size, size]` tensor.
    pub fn crop_tensor(&self, y: usize, x: usize, size: usize) -> Result<Tensor<f32>> {
        if y + size > self.height || x + size > self.width {
            return Err(Error::dim(
                "crop",
                format!("{size}x{size} at ({y}, {x}) exceeds {}x{}", self.height, self.width),
            ));
        }
        let mut data = vec![0.0; 3 * size * size];
        for c in 0..3 {
            for i in 0..size {
                for j in 0..size {
                    data[(c * size + i) * size + j] = self.pixels[((y + i) * self.width + x + j) * 3 + c];
                }
            }
        }
        Tensor::new(vec![1, 3, size, size], data)
    }
}

fn quantize(v: f32) -> u8 {
    (v as f64 * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Decodes a binary PPM (`P6`, maxval 255).
pub fn decode_ppm(bytes: &[u8]) -> Result<ImageBuffer> {
    let mut pos = 0usize;
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(Error::format(0, "missing P6 magic"));
    }
    pos += 2;
    let mut fields = [0usize; 3];
    for (k, field) in fields.iter_mut().enumerate() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while !matches!(bytes.get(pos), None | Some(b'\n')) {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(pos as u64, format!("expected header field {}", k + 1)));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| Error::format(start as u64, "header value out of range"))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::format(pos as u64, format!("unsupported maxval {maxval}, only 8-bit is read")));
    }
    if width == 0 || height == 0 {
        return Err(Error::format(pos as u64, "zero image extent"));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::format(pos as u64, "expected whitespace after header"));
    }
    pos += 1;
    let expected = width
        .checked_mul(height)
        .and_then(|v| v.checked_mul(3))
        .ok_or_else(|| Error::format(pos as u64, "image extent overflow"))?;
    let actual = bytes.len() - pos;
    if actual < expected {
        return Err(Error::format(
            pos as u64,
            format!("truncated payload: expected {expected} bytes, found {actual}"),
        ));
    }
    ImageBuffer::from_bytes(width, height, &bytes[pos..pos + expected])
}

pub fn encode_ppm(img: &ImageBuffer) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.to_bytes());
    out
}

/// Decodes an 8-bit RGB, non-interlaced PNG.
pub fn decode_png(bytes: &[u8]) -> Result<ImageBuffer> {
    let decoder = png::Decoder::new(Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(|e| Error::format(0, format!("png: {e}")))?;
    let info = reader.info();
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::format(
            0,
            format!("unsupported png layout {:?}/{:?}, expected 8-bit RGB", info.color_type, info.bit_depth),
        ));
    }
    if info.interlaced {
        return Err(Error::format(0, "interlaced png is not supported"));
    }
    let (width, height) = (info.width as usize, info.height as usize);
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| Error::format(0, "png too large"))?];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format(0, format!("png: {e}")))?;
    ImageBuffer::from_bytes(width, height, &buf[..frame.buffer_size()])
}

pub fn encode_png(img: &ImageBuffer) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::format(0, format!("png: {e}")))?;
        writer
            .write_image_data(&img.to_bytes())
            .map_err(|e| Error::format(0, format!("png: {e}")))?;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageFormat {
    Ppm,
    Png,
}

impl ImageFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("ppm") => Ok(ImageFormat::Ppm),
            Some("png") => Ok(ImageFormat::Png),
            _ => Err(Error::config(format!("{}: expected a .ppm or .png file", path.display()))),
        }
    }
}

pub fn load_image(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    let format = ImageFormat::from_path(path)?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let decoded = match format {
        ImageFormat::Ppm => decode_ppm(&bytes),
        ImageFormat::Png => decode_png(&bytes),
    };
    decoded.map_err(|e| match e {
        Error::Format { offset, detail } => Error::format(offset, format!("{}: {detail}", path.display())),
        other => other,
    })
}

pub fn save_image(img: &ImageBuffer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = match ImageFormat::from_path(path)? {
        ImageFormat::Ppm => encode_ppm(img),
        ImageFormat::Png => encode_png(img)?,
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
