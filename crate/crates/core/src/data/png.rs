//! 16-bit depth PNGs (KITTI convention: meters = raw / 256, raw 0 = missing)
//! and 8-bit RGB images.

use std::io::Cursor;
use std::path::Path;

use crate::depth::DepthMap;
use crate::error::{Error, Result};

pub const DEPTH_SCALE: f64 = 256.0;

/// Pixels that could not be represented exactly by the encoder.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EncodeReport {
    /// Valid depths above `65535 / 256` m, written as 65535.
    pub clamped_high: usize,
    /// Valid depths that would round to the missing sentinel, written as 1.
    pub clamped_low: usize,
}

impl EncodeReport {
    pub fn any(&self) -> bool {
        self.clamped_high + self.clamped_low > 0
    }
}

fn decode_err(e: png::DecodingError) -> Error {
    match e {
        png::DecodingError::IoError(source) => Error::Io { path: "<png stream>".into(), source },
        other => Error::Format(format!("png: {other}")),
    }
}

fn encode_err(e: png::EncodingError) -> Error {
    Error::Format(format!("png encode: {e}"))
}

fn read_png(bytes: &[u8], transformations: png::Transformations) -> Result<(png::OutputInfo, Vec<u8>)> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(transformations);
    let mut reader = decoder.read_info().map_err(decode_err)?;
    let size = reader.output_buffer_size().ok_or_else(|| Error::Format("png: image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(decode_err)?;
    buf.truncate(info.buffer_size());
    Ok((info, buf))
}

fn write_png(width: usize, height: usize, color: png::ColorType, depth: png::BitDepth, data: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(depth);
        let mut writer = enc.write_header().map_err(encode_err)?;
        writer.write_image_data(data).map_err(encode_err)?;
        writer.finish().map_err(encode_err)?;
    }
    Ok(out)
}

/// Raw 16-bit values of a single-channel 16-bit PNG, row-major.
pub fn decode_depth_raw(bytes: &[u8]) -> Result<(usize, usize, Vec<u16>)> {
    let (info, buf) = read_png(bytes, png::Transformations::IDENTITY)?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Sixteen {
        return Err(Error::Format(format!(
            "depth png must be 16-bit grayscale, got {:?} {:?}",
            info.color_type, info.bit_depth
        )));
    }
    let raw = buf.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect();
    Ok((info.height as usize, info.width as usize, raw))
}

pub fn decode_depth_png(bytes: &[u8]) -> Result<DepthMap> {
    let (h, w, raw) = decode_depth_raw(bytes)?;
    DepthMap::from_sparse_values(h, w, raw.iter().map(|&r| r as f64 / DEPTH_SCALE).collect())
}

pub fn encode_depth_raw(height: usize, width: usize, raw: &[u16]) -> Result<Vec<u8>> {
    if raw.len() != height * width {
        return Err(Error::Data(format!("{} raw values for a {height}x{width} image", raw.len())));
    }
    let bytes: Vec<u8> = raw.iter().flat_map(|r| r.to_be_bytes()).collect();
    write_png(width, height, png::ColorType::Grayscale, png::BitDepth::Sixteen, &bytes)
}

/// Raw values for a depth map; valid depths round to the nearest 1/256 m.
pub fn depth_to_raw(d: &DepthMap) -> (Vec<u16>, EncodeReport) {
    let mut report = EncodeReport::default();
    let raw = d
        .meters()
        .iter()
        .zip(d.valid())
        .map(|(&m, &v)| {
            if !v {
                return 0;
            }
            let r = (m * DEPTH_SCALE).round();
            if r > u16::MAX as f64 {
                report.clamped_high += 1;
                u16::MAX
            } else if r < 1.0 {
                report.clamped_low += 1;
                1
            } else {
                r as u16
            }
        })
        .collect();
    (raw, report)
}

pub fn encode_depth_png(d: &DepthMap) -> Result<(Vec<u8>, EncodeReport)> {
    let (raw, report) = depth_to_raw(d);
    Ok((encode_depth_raw(d.height(), d.width(), &raw)?, report))
}

/// RGB image with channel-major values in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    /// `[3, H, W]`.
    pub data: Vec<f64>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::Data(format!("{} values for a 3x{height}x{width} image", data.len())));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("image value {v} outside [0,1]")));
        }
        Ok(RgbImage { height, width, data })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Rounds every value to the nearest multiple of 1/255.
    pub fn quantized(&self) -> RgbImage {
        let data = self.data.iter().map(|v| (v * 255.0).round() / 255.0).collect();
        RgbImage { height: self.height, width: self.width, data }
    }
}

pub fn encode_rgb_png(img: &RgbImage) -> Result<Vec<u8>> {
    let plane = img.height * img.width;
    let mut bytes = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            bytes.push((img.data[c * plane + i] * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    write_png(img.width, img.height, png::ColorType::Rgb, png::BitDepth::Eight, &bytes)
}

/// Interleaved 8-bit RGB bytes straight to PNG.
pub fn encode_rgb8_png(height: usize, width: usize, rgb: &[u8]) -> Result<Vec<u8>> {
    if rgb.len() != 3 * height * width {
        return Err(Error::Data(format!("{} bytes for a {height}x{width} RGB image", rgb.len())));
    }
    write_png(width, height, png::ColorType::Rgb, png::BitDepth::Eight, rgb)
}

/// Accepts 8-bit gray, gray+alpha, RGB or RGBA (alpha dropped).
pub fn decode_rgb_png(bytes: &[u8]) -> Result<RgbImage> {
    let (info, buf) = read_png(bytes, png::Transformations::EXPAND)?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Format(format!("image png must be 8-bit, got {:?}", info.bit_depth)));
    }
    let (h, w) = (info.height as usize, info.width as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(Error::Format(format!("unsupported image color type {other:?}"))),
    };
    let plane = h * w;
    let mut data = vec![0.0; 3 * plane];
    for i in 0..plane {
        let px = &buf[i * channels..(i + 1) * channels];
        for c in 0..3 {
            let v = if channels < 3 { px[0] } else { px[c] };
            data[c * plane + i] = v as f64 / 255.0;
        }
    }
    RgbImage::new(h, w, data)
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_depth_png(path: &Path) -> Result<DepthMap> {
    decode_depth_png(&read_file(path)?).map_err(|e| with_path(e, path))
}

pub fn read_rgb_png(path: &Path) -> Result<RgbImage> {
    decode_rgb_png(&read_file(path)?).map_err(|e| with_path(e, path))
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    }
}
