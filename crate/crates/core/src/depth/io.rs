//! PNG raster I/O.
//!
//! Depth is stored as 16-bit grayscale in millimeters with 0 marking missing
//! depth (the Kinect / ScanNet convention). RGB is stored as 8-bit RGB.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use png::{BitDepth, ColorType, Decoder, Encoder, Limits, Transformations};

use super::{DepthRaster, RgbImage};
use crate::error::{Error, Result};

const DECODE_LIMIT_BYTES: usize = 256 << 20;
pub(crate) const MAX_SIDE: u32 = 1 << 14;

#[derive(Clone, Debug, PartialEq)]
pub enum Raster {
    Depth(DepthRaster),
    Rgb(RgbImage),
}

pub(crate) fn fmt_err(path: &Path, reason: impl ToString) -> Error {
    Error::Format {
        path: path.display().to_string(),
        reason: reason.to_string(),
    }
}

pub(crate) struct Decoded {
    pub width: usize,
    pub height: usize,
    pub color: ColorType,
    pub depth: BitDepth,
    pub bytes: Vec<u8>,
    pub palette: Option<Vec<u8>>,
}

pub(crate) fn decode_png(bytes: &[u8], path: &Path) -> Result<Decoded> {
    let mut decoder = Decoder::new_with_limits(
        Cursor::new(bytes),
        Limits {
            bytes: DECODE_LIMIT_BYTES,
        },
    );
    decoder.set_transformations(Transformations::IDENTITY);
    let mut reader = decoder
        .read_info()
        .map_err(|e| fmt_err(path, format!("malformed header: {e}")))?;
    let info = reader.info();
    let (width, height) = (info.width, info.height);
    if width > MAX_SIDE || height > MAX_SIDE {
        return Err(fmt_err(
            path,
            format!("dimension overflow: {width}x{height}"),
        ));
    }
    let palette = info.palette.as_ref().map(|p| p.to_vec());
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| fmt_err(path, "dimension overflow"))?;
    let mut buf = vec![0u8; size];
    let out = reader
        .next_frame(&mut buf)
        .map_err(|e| fmt_err(path, format!("corrupt image data: {e}")))?;
    buf.truncate(out.buffer_size());
    Ok(Decoded {
        width: width as usize,
        height: height as usize,
        color: out.color_type,
        depth: out.bit_depth,
        bytes: buf,
        palette,
    })
}

pub(crate) fn encode_png(
    width: usize,
    height: usize,
    color: ColorType,
    depth: BitDepth,
    palette: Option<&[u8]>,
    data: &[u8],
) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(depth);
        if let Some(p) = palette {
            enc.set_palette(p.to_vec());
        }
        let io_err = |e: png::EncodingError| Error::Io(std::io::Error::other(e));
        let mut writer = enc.write_header().map_err(io_err)?;
        writer.write_image_data(data).map_err(io_err)?;
        writer.finish().map_err(io_err)?;
    }
    Ok(out)
}

pub fn encode_depth(r: &DepthRaster) -> Result<Vec<u8>> {
    let mut data = Vec::with_capacity(r.len() * 2);
    for (i, &d) in r.depths().iter().enumerate() {
        let mm: u16 = if r.is_valid(i) {
            (d * 1000.0).round().clamp(1.0, u16::MAX as f64) as u16
        } else {
            0
        };
        data.extend_from_slice(&mm.to_be_bytes());
    }
    encode_png(
        r.width(),
        r.height(),
        ColorType::Grayscale,
        BitDepth::Sixteen,
        None,
        &data,
    )
}

pub fn encode_rgb(img: &RgbImage) -> Result<Vec<u8>> {
    let (w, h) = img.dims();
    let mut data = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            for c in img.pixel(x, y) {
                data.push((c * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    encode_png(w, h, ColorType::Rgb, BitDepth::Eight, None, &data)
}

fn decode_raster(bytes: &[u8], path: &Path) -> Result<Raster> {
    let d = decode_png(bytes, path)?;
    match (d.color, d.depth) {
        (ColorType::Grayscale, BitDepth::Sixteen) => {
            let depth = d
                .bytes
                .chunks_exact(2)
                .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / 1000.0)
                .collect();
            Ok(Raster::Depth(DepthRaster::from_depths(
                d.width, d.height, depth,
            )?))
        }
        (ColorType::Rgb, BitDepth::Eight) => {
            let n = d.width * d.height;
            let mut planes = vec![0.0f32; 3 * n];
            for (i, px) in d.bytes.chunks_exact(3).enumerate() {
                for c in 0..3 {
                    planes[c * n + i] = px[c] as f32 / 255.0;
                }
            }
            Ok(Raster::Rgb(RgbImage::from_planes(
                d.width, d.height, planes,
            )?))
        }
        (c, b) => Err(fmt_err(
            path,
            format!("unknown format: {c:?} at {b:?} bits"),
        )),
    }
}

pub fn read_raster(path: impl AsRef<Path>) -> Result<Raster> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    decode_raster(&bytes, path)
}

pub fn read_depth(path: impl AsRef<Path>) -> Result<DepthRaster> {
    match read_raster(path.as_ref())? {
        Raster::Depth(d) => Ok(d),
        Raster::Rgb(_) => Err(fmt_err(
            path.as_ref(),
            "expected a 16-bit depth image, found RGB",
        )),
    }
}

pub fn read_rgb(path: impl AsRef<Path>) -> Result<RgbImage> {
    match read_raster(path.as_ref())? {
        Raster::Rgb(r) => Ok(r),
        Raster::Depth(_) => Err(fmt_err(
            path.as_ref(),
            "expected an 8-bit RGB image, found depth",
        )),
    }
}

pub fn write_depth(r: &DepthRaster, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_depth(r)?)?;
    Ok(())
}

pub fn write_rgb(img: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_rgb(img)?)?;
    Ok(())
}
