//! Binary slice and mask files, and PNG output.
//!
//! Both binary formats are a 4-byte magic, `u32` LE height, `u32` LE width,
//! then row-major pixels: `i16` LE HU values for images, one byte in
//! `{0, 1}` per pixel for masks.

use crate::error::{Error, Result};
use std::fs;
use std::io::Write;
use std::path::Path;

pub const IMAGE_MAGIC: &[u8; 4] = b"HUSL";
pub const MASK_MAGIC: &[u8; 4] = b"MSK0";
const HEADER_LEN: usize = 12;

/// A single CT slice in Hounsfield units.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HuImage {
    pub h: usize,
    pub w: usize,
    pub data: Vec<i16>,
}

/// A binary mask, one byte per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl HuImage {
    pub fn new(h: usize, w: usize, data: Vec<i16>) -> Result<Self> {
        if h == 0 || w == 0 || data.len() != h * w {
            return Err(Error::shape(format!(
                "{h}x{w} image with {} values",
                data.len()
            )));
        }
        Ok(HuImage { h, w, data })
    }
}

impl Mask {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if h == 0 || w == 0 || data.len() != h * w {
            return Err(Error::shape(format!(
                "{h}x{w} mask with {} values",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|&v| v > 1) {
            return Err(Error::Domain(format!(
                "mask value {} at pixel {i} is not 0 or 1",
                data[i]
            )));
        }
        Ok(Mask { h, w, data })
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }
}

fn header(magic: &[u8; 4], h: usize, w: usize) -> Result<Vec<u8>> {
    let dim =
        |v: usize| u32::try_from(v).map_err(|_| Error::shape(format!("dimension {v} exceeds u32")));
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(magic);
    out.extend_from_slice(&dim(h)?.to_le_bytes());
    out.extend_from_slice(&dim(w)?.to_le_bytes());
    Ok(out)
}

fn parse_header(bytes: &[u8], magic: &[u8; 4], elem: usize) -> Result<(usize, usize)> {
    if bytes.len() < 4 || &bytes[..4] != magic {
        return Err(Error::format(
            0,
            format!("expected magic {:?}", String::from_utf8_lossy(magic)),
        ));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(bytes.len() as u64, "header truncated"));
    }
    let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if h == 0 || w == 0 {
        return Err(Error::format(4, format!("zero dimension {h}x{w}")));
    }
    let expected = h
        .checked_mul(w)
        .and_then(|n| n.checked_mul(elem))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::format(4, format!("dimensions {h}x{w} overflow")))?;
    if bytes.len() < expected {
        return Err(Error::format(
            bytes.len() as u64,
            format!("{h}x{w} payload truncated, expected {expected} bytes"),
        ));
    }
    if bytes.len() > expected {
        return Err(Error::format(
            expected as u64,
            "trailing bytes after payload",
        ));
    }
    Ok((h, w))
}

pub fn encode_image(img: &HuImage) -> Result<Vec<u8>> {
    let mut out = header(IMAGE_MAGIC, img.h, img.w)?;
    out.reserve(img.data.len() * 2);
    for v in &img.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_image(bytes: &[u8]) -> Result<HuImage> {
    let (h, w) = parse_header(bytes, IMAGE_MAGIC, 2)?;
    let data = bytes[HEADER_LEN..]
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]))
        .collect();
    Ok(HuImage { h, w, data })
}

pub fn encode_mask(mask: &Mask) -> Result<Vec<u8>> {
    let mut out = header(MASK_MAGIC, mask.h, mask.w)?;
    out.extend_from_slice(&mask.data);
    Ok(out)
}

pub fn decode_mask(bytes: &[u8]) -> Result<Mask> {
    let (h, w) = parse_header(bytes, MASK_MAGIC, 1)?;
    let data = bytes[HEADER_LEN..].to_vec();
    if let Some(i) = data.iter().position(|&v| v > 1) {
        return Err(Error::format(
            (HEADER_LEN + i) as u64,
            format!("mask byte {} is not 0 or 1", data[i]),
        ));
    }
    Ok(Mask { h, w, data })
}

pub fn read_image(path: &Path) -> Result<HuImage> {
    decode_image(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    decode_mask(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Writes to a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.as_file()
        .sync_all()
        .map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn write_image(path: &Path, img: &HuImage) -> Result<()> {
    write_atomic(path, &encode_image(img)?)
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    write_atomic(path, &encode_mask(mask)?)
}

/// 8-bit grayscale PNG.
pub fn write_png(path: &Path, h: usize, w: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != h * w {
        return Err(Error::shape(format!(
            "{h}x{w} PNG with {} pixels",
            pixels.len()
        )));
    }
    let buf = image::GrayImage::from_raw(w as u32, h as u32, pixels.to_vec())
        .ok_or_else(|| Error::shape(format!("{h}x{w} PNG buffer")))?;
    let mut bytes = Vec::new();
    buf.write_to(
        &mut std::io::Cursor::new(&mut bytes),
        image::ImageFormat::Png,
    )
    .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    write_atomic(path, &bytes)
}

/// Reads an 8-bit grayscale PNG as `(h, w, pixels)`.
pub fn read_png(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::format(0, format!("{}: {other}", path.display())),
    })?;
    let gray = img.to_luma8();
    Ok((
        gray.height() as usize,
        gray.width() as usize,
        gray.into_raw(),
    ))
}

/// Binary mask as a 0/255 PNG.
pub fn write_mask_png(path: &Path, mask: &Mask) -> Result<()> {
    let px: Vec<u8> = mask.data.iter().map(|&v| v * 255).collect();
    write_png(path, mask.h, mask.w, &px)
}
