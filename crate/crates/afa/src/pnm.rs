//! Netpbm images: PPM (`P3`/`P6`) for RGB input, PGM (`P2`/`P5`) for labels.

use std::fs;
use std::path::Path;

use afa_core::{LabelImage, RgbImage};

use crate::error::{FormatError, Result};

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    maxval: u32,
    /// Offset of the first raster byte.
    data_start: usize,
}

fn malformed(kind: &'static str, reason: impl Into<String>) -> FormatError {
    FormatError::MalformedHeader {
        kind,
        reason: reason.into(),
    }
}

/// Cursor over whitespace-separated header tokens, skipping `#` comments.
struct Tokens<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Tokens<'a> {
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, kind: &'static str, what: &str) -> Result<u32> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(malformed(kind, format!("missing {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| malformed(kind, format!("{what} out of range")))
    }
}

fn parse_header(
    bytes: &[u8],
    kind: &'static str,
    ascii: &[u8; 2],
    binary: &[u8; 2],
) -> Result<Header> {
    if bytes.len() < 2 {
        return Err(malformed(kind, "file too short"));
    }
    let magic = [bytes[0], bytes[1]];
    if &magic != ascii && &magic != binary {
        return Err(malformed(
            kind,
            format!(
                "expected magic {} or {}",
                String::from_utf8_lossy(ascii),
                String::from_utf8_lossy(binary)
            ),
        ));
    }
    let mut tokens = Tokens { bytes, pos: 2 };
    let width = tokens.number(kind, "width")? as usize;
    let height = tokens.number(kind, "height")? as usize;
    let maxval = tokens.number(kind, "maxval")?;
    if width == 0 || height == 0 {
        return Err(malformed(kind, "width and height must be positive"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(malformed(kind, "maxval must lie in 1..=65535"));
    }
    // exactly one whitespace byte separates the header from a binary raster
    match bytes.get(tokens.pos) {
        Some(b) if b.is_ascii_whitespace() => {}
        _ => return Err(malformed(kind, "header must end with whitespace")),
    }
    Ok(Header {
        magic,
        width,
        height,
        maxval,
        data_start: tokens.pos + 1,
    })
}

/// Reads `count` samples following the header, ASCII or binary.
fn samples(bytes: &[u8], header: &Header, kind: &'static str, count: usize) -> Result<Vec<u32>> {
    let ascii = header.magic[1] == b'2' || header.magic[1] == b'3';
    let values = if ascii {
        let mut tokens = Tokens {
            bytes,
            pos: header.data_start,
        };
        (0..count)
            .map(|_| tokens.number(kind, "sample"))
            .collect::<Result<Vec<_>>>()?
    } else {
        let width = if header.maxval < 256 { 1 } else { 2 };
        let raster = &bytes[header.data_start..];
        if raster.len() < count * width {
            return Err(malformed(
                kind,
                format!("raster has {} bytes, need {}", raster.len(), count * width),
            ));
        }
        raster[..count * width]
            .chunks_exact(width)
            .map(|c| match c {
                [b] => u32::from(*b),
                [hi, lo] => u32::from(*hi) << 8 | u32::from(*lo),
                _ => unreachable!(),
            })
            .collect()
    };
    if let Some(v) = values.iter().find(|&&v| v > header.maxval) {
        return Err(malformed(
            kind,
            format!("sample {v} exceeds maxval {}", header.maxval),
        ));
    }
    Ok(values)
}

pub fn decode_image(bytes: &[u8]) -> Result<RgbImage> {
    let header = parse_header(bytes, "PPM", b"P3", b"P6")?;
    let values = samples(bytes, &header, "PPM", header.width * header.height * 3)?;
    let scale = header.maxval as f32;
    let pixels = values
        .chunks_exact(3)
        .map(|c| {
            [
                c[0] as f32 / scale,
                c[1] as f32 / scale,
                c[2] as f32 / scale,
            ]
        })
        .collect();
    Ok(RgbImage::new(header.height, header.width, pixels)?)
}

/// Decodes a label map. With `num_classes`, every value must be a class
/// index below it or 255.
pub fn decode_labels(bytes: &[u8], num_classes: Option<usize>) -> Result<LabelImage> {
    let header = parse_header(bytes, "PGM", b"P2", b"P5")?;
    if header.maxval > 255 {
        return Err(malformed("PGM", "label maps must be 8-bit (maxval <= 255)"));
    }
    let values = samples(bytes, &header, "PGM", header.width * header.height)?;
    let labels = values.into_iter().map(|v| v as u8).collect();
    let image = LabelImage::new(header.height, header.width, labels)?;
    if let Some(n) = num_classes {
        image.validate(n)?;
    }
    Ok(image)
}

/// Binary `P6`, maxval 255, channels rounded to the nearest level.
pub fn encode_image(image: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    for px in image.pixels() {
        out.extend(px.iter().map(|&c| (c * 255.0).round() as u8));
    }
    out
}

/// Binary `P5`, maxval 255, labels verbatim.
pub fn encode_labels(labels: &LabelImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", labels.width(), labels.height()).into_bytes();
    out.extend_from_slice(labels.labels());
    out
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| FormatError::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| FormatError::io(path, e))
}

pub fn read_image(path: impl AsRef<Path>) -> Result<RgbImage> {
    decode_image(&read(path.as_ref())?)
}

pub fn write_image(image: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    write(path.as_ref(), &encode_image(image))
}

pub fn read_labels(path: impl AsRef<Path>, num_classes: Option<usize>) -> Result<LabelImage> {
    decode_labels(&read(path.as_ref())?, num_classes)
}

pub fn write_labels(labels: &LabelImage, path: impl AsRef<Path>) -> Result<()> {
    write(path.as_ref(), &encode_labels(labels))
}
