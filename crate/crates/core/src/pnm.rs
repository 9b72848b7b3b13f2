//! Binary Netpbm images: 8-bit RGB pixmaps (P6) and graymaps (P5).

use std::path::Path;

use crate::error::{Error, Result};

/// Interleaved 8-bit image with `channels` values per pixel (3 for P6, 1 for P5).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::Image(format!(
                "{width}x{height}x{channels} image needs {} bytes, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }

    fn magic(&self) -> Result<&'static str> {
        match self.channels {
            1 => Ok("P5"),
            3 => Ok("P6"),
            c => Err(Error::Image(format!("no binary Netpbm format for {c} channels"))),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = format!("{}\n{} {}\n255\n", self.magic()?, self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }
}

/// Parses a P6 (`channels = 3`) or P5 (`channels = 1`) file with maxval 255.
pub fn decode(bytes: &[u8], channels: usize) -> Result<Image> {
    let want = match channels {
        1 => b"P5",
        3 => b"P6",
        c => return Err(Error::Image(format!("no binary Netpbm format for {c} channels"))),
    };
    if bytes.len() < 2 || &bytes[..2] != want {
        return Err(Error::Image(format!(
            "expected {} magic, found {:?}",
            String::from_utf8_lossy(want),
            String::from_utf8_lossy(&bytes[..bytes.len().min(2)])
        )));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (field, name) in fields.iter_mut().zip(["width", "height", "maxval"]) {
        *field = header_number(bytes, &mut pos, name)?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::Image(format!(
            "maxval {maxval} unsupported, only 8-bit (255) images"
        )));
    }
    // Exactly one whitespace byte separates the header from the raster.
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::Image("missing whitespace after maxval".into())),
    }
    let need = width * height * channels;
    let raster = &bytes[pos..];
    if raster.len() < need {
        return Err(Error::Image(format!(
            "truncated raster: need {need} bytes, have {}",
            raster.len()
        )));
    }
    Image::new(width, height, channels, raster[..need].to_vec())
}

fn header_number(bytes: &[u8], pos: &mut usize, name: &str) -> Result<usize> {
    loop {
        match bytes.get(*pos) {
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            _ => break,
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(u8::is_ascii_digit) {
        *pos += 1;
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .filter(|&v: &usize| v > 0)
        .ok_or_else(|| Error::Image(format!("bad or missing {name} in header")))
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    decode(&bytes, 3)
}

pub fn read_pgm(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    decode(&bytes, 1)
}
