//! RGB images, the raw on-disk image format, and synthetic glyph canvases.
//!
//! On disk an image is a 12-byte header (`b"RGB8"`, width u32 LE, height
//! u32 LE) followed by `width * height * 3` bytes, row-major RGB.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const IMAGE_MAGIC: &[u8; 4] = b"RGB8";
pub const IMAGE_HEADER_LEN: usize = 12;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB bytes.
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height * 3 {
            return Err(Error::dim(
                "image",
                format!("{width}x{height} RGB needs {} bytes, got {}", width * height * 3, pixels.len()),
            ));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let pixels = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self {
            width,
            height,
            pixels,
        }
    }

    pub fn blank(width: usize, height: usize) -> Self {
        Self::filled(width, height, [0, 0, 0])
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let o = (y * self.width + x) * 3;
        self.pixels[o..o + 3].copy_from_slice(&rgb);
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let o = (y * self.width + x) * 3;
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(IMAGE_HEADER_LEN + self.pixels.len());
        out.extend_from_slice(IMAGE_MAGIC);
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        if bytes.len() < IMAGE_HEADER_LEN || &bytes[..4] != IMAGE_MAGIC {
            return Err(Error::format(origin, "missing RGB8 header"));
        }
        let w = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = &bytes[IMAGE_HEADER_LEN..];
        if body.len() != w * h * 3 {
            return Err(Error::format(
                origin,
                format!("header says {w}x{h} but payload has {} bytes", body.len()),
            ));
        }
        Ok(Self {
            width: w,
            height: h,
            pixels: body.to_vec(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes, path)
    }
}

/// Resolves image identifiers to pixels.
pub trait ImageSource {
    fn load(&self, id: &str) -> Result<Image>;
}

/// Images stored as `<dir>/<id>.rgb`.
#[derive(Clone, Debug)]
pub struct ImageDir {
    root: std::path::PathBuf,
}

impl ImageDir {
    pub fn new(root: impl Into<std::path::PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn path_of(&self, id: &str) -> std::path::PathBuf {
        self.root.join(format!("{id}.rgb"))
    }
}

impl ImageSource for ImageDir {
    fn load(&self, id: &str) -> Result<Image> {
        let path = self.path_of(id);
        if !path.exists() {
            return Err(Error::MissingImage(path.display().to_string()));
        }
        Image::load(&path)
    }
}

impl ImageSource for std::collections::HashMap<String, Image> {
    fn load(&self, id: &str) -> Result<Image> {
        self.get(id).cloned().ok_or_else(|| Error::MissingImage(id.to_string()))
    }
}

impl ImageSource for std::collections::BTreeMap<String, Image> {
    fn load(&self, id: &str) -> Result<Image> {
        self.get(id).cloned().ok_or_else(|| Error::MissingImage(id.to_string()))
    }
}

/// Shapes painted onto synthetic canvases.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Glyph {
    HBar,
    VBar,
    Cross,
    Square,
    Diagonal,
    Dot,
}

impl Glyph {
    pub const ALL: [Glyph; 6] = [
        Glyph::HBar,
        Glyph::VBar,
        Glyph::Cross,
        Glyph::Square,
        Glyph::Diagonal,
        Glyph::Dot,
    ];

    fn covers(self, u: f64, v: f64) -> bool {
        // u, v in [0, 1) relative to the glyph box
        let band = |t: f64| (0.35..0.65).contains(&t);
        match self {
            Glyph::HBar => band(v),
            Glyph::VBar => band(u),
            Glyph::Cross => band(u) || band(v),
            Glyph::Square => !(0.2..0.8).contains(&u) || !(0.2..0.8).contains(&v),
            Glyph::Diagonal => (u - v).abs() < 0.18,
            Glyph::Dot => (u - 0.5).powi(2) + (v - 0.5).powi(2) < 0.09,
        }
    }
}

/// A flat-color canvas with a glyph painted over most of it.
pub fn glyph_canvas(size: usize, background: [u8; 3], glyph: Glyph, ink: [u8; 3]) -> Image {
    let mut img = Image::filled(size, size, background);
    let lo = size / 8;
    let span = size - 2 * lo;
    for y in lo..lo + span {
        for x in lo..lo + span {
            let u = (x - lo) as f64 / span as f64;
            let v = (y - lo) as f64 / span as f64;
            if glyph.covers(u, v) {
                img.set(x, y, ink);
            }
        }
    }
    img
}
