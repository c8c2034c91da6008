use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, ImageFormat, Luma};

use crate::container::{self, Header};
use crate::error::{Error, Result};

const ARRAY_MAGIC: &str = "PN2V-ARRAY";
const ARRAY_VERSION: u32 = 1;
const PNG_SIGNATURE: &[u8] = b"\x89PNG\r\n\x1a\n";

/// Extension used for the lossless raw-array container.
pub const RAW_EXTENSION: &str = "raw";

/// Single-channel image with row-major raw intensities.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageArray {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl ImageArray {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::ShapeMismatch(format!("image must be at least 1x1, got {height}x{width}")));
        }
        if pixels.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{height}x{width} image needs {} pixels, got {}",
                height * width,
                pixels.len()
            )));
        }
        if let Some(i) = pixels.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("pixel {i} is {}", pixels[i])));
        }
        Ok(ImageArray { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Result<Self> {
        let mut pixels = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                pixels.push(f(r, c));
            }
        }
        Self::new(height, width, pixels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f32> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.width + col]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Self> {
        Self::new(self.height, self.width, self.pixels.iter().map(|&v| f(v)).collect())
    }

    /// Copies the `size.0 x size.1` window whose top-left corner is `origin`.
    pub fn crop(&self, origin: (usize, usize), size: (usize, usize)) -> Result<Self> {
        let (r0, c0) = origin;
        let (h, w) = size;
        if r0 + h > self.height || c0 + w > self.width {
            return Err(Error::ShapeMismatch(format!(
                "crop {h}x{w} at ({r0}, {c0}) exceeds {}x{} image",
                self.height, self.width
            )));
        }
        let mut pixels = Vec::with_capacity(h * w);
        for r in r0..r0 + h {
            pixels.extend_from_slice(&self.pixels[r * self.width + c0..r * self.width + c0 + w]);
        }
        Self::new(h, w, pixels)
    }

    pub fn to_container_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::with_capacity(self.pixels.len() * 4);
        for v in &self.pixels {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        let mut h = Header::new();
        h.put("version", ARRAY_VERSION).put("height", self.height).put("width", self.width);
        h.encode(ARRAY_MAGIC, &payload)
    }

    pub fn from_container_bytes(bytes: &[u8]) -> Result<Self> {
        let parsed = container::decode(bytes, ARRAY_MAGIC)?;
        parsed.check_version(ARRAY_VERSION)?;
        let height: usize = parsed.get("height")?;
        let width: usize = parsed.get("width")?;
        let payload = parsed.payload_exact(height * width * 4)?;
        let pixels = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Self::new(height, width, pixels)
    }
}

/// Reads a grayscale PNG (8 or 16 bit) or a raw-array container; the format
/// is detected from the file signature.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageArray> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::from(e).at_path(path))?;
    decode_image(&bytes).map_err(|e| e.at_path(path))
}

fn decode_image(bytes: &[u8]) -> Result<ImageArray> {
    if bytes.starts_with(PNG_SIGNATURE) {
        let decoded = image::load_from_memory_with_format(bytes, ImageFormat::Png)?;
        let (w, h) = (decoded.width() as usize, decoded.height() as usize);
        let pixels = match decoded {
            DynamicImage::ImageLuma8(buf) => buf.into_raw().into_iter().map(f32::from).collect(),
            DynamicImage::ImageLuma16(buf) => buf.into_raw().into_iter().map(f32::from).collect(),
            other => {
                return Err(Error::UnsupportedImage(format!(
                    "single-channel only, got {:?}",
                    other.color()
                )))
            }
        };
        return ImageArray::new(h, w, pixels);
    }
    if container::starts_with_magic(bytes, ARRAY_MAGIC) {
        return ImageArray::from_container_bytes(bytes);
    }
    Err(Error::UnsupportedImage("expected PNG or raw-array container".into()))
}

/// Writes `img`. A `.png` extension selects 16-bit grayscale PNG, where values
/// are rounded and clamped to `[0, 65535]`; anything else writes the lossless
/// raw container. Returns the number of clipped pixels.
pub fn save_image(img: &ImageArray, path: impl AsRef<Path>) -> Result<usize> {
    let path = path.as_ref();
    let is_png = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"));
    if !is_png {
        fs::write(path, img.to_container_bytes()).map_err(|e| Error::from(e).at_path(path))?;
        return Ok(0);
    }
    let mut clipped = 0;
    let data: Vec<u16> = img
        .pixels
        .iter()
        .map(|&v| {
            let r = v.round();
            if !(0.0..=65535.0).contains(&r) {
                clipped += 1;
            }
            r.clamp(0.0, 65535.0) as u16
        })
        .collect();
    if clipped > 0 {
        log::warn!("{}: clipped {clipped} pixels to the 16-bit range", path.display());
    }
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(img.width as u32, img.height as u32, data)
            .ok_or_else(|| Error::ShapeMismatch("png buffer size".into()))?;
    buf.save_with_format(path, ImageFormat::Png).map_err(|e| Error::from(e).at_path(path))?;
    Ok(clipped)
}

/// Image files (`.png` or raw container) directly inside `dir`, sorted by name.
pub fn list_images(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::from(e).at_path(dir))? {
        let path = entry?.path();
        let keep = path.is_file()
            && path
                .extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("png") || e == RAW_EXTENSION);
        if keep {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}
