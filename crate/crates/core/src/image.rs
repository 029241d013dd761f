//! Minimal 8-bit RGB raster used throughout the pipeline.

use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::invalid(format!(
                "raw buffer of {} bytes does not fit {width}x{height} RGB",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut img = Self::new(width, height);
        for px in img.data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn as_raw(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Copy of the pixel rectangle `[x0, x0 + w) x [y0, y0 + h)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<RgbImage> {
        if w == 0 || h == 0 || x0 + w > self.width || y0 + h > self.height {
            return Err(Error::invalid(format!(
                "crop ({x0}, {y0}, {w}, {h}) outside {}x{} image",
                self.width, self.height
            )));
        }
        let mut out = RgbImage::new(w, h);
        for y in 0..h {
            let src = ((y0 + y) * self.width + x0) * 3;
            let dst = y * w * 3;
            out.data[dst..dst + w * 3].copy_from_slice(&self.data[src..src + w * 3]);
        }
        Ok(out)
    }

    /// Nearest-neighbour resize sampling source pixel `floor((x + 0.5) * sw / dw)`.
    pub fn resize_nearest(&self, new_w: usize, new_h: usize) -> RgbImage {
        let mut out = RgbImage::new(new_w, new_h);
        for y in 0..new_h {
            let sy = (((y as f64 + 0.5) * self.height as f64 / new_h as f64) as usize).min(self.height - 1);
            for x in 0..new_w {
                let sx = (((x as f64 + 0.5) * self.width as f64 / new_w as f64) as usize).min(self.width - 1);
                out.put(x, y, self.get(sx, sy));
            }
        }
        out
    }

    /// Box-filter downscale by an integer factor.
    pub fn downscale(&self, factor: usize) -> RgbImage {
        let factor = factor.max(1);
        let (w, h) = ((self.width / factor).max(1), (self.height / factor).max(1));
        let mut out = RgbImage::new(w, h);
        let n = (factor * factor) as u32;
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0u32; 3];
                for dy in 0..factor {
                    for dx in 0..factor {
                        let p = self.get((x * factor + dx).min(self.width - 1), (y * factor + dy).min(self.height - 1));
                        for c in 0..3 {
                            acc[c] += p[c] as u32;
                        }
                    }
                }
                out.put(x, y, [((acc[0] + n / 2) / n) as u8, ((acc[1] + n / 2) / n) as u8, ((acc[2] + n / 2) / n) as u8]);
            }
        }
        out
    }

    pub fn flip_horizontal(&self) -> RgbImage {
        let mut out = RgbImage::new(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                out.put(self.width - 1 - x, y, self.get(x, y));
            }
        }
        out
    }

    pub fn flip_vertical(&self) -> RgbImage {
        let mut out = RgbImage::new(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                out.put(x, self.height - 1 - y, self.get(x, y));
            }
        }
        out
    }

    /// Overwrite a region with `patch`, top-left at `(x0, y0)`.
    pub fn paste(&mut self, patch: &RgbImage, x0: usize, y0: usize) -> Result<()> {
        if x0 + patch.width > self.width || y0 + patch.height > self.height {
            return Err(Error::invalid("patch does not fit inside canvas"));
        }
        for y in 0..patch.height {
            let dst = ((y0 + y) * self.width + x0) * 3;
            let src = y * patch.width * 3;
            self.data[dst..dst + patch.width * 3].copy_from_slice(&patch.data[src..src + patch.width * 3]);
        }
        Ok(())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut encoder = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        encoder.set_color(png::ColorType::Rgb);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder.write_header()?;
        writer.write_image_data(&self.data)?;
        writer.finish()?;
        Ok(())
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        {
            let mut encoder = png::Encoder::new(&mut buf, self.width as u32, self.height as u32);
            encoder.set_color(png::ColorType::Rgb);
            encoder.set_depth(png::BitDepth::Eight);
            let mut writer = encoder.write_header()?;
            writer.write_image_data(&self.data)?;
            writer.finish()?;
        }
        Ok(buf)
    }

    pub fn load_png(path: &Path) -> Result<RgbImage> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::decode_png(&bytes)
    }

    pub fn decode_png(bytes: &[u8]) -> Result<RgbImage> {
        let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
        let mut reader = decoder.read_info()?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| Error::invalid("png too large"))?;
        let mut buf = vec![0; size];
        let info = reader.next_frame(&mut buf)?;
        if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
            return Err(Error::invalid(format!(
                "unsupported png format {:?}/{:?}, expected 8-bit RGB",
                info.color_type, info.bit_depth
            )));
        }
        buf.truncate(info.buffer_size());
        RgbImage::from_raw(info.width as usize, info.height as usize, buf)
    }
}

/// Write bytes through a buffered file handle.
pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(bytes)?;
    w.flush()?;
    Ok(())
}
