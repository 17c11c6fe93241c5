//! Row-major float images and their PFM / PNG encodings.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: malformed PFM: {reason}")]
    Pfm { path: String, reason: String },
    #[error("{path}: png: {reason}")]
    Png { path: String, reason: String },
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    Shape { expected: (usize, usize, usize), got: (usize, usize, usize) },
    #[error("{path}: mask pixel ({x}, {y}) has value {value}; masks must be 0 or 255")]
    NonBinaryMask { path: String, x: usize, y: usize, value: u8 },
}

/// `height x width x channels` float image, channels interleaved, row 0 at the top.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self { width, height, channels, data: vec![value; width * height * channels] }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self, ImageError> {
        if data.len() != width * height * channels {
            return Err(ImageError::Shape {
                expected: (width, height, channels),
                got: (data.len(), 1, 1),
            });
        }
        Ok(Self { width, height, channels, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.width, self.height, self.channels)
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn pixel(&self, idx: usize) -> &[f64] {
        &self.data[idx * self.channels..(idx + 1) * self.channels]
    }

    pub fn pixel_mut(&mut self, idx: usize) -> &mut [f64] {
        &mut self.data[idx * self.channels..(idx + 1) * self.channels]
    }

    pub fn check_shape(&self, other: &Image) -> Result<(), ImageError> {
        if self.shape() != other.shape() {
            return Err(ImageError::Shape { expected: self.shape(), got: other.shape() });
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image { data: self.data.iter().map(|&v| f(v)).collect(), ..*self }
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        self.data.iter().zip(&other.data).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Nearest-neighbour resample to `width x height`.
    pub fn resize_nearest(&self, width: usize, height: usize) -> Image {
        let mut out = Image::new(width, height, self.channels);
        for y in 0..height {
            let sy = ((y as f64 + 0.5) * self.height as f64 / height as f64) as usize;
            let sy = sy.min(self.height - 1);
            for x in 0..width {
                let sx = ((x as f64 + 0.5) * self.width as f64 / width as f64) as usize;
                let sx = sx.min(self.width - 1);
                for c in 0..self.channels {
                    out.set(x, y, c, self.get(sx, sy, c));
                }
            }
        }
        out
    }

    /// Separable box blur with the given radius, clamped at the borders.
    pub fn box_blur(&self, radius: usize) -> Image {
        if radius == 0 {
            return self.clone();
        }
        let pass = |src: &Image, horizontal: bool| {
            let mut out = Image::new(src.width, src.height, src.channels);
            let r = radius as isize;
            for y in 0..src.height {
                for x in 0..src.width {
                    for c in 0..src.channels {
                        let mut acc = 0.0;
                        for o in -r..=r {
                            let (sx, sy) = if horizontal {
                                ((x as isize + o).clamp(0, src.width as isize - 1) as usize, y)
                            } else {
                                (x, (y as isize + o).clamp(0, src.height as isize - 1) as usize)
                            };
                            acc += src.get(sx, sy, c);
                        }
                        out.set(x, y, c, acc / (2 * radius + 1) as f64);
                    }
                }
            }
            out
        };
        pass(&pass(self, true), false)
    }

    /// Write as little-endian PFM (`PF` for 3 channels, `Pf` for 1), rows bottom-up.
    pub fn write_pfm(&self, path: &Path) -> Result<(), ImageError> {
        let io = |e| ImageError::Io { path: path.display().to_string(), source: e };
        let tag = match self.channels {
            1 => "Pf",
            3 => "PF",
            n => {
                return Err(ImageError::Pfm {
                    path: path.display().to_string(),
                    reason: format!("cannot store {n} channels"),
                })
            }
        };
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        write!(w, "{tag}\n{} {}\n-1.0\n", self.width, self.height).map_err(io)?;
        let row = self.width * self.channels;
        for y in (0..self.height).rev() {
            for v in &self.data[y * row..(y + 1) * row] {
                w.write_all(&(*v as f32).to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    pub fn read_pfm(path: &Path) -> Result<Image, ImageError> {
        let name = path.display().to_string();
        let io = |e| ImageError::Io { path: name.clone(), source: e };
        let bad = |reason: &str| ImageError::Pfm { path: name.clone(), reason: reason.to_string() };
        let mut r = BufReader::new(File::open(path).map_err(io)?);
        let mut line = String::new();
        r.read_line(&mut line).map_err(io)?;
        let channels = match line.trim() {
            "PF" => 3,
            "Pf" => 1,
            _ => return Err(bad("unknown header")),
        };
        line.clear();
        r.read_line(&mut line).map_err(io)?;
        let dims: Vec<usize> = line.split_whitespace().filter_map(|s| s.parse().ok()).collect();
        let [width, height] = dims[..] else {
            return Err(bad("bad dimensions line"));
        };
        line.clear();
        r.read_line(&mut line).map_err(io)?;
        let scale: f64 = line.trim().parse().map_err(|_| bad("bad scale line"))?;
        let little = scale < 0.0;
        let row = width * channels;
        let mut buf = vec![0u8; row * height * 4];
        r.read_exact(&mut buf).map_err(|_| bad("truncated pixel data"))?;
        let mut data = vec![0.0; row * height];
        for (i, chunk) in buf.chunks_exact(4).enumerate() {
            let b: [u8; 4] = chunk.try_into().expect("4-byte chunk");
            let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
            let file_row = i / row;
            let y = height - 1 - file_row;
            data[y * row + i % row] = v as f64;
        }
        Ok(Image { width, height, channels, data })
    }

    /// 8-bit PNG preview; values are clamped to `[0, 1]`.
    pub fn write_png(&self, path: &Path) -> Result<(), ImageError> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| to_u8(v)).collect();
        let color = match self.channels {
            1 => image::ExtendedColorType::L8,
            3 => image::ExtendedColorType::Rgb8,
            n => {
                return Err(ImageError::Png {
                    path: path.display().to_string(),
                    reason: format!("cannot store {n} channels"),
                })
            }
        };
        image::save_buffer(path, &bytes, self.width as u32, self.height as u32, color)
            .map_err(|e| ImageError::Png { path: path.display().to_string(), reason: e.to_string() })
    }
}

#[inline]
fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary mask, `true` = inpaint region.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, bits: vec![false; width * height] }
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), width * height);
        Self { width, height, bits }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, idx: usize) -> bool {
        self.bits[idx]
    }

    pub fn set(&mut self, idx: usize, v: bool) {
        self.bits[idx] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.bits.len().max(1) as f64
    }

    pub fn resize_nearest(&self, width: usize, height: usize) -> Mask {
        let img = Image::from_vec(
            self.width,
            self.height,
            1,
            self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
        .expect("mask shape");
        let r = img.resize_nearest(width, height);
        Mask { width, height, bits: r.data().iter().map(|&v| v > 0.5).collect() }
    }

    pub fn write_png(&self, path: &Path) -> Result<(), ImageError> {
        let bytes: Vec<u8> = self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
        image::save_buffer(path, &bytes, self.width as u32, self.height as u32, image::ExtendedColorType::L8)
            .map_err(|e| ImageError::Png { path: path.display().to_string(), reason: e.to_string() })
    }

    /// Read a grayscale PNG mask; any value other than 0 or 255 is rejected.
    pub fn read_png(path: &Path) -> Result<Mask, ImageError> {
        let name = path.display().to_string();
        let img = image::open(path).map_err(|e| ImageError::Png { path: name.clone(), reason: e.to_string() })?;
        let gray = img.to_luma8();
        let (w, h) = (gray.width() as usize, gray.height() as usize);
        let mut bits = Vec::with_capacity(w * h);
        for (i, p) in gray.pixels().enumerate() {
            match p.0[0] {
                0 => bits.push(false),
                255 => bits.push(true),
                value => return Err(ImageError::NonBinaryMask { path: name, x: i % w, y: i / w, value }),
            }
        }
        Ok(Mask { width: w, height: h, bits })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pfm_round_trip_keeps_orientation() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = Image::new(3, 2, 3);
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = i as f64 * 0.1 + 0.123_456_789;
        }
        let p = dir.path().join("a.pfm");
        img.write_pfm(&p).unwrap();
        let back = Image::read_pfm(&p).unwrap();
        assert_eq!(back.shape(), img.shape());
        assert!(back.max_abs_diff(&img) < 1e-6);
        assert!((back.get(0, 0, 0) - img.get(0, 0, 0)).abs() < 1e-6);
    }

    #[test]
    fn mask_png_rejects_gray_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        image::save_buffer(&p, &[0, 255, 128, 0], 2, 2, image::ExtendedColorType::L8).unwrap();
        let err = Mask::read_png(&p).unwrap_err();
        assert!(matches!(err, ImageError::NonBinaryMask { value: 128, x: 0, y: 1, .. }));
        let mut m = Mask::new(2, 2);
        m.set(1, true);
        m.write_png(&p).unwrap();
        assert_eq!(Mask::read_png(&p).unwrap(), m);
    }

    #[test]
    fn nearest_resize_preserves_blocks() {
        let mut m = Mask::new(4, 4);
        for i in [0, 1, 4, 5] {
            m.set(i, true);
        }
        let r = m.resize_nearest(2, 2);
        assert_eq!(r.bits(), &[true, false, false, false]);
    }

    #[test]
    fn blur_preserves_constants() {
        let img = Image::filled(5, 4, 3, 0.25);
        assert!(img.box_blur(2).max_abs_diff(&img) < 1e-15);
    }
}
