//! Grayscale image grids in [0, 1] and their on-disk forms.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, RlpoError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    /// Row-major pixels.
    pub data: Vec<f64>,
}

pub type ImageBatch = Vec<Image>;

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(RlpoError::shape("image data", height * width, data.len()));
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Image {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len().max(1) as f64
    }

    pub fn clamp01(mut self) -> Self {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
        self
    }

    /// Copy of the `h`×`w` window whose top-left corner is `(y, x)`.
    pub fn crop(&self, y: usize, x: usize, h: usize, w: usize) -> Image {
        let mut data = Vec::with_capacity(h * w);
        for r in y..y + h {
            data.extend_from_slice(&self.data[r * self.width + x..r * self.width + x + w]);
        }
        Image {
            height: h,
            width: w,
            data,
        }
    }

    /// Non-overlapping tiles of `size`×`size`, row-major order.
    pub fn tiles(&self, size: usize) -> Vec<Image> {
        let mut out = Vec::new();
        let mut y = 0;
        while y + size <= self.height {
            let mut x = 0;
            while x + size <= self.width {
                out.push(self.crop(y, x, size, size));
                x += size;
            }
            y += size;
        }
        out
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let file = BufWriter::new(File::create(path)?);
        let mut enc = png::Encoder::new(file, self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(png_err(path))?;
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        writer.write_image_data(&bytes).map_err(png_err(path))?;
        writer.finish().map_err(png_err(path))?;
        Ok(())
    }

    pub fn read_png(path: &Path) -> Result<Image> {
        let decoder = png::Decoder::new(BufReader::new(File::open(path)?));
        let mut reader = decoder.read_info().map_err(png_err(path))?;
        let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
        let info = reader.next_frame(&mut buf).map_err(png_err(path))?;
        if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
            return Err(RlpoError::Checkpoint {
                path: path.to_path_buf(),
                reason: "expected 8-bit grayscale png".into(),
            });
        }
        let data = buf[..info.buffer_size()]
            .iter()
            .map(|&b| b as f64 / 255.0)
            .collect();
        Image::new(info.height as usize, info.width as usize, data)
    }
}

fn png_err<E: std::fmt::Display>(path: &Path) -> impl Fn(E) -> RlpoError + '_ {
    move |e| RlpoError::Checkpoint {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

/// Sidecar metadata for a raw tensor file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawTensorMeta {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub ordering: String,
}

/// Write a batch as a little-endian f32 tensor `[n, h, w]` at `path` plus
/// `path` + `.json` metadata.
pub fn write_batch_raw(batch: &[Image], path: &Path) -> Result<()> {
    let (h, w) = batch.first().map_or((0, 0), |im| (im.height, im.width));
    let mut out = BufWriter::new(File::create(path)?);
    for im in batch {
        if im.height != h || im.width != w {
            return Err(RlpoError::shape("batch image size", h * w, im.len()));
        }
        for v in &im.data {
            out.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    out.flush()?;
    let meta = RawTensorMeta {
        shape: vec![batch.len(), h, w],
        dtype: "f32".into(),
        ordering: "row-major".into(),
    };
    std::fs::write(sidecar(path), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn read_batch_raw(path: &Path) -> Result<ImageBatch> {
    let meta: RawTensorMeta = serde_json::from_str(&std::fs::read_to_string(sidecar(path))?)?;
    if meta.dtype != "f32" || meta.shape.len() != 3 {
        return Err(RlpoError::Checkpoint {
            path: path.to_path_buf(),
            reason: format!("unsupported tensor {:?} {:?}", meta.dtype, meta.shape),
        });
    }
    let (n, h, w) = (meta.shape[0], meta.shape[1], meta.shape[2]);
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    if bytes.len() != n * h * w * 4 {
        return Err(RlpoError::Checkpoint {
            path: path.to_path_buf(),
            reason: format!("expected {} bytes, found {}", n * h * w * 4, bytes.len()),
        });
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    values
        .chunks(h * w)
        .map(|c| Image::new(h, w, c.to_vec()))
        .collect()
}

fn sidecar(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_quantizes_to_8_bits() {
        let dir = tempfile::tempdir().unwrap();
        let im = Image::new(2, 3, vec![0.0, 0.25, 0.5, 0.75, 1.0, 0.1]).unwrap();
        let p = dir.path().join("a.png");
        im.write_png(&p).unwrap();
        let back = Image::read_png(&p).unwrap();
        assert_eq!((back.height, back.width), (2, 3));
        for (a, b) in im.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn raw_batch_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let batch = vec![Image::filled(2, 2, 0.5), Image::filled(2, 2, 0.125)];
        let p = dir.path().join("b.f32");
        write_batch_raw(&batch, &p).unwrap();
        assert_eq!(read_batch_raw(&p).unwrap(), batch);
    }

    #[test]
    fn tiles_cover_quadrants() {
        let im = Image::new(4, 4, (0..16).map(|v| v as f64).collect()).unwrap();
        let t = im.tiles(2);
        assert_eq!(t.len(), 4);
        assert_eq!(t[1].data, vec![2.0, 3.0, 6.0, 7.0]);
    }
}
