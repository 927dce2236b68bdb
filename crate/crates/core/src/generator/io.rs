use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensor::{ImageTensor, Shape};

pub const DBIMG_MAGIC: &[u8; 6] = b"DBIMG1";

/// `DBIMG1 | u32 C, H, W | f32 data`, little-endian, channel-major.
pub fn encode_dbimg(image: &ImageTensor) -> Vec<u8> {
    let s = image.shape();
    let mut buf = Vec::with_capacity(18 + 4 * s.len());
    buf.extend_from_slice(DBIMG_MAGIC);
    for d in [s.channels, s.height, s.width] {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in image.to_f32() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_dbimg(bytes: &[u8]) -> Result<ImageTensor> {
    if bytes.len() < 18 || &bytes[..6] != DBIMG_MAGIC {
        return Err(Error::Format("not a DBIMG1 tensor".into()));
    }
    let dim = |k: usize| u32::from_le_bytes(bytes[6 + 4 * k..10 + 4 * k].try_into().unwrap()) as usize;
    let shape = Shape::new(dim(0), dim(1), dim(2));
    let body = &bytes[18..];
    if shape.is_empty() || body.len() != 4 * shape.len() {
        return Err(Error::Format(format!("tensor body of {} bytes does not fit {shape}", body.len())));
    }
    let data: Vec<f32> = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    ImageTensor::from_f32(shape, &data).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_dbimg(path: &Path, image: &ImageTensor) -> Result<()> {
    fs::write(path, encode_dbimg(image))?;
    Ok(())
}

pub fn read_dbimg(path: &Path) -> Result<ImageTensor> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    decode_dbimg(&bytes)
}

fn png_err(e: impl std::fmt::Display) -> Error {
    Error::Format(format!("png: {e}"))
}

/// 8-bit preview. One channel is written as grayscale, three as RGB; other
/// channel counts preview their first channel.
pub fn write_png(path: &Path, image: &ImageTensor) -> Result<()> {
    let s = image.shape();
    let (color, channels) = if s.channels == 3 { (png::ColorType::Rgb, 3) } else { (png::ColorType::Grayscale, 1) };
    let mut pixels = Vec::with_capacity(s.height * s.width * channels);
    for y in 0..s.height {
        for x in 0..s.width {
            for c in 0..channels {
                pixels.push((image.get(c, y, x) * 255.0).round() as u8);
            }
        }
    }
    let w = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(w, s.width as u32, s.height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(&pixels).map_err(png_err)?;
    writer.finish().map_err(png_err)?;
    Ok(())
}

/// Reads an 8-bit grayscale or RGB(A) PNG, scaled to `[0, 1]`.
pub fn read_png(path: &Path) -> Result<ImageTensor> {
    let mut decoder = png::Decoder::new(BufReader::new(File::open(path)?));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(png_err)?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| png_err("image too large"))?];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    let (h, w) = (info.height as usize, info.width as usize);
    let (src, keep) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        other => return Err(png_err(format!("unsupported color type {other:?}"))),
    };
    let shape = Shape::new(keep, h, w);
    let mut data = vec![0.0; shape.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..keep {
                data[shape.index(c, y, x)] = buf[(y * w + x) * src + c] as f64 / 255.0;
            }
        }
    }
    ImageTensor::new(shape, data)
}

pub fn read_image(path: &Path) -> Result<ImageTensor> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("png") => read_png(path),
        _ => read_dbimg(path),
    }
}

/// One labelled image.
#[derive(Debug, Clone)]
pub struct Sample {
    pub index: usize,
    pub label: usize,
    pub image: Arc<ImageTensor>,
}

/// Images sharing a shape, listed in `labels.csv` (`index,label,file`).
#[derive(Debug, Clone)]
pub struct Dataset {
    pub shape: Shape,
    pub samples: Vec<Sample>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelRow {
    index: usize,
    label: usize,
    file: String,
}

pub const LABELS_FILE: &str = "labels.csv";

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        let Some(first) = samples.first() else {
            return invalid("dataset is empty");
        };
        let shape = first.image.shape();
        if let Some(s) = samples.iter().find(|s| s.image.shape() != shape) {
            return invalid(format!("sample {} is {} but the dataset is {shape}", s.index, s.image.shape()));
        }
        let mut seen = std::collections::BTreeSet::new();
        if let Some(s) = samples.iter().find(|s| !seen.insert(s.index)) {
            return invalid(format!("duplicate sample index {}", s.index));
        }
        Ok(Self { shape, samples })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(dir.join(LABELS_FILE)).map_err(csv_err)?;
        let mut samples = Vec::new();
        for row in rdr.deserialize() {
            let row: LabelRow = row.map_err(csv_err)?;
            let image = read_image(&dir.join(&row.file))?;
            samples.push(Sample { index: row.index, label: row.label, image: Arc::new(image) });
        }
        Self::new(samples)
    }

    /// Writes canonical tensors, PNG previews and `labels.csv`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join(LABELS_FILE)).map_err(csv_err)?;
        for s in &self.samples {
            let file = format!("{}.dbimg", s.index);
            write_dbimg(&dir.join(&file), &s.image)?;
            write_png(&dir.join(format!("{}.png", s.index)), &s.image)?;
            w.serialize(LabelRow { index: s.index, label: s.label, file }).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn get(&self, index: usize) -> Option<&Sample> {
        self.samples.iter().find(|s| s.index == index)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

/// Creates `path`'s parent directories and returns it.
pub(crate) fn prepared(path: PathBuf) -> Result<PathBuf> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    Ok(path)
}

/// Writes `bytes` to `path` through a buffered writer.
pub(crate) fn write_all(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(bytes)?;
    w.flush()?;
    Ok(())
}
