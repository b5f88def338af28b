//! PNG and small text-format helpers.

use crate::colormap::COLORMAP;
use crate::error::{Error, Result};
use crate::synth::Image;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

fn encode_png(path: &Path, width: usize, height: usize, color: png::ColorType, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let to_err = |e: png::EncodingError| Error::Data(format!("{}: {e}", path.display()));
    let mut writer = enc.write_header().map_err(to_err)?;
    writer.write_image_data(bytes).map_err(to_err)?;
    writer.finish().map_err(to_err)
}

/// Writes a planar [3,H,W] image in [0,1] as 8-bit RGB.
pub fn write_rgb_png(path: &Path, img: &Image) -> Result<()> {
    let (h, w) = (img.height, img.width);
    let mut bytes = Vec::with_capacity(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                bytes.push((img.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    encode_png(path, w, h, png::ColorType::Rgb, &bytes)
}

/// Reads an 8-bit RGB (or RGBA, alpha dropped) PNG into [0,1] floats (`value/255`).
pub fn read_rgb_png(path: &Path) -> Result<Image> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let bad = |e: String| Error::Data(format!("{}: {e}", path.display()));
    let mut reader = decoder.read_info().map_err(|e| bad(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| bad("image too large".into()))?];
    let info = reader.next_frame(&mut buf).map_err(|e| bad(e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(bad("only 8-bit PNGs are supported".into()));
    }
    let channels = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(bad(format!("unsupported color type {other:?}"))),
    };
    let (h, w) = (info.height as usize, info.width as usize);
    let mut img = Image::new(h, w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let i = img.idx(c, y, x);
                img.data[i] = buf[y * info.line_size + x * channels + c] as f64 / 255.0;
            }
        }
    }
    Ok(img)
}

/// Colormapped heatmap of an H×W map with values in [0,1].
pub fn write_heatmap_png(path: &Path, values: &[f64], height: usize, width: usize) -> Result<()> {
    if values.len() != height * width {
        return Err(Error::shape("heatmap", &[height, width], &[values.len()]));
    }
    let bytes: Vec<u8> = values
        .iter()
        .flat_map(|v| COLORMAP[(v.clamp(0.0, 1.0) * 255.0).round() as usize])
        .collect();
    encode_png(path, width, height, png::ColorType::Rgb, &bytes)
}

/// Raw H×W map as CSV, one image row per line.
pub fn write_map_csv(path: &Path, values: &[f64], height: usize, width: usize) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for y in 0..height {
        let row: Vec<String> = values[y * width..(y + 1) * width].iter().map(|v| format!("{v}")).collect();
        writeln!(out, "{}", row.join(",")).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}
