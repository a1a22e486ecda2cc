use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{MitosError, Result};
use crate::tensor::Tensor;

fn image_err(path: &Path, msg: impl ToString) -> MitosError {
    MitosError::Image {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    }
}

/// Reads an 8-bit PNG (RGB, RGBA or grayscale) as `[3, H, W]` in `[0, 1]`.
pub fn load_png(path: &Path) -> Result<Tensor> {
    let file = File::open(path).map_err(|e| MitosError::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| image_err(path, e))?;
    let size = reader.output_buffer_size().ok_or_else(|| image_err(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| image_err(path, e))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        other => return Err(image_err(path, format!("unsupported color type {:?}", other))),
    };
    let mut data = vec![0.0; 3 * h * w];
    for y in 0..h {
        let row = &buf[y * info.line_size..];
        for x in 0..w {
            for c in 0..3 {
                let src = if channels >= 3 { c } else { 0 };
                data[(c * h + y) * w + x] = row[x * channels + src] as f64 / 255.0;
            }
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Quantizes `[3, H, W]` values in `[0, 1]` to interleaved 8-bit RGB.
pub fn tensor_to_rgb8(img: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = img.dims3("tensor_to_rgb8")?;
    if c != 3 {
        return Err(MitosError::shape("tensor_to_rgb8", "3 channels", c));
    }
    let d = img.data();
    let mut out = Vec::with_capacity(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                out.push((d[(ch * h + y) * w + x].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    Ok(out)
}

pub fn save_png(path: &Path, img: &Tensor) -> Result<()> {
    let bytes = tensor_to_rgb8(img)?;
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let file = File::create(path).map_err(|e| MitosError::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| image_err(path, e))?;
    writer.write_image_data(&bytes).map_err(|e| image_err(path, e))?;
    writer.finish().map_err(|e| image_err(path, e))
}
