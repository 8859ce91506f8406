//! 8-bit RGB PNG files.

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use bitemporal_core::dataset::Image;

use crate::error::{IoError, IoResult};

pub fn save_png(image: &Image, path: &Path) -> IoResult<()> {
    let file = fs::File::create(path).map_err(|e| IoError::file(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), image.width as u32, image.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc
        .write_header()
        .map_err(|e| IoError::format(path, e.to_string()))?;
    w.write_image_data(&image.to_rgb8())
        .map_err(|e| IoError::format(path, e.to_string()))?;
    w.finish().map_err(|e| IoError::format(path, e.to_string()))
}

pub fn load_png(path: &Path) -> IoResult<Image> {
    let file = fs::File::open(path).map_err(|e| IoError::file(path, e))?;
    let dec = png::Decoder::new(BufReader::new(file));
    let mut reader = dec.read_info().map_err(|e| IoError::format(path, e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| IoError::format(path, e.to_string()))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(IoError::format(
            path,
            format!("expected 8-bit RGB, found {:?} {:?}", info.color_type, info.bit_depth),
        ));
    }
    buf.truncate(info.buffer_size());
    Ok(Image::from_rgb8(info.height as usize, info.width as usize, &buf)?)
}
