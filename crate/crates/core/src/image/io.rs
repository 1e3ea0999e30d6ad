//! PNG read/write. Everything internal is real-valued `[0,1]`; files are
//! 8-bit with the v/255 <-> round(v*255) mapping.

use super::Image;
use crate::error::{Error, Result};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

pub fn load_png(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| Error::Png {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Png {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Png {
            path: path.to_path_buf(),
            message: format!("only 8-bit PNGs supported, got {:?}", info.bit_depth),
        });
    }
    let (h, w) = (info.height as usize, info.width as usize);
    let to_f = |v: u8| v as f32 / 255.0;
    let mut img = Image::new(h, w);
    match info.color_type {
        png::ColorType::Rgb => {
            for (px, src) in img.data_mut().chunks_exact_mut(3).zip(buf.chunks_exact(3)) {
                px[0] = to_f(src[0]);
                px[1] = to_f(src[1]);
                px[2] = to_f(src[2]);
            }
        }
        png::ColorType::Rgba => {
            for (px, src) in img.data_mut().chunks_exact_mut(3).zip(buf.chunks_exact(4)) {
                px[0] = to_f(src[0]);
                px[1] = to_f(src[1]);
                px[2] = to_f(src[2]);
            }
        }
        png::ColorType::Grayscale => {
            for (px, src) in img.data_mut().chunks_exact_mut(3).zip(buf.iter()) {
                let v = to_f(*src);
                px.fill(v);
            }
        }
        png::ColorType::GrayscaleAlpha => {
            for (px, src) in img.data_mut().chunks_exact_mut(3).zip(buf.chunks_exact(2)) {
                let v = to_f(src[0]);
                px.fill(v);
            }
        }
        other => {
            return Err(Error::Png {
                path: path.to_path_buf(),
                message: format!("unsupported color type {other:?}"),
            });
        }
    }
    Ok(img)
}

/// Cheap validity probe: the file exists and its PNG header decodes.
pub fn png_header_ok(path: impl AsRef<Path>) -> bool {
    let Ok(file) = File::open(path.as_ref()) else {
        return false;
    };
    png::Decoder::new(BufReader::new(file)).read_info().is_ok()
}

/// Write as 8-bit RGB via a temp file + atomic rename, so failures never
/// leave a partial image behind.
pub fn save_png(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("png.tmp");
    {
        let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut encoder = png::Encoder::new(
            BufWriter::new(file),
            img.width() as u32,
            img.height() as u32,
        );
        encoder.set_color(png::ColorType::Rgb);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder.write_header().map_err(|e| Error::Png {
            path: tmp.clone(),
            message: e.to_string(),
        })?;
        let bytes: Vec<u8> = img
            .data()
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        writer.write_image_data(&bytes).map_err(|e| Error::Png {
            path: tmp.clone(),
            message: e.to_string(),
        })?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
