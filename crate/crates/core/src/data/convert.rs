use std::fs::File;
use std::path::{Path, PathBuf};

use super::{Dataset, SegSample};
use crate::error::{Error, Result};

struct Decoded {
    width: usize,
    height: usize,
    channels: usize,
    pixels: Vec<u8>,
}

fn decode_png(path: &Path) -> Result<Decoded> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let format_err = |e: png::DecodingError| Error::Format {
        offset: 0,
        message: format!("{}: {e}", path.display()),
    };
    let mut reader = decoder.read_info().map_err(format_err)?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(format_err)?;
    buf.truncate(info.buffer_size());
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => 1,
    };
    Ok(Decoded {
        width: info.width as usize,
        height: info.height as usize,
        channels,
        pixels: buf,
    })
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Converts `dir/images/*.png` (8-bit RGB, RGBA or gray) and
/// `dir/labels/*.png` (8-bit gray class ids, 255 = ignore), paired by file
/// name, into an in-memory dataset.
pub fn convert_png_dir(dir: impl AsRef<Path>, num_classes: usize) -> Result<Dataset> {
    let dir = dir.as_ref();
    if !(2..=255).contains(&num_classes) {
        return Err(Error::config(format!("num_classes {num_classes} outside [2, 255]")));
    }
    let images = png_files(&dir.join("images"))?;
    let mut samples = Vec::with_capacity(images.len());
    let mut size = None;
    for image_path in images {
        let label_path = dir.join("labels").join(image_path.file_name().expect("file entry"));
        let img = decode_png(&image_path)?;
        let lab = decode_png(&label_path)?;
        if (img.height, img.width) != (lab.height, lab.width) || lab.channels != 1 {
            return Err(Error::Format {
                offset: 0,
                message: format!(
                    "{}: label map must be single-channel and match the image size",
                    label_path.display()
                ),
            });
        }
        if *size.get_or_insert((img.height, img.width)) != (img.height, img.width) {
            return Err(Error::Format {
                offset: 0,
                message: format!("{}: image size differs from earlier files", image_path.display()),
            });
        }
        let image = img
            .pixels
            .chunks_exact(img.channels)
            .flat_map(|px| {
                let rgb = if img.channels >= 3 { [px[0], px[1], px[2]] } else { [px[0]; 3] };
                rgb.map(|c| c as f32 / 255.0)
            })
            .collect();
        let sample = SegSample {
            height: img.height,
            width: img.width,
            image,
            labels: lab.pixels,
        };
        sample.validate(num_classes)?;
        samples.push(sample);
    }
    let (height, width) = size.unwrap_or((0, 0));
    Ok(Dataset {
        height,
        width,
        num_classes,
        samples,
    })
}
