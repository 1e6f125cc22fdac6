//! PNG/JPEG decoding into [`ImageTensor`] and PNG encoding.

use std::path::Path;

use image::ImageReader;
use ndarray::Array3;

use super::ImageTensor;
use crate::error::Result;

/// Decodes a PNG or JPEG file into a 3×H×W tensor with values in [0,1].
pub fn load_image(path: &Path) -> Result<ImageTensor> {
    let rgb = ImageReader::open(path)?.decode()?.to_rgb8();
    let (w, h) = rgb.dimensions();
    let mut data = Array3::<f64>::zeros((3, h as usize, w as usize));
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            data[[c, y as usize, x as usize]] = px.0[c] as f64 / 255.0;
        }
    }
    Ok(ImageTensor::from_valid(data))
}

/// Encodes the tensor as an 8-bit RGB PNG.
pub fn save_image(image: &ImageTensor, path: &Path) -> Result<()> {
    let (h, w) = (image.height(), image.width());
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    let data = image.data();
    for y in 0..h {
        for x in 0..w {
            let px = [
                to_byte(data[[0, y, x]]),
                to_byte(data[[1, y, x]]),
                to_byte(data[[2, y, x]]),
            ];
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    buf.save(path)?;
    Ok(())
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn png_round_trip_preserves_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.png");
        // Values already on the u8 grid survive the round trip exactly.
        let data = Array3::from_shape_fn((3, 5, 4), |(c, y, x)| {
            ((c * 67 + y * 13 + x * 29) % 256) as f64 / 255.0
        });
        let img = ImageTensor::new(data).unwrap();
        save_image(&img, &path).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(img.data(), back.data());
    }
}
