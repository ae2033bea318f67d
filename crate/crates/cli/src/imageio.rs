//! PNG input and output, and flow visualization.

use std::io::Cursor;
use std::path::Path;

use hpmatch_core::pyramid::ImageRgb;
use hpmatch_core::{Real, Tensor};
use image::{ImageFormat, RgbImage};

use crate::error::{CliError, Result};

pub fn load_png(path: &Path) -> Result<ImageRgb> {
    let err = |source| CliError::Image {
        path: path.to_path_buf(),
        source,
    };
    let img = image::ImageReader::open(path)
        .map_err(|e| CliError::io(path, e))?
        .with_guessed_format()
        .map_err(|e| CliError::io(path, e))?
        .decode()
        .map_err(err)?
        .to_rgb8();
    Ok(from_rgb8(&img))
}

pub fn from_rgb8(img: &RgbImage) -> ImageRgb {
    ImageRgb::from_fn(img.height() as usize, img.width() as usize, |y, x, c| {
        img.get_pixel(x as u32, y as u32)[c] as Real / 255.0
    })
}

/// Quantizes an `H x W x 3` tensor with values in `[0, 1]` to 8 bits.
pub fn to_rgb8(t: &Tensor) -> RgbImage {
    RgbImage::from_fn(t.width() as u32, t.height() as u32, |x, y| {
        let p = t.pixel(y as usize, x as usize);
        image::Rgb([0, 1, 2].map(|c| (p[c].clamp(0.0, 1.0) * 255.0).round() as u8))
    })
}

pub fn encode_png(t: &Tensor) -> Result<Vec<u8>> {
    if t.channels() != 3 {
        return Err(CliError::Failed(format!("cannot write a {}-channel image as RGB", t.channels())));
    }
    let mut out = Cursor::new(Vec::new());
    to_rgb8(t)
        .write_to(&mut out, ImageFormat::Png)
        .map_err(|source| CliError::Image {
            path: "<png>".into(),
            source,
        })?;
    Ok(out.into_inner())
}

fn hsv_to_rgb(h: Real, s: Real, v: Real) -> [Real; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Color-wheel rendering of an `H x W x 2` offset map: hue encodes the
/// direction, saturation the magnitude relative to `scale`, value is 1.
pub fn flow_to_rgb(flow: &Tensor, scale: Real) -> Tensor {
    Tensor::from_fn(flow.height(), flow.width(), 3, |y, x, c| {
        let f = flow.pixel(y, x);
        let angle = f[1].atan2(f[0]);
        let mag = f[0].hypot(f[1]);
        let s = if scale > 0.0 { (mag / scale).min(1.0) } else { 0.0 };
        hsv_to_rgb(angle / (2.0 * std::f64::consts::PI as Real), s, 1.0)[c]
    })
}
