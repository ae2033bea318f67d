//! Training-free descriptors: local patches of RGB and luminance gradients.
//!
//! At each level the image is average-pooled from the finer level, five base
//! channels are formed (R, G, B, and the Sobel x/y derivatives of the mean
//! intensity), and every site stacks the base channels of its
//! `(2r+1) x (2r+1)` neighbourhood (borders clamped). Each descriptor channel
//! is then standardized to zero mean and unit variance over the level;
//! channels with no variance become zero.

use super::{check_divisible, ImageRgb, Pyramid};
use crate::error::{Error, Result};
use crate::ops::{resample2x, Direction};
use crate::tensor::{Real, Tensor};

const BASE_CHANNELS: usize = 5;

/// Descriptor length for a patch radius.
pub fn descriptor_channels(radius: usize) -> usize {
    BASE_CHANNELS * (2 * radius + 1) * (2 * radius + 1)
}

fn base_channels(img: &Tensor) -> Tensor {
    let (h, w) = (img.height(), img.width());
    let gray = |y: isize, x: isize| -> Real {
        let yy = y.clamp(0, h as isize - 1) as usize;
        let xx = x.clamp(0, w as isize - 1) as usize;
        let p = img.pixel(yy, xx);
        (p[0] + p[1] + p[2]) / 3.0
    };
    Tensor::from_fn(h, w, BASE_CHANNELS, |y, x, c| {
        let (y, x) = (y as isize, x as isize);
        match c {
            0..=2 => img.get(y as usize, x as usize, c),
            3 => {
                ((gray(y - 1, x + 1) + 2.0 * gray(y, x + 1) + gray(y + 1, x + 1))
                    - (gray(y - 1, x - 1) + 2.0 * gray(y, x - 1) + gray(y + 1, x - 1)))
                    / 8.0
            }
            _ => {
                ((gray(y + 1, x - 1) + 2.0 * gray(y + 1, x) + gray(y + 1, x + 1))
                    - (gray(y - 1, x - 1) + 2.0 * gray(y - 1, x) + gray(y - 1, x + 1)))
                    / 8.0
            }
        }
    })
}

fn descriptors(img: &Tensor, radius: usize) -> Tensor {
    let base = base_channels(img);
    let (h, w) = (img.height(), img.width());
    let side = 2 * radius + 1;
    let d = descriptor_channels(radius);
    let r = radius as isize;
    let mut out = Tensor::zeros(h, w, d);
    for y in 0..h {
        for x in 0..w {
            let px = out.pixel_mut(y, x);
            for dy in -r..=r {
                let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                for dx in -r..=r {
                    let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                    let slot = ((dy + r) as usize * side + (dx + r) as usize) * BASE_CHANNELS;
                    px[slot..slot + BASE_CHANNELS].copy_from_slice(base.pixel(yy, xx));
                }
            }
        }
    }
    standardize(&mut out);
    out
}

fn standardize(t: &mut Tensor) {
    let (n, c) = (t.height() * t.width(), t.channels());
    let mut mean = vec![0.0 as Real; c];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(t.site(i)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as Real;
    }
    let mut var = vec![0.0 as Real; c];
    for i in 0..n {
        for ((s, v), m) in var.iter_mut().zip(t.site(i)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let scale: Vec<Real> = var
        .iter()
        .map(|s| {
            let sd = (s / n as Real).sqrt();
            if sd < 1e-12 {
                0.0
            } else {
                1.0 / sd
            }
        })
        .collect();
    for i in 0..n {
        for ((v, m), k) in t.site_mut(i).iter_mut().zip(&mean).zip(&scale) {
            *v = (*v - m) * k;
        }
    }
}

pub fn extract_pyramid_handcrafted(image: &ImageRgb, levels: usize, radius: usize) -> Result<Pyramid> {
    check_divisible(image.height(), image.width(), levels)?;
    if radius > 8 {
        return Err(Error::invalid("handcrafted", format!("patch radius {radius} too large")));
    }
    let mut images = vec![image.tensor().clone()];
    for _ in 1..levels {
        let next = resample2x(images.last().unwrap(), Direction::Down)?;
        images.push(next);
    }
    images.reverse();
    Pyramid::new(images.iter().map(|img| descriptors(img, radius)).collect())
}
