//! Cropping and resizing primitives. Images resize bilinearly, label maps
//! with nearest-neighbor so label values are never blended.
//!
//! Both samplers use pixel-center alignment: output pixel `i` samples the
//! source at `(i + 0.5) * scale - 0.5`.

use crate::grid::{Grid2, RgbImage};

/// Copies the `height x width` window at `(y0, x0)`; positions outside the
/// source read as `T::default()`.
pub fn crop<T: Copy + Default>(src: &Grid2<T>, y0: i64, x0: i64, height: usize, width: usize) -> Grid2<T> {
    Grid2::from_fn(height, width, |y, x| {
        let sy = y0 + y as i64;
        let sx = x0 + x as i64;
        if sy < 0 || sx < 0 || sy >= src.height() as i64 || sx >= src.width() as i64 {
            T::default()
        } else {
            src.get(sy as usize, sx as usize)
        }
    })
}

pub fn crop_rgb(src: &RgbImage, y0: i64, x0: i64, height: usize, width: usize) -> RgbImage {
    let mut out = RgbImage::zeros(height, width);
    for c in 0..3 {
        for y in 0..height {
            let sy = y0 + y as i64;
            if sy < 0 || sy >= src.height() as i64 {
                continue;
            }
            for x in 0..width {
                let sx = x0 + x as i64;
                if sx >= 0 && sx < src.width() as i64 {
                    out.set(c, y, x, src.get(c, sy as usize, sx as usize));
                }
            }
        }
    }
    out
}

#[inline]
fn nearest_index(i: usize, scale: f64, extent: usize) -> usize {
    (((i as f64 + 0.5) * scale).floor() as usize).min(extent - 1)
}

pub fn resize_nearest<T: Copy>(src: &Grid2<T>, height: usize, width: usize) -> Grid2<T> {
    let sy = src.height() as f64 / height as f64;
    let sx = src.width() as f64 / width as f64;
    Grid2::from_fn(height, width, |y, x| {
        src.get(
            nearest_index(y, sy, src.height()),
            nearest_index(x, sx, src.width()),
        )
    })
}

/// Source taps `(i0, i1, frac)` for one output coordinate.
#[inline]
fn bilinear_taps(i: usize, scale: f64, extent: usize) -> (usize, usize, f32) {
    let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (extent - 1) as f64);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(extent - 1);
    (i0, i1, (s - i0 as f64) as f32)
}

pub fn resize_bilinear(src: &RgbImage, height: usize, width: usize) -> RgbImage {
    let sy = src.height() as f64 / height as f64;
    let sx = src.width() as f64 / width as f64;
    let ytaps: Vec<_> = (0..height).map(|y| bilinear_taps(y, sy, src.height())).collect();
    let xtaps: Vec<_> = (0..width).map(|x| bilinear_taps(x, sx, src.width())).collect();
    let mut out = RgbImage::zeros(height, width);
    for c in 0..3 {
        for (y, &(y0, y1, fy)) in ytaps.iter().enumerate() {
            for (x, &(x0, x1, fx)) in xtaps.iter().enumerate() {
                let top = src.get(c, y0, x0) * (1.0 - fx) + src.get(c, y0, x1) * fx;
                let bottom = src.get(c, y1, x0) * (1.0 - fx) + src.get(c, y1, x1) * fx;
                out.set(c, y, x, top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_zero_fills_outside() {
        let g = Grid2::new(2, 2, vec![1u16, 2, 3, 4]);
        let c = crop(&g, -1, 0, 3, 2);
        assert_eq!(c.data(), &[0, 0, 1, 2, 3, 4]);
    }

    #[test]
    fn same_size_resize_is_identity() {
        let g = Grid2::from_fn(5, 7, |y, x| (y * 7 + x) as u16);
        assert_eq!(resize_nearest(&g, 5, 7), g);
        let mut img = RgbImage::zeros(4, 4);
        img.set(1, 2, 3, 0.75);
        assert_eq!(resize_bilinear(&img, 4, 4), img);
    }

    #[test]
    fn downsample_constant_stays_constant() {
        let mut img = RgbImage::zeros(10, 10);
        img.channel_mut(0).fill(0.5);
        let out = resize_bilinear(&img, 7, 7);
        assert!(out.channel(0).iter().all(|&v| (v - 0.5).abs() < 1e-7));
        assert!(out.channel(2).iter().all(|&v| v == 0.0));
    }
}
