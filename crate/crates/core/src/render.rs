//! PNG rendering of fusions and prediction overlays.
//!
//! Overlay colors: red where prediction and ground truth agree, yellow for
//! predicted-only pixels, blue for ground-truth-only pixels, each blended at
//! 50% over the fused image.

use serde::{Deserialize, Serialize};

use crate::grid::{Grid2, RgbImage};

pub const RED: [u8; 3] = [255, 0, 0];
pub const YELLOW: [u8; 3] = [255, 255, 0];
pub const BLUE: [u8; 3] = [0, 0, 255];

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverlayStats {
    pub red: u64,
    pub yellow: u64,
    pub blue: u64,
}

/// Interleaved 8-bit RGB, `round(v * 255)` of values clamped to `[0, 1]`.
pub fn to_rgb8(img: &RgbImage) -> Vec<u8> {
    let (h, w) = img.shape();
    let mut out = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push((img.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    out
}

/// Integer 50% blend, rounding halves up.
#[inline]
pub fn blend(background: u8, color: u8) -> u8 {
    ((u16::from(background) + u16::from(color) + 1) / 2) as u8
}

/// Composites the overlay and returns the interleaved RGB8 buffer with its
/// color counts.
pub fn overlay(background: &RgbImage, pred: &Grid2<u8>, gt: &Grid2<u8>) -> (Vec<u8>, OverlayStats) {
    assert_eq!(background.shape(), pred.shape(), "overlay shape mismatch");
    assert_eq!(pred.shape(), gt.shape(), "overlay shape mismatch");
    let mut px = to_rgb8(background);
    let mut stats = OverlayStats::default();
    for (i, (&p, &g)) in pred.data().iter().zip(gt.data()).enumerate() {
        let color = match (p != 0, g != 0) {
            (true, true) => {
                stats.red += 1;
                RED
            }
            (true, false) => {
                stats.yellow += 1;
                YELLOW
            }
            (false, true) => {
                stats.blue += 1;
                BLUE
            }
            (false, false) => continue,
        };
        for c in 0..3 {
            px[3 * i + c] = blend(px[3 * i + c], color[c]);
        }
    }
    (px, stats)
}

fn encode(width: usize, height: usize, depth: png::BitDepth, data: &[u8]) -> Vec<u8> {
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut buf, width as u32, height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(depth);
        enc.set_compression(png::Compression::Default);
        enc.set_filter(png::FilterType::NoFilter);
        let mut w = enc.write_header().expect("in-memory png header");
        w.write_image_data(data).expect("in-memory png data");
    }
    buf
}

pub fn encode_png_rgb8(width: usize, height: usize, data: &[u8]) -> Vec<u8> {
    encode(width, height, png::BitDepth::Eight, data)
}

/// 16-bit RGB PNG of a fused image, `round(v * 65535)` per channel.
pub fn encode_png_rgb16(img: &RgbImage) -> Vec<u8> {
    let (h, w) = img.shape();
    let mut data = Vec::with_capacity(h * w * 6);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = (img.get(c, y, x).clamp(0.0, 1.0) * 65535.0).round() as u16;
                data.extend_from_slice(&v.to_be_bytes());
            }
        }
    }
    encode(w, h, png::BitDepth::Sixteen, &data)
}
