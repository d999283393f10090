use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// Display window: values at or below `lo` map to black, at or above `hi` to white.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub lo: f64,
    pub hi: f64,
}

impl Window {
    pub fn from_level_width(level: f64, width: f64) -> Self {
        Window {
            lo: level - width / 2.0,
            hi: level + width / 2.0,
        }
    }

    pub fn full_range(x: &Image) -> Self {
        let (lo, hi) = x
            .values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        if hi > lo {
            Window { lo, hi }
        } else {
            Window { lo, hi: lo + 1.0 }
        }
    }
}

/// 8-bit grayscale export for visual inspection.
pub fn save_png(path: &Path, x: &Image, window: Window) -> Result<()> {
    if window.hi.is_nan() || window.lo.is_nan() || window.hi <= window.lo {
        return Err(Error::invalid("display window must have hi > lo"));
    }
    let n = x.n() as u32;
    let scale = 255.0 / (window.hi - window.lo);
    let pixels: Vec<u8> = x
        .values
        .iter()
        .map(|&v| ((v - window.lo) * scale).round().clamp(0.0, 255.0) as u8)
        .collect();
    let img = image::GrayImage::from_raw(n, n, pixels).expect("buffer matches dimensions");
    img.save(path)
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
}
