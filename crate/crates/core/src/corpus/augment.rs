//! Training-time image augmentation: horizontal flip, crop with padding,
//! random erasing.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::Raster;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub crop_padding: usize,
    pub erase_prob: f64,
    pub erase_area: (f64, f64),
    pub erase_aspect: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { flip_prob: 0.5, crop_padding: 10, erase_prob: 0.5, erase_area: (0.02, 0.4), erase_aspect: (0.3, 3.3) }
    }
}

pub fn augment(img: &Raster, cfg: &AugmentConfig, rng: &mut Rng) -> Raster {
    let (h, w) = (img.height, img.width);
    let flip = rng.random::<f64>() < cfg.flip_prob;
    let pad = cfg.crop_padding as i64;
    let (dy, dx) = if pad > 0 { (rng.random_range(-pad..=pad), rng.random_range(-pad..=pad)) } else { (0, 0) };
    let mut out = Raster::filled(h, w, [0.0; 3]);
    for y in 0..h {
        let sy = y as i64 + dy;
        if sy < 0 || sy >= h as i64 {
            continue;
        }
        for x in 0..w {
            let xx = if flip { w - 1 - x } else { x };
            let sx = xx as i64 + dx;
            if sx < 0 || sx >= w as i64 {
                continue;
            }
            out.set_pixel(y, x, img.pixel(sy as usize, sx as usize));
        }
    }
    if rng.random::<f64>() < cfg.erase_prob {
        let area = (h * w) as f64;
        for _ in 0..10 {
            let target = area * rng.random_range(cfg.erase_area.0..cfg.erase_area.1);
            let aspect = rng.random_range(cfg.erase_aspect.0.ln()..cfg.erase_aspect.1.ln()).exp();
            let eh = (target * aspect).sqrt().round() as usize;
            let ew = (target / aspect).sqrt().round() as usize;
            if eh == 0 || ew == 0 || eh >= h || ew >= w {
                continue;
            }
            let y0 = rng.random_range(0..h - eh);
            let x0 = rng.random_range(0..w - ew);
            for y in y0..y0 + eh {
                for x in x0..x0 + ew {
                    out.set_pixel(y, x, [0.5; 3]);
                }
            }
            break;
        }
    }
    out
}
