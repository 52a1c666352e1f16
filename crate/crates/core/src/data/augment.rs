//! Clip-level augmentation. One plan is drawn per clip and applied to every
//! frame the same way, so motion in the clip is left alone.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::sampling::{crop_clip, resize_clip};
use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub p_erase: f64,
    pub p_crop: f64,
    pub p_flip: f64,
    pub p_jitter: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { p_erase: 0.5, p_crop: 0.5, p_flip: 0.5, p_jitter: 0.5 }
    }
}

impl AugmentConfig {
    pub fn off() -> Self {
        Self { p_erase: 0.0, p_crop: 0.0, p_flip: 0.0, p_jitter: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Erase {
    pub y: usize,
    pub x: usize,
    pub h: usize,
    pub w: usize,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Crop {
    pub y: usize,
    pub x: usize,
    pub h: usize,
    pub w: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Jitter {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
}

/// Concrete transform parameters for one clip.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AugmentPlan {
    pub crop: Option<Crop>,
    pub flip: bool,
    pub jitter: Option<Jitter>,
    pub erase: Option<Erase>,
}

impl AugmentPlan {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn sample(cfg: &AugmentConfig, height: usize, width: usize, rng: &mut impl Rng) -> Self {
        let crop = rng.gen_bool(cfg.p_crop.clamp(0.0, 1.0)).then(|| {
            let s = rng.gen_range(0.75..1.0);
            let h = ((height as f64 * s).round() as usize).clamp(1, height);
            let w = ((width as f64 * s).round() as usize).clamp(1, width);
            Crop { y: rng.gen_range(0..=height - h), x: rng.gen_range(0..=width - w), h, w }
        });
        let flip = rng.gen_bool(cfg.p_flip.clamp(0.0, 1.0));
        let jitter = rng.gen_bool(cfg.p_jitter.clamp(0.0, 1.0)).then(|| Jitter {
            brightness: rng.gen_range(-0.1..0.1),
            contrast: rng.gen_range(0.8..1.2),
            saturation: rng.gen_range(0.8..1.2),
        });
        let erase = rng.gen_bool(cfg.p_erase.clamp(0.0, 1.0)).then(|| {
            let area = rng.gen_range(0.02..0.2) * (height * width) as f64;
            let aspect: f64 = rng.gen_range(0.5f64..2.0);
            let h = ((area * aspect).sqrt().round() as usize).clamp(1, height);
            let w = ((area / aspect).sqrt().round() as usize).clamp(1, width);
            Erase {
                y: rng.gen_range(0..=height - h),
                x: rng.gen_range(0..=width - w),
                h,
                w,
                value: rng.gen_range(0.0..1.0),
            }
        });
        Self { crop, flip, jitter, erase }
    }

    /// Apply to a `(T, H, W, 3)` clip. Output keeps the input size and
    /// stays in `[0, 1]`.
    pub fn apply(&self, clip: &Tensor) -> Result<Tensor> {
        let s = clip.shape().to_vec();
        if s.len() != 4 || s[3] != 3 {
            return Err(dim_err!("augmentation expects (T, H, W, 3), got {:?}", s));
        }
        let (h, w) = (s[1], s[2]);
        let mut out = match &self.crop {
            Some(c) => resize_clip(&crop_clip(clip, c.y, c.x, c.h, c.w)?, h, w)?,
            None => clip.clone(),
        };
        if self.flip {
            let src = out.clone();
            let (sd, dd) = (src.data(), out.data_mut());
            for t in 0..s[0] {
                for y in 0..h {
                    for x in 0..w {
                        let a = ((t * h + y) * w + x) * 3;
                        let b = ((t * h + y) * w + (w - 1 - x)) * 3;
                        dd[a..a + 3].copy_from_slice(&sd[b..b + 3]);
                    }
                }
            }
        }
        if let Some(j) = &self.jitter {
            for px in out.data_mut().chunks_exact_mut(3) {
                let gray = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
                for v in px.iter_mut() {
                    let sat = gray + j.saturation * (*v - gray);
                    *v = ((sat - 0.5) * j.contrast + 0.5 + j.brightness).clamp(0.0, 1.0);
                }
            }
        }
        if let Some(e) = &self.erase {
            let d = out.data_mut();
            for t in 0..s[0] {
                for y in e.y..e.y + e.h {
                    for x in e.x..e.x + e.w {
                        let a = ((t * h + y) * w + x) * 3;
                        d[a..a + 3].fill(e.value);
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Draw a plan and apply it.
pub fn augment(clip: &Tensor, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<Tensor> {
    let s = clip.shape();
    if s.len() != 4 {
        return Err(dim_err!("augmentation expects (T, H, W, 3), got {:?}", s));
    }
    AugmentPlan::sample(cfg, s[1], s[2], rng).apply(clip)
}
