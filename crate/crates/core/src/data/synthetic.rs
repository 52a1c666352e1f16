//! Procedural moving-shape clips and textured cover clips.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::rng::stream_rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Motion {
    Translate,
    Rotate,
    Scale,
    Oscillate,
}

impl Motion {
    pub const ALL: [Motion; 4] = [Motion::Translate, Motion::Rotate, Motion::Scale, Motion::Oscillate];

    pub fn from_class(class_id: usize) -> Result<Self> {
        Self::ALL
            .get(class_id)
            .copied()
            .ok_or_else(|| config_err!("class id {class_id} is out of range (0..{})", Self::ALL.len()))
    }
}

impl fmt::Display for Motion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Motion::Translate => "translate",
            Motion::Rotate => "rotate",
            Motion::Scale => "scale",
            Motion::Oscillate => "oscillate",
        })
    }
}

impl FromStr for Motion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| config_err!("unknown motion '{s}'"))
    }
}

/// Shape colors; the color index is the privacy attribute.
pub const PALETTE: [[f64; 3]; 4] = [
    [0.9, 0.15, 0.15],
    [0.15, 0.8, 0.2],
    [0.2, 0.3, 0.95],
    [0.95, 0.85, 0.1],
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Std of grayscale pixel noise added per frame.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            frames: 16,
            height: 32,
            width: 32,
            noise: 0.02,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if !(2..=Motion::ALL.len()).contains(&self.classes) {
            return Err(config_err!("synthetic classes must be in 2..={}, got {}", Motion::ALL.len(), self.classes));
        }
        if self.frames < 2 || self.height < 8 || self.width < 8 {
            return Err(config_err!("synthetic canvas {}x{}x{} is too small", self.frames, self.height, self.width));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticClip {
    pub video: Tensor,
    pub label: usize,
    pub color: usize,
}

/// Rectangle pose for one frame, in pixel units.
#[derive(Clone, Copy, Debug)]
struct Pose {
    cx: f64,
    cy: f64,
    half_w: f64,
    half_h: f64,
    angle: f64,
}

fn poses(motion: Motion, t_len: usize, h: f64, w: f64, rng: &mut impl Rng) -> Vec<Pose> {
    let half_w = rng.gen_range(0.16..0.22) * w;
    let half_h = rng.gen_range(0.07..0.1) * h;
    let margin = half_w + 1.0;
    let phase = rng.gen_range(0.0..2.0 * PI);
    let last = (t_len - 1).max(1) as f64;
    let base_angle = rng.gen_range(0.0..PI);
    let mut out = Vec::with_capacity(t_len);
    match motion {
        Motion::Translate => {
            let dir = rng.gen_range(0.0..2.0 * PI);
            let travel = rng.gen_range(0.3..0.4) * w.min(h);
            let (dx, dy) = (dir.cos() * travel, dir.sin() * travel);
            let cx0 = w / 2.0 - dx / 2.0;
            let cy0 = h / 2.0 - dy / 2.0;
            for t in 0..t_len {
                let f = t as f64 / last;
                out.push(Pose { cx: cx0 + f * dx, cy: cy0 + f * dy, half_w, half_h, angle: base_angle });
            }
        }
        Motion::Rotate => {
            let spin = rng.gen_range(0.6..1.0) * PI * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let cx = rng.gen_range(margin..w - margin);
            let cy = rng.gen_range(margin..h - margin);
            for t in 0..t_len {
                let angle = base_angle + spin * t as f64 / last;
                out.push(Pose { cx, cy, half_w, half_h, angle });
            }
        }
        Motion::Scale => {
            let cx = rng.gen_range(margin..w - margin);
            let cy = rng.gen_range(margin..h - margin);
            let grow = rng.gen_bool(0.5);
            for t in 0..t_len {
                let f = t as f64 / last;
                let k = if grow { 0.4 + 0.8 * f } else { 1.2 - 0.8 * f };
                out.push(Pose { cx, cy, half_w: half_w * k, half_h: half_h * k * 1.5, angle: base_angle });
            }
        }
        Motion::Oscillate => {
            let amp = rng.gen_range(0.2..0.28) * w;
            let periods = rng.gen_range(1.5..2.0);
            let cy = rng.gen_range(margin..h - margin);
            for t in 0..t_len {
                let cx = w / 2.0 + amp * (2.0 * PI * periods * t as f64 / t_len as f64 + phase).sin();
                out.push(Pose { cx, cy, half_w: half_h * 1.5, half_h: half_h * 1.5, angle: 0.0 });
            }
        }
    }
    out
}

/// Fraction of a pixel covered by the rectangle, by 4x4 supersampling.
fn coverage(p: &Pose, px: usize, py: usize) -> f64 {
    let (s, c) = p.angle.sin_cos();
    let mut hits = 0;
    for sy in 0..4 {
        for sx in 0..4 {
            let x = px as f64 + (sx as f64 + 0.5) / 4.0 - p.cx;
            let y = py as f64 + (sy as f64 + 0.5) / 4.0 - p.cy;
            let u = c * x + s * y;
            let v = -s * x + c * y;
            if u.abs() <= p.half_w && v.abs() <= p.half_h {
                hits += 1;
            }
        }
    }
    hits as f64 / 16.0
}

/// Low-contrast gray texture shared by all frames of a clip.
fn background(h: usize, w: usize, rng: &mut impl Rng) -> Vec<f64> {
    let level = rng.gen_range(0.35..0.6);
    let (fx, fy) = (rng.gen_range(0.2..0.6), rng.gen_range(0.2..0.6));
    let phase = rng.gen_range(0.0..2.0 * PI);
    (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f64, (i % w) as f64);
            level + 0.04 * (fx * x + fy * y + phase).sin() + rng.gen_range(-0.02..0.02)
        })
        .collect()
}

/// Render one clip of `class_id`'s motion with a random color.
pub fn generate_clip(spec: &SyntheticSpec, class_id: usize, seed: u64) -> Result<SyntheticClip> {
    spec.validate()?;
    if class_id >= spec.classes {
        return Err(config_err!("class id {class_id} is out of range for {} classes", spec.classes));
    }
    let motion = Motion::from_class(class_id)?;
    let mut rng = stream_rng(spec.seed, 1, seed);
    let color = rng.gen_range(0..PALETTE.len());
    let (t_len, h, w) = (spec.frames, spec.height, spec.width);
    let bg = background(h, w, &mut rng);
    let track = poses(motion, t_len, h as f64, w as f64, &mut rng);
    let rgb = PALETTE[color];
    let mut data = Vec::with_capacity(t_len * h * w * 3);
    for pose in &track {
        for y in 0..h {
            for x in 0..w {
                let a = coverage(pose, x, y);
                let gray = bg[y * w + x]
                    + if spec.noise > 0.0 { rng.gen_range(-1.0..1.0) * spec.noise * 3f64.sqrt() } else { 0.0 };
                for c in rgb {
                    data.push((a * c + (1.0 - a) * gray).clamp(0.0, 1.0));
                }
            }
        }
    }
    Ok(SyntheticClip {
        video: Tensor::new(&[t_len, h, w, 3], data)?,
        label: class_id,
        color,
    })
}

/// A smooth moving color gradient with mild texture, kept inside `[0.1, 0.9]`.
pub fn generate_cover(frames: usize, height: usize, width: usize, seed: u64, index: u64) -> Tensor {
    let mut rng = stream_rng(seed, 2, index);
    let base: [f64; 3] = [rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7)];
    let grad: [f64; 3] = [rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2)];
    let dir = rng.gen_range(0.0..2.0 * PI);
    let speed = rng.gen_range(0.02..0.08);
    let tex_f = rng.gen_range(0.3..0.9);
    let tex_a = rng.gen_range(0.01..0.04);
    let (dc, ds) = (dir.cos(), dir.sin());
    Tensor::from_fn(&[frames, height, width, 3], |i| {
        let c = i % 3;
        let x = ((i / 3) % width) as f64 / width as f64;
        let y = ((i / 3 / width) % height) as f64 / height as f64;
        let t = (i / 3 / width / height) as f64;
        let s = dc * x + ds * y + speed * t;
        let tex = tex_a * ((x * width as f64 * tex_f).sin() * (y * height as f64 * tex_f).cos());
        (base[c] + grad[c] * (2.0 * PI * s).sin() + tex).clamp(0.1, 0.9)
    })
}

/// Saturation-weighted centroid `(x, y)` of one frame `(H, W, 3)`. Gray
/// pixels weigh nothing, so this tracks the colored shape.
pub fn shape_centroid(frame: &Tensor) -> Option<(f64, f64)> {
    let s = frame.shape();
    let (h, w) = (s[0], s[1]);
    let (mut sx, mut sy, mut sw) = (0.0, 0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            let p = &frame.data()[(y * w + x) * 3..(y * w + x) * 3 + 3];
            let sat = p.iter().cloned().fold(f64::MIN, f64::max) - p.iter().cloned().fold(f64::MAX, f64::min);
            sx += sat * (x as f64 + 0.5);
            sy += sat * (y as f64 + 0.5);
            sw += sat;
        }
    }
    (sw > 1e-9).then(|| (sx / sw, sy / sw))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet() -> SyntheticSpec {
        SyntheticSpec { noise: 0.0, ..Default::default() }
    }

    fn centroids(clip: &Tensor) -> Vec<(f64, f64)> {
        (0..clip.shape()[0]).map(|t| shape_centroid(&clip.index0(t).unwrap()).unwrap()).collect()
    }

    #[test]
    fn translate_moves_at_constant_speed() {
        for seed in 0..5 {
            let c = generate_clip(&quiet(), 0, seed).unwrap();
            let cs = centroids(&c.video);
            let steps: Vec<(f64, f64)> = cs.windows(2).map(|p| (p[1].0 - p[0].0, p[1].1 - p[0].1)).collect();
            let mean = steps.iter().fold((0.0, 0.0), |a, s| (a.0 + s.0, a.1 + s.1));
            let mean = (mean.0 / steps.len() as f64, mean.1 / steps.len() as f64);
            for s in &steps {
                assert!((s.0 - mean.0).hypot(s.1 - mean.1) < 0.5, "seed {seed}: step {s:?} vs {mean:?}");
            }
        }
    }

    #[test]
    fn oscillate_reverses_direction_twice() {
        for seed in 0..5 {
            let c = generate_clip(&quiet(), 3, seed).unwrap();
            let xs: Vec<f64> = centroids(&c.video).iter().map(|p| p.0).collect();
            let d: Vec<f64> = xs.windows(2).map(|p| p[1] - p[0]).collect();
            let changes = d.windows(2).filter(|p| p[0].signum() != p[1].signum()).count();
            assert!(changes >= 2, "seed {seed}: {changes} sign changes");
        }
    }

    #[test]
    fn clips_are_deterministic_and_in_range() {
        let spec = SyntheticSpec::default();
        let a = generate_clip(&spec, 1, 42).unwrap();
        let b = generate_clip(&spec, 1, 42).unwrap();
        assert_eq!(a.video, b.video);
        assert_eq!(a.color, b.color);
        assert!(a.video.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_ne!(generate_clip(&spec, 1, 43).unwrap().video, a.video);
    }

    #[test]
    fn invalid_class_is_a_config_error() {
        let spec = SyntheticSpec { classes: 3, ..Default::default() };
        assert!(matches!(generate_clip(&spec, 3, 0), Err(Error::Config(_))));
    }

    #[test]
    fn covers_stay_in_band() {
        let c = generate_cover(16, 32, 32, 1, 0);
        assert!(c.data().iter().all(|v| (0.1..=0.9).contains(v)));
        assert_eq!(c, generate_cover(16, 32, 32, 1, 0));
    }
}
