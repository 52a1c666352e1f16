//! Reading videos from disk and cutting fixed-length clips out of them.

use std::fs;
use std::path::{Path, PathBuf};

use image::{imageops, ImageBuffer, Rgb};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClipSpec {
    pub frames: usize,
    pub skip: usize,
    pub height: usize,
    pub width: usize,
    /// Side fraction kept by the center crop applied before resizing.
    pub crop_scale: f64,
}

impl Default for ClipSpec {
    fn default() -> Self {
        Self {
            frames: 16,
            skip: 4,
            height: 112,
            width: 112,
            crop_scale: 0.8,
        }
    }
}

impl ClipSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 || !self.frames.is_multiple_of(2) {
            return Err(config_err!("clip frames must be even and >= 2, got {}", self.frames));
        }
        if self.skip == 0 {
            return Err(config_err!("frame skip must be >= 1"));
        }
        if !(self.crop_scale > 0.0 && self.crop_scale <= 1.0) {
            return Err(config_err!("crop scale must be in (0, 1], got {}", self.crop_scale));
        }
        Ok(())
    }
}

/// Map an unbounded index onto `0..n` by bouncing off both ends:
/// `0, 1, .., n-1, n-2, .., 1, 0, 1, ..`.
pub fn palindrome_index(p: usize, n: usize) -> usize {
    if n <= 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = p % period;
    if m < n {
        m
    } else {
        period - m
    }
}

/// Source frame indices for a clip starting at `start`.
pub fn clip_indices(n_source: usize, frames: usize, skip: usize, start: usize) -> Vec<usize> {
    (0..frames).map(|i| palindrome_index(start + i * skip, n_source)).collect()
}

/// Latest start that still fits the clip without padding (0 if none does).
pub fn max_start(n_source: usize, frames: usize, skip: usize) -> usize {
    let span = (frames - 1) * skip + 1;
    n_source.saturating_sub(span)
}

/// Bilinear resize of one `(H, W, 3)` frame.
pub fn resize_frame(frame: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let s = frame.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(dim_err!("resize expects (H, W, 3), got {:?}", s));
    }
    if s[0] == height && s[1] == width {
        return Ok(frame.clone());
    }
    let raw: Vec<f32> = frame.data().iter().map(|&v| v as f32).collect();
    let img: ImageBuffer<Rgb<f32>, Vec<f32>> =
        ImageBuffer::from_raw(s[1] as u32, s[0] as u32, raw).ok_or_else(|| dim_err!("frame buffer size mismatch"))?;
    let out = imageops::resize(&img, width as u32, height as u32, imageops::FilterType::Triangle);
    Tensor::new(&[height, width, 3], out.into_raw().into_iter().map(|v| (v as f64).clamp(0.0, 1.0)).collect())
}

/// Crop a `(T, H, W, C)` clip to the window `(y, x, h, w)`.
pub fn crop_clip(clip: &Tensor, y: usize, x: usize, h: usize, w: usize) -> Result<Tensor> {
    clip.narrow(1, y, h)?.narrow(2, x, w)
}

/// Centered crop keeping `scale` of each side.
pub fn center_crop(clip: &Tensor, scale: f64) -> Result<Tensor> {
    let s = clip.shape();
    let h = ((s[1] as f64 * scale).round() as usize).clamp(1, s[1]);
    let w = ((s[2] as f64 * scale).round() as usize).clamp(1, s[2]);
    crop_clip(clip, (s[1] - h) / 2, (s[2] - w) / 2, h, w)
}

pub fn resize_clip(clip: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let s = clip.shape();
    if s[1] == height && s[2] == width {
        return Ok(clip.clone());
    }
    let frames = (0..s[0])
        .map(|t| resize_frame(&clip.index0(t)?, height, width))
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&frames.iter().collect::<Vec<_>>())
}

/// Cut a clip out of a `(N, H, W, 3)` source: random start, stride `skip`,
/// palindromic padding past the end, center crop, resize.
pub fn sample_clip(source: &Tensor, spec: &ClipSpec, rng: &mut impl Rng) -> Result<Tensor> {
    spec.validate()?;
    let n = source.shape()[0];
    if n == 0 {
        return Err(dim_err!("source video has no frames"));
    }
    let start = rng.gen_range(0..=max_start(n, spec.frames, spec.skip));
    let frames = clip_indices(n, spec.frames, spec.skip, start)
        .into_iter()
        .map(|i| source.index0(i))
        .collect::<Result<Vec<_>>>()?;
    let clip = Tensor::stack(&frames.iter().collect::<Vec<_>>())?;
    let clip = if spec.crop_scale < 1.0 { center_crop(&clip, spec.crop_scale)? } else { clip };
    resize_clip(&clip, spec.height, spec.width)
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("png")
    )
}

/// Load a video stored either as a tensor container file or as a directory
/// of numbered PNG frames (sorted by file name).
pub fn load_video(path: &Path) -> Result<Tensor> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| Error::data(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| is_image(p))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::data(path, "no PNG frames in directory"));
        }
        let mut frames = Vec::with_capacity(files.len());
        for f in &files {
            let img = image::open(f).map_err(|e| Error::data(f, e))?.to_rgb8();
            let (w, h) = img.dimensions();
            let data = img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
            frames.push(Tensor::new(&[h as usize, w as usize, 3], data)?);
        }
        if frames.iter().any(|f| f.shape() != frames[0].shape()) {
            return Err(Error::data(path, "frames differ in size"));
        }
        Tensor::stack(&frames.iter().collect::<Vec<_>>())
    } else {
        let t = Tensor::load(path).map_err(|e| match e {
            Error::Data { .. } => e,
            other => Error::data(path, other),
        })?;
        if t.rank() != 4 || t.shape()[3] != 3 {
            return Err(Error::data(path, format!("expected (T, H, W, 3), found {:?}", t.shape())));
        }
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Dtype;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn numbered(n: usize) -> Tensor {
        Tensor::from_fn(&[n, 2, 2, 3], |i| (i / 12) as f64)
    }

    #[test]
    fn long_source_never_pads() {
        for s in 0..=3 {
            let idx = clip_indices(64, 16, 4, s);
            assert_eq!(idx, (0..16).map(|i| s + 4 * i).collect::<Vec<_>>());
        }
        assert_eq!(max_start(64, 16, 4), 3);
    }

    #[test]
    fn short_source_pads_in_reverse() {
        assert_eq!(clip_indices(10, 16, 1, 0), vec![0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 8, 7, 6, 5, 4, 3]);
        assert_eq!(clip_indices(1, 16, 4, 0), vec![0; 16]);
    }

    #[test]
    fn sampled_clip_follows_indices() {
        let spec = ClipSpec { frames: 16, skip: 1, height: 2, width: 2, crop_scale: 1.0 };
        let clip = sample_clip(&numbered(10), &spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let firsts: Vec<f64> = (0..16).map(|t| clip.data()[t * 12]).collect();
        assert_eq!(firsts, vec![0., 1., 2., 3., 4., 5., 6., 7., 8., 9., 8., 7., 6., 5., 4., 3.]);
        let single = sample_clip(&numbered(1), &spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(single.shape(), &[16, 2, 2, 3]);
    }

    #[test]
    fn crop_then_resize_hits_target_size() {
        let src = Tensor::from_fn(&[8, 40, 50, 3], |i| (i % 7) as f64 / 7.0);
        let spec = ClipSpec { frames: 4, skip: 2, height: 16, width: 16, crop_scale: 0.8 };
        let clip = sample_clip(&src, &spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(clip.shape(), &[4, 16, 16, 3]);
        assert!(clip.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn loads_png_folders_and_containers() {
        let dir = tempfile::tempdir().unwrap();
        let frames = dir.path().join("v");
        fs::create_dir(&frames).unwrap();
        for i in 0..3u8 {
            let img = image::RgbImage::from_pixel(4, 2, image::Rgb([i * 50, 0, 255]));
            img.save(frames.join(format!("{i:04}.png"))).unwrap();
        }
        let v = load_video(&frames).unwrap();
        assert_eq!(v.shape(), &[3, 2, 4, 3]);
        assert!((v.data()[24 * 2] - 100.0 / 255.0).abs() < 1e-12);

        let file = dir.path().join("c.vtns");
        numbered(3).map(|x| x / 4.0).save(&file, Dtype::F32).unwrap();
        assert_eq!(load_video(&file).unwrap().shape(), &[3, 2, 2, 3]);

        let missing = dir.path().join("nope.vtns");
        match load_video(&missing) {
            Err(Error::Data { path, .. }) => assert_eq!(path, missing),
            other => panic!("expected a data error, got {other:?}"),
        }
    }
}
