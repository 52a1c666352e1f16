//! Datasets: synthetic motion clips, manifest ingestion, clip sampling and
//! augmentation.

pub mod augment;
pub mod manifest;
pub mod sampling;
pub mod synthetic;

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::tensor::{Dtype, Tensor};
pub use augment::{augment, AugmentConfig, AugmentPlan};
pub use manifest::{Manifest, Record, Role, Split};
pub use sampling::{load_video, sample_clip, ClipSpec};
pub use synthetic::{generate_clip, generate_cover, Motion, SyntheticSpec, PALETTE};

/// One secret video with its action label and binary privacy attributes.
#[derive(Clone, Debug)]
pub struct Sample {
    pub source: Tensor,
    pub label: usize,
    pub attrs: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticCounts {
    pub train: usize,
    pub val: usize,
    pub train_covers: usize,
    pub eval_covers: usize,
}

impl Default for SyntheticCounts {
    fn default() -> Self {
        Self { train: 200, val: 100, train_covers: 40, eval_covers: 20 }
    }
}

/// Offset that keeps validation seeds away from training seeds.
const EVAL_OFFSET: u64 = 1 << 32;

#[derive(Clone, Debug)]
pub struct Dataset {
    pub clip: ClipSpec,
    pub num_classes: usize,
    pub num_attrs: usize,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
    /// Covers for training. Disjoint from `eval_covers`.
    pub train_covers: Vec<Tensor>,
    pub eval_covers: Vec<Tensor>,
}

fn one_hot(i: usize, n: usize) -> Vec<u8> {
    (0..n).map(|j| u8::from(j == i)).collect()
}

impl Dataset {
    /// Clip spec that passes synthetic clips through unchanged.
    pub fn synthetic_clip_spec(spec: &SyntheticSpec) -> ClipSpec {
        ClipSpec { frames: spec.frames, skip: 1, height: spec.height, width: spec.width, crop_scale: 1.0 }
    }

    /// Build a balanced synthetic dataset in memory. Labels cycle through
    /// the classes; the privacy attribute is the one-hot shape color.
    pub fn synthetic(spec: &SyntheticSpec, counts: &SyntheticCounts) -> Result<Self> {
        spec.validate()?;
        let make = |n: usize, offset: u64| -> Result<Vec<Sample>> {
            (0..n)
                .map(|i| {
                    let c = generate_clip(spec, i % spec.classes, offset + i as u64)?;
                    Ok(Sample { source: c.video, label: c.label, attrs: one_hot(c.color, PALETTE.len()) })
                })
                .collect()
        };
        let covers = |n: usize, offset: u64| -> Vec<Tensor> {
            (0..n).map(|i| generate_cover(spec.frames, spec.height, spec.width, spec.seed, offset + i as u64)).collect()
        };
        Ok(Self {
            clip: Self::synthetic_clip_spec(spec),
            num_classes: spec.classes,
            num_attrs: PALETTE.len(),
            train: make(counts.train, 0)?,
            val: make(counts.val, EVAL_OFFSET)?,
            test: Vec::new(),
            train_covers: covers(counts.train_covers, 0),
            eval_covers: covers(counts.eval_covers, EVAL_OFFSET),
        })
    }

    /// Load every video listed in a manifest. Covers from the val and test
    /// splits form the evaluation pool.
    pub fn from_manifest(path: &Path, clip: ClipSpec) -> Result<Self> {
        clip.validate()?;
        let m = Manifest::read(path)?;
        let mut ds = Self {
            clip,
            num_classes: 0,
            num_attrs: 0,
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
            train_covers: Vec::new(),
            eval_covers: Vec::new(),
        };
        let mut attr_len: Option<usize> = None;
        for r in &m.records {
            let video = load_video(&m.resolve(r))?;
            match r.role {
                Role::Cover if r.split == Split::Train => ds.train_covers.push(video),
                Role::Cover => ds.eval_covers.push(video),
                Role::Secret => {
                    let attrs = r.attrs.clone().unwrap_or_default();
                    match attr_len {
                        None => attr_len = Some(attrs.len()),
                        Some(n) if n != attrs.len() => {
                            return Err(Error::data(m.resolve(r), format!("expected {n} attributes, found {}", attrs.len())));
                        }
                        _ => {}
                    }
                    ds.num_classes = ds.num_classes.max(r.label + 1);
                    let s = Sample { source: video, label: r.label, attrs };
                    match r.split {
                        Split::Train => ds.train.push(s),
                        Split::Val => ds.val.push(s),
                        Split::Test => ds.test.push(s),
                    }
                }
            }
        }
        ds.num_attrs = attr_len.unwrap_or(0);
        Ok(ds)
    }

    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn covers(&self, split: Split) -> &[Tensor] {
        match split {
            Split::Train => &self.train_covers,
            _ => &self.eval_covers,
        }
    }

    /// Cut one clip from a source video according to `self.clip`.
    pub fn clip_of(&self, source: &Tensor, rng: &mut impl Rng) -> Result<Tensor> {
        sample_clip(source, &self.clip, rng)
    }

    pub fn require(&self, split: Split) -> Result<&[Sample]> {
        let s = self.split(split);
        if s.is_empty() {
            return Err(config_err!("the {split} split is empty"));
        }
        if self.covers(split).is_empty() {
            return Err(config_err!("no cover videos for the {split} split"));
        }
        Ok(s)
    }
}

/// Write a synthetic dataset as tensor containers plus `manifest.jsonl`.
pub fn write_synthetic(dir: &Path, spec: &SyntheticSpec, counts: &SyntheticCounts) -> Result<Manifest> {
    let ds = Dataset::synthetic(spec, counts)?;
    for sub in ["secret", "cover"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| Error::data(dir.join(sub), e))?;
    }
    let mut records = Vec::new();
    let mut put = |rel: String, t: &Tensor, label: usize, split: Split, role: Role, attrs: Option<Vec<u8>>| -> Result<()> {
        t.save(dir.join(&rel), Dtype::F32)?;
        records.push(Record { path: rel.into(), label, split, role, attrs });
        Ok(())
    };
    for (split, samples) in [(Split::Train, &ds.train), (Split::Val, &ds.val)] {
        for (i, s) in samples.iter().enumerate() {
            put(format!("secret/{split}_{i:05}.vtns"), &s.source, s.label, split, Role::Secret, Some(s.attrs.clone()))?;
        }
    }
    for (i, c) in ds.train_covers.iter().enumerate() {
        put(format!("cover/train_{i:05}.vtns"), c, 0, Split::Train, Role::Cover, None)?;
    }
    for (i, c) in ds.eval_covers.iter().enumerate() {
        put(format!("cover/val_{i:05}.vtns"), c, 0, Split::Val, Role::Cover, None)?;
    }
    let m = Manifest { root: dir.to_path_buf(), records };
    m.write(&dir.join("manifest.jsonl"))?;
    let meta = serde_json::json!({ "synthetic": spec, "counts": counts, "clip": Dataset::synthetic_clip_spec(spec) });
    fs::write(dir.join("dataset.json"), serde_json::to_string_pretty(&meta).expect("plain json") + "\n")?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (SyntheticSpec, SyntheticCounts) {
        (
            SyntheticSpec { frames: 4, height: 8, width: 8, ..Default::default() },
            SyntheticCounts { train: 8, val: 4, train_covers: 3, eval_covers: 2 },
        )
    }

    #[test]
    fn synthetic_is_balanced_and_clips_pass_through() {
        let (spec, counts) = small();
        let ds = Dataset::synthetic(&spec, &counts).unwrap();
        for c in 0..4 {
            assert_eq!(ds.train.iter().filter(|s| s.label == c).count(), 2);
        }
        let mut rng = crate::rng::stream_rng(0, 0, 0);
        let clip = ds.clip_of(&ds.train[3].source, &mut rng).unwrap();
        assert_eq!(clip, ds.train[3].source);
        assert!(ds.train.iter().all(|s| s.attrs.iter().map(|&a| a as usize).sum::<usize>() == 1));
    }

    #[test]
    fn written_dataset_reloads_identically() {
        let (spec, counts) = small();
        let dir = tempfile::tempdir().unwrap();
        write_synthetic(dir.path(), &spec, &counts).unwrap();
        let back = Dataset::from_manifest(&dir.path().join("manifest.jsonl"), Dataset::synthetic_clip_spec(&spec)).unwrap();
        let orig = Dataset::synthetic(&spec, &counts).unwrap();
        assert_eq!(back.train.len(), 8);
        assert_eq!(back.eval_covers.len(), 2);
        assert_eq!(back.num_classes, 4);
        assert_eq!(back.num_attrs, 4);
        // f32 storage
        assert!(back.val[1].source.max_abs_diff(&orig.val[1].source) < 1e-6);
        assert_eq!(back.val[1].attrs, orig.val[1].attrs);
    }

    #[test]
    fn empty_split_is_a_config_error() {
        let (spec, mut counts) = small();
        counts.val = 0;
        let ds = Dataset::synthetic(&spec, &counts).unwrap();
        assert!(matches!(ds.require(Split::Val), Err(Error::Config(_))));
        assert!(ds.require(Split::Train).is_ok());
    }
}
