//! Top-1, multi-label ranking metrics and a small frame-level attacker that
//! measures how much of a private attribute survives embedding.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mode, Var};
use crate::data::{Dataset, Split};
use crate::error::{config_err, dim_err, Result};
use crate::nn::{batch_norm, clip_global_norm, conv3d, linear, Adam, ParamStore};
use crate::rng::stream_rng;
use crate::stego::Hider;
use crate::tensor::Tensor;
use crate::training::argmax;

pub fn top1(logits: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if logits.len() != labels.len() || logits.is_empty() {
        return Err(dim_err!("{} logit rows for {} labels", logits.len(), labels.len()));
    }
    let hits = logits.iter().zip(labels).filter(|(r, &y)| argmax(r) == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Per-sample attribute scores with binary targets, both `(samples, attrs)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiLabelScores {
    scores: Vec<Vec<f64>>,
    targets: Vec<Vec<u8>>,
    attrs: usize,
}

impl MultiLabelScores {
    pub fn new(scores: Vec<Vec<f64>>, targets: Vec<Vec<u8>>) -> Result<Self> {
        if scores.len() != targets.len() || scores.is_empty() {
            return Err(dim_err!("{} score rows vs {} target rows", scores.len(), targets.len()));
        }
        let attrs = scores[0].len();
        for (s, t) in scores.iter().zip(&targets) {
            if s.len() != attrs || t.len() != attrs {
                return Err(dim_err!("ragged rows: expected {attrs} attributes"));
            }
            if t.iter().any(|&v| v > 1) {
                return Err(config_err!("targets must be 0 or 1"));
            }
            if s.iter().any(|v| !v.is_finite()) {
                return Err(config_err!("scores must be finite"));
            }
        }
        Ok(Self { scores, targets, attrs })
    }

    pub fn samples(&self) -> usize {
        self.scores.len()
    }

    pub fn attrs(&self) -> usize {
        self.attrs
    }

    fn column(&self, a: usize) -> (Vec<f64>, Vec<u8>) {
        (self.scores.iter().map(|r| r[a]).collect(), self.targets.iter().map(|r| r[a]).collect())
    }
}

/// Average precision of one ranking: precision at each positive's rank,
/// averaged. Ranks sort by descending score, ties by ascending index.
/// `None` when there are no positives.
pub fn average_precision(scores: &[f64], targets: &[u8]) -> Option<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut hits, mut sum) = (0usize, 0.0);
    for (rank, &i) in order.iter().enumerate() {
        if targets[i] == 1 {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// F1 of `score >= threshold` predictions; 0 when precision + recall is 0.
pub fn f1_score(scores: &[f64], targets: &[u8], threshold: f64) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
    for (&s, &t) in scores.iter().zip(targets) {
        match (s >= threshold, t == 1) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fn_ += 1.0,
            _ => {}
        }
    }
    if tp == 0.0 {
        return 0.0;
    }
    // Harmonic mean of precision and recall, in closed form over the counts.
    2.0 * tp / (2.0 * tp + fp + fn_)
}

/// Attributes with at least one positive; the rest are reported, or
/// rejected when `strict`.
fn usable_attrs(s: &MultiLabelScores, strict: bool) -> Result<Vec<usize>> {
    let mut keep = Vec::new();
    for a in 0..s.attrs {
        if s.targets.iter().any(|r| r[a] == 1) {
            keep.push(a);
        } else if strict {
            return Err(config_err!("attribute {a} has no positive samples"));
        } else {
            log::warn!("attribute {a} has no positive samples; excluded");
        }
    }
    if keep.is_empty() {
        return Err(config_err!("no attribute has a positive sample"));
    }
    Ok(keep)
}

/// Mean over attributes of [`average_precision`].
pub fn classwise_map(s: &MultiLabelScores, strict: bool) -> Result<f64> {
    let keep = usable_attrs(s, strict)?;
    let total: f64 = keep
        .iter()
        .map(|&a| {
            let (sc, t) = s.column(a);
            average_precision(&sc, &t).expect("has positives")
        })
        .sum();
    Ok(total / keep.len() as f64)
}

/// Macro-averaged F1 over attributes with at least one positive.
pub fn classwise_f1(s: &MultiLabelScores, threshold: f64) -> Result<f64> {
    let keep = usable_attrs(s, false)?;
    let total: f64 = keep
        .iter()
        .map(|&a| {
            let (sc, t) = s.column(a);
            f1_score(&sc, &t, threshold)
        })
        .sum();
    Ok(total / keep.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackerConfig {
    pub width: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Fraction of frames held out for scoring.
    pub holdout: f64,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for AttackerConfig {
    fn default() -> Self {
        Self { width: 8, epochs: 30, lr: 3e-3, batch_size: 16, holdout: 1.0 / 3.0, threshold: 0.5, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub cmap: f64,
    pub f1: f64,
    pub train_frames: usize,
    pub test_frames: usize,
}

/// Three stride-2 conv blocks over single frames, global mean, linear head.
struct Attacker {
    params: ParamStore,
}

impl Attacker {
    fn new(width: usize, attrs: usize, rng: &mut impl Rng) -> Self {
        let mut params = ParamStore::new();
        let mut cin = 3;
        for i in 0..3 {
            let cout = width << i;
            params.add_conv3d(&format!("block{i}.conv"), [1, 3, 3], cin, cout, rng);
            params.add_batch_norm(&format!("block{i}.bn"), cout);
            cin = cout;
        }
        params.add_linear("head", cin, attrs, true, rng);
        Self { params }
    }

    /// `frames: (N, H, W, 3)` to `(N, attrs)` logits.
    fn forward(&self, g: &mut Graph, frames: &Tensor) -> Result<Var> {
        let s = frames.shape();
        let mut x = g.constant(frames.clone().reshape(&[s[0], 1, s[1], s[2], s[3]])?);
        for i in 0..3 {
            x = conv3d(g, &self.params, &format!("block{i}.conv"), x, [1, 2, 2], [0, 1, 1])?;
            x = batch_norm(g, &self.params, &format!("block{i}.bn"), x)?;
            x = g.relu(x);
        }
        for axis in [3, 2, 1] {
            x = g.mean_axis(x, axis)?;
        }
        linear(g, &self.params, "head", x)
    }
}

fn gather(frames: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let rows = idx.iter().map(|&i| frames.index0(i)).collect::<Result<Vec<_>>>()?;
    Tensor::stack(&rows.iter().collect::<Vec<_>>())
}

/// Train an attacker on part of `frames: (N, H, W, 3)` to predict `attrs`
/// and score it on the rest.
pub fn privacy_attack(frames: &Tensor, attrs: &[Vec<u8>], cfg: &AttackerConfig) -> Result<AttackReport> {
    let s = frames.shape();
    if s.len() != 4 || s[3] != 3 || s[0] != attrs.len() {
        return Err(dim_err!("attack needs (N, H, W, 3) frames with N attribute rows, got {:?} and {}", s, attrs.len()));
    }
    if !(cfg.holdout > 0.0 && cfg.holdout < 1.0) || cfg.batch_size == 0 || cfg.width == 0 {
        return Err(config_err!("attacker holdout must be in (0, 1) and sizes positive"));
    }
    let n_attr = attrs.first().map_or(0, Vec::len);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..s[0]).collect();
    order.shuffle(&mut rng);
    let n_test = ((s[0] as f64 * cfg.holdout).round() as usize).clamp(1, s[0] - 1);
    let (test_idx, train_idx) = order.split_at(n_test);

    let model_attrs = |idx: &[usize]| -> Result<Tensor> {
        Tensor::new(&[idx.len(), n_attr], idx.iter().flat_map(|&i| attrs[i].iter().map(|&v| f64::from(v))).collect())
    };
    let mut model = Attacker::new(cfg.width, n_attr, &mut rng);
    let mut adam = Adam::new(cfg.lr);
    let mut train_idx = train_idx.to_vec();
    for _ in 0..cfg.epochs {
        train_idx.shuffle(&mut rng);
        for batch in train_idx.chunks(cfg.batch_size) {
            if batch.len() < 2 {
                continue;
            }
            let mut g = Graph::new(Mode::Train);
            let logits = model.forward(&mut g, &gather(frames, batch)?)?;
            let loss = g.bce_with_logits(logits, &model_attrs(batch)?)?;
            let mut grads = g.backward(loss)?.into_param_grads();
            clip_global_norm(&mut grads, 5.0);
            adam.step(&mut model.params, &grads)?;
            model.params.apply_stat_updates(g.take_stat_updates())?;
        }
    }

    let mut g = Graph::new(Mode::Eval);
    let logits = model.forward(&mut g, &gather(frames, test_idx)?)?;
    let probs = g.value(logits).map(|z| 1.0 / (1.0 + (-z).exp()));
    let scores: Vec<Vec<f64>> = probs.data().chunks_exact(n_attr).map(<[f64]>::to_vec).collect();
    let targets: Vec<Vec<u8>> = test_idx.iter().map(|&i| attrs[i].clone()).collect();
    let ml = MultiLabelScores::new(scores, targets)?;
    Ok(AttackReport {
        cmap: classwise_map(&ml, false)?,
        f1: classwise_f1(&ml, cfg.threshold)?,
        train_frames: train_idx.len(),
        test_frames: n_test,
    })
}

/// What the attacker looks at.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackInput {
    /// The secret itself.
    Raw,
    /// The secret embedded in a random evaluation cover.
    Stego,
    /// The cover alone, with the secret's attributes as labels.
    Cover,
}

/// Middle frames of every clip in `split`, as seen through `input`, with the
/// clips' attributes.
pub fn attack_frames(
    ds: &Dataset,
    hider: &dyn Hider,
    split: Split,
    input: AttackInput,
    seed: u64,
) -> Result<(Tensor, Vec<Vec<u8>>)> {
    let samples = ds.require(split)?;
    let covers = ds.covers(split);
    let mut frames = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let mut rng = stream_rng(seed, 30, i as u64);
        let secret = ds.clip_of(&s.source, &mut rng)?;
        let cover = ds.clip_of(&covers[rng.gen_range(0..covers.len())], &mut rng)?;
        let clip = match input {
            AttackInput::Raw => secret,
            AttackInput::Stego => hider.embed(&cover, &secret)?.stego,
            AttackInput::Cover => cover,
        };
        frames.push(clip.index0(clip.shape()[0] / 2)?);
    }
    let attrs = samples.iter().map(|s| s.attrs.clone()).collect();
    Ok((Tensor::stack(&frames.iter().collect::<Vec<_>>())?, attrs))
}
