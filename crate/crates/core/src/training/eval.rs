//! Top-1 evaluation on stego clips. Nothing here can reach the secret: the
//! classifier interface only ever sees the stego batch.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mode};
use crate::data::{Dataset, Split};
use crate::error::{config_err, dim_err, Error, Result};
use crate::network::Network;
use crate::rng::stream_rng;
use crate::stego::Hider;
use crate::tensor::Tensor;

const STREAM_EVAL: u64 = 21;
const EVAL_BATCH: usize = 8;

/// How evaluation clips get their covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    /// A seeded random cover per sample.
    Random,
    /// One cover, by index into the evaluation pool, for every sample.
    FixedCover(usize),
}

impl fmt::Display for Pairing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Pairing::Random => f.write_str("random"),
            Pairing::FixedCover(i) => write!(f, "fixed_cover:{i}"),
        }
    }
}

impl FromStr for Pairing {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Pairing::Random),
            "fixed_cover" => Ok(Pairing::FixedCover(0)),
            _ => s
                .strip_prefix("fixed_cover:")
                .and_then(|i| i.parse().ok())
                .map(Pairing::FixedCover)
                .ok_or_else(|| config_err!("unknown pairing '{s}' (expected random, fixed_cover or fixed_cover:N)")),
        }
    }
}

/// Anything that maps a stego batch `(N, T, H, W, C)` to per-clip logits.
pub trait ClipClassifier {
    fn logits(&self, stego: &Tensor) -> Result<Vec<Vec<f64>>>;
}

impl ClipClassifier for Network {
    fn logits(&self, stego: &Tensor) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new(Mode::Eval);
        let out = self.forward(&mut g, stego, None)?;
        let l = g.value(out.logits);
        Ok(l.data().chunks_exact(l.shape()[1]).map(<[f64]>::to_vec).collect())
    }
}

/// Index of the first maximum.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub pairing: Pairing,
    pub top1: f64,
    pub correct: usize,
    pub total: usize,
    pub predictions: Vec<usize>,
    pub labels: Vec<usize>,
}

/// Top-1 of `model` on `split`, with covers chosen by `pairing` from the
/// split's cover pool. Deterministic in `seed`.
pub fn evaluate(
    model: &dyn ClipClassifier,
    hider: &dyn Hider,
    ds: &Dataset,
    split: Split,
    pairing: Pairing,
    seed: u64,
) -> Result<EvalReport> {
    let samples = ds.require(split)?;
    let covers = ds.covers(split);
    if let Pairing::FixedCover(i) = pairing {
        if i >= covers.len() {
            return Err(config_err!("fixed cover {i} is out of range for {} {split} covers", covers.len()));
        }
    }
    let mut predictions = Vec::with_capacity(samples.len());
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    for (chunk_no, chunk) in samples.chunks(EVAL_BATCH).enumerate() {
        let mut stegos = Vec::with_capacity(chunk.len());
        for (j, sample) in chunk.iter().enumerate() {
            let idx = (chunk_no * EVAL_BATCH + j) as u64;
            let mut rng = stream_rng(seed, STREAM_EVAL, idx);
            let secret = ds.clip_of(&sample.source, &mut rng)?;
            let ci = match pairing {
                Pairing::Random => rng.gen_range(0..covers.len()),
                Pairing::FixedCover(i) => i,
            };
            let cover = ds.clip_of(&covers[ci], &mut rng)?;
            stegos.push(hider.embed(&cover, &secret)?.stego);
        }
        let batch = Tensor::stack(&stegos.iter().collect::<Vec<_>>())?;
        let logits = model.logits(&batch)?;
        if logits.len() != chunk.len() {
            return Err(dim_err!("classifier returned {} rows for {} clips", logits.len(), chunk.len()));
        }
        predictions.extend(logits.iter().map(|r| argmax(r)));
    }
    let correct = predictions.iter().zip(&labels).filter(|(p, l)| p == l).count();
    Ok(EvalReport {
        split,
        pairing,
        top1: correct as f64 / samples.len() as f64,
        correct,
        total: samples.len(),
        predictions,
        labels,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub top1: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (n - 1).
    pub std: f64,
}

/// Repeat fixed-cover evaluation with covers `0..trials` of the pool.
pub fn fixed_cover_trials(
    model: &dyn ClipClassifier,
    hider: &dyn Hider,
    ds: &Dataset,
    split: Split,
    trials: usize,
    seed: u64,
) -> Result<TrialSummary> {
    let n = ds.covers(split).len();
    if trials == 0 || trials > n {
        return Err(config_err!("{trials} fixed-cover trials need as many covers; the {split} pool has {n}"));
    }
    let top1 = (0..trials)
        .map(|i| evaluate(model, hider, ds, split, Pairing::FixedCover(i), seed).map(|r| r.top1))
        .collect::<Result<Vec<_>>>()?;
    let mean = top1.iter().sum::<f64>() / trials as f64;
    let var = if trials > 1 { top1.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (trials - 1) as f64 } else { 0.0 };
    Ok(TrialSummary { top1, mean, std: var.sqrt() })
}
