//! Optimization loop, run records, evaluation and ablation sweeps.

pub mod ablate;
pub mod eval;

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mode};
use crate::data::{augment, AugmentConfig, Dataset, Split};
use crate::error::{config_err, Error, Result};
use crate::network::Network;
use crate::nn::{clip_global_norm, Adam, ParamStore};
use crate::promotion::promotion_loss;
use crate::rng::stream_rng;
use crate::stego::Hider;
use crate::tensor::Tensor;

pub use ablate::{ablate, render_table, suite_variants, AblationRow, Suite, Variant};
pub use eval::{argmax, evaluate, fixed_cover_trials, ClipClassifier, EvalReport, Pairing, TrialSummary};

// RNG stream ids, one per consumer.
const STREAM_SHUFFLE: u64 = 10;
const STREAM_TRAIN_SAMPLE: u64 = 11;
const STREAM_VAL: u64 = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Weight of the spatial promotion loss.
    pub alpha: f64,
    /// Weight of the temporal promotion loss.
    pub beta: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Augmentation applied to secrets before embedding; `None` disables it.
    pub augment: Option<AugmentConfig>,
    pub grad_clip: f64,
    /// Pair secret `i` with cover `i mod covers` every epoch instead of
    /// re-drawing covers.
    pub fixed_pairing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            beta: 0.3,
            lr: 1e-4,
            batch_size: 8,
            epochs: 30,
            seed: 0,
            augment: Some(AugmentConfig::default()),
            grad_clip: 5.0,
            fixed_pairing: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(config_err!("alpha and beta must be >= 0, got {} and {}", self.alpha, self.beta));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(config_err!("learning rate must be finite and >= 0, got {}", self.lr));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(config_err!("batch size and epochs must be positive"));
        }
        if !(self.grad_clip > 0.0) {
            return Err(config_err!("gradient clip norm must be > 0, got {}", self.grad_clip));
        }
        Ok(())
    }

    fn uses_promotion(&self) -> bool {
        self.alpha > 0.0 || self.beta > 0.0
    }
}

/// One line of a run record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Running accuracy over the epoch's training batches.
    pub train_top1: f64,
    pub val_top1: f64,
    pub loss: f64,
    pub loss_cls: f64,
    pub loss_spatial: f64,
    pub loss_temporal: f64,
    pub wall_seconds: f64,
    pub fingerprint: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub epochs: Vec<EpochRecord>,
}

impl RunRecord {
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        for e in &self.epochs {
            writeln!(f, "{}", serde_json::to_string(e).expect("record serializes"))?;
        }
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::data(path, e))?;
        let epochs = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::data(path, format!("line {}: {e}", i + 1))))
            .collect::<Result<Vec<EpochRecord>>>()?;
        Ok(Self { epochs })
    }

    /// Epoch with the highest validation accuracy (earliest on ties).
    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.iter().fold(None, |best: Option<&EpochRecord>, e| match best {
            Some(b) if b.val_top1 >= e.val_top1 => Some(b),
            _ => Some(e),
        })
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

/// Loss values of a single optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub epoch: usize,
    pub batch: usize,
    pub loss: f64,
    pub cls: f64,
    pub spatial: f64,
    pub temporal: f64,
}

pub struct TrainOutcome {
    /// Parameters from the best validation epoch.
    pub best: Network,
    pub best_epoch: usize,
    pub record: RunRecord,
    pub steps: Vec<StepLog>,
}

/// Build one `(N, T, H, W, C)` training batch: sample and augment secrets,
/// draw covers, embed. Returns `(stego, secret, labels)`.
fn training_batch(
    ds: &Dataset,
    hider: &dyn Hider,
    cfg: &TrainConfig,
    epoch: usize,
    indices: &[usize],
) -> Result<(Tensor, Tensor, Vec<usize>)> {
    let covers = ds.covers(Split::Train);
    let mut stegos = Vec::with_capacity(indices.len());
    let mut secrets = Vec::with_capacity(indices.len());
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        let mut rng = stream_rng(cfg.seed, STREAM_TRAIN_SAMPLE, ((epoch as u64) << 32) | i as u64);
        let sample = &ds.train[i];
        let mut secret = ds.clip_of(&sample.source, &mut rng)?;
        if let Some(a) = &cfg.augment {
            secret = augment(&secret, a, &mut rng)?;
        }
        let ci = if cfg.fixed_pairing { i % covers.len() } else { rng.gen_range(0..covers.len()) };
        let cover = ds.clip_of(&covers[ci], &mut rng)?;
        stegos.push(hider.embed(&cover, &secret)?.stego);
        secrets.push(secret);
        labels.push(sample.label);
    }
    let stack = |v: &[Tensor]| Tensor::stack(&v.iter().collect::<Vec<_>>());
    Ok((stack(&stegos)?, stack(&secrets)?, labels))
}

/// Train `net` on stego clips made by the frozen `hider`.
/// `on_epoch` sees every finished epoch record.
pub fn train(
    mut net: Network,
    hider: &dyn Hider,
    ds: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    ds.require(Split::Train)?;
    ds.require(Split::Val)?;
    if net.cfg.num_classes < ds.num_classes {
        return Err(config_err!("network has {} classes, dataset has {}", net.cfg.num_classes, ds.num_classes));
    }
    let fingerprint = net.cfg.fingerprint();
    let mut adam = Adam::new(cfg.lr);
    let mut record = RunRecord::default();
    let mut steps = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let promote = cfg.uses_promotion();

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let mut order: Vec<usize> = (0..ds.train.len()).collect();
        order.shuffle(&mut stream_rng(cfg.seed, STREAM_SHUFFLE, epoch as u64));
        let (mut sums, mut correct) = ([0.0f64; 4], 0usize);
        let n_batches = order.len().div_ceil(cfg.batch_size);

        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let (stego, secret, labels) = training_batch(ds, hider, cfg, epoch, idx)?;
            let mut g = Graph::new(Mode::Train);
            let out = net.forward(&mut g, &stego, promote.then_some(&secret))?;
            let cls = g.cross_entropy(out.logits, &labels)?;
            let (loss, spatial, temporal) = match &out.promotion {
                Some((targets, proj)) => {
                    let p = promotion_loss(&mut g, targets, proj, cfg.alpha, cfg.beta)?;
                    (g.add(cls, p.total)?, g.value(p.spatial).item(), g.value(p.temporal).item())
                }
                None => (cls, 0.0, 0.0),
            };
            let l = g.value(loss).item();
            let diagnose = |what: &str| {
                Error::Numerical(format!("{what} at epoch {epoch} batch {b}; sample indices {idx:?}"))
            };
            if !l.is_finite() {
                return Err(diagnose(&format!("non-finite loss {l}")));
            }
            let logits = g.value(out.logits);
            let k = logits.shape()[1];
            correct += logits.data().chunks_exact(k).zip(&labels).filter(|(row, &y)| argmax(row) == y).count();

            let mut grads = g.backward(loss)?.into_param_grads();
            let norm = clip_global_norm(&mut grads, cfg.grad_clip);
            if !norm.is_finite() {
                return Err(diagnose(&format!("non-finite gradient norm {norm}")));
            }
            adam.step(&mut net.params, &grads)?;
            net.params.apply_stat_updates(g.take_stat_updates())?;

            let c = g.value(cls).item();
            for (s, v) in sums.iter_mut().zip([l, c, spatial, temporal]) {
                *s += v;
            }
            steps.push(StepLog { epoch, batch: b, loss: l, cls: c, spatial, temporal });
        }

        let val = evaluate(&net, hider, ds, Split::Val, Pairing::Random, stream_seed(cfg.seed))?;
        let nb = n_batches as f64;
        let rec = EpochRecord {
            epoch,
            train_top1: correct as f64 / order.len() as f64,
            val_top1: val.top1,
            loss: sums[0] / nb,
            loss_cls: sums[1] / nb,
            loss_spatial: sums[2] / nb,
            loss_temporal: sums[3] / nb,
            wall_seconds: start.elapsed().as_secs_f64(),
            fingerprint: fingerprint.clone(),
        };
        log::info!(
            "epoch {epoch}: loss {:.4} (cls {:.4}) train {:.3} val {:.3} in {:.1}s",
            rec.loss,
            rec.loss_cls,
            rec.train_top1,
            rec.val_top1,
            rec.wall_seconds
        );
        on_epoch(&rec);
        if best.as_ref().is_none_or(|(v, _, _)| rec.val_top1 > *v) {
            best = Some((rec.val_top1, epoch, net.params.clone()));
        }
        record.epochs.push(rec);
    }

    let (_, best_epoch, params) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best: Network { cfg: net.cfg, params },
        best_epoch,
        record,
        steps,
    })
}

/// Seed for validation cover pairing, fixed for the whole run so epochs
/// are compared on the same stego clips.
fn stream_seed(seed: u64) -> u64 {
    stream_rng(seed, STREAM_VAL, 0).gen()
}
