//! Secret-guided auxiliary supervision: wavelet targets built from the secret
//! clip, pointwise projections of branch features, and the spatial/temporal
//! matching losses.
//!
//! Level `n` (1-based) targets come from the `n`-th multilevel decomposition
//! of the secret's LL band, so their spatial size is `H / 2^(n+1)`, which is
//! exactly the stage-`n` feature size of a branch fed a half-resolution band.

use std::cell::Cell;

use rand::Rng;

use crate::autograd::{Graph, Mode, Var};
use crate::error::{dim_err, Result};
use crate::nn::{batch_norm, conv3d, ParamStore};
use crate::tensor::Tensor;
use crate::wavelet::{dwt_spatial, dwt_temporal, multilevel_dwt, Band};

thread_local! {
    static TARGETS_BUILT: Cell<u64> = const { Cell::new(0) };
}

/// Number of target sets built on this thread so far.
pub fn targets_built() -> u64 {
    TARGETS_BUILT.with(|c| c.get())
}

/// Targets for one clip, indexed `[level - 1][high band index]` with the high
/// bands in LH, HL, HH order.
#[derive(Clone, Debug, PartialEq)]
pub struct PromotionTargets {
    pub spatial: Vec<[Tensor; 3]>,
    pub temporal: Vec<[Tensor; 3]>,
}

impl PromotionTargets {
    pub fn levels(&self) -> usize {
        self.spatial.len()
    }

    pub fn spatial(&self, level: usize, band: Band) -> &Tensor {
        &self.spatial[level - 1][band.index() - 1]
    }

    pub fn temporal(&self, level: usize, band: Band) -> &Tensor {
        &self.temporal[level - 1][band.index() - 1]
    }

    /// Stack per-clip targets into batch tensors `(N, ...)`.
    pub fn stack(items: &[PromotionTargets]) -> Result<PromotionTargets> {
        let first = items.first().ok_or_else(|| dim_err!("cannot stack an empty target list"))?;
        let stack_field = |get: &dyn Fn(&PromotionTargets, usize, usize) -> &Tensor| -> Result<Vec<[Tensor; 3]>> {
            (0..first.levels())
                .map(|n| {
                    let band = |b: usize| Tensor::stack(&items.iter().map(|t| get(t, n, b)).collect::<Vec<_>>());
                    Ok([band(0)?, band(1)?, band(2)?])
                })
                .collect()
        };
        Ok(PromotionTargets {
            spatial: stack_field(&|t, n, b| &t.spatial[n][b])?,
            temporal: stack_field(&|t, n, b| &t.temporal[n][b])?,
        })
    }
}

/// Non-overlapping max over windows of `factor` frames along axis 0. In
/// magnitude mode values are made absolute first; otherwise the entry with
/// the largest magnitude wins and keeps its sign.
fn pool_time(x: &Tensor, factor: usize, magnitude: bool) -> Result<Tensor> {
    let s = x.shape();
    if factor == 0 || !s[0].is_multiple_of(factor) {
        return Err(dim_err!("time length {} is not divisible by pooling factor {}", s[0], factor));
    }
    let frame: usize = s[1..].iter().product();
    let out_t = s[0] / factor;
    let mut out = vec![0.0f64; out_t * frame];
    for t in 0..out_t {
        let dst = &mut out[t * frame..(t + 1) * frame];
        for k in 0..factor {
            let src = &x.data()[(t * factor + k) * frame..(t * factor + k + 1) * frame];
            for (d, &v) in dst.iter_mut().zip(src) {
                let v = if magnitude { v.abs() } else { v };
                if k == 0 || v.abs() > d.abs() {
                    *d = v;
                }
            }
        }
    }
    let mut shape = s.to_vec();
    shape[0] = out_t;
    Tensor::new(&shape, out)
}

/// Build the per-level targets of one secret clip `(T, H, W, 3)`.
/// `temporal_lengths[n-1]` is the stage-`n` time length `T_n`.
pub fn build_targets(secret: &Tensor, levels: usize, temporal_lengths: &[usize], magnitude: bool) -> Result<PromotionTargets> {
    let s = secret.shape();
    if s.len() != 4 {
        return Err(dim_err!("secret must be (T, H, W, C), got {:?}", s));
    }
    if temporal_lengths.len() != levels {
        return Err(dim_err!("{} temporal lengths given for {} levels", temporal_lengths.len(), levels));
    }
    let div = 1usize << (levels + 1);
    for (axis, len) in [("height", s[1]), ("width", s[2])] {
        if len % div != 0 {
            return Err(dim_err!("level {levels}: secret {axis} {len} is not divisible by {div}"));
        }
    }
    let t = s[0];
    for (i, &tn) in temporal_lengths.iter().enumerate() {
        if tn == 0 || !t.is_multiple_of(tn) || tn % 2 != 0 {
            return Err(dim_err!(
                "level {}: time length {} must be even and divide the secret length {}",
                i + 1,
                tn,
                t
            ));
        }
    }
    let ll0 = dwt_spatial(secret)?.ll;
    let pyramid = multilevel_dwt(&ll0, levels)?;
    let mut spatial = Vec::with_capacity(levels);
    let mut temporal = Vec::with_capacity(levels);
    for (set, &tn) in pyramid.iter().zip(temporal_lengths) {
        let factor = t / tn;
        let mut sp = Vec::with_capacity(3);
        let mut tp = Vec::with_capacity(3);
        for b in Band::HIGH {
            let h = set.band(b);
            sp.push(pool_time(h, factor, magnitude)?);
            tp.push(pool_time(&dwt_temporal(h)?.high, factor, magnitude)?);
        }
        spatial.push(sp.try_into().expect("three high bands"));
        temporal.push(tp.try_into().expect("three high bands"));
    }
    TARGETS_BUILT.with(|c| c.set(c.get() + 1));
    Ok(PromotionTargets { spatial, temporal })
}

fn dwc_name(level: usize, band: Band) -> String {
    format!("promo.l{level}.{band}")
}

/// Register projection parameters for every (level, high band) pair.
pub fn init_projections(store: &mut ParamStore, stage_channels: &[usize], out_channels: usize, rng: &mut impl Rng) {
    for (i, &c) in stage_channels.iter().enumerate() {
        for b in Band::HIGH {
            let name = dwc_name(i + 1, b);
            store.add_conv3d(&format!("{name}.conv"), [1, 1, 1], c, out_channels, rng);
            store.add_batch_norm(&format!("{name}.bn"), out_channels);
        }
    }
}

/// Pointwise projection of stage features `(N, T, H, W, C)` to the target
/// channel count, then normalization and (optionally) ReLU.
pub fn dwc_forward(g: &mut Graph, store: &ParamStore, level: usize, band: Band, z: Var, activate: bool) -> Result<Var> {
    let name = dwc_name(level, band);
    let w = store
        .get(&format!("{name}.conv.weight"))
        .ok_or_else(|| dim_err!("no projection for level {level} band {band}"))?;
    let cin = w.shape()[3];
    let zc = *g.shape(z).last().unwrap_or(&0);
    if zc != cin {
        return Err(dim_err!("projection ({level}, {band}) expects {cin} channels, got {zc}"));
    }
    let y = conv3d(g, store, &format!("{name}.conv"), z, [1, 1, 1], [0, 0, 0])?;
    let y = batch_norm(g, store, &format!("{name}.bn"), y)?;
    Ok(if activate { g.relu(y) } else { y })
}

/// Projections indexed `[level - 1][high band index]`, batch-shaped.
pub type Projections = Vec<[Var; 3]>;

#[derive(Clone, Copy, Debug)]
pub struct PromotionLoss {
    pub spatial: Var,
    pub temporal: Var,
    pub total: Var,
}

/// `alpha * sum MSE(spatial) + beta * sum MSE(temporal)` over levels and high
/// bands. Targets must be batch-stacked to match the projections.
pub fn promotion_loss(g: &mut Graph, targets: &PromotionTargets, proj: &Projections, alpha: f64, beta: f64) -> Result<PromotionLoss> {
    if proj.is_empty() || proj.len() != targets.levels() {
        return Err(dim_err!("{} projection levels for {} target levels", proj.len(), targets.levels()));
    }
    let mut spatial = Vec::new();
    let mut temporal = Vec::new();
    for (n, level) in proj.iter().enumerate() {
        for (bi, &m) in level.iter().enumerate() {
            let band = Band::HIGH[bi];
            let gs = &targets.spatial[n][bi];
            let gt = &targets.temporal[n][bi];
            if g.shape(m) != gs.shape() {
                return Err(dim_err!(
                    "level {} band {}: projection {:?} vs target {:?}",
                    n + 1,
                    band,
                    g.shape(m),
                    gs.shape()
                ));
            }
            let gs = g.constant(gs.clone());
            spatial.push(g.mse(m, gs)?);
            // Time is axis 1 of a batch.
            let mt = g.haar_temporal_high(m, 1)?;
            if g.shape(mt) != gt.shape() {
                return Err(dim_err!(
                    "level {} band {}: temporal projection {:?} vs target {:?}",
                    n + 1,
                    band,
                    g.shape(mt),
                    gt.shape()
                ));
            }
            let gt = g.constant(gt.clone());
            temporal.push(g.mse(mt, gt)?);
        }
    }
    let sum = |g: &mut Graph, xs: &[Var]| -> Result<Var> {
        let mut acc = xs[0];
        for &x in &xs[1..] {
            acc = g.add(acc, x)?;
        }
        Ok(acc)
    };
    let spatial = sum(g, &spatial)?;
    let temporal = sum(g, &temporal)?;
    let a = g.scale(spatial, alpha);
    let b = g.scale(temporal, beta);
    let total = g.add(a, b)?;
    Ok(PromotionLoss { spatial, temporal, total })
}

/// Loss values `(spatial, temporal, total)` for projection tensors given
/// directly, batch-shaped like the targets.
pub fn promotion_loss_values(targets: &PromotionTargets, projections: &[[Tensor; 3]], alpha: f64, beta: f64) -> Result<(f64, f64, f64)> {
    let mut g = Graph::new(Mode::Eval);
    let proj: Projections = projections
        .iter()
        .map(|lv| [g.constant(lv[0].clone()), g.constant(lv[1].clone()), g.constant(lv[2].clone())])
        .collect();
    let l = promotion_loss(&mut g, targets, &proj, alpha, beta)?;
    Ok((g.value(l.spatial).item(), g.value(l.temporal).item(), g.value(l.total).item()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck::{central_difference, relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(0.0..1.0))
    }

    fn batch(t: &PromotionTargets) -> PromotionTargets {
        PromotionTargets::stack(std::slice::from_ref(t)).unwrap()
    }

    #[test]
    fn static_secret_has_zero_temporal_targets() {
        let frame = random(&[1, 32, 32, 3], 1);
        let parts: Vec<&Tensor> = (0..16).map(|_| &frame).collect();
        let secret = Tensor::concat(&parts, 0).unwrap();
        let t = build_targets(&secret, 4, &[16, 8, 4, 2], true).unwrap();
        for lv in &t.temporal {
            for band in lv {
                assert!(band.data().iter().all(|&v| v == 0.0));
            }
        }
        assert!(t.spatial[0][0].max_abs() > 0.0);
    }

    #[test]
    fn constant_secret_has_zero_spatial_targets() {
        let t = build_targets(&Tensor::full(&[16, 32, 32, 3], 0.4), 4, &[16, 8, 4, 2], true).unwrap();
        for lv in &t.spatial {
            for band in lv {
                assert!(band.max_abs() < 1e-12);
            }
        }
    }

    #[test]
    fn paper_scale_target_shapes() {
        // Only the top levels matter for the shape law; a thin 224x224 clip keeps this cheap.
        let secret = Tensor::zeros(&[16, 224, 224, 3]);
        let t = build_targets(&secret, 4, &[16, 8, 4, 2], true).unwrap();
        assert_eq!(t.spatial(1, Band::LH).shape(), &[16, 56, 56, 3]);
        assert_eq!(t.temporal(4, Band::HH).shape(), &[1, 7, 7, 3]);
    }

    #[test]
    fn magnitude_targets_are_non_negative() {
        let t = build_targets(&random(&[8, 32, 32, 3], 2), 4, &[8, 4, 2, 2], true).unwrap();
        assert!(t.spatial.iter().flatten().all(|x| x.data().iter().all(|&v| v >= 0.0)));
        assert!(t.temporal.iter().flatten().all(|x| x.data().iter().all(|&v| v >= 0.0)));
    }

    #[test]
    fn divisibility_errors_name_level_and_axis() {
        let e = build_targets(&Tensor::zeros(&[16, 48, 32, 3]), 4, &[16, 8, 4, 2], true).unwrap_err();
        assert!(e.to_string().contains("level 4") && e.to_string().contains("height"), "{e}");
        let e = build_targets(&Tensor::zeros(&[16, 32, 32, 3]), 4, &[16, 8, 4, 3], true).unwrap_err();
        assert!(e.to_string().contains("level 4"), "{e}");
    }

    #[test]
    fn pooling_takes_window_max() {
        let x = Tensor::new(&[4, 1], vec![-3.0, 1.0, 0.5, 2.0]).unwrap();
        assert_eq!(pool_time(&x, 2, true).unwrap().data(), &[3.0, 2.0]);
        assert_eq!(pool_time(&x, 2, false).unwrap().data(), &[-3.0, 2.0]);
    }

    #[test]
    fn matching_projections_give_zero_loss() {
        let t = batch(&build_targets(&random(&[16, 32, 32, 3], 3), 4, &[16, 8, 4, 2], true).unwrap());
        // Temporal targets of the projections must agree too, so use a static secret.
        let (s, _, _) = promotion_loss_values(&t, &t.spatial, 0.2, 0.3).unwrap();
        assert_eq!(s, 0.0);
        let frame = random(&[1, 32, 32, 3], 4);
        let secret = Tensor::concat(&(0..16).map(|_| &frame).collect::<Vec<_>>(), 0).unwrap();
        let t = batch(&build_targets(&secret, 4, &[16, 8, 4, 2], true).unwrap());
        assert_eq!(promotion_loss_values(&t, &t.spatial, 0.2, 0.3).unwrap(), (0.0, 0.0, 0.0));
    }

    #[test]
    fn coefficients_weight_the_components() {
        let t = batch(&build_targets(&random(&[16, 32, 32, 3], 5), 4, &[16, 8, 4, 2], true).unwrap());
        let proj: Vec<[Tensor; 3]> = t
            .spatial
            .iter()
            .enumerate()
            .map(|(i, lv)| {
                let f = |j: u64| random(lv[0].shape(), 100 + i as u64 * 3 + j);
                [f(0), f(1), f(2)]
            })
            .collect();
        let (s, tm, total) = promotion_loss_values(&t, &proj, 0.2, 0.3).unwrap();
        assert!(s > 0.0 && tm > 0.0);
        assert!((total - (0.2 * s + 0.3 * tm)).abs() < 1e-12);
        assert_eq!(promotion_loss_values(&t, &proj, 0.0, 0.0).unwrap().2, 0.0);
    }

    #[test]
    fn levels_contribute_independently() {
        let t = batch(&build_targets(&random(&[16, 32, 32, 3], 6), 4, &[16, 8, 4, 2], true).unwrap());
        let proj: Vec<[Tensor; 3]> = t
            .spatial
            .iter()
            .map(|lv| [lv[0].map(|v| v + 0.1), lv[1].map(|v| v * 0.5), lv[2].map(|v| v - 0.2)])
            .collect();
        let full = promotion_loss_values(&t, &proj, 1.0, 1.0).unwrap().2;
        let single = |k: usize| {
            let tk = PromotionTargets { spatial: vec![t.spatial[k].clone()], temporal: vec![t.temporal[k].clone()] };
            promotion_loss_values(&tk, &proj[k..k + 1], 1.0, 1.0).unwrap().2
        };
        let sum: f64 = (0..4).map(single).sum();
        assert!((full - sum).abs() < 1e-12);
        let mut zt = t.clone();
        let mut zp = proj.clone();
        for b in 0..3 {
            zt.spatial[2][b] = Tensor::zeros(zt.spatial[2][b].shape());
            zt.temporal[2][b] = Tensor::zeros(zt.temporal[2][b].shape());
            zp[2][b] = Tensor::zeros(zp[2][b].shape());
        }
        let dropped = promotion_loss_values(&zt, &zp, 1.0, 1.0).unwrap().2;
        assert!((full - single(2) - dropped).abs() < 1e-12);
    }

    #[test]
    fn identity_projection_normalizes_input() {
        let mut store = ParamStore::new();
        init_projections(&mut store, &[3], 3, &mut ChaCha8Rng::seed_from_u64(0));
        let eye = Tensor::from_fn(&[1, 1, 1, 3, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        store.set("promo.l1.LH.conv.weight", eye).unwrap();
        let x = random(&[2, 4, 2, 2, 3], 7).map(|v| v - 0.5);
        let mut g = Graph::new(Mode::Train);
        let xv = g.constant(x.clone());
        let y = dwc_forward(&mut g, &store, 1, Band::LH, xv, true).unwrap();
        let gamma = g.constant(Tensor::ones(&[3]));
        let beta = g.constant(Tensor::zeros(&[3]));
        let (n, _, _) = g.batch_norm_train(xv, gamma, beta, crate::nn::BN_EPS).unwrap();
        let r = g.relu(n);
        assert!(g.value(y).max_abs_diff(g.value(r)) < 1e-12);
        assert!(g.value(y).data().iter().all(|&v| v >= 0.0));

        let mut g = Graph::new(Mode::Eval);
        let z = g.constant(Tensor::zeros(&[1, 2, 2, 2, 3]));
        let y = dwc_forward(&mut g, &store, 1, Band::LH, z, true).unwrap();
        assert!(g.value(y).all_finite());
        let bad = g.constant(Tensor::zeros(&[1, 2, 2, 2, 4]));
        assert!(matches!(dwc_forward(&mut g, &store, 1, Band::LH, bad, true), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn projection_weight_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        init_projections(&mut store, &[4], 3, &mut rng);
        let z = random(&[2, 4, 4, 4, 4], 9);
        let target = random(&[2, 4, 4, 4, 3], 10);
        let name = "promo.l1.HL.conv.weight";
        let loss_of = |store: &ParamStore| {
            let mut g = Graph::new(Mode::Train);
            let zv = g.constant(z.clone());
            let m = dwc_forward(&mut g, store, 1, Band::HL, zv, true).unwrap();
            let t = g.constant(target.clone());
            let l = g.mse(m, t).unwrap();
            (g, l)
        };
        let (g, l) = loss_of(&store);
        let analytic = g.backward(l).unwrap().into_param_grads().remove(name).unwrap();
        let w0 = store.get(name).unwrap().clone();
        let numeric = central_difference(&w0, 1e-4, |w| {
            let mut s = store.clone();
            s.set(name, w.clone()).unwrap();
            let (g, l) = loss_of(&s);
            g.value(l).item()
        });
        assert!(relative_error(&analytic, &numeric) < 1e-3);
    }
}
