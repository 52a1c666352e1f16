//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when a gated criterion fails. Criterion 8 is reported only.
//!
//! Set `STEGACT_ACCEPT_QUICK=1` to skip the training-based criteria (7, 8,
//! 11); they print SKIP and the run still fails if anything else is red.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stegact::autograd::gradcheck::{central_difference, relative_error};
use stegact::autograd::{Graph, Mode};
use stegact::band_attention::{attend, cross_band_block, init_encodings, init_group_attention, DETAIL_ENCODING};
use stegact::data::synthetic::{generate_clip, generate_cover};
use stegact::data::{Dataset, Split, SyntheticCounts, SyntheticSpec};
use stegact::metrics::{
    attack_frames, average_precision, classwise_f1, classwise_map, privacy_attack, AttackInput, AttackerConfig,
    MultiLabelScores,
};
use stegact::network::{secret_forwards, Network, NetworkConfig};
use stegact::nn::{linear, ParamStore};
use stegact::promotion::{build_targets, dwc_forward, init_projections, promotion_loss, promotion_loss_values, targets_built, PromotionTargets};
use stegact::rotary::{rotate_offsets, encode, rotate, PositionEncoding};
use stegact::stego::{psnr, Hider, HiderConfig, WaveletHider};
use stegact::training::eval::{evaluate, Pairing};
use stegact::training::{train, TrainConfig};
use stegact::wavelet::{dwt_spatial, dwt_temporal, idwt_spatial, idwt_temporal, Band};
use stegact::Tensor;

// Tolerances.
const WAVELET_ROUND_TRIP: f64 = 1e-6;
const WAVELET_PARSEVAL_REL: f64 = 1e-5;
const WAVELET_SECONDS: f64 = 60.0;
const ROPE_TABLE: f64 = 1e-5;
const GRAD_REL: f64 = 1e-3;
const HIDER_EXTRACT: f64 = 1e-5;
const HIDER_PSNR_DB: f64 = 35.0;
const DESK_TRAIN_TOP1: f64 = 0.95;
const DESK_VAL_TOP1: f64 = 0.75;
const ATTACK_RAW_CMAP: f64 = 0.9;
const ATTACK_DROP: f64 = 0.05;

struct Line {
    id: u8,
    name: &'static str,
    status: Status,
    detail: String,
}

#[derive(PartialEq)]
enum Status {
    Pass,
    Fail,
    Report,
    Skip,
}

fn line(id: u8, name: &'static str, ok: bool, detail: String) -> Line {
    Line { id, name, status: if ok { Status::Pass } else { Status::Fail }, detail }
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

fn wavelet_correctness() -> Line {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut round, mut parseval) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let t = 2 * rng.gen_range(1..=4);
        let h = 2 * rng.gen_range(1..=8);
        let w = 2 * rng.gen_range(1..=8);
        let c = rng.gen_range(1..=3);
        let x = uniform(&[t, h, w, c], -1.0, 1.0, &mut rng);
        let e = x.sum_sq();
        let s = dwt_spatial(&x).unwrap();
        round = round.max(idwt_spatial(&s).unwrap().max_abs_diff(&x));
        parseval = parseval.max((s.energy() - e).abs() / e);
        let tb = dwt_temporal(&x).unwrap();
        round = round.max(idwt_temporal(&tb).unwrap().max_abs_diff(&x));
        parseval = parseval.max((tb.low.sum_sq() + tb.high.sum_sq() - e).abs() / e);
    }
    let secs = start.elapsed().as_secs_f64();
    line(
        1,
        "wavelet round trip and energy",
        round <= WAVELET_ROUND_TRIP && parseval <= WAVELET_PARSEVAL_REL && secs < WAVELET_SECONDS,
        format!("max round-trip {round:.2e}, max energy error {parseval:.2e}, {secs:.1}s"),
    )
}

fn rotary_equivalence() -> Line {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (len, d) = (8, 16);
    let zeros = Tensor::zeros(&[len, d / 2]);
    let repeat = |v: &Tensor| Tensor::concat(&(0..len).map(|_| v).collect::<Vec<_>>(), 0).unwrap();
    let mut deviation = 0.0f64;
    for _ in 0..8 {
        let q = rotate_offsets(&repeat(&uniform(&[1, d], -1.0, 1.0, &mut rng)), &zeros, &zeros).unwrap();
        let k = rotate_offsets(&repeat(&uniform(&[1, d], -1.0, 1.0, &mut rng)), &zeros, &zeros).unwrap();
        let dot = |i: usize, j: usize| (0..d).map(|c| q.data()[i * d + c] * k.data()[j * d + c]).sum::<f64>();
        for i in 0..len {
            for j in 0..len {
                // Compare against the pair with the same offset anchored at 0.
                let (a, b) = if i >= j { (i - j, 0) } else { (0, j - i) };
                deviation = deviation.max((dot(i, j) - dot(a, b)).abs());
            }
        }
    }

    let x = uniform(&[2, len, d], -1.0, 1.0, &mut rng);
    let ec = uniform(&[len, d / 2], -0.1, 0.1, &mut rng);
    let es = uniform(&[len, d / 2], -0.1, 0.1, &mut rng);
    let weights = uniform(&[2, len, d], -1.0, 1.0, &mut rng);
    let run = |x: &Tensor, ec: &Tensor, es: &Tensor| {
        let mut g = Graph::new(Mode::Train);
        let vars = [g.input(x.clone()), g.input(ec.clone()), g.input(es.clone())];
        let y = rotate(&mut g, vars[0], Some(vars[1]), Some(vars[2])).unwrap();
        let w = g.constant(weights.clone());
        let p = g.mul(y, w).unwrap();
        let l = g.sum_all(p);
        (g, vars, l)
    };
    let (g, vars, l) = run(&x, &ec, &es);
    let grads = g.backward(l).unwrap();
    let value = |x: &Tensor, ec: &Tensor, es: &Tensor| {
        let (g, _, l) = run(x, ec, es);
        g.value(l).item()
    };
    let errs = [
        relative_error(grads.wrt(vars[0]).unwrap(), &central_difference(&x, 1e-5, |p| value(p, &ec, &es))),
        relative_error(grads.wrt(vars[1]).unwrap(), &central_difference(&ec, 1e-5, |p| value(&x, p, &es))),
        relative_error(grads.wrt(vars[2]).unwrap(), &central_difference(&es, 1e-5, |p| value(&x, &ec, p))),
    ];
    let grad = errs.iter().copied().fold(0.0, f64::max);
    line(
        2,
        "rotary relative positions and offset gradients",
        deviation <= ROPE_TABLE && grad <= GRAD_REL,
        format!("table deviation {deviation:.2e}, gradient rel error {grad:.2e}"),
    )
}

fn zero_strength_reduction() -> Line {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let d = 16;
    let mut store = ParamStore::new();
    init_encodings(&mut store, PositionEncoding::DyTemp, 8, d, &mut rng);
    init_group_attention(&mut store, "LL", d, false, &mut rng);
    init_group_attention(&mut store, "LH", d, true, &mut rng);
    // Non-zero offsets so the encoding is exercised.
    for p in ["pe.ll.eps_cos", "pe.ll.eps_sin", "pe.detail.eps_cos", "pe.detail.eps_sin"] {
        store.set(p, uniform(&[8, d / 2], -0.1, 0.1, &mut rng)).unwrap();
    }
    let ll = uniform(&[3, 8, d], -1.0, 1.0, &mut rng);
    let xb = uniform(&[3, 8, d], -1.0, 1.0, &mut rng);

    let mut g = Graph::new(Mode::Eval);
    let (l, b) = (g.constant(ll), g.constant(xb.clone()));
    let got = cross_band_block(&mut g, &store, "LH", PositionEncoding::DyTemp, l, b, 0.0).unwrap();
    let got = g.value(got.tokens).clone();

    let mut r = Graph::new(Mode::Eval);
    let x = r.constant(xb);
    let q = linear(&mut r, &store, "attn.LH.sa.q", x).unwrap();
    let k = linear(&mut r, &store, "attn.LH.sa.k", x).unwrap();
    let v = linear(&mut r, &store, "attn.LH.sa.v", x).unwrap();
    let q = encode(&mut r, &store, DETAIL_ENCODING, PositionEncoding::DyTemp, q).unwrap();
    let k = encode(&mut r, &store, DETAIL_ENCODING, PositionEncoding::DyTemp, k).unwrap();
    let (sa, _) = attend(&mut r, q, k, v).unwrap();
    let reference = r.add(x, sa).unwrap();
    let bitwise = got.data().iter().zip(r.value(reference).data()).all(|(a, b)| a.to_bits() == b.to_bits());
    line(
        3,
        "zero cross strength is residual self-attention",
        bitwise,
        format!("bitwise equal: {bitwise}, max diff {:.2e}", got.max_abs_diff(r.value(reference))),
    )
}

fn static_clip(frames: usize, h: usize, w: usize, rng: &mut impl Rng) -> Tensor {
    let frame = uniform(&[1, h, w, 3], 0.0, 1.0, rng);
    Tensor::concat(&(0..frames).map(|_| &frame).collect::<Vec<_>>(), 0).unwrap()
}

fn batch(t: &PromotionTargets) -> PromotionTargets {
    PromotionTargets::stack(std::slice::from_ref(t)).unwrap()
}

fn promotion_checks() -> Line {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    // Zero loss: with a static secret the spatial targets are their own
    // temporal targets, so feeding them back as projections zeroes both terms.
    let secret = static_clip(16, 32, 32, &mut rng);
    let t = batch(&build_targets(&secret, 4, &[16, 8, 4, 2], true).unwrap());
    let zero = promotion_loss_values(&t, &t.spatial, 0.2, 0.3).unwrap();
    let zero_ok = zero == (0.0, 0.0, 0.0);

    // Gradients on a level whose bands are (2, 16, 16, 3) per clip.
    let secret = uniform(&[2, 64, 64, 3], 0.0, 1.0, &mut rng);
    let targets = batch(&build_targets(&secret, 1, &[2], true).unwrap());
    let mut store = ParamStore::new();
    init_projections(&mut store, &[4], 3, &mut rng);
    let z = uniform(&[1, 2, 16, 16, 4], -1.0, 1.0, &mut rng);
    let run = |store: &ParamStore, z: &Tensor| {
        let mut g = Graph::new(Mode::Train);
        let zv = g.input(z.clone());
        let proj = vec![Band::HIGH.map(|b| dwc_forward(&mut g, store, 1, b, zv, true).unwrap())];
        let l = promotion_loss(&mut g, &targets, &proj, 0.2, 0.3).unwrap();
        (g, zv, l.total)
    };
    let (g, zv, l) = run(&store, &z);
    let grads = g.backward(l).unwrap();
    let mut errs = vec![relative_error(
        grads.wrt(zv).unwrap(),
        &central_difference(&z, 1e-5, |p| {
            let (g, _, l) = run(&store, p);
            g.value(l).item()
        }),
    )];
    let params = grads.into_param_grads();
    for name in ["promo.l1.LH.conv.weight", "promo.l1.HH.bn.gamma"] {
        let w0 = store.get(name).unwrap().clone();
        let numeric = central_difference(&w0, 1e-5, |w| {
            let mut s = store.clone();
            s.set(name, w.clone()).unwrap();
            let (g, _, l) = run(&s, &z);
            g.value(l).item()
        });
        errs.push(relative_error(&params[name], &numeric));
    }
    let grad = errs.iter().copied().fold(0.0, f64::max);
    line(
        4,
        "promotion zero loss and gradients",
        zero_ok && grad <= GRAD_REL,
        format!("matched loss {zero:?}, gradient rel error {grad:.2e}"),
    )
}

fn static_secret_property() -> Line {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut nonzero = 0usize;
    for _ in 0..5 {
        let t = build_targets(&static_clip(16, 32, 32, &mut rng), 4, &[16, 8, 4, 2], true).unwrap();
        nonzero += t.temporal.iter().flatten().map(|b| b.data().iter().filter(|&&v| v != 0.0).count()).sum::<usize>();
    }
    line(5, "static secret has zero temporal targets", nonzero == 0, format!("{nonzero} non-zero temporal target entries"))
}

fn hider_round_trip() -> Line {
    let hider = WaveletHider::new(HiderConfig::default()).unwrap();
    let spec = SyntheticSpec::default();
    let (mut worst_extract, mut min_psnr, mut sum_psnr) = (0.0f64, f64::INFINITY, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for i in 0..100u64 {
        let cover = generate_cover(spec.frames, spec.height, spec.width, 6, i);
        let secret = generate_clip(&spec, rng.gen_range(0..spec.classes), 1000 + i).unwrap().video;
        let stego = hider.hide(&cover, &secret).unwrap();
        let raw = hider.hide_unclamped(&cover, &secret).unwrap();
        let want = hider.payload(&secret).unwrap();
        let got = hider.extract_with_cover(&stego, &cover).unwrap();
        // A payload entry is trusted when none of its 2x2 source pixels clamped.
        let (h, w) = (spec.height, spec.width);
        for t in 0..spec.frames {
            for y in 0..h / 2 {
                for x in 0..w / 2 {
                    let saturated = (0..4).any(|k| {
                        let (py, px) = (2 * y + k / 2, 2 * x + k % 2);
                        (0..3).any(|c| {
                            let v = raw.data()[((t * h + py) * w + px) * 3 + c];
                            !(0.0..=1.0).contains(&v)
                        })
                    });
                    if saturated {
                        continue;
                    }
                    for c in 0..3 {
                        let j = ((t * (h / 2) + y) * (w / 2) + x) * 3 + c;
                        worst_extract = worst_extract.max((got.data()[j] - want.data()[j]).abs());
                    }
                }
            }
        }
        let p = psnr(&cover, &stego).unwrap();
        min_psnr = min_psnr.min(p);
        sum_psnr += p;
    }
    line(
        6,
        "hider round trip and imperceptibility",
        worst_extract <= HIDER_EXTRACT && min_psnr >= HIDER_PSNR_DB,
        format!("max extraction error {worst_extract:.2e}, PSNR min {min_psnr:.2} dB, mean {:.2} dB", sum_psnr / 100.0),
    )
}

fn desk_configs(seed: u64) -> (NetworkConfig, TrainConfig) {
    let net = NetworkConfig { theta: 0.2, ..NetworkConfig::default() };
    // Calibrated: the default lr (1e-4) with augmentation is far from
    // converged after 30 epochs at this scale.
    let train = TrainConfig { seed, epochs: 30, alpha: 0.2, beta: 0.3, lr: 1e-3, augment: None, ..TrainConfig::default() };
    (net, train)
}

struct DeskRun {
    net: Network,
    train_top1: f64,
    val_top1: f64,
    seconds: f64,
}

fn desk_run(ds: &Dataset, hider: &WaveletHider, net: NetworkConfig, cfg: &TrainConfig) -> DeskRun {
    let start = Instant::now();
    let seed = cfg.seed;
    let out = train(Network::new(net, seed).unwrap(), hider, ds, cfg, |e| {
        eprintln!("  seed {seed} epoch {:>2} train {:.3} val {:.3}", e.epoch, e.train_top1, e.val_top1);
    })
    .unwrap();
    let train_top1 = evaluate(&out.best, hider, ds, Split::Train, Pairing::Random, seed).unwrap().top1;
    let val_top1 = out.record.best().map(|e| e.val_top1).unwrap_or(0.0);
    DeskRun { net: out.best, train_top1, val_top1, seconds: start.elapsed().as_secs_f64() }
}

fn desk_learning(run: &DeskRun) -> Line {
    line(
        7,
        "desk-scale learning",
        run.train_top1 >= DESK_TRAIN_TOP1 && run.val_top1 >= DESK_VAL_TOP1,
        format!(
            "train Top-1 {:.1}%, val Top-1 {:.1}%, {:.0}s",
            100.0 * run.train_top1,
            100.0 * run.val_top1,
            run.seconds
        ),
    )
}

fn ablation_direction(ds: &Dataset, hider: &WaveletHider, full_seed0: f64) -> Line {
    let mut full = vec![full_seed0];
    let mut plain = Vec::new();
    for seed in 0..3u64 {
        let (net, cfg) = desk_configs(seed);
        if seed > 0 {
            full.push(desk_run(ds, hider, net.clone(), &cfg).val_top1);
        }
        let plain_net = NetworkConfig { theta: 0.0, ..net };
        let plain_cfg = TrainConfig { alpha: 0.0, beta: 0.0, ..cfg };
        plain.push(desk_run(ds, hider, plain_net, &plain_cfg).val_top1);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (f, p) = (mean(&full), mean(&plain));
    Line {
        id: 8,
        name: "ablation direction (reported)",
        status: Status::Report,
        detail: format!(
            "full mean val {:.1}% vs plain {:.1}% ({}); full {:?}, plain {:?}",
            100.0 * f,
            100.0 * p,
            if f >= p { "full >= plain" } else { "full < plain" },
            full.iter().map(|v| (1000.0 * v).round() / 10.0).collect::<Vec<_>>(),
            plain.iter().map(|v| (1000.0 * v).round() / 10.0).collect::<Vec<_>>(),
        ),
    }
}

fn brute_ap(sc: &[f64], t: &[u8]) -> Option<f64> {
    let above = |i: usize, j: usize| sc[j] > sc[i] || (sc[j] == sc[i] && j <= i);
    let pos: Vec<usize> = (0..sc.len()).filter(|&i| t[i] == 1).collect();
    if pos.is_empty() {
        return None;
    }
    let mut terms: Vec<(usize, usize)> = pos
        .iter()
        .map(|&i| ((0..sc.len()).filter(|&j| above(i, j)).count(), pos.iter().filter(|&&j| above(i, j)).count()))
        .collect();
    terms.sort();
    Some(terms.iter().fold(0.0, |acc, &(rank, hits)| acc + hits as f64 / rank as f64) / pos.len() as f64)
}

fn brute_f1(sc: &[f64], t: &[u8]) -> f64 {
    let tp = (0..sc.len()).filter(|&i| sc[i] >= 0.5 && t[i] == 1).count() as f64;
    let predicted = sc.iter().filter(|&&v| v >= 0.5).count() as f64;
    let actual = t.iter().filter(|&&v| v == 1).count() as f64;
    if tp == 0.0 {
        0.0
    } else {
        2.0 * tp / (predicted + actual)
    }
}

fn metric_oracles() -> Line {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut mismatches = 0;
    let mut cases = 0;
    while cases < 100 {
        let scores: Vec<Vec<f64>> =
            (0..20).map(|_| (0..7).map(|_| f64::from(rng.gen_range(0..10u8)) / 10.0).collect()).collect();
        let targets: Vec<Vec<u8>> = (0..20).map(|_| (0..7).map(|_| u8::from(rng.gen_bool(0.3))).collect()).collect();
        let column = |a: usize| -> (Vec<f64>, Vec<u8>) {
            (scores.iter().map(|r| r[a]).collect(), targets.iter().map(|r| r[a]).collect())
        };
        let cols: Vec<_> = (0..7).map(column).collect();
        let aps: Vec<f64> = cols.iter().filter_map(|(c, t)| brute_ap(c, t)).collect();
        if aps.is_empty() {
            continue;
        }
        cases += 1;
        let f1s: Vec<f64> = cols.iter().filter(|(_, t)| t.contains(&1)).map(|(c, t)| brute_f1(c, t)).collect();
        let s = MultiLabelScores::new(scores.clone(), targets.clone()).unwrap();
        let map_ok = classwise_map(&s, false).unwrap() == aps.iter().sum::<f64>() / aps.len() as f64;
        let f1_ok = classwise_f1(&s, 0.5).unwrap() == f1s.iter().sum::<f64>() / f1s.len() as f64;
        if !(map_ok && f1_ok) {
            mismatches += 1;
        }
    }
    let worked = average_precision(&[0.9, 0.8, 0.7, 0.1], &[1, 0, 1, 0]).unwrap();
    let worked_ok = (worked - 0.8333).abs() < 5e-5;
    line(
        9,
        "metric oracles",
        mismatches == 0 && worked_ok,
        format!("{mismatches}/100 oracle mismatches, worked AP {worked:.4}"),
    )
}

fn privacy_direction(ds: &Dataset, hider: &WaveletHider) -> Line {
    let cfg = AttackerConfig { seed: 0, ..AttackerConfig::default() };
    let cmap = |input| {
        let (frames, attrs) = attack_frames(ds, hider, Split::Train, input, 0).unwrap();
        privacy_attack(&frames, &attrs, &cfg).unwrap().cmap
    };
    let (raw, stego) = (cmap(AttackInput::Raw), cmap(AttackInput::Stego));
    line(
        10,
        "privacy direction",
        raw >= ATTACK_RAW_CMAP && stego <= raw - ATTACK_DROP,
        format!("cMAP raw {raw:.3}, stego {stego:.3}"),
    )
}

fn inference_purity(ds: &Dataset, hider: &WaveletHider, net: &Network) -> Line {
    let (f0, t0) = (secret_forwards(), targets_built());
    let report = evaluate(net, hider, ds, Split::Val, Pairing::Random, 21).unwrap();
    let fixed = evaluate(net, hider, ds, Split::Val, Pairing::FixedCover(0), 21).unwrap();
    let (df, dt) = (secret_forwards() - f0, targets_built() - t0);
    // The counters must move when a secret is supplied, or zero proves nothing.
    let clip = ds.clip_of(&ds.val[0].source, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let x = Tensor::stack(&[&clip]).unwrap();
    let mut g = Graph::new(Mode::Eval);
    net.forward(&mut g, &x, Some(&x)).unwrap();
    let live = secret_forwards() > f0 + df && targets_built() > t0 + dt;
    line(
        11,
        "inference never consumes the secret",
        df == 0 && dt == 0 && live,
        format!(
            "{} clips evaluated twice; secret forwards {df}, targets built {dt}; counters live: {live}",
            report.total.max(fixed.total)
        ),
    )
}

fn main() {
    let quick = std::env::var("STEGACT_ACCEPT_QUICK").is_ok_and(|v| v == "1");
    let mut lines = vec![
        wavelet_correctness(),
        rotary_equivalence(),
        zero_strength_reduction(),
        promotion_checks(),
        static_secret_property(),
        hider_round_trip(),
    ];
    let ds = Dataset::synthetic(&SyntheticSpec::default(), &SyntheticCounts::default()).unwrap();
    let hider = WaveletHider::new(HiderConfig::default()).unwrap();
    let desk = if quick {
        None
    } else {
        let (net, cfg) = desk_configs(0);
        Some(desk_run(&ds, &hider, net, &cfg))
    };
    let skipped = |id, name| Line { id, name, status: Status::Skip, detail: "STEGACT_ACCEPT_QUICK=1".into() };
    match &desk {
        Some(run) => {
            lines.push(desk_learning(run));
            lines.push(ablation_direction(&ds, &hider, run.val_top1));
        }
        None => {
            lines.push(skipped(7, "desk-scale learning"));
            lines.push(skipped(8, "ablation direction (reported)"));
        }
    }
    lines.push(metric_oracles());
    lines.push(privacy_direction(&ds, &hider));
    lines.push(match &desk {
        Some(run) => inference_purity(&ds, &hider, &run.net),
        None => skipped(11, "inference never consumes the secret"),
    });

    println!();
    for l in &lines {
        let tag = match l.status {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Report => "INFO",
            Status::Skip => "SKIP",
        };
        println!("[{tag}] criterion {:>2}: {}: {}", l.id, l.name, l.detail);
    }
    let failed = lines.iter().filter(|l| l.status == Status::Fail).count();
    println!("acceptance: {failed} gated failure(s)");
    if failed > 0 {
        std::process::exit(1);
    }
}
