//! Text tables for run records and energy splits; PNG attention heatmaps.

use std::fs;
use std::path::Path;

use clap::ArgMatches;
use image::{Rgb, RgbImage};
use rand::Rng;
use stegact::autograd::{Graph, Mode};
use stegact::data::Split;
use stegact::network::Network;
use stegact::rng::stream_rng;
use stegact::stego::{Hider, WaveletHider};
use stegact::tensor::Tensor;
use stegact::training::RunRecord;
use stegact::wavelet::LevelEnergy;
use stegact::{Error, Result};

use crate::commands::{base_config, fresh_dir, run_config};
use crate::ReportArgs;

const CELL: u32 = 32;

pub fn energy_table_text(rows: &[LevelEnergy]) -> String {
    let mut s = format!("{:>5}  {:>14}  {:>7}  {:>7}  {:>7}  {:>7}\n", "level", "input energy", "LL%", "LH%", "HL%", "HH%");
    for r in rows {
        s.push_str(&format!("{:>5}  {:>14.6e}", r.level, r.input_energy));
        for f in r.fractions {
            s.push_str(&format!("  {:>7.2}", 100.0 * f));
        }
        s.push('\n');
    }
    s
}

pub fn run_table(rec: &RunRecord) -> String {
    let best = rec.best().map(|b| b.epoch);
    let mut s = format!(
        "{:>5}  {:>7}  {:>7}  {:>8}  {:>8}  {:>8}  {:>8}  {:>7}\n",
        "epoch", "train%", "val%", "loss", "cls", "spatial", "temporal", "secs"
    );
    for e in &rec.epochs {
        s.push_str(&format!(
            "{:>5}  {:>7.2}  {:>7.2}  {:>8.4}  {:>8.4}  {:>8.4}  {:>8.4}  {:>7.1}{}\n",
            e.epoch,
            100.0 * e.train_top1,
            100.0 * e.val_top1,
            e.loss,
            e.loss_cls,
            e.loss_spatial,
            e.loss_temporal,
            e.wall_seconds,
            if Some(e.epoch) == best { "  *" } else { "" }
        ));
    }
    s
}

/// Piecewise-linear dark-to-bright palette for values in `[0, 1]`.
fn color(v: f64) -> Rgb<u8> {
    const STOPS: [[f64; 3]; 5] = [[0., 0., 4.], [87., 16., 110.], [188., 55., 84.], [249., 142., 9.], [252., 255., 164.]];
    let x = v.clamp(0.0, 1.0) * (STOPS.len() - 1) as f64;
    let i = (x.floor() as usize).min(STOPS.len() - 2);
    let f = x - i as f64;
    let c = |k: usize| (STOPS[i][k] + f * (STOPS[i + 1][k] - STOPS[i][k])).round() as u8;
    Rgb([c(0), c(1), c(2)])
}

/// Render a `(T, T)` weight matrix, one square cell per entry.
pub fn heatmap(weights: &Tensor) -> RgbImage {
    let (rows, cols) = (weights.shape()[0] as u32, weights.shape()[1] as u32);
    RgbImage::from_fn(cols * CELL, rows * CELL, |x, y| color(weights.data()[((y / CELL) * cols + x / CELL) as usize]))
}

fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| Error::data(path, e))
}

pub fn run(a: ReportArgs, m: &ArgMatches) -> Result<String> {
    let run = a.run.as_path();
    let mut cfg = base_config(&a.common, m, run_config(Some(run))?)?;
    if let Some(d) = &a.data.data {
        cfg.data = Some(d.clone());
    }
    let cfg = cfg.resolve()?;
    let fp = cfg.fingerprint();
    println!("fingerprint: {fp}");
    let rec = RunRecord::read_jsonl(&run.join("run.jsonl"))?;
    let out = a.out.clone().unwrap_or_else(|| run.join("report"));
    fresh_dir(&out)?;
    let mut text = run_table(&rec);

    let ckpt = run.join("checkpoint");
    if a.clips > 0 && ckpt.join("network.json").exists() {
        let net = Network::load(&ckpt, None)?;
        let ds = cfg.dataset()?;
        let samples = ds.require(Split::Val)?;
        let covers = ds.covers(Split::Val);
        let hider = WaveletHider::new(cfg.hider.clone())?;
        text.push_str("\nclip  label  band weights\n");
        for (i, s) in samples.iter().take(a.clips).enumerate() {
            let mut rng = stream_rng(cfg.seed, 50, i as u64);
            let secret = ds.clip_of(&s.source, &mut rng)?;
            let cover = ds.clip_of(&covers[rng.gen_range(0..covers.len())], &mut rng)?;
            let stego = hider.embed(&cover, &secret)?.stego;
            let mut shape = vec![1];
            shape.extend_from_slice(stego.shape());
            let mut g = Graph::new(Mode::Eval);
            let fwd = net.forward(&mut g, &stego.reshape(&shape)?, None)?;
            for (group, sa, ca) in &fwd.attention {
                save_png(&heatmap(&g.value(*sa).index0(0)?), &out.join(format!("attn_clip{i}_{group}_self.png")))?;
                if let Some(ca) = ca {
                    save_png(&heatmap(&g.value(*ca).index0(0)?), &out.join(format!("attn_clip{i}_{group}_cross.png")))?;
                }
            }
            let w: Vec<String> = g.value(fwd.band_weights).data().iter().map(|v| format!("{v:.3}")).collect();
            text.push_str(&format!("{i:>4}  {:>5}  {}\n", s.label, w.join(" ")));
        }
    }
    print!("{text}");
    fs::write(out.join("report.txt"), &text)?;
    Ok(fp)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn palette_ends_and_heatmap_size() {
        assert_eq!(color(0.0), Rgb([0, 0, 4]));
        assert_eq!(color(1.0), Rgb([252, 255, 164]));
        let w = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.25, 0.75]).unwrap();
        let img = heatmap(&w);
        assert_eq!(img.dimensions(), (64, 64));
        assert_eq!(*img.get_pixel(40, 5), color(0.0));
    }
}
