//! Train the desk-scale model on synthetic clips and print each epoch.
//!
//! `cargo run --release --example desk_run -- [seed] [epochs] [lr] [augment 0|1]`

use stegact::data::{Dataset, Split, SyntheticCounts, SyntheticSpec};
use stegact::network::{Network, NetworkConfig};
use stegact::stego::{HiderConfig, WaveletHider};
use stegact::training::eval::{evaluate, Pairing};
use stegact::training::{train, TrainConfig};

fn main() -> stegact::Result<()> {
    let args: Vec<f64> = std::env::args().skip(1).map(|a| a.parse().expect("numeric argument")).collect();
    let seed = args.first().copied().unwrap_or(0.0) as u64;
    let epochs = args.get(1).copied().unwrap_or(30.0) as usize;
    let defaults = TrainConfig::default();
    let lr = args.get(2).copied().unwrap_or(defaults.lr);
    let augment = if args.get(3).copied().unwrap_or(1.0) > 0.0 { defaults.augment.clone() } else { None };
    let ds = Dataset::synthetic(&SyntheticSpec::default(), &SyntheticCounts::default())?;
    let hider = WaveletHider::new(HiderConfig::default())?;
    let cfg = TrainConfig { seed, epochs, lr, augment, ..defaults };
    let net = Network::new(NetworkConfig::default(), seed)?;
    let out = train(net, &hider, &ds, &cfg, |e| {
        println!(
            "epoch {:>2} loss {:.4} cls {:.4} ls {:.4} lt {:.4} train {:.3} val {:.3} ({:.1}s)",
            e.epoch, e.loss, e.loss_cls, e.loss_spatial, e.loss_temporal, e.train_top1, e.val_top1, e.wall_seconds
        );
    })?;
    let train_top1 = evaluate(&out.best, &hider, &ds, Split::Train, Pairing::Random, seed)?.top1;
    println!("best epoch {} eval-mode train {:.3}", out.best_epoch, train_top1);
    Ok(())
}
