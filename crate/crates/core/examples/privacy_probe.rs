//! Train the frame attacker on raw, stego and cover frames of the synthetic
//! validation clips and print cMAP / F1 for each.

use stegact::data::{Dataset, Split, SyntheticCounts, SyntheticSpec};
use stegact::metrics::{attack_frames, privacy_attack, AttackInput, AttackerConfig};
use stegact::stego::{HiderConfig, WaveletHider};

fn main() -> stegact::Result<()> {
    let ds = Dataset::synthetic(&SyntheticSpec::default(), &SyntheticCounts::default())?;
    let hider = WaveletHider::new(HiderConfig::default())?;
    for input in [AttackInput::Raw, AttackInput::Stego, AttackInput::Cover] {
        let (frames, attrs) = attack_frames(&ds, &hider, Split::Train, input, 0)?;
        let r = privacy_attack(&frames, &attrs, &AttackerConfig::default())?;
        println!("{input:?}: cMAP {:.3} F1 {:.3}", r.cmap, r.f1);
    }
    Ok(())
}
