//! Named sweeps over network and loss settings.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{train, TrainConfig};
use crate::data::Dataset;
use crate::error::{config_err, Error, Result};
use crate::network::{Grouping, Network, NetworkConfig};
use crate::rotary::PositionEncoding;
use crate::stego::Hider;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    /// On/off matrix of the spatial loss, temporal loss and cross-band term.
    Modules,
    /// Position encoding kinds.
    Pe,
    /// Band partitions.
    Grouping,
    /// One coefficient varied at a time.
    Hyper,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Modules, Suite::Pe, Suite::Grouping, Suite::Hyper];
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::Modules => "modules",
            Suite::Pe => "pe",
            Suite::Grouping => "grouping",
            Suite::Hyper => "hyper",
        })
    }
}

impl FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.to_string() == s)
            .ok_or_else(|| config_err!("unknown ablation suite '{s}' (expected modules, pe, grouping or hyper)"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: String,
    pub net: NetworkConfig,
    pub train: TrainConfig,
}

pub const ALPHA_GRID: [f64; 3] = [0.1, 0.2, 0.5];
pub const BETA_GRID: [f64; 3] = [0.2, 0.3, 0.5];
pub const THETA_GRID: [f64; 4] = [0.0, 0.1, 0.2, 0.3];

/// Configurations a suite runs, derived from the base settings.
pub fn suite_variants(suite: Suite, net: &NetworkConfig, train: &TrainConfig) -> Vec<Variant> {
    let v = |name: String, n: NetworkConfig, t: TrainConfig| Variant { name, net: n, train: t };
    match suite {
        Suite::Modules => (0..8u8)
            .map(|bits| {
                let (s, t, c) = (bits & 1 != 0, bits & 2 != 0, bits & 4 != 0);
                let mut parts = Vec::new();
                if s {
                    parts.push("spatial");
                }
                if t {
                    parts.push("temporal");
                }
                if c {
                    parts.push("cross");
                }
                let name = if parts.is_empty() { "plain".to_string() } else { parts.join("+") };
                let n = NetworkConfig { theta: if c { net.theta } else { 0.0 }, ..net.clone() };
                let tr = TrainConfig {
                    alpha: if s { train.alpha } else { 0.0 },
                    beta: if t { train.beta } else { 0.0 },
                    ..train.clone()
                };
                v(name, n, tr)
            })
            .collect(),
        Suite::Pe => PositionEncoding::ALL
            .into_iter()
            .map(|pe| v(pe.to_string(), NetworkConfig { position_encoding: pe, ..net.clone() }, train.clone()))
            .collect(),
        Suite::Grouping => Grouping::ablation_suite()
            .into_iter()
            .map(|g| v(g.to_string(), NetworkConfig { grouping: g, ..net.clone() }, train.clone()))
            .collect(),
        Suite::Hyper => {
            let mut out = Vec::new();
            for a in ALPHA_GRID {
                out.push(v(format!("alpha={a}"), net.clone(), TrainConfig { alpha: a, ..train.clone() }));
            }
            for b in BETA_GRID {
                out.push(v(format!("beta={b}"), net.clone(), TrainConfig { beta: b, ..train.clone() }));
            }
            for t in THETA_GRID {
                out.push(v(format!("theta={t}"), NetworkConfig { theta: t, ..net.clone() }, train.clone()));
            }
            out
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    /// Best validation Top-1 over the run.
    pub top1: f64,
    pub best_epoch: usize,
    pub fingerprint: String,
}

/// Train every variant of `suite` from the same seed and report its best
/// validation Top-1. `on_row` sees rows as they finish.
pub fn ablate(
    suite: Suite,
    net: &NetworkConfig,
    train_cfg: &TrainConfig,
    hider: &dyn Hider,
    ds: &Dataset,
    mut on_row: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for var in suite_variants(suite, net, train_cfg) {
        log::info!("ablation {suite}: {}", var.name);
        let model = Network::new(var.net.clone(), var.train.seed)?;
        let out = train(model, hider, ds, &var.train, |_| {})?;
        let best = out.record.best().expect("non-empty run");
        let row = AblationRow {
            variant: var.name,
            top1: best.val_top1,
            best_epoch: out.best_epoch,
            fingerprint: var.net.fingerprint(),
        };
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}

/// Aligned two-column text table `{variant, Top-1}`.
pub fn render_table(suite: Suite, rows: &[AblationRow]) -> String {
    let w = rows.iter().map(|r| r.variant.len()).chain(["variant".len()]).max().unwrap_or(7);
    let mut s = format!("# suite: {suite}\n{:<w$}  {:>7}\n", "variant", "Top-1");
    s.push_str(&format!("{}  {}\n", "-".repeat(w), "-".repeat(7)));
    for r in rows {
        s.push_str(&format!("{:<w$}  {:>6.2}%\n", r.variant, 100.0 * r.top1));
    }
    s
}
