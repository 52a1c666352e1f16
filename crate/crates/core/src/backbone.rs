//! Small 3D residual network (ResNet3D-18 layout) run once per sub-band branch.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mode, Var};
use crate::error::{config_err, dim_err, Result};
use crate::nn::{batch_norm, conv3d, ParamStore};
use crate::tensor::Tensor;
use crate::wavelet::Band;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub base_width: usize,
    pub spatial_strides: [usize; 4],
    pub temporal_strides: [usize; 4],
    pub blocks_per_stage: [usize; 4],
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::with_width(16)
    }
}

impl BackboneConfig {
    pub fn with_width(base_width: usize) -> Self {
        Self {
            base_width,
            spatial_strides: [2, 2, 2, 2],
            temporal_strides: [1, 2, 2, 2],
            blocks_per_stage: [2, 2, 2, 2],
        }
    }

    pub fn stage_channels(&self) -> [usize; 4] {
        let w = self.base_width;
        [w, 2 * w, 4 * w, 8 * w]
    }

    /// Cumulative temporal downsampling after each stage.
    pub fn temporal_factors(&self) -> [usize; 4] {
        let mut f = [1; 4];
        let mut acc = 1;
        for (i, s) in self.temporal_strides.iter().enumerate() {
            acc *= s;
            f[i] = acc;
        }
        f
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 {
            return Err(config_err!("backbone width must be positive"));
        }
        let strides = self.spatial_strides.iter().chain(&self.temporal_strides);
        if strides.into_iter().any(|s| !(1..=2).contains(s)) {
            return Err(config_err!("backbone strides must be 1 or 2"));
        }
        if self.blocks_per_stage.contains(&0) {
            return Err(config_err!("every stage needs at least one block"));
        }
        Ok(())
    }

    /// Check a `(T, H, W)` input against the stride products.
    pub fn check_input(&self, t: usize, h: usize, w: usize) -> Result<()> {
        let ts: usize = self.temporal_strides.iter().product();
        let ss: usize = self.spatial_strides.iter().product();
        for (axis, len, div) in [("time", t, ts), ("height", h, ss), ("width", w, ss)] {
            if len == 0 || len % div != 0 {
                let legal = (len / div) * div;
                return Err(dim_err!(
                    "backbone input {axis} {len} is not divisible by {div}; largest legal {axis} not above it is {legal}"
                ));
            }
        }
        Ok(())
    }

    /// Stage output shapes `(T_n, H_n, W_n, C_n)` for one clip.
    pub fn stage_shapes(&self, t: usize, h: usize, w: usize) -> Vec<[usize; 4]> {
        let ch = self.stage_channels();
        let (mut t, mut h, mut w) = (t, h, w);
        (0..4)
            .map(|i| {
                t /= self.temporal_strides[i];
                h /= self.spatial_strides[i];
                w /= self.spatial_strides[i];
                [t, h, w, ch[i]]
            })
            .collect()
    }
}

/// Stage outputs for one branch.
#[derive(Clone, Debug)]
pub struct BranchFeatures {
    pub stages: Vec<Tensor>,
    pub band: Band,
}

pub fn init_backbone(store: &mut ParamStore, prefix: &str, in_channels: usize, cfg: &BackboneConfig, rng: &mut impl Rng) {
    let ch = cfg.stage_channels();
    store.add_conv3d(&format!("{prefix}.stem.conv"), [3, 3, 3], in_channels, ch[0], rng);
    store.add_batch_norm(&format!("{prefix}.stem.bn"), ch[0]);
    let mut cin = ch[0];
    for (s, &cout) in ch.iter().enumerate() {
        for b in 0..cfg.blocks_per_stage[s] {
            let p = format!("{prefix}.stage{}.block{b}", s + 1);
            store.add_conv3d(&format!("{p}.conv1"), [3, 3, 3], cin, cout, rng);
            store.add_batch_norm(&format!("{p}.bn1"), cout);
            store.add_conv3d(&format!("{p}.conv2"), [3, 3, 3], cout, cout, rng);
            store.add_batch_norm(&format!("{p}.bn2"), cout);
            let strided = b == 0 && (cfg.spatial_strides[s] != 1 || cfg.temporal_strides[s] != 1);
            if strided || cin != cout {
                store.add_conv3d(&format!("{p}.down.conv"), [1, 1, 1], cin, cout, rng);
                store.add_batch_norm(&format!("{p}.down.bn"), cout);
            }
            cin = cout;
        }
    }
}

fn conv_bn(g: &mut Graph, store: &ParamStore, name: &str, x: Var, stride: [usize; 3], pad: [usize; 3]) -> Result<Var> {
    let y = conv3d(g, store, &format!("{name}.conv"), x, stride, pad)?;
    batch_norm(g, store, &format!("{name}.bn"), y)
}

fn basic_block(g: &mut Graph, store: &ParamStore, p: &str, x: Var, stride: [usize; 3]) -> Result<Var> {
    let y = conv3d(g, store, &format!("{p}.conv1"), x, stride, [1, 1, 1])?;
    let y = batch_norm(g, store, &format!("{p}.bn1"), y)?;
    let y = g.relu(y);
    let y = conv3d(g, store, &format!("{p}.conv2"), y, [1, 1, 1], [1, 1, 1])?;
    let y = batch_norm(g, store, &format!("{p}.bn2"), y)?;
    let shortcut = if store.contains(&format!("{p}.down.conv.weight")) {
        conv_bn(g, store, &format!("{p}.down"), x, stride, [0, 0, 0])?
    } else {
        x
    };
    let sum = g.add(y, shortcut)?;
    Ok(g.relu(sum))
}

/// Run one branch on a batch `(N, T, H, W, C)`; returns the four stage outputs.
pub fn forward_stages(g: &mut Graph, store: &ParamStore, prefix: &str, cfg: &BackboneConfig, x: Var) -> Result<Vec<Var>> {
    let s = g.shape(x).to_vec();
    if s.len() != 5 {
        return Err(dim_err!("backbone expects (N, T, H, W, C), got {:?}", s));
    }
    cfg.check_input(s[1], s[2], s[3])?;
    let y = conv_bn(g, store, &format!("{prefix}.stem"), x, [1, 1, 1], [1, 1, 1])?;
    let mut y = g.relu(y);
    let mut stages = Vec::with_capacity(4);
    for st in 0..4 {
        for b in 0..cfg.blocks_per_stage[st] {
            let stride = if b == 0 {
                [cfg.temporal_strides[st], cfg.spatial_strides[st], cfg.spatial_strides[st]]
            } else {
                [1, 1, 1]
            };
            y = basic_block(g, store, &format!("{prefix}.stage{}.block{b}", st + 1), y, stride)?;
        }
        stages.push(y);
    }
    Ok(stages)
}

/// Inference-mode forward of a single band clip `(T, H, W, C)`.
pub fn branch_forward(store: &ParamStore, prefix: &str, cfg: &BackboneConfig, band_input: &Tensor, band: Band) -> Result<BranchFeatures> {
    let mut shape = vec![1];
    shape.extend_from_slice(band_input.shape());
    let mut g = Graph::new(Mode::Eval);
    let x = g.constant(band_input.clone().reshape(&shape)?);
    let vars = forward_stages(&mut g, store, prefix, cfg, x)?;
    let stages = vars
        .into_iter()
        .map(|v| {
            let t = g.value(v).clone();
            let s = t.shape()[1..].to_vec();
            t.reshape(&s)
        })
        .collect::<Result<_>>()?;
    Ok(BranchFeatures { stages, band })
}
