//! The full stego-domain classifier: Haar front end, one backbone branch per
//! band group, per-group token attention, weighted band fusion and a linear
//! head. Training passes the secret clip to get auxiliary projections.

use std::cell::Cell;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Mode, Var};
use crate::backbone::{forward_stages, init_backbone, BackboneConfig};
use crate::band_attention::{cross_band_block, init_encodings, init_group_attention, ll_self_attention};
use crate::error::{config_err, dim_err, Error, Result};
use crate::nn::{hex, linear, ParamStore};
use crate::promotion::{build_targets, dwc_forward, init_projections, PromotionTargets, Projections};
use crate::rotary::PositionEncoding;
use crate::tensor::Tensor;
use crate::wavelet::Band;

thread_local! {
    static SECRET_FORWARDS: Cell<u64> = const { Cell::new(0) };
}

/// Forwards on this thread that were handed a secret clip.
pub fn secret_forwards() -> u64 {
    SECRET_FORWARDS.with(|c| c.get())
}

/// A partition of the four bands into branches.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Grouping(Vec<Vec<Band>>);

impl Grouping {
    pub fn new(groups: Vec<Vec<Band>>) -> Result<Self> {
        let mut seen = [false; 4];
        for g in &groups {
            if g.is_empty() {
                return Err(config_err!("band grouping contains an empty group"));
            }
            for b in g {
                if std::mem::replace(&mut seen[b.index()], true) {
                    return Err(config_err!("band {b} appears in more than one group"));
                }
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(config_err!("band {} is missing from the grouping", Band::ALL[i]));
        }
        Ok(Self(groups))
    }

    /// Every band on its own branch.
    pub fn separate() -> Self {
        Self(Band::ALL.iter().map(|&b| vec![b]).collect())
    }

    pub fn groups(&self) -> &[Vec<Band>] {
        &self.0
    }

    /// The partitions compared in the grouping ablation.
    pub fn ablation_suite() -> Vec<Grouping> {
        ["LL,LH,HL,HH", "LL|LH,HL,HH", "LL|LH|HL,HH", "LL|LH,HL|HH", "LL|HL|LH,HH", "LL|LH|HL|HH"]
            .iter()
            .map(|s| s.parse().expect("valid partition"))
            .collect()
    }
}

impl Default for Grouping {
    fn default() -> Self {
        Self::separate()
    }
}

/// Groups separated by `|`, bands within a group by `,`.
impl FromStr for Grouping {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let groups = s
            .split('|')
            .map(|g| g.split(',').map(str::parse).collect::<Result<Vec<Band>>>())
            .collect::<Result<_>>()?;
        Grouping::new(groups)
    }
}

impl fmt::Display for Grouping {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .0
            .iter()
            .map(|g| g.iter().map(|b| b.to_string()).collect::<Vec<_>>().join(","))
            .collect();
        f.write_str(&parts.join("|"))
    }
}

impl Serialize for Grouping {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Grouping {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionRole {
    /// Plain residual self-attention (the LL group, or a lone group).
    SelfOnly,
    /// Self-attention minus cross-attention against the LL group.
    AgainstLl,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BranchPlan {
    pub name: String,
    pub bands: Vec<Band>,
    pub in_channels: usize,
    pub role: AttentionRole,
}

/// One branch per group; inputs are the group's bands stacked on channels.
pub fn group_branches(grouping: &Grouping, band_channels: usize) -> Vec<BranchPlan> {
    let has_separate_ll = grouping.groups().len() > 1;
    grouping
        .groups()
        .iter()
        .map(|bands| {
            let role = if bands.contains(&Band::LL) || !has_separate_ll {
                AttentionRole::SelfOnly
            } else {
                AttentionRole::AgainstLl
            };
            BranchPlan {
                name: bands.iter().map(|b| b.to_string()).collect::<Vec<_>>().join("_"),
                bands: bands.clone(),
                in_channels: band_channels * bands.len(),
                role,
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub backbone: BackboneConfig,
    pub levels: usize,
    pub theta: f64,
    pub grouping: Grouping,
    pub num_classes: usize,
    pub share_branch_weights: bool,
    pub position_encoding: PositionEncoding,
    /// Longest token sequence the position encodings cover.
    pub max_tokens: usize,
    pub weight_hidden: usize,
    pub fuse_hidden: usize,
    pub head_depth: usize,
    /// Absolute-value promotion targets with ReLU projections; signed targets
    /// with linear projections otherwise.
    pub magnitude_targets: bool,
    pub channels: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            levels: 4,
            theta: 0.2,
            grouping: Grouping::default(),
            num_classes: 4,
            share_branch_weights: false,
            position_encoding: PositionEncoding::DyTemp,
            max_tokens: 16,
            weight_hidden: 16,
            fuse_hidden: 4,
            head_depth: 1,
            magnitude_targets: true,
            channels: 3,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if !(self.theta >= 0.0) {
            return Err(config_err!("theta must be >= 0, got {}", self.theta));
        }
        if self.levels != 4 {
            return Err(config_err!("promotion levels must match the four backbone stages, got {}", self.levels));
        }
        if self.num_classes < 2 {
            return Err(config_err!("need at least two classes"));
        }
        if self.head_depth == 0 || self.weight_hidden == 0 || self.fuse_hidden == 0 {
            return Err(config_err!("head depth and hidden widths must be positive"));
        }
        if self.share_branch_weights {
            let plans = group_branches(&self.grouping, self.channels);
            if plans.iter().any(|p| p.in_channels != plans[0].in_channels) {
                return Err(config_err!("shared branch weights need groups of equal size, got {}", self.grouping));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, first 12 hex digits.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex(&Sha256::digest(json.as_bytes()))[..12].to_string()
    }

    fn token_dim(&self) -> usize {
        self.backbone.stage_channels()[3]
    }

    /// Clip-level `(T, H, W)` requirements.
    pub fn check_clip(&self, t: usize, h: usize, w: usize) -> Result<()> {
        for (axis, len) in [("height", h), ("width", w)] {
            if len % 2 != 0 {
                return Err(dim_err!("clip {axis} {len} must be even for the Haar front end"));
            }
        }
        self.backbone.check_input(t, h / 2, w / 2)?;
        let t4 = t / self.backbone.temporal_factors()[3];
        if t4 > self.max_tokens {
            return Err(dim_err!("{t4} tokens exceed max_tokens {}", self.max_tokens));
        }
        Ok(())
    }
}

/// Everything a forward pass produces, as graph handles.
pub struct ForwardOutput {
    pub logits: Var,
    /// `(N, groups)` sigmoid weights.
    pub band_weights: Var,
    /// Per branch: self-attention maps and, for detail groups with a nonzero
    /// strength, cross-attention maps, all `(N, T', T')`.
    pub attention: Vec<(String, Var, Option<Var>)>,
    /// Present only when a secret was supplied.
    pub promotion: Option<(PromotionTargets, Projections)>,
}

/// Logits and fusion weights for one clip.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub band_weights: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Network {
    pub cfg: NetworkConfig,
    pub params: ParamStore,
}

impl Network {
    pub fn new(cfg: NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let plans = group_branches(&cfg.grouping, cfg.channels);
        for plan in &plans {
            let prefix = branch_prefix(&cfg, plan);
            if !params.contains(&format!("{prefix}.stem.conv.weight")) {
                init_backbone(&mut params, &prefix, plan.in_channels, &cfg.backbone, &mut rng);
            }
        }
        let d = cfg.token_dim();
        init_encodings(&mut params, cfg.position_encoding, cfg.max_tokens, d, &mut rng);
        for plan in &plans {
            init_group_attention(&mut params, &plan.name, d, plan.role == AttentionRole::AgainstLl, &mut rng);
        }
        init_projections(&mut params, &cfg.backbone.stage_channels(), cfg.channels, &mut rng);
        let g = plans.len();
        params.add_linear("agg.weight.fc1", g * d, cfg.weight_hidden, true, &mut rng);
        params.add_linear("agg.weight.fc2", cfg.weight_hidden, g, true, &mut rng);
        params.add_linear("agg.fuse.conv1", g, cfg.fuse_hidden, true, &mut rng);
        params.add_linear("agg.fuse.conv2", cfg.fuse_hidden, 1, true, &mut rng);
        for i in 0..cfg.head_depth - 1 {
            params.add_linear(&format!("head.hidden{i}"), d, d, true, &mut rng);
        }
        params.add_linear("head.out", d, cfg.num_classes, true, &mut rng);
        Ok(Self { cfg, params })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.params.save(dir, &self.cfg.fingerprint())?;
        std::fs::write(
            dir.join("network.json"),
            serde_json::to_string_pretty(&self.cfg).map_err(|e| Error::Io(std::io::Error::other(e)))?,
        )?;
        Ok(())
    }

    /// Load a checkpoint written by [`Network::save`]; `expected` (when given)
    /// must match the stored configuration.
    pub fn load(dir: &Path, expected: Option<&NetworkConfig>) -> Result<Self> {
        let path = dir.join("network.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::data(&path, e))?;
        let cfg: NetworkConfig = serde_json::from_str(&text).map_err(|e| Error::data(&path, e))?;
        let want = expected.unwrap_or(&cfg).fingerprint();
        let params = ParamStore::load(dir, &want)?;
        Ok(Self { cfg, params })
    }

    /// Forward a batch `(N, T, H, W, C)`. Passing `secret` (same shape) adds
    /// promotion targets and projections to the output.
    pub fn forward(&self, g: &mut Graph, stego: &Tensor, secret: Option<&Tensor>) -> Result<ForwardOutput> {
        let x = g.constant(stego.clone());
        self.forward_var(g, x, secret)
    }

    /// [`Network::forward`] on a clip batch already recorded on the graph.
    pub fn forward_var(&self, g: &mut Graph, x: Var, secret: Option<&Tensor>) -> Result<ForwardOutput> {
        let cfg = &self.cfg;
        let store = &self.params;
        let s = g.shape(x).to_vec();
        let s = s.as_slice();
        if s.len() != 5 || s[4] != cfg.channels {
            return Err(dim_err!("stego batch must be (N, T, H, W, {}), got {:?}", cfg.channels, s));
        }
        cfg.check_clip(s[1], s[2], s[3])?;
        if let Some(sec) = secret {
            if sec.shape() != s {
                return Err(dim_err!("secret batch {:?} does not match stego batch {:?}", sec.shape(), s));
            }
            SECRET_FORWARDS.with(|c| c.set(c.get() + 1));
        }
        let bands = g.haar_spatial(x)?;
        let band_vars: Vec<Var> = (0..4).map(|i| g.index0(bands, i)).collect::<Result<_>>()?;

        let plans = group_branches(&cfg.grouping, cfg.channels);
        let mut stage_outputs = Vec::with_capacity(plans.len());
        let mut tokens = Vec::with_capacity(plans.len());
        for plan in &plans {
            let parts: Vec<Var> = plan.bands.iter().map(|b| band_vars[b.index()]).collect();
            let input = if parts.len() == 1 { parts[0] } else { g.concat(&parts, 4)? };
            let stages = forward_stages(g, store, &branch_prefix(cfg, plan), &cfg.backbone, input)?;
            // (N, T4, H4, W4, C4) -> (N, T4, C4)
            let pooled = g.mean_axis(stages[3], 3)?;
            tokens.push(g.mean_axis(pooled, 2)?);
            stage_outputs.push(stages);
        }

        let ll_index = plans.iter().position(|p| p.bands.contains(&Band::LL));
        let mut attended = Vec::with_capacity(plans.len());
        let mut attention = Vec::with_capacity(plans.len());
        for (i, plan) in plans.iter().enumerate() {
            let out = match (plan.role, ll_index) {
                (AttentionRole::AgainstLl, Some(li)) => {
                    cross_band_block(g, store, &plan.name, cfg.position_encoding, tokens[li], tokens[i], cfg.theta)?
                }
                _ => ll_self_attention(g, store, &plan.name, cfg.position_encoding, tokens[i])?,
            };
            attended.push(out.tokens);
            attention.push((plan.name.clone(), out.self_weights, out.cross_weights));
        }

        let (fused, band_weights) = aggregate(g, store, &attended)?;
        let mut h = fused;
        for i in 0..cfg.head_depth - 1 {
            h = linear(g, store, &format!("head.hidden{i}"), h)?;
            h = g.relu(h);
        }
        let logits = linear(g, store, "head.out", h)?;

        let promotion = match secret {
            None => None,
            Some(sec) => {
                let clip_shape = &s[1..];
                let lengths: Vec<usize> = cfg.backbone.temporal_factors().iter().map(|f| s[1] / f).collect();
                let per_clip = (0..s[0])
                    .map(|n| {
                        let clip = sec.index0(n)?;
                        debug_assert_eq!(clip.shape(), clip_shape);
                        build_targets(&clip, cfg.levels, &lengths, cfg.magnitude_targets)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let targets = PromotionTargets::stack(&per_clip)?;
                let mut proj: Projections = Vec::with_capacity(cfg.levels);
                for level in 1..=cfg.levels {
                    let mut row = Vec::with_capacity(3);
                    for band in Band::HIGH {
                        let gi = plans.iter().position(|p| p.bands.contains(&band)).expect("partition covers every band");
                        let z = stage_outputs[gi][level - 1];
                        row.push(dwc_forward(g, store, level, band, z, cfg.magnitude_targets)?);
                    }
                    proj.push(row.try_into().expect("three detail bands"));
                }
                Some((targets, proj))
            }
        };
        Ok(ForwardOutput {
            logits,
            band_weights,
            attention,
            promotion,
        })
    }

    /// Evaluation-mode prediction for one clip `(T, H, W, C)`.
    pub fn predict(&self, clip: &Tensor) -> Result<Prediction> {
        let mut shape = vec![1];
        shape.extend_from_slice(clip.shape());
        let batch = clip.clone().reshape(&shape)?;
        let mut g = Graph::new(Mode::Eval);
        let out = self.forward(&mut g, &batch, None)?;
        Ok(Prediction {
            logits: g.value(out.logits).data().to_vec(),
            band_weights: g.value(out.band_weights).data().to_vec(),
        })
    }
}

fn branch_prefix(cfg: &NetworkConfig, plan: &BranchPlan) -> String {
    if cfg.share_branch_weights {
        "branch.shared".to_string()
    } else {
        format!("branch.{}", plan.name)
    }
}

/// Fuse per-group token sequences `(N, T, C)` into one `(N, C)` vector.
/// Returns `(fused, weights)` with `weights: (N, G)`.
pub fn aggregate(g: &mut Graph, store: &ParamStore, band_tokens: &[Var]) -> Result<(Var, Var)> {
    let first = band_tokens.first().ok_or_else(|| dim_err!("aggregation needs at least one band"))?;
    let shape = g.shape(*first).to_vec();
    if shape.len() != 3 {
        return Err(dim_err!("band tokens must be (N, T, C), got {:?}", shape));
    }
    let expected_groups = store
        .get("agg.weight.fc2.weight")
        .map(|w| w.shape()[1])
        .ok_or_else(|| config_err!("aggregation parameters are missing"))?;
    if band_tokens.len() != expected_groups {
        return Err(dim_err!("aggregation expects {} bands, got {}", expected_groups, band_tokens.len()));
    }
    let (n, c) = (shape[0], shape[2]);
    let mut vectors = Vec::with_capacity(band_tokens.len());
    for &t in band_tokens {
        if g.shape(t) != shape.as_slice() {
            return Err(dim_err!("band tokens {:?} and {:?} differ", g.shape(t), shape));
        }
        vectors.push(g.mean_axis(t, 1)?);
    }
    let groups = vectors.len();
    let stacked = g.stack1(&vectors)?; // (N, G, C)
    let flat = g.reshape(stacked, &[n, groups * c])?;
    let h = linear(g, store, "agg.weight.fc1", flat)?;
    let h = g.relu(h);
    let w = linear(g, store, "agg.weight.fc2", h)?;
    let weights = g.sigmoid(w);
    let weighted = g.mul_leading(stacked, weights)?;
    // Kernel-1 convolution over the band axis: bands act as input channels.
    let by_feature = g.transpose_last2(weighted)?; // (N, C, G)
    let h = linear(g, store, "agg.fuse.conv1", by_feature)?;
    let h = g.relu(h);
    let fused = linear(g, store, "agg.fuse.conv2", h)?; // (N, C, 1)
    let fused = g.reshape(fused, &[n, c])?;
    Ok((fused, weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_cfg() -> NetworkConfig {
        NetworkConfig {
            backbone: BackboneConfig::with_width(4),
            ..Default::default()
        }
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn grouping_parse_and_validate() {
        assert_eq!(Grouping::separate().to_string(), "LL|LH|HL|HH");
        let g: Grouping = "LL|LH,HL,HH".parse().unwrap();
        assert_eq!(g.groups().len(), 2);
        assert!(matches!("LL|LH".parse::<Grouping>(), Err(Error::Config(_))));
        assert!(matches!("LL,LH|LH,HL,HH".parse::<Grouping>(), Err(Error::Config(_))));
        assert_eq!(Grouping::ablation_suite().len(), 6);
    }

    #[test]
    fn branch_plans_follow_grouping() {
        let p = group_branches(&Grouping::separate(), 3);
        assert_eq!(p.len(), 4);
        assert!(p.iter().all(|b| b.in_channels == 3));
        assert_eq!(p[0].role, AttentionRole::SelfOnly);
        assert!(p[1..].iter().all(|b| b.role == AttentionRole::AgainstLl));

        let p = group_branches(&"LL,LH,HL,HH".parse().unwrap(), 3);
        assert_eq!((p.len(), p[0].in_channels, p[0].role), (1, 12, AttentionRole::SelfOnly));

        let p = group_branches(&"LL|LH,HL,HH".parse().unwrap(), 3);
        assert_eq!(p.iter().map(|b| b.in_channels).collect::<Vec<_>>(), vec![3, 9]);
    }

    #[test]
    fn desk_forward_shapes_and_weights() {
        let net = Network::new(tiny_cfg(), 0).unwrap();
        let p = net.predict(&random(&[16, 32, 32, 3], 1)).unwrap();
        assert_eq!(p.logits.len(), 4);
        assert_eq!(p.band_weights.len(), 4);
        assert!(p.band_weights.iter().all(|&w| w > 0.0 && w < 1.0));
        assert!(p.logits.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let net = Network::new(tiny_cfg(), 2).unwrap();
        let clip = random(&[16, 32, 32, 3], 3);
        assert_eq!(net.predict(&clip).unwrap().logits, net.predict(&clip).unwrap().logits);
    }

    #[test]
    fn every_grouping_builds_and_runs() {
        for grouping in Grouping::ablation_suite() {
            let cfg = NetworkConfig { grouping, ..tiny_cfg() };
            let net = Network::new(cfg, 4).unwrap();
            let p = net.predict(&random(&[8, 32, 32, 3], 5)).unwrap();
            assert!(p.logits.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn secret_adds_projections_matching_targets() {
        let net = Network::new(tiny_cfg(), 6).unwrap();
        let stego = random(&[2, 16, 32, 32, 3], 7);
        let secret = random(&[2, 16, 32, 32, 3], 8);
        let mut g = Graph::new(Mode::Train);
        let out = net.forward(&mut g, &stego, Some(&secret)).unwrap();
        let (targets, proj) = out.promotion.unwrap();
        for (n, row) in proj.iter().enumerate() {
            for (b, &m) in row.iter().enumerate() {
                assert_eq!(g.shape(m), targets.spatial[n][b].shape());
            }
        }
        let mut g = Graph::new(Mode::Eval);
        assert!(net.forward(&mut g, &stego, None).unwrap().promotion.is_none());
        let bad = random(&[2, 16, 16, 32, 3], 9);
        assert!(matches!(net.forward(&mut g, &stego, Some(&bad)), Err(Error::Dimension(_))));
    }

    #[test]
    fn logits_have_live_input_gradient() {
        let net = Network::new(tiny_cfg(), 10).unwrap();
        let stego = random(&[2, 16, 32, 32, 3], 11);
        let mut g = Graph::new(Mode::Train);
        let x = g.input(stego);
        let out = net.forward_var(&mut g, x, None).unwrap();
        let l = g.cross_entropy(out.logits, &[0, 1]).unwrap();
        let grads = g.backward(l).unwrap();
        let dx = grads.wrt(x).unwrap();
        assert!(dx.all_finite() && dx.max_abs() > 0.0);
        let grads = grads.into_param_grads();
        assert!(grads.values().all(|t| t.all_finite()));
        assert!(grads["branch.LH.stem.conv.weight"].max_abs() > 0.0);
        assert!(grads["attn.HH.ca.q.weight"].max_abs() > 0.0);
    }

    #[test]
    fn saturated_weights_pass_bands_through_unscaled() {
        let mut net = Network::new(tiny_cfg(), 12).unwrap();
        net.params.set("agg.weight.fc2.bias", Tensor::full(&[4], 20.0)).unwrap();
        net.params.set("agg.weight.fc2.weight", Tensor::zeros(&[16, 4])).unwrap();
        let tokens: Vec<Tensor> = (0..4).map(|i| random(&[1, 2, 32], 20 + i)).collect();
        let mut g = Graph::new(Mode::Eval);
        let vars: Vec<Var> = tokens.iter().map(|t| g.constant(t.clone())).collect();
        let (fused, w) = aggregate(&mut g, &net.params, &vars).unwrap();
        assert!(g.value(w).data().iter().all(|&v| (1.0 - v).abs() < 1e-8));
        // Same fusion with the weighting step removed.
        let means: Vec<Var> = vars.iter().map(|&v| g.mean_axis(v, 1).unwrap()).collect();
        let stacked = g.stack1(&means).unwrap();
        let t = g.transpose_last2(stacked).unwrap();
        let h = linear(&mut g, &net.params, "agg.fuse.conv1", t).unwrap();
        let h = g.relu(h);
        let f = linear(&mut g, &net.params, "agg.fuse.conv2", h).unwrap();
        let f = g.reshape(f, &[1, 32]).unwrap();
        assert!(g.value(fused).max_abs_diff(g.value(f)) < 1e-6);
    }

    #[test]
    fn identical_bands_with_equal_weights_are_permutation_invariant() {
        let mut net = Network::new(tiny_cfg(), 13).unwrap();
        net.params.set("agg.weight.fc2.weight", Tensor::zeros(&[16, 4])).unwrap();
        net.params.set("agg.weight.fc2.bias", Tensor::zeros(&[4])).unwrap();
        // A fusion kernel that treats the band inputs symmetrically.
        net.params.set("agg.fuse.conv1.weight", Tensor::full(&[4, 4], 0.3)).unwrap();
        let base = random(&[1, 2, 32], 30);
        let other = random(&[1, 2, 32], 31);
        let run = |order: &[&Tensor]| {
            let mut g = Graph::new(Mode::Eval);
            let vars: Vec<Var> = order.iter().map(|t| g.constant((*t).clone())).collect();
            let (f, _) = aggregate(&mut g, &net.params, &vars).unwrap();
            g.value(f).clone()
        };
        let same = run(&[&base, &base, &base, &base]);
        assert!(same.all_finite());
        let a = run(&[&other, &base, &base, &base]);
        let b = run(&[&base, &base, &other, &base]);
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn zeroed_band_changes_fusion() {
        let net = Network::new(tiny_cfg(), 14).unwrap();
        let tokens: Vec<Tensor> = (0..4).map(|i| random(&[1, 2, 32], 40 + i)).collect();
        let run = |ts: &[Tensor]| {
            let mut g = Graph::new(Mode::Eval);
            let vars: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
            let (f, _) = aggregate(&mut g, &net.params, &vars).unwrap();
            g.value(f).clone()
        };
        let mut zeroed = tokens.clone();
        zeroed[2] = Tensor::zeros(zeroed[2].shape());
        assert!(run(&tokens).max_abs_diff(&run(&zeroed)) > 1e-9);
        assert!(matches!(
            {
                let mut g = Graph::new(Mode::Eval);
                let vars: Vec<Var> = tokens[..3].iter().map(|t| g.constant(t.clone())).collect();
                aggregate(&mut g, &net.params, &vars).map(|_| ())
            },
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let net = Network::new(tiny_cfg(), 15).unwrap();
        let dir = tempfile::tempdir().unwrap();
        net.save(dir.path()).unwrap();
        let back = Network::load(dir.path(), Some(&net.cfg)).unwrap();
        assert_eq!(back.params.content_hash(), net.params.content_hash());
        let other = NetworkConfig { theta: 0.3, ..tiny_cfg() };
        assert!(matches!(Network::load(dir.path(), Some(&other)), Err(Error::Config(_))));
    }

    #[test]
    fn zero_theta_with_separate_groups_matches_self_attention_reference() {
        let cfg = NetworkConfig { theta: 0.0, ..tiny_cfg() };
        let net = Network::new(cfg.clone(), 16).unwrap();
        let clip = random(&[1, 8, 32, 32, 3], 17);
        let mut g = Graph::new(Mode::Eval);
        let out = net.forward(&mut g, &clip, None).unwrap();
        assert!(out.attention.iter().all(|(_, _, cross)| cross.is_none()));
        // Reference: every branch through residual self-attention only.
        let mut r = Graph::new(Mode::Eval);
        let x = r.constant(clip.clone());
        let bands = r.haar_spatial(x).unwrap();
        let mut attended = Vec::new();
        for (i, b) in Band::ALL.iter().enumerate() {
            let input = r.index0(bands, i).unwrap();
            let st = forward_stages(&mut r, &net.params, &format!("branch.{b}"), &cfg.backbone, input).unwrap();
            let p = r.mean_axis(st[3], 3).unwrap();
            let tok = r.mean_axis(p, 2).unwrap();
            let group = b.to_string();
            let o = if *b == Band::LL {
                ll_self_attention(&mut r, &net.params, &group, cfg.position_encoding, tok).unwrap()
            } else {
                cross_band_block(&mut r, &net.params, &group, cfg.position_encoding, tok, tok, 0.0).unwrap()
            };
            attended.push(o.tokens);
        }
        let (f, _) = aggregate(&mut r, &net.params, &attended).unwrap();
        let logits = linear(&mut r, &net.params, "head.out", f).unwrap();
        assert_eq!(g.value(out.logits), r.value(logits));
    }
}
