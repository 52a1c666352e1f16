//! Temporal position encodings for token sequences `(N, T, d)`.
//!
//! The rotary variants split each token into halves `u`, `v` and return
//! `[u * c - v * s, u * s + v * c]` with `c = cos(angle) + eps_cos` and
//! `s = sin(angle) + eps_sin`. With both offsets zero this is a plain rotation
//! of each `(u_i, v_i)` pair, so query/key inner products depend only on the
//! position difference.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mode, Var};
use crate::error::{config_err, dim_err, Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const ANGLE_BASE: f64 = 10000.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositionEncoding {
    None,
    /// Learned vectors added to each position.
    Absolute,
    /// Fixed rotation.
    Rope,
    /// Rotation with learnable cosine/sine offsets per position and pair.
    DyTemp,
}

impl PositionEncoding {
    pub const ALL: [PositionEncoding; 4] = [Self::None, Self::Absolute, Self::Rope, Self::DyTemp];
}

impl fmt::Display for PositionEncoding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Absolute => "absolute",
            Self::Rope => "rope",
            Self::DyTemp => "dytemp",
        })
    }
}

impl FromStr for PositionEncoding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Self::None),
            "absolute" => Ok(Self::Absolute),
            "rope" => Ok(Self::Rope),
            "dytemp" => Ok(Self::DyTemp),
            other => Err(config_err!("unknown position encoding '{other}' (none, absolute, rope, dytemp)")),
        }
    }
}

/// Angles `pos * base^(-2i/d)` for `pos < len`, `i < d/2`.
pub fn angle_table(len: usize, d: usize) -> Tensor {
    let half = d / 2;
    Tensor::from_fn(&[len, half], |idx| {
        let (pos, i) = (idx / half, idx % half);
        pos as f64 * ANGLE_BASE.powf(-2.0 * i as f64 / d as f64)
    })
}

pub fn init_encoding(store: &mut ParamStore, prefix: &str, kind: PositionEncoding, max_len: usize, d: usize, rng: &mut impl Rng) {
    match kind {
        PositionEncoding::None | PositionEncoding::Rope => {}
        PositionEncoding::Absolute => {
            let normal = Normal::new(0.0, 0.02).expect("finite std");
            store.insert(
                format!("{prefix}.pos"),
                Tensor::from_fn(&[max_len, d], |_| normal.sample(rng)),
                true,
            );
        }
        PositionEncoding::DyTemp => {
            store.insert(format!("{prefix}.eps_cos"), Tensor::zeros(&[max_len, d / 2]), true);
            store.insert(format!("{prefix}.eps_sin"), Tensor::zeros(&[max_len, d / 2]), true);
        }
    }
}

/// Rotate `x: (N, T, d)` with optional offsets already shaped `(T, d/2)`.
pub fn rotate(g: &mut Graph, x: Var, eps_cos: Option<Var>, eps_sin: Option<Var>) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 {
        return Err(dim_err!("rotary encoding expects (N, T, d), got {:?}", s));
    }
    let (t, d) = (s[1], s[2]);
    if d % 2 != 0 {
        return Err(dim_err!("rotary encoding needs an even feature width, got d={}", d));
    }
    let half = d / 2;
    let angles = angle_table(t, d);
    let mut c = g.constant(angles.map(f64::cos));
    let mut sn = g.constant(angles.map(f64::sin));
    if let Some(e) = eps_cos {
        c = g.add(c, e)?;
    }
    if let Some(e) = eps_sin {
        sn = g.add(sn, e)?;
    }
    let u = g.narrow(x, 2, 0, half)?;
    let v = g.narrow(x, 2, half, half)?;
    let uc = g.mul_trailing(u, c)?;
    let vs = g.mul_trailing(v, sn)?;
    let us = g.mul_trailing(u, sn)?;
    let vc = g.mul_trailing(v, c)?;
    let first = g.sub(uc, vs)?;
    let second = g.add(us, vc)?;
    g.concat(&[first, second], 2)
}

/// Apply the encoding stored under `prefix` to tokens `(N, T, d)`.
pub fn encode(g: &mut Graph, store: &ParamStore, prefix: &str, kind: PositionEncoding, x: Var) -> Result<Var> {
    let t = g.shape(x).get(1).copied().unwrap_or(0);
    let truncated = |g: &mut Graph, name: &str| -> Result<Var> {
        let p = g.param(store, &format!("{prefix}.{name}"))?;
        let max_len = g.shape(p)[0];
        if t > max_len {
            return Err(dim_err!("sequence length {t} exceeds the encoding's maximum {max_len}"));
        }
        g.narrow(p, 0, 0, t)
    };
    match kind {
        PositionEncoding::None => Ok(x),
        PositionEncoding::Rope => rotate(g, x, None, None),
        PositionEncoding::DyTemp => {
            let ec = truncated(g, "eps_cos")?;
            let es = truncated(g, "eps_sin")?;
            rotate(g, x, Some(ec), Some(es))
        }
        PositionEncoding::Absolute => {
            let pos = truncated(g, "pos")?;
            g.add_trailing(x, pos)
        }
    }
}

/// Single-sequence form: `x: (T, d)`, offsets `(T, d/2)`.
pub fn rotate_offsets(x: &Tensor, eps_cos: &Tensor, eps_sin: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 2 {
        return Err(dim_err!("rotate_offsets expects (T, d), got {:?}", s));
    }
    if !s[1].is_multiple_of(2) {
        return Err(dim_err!("rotate_offsets needs an even feature width, got d={}", s[1]));
    }
    let want = [s[0], s[1] / 2];
    if eps_cos.shape() != want || eps_sin.shape() != want {
        return Err(dim_err!("rotate_offsets offsets must be {:?}", want));
    }
    let mut g = Graph::new(Mode::Eval);
    let xv = g.constant(x.clone().reshape(&[1, s[0], s[1]])?);
    let ec = g.constant(eps_cos.clone());
    let es = g.constant(eps_sin.clone());
    let y = rotate(&mut g, xv, Some(ec), Some(es))?;
    g.value(y).clone().reshape(s)
}
