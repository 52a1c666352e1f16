//! Residual attention over per-band token sequences `(N, T, d)`.
//!
//! Detail-band tokens get `x + SA(x) - theta * CA(x_ll, x)`: self-attention
//! plus a subtracted cross-attention whose queries come from the LL tokens.
//! The subtraction removes what the detail band shares with the LL band,
//! which is mostly cover content. The LL tokens get `x + SA(x)` only.
//!
//! Position encodings are shared: one set for every detail band and a
//! separate one for the LL band. Q/K/V maps are per group, single head and
//! without bias.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{dim_err, Result};
use crate::nn::{linear, ParamStore};
use crate::rotary::{encode, init_encoding, PositionEncoding};

pub const LL_ENCODING: &str = "pe.ll";
pub const DETAIL_ENCODING: &str = "pe.detail";

pub fn init_encodings(store: &mut ParamStore, kind: PositionEncoding, max_len: usize, d: usize, rng: &mut impl Rng) {
    init_encoding(store, LL_ENCODING, kind, max_len, d, rng);
    init_encoding(store, DETAIL_ENCODING, kind, max_len, d, rng);
}

/// Q/K/V for self-attention, plus a second set for cross-attention when
/// `cross` is set.
pub fn init_group_attention(store: &mut ParamStore, group: &str, d: usize, cross: bool, rng: &mut impl Rng) {
    let kinds: &[&str] = if cross { &["sa", "ca"] } else { &["sa"] };
    for kind in kinds {
        for m in ["q", "k", "v"] {
            store.add_linear(&format!("attn.{group}.{kind}.{m}"), d, d, false, rng);
        }
    }
}

/// Output tokens plus the attention weight maps `(N, T, T)`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionOut {
    pub tokens: Var,
    pub self_weights: Var,
    pub cross_weights: Option<Var>,
}

/// `softmax(q k^T / sqrt(d)) v`; returns `(output, weights)`.
pub fn attend(g: &mut Graph, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let d = *g.shape(q).last().unwrap_or(&1);
    let kt = g.transpose_last2(k)?;
    let scores = g.bmm(q, kt)?;
    let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
    let w = g.softmax_last(scores)?;
    Ok((g.bmm(w, v)?, w))
}

fn check_tokens(g: &Graph, x: Var, what: &str) -> Result<()> {
    if g.shape(x).len() != 3 {
        return Err(dim_err!("{what} tokens must be (N, T, d), got {:?}", g.shape(x)));
    }
    Ok(())
}

fn self_attention(g: &mut Graph, store: &ParamStore, group: &str, enc_prefix: &str, pe: PositionEncoding, x: Var) -> Result<(Var, Var)> {
    let q = linear(g, store, &format!("attn.{group}.sa.q"), x)?;
    let k = linear(g, store, &format!("attn.{group}.sa.k"), x)?;
    let v = linear(g, store, &format!("attn.{group}.sa.v"), x)?;
    let q = encode(g, store, enc_prefix, pe, q)?;
    let k = encode(g, store, enc_prefix, pe, k)?;
    attend(g, q, k, v)
}

/// `x_ll + SA(x_ll)` with the LL encoding on queries and keys.
pub fn ll_self_attention(g: &mut Graph, store: &ParamStore, group: &str, pe: PositionEncoding, x_ll: Var) -> Result<AttentionOut> {
    check_tokens(g, x_ll, "LL")?;
    let (sa, w) = self_attention(g, store, group, LL_ENCODING, pe, x_ll)?;
    Ok(AttentionOut {
        tokens: g.add(x_ll, sa)?,
        self_weights: w,
        cross_weights: None,
    })
}

/// `x_b + SA(x_b) - theta * CA(x_ll, x_b)`. The cross term is not built at
/// all when `theta == 0`.
pub fn cross_band_block(g: &mut Graph, store: &ParamStore, group: &str, pe: PositionEncoding, x_ll: Var, x_b: Var, theta: f64) -> Result<AttentionOut> {
    check_tokens(g, x_b, "detail")?;
    check_tokens(g, x_ll, "LL")?;
    if g.shape(x_ll) != g.shape(x_b) {
        return Err(dim_err!(
            "LL tokens {:?} and detail tokens {:?} differ",
            g.shape(x_ll),
            g.shape(x_b)
        ));
    }
    let (sa, sw) = self_attention(g, store, group, DETAIL_ENCODING, pe, x_b)?;
    let mut out = g.add(x_b, sa)?;
    let mut cross_weights = None;
    if theta != 0.0 {
        let q = linear(g, store, &format!("attn.{group}.ca.q"), x_ll)?;
        let k = linear(g, store, &format!("attn.{group}.ca.k"), x_b)?;
        let v = linear(g, store, &format!("attn.{group}.ca.v"), x_b)?;
        let q = encode(g, store, LL_ENCODING, pe, q)?;
        let k = encode(g, store, DETAIL_ENCODING, pe, k)?;
        let (ca, cw) = attend(g, q, k, v)?;
        let ca = g.scale(ca, theta);
        out = g.sub(out, ca)?;
        cross_weights = Some(cw);
    }
    Ok(AttentionOut {
        tokens: out,
        self_weights: sw,
        cross_weights,
    })
}
