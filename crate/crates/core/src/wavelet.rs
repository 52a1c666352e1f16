//! Orthonormal Haar transforms over channels-last video tensors.
//!
//! Spatial transforms act on the trailing `(H, W, C)` axes, so they work on a
//! single clip `(T, H, W, C)` and on a batch `(N, T, H, W, C)` alike. For a
//! 2x2 block `[[a, b], [c, d]]` the four coefficients are
//!
//! ```text
//! LL = (a + b + c + d) / 2      LH = (a - b + c - d) / 2
//! HL = (a + b - c - d) / 2      HH = (a - b - c + d) / 2
//! ```
//!
//! i.e. LH carries horizontal (along-width) detail, HL vertical detail and HH
//! diagonal detail. The transform matrix is orthogonal, so it preserves energy
//! and its adjoint is its inverse.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::tensor::{split_axis, Tensor};

const INV_SQRT2: f64 = std::f64::consts::FRAC_1_SQRT_2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Band {
    LL,
    LH,
    HL,
    HH,
}

impl Band {
    pub const ALL: [Band; 4] = [Band::LL, Band::LH, Band::HL, Band::HH];
    pub const HIGH: [Band; 3] = [Band::LH, Band::HL, Band::HH];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_high(self) -> bool {
        self != Band::LL
    }
}

impl fmt::Display for Band {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Band::LL => "LL",
            Band::LH => "LH",
            Band::HL => "HL",
            Band::HH => "HH",
        };
        f.write_str(s)
    }
}

impl FromStr for Band {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "LL" => Ok(Band::LL),
            "LH" => Ok(Band::LH),
            "HL" => Ok(Band::HL),
            "HH" => Ok(Band::HH),
            other => Err(Error::Config(format!("unknown sub-band '{other}'"))),
        }
    }
}

/// The four spatial sub-bands of one decomposition level.
#[derive(Clone, Debug, PartialEq)]
pub struct SubBandSet {
    pub ll: Tensor,
    pub lh: Tensor,
    pub hl: Tensor,
    pub hh: Tensor,
    pub level: usize,
}

impl SubBandSet {
    pub fn band(&self, band: Band) -> &Tensor {
        match band {
            Band::LL => &self.ll,
            Band::LH => &self.lh,
            Band::HL => &self.hl,
            Band::HH => &self.hh,
        }
    }

    pub fn band_mut(&mut self, band: Band) -> &mut Tensor {
        match band {
            Band::LL => &mut self.ll,
            Band::LH => &mut self.lh,
            Band::HL => &mut self.hl,
            Band::HH => &mut self.hh,
        }
    }

    pub fn energy(&self) -> f64 {
        Band::ALL.iter().map(|&b| self.band(b).sum_sq()).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TemporalBands {
    pub low: Tensor,
    pub high: Tensor,
}

fn spatial_dims(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    let r = shape.len();
    if r < 3 {
        return Err(dim_err!(
            "spatial transform needs (.., H, W, C), got rank {}",
            r
        ));
    }
    let outer = shape[..r - 3].iter().product();
    Ok((outer, shape[r - 3], shape[r - 2], shape[r - 1]))
}

/// One level of the 2D Haar transform on the trailing `(H, W, C)` axes.
pub fn dwt_spatial(x: &Tensor) -> Result<SubBandSet> {
    let (outer, h, w, c) = spatial_dims(x.shape())?;
    if h % 2 != 0 {
        return Err(dim_err!("spatial DWT needs even height, got H={}", h));
    }
    if w % 2 != 0 {
        return Err(dim_err!("spatial DWT needs even width, got W={}", w));
    }
    let (h2, w2) = (h / 2, w / 2);
    let n = outer * h2 * w2 * c;
    let (mut ll, mut lh, mut hl, mut hh) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let src = x.data();
    let row = w * c;
    for o in 0..outer {
        let base = o * h * row;
        for i in 0..h2 {
            let top = base + 2 * i * row;
            let bottom = top + row;
            for j in 0..w2 {
                let out = ((o * h2 + i) * w2 + j) * c;
                let left = 2 * j * c;
                for ch in 0..c {
                    let a = src[top + left + ch];
                    let b = src[top + left + c + ch];
                    let cc = src[bottom + left + ch];
                    let d = src[bottom + left + c + ch];
                    ll[out + ch] = 0.5 * (a + b + cc + d);
                    lh[out + ch] = 0.5 * (a - b + cc - d);
                    hl[out + ch] = 0.5 * (a + b - cc - d);
                    hh[out + ch] = 0.5 * (a - b - cc + d);
                }
            }
        }
    }
    let mut shape = x.shape().to_vec();
    let r = shape.len();
    shape[r - 3] = h2;
    shape[r - 2] = w2;
    Ok(SubBandSet {
        ll: Tensor::new(&shape, ll)?,
        lh: Tensor::new(&shape, lh)?,
        hl: Tensor::new(&shape, hl)?,
        hh: Tensor::new(&shape, hh)?,
        level: 1,
    })
}

/// Exact inverse of [`dwt_spatial`].
pub fn idwt_spatial(bands: &SubBandSet) -> Result<Tensor> {
    let shape = bands.ll.shape();
    for b in Band::HIGH {
        if bands.band(b).shape() != shape {
            return Err(dim_err!(
                "sub-band {} has shape {:?}, LL has {:?}",
                b,
                bands.band(b).shape(),
                shape
            ));
        }
    }
    let (outer, h2, w2, c) = spatial_dims(shape)?;
    let (h, w) = (2 * h2, 2 * w2);
    let row = w * c;
    let mut out = vec![0.0; outer * h * row];
    let (ll, lh, hl, hh) = (bands.ll.data(), bands.lh.data(), bands.hl.data(), bands.hh.data());
    for o in 0..outer {
        let base = o * h * row;
        for i in 0..h2 {
            let top = base + 2 * i * row;
            let bottom = top + row;
            for j in 0..w2 {
                let src = ((o * h2 + i) * w2 + j) * c;
                let left = 2 * j * c;
                for ch in 0..c {
                    let (s, x, y, z) = (ll[src + ch], lh[src + ch], hl[src + ch], hh[src + ch]);
                    out[top + left + ch] = 0.5 * (s + x + y + z);
                    out[top + left + c + ch] = 0.5 * (s - x + y - z);
                    out[bottom + left + ch] = 0.5 * (s + x - y - z);
                    out[bottom + left + c + ch] = 0.5 * (s - x - y + z);
                }
            }
        }
    }
    let mut out_shape = shape.to_vec();
    let r = out_shape.len();
    out_shape[r - 3] = h;
    out_shape[r - 2] = w;
    Tensor::new(&out_shape, out)
}

/// 1D Haar transform over frame pairs along `axis`.
pub fn dwt_temporal_axis(x: &Tensor, axis: usize) -> Result<TemporalBands> {
    if axis >= x.rank() {
        return Err(dim_err!("temporal axis {} for rank {}", axis, x.rank()));
    }
    let (outer, t, inner) = split_axis(x.shape(), axis);
    if t % 2 != 0 || t == 0 {
        return Err(dim_err!("temporal DWT needs an even, non-zero time length, got T={}", t));
    }
    let half = t / 2;
    let mut low = vec![0.0; outer * half * inner];
    let mut high = vec![0.0; outer * half * inner];
    let src = x.data();
    for o in 0..outer {
        for k in 0..half {
            let f0 = (o * t + 2 * k) * inner;
            let f1 = f0 + inner;
            let dst = (o * half + k) * inner;
            for i in 0..inner {
                let (a, b) = (src[f0 + i], src[f1 + i]);
                low[dst + i] = (a + b) * INV_SQRT2;
                high[dst + i] = (a - b) * INV_SQRT2;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = half;
    Ok(TemporalBands {
        low: Tensor::new(&shape, low)?,
        high: Tensor::new(&shape, high)?,
    })
}

pub fn idwt_temporal_axis(bands: &TemporalBands, axis: usize) -> Result<Tensor> {
    bands.low.expect_same_shape(&bands.high)?;
    if axis >= bands.low.rank() {
        return Err(dim_err!("temporal axis {} for rank {}", axis, bands.low.rank()));
    }
    let (outer, half, inner) = split_axis(bands.low.shape(), axis);
    let t = 2 * half;
    let mut out = vec![0.0; outer * t * inner];
    let (low, high) = (bands.low.data(), bands.high.data());
    for o in 0..outer {
        for k in 0..half {
            let src = (o * half + k) * inner;
            let f0 = (o * t + 2 * k) * inner;
            let f1 = f0 + inner;
            for i in 0..inner {
                let (l, h) = (low[src + i], high[src + i]);
                out[f0 + i] = (l + h) * INV_SQRT2;
                out[f1 + i] = (l - h) * INV_SQRT2;
            }
        }
    }
    let mut shape = bands.low.shape().to_vec();
    shape[axis] = t;
    Tensor::new(&shape, out)
}

/// Temporal transform over the leading axis.
pub fn dwt_temporal(x: &Tensor) -> Result<TemporalBands> {
    dwt_temporal_axis(x, 0)
}

pub fn idwt_temporal(bands: &TemporalBands) -> Result<Tensor> {
    idwt_temporal_axis(bands, 0)
}

/// Largest level count the spatial size admits (trailing powers of two).
pub fn max_levels(h: usize, w: usize) -> usize {
    if h == 0 || w == 0 {
        return 0;
    }
    h.trailing_zeros().min(w.trailing_zeros()) as usize
}

/// Repeated spatial decomposition of the LL band. Entry `n - 1` holds level `n`.
pub fn multilevel_dwt(x: &Tensor, levels: usize) -> Result<Vec<SubBandSet>> {
    let (_, h, w, _) = spatial_dims(x.shape())?;
    let limit = max_levels(h, w);
    if levels > limit {
        return Err(dim_err!(
            "{} levels need H, W divisible by {}; {}x{} allows at most {} levels",
            levels,
            1usize << levels.min(63),
            h,
            w,
            limit
        ));
    }
    let mut out: Vec<SubBandSet> = Vec::with_capacity(levels);
    for n in 1..=levels {
        let src = match out.last() {
            Some(prev) => &prev.ll,
            None => x,
        };
        let mut set = dwt_spatial(src)?;
        set.level = n;
        out.push(set);
    }
    Ok(out)
}

/// Energy split of one decomposition level, relative to that level's input.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LevelEnergy {
    pub level: usize,
    pub input_energy: f64,
    /// Fractions for LL, LH, HL, HH in that order.
    pub fractions: [f64; 4],
}

pub fn energy_table(x: &Tensor, levels: usize) -> Result<Vec<LevelEnergy>> {
    let sets = multilevel_dwt(x, levels)?;
    let mut input_energy = x.sum_sq();
    let mut rows = Vec::with_capacity(levels);
    for set in &sets {
        let mut fractions = [0.0; 4];
        for b in Band::ALL {
            fractions[b.index()] = if input_energy > 0.0 {
                set.band(b).sum_sq() / input_energy
            } else {
                0.0
            };
        }
        rows.push(LevelEnergy {
            level: set.level,
            input_energy,
            fractions,
        });
        input_energy = set.ll.sum_sq();
    }
    Ok(rows)
}
