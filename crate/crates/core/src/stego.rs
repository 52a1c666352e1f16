//! Hiding a secret video inside a cover video, plus imperceptibility metrics.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config_err, dim_err, Result};
use crate::tensor::Tensor;
use crate::wavelet::{dwt_spatial, idwt_spatial, Band};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HiderConfig {
    pub strength: f64,
    pub band_targets: Vec<Band>,
}

impl Default for HiderConfig {
    fn default() -> Self {
        Self {
            strength: 0.05,
            band_targets: Band::HIGH.to_vec(),
        }
    }
}

impl HiderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.strength > 0.0 && self.strength <= 1.0) {
            return Err(config_err!("hider strength must be in (0, 1], got {}", self.strength));
        }
        if self.band_targets.is_empty() {
            return Err(config_err!("hider needs at least one target band"));
        }
        if let Some(b) = self.band_targets.iter().find(|b| !b.is_high()) {
            return Err(config_err!("hider target band {b} is not a detail band"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct StegoPair {
    pub cover: Tensor,
    pub secret: Tensor,
    pub stego: Tensor,
    pub hider_id: String,
}

/// Anything that turns (cover, secret) into a stego clip of the cover's shape.
/// Implementations must be stateless across calls; training never updates them.
pub trait Hider: Send + Sync {
    fn id(&self) -> String;

    fn hide(&self, cover: &Tensor, secret: &Tensor) -> Result<Tensor>;

    /// Digest of everything that influences `hide`.
    fn state_hash(&self) -> String;

    fn embed(&self, cover: &Tensor, secret: &Tensor) -> Result<StegoPair> {
        let stego = self.hide(cover, secret)?;
        if stego.shape() != cover.shape() {
            return Err(dim_err!(
                "hider '{}' returned {:?} for cover {:?}",
                self.id(),
                stego.shape(),
                cover.shape()
            ));
        }
        Ok(StegoPair {
            cover: cover.clone(),
            secret: secret.clone(),
            stego,
            hider_id: self.id(),
        })
    }
}

/// Additive wavelet hider: the secret's half-resolution block means are added
/// to the cover's detail bands, split evenly across the target bands.
#[derive(Clone, Debug, Default)]
pub struct WaveletHider {
    pub cfg: HiderConfig,
}

impl WaveletHider {
    pub fn new(cfg: HiderConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    /// Per-band payload before scaling by the strength: the secret's LL band
    /// halved (its 2x2 block mean), divided by sqrt(band count).
    pub fn payload(&self, secret: &Tensor) -> Result<Tensor> {
        let k = self.cfg.band_targets.len() as f64;
        Ok(dwt_spatial(secret)?.ll.map(|v| v / (2.0 * k.sqrt())))
    }

    /// Stego clip before clamping.
    pub fn hide_unclamped(&self, cover: &Tensor, secret: &Tensor) -> Result<Tensor> {
        cover.expect_same_shape(secret)?;
        let payload = self.payload(secret)?;
        let mut bands = dwt_spatial(cover)?;
        let g = self.cfg.strength;
        for &b in &self.cfg.band_targets {
            let band = bands.band_mut(b);
            for (c, p) in band.data_mut().iter_mut().zip(payload.data()) {
                *c += g * p;
            }
        }
        idwt_spatial(&bands)
    }

    /// Recover the payload as `(stego_band - cover_band) / strength`, averaged
    /// over the target bands. Exact off the clamp-saturated blocks.
    pub fn extract_with_cover(&self, stego: &Tensor, cover: &Tensor) -> Result<Tensor> {
        self.cfg.validate()?;
        stego.expect_same_shape(cover)?;
        let s = dwt_spatial(stego)?;
        let c = dwt_spatial(cover)?;
        let n = self.cfg.band_targets.len() as f64;
        let mut out = Tensor::zeros(s.ll.shape());
        for &b in &self.cfg.band_targets {
            for ((o, sv), cv) in out.data_mut().iter_mut().zip(s.band(b).data()).zip(c.band(b).data()) {
                *o += (sv - cv) / (self.cfg.strength * n);
            }
        }
        Ok(out)
    }
}

impl Hider for WaveletHider {
    fn id(&self) -> String {
        format!("wavelet-additive(strength={})", self.cfg.strength)
    }

    fn hide(&self, cover: &Tensor, secret: &Tensor) -> Result<Tensor> {
        self.cfg.validate()?;
        Ok(self.hide_unclamped(cover, secret)?.clamp(0.0, 1.0))
    }

    fn state_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.id().as_bytes());
        h.update(self.cfg.strength.to_bits().to_le_bytes());
        for b in &self.cfg.band_targets {
            h.update([b.index() as u8]);
        }
        crate::nn::hex(&h.finalize())
    }
}

/// Peak signal-to-noise ratio in dB for peak value 1. Identical inputs give
/// `f64::INFINITY`.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.expect_same_shape(b)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len().max(1) as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / mse).log10() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
    }

    #[test]
    fn zero_secret_leaves_cover_untouched() {
        let cover = uniform(&[2, 8, 8, 3], 0.0, 1.0, 1);
        let h = WaveletHider::default();
        let pair = h.embed(&cover, &Tensor::zeros(cover.shape())).unwrap();
        assert!(pair.stego.max_abs_diff(&cover) < 1e-6);
    }

    #[test]
    fn invalid_strength_is_a_config_error() {
        for s in [0.0, -0.1] {
            let cfg = HiderConfig { strength: s, ..Default::default() };
            assert!(matches!(WaveletHider::new(cfg), Err(crate::Error::Config(_))));
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let h = WaveletHider::default();
        let r = h.embed(&Tensor::zeros(&[2, 8, 8, 3]), &Tensor::zeros(&[2, 8, 4, 3]));
        assert!(matches!(r, Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn unclamped_round_trip_recovers_payload() {
        let cover = uniform(&[4, 8, 8, 3], 0.2, 0.8, 2);
        let secret = uniform(&[4, 8, 8, 3], 0.0, 1.0, 3);
        let h = WaveletHider::default();
        let stego = h.hide_unclamped(&cover, &secret).unwrap();
        let got = h.extract_with_cover(&stego, &cover).unwrap();
        assert!(got.max_abs_diff(&h.payload(&secret).unwrap()) < 1e-5);
        assert!(h.extract_with_cover(&cover, &cover).unwrap().max_abs() == 0.0);
    }

    #[test]
    fn saturation_error_is_localized() {
        // Bright cover blocks saturate; dark ones do not.
        let mut cover = uniform(&[2, 8, 8, 3], 0.3, 0.6, 4);
        let (h, w, c) = (8, 8, 3);
        for t in 0..2 {
            for y in 0..4 {
                for x in 0..4 {
                    for ch in 0..c {
                        cover.data_mut()[((t * h + y) * w + x) * c + ch] = 0.999;
                    }
                }
            }
        }
        let secret = Tensor::full(cover.shape(), 1.0);
        let hider = WaveletHider::new(HiderConfig { strength: 0.5, ..Default::default() }).unwrap();
        let stego = hider.hide(&cover, &secret).unwrap();
        let unclamped = hider.hide_unclamped(&cover, &secret).unwrap();
        let err = hider
            .extract_with_cover(&stego, &cover)
            .unwrap()
            .zip_map(&hider.payload(&secret).unwrap(), |a, b| (a - b).abs())
            .unwrap();
        // A band position is saturated when any pixel of its 2x2 block was clamped.
        for t in 0..2 {
            for by in 0..4 {
                for bx in 0..4 {
                    for ch in 0..c {
                        let mut saturated = false;
                        for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            let i = ((t * h + 2 * by + dy) * w + 2 * bx + dx) * c + ch;
                            let v = unclamped.data()[i];
                            saturated |= !(0.0..=1.0).contains(&v);
                        }
                        let e = err.data()[((t * 4 + by) * 4 + bx) * c + ch];
                        assert_eq!(e > 1e-5, saturated, "block ({t},{by},{bx},{ch}) err {e}");
                    }
                }
            }
        }
    }

    #[test]
    fn psnr_examples() {
        let z = Tensor::zeros(&[2, 2, 2, 3]);
        assert_eq!(psnr(&z, &z).unwrap(), f64::INFINITY);
        assert!((psnr(&z, &Tensor::ones(z.shape())).unwrap() - 0.0).abs() < 1e-12);
        assert!((psnr(&z, &Tensor::full(z.shape(), 0.1)).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn psnr_falls_as_strength_rises() {
        let cover = uniform(&[4, 16, 16, 3], 0.0, 1.0, 5);
        let secret = uniform(&[4, 16, 16, 3], 0.0, 1.0, 6);
        let mut last = f64::INFINITY;
        for s in [0.01, 0.05, 0.1, 0.2] {
            let h = WaveletHider::new(HiderConfig { strength: s, ..Default::default() }).unwrap();
            let p = psnr(&cover, &h.hide(&cover, &secret).unwrap()).unwrap();
            assert!(p <= last);
            last = p;
        }
    }

    #[test]
    fn state_hash_tracks_config() {
        let a = WaveletHider::default();
        let b = WaveletHider::new(HiderConfig { strength: 0.1, ..Default::default() }).unwrap();
        assert_eq!(a.state_hash(), WaveletHider::default().state_hash());
        assert_ne!(a.state_hash(), b.state_hash());
    }
}
