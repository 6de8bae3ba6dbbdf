//! Entry-wise scalar quantization ablation: each latent entry in `[−1, 1]`
//! goes through an odd-symmetric μ-law and a `bits`-bit uniform quantizer on
//! `[−1, 1]`. The cells split evenly around zero, so the sign costs one bit
//! and the magnitude gets the rest.

use crate::complexity::MulCounter;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarQuantizer {
    bits: u32,
    mu: f64,
    values: Vec<f64>,
}

impl ScalarQuantizer {
    pub fn new(bits: u32, mu: f64) -> Result<Self> {
        if bits == 0 || bits > 16 {
            return Err(Error::config("quant.scalar_bits", format!("{bits} not in [1, 16]")));
        }
        if !(mu > 0.0 && mu.is_finite()) {
            return Err(Error::config("quant.mu", "must be positive"));
        }
        let n = 1usize << bits;
        let values = (0..n)
            .map(|k| {
                let y = -1.0 + 2.0 * (k as f64 + 0.5) / n as f64;
                y.signum() * ((1.0 + mu).powf(y.abs()) - 1.0) / mu
            })
            .collect();
        Ok(Self { bits, mu, values })
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    /// Reconstruction points, increasing and symmetric about zero.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn quantize(&self, x: f64, mults: &mut MulCounter) -> Result<(f64, usize)> {
        if x.is_nan() || x.abs() > 1.0 + 1e-9 {
            return Err(Error::Domain(format!("latent entry {x} outside [-1, 1]")));
        }
        let x = x.clamp(-1.0, 1.0);
        let companded = x.signum() * (self.mu * x.abs()).ln_1p() / self.mu.ln_1p();
        let n = self.values.len();
        let k = (((companded + 1.0) * (n / 2) as f64).floor().max(0.0) as usize).min(n - 1);
        mults.add(3);
        Ok((self.values[k], k))
    }
}

/// Quantizes every entry of `z` independently with `bits` bits.
pub fn scalar_ablation_quantize(z: &[f64], bits: u32, mu: f64) -> Result<Vec<f64>> {
    let q = ScalarQuantizer::new(bits, mu)?;
    let mut ctr = MulCounter::new();
    z.iter().map(|&x| q.quantize(x, &mut ctr).map(|p| p.0)).collect()
}
