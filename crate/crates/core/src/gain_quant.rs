//! Gain (magnitude) quantizer: clipped μ-law companding followed by a
//! `B_mag`-bit mid-rise uniform quantizer on `[0, A]`.
//!
//! Forward passes always use the hard quantizer. Backward passes use the
//! derivative of the same chain with the uniform stage replaced by a sum of
//! shifted `tanh` steps.

use serde::{Deserialize, Serialize};

use crate::complexity::MulCounter;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainQuantizerConfig {
    /// Clip ceiling in the companded domain.
    pub a: f64,
    pub b_mag: u32,
    pub mu: f64,
    /// Sub-vector dimension.
    pub d: usize,
    /// Sharpness of the tanh surrogate.
    pub tau: f64,
}

impl Default for GainQuantizerConfig {
    fn default() -> Self {
        Self {
            a: 0.6,
            b_mag: 4,
            mu: 255.0,
            d: 16,
            tau: 8.0,
        }
    }
}

impl GainQuantizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.a > 0.0 && self.a <= 1.0) {
            return Err(Error::config("a", format!("{} not in (0, 1]", self.a)));
        }
        if self.b_mag == 0 || self.b_mag > 16 {
            return Err(Error::config("b_mag", format!("{} not in [1, 16]", self.b_mag)));
        }
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return Err(Error::config("mu", "must be positive"));
        }
        if self.d == 0 {
            return Err(Error::config("d", "must be positive"));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config("tau", "must be positive"));
        }
        Ok(())
    }

    /// Input magnitude at which the companded value reaches `A`.
    pub fn clip_threshold(&self) -> f64 {
        (self.d as f64).sqrt() * ((1.0 + self.mu).powf(self.a) - 1.0) / self.mu
    }

    pub fn levels(&self) -> usize {
        1 << self.b_mag
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GainCode {
    pub value: f64,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GainQuantizer {
    cfg: GainQuantizerConfig,
    sqrt_d: f64,
    mu_over_sqrt_d: f64,
    inv_ln1p_mu: f64,
    cells_over_a: f64,
    clip: f64,
    values: Vec<f64>,
}

// Inputs this far above √D are rounding noise from saturated encoders.
const DOMAIN_SLACK: f64 = 1e-9;

impl GainQuantizer {
    pub fn new(cfg: GainQuantizerConfig) -> Result<Self> {
        cfg.validate()?;
        let sqrt_d = (cfg.d as f64).sqrt();
        let mut q = Self {
            cfg,
            sqrt_d,
            mu_over_sqrt_d: cfg.mu / sqrt_d,
            inv_ln1p_mu: 1.0 / cfg.mu.ln_1p(),
            cells_over_a: cfg.levels() as f64 / cfg.a,
            clip: cfg.clip_threshold(),
            values: Vec::new(),
        };
        q.values = (0..cfg.levels())
            .map(|k| q.inv_mu_law(q.level(k)))
            .collect::<Result<_>>()?;
        Ok(q)
    }

    pub fn config(&self) -> &GainQuantizerConfig {
        &self.cfg
    }

    pub fn clip_threshold(&self) -> f64 {
        self.clip
    }

    /// The `2^B_mag` reconstruction magnitudes, increasing.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn check_magnitude(&self, x: f64) -> Result<f64> {
        if x.is_nan() || x < 0.0 || x > self.sqrt_d * (1.0 + DOMAIN_SLACK) {
            return Err(Error::Domain(format!(
                "gain {x} outside [0, {}]",
                self.sqrt_d
            )));
        }
        Ok(x.min(self.sqrt_d))
    }

    fn check_unit(&self, y: f64, hi: f64) -> Result<()> {
        if y.is_nan() || !(0.0..=hi).contains(&y) {
            return Err(Error::Domain(format!("{y} outside [0, {hi}]")));
        }
        Ok(())
    }

    /// `ln(1 + μx/√D) / ln(1 + μ)`.
    pub fn mu_law(&self, x: f64) -> Result<f64> {
        let x = self.check_magnitude(x)?;
        Ok((x * self.mu_over_sqrt_d).ln_1p() * self.inv_ln1p_mu)
    }

    /// μ-law output clipped at `A`. Since the μ-law is increasing and hits
    /// `A` exactly at the clip threshold, the clip is a `min`.
    pub fn clipped_mu_law(&self, x: f64) -> Result<f64> {
        Ok(self.mu_law(x)?.min(self.cfg.a))
    }

    /// `√D · ((1 + μ)^y − 1) / μ`.
    pub fn inv_mu_law(&self, y: f64) -> Result<f64> {
        self.check_unit(y, 1.0)?;
        Ok(self.sqrt_d * ((1.0 + self.cfg.mu).powf(y) - 1.0) / self.cfg.mu)
    }

    fn level(&self, k: usize) -> f64 {
        self.cfg.a * (k as f64 + 0.5) / self.cfg.levels() as f64
    }

    fn cell(&self, x: f64) -> usize {
        // round(2^B·x/A − 0.5) with round(t) = floor(t + 0.5).
        let t = (x * self.cells_over_a).floor();
        (t.max(0.0) as usize).min(self.cfg.levels() - 1)
    }

    /// Uniform quantizer on `[0, A]`: returns `(level, index)`.
    pub fn uniform_q(&self, x: f64) -> Result<(f64, usize)> {
        self.check_unit(x, self.cfg.a)?;
        let k = self.cell(x);
        Ok((self.level(k), k))
    }

    /// Smooth stand-in for [`Self::uniform_q`]:
    /// `(A / 2^{B+1}) · (Σ_{i=1}^{2^B − 1} tanh(τ(2^B·x/A − i)) + 2^B)`.
    pub fn soft_uniform_q(&self, x: f64) -> Result<f64> {
        self.check_unit(x, self.cfg.a)?;
        let n = self.cfg.levels();
        let t = x * self.cells_over_a;
        let sum: f64 = (1..n).map(|i| (self.cfg.tau * (t - i as f64)).tanh()).sum();
        Ok(self.cfg.a / (2 * n) as f64 * (sum + n as f64))
    }

    pub fn soft_uniform_q_deriv(&self, x: f64) -> Result<f64> {
        self.check_unit(x, self.cfg.a)?;
        let n = self.cfg.levels();
        let t = x * self.cells_over_a;
        let tau = self.cfg.tau;
        let sum: f64 = (1..n)
            .map(|i| {
                let th = (tau * (t - i as f64)).tanh();
                1.0 - th * th
            })
            .sum();
        // d/dx of the sum is τ·2^B/A per term; the prefactor is A/2^{B+1}.
        Ok(tau * sum / 2.0)
    }

    /// Hard gain quantization `h⁻¹(f_u(ĥ(g)))`.
    pub fn quantize(&self, g: f64) -> Result<GainCode> {
        self.quantize_counted(g, &mut MulCounter::new())
    }

    pub fn quantize_counted(&self, g: f64, mults: &mut MulCounter) -> Result<GainCode> {
        let g = self.check_magnitude(g)?;
        let companded = ((g * self.mu_over_sqrt_d).ln_1p() * self.inv_ln1p_mu).min(self.cfg.a);
        let k = self.cell(companded);
        mults.add(3);
        Ok(GainCode {
            value: self.values[k],
            index: k,
        })
    }

    /// Backward-pass slope at `g`: derivative of `h⁻¹(f̃_u(ĥ(g)))`, zero in
    /// the clipped region.
    pub fn surrogate_grad(&self, g: f64) -> Result<f64> {
        let g = self.check_magnitude(g)?;
        if g > self.clip {
            return Ok(0.0);
        }
        let y = self.mu_law(g)?.min(self.cfg.a);
        let soft = self.soft_uniform_q(y)?;
        let d_mu = self.mu_over_sqrt_d / ((1.0 + g * self.mu_over_sqrt_d) / self.inv_ln1p_mu);
        let d_soft = self.soft_uniform_q_deriv(y)?;
        let d_inv = self.sqrt_d * (1.0 + self.cfg.mu).powf(soft) / (self.cfg.mu * self.inv_ln1p_mu);
        Ok(d_inv * d_soft * d_mu)
    }

    /// Composite surrogate `h⁻¹(f̃_u(ĥ(g)))`; its derivative is
    /// [`Self::surrogate_grad`].
    pub fn surrogate(&self, g: f64) -> Result<f64> {
        let y = self.clipped_mu_law(g)?;
        self.inv_mu_law(self.soft_uniform_q(y)?)
    }
}
