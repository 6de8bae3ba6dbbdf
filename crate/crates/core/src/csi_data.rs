//! CSI matrices: synthetic sparse multipath generation, the unitary 2D DFT
//! between the spatial-frequency and angular-delay domains, delay
//! truncation, and NMSE scoring.
//!
//! The synthetic generator stands in for a full geometric channel model. Each
//! path is a rank-1 product of an integer delay tap (a pure phase ramp over
//! subcarriers) and a half-wavelength ULA steering vector, so every path lands
//! on a single row of the angular-delay matrix and rows at or beyond the
//! configured delay spread carry no energy.

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::{s, Array2, Axis};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub type CMatrix = Array2<Complex64>;

/// Reported NMSE in dB when a reconstruction is exact.
pub const NMSE_FLOOR_DB: f64 = -300.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelGenConfig {
    /// Transmit antennas (`N_t`).
    pub n_t: usize,
    /// Subcarriers (`N_c`).
    pub n_c: usize,
    /// Delay rows kept after truncation.
    pub n_c_trunc: usize,
    pub n_paths: usize,
    /// Path delays are drawn uniformly from taps `0..delay_spread_taps`.
    pub delay_spread_taps: usize,
    pub seed: u64,
    /// Rescale every sample to unit mean power per retained coefficient.
    #[serde(default)]
    pub normalize_power: bool,
}

impl Default for ChannelGenConfig {
    fn default() -> Self {
        Self {
            n_t: 8,
            n_c: 64,
            n_c_trunc: 8,
            n_paths: 3,
            delay_spread_taps: 2,
            seed: 1,
            normalize_power: false,
        }
    }
}

impl ChannelGenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_t == 0 {
            return Err(Error::config("n_t", "must be positive"));
        }
        if self.n_c == 0 {
            return Err(Error::config("n_c", "must be positive"));
        }
        if self.n_paths == 0 {
            return Err(Error::config("n_paths", "must be at least 1"));
        }
        if self.delay_spread_taps == 0 {
            return Err(Error::config("delay_spread_taps", "must be at least 1"));
        }
        if self.delay_spread_taps > self.n_c_trunc {
            return Err(Error::config(
                "delay_spread_taps",
                format!(
                    "{} exceeds n_c_trunc = {}",
                    self.delay_spread_taps, self.n_c_trunc
                ),
            ));
        }
        if self.n_c_trunc > self.n_c {
            return Err(Error::config(
                "n_c_trunc",
                format!("{} exceeds n_c = {}", self.n_c_trunc, self.n_c),
            ));
        }
        if self.n_c_trunc > u16::MAX as usize || self.n_t > u16::MAX as usize {
            return Err(Error::config("n_c_trunc", "dimensions must fit in u16"));
        }
        Ok(())
    }

    /// Per-path gain variance giving `E‖H̃_ad‖² = n_c_trunc · n_t`.
    fn path_variance(&self) -> f64 {
        self.n_c_trunc as f64 / (self.n_paths as f64 * self.n_c as f64)
    }
}

/// One user realization.
///
/// `h_sf` is absent for samples read back from a dataset file, which stores
/// only the truncated angular-delay matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSample {
    pub h_sf: Option<CMatrix>,
    pub h_ad_trunc: CMatrix,
}

impl ChannelSample {
    pub fn from_truncated(h_ad_trunc: CMatrix) -> Self {
        Self {
            h_sf: None,
            h_ad_trunc,
        }
    }

    /// Real/imaginary parts stacked into one row: all real parts in row-major
    /// order followed by all imaginary parts.
    pub fn to_real_vector(&self) -> Vec<f64> {
        stack_real_imag(&self.h_ad_trunc)
    }
}

pub fn stack_real_imag(h: &CMatrix) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * h.len());
    out.extend(h.iter().map(|c| c.re));
    out.extend(h.iter().map(|c| c.im));
    out
}

pub fn unstack_real_imag(v: &[f64], rows: usize, cols: usize) -> Result<CMatrix> {
    let n = rows * cols;
    if v.len() != 2 * n {
        return Err(Error::Shape(format!(
            "expected {} stacked values for {rows}x{cols}, got {}",
            2 * n,
            v.len()
        )));
    }
    Ok(Array2::from_shape_fn((rows, cols), |(r, c)| {
        let i = r * cols + c;
        Complex64::new(v[i], v[n + i])
    }))
}

/// Unitary 2D DFT `X ↦ F_d · X · F_a` for a fixed `n_c × n_t` shape.
pub struct AngularDelayTransform {
    n_c: usize,
    n_t: usize,
    fwd_delay: Arc<dyn Fft<f64>>,
    fwd_angle: Arc<dyn Fft<f64>>,
    inv_delay: Arc<dyn Fft<f64>>,
    inv_angle: Arc<dyn Fft<f64>>,
}

impl AngularDelayTransform {
    pub fn new(n_c: usize, n_t: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            n_c,
            n_t,
            fwd_delay: planner.plan_fft_forward(n_c),
            fwd_angle: planner.plan_fft_forward(n_t),
            inv_delay: planner.plan_fft_inverse(n_c),
            inv_angle: planner.plan_fft_inverse(n_t),
        }
    }

    pub fn to_angular_delay(&self, h_sf: &CMatrix) -> Result<CMatrix> {
        self.apply(h_sf, &*self.fwd_delay, &*self.fwd_angle)
    }

    pub fn to_spatial_frequency(&self, h_ad: &CMatrix) -> Result<CMatrix> {
        self.apply(h_ad, &*self.inv_delay, &*self.inv_angle)
    }

    // F_a is symmetric, so right-multiplication is a DFT along each row.
    fn apply(&self, x: &CMatrix, col_fft: &dyn Fft<f64>, row_fft: &dyn Fft<f64>) -> Result<CMatrix> {
        if x.dim() != (self.n_c, self.n_t) {
            return Err(Error::Shape(format!(
                "expected {}x{} CSI matrix, got {}x{}",
                self.n_c,
                self.n_t,
                x.nrows(),
                x.ncols()
            )));
        }
        let scale = 1.0 / ((self.n_c * self.n_t) as f64).sqrt();
        let mut out = x.to_owned();
        let mut buf = vec![Complex64::default(); self.n_c.max(self.n_t)];
        for mut col in out.axis_iter_mut(Axis(1)) {
            let b = &mut buf[..self.n_c];
            for (dst, src) in b.iter_mut().zip(col.iter()) {
                *dst = *src;
            }
            col_fft.process(b);
            for (dst, src) in col.iter_mut().zip(b.iter()) {
                *dst = *src;
            }
        }
        for mut row in out.axis_iter_mut(Axis(0)) {
            let b = &mut buf[..self.n_t];
            for (dst, src) in b.iter_mut().zip(row.iter()) {
                *dst = *src;
            }
            row_fft.process(b);
            for (dst, src) in row.iter_mut().zip(b.iter()) {
                *dst = *src * scale;
            }
        }
        Ok(out)
    }
}

/// Unitary 2D DFT of `h_sf` using its own dimensions.
pub fn to_angular_delay(h_sf: &CMatrix) -> Result<CMatrix> {
    AngularDelayTransform::new(h_sf.nrows(), h_sf.ncols()).to_angular_delay(h_sf)
}

pub fn to_spatial_frequency(h_ad: &CMatrix) -> Result<CMatrix> {
    AngularDelayTransform::new(h_ad.nrows(), h_ad.ncols()).to_spatial_frequency(h_ad)
}

/// First `n_c_trunc` delay rows.
pub fn truncate(h_ad: &CMatrix, n_c_trunc: usize) -> Result<CMatrix> {
    if n_c_trunc == 0 || n_c_trunc > h_ad.nrows() {
        return Err(Error::Shape(format!(
            "cannot keep {n_c_trunc} rows of a {}-row matrix",
            h_ad.nrows()
        )));
    }
    Ok(h_ad.slice(s![..n_c_trunc, ..]).to_owned())
}

pub fn energy(h: &CMatrix) -> f64 {
    h.iter().map(|c| c.norm_sqr()).sum()
}

/// A single planar-wavefront path with integer delay tap `delay` and
/// direction given by `sin_angle`:
/// `h[k, n] = gain · exp(j2π·k·delay/n_c) · exp(−jπ·n·sin_angle)`.
///
/// Under [`AngularDelayTransform`] the delay ramp maps to row `delay`.
pub fn planar_path(
    n_c: usize,
    n_t: usize,
    gain: Complex64,
    delay: usize,
    sin_angle: f64,
) -> CMatrix {
    let freq: Vec<Complex64> = (0..n_c)
        .map(|k| Complex64::from_polar(1.0, 2.0 * PI * (k * delay % n_c) as f64 / n_c as f64))
        .collect();
    let steer: Vec<Complex64> = (0..n_t)
        .map(|n| Complex64::from_polar(1.0, -PI * n as f64 * sin_angle))
        .collect();
    Array2::from_shape_fn((n_c, n_t), |(k, n)| gain * freq[k] * steer[n])
}

/// Deterministic synthetic dataset; sample `i` depends only on `(seed, i)`.
pub fn gen_channels(cfg: &ChannelGenConfig, count: usize) -> Result<Vec<ChannelSample>> {
    cfg.validate()?;
    if count == 0 {
        return Err(Error::config("count", "must be positive"));
    }
    let transform = AngularDelayTransform::new(cfg.n_c, cfg.n_t);
    (0..count)
        .into_par_iter()
        .map(|i| gen_one(cfg, &transform, i as u64))
        .collect()
}

fn gen_one(
    cfg: &ChannelGenConfig,
    transform: &AngularDelayTransform,
    index: u64,
) -> Result<ChannelSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    let sigma = (cfg.path_variance() / 2.0).sqrt();
    let mut h_sf = CMatrix::zeros((cfg.n_c, cfg.n_t));
    for _ in 0..cfg.n_paths {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        let gain = Complex64::new(re * sigma, im * sigma);
        let delay = rng.random_range(0..cfg.delay_spread_taps);
        let angle = rng.random_range(-PI / 2.0..PI / 2.0);
        h_sf += &planar_path(cfg.n_c, cfg.n_t, gain, delay, angle.sin());
    }
    let h_ad = transform.to_angular_delay(&h_sf)?;
    let mut h_ad_trunc = truncate(&h_ad, cfg.n_c_trunc)?;
    if cfg.normalize_power {
        let e = energy(&h_ad_trunc);
        if e > 0.0 {
            let k = ((cfg.n_c_trunc * cfg.n_t) as f64 / e).sqrt();
            h_ad_trunc.mapv_inplace(|c| c * k);
            h_sf.mapv_inplace(|c| c * k);
        }
    }
    Ok(ChannelSample {
        h_sf: Some(h_sf),
        h_ad_trunc,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Nmse {
    pub linear: f64,
    pub db: f64,
}

impl Nmse {
    pub fn from_linear(linear: f64) -> Self {
        let db = if linear > 0.0 {
            (10.0 * linear.log10()).max(NMSE_FLOOR_DB)
        } else {
            NMSE_FLOOR_DB
        };
        Self { linear, db }
    }
}

pub fn sample_nmse(target: &CMatrix, estimate: &CMatrix) -> Result<f64> {
    if target.dim() != estimate.dim() {
        return Err(Error::Shape(format!(
            "target {:?} vs estimate {:?}",
            target.dim(),
            estimate.dim()
        )));
    }
    let denom = energy(target);
    if denom == 0.0 {
        return Err(Error::Degenerate("zero-norm NMSE target".into()));
    }
    let num: f64 = target
        .iter()
        .zip(estimate.iter())
        .map(|(t, e)| (t - e).norm_sqr())
        .sum();
    Ok(num / denom)
}

/// Mean of per-sample `‖target − estimate‖²_F / ‖target‖²_F`.
pub fn nmse(targets: &[CMatrix], estimates: &[CMatrix]) -> Result<Nmse> {
    if targets.len() != estimates.len() {
        return Err(Error::Shape(format!(
            "{} targets vs {} estimates",
            targets.len(),
            estimates.len()
        )));
    }
    if targets.is_empty() {
        return Err(Error::Degenerate("empty NMSE batch".into()));
    }
    let per: Vec<f64> = targets
        .iter()
        .zip(estimates)
        .map(|(t, e)| sample_nmse(t, e))
        .collect::<Result<_>>()?;
    Ok(Nmse::from_linear(mean_in_order(&per)))
}

/// Sequential sum in index order, so parallel producers reduce
/// deterministically.
pub(crate) fn mean_in_order(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}
